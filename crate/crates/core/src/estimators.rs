//! Estimators of the conditional c.d.f.: the plug-in Gaussian c.d.f. and the
//! consistent estimator built from an auxiliary decision on the true order.

use crate::cond_dist::{CdfValue, QuadratureConfig, TruncatedGaussian};
use crate::error::{Error, Result};
use crate::mvn::MvnConfig;
use crate::regression::{finite_projection, DesignMatrix, NestedFamily, Sample, TargetMap};
use crate::selection::{gts_from_stats, t_stats};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

/// Threshold `s_{n,p}` of the auxiliary order test.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AuxRule {
    /// `|T_p| > sqrt(log n)`.
    #[default]
    SqrtLog,
    /// `|T_p| > coef * n^exponent`.
    Power { coef: f64, exponent: f64 },
    /// BIC comparison of `M_{p-1}` against `M_p`.
    Bic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuxDecision {
    /// `p_0 = p`.
    AtOrder,
    /// `p_0 < p`.
    Below,
}

/// Decides between `p_0 = p` and `p_0 < p` (for `p >= 1`).
pub fn aux_decide(sample: &Sample, p: usize, rule: AuxRule) -> Result<AuxDecision> {
    let t = t_stats(sample)?;
    aux_from_stats(sample, &t, p, rule)
}

fn aux_from_stats(sample: &Sample, t: &[f64], p: usize, rule: AuxRule) -> Result<AuxDecision> {
    if p == 0 || p >= t.len() {
        return Err(Error::InvalidArgument(format!("auxiliary decision needs 1 <= p <= P, got {p}")));
    }
    let n = sample.design().n() as f64;
    let at = match rule {
        AuxRule::SqrtLog => t[p].abs() > n.ln().sqrt(),
        AuxRule::Power { coef, exponent } => t[p].abs() > coef * n.powf(exponent),
        AuxRule::Bic => {
            // RSS(q) = RSS_full + sum_{j>q} u_j^2
            let u = sample.projected();
            let tail_p: f64 = u.iter().skip(p).map(|x| x * x).sum();
            let rss_p = sample.rss_full() + tail_p;
            let rss_m = rss_p + u[p - 1] * u[p - 1];
            n * rss_p.ln() + p as f64 * n.ln() < n * rss_m.ln() + (p - 1) as f64 * n.ln()
        }
    };
    Ok(if at { AuxDecision::AtOrder } else { AuxDecision::Below })
}

/// Estimator machinery precomputed for one `(design, A, family)`.
#[derive(Clone, Debug)]
pub struct CheckEstimator<'a> {
    design: &'a DesignMatrix,
    family: &'a NestedFamily,
    laws: Vec<Option<TruncatedGaussian>>,
    aux: AuxRule,
    mvn: MvnConfig,
    k: usize,
}

impl<'a> CheckEstimator<'a> {
    pub fn new(
        design: &'a DesignMatrix,
        target: &TargetMap,
        family: &'a NestedFamily,
        aux: AuxRule,
        quad: &QuadratureConfig,
    ) -> Result<Self> {
        if target.dim() != design.dim() || family.dim() != design.dim() {
            return Err(Error::InvalidArgument("dimension mismatch".into()));
        }
        let mut laws = vec![None];
        for p in 1..=design.dim() {
            laws.push(Some(TruncatedGaussian::new(&finite_projection(design, target, p)?)?));
        }
        let mvn = MvnConfig { points: quad.qmc_points, shifts: quad.qmc_shifts, seed: quad.seed, abs_tol: 1e-13 };
        Ok(CheckEstimator { design, family, laws, aux, mvn, k: target.k() })
    }

    fn check_t(&self, t: &DVector<f64>) -> Result<()> {
        if t.len() != self.k {
            return Err(Error::InvalidArgument("t has wrong dimension".into()));
        }
        Ok(())
    }

    /// `Phi_hat_{n,p}(t)`: Gaussian with covariance `sigma_hat^2 A[p] (X[p]'X[p]/n)^{-1} A[p]'`,
    /// point mass at zero when `p = 0` or `sigma_hat = 0`.
    pub fn plugin_phi(&self, sample: &Sample, p: usize, t: &DVector<f64>) -> Result<CdfValue> {
        self.check_t(t)?;
        let sig = sample.sigma2_hat().map(f64::sqrt).unwrap_or(0.0);
        self.plugin_with(sig, p, t)
    }

    /// `Phi_hat_{n,p}(t)` at a given `sigma_hat`.
    pub fn plugin_with(&self, sig: f64, p: usize, t: &DVector<f64>) -> Result<CdfValue> {
        match self.laws.get(p) {
            Some(Some(law)) => law.gaussian(sig, t, &self.mvn),
            Some(None) => TruncatedGaussian::point_mass_value(t),
            None => Err(Error::InvalidArgument(format!("order {p} exceeds P"))),
        }
    }

    /// `G_check_n(t|p)`.
    pub fn check_cdf(&self, sample: &Sample, p: usize, t: &DVector<f64>) -> Result<CdfValue> {
        let stats = t_stats(sample)?;
        self.check_given(sample, &stats, p, t)
    }

    /// `G_check_n(t|p)` with the t-statistics `T_0..T_P` already computed.
    pub fn check_given(&self, sample: &Sample, stats: &[f64], p: usize, t: &DVector<f64>) -> Result<CdfValue> {
        self.check_t(t)?;
        if p < self.family.min_order() || p > self.design.dim() {
            return Err(Error::InvalidArgument(format!("order {p} outside the family")));
        }
        let sig = sample.sigma2_hat()?.sqrt();
        if p == self.family.min_order() || aux_from_stats(sample, stats, p, self.aux)? == AuxDecision::AtOrder {
            return self.plugin_with(sig, p, t);
        }
        let law = self.laws[p].as_ref().expect("p > O >= 0");
        law.cdf(sig, 0.0, t, self.family.critical(p), &self.mvn)
    }

    /// `(p_hat, G_check_n(t|p_hat))`.
    pub fn check_cdf_selected(&self, sample: &Sample, t: &DVector<f64>) -> Result<(usize, CdfValue)> {
        let stats = t_stats(sample)?;
        let p = gts_from_stats(&stats, self.family);
        Ok((p, self.check_given(sample, &stats, p, t)?))
    }

    /// `G_check_n(t|p_hat)` at several evaluation points sharing one selection.
    pub fn check_cdf_selected_many(&self, sample: &Sample, ts: &[DVector<f64>]) -> Result<(usize, Vec<f64>)> {
        let stats = t_stats(sample)?;
        let p = gts_from_stats(&stats, self.family);
        let vals =
            ts.iter().map(|t| self.check_given(sample, &stats, p, t).map(|v| v.value)).collect::<Result<Vec<_>>>()?;
        Ok((p, vals))
    }
}

pub fn plugin_phi(sample: &Sample, target: &TargetMap, p: usize, t: &DVector<f64>) -> Result<CdfValue> {
    let fam = NestedFamily::constant(0, sample.design().dim(), 1.0)?;
    CheckEstimator::new(sample.design(), target, &fam, AuxRule::default(), &QuadratureConfig::default())?
        .plugin_phi(sample, p, t)
}

pub fn check_cdf(
    sample: &Sample,
    family: &NestedFamily,
    target: &TargetMap,
    p: usize,
    t: &DVector<f64>,
    aux: AuxRule,
) -> Result<CdfValue> {
    CheckEstimator::new(sample.design(), target, family, aux, &QuadratureConfig::default())?.check_cdf(sample, p, t)
}

pub fn check_cdf_selected(
    sample: &Sample,
    family: &NestedFamily,
    target: &TargetMap,
    t: &DVector<f64>,
    aux: AuxRule,
) -> Result<(usize, CdfValue)> {
    CheckEstimator::new(sample.design(), target, family, aux, &QuadratureConfig::default())?
        .check_cdf_selected(sample, t)
}
