//! General-to-specific testing over nested models and information-criterion
//! selection over subsets, plus the resulting post-model-selection estimators.

use crate::error::{Error, Result};
use crate::regression::{restricted_ls, subset_fit, Mask, NestedFamily, Sample, SubsetFamily};
use nalgebra::DVector;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Selected {
    Order(usize),
    Mask(Mask),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionOutcome {
    pub selected: Selected,
    /// `T_0..T_P` for nested rules, one score per candidate mask otherwise.
    pub scores: Vec<f64>,
}

impl std::fmt::Display for Selected {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Selected::Order(p) => write!(f, "{p}"),
            Selected::Mask(m) => write!(f, "{m}"),
        }
    }
}

impl SelectionOutcome {
    pub fn order(&self) -> Option<usize> {
        match self.selected {
            Selected::Order(p) => Some(p),
            Selected::Mask(_) => None,
        }
    }

    pub fn mask(&self) -> Option<&Mask> {
        match &self.selected {
            Selected::Mask(m) => Some(m),
            Selected::Order(_) => None,
        }
    }
}

/// `T_0, ..., T_P` with `T_0 = 0`. With `X = QR`, `T_p = sign(R_pp) u_p / sigma_hat`.
pub fn t_stats(sample: &Sample) -> Result<Vec<f64>> {
    let s = sample.sigma2_hat()?.sqrt();
    let r = sample.design().qr_r();
    let u = sample.projected();
    let mut out = vec![0.0; u.len() + 1];
    for p in 1..=u.len() {
        out[p] = r[(p - 1, p - 1)].signum() * u[p - 1] / s;
    }
    Ok(out)
}

pub fn t_stat(sample: &Sample, p: usize) -> Result<f64> {
    let dim = sample.design().dim();
    if p > dim {
        return Err(Error::InvalidArgument(format!("order {p} exceeds P = {dim}")));
    }
    Ok(t_stats(sample)?[p])
}

/// `max{p in O..P : |T_p| >= c_p}` from precomputed statistics.
pub fn gts_from_stats(t: &[f64], family: &NestedFamily) -> usize {
    family.orders().rev().find(|&p| t[p].abs() >= family.critical(p)).unwrap_or(family.min_order())
}

pub fn gts_select(sample: &Sample, family: &NestedFamily) -> Result<SelectionOutcome> {
    check_dim(sample, family.dim())?;
    let t = t_stats(sample)?;
    Ok(SelectionOutcome { selected: Selected::Order(gts_from_stats(&t, family)), scores: t })
}

/// `log RSS(r) + |r| Upsilon_n / n`.
pub fn ic_score(sample: &Sample, mask: &Mask, upsilon: f64) -> Result<f64> {
    let (_, rss) = subset_fit(sample, mask)?;
    score_from_rss(rss, mask.weight(), upsilon, sample.design().n())
}

fn score_from_rss(rss: f64, weight: usize, upsilon: f64, n: usize) -> Result<f64> {
    if !(rss > 0.0) {
        return Err(Error::DegenerateResidual);
    }
    Ok(rss.ln() + weight as f64 * upsilon / n as f64)
}

/// Minimizer of the information criterion; ties go to fewer regressors and
/// then to the lexicographically smallest mask.
pub fn ic_select(sample: &Sample, family: &SubsetFamily) -> Result<SelectionOutcome> {
    check_dim(sample, family.dim())?;
    let n = sample.design().n();
    let scores = family
        .masks()
        .iter()
        .map(|m| {
            let (_, rss) = subset_fit(sample, m)?;
            score_from_rss(rss, m.weight(), family.upsilon(), n)
        })
        .collect::<Result<Vec<f64>>>()?;
    let best = (0..scores.len())
        .min_by(|&i, &j| {
            let (mi, mj) = (&family.masks()[i], &family.masks()[j]);
            scores[i].total_cmp(&scores[j]).then(mi.weight().cmp(&mj.weight())).then(mi.cmp(mj))
        })
        .expect("non-empty family");
    Ok(SelectionOutcome { selected: Selected::Mask(family.masks()[best].clone()), scores })
}

/// Chooses `r_full` when `|T| >= c` for the full-model t-statistic of the
/// coordinate excluded by `r_star`, and `r_star` otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdRule {
    pub r_star: Mask,
    pub c: f64,
}

impl ThresholdRule {
    pub fn new(r_star: Mask, c: f64) -> Result<Self> {
        if r_star.excluded_one().is_none() {
            return Err(Error::InvalidArgument("r_star must exclude exactly one regressor".into()));
        }
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::InvalidArgument("threshold must be positive".into()));
        }
        Ok(ThresholdRule { r_star, c })
    }

    pub fn select(&self, sample: &Sample) -> Result<SelectionOutcome> {
        let i = self.r_star.excluded_one().expect("validated");
        let t = full_model_t(sample, i)?;
        let m = if t.abs() >= self.c { Mask::full(self.r_star.len()) } else { self.r_star.clone() };
        Ok(SelectionOutcome { selected: Selected::Mask(m), scores: vec![t] })
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Rule<'a> {
    Nested(&'a NestedFamily),
    Subsets(&'a SubsetFamily),
    Threshold(&'a ThresholdRule),
}

impl Rule<'_> {
    pub fn select(&self, sample: &Sample) -> Result<SelectionOutcome> {
        match self {
            Rule::Nested(f) => gts_select(sample, f),
            Rule::Subsets(f) => ic_select(sample, f),
            Rule::Threshold(t) => t.select(sample),
        }
    }
}

/// Post-model-selection estimator together with the selection outcome.
pub fn pmse(sample: &Sample, rule: Rule) -> Result<(DVector<f64>, SelectionOutcome)> {
    let out = rule.select(sample)?;
    let est = match &out.selected {
        Selected::Order(p) => restricted_ls(sample, *p)?,
        Selected::Mask(m) => subset_fit(sample, m)?.0,
    };
    Ok((est, out))
}

/// Full-model t-statistic for `theta_i = 0` (`i` zero-based).
pub fn full_model_t(sample: &Sample, i: usize) -> Result<f64> {
    let d = sample.design();
    if i >= d.dim() {
        return Err(Error::InvalidArgument(format!("coordinate {i} out of range")));
    }
    let s = sample.sigma2_hat()?.sqrt();
    let th = restricted_ls(sample, d.dim())?;
    Ok((d.n() as f64).sqrt() * th[i] / (s * d.gram_inv_diag()[i].sqrt()))
}

/// Membership of one sample in the two symmetric differences
/// `{r = r_full} ^ {|T| >= c}` and `{r = r_star} ^ {|T| < c}`.
pub fn symdiff_events(sample: &Sample, selected: &Mask, r_star: &Mask, c: f64) -> Result<(bool, bool)> {
    let i = r_star
        .excluded_one()
        .ok_or_else(|| Error::InvalidArgument("r_star must exclude exactly one regressor".into()))?;
    let t = full_model_t(sample, i)?.abs();
    let full = selected.weight() == selected.len();
    Ok((full != (t >= c), (selected == r_star) != (t < c)))
}

fn check_dim(sample: &Sample, dim: usize) -> Result<()> {
    if sample.design().dim() != dim {
        return Err(Error::InvalidArgument("family dimension does not match the design".into()));
    }
    Ok(())
}
