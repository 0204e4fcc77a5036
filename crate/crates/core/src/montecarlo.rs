//! Seeded simulation harness: sampling, replication ledgers, empirical
//! conditional distributions, error probabilities and the experiment sweeps.

use crate::cond_dist::{
    limit_cdf, mix, CdfValue, ExactModel, LimitClass, LocalPerturbation, Proportion, QuadratureConfig,
};
use crate::designs::{synthetic, DesignKind};
use crate::error::{Error, Result};
use crate::estimators::{AuxRule, CheckEstimator};
use crate::linalg;
use crate::regression::{
    limit_projection, order_of, restricted_ls, subset_fit, DesignMatrix, Mask, NestedFamily, ParameterPoint, Sample,
    SubsetFamily, TargetMap,
};
use crate::selection::{gts_from_stats, symdiff_events, t_stats, Rule, Selected};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

pub const LEDGER_SCHEMA: &str = "postsel-ledger v1";
pub const MIN_REPS: usize = 1000;

/// Seed of replication `rep` at sample size `n`.
pub fn stream_seed(master: u64, n: usize, rep: usize) -> u64 {
    mix(mix(master, n as u64), rep as u64)
}

pub fn stream(master: u64, n: usize, rep: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(master, n, rep))
}

/// `Y = X theta + sigma * N(0, I)`.
pub fn draw_sample<R: Rng + ?Sized>(design: &DesignMatrix, point: &ParameterPoint, rng: &mut R) -> DVector<f64> {
    let noise = DVector::from_fn(design.n(), |_, _| StandardNormal.sample(rng));
    design.x() * &point.theta + noise * point.sigma
}

/// Draws `(Q'Y, RSS)` directly: `Q'Y ~ N(R theta, sigma^2 I)` independent of
/// `RSS ~ sigma^2 chi^2_{n-P}`.
pub fn draw_sufficient<'a, R: Rng + ?Sized>(
    design: &'a DesignMatrix,
    point: &ParameterPoint,
    rng: &mut R,
) -> Sample<'a> {
    let g = DVector::from_fn(design.dim(), |_, _| StandardNormal.sample(rng));
    let u = design.qr_r() * &point.theta + g * point.sigma;
    let chi = ChiSquared::new((design.n() - design.dim()) as f64).expect("n > P");
    let rss = point.sigma * point.sigma * chi.sample(rng);
    Sample::from_sufficient(design, u, rss)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    /// Full response vectors of length `n`.
    Response,
    /// Sufficient statistics only; same law, cost independent of `n`.
    #[default]
    Sufficient,
}

pub fn simulate<'a, R: Rng + ?Sized>(
    design: &'a DesignMatrix,
    point: &ParameterPoint,
    sampler: Sampler,
    rng: &mut R,
) -> Result<Sample<'a>> {
    match sampler {
        Sampler::Response => Sample::new(design, &draw_sample(design, point, rng)),
        Sampler::Sufficient => Ok(draw_sufficient(design, point, rng)),
    }
}

/// Runs `f` on every replication and returns the results in replication order.
pub fn replicate<T, F>(master: u64, n: usize, reps: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, u64, &mut ChaCha8Rng) -> Result<T> + Sync,
{
    (0..reps)
        .into_par_iter()
        .map(|rep| {
            let seed = stream_seed(master, n, rep);
            f(rep, seed, &mut ChaCha8Rng::seed_from_u64(seed))
        })
        .collect()
}

/// Exact `G_{n,theta,sigma}(t|p)` for every order of the family and every grid point.
#[derive(Clone, Debug)]
pub struct ExactTable {
    min_order: usize,
    /// `None` where the selection probability is below the numerical floor.
    values: Vec<Option<Vec<CdfValue>>>,
}

impl ExactTable {
    pub fn new(model: &ExactModel, t_grid: &[DVector<f64>], quad: &QuadratureConfig) -> Result<Self> {
        let mut values = Vec::new();
        for p in model.family().orders() {
            let row: Result<Vec<CdfValue>> = t_grid.iter().map(|t| model.cond_cdf(t, p, quad)).collect();
            values.push(match row {
                Ok(v) => Some(v),
                Err(Error::NegligibleConditioning(_)) => None,
                Err(e) => return Err(e),
            });
        }
        Ok(ExactTable { min_order: model.family().min_order(), values })
    }

    pub fn get(&self, p: usize, j: usize) -> Result<f64> {
        let row = p
            .checked_sub(self.min_order)
            .and_then(|i| self.values.get(i))
            .ok_or_else(|| Error::InvalidArgument(format!("order {p} not in the table")))?;
        match row {
            Some(v) => Ok(v[j].value),
            None => Err(Error::NegligibleConditioning(0.0)),
        }
    }
}

/// Order at which the plug-in Gaussian c.d.f. is recorded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PluginOrder {
    Selected,
    Fixed(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LedgerRow {
    pub rep: usize,
    pub seed: u64,
    pub selected: Selected,
    pub theta_tilde: DVector<f64>,
    /// `sqrt(n) A (thetatilde - theta)`.
    pub scaled: DVector<f64>,
    /// `G_check_n(t_j|p_hat)`.
    pub check: Vec<f64>,
    /// `Phi_hat_{n,p}(t_j)`.
    pub plugin: Vec<f64>,
    /// `G_{n,theta,sigma}(t_j|p_hat)`.
    pub exact: Vec<f64>,
    /// Membership in the two symmetric differences of the consistency condition.
    pub symdiff: Option<(bool, bool)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplicationLedger {
    pub n: usize,
    pub theta: DVector<f64>,
    pub t_grid: Vec<DVector<f64>>,
    pub rows: Vec<LedgerRow>,
}

/// Everything needed to fill one ledger.
#[derive(Clone, Copy)]
pub struct LedgerSpec<'a> {
    pub design: &'a DesignMatrix,
    pub target: &'a TargetMap,
    pub point: &'a ParameterPoint,
    pub rule: Rule<'a>,
    pub t_grid: &'a [DVector<f64>],
    pub estimator: Option<&'a CheckEstimator<'a>>,
    pub plugin: Option<PluginOrder>,
    pub exact: Option<&'a ExactTable>,
    pub symdiff_check: Option<(&'a Mask, f64)>,
    pub sampler: Sampler,
    pub reps: usize,
    pub seed: u64,
}

impl<'a> LedgerSpec<'a> {
    pub fn new(design: &'a DesignMatrix, target: &'a TargetMap, point: &'a ParameterPoint, rule: Rule<'a>) -> Self {
        LedgerSpec {
            design,
            target,
            point,
            rule,
            t_grid: &[],
            estimator: None,
            plugin: None,
            exact: None,
            symdiff_check: None,
            sampler: Sampler::default(),
            reps: MIN_REPS,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        let nested = matches!(self.rule, Rule::Nested(_));
        if !nested && (self.estimator.is_some() || self.plugin.is_some() || self.exact.is_some()) {
            return Err(Error::InvalidArgument("estimator and exact columns need a nested family".into()));
        }
        if self.t_grid.iter().any(|t| t.len() != self.target.k()) {
            return Err(Error::InvalidArgument("t-grid dimension does not match A".into()));
        }
        if self.point.dim() != self.design.dim() || self.target.dim() != self.design.dim() {
            return Err(Error::InvalidArgument("dimension mismatch".into()));
        }
        if let Some(PluginOrder::Fixed(p)) = self.plugin {
            if p > self.design.dim() {
                return Err(Error::InvalidArgument(format!("plug-in order {p} exceeds P")));
            }
        }
        if self.reps == 0 {
            return Err(Error::InvalidArgument("zero replications".into()));
        }
        Ok(())
    }

    pub fn run(&self) -> Result<ReplicationLedger> {
        self.validate()?;
        let n = self.design.n();
        let rn = (n as f64).sqrt();
        let rows = replicate(self.seed, n, self.reps, |rep, seed, rng| {
            let sample = simulate(self.design, self.point, self.sampler, rng)?;
            let mut row = LedgerRow {
                rep,
                seed,
                selected: Selected::Order(0),
                theta_tilde: DVector::zeros(0),
                scaled: DVector::zeros(0),
                check: Vec::new(),
                plugin: Vec::new(),
                exact: Vec::new(),
                symdiff: None,
            };
            match self.rule {
                Rule::Nested(family) => {
                    let stats = t_stats(&sample)?;
                    let p = gts_from_stats(&stats, family);
                    row.selected = Selected::Order(p);
                    row.theta_tilde = restricted_ls(&sample, p)?;
                    if let Some(est) = self.estimator {
                        row.check = self
                            .t_grid
                            .iter()
                            .map(|t| est.check_given(&sample, &stats, p, t).map(|v| v.value))
                            .collect::<Result<_>>()?;
                    }
                    if let Some(order) = self.plugin {
                        let q = match order {
                            PluginOrder::Selected => p,
                            PluginOrder::Fixed(q) => q,
                        };
                        let est = self
                            .estimator
                            .ok_or_else(|| Error::InvalidArgument("plug-in column needs an estimator".into()))?;
                        let sig = sample.sigma2_hat()?.sqrt();
                        row.plugin = self
                            .t_grid
                            .iter()
                            .map(|t| est.plugin_with(sig, q, t).map(|v| v.value))
                            .collect::<Result<_>>()?;
                    }
                    if let Some(table) = self.exact {
                        row.exact = (0..self.t_grid.len()).map(|j| table.get(p, j)).collect::<Result<_>>()?;
                    }
                }
                rule => {
                    let out = rule.select(&sample)?;
                    row.theta_tilde = match &out.selected {
                        Selected::Order(p) => restricted_ls(&sample, *p)?,
                        Selected::Mask(m) => subset_fit(&sample, m)?.0,
                    };
                    row.selected = out.selected;
                }
            }
            if let Some((r_star, c)) = self.symdiff_check {
                let mask = match &row.selected {
                    Selected::Mask(m) => m.clone(),
                    Selected::Order(p) => Mask::nested(self.design.dim(), *p),
                };
                row.symdiff = Some(symdiff_events(&sample, &mask, r_star, c)?);
            }
            row.scaled = self.target.matrix() * (&row.theta_tilde - &self.point.theta) * rn;
            Ok(row)
        })?;
        Ok(ReplicationLedger { n, theta: self.point.theta.clone(), t_grid: self.t_grid.to_vec(), rows })
    }
}

fn below(z: &DVector<f64>, t: &DVector<f64>) -> bool {
    z.iter().zip(t.iter()).all(|(a, b)| a <= b)
}

impl ReplicationLedger {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Relative frequency of `{selected = cell}`.
    pub fn selection_frequency(&self, cell: &Selected) -> Result<Proportion> {
        let hits = self.rows.iter().filter(|r| &r.selected == cell).count();
        Proportion::from_counts(hits, self.rows.len()).ok_or_else(|| Error::EmptyCell("any cell".into()))
    }

    /// Selection frequencies of all realized cells, sorted by cell.
    pub fn selection_frequencies(&self) -> Vec<(Selected, Proportion)> {
        let mut cells: Vec<Selected> = self.rows.iter().map(|r| r.selected.clone()).collect();
        cells.sort_by_key(|c| c.to_string());
        cells.dedup();
        cells
            .into_iter()
            .map(|c| {
                let f = self.selection_frequency(&c).expect("non-empty");
                (c, f)
            })
            .collect()
    }

    /// Write the ledger as CSV with a schema comment line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# {LEDGER_SCHEMA} n={} reps={}", self.n, self.rows.len())?;
        let mut w = csv::Writer::from_writer(out);
        let dim = self.theta.len();
        let k = self.t_grid.first().map_or_else(|| self.rows.first().map_or(0, |r| r.scaled.len()), |t| t.len());
        let mut header = vec!["rep".to_string(), "seed".into(), "selected".into()];
        header.extend((1..=dim).map(|i| format!("theta_tilde_{i}")));
        header.extend((1..=k).map(|i| format!("z_{i}")));
        let first = self.rows.first();
        let nt = self.t_grid.len();
        let cols = |name: &str, present: bool| -> Vec<String> {
            if present {
                (0..nt).map(|j| format!("{name}_t{j}")).collect()
            } else {
                Vec::new()
            }
        };
        let (hc, hp, he) = (
            first.is_some_and(|r| !r.check.is_empty()),
            first.is_some_and(|r| !r.plugin.is_empty()),
            first.is_some_and(|r| !r.exact.is_empty()),
        );
        let hs = first.is_some_and(|r| r.symdiff.is_some());
        header.extend(cols("check", hc));
        header.extend(cols("plugin", hp));
        header.extend(cols("exact", he));
        if hs {
            header.push("symdiff_full".into());
            header.push("symdiff_star".into());
        }
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.rep.to_string(), r.seed.to_string(), r.selected.to_string()];
            rec.extend(r.theta_tilde.iter().map(|v| v.to_string()));
            rec.extend(r.scaled.iter().map(|v| v.to_string()));
            rec.extend(r.check.iter().chain(&r.plugin).chain(&r.exact).map(|v| v.to_string()));
            if let Some((a, b)) = r.symdiff {
                rec.push((a as u8).to_string());
                rec.push((b as u8).to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `#{p_hat = p, sqrt(n) A (thetatilde - theta) <= t} / #{p_hat = p}`.
pub fn empirical_cond_cdf(ledger: &ReplicationLedger, cell: &Selected, t: &DVector<f64>) -> Result<Proportion> {
    let (mut hits, mut count) = (0, 0);
    for r in ledger.rows.iter().filter(|r| &r.selected == cell) {
        count += 1;
        if below(&r.scaled, t) {
            hits += 1;
        }
    }
    Proportion::from_counts(hits, count).ok_or_else(|| Error::EmptyCell(cell.to_string()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorTag {
    Check,
    Plugin,
}

/// `P(|G_hat(t_j|p_hat) - G(t_j|p_hat)| > delta)`, optionally within the cell `{p_hat = p}`.
pub fn error_prob(
    ledger: &ReplicationLedger,
    tag: EstimatorTag,
    j: usize,
    delta: f64,
    cell: Option<&Selected>,
) -> Result<Proportion> {
    let (mut hits, mut count) = (0, 0);
    for r in ledger.rows.iter().filter(|r| cell.is_none_or(|c| &r.selected == c)) {
        let est = match tag {
            EstimatorTag::Check => &r.check,
            EstimatorTag::Plugin => &r.plugin,
        };
        let (Some(e), Some(g)) = (est.get(j), r.exact.get(j)) else {
            return Err(Error::InvalidArgument("ledger lacks the estimator or exact column".into()));
        };
        count += 1;
        if (e - g).abs() > delta {
            hits += 1;
        }
    }
    Proportion::from_counts(hits, count)
        .ok_or_else(|| Error::EmptyCell(cell.map_or_else(|| "any cell".into(), |c| c.to_string())))
}

/// Source of the design matrix at each sample size.
#[derive(Clone, Debug)]
pub enum DesignSource {
    Synthetic {
        q: DMatrix<f64>,
        kind: DesignKind,
        seed: u64,
    },
    /// Explicit matrices, looked up by `n`; each must carry its limit `Q`.
    Explicit(Vec<DesignMatrix>),
}

impl DesignSource {
    pub fn design(&self, n: usize) -> Result<DesignMatrix> {
        match self {
            DesignSource::Synthetic { q, kind, seed } => synthetic(q, n, *kind, *seed),
            DesignSource::Explicit(v) => v
                .iter()
                .find(|d| d.n() == n)
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("no design supplied for n = {n}"))),
        }
    }

    pub fn limit(&self) -> Result<DMatrix<f64>> {
        match self {
            DesignSource::Synthetic { q, .. } => Ok(q.clone()),
            DesignSource::Explicit(v) => {
                v.first().map(|d| d.limit().clone()).ok_or_else(|| Error::InvalidArgument("no designs supplied".into()))
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DesignSource::Synthetic { q, .. } => q.nrows(),
            DesignSource::Explicit(v) => v.first().map_or(0, DesignMatrix::dim),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentPlan {
    pub design: DesignSource,
    pub ladder: Vec<usize>,
    /// Base parameter `theta` and `sigma`.
    pub point: ParameterPoint,
    /// Limiting critical values.
    pub family: NestedFamily,
    /// Optional finite-`n` critical values `c_{n,p}`; sizes not listed use `family`.
    pub schedule: Vec<(usize, NestedFamily)>,
    pub target: TargetMap,
    /// Local perturbations `gamma`; the sample-size-`n` parameter is `theta + gamma / sqrt(n)`.
    pub gamma_grid: Vec<DVector<f64>>,
    pub t_grid: Vec<DVector<f64>>,
    pub reps: usize,
    pub seed: u64,
    pub sampler: Sampler,
    pub aux: AuxRule,
    pub quad: QuadratureConfig,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        let dim = self.design.dim();
        if self.point.dim() != dim || self.family.dim() != dim || self.target.dim() != dim {
            return Err(Error::InvalidArgument("dimension mismatch between design, theta, family and A".into()));
        }
        if self.schedule.iter().any(|(_, f)| f.dim() != dim || f.min_order() != self.family.min_order()) {
            return Err(Error::InvalidArgument(
                "scheduled families must share P and O with the limiting family".into(),
            ));
        }
        if self.ladder.is_empty() || self.ladder.iter().any(|&n| n <= dim) {
            return Err(Error::InvalidArgument("ladder must be non-empty with every n > P".into()));
        }
        if self.reps < MIN_REPS {
            return Err(Error::InvalidArgument(format!("need at least {MIN_REPS} replications, got {}", self.reps)));
        }
        if self.gamma_grid.is_empty() || self.gamma_grid.iter().any(|g| g.len() != dim) {
            return Err(Error::InvalidArgument("gamma grid must be non-empty with entries of length P".into()));
        }
        if self.t_grid.is_empty() || self.t_grid.iter().any(|t| t.len() != self.target.k()) {
            return Err(Error::InvalidArgument("t-grid must be non-empty with entries of length k".into()));
        }
        self.quad.validate()
    }

    pub fn family_at(&self, n: usize) -> &NestedFamily {
        self.schedule.iter().find(|(m, _)| *m == n).map_or(&self.family, |(_, f)| f)
    }

    /// `theta + gamma / sqrt(n)`.
    pub fn at(&self, n: usize, gamma: &DVector<f64>) -> Result<ParameterPoint> {
        ParameterPoint::new(&self.point.theta + gamma / (n as f64).sqrt(), self.point.sigma)
    }

    fn ledger<'a>(
        &'a self,
        design: &'a DesignMatrix,
        point: &'a ParameterPoint,
        family: &'a NestedFamily,
    ) -> LedgerSpec<'a> {
        LedgerSpec {
            sampler: self.sampler,
            reps: self.reps,
            seed: self.seed,
            ..LedgerSpec::new(design, &self.target, point, Rule::Nested(family))
        }
    }
}

/// `4 sigma sqrt(max_i (Q^{-1})_{ii})`.
pub fn default_rho0(q: &DMatrix<f64>, sigma: f64) -> Result<f64> {
    let inv = linalg::spd_inverse(q, "Q")?;
    Ok(4.0 * sigma * inv.diagonal().max().sqrt())
}

/// `j rho0 / (half + 1)` along each listed coordinate (zero-based) for
/// `j = -half..=half`, sharing one zero point.
pub fn axis_grid(dim: usize, coords: &[usize], rho0: f64, half: usize) -> Vec<DVector<f64>> {
    let mut out = vec![DVector::zeros(dim)];
    for &i in coords {
        for j in 1..=half {
            let step = j as f64 * rho0 / (half + 1) as f64;
            for s in [-1.0, 1.0] {
                let mut g = DVector::zeros(dim);
                g[i] = s * step;
                out.push(g);
            }
        }
    }
    out.sort_by(|a, b| {
        a.iter().zip(b.iter()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
    });
    out
}

/// Largest `q > O` with `C_infty^(q) != 0`.
pub fn q_star(q: &DMatrix<f64>, target: &TargetMap, family: &NestedFamily) -> Result<Option<usize>> {
    for p in ((family.min_order() + 1)..=family.dim()).rev() {
        let pr = limit_projection(q, target, p)?;
        if pr.c.norm() > 1e-12 * pr.xi.max(1.0) {
            return Ok(Some(p));
        }
    }
    Ok(None)
}

/// `delta_0` from the spread of `G_infty(t|p)` over the gamma grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Oscillation {
    pub order: usize,
    pub t_index: usize,
    pub spread: f64,
    pub delta0: f64,
    /// `G_infty(t|p)` at each grid point, at the chosen `t`.
    pub limits: Vec<f64>,
}

pub const OSCILLATION_FRACTION: f64 = 0.25;

pub fn oscillation(plan: &ExperimentPlan, p: usize) -> Result<Oscillation> {
    let q = plan.design.limit()?;
    let class = LimitClass::of(&plan.point.theta, &plan.family, p)?;
    let locals = plan
        .gamma_grid
        .iter()
        .map(|g| LocalPerturbation::new(&q, &plan.target, g.clone()))
        .collect::<Result<Vec<_>>>()?;
    let mut best: Option<Oscillation> = None;
    for (j, t) in plan.t_grid.iter().enumerate() {
        let limits = locals
            .iter()
            .map(|l| limit_cdf(l, plan.point.sigma, &plan.family, p, class, t, &plan.quad).map(|v| v.value))
            .collect::<Result<Vec<_>>>()?;
        let spread = limits.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - limits.iter().cloned().fold(f64::INFINITY, f64::min);
        if best.as_ref().is_none_or(|b| spread > b.spread) {
            best = Some(Oscillation { order: p, t_index: j, spread, delta0: OSCILLATION_FRACTION * spread, limits });
        }
    }
    let best = best.expect("non-empty t-grid");
    if !(best.spread > 1e-9) {
        return Err(Error::InvalidArgument(format!("G_infty(t|{p}) does not oscillate over the gamma grid")));
    }
    Ok(best)
}

fn sup(values: &[Proportion]) -> (usize, Proportion) {
    let (i, v) = values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.value.total_cmp(&b.1.value).then(b.0.cmp(&a.0)))
        .expect("non-empty");
    (i, *v)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    /// `P(|G_check(t|p_hat) - G(t|p_hat)| > delta_0)`.
    Unconditional,
    /// The same within the cell `{p_hat = q*}`.
    Conditional,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub n: usize,
    pub sup: Proportion,
    pub argmax: usize,
    pub per_gamma: Vec<Proportion>,
    pub bound: f64,
    pub delta0: f64,
    pub t_index: usize,
    pub q_star: usize,
}

/// Sup over the gamma grid of the error probability of `G_check`, per `n`.
pub fn nonuniformity_sweep(plan: &ExperimentPlan, mode: SweepMode) -> Result<Vec<SweepRow>> {
    plan.validate()?;
    let limit = plan.design.limit()?;
    let qs = q_star(&limit, &plan.target, &plan.family)?
        .ok_or_else(|| Error::InvalidArgument("no order q > O with C_infty^(q) != 0".into()))?;
    if order_of(&plan.point.theta) > qs || plan.gamma_grid.iter().any(|g| order_of(g) > qs) {
        return Err(Error::InvalidArgument(format!("theta and the gamma grid must lie in M_{qs}")));
    }
    let osc = oscillation(plan, qs)?;
    let bound = crate::cond_dist::selection_bound(&plan.family, qs)?;
    let t = std::slice::from_ref(&plan.t_grid[osc.t_index]);
    let cell = Selected::Order(qs);
    let mut rows = Vec::new();
    for &n in &plan.ladder {
        let design = plan.design.design(n)?;
        let family = plan.family_at(n);
        let est = CheckEstimator::new(&design, &plan.target, family, plan.aux, &plan.quad)?;
        let mut per = Vec::new();
        for g in &plan.gamma_grid {
            let point = plan.at(n, g)?;
            let model = ExactModel::new(&design, &plan.target, &point, family)?;
            let table = ExactTable::new(&model, t, &plan.quad)?;
            let ledger = LedgerSpec {
                t_grid: t,
                estimator: Some(&est),
                exact: Some(&table),
                ..plan.ledger(&design, &point, family)
            }
            .run()?;
            let c = match mode {
                SweepMode::Unconditional => None,
                SweepMode::Conditional => Some(&cell),
            };
            per.push(error_prob(&ledger, EstimatorTag::Check, 0, osc.delta0, c)?);
        }
        let (argmax, s) = sup(&per);
        rows.push(SweepRow {
            n,
            sup: s,
            argmax,
            per_gamma: per,
            bound,
            delta0: osc.delta0,
            t_index: osc.t_index,
            q_star: qs,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurveRow {
    pub n: usize,
    pub prob: Proportion,
}

/// Error probability of `G_check(t|p_hat)` at the base parameter along the ladder.
pub fn consistency_curve(plan: &ExperimentPlan, t_index: usize, delta: f64) -> Result<Vec<CurveRow>> {
    plan.validate()?;
    let t = std::slice::from_ref(
        plan.t_grid.get(t_index).ok_or_else(|| Error::InvalidArgument("t index out of range".into()))?,
    );
    plan.ladder
        .iter()
        .map(|&n| {
            let design = plan.design.design(n)?;
            let family = plan.family_at(n);
            let est = CheckEstimator::new(&design, &plan.target, family, plan.aux, &plan.quad)?;
            let model = ExactModel::new(&design, &plan.target, &plan.point, family)?;
            let table = ExactTable::new(&model, t, &plan.quad)?;
            let ledger = LedgerSpec {
                t_grid: t,
                estimator: Some(&est),
                exact: Some(&table),
                ..plan.ledger(&design, &plan.point, family)
            }
            .run()?;
            Ok(CurveRow { n, prob: error_prob(&ledger, EstimatorTag::Check, 0, delta, None)? })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UniformityRow {
    pub n: usize,
    pub sup: Proportion,
    pub gamma_index: usize,
    pub t_index: usize,
}

/// Sup over the `(gamma, t)` grid of `P(|Phi_hat_{n,p}(t) - G(t|p_hat)| > delta)`.
pub fn plugin_uniformity(plan: &ExperimentPlan, order: usize, delta: f64) -> Result<Vec<UniformityRow>> {
    plan.validate()?;
    let mut rows = Vec::new();
    for &n in &plan.ladder {
        let design = plan.design.design(n)?;
        let family = plan.family_at(n);
        let est = CheckEstimator::new(&design, &plan.target, family, plan.aux, &plan.quad)?;
        let mut all = Vec::new();
        for g in &plan.gamma_grid {
            let point = plan.at(n, g)?;
            let model = ExactModel::new(&design, &plan.target, &point, family)?;
            let table = ExactTable::new(&model, &plan.t_grid, &plan.quad)?;
            let ledger = LedgerSpec {
                t_grid: &plan.t_grid,
                estimator: Some(&est),
                plugin: Some(PluginOrder::Fixed(order)),
                exact: Some(&table),
                ..plan.ledger(&design, &point, family)
            }
            .run()?;
            for j in 0..plan.t_grid.len() {
                all.push(error_prob(&ledger, EstimatorTag::Plugin, j, delta, None)?);
            }
        }
        let (i, s) = sup(&all);
        let nt = plan.t_grid.len();
        rows.push(UniformityRow { n, sup: s, gamma_index: i / nt, t_index: i % nt });
    }
    Ok(rows)
}

/// `r_n = coef * n^(-exponent)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadiusSchedule {
    pub coef: f64,
    pub exponent: f64,
}

impl RadiusSchedule {
    pub fn radius(&self, n: usize) -> f64 {
        self.coef * (n as f64).powf(-self.exponent)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbePart {
    /// Grid constrained by `||theta[-p]|| < r_n`.
    A,
    /// Grid constrained by `||theta - theta_base|| < r_n`.
    B,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeRow {
    pub n: usize,
    pub radius: f64,
    pub min: Proportion,
    pub argmin: usize,
    pub per_point: Vec<Proportion>,
}

/// Per-`n` minimum over `theta_base + r_n * offset` of the frequency of `{p_hat = p}`.
/// Offsets are in units of `r_n` and must satisfy the part's norm constraint.
pub fn neighborhood_probe(
    plan: &ExperimentPlan,
    p: usize,
    schedule: RadiusSchedule,
    offsets: &[DVector<f64>],
    part: ProbePart,
) -> Result<Vec<ProbeRow>> {
    plan.validate()?;
    let dim = plan.design.dim();
    if p < plan.family.min_order() || p > dim {
        return Err(Error::InvalidArgument(format!("order {p} outside the family")));
    }
    if offsets.is_empty() || offsets.iter().any(|o| o.len() != dim) {
        return Err(Error::InvalidArgument("offsets must be non-empty with entries of length P".into()));
    }
    for o in offsets {
        let norm = match part {
            ProbePart::A if p == dim => 0.0,
            ProbePart::A if p == 0 => o.norm(),
            ProbePart::A => o.rows(p, dim - p).norm(),
            ProbePart::B => o.norm(),
        };
        if norm >= 1.0 {
            return Err(Error::InvalidArgument("offset violates the radius constraint".into()));
        }
    }
    if part == ProbePart::A && order_of(&plan.point.theta) > p {
        return Err(Error::InvalidArgument(format!("base theta must lie in M_{p}")));
    }
    let cell = Selected::Order(p);
    let mut rows = Vec::new();
    for &n in &plan.ladder {
        let design = plan.design.design(n)?;
        let r = schedule.radius(n);
        let mut per = Vec::new();
        for o in offsets {
            let point = ParameterPoint::new(&plan.point.theta + o * r, plan.point.sigma)?;
            let ledger = plan.ledger(&design, &point, plan.family_at(n)).run()?;
            per.push(ledger.selection_frequency(&cell)?);
        }
        let (argmin, min) = per
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.value.total_cmp(&b.1.value).then(a.0.cmp(&b.0)))
            .map(|(i, v)| (i, *v))
            .expect("non-empty");
        rows.push(ProbeRow { n, radius: r, min, argmin, per_point: per });
    }
    Ok(rows)
}

/// A supremum of `|empirical - exact|` with the 3-SE noise band at its location.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Gap {
    pub value: f64,
    pub band: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReductionRow {
    pub n: usize,
    /// Sup over the grid of the frequency of `{r_hat = r_full} ^ {|T| >= c}`.
    pub symdiff_full: Proportion,
    /// Sup over the grid of the frequency of `{r_hat = r_star} ^ {|T| < c}`.
    pub symdiff_star: Proportion,
    /// `sup |K(t|r_full) - G(t|P)|`; `None` if every cell was empty.
    pub gap_full: Option<Gap>,
    /// `sup |K(t|r_star) - G(t|P-1)|`.
    pub gap_star: Option<Gap>,
    /// Frequency of `{r_hat = r_full}` at `gamma = 0`, if the grid contains it.
    pub freq_full: Option<Proportion>,
    pub empty_cells: usize,
}

/// Reduction of a subset selector to the nested test with `O = P - 1`, `c_P = c`.
pub fn reduction_run(
    plan: &ExperimentPlan,
    subsets: &SubsetFamily,
    r_star: &Mask,
    c: f64,
) -> Result<Vec<ReductionRow>> {
    plan.validate()?;
    let dim = plan.design.dim();
    if subsets.dim() != dim {
        return Err(Error::InvalidArgument("subset family dimension does not match the design".into()));
    }
    if r_star.excluded_one() != Some(dim - 1) {
        return Err(Error::InvalidArgument("r_star must exclude the last regressor (rearrange coordinates)".into()));
    }
    let th = &plan.point.theta;
    if th[dim - 1] != 0.0 || th.iter().take(dim - 1).any(|&v| v == 0.0) {
        return Err(Error::InvalidArgument(
            "theta must have exactly P - 1 nonzero coordinates, the last being zero".into(),
        ));
    }
    let reduced = NestedFamily::new(dim - 1, vec![c])?;
    let full = Selected::Mask(Mask::full(dim));
    let star = Selected::Mask(r_star.clone());
    let mut rows = Vec::new();
    for &n in &plan.ladder {
        let design = plan.design.design(n)?;
        let (mut sd_full, mut sd_star) = (Vec::new(), Vec::new());
        let (mut gap_full, mut gap_star): (Option<Gap>, Option<Gap>) = (None, None);
        let mut freq_full = None;
        let mut empty = 0;
        for g in &plan.gamma_grid {
            let point = plan.at(n, g)?;
            let model = ExactModel::new(&design, &plan.target, &point, &reduced)?;
            let table = ExactTable::new(&model, &plan.t_grid, &plan.quad)?;
            let ledger = LedgerSpec {
                rule: Rule::Subsets(subsets),
                symdiff_check: Some((r_star, c)),
                ..plan.ledger(&design, &point, &reduced)
            }
            .run()?;
            let count = |f: fn(&(bool, bool)) -> bool| {
                let hits = ledger.rows.iter().filter(|r| r.symdiff.as_ref().is_some_and(f)).count();
                Proportion::from_counts(hits, ledger.len()).expect("reps > 0")
            };
            sd_full.push(count(|s| s.0));
            sd_star.push(count(|s| s.1));
            if g.iter().all(|&v| v == 0.0) {
                freq_full = Some(ledger.selection_frequency(&full)?);
            }
            for (cell, p, acc) in [(&full, dim, &mut gap_full), (&star, dim - 1, &mut gap_star)] {
                for (j, t) in plan.t_grid.iter().enumerate() {
                    let emp = match empirical_cond_cdf(&ledger, cell, t) {
                        Ok(v) => v,
                        Err(Error::EmptyCell(_)) => {
                            empty += 1;
                            continue;
                        }
                        Err(e) => return Err(e),
                    };
                    let exact = match table.get(p, j) {
                        Ok(v) => v,
                        Err(Error::NegligibleConditioning(_)) => {
                            empty += 1;
                            continue;
                        }
                        Err(e) => return Err(e),
                    };
                    let gap = Gap { value: (emp.value - exact).abs(), band: 3.0 * emp.se };
                    if acc.is_none_or(|a| gap.value > a.value) {
                        *acc = Some(gap);
                    }
                }
            }
        }
        rows.push(ReductionRow {
            n,
            symdiff_full: sup(&sd_full).1,
            symdiff_star: sup(&sd_star).1,
            gap_full,
            gap_star,
            freq_full,
            empty_cells: empty,
        });
    }
    Ok(rows)
}

/// Non-increasing up to the combined 3-SE band at every step, with the last
/// value below the first unless the first already lies inside its band.
pub fn decreasing_within_noise(values: &[(f64, f64)]) -> bool {
    let steps_ok = values.windows(2).all(|w| w[1].0 - w[0].0 <= (w[0].1 * w[0].1 + w[1].1 * w[1].1).sqrt());
    let (first, last) = match (values.first(), values.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return true,
    };
    steps_ok && (last.0 < first.0 || first.0 <= first.1)
}
