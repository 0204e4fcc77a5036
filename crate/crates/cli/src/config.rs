//! JSON experiment configuration and its translation into an [`ExperimentPlan`].
//!
//! Coordinates (target coordinates, gamma axes) are zero-based.

use crate::error::{CliError, Result};
use nalgebra::{DMatrix, DVector};
use postsel_core::cond_dist::QuadratureConfig;
use postsel_core::designs::{ar1, equicorrelated, DesignKind};
use postsel_core::estimators::AuxRule;
use postsel_core::montecarlo::{axis_grid, default_rho0, DesignSource, ExperimentPlan, RadiusSchedule, Sampler};
use postsel_core::regression::{DesignMatrix, Mask, NestedFamily, ParameterPoint, SubsetFamily, TargetMap};
use postsel_core::selection::ThresholdRule;
use serde::Deserialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub design: DesignSection,
    pub family: FamilySection,
    pub target: TargetSection,
    pub grids: GridsSection,
    pub mc: McSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSection {
    /// Limit `Q` of `X'X/n`.
    pub q: QSpec,
    #[serde(default = "default_kind")]
    pub kind: DesignKind,
    #[serde(default)]
    pub seed: u64,
    /// Explicit `n x P` design CSV files keyed by `n`, relative to the config file.
    #[serde(default)]
    pub files: BTreeMap<usize, PathBuf>,
    pub ladder: Vec<usize>,
    pub theta: Vec<f64>,
    #[serde(default = "one")]
    pub sigma: f64,
}

fn default_kind() -> DesignKind {
    DesignKind::ExactQ
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum QSpec {
    Identity { dim: usize },
    Equicorrelated { dim: usize, rho: f64 },
    Ar1 { dim: usize, rho: f64 },
    Matrix(Vec<Vec<f64>>),
}

impl QSpec {
    pub fn matrix(&self) -> Result<DMatrix<f64>> {
        match self {
            QSpec::Identity { dim } => Ok(DMatrix::identity(*dim, *dim)),
            QSpec::Equicorrelated { dim, rho } => Ok(equicorrelated(*dim, *rho)),
            QSpec::Ar1 { dim, rho } => Ok(ar1(*dim, *rho)),
            QSpec::Matrix(rows) => rows_to_matrix(rows, "design.q.matrix"),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum Critical {
    Constant(f64),
    PerOrder(Vec<f64>),
}

impl Critical {
    fn family(&self, min_order: usize, dim: usize, field: &str) -> Result<NestedFamily> {
        let c = match self {
            Critical::Constant(c) => vec![*c; dim - min_order],
            Critical::PerOrder(v) => v.clone(),
        };
        NestedFamily::new(min_order, c).map_err(|e| CliError::config(field, e))
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum FamilySection {
    /// General-to-specific testing; `critical` is one value or `c_{O+1}, ..., c_P`.
    Nested {
        min_order: usize,
        critical: Critical,
        /// Finite-sample critical values keyed by `n`.
        #[serde(default)]
        schedule: BTreeMap<usize, Critical>,
    },
    /// Information criterion over `masks` (all non-empty subsets if absent).
    Subsets {
        #[serde(default)]
        masks: Option<Vec<String>>,
        upsilon: f64,
    },
    /// `r_full` if `|T| >= c` for the coordinate `r_star` drops, else `r_star`.
    Threshold { r_star: String, c: f64 },
}

#[derive(Clone, Debug, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSection {
    Rows(Vec<Vec<f64>>),
    Coordinates(Vec<usize>),
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridsSection {
    pub t: TGrid,
    /// Local perturbations; the zero vector if absent.
    #[serde(default)]
    pub gamma: Option<GammaGrid>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum TGrid {
    Points(Vec<Vec<f64>>),
    /// Equally spaced scalar `t` (requires `k = 1`).
    Range {
        from: f64,
        to: f64,
        points: usize,
    },
}

#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum GammaGrid {
    Points(Vec<Vec<f64>>),
    /// `j rho0 / (half + 1)` along each coordinate, `j = -half..=half`;
    /// `rho0` defaults to `4 sigma sqrt(max_i (Q^{-1})_ii)`.
    Axis {
        coords: Vec<usize>,
        half: usize,
        #[serde(default)]
        rho0: Option<f64>,
    },
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSection {
    pub reps: usize,
    pub seed: u64,
    #[serde(default)]
    pub sampler: Sampler,
    #[serde(default)]
    pub aux: AuxRule,
    #[serde(default)]
    pub quadrature: QuadratureSection,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadratureSection {
    pub rel_tol: Option<f64>,
    pub abs_tol: Option<f64>,
    pub max_nodes: Option<usize>,
    pub tail_prob: Option<f64>,
    pub qmc_points: Option<usize>,
    pub qmc_shifts: Option<usize>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default)]
    pub svg: bool,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: default_dir(), svg: false }
    }
}

/// Parameters that only some commands read.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub order: Option<usize>,
    pub delta: Option<f64>,
    pub t_index: Option<usize>,
    pub radius: Option<RadiusSchedule>,
    /// Probe offsets in units of `r_n`.
    pub offsets: Option<Vec<Vec<f64>>>,
    pub r_star: Option<String>,
    pub c: Option<f64>,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub svg: bool,
}

#[derive(Clone, Debug)]
pub enum Selector {
    Nested,
    Subsets(SubsetFamily),
    Threshold(ThresholdRule),
}

/// A validated configuration.
#[derive(Clone, Debug)]
pub struct Setup {
    pub plan: ExperimentPlan,
    pub selector: Selector,
    pub experiment: ExperimentSection,
    pub out_dir: PathBuf,
    pub svg: bool,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            CliError::Config(format!("{path}: {inner}"))
        })
    }

    /// Builds the plan; `base` resolves relative design file paths.
    pub fn setup(&self, base: &Path, over: &Overrides) -> Result<Setup> {
        let d = &self.design;
        let q = d.q.matrix()?;
        let dim = q.nrows();
        if dim == 0 || q.ncols() != dim {
            return Err(CliError::config("design.q", "must be a non-empty square matrix"));
        }
        if d.theta.len() != dim {
            return Err(CliError::config("design.theta", format!("expected {dim} entries, got {}", d.theta.len())));
        }
        let point = ParameterPoint::new(DVector::from_vec(d.theta.clone()), d.sigma)
            .map_err(|e| CliError::config("design.sigma", e))?;
        let design = if d.files.is_empty() {
            DesignSource::Synthetic { q: q.clone(), kind: d.kind, seed: d.seed }
        } else {
            let mut mats = Vec::new();
            for (&n, file) in &d.files {
                let field = format!("design.files.{n}");
                let m = DesignMatrix::from_csv(base.join(file)).map_err(|e| CliError::config(&field, e))?;
                if m.n() != n || m.dim() != dim {
                    return Err(CliError::config(&field, format!("expected a {n} x {dim} matrix")));
                }
                mats.push(m.with_limit(q.clone()).map_err(|e| CliError::config(&field, e))?);
            }
            if let Some(n) = d.ladder.iter().find(|n| !d.files.contains_key(n)) {
                return Err(CliError::config("design.files", format!("no file for ladder entry {n}")));
            }
            DesignSource::Explicit(mats)
        };
        if d.ladder.is_empty() || d.ladder.iter().any(|&n| n <= dim) {
            return Err(CliError::config("design.ladder", "must be non-empty with every n > P"));
        }

        let (family, schedule, selector) = match &self.family {
            FamilySection::Nested { min_order, critical, schedule } => {
                if *min_order >= dim {
                    return Err(CliError::config("family.min_order", "need O < P"));
                }
                let fam = critical.family(*min_order, dim, "family.critical")?;
                let mut sched = Vec::new();
                for (&n, c) in schedule {
                    sched.push((n, c.family(*min_order, dim, &format!("family.schedule.{n}"))?));
                }
                (fam, sched, Selector::Nested)
            }
            FamilySection::Subsets { masks, upsilon } => {
                let fam = match masks {
                    None => SubsetFamily::all(dim, *upsilon),
                    Some(list) => {
                        let m = list.iter().map(|s| parse_mask(s, dim, "family.masks")).collect::<Result<Vec<_>>>()?;
                        SubsetFamily::new(m, *upsilon)
                    }
                }
                .map_err(|e| CliError::config("family", e))?;
                (placeholder(dim)?, Vec::new(), Selector::Subsets(fam))
            }
            FamilySection::Threshold { r_star, c } => {
                let rule = ThresholdRule::new(parse_mask(r_star, dim, "family.r_star")?, *c)
                    .map_err(|e| CliError::config("family", e))?;
                (placeholder(dim)?, Vec::new(), Selector::Threshold(rule))
            }
        };

        let target = match &self.target {
            TargetSection::Rows(rows) => TargetMap::new(rows_to_matrix(rows, "target.rows")?),
            TargetSection::Coordinates(c) => TargetMap::coordinates(dim, c),
        }
        .map_err(|e| CliError::config("target", e))?;
        if target.dim() != dim {
            return Err(CliError::config("target", format!("A must have {dim} columns")));
        }

        let t_grid = match &self.grids.t {
            TGrid::Points(pts) => {
                if pts.is_empty() || pts.iter().any(|t| t.len() != target.k()) {
                    return Err(CliError::config("grids.t", format!("need points of length k = {}", target.k())));
                }
                pts.iter().map(|t| DVector::from_vec(t.clone())).collect()
            }
            TGrid::Range { from, to, points } => {
                if target.k() != 1 || *points < 2 || !(to > from) {
                    return Err(CliError::config("grids.t", "a range needs k = 1, from < to and at least 2 points"));
                }
                (0..*points)
                    .map(|i| DVector::from_element(1, from + (to - from) * i as f64 / (*points - 1) as f64))
                    .collect()
            }
        };
        let gamma_grid = match &self.grids.gamma {
            None => vec![DVector::zeros(dim)],
            Some(GammaGrid::Points(pts)) => {
                if pts.is_empty() || pts.iter().any(|g| g.len() != dim) {
                    return Err(CliError::config("grids.gamma", format!("need points of length P = {dim}")));
                }
                pts.iter().map(|g| DVector::from_vec(g.clone())).collect()
            }
            Some(GammaGrid::Axis { coords, half, rho0 }) => {
                if coords.iter().any(|&i| i >= dim) {
                    return Err(CliError::config(
                        "grids.gamma.coords",
                        format!("coordinates are zero-based and < {dim}"),
                    ));
                }
                let rho0 = match rho0 {
                    Some(r) => *r,
                    None => default_rho0(&q, d.sigma).map_err(|e| CliError::config("design.q", e))?,
                };
                axis_grid(dim, coords, rho0, *half)
            }
        };

        let mc = &self.mc;
        let seed = over.seed.unwrap_or(mc.seed);
        let quad = quadrature(&mc.quadrature, seed);
        quad.validate().map_err(|e| CliError::config("mc.quadrature", e))?;
        let plan = ExperimentPlan {
            design,
            ladder: d.ladder.clone(),
            point,
            family,
            schedule,
            target,
            gamma_grid,
            t_grid,
            reps: mc.reps,
            seed,
            sampler: mc.sampler,
            aux: mc.aux,
            quad,
        };
        plan.validate().map_err(|e| CliError::config("config", e))?;
        Ok(Setup {
            plan,
            selector,
            experiment: self.experiment.clone(),
            out_dir: over.out.clone().unwrap_or_else(|| self.output.dir.clone()),
            svg: over.svg || self.output.svg,
        })
    }
}

fn quadrature(q: &QuadratureSection, seed: u64) -> QuadratureConfig {
    let def = QuadratureConfig::default();
    QuadratureConfig {
        rel_tol: q.rel_tol.unwrap_or(def.rel_tol),
        abs_tol: q.abs_tol.unwrap_or(def.abs_tol),
        max_nodes: q.max_nodes.unwrap_or(def.max_nodes),
        tail_prob: q.tail_prob.unwrap_or(def.tail_prob),
        qmc_points: q.qmc_points.unwrap_or(def.qmc_points),
        qmc_shifts: q.qmc_shifts.unwrap_or(def.qmc_shifts),
        seed,
    }
}

/// Non-nested selectors still carry a nested family so that plan validation
/// can check dimensions; commands never use it for selection.
fn placeholder(dim: usize) -> Result<NestedFamily> {
    if dim < 2 {
        return Err(CliError::config("design.q", "non-nested selectors need P >= 2"));
    }
    Ok(NestedFamily::constant(dim - 1, dim, 1.0)?)
}

pub fn parse_mask(s: &str, dim: usize, field: &str) -> Result<Mask> {
    let m = Mask::parse(s).map_err(|e| CliError::config(field, e))?;
    if m.len() != dim {
        return Err(CliError::config(field, format!("mask {s} must have {dim} characters")));
    }
    Ok(m)
}

fn rows_to_matrix(rows: &[Vec<f64>], field: &str) -> Result<DMatrix<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(CliError::config(field, "rows must be non-empty and of equal length"));
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"{
        "design": {"q": {"equicorrelated": {"dim": 3, "rho": 0.5}}, "ladder": [100], "theta": [1, 0, 0]},
        "family": {"type": "nested", "min_order": 1, "critical": 1.96},
        "target": {"coordinates": [0]},
        "grids": {"t": {"from": -1, "to": 1, "points": 3}, "gamma": {"coords": [2], "half": 2}},
        "mc": {"reps": 1000, "seed": 3}
    }"#;

    #[test]
    fn parses_and_builds() {
        let s = Config::parse(BASE).unwrap().setup(Path::new("."), &Overrides::default()).unwrap();
        assert_eq!(s.plan.t_grid.len(), 3);
        assert_eq!(s.plan.gamma_grid.len(), 5);
        assert_eq!(s.plan.family.critical(2), 1.96);
        assert_eq!(s.out_dir, PathBuf::from("out"));
    }

    #[test]
    fn errors_name_the_field() {
        let missing = BASE.replace(r#""ladder": [100], "#, "");
        let e = Config::parse(&missing).unwrap_err().to_string();
        assert!(e.contains("design") && e.contains("ladder"), "{e}");
        let unknown = BASE.replace(r#""type": "nested""#, r#""type": "lasso""#);
        let e = Config::parse(&unknown).unwrap_err();
        assert!(e.to_string().contains("family") && e.exit_code() == 2, "{e}");
        let bad = BASE.replace(r#""theta": [1, 0, 0]"#, r#""theta": [1, 0]"#);
        let e = Config::parse(&bad).unwrap().setup(Path::new("."), &Overrides::default()).unwrap_err();
        assert!(e.to_string().contains("design.theta"), "{e}");
    }

    #[test]
    fn overrides_take_precedence() {
        let over = Overrides { seed: Some(77), out: Some("x".into()), svg: true };
        let s = Config::parse(BASE).unwrap().setup(Path::new("."), &over).unwrap();
        assert_eq!((s.plan.seed, s.plan.quad.seed, s.svg), (77, 77, true));
        assert_eq!(s.out_dir, PathBuf::from("x"));
    }
}
