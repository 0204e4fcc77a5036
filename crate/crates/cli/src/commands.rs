//! The three commands: tables are computed in memory first and then written.

use crate::config::{parse_mask, Selector, Setup};
use crate::error::{CliError, Result};
use crate::svg::{line_chart, Series};
use nalgebra::DVector;
use postsel_core::cond_dist::{
    limit_cdf, selection_bound, CdfValue, ExactModel, LimitClass, LocalPerturbation, Method, Proportion,
};
use postsel_core::error::Error as CoreError;
use postsel_core::montecarlo::{
    consistency_curve, neighborhood_probe, nonuniformity_sweep, plugin_uniformity, reduction_run, CurveRow, LedgerSpec,
    ProbePart, ProbeRow, RadiusSchedule, ReductionRow, SweepMode, SweepRow, UniformityRow,
};
use postsel_core::selection::Rule;
use rayon::prelude::*;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Experiment {
    /// Unconditional error probability of the consistent estimator over the gamma grid.
    #[value(alias = "thm2.3")]
    Impossibility,
    /// The same sweep within the cell `{p_hat = q*}`.
    #[value(alias = "thm4.1")]
    Conditional,
    /// Selection frequency over a shrinking neighborhood of `M_p`.
    #[value(alias = "prop-a2a")]
    ProbeA,
    /// Selection frequency over a slowly shrinking ball around `theta`.
    #[value(alias = "prop-a2b")]
    ProbeB,
    /// Error probability of the consistent estimator at fixed `theta`.
    Consistency,
    /// Uniform error probability of the plug-in Gaussian estimator.
    Uniformity,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Impossibility => "impossibility",
            Experiment::Conditional => "conditional",
            Experiment::ProbeA => "probe_a",
            Experiment::ProbeB => "probe_b",
            Experiment::Consistency => "consistency",
            Experiment::Uniformity => "uniformity",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExactRow {
    pub n: usize,
    pub gamma_index: usize,
    pub p: usize,
    pub t: Vec<f64>,
    /// `None` when the conditioning event is numerically negligible.
    pub value: Option<f64>,
    pub error: f64,
    pub method: &'static str,
    /// `G_infty(t|p)` at the same `gamma`; `None` for incorrect models.
    pub limit: Option<f64>,
    pub limit_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelRow {
    pub n: usize,
    pub gamma_index: usize,
    pub p: usize,
    pub value: f64,
    pub error: f64,
    pub method: &'static str,
    /// Limit of `P(p_hat = p)` for `theta` in `M_{p-1}`, defined for `p > O`.
    pub bound: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExactTables {
    pub cdf: Vec<ExactRow>,
    pub sel: Vec<SelRow>,
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::PointMass => "point_mass",
        Method::Gaussian => "gaussian",
        Method::Quadrature => "quadrature",
        Method::MonteCarlo => "monte_carlo",
    }
}

fn negligible(r: postsel_core::error::Result<CdfValue>) -> Result<Option<CdfValue>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(CoreError::NegligibleConditioning(_)) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// `G_{n,theta_n,sigma}(t|p)` for every `(n, gamma, p, t)` with `theta_n = theta + gamma / sqrt(n)`,
/// the selection probabilities, and the matching limits.
pub fn exact_tables(setup: &Setup) -> Result<ExactTables> {
    if !matches!(setup.selector, Selector::Nested) {
        return Err(CliError::config("family.type", "exact distributions need a nested family"));
    }
    let plan = &setup.plan;
    let q = plan.design.limit()?;
    let locals = plan
        .gamma_grid
        .iter()
        .map(|g| LocalPerturbation::new(&q, &plan.target, g.clone()))
        .collect::<postsel_core::error::Result<Vec<_>>>()?;
    let orders: Vec<usize> = plan.family.orders().collect();
    let mut cdf = Vec::new();
    let mut sel = Vec::new();
    for &n in &plan.ladder {
        let design = plan.design.design(n)?;
        let family = plan.family_at(n);
        for (gi, (g, local)) in plan.gamma_grid.iter().zip(&locals).enumerate() {
            let point = plan.at(n, g)?;
            let model = ExactModel::new(&design, &plan.target, &point, family)?;
            for &p in &orders {
                let v = model.sel_prob(p, &plan.quad)?;
                let bound = (p > family.min_order()).then(|| selection_bound(&plan.family, p)).transpose()?;
                sel.push(SelRow {
                    n,
                    gamma_index: gi,
                    p,
                    value: v.value,
                    error: v.error,
                    method: method_name(v.method),
                    bound,
                });
            }
            let jobs: Vec<(usize, &DVector<f64>)> =
                orders.iter().flat_map(|&p| plan.t_grid.iter().map(move |t| (p, t))).collect();
            let rows = jobs
                .par_iter()
                .map(|&(p, t)| {
                    let exact = negligible(model.cond_cdf(t, p, &plan.quad))?;
                    let lim = match LimitClass::of(&plan.point.theta, &plan.family, p) {
                        Ok(class) => {
                            negligible(limit_cdf(local, plan.point.sigma, &plan.family, p, class, t, &plan.quad))?
                        }
                        Err(_) => None,
                    };
                    Ok(ExactRow {
                        n,
                        gamma_index: gi,
                        p,
                        t: t.iter().copied().collect(),
                        value: exact.map(|v| v.value),
                        error: exact.map_or(0.0, |v| v.error),
                        method: exact.map_or("negligible", |v| method_name(v.method)),
                        limit: lim.map(|v| v.value),
                        limit_error: lim.map_or(0.0, |v| v.error),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            cdf.extend(rows);
        }
    }
    Ok(ExactTables { cdf, sel })
}

#[derive(Clone, Debug, PartialEq)]
pub enum SweepTable {
    Sweep(Vec<SweepRow>),
    Probe(Vec<ProbeRow>),
    Curve(Vec<CurveRow>),
    Uniformity(Vec<UniformityRow>),
}

pub fn sweep_table(setup: &Setup, experiment: Experiment) -> Result<SweepTable> {
    if !matches!(setup.selector, Selector::Nested) {
        return Err(CliError::config("family.type", "sweeps need a nested family"));
    }
    let plan = &setup.plan;
    let ex = &setup.experiment;
    let dim = plan.design.dim();
    Ok(match experiment {
        Experiment::Impossibility => SweepTable::Sweep(nonuniformity_sweep(plan, SweepMode::Unconditional)?),
        Experiment::Conditional => SweepTable::Sweep(nonuniformity_sweep(plan, SweepMode::Conditional)?),
        Experiment::ProbeA | Experiment::ProbeB => {
            let (part, default_radius) = match experiment {
                Experiment::ProbeA => (ProbePart::A, RadiusSchedule { coef: 1.0, exponent: 0.5 }),
                _ => (ProbePart::B, RadiusSchedule { coef: 1.0, exponent: 0.25 }),
            };
            let order = ex.order.ok_or_else(|| CliError::config("experiment.order", "required for probes"))?;
            let offsets =
                ex.offsets.as_ref().ok_or_else(|| CliError::config("experiment.offsets", "required for probes"))?;
            if offsets.iter().any(|o| o.len() != dim) {
                return Err(CliError::config("experiment.offsets", format!("entries must have length P = {dim}")));
            }
            let offsets: Vec<DVector<f64>> = offsets.iter().map(|o| DVector::from_vec(o.clone())).collect();
            SweepTable::Probe(neighborhood_probe(plan, order, ex.radius.unwrap_or(default_radius), &offsets, part)?)
        }
        Experiment::Consistency => {
            let j = ex.t_index.unwrap_or(plan.t_grid.len() / 2);
            if j >= plan.t_grid.len() {
                return Err(CliError::config("experiment.t_index", "out of range"));
            }
            SweepTable::Curve(consistency_curve(plan, j, ex.delta.unwrap_or(0.05))?)
        }
        Experiment::Uniformity => {
            let order = ex.order.unwrap_or(dim);
            if order < plan.family.min_order() || order > dim {
                return Err(CliError::config("experiment.order", "must lie in O..=P"));
            }
            SweepTable::Uniformity(plugin_uniformity(plan, order, ex.delta.unwrap_or(0.05))?)
        }
    })
}

fn sup_prop(values: &[Proportion]) -> Proportion {
    *values.iter().max_by(|a, b| a.value.total_cmp(&b.value)).expect("non-empty grid")
}

/// Symmetric-difference frequencies; for an information-criterion selector also
/// the comparison with the nested test that drops only the last coordinate.
pub fn symdiff_table(setup: &Setup) -> Result<Vec<ReductionRow>> {
    let plan = &setup.plan;
    let ex = &setup.experiment;
    match &setup.selector {
        Selector::Nested => {
            Err(CliError::config("family.type", "symmetric differences need a subsets or threshold selector"))
        }
        Selector::Subsets(fam) => {
            let r_star = ex
                .r_star
                .as_deref()
                .ok_or_else(|| CliError::config("experiment.r_star", "required for subset selectors"))?;
            let r_star = parse_mask(r_star, plan.design.dim(), "experiment.r_star")?;
            let c = ex.c.ok_or_else(|| CliError::config("experiment.c", "required for subset selectors"))?;
            Ok(reduction_run(plan, fam, &r_star, c)?)
        }
        Selector::Threshold(rule) => {
            let mut rows = Vec::new();
            for &n in &plan.ladder {
                let design = plan.design.design(n)?;
                let (mut full, mut star) = (Vec::new(), Vec::new());
                for g in &plan.gamma_grid {
                    let point = plan.at(n, g)?;
                    let ledger = LedgerSpec {
                        symdiff_check: Some((&rule.r_star, rule.c)),
                        sampler: plan.sampler,
                        reps: plan.reps,
                        seed: plan.seed,
                        ..LedgerSpec::new(&design, &plan.target, &point, Rule::Threshold(rule))
                    }
                    .run()?;
                    let count = |f: fn(&(bool, bool)) -> bool| {
                        let hits = ledger.rows.iter().filter(|r| r.symdiff.as_ref().is_some_and(f)).count();
                        Proportion::from_counts(hits, ledger.len()).expect("reps > 0")
                    };
                    full.push(count(|s| s.0));
                    star.push(count(|s| s.1));
                }
                rows.push(ReductionRow {
                    n,
                    symdiff_full: sup_prop(&full),
                    symdiff_star: sup_prop(&star),
                    gap_full: None,
                    gap_star: None,
                    freq_full: None,
                    empty_cells: 0,
                });
            }
            Ok(rows)
        }
    }
}

fn f(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map(f).unwrap_or_default()
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn header(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn numbered(prefix: &str, k: usize) -> Vec<String> {
    (1..=k).map(|i| format!("{prefix}_{i}")).collect()
}

fn write_svg(path: &Path, svg: &str) -> Result<()> {
    std::fs::write(path, svg)?;
    Ok(())
}

pub fn write_exact(setup: &Setup, tables: &ExactTables) -> Result<Vec<PathBuf>> {
    let dir = &setup.out_dir;
    std::fs::create_dir_all(dir)?;
    let k = setup.plan.target.k();
    let mut h = header(&["n", "gamma_index", "p"]);
    h.extend(numbered("t", k));
    h.extend(header(&["value", "error", "method", "limit", "limit_error"]));
    let rows: Vec<Vec<String>> = tables
        .cdf
        .iter()
        .map(|r| {
            let mut v = vec![r.n.to_string(), r.gamma_index.to_string(), r.p.to_string()];
            v.extend(r.t.iter().map(|&x| f(x)));
            v.extend([opt(r.value), f(r.error), r.method.into(), opt(r.limit), f(r.limit_error)]);
            v
        })
        .collect();
    let cdf_path = dir.join("exact_cdf.csv");
    write_csv(&cdf_path, &h, &rows)?;
    let sel_rows: Vec<Vec<String>> = tables
        .sel
        .iter()
        .map(|r| {
            vec![
                r.n.to_string(),
                r.gamma_index.to_string(),
                r.p.to_string(),
                f(r.value),
                f(r.error),
                r.method.into(),
                opt(r.bound),
            ]
        })
        .collect();
    let sel_path = dir.join("sel_prob.csv");
    write_csv(&sel_path, &header(&["n", "gamma_index", "p", "value", "error", "method", "bound"]), &sel_rows)?;
    let mut out = vec![cdf_path, sel_path];
    if setup.svg {
        let series: Vec<Series> = setup
            .plan
            .family
            .orders()
            .map(|p| {
                let pts = tables
                    .sel
                    .iter()
                    .filter(|r| r.p == p && r.gamma_index == 0)
                    .map(|r| (r.n as f64, r.value))
                    .collect();
                Series::new(format!("p = {p}"), pts)
            })
            .collect();
        let path = dir.join("sel_prob.svg");
        write_svg(&path, &line_chart("Selection probabilities", "n", "P(p_hat = p)", &series, true))?;
        out.push(path);
    }
    Ok(out)
}

pub fn write_sweep(setup: &Setup, experiment: Experiment, table: &SweepTable) -> Result<Vec<PathBuf>> {
    let dir = &setup.out_dir;
    std::fs::create_dir_all(dir)?;
    let name = experiment.name();
    let main = dir.join(format!("{name}.csv"));
    let mut out = vec![main.clone()];
    let dim = setup.plan.design.dim();
    let (series, y_label) = match table {
        SweepTable::Sweep(rows) => {
            let body: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    vec![
                        r.n.to_string(),
                        f(r.sup.value),
                        f(r.sup.se),
                        r.sup.count.to_string(),
                        r.argmax.to_string(),
                        f(r.bound),
                        f(r.delta0),
                        r.t_index.to_string(),
                        r.q_star.to_string(),
                    ]
                })
                .collect();
            let h = header(&["n", "sup", "sup_se", "count", "argmax", "bound", "delta0", "t_index", "q_star"]);
            write_csv(&main, &h, &body)?;
            let mut dh = header(&["n", "gamma_index"]);
            dh.extend(numbered("gamma", dim));
            dh.extend(header(&["prob", "se", "count"]));
            let detail: Vec<Vec<String>> = rows
                .iter()
                .flat_map(|r| {
                    r.per_gamma.iter().enumerate().map(move |(i, p)| {
                        let mut v = vec![r.n.to_string(), i.to_string()];
                        v.extend(setup.plan.gamma_grid[i].iter().map(|&g| f(g)));
                        v.extend([f(p.value), f(p.se), p.count.to_string()]);
                        v
                    })
                })
                .collect();
            let path = dir.join(format!("{name}_gamma.csv"));
            write_csv(&path, &dh, &detail)?;
            out.push(path);
            let s = vec![
                Series::new("sup error probability", rows.iter().map(|r| (r.n as f64, r.sup.value)).collect()),
                Series::new("bound", rows.iter().map(|r| (r.n as f64, r.bound)).collect()).dashed(),
            ];
            (s, "P(|G_check - G| > delta0)")
        }
        SweepTable::Probe(rows) => {
            let body: Vec<Vec<String>> = rows
                .iter()
                .map(|r| vec![r.n.to_string(), f(r.radius), f(r.min.value), f(r.min.se), r.argmin.to_string()])
                .collect();
            write_csv(&main, &header(&["n", "radius", "min", "min_se", "argmin"]), &body)?;
            let detail: Vec<Vec<String>> = rows
                .iter()
                .flat_map(|r| {
                    r.per_point
                        .iter()
                        .enumerate()
                        .map(move |(i, p)| vec![r.n.to_string(), i.to_string(), f(p.value), f(p.se)])
                })
                .collect();
            let path = dir.join(format!("{name}_points.csv"));
            write_csv(&path, &header(&["n", "point", "prob", "se"]), &detail)?;
            out.push(path);
            (
                vec![Series::new("min frequency", rows.iter().map(|r| (r.n as f64, r.min.value)).collect())],
                "min P(p_hat = p)",
            )
        }
        SweepTable::Curve(rows) => {
            let body: Vec<Vec<String>> =
                rows.iter().map(|r| vec![r.n.to_string(), f(r.prob.value), f(r.prob.se)]).collect();
            write_csv(&main, &header(&["n", "prob", "se"]), &body)?;
            (
                vec![Series::new("error probability", rows.iter().map(|r| (r.n as f64, r.prob.value)).collect())],
                "P(|G_check - G| > delta)",
            )
        }
        SweepTable::Uniformity(rows) => {
            let body: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    vec![r.n.to_string(), f(r.sup.value), f(r.sup.se), r.gamma_index.to_string(), r.t_index.to_string()]
                })
                .collect();
            write_csv(&main, &header(&["n", "sup", "sup_se", "gamma_index", "t_index"]), &body)?;
            (
                vec![Series::new("sup error probability", rows.iter().map(|r| (r.n as f64, r.sup.value)).collect())],
                "P(|Phi_hat - G| > delta)",
            )
        }
    };
    if setup.svg {
        let path = dir.join(format!("{name}.svg"));
        write_svg(&path, &line_chart(name, "n", y_label, &series, true))?;
        out.push(path);
    }
    Ok(out)
}

pub fn write_symdiff(setup: &Setup, rows: &[ReductionRow]) -> Result<Vec<PathBuf>> {
    let dir = &setup.out_dir;
    std::fs::create_dir_all(dir)?;
    let path = dir.join("symdiff.csv");
    let h = header(&[
        "n",
        "symdiff_full",
        "symdiff_full_se",
        "symdiff_star",
        "symdiff_star_se",
        "gap_full",
        "gap_full_band",
        "gap_star",
        "gap_star_band",
        "freq_full",
        "freq_full_se",
        "empty_cells",
    ]);
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.n.to_string(),
                f(r.symdiff_full.value),
                f(r.symdiff_full.se),
                f(r.symdiff_star.value),
                f(r.symdiff_star.se),
                opt(r.gap_full.map(|g| g.value)),
                opt(r.gap_full.map(|g| g.band)),
                opt(r.gap_star.map(|g| g.value)),
                opt(r.gap_star.map(|g| g.band)),
                opt(r.freq_full.map(|p| p.value)),
                opt(r.freq_full.map(|p| p.se)),
                r.empty_cells.to_string(),
            ]
        })
        .collect();
    write_csv(&path, &h, &body)?;
    let mut out = vec![path];
    if setup.svg {
        let series = vec![
            Series::new("full", rows.iter().map(|r| (r.n as f64, r.symdiff_full.value)).collect()),
            Series::new("r_star", rows.iter().map(|r| (r.n as f64, r.symdiff_star.value)).collect()),
        ];
        let path = dir.join("symdiff.svg");
        write_svg(&path, &line_chart("Symmetric-difference frequencies", "n", "sup frequency", &series, true))?;
        out.push(path);
    }
    Ok(out)
}
