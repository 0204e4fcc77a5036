//! Monte Carlo checks of selection, exact distributions, estimators and the
//! simulation harness itself.

use nalgebra::{DMatrix, DVector};
use postsel_core::cond_dist::{ExactModel, Proportion, QuadratureConfig};
use postsel_core::designs::{equicorrelated, orthogonal, synthetic, DesignKind};
use postsel_core::estimators::{aux_decide, AuxDecision, AuxRule};
use postsel_core::montecarlo::*;
use postsel_core::regression::*;
use postsel_core::selection::*;
use postsel_core::special::{norm_sf, student_t_cdf};

fn nested(o: usize, c: f64) -> NestedFamily {
    NestedFamily::constant(o, 3, c).unwrap()
}

fn point(theta: &[f64]) -> ParameterPoint {
    ParameterPoint::new(DVector::from_column_slice(theta), 1.0).unwrap()
}

fn within(p: Proportion, target: f64, k: f64) -> bool {
    (p.value - target).abs() <= k * p.se.max(1e-12)
}

fn ks_distance(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / m).abs().max(((i + 1) as f64 / m - f).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn null_t_statistics_follow_student_t() {
    let d = synthetic(&equicorrelated(3, 0.5), 30, DesignKind::GaussianRows, 3).unwrap();
    let pt = point(&[1.0, 0.0, 0.5]);
    // full-model statistic of the null coordinate theta_2
    let tf: Vec<f64> =
        replicate(17, 30, 100_000, |_, _, rng| full_model_t(&simulate(&d, &pt, Sampler::Response, rng)?, 1)).unwrap();
    let ks_full = ks_distance(tf, |x| student_t_cdf(27.0, x));
    assert!(ks_full < 0.01, "KS distance {ks_full}");

    let pt0 = point(&[1.0, 0.5, 0.0]);
    let t3: Vec<f64> =
        replicate(18, 30, 100_000, |_, _, rng| t_stat(&simulate(&d, &pt0, Sampler::Response, rng)?, 3)).unwrap();
    let ks = ks_distance(t3, |x| student_t_cdf(27.0, x));
    assert!(ks < 0.01, "KS distance {ks}");
}

#[test]
fn general_to_specific_size_at_the_null() {
    let d = synthetic(&equicorrelated(3, 0.5), 400, DesignKind::GaussianRows, 4).unwrap();
    let fam = nested(1, 1.96);
    let pt = point(&[0.0, 0.0, 0.0]);
    let ledger = LedgerSpec {
        reps: 100_000,
        seed: 9,
        ..LedgerSpec::new(&d, &TargetMap::coordinates(3, &[0]).unwrap(), &pt, Rule::Nested(&fam))
    }
    .run()
    .unwrap();
    let f = ledger.selection_frequency(&Selected::Order(3)).unwrap();
    assert!(within(f, 2.0 * norm_sf(1.96), 3.0), "{f:?}");
    let total: f64 = ledger.selection_frequencies().iter().map(|(_, p)| p.value).sum();
    assert!((total - 1.0).abs() < 1e-12);
}

#[test]
fn aic_selects_the_full_model_at_the_limiting_rate() {
    let d = synthetic(&equicorrelated(3, 0.5), 6400, DesignKind::ExactQ, 5).unwrap();
    let fam = SubsetFamily::all(3, 2.0).unwrap();
    let pt = point(&[1.0, 0.5, 0.0]);
    let a = TargetMap::coordinates(3, &[0]).unwrap();
    let ledger =
        LedgerSpec { reps: 100_000, seed: 10, ..LedgerSpec::new(&d, &a, &pt, Rule::Subsets(&fam)) }.run().unwrap();
    let f = ledger.selection_frequency(&Selected::Mask(Mask::full(3))).unwrap();
    assert!(within(f, 2.0 * norm_sf(2f64.sqrt()), 3.0), "{f:?}");
}

fn symdiff_freqs(n: usize, rule: Rule, c: f64, reps: usize) -> (Proportion, Proportion) {
    let d = synthetic(&equicorrelated(3, 0.5), n, DesignKind::ExactQ, 6).unwrap();
    let pt = point(&[1.0, 0.2, 0.0]);
    let a = TargetMap::coordinates(3, &[0]).unwrap();
    let r_star = Mask::parse("110").unwrap();
    let ledger = LedgerSpec { reps, seed: 12, symdiff_check: Some((&r_star, c)), ..LedgerSpec::new(&d, &a, &pt, rule) }
        .run()
        .unwrap();
    let count = |i: usize| {
        let hits =
            ledger.rows.iter().filter(|r| if i == 0 { r.symdiff.unwrap().0 } else { r.symdiff.unwrap().1 }).count();
        Proportion::from_counts(hits, reps).unwrap()
    };
    (count(0), count(1))
}

#[test]
fn symdiff_check_for_threshold_aic_and_a_wrong_constant() {
    let thr = ThresholdRule::new(Mask::parse("110").unwrap(), 2f64.sqrt()).unwrap();
    let (a, b) = symdiff_freqs(100, Rule::Threshold(&thr), 2f64.sqrt(), 5000);
    assert_eq!((a.value, b.value), (0.0, 0.0));

    let aic = SubsetFamily::all(3, 2.0).unwrap();
    let ladder: Vec<(Proportion, Proportion)> =
        [100, 400, 1600, 6400].iter().map(|&n| symdiff_freqs(n, Rule::Subsets(&aic), 2f64.sqrt(), 20_000)).collect();
    let full: Vec<(f64, f64)> = ladder.iter().map(|x| (x.0.value, 3.0 * x.0.se)).collect();
    let star: Vec<(f64, f64)> = ladder.iter().map(|x| (x.1.value, 3.0 * x.1.se)).collect();
    assert!(decreasing_within_noise(&full), "{full:?}");
    assert!(decreasing_within_noise(&star), "{star:?}");
    assert!(full[3].0 < 0.01 && star[3].0 < 0.01);

    let (a, b) = symdiff_freqs(6400, Rule::Subsets(&aic), 3.0, 20_000);
    assert!(a.value > 0.1 && b.value > 0.1, "{a:?} {b:?}");
}

#[test]
fn selection_is_scale_equivariant() {
    let d = synthetic(&equicorrelated(3, 0.5), 50, DesignKind::GaussianRows, 7).unwrap();
    let fam = nested(0, 1.96);
    let pt = point(&[0.4, 0.2, 0.1]);
    let same = replicate(3, 50, 2000, |_, _, rng| {
        let y = draw_sample(&d, &pt, rng);
        let a = gts_select(&Sample::new(&d, &y)?, &fam)?.order();
        let b = gts_select(&Sample::new(&d, &(&y * 7.5))?, &fam)?.order();
        Ok(a == b)
    })
    .unwrap();
    assert!(same.into_iter().all(|x| x));
}

#[test]
fn underselection_vanishes() {
    let fam = nested(0, 1.96);
    let pt = point(&[1.0, 0.3, 0.3]);
    let a = TargetMap::coordinates(3, &[0]).unwrap();
    let under: Vec<f64> = [100, 400, 1600, 6400]
        .iter()
        .map(|&n| {
            let d = synthetic(&equicorrelated(3, 0.5), n, DesignKind::ExactQ, 8).unwrap();
            let l =
                LedgerSpec { reps: 10_000, seed: 1, ..LedgerSpec::new(&d, &a, &pt, Rule::Nested(&fam)) }.run().unwrap();
            l.rows.iter().filter(|r| r.selected != Selected::Order(3)).count() as f64 / l.len() as f64
        })
        .collect();
    assert!(under.windows(2).all(|w| w[1] <= w[0]), "{under:?}");
    assert!(under[3] < 1e-3);
}

#[test]
fn exact_selection_probabilities_and_mixture_identity() {
    let d = synthetic(&equicorrelated(3, 0.5), 60, DesignKind::GaussianRows, 21).unwrap();
    let fam = nested(1, 1.96);
    let a = TargetMap::coordinates(3, &[0]).unwrap();
    let pt = point(&[1.0, 0.25, 0.2]);
    let quad = QuadratureConfig::default();
    let model = ExactModel::new(&d, &a, &pt, &fam).unwrap();
    let probs = model.sel_probs(&quad).unwrap();
    let ts: Vec<DVector<f64>> = [-1.0, 0.0, 0.7].iter().map(|&v| DVector::from_vec(vec![v])).collect();
    let table = ExactTable::new(&model, &ts, &quad).unwrap();
    let ledger = LedgerSpec {
        reps: 100_000,
        seed: 33,
        t_grid: &ts,
        exact: Some(&table),
        sampler: Sampler::Response,
        ..LedgerSpec::new(&d, &a, &pt, Rule::Nested(&fam))
    }
    .run()
    .unwrap();
    for (i, p) in fam.orders().enumerate() {
        let f = ledger.selection_frequency(&Selected::Order(p)).unwrap();
        assert!(within(f, probs[i].value, 3.0), "p = {p}: {f:?} vs {}", probs[i].value);
    }
    for (j, t) in ts.iter().enumerate() {
        let mix: f64 = fam.orders().enumerate().map(|(i, p)| table.get(p, j).unwrap() * probs[i].value).sum();
        let hits = ledger.rows.iter().filter(|r| r.scaled[0] <= t[0]).count();
        let emp = Proportion::from_counts(hits, ledger.len()).unwrap();
        assert!(within(emp, mix, 3.0), "t = {t}: {emp:?} vs {mix}");
        // the exact column averaged within a cell is the cell's c.d.f.
        for p in fam.orders() {
            let cell: Vec<f64> =
                ledger.rows.iter().filter(|r| r.selected == Selected::Order(p)).map(|r| r.exact[j]).collect();
            let mean = cell.iter().sum::<f64>() / cell.len() as f64;
            assert!((mean - table.get(p, j).unwrap()).abs() < 1e-12);
        }
    }
}

#[test]
fn auxiliary_decision_is_consistent() {
    let ladder = [100, 400, 1600, 6400];
    let freq = |theta: &[f64], want: AuxDecision| -> Vec<f64> {
        ladder
            .iter()
            .map(|&n| {
                let d = synthetic(&equicorrelated(3, 0.5), n, DesignKind::ExactQ, 2).unwrap();
                let pt = point(theta);
                let hits = replicate(4, n, 5000, |_, _, rng| {
                    Ok(aux_decide(&simulate(&d, &pt, Sampler::Sufficient, rng)?, 3, AuxRule::SqrtLog)? == want)
                })
                .unwrap();
                hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64
            })
            .collect()
    };
    let at = freq(&[1.0, 0.0, 0.3], AuxDecision::AtOrder);
    assert!(at.windows(2).all(|w| w[1] >= w[0]) && at[3] > 0.999, "{at:?}");
    let below = freq(&[1.0, 0.3, 0.0], AuxDecision::Below);
    assert!(below.windows(2).all(|w| w[1] >= w[0] - 0.01) && below[3] > 0.98, "{below:?}");
}

fn plan(q: DMatrix<f64>, theta: &[f64], reps: usize) -> ExperimentPlan {
    let rho0 = default_rho0(&q, 1.0).unwrap();
    ExperimentPlan {
        design: DesignSource::Synthetic { q, kind: DesignKind::ExactQ, seed: 11 },
        ladder: vec![100, 400, 1600, 6400],
        point: point(theta),
        family: nested(1, 1.96),
        schedule: vec![],
        target: TargetMap::coordinates(3, &[0]).unwrap(),
        gamma_grid: axis_grid(3, &[2], rho0, 4),
        t_grid: (0..21).map(|i| DVector::from_vec(vec![-3.0 + 0.3 * i as f64])).collect(),
        reps,
        seed: 5,
        sampler: Sampler::Sufficient,
        aux: AuxRule::SqrtLog,
        quad: QuadratureConfig::default(),
    }
}

#[test]
fn check_estimator_consistency_curve() {
    let p = plan(equicorrelated(3, 0.5), &[1.0, 0.0, 0.0], 20_000);
    let curve = consistency_curve(&p, 7, 0.05).unwrap();
    let v: Vec<(f64, f64)> = curve.iter().map(|r| (r.prob.value, 3.0 * r.prob.se)).collect();
    assert!(decreasing_within_noise(&v), "{v:?}");
    assert!(v[3].0 < v[0].0 / 3.0);
}

#[test]
fn plugin_is_uniformly_consistent_for_orthogonal_designs() {
    let mut p = plan(DMatrix::identity(3, 3), &[1.0, 0.0, 0.0], 5000);
    p.gamma_grid = axis_grid(3, &[1, 2], 4.0, 2);
    p.t_grid = (0..5).map(|i| DVector::from_vec(vec![-2.0 + i as f64])).collect();
    let rows = plugin_uniformity(&p, 3, 0.05).unwrap();
    let v: Vec<(f64, f64)> = rows.iter().map(|r| (r.sup.value, 3.0 * r.sup.se)).collect();
    assert!(decreasing_within_noise(&v) && v[3].0 <= 0.05, "{v:?}");
}

#[test]
fn draws_have_the_model_moments() {
    let d = DesignMatrix::new(DMatrix::from_row_slice(5, 2, &[1.0, 0.3, 1.0, -1.2, 1.0, 0.5, 1.0, 2.0, 1.0, -0.7]))
        .unwrap();
    let zero = ParameterPoint::new(DVector::zeros(2), 1.5).unwrap();
    let ys = replicate(8, 5, 100_000, |_, _, rng| Ok(draw_sample(&d, &zero, rng))).unwrap();
    let m = ys.len() as f64;
    let mean = ys.iter().fold(DVector::zeros(5), |a, y| a + y) / m;
    let cov = ys.iter().fold(DMatrix::zeros(5, 5), |a, y| a + y * y.transpose()) / m;
    let s2 = 1.5f64 * 1.5;
    for i in 0..5 {
        assert!(mean[i].abs() <= 3.0 * (s2 / m).sqrt());
        for j in 0..5 {
            let target = if i == j { s2 } else { 0.0 };
            let se = if i == j { s2 * (2.0 / m).sqrt() } else { s2 / m.sqrt() };
            assert!((cov[(i, j)] - target).abs() <= 3.0 * se, "cov[{i},{j}] = {}", cov[(i, j)]);
        }
    }
    let again = replicate(8, 5, 3, |_, _, rng| Ok(draw_sample(&d, &zero, rng))).unwrap();
    for (a, b) in again.iter().zip(&ys) {
        assert_eq!(
            a.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}

#[test]
fn sufficient_and_response_samplers_agree_in_law() {
    let d = synthetic(&equicorrelated(3, 0.5), 40, DesignKind::GaussianRows, 9).unwrap();
    let pt = point(&[0.5, 0.1, 0.0]);
    let stat = |sampler| {
        replicate(77, 40, 50_000, |_, _, rng| {
            let s = simulate(&d, &pt, sampler, rng)?;
            Ok((t_stat(&s, 2)?, s.sigma2_hat()?))
        })
        .unwrap()
    };
    let (a, b) = (stat(Sampler::Response), stat(Sampler::Sufficient));
    let mean = |v: &[(f64, f64)], f: fn(&(f64, f64)) -> f64| v.iter().map(f).sum::<f64>() / v.len() as f64;
    let (ma, mb) = (mean(&a, |x| x.0), mean(&b, |x| x.0));
    assert!((ma - mb).abs() < 4.0 * (2.0 / 50_000f64).sqrt(), "{ma} vs {mb}");
    let (sa, sb) = (mean(&a, |x| x.1), mean(&b, |x| x.1));
    assert!((sa - sb).abs() < 4.0 * (2.0 * 2.0 / 37.0 / 50_000f64).sqrt(), "{sa} vs {sb}");
}

#[test]
fn ledger_conventions() {
    let d = synthetic(&equicorrelated(3, 0.5), 60, DesignKind::GaussianRows, 1).unwrap();
    let fam = nested(1, 1.96);
    let a = TargetMap::coordinates(3, &[0]).unwrap();
    let pt = point(&[1.0, 0.2, 0.0]);
    let quad = QuadratureConfig::default();
    let ts = vec![DVector::from_vec(vec![0.3])];
    let model = ExactModel::new(&d, &a, &pt, &fam).unwrap();
    let table = ExactTable::new(&model, &ts, &quad).unwrap();
    let est = postsel_core::estimators::CheckEstimator::new(&d, &a, &fam, AuxRule::SqrtLog, &quad).unwrap();
    let spec = LedgerSpec {
        reps: 2000,
        seed: 4,
        t_grid: &ts,
        exact: Some(&table),
        estimator: Some(&est),
        plugin: Some(PluginOrder::Selected),
        ..LedgerSpec::new(&d, &a, &pt, Rule::Nested(&fam))
    };
    let ledger = spec.run().unwrap();
    assert_eq!(ledger.len(), 2000);
    let huge = DVector::from_vec(vec![1e300]);
    for (cell, f) in ledger.selection_frequencies() {
        assert_eq!(empirical_cond_cdf(&ledger, &cell, &huge).unwrap().value, 1.0);
        assert!(f.count == 2000);
    }
    assert_eq!(error_prob(&ledger, EstimatorTag::Check, 0, 1.1, None).unwrap().value, 0.0);
    assert!(error_prob(&ledger, EstimatorTag::Check, 0, 0.0, None).unwrap().value > 0.99);
    assert!(error_prob(&ledger, EstimatorTag::Plugin, 0, 0.0, None).unwrap().value > 0.99);
    assert!(matches!(
        error_prob(&ledger, EstimatorTag::Check, 0, 0.1, Some(&Selected::Order(0))),
        Err(postsel_core::Error::EmptyCell(_))
    ));
    let mut buf = Vec::new();
    ledger.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# postsel-ledger v1"));
    assert!(lines.next().unwrap().starts_with("rep,seed,selected,theta_tilde_1"));
    assert_eq!(lines.count(), 2000);

    let one = ReplicationLedger { rows: vec![ledger.rows[0].clone()], ..ledger.clone() };
    let cell = one.rows[0].selected.clone();
    let v = empirical_cond_cdf(&one, &cell, &one.rows[0].scaled).unwrap();
    assert_eq!((v.value, v.count), (1.0, 1));
}

#[test]
fn ledgers_do_not_depend_on_thread_count() {
    let d = synthetic(&equicorrelated(3, 0.5), 80, DesignKind::GaussianRows, 1).unwrap();
    let fam = nested(1, 1.96);
    let a = TargetMap::coordinates(3, &[0]).unwrap();
    let pt = point(&[1.0, 0.2, 0.1]);
    let spec = LedgerSpec {
        reps: 3000,
        seed: 99,
        sampler: Sampler::Response,
        ..LedgerSpec::new(&d, &a, &pt, Rule::Nested(&fam))
    };
    let run =
        |threads| rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| spec.run().unwrap());
    let (one, four) = (run(1), run(4));
    assert_eq!(one, four);
    let (mut x, mut y) = (Vec::new(), Vec::new());
    one.write_csv(&mut x).unwrap();
    four.write_csv(&mut y).unwrap();
    assert_eq!(x, y);
}

#[test]
fn sweep_details() {
    let p = plan(equicorrelated(3, 0.5), &[1.0, 0.0, 0.0], 5000);
    let rows = nonuniformity_sweep(&p, SweepMode::Unconditional).unwrap();
    let zero = p.gamma_grid.iter().position(|g| g.iter().all(|&v| v == 0.0)).unwrap();
    let last = rows.last().unwrap();
    assert!(last.per_gamma[zero].value < 0.05);
    assert!(rows.iter().all(|r| r.bound == rows[0].bound));

    // at p = P the minimum selection frequency is at least the null rejection rate
    let fam = nested(1, 1.96);
    let mut q = plan(equicorrelated(3, 0.5), &[1.0, 0.0, 0.0], 20_000);
    q.ladder = vec![100, 1600];
    let offsets: Vec<DVector<f64>> = vec![
        DVector::from_vec(vec![0.0, 0.0, 0.0]),
        DVector::from_vec(vec![0.0, 0.5, 0.5]),
        DVector::from_vec(vec![0.0, 0.0, 0.9]),
    ];
    let probe = neighborhood_probe(&q, 3, RadiusSchedule { coef: 1.0, exponent: 0.5 }, &offsets, ProbePart::A).unwrap();
    for r in &probe {
        let d = q.design.design(r.n).unwrap();
        let zero = ParameterPoint::new(DVector::zeros(3), 1.0).unwrap();
        let l = LedgerSpec { reps: 20_000, seed: 123, ..LedgerSpec::new(&d, &q.target, &zero, Rule::Nested(&fam)) }
            .run()
            .unwrap();
        let null = l.selection_frequency(&Selected::Order(3)).unwrap();
        assert!(
            r.min.value >= null.value - 3.0 * (null.se * null.se + r.min.se * r.min.se).sqrt(),
            "{:?} vs {null:?}",
            r.min
        );
    }

    let bad = neighborhood_probe(
        &q,
        2,
        RadiusSchedule { coef: 1.0, exponent: 0.5 },
        &[DVector::from_vec(vec![0.0, 0.0, 1.5])],
        ProbePart::A,
    );
    assert!(bad.is_err());
}

#[test]
fn orthogonal_design_has_no_correlated_order() {
    let d = orthogonal(50, 3, 1).unwrap();
    let a = TargetMap::coordinates(3, &[0]).unwrap();
    assert_eq!(q_star(d.limit(), &a, &nested(1, 1.96)).unwrap(), None);
}
