//! Property tests for identities that must hold at every input.

use nalgebra::{DMatrix, DVector};
use postsel_core::cond_dist::*;
use postsel_core::designs::{ar1, equicorrelated, synthetic, DesignKind};
use postsel_core::estimators::{AuxRule, CheckEstimator};
use postsel_core::linalg::pinv;
use postsel_core::regression::*;
use postsel_core::selection::*;
use proptest::prelude::*;

fn design(n: usize, rho: f64, seed: u64) -> DesignMatrix {
    synthetic(&equicorrelated(3, rho), n, DesignKind::GaussianRows, seed).unwrap()
}

fn target(rows: &[[f64; 3]]) -> TargetMap {
    TargetMap::new(DMatrix::from_fn(rows.len(), 3, |i, j| rows[i][j])).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn delta_is_even_and_complementary(s in 0.0f64..5.0, a in -20.0f64..20.0, b in 0.0f64..20.0) {
        prop_assert_eq!(delta(s, a, b), delta(s, -a, b));
        prop_assert!((delta(s, a, b) + delta_complement(s, a, b) - 1.0).abs() < 1e-14);
        prop_assert!((0.0..=1.0).contains(&delta(s, a, b)));
        prop_assert_eq!(delta(s, f64::INFINITY, b), 0.0);
    }

    #[test]
    fn gts_is_the_largest_rejection(t in prop::collection::vec(-4.0f64..4.0, 3), o in 0usize..3, c in 0.5f64..3.0) {
        let fam = NestedFamily::constant(o, 3, c).unwrap();
        let mut stats = vec![0.0];
        stats.extend(t);
        let p = gts_from_stats(&stats, &fam);
        let brute = (o..=3).filter(|&q| q == o || stats[q].abs() >= c).max().unwrap();
        prop_assert_eq!(p, brute);
    }

    #[test]
    fn zeta_identity(rho in 0.0f64..0.8, seed in 0u64..1000, p in 1usize..=3, two in any::<bool>()) {
        let d = design(25, rho, seed);
        let a = if two { target(&[[1.0, 0.0, 0.0], [0.5, 1.0, -1.0]]) } else { target(&[[1.0, 0.3, 0.0]]) };
        let pr = finite_projection(&d, &a, p).unwrap();
        let v = &pr.a_p * &pr.m_inv * pr.a_p.transpose();
        let quad_form = (pr.c.transpose() * pinv(&v) * &pr.c)[(0, 0)];
        prop_assert!(pr.zeta >= 0.0);
        prop_assert!((pr.zeta * pr.zeta + quad_form - pr.xi * pr.xi).abs() <= 1e-10 * pr.xi * pr.xi);
    }

    #[test]
    fn nu_matches_its_definition(g in prop::collection::vec(-3.0f64..3.0, 3), rho in 0.0f64..0.7) {
        let q = ar1(3, rho);
        let a = target(&[[1.0, 0.0, 0.0]]);
        let gamma = DVector::from_vec(g);
        let local = LocalPerturbation::new(&q, &a, gamma.clone()).unwrap();
        for r in 1..=3 {
            prop_assert!((local.nu[r] - nu_of(&q, &gamma, r).unwrap()).abs() < 1e-10);
        }
        for p in 0..=3 {
            let b = local.beta(p);
            let direct = beta_direct(&q, &a, &gamma, p).unwrap();
            prop_assert!((b - direct).amax() < 1e-10);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn selection_probabilities_partition(th in prop::collection::vec(-0.6f64..0.6, 3), c in 1.0f64..2.5, o in 0usize..3, sigma in 0.5f64..2.0) {
        let d = design(40, 0.4, 5);
        let fam = NestedFamily::constant(o, 3, c).unwrap();
        let a = target(&[[1.0, 0.0, 0.0]]);
        let pt = ParameterPoint::new(DVector::from_vec(th), sigma).unwrap();
        let m = ExactModel::new(&d, &a, &pt, &fam).unwrap();
        let total: f64 = m.sel_probs(&QuadratureConfig::default()).unwrap().iter().map(|v| v.value).sum();
        prop_assert!((total - 1.0).abs() < 1e-6, "{}", total);
    }

    #[test]
    fn conditional_cdf_is_a_cdf(th in prop::collection::vec(-0.5f64..0.5, 3), c in 1.0f64..2.5) {
        let d = design(40, 0.5, 6);
        let fam = NestedFamily::constant(1, 3, c).unwrap();
        let a = target(&[[1.0, 0.0, 0.0]]);
        let pt = ParameterPoint::new(DVector::from_vec(th), 1.0).unwrap();
        let m = ExactModel::new(&d, &a, &pt, &fam).unwrap();
        let quad = QuadratureConfig::default();
        for p in 1..=3 {
            let vals: Vec<f64> = (-12..=12)
                .map(|i| m.cond_cdf(&DVector::from_vec(vec![i as f64 * 0.5]), p, &quad).unwrap().value)
                .collect();
            prop_assert!(vals.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(vals.windows(2).all(|w| w[1] >= w[0] - 1e-9), "{:?}", vals);
            prop_assert!(vals[0] < 1e-3 && vals[24] > 1.0 - 1e-3);
        }
    }

    #[test]
    fn exact_law_is_scale_equivariant(th in prop::collection::vec(-0.5f64..0.5, 3), lambda in 0.3f64..3.0, t in -2.0f64..2.0) {
        let d = design(30, 0.3, 8);
        let fam = NestedFamily::constant(1, 3, 1.96).unwrap();
        let a = target(&[[1.0, 0.0, 0.0]]);
        let quad = QuadratureConfig::default();
        let theta = DVector::from_vec(th);
        let base = ParameterPoint::new(theta.clone(), 1.0).unwrap();
        let scaled = ParameterPoint::new(theta * lambda, lambda).unwrap();
        let (m1, m2) = (ExactModel::new(&d, &a, &base, &fam).unwrap(), ExactModel::new(&d, &a, &scaled, &fam).unwrap());
        for p in 1..=3 {
            prop_assert!((m1.sel_prob(p, &quad).unwrap().value - m2.sel_prob(p, &quad).unwrap().value).abs() < 1e-9);
            let g1 = m1.cond_cdf(&DVector::from_vec(vec![t]), p, &quad).unwrap().value;
            let g2 = m2.cond_cdf(&DVector::from_vec(vec![t * lambda]), p, &quad).unwrap().value;
            prop_assert!((g1 - g2).abs() < 1e-7, "p = {}: {} vs {}", p, g1, g2);
        }
    }

    #[test]
    fn minimal_order_routes_agree(th in prop::collection::vec(-0.5f64..0.5, 3), o in 1usize..3, t in -2.5f64..2.5) {
        let d = design(35, 0.5, 9);
        let fam = NestedFamily::constant(o, 3, 1.96).unwrap();
        let a = target(&[[1.0, 0.5, 0.0]]);
        let pt = ParameterPoint::new(DVector::from_vec(th), 1.0).unwrap();
        let m = ExactModel::new(&d, &a, &pt, &fam).unwrap();
        let quad = QuadratureConfig::default();
        let tv = DVector::from_vec(vec![t]);
        let gauss = m.cond_cdf(&tv, o, &quad).unwrap();
        let integral = m.cond_cdf_integral(&tv, o, &quad).unwrap();
        prop_assert!((gauss.value - integral.value).abs() < 1e-7, "{:?} vs {:?}", gauss, integral);
    }

    #[test]
    fn check_estimator_is_a_cdf(y in prop::collection::vec(-2.0f64..2.0, 30), c in 1.0f64..2.5) {
        let d = design(30, 0.5, 10);
        let fam = NestedFamily::constant(1, 3, c).unwrap();
        let a = target(&[[1.0, 0.0, 0.0]]);
        let s = Sample::new(&d, &DVector::from_vec(y)).unwrap();
        for aux in [AuxRule::SqrtLog, AuxRule::Bic, AuxRule::Power { coef: 1e9, exponent: 0.0 }] {
            let est = CheckEstimator::new(&d, &a, &fam, aux, &QuadratureConfig::default()).unwrap();
            for p in 1..=3 {
                let vals: Vec<f64> = (-20..=20)
                    .map(|i| est.check_cdf(&s, p, &DVector::from_vec(vec![i as f64 * 0.25])).unwrap().value)
                    .collect();
                prop_assert!(vals.iter().all(|v| (0.0..=1.0).contains(v)));
                prop_assert!(vals.windows(2).all(|w| w[1] >= w[0] - 1e-12));
            }
        }
    }
}
