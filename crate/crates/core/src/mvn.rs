//! Probabilities of Gaussian boxes `P(lo <= B x <= hi)`, `x ~ N(0, I)`.
//!
//! The constraint matrix is reduced by a pivoted Cholesky factor of `B B'`
//! so that each constraint bounds a single latent standard normal given the
//! earlier ones. Rank one is exact, rank two uses the bivariate normal
//! c.d.f. or one-dimensional adaptive quadrature, and higher ranks fall back
//! to randomized lattice rules in the sequential-conditioning form.

use crate::error::{Error, Result};
use crate::quadrature::{adaptive_gk, gauss_legendre};
use crate::special::{norm_cdf, norm_interval, norm_pdf, norm_quantile};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::sync::OnceLock;

/// Residual variance (relative to the largest row variance) below which a
/// constraint is treated as linearly dependent on the earlier ones.
const RANK_TOL: f64 = 1e-13;
const COEF_TOL: f64 = 1e-10;
const TAIL: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub error: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Estimate { value, error: 0.0 }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MvnConfig {
    pub points: usize,
    pub shifts: usize,
    pub seed: u64,
    pub abs_tol: f64,
}

impl Default for MvnConfig {
    fn default() -> Self {
        MvnConfig { points: 1 << 16, shifts: 16, seed: 0x5eed_1234_abcd_0001, abs_tol: 1e-12 }
    }
}

#[derive(Clone, Debug)]
struct Row {
    coef: Vec<f64>,
    lo: f64,
    hi: f64,
    closed: bool,
}

/// A set of linear constraints on a standard normal vector of fixed dimension.
#[derive(Clone, Debug)]
pub struct GaussianBox {
    dim: usize,
    rows: Vec<Row>,
}

#[derive(Clone, Debug)]
struct Cons {
    a: Vec<f64>,
    c: f64,
    lo: f64,
    hi: f64,
}

impl Cons {
    /// Bounds on the latent variable given the earlier ones.
    fn bounds(&self, prev: &[f64]) -> (f64, f64) {
        let shift: f64 = self.a.iter().zip(prev).map(|(a, u)| a * u).sum();
        let l = (self.lo - shift) / self.c;
        let h = (self.hi - shift) / self.c;
        if self.c > 0.0 {
            (l, h)
        } else {
            (h, l)
        }
    }
}

impl GaussianBox {
    pub fn new(dim: usize) -> Self {
        GaussianBox { dim, rows: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Adds `lo <= coef . x <= hi`; a degenerate row is checked inclusively.
    pub fn closed(&mut self, coef: &[f64], lo: f64, hi: f64) -> &mut Self {
        self.push(coef, lo, hi, true)
    }

    /// Adds `lo < coef . x < hi`; a degenerate row is checked strictly.
    pub fn open(&mut self, coef: &[f64], lo: f64, hi: f64) -> &mut Self {
        self.push(coef, lo, hi, false)
    }

    fn push(&mut self, coef: &[f64], lo: f64, hi: f64, closed: bool) -> &mut Self {
        assert_eq!(coef.len(), self.dim, "constraint length must match dimension");
        self.rows.push(Row { coef: coef.to_vec(), lo, hi, closed });
        self
    }

    pub fn probability(&self, cfg: &MvnConfig) -> Result<Estimate> {
        if self.rows.iter().any(|r| r.lo.is_nan() || r.hi.is_nan() || r.coef.iter().any(|c| !c.is_finite())) {
            return Err(Error::InvalidArgument("non-finite box constraint".into()));
        }
        let Some(red) = self.reduce() else {
            return Ok(Estimate::exact(0.0));
        };
        match red.len() {
            0 => Ok(Estimate::exact(1.0)),
            1 => {
                let (l, h) = interval(&red[0], &[]);
                Ok(Estimate::exact(norm_interval(l, h)))
            }
            2 => rank_two(&red, cfg),
            _ => Ok(lattice(&red, cfg)),
        }
    }

    /// Returns per-variable constraint lists, or `None` when a deterministic
    /// row is violated.
    fn reduce(&self) -> Option<Vec<Vec<Cons>>> {
        let rows: Vec<&Row> = self.rows.iter().filter(|r| r.lo > f64::NEG_INFINITY || r.hi < f64::INFINITY).collect();
        let m = rows.len();
        let mut sigma = vec![vec![0.0; m]; m];
        for i in 0..m {
            for j in 0..=i {
                let v: f64 = rows[i].coef.iter().zip(&rows[j].coef).map(|(a, b)| a * b).sum();
                sigma[i][j] = v;
                sigma[j][i] = v;
            }
        }
        let scale = (0..m).map(|i| sigma[i][i]).fold(0.0, f64::max);
        let mut perm: Vec<usize> = (0..m).collect();
        let mut l = vec![vec![0.0; m]; m];
        let mut rank = 0;
        for k in 0..m {
            let resid =
                |i: usize, l: &Vec<Vec<f64>>| sigma[perm[i]][perm[i]] - l[i][..k].iter().map(|x| x * x).sum::<f64>();
            let (best, dmax) =
                (k..m)
                    .map(|i| (i, resid(i, &l)))
                    .fold((k, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
            if !(dmax > RANK_TOL * scale) || scale == 0.0 {
                break;
            }
            perm.swap(k, best);
            l.swap(k, best);
            let lkk = dmax.sqrt();
            l[k][k] = lkk;
            for i in k + 1..m {
                let dot: f64 = (0..k).map(|j| l[i][j] * l[k][j]).sum();
                l[i][k] = (sigma[perm[i]][perm[k]] - dot) / lkk;
            }
            rank = k + 1;
        }
        let mut vars: Vec<Vec<Cons>> = vec![Vec::new(); rank];
        for i in 0..m {
            let row = rows[perm[i]];
            let coefs = &l[i][..rank.min(i + 1)];
            let norm = coefs.iter().map(|x| x * x).sum::<f64>().sqrt();
            let last = coefs.iter().rposition(|x| x.abs() > COEF_TOL * norm.max(f64::MIN_POSITIVE));
            match last {
                None => {
                    let ok = if row.closed { row.lo <= 0.0 && 0.0 <= row.hi } else { row.lo < 0.0 && 0.0 < row.hi };
                    if !ok {
                        return None;
                    }
                }
                Some(j) => vars[j].push(Cons { a: coefs[..j].to_vec(), c: coefs[j], lo: row.lo, hi: row.hi }),
            }
        }
        Some(vars)
    }
}

fn interval(cons: &[Cons], prev: &[f64]) -> (f64, f64) {
    cons.iter().fold((f64::NEG_INFINITY, f64::INFINITY), |(l, h), c| {
        let (a, b) = c.bounds(prev);
        (l.max(a), h.min(b))
    })
}

fn rank_two(red: &[Vec<Cons>], cfg: &MvnConfig) -> Result<Estimate> {
    let (l0, h0) = interval(&red[0], &[]);
    if !(h0 > l0) {
        return Ok(Estimate::exact(0.0));
    }
    if let [c] = red[1].as_slice() {
        let s = c.a[0].hypot(c.c);
        let r = c.a[0] / s;
        return Ok(Estimate::exact(bvn_rectangle(l0, h0, c.lo / s, c.hi / s, r).clamp(0.0, 1.0)));
    }
    let lo = l0.max(-TAIL);
    let hi = h0.min(TAIL);
    let mut breaks = Vec::new();
    let lines: Vec<(f64, f64)> = red[1]
        .iter()
        .flat_map(|c| {
            // bound = (b - a u) / c as a line in u
            [c.lo, c.hi].into_iter().filter(|b| b.is_finite()).map(move |b| (b / c.c, -c.a[0] / c.c))
        })
        .collect();
    for i in 0..lines.len() {
        for j in 0..i {
            let ds = lines[i].1 - lines[j].1;
            if ds.abs() > 1e-300 {
                breaks.push((lines[j].0 - lines[i].0) / ds);
            }
        }
    }
    let f = |u: f64| {
        let (l, h) = interval(&red[1], &[u]);
        norm_pdf(u) * norm_interval(l, h)
    };
    let r = adaptive_gk(lo, hi, &breaks, cfg.abs_tol, 2000, f)?;
    Ok(Estimate { value: r.value.clamp(0.0, 1.0), error: r.error })
}

fn lattice(red: &[Vec<Cons>], cfg: &MvnConfig) -> Estimate {
    let dims = red.len() - 1;
    let gen: Vec<f64> = primes(dims).iter().map(|&p| (p as f64).sqrt().fract()).collect();
    let shifts = cfg.shifts.max(2);
    let per = (cfg.points / shifts).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut means = Vec::with_capacity(shifts);
    let mut u = vec![0.0; red.len()];
    let mut w = vec![0.0; dims];
    for _ in 0..shifts {
        let shift: Vec<f64> = (0..dims).map(|_| rng.random::<f64>()).collect();
        let mut acc = 0.0;
        for i in 0..per {
            for d in 0..dims {
                let x = (shift[d] + (i as f64 + 1.0) * gen[d]).fract();
                // baker's transform
                w[d] = 1.0 - (2.0 * x - 1.0).abs();
            }
            acc += 0.5
                * (sequential(red, &w, &mut u)
                    + sequential(red, &w.iter().map(|x| 1.0 - x).collect::<Vec<_>>(), &mut u));
        }
        means.push(acc / per as f64);
    }
    let mean = means.iter().sum::<f64>() / shifts as f64;
    let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (shifts as f64 - 1.0);
    Estimate { value: mean.clamp(0.0, 1.0), error: 3.0 * (var / shifts as f64).sqrt() }
}

fn sequential(red: &[Vec<Cons>], w: &[f64], u: &mut [f64]) -> f64 {
    let mut weight = 1.0;
    let last = red.len() - 1;
    for (j, cons) in red.iter().enumerate() {
        let (l, h) = interval(cons, &u[..j]);
        let (el, eh) = (norm_cdf(l), norm_cdf(h));
        let p = norm_interval(l, h);
        if p <= 0.0 {
            return 0.0;
        }
        weight *= p;
        if j < last {
            let q = (el + w[j] * (eh - el)).clamp(1e-300, 1.0 - 1e-16);
            u[j] = norm_quantile(q).clamp(l.max(-40.0), h.min(40.0));
        }
    }
    weight
}

fn primes(n: usize) -> Vec<u64> {
    let mut out = Vec::with_capacity(n);
    let mut k = 2u64;
    while out.len() < n {
        if (2..k).take_while(|d| d * d <= k).all(|d| !k.is_multiple_of(d)) {
            out.push(k);
        }
        k += 1;
    }
    out
}

/// `P(a1 < X < b1, a2 < Y < b2)` for a standard bivariate normal with
/// correlation `r`.
pub fn bvn_rectangle(a1: f64, b1: f64, a2: f64, b2: f64, r: f64) -> f64 {
    if !(b1 > a1 && b2 > a2) {
        return 0.0;
    }
    upper_orthant(a1, a2, r) - upper_orthant(b1, a2, r) - upper_orthant(a1, b2, r) + upper_orthant(b1, b2, r)
}

/// `P(X > h, Y > k)` with infinite arguments allowed.
pub fn upper_orthant(h: f64, k: f64, r: f64) -> f64 {
    if h == f64::INFINITY || k == f64::INFINITY {
        return 0.0;
    }
    if h == f64::NEG_INFINITY {
        return norm_cdf(-k);
    }
    if k == f64::NEG_INFINITY {
        return norm_cdf(-h);
    }
    bvnd(h, k, r.clamp(-1.0, 1.0))
}

static GL_RULES: [OnceLock<Vec<(f64, f64)>>; 3] = [const { OnceLock::new() }; 3];

fn gl_rule(r: f64) -> &'static [(f64, f64)] {
    let (slot, n) = if r < 0.3 {
        (0, 6)
    } else if r < 0.75 {
        (1, 12)
    } else {
        (2, 20)
    };
    GL_RULES[slot].get_or_init(|| gauss_legendre(n))
}

/// Upper bivariate normal orthant probability, after Genz's BVND
/// (Drezner-Wesolowsky with Gauss-Legendre quadrature in the correlation).
pub fn bvnd(h: f64, k: f64, r: f64) -> f64 {
    let twopi = 2.0 * PI;
    let rule = gl_rule(r.abs());
    let hk = h * k;
    if r.abs() < 0.925 {
        let mut bvn = 0.0;
        if r.abs() > 0.0 {
            let hs = 0.5 * (h * h + k * k);
            let asr = 0.5 * r.asin();
            for &(x, w) in rule {
                let sn = (asr * (x + 1.0)).sin();
                bvn += w * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
            }
            bvn *= asr / (2.0 * twopi) * 2.0;
        }
        return bvn + norm_cdf(-h) * norm_cdf(-k);
    }
    let mut k = k;
    let mut hk = hk;
    if r < 0.0 {
        k = -k;
        hk = -hk;
    }
    let mut bvn = 0.0;
    if r.abs() < 1.0 {
        let a_s = (1.0 - r) * (1.0 + r);
        let mut a = a_s.sqrt();
        let b_s = (h - k) * (h - k);
        let c = (4.0 - hk) / 8.0;
        let d = (12.0 - hk) / 16.0;
        let asr = -0.5 * (b_s / a_s + hk);
        if asr > -100.0 {
            bvn = a * asr.exp() * (1.0 - c * (b_s - a_s) * (1.0 - d * b_s / 5.0) / 3.0 + c * d * a_s * a_s / 5.0);
        }
        if hk > -100.0 {
            let b = b_s.sqrt();
            bvn -=
                (-0.5 * hk).exp() * twopi.sqrt() * norm_cdf(-b / a) * b * (1.0 - c * b_s * (1.0 - d * b_s / 5.0) / 3.0);
        }
        a *= 0.5;
        let mut acc = 0.0;
        for &(x, w) in rule {
            let xs = (a * (x + 1.0)).powi(2);
            let rs = (1.0 - xs).sqrt();
            let asr = -0.5 * (b_s / xs + hk);
            if asr > -100.0 {
                acc += w
                    * asr.exp()
                    * ((-hk * (1.0 - rs) / (2.0 * (1.0 + rs))).exp() / rs - (1.0 + c * xs * (1.0 + d * xs)));
            }
        }
        bvn += a * acc;
        bvn = -bvn / twopi;
    }
    if r > 0.0 {
        bvn + norm_cdf(-h.max(k))
    } else {
        (-bvn + (norm_cdf(-h) - norm_cdf(-k)).max(0.0)).max(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Independent oracle: P(X > h, Y > k) = int_h^inf phi(x) Phi((rx - k)/sqrt(1-r^2)) dx.
    fn orthant_by_quadrature(h: f64, k: f64, r: f64) -> f64 {
        let s = (1.0 - r * r).sqrt();
        adaptive_gk(h, 12.0, &[], 1e-15, 4000, |x| norm_pdf(x) * norm_cdf((r * x - k) / s)).unwrap().value
    }

    #[test]
    fn bvnd_matches_quadrature_oracle() {
        for &r in &[-0.99, -0.95, -0.7, -0.3, -0.1, 0.0, 0.2, 0.5, 0.8, 0.93, 0.999] {
            for &h in &[-2.5, -0.7, 0.0, 0.4, 1.9] {
                for &k in &[-1.3, 0.0, 0.6, 2.2] {
                    let a = bvnd(h, k, r);
                    let b = orthant_by_quadrature(h, k, r);
                    assert!((a - b).abs() < 1e-12, "h={h} k={k} r={r}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn bvnd_special_values() {
        // P(X > 0, Y > 0) = 1/4 + asin(r)/(2 pi)
        for &r in &[-0.9, -0.5, 0.3, 0.95] {
            assert_relative_eq!(bvnd(0.0, 0.0, r), 0.25 + r.asin() / (2.0 * PI), epsilon = 1e-15);
        }
        assert_relative_eq!(bvnd(0.3, -0.2, 1.0), norm_cdf(-0.3), epsilon = 1e-15);
        assert_relative_eq!(bvnd(0.3, -0.8, -1.0), norm_cdf(0.8) - norm_cdf(0.3), epsilon = 1e-15);
    }

    #[test]
    fn rank_one_and_degenerate_rows() {
        let mut b = GaussianBox::new(2);
        b.closed(&[1.0, 1.0], f64::NEG_INFINITY, 0.5).closed(&[2.0, 2.0], -1.0, f64::INFINITY);
        let p = b.probability(&MvnConfig::default()).unwrap();
        let s = 2f64.sqrt();
        assert_relative_eq!(p.value, norm_cdf(0.5 / s) - norm_cdf(-0.5 / s), epsilon = 1e-15);

        let mut z = GaussianBox::new(1);
        z.closed(&[0.0], f64::NEG_INFINITY, 0.0);
        assert_eq!(z.probability(&MvnConfig::default()).unwrap().value, 1.0);
        let mut z = GaussianBox::new(1);
        z.open(&[0.0], -1.0, 0.0);
        assert_eq!(z.probability(&MvnConfig::default()).unwrap().value, 0.0);
    }

    #[test]
    fn rank_two_routes_agree() {
        // one constraint per variable: closed-form path
        let mut b = GaussianBox::new(3);
        b.closed(&[1.0, 0.5, 0.0], f64::NEG_INFINITY, 0.3).open(&[-0.4, 0.2, 1.1], -0.8, 1.5);
        let closed_form = b.probability(&MvnConfig::default()).unwrap().value;
        // same box with a redundant duplicated row forces the quadrature path
        let mut c = b.clone();
        c.closed(&[-0.8, 0.4, 2.2], -10.0, 3.0);
        let quad = c.probability(&MvnConfig::default()).unwrap();
        assert!((closed_form - quad.value).abs() < 1e-10, "{closed_form} vs {quad:?}");
        // lattice route on an equivalent three-dimensional box with a slack row
        let mut d = b.clone();
        d.closed(&[0.0, 0.0, 0.0], -1.0, 1.0);
        assert_relative_eq!(d.probability(&MvnConfig::default()).unwrap().value, closed_form, epsilon = 1e-14);
    }

    #[test]
    fn trivariate_orthant_against_closed_form() {
        // P(X1>0,X2>0,X3>0) = 1/8 + (asin r12 + asin r13 + asin r23)/(4 pi)
        let l = [[1.0, 0.0, 0.0], [0.5, 0.75f64.sqrt(), 0.0], [0.3, -0.2, 0.9]];
        let mut b = GaussianBox::new(3);
        for row in &l {
            b.closed(row, 0.0, f64::INFINITY);
        }
        let cov = |i: usize, j: usize| (0..3).map(|k| l[i][k] * l[j][k]).sum::<f64>();
        let corr = |i: usize, j: usize| cov(i, j) / (cov(i, i) * cov(j, j)).sqrt();
        let exact = 0.125 + (corr(0, 1).asin() + corr(0, 2).asin() + corr(1, 2).asin()) / (4.0 * PI);
        let est = b.probability(&MvnConfig::default()).unwrap();
        assert!((est.value - exact).abs() < 2e-5, "{est:?} vs {exact}");
        assert!(est.error < 1e-4);
    }
}
