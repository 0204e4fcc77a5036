//! One-dimensional quadrature: Gauss-Legendre with node doubling and an
//! adaptive Gauss-Kronrod (7/15) integrator.

use crate::error::{Error, Result};
use std::sync::OnceLock;

const MAX_LEVEL: usize = 8;
static RULES: [OnceLock<Vec<(f64, f64)>>; MAX_LEVEL] = [const { OnceLock::new() }; MAX_LEVEL];

/// Nodes and weights of the `n`-point Gauss-Legendre rule on [-1, 1].
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    let nf = n as f64;
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = nf * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        out.push((x, 2.0 / ((1.0 - x * x) * dp * dp)));
    }
    out
}

/// Cached rule with `16 * 2^level` nodes.
fn rule(level: usize) -> &'static [(f64, f64)] {
    RULES[level].get_or_init(|| gauss_legendre(16 << level))
}

pub fn max_nodes() -> usize {
    16 << (MAX_LEVEL - 1)
}

fn apply(level: usize, a: f64, b: f64, f: &mut impl FnMut(f64) -> f64) -> f64 {
    let (m, h) = (0.5 * (a + b), 0.5 * (b - a));
    rule(level).iter().map(|&(x, w)| w * f(m + h * x)).sum::<f64>() * h
}

#[derive(Clone, Copy, Debug)]
pub struct Integral {
    pub value: f64,
    pub error: f64,
    pub nodes: usize,
}

/// Gauss-Legendre on `[a, b]` doubling the node count until two successive
/// estimates agree to `max(rel_tol * |I|, abs_tol)`.
pub fn gl_doubling(
    a: f64,
    b: f64,
    rel_tol: f64,
    abs_tol: f64,
    max_nodes: usize,
    mut f: impl FnMut(f64) -> f64,
) -> Result<Integral> {
    if !(b > a) {
        return Ok(Integral { value: 0.0, error: 0.0, nodes: 0 });
    }
    let mut prev = apply(0, a, b, &mut f);
    let mut nodes = 16;
    let mut level = 1;
    let mut err = f64::INFINITY;
    while level < MAX_LEVEL && (16 << level) <= max_nodes {
        let cur = apply(level, a, b, &mut f);
        nodes += 16 << level;
        err = (cur - prev).abs();
        if err <= (rel_tol * cur.abs()).max(abs_tol) {
            return Ok(Integral { value: cur, error: err, nodes });
        }
        prev = cur;
        level += 1;
    }
    Err(Error::Tolerance { best: prev, err })
}

/// Gauss-Legendre on consecutive pieces delimited by `breaks` (sorted,
/// including both ends).
pub fn gl_piecewise(
    breaks: &[f64],
    rel_tol: f64,
    abs_tol: f64,
    max_nodes: usize,
    mut f: impl FnMut(f64) -> f64,
) -> Result<Integral> {
    let mut total = Integral { value: 0.0, error: 0.0, nodes: 0 };
    let mut failed = false;
    let pieces = breaks.len().saturating_sub(1).max(1) as f64;
    for w in breaks.windows(2) {
        match gl_doubling(w[0], w[1], rel_tol, abs_tol / pieces, max_nodes, &mut f) {
            Ok(i) => {
                total.value += i.value;
                total.error += i.error;
                total.nodes += i.nodes;
            }
            Err(Error::Tolerance { best, err }) => {
                failed = true;
                total.value += best;
                total.error += err;
            }
            Err(e) => return Err(e),
        }
    }
    if failed {
        return Err(Error::Tolerance { best: total.value, err: total.error });
    }
    Ok(total)
}

#[allow(clippy::excessive_precision)]
const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
];
#[allow(clippy::excessive_precision)]
const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
#[allow(clippy::excessive_precision)]
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

fn gk15(a: f64, b: f64, f: &mut impl FnMut(f64) -> f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut rk = fc * WGK[7];
    let mut rg = fc * WG[3];
    for j in 0..7 {
        let x = h * XGK[j];
        let s = f(c - x) + f(c + x);
        rk += WGK[j] * s;
        if j % 2 == 1 {
            rg += WG[j / 2] * s;
        }
    }
    (rk * h, ((rk - rg) * h).abs())
}

/// Globally adaptive GK15 over `[a, b]` with initial breakpoints `breaks`
/// (interior points; need not be sorted or inside the interval).
pub fn adaptive_gk(
    a: f64,
    b: f64,
    breaks: &[f64],
    abs_tol: f64,
    max_intervals: usize,
    mut f: impl FnMut(f64) -> f64,
) -> Result<Integral> {
    if !(b > a) {
        return Ok(Integral { value: 0.0, error: 0.0, nodes: 0 });
    }
    let mut pts: Vec<f64> = std::iter::once(a)
        .chain(breaks.iter().copied().filter(|&x| x > a && x < b))
        .chain(std::iter::once(b))
        .collect();
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    let mut segs: Vec<(f64, f64, f64, f64)> = pts
        .windows(2)
        .map(|w| {
            let (v, e) = gk15(w[0], w[1], &mut f);
            (w[0], w[1], v, e)
        })
        .collect();
    let mut nodes = 15 * segs.len();
    loop {
        let err: f64 = segs.iter().map(|s| s.3).sum();
        let val: f64 = segs.iter().map(|s| s.2).sum();
        if err <= abs_tol {
            return Ok(Integral { value: val, error: err, nodes });
        }
        if segs.len() >= max_intervals {
            return Err(Error::Tolerance { best: val, err });
        }
        let (i, _) = segs.iter().enumerate().max_by(|x, y| x.1 .3.total_cmp(&y.1 .3)).expect("non-empty");
        let (lo, hi, _, _) = segs.swap_remove(i);
        let mid = 0.5 * (lo + hi);
        if !(mid > lo && mid < hi) {
            return Err(Error::Tolerance { best: val, err });
        }
        let (v1, e1) = gk15(lo, mid, &mut f);
        let (v2, e2) = gk15(mid, hi, &mut f);
        nodes += 30;
        segs.push((lo, mid, v1, e1));
        segs.push((mid, hi, v2, e2));
    }
}
