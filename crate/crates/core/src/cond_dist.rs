//! Exact finite-sample conditional distribution of the post-model-selection
//! estimator given the selected order, the model-selection probabilities,
//! and their large-sample limits under local alternatives.
//!
//! Everything reduces to Gaussian box probabilities. Writing
//! `w ~ N(0, sigma^2 M^{-1})` for the restricted estimator's fluctuation,
//! `z = A[p] w` and `sqrt(n) thetatilde_p(p) = mu + b z + V` with
//! `V ~ N(0, sigma^2 zeta^2)` independent of `z`, the conditional c.d.f. at
//! order `p` is
//!
//! ```text
//! int h(s) prod_{q>p} Delta_q(s) [P(z <= t') - P(z <= t', |V + mu + b z| < s c sigma xi)] ds
//! ```
//!
//! divided by the selection probability.

use crate::error::{Error, Result};
use crate::linalg;
use crate::mvn::{Estimate, GaussianBox, MvnConfig};
use crate::quadrature::gl_piecewise;
use crate::regression::{
    eta, finite_projection, limit_projection, order_of, DesignMatrix, NestedFamily, ParameterPoint, Projection,
    TargetMap,
};
use crate::special::{ln_scaled_chi_density, norm_cdf, norm_interval, norm_sf, scaled_chi_quantile};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Conditioning probabilities below this are rejected as numerically negligible.
pub const MIN_CONDITIONING: f64 = 1e-10;

/// `Delta_s(a, b) = P(|N(0, s^2) - a| < b)`.
pub fn delta(s: f64, a: f64, b: f64) -> f64 {
    if !(b > 0.0) || a.is_infinite() {
        return 0.0;
    }
    let a = a.abs();
    if s == 0.0 {
        return if a < b { 1.0 } else { 0.0 };
    }
    norm_interval((a - b) / s, (a + b) / s).clamp(0.0, 1.0)
}

/// `1 - Delta_s(a, b)` without cancellation when `Delta` is close to one.
pub fn delta_complement(s: f64, a: f64, b: f64) -> f64 {
    if !(b > 0.0) || a.is_infinite() {
        return 1.0;
    }
    let a = a.abs();
    if s == 0.0 {
        return if a < b { 0.0 } else { 1.0 };
    }
    (norm_sf((a + b) / s) + norm_cdf((a - b) / s)).clamp(0.0, 1.0)
}

/// Density of `sqrt(chi2_d / d)`.
pub fn chi_scale_density(d: f64, s: f64) -> f64 {
    ln_scaled_chi_density(d, s).exp()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadratureConfig {
    /// Relative tolerance between successive Gauss-Legendre refinements.
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Node cap per piece for the `s`-integral.
    pub max_nodes: usize,
    /// Tail probability cut from each end of the `s`-domain.
    pub tail_prob: f64,
    /// Lattice points for box probabilities of rank three or more.
    pub qmc_points: usize,
    pub qmc_shifts: usize,
    pub seed: u64,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        QuadratureConfig {
            rel_tol: 1e-8,
            abs_tol: 1e-14,
            max_nodes: 1024,
            tail_prob: 1e-10,
            qmc_points: 1 << 16,
            qmc_shifts: 16,
            seed: 0x9e37_79b9_7f4a_7c15,
        }
    }
}

impl QuadratureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.abs_tol > 0.0 && self.tail_prob > 0.0 && self.tail_prob < 0.5) {
            return Err(Error::InvalidArgument("tolerances must be positive".into()));
        }
        if self.max_nodes < 32 || self.qmc_points < 8 || self.qmc_shifts < 2 {
            return Err(Error::InvalidArgument("node counts too small".into()));
        }
        Ok(())
    }

    fn mvn(&self, tag: u64) -> MvnConfig {
        MvnConfig { points: self.qmc_points, shifts: self.qmc_shifts, seed: mix(self.seed, tag), abs_tol: 1e-13 }
    }
}

/// SplitMix64 finalizer applied to `a + golden * (b + 1)`.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(b.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash_query(p: usize, t: &DVector<f64>, extra: u64) -> u64 {
    t.iter().fold(mix(p as u64, extra), |h, v| mix(h, v.to_bits()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    PointMass,
    Gaussian,
    Quadrature,
    MonteCarlo,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CdfValue {
    pub value: f64,
    pub error: f64,
    pub method: Method,
}

impl CdfValue {
    fn new(value: f64, error: f64, method: Method) -> Self {
        CdfValue { value: value.clamp(0.0, 1.0), error, method }
    }
}

/// `P(A[p] w <= u)` for `w ~ N(0, sigma^2 M^{-1})`, or the point mass at
/// zero when `p = 0` or `sigma = 0`.
pub fn gaussian_cdf(
    a_p: &DMatrix<f64>,
    m_inv: &DMatrix<f64>,
    sigma: f64,
    u: &DVector<f64>,
    cfg: &MvnConfig,
) -> Result<Estimate> {
    let p = a_p.ncols();
    if p == 0 || sigma == 0.0 {
        return Ok(Estimate::exact(if u.iter().all(|&x| x >= 0.0) { 1.0 } else { 0.0 }));
    }
    let l = linalg::cholesky_lower(m_inv, "restricted covariance")?;
    let rows = a_p * l * sigma;
    let mut bx = GaussianBox::new(p);
    for i in 0..rows.nrows() {
        bx.closed(&rows.row(i).iter().copied().collect::<Vec<_>>(), f64::NEG_INFINITY, u[i]);
    }
    bx.probability(cfg)
}

/// Numerator pieces `P(z <= u)` and `P(z <= u, |V + m + b z| < a)` with the
/// latent coordinates of `proj` scaled by `sigma`.
#[derive(Clone, Debug)]
struct Slab {
    rows: DMatrix<f64>,
    brow: Vec<f64>,
}

impl Slab {
    fn new(proj: &Projection, sigma: f64) -> Result<Self> {
        let p = proj.order;
        let l = linalg::cholesky_lower(&proj.m_inv, "restricted covariance")?;
        let rows = &proj.a_p * l * sigma;
        let mut brow: Vec<f64> = (proj.b.transpose() * &rows).iter().copied().collect();
        brow.push(sigma * proj.zeta);
        debug_assert_eq!(brow.len(), p + 1);
        Ok(Slab { rows, brow })
    }

    fn dim(&self) -> usize {
        self.rows.ncols() + 1
    }

    fn base(&self, u: &DVector<f64>) -> GaussianBox {
        let mut bx = GaussianBox::new(self.dim());
        for i in 0..self.rows.nrows() {
            let mut c: Vec<f64> = self.rows.row(i).iter().copied().collect();
            c.push(0.0);
            bx.closed(&c, f64::NEG_INFINITY, u[i]);
        }
        bx
    }

    fn cdf(&self, u: &DVector<f64>, cfg: &MvnConfig) -> Result<Estimate> {
        self.base(u).probability(cfg)
    }

    fn band(&self, u: &DVector<f64>, m: f64, a: f64, cfg: &MvnConfig) -> Result<Estimate> {
        if !(a > 0.0) {
            return Ok(Estimate::exact(0.0));
        }
        let mut bx = self.base(u);
        bx.open(&self.brow, -a - m, a - m);
        bx.probability(cfg)
    }
}

/// Law of `(z, W)` with `z = A[p] w`, `w ~ N(0, M^{-1})` and
/// `W = b z + V`, `V ~ N(0, zeta^2)`, at unit scale. Used for
/// `P(z <= u | |W + nu| >= c xi)` at any scale `sigma`.
#[derive(Clone, Debug)]
pub struct TruncatedGaussian {
    slab: Slab,
    xi: f64,
}

impl TruncatedGaussian {
    pub fn new(proj: &Projection) -> Result<Self> {
        Ok(TruncatedGaussian { slab: Slab::new(proj, 1.0)?, xi: proj.xi })
    }

    pub fn point_mass_value(u: &DVector<f64>) -> Result<CdfValue> {
        Ok(point_mass(u))
    }

    /// Untruncated c.d.f. `P(sigma z <= u)`.
    pub fn gaussian(&self, sigma: f64, u: &DVector<f64>, cfg: &MvnConfig) -> Result<CdfValue> {
        if sigma == 0.0 {
            return Ok(point_mass(u));
        }
        let e = self.slab.cdf(&(u / sigma), cfg)?;
        Ok(CdfValue::new(e.value, e.error, Method::Gaussian))
    }

    /// `P(sigma z <= u | |sigma W + nu| >= c sigma xi)`.
    pub fn cdf(&self, sigma: f64, nu: f64, u: &DVector<f64>, c: f64, cfg: &MvnConfig) -> Result<CdfValue> {
        if sigma == 0.0 {
            return Ok(point_mass(u));
        }
        let nu = nu / sigma;
        let a = c * self.xi;
        let denom = delta_complement(self.xi, nu, a);
        if denom < MIN_CONDITIONING {
            return Err(Error::NegligibleConditioning(denom));
        }
        let u = u / sigma;
        let p1 = self.slab.cdf(&u, cfg)?;
        let p2 = self.slab.band(&u, nu, a, cfg)?;
        let method = if p1.error == 0.0 && p2.error == 0.0 { Method::Gaussian } else { Method::MonteCarlo };
        Ok(CdfValue::new((p1.value - p2.value) / denom, (p1.error + p2.error) / denom, method))
    }
}

fn point_mass(u: &DVector<f64>) -> CdfValue {
    CdfValue::new(if u.iter().all(|&x| x >= 0.0) { 1.0 } else { 0.0 }, 0.0, Method::PointMass)
}

/// `P(z <= u | |W + nu| >= a)` where `W = b z + V` is the centred
/// `sqrt(n)`-scaled last coordinate, `a = c sigma xi`.
pub fn truncated_gaussian_cdf(
    proj: &Projection,
    sigma: f64,
    nu: f64,
    u: &DVector<f64>,
    c: f64,
    cfg: &MvnConfig,
) -> Result<CdfValue> {
    TruncatedGaussian::new(proj)?.cdf(sigma, nu, u, c, cfg)
}

/// Finite-sample ingredients shared by all queries at one
/// `(design, A, theta, sigma, family)`.
#[derive(Clone, Debug)]
pub struct ExactModel<'a> {
    design: &'a DesignMatrix,
    target: &'a TargetMap,
    point: &'a ParameterPoint,
    family: &'a NestedFamily,
    proj: Vec<Option<Projection>>,
    /// `sqrt(n) eta_{n,q}(q)` for `q = 1..P` (index 0 unused).
    mu: Vec<f64>,
    /// `sqrt(n) A (eta_n(p) - theta)` for `p = 0..P`.
    shift: Vec<DVector<f64>>,
}

impl<'a> ExactModel<'a> {
    pub fn new(
        design: &'a DesignMatrix,
        target: &'a TargetMap,
        point: &'a ParameterPoint,
        family: &'a NestedFamily,
    ) -> Result<Self> {
        let dim = design.dim();
        if target.dim() != dim || point.dim() != dim || family.dim() != dim {
            return Err(Error::InvalidArgument(
                "dimension mismatch between design, target, parameter and family".into(),
            ));
        }
        let rn = (design.n() as f64).sqrt();
        let mut proj = vec![None];
        let mut mu = vec![0.0];
        let mut shift = Vec::with_capacity(dim + 1);
        for p in 0..=dim {
            let e = eta(design, &point.theta, p)?;
            shift.push(target.matrix() * (&e - &point.theta) * rn);
            if p > 0 {
                proj.push(Some(finite_projection(design, target, p)?));
                mu.push(rn * e[p - 1]);
            }
        }
        Ok(ExactModel { design, target, point, family, proj, mu, shift })
    }

    pub fn design(&self) -> &DesignMatrix {
        self.design
    }

    pub fn family(&self) -> &NestedFamily {
        self.family
    }

    pub fn projection(&self, p: usize) -> Option<&Projection> {
        self.proj.get(p).and_then(Option::as_ref)
    }

    /// `sqrt(n) eta_{n,q}(q)`.
    pub fn mu(&self, q: usize) -> f64 {
        self.mu[q]
    }

    pub fn shift(&self, p: usize) -> &DVector<f64> {
        &self.shift[p]
    }

    fn check(&self, p: usize) -> Result<()> {
        if p < self.family.min_order() || p > self.design.dim() {
            return Err(Error::InvalidArgument(format!(
                "order {p} outside {}..={}",
                self.family.min_order(),
                self.design.dim()
            )));
        }
        Ok(())
    }

    fn dof(&self) -> f64 {
        (self.design.n() - self.design.dim()) as f64
    }

    fn s_domain(&self, quad: &QuadratureConfig) -> (f64, f64) {
        let d = self.dof();
        (scaled_chi_quantile(d, quad.tail_prob), scaled_chi_quantile(d, 1.0 - quad.tail_prob))
    }

    /// `prod_{q>p} Delta_{sigma xi_q}(mu_q, s c_q sigma xi_q)`.
    fn survive(&self, p: usize, s: f64) -> f64 {
        let sig = self.point.sigma;
        ((p + 1)..=self.design.dim())
            .map(|q| {
                let xi = self.proj[q].as_ref().expect("q > 0").xi;
                delta(sig * xi, self.mu[q], s * self.family.critical(q) * sig * xi)
            })
            .product()
    }

    /// Selection probability `P(p_hat = p)`.
    pub fn sel_prob(&self, p: usize, quad: &QuadratureConfig) -> Result<CdfValue> {
        self.check(p)?;
        let sig = self.point.sigma;
        let d = self.dof();
        let (lo, hi) = self.s_domain(quad);
        let first = |s: f64| {
            if p == self.family.min_order() {
                1.0
            } else {
                let xi = self.proj[p].as_ref().expect("p > O >= 0").xi;
                delta_complement(sig * xi, self.mu[p], s * self.family.critical(p) * sig * xi)
            }
        };
        let f = |s: f64| chi_scale_density(d, s) * first(s) * self.survive(p, s);
        let r = gl_piecewise(&[lo, hi], quad.rel_tol, quad.abs_tol, quad.max_nodes, f)?;
        Ok(CdfValue::new(r.value, r.error + quad.tail_prob * 2.0, Method::Quadrature))
    }

    /// Conditional c.d.f. `G_{n,theta,sigma}(t|p)`.
    pub fn cond_cdf(&self, t: &DVector<f64>, p: usize, quad: &QuadratureConfig) -> Result<CdfValue> {
        self.check(p)?;
        if t.len() != self.target.k() {
            return Err(Error::InvalidArgument("t has wrong dimension".into()));
        }
        let u = t - &self.shift[p];
        let cfg = quad.mvn(hash_query(p, t, self.design.n() as u64));
        if p == self.family.min_order() {
            let v = self.phi(p, &u, &cfg)?;
            #[cfg(debug_assertions)]
            if p > 0 && self.target.k() == 1 {
                let general = self.cond_cdf_general(&u, p, quad, &cfg)?;
                debug_assert!(
                    (general.value - v.value).abs() <= 1e-6 + general.error + v.error,
                    "minimal-order c.d.f. disagrees with the general route: {} vs {}",
                    v.value,
                    general.value
                );
            }
            return Ok(v);
        }
        self.cond_cdf_general(&u, p, quad, &cfg)
    }

    /// Gaussian c.d.f. of `sqrt(n) A (thetatilde(p) - eta_n(p))` at `u`.
    fn phi(&self, p: usize, u: &DVector<f64>, cfg: &MvnConfig) -> Result<CdfValue> {
        match self.proj.get(p).and_then(Option::as_ref) {
            None => Ok(point_mass(u)),
            Some(pr) => {
                let e = gaussian_cdf(&pr.a_p, &pr.m_inv, self.point.sigma, u, cfg)?;
                Ok(CdfValue::new(e.value, e.error, Method::Gaussian))
            }
        }
    }

    /// `G(t|p)` through the `s`-integral representation, at any order `p >= max(O, 1)`
    /// (at `p = O` it must agree with the Gaussian c.d.f.).
    pub fn cond_cdf_integral(&self, t: &DVector<f64>, p: usize, quad: &QuadratureConfig) -> Result<CdfValue> {
        self.check(p)?;
        if t.len() != self.target.k() {
            return Err(Error::InvalidArgument("t has wrong dimension".into()));
        }
        let u = t - &self.shift[p];
        self.cond_cdf_general(&u, p, quad, &quad.mvn(hash_query(p, t, self.design.n() as u64)))
    }

    fn cond_cdf_general(
        &self,
        u: &DVector<f64>,
        p: usize,
        quad: &QuadratureConfig,
        cfg: &MvnConfig,
    ) -> Result<CdfValue> {
        let denom = self.sel_prob(p, quad)?;
        if denom.value < MIN_CONDITIONING {
            return Err(Error::NegligibleConditioning(denom.value));
        }
        let pr = self.proj[p].as_ref().ok_or_else(|| Error::InvalidArgument("order 0 has no band".into()))?;
        let sig = self.point.sigma;
        let cp = if p == self.family.min_order() { 0.0 } else { self.family.critical(p) };
        let slab = Slab::new(pr, sig)?;
        let p1 = slab.cdf(u, cfg)?;
        let d = self.dof();
        let (lo, hi) = self.s_domain(quad);
        let mut breaks = vec![lo, hi];
        if pr.zeta == 0.0 && u.len() == 1 && cp > 0.0 {
            // kink where the band edge crosses the c.d.f. argument
            let star = (self.mu[p] + pr.b[0] * u[0]).abs() / (cp * sig * pr.xi);
            if star > lo && star < hi {
                breaks.insert(1, star);
            }
        }
        let mut box_err: f64 = p1.error;
        let mut failure = None;
        let f = |s: f64| {
            let w = chi_scale_density(d, s) * self.survive(p, s);
            if w == 0.0 {
                return 0.0;
            }
            match slab.band(u, self.mu[p], s * cp * sig * pr.xi, cfg) {
                Ok(p2) => {
                    box_err = box_err.max(p2.error);
                    w * (p1.value - p2.value)
                }
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        };
        let r = gl_piecewise(&breaks, quad.rel_tol, quad.abs_tol, quad.max_nodes, f);
        if let Some(e) = failure {
            return Err(e);
        }
        let r = r?;
        let value = r.value / denom.value;
        let error = (r.error + box_err) / denom.value + value.abs() * denom.error / denom.value;
        let method = if box_err > 0.0 { Method::MonteCarlo } else { Method::Quadrature };
        Ok(CdfValue::new(value, error, method))
    }

    /// Selection probabilities for all orders `O..P`.
    pub fn sel_probs(&self, quad: &QuadratureConfig) -> Result<Vec<CdfValue>> {
        self.family.orders().map(|p| self.sel_prob(p, quad)).collect()
    }
}

/// An exact-distribution query at one evaluation point.
#[derive(Clone, Debug)]
pub struct CdfQuery<'a> {
    pub design: &'a DesignMatrix,
    pub target: &'a TargetMap,
    pub t: DVector<f64>,
    pub order: usize,
    pub point: &'a ParameterPoint,
    pub family: &'a NestedFamily,
}

pub fn sel_prob_exact(query: &CdfQuery, quad: &QuadratureConfig) -> Result<CdfValue> {
    ExactModel::new(query.design, query.target, query.point, query.family)?.sel_prob(query.order, quad)
}

pub fn cond_cdf_exact(query: &CdfQuery, quad: &QuadratureConfig) -> Result<CdfValue> {
    ExactModel::new(query.design, query.target, query.point, query.family)?.cond_cdf(&query.t, query.order, quad)
}

/// `G_{n,theta,sigma}(t | p_hat)` for a realized selection.
pub fn cdf_at_selected(
    model: &ExactModel,
    selected: usize,
    t: &DVector<f64>,
    quad: &QuadratureConfig,
) -> Result<CdfValue> {
    model.cond_cdf(t, selected, quad)
}

/// Which of the two limit formulas applies at order `p`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LimitClass {
    /// `p = max{p_0(theta), O}`: shifted Gaussian.
    AtMinimal,
    /// `p > max{p_0(theta), O}`: truncated Gaussian mixture.
    Above,
}

impl LimitClass {
    pub fn of(theta: &DVector<f64>, family: &NestedFamily, p: usize) -> Result<Self> {
        let m = order_of(theta).max(family.min_order());
        match p.cmp(&m) {
            std::cmp::Ordering::Equal => Ok(LimitClass::AtMinimal),
            std::cmp::Ordering::Greater => Ok(LimitClass::Above),
            std::cmp::Ordering::Less => {
                Err(Error::InvalidArgument(format!("order {p} is below max(p0, O) = {m}: incorrect model")))
            }
        }
    }
}

/// A local direction `gamma` with the derived `nu_r` and limit projections.
#[derive(Clone, Debug)]
pub struct LocalPerturbation {
    pub gamma: DVector<f64>,
    /// `nu_r` for `r = 1..P` (index 0 unused).
    pub nu: Vec<f64>,
    limits: Vec<Projection>,
}

impl LocalPerturbation {
    pub fn new(q: &DMatrix<f64>, target: &TargetMap, gamma: DVector<f64>) -> Result<Self> {
        let dim = q.nrows();
        if gamma.len() != dim || target.dim() != dim {
            return Err(Error::InvalidArgument("gamma has wrong length".into()));
        }
        let mut nu = vec![0.0];
        let mut limits = Vec::with_capacity(dim);
        for r in 1..=dim {
            nu.push(nu_of(q, &gamma, r)?);
            limits.push(limit_projection(q, target, r)?);
        }
        Ok(LocalPerturbation { gamma, nu, limits })
    }

    pub fn projection(&self, r: usize) -> &Projection {
        &self.limits[r - 1]
    }

    /// `beta^(p) = -sum_{r>p} xi_r^{-2} C^(r) nu_r`.
    pub fn beta(&self, p: usize) -> DVector<f64> {
        let k = self.limits[0].c.len();
        let mut out = DVector::zeros(k);
        for r in (p + 1)..=self.limits.len() {
            let pr = self.projection(r);
            out -= &pr.c * (self.nu[r] / (pr.xi * pr.xi));
        }
        out
    }
}

/// `nu_r = gamma_r + (Q[r:r]^{-1} Q[r:~r] gamma[~r])_r`.
pub fn nu_of(q: &DMatrix<f64>, gamma: &DVector<f64>, r: usize) -> Result<f64> {
    let dim = q.nrows();
    if r == 0 || r > dim {
        return Err(Error::InvalidArgument("nu is defined for 1 <= r <= P".into()));
    }
    if r == dim {
        return Ok(gamma[dim - 1]);
    }
    let inside: Vec<usize> = (0..r).collect();
    let outside: Vec<usize> = (r..dim).collect();
    let qrr = linalg::select_block(q, &inside, &inside);
    let qro = linalg::select_block(q, &inside, &outside);
    let go = linalg::select_rows(gamma, &outside);
    let sol = qrr.cholesky().ok_or_else(|| Error::Singular("Q[r:r]".into()))?.solve(&(qro * go));
    Ok(gamma[r - 1] + sol[r - 1])
}

/// `beta^(p)` straight from its definition
/// `A (Q[p:p]^{-1} Q[p:~p] gamma[~p]; -gamma[~p])`.
pub fn beta_direct(q: &DMatrix<f64>, target: &TargetMap, gamma: &DVector<f64>, p: usize) -> Result<DVector<f64>> {
    let dim = q.nrows();
    let a = target.matrix();
    if p == 0 {
        return Ok(-(a * gamma));
    }
    if p == dim {
        return Ok(DVector::zeros(a.nrows()));
    }
    let inside: Vec<usize> = (0..p).collect();
    let outside: Vec<usize> = (p..dim).collect();
    let go = linalg::select_rows(gamma, &outside);
    let sol = linalg::select_block(q, &inside, &inside)
        .cholesky()
        .ok_or_else(|| Error::Singular("Q[p:p]".into()))?
        .solve(&(linalg::select_block(q, &inside, &outside) * &go));
    let mut v = DVector::zeros(dim);
    v.rows_mut(0, p).copy_from(&sol);
    v.rows_mut(p, dim - p).copy_from(&(-go));
    Ok(a * v)
}

/// Limit `G_{infty,theta,sigma,gamma}(t|p)` of the conditional c.d.f.
#[allow(clippy::too_many_arguments)]
pub fn limit_cdf(
    local: &LocalPerturbation,
    sigma: f64,
    family: &NestedFamily,
    p: usize,
    class: LimitClass,
    t: &DVector<f64>,
    quad: &QuadratureConfig,
) -> Result<CdfValue> {
    let u = t - local.beta(p);
    let cfg = quad.mvn(hash_query(p, t, 0x11));
    match class {
        LimitClass::AtMinimal if p == 0 => Ok(point_mass(&u)),
        LimitClass::AtMinimal => {
            let pr = local.projection(p);
            let e = gaussian_cdf(&pr.a_p, &pr.m_inv, sigma, &u, &cfg)?;
            Ok(CdfValue::new(e.value, e.error, Method::Gaussian))
        }
        LimitClass::Above => {
            if p == 0 || p <= family.min_order() {
                return Err(Error::InvalidArgument("the truncated limit needs p > O".into()));
            }
            truncated_gaussian_cdf(local.projection(p), sigma, local.nu[p], &u, family.critical(p), &cfg)
        }
    }
}

/// Monte Carlo estimate of a proportion.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct Proportion {
    pub value: f64,
    pub se: f64,
    pub count: usize,
}

impl Proportion {
    pub fn from_counts(hits: usize, count: usize) -> Option<Self> {
        (count > 0).then(|| {
            let v = hits as f64 / count as f64;
            Proportion { value: v, se: (v * (1.0 - v) / count as f64).sqrt(), count }
        })
    }
}

/// Limit c.d.f. by simulation of the joint-normal representation
/// `Z_p = sum_{r<=p} xi_r^{-2} C^(r) W_r`, `W_r ~ N(0, sigma^2 xi_r^2)`,
/// with rejection on `|W_p + nu_p| >= c_p sigma xi_p` in the truncated case.
/// Also returns the acceptance proportion.
#[allow(clippy::too_many_arguments)]
pub fn limit_cdf_mc(
    local: &LocalPerturbation,
    sigma: f64,
    family: &NestedFamily,
    p: usize,
    class: LimitClass,
    t: &DVector<f64>,
    seed: u64,
    reps: usize,
) -> Result<(Proportion, Proportion)> {
    if class == LimitClass::Above && (p == 0 || p <= family.min_order()) {
        return Err(Error::InvalidArgument("the truncated limit needs p > O".into()));
    }
    let u = t - local.beta(p);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = t.len();
    let (mut hits, mut accepted) = (0usize, 0usize);
    let mut z = DVector::zeros(k);
    for _ in 0..reps {
        z.fill(0.0);
        let mut wp = 0.0;
        for r in 1..=p {
            let pr = local.projection(r);
            let g: f64 = StandardNormal.sample(&mut rng);
            let w = sigma * pr.xi * g;
            z.axpy(w / (pr.xi * pr.xi), &pr.c, 1.0);
            wp = w;
        }
        if class == LimitClass::Above {
            let pr = local.projection(p);
            if (wp + local.nu[p]).abs() < family.critical(p) * sigma * pr.xi {
                continue;
            }
        }
        accepted += 1;
        if z.iter().zip(u.iter()).all(|(a, b)| a <= b) {
            hits += 1;
        }
    }
    let cond = Proportion::from_counts(hits, accepted).ok_or(Error::ZeroAccepted)?;
    let acc = Proportion::from_counts(accepted, reps).ok_or(Error::ZeroAccepted)?;
    Ok((cond, acc))
}

/// Limiting selection probability for given accumulation points
/// `v_p, ..., v_P` (`v[0]` is `v_p`; infinite entries allowed).
pub fn limit_sel_prob(q: &DMatrix<f64>, family: &NestedFamily, sigma: f64, p: usize, v: &[f64]) -> Result<f64> {
    let dim = q.nrows();
    if p < family.min_order() || p > dim || v.len() != dim - p + 1 {
        return Err(Error::InvalidArgument("need O <= p <= P and one value for each q = p..P".into()));
    }
    let xi = |r: usize| -> Result<f64> {
        let inv = linalg::spd_inverse(&linalg::leading_block(q, r), "Q[r:r]")?;
        Ok(inv[(r - 1, r - 1)].sqrt())
    };
    let mut out = 1.0;
    if p > family.min_order() {
        let x = xi(p)?;
        out *= delta_complement(sigma * x, v[0], family.critical(p) * sigma * x);
    }
    for qq in (p + 1)..=dim {
        let x = xi(qq)?;
        out *= delta(sigma * x, v[qq - p], family.critical(qq) * sigma * x);
    }
    Ok(out)
}

/// `2 (1 - Phi(c_p)) prod_{q>p} (2 Phi(c_q) - 1)`.
pub fn selection_bound(family: &NestedFamily, p: usize) -> Result<f64> {
    if p <= family.min_order() || p > family.dim() {
        return Err(Error::InvalidArgument("need O < p <= P".into()));
    }
    let tail = 2.0 * norm_sf(family.critical(p));
    Ok(((p + 1)..=family.dim()).fold(tail, |acc, q| acc * (1.0 - 2.0 * norm_sf(family.critical(q)))))
}
