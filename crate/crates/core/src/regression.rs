//! Fixed-design Gaussian linear regression and the projection quantities
//! used by the distribution formulas.
//!
//! A design keeps a thin QR factorization `X = Q R`. A sample is reduced to
//! `u = Q'Y` and the full-model residual sum of squares, after which every
//! restricted or subset fit is a `P`-dimensional computation.

use crate::error::{Error, Result};
use crate::linalg::{self, pinv};
use nalgebra::{DMatrix, DVector};
use std::fmt;
use std::path::Path;

/// Values of `zeta^2` in `[-ZETA_CLAMP, 0)` are rounding noise and set to zero.
pub const ZETA_CLAMP: f64 = 1e-10;
const MIN_EIG_RATIO: f64 = 1e-10;
const SIGMA2_FLOOR: f64 = 1e-30;

#[derive(Clone, Debug)]
pub struct DesignMatrix {
    x: DMatrix<f64>,
    gram: DMatrix<f64>,
    limit: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    gram_inv_diag: DVector<f64>,
}

impl DesignMatrix {
    pub fn new(x: DMatrix<f64>) -> Result<Self> {
        let (n, p) = x.shape();
        if p < 1 || n <= p {
            return Err(Error::InvalidDesign(format!("need n > P >= 1, got n = {n}, P = {p}")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDesign("non-finite entry".into()));
        }
        let gram = x.transpose() * &x / n as f64;
        let eig = gram.clone().symmetric_eigenvalues();
        if !(eig.min() > MIN_EIG_RATIO * eig.max()) {
            return Err(Error::InvalidDesign("X does not have full column rank".into()));
        }
        let qr = x.clone().qr();
        let (q, r) = (qr.q(), qr.r());
        let gram_inv_diag = linalg::spd_inverse(&gram, "X'X/n")?.diagonal();
        Ok(DesignMatrix { limit: gram.clone(), x, gram, q, r, gram_inv_diag })
    }

    /// Attaches the asymptotic limit `Q` of `X'X/n`.
    pub fn with_limit(mut self, q: DMatrix<f64>) -> Result<Self> {
        let p = self.dim();
        if q.shape() != (p, p) || !linalg::is_symmetric(&q, 1e-12) || q.clone().cholesky().is_none() {
            return Err(Error::InvalidDesign("limit matrix must be a symmetric positive definite P x P matrix".into()));
        }
        self.limit = q;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    /// `Q_n = X'X/n`.
    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// Asymptotic `Q` (equals `Q_n` unless supplied).
    pub fn limit(&self) -> &DMatrix<f64> {
        &self.limit
    }

    pub fn qr_q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn qr_r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn gram_inv_diag(&self) -> &DVector<f64> {
        &self.gram_inv_diag
    }

    /// Reads a design from CSV (rows are observations). A first row that
    /// does not parse as numbers is taken as a header.
    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        DesignMatrix::new(read_matrix_csv(path)?)
    }
}

/// Reads a dense matrix from CSV with an optional header row.
pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(v) => rows.push(v),
            Err(_) if i == 0 => continue,
            Err(e) => return Err(Error::Parse(format!("row {}: {e}", i + 1))),
        }
    }
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Parse("ragged or empty matrix".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// Inclusion mask over the `P` regressors.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Mask(pub Vec<bool>);

impl Mask {
    pub fn full(p: usize) -> Self {
        Mask(vec![true; p])
    }

    /// The nested model of order `p` among `dim` regressors.
    pub fn nested(dim: usize, p: usize) -> Self {
        Mask((0..dim).map(|i| i < p).collect())
    }

    pub fn weight(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.0.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    }

    /// Index of the single excluded regressor, if exactly one is excluded.
    pub fn excluded_one(&self) -> Option<usize> {
        let out: Vec<usize> = (0..self.len()).filter(|&i| !self.0[i]).collect();
        (out.len() == 1).then(|| out[0])
    }

    pub fn parse(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                _ => Err(Error::Parse(format!("bad mask {s:?}"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Mask)
    }
}

impl fmt::Display for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// Nested candidate models `M_O, ..., M_P` with critical values.
#[derive(Clone, Debug, PartialEq)]
pub struct NestedFamily {
    min_order: usize,
    dim: usize,
    critical: Vec<f64>,
}

impl NestedFamily {
    /// `critical` lists `c_{O+1}, ..., c_P`.
    pub fn new(min_order: usize, critical: Vec<f64>) -> Result<Self> {
        let dim = min_order + critical.len();
        if critical.is_empty() {
            return Err(Error::InvalidArgument("need O < P".into()));
        }
        if critical.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(Error::InvalidArgument("critical values must be positive and finite".into()));
        }
        Ok(NestedFamily { min_order, dim, critical })
    }

    pub fn constant(min_order: usize, dim: usize, c: f64) -> Result<Self> {
        if min_order >= dim {
            return Err(Error::InvalidArgument("need O < P".into()));
        }
        NestedFamily::new(min_order, vec![c; dim - min_order])
    }

    pub fn min_order(&self) -> usize {
        self.min_order
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `c_p`, with `c_p = 0` for `p <= O`.
    pub fn critical(&self, p: usize) -> f64 {
        if p <= self.min_order {
            0.0
        } else {
            self.critical[p - self.min_order - 1]
        }
    }

    pub fn orders(&self) -> std::ops::RangeInclusive<usize> {
        self.min_order..=self.dim
    }
}

/// Candidate masks with an information-criterion penalty `Upsilon_n`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubsetFamily {
    masks: Vec<Mask>,
    upsilon: f64,
}

impl SubsetFamily {
    pub fn new(mut masks: Vec<Mask>, upsilon: f64) -> Result<Self> {
        let p = masks.first().map_or(0, Mask::len);
        if p == 0 || masks.iter().any(|m| m.len() != p) {
            return Err(Error::InvalidArgument("masks must be non-empty and of equal length".into()));
        }
        if !masks.contains(&Mask::full(p)) {
            return Err(Error::InvalidArgument("mask set must contain the full model".into()));
        }
        if !masks.iter().any(|m| m.weight() + 1 == p) {
            return Err(Error::InvalidArgument("mask set must contain a model with P-1 regressors".into()));
        }
        if !(upsilon.is_finite() && upsilon >= 0.0) {
            return Err(Error::InvalidArgument("penalty must be finite and nonnegative".into()));
        }
        masks.sort();
        masks.dedup();
        Ok(SubsetFamily { masks, upsilon })
    }

    /// All `2^P` masks.
    pub fn all(p: usize, upsilon: f64) -> Result<Self> {
        let masks = (0..1usize << p).map(|b| Mask((0..p).map(|i| b >> (p - 1 - i) & 1 == 1).collect())).collect();
        SubsetFamily::new(masks, upsilon)
    }

    pub fn masks(&self) -> &[Mask] {
        &self.masks
    }

    pub fn upsilon(&self) -> f64 {
        self.upsilon
    }

    pub fn dim(&self) -> usize {
        self.masks[0].len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParameterPoint {
    pub theta: DVector<f64>,
    pub sigma: f64,
}

impl ParameterPoint {
    pub fn new(theta: DVector<f64>, sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::InvalidArgument("sigma must be positive and finite".into()));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("theta must be finite".into()));
        }
        Ok(ParameterPoint { theta, sigma })
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }
}

/// Linear target `A theta` with `A` of full row rank.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetMap {
    a: DMatrix<f64>,
}

impl TargetMap {
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        let (k, p) = a.shape();
        if k < 1 || k > p {
            return Err(Error::InvalidArgument(format!("target must have 1 <= k <= P rows, got {k} x {p}")));
        }
        if linalg::rank(&a) != k {
            return Err(Error::InvalidArgument("target matrix must have full row rank".into()));
        }
        Ok(TargetMap { a })
    }

    /// The `k x P` selector of the listed coordinates.
    pub fn coordinates(dim: usize, coords: &[usize]) -> Result<Self> {
        if coords.iter().any(|&c| c >= dim) {
            return Err(Error::InvalidArgument("coordinate out of range".into()));
        }
        TargetMap::new(DMatrix::from_fn(coords.len(), dim, |i, j| if coords[i] == j { 1.0 } else { 0.0 }))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn k(&self) -> usize {
        self.a.nrows()
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    /// `A[p]`: the first `p` columns.
    pub fn leading(&self, p: usize) -> DMatrix<f64> {
        self.a.columns(0, p).into_owned()
    }
}

/// A response vector reduced to `u = Q'Y` and the full-model RSS.
#[derive(Clone, Debug)]
pub struct Sample<'a> {
    design: &'a DesignMatrix,
    u: DVector<f64>,
    rss: f64,
    y_norm2: f64,
}

impl<'a> Sample<'a> {
    pub fn new(design: &'a DesignMatrix, y: &DVector<f64>) -> Result<Self> {
        if y.len() != design.n() {
            return Err(Error::InvalidArgument(format!("Y has length {}, expected {}", y.len(), design.n())));
        }
        let u = design.q.tr_mul(y);
        let resid = y - &design.q * &u;
        Ok(Sample { design, u, rss: resid.norm_squared(), y_norm2: y.norm_squared() })
    }

    /// Builds a sample from its sufficient statistics.
    pub fn from_sufficient(design: &'a DesignMatrix, u: DVector<f64>, rss: f64) -> Self {
        let y_norm2 = u.norm_squared() + rss;
        Sample { design, u, rss, y_norm2 }
    }

    pub fn design(&self) -> &'a DesignMatrix {
        self.design
    }

    pub fn projected(&self) -> &DVector<f64> {
        &self.u
    }

    pub fn rss_full(&self) -> f64 {
        self.rss
    }

    pub fn sigma2_hat(&self) -> Result<f64> {
        let s2 = self.rss / (self.design.n() - self.design.dim()) as f64;
        // Y in the column space leaves only rounding noise in the residual.
        if s2 < SIGMA2_FLOOR || self.rss <= (64.0 * f64::EPSILON).powi(2) * self.y_norm2 {
            return Err(Error::DegenerateResidual);
        }
        Ok(s2)
    }
}

/// Restricted least squares in the nested model of order `p`.
pub fn restricted_ls(sample: &Sample, p: usize) -> Result<DVector<f64>> {
    let d = sample.design;
    check_order(p, d.dim())?;
    let mut out = DVector::zeros(d.dim());
    if p > 0 {
        let rp = linalg::leading_block(&d.r, p);
        let sol = linalg::solve_upper(&rp, &sample.u.rows(0, p).into_owned())?;
        out.rows_mut(0, p).copy_from(&sol);
    }
    Ok(out)
}

/// Least squares over the regressors in `mask`, with the residual sum of squares.
pub fn subset_fit(sample: &Sample, mask: &Mask) -> Result<(DVector<f64>, f64)> {
    let d = sample.design;
    if mask.len() != d.dim() {
        return Err(Error::InvalidArgument("mask length does not match P".into()));
    }
    let idx = mask.indices();
    let mut out = DVector::zeros(d.dim());
    if idx.is_empty() {
        return Ok((out, sample.u.norm_squared() + sample.rss));
    }
    let rr = linalg::select_columns(&d.r, &idx);
    let qr = rr.clone().qr();
    let qt_u = qr.q().tr_mul(&sample.u);
    let beta = linalg::solve_upper(&qr.r(), &qt_u)?;
    let resid = &sample.u - &rr * &beta;
    for (j, &i) in idx.iter().enumerate() {
        out[i] = beta[j];
    }
    Ok((out, resid.norm_squared() + sample.rss))
}

pub fn subset_ls(sample: &Sample, mask: &Mask) -> Result<DVector<f64>> {
    subset_fit(sample, mask).map(|f| f.0)
}

pub fn sigma_hat(sample: &Sample) -> Result<f64> {
    sample.sigma2_hat().map(f64::sqrt)
}

fn check_order(p: usize, dim: usize) -> Result<()> {
    if p > dim {
        return Err(Error::InvalidArgument(format!("order {p} exceeds P = {dim}")));
    }
    Ok(())
}

/// Mean of the restricted estimator of order `p` at `theta`.
pub fn eta(design: &DesignMatrix, theta: &DVector<f64>, p: usize) -> Result<DVector<f64>> {
    let dim = design.dim();
    check_order(p, dim)?;
    if theta.len() != dim {
        return Err(Error::InvalidArgument("theta has wrong length".into()));
    }
    if p == dim {
        return Ok(theta.clone());
    }
    let rt = &design.r * theta;
    let mut out = DVector::zeros(dim);
    if p > 0 {
        let sol = linalg::solve_upper(&linalg::leading_block(&design.r, p), &rt.rows(0, p).into_owned())?;
        out.rows_mut(0, p).copy_from(&sol);
    }
    Ok(out)
}

/// `p_0(theta)`: the smallest order whose model contains `theta`.
pub fn order_of(theta: &DVector<f64>) -> usize {
    theta.iter().rposition(|&v| v != 0.0).map_or(0, |i| i + 1)
}

/// Scalars and vectors derived from `(A[p] M^{-1} A[p]', M^{-1})` for one
/// order, where `M` is either `X[p]'X[p]/n` or `Q[p:p]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub order: usize,
    pub xi: f64,
    pub c: DVector<f64>,
    pub zeta: f64,
    /// `C' V^-` stored as a column.
    pub b: DVector<f64>,
    /// `V = A[p] M^{-1} A[p]'`.
    pub cov: DMatrix<f64>,
    /// `M^{-1}`.
    pub m_inv: DMatrix<f64>,
    /// `A[p]`.
    pub a_p: DMatrix<f64>,
}

impl Projection {
    pub fn from_inverse(a: &TargetMap, m_inv: DMatrix<f64>) -> Result<Self> {
        let p = m_inv.nrows();
        if p == 0 || p > a.dim() {
            return Err(Error::InvalidArgument(format!("order must satisfy 0 < p <= P, got {p}")));
        }
        let a_p = a.leading(p);
        let xi2 = m_inv[(p - 1, p - 1)];
        let c = &a_p * m_inv.column(p - 1);
        let cov = &a_p * &m_inv * a_p.transpose();
        let b = pinv(&cov).transpose() * &c;
        let mut zeta2 = xi2 - b.dot(&c);
        if (-ZETA_CLAMP..0.0).contains(&zeta2) {
            zeta2 = 0.0;
        }
        if zeta2 < 0.0 {
            return Err(Error::Singular(format!("negative zeta^2 = {zeta2:e}")));
        }
        Ok(Projection { order: p, xi: xi2.sqrt(), c, zeta: zeta2.sqrt(), b, cov, m_inv, a_p })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionQuantities {
    pub order: usize,
    pub finite: Projection,
    pub limit: Projection,
}

pub fn finite_projection(design: &DesignMatrix, a: &TargetMap, p: usize) -> Result<Projection> {
    if p == 0 || p > design.dim() || a.dim() != design.dim() {
        return Err(Error::InvalidArgument(format!("order must satisfy 0 < p <= P, got {p}")));
    }
    // (X[p]'X[p]/n)^{-1} = n R_p^{-1} R_p^{-T}
    let rp = linalg::leading_block(&design.r, p);
    let rinv = rp.solve_upper_triangular(&DMatrix::identity(p, p)).ok_or_else(|| Error::Singular("X[p]".into()))?;
    let m_inv = &rinv * rinv.transpose() * design.n() as f64;
    Projection::from_inverse(a, m_inv)
}

pub fn limit_projection(q: &DMatrix<f64>, a: &TargetMap, p: usize) -> Result<Projection> {
    if p == 0 || p > q.nrows() || a.dim() != q.nrows() {
        return Err(Error::InvalidArgument(format!("order must satisfy 0 < p <= P, got {p}")));
    }
    Projection::from_inverse(a, linalg::spd_inverse(&linalg::leading_block(q, p), "Q[p:p]")?)
}

pub fn projection_quantities(design: &DesignMatrix, a: &TargetMap, p: usize) -> Result<ProjectionQuantities> {
    Ok(ProjectionQuantities {
        order: p,
        finite: finite_projection(design, a, p)?,
        limit: limit_projection(design.limit(), a, p)?,
    })
}
