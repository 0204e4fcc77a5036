//! Synthetic design matrices indexed by sample size.

use crate::error::{Error, Result};
use crate::linalg;
use crate::regression::DesignMatrix;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignKind {
    /// `X = sqrt(n) U L'` with orthonormal `U` and `L L' = Q`, so `X'X/n = Q` exactly.
    ExactQ,
    /// Rows drawn i.i.d. from `N(0, Q)`; `X'X/n -> Q` at rate `n^{-1/2}`.
    GaussianRows,
}

/// `Q_{ij} = rho^{|i-j|}`.
pub fn ar1(dim: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(dim, dim, |i, j| rho.powi((i as i32 - j as i32).abs()))
}

/// `Q = (1 - rho) I + rho 11'`.
pub fn equicorrelated(dim: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(dim, dim, |i, j| if i == j { 1.0 } else { rho })
}

/// Design of size `n` converging to (or equal to) `Q`; `Q` is attached as the limit.
pub fn synthetic(q: &DMatrix<f64>, n: usize, kind: DesignKind, seed: u64) -> Result<DesignMatrix> {
    let dim = q.nrows();
    if n <= dim {
        return Err(Error::InvalidDesign(format!("need n > P, got n = {n}")));
    }
    let l = linalg::cholesky_lower(q, "Q")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (n as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
    let g: DMatrix<f64> = DMatrix::from_fn(n, dim, |_, _| StandardNormal.sample(&mut rng));
    let x = match kind {
        DesignKind::ExactQ => {
            let u = g.qr().q();
            u * l.transpose() * (n as f64).sqrt()
        }
        DesignKind::GaussianRows => g * l.transpose(),
    };
    DesignMatrix::new(x)?.with_limit(q.clone())
}

/// `X'X = n I`.
pub fn orthogonal(n: usize, dim: usize, seed: u64) -> Result<DesignMatrix> {
    synthetic(&DMatrix::identity(dim, dim), n, DesignKind::ExactQ, seed)
}
