use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Draw from the inverse Wishart `IW(scale, dof)` through the Bartlett
/// decomposition of the Wishart on `scale^{-1}`.
pub fn sample_inverse_wishart(scale: &DMatrix<f64>, dof: f64, rng: &mut impl Rng) -> Result<DMatrix<f64>> {
    let n = scale.nrows();
    if !(dof > n as f64 - 1.0) {
        return Err(Error::Config(format!("inverse Wishart needs dof > {}, got {dof}", n as f64 - 1.0)));
    }
    let inv = scale
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("inverse Wishart scale is not positive definite".into()))?
        .inverse();
    let l = inv
        .cholesky()
        .ok_or_else(|| Error::Numerical("inverse of the scale is not positive definite".into()))?
        .l();
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        let chi = ChiSquared::new(dof - i as f64).map_err(|e| Error::Numerical(e.to_string()))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    // Sigma = (L A)^{-T} (L A)^{-1}
    let m = l * a;
    let m_inv = m
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or_else(|| Error::Numerical("degenerate Bartlett factor".into()))?;
    let s = m_inv.tr_mul(&m_inv);
    Ok((&s + s.transpose()) * 0.5)
}
