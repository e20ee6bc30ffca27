use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use super::Component;
use crate::error::{Error, Result};

/// Gaussian with a cached inverse Cholesky factor for repeated evaluation.
#[derive(Debug, Clone)]
pub struct PreparedGaussian {
    n: usize,
    mean: Vec<f64>,
    /// Row-major lower-triangular `L^{-1}` where `Sigma = L L^T`.
    inv_chol: Vec<f64>,
    log_norm: f64,
}

impl PreparedGaussian {
    pub fn new(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("covariance is not positive definite".into()))?;
        let l = chol.l();
        let log_det: f64 = 2.0 * (0..n).map(|i| l[(i, i)].ln()).sum::<f64>();
        let linv = l
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
        let mut inv_chol = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..=r {
                inv_chol[r * n + c] = linv[(r, c)];
            }
        }
        Ok(Self {
            n,
            mean: mean.iter().copied().collect(),
            inv_chol,
            log_norm: -0.5 * (n as f64 * (2.0 * PI).ln() + log_det),
        })
    }

    /// `ln N(x | mean + shift, Sigma)`.
    #[inline]
    pub fn log_density_shifted(&self, x: &[f64], shift: &[f64]) -> f64 {
        let n = self.n;
        let mut q = 0.0;
        for r in 0..n {
            let row = &self.inv_chol[r * n..r * n + r + 1];
            let mut s = 0.0;
            for (c, &l) in row.iter().enumerate() {
                s += l * (x[c] - shift[c] - self.mean[c]);
            }
            q += s * s;
        }
        self.log_norm - 0.5 * q
    }

    #[inline]
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let n = self.n;
        let mut q = 0.0;
        for r in 0..n {
            let mut s = 0.0;
            for c in 0..=r {
                s += self.inv_chol[r * n + c] * (x[c] - self.mean[c]);
            }
            q += s * s;
        }
        self.log_norm - 0.5 * q
    }
}

pub fn gaussian_log_density(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let g = PreparedGaussian::new(mean, cov)?;
    Ok(g.log_density(x.as_slice()))
}

/// `ln N(d_i | mu + C phi_i, Sigma)` for one component.
pub fn component_log_likelihood(d: &[f64], comp: &Component, bias_coeffs: &DMatrix<f64>, phi: &[f64]) -> Result<f64> {
    let g = PreparedGaussian::new(&comp.mean, &comp.cov)?;
    let shift: Vec<f64> = (0..d.len())
        .map(|n| phi.iter().enumerate().map(|(p, &f)| bias_coeffs[(n, p)] * f).sum())
        .collect();
    Ok(g.log_density_shifted(d, &shift))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn comp(mean: Vec<f64>, cov: Vec<f64>) -> Component {
        let n = mean.len();
        Component { class: 0, weight: 1.0, mean: DVector::from_vec(mean), cov: DMatrix::from_row_slice(n, n, &cov) }
    }

    #[test]
    fn standard_normal_at_mode() {
        let c = comp(vec![0.0], vec![1.0]);
        let v = component_log_likelihood(&[0.0], &c, &DMatrix::zeros(1, 1), &[1.0]).unwrap();
        assert!((v + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn bias_shifts_the_mode() {
        let c = comp(vec![0.0], vec![1.0]);
        let bias = DMatrix::from_row_slice(1, 2, &[0.5, 1.5]);
        // C phi = 0.5 * 1 + 1.5 * 1 = 2
        let v = component_log_likelihood(&[2.0], &c, &bias, &[1.0, 1.0]).unwrap();
        assert!((v + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn full_covariance_matches_explicit_formula() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0f64..1.0));
            let cov = &a * a.transpose() + DMatrix::identity(2, 2) * 0.1;
            let mean = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
            let x = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
            // explicit inverse and determinant for the 2x2 case
            let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
            let inv = DMatrix::from_row_slice(2, 2, &[cov[(1, 1)] / det, -cov[(0, 1)] / det, -cov[(1, 0)] / det, cov[(0, 0)] / det]);
            let r = &x - &mean;
            let q = (r.transpose() * inv * &r)[(0, 0)];
            let expected = -0.5 * q - 0.5 * det.ln() - (2.0 * PI).ln();
            let c = Component { class: 0, weight: 1.0, mean, cov };
            let got = component_log_likelihood(x.as_slice(), &c, &DMatrix::zeros(2, 1), &[1.0]).unwrap();
            assert!((got - expected).abs() < 1e-12 * expected.abs().max(1.0));
        }
    }

    #[test]
    fn diagonal_equals_sum_of_univariates() {
        let c = comp(vec![0.5, -1.0, 2.0], vec![0.3, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.7]);
        let x = [0.1, 0.4, 2.9];
        let joint = component_log_likelihood(&x, &c, &DMatrix::zeros(3, 1), &[1.0]).unwrap();
        let sum: f64 = (0..3)
            .map(|n| {
                let var = c.cov[(n, n)];
                -0.5 * (2.0 * PI * var).ln() - 0.5 * (x[n] - c.mean[n]).powi(2) / var
            })
            .sum();
        assert!((joint - sum).abs() < 1e-12);
    }
}
