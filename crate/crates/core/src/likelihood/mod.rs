//! Gaussian appearance model, bias-field basis and the lesion intensity prior.

mod bias;
mod dump;
mod gaussian;
mod niw;

pub use bias::{eval_bias_basis, BiasBasis, DEFAULT_BIAS_ORDER};
pub use dump::{read_params, write_params, PARAMS_MAGIC};
pub use gaussian::{component_log_likelihood, gaussian_log_density, PreparedGaussian};
pub use niw::{inverse_wishart_log_density, multivariate_ln_gamma, niw_log_density, LesionIntensityPrior};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maps structure labels onto shared Gaussian classes, each a mixture of
/// `components_per_class[g]` Gaussians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSharingMap {
    /// 0-based class per 0-based structure label.
    pub label_to_class: Vec<usize>,
    pub components_per_class: Vec<usize>,
    pub mixture_weights: Vec<Vec<f64>>,
    /// Class holding white matter (couples to the lesion class).
    pub wm_class: Option<usize>,
    /// Class holding gray matter (reference for the lesion intensity constraint).
    pub gm_class: Option<usize>,
}

impl ClassSharingMap {
    /// One single-Gaussian class per label.
    pub fn identity(n_labels: usize) -> Self {
        Self {
            label_to_class: (0..n_labels).collect(),
            components_per_class: vec![1; n_labels],
            mixture_weights: vec![vec![1.0]; n_labels],
            wm_class: None,
            gm_class: None,
        }
    }

    pub fn with_tissues(mut self, wm_class: usize, gm_class: usize) -> Self {
        self.wm_class = Some(wm_class);
        self.gm_class = Some(gm_class);
        self
    }

    pub fn n_labels(&self) -> usize {
        self.label_to_class.len()
    }

    pub fn n_classes(&self) -> usize {
        self.components_per_class.len()
    }

    pub fn n_components(&self) -> usize {
        self.components_per_class.iter().sum()
    }

    /// Class of each flattened mixture component.
    pub fn component_classes(&self) -> Vec<usize> {
        self.components_per_class
            .iter()
            .enumerate()
            .flat_map(|(g, &m)| std::iter::repeat_n(g, m))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.n_classes();
        if g == 0 || self.label_to_class.is_empty() {
            return Err(Error::Config("sharing map needs at least one label and class".into()));
        }
        if let Some(k) = self.label_to_class.iter().position(|&c| c >= g) {
            return Err(Error::Config(format!("label {} maps to missing class", k + 1)));
        }
        for c in 0..g {
            if !self.label_to_class.contains(&c) {
                return Err(Error::Config(format!("class {c} has no labels")));
            }
        }
        if self.mixture_weights.len() != g {
            return Err(Error::Config("one mixture weight list per class required".into()));
        }
        for (c, (&m, w)) in self.components_per_class.iter().zip(&self.mixture_weights).enumerate() {
            let sum: f64 = w.iter().sum();
            if m == 0 || w.len() != m || w.iter().any(|&x| !(x >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("class {c}: invalid mixture weights")));
            }
        }
        for c in [self.wm_class, self.gm_class].into_iter().flatten() {
            if c >= g {
                return Err(Error::Config(format!("tissue class {c} out of range")));
            }
        }
        Ok(())
    }

    /// Append a single-Gaussian class fed by one new label; returns its class index.
    pub(crate) fn with_extra_class(&self) -> (Self, usize) {
        let mut out = self.clone();
        let g = out.n_classes();
        out.label_to_class.push(g);
        out.components_per_class.push(1);
        out.mixture_weights.push(vec![1.0]);
        (out, g)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub class: usize,
    /// Weight within its class mixture.
    pub weight: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Means, covariances and bias-field coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceParams {
    pub components: Vec<Component>,
    /// `N x P` bias coefficients; row `n` holds contrast `n`.
    pub bias_coeffs: DMatrix<f64>,
    pub diagonal_mode: bool,
}

impl AppearanceParams {
    pub fn new(components: Vec<Component>, bias_coeffs: DMatrix<f64>, diagonal_mode: bool) -> Result<Self> {
        let p = Self { components, bias_coeffs, diagonal_mode };
        p.validate()?;
        Ok(p)
    }

    pub fn n_contrasts(&self) -> usize {
        self.bias_coeffs.nrows()
    }

    pub fn n_basis(&self) -> usize {
        self.bias_coeffs.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_contrasts();
        for (c, comp) in self.components.iter().enumerate() {
            if comp.mean.len() != n || comp.cov.nrows() != n || comp.cov.ncols() != n {
                return Err(Error::InvalidInput(format!("component {c}: dimension mismatch")));
            }
            if self.diagonal_mode && (0..n).any(|r| (0..n).any(|s| r != s && comp.cov[(r, s)] != 0.0)) {
                return Err(Error::InvalidInput(format!("component {c}: off-diagonal entries in diagonal mode")));
            }
            if comp.cov.clone().cholesky().is_none() {
                return Err(Error::InvalidInput(format!("component {c}: covariance is not SPD")));
            }
        }
        Ok(())
    }

    pub fn class_components(&self, class: usize) -> impl Iterator<Item = (usize, &Component)> {
        self.components.iter().enumerate().filter(move |(_, c)| c.class == class)
    }

    /// Mixture-weighted mean of a class.
    pub fn class_mean(&self, class: usize) -> DVector<f64> {
        let mut m = DVector::zeros(self.n_contrasts());
        for (_, c) in self.class_components(class) {
            m += &c.mean * c.weight;
        }
        m
    }

    pub fn prepared(&self) -> Vec<PreparedGaussian> {
        self.components
            .iter()
            .map(|c| PreparedGaussian::new(&c.mean, &c.cov).expect("validated SPD covariance"))
            .collect()
    }

    /// Bias field `C phi_i` for one voxel.
    #[inline]
    pub fn bias_at(&self, phi: &[f64], out: &mut [f64]) {
        for (n, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for (p, &f) in phi.iter().enumerate() {
                s += self.bias_coeffs[(n, p)] * f;
            }
            *o = s;
        }
    }
}
