use std::f64::consts::{LN_2, PI};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use super::gaussian::gaussian_log_density;
use crate::error::{Error, Result};
use crate::volume::VolumeGrid;

/// Normal-inverse-Wishart coupling of the lesion Gaussian to white matter.
///
/// `nu_base` pseudo-voxels are specified for 1 mm^3 voxels and rescaled
/// inversely with the voxel volume of the image at hand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LesionIntensityPrior {
    pub nu_base: f64,
    pub kappa: f64,
}

impl Default for LesionIntensityPrior {
    fn default() -> Self {
        Self { nu_base: 500.0, kappa: 50.0 }
    }
}

impl LesionIntensityPrior {
    pub fn new(nu_base: f64, kappa: f64) -> Result<Self> {
        let p = Self { nu_base, kappa };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 1.0) {
            return Err(Error::Config(format!("kappa must exceed 1, got {}", self.kappa)));
        }
        if !(self.nu_base >= 0.0) || !self.nu_base.is_finite() {
            return Err(Error::Config(format!("nu must be a finite non-negative number, got {}", self.nu_base)));
        }
        Ok(())
    }

    pub fn nu_effective(&self, grid: &VolumeGrid) -> f64 {
        self.nu_base / grid.voxel_volume()
    }

    /// Smallest pseudo-voxel count for which the inverse-Wishart factor with
    /// `nu - N - 2` degrees of freedom is a proper density.
    pub fn min_proper_nu(n_contrasts: usize) -> f64 {
        2.0 * n_contrasts as f64 + 1.0
    }
}

pub fn multivariate_ln_gamma(n: usize, a: f64) -> f64 {
    let nf = n as f64;
    nf * (nf - 1.0) / 4.0 * PI.ln() + (0..n).map(|j| ln_gamma(a - j as f64 / 2.0)).sum::<f64>()
}

fn ln_det_spd(m: &DMatrix<f64>) -> Result<f64> {
    let chol = m.clone().cholesky().ok_or_else(|| Error::InvalidInput("matrix is not SPD".into()))?;
    let l = chol.l();
    Ok(2.0 * (0..m.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>())
}

/// `ln IW(sigma | scale, dof)` with the usual normalizing constant; requires `dof > N - 1`.
pub fn inverse_wishart_log_density(sigma: &DMatrix<f64>, scale: &DMatrix<f64>, dof: f64) -> Result<f64> {
    let n = sigma.nrows();
    if !(dof > n as f64 - 1.0) {
        return Err(Error::Config(format!("inverse-Wishart needs dof > {}, got {dof}", n as f64 - 1.0)));
    }
    let ld_scale = ln_det_spd(scale)?;
    let ld_sigma = ln_det_spd(sigma)?;
    let chol = sigma.clone().cholesky().expect("checked SPD");
    let trace = (scale * chol.inverse()).trace();
    let nf = n as f64;
    Ok(0.5 * dof * ld_scale - 0.5 * dof * nf * LN_2 - multivariate_ln_gamma(n, 0.5 * dof) - 0.5 * (dof + nf + 1.0) * ld_sigma
        - 0.5 * trace)
}

/// `ln [ N(mu_les | mu_wm, Sigma_les / nu) IW(Sigma_les | kappa nu Sigma_wm, nu - N - 2) ]`.
/// `nu = 0` is the flat-prior regime and returns 0.
pub fn niw_log_density(
    mu_les: &DVector<f64>,
    sigma_les: &DMatrix<f64>,
    mu_wm: &DVector<f64>,
    sigma_wm: &DMatrix<f64>,
    nu: f64,
    kappa: f64,
) -> Result<f64> {
    if nu == 0.0 {
        return Ok(0.0);
    }
    let n = mu_les.len();
    if !(nu > LesionIntensityPrior::min_proper_nu(n)) {
        return Err(Error::Config(format!(
            "nu = {nu} gives an improper inverse-Wishart (needs nu > {})",
            LesionIntensityPrior::min_proper_nu(n)
        )));
    }
    let normal = gaussian_log_density(mu_les, mu_wm, &(sigma_les / nu))?;
    let iw = inverse_wishart_log_density(sigma_les, &(sigma_wm * (kappa * nu)), nu - n as f64 - 2.0)?;
    Ok(normal + iw)
}
