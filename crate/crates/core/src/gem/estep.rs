use rayon::prelude::*;

use super::SoftAssignments;
use crate::error::{Error, Result};
use crate::likelihood::{AppearanceParams, BiasBasis};
use crate::volume::MultiContrastImage;

/// Voxels per parallel work item. Fixed so reductions do not depend on the
/// thread count.
pub(crate) const BLOCK: usize = 2048;

#[derive(Debug, Clone)]
pub struct EStep {
    pub assignments: SoftAssignments,
    /// `sum_i ln sum_c pi_c p(g_c | theta_l) N(d_i | mu_c + C phi_i, Sigma_c)`.
    pub log_likelihood: f64,
}

pub(crate) fn check_inputs(image: &MultiContrastImage, basis: &BiasBasis, class_prior: &[f64], params: &AppearanceParams) -> Result<usize> {
    let n_vox = image.n_voxels();
    if basis.n_voxels() != n_vox {
        return Err(Error::GridMismatch("bias basis and image differ in voxel count".into()));
    }
    if params.n_contrasts() != image.n_contrasts() || params.n_basis() != basis.n_basis() {
        return Err(Error::InvalidInput("parameters do not match image contrasts or bias basis".into()));
    }
    let g = params.components.iter().map(|c| c.class + 1).max().unwrap_or(0);
    if g == 0 || class_prior.len() % n_vox != 0 || class_prior.len() / n_vox < g {
        return Err(Error::InvalidInput("class prior does not cover every component class".into()));
    }
    Ok(class_prior.len() / n_vox)
}

/// Posterior responsibilities of every mixture component, computed in log
/// space. `class_prior` is row-major `I x G`.
pub fn e_step(image: &MultiContrastImage, basis: &BiasBasis, class_prior: &[f64], params: &AppearanceParams) -> Result<EStep> {
    let n_classes = check_inputs(image, basis, class_prior, params)?;
    let n = image.n_contrasts();
    let n_comp = params.components.len();
    let field = basis.field(&params.bias_coeffs);
    let gauss = params.prepared();
    let ln_weight: Vec<f64> = params.components.iter().map(|c| c.weight.ln()).collect();
    let class_of: Vec<usize> = params.components.iter().map(|c| c.class).collect();
    let mut w = vec![0.0; image.n_voxels() * n_comp];

    let partial: Vec<Result<f64>> = w
        .par_chunks_mut(BLOCK * n_comp)
        .enumerate()
        .map(|(b, chunk)| {
            let mut lp = vec![0.0; n_comp];
            let mut sum = 0.0;
            for (r, row) in chunk.chunks_exact_mut(n_comp).enumerate() {
                let i = b * BLOCK + r;
                let d = image.voxel(i);
                let shift = &field[i * n..(i + 1) * n];
                let prior = &class_prior[i * n_classes..(i + 1) * n_classes];
                let mut max = f64::NEG_INFINITY;
                for c in 0..n_comp {
                    let p = prior[class_of[c]];
                    lp[c] = if p > 0.0 {
                        p.ln() + ln_weight[c] + gauss[c].log_density_shifted(d, shift)
                    } else {
                        f64::NEG_INFINITY
                    };
                    max = max.max(lp[c]);
                }
                if max == f64::NEG_INFINITY {
                    return Err(Error::Numerical(format!(
                        "voxel {i} {:?}: no class has nonzero prior and likelihood",
                        image.grid().coords(i)
                    )));
                }
                let mut s = 0.0;
                for c in 0..n_comp {
                    row[c] = (lp[c] - max).exp();
                    s += row[c];
                }
                for v in row.iter_mut() {
                    *v /= s;
                }
                sum += max + s.ln();
            }
            Ok(sum)
        })
        .collect();
    let mut log_likelihood = 0.0;
    for p in partial {
        log_likelihood += p?;
    }
    Ok(EStep { assignments: SoftAssignments::new(image.n_voxels(), n_comp, w)?, log_likelihood })
}
