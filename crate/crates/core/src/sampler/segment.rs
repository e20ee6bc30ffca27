use rayon::prelude::*;

use crate::atlas::{interpolate_prior, rasterize, AtlasMesh};
use crate::error::{Error, Result};
use crate::gem::BLOCK;
use crate::likelihood::{AppearanceParams, BiasBasis, ClassSharingMap};
use crate::volume::{Contrast, LabelMap, LesionMask, MultiContrastImage, ProbabilityMap};

/// How the FLAIR/T2 brightness constraint combines several tagged channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CandidateRule {
    /// Brighter than the gray-matter mean in every tagged channel.
    #[default]
    AllTagged,
    /// Brighter in at least one tagged channel.
    AnyTagged,
}

/// Bias-corrected intensities `d_i - C phi_i`, row-major `I x N`.
pub fn bias_corrected(image: &MultiContrastImage, basis: &BiasBasis, params: &AppearanceParams) -> Result<Vec<f64>> {
    if basis.n_voxels() != image.n_voxels() || params.n_basis() != basis.n_basis() || params.n_contrasts() != image.n_contrasts() {
        return Err(Error::InvalidInput("bias basis, parameters and image do not match".into()));
    }
    let field = basis.field(&params.bias_coeffs);
    Ok(image.data().iter().zip(&field).map(|(d, f)| d - f).collect())
}

/// Voxels allowed to be lesion: bias-corrected intensity strictly above the
/// gray-matter mean in the FLAIR and T2w channels. All ones when neither
/// contrast is present.
pub fn candidate_mask(
    image: &MultiContrastImage,
    basis: &BiasBasis,
    params: &AppearanceParams,
    sharing: &ClassSharingMap,
    rule: CandidateRule,
) -> Result<LesionMask> {
    let gm = sharing.gm_class.ok_or_else(|| Error::Config("no gray-matter class in the sharing map".into()))?;
    if params.class_components(gm).next().is_none() {
        return Err(Error::Config(format!("gray-matter class {gm} has no Gaussian")));
    }
    let gm_mean = params.class_mean(gm);
    let tagged: Vec<usize> = image
        .contrasts()
        .iter()
        .enumerate()
        .filter(|(_, c)| matches!(c, Contrast::Flair | Contrast::T2w))
        .map(|(i, _)| i)
        .collect();
    let grid = image.grid().clone();
    if tagged.is_empty() {
        return LesionMask::new(grid.clone(), vec![true; grid.n_voxels()]);
    }
    let y = bias_corrected(image, basis, params)?;
    let n = image.n_contrasts();
    let mask = y
        .chunks_exact(n)
        .map(|v| {
            let above = |&c: &usize| v[c] > gm_mean[c];
            match rule {
                CandidateRule::AllTagged => tagged.iter().all(above),
                CandidateRule::AnyTagged => tagged.iter().any(above),
            }
        })
        .collect();
    LesionMask::new(grid, mask)
}

/// Non-lesion terms of the segmentation posterior at fixed parameters.
#[derive(Debug, Clone)]
pub struct LabelTerms {
    /// `ln sum_k p(d_i | k) p(k)` over the `K` structure labels.
    pub log_evidence: Vec<f64>,
    /// `p(l_i = k | d_i)`, row-major `I x K`.
    pub posteriors: Vec<f64>,
    /// Deformed atlas prior `p(l_i = k)`, row-major `I x K`.
    pub prior: Vec<f64>,
    pub n_labels: usize,
}

/// Label posteriors of the lesion-free model. Components of classes outside
/// `sharing` (the lesion class of an augmented fit) are ignored.
pub fn label_terms(
    image: &MultiContrastImage,
    basis: &BiasBasis,
    params: &AppearanceParams,
    mesh: &AtlasMesh,
    sharing: &ClassSharingMap,
) -> Result<LabelTerms> {
    let k = sharing.n_labels();
    if k != mesh.n_labels() {
        return Err(Error::InvalidInput("sharing map does not match the atlas labels".into()));
    }
    let g = sharing.n_classes();
    let rast = rasterize(mesh, image.grid())?;
    let prior = interpolate_prior(mesh, &rast);
    let y = bias_corrected(image, basis, params)?;
    let n = image.n_contrasts();
    let comps: Vec<(usize, f64, crate::likelihood::PreparedGaussian)> = params
        .components
        .iter()
        .filter(|c| c.class < g)
        .map(|c| Ok((c.class, c.weight.ln(), crate::likelihood::PreparedGaussian::new(&c.mean, &c.cov)?)))
        .collect::<Result<_>>()?;
    let n_vox = image.n_voxels();
    let mut log_evidence = vec![0.0; n_vox];
    let mut posteriors = vec![0.0; n_vox * k];
    log_evidence.par_chunks_mut(BLOCK).zip(posteriors.par_chunks_mut(BLOCK * k)).enumerate().for_each(|(b, (ev, post))| {
        let mut class_log = vec![f64::NEG_INFINITY; g];
        for (r, (e, row)) in ev.iter_mut().zip(post.chunks_exact_mut(k)).enumerate() {
            let i = b * BLOCK + r;
            let yi = &y[i * n..(i + 1) * n];
            class_log.fill(f64::NEG_INFINITY);
            for (class, lw, gauss) in &comps {
                class_log[*class] = log_add(class_log[*class], lw + gauss.log_density(yi));
            }
            let lp: Vec<f64> = (0..k).map(|l| prior[i * k + l].ln() + class_log[sharing.label_to_class[l]]).collect();
            let max = lp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                *e = f64::NEG_INFINITY;
                continue;
            }
            let total: f64 = lp.iter().map(|v| (v - max).exp()).sum();
            *e = max + total.ln();
            for (o, v) in row.iter_mut().zip(&lp) {
                *o = (v - *e).exp();
            }
        }
    });
    Ok(LabelTerms { log_evidence, posteriors, prior, n_labels: k })
}

/// Gives every lesion voxel the structure with the highest atlas prior.
/// Under the lesion branch the intensities are explained by the lesion
/// Gaussian, so they say nothing about the underlying structure.
pub fn assign_lesion_structures(labels: &LabelMap, lesions: &LesionMask, terms: &LabelTerms) -> Result<LabelMap> {
    let k = terms.n_labels;
    if !labels.grid().same_shape(lesions.grid()) || terms.prior.len() != labels.labels().len() * k {
        return Err(Error::GridMismatch("label map, lesion mask and label terms differ in size".into()));
    }
    let out = labels
        .labels()
        .iter()
        .zip(lesions.mask())
        .zip(terms.prior.chunks_exact(k))
        .map(|((&l, &z), row)| if z { argmax(row) as u16 + 1 } else { l })
        .collect();
    LabelMap::new(labels.grid().clone(), out)
}

/// First index of the largest value.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (l, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = l;
        }
    }
    best
}

pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        m
    } else {
        m + ((a - m).exp() + (b - m).exp()).ln()
    }
}

/// Lesions where the posterior exceeds `threshold`; every voxel gets the most
/// probable structure label (ties to the lowest index). Labels are 1-based.
pub fn final_segmentation(posterior: &ProbabilityMap, label_posteriors: &[f64], n_labels: usize, threshold: f64) -> Result<(LesionMask, LabelMap)> {
    let n_vox = posterior.grid().n_voxels();
    if n_labels == 0 || label_posteriors.len() != n_vox * n_labels {
        return Err(Error::GridMismatch("label posteriors do not match the posterior grid".into()));
    }
    let labels = label_posteriors
        .chunks_exact(n_labels)
        .map(|row| argmax(row) as u16 + 1)
        .collect();
    Ok((posterior.threshold(threshold), LabelMap::new(posterior.grid().clone(), labels)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::{eval_bias_basis, Component};
    use crate::volume::VolumeGrid;
    use nalgebra::{DMatrix, DVector};

    fn setup(contrasts: Vec<Contrast>, voxels: Vec<Vec<f64>>) -> (MultiContrastImage, BiasBasis, AppearanceParams, ClassSharingMap) {
        let n = contrasts.len();
        let grid = VolumeGrid::new([voxels.len(), 1, 1], [1.0; 3]).unwrap();
        let data = voxels.concat();
        let img = MultiContrastImage::new(grid.clone(), data, contrasts, true).unwrap();
        let basis = eval_bias_basis(&grid, [1, 1, 1]).unwrap();
        let comp = |class, m: f64| Component { class, weight: 1.0, mean: DVector::from_element(n, m), cov: DMatrix::identity(n, n) };
        let params = AppearanceParams::new(vec![comp(0, 1.0), comp(1, 2.0)], DMatrix::zeros(n, 1), false).unwrap();
        let sharing = ClassSharingMap::identity(2).with_tissues(0, 1);
        (img, basis, params, sharing)
    }

    #[test]
    fn gm_mean_is_excluded() {
        let (img, b, p, s) = setup(vec![Contrast::Flair], vec![vec![2.0], vec![2.0 + 1e-12], vec![1.0]]);
        assert_eq!(candidate_mask(&img, &b, &p, &s, CandidateRule::AllTagged).unwrap().mask(), &[false, true, false]);
    }

    #[test]
    fn t1_only_is_unconstrained() {
        let (img, b, p, s) = setup(vec![Contrast::T1w], vec![vec![0.0], vec![5.0]]);
        assert_eq!(candidate_mask(&img, &b, &p, &s, CandidateRule::AllTagged).unwrap().count(), 2);
    }

    #[test]
    fn all_tagged_channels_must_exceed() {
        // bright in FLAIR only; T1 is ignored
        let (img, b, p, s) = setup(vec![Contrast::Flair, Contrast::T2w, Contrast::T1w], vec![vec![3.0, 1.5, 9.0], vec![3.0, 2.5, 0.0]]);
        assert_eq!(candidate_mask(&img, &b, &p, &s, CandidateRule::AllTagged).unwrap().mask(), &[false, true]);
        assert_eq!(candidate_mask(&img, &b, &p, &s, CandidateRule::AnyTagged).unwrap().mask(), &[true, true]);
    }

    #[test]
    fn missing_gm_class_is_a_config_error() {
        let (img, b, p, mut s) = setup(vec![Contrast::Flair], vec![vec![1.0]]);
        s.gm_class = None;
        assert!(matches!(candidate_mask(&img, &b, &p, &s, CandidateRule::AllTagged), Err(Error::Config(_))));
    }

    #[test]
    fn final_segmentation_by_enumeration() {
        let g = VolumeGrid::new([2, 1, 1], [1.0; 3]).unwrap();
        let post = ProbabilityMap::new(g, vec![0.5, 0.7]).unwrap();
        let w = [0.2, 0.5, 0.3, 0.4, 0.4, 0.2];
        let (z, l) = final_segmentation(&post, &w, 3, 0.5).unwrap();
        assert_eq!(z.mask(), &[false, true]);
        // voxel 0: label 2 wins; voxel 1: tie between 1 and 2 goes to 1
        assert_eq!(l.labels(), &[2, 1]);
        let (z, _) = final_segmentation(&post, &w, 3, 1.0 - 1e-12).unwrap();
        assert_eq!(z.count(), 0);
    }

    #[test]
    fn lesion_voxels_take_the_prior_mode() {
        let g = VolumeGrid::new([2, 1, 1], [1.0; 3]).unwrap();
        let post = ProbabilityMap::new(g.clone(), vec![0.2, 0.9]).unwrap();
        let w = [0.2, 0.5, 0.3, 0.1, 0.8, 0.1];
        let terms = LabelTerms { log_evidence: vec![0.0; 2], posteriors: w.to_vec(), prior: vec![0.6, 0.2, 0.2, 0.1, 0.2, 0.7], n_labels: 3 };
        let (z, l) = final_segmentation(&post, &w, 3, 0.5).unwrap();
        let l = assign_lesion_structures(&l, &z, &terms).unwrap();
        // the healthy voxel keeps its intensity-based label
        assert_eq!(l.labels(), &[2, 3]);
    }
}
