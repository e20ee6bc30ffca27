//! Blocked Gibbs sampling of the lesion posterior.
//!
//! Each sweep draws the lesion covariance and mean from their conjugate
//! conditionals, a shape code from the encoder, and then every voxel's lesion
//! indicator independently. The posterior estimate averages the analytic
//! per-voxel probabilities of the recorded sweeps.

mod segment;
mod wishart;

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix4};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::atlas::{interpolate_lesion_prior, rasterize};
use crate::error::{Error, Result};
use crate::gem::{FitResult, BLOCK};
use crate::likelihood::{ClassSharingMap, PreparedGaussian};
use crate::rng::counter_rng;
use crate::shape_prior::ShapePriorModel;
use crate::volume::{resample_affine, LesionMask, MultiContrastImage, ProbabilityMap, VolumeGrid};

pub use segment::{assign_lesion_structures, bias_corrected, candidate_mask, final_segmentation, label_terms, CandidateRule, LabelTerms};
pub use wishart::sample_inverse_wishart;

// counter_rng streams; voxel draws use STREAM_VOXEL + sweep
const STREAM_BLOCKS: u64 = 0;
const STREAM_VOXEL: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub samples: usize,
    pub burn_in: usize,
    pub threshold: f64,
    pub seed: u64,
    /// Maps subject world coordinates into the shape model's space.
    pub subject_to_prior: Matrix4<f64>,
    pub rule: CandidateRule,
    /// Hold the lesion Gaussian fixed instead of sampling it.
    pub pin_gaussian: Option<(DVector<f64>, DMatrix<f64>)>,
    /// Hold the shape code fixed instead of sampling it.
    pub pin_latent: Option<Vec<f64>>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            samples: 50,
            burn_in: 50,
            threshold: 0.5,
            seed: 0,
            subject_to_prior: Matrix4::identity(),
            rule: CandidateRule::AllTagged,
            pin_gaussian: None,
            pin_latent: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("at least one recorded sample is required".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} must lie in (0, 1)", self.threshold)));
        }
        if self.subject_to_prior.try_inverse().is_none() {
            return Err(Error::Singular("subject-to-prior affine is not invertible".into()));
        }
        Ok(())
    }
}

/// Fixed quantities of the lesion posterior at the fitted parameters.
#[derive(Debug, Clone)]
pub struct LesionModel {
    pub grid: VolumeGrid,
    /// Bias-corrected intensities, row-major `I x N`.
    pub corrected: Vec<f64>,
    /// `ln sum_k p(d_i | k) p(k)` over the non-lesion labels.
    pub log_rest: Vec<f64>,
    /// Lesion location prior.
    pub rho: Vec<f64>,
    pub candidate: LesionMask,
    pub initial: LesionMask,
    pub mu_wm: DVector<f64>,
    pub sigma_wm: DMatrix<f64>,
    pub nu: f64,
    pub kappa: f64,
}

impl LesionModel {
    /// Build from a lesion-augmented fit; `sharing` is the map without the
    /// lesion class.
    pub fn from_fit(image: &MultiContrastImage, fit: &FitResult, sharing: &ClassSharingMap, rule: CandidateRule) -> Result<(Self, LabelTerms)> {
        let coupling = fit.lesion.ok_or_else(|| Error::Config("the fit has no lesion class".into()))?;
        let basis = fit.bias_basis(image.grid())?;
        let terms = label_terms(image, &basis, &fit.params, &fit.mesh, sharing)?;
        let candidate = candidate_mask(image, &basis, &fit.params, sharing, rule)?;
        let rast = rasterize(&fit.mesh, image.grid())?;
        let rho = interpolate_lesion_prior(&fit.mesh, &rast).probs().to_vec();
        let les = fit.lesion_component().expect("augmented fit has a lesion component");
        let wm = fit.params.components[fit.wm_component().expect("augmented fit has a white-matter component")].clone();
        let mut initial = LesionMask::empty(image.grid().clone());
        for (i, z) in initial.mask_mut().iter_mut().enumerate() {
            *z = candidate.mask()[i] && fit.assignments.get(i, les) > 0.5;
        }
        let model = Self {
            grid: image.grid().clone(),
            corrected: bias_corrected(image, &basis, &fit.params)?,
            log_rest: terms.log_evidence.clone(),
            rho,
            candidate,
            initial,
            mu_wm: wm.mean,
            sigma_wm: wm.cov,
            nu: coupling.nu,
            kappa: coupling.kappa,
        };
        model.validate()?;
        Ok((model, terms))
    }

    pub fn n_contrasts(&self) -> usize {
        self.mu_wm.len()
    }

    pub fn validate(&self) -> Result<()> {
        let i = self.grid.n_voxels();
        let n = self.n_contrasts();
        if self.corrected.len() != i * n || self.log_rest.len() != i || self.rho.len() != i {
            return Err(Error::InvalidInput("lesion model tables do not match the grid".into()));
        }
        if !self.candidate.grid().same_shape(&self.grid) || !self.initial.grid().same_shape(&self.grid) {
            return Err(Error::GridMismatch("lesion masks are not on the subject grid".into()));
        }
        // IW degrees of freedom at zero lesion voxels
        let dof = self.nu - n as f64 - 2.0;
        if !(dof > n as f64 - 1.0) {
            return Err(Error::Config(format!("nu = {} gives inverse Wishart dof {dof} <= {}", self.nu, n - 1)));
        }
        Ok(())
    }

    /// `p(z_i = 1 | d_i, ...)` for one voxel given the lesion Gaussian's log
    /// density and the shape probability `f`.
    #[inline]
    pub fn lesion_probability(&self, i: usize, log_lesion: f64, f: f64) -> f64 {
        if !self.candidate.mask()[i] {
            return 0.0;
        }
        let a = (f * self.rho[i]).clamp(0.0, 1.0);
        if a == 0.0 || log_lesion == f64::NEG_INFINITY {
            return 0.0;
        }
        let num = log_lesion + a.ln();
        let rest = self.log_rest[i] + (-a).ln_1p();
        if rest == f64::NEG_INFINITY {
            return 1.0;
        }
        1.0 / (1.0 + (rest - num).exp())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerState {
    pub z: Vec<bool>,
    pub h: Option<Vec<f64>>,
    pub mu_les: DVector<f64>,
    pub sigma_les: DMatrix<f64>,
    pub posterior_sum: Vec<f64>,
    pub recorded: usize,
    pub sweep: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainRecord {
    pub sweep: usize,
    pub n_les: usize,
    pub mu_les: DVector<f64>,
    pub sigma_les: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub probabilities: Vec<f64>,
    pub record: ChainRecord,
}

/// Lesion sufficient statistics of the voxels with `z_i = 1`.
fn lesion_stats(model: &LesionModel, z: &[bool]) -> (usize, DVector<f64>, DMatrix<f64>) {
    let n = model.n_contrasts();
    let mut count = 0;
    let mut sum = DVector::zeros(n);
    for (i, _) in z.iter().enumerate().filter(|(_, &b)| b) {
        count += 1;
        sum += DVector::from_row_slice(&model.corrected[i * n..(i + 1) * n]);
    }
    if count == 0 {
        return (0, DVector::zeros(n), DMatrix::zeros(n, n));
    }
    let mean = sum / count as f64;
    let mut scatter = DMatrix::zeros(n, n);
    for (i, _) in z.iter().enumerate().filter(|(_, &b)| b) {
        let d = DVector::from_row_slice(&model.corrected[i * n..(i + 1) * n]) - &mean;
        scatter.ger(1.0, &d, &d, 1.0);
    }
    (count, mean, scatter)
}

pub struct Sampler<'a> {
    model: &'a LesionModel,
    shape: Option<&'a ShapePriorModel>,
    config: &'a SamplerConfig,
    prior_to_subject: Matrix4<f64>,
}

impl<'a> Sampler<'a> {
    /// Without a shape model the shape probability is fixed at 1.
    pub fn new(model: &'a LesionModel, shape: Option<&'a ShapePriorModel>, config: &'a SamplerConfig) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        if let Some((mu, sigma)) = &config.pin_gaussian {
            PreparedGaussian::new(mu, sigma)?;
        }
        if let (Some(h), Some(s)) = (&config.pin_latent, shape) {
            if h.len() != s.latent_dim() {
                return Err(Error::Config("pinned latent does not match the shape model".into()));
            }
        }
        let prior_to_subject = config.subject_to_prior.try_inverse().expect("validated");
        Ok(Self { model, shape, config, prior_to_subject })
    }

    pub fn init_state(&self) -> SamplerState {
        let m = self.model;
        SamplerState {
            z: m.initial.mask().to_vec(),
            h: None,
            mu_les: m.mu_wm.clone(),
            sigma_les: &m.sigma_wm * m.kappa,
            posterior_sum: vec![0.0; m.grid.n_voxels()],
            recorded: 0,
            sweep: 0,
        }
    }

    /// Shape probabilities on the subject grid for code `h`.
    fn shape_map(&self, shape: &ShapePriorModel, h: &[f64]) -> Result<Vec<f64>> {
        let f = shape.decode(h)?;
        Ok(resample_affine(&f, &self.model.grid, &self.config.subject_to_prior)?.probs().to_vec())
    }

    fn draw_latent(&self, shape: &ShapePriorModel, z: &[bool], rng: &mut impl Rng) -> Result<Vec<f64>> {
        let mask = LesionMask::new(self.model.grid.clone(), z.to_vec())?;
        let in_prior = resample_affine(&mask.to_probability(), shape.grid(), &self.prior_to_subject)?.threshold(0.5);
        shape.sample_posterior(&in_prior, rng)
    }

    /// One pass over the four blocks. Records the analytic probabilities into
    /// the posterior accumulator once the burn-in is over.
    pub fn sweep(&self, state: &mut SamplerState) -> Result<SweepOutput> {
        let m = self.model;
        let n = m.n_contrasts();
        let mut rng = counter_rng(self.config.seed, STREAM_BLOCKS, state.sweep as u64);
        let (n_les, mean, scatter) = lesion_stats(m, &state.z);

        match &self.config.pin_gaussian {
            Some((mu, sigma)) => {
                state.mu_les = mu.clone();
                state.sigma_les = sigma.clone();
            }
            None => {
                let nl = n_les as f64;
                let mut psi = &scatter + &m.sigma_wm * (m.nu * m.kappa);
                if n_les > 0 {
                    let d = &mean - &m.mu_wm;
                    psi.ger(nl * m.nu / (nl + m.nu), &d, &d, 1.0);
                }
                state.sigma_les = sample_inverse_wishart(&psi, nl + m.nu - n as f64 - 2.0, &mut rng)?;
                let centre = (&mean * nl + &m.mu_wm * m.nu) / (nl + m.nu);
                let chol = (&state.sigma_les / (nl + m.nu))
                    .cholesky()
                    .ok_or_else(|| Error::Numerical("sampled lesion covariance is not positive definite".into()))?;
                let e = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
                state.mu_les = centre + chol.l() * e;
            }
        }

        let f = match self.shape {
            Some(shape) => {
                let h = match &self.config.pin_latent {
                    Some(h) => h.clone(),
                    None => self.draw_latent(shape, &state.z, &mut rng)?,
                };
                let f = self.shape_map(shape, &h)?;
                state.h = Some(h);
                Some(f)
            }
            None => None,
        };

        let gauss = PreparedGaussian::new(&state.mu_les, &state.sigma_les)?;
        let stream = STREAM_VOXEL + state.sweep as u64;
        let seed = self.config.seed;
        let mut probs = vec![0.0; m.grid.n_voxels()];
        let mut z = vec![false; m.grid.n_voxels()];
        probs.par_chunks_mut(BLOCK).zip(z.par_chunks_mut(BLOCK)).enumerate().for_each(|(b, (ps, zs))| {
            for (r, (p, zi)) in ps.iter_mut().zip(zs.iter_mut()).enumerate() {
                let i = b * BLOCK + r;
                if !m.candidate.mask()[i] {
                    continue;
                }
                let fi = f.as_ref().map_or(1.0, |f| f[i]);
                *p = m.lesion_probability(i, gauss.log_density(&m.corrected[i * n..(i + 1) * n]), fi);
                let u: f64 = counter_rng(seed, stream, i as u64).random();
                *zi = u < *p;
            }
        });

        if state.sweep >= self.config.burn_in {
            for (acc, p) in state.posterior_sum.iter_mut().zip(&probs) {
                *acc += p;
            }
            state.recorded += 1;
        }
        let record = ChainRecord { sweep: state.sweep, n_les, mu_les: state.mu_les.clone(), sigma_les: state.sigma_les.clone() };
        state.z = z;
        state.sweep += 1;
        Ok(SweepOutput { probabilities: probs, record })
    }
}

#[derive(Debug, Clone)]
pub struct PosteriorRun {
    pub posterior: ProbabilityMap,
    pub chain: Vec<ChainRecord>,
    pub state: SamplerState,
}

/// Run `burn_in` discarded sweeps and `samples` recorded ones.
pub fn lesion_posterior(model: &LesionModel, shape: Option<&ShapePriorModel>, config: &SamplerConfig) -> Result<PosteriorRun> {
    let sampler = Sampler::new(model, shape, config)?;
    let mut state = sampler.init_state();
    let mut chain = Vec::with_capacity(config.burn_in + config.samples);
    for _ in 0..config.burn_in + config.samples {
        let out = sampler.sweep(&mut state)?;
        log::debug!("sweep {}: {} lesion voxels", out.record.sweep, out.record.n_les);
        chain.push(out.record);
    }
    let s = state.recorded as f64;
    let probs = state.posterior_sum.iter().map(|p| (p / s).clamp(0.0, 1.0)).collect();
    Ok(PosteriorRun { posterior: ProbabilityMap::new(model.grid.clone(), probs)?, chain, state })
}

/// Columns: sweep, lesion voxel count, lesion mean per contrast, trace of the
/// lesion covariance.
pub fn write_chain_csv(path: impl AsRef<Path>, chain: &[ChainRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let n = chain.first().map_or(0, |r| r.mu_les.len());
    let mut header = vec!["sweep".to_string(), "n_les".to_string()];
    header.extend((0..n).map(|c| format!("mu_les_{c}")));
    header.push("trace_sigma_les".into());
    writeln!(w, "{}", header.join(","))?;
    for r in chain {
        let mut row = vec![r.sweep.to_string(), r.n_les.to_string()];
        row.extend(r.mu_les.iter().map(|v| format!("{v:.17e}")));
        row.push(format!("{:.17e}", r.sigma_les.trace()));
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}
