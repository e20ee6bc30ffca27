use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix4, Rotation3, Translation3};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use super::{Architecture, ElboParts, ShapePriorModel};
use crate::error::{Error, Result};
use crate::rng::counter_rng;
use crate::volume::{resample_affine, LesionMask};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

// stream ids for counter_rng
const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_AUGMENT: u64 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct VaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mc_samples: usize,
    /// Rotations are drawn uniformly in `[-deg, deg]` about each axis.
    pub rotation_degrees: f64,
    /// Rotated copies added per training mask.
    pub augment_copies: usize,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self { epochs: 100, batch_size: 10, learning_rate: 1e-4, mc_samples: 1, rotation_degrees: 10.0, augment_copies: 1, seed: 0 }
    }
}

impl VaeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.mc_samples == 0 {
            return Err(Error::Config("epochs, batch size and Monte Carlo samples must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.learning_rate)));
        }
        if !(self.rotation_degrees >= 0.0 && self.rotation_degrees.is_finite()) {
            return Err(Error::Config("rotation must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub elbo: f64,
    pub kl: f64,
    pub reconstruction: f64,
}

fn rotated(mask: &LesionMask, degrees: [f64; 3]) -> Result<LesionMask> {
    let grid = mask.grid();
    let d = grid.dims();
    let centre = grid.voxel_to_world([(d[0] - 1) as f64 / 2.0, (d[1] - 1) as f64 / 2.0, (d[2] - 1) as f64 / 2.0]);
    let [a, b, c] = degrees.map(f64::to_radians);
    let rot = Rotation3::from_euler_angles(a, b, c).to_homogeneous();
    let affine: Matrix4<f64> =
        Translation3::from(centre).to_homogeneous() * rot * Translation3::from(-centre).to_homogeneous();
    Ok(resample_affine(&mask.to_probability(), grid, &affine)?.threshold(0.5))
}

fn augment(masks: &[LesionMask], config: &VaeTrainConfig) -> Result<Vec<LesionMask>> {
    let mut out = masks.to_vec();
    if config.rotation_degrees == 0.0 {
        return Ok(out);
    }
    for (i, m) in masks.iter().enumerate() {
        let mut rng = counter_rng(config.seed, STREAM_AUGMENT, i as u64);
        for _ in 0..config.augment_copies {
            let deg = config.rotation_degrees;
            let angles = [(); 3].map(|_| rng.random_range(-deg..=deg));
            out.push(rotated(m, angles)?);
        }
    }
    Ok(out)
}

/// Fit encoder and decoder by Adam ascent on the Monte Carlo ELBO.
/// Returns the model and one log row per epoch.
pub fn train(masks: &[LesionMask], arch: Architecture, config: &VaeTrainConfig) -> Result<(ShapePriorModel, Vec<EpochLog>)> {
    config.validate()?;
    let first = masks.first().ok_or_else(|| Error::InvalidInput("no training masks".into()))?;
    let grid = first.grid().clone();
    if let Some(m) = masks.iter().find(|m| !m.grid().same_shape(&grid)) {
        return Err(Error::GridMismatch(format!("training masks on {:?} and {:?}", grid.dims(), m.grid().dims())));
    }
    let mut model = ShapePriorModel::init(arch, grid, &mut counter_rng(config.seed, STREAM_INIT, 0))?;
    let data: Vec<Vec<f64>> = augment(masks, config)?
        .iter()
        .map(|m| m.mask().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
        .collect();
    let n = data.len();
    let l = model.latent_dim();
    let n_params = model.params.len();
    let mut m1 = vec![0.0; n_params];
    let mut m2 = vec![0.0; n_params];
    let mut step = 0usize;
    let mut logs = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut counter_rng(config.seed, STREAM_SHUFFLE, epoch as u64));
        let mut total = ElboParts { elbo: 0.0, kl: 0.0, reconstruction: 0.0 };
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let results: Vec<(ElboParts, Vec<f64>)> = batch
                .par_iter()
                .enumerate()
                .map(|(j, &idx)| {
                    let counter = (epoch * n + b * config.batch_size + j) as u64;
                    let mut rng = counter_rng(config.seed, STREAM_NOISE, counter);
                    let eps: Vec<Vec<f64>> = (0..config.mc_samples)
                        .map(|_| (0..l).map(|_| rng.sample(rand_distr::StandardNormal)).collect())
                        .collect();
                    model.elbo_with_noise(&data[idx], &eps)
                })
                .collect();
            step += 1;
            // fixed summation order
            let scale = 1.0 / batch.len() as f64;
            let mut grad = vec![0.0; n_params];
            for (parts, g) in &results {
                total.elbo += parts.elbo;
                total.kl += parts.kl;
                total.reconstruction += parts.reconstruction;
                if !parts.elbo.is_finite() {
                    return Err(Error::Numerical(format!("non-finite ELBO at step {step}")));
                }
                for (a, gi) in grad.iter_mut().zip(g) {
                    *a += gi * scale;
                }
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numerical(format!("non-finite gradient at step {step}")));
            }
            let t = step as i32;
            let c1 = 1.0 - BETA1.powi(t);
            let c2 = 1.0 - BETA2.powi(t);
            for (((p, g), a), v) in model.params.iter_mut().zip(&grad).zip(m1.iter_mut()).zip(m2.iter_mut()) {
                *a = BETA1 * *a + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                *p += config.learning_rate * (*a / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            }
        }
        let log = EpochLog {
            epoch: epoch + 1,
            elbo: total.elbo / n as f64,
            kl: total.kl / n as f64,
            reconstruction: total.reconstruction / n as f64,
        };
        log::debug!("epoch {}: elbo {:.6}", log.epoch, log.elbo);
        logs.push(log);
    }
    Ok((model, logs))
}

pub fn write_training_log(path: impl AsRef<Path>, logs: &[EpochLog]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "epoch,elbo,kl,reconstruction")?;
    for l in logs {
        writeln!(w, "{},{:.17e},{:.17e},{:.17e}", l.epoch, l.elbo, l.kl, l.reconstruction)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::VolumeGrid;

    fn ball(n: usize, c: [f64; 3], r: f64) -> LesionMask {
        let g = VolumeGrid::isotropic(n);
        let m = (0..g.n_voxels())
            .map(|i| {
                let p = g.coords(i);
                (0..3).map(|a| (p[a] as f64 - c[a]).powi(2)).sum::<f64>() <= r * r
            })
            .collect();
        LesionMask::new(g, m).unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_initial_weights() {
        let arch = Architecture::new(2, vec![2, 2], [6, 6, 6]).unwrap();
        let cfg = VaeTrainConfig { epochs: 3, batch_size: 2, learning_rate: 0.0, ..Default::default() };
        let masks = vec![ball(6, [2.0; 3], 1.5), ball(6, [3.0; 3], 1.0)];
        let (m, _) = train(&masks, arch.clone(), &cfg).unwrap();
        let init = ShapePriorModel::init(arch, VolumeGrid::isotropic(6), &mut counter_rng(0, STREAM_INIT, 0)).unwrap();
        assert_eq!(m, init);
    }

    #[test]
    fn rotation_by_zero_is_identity() {
        let b = ball(9, [4.0, 3.0, 5.0], 2.0);
        assert_eq!(rotated(&b, [0.0; 3]).unwrap(), b);
    }
}
