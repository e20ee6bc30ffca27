//! Variational autoencoder over binary lesion masks.
//!
//! The encoder is a stack of stride-2 convolutions with ReLU followed by a
//! dense layer producing the latent mean and (softplus) standard deviation.
//! The decoder mirrors it with transposed convolutions and a sigmoid head.

mod io;
pub(crate) mod layers;
mod train;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::volume::{LesionMask, ProbabilityMap, VolumeGrid};
use layers::{
    conv_backward, conv_forward, dense_backward, dense_forward, half, relu, relu_backward, sigmoid, softplus, tconv_backward,
    tconv_forward, volume, Dims,
};

pub use io::{load_model, save_model};
pub use train::{train, write_training_log, EpochLog, VaeTrainConfig};

/// Probabilities are kept in `[P_MIN, 1 - P_MIN]`.
pub const P_MIN: f64 = 1e-7;

fn logit_bound() -> f64 {
    ((1.0 - P_MIN) / P_MIN).ln()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub latent_dim: usize,
    /// Encoder channel counts, one per stride-2 layer.
    pub channels: Vec<usize>,
    pub dims: [usize; 3],
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    w: usize,
    b: usize,
    n_w: usize,
    n_b: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    enc_conv: Vec<Slot>,
    enc_dense: Slot,
    dec_dense: Slot,
    /// `dec_tconv[k]` maps level `k + 1` to level `k`.
    dec_tconv: Vec<Slot>,
    total: usize,
}

impl Architecture {
    pub fn new(latent_dim: usize, channels: Vec<usize>, dims: [usize; 3]) -> Result<Self> {
        let a = Self { latent_dim, channels, dims };
        a.validate()?;
        Ok(a)
    }

    /// Three layers with 8, 16 and 32 channels and 32 latent dimensions.
    pub fn desk(dims: [usize; 3]) -> Self {
        Self { latent_dim: 32, channels: vec![8, 16, 32], dims }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.channels.is_empty() || self.channels.contains(&0) || self.dims.contains(&0) {
            return Err(Error::Config(format!("invalid architecture {self:?}")));
        }
        Ok(())
    }

    fn levels(&self) -> Vec<Dims> {
        let mut out = vec![self.dims];
        for _ in &self.channels {
            out.push(half(*out.last().expect("non-empty")));
        }
        out
    }

    /// Channel count at each level, input first.
    fn level_channels(&self) -> Vec<usize> {
        std::iter::once(1).chain(self.channels.iter().copied()).collect()
    }

    fn flat_len(&self) -> usize {
        self.channels.last().expect("validated") * volume(*self.levels().last().expect("non-empty"))
    }

    fn layout(&self) -> Layout {
        let mut at = 0;
        let mut slot = |n_w: usize, n_b: usize| {
            let s = Slot { w: at, b: at + n_w, n_w, n_b };
            at += n_w + n_b;
            s
        };
        let ch = self.level_channels();
        let enc_conv = (0..self.channels.len()).map(|k| slot(ch[k + 1] * ch[k] * 27, ch[k + 1])).collect();
        let flat = self.flat_len();
        let enc_dense = slot(2 * self.latent_dim * flat, 2 * self.latent_dim);
        let dec_dense = slot(flat * self.latent_dim, flat);
        let dec_tconv = (0..self.channels.len()).map(|k| slot(ch[k + 1] * ch[k] * 27, ch[k])).collect();
        Layout { enc_conv, enc_dense, dec_dense, dec_tconv, total: at }
    }

    pub fn n_params(&self) -> usize {
        self.layout().total
    }

    /// Fan-in of the layer owning each parameter.
    fn fan_ins(&self) -> Vec<usize> {
        let lay = self.layout();
        let ch = self.level_channels();
        let mut fan = vec![1; lay.total];
        let mut set = |s: Slot, f: usize| fan[s.w..s.b + s.n_b].fill(f);
        for (k, s) in lay.enc_conv.iter().enumerate() {
            set(*s, ch[k] * 27);
        }
        set(lay.enc_dense, self.flat_len());
        set(lay.dec_dense, self.latent_dim);
        for (k, s) in lay.dec_tconv.iter().enumerate() {
            // each fine output sees at most 8 coarse inputs per channel
            set(*s, ch[k + 1] * 8);
        }
        fan
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboParts {
    pub elbo: f64,
    pub kl: f64,
    pub reconstruction: f64,
}

struct Encoded {
    /// Post-ReLU activations per level; `acts[0]` is the input.
    acts: Vec<Vec<f64>>,
    raw: Vec<f64>,
}

struct Decoded {
    /// `acts[k]` is the post-ReLU activation at level `k >= 1`.
    acts: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapePriorModel {
    arch: Architecture,
    grid: VolumeGrid,
    params: Vec<f64>,
}

impl ShapePriorModel {
    /// Zero weights and biases.
    pub fn zeros(arch: Architecture, grid: VolumeGrid) -> Result<Self> {
        Self::from_params(arch.clone(), grid, vec![0.0; arch.n_params()])
    }

    /// Uniform fan-in scaled weights and zero biases.
    pub fn init(arch: Architecture, grid: VolumeGrid, rng: &mut impl Rng) -> Result<Self> {
        let mut m = Self::zeros(arch, grid)?;
        let lay = m.arch.layout();
        let fan = m.arch.fan_ins();
        let mut slots: Vec<Slot> = lay.enc_conv.iter().chain(&lay.dec_tconv).copied().collect();
        slots.extend([lay.enc_dense, lay.dec_dense]);
        // draw in storage order
        slots.sort_by_key(|s| s.w);
        for s in slots {
            for i in s.w..s.w + s.n_w {
                let bound = (6.0 / fan[i] as f64).sqrt();
                m.params[i] = rng.random_range(-bound..bound);
            }
        }
        Ok(m)
    }

    pub fn from_params(arch: Architecture, grid: VolumeGrid, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if grid.dims() != arch.dims {
            return Err(Error::GridMismatch(format!("model grid {:?} vs architecture {:?}", grid.dims(), arch.dims)));
        }
        if params.len() != arch.n_params() {
            return Err(Error::InvalidInput(format!("expected {} parameters, got {}", arch.n_params(), params.len())));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidInput("non-finite model parameter".into()));
        }
        Ok(Self { arch, grid, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn grid(&self) -> &VolumeGrid {
        &self.grid
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn encode_raw(&self, x: &[f64]) -> Encoded {
        let lay = self.arch.layout();
        let ch = self.arch.level_channels();
        let levels = self.arch.levels();
        let p = &self.params;
        let mut acts = vec![x.to_vec()];
        for (k, s) in lay.enc_conv.iter().enumerate() {
            let mut y = conv_forward(&acts[k], ch[k], levels[k], &p[s.w..s.b], &p[s.b..s.b + s.n_b], ch[k + 1]);
            relu(&mut y);
            acts.push(y);
        }
        let s = lay.enc_dense;
        let raw = dense_forward(acts.last().expect("non-empty"), &p[s.w..s.b], &p[s.b..s.b + s.n_b]);
        Encoded { acts, raw }
    }

    fn decode_raw(&self, h: &[f64]) -> Decoded {
        let lay = self.arch.layout();
        let ch = self.arch.level_channels();
        let levels = self.arch.levels();
        let p = &self.params;
        let depth = self.arch.channels.len();
        let mut acts = vec![Vec::new(); depth + 1];
        let s = lay.dec_dense;
        let mut top = dense_forward(h, &p[s.w..s.b], &p[s.b..s.b + s.n_b]);
        relu(&mut top);
        acts[depth] = top;
        let mut logits = Vec::new();
        for k in (0..depth).rev() {
            let s = lay.dec_tconv[k];
            let mut y = tconv_forward(&acts[k + 1], ch[k + 1], levels[k], &p[s.w..s.b], &p[s.b..s.b + s.n_b], ch[k]);
            if k == 0 {
                logits = y;
            } else {
                relu(&mut y);
                acts[k] = y;
            }
        }
        Decoded { acts, logits }
    }

    fn check_latent(&self, h: &[f64]) -> Result<()> {
        if h.len() != self.arch.latent_dim {
            return Err(Error::InvalidInput(format!("latent has {} entries, model expects {}", h.len(), self.arch.latent_dim)));
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite latent".into()));
        }
        Ok(())
    }

    /// `f(h)` on the training grid.
    pub fn decode(&self, h: &[f64]) -> Result<ProbabilityMap> {
        self.check_latent(h)?;
        let d = self.decode_raw(h);
        let probs = d.logits.iter().map(|&a| sigmoid(a).clamp(P_MIN, 1.0 - P_MIN)).collect();
        ProbabilityMap::new(self.grid.clone(), probs)
    }

    fn mask_input(&self, z: &LesionMask) -> Result<Vec<f64>> {
        if !z.grid().same_shape(&self.grid) {
            return Err(Error::GridMismatch(format!("mask grid {:?} vs model grid {:?}", z.grid().dims(), self.grid.dims())));
        }
        Ok(z.mask().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
    }

    /// Latent mean and standard deviation of the approximate posterior.
    pub fn encode(&self, z: &LesionMask) -> Result<(Vec<f64>, Vec<f64>)> {
        let x = self.mask_input(z)?;
        let e = self.encode_raw(&x);
        let l = self.arch.latent_dim;
        Ok((e.raw[..l].to_vec(), e.raw[l..].iter().map(|&s| softplus(s)).collect()))
    }

    /// Draw `h` from the approximate posterior given a mask.
    pub fn sample_posterior(&self, z: &LesionMask, rng: &mut impl Rng) -> Result<Vec<f64>> {
        let (mu, sigma) = self.encode(z)?;
        Ok(mu.iter().zip(&sigma).map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal)).collect())
    }

    pub fn sample_prior(&self, rng: &mut impl Rng) -> ProbabilityMap {
        let h: Vec<f64> = (0..self.arch.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
        self.decode(&h).expect("latent has model size")
    }

    /// Monte Carlo ELBO and its gradient for one mask.
    pub fn elbo(&self, z: &LesionMask, mc_samples: usize, rng: &mut impl Rng) -> Result<(ElboParts, Vec<f64>)> {
        let x = self.mask_input(z)?;
        let eps: Vec<Vec<f64>> =
            (0..mc_samples.max(1)).map(|_| (0..self.arch.latent_dim).map(|_| rng.sample(StandardNormal)).collect()).collect();
        Ok(self.elbo_with_noise(&x, &eps))
    }

    /// ELBO and gradient with explicit reparameterization noise, one vector per
    /// Monte Carlo draw. `x` holds the mask as 0/1 values.
    pub fn elbo_with_noise(&self, x: &[f64], eps: &[Vec<f64>]) -> (ElboParts, Vec<f64>) {
        let lay = self.arch.layout();
        let ch = self.arch.level_channels();
        let levels = self.arch.levels();
        let depth = self.arch.channels.len();
        let l = self.arch.latent_dim;
        let p = &self.params;
        let mut grad = vec![0.0; lay.total];
        let bound = logit_bound();

        let enc = self.encode_raw(x);
        let mu = &enc.raw[..l];
        let s_raw = &enc.raw[l..];
        let sigma: Vec<f64> = s_raw.iter().map(|&s| softplus(s)).collect();
        let kl = kl_standard_normal(mu, &sigma);

        let m = eps.len() as f64;
        let mut g_mu = vec![0.0; l];
        let mut g_sigma = vec![0.0; l];
        let mut rec = 0.0;
        for e in eps {
            let h: Vec<f64> = (0..l).map(|j| mu[j] + sigma[j] * e[j]).collect();
            let dec = self.decode_raw(&h);
            let mut g = vec![0.0; dec.logits.len()];
            for ((gi, &a), &zi) in g.iter_mut().zip(&dec.logits).zip(x) {
                let ac = a.clamp(-bound, bound);
                rec += (zi * ac - softplus(ac)) / m;
                if a.abs() <= bound {
                    *gi = (zi - sigmoid(a)) / m;
                }
            }
            // back through the transposed convolutions
            for k in 0..depth {
                let s = lay.dec_tconv[k];
                let mut gx = vec![0.0; dec.acts[k + 1].len()];
                let (gw, gb) = grad[s.w..s.b + s.n_b].split_at_mut(s.n_w);
                tconv_backward(&dec.acts[k + 1], ch[k + 1], levels[k], &p[s.w..s.b], ch[k], &g, Some(&mut gx), gw, gb);
                relu_backward(&dec.acts[k + 1], &mut gx);
                g = gx;
            }
            let s = lay.dec_dense;
            let mut gh = vec![0.0; l];
            let (gw, gb) = grad[s.w..s.b + s.n_b].split_at_mut(s.n_w);
            dense_backward(&h, &p[s.w..s.b], &g, Some(&mut gh), gw, gb);
            for j in 0..l {
                g_mu[j] += gh[j];
                g_sigma[j] += gh[j] * e[j];
            }
        }

        // KL enters with a minus sign
        let mut g_raw = vec![0.0; 2 * l];
        for j in 0..l {
            g_raw[j] = g_mu[j] - mu[j];
            g_raw[l + j] = (g_sigma[j] - (sigma[j] - 1.0 / sigma[j])) * sigmoid(s_raw[j]);
        }
        let s = lay.enc_dense;
        let top = &enc.acts[depth];
        let mut g = vec![0.0; top.len()];
        let (gw, gb) = grad[s.w..s.b + s.n_b].split_at_mut(s.n_w);
        dense_backward(top, &p[s.w..s.b], &g_raw, Some(&mut g), gw, gb);
        for k in (0..depth).rev() {
            relu_backward(&enc.acts[k + 1], &mut g);
            let s = lay.enc_conv[k];
            let (gw, gb) = grad[s.w..s.b + s.n_b].split_at_mut(s.n_w);
            if k == 0 {
                conv_backward(&enc.acts[0], ch[0], levels[0], &p[s.w..s.b], ch[1], &g, None, gw, gb);
            } else {
                let mut gx = vec![0.0; enc.acts[k].len()];
                conv_backward(&enc.acts[k], ch[k], levels[k], &p[s.w..s.b], ch[k + 1], &g, Some(&mut gx), gw, gb);
                g = gx;
            }
        }
        (ElboParts { elbo: rec - kl, kl, reconstruction: rec }, grad)
    }
}

/// `KL(N(mu, diag(sigma^2)) || N(0, I))`.
pub fn kl_standard_normal(mu: &[f64], sigma: &[f64]) -> f64 {
    0.5 * mu.iter().zip(sigma).map(|(m, s)| m * m + s * s - (s * s).ln() - 1.0).sum::<f64>()
}
