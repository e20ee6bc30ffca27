//! Coordinate-ascent model fitting: generalized EM for the appearance
//! parameters interleaved with quasi-Newton optimization of the mesh.

mod deform;
mod estep;
mod fit;
mod lbfgs;
mod mstep;
mod prior;

use std::io::Write;
use std::path::Path;

pub use deform::{deformation_objective, optimize_deformation, DeformationOutcome};
pub use estep::{e_step, EStep};
pub(crate) use estep::BLOCK;
pub use fit::{fit, fit_lesion_augmented, initial_params, FitResult};
pub use lbfgs::LbfgsOutcome;
pub use mstep::{covariance_ridge, m_step_bias, m_step_gaussians, m_step_gaussians_coupled, LesionCoupling};
pub use prior::ClassPrior;

use crate::error::{Error, Result};
use crate::likelihood::DEFAULT_BIAS_ORDER;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformationConfig {
    /// L-BFGS history length.
    pub memory: usize,
    /// Quasi-Newton steps per deformation phase; 0 disables deformation.
    pub max_steps: usize,
    pub max_line_search: usize,
}

impl Default for DeformationConfig {
    fn default() -> Self {
        Self { memory: 6, max_steps: 20, max_line_search: 30 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub max_outer_iters: usize,
    pub gem_iters_per_outer: usize,
    pub deformation: DeformationConfig,
    /// Relative objective change over one outer iteration that counts as converged.
    pub convergence_tol: f64,
    pub diagonal_mode: bool,
    pub lesion_augmented: bool,
    pub bias_order: [usize; 3],
    /// Keep hull vertices at their starting positions during deformation.
    pub pin_boundary: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_outer_iters: 30,
            gem_iters_per_outer: 5,
            deformation: DeformationConfig::default(),
            convergence_tol: 1e-5,
            diagonal_mode: false,
            lesion_augmented: false,
            bias_order: DEFAULT_BIAS_ORDER,
            pin_boundary: true,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_outer_iters == 0 || self.gem_iters_per_outer == 0 {
            return Err(Error::Config("iteration caps must be at least 1".into()));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(Error::Config("convergence tolerance must be positive".into()));
        }
        if self.deformation.max_steps > 0 && (self.deformation.memory == 0 || self.deformation.max_line_search == 0) {
            return Err(Error::Config("deformation memory and line-search caps must be at least 1".into()));
        }
        if self.bias_order.contains(&0) {
            return Err(Error::Config("bias order must be at least 1 per axis".into()));
        }
        Ok(())
    }
}

/// Posterior responsibilities, row-major `I x C` over mixture components.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftAssignments {
    n_voxels: usize,
    n_cols: usize,
    w: Vec<f64>,
}

impl SoftAssignments {
    pub fn new(n_voxels: usize, n_cols: usize, w: Vec<f64>) -> Result<Self> {
        if w.len() != n_voxels * n_cols {
            return Err(Error::InvalidInput("responsibility table has the wrong size".into()));
        }
        Ok(Self { n_voxels, n_cols, w })
    }

    pub fn n_voxels(&self) -> usize {
        self.n_voxels
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.w[i * self.n_cols..(i + 1) * self.n_cols]
    }

    #[inline]
    pub fn get(&self, i: usize, c: usize) -> f64 {
        self.w[i * self.n_cols + c]
    }

    pub fn values(&self) -> &[f64] {
        &self.w
    }

    /// Sum component columns into their classes.
    pub fn class_totals(&self, component_class: &[usize], n_classes: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_voxels * n_classes];
        for i in 0..self.n_voxels {
            for (c, &g) in component_class.iter().enumerate() {
                out[i * n_classes + g] += self.get(i, c);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Init,
    Bias,
    Gaussians,
    Deformation,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Init => "init",
            Phase::Bias => "bias",
            Phase::Gaussians => "gaussians",
            Phase::Deformation => "deformation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub iteration: usize,
    pub phase: Phase,
    pub objective: f64,
}

pub fn write_trace_csv(path: impl AsRef<Path>, trace: &[TraceEntry]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "iteration,phase,objective")?;
    for t in trace {
        writeln!(w, "{},{},{:.17e}", t.iteration, t.phase.as_str(), t.objective)?;
    }
    w.flush()?;
    Ok(())
}
