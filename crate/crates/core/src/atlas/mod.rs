//! Tetrahedral-mesh probabilistic atlas.
//!
//! Label probabilities `alpha` and lesion probabilities `beta` live on mesh
//! vertices and are interpolated barycentrically inside each tetrahedron.
//! Vertices are in world (mm) coordinates.

mod build;
mod deform;
mod io;
mod raster;

pub use build::{build_atlas, regular_tet_mesh};
pub use deform::{deformation_log_prior, volume_penalty, DeformationPrior};
pub use io::{read_atlas, write_atlas, AMSH_MAGIC, AMSH_VERSION};
pub use raster::{rasterize, Rasterization};
pub(crate) use raster::{vertices_in_voxel_space, TetFrame};

use std::collections::HashMap;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::volume::ProbabilityMap;

/// Structure index (0-based) assigned to voxels outside the mesh.
pub const BACKGROUND_LABEL: usize = 0;

pub const DEFAULT_STIFFNESS: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct AtlasMesh {
    pub(crate) vertices: Vec<Vector3<f64>>,
    pub(crate) reference_vertices: Vec<Vector3<f64>>,
    pub(crate) tets: Vec<[usize; 4]>,
    /// Row-major `J x K`.
    pub(crate) alpha: Vec<f64>,
    pub(crate) beta: Vec<f64>,
    pub(crate) n_labels: usize,
    pub(crate) stiffness: f64,
}

impl AtlasMesh {
    pub fn new(
        reference_vertices: Vec<Vector3<f64>>,
        tets: Vec<[usize; 4]>,
        alpha: Vec<f64>,
        beta: Vec<f64>,
        n_labels: usize,
        stiffness: f64,
    ) -> Result<Self> {
        let mesh = Self {
            vertices: reference_vertices.clone(),
            reference_vertices,
            tets,
            alpha,
            beta,
            n_labels,
            stiffness,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.reference_vertices.len();
        if self.vertices.len() != j {
            return Err(Error::InvalidInput("vertex and reference counts differ".into()));
        }
        if self.n_labels == 0 {
            return Err(Error::InvalidInput("atlas needs at least one label".into()));
        }
        if self.alpha.len() != j * self.n_labels {
            return Err(Error::InvalidInput("alpha must be J x K".into()));
        }
        if self.beta.len() != j {
            return Err(Error::InvalidInput("beta must have one entry per vertex".into()));
        }
        if !(self.stiffness > 0.0) {
            return Err(Error::InvalidInput(format!("stiffness must be positive, got {}", self.stiffness)));
        }
        for (v, row) in self.alpha.chunks_exact(self.n_labels).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&a| !(a >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidInput(format!("alpha row {v} is not a probability vector")));
            }
        }
        if let Some(v) = self.beta.iter().position(|b| !(0.0..=1.0).contains(b)) {
            return Err(Error::InvalidInput(format!("beta at vertex {v} outside [0,1]")));
        }
        for (t, tet) in self.tets.iter().enumerate() {
            if tet.iter().any(|&v| v >= j) {
                return Err(Error::InvalidInput(format!("tetrahedron {t} references a missing vertex")));
            }
            let vol = signed_volume(&self.reference_vertices, tet);
            if !(vol > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "tetrahedron {t} is degenerate in the reference configuration (volume {vol:e})"
                )));
            }
        }
        Ok(())
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_tets(&self) -> usize {
        self.tets.len()
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn reference_vertices(&self) -> &[Vector3<f64>] {
        &self.reference_vertices
    }

    pub fn tets(&self) -> &[[usize; 4]] {
        &self.tets
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_row(&self, j: usize) -> &[f64] {
        &self.alpha[j * self.n_labels..(j + 1) * self.n_labels]
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn stiffness(&self) -> f64 {
        self.stiffness
    }

    pub fn set_stiffness(&mut self, stiffness: f64) -> Result<()> {
        if !(stiffness > 0.0) {
            return Err(Error::InvalidInput(format!("stiffness must be positive, got {stiffness}")));
        }
        self.stiffness = stiffness;
        Ok(())
    }

    /// Replace the deformed vertex positions. Folding is not checked here.
    pub fn set_vertices(&mut self, vertices: Vec<Vector3<f64>>) -> Result<()> {
        if vertices.len() != self.reference_vertices.len() {
            return Err(Error::InvalidInput("vertex count mismatch".into()));
        }
        self.vertices = vertices;
        Ok(())
    }

    pub fn set_alpha(&mut self, alpha: Vec<f64>) -> Result<()> {
        let old = std::mem::replace(&mut self.alpha, alpha);
        if let Err(e) = self.validate() {
            self.alpha = old;
            return Err(e);
        }
        Ok(())
    }

    pub fn set_beta(&mut self, beta: Vec<f64>) -> Result<()> {
        let old = std::mem::replace(&mut self.beta, beta);
        if let Err(e) = self.validate() {
            self.beta = old;
            return Err(e);
        }
        Ok(())
    }

    /// Vertices on the mesh hull (belonging to a face shared by a single tetrahedron).
    pub fn boundary_vertices(&self) -> Vec<bool> {
        let mut faces: HashMap<[usize; 3], u32> = HashMap::new();
        for tet in &self.tets {
            for skip in 0..4 {
                let mut f = [0usize; 3];
                let mut n = 0;
                for (pos, &v) in tet.iter().enumerate() {
                    if pos != skip {
                        f[n] = v;
                        n += 1;
                    }
                }
                f.sort_unstable();
                *faces.entry(f).or_insert(0) += 1;
            }
        }
        let mut boundary = vec![false; self.vertices.len()];
        for (f, count) in faces {
            if count == 1 {
                for v in f {
                    boundary[v] = true;
                }
            }
        }
        boundary
    }

    /// Vertex label probabilities for the lesion-augmented model: `K + 1` columns,
    /// the first `K` scaled by `1 - beta_j` and the last equal to `beta_j`.
    pub fn augmented_alpha(&self) -> Vec<f64> {
        let k = self.n_labels;
        let mut out = Vec::with_capacity(self.vertices.len() * (k + 1));
        for (j, &b) in self.beta.iter().enumerate() {
            let keep = 1.0 - b;
            out.extend(self.alpha_row(j).iter().map(|&a| a * keep));
            out.push(b);
        }
        out
    }
}

pub(crate) fn signed_volume(vertices: &[Vector3<f64>], tet: &[usize; 4]) -> f64 {
    let v0 = vertices[tet[0]];
    let a = vertices[tet[1]] - v0;
    let b = vertices[tet[2]] - v0;
    let c = vertices[tet[3]] - v0;
    a.dot(&b.cross(&c)) / 6.0
}

/// Barycentric interpolation of a per-vertex `J x C` table. Voxels outside the
/// mesh receive `outside`. Output is row-major `I x C`.
pub fn interpolate_vertex_table(table: &[f64], columns: usize, rast: &Rasterization, outside: &[f64]) -> Vec<f64> {
    assert_eq!(outside.len(), columns);
    let mut out = vec![0.0; rast.n_voxels() * columns];
    for (i, row) in out.chunks_exact_mut(columns).enumerate() {
        match rast.cell(i) {
            Some((verts, w)) => {
                for (v, wv) in verts.iter().zip(w.iter()) {
                    let src = &table[v * columns..(v + 1) * columns];
                    for (o, s) in row.iter_mut().zip(src) {
                        *o += wv * s;
                    }
                }
            }
            None => row.copy_from_slice(outside),
        }
    }
    out
}

/// Per-voxel label prior `p(l_i = k | theta_l)`, row-major `I x K`.
pub fn interpolate_prior(mesh: &AtlasMesh, rast: &Rasterization) -> Vec<f64> {
    let k = mesh.n_labels;
    let mut outside = vec![0.0; k];
    outside[BACKGROUND_LABEL] = 1.0;
    interpolate_vertex_table(&mesh.alpha, k, rast, &outside)
}

/// Per-voxel lesion location prior; zero outside the mesh.
pub fn interpolate_lesion_prior(mesh: &AtlasMesh, rast: &Rasterization) -> ProbabilityMap {
    let probs = interpolate_vertex_table(&mesh.beta, 1, rast, &[0.0])
        .into_iter()
        .map(|p| p.clamp(0.0, 1.0))
        .collect();
    ProbabilityMap::new(rast.grid().clone(), probs).expect("clamped probabilities")
}
