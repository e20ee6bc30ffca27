use nalgebra::{Matrix3, Vector3};

use super::{signed_volume, AtlasMesh};
use crate::error::{Error, Result};
use crate::volume::VolumeGrid;

const INSIDE_TOL: f64 = 1e-9;
const NONE: u32 = u32::MAX;

/// Per-voxel containing tetrahedron and barycentric weights; these weights are
/// the values of the piecewise-linear vertex basis functions at the voxel.
#[derive(Debug, Clone)]
pub struct Rasterization {
    grid: VolumeGrid,
    tet: Vec<u32>,
    verts: Vec<[u32; 4]>,
    weights: Vec<[f64; 4]>,
}

impl Rasterization {
    pub fn grid(&self) -> &VolumeGrid {
        &self.grid
    }

    pub fn n_voxels(&self) -> usize {
        self.tet.len()
    }

    /// Containing tetrahedron, or `None` for background voxels.
    pub fn tet(&self, i: usize) -> Option<usize> {
        (self.tet[i] != NONE).then_some(self.tet[i] as usize)
    }

    #[inline]
    pub fn cell(&self, i: usize) -> Option<([usize; 4], &[f64; 4])> {
        if self.tet[i] == NONE {
            return None;
        }
        let v = self.verts[i];
        Some(([v[0] as usize, v[1] as usize, v[2] as usize, v[3] as usize], &self.weights[i]))
    }

    pub fn n_inside(&self) -> usize {
        self.tet.iter().filter(|&&t| t != NONE).count()
    }
}

/// Tetrahedron geometry in voxel coordinates: origin vertex and the inverse edge matrix.
pub(crate) struct TetFrame {
    pub origin: Vector3<f64>,
    pub inv_edges: Matrix3<f64>,
}

impl TetFrame {
    pub fn new(p: &[Vector3<f64>; 4]) -> Option<Self> {
        let edges = Matrix3::from_columns(&[p[1] - p[0], p[2] - p[0], p[3] - p[0]]);
        edges.try_inverse().map(|inv_edges| Self { origin: p[0], inv_edges })
    }

    #[inline]
    pub fn barycentric(&self, x: &Vector3<f64>) -> [f64; 4] {
        let l = self.inv_edges * (x - self.origin);
        [1.0 - l.x - l.y - l.z, l.x, l.y, l.z]
    }

    /// Spatial gradients (voxel coordinates) of the four barycentric coordinates.
    pub fn gradients(&self) -> [Vector3<f64>; 4] {
        let r = |k: usize| Vector3::new(self.inv_edges[(k, 0)], self.inv_edges[(k, 1)], self.inv_edges[(k, 2)]);
        let (g1, g2, g3) = (r(0), r(1), r(2));
        [-(g1 + g2 + g3), g1, g2, g3]
    }
}

pub(crate) fn vertices_in_voxel_space(mesh: &AtlasMesh, grid: &VolumeGrid) -> Vec<Vector3<f64>> {
    mesh.vertices.iter().map(|v| grid.world_to_voxel(v)).collect()
}

/// Locate every voxel center of `grid` in the deformed mesh. Ties on shared
/// faces go to the lowest tetrahedron index.
pub fn rasterize(mesh: &AtlasMesh, grid: &VolumeGrid) -> Result<Rasterization> {
    let n = grid.n_voxels();
    let mut tet_of = vec![NONE; n];
    let mut verts = vec![[0u32; 4]; n];
    let mut weights = vec![[0.0; 4]; n];
    let vox = vertices_in_voxel_space(mesh, grid);
    let dims = grid.dims();
    let orientation = grid.affine().fixed_view::<3, 3>(0, 0).determinant().signum();

    for (t, tet) in mesh.tets.iter().enumerate() {
        let world_vol = signed_volume(&mesh.vertices, tet);
        if !(world_vol > 0.0) {
            return Err(Error::FoldedMesh { tet: t, volume: world_vol });
        }
        let p = [vox[tet[0]], vox[tet[1]], vox[tet[2]], vox[tet[3]]];
        debug_assert!(signed_volume(&p, &[0, 1, 2, 3]) * orientation > 0.0);
        let frame = match TetFrame::new(&p) {
            Some(f) => f,
            None => return Err(Error::FoldedMesh { tet: t, volume: world_vol }),
        };
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut empty = false;
        for a in 0..3 {
            let min = p.iter().map(|v| v[a]).fold(f64::INFINITY, f64::min);
            let max = p.iter().map(|v| v[a]).fold(f64::NEG_INFINITY, f64::max);
            let l = (min - INSIDE_TOL).ceil().max(0.0);
            let h = (max + INSIDE_TOL).floor().min(dims[a] as f64 - 1.0);
            if h < l {
                empty = true;
                break;
            }
            lo[a] = l as usize;
            hi[a] = h as usize;
        }
        if empty {
            continue;
        }
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let i = grid.index(x, y, z);
                    if tet_of[i] != NONE {
                        continue;
                    }
                    let w = frame.barycentric(&Vector3::new(x as f64, y as f64, z as f64));
                    if w.iter().all(|&b| b >= -INSIDE_TOL) {
                        let mut w = w.map(|b| b.max(0.0));
                        let s: f64 = w.iter().sum();
                        w.iter_mut().for_each(|b| *b /= s);
                        tet_of[i] = t as u32;
                        verts[i] = tet.map(|v| v as u32);
                        weights[i] = w;
                    }
                }
            }
        }
    }
    Ok(Rasterization { grid: grid.clone(), tet: tet_of, verts, weights })
}
