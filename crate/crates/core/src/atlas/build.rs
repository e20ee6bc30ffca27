use nalgebra::Vector3;

use super::{signed_volume, AtlasMesh, DEFAULT_STIFFNESS};
use crate::error::{Error, Result};
use crate::volume::{LabelMap, LesionMask, VolumeGrid};

/// Corner offsets of the six tetrahedra sharing the main diagonal of a unit cell.
const KUHN: [[[usize; 3]; 4]; 6] = [
    [[0, 0, 0], [1, 0, 0], [1, 1, 0], [1, 1, 1]],
    [[0, 0, 0], [1, 0, 0], [1, 0, 1], [1, 1, 1]],
    [[0, 0, 0], [0, 1, 0], [1, 1, 0], [1, 1, 1]],
    [[0, 0, 0], [0, 1, 0], [0, 1, 1], [1, 1, 1]],
    [[0, 0, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1]],
    [[0, 0, 0], [0, 0, 1], [0, 1, 1], [1, 1, 1]],
];

/// Regular lattice of `res + 1` vertices per axis spanning the voxel centers of
/// `grid`, each cell split into six tetrahedra. Returns world-space vertices.
pub fn regular_tet_mesh(grid: &VolumeGrid, res: [usize; 3]) -> Result<(Vec<Vector3<f64>>, Vec<[usize; 4]>)> {
    let dims = grid.dims();
    for a in 0..3 {
        if res[a] == 0 {
            return Err(Error::InvalidInput("mesh resolution must be >= 1 per axis".into()));
        }
        if dims[a] < 2 {
            return Err(Error::InvalidInput(format!("grid axis {a} has a single voxel; cannot tetrahedralize")));
        }
    }
    let nv = [res[0] + 1, res[1] + 1, res[2] + 1];
    let vid = |x: usize, y: usize, z: usize| x + nv[0] * (y + nv[1] * z);
    let mut verts = Vec::with_capacity(nv[0] * nv[1] * nv[2]);
    for z in 0..nv[2] {
        for y in 0..nv[1] {
            for x in 0..nv[0] {
                let p = [x, y, z];
                let v: [f64; 3] = std::array::from_fn(|a| p[a] as f64 * (dims[a] - 1) as f64 / res[a] as f64);
                verts.push(grid.voxel_to_world(v));
            }
        }
    }
    let mut tets = Vec::with_capacity(6 * res[0] * res[1] * res[2]);
    for z in 0..res[2] {
        for y in 0..res[1] {
            for x in 0..res[0] {
                for pattern in &KUHN {
                    let mut t = pattern.map(|o| vid(x + o[0], y + o[1], z + o[2]));
                    if signed_volume(&verts, &t) < 0.0 {
                        t.swap(2, 3);
                    }
                    tets.push(t);
                }
            }
        }
    }
    Ok((verts, tets))
}

/// Estimate an atlas from pre-aligned training segmentations.
///
/// Every voxel votes for its nearest lattice vertex; label and lesion
/// frequencies at each vertex get one pseudo-count per outcome.
pub fn build_atlas(label_maps: &[LabelMap], lesion_masks: &[LesionMask], mesh_resolution: [usize; 3]) -> Result<AtlasMesh> {
    let first = label_maps
        .first()
        .ok_or_else(|| Error::InvalidInput("atlas training set is empty".into()))?;
    let grid = first.grid().clone();
    for lm in label_maps {
        grid.check_same(lm.grid(), "training label map")?;
    }
    for m in lesion_masks {
        grid.check_same(m.grid(), "training lesion mask")?;
    }
    let k = label_maps.iter().map(|l| l.max_label() as usize).max().unwrap_or(1);
    let (verts, tets) = regular_tet_mesh(&grid, mesh_resolution)?;
    let j = verts.len();
    let dims = grid.dims();
    let nv = [mesh_resolution[0] + 1, mesh_resolution[1] + 1];
    let nearest: Vec<usize> = (0..grid.n_voxels())
        .map(|i| {
            let c = grid.coords(i);
            let v: [usize; 3] = std::array::from_fn(|a| {
                let t = c[a] as f64 * mesh_resolution[a] as f64 / (dims[a] - 1) as f64;
                t.round() as usize
            });
            v[0] + nv[0] * (v[1] + nv[1] * v[2])
        })
        .collect();

    let mut label_counts = vec![0u64; j * k];
    let mut voxel_counts = vec![0u64; j];
    for lm in label_maps {
        for (i, &l) in lm.labels().iter().enumerate() {
            let v = nearest[i];
            label_counts[v * k + (l as usize - 1)] += 1;
            voxel_counts[v] += 1;
        }
    }
    let mut lesion_hits = vec![0u64; j];
    let mut lesion_total = vec![0u64; j];
    for m in lesion_masks {
        for (i, &z) in m.mask().iter().enumerate() {
            let v = nearest[i];
            lesion_total[v] += 1;
            if z {
                lesion_hits[v] += 1;
            }
        }
    }
    let mut alpha = vec![0.0; j * k];
    for v in 0..j {
        let denom = (voxel_counts[v] + k as u64) as f64;
        for l in 0..k {
            alpha[v * k + l] = (label_counts[v * k + l] + 1) as f64 / denom;
        }
    }
    let beta = (0..j).map(|v| (lesion_hits[v] + 1) as f64 / (lesion_total[v] + 2) as f64).collect();
    AtlasMesh::new(verts, tets, alpha, beta, k, DEFAULT_STIFFNESS)
}
