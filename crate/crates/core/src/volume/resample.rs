use nalgebra::{Matrix4, Vector4};

use super::{ProbabilityMap, VolumeGrid};
use crate::error::{Error, Result};

const SNAP: f64 = 1e-9;

/// Trilinear resampling of `src` onto `target`.
///
/// `affine` maps target world coordinates to source world coordinates (a
/// pull-back transform). Samples outside the source lattice read as 0.
pub fn resample_affine(src: &ProbabilityMap, target: &VolumeGrid, affine: &Matrix4<f64>) -> Result<ProbabilityMap> {
    if affine.iter().any(|v| !v.is_finite()) || affine.determinant().abs() < 1e-300 || affine.try_inverse().is_none() {
        return Err(Error::Singular("resampling affine is not invertible".into()));
    }
    let src_inv = src.grid().affine().try_inverse().expect("validated grid affine");
    let voxel_map = src_inv * affine * target.affine();
    let [nx, ny, nz] = target.dims();
    let mut out = Vec::with_capacity(target.n_voxels());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = voxel_map * Vector4::new(x as f64, y as f64, z as f64, 1.0);
                out.push(trilinear(src, [snap(p.x), snap(p.y), snap(p.z)]).clamp(0.0, 1.0));
            }
        }
    }
    ProbabilityMap::new(target.clone(), out)
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r
    } else {
        v
    }
}

/// Zero-padded trilinear interpolation at a continuous voxel coordinate.
pub(crate) fn trilinear(src: &ProbabilityMap, p: [f64; 3]) -> f64 {
    let grid = src.grid();
    let dims = grid.dims();
    let probs = src.probs();
    let base = [p[0].floor(), p[1].floor(), p[2].floor()];
    let frac = [p[0] - base[0], p[1] - base[1], p[2] - base[2]];
    let mut acc = 0.0;
    for dz in 0..2 {
        let wz = if dz == 0 { 1.0 - frac[2] } else { frac[2] };
        if wz == 0.0 {
            continue;
        }
        let iz = base[2] as i64 + dz;
        if iz < 0 || iz >= dims[2] as i64 {
            continue;
        }
        for dy in 0..2 {
            let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
            if wy == 0.0 {
                continue;
            }
            let iy = base[1] as i64 + dy;
            if iy < 0 || iy >= dims[1] as i64 {
                continue;
            }
            for dx in 0..2 {
                let wx = if dx == 0 { 1.0 - frac[0] } else { frac[0] };
                if wx == 0.0 {
                    continue;
                }
                let ix = base[0] as i64 + dx;
                if ix < 0 || ix >= dims[0] as i64 {
                    continue;
                }
                acc += wx * wy * wz * probs[grid.index(ix as usize, iy as usize, iz as usize)];
            }
        }
    }
    acc
}
