use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use super::estep::{check_inputs, BLOCK};
use super::lbfgs::maximize;
use super::{ClassPrior, DeformationConfig};
use crate::atlas::{deformation_log_prior, rasterize, vertices_in_voxel_space, AtlasMesh, TetFrame};
use crate::error::{Error, Result};
use crate::likelihood::{AppearanceParams, BiasBasis};
use crate::volume::{MultiContrastImage, VolumeGrid};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformationOutcome {
    pub start_objective: f64,
    pub objective: f64,
    pub steps: usize,
}

/// Class likelihoods with appearance fixed, scaled per voxel:
/// `lik[i, g] = sum_{c in g} pi_c N(d_i | .) / exp(shift[i])`.
struct ClassLikelihoods {
    shift: Vec<f64>,
    lik: Vec<f64>,
    n_classes: usize,
}

fn class_likelihoods(image: &MultiContrastImage, basis: &BiasBasis, params: &AppearanceParams, n_classes: usize) -> ClassLikelihoods {
    let n = image.n_contrasts();
    let n_vox = image.n_voxels();
    let field = basis.field(&params.bias_coeffs);
    let gauss = params.prepared();
    let mut shift = vec![0.0; n_vox];
    let mut lik = vec![0.0; n_vox * n_classes];
    shift.par_chunks_mut(BLOCK).zip(lik.par_chunks_mut(BLOCK * n_classes)).enumerate().for_each(|(b, (sh, lk))| {
        let mut lp = vec![0.0; gauss.len()];
        for (r, (s, row)) in sh.iter_mut().zip(lk.chunks_exact_mut(n_classes)).enumerate() {
            let i = b * BLOCK + r;
            let d = image.voxel(i);
            let f = &field[i * n..(i + 1) * n];
            let mut max = f64::NEG_INFINITY;
            for (c, comp) in params.components.iter().enumerate() {
                lp[c] = comp.weight.ln() + gauss[c].log_density_shifted(d, f);
                max = max.max(lp[c]);
            }
            for (c, comp) in params.components.iter().enumerate() {
                row[comp.class] += (lp[c] - max).exp();
            }
            *s = max;
        }
    });
    ClassLikelihoods { shift, lik, n_classes }
}

/// Linear part of the world-to-voxel map.
fn world_to_voxel_linear(grid: &VolumeGrid) -> Matrix3<f64> {
    let inv = grid.affine().try_inverse().expect("grid affine is validated invertible");
    inv.fixed_view::<3, 3>(0, 0).into_owned()
}

/// Objective and world-space vertex gradient; `-inf` for a folded mesh.
fn evaluate(mesh: &AtlasMesh, grid: &VolumeGrid, cache: &ClassLikelihoods, prior: &ClassPrior, want_grad: bool) -> Result<(f64, Vec<Vector3<f64>>)> {
    let dp = deformation_log_prior(mesh);
    if !dp.value.is_finite() {
        return Ok((f64::NEG_INFINITY, Vec::new()));
    }
    let rast = match rasterize(mesh, grid) {
        Ok(r) => r,
        Err(Error::FoldedMesh { .. }) => return Ok((f64::NEG_INFINITY, Vec::new())),
        Err(e) => return Err(e),
    };
    let g = cache.n_classes;
    let table = prior.table();
    let outside = prior.outside();
    let frames: Vec<[Vector3<f64>; 4]> = if want_grad {
        let vox = vertices_in_voxel_space(mesh, grid);
        mesh.tets()
            .iter()
            .map(|t| TetFrame::new(&t.map(|j| vox[j])).map(|f| f.gradients()).unwrap_or([Vector3::zeros(); 4]))
            .collect()
    } else {
        Vec::new()
    };

    let n_vox = grid.n_voxels();
    let mut q = if want_grad { vec![Vector3::zeros(); n_vox] } else { Vec::new() };
    let sums: Vec<f64> = if want_grad {
        q.par_chunks_mut(BLOCK).enumerate().map(|(b, qs)| block_value(b, Some(qs), &rast, cache, table, outside, &frames, g)).collect()
    } else {
        (0..n_vox.div_ceil(BLOCK)).into_par_iter().map(|b| block_value(b, None, &rast, cache, table, outside, &frames, g)).collect()
    };
    let data: f64 = sums.iter().sum();
    let value = data + dp.value;
    if !want_grad || !value.is_finite() {
        return Ok((value, Vec::new()));
    }

    // ordered scatter keeps the reduction independent of thread count
    let mut grad_vox = vec![Vector3::zeros(); mesh.n_vertices()];
    for (i, qi) in q.iter().enumerate() {
        if let Some((verts, w)) = rast.cell(i) {
            for (v, wv) in verts.iter().zip(w) {
                grad_vox[*v] -= qi * *wv;
            }
        }
    }
    let mt = world_to_voxel_linear(grid).transpose();
    let grad = grad_vox.iter().zip(&dp.gradient).map(|(gv, gp)| mt * gv + gp).collect();
    Ok((value, grad))
}

#[allow(clippy::too_many_arguments)]
fn block_value(
    b: usize,
    mut qs: Option<&mut [Vector3<f64>]>,
    rast: &crate::atlas::Rasterization,
    cache: &ClassLikelihoods,
    table: &[f64],
    outside: &[f64],
    frames: &[[Vector3<f64>; 4]],
    g: usize,
) -> f64 {
    let start = b * BLOCK;
    let end = (start + BLOCK).min(rast.n_voxels());
    let mut sum = 0.0;
    let mut u = [0.0; 4];
    for i in start..end {
        let lik = &cache.lik[i * g..(i + 1) * g];
        let dens = match rast.cell(i) {
            Some((verts, w)) => {
                let mut dens = 0.0;
                for (a, &v) in verts.iter().enumerate() {
                    let row = &table[v * g..(v + 1) * g];
                    u[a] = lik.iter().zip(row).map(|(l, t)| l * t).sum();
                    dens += w[a] * u[a];
                }
                if let Some(qs) = qs.as_deref_mut() {
                    if dens > 0.0 {
                        let fr = &frames[rast.tet(i).expect("inside voxel")];
                        qs[i - start] = (fr[0] * u[0] + fr[1] * u[1] + fr[2] * u[2] + fr[3] * u[3]) / dens;
                    }
                }
                dens
            }
            None => lik.iter().zip(outside).map(|(l, o)| l * o).sum(),
        };
        sum += cache.shift[i] + dens.ln();
    }
    sum
}

/// `sum_i ln sum_g p(d_i | g) p(g | mesh) + ln p(mesh)` with appearance fixed.
pub fn deformation_objective(
    mesh: &AtlasMesh,
    image: &MultiContrastImage,
    basis: &BiasBasis,
    params: &AppearanceParams,
    prior: &ClassPrior,
) -> Result<f64> {
    let cache = prepare(image, basis, params, prior)?;
    Ok(evaluate(mesh, image.grid(), &cache, prior, false)?.0)
}

fn prepare(image: &MultiContrastImage, basis: &BiasBasis, params: &AppearanceParams, prior: &ClassPrior) -> Result<ClassLikelihoods> {
    let dummy = vec![1.0; image.n_voxels() * prior.n_classes()];
    check_inputs(image, basis, &dummy, params)?;
    if params.components.iter().any(|c| c.class >= prior.n_classes()) {
        return Err(Error::InvalidInput("component class outside the atlas class prior".into()));
    }
    Ok(class_likelihoods(image, basis, params, prior.n_classes()))
}

/// Quasi-Newton ascent of the mesh objective. Hull vertices stay fixed when
/// `pin_boundary` is set. The mesh is only updated on improvement.
pub fn optimize_deformation(
    mesh: &mut AtlasMesh,
    image: &MultiContrastImage,
    basis: &BiasBasis,
    params: &AppearanceParams,
    prior: &ClassPrior,
    config: &DeformationConfig,
    pin_boundary: bool,
) -> Result<DeformationOutcome> {
    let cache = prepare(image, basis, params, prior)?;
    let grid = image.grid();
    let pinned = if pin_boundary { mesh.boundary_vertices() } else { vec![false; mesh.n_vertices()] };
    let x0: Vec<f64> = mesh.vertices().iter().flat_map(|v| [v.x, v.y, v.z]).collect();
    let mut work = mesh.clone();
    let objective = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        work.vertices = x.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect();
        let (v, g) = evaluate(&work, grid, &cache, prior, true)?;
        if !v.is_finite() {
            return Ok((v, Vec::new()));
        }
        let flat = g
            .iter()
            .zip(&pinned)
            .flat_map(|(gv, &p)| if p { [0.0; 3] } else { [gv.x, gv.y, gv.z] })
            .collect();
        Ok((v, flat))
    };
    let out = maximize(objective, x0, config.memory, config.max_steps, config.max_line_search)?;
    if out.value > out.start_value {
        let verts = out.x.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect();
        mesh.set_vertices(verts)?;
    }
    Ok(DeformationOutcome { start_objective: out.start_value, objective: out.value.max(out.start_value), steps: out.steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atlas::build_atlas;
    use crate::gem::initial_params;
    use crate::likelihood::{eval_bias_basis, ClassSharingMap};
    use crate::phantom::{generate, PhantomSpec};

    #[test]
    fn gradient_matches_finite_differences() {
        let spec = PhantomSpec::brain([14, 12, 13], 2, 5).unwrap();
        let p = generate(&spec).unwrap();
        let mut other = spec.clone();
        other.seed = 99;
        let q = generate(&other).unwrap();
        let mut atlas = build_atlas(&[p.labels.clone(), q.labels.clone()], &[], [4, 3, 4]).unwrap();
        // move every vertex off the voxel lattice so no voxel centre sits on a face
        let boundary = atlas.boundary_vertices();
        let mut v = atlas.vertices().to_vec();
        for (j, x) in v.iter_mut().enumerate() {
            let t = j as f64;
            *x += Vector3::new((t * 1.37).sin(), (t * 2.11).cos(), (t * 0.73).sin()) * 0.21;
        }
        atlas.set_vertices(v).unwrap();
        let sharing = ClassSharingMap::identity(4);
        let prior = ClassPrior::from_mesh(&atlas, &sharing).unwrap();
        let basis = eval_bias_basis(p.image.grid(), [1, 1, 1]).unwrap();
        let rast = rasterize(&atlas, p.image.grid()).unwrap();
        let params = initial_params(&p.image, &basis, &prior.interpolate(&rast), &sharing, false, 1e-6).unwrap();
        let cache = prepare(&p.image, &basis, &params, &prior).unwrap();
        let (_, grad) = evaluate(&atlas, p.image.grid(), &cache, &prior, true).unwrap();
        let h = 1e-5;
        let mut checked = 0;
        for j in (0..atlas.n_vertices()).filter(|&j| !boundary[j]) {
            for a in 0..3 {
                let mut m = atlas.clone();
                m.vertices[j][a] += h;
                let fp = evaluate(&m, p.image.grid(), &cache, &prior, false).unwrap().0;
                m.vertices[j][a] -= 2.0 * h;
                let fm = evaluate(&m, p.image.grid(), &cache, &prior, false).unwrap().0;
                let fd = (fp - fm) / (2.0 * h);
                let g = grad[j][a];
                assert!((fd - g).abs() <= 1e-4 * g.abs().max(1.0), "vertex {j} axis {a}: {g} vs {fd}");
                checked += 1;
            }
        }
        assert!(checked > 0);
    }
}
