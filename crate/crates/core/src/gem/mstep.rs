use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::SoftAssignments;
use crate::error::{Error, Result};
use crate::likelihood::{AppearanceParams, BiasBasis, Component};
use crate::volume::MultiContrastImage;

/// Components whose total responsibility falls below this keep their old parameters.
pub(crate) const VANISHING: f64 = 1e-8;

/// Covariance ridge: `1e-6` times the mean per-contrast data variance.
pub fn covariance_ridge(image: &MultiContrastImage) -> f64 {
    let n = image.n_contrasts();
    let count = image.n_voxels() as f64;
    let mut total = 0.0;
    for c in 0..n {
        let ch = image.channel(c);
        let mean = ch.iter().sum::<f64>() / count;
        total += ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
    }
    let var = total / n as f64;
    1e-6 * if var > 0.0 { var } else { 1.0 }
}

/// Weighted moments of bias-corrected intensities for one component;
/// `scatter` is unnormalized and centred on `mean`.
#[derive(Debug, Clone)]
pub(crate) struct Moments {
    pub n: f64,
    pub mean: DVector<f64>,
    pub scatter: DMatrix<f64>,
}

pub(crate) fn moments(image: &MultiContrastImage, field: &[f64], w: &SoftAssignments, c: usize) -> Moments {
    weighted_moments(image, Some(field), |i| w.get(i, c))
}

/// Moments of the raw intensities under arbitrary voxel weights.
pub(crate) fn moments_from_weights(image: &MultiContrastImage, weights: &[f64]) -> Moments {
    weighted_moments(image, None, |i| weights[i])
}

fn weighted_moments(image: &MultiContrastImage, field: Option<&[f64]>, weight: impl Fn(usize) -> f64) -> Moments {
    let nc = image.n_contrasts();
    let corrected = |i: usize, n: usize| image.voxel(i)[n] - field.map_or(0.0, |f| f[i * nc + n]);
    let mut total = 0.0;
    let mut sum = DVector::zeros(nc);
    let mut r = vec![0.0; nc];
    for i in 0..image.n_voxels() {
        let wi = weight(i);
        if wi == 0.0 {
            continue;
        }
        total += wi;
        for n in 0..nc {
            sum[n] += wi * corrected(i, n);
        }
    }
    let mean = if total > 0.0 { sum / total } else { DVector::zeros(nc) };
    let mut scatter = DMatrix::zeros(nc, nc);
    for i in 0..image.n_voxels() {
        let wi = weight(i);
        if wi == 0.0 {
            continue;
        }
        for n in 0..nc {
            r[n] = corrected(i, n) - mean[n];
        }
        for a in 0..nc {
            for b in 0..=a {
                scatter[(a, b)] += wi * r[a] * r[b];
            }
        }
    }
    for a in 0..nc {
        for b in 0..a {
            scatter[(b, a)] = scatter[(a, b)];
        }
    }
    Moments { n: total, mean, scatter }
}

fn zero_off_diagonal(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for a in 0..n {
        for b in 0..n {
            if a != b {
                m[(a, b)] = 0.0;
            }
        }
    }
}

fn check_assignments(image: &MultiContrastImage, w: &SoftAssignments, params: &AppearanceParams) -> Result<()> {
    if w.n_voxels() != image.n_voxels() || w.n_cols() != params.components.len() {
        return Err(Error::InvalidInput("responsibilities do not match image and components".into()));
    }
    Ok(())
}

/// Closed-form updates of every component mean, covariance and mixture weight
/// given responsibilities and the current bias field.
pub fn m_step_gaussians(
    image: &MultiContrastImage,
    basis: &BiasBasis,
    w: &SoftAssignments,
    params: &AppearanceParams,
    ridge: f64,
) -> Result<AppearanceParams> {
    check_assignments(image, w, params)?;
    let field = basis.field(&params.bias_coeffs);
    let stats: Vec<Moments> = (0..params.components.len()).into_par_iter().map(|c| moments(image, &field, w, c)).collect();
    let nc = image.n_contrasts();
    let mut components = Vec::with_capacity(stats.len());
    for (c, (old, m)) in params.components.iter().zip(&stats).enumerate() {
        if m.n <= VANISHING {
            log::warn!("component {c} (class {}) has vanished; keeping its previous parameters", old.class);
            components.push(old.clone());
            continue;
        }
        let mut cov = &m.scatter / m.n;
        if params.diagonal_mode {
            zero_off_diagonal(&mut cov);
        }
        cov += DMatrix::identity(nc, nc) * ridge;
        components.push(Component { class: old.class, weight: old.weight, mean: m.mean.clone(), cov });
    }
    update_mixture_weights(&mut components, &stats);
    AppearanceParams::new(components, params.bias_coeffs.clone(), params.diagonal_mode)
}

fn update_mixture_weights(components: &mut [Component], stats: &[Moments]) {
    let n_classes = components.iter().map(|c| c.class + 1).max().unwrap_or(0);
    let mut totals = vec![0.0; n_classes];
    for (c, m) in components.iter().zip(stats) {
        totals[c.class] += m.n;
    }
    for (c, m) in components.iter_mut().zip(stats) {
        if totals[c.class] > VANISHING {
            c.weight = m.n / totals[c.class];
        }
    }
}

fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Numerical(format!("{what} is not positive definite")))
}

fn solve_spd(lhs: DMatrix<f64>, rhs: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    match lhs.clone().cholesky() {
        Some(ch) => Ok(ch.solve(rhs)),
        None => {
            let ev = lhs.symmetric_eigenvalues();
            let max = ev.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let min = ev.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
            Err(Error::Singular(format!("{what} system is singular (condition number {:.3e})", max / min)))
        }
    }
}

/// `A^T diag(s) A`.
fn weighted_gram(a: &DMatrix<f64>, s: &DVector<f64>) -> DMatrix<f64> {
    let mut sa = a.clone();
    for mut col in sa.column_iter_mut() {
        col.component_mul_assign(s);
    }
    a.tr_mul(&sa)
}

/// Solve the block system for the bias coefficients given responsibilities and
/// Gaussians. Returns the `N x P` coefficient matrix.
pub fn m_step_bias(image: &MultiContrastImage, basis: &BiasBasis, w: &SoftAssignments, params: &AppearanceParams) -> Result<DMatrix<f64>> {
    check_assignments(image, w, params)?;
    let n = image.n_contrasts();
    let p = basis.n_basis();
    let n_vox = image.n_voxels();
    let a = basis.matrix();
    let precs = params
        .components
        .iter()
        .map(|c| spd_inverse(&c.cov, "component covariance"))
        .collect::<Result<Vec<_>>>()?;
    let means: Vec<&DVector<f64>> = params.components.iter().map(|c| &c.mean).collect();

    // s^{mk}_i and the right-hand side sum_k s^{mk}_i r^{mk}_i, written without the division
    let weights = |m: usize, k: usize| -> DVector<f64> {
        DVector::from_fn(n_vox, |i, _| {
            let row = w.row(i);
            row.iter().zip(&precs).map(|(wi, pr)| wi * pr[(m, k)]).sum()
        })
    };
    let target = |m: usize, diag_only: bool| -> DVector<f64> {
        DVector::from_fn(n_vox, |i, _| {
            let d = image.voxel(i);
            let row = w.row(i);
            let mut t = 0.0;
            for (c, (&wi, pr)) in row.iter().zip(&precs).enumerate() {
                if wi == 0.0 {
                    continue;
                }
                if diag_only {
                    t += wi * pr[(m, m)] * (d[m] - means[c][m]);
                } else {
                    for k in 0..n {
                        t += wi * pr[(m, k)] * (d[k] - means[c][k]);
                    }
                }
            }
            t
        })
    };

    let mut coeffs = DMatrix::zeros(n, p);
    if params.diagonal_mode {
        let rows: Vec<Result<DVector<f64>>> = (0..n)
            .into_par_iter()
            .map(|m| {
                let lhs = weighted_gram(a, &weights(m, m));
                let rhs = a.tr_mul(&target(m, true));
                solve_spd(lhs, &rhs, &format!("bias (contrast {m})"))
            })
            .collect();
        for (m, r) in rows.into_iter().enumerate() {
            coeffs.row_mut(m).copy_from(&r?.transpose());
        }
        return Ok(coeffs);
    }

    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|m| (m..n).map(move |k| (m, k))).collect();
    let blocks: Vec<DMatrix<f64>> = pairs.par_iter().map(|&(m, k)| weighted_gram(a, &weights(m, k))).collect();
    let mut lhs = DMatrix::zeros(n * p, n * p);
    for (&(m, k), blk) in pairs.iter().zip(&blocks) {
        lhs.view_mut((m * p, k * p), (p, p)).copy_from(blk);
        if m != k {
            lhs.view_mut((k * p, m * p), (p, p)).copy_from(&blk.transpose());
        }
    }
    let mut rhs = DVector::zeros(n * p);
    for m in 0..n {
        rhs.rows_mut(m * p, p).copy_from(&a.tr_mul(&target(m, false)));
    }
    let sol = solve_spd(lhs, &rhs, "bias")?;
    for m in 0..n {
        for q in 0..p {
            coeffs[(m, q)] = sol[m * p + q];
        }
    }
    Ok(coeffs)
}

/// Coupling of the lesion Gaussian to the white-matter Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LesionCoupling {
    pub wm_class: usize,
    pub lesion_class: usize,
    /// Effective pseudo-voxel count (already rescaled for voxel volume).
    pub nu: f64,
    pub kappa: f64,
}

fn single_component(params: &AppearanceParams, class: usize, what: &str) -> Result<usize> {
    let idx: Vec<usize> = params.class_components(class).map(|(i, _)| i).collect();
    match idx.as_slice() {
        [one] => Ok(*one),
        _ => Err(Error::Config(format!("{what} class must be a single Gaussian, found {} components", idx.len()))),
    }
}

fn ln_det(l: &DMatrix<f64>) -> f64 {
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}

/// Objective in `Sigma_WM` with the lesion parameters profiled out (constants dropped).
fn profiled_wm_objective(sigma: &DMatrix<f64>, s: &DMatrix<f64>, psi: &DMatrix<f64>, n_total: f64, n_les_nu: f64, kappa_nu: f64) -> f64 {
    let Some(ch) = sigma.clone().cholesky() else {
        return f64::NEG_INFINITY;
    };
    let l = ch.l();
    let linv = l.clone().try_inverse().expect("cholesky factor is invertible");
    let trace = (&linv * s * linv.transpose()).trace();
    let x = &linv * psi * linv.transpose() / kappa_nu;
    let x = (&x + x.transpose()) * 0.5;
    let coupling: f64 = x.symmetric_eigenvalues().iter().map(|v| v.max(0.0).ln_1p()).sum();
    -0.5 * n_total * ln_det(&l) - 0.5 * trace - 0.5 * n_les_nu * coupling
}

fn sym_sqrt(m: &DMatrix<f64>, inverse: bool) -> DMatrix<f64> {
    let e = m.clone().symmetric_eigen();
    let d = e.eigenvalues.map(|v| if inverse { 1.0 / v.max(0.0).sqrt() } else { v.max(0.0).sqrt() });
    &e.eigenvectors * DMatrix::from_diagonal(&d) * e.eigenvectors.transpose()
}

/// Appearance updates with the white-matter and lesion Gaussians coupled by
/// the normal-inverse-Wishart prior. Other classes use the plain updates.
pub fn m_step_gaussians_coupled(
    image: &MultiContrastImage,
    basis: &BiasBasis,
    w: &SoftAssignments,
    params: &AppearanceParams,
    coupling: &LesionCoupling,
    ridge: f64,
) -> Result<AppearanceParams> {
    let mut out = m_step_gaussians(image, basis, w, params, ridge)?;
    if coupling.nu == 0.0 {
        return Ok(out);
    }
    let wm = single_component(params, coupling.wm_class, "white-matter")?;
    let les = single_component(params, coupling.lesion_class, "lesion")?;
    let nc = image.n_contrasts();
    let ncf = nc as f64;
    let (nu, kappa) = (coupling.nu, coupling.kappa);
    let field = basis.field(&params.bias_coeffs);
    let mw = moments(image, &field, w, wm);
    let ml = moments(image, &field, w, les);
    let old_wm = &params.components[wm];
    let old_les = &params.components[les];
    let (n_wm, n_les) = (mw.n, ml.n);
    let a = if n_les > 0.0 { nu * n_les / (nu + n_les) } else { 0.0 };

    let (mu_wm, sigma_wm, psi) = if n_wm <= VANISHING {
        log::warn!("white-matter class has vanished; keeping its previous parameters");
        let diff = &ml.mean - &old_wm.mean;
        let psi = &ml.scatter + &diff * diff.transpose() * a;
        (old_wm.mean.clone(), old_wm.cov.clone(), psi)
    } else {
        let p_wm = spd_inverse(&old_wm.cov, "white-matter covariance")?;
        let p_les = spd_inverse(&old_les.cov, "lesion covariance")?;
        let lhs = &p_wm * n_wm + &p_les * a;
        let rhs = &p_wm * &mw.mean * n_wm + &p_les * &ml.mean * a;
        let mu_wm = solve_spd(lhs, &rhs, "white-matter mean")?;

        let dm = &mu_wm - &mw.mean;
        let mut s = &mw.scatter + &dm * dm.transpose() * n_wm + DMatrix::identity(nc, nc) * (n_wm * ridge);
        let dl = &ml.mean - &mu_wm;
        let mut psi = &ml.scatter + &dl * dl.transpose() * a;
        if params.diagonal_mode {
            zero_off_diagonal(&mut s);
            zero_off_diagonal(&mut psi);
        }
        let n_total = n_wm + n_les + ncf + 2.0;
        let kappa_nu = kappa * nu;
        let h = |sig: &DMatrix<f64>| profiled_wm_objective(sig, &s, &psi, n_total, n_les + nu, kappa_nu);

        // profiled fixed point, accepted only if it improves the profiled objective
        let mut cand = old_wm.cov.clone();
        for _ in 0..50 {
            let Some(ch) = (&psi + &cand * kappa_nu).cholesky() else { break };
            let z = ch.solve(&cand);
            let t = &psi * z * (n_les + nu);
            let next = (&s + (&t + t.transpose()) * 0.5) / n_total;
            let delta = (&next - &cand).norm() / cand.norm();
            cand = next;
            if delta < 1e-13 {
                break;
            }
        }
        if params.diagonal_mode {
            zero_off_diagonal(&mut cand);
        }
        let sigma_wm = if h(&cand) >= h(&old_wm.cov) {
            cand
        } else {
            // conditional maximizer with the current lesion covariance
            let b_half = sym_sqrt(&p_les, false);
            let b_inv_half = sym_sqrt(&old_les.cov, false);
            let t = &b_half * &s * &b_half;
            let e = ((&t + t.transpose()) * 0.5).symmetric_eigen();
            let lin = n_wm - (nu - ncf - 2.0);
            let x = e.eigenvalues.map(|tv| {
                let disc = (lin * lin + 4.0 * kappa_nu * tv).sqrt();
                if lin >= 0.0 {
                    2.0 * tv / (lin + disc)
                } else {
                    (disc - lin) / (2.0 * kappa_nu)
                }
            });
            let xm = &e.eigenvectors * DMatrix::from_diagonal(&x) * e.eigenvectors.transpose();
            let mut sig = &b_inv_half * xm * &b_inv_half;
            sig = (&sig + sig.transpose()) * 0.5;
            if params.diagonal_mode {
                zero_off_diagonal(&mut sig);
            }
            sig
        };
        (mu_wm, sigma_wm, psi)
    };

    let mu_les = (&ml.mean * n_les + &mu_wm * nu) / (n_les + nu);
    let mut sigma_les = (&psi + &sigma_wm * (nu * kappa)) / (n_les + nu);
    sigma_les = (&sigma_les + sigma_les.transpose()) * 0.5;
    if params.diagonal_mode {
        zero_off_diagonal(&mut sigma_les);
    }
    out.components[wm].mean = mu_wm;
    out.components[wm].cov = sigma_wm;
    out.components[les].mean = mu_les;
    out.components[les].cov = sigma_les;
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::eval_bias_basis;
    use crate::volume::{Contrast, VolumeGrid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(dims: [usize; 3], n: usize, rng: &mut ChaCha8Rng) -> MultiContrastImage {
        let g = VolumeGrid::new(dims, [1.0; 3]).unwrap();
        let data = (0..g.n_voxels() * n).map(|_| rng.random_range(-1.0..2.0)).collect();
        MultiContrastImage::new(g, data, vec![Contrast::Other; n], true).unwrap()
    }

    fn random_w(n_vox: usize, k: usize, rng: &mut ChaCha8Rng) -> SoftAssignments {
        let mut w = Vec::new();
        for _ in 0..n_vox {
            let row: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = row.iter().sum();
            w.extend(row.iter().map(|v| v / s));
        }
        SoftAssignments::new(n_vox, k, w).unwrap()
    }

    fn params(n: usize, k: usize, p: usize, diagonal: bool, rng: &mut ChaCha8Rng) -> AppearanceParams {
        let comps = (0..k)
            .map(|c| {
                let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.5..0.5));
                let mut cov = &a * a.transpose() + DMatrix::identity(n, n) * 0.3;
                if diagonal {
                    zero_off_diagonal(&mut cov);
                }
                Component { class: c, weight: 1.0, mean: DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)), cov }
            })
            .collect();
        AppearanceParams::new(comps, DMatrix::from_fn(n, p, |_, _| rng.random_range(-0.2..0.2)), diagonal).unwrap()
    }

    #[test]
    fn one_hot_gives_sample_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = image([5, 4, 1], 2, &mut rng);
        let basis = eval_bias_basis(img.grid(), [1, 1, 1]).unwrap();
        let w = SoftAssignments::new(20, 2, (0..20).flat_map(|_| [1.0, 0.0]).collect()).unwrap();
        let p = params(2, 2, 1, false, &mut rng);
        let mut p0 = p.clone();
        p0.bias_coeffs.fill(0.0);
        let out = m_step_gaussians(&img, &basis, &w, &p0, 0.0).unwrap();
        let mean: Vec<f64> = (0..2).map(|c| img.channel(c).iter().sum::<f64>() / 20.0).collect();
        for c in 0..2 {
            assert!((out.components[0].mean[c] - mean[c]).abs() < 1e-12);
        }
        let cov01 = (0..20).map(|i| (img.voxel(i)[0] - mean[0]) * (img.voxel(i)[1] - mean[1])).sum::<f64>() / 20.0;
        assert!((out.components[0].cov[(0, 1)] - cov01).abs() < 1e-12);
        // vanished component keeps its parameters
        assert_eq!(out.components[1], p0.components[1]);
    }

    #[test]
    fn brute_force_weighted_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = image([3, 3, 2], 3, &mut rng);
        let basis = eval_bias_basis(img.grid(), [2, 2, 1]).unwrap();
        let p = params(3, 3, 4, false, &mut rng);
        let w = random_w(18, 3, &mut rng);
        let ridge = 1e-6;
        let out = m_step_gaussians(&img, &basis, &w, &p, ridge).unwrap();
        for k in 0..3 {
            let mut nk = 0.0;
            let mut m = DVector::zeros(3);
            let corrected: Vec<DVector<f64>> = (0..18)
                .map(|i| DVector::from_column_slice(img.voxel(i)) - &p.bias_coeffs * DVector::from_column_slice(basis.row(i)))
                .collect();
            for i in 0..18 {
                nk += w.get(i, k);
                m += &corrected[i] * w.get(i, k);
            }
            m /= nk;
            let mut v = DMatrix::zeros(3, 3);
            for i in 0..18 {
                let r = &corrected[i] - &m;
                v += &r * r.transpose() * w.get(i, k);
            }
            v = v / nk + DMatrix::identity(3, 3) * ridge;
            assert!((&out.components[k].mean - m).norm() < 1e-12);
            assert!((&out.components[k].cov - v).norm() < 1e-12);
        }
    }

    #[test]
    fn scalar_bias_is_weighted_residual_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = image([6, 1, 1], 1, &mut rng);
        let basis = eval_bias_basis(img.grid(), [1, 1, 1]).unwrap();
        let p = params(1, 1, 1, false, &mut rng);
        let ws: Vec<f64> = (0..6).map(|_| rng.random_range(0.1..1.0)).collect();
        let w = SoftAssignments::new(6, 1, ws.clone()).unwrap();
        let c = m_step_bias(&img, &basis, &w, &p).unwrap();
        let mu = p.components[0].mean[0];
        let expect = (0..6).map(|i| ws[i] * (img.voxel(i)[0] - mu)).sum::<f64>() / ws.iter().sum::<f64>();
        assert!((c[(0, 0)] - expect).abs() < 1e-12);
    }

    #[test]
    fn diagonal_mode_decouples_contrasts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = image([4, 4, 3], 2, &mut rng);
        let basis = eval_bias_basis(img.grid(), [2, 2, 2]).unwrap();
        let p = params(2, 2, 8, true, &mut rng);
        let w = random_w(48, 2, &mut rng);
        let joint = m_step_bias(&img, &basis, &w, &p).unwrap();
        for m in 0..2 {
            let single = MultiContrastImage::from_channels(img.grid().clone(), vec![img.channel(m)], vec![Contrast::Other], true).unwrap();
            let comps = p
                .components
                .iter()
                .map(|c| Component {
                    class: c.class,
                    weight: c.weight,
                    mean: DVector::from_element(1, c.mean[m]),
                    cov: DMatrix::from_element(1, 1, c.cov[(m, m)]),
                })
                .collect();
            let ps = AppearanceParams::new(comps, DMatrix::zeros(1, 8), true).unwrap();
            let c = m_step_bias(&single, &basis, &w, &ps).unwrap();
            assert_eq!(c.row(0), joint.row(m));
        }
    }

    #[test]
    fn full_and_diagonal_agree_for_diagonal_covariances() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = image([4, 3, 3], 2, &mut rng);
        let basis = eval_bias_basis(img.grid(), [2, 2, 1]).unwrap();
        let p = params(2, 3, 4, true, &mut rng);
        let w = random_w(36, 3, &mut rng);
        let diag = m_step_bias(&img, &basis, &w, &p).unwrap();
        let mut full = p.clone();
        full.diagonal_mode = false;
        let c = m_step_bias(&img, &basis, &w, &full).unwrap();
        assert!((c - diag).norm() < 1e-10);
    }

    #[test]
    fn singular_bias_system_reports_condition() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = image([4, 1, 1], 1, &mut rng);
        let basis = eval_bias_basis(img.grid(), [2, 1, 1]).unwrap();
        let p = params(1, 1, 2, false, &mut rng);
        let w = SoftAssignments::new(4, 1, vec![0.0; 4]).unwrap();
        match m_step_bias(&img, &basis, &w, &p) {
            Err(Error::Singular(msg)) => assert!(msg.contains("condition")),
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    fn coupled_setup(seed: u64, nu: f64) -> (MultiContrastImage, BiasBasis, SoftAssignments, AppearanceParams, LesionCoupling) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = image([5, 4, 3], 2, &mut rng);
        let basis = eval_bias_basis(img.grid(), [1, 1, 1]).unwrap();
        let mut p = params(2, 3, 1, false, &mut rng);
        p.bias_coeffs.fill(0.0);
        let w = random_w(60, 3, &mut rng);
        (img, basis, w, p, LesionCoupling { wm_class: 1, lesion_class: 2, nu, kappa: 3.0 })
    }

    fn bound(img: &MultiContrastImage, w: &SoftAssignments, p: &AppearanceParams, c: &LesionCoupling) -> f64 {
        let g = p.prepared();
        let mut q = 0.0;
        for i in 0..img.n_voxels() {
            for k in 0..p.components.len() {
                q += w.get(i, k) * g[k].log_density(img.voxel(i));
            }
        }
        let (wm, les) = (&p.components[c.wm_class], &p.components[c.lesion_class]);
        q + crate::likelihood::niw_log_density(&les.mean, &les.cov, &wm.mean, &wm.cov, c.nu, c.kappa).unwrap()
    }

    #[test]
    fn coupled_update_improves_bound() {
        for seed in 0..20 {
            let (img, basis, w, p, c) = coupled_setup(seed, 40.0);
            let before = bound(&img, &w, &p, &c);
            let out = m_step_gaussians_coupled(&img, &basis, &w, &p, &c, 0.0).unwrap();
            let after = bound(&img, &w, &out, &c);
            assert!(after >= before - 1e-10 * before.abs(), "seed {seed}: {before} -> {after}");
            // a second application keeps improving
            let again = m_step_gaussians_coupled(&img, &basis, &w, &out, &c, 0.0).unwrap();
            assert!(bound(&img, &w, &again, &c) >= after - 1e-10 * after.abs());
        }
    }

    #[test]
    fn flat_prior_reduces_to_plain_updates() {
        let (img, basis, w, p, c) = coupled_setup(3, 0.0);
        let a = m_step_gaussians_coupled(&img, &basis, &w, &p, &c, 1e-6).unwrap();
        let b = m_step_gaussians(&img, &basis, &w, &p, 1e-6).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn huge_nu_ties_lesion_to_white_matter() {
        let (img, basis, w, p, c) = coupled_setup(4, 1e12);
        let out = m_step_gaussians_coupled(&img, &basis, &w, &p, &c, 0.0).unwrap();
        let (wm, les) = (&out.components[1], &out.components[2]);
        assert!((&les.mean - &wm.mean).norm() < 1e-6 * wm.mean.norm());
        assert!((&les.cov - &wm.cov * 3.0).norm() < 1e-6 * (&wm.cov * 3.0).norm());
    }
}
