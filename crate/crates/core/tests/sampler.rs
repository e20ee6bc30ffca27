mod common;

use common::{brain_sharing, phantom_atlas};
use lesionseg::gem::{fit_lesion_augmented, FitConfig};
use lesionseg::likelihood::LesionIntensityPrior;
use lesionseg::phantom::{generate, PhantomSpec};
use lesionseg::rng::counter_rng;
use lesionseg::sampler::{
    final_segmentation, lesion_posterior, sample_inverse_wishart, CandidateRule, LesionModel, Sampler, SamplerConfig,
};
use lesionseg::shape_prior::{Architecture, ShapePriorModel};
use lesionseg::volume::{LesionMask, ProbabilityMap, VolumeGrid};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// Independent multivariate normal log density via an explicit inverse.
fn log_normal(x: &[f64], mu: &DVector<f64>, sigma: &DMatrix<f64>) -> f64 {
    let n = mu.len();
    let d = DVector::from_row_slice(x) - mu;
    let q = (d.transpose() * sigma.clone().try_inverse().unwrap() * &d)[(0, 0)];
    -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + sigma.determinant().ln() + q)
}

fn small_model(n_vox: usize, seed: u64) -> LesionModel {
    let grid = VolumeGrid::new([n_vox, 1, 1], [1.0; 3]).unwrap();
    let mut rng = counter_rng(seed, 99, 0);
    use rand::Rng;
    LesionModel {
        grid: grid.clone(),
        corrected: (0..2 * n_vox).map(|_| rng.random_range(0.0..3.0)).collect(),
        log_rest: (0..n_vox).map(|_| rng.random_range(-4.0..-1.0)).collect(),
        rho: (0..n_vox).map(|_| rng.random_range(0.05..0.95)).collect(),
        candidate: LesionMask::new(grid.clone(), vec![true; n_vox]).unwrap(),
        initial: LesionMask::empty(grid),
        mu_wm: DVector::from_vec(vec![1.0, 1.5]),
        sigma_wm: DMatrix::from_row_slice(2, 2, &[0.3, 0.05, 0.05, 0.2]),
        nu: 30.0,
        kappa: 3.0,
    }
}

#[test]
fn pinned_two_voxel_chain_matches_enumeration() {
    let grid = VolumeGrid::new([2, 1, 1], [1.0; 3]).unwrap();
    let model = LesionModel {
        grid: grid.clone(),
        corrected: vec![1.2, 0.4],
        log_rest: vec![-1.0, -0.7],
        rho: vec![0.6, 0.9],
        candidate: LesionMask::new(grid.clone(), vec![true, true]).unwrap(),
        initial: LesionMask::empty(grid.clone()),
        mu_wm: DVector::from_element(1, 0.0),
        sigma_wm: DMatrix::from_element(1, 1, 1.0),
        nu: 10.0,
        kappa: 2.0,
    };
    // zero network decodes to 0.5 everywhere
    let shape = ShapePriorModel::zeros(Architecture::new(2, vec![1], [2, 1, 1]).unwrap(), grid).unwrap();
    let (mu, var) = (1.0, 0.5);
    let config = SamplerConfig {
        samples: 10_000,
        burn_in: 0,
        seed: 4,
        pin_gaussian: Some((DVector::from_element(1, mu), DMatrix::from_element(1, 1, var))),
        pin_latent: Some(vec![0.3, -0.2]),
        ..Default::default()
    };
    let sampler = Sampler::new(&model, Some(&shape), &config).unwrap();
    let mut state = sampler.init_state();
    let mut counts = [0usize; 4];
    for _ in 0..config.samples {
        sampler.sweep(&mut state).unwrap();
        counts[state.z[0] as usize + 2 * state.z[1] as usize] += 1;
    }
    let p: Vec<f64> = (0..2)
        .map(|i| {
            let a = 0.5 * model.rho[i];
            let x = model.corrected[i];
            let les = a * (-(x - mu) * (x - mu) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
            let rest = (1.0 - a) * model.log_rest[i].exp();
            les / (les + rest)
        })
        .collect();
    let mut tv = 0.0;
    for (s, &c) in counts.iter().enumerate() {
        let (z0, z1) = (s & 1 == 1, s & 2 == 2);
        let exact = (if z0 { p[0] } else { 1.0 - p[0] }) * (if z1 { p[1] } else { 1.0 - p[1] });
        tv += 0.5 * (c as f64 / config.samples as f64 - exact).abs();
    }
    assert!(tv < 0.02, "total variation {tv}, counts {counts:?}, exact marginals {p:?}");
}

#[test]
fn inverse_wishart_mean_within_three_standard_errors() {
    let scale = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, -0.2, 0.3, 1.0, 0.1, -0.2, 0.1, 1.5]);
    let dof = 12.0;
    let expected = &scale / (dof - 3.0 - 1.0);
    let n = 5000;
    let draws: Vec<DMatrix<f64>> =
        (0..n).map(|s| sample_inverse_wishart(&scale, dof, &mut counter_rng(11, 0, s as u64)).unwrap()).collect();
    for r in 0..3 {
        for c in 0..3 {
            let vals: Vec<f64> = draws.iter().map(|d| d[(r, c)]).collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            assert!((mean - expected[(r, c)]).abs() < 3.0 * se, "({r},{c}): {mean} vs {} (se {se})", expected[(r, c)]);
        }
    }
}

fn empty_candidates(mut m: LesionModel) -> LesionModel {
    m.candidate = LesionMask::empty(m.grid.clone());
    m
}

#[test]
fn large_nu_concentrates_covariance() {
    let mut distances = Vec::new();
    for nu in [20.0, 200.0, 2000.0, 20000.0] {
        let mut model = empty_candidates(small_model(3, 1));
        model.nu = nu;
        let target = &model.sigma_wm * model.kappa;
        let config = SamplerConfig { samples: 200, burn_in: 0, seed: 8, ..Default::default() };
        let run = lesion_posterior(&model, None, &config).unwrap();
        let mean_dist = run.chain.iter().map(|r| (&r.sigma_les - &target).norm()).sum::<f64>() / 200.0;
        distances.push(mean_dist);
    }
    for w in distances.windows(2) {
        assert!(w[1] < w[0], "{distances:?}");
    }
    // the mean IW scale over dof - N - 1 approaches the target like 1 / sqrt(nu)
    assert!(distances[3] < 0.05 * (&DMatrix::from_row_slice(2, 2, &[0.3, 0.05, 0.05, 0.2]) * 3.0).norm());
}

#[test]
fn empty_candidate_mask_keeps_z_off() {
    let mut model = empty_candidates(small_model(5, 2));
    model.initial = LesionMask::new(model.grid.clone(), vec![true; 5]).unwrap();
    model.nu = 400.0;
    let config = SamplerConfig { samples: 400, burn_in: 1, seed: 3, ..Default::default() };
    let run = lesion_posterior(&model, None, &config).unwrap();
    assert!(run.posterior.probs().iter().all(|&p| p == 0.0));
    assert!(run.state.z.iter().all(|&z| !z));
    assert!(run.chain[1..].iter().all(|r| r.n_les == 0));
    // mu_les ~ N(mu_wm, Sigma/nu), averaged over sweeps
    let recorded = &run.chain[1..];
    for c in 0..2 {
        let vals: Vec<f64> = recorded.iter().map(|r| r.mu_les[c]).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let sd = (model.kappa * model.sigma_wm[(c, c)] / model.nu).sqrt();
        assert!((mean - model.mu_wm[c]).abs() < 4.0 * sd / (vals.len() as f64).sqrt(), "contrast {c}: {mean}");
    }
}

#[test]
fn seeded_runs_are_identical() {
    let model = small_model(40, 5);
    let config = SamplerConfig { samples: 20, burn_in: 5, seed: 17, ..Default::default() };
    let a = lesion_posterior(&model, None, &config).unwrap();
    let b = lesion_posterior(&model, None, &config).unwrap();
    assert_eq!(a.posterior, b.posterior);
    assert_eq!(a.chain, b.chain);
    let c = lesion_posterior(&model, None, &SamplerConfig { seed: 18, ..config }).unwrap();
    assert_ne!(a.chain, c.chain);
}

#[test]
fn single_sample_equals_single_sweep() {
    let model = small_model(30, 6);
    let config = SamplerConfig { samples: 1, burn_in: 0, seed: 2, ..Default::default() };
    let sampler = Sampler::new(&model, None, &config).unwrap();
    let mut state = sampler.init_state();
    let out = sampler.sweep(&mut state).unwrap();
    let run = lesion_posterior(&model, None, &config).unwrap();
    assert_eq!(run.posterior.probs(), &out.probabilities[..]);
}

#[test]
fn too_few_degrees_of_freedom_fail_at_start() {
    let mut model = small_model(3, 0);
    model.nu = 5.0; // N = 2 needs nu > 5
    assert!(matches!(lesion_posterior(&model, None, &SamplerConfig::default()), Err(lesionseg::Error::Config(_))));
}

#[test]
fn threshold_boundary_is_strict() {
    let g = VolumeGrid::new([3, 1, 1], [1.0; 3]).unwrap();
    let post = ProbabilityMap::new(g, vec![0.5, 0.5 + 1e-12, 0.2]).unwrap();
    let (z, labels) = final_segmentation(&post, &[1.0, 0.0, 0.0, 1.0, 0.3, 0.7], 2, 0.5).unwrap();
    assert_eq!(z.mask(), &[false, true, false]);
    assert_eq!(labels.labels(), &[1, 2, 2]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lesion_and_label_shares_sum_to_one(
        priors in prop::collection::vec(0.01f64..1.0, 2..6),
        log_lik in prop::collection::vec(-20.0f64..5.0, 6),
        log_lesion in -20.0f64..5.0,
        rho in 0.0f64..1.0,
        f in 0.0f64..1.0,
    ) {
        let total: f64 = priors.iter().sum();
        let pi: Vec<f64> = priors.iter().map(|p| p / total).collect();
        let rest: f64 = pi.iter().zip(&log_lik).map(|(p, l)| p * l.exp()).sum();
        let mut model = small_model(1, 0);
        model.log_rest = vec![rest.ln()];
        model.rho = vec![rho];
        let p = model.lesion_probability(0, log_lesion, f);
        let a = f * rho;
        let den = a * log_lesion.exp() + (1.0 - a) * rest;
        let labels: f64 = pi.iter().zip(&log_lik).map(|(p, l)| (1.0 - a) * p * l.exp() / den).sum();
        prop_assert!((p + labels - 1.0).abs() < 1e-9, "{} + {}", p, labels);
    }

    #[test]
    fn threshold_is_monotone(probs in prop::collection::vec(0.0f64..=1.0, 1..40), g1 in 0.01f64..0.99, g2 in 0.01f64..0.99) {
        let (lo, hi) = if g1 < g2 { (g1, g2) } else { (g2, g1) };
        let grid = VolumeGrid::new([probs.len(), 1, 1], [1.0; 3]).unwrap();
        let post = ProbabilityMap::new(grid, probs.clone()).unwrap();
        let w = vec![1.0; probs.len()];
        let (a, _) = final_segmentation(&post, &w, 1, lo).unwrap();
        let (b, _) = final_segmentation(&post, &w, 1, hi).unwrap();
        prop_assert!(a.mask().iter().zip(b.mask()).all(|(x, y)| *x || !*y));
    }
}

fn lesion_fit() -> (lesionseg::phantom::Phantom, LesionModel, lesionseg::gem::FitResult) {
    let template = PhantomSpec::brain([20, 20, 20], 3, 0).unwrap().with_lesions(5, (1.5, 3.0));
    let atlas = phantom_atlas(&template, 4, [5, 5, 5]);
    let mut spec = template.clone();
    spec.seed = 3;
    let p = generate(&spec).unwrap();
    let config = FitConfig::default();
    let prior = LesionIntensityPrior::new(500.0, 50.0).unwrap();
    let fit = fit_lesion_augmented(&p.image, &atlas, &brain_sharing(), &prior, &config).unwrap();
    let (model, _) = LesionModel::from_fit(&p.image, &fit, &brain_sharing(), CandidateRule::AllTagged).unwrap();
    (p, model, fit)
}

#[test]
fn phantom_lesions_stand_out_and_ablation_matches_chain() {
    let (p, model, _) = lesion_fit();
    let config = SamplerConfig { samples: 20, burn_in: 10, seed: 1, ..Default::default() };
    let run = lesion_posterior(&model, None, &config).unwrap();
    let (mut inside, mut n_in, mut outside, mut n_out) = (0.0, 0, 0.0, 0);
    for (&post, &truth) in run.posterior.probs().iter().zip(p.lesions.mask()) {
        if truth {
            inside += post;
            n_in += 1;
        } else {
            outside += post;
            n_out += 1;
        }
    }
    let (inside, outside) = (inside / n_in as f64, outside / n_out as f64);
    assert!(inside - outside >= 0.5, "inside {inside}, outside {outside}");

    // with f fixed at 1 the estimate is the chain average of intensity-model Bernoullis
    let n = model.n_contrasts();
    let recorded = &run.chain[config.burn_in..];
    for i in (0..model.grid.n_voxels()).step_by(7) {
        let expected = if model.candidate.mask()[i] {
            recorded
                .iter()
                .map(|r| {
                    let les = model.rho[i] * log_normal(&model.corrected[i * n..(i + 1) * n], &r.mu_les, &r.sigma_les).exp();
                    les / (les + (1.0 - model.rho[i]) * model.log_rest[i].exp())
                })
                .sum::<f64>()
                / recorded.len() as f64
        } else {
            0.0
        };
        assert!((run.posterior.probs()[i] - expected).abs() < 1e-9, "voxel {i}: {} vs {expected}", run.posterior.probs()[i]);
    }
}


#[test]
fn shape_model_chain_is_seeded() {
    let grid = VolumeGrid::isotropic(8);
    let n_vox = grid.n_voxels();
    let mut model = small_model(n_vox, 9);
    model.grid = grid.clone();
    model.candidate = LesionMask::new(grid.clone(), (0..n_vox).map(|i| i % 3 != 0).collect()).unwrap();
    model.initial = LesionMask::new(grid.clone(), (0..n_vox).map(|i| i % 5 == 1).collect()).unwrap();
    let shape = ShapePriorModel::init(Architecture::new(2, vec![2], [8, 8, 8]).unwrap(), grid, &mut counter_rng(1, 0, 0)).unwrap();
    let config = SamplerConfig { samples: 4, burn_in: 2, seed: 5, ..Default::default() };
    let a = lesion_posterior(&model, Some(&shape), &config).unwrap();
    let b = lesion_posterior(&model, Some(&shape), &config).unwrap();
    assert_eq!(a.posterior, b.posterior);
    assert_eq!(a.state.h, b.state.h);
    assert_eq!(a.state.h.as_ref().map(Vec::len), Some(2));
    for (i, &p) in a.posterior.probs().iter().enumerate() {
        assert!((0.0..=1.0).contains(&p));
        if !model.candidate.mask()[i] {
            assert_eq!(p, 0.0);
        }
    }
}
