use lesionseg::metrics::{dice, pearson};
use lesionseg::shape_prior::{kl_standard_normal, train, Architecture, ShapePriorModel, VaeTrainConfig};
use lesionseg::volume::{LesionMask, VolumeGrid};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

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

fn reconstruct(m: &ShapePriorModel, z: &LesionMask) -> LesionMask {
    let (mu, _) = m.encode(z).unwrap();
    m.decode(&mu).unwrap().threshold(0.5)
}

#[test]
fn overfits_a_single_blob() {
    let blob = ball(16, [7.0, 8.0, 6.5], 3.2);
    let masks = vec![blob.clone(); 10];
    let cfg = VaeTrainConfig { epochs: 200, batch_size: 10, learning_rate: 1e-2, rotation_degrees: 0.0, seed: 4, ..Default::default() };
    let (m, log) = train(&masks, Architecture::desk([16; 3]), &cfg).unwrap();
    let d = dice(&reconstruct(&m, &blob), &blob).unwrap();
    assert!(d > 0.9, "reconstruction dice {d}");
    let tail = log.len() / 10;
    let late = log[log.len() - tail..].iter().map(|l| l.elbo).sum::<f64>() / tail as f64;
    assert!(late > log[0].elbo, "{late} vs {}", log[0].elbo);
    assert!(log.iter().all(|l| l.elbo <= 0.0 && l.kl >= 0.0));
}

#[test]
fn seeded_training_is_reproducible() {
    let masks = vec![ball(8, [3.0; 3], 1.8), ball(8, [4.0, 3.0, 4.0], 1.2), ball(8, [2.0, 5.0, 3.0], 1.5)];
    let arch = Architecture::new(4, vec![4, 8], [8; 3]).unwrap();
    let cfg = VaeTrainConfig { epochs: 5, batch_size: 2, learning_rate: 1e-3, seed: 9, ..Default::default() };
    let (a, la) = train(&masks, arch.clone(), &cfg).unwrap();
    let (b, lb) = train(&masks, arch.clone(), &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    let (c, _) = train(&masks, arch, &VaeTrainConfig { seed: 10, ..cfg }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn prior_samples_follow_training_frequency() {
    // two disjoint blob classes
    let n = 16;
    let a = ball(n, [4.0, 4.0, 8.0], 2.5);
    let b = ball(n, [11.0, 11.0, 8.0], 2.5);
    let masks: Vec<LesionMask> = (0..10).map(|i| if i % 2 == 0 { a.clone() } else { b.clone() }).collect();
    let cfg = VaeTrainConfig { epochs: 150, batch_size: 10, learning_rate: 1e-2, rotation_degrees: 0.0, seed: 2, ..Default::default() };
    let (m, _) = train(&masks, Architecture::desk([n; 3]), &cfg).unwrap();

    let (mu_empty, _) = m.encode(&LesionMask::empty(VolumeGrid::isotropic(n))).unwrap();
    let full = LesionMask::new(VolumeGrid::isotropic(n), vec![true; n * n * n]).unwrap();
    let (mu_full, _) = m.encode(&full).unwrap();
    let dist: f64 = mu_empty.iter().zip(&mu_full).map(|(x, y)| (x - y).powi(2)).sum();
    assert!(dist > 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut mean = vec![0.0; n * n * n];
    for _ in 0..100 {
        for (acc, p) in mean.iter_mut().zip(m.sample_prior(&mut rng).probs()) {
            *acc += p / 100.0;
        }
    }
    let freq: Vec<f64> = a.mask().iter().zip(b.mask()).map(|(&x, &y)| 0.5 * (x as u8 + y as u8) as f64).collect();
    let r = pearson(&mean, &freq).unwrap().unwrap();
    assert!(r > 0.5, "correlation {r}");
}

#[test]
fn prior_sampling_is_seeded() {
    let arch = Architecture::new(3, vec![2, 2], [6; 3]).unwrap();
    let m = ShapePriorModel::init(arch, VolumeGrid::isotropic(6), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let a = m.sample_prior(&mut ChaCha8Rng::seed_from_u64(5));
    assert_eq!(a, m.sample_prior(&mut ChaCha8Rng::seed_from_u64(5)));
    assert!(a.probs().iter().all(|&p| p > 0.0 && p < 1.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn kl_is_non_negative(mu in prop::collection::vec(-3.0f64..3.0, 3), sigma in prop::collection::vec(0.05f64..4.0, 3)) {
        let kl = kl_standard_normal(&mu, &sigma);
        prop_assert!(kl >= -1e-15);
    }

    #[test]
    fn elbo_is_non_positive(seed in 0u64..1000, p in 0.0f64..1.0) {
        let arch = Architecture::new(2, vec![2, 3], [5, 4, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = (0..arch.n_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = ShapePriorModel::from_params(arch, VolumeGrid::new([5, 4, 3], [1.0; 3]).unwrap(), params).unwrap();
        let z = LesionMask::new(m.grid().clone(), (0..60).map(|_| rng.random_bool(p)).collect()).unwrap();
        let (parts, _) = m.elbo(&z, 2, &mut rng).unwrap();
        prop_assert!(parts.elbo <= 0.0);
        prop_assert!(parts.kl >= 0.0);
    }
}
