//! Seeded synthetic head phantoms: nested ellipsoid tissue shells, spherical
//! lesions planted in white matter, Gaussian intensities in the log domain and
//! a smooth DCT bias field.

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::eval_bias_basis;
use crate::volume::{Contrast, LabelMap, LesionMask, MultiContrastImage, VolumeGrid};

pub const BACKGROUND: u16 = 1;
pub const CSF: u16 = 2;
pub const GM: u16 = 3;
pub const WM: u16 = 4;

/// Ellipsoid filled with `label`; radii are fractions of the grid half-extent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shell {
    pub label: u16,
    pub radii: [f64; 3],
}

/// Gaussian intensity model of one tissue; `cov` is `N x N` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Appearance {
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
}

impl Appearance {
    pub fn isotropic(mean: Vec<f64>, sd: f64) -> Self {
        let n = mean.len();
        let mut cov = vec![0.0; n * n];
        for k in 0..n {
            cov[k * n + k] = sd * sd;
        }
        Self { mean, cov }
    }

    fn cholesky(&self) -> Result<DMatrix<f64>> {
        let n = self.mean.len();
        if self.cov.len() != n * n {
            return Err(Error::InvalidInput("appearance covariance has the wrong size".into()));
        }
        DMatrix::from_row_slice(n, n, &self.cov)
            .cholesky()
            .map(|c| c.l())
            .ok_or_else(|| Error::InvalidInput("appearance covariance is not SPD".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionSpec {
    pub count: usize,
    /// Radius range in voxels.
    pub radius: (f64, f64),
    pub appearance: Appearance,
}

/// Isolated white-matter voxels whose mean is moved a fraction `strength` of
/// the way from white matter towards the lesion mean. They are not lesions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierSpec {
    pub count: usize,
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasSpec {
    pub order: [usize; 3],
    /// Largest absolute log-domain bias per contrast; 0 disables the field.
    pub peak: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub grid: VolumeGrid,
    pub contrasts: Vec<Contrast>,
    /// Number of labels; label 1 fills everything outside the shells.
    pub n_labels: usize,
    /// Painted in order, so later shells overwrite earlier ones.
    pub shells: Vec<Shell>,
    /// Relative random perturbation of the shell radii and centre.
    pub jitter: f64,
    /// Per label, indexed by `label - 1`.
    pub appearance: Vec<Appearance>,
    pub wm_label: u16,
    pub lesions: LesionSpec,
    pub outliers: OutlierSpec,
    pub bias: BiasSpec,
    pub seed: u64,
}

/// Reference tissue means in the log domain for T1w, T2w and FLAIR.
const TISSUE_MEANS: [[f64; 3]; 4] = [[2.0, 2.0, 2.0], [3.0, 5.5, 3.2], [4.2, 4.6, 4.5], [4.8, 4.1, 4.1]];
const LESION_MEAN: [f64; 3] = [4.3, 5.0, 5.2];
const CONTRASTS: [Contrast; 3] = [Contrast::T1w, Contrast::T2w, Contrast::Flair];

impl PhantomSpec {
    /// Four-label head: background, CSF (outer rim and ventricles), gray and
    /// white matter, with the first `n_contrasts` of T1w, T2w and FLAIR.
    pub fn brain(dims: [usize; 3], n_contrasts: usize, seed: u64) -> Result<Self> {
        if !(1..=3).contains(&n_contrasts) {
            return Err(Error::InvalidInput("phantoms support one to three contrasts".into()));
        }
        let pick = |m: &[f64; 3]| m[..n_contrasts].to_vec();
        let sds = [0.15, 0.08, 0.08, 0.08];
        Ok(Self {
            grid: VolumeGrid::new(dims, [1.0; 3])?,
            contrasts: CONTRASTS[..n_contrasts].to_vec(),
            n_labels: 4,
            shells: vec![
                Shell { label: CSF, radii: [0.9, 0.9, 0.9] },
                Shell { label: GM, radii: [0.78, 0.78, 0.78] },
                Shell { label: WM, radii: [0.58, 0.58, 0.58] },
                Shell { label: CSF, radii: [0.16, 0.24, 0.16] },
            ],
            jitter: 0.05,
            appearance: TISSUE_MEANS.iter().zip(sds).map(|(m, sd)| Appearance::isotropic(pick(m), sd)).collect(),
            wm_label: WM,
            lesions: LesionSpec { count: 0, radius: (1.5, 3.0), appearance: Appearance::isotropic(pick(&LESION_MEAN), 0.12) },
            outliers: OutlierSpec { count: 0, strength: 0.0 },
            bias: BiasSpec { order: [3, 3, 3], peak: 0.0 },
            seed,
        })
    }

    pub fn with_lesions(mut self, count: usize, radius: (f64, f64)) -> Self {
        self.lesions.count = count;
        self.lesions.radius = radius;
        self
    }

    pub fn with_outliers(mut self, count: usize, strength: f64) -> Self {
        self.outliers = OutlierSpec { count, strength };
        self
    }

    /// Bias whose native-intensity factor ranges within `[1/(1+f), 1+f]`.
    pub fn with_bias_fraction(mut self, fraction: f64) -> Self {
        self.bias.peak = (1.0 + fraction).ln();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.contrasts.len();
        if n == 0 {
            return Err(Error::InvalidInput("phantom needs at least one contrast".into()));
        }
        if self.appearance.len() != self.n_labels {
            return Err(Error::InvalidInput("one appearance per label required".into()));
        }
        for a in self.appearance.iter().chain(std::iter::once(&self.lesions.appearance)) {
            if a.mean.len() != n {
                return Err(Error::InvalidInput("appearance mean has the wrong length".into()));
            }
            a.cholesky()?;
        }
        if self.shells.iter().any(|s| s.label == 0 || s.label as usize > self.n_labels)
            || self.wm_label == 0
            || self.wm_label as usize > self.n_labels
        {
            return Err(Error::InvalidInput("shell label out of range".into()));
        }
        let (lo, hi) = self.lesions.radius;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::InvalidInput("lesion radius range must be positive and ordered".into()));
        }
        if !(0.0..=1.0).contains(&self.outliers.strength) {
            return Err(Error::InvalidInput("outlier strength must lie in [0, 1]".into()));
        }
        if !(self.bias.peak >= 0.0) {
            return Err(Error::InvalidInput("bias peak must be non-negative".into()));
        }
        Ok(())
    }
}

/// Everything the generator knows, for use as a test oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub contrasts: Vec<String>,
    /// Per label, indexed by `label - 1`.
    pub appearance: Vec<Appearance>,
    pub lesion_appearance: Appearance,
    pub lesion_centers: Vec<[f64; 3]>,
    pub lesion_radii: Vec<f64>,
    pub lesion_voxels: usize,
    pub bias_order: [usize; 3],
    /// `N x P` row-major DCT coefficients; the constant term is zero.
    pub bias_coeffs: Vec<f64>,
    pub label_voxels: Vec<usize>,
    /// Voxel indices of injected intensity outliers.
    #[serde(default)]
    pub outlier_voxels: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub image: MultiContrastImage,
    /// Tissue labels; lesion voxels keep the white-matter label.
    pub labels: LabelMap,
    pub lesions: LesionMask,
    /// Row-major `I x N` log-domain bias field.
    pub bias_field: Vec<f64>,
    pub truth: GroundTruth,
}

fn paint_labels(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Vec<u16> {
    let dims = spec.grid.dims();
    let half = dims.map(|d| (d as f64 - 1.0) / 2.0);
    let j = spec.jitter;
    let centre: [f64; 3] = std::array::from_fn(|a| half[a] * (1.0 + j * rng.random_range(-0.5..0.5)));
    let shells: Vec<[f64; 3]> = spec
        .shells
        .iter()
        .map(|s| std::array::from_fn(|a| s.radii[a] * half[a].max(0.5) * (1.0 + j * rng.random_range(-1.0..1.0))))
        .collect();
    let mut labels = vec![BACKGROUND; spec.grid.n_voxels()];
    for (i, l) in labels.iter_mut().enumerate() {
        let c = spec.grid.coords(i);
        for (shell, r) in spec.shells.iter().zip(&shells) {
            let q: f64 = (0..3).map(|a| ((c[a] as f64 - centre[a]) / r[a]).powi(2)).sum();
            if q <= 1.0 {
                *l = shell.label;
            }
        }
    }
    labels
}

fn plant_lesions(spec: &PhantomSpec, labels: &[u16], rng: &mut ChaCha8Rng) -> Result<(Vec<bool>, Vec<[f64; 3]>, Vec<f64>)> {
    let grid = &spec.grid;
    let mut mask = vec![false; grid.n_voxels()];
    let (mut centers, mut radii) = (Vec::new(), Vec::new());
    if spec.lesions.count == 0 {
        return Ok((mask, centers, radii));
    }
    let wm: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == spec.wm_label).collect();
    if wm.is_empty() {
        return Err(Error::InvalidInput("cannot place lesions: phantom has no white matter".into()));
    }
    let dims = grid.dims();
    let mut attempts = 0;
    while centers.len() < spec.lesions.count {
        attempts += 1;
        if attempts > 20_000 {
            return Err(Error::InvalidInput(format!(
                "could only place {} of {} lesions inside white matter",
                centers.len(),
                spec.lesions.count
            )));
        }
        let (lo, hi) = spec.lesions.radius;
        let r = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let c = grid.coords(wm[rng.random_range(0..wm.len())]).map(|v| v as f64 + rng.random_range(-0.5..0.5));
        // sphere inside white matter, at least one voxel away from other lesions
        let reach = r + 1.0;
        let mut ok = true;
        let mut voxels = Vec::new();
        'scan: for z in (c[2] - reach).floor() as i64..=(c[2] + reach).ceil() as i64 {
            for y in (c[1] - reach).floor() as i64..=(c[1] + reach).ceil() as i64 {
                for x in (c[0] - reach).floor() as i64..=(c[0] + reach).ceil() as i64 {
                    let d2 = (x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (z as f64 - c[2]).powi(2);
                    if d2 > reach * reach {
                        continue;
                    }
                    if x < 0 || y < 0 || z < 0 || x >= dims[0] as i64 || y >= dims[1] as i64 || z >= dims[2] as i64 {
                        if d2 <= r * r {
                            ok = false;
                            break 'scan;
                        }
                        continue;
                    }
                    let i = grid.index(x as usize, y as usize, z as usize);
                    if mask[i] || (d2 <= r * r && labels[i] != spec.wm_label) {
                        ok = false;
                        break 'scan;
                    }
                    if d2 <= r * r {
                        voxels.push(i);
                    }
                }
            }
        }
        if !ok || voxels.is_empty() {
            continue;
        }
        for i in voxels {
            mask[i] = true;
        }
        centers.push(c);
        radii.push(r);
    }
    Ok((mask, centers, radii))
}

/// White-matter voxels at least two voxels (Chebyshev) from any lesion and
/// from each other. Uses its own generator so phantoms without outliers are
/// unchanged.
fn pick_outliers(spec: &PhantomSpec, labels: &[u16], mask: &[bool]) -> Result<Vec<usize>> {
    let count = spec.outliers.count;
    if count == 0 {
        return Ok(Vec::new());
    }
    let grid = &spec.grid;
    let dims = grid.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let near = |i: usize, hit: &dyn Fn(usize) -> bool| {
        let c = grid.coords(i);
        (-2i64..=2).any(|dz| {
            (-2i64..=2).any(|dy| {
                (-2i64..=2).any(|dx| {
                    let p = [c[0] as i64 + dx, c[1] as i64 + dy, c[2] as i64 + dz];
                    (0..3).all(|a| p[a] >= 0 && p[a] < dims[a] as i64) && hit(grid.index(p[0] as usize, p[1] as usize, p[2] as usize))
                })
            })
        })
    };
    let wm: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == spec.wm_label && !near(i, &|j| mask[j])).collect();
    let mut chosen: Vec<usize> = Vec::with_capacity(count);
    for _ in 0..20 * count + 100 {
        if chosen.len() == count || wm.is_empty() {
            break;
        }
        let i = wm[rng.random_range(0..wm.len())];
        if !near(i, &|j| chosen.contains(&j)) {
            chosen.push(i);
        }
    }
    if chosen.len() < count {
        return Err(Error::InvalidInput(format!("could only place {} of {count} outliers", chosen.len())));
    }
    chosen.sort_unstable();
    Ok(chosen)
}

fn bias_coefficients(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = spec.contrasts.len();
    let n_vox = spec.grid.n_voxels();
    let basis = eval_bias_basis(&spec.grid, spec.bias.order)?;
    let p = basis.n_basis();
    let mut coeffs = vec![0.0; n * p];
    let mut field = vec![0.0; n_vox * n];
    if spec.bias.peak == 0.0 {
        return Ok((coeffs, field));
    }
    for k in 0..n {
        let row = &mut coeffs[k * p..(k + 1) * p];
        for c in row.iter_mut().skip(1) {
            *c = rng.sample::<f64, _>(StandardNormal);
        }
        let mut peak: f64 = 0.0;
        for i in 0..n_vox {
            let v: f64 = basis.row(i).iter().zip(row.iter()).map(|(a, b)| a * b).sum();
            peak = peak.max(v.abs());
        }
        if peak > 0.0 {
            row.iter_mut().for_each(|c| *c *= spec.bias.peak / peak);
        }
        for i in 0..n_vox {
            field[i * n + k] = basis.row(i).iter().zip(row.iter()).map(|(a, b)| a * b).sum();
        }
    }
    Ok((coeffs, field))
}

pub fn generate(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let labels = paint_labels(spec, &mut rng);
    let (mask, centers, radii) = plant_lesions(spec, &labels, &mut rng)?;
    let (bias_coeffs, bias_field) = bias_coefficients(spec, &mut rng)?;

    let n = spec.contrasts.len();
    let chols = spec.appearance.iter().map(Appearance::cholesky).collect::<Result<Vec<_>>>()?;
    let lesion_chol = spec.lesions.appearance.cholesky()?;
    let mut data = vec![0.0; spec.grid.n_voxels() * n];
    let outliers = pick_outliers(spec, &labels, &mask)?;
    let wm_app = &spec.appearance[spec.wm_label as usize - 1];
    let outlier_mean: Vec<f64> = (0..n)
        .map(|k| wm_app.mean[k] + spec.outliers.strength * (spec.lesions.appearance.mean[k] - wm_app.mean[k]))
        .collect();
    let mut z = DVector::zeros(n);
    for i in 0..spec.grid.n_voxels() {
        let (app, chol) = if mask[i] {
            (&spec.lesions.appearance, &lesion_chol)
        } else {
            let k = labels[i] as usize - 1;
            (&spec.appearance[k], &chols[k])
        };
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let noise = chol * &z;
        let mean = if outliers.binary_search(&i).is_ok() { &outlier_mean } else { &app.mean };
        for k in 0..n {
            data[i * n + k] = mean[k] + bias_field[i * n + k] + noise[k];
        }
    }
    let image = MultiContrastImage::new(spec.grid.clone(), data, spec.contrasts.clone(), true)?;
    let label_voxels = (1..=spec.n_labels).map(|l| labels.iter().filter(|&&x| x as usize == l).count()).collect();
    let lesion_voxels = mask.iter().filter(|&&m| m).count();
    let truth = GroundTruth {
        contrasts: spec.contrasts.iter().map(|c| format!("{c:?}")).collect(),
        appearance: spec.appearance.clone(),
        lesion_appearance: spec.lesions.appearance.clone(),
        lesion_centers: centers,
        lesion_radii: radii,
        lesion_voxels,
        bias_order: spec.bias.order,
        bias_coeffs,
        label_voxels,
        outlier_voxels: outliers,
        seed: spec.seed,
    };
    Ok(Phantom {
        image,
        labels: LabelMap::new(spec.grid.clone(), labels)?,
        lesions: LesionMask::new(spec.grid.clone(), mask)?,
        bias_field,
        truth,
    })
}

/// Label maps and lesion masks of `count` phantoms drawn from `template` with
/// consecutive seeds, for building an atlas.
pub fn training_set(template: &PhantomSpec, count: usize, first_seed: u64) -> Result<Vec<Phantom>> {
    (0..count as u64)
        .map(|s| {
            let mut spec = template.clone();
            spec.seed = first_seed + s;
            generate(&spec)
        })
        .collect()
}

/// Centre of mass of a set of voxels in voxel coordinates.
pub fn centroid(grid: &VolumeGrid, voxels: impl Iterator<Item = usize>) -> Option<Vector3<f64>> {
    let mut s = Vector3::zeros();
    let mut n = 0usize;
    for i in voxels {
        let c = grid.coords(i);
        s += Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64);
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lesions_give_empty_mask() {
        let p = generate(&PhantomSpec::brain([16, 16, 16], 2, 1).unwrap()).unwrap();
        assert_eq!(p.lesions.count(), 0);
        assert!(p.truth.lesion_centers.is_empty());
    }

    #[test]
    fn outliers_are_isolated_white_matter_voxels() {
        let base = PhantomSpec::brain([24, 24, 24], 3, 6).unwrap().with_lesions(2, (1.5, 2.5));
        let plain = generate(&base).unwrap();
        let p = generate(&base.clone().with_outliers(12, 0.5)).unwrap();
        assert_eq!(p.truth.outlier_voxels.len(), 12);
        assert_eq!(p.lesions, plain.lesions);
        assert_eq!(p.labels, plain.labels);
        for &i in &p.truth.outlier_voxels {
            assert_eq!(p.labels.labels()[i], WM);
            assert!(!p.lesions.mask()[i]);
        }
        // only the outlier voxels differ, by the mean shift
        let n = 3;
        let shift: Vec<f64> = (0..n).map(|k| 0.5 * (LESION_MEAN[k] - TISSUE_MEANS[3][k])).collect();
        for i in 0..p.image.n_voxels() {
            let d: Vec<f64> = (0..n).map(|k| p.image.voxel(i)[k] - plain.image.voxel(i)[k]).collect();
            let expected: &[f64] = if p.truth.outlier_voxels.contains(&i) { &shift } else { &[0.0; 3] };
            for k in 0..n {
                assert!((d[k] - expected[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lesions_sit_in_white_matter() {
        let p = generate(&PhantomSpec::brain([32, 32, 32], 3, 4).unwrap().with_lesions(5, (1.5, 3.0))).unwrap();
        assert_eq!(p.truth.lesion_centers.len(), 5);
        assert!(p.lesions.count() > 0);
        for (i, &m) in p.lesions.mask().iter().enumerate() {
            if m {
                assert_eq!(p.labels.labels()[i], WM);
            }
        }
    }

    #[test]
    fn degenerate_noise_reproduces_mean_plus_bias() {
        let mut spec = PhantomSpec::brain([12, 12, 12], 3, 9).unwrap().with_bias_fraction(0.2);
        for a in spec.appearance.iter_mut() {
            *a = Appearance::isotropic(a.mean.clone(), 1e-6);
        }
        let p = generate(&spec).unwrap();
        for i in 0..p.image.n_voxels() {
            let k = p.labels.labels()[i] as usize - 1;
            for c in 0..3 {
                let expect = spec.appearance[k].mean[c] + p.bias_field[i * 3 + c];
                assert!((p.image.voxel(i)[c] - expect).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn bias_peak_matches_request() {
        let p = generate(&PhantomSpec::brain([16, 16, 16], 2, 3).unwrap().with_bias_fraction(0.2)).unwrap();
        for c in 0..2 {
            let peak = (0..p.image.n_voxels()).map(|i| p.bias_field[i * 2 + c].abs()).fold(0.0, f64::max);
            assert!((peak - 1.2f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let spec = PhantomSpec::brain([20, 20, 20], 3, 11).unwrap().with_lesions(2, (1.5, 2.0)).with_bias_fraction(0.1);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.truth, b.truth);
    }

    #[test]
    fn no_white_matter_rejects_lesions() {
        let mut spec = PhantomSpec::brain([16, 16, 16], 1, 2).unwrap().with_lesions(1, (1.0, 1.5));
        spec.shells.retain(|s| s.label != WM);
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn class_means_converge() {
        let spec = PhantomSpec::brain([24, 24, 24], 3, 5).unwrap();
        let p = generate(&spec).unwrap();
        for label in 1..=4u16 {
            let idx: Vec<usize> = (0..p.image.n_voxels()).filter(|&i| p.labels.labels()[i] == label).collect();
            let n = idx.len() as f64;
            for c in 0..3 {
                let mean = idx.iter().map(|&i| p.image.voxel(i)[c]).sum::<f64>() / n;
                let sd = spec.appearance[label as usize - 1].cov[c * 3 + c].sqrt();
                assert!((mean - spec.appearance[label as usize - 1].mean[c]).abs() < 4.0 * sd / n.sqrt());
            }
        }
    }
}
