use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use lesionseg::atlas::{build_atlas, read_atlas, write_atlas};
use lesionseg::gem::{fit_lesion_augmented, write_trace_csv, FitConfig};
use lesionseg::likelihood::{write_params, ClassSharingMap, LesionIntensityPrior};
use lesionseg::metrics::overlap_report;
use lesionseg::phantom::{generate, PhantomSpec};
use lesionseg::sampler::{assign_lesion_structures, final_segmentation, lesion_posterior, write_chain_csv, CandidateRule, LesionModel, SamplerConfig};
use lesionseg::shape_prior::{load_model, save_model, train, write_training_log, Architecture, VaeTrainConfig};
use lesionseg::volume::{
    log_transform, read_image, read_labels, read_mask, read_probability, write_image, write_labels, write_mask, write_probability,
    Contrast, MultiContrastImage,
};
use nalgebra::Matrix4;

use crate::args::{BuildAtlasArgs, EvaluateArgs, MakePhantomArgs, Rule, SegmentArgs, TrainArgs};
use crate::error::{CliError, CliResult};

/// Files written by a command; removed again unless the command commits.
struct Outputs {
    paths: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    fn new() -> Self {
        Self { paths: Vec::new(), committed: false }
    }

    fn add(&mut self, path: impl Into<PathBuf>) -> PathBuf {
        let p = path.into();
        self.paths.push(p.clone());
        p
    }

    fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if !self.committed {
            for p in &self.paths {
                let _ = fs::remove_file(p);
            }
        }
    }
}

fn require(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing(path.to_path_buf()))
    }
}

fn out_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn contrast_name(c: Contrast) -> &'static str {
    match c {
        Contrast::T1w => "t1w",
        Contrast::T2w => "t2w",
        Contrast::Flair => "flair",
        Contrast::Pd => "pd",
        Contrast::Other => "other",
    }
}

pub fn make_phantom(a: &MakePhantomArgs) -> CliResult<()> {
    let spec = PhantomSpec::brain(a.dims, a.contrasts, a.seed)?.with_lesions(a.lesions, a.lesion_radius).with_bias_fraction(a.bias);
    spec.validate()?;
    let p = generate(&spec)?;
    out_dir(&a.out)?;
    let mut out = Outputs::new();
    let grid = p.image.grid().clone();
    for (c, &contrast) in p.image.contrasts().iter().enumerate() {
        let img = MultiContrastImage::from_channels(grid.clone(), vec![p.image.channel(c)], vec![contrast], true)?;
        write_image(out.add(a.out.join(format!("{}.mvol", contrast_name(contrast)))), &img)?;
    }
    let bias = MultiContrastImage::new(grid, p.bias_field.clone(), p.image.contrasts().to_vec(), true)?;
    write_image(out.add(a.out.join("bias.mvol")), &bias)?;
    write_labels(out.add(a.out.join("labels.mvol")), &p.labels)?;
    write_mask(out.add(a.out.join("lesions.mvol")), &p.lesions)?;
    fs::write(out.add(a.out.join("truth.json")), serde_json::to_string_pretty(&p.truth)? + "\n")?;
    log::info!("phantom with {} lesion voxels written to {}", p.lesions.count(), a.out.display());
    out.commit();
    Ok(())
}

pub fn build_atlas_cmd(a: &BuildAtlasArgs) -> CliResult<()> {
    for p in a.labels.iter().chain(&a.lesions) {
        require(p)?;
    }
    let labels = a.labels.iter().map(read_labels).collect::<Result<Vec<_>, _>>()?;
    let masks = a.lesions.iter().map(read_mask).collect::<Result<Vec<_>, _>>()?;
    let mesh = build_atlas(&labels, &masks, a.resolution)?;
    let mut out = Outputs::new();
    write_atlas(out.add(&a.out), &mesh)?;
    read_atlas(&a.out)?;
    log::info!("atlas with {} vertices and {} labels", mesh.n_vertices(), mesh.n_labels());
    out.commit();
    Ok(())
}

pub fn train_cmd(a: &TrainArgs) -> CliResult<()> {
    for p in &a.masks {
        require(p)?;
    }
    let masks = a.masks.iter().map(read_mask).collect::<Result<Vec<_>, _>>()?;
    let arch = Architecture::new(a.latent, a.channels.clone(), masks[0].grid().dims())?;
    let config = VaeTrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        mc_samples: a.mc_samples,
        rotation_degrees: a.rotation,
        augment_copies: a.augment_copies,
        seed: a.seed,
    };
    let (model, logs) = train(&masks, arch, &config)?;
    if let (Some(first), Some(last)) = (logs.first(), logs.last()) {
        log::info!("ELBO {:.4} after epoch 1, {:.4} after epoch {}", first.elbo, last.elbo, last.epoch);
    }
    let mut out = Outputs::new();
    save_model(out.add(&a.out), &model)?;
    load_model(&a.out)?;
    if let Some(log) = &a.log {
        write_training_log(out.add(log), &logs)?;
    }
    out.commit();
    Ok(())
}

fn load_inputs(a: &SegmentArgs) -> CliResult<MultiContrastImage> {
    let mut grid = None;
    let mut channels = Vec::new();
    let mut contrasts = Vec::new();
    for input in &a.inputs {
        let mut img = read_image(&input.path)?;
        if img.n_contrasts() != 1 {
            return Err(CliError::Usage(format!("{} holds {} channels; pass one channel per --input", input.path.display(), img.n_contrasts())));
        }
        if !img.log_domain() {
            img = log_transform(&img, a.floor)?;
        }
        match &grid {
            None => grid = Some(img.grid().clone()),
            Some(g) => g.check_same(img.grid(), "input volume")?,
        }
        channels.push(img.channel(0));
        contrasts.push(input.contrast);
    }
    Ok(MultiContrastImage::from_channels(grid.expect("at least one input"), channels, contrasts, true)?)
}

fn sharing_map(a: &SegmentArgs, n_labels: usize) -> CliResult<ClassSharingMap> {
    let sharing = match &a.sharing {
        Some(p) => serde_json::from_str::<ClassSharingMap>(&fs::read_to_string(p)?)?,
        None => {
            let in_range = |l: usize| (1..=n_labels).contains(&l);
            if !in_range(a.wm_label) || !in_range(a.gm_label) {
                return Err(CliError::Usage(format!("--wm-label and --gm-label must lie in 1..={n_labels}")));
            }
            ClassSharingMap::identity(n_labels).with_tissues(a.wm_label - 1, a.gm_label - 1)
        }
    };
    sharing.validate()?;
    Ok(sharing)
}

pub fn segment(a: &SegmentArgs) -> CliResult<()> {
    for p in a.inputs.iter().map(|i| &i.path).chain([&a.atlas]).chain(&a.shape_prior).chain(&a.sharing) {
        require(p)?;
    }
    let image = load_inputs(a)?;
    let atlas = read_atlas(&a.atlas)?;
    let sharing = sharing_map(a, atlas.n_labels())?;
    let shape = a.shape_prior.as_ref().map(load_model).transpose()?;
    let subject_to_prior = a.subject_to_prior.map_or_else(Matrix4::identity, |v| Matrix4::from_row_slice(&v));
    let rule = match a.rule {
        Rule::All => CandidateRule::AllTagged,
        Rule::Any => CandidateRule::AnyTagged,
    };
    let sampler_config =
        SamplerConfig { samples: a.samples, burn_in: a.burn_in, threshold: a.threshold, seed: a.seed, subject_to_prior, rule, ..Default::default() };
    sampler_config.validate()?;

    let mut fit_config = FitConfig { max_outer_iters: a.max_iters, lesion_augmented: true, ..FitConfig::default() };
    if let Some(order) = a.bias_order {
        fit_config.bias_order = order;
    }
    let prior = LesionIntensityPrior::new(a.nu, a.kappa)?;
    let fit = fit_lesion_augmented(&image, &atlas, &sharing, &prior, &fit_config)?;
    log::info!("fit finished after {} trace entries, converged: {}", fit.trace.len(), fit.converged);
    let (model, terms) = LesionModel::from_fit(&image, &fit, &sharing, rule)?;
    let run = lesion_posterior(&model, shape.as_ref(), &sampler_config)?;
    let (lesions, labels) = final_segmentation(&run.posterior, &terms.posteriors, terms.n_labels, a.threshold)?;
    let labels = assign_lesion_structures(&labels, &lesions, &terms)?;
    log::info!("{} lesion voxels at threshold {}", lesions.count(), a.threshold);

    out_dir(&a.out)?;
    let mut out = Outputs::new();
    let posterior_path = out.add(a.out.join("posterior.mvol"));
    write_probability(&posterior_path, &run.posterior)?;
    let lesion_path = out.add(a.out.join("lesions.mvol"));
    write_mask(&lesion_path, &lesions)?;
    let label_path = out.add(a.out.join("labels.mvol"));
    write_labels(&label_path, &labels)?;
    if a.trace {
        write_trace_csv(out.add(a.out.join("trace.csv")), &fit.trace)?;
        write_chain_csv(out.add(a.out.join("chain.csv")), &run.chain)?;
    }
    if a.dump_params {
        write_params(out.add(a.out.join("params.prm")), &fit.params)?;
    }
    // read back what the next step will consume
    read_probability(&posterior_path)?;
    if read_mask(&lesion_path)? != lesions || read_labels(&label_path)? != labels {
        return Err(CliError::Usage("written segmentation does not read back identically".into()));
    }
    out.commit();
    Ok(())
}

pub fn evaluate(a: &EvaluateArgs) -> CliResult<()> {
    for p in [&a.pred, &a.truth].into_iter().chain(&a.labels) {
        require(p)?;
    }
    let pred = read_mask(&a.pred)?;
    let truth = read_mask(&a.truth)?;
    let labels = a.labels.as_ref().map(read_labels).transpose()?;
    let report = overlap_report(&pred, &truth, labels.as_ref())?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    match &a.out {
        Some(path) => {
            let mut out = Outputs::new();
            fs::write(out.add(path), text)?;
            out.commit();
        }
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}
