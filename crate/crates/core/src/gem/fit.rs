use nalgebra::DMatrix;

use super::mstep::{moments_from_weights, VANISHING};
use super::{
    covariance_ridge, e_step, m_step_bias, m_step_gaussians, m_step_gaussians_coupled, optimize_deformation, ClassPrior, EStep,
    FitConfig, LesionCoupling, Phase, SoftAssignments, TraceEntry,
};
use crate::atlas::{deformation_log_prior, rasterize, AtlasMesh};
use crate::error::{Error, Result};
use crate::likelihood::{
    eval_bias_basis, niw_log_density, AppearanceParams, BiasBasis, ClassSharingMap, Component, LesionIntensityPrior,
};
use crate::volume::{MultiContrastImage, VolumeGrid};

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Atlas with fitted vertex positions.
    pub mesh: AtlasMesh,
    pub params: AppearanceParams,
    /// Sharing map of the fitted model; includes the lesion class when augmented.
    pub sharing: ClassSharingMap,
    pub class_prior: ClassPrior,
    /// Responsibilities at the returned parameters.
    pub assignments: SoftAssignments,
    /// Responsibilities that produced the final Gaussian update.
    pub update_assignments: SoftAssignments,
    pub trace: Vec<TraceEntry>,
    pub objective: f64,
    pub converged: bool,
    pub lesion: Option<LesionCoupling>,
    pub bias_order: [usize; 3],
}

impl FitResult {
    pub fn lesion_component(&self) -> Option<usize> {
        let l = self.lesion?;
        self.params.class_components(l.lesion_class).map(|(i, _)| i).next()
    }

    pub fn wm_component(&self) -> Option<usize> {
        let l = self.lesion?;
        self.params.class_components(l.wm_class).map(|(i, _)| i).next()
    }

    /// Bias basis the fit was run with, evaluated on `grid`.
    pub fn bias_basis(&self, grid: &VolumeGrid) -> Result<BiasBasis> {
        eval_bias_basis(grid, self.bias_order)
    }
}

/// Means and covariances from data moments weighted by the class prior.
/// Components of a multi-Gaussian class are spread around the class mean.
pub fn initial_params(
    image: &MultiContrastImage,
    basis: &BiasBasis,
    class_prior: &[f64],
    sharing: &ClassSharingMap,
    diagonal_mode: bool,
    ridge: f64,
) -> Result<AppearanceParams> {
    let n = image.n_contrasts();
    let g = sharing.n_classes();
    let n_vox = image.n_voxels();
    if class_prior.len() != n_vox * g {
        return Err(Error::InvalidInput("class prior does not match the sharing map".into()));
    }
    let mut components = Vec::with_capacity(sharing.n_components());
    for class in 0..g {
        let weights: Vec<f64> = (0..n_vox).map(|i| class_prior[i * g + class]).collect();
        let m = moments_from_weights(image, &weights);
        let (mean, mut cov) = if m.n > VANISHING {
            (m.mean.clone(), &m.scatter / m.n)
        } else {
            // class absent from the field of view: fall back to global moments
            let all = moments_from_weights(image, &vec![1.0; n_vox]);
            (all.mean.clone(), &all.scatter / all.n)
        };
        if diagonal_mode {
            cov = DMatrix::from_diagonal(&cov.diagonal());
        }
        cov += DMatrix::identity(n, n) * ridge;
        let count = sharing.components_per_class[class];
        let sd = cov.diagonal().map(f64::sqrt);
        for k in 0..count {
            let offset = if count > 1 { k as f64 / (count - 1) as f64 - 0.5 } else { 0.0 };
            components.push(Component {
                class,
                weight: sharing.mixture_weights[class][k],
                mean: &mean + &sd * offset,
                cov: cov.clone(),
            });
        }
    }
    AppearanceParams::new(components, DMatrix::zeros(n, basis.n_basis()), diagonal_mode)
}

/// Move the constant bias column into the means; the model is unchanged.
fn absorb_constant(params: &mut AppearanceParams) {
    let dc = params.bias_coeffs.column(0).into_owned();
    for c in params.components.iter_mut() {
        c.mean += &dc;
    }
    params.bias_coeffs.column_mut(0).fill(0.0);
}

fn prior_terms(mesh: &AtlasMesh, params: &AppearanceParams, coupling: Option<&LesionCoupling>) -> Result<f64> {
    let mut total = deformation_log_prior(mesh).value;
    if let Some(c) = coupling {
        if c.nu > 0.0 {
            let wm = params.class_components(c.wm_class).next().map(|(_, x)| x);
            let les = params.class_components(c.lesion_class).next().map(|(_, x)| x);
            if let (Some(wm), Some(les)) = (wm, les) {
                total += niw_log_density(&les.mean, &les.cov, &wm.mean, &wm.cov, c.nu, c.kappa)?;
            }
        }
    }
    Ok(total)
}

struct State<'a> {
    image: &'a MultiContrastImage,
    basis: BiasBasis,
    prior: ClassPrior,
    coupling: Option<LesionCoupling>,
    mesh: AtlasMesh,
    class_prior: Vec<f64>,
    params: AppearanceParams,
    trace: Vec<TraceEntry>,
}

impl State<'_> {
    fn refresh_prior(&mut self) -> Result<()> {
        let rast = rasterize(&self.mesh, self.image.grid())?;
        self.class_prior = self.prior.interpolate(&rast);
        Ok(())
    }

    fn expect(&mut self, iteration: usize, phase: Phase) -> Result<(EStep, f64)> {
        let e = e_step(self.image, &self.basis, &self.class_prior, &self.params)?;
        let objective = e.log_likelihood + prior_terms(&self.mesh, &self.params, self.coupling.as_ref())?;
        log::debug!("iteration {iteration} {}: {objective:.10e}", phase.as_str());
        self.trace.push(TraceEntry { iteration, phase, objective });
        Ok((e, objective))
    }
}

fn run(
    image: &MultiContrastImage,
    mesh: AtlasMesh,
    sharing: ClassSharingMap,
    prior: ClassPrior,
    coupling: Option<LesionCoupling>,
    config: &FitConfig,
) -> Result<FitResult> {
    config.validate()?;
    let basis = eval_bias_basis(image.grid(), config.bias_order)?;
    let ridge = covariance_ridge(image);
    let mut st = State {
        image,
        basis,
        prior,
        coupling,
        mesh,
        class_prior: Vec::new(),
        params: AppearanceParams::new(Vec::new(), DMatrix::zeros(image.n_contrasts(), 1), false)?,
        trace: Vec::new(),
    };
    st.refresh_prior()?;
    st.params = initial_params(image, &st.basis, &st.class_prior, &sharing, config.diagonal_mode, ridge)?;
    if let Some(c) = &coupling {
        // lesion Gaussian starts at the white-matter mean with inflated spread
        let wm = st.params.class_components(c.wm_class).next().map(|(i, _)| i).expect("validated class");
        let les = st.params.class_components(c.lesion_class).next().map(|(i, _)| i).expect("validated class");
        st.params.components[les].mean = st.params.components[wm].mean.clone();
        st.params.components[les].cov = &st.params.components[wm].cov * c.kappa;
    }

    let (mut e, mut objective) = st.expect(0, Phase::Init)?;
    let mut update_w = e.assignments.clone();
    let mut converged = false;
    for outer in 1..=config.max_outer_iters {
        let start = objective;
        for _ in 0..config.gem_iters_per_outer {
            st.params.bias_coeffs = m_step_bias(image, &st.basis, &e.assignments, &st.params)?;
            absorb_constant(&mut st.params);
            (e, _) = st.expect(outer, Phase::Bias)?;

            st.params = match &coupling {
                Some(c) => m_step_gaussians_coupled(image, &st.basis, &e.assignments, &st.params, c, ridge)?,
                None => m_step_gaussians(image, &st.basis, &e.assignments, &st.params, ridge)?,
            };
            update_w = e.assignments;
            (e, objective) = st.expect(outer, Phase::Gaussians)?;
        }
        if config.deformation.max_steps > 0 {
            let out = optimize_deformation(&mut st.mesh, image, &st.basis, &st.params, &st.prior, &config.deformation, config.pin_boundary)?;
            if out.steps > 0 {
                st.refresh_prior()?;
                (e, objective) = st.expect(outer, Phase::Deformation)?;
            }
        }
        let scale = e.log_likelihood.abs().max(1.0);
        log::info!("outer iteration {outer}: objective {objective:.10e}");
        if (objective - start).abs() < config.convergence_tol * scale {
            converged = true;
            break;
        }
    }
    Ok(FitResult {
        mesh: st.mesh,
        params: st.params,
        sharing,
        class_prior: st.prior,
        assignments: e.assignments,
        update_assignments: update_w,
        trace: st.trace,
        objective,
        converged,
        lesion: coupling,
        bias_order: config.bias_order,
    })
}

/// Fit the atlas-based model without a lesion class.
pub fn fit(image: &MultiContrastImage, mesh: &AtlasMesh, sharing: &ClassSharingMap, config: &FitConfig) -> Result<FitResult> {
    sharing.validate()?;
    let prior = ClassPrior::from_mesh(mesh, sharing)?;
    run(image, mesh.clone(), sharing.clone(), prior, None, config)
}

/// Fit the model extended with a lesion class whose Gaussian is tied to white
/// matter by `lesion_prior`; lesion shape probabilities are taken as 1.
pub fn fit_lesion_augmented(
    image: &MultiContrastImage,
    mesh: &AtlasMesh,
    sharing: &ClassSharingMap,
    lesion_prior: &LesionIntensityPrior,
    config: &FitConfig,
) -> Result<FitResult> {
    sharing.validate()?;
    lesion_prior.validate()?;
    let wm_class = sharing.wm_class.ok_or_else(|| Error::Config("lesion model needs a white-matter class".into()))?;
    if sharing.components_per_class[wm_class] != 1 {
        return Err(Error::Config("the white-matter class must be a single Gaussian".into()));
    }
    if sharing.n_labels() != mesh.n_labels() {
        return Err(Error::InvalidInput("sharing map does not match the atlas labels".into()));
    }
    let nu = lesion_prior.nu_effective(image.grid());
    let min_nu = LesionIntensityPrior::min_proper_nu(image.n_contrasts());
    if nu > 0.0 && nu <= min_nu {
        return Err(Error::Config(format!("effective nu = {nu} must be 0 or exceed {min_nu}")));
    }
    let (augmented, lesion_class) = sharing.with_extra_class();
    let prior = ClassPrior::new(&mesh.augmented_alpha(), &augmented)?;
    let coupling = LesionCoupling { wm_class, lesion_class, nu, kappa: lesion_prior.kappa };
    run(image, mesh.clone(), augmented, prior, Some(coupling), config)
}
