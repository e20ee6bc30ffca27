//! Joint whole-brain and white-matter-lesion segmentation.
//!
//! A deformable tetrahedral-mesh atlas supplies label and lesion location
//! priors, a Gaussian likelihood with a smooth bias field models intensities,
//! and lesion intensities are tied to white matter by a normal-inverse-Wishart
//! prior. Parameters are fitted by generalized EM interleaved with quasi-Newton
//! mesh deformation; lesion posteriors come from a blocked Gibbs sampler that
//! uses a variational-autoencoder shape prior.

pub mod atlas;
pub mod error;
pub mod gem;
pub mod likelihood;
pub mod metrics;
pub mod phantom;
pub mod rng;
pub mod sampler;
pub mod shape_prior;
pub mod volume;

pub use error::{Error, Result};
