//! Natural-gradient Gaussian variational inference on the mean and Cholesky
//! factor, and its extension to Gaussian-mixture approximations.

pub mod error;
pub mod gauss_vi;
pub mod matcalc;
pub mod mixture_vi;
pub mod model;
pub mod optim;

pub use error::{Error, Result};
pub use gauss_vi::{EstimatorKind, GaussianApprox, GradientEstimate};
pub use matcalc::HalfVec;
pub use mixture_vi::MixtureApprox;
pub use model::{ExactGaussianPosterior, TargetModel};
