//! Gaussian mixture models fitted by expectation-maximization.

mod em;
mod model;

pub use em::{
    e_step, em_fit, em_refine, init_params, log_likelihood, m_step, EmOptions, GmmFit, InitStrategy,
    Responsibilities, DEFAULT_REG_FLOOR,
};
pub use model::{gmm_sample, CovarianceType, Covariance, GmmModel};
