//! Natural-gradient Gaussian variational approximation with factor covariance
//! (NAGVAC) for Bayesian deep feedforward GLMs and GLMMs.
//!
//! The variational family is N(mu, BB' + D^2) with a tall lower-triangular
//! loading matrix B and diagonal D. Lower-bound gradients come from the
//! reparametrization trick; steps are preconditioned by the inverse Fisher
//! information of the family, computed in closed form for one factor and by
//! matrix-free conjugate gradients otherwise. On top of that sit the DeepGLM
//! and DeepGLMM models (feedforward mean functions, exponential-family
//! likelihoods, adaptive group-lasso shrinkage, importance-sampled gradients
//! for random-effects panels), a stochastic trainer with lower-bound
//! stopping, predictive evaluation, and data generators.

pub mod datagen;
pub mod deepglm;
pub mod deepglmm;
pub mod error;
pub mod evalpredict;
pub mod factor_gaussian;
pub mod linalg;
pub mod natural_gradient;
pub mod trainer;

pub use error::{Error, Result};
pub use factor_gaussian::{FactorGaussian, LBGradientEstimate};
