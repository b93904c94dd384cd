//! MAP estimation and the Laplace posterior.

mod ghep;
mod misfit;
mod newton;
mod posterior;

pub use ghep::{adaptive_ghep, randomized_ghep, Eigenpairs, GhepConfig};
pub use misfit::{gn_hessian_apply, misfit_cost_grad, LikelihoodScale, LinearGaussianMisfit, Misfit, MisfitContext, TumorPoint};
pub use newton::{compute_map, ConvergenceReport, NewtonConfig, NewtonIteration};
pub use posterior::{
    exact_posterior_variance, laplace_posterior, pointwise_posterior_variance, posterior_sample, predict,
    LowRankPosterior, PredictionEnsemble,
};
