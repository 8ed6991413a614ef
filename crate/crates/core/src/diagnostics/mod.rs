pub mod gradients;
pub mod inits;
pub mod metrics;

pub use gradients::{
    compare_inits, grad_bias, grad_mse, grad_stats, grad_variance, CmProblem, CurvePoint, Estimate, GradDraws,
    GradSample, GradSamples, GradStats, InitComparison, InitReport, PostTrainSpec, Surrogate, MIN_GRAD_SAMPLES,
};
pub use inits::InitBudget;
pub use metrics::{
    ctm_mf_identity, fit_order, nfe_per_pair, round_trip_order_fit, sliced_w2, solver_order_fit, wasserstein_1d,
    NfeScheme, OrderFit,
};
