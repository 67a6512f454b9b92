//! Separable multivariate Gaussian random fields: simulation, two-stage
//! sparse-precision fitting, co-kriging prediction and an MLE baseline.

pub mod error;
pub mod gsps;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod mle;
pub mod model;
pub mod optim;
pub mod predict;
pub mod seed;
pub mod simulate;
pub mod stage1;
pub mod stage2;

pub use error::{GspsError, Result};
pub use gsps::{
    estimate_gamma, gsps_fit, partition_random, AlphaChoice, BlockPartition, GammaPooling, GspsConfig, GspsFit,
};
pub use mle::{mle_fit, neg_loglik, MleConfig, MleFit};
pub use model::{
    correlation_grad, correlation_hess, correlation_matrix, correlation_vector, distance_matrix, kronecker_cov,
    CorrelationFamily, CorrelationModel, Dataset, Location, SeparableModel, ThetaBounds, WeightMatrix,
};
pub use predict::{mspe, mspe_dataset, BlockRule, BlockedPredictor, Predict, Predictor};
pub use seed::derive_seed;
pub use simulate::{random_true_params, sample_grf, SimulationSpec};
pub use stage1::{admm_solve, sample_covariance, PrecisionEstimate, SolverConfig, SpectralBounds, Stage1Problem};
pub use stage2::{fit_theta, stage2_gradient, stage2_hessian, stage2_objective, CovarianceBlock, ThetaFit};
pub use harness::{fit_independent, run_crossval, run_experiment, ExperimentReport, ExperimentSpec, FitSettings, FittedModel};
pub use io::{FitMethod, FittedModelFile};
