//! Kalman–Bucy filtering for linear Gaussian systems whose signal drift is
//! only known to lie in a box `|θ_i| ≤ μ_i`.
//!
//! The crate covers the model and its validation, the Riccati and
//! transition-matrix integrators, seeded path simulation with Girsanov
//! reweighting, the classical and drift-adjusted filters, the
//! classical-plus-correction decomposition of the adjusted estimate, and the
//! minimax search for a robust filter drift.

pub mod config;
pub mod decomposition;
pub mod error;
pub mod export;
pub mod filter;
pub mod linalg;
pub mod minimax;
pub mod model;
pub mod ode;
pub mod simulate;
pub mod stats;

pub use decomposition::{
    correction_term, decomposed_estimate, impulse_response, CorrectionKernel, DecompositionTable, Kernel,
};
pub use error::{Error, Result};
pub use filter::{
    innovation_diagnostics, run_classical_filter, run_robust_filter, FilterEngine, FilterRun, WhitenessReport,
};
pub use linalg::NodeSeries;
pub use minimax::{
    best_response_theta, mse_exact, mse_monte_carlo, robust_theta_hat, saddle_report, BestResponse,
    MinimaxProblem, PolicyClass, RobustEstimate, SaddleReport, SearchOptions,
};
pub use model::{
    clamp_policy, validate_model, validate_model_for_simulation, ConstantCoefficients, DriftPolicy,
    ModelSchedule, TimeGrid, UncertaintyBound, ValidatedModel,
};
pub use ode::{
    solve_error_stats, solve_riccati, transition, BiasPropagator, ErrorStats, Generator, RiccatiPath,
    TransitionTable,
};
pub use simulate::{
    girsanov_log_density, map_paths, reweighted_mean, simulate_path, simulate_paths, PathEnsemble, SamplePath,
};
pub use stats::McEstimate;
