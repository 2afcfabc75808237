//! Distances, convergence statistics and diagnostics.

mod assignment;
mod moments;
mod quadrature;
mod residual;
mod wasserstein;
mod weak;

pub use assignment::{min_cost_assignment, MAX_ASSIGNMENT_SIZE};
pub use moments::{
    appendix_moment_check, moment_diagnostics, AppendixRow, AppendixTable, MomentReport,
    MomentSource,
};
pub use quadrature::GaussLegendre;
pub use residual::{
    mu_stats_exact, mu_stats_grid, mu_stats_importance, residual_terms, ImportanceStats,
    ResidualSample,
};
pub use wasserstein::{
    w2_assignment, w2_gaussian, w2_paired_reference, w2_semidiscrete_1d, w2_sorted_1d, W2Method,
    W2Result, DEFAULT_QUADRATURE_ORDER,
};
pub use weak::{ensemble_average, rmse, sum_sin, sum_sin_reference, weak_statistic};
