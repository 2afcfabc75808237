//! Ensemble Kalman inversion (discrete and continuous time), its mean-field
//! bridge system, and the measurement tools used to check convergence rates.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix `f64`, which is what the experiments use.

pub mod eki;
pub mod error;
pub mod linalg;
pub mod meanfield;
pub mod metrics;
pub mod model;
pub mod noise;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use eki::{
    eki_discrete_step, eki_sde_step, ensemble_stats, run_eki, run_eki_observed, EkiRunConfig,
    Ensemble, EnsembleStats, Mode, Record, Trajectory,
};
pub use linalg::{Matrix, SpdMatrix};
pub use meanfield::{
    bridge_step, fp_residual_check, gaussian_flow, run_bridge_observed, run_coupled, Coupling,
    CoupledConfig, CoupledRun, FlowStats, FlowStatsSource, GaussianDensity, LinearFlowSource,
    ReferenceTable,
};
pub use model::{ForwardModel, Prior};
pub use noise::{NoiseStream, TrialNoise};

pub type Matrix64 = Matrix<f64>;
pub type SpdMatrix64 = SpdMatrix<f64>;
pub type Ensemble64 = Ensemble<f64>;
pub type ForwardModel64 = ForwardModel<f64>;
pub type Prior64 = Prior<f64>;
pub type GaussianDensity64 = GaussianDensity<f64>;
pub type FlowStats64 = FlowStats<f64>;
pub type Trajectory64 = Trajectory<f64>;
