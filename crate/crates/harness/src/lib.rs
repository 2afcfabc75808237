//! Experiment sweeps over ensemble size and seed, rate fits, and result files
//! for the `eki` command-line tool.

pub mod config;
pub mod experiments;
pub mod fit;
pub mod output;
pub mod rows;

pub use config::ExperimentConfig;
pub use experiments::{run_experiment, CheckOutcome, Context, Experiment, ExperimentOutput};
pub use fit::{fit_rate, Aggregate, RateFit};
pub use rows::ResultRow;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),
    #[error("{experiment} trial J={j} seed={seed}: {source}")]
    Trial {
        experiment: &'static str,
        j: usize,
        seed: usize,
        source: eki_core::Error,
    },
    #[error(transparent)]
    Core(#[from] eki_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}
