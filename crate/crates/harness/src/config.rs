//! TOML experiment configuration.

use std::path::{Path, PathBuf};

use eki_core::{ForwardModel, Matrix, Mode, Prior, SpdMatrix};
use serde::{Deserialize, Serialize};

use crate::HarnessError;

/// A matrix given either as rows or as a short text form:
/// `"identity"`, `"identity*<c>"` or `"diag(<d1>, <d2>, ...)"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Rows(Vec<Vec<f64>>),
    Text(String),
}

impl MatrixSpec {
    fn explicit_shape(&self) -> Option<(usize, usize)> {
        match self {
            Self::Rows(r) => Some((r.len(), r.first().map_or(0, Vec::len))),
            Self::Text(t) => parse_diag(t).ok().flatten().map(|d| (d.len(), d.len())),
        }
    }

    /// Resolves to a `rows × cols` matrix; text forms must be square.
    pub fn resolve(&self, what: &str, rows: usize, cols: usize) -> Result<Matrix<f64>, HarnessError> {
        let m = match self {
            Self::Rows(r) => Matrix::from_rows(r)?,
            Self::Text(text) => {
                let t = text.trim();
                if let Some(d) = parse_diag(t)? {
                    Matrix::from_diag(&d)
                } else if t == "identity" {
                    Matrix::identity(rows)
                } else if let Some(c) = t.strip_prefix("identity*") {
                    let c: f64 = c.trim().parse().map_err(|_| {
                        HarnessError::Config(format!("{what}: bad scale in '{text}'"))
                    })?;
                    Matrix::identity(rows).scale(c)
                } else {
                    return Err(HarnessError::Config(format!("{what}: unrecognised matrix '{text}'")));
                }
            }
        };
        if m.shape() != (rows, cols) {
            return Err(HarnessError::Config(format!(
                "{what}: expected {rows}×{cols}, got {}×{}",
                m.rows(),
                m.cols()
            )));
        }
        Ok(m)
    }
}

fn parse_diag(t: &str) -> Result<Option<Vec<f64>>, HarnessError> {
    let Some(inner) = t.trim().strip_prefix("diag(").and_then(|s| s.strip_suffix(')')) else {
        return Ok(None);
    };
    inner
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| HarnessError::Config(format!("bad diagonal entry '{s}'")))
        })
        .collect::<Result<Vec<_>, _>>()
        .map(Some)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub dim_u: Option<usize>,
    pub dim_obs: Option<usize>,
    pub a: MatrixSpec,
    pub gamma: MatrixSpec,
    /// Observed data. If absent, generated from `u_true` and `noise_seed`.
    pub y: Option<Vec<f64>>,
    pub u_true: Option<Vec<f64>>,
    #[serde(default)]
    pub noise_seed: u64,
    pub prior_mean: Option<Vec<f64>>,
    pub prior_cov: Option<MatrixSpec>,
    #[serde(default)]
    pub amplitude: f64,
    #[serde(default)]
    pub nonlinearity_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeSpec {
    Sde,
    Discrete,
}

impl From<ModeSpec> for Mode {
    fn from(m: ModeSpec) -> Self {
        match m {
            ModeSpec::Sde => Mode::Sde,
            ModeSpec::Discrete => Mode::Discrete,
        }
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    #[serde(default = "default_mode")]
    pub mode: ModeSpec,
    pub h: f64,
    #[serde(default = "one")]
    pub final_time: f64,
    /// Ensemble sizes `J`, ascending.
    pub ensembles: Vec<usize>,
    pub seeds: usize,
    #[serde(default)]
    pub master_seed: u64,
}

fn default_mode() -> ModeSpec {
    ModeSpec::Sde
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum W2Estimator {
    /// Exact 1-D distance to the reference law via its quantile function.
    Semidiscrete,
    /// Assignment distance to fresh draws from the reference law.
    Paired,
    /// 1-D sorted distance to one fresh draw.
    SortedReference,
    /// Closed form between the ensemble's Gaussian fit and the reference law.
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateQuantity {
    /// W2 between the EKI ensemble and the flow at the final time.
    W2,
    /// Spectral norm of the bridge ensemble covariance error.
    BridgeCovError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestFunction {
    SumSin,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CouplingSpec {
    Shared,
    Independent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowSourceSpec {
    Exact,
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricSpec {
    pub quantity: RateQuantity,
    pub w2: W2Estimator,
    pub reference_draws: usize,
    pub quadrature_order: usize,
    pub test_function: TestFunction,
    pub coupling: CouplingSpec,
    pub flow_source: FlowSourceSpec,
    pub reference_size: usize,
    pub reference_csv: Option<PathBuf>,
    pub probes: usize,
    pub probe_times: Vec<f64>,
    pub amplitudes: Vec<f64>,
    pub importance_samples: usize,
    pub grid_points: usize,
    pub h_grid: Vec<f64>,
    pub gap_ensemble_size: usize,
    pub bootstrap: usize,
}

impl Default for MetricSpec {
    fn default() -> Self {
        Self {
            quantity: RateQuantity::W2,
            w2: W2Estimator::Semidiscrete,
            reference_draws: 4,
            quadrature_order: eki_core::metrics::DEFAULT_QUADRATURE_ORDER,
            test_function: TestFunction::SumSin,
            coupling: CouplingSpec::Shared,
            flow_source: FlowSourceSpec::Exact,
            reference_size: 1 << 16,
            reference_csv: None,
            probes: 100,
            probe_times: vec![0.25, 0.5, 0.75, 1.0],
            amplitudes: vec![0.0, 0.1, 0.2, 0.4],
            importance_samples: 1_000_000,
            grid_points: 201,
            h_grid: vec![1e-1, 1e-2, 1e-3],
            gap_ensemble_size: 64,
            bootstrap: 200,
        }
    }
}

/// Thresholds evaluated in check mode. Absent entries are not checked.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckSpec {
    pub slope_min: Option<f64>,
    pub slope_max: Option<f64>,
    pub mean_tol: Option<f64>,
    pub var_tol: Option<f64>,
    pub residual_tol: Option<f64>,
    #[serde(default)]
    pub gap_monotone: bool,
    #[serde(default)]
    pub zero_at_start: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    pub solver: SolverSpec,
    #[serde(default)]
    pub metric: MetricSpec,
    #[serde(default)]
    pub check: CheckSpec,
}

/// Problem instance built from a [`ProblemSpec`].
#[derive(Debug, Clone)]
pub struct Problem {
    pub model: ForwardModel<f64>,
    pub prior: Prior<f64>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let s = &self.solver;
        if s.ensembles.is_empty() {
            return Err(HarnessError::Config("solver.ensembles is empty".into()));
        }
        if s.ensembles.windows(2).any(|w| w[0] >= w[1]) {
            return Err(HarnessError::Config("solver.ensembles must be strictly ascending".into()));
        }
        if s.ensembles[0] < 2 {
            return Err(HarnessError::Config("ensemble sizes must be at least 2".into()));
        }
        if s.seeds == 0 {
            return Err(HarnessError::Config("solver.seeds must be positive".into()));
        }
        if !(s.h > 0.0 && s.final_time > 0.0) {
            return Err(HarnessError::Config("solver.h and solver.final_time must be positive".into()));
        }
        Ok(())
    }

    /// Checks the extra requirements of a rate fit.
    pub fn validate_for_rates(&self) -> Result<(), HarnessError> {
        if self.solver.ensembles.len() < 4 {
            return Err(HarnessError::Config("rate fits need at least 4 ensemble sizes".into()));
        }
        if self.solver.seeds < 8 {
            return Err(HarnessError::Config("rate fits need at least 8 seeds".into()));
        }
        Ok(())
    }

    pub fn build_problem(&self) -> Result<Problem, HarnessError> {
        self.problem.build()
    }
}

impl ProblemSpec {
    fn dims(&self) -> Result<(usize, usize), HarnessError> {
        let a_shape = self.a.explicit_shape();
        let l = self
            .dim_u
            .or(a_shape.map(|s| s.1))
            .or(self.prior_mean.as_ref().map(Vec::len))
            .or(self.u_true.as_ref().map(Vec::len))
            .ok_or_else(|| HarnessError::Config("cannot infer dim_u; set problem.dim_u".into()))?;
        let k = self
            .dim_obs
            .or(a_shape.map(|s| s.0))
            .or(self.y.as_ref().map(Vec::len))
            .unwrap_or(l);
        Ok((l, k))
    }

    pub fn build(&self) -> Result<Problem, HarnessError> {
        let (l, k) = self.dims()?;
        let a = self.a.resolve("problem.a", k, l)?;
        let gamma = SpdMatrix::new(self.gamma.resolve("problem.gamma", k, k)?)?;
        let y = match (&self.y, &self.u_true) {
            (Some(y), _) => y.clone(),
            (None, Some(u)) => eki_core::model::synthetic_data(&a, &gamma, u, self.noise_seed),
            (None, None) => {
                return Err(HarnessError::Config("set problem.y or problem.u_true".into()))
            }
        };
        if y.len() != k {
            return Err(HarnessError::Config(format!("problem.y has length {}, expected {k}", y.len())));
        }
        let mut model = ForwardModel::linear(a, gamma, y)?;
        if self.amplitude != 0.0 {
            model = model.with_nonlinearity(self.amplitude, self.nonlinearity_seed)?;
        }
        let mean = self.prior_mean.clone().unwrap_or_else(|| vec![0.0; l]);
        let cov = match &self.prior_cov {
            Some(spec) => SpdMatrix::new(spec.resolve("problem.prior_cov", l, l)?)?,
            None => SpdMatrix::identity(l),
        };
        let prior = Prior::new(mean, cov)?;
        Ok(Problem { model, prior })
    }

    /// Same problem with a different nonlinearity amplitude.
    pub fn with_amplitude(&self, amplitude: f64) -> Self {
        Self {
            amplitude,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CANONICAL: &str = r#"
[problem]
a = [[1.0]]
gamma = "identity*1.0"
y = [1.0]

[solver]
h = 0.01
ensembles = [32, 64, 128, 256]
seeds = 8
"#;

    #[test]
    fn parses_canonical() {
        let cfg = ExperimentConfig::from_toml(CANONICAL).unwrap();
        let p = cfg.build_problem().unwrap();
        assert_eq!(p.model.dim_u(), 1);
        assert_eq!(p.prior.mean, vec![0.0]);
        assert_eq!(cfg.metric.w2, W2Estimator::Semidiscrete);
        assert_eq!(cfg.solver.final_time, 1.0);
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig::from_toml(CANONICAL).unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn text_matrices() {
        let m = MatrixSpec::Text("diag(1, 2.5)".into()).resolve("x", 2, 2).unwrap();
        assert_eq!(m.diag(), vec![1.0, 2.5]);
        let m = MatrixSpec::Text("identity*0.5".into()).resolve("x", 3, 3).unwrap();
        assert_eq!(m.trace(), 1.5);
        assert!(MatrixSpec::Text("ones".into()).resolve("x", 2, 2).is_err());
    }

    #[test]
    fn rejects_unsorted_sizes_and_unknown_keys() {
        let bad = CANONICAL.replace("[32, 64, 128, 256]", "[64, 32]");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
        let unknown = CANONICAL.replace("seeds = 8", "seeds = 8\nsteps = 3");
        assert!(ExperimentConfig::from_toml(&unknown).is_err());
    }

    #[test]
    fn synthetic_data_when_y_absent() {
        let text = CANONICAL.replace("y = [1.0]", "u_true = [0.3]\nnoise_seed = 4");
        let p = ExperimentConfig::from_toml(&text).unwrap().build_problem().unwrap();
        assert_eq!(p.model.data().len(), 1);
    }
}
