//! The canned experiments. Each one sweeps independent `(J, seed)` trials on a
//! bounded worker pool and returns rows sorted into a fixed order, so output
//! does not depend on the thread count.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use eki_core::linalg::symmetric_spectral_norm;
use eki_core::meanfield::{Coupling, CoupledConfig, LinearFlowSource, ReferenceTable};
use eki_core::metrics::{
    ensemble_average, mu_stats_exact, mu_stats_grid, mu_stats_importance, residual_terms,
    sum_sin, sum_sin_reference, w2_gaussian, w2_paired_reference, w2_semidiscrete_1d,
    w2_sorted_1d,
};
use eki_core::noise::{combine_ids, sample_gaussian};
use eki_core::{
    gaussian_flow, run_bridge_observed, run_coupled, run_eki_observed, EkiRunConfig, Ensemble,
    FlowStats, FlowStatsSource, GaussianDensity, Mode, NoiseStream, Record, SpdMatrix,
};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::{
    CouplingSpec, ExperimentConfig, FlowSourceSpec, Problem, RateQuantity, TestFunction,
    W2Estimator,
};
use crate::fit::{fit_rate, Aggregate, RateFit};
use crate::rows::{sort_rows, ResultRow};
use crate::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Rates,
    PosteriorCheck,
    Coupling,
    Weak,
    Residuals,
}

impl Experiment {
    pub const ALL: [Experiment; 5] = [
        Self::Rates,
        Self::PosteriorCheck,
        Self::Coupling,
        Self::Weak,
        Self::Residuals,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Rates => "rates",
            Self::PosteriorCheck => "posterior-check",
            Self::Coupling => "coupling",
            Self::Weak => "weak",
            Self::Residuals => "residuals",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown experiment '{s}'")))
    }
}

/// Run-wide settings from the command line.
#[derive(Debug, Clone, Copy)]
pub struct Context {
    pub master_seed: u64,
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub experiment: &'static str,
    pub rows: Vec<ResultRow>,
    pub fit: Option<RateFit>,
    pub report: serde_json::Value,
    /// Points for `plot.dat`, already on log scales.
    pub plot: Vec<(f64, f64)>,
    pub plot_labels: &'static str,
    pub checks: Vec<CheckOutcome>,
    pub extra_files: Vec<(String, String)>,
}

impl ExperimentOutput {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// FNV-1a of an experiment name.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Trial identifier for `(master seed, experiment, J, seed index)`. Adding
/// ensemble sizes or seeds never changes the identifiers of existing trials.
pub fn trial_id(master: u64, experiment: &str, j: usize, seed: usize) -> u64 {
    combine_ids(&[master, name_hash(experiment), j as u64, seed as u64])
}

const REFERENCE_DRAW_TAG: u64 = 0x5EF0_0D12;

fn run_parallel<I, O, F>(threads: usize, items: &[I], f: F) -> Result<Vec<O>, HarnessError>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> Result<O, HarnessError> + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
    pool.install(|| items.par_iter().map(&f).collect())
}

fn trials(cfg: &ExperimentConfig) -> Vec<(usize, usize)> {
    cfg.solver
        .ensembles
        .iter()
        .flat_map(|&j| (0..cfg.solver.seeds).map(move |s| (j, s)))
        .collect()
}

fn trial_err(experiment: &'static str, j: usize, seed: usize) -> impl Fn(eki_core::Error) -> HarnessError {
    move |source| HarnessError::Trial {
        experiment,
        j,
        seed,
        source,
    }
}

fn eki_terminal(
    problem: &Problem,
    cfg: &ExperimentConfig,
    stream: &NoiseStream,
    j: usize,
    h: f64,
    mode: Mode,
    tid: u64,
) -> Result<Ensemble<f64>, eki_core::Error> {
    let run = EkiRunConfig::new(j, h, mode)
        .final_time(cfg.solver.final_time)
        .trial(tid)
        .record(Record::Last);
    run_eki_observed(&problem.model, &problem.prior, &run, stream, |_, _| {})
}

fn group_by_j(rows: &[ResultRow], metric: &str) -> Vec<(usize, Vec<f64>)> {
    let mut map: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.metric == metric) {
        map.entry(r.j).or_default().push((r.seed, r.value));
    }
    map.into_iter()
        .map(|(j, mut v)| {
            v.sort_by_key(|p| p.0);
            (j, v.into_iter().map(|p| p.1).collect())
        })
        .collect()
}

fn slope_check(cfg: &ExperimentConfig, fit: &RateFit) -> Vec<CheckOutcome> {
    let (lo, hi) = (cfg.check.slope_min, cfg.check.slope_max);
    if lo.is_none() && hi.is_none() {
        return Vec::new();
    }
    let lo = lo.unwrap_or(f64::NEG_INFINITY);
    let hi = hi.unwrap_or(f64::INFINITY);
    vec![CheckOutcome::new(
        "slope",
        (lo..=hi).contains(&fit.slope),
        format!("slope {:.4} ± {:.4}, required [{lo}, {hi}]", fit.slope, fit.stderr),
    )]
}

fn fit_plot(fit: &RateFit) -> Vec<(f64, f64)> {
    fit.per_j
        .iter()
        .map(|p| ((p.j as f64).ln(), p.mean.ln()))
        .collect()
}

fn fit_seed(master: u64, experiment: &str) -> u64 {
    trial_id(master, experiment, usize::MAX, usize::MAX)
}

pub fn run_experiment(
    which: Experiment,
    cfg: &ExperimentConfig,
    ctx: &Context,
) -> Result<ExperimentOutput, HarnessError> {
    cfg.validate()?;
    match which {
        Experiment::Rates => run_rates(cfg, ctx),
        Experiment::PosteriorCheck => run_posterior_check(cfg, ctx),
        Experiment::Coupling => run_coupling(cfg, ctx),
        Experiment::Weak => run_weak(cfg, ctx),
        Experiment::Residuals => run_residuals(cfg, ctx),
    }
}

fn w2_metric_name(est: W2Estimator) -> &'static str {
    match est {
        W2Estimator::Semidiscrete => "w2_semidiscrete",
        W2Estimator::Paired => "w2_paired",
        W2Estimator::SortedReference => "w2_sorted_reference",
        W2Estimator::Gaussian => "w2_gaussian",
    }
}

fn require_1d(problem: &Problem, what: &str) -> Result<(), HarnessError> {
    if problem.model.dim_u() != 1 {
        return Err(HarnessError::Config(format!(
            "{what} needs a one-dimensional parameter, got L={}",
            problem.model.dim_u()
        )));
    }
    Ok(())
}

fn w2_to_flow(
    ens: &Ensemble<f64>,
    flow: &GaussianDensity<f64>,
    cfg: &ExperimentConfig,
    stream: &NoiseStream,
    tid: u64,
) -> Result<f64, eki_core::Error> {
    let reference_noise = stream.trial(combine_ids(&[tid, REFERENCE_DRAW_TAG]));
    let m = &cfg.metric;
    Ok(match m.w2 {
        W2Estimator::Semidiscrete => {
            w2_semidiscrete_1d(&ens.coordinate(0), flow.quantile_fn()?, m.quadrature_order)?.value
        }
        W2Estimator::SortedReference => {
            let other = flow.sample(ens.size(), &reference_noise, 0)?;
            w2_sorted_1d(&ens.coordinate(0), other.as_slice())?.value
        }
        W2Estimator::Paired => {
            w2_paired_reference(ens.particles(), flow, m.reference_draws, &reference_noise, 0)?.value
        }
        W2Estimator::Gaussian => {
            let fit = GaussianDensity::new(ens.mean(), SpdMatrix::new(ens.covariance())?)?;
            w2_gaussian(&fit, flow)?.value
        }
    })
}

fn cov_error(ens: &Ensemble<f64>, flow: &GaussianDensity<f64>) -> f64 {
    symmetric_spectral_norm(&ens.covariance().sub(flow.cov.matrix()).symmetrized())
}

fn run_rates(cfg: &ExperimentConfig, ctx: &Context) -> Result<ExperimentOutput, HarnessError> {
    const NAME: &str = "rates";
    cfg.validate_for_rates()?;
    let problem = cfg.build_problem()?;
    let t_end = cfg.solver.final_time;
    let flow = gaussian_flow(&problem.prior, &problem.model, t_end)?;
    let quantity = cfg.metric.quantity;
    if quantity == RateQuantity::W2
        && matches!(cfg.metric.w2, W2Estimator::Semidiscrete | W2Estimator::SortedReference)
    {
        require_1d(&problem, "a one-dimensional W2 estimator")?;
    }
    let metric = match quantity {
        RateQuantity::W2 => w2_metric_name(cfg.metric.w2),
        RateQuantity::BridgeCovError => "bridge_cov_error",
    };
    let stream = NoiseStream::new(ctx.master_seed);
    let source = LinearFlowSource {
        prior: &problem.prior,
        model: &problem.model,
    };
    let mut rows = run_parallel(ctx.threads, &trials(cfg), |&(j, s)| {
        let tid = trial_id(ctx.master_seed, NAME, j, s);
        let value = match quantity {
            RateQuantity::W2 => {
                let ens = eki_terminal(&problem, cfg, &stream, j, cfg.solver.h, cfg.solver.mode.into(), tid)
                    .map_err(trial_err(NAME, j, s))?;
                w2_to_flow(&ens, &flow, cfg, &stream, tid).map_err(trial_err(NAME, j, s))?
            }
            RateQuantity::BridgeCovError => {
                let mut run = CoupledConfig::new(j, cfg.solver.h);
                run.final_time = t_end;
                run.trial_id = tid;
                let v = run_bridge_observed(&problem.model, &problem.prior, &run, &stream, &source, |_, _| {})
                    .map_err(trial_err(NAME, j, s))?;
                cov_error(&v, &flow)
            }
        };
        Ok(ResultRow::new(NAME, j, s, t_end, metric, value))
    })?;
    sort_rows(&mut rows);
    let fit = fit_rate(
        &group_by_j(&rows, metric),
        Aggregate::Mean,
        cfg.metric.bootstrap,
        fit_seed(ctx.master_seed, NAME),
    )?;
    Ok(ExperimentOutput {
        experiment: NAME,
        checks: slope_check(cfg, &fit),
        plot: fit_plot(&fit),
        plot_labels: "log(J) log(mean metric)",
        report: json!({ "metric": metric, "final_time": t_end }),
        fit: Some(fit),
        rows,
        extra_files: Vec::new(),
    })
}

fn mean_and_variance_rows(
    name: &'static str,
    j: usize,
    s: usize,
    t: f64,
    prefix: &str,
    ens: &Ensemble<f64>,
    flow: &GaussianDensity<f64>,
) -> Vec<ResultRow> {
    let mut rows = Vec::new();
    let mean = ens.mean();
    let cov = ens.covariance();
    if ens.dim() == 1 {
        rows.push(ResultRow::new(name, j, s, t, format!("{prefix}mean"), mean[0]));
        rows.push(ResultRow::new(name, j, s, t, format!("{prefix}variance"), cov[(0, 0)]));
    }
    let dm = eki_core::linalg::norm(&eki_core::linalg::sub_vec(&mean, &flow.mean));
    rows.push(ResultRow::new(name, j, s, t, format!("{prefix}mean_error"), dm));
    rows.push(ResultRow::new(name, j, s, t, format!("{prefix}cov_error"), cov_error(ens, flow)));
    rows
}

fn seed_average(rows: &[ResultRow], j: usize, metric: &str) -> Option<f64> {
    let v: Vec<f64> = rows
        .iter()
        .filter(|r| r.j == j && r.metric == metric)
        .map(|r| r.value)
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn gap_metric(h: f64) -> String {
    format!("discrete_sde_gap[h={h}]")
}

fn run_posterior_check(cfg: &ExperimentConfig, ctx: &Context) -> Result<ExperimentOutput, HarnessError> {
    const NAME: &str = "posterior-check";
    let problem = cfg.build_problem()?;
    let t_end = cfg.solver.final_time;
    let flow = gaussian_flow(&problem.prior, &problem.model, t_end)?;
    let stream = NoiseStream::new(ctx.master_seed);
    let one_d = problem.model.dim_u() == 1;

    let mut rows: Vec<ResultRow> = run_parallel(ctx.threads, &trials(cfg), |&(j, s)| {
        let tid = trial_id(ctx.master_seed, NAME, j, s);
        let ens = eki_terminal(&problem, cfg, &stream, j, cfg.solver.h, cfg.solver.mode.into(), tid)
            .map_err(trial_err(NAME, j, s))?;
        let mut out = mean_and_variance_rows(NAME, j, s, t_end, "", &ens, &flow);
        let w2 = if one_d {
            w2_semidiscrete_1d(&ens.coordinate(0), flow.quantile_fn()?, cfg.metric.quadrature_order)?.value
        } else {
            let fit = GaussianDensity::new(ens.mean(), SpdMatrix::new(ens.covariance())?)?;
            w2_gaussian(&fit, &flow)?.value
        };
        out.push(ResultRow::new(NAME, j, s, t_end, "w2", w2));
        Ok(out)
    })?
    .into_iter()
    .flatten()
    .collect();

    // discrete and continuous schemes side by side under shared noise
    let gap_j = cfg.metric.gap_ensemble_size;
    let mut h_grid = cfg.metric.h_grid.clone();
    h_grid.sort_by(|a, b| b.total_cmp(a));
    let gap_items: Vec<(usize, usize)> = (0..h_grid.len())
        .flat_map(|hi| (0..cfg.solver.seeds).map(move |s| (hi, s)))
        .collect();
    let gap_rows = run_parallel(ctx.threads, &gap_items, |&(hi, s)| {
        let h = h_grid[hi];
        let tid = trial_id(ctx.master_seed, "posterior-check-gap", gap_j, s);
        let d = eki_terminal(&problem, cfg, &stream, gap_j, h, Mode::Discrete, tid)
            .map_err(trial_err(NAME, gap_j, s))?;
        let c = eki_terminal(&problem, cfg, &stream, gap_j, h, Mode::Sde, tid)
            .map_err(trial_err(NAME, gap_j, s))?;
        let diff = d.particles().sub(c.particles());
        let gap = (diff.as_slice().iter().map(|x| x * x).sum::<f64>() / gap_j as f64).sqrt();
        Ok(ResultRow::new(NAME, gap_j, s, t_end, gap_metric(h), gap))
    })?;
    rows.extend(gap_rows);

    // single-step schedule
    let one_shot_j = *cfg.solver.ensembles.last().expect("validated");
    let one_shot: Vec<ResultRow> = run_parallel(ctx.threads, &(0..cfg.solver.seeds).collect::<Vec<_>>(), |&s| {
        let tid = trial_id(ctx.master_seed, "posterior-check-one-shot", one_shot_j, s);
        let run = EkiRunConfig::new(one_shot_j, 1.0, Mode::Discrete).trial(tid).record(Record::Last);
        let ens = run_eki_observed(&problem.model, &problem.prior, &run, &stream, |_, _| {})
            .map_err(trial_err(NAME, one_shot_j, s))?;
        Ok(mean_and_variance_rows(NAME, one_shot_j, s, 1.0, "one_shot_", &ens, &flow))
    })?
    .into_iter()
    .flatten()
    .collect();
    rows.extend(one_shot);
    sort_rows(&mut rows);

    let mut per_j = Vec::new();
    for &j in &cfg.solver.ensembles {
        let mut entry = json!({
            "J": j,
            "mean_error": seed_average(&rows, j, "mean_error"),
            "cov_error": seed_average(&rows, j, "cov_error"),
            "w2": seed_average(&rows, j, "w2"),
        });
        if one_d {
            let m = seed_average(&rows, j, "mean").unwrap_or(f64::NAN);
            let v = seed_average(&rows, j, "variance").unwrap_or(f64::NAN);
            entry["seed_averaged_mean"] = json!(m);
            entry["seed_averaged_variance"] = json!(v);
            entry["abs_mean_error"] = json!((m - flow.mean[0]).abs());
            entry["abs_variance_error"] = json!((v - flow.cov.matrix()[(0, 0)]).abs());
        }
        per_j.push(entry);
    }
    let gaps: Vec<(f64, f64)> = h_grid
        .iter()
        .map(|&h| (h, seed_average(&rows, gap_j, &gap_metric(h)).unwrap_or(f64::NAN)))
        .collect();
    let monotone = gaps.windows(2).all(|w| w[1].1 < w[0].1);

    let mut checks = Vec::new();
    let last = per_j.last().expect("validated");
    if one_d {
        if let Some(tol) = cfg.check.mean_tol {
            let e = last["abs_mean_error"].as_f64().unwrap_or(f64::NAN);
            checks.push(CheckOutcome::new("mean", e <= tol, format!("|mean − posterior mean| = {e:.5}, tolerance {tol}")));
        }
        if let Some(tol) = cfg.check.var_tol {
            let e = last["abs_variance_error"].as_f64().unwrap_or(f64::NAN);
            checks.push(CheckOutcome::new("variance", e <= tol, format!("|variance − posterior variance| = {e:.5}, tolerance {tol}")));
        }
    } else {
        if let Some(tol) = cfg.check.mean_tol {
            let e = last["mean_error"].as_f64().unwrap_or(f64::NAN);
            checks.push(CheckOutcome::new("mean", e <= tol, format!("mean error {e:.5}, tolerance {tol}")));
        }
        if let Some(tol) = cfg.check.var_tol {
            let e = last["cov_error"].as_f64().unwrap_or(f64::NAN);
            checks.push(CheckOutcome::new("covariance", e <= tol, format!("covariance error {e:.5}, tolerance {tol}")));
        }
    }
    if cfg.check.gap_monotone {
        checks.push(CheckOutcome::new(
            "gap_monotone",
            monotone,
            format!("discrete-vs-SDE gaps {gaps:?}"),
        ));
    }
    let report = json!({
        "posterior_mean": flow.mean,
        "posterior_cov": flow.cov.matrix().as_slice(),
        "per_j": per_j,
        "gap_ensemble_size": gap_j,
        "gaps": gaps.iter().map(|&(h, g)| json!({"h": h, "mean_gap": g})).collect::<Vec<_>>(),
        "gap_monotone": monotone,
        "one_shot": {
            "J": one_shot_j,
            "mean_error": seed_average(&rows, one_shot_j, "one_shot_mean_error"),
            "cov_error": seed_average(&rows, one_shot_j, "one_shot_cov_error"),
        },
    });
    Ok(ExperimentOutput {
        experiment: NAME,
        rows,
        fit: None,
        report,
        plot: gaps.iter().filter(|g| g.1 > 0.0).map(|&(h, g)| (h.ln(), g.ln())).collect(),
        plot_labels: "log(h) log(mean discrete-SDE gap)",
        checks,
        extra_files: Vec::new(),
    })
}

enum Source<'a> {
    Linear(LinearFlowSource<'a, f64>),
    Table(ReferenceTable<f64>),
}

impl Source<'_> {
    fn get(&self) -> &(dyn FlowStatsSource<f64> + Sync) {
        match self {
            Self::Linear(s) => s,
            Self::Table(t) => t,
        }
    }
}

fn run_coupling(cfg: &ExperimentConfig, ctx: &Context) -> Result<ExperimentOutput, HarnessError> {
    const NAME: &str = "coupling";
    cfg.validate_for_rates()?;
    let problem = cfg.build_problem()?;
    let t_end = cfg.solver.final_time;
    let h = cfg.solver.h;
    let stream = NoiseStream::new(ctx.master_seed);
    let mut extra_files = Vec::new();
    let source = match cfg.metric.flow_source {
        FlowSourceSpec::Exact => {
            if !problem.model.is_linear() {
                return Err(eki_core::Error::NonlinearModel.into());
            }
            Source::Linear(LinearFlowSource {
                prior: &problem.prior,
                model: &problem.model,
            })
        }
        FlowSourceSpec::Reference => {
            let (l, k) = (problem.model.dim_u(), problem.model.dim_obs());
            let table = match &cfg.metric.reference_csv {
                Some(path) if path.exists() => {
                    let file = std::io::BufReader::new(std::fs::File::open(path)?);
                    ReferenceTable::read_csv(file, l, k)?
                }
                _ => {
                    let size = cfg.metric.reference_size;
                    let noise = stream.trial(trial_id(ctx.master_seed, "coupling-reference", size, 0));
                    ReferenceTable::build(&problem.model, &problem.prior, size, h, t_end, &noise)?
                }
            };
            let mut buf = Vec::new();
            table.write_csv(&mut buf)?;
            extra_files.push(("reference.csv".to_string(), String::from_utf8_lossy(&buf).into_owned()));
            Source::Table(table)
        }
    };
    let coupling = match cfg.metric.coupling {
        CouplingSpec::Shared => Coupling::SharedNoise,
        CouplingSpec::Independent => Coupling::Independent,
    };
    let mut rows: Vec<ResultRow> = run_parallel(ctx.threads, &trials(cfg), |&(j, s)| {
        let mut run = CoupledConfig::new(j, h);
        run.final_time = t_end;
        run.trial_id = trial_id(ctx.master_seed, NAME, j, s);
        run.coupling = coupling;
        let out = run_coupled(&problem.model, &problem.prior, &run, &stream, source.get())
            .map_err(trial_err(NAME, j, s))?;
        let errs = &out.coupling_errors;
        Ok(vec![
            ResultRow::new(NAME, j, s, 0.0, "coupling_error", errs[0]),
            ResultRow::new(NAME, j, s, t_end, "coupling_error", *errs.last().expect("non-empty")),
        ])
    })?
    .into_iter()
    .flatten()
    .collect();
    sort_rows(&mut rows);
    let terminal: Vec<ResultRow> = rows.iter().filter(|r| r.t == t_end).cloned().collect();
    let fit = fit_rate(
        &group_by_j(&terminal, "coupling_error"),
        Aggregate::Mean,
        cfg.metric.bootstrap,
        fit_seed(ctx.master_seed, NAME),
    )?;
    let max_start = rows
        .iter()
        .filter(|r| r.t == 0.0)
        .map(|r| r.value.abs())
        .fold(0.0, f64::max);
    let mut checks = slope_check(cfg, &fit);
    if cfg.check.zero_at_start {
        checks.push(CheckOutcome::new(
            "zero_at_start",
            max_start == 0.0,
            format!("largest coupling error at t=0: {max_start}"),
        ));
    }
    let reference_error = match &source {
        Source::Table(t) => Some(t.nominal_sampling_error()),
        Source::Linear(_) => None,
    };
    Ok(ExperimentOutput {
        experiment: NAME,
        checks,
        plot: fit_plot(&fit),
        plot_labels: "log(J) log(mean terminal coupling error)",
        report: json!({
            "coupling": format!("{:?}", cfg.metric.coupling).to_lowercase(),
            "max_error_at_start": max_start,
            "reference_sampling_error": reference_error,
        }),
        fit: Some(fit),
        rows,
        extra_files,
    })
}

fn run_weak(cfg: &ExperimentConfig, ctx: &Context) -> Result<ExperimentOutput, HarnessError> {
    const NAME: &str = "weak";
    let problem = cfg.build_problem()?;
    let t_end = cfg.solver.final_time;
    let flow = gaussian_flow(&problem.prior, &problem.model, t_end)?;
    let test_fn = cfg.metric.test_function;
    let reference = match test_fn {
        TestFunction::SumSin => sum_sin_reference(&flow),
        TestFunction::Constant => 1.0,
    };
    let f = move |u: &[f64]| match test_fn {
        TestFunction::SumSin => sum_sin(u),
        TestFunction::Constant => 1.0,
    };
    let stream = NoiseStream::new(ctx.master_seed);
    let mut rows = run_parallel(ctx.threads, &trials(cfg), |&(j, s)| {
        let tid = trial_id(ctx.master_seed, NAME, j, s);
        let ens = eki_terminal(&problem, cfg, &stream, j, cfg.solver.h, cfg.solver.mode.into(), tid)
            .map_err(trial_err(NAME, j, s))?;
        let estimate = ensemble_average(&ens, f);
        Ok(ResultRow::new(NAME, j, s, t_end, "abs_error", (estimate - reference).abs()))
    })?;
    sort_rows(&mut rows);
    let grouped = group_by_j(&rows, "abs_error");
    let rmse: Vec<(usize, f64)> = grouped
        .iter()
        .map(|(j, v)| (*j, (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()))
        .collect();
    let all_zero = rmse.iter().all(|r| r.1 == 0.0);
    let fit = if all_zero {
        None
    } else {
        cfg.validate_for_rates()?;
        Some(fit_rate(&grouped, Aggregate::Rms, cfg.metric.bootstrap, fit_seed(ctx.master_seed, NAME))?)
    };
    let checks = fit.as_ref().map(|f| slope_check(cfg, f)).unwrap_or_default();
    Ok(ExperimentOutput {
        experiment: NAME,
        checks,
        plot: fit.as_ref().map(fit_plot).unwrap_or_default(),
        plot_labels: "log(J) log(RMSE)",
        report: json!({
            "reference": reference,
            "rmse": rmse.iter().map(|&(j, r)| json!({"J": j, "rmse": r})).collect::<Vec<_>>(),
            "all_zero": all_zero,
        }),
        fit,
        rows,
        extra_files: Vec::new(),
    })
}

fn amp_metric(base: &str, amp: f64) -> String {
    format!("{base}[amp={amp}]")
}

fn run_residuals(cfg: &ExperimentConfig, ctx: &Context) -> Result<ExperimentOutput, HarnessError> {
    const NAME: &str = "residuals";
    let base = cfg.build_problem()?;
    let l = base.model.dim_u();
    if l > 4 {
        return Err(HarnessError::Config(format!("residual report supports L ≤ 4, got {l}")));
    }
    let m = &cfg.metric;
    if m.probe_times.is_empty() || m.probe_times.iter().any(|&t| !(t >= 0.0)) {
        return Err(HarnessError::Config("metric.probe_times must be non-negative and non-empty".into()));
    }
    let stream = NoiseStream::new(ctx.master_seed);
    let probe_noise = stream.trial(trial_id(ctx.master_seed, "residuals-probes", 0, 0));
    let points = sample_gaussian(&base.prior.mean, &base.prior.cov, m.probes, &probe_noise, 0)?;

    let jobs: Vec<(usize, usize)> = (0..m.amplitudes.len())
        .flat_map(|a| (0..m.probe_times.len()).map(move |t| (a, t)))
        .collect();
    let stats: Vec<FlowStats<f64>> = run_parallel(ctx.threads, &jobs, |&(ai, ti)| {
        let amp = m.amplitudes[ai];
        let t = m.probe_times[ti];
        let problem = cfg.problem.with_amplitude(amp).build()?;
        Ok(if problem.model.is_linear() {
            mu_stats_exact(&problem.model, &problem.prior, t)?
        } else if l <= 2 {
            mu_stats_grid(&problem.model, &problem.prior, t, 8.0, m.grid_points)?
        } else {
            let noise = stream.trial(trial_id(ctx.master_seed, "residuals-importance", ai, ti));
            mu_stats_importance(&problem.model, &problem.prior, t, m.importance_samples, &noise)?.stats
        })
    })?;

    let mut rows = Vec::new();
    let mut table = Vec::new();
    let mut checks = Vec::new();
    for (ai, &amp) in m.amplitudes.iter().enumerate() {
        let problem = cfg.problem.with_amplitude(amp).build()?;
        let mut abs = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
        for p in 0..m.probes {
            let ti = p % m.probe_times.len();
            let t = m.probe_times[ti];
            let r = residual_terms(&problem.model, &problem.prior, t, points.row(p), &stats[ai * m.probe_times.len() + ti])?;
            for (k, (name, v)) in [("r1", r.r1), ("r2", r.r2), ("r3", r.r3), ("total", r.total())]
                .into_iter()
                .enumerate()
            {
                rows.push(ResultRow::new(NAME, 0, p, t, amp_metric(name, amp), v));
                abs[k].push(v.abs());
            }
        }
        let summarize = |v: &[f64]| {
            json!({
                "max": v.iter().copied().fold(0.0, f64::max),
                "mean": v.iter().sum::<f64>() / v.len().max(1) as f64,
            })
        };
        let max_total = abs[3].iter().copied().fold(0.0, f64::max);
        let max_r3 = abs[2].iter().copied().fold(0.0, f64::max);
        table.push(json!({
            "amplitude": amp,
            "linear": problem.model.is_linear(),
            "r1": summarize(&abs[0]),
            "r2": summarize(&abs[1]),
            "r3": summarize(&abs[2]),
            "total": summarize(&abs[3]),
        }));
        if problem.model.is_linear() {
            if let Some(tol) = cfg.check.residual_tol {
                checks.push(CheckOutcome::new(
                    "linear_total",
                    max_total <= tol,
                    format!("amplitude {amp}: max |R1+R2+R3| = {max_total:e}, tolerance {tol:e}"),
                ));
                checks.push(CheckOutcome::new(
                    "linear_r3",
                    max_r3 == 0.0,
                    format!("amplitude {amp}: max |R3| = {max_r3:e}"),
                ));
            }
        }
    }
    sort_rows(&mut rows);
    let maxima: Vec<(f64, f64)> = table
        .iter()
        .map(|r| (r["amplitude"].as_f64().unwrap_or(0.0), r["total"]["max"].as_f64().unwrap_or(0.0)))
        .collect();
    let monotone = maxima.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 <= w[1].1);
    Ok(ExperimentOutput {
        experiment: NAME,
        rows,
        fit: None,
        report: json!({
            "probes": m.probes,
            "probe_times": m.probe_times,
            "table": table,
            "monotone_in_amplitude": monotone,
        }),
        plot: maxima
            .iter()
            .filter(|p| p.0 > 0.0 && p.1 > 0.0)
            .map(|&(a, r)| (a.ln(), r.ln()))
            .collect(),
        plot_labels: "log(amplitude) log(max |R1+R2+R3|)",
        checks,
        extra_files: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trial_ids_are_stable_and_distinct() {
        let a = trial_id(1, "rates", 32, 0);
        assert_eq!(a, trial_id(1, "rates", 32, 0));
        assert_ne!(a, trial_id(1, "rates", 32, 1));
        assert_ne!(a, trial_id(1, "rates", 64, 0));
        assert_ne!(a, trial_id(1, "weak", 32, 0));
        assert_ne!(a, trial_id(2, "rates", 32, 0));
    }

    #[test]
    fn experiment_names_parse() {
        for e in Experiment::ALL {
            assert_eq!(e.name().parse::<Experiment>().unwrap(), e);
        }
        assert!("nope".parse::<Experiment>().is_err());
    }
}
