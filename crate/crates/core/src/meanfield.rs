//! Mean-field side: the closed-form Gaussian flow of the linear case, the
//! bridge particle system driven by the flow's statistics, and the shared-noise
//! coupling between bridge and EKI particles.

use std::io::{BufRead, Write};

use statrs::distribution::{ContinuousCDF, Normal};

use crate::eki::{
    advance_in_place, column_mean, cross_covariance, ensemble_stats, stats_with_forward, step_count,
    Ensemble,
    EnsembleStats, Record, StepOperator, Trajectory,
};
use crate::error::{Error, Result};
use crate::linalg::{dot, sub_vec, Matrix, SpdMatrix};
use crate::model::{gaussian_log_density, ForwardModel, Prior};
use crate::noise::{combine_ids, sample_gaussian, NoiseStream, TrialNoise};
use crate::scalar::Scalar;

/// `N(mean, cov)` as a density on `R^L`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDensity<T> {
    pub mean: Vec<T>,
    pub cov: SpdMatrix<T>,
}

impl<T: Scalar> GaussianDensity<T> {
    pub fn new(mean: Vec<T>, cov: SpdMatrix<T>) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(Error::DimensionMismatch {
                what: "Gaussian covariance",
                expected: mean.len(),
                got: cov.dim(),
            });
        }
        Ok(Self { mean, cov })
    }

    pub fn from_prior(prior: &Prior<T>) -> Self {
        Self {
            mean: prior.mean.clone(),
            cov: prior.cov.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_density(&self, u: &[T]) -> T {
        gaussian_log_density(&self.mean, &self.cov, u)
    }

    pub fn density(&self, u: &[T]) -> T {
        self.log_density(u).exp()
    }

    /// `∇ρ(u) = −ρ(u)·C⁻¹(u − m)`.
    pub fn gradient(&self, u: &[T]) -> Vec<T> {
        let rho = self.density(u);
        self.cov
            .solve(&sub_vec(u, &self.mean))
            .into_iter()
            .map(|x| -x * rho)
            .collect()
    }

    /// `H(ρ)(u) = ρ(u)·(C⁻¹(u−m)(u−m)ᵀC⁻¹ − C⁻¹)`.
    pub fn hessian(&self, u: &[T]) -> Matrix<T> {
        let rho = self.density(u);
        let w = self.cov.solve(&sub_vec(u, &self.mean));
        let inv = self.cov.inverse();
        Matrix::from_fn(self.dim(), self.dim(), |i, j| rho * (w[i] * w[j] - inv[(i, j)]))
    }

    /// Draws `n` samples at `(trial, step, row)`.
    pub fn sample(&self, n: usize, noise: &TrialNoise, step: u64) -> Result<Matrix<T>> {
        sample_gaussian(&self.mean, &self.cov, n, noise, step)
    }

    /// Quantile function of a one-dimensional Gaussian.
    pub fn quantile_fn(&self) -> Result<impl Fn(T) -> T + Clone> {
        if self.dim() != 1 {
            return Err(Error::DimensionMismatch {
                what: "quantile function (1-D only)",
                expected: 1,
                got: self.dim(),
            });
        }
        let normal = Normal::new(self.mean[0].as_f64(), self.cov.matrix()[(0, 0)].as_f64().sqrt())
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(move |q: T| T::of(normal.inverse_cdf(q.as_f64())))
    }
}

/// Exact solution of the linear-case flow at time `t`:
/// `C(t) = (C₀⁻¹ + t·AᵀΓ⁻¹A)⁻¹`, `m(t) = C(t)(C₀⁻¹u₀ + t·AᵀΓ⁻¹y)`.
pub fn gaussian_flow<T: Scalar>(
    prior: &Prior<T>,
    model: &ForwardModel<T>,
    t: T,
) -> Result<GaussianDensity<T>> {
    if !model.is_linear() {
        return Err(Error::NonlinearModel);
    }
    if t < T::zero() {
        return Err(Error::InvalidArgument(format!("flow time must be non-negative, got {t}")));
    }
    if t == T::zero() {
        return Ok(GaussianDensity::from_prior(prior));
    }
    let a = model.a();
    let gamma = model.gamma();
    let info = a.transpose().matmul(&gamma.solve_matrix(a));
    let prior_precision = prior.cov.inverse();
    let precision = SpdMatrix::new(prior_precision.add(&info.scale(t)).symmetrized())?;
    let rhs: Vec<T> = prior
        .cov
        .solve(&prior.mean)
        .into_iter()
        .zip(a.matvec_t(&gamma.solve(model.data())))
        .map(|(p, d)| p + t * d)
        .collect();
    let mean = precision.solve(&rhs);
    let cov = SpdMatrix::new(precision.inverse())?;
    GaussianDensity::new(mean, cov)
}

/// Moments of `ρ(t)` and of `G` under `ρ(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowStats<T> {
    pub t: T,
    /// `E_ρ`, length L.
    pub mean_rho: Vec<T>,
    /// `E_{G,ρ}`, length K.
    pub mean_g: Vec<T>,
    /// `Cov_ρ`, L×L.
    pub cov_rho: Matrix<T>,
    /// `Cov_{ρ,G}`, L×K.
    pub cov_rho_g: Matrix<T>,
    /// `Cov_{G,G}`, K×K.
    pub cov_gg: Matrix<T>,
}

impl<T: Scalar> FlowStats<T> {
    /// `Cov_{G,ρ} = Cov_{ρ,G}ᵀ`.
    pub fn cov_g_rho(&self) -> Matrix<T> {
        self.cov_rho_g.transpose()
    }

    /// Empirical counterpart built from ensemble statistics.
    pub fn from_ensemble(ens: &Ensemble<T>, model: &ForwardModel<T>) -> Self {
        let EnsembleStats {
            mean_u,
            mean_g,
            cpp,
            cup,
        } = ensemble_stats(ens, model);
        Self {
            t: ens.time,
            mean_rho: mean_u,
            mean_g,
            cov_rho: ens.covariance(),
            cov_rho_g: cup,
            cov_gg: cpp,
        }
    }
}

/// Exact statistics of a Gaussian flow under a linear model:
/// `Cov_{ρ,G} = Cov_ρ·Aᵀ`, `E_G = A·E_ρ`, `Cov_{G,G} = A·Cov_ρ·Aᵀ`.
pub fn flow_stats<T: Scalar>(
    flow: &GaussianDensity<T>,
    model: &ForwardModel<T>,
    t: T,
) -> Result<FlowStats<T>> {
    if !model.is_linear() {
        return Err(Error::NonlinearModel);
    }
    let a = model.a();
    let cov = flow.cov.matrix().clone();
    let cov_rho_g = cov.matmul(&a.transpose());
    let cov_gg = a.matmul(&cov_rho_g).symmetrized();
    Ok(FlowStats {
        t,
        mean_rho: flow.mean.clone(),
        mean_g: a.matvec(&flow.mean),
        cov_rho: cov,
        cov_rho_g,
        cov_gg,
    })
}

/// Monte Carlo estimate of [`FlowStats`] together with the largest standard
/// error over the entries of `Cov_{ρ,G}`.
#[derive(Debug, Clone)]
pub struct MonteCarloFlowStats<T> {
    pub stats: FlowStats<T>,
    pub stderr: T,
    pub samples: usize,
}

/// Estimates flow statistics of any model from `n` draws of `flow`.
pub fn flow_stats_monte_carlo<T: Scalar>(
    flow: &GaussianDensity<T>,
    model: &ForwardModel<T>,
    t: T,
    n: usize,
    noise: &TrialNoise,
) -> Result<MonteCarloFlowStats<T>> {
    if n < 2 {
        return Err(Error::InvalidArgument("Monte Carlo needs at least 2 samples".into()));
    }
    let u = flow.sample(n, noise, 0)?;
    let mut g = Matrix::zeros(n, model.dim_obs());
    for j in 0..n {
        model.apply_into(u.row(j), g.row_mut(j));
    }
    let mean_rho = column_mean(&u);
    let mean_g = column_mean(&g);
    let cov_rho_g = cross_covariance(&u, &g);
    // per-entry standard error of the mean of the centered products
    let (l, k) = cov_rho_g.shape();
    let mut second: Matrix<T> = Matrix::zeros(l, k);
    for (ru, rg) in u.iter_rows().zip(g.iter_rows()) {
        for i in 0..l {
            let du = ru[i] - mean_rho[i];
            for c in 0..k {
                let p = du * (rg[c] - mean_g[c]);
                second[(i, c)] = second[(i, c)] + p * p;
            }
        }
    }
    let nt = T::of_usize(n);
    let mut stderr = T::zero();
    for i in 0..l {
        for c in 0..k {
            let var = (second[(i, c)] / nt - cov_rho_g[(i, c)] * cov_rho_g[(i, c)]).max(T::zero());
            stderr = stderr.max((var / nt).sqrt());
        }
    }
    Ok(MonteCarloFlowStats {
        stats: FlowStats {
            t,
            mean_rho,
            mean_g,
            cov_rho: cross_covariance(&u, &u),
            cov_rho_g,
            cov_gg: cross_covariance(&g, &g).symmetrized(),
        },
        stderr,
        samples: n,
    })
}

/// Supplies `Cov_{ρ,G}` along the time grid `t_n = n·h`.
pub trait FlowStatsSource<T: Scalar> {
    fn cov_rho_g(&self, step: usize, t: T) -> Result<Matrix<T>>;
}

/// Exact statistics of the linear Gaussian flow.
#[derive(Debug, Clone)]
pub struct LinearFlowSource<'a, T> {
    pub prior: &'a Prior<T>,
    pub model: &'a ForwardModel<T>,
}

impl<T: Scalar> FlowStatsSource<T> for LinearFlowSource<'_, T> {
    fn cov_rho_g(&self, _step: usize, t: T) -> Result<Matrix<T>> {
        let flow = gaussian_flow(self.prior, self.model, t)?;
        Ok(flow_stats(&flow, self.model, t)?.cov_rho_g)
    }
}

/// Tabulated `Cov_{ρ,G}(t_n)`, typically from a large self-consistent
/// reference ensemble. Its sampling error is of order `reference_size^{-1/2}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTable<T> {
    pub reference_size: usize,
    pub times: Vec<T>,
    pub cov_rho_g: Vec<Matrix<T>>,
}

impl<T: Scalar> ReferenceTable<T> {
    /// Evolves `reference_size` particles with their own ensemble statistics
    /// and records `Cov_{ρ,G}` at each grid time.
    pub fn build(
        model: &ForwardModel<T>,
        prior: &Prior<T>,
        reference_size: usize,
        h: T,
        final_time: T,
        noise: &TrialNoise,
    ) -> Result<Self> {
        let n_steps = step_count(h, final_time)?;
        let mut ens = Ensemble::from_prior(prior, reference_size, noise)?;
        let mut times = Vec::with_capacity(n_steps + 1);
        let mut covs = Vec::with_capacity(n_steps + 1);
        for n in 0..=n_steps {
            let (stats, g) = stats_with_forward(&ens, model);
            times.push(h * T::of_usize(n));
            covs.push(stats.cup.clone());
            if n == n_steps {
                break;
            }
            let op = StepOperator::sde(&stats.cup, model.gamma(), h);
            advance_in_place(&mut ens, &g, &op, model, noise, n as u64 + 1, h);
            ens.check_divergence(n + 1)?;
        }
        Ok(Self {
            reference_size,
            times,
            cov_rho_g: covs,
        })
    }

    /// Nominal relative sampling error `reference_size^{-1/2}`.
    pub fn nominal_sampling_error(&self) -> T {
        T::one() / T::of_usize(self.reference_size).sqrt()
    }

    /// CSV: `t,c_0_0,c_0_1,…` with `Cov_{ρ,G}` row-major.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let (l, k) = self.cov_rho_g.first().map_or((0, 0), Matrix::shape);
        writeln!(out, "# reference_size={}", self.reference_size)?;
        write!(out, "t")?;
        for i in 0..l {
            for c in 0..k {
                write!(out, ",c_{i}_{c}")?;
            }
        }
        writeln!(out)?;
        for (t, m) in self.times.iter().zip(&self.cov_rho_g) {
            write!(out, "{t}")?;
            for x in m.as_slice() {
                write!(out, ",{x}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R, dim_u: usize, dim_obs: usize) -> Result<Self> {
        let mut reference_size = 0;
        let mut times = Vec::new();
        let mut covs = Vec::new();
        let mut header_seen = false;
        for line in input.lines() {
            let line = line.map_err(|e| Error::Parse(e.to_string()))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                if let Some(v) = meta.trim().strip_prefix("reference_size=") {
                    reference_size = v.parse().map_err(|_| Error::Parse(format!("bad reference size {v}")))?;
                }
                continue;
            }
            if !header_seen {
                header_seen = true;
                let cols = line.split(',').count();
                if cols != 1 + dim_u * dim_obs {
                    return Err(Error::Parse(format!(
                        "expected {} columns, found {cols}",
                        1 + dim_u * dim_obs
                    )));
                }
                continue;
            }
            let values: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>().map_err(|_| Error::Parse(format!("bad number {s}"))))
                .collect::<Result<_>>()?;
            if values.len() != 1 + dim_u * dim_obs {
                return Err(Error::Parse(format!("row has {} values", values.len())));
            }
            times.push(T::of(values[0]));
            covs.push(Matrix::new(dim_u, dim_obs, values[1..].iter().map(|&v| T::of(v)).collect())?);
        }
        Ok(Self {
            reference_size,
            times,
            cov_rho_g: covs,
        })
    }
}

impl<T: Scalar> FlowStatsSource<T> for ReferenceTable<T> {
    fn cov_rho_g(&self, step: usize, t: T) -> Result<Matrix<T>> {
        let m = self.cov_rho_g.get(step).ok_or(Error::InvalidArgument(format!(
            "reference table has no entry for step {step}"
        )))?;
        let tol = T::of(1e-9) * (T::one() + t.abs());
        if (self.times[step] - t).abs() > tol {
            return Err(Error::InvalidArgument(format!(
                "reference table time {} does not match requested {t}",
                self.times[step]
            )));
        }
        Ok(m.clone())
    }
}

/// One bridge step, `vʲ ← vʲ + C Γ⁻¹(y − G(vʲ)) h + C Γ^{-1/2} √h zʲ` with
/// `C = Cov_{ρ,G}` and `zʲ` read at the same addresses as the EKI SDE step.
pub fn bridge_step<T: Scalar>(
    ens: &Ensemble<T>,
    cov_rho_g: &Matrix<T>,
    model: &ForwardModel<T>,
    h: T,
    noise: &TrialNoise,
    step_id: u64,
) -> Result<Ensemble<T>> {
    if cov_rho_g.shape() != (model.dim_u(), model.dim_obs()) {
        return Err(Error::DimensionMismatch {
            what: "Cov_{ρ,G} rows",
            expected: model.dim_u(),
            got: cov_rho_g.rows(),
        });
    }
    let mut next = ens.clone();
    let g = ens.forward(model);
    let op = StepOperator::sde(cov_rho_g, model.gamma(), h);
    advance_in_place(&mut next, &g, &op, model, noise, step_id, h);
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coupling {
    /// Both systems read identical increments per `(particle, step)`.
    SharedNoise,
    /// The bridge reads an independent stream; a negative control.
    Independent,
}

#[derive(Debug, Clone, Copy)]
pub struct CoupledConfig<T> {
    pub ensemble_size: usize,
    pub step: T,
    pub final_time: T,
    pub trial_id: u64,
    pub coupling: Coupling,
    pub record: Record,
}

impl<T: Scalar> CoupledConfig<T> {
    pub fn new(ensemble_size: usize, step: T) -> Self {
        Self {
            ensemble_size,
            step,
            final_time: T::one(),
            trial_id: 0,
            coupling: Coupling::SharedNoise,
            record: Record::Last,
        }
    }
}

/// Outcome of [`run_coupled`]. `coupling_errors[n] = (1/J) Σ |uʲ − vʲ|²` at step `n`.
#[derive(Debug, Clone)]
pub struct CoupledRun<T> {
    pub u: Trajectory<T>,
    pub v: Trajectory<T>,
    pub coupling_errors: Vec<T>,
}

fn mean_square_gap<T: Scalar>(u: &Ensemble<T>, v: &Ensemble<T>) -> T {
    let total = u
        .iter()
        .zip(v.iter())
        .map(|(a, b)| {
            let d = sub_vec(a, b);
            dot(&d, &d)
        })
        .sum::<T>();
    total / T::of_usize(u.size())
}

/// Runs EKI (SDE mode) and the bridge system side by side from the same
/// initial draws.
pub fn run_coupled<T: Scalar>(
    model: &ForwardModel<T>,
    prior: &Prior<T>,
    cfg: &CoupledConfig<T>,
    stream: &NoiseStream,
    source: &dyn FlowStatsSource<T>,
) -> Result<CoupledRun<T>> {
    if cfg.ensemble_size < 2 {
        return Err(Error::InvalidArgument("ensemble size must be at least 2".into()));
    }
    let n_steps = step_count(cfg.step, cfg.final_time)?;
    let h = cfg.step;
    let u_noise = stream.trial(cfg.trial_id);
    let v_noise = match cfg.coupling {
        Coupling::SharedNoise => u_noise,
        Coupling::Independent => stream.trial(combine_ids(&[cfg.trial_id, 0xB21D_6E00])),
    };
    let mut u = Ensemble::from_prior(prior, cfg.ensemble_size, &u_noise)?;
    let mut v = u.clone();
    let mut errors = Vec::with_capacity(n_steps + 1);
    errors.push(mean_square_gap(&u, &v));
    let mut u_traj = Trajectory {
        steps: Vec::new(),
        ensembles: Vec::new(),
    };
    let mut v_traj = u_traj.clone();
    if cfg.record == Record::All {
        u_traj.steps.push(0);
        u_traj.ensembles.push(u.clone());
        v_traj.steps.push(0);
        v_traj.ensembles.push(v.clone());
    }
    for n in 0..n_steps {
        let t = h * T::of_usize(n);
        let step_id = n as u64 + 1;

        let (stats, gu) = stats_with_forward(&u, model);
        let op_u = StepOperator::sde(&stats.cup, model.gamma(), h);
        advance_in_place(&mut u, &gu, &op_u, model, &u_noise, step_id, h);

        let c = source.cov_rho_g(n, t)?;
        let gv = v.forward(model);
        let op_v = StepOperator::sde(&c, model.gamma(), h);
        advance_in_place(&mut v, &gv, &op_v, model, &v_noise, step_id, h);

        let t_next = h * T::of_usize(n + 1);
        u.time = t_next;
        v.time = t_next;
        u.check_divergence(n + 1)?;
        v.check_divergence(n + 1)?;
        errors.push(mean_square_gap(&u, &v));
        if cfg.record == Record::All {
            u_traj.steps.push(n + 1);
            u_traj.ensembles.push(u.clone());
            v_traj.steps.push(n + 1);
            v_traj.ensembles.push(v.clone());
        }
    }
    if cfg.record == Record::Last {
        u_traj.steps.push(n_steps);
        u_traj.ensembles.push(u);
        v_traj.steps.push(n_steps);
        v_traj.ensembles.push(v);
    }
    Ok(CoupledRun {
        u: u_traj,
        v: v_traj,
        coupling_errors: errors,
    })
}

/// Runs only the bridge system, calling `observe(n, v)` after the initial draw
/// and after every step. Returns the terminal ensemble.
pub fn run_bridge_observed<T: Scalar>(
    model: &ForwardModel<T>,
    prior: &Prior<T>,
    cfg: &CoupledConfig<T>,
    stream: &NoiseStream,
    source: &dyn FlowStatsSource<T>,
    mut observe: impl FnMut(usize, &Ensemble<T>),
) -> Result<Ensemble<T>> {
    let n_steps = step_count(cfg.step, cfg.final_time)?;
    let h = cfg.step;
    let noise = stream.trial(cfg.trial_id);
    let mut v = Ensemble::from_prior(prior, cfg.ensemble_size, &noise)?;
    observe(0, &v);
    for n in 0..n_steps {
        let c = source.cov_rho_g(n, h * T::of_usize(n))?;
        let gv = v.forward(model);
        let op = StepOperator::sde(&c, model.gamma(), h);
        advance_in_place(&mut v, &gv, &op, model, &noise, n as u64 + 1, h);
        v.time = h * T::of_usize(n + 1);
        v.check_divergence(n + 1)?;
        observe(n + 1, &v);
    }
    Ok(v)
}

/// Tensor grid of `n` points per axis on `[lo, hi]^dim`.
pub fn tensor_grid<T: Scalar>(lo: T, hi: T, n: usize, dim: usize) -> Vec<Vec<T>> {
    let axis: Vec<T> = if n == 1 {
        vec![(lo + hi) * T::of(0.5)]
    } else {
        (0..n)
            .map(|i| lo + (hi - lo) * T::of_usize(i) / T::of_usize(n - 1))
            .collect()
    };
    let mut points = vec![Vec::new()];
    for _ in 0..dim {
        points = points
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |&x| {
                    let mut q = p.clone();
                    q.push(x);
                    q
                })
            })
            .collect();
    }
    points
}

/// Largest Fokker–Planck residual of a Gaussian path `t ↦ flow(t)`, relative
/// to the largest density value seen:
///
/// `∂ₜρ + ∇·(Cov_{ρ,G}Γ⁻¹(y − Au)·ρ) − ½ Tr(Cov_{ρ,G}Γ⁻¹Cov_{G,ρ} H(ρ))`
///
/// `∂ₜ` is a central difference with step `dt`; spatial derivatives are the
/// analytic ones of the Gaussian. Linear models only.
pub fn fp_residual_check<T: Scalar>(
    flow: impl Fn(T) -> Result<GaussianDensity<T>>,
    model: &ForwardModel<T>,
    times: &[T],
    points: &[Vec<T>],
    dt: T,
) -> Result<T> {
    if !model.is_linear() {
        return Err(Error::NonlinearModel);
    }
    let a = model.a();
    let gamma = model.gamma();
    let y = model.data();
    let mut worst = T::zero();
    let mut peak = T::zero();
    for &t in times {
        let here = flow(t)?;
        let before = flow(t - dt)?;
        let after = flow(t + dt)?;
        let c = here.cov.matrix();
        let cov_rho_g = c.matmul(&a.transpose());
        // Cov_{ρ,G} Γ⁻¹, L×K
        let drift_coef = gamma.solve_matrix(&cov_rho_g.transpose()).transpose();
        let diffusion = drift_coef.matmul(&cov_rho_g.transpose());
        let divergence = -drift_coef.matmul(a).trace();
        for u in points {
            let rho = here.density(u);
            peak = peak.max(rho);
            let d_t = (after.density(u) - before.density(u)) / (dt + dt);
            let misfit = sub_vec(y, &a.matvec(u));
            let drift = drift_coef.matvec(&misfit);
            let transport = divergence * rho + dot(&drift, &here.gradient(u));
            let hess = here.hessian(u);
            let second = diffusion.matmul(&hess).trace() * T::of(0.5);
            worst = worst.max((d_t + transport - second).abs());
        }
    }
    if peak == T::zero() {
        return Err(Error::InvalidArgument("density vanishes on every grid point".into()));
    }
    Ok(worst / peak)
}
