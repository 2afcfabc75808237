//! Ensemble Kalman inversion: the perturbed-data discrete update and the
//! Euler–Maruyama scheme for its continuous-time limit.
//!
//! Both schemes freeze the ensemble statistics at the start of a step and
//! read their Gaussian input from the same addresses: the SDE increment is
//! `ΔW = √h·z` and the perturbed data is `ξ = Γ·Γ^{-1/2}·z/√h`, which has law
//! `N(0, h⁻¹Γ)` and makes `Cup·(Cpp + h⁻¹Γ)⁻¹·ξ` agree with
//! `Cup·Γ^{-1/2}·ΔW` to leading order in `h`.

use std::io::{self, Write};

use crate::error::{Error, Result};
use crate::linalg::{norm, outer, solve_lower_transpose_in_place, Matrix, SpdMatrix};
use crate::model::{ForwardModel, Prior};
use crate::noise::{sample_gaussian, NoiseStream, TrialNoise};
use crate::scalar::Scalar;

/// Particles whose norm exceeds this are treated as a blow-up.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

/// `J` particles in `R^L` (rows of a J×L matrix) at pseudo-time `time`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble<T> {
    particles: Matrix<T>,
    pub time: T,
}

impl<T: Scalar> Ensemble<T> {
    pub fn new(particles: Matrix<T>, time: T) -> Result<Self> {
        if particles.rows() < 2 {
            return Err(Error::InvalidArgument(format!(
                "an ensemble needs at least 2 particles, got {}",
                particles.rows()
            )));
        }
        if !particles.is_finite() {
            return Err(Error::NonFinite("ensemble"));
        }
        Ok(Self { particles, time })
    }

    /// `J` i.i.d. prior draws at `(trial, step 0, particle j)`.
    pub fn from_prior(prior: &Prior<T>, size: usize, noise: &TrialNoise) -> Result<Self> {
        let particles = sample_gaussian(&prior.mean, &prior.cov, size, noise, 0)?;
        Self::new(particles, T::zero())
    }

    pub fn size(&self) -> usize {
        self.particles.rows()
    }

    pub fn dim(&self) -> usize {
        self.particles.cols()
    }

    pub fn particle(&self, j: usize) -> &[T] {
        self.particles.row(j)
    }

    pub fn particles(&self) -> &Matrix<T> {
        &self.particles
    }

    pub(crate) fn particles_mut(&mut self) -> &mut Matrix<T> {
        &mut self.particles
    }

    pub fn iter(&self) -> impl Iterator<Item = &[T]> {
        self.particles.iter_rows()
    }

    pub fn mean(&self) -> Vec<T> {
        column_mean(&self.particles)
    }

    /// Empirical covariance with the `1/J` normalization.
    pub fn covariance(&self) -> Matrix<T> {
        cross_covariance(&self.particles, &self.particles)
    }

    /// Values of one coordinate across the ensemble.
    pub fn coordinate(&self, i: usize) -> Vec<T> {
        self.particles.col_vec(i)
    }

    /// Applies `G` to every particle, returning a J×K matrix.
    pub fn forward(&self, model: &ForwardModel<T>) -> Matrix<T> {
        let mut g = Matrix::zeros(self.size(), model.dim_obs());
        for j in 0..self.size() {
            model.apply_into(self.particle(j), g.row_mut(j));
        }
        g
    }

    pub(crate) fn check_divergence(&self, step: usize) -> Result<()> {
        let limit = T::of(DIVERGENCE_THRESHOLD);
        for (j, p) in self.iter().enumerate() {
            let n = norm(p);
            if !(n <= limit) {
                return Err(Error::Diverged {
                    step,
                    particle: j,
                    norm: n.as_f64(),
                });
            }
        }
        Ok(())
    }
}

pub(crate) fn column_mean<T: Scalar>(m: &Matrix<T>) -> Vec<T> {
    let mut mean = vec![T::zero(); m.cols()];
    for row in m.iter_rows() {
        for (acc, &x) in mean.iter_mut().zip(row) {
            *acc = *acc + x;
        }
    }
    let inv = T::one() / T::of_usize(m.rows());
    mean.iter_mut().for_each(|x| *x = *x * inv);
    mean
}

/// `(1/J) Σ (a_j − ā) ⊗ (b_j − b̄)` over paired rows.
pub(crate) fn cross_covariance<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let (ma, mb) = (column_mean(a), column_mean(b));
    let mut out = Matrix::zeros(a.cols(), b.cols());
    let mut da = vec![T::zero(); a.cols()];
    let mut db = vec![T::zero(); b.cols()];
    for (ra, rb) in a.iter_rows().zip(b.iter_rows()) {
        for ((d, &x), &m) in da.iter_mut().zip(ra).zip(&ma) {
            *d = x - m;
        }
        for ((d, &x), &m) in db.iter_mut().zip(rb).zip(&mb) {
            *d = x - m;
        }
        for (i, &di) in da.iter().enumerate() {
            let row = out.row_mut(i);
            for (o, &dj) in row.iter_mut().zip(&db) {
                *o = *o + di * dj;
            }
        }
    }
    out.scale(T::one() / T::of_usize(a.rows()))
}

/// Empirical means and covariances of an ensemble and its forward images.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats<T> {
    pub mean_u: Vec<T>,
    pub mean_g: Vec<T>,
    /// `Cpp`, K×K.
    pub cpp: Matrix<T>,
    /// `Cup`, L×K.
    pub cup: Matrix<T>,
}

/// Statistics with `1/J` normalization.
pub fn ensemble_stats<T: Scalar>(ens: &Ensemble<T>, model: &ForwardModel<T>) -> EnsembleStats<T> {
    stats_with_forward(ens, model).0
}

pub(crate) fn stats_with_forward<T: Scalar>(
    ens: &Ensemble<T>,
    model: &ForwardModel<T>,
) -> (EnsembleStats<T>, Matrix<T>) {
    let g = ens.forward(model);
    let stats = EnsembleStats {
        mean_u: ens.mean(),
        mean_g: column_mean(&g),
        cpp: cross_covariance(&g, &g).symmetrized(),
        cup: cross_covariance(ens.particles(), &g),
    };
    (stats, g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Perturbed-data update with `(Cpp + h⁻¹Γ)⁻¹`.
    Discrete,
    /// Euler–Maruyama for the continuous-time system.
    Sde,
}

/// Which ensembles [`run_eki`] keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Record {
    /// Every step, `N + 1` snapshots.
    All,
    /// Only the terminal ensemble.
    Last,
}

#[derive(Debug, Clone, Copy)]
pub struct EkiRunConfig<T> {
    pub ensemble_size: usize,
    pub step: T,
    pub final_time: T,
    pub mode: Mode,
    pub trial_id: u64,
    pub record: Record,
}

impl<T: Scalar> EkiRunConfig<T> {
    pub fn new(ensemble_size: usize, step: T, mode: Mode) -> Self {
        Self {
            ensemble_size,
            step,
            final_time: T::one(),
            mode,
            trial_id: 0,
            record: Record::All,
        }
    }

    pub fn final_time(mut self, t: T) -> Self {
        self.final_time = t;
        self
    }

    pub fn trial(mut self, trial_id: u64) -> Self {
        self.trial_id = trial_id;
        self
    }

    pub fn record(mut self, record: Record) -> Self {
        self.record = record;
        self
    }

    /// Validates the configuration and returns `N = T/h`.
    pub fn num_steps(&self) -> Result<usize> {
        if self.ensemble_size < 2 {
            return Err(Error::InvalidArgument("ensemble size must be at least 2".into()));
        }
        step_count(self.step, self.final_time)
    }
}

/// `N = T/h`, required to be integral to within 1e-9.
pub fn step_count<T: Scalar>(h: T, final_time: T) -> Result<usize> {
    let (h, t) = (h.as_f64(), final_time.as_f64());
    if !(h > 0.0 && h <= 1.0) {
        return Err(Error::InvalidArgument(format!("step must lie in (0, 1], got {h}")));
    }
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::InvalidArgument(format!("final time must be finite and non-negative, got {t}")));
    }
    let ratio = t / h;
    let n = ratio.round();
    if (ratio - n).abs() > 1e-9 * n.max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "final time {t} is not an integer multiple of the step {h}"
        )));
    }
    Ok(n as usize)
}

/// Per-step coefficient matrices, built once from frozen statistics.
pub(crate) enum StepOperator<T> {
    Discrete {
        /// `Cup·(Cpp + h⁻¹Γ)⁻¹`, L×K.
        gain: Matrix<T>,
        scale: T,
    },
    Sde {
        /// `C·Γ⁻¹`, L×K.
        drift: Matrix<T>,
        /// `C·Γ^{-1/2}`, L×K.
        diffusion: Matrix<T>,
        h: T,
        sqrt_h: T,
    },
}

impl<T: Scalar> StepOperator<T> {
    pub(crate) fn discrete(stats: &EnsembleStats<T>, gamma: &SpdMatrix<T>, h: T) -> Result<Self> {
        let system = stats.cpp.add(&gamma.matrix().scale(T::one() / h)).symmetrized();
        let system = SpdMatrix::new(system).map_err(|_| Error::SingularUpdate)?;
        let mut gain = Matrix::zeros(stats.cup.rows(), stats.cup.cols());
        for i in 0..stats.cup.rows() {
            let row = system.solve(stats.cup.row(i));
            gain.row_mut(i).copy_from_slice(&row);
        }
        Ok(Self::Discrete {
            gain,
            scale: T::one() / h.sqrt(),
        })
    }

    /// Euler–Maruyama operator for `du = C Γ⁻¹ (y − G(u)) dt + C Γ^{-1/2} dW`
    /// with the L×K coefficient `C`.
    pub(crate) fn sde(coefficient: &Matrix<T>, gamma: &SpdMatrix<T>, h: T) -> Self {
        let (l, k) = coefficient.shape();
        let mut drift = Matrix::zeros(l, k);
        let mut diffusion = Matrix::zeros(l, k);
        for i in 0..l {
            let row = coefficient.row(i);
            drift.row_mut(i).copy_from_slice(&gamma.solve(row));
            // row of C·L⁻¹ is (L⁻ᵀ·rowᵀ)ᵀ
            let mut d = row.to_vec();
            solve_lower_transpose_in_place(gamma.factor(), &mut d);
            diffusion.row_mut(i).copy_from_slice(&d);
        }
        Self::Sde {
            drift,
            diffusion,
            h,
            sqrt_h: h.sqrt(),
        }
    }

    /// Moves one particle given its forward value and standard normals `z ∈ R^K`.
    pub(crate) fn apply(
        &self,
        u: &mut [T],
        g: &[T],
        z: &[T],
        model: &ForwardModel<T>,
        scratch: &mut Vec<T>,
    ) {
        let y = model.data();
        match self {
            Self::Discrete { gain, scale } => {
                // ξ = Γ·L⁻¹·z/√h
                scratch.clear();
                scratch.extend_from_slice(z);
                crate::linalg::solve_lower_in_place(model.gamma().factor(), scratch);
                let xi = model.gamma().matrix().matvec(scratch);
                scratch.clear();
                scratch.extend(
                    y.iter()
                        .zip(&xi)
                        .zip(g)
                        .map(|((&yk, &xk), &gk)| yk + xk * *scale - gk),
                );
                for (ui, grow) in u.iter_mut().zip(gain.iter_rows()) {
                    *ui = *ui + crate::linalg::dot(grow, scratch);
                }
            }
            Self::Sde {
                drift,
                diffusion,
                h,
                sqrt_h,
            } => {
                scratch.clear();
                scratch.extend(y.iter().zip(g).map(|(&yk, &gk)| (yk - gk) * *h));
                for ((ui, drow), srow) in u.iter_mut().zip(drift.iter_rows()).zip(diffusion.iter_rows()) {
                    let mut inc = crate::linalg::dot(drow, scratch);
                    for (&s, &zk) in srow.iter().zip(z) {
                        inc = inc + s * zk * *sqrt_h;
                    }
                    *ui = *ui + inc;
                }
            }
        }
    }
}

/// Moves every particle in place with one shared operator. Noise for particle
/// `j` is read at `(trial, step_id, j)`.
pub(crate) fn advance_in_place<T: Scalar>(
    ens: &mut Ensemble<T>,
    forward: &Matrix<T>,
    op: &StepOperator<T>,
    model: &ForwardModel<T>,
    noise: &TrialNoise,
    step_id: u64,
    h: T,
) {
    let k = model.dim_obs();
    let mut z = vec![T::zero(); ens.size() * k];
    noise.fill_step_normals(step_id, &mut z);
    let mut scratch = Vec::with_capacity(k);
    let particles = ens.particles_mut();
    for j in 0..particles.rows() {
        op.apply(
            particles.row_mut(j),
            forward.row(j),
            &z[j * k..(j + 1) * k],
            model,
            &mut scratch,
        );
    }
    ens.time = ens.time + h;
}

fn step_in_place<T: Scalar>(
    ens: &mut Ensemble<T>,
    model: &ForwardModel<T>,
    h: T,
    mode: Mode,
    noise: &TrialNoise,
    step_id: u64,
) -> Result<()> {
    if !(h > T::zero()) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let (stats, forward) = stats_with_forward(ens, model);
    let op = match mode {
        Mode::Discrete => StepOperator::discrete(&stats, model.gamma(), h)?,
        Mode::Sde => StepOperator::sde(&stats.cup, model.gamma(), h),
    };
    advance_in_place(ens, &forward, &op, model, noise, step_id, h);
    Ok(())
}

/// One perturbed-data step:
/// `uʲ ← uʲ + Cup(Cpp + h⁻¹Γ)⁻¹(y + ξʲ − G(uʲ))`.
pub fn eki_discrete_step<T: Scalar>(
    ens: &Ensemble<T>,
    model: &ForwardModel<T>,
    h: T,
    noise: &TrialNoise,
    step_id: u64,
) -> Result<Ensemble<T>> {
    let mut next = ens.clone();
    step_in_place(&mut next, model, h, Mode::Discrete, noise, step_id)?;
    Ok(next)
}

/// One Euler–Maruyama step:
/// `uʲ ← uʲ + Cup Γ⁻¹(y − G(uʲ)) h + Cup Γ^{-1/2} √h zʲ`.
pub fn eki_sde_step<T: Scalar>(
    ens: &Ensemble<T>,
    model: &ForwardModel<T>,
    h: T,
    noise: &TrialNoise,
    step_id: u64,
) -> Result<Ensemble<T>> {
    let mut next = ens.clone();
    step_in_place(&mut next, model, h, Mode::Sde, noise, step_id)?;
    Ok(next)
}

/// Recorded ensembles of one run, with the step index of each snapshot.
#[derive(Debug, Clone)]
pub struct Trajectory<T> {
    pub steps: Vec<usize>,
    pub ensembles: Vec<Ensemble<T>>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn terminal(&self) -> &Ensemble<T> {
        self.ensembles.last().expect("trajectory has at least one snapshot")
    }

    pub fn len(&self) -> usize {
        self.ensembles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ensembles.is_empty()
    }

    /// CSV with header `step,t,particle,u0,…,u{L-1}`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let dim = self.ensembles.first().map_or(0, Ensemble::dim);
        write!(out, "step,t,particle")?;
        for i in 0..dim {
            write!(out, ",u{i}")?;
        }
        writeln!(out)?;
        for (&step, ens) in self.steps.iter().zip(&self.ensembles) {
            for (j, p) in ens.iter().enumerate() {
                write!(out, "{step},{},{j}", ens.time)?;
                for x in p {
                    write!(out, ",{x}")?;
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }
}

/// Runs EKI from prior draws to `T`, calling `observe(n, ensemble)` after the
/// initial draw and after every step. Returns the terminal ensemble.
pub fn run_eki_observed<T: Scalar>(
    model: &ForwardModel<T>,
    prior: &Prior<T>,
    cfg: &EkiRunConfig<T>,
    stream: &NoiseStream,
    mut observe: impl FnMut(usize, &Ensemble<T>),
) -> Result<Ensemble<T>> {
    let n_steps = cfg.num_steps()?;
    if prior.dim() != model.dim_u() {
        return Err(Error::DimensionMismatch {
            what: "prior dimension vs model",
            expected: model.dim_u(),
            got: prior.dim(),
        });
    }
    let noise = stream.trial(cfg.trial_id);
    let mut ens = Ensemble::from_prior(prior, cfg.ensemble_size, &noise)?;
    observe(0, &ens);
    for n in 0..n_steps {
        step_in_place(&mut ens, model, cfg.step, cfg.mode, &noise, n as u64 + 1)?;
        // keep the time grid exact instead of accumulating h
        ens.time = cfg.step * T::of_usize(n + 1);
        ens.check_divergence(n + 1)?;
        observe(n + 1, &ens);
    }
    Ok(ens)
}

/// Runs EKI and keeps the snapshots selected by `cfg.record`.
pub fn run_eki<T: Scalar>(
    model: &ForwardModel<T>,
    prior: &Prior<T>,
    cfg: &EkiRunConfig<T>,
    stream: &NoiseStream,
) -> Result<Trajectory<T>> {
    let mut traj = Trajectory {
        steps: Vec::new(),
        ensembles: Vec::new(),
    };
    let record = cfg.record;
    let last = run_eki_observed(model, prior, cfg, stream, |n, ens| {
        if record == Record::All {
            traj.steps.push(n);
            traj.ensembles.push(ens.clone());
        }
    })?;
    if record == Record::Last {
        traj.steps.push(cfg.num_steps()?);
        traj.ensembles.push(last);
    }
    Ok(traj)
}

/// Naive double-loop cross-covariance, kept as a reference implementation.
pub fn naive_cross_covariance<T: Scalar>(a: &[Vec<T>], b: &[Vec<T>]) -> Matrix<T> {
    let j = T::of_usize(a.len());
    let dim_a = a[0].len();
    let dim_b = b[0].len();
    let mut mean_a = vec![T::zero(); dim_a];
    let mut mean_b = vec![T::zero(); dim_b];
    for (x, y) in a.iter().zip(b) {
        for i in 0..dim_a {
            mean_a[i] = mean_a[i] + x[i] / j;
        }
        for i in 0..dim_b {
            mean_b[i] = mean_b[i] + y[i] / j;
        }
    }
    let mut out = Matrix::zeros(dim_a, dim_b);
    for (x, y) in a.iter().zip(b) {
        let dx: Vec<T> = x.iter().zip(&mean_a).map(|(&p, &m)| p - m).collect();
        let dy: Vec<T> = y.iter().zip(&mean_b).map(|(&p, &m)| p - m).collect();
        out = out.add(&outer(&dx, &dy).scale(T::one() / j));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn canonical() -> (ForwardModel<f64>, Prior<f64>) {
        let model = ForwardModel::linear(Matrix::identity(1), SpdMatrix::identity(1), vec![1.0]).unwrap();
        (model, Prior::standard(1))
    }

    fn pair() -> Ensemble<f64> {
        Ensemble::new(Matrix::column(&[0.0, 2.0]), 0.0).unwrap()
    }

    #[test]
    fn rejects_single_particle() {
        assert!(Ensemble::new(Matrix::<f64>::column(&[1.0]), 0.0).is_err());
    }

    #[test]
    fn stats_of_pair() {
        let (model, _) = canonical();
        let s = ensemble_stats(&pair(), &model);
        assert_eq!(s.mean_u, vec![1.0]);
        assert_eq!(s.mean_g, vec![1.0]);
        assert_eq!(s.cpp[(0, 0)], 1.0);
        assert_eq!(s.cup[(0, 0)], 1.0);
    }

    #[test]
    fn degenerate_ensemble_has_zero_covariance() {
        let (model, _) = canonical();
        let ens = Ensemble::new(Matrix::column(&[0.75; 5]), 0.0).unwrap();
        let s = ensemble_stats(&ens, &model);
        assert_eq!(s.cpp.max_abs(), 0.0);
        assert_eq!(s.cup.max_abs(), 0.0);
        let noise = NoiseStream::new(1).trial(0);
        assert_eq!(eki_discrete_step(&ens, &model, 0.1, &noise, 1).unwrap().particles(), ens.particles());
        assert_eq!(eki_sde_step(&ens, &model, 0.1, &noise, 1).unwrap().particles(), ens.particles());
    }

    #[test]
    fn discrete_pair_hand_value() {
        let (model, _) = canonical();
        let zero = NoiseStream::zero().trial(0);
        let next = eki_discrete_step(&pair(), &model, 1.0, &zero, 1).unwrap();
        let c = next.coordinate(0);
        assert!((c[0] - 0.5).abs() < 1e-15 && (c[1] - 1.5).abs() < 1e-15, "{c:?}");
    }

    #[test]
    fn sde_pair_drift_only() {
        let (model, _) = canonical();
        let zero = NoiseStream::zero().trial(0);
        for &h in &[0.1, 0.01, 0.25] {
            let next = eki_sde_step(&pair(), &model, h, &zero, 1).unwrap();
            let c = next.coordinate(0);
            assert!((c[0] - h).abs() < 1e-15 && (c[1] - (2.0 - h)).abs() < 1e-15);
        }
    }

    #[test]
    fn step_count_validation() {
        assert_eq!(step_count(1e-3, 1.0).unwrap(), 1000);
        assert_eq!(step_count(0.1, 1.0).unwrap(), 10);
        assert_eq!(step_count(0.5, 0.0).unwrap(), 0);
        assert!(step_count(0.3, 1.0).is_err());
        assert!(step_count(0.0, 1.0).is_err());
        assert!(step_count(2.0, 4.0).is_err());
    }

    #[test]
    fn zero_steps_returns_initial() {
        let (model, prior) = canonical();
        let cfg = EkiRunConfig::new(8, 0.1, Mode::Sde).final_time(0.0);
        let traj = run_eki(&model, &prior, &cfg, &NoiseStream::new(3)).unwrap();
        assert_eq!(traj.len(), 1);
        let direct = Ensemble::from_prior(&prior, 8, &NoiseStream::new(3).trial(0)).unwrap();
        assert_eq!(traj.terminal(), &direct);
    }

    #[test]
    fn divergence_detected() {
        // Huge data with a very loose prior drives particles far away in one step.
        let model = ForwardModel::linear(Matrix::identity(1), SpdMatrix::identity(1), vec![1e15]).unwrap();
        let prior = Prior::new(vec![0.0], SpdMatrix::from_diag(&[1e6]).unwrap()).unwrap();
        let cfg = EkiRunConfig::new(8, 1.0, Mode::Sde);
        let err = run_eki(&model, &prior, &cfg, &NoiseStream::new(1)).unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 1, .. }));
    }

    #[test]
    fn csv_export_shape() {
        let (model, prior) = canonical();
        let cfg = EkiRunConfig::new(3, 0.5, Mode::Discrete);
        let traj = run_eki(&model, &prior, &cfg, &NoiseStream::new(3)).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "step,t,particle,u0");
        assert_eq!(lines.len(), 1 + 3 * 3);
        assert!(lines.last().unwrap().starts_with("2,1,2,"));
    }
}
