//! Weakly nonlinear forward model `G(u) = A·u + m(u)` and the Gaussian prior.
//!
//! The nonlinearity is built so that its range is `Γ⁻¹`-orthogonal to
//! `Range(A)` by construction: `m(u) = a · P · b(u)` where
//! `P = I − A(AᵀΓ⁻¹A)⁻¹AᵀΓ⁻¹` and `b_k(u) = sin(w_kᵀu + φ_k)` with fixed
//! random linear forms `w_k` and phases `φ_k`.

use crate::error::{Error, Result};
use crate::linalg::{dot, singular_values, spectral_norm, sub_vec, Matrix, SpdMatrix};
use crate::noise::NoiseStream;
use crate::scalar::Scalar;

/// Column-rank threshold: smallest singular value must exceed this fraction
/// of the largest.
const RANK_TOLERANCE: f64 = 1e-10;

/// Solves the `Γ⁻¹`-weighted normal equations: returns `(u†, r)` with
/// `y = A·u† + r` and `rᵀΓ⁻¹A = 0`.
pub fn solve_u_dagger<T: Scalar>(
    a: &Matrix<T>,
    gamma: &SpdMatrix<T>,
    y: &[T],
) -> Result<(Vec<T>, Vec<T>)> {
    let normal = weighted_gram(a, gamma)?;
    let rhs = a.matvec_t(&gamma.solve(y));
    let u_dagger = normal.solve(&rhs);
    let fitted = a.matvec(&u_dagger);
    let r = sub_vec(y, &fitted);
    Ok((u_dagger, r))
}

/// `AᵀΓ⁻¹A`, rejected when `A` lacks full column rank.
fn weighted_gram<T: Scalar>(a: &Matrix<T>, gamma: &SpdMatrix<T>) -> Result<SpdMatrix<T>> {
    if a.rows() != gamma.dim() {
        return Err(Error::DimensionMismatch {
            what: "forward matrix rows vs noise covariance",
            expected: gamma.dim(),
            got: a.rows(),
        });
    }
    if a.rows() < a.cols() {
        return Err(Error::RankDeficient { ratio: 0.0 });
    }
    let sv = singular_values(a);
    let (lo, hi) = (sv[0], *sv.last().unwrap_or(&T::zero()));
    if !(lo > T::of(RANK_TOLERANCE) * hi) {
        return Err(Error::RankDeficient {
            ratio: (lo / hi).as_f64(),
        });
    }
    let gram = a.transpose().matmul(&gamma.solve_matrix(a)).symmetrized();
    SpdMatrix::new(gram).map_err(|_| Error::RankDeficient {
        ratio: (lo / hi).as_f64(),
    })
}

/// `m(u) = amplitude · P · sin(W·u + φ)`.
#[derive(Debug, Clone)]
pub struct NonlinearPart<T> {
    /// Linear forms, one row per observation component (K×L).
    weights: Matrix<T>,
    phases: Vec<T>,
    /// `Γ⁻¹`-orthogonal projector onto the complement of `Range(A)` (K×K).
    projector: Matrix<T>,
    amplitude: T,
}

impl<T: Scalar> NonlinearPart<T> {
    /// Draws the linear forms (standard normal entries) and phases
    /// (uniform on `[0, 2π)`) from `seed`.
    pub fn random(
        a: &Matrix<T>,
        gamma: &SpdMatrix<T>,
        amplitude: T,
        seed: u64,
    ) -> Result<Self> {
        if amplitude < T::zero() || !amplitude.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "nonlinearity amplitude must be finite and non-negative, got {amplitude}"
            )));
        }
        let (k, l) = a.shape();
        let noise = NoiseStream::new(seed).trial(0);
        let mut weights = Matrix::zeros(k, l);
        noise.fill_step_normals(0, weights.as_mut_slice());
        let mut phases = vec![T::zero(); k];
        noise.fill_uniforms_at(1, 0, &mut phases);
        let tau = T::of(std::f64::consts::TAU);
        phases.iter_mut().for_each(|p| *p = *p * tau);
        let projector = orthogonal_projector(a, gamma)?;
        Ok(Self {
            weights,
            phases,
            projector,
            amplitude,
        })
    }

    pub fn amplitude(&self) -> T {
        self.amplitude
    }

    pub fn projector(&self) -> &Matrix<T> {
        &self.projector
    }

    pub fn weights(&self) -> &Matrix<T> {
        &self.weights
    }

    fn arguments(&self, u: &[T]) -> Vec<T> {
        self.weights
            .iter_rows()
            .zip(&self.phases)
            .map(|(w, &p)| dot(w, u) + p)
            .collect()
    }

    pub fn eval(&self, u: &[T]) -> Vec<T> {
        let s: Vec<T> = self.arguments(u).into_iter().map(|x| x.sin() * self.amplitude).collect();
        self.projector.matvec(&s)
    }

    /// `∇m(u)` as a K×L matrix.
    pub fn jacobian(&self, u: &[T]) -> Matrix<T> {
        let args = self.arguments(u);
        let (k, l) = self.weights.shape();
        let scaled = Matrix::from_fn(k, l, |i, j| {
            self.amplitude * args[i].cos() * self.weights[(i, j)]
        });
        self.projector.matmul(&scaled)
    }

    /// `Σ_k c_k ∂_i∂_j m_k(u)` as an L×L matrix.
    pub fn hessian_contraction(&self, u: &[T], c: &[T]) -> Matrix<T> {
        let args = self.arguments(u);
        let pc = self.projector.matvec_t(c);
        let (k, l) = self.weights.shape();
        let mut out = Matrix::zeros(l, l);
        for r in 0..k {
            let coef = -self.amplitude * pc[r] * args[r].sin();
            if coef == T::zero() {
                continue;
            }
            let w = self.weights.row(r);
            for i in 0..l {
                for j in 0..l {
                    out[(i, j)] = out[(i, j)] + coef * w[i] * w[j];
                }
            }
        }
        out
    }

    /// Global bound on `|m(u)| + |∇m(u)|`: `a·‖P‖₂·(√K + ‖W‖₂)`.
    pub fn bound(&self) -> T {
        let k = T::of_usize(self.weights.rows());
        self.amplitude * spectral_norm(&self.projector) * (k.sqrt() + spectral_norm(&self.weights))
    }
}

/// `P = I − A(AᵀΓ⁻¹A)⁻¹AᵀΓ⁻¹`.
pub fn orthogonal_projector<T: Scalar>(a: &Matrix<T>, gamma: &SpdMatrix<T>) -> Result<Matrix<T>> {
    let normal = weighted_gram(a, gamma)?;
    // AᵀΓ⁻¹ is L×K; (Γ⁻¹A)ᵀ since Γ is symmetric
    let at_gi = gamma.solve_matrix(a).transpose();
    let coef = normal.solve_matrix(&at_gi);
    Ok(Matrix::identity(a.rows()).sub(&a.matmul(&coef)))
}

/// Forward map with its noise model and data.
#[derive(Debug, Clone)]
pub struct ForwardModel<T> {
    a: Matrix<T>,
    nonlinear: Option<NonlinearPart<T>>,
    gamma: SpdMatrix<T>,
    y: Vec<T>,
    u_dagger: Vec<T>,
    residual: Vec<T>,
    bound: T,
}

impl<T: Scalar> ForwardModel<T> {
    /// Linear model `G(u) = A·u`.
    pub fn linear(a: Matrix<T>, gamma: SpdMatrix<T>, y: Vec<T>) -> Result<Self> {
        if y.len() != a.rows() {
            return Err(Error::DimensionMismatch {
                what: "data vector",
                expected: a.rows(),
                got: y.len(),
            });
        }
        if !a.is_finite() || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("forward model"));
        }
        let (u_dagger, residual) = solve_u_dagger(&a, &gamma, &y)?;
        Ok(Self {
            a,
            nonlinear: None,
            gamma,
            y,
            u_dagger,
            residual,
            bound: T::zero(),
        })
    }

    /// Adds `m(u) = amplitude·P·sin(W·u + φ)` with `W, φ` drawn from `seed`.
    pub fn with_nonlinearity(mut self, amplitude: T, seed: u64) -> Result<Self> {
        let part = NonlinearPart::random(&self.a, &self.gamma, amplitude, seed)?;
        self.bound = part.bound();
        self.nonlinear = Some(part);
        Ok(self)
    }

    pub fn dim_u(&self) -> usize {
        self.a.cols()
    }

    pub fn dim_obs(&self) -> usize {
        self.a.rows()
    }

    pub fn a(&self) -> &Matrix<T> {
        &self.a
    }

    pub fn gamma(&self) -> &SpdMatrix<T> {
        &self.gamma
    }

    pub fn data(&self) -> &[T] {
        &self.y
    }

    pub fn u_dagger(&self) -> &[T] {
        &self.u_dagger
    }

    pub fn residual(&self) -> &[T] {
        &self.residual
    }

    /// `M` with `|m| + |∇m| ≤ M`; zero for a linear model.
    pub fn bound(&self) -> T {
        self.bound
    }

    pub fn nonlinearity(&self) -> Option<&NonlinearPart<T>> {
        self.nonlinear.as_ref()
    }

    /// True when there is no nonlinear part or its amplitude is zero.
    pub fn is_linear(&self) -> bool {
        self.nonlinear
            .as_ref()
            .map_or(true, |n| n.amplitude == T::zero())
    }

    /// `m(u)`, zero when linear.
    pub fn nonlinear_part(&self, u: &[T]) -> Vec<T> {
        match &self.nonlinear {
            Some(n) => n.eval(u),
            None => vec![T::zero(); self.dim_obs()],
        }
    }

    pub fn apply(&self, u: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.dim_obs()];
        self.apply_into(u, &mut out);
        out
    }

    pub fn apply_into(&self, u: &[T], out: &mut [T]) {
        self.a.matvec_into(u, out);
        if let Some(n) = &self.nonlinear {
            if n.amplitude != T::zero() {
                for (o, m) in out.iter_mut().zip(n.eval(u)) {
                    *o = *o + m;
                }
            }
        }
    }

    /// `∇G(u)` as a K×L matrix.
    pub fn jacobian(&self, u: &[T]) -> Matrix<T> {
        match &self.nonlinear {
            Some(n) if n.amplitude != T::zero() => self.a.add(&n.jacobian(u)),
            _ => self.a.clone(),
        }
    }

    /// `Σ_k c_k ∂_i∂_j G_k(u)`; identically zero for a linear model.
    pub fn hessian_contraction(&self, u: &[T], c: &[T]) -> Matrix<T> {
        match &self.nonlinear {
            Some(n) if n.amplitude != T::zero() => n.hessian_contraction(u, c),
            _ => Matrix::zeros(self.dim_u(), self.dim_u()),
        }
    }

    /// `Φ(u; y) = ½ (y − G(u))ᵀ Γ⁻¹ (y − G(u))`.
    pub fn loss(&self, u: &[T]) -> T {
        let misfit = sub_vec(&self.y, &self.apply(u));
        self.gamma.inv_quad_form(&misfit) * T::of(0.5)
    }

    /// Checks the weak-nonlinearity assumptions at the given probe points.
    pub fn check_assumptions<'a>(
        &self,
        probes: impl IntoIterator<Item = &'a [T]>,
    ) -> AssumptionReport<T> {
        let mut report = AssumptionReport {
            max_orthogonality: T::zero(),
            max_bound_ratio: T::zero(),
            residual_orthogonality: T::zero(),
        };
        let r_gi = self.gamma.solve(&self.residual);
        report.residual_orthogonality = self
            .a
            .matvec_t(&r_gi)
            .into_iter()
            .fold(T::zero(), |acc, x| acc.max(x.abs()));
        let Some(n) = &self.nonlinear else {
            return report;
        };
        for u in probes {
            let m = n.eval(u);
            let m_gi = self.gamma.solve(&m);
            let ortho = self
                .a
                .matvec_t(&m_gi)
                .into_iter()
                .fold(T::zero(), |acc, x| acc.max(x.abs()));
            report.max_orthogonality = report.max_orthogonality.max(ortho);
            let size = crate::linalg::norm(&m) + spectral_norm(&n.jacobian(u));
            if self.bound > T::zero() {
                report.max_bound_ratio = report.max_bound_ratio.max(size / self.bound);
            }
        }
        report
    }
}

/// Outcome of [`ForwardModel::check_assumptions`].
#[derive(Debug, Clone, Copy)]
pub struct AssumptionReport<T> {
    /// `max |m(u)ᵀΓ⁻¹A·e_k|` over probes and columns.
    pub max_orthogonality: T,
    /// `max (|m| + |∇m|) / M`; must not exceed 1.
    pub max_bound_ratio: T,
    /// `max |rᵀΓ⁻¹A·e_k|`.
    pub residual_orthogonality: T,
}

/// Gaussian prior `N(u₀, C₀)`.
#[derive(Debug, Clone)]
pub struct Prior<T> {
    pub mean: Vec<T>,
    pub cov: SpdMatrix<T>,
}

impl<T: Scalar> Prior<T> {
    pub fn new(mean: Vec<T>, cov: SpdMatrix<T>) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(Error::DimensionMismatch {
                what: "prior covariance",
                expected: mean.len(),
                got: cov.dim(),
            });
        }
        Ok(Self { mean, cov })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![T::zero(); dim],
            cov: SpdMatrix::identity(dim),
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
}

pub(crate) fn gaussian_log_density<T: Scalar>(mean: &[T], cov: &SpdMatrix<T>, u: &[T]) -> T {
    let d = sub_vec(u, mean);
    let half = T::of(0.5);
    let log_2pi = T::of((2.0 * std::f64::consts::PI).ln());
    -(cov.inv_quad_form(&d) + cov.log_det() + T::of_usize(mean.len()) * log_2pi) * half
}

/// `exp(−t·Φ(u; y)) · μ₀(u)`, not normalized.
pub fn posterior_unnormalized<T: Scalar>(
    model: &ForwardModel<T>,
    prior: &Prior<T>,
    u: &[T],
    t: T,
) -> T {
    (prior.log_density(u) - t * model.loss(u)).exp()
}

/// `y = A·u_true + L·z` with `Γ = L·Lᵀ` and `z` standard normal from `seed`.
pub fn synthetic_data<T: Scalar>(
    a: &Matrix<T>,
    gamma: &SpdMatrix<T>,
    u_true: &[T],
    seed: u64,
) -> Vec<T> {
    let mut z = vec![T::zero(); a.rows()];
    NoiseStream::new(seed).trial(0).normals(0, 0, &mut z);
    let clean = a.matvec(u_true);
    let eta = gamma.sqrt_apply(&z);
    clean.iter().zip(eta).map(|(&c, e)| c + e).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::sample_gaussian;

    fn tall_model(amplitude: f64) -> ForwardModel<f64> {
        let a = Matrix::from_rows(&[
            vec![1.0, 0.5],
            vec![0.0, 1.0],
            vec![0.3, -0.2],
            vec![0.1, 0.4],
        ])
        .unwrap();
        let gamma = SpdMatrix::new(
            Matrix::from_rows(&[
                vec![1.0, 0.2, 0.0, 0.0],
                vec![0.2, 0.8, 0.1, 0.0],
                vec![0.0, 0.1, 1.5, 0.3],
                vec![0.0, 0.0, 0.3, 0.7],
            ])
            .unwrap(),
        )
        .unwrap();
        ForwardModel::linear(a, gamma, vec![1.0, -0.5, 0.25, 2.0])
            .unwrap()
            .with_nonlinearity(amplitude, 17)
            .unwrap()
    }

    fn probes(dim: usize, n: usize) -> Matrix<f64> {
        let prior = Prior::<f64>::standard(dim);
        sample_gaussian(&prior.mean, &prior.cov, n, &NoiseStream::new(1234).trial(0), 0).unwrap()
    }

    #[test]
    fn identity_map() {
        let m = ForwardModel::linear(Matrix::identity(2), SpdMatrix::identity(2), vec![0.0, 0.0]).unwrap();
        assert_eq!(m.apply(&[1.0, 2.0]), vec![1.0, 2.0]);
        assert_eq!(m.jacobian(&[3.0, 4.0]), Matrix::identity(2));
    }

    #[test]
    fn zero_amplitude_is_linear() {
        let model = tall_model(0.0);
        let pts = probes(2, 100);
        for u in pts.iter_rows() {
            assert_eq!(model.apply(u), model.a().matvec(u));
        }
    }

    #[test]
    fn square_full_rank_has_trivial_projector() {
        let a = Matrix::identity(2);
        let gamma = SpdMatrix::identity(2);
        let p = orthogonal_projector(&a, &gamma).unwrap();
        assert!(p.max_abs() < 1e-15);
        let model = ForwardModel::<f64>::linear(a, gamma, vec![0.3, 0.1])
            .unwrap()
            .with_nonlinearity(1.0, 3)
            .unwrap();
        let u = [0.7, -1.1];
        let g = model.apply(&u);
        assert!((g[0] - 0.7).abs() < 1e-15 && (g[1] + 1.1).abs() < 1e-15);
    }

    #[test]
    fn projector_properties() {
        let model = tall_model(0.3);
        let p = model.nonlinearity().unwrap().projector();
        assert!(p.matmul(p).sub(p).max_abs() < 1e-10);
        assert!(p.matmul(model.a()).max_abs() < 1e-10);
        let at_gi_p = model.gamma().solve_matrix(model.a()).transpose().matmul(p);
        assert!(at_gi_p.max_abs() < 1e-10);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let model = tall_model(0.5);
        let pts = probes(2, 20);
        for u in pts.iter_rows() {
            let jac = model.jacobian(u);
            let step = 1e-5 * (1.0 + crate::linalg::norm(u));
            for j in 0..2 {
                let mut up = u.to_vec();
                let mut dn = u.to_vec();
                up[j] += step;
                dn[j] -= step;
                let gp = model.apply(&up);
                let gm = model.apply(&dn);
                for i in 0..4 {
                    let fd = (gp[i] - gm[i]) / (2.0 * step);
                    assert!((fd - jac[(i, j)]).abs() <= 1e-6, "({i},{j}) {fd} vs {}", jac[(i, j)]);
                }
            }
        }
    }

    #[test]
    fn hessian_contraction_matches_finite_differences() {
        let model = tall_model(0.4);
        let c = [0.3, -1.0, 0.5, 2.0];
        let pts = probes(2, 10);
        for u in pts.iter_rows() {
            let h = model.hessian_contraction(u, &c);
            let step = 1e-5 * (1.0 + crate::linalg::norm(u));
            for i in 0..2 {
                let mut up = u.to_vec();
                let mut dn = u.to_vec();
                up[i] += step;
                dn[i] -= step;
                let jp = model.jacobian(&up).matvec_t(&c);
                let jm = model.jacobian(&dn).matvec_t(&c);
                for j in 0..2 {
                    let fd = (jp[j] - jm[j]) / (2.0 * step);
                    assert!((fd - h[(i, j)]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn weak_nonlinearity_assumptions_hold() {
        let model = tall_model(0.2);
        let pts = probes(2, 1000);
        let report = model.check_assumptions(pts.iter_rows());
        assert!(report.max_orthogonality <= 1e-8, "{report:?}");
        assert!(report.max_bound_ratio <= 1.0, "{report:?}");
        assert!(report.residual_orthogonality <= 1e-10, "{report:?}");
    }

    #[test]
    fn u_dagger_examples() {
        let a = Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let (ud, r) = solve_u_dagger::<f64>(&a, &SpdMatrix::identity(2), &[2.0, 3.0]).unwrap();
        assert_eq!(ud, vec![2.0]);
        assert_eq!(r, vec![0.0, 3.0]);

        let g = SpdMatrix::new(Matrix::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap()).unwrap();
        let (ud, r) = solve_u_dagger::<f64>(&Matrix::identity(2), &g, &[0.4, -0.7]).unwrap();
        assert!((ud[0] - 0.4).abs() < 1e-14 && (ud[1] + 0.7).abs() < 1e-14);
        assert!(r.iter().all(|x| x.abs() < 1e-14));
    }

    #[test]
    fn consistent_data_has_zero_residual() {
        let model = tall_model(0.0);
        let y = model.a().matvec(&[0.25, -2.0]);
        let (ud, r) = solve_u_dagger(model.a(), model.gamma(), &y).unwrap();
        assert!(r.iter().all(|x| x.abs() <= 1e-10));
        assert!((ud[0] - 0.25).abs() < 1e-10 && (ud[1] + 2.0).abs() < 1e-10);
    }

    #[test]
    fn decomposition_reassembles_data() {
        let model = tall_model(0.0);
        let back = model.a().matvec(model.u_dagger());
        for ((b, r), y) in back.iter().zip(model.residual()).zip(model.data()) {
            assert!((b + r - y).abs() <= 1e-12);
        }
        let expected = 0.5 * model.gamma().inv_quad_form(model.residual());
        assert!((model.loss(model.u_dagger()) - expected).abs() <= 1e-12);
    }

    #[test]
    fn rank_deficient_rejected() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        let err = ForwardModel::linear(a, SpdMatrix::identity(2), vec![1.0, 1.0]).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { .. }));
    }

    #[test]
    fn loss_examples() {
        let m = ForwardModel::<f64>::linear(Matrix::identity(1), SpdMatrix::identity(1), vec![1.0]).unwrap();
        assert_eq!(m.loss(&[0.0]), 0.5);
        assert_eq!(m.loss(&[1.0]), 0.0);
        let m2 = ForwardModel::<f64>::linear(
            Matrix::identity(1),
            SpdMatrix::scaled_identity(1, 2.0).unwrap(),
            vec![1.0],
        )
        .unwrap();
        assert!((m2.loss(&[0.0]) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn posterior_unnormalized_endpoints() {
        let m = ForwardModel::linear(Matrix::identity(1), SpdMatrix::identity(1), vec![1.0]).unwrap();
        let prior = Prior::standard(1);
        for &u in &[-3.0, 0.0, 0.5, 2.0] {
            assert_eq!(posterior_unnormalized(&m, &prior, &[u], 0.0), prior.density(&[u]));
            assert!(posterior_unnormalized(&m, &prior, &[u], 1.0) > 0.0);
        }
        // At t = 1 the ratio to N(1/2, 1/2) is constant in u.
        let post = |u: f64| (-(u - 0.5) * (u - 0.5)).exp();
        let r0 = posterior_unnormalized(&m, &prior, &[0.0], 1.0) / post(0.0);
        for &u in &[-2.0, 0.3, 1.7] {
            let r = posterior_unnormalized(&m, &prior, &[u], 1.0) / post(u);
            assert!((r / r0 - 1.0).abs() < 1e-12);
        }
    }
}
