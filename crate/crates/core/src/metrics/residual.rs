//! The pointwise weight by which the interpolating density
//! `μ(t,u) ∝ exp(−tΦ(u))·μ₀(u)` fails the Fokker–Planck equation of the
//! mean-field dynamics. It vanishes when `G` is linear.

use crate::error::{Error, Result};
use crate::linalg::{dot, sub_vec, Matrix};
use crate::meanfield::{flow_stats, gaussian_flow, FlowStats};
use crate::model::{ForwardModel, Prior};
use crate::noise::{sample_gaussian, TrialNoise};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSample<T> {
    pub t: T,
    pub u: Vec<T>,
    pub r1: T,
    pub r2: T,
    pub r3: T,
    /// `V(u) = t·∇Gᵀ Γ⁻¹(y − G(u)) − C₀⁻¹(u − u₀)`, which is `∇ log μ`.
    pub v: Vec<T>,
    /// `W(u)ᵢⱼ = Σₖ ∂ᵢ∂ⱼGₖ(u)·(Γ⁻¹(y − G(u)))ₖ`.
    pub w: Matrix<T>,
}

impl<T: Scalar> ResidualSample<T> {
    pub fn total(&self) -> T {
        self.r1 + self.r2 + self.r3
    }
}

/// Evaluates `R₁, R₂, R₃` at `(t, u)` given the moments of `μ(t)` in `stats`
/// (`mean_g` plays the role of `Ḡ`).
///
/// With `B = Cov_{μ,G}Γ⁻¹Cov_{G,μ}`:
///
/// * `R₁ = ½Tr(Cov_{G,G}Γ⁻¹) − Tr(Cov_{μ,G}Γ⁻¹∇G) + ½Tr(B·(t∇GᵀΓ⁻¹∇G + C₀⁻¹))`
/// * `R₂ = ½|y−Ḡ|²_Γ − ½|y−G|²_Γ + (y−G)ᵀΓ⁻¹Cov_{G,μ}V − ½VᵀBV`
/// * `R₃ = −(t/2)·Tr(B·W)`
pub fn residual_terms<T: Scalar>(
    model: &ForwardModel<T>,
    prior: &Prior<T>,
    t: T,
    u: &[T],
    stats: &FlowStats<T>,
) -> Result<ResidualSample<T>> {
    let (l, k) = (model.dim_u(), model.dim_obs());
    if u.len() != l || prior.dim() != l {
        return Err(Error::DimensionMismatch {
            what: "residual point",
            expected: l,
            got: u.len(),
        });
    }
    if stats.cov_rho_g.shape() != (l, k) || stats.cov_gg.shape() != (k, k) || stats.mean_g.len() != k {
        return Err(Error::DimensionMismatch {
            what: "μ statistics",
            expected: k,
            got: stats.mean_g.len(),
        });
    }
    let gamma = model.gamma();
    let y = model.data();
    let half = T::of(0.5);

    let g = model.apply(u);
    let misfit = sub_vec(y, &g);
    let weighted_misfit = gamma.solve(&misfit);
    let jac = model.jacobian(u);
    let prior_pull = prior.cov.solve(&sub_vec(u, &prior.mean));
    let v: Vec<T> = jac
        .matvec_t(&weighted_misfit)
        .into_iter()
        .zip(&prior_pull)
        .map(|(a, &b)| t * a - b)
        .collect();
    let w = model.hessian_contraction(u, &weighted_misfit);

    let c = &stats.cov_rho_g;
    // D = Cov_{μ,G}Γ⁻¹, L×K
    let d = gamma.solve_matrix(&c.transpose()).transpose();
    let b = d.matmul(&c.transpose()).symmetrized();
    let gamma_inv_jac = gamma.solve_matrix(&jac);
    let curvature = jac
        .transpose()
        .matmul(&gamma_inv_jac)
        .scale(t)
        .add(&prior.cov.inverse());

    let gamma_inv_cgg = gamma.solve_matrix(&stats.cov_gg);
    let r1 = gamma_inv_cgg.trace() * half - d.matmul(&jac).trace() + b.matmul(&curvature).trace() * half;

    let mean_misfit = sub_vec(y, &stats.mean_g);
    let bv = b.matvec(&v);
    let r2 = gamma.inv_quad_form(&mean_misfit) * half - dot(&misfit, &weighted_misfit) * half
        + dot(&d.matvec_t(&v), &misfit)
        - dot(&v, &bv) * half;

    let r3 = -(t * half) * b.matmul(&w).trace();

    Ok(ResidualSample {
        t,
        u: u.to_vec(),
        r1,
        r2,
        r3,
        v,
        w,
    })
}

/// Exact moments of `μ(t)` for a linear model, where `μ(t)` is Gaussian.
pub fn mu_stats_exact<T: Scalar>(
    model: &ForwardModel<T>,
    prior: &Prior<T>,
    t: T,
) -> Result<FlowStats<T>> {
    flow_stats(&gaussian_flow(prior, model, t)?, model, t)
}

fn weighted_stats<T: Scalar>(
    t: T,
    points: &Matrix<T>,
    forward: &Matrix<T>,
    log_weights: &[T],
) -> (FlowStats<T>, T) {
    let max = log_weights.iter().copied().fold(T::neg_infinity(), T::max);
    let raw: Vec<T> = log_weights.iter().map(|&lw| (lw - max).exp()).collect();
    let total: T = raw.iter().copied().sum();
    let w: Vec<T> = raw.iter().map(|&x| x / total).collect();
    let ess = T::one() / w.iter().map(|&x| x * x).sum::<T>();
    let (l, k) = (points.cols(), forward.cols());
    let mut mean_u = vec![T::zero(); l];
    let mut mean_g = vec![T::zero(); k];
    for ((pu, pg), &wj) in points.iter_rows().zip(forward.iter_rows()).zip(&w) {
        for i in 0..l {
            mean_u[i] = mean_u[i] + wj * pu[i];
        }
        for c in 0..k {
            mean_g[c] = mean_g[c] + wj * pg[c];
        }
    }
    let mut cov_u: Matrix<T> = Matrix::zeros(l, l);
    let mut cov_ug: Matrix<T> = Matrix::zeros(l, k);
    let mut cov_gg: Matrix<T> = Matrix::zeros(k, k);
    for ((pu, pg), &wj) in points.iter_rows().zip(forward.iter_rows()).zip(&w) {
        let du = sub_vec(pu, &mean_u);
        let dg = sub_vec(pg, &mean_g);
        for i in 0..l {
            for i2 in 0..l {
                cov_u[(i, i2)] = cov_u[(i, i2)] + wj * du[i] * du[i2];
            }
            for c in 0..k {
                cov_ug[(i, c)] = cov_ug[(i, c)] + wj * du[i] * dg[c];
            }
        }
        for c in 0..k {
            for c2 in 0..k {
                cov_gg[(c, c2)] = cov_gg[(c, c2)] + wj * dg[c] * dg[c2];
            }
        }
    }
    (
        FlowStats {
            t,
            mean_rho: mean_u,
            mean_g,
            cov_rho: cov_u,
            cov_rho_g: cov_ug,
            cov_gg,
        },
        ess,
    )
}

/// Self-normalized importance sampling estimate of `μ(t)` moments.
#[derive(Debug, Clone)]
pub struct ImportanceStats<T> {
    pub stats: FlowStats<T>,
    pub effective_sample_size: T,
}

/// Draws `n` points from the prior and weights them by `exp(−tΦ)`.
pub fn mu_stats_importance<T: Scalar>(
    model: &ForwardModel<T>,
    prior: &Prior<T>,
    t: T,
    n: usize,
    noise: &TrialNoise,
) -> Result<ImportanceStats<T>> {
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let points = sample_gaussian(&prior.mean, &prior.cov, n, noise, 0)?;
    let mut forward = Matrix::zeros(n, model.dim_obs());
    let mut log_w = Vec::with_capacity(n);
    for (j, u) in points.iter_rows().enumerate() {
        model.apply_into(u, forward.row_mut(j));
        log_w.push(-t * model.loss(u));
    }
    let (stats, ess) = weighted_stats(t, &points, &forward, &log_w);
    Ok(ImportanceStats {
        stats,
        effective_sample_size: ess,
    })
}

/// Trapezoid quadrature of `μ(t)` moments on a tensor grid covering
/// `u₀ ± half_width·sqrt(C₀ᵢᵢ)` with `per_axis` points per axis. `L ≤ 2`.
pub fn mu_stats_grid<T: Scalar>(
    model: &ForwardModel<T>,
    prior: &Prior<T>,
    t: T,
    half_width: T,
    per_axis: usize,
) -> Result<FlowStats<T>> {
    let l = model.dim_u();
    if l > 2 {
        return Err(Error::InvalidArgument(format!(
            "grid quadrature supports at most 2 dimensions, got {l}"
        )));
    }
    if per_axis < 2 {
        return Err(Error::InvalidArgument("grid needs at least 2 points per axis".into()));
    }
    let c0 = prior.cov.matrix();
    let axes: Vec<Vec<(T, T)>> = (0..l)
        .map(|i| {
            let s = c0[(i, i)].sqrt() * half_width;
            let lo = prior.mean[i] - s;
            let step = (s + s) / T::of_usize(per_axis - 1);
            (0..per_axis)
                .map(|p| {
                    let w = if p == 0 || p == per_axis - 1 { T::of(0.5) } else { T::one() };
                    (lo + step * T::of_usize(p), w * step)
                })
                .collect()
        })
        .collect();
    let total = per_axis.pow(l as u32);
    let mut points = Matrix::zeros(total, l);
    let mut forward = Matrix::zeros(total, model.dim_obs());
    let mut log_w = Vec::with_capacity(total);
    for idx in 0..total {
        let mut rem = idx;
        let mut cell_weight = T::one();
        for i in (0..l).rev() {
            let (x, w) = axes[i][rem % per_axis];
            rem /= per_axis;
            points[(idx, i)] = x;
            cell_weight = cell_weight * w;
        }
        let u = points.row(idx).to_vec();
        model.apply_into(&u, forward.row_mut(idx));
        log_w.push(prior.log_density(&u) - t * model.loss(&u) + cell_weight.ln());
    }
    Ok(weighted_stats(t, &points, &forward, &log_w).0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::SpdMatrix;
    use crate::noise::NoiseStream;

    fn linear_model() -> (ForwardModel<f64>, Prior<f64>) {
        let a = Matrix::from_rows(&[vec![1.0, 0.3], vec![-0.2, 0.8], vec![0.5, 0.5]]).unwrap();
        let gamma = SpdMatrix::new(
            Matrix::from_rows(&[vec![0.5, 0.1, 0.0], vec![0.1, 0.7, 0.0], vec![0.0, 0.0, 1.2]]).unwrap(),
        )
        .unwrap();
        let model = ForwardModel::linear(a, gamma, vec![1.0, -0.5, 0.3]).unwrap();
        let prior = Prior::new(
            vec![0.2, -0.1],
            SpdMatrix::new(Matrix::from_rows(&[vec![1.0, 0.2], vec![0.2, 0.6]]).unwrap()).unwrap(),
        )
        .unwrap();
        (model, prior)
    }

    #[test]
    fn linear_case_sums_to_zero() {
        let (model, prior) = linear_model();
        let noise = NoiseStream::new(10).trial(0);
        for p in 0..100 {
            let mut buf = [0.0; 3];
            noise.fill_uniforms_at(0, 3 * p, &mut buf);
            let t = buf[0];
            let u = [4.0 * buf[1] - 2.0, 4.0 * buf[2] - 2.0];
            let stats = mu_stats_exact(&model, &prior, t).unwrap();
            let r = residual_terms(&model, &prior, t, &u, &stats).unwrap();
            assert_eq!(r.r3, 0.0);
            assert!(r.total().abs() <= 1e-8, "{}", r.total());
        }
    }

    #[test]
    fn v_vanishes_at_prior_mean_at_time_zero() {
        let (model, prior) = linear_model();
        let stats = mu_stats_exact(&model, &prior, 0.0).unwrap();
        let r = residual_terms(&model, &prior, 0.0, &prior.mean.clone(), &stats).unwrap();
        assert!(r.v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn v_is_gradient_of_log_mu() {
        let (model, prior) = linear_model();
        let model = model.with_nonlinearity(0.3, 5).unwrap();
        let t = 0.6;
        let u = [0.3, -0.4];
        let stats = mu_stats_exact(&model, &prior, t);
        assert!(stats.is_err());
        let dummy = FlowStats {
            t,
            mean_rho: vec![0.0; 2],
            mean_g: vec![0.0; 3],
            cov_rho: Matrix::zeros(2, 2),
            cov_rho_g: Matrix::zeros(2, 3),
            cov_gg: Matrix::zeros(3, 3),
        };
        let r = residual_terms(&model, &prior, t, &u, &dummy).unwrap();
        let log_mu = |x: &[f64]| prior.log_density(x) - t * model.loss(x);
        for i in 0..2 {
            let eps = 1e-6;
            let mut up = u;
            let mut dn = u;
            up[i] += eps;
            dn[i] -= eps;
            let fd = (log_mu(&up) - log_mu(&dn)) / (2.0 * eps);
            assert!((fd - r.v[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn grid_and_importance_agree_with_exact_in_linear_case() {
        let (model, prior) = linear_model();
        let t = 0.7;
        let exact = mu_stats_exact(&model, &prior, t).unwrap();
        let grid = mu_stats_grid(&model, &prior, t, 9.0, 401).unwrap();
        assert!(grid.cov_rho_g.sub(&exact.cov_rho_g).max_abs() < 1e-8);
        assert!(sub_vec(&grid.mean_g, &exact.mean_g).iter().all(|x| x.abs() < 1e-8));
        let is = mu_stats_importance(&model, &prior, t, 200_000, &NoiseStream::new(2).trial(0)).unwrap();
        assert!(is.stats.cov_rho_g.sub(&exact.cov_rho_g).max_abs() < 0.02);
        assert!(is.effective_sample_size > 1000.0);
    }

    #[test]
    fn nonlinear_residual_is_nonzero() {
        let (model, prior) = linear_model();
        let model = model.with_nonlinearity(0.4, 3).unwrap();
        let t = 0.5;
        let stats = mu_stats_grid(&model, &prior, t, 8.0, 201).unwrap();
        let r = residual_terms(&model, &prior, t, &[0.5, 0.5], &stats).unwrap();
        assert!(r.r3 != 0.0);
        assert!(r.total().abs() > 1e-6);
    }
}
