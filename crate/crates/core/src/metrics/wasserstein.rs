use std::fmt;

use super::assignment::min_cost_assignment;
use super::quadrature::GaussLegendre;
use crate::error::{Error, Result};
use crate::linalg::{psd_sqrt, sub_vec, Matrix};
use crate::meanfield::GaussianDensity;
use crate::noise::TrialNoise;
use crate::scalar::Scalar;

pub const DEFAULT_QUADRATURE_ORDER: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum W2Method {
    Sorted1d,
    Semidiscrete1d,
    Assignment,
    /// Assignment distance to fresh same-size draws from the reference law,
    /// averaged over draws. Biased upward.
    PairedReference,
    GaussianClosedForm,
}

impl W2Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::Sorted1d => "sorted-1d",
            Self::Semidiscrete1d => "semidiscrete-1d",
            Self::Assignment => "assignment",
            Self::PairedReference => "paired-reference",
            Self::GaussianClosedForm => "gaussian-closed-form",
        }
    }
}

impl fmt::Display for W2Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct W2Result<T> {
    pub value: T,
    pub method: W2Method,
}

impl<T> W2Result<T> {
    fn new(value: T, method: W2Method) -> Self {
        Self { value, method }
    }
}

fn sorted<T: Scalar>(a: &[T]) -> Result<Vec<T>> {
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("W2 sample"));
    }
    let mut s = a.to_vec();
    s.sort_by(|x, y| x.partial_cmp(y).expect("finite"));
    Ok(s)
}

/// Distance between two equal-size 1-D empirical measures.
pub fn w2_sorted_1d<T: Scalar>(a: &[T], b: &[T]) -> Result<W2Result<T>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput);
    }
    if a.len() != b.len() {
        return Err(Error::SizeMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let (sa, sb) = (sorted(a)?, sorted(b)?);
    let ss: T = sa.iter().zip(&sb).map(|(&x, &y)| (x - y) * (x - y)).sum();
    Ok(W2Result::new(
        (ss / T::of_usize(a.len())).sqrt(),
        W2Method::Sorted1d,
    ))
}

/// Distance between a 1-D empirical measure and a continuous law given by its
/// quantile function:
/// `W2² = Σᵢ ∫_{(i−1)/n}^{i/n} (x₍ᵢ₎ − F⁻¹(q))² dq`.
///
/// Each cell uses Gauss–Legendre of the given order. The two end cells, where
/// `F⁻¹` may be unbounded, are split into dyadic pieces shrinking toward the
/// endpoint.
pub fn w2_semidiscrete_1d<T: Scalar>(
    sample: &[T],
    quantile: impl Fn(T) -> T,
    order: usize,
) -> Result<W2Result<T>> {
    if sample.is_empty() {
        return Err(Error::EmptyInput);
    }
    if order < 8 {
        return Err(Error::InvalidArgument(format!(
            "quadrature order must be at least 8, got {order}"
        )));
    }
    let xs = sorted(sample)?;
    let n = xs.len();
    let rule = GaussLegendre::new(order);
    let nf = n as f64;
    let eps = T::epsilon().to_f64().unwrap_or(f64::EPSILON);
    let cell = |x: T, a: f64, b: f64| -> f64 {
        rule.integrate(a, b, |q| {
            let d = (x - quantile(T::of(q))).as_f64();
            d * d
        })
    };
    // pieces [b/2, b], [b/4, b/2], … toward 0
    let graded_low = |x: T, b: f64| -> f64 {
        let mut total = 0.0;
        let mut hi = b;
        while hi > eps {
            total += cell(x, 0.5 * hi, hi);
            hi *= 0.5;
        }
        total
    };
    // same, toward 1, with distances to 1 halving
    let graded_high = |x: T, a: f64| -> f64 {
        let mut total = 0.0;
        let mut d = 1.0 - a;
        while d > eps {
            total += cell(x, 1.0 - d, 1.0 - 0.5 * d);
            d *= 0.5;
        }
        total
    };
    let mut w2sq = 0.0;
    if n == 1 {
        w2sq = graded_low(xs[0], 0.5) + graded_high(xs[0], 0.5);
    } else {
        for (i, &x) in xs.iter().enumerate() {
            let a = i as f64 / nf;
            let b = (i + 1) as f64 / nf;
            w2sq += if i == 0 {
                graded_low(x, b)
            } else if i == n - 1 {
                graded_high(x, a)
            } else {
                cell(x, a, b)
            };
        }
    }
    if !w2sq.is_finite() {
        return Err(Error::NonFinite("semidiscrete W2"));
    }
    Ok(W2Result::new(T::of(w2sq.max(0.0).sqrt()), W2Method::Semidiscrete1d))
}

fn check_pair<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<()> {
    if a.rows() != b.rows() {
        return Err(Error::SizeMismatch {
            left: a.rows(),
            right: b.rows(),
        });
    }
    if a.cols() != b.cols() {
        return Err(Error::DimensionMismatch {
            what: "W2 point dimension",
            expected: a.cols(),
            got: b.cols(),
        });
    }
    if a.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(())
}

/// Exact distance between two equal-size empirical measures (rows are points)
/// via an optimal assignment on squared Euclidean costs.
pub fn w2_assignment<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<W2Result<T>> {
    check_pair(a, b)?;
    let n = a.rows();
    if n > super::MAX_ASSIGNMENT_SIZE {
        return Err(Error::TooLarge {
            n,
            max: super::MAX_ASSIGNMENT_SIZE,
        });
    }
    let mut cost = Vec::with_capacity(n * n);
    for ra in a.iter_rows() {
        for rb in b.iter_rows() {
            cost.push(
                ra.iter()
                    .zip(rb)
                    .map(|(&x, &y)| (x - y) * (x - y))
                    .sum::<T>(),
            );
        }
    }
    let assign = min_cost_assignment(n, &cost)?;
    let total: T = assign.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok(W2Result::new(
        (total / T::of_usize(n)).max(T::zero()).sqrt(),
        W2Method::Assignment,
    ))
}

/// `sqrt(|m₁−m₂|² + Tr(C₁ + C₂ − 2(C₂^{1/2}C₁C₂^{1/2})^{1/2}))`.
pub fn w2_gaussian<T: Scalar>(
    g1: &GaussianDensity<T>,
    g2: &GaussianDensity<T>,
) -> Result<W2Result<T>> {
    if g1.dim() != g2.dim() {
        return Err(Error::DimensionMismatch {
            what: "Gaussian dimension",
            expected: g1.dim(),
            got: g2.dim(),
        });
    }
    let d = sub_vec(&g1.mean, &g2.mean);
    let mean_part: T = d.iter().map(|&x| x * x).sum();
    let c1 = g1.cov.matrix();
    let c2 = g2.cov.matrix();
    let s2 = psd_sqrt(c2);
    let cross = psd_sqrt(&s2.matmul(c1).matmul(&s2).symmetrized());
    let bures = c1.trace() + c2.trace() - cross.trace() * T::of(2.0);
    Ok(W2Result::new(
        (mean_part + bures.max(T::zero())).sqrt(),
        W2Method::GaussianClosedForm,
    ))
}

/// Mean over `draws` of the assignment distance between `sample` and a fresh
/// same-size draw from `reference`. Draw `r` reads `noise` at step
/// `first_step + r`.
pub fn w2_paired_reference<T: Scalar>(
    sample: &Matrix<T>,
    reference: &GaussianDensity<T>,
    draws: usize,
    noise: &TrialNoise,
    first_step: u64,
) -> Result<W2Result<T>> {
    if draws == 0 {
        return Err(Error::InvalidArgument("need at least one reference draw".into()));
    }
    let mut total = T::zero();
    for r in 0..draws {
        let other = reference.sample(sample.rows(), noise, first_step + r as u64)?;
        total = total + w2_assignment(sample, &other)?.value;
    }
    Ok(W2Result::new(
        total / T::of_usize(draws),
        W2Method::PairedReference,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::SpdMatrix;
    use crate::noise::NoiseStream;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gaussian(mean: f64, var: f64) -> GaussianDensity<f64> {
        GaussianDensity::new(vec![mean], SpdMatrix::from_diag(&[var]).unwrap()).unwrap()
    }

    #[test]
    fn sorted_examples() {
        assert_eq!(w2_sorted_1d(&[0.0, 2.0], &[1.0, 3.0]).unwrap().value, 1.0);
        assert_eq!(w2_sorted_1d(&[0.0], &[2.0]).unwrap().value, 2.0);
        assert_eq!(w2_sorted_1d(&[3.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap().value, 0.0);
        assert_eq!(w2_sorted_1d::<f64>(&[], &[]).unwrap_err(), Error::EmptyInput);
    }

    #[test]
    fn semidiscrete_point_mass_gives_std() {
        let g = gaussian(0.3, 2.25);
        let q = g.quantile_fn().unwrap();
        let r = w2_semidiscrete_1d(&[0.3], q, 16).unwrap();
        assert!((r.value - 1.5).abs() < 1e-9, "{}", r.value);
    }

    #[test]
    fn semidiscrete_uniform_midpoints_decay_like_one_over_n() {
        let mut prev = f64::INFINITY;
        for n in [4usize, 16, 64, 256] {
            let xs: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
            let v = w2_semidiscrete_1d(&xs, |q| q, 8).unwrap().value;
            // exact value is 1/(n·√12)
            assert!((v - 1.0 / (n as f64 * 12f64.sqrt())).abs() < 1e-12);
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn semidiscrete_order_doubling_is_stable() {
        let g = gaussian(0.5, 0.5);
        let noise = NoiseStream::new(12).trial(0);
        let xs = g.sample(200, &noise, 0).unwrap().into_vec();
        let a = w2_semidiscrete_1d(&xs, g.quantile_fn().unwrap(), 16).unwrap().value;
        let b = w2_semidiscrete_1d(&xs, g.quantile_fn().unwrap(), 32).unwrap().value;
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }

    #[test]
    fn semidiscrete_rejects_low_order() {
        assert!(w2_semidiscrete_1d(&[0.0], |q: f64| q, 4).is_err());
    }

    #[test]
    fn assignment_zero_on_permutation() {
        let a = Matrix::from_rows(&[vec![0.0, 1.0], vec![2.0, -1.0], vec![5.0, 5.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![5.0, 5.0], vec![0.0, 1.0], vec![2.0, -1.0]]).unwrap();
        assert_eq!(w2_assignment(&a, &b).unwrap().value, 0.0);
    }

    #[test]
    fn assignment_matches_sorted_in_one_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let n = rng.random_range(1..=128);
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..3.0)).collect();
            let s = w2_sorted_1d(&a, &b).unwrap().value;
            let h = w2_assignment(&Matrix::column(&a), &Matrix::column(&b)).unwrap().value;
            assert!((s - h).abs() < 1e-10);
        }
    }

    #[test]
    fn assignment_errors() {
        let a = Matrix::<f64>::zeros(3, 2);
        let b = Matrix::<f64>::zeros(4, 2);
        assert!(matches!(w2_assignment(&a, &b), Err(Error::SizeMismatch { .. })));
        let big = Matrix::<f64>::zeros(4097, 1);
        assert!(matches!(w2_assignment(&big, &big), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn gaussian_examples() {
        let one = w2_gaussian(&gaussian(0.0, 1.0), &gaussian(1.0, 1.0)).unwrap().value;
        assert!((one - 1.0).abs() < 1e-12);
        let scale = w2_gaussian(&gaussian(0.0, 1.0), &gaussian(0.0, 4.0)).unwrap().value;
        assert!((scale - 1.0).abs() < 1e-12);
        assert_eq!(w2_gaussian(&gaussian(0.2, 0.7), &gaussian(0.2, 0.7)).unwrap().value, 0.0);
    }

    #[test]
    fn gaussian_commuting_covariances() {
        // diagonal case reduces to Σ (σ1ᵢ − σ2ᵢ)²
        let g1 = GaussianDensity::new(vec![0.0, 0.0], SpdMatrix::from_diag(&[1.0, 9.0]).unwrap()).unwrap();
        let g2 = GaussianDensity::new(vec![0.0, 0.0], SpdMatrix::from_diag(&[4.0, 1.0]).unwrap()).unwrap();
        let v = w2_gaussian(&g1, &g2).unwrap().value;
        assert!((v - 5f64.sqrt()).abs() < 1e-10);
    }

    #[test]
    fn paired_reference_is_positive_and_deterministic() {
        let g = GaussianDensity::new(vec![0.0, 0.0], SpdMatrix::identity(2)).unwrap();
        let noise = NoiseStream::new(1).trial(4);
        let sample = g.sample(32, &noise, 0).unwrap();
        let a = w2_paired_reference(&sample, &g, 3, &noise, 100).unwrap();
        let b = w2_paired_reference(&sample, &g, 3, &noise, 100).unwrap();
        assert_eq!(a, b);
        assert!(a.value > 0.0);
        assert_eq!(a.method, W2Method::PairedReference);
    }
}
