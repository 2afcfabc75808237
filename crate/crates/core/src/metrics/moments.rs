use crate::eki::Ensemble;
use crate::error::{Error, Result};
use crate::linalg::{norm, sub_vec, symmetric_spectral_norm};
use crate::meanfield::GaussianDensity;
use crate::noise::TrialNoise;
use crate::scalar::Scalar;

/// Ensemble moment summary at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentReport<T> {
    /// `(p, (1/J)Σ|uʲ − ū|ᵖ)`.
    pub centered: Vec<(u32, T)>,
    /// `(p, (1/J)Σ|uʲ − u†|ᵖ)`.
    pub about_dagger: Vec<(u32, T)>,
    /// `‖Cov_ens − Cov_flow‖₂` when a reference law is given.
    pub cov_error: Option<T>,
    pub cov_trace: T,
}

pub fn moment_diagnostics<T: Scalar>(
    ens: &Ensemble<T>,
    u_dagger: &[T],
    flow: Option<&GaussianDensity<T>>,
    powers: &[u32],
) -> Result<MomentReport<T>> {
    if let Some(&p) = powers.iter().find(|&&p| p == 0 || p % 2 == 1 || p > 8) {
        return Err(Error::InvalidArgument(format!(
            "moment order must be even and at most 8, got {p}"
        )));
    }
    if u_dagger.len() != ens.dim() {
        return Err(Error::DimensionMismatch {
            what: "u† length",
            expected: ens.dim(),
            got: u_dagger.len(),
        });
    }
    let mean = ens.mean();
    let j = T::of_usize(ens.size());
    let dist_mean: Vec<T> = ens.iter().map(|u| norm(&sub_vec(u, &mean))).collect();
    let dist_dagger: Vec<T> = ens.iter().map(|u| norm(&sub_vec(u, u_dagger))).collect();
    let moment = |d: &[T], p: u32| d.iter().map(|x| x.powi(p as i32)).sum::<T>() / j;
    let cov = ens.covariance();
    let cov_error = match flow {
        Some(f) => {
            if f.dim() != ens.dim() {
                return Err(Error::DimensionMismatch {
                    what: "reference law dimension",
                    expected: ens.dim(),
                    got: f.dim(),
                });
            }
            Some(symmetric_spectral_norm(&cov.sub(f.cov.matrix()).symmetrized()))
        }
        None => None,
    };
    Ok(MomentReport {
        centered: powers.iter().map(|&p| (p, moment(&dist_mean, p))).collect(),
        about_dagger: powers.iter().map(|&p| (p, moment(&dist_dagger, p))).collect(),
        cov_error,
        cov_trace: cov.trace(),
    })
}

/// Mean-zero test distributions for the sum-moment check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MomentSource {
    /// Uniform on `(−a, a)`.
    Uniform { half_width: f64 },
    /// `±1` with equal probability.
    Rademacher,
}

impl MomentSource {
    fn draw(self, u: f64) -> f64 {
        match self {
            Self::Uniform { half_width } => half_width * (2.0 * u - 1.0),
            Self::Rademacher => {
                if u < 0.5 {
                    -1.0
                } else {
                    1.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppendixRow {
    pub j: usize,
    /// Monte Carlo mean of `|Σⱼ xⱼ|ᵖ / J^{p/2}`.
    pub ratio: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppendixTable {
    pub p: u32,
    pub rows: Vec<AppendixRow>,
}

impl AppendixTable {
    /// Largest over smallest ratio across `J`.
    pub fn spread(&self) -> f64 {
        let max = self.rows.iter().map(|r| r.ratio).fold(f64::NEG_INFINITY, f64::max);
        let min = self.rows.iter().map(|r| r.ratio).fold(f64::INFINITY, f64::min);
        max / min
    }
}

/// Monte Carlo estimate of `E|Σⱼ xⱼ|ᵖ / J^{p/2}` for i.i.d. mean-zero `xⱼ`.
/// Replicate `r` for size `J` reads uniforms at step `J`, positions `r·J..`.
pub fn appendix_moment_check(
    source: MomentSource,
    p: u32,
    sizes: &[usize],
    replicates: usize,
    noise: &TrialNoise,
) -> Result<AppendixTable> {
    if p == 0 || p % 2 == 1 {
        return Err(Error::InvalidArgument(format!("p must be even and positive, got {p}")));
    }
    if replicates < 2 || sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::InvalidArgument(
            "need at least 2 replicates and positive sizes".into(),
        ));
    }
    let mut rows = Vec::with_capacity(sizes.len());
    let mut buf = Vec::new();
    for &j in sizes {
        buf.resize(j, 0.0f64);
        let scale = (j as f64).powf(p as f64 / 2.0);
        let (mut s1, mut s2) = (0.0, 0.0);
        for r in 0..replicates {
            noise.fill_uniforms_at(j as u64, r * j, &mut buf);
            let sum: f64 = buf.iter().map(|&u| source.draw(u)).sum();
            let v = sum.powi(p as i32) / scale;
            s1 += v;
            s2 += v * v;
        }
        let n = replicates as f64;
        let mean = s1 / n;
        let var = ((s2 - n * mean * mean) / (n - 1.0)).max(0.0);
        rows.push(AppendixRow {
            j,
            ratio: mean,
            stderr: (var / n).sqrt(),
        });
    }
    Ok(AppendixTable { p, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{Matrix, SpdMatrix};
    use crate::noise::NoiseStream;

    #[test]
    fn identical_particles_have_zero_centered_moments() {
        let ens = Ensemble::<f64>::new(Matrix::from_fn(5, 2, |_, c| c as f64 + 0.5), 0.0).unwrap();
        let r = moment_diagnostics(&ens, &[0.0, 0.0], None, &[2, 4, 8]).unwrap();
        assert!(r.centered.iter().all(|&(_, v)| v == 0.0));
        assert!(r.about_dagger.iter().all(|&(_, v)| v > 0.0));
        assert_eq!(r.cov_trace, 0.0);
    }

    #[test]
    fn gaussian_fourth_moment() {
        let g = GaussianDensity::<f64>::new(vec![0.0], SpdMatrix::identity(1)).unwrap();
        let ens = Ensemble::new(g.sample(100_000, &NoiseStream::new(8).trial(0), 0).unwrap(), 0.0).unwrap();
        let r = moment_diagnostics(&ens, &[0.0], Some(&g), &[2, 4]).unwrap();
        assert!((r.centered[1].1 - 3.0).abs() < 0.15);
        assert!(r.cov_error.unwrap() < 0.02);
    }

    #[test]
    fn rejects_odd_or_large_powers() {
        let ens = Ensemble::new(Matrix::column(&[0.0, 1.0]), 0.0).unwrap();
        assert!(moment_diagnostics(&ens, &[0.0], None, &[3]).is_err());
        assert!(moment_diagnostics(&ens, &[0.0], None, &[10]).is_err());
    }

    #[test]
    fn second_moment_ratio_is_variance() {
        let noise = NoiseStream::new(4).trial(0);
        let t = appendix_moment_check(MomentSource::Uniform { half_width: 1.0 }, 2, &[4, 64], 20_000, &noise).unwrap();
        for row in &t.rows {
            assert!((row.ratio - 1.0 / 3.0).abs() < 4.0 * row.stderr, "{row:?}");
        }
    }

    #[test]
    fn rademacher_p2_is_exactly_one_for_j_one() {
        let noise = NoiseStream::new(4).trial(0);
        let t = appendix_moment_check(MomentSource::Rademacher, 2, &[1], 100, &noise).unwrap();
        assert_eq!(t.rows[0].ratio, 1.0);
        assert_eq!(t.spread(), 1.0);
    }
}
