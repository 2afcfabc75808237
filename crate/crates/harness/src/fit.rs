//! Log-log rate fits with seed-bootstrap standard errors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::HarnessError;

/// How per-seed values are combined at one `J`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    Mean,
    /// Root mean square, for errors whose expectation is taken squared.
    Rms,
}

impl Aggregate {
    fn apply(self, xs: &[f64]) -> f64 {
        let n = xs.len() as f64;
        match self {
            Self::Mean => xs.iter().sum::<f64>() / n,
            Self::Rms => (xs.iter().map(|x| x * x).sum::<f64>() / n).sqrt(),
        }
    }

    fn stderr(self, xs: &[f64]) -> f64 {
        let n = xs.len() as f64;
        if xs.len() < 2 {
            return 0.0;
        }
        let sd = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / n;
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        match self {
            Self::Mean => sd(xs) / n.sqrt(),
            Self::Rms => {
                let sq: Vec<f64> = xs.iter().map(|x| x * x).collect();
                let rms = self.apply(xs);
                if rms == 0.0 {
                    0.0
                } else {
                    sd(&sq) / n.sqrt() / (2.0 * rms)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerJ {
    #[serde(rename = "J")]
    pub j: usize,
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard deviation of the slope over seed-bootstrap resamples.
    pub stderr: f64,
    pub aggregate: Aggregate,
    pub per_j: Vec<PerJ>,
}

fn ols(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Fits `log(aggregate) = intercept + slope·log J`. `samples` holds the per-seed
/// values for each `J`.
pub fn fit_rate(
    samples: &[(usize, Vec<f64>)],
    aggregate: Aggregate,
    resamples: usize,
    seed: u64,
) -> Result<RateFit, HarnessError> {
    let mut js: Vec<usize> = samples.iter().map(|s| s.0).collect();
    js.sort_unstable();
    js.dedup();
    if js.len() < 4 || js.len() != samples.len() {
        return Err(HarnessError::DegenerateFit(format!(
            "need at least 4 distinct ensemble sizes, got {}",
            js.len()
        )));
    }
    if let Some((j, _)) = samples.iter().find(|(_, v)| v.is_empty()) {
        return Err(HarnessError::DegenerateFit(format!("no samples at J={j}")));
    }
    let per_j: Vec<PerJ> = samples
        .iter()
        .map(|(j, v)| PerJ {
            j: *j,
            mean: aggregate.apply(v),
            stderr: aggregate.stderr(v),
            n: v.len(),
        })
        .collect();
    if let Some(p) = per_j.iter().find(|p| !(p.mean > 0.0) || !p.mean.is_finite()) {
        return Err(HarnessError::DegenerateFit(format!(
            "aggregate at J={} is {}, logs need positive values",
            p.j, p.mean
        )));
    }
    let x: Vec<f64> = per_j.iter().map(|p| (p.j as f64).ln()).collect();
    let y: Vec<f64> = per_j.iter().map(|p| p.mean.ln()).collect();
    let (slope, intercept) = ols(&x, &y);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut slopes = Vec::with_capacity(resamples);
    let mut buf = Vec::new();
    'outer: for _ in 0..resamples {
        let mut yb = Vec::with_capacity(samples.len());
        for (_, v) in samples {
            buf.clear();
            buf.extend((0..v.len()).map(|_| v[rng.random_range(0..v.len())]));
            let a = aggregate.apply(&buf);
            if !(a > 0.0) {
                continue 'outer;
            }
            yb.push(a.ln());
        }
        slopes.push(ols(&x, &yb).0);
    }
    let stderr = if slopes.len() < 2 {
        0.0
    } else {
        let n = slopes.len() as f64;
        let m = slopes.iter().sum::<f64>() / n;
        (slopes.iter().map(|s| (s - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(RateFit {
        slope,
        intercept,
        stderr,
        aggregate,
        per_j,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_power_law() {
        let samples: Vec<_> = [32usize, 64, 128, 256, 512]
            .iter()
            .map(|&j| (j, vec![3.0 * (j as f64).powf(-0.5); 8]))
            .collect();
        let fit = fit_rate(&samples, Aggregate::Mean, 200, 1).unwrap();
        assert!((fit.slope + 0.5).abs() < 1e-12);
        assert!((fit.intercept - 3f64.ln()).abs() < 1e-12);
        assert!(fit.stderr < 1e-12);
    }

    #[test]
    fn constant_metric_has_zero_slope() {
        let samples: Vec<_> = [16usize, 32, 64, 128]
            .iter()
            .map(|&j| (j, vec![0.7, 0.9, 1.1, 1.3]))
            .collect();
        let fit = fit_rate(&samples, Aggregate::Mean, 200, 1).unwrap();
        assert!(fit.slope.abs() < 1e-12);
    }

    #[test]
    fn noisy_power_law_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples: Vec<_> = [32usize, 64, 128, 256, 512, 1024]
            .iter()
            .map(|&j| {
                let v = (0..32)
                    .map(|_| 2.0 * (j as f64).powf(-0.5) * (1.0 + 0.05 * (rng.random::<f64>() * 2.0 - 1.0)))
                    .collect();
                (j, v)
            })
            .collect();
        let fit = fit_rate(&samples, Aggregate::Mean, 200, 2).unwrap();
        assert!((fit.slope + 0.5).abs() < 0.05);
        assert!(fit.stderr > 0.0 && fit.stderr < 0.05);
    }

    #[test]
    fn more_seeds_shrink_stderr() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut make = |seeds: usize| -> Vec<(usize, Vec<f64>)> {
            [32usize, 64, 128, 256, 512]
                .iter()
                .map(|&j| (j, (0..seeds).map(|_| (j as f64).powf(-0.5) * (0.5 + rng.random::<f64>())).collect()))
                .collect()
        };
        let small = fit_rate(&make(64), Aggregate::Mean, 400, 3).unwrap().stderr;
        let large = fit_rate(&make(256), Aggregate::Mean, 400, 3).unwrap().stderr;
        let ratio = small / large;
        assert!((1.5..2.7).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn degenerate_inputs() {
        let zero: Vec<_> = [16usize, 32, 64, 128].iter().map(|&j| (j, vec![0.0, 0.0])).collect();
        assert!(matches!(fit_rate(&zero, Aggregate::Mean, 10, 1), Err(HarnessError::DegenerateFit(_))));
        let few: Vec<_> = [16usize, 32, 64].iter().map(|&j| (j, vec![1.0])).collect();
        assert!(matches!(fit_rate(&few, Aggregate::Mean, 10, 1), Err(HarnessError::DegenerateFit(_))));
    }

    #[test]
    fn rms_aggregate() {
        let samples: Vec<_> = [16usize, 32, 64, 128]
            .iter()
            .map(|&j| (j, vec![3.0 / (j as f64).sqrt(), -4.0 / (j as f64).sqrt()]))
            .collect();
        let fit = fit_rate(&samples, Aggregate::Rms, 50, 1).unwrap();
        assert!((fit.per_j[0].mean - (12.5f64 / 16.0).sqrt()).abs() < 1e-12);
        assert!((fit.slope + 0.5).abs() < 1e-12);
    }
}
