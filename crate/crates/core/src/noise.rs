//! Counter-based Gaussian noise.
//!
//! A [`NoiseStream`] holds only a master seed. Every draw is addressed by
//! `(trial, step, particle, component)`:
//!
//! * `(master seed, trial)` becomes the ChaCha8 key,
//! * `step` (together with a channel tag) selects the ChaCha stream,
//! * `particle · d + component` is the position within that stream, where
//!   `d` is the length of the vector drawn per particle.
//!
//! Normals are produced by Box–Muller from fixed pairs of 64-bit words, so the
//! value at an address does not depend on which other addresses were read.
//! Two solvers that read the same addresses therefore see the same
//! increments, which is what the coupled EKI/bridge runs rely on.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::linalg::{Matrix, SpdMatrix};
use crate::scalar::Scalar;

const CHANNEL_GAUSSIAN: u64 = 0;
const CHANNEL_UNIFORM: u64 = 1;

/// SplitMix64 finalizer; a bijection on `u64`.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds several words into one well-mixed identifier.
pub fn combine_ids(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6A09_E667_F3BC_C908, |acc, &p| mix64(acc ^ mix64(p)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Source {
    Counter(u64),
    Zero,
}

/// Stateless source of standard normals, addressable per trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseStream {
    source: Source,
}

impl NoiseStream {
    pub fn new(master_seed: u64) -> Self {
        Self {
            source: Source::Counter(master_seed),
        }
    }

    /// A stream whose every draw is exactly zero; used to switch off the
    /// Brownian and perturbed-data terms.
    pub fn zero() -> Self {
        Self {
            source: Source::Zero,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.source == Source::Zero
    }

    pub fn trial(&self, trial_id: u64) -> TrialNoise {
        let key = match self.source {
            Source::Zero => None,
            Source::Counter(seed) => {
                let words = [
                    mix64(seed),
                    mix64(seed ^ 0xA5A5_A5A5_A5A5_A5A5),
                    mix64(trial_id),
                    mix64(trial_id ^ 0x5A5A_5A5A_5A5A_5A5A),
                ];
                let mut key = [0u8; 32];
                for (chunk, w) in key.chunks_exact_mut(8).zip(words) {
                    chunk.copy_from_slice(&w.to_le_bytes());
                }
                Some(key)
            }
        };
        TrialNoise { key, trial_id }
    }
}

/// Noise for one trial. Cheap to copy; all methods take `&self`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrialNoise {
    key: Option<[u8; 32]>,
    trial_id: u64,
}

impl TrialNoise {
    pub fn trial_id(&self) -> u64 {
        self.trial_id
    }

    pub fn is_zero(&self) -> bool {
        self.key.is_none()
    }

    fn rng(&self, step: u64, channel: u64) -> Option<ChaCha8Rng> {
        self.key.map(|key| {
            let mut rng = ChaCha8Rng::from_seed(key);
            rng.set_stream(mix64(step ^ (channel << 62)));
            rng
        })
    }

    /// Fills `out` with the normals at stream positions `start..start+out.len()`.
    pub fn fill_normals_at<T: Scalar>(&self, step: u64, start: usize, out: &mut [T]) {
        let Some(mut rng) = self.rng(step, CHANNEL_GAUSSIAN) else {
            out.fill(T::zero());
            return;
        };
        if out.is_empty() {
            return;
        }
        let first_pair = start / 2;
        rng.set_word_pos(4 * first_pair as u128);
        let mut idx = first_pair * 2;
        let end = start + out.len();
        while idx < end {
            let (z0, z1) = box_muller(rng.next_u64(), rng.next_u64());
            for (k, z) in [(idx, z0), (idx + 1, z1)] {
                if k >= start && k < end {
                    out[k - start] = T::of(z);
                }
            }
            idx += 2;
        }
    }

    /// Normals for one particle at one step; the vector length is `out.len()`.
    pub fn normals<T: Scalar>(&self, particle: usize, step: u64, out: &mut [T]) {
        self.fill_normals_at(step, particle * out.len(), out);
    }

    /// Normals for all particles at one step, row-major `rows × d` into `out`.
    /// Row `j` equals what [`Self::normals`] returns for particle `j`.
    pub fn fill_step_normals<T: Scalar>(&self, step: u64, out: &mut [T]) {
        self.fill_normals_at(step, 0, out);
    }

    /// Single normal at `(particle, step, component)` for vectors of length `dim`.
    pub fn normal_at(&self, particle: usize, step: u64, component: usize, dim: usize) -> f64 {
        let mut one = [0.0f64];
        self.fill_normals_at(step, particle * dim + component, &mut one);
        one[0]
    }

    /// Uniforms on `[0, 1)` from an independent channel, positions `start..`.
    pub fn fill_uniforms_at<T: Scalar>(&self, step: u64, start: usize, out: &mut [T]) {
        let Some(mut rng) = self.rng(step, CHANNEL_UNIFORM) else {
            out.fill(T::zero());
            return;
        };
        rng.set_word_pos(2 * start as u128);
        for o in out.iter_mut() {
            *o = T::of((rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64));
        }
    }
}

/// Uniform in `(0, 1]` from the top 53 bits.
#[inline]
fn unit_open_closed(x: u64) -> f64 {
    ((x >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[inline]
fn box_muller(a: u64, b: u64) -> (f64, f64) {
    let u1 = unit_open_closed(a);
    let u2 = unit_open_closed(b);
    let r = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
    (r * c, r * s)
}

/// `n` draws from `N(mean, cov)` as rows: `mean + L·z` with `z` read at
/// `(trial, step, row, ·)`.
pub fn sample_gaussian<T: Scalar>(
    mean: &[T],
    cov: &SpdMatrix<T>,
    n: usize,
    noise: &TrialNoise,
    step: u64,
) -> Result<Matrix<T>> {
    let d = mean.len();
    if cov.dim() != d {
        return Err(crate::Error::DimensionMismatch {
            what: "sample_gaussian covariance",
            expected: d,
            got: cov.dim(),
        });
    }
    let mut z = Matrix::zeros(n, d);
    noise.fill_step_normals(step, z.as_mut_slice());
    let l = cov.factor();
    let mut out = Matrix::zeros(n, d);
    for j in 0..n {
        let zj = z.row(j);
        let row = out.row_mut(j);
        for i in 0..d {
            let mut s = mean[i];
            for k in 0..=i {
                s = s + l[(i, k)] * zj[k];
            }
            row[i] = s;
        }
    }
    Ok(out)
}
