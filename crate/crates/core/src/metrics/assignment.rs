use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Largest problem accepted by [`min_cost_assignment`].
pub const MAX_ASSIGNMENT_SIZE: usize = 4096;

/// Exact minimum-cost perfect matching on an `n×n` cost matrix given
/// row-major. Returns `assign` with row `i` matched to column `assign[i]`.
///
/// Shortest augmenting paths with dual potentials, `O(n³)`.
pub fn min_cost_assignment<T: Scalar>(n: usize, cost: &[T]) -> Result<Vec<usize>> {
    if n > MAX_ASSIGNMENT_SIZE {
        return Err(Error::TooLarge {
            n,
            max: MAX_ASSIGNMENT_SIZE,
        });
    }
    if cost.len() != n * n {
        return Err(Error::SizeMismatch {
            left: n * n,
            right: cost.len(),
        });
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("assignment cost"));
    }
    let inf = T::infinity();
    // 1-based; index 0 is the virtual column of the augmenting tree
    let mut u = vec![T::zero(); n + 1];
    let mut v = vec![T::zero(); n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![inf; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        minv.fill(inf);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let ui0 = u[i0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = row[j - 1] - ui0 - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] = u[p[j]] + delta;
                    v[j] = v[j] - delta;
                } else {
                    minv[j] = minv[j] - delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    Ok(assign)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force(n: usize, cost: &[f64]) -> f64 {
        fn rec(row: usize, n: usize, cost: &[f64], used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == n {
                *best = best.min(acc);
                return;
            }
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    rec(row + 1, n, cost, used, acc + cost[row * n + j], best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(0, n, cost, &mut vec![false; n], 0.0, &mut best);
        best
    }

    #[test]
    fn small_hand_case() {
        let cost = [4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0];
        let a = min_cost_assignment(3, &cost).unwrap();
        let total: f64 = a.iter().enumerate().map(|(i, &j)| cost[i * 3 + j]).sum();
        assert_eq!(total, 5.0);
    }

    #[test]
    fn matches_brute_force_on_random_costs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let n = rng.random_range(1..=6);
            let cost: Vec<f64> = (0..n * n).map(|_| rng.random_range(-3.0..5.0)).collect();
            let a = min_cost_assignment(n, &cost).unwrap();
            let mut seen = vec![false; n];
            for &j in &a {
                assert!(!seen[j]);
                seen[j] = true;
            }
            let total: f64 = a.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
            assert!((total - brute_force(n, &cost)).abs() < 1e-12);
        }
    }

    #[test]
    fn guards() {
        assert_eq!(
            min_cost_assignment::<f64>(MAX_ASSIGNMENT_SIZE + 1, &[]).unwrap_err(),
            Error::TooLarge {
                n: MAX_ASSIGNMENT_SIZE + 1,
                max: MAX_ASSIGNMENT_SIZE
            }
        );
        assert!(min_cost_assignment(2, &[1.0, 2.0, 3.0]).is_err());
        assert!(min_cost_assignment(0, &[] as &[f64]).unwrap().is_empty());
    }
}
