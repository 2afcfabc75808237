use crate::eki::Ensemble;
use crate::meanfield::GaussianDensity;
use crate::scalar::Scalar;

/// `(1/J) Σⱼ f(uʲ)`.
pub fn ensemble_average<T: Scalar>(ens: &Ensemble<T>, f: impl Fn(&[T]) -> T) -> T {
    ens.iter().map(f).sum::<T>() / T::of_usize(ens.size())
}

/// Root mean square deviation of `estimates` from `reference`.
pub fn rmse<T: Scalar>(estimates: &[T], reference: T) -> T {
    if estimates.is_empty() {
        return T::zero();
    }
    let ss: T = estimates.iter().map(|&e| (e - reference) * (e - reference)).sum();
    (ss / T::of_usize(estimates.len())).sqrt()
}

/// `sqrt(mean over seeds of |(1/J)Σf(uʲ) − E_ρ f|²)`, one ensemble per seed.
pub fn weak_statistic<T: Scalar>(
    ensembles: &[Ensemble<T>],
    f: impl Fn(&[T]) -> T,
    reference: T,
) -> T {
    let estimates: Vec<T> = ensembles.iter().map(|e| ensemble_average(e, &f)).collect();
    rmse(&estimates, reference)
}

/// `f(u) = Σᵢ sin(uᵢ)`, 1-Lipschitz in each coordinate.
pub fn sum_sin<T: Scalar>(u: &[T]) -> T {
    u.iter().map(|x| x.sin()).sum()
}

/// `E[Σᵢ sin(uᵢ)] = Σᵢ sin(mᵢ)·exp(−Cᵢᵢ/2)` for `u ~ N(m, C)`.
pub fn sum_sin_reference<T: Scalar>(flow: &GaussianDensity<T>) -> T {
    let c = flow.cov.matrix();
    flow.mean
        .iter()
        .enumerate()
        .map(|(i, &m)| m.sin() * (-c[(i, i)] * T::of(0.5)).exp())
        .sum()
}
