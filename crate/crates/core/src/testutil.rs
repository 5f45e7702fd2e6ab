//! Finite-difference helpers shared by unit tests.

use rand::Rng;

use crate::policy::PolicyParams;

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central difference of `f` along coordinate `i`.
pub fn central_diff(f: &dyn Fn(&PolicyParams) -> f64, params: &PolicyParams, i: usize, h: f64) -> f64 {
    let mut p = params.clone();
    let x0 = p.as_slice()[i];
    p.as_mut_slice()[i] = x0 + h;
    let fp = f(&p);
    p.as_mut_slice()[i] = x0 - h;
    let fm = f(&p);
    (fp - fm) / (2.0 * h)
}

/// Largest relative error between `analytic` and central differences over
/// `n_coords` random coordinates.
pub fn fd_max_rel_err<R: Rng>(
    f: &dyn Fn(&PolicyParams) -> f64,
    params: &PolicyParams,
    analytic: &PolicyParams,
    n_coords: usize,
    rng: &mut R,
) -> f64 {
    let n = params.as_slice().len();
    (0..n_coords)
        .map(|_| {
            let i = rng.random_range(0..n);
            rel_err(analytic.as_slice()[i], central_diff(f, params, i, 1e-5), 1e-6)
        })
        .fold(0.0, f64::max)
}
