//! Central finite-difference gradient checks (double precision).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Scalar, Tensor};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;

/// Uniform `[-1, 1)` tensor from a seed.
pub fn random_tensor<T: Scalar>(dims: [usize; 4], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(dims, |_| T::of_f64(rng.random_range(-1.0..1.0)))
}

/// Error between an analytic and numeric derivative, relative to
/// `max(|a|, |n|, 1)` so that near-zero components are compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

#[derive(Debug)]
pub struct GradMismatch {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

impl std::fmt::Display for GradMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "component {}: analytic {} vs numeric {} (rel. error {:e})",
            self.index, self.analytic, self.numeric, self.error
        )
    }
}

/// Numeric gradient of scalar `f` at `x` by central differences.
pub fn numeric_gradient(x: &Tensor<f64>, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut g = Tensor::zeros(x.dims());
    for i in 0..x.len() {
        let v = x.data()[i];
        probe.data_mut()[i] = v + STEP;
        let up = f(&probe);
        probe.data_mut()[i] = v - STEP;
        let down = f(&probe);
        probe.data_mut()[i] = v;
        g.data_mut()[i] = (up - down) / (2.0 * STEP);
    }
    g
}

/// Compare `analytic` with the central-difference gradient of `f` at `x`.
/// Returns the worst relative error, or the worst component when it exceeds
/// `tol`.
pub fn check_gradient(
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    f: impl FnMut(&Tensor<f64>) -> f64,
    tol: f64,
) -> Result<f64, GradMismatch> {
    assert_eq!(x.dims(), analytic.dims(), "gradient shape");
    let numeric = numeric_gradient(x, f);
    let worst = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .enumerate()
        .map(|(index, (&a, &n))| GradMismatch {
            index,
            analytic: a,
            numeric: n,
            error: relative_error(a, n),
        })
        .max_by(|a, b| a.error.total_cmp(&b.error));
    match worst {
        Some(w) if w.error >= tol => Err(w),
        Some(w) => Ok(w.error),
        None => Ok(0.0),
    }
}
