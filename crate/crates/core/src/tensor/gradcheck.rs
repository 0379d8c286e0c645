//! Finite-difference gradient checking shared by tests and the
//! `gradcheck` CLI subcommand.

use crate::error::Result;

/// Step used for central differences throughout the crate.
pub const GRADCHECK_H: f64 = 1e-5;

/// Relative tolerance for reverse-mode vs central-difference agreement.
pub const GRADCHECK_TOL: f64 = 1e-5;

/// Central-difference gradient of a scalar function at `x`.
pub fn central_difference(
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe)?;
        probe[i] = x[i] - h;
        let fm = f(&probe)?;
        probe[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Worst-case elementwise error |a-b| / max(1, |a|, |b|).
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs() / 1.0_f64.max(a.abs()).max(b.abs()))
        .fold(0.0, f64::max)
}
