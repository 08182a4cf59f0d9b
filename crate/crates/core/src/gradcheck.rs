//! Central finite-difference checks of energy gradients.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::field::{energy_and_gradient, energy_with, random_smooth_field, MatrixField};
use crate::grid::Grid;
use crate::integrands::{DetSquared, Integrand, PqEnergy, RotationEnergy};
use crate::parallel::Execution;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientCheck {
    pub name: String,
    /// `‖g − g_fd‖_∞ / ‖g‖_∞`.
    pub relative_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

/// Central differences of `R` in every nodal coordinate.
pub fn fd_energy_gradient(u: &MatrixField, f: &dyn Integrand, h: f64) -> Result<Vec<f64>> {
    let n = u.values().len();
    let parts = Execution::default().map(n, |k| -> Result<f64> {
        let mut v = u.clone();
        let x = v.values()[k];
        v.values_mut()[k] = x + h;
        let plus = energy_with(&v, f, Execution::Sequential)?.value;
        v.values_mut()[k] = x - h;
        let minus = energy_with(&v, f, Execution::Sequential)?.value;
        Ok((plus - minus) / (2.0 * h))
    });
    parts.into_iter().collect()
}

pub fn check_energy_gradient(
    name: impl Into<String>,
    f: &dyn Integrand,
    u: &MatrixField,
    h: f64,
    tol: f64,
) -> Result<GradientCheck> {
    let (_, g) = energy_and_gradient(u, f, Execution::default())?;
    let fd = fd_energy_gradient(u, f, h)?;
    let scale = g.max_abs().max(f64::MIN_POSITIVE);
    let max_abs_error = g
        .values()
        .iter()
        .zip(&fd)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let relative_error = max_abs_error / scale;
    Ok(GradientCheck {
        name: name.into(),
        relative_error,
        max_abs_error,
        passed: relative_error < tol,
    })
}

/// The built-in integrands with the parameters used by the suite.
pub fn suite_integrands() -> Result<Vec<Arc<dyn Integrand>>> {
    Ok(vec![
        Arc::new(RotationEnergy::new(4.0)?),
        Arc::new(PqEnergy::new(2, 4.0, 2.0)?),
        Arc::new(DetSquared::new()),
    ])
}

/// Checks every integrand on `fields` random smooth perturbations of the
/// identity on an `n × n` grid over the unit square.
pub fn run_suite(
    integrands: &[Arc<dyn Integrand>],
    fields: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<GradientCheck>> {
    let grid = Grid::unit_square(n)?;
    let id = MatrixField::identity(&grid);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for t in 0..fields {
        let u = id.add_scaled(&random_smooth_field(&grid, 2, 4, 0.15, &mut rng)?, 1.0)?;
        for f in integrands {
            let name = format!("{} field {t}", f.name());
            out.push(check_energy_gradient(name, f.as_ref(), &u, FD_STEP, FD_TOL)?);
        }
    }
    Ok(out)
}
