//! Discrete vector fields `u: Ω → ℝ^N` on a [`Grid`], their cell Jacobians,
//! and assembly of `R(u) = ∫_Ω F(x, u, T(∇u)) dx` with its exact discrete
//! gradient.
//!
//! Jacobians are the bilinear (Q1) element gradient evaluated at the cell
//! center: the average of the forward differences along the two cell edges
//! in each direction. This is exact for affine fields. Integrals use the
//! one-point midpoint rule on every active cell.

use rand::Rng;

use crate::bregman::PolySubgradient;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::integrands::Integrand;
use crate::minors::{Mat, MAX_DIM, MAX_TAU};
use crate::parallel::{pairwise_sum, Execution};

/// Nodal values of a field with `ncomp` components, node-major.
///
/// Also used for covectors over nodes (energy gradients), which share the
/// same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixField {
    grid: Grid,
    ncomp: usize,
    values: Vec<f64>,
}

impl MatrixField {
    pub fn zeros(grid: &Grid, ncomp: usize) -> Result<Self> {
        if !(1..=MAX_DIM).contains(&ncomp) {
            return Err(Error::domain(format!(
                "field components must lie in 1..=3, got {ncomp}"
            )));
        }
        Ok(MatrixField {
            grid: grid.clone(),
            ncomp,
            values: vec![0.0; grid.node_count() * ncomp],
        })
    }

    pub fn from_values(grid: &Grid, ncomp: usize, values: Vec<f64>) -> Result<Self> {
        let mut f = MatrixField::zeros(grid, ncomp)?;
        if values.len() != f.values.len() {
            return Err(Error::mismatch(format!(
                "{} values for {} nodes with {ncomp} components",
                values.len(),
                grid.node_count()
            )));
        }
        f.values = values;
        Ok(f)
    }

    /// Samples `f(position, out)` at every node.
    pub fn from_fn(grid: &Grid, ncomp: usize, f: impl Fn([f64; 2], &mut [f64])) -> Result<Self> {
        let mut field = MatrixField::zeros(grid, ncomp)?;
        for k in 0..grid.node_count() {
            let (i, j) = grid.node_coords(k);
            f(grid.node_position(i, j), &mut field.values[k * ncomp..(k + 1) * ncomp]);
        }
        Ok(field)
    }

    /// `u(x) = x`.
    pub fn identity(grid: &Grid) -> Self {
        MatrixField::from_fn(grid, 2, |p, out| out.copy_from_slice(&p)).expect("two components")
    }

    /// `u(x) = A x + b`.
    pub fn affine(grid: &Grid, a: &Mat, b: &[f64]) -> Result<Self> {
        if a.cols() != 2 || a.rows() != b.len() {
            return Err(Error::mismatch(format!(
                "affine map {}x{} with offset of length {} on a 2D grid",
                a.rows(),
                a.cols(),
                b.len()
            )));
        }
        MatrixField::from_fn(grid, a.rows(), |p, out| {
            for (r, o) in out.iter_mut().enumerate() {
                *o = a.get(r, 0) * p[0] + a.get(r, 1) * p[1] + b[r];
            }
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn ncomp(&self) -> usize {
        self.ncomp
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn node_value(&self, k: usize) -> &[f64] {
        &self.values[k * self.ncomp..(k + 1) * self.ncomp]
    }

    /// `self + factor * other`.
    pub fn add_scaled(&self, other: &MatrixField, factor: f64) -> Result<MatrixField> {
        self.check_compatible(other)?;
        let mut out = self.clone();
        for (a, b) in out.values.iter_mut().zip(&other.values) {
            *a += factor * b;
        }
        Ok(out)
    }

    /// Euclidean inner product of the nodal vectors.
    pub fn dot(&self, other: &MatrixField) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub(crate) fn check_compatible(&self, other: &MatrixField) -> Result<()> {
        self.grid.check_same(&other.grid, "field")?;
        if self.ncomp != other.ncomp {
            return Err(Error::mismatch(format!(
                "fields have {} and {} components",
                self.ncomp, other.ncomp
            )));
        }
        Ok(())
    }

    /// Cell Jacobian `∇u` on cell `c`, an `N × 2` matrix.
    #[inline]
    pub fn cell_jacobian(&self, c: usize) -> Mat {
        let [k0, k1, k2, k3] = self.grid.cell_nodes(c);
        let h = self.grid.spacing();
        let (sx, sy) = (0.5 / h[0], 0.5 / h[1]);
        let n = self.ncomp;
        let mut j = Mat::zeros(n, 2);
        for r in 0..n {
            let (u0, u1, u2, u3) = (
                self.values[k0 * n + r],
                self.values[k1 * n + r],
                self.values[k2 * n + r],
                self.values[k3 * n + r],
            );
            j.set(r, 0, ((u1 - u0) + (u3 - u2)) * sx);
            j.set(r, 1, ((u2 - u0) + (u3 - u1)) * sy);
        }
        j
    }

    /// Value at the center of cell `c` (mean of its corners), written into `out`.
    #[inline]
    pub fn cell_value(&self, c: usize, out: &mut [f64]) {
        let nodes = self.grid.cell_nodes(c);
        let n = self.ncomp;
        for (r, o) in out.iter_mut().enumerate().take(n) {
            *o = 0.25 * nodes.iter().map(|&k| self.values[k * n + r]).sum::<f64>();
        }
    }

    /// Discrete `‖u‖_{W^{1,p}}` over active cells (midpoint rule).
    pub fn sobolev_norm(&self, p: f64) -> f64 {
        let area = self.grid.cell_area();
        let mut u = [0.0; MAX_DIM];
        let terms: Vec<f64> = self
            .grid
            .active_cells()
            .map(|c| {
                self.cell_value(c, &mut u);
                let uu: f64 = u[..self.ncomp].iter().map(|v| v * v).sum();
                area * (uu.powf(0.5 * p) + self.cell_jacobian(c).frobenius_norm().powf(p))
            })
            .collect();
        pairwise_sum(&terms).powf(1.0 / p)
    }
}

/// Per-cell Jacobians of `u` (inactive cells included).
pub fn discrete_jacobian(u: &MatrixField) -> Vec<Mat> {
    (0..u.grid.cell_count()).map(|c| u.cell_jacobian(c)).collect()
}

/// `R(u)` and the densities it was summed from.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyValue {
    /// `Σ_cells |cell|·F(x_c, u_c, T(J_c))`; `+∞` if any active density is.
    pub value: f64,
    /// Density per cell, 0 on inactive cells.
    pub densities: Vec<f64>,
}

impl EnergyValue {
    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
    }
}

fn check_layout(u: &MatrixField, f: &dyn Integrand) -> Result<()> {
    let l = f.layout();
    if l.rows() != u.ncomp || l.cols() != 2 {
        return Err(Error::mismatch(format!(
            "integrand {} expects {}x{} Jacobians, field has {} components on a 2D grid",
            f.name(),
            l.rows(),
            l.cols(),
            u.ncomp
        )));
    }
    Ok(())
}

#[inline]
fn cell_density(u: &MatrixField, f: &dyn Integrand, c: usize) -> f64 {
    let x = u.grid.cell_center(c);
    let mut uc = [0.0; MAX_DIM];
    u.cell_value(c, &mut uc);
    let t = f.layout().minors_unchecked(&u.cell_jacobian(c));
    f.density(&x, &uc[..u.ncomp], t.as_slice())
}

/// `R(u)` by midpoint quadrature over active cells.
pub fn energy(u: &MatrixField, f: &dyn Integrand) -> Result<EnergyValue> {
    energy_with(u, f, Execution::default())
}

pub fn energy_with(u: &MatrixField, f: &dyn Integrand, exec: Execution) -> Result<EnergyValue> {
    check_layout(u, f)?;
    let grid = &u.grid;
    let area = grid.cell_area();
    let densities = exec.map(grid.cell_count(), |c| {
        if grid.is_active(c) {
            cell_density(u, f, c)
        } else {
            0.0
        }
    });
    let value = if densities.iter().any(|d| d.is_infinite()) {
        f64::INFINITY
    } else {
        let weighted: Vec<f64> = densities.iter().map(|d| area * d).collect();
        pairwise_sum(&weighted)
    };
    Ok(EnergyValue { value, densities })
}

/// Per-cell gradient contributions to the four corner nodes.
type CellContribution = [[f64; MAX_DIM]; 4];

fn cell_gradient(
    u: &MatrixField,
    f: &dyn Integrand,
    c: usize,
) -> std::result::Result<(f64, CellContribution), Error> {
    let grid = &u.grid;
    let n = u.ncomp;
    let layout = f.layout();
    let x = grid.cell_center(c);
    let mut uc = [0.0; MAX_DIM];
    u.cell_value(c, &mut uc);
    let jac = u.cell_jacobian(c);
    let t = layout.minors_unchecked(&jac);
    let density = f.density(&x, &uc[..n], t.as_slice());
    if !density.is_finite() {
        return Err(Error::InfiniteEnergy);
    }
    let mut g_u = [0.0; MAX_DIM];
    let mut g_xi = [0.0; MAX_TAU];
    f.gradient(&x, &uc[..n], t.as_slice(), &mut g_u[..n], &mut g_xi[..layout.tau()]);
    if g_u[..n].iter().chain(&g_xi[..layout.tau()]).any(|v| !v.is_finite()) {
        return Err(Error::Integrability { cell: c });
    }
    let g_a = layout.pullback(&jac, &g_xi[..layout.tau()]);

    let area = grid.cell_area();
    let h = grid.spacing();
    let (sx, sy) = (0.5 * area / h[0], 0.5 * area / h[1]);
    let mut out = [[0.0; MAX_DIM]; 4];
    // Stencil signs for (∂/∂x, ∂/∂y) at the corners (i,j), (i+1,j), (i,j+1), (i+1,j+1).
    const SIGNS: [(f64, f64); 4] = [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)];
    for (corner, (ex, ey)) in SIGNS.iter().enumerate() {
        for r in 0..n {
            out[corner][r] =
                ex * sx * g_a.get(r, 0) + ey * sy * g_a.get(r, 1) + 0.25 * area * g_u[r];
        }
    }
    Ok((area * density, out))
}

/// `R(u)` together with its gradient with respect to the nodal values.
pub fn energy_and_gradient(
    u: &MatrixField,
    f: &dyn Integrand,
    exec: Execution,
) -> Result<(f64, MatrixField)> {
    check_layout(u, f)?;
    let grid = &u.grid;
    let n = u.ncomp;
    let cells: Vec<usize> = grid.active_cells().collect();
    let parts = exec.map(cells.len(), |k| cell_gradient(u, f, cells[k]));
    // Same summation tree as `energy_with`, so both report identical values.
    let mut weighted = vec![0.0; grid.cell_count()];
    let mut grad = MatrixField::zeros(grid, n)?;
    for (&c, part) in cells.iter().zip(parts) {
        let (e, contrib) = part?;
        weighted[c] = e;
        for (&k, local) in grid.cell_nodes(c).iter().zip(&contrib) {
            for (g, v) in grad.values[k * n..(k + 1) * n].iter_mut().zip(local) {
                *g += v;
            }
        }
    }
    Ok((pairwise_sum(&weighted), grad))
}

/// `∂R/∂u` at every node. Fails with [`Error::InfiniteEnergy`] if `R(u) = +∞`.
pub fn energy_gradient(u: &MatrixField, f: &dyn Integrand) -> Result<MatrixField> {
    energy_and_gradient(u, f, Execution::default()).map(|(_, g)| g)
}

/// `w(u) = ⟨u*₀, u⟩ + ⟨u*₁, ∇u⟩ + ⟨v*, T₂(∇u)⟩` by midpoint quadrature.
///
/// `u*₀` is stored on nodes and evaluated at cell centers as the mean of the
/// four corners; `u*₁` and `v*` are cellwise.
pub fn pairing(w: &PolySubgradient, u: &MatrixField) -> Result<f64> {
    pairing_with(w, u, Execution::default())
}

pub fn pairing_with(w: &PolySubgradient, u: &MatrixField, exec: Execution) -> Result<f64> {
    let layout = w.layout();
    u.grid.check_same(w.base_point().grid(), "pairing")?;
    if layout.rows() != u.ncomp || layout.cols() != 2 {
        return Err(Error::mismatch(format!(
            "subgradient acts on {}x{} Jacobians, field has {} components",
            layout.rows(),
            layout.cols(),
            u.ncomp
        )));
    }
    let grid = &u.grid;
    let n = u.ncomp;
    let nn = 2 * n;
    let tau2 = layout.tau2();
    let area = grid.cell_area();
    let cells: Vec<usize> = grid.active_cells().collect();
    let terms = exec.map(cells.len(), |k| {
        let c = cells[k];
        let nodes = grid.cell_nodes(c);
        let mut uc = [0.0; MAX_DIM];
        u.cell_value(c, &mut uc);
        let mut acc = 0.0;
        for (r, ucr) in uc.iter().enumerate().take(n) {
            let u0c = 0.25 * nodes.iter().map(|&m| w.u0()[m * n + r]).sum::<f64>();
            acc += u0c * ucr;
        }
        let jac = u.cell_jacobian(c);
        let u1 = &w.u1()[c * nn..(c + 1) * nn];
        acc += u1.iter().zip(jac.as_slice()).map(|(a, b)| a * b).sum::<f64>();
        if tau2 > 0 {
            let t = layout.minors_unchecked(&jac);
            let v2 = &w.v2()[c * tau2..(c + 1) * tau2];
            acc += v2.iter().zip(&t.as_slice()[nn..]).map(|(a, b)| a * b).sum::<f64>();
        }
        area * acc
    });
    Ok(pairwise_sum(&terms))
}

/// A random smooth field: a sum of `modes` low-frequency sinusoids per
/// component with amplitudes uniform in `[−amplitude, amplitude]`.
pub fn random_smooth_field<R: Rng>(
    grid: &Grid,
    ncomp: usize,
    modes: usize,
    amplitude: f64,
    rng: &mut R,
) -> Result<MatrixField> {
    let lo = grid.lower();
    let hi = grid.upper();
    let coeffs: Vec<[f64; 4]> = (0..ncomp * modes)
        .map(|_| {
            [
                rng.random_range(-amplitude..=amplitude),
                rng.random_range(0.0..2.0),
                rng.random_range(0.0..2.0),
                rng.random_range(0.0..std::f64::consts::TAU),
            ]
        })
        .collect();
    MatrixField::from_fn(grid, ncomp, |p, out| {
        let s = [(p[0] - lo[0]) / (hi[0] - lo[0]), (p[1] - lo[1]) / (hi[1] - lo[1])];
        for (r, o) in out.iter_mut().enumerate() {
            *o = coeffs[r * modes..(r + 1) * modes]
                .iter()
                .map(|[a, fx, fy, ph]| {
                    a * (std::f64::consts::PI * (fx * s[0] + fy * s[1]) + ph).sin()
                })
                .sum();
        }
    })
}
