//! Generalized subgradients `w(u) = ⟨u*, u⟩ + ⟨v*, T₂(∇u)⟩` of energies with
//! polyconvex integrands, the associated Bregman distances, sampled
//! certificates of the subgradient inequality, and the source-condition
//! residual that drives convergence rates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{
    energy, energy_with, pairing, pairing_with, random_smooth_field, MatrixField,
};
use crate::integrands::Integrand;
use crate::minors::{MinorsLayout, MAX_DIM, MAX_TAU};
use crate::parallel::Execution;
use crate::registration::{lq_distance, warp, ScalarImage};

/// Tolerance of the sampled subgradient inequality.
pub const CERTIFICATE_TOL: f64 = 1e-8;

/// An element of `W_poly`, the pair `(u*, v*)` acting by
/// `w(u) = ⟨u*₀, u⟩ + ⟨u*₁, ∇u⟩ + ⟨v*, T₂(∇u)⟩`, together with the point it
/// was built at.
///
/// `u0` holds `N` values per node; `u1` holds `N·n` values per cell
/// (row-major); `v2` holds `τ₂` values per cell in minors-layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct PolySubgradient {
    layout: MinorsLayout,
    u0: Vec<f64>,
    u1: Vec<f64>,
    v2: Vec<f64>,
    base_point: MatrixField,
    base_energy: f64,
}

impl PolySubgradient {
    pub fn from_parts(
        layout: MinorsLayout,
        u0: Vec<f64>,
        u1: Vec<f64>,
        v2: Vec<f64>,
        base_point: MatrixField,
        base_energy: f64,
    ) -> Result<Self> {
        let grid = base_point.grid();
        if layout.cols() != 2 || layout.rows() != base_point.ncomp() {
            return Err(Error::mismatch(format!(
                "layout {}x{} does not fit a {}-component field on a 2D grid",
                layout.rows(),
                layout.cols(),
                base_point.ncomp()
            )));
        }
        let n = layout.rows();
        let expect = [
            ("u0", u0.len(), grid.node_count() * n),
            ("u1", u1.len(), grid.cell_count() * 2 * n),
            ("v2", v2.len(), grid.cell_count() * layout.tau2()),
        ];
        for (name, got, want) in expect {
            if got != want {
                return Err(Error::mismatch(format!("{name} has {got} entries, expected {want}")));
            }
        }
        Ok(PolySubgradient {
            layout,
            u0,
            u1,
            v2,
            base_point,
            base_energy,
        })
    }

    /// The zero functional at `base_point`, a subgradient wherever `R` attains
    /// its global minimum.
    pub fn zero(layout: MinorsLayout, base_point: MatrixField, base_energy: f64) -> Result<Self> {
        let grid = base_point.grid().clone();
        let n = layout.rows();
        let tau2 = layout.tau2();
        PolySubgradient::from_parts(
            layout,
            vec![0.0; grid.node_count() * n],
            vec![0.0; grid.cell_count() * 2 * n],
            vec![0.0; grid.cell_count() * tau2],
            base_point,
            base_energy,
        )
    }

    pub fn layout(&self) -> &MinorsLayout {
        &self.layout
    }

    pub fn u0(&self) -> &[f64] {
        &self.u0
    }

    pub fn u1(&self) -> &[f64] {
        &self.u1
    }

    pub fn v2(&self) -> &[f64] {
        &self.v2
    }

    pub fn v2_mut(&mut self) -> &mut [f64] {
        &mut self.v2
    }

    pub fn base_point(&self) -> &MatrixField {
        &self.base_point
    }

    pub fn base_energy(&self) -> f64 {
        self.base_energy
    }

    /// True when `v* ≡ 0`, i.e. `w` is a classical element of `U*`.
    pub fn is_classical(&self) -> bool {
        self.v2.iter().all(|&v| v == 0.0)
    }
}

/// Builds `x ↦ ∇_{u,ξ}F(x, ū(x), T(∇ū(x)))` at `ū = u` as an element of
/// `W_poly`.
///
/// On each active cell the `ξ`-gradient splits into its first `N·n` slots
/// (acting on `∇u`, stored in `u1`) and the remaining `τ₂` slots (acting on
/// `T₂(∇u)`, stored in `v2`). The `u`-gradient is averaged from the adjacent
/// active cells onto nodes.
pub fn poly_subgradient(f: &dyn Integrand, u: &MatrixField) -> Result<PolySubgradient> {
    let e = energy(u, f)?;
    if !e.is_finite() {
        return Err(Error::InfiniteEnergy);
    }
    let grid = u.grid();
    let layout = f.layout().clone();
    let n = u.ncomp();
    let nn = 2 * n;
    let tau = layout.tau();
    let tau2 = layout.tau2();
    let cells: Vec<usize> = grid.active_cells().collect();
    let grads = Execution::default().map(cells.len(), |k| {
        let c = cells[k];
        let x = grid.cell_center(c);
        let mut uc = [0.0; MAX_DIM];
        u.cell_value(c, &mut uc);
        let t = layout.minors_unchecked(&u.cell_jacobian(c));
        let mut g_u = [0.0; MAX_DIM];
        let mut g_xi = [0.0; MAX_TAU];
        f.gradient(&x, &uc[..n], t.as_slice(), &mut g_u[..n], &mut g_xi[..tau]);
        (g_u, g_xi)
    });

    let mut u0 = vec![0.0; grid.node_count() * n];
    let mut counts = vec![0usize; grid.node_count()];
    let mut u1 = vec![0.0; grid.cell_count() * nn];
    let mut v2 = vec![0.0; grid.cell_count() * tau2];
    for (&c, (g_u, g_xi)) in cells.iter().zip(&grads) {
        if g_u[..n].iter().chain(&g_xi[..tau]).any(|v| !v.is_finite()) {
            return Err(Error::Integrability { cell: c });
        }
        u1[c * nn..(c + 1) * nn].copy_from_slice(&g_xi[..nn]);
        v2[c * tau2..(c + 1) * tau2].copy_from_slice(&g_xi[nn..tau]);
        for k in grid.cell_nodes(c) {
            counts[k] += 1;
            for r in 0..n {
                u0[k * n + r] += g_u[r];
            }
        }
    }
    for (k, &cnt) in counts.iter().enumerate() {
        if cnt > 0 {
            for r in 0..n {
                u0[k * n + r] /= cnt as f64;
            }
        }
    }
    PolySubgradient::from_parts(layout, u0, u1, v2, u.clone(), e.value)
}

#[inline]
fn distance_from_parts(rv: f64, ru: f64, wv: f64, wu: f64) -> f64 {
    (rv - ru) - (wv - wu)
}

fn finite_energies(f: &dyn Integrand, v: &MatrixField, u: &MatrixField) -> Result<(f64, f64)> {
    let rv = energy(v, f)?.value;
    let ru = energy(u, f)?.value;
    if !rv.is_finite() || !ru.is_finite() {
        return Err(Error::InfiniteEnergy);
    }
    Ok((rv, ru))
}

/// `D_{u*}(v; u) = R(v) − R(u) − ⟨u*, v − u⟩` for a classical subgradient
/// (`v* ≡ 0`). Fails with a contract error otherwise.
pub fn bregman_classical(
    f: &dyn Integrand,
    v: &MatrixField,
    u: &MatrixField,
    w: &PolySubgradient,
) -> Result<f64> {
    if !w.is_classical() {
        return Err(Error::Contract(
            "subgradient has a nonzero T2 part; use bregman_poly".into(),
        ));
    }
    v.check_compatible(u)?;
    let (rv, ru) = finite_energies(f, v, u)?;
    // ⟨u*, v − u⟩ = ⟨u*, v⟩ − ⟨u*, u⟩ by linearity.
    let wv = pairing(w, v)?;
    let wu = pairing(w, u)?;
    Ok(distance_from_parts(rv, ru, wv, wu))
}

/// `D^poly_w(v; u) = R(v) − R(u) − w(v) + w(u)`.
pub fn bregman_poly(
    f: &dyn Integrand,
    v: &MatrixField,
    u: &MatrixField,
    w: &PolySubgradient,
) -> Result<f64> {
    v.check_compatible(u)?;
    let (rv, ru) = finite_energies(f, v, u)?;
    let wv = pairing(w, v)?;
    let wu = pairing(w, u)?;
    Ok(distance_from_parts(rv, ru, wv, wu))
}

/// Sampling protocol for [`verify_subgradient`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertificateProtocol {
    pub trials: usize,
    pub seed: u64,
    /// Probe radius `r`: most probes use `r·10^{−U(0,3)}`, every fourth uses
    /// `r·10^{U(1,2)}`.
    pub radius: f64,
}

impl Default for CertificateProtocol {
    fn default() -> Self {
        CertificateProtocol {
            trials: 1000,
            seed: 0,
            radius: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubgradientReport {
    pub trials: usize,
    pub violations: usize,
    /// Largest `R(u) + w(v) − w(u) − R(v)` observed (`-inf` when nothing was tested).
    pub worst_gap: f64,
}

impl SubgradientReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// The perturbation direction and size of probe `trial`.
fn probe(
    base: &MatrixField,
    protocol: &CertificateProtocol,
    trial: usize,
) -> Result<MatrixField> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(protocol.seed ^ (trial as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let phi = random_smooth_field(base.grid(), base.ncomp(), 3, 1.0, &mut rng)?;
    let scale = if trial % 4 == 3 {
        10f64.powf(rng.random_range(1.0..2.0))
    } else {
        10f64.powf(-rng.random_range(0.0..3.0))
    };
    let norm = phi.max_abs().max(f64::MIN_POSITIVE);
    base.add_scaled(&phi, protocol.radius * scale / norm)
}

/// Tests `R(v) ≥ R(û) + w(v) − w(û)` on random smooth perturbations `v` of
/// the base point `û` of `w`. Probes run in parallel with per-trial seeds.
pub fn verify_subgradient(
    f: &dyn Integrand,
    w: &PolySubgradient,
    protocol: &CertificateProtocol,
) -> Result<SubgradientReport> {
    let base = w.base_point();
    let r_base = energy(base, f)?.value;
    if !r_base.is_finite() {
        return Err(Error::InfiniteEnergy);
    }
    let w_base = pairing(w, base)?;
    let gaps = Execution::default().map(protocol.trials, |t| -> Result<f64> {
        let v = probe(base, protocol, t)?;
        let rv = energy_with(&v, f, Execution::Sequential)?.value;
        if rv == f64::INFINITY {
            return Ok(f64::NEG_INFINITY);
        }
        let wv = pairing_with(w, &v, Execution::Sequential)?;
        Ok(-distance_from_parts(rv, r_base, wv, w_base))
    });
    let mut report = SubgradientReport {
        trials: protocol.trials,
        violations: 0,
        worst_gap: f64::NEG_INFINITY,
    };
    for gap in gaps {
        let gap = gap?;
        if !(gap <= CERTIFICATE_TOL) {
            report.violations += 1;
        }
        report.worst_gap = report.worst_gap.max(gap);
    }
    Ok(report)
}

/// Constants of the source condition
/// `w(u†) − w(u) ≤ β₁ D(u; u†) + β₂ ‖K(u) − v†‖` on `{T_ᾱ(·; v†) ≤ ρ}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceConditionParams {
    pub beta1: f64,
    pub beta2: f64,
    pub rho: f64,
    pub alpha_bar: f64,
}

impl SourceConditionParams {
    pub fn new(beta1: f64, beta2: f64, rho: f64, alpha_bar: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta1) {
            return Err(Error::Config(format!("beta1 must lie in [0, 1), got {beta1}")));
        }
        for (name, v) in [("beta2", beta2), ("rho", rho), ("alpha_bar", alpha_bar)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(SourceConditionParams {
            beta1,
            beta2,
            rho,
            alpha_bar,
        })
    }

    /// Checks `ᾱ R(u†) < ρ`.
    pub fn check_against(&self, r_dagger: f64) -> Result<()> {
        if self.alpha_bar * r_dagger < self.rho {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "alpha_bar * R(u_dagger) = {} is not below rho = {}",
                self.alpha_bar * r_dagger,
                self.rho
            )))
        }
    }
}

/// The forward problem the source condition refers to.
#[derive(Debug, Clone, Copy)]
pub struct ForwardContext<'a> {
    pub reference: &'a ScalarImage,
    pub exact_data: &'a ScalarImage,
    pub q: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SourceConditionValue {
    /// `w(u†) − w(u)`.
    pub lhs: f64,
    /// `β₁ D^poly_w(u; u†) + β₂ ‖K(u) − v†‖`.
    pub rhs: f64,
    /// `lhs − rhs`; the condition holds at `u` iff this is `≤ 0`.
    pub residual: f64,
    /// `T_ᾱ(u; v†) = ‖K(u) − v†‖^q + ᾱ R(u)`.
    pub tikhonov: f64,
    pub in_sublevel_set: bool,
}

/// Evaluates the source condition at `u`. `u` must be admissible.
pub fn source_condition_residual(
    f: &dyn Integrand,
    ctx: ForwardContext<'_>,
    w: &PolySubgradient,
    u_dagger: &MatrixField,
    u: &MatrixField,
    params: &SourceConditionParams,
) -> Result<SourceConditionValue> {
    let lhs = pairing(w, u_dagger)? - pairing(w, u)?;
    let d = bregman_poly(f, u, u_dagger, w)?;
    let misfit = lq_distance(&warp(ctx.reference, u)?, ctx.exact_data, ctx.q)?;
    let rhs = params.beta1 * d + params.beta2 * misfit;
    let tikhonov = misfit.powf(ctx.q) + params.alpha_bar * energy(u, f)?.value;
    Ok(SourceConditionValue {
        lhs,
        rhs,
        residual: lhs - rhs,
        tikhonov,
        in_sublevel_set: tikhonov <= params.rho,
    })
}
