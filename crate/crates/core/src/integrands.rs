//! Energy densities `F(x, u, ξ)` that are convex in the minors variable `ξ`,
//! so that `f(A) = F(x, u, T(A))` is polyconvex.
//!
//! Three densities are built in, all for 2D deformations unless noted:
//!
//! * [`RotationEnergy`]: `F(A, d) = tr[(AᵀA)^{p/2}] + p·e^{1−d}`, minimal exactly on `SO(2)`;
//! * [`PqEnergy`]: `F(A, d) = |A|^p/p + |d|^q/q` for square `n × n`, `n ∈ {2, 3}`;
//! * [`DetSquared`]: `F(d) = d²`.
//!
//! The module also carries the sampling certificates used to check the
//! structural hypotheses on a density: convexity in `ξ` and the growth bound
//! `F(T(A)) ≥ c|A|^p`.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::minors::{Mat, MinorsLayout};
use crate::parallel::Execution;

/// Gap above which a sampled convexity inequality counts as violated.
pub const CONVEXITY_TOL: f64 = 1e-10;

/// A density `F: Ω × ℝ^N × ℝ^τ → [0, +∞]`.
///
/// `xi` is a free point of `ℝ^τ` laid out as in [`MinorsLayout`]; it need not
/// be the minors vector of any matrix. `gradient` is only called where
/// `density` is finite and must overwrite both output buffers.
pub trait Integrand: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;

    fn layout(&self) -> &MinorsLayout;

    /// Named scalar parameters, for reports.
    fn parameters(&self) -> Vec<(&'static str, f64)> {
        Vec::new()
    }

    /// Growth exponent `p` of the coercivity bound, if the density has one.
    fn exponent(&self) -> Option<f64> {
        None
    }

    fn density(&self, x: &[f64], u: &[f64], xi: &[f64]) -> f64;

    fn gradient(&self, x: &[f64], u: &[f64], xi: &[f64], g_u: &mut [f64], g_xi: &mut [f64]);

    /// `f(A) = F(0, 0, T(A))`.
    fn value_at_matrix(&self, a: &Mat) -> Result<f64> {
        let layout = self.layout();
        let t = layout.minors(a)?;
        let x = [0.0; 3];
        let u = [0.0; 3];
        Ok(self.density(&x[..layout.cols()], &u[..layout.rows()], t.as_slice()))
    }
}

/// Looks up a built-in density by name: `rotation`, `pq` or `detsq`.
///
/// `p` and `q` are ignored by densities that do not use them. The `pq`
/// density is built for 2×2 matrices.
pub fn builtin(name: &str, p: f64, q: f64) -> Result<Arc<dyn Integrand>> {
    match name {
        "rotation" | "rotation_energy" => Ok(Arc::new(RotationEnergy::new(p)?)),
        "pq" | "pq_energy" => Ok(Arc::new(PqEnergy::new(2, p, q)?)),
        "detsq" | "detsq_energy" => Ok(Arc::new(DetSquared::new())),
        other => Err(Error::Config(format!(
            "unknown integrand {other:?}, expected rotation, pq or detsq"
        ))),
    }
}

/// Closed-form SVD of a 2×2 matrix, `A = U diag(s1, s2) Vᵀ` with `U`, `V`
/// rotations, `s1 ≥ |s2|` and `sign(s2) = sign(det A)`.
#[derive(Debug, Clone, Copy)]
pub struct Svd2 {
    pub u: Mat,
    pub s1: f64,
    pub s2: f64,
    pub v_t: Mat,
}

impl Svd2 {
    pub fn new(a: &Mat) -> Self {
        assert_eq!((a.rows(), a.cols()), (2, 2), "Svd2 needs a 2x2 matrix");
        let (m00, m01, m10, m11) = (a.get(0, 0), a.get(0, 1), a.get(1, 0), a.get(1, 1));
        let e = 0.5 * (m00 + m11);
        let f = 0.5 * (m00 - m11);
        let g = 0.5 * (m10 + m01);
        let h = 0.5 * (m10 - m01);
        let q = e.hypot(h);
        let r = f.hypot(g);
        let a1 = g.atan2(f);
        let a2 = h.atan2(e);
        let theta = 0.5 * (a2 - a1);
        let phi = 0.5 * (a2 + a1);
        Svd2 {
            u: Mat::rotation(phi),
            s1: q + r,
            s2: q - r,
            v_t: Mat::rotation(theta),
        }
    }

    /// Singular values `λ₁ ≥ λ₂ ≥ 0`.
    pub fn singular_values(&self) -> (f64, f64) {
        (self.s1, self.s2.abs())
    }

    /// `U diag(d1, d2) Vᵀ`.
    pub fn compose(&self, d1: f64, d2: f64) -> Mat {
        self.u.matmul(&Mat::diag2(d1, d2)).matmul(&self.v_t)
    }
}

/// Signed singular values `μ₁ = sgn(det A)·λ₁`, `μ₂ = λ₂` of a 2×2 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignedSingularValues {
    pub mu1: f64,
    pub mu2: f64,
}

pub fn signed_svd(a: &Mat) -> SignedSingularValues {
    let svd = Svd2::new(a);
    let (l1, l2) = svd.singular_values();
    // sgn(0) is taken as +1; then mu2 = 0 and mu1·mu2 = det = 0 still holds.
    let mu1 = if svd.s2 < 0.0 { -l1 } else { l1 };
    SignedSingularValues { mu1, mu2: l2 }
}

/// `tr[(AᵀA)^{p/2}] + p·e^{1−det A}` on `ℝ^{2×2}`, written in the minors
/// variable as `F(A, d) = λ₁(A)^p + λ₂(A)^p + p·e^{1−d}`.
///
/// Invariant under `A ↦ Q₁AQ₂` for rotations `Q₁`, `Q₂`, and minimal with
/// value `2 + p` exactly on `SO(2)`.
#[derive(Debug, Clone)]
pub struct RotationEnergy {
    p: f64,
    layout: MinorsLayout,
}

impl RotationEnergy {
    pub fn new(p: f64) -> Result<Self> {
        if !(p > 2.0) || !p.is_finite() {
            return Err(Error::domain(format!(
                "rotation energy needs a finite exponent p > 2, got {p}"
            )));
        }
        Ok(RotationEnergy {
            p,
            layout: MinorsLayout::new(2, 2)?,
        })
    }

    pub fn p(&self) -> f64 {
        self.p
    }
}

impl Integrand for RotationEnergy {
    fn name(&self) -> &str {
        "rotation"
    }

    fn layout(&self) -> &MinorsLayout {
        &self.layout
    }

    fn parameters(&self) -> Vec<(&'static str, f64)> {
        vec![("p", self.p)]
    }

    fn exponent(&self) -> Option<f64> {
        Some(self.p)
    }

    fn density(&self, _x: &[f64], _u: &[f64], xi: &[f64]) -> f64 {
        let svd = Svd2::new(&Mat::from_row_slice(2, 2, &xi[..4]));
        let (l1, l2) = svd.singular_values();
        l1.powf(self.p) + l2.powf(self.p) + self.p * (1.0 - xi[4]).exp()
    }

    fn gradient(&self, _x: &[f64], _u: &[f64], xi: &[f64], g_u: &mut [f64], g_xi: &mut [f64]) {
        g_u.fill(0.0);
        let svd = Svd2::new(&Mat::from_row_slice(2, 2, &xi[..4]));
        let p = self.p;
        // p > 2, so σ ↦ |σ|^p is C¹ with derivative p·sgn(σ)|σ|^{p−1}, zero at 0.
        let d1 = p * svd.s1.powf(p - 1.0);
        let d2 = p * svd.s2.signum() * svd.s2.abs().powf(p - 1.0);
        let ga = svd.compose(d1, d2);
        g_xi[..4].copy_from_slice(ga.as_slice());
        g_xi[4] = -p * (1.0 - xi[4]).exp();
    }
}

/// `|A|^p/p + |det A|^q/q` for square matrices, `|·|` the Frobenius norm.
#[derive(Debug, Clone)]
pub struct PqEnergy {
    p: f64,
    q: f64,
    layout: MinorsLayout,
}

impl PqEnergy {
    /// Requires `n ∈ {2, 3}`, `p > n` and `q > 1`.
    pub fn new(n: usize, p: f64, q: f64) -> Result<Self> {
        if !(n == 2 || n == 3) {
            return Err(Error::domain(format!("pq energy needs n in {{2, 3}}, got {n}")));
        }
        if !(p > n as f64) || !p.is_finite() {
            return Err(Error::domain(format!("pq energy needs p > n = {n}, got {p}")));
        }
        if !(q > 1.0) || !q.is_finite() {
            return Err(Error::domain(format!("pq energy needs q > 1, got {q}")));
        }
        Ok(PqEnergy {
            p,
            q,
            layout: MinorsLayout::new(n, n)?,
        })
    }
}

impl Integrand for PqEnergy {
    fn name(&self) -> &str {
        "pq"
    }

    fn layout(&self) -> &MinorsLayout {
        &self.layout
    }

    fn parameters(&self) -> Vec<(&'static str, f64)> {
        vec![("p", self.p), ("q", self.q)]
    }

    fn exponent(&self) -> Option<f64> {
        Some(self.p)
    }

    fn density(&self, _x: &[f64], _u: &[f64], xi: &[f64]) -> f64 {
        let nn = self.layout.rows() * self.layout.cols();
        let norm_sq: f64 = xi[..nn].iter().map(|v| v * v).sum();
        let d = xi[self.layout.tau() - 1];
        norm_sq.powf(0.5 * self.p) / self.p + d.abs().powf(self.q) / self.q
    }

    fn gradient(&self, _x: &[f64], _u: &[f64], xi: &[f64], g_u: &mut [f64], g_xi: &mut [f64]) {
        g_u.fill(0.0);
        g_xi.fill(0.0);
        let nn = self.layout.rows() * self.layout.cols();
        let norm_sq: f64 = xi[..nn].iter().map(|v| v * v).sum();
        let scale = norm_sq.powf(0.5 * (self.p - 2.0));
        for (g, v) in g_xi[..nn].iter_mut().zip(&xi[..nn]) {
            *g = scale * v;
        }
        let d = xi[self.layout.tau() - 1];
        g_xi[self.layout.tau() - 1] = d.signum() * d.abs().powf(self.q - 1.0);
    }
}

/// `F(d) = d²` on the determinant slot of 2×2 matrices.
#[derive(Debug, Clone)]
pub struct DetSquared {
    layout: MinorsLayout,
}

impl DetSquared {
    pub fn new() -> Self {
        DetSquared {
            layout: MinorsLayout::new(2, 2).expect("2x2 layout"),
        }
    }
}

impl Default for DetSquared {
    fn default() -> Self {
        Self::new()
    }
}

impl Integrand for DetSquared {
    fn name(&self) -> &str {
        "detsq"
    }

    fn layout(&self) -> &MinorsLayout {
        &self.layout
    }

    fn exponent(&self) -> Option<f64> {
        Some(4.0)
    }

    fn density(&self, _x: &[f64], _u: &[f64], xi: &[f64]) -> f64 {
        xi[4] * xi[4]
    }

    fn gradient(&self, _x: &[f64], _u: &[f64], xi: &[f64], g_u: &mut [f64], g_xi: &mut [f64]) {
        g_u.fill(0.0);
        g_xi.fill(0.0);
        g_xi[4] = 2.0 * xi[4];
    }
}

/// Outcome of [`check_convexity`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ConvexityReport {
    pub samples: usize,
    /// Samples outside the effective domain, skipped.
    pub skipped: usize,
    pub violations: usize,
    /// Largest `F(tξ₁ + (1−t)ξ₂) − tF(ξ₁) − (1−t)F(ξ₂)` seen; `-inf` if nothing was tested.
    pub worst_gap: f64,
}

/// Samples the convexity inequality of `ξ ↦ F(x, u, ξ)`.
///
/// `x` is drawn from `[0, 1]^n`, `u` and both `ξ` points have entries uniform
/// in `[−3, 3]`, `t` is uniform in `(0, 1)`. `ξ` is sampled freely in `ℝ^τ`,
/// without requiring it to be a minors vector.
pub fn check_convexity(f: &dyn Integrand, samples: usize, seed: u64) -> ConvexityReport {
    let layout = f.layout();
    let (n, big_n, tau) = (layout.cols(), layout.rows(), layout.tau());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = n + big_n + 2 * tau + 1;
    let draws: Vec<f64> = (0..samples * width)
        .map(|_| rng.random::<f64>())
        .collect();

    let gaps = Execution::default().map(samples, |k| {
        let d = &draws[k * width..(k + 1) * width];
        let x = &d[..n];
        let u: Vec<f64> = d[n..n + big_n].iter().map(|v| 6.0 * v - 3.0).collect();
        let xi1: Vec<f64> = d[n + big_n..n + big_n + tau]
            .iter()
            .map(|v| 6.0 * v - 3.0)
            .collect();
        let xi2: Vec<f64> = d[n + big_n + tau..n + big_n + 2 * tau]
            .iter()
            .map(|v| 6.0 * v - 3.0)
            .collect();
        // Map [0, 1) to (0, 1).
        let t = (d[width - 1] + f64::EPSILON).min(1.0 - f64::EPSILON);
        let mid: Vec<f64> = xi1
            .iter()
            .zip(&xi2)
            .map(|(a, b)| t * a + (1.0 - t) * b)
            .collect();
        let f1 = f.density(x, &u, &xi1);
        let f2 = f.density(x, &u, &xi2);
        if !f1.is_finite() || !f2.is_finite() {
            return None;
        }
        Some(f.density(x, &u, &mid) - (t * f1 + (1.0 - t) * f2))
    });

    let mut report = ConvexityReport {
        samples,
        skipped: 0,
        violations: 0,
        worst_gap: f64::NEG_INFINITY,
    };
    for gap in gaps {
        match gap {
            None => report.skipped += 1,
            Some(g) => {
                if !(g <= CONVEXITY_TOL) {
                    report.violations += 1;
                }
                report.worst_gap = report.worst_gap.max(g);
            }
        }
    }
    report
}

/// Outcome of [`check_coercivity`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct CoercivityReport {
    pub samples: usize,
    /// Smallest observed ratio `F(T(A)) / |A|^p` over nonzero samples.
    pub c_estimate: f64,
    /// The constant the bound was tested against.
    pub c: f64,
    /// Samples with `F(T(A)) < c|A|^p`.
    pub violations_at_c: usize,
}

/// Samples the growth bound `F(x, u, T(A)) ≥ c|A|^p`.
///
/// Matrices are `s·B` with `B` uniform in `[−1, 1]^{N×n}` and a log-uniform
/// scale `s ∈ [10⁻², 10²]`, so both the small- and large-`|A|` regimes are
/// probed. The zero matrix is always included as the first sample.
pub fn check_coercivity(
    f: &dyn Integrand,
    p: f64,
    c: f64,
    samples: usize,
    seed: u64,
) -> CoercivityReport {
    let layout = f.layout();
    let (rows, cols) = (layout.rows(), layout.cols());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mats: Vec<Mat> = (0..samples)
        .map(|k| {
            if k == 0 {
                return Mat::zeros(rows, cols);
            }
            let scale = 10f64.powf(rng.random_range(-2.0..2.0));
            let mut a = Mat::zeros(rows, cols);
            for v in a.as_mut_slice() {
                *v = scale * rng.random_range(-1.0..1.0);
            }
            a
        })
        .collect();

    let results = Execution::default().map(mats.len(), |k| {
        let a = &mats[k];
        let value = f.value_at_matrix(a).expect("layout-shaped matrix");
        let bound = a.frobenius_norm().powf(p);
        (value, bound)
    });

    let mut report = CoercivityReport {
        samples,
        c_estimate: f64::INFINITY,
        c,
        violations_at_c: 0,
    };
    for (value, bound) in results {
        if value < c * bound {
            report.violations_at_c += 1;
        }
        if bound > 0.0 {
            report.c_estimate = report.c_estimate.min(value / bound);
        }
    }
    report
}
