//! The registration forward operator `K(u) = I₂ ∘ u`, the `L^q` data term,
//! synthetic test images and exact solutions, and noise injection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::MatrixField;
use crate::grid::{Grid, Region};
use crate::minors::Mat;
use crate::parallel::{pairwise_sum, Execution};

/// Relative tolerance (times the domain diameter) for points of `u(Ω)`
/// lying outside `Ω̄` before [`warp`] reports a domain violation.
pub const OUTSIDE_TOL: f64 = 1e-9;

/// Sample positions closer than this (in index units) to a node are snapped
/// to it, so that nodes are reproduced exactly despite rounding.
const SNAP: f64 = 1e-10;

/// An image sampled at grid nodes and extended by bilinear interpolation.
/// Points outside the bounding box are clamped to it.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarImage {
    grid: Grid,
    samples: Vec<f64>,
}

impl ScalarImage {
    pub fn new(grid: &Grid, samples: Vec<f64>) -> Result<Self> {
        if samples.len() != grid.node_count() {
            return Err(Error::mismatch(format!(
                "{} samples for {} nodes",
                samples.len(),
                grid.node_count()
            )));
        }
        Ok(ScalarImage {
            grid: grid.clone(),
            samples,
        })
    }

    pub fn from_fn(grid: &Grid, f: impl Fn([f64; 2]) -> f64) -> Self {
        let samples = (0..grid.node_count())
            .map(|k| {
                let (i, j) = grid.node_coords(k);
                f(grid.node_position(i, j))
            })
            .collect();
        ScalarImage {
            grid: grid.clone(),
            samples,
        }
    }

    pub fn constant(grid: &Grid, value: f64) -> Self {
        ScalarImage::from_fn(grid, |_| value)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [f64] {
        &mut self.samples
    }

    pub fn range(&self) -> (f64, f64) {
        self.samples
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Locates `t` (in index units) on an axis with `n` nodes: returns the
    /// cell index, the local coordinate in `[0, 1]`, and whether `t` was
    /// inside the axis range.
    #[inline]
    fn locate(t: f64, n: usize) -> (usize, f64, bool) {
        let last = (n - 1) as f64;
        let inside = (0.0..=last).contains(&t);
        let mut t = t.clamp(0.0, last);
        let r = t.round();
        if (t - r).abs() < SNAP {
            t = r;
        }
        let i = (t.floor() as usize).min(n - 2);
        (i, t - i as f64, inside)
    }

    /// Bilinear value at `p` and its gradient. The gradient component along
    /// an axis is 0 where `p` is clamped on that axis.
    #[inline]
    pub fn sample_with_gradient(&self, p: [f64; 2]) -> (f64, [f64; 2]) {
        let g = &self.grid;
        let lo = g.lower();
        let h = g.spacing();
        let (i, fx, in_x) = Self::locate((p[0] - lo[0]) / h[0], g.nx());
        let (j, fy, in_y) = Self::locate((p[1] - lo[1]) / h[1], g.ny());
        let k = g.node_index(i, j);
        let nx = g.nx();
        let (f00, f10, f01, f11) = (
            self.samples[k],
            self.samples[k + 1],
            self.samples[k + nx],
            self.samples[k + nx + 1],
        );
        let value = (1.0 - fy) * ((1.0 - fx) * f00 + fx * f10) + fy * ((1.0 - fx) * f01 + fx * f11);
        let dx = if in_x {
            ((1.0 - fy) * (f10 - f00) + fy * (f11 - f01)) / h[0]
        } else {
            0.0
        };
        let dy = if in_y {
            ((1.0 - fx) * (f01 - f00) + fx * (f11 - f10)) / h[1]
        } else {
            0.0
        };
        (value, [dx, dy])
    }

    pub fn sample(&self, p: [f64; 2]) -> f64 {
        self.sample_with_gradient(p).0
    }
}

/// A Gaussian bump `amplitude · exp(−|x − center|² / (2 sigma²))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: [f64; 2],
    pub sigma: f64,
    pub amplitude: f64,
}

/// Default reference image content: three narrow blobs placed off the
/// origin so that rotations about the origin change the image. Away from the
/// blobs the image is nearly flat.
pub fn default_blobs() -> Vec<Blob> {
    vec![
        Blob {
            center: [0.35, 0.2],
            sigma: 0.12,
            amplitude: 1.0,
        },
        Blob {
            center: [-0.3, 0.35],
            sigma: 0.15,
            amplitude: 0.7,
        },
        Blob {
            center: [-0.1, -0.45],
            sigma: 0.1,
            amplitude: 0.85,
        },
    ]
}

/// `count` blobs with centers in the inner 60% of the box, widths between 8%
/// and 15% of the box diameter, and amplitudes in `[0.5, 1]`.
pub fn random_blobs(grid: &Grid, count: usize, seed: u64) -> Vec<Blob> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = grid.lower();
    let hi = grid.upper();
    let diam = grid.diameter();
    (0..count)
        .map(|_| {
            let cx = lo[0] + (hi[0] - lo[0]) * rng.random_range(0.2..0.8);
            let cy = lo[1] + (hi[1] - lo[1]) * rng.random_range(0.2..0.8);
            Blob {
                center: [cx, cy],
                sigma: diam * rng.random_range(0.08..0.15),
                amplitude: rng.random_range(0.5..1.0),
            }
        })
        .collect()
}

pub fn blob_image(grid: &Grid, blobs: &[Blob]) -> ScalarImage {
    ScalarImage::from_fn(grid, |p| {
        blobs
            .iter()
            .map(|b| {
                let d2 = (p[0] - b.center[0]).powi(2) + (p[1] - b.center[1]).powi(2);
                b.amplitude * (-d2 / (2.0 * b.sigma * b.sigma)).exp()
            })
            .sum()
    })
}

/// `K(u) = I₂ ∘ u` at the nodes of `u`'s grid, rejecting deformations that
/// send a node of `Ω_h` farther than `OUTSIDE_TOL · diam` outside `Ω̄`.
pub fn warp(reference: &ScalarImage, u: &MatrixField) -> Result<ScalarImage> {
    check_deformation(u)?;
    let grid = u.grid();
    let tol = OUTSIDE_TOL * grid.diameter();
    let active = grid.active_nodes();
    let mut worst: Option<(usize, [f64; 2], f64)> = None;
    for (k, _) in active.iter().enumerate().filter(|(_, &a)| a) {
        let p = node_point(u, k);
        let d = reference.grid().distance_outside(p);
        if d > tol && worst.is_none_or(|(_, _, w)| d > w) {
            worst = Some((k, p, d));
        }
    }
    if let Some((node, point, distance)) = worst {
        return Err(Error::DomainViolation {
            node,
            point,
            distance,
        });
    }
    Ok(warp_clamped(reference, u))
}

/// `K(u)` with every sample point first projected onto the admissible set
/// (see [`Grid::project`]). Used for optimization iterates.
pub fn warp_clamped(reference: &ScalarImage, u: &MatrixField) -> ScalarImage {
    let grid = u.grid();
    let samples = (0..grid.node_count())
        .map(|k| {
            let (p, _) = reference.grid().project(node_point(u, k));
            reference.sample(p)
        })
        .collect();
    ScalarImage {
        grid: grid.clone(),
        samples,
    }
}

fn check_deformation(u: &MatrixField) -> Result<()> {
    if u.ncomp() != 2 {
        return Err(Error::mismatch(format!(
            "deformation must have 2 components, got {}",
            u.ncomp()
        )));
    }
    Ok(())
}

#[inline]
fn node_point(u: &MatrixField, k: usize) -> [f64; 2] {
    let v = u.node_value(k);
    [v[0], v[1]]
}

/// `‖Ku − I₁‖^q_{L^q(Ω)}`.
///
/// Uses the lumped (cell-vertex) rule: each active cell contributes a
/// quarter of its area times `|Ku − I₁|^q` at each of its corners. This
/// equals the midpoint rule for constant differences and sees every node.
pub fn data_term(ku: &ScalarImage, i1: &ScalarImage, q: f64) -> Result<f64> {
    if !(q >= 1.0) {
        return Err(Error::domain(format!("data exponent q must be >= 1, got {q}")));
    }
    ku.grid.check_same(&i1.grid, "data term")?;
    let w = ku.grid.node_weights();
    let terms: Vec<f64> = ku
        .samples
        .iter()
        .zip(&i1.samples)
        .zip(&w)
        .map(|((a, b), w)| if *w > 0.0 { w * (a - b).abs().powf(q) } else { 0.0 })
        .collect();
    Ok(pairwise_sum(&terms))
}

/// `‖a − b‖_{L^q(Ω)}`.
pub fn lq_distance(a: &ScalarImage, b: &ScalarImage, q: f64) -> Result<f64> {
    Ok(data_term(a, b, q)?.powf(1.0 / q))
}

/// The exact rotation `u_R(x) = c + R(x − c)` about the disk center `c`.
#[derive(Debug, Clone)]
pub struct RotationField {
    pub field: MatrixField,
    pub rotation: Mat,
    /// Set when `Ω` is not a disk, so `u_R(Ω) ⊂ Ω̄` is not guaranteed.
    pub warning: Option<String>,
}

pub fn rotation_field(theta: f64, grid: &Grid) -> RotationField {
    let rotation = Mat::rotation(theta);
    let (center, warning) = match grid.region() {
        Region::Disk { center, .. } => (*center, None),
        _ => {
            let lo = grid.lower();
            let hi = grid.upper();
            let c = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])];
            let msg = format!(
                "domain is not a disk; rotating about the box center {c:?}, admissibility not guaranteed"
            );
            log::warn!("{msg}");
            (c, Some(msg))
        }
    };
    let field = MatrixField::from_fn(grid, 2, |p, out| {
        let d = [p[0] - center[0], p[1] - center[1]];
        out[0] = center[0] + rotation.get(0, 0) * d[0] + rotation.get(0, 1) * d[1];
        out[1] = center[1] + rotation.get(1, 0) * d[0] + rotation.get(1, 1) * d[1];
    })
    .expect("two components");
    RotationField {
        field,
        rotation,
        warning,
    }
}

/// Noisy data `v^δ` with `‖v^δ − v†‖_{L^q} = δ`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisySample {
    pub image: ScalarImage,
    pub delta: f64,
    pub seed: u64,
}

/// Adds i.i.d. Gaussian noise on the nodes of `Ω_h`, rescaled so that its
/// `L^q` norm (same quadrature as [`data_term`]) is exactly `delta`.
pub fn add_noise(exact: &ScalarImage, delta: f64, q: f64, seed: u64) -> Result<NoisySample> {
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(Error::domain(format!("noise level must be finite and >= 0, got {delta}")));
    }
    if !(q >= 1.0) {
        return Err(Error::domain(format!("noise exponent q must be >= 1, got {q}")));
    }
    if delta == 0.0 {
        return Ok(NoisySample {
            image: exact.clone(),
            delta,
            seed,
        });
    }
    let weights = exact.grid.node_weights();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = weights
        .iter()
        .map(|&w| {
            let z: f64 = rng.sample(StandardNormal);
            if w > 0.0 {
                z
            } else {
                0.0
            }
        })
        .collect();
    let terms: Vec<f64> = noise
        .iter()
        .zip(&weights)
        .map(|(n, w)| w * n.abs().powf(q))
        .collect();
    let norm = pairwise_sum(&terms).powf(1.0 / q);
    if !(norm > 0.0) {
        return Err(Error::domain("no active nodes to carry noise"));
    }
    let scale = delta / norm;
    let samples = exact
        .samples
        .iter()
        .zip(&noise)
        .map(|(v, n)| v + scale * n)
        .collect();
    Ok(NoisySample {
        image: ScalarImage {
            grid: exact.grid.clone(),
            samples,
        },
        delta,
        seed,
    })
}

/// Data misfit `‖K(u) − data‖^q` with clamped sampling, and its gradient
/// with respect to the nodal values of `u`.
pub fn misfit_and_gradient(
    reference: &ScalarImage,
    data: &ScalarImage,
    u: &MatrixField,
    q: f64,
    weights: &[f64],
    exec: Execution,
) -> (f64, Vec<f64>) {
    let grid = u.grid();
    let parts = exec.map(grid.node_count(), |k| {
        let w = weights[k];
        if w == 0.0 {
            return (0.0, [0.0; 2]);
        }
        let (p, jp) = reference.grid().project(node_point(u, k));
        let (value, grad) = reference.sample_with_gradient(p);
        let r = value - data.samples[k];
        let a = r.abs();
        let term = w * a.powf(q);
        let slope = if a == 0.0 {
            0.0
        } else {
            w * q * a.powf(q - 1.0) * r.signum()
        };
        // dI/du = ∇I(P(u))ᵀ DP(u).
        let gx = grad[0] * jp[0] + grad[1] * jp[2];
        let gy = grad[0] * jp[1] + grad[1] * jp[3];
        (term, [slope * gx, slope * gy])
    });
    let terms: Vec<f64> = parts.iter().map(|p| p.0).collect();
    let mut g = vec![0.0; 2 * grid.node_count()];
    for (k, (_, gk)) in parts.iter().enumerate() {
        g[2 * k] = gk[0];
        g[2 * k + 1] = gk[1];
    }
    (pairwise_sum(&terms), g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::MatrixField;
    use approx::assert_relative_eq;

    fn disk_grid(n: usize) -> Grid {
        Grid::new([-1.0, -1.0], [1.0, 1.0], n, n)
            .unwrap()
            .with_disk([0.0, 0.0], 1.0)
            .unwrap()
    }

    #[test]
    fn interpolation_reproduces_nodes_and_stays_in_range() {
        let g = Grid::new([-1.0, -1.0], [1.0, 1.0], 13, 11).unwrap();
        let img = blob_image(&g, &default_blobs());
        for k in 0..g.node_count() {
            let (i, j) = g.node_coords(k);
            assert_eq!(img.sample(g.node_position(i, j)), img.samples()[k]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let p = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let v = img.sample(p);
            let h = g.spacing();
            let i = (((p[0] + 1.0) / h[0]).floor() as usize).min(g.nx() - 2);
            let j = (((p[1] + 1.0) / h[1]).floor() as usize).min(g.ny() - 2);
            let k = g.node_index(i, j);
            let s = [
                img.samples()[k],
                img.samples()[k + 1],
                img.samples()[k + g.nx()],
                img.samples()[k + g.nx() + 1],
            ];
            let lo = s.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(v >= lo - 1e-15 && v <= hi + 1e-15);
        }
    }

    #[test]
    fn warp_examples() {
        let g = Grid::unit_square(9).unwrap();
        let img = blob_image(&g, &default_blobs());
        let id = MatrixField::identity(&g);
        assert_eq!(warp(&img, &id).unwrap(), img);

        let c = ScalarImage::constant(&g, 2.5);
        let u = MatrixField::affine(&g, &Mat::from_rows(&[[0.5, 0.1], [0.0, 0.7]]), &[0.2, 0.1])
            .unwrap();
        assert!(warp(&c, &u).unwrap().samples().iter().all(|&v| v == 2.5));

        // I₂(x) = x₁, u(x) = (1 − x₁, x₂): bilinear interpolation reproduces affine images.
        let lin = ScalarImage::from_fn(&g, |p| p[0]);
        let flip = MatrixField::affine(&g, &Mat::diag2(-1.0, 1.0), &[1.0, 0.0]).unwrap();
        let out = warp(&lin, &flip).unwrap();
        for k in 0..g.node_count() {
            let (i, j) = g.node_coords(k);
            assert_relative_eq!(out.samples()[k], 1.0 - g.node_position(i, j)[0], epsilon = 1e-15);
        }
    }

    #[test]
    fn warp_reports_worst_violation() {
        let g = Grid::unit_square(5).unwrap();
        let img = ScalarImage::constant(&g, 0.0);
        let u = MatrixField::affine(&g, &Mat::identity(2), &[0.1, 0.0]).unwrap();
        match warp(&img, &u) {
            Err(Error::DomainViolation { distance, point, .. }) => {
                assert_relative_eq!(distance, 0.1, epsilon = 1e-12);
                assert_relative_eq!(point[0], 1.1, epsilon = 1e-12);
            }
            other => panic!("expected a domain violation, got {other:?}"),
        }
        // Within tolerance.
        let u = MatrixField::affine(&g, &Mat::identity(2), &[1e-12, 0.0]).unwrap();
        assert!(warp(&img, &u).is_ok());
    }

    #[test]
    fn data_term_examples() {
        let g = Grid::unit_square(5).unwrap();
        let a = ScalarImage::constant(&g, 3.0);
        assert_eq!(data_term(&a, &a, 2.0).unwrap(), 0.0);
        let b = ScalarImage::constant(&g, 2.0);
        assert_relative_eq!(data_term(&a, &b, 2.0).unwrap(), 1.0, epsilon = 1e-15);
        let half = g
            .clone()
            .with_mask((0..16).map(|c| c % 4 < 2).collect())
            .unwrap();
        let a = ScalarImage::constant(&half, 2.0);
        let b = ScalarImage::constant(&half, 0.0);
        assert_relative_eq!(data_term(&a, &b, 2.0).unwrap(), 2.0, epsilon = 1e-15);
        assert!(matches!(data_term(&a, &b, 0.5), Err(Error::Domain(_))));
    }

    #[test]
    fn rotation_field_examples() {
        let g = disk_grid(9);
        let r0 = rotation_field(0.0, &g);
        assert!(r0.warning.is_none());
        assert_eq!(r0.field, MatrixField::identity(&g));
        let r = rotation_field(std::f64::consts::FRAC_PI_2, &g);
        // Node (8, 4) is (1, 0).
        let k = g.node_index(8, 4);
        assert_relative_eq!(r.field.node_value(k)[0], 0.0, epsilon = 1e-15);
        assert_relative_eq!(r.field.node_value(k)[1], 1.0, epsilon = 1e-15);
        for theta in [0.3, 1.7, -2.9, 6.0] {
            assert!(warp(&ScalarImage::constant(&g, 1.0), &rotation_field(theta, &g).field).is_ok());
        }
        let boxed = Grid::unit_square(5).unwrap();
        assert!(rotation_field(0.2, &boxed).warning.is_some());
    }

    #[test]
    fn noise_examples() {
        let g = disk_grid(17);
        let img = blob_image(&g, &default_blobs());
        let same = add_noise(&img, 0.0, 2.0, 1).unwrap();
        assert_eq!(same.image, img);
        for (delta, q) in [(0.1, 2.0), (1e-4, 1.0), (3.0, 3.5)] {
            let s = add_noise(&img, delta, q, 7).unwrap();
            let d = lq_distance(&s.image, &img, q).unwrap();
            assert_relative_eq!(d, delta, max_relative = 1e-12);
        }
        let a = add_noise(&img, 0.2, 2.0, 99).unwrap();
        let b = add_noise(&img, 0.2, 2.0, 99).unwrap();
        assert_eq!(a, b);
        assert!(add_noise(&img, -1.0, 2.0, 0).is_err());
    }

    #[test]
    fn misfit_gradient_matches_differences_on_affine_image() {
        // An affine reference image has a continuous bilinear interpolant.
        let g = disk_grid(11);
        let reference = ScalarImage::from_fn(&g, |p| 0.3 + 0.8 * p[0] - 0.5 * p[1]);
        let data = blob_image(&g, &default_blobs());
        let mut u = rotation_field(0.4, &g).field;
        for v in u.values_mut() {
            *v *= 0.9;
        }
        let w = g.node_weights();
        let (f0, grad) = misfit_and_gradient(&reference, &data, &u, 2.0, &w, Execution::Sequential);
        assert_relative_eq!(f0, data_term(&warp_clamped(&reference, &u), &data, 2.0).unwrap(), epsilon = 1e-14);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dir: Vec<f64> = (0..grad.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h = 1e-6;
        let shift = |s: f64| {
            let mut v = u.clone();
            for (a, d) in v.values_mut().iter_mut().zip(&dir) {
                *a += s * d;
            }
            misfit_and_gradient(&reference, &data, &v, 2.0, &w, Execution::Sequential).0
        };
        let fd = (shift(h) - shift(-h)) / (2.0 * h);
        let an: f64 = grad.iter().zip(&dir).map(|(a, b)| a * b).sum();
        assert_relative_eq!(an, fd, max_relative = 1e-6);
    }
}
