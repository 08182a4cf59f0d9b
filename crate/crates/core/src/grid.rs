//! Regular node grids over an axis-aligned box, with a cell mask selecting
//! the computational domain `Ω`.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Shape of `Ω` inside the bounding box.
#[derive(Debug, Clone, PartialEq)]
pub enum Region {
    /// The whole box.
    Box,
    /// A closed disk. Active cells are those whose four corners lie in it.
    Disk { center: [f64; 2], radius: f64 },
    /// An arbitrary set of active cells; `Ω` is the union of their closures.
    Cells,
}

/// A grid of `nx × ny` nodes on `[x0, x1] × [y0, y1]`.
///
/// Node `(i, j)` sits at `(x0 + i·hx, y0 + j·hy)` and has linear index
/// `j·nx + i`. Cell `(ci, cj)` has lower-left node `(ci, cj)` and linear
/// index `cj·(nx − 1) + ci`.
#[derive(Debug, Clone)]
pub struct Grid {
    lower: [f64; 2],
    upper: [f64; 2],
    nx: usize,
    ny: usize,
    region: Region,
    mask: Arc<Vec<bool>>,
}

impl PartialEq for Grid {
    fn eq(&self, other: &Self) -> bool {
        self.lower == other.lower
            && self.upper == other.upper
            && self.nx == other.nx
            && self.ny == other.ny
            && self.region == other.region
            && (Arc::ptr_eq(&self.mask, &other.mask) || self.mask == other.mask)
    }
}

impl Grid {
    pub fn new(lower: [f64; 2], upper: [f64; 2], nx: usize, ny: usize) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::domain(format!(
                "grid needs at least 2 nodes per axis, got {nx}x{ny}"
            )));
        }
        if !(upper[0] > lower[0] && upper[1] > lower[1])
            || !lower.iter().chain(&upper).all(|v| v.is_finite())
        {
            return Err(Error::domain(format!(
                "grid box {lower:?}..{upper:?} is empty or not finite"
            )));
        }
        Ok(Grid {
            lower,
            upper,
            nx,
            ny,
            region: Region::Box,
            mask: Arc::new(vec![true; (nx - 1) * (ny - 1)]),
        })
    }

    /// The unit square `(0, 1)²` with `n × n` nodes.
    pub fn unit_square(n: usize) -> Result<Self> {
        Grid::new([0.0, 0.0], [1.0, 1.0], n, n)
    }

    /// Restricts `Ω` to a closed disk.
    pub fn with_disk(self, center: [f64; 2], radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::domain(format!("disk radius must be positive, got {radius}")));
        }
        let r2 = radius * radius;
        let inside = |i: usize, j: usize| {
            let p = self.node_position(i, j);
            let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
            dx * dx + dy * dy <= r2 * (1.0 + 1e-12)
        };
        let mask = (0..self.cell_count())
            .map(|c| {
                let (ci, cj) = self.cell_coords(c);
                inside(ci, cj) && inside(ci + 1, cj) && inside(ci, cj + 1) && inside(ci + 1, cj + 1)
            })
            .collect::<Vec<_>>();
        if !mask.iter().any(|&m| m) {
            return Err(Error::domain("disk contains no complete grid cell"));
        }
        Ok(Grid {
            region: Region::Disk { center, radius },
            mask: Arc::new(mask),
            ..self
        })
    }

    /// Restricts `Ω` to an explicit set of active cells.
    pub fn with_mask(self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.cell_count() {
            return Err(Error::mismatch(format!(
                "mask has {} cells, grid has {}",
                mask.len(),
                self.cell_count()
            )));
        }
        Ok(Grid {
            region: Region::Cells,
            mask: Arc::new(mask),
            ..self
        })
    }

    pub fn lower(&self) -> [f64; 2] {
        self.lower
    }

    pub fn upper(&self) -> [f64; 2] {
        self.upper
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn region(&self) -> &Region {
        &self.region
    }

    pub fn spacing(&self) -> [f64; 2] {
        [
            (self.upper[0] - self.lower[0]) / (self.nx - 1) as f64,
            (self.upper[1] - self.lower[1]) / (self.ny - 1) as f64,
        ]
    }

    pub fn cell_area(&self) -> f64 {
        let h = self.spacing();
        h[0] * h[1]
    }

    /// Diameter of the bounding box.
    pub fn diameter(&self) -> f64 {
        (self.upper[0] - self.lower[0]).hypot(self.upper[1] - self.lower[1])
    }

    pub fn node_count(&self) -> usize {
        self.nx * self.ny
    }

    pub fn cell_count(&self) -> usize {
        (self.nx - 1) * (self.ny - 1)
    }

    #[inline]
    pub fn node_index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn node_coords(&self, k: usize) -> (usize, usize) {
        (k % self.nx, k / self.nx)
    }

    #[inline]
    pub fn node_position(&self, i: usize, j: usize) -> [f64; 2] {
        let h = self.spacing();
        [self.lower[0] + i as f64 * h[0], self.lower[1] + j as f64 * h[1]]
    }

    #[inline]
    pub fn cell_coords(&self, c: usize) -> (usize, usize) {
        (c % (self.nx - 1), c / (self.nx - 1))
    }

    #[inline]
    pub fn cell_index(&self, ci: usize, cj: usize) -> usize {
        cj * (self.nx - 1) + ci
    }

    /// Corner nodes of a cell in the order `(i, j), (i+1, j), (i, j+1), (i+1, j+1)`.
    #[inline]
    pub fn cell_nodes(&self, c: usize) -> [usize; 4] {
        let (ci, cj) = self.cell_coords(c);
        let k = self.node_index(ci, cj);
        [k, k + 1, k + self.nx, k + self.nx + 1]
    }

    pub fn cell_center(&self, c: usize) -> [f64; 2] {
        let (ci, cj) = self.cell_coords(c);
        let h = self.spacing();
        [
            self.lower[0] + (ci as f64 + 0.5) * h[0],
            self.lower[1] + (cj as f64 + 0.5) * h[1],
        ]
    }

    #[inline]
    pub fn is_active(&self, c: usize) -> bool {
        self.mask[c]
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn active_cells(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.cell_count()).filter(move |&c| self.mask[c])
    }

    /// `|Ω_h|`, the total area of active cells.
    pub fn active_area(&self) -> f64 {
        self.active_cells().count() as f64 * self.cell_area()
    }

    /// Lumped quadrature weight of every node: a quarter of the area of each
    /// adjacent active cell. Nodes outside `Ω_h` get weight 0.
    pub fn node_weights(&self) -> Vec<f64> {
        let quarter = 0.25 * self.cell_area();
        let mut w = vec![0.0; self.node_count()];
        for c in self.active_cells() {
            for k in self.cell_nodes(c) {
                w[k] += quarter;
            }
        }
        w
    }

    /// Distance from `p` to `Ω̄` (0 inside).
    pub fn distance_outside(&self, p: [f64; 2]) -> f64 {
        match &self.region {
            Region::Box => {
                let dx = (self.lower[0] - p[0]).max(p[0] - self.upper[0]).max(0.0);
                let dy = (self.lower[1] - p[1]).max(p[1] - self.upper[1]).max(0.0);
                dx.hypot(dy)
            }
            Region::Disk { center, radius } => {
                ((p[0] - center[0]).hypot(p[1] - center[1]) - radius).max(0.0)
            }
            Region::Cells => self
                .active_cells()
                .map(|c| {
                    let (ci, cj) = self.cell_coords(c);
                    let a = self.node_position(ci, cj);
                    let b = self.node_position(ci + 1, cj + 1);
                    let dx = (a[0] - p[0]).max(p[0] - b[0]).max(0.0);
                    let dy = (a[1] - p[1]).max(p[1] - b[1]).max(0.0);
                    dx.hypot(dy)
                })
                .fold(f64::INFINITY, f64::min),
        }
    }

    /// Nearest point of the admissible set used for solver iterates, with
    /// the Jacobian of that projection at `p` (row-major 2×2).
    ///
    /// For a disk this is the metric projection onto the disk. For a box or a
    /// cell mask it is coordinate-wise clamping to the bounding box.
    pub fn project(&self, p: [f64; 2]) -> ([f64; 2], [f64; 4]) {
        match &self.region {
            Region::Disk { center, radius } => {
                let d = [p[0] - center[0], p[1] - center[1]];
                let r = d[0].hypot(d[1]);
                if r <= *radius {
                    (p, [1.0, 0.0, 0.0, 1.0])
                } else {
                    let s = radius / r;
                    let n = [d[0] / r, d[1] / r];
                    (
                        [center[0] + s * d[0], center[1] + s * d[1]],
                        [
                            s * (1.0 - n[0] * n[0]),
                            -s * n[0] * n[1],
                            -s * n[0] * n[1],
                            s * (1.0 - n[1] * n[1]),
                        ],
                    )
                }
            }
            Region::Box | Region::Cells => {
                let clamp = |v: f64, lo: f64, hi: f64| {
                    if v < lo {
                        (lo, 0.0)
                    } else if v > hi {
                        (hi, 0.0)
                    } else {
                        (v, 1.0)
                    }
                };
                let (x, dx) = clamp(p[0], self.lower[0], self.upper[0]);
                let (y, dy) = clamp(p[1], self.lower[1], self.upper[1]);
                ([x, y], [dx, 0.0, 0.0, dy])
            }
        }
    }

    /// Nodes that are corners of at least one active cell.
    pub fn active_nodes(&self) -> Vec<bool> {
        let mut out = vec![false; self.node_count()];
        for c in self.active_cells() {
            for k in self.cell_nodes(c) {
                out[k] = true;
            }
        }
        out
    }

    pub(crate) fn check_same(&self, other: &Grid, what: &str) -> Result<()> {
        if self != other {
            return Err(Error::mismatch(format!("{what}: grids differ")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn spacing_and_positions() {
        let g = Grid::new([-1.0, 0.0], [1.0, 2.0], 5, 3).unwrap();
        assert_eq!(g.spacing(), [0.5, 1.0]);
        assert_eq!(g.node_position(4, 2), [1.0, 2.0]);
        assert_eq!(g.cell_count(), 8);
        assert_eq!(g.cell_center(0), [-0.75, 0.5]);
        assert_eq!(g.cell_nodes(5), [6, 7, 11, 12]);
        assert!(Grid::new([0.0, 0.0], [1.0, 1.0], 1, 4).is_err());
        assert!(Grid::new([0.0, 0.0], [0.0, 1.0], 3, 4).is_err());
    }

    #[test]
    fn node_weights_sum_to_area() {
        let g = Grid::unit_square(7).unwrap();
        let s: f64 = g.node_weights().iter().sum();
        assert_relative_eq!(s, 1.0, epsilon = 1e-14);
        let d = Grid::new([-1.0, -1.0], [1.0, 1.0], 33, 33)
            .unwrap()
            .with_disk([0.0, 0.0], 1.0)
            .unwrap();
        let s: f64 = d.node_weights().iter().sum();
        assert_relative_eq!(s, d.active_area(), epsilon = 1e-12);
        assert!(d.active_area() < std::f64::consts::PI);
        assert!(d.active_area() > 0.8 * std::f64::consts::PI);
    }

    #[test]
    fn disk_cells_lie_inside_disk() {
        let g = Grid::new([-1.0, -1.0], [1.0, 1.0], 17, 17)
            .unwrap()
            .with_disk([0.0, 0.0], 1.0)
            .unwrap();
        for c in g.active_cells() {
            for k in g.cell_nodes(c) {
                let (i, j) = g.node_coords(k);
                assert_eq!(g.distance_outside(g.node_position(i, j)), 0.0);
            }
        }
    }

    #[test]
    fn projection_onto_disk() {
        let g = Grid::new([-1.0, -1.0], [1.0, 1.0], 5, 5)
            .unwrap()
            .with_disk([0.0, 0.0], 1.0)
            .unwrap();
        let (p, _) = g.project([0.3, 0.4]);
        assert_eq!(p, [0.3, 0.4]);
        let (p, j) = g.project([3.0, 4.0]);
        assert_relative_eq!(p[0], 0.6, epsilon = 1e-15);
        assert_relative_eq!(p[1], 0.8, epsilon = 1e-15);
        // Radial direction is annihilated.
        assert_relative_eq!(j[0] * 0.6 + j[1] * 0.8, 0.0, epsilon = 1e-15);
        assert_relative_eq!(g.distance_outside([3.0, 4.0]), 4.0, epsilon = 1e-15);
    }

    #[test]
    fn mask_region_distance() {
        let g = Grid::unit_square(3).unwrap();
        let g = g.with_mask(vec![true, false, false, false]).unwrap();
        assert_eq!(g.distance_outside([0.25, 0.25]), 0.0);
        assert_relative_eq!(g.distance_outside([1.0, 0.5]), 0.5, epsilon = 1e-15);
        assert!(Grid::unit_square(3).unwrap().with_mask(vec![true; 3]).is_err());
    }
}
