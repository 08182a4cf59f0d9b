//! Minors of small matrices: the blocks `adj_s(A)`, the full minors vector
//! `T(A) = (A, adj_2(A), …, adj_m(A))` with `m = min(N, n)`, its tail `T_2`,
//! and the derivative of `T`.
//!
//! Slot layout: blocks are stored in increasing order `s = 1, …, m`. Inside
//! the block of order `s`, row subsets and column subsets are enumerated in
//! lexicographic order and the block is stored row-major over
//! (row subset, column subset). For `s = 1` this is the row-major flattening
//! of `A`. For square `A` the last slot is `det A`.
//!
//! Dimensions up to 3×3 are supported; every minor is evaluated by cofactor
//! expansion.

use std::fmt;

use crate::error::{Error, Result};

/// Largest supported row or column count.
pub const MAX_DIM: usize = 3;
/// Length of `T(A)` for a 3×3 matrix, the largest supported layout.
pub const MAX_TAU: usize = 19;

/// A dense matrix with at most 3 rows and 3 columns, stored row-major.
#[derive(Clone, Copy, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: [f64; 9],
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(
            (1..=MAX_DIM).contains(&rows) && (1..=MAX_DIM).contains(&cols),
            "matrix dimensions {rows}x{cols} outside 1..=3"
        );
        Mat {
            rows,
            cols,
            data: [0.0; 9],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    /// Builds a matrix from a row-major slice of length `rows * cols`.
    pub fn from_row_slice(rows: usize, cols: usize, values: &[f64]) -> Self {
        assert_eq!(values.len(), rows * cols);
        let mut m = Mat::zeros(rows, cols);
        m.data[..rows * cols].copy_from_slice(values);
        m
    }

    pub fn from_rows<const C: usize>(rows: &[[f64; C]]) -> Self {
        let mut m = Mat::zeros(rows.len(), C);
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                m.set(i, j, v);
            }
        }
        m
    }

    pub fn diag2(a: f64, b: f64) -> Self {
        Mat::from_rows(&[[a, 0.0], [0.0, b]])
    }

    /// Counter-clockwise rotation of the plane by `theta` radians.
    pub fn rotation(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Mat::from_rows(&[[c, -s], [s, c]])
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    /// Row-major entries.
    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data[..self.rows * self.cols]
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        let len = self.rows * self.cols;
        &mut self.data[..len]
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "inner dimensions differ");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += self.get(i, k) * other.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    pub fn scaled(&self, factor: f64) -> Mat {
        let mut out = *self;
        out.as_mut_slice().iter_mut().for_each(|v| *v *= factor);
        out
    }

    /// `self + factor * other`.
    pub fn add_scaled(&self, other: &Mat, factor: f64) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut out = *self;
        for (a, b) in out.as_mut_slice().iter_mut().zip(other.as_slice()) {
            *a += factor * b;
        }
        out
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Mat) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.as_slice()
            .iter()
            .zip(other.as_slice())
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Determinant by cofactor expansion along the first row.
    pub fn det(&self) -> f64 {
        assert_eq!(self.rows, self.cols, "determinant of a non-square matrix");
        let idx = [0, 1, 2];
        minor_det(self, &idx[..self.rows], &idx[..self.cols])
    }

    /// Cofactor matrix; for invertible `A` this is `det(A) A^{-T}`, the
    /// gradient of `det` at `A`.
    pub fn cofactor(&self) -> Mat {
        assert_eq!(self.rows, self.cols, "cofactor of a non-square matrix");
        let n = self.rows;
        let idx = [0, 1, 2];
        let mut out = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                out.set(i, j, minor_cofactor(self, &idx[..n], &idx[..n], i, j));
            }
        }
        out
    }
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows: Vec<&[f64]> = (0..self.rows)
            .map(|i| &self.data[i * self.cols..(i + 1) * self.cols])
            .collect();
        f.debug_tuple("Mat").field(&rows).finish()
    }
}

/// Determinant of the submatrix `A[rows, cols]` (`rows.len() == cols.len() <= 3`).
#[inline]
fn minor_det(a: &Mat, rows: &[usize], cols: &[usize]) -> f64 {
    match rows.len() {
        1 => a.get(rows[0], cols[0]),
        2 => {
            a.get(rows[0], cols[0]) * a.get(rows[1], cols[1])
                - a.get(rows[0], cols[1]) * a.get(rows[1], cols[0])
        }
        3 => {
            let r = rows;
            let c = cols;
            a.get(r[0], c[0]) * minor_det(a, &[r[1], r[2]], &[c[1], c[2]])
                - a.get(r[0], c[1]) * minor_det(a, &[r[1], r[2]], &[c[0], c[2]])
                + a.get(r[0], c[2]) * minor_det(a, &[r[1], r[2]], &[c[0], c[1]])
        }
        s => unreachable!("minor of order {s}"),
    }
}

/// `∂ det(A[rows, cols]) / ∂ A[rows[a], cols[b]]`, the signed complementary minor.
#[inline]
fn minor_cofactor(m: &Mat, rows: &[usize], cols: &[usize], a: usize, b: usize) -> f64 {
    let s = rows.len();
    if s == 1 {
        return 1.0;
    }
    let mut r = [0usize; 2];
    let mut c = [0usize; 2];
    let mut k = 0;
    for (i, &ri) in rows.iter().enumerate() {
        if i != a {
            r[k] = ri;
            k += 1;
        }
    }
    k = 0;
    for (j, &cj) in cols.iter().enumerate() {
        if j != b {
            c[k] = cj;
            k += 1;
        }
    }
    let sign = if (a + b).is_multiple_of(2) { 1.0 } else { -1.0 };
    sign * minor_det(m, &r[..s - 1], &c[..s - 1])
}

fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

/// Lexicographically ordered `k`-subsets of `0..n`.
fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::with_capacity(binomial(n, k));
    rec(0, n, k, &mut Vec::with_capacity(k), &mut out);
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Block {
    order: usize,
    offset: usize,
    row_sets: Vec<Vec<usize>>,
    col_sets: Vec<Vec<usize>>,
}

/// Sizes and slot layout of the minors vector for `N × n` matrices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MinorsLayout {
    rows: usize,
    cols: usize,
    /// `sigma[s - 1] = C(N, s) C(n, s)`.
    sigma: Vec<usize>,
    tau: usize,
    blocks: Vec<Block>,
}

impl MinorsLayout {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if !(1..=MAX_DIM).contains(&rows) || !(1..=MAX_DIM).contains(&cols) {
            return Err(Error::domain(format!(
                "minors layout {rows}x{cols} unsupported, dimensions must lie in 1..=3"
            )));
        }
        let m = rows.min(cols);
        let mut blocks = Vec::with_capacity(m);
        let mut sigma = Vec::with_capacity(m);
        let mut offset = 0;
        for s in 1..=m {
            let row_sets = subsets(rows, s);
            let col_sets = subsets(cols, s);
            let size = row_sets.len() * col_sets.len();
            debug_assert_eq!(size, binomial(rows, s) * binomial(cols, s));
            sigma.push(size);
            blocks.push(Block {
                order: s,
                offset,
                row_sets,
                col_sets,
            });
            offset += size;
        }
        Ok(MinorsLayout {
            rows,
            cols,
            sigma,
            tau: offset,
            blocks,
        })
    }

    /// Number of rows `N` of the matrices this layout describes.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Number of columns `n`.
    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Highest minor order `min(N, n)`.
    pub fn max_order(&self) -> usize {
        self.blocks.len()
    }

    /// `σ(s)`, the number of minors of order `s`.
    pub fn sigma(&self, s: usize) -> Option<usize> {
        s.checked_sub(1).and_then(|i| self.sigma.get(i)).copied()
    }

    /// `τ(N, n)`, length of `T(A)`.
    pub fn tau(&self) -> usize {
        self.tau
    }

    /// `τ₂(N, n) = τ − N·n`, length of `T₂(A)`.
    pub fn tau2(&self) -> usize {
        self.tau - self.rows * self.cols
    }

    /// Slot range of the block of order `s`.
    pub fn block_range(&self, s: usize) -> Option<std::ops::Range<usize>> {
        let b = self.blocks.get(s.checked_sub(1)?)?;
        Some(b.offset..b.offset + self.sigma[s - 1])
    }

    /// Index of the determinant slot for square layouts.
    pub fn det_slot(&self) -> Option<usize> {
        (self.rows == self.cols).then(|| self.tau - 1)
    }

    fn check(&self, a: &Mat) -> Result<()> {
        if a.rows() != self.rows || a.cols() != self.cols {
            return Err(Error::mismatch(format!(
                "matrix is {}x{}, layout expects {}x{}",
                a.rows(),
                a.cols(),
                self.rows,
                self.cols
            )));
        }
        Ok(())
    }

    /// `adj_s(A)`: all `s × s` minors of `A` in layout order.
    pub fn adj(&self, a: &Mat, s: usize) -> Result<Vec<f64>> {
        self.check(a)?;
        let block = s
            .checked_sub(1)
            .and_then(|i| self.blocks.get(i))
            .ok_or_else(|| {
                Error::domain(format!(
                    "minor order {s} outside 1..={}",
                    self.max_order()
                ))
            })?;
        let mut out = Vec::with_capacity(self.sigma[s - 1]);
        for r in &block.row_sets {
            for c in &block.col_sets {
                out.push(minor_det(a, r, c));
            }
        }
        Ok(out)
    }

    /// `T(A)`, the vector of all minors.
    pub fn minors(&self, a: &Mat) -> Result<MinorsVector> {
        self.check(a)?;
        Ok(self.minors_unchecked(a))
    }

    pub(crate) fn minors_unchecked(&self, a: &Mat) -> MinorsVector {
        let mut slots = [0.0; MAX_TAU];
        let mut k = 0;
        for block in &self.blocks {
            for r in &block.row_sets {
                for c in &block.col_sets {
                    slots[k] = minor_det(a, r, c);
                    k += 1;
                }
            }
        }
        MinorsVector {
            len: self.tau,
            slots,
        }
    }

    /// `T₂(A)`: `T(A)` without the first `N·n` slots. Empty when `min(N, n) = 1`.
    pub fn minors_tail(&self, a: &Mat) -> Result<Vec<f64>> {
        let t = self.minors(a)?;
        Ok(t.as_slice()[self.rows * self.cols..].to_vec())
    }

    /// Jacobian of `T` at `A` as a `τ × (N·n)` matrix whose column index is
    /// the row-major position of the perturbed entry of `A`.
    pub fn minors_jacobian(&self, a: &Mat) -> Result<MinorsJacobian> {
        self.check(a)?;
        let ncols = self.rows * self.cols;
        let mut data = vec![0.0; self.tau * ncols];
        for block in &self.blocks {
            let nc = block.col_sets.len();
            for (ri, r) in block.row_sets.iter().enumerate() {
                for (ci, c) in block.col_sets.iter().enumerate() {
                    let slot = block.offset + ri * nc + ci;
                    for (ia, &row) in r.iter().enumerate() {
                        for (ib, &col) in c.iter().enumerate() {
                            data[slot * ncols + row * self.cols + col] =
                                minor_cofactor(a, r, c, ia, ib);
                        }
                    }
                }
            }
        }
        Ok(MinorsJacobian {
            tau: self.tau,
            entries: ncols,
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Vector-Jacobian product `dT(A)ᵀ g`, returned as an `N × n` matrix.
    ///
    /// This is the chain rule for `A ↦ F(T(A))` given `g = ∇_ξ F(T(A))`.
    pub fn pullback(&self, a: &Mat, g: &[f64]) -> Mat {
        debug_assert_eq!(g.len(), self.tau);
        let mut out = Mat::zeros(self.rows, self.cols);
        for block in &self.blocks {
            let nc = block.col_sets.len();
            for (ri, r) in block.row_sets.iter().enumerate() {
                for (ci, c) in block.col_sets.iter().enumerate() {
                    let gk = g[block.offset + ri * nc + ci];
                    if gk == 0.0 {
                        continue;
                    }
                    for (ia, &row) in r.iter().enumerate() {
                        for (ib, &col) in c.iter().enumerate() {
                            let v = out.get(row, col) + gk * minor_cofactor(a, r, c, ia, ib);
                            out.set(row, col, v);
                        }
                    }
                }
            }
        }
        out
    }
}

/// The value `T(A) ∈ ℝ^τ`.
#[derive(Clone, Copy)]
pub struct MinorsVector {
    len: usize,
    slots: [f64; MAX_TAU],
}

impl MinorsVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.slots[..self.len]
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl fmt::Debug for MinorsVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.as_slice()).finish()
    }
}

impl std::ops::Index<usize> for MinorsVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.as_slice()[i]
    }
}

/// Dense Jacobian of the minors map.
#[derive(Debug, Clone)]
pub struct MinorsJacobian {
    tau: usize,
    entries: usize,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl MinorsJacobian {
    /// `∂T_slot / ∂A_{ij}`.
    pub fn get(&self, slot: usize, i: usize, j: usize) -> f64 {
        self.data[slot * self.entries + i * self.cols + j]
    }

    /// Gradient of one slot with respect to `A`, as an `N × n` matrix.
    pub fn slot_gradient(&self, slot: usize) -> Mat {
        Mat::from_row_slice(
            self.rows,
            self.cols,
            &self.data[slot * self.entries..(slot + 1) * self.entries],
        )
    }

    /// Directional derivative `dT(A)[H]`.
    pub fn apply(&self, h: &Mat) -> Vec<f64> {
        assert_eq!((h.rows(), h.cols()), (self.rows, self.cols));
        (0..self.tau)
            .map(|k| {
                self.data[k * self.entries..(k + 1) * self.entries]
                    .iter()
                    .zip(h.as_slice())
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn layout_sizes() {
        let l22 = MinorsLayout::new(2, 2).unwrap();
        assert_eq!(l22.tau(), 5);
        assert_eq!(l22.tau2(), 1);
        let l33 = MinorsLayout::new(3, 3).unwrap();
        assert_eq!(l33.tau(), 19);
        assert_eq!(l33.sigma(1), Some(9));
        assert_eq!(l33.sigma(2), Some(9));
        assert_eq!(l33.sigma(3), Some(1));
        let l32 = MinorsLayout::new(3, 2).unwrap();
        assert_eq!(l32.tau(), 6 + 3);
        let l13 = MinorsLayout::new(1, 3).unwrap();
        assert_eq!(l13.tau2(), 0);
        assert!(MinorsLayout::new(4, 2).is_err());
        assert!(MinorsLayout::new(0, 2).is_err());
    }

    #[test]
    fn adj1_is_flattened_matrix() {
        let l = MinorsLayout::new(2, 3).unwrap();
        let a = Mat::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        assert_eq!(l.adj(&a, 1).unwrap(), a.as_slice());
    }

    #[test]
    fn adj2_of_identity3() {
        let l = MinorsLayout::new(3, 3).unwrap();
        let m = l.adj(&Mat::identity(3), 2).unwrap();
        // Diagonal subset pairs ({0,1},{0,1}), ({0,2},{0,2}), ({1,2},{1,2}).
        assert_eq!(m, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn adj_order_out_of_range() {
        let l = MinorsLayout::new(2, 2).unwrap();
        assert!(matches!(l.adj(&Mat::identity(2), 3), Err(Error::Domain(_))));
        assert!(matches!(l.adj(&Mat::identity(2), 0), Err(Error::Domain(_))));
    }

    #[test]
    fn minors_2x2_examples() {
        let l = MinorsLayout::new(2, 2).unwrap();
        assert_eq!(
            l.minors(&Mat::identity(2)).unwrap().as_slice(),
            &[1.0, 0.0, 0.0, 1.0, 1.0]
        );
        let a = Mat::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(l.minors(&a).unwrap().as_slice(), &[1.0, 2.0, 3.0, 4.0, -2.0]);
        assert_eq!(l.minors_tail(&Mat::diag2(2.0, 1.0)).unwrap(), vec![2.0]);
        assert_eq!(l.minors_tail(&Mat::identity(2)).unwrap(), vec![1.0]);
    }

    #[test]
    fn tail_is_empty_for_vectors() {
        let l = MinorsLayout::new(1, 2).unwrap();
        let a = Mat::from_rows(&[[3.0, -1.0]]);
        assert!(l.minors_tail(&a).unwrap().is_empty());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let l = MinorsLayout::new(2, 2).unwrap();
        assert!(matches!(
            l.minors(&Mat::identity(3)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn det_row_of_jacobian_is_cofactor() {
        let l = MinorsLayout::new(2, 2).unwrap();
        let j = l.minors_jacobian(&Mat::identity(2)).unwrap();
        assert_eq!(j.slot_gradient(4), Mat::identity(2));
        let a = Mat::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let j = l.minors_jacobian(&a).unwrap();
        assert_eq!(j.slot_gradient(4), Mat::from_rows(&[[4.0, -3.0], [-2.0, 1.0]]));
        assert_eq!(j.slot_gradient(4), a.cofactor());
    }

    #[test]
    fn pullback_agrees_with_dense_jacobian() {
        let l = MinorsLayout::new(3, 3).unwrap();
        let a = Mat::from_rows(&[[0.3, -1.2, 0.7], [1.1, 0.4, -0.5], [0.2, 0.9, 1.6]]);
        let g: Vec<f64> = (0..19).map(|k| (k as f64 * 0.37).sin()).collect();
        let j = l.minors_jacobian(&a).unwrap();
        let pb = l.pullback(&a, &g);
        for r in 0..3 {
            for c in 0..3 {
                let dense: f64 = (0..19).map(|k| g[k] * j.get(k, r, c)).sum();
                assert_relative_eq!(pb.get(r, c), dense, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn rotation_has_unit_det_and_cofactor_equal_to_itself() {
        let r = Mat::rotation(0.83);
        assert_relative_eq!(r.det(), 1.0, epsilon = 1e-15);
        let c = r.cofactor();
        for (a, b) in c.as_slice().iter().zip(r.as_slice()) {
            assert_relative_eq!(a, b, epsilon = 1e-15);
        }
    }
}
