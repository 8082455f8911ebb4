//! Partial-pivot LU factorization used by the differentiable linear solve.

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Pivots at or below this magnitude are treated as singular.
pub const PIVOT_EPS: f64 = 1e-12;

/// `P·A = L·U` with unit-diagonal `L` packed below the diagonal of `lu`.
#[derive(Clone, Debug)]
pub struct LuFactors {
    n: usize,
    lu: Vec<f64>,
    /// `perm[i]` is the row of `A` that ended up in row `i`.
    perm: Vec<usize>,
}

impl LuFactors {
    pub fn factor(a: &Matrix) -> Result<Self> {
        let n = a.rows();
        if a.cols() != n {
            return Err(Error::dim(
                "linear_solve",
                format!("coefficient matrix is {}x{}, not square", n, a.cols()),
            ));
        }
        let mut lu = a.as_slice().to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let mut p = k;
            let mut best = lu[k * n + k].abs();
            for r in k + 1..n {
                let v = lu[r * n + k].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if !(best > PIVOT_EPS) {
                return Err(Error::Singular {
                    pivot: k,
                    magnitude: best,
                });
            }
            if p != k {
                for c in 0..n {
                    lu.swap(k * n + c, p * n + c);
                }
                perm.swap(k, p);
            }
            let pivot = lu[k * n + k];
            for r in k + 1..n {
                let factor = lu[r * n + k] / pivot;
                lu[r * n + k] = factor;
                if factor != 0.0 {
                    let (upper, lower) = lu.split_at_mut(r * n);
                    let src = &upper[k * n + k + 1..k * n + n];
                    let dst = &mut lower[k + 1..n];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d -= factor * s;
                    }
                }
            }
        }
        Ok(LuFactors { n, lu, perm })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `A·X = B`.
    pub fn solve(&self, b: &Matrix) -> Matrix {
        let n = self.n;
        let m = b.cols();
        debug_assert_eq!(b.rows(), n);
        let mut x = Matrix::zeros(n, m);
        for i in 0..n {
            x.row_mut(i).copy_from_slice(b.row(self.perm[i]));
        }
        let xs = x.as_mut_slice();
        // forward substitution with unit lower triangle
        for i in 0..n {
            let (done, rest) = xs.split_at_mut(i * m);
            let xi = &mut rest[..m];
            for k in 0..i {
                let l = self.lu[i * n + k];
                if l != 0.0 {
                    for (a, b) in xi.iter_mut().zip(&done[k * m..(k + 1) * m]) {
                        *a -= l * b;
                    }
                }
            }
        }
        for i in (0..n).rev() {
            let (head, tail) = xs.split_at_mut((i + 1) * m);
            let xi = &mut head[i * m..];
            for k in i + 1..n {
                let u = self.lu[i * n + k];
                if u != 0.0 {
                    let xk = &tail[(k - i - 1) * m..(k - i) * m];
                    for (a, b) in xi.iter_mut().zip(xk) {
                        *a -= u * b;
                    }
                }
            }
            let d = self.lu[i * n + i];
            for a in xi.iter_mut() {
                *a /= d;
            }
        }
        x
    }

    /// Solves `Aᵀ·Y = G` with the same factors.
    pub fn solve_transpose(&self, g: &Matrix) -> Matrix {
        let n = self.n;
        let m = g.cols();
        debug_assert_eq!(g.rows(), n);
        let mut z = g.clone();
        let zs = z.as_mut_slice();
        // Uᵀ·z = g
        for i in 0..n {
            let (done, rest) = zs.split_at_mut(i * m);
            let zi = &mut rest[..m];
            for k in 0..i {
                let u = self.lu[k * n + i];
                if u != 0.0 {
                    for (a, b) in zi.iter_mut().zip(&done[k * m..(k + 1) * m]) {
                        *a -= u * b;
                    }
                }
            }
            let d = self.lu[i * n + i];
            for a in zi.iter_mut() {
                *a /= d;
            }
        }
        // Lᵀ·w = z
        for i in (0..n).rev() {
            let (head, tail) = zs.split_at_mut((i + 1) * m);
            let zi = &mut head[i * m..];
            for k in i + 1..n {
                let l = self.lu[k * n + i];
                if l != 0.0 {
                    let zk = &tail[(k - i - 1) * m..(k - i) * m];
                    for (a, b) in zi.iter_mut().zip(zk) {
                        *a -= l * b;
                    }
                }
            }
        }
        // y = Pᵀ·w
        let mut y = Matrix::zeros(n, m);
        for i in 0..n {
            y.row_mut(self.perm[i]).copy_from_slice(z.row(i));
        }
        y
    }
}
