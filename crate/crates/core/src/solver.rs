//! Linear solves for the 5-point operators on the rectangle.
//!
//! Every operator used by the stepper (Neumann Laplacian for pressure and
//! scalar diffusion, Dirichlet Laplacians for the two MAC velocity components)
//! is a Kronecker sum `Tx (+) Ty` of 1-D tridiagonal matrices with known
//! eigenpairs. [`SeparableOperator::solve_shifted`] inverts
//! `shift I - scale (Tx (+) Ty)` exactly by transforming to the eigenbasis,
//! and [`pcg`] wraps it as a preconditioner so that the relative residual is
//! checked against an explicit tolerance.

use crate::grid::pairwise_sum_by;
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error(
        "conjugate gradient stalled after {iterations} iterations: relative residual {residual:e} > {tol:e} (history: {history:?})"
    )]
    NotConverged {
        iterations: usize,
        residual: f64,
        tol: f64,
        history: Vec<f64>,
    },
}

/// Boundary rule of a 1-D second-difference operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bc1d {
    /// Cell unknowns, mirror halo (zero flux).
    NeumannCells,
    /// Node unknowns strictly inside, zero at both end nodes.
    DirichletNodes,
    /// Cell unknowns, zero at the wall half a cell away (halo = -interior).
    DirichletCells,
}

/// Orthonormal eigenbasis of one 1-D operator.
#[derive(Debug, Clone)]
struct Basis1d {
    /// Row-major `n x n`, `q[i * n + k]` is component `i` of eigenvector `k`.
    q: Vec<f64>,
    lambda: Vec<f64>,
}

impl Basis1d {
    fn new(bc: Bc1d, n: usize, h: f64) -> Self {
        let mut q = vec![0.0; n * n];
        let mut lambda = vec![0.0; n];
        let h2 = h * h;
        match bc {
            Bc1d::NeumannCells => {
                for k in 0..n {
                    let norm = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
                    let s = (PI * k as f64 / (2.0 * n as f64)).sin();
                    lambda[k] = -4.0 * s * s / h2;
                    for i in 0..n {
                        q[i * n + k] = norm * (PI * k as f64 * (i as f64 + 0.5) / n as f64).cos();
                    }
                }
            }
            Bc1d::DirichletNodes => {
                let m = n + 1;
                let norm = (2.0 / m as f64).sqrt();
                for k in 0..n {
                    let kk = (k + 1) as f64;
                    let s = (PI * kk / (2.0 * m as f64)).sin();
                    lambda[k] = -4.0 * s * s / h2;
                    for i in 0..n {
                        q[i * n + k] = norm * (PI * kk * (i + 1) as f64 / m as f64).sin();
                    }
                }
            }
            Bc1d::DirichletCells => {
                for k in 0..n {
                    let kk = (k + 1) as f64;
                    let norm = if k + 1 == n { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
                    let s = (PI * kk / (2.0 * n as f64)).sin();
                    lambda[k] = -4.0 * s * s / h2;
                    for i in 0..n {
                        q[i * n + k] = norm * (PI * kk * (i as f64 + 0.5) / n as f64).sin();
                    }
                }
            }
        }
        Self { q, lambda }
    }
}

/// `Tx (+) Ty` on an `nx x ny` array stored row-major (`i` fastest).
#[derive(Debug, Clone)]
pub struct SeparableOperator {
    nx: usize,
    ny: usize,
    bcx: Bc1d,
    bcy: Bc1d,
    hx: f64,
    hy: f64,
    bx: Basis1d,
    by: Basis1d,
}

impl SeparableOperator {
    pub fn new(nx: usize, ny: usize, bcx: Bc1d, bcy: Bc1d, hx: f64, hy: f64) -> Self {
        Self {
            nx,
            ny,
            bcx,
            bcy,
            hx,
            hy,
            bx: Basis1d::new(bcx, nx, hx),
            by: Basis1d::new(bcy, ny, hy),
        }
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `out = (Tx (+) Ty) x`.
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        let (nx, ny) = (self.nx, self.ny);
        let (cx, cy) = (1.0 / (self.hx * self.hx), 1.0 / (self.hy * self.hy));
        let halo = |bc: Bc1d, edge: f64| match bc {
            Bc1d::NeumannCells => edge,
            Bc1d::DirichletNodes => 0.0,
            Bc1d::DirichletCells => -edge,
        };
        for j in 0..ny {
            for i in 0..nx {
                let v = x[i + j * nx];
                let w = if i > 0 { x[i - 1 + j * nx] } else { halo(self.bcx, v) };
                let e = if i + 1 < nx { x[i + 1 + j * nx] } else { halo(self.bcx, v) };
                let s = if j > 0 { x[i + (j - 1) * nx] } else { halo(self.bcy, v) };
                let n = if j + 1 < ny { x[i + (j + 1) * nx] } else { halo(self.bcy, v) };
                out[i + j * nx] = (w - 2.0 * v + e) * cx + (s - 2.0 * v + n) * cy;
            }
        }
    }

    /// Solve `(shift I - scale (Tx (+) Ty)) x = rhs` in the eigenbasis.
    ///
    /// Modes whose diagonal entry vanishes (the constant Neumann mode when
    /// `shift == 0`) are set to zero, which fixes a mean-zero gauge.
    pub fn solve_shifted(&self, rhs: &[f64], shift: f64, scale: f64, out: &mut [f64]) {
        let (nx, ny) = (self.nx, self.ny);
        let (sx, sy) = (nx as isize, ny as isize);
        let mut tmp = vec![0.0; nx * ny];
        let mut hat = vec![0.0; nx * ny];
        // hat = Qy^T * R * Qx, with R viewed as ny x nx.
        gemm(ny, nx, nx, rhs, sx, 1, &self.bx.q, sx, 1, &mut tmp);
        gemm(ny, ny, nx, &self.by.q, 1, sy, &tmp, sx, 1, &mut hat);
        let lmax = self.bx.lambda.iter().chain(&self.by.lambda).fold(0.0_f64, |m, l| m.max(l.abs()));
        let null_tol = 1e-12 * (shift.abs() + scale.abs() * lmax);
        for (kj, &ly) in self.by.lambda.iter().enumerate() {
            for (ki, &lx) in self.bx.lambda.iter().enumerate() {
                let d = shift - scale * (lx + ly);
                let idx = ki + kj * nx;
                hat[idx] = if d.abs() <= null_tol { 0.0 } else { hat[idx] / d };
            }
        }
        // out = Qy * hat * Qx^T
        gemm(ny, nx, nx, &hat, sx, 1, &self.bx.q, 1, sx, &mut tmp);
        gemm(ny, ny, nx, &self.by.q, sy, 1, &tmp, sx, 1, out);
    }
}

/// `c = a * b` for an `m x k` matrix `a` and `k x n` matrix `b` given by
/// row/column strides; `c` is dense row-major `m x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], rsa: isize, csa: isize, b: &[f64], rsb: isize, csb: isize, c: &mut [f64]) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe views that stay inside `a`, `b` and `c`,
    // whose lengths are checked by the callers' shapes.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), rsa, csa,
            b.as_ptr(), rsb, csb,
            0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    pairwise_sum_by(a.len(), &|k| a[k] * b[k])
}

/// Result of a converged conjugate-gradient solve.
#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub iterations: usize,
    pub residual: f64,
}

/// Preconditioned conjugate gradients for a symmetric positive
/// (semi-)definite operator. Convergence is declared when
/// `||b - A x|| <= tol ||b||`; `x` holds the initial guess on entry.
pub fn pcg(
    apply: impl Fn(&[f64], &mut [f64]),
    precond: impl Fn(&[f64], &mut [f64]),
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    max_iter: usize,
) -> Result<CgOutcome, SolveError> {
    let n = b.len();
    let bnorm = dot(b, b).sqrt();
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(CgOutcome { iterations: 0, residual: 0.0 });
    }
    let mut r = vec![0.0; n];
    apply(x, &mut r);
    for k in 0..n {
        r[k] = b[k] - r[k];
    }
    let mut history = Vec::new();
    let mut rel = dot(&r, &r).sqrt() / bnorm;
    history.push(rel);
    if rel <= tol {
        return Ok(CgOutcome { iterations: 0, residual: rel });
    }
    let mut z = vec![0.0; n];
    precond(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for it in 1..=max_iter {
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 || !pap.is_finite() {
            break;
        }
        let alpha = rz / pap;
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        rel = dot(&r, &r).sqrt() / bnorm;
        history.push(rel);
        if rel <= tol {
            return Ok(CgOutcome { iterations: it, residual: rel });
        }
        precond(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for k in 0..n {
            p[k] = z[k] + beta * p[k];
        }
    }
    Err(SolveError::NotConverged {
        iterations: history.len() - 1,
        residual: rel,
        tol,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense_1d(bc: Bc1d, n: usize, h: f64) -> Vec<f64> {
        let op = SeparableOperator::new(n, 1, bc, Bc1d::NeumannCells, h, 1.0);
        let mut m = vec![0.0; n * n];
        let mut e = vec![0.0; n];
        let mut col = vec![0.0; n];
        for k in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[k] = 1.0;
            op.apply(&e, &mut col);
            for i in 0..n {
                m[i * n + k] = col[i];
            }
        }
        m
    }

    #[test]
    fn eigenpairs_diagonalize_the_stencils() {
        for bc in [Bc1d::NeumannCells, Bc1d::DirichletNodes, Bc1d::DirichletCells] {
            let (n, h) = (9, 0.3);
            let basis = Basis1d::new(bc, n, h);
            let t = dense_1d(bc, n, h);
            for k in 0..n {
                for i in 0..n {
                    let tv: f64 = (0..n).map(|l| t[i * n + l] * basis.q[l * n + k]).sum();
                    let lv = basis.lambda[k] * basis.q[i * n + k];
                    assert!((tv - lv).abs() < 1e-10, "{bc:?} k={k} i={i}");
                }
                for l in 0..n {
                    let d: f64 = (0..n).map(|i| basis.q[i * n + k] * basis.q[i * n + l]).sum();
                    let want = if k == l { 1.0 } else { 0.0 };
                    assert!((d - want).abs() < 1e-12, "{bc:?} orthonormality");
                }
            }
        }
    }

    #[test]
    fn shifted_solve_inverts_operator() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (bcx, bcy) in [
            (Bc1d::NeumannCells, Bc1d::NeumannCells),
            (Bc1d::DirichletNodes, Bc1d::DirichletCells),
            (Bc1d::DirichletCells, Bc1d::DirichletNodes),
        ] {
            let op = SeparableOperator::new(13, 7, bcx, bcy, 0.1, 0.2);
            let b: Vec<f64> = (0..op.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut x = vec![0.0; op.len()];
            op.solve_shifted(&b, 1.0, 0.05, &mut x);
            let mut ax = vec![0.0; op.len()];
            op.apply(&x, &mut ax);
            for k in 0..b.len() {
                assert!((x[k] - 0.05 * ax[k] - b[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pure_neumann_solve_is_mean_zero() {
        let op = SeparableOperator::new(16, 12, Bc1d::NeumannCells, Bc1d::NeumannCells, 1.0 / 16.0, 1.0 / 12.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut b: Vec<f64> = (0..op.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mean = b.iter().sum::<f64>() / b.len() as f64;
        b.iter_mut().for_each(|v| *v -= mean);
        let mut x = vec![0.0; op.len()];
        op.solve_shifted(&b, 0.0, -1.0, &mut x);
        assert!(x.iter().sum::<f64>().abs() < 1e-10);
        let mut ax = vec![0.0; op.len()];
        op.apply(&x, &mut ax);
        for k in 0..b.len() {
            assert!((ax[k] - b[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn pcg_with_identity_preconditioner_converges() {
        let op = SeparableOperator::new(10, 10, Bc1d::DirichletNodes, Bc1d::DirichletNodes, 0.1, 0.1);
        let b: Vec<f64> = (0..op.len()).map(|k| (k as f64 * 0.37).sin()).collect();
        let mut x = vec![0.0; op.len()];
        let neg = |v: &[f64], out: &mut [f64]| {
            op.apply(v, out);
            out.iter_mut().for_each(|o| *o = -*o);
        };
        let res = pcg(neg, |r, z| z.copy_from_slice(r), &b, &mut x, 1e-10, 500).unwrap();
        assert!(res.residual <= 1e-10);
        assert!(res.iterations > 1);
    }

    #[test]
    fn pcg_reports_history_on_failure() {
        let op = SeparableOperator::new(16, 16, Bc1d::DirichletNodes, Bc1d::DirichletNodes, 0.1, 0.1);
        let b = vec![1.0; op.len()];
        let mut x = vec![0.0; op.len()];
        let neg = |v: &[f64], out: &mut [f64]| {
            op.apply(v, out);
            out.iter_mut().for_each(|o| *o = -*o);
        };
        let err = pcg(neg, |r, z| z.copy_from_slice(r), &b, &mut x, 1e-14, 2).unwrap_err();
        let SolveError::NotConverged { history, iterations, .. } = err;
        assert_eq!(iterations, 2);
        assert_eq!(history.len(), 3);
    }
}
