//! Restarted GMRES with right preconditioning and an ILU(0) preconditioner.

use crate::sparse::{CscMatrix, csc_matvec};

/// Approximate inverse applied as `z = P^{-1} r`.
pub trait Preconditioner {
    fn apply(&self, r: &[f64]) -> Vec<f64>;
}

/// Identity preconditioner.
pub struct NoPreconditioner;

impl Preconditioner for NoPreconditioner {
    fn apply(&self, r: &[f64]) -> Vec<f64> {
        r.to_vec()
    }
}

/// Incomplete LU factorization with the sparsity pattern of `A` (row storage).
#[derive(Debug, Clone)]
pub struct Ilu0 {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
    diag: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum IluError {
    MissingDiagonal(usize),
    ZeroPivot(usize),
}

impl Ilu0 {
    pub fn new(a: &CscMatrix) -> Result<Self, IluError> {
        // The CSC form of A^T is the CSR form of A.
        let at = a.as_ref().transpose().to_col_major().expect("transpose");
        let n = a.nrows();
        let row_ptr = at.symbolic().col_ptr().to_vec();
        let col_idx = at.symbolic().row_idx().to_vec();
        let mut vals = at.val().to_vec();
        let mut diag = vec![usize::MAX; n];
        for i in 0..n {
            for k in row_ptr[i]..row_ptr[i + 1] {
                if col_idx[k] == i {
                    diag[i] = k;
                }
            }
            if diag[i] == usize::MAX {
                return Err(IluError::MissingDiagonal(i));
            }
        }
        let mut pos = vec![usize::MAX; n];
        for i in 0..n {
            for k in row_ptr[i]..row_ptr[i + 1] {
                pos[col_idx[k]] = k;
            }
            for k in row_ptr[i]..row_ptr[i + 1] {
                let j = col_idx[k];
                if j >= i {
                    break;
                }
                let pivot = vals[diag[j]];
                if pivot == 0.0 {
                    return Err(IluError::ZeroPivot(j));
                }
                let factor = vals[k] / pivot;
                vals[k] = factor;
                for kk in diag[j] + 1..row_ptr[j + 1] {
                    let p = pos[col_idx[kk]];
                    if p != usize::MAX {
                        vals[p] -= factor * vals[kk];
                    }
                }
            }
            for k in row_ptr[i]..row_ptr[i + 1] {
                pos[col_idx[k]] = usize::MAX;
            }
            if vals[diag[i]] == 0.0 {
                return Err(IluError::ZeroPivot(i));
            }
        }
        Ok(Self { n, row_ptr, col_idx, vals, diag })
    }
}

impl Preconditioner for Ilu0 {
    fn apply(&self, r: &[f64]) -> Vec<f64> {
        let mut z = r.to_vec();
        for i in 0..self.n {
            let mut s = z[i];
            for k in self.row_ptr[i]..self.diag[i] {
                s -= self.vals[k] * z[self.col_idx[k]];
            }
            z[i] = s;
        }
        for i in (0..self.n).rev() {
            let mut s = z[i];
            for k in self.diag[i] + 1..self.row_ptr[i + 1] {
                s -= self.vals[k] * z[self.col_idx[k]];
            }
            z[i] = s / self.vals[self.diag[i]];
        }
        z
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmresOutcome {
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Solves `A x = b` starting from `x`, stopping when `|b - A x| <= rtol |b|`.
pub fn gmres(
    a: &CscMatrix,
    b: &[f64],
    x: &mut [f64],
    precond: &dyn Preconditioner,
    rtol: f64,
    restart: usize,
    max_iter: usize,
) -> GmresOutcome {
    let bnorm = norm(b);
    if bnorm == 0.0 {
        x.fill(0.0);
        return GmresOutcome { iterations: 0, residual: 0.0, converged: true };
    }
    let target = rtol * bnorm;
    let m = restart.max(1);
    let mut total = 0;
    loop {
        let ax = csc_matvec(a, x);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(b, ax)| b - ax).collect();
        let beta = norm(&r);
        if beta <= target || !beta.is_finite() || total >= max_iter {
            return GmresOutcome { iterations: total, residual: beta / bnorm, converged: beta <= target };
        }
        let mut v: Vec<Vec<f64>> = vec![r.iter().map(|x| x / beta).collect()];
        let mut z: Vec<Vec<f64>> = Vec::with_capacity(m);
        let mut h = vec![vec![0.0; m]; m + 1];
        let (mut cs, mut sn) = (vec![0.0; m], vec![0.0; m]);
        let mut g = vec![0.0; m + 1];
        g[0] = beta;
        let mut k_used = 0;
        for k in 0..m {
            let zk = precond.apply(&v[k]);
            let mut w = csc_matvec(a, &zk);
            z.push(zk);
            for (i, vi) in v.iter().enumerate() {
                let hik: f64 = w.iter().zip(vi).map(|(a, b)| a * b).sum();
                h[i][k] = hik;
                for (wj, vj) in w.iter_mut().zip(vi) {
                    *wj -= hik * vj;
                }
            }
            let wn = norm(&w);
            h[k + 1][k] = wn;
            for i in 0..k {
                let t = cs[i] * h[i][k] + sn[i] * h[i + 1][k];
                h[i + 1][k] = -sn[i] * h[i][k] + cs[i] * h[i + 1][k];
                h[i][k] = t;
            }
            let d = h[k][k].hypot(h[k + 1][k]);
            if d == 0.0 {
                break;
            }
            cs[k] = h[k][k] / d;
            sn[k] = h[k + 1][k] / d;
            h[k][k] = d;
            h[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            k_used = k + 1;
            total += 1;
            if g[k + 1].abs() <= target || total >= max_iter || wn == 0.0 {
                break;
            }
            v.push(w.iter().map(|x| x / wn).collect());
        }
        if k_used == 0 {
            return GmresOutcome { iterations: total, residual: beta / bnorm, converged: false };
        }
        let mut y = vec![0.0; k_used];
        for i in (0..k_used).rev() {
            let s: f64 = (i + 1..k_used).map(|j| h[i][j] * y[j]).sum();
            y[i] = (g[i] - s) / h[i][i];
        }
        for (yi, zi) in y.iter().zip(&z) {
            for (xj, zj) in x.iter_mut().zip(zi) {
                *xj += yi * zj;
            }
        }
        if total >= max_iter {
            let ax = csc_matvec(a, x);
            let res = norm(&b.iter().zip(&ax).map(|(b, ax)| b - ax).collect::<Vec<_>>());
            return GmresOutcome { iterations: total, residual: res / bnorm, converged: res <= target };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::Coo;

    /// Nonsymmetric tridiagonal matrix with positive definite symmetric part.
    fn convection_diffusion_1d(n: usize) -> CscMatrix {
        let mut c = Coo::new(n, n);
        for i in 0..n {
            c.push(i, i, 2.5);
            if i > 0 {
                c.push(i, i - 1, -1.0);
            }
            if i + 1 < n {
                c.push(i, i + 1, -1.2);
            }
        }
        c.to_csc()
    }

    #[test]
    fn ilu_is_exact_for_tridiagonal() {
        let a = convection_diffusion_1d(30);
        let ilu = Ilu0::new(&a).unwrap();
        let x: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
        let b = csc_matvec(&a, &x);
        let y = ilu.apply(&b);
        for (xi, yi) in x.iter().zip(&y) {
            assert!((xi - yi).abs() < 1e-10);
        }
    }

    #[test]
    fn gmres_solves_nonsymmetric_system() {
        let a = convection_diffusion_1d(200);
        let x_true: Vec<f64> = (0..200).map(|i| 1.0 + (i as f64 * 0.1).cos()).collect();
        let b = csc_matvec(&a, &x_true);
        let mut x = vec![0.0; 200];
        let out = gmres(&a, &b, &mut x, &NoPreconditioner, 1e-12, 30, 5000);
        assert!(out.converged, "{out:?}");
        let err = x.iter().zip(&x_true).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-8, "err {err}");
    }
}
