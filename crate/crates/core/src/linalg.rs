//! Cyclic Jacobi eigendecomposition for small symmetric matrices.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const JACOBI_TOL: f64 = 1e-12;
pub const JACOBI_MAX_SWEEPS: usize = 100;

/// `m = vectors * diag(values) * vectors^T`, values sorted descending.
#[derive(Clone, Debug)]
pub struct SymEigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

fn off_diagonal_sq(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut s = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            s += a[(i, j)] * a[(i, j)];
        }
    }
    s
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations. Stops when the
/// off-diagonal Frobenius norm falls below `JACOBI_TOL` times the matrix norm.
pub fn sym_eigen(m: &DMatrix<f64>) -> Result<SymEigen> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::Argument(format!("matrix is {}x{}, not square", n, m.ncols())));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite entry in matrix".into()));
    }
    let mut a = m.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    let scale = m.norm();
    let mut converged = scale == 0.0;
    for _ in 0..JACOBI_MAX_SWEEPS {
        if converged {
            break;
        }
        let off = off_diagonal_sq(&a).sqrt();
        if off <= JACOBI_TOL * scale {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                a[(p, p)] -= t * apq;
                a[(q, q)] += t * apq;
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for r in 0..n {
                    if r != p && r != q {
                        let g = a[(r, p)];
                        let h = a[(r, q)];
                        a[(r, p)] = c * g - s * h;
                        a[(p, r)] = a[(r, p)];
                        a[(r, q)] = s * g + c * h;
                        a[(q, r)] = a[(r, q)];
                    }
                    let g = v[(r, p)];
                    let h = v[(r, q)];
                    v[(r, p)] = c * g - s * h;
                    v[(r, q)] = s * g + c * h;
                }
            }
        }
    }
    if !converged && off_diagonal_sq(&a).sqrt() > JACOBI_TOL * scale {
        let diag: Vec<f64> = (0..n).map(|i| a[(i, i)].abs()).collect();
        let max = diag.iter().cloned().fold(0.0, f64::max);
        let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
        return Err(Error::Numeric(format!(
            "Jacobi eigensolver did not converge in {JACOBI_MAX_SWEEPS} sweeps \
             (off-diagonal norm {:.3e}, |lambda| range [{min:.3e}, {max:.3e}])",
            off_diagonal_sq(&a).sqrt()
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]).then(i.cmp(&j)));
    let values = DVector::from_iterator(n, order.iter().map(|&i| a[(i, i)]));
    let vectors = DMatrix::from_fn(n, n, |r, k| v[(r, order[k])]);
    Ok(SymEigen { values, vectors })
}

/// `Q diag(f(λ)) Q^T`.
pub fn reconstruct(eig: &SymEigen, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let q = &eig.vectors;
    let mut scaled = q.clone();
    for (k, &lam) in eig.values.iter().enumerate() {
        let fk = f(lam);
        scaled.column_mut(k).scale_mut(fk);
    }
    &scaled * q.transpose()
}
