//! Symmetric eigendecomposition by cyclic Jacobi rotations.
//!
//! Deterministic and foolproof for real symmetric matrices; chosen over QR
//! iteration for simplicity. Iteration cap 100 sweeps, convergence when the
//! off-diagonal Frobenius norm falls below `1e-12 * ||A||_F`. Eigenpairs are
//! returned in descending eigenvalue order, and each eigenvector's sign is
//! normalized so its largest-magnitude entry is positive, making downstream
//! rotations reproducible.

use crate::error::{Error, Result};
use crate::mat::Mat;

const MAX_SWEEPS: usize = 100;
const OFFDIAG_TOL: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-10;

/// Eigendecomposition of a symmetric matrix.
///
/// Returns `(eigvals, eigvecs)` with eigenvalues sorted descending and the
/// columns of `eigvecs` holding the matching orthonormal eigenvectors.
pub fn jacobi_eigh(a: &Mat) -> Result<(Vec<f64>, Mat)> {
    if a.rows() != a.cols() {
        return Err(Error::dim("jacobi_eigh", "square matrix", format!("{}x{}", a.rows(), a.cols())));
    }
    let n = a.rows();
    if n == 0 {
        return Err(Error::arg("jacobi_eigh", "empty matrix"));
    }

    let scale = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| a.at(i, j).abs())
        .fold(0.0f64, f64::max);
    let mut max_asym = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            max_asym = max_asym.max((a.at(i, j) - a.at(j, i)).abs());
        }
    }
    if max_asym > SYMMETRY_TOL * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::NotSymmetric { max_asymmetry: max_asym });
    }

    // work on a symmetrized row-major copy
    let mut m = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = 0.5 * (a.at(i, j) + a.at(j, i));
        }
    }
    let norm_a = m.iter().map(|v| v * v).sum::<f64>().sqrt();

    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let off_frobenius = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                s += 2.0 * m[p * n + q] * m[p * n + q];
            }
        }
        s.sqrt()
    };

    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < MAX_SWEEPS {
        if off_frobenius(&m) <= OFFDIAG_TOL * norm_a {
            converged = true;
            break;
        }
        sweeps += 1;
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let diff = aqq - app;
                let t = if apq.abs() * 100.0 + diff.abs() == diff.abs() {
                    // rotation angle is tiny; linearized tangent avoids overflow
                    apq / diff
                } else {
                    let theta = 0.5 * diff / apq;
                    let mut t = 1.0 / (theta.abs() + (1.0 + theta * theta).sqrt());
                    if theta < 0.0 {
                        t = -t;
                    }
                    t
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                let tau = s / (1.0 + c);
                let h = t * apq;

                m[p * n + p] = app - h;
                m[q * n + q] = aqq + h;
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
                for j in 0..n {
                    if j == p || j == q {
                        continue;
                    }
                    let g = m[j * n + p];
                    let hh = m[j * n + q];
                    let gp = g - s * (hh + g * tau);
                    let gq = hh + s * (g - hh * tau);
                    m[j * n + p] = gp;
                    m[p * n + j] = gp;
                    m[j * n + q] = gq;
                    m[q * n + j] = gq;
                }
                for j in 0..n {
                    let g = v[j * n + p];
                    let hh = v[j * n + q];
                    v[j * n + p] = g - s * (hh + g * tau);
                    v[j * n + q] = hh + s * (g - hh * tau);
                }
            }
        }
    }
    if !converged && off_frobenius(&m) > OFFDIAG_TOL * norm_a {
        return Err(Error::NoConvergence {
            residual: off_frobenius(&m),
            sweeps,
        });
    }

    // sort eigenpairs descending; stable so ties keep diagonal order
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]));

    let mut values = Vec::with_capacity(n);
    let mut vectors = Mat::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        values.push(m[src * n + src]);
        // sign convention: largest-magnitude entry positive (first such
        // entry wins on exact magnitude ties)
        let mut lead = 0;
        let mut lead_abs = -1.0f64;
        for i in 0..n {
            let a = v[i * n + src].abs();
            if a > lead_abs {
                lead_abs = a;
                lead = i;
            }
        }
        let flip = if v[lead * n + src] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            vectors.set(i, dst, flip * v[i * n + src]);
        }
    }
    Ok((values, vectors))
}
