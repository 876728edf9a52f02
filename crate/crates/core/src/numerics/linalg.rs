use crate::error::{shape_err, Result};

use super::scalar::Scalar;
use super::tensor::Tensor;

/// Off-diagonal tolerance for the cyclic Jacobi sweep, relative to the
/// matrix Frobenius norm.
pub const JACOBI_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 100;

/// Eigenvalues of a symmetric `n×n` matrix (row-major, f64) by cyclic Jacobi
/// rotations. Returned in descending order.
pub fn symmetric_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return vec![0.0; n];
    }
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += 2.0 * m[p * n + q] * m[p * n + q];
            }
        }
        if off.sqrt() <= JACOBI_TOL * norm {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    eig
}

/// Columns of the matrix oriented so that there are no more columns than
/// rows, stored column-major.
fn tall_columns<T: Scalar>(x: &Tensor<T>) -> Result<(Vec<Vec<f64>>, usize)> {
    let (l, d) = x.dims2()?;
    let xd = x.to_f64_vec();
    if d <= l {
        Ok(((0..d).map(|j| (0..l).map(|i| xd[i * d + j]).collect()).collect(), l))
    } else {
        Ok(((0..l).map(|i| xd[i * d..(i + 1) * d].to_vec()).collect(), d))
    }
}

/// Top `top_k` singular values, descending, by one-sided Jacobi rotations
/// on the columns. Works on the matrix itself rather than its Gram matrix,
/// so small singular values keep full relative accuracy.
pub fn singular_values<T: Scalar>(x: &Tensor<T>, top_k: usize) -> Result<Vec<f64>> {
    let (l, d) = x.dims2()?;
    if l == 0 || d == 0 {
        return Err(shape_err!("empty matrix"));
    }
    if top_k == 0 || top_k > l.min(d) {
        return Err(shape_err!("top_k {top_k} outside 1..={}", l.min(d)));
    }
    let (mut cols, _) = tall_columns(x)?;
    let n = cols.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut norms: Vec<f64> = cols.iter().map(|c| dot(c, c)).collect();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta) = (norms[p], norms[q]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let gamma = dot(&cols[p], &cols[q]);
                if gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(q);
                for (a, b) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let (u, v) = (*a, *b);
                    *a = c * u - s * v;
                    *b = s * u + c * v;
                }
                norms[p] = dot(&cols[p], &cols[p]);
                norms[q] = dot(&cols[q], &cols[q]);
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = norms.iter().map(|v| v.sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv.truncate(top_k);
    Ok(sv)
}
