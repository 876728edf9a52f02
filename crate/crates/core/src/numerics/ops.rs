//! Forward kernels shared by the eager API and the gradient tape.
//!
//! Every reduction runs in a fixed order so results are bitwise reproducible
//! on a given machine. Matrix products go through `matrixmultiply`, which
//! picks its SIMD kernel once per process.

use crate::error::{shape_err, Error, Result};

use super::scalar::Scalar;
use super::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const ROPE_BASE: f64 = 10_000.0;

fn check_finite<T: Scalar>(t: Tensor<T>, op: &str) -> Result<Tensor<T>> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::Numerical(format!("{op} produced a non-finite value")))
    }
}

/// Row-major `m×n` product of an `m×k` operand `a` and a `k×n` operand
/// `b`, each read through `(row, column)` element strides.
fn gemm<T: Scalar>(
    (m, k, n): (usize, usize, usize),
    a: &[T],
    sa: (usize, usize),
    b: &[T],
    sb: (usize, usize),
) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    let last = |(r, c): (usize, usize), rows: usize, cols: usize| (rows - 1) * r + (cols - 1) * c;
    assert!(last(sa, m, k) < a.len() && last(sb, k, n) < b.len());
    let st = |(r, c): (usize, usize)| (r as isize, c as isize);
    // SAFETY: the assert above keeps every strided access in bounds, and
    // `out` holds exactly m×n elements in row-major order.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            a.as_ptr(),
            st(sa),
            b.as_ptr(),
            st(sb),
            out.as_mut_ptr(),
            (n as isize, 1),
        );
    }
    out
}

/// `a · b`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(shape_err!("matmul {m}x{k} by {k2}x{n}"));
    }
    let out = gemm((m, k, n), a.data(), (k, 1), b.data(), (n, 1));
    check_finite(Tensor::new(&[m, n], out)?, "matmul")
}

/// `a · bᵀ`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(shape_err!("matmul_nt inner dims {k} vs {k2}"));
    }
    let out = gemm((m, k, n), a.data(), (k, 1), b.data(), (1, k));
    check_finite(Tensor::new(&[m, n], out)?, "matmul_nt")
}

/// `aᵀ · b`.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (m2, n) = b.dims2()?;
    if m != m2 {
        return Err(shape_err!("matmul_tn outer dims {m} vs {m2}"));
    }
    let out = gemm((k, m, n), a.data(), (1, k), b.data(), (n, 1));
    check_finite(Tensor::new(&[k, n], out)?, "matmul_tn")
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = x.dims2()?;
    if !x.is_finite() {
        return Err(Error::Numerical("softmax input is not finite".into()));
    }
    let mut out = x.data().to_vec();
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        let mx = row.iter().copied().fold(row[0], T::max);
        let mut total = T::ZERO;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::new(&[r, c], out)
}

pub fn frobenius<T: Scalar>(x: &Tensor<T>) -> f64 {
    let mut acc = 0.0f64;
    for &v in x.data() {
        let v = v.to_f64();
        acc += v * v;
    }
    acc.sqrt()
}

/// Adds a length-`c` bias to every row of an `r×c` matrix.
pub fn add_bias_rows<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = x.dims2()?;
    if bias.len() != c {
        return Err(shape_err!("bias of length {} for {} columns", bias.len(), c));
    }
    let mut out = x.data().to_vec();
    let b = bias.data();
    for i in 0..r {
        for (o, &bv) in out[i * c..(i + 1) * c].iter_mut().zip(b) {
            *o += bv;
        }
    }
    check_finite(Tensor::new(&[r, c], out)?, "bias add")
}

/// `x ⊙ w[:, col]`: scales row `i` of `x` by `w[i, col]`.
pub fn col_scale<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, col: usize) -> Result<Tensor<T>> {
    let (r, c) = x.dims2()?;
    let (wr, wc) = w.dims2()?;
    if wr != r || col >= wc {
        return Err(shape_err!(
            "column scale of {r}x{c} by column {col} of {wr}x{wc}"
        ));
    }
    let mut out = x.data().to_vec();
    for i in 0..r {
        let s = w.at(i, col);
        for o in &mut out[i * c..(i + 1) * c] {
            *o *= s;
        }
    }
    Tensor::new(&[r, c], out)
}

/// Mean over rows, giving a `1×c` matrix.
pub fn mean_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = x.dims2()?;
    let mut out = vec![T::ZERO; c];
    for i in 0..r {
        for (o, &v) in out.iter_mut().zip(x.row(i)) {
            *o += v;
        }
    }
    let inv = T::from_f64(1.0 / r as f64);
    for o in &mut out {
        *o *= inv;
    }
    Tensor::new(&[1, c], out)
}

/// Running mean down the rows: row `i` of the result averages rows `0..=i`.
pub fn prefix_mean_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = x.dims2()?;
    let mut acc = vec![T::ZERO; c];
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let inv = T::from_f64(1.0 / (i + 1) as f64);
        for (a, &v) in acc.iter_mut().zip(x.row(i)) {
            *a += v;
        }
        out.extend(acc.iter().map(|&a| a * inv));
    }
    Tensor::new(&[r, c], out)
}

/// Normalized rows and their reciprocal standard deviations.
pub struct LayerNormCache<T> {
    pub xhat: Tensor<T>,
    pub rstd: Vec<T>,
}

pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let (r, c) = x.dims2()?;
    if gain.len() != c || bias.len() != c {
        return Err(shape_err!("layer norm params do not match width {c}"));
    }
    let eps = T::from_f64(LAYER_NORM_EPS);
    let inv_c = T::from_f64(1.0 / c as f64);
    let mut xhat = vec![T::ZERO; r * c];
    let mut out = vec![T::ZERO; r * c];
    let mut rstd = Vec::with_capacity(r);
    let (g, b) = (gain.data(), bias.data());
    for i in 0..r {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<T>() * inv_c;
        let mut var = T::ZERO;
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var *= inv_c;
        let rs = T::ONE / (var + eps).sqrt();
        rstd.push(rs);
        for j in 0..c {
            let xh = (row[j] - mean) * rs;
            xhat[i * c + j] = xh;
            out[i * c + j] = xh * g[j] + b[j];
        }
    }
    let out = check_finite(Tensor::new(&[r, c], out)?, "layer norm")?;
    Ok((
        out,
        LayerNormCache {
            xhat: Tensor::new(&[r, c], xhat)?,
            rstd,
        },
    ))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::ONE + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let du = c * (T::ONE + three * a * x * x);
    half * (T::ONE + th) + half * x * (T::ONE - th * th) * du
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

/// Rotary position embedding over the full head dimension, rotate-half
/// pairing `(j, j + hd/2)` within each head. `inverse` rotates by `-θ`,
/// which is also the adjoint used in the backward pass.
pub fn rope<T: Scalar>(x: &Tensor<T>, n_heads: usize, inverse: bool) -> Result<Tensor<T>> {
    let (l, d) = x.dims2()?;
    if n_heads == 0 || d % n_heads != 0 {
        return Err(shape_err!("width {d} not divisible by {n_heads} heads"));
    }
    let hd = d / n_heads;
    if hd % 2 != 0 {
        return Err(shape_err!("rotary embedding needs an even head dim, got {hd}"));
    }
    let half = hd / 2;
    let mut out = x.data().to_vec();
    for pos in 0..l {
        for j in 0..half {
            let freq = ROPE_BASE.powf(-2.0 * j as f64 / hd as f64);
            let theta = pos as f64 * freq;
            let (s, c) = theta.sin_cos();
            let s = if inverse { -s } else { s };
            let (s, c) = (T::from_f64(s), T::from_f64(c));
            for h in 0..n_heads {
                let i1 = pos * d + h * hd + j;
                let i2 = i1 + half;
                let (a, b) = (x.data()[i1], x.data()[i2]);
                out[i1] = a * c - b * s;
                out[i2] = b * c + a * s;
            }
        }
    }
    Tensor::new(&[l, d], out)
}

/// Multi-head causal attention on already-projected `q`, `k`, `v`.
/// Returns the concatenated head outputs and per-head probabilities.
pub fn causal_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    n_heads: usize,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let (l, d) = q.dims2()?;
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(shape_err!("attention q/k/v shapes differ"));
    }
    if n_heads == 0 || d % n_heads != 0 {
        return Err(shape_err!("width {d} not divisible by {n_heads} heads"));
    }
    let hd = d / n_heads;
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![T::ZERO; l * d];
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let off = h * hd;
        let mut p = vec![T::ZERO; l * l];
        for i in 0..l {
            let qi = &qd[i * d + off..i * d + off + hd];
            let prow = &mut p[i * l..(i + 1) * l];
            let mut mx = T::from_f64(f64::NEG_INFINITY);
            for j in 0..=i {
                let kj = &kd[j * d + off..j * d + off + hd];
                let mut s = T::ZERO;
                for (&a, &b) in qi.iter().zip(kj) {
                    s += a * b;
                }
                s *= scale;
                prow[j] = s;
                mx = mx.max(s);
            }
            let mut total = T::ZERO;
            for pj in prow.iter_mut().take(i + 1) {
                *pj = (*pj - mx).exp();
                total += *pj;
            }
            for pj in prow.iter_mut().take(i + 1) {
                *pj /= total;
            }
            let orow = &mut out[i * d + off..i * d + off + hd];
            for j in 0..=i {
                let pij = prow[j];
                let vj = &vd[j * d + off..j * d + off + hd];
                for (o, &vv) in orow.iter_mut().zip(vj) {
                    *o += pij * vv;
                }
            }
        }
        probs.push(Tensor::new(&[l, l], p)?);
    }
    let out = check_finite(Tensor::new(&[l, d], out)?, "attention")?;
    Ok((out, probs))
}

/// Mean next-token cross-entropy in nats, plus the row softmax.
pub fn cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
) -> Result<(T, Tensor<T>)> {
    let (r, c) = logits.dims2()?;
    if targets.len() != r {
        return Err(shape_err!("{} targets for {} rows", targets.len(), r));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::Data(format!("target {bad} outside vocab {c}")));
    }
    let probs = softmax_rows(logits)?;
    let mut loss = 0.0f64;
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let mx = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v.to_f64() - mx).exp()).sum::<f64>().ln() + mx;
        loss += lse - row[t].to_f64();
    }
    let loss = T::from_f64(loss / r as f64);
    if !loss.is_finite() {
        return Err(Error::Numerical("cross-entropy is not finite".into()));
    }
    Ok((loss, probs))
}
