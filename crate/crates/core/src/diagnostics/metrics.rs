use crate::error::{shape_err, Error, Result};
use crate::numerics::{frobenius, singular_values, Scalar, Tensor};

/// Number of normalized singular values reported per stage.
pub const SPECTRUM_LEN: usize = 50;

/// Relative update magnitude `2‖f(h) − h‖ / (‖f(h)‖ + ‖h‖)`, in `[0, 2]`.
pub fn effort<T: Scalar>(input: &Tensor<T>, output: &Tensor<T>) -> Result<f64> {
    if input.shape() != output.shape() {
        return Err(shape_err!(
            "effort input {:?} vs output {:?}",
            input.shape(),
            output.shape()
        ));
    }
    let denom = frobenius(input) + frobenius(output);
    if denom == 0.0 {
        return Err(Error::Data("effort of an all-zero block is undefined".into()));
    }
    let diff: f64 = input
        .data()
        .iter()
        .zip(output.data())
        .map(|(a, b)| {
            let d = b.to_f64() - a.to_f64();
            d * d
        })
        .sum::<f64>()
        .sqrt();
    Ok(2.0 * diff / denom)
}

fn sq_dists(x: &[f64], l: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; l * l];
    for i in 0..l {
        for j in i + 1..l {
            let s: f64 = x[i * d..(i + 1) * d]
                .iter()
                .zip(&x[j * d..(j + 1) * d])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            out[i * l + j] = s;
            out[j * l + i] = s;
        }
    }
    out
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Doubly centered RBF kernel `HKH`, bandwidth `theta ×` the median pairwise
/// row distance.
fn centered_rbf(x: &[f64], l: usize, d: usize, theta: f64) -> Result<Vec<f64>> {
    let sq = sq_dists(x, l, d);
    let mut upper = Vec::with_capacity(l * (l - 1) / 2);
    for i in 0..l {
        for j in i + 1..l {
            upper.push(sq[i * l + j].sqrt());
        }
    }
    let med = median(upper);
    if med == 0.0 {
        return Err(Error::DegenerateInput(
            "median pairwise distance is zero (rows identical)".into(),
        ));
    }
    let sigma = theta * med;
    let mut k: Vec<f64> = sq.iter().map(|s| (-s / (2.0 * sigma * sigma)).exp()).collect();
    let row_means: Vec<f64> = (0..l)
        .map(|i| k[i * l..(i + 1) * l].iter().sum::<f64>() / l as f64)
        .collect();
    let grand = row_means.iter().sum::<f64>() / l as f64;
    // K is symmetric, so column means equal row means.
    for i in 0..l {
        for j in 0..l {
            k[i * l + j] += grand - row_means[i] - row_means[j];
        }
    }
    Ok(k)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Centered kernel alignment with Gaussian kernels on token rows.
pub fn cka_rbf<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, theta: f64) -> Result<f64> {
    let (l, dx) = x.dims2()?;
    let (ly, dy) = y.dims2()?;
    if l != ly {
        return Err(shape_err!("cka row counts differ: {l} vs {ly}"));
    }
    if l < 3 {
        return Err(shape_err!("cka needs at least 3 rows, got {l}"));
    }
    if !(theta > 0.0 && theta.is_finite()) {
        return Err(Error::Range(format!("cka bandwidth factor {theta} must be positive")));
    }
    let kx = centered_rbf(&x.to_f64_vec(), l, dx, theta)?;
    let ky = centered_rbf(&y.to_f64_vec(), l, dy, theta)?;
    let xy = dot(&kx, &ky);
    let xx = dot(&kx, &kx);
    let yy = dot(&ky, &ky);
    if xx == 0.0 || yy == 0.0 {
        return Err(Error::DegenerateInput("centered kernel is zero".into()));
    }
    Ok((xy / (xx * yy).sqrt()).clamp(0.0, 1.0))
}

/// Leading singular values normalized by the largest, at most
/// [`SPECTRUM_LEN`] of them.
pub fn spectrum<T: Scalar>(x: &Tensor<T>) -> Result<Vec<f64>> {
    let (l, d) = x.dims2()?;
    if frobenius(x) == 0.0 {
        return Err(Error::DegenerateInput("spectrum of a zero matrix".into()));
    }
    let k = SPECTRUM_LEN.min(l).min(d);
    let s = singular_values(x, k)?;
    let s0 = s[0];
    Ok(s.iter().map(|v| v / s0).collect())
}
