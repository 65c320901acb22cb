//! Plain tensor math, shared by the autodiff tape (forward values) and by
//! the inference-only paths (momentum teacher, feature extraction). All
//! kernels are sequential with a fixed accumulation order, so results are
//! bitwise reproducible.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Dot product with eight-lane unrolling. The lane structure depends only on
/// the slice length, so the summation order is fixed.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::ZERO; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (a8, b8) = (&a[i * 8..i * 8 + 8], &b[i * 8..i * 8 + 8]);
        for l in 0..8 {
            acc[l] = a8[l].mul_add(b8[l], acc[l]);
        }
    }
    let mut tail = T::ZERO;
    for i in chunks * 8..a.len() {
        tail = a[i].mul_add(b[i], tail);
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `a[m,k] @ b[k,n]`; row-of-output accumulation so the inner loop runs over
/// contiguous memory in both operands.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, ka) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if ka != kb {
        return Err(Error::shape(
            "matmul",
            format!("lhs {:?} vs rhs {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![T::ZERO; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for k in 0..ka {
            let av = ad[i * ka + k];
            let brow = &bd[k * n..(k + 1) * n];
            for j in 0..n {
                orow[j] = av.mul_add(brow[j], orow[j]);
            }
        }
    }
    Tensor::from_vec(vec![m, n], out)
}

/// `a[m,k] @ b[n,k]ᵀ` — both operands row-major, so each output element is a
/// dot of two contiguous rows.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, ka) = a.dims2()?;
    let (n, kb) = b.dims2()?;
    if ka != kb {
        return Err(Error::shape(
            "matmul_nt",
            format!("lhs {:?} vs rhs-transposed {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![T::ZERO; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let arow = &ad[i * ka..(i + 1) * ka];
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            orow[j] = dot(arow, &bd[j * kb..(j + 1) * kb]);
        }
    }
    Tensor::from_vec(vec![m, n], out)
}

/// `a[m,k]ᵀ @ b[m,n]`, the shape that shows up in weight gradients.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ma, k) = a.dims2()?;
    let (mb, n) = b.dims2()?;
    if ma != mb {
        return Err(Error::shape(
            "matmul_tn",
            format!("lhs-transposed {:?} vs rhs {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![T::ZERO; k * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..ma {
        let brow = &bd[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = ad[i * k + kk];
            let orow = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] = av.mul_add(brow[j], orow[j]);
            }
        }
    }
    Tensor::from_vec(vec![k, n], out)
}

fn zip_same_shape<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.shape().to_vec(), data)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_same_shape("add", a, b, |x, y| x + y)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_same_shape("sub", a, b, |x, y| x - y)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_same_shape("mul", a, b, |x, y| x * y)
}

/// Adds a length-n row vector to every row of an `[m,n]` matrix.
pub fn add_row<T: Scalar>(a: &Tensor<T>, row: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = a.dims2()?;
    if row.numel() != n {
        return Err(Error::shape(
            "add_row",
            format!("matrix {:?} vs row {:?}", a.shape(), row.shape()),
        ));
    }
    let mut out = a.data().to_vec();
    let r = row.data();
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] += r[j];
        }
    }
    Tensor::from_vec(vec![m, n], out)
}

pub fn scale<T: Scalar>(a: &Tensor<T>, c: T) -> Tensor<T> {
    a.map(|v| v * c)
}

/// Row-wise softmax at temperature `temp` with max subtraction, so inputs of
/// any magnitude stay finite. Rows sum to one.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>, temp: T) -> Result<Tensor<T>> {
    if temp.to_f64() <= 0.0 {
        return Err(Error::Param(format!("softmax temperature {} <= 0", temp)));
    }
    let (m, n) = x.dims2()?;
    if n == 0 {
        return Err(Error::shape("softmax", "zero-width rows"));
    }
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        let row = x.row(i);
        let mx = row.iter().fold(row[0], |a, &b| a.maxv(b));
        let orow = &mut out[i * n..(i + 1) * n];
        let mut sum = T::ZERO;
        for j in 0..n {
            let e = ((row[j] - mx) / temp).exp();
            orow[j] = e;
            sum += e;
        }
        for v in orow.iter_mut() {
            *v = *v / sum;
        }
    }
    Tensor::from_vec(vec![m, n], out)
}

/// Row-wise log-softmax: `(x - max)/t - ln Σ exp((x-max)/t)`. Kept separate
/// from `softmax_rows` because the log of a tiny probability is much more
/// accurate computed this way.
pub fn log_softmax_rows<T: Scalar>(x: &Tensor<T>, temp: T) -> Result<Tensor<T>> {
    if temp.to_f64() <= 0.0 {
        return Err(Error::Param(format!("softmax temperature {} <= 0", temp)));
    }
    let (m, n) = x.dims2()?;
    if n == 0 {
        return Err(Error::shape("log_softmax", "zero-width rows"));
    }
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        let row = x.row(i);
        let mx = row.iter().fold(row[0], |a, &b| a.maxv(b));
        let orow = &mut out[i * n..(i + 1) * n];
        let mut sum = T::ZERO;
        for j in 0..n {
            let z = (row[j] - mx) / temp;
            orow[j] = z;
            sum += z.exp();
        }
        let lse = sum.ln();
        for v in orow.iter_mut() {
            *v = *v - lse;
        }
    }
    Tensor::from_vec(vec![m, n], out)
}

/// Layer norm over the last axis with learned gain/bias. Population variance
/// (divide by n), then `(x-μ)/√(σ²+eps) * gain + bias`.
pub fn layer_norm_rows<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let (m, n) = x.dims2()?;
    if gain.numel() != n || bias.numel() != n {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "x {:?} vs gain {:?} / bias {:?}",
                x.shape(),
                gain.shape(),
                bias.shape()
            ),
        ));
    }
    let (g, b) = (gain.data(), bias.data());
    let inv_n = T::ONE / T::from_f64(n as f64);
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        let row = x.row(i);
        let mut mean = T::ZERO;
        for &v in row {
            mean += v;
        }
        mean = mean * inv_n;
        let mut var = T::ZERO;
        for &v in row {
            let d = v - mean;
            var = d.mul_add(d, var);
        }
        var = var * inv_n;
        let inv = T::ONE / (var + eps).sqrt();
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let xn = (row[j] - mean) * inv;
            orow[j] = xn.mul_add(g[j], b[j]);
        }
    }
    Tensor::from_vec(vec![m, n], out)
}

/// Exact (erf-based) GELU: `x * Φ(x)`.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    x.map(|v| v * (half * (T::ONE + (v * inv_sqrt2).erf())))
}

/// Rows scaled to unit L2 norm; norms below `eps` divide by `eps` instead,
/// so the zero row maps to the zero row.
pub fn l2_normalize_rows<T: Scalar>(x: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let (m, n) = x.dims2()?;
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        let row = x.row(i);
        let norm = dot(row, row).sqrt().maxv(eps);
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            orow[j] = row[j] / norm;
        }
    }
    Tensor::from_vec(vec![m, n], out)
}

pub fn narrow_cols<T: Scalar>(a: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (m, n) = a.dims2()?;
    if start + len > n {
        return Err(Error::shape(
            "narrow_cols",
            format!("cols {}..{} of {:?}", start, start + len, a.shape()),
        ));
    }
    let mut out = Vec::with_capacity(m * len);
    for i in 0..m {
        out.extend_from_slice(&a.row(i)[start..start + len]);
    }
    Tensor::from_vec(vec![m, len], out)
}

pub fn narrow_rows<T: Scalar>(a: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (m, n) = a.dims2()?;
    if start + len > m {
        return Err(Error::shape(
            "narrow_rows",
            format!("rows {}..{} of {:?}", start, start + len, a.shape()),
        ));
    }
    let out = a.data()[start * n..(start + len) * n].to_vec();
    Tensor::from_vec(vec![len, n], out)
}

pub fn concat_cols<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(Error::Param("concat_cols of zero tensors".into()));
    }
    let m = parts[0].dims2()?.0;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (pm, pn) = p.dims2()?;
        if pm != m {
            return Err(Error::shape(
                "concat_cols",
                format!("row counts differ: {:?} vs {:?}", parts[0].shape(), p.shape()),
            ));
        }
        widths.push(pn);
    }
    let n: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        for p in parts {
            out.extend_from_slice(p.row(i));
        }
    }
    Tensor::from_vec(vec![m, n], out)
}

pub fn concat_rows<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(Error::Param("concat_rows of zero tensors".into()));
    }
    let n = parts[0].dims2()?.1;
    let mut m = 0;
    for p in parts {
        let (pm, pn) = p.dims2()?;
        if pn != n {
            return Err(Error::shape(
                "concat_rows",
                format!("col counts differ: {:?} vs {:?}", parts[0].shape(), p.shape()),
            ));
        }
        m += pm;
    }
    let mut out = Vec::with_capacity(m * n);
    for p in parts {
        out.extend_from_slice(p.data());
    }
    Tensor::from_vec(vec![m, n], out)
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = a.dims2()?;
    let mut out = vec![T::ZERO; m * n];
    let ad = a.data();
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = ad[i * n + j];
        }
    }
    Tensor::from_vec(vec![n, m], out)
}

pub fn sum_all<T: Scalar>(a: &Tensor<T>) -> T {
    let mut s = T::ZERO;
    for &v in a.data() {
        s += v;
    }
    s
}
