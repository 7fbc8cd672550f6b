//! Value-level forward kernels shared by the compute record and by callers
//! that only need forward math. Every op validates shapes and rejects
//! non-finite outputs.

use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};

/// Epsilon added to the per-row variance inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-8;

fn finite(t: Tensor, op: &str) -> Result<Tensor> {
    t.check_finite(op)?;
    Ok(t)
}

/// `a * b` with the cache-friendly i-k-j loop order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.rows() {
        return Err(Error::Shape(format!(
            "matmul: {}x{} * {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    finite(Tensor::new(m, n, out)?, "matmul")
}

/// `a * b^T`; `a` is `m x k`, `b` is `n x k`.
pub fn matmul_tb(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.cols() {
        return Err(Error::Shape(format!(
            "matmul_tb: {}x{} * ({}x{})^T",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = a.row_slice(i);
        for j in 0..n {
            let brow = b.row_slice(j);
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            out[i * n + j] = acc;
        }
    }
    finite(Tensor::new(m, n, out)?, "matmul_tb")
}

/// `a^T * b`; `a` is `k x m`, `b` is `k x n`.
pub fn matmul_ta(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rows() != b.rows() {
        return Err(Error::Shape(format!(
            "matmul_ta: ({}x{})^T * {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let (k, m, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = a.row_slice(p);
        let brow = b.row_slice(p);
        for i in 0..m {
            let aip = arow[i];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    finite(Tensor::new(m, n, out)?, "matmul_ta")
}

pub fn transpose(a: &Tensor) -> Tensor {
    let (r, c) = (a.rows(), a.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.get(i, j);
        }
    }
    Tensor::new(c, r, out).expect("transpose preserves validity")
}

fn zip_elementwise(a: &Tensor, b: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "{op}: {}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    finite(Tensor::new(a.rows(), a.cols(), data)?, op)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_elementwise(a, b, "add", |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_elementwise(a, b, "sub", |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_elementwise(a, b, "mul", |x, y| x * y)
}

pub fn div(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_elementwise(a, b, "div", |x, y| x / y)
}

pub fn scale(a: &Tensor, c: f64) -> Result<Tensor> {
    let data = a.data().iter().map(|&x| x * c).collect();
    finite(Tensor::new(a.rows(), a.cols(), data)?, "scale")
}

/// Adds a `1 x c` row vector to every row of `a`.
pub fn add_row(a: &Tensor, row: &Tensor) -> Result<Tensor> {
    if row.rows() != 1 || row.cols() != a.cols() {
        return Err(Error::Shape(format!(
            "add_row: matrix {}x{} with row {}x{}",
            a.rows(),
            a.cols(),
            row.rows(),
            row.cols()
        )));
    }
    let mut data = a.data().to_vec();
    let r = row.data();
    for chunk in data.chunks_mut(a.cols()) {
        for (v, b) in chunk.iter_mut().zip(r) {
            *v += b;
        }
    }
    finite(Tensor::new(a.rows(), a.cols(), data)?, "add_row")
}

/// Elementwise max(x, 0). The subgradient at exactly 0 is defined as 0.
pub fn relu(a: &Tensor) -> Tensor {
    let data = a.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
    Tensor::new(a.rows(), a.cols(), data).expect("relu preserves validity")
}

/// Elementwise square root; negative inputs are a domain violation.
pub fn sqrt_elem(a: &Tensor) -> Result<Tensor> {
    for (i, &v) in a.data().iter().enumerate() {
        if v < 0.0 {
            return Err(Error::NonFinite(format!(
                "sqrt: element {i} is negative ({v})"
            )));
        }
    }
    let data = a.data().iter().map(|&x| x.sqrt()).collect();
    finite(Tensor::new(a.rows(), a.cols(), data)?, "sqrt")
}

/// Row-wise softmax with max subtraction for overflow safety.
pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    let mut data = vec![0.0; a.len()];
    for i in 0..a.rows() {
        let row = a.row_slice(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - m).exp();
            data[i * a.cols() + j] = e;
            sum += e;
        }
        for j in 0..a.cols() {
            data[i * a.cols() + j] /= sum;
        }
    }
    finite(Tensor::new(a.rows(), a.cols(), data)?, "softmax")
}

/// Row-wise `ln(sum(exp(.)))`, max-subtracted; returns an `r x 1` column.
pub fn logsumexp_rows(a: &Tensor) -> Result<Tensor> {
    let mut data = Vec::with_capacity(a.rows());
    for i in 0..a.rows() {
        let row = a.row_slice(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        data.push(m + sum.ln());
    }
    finite(Tensor::new(a.rows(), 1, data)?, "logsumexp")
}

/// Row-wise layer normalization with affine gain/bias (`1 x d` each).
///
/// Uses the population variance and an eps of [`LAYER_NORM_EPS`]. Rows must
/// have at least two columns; a single column is degenerate (zero variance
/// by construction).
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = x.cols();
    if d < 2 {
        return Err(Error::Shape(format!(
            "layer_norm: row width must be >= 2, got {d}"
        )));
    }
    for (name, t) in [("gain", gain), ("bias", bias)] {
        if t.rows() != 1 || t.cols() != d {
            return Err(Error::Shape(format!(
                "layer_norm: {name} must be 1x{d}, got {}x{}",
                t.rows(),
                t.cols()
            )));
        }
    }
    let mut data = vec![0.0; x.len()];
    for i in 0..x.rows() {
        let row = x.row_slice(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let denom = (var + LAYER_NORM_EPS).sqrt();
        for j in 0..d {
            let norm = (row[j] - mean) / denom;
            data[i * d + j] = gain.data()[j] * norm + bias.data()[j];
        }
    }
    finite(Tensor::new(x.rows(), d, data)?, "layer_norm")
}

/// Cosine similarity between two tensors of identical shape, treated as
/// flattened vectors. Zero-norm arguments are rejected, naming the side.
pub fn cosine_sim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "cosine_sim: {}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let na = a.frobenius_norm();
    let nb = b.frobenius_norm();
    if na == 0.0 {
        return Err(Error::Norm("cosine_sim: first argument has zero norm".into()));
    }
    if nb == 0.0 {
        return Err(Error::Norm(
            "cosine_sim: second argument has zero norm".into(),
        ));
    }
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// Scales every row of `a` to unit Euclidean norm.
pub fn row_normalize(a: &Tensor) -> Result<Tensor> {
    let mut data = a.data().to_vec();
    for i in 0..a.rows() {
        let row = &mut data[i * a.cols()..(i + 1) * a.cols()];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Norm(format!("row_normalize: row {i} has zero norm")));
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    finite(Tensor::new(a.rows(), a.cols(), data)?, "row_normalize")
}

/// Sum of all elements as a `1 x 1` tensor.
pub fn sum_all(a: &Tensor) -> Tensor {
    let s: f64 = a.data().iter().sum();
    Tensor::new(1, 1, vec![s]).expect("finite sum of finite inputs")
}

/// Column slice `[start, start + len)` of `a`.
pub fn slice_cols(a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    if len == 0 || start + len > a.cols() {
        return Err(Error::Shape(format!(
            "slice_cols: [{start}, {}) out of 0..{}",
            start + len,
            a.cols()
        )));
    }
    let mut data = Vec::with_capacity(a.rows() * len);
    for i in 0..a.rows() {
        data.extend_from_slice(&a.row_slice(i)[start..start + len]);
    }
    Tensor::new(a.rows(), len, data)
}

/// Horizontal concatenation `[a | b]`.
pub fn concat_cols(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rows() != b.rows() {
        return Err(Error::Shape(format!(
            "concat_cols: {} rows vs {} rows",
            a.rows(),
            b.rows()
        )));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    for i in 0..a.rows() {
        data.extend_from_slice(a.row_slice(i));
        data.extend_from_slice(b.row_slice(i));
    }
    Tensor::new(a.rows(), a.cols() + b.cols(), data)
}

/// Vertical concatenation (rows of `a` above rows of `b`).
pub fn concat_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.cols() {
        return Err(Error::Shape(format!(
            "concat_rows: {} cols vs {} cols",
            a.cols(),
            b.cols()
        )));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(a.rows() + b.rows(), a.cols(), data)
}

/// Repeats a `1 x c` row `rows` times.
pub fn broadcast_rows(v: &Tensor, rows: usize) -> Result<Tensor> {
    if v.rows() != 1 {
        return Err(Error::Shape(format!(
            "broadcast_rows: expected a single row, got {}x{}",
            v.rows(),
            v.cols()
        )));
    }
    if rows == 0 {
        return Err(Error::Shape("broadcast_rows: zero rows requested".into()));
    }
    let mut data = Vec::with_capacity(rows * v.cols());
    for _ in 0..rows {
        data.extend_from_slice(v.data());
    }
    Tensor::new(rows, v.cols(), data)
}

/// Main diagonal of a square matrix as an `n x 1` column.
pub fn take_diag(a: &Tensor) -> Result<Tensor> {
    if a.rows() != a.cols() {
        return Err(Error::Shape(format!(
            "take_diag: matrix must be square, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let data = (0..a.rows()).map(|i| a.get(i, i)).collect();
    Tensor::new(a.rows(), 1, data)
}
