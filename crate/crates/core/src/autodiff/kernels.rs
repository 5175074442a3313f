//! Numeric kernels shared by the forward pass and the first-order backward pass.

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

pub fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// Batched matrix product over matching leading axes; either side may be
/// read transposed (last two axes swapped).
pub fn matmul(a: &Tensor, trans_a: bool, b: &Tensor, trans_b: bool) -> Result<Tensor> {
    let (ra, rb) = (a.rank(), b.rank());
    if ra < 2 || ra != rb || a.shape()[..ra - 2] != b.shape()[..rb - 2] {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (a0, a1) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let (b0, b1) = (b.shape()[rb - 2], b.shape()[rb - 1]);
    let (m, k) = if trans_a { (a1, a0) } else { (a0, a1) };
    let (kb, n) = if trans_b { (b1, b0) } else { (b0, b1) };
    if k != kb {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let batch: usize = a.shape()[..ra - 2].iter().product();
    let mut out = vec![0.0; batch * m * n];
    for i in 0..batch {
        gemm(
            m,
            k,
            n,
            &a.data()[i * m * k..(i + 1) * m * k],
            trans_a,
            &b.data()[i * k * n..(i + 1) * k * n],
            trans_b,
            &mut out[i * m * n..(i + 1) * m * n],
            false,
        );
    }
    let mut shape = a.shape()[..ra - 2].to_vec();
    shape.extend([m, n]);
    Ok(Tensor::from_parts(shape, out))
}

pub fn sum_rows(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(Error::shape("sum_rows", a.shape(), &[]));
    }
    let m = a.cols();
    let mut out = vec![0.0; m];
    for i in 0..a.rows() {
        for (o, v) in out.iter_mut().zip(a.row(i)) {
            *o += v;
        }
    }
    Ok(Tensor::from_parts(vec![1, m], out))
}

pub fn broadcast_rows(a: &Tensor, n: usize) -> Result<Tensor> {
    if a.rank() != 2 || a.shape()[0] != 1 {
        return Err(Error::shape("broadcast_rows", a.shape(), &[n]));
    }
    let m = a.cols();
    let mut out = Vec::with_capacity(n * m);
    for _ in 0..n {
        out.extend_from_slice(a.data());
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

fn last_to_one(shape: &[usize]) -> Vec<usize> {
    let mut s = shape.to_vec();
    if let Some(l) = s.last_mut() {
        *l = 1;
    }
    s
}

pub fn sum_last(a: &Tensor) -> Result<Tensor> {
    if a.rank() == 0 {
        return Err(Error::shape("sum_last", a.shape(), &[]));
    }
    let data = (0..a.rows()).map(|i| a.row(i).iter().sum()).collect();
    Ok(Tensor::from_parts(last_to_one(a.shape()), data))
}

pub fn broadcast_last(a: &Tensor, m: usize) -> Result<Tensor> {
    if a.rank() == 0 || a.cols() != 1 {
        return Err(Error::shape("broadcast_last", a.shape(), &[m]));
    }
    let mut data = Vec::with_capacity(a.numel() * m);
    for &v in a.data() {
        data.extend(std::iter::repeat_n(v, m));
    }
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = m;
    Ok(Tensor::from_parts(shape, data))
}

pub fn softmax_last(a: &Tensor) -> Tensor {
    let mut out = a.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

pub fn log_softmax_last(a: &Tensor) -> Tensor {
    let mut out = a.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// Per-row normalization to zero mean and unit variance; also returns the
/// per-row reciprocal standard deviation.
pub fn layer_norm_last(a: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let mut out = a.clone();
    let m = a.cols() as f64;
    let mut rstd = Vec::with_capacity(a.rows());
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let mean = row.iter().sum::<f64>() / m;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
        let r = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * r;
        }
        rstd.push(r);
    }
    (out, rstd)
}

pub fn gather_rows(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    if table.rank() != 2 {
        return Err(Error::shape("embedding_lookup", table.shape(), &[ids.len()]));
    }
    let (v, d) = (table.shape()[0], table.shape()[1]);
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= v {
            return Err(Error::TokenOutOfRange { id, size: v });
        }
        out.extend_from_slice(table.row(id));
    }
    Ok(Tensor::from_parts(vec![ids.len(), d], out))
}

pub fn scatter_rows(src: &Tensor, ids: &[usize], table_rows: usize) -> Result<Tensor> {
    if src.rank() != 2 || src.shape()[0] != ids.len() {
        return Err(Error::shape("scatter_rows", src.shape(), &[ids.len()]));
    }
    let d = src.cols();
    let mut out = Tensor::zeros(&[table_rows, d]);
    for (i, &id) in ids.iter().enumerate() {
        if id >= table_rows {
            return Err(Error::TokenOutOfRange {
                id,
                size: table_rows,
            });
        }
        for (o, s) in out.row_mut(id).iter_mut().zip(src.row(i)) {
            *o += s;
        }
    }
    Ok(out)
}

pub fn slice_last(a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let m = a.cols();
    if a.rank() == 0 || start + len > m {
        return Err(Error::shape("slice", a.shape(), &[start, len]));
    }
    let mut data = Vec::with_capacity(a.rows() * len);
    for i in 0..a.rows() {
        data.extend_from_slice(&a.row(i)[start..start + len]);
    }
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = len;
    Ok(Tensor::from_parts(shape, data))
}

pub fn pad_last(a: &Tensor, start: usize, total: usize) -> Result<Tensor> {
    let len = a.cols();
    if a.rank() == 0 || start + len > total {
        return Err(Error::shape("pad", a.shape(), &[start, total]));
    }
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = total;
    let mut out = Tensor::zeros(&shape);
    for i in 0..a.rows() {
        out.row_mut(i)[start..start + len].copy_from_slice(a.row(i));
    }
    Ok(out)
}

pub fn concat_last(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    let lead = &first.shape()[..first.rank().saturating_sub(1)];
    for p in parts {
        if p.rank() == 0 || &p.shape()[..p.rank() - 1] != lead {
            return Err(Error::shape("concat", first.shape(), p.shape()));
        }
    }
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    let rows = first.rows();
    let mut data = Vec::with_capacity(rows * total);
    for i in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Ok(Tensor::from_parts(shape, data))
}
