//! Raw numeric kernels backing the tape operations.
//!
//! Matrix products go through `matrixmultiply::dgemm`; everything else is
//! straightforward slice code with fast paths for the shapes that dominate
//! training (equal shapes and row-vector broadcasts).

use crate::error::{Error, Result};

use super::{broadcast_shapes, broadcast_strides, Tensor};

/// C = alpha * op(A) op(B) + beta * C with op = transpose when requested.
pub fn gemm(
    trans_a: bool,
    trans_b: bool,
    alpha: f64,
    a: &Tensor,
    b: &Tensor,
    beta: f64,
    c: &mut Tensor,
) -> Result<()> {
    if a.rank() != 2 || b.rank() != 2 || c.rank() != 2 {
        return Err(Error::shape(
            "matmul",
            format!("rank-2 operands required, got {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (am, ak) = (a.shape()[0], a.shape()[1]);
    let (bk, bn) = (b.shape()[0], b.shape()[1]);
    let (m, k) = if trans_a { (ak, am) } else { (am, ak) };
    let (kb, n) = if trans_b { (bn, bk) } else { (bk, bn) };
    if k != kb || c.shape() != [m, n] {
        return Err(Error::shape(
            "matmul",
            format!(
                "incompatible shapes {:?} x {:?} -> {:?} (trans_a={trans_a}, trans_b={trans_b})",
                a.shape(),
                b.shape(),
                c.shape()
            ),
        ));
    }
    // Row-major strides; transposition swaps them.
    let (rsa, csa) = if trans_a { (1, ak as isize) } else { (ak as isize, 1) };
    let (rsb, csb) = if trans_b { (1, bn as isize) } else { (bn as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data().as_ptr(),
            rsa,
            csa,
            b.data().as_ptr(),
            rsb,
            csb,
            beta,
            c.data_mut().as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(())
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::shape(
            "matmul",
            format!("rank-2 operands required, got {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut c = Tensor::zeros(&[a.shape()[0], b.shape()[1]]);
    gemm(false, false, 1.0, a, b, 0.0, &mut c)?;
    Ok(c)
}

/// Elementwise binary op with broadcasting.
pub fn apply2(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::from_vec(a.shape(), data);
    }
    let out_shape = broadcast_shapes(a.shape(), b.shape()).ok_or_else(|| {
        Error::shape(op, format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()))
    })?;
    // Fast path: [n, c] against a length-c row vector.
    if a.rank() == 2 && b.rank() == 1 && a.shape()[1] == b.shape()[0] {
        let c = a.shape()[1];
        let data = a
            .data()
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(b.data()).map(|(&x, &y)| f(x, y)))
            .collect();
        return Tensor::from_vec(a.shape(), data);
    }
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let numel: usize = out_shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let mut idx = vec![0usize; out_shape.len()];
    let (mut off_a, mut off_b) = (0usize, 0usize);
    for _ in 0..numel {
        data.push(f(a.data()[off_a], b.data()[off_b]));
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            off_a += sa[d];
            off_b += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            off_a -= sa[d] * out_shape[d];
            off_b -= sb[d] * out_shape[d];
        }
    }
    Tensor::from_vec(&out_shape, data)
}

/// Sum `grad` (shaped like the broadcast output) back down to `shape`.
pub fn reduce_to_shape(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let out_shape = grad.shape();
    let strides = broadcast_strides(shape, out_shape);
    let mut out = Tensor::zeros(shape);
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    for &g in grad.data() {
        out.data_mut()[off] += g;
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            off -= strides[d] * out_shape[d];
        }
    }
    out
}

pub fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape().to_vec(),
        data: a.data().iter().map(|&x| f(x)).collect(),
    }
}

pub fn sum_all(a: &Tensor) -> f64 {
    a.data().iter().sum()
}

/// Sum over one axis of a rank-2 tensor; axis 0 keeps columns, axis 1 keeps rows.
pub fn sum_axis(a: &Tensor, axis: usize) -> Result<Tensor> {
    if a.rank() != 2 || axis > 1 {
        return Err(Error::shape(
            "sum_axis",
            format!("rank-2 tensor required (axis {axis}, shape {:?})", a.shape()),
        ));
    }
    let (n, c) = (a.shape()[0], a.shape()[1]);
    if axis == 0 {
        let mut out = vec![0.0; c];
        for row in a.data().chunks_exact(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Ok(Tensor::vector(&out))
    } else {
        let out: Vec<f64> = a.data().chunks_exact(c).map(|row| row.iter().sum()).collect();
        let _ = n;
        Ok(Tensor::vector(&out))
    }
}

/// Concatenate along `axis` (0 or 1). All parts must agree on the other axis.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::shape("concat", "no operands".to_string()));
    }
    let rank = parts[0].rank();
    if rank > 2 || axis >= rank.max(1) {
        return Err(Error::shape(
            "concat",
            format!("axis {axis} invalid for rank {rank}"),
        ));
    }
    if rank <= 1 {
        let mut data = Vec::new();
        for p in parts {
            if p.rank() > 1 {
                return Err(Error::shape("concat", "mixed ranks".to_string()));
            }
            data.extend_from_slice(p.data());
        }
        let n = data.len();
        return Tensor::from_vec(&[n], data);
    }
    if axis == 0 {
        let c = parts[0].shape()[1];
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.rank() != 2 || p.shape()[1] != c {
                return Err(Error::shape(
                    "concat",
                    format!("column mismatch: {:?} vs {c} columns", p.shape()),
                ));
            }
            rows += p.shape()[0];
            data.extend_from_slice(p.data());
        }
        Tensor::from_vec(&[rows, c], data)
    } else {
        let n = parts[0].shape()[0];
        let mut cols = 0;
        for p in parts {
            if p.rank() != 2 || p.shape()[0] != n {
                return Err(Error::shape(
                    "concat",
                    format!("row mismatch: {:?} vs {n} rows", p.shape()),
                ));
            }
            cols += p.shape()[1];
        }
        let mut data = Vec::with_capacity(n * cols);
        for r in 0..n {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Tensor::from_vec(&[n, cols], data)
    }
}

/// Contiguous range `start..end` along `axis` of a rank-1/2 tensor.
pub fn slice(a: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
    let rank = a.rank();
    if rank == 0 || rank > 2 || axis >= rank {
        return Err(Error::shape(
            "slice",
            format!("axis {axis} invalid for shape {:?}", a.shape()),
        ));
    }
    if start >= end || end > a.shape()[axis] {
        return Err(Error::shape(
            "slice",
            format!("range {start}..{end} out of bounds for axis of size {}", a.shape()[axis]),
        ));
    }
    if rank == 1 {
        return Tensor::from_vec(&[end - start], a.data()[start..end].to_vec());
    }
    let (n, c) = (a.shape()[0], a.shape()[1]);
    if axis == 0 {
        Tensor::from_vec(&[end - start, c], a.data()[start * c..end * c].to_vec())
    } else {
        let mut data = Vec::with_capacity(n * (end - start));
        for r in 0..n {
            data.extend_from_slice(&a.row(r)[start..end]);
        }
        Tensor::from_vec(&[n, end - start], data)
    }
}

/// Scatter `grad` back into a zero tensor of `shape` at the slice location.
pub fn slice_backward(grad: &Tensor, shape: &[usize], axis: usize, start: usize) -> Tensor {
    let mut out = Tensor::zeros(shape);
    if shape.len() == 1 {
        out.data_mut()[start..start + grad.len()].copy_from_slice(grad.data());
        return out;
    }
    let c = shape[1];
    if axis == 0 {
        let off = start * c;
        out.data_mut()[off..off + grad.len()].copy_from_slice(grad.data());
    } else {
        let w = grad.shape()[1];
        for r in 0..shape[0] {
            let dst = r * c + start;
            out.data_mut()[dst..dst + w].copy_from_slice(grad.row(r));
        }
    }
    out
}

/// Log-sum-exp along axis 1 of a rank-2 tensor (max-shifted).
pub fn lse_rows(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(Error::shape(
            "log_sum_exp",
            format!("rank-2 tensor required, got {:?}", a.shape()),
        ));
    }
    let c = a.shape()[1];
    if c == 0 {
        return Err(Error::shape("log_sum_exp", "empty rows".to_string()));
    }
    let out: Vec<f64> = a
        .data()
        .chunks_exact(c)
        .map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
        })
        .collect();
    Ok(Tensor::vector(&out))
}

/// Saved context from a training-mode batch-norm forward pass.
#[derive(Debug, Clone)]
pub struct BatchNormSaved {
    pub xhat: Tensor,
    pub inv_std: Tensor,
    pub batch_mean: Tensor,
    pub batch_var: Tensor,
}

/// Training-mode batch normalization over axis 0 of `x` [n, c].
pub fn batchnorm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, BatchNormSaved)> {
    if x.rank() != 2 || gamma.shape() != [x.shape()[1]] || beta.shape() != [x.shape()[1]] {
        return Err(Error::shape(
            "batch_norm",
            format!(
                "x {:?} with gamma {:?}, beta {:?}",
                x.shape(),
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let nf = n as f64;
    let mut mean = vec![0.0; c];
    for row in x.data().chunks_exact(c) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= nf;
    }
    let mut var = vec![0.0; c];
    for row in x.data().chunks_exact(c) {
        for ((v, &m), &xv) in var.iter_mut().zip(&mean).zip(row) {
            let d = xv - m;
            *v += d * d;
        }
    }
    for v in &mut var {
        *v /= nf;
    }
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(&[n, c]);
    let mut y = Tensor::zeros(&[n, c]);
    for r in 0..n {
        for j in 0..c {
            let h = (x.at(r, j) - mean[j]) * inv_std[j];
            xhat.data_mut()[r * c + j] = h;
            y.data_mut()[r * c + j] = gamma.data()[j] * h + beta.data()[j];
        }
    }
    Ok((
        y,
        BatchNormSaved {
            xhat,
            inv_std: Tensor::vector(&inv_std),
            batch_mean: Tensor::vector(&mean),
            batch_var: Tensor::vector(&var),
        },
    ))
}

/// Backward pass of training-mode batch norm: returns (dx, dgamma, dbeta).
pub fn batchnorm_train_backward(
    dy: &Tensor,
    gamma: &Tensor,
    saved: &BatchNormSaved,
) -> (Tensor, Tensor, Tensor) {
    let (n, c) = (dy.shape()[0], dy.shape()[1]);
    let nf = n as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let mut sum_dxhat = vec![0.0; c];
    let mut sum_dxhat_xhat = vec![0.0; c];
    for r in 0..n {
        for j in 0..c {
            let g = dy.at(r, j);
            let h = saved.xhat.at(r, j);
            dgamma[j] += g * h;
            dbeta[j] += g;
            let dxhat = g * gamma.data()[j];
            sum_dxhat[j] += dxhat;
            sum_dxhat_xhat[j] += dxhat * h;
        }
    }
    let mut dx = Tensor::zeros(&[n, c]);
    for r in 0..n {
        for j in 0..c {
            let dxhat = dy.at(r, j) * gamma.data()[j];
            let v = saved.inv_std.data()[j] / nf
                * (nf * dxhat - sum_dxhat[j] - saved.xhat.at(r, j) * sum_dxhat_xhat[j]);
            dx.data_mut()[r * c + j] = v;
        }
    }
    (dx, Tensor::vector(&dgamma), Tensor::vector(&dbeta))
}

/// Inference-mode batch norm: an affine transform using the running stats.
pub fn batchnorm_infer(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    if x.rank() != 2 || gamma.shape() != [x.shape()[1]] {
        return Err(Error::shape(
            "batch_norm",
            format!("x {:?} with gamma {:?}", x.shape(), gamma.shape()),
        ));
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let scale: Vec<f64> = (0..c)
        .map(|j| gamma.data()[j] / (running_var.data()[j] + eps).sqrt())
        .collect();
    let mut y = Tensor::zeros(&[n, c]);
    for r in 0..n {
        for j in 0..c {
            y.data_mut()[r * c + j] =
                scale[j] * (x.at(r, j) - running_mean.data()[j]) + beta.data()[j];
        }
    }
    Ok(y)
}
