//! Pure compute kernels shared by the autodiff graph (training) and the
//! direct inference path. Every kernel has a fixed accumulation order so
//! single-threaded runs are bitwise reproducible.

use crate::scalar::Scalar;
use crate::tensor::{idx4, Tensor, TensorError};

// ---------------------------------------------------------------------------
// Matrix products over flat row-major buffers.
// ---------------------------------------------------------------------------

/// out[m,n] += a[m,k] · b[k,n]
pub(crate) fn mm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += av * b_row[j];
            }
        }
    }
}

/// out[m,n] += a[m,k] · b[n,k]ᵀ
pub(crate) fn mm_abt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for p in 0..k {
                acc += a_row[p] * b_row[p];
            }
            out[i * n + j] += acc;
        }
    }
}

/// out[m,n] += a[k,m]ᵀ · b[k,n]
pub(crate) fn mm_atb<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize, out: &mut [T]) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a_row[i];
            if av != T::zero() {
                let out_row = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    out_row[j] += av * b_row[j];
                }
            }
        }
    }
}

/// Standard matrix product of rank-2 tensors.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(TensorError::RankMismatch {
            expected: 2,
            shape: if a.rank() != 2 { a.shape().to_vec() } else { b.shape().to_vec() },
        });
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (kb, n) = (b.shape()[0], b.shape()[1]);
    if k != kb {
        return Err(TensorError::InnerDimMismatch {
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(&[m, n]);
    mm(a.data(), b.data(), m, k, n, out.data_mut());
    Ok(out)
}

/// dA = dC·Bᵀ and dB = Aᵀ·dC for C = A·B.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dc: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut da = Tensor::zeros(&[m, k]);
    let mut db = Tensor::zeros(&[k, n]);
    mm_abt(dc.data(), b.data(), m, n, k, da.data_mut());
    mm_atb(a.data(), dc.data(), m, k, n, db.data_mut());
    (da, db)
}

// ---------------------------------------------------------------------------
// Elementwise ops with rank-0 broadcast.
// ---------------------------------------------------------------------------

pub(crate) fn elementwise_shapes<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Vec<usize>, TensorError> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if a.is_scalar() {
        Ok(b.shape().to_vec())
    } else if b.is_scalar() {
        Ok(a.shape().to_vec())
    } else {
        Err(TensorError::ShapeMismatch {
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        })
    }
}

pub(crate) fn zip_broadcast<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>, TensorError> {
    let shape = elementwise_shapes(a, b)?;
    let n: usize = shape.iter().product();
    let data = if a.shape() == b.shape() {
        a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
    } else if a.is_scalar() {
        let av = a.item();
        b.iter().map(|&y| f(av, y)).collect()
    } else {
        let bv = b.item();
        a.iter().map(|&x| f(x, bv)).collect()
    };
    debug_assert_eq!(n, shape.iter().product::<usize>());
    Tensor::new(shape, data)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    zip_broadcast(a, b, |x, y| x + y)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    zip_broadcast(a, b, |x, y| x - y)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    zip_broadcast(a, b, |x, y| x * y)
}

/// Reduce an output-shaped gradient back to an operand's shape (sums into a
/// rank-0 scalar when the operand was broadcast).
pub(crate) fn reduce_to_shape<T: Scalar>(grad: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if grad.shape() == shape {
        grad.clone()
    } else {
        let mut total = T::zero();
        for &g in grad.iter() {
            total += g;
        }
        debug_assert!(shape.is_empty());
        Tensor::scalar(total)
    }
}

// ---------------------------------------------------------------------------
// Activations.
// ---------------------------------------------------------------------------

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient mask: passes where the forward input was strictly positive.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(x.shape());
    for ((out, &xin), &g) in dx.data_mut().iter_mut().zip(x.iter()).zip(dy.iter()) {
        if xin > T::zero() {
            *out = g;
        }
    }
    dx
}

/// Row-wise softmax of a [B, C] tensor, max-shifted for stability.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if x.rank() != 2 {
        return Err(TensorError::RankMismatch {
            expected: 2,
            shape: x.shape().to_vec(),
        });
    }
    let (b, c) = (x.shape()[0], x.shape()[1]);
    let mut out = Tensor::zeros(&[b, c]);
    for i in 0..b {
        let row = &x.data()[i * c..(i + 1) * c];
        let mut max = row[0];
        for &v in &row[1..] {
            if v > max {
                max = v;
            }
        }
        let out_row = &mut out.data_mut()[i * c..(i + 1) * c];
        let mut sum = T::zero();
        for (o, &v) in out_row.iter_mut().zip(row.iter()) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        for o in out_row.iter_mut() {
            *o = *o / sum;
        }
    }
    Ok(out)
}

/// dx_i = s_i (dy_i − Σ_j dy_j s_j), row-wise.
pub fn softmax_rows_backward<T: Scalar>(softmax: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let (b, c) = (softmax.shape()[0], softmax.shape()[1]);
    let mut dx = Tensor::zeros(&[b, c]);
    for i in 0..b {
        let s = &softmax.data()[i * c..(i + 1) * c];
        let g = &dy.data()[i * c..(i + 1) * c];
        let mut dot = T::zero();
        for j in 0..c {
            dot += s[j] * g[j];
        }
        let out = &mut dx.data_mut()[i * c..(i + 1) * c];
        for j in 0..c {
            out[j] = s[j] * (g[j] - dot);
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Fully-connected layer. Weight layout is [out_features, in_features].
// ---------------------------------------------------------------------------

pub fn linear_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    if x.rank() != 2 {
        return Err(TensorError::RankMismatch {
            expected: 2,
            shape: x.shape().to_vec(),
        });
    }
    let (batch, in_f) = (x.shape()[0], x.shape()[1]);
    let (out_f, w_in) = (w.shape()[0], w.shape()[1]);
    if in_f != w_in {
        return Err(TensorError::InnerDimMismatch {
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    let mut y = Tensor::zeros(&[batch, out_f]);
    mm_abt(x.data(), w.data(), batch, in_f, out_f, y.data_mut());
    for i in 0..batch {
        let row = &mut y.data_mut()[i * out_f..(i + 1) * out_f];
        for (v, &bias) in row.iter_mut().zip(b.data().iter()) {
            *v += bias;
        }
    }
    Ok(y)
}

/// Returns (dx, dw, db) for y = x·wᵀ + b.
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (batch, in_f) = (x.shape()[0], x.shape()[1]);
    let out_f = w.shape()[0];
    let mut dx = Tensor::zeros(&[batch, in_f]);
    let mut dw = Tensor::zeros(&[out_f, in_f]);
    let mut db = Tensor::zeros(&[out_f]);
    mm(dy.data(), w.data(), batch, out_f, in_f, dx.data_mut());
    mm_atb(dy.data(), x.data(), batch, out_f, in_f, dw.data_mut());
    for i in 0..batch {
        let row = &dy.data()[i * out_f..(i + 1) * out_f];
        for (o, &g) in db.data_mut().iter_mut().zip(row.iter()) {
            *o += g;
        }
    }
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// 2-D convolution (cross-correlation) via im2col.
// ---------------------------------------------------------------------------

pub(crate) fn conv_out_extent(
    input: usize,
    kernel: usize,
    pad: usize,
    stride: usize,
) -> isize {
    (input as isize + 2 * pad as isize - kernel as isize) / stride as isize + 1
}

/// Column buffer layout: rows = C·kh·kw, cols = H'·W'. Out-of-image taps are 0.
fn im2col<T: Scalar>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    (ph, pw): (usize, usize),
    stride: usize,
    (oh, ow): (usize, usize),
    col: &mut [T],
) {
    let cols = oh * ow;
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row_idx = (ch * kh + ki) * kw + kj;
                let row = &mut col[row_idx * cols..(row_idx + 1) * cols];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - ph as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        for v in dst.iter_mut() {
                            *v = T::zero();
                        }
                        continue;
                    }
                    let src_row = &x[(ch * h + iy as usize) * w..(ch * h + iy as usize + 1) * w];
                    for (ox, v) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pw as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add of a column buffer back into image layout.
fn col2im<T: Scalar>(
    col: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    (ph, pw): (usize, usize),
    stride: usize,
    (oh, ow): (usize, usize),
    x: &mut [T],
) {
    let cols = oh * ow;
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row_idx = (ch * kh + ki) * kw + kj;
                let row = &col[row_idx * cols..(row_idx + 1) * cols];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst =
                        &mut x[(ch * h + iy as usize) * w..(ch * h + iy as usize + 1) * w];
                    let src = &row[oy * ow..(oy + 1) * ow];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * stride + kj) as isize - pw as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of x[B,C,H,W] with w[O,C,kh,kw] plus bias[O].
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: (usize, usize),
) -> Result<Tensor<T>, TensorError> {
    if x.rank() != 4 {
        return Err(TensorError::RankMismatch {
            expected: 4,
            shape: x.shape().to_vec(),
        });
    }
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, wc, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    if c != wc {
        return Err(TensorError::ChannelMismatch { expected: wc, got: c });
    }
    let oh = conv_out_extent(h, kh, pad.0, stride);
    let ow = conv_out_extent(w, kw, pad.1, stride);
    if oh <= 0 || ow <= 0 {
        return Err(TensorError::EmptyConvOutput(vec![b as isize, o as isize, oh, ow]));
    }
    let (oh, ow) = (oh as usize, ow as usize);
    let ckk = c * kh * kw;
    let cols = oh * ow;
    let mut col = vec![T::zero(); ckk * cols];
    let mut y = Tensor::zeros(&[b, o, oh, ow]);
    let in_sz = c * h * w;
    let out_sz = o * oh * ow;
    for bi in 0..b {
        im2col(
            &x.data()[bi * in_sz..(bi + 1) * in_sz],
            (c, h, w),
            (kh, kw),
            pad,
            stride,
            (oh, ow),
            &mut col,
        );
        let y_slice = &mut y.data_mut()[bi * out_sz..(bi + 1) * out_sz];
        mm(weight.data(), &col, o, ckk, cols, y_slice);
        for oc in 0..o {
            let bias_v = bias.data()[oc];
            for v in y_slice[oc * cols..(oc + 1) * cols].iter_mut() {
                *v += bias_v;
            }
        }
    }
    Ok(y)
}

/// Returns (dx, dw, db) for the convolution above.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: (usize, usize),
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, _, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    let (oh, ow) = (dy.shape()[2], dy.shape()[3]);
    let ckk = c * kh * kw;
    let cols = oh * ow;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros(&[o]);
    let mut col = vec![T::zero(); ckk * cols];
    let mut dcol = vec![T::zero(); ckk * cols];
    let in_sz = c * h * w;
    let out_sz = o * oh * ow;
    for bi in 0..b {
        let dy_slice = &dy.data()[bi * out_sz..(bi + 1) * out_sz];
        im2col(
            &x.data()[bi * in_sz..(bi + 1) * in_sz],
            (c, h, w),
            (kh, kw),
            pad,
            stride,
            (oh, ow),
            &mut col,
        );
        // dW += dY · colᵀ
        mm_abt(dy_slice, &col, o, cols, ckk, dw.data_mut());
        // dcol = Wᵀ · dY
        for v in dcol.iter_mut() {
            *v = T::zero();
        }
        mm_atb(weight.data(), dy_slice, o, ckk, cols, &mut dcol);
        col2im(
            &dcol,
            (c, h, w),
            (kh, kw),
            pad,
            stride,
            (oh, ow),
            &mut dx.data_mut()[bi * in_sz..(bi + 1) * in_sz],
        );
        for oc in 0..o {
            let mut s = T::zero();
            for &g in &dy_slice[oc * cols..(oc + 1) * cols] {
                s += g;
            }
            db.data_mut()[oc] += s;
        }
    }
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// Max pooling.
// ---------------------------------------------------------------------------

/// Returns pooled output and, per output element, the flat input index of its
/// window maximum. Ties resolve to the first element in row-major window scan.
pub fn maxpool_forward<T: Scalar>(
    x: &Tensor<T>,
    size: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>), TensorError> {
    if x.rank() != 4 {
        return Err(TensorError::RankMismatch {
            expected: 4,
            shape: x.shape().to_vec(),
        });
    }
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if size > h || size > w {
        return Err(TensorError::PoolTooLarge {
            window: size,
            extent: h.min(w),
        });
    }
    let oh = (h - size) / stride + 1;
    let ow = (w - size) / stride + 1;
    let mut y = Tensor::zeros(&[b, c, oh, ow]);
    let mut argmax = vec![0usize; b * c * oh * ow];
    let xd = x.data();
    let yd = y.data_mut();
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = idx4(c, h, w, bi, ci, oy * stride, ox * stride);
                    let mut best = xd[best_idx];
                    for ki in 0..size {
                        for kj in 0..size {
                            let idx = idx4(c, h, w, bi, ci, oy * stride + ki, ox * stride + kj);
                            if xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let out_idx = idx4(c, oh, ow, bi, ci, oy, ox);
                    yd[out_idx] = best;
                    argmax[out_idx] = best_idx;
                }
            }
        }
    }
    Ok((y, argmax))
}

/// Routes each output gradient to the recorded argmax position.
pub fn maxpool_backward<T: Scalar>(
    dy: &Tensor<T>,
    argmax: &[usize],
    input_shape: &[usize],
) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    for (&g, &idx) in dy.iter().zip(argmax.iter()) {
        dx.data_mut()[idx] += g;
    }
    dx
}

// ---------------------------------------------------------------------------
// Batch normalization over [B, C, H, W], statistics per channel.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BnBatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance used for normalization.
    pub var: Vec<T>,
}

/// Train-mode forward: normalizes with batch statistics. Requires batch >= 2.
pub fn batchnorm_train_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, BnBatchStats<T>), TensorError> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if b < 2 {
        return Err(TensorError::BatchTooSmall(b));
    }
    let n = T::from_f64((b * h * w) as f64);
    let eps_t = T::from_f64(eps);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let xd = x.data();
    for ci in 0..c {
        let mut s = T::zero();
        for bi in 0..b {
            let base = idx4(c, h, w, bi, ci, 0, 0);
            for &v in &xd[base..base + h * w] {
                s += v;
            }
        }
        let m = s / n;
        let mut sq = T::zero();
        for bi in 0..b {
            let base = idx4(c, h, w, bi, ci, 0, 0);
            for &v in &xd[base..base + h * w] {
                let d = v - m;
                sq += d * d;
            }
        }
        mean[ci] = m;
        var[ci] = sq / n;
    }
    let mut y = Tensor::zeros(x.shape());
    let yd = y.data_mut();
    for ci in 0..c {
        let inv = (var[ci] + eps_t).sqrt().recip();
        let g = gamma.data()[ci];
        let bt = beta.data()[ci];
        let m = mean[ci];
        for bi in 0..b {
            let base = idx4(c, h, w, bi, ci, 0, 0);
            for i in base..base + h * w {
                yd[i] = (xd[i] - m) * inv * g + bt;
            }
        }
    }
    Ok((y, BnBatchStats { mean, var }))
}

/// Train-mode backward. Returns (dx, dgamma, dbeta).
pub fn batchnorm_train_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &BnBatchStats<T>,
    eps: f64,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let n = T::from_f64((b * h * w) as f64);
    let eps_t = T::from_f64(eps);
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    let xd = x.data();
    let gd = dy.data();
    for ci in 0..c {
        let m = stats.mean[ci];
        let inv = (stats.var[ci] + eps_t).sqrt().recip();
        let g = gamma.data()[ci];
        // Accumulate the three per-channel reductions in one pass.
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for bi in 0..b {
            let base = idx4(c, h, w, bi, ci, 0, 0);
            for i in base..base + h * w {
                let xhat = (xd[i] - m) * inv;
                sum_dy += gd[i];
                sum_dy_xhat += gd[i] * xhat;
            }
        }
        dgamma.data_mut()[ci] = sum_dy_xhat;
        dbeta.data_mut()[ci] = sum_dy;
        // dx = (γ·inv/n)·(n·dy − Σdy − x̂·Σ(dy·x̂))
        let scale = g * inv / n;
        let dxd = dx.data_mut();
        for bi in 0..b {
            let base = idx4(c, h, w, bi, ci, 0, 0);
            for i in base..base + h * w {
                let xhat = (xd[i] - m) * inv;
                dxd[i] = scale * (n * gd[i] - sum_dy - xhat * sum_dy_xhat);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Eval-mode forward: normalizes with the provided running statistics.
pub fn batchnorm_eval_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    var: &[T],
    eps: f64,
) -> Tensor<T> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let eps_t = T::from_f64(eps);
    let mut y = Tensor::zeros(x.shape());
    let xd = x.data();
    let yd = y.data_mut();
    for ci in 0..c {
        let inv = (var[ci] + eps_t).sqrt().recip();
        let g = gamma.data()[ci];
        let bt = beta.data()[ci];
        let m = mean[ci];
        for bi in 0..b {
            let base = idx4(c, h, w, bi, ci, 0, 0);
            for i in base..base + h * w {
                yd[i] = (xd[i] - m) * inv * g + bt;
            }
        }
    }
    y
}

/// Eval-mode backward: the transform is affine per channel.
pub fn batchnorm_eval_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &[T],
    var: &[T],
    eps: f64,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let eps_t = T::from_f64(eps);
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    let xd = x.data();
    let gd = dy.data();
    let dxd = dx.data_mut();
    for ci in 0..c {
        let inv = (var[ci] + eps_t).sqrt().recip();
        let g = gamma.data()[ci];
        let m = mean[ci];
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for bi in 0..b {
            let base = idx4(c, h, w, bi, ci, 0, 0);
            for i in base..base + h * w {
                sum_dy += gd[i];
                sum_dy_xhat += gd[i] * (xd[i] - m) * inv;
                dxd[i] = gd[i] * g * inv;
            }
        }
        dgamma.data_mut()[ci] = sum_dy_xhat;
        dbeta.data_mut()[ci] = sum_dy;
    }
    (dx, dgamma, dbeta)
}

// ---------------------------------------------------------------------------
// Channel concatenation.
// ---------------------------------------------------------------------------

/// Concatenates along the channel axis; a's channels come first.
pub fn concat_channels<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    if a.rank() != 4 || b.rank() != 4 {
        return Err(TensorError::RankMismatch {
            expected: 4,
            shape: if a.rank() != 4 { a.shape().to_vec() } else { b.shape().to_vec() },
        });
    }
    let (ba, ca, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3]);
    let (bb, cb, hb, wb) = (b.shape()[0], b.shape()[1], b.shape()[2], b.shape()[3]);
    if ba != bb || h != hb || w != wb {
        return Err(TensorError::ShapeMismatch {
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = Tensor::zeros(&[ba, ca + cb, h, w]);
    let plane = h * w;
    let od = out.data_mut();
    for bi in 0..ba {
        let dst_base = bi * (ca + cb) * plane;
        od[dst_base..dst_base + ca * plane]
            .copy_from_slice(&a.data()[bi * ca * plane..(bi + 1) * ca * plane]);
        od[dst_base + ca * plane..dst_base + (ca + cb) * plane]
            .copy_from_slice(&b.data()[bi * cb * plane..(bi + 1) * cb * plane]);
    }
    Ok(out)
}

/// Splits an output gradient back into the two concatenated operands.
pub fn concat_channels_backward<T: Scalar>(
    dy: &Tensor<T>,
    ca: usize,
    cb: usize,
) -> (Tensor<T>, Tensor<T>) {
    let (b, _, h, w) = (dy.shape()[0], dy.shape()[1], dy.shape()[2], dy.shape()[3]);
    let plane = h * w;
    let mut da = Tensor::zeros(&[b, ca, h, w]);
    let mut db = Tensor::zeros(&[b, cb, h, w]);
    for bi in 0..b {
        let src_base = bi * (ca + cb) * plane;
        da.data_mut()[bi * ca * plane..(bi + 1) * ca * plane]
            .copy_from_slice(&dy.data()[src_base..src_base + ca * plane]);
        db.data_mut()[bi * cb * plane..(bi + 1) * cb * plane]
            .copy_from_slice(&dy.data()[src_base + ca * plane..src_base + (ca + cb) * plane]);
    }
    (da, db)
}
