//! Forward and backward kernels for every graph op.
//!
//! Kernels are plain functions over flat row-major slices; the graph layer
//! owns shape checking and recording. Backward kernels compute
//! vector-Jacobian products and accumulate into caller-provided buffers.

use crate::scalar::Scalar;

/// Cosines are clamped to `±(1 - 1e-9)` before any `acos`.
pub const COSINE_CLAMP: f64 = 1.0 - 1e-9;

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

/// `out (m x n) = a (m x k) * b (k x n)`
pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &a_ik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &b_kj) in out_row.iter_mut().zip(b_row) {
                *o = *o + a_ik * b_kj;
            }
        }
    }
    out
}

/// `out (m x k) = a (m x n) * b^T` where `b` is `k x n`.
pub fn matmul_transpose_b<S: Scalar>(a: &[S], b: &[S], m: usize, n: usize, k: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * k];
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let b_row = &b[j * n..(j + 1) * n];
            let mut acc = S::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc = acc + x * y;
            }
            out[i * k + j] = acc;
        }
    }
    out
}

/// `out (k x n) = a^T * b` where `a` is `m x k` and `b` is `m x n`.
pub fn matmul_transpose_a<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); k * n];
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for j in 0..k {
            let a_ij = a[i * k + j];
            let out_row = &mut out[j * n..(j + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + a_ij * bv;
            }
        }
    }
    out
}

/// VJP of matmul into both operands.
pub fn matmul_backward<S: Scalar>(
    grad_out: &[S],
    a: &[S],
    b: &[S],
    m: usize,
    k: usize,
    n: usize,
    grad_a: &mut [S],
    grad_b: &mut [S],
) {
    let da = matmul_transpose_b(grad_out, b, m, n, k);
    for (g, d) in grad_a.iter_mut().zip(da) {
        *g = *g + d;
    }
    let db = matmul_transpose_a(a, grad_out, m, k, n);
    for (g, d) in grad_b.iter_mut().zip(db) {
        *g = *g + d;
    }
}

// ---------------------------------------------------------------------------
// conv2d (via im2col)
// ---------------------------------------------------------------------------

/// Output spatial size for a conv/pool axis: `(len + 2*pad - kernel) / stride + 1`.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Unfold `(c_in, h, w)` into a `(c_in*kh*kw) x (oh*ow)` patch matrix.
fn im2col<S: Scalar>(
    input: &[S],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let mut col = vec![S::zero(); c_in * kh * kw * oh * ow];
    let ohw = oh * ow;
    for ci in 0..c_in {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * ohw;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let in_base = (ci * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[row + oy * ow + ox] = input[in_base + ix as usize];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add a patch matrix back onto the input plane.
fn col2im_add<S: Scalar>(
    col: &[S],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    grad_input: &mut [S],
) {
    let ohw = oh * ow;
    for ci in 0..c_in {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * ohw;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let in_base = (ci * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = in_base + ix as usize;
                        grad_input[idx] = grad_input[idx] + col[row + oy * ow + ox];
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d<S: Scalar>(
    input: &[S],
    weight: &[S],
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let col = im2col(input, c_in, h, w, kh, kw, stride, pad, oh, ow);
    matmul(weight, &col, c_out, c_in * kh * kw, oh * ow)
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<S: Scalar>(
    grad_out: &[S],
    input: &[S],
    weight: &[S],
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    grad_input: &mut [S],
    grad_weight: &mut [S],
) {
    let ckk = c_in * kh * kw;
    let ohw = oh * ow;
    let col = im2col(input, c_in, h, w, kh, kw, stride, pad, oh, ow);
    // d_weight = grad_out (c_out x ohw) * col^T (ohw x ckk)
    let dw = matmul_transpose_b(grad_out, &col, c_out, ohw, ckk);
    for (g, d) in grad_weight.iter_mut().zip(dw) {
        *g = *g + d;
    }
    // d_col = weight^T (ckk x c_out) * grad_out (c_out x ohw)
    let dcol = matmul_transpose_a(weight, grad_out, c_out, ckk, ohw);
    col2im_add(&dcol, c_in, h, w, kh, kw, stride, pad, oh, ow, grad_input);
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

pub fn avgpool2d<S: Scalar>(
    input: &[S],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let inv = S::one() / S::from_f64_lossy((k * k) as f64);
    let mut out = vec![S::zero(); c * oh * ow];
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = S::zero();
                for ky in 0..k {
                    let iy = oy * stride + ky;
                    let base = (ci * h + iy) * w + ox * stride;
                    for kx in 0..k {
                        acc = acc + input[base + kx];
                    }
                }
                out[(ci * oh + oy) * ow + ox] = acc * inv;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn avgpool2d_backward<S: Scalar>(
    grad_out: &[S],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    grad_input: &mut [S],
) {
    let inv = S::one() / S::from_f64_lossy((k * k) as f64);
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = grad_out[(ci * oh + oy) * ow + ox] * inv;
                for ky in 0..k {
                    let iy = oy * stride + ky;
                    let base = (ci * h + iy) * w + ox * stride;
                    for kx in 0..k {
                        grad_input[base + kx] = grad_input[base + kx] + g;
                    }
                }
            }
        }
    }
}

/// Max pooling. Ties break to the first (row-major) max index; the winning
/// flat input index per output cell is returned for the backward pass.
pub fn maxpool2d<S: Scalar>(
    input: &[S],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> (Vec<S>, Vec<usize>) {
    let mut out = vec![S::zero(); c * oh * ow];
    let mut argmax = vec![0usize; c * oh * ow];
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = S::neg_infinity();
                let mut best_idx = 0usize;
                for ky in 0..k {
                    let iy = oy * stride + ky;
                    let base = (ci * h + iy) * w + ox * stride;
                    for kx in 0..k {
                        let v = input[base + kx];
                        if v > best {
                            best = v;
                            best_idx = base + kx;
                        }
                    }
                }
                out[(ci * oh + oy) * ow + ox] = best;
                argmax[(ci * oh + oy) * ow + ox] = best_idx;
            }
        }
    }
    (out, argmax)
}

pub fn maxpool2d_backward<S: Scalar>(grad_out: &[S], argmax: &[usize], grad_input: &mut [S]) {
    for (g, &idx) in grad_out.iter().zip(argmax) {
        grad_input[idx] = grad_input[idx] + *g;
    }
}

/// Global average pooling `(c, h, w) -> (c)`.
pub fn adaptive_avgpool<S: Scalar>(input: &[S], c: usize, h: usize, w: usize) -> Vec<S> {
    let inv = S::one() / S::from_f64_lossy((h * w) as f64);
    (0..c)
        .map(|ci| {
            let plane = &input[ci * h * w..(ci + 1) * h * w];
            plane.iter().fold(S::zero(), |a, &v| a + v) * inv
        })
        .collect()
}

pub fn adaptive_avgpool_backward<S: Scalar>(
    grad_out: &[S],
    c: usize,
    h: usize,
    w: usize,
    grad_input: &mut [S],
) {
    let inv = S::one() / S::from_f64_lossy((h * w) as f64);
    for ci in 0..c {
        let g = grad_out[ci] * inv;
        for v in grad_input[ci * h * w..(ci + 1) * h * w].iter_mut() {
            *v = *v + g;
        }
    }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

pub fn relu<S: Scalar>(x: &[S]) -> Vec<S> {
    x.iter().map(|&v| if v > S::zero() { v } else { S::zero() }).collect()
}

/// Subgradient at 0 is 0.
pub fn relu_backward<S: Scalar>(grad_out: &[S], x: &[S], grad_input: &mut [S]) {
    for ((g, &go), &xv) in grad_input.iter_mut().zip(grad_out).zip(x) {
        if xv > S::zero() {
            *g = *g + go;
        }
    }
}

pub fn clamp_abs<S: Scalar>(x: &[S], bound: S) -> Vec<S> {
    x.iter().map(|&v| v.max(-bound).min(bound)).collect()
}

/// Gradient passes through strictly inside the bound, zero at and beyond it.
pub fn clamp_abs_backward<S: Scalar>(grad_out: &[S], x: &[S], bound: S, grad_input: &mut [S]) {
    for ((g, &go), &xv) in grad_input.iter_mut().zip(grad_out).zip(x) {
        if xv.abs() < bound {
            *g = *g + go;
        }
    }
}

/// `scale * x / ||x||_2` along the last axis; `rows` segments of length `dim`.
/// Returns `None` if any segment has norm `<= 1e-12`.
pub fn l2norm<S: Scalar>(x: &[S], rows: usize, dim: usize, scale: S) -> Option<Vec<S>> {
    let mut out = vec![S::zero(); x.len()];
    let tiny = S::from_f64_lossy(1e-12);
    for r in 0..rows {
        let seg = &x[r * dim..(r + 1) * dim];
        let norm = seg.iter().fold(S::zero(), |a, &v| a + v * v).sqrt();
        if norm <= tiny {
            return None;
        }
        let f = scale / norm;
        for (o, &v) in out[r * dim..(r + 1) * dim].iter_mut().zip(seg) {
            *o = v * f;
        }
    }
    Some(out)
}

pub fn l2norm_backward<S: Scalar>(
    grad_out: &[S],
    x: &[S],
    rows: usize,
    dim: usize,
    scale: S,
    grad_input: &mut [S],
) {
    for r in 0..rows {
        let seg = &x[r * dim..(r + 1) * dim];
        let g = &grad_out[r * dim..(r + 1) * dim];
        let norm = seg.iter().fold(S::zero(), |a, &v| a + v * v).sqrt();
        let unit: Vec<S> = seg.iter().map(|&v| v / norm).collect();
        let dot = g.iter().zip(&unit).fold(S::zero(), |a, (&gv, &uv)| a + gv * uv);
        let f = scale / norm;
        for ((gi, &gv), &uv) in grad_input[r * dim..(r + 1) * dim].iter_mut().zip(g).zip(&unit) {
            *gi = *gi + f * (gv - uv * dot);
        }
    }
}

// ---------------------------------------------------------------------------
// softmax helpers and fused losses
// ---------------------------------------------------------------------------

/// Numerically stable softmax of one row.
pub fn softmax<S: Scalar>(row: &[S]) -> Vec<S> {
    let max = row.iter().fold(S::neg_infinity(), |a, &v| a.max(v));
    let exps: Vec<S> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum = exps.iter().fold(S::zero(), |a, &v| a + v);
    exps.into_iter().map(|v| v / sum).collect()
}

/// `log(sum(exp(row)))` via the max-shift trick.
pub fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let max = row.iter().fold(S::neg_infinity(), |a, &v| a.max(v));
    let sum = row.iter().fold(S::zero(), |a, &v| a + (v - max).exp());
    max + sum.ln()
}

/// Class targets for one batch: one index per row, or a dense row of weights.
#[derive(Debug, Clone, PartialEq)]
pub enum Labels<S: Scalar> {
    Hard(Vec<usize>),
    /// Row-major `batch x num_classes`, each row summing to 1.
    Soft(Vec<S>),
}

impl<S: Scalar> Labels<S> {
    pub fn batch_len(&self, num_classes: usize) -> usize {
        match self {
            Labels::Hard(v) => v.len(),
            Labels::Soft(v) => v.len() / num_classes,
        }
    }
}

/// Mean cross-entropy over the batch, computed through log-sum-exp.
pub fn softmax_ce<S: Scalar>(logits: &[S], labels: &Labels<S>, batch: usize, k: usize) -> S {
    let mut total = S::zero();
    for b in 0..batch {
        let row = &logits[b * k..(b + 1) * k];
        let lse = log_sum_exp(row);
        let target = match labels {
            Labels::Hard(idx) => row[idx[b]],
            Labels::Soft(y) => {
                let yrow = &y[b * k..(b + 1) * k];
                row.iter().zip(yrow).fold(S::zero(), |a, (&z, &yv)| a + yv * z)
            }
        };
        total = total + lse - target;
    }
    total / S::from_f64_lossy(batch as f64)
}

/// `d loss / d logits = (softmax(z) - y) / batch`, scaled by the upstream grad.
pub fn softmax_ce_backward<S: Scalar>(
    grad_out: S,
    logits: &[S],
    labels: &Labels<S>,
    batch: usize,
    k: usize,
    grad_logits: &mut [S],
) {
    let scale = grad_out / S::from_f64_lossy(batch as f64);
    for b in 0..batch {
        let row = &logits[b * k..(b + 1) * k];
        let p = softmax(row);
        let gr = &mut grad_logits[b * k..(b + 1) * k];
        match labels {
            Labels::Hard(idx) => {
                for (j, (g, pv)) in gr.iter_mut().zip(p).enumerate() {
                    let y = if j == idx[b] { S::one() } else { S::zero() };
                    *g = *g + (pv - y) * scale;
                }
            }
            Labels::Soft(y) => {
                let yrow = &y[b * k..(b + 1) * k];
                for ((g, pv), &yv) in gr.iter_mut().zip(p).zip(yrow) {
                    *g = *g + (pv - yv) * scale;
                }
            }
        }
    }
}

/// Angular-margin logits: the target entry becomes `s*cos(acos(c) + m)`,
/// every other entry `s*c`. Cosines are clamped to the exact `acos` domain
/// `[-1, 1]`, so float drift cannot produce NaN.
pub fn arc_modified_logits<S: Scalar>(
    cosines: &[S],
    labels: &[usize],
    batch: usize,
    k: usize,
    s: S,
    m: S,
) -> Vec<S> {
    let one = S::one();
    let mut out = vec![S::zero(); batch * k];
    for b in 0..batch {
        let row = &cosines[b * k..(b + 1) * k];
        let orow = &mut out[b * k..(b + 1) * k];
        for (j, (&c, o)) in row.iter().zip(orow.iter_mut()).enumerate() {
            if j == labels[b] {
                let cc = c.max(-one).min(one);
                *o = s * (cc.acos() + m).cos();
            } else {
                *o = s * c;
            }
        }
    }
    out
}

/// Mean cross-entropy over angular-margin logits.
pub fn arc_margin_ce<S: Scalar>(
    cosines: &[S],
    labels: &[usize],
    batch: usize,
    k: usize,
    s: S,
    m: S,
) -> S {
    let modified = arc_modified_logits(cosines, labels, batch, k, s, m);
    softmax_ce(&modified, &Labels::Hard(labels.to_vec()), batch, k)
}

/// VJP into the cosines. Non-target entries scale by `s`; the target entry
/// additionally chains through `acos`/`cos`:
/// `dz/dc = s*sin(acos(c) + m)/sqrt(1 - c^2)`. Within `1e-9` of the
/// endpoints the chain factor is singular and the target derivative is
/// treated as zero.
pub fn arc_margin_ce_backward<S: Scalar>(
    grad_out: S,
    cosines: &[S],
    labels: &[usize],
    batch: usize,
    k: usize,
    s: S,
    m: S,
    grad_cosines: &mut [S],
) {
    let bound = S::from_f64_lossy(COSINE_CLAMP);
    let modified = arc_modified_logits(cosines, labels, batch, k, s, m);
    let mut grad_modified = vec![S::zero(); batch * k];
    softmax_ce_backward(
        grad_out,
        &modified,
        &Labels::Hard(labels.to_vec()),
        batch,
        k,
        &mut grad_modified,
    );
    for b in 0..batch {
        let row = &cosines[b * k..(b + 1) * k];
        let gm = &grad_modified[b * k..(b + 1) * k];
        let gc = &mut grad_cosines[b * k..(b + 1) * k];
        for (j, ((&c, &g), out)) in row.iter().zip(gm).zip(gc.iter_mut()).enumerate() {
            if j == labels[b] {
                if c.abs() < bound {
                    let theta = c.acos();
                    let dz_dc = s * (theta + m).sin() / (S::one() - c * c).sqrt();
                    *out = *out + g * dz_dc;
                }
            } else {
                *out = *out + g * s;
            }
        }
    }
}
