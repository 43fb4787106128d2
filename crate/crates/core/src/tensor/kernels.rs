//! Raw f32 compute kernels shared by forward and backward passes.
//!
//! Everything here is plain slices; shape checking lives in the tape ops.

/// Above this many multiply-accumulates `matmul` dispatches to the tuned
/// `matrixmultiply` kernel. Below it the in-crate loop runs; small products
/// (the correlation layer, fusion kernels) stay on uniform arithmetic whose
/// runtime scales directly with the operation count.
const SGEMM_MIN_MACS: usize = 3_000_000;

/// out = a(m x k) . b(k x n), row-major.
pub fn matmul(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if m * k * n >= SGEMM_MIN_MACS {
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        return;
    }
    out.fill(0.0);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out += a(m x k) . b(k x n); used by gradient accumulation.
pub fn matmul_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    let mut tmp = vec![0.0f32; m * n];
    matmul(a, b, &mut tmp, m, k, n);
    for (o, t) in out.iter_mut().zip(&tmp) {
        *o += t;
    }
}

/// out = transpose of a(rows x cols).
pub fn transpose(a: &[f32], out: &mut [f32], rows: usize, cols: usize) {
    debug_assert_eq!(a.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
}

/// im2col for stride-1 conv: input (c_in, h, w) with zero padding `pad` and a
/// kh x kw window becomes a (c_in*kh*kw) x (out_h*out_w) patch matrix.
pub fn im2col(
    input: &[f32],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    out: &mut [f32],
) {
    let out_h = h + 2 * pad + 1 - kh;
    let out_w = w + 2 * pad + 1 - kw;
    debug_assert_eq!(out.len(), c_in * kh * kw * out_h * out_w);
    let cols = out_h * out_w;
    for c in 0..c_in {
        let chan = &input[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * cols;
                for oy in 0..out_h {
                    let iy = (oy + ky) as isize - pad as isize;
                    let dst = &mut out[row + oy * out_w..row + (oy + 1) * out_w];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &chan[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add inverse of [`im2col`]: accumulates patch-matrix gradients back
/// onto the (c_in, h, w) input gradient.
pub fn col2im_acc(
    cols_grad: &[f32],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    input_grad: &mut [f32],
) {
    let out_h = h + 2 * pad + 1 - kh;
    let out_w = w + 2 * pad + 1 - kw;
    let cols = out_h * out_w;
    debug_assert_eq!(cols_grad.len(), c_in * kh * kw * cols);
    debug_assert_eq!(input_grad.len(), c_in * h * w);
    for c in 0..c_in {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * cols;
                for oy in 0..out_h {
                    let iy = (oy + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = c * h * w + iy as usize * w;
                    for ox in 0..out_w {
                        let ix = (ox + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        input_grad[base + ix as usize] += cols_grad[row + oy * out_w + ox];
                    }
                }
            }
        }
    }
}

/// Numerically stable softmax with temperature along a contiguous lane.
/// Writes exp((x - max)/tau) / sum into `out`.
pub fn softmax_lane(x: &[f32], tau: f32, out: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for (o, &v) in out.iter_mut().zip(x) {
        let e = ((v - max) / tau).exp();
        *o = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// log(sum(exp(x - max))) + max over a lane; shares the stabilization with
/// [`softmax_lane`] so losses and probabilities agree.
pub fn log_sum_exp(x: &[f32]) -> f32 {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let sum: f32 = x.iter().map(|&v| (v - max).exp()).sum();
    sum.ln() + max
}
