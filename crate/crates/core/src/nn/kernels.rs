//! Slice-level numeric kernels. The autodiff graph wraps these; tests and
//! inference code may call them directly.

use crate::nn::scalar::matmul;
use crate::nn::Scalar;

/// Output extent of a strided window with zero padding.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        conv_out_dim(self.h, self.k, self.stride, self.pad)
    }
    pub fn out_w(&self) -> usize {
        conv_out_dim(self.w, self.k, self.stride, self.pad)
    }
    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one `C×H×W` sample into a `(C·k·k) × (Ho·Wo)` column matrix.
pub fn im2col<T: Scalar>(input: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.c_in {
        let src = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *out = if ix < 0 || ix >= g.w as isize { T::zero() } else { src_row[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `out`.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, out: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.c_in {
        let dst = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched convolution. `input` is `N×C×H×W`, `weights` is `O×C×k×k`,
/// result is `N×O×Ho×Wo`.
pub fn conv2d_forward<T: Scalar>(input: &[T], n: usize, g: &ConvGeom, weights: &[T], c_out: usize) -> Vec<T> {
    let plane = g.out_h() * g.out_w();
    let in_stride = g.c_in * g.h * g.w;
    let mut out = vec![T::zero(); n * c_out * plane];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); g.col_rows() * plane] };
    for s in 0..n {
        let x = &input[s * in_stride..(s + 1) * in_stride];
        let cols_ref: &[T] = if g.is_pointwise() {
            x
        } else {
            im2col(x, g, &mut cols);
            &cols
        };
        let y = &mut out[s * c_out * plane..(s + 1) * c_out * plane];
        matmul(c_out, g.col_rows(), plane, weights, false, cols_ref, false, y, false);
    }
    out
}

/// Gradients of [`conv2d_forward`]. Returns `(d_input, d_weights)`; either may
/// be skipped when not needed.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    input: &[T],
    n: usize,
    g: &ConvGeom,
    weights: &[T],
    c_out: usize,
    d_out: &[T],
    need_input: bool,
    need_weights: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let plane = g.out_h() * g.out_w();
    let in_stride = g.c_in * g.h * g.w;
    let rows = g.col_rows();
    let mut d_in = need_input.then(|| vec![T::zero(); input.len()]);
    let mut d_w = need_weights.then(|| vec![T::zero(); weights.len()]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * plane] };
    let mut d_cols = if need_input && !g.is_pointwise() { vec![T::zero(); rows * plane] } else { Vec::new() };
    for s in 0..n {
        let x = &input[s * in_stride..(s + 1) * in_stride];
        let dy = &d_out[s * c_out * plane..(s + 1) * c_out * plane];
        if let Some(dw) = d_w.as_mut() {
            let cols_ref: &[T] = if g.is_pointwise() {
                x
            } else {
                im2col(x, g, &mut cols);
                &cols
            };
            matmul(c_out, plane, rows, dy, false, cols_ref, true, dw, true);
        }
        if let Some(dx) = d_in.as_mut() {
            let dx = &mut dx[s * in_stride..(s + 1) * in_stride];
            if g.is_pointwise() {
                matmul(rows, c_out, plane, weights, true, dy, false, dx, true);
            } else {
                matmul(rows, c_out, plane, weights, true, dy, false, &mut d_cols, false);
                col2im(&d_cols, g, dx);
            }
        }
    }
    (d_in, d_w)
}

/// Max pooling with implicit `-inf` padding. Returns values and, per output,
/// the flat input index of the selected element (first maximum in scan order).
pub fn max_pool_forward<T: Scalar>(
    input: &[T],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (conv_out_dim(h, k, stride, pad), conv_out_dim(w, k, stride, pad));
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if best_idx == usize::MAX || input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

/// Per-axis sampling table for half-pixel-centre bilinear resizing:
/// `src = (dst + 0.5) · in/out − 0.5`, clamped to the input range.
#[derive(Clone, Debug)]
pub struct AxisTable {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl AxisTable {
    pub fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut lo = Vec::with_capacity(output);
        let mut hi = Vec::with_capacity(output);
        let mut frac = Vec::with_capacity(output);
        for d in 0..output {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            lo.push(i0);
            hi.push(i1);
            frac.push(src - i0 as f64);
        }
        Self { lo, hi, frac }
    }
}

pub fn bilinear_forward<T: Scalar>(input: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    if oh == h && ow == w {
        return input.to_vec();
    }
    let ty = AxisTable::new(h, oh);
    let tx = AxisTable::new(w, ow);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], T::of(ty.frac[oy]));
            for ox in 0..ow {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], T::of(tx.frac[ox]));
                let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                dst[oy * ow + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn bilinear_backward<T: Scalar>(d_out: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    if oh == h && ow == w {
        return d_out.to_vec();
    }
    let ty = AxisTable::new(h, oh);
    let tx = AxisTable::new(w, ow);
    let mut d_in = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let dy = &d_out[p * oh * ow..(p + 1) * oh * ow];
        let dx = &mut d_in[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], T::of(ty.frac[oy]));
            for ox in 0..ow {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], T::of(tx.frac[ox]));
                let g = dy[oy * ow + ox];
                dx[y0 * w + x0] += g * (T::one() - fy) * (T::one() - fx);
                dx[y0 * w + x1] += g * (T::one() - fy) * fx;
                dx[y1 * w + x0] += g * fy * (T::one() - fx);
                dx[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    d_in
}

/// Softmax across the channel axis of an `N×C×H×W` buffer.
pub fn softmax_channels<T: Scalar>(input: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); input.len()];
    for s in 0..n {
        let base = s * c * plane;
        for p in 0..plane {
            let mut max = T::neg_infinity();
            for ch in 0..c {
                max = max.max(input[base + ch * plane + p]);
            }
            let mut sum = T::zero();
            for ch in 0..c {
                let e = (input[base + ch * plane + p] - max).exp();
                out[base + ch * plane + p] = e;
                sum += e;
            }
            for ch in 0..c {
                out[base + ch * plane + p] = out[base + ch * plane + p] / sum;
            }
        }
    }
    out
}
