//! Forward and backward kernels over raw row-major buffers.
//!
//! Convolutions use the cross-correlation convention and are lowered to
//! im2col + GEMM one batch item at a time.

use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_plane(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unrolls one image (`C x H x W`) into a `(C*kh*kw) x (Ho*Wo)` matrix.
fn im2col<T: Scalar>(g: &ConvGeometry, image: &[T], col: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane = ho * wo;
    for c in 0..g.in_channels {
        let src = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.height as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, slot) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *slot = if ix < 0 || ix >= g.width as isize {
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

/// Scatters a column matrix back onto an image, accumulating overlaps.
fn col2im<T: Scalar>(g: &ConvGeometry, col: &[T], image: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane = ho * wo;
    for c in 0..g.in_channels {
        let dst = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst_row[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let k = g.patch_len();
    let plane = g.out_plane();
    let in_len = g.in_channels * g.height * g.width;
    let mut out = vec![T::zero(); g.batch * g.out_channels * plane];
    let mut col = vec![T::zero(); k * plane];
    for n in 0..g.batch {
        im2col(g, &input[n * in_len..(n + 1) * in_len], &mut col);
        let out_n = &mut out[n * g.out_channels * plane..(n + 1) * g.out_channels * plane];
        for o in 0..g.out_channels {
            let dst = &mut out_n[o * plane..(o + 1) * plane];
            if let Some(b) = bias {
                dst.fill(b[o]);
            }
            let w_row = &weight[o * k..(o + 1) * k];
            for (kk, &w) in w_row.iter().enumerate() {
                if w == T::zero() {
                    continue;
                }
                let src = &col[kk * plane..(kk + 1) * plane];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub input: Vec<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
) -> ConvGrads<T> {
    let k = g.patch_len();
    let plane = g.out_plane();
    let in_len = g.in_channels * g.height * g.width;
    let mut grads = ConvGrads {
        input: vec![T::zero(); input.len()],
        weight: vec![T::zero(); weight.len()],
        bias: vec![T::zero(); g.out_channels],
    };
    let mut col = vec![T::zero(); k * plane];
    let mut dcol = vec![T::zero(); k * plane];
    for n in 0..g.batch {
        im2col(g, &input[n * in_len..(n + 1) * in_len], &mut col);
        dcol.fill(T::zero());
        let dout_n = &grad_out[n * g.out_channels * plane..(n + 1) * g.out_channels * plane];
        for o in 0..g.out_channels {
            let dout = &dout_n[o * plane..(o + 1) * plane];
            grads.bias[o] += dout.iter().copied().sum::<T>();
            let w_row = &weight[o * k..(o + 1) * k];
            let dw_row = &mut grads.weight[o * k..(o + 1) * k];
            for kk in 0..k {
                let c_row = &col[kk * plane..(kk + 1) * plane];
                let mut acc = T::zero();
                for (a, b) in dout.iter().zip(c_row) {
                    acc += *a * *b;
                }
                dw_row[kk] += acc;
                let w = w_row[kk];
                if w != T::zero() {
                    let dc_row = &mut dcol[kk * plane..(kk + 1) * plane];
                    for (d, &s) in dc_row.iter_mut().zip(dout) {
                        *d += w * s;
                    }
                }
            }
        }
        col2im(g, &dcol, &mut grads.input[n * in_len..(n + 1) * in_len]);
    }
    grads
}

/// `y[n, o] = x[n, :] . w[o, :] + b[o]`
pub fn linear_forward<T: Scalar>(
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    batch: usize,
    in_features: usize,
    out_features: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * out_features];
    for n in 0..batch {
        let x = &input[n * in_features..(n + 1) * in_features];
        for o in 0..out_features {
            let w = &weight[o * in_features..(o + 1) * in_features];
            let mut acc = bias.map_or(T::zero(), |b| b[o]);
            for (a, b) in x.iter().zip(w) {
                acc += *a * *b;
            }
            out[n * out_features + o] = acc;
        }
    }
    out
}

pub fn linear_backward<T: Scalar>(
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    batch: usize,
    in_features: usize,
    out_features: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); input.len()];
    let mut dw = vec![T::zero(); weight.len()];
    let mut db = vec![T::zero(); out_features];
    for n in 0..batch {
        let x = &input[n * in_features..(n + 1) * in_features];
        let dx_n = &mut dx[n * in_features..(n + 1) * in_features];
        for o in 0..out_features {
            let go = grad_out[n * out_features + o];
            db[o] += go;
            let w = &weight[o * in_features..(o + 1) * in_features];
            let dw_o = &mut dw[o * in_features..(o + 1) * in_features];
            for i in 0..in_features {
                dw_o[i] += go * x[i];
                dx_n[i] += go * w[i];
            }
        }
    }
    (dx, dw, db)
}

/// Max pooling without padding. Returns output and the flat argmax per output cell.
pub fn maxpool_forward<T: Scalar>(
    input: &[T],
    dims: (usize, usize, usize, usize),
    kernel: usize,
    stride: usize,
) -> (Vec<T>, Vec<usize>, usize, usize) {
    let (n, c, h, w) = dims;
    let ho = (h - kernel) / stride + 1;
    let wo = (w - kernel) / stride + 1;
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if input[idx] > input[best] {
                            best = idx;
                        }
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg, ho, wo)
}

pub fn global_avgpool_forward<T: Scalar>(
    input: &[T],
    dims: (usize, usize, usize, usize),
) -> Vec<T> {
    let (n, c, h, w) = dims;
    let area = T::from_usize(h * w).unwrap();
    (0..n * c)
        .map(|p| input[p * h * w..(p + 1) * h * w].iter().copied().sum::<T>() / area)
        .collect()
}

pub struct BatchNormOutput<T> {
    pub out: Vec<T>,
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var_unbiased: Vec<T>,
}

/// Per-channel normalization over `N x H x W`. With `stats = None` the batch
/// statistics are used; otherwise the supplied `(mean, var)`.
pub fn batchnorm_forward<T: Scalar>(
    input: &[T],
    dims: (usize, usize, usize, usize),
    gamma: &[T],
    beta: &[T],
    eps: T,
    stats: Option<(&[T], &[T])>,
) -> BatchNormOutput<T> {
    let (n, c, h, w) = dims;
    let plane = h * w;
    let count = n * plane;
    let count_t = T::from_usize(count).unwrap();
    let mut out = vec![T::zero(); input.len()];
    let mut normalized = vec![T::zero(); input.len()];
    let mut inv_std = vec![T::zero(); c];
    let mut batch_mean = vec![T::zero(); c];
    let mut batch_var_unbiased = vec![T::zero(); c];
    for ch in 0..c {
        let (mean, var) = match stats {
            Some((m, v)) => (m[ch], v[ch]),
            None => {
                let mut sum = T::zero();
                for b in 0..n {
                    let off = (b * c + ch) * plane;
                    sum += input[off..off + plane].iter().copied().sum::<T>();
                }
                let mean = sum / count_t;
                let mut ss = T::zero();
                for b in 0..n {
                    let off = (b * c + ch) * plane;
                    for &x in &input[off..off + plane] {
                        let d = x - mean;
                        ss += d * d;
                    }
                }
                batch_mean[ch] = mean;
                batch_var_unbiased[ch] = if count > 1 {
                    ss / T::from_usize(count - 1).unwrap()
                } else {
                    T::zero()
                };
                (mean, ss / count_t)
            }
        };
        let is = T::one() / (var + eps).sqrt();
        inv_std[ch] = is;
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                let xh = (input[i] - mean) * is;
                normalized[i] = xh;
                out[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    BatchNormOutput {
        out,
        normalized,
        inv_std,
        batch_mean,
        batch_var_unbiased,
    }
}

/// Returns `(dx, dgamma, dbeta)`. `batch_stats` selects the training-mode
/// gradient (statistics depend on the input) versus the fixed-statistics one.
pub fn batchnorm_backward<T: Scalar>(
    grad_out: &[T],
    normalized: &[T],
    inv_std: &[T],
    gamma: &[T],
    dims: (usize, usize, usize, usize),
    batch_stats: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, c, h, w) = dims;
    let plane = h * w;
    let count = T::from_usize(n * plane).unwrap();
    let mut dx = vec![T::zero(); grad_out.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xh = T::zero();
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                sum_dy += grad_out[i];
                sum_dy_xh += grad_out[i] * normalized[i];
            }
        }
        dgamma[ch] = sum_dy_xh;
        dbeta[ch] = sum_dy;
        let scale = gamma[ch] * inv_std[ch];
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                dx[i] = if batch_stats {
                    scale / count * (count * grad_out[i] - sum_dy - normalized[i] * sum_dy_xh)
                } else {
                    scale * grad_out[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Row-wise softmax over the last axis of an `N x K` buffer.
pub fn softmax_rows<T: Scalar>(input: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); input.len()];
    for r in 0..rows {
        let x = &input[r * cols..(r + 1) * cols];
        let max = x.iter().copied().fold(T::neg_infinity(), T::max);
        let y = &mut out[r * cols..(r + 1) * cols];
        let mut sum = T::zero();
        for (o, &v) in y.iter_mut().zip(x) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in y.iter_mut() {
            *o /= sum;
        }
    }
    out
}

/// Bilinear resampling of one plane with half-pixel centers; samples are
/// clamped to the source so nothing outside the image is ever read.
pub fn bilinear_resize(src: &[f32], width: usize, height: usize, out_w: usize, out_h: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(out_w * out_h);
    let sx = width as f64 / out_w as f64;
    let sy = height as f64 / out_h as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (height - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(height - 1);
        let ty = (fy - y0 as f64) as f32;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (width - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(width - 1);
            let tx = (fx - x0 as f64) as f32;
            let lerp = |a: f32, b: f32, t: f32| a + (b - a) * t;
            let top = lerp(src[y0 * width + x0], src[y0 * width + x1], tx);
            let bottom = lerp(src[y1 * width + x0], src[y1 * width + x1], tx);
            out.push(lerp(top, bottom, ty));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_cross_correlation_hand_example() {
        // [[1,2],[3,4]] against [[1,0],[0,1]]: 1*1 + 4*1 = 5
        let g = ConvGeometry {
            batch: 1,
            in_channels: 1,
            height: 2,
            width: 2,
            out_channels: 1,
            kernel_h: 2,
            kernel_w: 2,
            stride: 1,
            padding: 0,
        };
        let out = conv2d_forward(&g, &[1.0f64, 2.0, 3.0, 4.0], &[1.0, 0.0, 0.0, 1.0], None);
        assert_eq!(out, vec![5.0]);
    }

    #[test]
    fn conv_is_not_flipped() {
        // a true convolution would pair 1 with 4 and 4 with 1 under the anti-diagonal kernel
        let g = ConvGeometry {
            batch: 1,
            in_channels: 1,
            height: 2,
            width: 2,
            out_channels: 1,
            kernel_h: 2,
            kernel_w: 2,
            stride: 1,
            padding: 0,
        };
        let out = conv2d_forward(&g, &[1.0f64, 2.0, 3.0, 4.0], &[1.0, 2.0, 0.0, 0.0], None);
        assert_eq!(out, vec![5.0]);
    }

    #[test]
    fn padded_strided_conv_matches_direct_sum() {
        let g = ConvGeometry {
            batch: 2,
            in_channels: 2,
            height: 5,
            width: 4,
            out_channels: 3,
            kernel_h: 3,
            kernel_w: 3,
            stride: 2,
            padding: 1,
        };
        let input: Vec<f64> = (0..2 * 2 * 5 * 4).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let weight: Vec<f64> = (0..3 * 2 * 9).map(|i| ((i * 5) % 7) as f64 - 3.0).collect();
        let bias = [0.5, -1.0, 2.0];
        let out = conv2d_forward(&g, &input, &weight, Some(&bias));
        let (ho, wo) = (g.out_height(), g.out_width());
        for n in 0..2 {
            for o in 0..3 {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bias[o];
                        for c in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * 2 + ky) as isize - 1;
                                    let ix = (ox * 2 + kx) as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= 5 || ix >= 4 {
                                        continue;
                                    }
                                    acc += input[((n * 2 + c) * 5 + iy as usize) * 4 + ix as usize]
                                        * weight[((o * 2 + c) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                        assert_eq!(out[((n * 3 + o) * ho + oy) * wo + ox], acc);
                    }
                }
            }
        }
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        assert_eq!(softmax_rows(&[0.0f64, 0.0], 1, 2), vec![0.5, 0.5]);
    }

    #[test]
    fn bilinear_resize_of_constant_is_constant() {
        let src = vec![3.25f32; 7 * 5];
        let out = bilinear_resize(&src, 7, 5, 4, 9);
        assert!(out.iter().all(|&v| v == 3.25));
    }
}
