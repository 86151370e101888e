//! Dense kernels used by the graph ops: im2col convolution, bilinear
//! resampling and 2x2 pooling. All tensors are `[C, H, W]`.

use super::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        conv_out_len(self.height, self.kernel, self.stride, self.padding, self.dilation)
    }

    pub fn out_width(&self) -> usize {
        conv_out_len(self.width, self.kernel, self.stride, self.padding, self.dilation)
    }

    /// Rows of the column matrix (`Cin * k * k`).
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// A 1x1, stride-1, unpadded convolution reads its input as the column
    /// matrix directly.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

pub fn conv_out_len(len: usize, kernel: usize, stride: usize, padding: usize, dilation: usize) -> usize {
    let span = dilation * (kernel - 1) + 1;
    let padded = len + 2 * padding;
    assert!(padded >= span, "convolution window larger than padded input");
    (padded - span) / stride + 1
}

/// Output columns `[lo, hi)` whose stride-1 input column `ox + offset`
/// lies inside `0..width`.
fn valid_span(offset: isize, out_width: usize, width: usize) -> (usize, usize) {
    let lo = (-offset).clamp(0, out_width as isize) as usize;
    let hi = (width as isize - offset).clamp(0, out_width as isize) as usize;
    (lo, hi.max(lo))
}

/// Unfolds `x` into a `[Cin*k*k, Ho*Wo]` column matrix.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let n = ho * wo;
    debug_assert_eq!(cols.len(), g.patch_len() * n);
    let (h, w) = (g.height as isize, g.width as isize);
    let k = g.kernel;
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                let dy = (ky * g.dilation) as isize - g.padding as isize;
                let dx = (kx * g.dilation) as isize - g.padding as isize;
                for oy in 0..ho {
                    let iy = (oy * g.stride) as isize + dy;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(dx, wo, g.width);
                        out_row[..lo].iter_mut().for_each(|v| *v = T::zero());
                        out_row[hi..].iter_mut().for_each(|v| *v = T::zero());
                        if lo < hi {
                            let s0 = (lo as isize + dx) as usize;
                            out_row[lo..hi].copy_from_slice(&src_row[s0..s0 + hi - lo]);
                        }
                        continue;
                    }
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride) as isize + dx;
                        *v = if ix < 0 || ix >= w {
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

/// Adjoint of [`im2col`]: scatters column gradients back onto `dx`.
pub fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let n = ho * wo;
    let (h, w) = (g.height as isize, g.width as isize);
    let k = g.kernel;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                let dy = (ky * g.dilation) as isize - g.padding as isize;
                let dxo = (kx * g.dilation) as isize - g.padding as isize;
                for oy in 0..ho {
                    let iy = (oy * g.stride) as isize + dy;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(dxo, wo, g.width);
                        if lo < hi {
                            let d0 = (lo as isize + dxo) as usize;
                            let src_row = &src[oy * wo + lo..oy * wo + hi];
                            for (d, &v) in dst_row[d0..d0 + hi - lo].iter_mut().zip(src_row) {
                                *d = *d + v;
                            }
                        }
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * g.stride) as isize + dxo;
                        if ix >= 0 && ix < w {
                            dst_row[ix as usize] = dst_row[ix as usize] + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Per-axis bilinear taps `(i0, i1, w0, w1)` with half-pixel centres
/// (`align_corners = false`), clamped at the border.
pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let w1 = src - i0 as f64;
            let w1 = if i1 == i0 { 0.0 } else { w1 };
            (i0, i1, 1.0 - w1, w1)
        })
        .collect()
}

pub fn resize_bilinear<T: Scalar>(
    x: &[T],
    channels: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![T::zero(); channels * oh * ow];
    for c in 0..channels {
        let src = &x[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * oh * ow..(c + 1) * oh * ow];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::of(wy0), T::of(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::of(wx0), T::of(wx1));
                let top = src[y0 * w + x0] * wx0 + src[y0 * w + x1] * wx1;
                let bot = src[y1 * w + x0] * wx0 + src[y1 * w + x1] * wx1;
                dst[oy * ow + ox] = top * wy0 + bot * wy1;
            }
        }
    }
    out
}

pub fn resize_bilinear_backward<T: Scalar>(
    dy: &[T],
    channels: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    dx: &mut [T],
) {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    for c in 0..channels {
        let src = &dy[c * oh * ow..(c + 1) * oh * ow];
        let dst = &mut dx[c * h * w..(c + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::of(wy0), T::of(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::of(wx0), T::of(wx1));
                let g = src[oy * ow + ox];
                let gt = g * wy0;
                let gb = g * wy1;
                dst[y0 * w + x0] = dst[y0 * w + x0] + gt * wx0;
                dst[y0 * w + x1] = dst[y0 * w + x1] + gt * wx1;
                dst[y1 * w + x0] = dst[y1 * w + x0] + gb * wx0;
                dst[y1 * w + x1] = dst[y1 * w + x1] + gb * wx1;
            }
        }
    }
}

/// 2x2 stride-2 max pooling; returns values and flat argmax indices.
pub fn max_pool2<T: Scalar>(x: &[T], channels: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(channels * oh * ow);
    let mut arg = Vec::with_capacity(channels * oh * ow);
    for c in 0..channels {
        let base = c * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub fn avg_pool2<T: Scalar>(x: &[T], channels: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut out = Vec::with_capacity(channels * oh * ow);
    for c in 0..channels {
        let base = c * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i = base + 2 * oy * w + 2 * ox;
                out.push((x[i] + x[i + 1] + x[i + w] + x[i + w + 1]) * quarter);
            }
        }
    }
    out
}
