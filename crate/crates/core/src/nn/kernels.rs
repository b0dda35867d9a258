//! Low-level per-sample kernels on contiguous `[channel, row, col]` buffers.

use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn out_size(&self, n: usize) -> usize {
        let span = self.dilation * (self.kernel - 1) + 1;
        (n + 2 * self.padding).saturating_sub(span) / self.stride + 1
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    /// Valid output range `[lo, hi)` along one axis for kernel tap `k`.
    #[inline]
    fn valid_range(&self, k: usize, n_in: usize, n_out: usize) -> (usize, usize) {
        // input index = o*s + k*d - p must lie in [0, n_in)
        let off = (k * self.dilation) as isize - self.padding as isize;
        let s = self.stride as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = (n_in as isize - off + s - 1) / s;
        let (lo, hi) = (lo.max(0) as usize, (hi.max(0) as usize).min(n_out));
        if lo >= hi {
            (0, 0)
        } else {
            (lo, hi)
        }
    }
}

/// `cols[(c*k + ki)*k + kj, oi*wo + oj] = x[c, oi*s + ki*d - p, oj*s + kj*d - p]`.
pub fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, g: &ConvGeom, cols: &mut [T]) {
    let (ho, wo) = (g.out_size(h), g.out_size(w));
    let k = g.kernel;
    let plane = ho * wo;
    for ci in 0..c {
        let xs = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            let (r_lo, r_hi) = g.valid_range(ki, h, ho);
            for kj in 0..k {
                let (c_lo, c_hi) = g.valid_range(kj, w, wo);
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                dst.fill(T::zero());
                let col_off = (kj * g.dilation) as isize - g.padding as isize;
                for oi in r_lo..r_hi {
                    let ii = (oi * g.stride + ki * g.dilation) - g.padding;
                    let src_row = &xs[ii * w..(ii + 1) * w];
                    let drow = &mut dst[oi * wo..(oi + 1) * wo];
                    if c_lo == c_hi {
                        continue;
                    } else if g.stride == 1 {
                        let j0 = (c_lo as isize + col_off) as usize;
                        drow[c_lo..c_hi].copy_from_slice(&src_row[j0..j0 + (c_hi - c_lo)]);
                    } else {
                        for oj in c_lo..c_hi {
                            drow[oj] = src_row[(oj as isize * g.stride as isize + col_off) as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds `cols` into `dx`.
pub fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, g: &ConvGeom, dx: &mut [T]) {
    let (ho, wo) = (g.out_size(h), g.out_size(w));
    let k = g.kernel;
    let plane = ho * wo;
    for ci in 0..c {
        let xs = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            let (r_lo, r_hi) = g.valid_range(ki, h, ho);
            for kj in 0..k {
                let (c_lo, c_hi) = g.valid_range(kj, w, wo);
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                let col_off = (kj * g.dilation) as isize - g.padding as isize;
                if c_lo == c_hi {
                    continue;
                }
                let j0 = (c_lo as isize * g.stride as isize + col_off) as usize;
                for oi in r_lo..r_hi {
                    let ii = (oi * g.stride + ki * g.dilation) - g.padding;
                    let xrow = xs[ii * w + j0..(ii + 1) * w].iter_mut().step_by(g.stride);
                    for (x, &v) in xrow.zip(&src[oi * wo + c_lo..oi * wo + c_hi]) {
                        *x += v;
                    }
                }
            }
        }
    }
}

/// Depthwise convolution of one sample: one `k x k` filter per channel.
pub fn depthwise_forward<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: &ConvGeom,
    weight: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let (ho, wo) = (g.out_size(h), g.out_size(w));
    let k = g.kernel;
    for ci in 0..c {
        let xs = &x[ci * h * w..(ci + 1) * h * w];
        let os = &mut out[ci * ho * wo..(ci + 1) * ho * wo];
        os.fill(bias.map_or(T::zero(), |b| b[ci]));
        for ki in 0..k {
            let (r_lo, r_hi) = g.valid_range(ki, h, ho);
            for kj in 0..k {
                let (c_lo, c_hi) = g.valid_range(kj, w, wo);
                let wv = weight[(ci * k + ki) * k + kj];
                let col_off = (kj * g.dilation) as isize - g.padding as isize;
                if c_lo == c_hi {
                    continue;
                }
                let j0 = (c_lo as isize * g.stride as isize + col_off) as usize;
                for oi in r_lo..r_hi {
                    let ii = (oi * g.stride + ki * g.dilation) - g.padding;
                    let src = xs[ii * w + j0..(ii + 1) * w].iter().step_by(g.stride);
                    for (d, &x) in os[oi * wo + c_lo..oi * wo + c_hi].iter_mut().zip(src) {
                        *d += wv * x;
                    }
                }
            }
        }
    }
}

/// Gradients of [`depthwise_forward`]; accumulates into `dw`, `db` and `dx`.
#[allow(clippy::too_many_arguments)]
pub fn depthwise_backward<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: &ConvGeom,
    weight: &[T],
    dy: &[T],
    dw: &mut [T],
    db: Option<&mut [T]>,
    dx: &mut [T],
) {
    let (ho, wo) = (g.out_size(h), g.out_size(w));
    let k = g.kernel;
    if let Some(db) = db {
        for ci in 0..c {
            db[ci] += dy[ci * ho * wo..(ci + 1) * ho * wo].iter().copied().sum::<T>();
        }
    }
    for ci in 0..c {
        let xs = &x[ci * h * w..(ci + 1) * h * w];
        let dxs = &mut dx[ci * h * w..(ci + 1) * h * w];
        let dys = &dy[ci * ho * wo..(ci + 1) * ho * wo];
        for ki in 0..k {
            let (r_lo, r_hi) = g.valid_range(ki, h, ho);
            for kj in 0..k {
                let (c_lo, c_hi) = g.valid_range(kj, w, wo);
                let widx = (ci * k + ki) * k + kj;
                let wv = weight[widx];
                let col_off = (kj * g.dilation) as isize - g.padding as isize;
                if c_lo == c_hi {
                    continue;
                }
                let j0 = (c_lo as isize * g.stride as isize + col_off) as usize;
                let mut acc = T::zero();
                for oi in r_lo..r_hi {
                    let ii = (oi * g.stride + ki * g.dilation) - g.padding;
                    let dyr = &dys[oi * wo + c_lo..oi * wo + c_hi];
                    let xr = xs[ii * w + j0..(ii + 1) * w].iter().step_by(g.stride);
                    acc += dyr.iter().zip(xr).map(|(&d, &x)| d * x).sum::<T>();
                    let dxr = dxs[ii * w + j0..(ii + 1) * w].iter_mut().step_by(g.stride);
                    for (dx, &d) in dxr.zip(dyr) {
                        *dx += wv * d;
                    }
                }
                dw[widx] += acc;
            }
        }
    }
}

/// Source taps for bilinear resizing by an integer factor (half-pixel centers).
pub fn bilinear_taps(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}
