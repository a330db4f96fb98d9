//! Forward and backward kernels over raw slices.
//!
//! Every kernel computes one sample at a time with a fixed loop order, so a
//! sample's result does not depend on what else is in the batch.

/// Output width of a 1D convolution or pooling window.
pub fn output_width(width: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = width + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output positions `t` in `[lo, hi)` for which tap `kk` reads inside the input.
#[inline]
fn tap_range(kk: usize, stride: usize, padding: usize, width: usize, out_width: usize) -> (usize, usize, isize) {
    let off = kk as isize - padding as isize;
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize).div_ceil(stride)
    };
    let lim = width as isize - 1 - off;
    if lim < 0 {
        return (0, 0, off);
    }
    let hi = (lim as usize / stride + 1).min(out_width);
    (lo.min(hi), hi, off)
}

/// `out[t] += wt * x[t*stride + off]` over the valid range.
#[inline]
fn axpy_taps(out: &mut [f64], x: &[f64], wt: f64, lo: usize, hi: usize, off: isize, stride: usize) {
    if stride == 1 {
        let start = (lo as isize + off) as usize;
        let src = &x[start..start + (hi - lo)];
        for (o, v) in out[lo..hi].iter_mut().zip(src) {
            *o += wt * v;
        }
    } else {
        for t in lo..hi {
            out[t] += wt * x[(t as isize * stride as isize + off) as usize];
        }
    }
}

/// `Σ_t a[t] * x[t*stride + off]` over the valid range.
#[inline]
fn dot_taps(a: &[f64], x: &[f64], lo: usize, hi: usize, off: isize, stride: usize) -> f64 {
    if stride == 1 {
        let start = (lo as isize + off) as usize;
        dot(&a[lo..hi], &x[start..start + (hi - lo)])
    } else {
        (lo..hi)
            .map(|t| a[t] * x[(t as isize * stride as isize + off) as usize])
            .sum()
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, ra) = a.as_chunks::<4>();
    let (cb, rb) = b.as_chunks::<4>();
    for (p, q) in ca.iter().zip(cb) {
        for k in 0..4 {
            acc[k] += p[k] * q[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(p, q)| p * q).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `dx[t*stride + off] += wt * g[t]` over the valid range.
#[inline]
fn scatter_taps(dx: &mut [f64], g: &[f64], wt: f64, lo: usize, hi: usize, off: isize, stride: usize) {
    if stride == 1 {
        let start = (lo as isize + off) as usize;
        for (d, v) in dx[start..start + (hi - lo)].iter_mut().zip(&g[lo..hi]) {
            *d += wt * v;
        }
    } else {
        for t in lo..hi {
            dx[(t as isize * stride as isize + off) as usize] += wt * g[t];
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_width: usize,
}

/// Full channel-mixing cross-correlation. `weight` is `(out, in, kernel)`.
pub fn conv1d_forward(x: &[f64], weight: &[f64], bias: Option<&[f64]>, d: &ConvDims) -> Vec<f64> {
    let mut out = vec![0.0; d.batch * d.out_channels * d.out_width];
    for b in 0..d.batch {
        for o in 0..d.out_channels {
            let row = &mut out[(b * d.out_channels + o) * d.out_width..][..d.out_width];
            if let Some(bias) = bias {
                row.fill(bias[o]);
            }
            for i in 0..d.in_channels {
                let xr = &x[(b * d.in_channels + i) * d.width..][..d.width];
                for kk in 0..d.kernel {
                    let wt = weight[(o * d.in_channels + i) * d.kernel + kk];
                    let (lo, hi, off) = tap_range(kk, d.stride, d.padding, d.width, d.out_width);
                    axpy_taps(row, xr, wt, lo, hi, off, d.stride);
                }
            }
        }
    }
    out
}

/// Gradients of [`conv1d_forward`] with respect to input, weight and bias.
pub fn conv1d_backward(dout: &[f64], x: &[f64], weight: &[f64], d: &ConvDims) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; weight.len()];
    let mut db = vec![0.0; d.out_channels];
    for b in 0..d.batch {
        for o in 0..d.out_channels {
            let g = &dout[(b * d.out_channels + o) * d.out_width..][..d.out_width];
            db[o] += g.iter().sum::<f64>();
            for i in 0..d.in_channels {
                let base = (b * d.in_channels + i) * d.width;
                for kk in 0..d.kernel {
                    let widx = (o * d.in_channels + i) * d.kernel + kk;
                    let (lo, hi, off) = tap_range(kk, d.stride, d.padding, d.width, d.out_width);
                    dw[widx] += dot_taps(g, &x[base..base + d.width], lo, hi, off, d.stride);
                    scatter_taps(&mut dx[base..base + d.width], g, weight[widx], lo, hi, off, d.stride);
                }
            }
        }
    }
    (dx, dw, db)
}

/// Per-channel convolution with "same" padding and stride 1.
/// `weight` is `(channels, 1, kernel)`.
pub fn depthwise_forward(
    x: &[f64],
    weight: &[f64],
    batch: usize,
    channels: usize,
    width: usize,
    kernel: usize,
) -> Vec<f64> {
    let pad = (kernel - 1) / 2;
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let base = (b * channels + c) * width;
            let xr = &x[base..base + width];
            let row = &mut out[base..base + width];
            for kk in 0..kernel {
                let (lo, hi, off) = tap_range(kk, 1, pad, width, width);
                axpy_taps(row, xr, weight[c * kernel + kk], lo, hi, off, 1);
            }
        }
    }
    out
}

pub fn depthwise_backward(
    dout: &[f64],
    x: &[f64],
    weight: &[f64],
    batch: usize,
    channels: usize,
    width: usize,
    kernel: usize,
) -> (Vec<f64>, Vec<f64>) {
    let pad = (kernel - 1) / 2;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; weight.len()];
    for b in 0..batch {
        for c in 0..channels {
            let base = (b * channels + c) * width;
            let g = &dout[base..base + width];
            for kk in 0..kernel {
                let (lo, hi, off) = tap_range(kk, 1, pad, width, width);
                dw[c * kernel + kk] += dot_taps(g, &x[base..base + width], lo, hi, off, 1);
                let wt = weight[c * kernel + kk];
                let start = (lo as isize + off) as usize;
                for (dxv, gv) in dx[base + start..base + start + (hi - lo)].iter_mut().zip(&g[lo..hi]) {
                    *dxv += wt * gv;
                }
            }
        }
    }
    (dx, dw)
}

/// Per-channel mean and biased variance over batch × width.
pub fn channel_moments(x: &[f64], batch: usize, channels: usize, width: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (batch * width) as f64;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for c in 0..channels {
        let mut s = 0.0;
        for b in 0..batch {
            s += x[(b * channels + c) * width..][..width].iter().sum::<f64>();
        }
        let mu = s / m;
        let mut ss = 0.0;
        for b in 0..batch {
            ss += x[(b * channels + c) * width..][..width]
                .iter()
                .map(|v| (v - mu) * (v - mu))
                .sum::<f64>();
        }
        mean[c] = mu;
        var[c] = ss / m;
    }
    (mean, var)
}

/// Normalize with the given per-channel statistics; returns `(y, xhat)`.
pub fn batch_norm_apply(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    inv_std: &[f64],
    batch: usize,
    channels: usize,
    width: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let base = (b * channels + c) * width;
            for t in base..base + width {
                let h = (x[t] - mean[c]) * inv_std[c];
                xhat[t] = h;
                y[t] = gamma[c] * h + beta[c];
            }
        }
    }
    (y, xhat)
}

/// Backward of batch norm. With `batch_stats` the statistics were computed
/// from the input itself and their dependence on it is included.
pub fn batch_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    gamma: &[f64],
    inv_std: &[f64],
    batch_stats: bool,
    batch: usize,
    channels: usize,
    width: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let m = (batch * width) as f64;
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    for b in 0..batch {
        for c in 0..channels {
            let base = (b * channels + c) * width;
            for t in base..base + width {
                dgamma[c] += dy[t] * xhat[t];
                dbeta[c] += dy[t];
            }
        }
    }
    let mut dx = vec![0.0; dy.len()];
    for b in 0..batch {
        for c in 0..channels {
            let base = (b * channels + c) * width;
            let k = gamma[c] * inv_std[c];
            for t in base..base + width {
                dx[t] = if batch_stats {
                    k / m * (m * dy[t] - dbeta[c] - xhat[t] * dgamma[c])
                } else {
                    k * dy[t]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Windowed max along width. Returns values and the flat argmax index of
/// each output (first index wins ties).
pub fn max_pool_forward(
    x: &[f64],
    rows: usize,
    width: usize,
    window: usize,
    stride: usize,
    out_width: usize,
) -> (Vec<f64>, Vec<usize>) {
    let mut out = Vec::with_capacity(rows * out_width);
    let mut arg = Vec::with_capacity(rows * out_width);
    for r in 0..rows {
        let base = r * width;
        for j in 0..out_width {
            let start = base + j * stride;
            let mut best = start;
            for k in start + 1..start + window {
                if x[k] > x[best] {
                    best = k;
                }
            }
            out.push(x[best]);
            arg.push(best);
        }
    }
    (out, arg)
}

/// `y = x W^T + b` for `x` of shape `(batch, features)`, `W` of `(out, features)`.
pub fn linear_forward(x: &[f64], weight: &[f64], bias: &[f64], batch: usize, features: usize, out: usize) -> Vec<f64> {
    let mut y = vec![0.0; batch * out];
    for b in 0..batch {
        let xr = &x[b * features..][..features];
        for o in 0..out {
            let wr = &weight[o * features..][..features];
            y[b * out + o] = bias[o] + xr.iter().zip(wr).map(|(p, q)| p * q).sum::<f64>();
        }
    }
    y
}

pub fn linear_backward(
    dy: &[f64],
    x: &[f64],
    weight: &[f64],
    batch: usize,
    features: usize,
    out: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; weight.len()];
    let mut db = vec![0.0; out];
    for b in 0..batch {
        let xr = &x[b * features..][..features];
        for o in 0..out {
            let g = dy[b * out + o];
            db[o] += g;
            let wr = &weight[o * features..][..features];
            for ((dxv, dwv), (xv, wv)) in dx[b * features..][..features]
                .iter_mut()
                .zip(&mut dw[o * features..][..features])
                .zip(xr.iter().zip(wr))
            {
                *dxv += g * wv;
                *dwv += g * xv;
            }
        }
    }
    (dx, dw, db)
}

/// Logistic function, evaluated without overflow for large `|x|`.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
