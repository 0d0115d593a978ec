//! Forward kernels and their analytic backward passes.
//!
//! Every kernel here is a pure function of its inputs. The tape in
//! [`crate::graph`] stitches them together; tests call them directly.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{check_dim, invalid, Error, Result};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Convolution

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        const OP: &str = "conv2d";
        let (c_in, h, wd) = x.dims3(OP)?;
        let [c_out, wc_in, kh, kw] = *w.shape() else {
            return Err(Error::Rank {
                op: OP,
                expected: 4,
                actual: w.rank(),
            });
        };
        check_dim(OP, "input channels", wc_in, c_in)?;
        check_dim(OP, "bias length", c_out, b.dims1(OP)?)?;
        if stride == 0 {
            return Err(invalid(OP, "stride must be positive"));
        }
        if kh > h + 2 * pad {
            return Err(Error::ShapeMismatch {
                op: OP,
                dim: "kernel height (exceeds padded input)",
                expected: h + 2 * pad,
                actual: kh,
            });
        }
        if kw > wd + 2 * pad {
            return Err(Error::ShapeMismatch {
                op: OP,
                dim: "kernel width (exceeds padded input)",
                expected: wd + 2 * pad,
                actual: kw,
            });
        }
        Ok(Self {
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        })
    }

    /// Output index range `[lo, hi)` whose input coordinate
    /// `o * stride + k - pad` falls inside `[0, extent)`.
    #[inline]
    fn valid_range(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > k {
            (self.pad - k).div_ceil(s)
        } else {
            0
        };
        let top = extent + self.pad;
        let hi = if top > k {
            ((top - k - 1) / s + 1).min(out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

/// Zero-padded cross-correlation.
pub fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = ConvGeom::new(x, w, b, stride, pad)?;
    let (xd, wd) = (x.data(), w.data());
    let plane = g.oh * g.ow;
    let mut out = vec![0.0; g.c_out * plane];
    for co in 0..g.c_out {
        let o = &mut out[co * plane..(co + 1) * plane];
        o.fill(b.data()[co]);
        for ci in 0..g.c_in {
            let xp = &xd[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let (y_lo, y_hi) = g.valid_range(ky, g.h, g.oh);
                for kx in 0..g.kw {
                    let wv = wd[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x_lo, x_hi) = g.valid_range(kx, g.w, g.ow);
                    for oy in y_lo..y_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let row = &xp[iy * g.w..(iy + 1) * g.w];
                        let orow = &mut o[oy * g.ow..(oy + 1) * g.ow];
                        if g.stride == 1 {
                            let off = kx as isize - g.pad as isize;
                            for ox in x_lo..x_hi {
                                orow[ox] += wv * row[(ox as isize + off) as usize];
                            }
                        } else {
                            for ox in x_lo..x_hi {
                                orow[ox] += wv * row[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[g.c_out, g.oh, g.ow], out)
}

/// Gradients of [`conv2d_forward`] with respect to input, weight and bias.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
    gy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = ConvGeom::new(x, w, b, stride, pad)?;
    check_dim("conv2d_backward", "upstream length", g.c_out * g.oh * g.ow, gy.len())?;
    let (xd, wd, gyd) = (x.data(), w.data(), gy.data());
    let plane = g.oh * g.ow;
    let mut gx = vec![0.0; xd.len()];
    let mut gw = vec![0.0; wd.len()];
    let mut gb = vec![0.0; g.c_out];
    for co in 0..g.c_out {
        let go = &gyd[co * plane..(co + 1) * plane];
        gb[co] = go.iter().sum();
        for ci in 0..g.c_in {
            let base = ci * g.h * g.w;
            for ky in 0..g.kh {
                let (y_lo, y_hi) = g.valid_range(ky, g.h, g.oh);
                for kx in 0..g.kw {
                    let widx = ((co * g.c_in + ci) * g.kh + ky) * g.kw + kx;
                    let wv = wd[widx];
                    let (x_lo, x_hi) = g.valid_range(kx, g.w, g.ow);
                    let mut acc = 0.0;
                    for oy in y_lo..y_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let row = base + iy * g.w;
                        let grow = &go[oy * g.ow..(oy + 1) * g.ow];
                        for (ox, &gv) in grow.iter().enumerate().take(x_hi).skip(x_lo) {
                            let ix = row + ox * g.stride + kx - g.pad;
                            acc += gv * xd[ix];
                            gx[ix] += gv * wv;
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), gx)?,
        Tensor::new(w.shape(), gw)?,
        Tensor::new(b.shape(), gb)?,
    ))
}

// ---------------------------------------------------------------------------
// Fully connected

fn linear_dims(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    const OP: &str = "linear";
    let d_in = x.dims1(OP)?;
    let [d_out, wd_in] = *w.shape() else {
        return Err(Error::Rank {
            op: OP,
            expected: 2,
            actual: w.rank(),
        });
    };
    check_dim(OP, "inner dimension", wd_in, d_in)?;
    check_dim(OP, "bias length", d_out, b.dims1(OP)?)?;
    Ok((d_in, d_out))
}

/// `y_j = sum_k w_jk x_k + b_j`.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (d_in, d_out) = linear_dims(x, w, b)?;
    let xd = x.data();
    let out = (0..d_out)
        .map(|j| {
            let row = &w.data()[j * d_in..(j + 1) * d_in];
            b.data()[j] + row.iter().zip(xd).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect();
    Tensor::new(&[d_out], out)
}

pub fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    gy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (d_in, d_out) = linear_dims(x, w, b)?;
    check_dim("linear_backward", "upstream length", d_out, gy.len())?;
    let mut gx = vec![0.0; d_in];
    let mut gw = vec![0.0; d_out * d_in];
    for j in 0..d_out {
        let g = gy.data()[j];
        if g == 0.0 {
            continue;
        }
        let row = &w.data()[j * d_in..(j + 1) * d_in];
        let grow = &mut gw[j * d_in..(j + 1) * d_in];
        for k in 0..d_in {
            gx[k] += g * row[k];
            grow[k] = g * x.data()[k];
        }
    }
    Ok((
        Tensor::new(x.shape(), gx)?,
        Tensor::new(w.shape(), gw)?,
        gy.reshape(b.shape())?,
    ))
}

// ---------------------------------------------------------------------------
// Activations

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    /// Normalizes along the last axis.
    Softmax,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub fn activation_forward(kind: Activation, x: &Tensor) -> Tensor {
    match kind {
        Activation::Relu => x.map(|v| v.max(0.0)),
        Activation::Sigmoid => x.map(sigmoid),
        Activation::Softmax => {
            let n = *x.shape().last().expect("rank >= 1");
            let mut out = x.clone();
            for row in out.data_mut().chunks_mut(n) {
                let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = libm::exp(*v - m);
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v /= z;
                }
            }
            out
        }
    }
}

/// Input gradient given the forward input `x`, output `y` and upstream `gy`.
pub fn activation_backward(kind: Activation, x: &Tensor, y: &Tensor, gy: &Tensor) -> Result<Tensor> {
    x.same_shape("activation_backward", gy)?;
    match kind {
        Activation::Relu => x.zip_map(gy, |xv, g| if xv > 0.0 { g } else { 0.0 }),
        Activation::Sigmoid => y.zip_map(gy, |yv, g| g * yv * (1.0 - yv)),
        Activation::Softmax => {
            let n = *x.shape().last().expect("rank >= 1");
            let mut gx = gy.clone();
            for (grow, yrow) in gx.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                for (g, &yv) in grow.iter_mut().zip(yrow) {
                    *g = yv * (*g - dot);
                }
            }
            Ok(gx)
        }
    }
}

// ---------------------------------------------------------------------------
// Bilinear resampling

/// One-dimensional interpolation tap: `(lo, hi, frac)` with the sample at
/// `(1 - frac) * v[lo] + frac * v[hi]`.
pub type Tap = (usize, usize, f64);

/// Half-pixel-center taps with edge clamping and no corner alignment.
pub fn resize_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = libm::floor(src) as usize;
            if lo >= input - 1 {
                (input - 1, input - 1, 0.0)
            } else {
                (lo, lo + 1, src - lo as f64)
            }
        })
        .collect()
}

pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    const OP: &str = "bilinear_resize";
    let (c, h, w) = x.dims3(OP)?;
    if out_h == 0 || out_w == 0 {
        return Err(invalid(OP, "output extents must be positive"));
    }
    let ty = resize_taps(h, out_h);
    let tx = resize_taps(w, out_w);
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let p = x.plane(ch);
        for &(y0, y1, fy) in &ty {
            let (r0, r1) = (&p[y0 * w..(y0 + 1) * w], &p[y1 * w..(y1 + 1) * w]);
            for &(x0, x1, fx) in &tx {
                let top = (1.0 - fx) * r0[x0] + fx * r0[x1];
                let bot = (1.0 - fx) * r1[x0] + fx * r1[x1];
                out.push((1.0 - fy) * top + fy * bot);
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

/// Adjoint of [`bilinear_resize`] from an `[C, out_h, out_w]` gradient back
/// to `[C, h, w]`.
pub fn bilinear_resize_backward(gy: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (c, out_h, out_w) = gy.dims3("bilinear_resize_backward")?;
    let ty = resize_taps(h, out_h);
    let tx = resize_taps(w, out_w);
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        let g = gy.plane(ch);
        let dst = &mut gx[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = g[oy * out_w + ox];
                dst[y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * v;
                dst[y0 * w + x1] += (1.0 - fy) * fx * v;
                dst[y1 * w + x0] += fy * (1.0 - fx) * v;
                dst[y1 * w + x1] += fy * fx * v;
            }
        }
    }
    Tensor::new(&[c, h, w], gx)
}

// ---------------------------------------------------------------------------
// Sparse spatial maps (RoI alignment)

/// A linear map from an `h x w` grid to an `out_h x out_w` grid applied
/// independently to every channel.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialMap {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    starts: Vec<usize>,
    index: Vec<usize>,
    weight: Vec<f64>,
}

impl SpatialMap {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        const OP: &str = "spatial_map";
        let (c, h, w) = x.dims3(OP)?;
        check_dim(OP, "height", self.in_h, h)?;
        check_dim(OP, "width", self.in_w, w)?;
        let n_out = self.out_h * self.out_w;
        let mut out = Vec::with_capacity(c * n_out);
        for ch in 0..c {
            let p = x.plane(ch);
            for o in 0..n_out {
                let (s, e) = (self.starts[o], self.starts[o + 1]);
                out.push(
                    self.index[s..e]
                        .iter()
                        .zip(&self.weight[s..e])
                        .map(|(&i, &wt)| wt * p[i])
                        .sum(),
                );
            }
        }
        Tensor::new(&[c, self.out_h, self.out_w], out)
    }

    pub fn apply_transpose(&self, gy: &Tensor) -> Result<Tensor> {
        let (c, _, _) = gy.dims3("spatial_map_transpose")?;
        let n_in = self.in_h * self.in_w;
        let n_out = self.out_h * self.out_w;
        check_dim("spatial_map_transpose", "upstream length", c * n_out, gy.len())?;
        let mut gx = vec![0.0; c * n_in];
        for ch in 0..c {
            let g = gy.plane(ch);
            let dst = &mut gx[ch * n_in..(ch + 1) * n_in];
            for (o, &gv) in g.iter().enumerate() {
                let (s, e) = (self.starts[o], self.starts[o + 1]);
                for (&i, &wt) in self.index[s..e].iter().zip(&self.weight[s..e]) {
                    dst[i] += wt * gv;
                }
            }
        }
        Tensor::new(&[c, self.in_h, self.in_w], gx)
    }
}

/// Bilinear sample weights at continuous position `(py, px)`, where grid
/// value `k` sits at coordinate `k + 0.5`. Out-of-range positions clamp to
/// the border.
pub fn bilinear_point(h: usize, w: usize, py: f64, px: f64) -> [(usize, f64); 4] {
    let axis = |p: f64, n: usize| -> (usize, usize, f64) {
        let g = (p - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = libm::floor(g) as usize;
        if lo >= n - 1 {
            (n - 1, n - 1, 0.0)
        } else {
            (lo, lo + 1, g - lo as f64)
        }
    };
    let (y0, y1, fy) = axis(py, h);
    let (x0, x1, fx) = axis(px, w);
    [
        (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
        (y0 * w + x1, (1.0 - fy) * fx),
        (y1 * w + x0, fy * (1.0 - fx)),
        (y1 * w + x1, fy * fx),
    ]
}

/// RoI Align sampling map: `out x out` bins over the box
/// `[x1, y1, x2, y2]` (feature coordinates), `samples x samples` bilinear
/// points per bin averaged, no coordinate quantization.
pub fn roi_align_map(
    h: usize,
    w: usize,
    bbox: [f64; 4],
    out: usize,
    samples: usize,
) -> Result<SpatialMap> {
    const OP: &str = "roi_align";
    let [x1, y1, x2, y2] = bbox;
    if !(x2 > x1 && y2 > y1) || !bbox.iter().all(|v| v.is_finite()) {
        return Err(invalid(OP, "degenerate box: sides must be positive"));
    }
    if x2 <= 0.0 || y2 <= 0.0 || x1 >= w as f64 || y1 >= h as f64 {
        return Err(invalid(OP, "box does not intersect the feature extent"));
    }
    if out == 0 || samples == 0 {
        return Err(invalid(OP, "output size and sample count must be positive"));
    }
    let bin_h = (y2 - y1) / out as f64;
    let bin_w = (x2 - x1) / out as f64;
    let norm = 1.0 / (samples * samples) as f64;
    let mut starts = Vec::with_capacity(out * out + 1);
    let mut index = Vec::new();
    let mut weight = Vec::new();
    for by in 0..out {
        for bx in 0..out {
            starts.push(index.len());
            for sy in 0..samples {
                let py = y1 + (by as f64 + (sy as f64 + 0.5) / samples as f64) * bin_h;
                for sx in 0..samples {
                    let px = x1 + (bx as f64 + (sx as f64 + 0.5) / samples as f64) * bin_w;
                    for (i, wt) in bilinear_point(h, w, py, px) {
                        if wt != 0.0 {
                            index.push(i);
                            weight.push(wt * norm);
                        }
                    }
                }
            }
        }
    }
    starts.push(index.len());
    Ok(SpatialMap {
        in_h: h,
        in_w: w,
        out_h: out,
        out_w: out,
        starts,
        index,
        weight,
    })
}

// ---------------------------------------------------------------------------
// Normalization and reductions

/// Layer normalization of a vector followed by a per-element affine map.
pub fn layer_norm_forward(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let n = x.dims1("layer_norm")?;
    check_dim("layer_norm", "gamma length", n, gamma.len())?;
    check_dim("layer_norm", "beta length", n, beta.len())?;
    let (mean, inv) = moments(x.data(), eps);
    Tensor::new(
        &[n],
        x.data()
            .iter()
            .zip(gamma.data().iter().zip(beta.data()))
            .map(|(&v, (&g, &b))| (v - mean) * inv * g + b)
            .collect(),
    )
}

fn moments(x: &[f64], eps: f64) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / libm::sqrt(var + eps))
}

pub fn layer_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    eps: f64,
    gy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let n = x.dims1("layer_norm_backward")?;
    check_dim("layer_norm_backward", "upstream length", n, gy.len())?;
    let (mean, inv) = moments(x.data(), eps);
    let xhat: Vec<f64> = x.data().iter().map(|v| (v - mean) * inv).collect();
    let gxhat: Vec<f64> = gy.data().iter().zip(gamma.data()).map(|(g, w)| g * w).collect();
    let nf = n as f64;
    let m1 = gxhat.iter().sum::<f64>() / nf;
    let m2 = gxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / nf;
    let gx = gxhat
        .iter()
        .zip(&xhat)
        .map(|(&g, &xh)| inv * (g - m1 - xh * m2))
        .collect();
    let gg = gy.data().iter().zip(&xhat).map(|(a, b)| a * b).collect();
    Ok((
        Tensor::new(&[n], gx)?,
        Tensor::new(&[n], gg)?,
        gy.clone(),
    ))
}

/// Mean over elements of the Smooth L1 penalty with unit knee.
pub fn smooth_l1(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pred.same_shape("smooth_l1", target)?;
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let d = (p - t).abs();
            if d < 1.0 {
                0.5 * d * d
            } else {
                d - 0.5
            }
        })
        .sum();
    Ok(total / pred.len() as f64)
}

pub fn smooth_l1_grad(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let n = pred.len() as f64;
    pred.zip_map(target, |p, t| {
        let d = p - t;
        if d.abs() < 1.0 {
            d / n
        } else {
            d.signum() / n
        }
    })
}

/// `logsumexp(logits) - logits[label]`.
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<f64> {
    let k = logits.dims1("cross_entropy")?;
    if label >= k {
        return Err(invalid("cross_entropy", "label out of range"));
    }
    let z = logits.data();
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + libm::log(z.iter().map(|v| libm::exp(v - m)).sum::<f64>());
    Ok(lse - z[label])
}

pub fn cross_entropy_grad(logits: &Tensor, label: usize) -> Result<Tensor> {
    let k = logits.dims1("cross_entropy")?;
    if label >= k {
        return Err(invalid("cross_entropy", "label out of range"));
    }
    let mut p = activation_forward(Activation::Softmax, logits);
    p.data_mut()[label] -= 1.0;
    Ok(p)
}
