//! Differentiable tensor operations. Each forward function has a matching
//! `*_backward` that maps the output gradient to input (and parameter)
//! gradients.

use rayon::prelude::*;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Output spatial size of a convolution.
fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if size + 2 * pad < k {
        return Err(Error::dim(format!("input extent {size} smaller than kernel {k}")));
    }
    Ok((size + 2 * pad - k) / stride + 1)
}

fn check_conv(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize) -> Result<()> {
    if stride == 0 {
        return Err(Error::param("stride must be at least 1"));
    }
    let [_, _, cin, cout] = weight.shape();
    if x.channels() != cin {
        return Err(Error::dim(format!(
            "conv expects {cin} input channels, got {}",
            x.channels()
        )));
    }
    if bias.len() != cout {
        return Err(Error::dim(format!("bias has {} entries, expected {cout}", bias.len())));
    }
    Ok(())
}

/// Cross-correlation with zero padding. `weight` is `(kh, kw, cin, cout)`,
/// `bias` holds `cout` values.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    check_conv(x, weight, bias, stride)?;
    let [n, h, w, cin] = x.shape();
    let [kh, kw, _, cout] = weight.shape();
    let oh = conv_out(h, kh, stride, padding)?;
    let ow = conv_out(w, kw, stride, padding)?;
    let mut out = Tensor::zeros([n, oh, ow, cout]);
    let xd = x.data();
    let wd = weight.data();
    let bd = bias.data();
    out.data_mut()
        .par_chunks_mut(ow * cout)
        .enumerate()
        .for_each(|(row, orow)| {
            let b = row / oh;
            let oy = row % oh;
            for ox in 0..ow {
                let acc = &mut orow[ox * cout..(ox + 1) * cout];
                acc.copy_from_slice(bd);
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let xbase = ((b * h + iy as usize) * w + ix as usize) * cin;
                        let wbase = (ky * kw + kx) * cin * cout;
                        for ci in 0..cin {
                            let xv = xd[xbase + ci];
                            let wrow = &wd[wbase + ci * cout..wbase + (ci + 1) * cout];
                            for (a, &wv) in acc.iter_mut().zip(wrow) {
                                *a += xv * wv;
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Gradients of [`conv2d`]: `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let [n, h, w, cin] = x.shape();
    let [kh, kw, wcin, cout] = weight.shape();
    if wcin != cin {
        return Err(Error::dim("conv backward channel mismatch"));
    }
    let oh = conv_out(h, kh, stride, padding)?;
    let ow = conv_out(w, kw, stride, padding)?;
    if grad_out.shape() != [n, oh, ow, cout] {
        return Err(Error::dim(format!(
            "conv grad shape {:?}, expected {:?}",
            grad_out.shape(),
            [n, oh, ow, cout]
        )));
    }
    let xd = x.data();
    let wd = weight.data();
    let gd = grad_out.data();

    // Bias: sum over every output position.
    let mut db = Tensor::zeros([1, 1, 1, cout]);
    for chunk in gd.chunks(cout) {
        for (a, g) in db.data_mut().iter_mut().zip(chunk) {
            *a += g;
        }
    }

    // Weight: one independent task per (ky, kx, ci) row of cout values.
    let mut dw = Tensor::zeros(weight.shape());
    dw.data_mut().par_chunks_mut(cout).enumerate().for_each(|(tap, acc)| {
        let ci = tap % cin;
        let kx = (tap / cin) % kw;
        let ky = tap / (cin * kw);
        for b in 0..n {
            for oy in 0..oh {
                let iy = (oy * stride + ky) as isize - padding as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for ox in 0..ow {
                    let ix = (ox * stride + kx) as isize - padding as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let xv = xd[((b * h + iy as usize) * w + ix as usize) * cin + ci];
                    if xv == 0.0 {
                        continue;
                    }
                    let gbase = ((b * oh + oy) * ow + ox) * cout;
                    for (a, &g) in acc.iter_mut().zip(&gd[gbase..gbase + cout]) {
                        *a += xv * g;
                    }
                }
            }
        }
    });

    // Input: gather over the output positions each input pixel feeds.
    let mut dx = Tensor::zeros(x.shape());
    dx.data_mut().par_chunks_mut(w * cin).enumerate().for_each(|(row, drow)| {
        let b = row / h;
        let iy = row % h;
        for ix in 0..w {
            let acc = &mut drow[ix * cin..(ix + 1) * cin];
            for ky in 0..kh {
                let ny = iy as isize + padding as isize - ky as isize;
                if ny < 0 || ny % stride as isize != 0 {
                    continue;
                }
                let oy = (ny / stride as isize) as usize;
                if oy >= oh {
                    continue;
                }
                for kx in 0..kw {
                    let nx = ix as isize + padding as isize - kx as isize;
                    if nx < 0 || nx % stride as isize != 0 {
                        continue;
                    }
                    let ox = (nx / stride as isize) as usize;
                    if ox >= ow {
                        continue;
                    }
                    let grow = &gd[((b * oh + oy) * ow + ox) * cout..][..cout];
                    let wbase = (ky * kw + kx) * cin * cout;
                    for (ci, a) in acc.iter_mut().enumerate() {
                        let wrow = &wd[wbase + ci * cout..wbase + (ci + 1) * cout];
                        *a += wrow.iter().zip(grow).map(|(p, q)| p * q).sum::<f64>();
                    }
                }
            }
        }
    });
    Ok((dx, dw, db))
}

/// Elementwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    match kind {
        Activation::Relu => x.map(|v| v.max(0.0)),
        Activation::Sigmoid => x.map(sigmoid),
    }
}

/// Backward of [`activation`] given its forward output `y`.
pub fn activation_backward(y: &Tensor, kind: Activation, grad_out: &Tensor) -> Result<Tensor> {
    y.ensure_shape(grad_out)?;
    let mut g = grad_out.clone();
    match kind {
        Activation::Relu => {
            for (gv, &yv) in g.data_mut().iter_mut().zip(y.data()) {
                if yv <= 0.0 {
                    *gv = 0.0;
                }
            }
        }
        Activation::Sigmoid => {
            for (gv, &yv) in g.data_mut().iter_mut().zip(y.data()) {
                *gv *= yv * (1.0 - yv);
            }
        }
    }
    Ok(g)
}

/// Per-sample, per-channel spatial mean: `(N, H, W, C) → (N, 1, 1, C)`.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let [n, h, w, c] = x.shape();
    let mut out = Tensor::zeros([n, 1, 1, c]);
    let area = (h * w) as f64;
    for b in 0..n {
        for p in 0..h * w {
            let base = (b * h * w + p) * c;
            for k in 0..c {
                out.data_mut()[b * c + k] += x.data()[base + k];
            }
        }
    }
    for v in out.data_mut() {
        *v /= area;
    }
    out
}

pub fn global_avg_pool_backward(input_shape: [usize; 4], grad_out: &Tensor) -> Tensor {
    let [_, h, w, c] = input_shape;
    let area = (h * w) as f64;
    Tensor::from_fn(input_shape, |b, _, _, k| grad_out.data()[b * c + k] / area)
}

/// 2×2 average pooling with stride 2. Height and width must be even.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let [n, h, w, c] = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim(format!("avg_pool2 needs even extents, got {h}x{w}")));
    }
    Ok(Tensor::from_fn([n, h / 2, w / 2, c], |b, y, xx, k| {
        0.25 * (x.at(b, 2 * y, 2 * xx, k)
            + x.at(b, 2 * y, 2 * xx + 1, k)
            + x.at(b, 2 * y + 1, 2 * xx, k)
            + x.at(b, 2 * y + 1, 2 * xx + 1, k))
    }))
}

pub fn avg_pool2_backward(input_shape: [usize; 4], grad_out: &Tensor) -> Tensor {
    Tensor::from_fn(input_shape, |b, y, x, k| 0.25 * grad_out.at(b, y / 2, x / 2, k))
}

/// Resampling kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleMode {
    Nearest,
    Bilinear,
}

/// Source coordinate of output index `i` under corner alignment.
#[inline]
fn source_coord(i: usize, out: usize, input: usize) -> f64 {
    if out <= 1 || input <= 1 {
        0.0
    } else {
        i as f64 * (input - 1) as f64 / (out - 1) as f64
    }
}

/// For each output index, the contributing `(index, weight)` taps.
fn resample_taps(out: usize, input: usize, mode: ResampleMode) -> Vec<[(usize, f64); 2]> {
    (0..out)
        .map(|i| {
            let s = source_coord(i, out, input);
            match mode {
                ResampleMode::Nearest => {
                    let k = (s.round() as usize).min(input - 1);
                    [(k, 1.0), (k, 0.0)]
                }
                ResampleMode::Bilinear => {
                    let lo = (s.floor() as usize).min(input - 1);
                    let hi = (lo + 1).min(input - 1);
                    let f = s - lo as f64;
                    [(lo, 1.0 - f), (hi, f)]
                }
            }
        })
        .collect()
}

/// Resamples the spatial axes to `target_h × target_w` with corner-aligned
/// sampling positions.
pub fn resample(x: &Tensor, target_h: usize, target_w: usize, mode: ResampleMode) -> Result<Tensor> {
    let [n, h, w, c] = x.shape();
    if target_h == 0 || target_w == 0 || h == 0 || w == 0 {
        return Err(Error::dim("resample extents must be positive"));
    }
    if (h, w) == (target_h, target_w) {
        return Ok(x.clone());
    }
    let ty = resample_taps(target_h, h, mode);
    let tx = resample_taps(target_w, w, mode);
    let mut out = Tensor::zeros([n, target_h, target_w, c]);
    for b in 0..n {
        for (oy, ry) in ty.iter().enumerate() {
            for (ox, rx) in tx.iter().enumerate() {
                let o = out.index(b, oy, ox, 0);
                for &(iy, wy) in ry {
                    for &(ix, wx) in rx {
                        let wgt = wy * wx;
                        if wgt == 0.0 {
                            continue;
                        }
                        let i = x.index(b, iy, ix, 0);
                        for k in 0..c {
                            out.data_mut()[o + k] += wgt * x.data()[i + k];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn resample_backward(input_shape: [usize; 4], grad_out: &Tensor, mode: ResampleMode) -> Result<Tensor> {
    let [n, h, w, c] = input_shape;
    let [gn, th, tw, gc] = grad_out.shape();
    if gn != n || gc != c {
        return Err(Error::dim("resample grad shape mismatch"));
    }
    if (h, w) == (th, tw) {
        return Ok(grad_out.clone());
    }
    let ty = resample_taps(th, h, mode);
    let tx = resample_taps(tw, w, mode);
    let mut dx = Tensor::zeros(input_shape);
    for b in 0..n {
        for (oy, ry) in ty.iter().enumerate() {
            for (ox, rx) in tx.iter().enumerate() {
                let o = grad_out.index(b, oy, ox, 0);
                for &(iy, wy) in ry {
                    for &(ix, wx) in rx {
                        let wgt = wy * wx;
                        if wgt == 0.0 {
                            continue;
                        }
                        let i = dx.index(b, iy, ix, 0);
                        for k in 0..c {
                            dx.data_mut()[i + k] += wgt * grad_out.data()[o + k];
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}

/// Concatenates along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [n, h, w, ca] = a.shape();
    let [nb, hb, wb, cb] = b.shape();
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::dim(format!("cannot concat {:?} with {:?}", a.shape(), b.shape())));
    }
    let mut data = Vec::with_capacity(n * h * w * (ca + cb));
    for (pa, pb) in a.data().chunks(ca.max(1)).zip(b.data().chunks(cb.max(1))) {
        data.extend_from_slice(&pa[..ca]);
        data.extend_from_slice(&pb[..cb]);
    }
    Tensor::from_vec([n, h, w, ca + cb], data)
}

/// Splits a channel-concatenated gradient back into its two parts.
pub fn split_channels(g: &Tensor, ca: usize) -> Result<(Tensor, Tensor)> {
    let [n, h, w, c] = g.shape();
    if ca > c {
        return Err(Error::dim("split point beyond channel count"));
    }
    let cb = c - ca;
    let mut da = Vec::with_capacity(n * h * w * ca);
    let mut db = Vec::with_capacity(n * h * w * cb);
    for px in g.data().chunks(c) {
        da.extend_from_slice(&px[..ca]);
        db.extend_from_slice(&px[ca..]);
    }
    Ok((Tensor::from_vec([n, h, w, ca], da)?, Tensor::from_vec([n, h, w, cb], db)?))
}

/// Mean absolute error and its gradient with respect to `pred`.
///
/// With `smoothing = None` the exact absolute value is used (subgradient 0 at
/// 0); `Some(eps)` replaces `|d|` with `sqrt(d² + eps²) − eps`, which is
/// differentiable everywhere and is what finite-difference checks use.
pub fn l1_loss(pred: &Tensor, target: &Tensor, smoothing: Option<f64>) -> Result<(f64, Tensor)> {
    pred.ensure_shape(target)?;
    let count = pred.len().max(1) as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let mut total = 0.0;
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p - t;
        match smoothing {
            None => {
                total += d.abs();
                *g = if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                } / count;
            }
            Some(eps) => {
                let r = (d * d + eps * eps).sqrt();
                total += r - eps;
                *g = d / r / count;
            }
        }
    }
    Ok((total / count, grad))
}
