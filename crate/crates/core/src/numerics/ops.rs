//! Tensor kernels with hand-derived backward passes.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Softmax along `axis`, computed with max subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::InvalidArgument(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    x.ensure_finite("softmax input")?;
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let at = |j: usize| base + j * inner;
            let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                let e = (src[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[at(j)] /= total;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Mean cross-entropy of `[N,K]` logits against class indices.
///
/// Returns the loss and `(softmax - onehot) / count` on non-ignored rows.
pub fn cross_entropy(logits: &Tensor, labels: &[usize], ignore_index: Option<usize>) -> Result<(f64, Tensor)> {
    let (n, k) = match logits.shape() {
        &[n, k] => (n, k),
        s => return Err(Error::Shape(format!("expected [N,K] logits, got {s:?}"))),
    };
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} logit rows", labels.len())));
    }
    let probs = softmax(logits, 1)?;
    let mut grad = Tensor::zeros(&[n, k]);
    let mut loss = 0.0;
    let mut count = 0usize;
    for (row, &label) in labels.iter().enumerate() {
        if Some(label) == ignore_index {
            continue;
        }
        if label >= k {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {k} classes"
            )));
        }
        count += 1;
        let p = &probs.data()[row * k..(row + 1) * k];
        let z = &logits.data()[row * k..(row + 1) * k];
        loss += log_sum_exp(z) - z[label];
        let g = &mut grad.data_mut()[row * k..(row + 1) * k];
        g.copy_from_slice(p);
        g[label] -= 1.0;
    }
    if count == 0 {
        return Err(Error::EmptyLoss);
    }
    let inv = 1.0 / count as f64;
    grad.data_mut().iter_mut().for_each(|g| *g *= inv);
    Ok((loss * inv, grad))
}

/// Per-pixel cross-entropy for channel-first `[K,H,W]` logits.
///
/// Same semantics as [`cross_entropy`] applied to the `[H*W, K]` transpose.
pub fn pixel_cross_entropy(logits: &Tensor, labels: &[u8], ignore: u8) -> Result<(f64, Tensor)> {
    let (k, h, w) = logits.chw()?;
    let plane = h * w;
    if labels.len() != plane {
        return Err(Error::Shape(format!(
            "label map has {} pixels, logits have {plane}",
            labels.len()
        )));
    }
    let z = logits.data();
    let mut grad = Tensor::zeros(&[k, h, w]);
    let g = grad.data_mut();
    let mut loss = 0.0;
    let mut count = 0usize;
    let mut column = vec![0.0; k];
    for (px, &label) in labels.iter().enumerate() {
        if label == ignore {
            continue;
        }
        let label = label as usize;
        if label >= k {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {k} classes"
            )));
        }
        count += 1;
        for (c, slot) in column.iter_mut().enumerate() {
            *slot = z[c * plane + px];
        }
        let max = column.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = column.iter().map(|v| (v - max).exp()).sum();
        loss += max + total.ln() - column[label];
        for (c, &v) in column.iter().enumerate() {
            g[c * plane + px] = (v - max).exp() / total;
        }
        g[label * plane + px] -= 1.0;
    }
    if count == 0 {
        return Err(Error::EmptyLoss);
    }
    let inv = 1.0 / count as f64;
    g.iter_mut().for_each(|v| *v *= inv);
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross-entropy"));
    }
    Ok((loss * inv, grad))
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Geometry of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub const fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }

    fn output_extent(&self, input: usize, k: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if padded < k || self.stride == 0 {
            return Err(Error::Shape(format!(
                "kernel {k} does not fit input {input} with padding {}",
                self.padding
            )));
        }
        Ok((padded - k) / self.stride + 1)
    }

    /// Output indices `o` for which `o*stride + tap - padding` lands in `0..input`.
    fn valid_range(&self, tap: usize, input: usize, output: usize) -> std::ops::Range<usize> {
        let s = self.stride as isize;
        let offset = tap as isize - self.padding as isize;
        let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
        let hi = (input as isize - 1 - offset).div_euclid(s) + 1;
        let hi = hi.clamp(0, output as isize);
        (lo.min(hi) as usize)..(hi as usize)
    }
}

fn conv_shapes(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    let (c, h, wd) = x.chw()?;
    let (f, wc, k) = match w.shape() {
        &[f, wc, k1, k2] if k1 == k2 => (f, wc, k1),
        s => return Err(Error::Shape(format!("expected [F,C,k,k] weights, got {s:?}"))),
    };
    if wc != c {
        return Err(Error::Shape(format!(
            "weights expect {wc} input channels, input has {c}"
        )));
    }
    if k % 2 == 0 {
        return Err(Error::InvalidArgument(format!("kernel size {k} must be odd")));
    }
    if b.shape() != [f] {
        return Err(Error::Shape(format!(
            "bias shape {:?} does not match {f} filters",
            b.shape()
        )));
    }
    Ok((c, h, wd, f, k))
}

/// Cross-correlation of `x: [C,H,W]` with `w: [F,C,k,k]` plus bias.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, geom: ConvGeometry) -> Result<Tensor> {
    let (c_in, h, wd, f_out, k) = conv_shapes(x, w, b)?;
    let oh = geom.output_extent(h, k)?;
    let ow = geom.output_extent(wd, k)?;
    let s = geom.stride;
    let mut out = vec![0.0; f_out * oh * ow];
    let xs = x.data();
    let ws = w.data();
    let col_ranges: Vec<_> = (0..k).map(|kx| geom.valid_range(kx, wd, ow)).collect();
    for f in 0..f_out {
        let out_plane = &mut out[f * oh * ow..(f + 1) * oh * ow];
        out_plane.iter_mut().for_each(|v| *v = b.data()[f]);
        for c in 0..c_in {
            let in_plane = &xs[c * h * wd..(c + 1) * h * wd];
            for ky in 0..k {
                for oy in geom.valid_range(ky, h, oh) {
                    let iy = oy * s + ky - geom.padding;
                    let in_row = &in_plane[iy * wd..(iy + 1) * wd];
                    let out_row = &mut out_plane[oy * ow..(oy + 1) * ow];
                    for (kx, cols) in col_ranges.iter().enumerate() {
                        if cols.is_empty() {
                            continue;
                        }
                        let wv = ws[((f * c_in + c) * k + ky) * k + kx];
                        if s == 1 {
                            let shift = cols.start + kx - geom.padding;
                            let src = &in_row[shift..shift + cols.len()];
                            for (o, &i) in out_row[cols.clone()].iter_mut().zip(src) {
                                *o += wv * i;
                            }
                        } else {
                            for ox in cols.clone() {
                                out_row[ox] += wv * in_row[ox * s + kx - geom.padding];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![f_out, oh, ow], out)
}

#[derive(Clone, Debug)]
pub struct Conv2dGrads {
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Gradients of [`conv2d`] given the upstream gradient `grad_out`.
///
/// The input gradient is skipped when `want_input` is false (first layer).
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    geom: ConvGeometry,
    grad_out: &Tensor,
    want_input: bool,
) -> Result<Conv2dGrads> {
    let (c_in, h, wd, f_out, k) = conv_shapes(x, w, b)?;
    let oh = geom.output_extent(h, k)?;
    let ow = geom.output_extent(wd, k)?;
    if grad_out.shape() != [f_out, oh, ow] {
        return Err(Error::Shape(format!(
            "upstream gradient {:?}, expected {:?}",
            grad_out.shape(),
            [f_out, oh, ow]
        )));
    }
    let s = geom.stride;
    let xs = x.data();
    let ws = w.data();
    let gs = grad_out.data();
    let mut gw = vec![0.0; ws.len()];
    let mut gb = vec![0.0; f_out];
    let mut gx = if want_input { vec![0.0; xs.len()] } else { Vec::new() };
    let col_ranges: Vec<_> = (0..k).map(|kx| geom.valid_range(kx, wd, ow)).collect();
    for f in 0..f_out {
        let g_plane = &gs[f * oh * ow..(f + 1) * oh * ow];
        gb[f] = g_plane.iter().sum();
        for c in 0..c_in {
            let in_base = c * h * wd;
            for ky in 0..k {
                for oy in geom.valid_range(ky, h, oh) {
                    let iy = oy * s + ky - geom.padding;
                    let row_base = in_base + iy * wd;
                    let g_row = &g_plane[oy * ow..(oy + 1) * ow];
                    for (kx, cols) in col_ranges.iter().enumerate() {
                        if cols.is_empty() {
                            continue;
                        }
                        let widx = ((f * c_in + c) * k + ky) * k + kx;
                        let wv = ws[widx];
                        let mut acc = 0.0;
                        if s == 1 {
                            let shift = row_base + cols.start + kx - geom.padding;
                            let src = &xs[shift..shift + cols.len()];
                            let g = &g_row[cols.clone()];
                            for (&gv, &iv) in g.iter().zip(src) {
                                acc += gv * iv;
                            }
                            if want_input {
                                let dst = &mut gx[shift..shift + cols.len()];
                                for (d, &gv) in dst.iter_mut().zip(g) {
                                    *d += wv * gv;
                                }
                            }
                        } else {
                            for ox in cols.clone() {
                                let idx = row_base + ox * s + kx - geom.padding;
                                acc += g_row[ox] * xs[idx];
                                if want_input {
                                    gx[idx] += wv * g_row[ox];
                                }
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    Ok(Conv2dGrads {
        input: if want_input {
            Some(Tensor::new(x.shape().to_vec(), gx)?)
        } else {
            None
        },
        weight: Tensor::new(w.shape().to_vec(), gw)?,
        bias: Tensor::new(vec![f_out], gb)?,
    })
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Gradient of ReLU; `output` is the forward result.
pub fn relu_backward(output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    output.ensure_same_shape(grad_out)?;
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&o, &g)| if o > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(output.shape().to_vec(), data)
}

/// Nearest-neighbour 2x upsampling of `[C,H,W]`.
pub fn upsample_nearest_2x(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = x.channel(ch);
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            let src_row = &src[(oy / 2) * w..(oy / 2 + 1) * w];
            for (ox, d) in dst[oy * ow..(oy + 1) * ow].iter_mut().enumerate() {
                *d = src_row[ox / 2];
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

pub fn upsample_nearest_2x_backward(grad_out: &Tensor) -> Result<Tensor> {
    let (c, oh, ow) = grad_out.chw()?;
    if oh % 2 != 0 || ow % 2 != 0 {
        return Err(Error::Shape(format!(
            "upsampled gradient {:?} has odd extent",
            grad_out.shape()
        )));
    }
    let (h, w) = (oh / 2, ow / 2);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let src = grad_out.channel(ch);
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[(oy / 2) * w + ox / 2] += src[oy * ow + ox];
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// `v / ‖v‖₂`; errors on (near) zero vectors.
pub fn l2_normalize(v: &Tensor) -> Result<Tensor> {
    let n = v.norm();
    if n <= 1e-12 {
        return Err(Error::InvalidArgument("cannot normalize a zero-norm vector".into()));
    }
    Ok(v.scale(1.0 / n))
}

/// Gradient of [`l2_normalize`]: `(g - u (u·g)) / ‖v‖`.
pub fn l2_normalize_backward(v: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    v.ensure_same_shape(grad_out)?;
    let n = v.norm();
    if n <= 1e-12 {
        return Err(Error::InvalidArgument("cannot normalize a zero-norm vector".into()));
    }
    let u = v.scale(1.0 / n);
    let ug = u.dot(grad_out)?;
    let data = grad_out
        .data()
        .iter()
        .zip(u.data())
        .map(|(&g, &ui)| (g - ui * ug) / n)
        .collect();
    Tensor::new(v.shape().to_vec(), data)
}

/// Dense layer `W v + b` with `W: [D, N]`.
pub fn linear(v: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (d, n) = match w.shape() {
        &[d, n] => (d, n),
        s => return Err(Error::Shape(format!("expected [D,N] weights, got {s:?}"))),
    };
    if v.len() != n || b.len() != d {
        return Err(Error::Shape(format!(
            "linear {:?} applied to {:?} with bias {:?}",
            w.shape(),
            v.shape(),
            b.shape()
        )));
    }
    let out = (0..d)
        .map(|i| {
            let row = &w.data()[i * n..(i + 1) * n];
            b.data()[i] + row.iter().zip(v.data()).map(|(a, x)| a * x).sum::<f64>()
        })
        .collect();
    Ok(Tensor::from_vec(out))
}

/// Returns `(grad_v, grad_w, grad_b)` for [`linear`].
pub fn linear_backward(v: &Tensor, w: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (d, n) = match w.shape() {
        &[d, n] => (d, n),
        s => return Err(Error::Shape(format!("expected [D,N] weights, got {s:?}"))),
    };
    if grad_out.len() != d || v.len() != n {
        return Err(Error::Shape("linear backward shape mismatch".into()));
    }
    let mut gv = vec![0.0; n];
    let mut gw = vec![0.0; d * n];
    for i in 0..d {
        let g = grad_out.data()[i];
        let row = &w.data()[i * n..(i + 1) * n];
        for j in 0..n {
            gv[j] += row[j] * g;
            gw[i * n + j] = g * v.data()[j];
        }
    }
    Ok((
        Tensor::from_vec(gv),
        Tensor::new(vec![d, n], gw)?,
        grad_out.clone().reshape(vec![d])?,
    ))
}
