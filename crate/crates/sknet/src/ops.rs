//! Forward primitives.
//!
//! Everything here is a pure function from tensors to tensors (batch norm
//! additionally carries running statistics in [`BatchNormState`]). The
//! gradient tape in [`crate::autograd`] wraps these same kernels, so a
//! value computed through the tape is bit-identical to one computed by
//! calling the primitives directly.
//!
//! Accumulation orders are fixed (innermost loops run in channel, then
//! kernel-row, then kernel-column order), which makes every result
//! bit-deterministic for a fixed input.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Geometry of a grouped, dilated, strided 2-d convolution.
///
/// The effective kernel extent is `dilation * (kernel - 1) + 1`; with
/// `padding = dilation * (kernel - 1) / 2` and stride 1 the spatial size
/// is preserved.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub groups: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        dilation: usize,
        groups: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let g = ConvGeometry { in_channels, out_channels, kernel, dilation, groups, stride, padding };
        g.validate()?;
        Ok(g)
    }

    /// Geometry with "same" padding: stride 1 keeps height and width.
    pub fn same(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        dilation: usize,
        groups: usize,
        stride: usize,
    ) -> Result<Self> {
        let padding = dilation * (kernel - 1) / 2;
        Self::new(in_channels, out_channels, kernel, dilation, groups, stride, padding)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Geometry("channel counts must be positive".into()));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::Geometry(format!("kernel must be odd and positive, got {}", self.kernel)));
        }
        if self.dilation == 0 || self.stride == 0 || self.groups == 0 {
            return Err(Error::Geometry("dilation, stride and groups must be positive".into()));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(Error::Geometry(format!(
                "groups {} must divide in_channels {} and out_channels {}",
                self.groups, self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }

    /// Receptive extent of the dilated kernel.
    pub fn extent(&self) -> usize {
        self.dilation * (self.kernel - 1) + 1
    }

    /// Output spatial size for an input of `h x w`, or an error when the
    /// padded input is smaller than the kernel extent.
    pub fn out_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let e = self.extent();
        if h + 2 * self.padding < e || w + 2 * self.padding < e {
            return Err(Error::Geometry(format!(
                "input {h}x{w} with padding {} is smaller than kernel extent {e}",
                self.padding
            )));
        }
        let oh = (h + 2 * self.padding - e) / self.stride + 1;
        let ow = (w + 2 * self.padding - e) / self.stride + 1;
        Ok((oh, ow))
    }

    /// Expected weight tensor shape `(out, in/groups, k, k)`.
    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels / self.groups, self.kernel, self.kernel]
    }
}

fn pad_plane_copy(src: &[f64], h: usize, w: usize, p: usize, dst: &mut [f64]) {
    let wp = w + 2 * p;
    for y in 0..h {
        let drow = (y + p) * wp + p;
        dst[drow..drow + w].copy_from_slice(&src[y * w..y * w + w]);
    }
}

/// Zero-pads every spatial plane by `p` on all four sides.
pub(crate) fn pad_spatial(input: &Tensor, p: usize) -> Tensor {
    if p == 0 {
        return input.clone();
    }
    let [n, c, h, w] = input.shape();
    let mut out = Tensor::zeros([n, c, h + 2 * p, w + 2 * p]);
    for b in 0..n {
        for ch in 0..c {
            let src = input.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            pad_plane_copy(src, h, w, p, dst);
        }
    }
    out
}

/// Grouped, dilated, strided cross-correlation with zero padding and no
/// bias (batch norm follows every convolution in this crate and absorbs
/// any bias).
///
/// `input` is `(n, in, h, w)`, `weight` is `(out, in/groups, k, k)`.
pub fn conv2d(input: &Tensor, weight: &Tensor, geom: &ConvGeometry) -> Result<Tensor> {
    geom.validate()?;
    let [n, cin, h, w] = input.shape();
    if cin != geom.in_channels {
        return Err(Error::Shape(format!(
            "conv2d: input has {cin} channels, geometry expects {}",
            geom.in_channels
        )));
    }
    if weight.shape() != geom.weight_shape() {
        return Err(Error::Shape(format!(
            "conv2d: weight shape {:?}, geometry expects {:?}",
            weight.shape(),
            geom.weight_shape()
        )));
    }
    let (oh, ow) = geom.out_size(h, w)?;
    let (k, d, s, p) = (geom.kernel, geom.dilation, geom.stride, geom.padding);
    let cout = geom.out_channels;
    let cing = cin / geom.groups;
    let ocg = cout / geom.groups;

    let padded;
    let (xp, hp, wp): (&[f64], usize, usize) = if p == 0 {
        (input.data(), h, w)
    } else {
        padded = pad_spatial(input, p);
        (padded.data(), h + 2 * p, w + 2 * p)
    };
    let _ = hp;

    let wdat = weight.data();
    let mut out = Tensor::zeros([n, cout, oh, ow]);
    let odat = out.data_mut();
    let ohw = oh * ow;

    for b in 0..n {
        for oc in 0..cout {
            let g = oc / ocg;
            let oplane = &mut odat[(b * cout + oc) * ohw..(b * cout + oc) * ohw + ohw];
            for icg in 0..cing {
                let ic = g * cing + icg;
                let ibase = (b * cin + ic) * (hp * wp);
                for kh in 0..k {
                    for kw in 0..k {
                        let kval = wdat[((oc * cing + icg) * k + kh) * k + kw];
                        for y in 0..oh {
                            let irow = ibase + (y * s + kh * d) * wp + kw * d;
                            let orow = &mut oplane[y * ow..y * ow + ow];
                            if s == 1 {
                                let xrow = &xp[irow..irow + ow];
                                for (o, &x) in orow.iter_mut().zip(xrow) {
                                    *o += kval * x;
                                }
                            } else {
                                for (ox, o) in orow.iter_mut().enumerate() {
                                    *o += kval * xp[irow + ox * s];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Strips `p` rows/columns of padding from every spatial plane.
pub(crate) fn unpad_spatial(padded: &Tensor, p: usize, h: usize, w: usize) -> Tensor {
    if p == 0 {
        return padded.clone();
    }
    let [n, c, hp, wp] = padded.shape();
    debug_assert_eq!((hp, wp), (h + 2 * p, w + 2 * p));
    let mut out = Tensor::zeros([n, c, h, w]);
    for b in 0..n {
        for ch in 0..c {
            let src = padded.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for y in 0..h {
                let srow = (y + p) * wp + p;
                dst[y * w..y * w + w].copy_from_slice(&src[srow..srow + w]);
            }
        }
    }
    out
}

/// Gradient of [`conv2d`] with respect to its weights. Accumulates over
/// the batch in sample order, so the result is bit-deterministic.
pub(crate) fn conv2d_grad_weight(input: &Tensor, grad_out: &Tensor, geom: &ConvGeometry) -> Result<Tensor> {
    let [n, cin, h, w] = input.shape();
    let (oh, ow) = geom.out_size(h, w)?;
    let [gn, gc, gh, gw_] = grad_out.shape();
    if (gn, gc, gh, gw_) != (n, geom.out_channels, oh, ow) {
        return Err(Error::Shape("conv2d_grad_weight: upstream shape mismatch".into()));
    }
    let (k, d, s, p) = (geom.kernel, geom.dilation, geom.stride, geom.padding);
    let cout = geom.out_channels;
    let cing = cin / geom.groups;
    let ocg = cout / geom.groups;

    let padded;
    let (xp, wp): (&[f64], usize) = if p == 0 {
        (input.data(), w)
    } else {
        padded = pad_spatial(input, p);
        (padded.data(), w + 2 * p)
    };
    let hp = h + 2 * p;

    let go = grad_out.data();
    let mut gweight = Tensor::zeros(geom.weight_shape());
    let gwdat = gweight.data_mut();
    let ohw = oh * ow;
    for b in 0..n {
        for oc in 0..cout {
            let g = oc / ocg;
            let gplane = &go[(b * cout + oc) * ohw..(b * cout + oc) * ohw + ohw];
            for icg in 0..cing {
                let ic = g * cing + icg;
                let ibase = (b * cin + ic) * (hp * wp);
                for kh in 0..k {
                    for kw in 0..k {
                        let mut acc = 0.0;
                        for y in 0..oh {
                            let irow = ibase + (y * s + kh * d) * wp + kw * d;
                            let grow = &gplane[y * ow..y * ow + ow];
                            if s == 1 {
                                let xrow = &xp[irow..irow + ow];
                                for (&gv, &xv) in grow.iter().zip(xrow) {
                                    acc += gv * xv;
                                }
                            } else {
                                for (ox, &gv) in grow.iter().enumerate() {
                                    acc += gv * xp[irow + ox * s];
                                }
                            }
                        }
                        gwdat[((oc * cing + icg) * k + kh) * k + kw] += acc;
                    }
                }
            }
        }
    }
    Ok(gweight)
}

/// Gradient of [`conv2d`] with respect to its input (a full correlation
/// of the upstream gradient with the kernel, i.e. a scatter of each
/// output gradient back through the taps that produced it).
pub(crate) fn conv2d_grad_input(
    weight: &Tensor,
    grad_out: &Tensor,
    geom: &ConvGeometry,
    h: usize,
    w: usize,
) -> Result<Tensor> {
    let (oh, ow) = geom.out_size(h, w)?;
    let [gn, gc, gh, gw_] = grad_out.shape();
    if (gc, gh, gw_) != (geom.out_channels, oh, ow) {
        return Err(Error::Shape("conv2d_grad_input: upstream shape mismatch".into()));
    }
    let n = gn;
    let (k, d, s, p) = (geom.kernel, geom.dilation, geom.stride, geom.padding);
    let cin = geom.in_channels;
    let cout = geom.out_channels;
    let cing = cin / geom.groups;
    let ocg = cout / geom.groups;
    let (hp, wp) = (h + 2 * p, w + 2 * p);

    let go = grad_out.data();
    let wdat = weight.data();
    let mut gip = Tensor::zeros([n, cin, hp, wp]);
    let gipd = gip.data_mut();
    let ohw = oh * ow;
    for b in 0..n {
        for oc in 0..cout {
            let g = oc / ocg;
            let gplane = &go[(b * cout + oc) * ohw..(b * cout + oc) * ohw + ohw];
            for icg in 0..cing {
                let ic = g * cing + icg;
                let ibase = (b * cin + ic) * (hp * wp);
                for kh in 0..k {
                    for kw in 0..k {
                        let kval = wdat[((oc * cing + icg) * k + kh) * k + kw];
                        for y in 0..oh {
                            let irow = ibase + (y * s + kh * d) * wp + kw * d;
                            let grow = &gplane[y * ow..y * ow + ow];
                            if s == 1 {
                                let drow = &mut gipd[irow..irow + ow];
                                for (dv, &gv) in drow.iter_mut().zip(grow) {
                                    *dv += kval * gv;
                                }
                            } else {
                                for (ox, &gv) in grow.iter().enumerate() {
                                    gipd[irow + ox * s] += kval * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(unpad_spatial(&gip, p, h, w))
}

/// Per-channel affine normalization state. `momentum` blends batch
/// statistics into the running ones: `r <- (1 - momentum)*r + momentum*b`.
#[derive(Clone, Debug)]
pub struct BatchNormState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            epsilon: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn validate(&self, input_channels: usize) -> Result<()> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(Error::Config("batch norm vectors disagree on channel count".into()));
        }
        if c != input_channels {
            return Err(Error::Shape(format!(
                "batch norm over {c} channels applied to {input_channels}-channel input"
            )));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::Config("batch norm epsilon must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config("batch norm momentum must lie in [0, 1]".into()));
        }
        if self.running_var.iter().any(|&v| v < 0.0) {
            return Err(Error::Config("negative running variance".into()));
        }
        Ok(())
    }
}

/// Per-channel mean and biased variance over batch and spatial positions.
pub(crate) fn bn_batch_stats(input: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let [n, c, _, _] = input.shape();
    let hw = input.h() * input.w();
    let m = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut sum = 0.0;
        for b in 0..n {
            for &v in input.plane(b, ch) {
                sum += v;
            }
        }
        mean[ch] = sum / m;
    }
    for ch in 0..c {
        let mu = mean[ch];
        let mut sq = 0.0;
        for b in 0..n {
            for &v in input.plane(b, ch) {
                let d = v - mu;
                sq += d * d;
            }
        }
        var[ch] = sq / m;
    }
    (mean, var)
}

pub(crate) fn bn_normalize(
    input: &Tensor,
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    beta: &[f64],
    epsilon: f64,
) -> Tensor {
    let [n, c, _, _] = input.shape();
    let mut out = Tensor::zeros(input.shape());
    for b in 0..n {
        for ch in 0..c {
            let inv = 1.0 / (var[ch] + epsilon).sqrt();
            let (g, bt, mu) = (gamma[ch], beta[ch], mean[ch]);
            let src = input.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = g * (v - mu) * inv + bt;
            }
        }
    }
    out
}

/// Batch normalization. Training mode normalizes with batch statistics
/// computed over `(n, h, w)` per channel and folds them into the running
/// ones; inference mode normalizes with the running statistics and leaves
/// the state untouched.
pub fn batch_norm(input: &Tensor, state: &mut BatchNormState, training: bool) -> Result<Tensor> {
    state.validate(input.c())?;
    if training {
        let (mean, var) = bn_batch_stats(input);
        let m = state.momentum;
        for ch in 0..state.channels() {
            state.running_mean[ch] = (1.0 - m) * state.running_mean[ch] + m * mean[ch];
            state.running_var[ch] = (1.0 - m) * state.running_var[ch] + m * var[ch];
        }
        Ok(bn_normalize(input, &mean, &var, &state.gamma, &state.beta, state.epsilon))
    } else {
        Ok(bn_normalize(
            input,
            &state.running_mean,
            &state.running_var,
            &state.gamma,
            &state.beta,
            state.epsilon,
        ))
    }
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Numerically stable logistic function. The two branches are exactly the
/// two-way path softmax with max subtraction, so a sigmoid gate and a
/// two-path softmax against a zero logit agree bit for bit.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    input.map(sigmoid_scalar)
}

/// Max pooling over `kernel x kernel` windows. Padding is virtual negative
/// infinity: padded positions never win. Ties go to the first position in
/// row-major scan order.
pub fn max_pool2d(input: &Tensor, kernel: usize, stride: usize, padding: usize) -> Result<Tensor> {
    Ok(max_pool2d_indexed(input, kernel, stride, padding)?.0)
}

/// Max pooling that also reports, per output element, the flat index of
/// the winning input element (needed for the backward pass).
pub(crate) fn max_pool2d_indexed(
    input: &Tensor,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Vec<u32>)> {
    if kernel == 0 || stride == 0 {
        return Err(Error::Geometry("pool kernel and stride must be positive".into()));
    }
    let [n, c, h, w] = input.shape();
    if h + 2 * padding < kernel || w + 2 * padding < kernel {
        return Err(Error::Geometry(format!(
            "input {h}x{w} with padding {padding} is smaller than pool kernel {kernel}"
        )));
    }
    if input.len() > u32::MAX as usize {
        return Err(Error::Shape("tensor too large for pooling index bookkeeping".into()));
    }
    let oh = (h + 2 * padding - kernel) / stride + 1;
    let ow = (w + 2 * padding - kernel) / stride + 1;
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut arg = vec![0u32; n * c * oh * ow];
    let mut oi = 0;
    for b in 0..n {
        for ch in 0..c {
            let plane = input.plane(b, ch);
            let pbase = (b * c + ch) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let v = plane[iy as usize * w + ix as usize];
                            if v > best {
                                best = v;
                                best_i = iy as usize * w + ix as usize;
                            }
                        }
                    }
                    debug_assert!(best_i != usize::MAX, "empty pooling window");
                    out.data_mut()[oi] = best;
                    arg[oi] = (pbase + best_i) as u32;
                    oi += 1;
                }
            }
        }
    }
    Ok((out, arg))
}

/// Spatial mean per (sample, channel): `(n, c, h, w) -> (n, c, 1, 1)`.
pub fn global_avg_pool(input: &Tensor) -> Tensor {
    let [n, c, h, w] = input.shape();
    let m = (h * w) as f64;
    let mut out = Tensor::zeros([n, c, 1, 1]);
    for b in 0..n {
        for ch in 0..c {
            let mut sum = 0.0;
            for &v in input.plane(b, ch) {
                sum += v;
            }
            out.data_mut()[b * c + ch] = sum / m;
        }
    }
    out
}

/// Dense layer on a single vector: `weight` is `(out, in, 1, 1)`.
pub fn fully_connected(input: &[f64], weight: &Tensor, bias: Option<&[f64]>) -> Result<Vec<f64>> {
    let [cout, cin, wh, ww] = weight.shape();
    if wh != 1 || ww != 1 {
        return Err(Error::Shape(format!("fc weight must be (out, in, 1, 1), got {:?}", weight.shape())));
    }
    if input.len() != cin {
        return Err(Error::Shape(format!("fc input length {} vs weight in {}", input.len(), cin)));
    }
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(Error::Shape(format!("fc bias length {} vs weight out {}", b.len(), cout)));
        }
    }
    let wdat = weight.data();
    let mut out = vec![0.0; cout];
    for (o, dst) in out.iter_mut().enumerate() {
        let row = &wdat[o * cin..o * cin + cin];
        let mut acc = 0.0;
        for (x, wv) in input.iter().zip(row) {
            acc += x * wv;
        }
        if let Some(b) = bias {
            acc += b[o];
        }
        *dst = acc;
    }
    Ok(out)
}

/// Batched dense layer on `(n, in, 1, 1)` feature vectors.
pub fn linear_batch(input: &Tensor, weight: &Tensor, bias: Option<&[f64]>) -> Result<Tensor> {
    let [n, cin, h, w] = input.shape();
    if h != 1 || w != 1 {
        return Err(Error::Shape(format!("linear input must be (n, in, 1, 1), got {:?}", input.shape())));
    }
    let cout = weight.n();
    let mut out = Tensor::zeros([n, cout, 1, 1]);
    for b in 0..n {
        let x = &input.data()[b * cin..(b + 1) * cin];
        let y = fully_connected(x, weight, bias)?;
        out.data_mut()[b * cout..(b + 1) * cout].copy_from_slice(&y);
    }
    Ok(out)
}

/// Softmax across `paths` competing rows of a flat `paths * channels`
/// buffer laid out row-major `(path, channel)`. Each channel is normalized
/// independently, with max subtraction for stability.
pub fn softmax_over_paths(logits: &[f64], paths: usize) -> Result<Vec<f64>> {
    if paths == 0 || logits.len() % paths != 0 {
        return Err(Error::Shape(format!(
            "softmax_over_paths: {} values do not split into {} paths",
            logits.len(),
            paths
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax_over_paths logits".into()));
    }
    let c = logits.len() / paths;
    let mut out = vec![0.0; logits.len()];
    for ch in 0..c {
        let mut mx = f64::NEG_INFINITY;
        for m in 0..paths {
            mx = mx.max(logits[m * c + ch]);
        }
        let mut denom = 0.0;
        for m in 0..paths {
            let e = (logits[m * c + ch] - mx).exp();
            out[m * c + ch] = e;
            denom += e;
        }
        for m in 0..paths {
            out[m * c + ch] /= denom;
        }
    }
    Ok(out)
}

/// Batched path softmax over `(n, paths*c, 1, 1)` logit tensors.
pub fn path_softmax_batch(logits: &Tensor, paths: usize) -> Result<Tensor> {
    let [n, pc, h, w] = logits.shape();
    if h != 1 || w != 1 {
        return Err(Error::Shape(format!("path softmax input must be (n, m*c, 1, 1), got {:?}", logits.shape())));
    }
    let mut out = Tensor::zeros([n, pc, 1, 1]);
    for b in 0..n {
        let row = softmax_over_paths(&logits.data()[b * pc..(b + 1) * pc], paths)?;
        out.data_mut()[b * pc..(b + 1) * pc].copy_from_slice(&row);
    }
    Ok(out)
}

/// Elementwise sum of equally shaped tensors, accumulated in slice order.
pub fn add_n(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::Shape("add_n of zero tensors".into()))?;
    let mut out = (*first).clone();
    for t in &parts[1..] {
        first.check_same_shape(t, "add_n")?;
        for (o, &v) in out.data_mut().iter_mut().zip(t.data()) {
            *o += v;
        }
    }
    Ok(out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    add_n(&[a, b])
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.check_same_shape(b, "mul")?;
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o *= v;
    }
    Ok(out)
}

pub fn scale(a: &Tensor, k: f64) -> Tensor {
    a.map(|v| v * k)
}

/// Multiplies every spatial plane by its per-(sample, channel) gate:
/// `input (n, c, h, w) * gate (n, c, 1, 1)`.
pub fn scale_channels(input: &Tensor, gate: &Tensor) -> Result<Tensor> {
    let [n, c, _, _] = input.shape();
    if gate.shape() != [n, c, 1, 1] {
        return Err(Error::Shape(format!(
            "gate shape {:?} does not match input {:?}",
            gate.shape(),
            input.shape()
        )));
    }
    let mut out = input.clone();
    for b in 0..n {
        for ch in 0..c {
            let g = gate.data()[b * c + ch];
            for v in out.plane_mut(b, ch) {
                *v *= g;
            }
        }
    }
    Ok(out)
}

/// Channel slice `[start, start+len)` of an `(n, c, h, w)` tensor.
pub fn narrow_channels(input: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let [n, c, h, w] = input.shape();
    if start + len > c || len == 0 {
        return Err(Error::Shape(format!(
            "channel slice {start}..{} out of range for {c} channels",
            start + len
        )));
    }
    let mut out = Tensor::zeros([n, len, h, w]);
    for b in 0..n {
        for ch in 0..len {
            out.plane_mut(b, ch).copy_from_slice(input.plane(b, start + ch));
        }
    }
    Ok(out)
}

/// Concatenation along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
    let [n, _, h, w] = first.shape();
    let mut c_total = 0;
    for t in parts {
        let [tn, tc, th, tw] = t.shape();
        if tn != n || th != h || tw != w {
            return Err(Error::Shape("concat_channels: mismatched batch or spatial dims".into()));
        }
        c_total += tc;
    }
    let mut out = Tensor::zeros([n, c_total, h, w]);
    for b in 0..n {
        let mut at = 0;
        for t in parts {
            for ch in 0..t.c() {
                out.plane_mut(b, at).copy_from_slice(t.plane(b, ch));
                at += 1;
            }
        }
    }
    Ok(out)
}

/// Deliberately slow reference kernels. These stay close to the defining
/// sums, with per-tap bounds checks and no layout tricks, and exist only
/// to cross-check the optimized implementations above.
pub mod reference {
    use super::ConvGeometry;
    use crate::error::Result;
    use crate::tensor::Tensor;

    /// Seven nested loops, one multiply-add per tap.
    pub fn conv2d_naive(input: &Tensor, weight: &Tensor, geom: &ConvGeometry) -> Result<Tensor> {
        let [n, cin, h, w] = input.shape();
        let (oh, ow) = geom.out_size(h, w)?;
        let cout = geom.out_channels;
        let cing = cin / geom.groups;
        let ocg = cout / geom.groups;
        let mut out = Tensor::zeros([n, cout, oh, ow]);
        for b in 0..n {
            for oc in 0..cout {
                let g = oc / ocg;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for icg in 0..cing {
                            let ic = g * cing + icg;
                            for ky in 0..geom.kernel {
                                for kx in 0..geom.kernel {
                                    let iy = (oy * geom.stride + ky * geom.dilation) as isize
                                        - geom.padding as isize;
                                    let ix = (ox * geom.stride + kx * geom.dilation) as isize
                                        - geom.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += input.at(b, ic, iy as usize, ix as usize)
                                        * weight.at(oc, icg, ky, kx);
                                }
                            }
                        }
                        *out.at_mut(b, oc, oy, ox) = acc;
                    }
                }
            }
        }
        Ok(out)
    }
}
