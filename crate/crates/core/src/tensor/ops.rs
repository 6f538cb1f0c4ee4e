//! Differentiable tensor operations.
//!
//! Each builder method validates shapes, computes the forward result, and
//! records an [`Op`] node holding the inputs plus whatever intermediate
//! state the backward rule needs. Backward rules accumulate into the
//! in-flight gradient buffers of the inputs that require gradients.

use super::conv::{self, ConvDims};
use super::{sink_buf, Element, GradSink, Tensor};
use crate::error::{Error, Result};

/// Recorded operation linking a result tensor to its inputs.
pub(crate) enum Op<T: Element> {
    Add(Tensor<T>, Tensor<T>),
    Sub(Tensor<T>, Tensor<T>),
    Mul(Tensor<T>, Tensor<T>),
    Scale(Tensor<T>, T),
    Relu(Tensor<T>),
    Sigmoid(Tensor<T>),
    SumSq(Tensor<T>),
    Gap(Tensor<T>),
    Fc {
        input: Tensor<T>,
        weight: Tensor<T>,
    },
    Conv3d {
        input: Tensor<T>,
        weight: Tensor<T>,
        dims: Box<ConvDims>,
    },
    ChannelBias {
        input: Tensor<T>,
        bias: Tensor<T>,
    },
    ChannelScale {
        input: Tensor<T>,
        scale: Tensor<T>,
    },
    ChannelConcat(Tensor<T>, Tensor<T>),
    Upsample2x(Tensor<T>),
    DownsampleAvg2x(Tensor<T>),
    InstanceNorm {
        input: Tensor<T>,
        gamma: Tensor<T>,
        beta: Tensor<T>,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
}

impl<T: Element> Op<T> {
    pub(crate) fn parents(&self) -> Vec<&Tensor<T>> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::ChannelConcat(a, b) => {
                vec![a, b]
            }
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::SumSq(a)
            | Op::Gap(a)
            | Op::Upsample2x(a)
            | Op::DownsampleAvg2x(a) => vec![a],
            Op::Fc { input, weight } | Op::Conv3d { input, weight, .. } => vec![input, weight],
            Op::ChannelBias { input, bias } => vec![input, bias],
            Op::ChannelScale { input, scale } => vec![input, scale],
            Op::InstanceNorm {
                input, gamma, beta, ..
            } => vec![input, gamma, beta],
        }
    }

    pub(crate) fn backward(&self, out: &Tensor<T>, gout: &[T], sink: &mut GradSink<T>) {
        match self {
            Op::Add(a, b) => {
                if let Some(ga) = sink_buf(sink, a) {
                    for (g, &v) in ga.iter_mut().zip(gout) {
                        *g += v;
                    }
                }
                if let Some(gb) = sink_buf(sink, b) {
                    for (g, &v) in gb.iter_mut().zip(gout) {
                        *g += v;
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = sink_buf(sink, a) {
                    for (g, &v) in ga.iter_mut().zip(gout) {
                        *g += v;
                    }
                }
                if let Some(gb) = sink_buf(sink, b) {
                    for (g, &v) in gb.iter_mut().zip(gout) {
                        *g -= v;
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = sink_buf(sink, a) {
                    let bd = b.data();
                    for ((g, &v), &bv) in ga.iter_mut().zip(gout).zip(bd.iter()) {
                        *g += v * bv;
                    }
                }
                if let Some(gb) = sink_buf(sink, b) {
                    let ad = a.data();
                    for ((g, &v), &av) in gb.iter_mut().zip(gout).zip(ad.iter()) {
                        *g += v * av;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = sink_buf(sink, a) {
                    for (g, &v) in ga.iter_mut().zip(gout) {
                        *g += v * *c;
                    }
                }
            }
            Op::Relu(a) => {
                if let Some(ga) = sink_buf(sink, a) {
                    let ad = a.data();
                    for ((g, &v), &av) in ga.iter_mut().zip(gout).zip(ad.iter()) {
                        if av > T::ZERO {
                            *g += v;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = sink_buf(sink, a) {
                    let yd = out.data();
                    for ((g, &v), &y) in ga.iter_mut().zip(gout).zip(yd.iter()) {
                        *g += v * y * (T::ONE - y);
                    }
                }
            }
            Op::SumSq(a) => {
                if let Some(ga) = sink_buf(sink, a) {
                    let ad = a.data();
                    let two_g = gout[0] + gout[0];
                    for (g, &av) in ga.iter_mut().zip(ad.iter()) {
                        *g += two_g * av;
                    }
                }
            }
            Op::Gap(a) => {
                if let Some(ga) = sink_buf(sink, a) {
                    let shape = a.shape();
                    let spatial: usize = shape[2..].iter().product();
                    let inv = T::ONE / T::from_f64(spatial as f64);
                    for (bc, &g) in gout.iter().enumerate() {
                        let gv = g * inv;
                        for slot in &mut ga[bc * spatial..(bc + 1) * spatial] {
                            *slot += gv;
                        }
                    }
                }
            }
            Op::Fc { input, weight } => {
                let (m, n) = {
                    let ws = weight.shape();
                    (ws[0], ws[1])
                };
                let rows = input.len() / n;
                if let Some(gi) = sink_buf(sink, input) {
                    let wd = weight.data();
                    for r in 0..rows {
                        for i in 0..m {
                            let g = gout[r * m + i];
                            let wrow = &wd[i * n..(i + 1) * n];
                            let girow = &mut gi[r * n..(r + 1) * n];
                            for (slot, &wv) in girow.iter_mut().zip(wrow) {
                                *slot += g * wv;
                            }
                        }
                    }
                }
                if let Some(gw) = sink_buf(sink, weight) {
                    let xd = input.data();
                    for r in 0..rows {
                        let xrow = &xd[r * n..(r + 1) * n];
                        for i in 0..m {
                            let g = gout[r * m + i];
                            let gwrow = &mut gw[i * n..(i + 1) * n];
                            for (slot, &xv) in gwrow.iter_mut().zip(xrow) {
                                *slot += g * xv;
                            }
                        }
                    }
                }
            }
            Op::Conv3d {
                input,
                weight,
                dims,
            } => {
                if let Some(gi) = sink_buf(sink, input) {
                    let wd = weight.data();
                    conv::backward_input(gout, &wd, gi, dims);
                }
                if let Some(gw) = sink_buf(sink, weight) {
                    let xd = input.data();
                    conv::backward_weight(gout, &xd, gw, dims);
                }
            }
            Op::ChannelBias { input, bias } => {
                if let Some(gi) = sink_buf(sink, input) {
                    for (g, &v) in gi.iter_mut().zip(gout) {
                        *g += v;
                    }
                }
                if let Some(gb) = sink_buf(sink, bias) {
                    let shape = input.shape();
                    let (b, c) = (shape[0], shape[1]);
                    let spatial: usize = shape[2..].iter().product();
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * spatial;
                            let mut acc = T::ZERO;
                            for &v in &gout[base..base + spatial] {
                                acc += v;
                            }
                            gb[ci] += acc;
                        }
                    }
                }
            }
            Op::ChannelScale { input, scale } => {
                let shape = input.shape();
                let (b, c) = (shape[0], shape[1]);
                let spatial: usize = shape[2..].iter().product();
                if let Some(gi) = sink_buf(sink, input) {
                    let sd = scale.data();
                    for bc in 0..b * c {
                        let sv = sd[bc];
                        let base = bc * spatial;
                        for (g, &v) in gi[base..base + spatial].iter_mut().zip(&gout[base..]) {
                            *g += v * sv;
                        }
                    }
                }
                if let Some(gs) = sink_buf(sink, scale) {
                    let xd = input.data();
                    for bc in 0..b * c {
                        let base = bc * spatial;
                        let mut acc = T::ZERO;
                        for (&v, &xv) in gout[base..base + spatial].iter().zip(&xd[base..]) {
                            acc += v * xv;
                        }
                        gs[bc] += acc;
                    }
                }
            }
            Op::ChannelConcat(a, b) => {
                let (sa, sb) = (a.shape(), b.shape());
                let batch = sa[0];
                let spatial: usize = sa[2..].iter().product();
                let (ca, cb) = (sa[1], sb[1]);
                let (na, nb) = (ca * spatial, cb * spatial);
                if let Some(ga) = sink_buf(sink, a) {
                    for bi in 0..batch {
                        let src = &gout[bi * (na + nb)..bi * (na + nb) + na];
                        for (g, &v) in ga[bi * na..(bi + 1) * na].iter_mut().zip(src) {
                            *g += v;
                        }
                    }
                }
                if let Some(gb) = sink_buf(sink, b) {
                    for bi in 0..batch {
                        let src = &gout[bi * (na + nb) + na..(bi + 1) * (na + nb)];
                        for (g, &v) in gb[bi * nb..(bi + 1) * nb].iter_mut().zip(src) {
                            *g += v;
                        }
                    }
                }
            }
            Op::Upsample2x(a) => {
                if let Some(ga) = sink_buf(sink, a) {
                    let s = a.shape();
                    let (bc, h, w, d) = (s[0] * s[1], s[2], s[3], s[4]);
                    let (h2, w2, d2) = (2 * h, 2 * w, 2 * d);
                    for g in 0..bc {
                        let ibase = g * h * w * d;
                        let obase = g * h2 * w2 * d2;
                        for oh in 0..h2 {
                            for ow in 0..w2 {
                                let orow = obase + (oh * w2 + ow) * d2;
                                let irow = ibase + ((oh / 2) * w + ow / 2) * d;
                                for od in 0..d2 {
                                    ga[irow + od / 2] += gout[orow + od];
                                }
                            }
                        }
                    }
                }
            }
            Op::DownsampleAvg2x(a) => {
                if let Some(ga) = sink_buf(sink, a) {
                    let s = a.shape();
                    let (bc, h, w, d) = (s[0] * s[1], s[2], s[3], s[4]);
                    let (h2, w2, d2) = (h / 2, w / 2, d / 2);
                    let inv = T::ONE / T::from_f64(8.0);
                    for g in 0..bc {
                        let ibase = g * h * w * d;
                        let obase = g * h2 * w2 * d2;
                        for oh in 0..h2 {
                            for ow in 0..w2 {
                                for od in 0..d2 {
                                    let gv = gout[obase + (oh * w2 + ow) * d2 + od] * inv;
                                    for dh in 0..2 {
                                        for dw in 0..2 {
                                            let row = ibase
                                                + ((2 * oh + dh) * w + 2 * ow + dw) * d
                                                + 2 * od;
                                            ga[row] += gv;
                                            ga[row + 1] += gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::InstanceNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let shape = input.shape();
                let (b, c) = (shape[0], shape[1]);
                let spatial: usize = shape[2..].iter().product();
                let inv_n = T::ONE / T::from_f64(spatial as f64);
                let xd = input.data();
                let gd = gamma.data();
                for bi in 0..b {
                    for ci in 0..c {
                        let bc = bi * c + ci;
                        let base = bc * spatial;
                        let (mu, s) = (mean[bc], inv_std[bc]);
                        let gout_grp = &gout[base..base + spatial];
                        let x_grp = &xd[base..base + spatial];
                        // Group sums over g and g*x_hat, shared by all three rules.
                        let mut sum_g = T::ZERO;
                        let mut sum_gx = T::ZERO;
                        for (&g, &x) in gout_grp.iter().zip(x_grp) {
                            sum_g += g;
                            sum_gx += g * (x - mu) * s;
                        }
                        if let Some(gb) = sink_buf(sink, beta) {
                            gb[ci] += sum_g;
                        }
                        if let Some(gg) = sink_buf(sink, gamma) {
                            gg[ci] += sum_gx;
                        }
                        if let Some(gi) = sink_buf(sink, input) {
                            let coeff = gd[ci] * s;
                            let mean_g = sum_g * inv_n;
                            let mean_gx = sum_gx * inv_n;
                            for (slot, (&g, &x)) in gi[base..base + spatial]
                                .iter_mut()
                                .zip(gout_grp.iter().zip(x_grp))
                            {
                                let x_hat = (x - mu) * s;
                                *slot += coeff * (g - mean_g - x_hat * mean_gx);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn same_shape<T: Element>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn dims5<T: Element>(t: &Tensor<T>, what: &str) -> Result<[usize; 5]> {
    let s = t.shape();
    if s.len() != 5 {
        return Err(Error::shape(format!(
            "{what}: expected a [batch, channel, h, w, d] tensor, got shape {s:?}"
        )));
    }
    Ok([s[0], s[1], s[2], s[3], s[4]])
}

impl<T: Element> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape(self, other, "add")?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Add(self.clone(), other.clone()),
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape(self, other, "sub")?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Sub(self.clone(), other.clone()),
        ))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape(self, other, "mul")?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a * b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Mul(self.clone(), other.clone()),
        ))
    }

    /// Multiplies every element by a constant.
    pub fn scale(&self, factor: T) -> Result<Tensor<T>> {
        let data = self.data().iter().map(|&a| a * factor).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Scale(self.clone(), factor),
        ))
    }

    pub fn relu(&self) -> Result<Tensor<T>> {
        let data = self
            .data()
            .iter()
            .map(|&a| if a > T::ZERO { a } else { T::ZERO })
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Relu(self.clone()),
        ))
    }

    pub fn sigmoid(&self) -> Result<Tensor<T>> {
        let data = self
            .data()
            .iter()
            .map(|&a| {
                // Branch on sign so the exponential never overflows.
                if a >= T::ZERO {
                    T::ONE / (T::ONE + (-a).exp())
                } else {
                    let e = a.exp();
                    e / (T::ONE + e)
                }
            })
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Sigmoid(self.clone()),
        ))
    }

    /// Sum of squared elements, as a shape-`[1]` scalar.
    pub fn sum_sq(&self) -> Result<Tensor<T>> {
        let mut acc = T::ZERO;
        for &a in self.data().iter() {
            acc += a * a;
        }
        Ok(Tensor::from_op(vec![1], vec![acc], Op::SumSq(self.clone())))
    }

    /// Mean squared error against `target`, as a shape-`[1]` scalar.
    pub fn mse(&self, target: &Tensor<T>) -> Result<Tensor<T>> {
        let n = T::from_f64(self.len() as f64);
        self.sub(target)?.sum_sq()?.scale(T::ONE / n)
    }

    /// Global average pool: `[b, c, h, w, d]` to per-channel means `[b, c]`.
    pub fn gap(&self) -> Result<Tensor<T>> {
        let [b, c, h, w, d] = dims5(self, "gap")?;
        let spatial = h * w * d;
        let inv = T::ONE / T::from_f64(spatial as f64);
        let xd = self.data();
        let mut out = Vec::with_capacity(b * c);
        for bc in 0..b * c {
            let mut acc = T::ZERO;
            for &v in &xd[bc * spatial..(bc + 1) * spatial] {
                acc += v;
            }
            out.push(acc * inv);
        }
        drop(xd);
        Ok(Tensor::from_op(vec![b, c], out, Op::Gap(self.clone())))
    }

    /// Fully connected layer without bias: `weight` is `[out, in]`, applied
    /// to the last axis of `self`.
    pub fn fc(&self, weight: &Tensor<T>) -> Result<Tensor<T>> {
        let ws = weight.shape();
        if ws.len() != 2 {
            return Err(Error::shape(format!(
                "fc: weight must be [out, in], got shape {ws:?}"
            )));
        }
        let (m, n) = (ws[0], ws[1]);
        let xs = self.shape();
        if *xs.last().unwrap() != n {
            return Err(Error::shape(format!(
                "fc: input last axis {} does not match weight columns {n}",
                xs.last().unwrap()
            )));
        }
        let rows = self.len() / n;
        let xd = self.data();
        let wd = weight.data();
        let mut out = vec![T::ZERO; rows * m];
        for r in 0..rows {
            let xrow = &xd[r * n..(r + 1) * n];
            for i in 0..m {
                let wrow = &wd[i * n..(i + 1) * n];
                let mut acc = T::ZERO;
                for (&wv, &xv) in wrow.iter().zip(xrow) {
                    acc += wv * xv;
                }
                out[r * m + i] = acc;
            }
        }
        drop(xd);
        drop(wd);
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = m;
        Ok(Tensor::from_op(
            shape,
            out,
            Op::Fc {
                input: self.clone(),
                weight: weight.clone(),
            },
        ))
    }

    /// 3-D convolution. `weight` is `[c_out, c_in, k, k, k]`.
    pub fn conv3d(&self, weight: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
        let [b, c_in, h, w, d] = dims5(self, "conv3d input")?;
        let [c_out, wc_in, k, k2, k3] = dims5(weight, "conv3d weight")?;
        if k != k2 || k != k3 {
            return Err(Error::shape(format!(
                "conv3d: kernel must be cubic, got {k}x{k2}x{k3}"
            )));
        }
        if wc_in != c_in {
            return Err(Error::shape(format!(
                "conv3d: input has {c_in} channels, weight expects {wc_in}"
            )));
        }
        let (h_out, w_out, d_out) = match (
            ConvDims::out_spatial(h, k, stride, padding),
            ConvDims::out_spatial(w, k, stride, padding),
            ConvDims::out_spatial(d, k, stride, padding),
        ) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => {
                return Err(Error::shape(format!(
                    "conv3d: kernel {k} with stride {stride}, padding {padding} \
                     does not fit input {h}x{w}x{d}"
                )))
            }
        };
        let dims = ConvDims {
            batch: b,
            c_in,
            c_out,
            h,
            w,
            d,
            k,
            stride,
            padding,
            h_out,
            w_out,
            d_out,
        };
        let out = conv::forward(&self.data(), &weight.data(), &dims);
        Ok(Tensor::from_op(
            vec![b, c_out, h_out, w_out, d_out],
            out,
            Op::Conv3d {
                input: self.clone(),
                weight: weight.clone(),
                dims: Box::new(dims),
            },
        ))
    }

    /// Adds a per-channel bias `[c]`, broadcast over batch and space.
    pub fn channel_bias(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(Error::shape(format!(
                "channel_bias: input must be at least [batch, channel], got {s:?}"
            )));
        }
        let (b, c) = (s[0], s[1]);
        if bias.shape() != [c] {
            return Err(Error::shape(format!(
                "channel_bias: bias shape {:?} does not match {c} channels",
                bias.shape()
            )));
        }
        let spatial: usize = s[2..].iter().product();
        let xd = self.data();
        let bd = bias.data();
        let mut out = Vec::with_capacity(self.len());
        for bi in 0..b {
            for ci in 0..c {
                let bv = bd[ci];
                let base = (bi * c + ci) * spatial;
                for &v in &xd[base..base + spatial] {
                    out.push(v + bv);
                }
            }
        }
        drop(xd);
        drop(bd);
        Ok(Tensor::from_op(
            s.to_vec(),
            out,
            Op::ChannelBias {
                input: self.clone(),
                bias: bias.clone(),
            },
        ))
    }

    /// Multiplies each `(batch, channel)` slice by `scale[b, c]`.
    pub fn channel_scale(&self, scale: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(Error::shape(format!(
                "channel_scale: input must be at least [batch, channel], got {s:?}"
            )));
        }
        let (b, c) = (s[0], s[1]);
        if scale.shape() != [b, c] {
            return Err(Error::shape(format!(
                "channel_scale: scale shape {:?} does not match [{b}, {c}]",
                scale.shape()
            )));
        }
        let spatial: usize = s[2..].iter().product();
        let xd = self.data();
        let sd = scale.data();
        let mut out = Vec::with_capacity(self.len());
        for bc in 0..b * c {
            let sv = sd[bc];
            for &v in &xd[bc * spatial..(bc + 1) * spatial] {
                out.push(v * sv);
            }
        }
        drop(xd);
        drop(sd);
        Ok(Tensor::from_op(
            s.to_vec(),
            out,
            Op::ChannelScale {
                input: self.clone(),
                scale: scale.clone(),
            },
        ))
    }

    /// Concatenates two `[b, c, h, w, d]` tensors along the channel axis.
    pub fn concat_channels(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let [b, ca, h, w, d] = dims5(self, "concat_channels")?;
        let [b2, cb, h2, w2, d2] = dims5(other, "concat_channels")?;
        if (b, h, w, d) != (b2, h2, w2, d2) {
            return Err(Error::shape(format!(
                "concat_channels: shapes {:?} and {:?} differ outside the channel axis",
                self.shape(),
                other.shape()
            )));
        }
        let spatial = h * w * d;
        let xd = self.data();
        let yd = other.data();
        let mut out = Vec::with_capacity((ca + cb) * b * spatial);
        for bi in 0..b {
            out.extend_from_slice(&xd[bi * ca * spatial..(bi + 1) * ca * spatial]);
            out.extend_from_slice(&yd[bi * cb * spatial..(bi + 1) * cb * spatial]);
        }
        drop(xd);
        drop(yd);
        Ok(Tensor::from_op(
            vec![b, ca + cb, h, w, d],
            out,
            Op::ChannelConcat(self.clone(), other.clone()),
        ))
    }

    /// Nearest-neighbour upsampling by 2 along each spatial axis.
    pub fn upsample_nearest_2x(&self) -> Result<Tensor<T>> {
        let [b, c, h, w, d] = dims5(self, "upsample_nearest_2x")?;
        let (h2, w2, d2) = (2 * h, 2 * w, 2 * d);
        let xd = self.data();
        let mut out = vec![T::ZERO; b * c * h2 * w2 * d2];
        for g in 0..b * c {
            let ibase = g * h * w * d;
            let obase = g * h2 * w2 * d2;
            for oh in 0..h2 {
                for ow in 0..w2 {
                    let irow = ibase + ((oh / 2) * w + ow / 2) * d;
                    let orow = obase + (oh * w2 + ow) * d2;
                    for od in 0..d2 {
                        out[orow + od] = xd[irow + od / 2];
                    }
                }
            }
        }
        drop(xd);
        Ok(Tensor::from_op(
            vec![b, c, h2, w2, d2],
            out,
            Op::Upsample2x(self.clone()),
        ))
    }

    /// Average-pool downsampling by 2 along each spatial axis; spatial
    /// extents must be even.
    pub fn downsample_avg_2x(&self) -> Result<Tensor<T>> {
        let [b, c, h, w, d] = dims5(self, "downsample_avg_2x")?;
        if h % 2 != 0 || w % 2 != 0 || d % 2 != 0 {
            return Err(Error::shape(format!(
                "downsample_avg_2x: spatial extents {h}x{w}x{d} must be even"
            )));
        }
        let (h2, w2, d2) = (h / 2, w / 2, d / 2);
        let inv = T::ONE / T::from_f64(8.0);
        let xd = self.data();
        let mut out = vec![T::ZERO; b * c * h2 * w2 * d2];
        for g in 0..b * c {
            let ibase = g * h * w * d;
            let obase = g * h2 * w2 * d2;
            for oh in 0..h2 {
                for ow in 0..w2 {
                    for od in 0..d2 {
                        let mut acc = T::ZERO;
                        for dh in 0..2 {
                            for dw in 0..2 {
                                let row = ibase + ((2 * oh + dh) * w + 2 * ow + dw) * d + 2 * od;
                                acc += xd[row] + xd[row + 1];
                            }
                        }
                        out[obase + (oh * w2 + ow) * d2 + od] = acc * inv;
                    }
                }
            }
        }
        drop(xd);
        Ok(Tensor::from_op(
            vec![b, c, h2, w2, d2],
            out,
            Op::DownsampleAvg2x(self.clone()),
        ))
    }

    /// Instance normalization over the spatial axes of each `(batch,
    /// channel)` slice, with per-channel affine parameters.
    ///
    /// Returns the normalized tensor plus the per-slice means and variances
    /// that were used, so callers can track statistics.
    pub fn instance_norm(
        &self,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        eps: T,
    ) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
        let [b, c, h, w, d] = dims5(self, "instance_norm")?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape(format!(
                "instance_norm: affine shapes {:?}/{:?} do not match {c} channels",
                gamma.shape(),
                beta.shape()
            )));
        }
        let spatial = h * w * d;
        let inv_n = 1.0 / spatial as f64;
        let xd = self.data();
        let gd = gamma.data();
        let bd = beta.data();
        let mut mean = Vec::with_capacity(b * c);
        let mut var = Vec::with_capacity(b * c);
        let mut inv_std = Vec::with_capacity(b * c);
        let mut out = vec![T::ZERO; self.len()];
        for bi in 0..b {
            for ci in 0..c {
                let bc = bi * c + ci;
                let base = bc * spatial;
                let grp = &xd[base..base + spatial];
                let mut acc = T::ZERO;
                for &v in grp {
                    acc += v;
                }
                let mu = acc * T::from_f64(inv_n);
                let mut vacc = T::ZERO;
                for &v in grp {
                    let dlt = v - mu;
                    vacc += dlt * dlt;
                }
                let sigma2 = vacc * T::from_f64(inv_n);
                let s = T::ONE / (sigma2 + eps).sqrt();
                let (gv, bv) = (gd[ci], bd[ci]);
                for (slot, &v) in out[base..base + spatial].iter_mut().zip(grp) {
                    *slot = gv * ((v - mu) * s) + bv;
                }
                mean.push(mu);
                var.push(sigma2);
                inv_std.push(s);
            }
        }
        drop(xd);
        drop(gd);
        drop(bd);
        let node = Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::InstanceNorm {
                input: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                mean: mean.clone(),
                inv_std,
            },
        );
        Ok((node, mean, var))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_values() {
        let a = t64(&[3], &[1.0, -2.0, 3.0]);
        let b = t64(&[3], &[4.0, 5.0, -6.0]);
        assert_eq!(*a.add(&b).unwrap().data(), vec![5.0, 3.0, -3.0]);
        assert_eq!(*a.sub(&b).unwrap().data(), vec![-3.0, -7.0, 9.0]);
        assert_eq!(*a.mul(&b).unwrap().data(), vec![4.0, -10.0, -18.0]);
        assert_eq!(*a.scale(2.0).unwrap().data(), vec![2.0, -4.0, 6.0]);
        assert_eq!(*a.relu().unwrap().data(), vec![1.0, 0.0, 3.0]);
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let a = t64(&[3], &[1.0, 2.0, 3.0]);
        let b = t64(&[2], &[1.0, 2.0]);
        assert!(a.add(&b).is_err());
        assert!(a.mul(&b).is_err());
    }

    #[test]
    fn sigmoid_known_values() {
        let a = t64(&[3], &[0.0, 2.0, -2.0]);
        let y = a.sigmoid().unwrap();
        let yd = y.data();
        assert!((yd[0] - 0.5).abs() < 1e-12);
        assert!((yd[1] - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-12);
        assert!((yd[1] + yd[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sum_sq_and_mse() {
        let a = t64(&[4], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(a.sum_sq().unwrap().item(), 30.0);
        let b = t64(&[4], &[0.0, 0.0, 0.0, 0.0]);
        assert_eq!(a.mse(&b).unwrap().item(), 7.5);
        let c = t64(&[4], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(a.mse(&c).unwrap().item(), 0.0);
    }

    #[test]
    fn gap_is_channel_mean() {
        // Two channels of a 1x2x1x2x2 volume.
        let x = t64(&[1, 2, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0]);
        let y = x.gap().unwrap();
        assert_eq!(y.shape(), &[1, 2]);
        assert_eq!(*y.data(), vec![2.5, 25.0]);
    }

    #[test]
    fn fc_identity_and_hand_values() {
        let x = t64(&[1, 2], &[3.0, 4.0]);
        let eye = t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(*x.fc(&eye).unwrap().data(), vec![3.0, 4.0]);
        // w = [[1,2],[3,4]]: out_i = sum_j w[i][j] x[j].
        let w = t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(*x.fc(&w).unwrap().data(), vec![11.0, 25.0]);
    }

    #[test]
    fn conv3d_all_ones_full_overlap() {
        // 3x3x3 all-ones kernel centered in all-ones volume: sum of 27 taps.
        let x = Tensor::<f64>::full(&[1, 1, 5, 5, 5], 1.0).unwrap();
        let w = Tensor::<f64>::full(&[1, 1, 3, 3, 3], 1.0).unwrap();
        let y = x.conv3d(&w, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 5, 5, 5]);
        let yd = y.data();
        // Center voxel sees the full kernel.
        assert_eq!(yd[(2 * 5 + 2) * 5 + 2], 27.0);
        // Corner voxel sees a 2x2x2 window.
        assert_eq!(yd[0], 8.0);
    }

    #[test]
    fn conv3d_identity_kernel() {
        let data: Vec<f64> = (0..64).map(|v| v as f64 * 0.5 - 3.0).collect();
        let x = t64(&[1, 1, 4, 4, 4], &data);
        let mut w = vec![0.0; 27];
        w[13] = 1.0; // center tap of a 3x3x3 kernel
        let k = Tensor::from_vec(&[1, 1, 3, 3, 3], w).unwrap();
        let y = x.conv3d(&k, 1, 1).unwrap();
        assert_eq!(*y.data(), data);
    }

    #[test]
    fn conv3d_stride2_shape() {
        let x = Tensor::<f64>::full(&[1, 1, 8, 8, 8], 1.0).unwrap();
        let w = Tensor::<f64>::full(&[2, 1, 3, 3, 3], 0.5).unwrap();
        let y = x.conv3d(&w, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 2, 4, 4, 4]);
    }

    #[test]
    fn conv3d_rejects_bad_shapes() {
        let x = Tensor::<f64>::full(&[1, 2, 4, 4, 4], 1.0).unwrap();
        let w = Tensor::<f64>::full(&[1, 3, 3, 3, 3], 1.0).unwrap();
        assert!(x.conv3d(&w, 1, 1).is_err()); // channel mismatch
        let w = Tensor::<f64>::full(&[1, 2, 3, 3, 2], 1.0).unwrap();
        assert!(x.conv3d(&w, 1, 1).is_err()); // non-cubic kernel
        let x_small = Tensor::<f64>::full(&[1, 1, 2, 2, 2], 1.0).unwrap();
        let w = Tensor::<f64>::full(&[1, 1, 3, 3, 3], 1.0).unwrap();
        assert!(x_small.conv3d(&w, 1, 0).is_err()); // kernel larger than input
    }

    #[test]
    fn channel_bias_broadcasts() {
        let x = t64(&[1, 2, 1, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t64(&[2], &[10.0, 20.0]);
        assert_eq!(*x.channel_bias(&b).unwrap().data(), vec![11.0, 12.0, 23.0, 24.0]);
    }

    #[test]
    fn channel_scale_values() {
        let x = t64(&[1, 2, 1, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let s = t64(&[1, 2], &[2.0, -1.0]);
        assert_eq!(*x.channel_scale(&s).unwrap().data(), vec![2.0, 4.0, -3.0, -4.0]);
    }

    #[test]
    fn concat_orders_channels_per_batch() {
        let a = t64(&[2, 1, 1, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t64(&[2, 1, 1, 1, 2], &[10.0, 20.0, 30.0, 40.0]);
        let y = a.concat_channels(&b).unwrap();
        assert_eq!(y.shape(), &[2, 2, 1, 1, 2]);
        assert_eq!(*y.data(), vec![1.0, 2.0, 10.0, 20.0, 3.0, 4.0, 30.0, 40.0]);
    }

    #[test]
    fn upsample_then_downsample_roundtrips() {
        let data: Vec<f64> = (0..8).map(|v| v as f64).collect();
        let x = t64(&[1, 1, 2, 2, 2], &data);
        let up = x.upsample_nearest_2x().unwrap();
        assert_eq!(up.shape(), &[1, 1, 4, 4, 4]);
        let down = up.downsample_avg_2x().unwrap();
        assert_eq!(*down.data(), data);
    }

    #[test]
    fn downsample_requires_even_extents() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 4, 4], 1.0).unwrap();
        assert!(x.downsample_avg_2x().is_err());
    }

    #[test]
    fn instance_norm_normalizes_each_slice() {
        let x = t64(&[1, 2, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 5.0, 5.0, 5.0]);
        let gamma = t64(&[2], &[1.0, 1.0]);
        let beta = t64(&[2], &[0.0, 0.0]);
        let (y, mean, var) = x.instance_norm(&gamma, &beta, 1e-5).unwrap();
        assert_eq!(mean, vec![2.5, 5.0]);
        assert!((var[0] - 1.25).abs() < 1e-12);
        assert_eq!(var[1], 0.0);
        let yd = y.data();
        // First slice has zero mean and (nearly) unit variance.
        let m: f64 = yd[..4].iter().sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-12);
        // Constant slice maps to zero.
        assert!(yd[4..].iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn instance_norm_affine_applies() {
        let x = t64(&[1, 1, 1, 1, 4], &[1.0, 2.0, 3.0, 4.0]);
        let gamma = t64(&[1], &[2.0]);
        let beta = t64(&[1], &[10.0]);
        let (y, _, _) = x.instance_norm(&gamma, &beta, 1e-5).unwrap();
        let m: f64 = y.data().iter().sum::<f64>() / 4.0;
        assert!((m - 10.0).abs() < 1e-9);
    }

    #[test]
    fn relu_gradient_is_zero_at_origin() {
        let x = t64(&[3], &[-1.0, 0.0, 2.0]);
        x.set_requires_grad(true);
        let loss = x.relu().unwrap().sum_sq().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 4.0]);
    }

    #[test]
    fn mul_backward_routes_both_inputs() {
        let a = t64(&[2], &[2.0, 3.0]);
        let b = t64(&[2], &[5.0, 7.0]);
        a.set_requires_grad(true);
        b.set_requires_grad(true);
        // loss = sum((a*b)^2); d/da_i = 2 a_i b_i^2
        let loss = a.mul(&b).unwrap().sum_sq().unwrap();
        loss.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![2.0 * 2.0 * 25.0, 2.0 * 3.0 * 49.0]);
        assert_eq!(b.grad().unwrap(), vec![2.0 * 5.0 * 4.0, 2.0 * 7.0 * 9.0]);
    }

    #[test]
    fn shared_node_grads_sum_over_uses() {
        // loss = sum_sq(x + x) = 4 * sum_sq(x): d/dx = 8x.
        let x = t64(&[2], &[1.0, -2.0]);
        x.set_requires_grad(true);
        let loss = x.add(&x).unwrap().sum_sq().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![8.0, -16.0]);
    }
}
