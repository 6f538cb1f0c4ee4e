//! 3-D convolution kernels on raw buffers.
//!
//! Layout is `[batch, channel, h, w, d]` row-major, so the innermost `d`
//! axis is contiguous. The stride-1 path expresses each kernel tap as an
//! axpy between shifted input rows and output rows, which the compiler
//! vectorizes; arbitrary strides fall back to a direct loop nest.

use super::Element;

#[derive(Clone, Copy)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub d_out: usize,
}

impl ConvDims {
    pub fn out_spatial(extent: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
        let padded = extent + 2 * padding;
        if padded < k || stride == 0 {
            return None;
        }
        Some((padded - k) / stride + 1)
    }
}

/// Output-row range `[lo, hi)` for which `o*stride + tap - padding` stays
/// inside `[0, extent)` (stride-1 case: `o + tap - padding`).
#[inline]
fn valid_range(out_extent: usize, in_extent: usize, tap: usize, padding: usize) -> (usize, usize) {
    let lo = padding.saturating_sub(tap);
    let hi = (in_extent + padding - tap).min(out_extent);
    (lo, hi.max(lo))
}

pub(crate) fn forward<T: Element>(input: &[T], weight: &[T], dims: &ConvDims) -> Vec<T> {
    let mut out = vec![T::ZERO; dims.batch * dims.c_out * dims.h_out * dims.w_out * dims.d_out];
    if dims.stride == 1 {
        forward_stride1(input, weight, &mut out, dims);
    } else {
        forward_general(input, weight, &mut out, dims);
    }
    out
}

fn forward_stride1<T: Element>(input: &[T], weight: &[T], out: &mut [T], dims: &ConvDims) {
    let &ConvDims {
        batch, c_in, c_out, h, w, d, k, padding: p, h_out, w_out, d_out, ..
    } = dims;
    for b in 0..batch {
        for co in 0..c_out {
            let out_base = (b * c_out + co) * h_out * w_out * d_out;
            for ci in 0..c_in {
                let in_base = (b * c_in + ci) * h * w * d;
                let w_base = (co * c_in + ci) * k * k * k;
                for kh in 0..k {
                    let (oh_lo, oh_hi) = valid_range(h_out, h, kh, p);
                    for kw in 0..k {
                        let (ow_lo, ow_hi) = valid_range(w_out, w, kw, p);
                        for kd in 0..k {
                            let (od_lo, od_hi) = valid_range(d_out, d, kd, p);
                            if od_lo >= od_hi {
                                continue;
                            }
                            let wv = weight[w_base + (kh * k + kw) * k + kd];
                            let row_len = od_hi - od_lo;
                            for oh in oh_lo..oh_hi {
                                let ih = oh + kh - p;
                                for ow in ow_lo..ow_hi {
                                    let iw = ow + kw - p;
                                    let o0 = out_base + (oh * w_out + ow) * d_out + od_lo;
                                    let i0 = in_base + (ih * w + iw) * d + od_lo + kd - p;
                                    let orow = &mut out[o0..o0 + row_len];
                                    let irow = &input[i0..i0 + row_len];
                                    for (ov, &iv) in orow.iter_mut().zip(irow) {
                                        *ov += wv * iv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn forward_general<T: Element>(input: &[T], weight: &[T], out: &mut [T], dims: &ConvDims) {
    let &ConvDims {
        batch, c_in, c_out, h, w, d, k, stride, padding: p, h_out, w_out, d_out,
    } = dims;
    for b in 0..batch {
        for co in 0..c_out {
            for oh in 0..h_out {
                for ow in 0..w_out {
                    for od in 0..d_out {
                        let mut acc = T::ZERO;
                        for ci in 0..c_in {
                            let in_base = (b * c_in + ci) * h * w * d;
                            let w_base = (co * c_in + ci) * k * k * k;
                            for kh in 0..k {
                                let ih = (oh * stride + kh) as isize - p as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                for kw in 0..k {
                                    let iw = (ow * stride + kw) as isize - p as isize;
                                    if iw < 0 || iw >= w as isize {
                                        continue;
                                    }
                                    for kd in 0..k {
                                        let id = (od * stride + kd) as isize - p as isize;
                                        if id < 0 || id >= d as isize {
                                            continue;
                                        }
                                        let iv = input[in_base
                                            + (ih as usize * w + iw as usize) * d
                                            + id as usize];
                                        acc += weight[w_base + (kh * k + kw) * k + kd] * iv;
                                    }
                                }
                            }
                        }
                        out[((b * c_out + co) * h_out + oh) * w_out * d_out + ow * d_out + od] =
                            acc;
                    }
                }
            }
        }
    }
}

/// Accumulates `d loss / d input` given the output gradient.
pub(crate) fn backward_input<T: Element>(
    grad_out: &[T],
    weight: &[T],
    grad_in: &mut [T],
    dims: &ConvDims,
) {
    if dims.stride == 1 {
        backward_input_stride1(grad_out, weight, grad_in, dims);
    } else {
        backward_input_general(grad_out, weight, grad_in, dims);
    }
}

fn backward_input_stride1<T: Element>(
    grad_out: &[T],
    weight: &[T],
    grad_in: &mut [T],
    dims: &ConvDims,
) {
    let &ConvDims {
        batch, c_in, c_out, h, w, d, k, padding: p, h_out, w_out, d_out, ..
    } = dims;
    for b in 0..batch {
        for co in 0..c_out {
            let out_base = (b * c_out + co) * h_out * w_out * d_out;
            for ci in 0..c_in {
                let in_base = (b * c_in + ci) * h * w * d;
                let w_base = (co * c_in + ci) * k * k * k;
                for kh in 0..k {
                    let (oh_lo, oh_hi) = valid_range(h_out, h, kh, p);
                    for kw in 0..k {
                        let (ow_lo, ow_hi) = valid_range(w_out, w, kw, p);
                        for kd in 0..k {
                            let (od_lo, od_hi) = valid_range(d_out, d, kd, p);
                            if od_lo >= od_hi {
                                continue;
                            }
                            let wv = weight[w_base + (kh * k + kw) * k + kd];
                            let row_len = od_hi - od_lo;
                            for oh in oh_lo..oh_hi {
                                let ih = oh + kh - p;
                                for ow in ow_lo..ow_hi {
                                    let iw = ow + kw - p;
                                    let o0 = out_base + (oh * w_out + ow) * d_out + od_lo;
                                    let i0 = in_base + (ih * w + iw) * d + od_lo + kd - p;
                                    let grow = &grad_out[o0..o0 + row_len];
                                    let irow = &mut grad_in[i0..i0 + row_len];
                                    for (iv, &gv) in irow.iter_mut().zip(grow) {
                                        *iv += wv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn backward_input_general<T: Element>(
    grad_out: &[T],
    weight: &[T],
    grad_in: &mut [T],
    dims: &ConvDims,
) {
    let &ConvDims {
        batch, c_in, c_out, h, w, d, k, stride, padding: p, h_out, w_out, d_out,
    } = dims;
    for b in 0..batch {
        for co in 0..c_out {
            for oh in 0..h_out {
                for ow in 0..w_out {
                    for od in 0..d_out {
                        let gv = grad_out
                            [((b * c_out + co) * h_out + oh) * w_out * d_out + ow * d_out + od];
                        for ci in 0..c_in {
                            let in_base = (b * c_in + ci) * h * w * d;
                            let w_base = (co * c_in + ci) * k * k * k;
                            for kh in 0..k {
                                let ih = (oh * stride + kh) as isize - p as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                for kw in 0..k {
                                    let iw = (ow * stride + kw) as isize - p as isize;
                                    if iw < 0 || iw >= w as isize {
                                        continue;
                                    }
                                    for kd in 0..k {
                                        let id = (od * stride + kd) as isize - p as isize;
                                        if id < 0 || id >= d as isize {
                                            continue;
                                        }
                                        grad_in[in_base
                                            + (ih as usize * w + iw as usize) * d
                                            + id as usize] +=
                                            weight[w_base + (kh * k + kw) * k + kd] * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates `d loss / d weight` given the output gradient.
pub(crate) fn backward_weight<T: Element>(
    grad_out: &[T],
    input: &[T],
    grad_weight: &mut [T],
    dims: &ConvDims,
) {
    if dims.stride == 1 {
        backward_weight_stride1(grad_out, input, grad_weight, dims);
    } else {
        backward_weight_general(grad_out, input, grad_weight, dims);
    }
}

fn backward_weight_stride1<T: Element>(
    grad_out: &[T],
    input: &[T],
    grad_weight: &mut [T],
    dims: &ConvDims,
) {
    let &ConvDims {
        batch, c_in, c_out, h, w, d, k, padding: p, h_out, w_out, d_out, ..
    } = dims;
    for b in 0..batch {
        for co in 0..c_out {
            let out_base = (b * c_out + co) * h_out * w_out * d_out;
            for ci in 0..c_in {
                let in_base = (b * c_in + ci) * h * w * d;
                let w_base = (co * c_in + ci) * k * k * k;
                for kh in 0..k {
                    let (oh_lo, oh_hi) = valid_range(h_out, h, kh, p);
                    for kw in 0..k {
                        let (ow_lo, ow_hi) = valid_range(w_out, w, kw, p);
                        for kd in 0..k {
                            let (od_lo, od_hi) = valid_range(d_out, d, kd, p);
                            if od_lo >= od_hi {
                                continue;
                            }
                            let row_len = od_hi - od_lo;
                            let mut acc = T::ZERO;
                            for oh in oh_lo..oh_hi {
                                let ih = oh + kh - p;
                                for ow in ow_lo..ow_hi {
                                    let iw = ow + kw - p;
                                    let o0 = out_base + (oh * w_out + ow) * d_out + od_lo;
                                    let i0 = in_base + (ih * w + iw) * d + od_lo + kd - p;
                                    let grow = &grad_out[o0..o0 + row_len];
                                    let irow = &input[i0..i0 + row_len];
                                    for (&gv, &iv) in grow.iter().zip(irow) {
                                        acc += gv * iv;
                                    }
                                }
                            }
                            grad_weight[w_base + (kh * k + kw) * k + kd] += acc;
                        }
                    }
                }
            }
        }
    }
}

fn backward_weight_general<T: Element>(
    grad_out: &[T],
    input: &[T],
    grad_weight: &mut [T],
    dims: &ConvDims,
) {
    let &ConvDims {
        batch, c_in, c_out, h, w, d, k, stride, padding: p, h_out, w_out, d_out,
    } = dims;
    for b in 0..batch {
        for co in 0..c_out {
            for oh in 0..h_out {
                for ow in 0..w_out {
                    for od in 0..d_out {
                        let gv = grad_out
                            [((b * c_out + co) * h_out + oh) * w_out * d_out + ow * d_out + od];
                        for ci in 0..c_in {
                            let in_base = (b * c_in + ci) * h * w * d;
                            let w_base = (co * c_in + ci) * k * k * k;
                            for kh in 0..k {
                                let ih = (oh * stride + kh) as isize - p as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                for kw in 0..k {
                                    let iw = (ow * stride + kw) as isize - p as isize;
                                    if iw < 0 || iw >= w as isize {
                                        continue;
                                    }
                                    for kd in 0..k {
                                        let id = (od * stride + kd) as isize - p as isize;
                                        if id < 0 || id >= d as isize {
                                            continue;
                                        }
                                        grad_weight[w_base + (kh * k + kw) * k + kd] += gv
                                            * input[in_base
                                                + (ih as usize * w + iw as usize) * d
                                                + id as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
