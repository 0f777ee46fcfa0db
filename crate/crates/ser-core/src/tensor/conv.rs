//! 2D convolution (plain, grouped, depthwise, pointwise) and max pooling.
//!
//! Inputs may be `[C,H,W]` or `[B,C,H,W]`; the output keeps the input rank.
//! For every output element the accumulation runs in `(c_in, kh, kw)` order
//! starting from the bias, which makes the result bit-identical to the
//! classic quadruple-loop formulation.

use super::{Element, Tensor, VjpFn};
use crate::error::{Result, SerError};

fn dim_err(op: &'static str, detail: String) -> SerError {
    SerError::Dim { op, detail }
}

struct ConvGeometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    ci_per_group: usize,
    k_h: usize,
    k_w: usize,
    h_out: usize,
    w_out: usize,
    groups: usize,
}

fn conv_geometry(
    op: &'static str,
    x_shape: &[usize],
    w_shape: &[usize],
    stride: (usize, usize),
    padding: (usize, usize),
    groups: usize,
) -> Result<(ConvGeometry, bool)> {
    let (batched, batch, c_in, h, w) = match x_shape {
        [b, c, h, w] => (true, *b, *c, *h, *w),
        [c, h, w] => (false, 1, *c, *h, *w),
        other => {
            return Err(dim_err(op, format!("input must be rank 3 or 4, got {other:?}")));
        }
    };
    let [c_out, ci_per_group, k_h, k_w] = match w_shape {
        [a, b, c, d] => [*a, *b, *c, *d],
        other => {
            return Err(dim_err(op, format!("weight must be rank 4, got {other:?}")));
        }
    };
    if stride.0 == 0 || stride.1 == 0 {
        return Err(dim_err(op, "stride components must be positive".into()));
    }
    if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
        return Err(dim_err(
            op,
            format!("groups {groups} must divide c_in {c_in} and c_out {c_out}"),
        ));
    }
    if ci_per_group != c_in / groups {
        return Err(dim_err(
            op,
            format!(
                "weight channel axis: expected c_in/groups = {} input channels, got {}",
                c_in / groups,
                ci_per_group
            ),
        ));
    }
    let h_pad = h + 2 * padding.0;
    let w_pad = w + 2 * padding.1;
    if k_h > h_pad || k_w > w_pad {
        return Err(dim_err(
            op,
            format!("kernel {k_h}x{k_w} exceeds padded input {h_pad}x{w_pad}"),
        ));
    }
    let h_out = (h_pad - k_h) / stride.0 + 1;
    let w_out = (w_pad - k_w) / stride.1 + 1;
    Ok((
        ConvGeometry {
            batch,
            c_in,
            h,
            w,
            c_out,
            ci_per_group,
            k_h,
            k_w,
            h_out,
            w_out,
            groups,
        },
        batched,
    ))
}

/// Grouped 2D convolution with optional bias. `groups = 1` is a plain
/// convolution; `groups = c_in` with `c_out = c_in` is depthwise.
pub fn conv2d_grouped<T: Element>(
    op: &'static str,
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: (usize, usize),
    padding: (usize, usize),
    groups: usize,
) -> Result<Tensor<T>> {
    let (geo, batched) = conv_geometry(op, x.shape(), weight.shape(), stride, padding, groups)?;
    if let Some(b) = bias {
        if b.shape() != [geo.c_out] {
            return Err(dim_err(
                op,
                format!("bias shape {:?} != [{}]", b.shape(), geo.c_out),
            ));
        }
    }

    let out = conv_forward(x.data(), weight.data(), bias.map(|b| b.data()), &geo, stride, padding);

    let out_shape: Vec<usize> = if batched {
        vec![geo.batch, geo.c_out, geo.h_out, geo.w_out]
    } else {
        vec![geo.c_out, geo.h_out, geo.w_out]
    };

    let mut parents = vec![x.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let has_bias = bias.is_some();
    let xc = x.clone();
    let wc = weight.clone();
    let vjp: VjpFn<T> = Box::new(move |g| {
        let geo = conv_geometry(
            "conv_vjp",
            xc.shape(),
            wc.shape(),
            stride,
            padding,
            groups,
        )
        .expect("geometry validated on forward")
        .0;
        let (dx, dw, db) = conv_backward(
            g,
            xc.data(),
            wc.data(),
            &geo,
            stride,
            padding,
            xc.requires_grad(),
            wc.requires_grad(),
            has_bias,
        );
        let mut v = vec![dx, dw];
        if has_bias {
            v.push(db);
        }
        v
    });
    Ok(Tensor::from_op(out, out_shape, parents, vjp))
}

/// Half-open output range along one axis for which
/// `o * stride + k - pad` stays inside `[0, in_len)`.
fn valid_range(out_len: usize, in_len: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let last_in = in_len as isize - 1 - k as isize + pad as isize;
    if last_in < 0 {
        return (0, 0);
    }
    let hi = (last_in as usize / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

fn conv_forward<T: Element>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    geo: &ConvGeometry,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Vec<T> {
    let ConvGeometry {
        batch,
        c_in,
        h,
        w: iw,
        c_out,
        ci_per_group,
        k_h,
        k_w,
        h_out,
        w_out,
        groups,
    } = *geo;
    let co_per_group = c_out / groups;
    let mut out = vec![T::zero(); batch * c_out * h_out * w_out];
    for b in 0..batch {
        for co in 0..c_out {
            let group = co / co_per_group;
            let out_plane = &mut out
                [(b * c_out + co) * h_out * w_out..(b * c_out + co + 1) * h_out * w_out];
            if let Some(bv) = bias {
                out_plane.fill(bv[co]);
            }
            for ci_rel in 0..ci_per_group {
                let ci = group * ci_per_group + ci_rel;
                let x_plane = &x[(b * c_in + ci) * h * iw..(b * c_in + ci + 1) * h * iw];
                let w_base = ((co * ci_per_group) + ci_rel) * k_h * k_w;
                for kh in 0..k_h {
                    for kw in 0..k_w {
                        let wv = w[w_base + kh * k_w + kw];
                        let (wo_lo, wo_hi) = valid_range(w_out, iw, stride.1, kw, padding.1);
                        for ho in 0..h_out {
                            let ih = (ho * stride.0 + kh) as isize - padding.0 as isize;
                            if ih < 0 || ih as usize >= h {
                                continue;
                            }
                            let x_row = &x_plane[ih as usize * iw..(ih as usize + 1) * iw];
                            let o_row = &mut out_plane[ho * w_out..(ho + 1) * w_out];
                            if stride.1 == 1 {
                                let off = (wo_lo + kw) as isize - padding.1 as isize;
                                let xs = &x_row[off as usize..off as usize + (wo_hi - wo_lo)];
                                for (ov, &xv) in o_row[wo_lo..wo_hi].iter_mut().zip(xs) {
                                    *ov = *ov + wv * xv;
                                }
                            } else {
                                for wo in wo_lo..wo_hi {
                                    let iw_pos =
                                        (wo * stride.1 + kw) as isize - padding.1 as isize;
                                    o_row[wo] = o_row[wo] + wv * x_row[iw_pos as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Element>(
    g: &[T],
    x: &[T],
    w: &[T],
    geo: &ConvGeometry,
    stride: (usize, usize),
    padding: (usize, usize),
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let ConvGeometry {
        batch,
        c_in,
        h,
        w: iw,
        c_out,
        ci_per_group,
        k_h,
        k_w,
        h_out,
        w_out,
        groups,
    } = *geo;
    let co_per_group = c_out / groups;
    let mut dx = if need_dx {
        Some(vec![T::zero(); batch * c_in * h * iw])
    } else {
        None
    };
    let mut dw = if need_dw {
        Some(vec![T::zero(); c_out * ci_per_group * k_h * k_w])
    } else {
        None
    };
    let mut db = if need_db {
        Some(vec![T::zero(); c_out])
    } else {
        None
    };

    for b in 0..batch {
        for co in 0..c_out {
            let group = co / co_per_group;
            let g_plane = &g[(b * c_out + co) * h_out * w_out..(b * c_out + co + 1) * h_out * w_out];
            if let Some(db) = db.as_mut() {
                let mut s = T::zero();
                for &gv in g_plane {
                    s = s + gv;
                }
                db[co] = db[co] + s;
            }
            if !need_dx && !need_dw {
                continue;
            }
            for ci_rel in 0..ci_per_group {
                let ci = group * ci_per_group + ci_rel;
                let x_off = (b * c_in + ci) * h * iw;
                let w_base = ((co * ci_per_group) + ci_rel) * k_h * k_w;
                for kh in 0..k_h {
                    for kw in 0..k_w {
                        let wv = w[w_base + kh * k_w + kw];
                        let (wo_lo, wo_hi) = valid_range(w_out, iw, stride.1, kw, padding.1);
                        let mut wacc = T::zero();
                        for ho in 0..h_out {
                            let ih = (ho * stride.0 + kh) as isize - padding.0 as isize;
                            if ih < 0 || ih as usize >= h {
                                continue;
                            }
                            let row_off = x_off + ih as usize * iw;
                            let g_row = &g_plane[ho * w_out..(ho + 1) * w_out];
                            if stride.1 == 1 {
                                let off = row_off + wo_lo + kw - padding.1;
                                let gs = &g_row[wo_lo..wo_hi];
                                if need_dw {
                                    let xs = &x[off..off + (wo_hi - wo_lo)];
                                    for (&gv, &xv) in gs.iter().zip(xs) {
                                        wacc = wacc + gv * xv;
                                    }
                                }
                                if let Some(dx) = dx.as_mut() {
                                    let dxs = &mut dx[off..off + (wo_hi - wo_lo)];
                                    for (dv, &gv) in dxs.iter_mut().zip(gs) {
                                        *dv = *dv + wv * gv;
                                    }
                                }
                            } else {
                                for wo in wo_lo..wo_hi {
                                    let iw_pos =
                                        (wo * stride.1 + kw) as usize - padding.1;
                                    let gv = g_row[wo];
                                    if need_dw {
                                        wacc = wacc + gv * x[row_off + iw_pos];
                                    }
                                    if let Some(dx) = dx.as_mut() {
                                        let slot = row_off + iw_pos;
                                        dx[slot] = dx[slot] + wv * gv;
                                    }
                                }
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            dw[w_base + kh * k_w + kw] = dw[w_base + kh * k_w + kw] + wacc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Plain 2D convolution.
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor<T>> {
    conv2d_grouped("conv2d", x, weight, bias, stride, padding, 1)
}

/// Depthwise convolution: weight `[C, 1, kH, kW]`, one filter per channel.
/// Output channel `c` depends only on input channel `c`.
pub fn depthwise_conv2d<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor<T>> {
    let c = match x.shape() {
        [_, c, _, _] | [c, _, _] => *c,
        _ => 0,
    };
    if weight.rank() != 4 || weight.shape()[0] != c || weight.shape()[1] != 1 {
        return Err(dim_err(
            "depthwise_conv2d",
            format!(
                "weight {:?} must be [{c}, 1, kH, kW] to match input channels",
                weight.shape()
            ),
        ));
    }
    conv2d_grouped("depthwise_conv2d", x, weight, bias, stride, padding, c)
}

/// Pointwise (1x1) convolution; equals `conv2d` with a 1x1 kernel.
pub fn pointwise_conv2d<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    if weight.rank() != 4 || weight.shape()[2] != 1 || weight.shape()[3] != 1 {
        return Err(dim_err(
            "pointwise_conv2d",
            format!("weight {:?} must have a 1x1 kernel", weight.shape()),
        ));
    }
    conv2d_grouped("pointwise_conv2d", x, weight, bias, (1, 1), (0, 0), 1)
}

/// Non-overlapping max pooling over the last two axes (floor semantics:
/// trailing rows/columns that do not fill a window are dropped). Ties go to
/// the first element in row-major scan order.
pub fn max_pool2d<T: Element>(x: &Tensor<T>, kernel: usize) -> Result<Tensor<T>> {
    if kernel == 0 {
        return Err(dim_err("max_pool2d", "kernel must be positive".into()));
    }
    let (batched, batch, c, h, w) = match x.shape() {
        [b, c, h, w] => (true, *b, *c, *h, *w),
        [c, h, w] => (false, 1, *c, *h, *w),
        other => {
            return Err(dim_err(
                "max_pool2d",
                format!("input must be rank 3 or 4, got {other:?}"),
            ));
        }
    };
    let h_out = h / kernel;
    let w_out = w / kernel;
    if h_out == 0 || w_out == 0 {
        return Err(dim_err(
            "max_pool2d",
            format!("input {h}x{w} smaller than pool window {kernel}x{kernel}"),
        ));
    }
    let planes = batch * c;
    let data = x.data();
    let mut out = Vec::with_capacity(planes * h_out * w_out);
    let mut argmax = Vec::with_capacity(planes * h_out * w_out);
    for p in 0..planes {
        let plane = &data[p * h * w..(p + 1) * h * w];
        for ho in 0..h_out {
            for wo in 0..w_out {
                let mut best_idx = ho * kernel * w + wo * kernel;
                let mut best = plane[best_idx];
                for dh in 0..kernel {
                    for dw in 0..kernel {
                        let idx = (ho * kernel + dh) * w + wo * kernel + dw;
                        if plane[idx] > best {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(p * h * w + best_idx);
            }
        }
    }
    let out_shape: Vec<usize> = if batched {
        vec![batch, c, h_out, w_out]
    } else {
        vec![c, h_out, w_out]
    };
    let total = x.numel();
    let vjp: VjpFn<T> = Box::new(move |g| {
        let mut dx = vec![T::zero(); total];
        for (&src, &gv) in argmax.iter().zip(g) {
            dx[src] = dx[src] + gv;
        }
        vec![Some(dx)]
    });
    Ok(Tensor::from_op(out, out_shape, vec![x.clone()], vjp))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::leaf(data.to_vec(), shape, true).unwrap()
    }

    #[test]
    fn ones_kernel_on_ones_input_sums_window() {
        let x = t(&[1.0; 9], &[1, 1, 3, 3]);
        let w = t(&[1.0; 9], &[1, 1, 3, 3]);
        let y = conv2d(&x, &w, None, (1, 1), (0, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn identity_kernel_is_identity() {
        let data: Vec<f64> = (0..25).map(|i| i as f64 * 0.37 - 4.0).collect();
        let x = t(&data, &[1, 5, 5]);
        let w = t(&[1.0], &[1, 1, 1, 1]);
        let y = conv2d(&x, &w, None, (1, 1), (0, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 5, 5]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn output_size_formula() {
        let x = t(&vec![0.0; 2 * 3 * 11 * 7], &[2, 3, 11, 7]);
        let w = t(&vec![0.0; 4 * 3 * 3 * 3], &[4, 3, 3, 3]);
        let y = conv2d(&x, &w, None, (2, 1), (1, 0)).unwrap();
        // H' = (11 + 2 - 3)/2 + 1 = 6 ; W' = (7 - 3)/1 + 1 = 5
        assert_eq!(y.shape(), &[2, 4, 6, 5]);
    }

    #[test]
    fn shape_mismatch_names_axis() {
        let x = t(&vec![0.0; 2 * 4 * 4], &[2, 4, 4]);
        let w = t(&vec![0.0; 3 * 3 * 3 * 3], &[3, 3, 3, 3]);
        let err = conv2d(&x, &w, None, (1, 1), (0, 0)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("channel"), "unexpected message: {msg}");
    }

    #[test]
    fn depthwise_identity_kernels() {
        let data: Vec<f64> = (0..2 * 3 * 3).map(|i| i as f64 - 4.0).collect();
        let x = t(&data, &[2, 3, 3]);
        let w = t(&[1.0, 1.0], &[2, 1, 1, 1]);
        let y = depthwise_conv2d(&x, &w, None, (1, 1), (0, 0)).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn depthwise_channel_independence() {
        let data: Vec<f64> = (0..2 * 4 * 4).map(|i| (i as f64).sin()).collect();
        let x = t(&data, &[2, 4, 4]);
        // Channel 0 weight zeroed, channel 1 identity.
        let w = t(&[0.0, 1.0], &[2, 1, 1, 1]);
        let y = depthwise_conv2d(&x, &w, None, (1, 1), (0, 0)).unwrap();
        assert!(y.data()[..16].iter().all(|&v| v == 0.0));
        assert_eq!(&y.data()[16..], &x.data()[16..]);
    }

    #[test]
    fn depthwise_rejects_channel_mismatch() {
        let x = t(&vec![0.0; 2 * 3 * 3], &[2, 3, 3]);
        let w = t(&vec![0.0; 3 * 9], &[3, 1, 3, 3]);
        assert!(depthwise_conv2d(&x, &w, None, (1, 1), (1, 1)).is_err());
    }

    #[test]
    fn pointwise_identity_and_channel_sum() {
        let data: Vec<f64> = (0..3 * 2 * 2).map(|i| i as f64 * 0.5).collect();
        let x = t(&data, &[3, 2, 2]);
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = t(&eye, &[3, 3, 1, 1]);
        let y = pointwise_conv2d(&x, &w, None).unwrap();
        assert_eq!(y.data(), x.data());

        let ones = t(&[1.0, 1.0, 1.0], &[1, 3, 1, 1]);
        let s = pointwise_conv2d(&x, &ones, None).unwrap();
        for p in 0..4 {
            let expect = x.data()[p] + x.data()[4 + p] + x.data()[8 + p];
            assert_eq!(s.data()[p], expect);
        }
    }

    #[test]
    fn max_pool_2x2_and_grad_routing() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0], &[1, 3, 3]);
        let y = max_pool2d(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[5.0]);
        crate::tensor::ops::sum_all(&y).backward().unwrap();
        let g = x.grad().unwrap();
        let mut expect = vec![0.0; 9];
        expect[4] = 1.0;
        assert_eq!(g, expect);
    }
}
