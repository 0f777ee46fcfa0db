//! Differentiable tensor operations.
//!
//! Every op builds a fresh output tensor whose backward closure returns one
//! gradient contribution per parent. Binary ops support NumPy-style
//! right-aligned broadcasting; the backward pass sums gradients over the
//! broadcast axes.

use super::{strides_of, Element, Tensor};
use crate::error::{Result, SerError};

fn dim_err(op: &'static str, detail: String) -> SerError {
    SerError::Dim { op, detail }
}

/// Right-aligned broadcast of two shapes.
pub(crate) fn broadcast_shape(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(dim_err(
                op,
                format!("axis {i}: extents {da} and {db} are incompatible (shapes {a:?} vs {b:?})"),
            ));
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Strides for reading `shape` as if broadcast to `out_rank` dims; broadcast
/// axes get stride 0.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let strides = strides_of(shape);
    let mut out = vec![0usize; rank];
    let offset = rank - shape.len();
    for i in 0..shape.len() {
        out[offset + i] = if shape[i] == 1 { 0 } else { strides[i] };
    }
    out
}

fn apply_broadcast<T: Element>(
    a: &[T],
    b: &[T],
    a_shape: &[usize],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    let numel: usize = out_shape.iter().product();
    if a_shape == out_shape && b_shape == out_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut oa = 0usize;
    let mut ob = 0usize;
    let mut out = Vec::with_capacity(numel);
    for _ in 0..numel {
        out.push(f(a[oa], b[ob]));
        // Increment the multi-index from the innermost axis.
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            oa -= sa[ax] * out_shape[ax];
            ob -= sb[ax] * out_shape[ax];
        }
    }
    out
}

/// Sum `grad` (laid out as `from` shape) down to `to` shape, folding the
/// broadcast axes.
pub(crate) fn reduce_to_shape<T: Element>(grad: &[T], from: &[usize], to: &[usize]) -> Vec<T> {
    if from == to {
        return grad.to_vec();
    }
    let rank = from.len();
    let mut padded = vec![1usize; rank];
    let offset = rank - to.len();
    padded[offset..].copy_from_slice(to);

    let to_numel: usize = to.iter().product();
    let mut out = vec![T::zero(); to_numel];
    let target_strides = {
        let s = strides_of(&padded);
        let mut t = vec![0usize; rank];
        for i in 0..rank {
            t[i] = if padded[i] == 1 { 0 } else { s[i] };
        }
        t
    };
    let mut idx = vec![0usize; rank];
    let mut ot = 0usize;
    for &g in grad {
        out[ot] = out[ot] + g;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ot += target_strides[ax];
            if idx[ax] < from[ax] {
                break;
            }
            idx[ax] = 0;
            ot -= target_strides[ax] * from[ax];
        }
    }
    out
}

fn binary_broadcast<T: Element>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
    vjp_a: impl Fn(&[T], &Tensor<T>, &Tensor<T>) -> Vec<T> + Send + Sync + 'static,
    vjp_b: impl Fn(&[T], &Tensor<T>, &Tensor<T>) -> Vec<T> + Send + Sync + 'static,
) -> Result<Tensor<T>> {
    let out_shape = broadcast_shape(op, a.shape(), b.shape())?;
    let data = apply_broadcast(a.data(), b.data(), a.shape(), b.shape(), &out_shape, f);
    let (ac, bc) = (a.clone(), b.clone());
    let (av, bv) = (a.clone(), b.clone());
    let from = out_shape.clone();
    let vjp: super::VjpFn<T> = Box::new(move |g| {
        let ga = if ac.requires_grad() {
            Some(reduce_to_shape(&vjp_a(g, &ac, &bc), &from, ac.shape()))
        } else {
            None
        };
        let gb = if bc.requires_grad() {
            Some(reduce_to_shape(&vjp_b(g, &ac, &bc), &from, bc.shape()))
        } else {
            None
        };
        vec![ga, gb]
    });
    Ok(Tensor::from_op(data, out_shape, vec![av, bv], vjp))
}

/// Elementwise sum with broadcasting.
pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary_broadcast(
        "add",
        a,
        b,
        |x, y| x + y,
        |g, _, _| g.to_vec(),
        |g, _, _| g.to_vec(),
    )
}

/// Elementwise difference with broadcasting.
pub fn sub<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary_broadcast(
        "sub",
        a,
        b,
        |x, y| x - y,
        |g, _, _| g.to_vec(),
        |g, _, _| g.iter().map(|&v| -v).collect(),
    )
}

/// Elementwise product with broadcasting.
pub fn mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary_broadcast(
        "mul",
        a,
        b,
        |x, y| x * y,
        |g, a, b| {
            let shape = broadcast_shape("mul", a.shape(), b.shape()).expect("checked");
            let expanded =
                apply_broadcast(b.data(), b.data(), b.shape(), b.shape(), &shape, |x, _| x);
            g.iter().zip(expanded).map(|(&gi, bi)| gi * bi).collect()
        },
        |g, a, b| {
            let shape = broadcast_shape("mul", a.shape(), b.shape()).expect("checked");
            let expanded =
                apply_broadcast(a.data(), a.data(), a.shape(), a.shape(), &shape, |x, _| x);
            g.iter().zip(expanded).map(|(&gi, ai)| gi * ai).collect()
        },
    )
}

/// Multiply by a compile-time constant (not a graph node).
pub fn scale<T: Element>(x: &Tensor<T>, c: f64) -> Tensor<T> {
    let c = T::from_f64(c);
    let data = x.data().iter().map(|&v| v * c).collect();
    let xs = x.clone();
    let vjp: super::VjpFn<T> = Box::new(move |g| {
        let _ = &xs;
        vec![Some(g.iter().map(|&v| v * c).collect())]
    });
    Tensor::from_op(data, x.shape().to_vec(), vec![x.clone()], vjp)
}

fn unary<T: Element>(
    x: &Tensor<T>,
    f: impl Fn(T) -> T,
    // (x_i, y_i) -> dy/dx at i
    df: impl Fn(T, T) -> T + Send + Sync + 'static,
) -> Tensor<T> {
    let y: Vec<T> = x.data().iter().map(|&v| f(v)).collect();
    let xc = x.clone();
    let yc = y.clone();
    let vjp: super::VjpFn<T> = Box::new(move |g| {
        let dx = g
            .iter()
            .zip(xc.data().iter().zip(&yc))
            .map(|(&gi, (&xi, &yi))| gi * df(xi, yi))
            .collect();
        vec![Some(dx)]
    });
    Tensor::from_op(y, x.shape().to_vec(), vec![x.clone()], vjp)
}

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    unary(
        x,
        |v| if v > T::zero() { v } else { T::zero() },
        |xi, _| if xi > T::zero() { T::one() } else { T::zero() },
    )
}

fn sigmoid_scalar<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    unary(x, sigmoid_scalar, |_, yi| yi * (T::one() - yi))
}

pub fn tanh<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    unary(x, |v| v.tanh(), |_, yi| T::one() - yi * yi)
}

/// `x * relu6(x + 3) / 6`, the MobileNetV3 nonlinearity.
pub fn hard_swish<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let three = T::from_f64(3.0);
    let six = T::from_f64(6.0);
    unary(
        x,
        move |v| {
            let r = (v + three).max(T::zero()).min(six);
            v * r / six
        },
        move |xi, _| {
            if xi <= -three {
                T::zero()
            } else if xi >= three {
                T::one()
            } else {
                (xi + xi + three) / six
            }
        },
    )
}

/// Sum of all elements, producing a scalar node.
pub fn sum_all<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.data().iter().copied().sum();
    let n = x.numel();
    let vjp: super::VjpFn<T> = Box::new(move |g| vec![Some(vec![g[0]; n])]);
    Tensor::from_op(vec![s], vec![], vec![x.clone()], vjp)
}

/// Weighted sum against constant weights; handy for breaking symmetry in
/// gradient checks.
pub fn dot_const<T: Element>(x: &Tensor<T>, weights: &[T]) -> Result<Tensor<T>> {
    if weights.len() != x.numel() {
        return Err(dim_err(
            "dot_const",
            format!("{} weights for {} elements", weights.len(), x.numel()),
        ));
    }
    let s = x
        .data()
        .iter()
        .zip(weights)
        .map(|(&a, &w)| a * w)
        .sum();
    let w = weights.to_vec();
    let vjp: super::VjpFn<T> = Box::new(move |g| {
        vec![Some(w.iter().map(|&wi| wi * g[0]).collect())]
    });
    Ok(Tensor::from_op(vec![s], vec![], vec![x.clone()], vjp))
}

/// Mean over a single axis.
pub fn axis_mean<T: Element>(x: &Tensor<T>, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(dim_err(
            "axis_mean",
            format!("axis {axis} out of range for rank {}", x.rank()),
        ));
    }
    let shape = x.shape();
    let n = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let inv = T::one() / T::from_f64(n as f64);

    let mut out = vec![T::zero(); outer * inner];
    let data = x.data();
    for o in 0..outer {
        for i in 0..n {
            let base = (o * n + i) * inner;
            let obase = o * inner;
            for r in 0..inner {
                out[obase + r] = out[obase + r] + data[base + r];
            }
        }
    }
    for v in out.iter_mut() {
        *v = *v * inv;
    }

    let mut out_shape: Vec<usize> = shape.to_vec();
    if keepdim {
        out_shape[axis] = 1;
    } else {
        out_shape.remove(axis);
    }
    let numel = x.numel();
    let vjp: super::VjpFn<T> = Box::new(move |g| {
        let mut dx = vec![T::zero(); numel];
        for o in 0..outer {
            for i in 0..n {
                let base = (o * n + i) * inner;
                let gbase = o * inner;
                for r in 0..inner {
                    dx[base + r] = g[gbase + r] * inv;
                }
            }
        }
        vec![Some(dx)]
    });
    Ok(Tensor::from_op(out, out_shape, vec![x.clone()], vjp))
}

/// Spatial mean of a `[B,C,H,W]` (or `[C,H,W]`) map, yielding `[B,C]` (or `[C]`).
pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (lead, h, w) = match x.shape() {
        [b, c, h, w] => (vec![*b, *c], *h, *w),
        [c, h, w] => (vec![*c], *h, *w),
        other => {
            return Err(dim_err(
                "global_avg_pool",
                format!("expected rank 3 or 4, got shape {other:?}"),
            ))
        }
    };
    let planes: usize = lead.iter().product();
    let area = h * w;
    let inv = T::one() / T::from_f64(area as f64);
    let data = x.data();
    let mut out = Vec::with_capacity(planes);
    for p in 0..planes {
        let s: T = data[p * area..(p + 1) * area].iter().copied().sum();
        out.push(s * inv);
    }
    let vjp: super::VjpFn<T> = Box::new(move |g| {
        let mut dx = vec![T::zero(); planes * area];
        for p in 0..planes {
            let gv = g[p] * inv;
            for r in 0..area {
                dx[p * area + r] = gv;
            }
        }
        vec![Some(dx)]
    });
    Ok(Tensor::from_op(out, lead, vec![x.clone()], vjp))
}

/// Softmax along `axis`; rows sum to one.
pub fn softmax<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    softmax_impl(x, axis, false)
}

/// Numerically stable `log(softmax(x))` along `axis`.
pub fn log_softmax<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    softmax_impl(x, axis, true)
}

fn softmax_impl<T: Element>(x: &Tensor<T>, axis: usize, log: bool) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(dim_err(
            "softmax",
            format!("axis {axis} out of range for rank {}", x.rank()),
        ));
    }
    let shape = x.shape().to_vec();
    let n = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let data = x.data();
    let mut out = vec![T::zero(); data.len()];
    for o in 0..outer {
        for r in 0..inner {
            let at = |i: usize| (o * n + i) * inner + r;
            let mut m = data[at(0)];
            for i in 1..n {
                if data[at(i)] > m {
                    m = data[at(i)];
                }
            }
            let mut z = T::zero();
            for i in 0..n {
                z = z + (data[at(i)] - m).exp();
            }
            if log {
                let lz = z.ln();
                for i in 0..n {
                    out[at(i)] = data[at(i)] - m - lz;
                }
            } else {
                for i in 0..n {
                    out[at(i)] = (data[at(i)] - m).exp() / z;
                }
            }
        }
    }
    let yc = out.clone();
    let vjp: super::VjpFn<T> = Box::new(move |g| {
        let mut dx = vec![T::zero(); yc.len()];
        for o in 0..outer {
            for r in 0..inner {
                let at = |i: usize| (o * n + i) * inner + r;
                let mut dot = T::zero();
                if log {
                    // dx_i = g_i - softmax_i * sum_j g_j
                    for i in 0..n {
                        dot = dot + g[at(i)];
                    }
                    for i in 0..n {
                        dx[at(i)] = g[at(i)] - yc[at(i)].exp() * dot;
                    }
                } else {
                    // dx_i = y_i * (g_i - sum_j g_j y_j)
                    for i in 0..n {
                        dot = dot + g[at(i)] * yc[at(i)];
                    }
                    for i in 0..n {
                        dx[at(i)] = yc[at(i)] * (g[at(i)] - dot);
                    }
                }
            }
        }
        vec![Some(dx)]
    });
    Ok(Tensor::from_op(out, shape, vec![x.clone()], vjp))
}

/// Matrix product over the last two axes, equal leading dims.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() < 2 || b.rank() < 2 || a.rank() != b.rank() {
        return Err(dim_err(
            "matmul",
            format!("ranks {} and {} unsupported", a.rank(), b.rank()),
        ));
    }
    let ra = a.rank();
    let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let (kb, n) = (b.shape()[ra - 2], b.shape()[ra - 1]);
    if k != kb {
        return Err(dim_err(
            "matmul",
            format!("inner extents {k} vs {kb} (shapes {:?}, {:?})", a.shape(), b.shape()),
        ));
    }
    if a.shape()[..ra - 2] != b.shape()[..ra - 2] {
        return Err(dim_err(
            "matmul",
            format!("leading dims differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let batch: usize = a.shape()[..ra - 2].iter().product();
    let mut out = vec![T::zero(); batch * m * n];
    mm_batch(a.data(), b.data(), &mut out, batch, m, k, n, false, false);

    let mut out_shape = a.shape()[..ra - 2].to_vec();
    out_shape.push(m);
    out_shape.push(n);
    let (ac, bc) = (a.clone(), b.clone());
    let vjp: super::VjpFn<T> = Box::new(move |g| {
        // da = g . b^T ; db = a^T . g
        let da = if ac.requires_grad() {
            let mut da = vec![T::zero(); batch * m * k];
            mm_batch(g, bc.data(), &mut da, batch, m, n, k, false, true);
            Some(da)
        } else {
            None
        };
        let db = if bc.requires_grad() {
            let mut db = vec![T::zero(); batch * k * n];
            mm_batch(ac.data(), g, &mut db, batch, k, m, n, true, false);
            Some(db)
        } else {
            None
        };
        vec![da, db]
    });
    Ok(Tensor::from_op(out, out_shape, vec![a.clone(), b.clone()], vjp))
}

/// Batched `C = A . B`, with optional transposition of either operand.
/// Shapes per batch: A is m x k (k x m if `ta`), B is k x n (n x k if `tb`).
#[allow(clippy::too_many_arguments)]
fn mm_batch<T: Element>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) {
    let a_sz = m * k;
    let b_sz = k * n;
    let c_sz = m * n;
    for bi in 0..batch {
        let ab = &a[bi * a_sz..(bi + 1) * a_sz];
        let bb = &b[bi * b_sz..(bi + 1) * b_sz];
        let cb = &mut c[bi * c_sz..(bi + 1) * c_sz];
        for i in 0..m {
            for p in 0..k {
                let av = if ta { ab[p * m + i] } else { ab[i * k + p] };
                if av == T::zero() {
                    continue;
                }
                let crow = &mut cb[i * n..(i + 1) * n];
                if tb {
                    for (j, cj) in crow.iter_mut().enumerate() {
                        *cj = *cj + av * bb[j * k + p];
                    }
                } else {
                    let brow = &bb[p * n..(p + 1) * n];
                    for (cj, &bv) in crow.iter_mut().zip(brow) {
                        *cj = *cj + av * bv;
                    }
                }
            }
        }
    }
}

/// Affine map over the last axis: `y = x . w^T + b` with `w: [d_out, d_in]`.
pub fn linear<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    if weight.rank() != 2 {
        return Err(dim_err("linear", format!("weight rank {} != 2", weight.rank())));
    }
    let (d_out, d_in) = (weight.shape()[0], weight.shape()[1]);
    if x.rank() == 0 || *x.shape().last().unwrap() != d_in {
        return Err(dim_err(
            "linear",
            format!(
                "last axis of input {:?} must equal weight d_in {d_in}",
                x.shape()
            ),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [d_out] {
            return Err(dim_err(
                "linear",
                format!("bias shape {:?} != [{d_out}]", b.shape()),
            ));
        }
    }
    let rows: usize = x.shape()[..x.rank() - 1].iter().product();
    let xd = x.data();
    let wd = weight.data();
    let mut out = vec![T::zero(); rows * d_out];
    for r in 0..rows {
        let xrow = &xd[r * d_in..(r + 1) * d_in];
        let orow = &mut out[r * d_out..(r + 1) * d_out];
        for (o, orowo) in orow.iter_mut().enumerate() {
            let wrow = &wd[o * d_in..(o + 1) * d_in];
            let mut acc = match bias {
                Some(b) => b.data()[o],
                None => T::zero(),
            };
            for (xv, wv) in xrow.iter().zip(wrow) {
                acc = acc + *xv * *wv;
            }
            *orowo = acc;
        }
    }
    let mut out_shape = x.shape()[..x.rank() - 1].to_vec();
    out_shape.push(d_out);

    let mut parents = vec![x.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let has_bias = bias.is_some();
    let (xc, wc) = (x.clone(), weight.clone());
    let vjp: super::VjpFn<T> = Box::new(move |g| {
        let mut dx = None;
        let mut dw = None;
        let mut db = None;
        if xc.requires_grad() {
            // dx = g . w
            let mut d = vec![T::zero(); rows * d_in];
            for r in 0..rows {
                let grow = &g[r * d_out..(r + 1) * d_out];
                let drow = &mut d[r * d_in..(r + 1) * d_in];
                for (o, &gv) in grow.iter().enumerate() {
                    if gv == T::zero() {
                        continue;
                    }
                    let wrow = &wc.data()[o * d_in..(o + 1) * d_in];
                    for (dv, &wv) in drow.iter_mut().zip(wrow) {
                        *dv = *dv + gv * wv;
                    }
                }
            }
            dx = Some(d);
        }
        if wc.requires_grad() {
            // dw = g^T . x
            let mut d = vec![T::zero(); d_out * d_in];
            for r in 0..rows {
                let grow = &g[r * d_out..(r + 1) * d_out];
                let xrow = &xc.data()[r * d_in..(r + 1) * d_in];
                for (o, &gv) in grow.iter().enumerate() {
                    if gv == T::zero() {
                        continue;
                    }
                    let drow = &mut d[o * d_in..(o + 1) * d_in];
                    for (dv, &xv) in drow.iter_mut().zip(xrow) {
                        *dv = *dv + gv * xv;
                    }
                }
            }
            dw = Some(d);
        }
        if has_bias {
            let mut d = vec![T::zero(); d_out];
            for r in 0..rows {
                let grow = &g[r * d_out..(r + 1) * d_out];
                for (dv, &gv) in d.iter_mut().zip(grow) {
                    *dv = *dv + gv;
                }
            }
            db = Some(d);
        }
        let mut v = vec![dx, dw];
        if has_bias {
            v.push(db);
        }
        v
    });
    Ok(Tensor::from_op(out, out_shape, parents, vjp))
}

/// Same data, new shape.
pub fn reshape<T: Element>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let numel: usize = shape.iter().product();
    if numel != x.numel() {
        return Err(dim_err(
            "reshape",
            format!("cannot view {:?} as {:?}", x.shape(), shape),
        ));
    }
    let vjp: super::VjpFn<T> = Box::new(move |g| vec![Some(g.to_vec())]);
    Ok(Tensor::from_op(
        x.data().to_vec(),
        shape.to_vec(),
        vec![x.clone()],
        vjp,
    ))
}

/// Axis permutation (generalized transpose).
pub fn permute<T: Element>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let rank = x.rank();
    if perm.len() != rank || {
        let mut seen = vec![false; rank];
        perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
    } {
        return Err(dim_err(
            "permute",
            format!("{perm:?} is not a permutation of 0..{rank}"),
        ));
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let data = permute_data(x.data(), x.shape(), perm);
    let inverse: Vec<usize> = {
        let mut inv = vec![0usize; rank];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        inv
    };
    let oshape = out_shape.clone();
    let vjp: super::VjpFn<T> = Box::new(move |g| {
        vec![Some(permute_data(g, &oshape, &inverse))]
    });
    Ok(Tensor::from_op(data, out_shape, vec![x.clone()], vjp))
}

fn permute_data<T: Element>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides_of(shape);
    // Stride to advance in the input when the k-th OUTPUT axis increments.
    let walk: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel: usize = shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..numel {
        out.push(data[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += walk[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            off -= walk[ax] * out_shape[ax];
        }
    }
    out
}

/// Concatenate along `axis`; all other extents must match.
pub fn concat<T: Element>(xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    if xs.is_empty() {
        return Err(dim_err("concat", "no inputs".into()));
    }
    let rank = xs[0].rank();
    if axis >= rank {
        return Err(dim_err("concat", format!("axis {axis} out of range for rank {rank}")));
    }
    let mut axis_total = 0usize;
    for x in xs {
        if x.rank() != rank {
            return Err(dim_err("concat", "rank mismatch between inputs".into()));
        }
        for d in 0..rank {
            if d != axis && x.shape()[d] != xs[0].shape()[d] {
                return Err(dim_err(
                    "concat",
                    format!("axis {d}: extents {} vs {}", x.shape()[d], xs[0].shape()[d]),
                ));
            }
        }
        axis_total += x.shape()[axis];
    }
    let mut out_shape = xs[0].shape().to_vec();
    out_shape[axis] = axis_total;

    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let mut out = vec![T::zero(); outer * axis_total * inner];
    let mut offset = 0usize;
    let mut extents = Vec::with_capacity(xs.len());
    for x in xs {
        let n = x.shape()[axis];
        extents.push(n);
        let d = x.data();
        for o in 0..outer {
            let src = &d[o * n * inner..(o + 1) * n * inner];
            let dst_base = (o * axis_total + offset) * inner;
            out[dst_base..dst_base + n * inner].copy_from_slice(src);
        }
        offset += n;
    }
    let parents: Vec<Tensor<T>> = xs.iter().map(|x| (*x).clone()).collect();
    let needs: Vec<bool> = parents.iter().map(|p| p.requires_grad()).collect();
    let vjp: super::VjpFn<T> = Box::new(move |g| {
        let mut grads = Vec::with_capacity(extents.len());
        let mut offset = 0usize;
        for (idx, &n) in extents.iter().enumerate() {
            if !needs[idx] {
                grads.push(None);
                offset += n;
                continue;
            }
            let mut dx = vec![T::zero(); outer * n * inner];
            for o in 0..outer {
                let src_base = (o * axis_total + offset) * inner;
                dx[o * n * inner..(o + 1) * n * inner]
                    .copy_from_slice(&g[src_base..src_base + n * inner]);
            }
            grads.push(Some(dx));
            offset += n;
        }
        grads
    });
    Ok(Tensor::from_op(out, out_shape, parents, vjp))
}

/// Contiguous sub-range `[start, start+len)` along `axis`.
pub fn slice_axis<T: Element>(
    x: &Tensor<T>,
    axis: usize,
    start: usize,
    len: usize,
) -> Result<Tensor<T>> {
    let rank = x.rank();
    if axis >= rank {
        return Err(dim_err("slice_axis", format!("axis {axis} out of range for rank {rank}")));
    }
    let n = x.shape()[axis];
    if start + len > n {
        return Err(dim_err(
            "slice_axis",
            format!("range {start}..{} exceeds extent {n}", start + len),
        ));
    }
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let mut out = vec![T::zero(); outer * len * inner];
    let d = x.data();
    for o in 0..outer {
        let src_base = (o * n + start) * inner;
        out[o * len * inner..(o + 1) * len * inner]
            .copy_from_slice(&d[src_base..src_base + len * inner]);
    }
    let mut out_shape = x.shape().to_vec();
    out_shape[axis] = len;
    let total = x.numel();
    let vjp: super::VjpFn<T> = Box::new(move |g| {
        let mut dx = vec![T::zero(); total];
        for o in 0..outer {
            let dst_base = (o * n + start) * inner;
            dx[dst_base..dst_base + len * inner]
                .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
        }
        vec![Some(dx)]
    });
    Ok(Tensor::from_op(out, out_shape, vec![x.clone()], vjp))
}

/// Zero-pad the last two axes by (top, bottom, left, right).
pub fn pad2d<T: Element>(
    x: &Tensor<T>,
    top: usize,
    bottom: usize,
    left: usize,
    right: usize,
) -> Result<Tensor<T>> {
    let rank = x.rank();
    if rank < 2 {
        return Err(dim_err("pad2d", format!("rank {rank} < 2")));
    }
    let h = x.shape()[rank - 2];
    let w = x.shape()[rank - 1];
    let oh = h + top + bottom;
    let ow = w + left + right;
    let planes: usize = x.shape()[..rank - 2].iter().product();
    let mut out = vec![T::zero(); planes * oh * ow];
    let d = x.data();
    for p in 0..planes {
        for r in 0..h {
            let src = p * h * w + r * w;
            let dst = p * oh * ow + (r + top) * ow + left;
            out[dst..dst + w].copy_from_slice(&d[src..src + w]);
        }
    }
    let mut out_shape = x.shape()[..rank - 2].to_vec();
    out_shape.push(oh);
    out_shape.push(ow);
    let vjp: super::VjpFn<T> = Box::new(move |g| {
        let mut dx = vec![T::zero(); planes * h * w];
        for p in 0..planes {
            for r in 0..h {
                let dst = p * h * w + r * w;
                let src = p * oh * ow + (r + top) * ow + left;
                dx[dst..dst + w].copy_from_slice(&g[src..src + w]);
            }
        }
        vec![Some(dx)]
    });
    Ok(Tensor::from_op(out, out_shape, vec![x.clone()], vjp))
}

/// Deterministic channel permutation: channel `i` of a `[.., C, H, W]` map
/// moves to `(i % groups) * (C / groups) + i / groups`. A pure reshuffle;
/// composing with `groups = C/G` undoes it.
pub fn channel_shuffle<T: Element>(x: &Tensor<T>, groups: usize) -> Result<Tensor<T>> {
    let rank = x.rank();
    if rank != 3 && rank != 4 {
        return Err(dim_err(
            "channel_shuffle",
            format!("expected rank 3 or 4, got {rank}"),
        ));
    }
    let c_axis = rank - 3;
    let c = x.shape()[c_axis];
    if groups == 0 || c % groups != 0 {
        return Err(SerError::Config(format!(
            "channel_shuffle: groups {groups} must divide channel count {c}"
        )));
    }
    let per = c / groups;
    // dest[i] = (i % groups) * per + i / groups
    let mut dest = vec![0usize; c];
    for (i, d) in dest.iter_mut().enumerate() {
        *d = (i % groups) * per + i / groups;
    }
    let batch: usize = x.shape()[..c_axis].iter().product();
    let plane: usize = x.shape()[c_axis + 1..].iter().product();
    let data = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for b in 0..batch {
        for i in 0..c {
            let src = (b * c + i) * plane;
            let dst = (b * c + dest[i]) * plane;
            out[dst..dst + plane].copy_from_slice(&data[src..src + plane]);
        }
    }
    let dest_v = dest.clone();
    let total = x.numel();
    let vjp: super::VjpFn<T> = Box::new(move |g| {
        let mut dx = vec![T::zero(); total];
        for b in 0..batch {
            for i in 0..c {
                let dst = (b * c + i) * plane;
                let src = (b * c + dest_v[i]) * plane;
                dx[dst..dst + plane].copy_from_slice(&g[src..src + plane]);
            }
        }
        vec![Some(dx)]
    });
    Ok(Tensor::from_op(out, x.shape().to_vec(), vec![x.clone()], vjp))
}
