//! Forward and backward kernels on plain tensors.
//!
//! Layouts: images are NCHW, token sequences `[N, T, D]`, linear weights
//! `[in, out]` so that `y = x W + b` and `dW = x^T g`.

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride,
            padding,
            groups: 1,
        }
    }

    pub fn depthwise(stride: usize, padding: usize, channels: usize) -> Self {
        Self {
            stride,
            padding,
            groups: channels,
        }
    }
}

/// Output length along one spatial axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    hout: usize,
    wout: usize,
    cin_g: usize,
    cout_g: usize,
}

fn conv_geom<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, spec: Conv2dSpec) -> Result<ConvGeom> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 4 || ws.len() != 4 {
        return shape_err(format!(
            "conv2d expects 4-D input and weight, got {xs:?} and {ws:?}"
        ));
    }
    let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, cin_g, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let g = spec.groups;
    if g == 0 || cin % g != 0 || cout % g != 0 || cin / g != cin_g {
        return shape_err(format!(
            "conv2d channels: input {cin}, weight {ws:?}, groups {g}"
        ));
    }
    let (Some(hout), Some(wout)) = (
        conv_out_dim(h, kh, spec.stride, spec.padding),
        conv_out_dim(wd, kw, spec.stride, spec.padding),
    ) else {
        return shape_err(format!(
            "conv2d kernel {kh}x{kw} stride {} padding {} does not fit {h}x{wd}",
            spec.stride, spec.padding
        ));
    };
    Ok(ConvGeom {
        n,
        cin,
        h,
        w: wd,
        cout,
        kh,
        kw,
        hout,
        wout,
        cin_g,
        cout_g: cout / g,
    })
}

/// Valid output range along one axis for kernel tap `k`.
#[inline]
fn tap_range(k: usize, stride: usize, padding: usize, input: usize, out: usize) -> (usize, usize) {
    let lo = if padding > k {
        (padding - k).div_ceil(stride)
    } else {
        0
    };
    let hi = if input + padding > k {
        ((input - 1 + padding - k) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Cross-correlation with zero padding and channel groups.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: Conv2dSpec,
) -> Result<Tensor<T>> {
    let g = conv_geom(x, w, spec)?;
    if let Some(b) = b {
        if b.shape() != [g.cout] {
            return shape_err(format!(
                "conv2d bias {:?} for {} outputs",
                b.shape(),
                g.cout
            ));
        }
    }
    let (s, p) = (spec.stride, spec.padding);
    let plane_out = g.hout * g.wout;
    let mut out = Tensor::zeros(&[g.n, g.cout, g.hout, g.wout]);
    let (xd, wd) = (x.data(), w.data());
    let od = out.data_mut();

    for n in 0..g.n {
        for oc in 0..g.cout {
            let group = oc / g.cout_g;
            let o = &mut od[(n * g.cout + oc) * plane_out..][..plane_out];
            if let Some(b) = b {
                o.fill(b.data()[oc]);
            }
            for icg in 0..g.cin_g {
                let ic = group * g.cin_g + icg;
                let xp = &xd[(n * g.cin + ic) * g.h * g.w..][..g.h * g.w];
                for ki in 0..g.kh {
                    let (oh_lo, oh_hi) = tap_range(ki, s, p, g.h, g.hout);
                    for kj in 0..g.kw {
                        let wv = wd[((oc * g.cin_g + icg) * g.kh + ki) * g.kw + kj];
                        let (ow_lo, ow_hi) = tap_range(kj, s, p, g.w, g.wout);
                        for oh in oh_lo..oh_hi {
                            let ih = oh * s + ki - p;
                            let xrow = &xp[ih * g.w..][..g.w];
                            let orow = &mut o[oh * g.wout..][..g.wout];
                            for ow in ow_lo..ow_hi {
                                orow[ow] += wv * xrow[ow * s + kj - p];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
#[allow(clippy::needless_range_loop)]
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: Conv2dSpec,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = conv_geom(x, w, spec)?;
    if grad_out.shape() != [g.n, g.cout, g.hout, g.wout] {
        return shape_err(format!("conv2d upstream gradient {:?}", grad_out.shape()));
    }
    let (s, p) = (spec.stride, spec.padding);
    let plane_out = g.hout * g.wout;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[g.cout]);
    let (xd, wd, gd) = (x.data(), w.data(), grad_out.data());

    for n in 0..g.n {
        for oc in 0..g.cout {
            let group = oc / g.cout_g;
            let go = &gd[(n * g.cout + oc) * plane_out..][..plane_out];
            db.data_mut()[oc] += go.iter().copied().sum();
            for icg in 0..g.cin_g {
                let ic = group * g.cin_g + icg;
                let base = (n * g.cin + ic) * g.h * g.w;
                for ki in 0..g.kh {
                    let (oh_lo, oh_hi) = tap_range(ki, s, p, g.h, g.hout);
                    for kj in 0..g.kw {
                        let widx = ((oc * g.cin_g + icg) * g.kh + ki) * g.kw + kj;
                        let wv = wd[widx];
                        let (ow_lo, ow_hi) = tap_range(kj, s, p, g.w, g.wout);
                        let mut acc = T::zero();
                        for oh in oh_lo..oh_hi {
                            let ih = oh * s + ki - p;
                            let grow = &go[oh * g.wout..][..g.wout];
                            let xrow = &xd[base + ih * g.w..][..g.w];
                            let dxrow = &mut dx.data_mut()[base + ih * g.w..][..g.w];
                            for ow in ow_lo..ow_hi {
                                let iw = ow * s + kj - p;
                                acc += xrow[iw] * grow[ow];
                                dxrow[iw] += wv * grow[ow];
                            }
                        }
                        dw.data_mut()[widx] += acc;
                    }
                }
            }
        }
    }
    Ok((dx, dw, db))
}

fn linear_dims<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let ws = w.shape();
    let Some(&din) = x.shape().last() else {
        return shape_err("linear input must have rank >= 1".into());
    };
    if ws.len() != 2 || ws[0] != din {
        return shape_err(format!(
            "linear weight {ws:?} does not accept input {:?}",
            x.shape()
        ));
    }
    Ok((x.len() / din.max(1), din, ws[1]))
}

/// `y = x W + b` over the last axis of `x`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (rows, din, dout) = linear_dims(x, w)?;
    if let Some(b) = b {
        if b.shape() != [dout] {
            return shape_err(format!("linear bias {:?} for {dout} outputs", b.shape()));
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    let mut out = Tensor::zeros(&shape);
    let (xd, wd) = (x.data(), w.data());
    for (r, orow) in out
        .data_mut()
        .chunks_exact_mut(dout.max(1))
        .enumerate()
        .take(rows)
    {
        if let Some(b) = b {
            orow.copy_from_slice(b.data());
        }
        for (i, &xv) in xd[r * din..(r + 1) * din].iter().enumerate() {
            for (o, wv) in orow.iter_mut().zip(&wd[i * dout..(i + 1) * dout]) {
                *o += xv * *wv;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`linear`]: `(dx, dW, db)`.
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (rows, din, dout) = linear_dims(x, w)?;
    if grad_out.len() != rows * dout {
        return shape_err(format!("linear upstream gradient {:?}", grad_out.shape()));
    }
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[dout]);
    let (xd, wd, gd) = (x.data(), w.data(), grad_out.data());
    for r in 0..rows {
        let grow = &gd[r * dout..(r + 1) * dout];
        for (d, g) in db.data_mut().iter_mut().zip(grow) {
            *d += *g;
        }
        for i in 0..din {
            let wrow = &wd[i * dout..(i + 1) * dout];
            let xv = xd[r * din + i];
            let mut acc = T::zero();
            let dwrow = &mut dw.data_mut()[i * dout..(i + 1) * dout];
            for o in 0..dout {
                acc += grow[o] * wrow[o];
                dwrow[o] += xv * grow[o];
            }
            dx.data_mut()[r * din + i] = acc;
        }
    }
    Ok((dx, dw, db))
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(x, g)| if *x > T::zero() { *g } else { T::zero() })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return shape_err(format!("add {:?} and {:?}", a.shape(), b.shape()));
    }
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

/// `[N, C, H, W] -> [N, C]` spatial mean.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 || s[2] * s[3] == 0 {
        return shape_err(format!(
            "global average pool expects non-empty NCHW, got {s:?}"
        ));
    }
    let plane = s[2] * s[3];
    let scale = T::lit(1.0 / plane as f64);
    let data = x
        .data()
        .chunks_exact(plane)
        .map(|c| c.iter().copied().sum::<T>() * scale)
        .collect();
    Tensor::new(vec![s[0], s[1]], data)
}

pub fn global_avg_pool_backward<T: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let plane = input_shape[2] * input_shape[3];
    let scale = T::lit(1.0 / plane as f64);
    let data = grad_out
        .data()
        .iter()
        .flat_map(|g| std::iter::repeat_n(*g * scale, plane))
        .collect();
    Tensor::new(input_shape.to_vec(), data).expect("pool shape")
}

/// Concatenates along the last axis; leading dims must agree.
pub fn concat_last<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
        return shape_err(format!("concat {sa:?} and {sb:?}"));
    }
    let (da, db) = (sa[sa.len() - 1], sb[sb.len() - 1]);
    let rows: usize = sa[..sa.len() - 1].iter().product();
    let mut data = Vec::with_capacity(a.len() + b.len());
    for r in 0..rows {
        data.extend_from_slice(&a.data()[r * da..(r + 1) * da]);
        data.extend_from_slice(&b.data()[r * db..(r + 1) * db]);
    }
    let mut shape = sa.to_vec();
    *shape.last_mut().unwrap() = da + db;
    Tensor::new(shape, data)
}

pub fn concat_last_backward<T: Scalar>(
    a_shape: &[usize],
    b_shape: &[usize],
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (da, db) = (a_shape[a_shape.len() - 1], b_shape[b_shape.len() - 1]);
    let mut ga = Vec::new();
    let mut gb = Vec::new();
    for row in grad_out.data().chunks_exact(da + db) {
        ga.extend_from_slice(&row[..da]);
        gb.extend_from_slice(&row[da..]);
    }
    (
        Tensor::new(a_shape.to_vec(), ga).expect("concat shape"),
        Tensor::new(b_shape.to_vec(), gb).expect("concat shape"),
    )
}

/// `[N, C, H, W] -> [N, H*W, C]`: one token per spatial position.
pub fn to_tokens<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 {
        return shape_err(format!("to_tokens expects NCHW, got {s:?}"));
    }
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut out = Tensor::zeros(&[n, hw, c]);
    let (xd, od) = (x.data(), out.data_mut());
    for b in 0..n {
        for ch in 0..c {
            for t in 0..hw {
                od[(b * hw + t) * c + ch] = xd[(b * c + ch) * hw + t];
            }
        }
    }
    Ok(out)
}

/// `[N, H*W, C] -> [N, C, H, W]`.
pub fn from_tokens<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 3 || s[1] != h * w {
        return shape_err(format!("from_tokens {s:?} into {h}x{w}"));
    }
    let (n, hw, c) = (s[0], s[1], s[2]);
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let (xd, od) = (x.data(), out.data_mut());
    for b in 0..n {
        for t in 0..hw {
            for ch in 0..c {
                od[(b * c + ch) * hw + t] = xd[(b * hw + t) * c + ch];
            }
        }
    }
    Ok(out)
}

/// `sum_{k=0..order} x^k / k!` and its derivative, by Horner's rule.
#[inline]
pub fn taylor_exp<T: Scalar>(x: T, order: usize) -> (T, T) {
    let mut value = T::one();
    let mut deriv = T::zero();
    // value_k = 1 + x/k * value_{k+1}, derivative follows the product rule.
    for k in (1..=order).rev() {
        let inv_k = T::lit(1.0 / k as f64);
        deriv = inv_k * (value + x * deriv);
        value = T::one() + x * inv_k * value;
    }
    (value, deriv)
}

pub fn check_taylor_order(order: usize) -> Result<()> {
    if order < 2 || !order.is_multiple_of(2) {
        return Err(Error::Param(format!(
            "Taylor softmax order must be even and >= 2 to stay positive, got {order}"
        )));
    }
    Ok(())
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return shape_err(format!("axis {axis} out of range for {shape:?}"));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Softmax with `exp` replaced by its order-`order` Taylor polynomial.
pub fn taylor_softmax<T: Scalar>(x: &Tensor<T>, axis: usize, order: usize) -> Result<Tensor<T>> {
    check_taylor_order(order)?;
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let mut out = Tensor::zeros(x.shape());
    let (xd, od) = (x.data(), out.data_mut());
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let mut total = T::zero();
            for k in 0..len {
                let t = taylor_exp(xd[idx(k)], order).0;
                od[idx(k)] = t;
                total += t;
            }
            for k in 0..len {
                od[idx(k)] = od[idx(k)] / total;
            }
        }
    }
    Ok(out)
}

/// With `y = t / S`: `dx_j = t'(x_j) / S * (g_j - sum_i g_i y_i)`.
pub fn taylor_softmax_backward<T: Scalar>(
    x: &Tensor<T>,
    grad_out: &Tensor<T>,
    axis: usize,
    order: usize,
) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let mut dx = Tensor::zeros(x.shape());
    let (xd, gd) = (x.data(), grad_out.data());
    let mut vals = vec![(T::zero(), T::zero()); len];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let mut total = T::zero();
            for (k, v) in vals.iter_mut().enumerate() {
                *v = taylor_exp(xd[idx(k)], order);
                total += v.0;
            }
            let dot: T = (0..len).map(|k| gd[idx(k)] * vals[k].0 / total).sum();
            for (k, v) in vals.iter().enumerate() {
                dx.data_mut()[idx(k)] = v.1 / total * (gd[idx(k)] - dot);
            }
        }
    }
    Ok(dx)
}

fn token_dims<T: Scalar>(scores: &Tensor<T>, keys: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (ss, ks) = (scores.shape(), keys.shape());
    if ss.len() != 3 || ks.len() != 3 || ss[2] != 1 || ss[0] != ks[0] || ss[1] != ks[1] {
        return shape_err(format!("token weighting of {ss:?} and {ks:?}"));
    }
    Ok((ks[0], ks[1], ks[2]))
}

/// `ctx[n, d] = sum_t scores[n, t] * keys[n, t, d]`.
pub fn weighted_token_sum<T: Scalar>(scores: &Tensor<T>, keys: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, t, d) = token_dims(scores, keys)?;
    let mut out = Tensor::zeros(&[n, d]);
    let (sd, kd) = (scores.data(), keys.data());
    for b in 0..n {
        let orow = &mut out.data_mut()[b * d..(b + 1) * d];
        for tok in 0..t {
            let s = sd[b * t + tok];
            for (o, k) in orow.iter_mut().zip(&kd[(b * t + tok) * d..][..d]) {
                *o += s * *k;
            }
        }
    }
    Ok(out)
}

pub fn weighted_token_sum_backward<T: Scalar>(
    scores: &Tensor<T>,
    keys: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, t, d) = token_dims(scores, keys)?;
    let mut ds = Tensor::zeros(scores.shape());
    let mut dk = Tensor::zeros(keys.shape());
    let (sd, kd, gd) = (scores.data(), keys.data(), grad_out.data());
    for b in 0..n {
        let grow = &gd[b * d..(b + 1) * d];
        for tok in 0..t {
            let krow = &kd[(b * t + tok) * d..][..d];
            ds.data_mut()[b * t + tok] = krow.iter().zip(grow).map(|(k, g)| *k * *g).sum();
            let s = sd[b * t + tok];
            for (dkv, g) in dk.data_mut()[(b * t + tok) * d..][..d].iter_mut().zip(grow) {
                *dkv = s * *g;
            }
        }
    }
    Ok((ds, dk))
}

fn gate_dims<T: Scalar>(values: &Tensor<T>, ctx: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (vs, cs) = (values.shape(), ctx.shape());
    if vs.len() != 3 || cs.len() != 2 || vs[0] != cs[0] || vs[2] != cs[1] {
        return shape_err(format!("gating {vs:?} by {cs:?}"));
    }
    Ok((vs[0], vs[1], vs[2]))
}

/// `out[n, t, d] = values[n, t, d] * ctx[n, d]`.
pub fn gate_tokens<T: Scalar>(values: &Tensor<T>, ctx: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, t, d) = gate_dims(values, ctx)?;
    let mut out = values.clone();
    for b in 0..n {
        let crow = &ctx.data()[b * d..(b + 1) * d];
        for tok in 0..t {
            for (o, c) in out.data_mut()[(b * t + tok) * d..][..d]
                .iter_mut()
                .zip(crow)
            {
                *o *= *c;
            }
        }
    }
    Ok(out)
}

pub fn gate_tokens_backward<T: Scalar>(
    values: &Tensor<T>,
    ctx: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, t, d) = gate_dims(values, ctx)?;
    let mut dv = Tensor::zeros(values.shape());
    let mut dc = Tensor::zeros(ctx.shape());
    let (vd, cd, gd) = (values.data(), ctx.data(), grad_out.data());
    for b in 0..n {
        for tok in 0..t {
            let base = (b * t + tok) * d;
            for k in 0..d {
                dv.data_mut()[base + k] = gd[base + k] * cd[b * d + k];
                dc.data_mut()[b * d + k] += gd[base + k] * vd[base + k];
            }
        }
    }
    Ok((dv, dc))
}
