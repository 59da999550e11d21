//! Raw numerical kernels on row-major buffers, and thin tensor-level
//! wrappers for callers that do not need gradients.
//!
//! Layout is channels-last: a map `H×W×C` stores element `(h, w, c)` at
//! `(h*W + w)*C + c`. Convolution kernels are `KH×KW×Cin×Cout`.

use super::{invalid, shape_err, Real, Result, Tensor};

/// `a[m×k] · b[k×n]`.
pub fn matmul_raw<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `g[m×n] · b[k×n]ᵀ`, the gradient of a matmul with respect to its left operand.
pub fn matmul_grad_lhs<T: Real>(g: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = dot(grow, brow);
        }
    }
    out
}

/// `a[m×k]ᵀ · g[m×n]`, the gradient of a matmul with respect to its right operand.
pub fn matmul_grad_rhs<T: Real>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn transpose_raw<T: Real>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Geometry of a stride-1, same-padding convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvDims {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvDims {
    pub fn from_shapes(x: &[usize], kernel: &[usize], bias: &[usize]) -> Result<Self> {
        if x.len() != 3 || kernel.len() != 4 {
            return Err(shape_err("conv2d", x, kernel));
        }
        let (kh, kw) = (kernel[0], kernel[1]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(invalid("conv2d", kernel, "kernel sides must be odd"));
        }
        if x[2] != kernel[2] {
            return Err(shape_err("conv2d", x, kernel));
        }
        if bias != [kernel[3]] {
            return Err(shape_err("conv2d", kernel, bias));
        }
        Ok(Self {
            h: x[0],
            w: x[1],
            cin: x[2],
            cout: kernel[3],
            kh,
            kw,
        })
    }
}

/// Same-padding convolution. For each output pixel the accumulation starts
/// at the bias and adds taps in (kernel row, kernel column, input channel)
/// order, skipping taps that fall outside the input.
pub fn conv2d_raw<T: Real>(x: &[T], kernel: &[T], bias: &[T], d: ConvDims) -> Vec<T> {
    let ConvDims {
        h,
        w,
        cin,
        cout,
        kh,
        kw,
    } = d;
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = vec![T::zero(); h * w * cout];
    for oy in 0..h {
        for ox in 0..w {
            let acc = &mut out[(oy * w + ox) * cout..(oy * w + ox + 1) * cout];
            acc.copy_from_slice(bias);
            for ky in 0..kh {
                let iy = oy + ky;
                if iy < ph || iy - ph >= h {
                    continue;
                }
                let iy = iy - ph;
                for kx in 0..kw {
                    let ix = ox + kx;
                    if ix < pw || ix - pw >= w {
                        continue;
                    }
                    let ix = ix - pw;
                    let xin = &x[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
                    let kbase = (ky * kw + kx) * cin;
                    for (ci, &xv) in xin.iter().enumerate() {
                        let krow = &kernel[(kbase + ci) * cout..(kbase + ci + 1) * cout];
                        for (a, &kv) in acc.iter_mut().zip(krow) {
                            *a += xv * kv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d_raw`] with respect to input, kernel and bias.
pub fn conv2d_backward_raw<T: Real>(
    x: &[T],
    kernel: &[T],
    g: &[T],
    d: ConvDims,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let ConvDims {
        h,
        w,
        cin,
        cout,
        kh,
        kw,
    } = d;
    let (ph, pw) = (kh / 2, kw / 2);
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); kernel.len()];
    let mut db = vec![T::zero(); cout];
    for oy in 0..h {
        for ox in 0..w {
            let gout = &g[(oy * w + ox) * cout..(oy * w + ox + 1) * cout];
            for (b, &gv) in db.iter_mut().zip(gout) {
                *b += gv;
            }
            for ky in 0..kh {
                let iy = oy + ky;
                if iy < ph || iy - ph >= h {
                    continue;
                }
                let iy = iy - ph;
                for kx in 0..kw {
                    let ix = ox + kx;
                    if ix < pw || ix - pw >= w {
                        continue;
                    }
                    let ix = ix - pw;
                    let xoff = (iy * w + ix) * cin;
                    let kbase = (ky * kw + kx) * cin;
                    for ci in 0..cin {
                        let koff = (kbase + ci) * cout;
                        let krow = &kernel[koff..koff + cout];
                        dx[xoff + ci] += dot(krow, gout);
                        let xv = x[xoff + ci];
                        if xv != T::zero() {
                            for (dkv, &gv) in dk[koff..koff + cout].iter_mut().zip(gout) {
                                *dkv += xv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dk, db)
}

/// Source taps for one axis of 2× bilinear upsampling with half-pixel
/// centers (corners not aligned): `(lo, hi, w_lo, w_hi)` per output index.
pub fn bilinear_taps(in_len: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * in_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            (lo, hi, 1.0 - frac, frac)
        })
        .collect()
}

pub fn upsample2x_raw<T: Real>(x: &[T], h: usize, w: usize, c: usize) -> Vec<T> {
    let ty = bilinear_taps(h);
    let tx = bilinear_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); oh * ow * c];
    for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
            let taps = [
                (y0, x0, wy0 * wx0),
                (y0, x1, wy0 * wx1),
                (y1, x0, wy1 * wx0),
                (y1, x1, wy1 * wx1),
            ];
            let dst = &mut out[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            for (iy, ix, wt) in taps {
                if wt == 0.0 {
                    continue;
                }
                let wt = T::from_f64(wt);
                let src = &x[(iy * w + ix) * c..(iy * w + ix + 1) * c];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += wt * s;
                }
            }
        }
    }
    out
}

pub fn upsample2x_backward_raw<T: Real>(g: &[T], h: usize, w: usize, c: usize) -> Vec<T> {
    let ty = bilinear_taps(h);
    let tx = bilinear_taps(w);
    let ow = 2 * w;
    let mut dx = vec![T::zero(); h * w * c];
    for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
            let taps = [
                (y0, x0, wy0 * wx0),
                (y0, x1, wy0 * wx1),
                (y1, x0, wy1 * wx0),
                (y1, x1, wy1 * wx1),
            ];
            let src = &g[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            for (iy, ix, wt) in taps {
                if wt == 0.0 {
                    continue;
                }
                let wt = T::from_f64(wt);
                let dst = &mut dx[(iy * w + ix) * c..(iy * w + ix + 1) * c];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += wt * s;
                }
            }
        }
    }
    dx
}

pub fn avgpool2x_raw<T: Real>(x: &[T], h: usize, w: usize, c: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut out = vec![T::zero(); oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = &mut out[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let p = ((2 * oy + dy) * w + 2 * ox + dx) * c;
                for (d, &s) in dst.iter_mut().zip(&x[p..p + c]) {
                    *d += s;
                }
            }
            for d in dst.iter_mut() {
                *d *= quarter;
            }
        }
    }
    out
}

pub fn avgpool2x_backward_raw<T: Real>(g: &[T], h: usize, w: usize, c: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut dx = vec![T::zero(); h * w * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let src = &g[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            for (dy, ddx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let p = ((2 * oy + dy) * w + 2 * ox + ddx) * c;
                for (d, &s) in dx[p..p + c].iter_mut().zip(src) {
                    *d += s * quarter;
                }
            }
        }
    }
    dx
}

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
pub fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Max-shifted softmax along an axis. Positions with `mask[j] == false`
/// (indexed along the axis) get exactly zero probability.
pub fn softmax_raw<T: Real>(
    x: &[T],
    outer: usize,
    len: usize,
    inner: usize,
    mask: Option<&[bool]>,
) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    let keep = |j: usize| mask.map_or(true, |m| m[j]);
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                if keep(j) && x[at(j)] > max {
                    max = x[at(j)];
                }
            }
            if max == T::neg_infinity() {
                continue;
            }
            let mut total = T::zero();
            for j in 0..len {
                if keep(j) {
                    let e = (x[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
            }
            for j in 0..len {
                if keep(j) {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
    }
    out
}

/// Gradient of softmax given its output `y` and upstream gradient `g`.
pub fn softmax_backward_raw<T: Real>(
    y: &[T],
    g: &[T],
    outer: usize,
    len: usize,
    inner: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut s = T::zero();
            for j in 0..len {
                s += g[at(j)] * y[at(j)];
            }
            for j in 0..len {
                dx[at(j)] = y[at(j)] * (g[at(j)] - s);
            }
        }
    }
    dx
}

fn map3(op: &'static str, x: &Tensor<impl Real>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(invalid(op, x.shape(), "expected an H×W×C map")),
    }
}

/// Matrix product of two rank-2 tensors.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    match (a.shape(), b.shape()) {
        (&[m, k], &[k2, n]) if k == k2 => Ok(Tensor::new_unchecked(
            vec![m, n],
            matmul_raw(a.data(), b.data(), m, k, n),
        )),
        _ => Err(shape_err("matmul", a.shape(), b.shape())),
    }
}

/// Stride-1 same-padding convolution of an `H×W×Cin` map.
pub fn conv2d<T: Real>(x: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let d = ConvDims::from_shapes(x.shape(), kernel.shape(), bias.shape())?;
    Ok(Tensor::new_unchecked(
        vec![d.h, d.w, d.cout],
        conv2d_raw(x.data(), kernel.data(), bias.data(), d),
    ))
}

pub fn upsample2x<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = map3("upsample2x", x)?;
    Ok(Tensor::new_unchecked(
        vec![2 * h, 2 * w, c],
        upsample2x_raw(x.data(), h, w, c),
    ))
}

pub fn avgpool2x<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = map3("avgpool2x", x)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(invalid("avgpool2x", x.shape(), "height and width must be even"));
    }
    Ok(Tensor::new_unchecked(
        vec![h / 2, w / 2, c],
        avgpool2x_raw(x.data(), h, w, c),
    ))
}

pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(super::TensorError::AxisOutOfRange {
            op: "softmax",
            axis,
            rank: x.rank(),
        });
    }
    let (outer, len, inner) = axis_extents(x.shape(), axis);
    Ok(Tensor::new_unchecked(
        x.shape().to_vec(),
        softmax_raw(x.data(), outer, len, inner, None),
    ))
}
