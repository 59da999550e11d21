use std::cell::RefCell;
use std::collections::HashMap;

use super::kernels::{self, axis_extents, ConvDims};
use super::param::{Gradients, ParamId, ParamStore};
use super::{invalid, shape_err, Real, Result, Tensor, TensorError};

/// Computes parent gradients from the node's output gradient. The flag
/// slice says which parents actually need one; entries for the others may
/// be `None`.
type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    param: Option<ParamId>,
    needs_grad: bool,
}

/// Ordered record of differentiable operations.
///
/// A tape is owned by one thread; parallel work uses one tape per replica
/// or per sample.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    param_nodes: RefCell<HashMap<ParamId, usize>>,
    last_order: RefCell<Vec<usize>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// A value recorded on a [`Tape`].
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Var<'_, T> {}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).finish()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            param_nodes: RefCell::new(HashMap::new()),
            last_order: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(
        &self,
        value: Tensor<T>,
        parents: Vec<usize>,
        backward: Option<BackwardFn<T>>,
        param: Option<ParamId>,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = param.is_some() || parents.iter().any(|&p| nodes[p].needs_grad);
        let backward = if needs_grad { backward } else { None };
        nodes.push(Node {
            value,
            parents,
            backward,
            param,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that receives no gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Vec::new(), None, None)
    }

    /// The leaf for a parameter; repeated calls return the same node.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        if let Some(&node) = self.param_nodes.borrow().get(&id) {
            return Var { tape: self, id: node };
        }
        let var = self.push(store.value(id).clone(), Vec::new(), None, Some(id));
        self.param_nodes.borrow_mut().insert(id, var.id);
        var
    }

    /// Reverse-mode sweep from a scalar `loss`. Every parameter of `store`
    /// gets an entry; parameters the loss does not reach get zeros.
    pub fn backward(&self, loss: Var<'_, T>, store: &ParamStore<T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut out = Gradients::zeros_like(store);
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));
        let mut order = Vec::new();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            order.push(id);
            if let Some(pid) = node.param {
                if pid.0 < out.0.len() {
                    out.0[pid.0] = out.0[pid.0].zip_map(&g, |a, b| a + b)?;
                }
            }
            let Some(backward) = &node.backward else { continue };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].needs_grad).collect();
            let parent_grads = backward(&g, &needs);
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                grads[p] = Some(match grads[p].take() {
                    Some(acc) => acc.zip_map(&pg, |a, b| a + b)?,
                    None => pg,
                });
            }
        }
        *self.last_order.borrow_mut() = order;
        Ok(out)
    }

    /// Node ids visited by the most recent [`Tape::backward`], in visit order.
    pub fn last_backward_order(&self) -> Vec<usize> {
        self.last_order.borrow().clone()
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Config("concat of zero tensors".into()))?
            .value();
        let rank = first.rank();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange {
                op: "concat",
                axis,
                rank,
            });
        }
        let values: Vec<Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        for v in &values[1..] {
            let same_rank = v.rank() == rank;
            let same_other = same_rank
                && (0..rank).all(|a| a == axis || v.shape()[a] == first.shape()[a]);
            if !same_other {
                return Err(shape_err("concat", first.shape(), v.shape()));
            }
        }
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = axis_extents(first.shape(), axis);
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &len) in values.iter().zip(&lens) {
                data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let part_shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        let backward: BackwardFn<T> = Box::new(move |g, needs| {
            let mut out: Vec<Vec<T>> = lens
                .iter()
                .zip(needs)
                .map(|(&len, &n)| if n { Vec::with_capacity(outer * len * inner) } else { Vec::new() })
                .collect();
            let gd = g.data();
            for o in 0..outer {
                let mut offset = o * total * inner;
                for ((buf, &len), &n) in out.iter_mut().zip(&lens).zip(needs) {
                    if n {
                        buf.extend_from_slice(&gd[offset..offset + len * inner]);
                    }
                    offset += len * inner;
                }
            }
            out.into_iter()
                .zip(&part_shapes)
                .zip(needs)
                .map(|((buf, shape), &n)| n.then(|| Tensor::new_unchecked(shape.clone(), buf)))
                .collect()
        });
        let parents = parts.iter().map(|p| p.id).collect();
        Ok(self.push(Tensor::new_unchecked(shape, data), parents, Some(backward), None))
    }

    /// Rows of a `V×C` table selected by `ids`, giving `len(ids)×C`.
    pub fn gather_rows<'t>(&'t self, table: Var<'t, T>, ids: &[usize]) -> Result<Var<'t, T>> {
        let tv = table.value();
        let &[v, c] = tv.shape() else {
            return Err(invalid("gather_rows", tv.shape(), "expected a V×C table"));
        };
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(invalid("gather_rows", tv.shape(), format!("row {bad} out of range")));
        }
        if ids.is_empty() {
            return Err(invalid("gather_rows", tv.shape(), "no rows selected"));
        }
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(&tv.data()[i * c..(i + 1) * c]);
        }
        let ids = ids.to_vec();
        let backward: BackwardFn<T> = Box::new(move |g, _| {
            let mut dt = vec![T::zero(); v * c];
            for (r, &i) in ids.iter().enumerate() {
                for (d, &s) in dt[i * c..(i + 1) * c].iter_mut().zip(&g.data()[r * c..(r + 1) * c]) {
                    *d += s;
                }
            }
            vec![Some(Tensor::new_unchecked(vec![v, c], dt))]
        });
        let n = data.len() / c;
        Ok(self.push(Tensor::new_unchecked(vec![n, c], data), vec![table.id], Some(backward), None))
    }
}

/// Checks that `small` broadcasts against `big` as a repeated trailing block
/// (leading unit axes of `small` are ignored). Returns the block length.
fn broadcast_block(op: &'static str, big: &[usize], small: &[usize]) -> Result<usize> {
    let stripped: Vec<usize> = small.iter().copied().skip_while(|&d| d == 1).collect();
    if stripped.len() > big.len() || big[big.len() - stripped.len()..] != stripped[..] {
        return Err(shape_err(op, big, small));
    }
    Ok(stripped.iter().product())
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn unary(self, value: Tensor<T>, backward: BackwardFn<T>) -> Var<'t, T> {
        self.tape.push(value, vec![self.id], Some(backward), None)
    }

    fn binary(self, other: Var<'t, T>, value: Tensor<T>, backward: BackwardFn<T>) -> Var<'t, T> {
        self.tape.push(value, vec![self.id, other.id], Some(backward), None)
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let out = kernels::matmul(&a, &b)?;
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let backward: BackwardFn<T> = Box::new(move |g, needs| {
            let da = needs[0].then(|| {
                Tensor::new_unchecked(vec![m, k], kernels::matmul_grad_lhs(g.data(), b.data(), m, k, n))
            });
            let db = needs[1].then(|| {
                Tensor::new_unchecked(vec![k, n], kernels::matmul_grad_rhs(a.data(), g.data(), m, k, n))
            });
            vec![da, db]
        });
        Ok(self.binary(other, out, backward))
    }

    pub fn transpose(self) -> Result<Var<'t, T>> {
        let a = self.value();
        let &[m, n] = a.shape() else {
            return Err(invalid("transpose", a.shape(), "expected a matrix"));
        };
        let out = Tensor::new_unchecked(vec![n, m], kernels::transpose_raw(a.data(), m, n));
        let backward: BackwardFn<T> = Box::new(move |g, _| {
            vec![Some(Tensor::new_unchecked(vec![m, n], kernels::transpose_raw(g.data(), n, m)))]
        });
        Ok(self.unary(out, backward))
    }

    /// Elementwise sum. `other` may be smaller than `self` if its shape
    /// (ignoring leading unit axes) is a suffix of `self`'s; it is then
    /// repeated across the leading axes, e.g. a `C` vector added at every
    /// pixel of an `H×W×C` map.
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let block = broadcast_block("add", a.shape(), b.shape())?;
        let bd = b.data();
        let data: Vec<T> = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % block])
            .collect();
        let b_shape = b.shape().to_vec();
        let backward: BackwardFn<T> = Box::new(move |g, needs| {
            let db = needs[1].then(|| {
                let mut acc = vec![T::zero(); block];
                for chunk in g.data().chunks(block) {
                    for (s, &v) in acc.iter_mut().zip(chunk) {
                        *s += v;
                    }
                }
                Tensor::new_unchecked(b_shape.clone(), acc)
            });
            vec![Some(g.clone()), db]
        });
        Ok(self.binary(other, Tensor::new_unchecked(a.shape().to_vec(), data), backward))
    }

    /// Elementwise product with the same broadcasting rule as [`Var::add`].
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let block = broadcast_block("mul", a.shape(), b.shape())?;
        let data: Vec<T> = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * b.data()[i % block])
            .collect();
        let backward: BackwardFn<T> = Box::new(move |g, needs| {
            let da = needs[0].then(|| {
                Tensor::new_unchecked(
                    a.shape().to_vec(),
                    g.data()
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * b.data()[i % block])
                        .collect(),
                )
            });
            let db = needs[1].then(|| {
                let mut acc = vec![T::zero(); block];
                for (gc, ac) in g.data().chunks(block).zip(a.data().chunks(block)) {
                    for ((s, &gv), &av) in acc.iter_mut().zip(gc).zip(ac) {
                        *s += gv * av;
                    }
                }
                Tensor::new_unchecked(b.shape().to_vec(), acc)
            });
            vec![da, db]
        });
        Ok(self.binary(other, Tensor::new_unchecked(self.shape(), data), backward))
    }

    pub fn scale(self, factor: f64) -> Var<'t, T> {
        let f = T::from_f64(factor);
        let out = self.value().map(|v| v * f);
        self.unary(out, Box::new(move |g, _| vec![Some(g.map(|v| v * f))]))
    }

    /// ReLU with subgradient 0 at 0.
    pub fn relu(self) -> Var<'t, T> {
        let x = self.value();
        let out = x.map(|v| if v > T::zero() { v } else { T::zero() });
        let backward: BackwardFn<T> = Box::new(move |g, _| {
            vec![Some(
                g.zip_map(&x, |gv, xv| if xv > T::zero() { gv } else { T::zero() })
                    .expect("same shape"),
            )]
        });
        self.unary(out, backward)
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        self.softmax_masked(axis, None)
    }

    /// Softmax along `axis`; positions whose `mask` entry (indexed along the
    /// axis) is false get exactly zero weight and zero gradient.
    pub fn softmax_masked(self, axis: usize, mask: Option<&[bool]>) -> Result<Var<'t, T>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(TensorError::AxisOutOfRange {
                op: "softmax",
                axis,
                rank: x.rank(),
            });
        }
        let (outer, len, inner) = axis_extents(x.shape(), axis);
        if let Some(m) = mask {
            if m.len() != len {
                return Err(shape_err("softmax mask", x.shape(), &[m.len()]));
            }
            if !m.iter().any(|&k| k) {
                return Err(invalid("softmax", x.shape(), "mask hides every position"));
            }
        }
        let y = Tensor::new_unchecked(
            x.shape().to_vec(),
            kernels::softmax_raw(x.data(), outer, len, inner, mask),
        );
        let saved = y.clone();
        let backward: BackwardFn<T> = Box::new(move |g, _| {
            vec![Some(Tensor::new_unchecked(
                saved.shape().to_vec(),
                kernels::softmax_backward_raw(saved.data(), g.data(), outer, len, inner),
            ))]
        });
        Ok(self.unary(y, backward))
    }

    /// Same-padding stride-1 convolution, kernel `KH×KW×Cin×Cout`.
    pub fn conv2d(self, kernel: Var<'t, T>, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let (x, k, b) = (self.value(), kernel.value(), bias.value());
        let d = ConvDims::from_shapes(x.shape(), k.shape(), b.shape())?;
        let out = Tensor::new_unchecked(
            vec![d.h, d.w, d.cout],
            kernels::conv2d_raw(x.data(), k.data(), b.data(), d),
        );
        let backward: BackwardFn<T> = Box::new(move |g, needs| {
            let (dx, dk, db) = kernels::conv2d_backward_raw(x.data(), k.data(), g.data(), d);
            vec![
                needs[0].then(|| Tensor::new_unchecked(x.shape().to_vec(), dx)),
                needs[1].then(|| Tensor::new_unchecked(k.shape().to_vec(), dk)),
                needs[2].then(|| Tensor::new_unchecked(vec![d.cout], db)),
            ]
        });
        Ok(self
            .tape
            .push(out, vec![self.id, kernel.id, bias.id], Some(backward), None))
    }

    fn map_dims(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape()[..] {
            [h, w, c] => Ok((h, w, c)),
            ref s => Err(invalid(op, s, "expected an H×W×C map")),
        }
    }

    /// 2× bilinear upsampling, half-pixel centers.
    pub fn upsample2x(self) -> Result<Var<'t, T>> {
        let (h, w, c) = self.map_dims("upsample2x")?;
        let out = Tensor::new_unchecked(
            vec![2 * h, 2 * w, c],
            kernels::upsample2x_raw(self.value().data(), h, w, c),
        );
        let backward: BackwardFn<T> = Box::new(move |g, _| {
            vec![Some(Tensor::new_unchecked(
                vec![h, w, c],
                kernels::upsample2x_backward_raw(g.data(), h, w, c),
            ))]
        });
        Ok(self.unary(out, backward))
    }

    /// 2×2 average pooling with stride 2.
    pub fn avgpool2x(self) -> Result<Var<'t, T>> {
        let (h, w, c) = self.map_dims("avgpool2x")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(invalid("avgpool2x", &[h, w, c], "height and width must be even"));
        }
        let out = Tensor::new_unchecked(
            vec![h / 2, w / 2, c],
            kernels::avgpool2x_raw(self.value().data(), h, w, c),
        );
        let backward: BackwardFn<T> = Box::new(move |g, _| {
            vec![Some(Tensor::new_unchecked(
                vec![h, w, c],
                kernels::avgpool2x_backward_raw(g.data(), h, w, c),
            ))]
        });
        Ok(self.unary(out, backward))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let out = x.reshape(shape)?;
        let orig = x.shape().to_vec();
        Ok(self.unary(
            out,
            Box::new(move |g, _| vec![Some(g.reshape(&orig).expect("same numel"))]),
        ))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(TensorError::AxisOutOfRange {
                op: "narrow",
                axis,
                rank: x.rank(),
            });
        }
        let (outer, full, inner) = axis_extents(x.shape(), axis);
        if len == 0 || start + len > full {
            return Err(invalid(
                "narrow",
                x.shape(),
                format!("range {start}..{} outside axis {axis}", start + len),
            ));
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let in_shape = x.shape().to_vec();
        let backward: BackwardFn<T> = Box::new(move |g, _| {
            let mut dx = vec![T::zero(); outer * full * inner];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                dx[base..base + len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::new_unchecked(in_shape.clone(), dx))]
        });
        Ok(self.unary(Tensor::new_unchecked(shape, data), backward))
    }

    /// Mean over the rows of an `N×C` matrix, giving `1×C`.
    pub fn mean_rows(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let &[n, c] = x.shape() else {
            return Err(invalid("mean_rows", x.shape(), "expected a matrix"));
        };
        let inv = T::from_f64(1.0 / n as f64);
        let mut acc = vec![T::zero(); c];
        for row in x.data().chunks(c) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        for a in &mut acc {
            *a *= inv;
        }
        let backward: BackwardFn<T> = Box::new(move |g, _| {
            let row: Vec<T> = g.data().iter().map(|&v| v * inv).collect();
            let mut dx = Vec::with_capacity(n * c);
            for _ in 0..n {
                dx.extend_from_slice(&row);
            }
            vec![Some(Tensor::new_unchecked(vec![n, c], dx))]
        });
        Ok(self.unary(Tensor::new_unchecked(vec![1, c], acc), backward))
    }

    pub fn sum(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let total = x.sum();
        self.unary(
            Tensor::scalar(total),
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().numel();
        self.sum().scale(1.0 / n as f64)
    }

    /// Normalizes each slice along the last axis, then applies `gamma` and
    /// `beta` (both of the last-axis length).
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        let (x, gm, bt) = (self.value(), gamma.value(), beta.value());
        let c = *x.shape().last().expect("rank ≥ 1");
        if gm.shape() != [c] || bt.shape() != [c] {
            return Err(shape_err("layer_norm", x.shape(), gm.shape()));
        }
        let eps = T::from_f64(eps);
        let inv_c = T::from_f64(1.0 / c as f64);
        let rows = x.numel() / c;
        let mut xhat = Vec::with_capacity(x.numel());
        let mut inv_std = Vec::with_capacity(rows);
        for row in x.data().chunks(c) {
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            xhat.extend(row.iter().map(|&v| (v - mean) * inv));
        }
        let out: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gm.data()[i % c] + bt.data()[i % c])
            .collect();
        let shape = x.shape().to_vec();
        let backward: BackwardFn<T> = Box::new(move |g, needs| {
            let gd = g.data();
            let mut dx = vec![T::zero(); gd.len()];
            let mut dg = vec![T::zero(); c];
            let mut db = vec![T::zero(); c];
            for r in 0..rows {
                let gr = &gd[r * c..(r + 1) * c];
                let xr = &xhat[r * c..(r + 1) * c];
                let mut mean_d = T::zero();
                let mut mean_dx = T::zero();
                for j in 0..c {
                    dg[j] += gr[j] * xr[j];
                    db[j] += gr[j];
                    let d = gr[j] * gm.data()[j];
                    mean_d += d;
                    mean_dx += d * xr[j];
                }
                mean_d *= inv_c;
                mean_dx *= inv_c;
                for j in 0..c {
                    let d = gr[j] * gm.data()[j];
                    dx[r * c + j] = inv_std[r] * (d - mean_d - xr[j] * mean_dx);
                }
            }
            vec![
                needs[0].then(|| Tensor::new_unchecked(shape.clone(), dx)),
                needs[1].then(|| Tensor::new_unchecked(vec![c], dg)),
                needs[2].then(|| Tensor::new_unchecked(vec![c], db)),
            ]
        });
        Ok(self.tape.push(
            Tensor::new_unchecked(x.shape().to_vec(), out),
            vec![self.id, gamma.id, beta.id],
            Some(backward),
            None,
        ))
    }

    /// Mean binary cross-entropy between `sigmoid(self)` and a 0/1 target,
    /// in the overflow-free form `max(z,0) − z·t + ln(1 + e^{−|z|})`.
    pub fn bce_with_logits(self, target: &Tensor<T>) -> Result<Var<'t, T>> {
        let z = self.value();
        if z.shape() != target.shape() {
            return Err(shape_err("bce_with_logits", z.shape(), target.shape()));
        }
        let n = T::from_f64(z.numel() as f64);
        let mut total = T::zero();
        for (&zv, &tv) in z.data().iter().zip(target.data()) {
            total += zv.max(T::zero()) - zv * tv + (-zv.abs()).exp().ln_1p();
        }
        let target = target.clone();
        let backward: BackwardFn<T> = Box::new(move |g, _| {
            let scale = g.item() / n;
            vec![Some(
                z.zip_map(&target, |zv, tv| (sigmoid(zv) - tv) * scale)
                    .expect("same shape"),
            )]
        });
        Ok(self.unary(Tensor::scalar(total / n), backward))
    }
}

pub(crate) fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_hand_case() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.constant(t(&[2, 1], &[1., 1.]));
        assert_eq!(a.matmul(b).unwrap().value().to_f64_vec(), vec![3., 7.]);
    }

    #[test]
    fn matmul_dimension_error_names_both_shapes() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = a.matmul(b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn broadcast_rejects_non_suffix() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[4, 3]));
        let b = tape.constant(Tensor::zeros(&[4]));
        assert!(a.mul(b).is_err());
        let c = tape.constant(Tensor::zeros(&[1, 3]));
        assert_eq!(a.add(c).unwrap().shape(), vec![4, 3]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::<f64>::new();
        let store = ParamStore::new();
        let a = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(a, &store), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn backward_visits_in_reverse_order_once() {
        let mut store = ParamStore::new();
        let w = store.add("w", t(&[2], &[1., 2.])).unwrap();
        let tape = Tape::new();
        let wv = tape.param(&store, w);
        let a = wv.mul(wv).unwrap();
        let b = a.add(wv).unwrap();
        let loss = b.sum();
        tape.backward(loss, &store).unwrap();
        let order = tape.last_backward_order();
        assert_eq!(order, vec![loss.id(), b.id(), a.id(), wv.id()]);
    }

    #[test]
    fn loss_independent_of_param_gives_zero_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", t(&[3], &[1., 2., 3.])).unwrap();
        let u = store.add("u", t(&[3], &[1., 1., 1.])).unwrap();
        let tape = Tape::new();
        let loss = tape.param(&store, u).relu().sum();
        let g = tape.backward(loss, &store).unwrap();
        assert_eq!(g.get(w).to_f64_vec(), vec![0.0; 3]);
        assert_eq!(g.get(u).to_f64_vec(), vec![1.0; 3]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut store = ParamStore::new();
        let w = store.add("w", t(&[3], &[-1., 0., 2.])).unwrap();
        let tape = Tape::new();
        let loss = tape.param(&store, w).relu().sum();
        let g = tape.backward(loss, &store).unwrap();
        assert_eq!(g.get(w).to_f64_vec(), vec![0., 0., 1.]);
    }

    #[test]
    fn bce_limits() {
        let tape = Tape::<f64>::new();
        let z = tape.constant(t(&[2, 2], &[100., -100., -100., 100.]));
        let gt = t(&[2, 2], &[1., 0., 0., 1.]);
        assert!(z.bce_with_logits(&gt).unwrap().value().item() < 1e-8);
        let z0 = tape.constant(Tensor::zeros(&[2, 2]));
        let l = z0.bce_with_logits(&gt).unwrap().value().item();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }
}
