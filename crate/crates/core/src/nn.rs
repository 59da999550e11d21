//! Layer building blocks shared by the encoders, neck, generator and decoder.
//!
//! Layers hold only [`ParamId`] handles; values live in a [`ParamStore`], so
//! the same layer can run at either precision.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{ParamId, ParamStore, Real, Result, Tensor, TensorError, Var};

/// Registers freshly initialized parameters under a name prefix.
pub struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Real> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// A builder whose names are prefixed with `scope.`.
    pub fn scope(&mut self, scope: &str) -> Builder<'_, T> {
        let prefix = if self.prefix.is_empty() {
            scope.to_string()
        } else {
            format!("{}.{scope}", self.prefix)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(self.rng.gen_range(-bound..=bound)))
            .collect();
        let full = self.name(name);
        self.store.add(full, Tensor::from_vec(shape, data)?)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        let full = self.name(name);
        self.store.add(full, Tensor::full(shape, T::from_f64(value)))
    }
}

/// Uniform bound for a layer with `fan_in` inputs; `relu` selects the
/// He gain.
pub fn init_bound(fan_in: usize, relu: bool) -> f64 {
    let gain = if relu { 2.0 } else { 1.0 };
    (3.0 * gain / fan_in as f64).sqrt()
}

/// `x·W (+ b)` over the last axis of any-rank input.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
}

impl Linear {
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        bias: bool,
        relu_init: bool,
    ) -> Result<Self> {
        let mut s = b.scope(name);
        let weight = s.uniform("weight", &[cin, cout], init_bound(cin, relu_init))?;
        let bias = if bias {
            Some(s.constant("bias", &[cout], 0.0)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            cin,
            cout,
        })
    }

    pub fn forward<'t, T: Real>(&self, ps: &ParamStore<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = x.shape();
        let c = *shape.last().expect("rank ≥ 1");
        if c != self.cin {
            return Err(TensorError::DimensionMismatch {
                op: "linear",
                lhs: shape,
                rhs: vec![self.cin, self.cout],
            });
        }
        let rows = x.value().numel() / c;
        let tape = x.tape();
        let flat = if shape.len() == 2 { x } else { x.reshape(&[rows, c])? };
        let mut y = flat.matmul(tape.param(ps, self.weight))?;
        if let Some(bias) = self.bias {
            y = y.add(tape.param(ps, bias))?;
        }
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out_shape = shape;
            *out_shape.last_mut().expect("rank ≥ 1") = self.cout;
            y.reshape(&out_shape)
        }
    }
}

/// Same-padding stride-1 convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub size: usize,
    pub cin: usize,
    pub cout: usize,
}

impl Conv {
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        name: &str,
        size: usize,
        cin: usize,
        cout: usize,
        relu_init: bool,
    ) -> Result<Self> {
        let mut s = b.scope(name);
        let fan_in = size * size * cin;
        let kernel = s.uniform("kernel", &[size, size, cin, cout], init_bound(fan_in, relu_init))?;
        let bias = s.constant("bias", &[cout], 0.0)?;
        Ok(Self {
            kernel,
            bias,
            size,
            cin,
            cout,
        })
    }

    pub fn forward<'t, T: Real>(&self, ps: &ParamStore<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let tape = x.tape();
        x.conv2d(tape.param(ps, self.kernel), tape.param(ps, self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, dim: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            gamma: s.constant("gamma", &[dim], 1.0)?,
            beta: s.constant("beta", &[dim], 0.0)?,
        })
    }

    pub fn forward<'t, T: Real>(&self, ps: &ParamStore<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let tape = x.tape();
        x.layer_norm(tape.param(ps, self.gamma), tape.param(ps, self.beta), Self::EPS)
    }
}

/// Multi-head scaled dot-product attention with learned query, key, value
/// and output projections. No positional terms are added here.
#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(TensorError::Config(format!(
                "attention width {dim} is not divisible by {heads} heads"
            )));
        }
        let mut s = b.scope(name);
        Ok(Self {
            query: Linear::new(&mut s, "query", dim, dim, true, false)?,
            key: Linear::new(&mut s, "key", dim, dim, true, false)?,
            value: Linear::new(&mut s, "value", dim, dim, true, false)?,
            out: Linear::new(&mut s, "out", dim, dim, true, false)?,
            heads,
            dim,
        })
    }

    /// Attends from the rows of `queries` (`Tq×C`) to the rows of `context`
    /// (`Tk×C`). Context rows with `key_mask[j] == false` get zero weight.
    pub fn forward<'t, T: Real>(
        &self,
        ps: &ParamStore<T>,
        queries: Var<'t, T>,
        context: Var<'t, T>,
        key_mask: Option<&[bool]>,
    ) -> Result<Var<'t, T>> {
        self.forward_with_weights(ps, queries, context, key_mask)
            .map(|(out, _)| out)
    }

    /// Like [`Attention::forward`], also returning each head's `Tq×Tk`
    /// attention weights.
    pub fn forward_with_weights<'t, T: Real>(
        &self,
        ps: &ParamStore<T>,
        queries: Var<'t, T>,
        context: Var<'t, T>,
        key_mask: Option<&[bool]>,
    ) -> Result<(Var<'t, T>, Vec<Tensor<T>>)> {
        let q = self.query.forward(ps, queries)?;
        let k = self.key.forward(ps, context)?;
        let v = self.value.forward(ps, context)?;
        let d = self.dim / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.narrow(1, h * d, d)?;
            let kh = k.narrow(1, h * d, d)?;
            let vh = v.narrow(1, h * d, d)?;
            let scores = qh.matmul(kh.transpose()?)?.scale(scale);
            let attn = scores.softmax_masked(1, key_mask)?;
            weights.push(attn.value());
            heads.push(attn.matmul(vh)?);
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            queries.tape().concat(&heads, 1)?
        };
        Ok((self.out.forward(ps, joined)?, weights))
    }

    pub fn self_attention<'t, T: Real>(
        &self,
        ps: &ParamStore<T>,
        x: Var<'t, T>,
        key_mask: Option<&[bool]>,
    ) -> Result<Var<'t, T>> {
        self.forward(ps, x, x, key_mask)
    }
}

/// Two-layer ReLU feed-forward block.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            up: Linear::new(&mut s, "up", dim, hidden, true, true)?,
            down: Linear::new(&mut s, "down", hidden, dim, true, false)?,
        })
    }

    pub fn forward<'t, T: Real>(&self, ps: &ParamStore<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.down.forward(ps, self.up.forward(ps, x)?.relu())
    }
}
