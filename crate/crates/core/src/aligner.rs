//! Transformer decoding of visual tokens against the queries, and the
//! vision-language aligner: every query is turned into its own 3×3
//! convolution kernel, each kernel yields a mask, and a self-attention
//! estimator weights the masks into the final prediction.

use crate::config::{KernelActivation, Mode, ModelConfig};
use crate::nn::{Attention, Builder, Conv, FeedForward, LayerNorm, Linear};
use crate::tensor::{kernels, ParamStore, Real, Result, Tensor, TensorError, Var};

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: Attention,
    norm1: LayerNorm,
    cross_attn: Attention,
    norm2: LayerNorm,
    ffn: FeedForward,
    norm3: LayerNorm,
}

/// Post-norm transformer decoder. Self-attention runs over the visual
/// tokens; cross-attention takes its queries from the visual tokens and its
/// keys and values from the language queries `F_q`. Neither side gets
/// positional terms, so the output does not depend on the order of `F_q`.
#[derive(Clone, Debug)]
pub struct Decoder {
    layers: Vec<DecoderLayer>,
    grid: (usize, usize),
}

/// Decoder output together with the last layer's cross-attention weights
/// (one `N×N_q` matrix per head).
pub struct Decoded<'t, T> {
    pub features: Var<'t, T>,
    pub cross_weights: Vec<Tensor<T>>,
}

impl Decoder {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.width;
        let mut s = b.scope("decoder");
        let layers = (0..cfg.decoder_layers)
            .map(|i| {
                let mut l = s.scope(&format!("layer{i}"));
                Ok(DecoderLayer {
                    self_attn: Attention::new(&mut l, "self_attn", c, cfg.heads)?,
                    norm1: LayerNorm::new(&mut l, "norm1", c)?,
                    cross_attn: Attention::new(&mut l, "cross_attn", c, cfg.heads)?,
                    norm2: LayerNorm::new(&mut l, "norm2", c)?,
                    ffn: FeedForward::new(&mut l, "ffn", c, cfg.ffn_width)?,
                    norm3: LayerNorm::new(&mut l, "norm3", c)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            grid: cfg.token_grid(),
        })
    }

    /// Decodes `F_vt` (`N×C`) against `F_q` (`N_q×C`) into `F_s`
    /// (`H3×W3×C`, same row-major order as `F_vt`).
    pub fn decode<'t, T: Real>(
        &self,
        ps: &ParamStore<T>,
        visual: Var<'t, T>,
        queries: Var<'t, T>,
    ) -> Result<Decoded<'t, T>> {
        let (vs, qs) = (visual.shape(), queries.shape());
        let (h3, w3) = self.grid;
        if vs.len() != 2 || qs.len() != 2 || vs[1] != qs[1] || vs[0] != h3 * w3 {
            return Err(TensorError::DimensionMismatch {
                op: "decode",
                lhs: vs,
                rhs: qs,
            });
        }
        let mut x = visual;
        let mut cross_weights = Vec::new();
        for layer in &self.layers {
            let sa = layer.self_attn.self_attention(ps, x, None)?;
            x = layer.norm1.forward(ps, x.add(sa)?)?;
            let (ca, w) = layer.cross_attn.forward_with_weights(ps, x, queries, None)?;
            cross_weights = w;
            x = layer.norm2.forward(ps, x.add(ca)?)?;
            let ff = layer.ffn.forward(ps, x)?;
            x = layer.norm3.forward(ps, x.add(ff)?)?;
        }
        let c = vs[1];
        Ok(Decoded {
            features: x.reshape(&[h3, w3, c])?,
            cross_weights,
        })
    }
}

/// A 3×3 single-output kernel decoded from one query's `9·Cp+1` vector.
///
/// The first `9·Cp` entries fill the weights in (kernel row, kernel
/// column, channel) order; the last entry is the bias.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicKernel<T> {
    /// `3×3×Cp`.
    pub weights: Tensor<T>,
    pub bias: T,
    pub source_query: usize,
}

impl<T: Real> DynamicKernel<T> {
    pub fn from_vector(vector: &[T], channels: usize, source_query: usize) -> Result<Self> {
        if vector.len() != 9 * channels + 1 {
            return Err(TensorError::InvalidShape {
                op: "kernel_from_query",
                shape: vec![vector.len()],
                reason: format!("expected 9·{channels}+1 = {} values", 9 * channels + 1),
            });
        }
        Ok(Self {
            weights: Tensor::from_vec(&[3, 3, channels], vector[..9 * channels].to_vec())?,
            bias: vector[9 * channels],
            source_query,
        })
    }

    pub fn channels(&self) -> usize {
        self.weights.shape()[2]
    }

    /// Total scalars held: weights plus bias.
    pub fn num_scalars(&self) -> usize {
        self.weights.numel() + 1
    }

    pub fn to_vector(&self) -> Vec<T> {
        let mut v = self.weights.to_vec();
        v.push(self.bias);
        v
    }

    /// Weights as a `3×3×Cp×1` convolution kernel.
    pub fn conv_kernel(&self) -> Tensor<T> {
        self.weights
            .reshape(&[3, 3, self.channels(), 1])
            .expect("same element count")
    }
}

/// Convolves `F_p` (`H×W×Cp`) with one dynamic kernel, padding 1, giving an
/// `H×W` logit map.
pub fn apply_dynamic_kernel<T: Real>(fp: &Tensor<T>, kernel: &DynamicKernel<T>) -> Result<Tensor<T>> {
    let shape = fp.shape();
    if shape.len() != 3 || shape[2] != kernel.channels() {
        return Err(TensorError::DimensionMismatch {
            op: "apply_dynamic_kernel",
            lhs: shape.to_vec(),
            rhs: kernel.weights.shape().to_vec(),
        });
    }
    let out = kernels::conv2d(fp, &kernel.conv_kernel(), &Tensor::scalar(kernel.bias))?;
    out.reshape(&shape[..2])
}

/// `y = Σ_n S_qn·mask_n` for masks `N_q×H×W` and scores `N_q`.
pub fn aggregate<'t, T: Real>(masks: Var<'t, T>, scores: Var<'t, T>) -> Result<Var<'t, T>> {
    let (ms, ss) = (masks.shape(), scores.shape());
    if ms.len() != 3 || ss.iter().product::<usize>() != ms[0] {
        return Err(TensorError::DimensionMismatch {
            op: "aggregate",
            lhs: ms,
            rhs: ss,
        });
    }
    let (n, h, w) = (ms[0], ms[1], ms[2]);
    scores
        .reshape(&[1, n])?
        .matmul(masks.reshape(&[n, h * w])?)?
        .reshape(&[h, w])
}

#[derive(Clone, Debug)]
struct Estimator {
    attn: Attention,
    w_s: Linear,
}

#[derive(Clone, Debug)]
enum Head {
    Dynamic {
        w_p: Linear,
        estimator: Option<Estimator>,
    },
    Fixed {
        conv: Conv,
    },
}

/// Output of the segmentation stage.
pub struct AlignerOutput<'t, T> {
    /// Prediction logits `4H3×4W3`.
    pub y: Var<'t, T>,
    /// Per-query logit masks `N_q×4H3×4W3`, or the single fixed-kernel mask.
    pub masks: Var<'t, T>,
    /// Query scores `N_q`; `None` when no estimator runs.
    pub scores: Option<Var<'t, T>>,
    /// Generated kernel vectors `N_q×(9·Cp+1)`, dynamic modes only.
    pub kernel_vectors: Option<Var<'t, T>>,
}

#[derive(Clone, Debug)]
pub struct Aligner {
    fp_conv: Conv,
    head: Head,
    activation: KernelActivation,
    channels: usize,
}

impl Aligner {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cfg: &ModelConfig, mode: Mode) -> Result<Self> {
        let c = cfg.width;
        let cp = cfg.kernel_channels();
        let mut s = b.scope("aligner");
        let fp_conv = Conv::new(&mut s, "fp_conv", 3, c, cp, false)?;
        let head = match mode {
            Mode::FixedKernel => Head::Fixed {
                conv: Conv::new(&mut s, "fixed_head", 3, cp, 1, false)?,
            },
            Mode::Full | Mode::NoFvg | Mode::NoEstimator => {
                let w_p = Linear::new(&mut s, "w_p", c, cfg.kernel_len(), false, false)?;
                let estimator = if mode == Mode::NoEstimator {
                    None
                } else {
                    let mut e = s.scope("estimator");
                    Some(Estimator {
                        attn: Attention::new(&mut e, "attn", c, cfg.heads)?,
                        w_s: Linear::new(&mut e, "w_s", c, 1, false, false)?,
                    })
                };
                Head::Dynamic { w_p, estimator }
            }
        };
        Ok(Self {
            fp_conv,
            head,
            activation: cfg.kernel_activation,
            channels: cp,
        })
    }

    /// `F_p = Up(Conv3×3(Up(F_s)))`, `4H3×4W3×Cp`.
    pub fn project_fp<'t, T: Real>(&self, ps: &ParamStore<T>, fs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.fp_conv.forward(ps, fs.upsample2x()?)?.upsample2x()
    }

    /// `F_pn = σ(W_p·F_qn)` for every query, `N_q×(9·Cp+1)`.
    pub fn kernel_vectors<'t, T: Real>(&self, ps: &ParamStore<T>, queries: Var<'t, T>) -> Result<Var<'t, T>> {
        let Head::Dynamic { w_p, .. } = &self.head else {
            return Err(TensorError::Config("fixed-kernel head has no query kernels".into()));
        };
        let raw = w_p.forward(ps, queries)?;
        Ok(match self.activation {
            KernelActivation::Relu => raw.relu(),
            KernelActivation::Identity => raw,
        })
    }

    /// Decodes kernel vectors into [`DynamicKernel`]s, in query order.
    pub fn kernels_from_vectors<T: Real>(&self, vectors: &Tensor<T>) -> Result<Vec<DynamicKernel<T>>> {
        let len = 9 * self.channels + 1;
        vectors
            .data()
            .chunks(len)
            .enumerate()
            .map(|(n, v)| DynamicKernel::from_vector(v, self.channels, n))
            .collect()
    }

    /// All query masks at once: the kernel vectors are stacked into one
    /// `3×3×Cp×N_q` kernel, which yields the same per-channel sums as
    /// convolving with each kernel separately.
    pub fn dynamic_masks<'t, T: Real>(&self, fp: Var<'t, T>, vectors: Var<'t, T>) -> Result<Var<'t, T>> {
        let cp = self.channels;
        let nq = vectors.shape()[0];
        let weights = vectors
            .narrow(1, 0, 9 * cp)?
            .transpose()?
            .reshape(&[3, 3, cp, nq])?;
        let bias = vectors.narrow(1, 9 * cp, 1)?.reshape(&[nq])?;
        let maps = fp.conv2d(weights, bias)?;
        let [h, w, _] = maps.shape()[..] else { unreachable!("maps are rank 3") };
        maps.reshape(&[h * w, nq])?.transpose()?.reshape(&[nq, h, w])
    }

    /// `S_q = Softmax(W_s·MHSA(F_q))` over the queries.
    pub fn score_queries<'t, T: Real>(&self, ps: &ParamStore<T>, queries: Var<'t, T>) -> Result<Option<Var<'t, T>>> {
        let Head::Dynamic {
            estimator: Some(est),
            ..
        } = &self.head
        else {
            return Ok(None);
        };
        let nq = queries.shape()[0];
        let attended = est.attn.self_attention(ps, queries, None)?;
        let logits = est.w_s.forward(ps, attended)?.reshape(&[1, nq])?;
        Ok(Some(logits.softmax(1)?.reshape(&[nq])?))
    }

    pub fn forward<'t, T: Real>(
        &self,
        ps: &ParamStore<T>,
        fs: Var<'t, T>,
        queries: Var<'t, T>,
    ) -> Result<AlignerOutput<'t, T>> {
        let fp = self.project_fp(ps, fs)?;
        match &self.head {
            Head::Fixed { conv } => {
                let map = conv.forward(ps, fp)?;
                let [h, w, _] = map.shape()[..] else { unreachable!("maps are rank 3") };
                let y = map.reshape(&[h, w])?;
                Ok(AlignerOutput {
                    y,
                    masks: map.reshape(&[1, h, w])?,
                    scores: None,
                    kernel_vectors: None,
                })
            }
            Head::Dynamic { .. } => {
                let vectors = self.kernel_vectors(ps, queries)?;
                let masks = self.dynamic_masks(fp, vectors)?;
                let scores = self.score_queries(ps, queries)?;
                let y = match scores {
                    Some(s) => aggregate(masks, s)?,
                    None => {
                        let nq = masks.shape()[0];
                        let ones = queries.tape().constant(Tensor::ones(&[nq]));
                        aggregate(masks, ones)?
                    }
                };
                Ok(AlignerOutput {
                    y,
                    masks,
                    scores,
                    kernel_vectors: Some(vectors),
                })
            }
        }
    }
}
