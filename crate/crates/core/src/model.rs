//! The full network: encoders → fusion neck → query generator → decoder →
//! aligner.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aligner::{Aligner, Decoder, DynamicKernel};
use crate::config::{Mode, ModelConfig};
use crate::encoders::{tokenize, ImageEncoder, TextEncoder, TokenSequence, Vocabulary};
use crate::error::Result;
use crate::fusion::FusionNeck;
use crate::nn::Builder;
use crate::query::QueryGenerator;
use crate::tensor::{ParamStore, Real, Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug)]
pub struct Eavl {
    pub config: ModelConfig,
    pub mode: Mode,
    pub vocab: Vocabulary,
    pub text: TextEncoder,
    pub image: ImageEncoder,
    pub neck: FusionNeck,
    pub query: QueryGenerator,
    pub decoder: Decoder,
    pub aligner: Aligner,
}

/// Everything a forward pass exposes for losses, tests and dumps.
pub struct ForwardOutput<'t, T> {
    pub y: Var<'t, T>,
    pub masks: Var<'t, T>,
    pub scores: Option<Var<'t, T>>,
    pub kernel_vectors: Option<Var<'t, T>>,
    pub attention: Var<'t, T>,
    pub queries: Var<'t, T>,
    pub fvt: Var<'t, T>,
    pub fs: Var<'t, T>,
}

/// Detached per-query masks, scores and the aggregated prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskBundle<T> {
    /// `N_q×h×w` logits (a single mask in fixed-kernel mode).
    pub masks: Tensor<T>,
    /// Query scores; all ones when no estimator runs.
    pub scores: Tensor<T>,
    /// `h×w` prediction logits.
    pub y: Tensor<T>,
    /// Word attention `N_q×L`.
    pub attention: Tensor<T>,
    pub kernels: Vec<DynamicKernel<T>>,
}

impl Eavl {
    /// Builds the layout and registers freshly initialized parameters.
    pub fn new<T: Real>(config: ModelConfig, mode: Mode, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let vocab = Vocabulary::synthetic();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(store, &mut rng);
        Ok(Self {
            text: TextEncoder::new(&mut b, &config, vocab.len())?,
            image: ImageEncoder::new(&mut b, &config)?,
            neck: FusionNeck::new(&mut b, &config)?,
            query: QueryGenerator::new(&mut b, &config)?,
            decoder: Decoder::new(&mut b, &config)?,
            aligner: Aligner::new(&mut b, &config, mode)?,
            config,
            mode,
            vocab,
        })
    }

    pub fn tokenize(&self, expression: &str) -> Result<TokenSequence> {
        Ok(tokenize(expression, &self.vocab, self.config.max_len)?)
    }

    pub fn forward<'t, T: Real>(
        &self,
        ps: &ParamStore<T>,
        tape: &'t Tape<T>,
        image: Var<'t, T>,
        tokens: &TokenSequence,
    ) -> Result<ForwardOutput<'t, T>> {
        self.forward_permuted(ps, tape, image, tokens, None)
    }

    /// Forward pass that reorders the generated queries by `permutation`
    /// before they reach the decoder and aligner.
    pub fn forward_permuted<'t, T: Real>(
        &self,
        ps: &ParamStore<T>,
        tape: &'t Tape<T>,
        image: Var<'t, T>,
        tokens: &TokenSequence,
        permutation: Option<&[usize]>,
    ) -> Result<ForwardOutput<'t, T>> {
        let text = self.text.encode(ps, tape, tokens)?;
        let vision = self.image.encode(ps, image)?;
        let fused = self.neck.forward(ps, vision.v2, vision.v3, vision.v4, text.global)?;
        let vision_global = (self.mode != Mode::NoFvg).then_some(vision.global);
        let qs = self.query.forward(
            ps,
            vision.v2,
            vision.v3,
            vision.v4,
            vision_global,
            text.tokens,
            &tokens.key_mask(),
        )?;
        let queries = match permutation {
            Some(p) => {
                let nq = self.config.num_queries;
                let mut seen = vec![false; nq];
                if p.len() != nq || p.iter().any(|&i| i >= nq || std::mem::replace(&mut seen[i], true)) {
                    return Err(TensorError::Config(format!("{p:?} is not a permutation of {nq} queries")).into());
                }
                tape.gather_rows(qs.queries, p)?
            }
            None => qs.queries,
        };
        let fs = self.decoder.decode(ps, fused.fvt, queries)?.features;
        let out = self.aligner.forward(ps, fs, queries)?;
        Ok(ForwardOutput {
            y: out.y,
            masks: out.masks,
            scores: out.scores,
            kernel_vectors: out.kernel_vectors,
            attention: qs.attention,
            queries,
            fvt: fused.fvt,
            fs,
        })
    }

    /// Runs a detached forward pass.
    pub fn predict<T: Real>(&self, ps: &ParamStore<T>, image: &Tensor<T>, tokens: &TokenSequence) -> Result<MaskBundle<T>> {
        let tape = Tape::new();
        let out = self.forward(ps, &tape, tape.constant(image.clone()), tokens)?;
        let masks = out.masks.value();
        let nq = masks.shape()[0];
        let kernels = match out.kernel_vectors {
            Some(v) => self.aligner.kernels_from_vectors(&v.value())?,
            None => Vec::new(),
        };
        Ok(MaskBundle {
            scores: out
                .scores
                .map(|s| s.value())
                .unwrap_or_else(|| Tensor::ones(&[nq])),
            masks,
            y: out.y.value(),
            attention: out.attention.value(),
            kernels,
        })
    }
}
