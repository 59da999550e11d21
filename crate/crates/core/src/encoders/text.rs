use crate::config::ModelConfig;
use crate::nn::{Attention, Builder, FeedForward, LayerNorm, Linear};
use crate::tensor::{ParamId, ParamStore, Real, Result, Tape, TensorError, Var};

use super::vocab::TokenSequence;

/// Per-token features `F_t` (`L×C`) and the global language feature
/// `F_tg` (`1×C'`).
pub struct TextFeatures<'t, T> {
    pub tokens: Var<'t, T>,
    pub global: Var<'t, T>,
}

#[derive(Clone, Debug)]
struct TextLayer {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    ffn: FeedForward,
}

/// Pre-norm transformer over token plus learned position embeddings.
/// Attention never reads PAD positions.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    layers: Vec<TextLayer>,
    final_norm: LayerNorm,
    global_proj: Linear,
    max_len: usize,
}

impl TextEncoder {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cfg: &ModelConfig, vocab_len: usize) -> Result<Self> {
        let c = cfg.width;
        let mut s = b.scope("text");
        let token_embedding = s.uniform("token_embedding", &[vocab_len, c], 1.0)?;
        let position_embedding = s.uniform("position_embedding", &[cfg.max_len, c], 0.1)?;
        let layers = (0..cfg.text_layers)
            .map(|i| {
                let mut l = s.scope(&format!("layer{i}"));
                Ok(TextLayer {
                    norm1: LayerNorm::new(&mut l, "norm1", c)?,
                    attn: Attention::new(&mut l, "attn", c, cfg.heads)?,
                    norm2: LayerNorm::new(&mut l, "norm2", c)?,
                    ffn: FeedForward::new(&mut l, "ffn", c, cfg.ffn_width)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            token_embedding,
            position_embedding,
            layers,
            final_norm: LayerNorm::new(&mut s, "final_norm", c)?,
            global_proj: Linear::new(&mut s, "global_proj", c, cfg.text_global_width, false, false)?,
            max_len: cfg.max_len,
        })
    }

    pub fn encode<'t, T: Real>(
        &self,
        ps: &ParamStore<T>,
        tape: &'t Tape<T>,
        tokens: &TokenSequence,
    ) -> Result<TextFeatures<'t, T>> {
        if tokens.ids.len() != self.max_len {
            return Err(TensorError::Config(format!(
                "token sequence has length {}, encoder expects {}",
                tokens.ids.len(),
                self.max_len
            )));
        }
        let mask = tokens.key_mask();
        let embedded = tape.gather_rows(tape.param(ps, self.token_embedding), &tokens.ids)?;
        let mut x = embedded.add(tape.param(ps, self.position_embedding))?;
        for layer in &self.layers {
            let h = layer.norm1.forward(ps, x)?;
            x = x.add(layer.attn.self_attention(ps, h, Some(&mask))?)?;
            let h = layer.norm2.forward(ps, x)?;
            x = x.add(layer.ffn.forward(ps, h)?)?;
        }
        let top = self.final_norm.forward(ps, x)?;
        let eos = top.narrow(0, tokens.eos_position, 1)?;
        let global = self.global_proj.forward(ps, eos)?;
        Ok(TextFeatures { tokens: top, global })
    }
}
