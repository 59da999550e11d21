//! Multi-query generation: a dense vision saliency per query attends over
//! globally gated word features, and each attention row pools those words
//! into one query vector.

use crate::config::ModelConfig;
use crate::fusion::PyramidMerge;
use crate::nn::{Builder, Conv, Linear};
use crate::tensor::{ParamStore, Real, Result, TensorError, Var};

/// Queries `F_q` (`N_q×C`) with the tensors that produced them.
pub struct QuerySet<'t, T> {
    pub queries: Var<'t, T>,
    /// Word attention `A`, `N_q×L`; rows sum to one, PAD columns are zero.
    pub attention: Var<'t, T>,
    /// Dense vision features `F_vd`, `N_q×(H3·W3)`.
    pub dense: Var<'t, T>,
    /// Fused language features `F_tv`, `L×C`.
    pub fused_text: Var<'t, T>,
}

/// Ungated copy of the neck pipeline, reduced to one map per query by
/// three 3×3 convs (`C → C/2 → C/4 → N_q`).
#[derive(Clone, Debug)]
pub struct DenseVision {
    w_v4: Linear,
    merge: PyramidMerge,
    reduce: [Conv; 3],
}

impl DenseVision {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.width;
        let (c2, c4) = ((c / 2).max(1), (c / 4).max(1));
        Ok(Self {
            w_v4: Linear::new(b, "w_v4", c, c, false, true)?,
            merge: PyramidMerge::new(b, c)?,
            reduce: [
                Conv::new(b, "reduce1", 3, c, c2, true)?,
                Conv::new(b, "reduce2", 3, c2, c4, true)?,
                Conv::new(b, "reduce3", 3, c4, cfg.num_queries, false)?,
            ],
        })
    }

    /// `F_vd = Flatten(Conv(F_inte'))ᵀ`, one row per query.
    pub fn forward<'t, T: Real>(
        &self,
        ps: &ParamStore<T>,
        v2: Var<'t, T>,
        v3: Var<'t, T>,
        v4: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let m4 = self.w_v4.forward(ps, v4)?.relu().upsample2x()?;
        let fm = self.merge.merge(ps, m4, v3, v2)?;
        let inte = self.merge.integrate(ps, fm)?;
        let h = self.reduce[0].forward(ps, inte)?.relu();
        let h = self.reduce[1].forward(ps, h)?.relu();
        let maps = self.reduce[2].forward(ps, h)?;
        let [h3, w3, nq] = maps.shape()[..] else { unreachable!("maps are rank 3") };
        maps.reshape(&[h3 * w3, nq])?.transpose()
    }
}

#[derive(Clone, Debug)]
pub struct QueryGenerator {
    pub dense: DenseVision,
    w_t: Linear,
    w_vg: Linear,
    w_vd: Linear,
    w_a: Linear,
    w_tv: Linear,
}

impl QueryGenerator {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.width;
        let (h3, w3) = cfg.token_grid();
        let mut s = b.scope("query");
        let mut d = s.scope("dense");
        let dense = DenseVision::new(&mut d, cfg)?;
        Ok(Self {
            dense,
            w_t: Linear::new(&mut s, "w_t", c, c, false, true)?,
            w_vg: Linear::new(&mut s, "w_vg", c, c, false, true)?,
            w_vd: Linear::new(&mut s, "w_vd", h3 * w3, c, false, true)?,
            w_a: Linear::new(&mut s, "w_a", c, c, false, true)?,
            w_tv: Linear::new(&mut s, "w_tv", c, c, false, true)?,
        })
    }

    /// `F_tv = ReLU(F_t·W_t) ⊙ ReLU(F_vg·W_vg)` with the vision gate repeated
    /// on every token row. Without `vision_global` the gate is dropped.
    pub fn fuse_language_global<'t, T: Real>(
        &self,
        ps: &ParamStore<T>,
        text: Var<'t, T>,
        vision_global: Option<Var<'t, T>>,
    ) -> Result<Var<'t, T>> {
        let projected = self.w_t.forward(ps, text)?.relu();
        match vision_global {
            Some(g) => projected.mul(self.w_vg.forward(ps, g)?.relu()),
            None => Ok(projected),
        }
    }

    /// `a_ni = ReLU(f_vdn·W_vd)·ReLU(f_tvi·W_a)ᵀ`, softmax over words with
    /// PAD columns (`word_mask == false`) excluded.
    pub fn attention_map<'t, T: Real>(
        &self,
        ps: &ParamStore<T>,
        dense: Var<'t, T>,
        fused_text: Var<'t, T>,
        word_mask: &[bool],
    ) -> Result<Var<'t, T>> {
        if word_mask.len() != fused_text.shape()[0] {
            return Err(TensorError::DimensionMismatch {
                op: "attention_map",
                lhs: fused_text.shape(),
                rhs: vec![word_mask.len()],
            });
        }
        let vis = self.w_vd.forward(ps, dense)?.relu();
        let words = self.w_a.forward(ps, fused_text)?.relu();
        vis.matmul(words.transpose()?)?.softmax_masked(1, Some(word_mask))
    }

    /// `F_qn = A_n·ReLU(F_tv·W_tv)`, stacked to `N_q×C`.
    pub fn make_queries<'t, T: Real>(
        &self,
        ps: &ParamStore<T>,
        attention: Var<'t, T>,
        fused_text: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        attention.matmul(self.w_tv.forward(ps, fused_text)?.relu())
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<'t, T: Real>(
        &self,
        ps: &ParamStore<T>,
        v2: Var<'t, T>,
        v3: Var<'t, T>,
        v4: Var<'t, T>,
        vision_global: Option<Var<'t, T>>,
        text: Var<'t, T>,
        word_mask: &[bool],
    ) -> Result<QuerySet<'t, T>> {
        let dense = self.dense.forward(ps, v2, v3, v4)?;
        let fused_text = self.fuse_language_global(ps, text, vision_global)?;
        let attention = self.attention_map(ps, dense, fused_text, word_mask)?;
        let queries = self.make_queries(ps, attention, fused_text)?;
        Ok(QuerySet {
            queries,
            attention,
            dense,
            fused_text,
        })
    }
}
