//! Fusion neck: gates the coarsest vision map with the global language
//! feature, merges the pyramid, appends coordinates and flattens to visual
//! tokens `F_vt`.

use crate::config::ModelConfig;
use crate::nn::{Builder, Conv, Linear};
use crate::tensor::{ParamStore, Real, Result, Tensor, TensorError, Var};

/// Normalized coordinates for an `h×w` grid: channel 0 is x, channel 1 is
/// y, each running linearly from −1 to 1. A side of length one sits at 0.
pub fn coord_features<T: Real>(h: usize, w: usize) -> Result<Tensor<T>> {
    if h == 0 || w == 0 {
        return Err(TensorError::Config(format!("coordinate grid {h}x{w} is empty")));
    }
    let lin = |i: usize, n: usize| {
        if n == 1 {
            0.0
        } else {
            -1.0 + 2.0 * i as f64 / (n - 1) as f64
        }
    };
    let mut data = Vec::with_capacity(h * w * 2);
    for y in 0..h {
        for x in 0..w {
            data.push(T::from_f64(lin(x, w)));
            data.push(T::from_f64(lin(y, h)));
        }
    }
    Tensor::from_vec(&[h, w, 2], data)
}

/// The pyramid merge shared by the neck and the dense-vision branch: two
/// concatenation steps, a 1×1 aggregation conv, then a 1×1 conv over the
/// result with coordinates appended.
///
/// Each projected branch is `C/2` wide so every concatenation is `C` wide;
/// the aggregation conv maps the `3C`-wide stack back to `C`.
#[derive(Clone, Debug)]
pub struct PyramidMerge {
    w_m4: Linear,
    w_v3: Linear,
    w_m3: Linear,
    w_v2: Linear,
    aggregate: Conv,
    integrate: Conv,
}

impl PyramidMerge {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, c: usize) -> Result<Self> {
        let half = c / 2;
        Ok(Self {
            w_m4: Linear::new(b, "w_m4", c, half, false, true)?,
            w_v3: Linear::new(b, "w_v3", c, half, false, true)?,
            w_m3: Linear::new(b, "w_m3", c, half, false, true)?,
            w_v2: Linear::new(b, "w_v2", c, half, false, true)?,
            aggregate: Conv::new(b, "aggregate", 1, 3 * c, c, false)?,
            integrate: Conv::new(b, "integrate", 1, c + 2, c, false)?,
        })
    }

    /// Width of the stack fed to the aggregation conv.
    pub fn aggregate_width(&self) -> usize {
        self.aggregate.cin
    }

    /// `F_m = Conv1×1([F_m2, F_m3, F_m4])`.
    pub fn merge<'t, T: Real>(
        &self,
        ps: &ParamStore<T>,
        m4: Var<'t, T>,
        v3: Var<'t, T>,
        v2: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let (s3, s2) = (v3.shape(), v2.shape());
        if s3.len() != 3 || s2.len() != 3 || s2[0] != 2 * s3[0] || s2[1] != 2 * s3[1] {
            return Err(TensorError::DimensionMismatch {
                op: "fuse_multiscale",
                lhs: s2,
                rhs: s3,
            });
        }
        if m4.shape()[..2] != s3[..2] {
            return Err(TensorError::DimensionMismatch {
                op: "fuse_multiscale",
                lhs: m4.shape(),
                rhs: s3,
            });
        }
        let tape = m4.tape();
        let m3 = tape.concat(
            &[self.w_m4.forward(ps, m4)?.relu(), self.w_v3.forward(ps, v3)?.relu()],
            2,
        )?;
        let v2_pooled = v2.avgpool2x()?;
        let m2 = tape.concat(
            &[self.w_m3.forward(ps, m3)?.relu(), self.w_v2.forward(ps, v2_pooled)?.relu()],
            2,
        )?;
        let stacked = tape.concat(&[m2, m3, m4], 2)?;
        self.aggregate.forward(ps, stacked)
    }

    /// `F_inte = Conv1×1([F_m, F_coord])`, kept as an `H3×W3×C` map.
    pub fn integrate<'t, T: Real>(&self, ps: &ParamStore<T>, fm: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = fm.shape();
        let tape = fm.tape();
        let coords = tape.constant(coord_features(shape[0], shape[1])?);
        self.integrate.forward(ps, tape.concat(&[fm, coords], 2)?)
    }
}

/// Row-major flatten of an `H×W×C` map into `HW×C` tokens: pixel `(y, x)`
/// becomes row `y·W + x`.
pub fn flatten_tokens<'t, T: Real>(map: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = map.shape();
    map.reshape(&[s[0] * s[1], s[2]])
}

#[derive(Clone, Debug)]
pub struct FusionNeck {
    w_v4: Linear,
    w_tg: Linear,
    pub merge: PyramidMerge,
}

/// Intermediate and final neck outputs.
pub struct FusedFeatures<'t, T> {
    pub fm: Var<'t, T>,
    pub coords: Tensor<T>,
    pub fvt: Var<'t, T>,
}

impl FusionNeck {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.width;
        let mut s = b.scope("neck");
        Ok(Self {
            w_v4: Linear::new(&mut s, "w_v4", c, c, false, true)?,
            w_tg: Linear::new(&mut s, "w_tg", cfg.text_global_width, c, false, true)?,
            merge: PyramidMerge::new(&mut s, c)?,
        })
    }

    /// `F_m4 = Up(ReLU(F_v4·W_v4) ⊙ ReLU(F_tg·W_tg))`, the language gate
    /// broadcast over every position.
    pub fn fuse_stage4<'t, T: Real>(
        &self,
        ps: &ParamStore<T>,
        v4: Var<'t, T>,
        text_global: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let gate = self.w_tg.forward(ps, text_global)?.relu();
        self.gated_stage4(ps, v4, gate)
    }

    /// Stage-4 fusion with an explicit `1×C` gate in place of
    /// `ReLU(F_tg·W_tg)`.
    pub fn gated_stage4<'t, T: Real>(
        &self,
        ps: &ParamStore<T>,
        v4: Var<'t, T>,
        gate: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        self.w_v4.forward(ps, v4)?.relu().mul(gate)?.upsample2x()
    }

    pub fn forward<'t, T: Real>(
        &self,
        ps: &ParamStore<T>,
        v2: Var<'t, T>,
        v3: Var<'t, T>,
        v4: Var<'t, T>,
        text_global: Var<'t, T>,
    ) -> Result<FusedFeatures<'t, T>> {
        let m4 = self.fuse_stage4(ps, v4, text_global)?;
        let fm = self.merge.merge(ps, m4, v3, v2)?;
        let shape = fm.shape();
        let inte = self.merge.integrate(ps, fm)?;
        Ok(FusedFeatures {
            fm,
            coords: coord_features(shape[0], shape[1])?,
            fvt: flatten_tokens(inte)?,
        })
    }
}
