use crate::config::ModelConfig;
use crate::nn::{Attention, Builder, Conv, Linear};
use crate::tensor::{ParamId, ParamStore, Real, Result, TensorError, Var};

/// Multi-scale vision features. Maps are `H/4`, `H/8` and `H/16` per side,
/// all projected to the fusion width; `global` is `1×C`.
pub struct ImageFeatures<'t, T> {
    pub v2: Var<'t, T>,
    pub v3: Var<'t, T>,
    pub v4: Var<'t, T>,
    pub global: Var<'t, T>,
}

/// Four `[3×3 conv, ReLU, 2×2 average pool]` stages followed by attention
/// pooling over `[mean(x4), x4]`.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    stages: Vec<Conv>,
    pool_position: ParamId,
    pool_attn: Attention,
    proj_v2: Linear,
    proj_v3: Linear,
    proj_v4: Linear,
    proj_global: Linear,
    height: usize,
    width: usize,
}

impl ImageEncoder {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let mut s = b.scope("image");
        let mut cin = 3;
        let mut stages = Vec::with_capacity(4);
        for (i, &cout) in cfg.backbone.iter().enumerate() {
            stages.push(Conv::new(&mut s, &format!("stage{}", i + 1), 3, cin, cout, true)?);
            cin = cout;
        }
        let [_, c2, c3, c4] = cfg.backbone;
        let (h4, w4) = cfg.pyramid()[2];
        let c = cfg.width;
        Ok(Self {
            stages,
            pool_position: s.uniform("pool_position", &[1 + h4 * w4, c4], 0.1)?,
            pool_attn: Attention::new(&mut s, "pool_attn", c4, cfg.heads)?,
            proj_v2: Linear::new(&mut s, "proj_v2", c2, c, false, false)?,
            proj_v3: Linear::new(&mut s, "proj_v3", c3, c, false, false)?,
            proj_v4: Linear::new(&mut s, "proj_v4", c4, c, false, false)?,
            proj_global: Linear::new(&mut s, "proj_global", c4, c, false, false)?,
            height: cfg.image_height,
            width: cfg.image_width,
        })
    }

    pub fn encode<'t, T: Real>(&self, ps: &ParamStore<T>, image: Var<'t, T>) -> Result<ImageFeatures<'t, T>> {
        let shape = image.shape();
        if shape != [self.height, self.width, 3] {
            return Err(TensorError::Config(format!(
                "image shape {shape:?} does not match configured {}x{}x3",
                self.height, self.width
            )));
        }
        let mut x = image;
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            x = stage.forward(ps, x)?.relu().avgpool2x()?;
            outs.push(x);
        }
        let x4 = outs[3];
        let [h4, w4, c4] = x4.shape()[..] else { unreachable!("maps are rank 3") };
        let spatial = x4.reshape(&[h4 * w4, c4])?;
        let pooled = spatial.mean_rows()?;
        let tape = image.tape();
        let seq = tape
            .concat(&[pooled, spatial], 0)?
            .add(tape.param(ps, self.pool_position))?;
        let attended = self.pool_attn.self_attention(ps, seq, None)?;
        let z_global = attended.narrow(0, 0, 1)?;
        let z = attended.narrow(0, 1, h4 * w4)?.reshape(&[h4, w4, c4])?;
        Ok(ImageFeatures {
            v2: self.proj_v2.forward(ps, outs[1])?,
            v3: self.proj_v3.forward(ps, outs[2])?,
            v4: self.proj_v4.forward(ps, z)?,
            global: self.proj_global.forward(ps, z_global)?,
        })
    }
}
