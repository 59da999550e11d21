use std::fmt;
use std::str::FromStr;

use crate::tensor::TensorError;

/// Activation applied to the generated dynamic-kernel vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelActivation {
    Relu,
    /// Leaves generated weights signed. Not used by the acceptance runs.
    Identity,
}

impl fmt::Display for KernelActivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelActivation::Relu => "relu",
            KernelActivation::Identity => "identity",
        })
    }
}

impl FromStr for KernelActivation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "relu" => Ok(Self::Relu),
            "identity" => Ok(Self::Identity),
            other => Err(format!("unknown kernel activation {other:?}")),
        }
    }
}

/// Segmentation-head variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Dynamic kernels per query, weighted by the query estimator.
    Full,
    /// One learned 3×3 convolution on the projected decoder output.
    FixedKernel,
    /// Dynamic kernels, masks summed without scores.
    NoEstimator,
    /// Language features are not gated by the global vision feature.
    NoFvg,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Full, Mode::FixedKernel, Mode::NoEstimator, Mode::NoFvg];
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Full => "full",
            Mode::FixedKernel => "fixed_kernel",
            Mode::NoEstimator => "no_estimator",
            Mode::NoFvg => "no_fvg",
        })
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "full" => Ok(Mode::Full),
            "fixed_kernel" => Ok(Mode::FixedKernel),
            "no_estimator" => Ok(Mode::NoEstimator),
            "no_fvg" => Ok(Mode::NoFvg),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

/// Model hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Fusion width `C`; the dynamic-kernel channel count is `C/2`.
    pub width: usize,
    /// Width of the global language feature.
    pub text_global_width: usize,
    pub num_queries: usize,
    pub max_len: usize,
    pub heads: usize,
    pub text_layers: usize,
    pub decoder_layers: usize,
    pub ffn_width: usize,
    /// Output channels of the four backbone stages.
    pub backbone: [usize; 4],
    pub image_height: usize,
    pub image_width: usize,
    pub kernel_activation: KernelActivation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Desk-scale defaults: trains in minutes on one core.
    pub fn desk() -> Self {
        Self {
            width: 64,
            text_global_width: 64,
            num_queries: 8,
            max_len: 17,
            heads: 4,
            text_layers: 2,
            decoder_layers: 2,
            ffn_width: 128,
            backbone: [16, 32, 64, 64],
            image_height: 64,
            image_width: 64,
            kernel_activation: KernelActivation::Relu,
        }
    }

    /// The smallest configuration used for end-to-end gradient checks.
    pub fn tiny() -> Self {
        Self {
            width: 8,
            text_global_width: 8,
            num_queries: 2,
            max_len: 8,
            heads: 2,
            text_layers: 1,
            decoder_layers: 1,
            ffn_width: 16,
            backbone: [4, 4, 8, 8],
            image_height: 16,
            image_width: 16,
            kernel_activation: KernelActivation::Relu,
        }
    }

    /// Widths and head counts from the large published setting.
    pub fn large() -> Self {
        Self {
            width: 512,
            text_global_width: 512,
            num_queries: 24,
            max_len: 17,
            heads: 8,
            text_layers: 12,
            decoder_layers: 3,
            ffn_width: 2048,
            backbone: [256, 512, 1024, 2048],
            image_height: 480,
            image_width: 480,
            kernel_activation: KernelActivation::Relu,
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let fail = |m: String| Err(TensorError::Config(m));
        if self.width == 0 || self.width % 2 != 0 {
            return fail(format!("width {} must be positive and even", self.width));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return fail(format!("width {} not divisible by {} heads", self.width, self.heads));
        }
        if self.backbone[3] % self.heads != 0 {
            return fail(format!(
                "last backbone stage width {} not divisible by {} heads",
                self.backbone[3], self.heads
            ));
        }
        if self.image_height % 16 != 0 || self.image_width % 16 != 0 || self.image_height == 0 || self.image_width == 0 {
            return fail(format!(
                "image size {}x{} must be a positive multiple of 16",
                self.image_height, self.image_width
            ));
        }
        if self.num_queries == 0 {
            return fail("at least one query is required".into());
        }
        if self.max_len < 2 {
            return fail(format!("max_len {} leaves no room for SOS and EOS", self.max_len));
        }
        if self.text_global_width == 0 || self.ffn_width == 0 || self.backbone.contains(&0) {
            return fail("layer widths must be positive".into());
        }
        Ok(())
    }

    /// Dynamic-kernel channel count `C/2`.
    pub fn kernel_channels(&self) -> usize {
        self.width / 2
    }

    /// Scalars per generated kernel: `9·Cp` weights plus one bias.
    pub fn kernel_len(&self) -> usize {
        9 * self.kernel_channels() + 1
    }

    /// Side lengths of the `F_v2`, `F_v3`, `F_v4` maps (strides 4, 8, 16).
    pub fn pyramid(&self) -> [(usize, usize); 3] {
        let (h, w) = (self.image_height, self.image_width);
        [(h / 4, w / 4), (h / 8, w / 8), (h / 16, w / 16)]
    }

    /// Visual token grid `H3×W3`.
    pub fn token_grid(&self) -> (usize, usize) {
        self.pyramid()[1]
    }

    /// Prediction resolution `4H3×4W3`.
    pub fn mask_size(&self) -> (usize, usize) {
        let (h3, w3) = self.token_grid();
        (4 * h3, 4 * w3)
    }

    /// `key = value` pairs under the `model.` section.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let b = self.backbone;
        [
            ("width", self.width.to_string()),
            ("text_global_width", self.text_global_width.to_string()),
            ("num_queries", self.num_queries.to_string()),
            ("max_len", self.max_len.to_string()),
            ("heads", self.heads.to_string()),
            ("text_layers", self.text_layers.to_string()),
            ("decoder_layers", self.decoder_layers.to_string()),
            ("ffn_width", self.ffn_width.to_string()),
            ("backbone", format!("{},{},{},{}", b[0], b[1], b[2], b[3])),
            ("image_height", self.image_height.to_string()),
            ("image_width", self.image_width.to_string()),
            ("kernel_activation", self.kernel_activation.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (format!("model.{k}"), v))
        .collect()
    }

    /// Applies one `model.*` key (without the section prefix).
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num(v: &str) -> Result<usize, String> {
            v.trim().parse().map_err(|_| format!("expected an integer, got {v:?}"))
        }
        match key {
            "width" => self.width = num(value)?,
            "text_global_width" => self.text_global_width = num(value)?,
            "num_queries" => self.num_queries = num(value)?,
            "max_len" => self.max_len = num(value)?,
            "heads" => self.heads = num(value)?,
            "text_layers" => self.text_layers = num(value)?,
            "decoder_layers" => self.decoder_layers = num(value)?,
            "ffn_width" => self.ffn_width = num(value)?,
            "backbone" => {
                let parts = value.split(',').map(num).collect::<Result<Vec<_>, _>>()?;
                self.backbone = parts
                    .try_into()
                    .map_err(|_| format!("backbone needs four widths, got {value:?}"))?;
            }
            "image_height" => self.image_height = num(value)?,
            "image_width" => self.image_width = num(value)?,
            "kernel_activation" => self.kernel_activation = value.trim().parse()?,
            other => return Err(format!("unknown model key {other:?}")),
        }
        Ok(())
    }
}
