use std::fs;
use std::path::Path;

use crate::config::{Mode, ModelConfig};
use crate::data::{GrammarConfig, LossTarget, Manifest, SplitSpec};
use crate::error::{Error, Result};
use crate::kv::{self, parse_num};
use crate::tensor::Precision;

/// Everything a training run depends on. Rendered with [`to_text`] it is
/// self-contained: the dataset manifest is inlined.
///
/// [`to_text`]: TrainConfig::to_text
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub mode: Mode,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Power of the polynomial learning-rate decay.
    pub power: f64,
    pub batch_size: usize,
    /// Kind of loss target derived from each ground-truth mask.
    pub target: LossTarget,
    pub steps: usize,
    pub seed: u64,
    /// Evaluate every this many steps; 0 evaluates only after the last.
    pub eval_every: usize,
    pub precision: Precision,
    pub manifest: Manifest,
    pub train_split: String,
    pub eval_split: String,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        let grammar = GrammarConfig::for_image(model.image_height, model.image_width);
        Self {
            model,
            mode: Mode::Full,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            power: 0.9,
            batch_size: 4,
            target: LossTarget::Coverage,
            steps: 1000,
            seed: 0,
            eval_every: 0,
            precision: Precision::Single,
            manifest: Manifest {
                grammar,
                splits: vec![
                    SplitSpec {
                        name: "train".into(),
                        seed: 1,
                        count: 64,
                    },
                    SplitSpec {
                        name: "val".into(),
                        seed: 2,
                        count: 64,
                    },
                ],
            },
            train_split: "train".into(),
            eval_split: "val".into(),
        }
    }

    /// Parses config text. `data.manifest` paths resolve against `base`.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self> {
        let pairs = kv::parse(text)?;
        let mut model = ModelConfig::desk();
        for (k, v) in &pairs {
            if let Some(key) = k.strip_prefix("model.") {
                model.set(key, v).map_err(|e| Error::Config(format!("{k}: {e}")))?;
            }
        }
        let mut cfg = Self::new(model);
        let mut inline_manifest = Vec::new();
        let mut manifest_file = None;
        for (k, v) in &pairs {
            match k.as_str() {
                key if key.starts_with("model.") => {}
                key if key.starts_with("grammar.") || key.starts_with("split.") => {
                    inline_manifest.push((k.clone(), v.clone()));
                }
                "train.mode" => cfg.mode = v.parse().map_err(Error::Config)?,
                "train.lr" => cfg.lr = parse_num(k, v)?,
                "train.beta1" => cfg.beta1 = parse_num(k, v)?,
                "train.beta2" => cfg.beta2 = parse_num(k, v)?,
                "train.eps" => cfg.eps = parse_num(k, v)?,
                "train.power" => cfg.power = parse_num(k, v)?,
                "train.batch_size" => cfg.batch_size = parse_num(k, v)?,
                "train.target" => cfg.target = v.parse()?,
                "train.steps" => cfg.steps = parse_num(k, v)?,
                "train.seed" => cfg.seed = parse_num(k, v)?,
                "train.eval_every" => cfg.eval_every = parse_num(k, v)?,
                "train.precision" => {
                    cfg.precision = match v.as_str() {
                        "f32" => Precision::Single,
                        "f64" => Precision::Double,
                        other => return Err(Error::Config(format!("{k}: expected f32 or f64, got {other:?}"))),
                    }
                }
                "data.manifest" => manifest_file = Some(v.clone()),
                "data.train_split" => cfg.train_split = v.clone(),
                "data.eval_split" => cfg.eval_split = v.clone(),
                other => return Err(Error::Config(format!("unknown config key {other:?}"))),
            }
        }
        match (manifest_file, inline_manifest.is_empty()) {
            (Some(_), false) => {
                return Err(Error::Config("give either data.manifest or inline grammar/split keys, not both".into()))
            }
            (Some(path), true) => {
                let path = match base {
                    Some(b) => b.join(path),
                    None => path.into(),
                };
                cfg.manifest = Manifest::load(path)?;
            }
            (None, false) => {
                let mut pairs = cfg.manifest.grammar.to_pairs();
                pairs.retain(|(k, _)| !inline_manifest.iter().any(|(ik, _)| ik == k));
                pairs.extend(inline_manifest);
                if !pairs.iter().any(|(k, _)| k.starts_with("split.")) {
                    pairs.extend(cfg.manifest.split_pairs());
                }
                cfg.manifest = Manifest::parse(&kv::render(&pairs))?;
            }
            (None, true) => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path)?, path.parent())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("train.lr must be positive, got {}", self.lr));
        }
        if self.steps == 0 {
            return fail("train.steps must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("train.batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail(format!("betas {} {} must lie in [0, 1)", self.beta1, self.beta2));
        }
        let g = &self.manifest.grammar;
        if (g.height, g.width) != (self.model.image_height, self.model.image_width) {
            return fail(format!(
                "grammar images are {}x{} but the model expects {}x{}",
                g.height, g.width, self.model.image_height, self.model.image_width
            ));
        }
        self.manifest.split(&self.train_split)?;
        self.manifest.split(&self.eval_split)?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut pairs = self.model.to_pairs();
        let precision = match self.precision {
            Precision::Single => "f32",
            Precision::Double => "f64",
        };
        pairs.extend(
            [
                ("mode", self.mode.to_string()),
                ("lr", self.lr.to_string()),
                ("beta1", self.beta1.to_string()),
                ("beta2", self.beta2.to_string()),
                ("eps", self.eps.to_string()),
                ("power", self.power.to_string()),
                ("batch_size", self.batch_size.to_string()),
                ("target", self.target.to_string()),
                ("steps", self.steps.to_string()),
                ("seed", self.seed.to_string()),
                ("eval_every", self.eval_every.to_string()),
                ("precision", precision.to_string()),
            ]
            .into_iter()
            .map(|(k, v)| (format!("train.{k}"), v)),
        );
        pairs.push(("data.train_split".into(), self.train_split.clone()));
        pairs.push(("data.eval_split".into(), self.eval_split.clone()));
        kv::render(&pairs) + &self.manifest.render()
    }
}
