use std::fmt;
use std::io;
use std::str::FromStr;

use serde::Serialize;

use crate::config::Mode;
use crate::data::{Dataset, EvalReport, THRESHOLDS};
use crate::error::{Error, Result};
use crate::tensor::{Precision, Real};

use super::config::TrainConfig;
use super::train::Trainer;

/// One column of an ablation: a mode, or a query count under full mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Mode(Mode),
    Queries(usize),
}

impl Variant {
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Variant::Mode(m) => c.mode = m,
            Variant::Queries(n) => {
                c.mode = Mode::Full;
                c.model.num_queries = n;
            }
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Mode(m) => write!(f, "{m}"),
            Variant::Queries(n) => write!(f, "nq={n}"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// A mode name, or `nq=<count>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(n) = s.strip_prefix("nq=") {
            let n = n
                .parse()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::Config(format!("bad query count in {s:?}")))?;
            return Ok(Variant::Queries(n));
        }
        s.parse().map(Variant::Mode).map_err(Error::Config)
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct VariantResult {
    pub variant: String,
    pub per_seed: Vec<(u64, EvalReport)>,
}

impl VariantResult {
    fn column(&self, f: impl Fn(&EvalReport) -> f64) -> f64 {
        median(&self.per_seed.iter().map(|(_, r)| f(r)).collect::<Vec<_>>())
    }

    pub fn median_mean_iou(&self) -> f64 {
        self.column(|r| r.mean_iou)
    }

    pub fn median_overall_iou(&self) -> f64 {
        self.column(|r| r.overall_iou)
    }

    pub fn median_precision(&self) -> [f64; 5] {
        std::array::from_fn(|i| self.column(|r| r.precision_at[i]))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationTable {
    pub rows: Vec<VariantResult>,
}

impl AblationTable {
    pub fn row(&self, variant: &str) -> Option<&VariantResult> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    /// Medians over seeds, then per-seed mean IoU. IoU values in percent.
    pub fn render(&self) -> String {
        let mut s = format!("{:<14} {:>7} {:>7}", "variant", "mIoU", "oIoU");
        for t in THRESHOLDS {
            s += &format!(" {:>6}", format!("Pr@{t}"));
        }
        s += "  per-seed mIoU\n";
        for r in &self.rows {
            s += &format!(
                "{:<14} {:>7.2} {:>7.2}",
                r.variant,
                100.0 * r.median_mean_iou(),
                100.0 * r.median_overall_iou()
            );
            for p in r.median_precision() {
                s += &format!(" {:>6.1}", 100.0 * p);
            }
            let seeds: Vec<String> = r
                .per_seed
                .iter()
                .map(|(seed, rep)| format!("{seed}:{:.2}", 100.0 * rep.mean_iou))
                .collect();
            s += &format!("  {}\n", seeds.join(" "));
        }
        s
    }
}

fn train_eval<T: Real>(cfg: TrainConfig, train: &Dataset, eval: &Dataset) -> Result<EvalReport> {
    let mut t = Trainer::<T>::new(cfg)?;
    t.run(train, eval, &mut io::sink())?;
    t.evaluate(eval)
}

/// Trains and evaluates every variant under every seed. All runs see the
/// same generated splits, and a given seed fixes both initialization and
/// data order.
pub fn run_ablation(
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    progress: &mut dyn FnMut(&str, u64, &EvalReport),
) -> Result<AblationTable> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one variant and one seed".into()));
    }
    let train = Dataset::generate(&base.manifest, &base.train_split)?;
    let eval = Dataset::generate(&base.manifest, &base.eval_split)?;
    let mut rows = Vec::new();
    for v in variants {
        let mut per_seed = Vec::new();
        for &seed in seeds {
            let mut cfg = v.apply(base);
            cfg.seed = seed;
            let report = match cfg.precision {
                Precision::Single => train_eval::<f32>(cfg, &train, &eval)?,
                Precision::Double => train_eval::<f64>(cfg, &train, &eval)?,
            };
            progress(&v.to_string(), seed, &report);
            per_seed.push((seed, report));
        }
        rows.push(VariantResult {
            variant: v.to_string(),
            per_seed,
        });
    }
    Ok(AblationTable { rows })
}
