//! Training, checkpointing, ablations and gradient checks.

pub mod ablation;
pub mod checkpoint;
mod config;
pub mod gradcheck;
mod optim;
mod train;

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::data::{Dataset, EvalReport};
use crate::error::Result;
use crate::tensor::{Precision, Real};

pub use ablation::{run_ablation, AblationTable, Variant};
pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use optim::{poly_lr, Adam};
pub use train::{LogRecord, Prepared, Trainer};

pub const LOG_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.eavc";

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub log: PathBuf,
    pub checkpoint: PathBuf,
    pub report: Option<EvalReport>,
}

/// Trains from `config` at its configured precision, writing the metrics
/// log and final checkpoint into `out_dir`.
pub fn run_training(config: &TrainConfig, out_dir: &Path) -> Result<RunSummary> {
    match config.precision {
        Precision::Single => run_typed::<f32>(config, out_dir),
        Precision::Double => run_typed::<f64>(config, out_dir),
    }
}

fn run_typed<T: Real>(config: &TrainConfig, out_dir: &Path) -> Result<RunSummary> {
    fs::create_dir_all(out_dir)?;
    let train = Dataset::generate(&config.manifest, &config.train_split)?;
    let eval = Dataset::generate(&config.manifest, &config.eval_split)?;
    let mut trainer = Trainer::<T>::new(config.clone())?;
    trainer.dump_dir = Some(out_dir.to_path_buf());
    let log = out_dir.join(LOG_FILE);
    let report = trainer.run(&train, &eval, &mut BufWriter::new(fs::File::create(&log)?))?;
    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    trainer.checkpoint().save(&checkpoint)?;
    Ok(RunSummary {
        log,
        checkpoint,
        report,
    })
}
