//! `eavl`: generate data, train, evaluate, check gradients, run ablations
//! and dump model internals.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 numerical failure,
//! 3 a checked threshold was not met.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use eavl::data::{binarize_prediction, image_tensor, Dataset, EvalReport, Manifest, Mask, Sample};
use eavl::harness::checkpoint::peek_precision;
use eavl::harness::gradcheck::{default_options, gradcheck_suite};
use eavl::harness::{run_ablation, run_training, Checkpoint, TrainConfig, Trainer, Variant};
use eavl::tensor::{io as eavt, Precision, Real, Tensor};
use image::ImageFormat;

const EXIT_USAGE: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_THRESHOLD: u8 = 3;

#[derive(Parser)]
#[command(name = "eavl", version, about = "Referring image segmentation with explicit vision-language alignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate every split of a manifest onto disk.
    GenData {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a config, writing metrics.jsonl and checkpoint.eavc.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        source: SampleSource,
        /// Exit with status 3 when mean IoU falls below this.
        #[arg(long)]
        min_mean_iou: Option<f64>,
    },
    /// Finite-difference check of every block and the tiny end-to-end model.
    Gradcheck,
    /// Train and evaluate several variants over several seeds.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated modes or `nq=<count>` entries.
        #[arg(long, value_delimiter = ',', required = true)]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Also write the table as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Write one sample's prediction, per-query masks, scores and kernels.
    DumpMasks {
        #[command(flatten)]
        source: SampleSource,
        #[arg(long)]
        sample: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the word attention of every query for one sample.
    DumpAttention {
        #[command(flatten)]
        source: SampleSource,
        #[arg(long)]
        sample: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// key = value training config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.steps=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig> {
        let (mut text, base) = match &self.config {
            Some(p) => (
                fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
                p.parent().map(Path::to_path_buf),
            ),
            None => (String::new(), None),
        };
        for o in &self.overrides {
            let Some((k, v)) = o.split_once('=') else {
                bail!(Usage(format!("--set expects KEY=VALUE, got {o:?}")));
            };
            text += &format!("\n{} = {}\n", k.trim(), v.trim());
        }
        Ok(TrainConfig::parse(&text, base.as_deref())?)
    }
}

#[derive(Args)]
struct SampleSource {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    /// Read the split from a generated dataset directory instead of
    /// regenerating it from the checkpoint's manifest.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl SampleSource {
    fn dataset(&self, manifest: &Manifest) -> Result<Dataset> {
        Ok(match &self.data {
            Some(dir) => Dataset::load(dir, &self.split)?,
            None => Dataset::generate(manifest, &self.split)?,
        })
    }
}

#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Debug)]
struct Threshold(String);

impl std::fmt::Display for Threshold {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Threshold {}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Threshold>().is_some() {
        return EXIT_THRESHOLD;
    }
    match e.downcast_ref::<eavl::Error>() {
        Some(eavl::Error::Numerical(_)) => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { manifest, out } => {
            let m = Manifest::load(&manifest).with_context(|| format!("reading {}", manifest.display()))?;
            for d in Dataset::write_all(&m, &out)? {
                println!("{}: {} samples", d.split, d.len());
            }
            Ok(())
        }
        Command::Train { config, out } => {
            let cfg = config.load()?;
            let summary = run_training(&cfg, &out)?;
            println!("log: {}", summary.log.display());
            println!("checkpoint: {}", summary.checkpoint.display());
            if let Some(r) = &summary.report {
                print_report(&cfg.eval_split, r);
            }
            Ok(())
        }
        Command::Eval { source, min_mean_iou } => {
            let report = with_checkpoint(&source.checkpoint, Evaluate(&source))?;
            print_report(&source.split, &report);
            if let Some(min) = min_mean_iou {
                if report.mean_iou < min {
                    bail!(Threshold(format!("mean IoU {:.4} is below {min}", report.mean_iou)));
                }
            }
            Ok(())
        }
        Command::Gradcheck => gradcheck(),
        Command::Ablate {
            config,
            variants,
            seeds,
            json,
        } => {
            let cfg = config.load()?;
            let variants = variants
                .iter()
                .map(|v| v.parse::<Variant>())
                .collect::<eavl::Result<Vec<_>>>()?;
            let table = run_ablation(&cfg, &variants, &seeds, &mut |v, seed, r| {
                eprintln!("{v} seed {seed}: mIoU {:.4} oIoU {:.4}", r.mean_iou, r.overall_iou);
            })?;
            print!("{}", table.render());
            if let Some(path) = json {
                fs::write(&path, table.to_json())?;
            }
            Ok(())
        }
        Command::DumpMasks { source, sample, out } => with_checkpoint(&source.checkpoint, DumpMasks(&source, sample, &out)),
        Command::DumpAttention { source, sample, out } => {
            with_checkpoint(&source.checkpoint, DumpAttention(&source, sample, &out))
        }
    }
}

fn print_report(split: &str, r: &EvalReport) {
    println!(
        "{split}: {} samples, mIoU {:.4}, oIoU {:.4}",
        r.sample_count, r.mean_iou, r.overall_iou
    );
    let pr: Vec<String> = eavl::data::THRESHOLDS
        .iter()
        .zip(r.precision_at)
        .map(|(t, p)| format!("Pr@{t} {p:.4}"))
        .collect();
    println!("  {}", pr.join("  "));
}

fn gradcheck() -> Result<()> {
    let reports = gradcheck_suite(&default_options())?;
    let mut failed = Vec::new();
    for b in &reports {
        println!(
            "{:<28} max rel err {:.3e} over {} entries ({} at kinks){}",
            b.name,
            b.report.max_rel_err,
            b.report.entries_checked,
            b.report.kinks,
            if b.passed() { "" } else { "  FAIL" }
        );
        for p in &b.report.zero_grad_params {
            eprintln!("warning: {}: {p} receives zero gradient", b.name);
        }
        if !b.passed() {
            failed.push(b.name.clone());
        }
    }
    if !failed.is_empty() {
        bail!(Threshold(format!("gradient check failed for {}", failed.join(", "))));
    }
    Ok(())
}

/// Work that needs a trainer restored at the checkpoint's own precision.
trait WithTrainer {
    type Out;
    fn run<T: Real>(self, t: Trainer<T>) -> Result<Self::Out>;
}

fn with_checkpoint<W: WithTrainer>(path: &Path, work: W) -> Result<W::Out> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    match peek_precision(&bytes)? {
        Precision::Single => work.run(Trainer::<f32>::from_checkpoint(Checkpoint::from_bytes(&bytes)?)?),
        Precision::Double => work.run(Trainer::<f64>::from_checkpoint(Checkpoint::from_bytes(&bytes)?)?),
    }
}

struct Evaluate<'a>(&'a SampleSource);

impl WithTrainer for Evaluate<'_> {
    type Out = EvalReport;
    fn run<T: Real>(self, t: Trainer<T>) -> Result<EvalReport> {
        Ok(t.evaluate(&self.0.dataset(&t.config.manifest)?)?)
    }
}

fn pick(source: &SampleSource, manifest: &Manifest, index: usize) -> Result<Sample> {
    let mut data = source.dataset(manifest)?;
    if index >= data.len() {
        bail!(Usage(format!("split {} has {} samples, no index {index}", source.split, data.len())));
    }
    Ok(data.samples.swap_remove(index))
}

fn save_mask(m: &Mask, path: &Path) -> Result<()> {
    m.to_gray()
        .save_with_format(path, ImageFormat::Pnm)
        .with_context(|| format!("writing {}", path.display()))
}

struct DumpMasks<'a>(&'a SampleSource, usize, &'a Path);

impl WithTrainer for DumpMasks<'_> {
    type Out = ();
    fn run<T: Real>(self, t: Trainer<T>) -> Result<()> {
        let DumpMasks(source, index, out) = self;
        let s = pick(source, &t.config.manifest, index)?;
        let tokens = t.model.tokenize(&s.expression)?;
        let b = t.model.predict(&t.store, &image_tensor(&s.image), &tokens)?;
        fs::create_dir_all(out)?;
        eavt::save(out.join("y.eavt"), &b.y)?;
        eavt::save(out.join("masks.eavt"), &b.masks)?;
        eavt::save(out.join("scores.eavt"), &b.scores)?;
        if !b.kernels.is_empty() {
            let rows: Vec<T> = b.kernels.iter().flat_map(|k| k.to_vector()).collect();
            let len = rows.len() / b.kernels.len();
            eavt::save(out.join("kernels.eavt"), &Tensor::from_vec(&[b.kernels.len(), len], rows)?)?;
        }
        let (h, w) = (s.mask.height(), s.mask.width());
        save_mask(&binarize_prediction(&b.y, h, w)?, &out.join("prediction.pgm"))?;
        save_mask(&s.mask, &out.join("ground_truth.pgm"))?;
        let [n, mh, mw] = b.masks.shape()[..] else { unreachable!("masks are 3-d") };
        for q in 0..n {
            let one = Tensor::from_vec(&[mh, mw], b.masks.data()[q * mh * mw..(q + 1) * mh * mw].to_vec())?;
            save_mask(&binarize_prediction(&one, h, w)?, &out.join(format!("mask_{q:02}.pgm")))?;
        }
        s.image
            .save_with_format(out.join("image.ppm"), ImageFormat::Pnm)
            .context("writing image.ppm")?;
        let iou = eavl::data::iou(&binarize_prediction(&b.y, h, w)?, &s.mask)?;
        println!("{:?}: IoU {iou:.4}", s.expression);
        for (q, sc) in b.scores.data().iter().enumerate() {
            println!("  query {q:>2}: score {:.4}", sc.as_f64());
        }
        Ok(())
    }
}

struct DumpAttention<'a>(&'a SampleSource, usize, &'a Path);

impl WithTrainer for DumpAttention<'_> {
    type Out = ();
    fn run<T: Real>(self, t: Trainer<T>) -> Result<()> {
        let DumpAttention(source, index, out) = self;
        let s = pick(source, &t.config.manifest, index)?;
        let tokens = t.model.tokenize(&s.expression)?;
        let b = t.model.predict(&t.store, &image_tensor(&s.image), &tokens)?;
        fs::create_dir_all(out)?;
        eavt::save(out.join("attention.eavt"), &b.attention)?;
        let words: Vec<&str> = tokens.ids[..tokens.true_length]
            .iter()
            .map(|&i| t.model.vocab.token(i).unwrap_or("?"))
            .collect();
        let l = b.attention.shape()[1];
        let mut table = format!("query {}\n", words.join(" "));
        for q in 0..b.attention.shape()[0] {
            let row: Vec<String> = b.attention.data()[q * l..q * l + words.len()]
                .iter()
                .map(|v| format!("{:.3}", v.as_f64()))
                .collect();
            table += &format!("{q} {}\n", row.join(" "));
        }
        fs::write(out.join("attention.txt"), &table)?;
        print!("{table}");
        Ok(())
    }
}
