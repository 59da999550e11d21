use std::fs;
use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{evaluate, image_tensor, Dataset, EvalReport};
use crate::encoders::TokenSequence;
use crate::error::{Error, Result};
use crate::model::Eavl;
use crate::tensor::{Gradients, ParamStore, Real, Tape, Tensor};

use super::checkpoint::{Checkpoint, RngState};
use super::config::TrainConfig;
use super::optim::{poly_lr, Adam};

/// Keeps the data-order generator apart from the one that initializes
/// parameters, which is seeded with the bare seed.
const ORDER_STREAM: u64 = 1;

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub metrics: Option<EvalReport>,
}

/// Model inputs decoded once per dataset.
pub struct Prepared<T> {
    pub images: Vec<Tensor<T>>,
    pub tokens: Vec<TokenSequence>,
    /// Loss targets at the logit resolution.
    pub targets: Vec<Tensor<T>>,
}

pub struct Trainer<T> {
    pub config: TrainConfig,
    pub model: Eavl,
    pub store: ParamStore<T>,
    pub adam: Adam<T>,
    /// Updates applied so far.
    pub step: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    /// Where to write the offending batch when a step goes non-finite.
    pub dump_dir: Option<PathBuf>,
}

impl<T: Real> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let model = Eavl::new(config.model.clone(), config.mode, &mut store, config.seed)?;
        let adam = Adam::new(&store, config.beta1, config.beta2, config.eps);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(ORDER_STREAM);
        Ok(Self {
            config,
            model,
            store,
            adam,
            step: 0,
            rng,
            order: Vec::new(),
            cursor: 0,
            dump_dir: None,
        })
    }

    pub fn prepare(&self, data: &Dataset) -> Result<Prepared<T>> {
        Ok(Prepared {
            images: data.samples.iter().map(|s| image_tensor(&s.image)).collect(),
            tokens: data
                .samples
                .iter()
                .map(|s| self.model.tokenize(&s.expression))
                .collect::<Result<_>>()?,
            targets: data
                .samples
                .iter()
                .map(|s| {
                    let (h, w) = self.model.config.mask_size();
                    self.config.target.target(&s.mask, h, w)
                })
                .collect::<Result<_>>()?,
        })
    }

    /// Next `batch_size` sample indices. Each pass over the data is a fresh
    /// seeded shuffle; a batch may straddle two passes.
    pub fn next_batch(&mut self, n: usize) -> Vec<usize> {
        (0..self.config.batch_size)
            .map(|_| {
                if self.cursor >= self.order.len() {
                    self.order = (0..n).collect();
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }

    /// Mean loss and batch-averaged gradients over `batch`.
    pub fn batch_gradients(&self, prep: &Prepared<T>, batch: &[usize]) -> Result<(f64, Gradients<T>)> {
        let mut total = Gradients::zeros_like(&self.store);
        let mut loss_sum = 0.0;
        for &i in batch {
            let tape = Tape::new();
            let out = self
                .model
                .forward(&self.store, &tape, tape.constant(prep.images[i].clone()), &prep.tokens[i])?;
            let loss = out.y.bce_with_logits(&prep.targets[i])?;
            loss_sum += loss.value().item().as_f64();
            total.add_assign(&tape.backward(loss, &self.store)?)?;
        }
        let n = batch.len() as f64;
        total.scale(T::from_f64(1.0 / n));
        Ok((loss_sum / n, total))
    }

    /// One optimizer update; returns the batch loss and the rate used.
    pub fn train_step(&mut self, data: &Dataset, prep: &Prepared<T>) -> Result<(f64, f64)> {
        let batch = self.next_batch(data.len());
        let (loss, grads) = self.batch_gradients(prep, &batch)?;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(self.numerical_failure(data, &batch, loss));
        }
        let c = &self.config;
        let lr = poly_lr(c.lr, self.step, c.steps, c.power);
        self.adam.step(&mut self.store, &grads, lr)?;
        self.step += 1;
        Ok((loss, lr))
    }

    fn numerical_failure(&self, data: &Dataset, batch: &[usize], loss: f64) -> Error {
        let samples: Vec<_> = batch
            .iter()
            .map(|&i| {
                let s = &data.samples[i];
                serde_json::json!({ "index": i, "seed": s.seed, "expression": s.expression, "scene": s.scene })
            })
            .collect();
        let dump = serde_json::json!({ "step": self.step, "loss": loss.to_string(), "batch": samples });
        let mut msg = format!(
            "non-finite loss or gradient at step {} (loss {loss}) on samples {batch:?}",
            self.step
        );
        if let Some(dir) = &self.dump_dir {
            let path = dir.join("nan_batch.json");
            match fs::create_dir_all(dir).and_then(|_| fs::write(&path, dump.to_string())) {
                Ok(()) => msg.push_str(&format!("; batch written to {}", path.display())),
                Err(e) => msg.push_str(&format!("; could not write batch dump: {e}")),
            }
        }
        Error::Numerical(msg)
    }

    /// Trains up to `config.steps`, writing one JSON line per step. Metrics
    /// on `eval` are attached every `eval_every` steps and after the last.
    pub fn run(&mut self, train: &Dataset, eval: &Dataset, log: &mut dyn Write) -> Result<Option<EvalReport>> {
        let prep = self.prepare(train)?;
        let mut last = None;
        while self.step < self.config.steps {
            let (loss, lr) = self.train_step(train, &prep)?;
            let due = self.step == self.config.steps
                || (self.config.eval_every > 0 && self.step % self.config.eval_every == 0);
            let metrics = if due { Some(self.evaluate(eval)?) } else { None };
            if metrics.is_some() {
                last.clone_from(&metrics);
            }
            let rec = LogRecord {
                step: self.step,
                loss,
                lr,
                metrics,
            };
            serde_json::to_writer(&mut *log, &rec).map_err(|e| Error::Data(e.to_string()))?;
            log.write_all(b"\n")?;
        }
        log.flush()?;
        Ok(last)
    }

    pub fn evaluate(&self, data: &Dataset) -> Result<EvalReport> {
        evaluate(&self.model, &self.store, &data.samples)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            config: self.config.clone(),
            step: self.step as u64,
            rng: RngState {
                seed: self.rng.get_seed(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos(),
            },
            order: self.order.clone(),
            cursor: self.cursor,
            params: self.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
            adam_t: self.adam.t,
            adam_m: self.adam.m.clone(),
            adam_v: self.adam.v.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint<T>) -> Result<Self> {
        let mut t = Self::new(ckpt.config)?;
        let names: Vec<String> = t.store.iter().map(|(_, p)| p.name.clone()).collect();
        let stored: Vec<&String> = ckpt.params.iter().map(|(n, _)| n).collect();
        if names.iter().collect::<Vec<_>>() != stored {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters that do not match the {} the model declares",
                stored.len(),
                names.len()
            )));
        }
        let ids: Vec<_> = t.store.ids().collect();
        for (id, (_, value)) in ids.into_iter().zip(ckpt.params) {
            t.store.set_value(id, value)?;
        }
        t.adam.t = ckpt.adam_t;
        t.adam.m = ckpt.adam_m;
        t.adam.v = ckpt.adam_v;
        t.step = usize::try_from(ckpt.step).map_err(|_| Error::Checkpoint("step overflows".into()))?;
        let mut rng = ChaCha8Rng::from_seed(ckpt.rng.seed);
        rng.set_stream(ckpt.rng.stream);
        rng.set_word_pos(ckpt.rng.word_pos);
        t.rng = rng;
        if ckpt.cursor > ckpt.order.len() {
            return Err(Error::Checkpoint("data cursor past the end of the order".into()));
        }
        t.order = ckpt.order;
        t.cursor = ckpt.cursor;
        Ok(t)
    }
}
