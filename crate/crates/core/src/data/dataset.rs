//! Splits on disk.
//!
//! ```text
//! root/MANIFEST              grammar and split seeds, key = value
//! root/<split>/samples.jsonl one record per sample
//! root/<split>/00000.ppm     image
//! root/<split>/00000.pgm     ground-truth mask
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use image::ImageFormat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv;

use super::raster::Mask;
use super::scene::{generate_scene, GrammarConfig, Sample, SceneDescriptor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub name: String,
    pub seed: u64,
    pub count: usize,
}

/// Everything needed to regenerate a dataset exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub grammar: GrammarConfig,
    pub splits: Vec<SplitSpec>,
}

/// Seed of sample `index` in a split seeded with `split_seed`.
pub fn sample_seed(split_seed: u64, index: usize) -> u64 {
    split_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut grammar = GrammarConfig::for_image(64, 64);
        let mut splits: Vec<SplitSpec> = Vec::new();
        for (key, value) in kv::parse(text)? {
            if let Some(k) = key.strip_prefix("grammar.") {
                grammar.set(k, &value)?;
            } else if let Some(rest) = key.strip_prefix("split.") {
                let Some((name, field)) = rest.rsplit_once('.') else {
                    return Err(Error::Config(format!("{key}: expected split.<name>.seed or .count")));
                };
                let idx = match splits.iter().position(|s| s.name == name) {
                    Some(i) => i,
                    None => {
                        splits.push(SplitSpec {
                            name: name.to_string(),
                            seed: 0,
                            count: 0,
                        });
                        splits.len() - 1
                    }
                };
                match field {
                    "seed" => splits[idx].seed = kv::parse_num(&key, &value)?,
                    "count" => splits[idx].count = kv::parse_num(&key, &value)?,
                    _ => return Err(Error::Config(format!("unknown manifest key {key:?}"))),
                }
            } else {
                return Err(Error::Config(format!("unknown manifest key {key:?}")));
            }
        }
        grammar.validate()?;
        if splits.is_empty() {
            return Err(Error::Config("manifest declares no splits".into()));
        }
        if let Some(s) = splits.iter().find(|s| s.count == 0) {
            return Err(Error::Config(format!("split {:?} has no samples", s.name)));
        }
        Ok(Self { grammar, splits })
    }

    pub fn split_pairs(&self) -> Vec<(String, String)> {
        self.splits
            .iter()
            .flat_map(|s| {
                [
                    (format!("split.{}.seed", s.name), s.seed.to_string()),
                    (format!("split.{}.count", s.name), s.count.to_string()),
                ]
            })
            .collect()
    }

    pub fn render(&self) -> String {
        let mut pairs = self.grammar.to_pairs();
        pairs.extend(self.split_pairs());
        kv::render(&pairs)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn split(&self, name: &str) -> Result<&SplitSpec> {
        self.splits
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Data(format!("manifest has no split {name:?}")))
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    index: usize,
    seed: u64,
    expression: String,
    scene: SceneDescriptor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: String,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn generate(manifest: &Manifest, split: &str) -> Result<Self> {
        let spec = manifest.split(split)?;
        let samples = (0..spec.count)
            .map(|i| generate_scene(sample_seed(spec.seed, i), &manifest.grammar))
            .collect::<Result<_>>()?;
        Ok(Self {
            split: split.to_string(),
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Generates every split and writes it under `root` with the manifest.
    pub fn write_all(manifest: &Manifest, root: impl AsRef<Path>) -> Result<Vec<Dataset>> {
        let root = root.as_ref();
        fs::create_dir_all(root)?;
        fs::write(root.join("MANIFEST"), manifest.render())?;
        manifest
            .splits
            .iter()
            .map(|s| {
                let d = Self::generate(manifest, &s.name)?;
                d.write(root)?;
                Ok(d)
            })
            .collect()
    }

    pub fn write(&self, root: impl AsRef<Path>) -> Result<()> {
        let dir = root.as_ref().join(&self.split);
        fs::create_dir_all(&dir)?;
        let mut jsonl = BufWriter::new(fs::File::create(dir.join("samples.jsonl"))?);
        for (i, s) in self.samples.iter().enumerate() {
            let rec = Record {
                index: i,
                seed: s.seed,
                expression: s.expression.clone(),
                scene: s.scene.clone(),
            };
            serde_json::to_writer(&mut jsonl, &rec).map_err(|e| Error::Data(e.to_string()))?;
            jsonl.write_all(b"\n")?;
            s.image
                .save_with_format(dir.join(format!("{i:05}.ppm")), ImageFormat::Pnm)
                .map_err(image_err)?;
            s.mask
                .to_gray()
                .save_with_format(dir.join(format!("{i:05}.pgm")), ImageFormat::Pnm)
                .map_err(image_err)?;
        }
        jsonl.flush()?;
        Ok(())
    }

    /// Reads a split back, checking each stored mask against the one its
    /// scene descriptor rasterizes to.
    pub fn load(root: impl AsRef<Path>, split: &str) -> Result<Self> {
        let dir = root.as_ref().join(split);
        let file = fs::File::open(dir.join("samples.jsonl"))?;
        let mut samples = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{split}/samples.jsonl line {}: {e}", n + 1)))?;
            let image = image::open(dir.join(format!("{:05}.ppm", rec.index)))
                .map_err(image_err)?
                .into_rgb8();
            let mask = Mask::from_gray(
                &image::open(dir.join(format!("{:05}.pgm", rec.index)))
                    .map_err(image_err)?
                    .into_luma8(),
            );
            let sample = Sample::from_scene(rec.seed, rec.expression, rec.scene)?;
            if sample.image != image || sample.mask != mask {
                return Err(Error::Data(format!(
                    "{split} sample {} on disk disagrees with its scene descriptor",
                    rec.index
                )));
            }
            samples.push(sample);
        }
        Ok(Self {
            split: split.to_string(),
            samples,
        })
    }
}

fn image_err(e: image::ImageError) -> Error {
    Error::Data(format!("image i/o: {e}"))
}
