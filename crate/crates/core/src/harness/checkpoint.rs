//! Binary checkpoints.
//!
//! ```text
//! "EAVC" | u32 version | u8 precision (4 or 8)
//! u64 len | config text
//! u64 step | rng: [u8; 32] seed, u64 stream, u128 word position
//! u64 n | n × u64 data order | u64 cursor
//! u64 optimizer updates
//! u32 n | n × (u32 len | name | value | adam m | adam v)
//! ```
//!
//! Each tensor is a u64 length followed by its EAVT encoding. All integers
//! are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::io::{decode, encode};
use crate::tensor::{Precision, Real, Tensor};

use super::config::TrainConfig;

pub const MAGIC: &[u8; 4] = b"EAVC";
pub const VERSION: u32 = 1;

/// Enough of a ChaCha8 generator to resume it exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: TrainConfig,
    pub step: u64,
    pub rng: RngState,
    pub order: Vec<usize>,
    pub cursor: usize,
    pub params: Vec<(String, Tensor<T>)>,
    pub adam_t: u64,
    pub adam_m: Vec<Tensor<T>>,
    pub adam_v: Vec<Tensor<T>>,
}

/// Reads the precision tag without decoding the rest.
pub fn peek_precision(bytes: &[u8]) -> Result<Precision> {
    let mut r = Reader::new(bytes);
    header(&mut r)
}

fn header(r: &mut Reader<'_>) -> Result<Precision> {
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint format version {version} is not supported (this build reads version {VERSION})"
        )));
    }
    let tag = r.take(1)?[0];
    Precision::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("unknown precision tag {tag}")))
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(T::PRECISION.tag());
        let text = self.config.to_text();
        put_u64(&mut out, text.len() as u64);
        out.extend_from_slice(text.as_bytes());
        put_u64(&mut out, self.step);
        out.extend_from_slice(&self.rng.seed);
        put_u64(&mut out, self.rng.stream);
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        put_u64(&mut out, self.order.len() as u64);
        for &i in &self.order {
            put_u64(&mut out, i as u64);
        }
        put_u64(&mut out, self.cursor as u64);
        put_u64(&mut out, self.adam_t);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (i, (name, value)) in self.params.iter().enumerate() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            for t in [value, &self.adam_m[i], &self.adam_v[i]] {
                let bytes = encode(t);
                put_u64(&mut out, bytes.len() as u64);
                out.extend_from_slice(&bytes);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let precision = header(&mut r)?;
        if precision != T::PRECISION {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {precision} parameters and cannot be loaded as {}",
                T::PRECISION
            )));
        }
        let len = r.len()?;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("config text is not utf-8".into()))?;
        let config = TrainConfig::parse(text, None)?;
        let step = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let n = r.len()?;
        let order = (0..n).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let cursor = r.len()?;
        let adam_t = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        let (mut adam_m, mut adam_v) = (Vec::with_capacity(count), Vec::with_capacity(count));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?;
            let mut tensor = || -> Result<Tensor<T>> {
                let len = r.len()?;
                Ok(decode(r.take(len)?)?)
            };
            let (value, m, v) = (tensor()?, tensor()?, tensor()?);
            if m.shape() != value.shape() || v.shape() != value.shape() {
                return Err(Error::Checkpoint(format!("optimizer state of {name} has the wrong shape")));
            }
            params.push((name, value));
            adam_m.push(m);
            adam_v.push(v);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last parameter",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            config,
            step,
            rng: RngState { seed, stream, word_pos },
            order,
            cursor,
            params,
            adam_t,
            adam_m,
            adam_v,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "truncated: needed {n} bytes at offset {} of {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows usize".into()))
    }
}
