//! Binary checkpoints.
//!
//! Layout, all integers `u32` little-endian:
//!
//! ```text
//! "NGPS" | version | record count
//! per record: name length | UTF-8 name | rank | dims... | f32 LE payload
//! config length | config text
//! ```
//!
//! Parameter records come first in store order. Optimizer moments follow as
//! `<name>.adam.m` / `<name>.adam.v`, then a rank-0 `adam.step` record. The
//! trailing config text is the flat `key = value` form of the training config.

use std::fs;
use std::path::Path;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"NGPS";
pub const VERSION: u32 = 1;
const MOMENT_M: &str = ".adam.m";
const MOMENT_V: &str = ".adam.v";
const STEP_RECORD: &str = "adam.step";
/// Upper bound on name length and rank accepted when reading.
const MAX_NAME: usize = 4096;
const MAX_RANK: usize = 8;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ParamStore<f32>,
    pub adam: Option<AdamState>,
}

struct Record {
    name: String,
    shape: Vec<usize>,
    values: Vec<f32>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits the format").to_le_bytes());
}

fn put_record(out: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f32]) {
    put_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len());
    for &d in shape {
        put_u32(out, d);
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::format(self.path, format!("{} (at byte {})", msg.into(), self.pos))
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated while reading {what}")));
        }
        let bytes: &'a [u8] = self.bytes;
        let s = &bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn record(&mut self) -> Result<Record> {
        let len = self.u32("name length")?;
        if len == 0 || len > MAX_NAME {
            return Err(self.err(format!("implausible record name length {len}")));
        }
        let name = std::str::from_utf8(self.take(len, "record name")?)
            .map_err(|_| self.err("record name is not UTF-8"))?
            .to_string();
        let rank = self.u32("rank")?;
        if rank > MAX_RANK {
            return Err(self.err(format!("record `{name}` has implausible rank {rank}")));
        }
        let shape = (0..rank).map(|_| self.u32("dimension")).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|n| n.checked_mul(4).is_some_and(|b| b <= self.bytes.len()))
            .ok_or_else(|| self.err(format!("record `{name}` shape {shape:?} exceeds the file")))?;
        let payload = self.take(n * 4, &format!("payload of `{name}`"))?;
        let values = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Record { name, shape, values })
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut records = self.params.len();
        if self.adam.is_some() {
            records += 2 * self.params.len() + 1;
        }
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        put_u32(&mut out, VERSION as usize);
        put_u32(&mut out, records);
        for (_, name, t) in self.params.iter() {
            put_record(&mut out, name, t.shape(), t.values());
        }
        if let Some(adam) = &self.adam {
            for ((_, name, t), (m, v)) in self.params.iter().zip(adam.m.iter().zip(&adam.v)) {
                put_record(&mut out, &format!("{name}{MOMENT_M}"), t.shape(), m);
                put_record(&mut out, &format!("{name}{MOMENT_V}"), t.shape(), v);
            }
            put_record(&mut out, STEP_RECORD, &[], &[adam.step as f32]);
        }
        let text = self.config.to_text();
        put_u32(&mut out, text.len());
        out.extend_from_slice(text.as_bytes());
        out
    }

    /// Decodes a checkpoint; `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4, "magic")? != MAGIC {
            return Err(r.err("not a checkpoint (bad magic)"));
        }
        let version = r.u32("version")?;
        if version != VERSION as usize {
            return Err(r.err(format!("unsupported checkpoint version {version}, expected {VERSION}")));
        }
        let count = r.u32("record count")?;
        let mut params = ParamStore::new();
        let mut moments = Vec::new();
        let mut step = None;
        for _ in 0..count {
            let rec = r.record()?;
            if rec.name == STEP_RECORD {
                let s = rec.values.first().copied().filter(|s| rec.values.len() == 1 && *s >= 0.0 && s.fract() == 0.0);
                step = Some(s.ok_or_else(|| r.err("malformed optimizer step record"))? as u64);
            } else if rec.name.ends_with(MOMENT_M) || rec.name.ends_with(MOMENT_V) {
                moments.push(rec);
            } else {
                let t = Tensor::new(rec.shape, rec.values).map_err(|e| r.err(e.to_string()))?.with_grad();
                params.add(rec.name, t).map_err(|e| r.err(e.to_string()))?;
            }
        }
        let len = r.u32("config length")?;
        let text = std::str::from_utf8(r.take(len, "config text")?).map_err(|_| r.err("config text is not UTF-8"))?;
        let config = TrainConfig::parse_text(text).map_err(|e| r.err(e.to_string()))?;
        if r.pos != bytes.len() {
            return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let adam = match (step, moments.is_empty()) {
            (None, true) => None,
            (Some(step), _) => Some(Self::collect_moments(&params, moments, step, config.lr, &r)?),
            (None, false) => return Err(r.err("optimizer moments without a step record")),
        };
        Ok(Self { config, params, adam })
    }

    fn collect_moments(params: &ParamStore<f32>, moments: Vec<Record>, step: u64, lr: f32, r: &Reader) -> Result<AdamState> {
        if moments.len() != 2 * params.len() {
            return Err(r.err(format!("{} moment records for {} parameters", moments.len(), params.len())));
        }
        let mut adam = AdamState::new(params, lr);
        adam.step = step;
        let mut it = moments.into_iter();
        for (i, (_, name, t)) in params.iter().enumerate() {
            for (suffix, dst) in [(MOMENT_M, &mut adam.m[i]), (MOMENT_V, &mut adam.v[i])] {
                let rec = it.next().unwrap();
                if rec.name != format!("{name}{suffix}") || rec.shape != t.shape() {
                    return Err(r.err(format!(
                        "expected moment `{name}{suffix}` {:?}, found `{}` {:?}",
                        t.shape(),
                        rec.name,
                        rec.shape
                    )));
                }
                *dst = rec.values;
            }
        }
        Ok(adam)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Rebuilds the model the config describes and checks that every stored
    /// tensor matches it by name and shape.
    pub fn restore(&self) -> Result<(Model, ParamStore<f32>)> {
        let (model, mut fresh) = Model::new(self.config.model.clone(), self.config.seed)?;
        if fresh.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "checkpoint holds {} tensors, the configured model has {}",
                self.params.len(),
                fresh.len()
            )));
        }
        for (dst, (_, name, src)) in fresh.tensors_mut().iter_mut().zip(self.params.iter()) {
            if dst.shape() != src.shape() {
                return Err(Error::Contract(format!(
                    "tensor `{name}` has shape {:?}, the model expects {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.values_mut().copy_from_slice(src.values());
        }
        for ((_, a, _), (_, b, _)) in fresh.iter().zip(self.params.iter()) {
            if a != b {
                return Err(Error::Contract(format!("checkpoint tensor `{b}` where the model has `{a}`")));
            }
        }
        Ok((model, fresh))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn sample() -> Checkpoint {
        let mut config = TrainConfig::default();
        config.model = ModelConfig { table_size: 256, ..ModelConfig::default() };
        let (_, params) = Model::new(config.model.clone(), 0).unwrap();
        let mut adam = AdamState::new(&params, config.lr);
        adam.step = 17;
        adam.m[3][0] = 0.25;
        Checkpoint { config, params, adam: Some(adam) }
    }

    #[test]
    fn header_and_round_trip() {
        let ck = sample();
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], b"NGPS");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.adam.as_ref().unwrap().step, 17);
        assert_eq!(back.adam.as_ref().unwrap().m[3][0], 0.25);
        assert_eq!(back.config, ck.config);
        back.restore().unwrap();
    }

    #[test]
    fn every_truncation_is_a_clean_error() {
        let bytes = sample().to_bytes();
        for cut in (0..bytes.len()).step_by(997).chain([bytes.len() - 1]) {
            assert!(Checkpoint::from_bytes(&bytes[..cut], Path::new("x")).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn corrupt_headers_and_mismatches() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap_err().to_string().contains("magic"));
        let mut bytes = sample().to_bytes();
        bytes[4] = 2;
        assert!(Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap_err().to_string().contains("version"));
        let mut bytes = sample().to_bytes();
        bytes.push(0);
        assert!(Checkpoint::from_bytes(&bytes, Path::new("x")).is_err());

        let mut ck = sample();
        ck.config.model.table_size = 512;
        let err = ck.restore().unwrap_err().to_string();
        assert!(err.contains("hash.table"), "{err}");
    }
}
