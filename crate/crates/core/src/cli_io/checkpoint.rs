//! FXCK checkpoints: model weights, EMA shadow and resumable training state.
//!
//! All integers little-endian. `str` is `u32 len` + UTF-8.
//!
//! ```text
//! "FXCK" u16 version u16 flags(bit0 ema, bit1 train)
//! str model-config (TOML) u8 mode u32 merged_for(0 = none)
//! u32 n, n x u32 supported patch sizes
//! str flatten-order tag
//! table params
//! [ema]   f64 rate, table shadow
//! [train] u64 step u64 flops u64 adam_step u64 rng_seed u64 rng_stream u128 rng_word
//!         str train-config (TOML, empty = none), table adam.m, table adam.v
//!
//! table: u32 count, per tensor { str name, u8 flags(bit0 frozen), u8 ndim,
//!        ndim x u64 dims, u64 offset, u32 crc32 }, u64 payload_len, payload f64
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::backbone::{BackboneError, FlexMode, ModelConfig, ModelParams};
use crate::flexify_training::{TrainConfig, Trainer};
use crate::numerics::optim::{AdamState, Ema};
use crate::numerics::rng::{RngState, TrackedRng};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"FXCK";
pub const VERSION: u16 = 1;
/// Tensors are stored row-major in their logical shape; patch embeddings as `[c, py, px]` columns.
pub const FLATTEN_ORDER: &str = "row-major;embed=c,py,px";

const HAS_EMA: u16 = 1;
const HAS_TRAIN: u16 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic {0:?}, expected FXCK")]
    Magic([u8; 4]),
    #[error("checkpoint version {found} needs migration to version {supported}, and no migration is defined")]
    Version { found: u16, supported: u16 },
    #[error("truncated checkpoint: needed {needed} bytes at offset {offset}, file has {len}")]
    Truncated { offset: usize, needed: usize, len: usize },
    #[error("duplicate tensor name {name:?} in {section}")]
    Duplicate { section: &'static str, name: String },
    #[error("checksum mismatch for tensor {name:?} in {section}")]
    Checksum { section: &'static str, name: String },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Optimizer and RNG state needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub flops: u64,
    pub adam: AdamState,
    pub rng: RngState,
    pub config: Option<TrainConfig>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub ema: Option<Ema>,
    pub train: Option<TrainState>,
}

/// One named tensor as stored.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub tensor: Tensor,
    pub frozen: bool,
}

impl Checkpoint {
    pub fn weights(params: ModelParams) -> Self {
        Self { params, ema: None, train: None }
    }

    pub fn from_trainer(t: &Trainer, cfg: Option<&TrainConfig>) -> Self {
        Self {
            params: t.params.clone(),
            ema: Some(t.ema.clone()),
            train: Some(TrainState {
                step: t.step,
                flops: t.flops,
                adam: t.adam.clone(),
                rng: t.rng.state(),
                config: cfg.cloned(),
            }),
        }
    }

    /// A trainer positioned exactly where this checkpoint was taken.
    pub fn into_trainer(self) -> Result<Trainer, CheckpointError> {
        let train = self.train.ok_or_else(|| CheckpointError::Format("checkpoint has no training state".into()))?;
        let ema = self.ema.ok_or_else(|| CheckpointError::Format("checkpoint has no EMA section".into()))?;
        Ok(Trainer::resume(self.params, train.adam, ema, TrackedRng::restore(train.rng), train.step, train.flops))
    }

    /// Weights with the EMA shadow substituted where present.
    pub fn ema_params(&self) -> ModelParams {
        let mut p = self.params.clone();
        if let Some(e) = &self.ema {
            for (n, t) in &e.shadow {
                p.tensors.insert(n.clone(), t.clone());
            }
        }
        p
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let p = &self.params;
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u16(VERSION);
        let flags = if self.ema.is_some() { HAS_EMA } else { 0 } | if self.train.is_some() { HAS_TRAIN } else { 0 };
        w.u16(flags);
        w.str(&toml::to_string(&p.config).map_err(|e| CheckpointError::Format(e.to_string()))?);
        w.u8(mode_code(p.mode));
        w.u32(p.merged_for.unwrap_or(0) as u32);
        let supported = p.supported();
        w.u32(supported.len() as u32);
        for s in supported {
            w.u32(s as u32);
        }
        w.str(FLATTEN_ORDER);
        let entries: Vec<Entry> = p
            .tensors
            .iter()
            .map(|(n, t)| Entry { name: n.clone(), tensor: t.clone(), frozen: p.frozen.contains(n) })
            .collect();
        write_table(&mut w, "params", &entries)?;
        if let Some(e) = &self.ema {
            w.f64(e.rate);
            write_table(&mut w, "ema", &plain(&e.shadow))?;
        }
        if let Some(t) = &self.train {
            w.u64(t.step);
            w.u64(t.flops);
            w.u64(t.adam.step);
            w.u64(t.rng.seed);
            w.u64(t.rng.stream);
            w.u128(t.rng.word_pos);
            let cfg = match &t.config {
                Some(c) => toml::to_string(c).map_err(|e| CheckpointError::Format(e.to_string()))?,
                None => String::new(),
            };
            w.str(&cfg);
            write_table(&mut w, "adam.m", &plain(&t.adam.m))?;
            write_table(&mut w, "adam.v", &plain(&t.adam.v))?;
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(CheckpointError::Magic(magic));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(CheckpointError::Version { found: version, supported: VERSION });
        }
        let flags = r.u16()?;
        if flags & !(HAS_EMA | HAS_TRAIN) != 0 {
            return Err(CheckpointError::Format(format!("unknown flags {flags:#x}")));
        }
        let config: ModelConfig = toml::from_str(&r.str()?).map_err(|e| CheckpointError::Format(format!("model config: {e}")))?;
        let mode = match r.u8()? {
            0 => FlexMode::Base,
            1 => FlexMode::Shared,
            2 => FlexMode::Lora,
            m => return Err(CheckpointError::Format(format!("unknown mode {m}"))),
        };
        let merged_for = match r.u32()? {
            0 => None,
            p => Some(p as usize),
        };
        let n = r.u32()? as usize;
        let mut registry = Vec::new();
        for _ in 0..n {
            registry.push(r.u32()? as usize);
        }
        let order = r.str()?;
        if order != FLATTEN_ORDER {
            return Err(CheckpointError::Format(format!("flatten order {order:?}, expected {FLATTEN_ORDER:?}")));
        }
        let entries = read_table(&mut r, "params")?;
        let mut tensors = BTreeMap::new();
        let mut frozen = BTreeSet::new();
        for e in entries {
            if e.frozen {
                frozen.insert(e.name.clone());
            }
            tensors.insert(e.name, e.tensor);
        }
        let params = ModelParams::from_parts(config, mode, tensors, frozen, merged_for)?;
        if params.supported() != registry {
            return Err(CheckpointError::Format(format!(
                "patch-size registry {registry:?} disagrees with stored tensors {:?}",
                params.supported()
            )));
        }
        let ema = if flags & HAS_EMA != 0 {
            let rate = r.f64()?;
            Some(Ema { rate, shadow: to_map(read_table(&mut r, "ema")?) })
        } else {
            None
        };
        let train = if flags & HAS_TRAIN != 0 {
            let step = r.u64()?;
            let flops = r.u64()?;
            let adam_step = r.u64()?;
            let rng = RngState { seed: r.u64()?, stream: r.u64()?, word_pos: r.u128()? };
            let text = r.str()?;
            let config = if text.is_empty() {
                None
            } else {
                Some(toml::from_str(&text).map_err(|e| CheckpointError::Format(format!("train config: {e}")))?)
            };
            let m = to_map(read_table(&mut r, "adam.m")?);
            let v = to_map(read_table(&mut r, "adam.v")?);
            Some(TrainState { step, flops, adam: AdamState { step: adam_step, m, v }, rng, config })
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(CheckpointError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { params, ema, train })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("fxck.tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn mode_code(m: FlexMode) -> u8 {
    match m {
        FlexMode::Base => 0,
        FlexMode::Shared => 1,
        FlexMode::Lora => 2,
    }
}

fn plain(map: &BTreeMap<String, Tensor>) -> Vec<Entry> {
    map.iter().map(|(n, t)| Entry { name: n.clone(), tensor: t.clone(), frozen: false }).collect()
}

fn to_map(entries: Vec<Entry>) -> BTreeMap<String, Tensor> {
    entries.into_iter().map(|e| (e.name, e.tensor)).collect()
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
}

/// Write a tensor table. Names must be unique.
fn write_table(w: &mut Writer, section: &'static str, entries: &[Entry]) -> Result<(), CheckpointError> {
    let mut seen = BTreeSet::new();
    for e in entries {
        if !seen.insert(e.name.as_str()) {
            return Err(CheckpointError::Duplicate { section, name: e.name.clone() });
        }
    }
    w.u32(entries.len() as u32);
    let mut offset = 0u64;
    for e in entries {
        w.str(&e.name);
        w.u8(e.frozen as u8);
        w.u8(e.tensor.ndim() as u8);
        for &d in e.tensor.shape() {
            w.u64(d as u64);
        }
        w.u64(offset);
        let mut h = crc32fast::Hasher::new();
        for v in e.tensor.data() {
            h.update(&v.to_le_bytes());
        }
        w.u32(h.finalize());
        offset += 8 * e.tensor.numel() as u64;
    }
    w.u64(offset);
    for e in entries {
        for v in e.tensor.data() {
            w.f64(*v);
        }
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated { offset: self.pos, needed: n, len: self.buf.len() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn u128(&mut self) -> Result<u128, CheckpointError> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Format(format!("invalid UTF-8 at offset {at}")))
    }
}

fn read_table(r: &mut Reader<'_>, section: &'static str) -> Result<Vec<Entry>, CheckpointError> {
    let count = r.u32()? as usize;
    let mut heads = Vec::new();
    let mut seen = BTreeSet::new();
    for _ in 0..count {
        let name = r.str()?;
        if !seen.insert(name.clone()) {
            return Err(CheckpointError::Duplicate { section, name });
        }
        let frozen = match r.u8()? {
            0 => false,
            1 => true,
            f => return Err(CheckpointError::Format(format!("tensor {name:?}: bad flags {f}"))),
        };
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let offset = r.u64()?;
        let crc = r.u32()?;
        heads.push((name, frozen, shape, offset, crc));
    }
    let payload_len = r.u64()?;
    let start = r.pos;
    let payload = r.take(usize::try_from(payload_len).map_err(|_| CheckpointError::Format("payload too large".into()))?)?;
    let mut out = Vec::with_capacity(count);
    let mut expect = 0u64;
    for (name, frozen, shape, offset, crc) in heads {
        let numel = shape.iter().try_fold(1u64, |a, &d| a.checked_mul(d as u64));
        let bytes = numel.and_then(|n| n.checked_mul(8));
        let end = bytes.and_then(|b| offset.checked_add(b));
        match end {
            Some(end) if offset == expect && end <= payload_len => expect = end,
            _ => {
                return Err(CheckpointError::Format(format!(
                    "tensor {name:?} at offset {offset} with shape {shape:?} does not fit payload of {payload_len} bytes starting at {start}"
                )))
            }
        }
        let raw = &payload[offset as usize..expect as usize];
        if crc32fast::hash(raw) != crc {
            return Err(CheckpointError::Checksum { section, name });
        }
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let tensor = Tensor::new(&shape, data).map_err(|e| CheckpointError::Format(format!("tensor {name:?}: {e}")))?;
        out.push(Entry { name, tensor, frozen });
    }
    if expect != payload_len {
        return Err(CheckpointError::Format(format!("{section}: payload has {} unreferenced bytes", payload_len - expect)));
    }
    Ok(out)
}
