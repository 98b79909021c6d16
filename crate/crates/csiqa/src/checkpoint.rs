//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CSIQ" | u32 version | u64 body length | body | u32 CRC-32 of everything before it
//! body = u32 section count, then per section: u32 name length, name, u64 length, bytes
//! ```
//!
//! Encoding is canonical, so loading and saving again reproduces the file
//! byte for byte.

use std::path::Path;

use csiqa_core::csm::{CsnetReconstructor, SamplingMatrix};
use csiqa_core::optim::AdamState;
use csiqa_core::params::ParamStore;
use csiqa_core::train::{BestState, EpochRecord, RngState, Trainer};
use csiqa_core::{seeded_rng, Model, Tensor};

use crate::config::{RunConfig, Settings};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"CSIQ";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("checkpoint format version {found}, this build reads version {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("missing section `{0}`")]
    MissingSection(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

type CkResult<T> = std::result::Result<T, CheckpointError>;

fn malformed(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Malformed(msg.into())
}

/// Ordered named byte sections.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Container {
    pub sections: Vec<(String, Vec<u8>)>,
}

impl Container {
    pub fn push(&mut self, name: &str, bytes: Vec<u8>) {
        self.sections.push((name.to_string(), bytes));
    }

    pub fn section(&self, name: &str) -> CkResult<&[u8]> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b.as_slice())
            .ok_or_else(|| CheckpointError::MissingSection(name.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = Writer::default();
        body.u32(self.sections.len() as u32);
        for (name, bytes) in &self.sections {
            body.str(name);
            body.u64(bytes.len() as u64);
            body.0.extend_from_slice(bytes);
        }
        let mut out = Vec::with_capacity(HEADER_LEN + body.0.len() + 4);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(body.0.len() as u64).to_le_bytes());
        out.extend_from_slice(&body.0);
        out.extend_from_slice(&crc32fast::hash(&out).to_le_bytes());
        out
    }

    /// Checks magic, version, length and checksum before reading any
    /// section.
    pub fn from_bytes(bytes: &[u8]) -> CkResult<Self> {
        if bytes.len() < 4 {
            return Err(CheckpointError::Truncated);
        }
        if bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(CheckpointError::Truncated);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch { found: version, expected: VERSION });
        }
        let body_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let total = usize::try_from(body_len)
            .ok()
            .and_then(|n| n.checked_add(HEADER_LEN + 4))
            .ok_or(CheckpointError::Truncated)?;
        if bytes.len() < total {
            return Err(CheckpointError::Truncated);
        }
        if bytes.len() > total {
            return Err(malformed(format!("{} unexpected trailing bytes", bytes.len() - total)));
        }
        let (content, tail) = bytes.split_at(total - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(content);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }
        let mut r = Reader::new(&content[HEADER_LEN..]);
        let count = r.u32()?;
        let mut sections = Vec::new();
        for _ in 0..count {
            let name = r.str()?;
            let len = r.len()?;
            sections.push((name, r.take(len)?.to_vec()));
        }
        r.finish()?;
        Ok(Self { sections })
    }
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|&x| self.f64(x));
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }
    fn take(&mut self, n: usize) -> CkResult<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| malformed("section ends early"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn array<const N: usize>(&mut self) -> CkResult<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }
    fn u8(&mut self) -> CkResult<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> CkResult<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> CkResult<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn u128(&mut self) -> CkResult<u128> {
        Ok(u128::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> CkResult<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    /// A length that must fit in the remaining bytes (guards allocation).
    fn len(&mut self) -> CkResult<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.bytes.len() - self.pos)
            .ok_or_else(|| malformed("length exceeds section"))
    }
    fn count(&mut self, unit: usize) -> CkResult<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n.saturating_mul(unit) <= self.bytes.len() - self.pos)
            .ok_or_else(|| malformed("count exceeds section"))
    }
    fn str(&mut self) -> CkResult<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| malformed("name is not UTF-8"))
    }
    fn f64s(&mut self) -> CkResult<Vec<f64>> {
        let n = self.count(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn usizes(&mut self) -> CkResult<Vec<usize>> {
        let n = self.count(8)?;
        (0..n).map(|_| self.u64().map(|v| v as usize)).collect()
    }
    fn finish(&self) -> CkResult<()> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(malformed("unread bytes at end of section"))
        }
    }
}

fn write_store(w: &mut Writer, store: &ParamStore) {
    w.u32(store.len() as u32);
    for e in store.entries() {
        w.str(&e.name);
        w.u8(e.trainable as u8);
        w.u32(e.tensor.rank() as u32);
        e.tensor.shape().iter().for_each(|&d| w.u64(d as u64));
        e.tensor.data().iter().for_each(|&x| w.f64(x));
    }
}

fn read_store(r: &mut Reader) -> CkResult<ParamStore> {
    let n = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let name = r.str()?;
        let trainable = match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(malformed(format!("bad trainable flag {b}"))),
        };
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<CkResult<Vec<_>>>()?;
        let numel =
            shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| malformed("tensor too large"))?;
        if numel.saturating_mul(8) > r.bytes.len() - r.pos {
            return Err(malformed(format!("tensor {name} exceeds section")));
        }
        let data = (0..numel).map(|_| r.f64()).collect::<CkResult<Vec<_>>>()?;
        let tensor = Tensor::new(&shape, data).map_err(|e| malformed(e.to_string()))?;
        if store.find(&name).is_some() {
            return Err(malformed(format!("duplicate parameter {name}")));
        }
        store.add_with(name, tensor, trainable);
    }
    Ok(store)
}

fn store_bytes(store: &ParamStore) -> Vec<u8> {
    let mut w = Writer::default();
    write_store(&mut w, store);
    w.0
}

fn parse_section<T>(c: &Container, name: &str, f: impl FnOnce(&mut Reader) -> CkResult<T>) -> CkResult<T> {
    let mut r = Reader::new(c.section(name)?);
    let v = f(&mut r)?;
    r.finish()?;
    Ok(v)
}

/// Copies `src` into `dst`, which must hold the same names, shapes and
/// trainability in the same order.
fn fill_store(dst: &mut ParamStore, src: &ParamStore) -> CkResult<()> {
    if dst.names() != src.names() {
        return Err(malformed("parameter names do not match the configuration"));
    }
    for (id, e) in dst.ids().collect::<Vec<_>>().into_iter().zip(src.entries()) {
        dst.set(id, e.tensor.clone()).map_err(|e| malformed(e.to_string()))?;
        dst.set_trainable(id, e.trainable);
    }
    Ok(())
}

fn kind_of(c: &Container) -> CkResult<String> {
    String::from_utf8(c.section("kind")?.to_vec()).map_err(|_| malformed("kind is not UTF-8"))
}

fn expect_kind(c: &Container, want: &str) -> CkResult<()> {
    let kind = kind_of(c)?;
    if kind != want {
        return Err(malformed(format!("holds a `{kind}` state, expected `{want}`")));
    }
    Ok(())
}

/// A resumable training run.
#[derive(Debug, Clone)]
pub struct TrainingState {
    pub config: RunConfig,
    pub trainer: Trainer,
}

impl TrainingState {
    pub fn to_container(&self) -> Container {
        let t = &self.trainer;
        let mut c = Container::default();
        c.push("kind", b"training".to_vec());
        c.push("config", self.config.to_text().into_bytes());
        c.push("params", store_bytes(&t.model.store));

        let mut w = Writer::default();
        w.u64(t.adam.step);
        w.u64(t.adam.m.len() as u64);
        for (m, v) in t.adam.m.iter().zip(&t.adam.v) {
            w.f64s(m);
            w.f64s(v);
        }
        c.push("adam", w.0);

        let rng = RngState::capture(&t.rng);
        let mut w = Writer::default();
        w.0.extend_from_slice(&rng.seed);
        w.u64(rng.stream);
        w.u128(rng.word_pos);
        c.push("rng", w.0);

        let mut w = Writer::default();
        w.u64(t.step);
        w.u64(t.epoch);
        w.u64(t.cursor as u64);
        w.u64(t.order.len() as u64);
        t.order.iter().for_each(|&i| w.u64(i as u64));
        w.f64s(&t.epoch_losses);
        c.push("progress", w.0);

        let mut w = Writer::default();
        w.u64(t.history.len() as u64);
        for h in &t.history {
            w.u64(h.epoch);
            w.f64(h.mean_loss);
            w.f64(h.val_srcc);
            w.f64(h.val_plcc);
        }
        c.push("history", w.0);

        let mut w = Writer::default();
        match &t.best {
            None => w.u8(0),
            Some(b) => {
                w.u8(1);
                w.u64(b.epoch);
                w.f64(b.val_srcc);
                write_store(&mut w, &b.store);
            }
        }
        c.push("best", w.0);
        c
    }

    pub fn from_container(c: &Container) -> CkResult<Self> {
        expect_kind(c, "training")?;
        let text = std::str::from_utf8(c.section("config")?).map_err(|_| malformed("config is not UTF-8"))?;
        let config = RunConfig::parse(text).map_err(|e| malformed(e.to_string()))?;
        let mut model = Model::new(config.model.clone()).map_err(|e| malformed(e.to_string()))?;
        let params = parse_section(c, "params", read_store)?;
        fill_store(&mut model.store, &params)?;
        let mut trainer = Trainer::new(model, config.train);

        trainer.adam = parse_section(c, "adam", |r| {
            let step = r.u64()?;
            let n = r.count(16)?;
            let mut state = AdamState { step, m: Vec::with_capacity(n), v: Vec::with_capacity(n) };
            for _ in 0..n {
                state.m.push(r.f64s()?);
                state.v.push(r.f64s()?);
            }
            Ok(state)
        })?;
        let trainable: Vec<usize> =
            trainer.model.store.trainable_ids().iter().map(|&id| trainer.model.store.get(id).numel()).collect();
        let moments_ok = trainer.adam.m.is_empty()
            || (trainer.adam.m.len() == trainable.len()
                && trainer
                    .adam
                    .m
                    .iter()
                    .zip(&trainer.adam.v)
                    .zip(&trainable)
                    .all(|((m, v), &n)| m.len() == n && v.len() == n));
        if !moments_ok {
            return Err(malformed("optimizer moments do not match the trainable parameters"));
        }

        trainer.rng = parse_section(c, "rng", |r| {
            Ok(RngState { seed: r.array()?, stream: r.u64()?, word_pos: r.u128()? }.restore())
        })?;

        parse_section(c, "progress", |r| {
            trainer.step = r.u64()?;
            trainer.epoch = r.u64()?;
            trainer.cursor = r.u64()? as usize;
            trainer.order = r.usizes()?;
            trainer.epoch_losses = r.f64s()?;
            Ok(())
        })?;
        if trainer.cursor > trainer.order.len() {
            return Err(malformed("batch cursor beyond the epoch order"));
        }

        trainer.history = parse_section(c, "history", |r| {
            let n = r.count(32)?;
            (0..n)
                .map(|_| {
                    Ok(EpochRecord { epoch: r.u64()?, mean_loss: r.f64()?, val_srcc: r.f64()?, val_plcc: r.f64()? })
                })
                .collect()
        })?;

        trainer.best = parse_section(c, "best", |r| match r.u8()? {
            0 => Ok(None),
            1 => {
                let epoch = r.u64()?;
                let val_srcc = r.f64()?;
                let stored = read_store(r)?;
                let mut store = trainer.model.store.clone();
                fill_store(&mut store, &stored)?;
                Ok(Some(BestState { epoch, val_srcc, store }))
            }
            b => Err(malformed(format!("bad best-state flag {b}"))),
        })?;
        Ok(Self { config, trainer })
    }
}

/// A pretrained sampling matrix with its reconstructor.
#[derive(Debug, Clone)]
pub struct CsmState {
    pub ratio: f64,
    pub width: usize,
    pub seed: u64,
    pub phi: SamplingMatrix,
    pub reconstructor: CsnetReconstructor,
    /// Corpus MSE before each update, then after the last one.
    pub losses: Vec<f64>,
}

impl CsmState {
    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        c.push("kind", b"csm".to_vec());
        let text = format!(
            "block = {}\nratio = {}\nwidth = {}\nseed = {}\n",
            self.phi.block, self.ratio, self.width, self.seed
        );
        c.push("config", text.into_bytes());
        let mut store = self.reconstructor.store.clone();
        store.add("csm.phi", self.phi.phi.clone());
        c.push("params", store_bytes(&store));
        let mut w = Writer::default();
        w.f64s(&self.losses);
        c.push("losses", w.0);
        c
    }

    pub fn from_container(c: &Container) -> CkResult<Self> {
        expect_kind(c, "csm")?;
        let text = std::str::from_utf8(c.section("config")?).map_err(|_| malformed("config is not UTF-8"))?;
        let s = Settings::parse(text, "checkpoint config").map_err(|e| malformed(e.to_string()))?;
        let need = |k: &str| malformed(format!("missing or invalid `{k}`"));
        let block: usize = s.get("block").ok().flatten().ok_or_else(|| need("block"))?;
        let ratio: f64 = s.get("ratio").ok().flatten().ok_or_else(|| need("ratio"))?;
        let width: usize = s.get("width").ok().flatten().ok_or_else(|| need("width"))?;
        let seed: u64 = s.get("seed").ok().flatten().ok_or_else(|| need("seed"))?;
        let params = parse_section(c, "params", read_store)?;
        let mut rec =
            CsnetReconstructor::new(block, ratio, width, &mut seeded_rng(0)).map_err(|e| malformed(e.to_string()))?;
        let n = rec.store.len();
        if params.len() != n + 1 {
            return Err(malformed("unexpected parameter count"));
        }
        fill_store(&mut rec.store, &params.prefix(n))?;
        let phi_id = params.find("csm.phi").ok_or_else(|| malformed("no sampling matrix"))?;
        let phi = SamplingMatrix::new(params.get(phi_id).clone(), block).map_err(|e| malformed(e.to_string()))?;
        let losses = parse_section(c, "losses", |r| r.f64s())?;
        Ok(Self { ratio, width, seed, phi, reconstructor: rec, losses })
    }
}

/// Either kind of checkpoint.
#[derive(Debug, Clone)]
pub enum Checkpoint {
    Training(Box<TrainingState>),
    Csm(Box<CsmState>),
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            Checkpoint::Training(t) => t.to_container().to_bytes(),
            Checkpoint::Csm(c) => c.to_container().to_bytes(),
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> CkResult<Self> {
        let c = Container::from_bytes(bytes)?;
        match kind_of(&c)?.as_str() {
            "training" => Ok(Checkpoint::Training(Box::new(TrainingState::from_container(&c)?))),
            "csm" => Ok(Checkpoint::Csm(Box::new(CsmState::from_container(&c)?))),
            other => Err(malformed(format!("unknown checkpoint kind `{other}`"))),
        }
    }

    /// The sampling matrix held by either kind.
    pub fn phi(&self) -> SamplingMatrix {
        match self {
            Checkpoint::Training(t) => t.trainer.model.phi(),
            Checkpoint::Csm(c) => c.phi.clone(),
        }
    }

    /// Sampling-matrix-only export of any checkpoint, for initializing
    /// another run.
    pub fn phi_bytes(&self) -> Vec<u8> {
        let mut store = ParamStore::new();
        store.add("csm.phi", self.phi().phi);
        let mut c = Container::default();
        c.push("kind", b"phi".to_vec());
        c.push("config", format!("block = {}\n", self.phi().block).into_bytes());
        c.push("params", store_bytes(&store));
        c.to_bytes()
    }
}

/// Sampling matrix from any checkpoint kind, including a
/// sampling-matrix-only export.
pub fn phi_from_bytes(bytes: &[u8]) -> CkResult<SamplingMatrix> {
    let c = Container::from_bytes(bytes)?;
    if kind_of(&c)? != "phi" {
        return Checkpoint::from_bytes(bytes).map(|k| k.phi());
    }
    let text = std::str::from_utf8(c.section("config")?).map_err(|_| malformed("config is not UTF-8"))?;
    let s = Settings::parse(text, "checkpoint config").map_err(|e| malformed(e.to_string()))?;
    let block: usize = s.get("block").ok().flatten().ok_or_else(|| malformed("missing `block`"))?;
    let params = parse_section(&c, "params", read_store)?;
    let id = params.find("csm.phi").ok_or_else(|| malformed("no sampling matrix"))?;
    SamplingMatrix::new(params.get(id).clone(), block).map_err(|e| malformed(e.to_string()))
}

fn ck_err(path: &Path, source: CheckpointError) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), source }
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_bytes(path, &ck.to_bytes())
}

/// Writes through a temporary sibling and renames, so an interrupted save
/// never leaves a half-written checkpoint at `path`.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| ck_err(path, e))
}

pub fn load_phi(path: &Path) -> Result<SamplingMatrix> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    phi_from_bytes(&bytes).map_err(|e| ck_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_container() -> Container {
        let mut c = Container::default();
        c.push("a", vec![1, 2, 3]);
        c.push("b", vec![]);
        c
    }

    #[test]
    fn container_round_trip() {
        let c = sample_container();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], b"CSIQ");
        assert_eq!(Container::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn distinct_failures() {
        let bytes = sample_container().to_bytes();
        assert_eq!(Container::from_bytes(&bytes[..bytes.len() - 1]), Err(CheckpointError::Truncated));
        assert_eq!(Container::from_bytes(&bytes[..10]), Err(CheckpointError::Truncated));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(Container::from_bytes(&bad), Err(CheckpointError::BadMagic));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert_eq!(Container::from_bytes(&bad), Err(CheckpointError::VersionMismatch { found: 9, expected: VERSION }));
        let mut bad = bytes.clone();
        *bad.last_mut().unwrap() ^= 0xff;
        assert!(matches!(Container::from_bytes(&bad), Err(CheckpointError::Checksum { .. })));
        let mut bad = bytes.clone();
        bad[HEADER_LEN + 6] ^= 1;
        assert!(matches!(Container::from_bytes(&bad), Err(CheckpointError::Checksum { .. })));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(Container::from_bytes(&long), Err(CheckpointError::Malformed(_))));
    }
}
