//! Dataset records and their binary split files.
//!
//! A split file is `UNIPDSET`, a `u32` version, a `u64` record count, then
//! one length-prefixed block per record. All integers and floats are
//! little-endian; see `docs/formats.md` for the block layout.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::procgen::{
    generate_shape, render_condition, sample_surface, Camera, ConditionImage, LabeledSurfaceSample, PartPrimitive,
    PrimitiveKind, ShapeConfig, ShapeSpec,
};

pub const MAGIC: &[u8; 8] = b"UNIPDSET";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub shape: ShapeConfig,
    pub surface_points: usize,
    pub camera: Camera,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { shape: ShapeConfig::default(), surface_points: 8192, camera: Camera::default() }
    }
}

/// One object: its construction, labelled surface samples and condition image.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub seed: u64,
    pub spec: ShapeSpec,
    pub surface: LabeledSurfaceSample,
    pub image: ConditionImage,
}

/// Stream used for surface sampling, separate from shape generation.
const SURFACE_STREAM: u64 = 1;

/// Builds the record for `seed`; a pure function of `(seed, config)`.
pub fn make_record(seed: u64, cfg: &DatasetConfig) -> Result<Record> {
    let spec = generate_shape(seed, &cfg.shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SURFACE_STREAM);
    let surface = sample_surface(&spec, cfg.surface_points, &mut rng)?;
    let image = render_condition(&spec, &cfg.camera);
    Ok(Record { seed, spec, surface, image })
}

/// Assigns consecutive seeds to splits by fraction; the last split takes
/// the remainder.
pub fn split_seeds(start: u64, end: u64, fractions: &[f64]) -> Result<Vec<Vec<u64>>> {
    if end <= start {
        return Err(Error::Config(format!("empty seed range {start}..{end}")));
    }
    if fractions.is_empty() || fractions.iter().any(|f| !(*f >= 0.0)) {
        return Err(Error::Config("split fractions must be non-negative".into()));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions sum to {total}, expected 1")));
    }
    let n = end - start;
    let mut out = Vec::new();
    let mut cursor = start;
    let mut acc = 0.0;
    for (i, f) in fractions.iter().enumerate() {
        acc += f;
        let stop = if i + 1 == fractions.len() { end } else { start + (acc * n as f64).round() as u64 };
        out.push((cursor..stop.max(cursor)).collect());
        cursor = stop.max(cursor);
    }
    Ok(out)
}

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
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn vec3s(&mut self, vs: &[[f64; 3]]) {
        for v in vs {
            v.iter().for_each(|&c| self.f64(c));
        }
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated file: need {n} bytes at offset {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn vec3(&mut self) -> Result<[f64; 3]> {
        Ok([self.f64()?, self.f64()?, self.f64()?])
    }
    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn encode_block(r: &Record) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.u64(r.seed);
    w.u32(r.spec.parts.len() as u32);
    for p in &r.spec.parts {
        w.u8(p.kind.code());
        w.u32(p.part_id);
        p.dims.iter().for_each(|&c| w.f64(c));
        p.rotation.iter().flatten().for_each(|&c| w.f64(c));
        p.translation.iter().for_each(|&c| w.f64(c));
    }
    w.u64(r.surface.len() as u64);
    w.vec3s(&r.surface.positions);
    w.vec3s(&r.surface.normals);
    r.surface.labels.iter().for_each(|&l| w.u32(l));
    w.u32(r.image.height as u32);
    w.u32(r.image.width as u32);
    r.image.data.iter().for_each(|&v| w.f64(v));
    w.0
}

fn decode_block(block: &[u8]) -> Result<Record> {
    let mut r = Reader::new(block);
    let seed = r.u64()?;
    let nparts = r.u32()? as usize;
    let mut parts = Vec::with_capacity(nparts.min(1024));
    for _ in 0..nparts {
        let code = r.u8()?;
        let kind = PrimitiveKind::from_code(code).ok_or_else(|| Error::Format(format!("unknown primitive {code}")))?;
        let part_id = r.u32()?;
        let dims = r.vec3()?;
        let rotation = [r.vec3()?, r.vec3()?, r.vec3()?];
        let translation = r.vec3()?;
        parts.push(PartPrimitive { kind, dims, rotation, translation, part_id });
    }
    let c = r.u64()? as usize;
    if c.saturating_mul(52) > r.remaining() {
        return Err(Error::Format("truncated file: surface block".into()));
    }
    let positions = (0..c).map(|_| r.vec3()).collect::<Result<Vec<_>>>()?;
    let normals = (0..c).map(|_| r.vec3()).collect::<Result<Vec<_>>>()?;
    let labels = (0..c).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let n = height.saturating_mul(width).saturating_mul(2);
    if n.saturating_mul(8) != r.remaining() {
        return Err(Error::Format("image block length mismatch".into()));
    }
    let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    Ok(Record {
        seed,
        spec: ShapeSpec { parts },
        surface: LabeledSurfaceSample { positions, normals, labels },
        image: ConditionImage { height, width, data },
    })
}

pub fn encode_records(records: &[Record]) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u64(records.len() as u64);
    for rec in records {
        let block = encode_block(rec);
        w.u64(block.len() as u64);
        w.0.extend_from_slice(&block);
    }
    w.0
}

pub fn decode_records(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut r = Reader::new(bytes);
    if r.take(8).map_err(|_| Error::Format("file too short for header".into()))? != MAGIC {
        return Err(Error::Format("bad magic: not a dataset split file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("dataset version {version} unsupported (expected {VERSION})")));
    }
    let count = r.u64()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u64()? as usize;
        out.push(decode_block(r.take(len)?)?);
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes after last record", r.remaining())));
    }
    Ok(out)
}

pub fn write_split(path: &Path, records: &[Record]) -> Result<()> {
    std::fs::write(path, encode_records(records))?;
    Ok(())
}

pub fn read_split(path: &Path) -> Result<Vec<Record>> {
    decode_records(&std::fs::read(path)?)
}

/// SHA-256 of a record's binary block.
pub fn record_hash(record: &Record) -> [u8; 32] {
    Sha256::digest(encode_block(record)).into()
}

/// Order-sensitive checksum over the record hashes of a split.
pub fn split_checksum(records: &[Record]) -> String {
    let mut h = Sha256::new();
    for r in records {
        h.update(record_hash(r));
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub name: String,
    pub file: String,
    pub records: usize,
    pub seeds: (u64, u64),
    pub checksum: String,
}

/// `dataset.json`, written next to the split files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub config: DatasetConfig,
    pub splits: Vec<SplitEntry>,
}

impl DatasetManifest {
    pub const FILE: &'static str = "dataset.json";

    pub fn split(&self, name: &str) -> Option<&SplitEntry> {
        self.splits.iter().find(|s| s.name == name)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join(Self::FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(Self::FILE))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Split names used for two or three fractions.
pub fn split_names(count: usize) -> Result<&'static [&'static str]> {
    match count {
        1 => Ok(&["train"]),
        2 => Ok(&["train", "test"]),
        3 => Ok(&["train", "val", "test"]),
        n => Err(Error::Config(format!("expected 1 to 3 split fractions, got {n}"))),
    }
}

/// Generates every split of `[start, end)` into `dir`.
pub fn generate_dataset(dir: &Path, start: u64, end: u64, fractions: &[f64], cfg: &DatasetConfig) -> Result<DatasetManifest> {
    let names = split_names(fractions.len())?;
    let seeds = split_seeds(start, end, fractions)?;
    std::fs::create_dir_all(dir)?;
    let mut splits = Vec::new();
    for (name, seeds) in names.iter().zip(seeds) {
        let records = seeds.iter().map(|&s| make_record(s, cfg)).collect::<Result<Vec<_>>>()?;
        let file = format!("{name}.bin");
        write_split(&dir.join(&file), &records)?;
        let range = (seeds.first().copied().unwrap_or(start), seeds.last().map_or(start, |s| s + 1));
        splits.push(SplitEntry {
            name: name.to_string(),
            file,
            records: records.len(),
            seeds: range,
            checksum: split_checksum(&records),
        });
        log::info!("wrote {} records to {name}.bin", records.len());
    }
    let manifest = DatasetManifest { version: VERSION, config: *cfg, splits };
    manifest.write(dir)?;
    Ok(manifest)
}
