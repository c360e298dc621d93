//! Embedding banks and the UEB1 on-disk format.
//!
//! A bank is an immutable row-major `f32` matrix plus a flat string map of
//! metadata. Every embedding that enters the pipeline, whether it came from a
//! real encoder dump or from the synthetic generator, goes through this type.
//!
//! UEB1 layout (little-endian):
//!
//! | bytes  | field                      |
//! |--------|----------------------------|
//! | 0..4   | magic `b"UEB1"`            |
//! | 4      | version, always 1          |
//! | 5      | dtype, 0 = f32             |
//! | 6..8   | reserved, zero             |
//! | 8..12  | dim (`u32`)                |
//! | 12..20 | rows (`u64`)               |
//! | 20..28 | reserved, zero             |
//! | 28..   | `rows * dim` f32 values    |
//!
//! Metadata lives next to the bank in `<path>.meta.json`; per-row labels in
//! `<path>.labels`.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"UEB1";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 28;
const DTYPE_F32: u8 = 0;

pub type Meta = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBank {
    dim: usize,
    data: Arc<[f32]>,
    meta: Meta,
}

impl EmbeddingBank {
    /// Validates and wraps a row-major matrix. `meta` must carry a `space` key.
    pub fn new(dim: usize, data: Vec<f32>, meta: Meta) -> Result<Self> {
        if dim < 2 {
            return Err(Error::invalid(format!("bank dim must be >= 2, got {dim}")));
        }
        if data.is_empty() || data.len() % dim != 0 {
            return Err(Error::invalid(format!(
                "bank payload of {} floats is not a positive multiple of dim {dim}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "bank entry at row {} column {}",
                pos / dim,
                pos % dim
            )));
        }
        if !meta.contains_key("space") {
            return Err(Error::invalid("bank meta is missing the \"space\" key"));
        }
        Ok(Self {
            dim,
            data: data.into(),
            meta,
        })
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R], space: &str) -> Result<Self> {
        let dim = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::dim(format!("row {i}"), dim, r.len()));
            }
            data.extend_from_slice(r);
        }
        let mut meta = Meta::new();
        meta.insert("space".into(), space.into());
        Self::new(dim, data, meta)
    }

    pub fn from_array(array: &Array2<f64>, meta: Meta) -> Result<Self> {
        let data = array.iter().map(|&v| v as f32).collect();
        Self::new(array.ncols(), data, meta)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn meta(&self) -> &Meta {
        &self.meta
    }

    pub fn space(&self) -> &str {
        self.meta.get("space").map(String::as_str).unwrap_or("unknown")
    }

    /// Returns a copy with one metadata entry replaced; the payload is shared.
    pub fn with_meta(&self, key: &str, value: &str) -> Self {
        let mut meta = self.meta.clone();
        meta.insert(key.into(), value.into());
        Self {
            dim: self.dim,
            data: Arc::clone(&self.data),
            meta,
        }
    }

    /// Widened copy of the payload for 64-bit computation.
    pub fn to_array(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.rows(), self.dim), |(i, j)| {
            f64::from(self.data[i * self.dim + j])
        })
    }
}

/// A bank whose rows carry integer group ids (class, caption group, pair id).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBank {
    pub bank: EmbeddingBank,
    pub labels: Vec<usize>,
}

impl LabeledBank {
    pub fn new(bank: EmbeddingBank, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != bank.rows() {
            return Err(Error::dim("labels", bank.rows(), labels.len()));
        }
        check_contiguous(&labels)?;
        Ok(Self { bank, labels })
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }
}

fn check_contiguous(labels: &[usize]) -> Result<()> {
    let distinct: BTreeSet<usize> = labels.iter().copied().collect();
    match distinct.iter().next_back() {
        Some(&max) if max + 1 != distinct.len() => Err(Error::invalid(format!(
            "label ids are not contiguous from 0 ({} distinct ids, max {max})",
            distinct.len()
        ))),
        _ => Ok(()),
    }
}

/// `<path><suffix>`, e.g. `bank.ueb` -> `bank.ueb.meta.json`.
pub fn sidecar_path(path: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn meta_path(path: &Path) -> PathBuf {
    sidecar_path(path, ".meta.json")
}

pub fn labels_path(path: &Path) -> PathBuf {
    sidecar_path(path, ".labels")
}

/// Serializes a bank to the UEB1 byte layout.
pub fn encode_bank(bank: &EmbeddingBank) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + bank.data.len() * 4);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F32);
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&(bank.dim as u32).to_le_bytes());
    out.extend_from_slice(&(bank.rows() as u64).to_le_bytes());
    out.extend_from_slice(&[0u8; 8]);
    for v in bank.data.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses UEB1 bytes. `origin` is only used to label errors.
pub fn decode_bank(bytes: &[u8], meta: Meta, origin: &Path) -> Result<EmbeddingBank> {
    if bytes.len() < HEADER_LEN || bytes[0..4] != MAGIC {
        return Err(Error::format(origin, "not a UEB1 file"));
    }
    let version = bytes[4];
    if version != VERSION {
        return Err(Error::format(
            origin,
            format!("unsupported version {version}"),
        ));
    }
    if bytes[5] != DTYPE_F32 {
        return Err(Error::format(
            origin,
            format!("corrupt bank: unknown dtype {}", bytes[5]),
        ));
    }
    if bytes[6..8] != [0, 0] || bytes[20..28] != [0; 8] {
        return Err(Error::format(origin, "corrupt bank: reserved bytes set"));
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let rows = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    if dim < 2 || rows < 1 {
        return Err(Error::format(
            origin,
            format!("corrupt bank: dim {dim}, rows {rows}"),
        ));
    }
    let expected = usize::try_from(rows)
        .ok()
        .and_then(|r| r.checked_mul(dim))
        .and_then(|n| n.checked_mul(4));
    let payload = &bytes[HEADER_LEN..];
    if expected != Some(payload.len()) {
        return Err(Error::format(
            origin,
            format!(
                "corrupt bank: header declares {rows} x {dim} floats, payload holds {} bytes",
                payload.len()
            ),
        ));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(origin, "corrupt bank: non-finite entry"));
    }
    EmbeddingBank::new(dim, data, meta).map_err(|e| Error::format(origin, e.to_string()))
}

pub fn write_bank(bank: &EmbeddingBank, path: &Path) -> Result<()> {
    write_file(path, &encode_bank(bank))?;
    let json = serde_json::to_vec_pretty(&bank.meta).expect("string map serializes");
    write_file(&meta_path(path), &json)
}

pub fn read_bank(path: &Path) -> Result<EmbeddingBank> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mpath = meta_path(path);
    let mut meta: Meta = match fs::read(&mpath) {
        Ok(raw) => serde_json::from_slice(&raw)
            .map_err(|e| Error::format(&mpath, format!("bad meta sidecar: {e}")))?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Meta::new(),
        Err(e) => return Err(Error::io(mpath, e)),
    };
    meta.entry("space".into()).or_insert_with(|| "unknown".into());
    decode_bank(&bytes, meta, path)
}

pub fn write_labels(labels: &[usize], path: &Path) -> Result<()> {
    let mut text = String::with_capacity(labels.len() * 4);
    for l in labels {
        text.push_str(&l.to_string());
        text.push('\n');
    }
    write_file(path, text.as_bytes())
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.trim().parse::<usize>().map_err(|_| {
                Error::format(path, format!("line {}: not a label id: {l:?}", n + 1))
            })
        })
        .collect()
}

pub fn write_labeled_bank(lb: &LabeledBank, path: &Path) -> Result<()> {
    write_bank(&lb.bank, path)?;
    write_labels(&lb.labels, &labels_path(path))
}

/// Reads a bank and its `<path>.labels` sidecar.
pub fn read_labeled_bank(path: &Path) -> Result<LabeledBank> {
    let bank = read_bank(path)?;
    let lpath = labels_path(path);
    let labels = read_labels(&lpath)?;
    LabeledBank::new(bank, labels).map_err(|e| Error::format(lpath, e.to_string()))
}

/// Scales every row to unit Euclidean norm.
pub fn l2_normalize_bank(bank: &EmbeddingBank) -> Result<EmbeddingBank> {
    let mut data = Vec::with_capacity(bank.data.len());
    for (i, row) in bank.iter_rows().enumerate() {
        let norm = row
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt();
        if norm <= 1e-12 {
            return Err(Error::ZeroNorm(i));
        }
        data.extend(row.iter().map(|&v| (f64::from(v) / norm) as f32));
    }
    EmbeddingBank::new(bank.dim, data, bank.meta.clone())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}
