//! Run manifests: config snapshot plus 64-bit FNV-1a digests of every input
//! and output file.

use std::collections::BTreeMap;
use std::hash::Hasher;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bank::write_file;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    /// 16 lowercase hex digits.
    pub fnv1a64: String,
    pub bytes: u64,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self> {
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            fnv1a64: format!("{:016x}", fnv1a64(&data)),
            bytes: data.len() as u64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub formats: BTreeMap<String, u32>,
    pub config: Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub wall_clock_ms: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub results: BTreeMap<String, Value>,
}

impl RunManifest {
    pub fn new(command: &str, config: Value) -> Self {
        let formats = BTreeMap::from([
            ("UEB".to_string(), u32::from(crate::bank::VERSION)),
            ("UPC".to_string(), crate::projector::UPC_VERSION),
        ]);
        Self {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            formats,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            wall_clock_ms: 0.0,
            results: BTreeMap::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileDigest::of(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(FileDigest::of(path)?);
        Ok(())
    }

    /// Recomputes every input digest and fails on the first mismatch.
    pub fn verify_inputs(&self) -> Result<()> {
        verify(&self.inputs)
    }

    pub fn verify_outputs(&self) -> Result<()> {
        verify(&self.outputs)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_vec_pretty(self).expect("manifest serializes");
        json.push(b'\n');
        write_file(path, &json)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&data).map_err(|e| Error::format(path, e.to_string()))
    }
}

fn verify(files: &[FileDigest]) -> Result<()> {
    for f in files {
        let now = FileDigest::of(&f.path)?;
        if now.fnv1a64 != f.fnv1a64 {
            return Err(Error::format(
                &f.path,
                format!("digest mismatch: recorded {}, found {}", f.fnv1a64, now.fnv1a64),
            ));
        }
    }
    Ok(())
}
