//! Augmentation manifests.
//!
//! A manifest is UTF-8 JSON Lines. Each line is an object with a `kind` tag:
//!
//! - `"record"`: one generated image ([`AugmentationRecord`]);
//! - `"partial"`: written when a batch fails, listing the samples that were
//!   not produced ([`PartialMarker`]).
//!
//! Floats are written in shortest round-trip form, so a stored quant spec
//! re-parses to the exact same bits and its digest recomputes identically.
//! Paths are relative to the output root.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::squeezer::QuantSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRecord {
    /// Id of the generated sample.
    pub sample_id: String,
    pub source_id: String,
    pub pass: u32,
    /// Stream label of the sampling stage (`train` or `infer`).
    pub stage: String,
    pub global_seed: u64,
    /// Stream id per sub-stage (`bins`, `spec`).
    pub stage_seeds: BTreeMap<String, u64>,
    pub num_intervals: usize,
    /// Where `min(x)`/`max(x)` were measured.
    pub range_policy: String,
    pub quant_spec: QuantSpec,
    pub quant_spec_digest: String,
    /// Backend chain joined with `+`, or `none`.
    pub backend_name: String,
    /// `(backend name, sha256 of its output file)` in chain order.
    pub backend_digests: Vec<(String, String)>,
    pub output_path: String,
    pub mask_path: String,
    pub output_digest: String,
}

impl AugmentationRecord {
    /// The stored digest matches the stored spec.
    pub fn verify_digest(&self) -> bool {
        self.quant_spec.digest() == self.quant_spec_digest
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartialMarker {
    pub failed_samples: Vec<String>,
    pub category: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ManifestLine {
    Record(Box<AugmentationRecord>),
    Partial(PartialMarker),
}

/// Appends lines to a manifest, flushing after each one.
#[derive(Debug)]
pub struct ManifestWriter {
    path: PathBuf,
    file: File,
}

impl ManifestWriter {
    /// Opens `path`, truncating unless `append` is set.
    pub fn open(path: impl Into<PathBuf>, append: bool) -> Result<Self> {
        let path = path.into();
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self { path, file })
    }

    pub fn append(&mut self, line: &ManifestLine) -> Result<()> {
        let mut text = serde_json::to_string(line).map_err(|e| Error::Format(e.to_string()))?;
        text.push('\n');
        self.file
            .write_all(text.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestLine>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?);
    }
    Ok(out)
}

/// Only the record lines of a manifest.
pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<AugmentationRecord>> {
    Ok(read_manifest(path)?
        .into_iter()
        .filter_map(|l| match l {
            ManifestLine::Record(r) => Some(*r),
            ManifestLine::Partial(_) => None,
        })
        .collect())
}
