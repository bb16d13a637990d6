//! Reconstruction backends.
//!
//! A backend maps a batch of quantized images (plus their masks) to
//! reconstructed images of the same size. Three kinds exist:
//!
//! - `identity` copies each input file unchanged;
//! - `smooth` box-filters background pixels (targets are never written);
//! - `external` runs a command following the directory-batch protocol:
//!
//! ```text
//! <command> --input-dir <dir> --output-dir <dir> --manifest <file>
//! ```
//!
//! The manifest has one tab-separated `sample_id  image_file  mask_file` line
//! per entry, file names relative to the input directory. The command must
//! write `<sample_id>.png` for every entry into the output directory and exit
//! with status 0. Anything else (nonzero exit, timeout, missing or
//! wrongly-sized output) fails the whole batch.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{load_gray_image, load_labeled, save_gray_image, GrayImage, TargetMask};

pub const DEFAULT_TIMEOUT_SECS: u64 = 600;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Identity,
    Smooth,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Integer(i64),
    Float(f64),
    Text(String),
    List(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendDescriptor {
    pub name: String,
    pub kind: BackendKind,
    #[serde(default)]
    pub params: BTreeMap<String, ParamValue>,
}

impl BackendDescriptor {
    pub fn identity(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: BackendKind::Identity,
            params: BTreeMap::new(),
        }
    }

    pub fn smooth(name: impl Into<String>, radius: usize) -> Self {
        Self {
            name: name.into(),
            kind: BackendKind::Smooth,
            params: BTreeMap::from([("radius".to_string(), ParamValue::Integer(radius as i64))]),
        }
    }

    pub fn external(name: impl Into<String>, command: Vec<String>, timeout_secs: Option<u64>) -> Self {
        let mut params = BTreeMap::from([("command".to_string(), ParamValue::List(command))]);
        if let Some(t) = timeout_secs {
            params.insert("timeout_secs".into(), ParamValue::Integer(t as i64));
        }
        Self {
            name: name.into(),
            kind: BackendKind::External,
            params,
        }
    }
}

/// Rejects duplicate backend names.
pub fn check_unique_names(descs: &[BackendDescriptor]) -> Result<()> {
    let mut seen = HashSet::new();
    for d in descs {
        if !seen.insert(d.name.as_str()) {
            return Err(Error::config(format!("backend name `{}` defined twice", d.name)));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchItem {
    pub sample_id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BatchRequest {
    pub items: Vec<BatchItem>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchOutput {
    pub sample_id: String,
    pub image: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BatchResponse {
    pub items: Vec<BatchOutput>,
}

#[derive(Debug)]
enum Kind {
    Identity,
    Smooth { radius: usize },
    External(External),
}

#[derive(Debug)]
struct External {
    program: String,
    args: Vec<String>,
    timeout: Duration,
    // One invocation in flight per instance.
    in_flight: Mutex<()>,
}

/// A validated, ready-to-run backend.
#[derive(Debug)]
pub struct Backend {
    name: String,
    kind: Kind,
}

fn int_param(desc: &BackendDescriptor, key: &str, default: i64) -> Result<i64> {
    match desc.params.get(key) {
        None => Ok(default),
        Some(ParamValue::Integer(v)) => Ok(*v),
        Some(other) => Err(Error::config(format!(
            "backend `{}`: `{key}` must be an integer, got {other:?}",
            desc.name
        ))),
    }
}

fn reject_unknown(desc: &BackendDescriptor, allowed: &[&str]) -> Result<()> {
    match desc.params.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(Error::config(format!(
            "backend `{}` ({:?}) does not take parameter `{k}`",
            desc.name, desc.kind
        ))),
        None => Ok(()),
    }
}

impl Backend {
    pub fn from_descriptor(desc: &BackendDescriptor) -> Result<Self> {
        if desc.name.is_empty() {
            return Err(Error::config("backend name must not be empty"));
        }
        let kind = match desc.kind {
            BackendKind::Identity => {
                reject_unknown(desc, &[])?;
                Kind::Identity
            }
            BackendKind::Smooth => {
                reject_unknown(desc, &["radius"])?;
                let radius = int_param(desc, "radius", 1)?;
                if radius < 0 {
                    return Err(Error::config(format!("backend `{}`: radius must be >= 0", desc.name)));
                }
                Kind::Smooth {
                    radius: radius as usize,
                }
            }
            BackendKind::External => {
                reject_unknown(desc, &["command", "timeout_secs"])?;
                let argv: Vec<String> = match desc.params.get("command") {
                    Some(ParamValue::Text(s)) => s.split_whitespace().map(String::from).collect(),
                    Some(ParamValue::List(v)) => v.clone(),
                    _ => {
                        return Err(Error::config(format!(
                            "backend `{}`: external backends need a `command` string or list",
                            desc.name
                        )))
                    }
                };
                let Some((program, args)) = argv.split_first() else {
                    return Err(Error::config(format!("backend `{}`: empty command", desc.name)));
                };
                let timeout = int_param(desc, "timeout_secs", DEFAULT_TIMEOUT_SECS as i64)?;
                if timeout <= 0 {
                    return Err(Error::config(format!(
                        "backend `{}`: timeout_secs must be > 0",
                        desc.name
                    )));
                }
                Kind::External(External {
                    program: program.clone(),
                    args: args.to_vec(),
                    timeout: Duration::from_secs(timeout as u64),
                    in_flight: Mutex::new(()),
                })
            }
        };
        Ok(Self {
            name: desc.name.clone(),
            kind,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Backend {
            backend: self.name.clone(),
            message: message.into(),
        }
    }

    /// Runs the batch, writing outputs under `work_dir` (created if missing).
    /// Returns a response only if every output exists and matches its input's
    /// dimensions.
    pub fn reconstruct(&self, batch: &BatchRequest, work_dir: &Path) -> Result<BatchResponse> {
        let mut ids = HashSet::new();
        for item in &batch.items {
            if !ids.insert(item.sample_id.as_str()) {
                return Err(Error::contract(format!(
                    "duplicate sample id `{}` in batch",
                    item.sample_id
                )));
            }
            for p in [&item.image, &item.mask] {
                if !p.is_file() {
                    return Err(Error::io(p, std::io::Error::from(std::io::ErrorKind::NotFound)));
                }
            }
        }
        fs::create_dir_all(work_dir).map_err(|e| Error::io(work_dir, e))?;

        let response = match &self.kind {
            Kind::Identity => self.run_identity(batch, work_dir)?,
            Kind::Smooth { radius } => self.run_smooth(batch, work_dir, *radius)?,
            Kind::External(ext) => self.run_external(ext, batch, work_dir)?,
        };
        self.check_response(batch, &response)?;
        Ok(response)
    }

    fn run_identity(&self, batch: &BatchRequest, work_dir: &Path) -> Result<BatchResponse> {
        let mut items = Vec::with_capacity(batch.items.len());
        for item in &batch.items {
            let ext = item.image.extension().and_then(|e| e.to_str()).unwrap_or("png");
            let out = work_dir.join(format!("{}.{ext}", item.sample_id));
            fs::copy(&item.image, &out).map_err(|e| Error::io(&out, e))?;
            items.push(BatchOutput {
                sample_id: item.sample_id.clone(),
                image: out,
            });
        }
        Ok(BatchResponse { items })
    }

    fn run_smooth(&self, batch: &BatchRequest, work_dir: &Path, radius: usize) -> Result<BatchResponse> {
        let mut items = Vec::with_capacity(batch.items.len());
        for item in &batch.items {
            let (image, mask) = load_labeled(&item.image, &item.mask)?.into_parts();
            let out = work_dir.join(format!("{}.png", item.sample_id));
            save_gray_image(&smooth_background(&image, &mask, radius)?, &out)?;
            items.push(BatchOutput {
                sample_id: item.sample_id.clone(),
                image: out,
            });
        }
        Ok(BatchResponse { items })
    }

    fn run_external(&self, ext: &External, batch: &BatchRequest, work_dir: &Path) -> Result<BatchResponse> {
        let _guard = ext.in_flight.lock().unwrap_or_else(|p| p.into_inner());
        let input_dir = work_dir.join("input");
        let output_dir = work_dir.join("output");
        for d in [&input_dir, &output_dir] {
            if d.exists() {
                fs::remove_dir_all(d).map_err(|e| Error::io(d, e))?;
            }
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }

        let mut manifest = String::new();
        for item in &batch.items {
            let ext_of = |p: &Path| p.extension().and_then(|e| e.to_str()).unwrap_or("png").to_string();
            let image_name = format!("{}.{}", item.sample_id, ext_of(&item.image));
            let mask_name = format!("{}_mask.{}", item.sample_id, ext_of(&item.mask));
            for (src, name) in [(&item.image, &image_name), (&item.mask, &mask_name)] {
                let dst = input_dir.join(name);
                fs::copy(src, &dst).map_err(|e| Error::io(&dst, e))?;
            }
            let _ = writeln!(manifest, "{}\t{}\t{}", item.sample_id, image_name, mask_name);
        }
        let manifest_path = work_dir.join("manifest.tsv");
        fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;

        let stdout_path = work_dir.join("backend.stdout");
        let stderr_path = work_dir.join("backend.stderr");
        let stdout = File::create(&stdout_path).map_err(|e| Error::io(&stdout_path, e))?;
        let stderr = File::create(&stderr_path).map_err(|e| Error::io(&stderr_path, e))?;

        let mut child = Command::new(&ext.program)
            .args(&ext.args)
            .arg("--input-dir")
            .arg(&input_dir)
            .arg("--output-dir")
            .arg(&output_dir)
            .arg("--manifest")
            .arg(&manifest_path)
            .stdin(Stdio::null())
            .stdout(stdout)
            .stderr(stderr)
            .spawn()
            .map_err(|e| self.fail(format!("could not start `{}`: {e}", ext.program)))?;

        let deadline = Instant::now() + ext.timeout;
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break status,
                Ok(None) if Instant::now() >= deadline => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(self.fail(format!(
                        "timed out after {:?}{}",
                        ext.timeout,
                        stderr_tail(&stderr_path)
                    )));
                }
                Ok(None) => std::thread::sleep(Duration::from_millis(5)),
                Err(e) => return Err(self.fail(format!("wait failed: {e}"))),
            }
        };
        if !status.success() {
            return Err(self.fail(format!("exited with {status}{}", stderr_tail(&stderr_path))));
        }

        let mut items = Vec::with_capacity(batch.items.len());
        let mut missing = Vec::new();
        for item in &batch.items {
            let out = output_dir.join(format!("{}.png", item.sample_id));
            if !out.is_file() {
                missing.push(item.sample_id.clone());
            }
            items.push(BatchOutput {
                sample_id: item.sample_id.clone(),
                image: out,
            });
        }
        if !missing.is_empty() {
            return Err(self.fail(format!(
                "missing outputs for {}{}",
                missing.join(", "),
                stderr_tail(&stderr_path)
            )));
        }
        Ok(BatchResponse { items })
    }

    fn check_response(&self, batch: &BatchRequest, response: &BatchResponse) -> Result<()> {
        if response.items.len() != batch.items.len() {
            return Err(self.fail("response size differs from request"));
        }
        for (req, out) in batch.items.iter().zip(&response.items) {
            if req.sample_id != out.sample_id {
                return Err(self.fail(format!(
                    "response id `{}` where `{}` was expected",
                    out.sample_id, req.sample_id
                )));
            }
            let want = image::image_dimensions(&req.image).map_err(|e| Error::Format(e.to_string()))?;
            let got = image::image_dimensions(&out.image)
                .map_err(|e| self.fail(format!("unreadable output {}: {e}", out.image.display())))?;
            if want != got {
                return Err(self.fail(format!(
                    "output for `{}` is {}x{}, input is {}x{}",
                    req.sample_id, got.0, got.1, want.0, want.1
                )));
            }
        }
        Ok(())
    }
}

fn stderr_tail(path: &Path) -> String {
    let text = fs::read_to_string(path).unwrap_or_default();
    let tail: Vec<&str> = text.lines().rev().take(20).collect();
    if tail.is_empty() {
        String::new()
    } else {
        let lines: Vec<&str> = tail.into_iter().rev().collect();
        format!("; stderr:\n{}", lines.join("\n"))
    }
}

/// Validates `desc` and runs one batch.
pub fn reconstruct(batch: &BatchRequest, desc: &BackendDescriptor, work_dir: &Path) -> Result<BatchResponse> {
    Backend::from_descriptor(desc)?.reconstruct(batch, work_dir)
}

/// Replaces each background pixel with the mean of the background pixels in
/// its `(2r+1)²` window. Window coordinates are clamped to the image, so edge
/// pixels are counted once per clamped position.
pub fn smooth_background(image: &GrayImage, mask: &TargetMask, radius: usize) -> Result<GrayImage> {
    mask.ensure_same_dims(image.dims(), "smooth_background")?;
    if radius == 0 {
        return Ok(image.clone());
    }
    let (w, h) = image.dims();
    let r = radius as isize;
    let out = (0..h)
        .flat_map(|row| (0..w).map(move |col| (row, col)))
        .map(|(row, col)| {
            if mask.get(row, col) {
                return image.get(row, col);
            }
            let (mut sum, mut n) = (0.0, 0usize);
            for dr in -r..=r {
                let rr = (row as isize + dr).clamp(0, h as isize - 1) as usize;
                for dc in -r..=r {
                    let cc = (col as isize + dc).clamp(0, w as isize - 1) as usize;
                    if !mask.get(rr, cc) {
                        sum += image.get(rr, cc);
                        n += 1;
                    }
                }
            }
            sum / n as f64
        })
        .collect();
    GrayImage::new(w, h, out)
}

/// Mean squared intensity error.
pub fn l2_reconstruction_loss(reconstructed: &GrayImage, original: &GrayImage) -> Result<f64> {
    reconstructed.ensure_same_dims(original.dims(), "l2_reconstruction_loss")?;
    if original.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = reconstructed
        .pixels()
        .iter()
        .zip(original.pixels())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / original.len() as f64)
}

/// Loads every response image, in request order.
pub fn load_response(response: &BatchResponse) -> Result<Vec<GrayImage>> {
    response.items.iter().map(|o| load_gray_image(&o.image)).collect()
}
