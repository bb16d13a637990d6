//! Dataset handling and end-to-end runs.
//!
//! A dataset root holds `images/` and `masks/` (names configurable). Masks are
//! matched to images by file stem, optionally with a `_pixels0` or `_mask`
//! suffix. The stem is the sample id.
//!
//! Sample selection is two-staged: an optional fixed hold-out fraction is
//! removed first (it depends only on the seed), then the scarcity ratio takes
//! a prefix of one seeded shuffle of what remains. Prefixes nest, so the 10%
//! subset of a seed is always inside its 30% subset.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{check_unique_names, Backend, BackendDescriptor, BatchItem, BatchRequest};
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate_pair, format_table, sweep_csv, threshold_sweep, Connectivity, MatchOptions, MetricCounts, MetricReport,
};
use crate::manifest::{read_records, AugmentationRecord, ManifestLine, ManifestWriter, PartialMarker};
use crate::raster::{
    encode_png, file_digest, load_gray_image, load_labeled, load_mask, save_gray_image, save_mask, sha256_hex,
    GrayImage, TargetMask,
};
use crate::rng::derive_stream;
use crate::squeezer::{pixel_copy_paste, squeeze, GaussianSamplerConfig};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
const MASK_SUFFIXES: [&str; 3] = ["", "_pixels0", "_mask"];
const RANGE_POLICY: &str = "full-image";

/// Which sampling stage an augmentation run draws its squeezer parameters for.
/// The two stages use disjoint stream labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Train,
    #[default]
    Infer,
}

impl Stage {
    pub fn label(self) -> &'static str {
        match self {
            Stage::Train => "train",
            Stage::Infer => "infer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricOptions {
    pub connectivity: Connectivity,
    pub match_radius: f64,
    /// Prediction maps are binarized at `> threshold`.
    pub threshold: f64,
    /// Headline IoU is the mean of per-image IoUs instead of the pooled value.
    pub per_image_average: bool,
    /// Number of threshold steps in the Pd/Fa sweep; 0 disables it.
    pub sweep_steps: usize,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            connectivity: Connectivity::Eight,
            match_radius: 3.0,
            threshold: 0.5,
            per_image_average: false,
            sweep_steps: 0,
        }
    }
}

impl MetricOptions {
    pub fn match_options(&self) -> MatchOptions {
        MatchOptions {
            connectivity: self.connectivity,
            match_radius: self.match_radius,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset_root: PathBuf,
    pub images_dir: String,
    pub masks_dir: String,
    /// Scarcity ratio in `(0, 1]`.
    pub ratio: f64,
    /// Fraction in `[0, 1)` held out before the scarcity split.
    pub holdout_fraction: f64,
    pub seed: u64,
    pub sampler: GaussianSamplerConfig,
    pub backends: Vec<BackendDescriptor>,
    /// Backend names applied in order; empty means no reconstruction.
    pub chain: Vec<String>,
    pub output_root: PathBuf,
    pub passes: u32,
    pub batch_size: usize,
    pub stage: Stage,
    pub metrics: MetricOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset_root: PathBuf::from("data"),
            images_dir: "images".into(),
            masks_dir: "masks".into(),
            ratio: 1.0,
            holdout_fraction: 0.0,
            seed: 0,
            sampler: GaussianSamplerConfig::default(),
            backends: Vec::new(),
            chain: Vec::new(),
            output_root: PathBuf::from("out"),
            passes: 1,
            batch_size: 16,
            stage: Stage::Infer,
            metrics: MetricOptions::default(),
        }
    }
}

impl PipelineConfig {
    /// Parses TOML; relative paths are resolved against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        for p in [&mut cfg.dataset_root, &mut cfg.output_root] {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml_str(&text, base)
    }

    /// Looks a backend up by name: configured backends first, then the
    /// built-in `identity` and `smooth` (radius 1).
    pub fn resolve_backend(&self, name: &str) -> Result<BackendDescriptor> {
        if let Some(d) = self.backends.iter().find(|d| d.name == name) {
            return Ok(d.clone());
        }
        match name {
            "identity" => Ok(BackendDescriptor::identity("identity")),
            "smooth" => Ok(BackendDescriptor::smooth("smooth", 1)),
            other => Err(Error::config(format!("unknown backend `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::config(format!("ratio must be in (0, 1], got {}", self.ratio)));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::config(format!(
                "holdout_fraction must be in [0, 1), got {}",
                self.holdout_fraction
            )));
        }
        if self.passes == 0 {
            return Err(Error::config("passes must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        self.sampler.validate()?;
        check_unique_names(&self.backends)?;
        for d in &self.backends {
            Backend::from_descriptor(d)?;
        }
        for name in &self.chain {
            self.resolve_backend(name)?;
        }
        if !self.dataset_root.is_dir() {
            return Err(Error::config(format!(
                "dataset root {} is not a directory",
                self.dataset_root.display()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetEntry {
    pub sample_id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetIndex {
    pub entries: Vec<DatasetEntry>,
}

impl DatasetIndex {
    pub fn new(entries: Vec<DatasetEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.sample_id.as_str()) {
                return Err(Error::config(format!("duplicate sample id `{}`", e.sample_id)));
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.sample_id.as_str()).collect()
    }

    /// Reads every image/mask header and rejects mismatched dimensions.
    pub fn check_pairs(&self) -> Result<()> {
        self.entries.par_iter().try_for_each(|e| {
            let dims =
                |p: &Path| image::image_dimensions(p).map_err(|err| Error::Format(format!("{}: {err}", p.display())));
            let (a, b) = (dims(&e.image)?, dims(&e.mask)?);
            if a != b {
                return Err(Error::contract(format!(
                    "`{}`: image is {}x{}, mask is {}x{}",
                    e.sample_id, a.0, a.1, b.0, b.1
                )));
            }
            Ok(())
        })
    }

    /// `sample_id<TAB>image<TAB>mask` per line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let _ = writeln!(out, "{}\t{}\t{}", e.sample_id, e.image.display(), e.mask.display());
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let cols: Vec<&str> = line.split('\t').collect();
            let [id, image, mask] = cols[..] else {
                return Err(Error::Format(format!("bad index line `{line}`")));
            };
            entries.push(DatasetEntry {
                sample_id: id.to_string(),
                image: PathBuf::from(image),
                mask: PathBuf::from(mask),
            });
        }
        Self::new(entries)
    }
}

fn raster_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && matches!(ext.as_deref(), Some("png" | "pgm")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string()
}

/// Strips a known mask suffix from a file stem.
fn sample_key(stem: &str) -> &str {
    MASK_SUFFIXES
        .iter()
        .filter(|s| !s.is_empty())
        .find_map(|s| stem.strip_suffix(s))
        .unwrap_or(stem)
}

/// Scans `root/images_dir` and pairs each image with its mask.
pub fn ingest(root: &Path, images_dir: &str, masks_dir: &str) -> Result<DatasetIndex> {
    let images = raster_files(&root.join(images_dir))?;
    let masks = raster_files(&root.join(masks_dir))?;
    let mut mask_by_stem: HashMap<String, PathBuf> = HashMap::new();
    for m in masks {
        mask_by_stem.insert(stem(&m), m);
    }
    let mut entries = Vec::with_capacity(images.len());
    let mut missing = Vec::new();
    for img in images {
        let id = stem(&img);
        let mask = MASK_SUFFIXES
            .iter()
            .find_map(|suffix| mask_by_stem.get(&format!("{id}{suffix}")));
        match mask {
            Some(m) => entries.push(DatasetEntry {
                sample_id: id,
                image: img,
                mask: m.clone(),
            }),
            None => missing.push(id),
        }
    }
    if !missing.is_empty() {
        return Err(Error::config(format!("no mask for samples: {}", missing.join(", "))));
    }
    if entries.is_empty() {
        return Err(Error::config(format!(
            "no images found under {}",
            root.join(images_dir).display()
        )));
    }
    DatasetIndex::new(entries)
}

fn shuffled_order(n: usize, seed: u64, label: &str) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive_stream(seed, label, 0).rng());
    order
}

fn take_in_original_order(index: &DatasetIndex, mut picked: Vec<usize>) -> DatasetIndex {
    picked.sort_unstable();
    DatasetIndex {
        entries: picked.into_iter().map(|i| index.entries[i].clone()).collect(),
    }
}

/// Keeps `ceil(ratio·N)` samples: a prefix of one seeded shuffle, returned in
/// the original order.
pub fn split_dataset(index: &DatasetIndex, ratio: f64, seed: u64) -> Result<DatasetIndex> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::config(format!("ratio must be in (0, 1], got {ratio}")));
    }
    let n = index.len();
    // Shave the product so 0.3·10 does not round up to 4.
    let keep = ((ratio * n as f64) * (1.0 - 1e-12)).ceil() as usize;
    if keep == 0 {
        return Err(Error::config(format!("ratio {ratio} selects no samples out of {n}")));
    }
    let order = shuffled_order(n, seed, "scarcity");
    Ok(take_in_original_order(index, order[..keep.min(n)].to_vec()))
}

/// Splits off `round(fraction·N)` test samples with a seed-only shuffle, so the
/// test set is the same for every scarcity ratio. Returns `(train, test)`.
pub fn holdout_split(index: &DatasetIndex, fraction: f64, seed: u64) -> Result<(DatasetIndex, DatasetIndex)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::config(format!(
            "holdout fraction must be in [0, 1), got {fraction}"
        )));
    }
    let n = index.len();
    let n_test = (fraction * n as f64).round() as usize;
    let order = shuffled_order(n, seed, "holdout");
    let test = take_in_original_order(index, order[..n_test].to_vec());
    let train = take_in_original_order(index, order[n_test..].to_vec());
    Ok((train, test))
}

/// Hold-out removal followed by the scarcity split.
pub fn select_training(index: &DatasetIndex, cfg: &PipelineConfig) -> Result<DatasetIndex> {
    let (train, _) = holdout_split(index, cfg.holdout_fraction, cfg.seed)?;
    split_dataset(&train, cfg.ratio, cfg.seed)
}

#[derive(Debug, Clone, Default)]
pub struct AugmentOptions {
    /// Continue an interrupted run, keeping records already in the manifest.
    pub resume: bool,
    /// Keep the scratch directory after a successful run.
    pub keep_work: bool,
}

#[derive(Debug, Clone)]
pub struct AugmentSummary {
    pub manifest: PathBuf,
    pub records: Vec<AugmentationRecord>,
    /// Records carried over from a previous run.
    pub resumed: usize,
}

struct Job {
    full_index: usize,
    pass: u32,
    entry: DatasetEntry,
    output_id: String,
}

struct Prepared {
    original: GrayImage,
    mask: TargetMask,
    quantized: GrayImage,
    record: AugmentationRecord,
}

fn output_id(source: &str, pass: u32) -> String {
    format!("{source}_gen{pass}")
}

/// Squeezes every selected sample, runs the backend chain, re-implants the
/// target pixels and writes `images/`, `masks/` and the manifest under the
/// output root.
pub fn run_augment(cfg: &PipelineConfig, opts: &AugmentOptions) -> Result<AugmentSummary> {
    cfg.validate()?;
    let chain: Vec<Backend> = cfg
        .chain
        .iter()
        .map(|n| cfg.resolve_backend(n).and_then(|d| Backend::from_descriptor(&d)))
        .collect::<Result<_>>()?;
    let backend_name = if chain.is_empty() {
        "none".to_string()
    } else {
        cfg.chain.join("+")
    };

    let full = ingest(&cfg.dataset_root, &cfg.images_dir, &cfg.masks_dir)?;
    let position: HashMap<&str, usize> = full.ids().into_iter().enumerate().map(|(i, id)| (id, i)).collect();
    let selected = select_training(&full, cfg)?;

    let out = &cfg.output_root;
    let (images_out, masks_out, work) = (out.join("images"), out.join("masks"), out.join("work"));
    for d in [out, &images_out, &masks_out] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let manifest_path = out.join(MANIFEST_FILE);

    let mut done: Vec<AugmentationRecord> = Vec::new();
    if opts.resume && manifest_path.exists() {
        done = read_records(&manifest_path)?;
    }
    let resumed = done.len();
    let done_ids: HashSet<String> = done.iter().map(|r| r.sample_id.clone()).collect();

    // Rewrite the carried-over records so stale partial markers disappear.
    let mut writer = ManifestWriter::open(&manifest_path, false)?;
    for r in &done {
        writer.append(&ManifestLine::Record(Box::new(r.clone())))?;
    }

    let mut jobs = Vec::new();
    for pass in 0..cfg.passes {
        for entry in &selected.entries {
            let id = output_id(&entry.sample_id, pass);
            if done_ids.contains(&id) {
                continue;
            }
            jobs.push(Job {
                full_index: position[entry.sample_id.as_str()],
                pass,
                entry: entry.clone(),
                output_id: id,
            });
        }
    }

    let mut records = done;
    for (batch_no, batch) in jobs.chunks(cfg.batch_size).enumerate() {
        let batch_dir = work.join(format!("batch-{batch_no:05}"));
        match run_batch(cfg, &chain, &backend_name, batch, &batch_dir, &images_out, &masks_out) {
            Ok(batch_records) => {
                for r in batch_records {
                    writer.append(&ManifestLine::Record(Box::new(r.clone())))?;
                    records.push(r);
                }
            }
            Err(e) => {
                writer.append(&ManifestLine::Partial(PartialMarker {
                    failed_samples: batch.iter().map(|j| j.output_id.clone()).collect(),
                    category: e.category().to_string(),
                    error: e.to_string(),
                }))?;
                return Err(e);
            }
        }
    }
    if !opts.keep_work && work.exists() {
        fs::remove_dir_all(&work).map_err(|e| Error::io(&work, e))?;
    }
    Ok(AugmentSummary {
        manifest: manifest_path,
        records,
        resumed,
    })
}

fn run_batch(
    cfg: &PipelineConfig,
    chain: &[Backend],
    backend_name: &str,
    batch: &[Job],
    batch_dir: &Path,
    images_out: &Path,
    masks_out: &Path,
) -> Result<Vec<AugmentationRecord>> {
    let stage = cfg.stage.label();
    let prepared: Vec<Prepared> = batch
        .par_iter()
        .map(|job| {
            let (original, mask) = load_labeled(&job.entry.image, &job.entry.mask)?.into_parts();
            let ctx = derive_stream(cfg.seed, stage, job.full_index as u64).child("pass", u64::from(job.pass));
            let sq = squeeze(&original, &mask, &cfg.sampler, &ctx)?;
            let record = AugmentationRecord {
                sample_id: job.output_id.clone(),
                source_id: job.entry.sample_id.clone(),
                pass: job.pass,
                stage: stage.to_string(),
                global_seed: cfg.seed,
                stage_seeds: BTreeMap::from([
                    ("bins".to_string(), sq.bins_stream.stream_id),
                    ("spec".to_string(), sq.spec_stream.stream_id),
                ]),
                num_intervals: sq.num,
                range_policy: RANGE_POLICY.to_string(),
                quant_spec_digest: sq.spec.digest(),
                quant_spec: sq.spec,
                backend_name: backend_name.to_string(),
                backend_digests: Vec::new(),
                output_path: format!("images/{}.png", job.output_id),
                mask_path: format!("masks/{}.png", job.output_id),
                output_digest: String::new(),
            };
            Ok(Prepared {
                original,
                mask,
                quantized: sq.image,
                record,
            })
        })
        .collect::<Result<_>>()?;

    let mut generated: Vec<GrayImage> = prepared.iter().map(|p| p.quantized.clone()).collect();
    let mut backend_digests: Vec<Vec<(String, String)>> = vec![Vec::new(); prepared.len()];

    if !chain.is_empty() {
        let input_dir = batch_dir.join("quantized");
        fs::create_dir_all(&input_dir).map_err(|e| Error::io(&input_dir, e))?;
        let items = prepared
            .par_iter()
            .map(|p| {
                let id = &p.record.sample_id;
                let image = input_dir.join(format!("{id}.png"));
                let mask = input_dir.join(format!("{id}_mask.png"));
                save_gray_image(&p.quantized, &image)?;
                save_mask(&p.mask, &mask)?;
                Ok(BatchItem {
                    sample_id: id.clone(),
                    image,
                    mask,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut request = BatchRequest { items };

        for (step, backend) in chain.iter().enumerate() {
            let stage_dir = batch_dir.join(format!("{step:02}-{}", backend.name()));
            let response = backend.reconstruct(&request, &stage_dir)?;
            for (k, out) in response.items.iter().enumerate() {
                backend_digests[k].push((backend.name().to_string(), file_digest(&out.image)?));
            }
            request = BatchRequest {
                items: request
                    .items
                    .iter()
                    .zip(&response.items)
                    .map(|(req, out)| BatchItem {
                        sample_id: req.sample_id.clone(),
                        image: out.image.clone(),
                        mask: req.mask.clone(),
                    })
                    .collect(),
            };
        }
        generated = request
            .items
            .par_iter()
            .map(|item| load_gray_image(&item.image))
            .collect::<Result<_>>()?;
    }

    prepared
        .into_par_iter()
        .zip(generated)
        .zip(backend_digests)
        .map(|((p, gen), digests)| {
            let final_image = pixel_copy_paste(&gen, &p.original, &p.mask)?;
            let bytes = encode_png(&final_image)?;
            let mut record = p.record;
            let image_path = images_out.join(format!("{}.png", record.sample_id));
            fs::write(&image_path, &bytes).map_err(|e| Error::io(&image_path, e))?;
            save_mask(&p.mask, masks_out.join(format!("{}.png", record.sample_id)))?;
            record.output_digest = sha256_hex(&bytes);
            record.backend_digests = digests;
            Ok(record)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageReport {
    pub sample_id: String,
    #[serde(flatten)]
    pub report: MetricReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateReport {
    /// Pooled over all matched pairs.
    #[serde(flatten)]
    pub report: MetricReport,
    /// Mean of per-image IoUs.
    pub mean_iou: f64,
    /// IoU selected by the `per_image_average` option.
    pub headline_iou: f64,
    /// Ids present on only one side, excluded from the scores.
    pub unmatched: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ReportOutcome {
    pub per_image: Vec<ImageReport>,
    pub aggregate: AggregateReport,
    pub sweep: Vec<crate::evaluation::SweepPoint>,
}

fn keyed_rasters(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for p in raster_files(dir)? {
        let key = sample_key(&stem(&p)).to_string();
        if let Some(prev) = out.insert(key.clone(), p.clone()) {
            return Err(Error::config(format!(
                "{} and {} both map to sample `{key}`",
                prev.display(),
                p.display()
            )));
        }
    }
    Ok(out)
}

/// Scores every prediction in `pred_dir` against the ground truth with the
/// same sample id in `gt_dir`.
pub fn report(opts: &MetricOptions, pred_dir: &Path, gt_dir: &Path) -> Result<ReportOutcome> {
    let preds = keyed_rasters(pred_dir)?;
    let gts = keyed_rasters(gt_dir)?;
    let unmatched: Vec<String> = preds
        .keys()
        .filter(|k| !gts.contains_key(*k))
        .chain(gts.keys().filter(|k| !preds.contains_key(*k)))
        .cloned()
        .collect();
    if !unmatched.is_empty() {
        log::warn!("{} sample ids have no counterpart and are excluded", unmatched.len());
    }
    let pairs: Vec<(String, GrayImage, TargetMask)> = preds
        .iter()
        .filter_map(|(k, p)| gts.get(k).map(|g| (k.clone(), p.clone(), g.clone())))
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(k, p, g)| {
            let score = load_gray_image(&p)?;
            let gt = load_mask(&g)?;
            score.ensure_same_dims(gt.dims(), &format!("report `{k}`"))?;
            Ok((k, score, gt))
        })
        .collect::<Result<_>>()?;

    let mopts = opts.match_options();
    let per_image: Vec<ImageReport> = pairs
        .par_iter()
        .map(|(k, score, gt)| {
            let pred = TargetMask::from_threshold(score, opts.threshold);
            Ok(ImageReport {
                sample_id: k.clone(),
                report: evaluate_pair(&pred, gt, &mopts)?,
            })
        })
        .collect::<Result<_>>()?;

    let counts = per_image
        .iter()
        .fold(MetricCounts::default(), |acc, r| acc.merge(&r.report.counts));
    let pooled = MetricReport::from_counts(counts);
    let mean_iou = if per_image.is_empty() {
        pooled.iou
    } else {
        per_image.iter().map(|r| r.report.iou).sum::<f64>() / per_image.len() as f64
    };

    let sweep = if opts.sweep_steps > 0 {
        let thresholds: Vec<f64> = (0..=opts.sweep_steps)
            .map(|k| k as f64 / opts.sweep_steps as f64)
            .collect();
        let owned: Vec<(GrayImage, TargetMask)> = pairs.into_iter().map(|(_, s, g)| (s, g)).collect();
        threshold_sweep(&owned, &thresholds, &mopts)?
    } else {
        Vec::new()
    };

    Ok(ReportOutcome {
        per_image,
        aggregate: AggregateReport {
            headline_iou: if opts.per_image_average { mean_iou } else { pooled.iou },
            report: pooled,
            mean_iou,
            unmatched,
        },
        sweep,
    })
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum ReportLine<'a> {
    Image(&'a ImageReport),
    Aggregate(&'a AggregateReport),
}

/// Writes `report.jsonl`, `report.txt` and, when a sweep was run, `sweep.csv`.
pub fn write_report(outcome: &ReportOutcome, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut jsonl = String::new();
    for r in &outcome.per_image {
        jsonl.push_str(&serde_json::to_string(&ReportLine::Image(r)).map_err(|e| Error::Format(e.to_string()))?);
        jsonl.push('\n');
    }
    jsonl.push_str(
        &serde_json::to_string(&ReportLine::Aggregate(&outcome.aggregate)).map_err(|e| Error::Format(e.to_string()))?,
    );
    jsonl.push('\n');
    let p = out_dir.join("report.jsonl");
    fs::write(&p, jsonl).map_err(|e| Error::io(&p, e))?;

    let p = out_dir.join("report.txt");
    fs::write(&p, render_table(outcome)).map_err(|e| Error::io(&p, e))?;

    if !outcome.sweep.is_empty() {
        let p = out_dir.join("sweep.csv");
        fs::write(&p, sweep_csv(&outcome.sweep)).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

pub fn render_table(outcome: &ReportOutcome) -> String {
    let mut rows: Vec<(String, MetricReport)> = outcome
        .per_image
        .iter()
        .map(|r| (r.sample_id.clone(), r.report))
        .collect();
    rows.push(("ALL (pooled)".to_string(), outcome.aggregate.report));
    let mut text = format_table(&rows);
    let _ = writeln!(
        text,
        "\nmean per-image IoU: {:.4}\nunmatched ids: {}",
        outcome.aggregate.mean_iou,
        outcome.aggregate.unmatched.len()
    );
    text
}
