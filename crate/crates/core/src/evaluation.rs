//! Detection metrics.
//!
//! Pixel-level IoU/precision/recall/F1 come from TP/FP/FN counts. Target-level
//! Pd and Fa work on connected components: a ground-truth target counts as
//! detected when a predicted component overlaps it or has its centroid within
//! `match_radius` pixels, each predicted component matching at most one target
//! (greedy by centroid distance). Pixels of unmatched predicted components are
//! false alarms; Fa is their share of all image pixels, reported per 10⁶.

use std::collections::VecDeque;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{GrayImage, TargetMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            other => Err(format!("connectivity must be 4 or 8, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
        }
    }
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (0, -1), (0, 1), (1, 0)],
            Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    /// `(row, col)` pixels in raster order.
    pub pixels: Vec<(usize, usize)>,
    /// Mean `(row, col)`.
    pub centroid: (f64, f64),
}

impl Component {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }
}

/// Components ordered by their first pixel in raster order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ComponentSet {
    pub components: Vec<Component>,
    /// Per-pixel component index, `None` for background.
    pub labels: Vec<Option<usize>>,
}

impl ComponentSet {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }
}

pub fn connected_components(mask: &TargetMask, connectivity: Connectivity) -> ComponentSet {
    let (w, h) = mask.dims();
    let mut labels: Vec<Option<usize>> = vec![None; w * h];
    let mut components = Vec::new();
    let mut queue = VecDeque::new();

    for start in 0..w * h {
        if !mask.bits()[start] || labels[start].is_some() {
            continue;
        }
        let id = components.len();
        labels[start] = Some(id);
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(p) = queue.pop_front() {
            let (r, c) = (p / w, p % w);
            pixels.push((r, c));
            for &(dr, dc) in connectivity.offsets() {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let q = nr as usize * w + nc as usize;
                if mask.bits()[q] && labels[q].is_none() {
                    labels[q] = Some(id);
                    queue.push_back(q);
                }
            }
        }
        pixels.sort_unstable();
        let n = pixels.len() as f64;
        let (sr, sc) = pixels
            .iter()
            .fold((0.0, 0.0), |(a, b), &(r, c)| (a + r as f64, b + c as f64));
        components.push(Component {
            pixels,
            centroid: (sr / n, sc / n),
        });
    }
    ComponentSet { components, labels }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelMetrics {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Both masks were empty; all scores are 1 by convention.
    pub vacuous: bool,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl PixelMetrics {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        if tp + fp + fn_ == 0 {
            return Self {
                tp,
                fp,
                fn_,
                iou: 1.0,
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
                vacuous: true,
            };
        }
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            tp,
            fp,
            fn_,
            iou: ratio(tp, tp + fp + fn_),
            precision,
            recall,
            f1,
            vacuous: false,
        }
    }
}

pub fn pixel_metrics(pred: &TargetMask, gt: &TargetMask) -> Result<PixelMetrics> {
    pred.ensure_same_dims(gt.dims(), "pixel_metrics")?;
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(PixelMetrics::from_counts(tp, fp, fn_))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchOptions {
    pub connectivity: Connectivity,
    /// Centroid distance, in pixels, under which a prediction detects a target.
    pub match_radius: f64,
}

impl Default for MatchOptions {
    fn default() -> Self {
        Self {
            connectivity: Connectivity::Eight,
            match_radius: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetMetrics {
    pub detected: u64,
    pub total_targets: u64,
    pub predicted_components: u64,
    pub false_alarm_components: u64,
    pub false_alarm_pixels: u64,
    pub total_pixels: u64,
    pub pd: f64,
    /// False-alarm pixels over total pixels.
    pub fa: f64,
    /// No ground-truth targets; `pd` is reported as 1.
    pub no_targets: bool,
}

impl TargetMetrics {
    pub fn fa_per_million(&self) -> f64 {
        self.fa * 1e6
    }

    pub fn fa_per_thousand(&self) -> f64 {
        self.fa * 1e3
    }
}

fn overlaps(a: &Component, labels: &[Option<usize>], width: usize, id: usize) -> bool {
    a.pixels.iter().any(|&(r, c)| labels[r * width + c] == Some(id))
}

pub fn target_metrics(pred: &TargetMask, gt: &TargetMask, opts: &MatchOptions) -> Result<TargetMetrics> {
    pred.ensure_same_dims(gt.dims(), "target_metrics")?;
    let width = gt.width();
    let gts = connected_components(gt, opts.connectivity);
    let preds = connected_components(pred, opts.connectivity);

    let mut candidates = Vec::new();
    for (gi, g) in gts.components.iter().enumerate() {
        for (pi, p) in preds.components.iter().enumerate() {
            let d = ((g.centroid.0 - p.centroid.0).powi(2) + (g.centroid.1 - p.centroid.1).powi(2)).sqrt();
            if d <= opts.match_radius || overlaps(p, &gts.labels, width, gi) {
                candidates.push((d, gi, pi));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut gt_hit = vec![false; gts.len()];
    let mut pred_hit = vec![false; preds.len()];
    for (_, gi, pi) in candidates {
        if !gt_hit[gi] && !pred_hit[pi] {
            gt_hit[gi] = true;
            pred_hit[pi] = true;
        }
    }

    let detected = gt_hit.iter().filter(|&&h| h).count() as u64;
    let (mut fa_comp, mut fa_px) = (0u64, 0u64);
    for (p, hit) in preds.components.iter().zip(&pred_hit) {
        if !hit {
            fa_comp += 1;
            fa_px += p.area() as u64;
        }
    }
    let total_targets = gts.len() as u64;
    let total_pixels = gt.len() as u64;
    Ok(TargetMetrics {
        detected,
        total_targets,
        predicted_components: preds.len() as u64,
        false_alarm_components: fa_comp,
        false_alarm_pixels: fa_px,
        total_pixels,
        pd: if total_targets == 0 {
            1.0
        } else {
            ratio(detected, total_targets)
        },
        fa: ratio(fa_px, total_pixels),
        no_targets: total_targets == 0,
    })
}

/// Additive counts behind a [`MetricReport`]; merging is associative and
/// commutative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MetricCounts {
    pub images: u64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub detected: u64,
    pub total_targets: u64,
    pub false_alarm_components: u64,
    pub false_alarm_pixels: u64,
    pub total_pixels: u64,
}

impl MetricCounts {
    pub fn merge(&self, other: &MetricCounts) -> MetricCounts {
        MetricCounts {
            images: self.images + other.images,
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            detected: self.detected + other.detected,
            total_targets: self.total_targets + other.total_targets,
            false_alarm_components: self.false_alarm_components + other.false_alarm_components,
            false_alarm_pixels: self.false_alarm_pixels + other.false_alarm_pixels,
            total_pixels: self.total_pixels + other.total_pixels,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub pd: f64,
    pub fa: f64,
    pub fa_e6: f64,
    pub fa_e3: f64,
    pub counts: MetricCounts,
    /// Empty prediction and empty ground truth everywhere.
    pub vacuous_pixels: bool,
    pub no_targets: bool,
}

impl MetricReport {
    /// Pools counts: IoU is global TP/(TP+FP+FN), not a mean of per-image IoUs.
    pub fn from_counts(counts: MetricCounts) -> Self {
        let px = PixelMetrics::from_counts(counts.tp, counts.fp, counts.fn_);
        let fa = ratio(counts.false_alarm_pixels, counts.total_pixels);
        Self {
            iou: px.iou,
            precision: px.precision,
            recall: px.recall,
            f1: px.f1,
            pd: if counts.total_targets == 0 {
                1.0
            } else {
                ratio(counts.detected, counts.total_targets)
            },
            fa,
            fa_e6: fa * 1e6,
            fa_e3: fa * 1e3,
            counts,
            vacuous_pixels: px.vacuous,
            no_targets: counts.total_targets == 0,
        }
    }
}

/// Scores one prediction against its ground truth.
pub fn evaluate_pair(pred: &TargetMask, gt: &TargetMask, opts: &MatchOptions) -> Result<MetricReport> {
    let px = pixel_metrics(pred, gt)?;
    let tm = target_metrics(pred, gt, opts)?;
    Ok(MetricReport::from_counts(MetricCounts {
        images: 1,
        tp: px.tp,
        fp: px.fp,
        fn_: px.fn_,
        detected: tm.detected,
        total_targets: tm.total_targets,
        false_alarm_components: tm.false_alarm_components,
        false_alarm_pixels: tm.false_alarm_pixels,
        total_pixels: tm.total_pixels,
    }))
}

/// `1 - (Σ p·l + a) / (Σ p + Σ l - Σ p·l + a)` for a score map `p` in `[0, 1]`.
pub fn soft_iou_loss(pred: &GrayImage, label: &TargetMask, smooth: f64) -> Result<f64> {
    label.ensure_same_dims(pred.dims(), "soft_iou_loss")?;
    if !(smooth > 0.0 && smooth.is_finite()) {
        return Err(Error::contract(format!("smoothing term must be > 0, got {smooth}")));
    }
    let (mut inter, mut sum_p, mut sum_l) = (0.0, 0.0, 0.0);
    for (&p, &l) in pred.pixels().iter().zip(label.bits()) {
        let l = if l { 1.0 } else { 0.0 };
        inter += p * l;
        sum_p += p;
        sum_l += l;
    }
    Ok(1.0 - (inter + smooth) / (sum_p + sum_l - inter + smooth))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScrResult {
    /// Mean over targets; `+inf` when any target's ring has zero spread and a
    /// different mean.
    pub value: f64,
    pub per_target: Vec<f64>,
    /// Some ring had (numerically) zero standard deviation.
    pub degenerate: bool,
}

/// Signal-to-clutter ratio `(μ_t - μ_b) / σ_b`, with the background taken from
/// a ring of width `bg_ring` (Chebyshev distance) around each target component,
/// excluding all target pixels. `σ_b` is the population standard deviation.
pub fn compute_scr(
    image: &GrayImage,
    mask: &TargetMask,
    bg_ring: usize,
    connectivity: Connectivity,
) -> Result<ScrResult> {
    mask.ensure_same_dims(image.dims(), "compute_scr")?;
    if bg_ring == 0 {
        return Err(Error::contract("background ring width must be >= 1"));
    }
    let (w, h) = image.dims();
    let comps = connected_components(mask, connectivity);
    if comps.is_empty() {
        return Err(Error::contract("SCR needs at least one target pixel"));
    }

    let mut per_target = Vec::with_capacity(comps.len());
    let mut degenerate = false;
    for comp in &comps.components {
        let mut in_ring = vec![false; w * h];
        for &(r, c) in &comp.pixels {
            let (r0, r1) = (r.saturating_sub(bg_ring), (r + bg_ring).min(h - 1));
            let (c0, c1) = (c.saturating_sub(bg_ring), (c + bg_ring).min(w - 1));
            for rr in r0..=r1 {
                for cc in c0..=c1 {
                    let i = rr * w + cc;
                    if !mask.bits()[i] {
                        in_ring[i] = true;
                    }
                }
            }
        }
        let ring: Vec<f64> = in_ring
            .iter()
            .zip(image.pixels())
            .filter_map(|(&m, &v)| m.then_some(v))
            .collect();
        if ring.is_empty() {
            return Err(Error::contract(format!(
                "target at {:?} has an empty background ring",
                comp.centroid
            )));
        }
        let mean_t = comp.pixels.iter().map(|&(r, c)| image.get(r, c)).sum::<f64>() / comp.area() as f64;
        let mean_b = ring.iter().sum::<f64>() / ring.len() as f64;
        let std_b = (ring.iter().map(|v| (v - mean_b).powi(2)).sum::<f64>() / ring.len() as f64).sqrt();
        let diff = mean_t - mean_b;
        // Rounding in the mean leaves ~1e-17 spread on a flat ring.
        let scr = if std_b > 1e-12 {
            diff / std_b
        } else {
            degenerate = true;
            if diff == 0.0 {
                0.0
            } else {
                diff.signum() * f64::INFINITY
            }
        };
        per_target.push(scr);
    }
    let value = per_target.iter().sum::<f64>() / per_target.len() as f64;
    Ok(ScrResult {
        value: if value.is_nan() { f64::INFINITY } else { value },
        per_target,
        degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub pd: f64,
    pub fa: f64,
}

/// Pooled Pd/Fa over `(score map, ground truth)` pairs for each threshold.
/// A pixel is predicted when its score is strictly above the threshold.
pub fn threshold_sweep(
    pairs: &[(GrayImage, TargetMask)],
    thresholds: &[f64],
    opts: &MatchOptions,
) -> Result<Vec<SweepPoint>> {
    thresholds
        .iter()
        .map(|&thr| {
            let mut counts = MetricCounts::default();
            for (score, gt) in pairs {
                let pred = TargetMask::from_threshold(score, thr);
                counts = counts.merge(&evaluate_pair(&pred, gt, opts)?.counts);
            }
            let r = MetricReport::from_counts(counts);
            Ok(SweepPoint {
                threshold: thr,
                pd: r.pd,
                fa: r.fa,
            })
        })
        .collect()
}

/// `threshold,pd,fa_e6` rows with a header line.
pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("threshold,pd,fa_e6\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", p.threshold, p.pd, p.fa * 1e6);
    }
    out
}

/// Plain-text table of named reports.
pub fn format_table(rows: &[(String, MetricReport)]) -> String {
    let name_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(4).max(6);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<name_w$}  {:>8} {:>8} {:>8} {:>8} {:>8} {:>10} {:>10}",
        "sample", "IoU", "Prec", "Recall", "F1", "Pd", "Fa(e-6)", "Fa(e-3)"
    );
    for (name, r) in rows {
        let _ = writeln!(
            out,
            "{:<name_w$}  {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>10.2} {:>10.4}",
            name, r.iou, r.precision, r.recall, r.f1, r.pd, r.fa_e6, r.fa_e3
        );
    }
    out
}
