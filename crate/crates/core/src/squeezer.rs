//! Gaussian group squeezer.
//!
//! An image is squeezed in three steps:
//!
//! 1. draw the interval count `Num` from a rounded, clamped Gaussian;
//! 2. place `Num - 1` inner edges uniformly in `[min(x), max(x))`, sort them and
//!    bracket them with `min(x)` and `max(x) + ε` so that exactly `Num`
//!    half-open intervals cover the data range;
//! 3. draw one replacement value uniformly inside each interval and write it
//!    over every *background* pixel in that interval. Target pixels are left
//!    untouched.
//!
//! `min(x)` and `max(x)` are taken over the whole image, targets included.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::raster::{GrayImage, TargetMask};
use crate::rng::RandomnessContext;

/// Distribution of the interval count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaussianSamplerConfig {
    pub mu: f64,
    /// Standard deviation of the bin count.
    pub sigma: f64,
    pub min_bins: usize,
    pub max_bins: usize,
}

impl Default for GaussianSamplerConfig {
    fn default() -> Self {
        Self {
            mu: 17.0,
            sigma: 4.0,
            min_bins: 2,
            max_bins: 256,
        }
    }
}

impl GaussianSamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.mu.is_finite() {
            return Err(Error::config(format!("sampler mu must be finite, got {}", self.mu)));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::config(format!(
                "sampler sigma must be finite and >= 0, got {}",
                self.sigma
            )));
        }
        if self.min_bins == 0 || self.min_bins > self.max_bins {
            return Err(Error::config(format!(
                "sampler needs 1 <= min_bins <= max_bins, got {}..={}",
                self.min_bins, self.max_bins
            )));
        }
        Ok(())
    }
}

/// `clamp(round(N(mu, sigma)), min_bins, max_bins)`, drawn from the start of `ctx`.
pub fn sample_bin_count(cfg: &GaussianSamplerConfig, ctx: &RandomnessContext) -> Result<usize> {
    cfg.validate()?;
    let raw = if cfg.sigma == 0.0 {
        cfg.mu
    } else {
        let normal = Normal::new(cfg.mu, cfg.sigma).map_err(|e| Error::config(e.to_string()))?;
        normal.sample(&mut ctx.rng())
    };
    let clamped = raw.round().clamp(cfg.min_bins as f64, cfg.max_bins as f64);
    Ok(clamped as usize)
}

/// Sorted interval edges and one replacement value per interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawQuantSpec")]
pub struct QuantSpec {
    edges: Vec<f64>,
    replacements: Vec<f64>,
}

#[derive(Deserialize)]
struct RawQuantSpec {
    edges: Vec<f64>,
    replacements: Vec<f64>,
}

impl TryFrom<RawQuantSpec> for QuantSpec {
    type Error = Error;

    fn try_from(raw: RawQuantSpec) -> Result<Self> {
        QuantSpec::new(raw.edges, raw.replacements)
    }
}

impl QuantSpec {
    /// Validates and wraps a spec: edges strictly increasing, one replacement
    /// per interval, each replacement inside its interval.
    pub fn new(edges: Vec<f64>, replacements: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 {
            return Err(Error::contract("quant spec needs at least two edges"));
        }
        if replacements.len() != edges.len() - 1 {
            return Err(Error::contract(format!(
                "{} edges need {} replacements, got {}",
                edges.len(),
                edges.len() - 1,
                replacements.len()
            )));
        }
        if edges.iter().any(|e| !e.is_finite()) {
            return Err(Error::contract("quant spec edges must be finite"));
        }
        if let Some(i) = edges.windows(2).position(|w| w[0] >= w[1]) {
            return Err(Error::contract(format!(
                "edges not strictly increasing at {i}: {} >= {}",
                edges[i],
                edges[i + 1]
            )));
        }
        for (i, &y) in replacements.iter().enumerate() {
            if !(edges[i] <= y && y < edges[i + 1]) {
                return Err(Error::contract(format!(
                    "replacement {i} = {y} outside [{}, {})",
                    edges[i],
                    edges[i + 1]
                )));
            }
        }
        Ok(Self { edges, replacements })
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn replacements(&self) -> &[f64] {
        &self.replacements
    }

    /// Number of intervals (`Num`).
    pub fn num_intervals(&self) -> usize {
        self.replacements.len()
    }

    /// Index of the half-open interval containing `value`.
    pub fn interval_of(&self, value: f64) -> Option<usize> {
        let last = *self.edges.last()?;
        if !(self.edges[0] <= value && value < last) {
            return None;
        }
        // First edge strictly greater than `value`, minus one.
        Some(self.edges.partition_point(|&e| e <= value) - 1)
    }

    /// SHA-256 over the exact bit patterns of the edges and replacements.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.edges.len() as u64).to_le_bytes());
        for v in self.edges.iter().chain(&self.replacements) {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

fn uniform_half_open(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if lo >= hi {
        return lo;
    }
    let y = rng.random_range(lo..hi);
    if y >= hi {
        lo
    } else {
        y
    }
}

/// Builds a `num`-interval spec over the intensity range of `image`.
///
/// A constant image yields the single interval `[v, v + ε)` with replacement
/// `v`, which makes quantization the identity.
pub fn build_quant_spec(image: &GrayImage, num: usize, ctx: &RandomnessContext) -> Result<QuantSpec> {
    if num == 0 {
        return Err(Error::contract("interval count must be >= 1"));
    }
    let (lo, hi) = image
        .min_max()
        .ok_or_else(|| Error::contract("cannot build a quant spec for an empty image"))?;
    if lo == hi {
        return QuantSpec::new(vec![lo, lo.next_up()], vec![lo]);
    }

    let mut rng = ctx.rng();
    let mut inner: Vec<f64> = (0..num - 1).map(|_| uniform_half_open(&mut rng, lo, hi)).collect();
    inner.sort_by(f64::total_cmp);

    let mut edges = Vec::with_capacity(num + 1);
    edges.push(lo);
    edges.extend(inner);
    // Nudge duplicates (including draws equal to `lo`) up by one ulp.
    for i in 1..edges.len() {
        if edges[i] <= edges[i - 1] {
            edges[i] = edges[i - 1].next_up();
        }
    }
    let top = hi.next_up().max(edges[edges.len() - 1].next_up());
    edges.push(top);

    let replacements = edges
        .windows(2)
        .map(|w| uniform_half_open(&mut rng, w[0], w[1]))
        .collect();
    QuantSpec::new(edges, replacements)
}

/// Replaces every background pixel by its interval's replacement value.
pub fn apply_quantization(image: &GrayImage, mask: &TargetMask, spec: &QuantSpec) -> Result<GrayImage> {
    mask.ensure_same_dims(image.dims(), "apply_quantization")?;
    let mut out = Vec::with_capacity(image.len());
    for (i, (&v, &is_target)) in image.pixels().iter().zip(mask.bits()).enumerate() {
        if is_target {
            out.push(v);
            continue;
        }
        let k = spec.interval_of(v).ok_or_else(|| {
            Error::contract(format!(
                "pixel {i} = {v} lies outside the spec range [{}, {}); stale spec?",
                spec.edges[0],
                spec.edges[spec.edges.len() - 1]
            ))
        })?;
        out.push(spec.replacements[k]);
    }
    GrayImage::new(image.width(), image.height(), out)
}

/// `generated` where the mask is clear, `original` where it is set.
pub fn pixel_copy_paste(generated: &GrayImage, original: &GrayImage, mask: &TargetMask) -> Result<GrayImage> {
    generated.ensure_same_dims(original.dims(), "pixel_copy_paste")?;
    mask.ensure_same_dims(generated.dims(), "pixel_copy_paste")?;
    let pixels = generated
        .pixels()
        .iter()
        .zip(original.pixels())
        .zip(mask.bits())
        .map(|((&g, &o), &m)| if m { o } else { g })
        .collect();
    GrayImage::new(generated.width(), generated.height(), pixels)
}

/// Result of one full squeeze.
#[derive(Debug, Clone)]
pub struct Squeezed {
    pub num: usize,
    pub spec: QuantSpec,
    pub bins_stream: RandomnessContext,
    pub spec_stream: RandomnessContext,
    pub image: GrayImage,
}

/// Draws `Num`, builds the spec and quantizes the background, using the
/// `bins` and `spec` sub-streams of `ctx`.
pub fn squeeze(
    image: &GrayImage,
    mask: &TargetMask,
    cfg: &GaussianSamplerConfig,
    ctx: &RandomnessContext,
) -> Result<Squeezed> {
    let bins_stream = ctx.child("bins", 0);
    let spec_stream = ctx.child("spec", 0);
    let num = sample_bin_count(cfg, &bins_stream)?;
    let spec = build_quant_spec(image, num, &spec_stream)?;
    let quantized = apply_quantization(image, mask, &spec)?;
    Ok(Squeezed {
        num,
        spec,
        bins_stream,
        spec_stream,
        image: quantized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_stream;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn cfg(mu: f64, sigma: f64, min_bins: usize, max_bins: usize) -> GaussianSamplerConfig {
        GaussianSamplerConfig {
            mu,
            sigma,
            min_bins,
            max_bins,
        }
    }

    #[test]
    fn degenerate_gaussian() {
        for i in 0..20 {
            let ctx = derive_stream(1, "bins", i);
            assert_eq!(sample_bin_count(&cfg(5.0, 0.0, 2, 256), &ctx).unwrap(), 5);
            assert_eq!(sample_bin_count(&cfg(1.0, 0.0, 2, 256), &ctx).unwrap(), 2);
        }
    }

    #[test]
    fn clamps_tails() {
        for i in 0..200 {
            let ctx = derive_stream(9, "bins", i);
            let n = sample_bin_count(&cfg(0.0, 100.0, 3, 10), &ctx).unwrap();
            assert!((3..=10).contains(&n));
        }
    }

    #[test]
    fn rejects_invalid_config() {
        let ctx = derive_stream(0, "x", 0);
        assert!(sample_bin_count(&cfg(17.0, -1.0, 2, 256), &ctx).is_err());
        assert!(sample_bin_count(&cfg(17.0, 4.0, 0, 256), &ctx).is_err());
        assert!(sample_bin_count(&cfg(17.0, 4.0, 9, 8), &ctx).is_err());
    }

    #[test]
    fn default_moments() {
        let c = GaussianSamplerConfig::default();
        let draws: Vec<f64> = (0..10_000)
            .map(|i| sample_bin_count(&c, &derive_stream(2024, "bins", i)).unwrap() as f64)
            .collect();
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let sd = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((16.6..=17.4).contains(&mean), "mean {mean}");
        assert!((3.6..=4.4).contains(&sd), "sd {sd}");
    }

    #[test]
    fn single_interval_covers_range() {
        let img = GrayImage::new(2, 2, vec![0.2, 0.4, 0.6, 0.8]).unwrap();
        let spec = build_quant_spec(&img, 1, &derive_stream(0, "s", 0)).unwrap();
        assert_eq!(spec.edges()[0], 0.2);
        assert_eq!(spec.edges()[1], 0.8f64.next_up());
        assert!((0.2..=0.8).contains(&spec.replacements()[0]));
        let out = apply_quantization(&img, &TargetMask::empty(2, 2), &spec).unwrap();
        assert!(out.pixels().iter().all(|&v| v == spec.replacements()[0]));
    }

    #[test]
    fn constant_image_is_identity() {
        let img = GrayImage::filled(3, 3, 0.5).unwrap();
        let spec = build_quant_spec(&img, 17, &derive_stream(0, "s", 0)).unwrap();
        assert_eq!(spec.num_intervals(), 1);
        let out = apply_quantization(&img, &TargetMask::empty(3, 3), &spec).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn three_intervals_postconditions() {
        let img = GrayImage::from_fn(8, 8, |r, c| (r * 8 + c) as f64 / 63.0).unwrap();
        for i in 0..1000 {
            let spec = build_quant_spec(&img, 3, &derive_stream(5, "spec", i)).unwrap();
            let e = spec.edges();
            assert_eq!(e.len(), 4);
            assert!(e.windows(2).all(|w| w[0] < w[1]));
            assert_eq!(e[0], 0.0);
            assert_eq!(e[3], 1.0f64.next_up());
            for (k, &y) in spec.replacements().iter().enumerate() {
                assert!(e[k] <= y && y < e[k + 1]);
            }
        }
    }

    #[test]
    fn hand_evaluated_example() {
        let img = GrayImage::new(2, 2, vec![0.1, 0.4, 0.6, 0.9]).unwrap();
        let mask = TargetMask::new(2, 2, vec![false, false, false, true]).unwrap();
        let spec = QuantSpec::new(vec![0.1, 0.5, 0.9f64.next_up()], vec![0.3, 0.7]).unwrap();
        let out = apply_quantization(&img, &mask, &spec).unwrap();
        assert_eq!(out.pixels(), &[0.3, 0.3, 0.7, 0.9]);
    }

    #[test]
    fn full_mask_is_identity() {
        let img = GrayImage::from_fn(4, 3, |r, c| (r + c) as f64 / 10.0).unwrap();
        let spec = build_quant_spec(&img, 4, &derive_stream(0, "s", 1)).unwrap();
        let out = apply_quantization(&img, &TargetMask::full(4, 3), &spec).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn stale_spec_rejected() {
        let spec = QuantSpec::new(vec![0.2, 0.5], vec![0.3]).unwrap();
        let img = GrayImage::new(2, 1, vec![0.3, 0.9]).unwrap();
        let err = apply_quantization(&img, &TargetMask::empty(2, 1), &spec).unwrap_err();
        assert_eq!(err.category(), "contract");
        // The same pixel under a target is not looked up.
        let mask = TargetMask::new(2, 1, vec![false, true]).unwrap();
        assert!(apply_quantization(&img, &mask, &spec).is_ok());
    }

    #[test]
    fn spec_validation() {
        assert!(QuantSpec::new(vec![0.0], vec![]).is_err());
        assert!(QuantSpec::new(vec![0.0, 0.0], vec![0.0]).is_err());
        assert!(QuantSpec::new(vec![0.0, 1.0], vec![1.0]).is_err());
        assert!(QuantSpec::new(vec![0.0, 1.0], vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn interval_lookup_boundaries() {
        let spec = QuantSpec::new(vec![0.0, 0.25, 0.5, 1.0], vec![0.1, 0.3, 0.6]).unwrap();
        assert_eq!(spec.interval_of(0.0), Some(0));
        assert_eq!(spec.interval_of(0.25), Some(1));
        assert_eq!(spec.interval_of(0.4999), Some(1));
        assert_eq!(spec.interval_of(0.5), Some(2));
        assert_eq!(spec.interval_of(1.0), None);
        assert_eq!(spec.interval_of(-0.1), None);
    }

    #[test]
    fn copy_paste_cases() {
        let g = GrayImage::filled(4, 4, 0.2).unwrap();
        let o = GrayImage::filled(4, 4, 0.8).unwrap();
        assert_eq!(pixel_copy_paste(&g, &o, &TargetMask::empty(4, 4)).unwrap(), g);
        assert_eq!(pixel_copy_paste(&g, &o, &TargetMask::full(4, 4)).unwrap(), o);
        let checker = TargetMask::from_fn(4, 4, |r, c| (r + c) % 2 == 1);
        let out = pixel_copy_paste(&g, &o, &checker).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let want = if (r + c) % 2 == 1 { 0.8 } else { 0.2 };
                assert_eq!(out.get(r, c), want);
            }
        }
        let small = GrayImage::filled(3, 4, 0.0).unwrap();
        assert!(pixel_copy_paste(&small, &o, &TargetMask::empty(4, 4)).is_err());
        assert!(pixel_copy_paste(&g, &o, &TargetMask::empty(4, 3)).is_err());
    }

    #[test]
    fn digest_is_stable_through_serde() {
        let img = GrayImage::from_fn(5, 5, |r, c| ((r * 7 + c * 3) % 11) as f64 / 10.0).unwrap();
        let spec = build_quant_spec(&img, 6, &derive_stream(11, "spec", 0)).unwrap();
        let json = serde_json::to_string(&spec).unwrap();
        let back: QuantSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back.digest(), spec.digest());
        assert!(serde_json::from_str::<QuantSpec>(r#"{"edges":[0.5,0.1],"replacements":[0.2]}"#).is_err());
    }

    #[test]
    fn cross_peak_streams_differ() {
        let img = GrayImage::from_fn(6, 6, |r, c| (r * 6 + c) as f64 / 35.0).unwrap();
        let mask = TargetMask::empty(6, 6);
        let c = GaussianSamplerConfig::default();
        let mut same = 0;
        for i in 0..200 {
            let a = squeeze(&img, &mask, &c, &derive_stream(77, "train", i)).unwrap();
            let b = squeeze(&img, &mask, &c, &derive_stream(77, "infer", i)).unwrap();
            if a.spec == b.spec {
                same += 1;
            }
        }
        assert_eq!(same, 0);
    }

    fn scene() -> impl Strategy<Value = (GrayImage, TargetMask, usize, u64)> {
        (1usize..8, 1usize..8).prop_flat_map(|(w, h)| {
            (
                prop::collection::vec(0u8..=255, w * h),
                prop::collection::vec(prop::bool::weighted(0.2), w * h),
                1usize..40,
                any::<u64>(),
            )
                .prop_map(move |(px, bits, num, seed)| {
                    (
                        GrayImage::from_u8(w, h, &px).unwrap(),
                        TargetMask::new(w, h, bits).unwrap(),
                        num,
                        seed,
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn squeeze_invariants((img, mask, num, seed) in scene()) {
            let spec = build_quant_spec(&img, num, &derive_stream(seed, "spec", 0)).unwrap();
            let out = apply_quantization(&img, &mask, &spec).unwrap();
            let mut background = BTreeSet::new();
            for i in 0..img.len() {
                let (x, y) = (img.pixels()[i], out.pixels()[i]);
                if mask.bits()[i] {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                } else {
                    let k = spec.interval_of(x).unwrap();
                    prop_assert_eq!(y, spec.replacements()[k]);
                    background.insert(y.to_bits());
                }
            }
            prop_assert!(background.len() <= spec.num_intervals());
            prop_assert!(spec.num_intervals() <= num);
        }
    }
}
