mod common;

use std::fs;
use std::path::Path;

use irsqueeze::backends::BackendDescriptor;
use irsqueeze::manifest::{read_manifest, read_records, ManifestLine};
use irsqueeze::pipeline::{
    ingest, report, run_augment, write_report, AugmentOptions, MetricOptions, PipelineConfig, Stage,
};
use irsqueeze::raster::{file_digest, load_gray_image, load_mask, save_mask, GrayImage, TargetMask};
use irsqueeze::squeezer::apply_quantization;

use common::{copy_backend, write_dataset, write_script};

fn config(root: &Path, out: &str) -> PipelineConfig {
    PipelineConfig {
        dataset_root: root.join("data"),
        output_root: root.join(out),
        seed: 42,
        batch_size: 4,
        ..Default::default()
    }
}

fn setup(count: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&dir.path().join("data"), count, 11);
    dir
}

#[test]
fn ingest_pairs_by_stem_and_suffix() {
    let dir = setup(3);
    let data = dir.path().join("data");
    fs::rename(data.join("masks/img_001.png"), data.join("masks/img_001_pixels0.png")).unwrap();
    fs::rename(data.join("masks/img_002.png"), data.join("masks/img_002_mask.png")).unwrap();
    let idx = ingest(&data, "images", "masks").unwrap();
    assert_eq!(idx.ids(), ["img_000", "img_001", "img_002"]);
    idx.check_pairs().unwrap();

    fs::remove_file(data.join("masks/img_002_mask.png")).unwrap();
    assert_eq!(ingest(&data, "images", "masks").unwrap_err().category(), "config");
}

#[test]
fn mismatched_pair_dimensions_are_caught() {
    let dir = setup(2);
    let data = dir.path().join("data");
    save_mask(&TargetMask::empty(5, 5), data.join("masks/img_001.png")).unwrap();
    let idx = ingest(&data, "images", "masks").unwrap();
    assert_eq!(idx.check_pairs().unwrap_err().category(), "contract");
}

#[test]
fn empty_chain_output_is_the_quantized_image() {
    let dir = setup(6);
    let cfg = config(dir.path(), "out");
    let summary = run_augment(&cfg, &AugmentOptions::default()).unwrap();
    assert_eq!(summary.records.len(), 6);
    for r in &summary.records {
        assert_eq!(r.backend_name, "none");
        assert!(r.verify_digest());
        let src = cfg.dataset_root.join(format!("images/{}.png", r.source_id));
        let mask = load_mask(cfg.dataset_root.join(format!("masks/{}.png", r.source_id))).unwrap();
        let original = load_gray_image(&src).unwrap();
        let expected = apply_quantization(&original, &mask, &r.quant_spec).unwrap();
        let got = load_gray_image(cfg.output_root.join(&r.output_path)).unwrap();
        assert_eq!(got.to_u8(), expected.to_u8());
        assert_eq!(load_mask(cfg.output_root.join(&r.mask_path)).unwrap(), mask);
        assert_eq!(
            file_digest(cfg.output_root.join(&r.output_path)).unwrap(),
            r.output_digest
        );
    }
    assert!(!cfg.output_root.join("work").exists());
}

#[test]
fn targets_survive_every_chain() {
    let dir = setup(5);
    let tmp = dir.path().to_path_buf();
    let script = copy_backend(&tmp);
    let chains: Vec<(Vec<String>, &str)> = vec![
        (vec!["identity".into()], "o_identity"),
        (vec!["smooth".into()], "o_smooth"),
        (vec!["copy".into(), "smooth".into()], "o_chain"),
    ];
    for (chain, out) in chains {
        let mut cfg = config(&tmp, out);
        cfg.backends = vec![BackendDescriptor::external(
            "copy",
            vec![script.display().to_string()],
            Some(30),
        )];
        cfg.chain = chain.clone();
        let summary = run_augment(&cfg, &AugmentOptions::default()).unwrap();
        for r in &summary.records {
            assert_eq!(r.backend_name, chain.join("+"));
            assert_eq!(r.backend_digests.len(), chain.len());
            let original = load_gray_image(cfg.dataset_root.join(format!("images/{}.png", r.source_id))).unwrap();
            let mask = load_mask(cfg.dataset_root.join(format!("masks/{}.png", r.source_id))).unwrap();
            let got = load_gray_image(cfg.output_root.join(&r.output_path)).unwrap();
            for (k, &m) in mask.bits().iter().enumerate() {
                if m {
                    assert_eq!(got.pixels()[k].to_bits(), original.pixels()[k].to_bits());
                }
            }
        }
    }
}

#[test]
fn identity_and_external_copy_match_the_empty_chain() {
    let dir = setup(5);
    let tmp = dir.path().to_path_buf();
    let script = copy_backend(&tmp);
    let mut digests = Vec::new();
    for (chain, out) in [
        (vec![], "a"),
        (vec!["identity".to_string()], "b"),
        (vec!["copy".to_string()], "c"),
    ] {
        let mut cfg = config(&tmp, out);
        cfg.backends = vec![BackendDescriptor::external(
            "copy",
            vec![script.display().to_string()],
            None,
        )];
        cfg.chain = chain;
        let recs = run_augment(&cfg, &AugmentOptions::default()).unwrap().records;
        digests.push(recs.into_iter().map(|r| r.output_digest).collect::<Vec<_>>());
    }
    assert_eq!(digests[0], digests[1]);
    assert_eq!(digests[0], digests[2]);
}

#[test]
fn split_and_passes_set_the_sample_count() {
    let dir = setup(20);
    let mut cfg = config(dir.path(), "out");
    cfg.ratio = 0.3;
    let one = run_augment(&cfg, &AugmentOptions::default()).unwrap().records;
    assert_eq!(one.len(), 6);

    cfg.passes = 2;
    cfg.output_root = dir.path().join("out2");
    let two = run_augment(&cfg, &AugmentOptions::default()).unwrap().records;
    assert_eq!(two.len(), 12);
    assert!(two.iter().any(|r| r.sample_id.ends_with("_gen1")));
    // Pass 0 is unchanged by adding a second pass.
    let first: Vec<_> = two.iter().filter(|r| r.pass == 0).map(|r| &r.output_digest).collect();
    assert_eq!(first, one.iter().map(|r| &r.output_digest).collect::<Vec<_>>());
    // Different passes draw different specs.
    let by_pass = |p: u32| {
        two.iter()
            .filter(|r| r.pass == p)
            .map(|r| r.quant_spec_digest.clone())
            .collect::<Vec<_>>()
    };
    assert_ne!(by_pass(0), by_pass(1));
}

#[test]
fn stages_use_distinct_streams() {
    let dir = setup(4);
    let infer = run_augment(&config(dir.path(), "i"), &AugmentOptions::default())
        .unwrap()
        .records;
    let mut cfg = config(dir.path(), "t");
    cfg.stage = Stage::Train;
    let train = run_augment(&cfg, &AugmentOptions::default()).unwrap().records;
    for (a, b) in infer.iter().zip(&train) {
        assert_eq!(a.stage, "infer");
        assert_eq!(b.stage, "train");
        assert_ne!(a.stage_seeds, b.stage_seeds);
        assert_ne!(a.quant_spec_digest, b.quant_spec_digest);
    }
}

#[test]
fn rerun_is_byte_identical() {
    let dir = setup(8);
    let a = config(dir.path(), "a");
    let b = config(dir.path(), "b");
    run_augment(&a, &AugmentOptions::default()).unwrap();
    run_augment(&b, &AugmentOptions::default()).unwrap();
    let read = |c: &PipelineConfig| fs::read(c.output_root.join("manifest.jsonl")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn backend_failure_writes_partial_marker_and_resume_completes() {
    let dir = setup(6);
    let tmp = dir.path().to_path_buf();
    let flag = tmp.join("fail_now");
    // Fails while the flag file exists, otherwise copies.
    let script = write_script(
        &tmp,
        "flaky.sh",
        &format!(
            "if [ -e {} ]; then echo 'flaky failure' >&2; exit 9; fi\n{}\ntab=$(printf '\\t')\n\
             while IFS=\"$tab\" read -r id img mask; do cp \"$in/$img\" \"$out/$id.png\"; done < \"$man\"\n",
            flag.display(),
            common::PARSE_ARGS
        ),
    );
    let mut cfg = config(&tmp, "out");
    cfg.backends = vec![BackendDescriptor::external(
        "flaky",
        vec![script.display().to_string()],
        None,
    )];
    cfg.chain = vec!["flaky".into()];
    let manifest = cfg.output_root.join("manifest.jsonl");

    fs::write(&flag, "").unwrap();
    let err = run_augment(&cfg, &AugmentOptions::default()).unwrap_err();
    assert_eq!(err.category(), "backend");
    let lines = read_manifest(&manifest).unwrap();
    assert_eq!(lines.len(), 1);
    match &lines[0] {
        ManifestLine::Partial(p) => {
            assert_eq!(p.category, "backend");
            assert_eq!(p.failed_samples.len(), 4);
            assert!(p.error.contains("flaky failure"));
        }
        other => panic!("expected a partial marker, got {other:?}"),
    }

    fs::remove_file(&flag).unwrap();
    let summary = run_augment(
        &cfg,
        &AugmentOptions {
            resume: true,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(summary.resumed, 0);
    assert_eq!(read_records(&manifest).unwrap().len(), 6);

    // Drop the last two records and resume: the result matches a clean run.
    let full = fs::read_to_string(&manifest).unwrap();
    let kept: Vec<&str> = full.lines().take(4).collect();
    fs::write(&manifest, kept.join("\n") + "\n").unwrap();
    let summary = run_augment(
        &cfg,
        &AugmentOptions {
            resume: true,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(summary.resumed, 4);
    assert_eq!(fs::read_to_string(&manifest).unwrap(), full);
}

fn write_pair(dir: &Path, name: &str, gt: &TargetMask, pred: &TargetMask) {
    fs::create_dir_all(dir.join("gt")).unwrap();
    fs::create_dir_all(dir.join("pred")).unwrap();
    save_mask(gt, dir.join(format!("gt/{name}.png"))).unwrap();
    save_mask(pred, dir.join(format!("pred/{name}.png"))).unwrap();
}

fn square(w: usize, r0: usize, c0: usize, size: usize) -> TargetMask {
    TargetMask::from_fn(w, w, |r, c| r >= r0 && r < r0 + size && c >= c0 && c < c0 + size)
}

#[test]
fn report_pools_counts_instead_of_averaging() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // a: 9 of 9 hit. b: 1 of 4 hit.
    write_pair(d, "a", &square(10, 2, 2, 3), &square(10, 2, 2, 3));
    write_pair(d, "b", &square(10, 5, 5, 2), &square(10, 5, 5, 1));
    let out = report(&MetricOptions::default(), &d.join("pred"), &d.join("gt")).unwrap();
    let agg = &out.aggregate;
    assert_eq!(
        (agg.report.counts.tp, agg.report.counts.fp, agg.report.counts.fn_),
        (10, 0, 3)
    );
    assert!((agg.report.iou - 10.0 / 13.0).abs() < 1e-15);
    assert!((agg.mean_iou - 0.625).abs() < 1e-15);
    assert_eq!(agg.headline_iou, agg.report.iou);
    let averaged = report(
        &MetricOptions {
            per_image_average: true,
            ..Default::default()
        },
        &d.join("pred"),
        &d.join("gt"),
    )
    .unwrap();
    assert!((averaged.aggregate.headline_iou - 0.625).abs() < 1e-15);
}

#[test]
fn perfect_and_empty_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_pair(d, "x", &square(12, 1, 1, 2), &square(12, 1, 1, 2));
    write_pair(d, "y", &square(12, 6, 6, 3), &square(12, 6, 6, 3));
    let out = report(&MetricOptions::default(), &d.join("pred"), &d.join("gt")).unwrap();
    assert_eq!(out.aggregate.report.iou, 1.0);
    assert_eq!(out.aggregate.report.pd, 1.0);
    assert_eq!(out.aggregate.report.fa, 0.0);

    for name in ["x", "y"] {
        save_mask(&TargetMask::empty(12, 12), d.join(format!("pred/{name}.png"))).unwrap();
    }
    let out = report(&MetricOptions::default(), &d.join("pred"), &d.join("gt")).unwrap();
    assert_eq!(out.aggregate.report.pd, 0.0);
    assert_eq!(out.aggregate.report.iou, 0.0);
}

#[test]
fn report_excludes_unmatched_ids_and_writes_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_pair(d, "a", &square(8, 1, 1, 2), &square(8, 1, 1, 2));
    save_mask(&square(8, 0, 0, 1), d.join("gt/only_gt_pixels0.png")).unwrap();
    irsqueeze::raster::save_gray_image(&GrayImage::filled(8, 8, 0.9).unwrap(), d.join("pred/only_pred.png")).unwrap();
    let opts = MetricOptions {
        sweep_steps: 4,
        ..Default::default()
    };
    let out = report(&opts, &d.join("pred"), &d.join("gt")).unwrap();
    assert_eq!(out.per_image.len(), 1);
    assert_eq!(out.aggregate.unmatched, ["only_pred", "only_gt"]);
    assert_eq!(out.sweep.len(), 5);

    let rep = d.join("rep");
    write_report(&out, &rep).unwrap();
    let jsonl = fs::read_to_string(rep.join("report.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = jsonl.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["kind"], "image");
    assert_eq!(lines[0]["sample_id"], "a");
    assert_eq!(lines[1]["kind"], "aggregate");
    assert_eq!(lines[1]["iou"], 1.0);
    assert!(fs::read_to_string(rep.join("report.txt"))
        .unwrap()
        .contains("ALL (pooled)"));
    let csv = fs::read_to_string(rep.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("threshold,pd,fa_e6"));
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn config_file_round_trip() {
    let dir = setup(3);
    let path = dir.path().join("run.toml");
    fs::write(
        &path,
        "dataset_root = \"data\"\noutput_root = \"generated\"\nseed = 5\nchain = [\"smooth\"]\n",
    )
    .unwrap();
    let cfg = PipelineConfig::load(&path).unwrap();
    assert_eq!(cfg.output_root, dir.path().join("generated"));
    let summary = run_augment(&cfg, &AugmentOptions::default()).unwrap();
    assert_eq!(summary.records.len(), 3);
    assert!(dir.path().join("generated/manifest.jsonl").is_file());
}
