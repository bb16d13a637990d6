#![allow(dead_code)]

use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use rand::Rng;

use irsqueeze::raster::{save_gray_image, save_mask, GrayImage, TargetMask};
use irsqueeze::rng::derive_stream;

/// A dim noisy background with one to three bright square targets, on the
/// 8-bit grid so it survives a PNG round trip.
pub fn synthetic_scene(seed: u64, index: u64, width: usize, height: usize) -> (GrayImage, TargetMask) {
    let mut rng = derive_stream(seed, "fixture", index).rng();
    let n_targets = rng.random_range(1..=3);
    let boxes: Vec<(usize, usize, usize)> = (0..n_targets)
        .map(|_| {
            let size = rng.random_range(1..=3);
            (
                rng.random_range(0..height - size),
                rng.random_range(0..width - size),
                size,
            )
        })
        .collect();
    let inside = |r: usize, c: usize| {
        boxes
            .iter()
            .any(|&(br, bc, s)| r >= br && r < br + s && c >= bc && c < bc + s)
    };
    let mask = TargetMask::from_fn(width, height, inside);
    let image = GrayImage::from_fn(width, height, |r, c| {
        let v: f64 = if inside(r, c) {
            rng.random_range(0.75..1.0)
        } else {
            0.1 + 0.3 * rng.random::<f64>() + 0.1 * (r as f64 / height as f64)
        };
        (v * 255.0).round() / 255.0
    })
    .unwrap();
    (image, mask)
}

/// Writes `count` scenes as `root/images/img_XXX.png` and `root/masks/img_XXX.png`.
pub fn write_dataset(root: &Path, count: usize, seed: u64) {
    fs::create_dir_all(root.join("images")).unwrap();
    fs::create_dir_all(root.join("masks")).unwrap();
    for i in 0..count {
        let (image, mask) = synthetic_scene(seed, i as u64, 24, 20);
        save_gray_image(&image, root.join(format!("images/img_{i:03}.png"))).unwrap();
        save_mask(&mask, root.join(format!("masks/img_{i:03}.png"))).unwrap();
    }
}

pub fn write_script(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, format!("#!/bin/sh\n{body}")).unwrap();
    fs::set_permissions(&path, fs::Permissions::from_mode(0o755)).unwrap();
    path
}

/// Parses the protocol flags into `$in`, `$out` and `$man`.
pub const PARSE_ARGS: &str = r#"
while [ $# -gt 0 ]; do
  case "$1" in
    --input-dir) in="$2"; shift 2 ;;
    --output-dir) out="$2"; shift 2 ;;
    --manifest) man="$2"; shift 2 ;;
    *) shift ;;
  esac
done
"#;

/// A conforming backend that returns its inputs unchanged.
pub fn copy_backend(dir: &Path) -> PathBuf {
    write_script(
        dir,
        "copy_backend.sh",
        &format!(
            "{PARSE_ARGS}\ntab=$(printf '\\t')\nwhile IFS=\"$tab\" read -r id img mask; do\n  cp \"$in/$img\" \"$out/$id.png\" || exit 3\ndone < \"$man\"\n"
        ),
    )
}
