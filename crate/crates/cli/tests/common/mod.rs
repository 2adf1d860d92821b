#![allow(dead_code)]

use std::path::{Path, PathBuf};

use ensemble_patch::imaging::{write_png, Image};
use serde_json::{json, Value};

/// A smooth landscape: sky gradient, a sun and a band of hills.
pub fn scenic_image(side: usize) -> Image {
    let s = (side - 1).max(1) as f64;
    Image::from_fn(side, side, |y, x, c| {
        let (u, v) = (x as f64 / s, y as f64 / s);
        let sky = [0.2, 0.35, 0.75][c] * (1.0 - v) + [0.95, 0.6, 0.3][c] * v;
        let sun = ((u - 0.62).powi(2) + (v - 0.38).powi(2)).sqrt() < 0.19;
        let hill = v > 0.72 + 0.05 * (u * 9.0).sin();
        if hill {
            [0.15, 0.4, 0.15][c] + 0.05 * (x as f64 * 0.7).sin()
        } else if sun {
            [1.0, 0.9, 0.4][c]
        } else {
            sky
        }
    })
}

pub fn write_specified(dir: &Path, side: usize) -> PathBuf {
    let path = dir.join("specified.png");
    write_png(&path, &scenic_image(side)).unwrap();
    path
}

/// Renders `count` scenes from `seed` into `dir` and returns the manifest path.
pub fn make_scenes(dir: &Path, count: usize, seed: u64) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    let spec = dir.with_extension("spec.json");
    std::fs::write(&spec, json!({"count": count, "seed": seed}).to_string()).unwrap();
    ensemble_patch_cli::cmd_make_scenes(&spec, dir).unwrap();
    dir.join("manifest.json")
}

pub fn toy(seed: u64) -> Value {
    json!({"type": "toy", "seed": seed, "templates": 3})
}

pub fn write_config(path: &Path, config: &Value) -> PathBuf {
    std::fs::write(path, serde_json::to_string_pretty(config).unwrap()).unwrap();
    path.to_path_buf()
}
