//! Deterministic fixtures shared by the benchmarks.

use camsim_core::dataset::{generate_synthetic_scene, SceneConfig, SyntheticScene};
use camsim_core::RawImage;

/// Smooth pattern with fine detail, values in `[0.05, 0.95]`.
pub fn pattern_image(height: usize, width: usize) -> RawImage {
    let data = (0..height * width * 4)
        .map(|i| {
            let px = i / 4;
            let (y, x) = ((px / width) as f64, (px % width) as f64);
            0.5 + 0.45 * (0.13 * x + 0.07 * y + i as f64 % 4.0).sin() * (0.05 * y).cos()
        })
        .collect();
    RawImage::from_planes(height, width, data).expect("size matches")
}

pub fn scene(side: usize) -> SyntheticScene {
    let cfg = SceneConfig {
        height: side,
        width: side,
        ..SceneConfig::default()
    };
    generate_synthetic_scene(7, &cfg).expect("valid config")
}
