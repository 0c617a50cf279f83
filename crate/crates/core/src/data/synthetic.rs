use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::manifest::{scan_dataset, DatasetManifest};
use super::DataError;
use crate::seed;

/// Class directory names of the target dataset, in label order.
pub const PAPER_CLASSES: [&str; 5] = ["Clear Cell", "Endometri", "Mucinous", "Non Cancerous", "Serous"];

const TINTS: [[f64; 3]; 5] = [
    [0.85, 0.35, 0.45],
    [0.35, 0.75, 0.40],
    [0.35, 0.45, 0.85],
    [0.80, 0.75, 0.30],
    [0.60, 0.35, 0.80],
];

fn texture(class: usize, x: f64, y: f64, period: f64, phase: f64, centre: (f64, f64)) -> f64 {
    let tau = std::f64::consts::TAU;
    match class {
        0 => (tau * y / period + phase).sin(),
        1 => (tau * x / period + phase).sin(),
        2 => (tau * x / period + phase).sin() * (tau * y / period + phase).sin(),
        3 => (tau * (x + y) / (period * std::f64::consts::SQRT_2) + phase).sin(),
        _ => {
            let r = ((x - centre.0).powi(2) + (y - centre.1).powi(2)).sqrt();
            (tau * r / period + phase).sin()
        }
    }
}

fn render(class: usize, size: u32, rng: &mut ChaCha8Rng) -> RgbImage {
    let s = size as f64;
    let period = s / rng.gen_range(3.0..5.0);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let centre = (rng.gen_range(0.3..0.7) * s, rng.gen_range(0.3..0.7) * s);
    let tint = TINTS[class % TINTS.len()];
    let shade = rng.gen_range(0.9..1.1);
    let mut img = RgbImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let t = texture(class % 5, x as f64 / s * 32.0, y as f64 / s * 32.0, period / s * 32.0, phase, (centre.0 / s * 32.0, centre.1 / s * 32.0));
            let mut px = [0u8; 3];
            for k in 0..3 {
                let v = tint[k] * shade * (0.6 + 0.4 * t) + rng.gen_range(-0.06..0.06);
                px[k] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            img.put_pixel(x, y, Rgb(px));
        }
    }
    img
}

/// Write a separable textured dataset: `counts[c]` PNG images of `size x size` for class `c`.
///
/// Each class has its own stripe orientation (horizontal, vertical, checker, diagonal, rings)
/// and colour tint, with per-image jitter in period, phase, shade and pixel noise.
pub fn generate_synthetic(root: &Path, counts: &[usize], size: u32, seed: u64) -> Result<DatasetManifest, DataError> {
    if counts.is_empty() || counts.len() > PAPER_CLASSES.len() || size == 0 {
        return Err(DataError::Invalid {
            what: "synthetic fixture",
            message: format!("need 1..=5 classes and a positive size, got {} classes, size {size}", counts.len()),
        });
    }
    for (class, &n) in counts.iter().enumerate() {
        let dir = root.join(PAPER_CLASSES[class]);
        fs::create_dir_all(&dir).map_err(DataError::io(&dir))?;
        for i in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[class as u64, i as u64]));
            let img = render(class, size, &mut rng);
            let path = dir.join(format!("img{i:04}.png"));
            img.save(&path).map_err(DataError::image(&path))?;
        }
    }
    Ok(scan_dataset(root)?.0)
}
