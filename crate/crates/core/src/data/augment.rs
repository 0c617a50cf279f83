use std::fs;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::jpeg::JpegEncoder;
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, Origin, Sample};
use super::DataError;
use crate::seed;

pub const JPEG_QUALITY: u8 = 95;
const MAX_DRAWS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    /// Derived images per original.
    pub copies: usize,
    pub rotation_p: f64,
    /// Rotation angle is drawn uniformly from `[-rotation_max_deg, rotation_max_deg]`.
    pub rotation_max_deg: f64,
    pub hflip_p: f64,
    pub vflip_p: f64,
    pub jitter_p: f64,
    pub brightness: [f64; 2],
    pub contrast: [f64; 2],
    pub saturation: [f64; 2],
    /// Hue shift as a fraction of the hue circle.
    pub hue: [f64; 2],
    /// Mirror the image at the borders when rotating; zero fill otherwise.
    pub reflect_fill: bool,
    pub seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            copies: 4,
            rotation_p: 0.5,
            rotation_max_deg: 180.0,
            hflip_p: 0.5,
            vflip_p: 0.5,
            jitter_p: 0.5,
            brightness: [0.8, 1.2],
            contrast: [0.8, 1.2],
            saturation: [0.8, 1.2],
            hue: [-0.05, 0.05],
            reflect_fill: true,
            seed: 0,
        }
    }
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |message: String| Err(DataError::Invalid { what: "augment policy", message });
        for (name, p) in [
            ("rotation_p", self.rotation_p),
            ("hflip_p", self.hflip_p),
            ("vflip_p", self.vflip_p),
            ("jitter_p", self.jitter_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if !(0.0..=180.0).contains(&self.rotation_max_deg) {
            return bad(format!("rotation bound {} outside [0, 180]", self.rotation_max_deg));
        }
        for (name, [lo, hi]) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
            ("hue", self.hue),
        ] {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return bad(format!("{name} range [{lo}, {hi}] is not ordered"));
            }
        }
        Ok(())
    }
}

/// One applied transform and its drawn parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Transform {
    Rotate { degrees: f64 },
    FlipHorizontal,
    FlipVertical,
    Jitter { brightness: f64, contrast: f64, saturation: f64, hue: f64 },
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

fn draw(policy: &AugmentPolicy, rng: &mut ChaCha8Rng) -> Vec<Transform> {
    for _ in 0..MAX_DRAWS {
        let mut t = Vec::new();
        if rng.gen_bool(policy.rotation_p) {
            let m = policy.rotation_max_deg;
            t.push(Transform::Rotate {
                degrees: uniform(rng, [-m, m]),
            });
        }
        if rng.gen_bool(policy.hflip_p) {
            t.push(Transform::FlipHorizontal);
        }
        if rng.gen_bool(policy.vflip_p) {
            t.push(Transform::FlipVertical);
        }
        if rng.gen_bool(policy.jitter_p) {
            t.push(Transform::Jitter {
                brightness: uniform(rng, policy.brightness),
                contrast: uniform(rng, policy.contrast),
                saturation: uniform(rng, policy.saturation),
                hue: uniform(rng, policy.hue),
            });
        }
        if !t.is_empty() {
            return t;
        }
    }
    vec![Transform::FlipHorizontal]
}

fn reflect(v: f64, n: usize) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    let period = 2.0 * (n - 1) as f64;
    let m = v.rem_euclid(period);
    if m > (n - 1) as f64 {
        period - m
    } else {
        m
    }
}

fn rotate(img: &RgbImage, degrees: f64, reflect_fill: bool) -> RgbImage {
    let (w, h) = img.dimensions();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (s, c) = degrees.to_radians().sin_cos();
    let sample = |x: i64, y: i64| -> Option<[f64; 3]> {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            return None;
        }
        let p = img.get_pixel(x as u32, y as u32).0;
        Some([p[0] as f64, p[1] as f64, p[2] as f64])
    };
    RgbImage::from_fn(w, h, |ox, oy| {
        let dx = ox as f64 - cx;
        let dy = oy as f64 - cy;
        let mut sx = c * dx + s * dy + cx;
        let mut sy = -s * dx + c * dy + cy;
        if reflect_fill {
            sx = reflect(sx, w as usize);
            sy = reflect(sy, h as usize);
        }
        let (x0, y0) = (sx.floor() as i64, sy.floor() as i64);
        let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
        let mut acc = [0.0f64; 3];
        for (xx, yy, wt) in [
            (x0, y0, (1.0 - fx) * (1.0 - fy)),
            (x0 + 1, y0, fx * (1.0 - fy)),
            (x0, y0 + 1, (1.0 - fx) * fy),
            (x0 + 1, y0 + 1, fx * fy),
        ] {
            if wt == 0.0 {
                continue;
            }
            // With reflect fill an out-of-range neighbour only appears with zero weight at the far edge.
            let v = sample(xx, yy).or_else(|| {
                if reflect_fill {
                    sample(xx.clamp(0, w as i64 - 1), yy.clamp(0, h as i64 - 1))
                } else {
                    None
                }
            });
            if let Some(v) = v {
                for k in 0..3 {
                    acc[k] += wt * v[k];
                }
            }
        }
        Rgb(acc.map(|v| v.round().clamp(0.0, 255.0) as u8))
    })
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn luma(p: [f64; 3]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn jitter(img: &RgbImage, brightness: f64, contrast: f64, saturation: f64, hue: f64) -> RgbImage {
    let mut px: Vec<[f64; 3]> = img
        .pixels()
        .map(|p| [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0])
        .map(|p| p.map(|v| (v * brightness).clamp(0.0, 1.0)))
        .collect();
    let mean = px.iter().map(|&p| luma(p)).sum::<f64>() / px.len().max(1) as f64;
    for p in px.iter_mut() {
        *p = p.map(|v| ((v - mean) * contrast + mean).clamp(0.0, 1.0));
        let g = luma(*p);
        *p = p.map(|v| ((v - g) * saturation + g).clamp(0.0, 1.0));
        if hue != 0.0 {
            let mut hsv = rgb_to_hsv(*p);
            hsv[0] += hue;
            *p = hsv_to_rgb(hsv);
        }
    }
    let (w, h) = img.dimensions();
    RgbImage::from_fn(w, h, |x, y| {
        let p = px[(y * w + x) as usize];
        Rgb(p.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8))
    })
}

/// Apply a seeded random composition of the policy's transforms; at least one is always applied.
pub fn augment_image(img: &RgbImage, policy: &AugmentPolicy, rng_seed: u64) -> (RgbImage, Vec<Transform>) {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let transforms = draw(policy, &mut rng);
    let mut out = img.clone();
    for t in &transforms {
        out = match *t {
            Transform::Rotate { degrees } => rotate(&out, degrees, policy.reflect_fill),
            Transform::FlipHorizontal => image::imageops::flip_horizontal(&out),
            Transform::FlipVertical => image::imageops::flip_vertical(&out),
            Transform::Jitter {
                brightness,
                contrast,
                saturation,
                hue,
            } => jitter(&out, brightness, contrast, saturation, hue),
        };
    }
    (out, transforms)
}

fn write_jpeg(img: &RgbImage, path: &Path) -> Result<(), DataError> {
    let f = fs::File::create(path).map_err(DataError::io(path))?;
    let mut enc = JpegEncoder::new_with_quality(BufWriter::new(f), JPEG_QUALITY);
    enc.encode_image(img).map_err(DataError::image(path))
}

/// Copy every original into `output_root` and write `policy.copies` derived JPEGs next to it.
///
/// The result lists each original followed by its derivatives, in input order.
pub fn augment_dataset(manifest: &DatasetManifest, policy: &AugmentPolicy, output_root: &Path) -> Result<DatasetManifest, DataError> {
    if policy.copies == 0 {
        return Ok(manifest.clone());
    }
    policy.validate()?;
    if let Some(s) = manifest.samples.iter().find(|s| s.origin != Origin::Original) {
        return Err(DataError::Invalid {
            what: "manifest",
            message: format!("`{}` is already augmented", s.path.display()),
        });
    }
    let same_root = match (manifest.root.canonicalize(), output_root.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    };
    if same_root {
        return Err(DataError::Invalid {
            what: "output root",
            message: "must differ from the input dataset root".into(),
        });
    }
    for c in &manifest.classes {
        let d = output_root.join(c);
        fs::create_dir_all(&d).map_err(DataError::io(&d))?;
    }
    let per_sample: Vec<Result<Vec<Sample>, DataError>> = manifest
        .samples
        .par_iter()
        .enumerate()
        .map(|(index, s)| {
            let src = manifest.absolute(s);
            let bytes = fs::read(&src).map_err(DataError::io(&src))?;
            let dst = output_root.join(&s.path);
            if let Some(parent) = dst.parent() {
                fs::create_dir_all(parent).map_err(DataError::io(parent))?;
            }
            fs::write(&dst, &bytes).map_err(DataError::io(&dst))?;
            let img = image::load_from_memory(&bytes).map_err(DataError::image(&src))?.to_rgb8();
            let class_dir = &manifest.classes[s.class];
            let stem = s.path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let mut out = vec![s.clone()];
            for copy in 1..=policy.copies {
                let sample_seed = seed::derive(policy.seed, &[index as u64, copy as u64]);
                let (aug, _) = augment_image(&img, policy, sample_seed);
                let rel = Path::new(class_dir).join(format!("{stem}__aug{copy}.jpg"));
                write_jpeg(&aug, &output_root.join(&rel))?;
                out.push(Sample {
                    path: rel,
                    class: s.class,
                    origin: Origin::Augmented,
                });
            }
            Ok(out)
        })
        .collect();
    let mut samples = Vec::with_capacity(manifest.len() * (policy.copies + 1));
    for r in per_sample {
        samples.extend(r?);
    }
    Ok(DatasetManifest {
        root: output_root.to_path_buf(),
        classes: manifest.classes.clone(),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gradient(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x * 20) as u8, (y * 20) as u8, 128]))
    }

    #[test]
    fn at_least_one_transform_even_when_all_probabilities_are_zero() {
        let policy = AugmentPolicy {
            rotation_p: 0.0,
            hflip_p: 0.0,
            vflip_p: 0.0,
            jitter_p: 0.0,
            ..AugmentPolicy::default()
        };
        let img = gradient(6, 4);
        let (out, t) = augment_image(&img, &policy, 3);
        assert_eq!(t, vec![Transform::FlipHorizontal]);
        assert_eq!(out, image::imageops::flip_horizontal(&img));
    }

    #[test]
    fn identity_rotation_and_unit_jitter_preserve_pixels() {
        let img = gradient(7, 5);
        assert_eq!(rotate(&img, 0.0, true), img);
        assert_eq!(jitter(&img, 1.0, 1.0, 1.0, 0.0), img);
    }

    #[test]
    fn half_turn_rotation_flips_both_axes() {
        let img = gradient(6, 6);
        let expected = image::imageops::flip_vertical(&image::imageops::flip_horizontal(&img));
        assert_eq!(rotate(&img, 180.0, true), expected);
    }

    #[test]
    fn hsv_round_trip() {
        for p in [[0.2, 0.5, 0.9], [1.0, 0.0, 0.0], [0.3, 0.3, 0.3], [0.0, 0.7, 0.1]] {
            let back = hsv_to_rgb(rgb_to_hsv(p));
            for k in 0..3 {
                assert!((back[k] - p[k]).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn dimensions_preserved_and_deterministic(seed in any::<u64>(), w in 2u32..12, h in 2u32..12) {
            let img = gradient(w, h);
            let policy = AugmentPolicy::default();
            let (a, ta) = augment_image(&img, &policy, seed);
            let (b, tb) = augment_image(&img, &policy, seed);
            prop_assert_eq!(a.dimensions(), (w, h));
            prop_assert!(!ta.is_empty());
            prop_assert_eq!(a, b);
            prop_assert_eq!(&ta, &tb);
            for t in ta {
                if let Transform::Rotate { degrees } = t {
                    prop_assert!(degrees.abs() <= 180.0);
                }
            }
        }
    }
}
