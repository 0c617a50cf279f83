use std::path::Path;

use image::imageops::FilterType;
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::manifest::{DatasetManifest, SkippedFile};
use super::DataError;
use crate::tensor::Tensor;

/// A minibatch: inputs `[B, H, W, 3]` in `[0, 1]` and their class indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Decoded, resized and normalised images held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorSet {
    pub image_size: usize,
    /// Row-major `[N, S, S, 3]` values.
    pub pixels: Vec<f32>,
    pub labels: Vec<usize>,
}

/// Decode an image file to RGB.
pub fn load_image(path: &Path) -> Result<RgbImage, DataError> {
    Ok(image::ImageReader::open(path)
        .map_err(DataError::io(path))?
        .with_guessed_format()
        .map_err(DataError::io(path))?
        .decode()
        .map_err(DataError::image(path))?
        .to_rgb8())
}

/// Bilinear resize to `size x size` and division of 8-bit intensities by 255, shape `[S, S, 3]`.
pub fn image_to_tensor(img: &RgbImage, size: usize) -> Tensor {
    let owned;
    let img = if img.dimensions() == (size as u32, size as u32) {
        img
    } else {
        owned = image::imageops::resize(img, size as u32, size as u32, FilterType::Triangle);
        &owned
    };
    let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Tensor::new(vec![size, size, 3], data).expect("rgb buffer matches its dimensions")
}

/// Decode every sample; undecodable files are reported and left out.
pub fn load_tensors(manifest: &DatasetManifest, image_size: usize) -> Result<(TensorSet, Vec<SkippedFile>), DataError> {
    if image_size == 0 {
        return Err(DataError::Invalid {
            what: "image size",
            message: "must be positive".into(),
        });
    }
    let decoded: Vec<Result<Tensor, String>> = manifest
        .samples
        .par_iter()
        .map(|s| {
            load_image(&manifest.absolute(s))
                .map(|img| image_to_tensor(&img, image_size))
                .map_err(|e| e.to_string())
        })
        .collect();
    let mut set = TensorSet {
        image_size,
        pixels: Vec::with_capacity(manifest.len() * image_size * image_size * 3),
        labels: Vec::with_capacity(manifest.len()),
    };
    let mut skipped = Vec::new();
    for (s, d) in manifest.samples.iter().zip(decoded) {
        match d {
            Ok(t) => {
                set.pixels.extend_from_slice(t.data());
                set.labels.push(s.class);
            }
            Err(reason) => skipped.push(SkippedFile {
                path: manifest.absolute(s),
                reason,
            }),
        }
    }
    Ok((set, skipped))
}

impl TensorSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn row(&self) -> usize {
        self.image_size * self.image_size * 3
    }

    pub fn image(&self, i: usize) -> Tensor {
        let r = self.row();
        Tensor::new(vec![self.image_size, self.image_size, 3], self.pixels[i * r..(i + 1) * r].to_vec())
            .expect("row slice matches image shape")
    }

    /// Gather the given rows into one batch.
    pub fn gather(&self, indices: &[usize]) -> Batch {
        let r = self.row();
        let mut data = Vec::with_capacity(indices.len() * r);
        for &i in indices {
            data.extend_from_slice(&self.pixels[i * r..(i + 1) * r]);
        }
        Batch {
            inputs: Tensor::new(vec![indices.len(), self.image_size, self.image_size, 3], data)
                .expect("gathered rows match batch shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Sample order, shuffled with `seed` when requested.
    pub fn order(&self, seed: u64, shuffle: bool) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        if shuffle {
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        idx
    }

    /// Batches of at most `batch_size` rows.
    pub fn batches(&self, batch_size: usize, seed: u64, shuffle: bool) -> Vec<Batch> {
        self.order(seed, shuffle)
            .chunks(batch_size.max(1))
            .map(|c| self.gather(c))
            .collect()
    }

    /// Per-pixel mean image over the set, shape `[S, S, 3]`.
    pub fn mean_image(&self) -> Tensor {
        let r = self.row();
        let mut acc = vec![0f64; r];
        for i in 0..self.len() {
            for (a, &v) in acc.iter_mut().zip(&self.pixels[i * r..(i + 1) * r]) {
                *a += v as f64;
            }
        }
        let n = self.len().max(1) as f64;
        Tensor::new(
            vec![self.image_size, self.image_size, 3],
            acc.into_iter().map(|v| (v / n) as f32).collect(),
        )
        .expect("mean matches image shape")
    }
}

/// Decode, resize, normalise and batch a manifest.
pub fn tensorize(
    manifest: &DatasetManifest,
    image_size: usize,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> Result<(Vec<Batch>, Vec<SkippedFile>), DataError> {
    let (set, skipped) = load_tensors(manifest, image_size)?;
    Ok((set.batches(batch_size, seed, shuffle), skipped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn intensities_map_to_unit_interval() {
        let img = RgbImage::from_fn(2, 1, |x, _| if x == 0 { Rgb([255, 0, 128]) } else { Rgb([0, 0, 0]) });
        let t = image_to_tensor(&img, 2);
        let t = t.data();
        assert_eq!(t.len(), 2 * 2 * 3);
        let direct = image_to_tensor(&RgbImage::from_pixel(2, 2, Rgb([255, 0, 128])), 2);
        assert_eq!(direct.data()[0], 1.0);
        assert_eq!(direct.data()[1], 0.0);
        assert!((direct.data()[2] - 128.0 / 255.0).abs() < 1e-7);
        assert!((direct.data()[2] - 0.50196).abs() < 1e-5);
        assert!(t.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn batch_arithmetic() {
        let set = TensorSet {
            image_size: 1,
            pixels: vec![0.5; 2490 * 3],
            labels: (0..2490).map(|i| i % 5).collect(),
        };
        let b = set.batches(32, 1, true);
        assert_eq!(b.len(), 78);
        assert_eq!(b.last().unwrap().len(), 26);
        assert!(b.iter().all(|x| x.len() <= 32));
        assert_eq!(set.batches(32, 1, true), b);
        let mut seen: Vec<usize> = set.order(1, true);
        seen.sort_unstable();
        assert_eq!(seen, (0..2490).collect::<Vec<_>>());
    }
}
