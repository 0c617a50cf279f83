use serde::{Deserialize, Serialize};

use super::XaiError;
use crate::tensor::Tensor;

/// Rectangular superpixels: every pixel carries a segment id in `[0, segments)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperpixelMask {
    pub height: usize,
    pub width: usize,
    pub grid: usize,
    pub segments: usize,
    pub ids: Vec<usize>,
}

/// Mask description carried in explanation files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskInfo {
    pub height: usize,
    pub width: usize,
    pub grid: usize,
    pub segments: usize,
}

/// Which cell of `grid` equal cells the coordinate falls in; the extra pixels go to the last cells.
fn cell(pos: usize, len: usize, grid: usize) -> usize {
    let base = len / grid;
    let small = (grid - len % grid) * base;
    if pos < small {
        pos / base
    } else {
        grid - len % grid + (pos - small) / (base + 1)
    }
}

/// Split an `height x width` image into `grid x grid` rectangles, row-major ids.
pub fn segment_grid(height: usize, width: usize, grid: usize) -> Result<SuperpixelMask, XaiError> {
    if grid < 2 {
        return Err(XaiError::Invalid(format!("grid {grid} gives fewer than two segments")));
    }
    if grid > height.min(width) {
        return Err(XaiError::Invalid(format!("grid {grid} exceeds the {height}x{width} image")));
    }
    let mut ids = Vec::with_capacity(height * width);
    for y in 0..height {
        let r = cell(y, height, grid);
        for x in 0..width {
            ids.push(r * grid + cell(x, width, grid));
        }
    }
    Ok(SuperpixelMask {
        height,
        width,
        grid,
        segments: grid * grid,
        ids,
    })
}

impl SuperpixelMask {
    pub fn info(&self) -> MaskInfo {
        MaskInfo {
            height: self.height,
            width: self.width,
            grid: self.grid,
            segments: self.segments,
        }
    }

    pub fn id(&self, y: usize, x: usize) -> usize {
        self.ids[y * self.width + x]
    }

    /// Pixel count per segment.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.segments];
        for &i in &self.ids {
            s[i] += 1;
        }
        s
    }

    fn check(&self, t: &Tensor<f64>, what: &str) -> Result<usize, XaiError> {
        match t.shape() {
            &[h, w, c] if h == self.height && w == self.width => Ok(c),
            s => Err(XaiError::Invalid(format!(
                "{what} has shape {s:?}, mask is {}x{}",
                self.height, self.width
            ))),
        }
    }

    /// Sum of an `[H, W, C]` map within each segment.
    pub fn segment_sum(&self, values: &Tensor<f64>) -> Result<Vec<f64>, XaiError> {
        let c = self.check(values, "attribution")?;
        let mut out = vec![0.0; self.segments];
        for (p, &id) in self.ids.iter().enumerate() {
            out[id] += values.data()[p * c..(p + 1) * c].iter().sum::<f64>();
        }
        Ok(out)
    }

    /// `image` where `present[segment]`, `fill` elsewhere; appended to `out`.
    pub fn compose_into(&self, image: &Tensor<f64>, fill: &Tensor<f64>, present: &[bool], out: &mut Vec<f64>) {
        let c = image.shape()[2];
        for (p, &id) in self.ids.iter().enumerate() {
            let src = if present[id] { image } else { fill };
            out.extend_from_slice(&src.data()[p * c..(p + 1) * c]);
        }
    }
}

/// Replacement content for absent segments.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum Fill {
    /// Mean colour of each segment in the reference image.
    #[default]
    Mean,
    Black,
    Constant(f64),
}

impl Fill {
    pub fn label(&self) -> String {
        match self {
            Fill::Mean => "mean".into(),
            Fill::Black => "black".into(),
            Fill::Constant(v) => format!("constant:{v}"),
        }
    }
}

impl std::str::FromStr for Fill {
    type Err = XaiError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Fill::Mean),
            "black" => Ok(Fill::Black),
            other => other
                .strip_prefix("constant:")
                .and_then(|v| v.parse().ok())
                .map(Fill::Constant)
                .ok_or_else(|| XaiError::Invalid(format!("unknown fill `{other}` (mean, black or constant:<v>)"))),
        }
    }
}

/// The all-absent image. `Mean` averages `reference` (the dataset mean image when given,
/// otherwise `image` itself) per segment and channel.
pub fn fill_image(
    image: &Tensor<f64>,
    mask: &SuperpixelMask,
    fill: Fill,
    reference: Option<&Tensor<f64>>,
) -> Result<Tensor<f64>, XaiError> {
    let c = mask.check(image, "image")?;
    match fill {
        Fill::Black => Ok(image.zeros_like()),
        Fill::Constant(v) => Ok(Tensor::full(image.shape().to_vec(), v)),
        Fill::Mean => {
            let r = reference.unwrap_or(image);
            if r.shape() != image.shape() {
                return Err(XaiError::Invalid(format!(
                    "reference image {:?} does not match {:?}",
                    r.shape(),
                    image.shape()
                )));
            }
            let mut sum = vec![0.0; mask.segments * c];
            for (p, &id) in mask.ids.iter().enumerate() {
                for k in 0..c {
                    sum[id * c + k] += r.data()[p * c + k];
                }
            }
            let sizes = mask.sizes();
            let mut data = Vec::with_capacity(image.len());
            for &id in &mask.ids {
                for k in 0..c {
                    data.push(sum[id * c + k] / sizes[id] as f64);
                }
            }
            Ok(Tensor::new(image.shape().to_vec(), data).expect("fill matches image"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_examples() {
        let m = segment_grid(224, 224, 8).unwrap();
        assert_eq!(m.segments, 64);
        assert!(m.sizes().iter().all(|&s| s == 28 * 28));
        assert!(segment_grid(32, 32, 1).is_err());
        assert!(segment_grid(4, 4, 5).is_err());
        let m = segment_grid(10, 10, 3).unwrap();
        assert_eq!(m.segments, 9);
        let rows: Vec<usize> = (0..10).map(|y| m.id(y, 0) / 3).collect();
        assert_eq!(rows, vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 2]);
        assert_eq!(m.sizes(), vec![9, 9, 12, 9, 9, 12, 12, 12, 16]);
    }

    #[test]
    fn mean_fill_is_segment_average() {
        let m = segment_grid(2, 4, 2).unwrap();
        let img = Tensor::new(vec![2, 4, 1], vec![0., 2., 4., 4., 2., 0., 8., 0.]).unwrap();
        let f = fill_image(&img, &m, Fill::Mean, None).unwrap();
        assert_eq!(f.data(), &[1., 1., 4., 4., 1., 1., 4., 4.][..]);
        assert_eq!("constant:0.5".parse::<Fill>().unwrap(), Fill::Constant(0.5));
    }
}
