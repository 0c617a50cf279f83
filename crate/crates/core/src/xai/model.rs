use rayon::prelude::*;

use super::segment::SuperpixelMask;
use super::XaiError;
use crate::arch::ModelSpec;
use crate::network::{input_gradient, predict_chunked, ModelParams};
use crate::tensor::{Real, Tensor};

/// A classifier queried by the attribution methods. Images are `[B, H, W, C]` in `f64`.
pub trait ScoreModel: Sync {
    fn image_shape(&self) -> [usize; 3];
    fn num_classes(&self) -> usize;
    /// Target-class score per image.
    fn scores(&self, images: &Tensor<f64>, target: usize) -> Result<Vec<f64>, XaiError>;
    /// Scores and the gradient of each image's score with respect to that image.
    fn gradients(&self, images: &Tensor<f64>, target: usize) -> Result<(Vec<f64>, Tensor<f64>), XaiError>;

    fn check_target(&self, target: usize) -> Result<(), XaiError> {
        if target < self.num_classes() {
            Ok(())
        } else {
            Err(XaiError::Invalid(format!("target class {target} out of range 0..{}", self.num_classes())))
        }
    }

    fn check_image(&self, image: &Tensor<f64>) -> Result<(), XaiError> {
        if image.shape() == self.image_shape() {
            Ok(())
        } else {
            Err(XaiError::Invalid(format!(
                "image shape {:?} does not match model input {:?}",
                image.shape(),
                self.image_shape()
            )))
        }
    }
}

/// A trained network scored by its softmax probability.
pub struct NetworkModel<T: Real = f32> {
    pub spec: ModelSpec,
    pub params: ModelParams<T>,
    pub chunk: usize,
}

impl<T: Real> NetworkModel<T> {
    pub fn new(spec: ModelSpec, params: ModelParams<T>) -> Self {
        Self { spec, params, chunk: 32 }
    }
}

impl<T: Real> ScoreModel for NetworkModel<T> {
    fn image_shape(&self) -> [usize; 3] {
        self.spec.input_shape
    }

    fn num_classes(&self) -> usize {
        self.spec.output_classes
    }

    fn scores(&self, images: &Tensor<f64>, target: usize) -> Result<Vec<f64>, XaiError> {
        self.check_target(target)?;
        let p = predict_chunked(&self.spec, &self.params, &images.cast::<T>(), self.chunk)?;
        Ok((0..images.shape()[0]).map(|r| p.outer(r)[target].as_f64()).collect())
    }

    fn gradients(&self, images: &Tensor<f64>, target: usize) -> Result<(Vec<f64>, Tensor<f64>), XaiError> {
        self.check_target(target)?;
        let (s, g) = input_gradient(&self.spec, &self.params, &images.cast::<T>(), target)?;
        Ok((s.into_iter().map(|v| v.as_f64()).collect(), g.cast()))
    }
}

/// `score_c(x) = w_c . x + b_c`, with exact gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    /// One `[H, W, C]` weight map per class.
    pub weights: Vec<Tensor<f64>>,
    pub bias: Vec<f64>,
}

impl LinearModel {
    fn row_dot(&self, images: &Tensor<f64>, r: usize, target: usize) -> f64 {
        images
            .outer(r)
            .iter()
            .zip(self.weights[target].data())
            .map(|(a, b)| a * b)
            .sum::<f64>()
            + self.bias[target]
    }
}

impl ScoreModel for LinearModel {
    fn image_shape(&self) -> [usize; 3] {
        let s = self.weights[0].shape();
        [s[0], s[1], s[2]]
    }

    fn num_classes(&self) -> usize {
        self.weights.len()
    }

    fn scores(&self, images: &Tensor<f64>, target: usize) -> Result<Vec<f64>, XaiError> {
        self.check_target(target)?;
        Ok((0..images.shape()[0]).map(|r| self.row_dot(images, r, target)).collect())
    }

    fn gradients(&self, images: &Tensor<f64>, target: usize) -> Result<(Vec<f64>, Tensor<f64>), XaiError> {
        let s = self.scores(images, target)?;
        let w = self.weights[target].data();
        let g = Tensor::from_fn(images.shape().to_vec(), |i| w[i % w.len()]);
        Ok((s, g))
    }
}

/// A cooperative game over segment-presence players.
pub trait CoalitionGame: Sync {
    fn players(&self) -> usize;
    /// Game value for every coalition, in order.
    fn values(&self, coalitions: &[Vec<bool>]) -> Result<Vec<f64>, XaiError>;
}

/// A game defined by a plain function of the presence vector.
pub struct FnGame<F> {
    pub players: usize,
    pub f: F,
}

impl<F: Fn(&[bool]) -> f64 + Sync> CoalitionGame for FnGame<F> {
    fn players(&self) -> usize {
        self.players
    }

    fn values(&self, coalitions: &[Vec<bool>]) -> Result<Vec<f64>, XaiError> {
        Ok(coalitions.iter().map(|z| (self.f)(z)).collect())
    }
}

/// Target-class score of an image whose absent segments are replaced by `fill`.
pub struct ImageGame<'a> {
    pub model: &'a dyn ScoreModel,
    pub image: &'a Tensor<f64>,
    pub fill: &'a Tensor<f64>,
    pub mask: &'a SuperpixelMask,
    pub target: usize,
}

const QUERY_CHUNK: usize = 64;

impl ImageGame<'_> {
    pub fn validate(&self) -> Result<(), XaiError> {
        self.model.check_target(self.target)?;
        self.model.check_image(self.image)?;
        self.model.check_image(self.fill)?;
        let s = self.image.shape();
        if (s[0], s[1]) != (self.mask.height, self.mask.width) {
            return Err(XaiError::Invalid(format!(
                "mask is {}x{} but the image is {}x{}",
                self.mask.height, self.mask.width, s[0], s[1]
            )));
        }
        Ok(())
    }
}

impl CoalitionGame for ImageGame<'_> {
    fn players(&self) -> usize {
        self.mask.segments
    }

    fn values(&self, coalitions: &[Vec<bool>]) -> Result<Vec<f64>, XaiError> {
        let shape = self.image.shape();
        let chunks: Vec<Result<Vec<f64>, XaiError>> = coalitions
            .par_chunks(QUERY_CHUNK)
            .map(|chunk| {
                let mut data = Vec::with_capacity(chunk.len() * self.image.len());
                for z in chunk {
                    self.mask.compose_into(self.image, self.fill, z, &mut data);
                }
                let batch = Tensor::new(vec![chunk.len(), shape[0], shape[1], shape[2]], data)
                    .expect("composed batch matches image shape");
                self.model.scores(&batch, self.target)
            })
            .collect();
        let mut out = Vec::with_capacity(coalitions.len());
        for c in chunks {
            out.extend(c?);
        }
        if let Some(i) = out.iter().position(|v| !v.is_finite()) {
            return Err(XaiError::NonFiniteOutput { sample: i });
        }
        Ok(out)
    }
}
