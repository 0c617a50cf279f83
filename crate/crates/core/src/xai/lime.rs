use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{CoalitionGame, ImageGame, ScoreModel};
use super::segment::SuperpixelMask;
use super::{AttributionMap, Explanation, ExplanationParams, Method, XaiError};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LimeOptions {
    pub n_samples: usize,
    pub top_k: usize,
    pub seed: u64,
    /// Proximity kernel width; `0.25 * sqrt(M)` when unset.
    pub kernel_width: Option<f64>,
    pub ridge: f64,
}

impl Default for LimeOptions {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            top_k: 10,
            seed: 0,
            kernel_width: None,
            ridge: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LimeFit {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub kernel_width: f64,
}

/// Fit a weighted ridge surrogate `y ~ b + sum_i c_i z_i` over random presence vectors.
///
/// The first sample keeps every segment. A sample's weight is `exp(-d^2 / width^2)` where
/// `d` is its Euclidean distance to the all-present vector. The intercept is not penalised.
pub fn lime_fit(game: &dyn CoalitionGame, options: &LimeOptions) -> Result<LimeFit, XaiError> {
    let m = game.players();
    if options.n_samples < m + 2 {
        return Err(XaiError::Invalid(format!(
            "LIME needs at least {} samples for {m} segments, got {}",
            m + 2,
            options.n_samples
        )));
    }
    if !(options.ridge >= 0.0) {
        return Err(XaiError::Invalid(format!("ridge strength {} must be non-negative", options.ridge)));
    }
    let width = options.kernel_width.unwrap_or(0.25 * (m as f64).sqrt());
    if !(width > 0.0) {
        return Err(XaiError::Invalid(format!("kernel width {width} must be positive")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut samples = vec![vec![true; m]];
    for _ in 1..options.n_samples {
        samples.push((0..m).map(|_| rng.gen_bool(0.5)).collect());
    }
    let y = game.values(&samples)?;

    let p = m + 1;
    let mut ata = DMatrix::<f64>::zeros(p, p);
    let mut aty = DVector::<f64>::zeros(p);
    let mut row = vec![0.0; p];
    for (z, &yv) in samples.iter().zip(&y) {
        let absent = z.iter().filter(|&&b| !b).count() as f64;
        let w = (-absent / (width * width)).exp();
        row[0] = 1.0;
        for (r, &b) in row[1..].iter_mut().zip(z) {
            *r = if b { 1.0 } else { 0.0 };
        }
        for i in 0..p {
            if row[i] == 0.0 {
                continue;
            }
            aty[i] += w * row[i] * yv;
            for j in 0..p {
                ata[(i, j)] += w * row[i] * row[j];
            }
        }
    }
    for i in 1..p {
        ata[(i, i)] += options.ridge;
    }
    let beta = ata
        .clone()
        .cholesky()
        .map(|c| c.solve(&aty))
        .or_else(|| ata.lu().solve(&aty))
        .ok_or_else(|| XaiError::Invalid("LIME surrogate is singular; increase ridge or samples".into()))?;
    Ok(LimeFit {
        intercept: beta[0],
        coefficients: beta.iter().skip(1).copied().collect(),
        kernel_width: width,
    })
}

/// LIME over superpixels: absent segments take their pixels from `fill`.
pub fn lime_explain(
    model: &dyn ScoreModel,
    x: &Tensor<f64>,
    mask: &SuperpixelMask,
    fill: &Tensor<f64>,
    target: usize,
    options: &LimeOptions,
) -> Result<(Explanation, LimeFit), XaiError> {
    let game = ImageGame {
        model,
        image: x,
        fill,
        mask,
        target,
    };
    game.validate()?;
    let fit = lime_fit(&game, options)?;
    let map = AttributionMap {
        method: Method::Lime,
        target_class: target,
        values: Tensor::new(vec![mask.segments], fit.coefficients.clone()).expect("one coefficient per segment"),
    };
    let params = ExplanationParams {
        seed: Some(options.seed),
        n_samples: Some(options.n_samples),
        kernel_width: Some(fit.kernel_width),
        ridge: Some(options.ridge),
        ..ExplanationParams::default()
    };
    Ok((Explanation::new(&map, mask, options.top_k, params)?, fit))
}
