use serde::{Deserialize, Serialize};

use super::model::ScoreModel;
use super::{AttributionMap, Method, XaiError};
use crate::tensor::Tensor;

/// Reference input for Integrated Gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    #[default]
    Black,
    /// The dataset mean image.
    Mean,
}

const PATH_CHUNK: usize = 32;

/// `(x - baseline) * mean of grad F_target` over the midpoints `(k + 0.5) / steps` of the
/// straight path from `baseline` to `x`.
pub fn integrated_gradients(
    model: &dyn ScoreModel,
    x: &Tensor<f64>,
    baseline: &Tensor<f64>,
    steps: usize,
    target: usize,
) -> Result<AttributionMap, XaiError> {
    model.check_target(target)?;
    model.check_image(x)?;
    model.check_image(baseline)?;
    if steps == 0 {
        return Err(XaiError::Invalid("integration needs at least one step".into()));
    }
    let n = x.len();
    let delta: Vec<f64> = x.data().iter().zip(baseline.data()).map(|(a, b)| a - b).collect();
    // Running mean, so a constant gradient is reproduced exactly.
    let mut mean = vec![0.0f64; n];
    let mut seen = 0usize;
    for start in (0..steps).step_by(PATH_CHUNK) {
        let end = (start + PATH_CHUNK).min(steps);
        let mut data = Vec::with_capacity((end - start) * n);
        for k in start..end {
            let alpha = (k as f64 + 0.5) / steps as f64;
            data.extend(baseline.data().iter().zip(&delta).map(|(b, d)| b + alpha * d));
        }
        let mut shape = vec![end - start];
        shape.extend_from_slice(x.shape());
        let batch = Tensor::new(shape, data).expect("path batch matches image shape");
        let (_, grads) = model.gradients(&batch, target)?;
        for (r, k) in (start..end).enumerate() {
            let g = grads.outer(r);
            if g.iter().any(|v| !v.is_finite()) {
                return Err(XaiError::NonFiniteGradient { step: k });
            }
            seen += 1;
            for (m, &gi) in mean.iter_mut().zip(g) {
                *m += (gi - *m) / seen as f64;
            }
        }
    }
    let values = Tensor::new(x.shape().to_vec(), delta.iter().zip(&mean).map(|(d, m)| d * m).collect())
        .expect("attribution matches image shape");
    Ok(AttributionMap {
        method: Method::Ig,
        target_class: target,
        values,
    })
}
