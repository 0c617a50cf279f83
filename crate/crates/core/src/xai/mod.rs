//! Post-hoc attribution: Integrated Gradients, LIME and Kernel SHAP over grid superpixels,
//! plus cross-method agreement and overlay rendering.

mod compare;
mod ig;
mod lime;
mod model;
mod render;
mod segment;
mod shap;

use serde::{Deserialize, Serialize};

pub use compare::{compare_explanations, jaccard, spearman, AgreementReport};
pub use ig::{integrated_gradients, Baseline};
pub use lime::{lime_explain, lime_fit, LimeFit, LimeOptions};
pub use model::{CoalitionGame, FnGame, ImageGame, LinearModel, NetworkModel, ScoreModel};
pub use render::{render_overlay, Overlay, OverlayStyle};
pub use segment::{fill_image, segment_grid, Fill, MaskInfo, SuperpixelMask};
pub use shap::{kernel_shap, shapley_values, ShapOptions, SHAP_EXACT_LIMIT, SHAP_MAX_PLAYERS};

use crate::layers::LayerError;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum XaiError {
    #[error("invalid attribution request: {0}")]
    Invalid(String),
    #[error("non-finite gradient at integration step {step}")]
    NonFiniteGradient { step: usize },
    #[error("non-finite model output for perturbation {sample}")]
    NonFiniteOutput { sample: usize },
    #[error("explanations are not comparable: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Layer(#[from] LayerError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ig,
    Lime,
    Shap,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Ig, Method::Lime, Method::Shap];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ig => "ig",
            Method::Lime => "lime",
            Method::Shap => "shap",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = XaiError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ig" => Ok(Method::Ig),
            "lime" => Ok(Method::Lime),
            "shap" => Ok(Method::Shap),
            other => Err(XaiError::Invalid(format!("unknown method `{other}` (expected ig, lime or shap)"))),
        }
    }
}

/// Relevance scores for one target class: `[H, W, C]` for pixel methods, `[M]` for segment methods.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap {
    pub method: Method,
    pub target_class: usize,
    pub values: Tensor<f64>,
}

impl AttributionMap {
    /// Per-segment relevance; pixel maps are summed within each segment.
    pub fn segment_scores(&self, mask: &SuperpixelMask) -> Result<Vec<f64>, XaiError> {
        match self.values.rank() {
            1 if self.values.len() == mask.segments => Ok(self.values.data().to_vec()),
            3 => mask.segment_sum(&self.values),
            _ => Err(XaiError::Invalid(format!(
                "attribution of shape {:?} does not fit a {}-segment mask",
                self.values.shape(),
                mask.segments
            ))),
        }
    }

    pub fn total(&self) -> f64 {
        self.values.data().iter().sum()
    }
}

/// Settings recorded alongside an explanation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExplanationParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_width: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ridge: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fill: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub method: Method,
    pub target_class: usize,
    pub segment_scores: Vec<f64>,
    /// Segment ids by descending `|score|`, ties by id.
    pub top_k: Vec<usize>,
    pub mask: MaskInfo,
    pub parameters: ExplanationParams,
}

impl Explanation {
    pub fn new(
        map: &AttributionMap,
        mask: &SuperpixelMask,
        k: usize,
        parameters: ExplanationParams,
    ) -> Result<Self, XaiError> {
        let segment_scores = map.segment_scores(mask)?;
        Ok(Self {
            method: map.method,
            target_class: map.target_class,
            top_k: top_k(&segment_scores, k),
            segment_scores,
            mask: mask.info(),
            parameters,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("explanation serialises")
    }
}

/// Indices of the `k` largest `|score|`, ties broken by lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].abs().total_cmp(&scores[a].abs()).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_orders_by_magnitude_then_id() {
        assert_eq!(top_k(&[0.1, -0.5, 0.5, 0.0, 0.2], 3), vec![1, 2, 4]);
        assert_eq!(top_k(&[1.0, 2.0], 10), vec![1, 0]);
    }

    #[test]
    fn method_names() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("gradcam".parse::<Method>().is_err());
    }
}
