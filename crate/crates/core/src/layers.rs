//! Declarative layer descriptions, static shape inference and parameter layout.

use serde::{Deserialize, Serialize};

use crate::arch::InceptionModuleConfig;
use crate::ops::{window_geometry, ActivationKind, Padding};
use crate::tensor::TensorError;

/// 1x1 projection applied to the skip path when a residual block changes shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub filters: usize,
    pub stride: usize,
    pub batchnorm: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerKind {
    Conv2d {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        bias: bool,
    },
    Maxpool2d {
        window: usize,
        stride: usize,
        padding: Padding,
    },
    Avgpool2d {
        window: usize,
        stride: usize,
        padding: Padding,
    },
    Dense {
        units: usize,
    },
    Batchnorm {
        momentum: f64,
        epsilon: f64,
    },
    Dropout {
        rate: f64,
    },
    Flatten,
    GlobalAvgPool,
    Activation {
        function: ActivationKind,
    },
    /// Saves the current tensor as the skip input of the next `ResidualAdd`.
    ResidualBegin,
    /// Pops the saved skip input, projects it if declared, and adds it to the current tensor.
    ResidualAdd {
        projection: Option<Projection>,
    },
    /// Runs each branch on the same input and concatenates the results along channels.
    Concat {
        branches: Vec<Vec<LayerConfig>>,
        module: Option<InceptionModuleConfig>,
    },
}

impl LayerKind {
    pub fn label(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Maxpool2d { .. } => "maxpool2d",
            LayerKind::Avgpool2d { .. } => "avgpool2d",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Batchnorm { .. } => "batchnorm",
            LayerKind::Dropout { .. } => "dropout",
            LayerKind::Flatten => "flatten",
            LayerKind::GlobalAvgPool => "global-avg-pool",
            LayerKind::Activation { .. } => "activation",
            LayerKind::ResidualBegin => "residual-begin",
            LayerKind::ResidualAdd { .. } => "residual-add",
            LayerKind::Concat { .. } => "concat",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    /// Parameters of a frozen layer are left untouched by the trainer when it honours freezing.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub frozen: bool,
}

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPSILON: f64 = 1e-3;

impl LayerConfig {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
            frozen: false,
        }
    }

    pub fn conv(name: impl Into<String>, filters: usize, kernel: usize, stride: usize, padding: Padding) -> Self {
        Self::new(
            name,
            LayerKind::Conv2d {
                filters,
                kernel,
                stride,
                padding,
                bias: true,
            },
        )
    }

    /// Convolution without bias, for use in front of batch normalisation.
    pub fn conv_no_bias(name: impl Into<String>, filters: usize, kernel: usize, stride: usize, padding: Padding) -> Self {
        Self::new(
            name,
            LayerKind::Conv2d {
                filters,
                kernel,
                stride,
                padding,
                bias: false,
            },
        )
    }

    pub fn max_pool(name: impl Into<String>, window: usize, stride: usize, padding: Padding) -> Self {
        Self::new(name, LayerKind::Maxpool2d { window, stride, padding })
    }

    pub fn avg_pool(name: impl Into<String>, window: usize, stride: usize, padding: Padding) -> Self {
        Self::new(name, LayerKind::Avgpool2d { window, stride, padding })
    }

    pub fn dense(name: impl Into<String>, units: usize) -> Self {
        Self::new(name, LayerKind::Dense { units })
    }

    pub fn batchnorm(name: impl Into<String>) -> Self {
        Self::new(
            name,
            LayerKind::Batchnorm {
                momentum: BN_MOMENTUM,
                epsilon: BN_EPSILON,
            },
        )
    }

    pub fn dropout(name: impl Into<String>, rate: f64) -> Self {
        Self::new(name, LayerKind::Dropout { rate })
    }

    pub fn flatten(name: impl Into<String>) -> Self {
        Self::new(name, LayerKind::Flatten)
    }

    pub fn global_avg_pool(name: impl Into<String>) -> Self {
        Self::new(name, LayerKind::GlobalAvgPool)
    }

    pub fn activation(name: impl Into<String>, function: ActivationKind) -> Self {
        Self::new(name, LayerKind::Activation { function })
    }

    pub fn residual_begin(name: impl Into<String>) -> Self {
        Self::new(name, LayerKind::ResidualBegin)
    }

    pub fn residual_add(name: impl Into<String>, projection: Option<Projection>) -> Self {
        Self::new(name, LayerKind::ResidualAdd { projection })
    }

    pub fn concat(name: impl Into<String>, branches: Vec<Vec<LayerConfig>>, module: Option<InceptionModuleConfig>) -> Self {
        Self::new(name, LayerKind::Concat { branches, module })
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        if let LayerKind::Concat { branches, .. } = &mut self.kind {
            for l in branches.iter_mut().flatten() {
                l.frozen = true;
            }
        }
        self
    }

    fn validate(&self) -> Result<(), LayerError> {
        let bad = |msg: String| {
            Err(LayerError {
                layer: self.name.clone(),
                source: TensorError::Invalid {
                    op: "layer config",
                    message: msg,
                },
            })
        };
        match &self.kind {
            LayerKind::Conv2d { filters, kernel, stride, .. } if *filters == 0 || *kernel == 0 || *stride == 0 => {
                bad(format!("conv extents must be positive (filters {filters}, kernel {kernel}, stride {stride})"))
            }
            LayerKind::Maxpool2d { window, stride, .. } | LayerKind::Avgpool2d { window, stride, .. }
                if *window == 0 || *stride == 0 =>
            {
                bad(format!("pool window {window} and stride {stride} must be positive"))
            }
            LayerKind::Dense { units: 0 } => bad("dense layer needs at least one unit".into()),
            LayerKind::Dropout { rate } if !(0.0..1.0).contains(rate) => bad(format!("dropout rate {rate} outside [0, 1)")),
            LayerKind::ResidualAdd {
                projection: Some(p),
            } if p.filters == 0 || p.stride == 0 => bad("projection extents must be positive".into()),
            LayerKind::Concat { branches, .. } if branches.is_empty() => bad("concat needs at least one branch".into()),
            _ => Ok(()),
        }
    }
}

/// Failure attributed to a named layer.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("layer `{layer}`: {source}")]
pub struct LayerError {
    pub layer: String,
    #[source]
    pub source: TensorError,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamRole {
    Kernel,
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }
}

/// One tensor of a model's parameter set, as declared by its layers.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
    pub frozen: bool,
    /// Inputs feeding each output unit; scales the initialiser.
    pub fan_in: usize,
}

/// Output shape of one layer (batch axis excluded).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    pub name: String,
    pub kind: &'static str,
    pub output: Vec<usize>,
}

#[derive(Default)]
pub(crate) struct Walk {
    pub trace: Vec<LayerTrace>,
    pub params: Vec<ParamSpec>,
}

fn spatial(layer: &LayerConfig, shape: &[usize]) -> Result<(usize, usize, usize), LayerError> {
    match shape {
        [h, w, c] => Ok((*h, *w, *c)),
        _ => Err(LayerError {
            layer: layer.name.clone(),
            source: TensorError::Rank {
                op: "shape inference",
                expected: 3,
                shape: shape.to_vec(),
            },
        }),
    }
}

fn bn_params(walk: &mut Walk, prefix: &str, c: usize, frozen: bool) {
    for (suffix, role) in [
        ("gamma", ParamRole::Gamma),
        ("beta", ParamRole::Beta),
        ("running_mean", ParamRole::RunningMean),
        ("running_var", ParamRole::RunningVar),
    ] {
        walk.params.push(ParamSpec {
            name: format!("{prefix}.{suffix}"),
            shape: vec![c],
            role,
            frozen,
            fan_in: 1,
        });
    }
}

/// Propagate `shape` (batch axis excluded) through `layers`, recording output shapes and parameters.
///
/// `top_level` controls whether nested branch layers are added to the trace.
pub(crate) fn walk_layers(
    layers: &[LayerConfig],
    mut shape: Vec<usize>,
    walk: &mut Walk,
    top_level: bool,
) -> Result<Vec<usize>, LayerError> {
    let mut skips: Vec<Vec<usize>> = Vec::new();
    for layer in layers {
        layer.validate()?;
        let wrap = |source: TensorError| LayerError {
            layer: layer.name.clone(),
            source,
        };
        shape = match &layer.kind {
            LayerKind::Conv2d {
                filters,
                kernel,
                stride,
                padding,
                bias,
            } => {
                let (h, w, c) = spatial(layer, &shape)?;
                let gy = window_geometry("conv2d", "height", h, *kernel, *stride, *padding).map_err(wrap)?;
                let gx = window_geometry("conv2d", "width", w, *kernel, *stride, *padding).map_err(wrap)?;
                let fan_in = kernel * kernel * c;
                walk.params.push(ParamSpec {
                    name: format!("{}.kernel", layer.name),
                    shape: vec![*kernel, *kernel, c, *filters],
                    role: ParamRole::Kernel,
                    frozen: layer.frozen,
                    fan_in,
                });
                if *bias {
                    walk.params.push(ParamSpec {
                        name: format!("{}.bias", layer.name),
                        shape: vec![*filters],
                        role: ParamRole::Bias,
                        frozen: layer.frozen,
                        fan_in,
                    });
                }
                vec![gy.out, gx.out, *filters]
            }
            LayerKind::Maxpool2d { window, stride, padding } | LayerKind::Avgpool2d { window, stride, padding } => {
                let (h, w, c) = spatial(layer, &shape)?;
                let gy = window_geometry("pool2d", "height", h, *window, *stride, *padding).map_err(wrap)?;
                let gx = window_geometry("pool2d", "width", w, *window, *stride, *padding).map_err(wrap)?;
                vec![gy.out, gx.out, c]
            }
            LayerKind::Dense { units } => {
                let [n] = shape[..] else {
                    return Err(wrap(TensorError::Rank {
                        op: "dense",
                        expected: 1,
                        shape: shape.clone(),
                    }));
                };
                walk.params.push(ParamSpec {
                    name: format!("{}.weight", layer.name),
                    shape: vec![n, *units],
                    role: ParamRole::Weight,
                    frozen: layer.frozen,
                    fan_in: n,
                });
                walk.params.push(ParamSpec {
                    name: format!("{}.bias", layer.name),
                    shape: vec![*units],
                    role: ParamRole::Bias,
                    frozen: layer.frozen,
                    fan_in: n,
                });
                vec![*units]
            }
            LayerKind::Batchnorm { .. } => {
                let c = *shape.last().ok_or_else(|| {
                    wrap(TensorError::Invalid {
                        op: "batchnorm",
                        message: "scalar input".into(),
                    })
                })?;
                bn_params(walk, &layer.name, c, layer.frozen);
                shape
            }
            LayerKind::Dropout { .. } | LayerKind::Activation { .. } => shape,
            LayerKind::Flatten => vec![shape.iter().product()],
            LayerKind::GlobalAvgPool => {
                let (_, _, c) = spatial(layer, &shape)?;
                vec![c]
            }
            LayerKind::ResidualBegin => {
                skips.push(shape.clone());
                shape
            }
            LayerKind::ResidualAdd { projection } => {
                let skip = skips.pop().ok_or_else(|| {
                    wrap(TensorError::State("residual-add without matching residual-begin".into()))
                })?;
                let skip = match projection {
                    None => skip,
                    Some(p) => {
                        let (h, w, c) = spatial(layer, &skip)?;
                        let gy = window_geometry("projection", "height", h, 1, p.stride, Padding::Same).map_err(wrap)?;
                        let gx = window_geometry("projection", "width", w, 1, p.stride, Padding::Same).map_err(wrap)?;
                        walk.params.push(ParamSpec {
                            name: format!("{}.proj.kernel", layer.name),
                            shape: vec![1, 1, c, p.filters],
                            role: ParamRole::Kernel,
                            frozen: layer.frozen,
                            fan_in: c,
                        });
                        if p.batchnorm {
                            bn_params(walk, &format!("{}.proj_bn", layer.name), p.filters, layer.frozen);
                        } else {
                            walk.params.push(ParamSpec {
                                name: format!("{}.proj.bias", layer.name),
                                shape: vec![p.filters],
                                role: ParamRole::Bias,
                                frozen: layer.frozen,
                                fan_in: c,
                            });
                        }
                        vec![gy.out, gx.out, p.filters]
                    }
                };
                if skip != shape {
                    let axis = skip.iter().zip(&shape).position(|(a, b)| a != b).unwrap_or(0);
                    return Err(wrap(TensorError::Dimension {
                        op: "residual_add",
                        axis: if axis + 1 == shape.len() { "channels" } else { "spatial" },
                        expected: shape.get(axis).copied().unwrap_or(0),
                        actual: skip.get(axis).copied().unwrap_or(0),
                    }));
                }
                shape
            }
            LayerKind::Concat { branches, module } => {
                let (h, w, _) = spatial(layer, &shape)?;
                let mut channels = 0;
                for branch in branches {
                    let out = walk_layers(branch, shape.clone(), walk, false)?;
                    let (bh, bw, bc) = spatial(layer, &out)?;
                    if (bh, bw) != (h, w) {
                        return Err(wrap(TensorError::Dimension {
                            op: "concat",
                            axis: "spatial",
                            expected: h,
                            actual: bh,
                        }));
                    }
                    channels += bc;
                }
                if let Some(m) = module {
                    if m.output_channels() != channels {
                        return Err(wrap(TensorError::Dimension {
                            op: "inception",
                            axis: "channels",
                            expected: m.output_channels(),
                            actual: channels,
                        }));
                    }
                }
                vec![h, w, channels]
            }
        };
        if shape.contains(&0) {
            return Err(wrap(TensorError::Invalid {
                op: "shape inference",
                message: format!("empty output {shape:?}"),
            }));
        }
        if top_level {
            walk.trace.push(LayerTrace {
                name: layer.name.clone(),
                kind: layer.kind.label(),
                output: shape.clone(),
            });
        }
    }
    if !skips.is_empty() {
        return Err(LayerError {
            layer: layers.last().map(|l| l.name.clone()).unwrap_or_default(),
            source: TensorError::State(format!("{} residual-begin marker(s) never closed", skips.len())),
        });
    }
    Ok(shape)
}

/// Visit every layer, descending into concat branches.
pub fn for_each_layer<'a>(layers: &'a [LayerConfig], f: &mut impl FnMut(&'a LayerConfig)) {
    for l in layers {
        f(l);
        if let LayerKind::Concat { branches, .. } = &l.kind {
            for b in branches {
                for_each_layer(b, f);
            }
        }
    }
}

pub fn for_each_layer_mut(layers: &mut [LayerConfig], f: &mut impl FnMut(&mut LayerConfig)) {
    for l in layers {
        f(l);
        if let LayerKind::Concat { branches, .. } = &mut l.kind {
            for b in branches {
                for_each_layer_mut(b, f);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn residual_markers_must_balance() {
        let layers = vec![LayerConfig::residual_begin("b")];
        let mut w = Walk::default();
        assert!(walk_layers(&layers, vec![4, 4, 2], &mut w, true).is_err());
        let layers = vec![LayerConfig::residual_add("a", None)];
        assert!(walk_layers(&layers, vec![4, 4, 2], &mut Walk::default(), true).is_err());
    }

    #[test]
    fn residual_projection_reconciles_channels() {
        let body = vec![
            LayerConfig::residual_begin("b.begin"),
            LayerConfig::conv("b.conv", 8, 3, 2, Padding::Same),
        ];
        let mut plain = body.clone();
        plain.push(LayerConfig::residual_add("b.add", None));
        let err = walk_layers(&plain, vec![6, 6, 4], &mut Walk::default(), true).unwrap_err();
        assert_eq!(err.layer, "b.add");
        let mut projected = body;
        projected.push(LayerConfig::residual_add(
            "b.add",
            Some(Projection {
                filters: 8,
                stride: 2,
                batchnorm: false,
            }),
        ));
        let mut w = Walk::default();
        let out = walk_layers(&projected, vec![6, 6, 4], &mut w, true).unwrap();
        assert_eq!(out, vec![3, 3, 8]);
        assert!(w.params.iter().any(|p| p.name == "b.add.proj.kernel" && p.shape == vec![1, 1, 4, 8]));
    }

    #[test]
    fn invalid_configs_rejected() {
        for l in [
            LayerConfig::conv("c", 0, 3, 1, Padding::Valid),
            LayerConfig::dropout("d", 1.0),
            LayerConfig::dense("f", 0),
            LayerConfig::max_pool("p", 2, 0, Padding::Valid),
        ] {
            assert!(walk_layers(&[l], vec![8, 8, 3], &mut Walk::default(), true).is_err());
        }
    }
}
