//! Parameter storage and graph construction for a [`ModelSpec`].

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{BuildError, ModelSpec};
use crate::autograd::{Graph, NodeId};
use crate::layers::{LayerConfig, LayerError, LayerKind, ParamRole};
use crate::ops::{self, ActivationKind, BatchStats, Mode, Padding, PoolKind};
use crate::tensor::{Real, Tensor, TensorError};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T: Real = f32> {
    pub tensor: Tensor<T>,
    pub role: ParamRole,
    pub frozen: bool,
}

/// Named parameter set of a model, in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Real = f32> {
    entries: IndexMap<String, ParamEntry<T>>,
}

impl<T: Real> ModelParams<T> {
    /// Fan-in scaled uniform weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero biases,
    /// unit scales, zero shifts, and running statistics at mean 0 / variance 1.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self, BuildError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = IndexMap::new();
        for p in spec.param_specs()? {
            let tensor = match p.role {
                ParamRole::Kernel | ParamRole::Weight => {
                    let bound = (6.0 / p.fan_in.max(1) as f64).sqrt();
                    Tensor::from_fn(p.shape.clone(), |_| T::lit(rng.gen_range(-bound..bound)))
                }
                ParamRole::Bias | ParamRole::Beta | ParamRole::RunningMean => Tensor::zeros(p.shape.clone()),
                ParamRole::Gamma | ParamRole::RunningVar => Tensor::full(p.shape.clone(), T::one()),
            };
            entries.insert(
                p.name,
                ParamEntry {
                    tensor,
                    role: p.role,
                    frozen: p.frozen,
                },
            );
        }
        Ok(Self { entries })
    }

    /// Assemble from named tensors, checking them against the model's layout.
    pub fn from_tensors(spec: &ModelSpec, mut tensors: IndexMap<String, Tensor<T>>) -> Result<Self, BuildError> {
        let mut entries = IndexMap::new();
        for p in spec.param_specs()? {
            let t = tensors
                .shift_remove(&p.name)
                .ok_or_else(|| BuildError::Invalid(format!("missing parameter `{}`", p.name)))?;
            if t.shape() != p.shape.as_slice() {
                return Err(BuildError::Invalid(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.shape
                )));
            }
            entries.insert(
                p.name,
                ParamEntry {
                    tensor: t,
                    role: p.role,
                    frozen: p.frozen,
                },
            );
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(BuildError::Invalid(format!("unexpected parameter `{extra}`")));
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|e| &mut e.tensor)
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Total scalar count across every tensor, running statistics included.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|e| e.tensor.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            tensor: e.tensor.cast(),
                            role: e.role,
                            frozen: e.frozen,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Replace the tensor `name`, keeping its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<(), TensorError> {
        let e = self.entries.get_mut(name).ok_or_else(|| TensorError::Invalid {
            op: "set parameter",
            message: format!("unknown parameter `{name}`"),
        })?;
        tensor.expect_shape("set parameter", e.tensor.shape())?;
        e.tensor = tensor;
        Ok(())
    }

    /// Write back running statistics produced by a training-mode forward pass.
    pub fn apply_running(&mut self, updates: Vec<(String, BatchStats<T>)>) -> Result<(), TensorError> {
        for (prefix, stats) in updates {
            let c = stats.mean.len();
            self.set(&format!("{prefix}.running_mean"), Tensor::new(vec![c], stats.mean)?)?;
            self.set(&format!("{prefix}.running_var"), Tensor::new(vec![c], stats.var)?)?;
        }
        Ok(())
    }
}

/// Graph-building options.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    /// Register frozen parameters as differentiable leaves; otherwise they enter as constants.
    pub track_frozen: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self { track_frozen: true }
    }
}

/// Handles produced by [`forward`].
pub struct Forward<T> {
    /// Pre-softmax scores, shape `[batch, classes]`.
    pub logits: NodeId,
    /// Running statistics to store after a training step, keyed by batch-norm layer prefix.
    pub running: Vec<(String, BatchStats<T>)>,
}

struct Builder<'p, 's, T: Real> {
    params: &'p ModelParams<T>,
    spec: &'s ModelSpec,
    options: ForwardOptions,
    running: Vec<(String, BatchStats<T>)>,
}

impl<'p, 's, T: Real> Builder<'p, 's, T> {
    fn param(&self, g: &mut Graph<'p, T>, layer: &str, name: &str) -> Result<NodeId, LayerError> {
        let entry = self.params.entry(name).ok_or_else(|| LayerError {
            layer: layer.to_string(),
            source: TensorError::State(format!("model `{}` has no parameter `{name}`", self.spec.name)),
        })?;
        if entry.frozen && !self.options.track_frozen {
            Ok(g.constant_ref(&entry.tensor))
        } else {
            Ok(g.param(name, &entry.tensor))
        }
    }

    fn batchnorm(
        &mut self,
        g: &mut Graph<'p, T>,
        layer: &str,
        prefix: &str,
        x: NodeId,
        momentum: f64,
        epsilon: f64,
    ) -> Result<NodeId, LayerError> {
        let gamma = self.param(g, layer, &format!("{prefix}.gamma"))?;
        let beta = self.param(g, layer, &format!("{prefix}.beta"))?;
        let stat = |n: &str| {
            self.params.get(&format!("{prefix}.{n}")).map(|t| t.data().to_vec()).ok_or_else(|| LayerError {
                layer: layer.to_string(),
                source: TensorError::State(format!("missing running statistic `{prefix}.{n}`")),
            })
        };
        let running = BatchStats {
            mean: stat("running_mean")?,
            var: stat("running_var")?,
        };
        let (out, update) = g
            .batchnorm(x, gamma, beta, &running, momentum, epsilon)
            .map_err(|source| LayerError {
                layer: layer.to_string(),
                source,
            })?;
        if let Some(u) = update {
            self.running.push((prefix.to_string(), u));
        }
        Ok(out)
    }

    fn layers(&mut self, g: &mut Graph<'p, T>, layers: &[LayerConfig], mut x: NodeId, top: bool) -> Result<NodeId, LayerError> {
        let mut skips = Vec::new();
        for (i, layer) in layers.iter().enumerate() {
            let name = layer.name.as_str();
            let wrap = |source: TensorError| LayerError {
                layer: name.to_string(),
                source,
            };
            x = match &layer.kind {
                LayerKind::Conv2d {
                    stride, padding, bias, ..
                } => {
                    let k = self.param(g, name, &format!("{name}.kernel"))?;
                    let b = if *bias {
                        Some(self.param(g, name, &format!("{name}.bias"))?)
                    } else {
                        None
                    };
                    g.conv2d(x, k, b, *stride, *padding).map_err(wrap)?
                }
                LayerKind::Maxpool2d { window, stride, padding } => {
                    g.pool2d(x, PoolKind::Max, *window, *stride, *padding).map_err(wrap)?
                }
                LayerKind::Avgpool2d { window, stride, padding } => {
                    g.pool2d(x, PoolKind::Avg, *window, *stride, *padding).map_err(wrap)?
                }
                LayerKind::Dense { .. } => {
                    let w = self.param(g, name, &format!("{name}.weight"))?;
                    let b = self.param(g, name, &format!("{name}.bias"))?;
                    g.dense(x, w, Some(b)).map_err(wrap)?
                }
                LayerKind::Batchnorm { momentum, epsilon } => self.batchnorm(g, name, name, x, *momentum, *epsilon)?,
                LayerKind::Dropout { rate } => g.dropout(x, *rate).map_err(wrap)?,
                LayerKind::Flatten => g.flatten(x).map_err(wrap)?,
                LayerKind::GlobalAvgPool => g.global_avg_pool(x).map_err(wrap)?,
                LayerKind::Activation { function } => {
                    if top && i + 1 == layers.len() && *function == ActivationKind::Softmax {
                        // Logits are returned; callers apply softmax or the fused loss.
                        continue;
                    }
                    g.activation(x, *function).map_err(wrap)?
                }
                LayerKind::ResidualBegin => {
                    skips.push(x);
                    x
                }
                LayerKind::ResidualAdd { projection } => {
                    let mut skip = skips.pop().ok_or_else(|| {
                        wrap(TensorError::State("residual-add without matching residual-begin".into()))
                    })?;
                    if let Some(p) = projection {
                        let k = self.param(g, name, &format!("{name}.proj.kernel"))?;
                        if p.batchnorm {
                            skip = g.conv2d(skip, k, None, p.stride, Padding::Same).map_err(wrap)?;
                            skip = self.batchnorm(
                                g,
                                name,
                                &format!("{name}.proj_bn"),
                                skip,
                                crate::layers::BN_MOMENTUM,
                                crate::layers::BN_EPSILON,
                            )?;
                        } else {
                            let b = self.param(g, name, &format!("{name}.proj.bias"))?;
                            skip = g.conv2d(skip, k, Some(b), p.stride, Padding::Same).map_err(wrap)?;
                        }
                    }
                    g.add(x, skip).map_err(wrap)?
                }
                LayerKind::Concat { branches, .. } => {
                    let mut outs = Vec::with_capacity(branches.len());
                    for b in branches {
                        outs.push(self.layers(g, b, x, false)?);
                    }
                    g.concat(&outs).map_err(wrap)?
                }
            };
        }
        Ok(x)
    }
}

/// Record the model's forward pass on `input` (shape `[batch, H, W, C]`) into `g`.
pub fn forward<'p, T: Real>(
    g: &mut Graph<'p, T>,
    spec: &ModelSpec,
    params: &'p ModelParams<T>,
    input: NodeId,
    options: ForwardOptions,
) -> Result<Forward<T>, LayerError> {
    let shape = g.value(input).shape();
    if shape.len() != 4 || shape[1..] != spec.input_shape {
        return Err(LayerError {
            layer: "input".into(),
            source: TensorError::Invalid {
                op: "forward",
                message: format!("expected [batch, {:?}], got {:?}", spec.input_shape, shape),
            },
        });
    }
    let mut b = Builder {
        params,
        spec,
        options,
        running: Vec::new(),
    };
    let logits = b.layers(g, &spec.layers, input, true)?;
    Ok(Forward {
        logits,
        running: b.running,
    })
}

/// Inference-mode logits for a batch.
pub fn logits<T: Real>(spec: &ModelSpec, params: &ModelParams<T>, x: &Tensor<T>) -> Result<Tensor<T>, LayerError> {
    let mut g = Graph::new(Mode::Infer, 0);
    let input = g.input(x.clone());
    let f = forward(&mut g, spec, params, input, ForwardOptions::default())?;
    Ok(g.value(f.logits).clone())
}

/// Inference-mode class probabilities, shape `[batch, classes]`.
pub fn predict<T: Real>(spec: &ModelSpec, params: &ModelParams<T>, x: &Tensor<T>) -> Result<Tensor<T>, LayerError> {
    let l = logits(spec, params, x)?;
    ops::softmax(&l).map_err(|source| LayerError {
        layer: "output".into(),
        source,
    })
}

/// Probabilities for a large batch, evaluated `chunk` rows at a time.
pub fn predict_chunked<T: Real>(
    spec: &ModelSpec,
    params: &ModelParams<T>,
    x: &Tensor<T>,
    chunk: usize,
) -> Result<Tensor<T>, LayerError> {
    let n = x.shape()[0];
    let row = x.len() / n.max(1);
    let mut rows = Vec::with_capacity(n * spec.output_classes);
    for start in (0..n).step_by(chunk.max(1)) {
        let end = (start + chunk.max(1)).min(n);
        let mut shape = x.shape().to_vec();
        shape[0] = end - start;
        let part = Tensor::new(shape, x.data()[start * row..end * row].to_vec()).map_err(|source| LayerError {
            layer: "input".into(),
            source,
        })?;
        rows.extend_from_slice(predict(spec, params, &part)?.data());
    }
    Tensor::new(vec![n, spec.output_classes], rows).map_err(|source| LayerError {
        layer: "output".into(),
        source,
    })
}

/// Result of one differentiated training-mode evaluation.
pub struct LossGrad<T: Real> {
    pub loss: f64,
    pub probs: Tensor<T>,
    pub grads: IndexMap<String, Tensor<T>>,
    pub running: Vec<(String, BatchStats<T>)>,
}

/// Mean cross-entropy of the batch and its gradient for every tracked parameter.
pub fn loss_and_grads<T: Real>(
    spec: &ModelSpec,
    params: &ModelParams<T>,
    x: &Tensor<T>,
    labels: &[usize],
    mode: Mode,
    seed: u64,
    options: ForwardOptions,
) -> Result<LossGrad<T>, LayerError> {
    let mut g = Graph::new(mode, seed);
    let input = g.input(x.clone());
    let f = forward(&mut g, spec, params, input, options)?;
    let wrap = |source| LayerError {
        layer: "loss".into(),
        source,
    };
    let loss = g.cross_entropy(f.logits, labels).map_err(wrap)?;
    let lv = g.value(loss).data()[0].as_f64();
    let probs = ops::softmax(g.value(f.logits)).map_err(wrap)?;
    let grads = g.backward(loss).map_err(wrap)?.into_named();
    Ok(LossGrad {
        loss: lv,
        probs,
        grads,
        running: f.running,
    })
}

/// Probability of `target` for each row and its gradient with respect to the input batch.
pub fn input_gradient<T: Real>(
    spec: &ModelSpec,
    params: &ModelParams<T>,
    x: &Tensor<T>,
    target: usize,
) -> Result<(Vec<T>, Tensor<T>), LayerError> {
    let mut g = Graph::new(Mode::Infer, 0);
    let input = g.variable(x.clone());
    let options = ForwardOptions { track_frozen: false };
    let f = forward(&mut g, spec, params, input, options)?;
    let wrap = |source| LayerError {
        layer: "output".into(),
        source,
    };
    let probs = g.softmax(f.logits).map_err(wrap)?;
    let col = g.select_column(probs, target).map_err(wrap)?;
    let values = g.value(col).data().to_vec();
    let total = g.sum(col);
    let grads = g.backward(total).map_err(wrap)?;
    Ok((values, grads.wrt(input)))
}
