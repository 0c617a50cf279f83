//! Minibatch training, learning-rate schedules, random search and checkpoints.

mod checkpoint;
mod optimizer;
mod search;

use serde::{Deserialize, Serialize};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use optimizer::{Optimizer, OptimizerKind};
pub use search::{draw_pairs, random_search, ProbeObjective, ProbeRecord, SearchOutcome, SearchRange, StubObjective, TrainingObjective};

pub use crate::arch::StepDecay;
use crate::arch::{BuildError, ModelSpec, TrainHints};
use crate::data::TensorSet;
use crate::layers::LayerError;
use crate::network::{loss_and_grads, predict, ForwardOptions, ModelParams};
use crate::ops::Mode;
use crate::seed;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize, loss: f64 },
    #[error("every one of the {} search probes diverged", log.len())]
    SearchDiverged { log: Vec<ProbeRecord> },
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint fingerprint {found} does not match model `{model}` ({expected})")]
    Compatibility { model: String, expected: String, found: String },
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Overrides every dropout layer's rate when set.
    pub dropout: Option<f64>,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub step_decay: Option<StepDecay>,
    pub batch_size: usize,
    pub seed: u64,
    /// All kernels reduce in a fixed order; the flag is recorded for audit.
    pub deterministic: bool,
    /// Leave parameters of frozen layers untouched.
    pub honor_frozen: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            dropout: None,
            epochs: 100,
            optimizer: OptimizerKind::Adam,
            step_decay: None,
            batch_size: 32,
            seed: 0,
            deterministic: true,
            honor_frozen: true,
        }
    }
}

impl TrainConfig {
    pub fn from_hints(hints: &TrainHints) -> Self {
        Self {
            learning_rate: hints.learning_rate,
            dropout: hints.dropout,
            epochs: hints.epochs,
            step_decay: hints.step_decay,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(TrainError::Config(format!("learning rate {} outside (0, 1]", self.learning_rate)));
        }
        if let Some(d) = self.dropout {
            if !(0.0..=0.9).contains(&d) {
                return Err(TrainError::Config(format!("dropout {d} outside [0, 0.9]")));
            }
        }
        if let Some(s) = self.step_decay {
            if !(s.factor > 0.0 && s.factor <= 1.0) {
                return Err(TrainError::Config(format!("decay factor {} outside (0, 1]", s.factor)));
            }
            if s.period == 0 {
                return Err(TrainError::Config("decay period must be at least one epoch".into()));
            }
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// `base * factor^floor(epoch / period)` with a schedule, `base` otherwise.
pub fn effective_lr(config: &TrainConfig, epoch: usize) -> f64 {
    match config.step_decay {
        Some(StepDecay { factor, period }) if period > 0 => {
            config.learning_rate * factor.powi((epoch / period) as i32)
        }
        _ => config.learning_rate,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("epoch record serialises") + "\n")
            .collect()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Inference-mode accuracy over a tensor set.
pub fn accuracy(spec: &ModelSpec, params: &ModelParams, set: &TensorSet, chunk: usize) -> Result<f64, TrainError> {
    if set.is_empty() {
        return Ok(0.0);
    }
    let probs = probabilities(spec, params, set, chunk)?;
    let correct = probs
        .iter()
        .zip(&set.labels)
        .filter(|(p, &l)| crate::metrics::argmax(p) == l)
        .count();
    Ok(correct as f64 / set.len() as f64)
}

/// Inference-mode class probabilities per sample.
pub fn probabilities(spec: &ModelSpec, params: &ModelParams, set: &TensorSet, chunk: usize) -> Result<Vec<Vec<f64>>, TrainError> {
    let mut out = Vec::with_capacity(set.len());
    for b in set.batches(chunk, 0, false) {
        let p = predict(spec, params, &b.inputs)?;
        for r in 0..b.len() {
            out.push(p.outer(r).iter().map(|&v| v as f64).collect());
        }
    }
    Ok(out)
}

/// Run `config.epochs` epochs of minibatch training. The batch order is reshuffled every epoch.
pub fn train(
    spec: &ModelSpec,
    params: ModelParams,
    train_set: &TensorSet,
    test_set: Option<&TensorSet>,
    config: &TrainConfig,
) -> Result<(ModelParams, TrainHistory), TrainError> {
    train_with(spec, params, train_set, test_set, config, |_| {})
}

/// [`train`] with a callback after each epoch.
pub fn train_with(
    spec: &ModelSpec,
    mut params: ModelParams,
    train_set: &TensorSet,
    test_set: Option<&TensorSet>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ModelParams, TrainHistory), TrainError> {
    config.validate()?;
    let spec = match config.dropout {
        Some(d) => spec.with_dropout(d),
        None => spec.clone(),
    };
    if train_set.image_size != spec.input_shape[0] || spec.input_shape[0] != spec.input_shape[1] {
        return Err(TrainError::Config(format!(
            "images are {0}x{0} but `{1}` expects {2:?}",
            train_set.image_size, spec.name, spec.input_shape
        )));
    }
    let mut history = TrainHistory::default();
    let mut opt = Optimizer::new(config.optimizer);
    let options = ForwardOptions {
        track_frozen: !config.honor_frozen,
    };
    for epoch in 0..config.epochs {
        let lr = effective_lr(config, epoch);
        let order = train_set.order(seed::derive(config.seed, &[epoch as u64]), true);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for (bi, idx) in order.chunks(config.batch_size).enumerate() {
            let batch = train_set.gather(idx);
            let step_seed = seed::derive(config.seed, &[epoch as u64, bi as u64, 1]);
            let lg = loss_and_grads(&spec, &params, &batch.inputs, &batch.labels, Mode::Train, step_seed, options)?;
            if !lg.loss.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: bi,
                    loss: lg.loss,
                });
            }
            loss_sum += lg.loss * batch.len() as f64;
            for (r, &l) in batch.labels.iter().enumerate() {
                let row: Vec<f64> = lg.probs.outer(r).iter().map(|&v| v as f64).collect();
                if crate::metrics::argmax(&row) == l {
                    correct += 1;
                }
            }
            params.apply_running(lg.running).map_err(|source| LayerError {
                layer: "batchnorm".into(),
                source,
            })?;
            opt.step(&mut params, &lg.grads, lr, config.honor_frozen);
        }
        let n = train_set.len().max(1) as f64;
        let test_acc = match test_set {
            Some(t) if !t.is_empty() => Some(accuracy(&spec, &params, t, 64)?),
            _ => None,
        };
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            test_acc,
            lr,
        };
        on_epoch(&rec);
        history.epochs.push(rec);
    }
    Ok((params, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn schedule_examples() {
        let mut c = TrainConfig::default();
        assert!((0..200).all(|e| effective_lr(&c, e) == 0.001));
        c.step_decay = Some(StepDecay { factor: 0.5, period: 20 });
        assert_eq!(effective_lr(&c, 19), 0.001);
        assert_eq!(effective_lr(&c, 20), 0.0005);
        c.step_decay = Some(StepDecay { factor: 1.0, period: 3 });
        assert!((0..50).all(|e| effective_lr(&c, e) == 0.001));
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            TrainConfig { learning_rate: 0.0, ..ok.clone() },
            TrainConfig { learning_rate: 1.5, ..ok.clone() },
            TrainConfig { dropout: Some(0.95), ..ok.clone() },
            TrainConfig { batch_size: 0, ..ok.clone() },
            TrainConfig {
                step_decay: Some(StepDecay { factor: 1.2, period: 2 }),
                ..ok.clone()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    proptest! {
        #[test]
        fn lr_nonincreasing(factor in 0.01f64..=1.0, period in 1usize..30, base in 1e-5f64..1.0) {
            let c = TrainConfig {
                learning_rate: base,
                step_decay: Some(StepDecay { factor, period }),
                ..TrainConfig::default()
            };
            for e in 0..120 {
                prop_assert!(effective_lr(&c, e + 1) <= effective_lr(&c, e));
            }
        }
    }
}
