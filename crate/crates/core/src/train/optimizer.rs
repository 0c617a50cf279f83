use std::collections::HashMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::network::ModelParams;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "sgd-momentum" => Ok(Self::SgdMomentum),
            "adam" => Ok(Self::Adam),
            other => Err(format!("unknown optimizer `{other}` (expected sgd, sgd-momentum or adam)")),
        }
    }
}

pub const MOMENTUM: f64 = 0.9;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-7;

struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// First-order optimiser with per-parameter state.
pub struct Optimizer {
    kind: OptimizerKind,
    state: HashMap<String, Slot>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            state: HashMap::new(),
            steps: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Update every trainable parameter that has a gradient. Frozen parameters are skipped
    /// when `honor_frozen` is set.
    pub fn step(&mut self, params: &mut ModelParams, grads: &IndexMap<String, Tensor>, lr: f64, honor_frozen: bool) {
        self.steps += 1;
        let t = self.steps as i32;
        for (name, entry) in params.iter_mut() {
            if !entry.role.trainable() || (honor_frozen && entry.frozen) {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            let w = entry.tensor.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, &g) in w.iter_mut().zip(g.data()) {
                        *w = (*w as f64 - lr * g as f64) as f32;
                    }
                }
                OptimizerKind::SgdMomentum => {
                    let slot = self.state.entry(name.to_string()).or_insert_with(|| Slot {
                        m: vec![0.0; w.len()],
                        v: Vec::new(),
                    });
                    for ((w, &g), m) in w.iter_mut().zip(g.data()).zip(slot.m.iter_mut()) {
                        *m = MOMENTUM * *m + g as f64;
                        *w = (*w as f64 - lr * *m) as f32;
                    }
                }
                OptimizerKind::Adam => {
                    let slot = self.state.entry(name.to_string()).or_insert_with(|| Slot {
                        m: vec![0.0; w.len()],
                        v: vec![0.0; w.len()],
                    });
                    let c1 = 1.0 - ADAM_BETA1.powi(t);
                    let c2 = 1.0 - ADAM_BETA2.powi(t);
                    for (i, (w, &g)) in w.iter_mut().zip(g.data()).enumerate() {
                        let g = g as f64;
                        slot.m[i] = ADAM_BETA1 * slot.m[i] + (1.0 - ADAM_BETA1) * g;
                        slot.v[i] = ADAM_BETA2 * slot.v[i] + (1.0 - ADAM_BETA2) * g * g;
                        let mh = slot.m[i] / c1;
                        let vh = slot.v[i] / c2;
                        *w = (*w as f64 - lr * mh / (vh.sqrt() + ADAM_EPSILON)) as f32;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_lenet, LeNetVariant};

    #[test]
    fn adam_first_step_moves_by_lr() {
        let spec = build_lenet(LeNetVariant::A, [32, 32, 3]).unwrap();
        let mut params = ModelParams::<f32>::init(&spec, 0).unwrap();
        let before = params.get("output.bias").unwrap().clone();
        let mut grads = IndexMap::new();
        grads.insert("output.bias".to_string(), Tensor::full(vec![5], 3.0f32));
        let mut opt = Optimizer::new(OptimizerKind::Adam);
        opt.step(&mut params, &grads, 0.01, true);
        for (a, b) in params.get("output.bias").unwrap().data().iter().zip(before.data()) {
            assert!(((b - a) - 0.01).abs() < 1e-6);
        }
        assert_eq!(params.get("conv1.kernel"), ModelParams::<f32>::init(&spec, 0).unwrap().get("conv1.kernel"));
    }

    #[test]
    fn sgd_step() {
        let spec = build_lenet(LeNetVariant::A, [32, 32, 3]).unwrap();
        let mut params = ModelParams::<f32>::init(&spec, 0).unwrap();
        let mut grads = IndexMap::new();
        grads.insert("output.bias".to_string(), Tensor::full(vec![5], 2.0f32));
        Optimizer::new(OptimizerKind::Sgd).step(&mut params, &grads, 0.5, true);
        assert!(params.get("output.bias").unwrap().data().iter().all(|&v| v == -1.0));
    }
}
