use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{train, TrainConfig, TrainError};
use crate::arch::ModelSpec;
use crate::data::TensorSet;
use crate::network::ModelParams;
use crate::seed;

/// Search space and budget for random hyper-parameter search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchRange {
    /// Learning rates are drawn log-uniformly from this interval.
    pub lr: [f64; 2],
    /// Dropout rates are drawn uniformly from this interval.
    pub dropout: [f64; 2],
    pub iterations: usize,
    pub probe_epochs: usize,
    pub seed: u64,
}

impl Default for SearchRange {
    fn default() -> Self {
        Self {
            lr: [1e-4, 0.1],
            dropout: [0.0, 0.9],
            iterations: 10,
            probe_epochs: 3,
            seed: 0,
        }
    }
}

impl SearchRange {
    pub fn validate(&self) -> Result<(), TrainError> {
        let [lo, hi] = self.lr;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(TrainError::Config(format!("learning-rate range [{lo}, {hi}] must satisfy 0 < lo <= hi <= 1")));
        }
        let [dlo, dhi] = self.dropout;
        if !(0.0 <= dlo && dlo <= dhi && dhi <= 0.9) {
            return Err(TrainError::Config(format!("dropout range [{dlo}, {dhi}] must lie within [0, 0.9]")));
        }
        if self.iterations == 0 {
            return Err(TrainError::Config("search needs at least one iteration".into()));
        }
        Ok(())
    }
}

/// The `(lr, dropout)` pairs a search with this range and seed evaluates, in order.
pub fn draw_pairs(range: &SearchRange) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(range.seed);
    let (llo, lhi) = (range.lr[0].ln(), range.lr[1].ln());
    (0..range.iterations)
        .map(|_| {
            let u: f64 = rng.gen();
            let v: f64 = rng.gen();
            let lr = (llo + u * (lhi - llo)).exp().clamp(range.lr[0], range.lr[1]);
            let dropout = range.dropout[0] + v * (range.dropout[1] - range.dropout[0]);
            (lr, dropout)
        })
        .collect()
}

/// Scores one hyper-parameter draw; higher is better.
pub trait ProbeObjective {
    fn probe(&mut self, iteration: usize, lr: f64, dropout: f64, epochs: usize) -> Result<f64, TrainError>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub iteration: usize,
    pub lr: f64,
    pub dropout: f64,
    /// `None` when the probe diverged.
    pub test_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best_iteration: usize,
    pub best_lr: f64,
    pub best_dropout: f64,
    pub best_test_acc: f64,
    pub log: Vec<ProbeRecord>,
}

impl SearchOutcome {
    /// `iteration,lr,dropout,test_acc` rows; diverged probes have an empty score.
    pub fn probe_csv(&self) -> String {
        let mut s = String::from("iteration,lr,dropout,test_acc\n");
        for r in &self.log {
            let acc = r.test_acc.map(|a| a.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{},{}\n", r.iteration, r.lr, r.dropout, acc));
        }
        s
    }
}

/// Evaluate every draw and keep the best; ties go to the earliest draw.
///
/// A probe that reports a non-finite loss or score is logged as diverged and skipped.
pub fn random_search(objective: &mut dyn ProbeObjective, range: &SearchRange) -> Result<SearchOutcome, TrainError> {
    range.validate()?;
    let mut log = Vec::with_capacity(range.iterations);
    let mut best: Option<(usize, f64)> = None;
    for (i, (lr, dropout)) in draw_pairs(range).into_iter().enumerate() {
        let score = match objective.probe(i, lr, dropout, range.probe_epochs) {
            Ok(a) if a.is_finite() => Some(a),
            Ok(_) | Err(TrainError::NonFinite { .. }) => None,
            Err(e) => return Err(e),
        };
        if let Some(a) = score {
            if best.is_none_or(|(_, b)| a > b) {
                best = Some((i, a));
            }
        }
        log.push(ProbeRecord {
            iteration: i,
            lr,
            dropout,
            test_acc: score,
        });
    }
    let Some((bi, acc)) = best else {
        return Err(TrainError::SearchDiverged { log });
    };
    Ok(SearchOutcome {
        best_iteration: bi,
        best_lr: log[bi].lr,
        best_dropout: log[bi].dropout,
        best_test_acc: acc,
        log,
    })
}

/// Deterministic objective whose score peaks at iteration `peak` (0-based).
#[derive(Clone, Copy, Debug)]
pub struct StubObjective {
    pub peak: usize,
}

impl ProbeObjective for StubObjective {
    fn probe(&mut self, iteration: usize, _lr: f64, _dropout: f64, _epochs: usize) -> Result<f64, TrainError> {
        Ok(0.9 - 0.05 * iteration.abs_diff(self.peak) as f64)
    }
}

/// Trains a fresh model per draw and scores it by final test accuracy.
pub struct TrainingObjective<'a> {
    pub spec: &'a ModelSpec,
    pub train_set: &'a TensorSet,
    pub test_set: &'a TensorSet,
    pub base: TrainConfig,
}

impl ProbeObjective for TrainingObjective<'_> {
    fn probe(&mut self, iteration: usize, lr: f64, dropout: f64, epochs: usize) -> Result<f64, TrainError> {
        let seed = seed::derive(self.base.seed, &[iteration as u64]);
        let config = TrainConfig {
            learning_rate: lr,
            dropout: Some(dropout),
            epochs,
            seed,
            ..self.base.clone()
        };
        let params = ModelParams::init(self.spec, seed)?;
        let (_, history) = train(self.spec, params, self.train_set, Some(self.test_set), &config)?;
        Ok(history.last().and_then(|r| r.test_acc).unwrap_or(0.0))
    }
}
