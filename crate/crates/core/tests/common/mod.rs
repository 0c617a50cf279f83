//! Independent oracles shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use indexmap::IndexMap;
use ovaxai::arch::{inception_module, InceptionModuleConfig, ModelSpec, TrainHints};
use ovaxai::autograd::Graph;
use ovaxai::layers::{LayerConfig, Projection};
use ovaxai::network::{forward, ForwardOptions, ModelParams};
use ovaxai::ops::{ActivationKind, Mode, Padding};
use ovaxai::tensor::Tensor;
use ovaxai::xai::{segment_grid, ScoreModel, SuperpixelMask, XaiError};
use ovaxai::NodeId;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;
pub const FD_REL_TOL: f64 = 1e-3;
pub const FD_ABS_TOL: f64 = 1e-5;

/// Loss, branch fingerprint and (optionally) gradients for every leaf.
pub type Eval = Box<dyn Fn(&[Tensor<f64>], bool) -> (f64, u64, Vec<Tensor<f64>>)>;

pub struct GradCase {
    pub leaves: Vec<Tensor<f64>>,
    /// Which leaves may be perturbed.
    pub checkable: Vec<bool>,
    pub eval: Eval,
}

#[derive(Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub skipped: usize,
    pub failures: Vec<String>,
}

impl GradReport {
    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.failures.extend(other.failures);
    }
}

pub fn within_tol(analytic: f64, numeric: f64) -> bool {
    let d = (analytic - numeric).abs();
    d <= FD_ABS_TOL || d <= FD_REL_TOL * analytic.abs().max(numeric.abs())
}

/// Central differences on `coords` random coordinates. Coordinates whose perturbation crosses a
/// ReLU or max-pool branch are skipped.
pub fn check_gradients(case: &GradCase, coords: usize, seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let (_, fp0, grads) = (case.eval)(&case.leaves, true);
    let candidates: Vec<usize> = (0..case.leaves.len()).filter(|&i| case.checkable[i]).collect();
    let mut report = GradReport::default();
    for _ in 0..coords {
        let leaf = candidates[rng.gen_range(0..candidates.len())];
        let idx = rng.gen_range(0..case.leaves[leaf].len());
        let shifted = |d: f64| {
            let mut l = case.leaves.clone();
            l[leaf].data_mut()[idx] += d;
            let (loss, fp, _) = (case.eval)(&l, false);
            (loss, fp)
        };
        let (lp, fpp) = shifted(FD_STEP);
        let (lm, fpm) = shifted(-FD_STEP);
        if fpp != fp0 || fpm != fp0 {
            report.skipped += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * FD_STEP);
        let analytic = grads[leaf].data()[idx];
        report.checked += 1;
        if !within_tol(analytic, numeric) {
            report.failures.push(format!("leaf {leaf}[{idx}]: analytic {analytic:e}, numeric {numeric:e}"));
        }
    }
    report
}

fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// `sum(out * r)` with a fixed random `r`, so no coordinate cancels by symmetry.
fn projected_loss(g: &mut Graph<'_, f64>, out: NodeId, seed: u64) -> NodeId {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(out).shape().to_vec();
    let r = g.input(uniform(shape, -1.0, 1.0, &mut rng));
    let prod = g.mul(out, r).expect("projection matches output");
    g.sum(prod)
}

/// A case built from graph operations on variable leaves.
pub fn op_case(
    leaves: Vec<Tensor<f64>>,
    mode: Mode,
    seed: u64,
    build: impl Fn(&mut Graph<'_, f64>, &[NodeId]) -> NodeId + 'static,
) -> GradCase {
    let n = leaves.len();
    GradCase {
        leaves,
        checkable: vec![true; n],
        eval: Box::new(move |leaves, want| {
            let mut g = Graph::new(mode, 0);
            let ids: Vec<NodeId> = leaves.iter().map(|t| g.variable(t.clone())).collect();
            let out = build(&mut g, &ids);
            let loss = projected_loss(&mut g, out, seed);
            let value = g.value(loss).data()[0];
            let fp = g.branch_fingerprint();
            let grads = if want {
                let gr = g.backward(loss).expect("backward");
                ids.iter().map(|&i| gr.wrt(i)).collect()
            } else {
                Vec::new()
            };
            (value, fp, grads)
        }),
    }
}

pub fn conv_case(seed: u64) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stride = rng.gen_range(1..=2);
    let padding = if rng.gen_bool(0.5) { Padding::Same } else { Padding::Valid };
    let k = [1, 3, 5][rng.gen_range(0..3)];
    let c = rng.gen_range(1..=3);
    let f = rng.gen_range(1..=4);
    let leaves = vec![
        uniform(vec![2, 6, 7, c], -1.0, 1.0, &mut rng),
        uniform(vec![k, k, c, f], -0.5, 0.5, &mut rng),
        uniform(vec![f], -0.5, 0.5, &mut rng),
    ];
    op_case(leaves, Mode::Infer, seed, move |g, ids| {
        g.conv2d(ids[0], ids[1], Some(ids[2]), stride, padding).expect("conv")
    })
}

pub fn dense_case(seed: u64) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, i, o) = (rng.gen_range(1..4), rng.gen_range(2..9), rng.gen_range(1..6));
    let leaves = vec![
        uniform(vec![n, i], -1.0, 1.0, &mut rng),
        uniform(vec![i, o], -1.0, 1.0, &mut rng),
        uniform(vec![o], -1.0, 1.0, &mut rng),
    ];
    op_case(leaves, Mode::Infer, seed, |g, ids| g.dense(ids[0], ids[1], Some(ids[2])).expect("dense"))
}

pub fn batchnorm_case(seed: u64) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = rng.gen_range(1..4);
    let leaves = vec![
        uniform(vec![3, 3, 2, c], -2.0, 2.0, &mut rng),
        uniform(vec![c], 0.5, 1.5, &mut rng),
        uniform(vec![c], -0.5, 0.5, &mut rng),
    ];
    let running = ovaxai::ops::BatchStats {
        mean: vec![0.0; c],
        var: vec![1.0; c],
    };
    op_case(leaves, Mode::Train, seed, move |g, ids| {
        g.batchnorm(ids[0], ids[1], ids[2], &running, 0.9, 1e-3).expect("batchnorm").0
    })
}

/// A case that differentiates a whole model with respect to its input and trainable parameters.
pub fn model_case(spec: ModelSpec, batch: usize, mode: Mode, seed: u64) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = ModelParams::<f64>::init(&spec, seed).expect("init");
    let mut names = Vec::new();
    let mut leaves = vec![uniform(
        vec![batch, spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]],
        0.0,
        1.0,
        &mut rng,
    )];
    let mut checkable = vec![true];
    for (name, e) in init.iter() {
        let mut t = e.tensor.clone();
        let trainable = e.role.trainable();
        if trainable && !name.ends_with(".gamma") {
            // Move off the zero/one defaults so every parameter matters.
            for v in t.data_mut() {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
        names.push(name.to_string());
        leaves.push(t);
        checkable.push(trainable);
    }
    GradCase {
        leaves,
        checkable,
        eval: Box::new(move |leaves, want| {
            let tensors: IndexMap<String, Tensor<f64>> = names.iter().cloned().zip(leaves[1..].iter().cloned()).collect();
            let params = ModelParams::from_tensors(&spec, tensors).expect("params");
            let mut g = Graph::new(mode, 0);
            let x = g.variable(leaves[0].clone());
            let f = forward(&mut g, &spec, &params, x, ForwardOptions::default()).expect("forward");
            let loss = projected_loss(&mut g, f.logits, seed);
            let value = g.value(loss).data()[0];
            let fp = g.branch_fingerprint();
            let grads = if want {
                let gr = g.backward(loss).expect("backward");
                let mut out = vec![gr.wrt(x)];
                out.extend(names.iter().map(|n| gr.param(n).unwrap_or_else(|| params.get(n).unwrap().zeros_like())));
                out
            } else {
                Vec::new()
            };
            (value, fp, grads)
        }),
    }
}

fn spec(name: &str, input: [usize; 3], layers: Vec<LayerConfig>) -> ModelSpec {
    let s = ModelSpec {
        name: name.into(),
        input_shape: input,
        layers,
        output_classes: 5,
        hints: TrainHints::default(),
    };
    s.validate().expect("test spec is valid");
    s
}

/// One basic residual block between a stem and a dense head; even seeds use a projection skip.
pub fn residual_spec(seed: u64) -> ModelSpec {
    let project = seed % 2 == 0;
    let (filters, stride) = if project { (6, 2) } else { (4, 1) };
    spec(
        "residual-block",
        [6, 6, 3],
        vec![
            LayerConfig::conv("stem", 4, 3, 1, Padding::Same),
            LayerConfig::activation("stem.relu", ActivationKind::Relu),
            LayerConfig::residual_begin("b.begin"),
            LayerConfig::conv_no_bias("b.conv1", filters, 3, stride, Padding::Same),
            LayerConfig::batchnorm("b.bn1"),
            LayerConfig::activation("b.relu1", ActivationKind::Relu),
            LayerConfig::conv_no_bias("b.conv2", filters, 3, 1, Padding::Same),
            LayerConfig::batchnorm("b.bn2"),
            LayerConfig::residual_add(
                "b.add",
                project.then_some(Projection {
                    filters,
                    stride,
                    batchnorm: true,
                }),
            ),
            LayerConfig::activation("b.relu", ActivationKind::Relu),
            LayerConfig::global_avg_pool("gap"),
            LayerConfig::dense("output", 5),
            LayerConfig::activation("softmax", ActivationKind::Softmax),
        ],
    )
}

/// A small inception module; even seeds use the batch-normalised style.
pub fn inception_spec(seed: u64) -> ModelSpec {
    let bn = seed % 2 == 0;
    let act = if seed % 4 < 2 { ActivationKind::Relu } else { ActivationKind::Tanh };
    let m = InceptionModuleConfig::new([2, 3, 2, 2, 1, 2]).expect("filters");
    spec(
        "inception-module",
        [5, 5, 3],
        vec![
            inception_module("m", m, bn, act),
            LayerConfig::global_avg_pool("gap"),
            LayerConfig::dense("output", 5),
            LayerConfig::activation("softmax", ActivationKind::Softmax),
        ],
    )
}

/// Shapley values by averaging marginal contributions over every player ordering.
pub fn permutation_shapley(m: usize, v: &dyn Fn(&[bool]) -> f64) -> Vec<f64> {
    fn permute(k: usize, perm: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k == perm.len() {
            out.push(perm.clone());
            return;
        }
        for i in k..perm.len() {
            perm.swap(k, i);
            permute(k + 1, perm, out);
            perm.swap(k, i);
        }
    }
    let mut perms = Vec::new();
    permute(0, &mut (0..m).collect(), &mut perms);
    let mut phi = vec![0.0; m];
    for p in &perms {
        let mut z = vec![false; m];
        let mut prev = v(&z);
        for &i in p {
            z[i] = true;
            let cur = v(&z);
            phi[i] += cur - prev;
            prev = cur;
        }
    }
    phi.iter().map(|s| s / perms.len() as f64).collect()
}

/// A seeded lookup-table game: every coalition has an arbitrary value.
pub fn random_game(m: usize, seed: u64) -> impl Fn(&[bool]) -> f64 + Sync {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table: Vec<f64> = (0..1usize << m).map(|_| rng.gen_range(-1.0..1.0)).collect();
    move |z: &[bool]| {
        let bits = z.iter().enumerate().fold(0usize, |acc, (i, &b)| acc | (usize::from(b) << i));
        table[bits]
    }
}

/// Sigmoid of a weighted sum of segment means, plus a faint dependence on the whole image.
pub struct PlantedModel {
    pub mask: SuperpixelMask,
    pub channels: usize,
    pub segments: Vec<(usize, f64)>,
    pub offset: f64,
    pub background: f64,
}

impl PlantedModel {
    pub fn new(size: usize, grid: usize, segments: Vec<(usize, f64)>, offset: f64) -> Self {
        Self {
            mask: segment_grid(size, size, grid).expect("grid"),
            channels: 3,
            segments,
            offset,
            background: 0.02,
        }
    }

    fn pieces(&self, img: &[f64]) -> (f64, f64) {
        let sizes = self.mask.sizes();
        let c = self.channels;
        let mut seg = vec![0.0; self.mask.segments];
        for (p, &id) in self.mask.ids.iter().enumerate() {
            seg[id] += img[p * c..(p + 1) * c].iter().sum::<f64>();
        }
        let z: f64 = self
            .segments
            .iter()
            .map(|&(s, w)| w * seg[s] / (sizes[s] * c) as f64)
            .sum::<f64>()
            - self.offset;
        let mean = img.iter().sum::<f64>() / img.len() as f64;
        (z, mean)
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl ScoreModel for PlantedModel {
    fn image_shape(&self) -> [usize; 3] {
        [self.mask.height, self.mask.width, self.channels]
    }

    fn num_classes(&self) -> usize {
        1
    }

    fn scores(&self, images: &Tensor<f64>, target: usize) -> Result<Vec<f64>, XaiError> {
        self.check_target(target)?;
        Ok((0..images.shape()[0])
            .map(|r| {
                let (z, mean) = self.pieces(images.outer(r));
                sigmoid(z) + self.background * mean
            })
            .collect())
    }

    fn gradients(&self, images: &Tensor<f64>, target: usize) -> Result<(Vec<f64>, Tensor<f64>), XaiError> {
        let scores = self.scores(images, target)?;
        let sizes = self.mask.sizes();
        let c = self.channels;
        let row = images.len() / images.shape()[0];
        let mut grad = Vec::with_capacity(images.len());
        for r in 0..images.shape()[0] {
            let (z, _) = self.pieces(images.outer(r));
            let ds = sigmoid(z) * (1.0 - sigmoid(z));
            let mut w = vec![0.0; self.mask.segments];
            for &(s, ws) in &self.segments {
                w[s] += ws / (sizes[s] * c) as f64;
            }
            for &id in &self.mask.ids {
                for _ in 0..c {
                    grad.push(ds * w[id] + self.background / row as f64);
                }
            }
        }
        Ok((scores, Tensor::new(images.shape().to_vec(), grad).expect("gradient shape")))
    }
}

pub fn random_image(size: usize, lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    uniform(vec![size, size, 3], lo, hi, &mut rng)
}
