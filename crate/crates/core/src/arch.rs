//! Declarative builders for the fifteen model variants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::layers::{
    for_each_layer, for_each_layer_mut, walk_layers, LayerConfig, LayerKind, LayerTrace, ParamSpec, Projection,
    LayerError, Walk,
};
use crate::ops::{ActivationKind, Padding};

pub const NUM_CLASSES: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum BuildError {
    #[error("unknown architecture `{0}`")]
    UnknownArch(String),
    #[error("{arch} does not accept input {got:?}: {reason}")]
    InputShape {
        arch: String,
        got: [usize; 3],
        reason: String,
    },
    #[error("{arch}: {reason}")]
    Unsupported { arch: String, reason: String },
    #[error(transparent)]
    Shape(#[from] LayerError),
    #[error("invalid model: {0}")]
    Invalid(String),
}

/// Piecewise-constant learning-rate schedule: multiply by `factor` every `period` epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub factor: f64,
    pub period: usize,
}

/// Default training settings attached to a variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHints {
    pub learning_rate: f64,
    pub epochs: usize,
    pub dropout: Option<f64>,
    pub step_decay: Option<StepDecay>,
}

impl Default for TrainHints {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            epochs: 80,
            dropout: None,
            step_decay: None,
        }
    }
}

/// Filter counts of one inception module, in the order
/// (1x1, 3x3, 3x3-reduce, 5x5, 5x5-reduce, pool-projection).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InceptionModuleConfig {
    pub one: usize,
    pub three: usize,
    pub three_reduce: usize,
    pub five: usize,
    pub five_reduce: usize,
    pub pool_proj: usize,
}

impl InceptionModuleConfig {
    pub fn new(filters: [usize; 6]) -> Result<Self, BuildError> {
        if filters.contains(&0) {
            return Err(BuildError::Invalid(format!("inception filters must be positive, got {filters:?}")));
        }
        let [one, three, three_reduce, five, five_reduce, pool_proj] = filters;
        Ok(Self {
            one,
            three,
            three_reduce,
            five,
            five_reduce,
            pool_proj,
        })
    }

    pub fn filters(&self) -> [usize; 6] {
        [self.one, self.three, self.three_reduce, self.five, self.five_reduce, self.pool_proj]
    }

    pub fn output_channels(&self) -> usize {
        self.one + self.three + self.five + self.pool_proj
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerConfig>,
    pub output_classes: usize,
    pub hints: TrainHints,
}

impl ModelSpec {
    fn walk(&self) -> Result<(Walk, Vec<usize>), BuildError> {
        let mut walk = Walk::default();
        let out = walk_layers(&self.layers, self.input_shape.to_vec(), &mut walk, true)?;
        Ok((walk, out))
    }

    /// Full static check: shapes compose, names are unique, and the model ends in a softmax over the classes.
    pub fn validate(&self) -> Result<(), BuildError> {
        let (walk, out) = self.walk()?;
        if out != [self.output_classes] {
            return Err(BuildError::Invalid(format!(
                "final shape {out:?} does not match {} classes",
                self.output_classes
            )));
        }
        match self.layers.last().map(|l| &l.kind) {
            Some(LayerKind::Activation {
                function: ActivationKind::Softmax,
            }) => {}
            _ => return Err(BuildError::Invalid("final layer must be a softmax activation".into())),
        }
        let mut names = std::collections::HashSet::new();
        let mut dup = None;
        for_each_layer(&self.layers, &mut |l| {
            if !names.insert(l.name.as_str()) && dup.is_none() {
                dup = Some(l.name.clone());
            }
        });
        if let Some(d) = dup {
            return Err(BuildError::Invalid(format!("duplicate layer name `{d}`")));
        }
        let mut pnames = std::collections::HashSet::new();
        for p in &walk.params {
            if !pnames.insert(p.name.as_str()) {
                return Err(BuildError::Invalid(format!("duplicate parameter `{}`", p.name)));
            }
        }
        Ok(())
    }

    /// Output shape after every top-level layer (batch axis excluded).
    pub fn shape_trace(&self) -> Result<Vec<LayerTrace>, BuildError> {
        Ok(self.walk()?.0.trace)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>, BuildError> {
        Ok(self.walk()?.1)
    }

    /// Every parameter tensor in declaration order.
    pub fn param_specs(&self) -> Result<Vec<ParamSpec>, BuildError> {
        Ok(self.walk()?.0.params)
    }

    /// Number of trainable scalars (running statistics excluded).
    pub fn trainable_count(&self) -> Result<usize, BuildError> {
        Ok(self
            .param_specs()?
            .iter()
            .filter(|p| p.role.trainable())
            .map(|p| p.shape.iter().product::<usize>())
            .sum())
    }

    /// SHA-256 over the name, input shape, class count and parameter layout.
    ///
    /// Dropout rates and training hints do not contribute, so a checkpoint stays loadable
    /// across hyperparameter changes that leave the parameter set intact.
    pub fn fingerprint(&self) -> Result<[u8; 32], BuildError> {
        let mut h = Sha256::new();
        h.update(self.name.as_bytes());
        h.update([0]);
        for d in self.input_shape {
            h.update((d as u64).to_le_bytes());
        }
        h.update((self.output_classes as u64).to_le_bytes());
        for p in self.param_specs()? {
            h.update(p.name.as_bytes());
            h.update([0]);
            h.update((p.shape.len() as u64).to_le_bytes());
            for d in &p.shape {
                h.update((*d as u64).to_le_bytes());
            }
        }
        Ok(h.finalize().into())
    }

    /// Copy with every dropout layer set to `rate`.
    pub fn with_dropout(&self, rate: f64) -> Self {
        let mut spec = self.clone();
        for_each_layer_mut(&mut spec.layers, &mut |l| {
            if let LayerKind::Dropout { rate: r } = &mut l.kind {
                *r = rate;
            }
        });
        if spec.hints.dropout.is_some() || self.count_layers(|k| matches!(k, LayerKind::Dropout { .. })) > 0 {
            spec.hints.dropout = Some(rate);
        }
        spec
    }

    /// Number of layers (including nested branch layers) matching `pred`.
    pub fn count_layers(&self, pred: impl Fn(&LayerKind) -> bool) -> usize {
        let mut n = 0;
        for_each_layer(&self.layers, &mut |l| {
            if pred(&l.kind) {
                n += 1;
            }
        });
        n
    }

    pub fn inception_modules(&self) -> Vec<InceptionModuleConfig> {
        let mut out = Vec::new();
        for_each_layer(&self.layers, &mut |l| {
            if let LayerKind::Concat { module: Some(m), .. } = &l.kind {
                out.push(*m);
            }
        });
        out
    }

    pub fn residual_blocks(&self) -> usize {
        self.count_layers(|k| matches!(k, LayerKind::ResidualAdd { .. }))
    }

    /// Units of each dense layer in order.
    pub fn dense_units(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for_each_layer(&self.layers, &mut |l| {
            if let LayerKind::Dense { units } = l.kind {
                out.push(units);
            }
        });
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LeNetVariant {
    A,
    B,
    C,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VggVariant {
    V16A,
    V16B,
    V16C,
    V19,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InceptionVariant {
    V1A,
    V1B,
    V3A,
    V3B,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arch {
    LeNet(LeNetVariant),
    ResNet34x32,
    ResNet34x224,
    ResNet50,
    ResNet101,
    Vgg(VggVariant),
    Inception(InceptionVariant),
}

impl Arch {
    pub const ALL: [Arch; 15] = [
        Arch::LeNet(LeNetVariant::A),
        Arch::LeNet(LeNetVariant::B),
        Arch::LeNet(LeNetVariant::C),
        Arch::ResNet34x32,
        Arch::ResNet34x224,
        Arch::ResNet50,
        Arch::ResNet101,
        Arch::Vgg(VggVariant::V16A),
        Arch::Vgg(VggVariant::V16B),
        Arch::Vgg(VggVariant::V16C),
        Arch::Vgg(VggVariant::V19),
        Arch::Inception(InceptionVariant::V1A),
        Arch::Inception(InceptionVariant::V1B),
        Arch::Inception(InceptionVariant::V3A),
        Arch::Inception(InceptionVariant::V3B),
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arch::LeNet(LeNetVariant::A) => "lenet-a",
            Arch::LeNet(LeNetVariant::B) => "lenet-b",
            Arch::LeNet(LeNetVariant::C) => "lenet-c",
            Arch::ResNet34x32 => "resnet34-32",
            Arch::ResNet34x224 => "resnet34-224",
            Arch::ResNet50 => "resnet50",
            Arch::ResNet101 => "resnet101",
            Arch::Vgg(VggVariant::V16A) => "vgg16-a",
            Arch::Vgg(VggVariant::V16B) => "vgg16-b",
            Arch::Vgg(VggVariant::V16C) => "vgg16-c",
            Arch::Vgg(VggVariant::V19) => "vgg19",
            Arch::Inception(InceptionVariant::V1A) => "inceptionv1-a",
            Arch::Inception(InceptionVariant::V1B) => "inceptionv1-b",
            Arch::Inception(InceptionVariant::V3A) => "inceptionv3-a",
            Arch::Inception(InceptionVariant::V3B) => "inceptionv3-b",
        }
    }

    pub fn default_image_size(self) -> usize {
        match self {
            Arch::LeNet(_) | Arch::ResNet34x32 => 32,
            _ => 224,
        }
    }

    /// Whether a square RGB input of `size` pixels is accepted.
    pub fn supports_image_size(self, size: usize) -> bool {
        match self {
            Arch::LeNet(_) => size >= 32,
            _ => size == self.default_image_size(),
        }
    }

    pub fn build(self, image_size: usize) -> Result<ModelSpec, BuildError> {
        let input = [image_size, image_size, 3];
        match self {
            Arch::LeNet(v) => build_lenet(v, input),
            Arch::ResNet34x32 | Arch::ResNet34x224 => {
                if image_size != self.default_image_size() {
                    return Err(BuildError::InputShape {
                        arch: self.name().into(),
                        got: input,
                        reason: format!("expects {0}x{0}x3", self.default_image_size()),
                    });
                }
                build_resnet(34, input)
            }
            Arch::ResNet50 => build_resnet(50, input),
            Arch::ResNet101 => build_resnet(101, input),
            Arch::Vgg(v) => build_vgg(v, input),
            Arch::Inception(v) => build_inception(v, input),
        }
    }

    pub fn build_default(self) -> Result<ModelSpec, BuildError> {
        self.build(self.default_image_size())
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = BuildError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        Arch::ALL
            .into_iter()
            .find(|a| a.name() == lower)
            .ok_or_else(|| BuildError::UnknownArch(s.to_string()))
    }
}

fn finish(name: &str, input_shape: [usize; 3], layers: Vec<LayerConfig>, hints: TrainHints) -> Result<ModelSpec, BuildError> {
    let spec = ModelSpec {
        name: name.to_string(),
        input_shape,
        layers,
        output_classes: NUM_CLASSES,
        hints,
    };
    spec.validate()?;
    Ok(spec)
}

fn output_head(layers: &mut Vec<LayerConfig>) {
    layers.push(LayerConfig::dense("output", NUM_CLASSES));
    layers.push(LayerConfig::activation("output.softmax", ActivationKind::Softmax));
}

pub const LENET_B_DROPOUT: f64 = 0.25;

pub fn build_lenet(variant: LeNetVariant, input_shape: [usize; 3]) -> Result<ModelSpec, BuildError> {
    let name = Arch::LeNet(variant).name();
    let [h, w, c] = input_shape;
    if h < 32 || w < 32 || c == 0 {
        return Err(BuildError::InputShape {
            arch: name.into(),
            got: input_shape,
            reason: "spatial extent must be at least 32".into(),
        });
    }
    let mut layers = Vec::new();
    for (i, filters) in [6, 16, 120].into_iter().enumerate() {
        let n = i + 1;
        layers.push(LayerConfig::conv(format!("conv{n}"), filters, 5, 1, Padding::Valid));
        layers.push(LayerConfig::activation(format!("conv{n}.relu"), ActivationKind::Relu));
        if n < 3 {
            layers.push(LayerConfig::max_pool(format!("pool{n}"), 2, 2, Padding::Valid));
        }
    }
    layers.push(LayerConfig::flatten("flatten"));
    let mut hints = TrainHints {
        learning_rate: 0.001,
        epochs: 100,
        ..TrainHints::default()
    };
    if variant != LeNetVariant::A {
        layers.push(LayerConfig::dropout("dropout", LENET_B_DROPOUT));
        hints.dropout = Some(LENET_B_DROPOUT);
    }
    if variant == LeNetVariant::C {
        hints.step_decay = Some(StepDecay {
            factor: 0.5,
            period: 20,
        });
    }
    output_head(&mut layers);
    finish(name, input_shape, layers, hints)
}

fn conv_bn_relu(layers: &mut Vec<LayerConfig>, name: &str, filters: usize, kernel: usize, stride: usize) {
    layers.push(LayerConfig::conv_no_bias(name, filters, kernel, stride, Padding::Same));
    layers.push(LayerConfig::batchnorm(format!("{name}.bn")));
    layers.push(LayerConfig::activation(format!("{name}.relu"), ActivationKind::Relu));
}

/// Default dropout before the ResNet head; the searched rate replaces it via [`ModelSpec::with_dropout`].
pub const RESNET_DEFAULT_DROPOUT: f64 = 0.0;

pub fn build_resnet(depth: usize, input_shape: [usize; 3]) -> Result<ModelSpec, BuildError> {
    let name = match (depth, input_shape) {
        (34, [32, 32, 3]) => "resnet34-32",
        (34, [224, 224, 3]) => "resnet34-224",
        (50, [224, 224, 3]) => "resnet50",
        (101, [224, 224, 3]) => "resnet101",
        _ => {
            return Err(BuildError::Unsupported {
                arch: format!("resnet{depth}"),
                reason: format!(
                    "input {input_shape:?} not among the supported combinations 34@32, 34@224, 50@224, 101@224"
                ),
            })
        }
    };
    let bottleneck = depth != 34;
    let blocks: [usize; 4] = if depth == 101 { [3, 4, 23, 3] } else { [3, 4, 6, 3] };
    let mut layers = Vec::new();
    if input_shape[0] == 32 {
        conv_bn_relu(&mut layers, "stem.conv", 64, 3, 1);
    } else {
        conv_bn_relu(&mut layers, "stem.conv", 64, 7, 2);
        layers.push(LayerConfig::max_pool("stem.pool", 3, 2, Padding::Same));
    }
    let mut channels = 64;
    for (stage, (&count, width)) in blocks.iter().zip([64, 128, 256, 512]).enumerate() {
        for b in 0..count {
            let stride = if stage > 0 && b == 0 { 2 } else { 1 };
            let out_ch = if bottleneck { width * 4 } else { width };
            let p = format!("stage{}.block{}", stage + 1, b + 1);
            layers.push(LayerConfig::residual_begin(format!("{p}.begin")));
            if bottleneck {
                conv_bn_relu(&mut layers, &format!("{p}.conv1"), width, 1, 1);
                conv_bn_relu(&mut layers, &format!("{p}.conv2"), width, 3, stride);
                layers.push(LayerConfig::conv_no_bias(format!("{p}.conv3"), out_ch, 1, 1, Padding::Same));
                layers.push(LayerConfig::batchnorm(format!("{p}.conv3.bn")));
            } else {
                conv_bn_relu(&mut layers, &format!("{p}.conv1"), width, 3, stride);
                layers.push(LayerConfig::conv_no_bias(format!("{p}.conv2"), out_ch, 3, 1, Padding::Same));
                layers.push(LayerConfig::batchnorm(format!("{p}.conv2.bn")));
            }
            let projection = (stride != 1 || channels != out_ch).then_some(Projection {
                filters: out_ch,
                stride,
                batchnorm: true,
            });
            layers.push(LayerConfig::residual_add(format!("{p}.add"), projection));
            layers.push(LayerConfig::activation(format!("{p}.relu"), ActivationKind::Relu));
            channels = out_ch;
        }
    }
    layers.push(LayerConfig::global_avg_pool("gap"));
    layers.push(LayerConfig::dropout("dropout", RESNET_DEFAULT_DROPOUT));
    output_head(&mut layers);
    let hints = TrainHints {
        dropout: Some(RESNET_DEFAULT_DROPOUT),
        ..TrainHints::default()
    };
    finish(name, input_shape, layers, hints)
}

pub const VGG_HEAD_UNITS: [usize; 3] = [1024, 1024, 512];

pub fn build_vgg(variant: VggVariant, input_shape: [usize; 3]) -> Result<ModelSpec, BuildError> {
    let name = Arch::Vgg(variant).name();
    if input_shape != [224, 224, 3] {
        return Err(BuildError::InputShape {
            arch: name.into(),
            got: input_shape,
            reason: "expects 224x224x3".into(),
        });
    }
    let per_block: [usize; 5] = if variant == VggVariant::V19 { [2, 2, 4, 4, 4] } else { [2, 2, 3, 3, 3] };
    let mut layers = Vec::new();
    for (b, (&n, width)) in per_block.iter().zip([64, 128, 256, 512, 512]).enumerate() {
        for i in 0..n {
            let cname = format!("block{}.conv{}", b + 1, i + 1);
            layers.push(LayerConfig::conv(&cname, width, 3, 1, Padding::Same).frozen());
            layers.push(LayerConfig::activation(format!("{cname}.relu"), ActivationKind::Relu));
        }
        layers.push(LayerConfig::max_pool(format!("block{}.pool", b + 1), 2, 2, Padding::Valid));
    }
    layers.push(LayerConfig::global_avg_pool("gap"));
    let act = if variant == VggVariant::V16B { ActivationKind::Tanh } else { ActivationKind::Relu };
    let mut hints = TrainHints::default();
    let head_dropout = (variant == VggVariant::V16C).then_some(0.2);
    if variant == VggVariant::V16C {
        hints.learning_rate = 0.0003;
        hints.dropout = head_dropout;
    }
    for (i, units) in VGG_HEAD_UNITS.into_iter().enumerate() {
        let dname = format!("head.dense{}", i + 1);
        layers.push(LayerConfig::dense(&dname, units));
        layers.push(LayerConfig::activation(format!("{dname}.act"), act));
        if let Some(rate) = head_dropout {
            layers.push(LayerConfig::dropout(format!("{dname}.dropout"), rate));
        }
    }
    output_head(&mut layers);
    finish(name, input_shape, layers, hints)
}

/// Module filters of the two inception modules, per family.
pub const INCEPTION_V1_MODULES: [[usize; 6]; 2] = [[64, 128, 96, 32, 16, 32], [128, 192, 128, 96, 32, 64]];
pub const INCEPTION_V3_MODULES: [[usize; 6]; 2] = [[64, 128, 128, 32, 32, 32], [128, 192, 96, 64, 64, 64]];
pub const INCEPTION_FINAL_FILTERS: usize = 128;

struct ConvStyle {
    bn: bool,
    act: ActivationKind,
}

impl ConvStyle {
    fn conv(&self, layers: &mut Vec<LayerConfig>, name: &str, filters: usize, kernel: usize, stride: usize) {
        if self.bn {
            layers.push(LayerConfig::conv_no_bias(name, filters, kernel, stride, Padding::Same));
            layers.push(LayerConfig::batchnorm(format!("{name}.bn")));
        } else {
            layers.push(LayerConfig::conv(name, filters, kernel, stride, Padding::Same));
        }
        layers.push(LayerConfig::activation(format!("{name}.act"), self.act));
    }
}

/// Four-branch inception module: 1x1; 1x1 then 3x3; 1x1 then 5x5; 3x3 max-pool then 1x1.
pub fn inception_module(name: &str, m: InceptionModuleConfig, bn: bool, act: ActivationKind) -> LayerConfig {
    let style = ConvStyle { bn, act };
    let mut b1 = Vec::new();
    style.conv(&mut b1, &format!("{name}.b1x1"), m.one, 1, 1);
    let mut b2 = Vec::new();
    style.conv(&mut b2, &format!("{name}.b3x3.reduce"), m.three_reduce, 1, 1);
    style.conv(&mut b2, &format!("{name}.b3x3"), m.three, 3, 1);
    let mut b3 = Vec::new();
    style.conv(&mut b3, &format!("{name}.b5x5.reduce"), m.five_reduce, 1, 1);
    style.conv(&mut b3, &format!("{name}.b5x5"), m.five, 5, 1);
    let mut b4 = vec![LayerConfig::max_pool(format!("{name}.bpool.pool"), 3, 1, Padding::Same)];
    style.conv(&mut b4, &format!("{name}.bpool"), m.pool_proj, 1, 1);
    LayerConfig::concat(name, vec![b1, b2, b3, b4], Some(m))
}

pub fn build_inception(variant: InceptionVariant, input_shape: [usize; 3]) -> Result<ModelSpec, BuildError> {
    let name = Arch::Inception(variant).name();
    if input_shape != [224, 224, 3] {
        return Err(BuildError::InputShape {
            arch: name.into(),
            got: input_shape,
            reason: "expects 224x224x3".into(),
        });
    }
    let v3 = matches!(variant, InceptionVariant::V3A | InceptionVariant::V3B);
    let act = match variant {
        InceptionVariant::V1A | InceptionVariant::V3A => ActivationKind::Relu,
        InceptionVariant::V1B | InceptionVariant::V3B => ActivationKind::Tanh,
    };
    let style = ConvStyle { bn: v3, act };
    let mut layers = Vec::new();
    let modules = if v3 {
        style.conv(&mut layers, "stem.conv1", 32, 3, 2);
        style.conv(&mut layers, "stem.conv2", 32, 3, 1);
        style.conv(&mut layers, "stem.conv3", 64, 3, 1);
        layers.push(LayerConfig::max_pool("stem.pool", 3, 2, Padding::Same));
        INCEPTION_V3_MODULES
    } else {
        style.conv(&mut layers, "stem.conv1", 64, 7, 2);
        layers.push(LayerConfig::max_pool("stem.pool1", 3, 2, Padding::Same));
        style.conv(&mut layers, "stem.conv2", 64, 1, 1);
        style.conv(&mut layers, "stem.conv3", 192, 3, 1);
        layers.push(LayerConfig::max_pool("stem.pool2", 3, 2, Padding::Same));
        INCEPTION_V1_MODULES
    };
    for (i, f) in modules.into_iter().enumerate() {
        layers.push(inception_module(&format!("inception{}", i + 1), InceptionModuleConfig::new(f)?, v3, act));
    }
    layers.push(LayerConfig::avg_pool("head.pool", 2, 2, Padding::Valid));
    style.conv(&mut layers, "head.conv", INCEPTION_FINAL_FILTERS, 1, 1);
    layers.push(LayerConfig::flatten("flatten"));
    output_head(&mut layers);
    finish(name, input_shape, layers, TrainHints::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for a in Arch::ALL {
            assert_eq!(a.name().parse::<Arch>().unwrap(), a);
        }
        assert!("lenet-d".parse::<Arch>().is_err());
    }

    #[test]
    fn lenet_trace_matches_feature_maps() {
        let spec = build_lenet(LeNetVariant::A, [32, 32, 3]).unwrap();
        let shapes: Vec<Vec<usize>> = spec
            .shape_trace()
            .unwrap()
            .into_iter()
            .filter(|t| matches!(t.kind, "conv2d" | "maxpool2d" | "flatten" | "dense"))
            .map(|t| t.output)
            .collect();
        assert_eq!(
            shapes,
            vec![
                vec![28, 28, 6],
                vec![14, 14, 6],
                vec![10, 10, 16],
                vec![5, 5, 16],
                vec![1, 1, 120],
                vec![120],
                vec![5]
            ]
        );
    }

    #[test]
    fn lenet_b_adds_exactly_one_dropout() {
        let a = build_lenet(LeNetVariant::A, [32, 32, 3]).unwrap();
        let b = build_lenet(LeNetVariant::B, [32, 32, 3]).unwrap();
        assert_eq!(b.layers.len(), a.layers.len() + 1);
        let without: Vec<_> = b
            .layers
            .iter()
            .filter(|l| !matches!(l.kind, LayerKind::Dropout { .. }))
            .cloned()
            .collect();
        assert_eq!(without, a.layers);
        let c = build_lenet(LeNetVariant::C, [32, 32, 3]).unwrap();
        assert_eq!(c.layers, b.layers);
        assert_eq!(c.hints.step_decay, Some(StepDecay { factor: 0.5, period: 20 }));
    }

    #[test]
    fn lenet_rejects_small_input() {
        assert!(matches!(
            build_lenet(LeNetVariant::A, [28, 28, 3]),
            Err(BuildError::InputShape { .. })
        ));
    }

    #[test]
    fn resnet_block_counts() {
        let r34 = build_resnet(34, [32, 32, 3]).unwrap();
        assert_eq!(r34.residual_blocks(), 16);
        let r101 = build_resnet(101, [224, 224, 3]).unwrap();
        assert_eq!(r101.residual_blocks(), 33);
        assert!(matches!(build_resnet(50, [32, 32, 3]), Err(BuildError::Unsupported { .. })));
        assert!(matches!(build_resnet(18, [224, 224, 3]), Err(BuildError::Unsupported { .. })));
    }

    #[test]
    fn vgg_head_and_hints() {
        let a = build_vgg(VggVariant::V16A, [224, 224, 3]).unwrap();
        assert_eq!(a.dense_units(), vec![1024, 1024, 512, 5]);
        let c = build_vgg(VggVariant::V16C, [224, 224, 3]).unwrap();
        assert_eq!((c.hints.learning_rate, c.hints.dropout), (0.0003, Some(0.2)));
        assert!(build_vgg(VggVariant::V19, [32, 32, 3]).is_err());
        let head: usize = a
            .param_specs()
            .unwrap()
            .iter()
            .filter(|p| p.name.starts_with("head."))
            .map(|p| p.shape.iter().product::<usize>())
            .sum();
        assert_eq!(head, (512 * 1024 + 1024) + (1024 * 1024 + 1024) + (1024 * 512 + 512));
        assert!(a
            .param_specs()
            .unwrap()
            .iter()
            .all(|p| p.frozen == p.name.starts_with("block")));
    }

    #[test]
    fn inception_modules_and_channels() {
        let v3 = build_inception(InceptionVariant::V3A, [224, 224, 3]).unwrap();
        let mods = v3.inception_modules();
        assert_eq!(mods.len(), 2);
        assert_eq!(mods[0].filters(), [64, 128, 128, 32, 32, 32]);
        assert_eq!(mods[0].output_channels(), 256);
        assert_eq!(mods[1].filters(), [128, 192, 96, 64, 64, 64]);
        assert!(build_inception(InceptionVariant::V3A, [32, 32, 3]).is_err());
    }

    fn with_act(spec: &ModelSpec, from: ActivationKind, to: ActivationKind) -> Vec<LayerConfig> {
        let mut layers = spec.layers.clone();
        for_each_layer_mut(&mut layers, &mut |l| {
            if let LayerKind::Activation { function } = &mut l.kind {
                if *function == from {
                    *function = to;
                }
            }
        });
        layers
    }

    #[test]
    fn ab_pairs_differ_only_in_activation() {
        for (a, b) in [
            (Arch::Inception(InceptionVariant::V1A), Arch::Inception(InceptionVariant::V1B)),
            (Arch::Inception(InceptionVariant::V3A), Arch::Inception(InceptionVariant::V3B)),
        ] {
            let sa = a.build_default().unwrap();
            let sb = b.build_default().unwrap();
            assert_ne!(sa.layers, sb.layers);
            assert_eq!(with_act(&sa, ActivationKind::Relu, ActivationKind::Tanh), sb.layers);
        }
        let va = build_vgg(VggVariant::V16A, [224, 224, 3]).unwrap();
        let vb = build_vgg(VggVariant::V16B, [224, 224, 3]).unwrap();
        let mut expected = va.layers.clone();
        for l in expected.iter_mut().filter(|l| l.name.starts_with("head.") && l.name.ends_with(".act")) {
            l.kind = LayerKind::Activation {
                function: ActivationKind::Tanh,
            };
        }
        assert_eq!(expected, vb.layers);
    }

    #[test]
    fn fingerprint_ignores_dropout_but_not_layout() {
        let b = build_lenet(LeNetVariant::B, [32, 32, 3]).unwrap();
        assert_eq!(b.fingerprint().unwrap(), b.with_dropout(0.7).fingerprint().unwrap());
        let a = build_lenet(LeNetVariant::A, [32, 32, 3]).unwrap();
        assert_ne!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
        let a64 = build_lenet(LeNetVariant::A, [64, 64, 3]).unwrap();
        assert_ne!(a.fingerprint().unwrap(), a64.fingerprint().unwrap());
    }

    #[test]
    fn builders_are_pure() {
        for a in Arch::ALL {
            assert_eq!(a.build_default().unwrap(), a.build_default().unwrap());
        }
    }
}
