use std::fs;
use std::path::{Path, PathBuf};

use ovaxai::data::AugmentPolicy;
use ovaxai::train::{OptimizerKind, SearchRange, TrainConfig};
use ovaxai::xai::{Fill, Method, OverlayStyle};
use ovaxai::{Arch, ModelSpec};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// Shuffle individual images.
    #[default]
    Random,
    /// Keep each original and its augmented copies on the same side.
    Origin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub enabled: bool,
    pub per_class: usize,
    /// Defaults to the resolved image size.
    pub size: Option<u32>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            per_class: 50,
            size: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub iterations: usize,
    pub probe_epochs: usize,
    pub lr: [f64; 2],
    pub dropout: [f64; 2],
    /// Score draws with the closed-form stub peaking at this iteration instead of training.
    pub stub_peak: Option<usize>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        let r = SearchRange::default();
        Self {
            iterations: r.iterations,
            probe_epochs: r.probe_epochs,
            lr: r.lr,
            dropout: r.dropout,
            stub_peak: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct XaiConfig {
    pub methods: Vec<String>,
    pub top_k: usize,
    pub grid: usize,
    /// `mean`, `black` or `constant:<v>`.
    pub fill: String,
    pub ig_steps: usize,
    /// `black` or `mean` (dataset mean image, needs `data`).
    pub ig_baseline: String,
    pub lime_samples: usize,
    pub kernel_width: Option<f64>,
    pub ridge: f64,
    pub shap_samples: usize,
    pub overlay: String,
    /// Class to explain; the predicted class when unset.
    pub target: Option<usize>,
}

impl Default for XaiConfig {
    fn default() -> Self {
        Self {
            methods: vec!["ig".into(), "lime".into(), "shap".into()],
            top_k: 10,
            grid: 4,
            fill: "mean".into(),
            ig_steps: 256,
            ig_baseline: "black".into(),
            lime_samples: 1000,
            kernel_width: None,
            ridge: 1e-3,
            shap_samples: 2048,
            overlay: "signed-heatmap".into(),
            target: None,
        }
    }
}

impl XaiConfig {
    pub fn parsed_methods(&self) -> Result<Vec<Method>, CliError> {
        let mut out = Vec::new();
        for m in &self.methods {
            let m: Method = m.parse()?;
            if !out.contains(&m) {
                out.push(m);
            }
        }
        if out.is_empty() {
            return Err(CliError::Validation("no explanation method requested".into()));
        }
        Ok(out)
    }

    pub fn parsed_fill(&self) -> Result<Fill, CliError> {
        Ok(self.fill.parse()?)
    }

    pub fn parsed_overlay(&self) -> Result<OverlayStyle, CliError> {
        Ok(self.overlay.parse()?)
    }
}

/// Everything a command needs, merged from an optional TOML file and command-line flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub arch: Option<String>,
    pub image_size: Option<usize>,
    pub batch_size: usize,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub dropout: Option<f64>,
    pub optimizer: Option<OptimizerKind>,
    pub seed: u64,
    pub deterministic: bool,
    pub train_fraction: f64,
    pub split: SplitMode,
    pub synthetic: SyntheticConfig,
    /// `augment.seed` always follows `seed`.
    pub augment: AugmentPolicy,
    pub search: SearchConfig,
    pub xai: XaiConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            out: None,
            arch: None,
            image_size: None,
            batch_size: 32,
            epochs: None,
            lr: None,
            dropout: None,
            optimizer: None,
            seed: 0,
            deterministic: true,
            train_fraction: 0.8,
            split: SplitMode::Random,
            synthetic: SyntheticConfig::default(),
            augment: AugmentPolicy::default(),
            search: SearchConfig::default(),
            xai: XaiConfig::default(),
        }
    }
}

pub const DEFAULT_ARCH: &str = "lenet-a";

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    pub fn out_dir(&self) -> Result<&Path, CliError> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Validation("an output directory is required (--out)".into()))
    }

    pub fn data_dir(&self) -> Result<&Path, CliError> {
        self.data
            .as_deref()
            .ok_or_else(|| CliError::Validation("a dataset root is required (--data)".into()))
    }

    pub fn parsed_arch(&self) -> Result<Arch, CliError> {
        Ok(self.arch.as_deref().unwrap_or(DEFAULT_ARCH).parse()?)
    }

    /// Architecture and image size, checked for compatibility before any work starts.
    pub fn model_spec(&self) -> Result<(Arch, usize, ModelSpec), CliError> {
        let arch = self.parsed_arch()?;
        let size = self.image_size.unwrap_or_else(|| arch.default_image_size());
        if !arch.supports_image_size(size) {
            return Err(CliError::Validation(format!(
                "architecture `{}` does not accept {size}x{size} inputs",
                arch.name()
            )));
        }
        let spec = arch.build(size)?;
        Ok((arch, size, spec))
    }

    pub fn train_config(&self, spec: &ModelSpec) -> Result<TrainConfig, CliError> {
        let mut c = TrainConfig::from_hints(&spec.hints);
        if let Some(e) = self.epochs {
            c.epochs = e;
        }
        if let Some(lr) = self.lr {
            c.learning_rate = lr;
        }
        if let Some(d) = self.dropout {
            c.dropout = Some(d);
        }
        if let Some(o) = self.optimizer {
            c.optimizer = o;
        }
        c.batch_size = self.batch_size;
        c.seed = self.seed;
        c.deterministic = self.deterministic;
        c.validate()?;
        Ok(c)
    }

    pub fn search_range(&self) -> SearchRange {
        SearchRange {
            lr: self.search.lr,
            dropout: self.search.dropout,
            iterations: self.search.iterations,
            probe_epochs: self.search.probe_epochs,
            seed: self.seed,
        }
    }

    pub fn check_fraction(&self) -> Result<(), CliError> {
        if self.train_fraction > 0.0 && self.train_fraction < 1.0 {
            Ok(())
        } else {
            Err(CliError::Validation(format!("train fraction {} must lie strictly between 0 and 1", self.train_fraction)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig {
            arch: Some("vgg19".into()),
            epochs: Some(3),
            ..RunConfig::default()
        };
        c.xai.kernel_width = Some(1.5);
        let text = c.to_toml();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), c);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c: RunConfig = toml::from_str("seed = 9\n[xai]\ntop_k = 3\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.xai.top_k, 3);
        assert_eq!(c.xai.grid, 4);
        assert_eq!(c.batch_size, 32);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sed = 9\n").is_err());
    }

    #[test]
    fn incompatible_size_is_caught() {
        let c = RunConfig {
            arch: Some("inceptionv3-a".into()),
            image_size: Some(32),
            ..RunConfig::default()
        };
        assert!(matches!(c.model_spec(), Err(CliError::Validation(_))));
        let ok = RunConfig::default().model_spec().unwrap();
        assert_eq!(ok.1, 32);
    }
}
