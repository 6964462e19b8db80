//! Run configuration: one JSON document per experiment.

use std::path::{Path, PathBuf};

use anyhow::Context;
use attzoom_core::backbones::ModelSpec;
use attzoom_core::data::{
    generate_synthetic, load_cifar_binary, split, CifarVariant, Dataset, Split,
    SyntheticLocalizationSpec,
};
use attzoom_core::search::{SearchOptions, SearchSpace};
use attzoom_core::train::TrainConfig;
use attzoom_core::Error;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Cifar10,
    Cifar100,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// CIFAR training file.
    pub train_path: Option<PathBuf>,
    /// CIFAR test file.
    pub test_path: Option<PathBuf>,
    pub synthetic: SyntheticLocalizationSpec,
    /// Synthetic test-set size, drawn with a different seed; 0 skips it.
    pub synthetic_test_samples: usize,
    pub val_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            train_path: None,
            test_path: None,
            synthetic: SyntheticLocalizationSpec::default(),
            synthetic_test_samples: 0,
            val_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub space: SearchSpace,
    pub n_trials: usize,
    pub paired: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            space: SearchSpace::default(),
            n_trials: 30,
            paired: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpretConfig {
    /// Number of images to visualize.
    pub n_images: usize,
    /// Warp strength.
    pub lambda: f64,
    /// Grad-CAM layer; `None` uses the layer after the last AttZoom insertion.
    pub layer: Option<String>,
    /// Explain the predicted class instead of the true label.
    pub use_prediction: bool,
}

impl Default for InterpretConfig {
    fn default() -> Self {
        InterpretConfig {
            n_images: 4,
            lambda: 1.0,
            layer: None,
            use_prediction: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub data: DataConfig,
    /// The AttZoom arm; the baseline arm is this spec without insertions.
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub interpret: InterpretConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Overrides the model, training and search seeds when set.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Option<Dataset>,
}

impl RunConfig {
    /// Parses and validates `path`; `seed` and `out` override the file.
    pub fn load(path: &Path, seed: Option<u64>, out: Option<&Path>) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        if seed.is_some() {
            cfg.seed = seed;
        }
        if let Some(out) = out {
            cfg.output_dir = out.to_path_buf();
        }
        cfg.apply_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_seed(&mut self) {
        if let Some(seed) = self.seed {
            self.model.seed = seed;
            self.train.seed = seed;
        }
    }

    pub fn search_options(&self, jobs: usize) -> SearchOptions {
        SearchOptions {
            n_trials: self.search.n_trials,
            search_seed: self.seed.unwrap_or(self.train.seed),
            paired: self.search.paired,
            jobs,
        }
    }

    /// Checks every section before any work starts.
    pub fn validate(&self) -> Result<(), Error> {
        self.train.validate()?;
        self.search.space.validate()?;
        for ins in &self.model.attzoom_insertions {
            ins.config.validate().map_err(|e| {
                prefix_field(e, &format!("model.attzoom_insertions[stage {}]", ins.stage))
            })?;
        }
        if !(self.data.val_fraction > 0.0 && self.data.val_fraction < 1.0) {
            return Err(Error::config("data.val_fraction", "must lie in (0, 1)"));
        }
        if self.interpret.lambda < 0.0 || !self.interpret.lambda.is_finite() {
            return Err(Error::config("interpret.lambda", "must be finite and >= 0"));
        }
        let expected_classes = match self.data.source {
            DataSource::Synthetic => self.data.synthetic.classes,
            DataSource::Cifar10 => 10,
            DataSource::Cifar100 => 100,
        };
        if self.model.num_classes != expected_classes {
            return Err(Error::config(
                "model.num_classes",
                format!(
                    "{} but the data has {expected_classes} classes",
                    self.model.num_classes
                ),
            ));
        }
        if self.data.source != DataSource::Synthetic && self.data.train_path.is_none() {
            return Err(Error::config(
                "data.train_path",
                "required for CIFAR sources",
            ));
        }
        // Surfaces shape problems (e.g. a bad insertion stage) as config errors.
        attzoom_core::backbones::Model::<f64>::build(&self.model)?;
        Ok(())
    }

    pub fn load_data(&self) -> anyhow::Result<Splits> {
        let d = &self.data;
        let (full, test) = match d.source {
            DataSource::Synthetic => {
                let full = generate_synthetic(&d.synthetic)?;
                let test = if d.synthetic_test_samples > 0 {
                    let spec = SyntheticLocalizationSpec {
                        samples: d.synthetic_test_samples,
                        seed: d.synthetic.seed ^ 0x5EED_7E57,
                        ..d.synthetic.clone()
                    };
                    let mut t = generate_synthetic(&spec)?;
                    t.split = Split::Test;
                    Some(t)
                } else {
                    None
                };
                (full, test)
            }
            DataSource::Cifar10 | DataSource::Cifar100 => {
                let variant = if d.source == DataSource::Cifar10 {
                    CifarVariant::Cifar10
                } else {
                    CifarVariant::Cifar100
                };
                let path = d.train_path.as_ref().expect("validated");
                let full = load_cifar_binary(path, variant)?;
                let test = d
                    .test_path
                    .as_ref()
                    .map(|p| {
                        load_cifar_binary(p, variant).map(|mut t| {
                            t.split = Split::Test;
                            t
                        })
                    })
                    .transpose()?;
                (full, test)
            }
        };
        let (train, val) = split(&full, d.val_fraction, d.synthetic.seed ^ self.train.seed)?;
        Ok(Splits { train, val, test })
    }
}

fn prefix_field(e: Error, prefix: &str) -> Error {
    match e {
        Error::Config { field, reason } => Error::config(format!("{prefix}.{field}"), reason),
        other => other,
    }
}
