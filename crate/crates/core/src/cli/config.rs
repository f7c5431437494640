use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{ScenarioSpec, DEFAULT_BRUTE_FORCE_LIMIT};
use crate::data::TrainConfig;
use crate::eval::LockSetup;
use crate::{Error, Result};

/// Environment variable naming the root for relative dataset paths.
pub const DATA_DIR_ENV: &str = "TROJANKEY_DATA_DIR";

/// One scenario, read from a TOML document.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Seed for neuron selection, the correct key and the attack; it
    /// replaces `attack.seed`.
    pub seed: u64,
    pub dataset: DatasetSection,
    pub victim: VictimSection,
    pub lock: LockSection,
    pub attack: AttackSection,
    pub eval: EvalSection,
    pub output: OutputSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub idx: Option<IdxSource>,
    pub blobs: Option<BlobsSource>,
}

/// IDX files; relative paths resolve against the data root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdxSource {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl Default for IdxSource {
    fn default() -> Self {
        IdxSource {
            train_images: "train-images-idx3-ubyte".into(),
            train_labels: "train-labels-idx1-ubyte".into(),
            test_images: "t10k-images-idx3-ubyte".into(),
            test_labels: "t10k-labels-idx1-ubyte".into(),
        }
    }
}

/// Synthetic Gaussian blobs split into train and test parts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlobsSource {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub spread: f64,
    pub seed: u64,
    pub test_fraction: f64,
}

impl Default for BlobsSource {
    fn default() -> Self {
        BlobsSource {
            classes: 10,
            dim: 16,
            per_class: 60,
            spread: 0.05,
            seed: 1,
            test_fraction: 0.25,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VictimSection {
    /// Existing model file. When absent, commands use `victim.tknn` in the
    /// output directory.
    pub model: Option<PathBuf>,
    #[serde(flatten)]
    pub train: TrainConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LockSection {
    #[serde(flatten)]
    pub setup: LockSetup,
    /// Explicit neurons to bind; otherwise `neuron_count` are drawn from
    /// the scenario seed.
    pub neurons: Option<Vec<usize>>,
    pub neuron_count: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackSection {
    #[serde(flatten)]
    pub spec: ScenarioSpec,
    /// Also enumerate every wrong key and attach the percentile rank.
    pub brute_force: bool,
    pub brute_force_limit: u32,
    /// Hill-climb the search result within this radius.
    pub refine_radius: Option<u32>,
    /// Use finite differences of the loss instead of back-propagation.
    pub zeroth_order: bool,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            spec: ScenarioSpec::default(),
            brute_force: false,
            brute_force_limit: DEFAULT_BRUTE_FORCE_LIMIT,
            refine_radius: None,
            zeroth_order: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Untargeted,
    Targeted,
    Sweep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub experiments: Vec<Experiment>,
    pub sweep_m: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            experiments: vec![Experiment::Untargeted, Experiment::Targeted],
            sweep_m: vec![1, 2],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Json,
    Text,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub formats: Vec<Format>,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: "out".into(),
            formats: vec![Format::Json, Format::Text],
        }
    }
}

impl ScenarioConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Checks that do not need the dataset or the model.
    pub fn validate(&self) -> Result<()> {
        match (&self.dataset.idx, &self.dataset.blobs) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => {
                return Err(Error::Config(
                    "exactly one of [dataset.idx] and [dataset.blobs] must be given".into(),
                ))
            }
        }
        if let (Some(list), Some(count)) = (&self.lock.neurons, self.lock.neuron_count) {
            if list.len() != count {
                return Err(Error::Config(format!(
                    "lock.neurons lists {} neurons but lock.neuron_count is {count}",
                    list.len()
                )));
            }
        }
        if self.lock.neurons.as_ref().is_some_and(|l| l.is_empty()) || self.lock.neuron_count == Some(0) {
            return Err(Error::Config("at least one neuron must be bound".into()));
        }
        let (lo, hi) = self.lock.setup.calibration_percentiles;
        if !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) || lo >= hi {
            return Err(Error::Config(format!("invalid calibration percentiles [{lo}, {hi}]")));
        }
        if self.eval.experiments.contains(&Experiment::Sweep)
            && (self.eval.sweep_m.is_empty() || self.eval.sweep_m.windows(2).any(|w| w[0] >= w[1]))
        {
            return Err(Error::Config("eval.sweep_m must be non-empty and strictly increasing".into()));
        }
        Ok(())
    }

    /// The attack spec with the scenario seed applied.
    pub fn scenario_spec(&self) -> ScenarioSpec {
        ScenarioSpec {
            seed: self.seed,
            ..self.attack.spec.clone()
        }
    }
}

/// Root for relative dataset paths: the environment override, else the
/// directory holding the config file.
pub fn data_root(config_dir: &Path) -> PathBuf {
    match std::env::var_os(DATA_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => config_dir.to_path_buf(),
    }
}
