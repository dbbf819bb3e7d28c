//! Run configuration files and the data and models they describe.

use std::path::{Path, PathBuf};

use pima::crossmodal::GenerateMode;
use pima::dataset::{load_idx, multimodal_mnist, synth_lattice_benchmark, LatticeConfig, MultimodalDataset, SplitTag};
use pima::exec::Exec;
use pima::metrics::Band;
use pima::model::ModelConfig;
use pima::presets::{LatticePreset, MnistPreset};
use pima::seed;
use pima::trainer::{AnchorPolicy, ExpertRefit, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// Multimodal learning rate used when the config does not set one.
pub const DEFAULT_LEARNING_RATE: f64 = 1.97e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelSpec,
    pub train: TrainSection,
    #[serde(default)]
    pub distill: DistillSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
    #[serde(default)]
    pub generate: GenerateSection,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// IDX files plus the synthetic linear signal. The last
    /// `validation_fraction` of the training records are held out for
    /// model selection; the t10k files are the test split.
    Mnist {
        dir: PathBuf,
        noise_var: f64,
        #[serde(default = "default_signal_points")]
        signal_points: usize,
        /// Leading training records to use; all by default.
        #[serde(default)]
        train_records: Option<usize>,
        #[serde(default = "default_validation_fraction")]
        validation_fraction: f64,
    },
    /// Generated lattice-style benchmark, split train/val(/test).
    Lattice {
        #[serde(default)]
        generator: Option<LatticeConfig>,
        #[serde(default = "default_lattice_split")]
        split: Vec<f64>,
    },
    /// A saved dataset container. Its own split tags are used when present.
    File {
        path: PathBuf,
        #[serde(default = "default_file_split")]
        split: Vec<f64>,
    },
}

fn default_signal_points() -> usize {
    20
}

fn default_validation_fraction() -> f64 {
    0.1
}

fn default_lattice_split() -> Vec<f64> {
    vec![0.8, 0.2]
}

fn default_file_split() -> Vec<f64> {
    vec![0.8, 0.1, 0.1]
}

/// Model architecture. Input widths come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Mnist {
        #[serde(default)]
        latent_dim: Option<usize>,
        #[serde(default)]
        clusters: Option<usize>,
        #[serde(default)]
        image_hidden: Option<Vec<usize>>,
        #[serde(default)]
        signal_hidden: Option<Vec<usize>>,
        #[serde(default)]
        image_variance: Option<f64>,
    },
    Lattice {
        #[serde(default)]
        latent_dim: Option<usize>,
        #[serde(default)]
        clusters: Option<usize>,
        #[serde(default)]
        hidden: Option<Vec<usize>>,
        #[serde(default)]
        image_variance: Option<f64>,
    },
    Custom {
        config: ModelConfig,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Lowest validation loss, or the final epoch without validation data.
    #[default]
    ValidationLoss,
    /// Lowest loss on the training records themselves.
    TrainingLoss,
    Final,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    /// Preset recipe value when absent.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub anchor_policy: Option<AnchorPolicy>,
    #[serde(default)]
    pub anchor_epochs: Option<usize>,
    #[serde(default)]
    pub anchor_max_epochs: Option<usize>,
    #[serde(default)]
    pub warmup_epochs: Option<usize>,
    #[serde(default)]
    pub expert_refit: Option<ExpertRefit>,
    #[serde(default)]
    pub exec: Exec,
    #[serde(default)]
    pub selection: Selection,
}

fn default_learning_rate() -> f64 {
    DEFAULT_LEARNING_RATE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSection {
    pub epochs: usize,
    pub batch_size: usize,
    /// Per-modality default when absent.
    #[serde(default)]
    pub learning_rate: Option<f64>,
}

impl Default for DistillSection {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 128,
            learning_rate: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    #[serde(default)]
    pub band: Band,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    #[serde(default)]
    pub mode: GenerateMode,
    /// Target modality name; the other modality of a two-modality model
    /// when absent.
    #[serde(default)]
    pub target: Option<String>,
    /// Leading records of the split to generate from.
    #[serde(default = "default_records")]
    pub records: usize,
}

fn default_records() -> usize {
    16
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self {
            mode: GenerateMode::default(),
            target: None,
            records: default_records(),
        }
    }
}

/// A parsed config with its paths made absolute.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub config: RunConfig,
}

pub fn load(path: &Path) -> Result<Loaded, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut config: RunConfig =
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if config.schema_version != SCHEMA_VERSION {
        return Err(CliError::Config(format!(
            "{}: schema_version {} is not supported (expected {SCHEMA_VERSION})",
            path.display(),
            config.schema_version
        )));
    }
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let resolve = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    resolve(&mut config.out_dir);
    match &mut config.data {
        DataConfig::Mnist { dir, .. } => resolve(dir),
        DataConfig::File { path, .. } => resolve(path),
        DataConfig::Lattice { .. } => {}
    }
    Ok(Loaded { config })
}

/// Train/val/test views of the configured data.
pub struct Splits {
    pub train: MultimodalDataset,
    pub val: Option<MultimodalDataset>,
    pub test: Option<MultimodalDataset>,
}

impl Splits {
    pub fn get(&self, tag: SplitTag) -> Result<&MultimodalDataset, CliError> {
        let part = match tag {
            SplitTag::Train => Some(&self.train),
            SplitTag::Val => self.val.as_ref(),
            SplitTag::Test => self.test.as_ref(),
        };
        part.ok_or_else(|| CliError::Config(format!("the configured data has no {} split", tag.as_str())))
    }

    fn from_tagged(ds: &MultimodalDataset) -> Result<Self, CliError> {
        let part = |tag| -> Result<Option<MultimodalDataset>, CliError> {
            let present = ds.tags().is_some_and(|t| t.contains(&tag));
            Ok(if present { Some(ds.part(tag)?) } else { None })
        };
        Ok(Splits {
            train: part(SplitTag::Train)?
                .ok_or_else(|| CliError::Config("the split leaves no training records".into()))?,
            val: part(SplitTag::Val)?,
            test: part(SplitTag::Test)?,
        })
    }
}

pub fn load_data(config: &RunConfig) -> Result<Splits, CliError> {
    let mut rng = seed::rng(config.seed, "data", 0);
    match &config.data {
        DataConfig::Mnist {
            dir,
            noise_var,
            signal_points,
            train_records,
            validation_fraction,
        } => {
            if !dir.is_dir() {
                return Err(CliError::Config(format!("MNIST directory {} does not exist", dir.display())));
            }
            if !(0.0..1.0).contains(validation_fraction) {
                return Err(CliError::Config("validation_fraction must lie in [0, 1)".into()));
            }
            let (train_img, train_lab) = load_idx(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"))?;
            let (test_img, test_lab) = load_idx(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"))?;
            let all = multimodal_mnist(&train_img, &train_lab, *noise_var, *signal_points, &mut rng)?;
            let n = train_records.unwrap_or(all.len()).min(all.len());
            let n_val = (n as f64 * validation_fraction).round() as usize;
            let fit: Vec<usize> = (0..n - n_val).collect();
            let held: Vec<usize> = (n - n_val..n).collect();
            let test = multimodal_mnist(&test_img, &test_lab, *noise_var, *signal_points, &mut rng)?;
            Ok(Splits {
                train: all.select(&fit)?,
                val: if held.is_empty() { None } else { Some(all.select(&held)?) },
                test: Some(test),
            })
        }
        DataConfig::Lattice { generator, split } => {
            let generator = generator.clone().unwrap_or_default();
            let ds = synth_lattice_benchmark(&generator, &mut rng)?;
            Splits::from_tagged(&ds.split(split, seed::substream(config.seed, "split", 0))?)
        }
        DataConfig::File { path, split } => {
            if !path.exists() {
                return Err(CliError::Config(format!("dataset file {} does not exist", path.display())));
            }
            let ds = MultimodalDataset::load(path)?;
            let ds = if ds.tags().is_some() {
                ds
            } else {
                ds.split(split, seed::substream(config.seed, "split", 0))?
            };
            Splits::from_tagged(&ds)
        }
    }
}

fn square_side(pixels: usize) -> Result<usize, CliError> {
    let side = (pixels as f64).sqrt().round() as usize;
    if side * side == pixels {
        Ok(side)
    } else {
        Err(CliError::Config(format!("image width {pixels} is not a square")))
    }
}

fn dims(data: &MultimodalDataset) -> Result<(usize, usize), CliError> {
    match data.features() {
        [image, signal] => Ok((image.ncols(), signal.ncols())),
        other => Err(CliError::Config(format!(
            "presets expect an image and a signal modality, the data has {}",
            other.len()
        ))),
    }
}

/// Model config plus the recipe defaults that go with the preset.
pub fn build_model(spec: &ModelSpec, data: &MultimodalDataset) -> Result<(ModelConfig, TrainConfig), CliError> {
    let recipe = match spec {
        ModelSpec::Mnist {
            latent_dim,
            clusters,
            image_hidden,
            signal_hidden,
            image_variance,
        } => {
            let (pixels, points) = dims(data)?;
            let d = MnistPreset::default();
            let p = MnistPreset {
                latent_dim: latent_dim.unwrap_or(d.latent_dim),
                clusters: clusters.unwrap_or(d.clusters),
                image_pixels: pixels,
                image_hidden: image_hidden.clone().unwrap_or(d.image_hidden),
                signal_points: points,
                signal_hidden: signal_hidden.clone().unwrap_or(d.signal_hidden),
                image_variance: image_variance.unwrap_or(d.image_variance),
            };
            p.train_config(0, 0)?
        }
        ModelSpec::Lattice {
            latent_dim,
            clusters,
            hidden,
            image_variance,
        } => {
            let (pixels, points) = dims(data)?;
            let d = LatticePreset::default();
            let p = LatticePreset {
                latent_dim: latent_dim.unwrap_or(d.latent_dim),
                clusters: clusters.unwrap_or(d.clusters),
                image_side: square_side(pixels)?,
                curve_points: points,
                hidden: hidden.clone().unwrap_or(d.hidden),
                image_variance: image_variance.unwrap_or(d.image_variance),
            };
            p.train_config(0, 0)?
        }
        ModelSpec::Custom { config } => {
            config.validate()?;
            TrainConfig::new(config.clone(), 0, 128, DEFAULT_LEARNING_RATE, 0)
        }
    };
    Ok((recipe.model.clone(), recipe))
}

pub fn train_config(config: &RunConfig, data: &MultimodalDataset) -> Result<TrainConfig, CliError> {
    let (model, recipe) = build_model(&config.model, data)?;
    let t = &config.train;
    let mut out = TrainConfig::new(
        model,
        t.epochs,
        t.batch_size.unwrap_or(recipe.batch_size),
        t.learning_rate,
        config.seed,
    );
    out.anchor_policy = t.anchor_policy.unwrap_or(recipe.anchor_policy);
    out.anchor_epochs = t.anchor_epochs.unwrap_or(recipe.anchor_epochs);
    out.anchor_max_epochs = t.anchor_max_epochs.unwrap_or(recipe.anchor_max_epochs);
    out.warmup_epochs = t.warmup_epochs.unwrap_or(recipe.warmup_epochs);
    out.expert_refit = t.expert_refit.unwrap_or(recipe.expert_refit);
    out.exec = t.exec;
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema_version = 1
[data]
source = "lattice"
[model]
preset = "lattice"
[train]
epochs = 2
"#;

    #[test]
    fn minimal_config_takes_defaults() {
        let c: RunConfig = toml::from_str(MINIMAL).unwrap();
        assert_eq!(c.train.learning_rate, DEFAULT_LEARNING_RATE);
        assert_eq!(c.out_dir, PathBuf::from("out"));
        assert_eq!(c.distill, DistillSection::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let cases = [
            format!("bogus = 1\n{MINIMAL}"),
            MINIMAL.replace("epochs = 2", "epochs = 2\nbogus = 1"),
            MINIMAL.replace("preset = \"lattice\"", "preset = \"lattice\"\nwidth = 3"),
            MINIMAL.replace("source = \"lattice\"", "source = \"lattice\"\nrecords = 3"),
        ];
        for text in cases {
            assert!(toml::from_str::<RunConfig>(&text).is_err(), "{text}");
        }
    }

    #[test]
    fn shipped_configs_parse() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let mut seen = 0;
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.extension().is_some_and(|e| e == "toml") {
                load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
                seen += 1;
            }
        }
        assert!(seen >= 3);
    }

    #[test]
    fn paths_resolve_against_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let text = MINIMAL.replace("source = \"lattice\"", "source = \"file\"\npath = \"d/set.pima\"");
        let p = dir.path().join("run.toml");
        std::fs::write(&p, text).unwrap();
        let l = load(&p).unwrap();
        assert_eq!(l.config.out_dir, dir.path().join("out"));
        match l.config.data {
            DataConfig::File { path, .. } => assert_eq!(path, dir.path().join("d/set.pima")),
            _ => unreachable!(),
        }
    }
}
