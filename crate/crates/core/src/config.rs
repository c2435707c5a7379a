//! Run configuration: one JSON document naming the dataset, the
//! architecture and the training hyperparameters, plus the run manifest
//! that every output directory carries.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{
    fnv1a, gen_synthetic, load_synth_dir, parse_cifar_file, CifarVariant, LabeledImage,
    Normalization, SynthSpec,
};
use crate::error::{Error, Result};
use crate::layers::{named_arch, ArchSpec};
use crate::loss::Aggregation;
use crate::train::TrainConfig;

/// Where the images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DatasetConfig {
    /// Directory with data_batch_1..5.bin and test_batch.bin.
    Cifar10 { dir: String },
    /// Directory with train.bin and test.bin (fine labels kept).
    Cifar100 { dir: String },
    /// Generated in memory from the spec.
    Synthetic { spec: SynthSpec },
    /// Directory written by the synth command.
    SyntheticDir { dir: String },
}

/// Either a built-in architecture name or an inline spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArchConfig {
    Named(String),
    Spec(ArchSpec),
}

impl ArchConfig {
    pub fn resolve(&self) -> Result<ArchSpec> {
        match self {
            ArchConfig::Named(name) => named_arch(name),
            ArchConfig::Spec(spec) => {
                spec.validate()?;
                Ok(spec.clone())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct EvalConfig {
    /// Evaluate with test bags instead of single center views.
    #[serde(default)]
    pub bag_eval: bool,
    #[serde(default)]
    pub aggregation: Aggregation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    /// Checkpoint every k epochs; 0 keeps only the final checkpoint.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(json: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(json)
            .map_err(|e| Error::config(format!("invalid run config: {e}")))?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        RunConfig::from_json(&text)
    }
}

/// A dataset resolved into memory, standardized with train-split
/// statistics.
pub struct LoadedData {
    pub train: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
    pub classes: usize,
    pub checksum: String,
    pub normalization: Normalization,
}

fn normalize_pair(
    mut train: Vec<LabeledImage>,
    mut test: Vec<LabeledImage>,
    classes: usize,
    checksum: u64,
) -> Result<LoadedData> {
    let norm = Normalization::fit(&train)?;
    norm.apply(&mut train);
    norm.apply(&mut test);
    Ok(LoadedData {
        train,
        test,
        classes,
        checksum: format!("{checksum:016x}"),
        normalization: norm,
    })
}

pub fn load_dataset(cfg: &DatasetConfig) -> Result<LoadedData> {
    match cfg {
        DatasetConfig::Cifar10 { dir } => {
            let dir = Path::new(dir);
            let mut train = Vec::new();
            let mut hash: u64 = 0;
            for i in 1..=5 {
                let path = dir.join(format!("data_batch_{i}.bin"));
                let bytes = std::fs::read(&path)
                    .map_err(|e| Error::io(path.display().to_string(), e))?;
                hash ^= fnv1a(&bytes);
                train.extend(parse_cifar_file(&path, CifarVariant::Cifar10)?);
            }
            let test_path = dir.join("test_batch.bin");
            let bytes = std::fs::read(&test_path)
                .map_err(|e| Error::io(test_path.display().to_string(), e))?;
            hash ^= fnv1a(&bytes);
            let test = parse_cifar_file(&test_path, CifarVariant::Cifar10)?;
            normalize_pair(train, test, 10, hash)
        }
        DatasetConfig::Cifar100 { dir } => {
            let dir = Path::new(dir);
            let train_path = dir.join("train.bin");
            let test_path = dir.join("test.bin");
            let train_bytes = std::fs::read(&train_path)
                .map_err(|e| Error::io(train_path.display().to_string(), e))?;
            let test_bytes = std::fs::read(&test_path)
                .map_err(|e| Error::io(test_path.display().to_string(), e))?;
            let hash = fnv1a(&train_bytes) ^ fnv1a(&test_bytes);
            let train = parse_cifar_file(&train_path, CifarVariant::Cifar100)?;
            let test = parse_cifar_file(&test_path, CifarVariant::Cifar100)?;
            normalize_pair(train, test, 100, hash)
        }
        DatasetConfig::Synthetic { spec } => {
            let out = gen_synthetic(spec)?;
            let spec_json = serde_json::to_vec(spec)
                .map_err(|e| Error::config(format!("cannot serialize synth spec: {e}")))?;
            normalize_pair(out.train, out.test, spec.num_classes, fnv1a(&spec_json))
        }
        DatasetConfig::SyntheticDir { dir } => {
            let dir = Path::new(dir);
            let (train, test, meta) = load_synth_dir(dir)?;
            let train_bytes = std::fs::read(dir.join("train.bin"))
                .map_err(|e| Error::io(dir.display().to_string(), e))?;
            let test_bytes = std::fs::read(dir.join("test.bin"))
                .map_err(|e| Error::io(dir.display().to_string(), e))?;
            let hash = fnv1a(&train_bytes) ^ fnv1a(&test_bytes);
            normalize_pair(train, test, meta.spec.num_classes, hash)
        }
    }
}

/// Resolve an evaluation data argument: a dataset directory (sniffed by
/// its file names), or a JSON file holding either a `DatasetConfig` or a
/// full `RunConfig`.
pub fn resolve_eval_data(path: &Path) -> Result<DatasetConfig> {
    if path.is_dir() {
        if path.join("meta.json").is_file() {
            return Ok(DatasetConfig::SyntheticDir { dir: path.display().to_string() });
        }
        if path.join("test_batch.bin").is_file() {
            return Ok(DatasetConfig::Cifar10 { dir: path.display().to_string() });
        }
        if path.join("test.bin").is_file() {
            return Ok(DatasetConfig::Cifar100 { dir: path.display().to_string() });
        }
        return Err(Error::config(format!(
            "directory {} holds no recognizable dataset files",
            path.display()
        )));
    }
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if let Ok(ds) = serde_json::from_str::<DatasetConfig>(&text) {
        return Ok(ds);
    }
    if let Ok(run) = RunConfig::from_json(&text) {
        return Ok(run.dataset);
    }
    Err(Error::config(format!(
        "{} is neither a dataset directory nor a dataset/run config JSON",
        path.display()
    )))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestOutputs {
    pub metrics: String,
    pub checkpoints: Vec<String>,
}

/// Everything needed to attribute an output directory to its run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub engine_version: String,
    pub config: RunConfig,
    pub seed: u64,
    pub dataset_checksum: String,
    pub outputs: ManifestOutputs,
}

pub fn engine_version() -> String {
    env!("CARGO_PKG_VERSION").to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::LossMode;

    fn sample_config_json() -> String {
        serde_json::json!({
            "dataset": {"type": "synthetic", "spec": {
                "canvas": 16, "glyph": 6, "num_classes": 4,
                "clutter_density": 0.2, "offset_range": 2, "count": 20, "seed": 3
            }},
            "arch": {
                "block_type": "basic",
                "stage_widths": [4, 8, 16],
                "stage_repeats": [1, 1, 1],
                "input_shape": [3, 16, 16],
                "num_classes": 4,
                "stem": {"out_channels": 4, "kernel": 3, "stride": 1, "padding": 1}
            },
            "train": {
                "learning_rate": 0.1,
                "momentum": 0.9,
                "weight_decay": 1e-4,
                "lr_schedule": [[8, 0.01]],
                "epochs": 2,
                "batch_bags": 4,
                "loss_mode": "mil_negative_only",
                "pretrain_epochs": 1,
                "mil": {"lambda": 0.001, "mode": "negative_only", "prob_clamp_epsilon": 1e-12},
                "bag": {"pad": 2, "crop_size": 16, "bag_size": 5,
                         "flip_prob": 0.5, "sampling": "uniform_random", "seed": 11},
                "seed": 9
            }
        })
        .to_string()
    }

    #[test]
    fn run_config_parses_and_resolves() {
        let cfg = RunConfig::from_json(&sample_config_json()).unwrap();
        assert_eq!(cfg.train.loss_mode, LossMode::MilNegativeOnly);
        assert_eq!(cfg.checkpoint_every, 0);
        let arch = cfg.arch.resolve().unwrap();
        assert_eq!(arch.num_classes, 4);
        let data = load_dataset(&cfg.dataset).unwrap();
        assert_eq!(data.classes, 4);
        assert_eq!(data.train.len(), 20);
        assert_eq!(data.test.len(), 10);
        assert_eq!(data.checksum.len(), 16);
    }

    #[test]
    fn named_arch_config_resolves() {
        let cfg = ArchConfig::Named("table1".to_string());
        assert_eq!(cfg.resolve().unwrap().stage_repeats, vec![18, 18, 18]);
        assert!(ArchConfig::Named("bogus".to_string()).resolve().is_err());
    }

    #[test]
    fn invalid_config_reports_field() {
        let mut cfg = RunConfig::from_json(&sample_config_json()).unwrap();
        cfg.train.momentum = 2.0;
        let json = serde_json::to_string(&cfg).unwrap();
        let err = RunConfig::from_json(&json).unwrap_err();
        assert!(err.to_string().contains("momentum"));
    }

    #[test]
    fn config_round_trips() {
        let cfg = RunConfig::from_json(&sample_config_json()).unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        let back = RunConfig::from_json(&json).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn loss_mode_strings_round_trip() {
        for mode in [LossMode::SoftmaxCe, LossMode::MilNegativeOnly, LossMode::MilFullBag] {
            assert_eq!(LossMode::parse(mode.as_str()).unwrap(), mode);
        }
    }
}
