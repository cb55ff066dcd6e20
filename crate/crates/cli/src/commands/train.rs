use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crossmask::toy_trainer::{load_manifest_dataset, run_two_stage, synthetic_dataset, SyntheticSpec, TrainConfig, TrainError};

use super::{runtime, validation, write_json, CliError, CliResult};

/// Where training images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Seeded synthetic corpus; the first `n_train` images form the training
    /// split, the rest the test split.
    Synthetic {
        #[serde(default)]
        spec: SyntheticSpec,
        n_train: usize,
    },
    /// Dataset manifest, relative to the config file's directory.
    Manifest(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyRunConfig {
    pub data: DataSource,
    #[serde(default)]
    pub train: TrainConfig,
}

fn classify(e: TrainError) -> CliError {
    match e {
        TrainError::DivergenceDetected { .. } | TrainError::Checkpoint(_) => runtime(e),
        TrainError::Manifest(crossmask::dataset_io::ManifestError::Io(_)) => runtime(e),
        other => validation(other),
    }
}

pub fn run(config_path: &Path, out: &Path, seed: Option<u64>) -> CliResult {
    let text = std::fs::read_to_string(config_path)
        .map_err(|e| validation(format!("{}: {e}", config_path.display())))?;
    let mut config: ToyRunConfig =
        serde_json::from_str(&text).map_err(|e| validation(format!("{}: {e}", config_path.display())))?;
    if let Some(seed) = seed {
        config.train.seed = seed;
        if let DataSource::Synthetic { spec, .. } = &mut config.data {
            spec.seed = seed;
        }
    }
    let train = &config.train;
    let data = match &config.data {
        DataSource::Synthetic { spec, n_train } => {
            if *n_train == 0 || *n_train > spec.count {
                return Err(validation(format!("n_train {n_train} must be in 1..={}", spec.count)));
            }
            synthetic_dataset(spec, *n_train, train.sigma_ratio, train.op)
        }
        DataSource::Manifest(rel) => {
            let base = config_path.parent().unwrap_or(Path::new(""));
            load_manifest_dataset(&base.join(rel), train.sigma_ratio, train.op).map_err(classify)?
        }
    };
    let (model, report) = run_two_stage(train, &data).map_err(classify)?;
    log::info!(
        "L_seg {:.4} -> {:.4}; score loss {:.4} -> {:.4}",
        report.segmentation_history[0],
        report.segmentation_history.last().copied().unwrap_or(f64::NAN),
        report.score_history[0],
        report.score_history.last().copied().unwrap_or(f64::NAN),
    );
    if let Some(m) = report.test_mdice {
        log::info!("test mDice {m:.4}, branch agreement {:.2}", report.branch_agreement);
    }
    write_json(&out.join("report.json"), &report)?;
    write_json(&out.join("checkpoint.json"), &model.to_checkpoint())
}
