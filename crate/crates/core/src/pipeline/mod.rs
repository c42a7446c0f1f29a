//! Experiment orchestration: dataset collection, safety-model training,
//! per-seed agent runs with periodic evaluation, aggregation and plots.

mod config;
mod dataset;
mod eval;
mod experiment;
mod plot;

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use config::{CollectConfig, ExperimentConfig, CONFIG_VERSION};
pub use dataset::{
    collect_dataset, label_and_augment, read_manifest, relabel_dataset, safety_model_path, train_safety, ClassCounts,
    DatasetPaths, Manifest, MANIFEST_FORMAT, SAFETY_REPORT_FORMAT,
};
pub use eval::{evaluate, mean_std, read_eval_csv, rollout_agent, write_eval_csv, EvalEntry, EVAL_FORMAT_LINE};
pub use experiment::{
    aggregate, load_or_train_safety, read_report, run_dir, run_experiment, run_seed, train_agents, AggregateRow,
    EvalReport, SeedFailure, SeedFinal, VariantReport, REPORT_FORMAT,
};
pub use plot::{plot_report, write_summary_csvs};

use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Versioned<T> {
    format: String,
    version: u32,
    #[serde(flatten)]
    body: T,
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
}

pub(crate) fn write_versioned<T: Serialize>(path: &Path, format: &str, body: &T) -> Result<()> {
    let v = Versioned {
        format: format.to_string(),
        version: FORMAT_VERSION,
        body,
    };
    std::fs::write(path, serde_json::to_vec_pretty(&v)?)?;
    Ok(())
}

pub(crate) fn read_versioned<T: DeserializeOwned>(path: &Path, format: &str) -> Result<T> {
    let bytes = std::fs::read(path)?;
    let header: Header =
        serde_json::from_slice(&bytes).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    if header.format != format || header.version != FORMAT_VERSION {
        return Err(Error::Load(format!(
            "{}: expected {format} v{FORMAT_VERSION}, found {} v{}",
            path.display(),
            header.format,
            header.version
        )));
    }
    let v: Versioned<T> = serde_json::from_slice(&bytes).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    Ok(v.body)
}
