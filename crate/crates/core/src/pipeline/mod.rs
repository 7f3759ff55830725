//! Run configuration, synthetic corpora, trainers and the command entry points.

pub mod config;
pub mod corpus;
pub mod evaluate;
pub mod synth;
pub mod train;

use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};

pub use config::{Profile, RunConfig, TtsTrainConfig};
pub use corpus::{generate_corpus, CorpusKind, CorpusSizes, CorpusSummary};
pub use train::{run_train_ser, run_train_tts, SerRunSummary, TtsRunSummary, TtsTrainer};

/// Pretty JSON with a trailing newline.
pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `run.json`: the resolved config and its hash, shared by every artifact
/// in the directory.
pub fn write_run_record(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_json(
        &dir.join("run.json"),
        &serde_json::json!({ "config_hash": cfg.hash(), "config": cfg }),
    )
}

/// `timing.json`: wall time kept apart from the reproducible artifacts.
pub fn write_timing(dir: &Path, started: Instant) -> Result<()> {
    write_json(
        &dir.join("timing.json"),
        &serde_json::json!({ "wall_seconds": started.elapsed().as_secs_f64() }),
    )
}
