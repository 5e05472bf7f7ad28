//! Run directory layout: manifest, checkpoint, log, report and confusion
//! matrix.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use ariign_core::experiment::RunOutcome;
use ariign_core::{save_checkpoint, Error, LogRecord, MetricsReport, Result, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const RUN_FORMAT: &str = "ariign-run-v1";
pub const MANIFEST: &str = "manifest.json";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const LOG: &str = "log.jsonl";
pub const REPORT: &str = "report.json";
pub const CONFUSION: &str = "confusion.csv";

pub fn build_id() -> String {
    match option_env!("ARIIGN_BUILD_ID") {
        Some(id) => format!("{} ({id})", env!("CARGO_PKG_VERSION")),
        None => env!("CARGO_PKG_VERSION").to_string(),
    }
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// SHA-256 of the corpus file bytes, hex encoded.
pub fn fingerprint(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusRef {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Outputs {
    pub checkpoint: String,
    pub log: String,
    pub report: String,
    pub confusion: String,
}

impl Default for Outputs {
    fn default() -> Self {
        Self {
            checkpoint: CHECKPOINT.into(),
            log: LOG.into(),
            report: REPORT.into(),
            confusion: CONFUSION.into(),
        }
    }
}

/// Everything needed to rerun a training bit for bit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub build: String,
    pub config: TrainConfig,
    pub corpus: CorpusRef,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    /// File names relative to the run directory.
    pub outputs: Outputs,
}

impl RunManifest {
    pub fn new(config: TrainConfig, corpus_path: &Path) -> Result<Self> {
        let path = std::fs::canonicalize(corpus_path).map_err(|e| Error::io(corpus_path, e))?;
        Ok(Self {
            format: RUN_FORMAT.into(),
            build: build_id(),
            config,
            corpus: CorpusRef {
                sha256: fingerprint(&path)?,
                path,
            },
            started_unix: unix_now(),
            finished_unix: None,
            outputs: Outputs::default(),
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Self =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if manifest.format != RUN_FORMAT {
            return Err(Error::Config(format!(
                "{}: format {:?}, expected {RUN_FORMAT:?}",
                path.display(),
                manifest.format
            )));
        }
        Ok(manifest)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write(&dir.join(MANIFEST), &to_json(self))
    }
}

/// The test report as stored in `report.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportFile {
    pub split: String,
    pub class_names: Vec<String>,
    pub best_epoch: Option<usize>,
    #[serde(flatten)]
    pub report: MetricsReport,
}

impl ReportFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("run files serialize");
    s.push('\n');
    s
}

pub fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn log_lines(log: &[LogRecord]) -> String {
    log.iter().map(|r| r.to_json() + "\n").collect()
}

/// Writes checkpoint, log, report and confusion matrix, then stamps the
/// manifest as finished.
pub fn write_outcome(dir: &Path, manifest: &mut RunManifest, outcome: &RunOutcome) -> Result<ReportFile> {
    save_checkpoint(dir.join(CHECKPOINT), &outcome.trainer)?;
    write(&dir.join(LOG), &log_lines(&outcome.log))?;
    let meta = &outcome.trainer.model.meta;
    let report = ReportFile {
        split: "test".into(),
        class_names: meta.class_names.clone(),
        best_epoch: outcome.trainer.best.as_ref().map(|b| b.epoch),
        report: outcome.test.clone(),
    };
    write(&dir.join(REPORT), &to_json(&report))?;
    write(&dir.join(CONFUSION), &outcome.test.confusion.to_csv(&meta.class_names))?;
    manifest.finished_unix = Some(unix_now());
    manifest.save(dir)?;
    Ok(report)
}
