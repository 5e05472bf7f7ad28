//! End-to-end runs, parameter sweeps and the ablation table.

use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::corpus::{split, Corpus};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::trainer::{check_splits, LogRecord, TrainConfig, Trainer};

/// A finished run: trainer state, full log and test metrics of the
/// best-validation parameters.
pub struct RunOutcome {
    pub trainer: Trainer,
    pub log: Vec<LogRecord>,
    pub test: MetricsReport,
    pub warnings: Vec<String>,
    pub runtime: Duration,
}

/// Splits `corpus`, trains, and evaluates on the test split.
pub fn run(corpus: &Corpus, config: &TrainConfig) -> Result<RunOutcome> {
    let start = Instant::now();
    config.validate()?;
    let splits = split(corpus, config.split, config.split_seed())?;
    let warnings = check_splits(&splits, corpus.meta.class_count)?;
    let mut trainer = Trainer::new(config, &corpus.meta)?;
    trainer.run(&splits)?;
    let log = trainer.take_log();
    let test = trainer.best_model().evaluate(&splits.test)?;
    Ok(RunOutcome {
        trainer,
        log,
        test,
        warnings,
        runtime: start.elapsed(),
    })
}

/// Ablation settings, from classification only to the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Baseline,
    Tgan,
    Iccl,
    Imcl,
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Baseline,
        Ablation::Tgan,
        Ablation::Iccl,
        Ablation::Imcl,
        Ablation::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Baseline => "baseline",
            Ablation::Tgan => "tgan",
            Ablation::Iccl => "iccl",
            Ablation::Imcl => "imcl",
            Ablation::Full => "full",
        }
    }

    /// Row label of the ablation table.
    pub fn label(self) -> &'static str {
        match self {
            Ablation::Baseline => "baseline",
            Ablation::Tgan => "+TGAN",
            Ablation::Iccl => "+ICCL",
            Ablation::Imcl => "+IMCL",
            Ablation::Full => "full",
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let (tgan, iccl, imcl) = match self {
            Ablation::Baseline => (false, false, false),
            Ablation::Tgan => (true, false, false),
            Ablation::Iccl => (false, true, false),
            Ablation::Imcl => (false, false, true),
            Ablation::Full => (true, true, true),
        };
        TrainConfig {
            use_tgan: tgan,
            use_iccl: iccl,
            use_imcl: imcl,
            ..base.clone()
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown ablation {s:?} (expected baseline, tgan, iccl, imcl or full)"
            ))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Beta,
    Lambda,
    BatchSize,
    Ablation,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Beta => "beta",
            SweepAxis::Lambda => "lambda",
            SweepAxis::BatchSize => "batch_size",
            SweepAxis::Ablation => "ablation",
        }
    }

    /// `base` with the axis set to `value`.
    pub fn apply(self, base: &TrainConfig, value: &str) -> Result<TrainConfig> {
        let num = |v: &str| -> Result<f64> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{} value {v:?} is not a number", self.name())))
        };
        let config = match self {
            SweepAxis::Beta => TrainConfig {
                beta: num(value)?,
                ..base.clone()
            },
            SweepAxis::Lambda => TrainConfig {
                lambda: num(value)?,
                ..base.clone()
            },
            SweepAxis::BatchSize => TrainConfig {
                batch_size: value
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("batch_size value {value:?} is not a positive integer")))?,
                ..base.clone()
            },
            SweepAxis::Ablation => value.trim().parse::<Ablation>()?.apply(base),
        };
        config.validate()?;
        Ok(config)
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(SweepAxis::Beta),
            "lambda" => Ok(SweepAxis::Lambda),
            "batch_size" | "batch-size" => Ok(SweepAxis::BatchSize),
            "ablation" => Ok(SweepAxis::Ablation),
            _ => Err(Error::Config(format!(
                "unknown sweep axis {s:?} (expected beta, lambda, batch_size or ablation)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub seed: u64,
    pub waa: Option<f64>,
    pub wf1: Option<f64>,
    pub runtime_s: f64,
    /// `ok`, or the error that stopped the run.
    pub status: String,
}

fn sweep_one(corpus: &Corpus, base: &TrainConfig, axis: SweepAxis, value: &str, index: usize) -> SweepRow {
    let start = Instant::now();
    let seed = base.seed + index as u64;
    let seeded = TrainConfig { seed, ..base.clone() };
    let result = axis.apply(&seeded, value).and_then(|c| run(corpus, &c));
    let (waa, wf1, status) = match result {
        Ok(out) => (Some(out.test.waa), Some(out.test.wf1), "ok".to_string()),
        Err(e) => (None, None, e.to_string()),
    };
    SweepRow {
        axis: axis.name().into(),
        value: value.trim().into(),
        seed,
        waa,
        wf1,
        runtime_s: start.elapsed().as_secs_f64(),
        status,
    }
}

/// Runs one training per value with seed `base.seed + index`. Failed runs
/// are reported in their row and do not stop the sweep.
pub fn sweep(
    corpus: &Corpus,
    base: &TrainConfig,
    axis: SweepAxis,
    values: &[String],
    parallel: bool,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Argument("sweep needs at least one value".into()));
    }
    if !parallel {
        return Ok(values
            .iter()
            .enumerate()
            .map(|(k, v)| sweep_one(corpus, base, axis, v, k))
            .collect());
    }
    let rows = std::thread::scope(|scope| {
        let handles: Vec<_> = values
            .iter()
            .enumerate()
            .map(|(k, v)| scope.spawn(move || sweep_one(corpus, base, axis, v, k)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    });
    Ok(rows)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn quote(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("axis,value,seed,waa,wf1,runtime_s,status\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:.3},{}\n",
            r.axis,
            quote(&r.value),
            r.seed,
            cell(r.waa),
            cell(r.wf1),
            r.runtime_s,
            quote(&r.status)
        ));
    }
    out
}

/// One row per ablation setting and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: String,
    pub seed: u64,
    pub waa: f64,
    pub wf1: f64,
}

/// Trains every ablation setting for each seed.
pub fn ablation_table(corpus: &Corpus, base: &TrainConfig, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for a in Ablation::ALL {
        for &seed in seeds {
            let cfg = TrainConfig { seed, ..a.apply(base) };
            let out = run(corpus, &cfg)?;
            rows.push(AblationRow {
                config: a.label().into(),
                seed,
                waa: out.test.waa,
                wf1: out.test.wf1,
            });
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("config,seed,waa,wf1\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.config, r.seed, r.waa, r.wf1));
    }
    out
}
