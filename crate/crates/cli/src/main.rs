//! `ariign`: synthetic corpora, training runs, evaluation, sweeps,
//! reproduction checks and graph export.

mod config;
mod rundir;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ariign_core::checkpoint::write_checkpoint;
use ariign_core::corpus::{Dims, ModalityNoise};
use ariign_core::experiment::{run, sweep, sweep_csv, SweepAxis};
use ariign_core::{
    generate_synthetic, load_checkpoint, load_corpus, save_corpus, split, Corpus, Error, SyntheticSpec, Trainer,
};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use config::{ConfigArgs, SEED_ENV};
use rundir::{ReportFile, RunManifest};

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("run does not reproduce: {0}")]
    Mismatch(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Mismatch(_) => 1,
            CliError::Core(e) => match e {
                Error::Config(_) | Error::Argument(_) => 2,
                Error::Parse { .. }
                | Error::Dimension { .. }
                | Error::Label { .. }
                | Error::Data(_)
                | Error::Split(_)
                | Error::Shape(_) => 3,
                Error::Numeric(_) | Error::DegenerateBatch { .. } => 4,
                Error::Io { .. } | Error::Checkpoint(_) => 5,
            },
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "ariign", version, about = "Multimodal emotion recognition over utterance features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus with Gaussian class clusters.
    Synth(SynthArgs),
    /// Train on a corpus and write a run directory.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
        /// Replace an existing run in `out`.
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate a finished run's best parameters on one split.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Defaults to the corpus recorded in the manifest.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train once per value of one axis and tabulate test metrics.
    Sweep {
        #[arg(long)]
        corpus: PathBuf,
        /// beta, lambda, batch_size or ablation.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, allow_hyphen_values = true)]
        values: String,
        #[arg(long)]
        out: PathBuf,
        /// Run the values on separate threads.
        #[arg(long)]
        parallel: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Retrain a run from its manifest and compare against its outputs.
    Reproduce {
        #[arg(long)]
        run: PathBuf,
        /// Corpus to use instead of the recorded path; must match its hash.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Also write the rerun as a run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write one dialogue's graph as `src dst relation weight` lines.
    ExportGraph {
        #[arg(long)]
        corpus: PathBuf,
        /// Dialogue id, or its position in the corpus.
        #[arg(long)]
        dialogue: String,
        /// Take parameters from this run's checkpoint; otherwise a freshly
        /// initialized model built from the config flags.
        #[arg(long)]
        run: Option<PathBuf>,
        /// Stream name (text, audio, visual or fused); defaults to the first.
        #[arg(long)]
        stream: Option<String>,
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(clap::Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 6)]
    classes: usize,
    #[arg(long, default_value_t = 60)]
    dialogues: usize,
    #[arg(long, default_value_t = 20)]
    utterances: usize,
    #[arg(long, default_value_t = 2)]
    speakers: usize,
    /// Feature widths as text,audio,visual.
    #[arg(long, default_value = "100,100,512")]
    dims: String,
    /// Class-center separation.
    #[arg(long, default_value_t = 8.0)]
    sep: f64,
    /// Noise scale: one value, or text,audio,visual.
    #[arg(long, default_value = "1")]
    noise: String,
    /// Falls back to $ARIIGN_SEED, then 1.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
    All,
}

fn triple<T: std::str::FromStr + Copy>(s: &str, what: &str) -> std::result::Result<[T; 3], Error> {
    let parts: Vec<T> = s
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Argument(format!("--{what} {s:?}: expected numbers")))?;
    match parts[..] {
        [x] if what == "noise" => Ok([x; 3]),
        [t, a, v] => Ok([t, a, v]),
        _ => Err(Error::Argument(format!("--{what} {s:?}: expected text,audio,visual"))),
    }
}

fn synth(args: &SynthArgs) -> Result<()> {
    let [text, audio, visual] = triple::<usize>(&args.dims, "dims")?;
    let [nt, na, nv] = triple::<f64>(&args.noise, "noise")?;
    let seed = match args.seed {
        Some(s) => s,
        None => std::env::var(SEED_ENV)
            .ok()
            .map(|v| v.trim().parse().map_err(|_| Error::Argument(format!("{SEED_ENV}={v:?} is not a seed"))))
            .transpose()?
            .unwrap_or(1),
    };
    let spec = SyntheticSpec {
        class_count: args.classes,
        dialogues: args.dialogues,
        utterances_per_dialogue: args.utterances,
        speakers_per_dialogue: args.speakers,
        dims: Dims { text, audio, visual },
        separation: args.sep,
        noise: ModalityNoise {
            text: nt,
            audio: na,
            visual: nv,
        },
        seed,
    };
    let corpus = generate_synthetic(&spec)?;
    save_corpus(&args.output, &corpus)?;
    print!("{}", corpus_summary(&corpus, &args.output));
    if args.sep == 0.0 {
        let c = args.classes as f64;
        println!(
            "separation 0: all classes share one center, so the best achievable accuracy is about 1/{} = {:.3}",
            args.classes,
            1.0 / c
        );
    }
    Ok(())
}

fn corpus_summary(corpus: &Corpus, path: &Path) -> String {
    let hist = corpus.class_histogram();
    let total = corpus.utterance_count().max(1) as f64;
    let mut out = format!(
        "wrote {}\ndialogues {}\nutterances {}\nclasses {}\nclass histogram:\n",
        path.display(),
        corpus.dialogues.len(),
        corpus.utterance_count(),
        corpus.meta.class_count
    );
    for (name, n) in corpus.meta.class_names.iter().zip(&hist) {
        out.push_str(&format!("  {name:<12} {n:>6}  {:.3}\n", *n as f64 / total));
    }
    out
}

fn train(corpus_path: &Path, out: &Path, force: bool, args: &ConfigArgs) -> Result<()> {
    let config = args.resolve()?;
    let corpus = load_corpus(corpus_path)?;
    if out.join(rundir::MANIFEST).exists() && !force {
        return Err(Error::Config(format!(
            "{} already holds a run; pass --force to replace it",
            out.display()
        ))
        .into());
    }
    rundir::create_dir(out)?;
    let mut manifest = RunManifest::new(config, corpus_path)?;
    manifest.save(out)?;
    let outcome = run(&corpus, &manifest.config)?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    let report = rundir::write_outcome(out, &mut manifest, &outcome)?;
    println!(
        "test WAA {:.4} WF1 {:.4} (best epoch {}, {:.1} s)",
        report.report.waa,
        report.report.wf1,
        report.best_epoch.map_or_else(|| "-".into(), |e| e.to_string()),
        outcome.runtime.as_secs_f64()
    );
    println!("run directory {}", out.display());
    Ok(())
}

/// The corpus a run was trained on, checked against its recorded hash.
fn run_corpus(manifest: &RunManifest, override_path: Option<&Path>) -> Result<Corpus> {
    let path = override_path.unwrap_or(&manifest.corpus.path);
    let hash = rundir::fingerprint(path)?;
    if hash != manifest.corpus.sha256 {
        return Err(Error::Data(format!(
            "{} has sha256 {hash}, but the run was trained on {}",
            path.display(),
            manifest.corpus.sha256
        ))
        .into());
    }
    Ok(load_corpus(path)?)
}

fn eval(run_dir: &Path, corpus_path: Option<&Path>, which: SplitName, out: Option<&Path>) -> Result<()> {
    let manifest = RunManifest::load(run_dir)?;
    let trainer = load_checkpoint(run_dir.join(&manifest.outputs.checkpoint))?;
    // A different corpus is allowed for evaluation; the recorded one must
    // still match its hash.
    let corpus = match corpus_path {
        Some(p) => load_corpus(p)?,
        None => run_corpus(&manifest, None)?,
    };
    let config = &manifest.config;
    let splits = split(&corpus, config.split, config.split_seed())?;
    let (name, dialogues) = match which {
        SplitName::Train => ("train", splits.train),
        SplitName::Val => ("val", splits.val),
        SplitName::Test => ("test", splits.test),
        SplitName::All => ("all", corpus.dialogues.clone()),
    };
    let report = ReportFile {
        split: name.into(),
        class_names: corpus.meta.class_names.clone(),
        best_epoch: trainer.best.as_ref().map(|b| b.epoch),
        report: trainer.best_model().evaluate(&dialogues)?,
    };
    let json = rundir::to_json(&report);
    match out {
        Some(path) => rundir::write(path, &json)?,
        None => print!("{json}"),
    }
    Ok(())
}

#[derive(Serialize)]
struct SweepManifest<'a> {
    format: &'static str,
    build: String,
    axis: &'static str,
    values: &'a [String],
    parallel: bool,
    base: &'a ariign_core::TrainConfig,
    corpus: rundir::CorpusRef,
    started_unix: u64,
}

fn run_sweep(corpus_path: &Path, axis: &str, values: &str, out: &Path, parallel: bool, args: &ConfigArgs) -> Result<()> {
    let axis: SweepAxis = axis.parse()?;
    let values: Vec<String> = values
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(String::from)
        .collect();
    if values.is_empty() {
        return Err(Error::Argument("--values lists no values".into()).into());
    }
    let base = args.resolve()?;
    let corpus = load_corpus(corpus_path)?;
    rundir::create_dir(out)?;
    let abs = std::fs::canonicalize(corpus_path).map_err(|e| Error::io(corpus_path, e))?;
    let manifest = SweepManifest {
        format: "ariign-sweep-v1",
        build: rundir::build_id(),
        axis: axis.name(),
        values: &values,
        parallel,
        base: &base,
        corpus: rundir::CorpusRef {
            sha256: rundir::fingerprint(&abs)?,
            path: abs,
        },
        started_unix: rundir::unix_now(),
    };
    rundir::write(&out.join(rundir::MANIFEST), &rundir::to_json(&manifest))?;
    let rows = sweep(&corpus, &base, axis, &values, parallel)?;
    let csv = sweep_csv(&rows);
    rundir::write(&out.join("sweep.csv"), &csv)?;
    print!("{csv}");
    for r in rows.iter().filter(|r| r.status != "ok") {
        eprintln!("warning: {}={} failed: {}", r.axis, r.value, r.status);
    }
    Ok(())
}

fn checkpoint_bytes(trainer: &Trainer) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, trainer)?;
    Ok(buf)
}

fn reproduce(run_dir: &Path, corpus_path: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let manifest = RunManifest::load(run_dir)?;
    let corpus = run_corpus(&manifest, corpus_path)?;
    let recorded = ReportFile::load(&run_dir.join(&manifest.outputs.report))?;
    let log_path = run_dir.join(&manifest.outputs.log);
    let recorded_log = std::fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let ckpt_path = run_dir.join(&manifest.outputs.checkpoint);
    let recorded_ckpt = std::fs::read(&ckpt_path).map_err(|e| Error::io(&ckpt_path, e))?;

    let outcome = run(&corpus, &manifest.config)?;
    if let Some(dir) = out {
        rundir::create_dir(dir)?;
        let mut fresh = manifest.clone();
        fresh.started_unix = rundir::unix_now();
        fresh.finished_unix = None;
        fresh.outputs = rundir::Outputs::default();
        fresh.save(dir)?;
        rundir::write_outcome(dir, &mut fresh, &outcome)?;
    }

    let mut diffs = Vec::new();
    if outcome.test != recorded.report {
        diffs.push(format!(
            "test metrics differ: WAA {} vs {}, WF1 {} vs {}",
            outcome.test.waa, recorded.report.waa, outcome.test.wf1, recorded.report.wf1
        ));
    }
    if rundir::log_lines(&outcome.log) != recorded_log {
        diffs.push("training log differs".into());
    }
    if checkpoint_bytes(&outcome.trainer)? != recorded_ckpt {
        diffs.push("final checkpoint differs".into());
    }
    if !diffs.is_empty() {
        return Err(CliError::Mismatch(diffs.join("; ")));
    }
    println!(
        "reproduced: test WAA {} WF1 {}, log and checkpoint identical",
        outcome.test.waa, outcome.test.wf1
    );
    Ok(())
}

fn export_graph(
    corpus_path: &Path,
    dialogue: &str,
    run_dir: Option<&Path>,
    stream: Option<&str>,
    output: Option<&Path>,
    args: &ConfigArgs,
) -> Result<()> {
    let corpus = load_corpus(corpus_path)?;
    let model = match run_dir {
        Some(dir) => {
            let manifest = RunManifest::load(dir)?;
            load_checkpoint(dir.join(&manifest.outputs.checkpoint))?.best_model()
        }
        None => Trainer::new(&args.resolve()?, &corpus.meta)?.model,
    };
    let dlg = corpus
        .dialogues
        .iter()
        .find(|d| d.dialogue_id == dialogue)
        .or_else(|| dialogue.parse::<usize>().ok().and_then(|k| corpus.dialogues.get(k)))
        .ok_or_else(|| Error::Argument(format!("no dialogue {dialogue:?} in {}", corpus_path.display())))?;
    let graphs = model.speaker_graphs(dlg)?;
    let graph = match stream {
        None => &graphs[0],
        Some(s) => graphs.iter().find(|g| g.stream == s).ok_or_else(|| {
            let names: Vec<&str> = graphs.iter().map(|g| g.stream.as_str()).collect();
            Error::Argument(format!("no stream {s:?}; this model has {}", names.join(", ")))
        })?,
    };
    let text = graph.edge_list();
    match output {
        Some(path) => rundir::write(path, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => synth(&args),
        Command::Train {
            corpus,
            out,
            force,
            config,
        } => train(&corpus, &out, force, &config),
        Command::Eval {
            run,
            corpus,
            split,
            out,
        } => eval(&run, corpus.as_deref(), split, out.as_deref()),
        Command::Sweep {
            corpus,
            axis,
            values,
            out,
            parallel,
            config,
        } => run_sweep(&corpus, &axis, &values, &out, parallel, &config),
        Command::Reproduce { run, corpus, out } => reproduce(&run, corpus.as_deref(), out.as_deref()),
        Command::ExportGraph {
            corpus,
            dialogue,
            run,
            stream,
            output,
            config,
        } => export_graph(&corpus, &dialogue, run.as_deref(), stream.as_deref(), output.as_deref(), &config),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
