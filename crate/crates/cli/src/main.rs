//! `fairfilter`: synthesize corpora, train, evaluate, export filters, replay metrics.
//!
//! Exit codes: 0 ok, 2 configuration, 3 data, 4 numeric divergence, 5 I/O.

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use fairfilter::data::{load_jsonl, make_split, synth_generate, synth_word_vectors, write_jsonl, PostRecord, SplitManifest, SplitSpec, SyntheticSpec};
use fairfilter::embeddings::{build_indicator, build_indicators, WordVectorStore};
use fairfilter::hyperfilter::export_filters;
use fairfilter::metrics::{build_report, EvalReport, ExcludedRecord, Prediction, ReportMetadata};
use fairfilter::trainer::{fit, predict, Checkpoint, TrainConfig};

use manifest::{sha256_hex, sidecar, RunManifest};

#[derive(Parser)]
#[command(name = "fairfilter", version, about = "Target-aware debiasing filters for hate-speech classifiers")]
struct Cli {
    /// Raise log verbosity (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted target/label correlation.
    Synth {
        /// TOML synthetic spec (n_posts, target_names, label_rates, signal, bias, noise, embedding_dim, seed).
        #[arg(long)]
        spec: PathBuf,
        /// Output JSONL corpus; the manifest goes to `<out>.manifest.json`.
        #[arg(long)]
        out: PathBuf,
        /// Also write word vectors for the target names (text format).
        #[arg(long)]
        vectors: Option<PathBuf>,
    },
    /// Split a corpus and run adversarial training.
    Train {
        /// TOML with a `[split]` table (seen_targets, unseen_targets, ...) and an optional `[train]` table.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Word vectors in text format (`token v1 v2 ...`).
        #[arg(long)]
        vectors: PathBuf,
        /// Output directory: model.ckpt, split.json, train_log.csv, history.json, manifest.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score records with a checkpoint and report accuracy and fairness.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vectors: PathBuf,
        /// Split manifest written by `train`; without it every corpus record is evaluated.
        #[arg(long)]
        split_manifest: Option<PathBuf>,
        /// Split to evaluate: train, validation or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Decision threshold; defaults to the checkpoint's training threshold.
        #[arg(long)]
        threshold: Option<f64>,
        /// Output directory: report.json, predictions.csv, manifest.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write indicators and generated filter parameters for named targets.
    ExportFilters {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vectors: PathBuf,
        /// Comma-separated target names, seen or unseen.
        #[arg(long, value_delimiter = ',', required = true)]
        targets: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute a report from a predictions CSV.
    Metrics {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        split_manifest: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Seed recorded in the report metadata.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checkpoint id recorded in the report metadata.
        #[arg(long, default_value = "")]
        checkpoint_id: String,
        /// Output report JSON.
        #[arg(long)]
        out: PathBuf,
    },
}

/// A failed command: exit code and message.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        Self::new(5, format!("{}: {e}", path.display()))
    }

    fn context(self, path: &Path) -> Self {
        Self::new(self.code, format!("{}: {}", path.display(), self.message))
    }
}

impl From<fairfilter::Error> for Failure {
    fn from(e: fairfilter::Error) -> Self {
        Self::new(e.exit_code() as u8, e.to_string())
    }
}

type CmdResult<T = ()> = Result<T, Failure>;

pub fn read_file(path: &Path) -> CmdResult<Vec<u8>> {
    fs::read(path).map_err(|e| Failure::io(path, e))
}

fn read_text(path: &Path) -> CmdResult<String> {
    fs::read_to_string(path).map_err(|e| Failure::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> CmdResult {
    fs::write(path, bytes).map_err(|e| Failure::io(path, e))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CmdResult {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Failure::new(3, e.to_string()))?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CmdResult<T> {
    serde_json::from_slice(&read_file(path)?).map_err(|e| Failure::new(3, format!("{}: {e}", path.display())))
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> CmdResult<T> {
    toml::from_str(&read_text(path)?).map_err(|e| Failure::new(2, format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> CmdResult {
    fs::create_dir_all(path).map_err(|e| Failure::io(path, e))
}

fn load_corpus(path: &Path) -> CmdResult<Vec<PostRecord>> {
    load_jsonl(path).map_err(|e| Failure::from(e).context(path))
}

fn load_vectors(path: &Path) -> CmdResult<WordVectorStore> {
    WordVectorStore::load(path).map_err(|e| Failure::from(e).context(path))
}

fn load_checkpoint(path: &Path) -> CmdResult<(Checkpoint, String)> {
    let bytes = read_file(path)?;
    let ckpt = Checkpoint::from_bytes(&bytes).map_err(|e| Failure::from(e).context(path))?;
    if let Some(config) = &ckpt.config {
        ckpt.model.check_config(config)?;
    }
    Ok((ckpt, sha256_hex(&bytes)))
}

/// Records of one split, or the whole corpus when no split manifest is given.
fn select_records(records: Vec<PostRecord>, manifest: Option<&Path>, split: &str) -> CmdResult<Vec<PostRecord>> {
    match manifest {
        None => Ok(records),
        Some(path) => {
            let m: SplitManifest = read_json(path)?;
            let split_records = m.apply(&records)?;
            Ok(split_records.get(split)?.to_vec())
        }
    }
}

fn cmd_synth(spec_path: &Path, out: &Path, vectors: Option<&Path>) -> CmdResult {
    let spec: SyntheticSpec = read_toml(spec_path)?;
    spec.validate()?;
    if spec.n_posts == 0 {
        log::warn!("n_posts = 0: writing an empty corpus");
    }
    let records = synth_generate(&spec)?;
    let mut bytes = Vec::new();
    write_jsonl(&records, &mut bytes)?;
    write_file(out, &bytes)?;

    let mut manifest = RunManifest::new("synth", &spec, spec.seed)?;
    manifest.input("spec", spec_path)?;
    manifest.artifact("corpus", out)?;
    if let Some(path) = vectors {
        let store = synth_word_vectors(&spec.target_names, spec.seed)?;
        let mut text = Vec::new();
        store.write(&mut text)?;
        write_file(path, &text)?;
        manifest.artifact("vectors", path)?;
    }
    manifest.write(&sidecar(out))?;
    log::info!("wrote {} records to {}", records.len(), out.display());
    Ok(())
}

/// Training configuration file: split declaration plus trainer settings.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    split: SplitSpec,
    #[serde(default)]
    train: TrainConfig,
}

/// One row of `train_log.csv`.
#[derive(Serialize)]
struct LogRow {
    step: u64,
    round: usize,
    phase: &'static str,
    epoch: usize,
    l_hate: f64,
    l_dis: f64,
    l_reg: f64,
    l_imi: f64,
    synergic: f64,
}

fn cmd_train(config_path: &Path, corpus: &Path, vectors: &Path, out: &Path) -> CmdResult {
    let file: TrainFile = read_toml(config_path)?;
    file.split.validate().map_err(|e| Failure::from(e).context(config_path))?;
    file.train.validate().map_err(|e| Failure::from(e).context(config_path))?;
    let records = load_corpus(corpus)?;
    let store = load_vectors(vectors)?;
    for t in &file.split.unseen_targets {
        if let Err(e) = build_indicator(t, &store) {
            log::warn!("unseen target `{t}`: {e}; its test records will be excluded");
        }
    }
    let split = make_split(&records, &file.split)?;
    log::info!(
        "split: {} train, {} validation, {} test",
        split.train.len(),
        split.validation.len(),
        split.test.len()
    );

    let outcome = fit(&file.train, &split, &file.split.seen_targets, &store)?;
    log::info!("best round {} (stopped early: {})", outcome.best_round, outcome.stopped_early);

    create_dir(out)?;
    let ckpt_path = out.join("model.ckpt");
    Checkpoint {
        model: outcome.model,
        config: Some(file.train.clone()),
    }
    .save(&ckpt_path)
    .map_err(|e| Failure::from(e).context(&ckpt_path))?;

    let split_path = out.join("split.json");
    write_json(&split_path, &split.manifest(&file.split))?;

    let log_path = out.join("train_log.csv");
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in &outcome.history.steps {
        w.serialize(LogRow {
            step: s.step,
            round: s.round,
            phase: s.phase.as_str(),
            epoch: s.epoch,
            l_hate: s.losses.l_hate,
            l_dis: s.losses.l_dis,
            l_reg: s.losses.l_reg,
            l_imi: s.losses.l_imi,
            synergic: s.synergic,
        })
        .map_err(|e| Failure::new(5, e.to_string()))?;
    }
    let log_bytes = w.into_inner().map_err(|e| Failure::new(5, e.to_string()))?;
    write_file(&log_path, &log_bytes)?;

    let history_path = out.join("history.json");
    write_json(
        &history_path,
        &serde_json::json!({
            "best_round": outcome.best_round,
            "stopped_early": outcome.stopped_early,
            "rounds": outcome.history.rounds,
            "epochs": outcome.history.epochs,
        }),
    )?;

    let mut manifest = RunManifest::new("train", &file, file.train.seed)?;
    manifest.input("config", config_path)?;
    manifest.input("corpus", corpus)?;
    manifest.input("vectors", vectors)?;
    manifest.artifact("checkpoint", &ckpt_path)?;
    manifest.artifact("split", &split_path)?;
    manifest.artifact("train_log", &log_path)?;
    manifest.artifact("history", &history_path)?;
    manifest.write(&out.join("manifest.json"))
}

/// One row of `predictions.csv`; excluded records have no score.
#[derive(Debug, Serialize, Deserialize)]
struct PredictionRow {
    id: String,
    score: Option<String>,
    label: u8,
    error: Option<String>,
}

fn write_predictions(path: &Path, predictions: &[Prediction], excluded: &[ExcludedRecord], records: &[PostRecord]) -> CmdResult {
    let labels: std::collections::HashMap<&str, u8> = records.iter().map(|r| (r.id.as_str(), r.label)).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let rows = predictions
        .iter()
        .map(|p| PredictionRow {
            id: p.id.clone(),
            // `{}` prints the shortest string that parses back to the same f64.
            score: Some(format!("{}", p.score)),
            label: p.label,
            error: None,
        })
        .chain(excluded.iter().map(|x| PredictionRow {
            id: x.id.clone(),
            score: None,
            label: labels[x.id.as_str()],
            error: Some(x.reason.clone()),
        }));
    for row in rows {
        w.serialize(row).map_err(|e| Failure::new(5, e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Failure::new(5, e.to_string()))?;
    write_file(path, &bytes)
}

fn read_predictions(path: &Path) -> CmdResult<(Vec<Prediction>, Vec<ExcludedRecord>)> {
    let bytes = read_file(path)?;
    let bad = |msg: String| Failure::new(3, format!("{}: {msg}", path.display()));
    let mut predictions = Vec::new();
    let mut excluded = Vec::new();
    for row in csv::Reader::from_reader(bytes.as_slice()).deserialize::<PredictionRow>() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        match row.score {
            Some(s) => predictions.push(Prediction {
                score: s.parse().map_err(|_| bad(format!("score `{s}` of `{}` is not a number", row.id)))?,
                id: row.id,
                label: row.label,
            }),
            None => excluded.push(ExcludedRecord {
                id: row.id,
                reason: row.error.unwrap_or_default(),
            }),
        }
    }
    if predictions.is_empty() && excluded.is_empty() {
        return Err(bad("no prediction rows".into()));
    }
    Ok((predictions, excluded))
}

fn log_report(report: &EvalReport) {
    log::info!(
        "{} records: acc {:.4} F1 {:.4} nFPED {:.4} nFNED {:.4} HF {:.4}",
        report.evaluated,
        report.accuracy,
        report.f1,
        report.nfped,
        report.nfned,
        report.hf
    );
    if report.warnings() > 0 {
        log::warn!("{} record(s) excluded; see the report", report.warnings());
    }
}

#[derive(Serialize)]
struct EvalSettings<'a> {
    split: &'a str,
    threshold: f64,
    checkpoint_id: &'a str,
}

fn cmd_eval(
    checkpoint: &Path,
    corpus: &Path,
    vectors: &Path,
    split_manifest: Option<&Path>,
    split: &str,
    threshold: Option<f64>,
    out: &Path,
) -> CmdResult {
    let (ckpt, checkpoint_id) = load_checkpoint(checkpoint)?;
    let threshold = threshold.unwrap_or(ckpt.config.as_ref().map_or(0.5, |c| c.threshold));
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Failure::new(2, format!("threshold {threshold} outside (0, 1)")));
    }
    let split_name = if split_manifest.is_some() { split } else { "all" };
    let records = select_records(load_corpus(corpus)?, split_manifest, split)?;
    let store = load_vectors(vectors)?;

    let scored = predict(&ckpt.model, &records, &store)?;
    let seed = ckpt.config.as_ref().map_or(0, |c| c.seed);
    let meta = ReportMetadata {
        split: split_name.to_string(),
        threshold,
        seed,
        checkpoint_id: checkpoint_id.clone(),
    };
    let report = build_report(&scored.predictions, &records, scored.excluded.clone(), meta)?;
    log_report(&report);

    create_dir(out)?;
    let report_path = out.join("report.json");
    let pred_path = out.join("predictions.csv");
    write_json(&report_path, &report)?;
    write_predictions(&pred_path, &scored.predictions, &scored.excluded, &records)?;

    let settings = EvalSettings {
        split: split_name,
        threshold,
        checkpoint_id: &checkpoint_id,
    };
    let mut manifest = RunManifest::new("eval", &settings, seed)?;
    manifest.input("checkpoint", checkpoint)?;
    manifest.input("corpus", corpus)?;
    manifest.input("vectors", vectors)?;
    if let Some(path) = split_manifest {
        manifest.input("split_manifest", path)?;
    }
    manifest.artifact("report", &report_path)?;
    manifest.artifact("predictions", &pred_path)?;
    manifest.write(&out.join("manifest.json"))
}

fn cmd_export_filters(checkpoint: &Path, vectors: &Path, targets: &[String], out: &Path) -> CmdResult {
    let (ckpt, checkpoint_id) = load_checkpoint(checkpoint)?;
    let store = load_vectors(vectors)?;
    let indicators = build_indicators(targets, &store)?;
    let export = export_filters(&ckpt.model.hyper, &indicators)?;
    write_json(out, &export)?;

    let settings = serde_json::json!({ "targets": targets, "checkpoint_id": checkpoint_id });
    let seed = ckpt.config.as_ref().map_or(0, |c| c.seed);
    let mut manifest = RunManifest::new("export-filters", &settings, seed)?;
    manifest.input("checkpoint", checkpoint)?;
    manifest.input("vectors", vectors)?;
    manifest.artifact("filters", out)?;
    manifest.write(&sidecar(out))
}

fn cmd_metrics(
    predictions: &Path,
    corpus: &Path,
    split_manifest: Option<&Path>,
    split: Option<&str>,
    meta: ReportMetadata,
    out: &Path,
) -> CmdResult {
    if !(meta.threshold > 0.0 && meta.threshold < 1.0) {
        return Err(Failure::new(2, format!("threshold {} outside (0, 1)", meta.threshold)));
    }
    let (preds, excluded) = read_predictions(predictions)?;
    let records = select_records(load_corpus(corpus)?, split_manifest, split.unwrap_or("test"))?;
    let known: std::collections::HashSet<&str> = records.iter().map(|r| r.id.as_str()).collect();
    if let Some(x) = excluded.iter().find(|x| !known.contains(x.id.as_str())) {
        return Err(Failure::new(3, format!("excluded record `{}` is not in the corpus", x.id)));
    }
    let seed = meta.seed;
    let report = build_report(&preds, &records, excluded, meta)?;
    log_report(&report);
    write_json(out, &report)?;

    let mut manifest = RunManifest::new("metrics", &report.metadata, seed)?;
    manifest.input("predictions", predictions)?;
    manifest.input("corpus", corpus)?;
    if let Some(path) = split_manifest {
        manifest.input("split_manifest", path)?;
    }
    manifest.artifact("report", out)?;
    manifest.write(&sidecar(out))
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Synth { spec, out, vectors } => cmd_synth(&spec, &out, vectors.as_deref()),
        Command::Train {
            config,
            corpus,
            vectors,
            out,
        } => cmd_train(&config, &corpus, &vectors, &out),
        Command::Eval {
            checkpoint,
            corpus,
            vectors,
            split_manifest,
            split,
            threshold,
            out,
        } => cmd_eval(&checkpoint, &corpus, &vectors, split_manifest.as_deref(), &split, threshold, &out),
        Command::ExportFilters {
            checkpoint,
            vectors,
            targets,
            out,
        } => cmd_export_filters(&checkpoint, &vectors, &targets, &out),
        Command::Metrics {
            predictions,
            corpus,
            split_manifest,
            split,
            threshold,
            seed,
            checkpoint_id,
            out,
        } => {
            let split_name = match (&split_manifest, &split) {
                (None, _) => "all".to_string(),
                (Some(_), s) => s.clone().unwrap_or_else(|| "test".into()),
            };
            let meta = ReportMetadata {
                split: split_name,
                threshold,
                seed,
                checkpoint_id,
            };
            cmd_metrics(&predictions, &corpus, split_manifest.as_deref(), split.as_deref(), meta, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
