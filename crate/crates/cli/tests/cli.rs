use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fairfilter::data::load_jsonl;
use fairfilter::metrics::EvalReport;
use serde_json::Value;

fn fairfilter(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fairfilter"))
        .args(args.iter().map(|a| a.as_ref()))
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn ok(out: Output) -> Output {
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

const SPEC: &str = r#"
n_posts = 200
target_names = ["muslim", "jewish", "women", "asian", "christian"]
label_rates = [0.2, 0.7, 0.4, 0.6, 0.3]
signal = 1.0
bias = 2.0
noise = 0.5
embedding_dim = 12
seed = 3
"#;

const CONFIG: &str = r#"
[split]
seen_targets = ["muslim", "jewish", "women", "asian"]
unseen_targets = ["christian"]
seed = 3

[train]
d = 16
head_hidden = 32
hyper_hidden = 32
batch_size = 32
max_outer_rounds = 2
seed = 7
"#;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path(name);
        fs::write(&p, text).unwrap();
        p
    }

    /// Synthesizes `corpus.jsonl` and `vectors.txt` from `spec`.
    fn synth(&self, spec: &str) {
        let spec = self.write("spec.toml", spec);
        ok(fairfilter(&[
            &"synth",
            &"--spec",
            &spec,
            &"--out",
            &self.path("corpus.jsonl"),
            &"--vectors",
            &self.path("vectors.txt"),
        ]));
    }

    fn train(&self, config: &str, out: &str) -> Output {
        let cfg = self.write("config.toml", config);
        fairfilter(&[
            &"train",
            &"--config",
            &cfg,
            &"--corpus",
            &self.path("corpus.jsonl"),
            &"--vectors",
            &self.path("vectors.txt"),
            &"--out",
            &self.path(out),
        ])
    }

    /// Evaluates `split` of `run`, or the whole corpus when `split` is `None`.
    fn eval(&self, run: &str, split: Option<&str>, out: &str, extra: &[&str]) -> EvalReport {
        let mut args: Vec<&dyn AsRef<std::ffi::OsStr>> = Vec::new();
        let ckpt = self.path(run).join("model.ckpt");
        let manifest = self.path(run).join("split.json");
        let corpus = self.path("corpus.jsonl");
        let vectors = self.path("vectors.txt");
        let out_dir = self.path(out);
        args.extend([
            &"eval" as &dyn AsRef<std::ffi::OsStr>,
            &"--checkpoint",
            &ckpt,
            &"--corpus",
            &corpus,
            &"--vectors",
            &vectors,
            &"--out",
            &out_dir,
        ]);
        let split_flag;
        if let Some(name) = split {
            split_flag = name.to_string();
            args.extend([&"--split-manifest" as &dyn AsRef<std::ffi::OsStr>, &manifest, &"--split", &split_flag]);
        }
        for e in extra {
            args.push(e);
        }
        ok(fairfilter(&args));
        read_report(&out_dir.join("report.json"))
    }
}

fn read_report(path: &Path) -> EvalReport {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn sha(path: &Path) -> String {
    use sha2::Digest;
    hex::encode(sha2::Sha256::digest(fs::read(path).unwrap()))
}

#[test]
fn synth_is_deterministic_and_reloads() {
    let ws = Workspace::new();
    ws.synth(SPEC);
    let first = fs::read(ws.path("corpus.jsonl")).unwrap();
    ws.synth(SPEC);
    assert_eq!(first, fs::read(ws.path("corpus.jsonl")).unwrap());
    assert_eq!(load_jsonl(ws.path("corpus.jsonl")).unwrap().len(), 200);

    let manifest: Value = serde_json::from_slice(&fs::read(ws.path("corpus.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "synth");
    assert_eq!(manifest["artifacts"][0]["sha256"], sha(&ws.path("corpus.jsonl")));
}

#[test]
fn empty_synthetic_corpus_warns_but_succeeds() {
    let ws = Workspace::new();
    let spec = ws.write("spec.toml", &SPEC.replace("n_posts = 200", "n_posts = 0"));
    let out = ok(fairfilter(&[&"synth", &"--spec", &spec, &"--out", &ws.path("c.jsonl")]));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_posts = 0"));
    assert!(fs::read(ws.path("c.jsonl")).unwrap().is_empty());
}

#[test]
fn invalid_synthetic_spec_is_a_config_error() {
    let ws = Workspace::new();
    let spec = ws.write("spec.toml", &SPEC.replace("0.2, 0.7", "1.2, 0.7"));
    let out = fairfilter(&[&"synth", &"--spec", &spec, &"--out", &ws.path("c.jsonl")]);
    assert_eq!(code(&out), 2);
    assert!(!ws.path("c.jsonl").exists());
}

#[test]
fn config_without_unseen_targets_is_rejected_before_training() {
    let ws = Workspace::new();
    ws.synth(SPEC);
    let config = CONFIG.replace("unseen_targets = [\"christian\"]", "");
    let out = ws.train(&config, "run");
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("unseen_targets"));
    assert!(!ws.path("run").exists());

    let out = ws.train(&config.replace("[split]", "[split]\nunseen_targets = []"), "run");
    assert_eq!(code(&out), 2);
    assert!(!ws.path("run").exists());
}

#[test]
fn missing_input_is_an_io_error_and_junk_checkpoint_a_data_error() {
    let ws = Workspace::new();
    ws.synth(SPEC);
    let out = fairfilter(&[
        &"train",
        &"--config",
        &ws.write("config.toml", CONFIG),
        &"--corpus",
        &ws.path("nope.jsonl"),
        &"--vectors",
        &ws.path("vectors.txt"),
        &"--out",
        &ws.path("run"),
    ]);
    assert_eq!(code(&out), 5);

    let junk = ws.write("junk.ckpt", "not a checkpoint");
    let out = fairfilter(&[
        &"export-filters",
        &"--checkpoint",
        &junk,
        &"--vectors",
        &ws.path("vectors.txt"),
        &"--targets",
        &"muslim",
        &"--out",
        &ws.path("f.json"),
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn divergence_has_its_own_exit_code() {
    let ws = Workspace::new();
    ws.synth(SPEC);
    let out = ws.train(&format!("{CONFIG}lr_filter = 1e300\nlr_hyper = 1e300\n"), "run");
    assert_eq!(code(&out), 4, "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn training_is_reproducible_and_eval_matches_the_selected_round() {
    let ws = Workspace::new();
    ws.synth(SPEC);
    let start = std::time::Instant::now();
    ok(ws.train(CONFIG, "a"));
    assert!(start.elapsed().as_secs() < 60);
    ok(ws.train(CONFIG, "b"));
    for f in ["model.ckpt", "split.json", "train_log.csv", "history.json"] {
        assert_eq!(sha(&ws.path("a").join(f)), sha(&ws.path("b").join(f)), "{f}");
    }

    let manifest: Value = serde_json::from_slice(&fs::read(ws.path("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["config"]["train"]["lambda"], 0.9);
    let digests: Vec<&str> = manifest["artifacts"].as_array().unwrap().iter().map(|a| a["sha256"].as_str().unwrap()).collect();
    assert!(digests.contains(&sha(&ws.path("a/model.ckpt")).as_str()));

    let history: Value = serde_json::from_slice(&fs::read(ws.path("a/history.json")).unwrap()).unwrap();
    let best = history["best_round"].as_u64().unwrap() as usize;
    let val = &history["rounds"][best]["validation"];
    let report = ws.eval("a", Some("validation"), "ev", &[]);
    assert_eq!(report.accuracy, val["accuracy"].as_f64().unwrap());
    assert_eq!(report.f1, val["f1"].as_f64().unwrap());
    assert_eq!(report.hf, val["hf"].as_f64().unwrap());
    assert_eq!(report.nfped, val["nfped"].as_f64().unwrap());
}

#[test]
fn tiny_corpus_is_memorized() {
    let ws = Workspace::new();
    ws.synth(&SPEC.replace("n_posts = 200", "n_posts = 60").replace("noise = 0.5", "noise = 0.05"));
    let config = CONFIG
        .replace("batch_size = 32", "batch_size = 4")
        .replace("max_outer_rounds = 2", "max_outer_rounds = 20\npatience = 20\nlambda = 0.0\ngamma = 0.0\nmu = 0.0");
    ok(ws.train(&config, "run"));
    let report = ws.eval("run", Some("train"), "ev", &[]);
    assert!(report.accuracy >= 0.95, "train accuracy {}", report.accuracy);
}

#[test]
fn unseen_targets_are_scored_and_unresolvable_ones_excluded() {
    let ws = Workspace::new();
    ws.synth(SPEC);
    ok(ws.train(CONFIG, "run"));
    let report = ws.eval("run", None, "ev", &[]);
    assert!(report.excluded.is_empty());
    let unseen = report.per_target.iter().find(|t| t.target == "christian").unwrap();
    assert!(unseen.posts > 0);
    assert!(unseen.fpr_deviation.is_some_and(f64::is_finite));

    // Drop the unseen target's word vector: its records are listed, not fatal.
    let vectors = fs::read_to_string(ws.path("vectors.txt")).unwrap();
    let kept: String = vectors.lines().filter(|l| !l.starts_with("christian ")).map(|l| format!("{l}\n")).collect();
    assert_ne!(kept.len(), vectors.len());
    fs::write(ws.path("vectors.txt"), kept).unwrap();
    let report = ws.eval("run", None, "ev2", &[]);
    assert!(!report.excluded.is_empty());
    assert!(report.warnings() > 0);
    let csv = fs::read_to_string(ws.path("ev2/predictions.csv")).unwrap();
    assert!(csv.lines().any(|l| l.contains(",,") && l.contains("christian")));
}

#[test]
fn exported_filters_have_the_flattened_arity() {
    let ws = Workspace::new();
    ws.synth(SPEC);
    ok(ws.train(&format!("{CONFIG}layers = 2\n"), "run"));
    let out = ws.path("filters.json");
    ok(fairfilter(&[
        &"export-filters",
        &"--checkpoint",
        &ws.path("run/model.ckpt"),
        &"--vectors",
        &ws.path("vectors.txt"),
        &"--targets",
        &"muslim,christian",
        &"--out",
        &out,
    ]));
    let export: Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    let targets = export["targets"].as_array().unwrap();
    assert_eq!(targets.len(), 2);
    for t in targets {
        let flat: usize = t["theta"].as_array().unwrap().iter().map(|l| l.as_array().unwrap().len()).sum();
        assert_eq!(flat, 2 * 16 * 17);
        assert_eq!(t["indicator"].as_array().unwrap().len(), 300);
    }
    assert!(ws.path("filters.json.manifest.json").exists());
}

#[test]
fn metrics_replay_is_exact_and_threshold_moves_only_hard_metrics() {
    let ws = Workspace::new();
    ws.synth(SPEC);
    ok(ws.train(CONFIG, "run"));
    let report = ws.eval("run", Some("test"), "ev", &[]);
    let preds = ws.path("ev/predictions.csv");
    let metrics = |out: &Path, threshold: &str| {
        fairfilter(&[
            &"metrics",
            &"--predictions",
            &preds,
            &"--corpus",
            &ws.path("corpus.jsonl"),
            &"--split-manifest",
            &ws.path("run/split.json"),
            &"--split",
            &"test",
            &"--threshold",
            &threshold,
            &"--seed",
            &"7",
            &"--checkpoint-id",
            &report.metadata.checkpoint_id,
            &"--out",
            &out,
        ])
    };
    ok(metrics(&ws.path("replay.json"), "0.5"));
    assert_eq!(fs::read(ws.path("replay.json")).unwrap(), fs::read(ws.path("ev/report.json")).unwrap());

    ok(metrics(&ws.path("shifted.json"), "0.3"));
    let shifted = read_report(&ws.path("shifted.json"));
    assert_eq!(shifted.auc, report.auc);
    assert_ne!(shifted.accuracy, report.accuracy);

    fs::write(&preds, "").unwrap();
    assert_eq!(code(&metrics(&ws.path("empty.json"), "0.5")), 3);
    fs::write(&preds, "id,score,label,error\n").unwrap();
    assert_eq!(code(&metrics(&ws.path("empty.json"), "0.5")), 3);
    fs::write(&preds, "id,score,label,error\nghost,0.5,1,\n").unwrap();
    assert_eq!(code(&metrics(&ws.path("ghost.json"), "0.5")), 3);
}
