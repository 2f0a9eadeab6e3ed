//! Command-level behavior: exit codes, config rejection, snapshots, output
//! shapes, and the coreset-to-eval path.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn run_cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lors"))
        .args(args)
        .output()
        .expect("run lors binary")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const SMALL_CONFIG: &str = r#"
[data]
k_topics = 4
latent_dim = 6
dx = 10
dy = 8
train_per_topic = 15
test_per_topic = 5
noise = 0.1
seed = 9

[model]
embed_dim = 6
tau = 0.07

[experts]
count = 3
epochs = 3
batch_size = 15
lr = 0.05
momentum = 0.0
base_seed = 40

[distill]
pairs = 12
sim = "lors"
rank = 2
alpha = 1.0
initial_inner_lr = 0.01
loss = "wbce"
beta = 0.5
synth_steps = 4
expert_epochs = 1
max_start_epoch = 2
batch_size = 6
lr_x = 10.0
lr_y = 10.0
lr_sim = 1.0
lr_lr = 1e-4
momentum = 0.5
iterations = 30
seed = 3

[eval]
steps = 200
batch_size = 6
momentum = 0.0
loss = "wbce"
beta = 0.5
ks = [1, 3, 5]
seeds = [1, 2]
mlp_hidden = []

[coreset]
method = "kcenter"
pairs = 12
seed = 1
eval_inner_lr = 0.05

[analyze]
dup_pairs = 10
bins = 20
spectrum_threshold = 1e-6
sim = "full"
rank = 4
alpha = 1.0
initial_inner_lr = 0.01
loss = "ence"
beta = 0.5
synth_steps = 4
expert_epochs = 1
max_start_epoch = 2
batch_size = 5
lr_x = 10.0
lr_y = 10.0
lr_sim = 3.0
lr_lr = 1e-4
momentum = 0.5
iterations = 0
seed = 3
"#;

struct PipelineFixture {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl PipelineFixture {
    fn out(&self) -> &Path {
        self.dir.path()
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }
}

/// One small end-to-end pipeline shared by every test in this file.
fn pipeline() -> &'static PipelineFixture {
    static FIXTURE: OnceLock<PipelineFixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let config = dir.path().join("small.toml");
        std::fs::write(&config, SMALL_CONFIG).unwrap();
        let fx = PipelineFixture { dir, config };
        let cfg = fx.config.to_str().unwrap();
        let out = fx.out().to_str().unwrap();

        let r = run_cli(&["gen-data", "--config", cfg, "--out-dir", out]);
        assert!(r.status.success(), "{}", stderr(&r));
        let r = run_cli(&[
            "train-experts",
            "--config",
            cfg,
            "--dataset",
            fx.path("train.lepd").to_str().unwrap(),
            "--out-dir",
            out,
        ]);
        assert!(r.status.success(), "{}", stderr(&r));
        let r = run_cli(&[
            "distill",
            "--config",
            cfg,
            "--dataset",
            fx.path("train.lepd").to_str().unwrap(),
            "--store",
            fx.path("experts").to_str().unwrap(),
            "--out-dir",
            out,
        ]);
        assert!(r.status.success(), "{}", stderr(&r));
        fx
    })
}

#[test]
fn unknown_config_key_is_rejected_with_its_name() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(
        &config,
        "[data]\nk_topics = 2\nlatent_dim = 2\ndx = 4\ndy = 4\ntrain_per_topic = 2\ntest_per_topic = 1\nnoise = 0.1\nseed = 1\nbananas = 7\n",
    )
    .unwrap();
    let r = run_cli(&["gen-data", "--config", config.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2), "config errors exit with 2");
    assert!(stderr(&r).contains("bananas"), "error names the key: {}", stderr(&r));
}

#[test]
fn missing_dataset_is_an_explicit_file_error() {
    let fx = pipeline();
    let r = run_cli(&[
        "train-experts",
        "--config",
        fx.config.to_str().unwrap(),
        "--dataset",
        fx.path("nope.lepd").to_str().unwrap(),
        "--out-dir",
        fx.out().to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(3), "io errors exit with 3");
    assert!(stderr(&r).contains("nope.lepd"), "{}", stderr(&r));
}

#[test]
fn gen_data_reruns_print_identical_digests() {
    let fx = pipeline();
    let cfg = fx.config.to_str().unwrap();
    let a = run_cli(&["gen-data", "--config", cfg, "--out-dir", fx.path("rerun-a").to_str().unwrap()]);
    let b = run_cli(&["gen-data", "--config", cfg, "--out-dir", fx.path("rerun-b").to_str().unwrap()]);
    assert!(a.status.success() && b.status.success());
    let digest = |s: &str| -> Vec<String> {
        s.lines()
            .filter_map(|l| l.split("digest ").nth(1))
            .map(|d| d.to_string())
            .collect()
    };
    assert_eq!(digest(&stdout(&a)), digest(&stdout(&b)));
    assert!(!digest(&stdout(&a)).is_empty());
}

#[test]
fn manifest_lists_requested_expert_count() {
    let fx = pipeline();
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(fx.path("experts/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["count"], 3);
    assert_eq!(manifest["files"].as_array().unwrap().len(), 3);
    assert!(fx.path("experts/expert_0002.ltrj").exists());
}

#[test]
fn trace_has_one_row_per_iteration() {
    let fx = pipeline();
    let trace = std::fs::read_to_string(fx.path("trace.csv")).unwrap();
    let lines: Vec<&str> = trace.lines().collect();
    assert_eq!(lines[0], "iteration,loss,start_epoch,expert_id,inner_lr");
    assert_eq!(lines.len(), 1 + 30);
}

#[test]
fn resolved_snapshots_are_written() {
    let fx = pipeline();
    for name in ["resolved_gen-data.toml", "resolved_distill.toml"] {
        assert!(fx.path(name).exists(), "{name} missing");
    }
    assert!(fx.path("experts/resolved_train-experts.toml").exists());
    // Snapshots parse back as TOML.
    let text = std::fs::read_to_string(fx.path("resolved_distill.toml")).unwrap();
    let value: toml::Value = toml::from_str(&text).unwrap();
    assert_eq!(value["distill"]["iterations"].as_integer(), Some(30));
}

#[test]
fn fix_similarity_flag_reproduces_identity_baseline_path() {
    let fx = pipeline();
    let cfg = fx.config.to_str().unwrap();
    let out = fx.path("fixed-sim");
    let r = run_cli(&[
        "distill",
        "--config",
        cfg,
        "--dataset",
        fx.path("train.lepd").to_str().unwrap(),
        "--store",
        fx.path("experts").to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
        "--fix-similarity",
    ]);
    assert!(r.status.success(), "{}", stderr(&r));
    let artifact = lors_core::data::load_artifact(&out.join("artifact.lsyn")).unwrap();
    match &artifact.sim {
        lors_core::lors::SimParams::Lors(p) => {
            // Frozen at init: the composed similarity is still the identity.
            assert_eq!(lors_core::lors::compose_all(p).unwrap(), lors_core::Tensor::eye(12));
        }
        other => panic!("expected lors params, got {other:?}"),
    }
    // The snapshot records the effective flag.
    let text = std::fs::read_to_string(out.join("resolved_distill.toml")).unwrap();
    assert!(text.contains("fix_similarity = true"));
}

#[test]
fn eval_report_is_schema_valid_and_monotone() {
    let fx = pipeline();
    let out = fx.path("eval");
    let r = run_cli(&[
        "eval",
        "--config",
        fx.config.to_str().unwrap(),
        "--artifact",
        fx.path("artifact.lsyn").to_str().unwrap(),
        "--test",
        fx.path("test.lepd").to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", stderr(&r));
    // JSON round-trips through the documented report type.
    let reports: Vec<lors_core::eval::RetrievalReport> =
        serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(reports.len(), 1);
    let report = &reports[0];
    assert_eq!(report.seeds, vec![1, 2]);
    for stats in [&report.ir, &report.tr] {
        for pair in stats.windows(2) {
            assert!(pair[1].mean >= pair[0].mean, "recall not monotone in K");
        }
        for stat in stats {
            assert!(stat.mean >= 0.0 && stat.mean <= 100.0);
            assert_eq!(stat.per_seed.len(), 2);
        }
    }
    // The printed table carries mean and std columns per metric row.
    let text = stdout(&r);
    assert!(text.contains("IR@1") && text.contains("TR@5"));
    assert!(text.contains("mean") && text.contains("std"));
    // CSV has a row per (arch, metric, k).
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6);
}

#[test]
fn coreset_output_feeds_eval_unchanged() {
    let fx = pipeline();
    let out = fx.path("coreset");
    let r = run_cli(&[
        "coreset",
        "--config",
        fx.config.to_str().unwrap(),
        "--dataset",
        fx.path("train.lepd").to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", stderr(&r));
    let selection: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("selection.json")).unwrap()).unwrap();
    assert_eq!(selection["method"], "kcenter");
    assert_eq!(selection["indices"].as_array().unwrap().len(), 12);

    // The emitted artifact is an identity-similarity dataset eval accepts.
    let r = run_cli(&[
        "eval",
        "--config",
        fx.config.to_str().unwrap(),
        "--artifact",
        out.join("coreset.lsyn").to_str().unwrap(),
        "--test",
        fx.path("test.lepd").to_str().unwrap(),
        "--out-dir",
        fx.path("coreset-eval").to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", stderr(&r));
    let artifact = lors_core::data::load_artifact(&out.join("coreset.lsyn")).unwrap();
    assert_eq!(artifact.sim, lors_core::lors::SimParams::Identity);
}

#[test]
fn analyze_init_probe_reports_exact_group_means() {
    // iterations = 0 in the small config: the probe artifact is at its
    // initialization, so group means are exactly (1, 0, 0).
    let fx = pipeline();
    let out = fx.path("analyze");
    let r = run_cli(&[
        "analyze",
        "--config",
        fx.config.to_str().unwrap(),
        "--dataset",
        fx.path("train.lepd").to_str().unwrap(),
        "--store",
        fx.path("experts").to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", stderr(&r));
    let text = stdout(&r);
    assert!(
        text.contains("group means: tp 1 fn 0 tn 0"),
        "unexpected analyze output: {text}"
    );
    assert!(text.contains("[20, 20, 360]"), "cells for dup=10: {text}");

    // Spectrum CSV rows are sorted descending.
    let csv = std::fs::read_to_string(out.join("spectrum_full.csv")).unwrap();
    let values: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(!values.is_empty());
    for pair in values.windows(2) {
        assert!(pair[0] >= pair[1], "spectrum not descending");
    }
    // Histogram groups are normalized.
    let hist = std::fs::read_to_string(out.join("histogram.csv")).unwrap();
    let mut sums = [0.0f64; 3];
    for line in hist.lines().skip(1) {
        let cols: Vec<f64> = line.split(',').skip(2).map(|v| v.parse().unwrap()).collect();
        for (s, v) in sums.iter_mut().zip(&cols) {
            *s += v;
        }
    }
    for s in sums {
        assert!((s - 1.0).abs() < 1e-9, "histogram group not normalized: {s}");
    }
}

#[test]
fn numerical_divergence_exits_with_code_4() {
    let fx = pipeline();
    let config = fx.path("diverge.toml");
    // An absurd inner learning rate makes the unroll blow up immediately.
    let text = SMALL_CONFIG.replace("initial_inner_lr = 0.01", "initial_inner_lr = 1e9");
    std::fs::write(&config, text).unwrap();
    let r = run_cli(&[
        "distill",
        "--config",
        config.to_str().unwrap(),
        "--dataset",
        fx.path("train.lepd").to_str().unwrap(),
        "--store",
        fx.path("experts").to_str().unwrap(),
        "--out-dir",
        fx.path("diverge").to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(4), "numerical aborts exit with 4: {}", stderr(&r));
}
