//! Command implementations: each loads its config section, applies CLI
//! overrides, runs the pipeline stage, writes outputs plus a resolved-config
//! snapshot, and prints a short summary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use lors_core::analysis::{false_negative_probe, spectrum, SpectrumReport};
use lors_core::coreset::{
    select_forgetting, select_herding, select_kcenter, select_random, ForgettingProbeConfig,
    SelectionResult,
};
use lors_core::data::{
    artifact_digest, generate_toy, load_dataset, save_artifact, save_dataset, EmbeddingPairDataset,
};
use lors_core::distill::{run_distillation, MatchRecord, Provenance, SyntheticDataset};
use lors_core::eval::{evaluate_synthetic, ArchSpec, RetrievalReport, StudentConfig};
use lors_core::expert::{build_store, load_store};
use lors_core::format::fnv1a;
use lors_core::lors::SimParams;
use lors_core::model::EncoderSpec;
use lors_core::{Error, Result};

use crate::config::{require, write_snapshot, RunConfig};

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn file_digest(path: &Path) -> Result<u64> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(fnv1a(&bytes))
}

#[derive(Serialize)]
struct GenDataSnapshot<'a> {
    out_dir: String,
    data: &'a crate::config::DataSection,
}

pub fn cmd_gen_data(cfg: &RunConfig, out_dir: &Path, seed: Option<u64>) -> Result<()> {
    let mut section = require(&cfg.data, "data")?.clone();
    if let Some(s) = seed {
        section.seed = s;
    }
    let (train, test) = generate_toy(&section.to_core())?;
    let train_path = out_dir.join("train.lepd");
    let test_path = out_dir.join("test.lepd");
    save_dataset(&train_path, &train)?;
    save_dataset(&test_path, &test)?;
    write_snapshot(
        out_dir,
        "gen-data",
        &GenDataSnapshot { out_dir: out_dir.display().to_string(), data: &section },
    )?;
    println!("wrote {} ({} pairs) digest {:016x}", train_path.display(), train.len(), file_digest(&train_path)?);
    println!("wrote {} ({} pairs) digest {:016x}", test_path.display(), test.len(), file_digest(&test_path)?);
    Ok(())
}

#[derive(Serialize)]
struct ExpertsSnapshot<'a> {
    out_dir: String,
    dataset: String,
    model: &'a crate::config::ModelSection,
    experts: &'a crate::config::ExpertsSection,
}

pub fn cmd_train_experts(
    cfg: &RunConfig,
    dataset_path: &Path,
    out_dir: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let model = require(&cfg.model, "model")?;
    let mut section = require(&cfg.experts, "experts")?.clone();
    if let Some(s) = seed {
        section.base_seed = s;
    }
    let dataset = load_dataset(dataset_path)?;
    let (spec_v, spec_t) = model.specs(dataset.dx(), dataset.dy());
    let store = build_store(
        &dataset,
        &spec_v,
        &spec_t,
        model.tau,
        &section.to_core(),
        section.count,
        section.base_seed,
        out_dir,
    )?;
    write_snapshot(
        out_dir,
        "train-experts",
        &ExpertsSnapshot {
            out_dir: out_dir.display().to_string(),
            dataset: dataset_path.display().to_string(),
            model,
            experts: &section,
        },
    )?;
    println!(
        "trained {} experts x {} epochs into {}",
        store.manifest.count,
        store.manifest.epochs,
        out_dir.display()
    );
    for file in &store.manifest.files {
        println!("  {} digest {:016x}", file, file_digest(&out_dir.join(file))?);
    }
    Ok(())
}

#[derive(Serialize)]
struct DistillSnapshot<'a> {
    out_dir: String,
    dataset: String,
    store: String,
    distill: &'a crate::config::DistillSection,
}

#[derive(Debug, Default, Clone, Copy)]
pub struct AblationFlags {
    pub fix_image: bool,
    pub fix_text: bool,
    pub fix_similarity: bool,
    pub no_lr_residual: bool,
    pub no_omega: bool,
    pub fix_lr: bool,
}

pub fn trace_csv(records: &[MatchRecord]) -> String {
    let mut out = String::from("iteration,loss,start_epoch,expert_id,inner_lr\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.iteration, r.loss, r.start_epoch, r.expert_id, r.inner_lr
        );
    }
    out
}

pub fn cmd_distill(
    cfg: &RunConfig,
    dataset_path: &Path,
    store_dir: &Path,
    out_dir: &Path,
    seed: Option<u64>,
    flags: AblationFlags,
) -> Result<()> {
    let mut section = require(&cfg.distill, "distill")?.clone();
    if let Some(s) = seed {
        section.seed = s;
    }
    section.fix_image |= flags.fix_image;
    section.fix_text |= flags.fix_text;
    section.fix_similarity |= flags.fix_similarity;
    section.no_lr_residual |= flags.no_lr_residual;
    section.no_omega |= flags.no_omega;
    section.fix_lr |= flags.fix_lr;

    let dataset = load_dataset(dataset_path)?;
    let store = load_store(store_dir)?;
    let (init, dcfg) = section.to_core();
    let (synthetic, records) = run_distillation(&dataset, &store, &init, &dcfg)?;

    let artifact_path = out_dir.join("artifact.lsyn");
    save_artifact(&artifact_path, &synthetic)?;
    write_text(&out_dir.join("trace.csv"), &trace_csv(&records))?;
    write_snapshot(
        out_dir,
        "distill",
        &DistillSnapshot {
            out_dir: out_dir.display().to_string(),
            dataset: dataset_path.display().to_string(),
            store: store_dir.display().to_string(),
            distill: &section,
        },
    )?;
    let last = records.last();
    println!(
        "distilled {} pairs ({} sim) in {} iterations; final loss {} inner_lr {}",
        synthetic.pairs(),
        match synthetic.sim {
            SimParams::Identity => "identity",
            SimParams::Lors(_) => "lors",
            SimParams::Full(_) => "full",
        },
        records.len(),
        last.map(|r| r.loss.to_string()).unwrap_or_else(|| "n/a".into()),
        synthetic.inner_lr
    );
    println!("wrote {} digest {:016x}", artifact_path.display(), file_digest(&artifact_path)?);
    Ok(())
}

#[derive(Serialize)]
struct EvalSnapshot<'a> {
    out_dir: String,
    artifact: String,
    test: String,
    eval: &'a crate::config::EvalSection,
}

pub fn report_csv(reports: &[RetrievalReport]) -> String {
    let mut out = String::from("arch,metric,k,mean,std,per_seed\n");
    for report in reports {
        for (label, stats) in [("IR", &report.ir), ("TR", &report.tr)] {
            for stat in stats {
                let per_seed = stat
                    .per_seed
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(";");
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    report.arch, label, stat.k, stat.mean, stat.std, per_seed
                );
            }
        }
    }
    out
}

pub fn print_report_table(reports: &[RetrievalReport]) {
    for report in reports {
        println!("== {} (seeds: {:?}) ==", report.arch, report.seeds);
        println!("{:<8}{:>10}{:>10}", "metric", "mean", "std");
        for (label, stats) in [("IR", &report.ir), ("TR", &report.tr)] {
            for stat in stats {
                println!("{:<8}{:>10.2}{:>10.2}", format!("{label}@{}", stat.k), stat.mean, stat.std);
            }
        }
    }
}

pub fn cmd_eval(cfg: &RunConfig, artifact_path: &Path, test_path: &Path, out_dir: &Path) -> Result<()> {
    let section = require(&cfg.eval, "eval")?.clone();
    let synthetic = lors_core::data::load_artifact(artifact_path)?;
    let digest_before = artifact_digest(&synthetic)?;
    let test = load_dataset(test_path)?;

    let student = StudentConfig {
        steps: section.steps,
        batch_size: section.batch_size,
        lr: section.lr,
        momentum: section.momentum,
        loss: section.loss,
        beta: section.beta,
    };
    let spec_v = synthetic.provenance.spec_v.clone();
    let spec_t = synthetic.provenance.spec_t.clone();
    let mut archs: Vec<ArchSpec> = vec![("linear".into(), spec_v.clone(), spec_t.clone())];
    for hidden in &section.mlp_hidden {
        archs.push((
            format!("mlp{hidden:?}"),
            EncoderSpec::mlp(spec_v.input_dim, hidden.clone(), spec_v.output_dim),
            EncoderSpec::mlp(spec_t.input_dim, hidden.clone(), spec_t.output_dim),
        ));
    }
    let reports = evaluate_synthetic(&synthetic, &archs, &student, &test, &section.ks, &section.seeds)?;
    if artifact_digest(&synthetic)? != digest_before {
        return Err(Error::Numeric("evaluation mutated the synthetic artifact".into()));
    }

    let json = serde_json::to_string_pretty(&reports)
        .map_err(|e| Error::Config(format!("report encode: {e}")))?;
    write_text(&out_dir.join("report.json"), &json)?;
    write_text(&out_dir.join("report.csv"), &report_csv(&reports))?;
    write_snapshot(
        out_dir,
        "eval",
        &EvalSnapshot {
            out_dir: out_dir.display().to_string(),
            artifact: artifact_path.display().to_string(),
            test: test_path.display().to_string(),
            eval: &section,
        },
    )?;
    print_report_table(&reports);
    Ok(())
}

#[derive(Serialize)]
struct CoresetSnapshot<'a> {
    out_dir: String,
    dataset: String,
    model: &'a crate::config::ModelSection,
    coreset: &'a crate::config::CoresetSection,
}

/// Package a selection as an identity-similarity artifact so `eval` can
/// consume it unchanged.
pub fn selection_to_artifact(
    dataset: &EmbeddingPairDataset,
    selection: &SelectionResult,
    spec_v: &EncoderSpec,
    spec_t: &EncoderSpec,
    tau: f64,
    inner_lr: f64,
) -> SyntheticDataset {
    SyntheticDataset {
        x: dataset.x.gather_rows(&selection.indices),
        y: dataset.y.gather_rows(&selection.indices),
        sim: SimParams::Identity,
        inner_lr,
        provenance: Provenance {
            init_indices: selection.indices.clone(),
            config_digest: fnv1a(selection.method.as_bytes()),
            spec_v: spec_v.clone(),
            spec_t: spec_t.clone(),
            tau,
        },
    }
}

pub fn cmd_coreset(cfg: &RunConfig, dataset_path: &Path, out_dir: &Path, seed: Option<u64>) -> Result<()> {
    let model = require(&cfg.model, "model")?;
    let mut section = require(&cfg.coreset, "coreset")?.clone();
    if let Some(s) = seed {
        section.seed = s;
    }
    let dataset = load_dataset(dataset_path)?;
    let selection = match section.method.as_str() {
        "random" => select_random(&dataset, section.pairs, section.seed)?,
        "kcenter" => select_kcenter(&dataset, section.pairs, section.seed)?,
        "herding" => select_herding(&dataset, section.pairs)?,
        "forgetting" => {
            let probe = section.probe.clone().ok_or_else(|| {
                Error::Config("[coreset] method 'forgetting' needs a [coreset.probe] section".into())
            })?;
            select_forgetting(
                &dataset,
                section.pairs,
                &ForgettingProbeConfig {
                    epochs: probe.epochs,
                    batch_size: probe.batch_size,
                    lr: probe.lr,
                    momentum: probe.momentum,
                    embed_dim: model.embed_dim,
                    tau: model.tau,
                },
                section.seed,
            )?
        }
        other => {
            return Err(Error::Config(format!(
                "unknown coreset method '{other}' (expected random|kcenter|herding|forgetting)"
            )))
        }
    };
    let (spec_v, spec_t) = model.specs(dataset.dx(), dataset.dy());
    let artifact = selection_to_artifact(
        &dataset,
        &selection,
        &spec_v,
        &spec_t,
        model.tau,
        section.eval_inner_lr,
    );
    let selection_json = serde_json::to_string_pretty(&selection)
        .map_err(|e| Error::Config(format!("selection encode: {e}")))?;
    write_text(&out_dir.join("selection.json"), &selection_json)?;
    let artifact_path = out_dir.join("coreset.lsyn");
    save_artifact(&artifact_path, &artifact)?;
    write_snapshot(
        out_dir,
        "coreset",
        &CoresetSnapshot {
            out_dir: out_dir.display().to_string(),
            dataset: dataset_path.display().to_string(),
            model,
            coreset: &section,
        },
    )?;
    println!(
        "selected {} pairs by {}; wrote {} digest {:016x}",
        selection.indices.len(),
        selection.method,
        artifact_path.display(),
        file_digest(&artifact_path)?
    );
    Ok(())
}

#[derive(Serialize)]
struct AnalyzeSnapshot<'a> {
    out_dir: String,
    dataset: Option<String>,
    store: Option<String>,
    artifact: Option<String>,
    analyze: &'a crate::config::AnalyzeSection,
}

fn spectrum_csv(report: &SpectrumReport) -> String {
    let mut out = String::from("index,singular_value\n");
    for (i, s) in report.singular_values.iter().enumerate() {
        let _ = writeln!(out, "{i},{s}");
    }
    out
}

fn write_artifact_spectra(
    synthetic: &SyntheticDataset,
    threshold: f64,
    out_dir: &Path,
) -> Result<()> {
    let composed = synthetic.compose_similarity()?;
    let full = spectrum(&composed, threshold)?;
    write_text(&out_dir.join("spectrum_full.csv"), &spectrum_csv(&full))?;
    println!(
        "similarity spectrum: sigma_max {} numerical rank {} (threshold {})",
        full.singular_values.first().copied().unwrap_or(0.0),
        full.numerical_rank,
        threshold
    );
    if let SimParams::Lors(p) = &synthetic.sim {
        let (omega, residual) = lors_core::analysis::decompose_view(p);
        let mut omega_csv = String::from("index,omega\n");
        for (i, v) in omega.data().iter().enumerate() {
            let _ = writeln!(omega_csv, "{i},{v}");
        }
        write_text(&out_dir.join("omega.csv"), &omega_csv)?;
        let resid = spectrum(&residual, threshold)?;
        write_text(&out_dir.join("spectrum_residual.csv"), &spectrum_csv(&resid))?;
        println!("residual numerical rank {} (factor rank {})", resid.numerical_rank, p.rank);
    }
    Ok(())
}

fn histogram_csv(h: &lors_core::analysis::SimHistogram) -> String {
    let mut out = String::from("bin_lo,bin_hi,true_positive,false_negative,true_negative\n");
    for b in 0..h.true_positive.len() {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            h.edges[b],
            h.edges[b + 1],
            h.true_positive[b],
            h.false_negative[b],
            h.true_negative[b]
        );
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_analyze(
    cfg: &RunConfig,
    dataset_path: Option<&Path>,
    store_dir: Option<&Path>,
    artifact_path: Option<&Path>,
    out_dir: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let mut section = require(&cfg.analyze, "analyze")?.clone();
    if let Some(s) = seed {
        section.seed = s;
    }
    write_snapshot(
        out_dir,
        "analyze",
        &AnalyzeSnapshot {
            out_dir: out_dir.display().to_string(),
            dataset: dataset_path.map(|p| p.display().to_string()),
            store: store_dir.map(|p| p.display().to_string()),
            artifact: artifact_path.map(|p| p.display().to_string()),
            analyze: &section,
        },
    )?;

    if let Some(artifact_path) = artifact_path {
        // Spectrum / decomposition of an existing artifact.
        let synthetic = lors_core::data::load_artifact(artifact_path)?;
        write_artifact_spectra(&synthetic, section.spectrum_threshold, out_dir)?;
        return Ok(());
    }

    let dataset_path = dataset_path
        .ok_or_else(|| Error::Config("analyze needs --dataset and --store (or --artifact)".into()))?;
    let store_dir = store_dir
        .ok_or_else(|| Error::Config("analyze needs --dataset and --store (or --artifact)".into()))?;
    let dataset = load_dataset(dataset_path)?;
    let store = load_store(store_dir)?;
    let dcfg = section.distill_config();
    let outcome = false_negative_probe(
        &dataset,
        &store,
        section.dup_pairs,
        section.sim,
        section.rank,
        section.alpha,
        section.initial_inner_lr,
        &dcfg,
        section.bins,
    )?;
    let h = &outcome.histogram;
    write_text(&out_dir.join("histogram.csv"), &histogram_csv(h))?;
    write_text(&out_dir.join("probe_trace.csv"), &trace_csv(&outcome.records))?;
    save_artifact(&out_dir.join("probe_artifact.lsyn"), &outcome.synthetic)?;
    write_artifact_spectra(&outcome.synthetic, section.spectrum_threshold, out_dir)?;
    println!(
        "probe cells (tp, fn, tn): {:?}; group means: tp {} fn {} tn {}",
        h.cell_counts, h.means[0], h.means[1], h.means[2]
    );
    Ok(())
}

/// Resolve the output directory: flag, then config, then current directory.
pub fn resolve_out_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    flag.or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("."))
}
