//! Run configuration: one TOML file with per-command sections. Unknown keys
//! are rejected, and every command writes a resolved snapshot of the
//! sections it used next to its outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use lors_core::data::ToyGenConfig;
use lors_core::distill::{DistillConfig, SyntheticInit};
use lors_core::expert::ExpertConfig;
use lors_core::losses::LossKind;
use lors_core::lors::SimKind;
use lors_core::model::EncoderSpec;
use lors_core::Error;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Default output directory; `--out-dir` overrides it.
    pub out_dir: Option<PathBuf>,
    pub data: Option<DataSection>,
    pub model: Option<ModelSection>,
    pub experts: Option<ExpertsSection>,
    pub distill: Option<DistillSection>,
    pub eval: Option<EvalSection>,
    pub coreset: Option<CoresetSection>,
    pub analyze: Option<AnalyzeSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub k_topics: usize,
    pub latent_dim: usize,
    pub dx: usize,
    pub dy: usize,
    pub train_per_topic: usize,
    pub test_per_topic: usize,
    pub noise: f64,
    pub seed: u64,
}

impl DataSection {
    pub fn to_core(&self) -> ToyGenConfig {
        ToyGenConfig {
            k_topics: self.k_topics,
            latent_dim: self.latent_dim,
            dx: self.dx,
            dy: self.dy,
            train_per_topic: self.train_per_topic,
            test_per_topic: self.test_per_topic,
            noise: self.noise,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub tau: f64,
}

impl ModelSection {
    pub fn specs(&self, dx: usize, dy: usize) -> (EncoderSpec, EncoderSpec) {
        (EncoderSpec::linear(dx, self.embed_dim), EncoderSpec::linear(dy, self.embed_dim))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertsSection {
    pub count: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub base_seed: u64,
}

impl ExpertsSection {
    pub fn to_core(&self) -> ExpertConfig {
        ExpertConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSection {
    pub pairs: usize,
    pub sim: SimKind,
    pub rank: usize,
    pub alpha: f64,
    pub initial_inner_lr: f64,
    pub loss: LossKind,
    pub beta: f64,
    pub synth_steps: usize,
    pub expert_epochs: usize,
    pub max_start_epoch: usize,
    pub batch_size: usize,
    pub lr_x: f64,
    pub lr_y: f64,
    pub lr_sim: f64,
    pub lr_lr: f64,
    pub momentum: f64,
    pub iterations: usize,
    pub seed: u64,
    #[serde(default)]
    pub fix_image: bool,
    #[serde(default)]
    pub fix_text: bool,
    #[serde(default)]
    pub fix_similarity: bool,
    #[serde(default)]
    pub no_lr_residual: bool,
    #[serde(default)]
    pub no_omega: bool,
    #[serde(default)]
    pub fix_lr: bool,
}

impl DistillSection {
    pub fn to_core(&self) -> (SyntheticInit, DistillConfig) {
        (
            SyntheticInit {
                pairs: self.pairs,
                sim: self.sim,
                rank: self.rank,
                alpha: self.alpha,
                initial_inner_lr: self.initial_inner_lr,
            },
            DistillConfig {
                loss: self.loss,
                beta: self.beta,
                synth_steps: self.synth_steps,
                expert_epochs: self.expert_epochs,
                max_start_epoch: self.max_start_epoch,
                batch_size: self.batch_size,
                lr_x: self.lr_x,
                lr_y: self.lr_y,
                lr_sim: self.lr_sim,
                lr_lr: self.lr_lr,
                momentum: self.momentum,
                iterations: self.iterations,
                seed: self.seed,
                fix_image: self.fix_image,
                fix_text: self.fix_text,
                fix_similarity: self.fix_similarity,
                no_lr_residual: self.no_lr_residual,
                no_omega: self.no_omega,
                fix_lr: self.fix_lr,
            },
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub steps: usize,
    pub batch_size: usize,
    /// Student learning rate; omitted means the artifact's inner lr.
    pub lr: Option<f64>,
    pub momentum: f64,
    pub loss: LossKind,
    pub beta: f64,
    pub ks: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Extra mlp student architectures (hidden widths per entry) for
    /// cross-architecture evaluation.
    #[serde(default)]
    pub mlp_hidden: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoresetSection {
    pub method: String,
    pub pairs: usize,
    pub seed: u64,
    /// Inner lr stored in the emitted identity artifact (the student's
    /// default learning rate when evaluating the selection).
    pub eval_inner_lr: f64,
    #[serde(default)]
    pub probe: Option<ForgettingSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForgettingSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeSection {
    pub dup_pairs: usize,
    pub bins: usize,
    pub spectrum_threshold: f64,
    pub sim: SimKind,
    pub rank: usize,
    pub alpha: f64,
    pub initial_inner_lr: f64,
    pub loss: LossKind,
    pub beta: f64,
    pub synth_steps: usize,
    pub expert_epochs: usize,
    pub max_start_epoch: usize,
    pub batch_size: usize,
    pub lr_x: f64,
    pub lr_y: f64,
    pub lr_sim: f64,
    pub lr_lr: f64,
    pub momentum: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl AnalyzeSection {
    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            loss: self.loss,
            beta: self.beta,
            synth_steps: self.synth_steps,
            expert_epochs: self.expert_epochs,
            max_start_epoch: self.max_start_epoch,
            batch_size: self.batch_size,
            lr_x: self.lr_x,
            lr_y: self.lr_y,
            lr_sim: self.lr_sim,
            lr_lr: self.lr_lr,
            momentum: self.momentum,
            iterations: self.iterations,
            seed: self.seed,
            fix_image: false,
            fix_text: false,
            fix_similarity: false,
            no_lr_residual: false,
            no_omega: false,
            fix_lr: false,
        }
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Write the resolved (post-override) sections used by a command.
pub fn write_snapshot<T: Serialize>(out_dir: &Path, command: &str, resolved: &T) -> Result<(), Error> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let text = toml::to_string_pretty(resolved)
        .map_err(|e| Error::Config(format!("snapshot encode: {e}")))?;
    let path = out_dir.join(format!("resolved_{command}.toml"));
    std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn require<'a, T>(section: &'a Option<T>, name: &str) -> Result<&'a T, Error> {
    section
        .as_ref()
        .ok_or_else(|| Error::Config(format!("config is missing the [{name}] section")))
}
