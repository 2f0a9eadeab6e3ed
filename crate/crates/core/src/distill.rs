//! Bilevel distillation: sample an expert segment, unroll t synthetic
//! training steps inside one differentiable graph, compute the trajectory
//! matching loss, and update the synthetic data, similarity factors, and the
//! learnable inner step size by SGD with momentum.
//!
//! The inner step's parameter gradient is constructed in closed form from
//! the anchor-weight matrices chained through the linear encoder and its row
//! normalization, as explicit forward operations; the engine then
//! differentiates the whole unroll once, keeping everything first-order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::EmbeddingPairDataset;
use crate::error::{Error, Result};
use crate::expert::TrajectoryStore;
use crate::format::fnv1a;
use crate::graph::{Graph, NodeId};
use crate::losses::{build_anchor_weights, LossKind};
use crate::lors::{init_lors, FullSimParams, SimKind, SimParams};
use crate::model::{build_similarity_logits, EncoderKind, EncoderSpec, ModelParams};
use crate::tensor::Tensor;
use crate::train::{batch_plan, derive_seed};

/// Floor applied to the learnable inner step size after each outer update.
pub const INNER_LR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub init_indices: Vec<usize>,
    pub config_digest: u64,
    pub spec_v: EncoderSpec,
    pub spec_t: EncoderSpec,
    pub tau: f64,
}

/// The distillation output artifact: learnable pairs, similarity
/// parameterization, and the learned inner step size.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub x: Tensor,
    pub y: Tensor,
    pub sim: SimParams,
    pub inner_lr: f64,
    pub provenance: Provenance,
}

impl SyntheticDataset {
    pub fn pairs(&self) -> usize {
        self.x.rows()
    }

    pub fn compose_similarity(&self) -> Result<Tensor> {
        self.sim.compose_all(self.pairs())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticInit {
    pub pairs: usize,
    pub sim: SimKind,
    pub rank: usize,
    pub alpha: f64,
    pub initial_inner_lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub loss: LossKind,
    pub beta: f64,
    /// Inner steps t unrolled per iteration.
    pub synth_steps: usize,
    /// Expert epochs E between the matched endpoints.
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
    /// Drop the low-rank residual: similarity is diag(omega) only.
    #[serde(default)]
    pub no_lr_residual: bool,
    /// Fix the diagonal at its all-ones initialization.
    #[serde(default)]
    pub no_omega: bool,
    #[serde(default)]
    pub fix_lr: bool,
}

impl DistillConfig {
    pub fn validate(&self, store: &TrajectoryStore, pairs: usize) -> Result<()> {
        if self.synth_steps == 0 {
            return Err(Error::Config("synth_steps must be >= 1".into()));
        }
        if self.expert_epochs == 0 {
            return Err(Error::Config("expert_epochs must be >= 1".into()));
        }
        if self.max_start_epoch + self.expert_epochs > store.epochs() {
            return Err(Error::Config(format!(
                "max_start_epoch {} + expert_epochs {} exceeds expert epochs {}",
                self.max_start_epoch,
                self.expert_epochs,
                store.epochs()
            )));
        }
        if self.batch_size == 0 || self.batch_size > pairs {
            return Err(Error::Config(format!(
                "batch_size {} out of range for {pairs} pairs",
                self.batch_size
            )));
        }
        for (name, v) in [
            ("lr_x", self.lr_x),
            ("lr_y", self.lr_y),
            ("lr_sim", self.lr_sim),
            ("lr_lr", self.lr_lr),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn digest(&self, init: &SyntheticInit) -> u64 {
        let blob = serde_json::to_vec(&(self, init)).expect("config serializes");
        fnv1a(&blob)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub iteration: usize,
    pub loss: f64,
    pub start_epoch: usize,
    pub expert_id: usize,
    pub inner_lr: f64,
}

/// Per-step learning rate and anchor-weight matrices captured from one
/// unroll, for training-dynamics diagnostics.
#[derive(Debug, Clone)]
pub struct DynamicsScratch {
    pub gamma: f64,
    pub anchor_weights: Vec<Tensor>,
}

/// Initialize the synthetic dataset from distinct uniformly sampled real
/// pairs; the similarity starts as the exact identity for every kind.
pub fn init_synthetic(
    real: &EmbeddingPairDataset,
    init: &SyntheticInit,
    spec_v: &EncoderSpec,
    spec_t: &EncoderSpec,
    tau: f64,
    config_digest: u64,
    seed: u64,
) -> Result<SyntheticDataset> {
    if init.pairs < 2 || init.pairs > real.len() {
        return Err(Error::InvalidArgument(format!(
            "pairs must satisfy 2 <= N <= M, got N={} M={}",
            init.pairs,
            real.len()
        )));
    }
    if init.initial_inner_lr <= 0.0 {
        return Err(Error::InvalidArgument("initial inner lr must be > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "synth-init"));
    let indices = rand::seq::index::sample(&mut rng, real.len(), init.pairs).into_vec();
    let sim = match init.sim {
        SimKind::Identity => SimParams::Identity,
        SimKind::Lors => {
            SimParams::Lors(init_lors(init.pairs, init.rank, init.alpha, derive_seed(seed, "lors-init"))?)
        }
        SimKind::Full => SimParams::Full(FullSimParams { s: Tensor::eye(init.pairs) }),
    };
    Ok(SyntheticDataset {
        x: real.x.gather_rows(&indices),
        y: real.y.gather_rows(&indices),
        sim,
        inner_lr: init.initial_inner_lr,
        provenance: Provenance {
            init_indices: indices,
            config_digest,
            spec_v: spec_v.clone(),
            spec_t: spec_t.clone(),
            tau,
        },
    })
}

/// Squared-distance ratio ||theta - theta_target||^2 / ||theta_start -
/// theta_target||^2; exactly 0 at the target and exactly 1 at the start.
pub fn matching_loss(theta: &[f64], theta_target: &[f64], theta_start: &[f64]) -> Result<f64> {
    if theta.len() != theta_target.len() || theta.len() != theta_start.len() {
        return Err(Error::shape(
            "matching_loss",
            format!("lengths {} / {} / {}", theta.len(), theta_target.len(), theta_start.len()),
        ));
    }
    let num: f64 = theta.iter().zip(theta_target).map(|(a, b)| (a - b) * (a - b)).sum();
    let den: f64 = theta_start.iter().zip(theta_target).map(|(a, b)| (a - b) * (a - b)).sum();
    if den == 0.0 {
        return Err(Error::Numeric("degenerate expert segment: theta_start equals theta_target".into()));
    }
    Ok(num / den)
}

// ── unroll graph construction ────────────────────────────────────────

struct BuiltUnroll {
    graph: Graph,
    x: NodeId,
    y: NodeId,
    gamma: NodeId,
    omega_in: Option<NodeId>,
    l_in: Option<NodeId>,
    r_in: Option<NodeId>,
    s_full_in: Option<NodeId>,
    theta_v: NodeId,
    theta_t: NodeId,
    anchors: Vec<NodeId>,
}

/// Similarity nodes available inside the unroll; absent when the loss kind
/// ignores the ground truth or the similarity is the frozen identity.
enum SimNodes {
    None,
    Lors { omega: NodeId, low_rank: Option<(NodeId, NodeId)> },
    Full(NodeId),
}

fn require_linear(spec: &EncoderSpec, side: &str) -> Result<()> {
    if spec.kind != EncoderKind::Linear {
        return Err(Error::InvalidArgument(format!(
            "distillation-time {side} encoder must be linear"
        )));
    }
    Ok(())
}

/// Closed-form gradient of the batch loss w.r.t. pre-normalization rows:
/// grad_z = (grad_u - (grad_u . u) u) / max(||z||, guard), per row.
fn chain_through_normalize(g: &mut Graph, z: NodeId, u: NodeId, grad_u: NodeId) -> NodeId {
    let zz = g.mul(z, z);
    let norm_sq = g.row_sum(zz);
    let norm_sq_c = g.clamp_min(norm_sq, 1e-24);
    let norm = g.pow_scalar(norm_sq_c, 0.5);
    let gu_u = g.mul(grad_u, u);
    let dot = g.row_sum(gu_u);
    let dot_diag = g.diag_embed(dot);
    let proj = g.matmul(dot_diag, u);
    let centered = g.sub(grad_u, proj);
    let inv_norm = g.pow_scalar(norm, -1.0);
    let inv_diag = g.diag_embed(inv_norm);
    g.matmul(inv_diag, centered)
}

#[allow(clippy::too_many_arguments)]
fn build_unroll_graph(
    synthetic: &SyntheticDataset,
    theta_start_v: &Tensor,
    theta_start_t: &Tensor,
    plan: &[Vec<usize>],
    kind: LossKind,
    beta: f64,
    learn_sim: bool,
    no_omega: bool,
    no_lr_residual: bool,
) -> Result<BuiltUnroll> {
    let prov = &synthetic.provenance;
    require_linear(&prov.spec_v, "image")?;
    require_linear(&prov.spec_t, "text")?;
    let n = synthetic.pairs();
    let (dx, dy) = (synthetic.x.cols(), synthetic.y.cols());
    let tau = prov.tau;

    let mut g = Graph::new();
    let x = g.input("x", vec![n, dx]);
    let y = g.input("y", vec![n, dy]);
    let gamma = g.input("gamma", vec![]);

    // Similarity parameters enter as inputs when learnable, otherwise as
    // constants holding the current values; either way the composed batch
    // sub-matrices are numerically identical.
    let (mut omega_in, mut l_in, mut r_in, mut s_full_in) = (None, None, None, None);
    let sim_nodes = if kind == LossKind::Nce {
        SimNodes::None
    } else {
        match &synthetic.sim {
            SimParams::Identity => SimNodes::None,
            SimParams::Lors(p) => {
                let omega = if no_omega {
                    g.constant(Tensor::filled(n, 1, 1.0))
                } else if learn_sim {
                    let id = g.input("omega", vec![n, 1]);
                    omega_in = Some(id);
                    id
                } else {
                    g.constant(p.omega.clone())
                };
                let low_rank = if no_lr_residual {
                    None
                } else if learn_sim {
                    let l = g.input("l", vec![n, p.rank]);
                    let r = g.input("r", vec![n, p.rank]);
                    l_in = Some(l);
                    r_in = Some(r);
                    Some((l, r))
                } else {
                    Some((g.constant(p.l.clone()), g.constant(p.r.clone())))
                };
                SimNodes::Lors { omega, low_rank }
            }
            SimParams::Full(p) => {
                let s = if learn_sim {
                    let id = g.input("s_full", vec![n, n]);
                    s_full_in = Some(id);
                    id
                } else {
                    g.constant(p.s.clone())
                };
                SimNodes::Full(s)
            }
        }
    };

    let (alpha, rank) = match &synthetic.sim {
        SimParams::Lors(p) => (p.alpha, p.rank),
        _ => (1.0, 1),
    };

    let mut theta_v = g.constant(theta_start_v.clone());
    let mut theta_t = g.constant(theta_start_t.clone());
    let mut anchors = Vec::with_capacity(plan.len());

    for batch in plan {
        let m = batch.len();
        let x_b = g.gather_rows(x, batch.clone());
        let y_b = g.gather_rows(y, batch.clone());
        let z_u = g.matmul(x_b, theta_v);
        let u = g.row_l2_normalize(z_u);
        let z_v = g.matmul(y_b, theta_t);
        let v = g.row_l2_normalize(z_v);
        let logits = build_similarity_logits(&mut g, u, v, tau);

        let s_b = match &sim_nodes {
            SimNodes::None => g.constant(Tensor::eye(m)),
            SimNodes::Full(s_full) => {
                let rows = g.gather_rows(*s_full, batch.clone());
                g.gather_cols(rows, batch.clone())
            }
            SimNodes::Lors { omega, low_rank } => {
                let omega_b = g.gather_rows(*omega, batch.clone());
                let diag = g.diag_embed(omega_b);
                match low_rank {
                    None => diag,
                    Some((l, r)) => {
                        let l_b = g.gather_rows(*l, batch.clone());
                        let r_b = g.gather_rows(*r, batch.clone());
                        let r_b_t = g.transpose(r_b);
                        let prod = g.matmul(l_b, r_b_t);
                        let resid = g.mul_scalar(prod, alpha / rank as f64);
                        g.add(diag, resid)
                    }
                }
            }
        };

        let w = build_anchor_weights(&mut g, kind, logits, s_b, m, tau, beta);
        anchors.push(w);
        let grad_u = g.matmul(w, v);
        let w_t = g.transpose(w);
        let grad_v = g.matmul(w_t, u);
        let grad_zu = chain_through_normalize(&mut g, z_u, u, grad_u);
        let grad_zv = chain_through_normalize(&mut g, z_v, v, grad_v);
        let x_b_t = g.transpose(x_b);
        let grad_wv = g.matmul(x_b_t, grad_zu);
        let y_b_t = g.transpose(y_b);
        let grad_wt = g.matmul(y_b_t, grad_zv);
        let step_v = g.scalar_mul(gamma, grad_wv);
        theta_v = g.sub(theta_v, step_v);
        let step_t = g.scalar_mul(gamma, grad_wt);
        theta_t = g.sub(theta_t, step_t);
    }

    Ok(BuiltUnroll { graph: g, x, y, gamma, omega_in, l_in, r_in, s_full_in, theta_v, theta_t, anchors })
}

fn bind_and_forward(built: &mut BuiltUnroll, synthetic: &SyntheticDataset) -> Result<()> {
    let gamma = Tensor::scalar(synthetic.inner_lr);
    let mut bindings: Vec<(&str, &Tensor)> =
        vec![("x", &synthetic.x), ("y", &synthetic.y), ("gamma", &gamma)];
    let (omega, l, r, s_full) = match &synthetic.sim {
        SimParams::Lors(p) => (Some(&p.omega), Some(&p.l), Some(&p.r), None),
        SimParams::Full(p) => (None, None, None, Some(&p.s)),
        SimParams::Identity => (None, None, None, None),
    };
    if built.omega_in.is_some() {
        bindings.push(("omega", omega.expect("lors sim")));
    }
    if built.l_in.is_some() {
        bindings.push(("l", l.expect("lors sim")));
        bindings.push(("r", r.expect("lors sim")));
    }
    if built.s_full_in.is_some() {
        bindings.push(("s_full", s_full.expect("full sim")));
    }
    built.graph.forward(&bindings)
}

fn split_theta(
    spec_v: &EncoderSpec,
    spec_t: &EncoderSpec,
    tau: f64,
    flat: &[f64],
) -> Result<(Tensor, Tensor)> {
    let params = ModelParams::unflatten(spec_v, spec_t, tau, flat)?;
    Ok((params.layers_v[0].clone(), params.layers_t[0].clone()))
}

fn flatten_theta(v: &Tensor, t: &Tensor) -> Vec<f64> {
    let mut out = Vec::with_capacity(v.numel() + t.numel());
    out.extend_from_slice(v.data());
    out.extend_from_slice(t.data());
    out
}

/// Unroll t inner steps from a flattened start parameter and return the
/// reached flattened parameter. Forward-only; the step gradients inside the
/// unroll use the closed-form construction.
pub fn inner_unroll(
    synthetic: &SyntheticDataset,
    theta_start: &[f64],
    t: usize,
    m: usize,
    kind: LossKind,
    beta: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if t == 0 {
        return Ok(theta_start.to_vec());
    }
    let (theta_v, theta_t) = split_theta(
        &synthetic.provenance.spec_v,
        &synthetic.provenance.spec_t,
        synthetic.provenance.tau,
        theta_start,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = batch_plan(&mut rng, synthetic.pairs(), m, t);
    let mut built =
        build_unroll_graph(synthetic, &theta_v, &theta_t, &plan, kind, beta, false, false, false)?;
    bind_and_forward(&mut built, synthetic)?;
    let out_v = built.graph.value(built.theta_v);
    let out_t = built.graph.value(built.theta_t);
    check_finite_theta(out_v, out_t, "inner unroll")?;
    Ok(flatten_theta(out_v, out_t))
}

/// Like [`inner_unroll`] but also captures the per-step anchor-weight
/// matrices for dynamics diagnostics.
pub fn unroll_dynamics(
    synthetic: &SyntheticDataset,
    theta_start: &[f64],
    t: usize,
    m: usize,
    kind: LossKind,
    beta: f64,
    seed: u64,
) -> Result<(Vec<f64>, DynamicsScratch)> {
    let (theta_v, theta_t) = split_theta(
        &synthetic.provenance.spec_v,
        &synthetic.provenance.spec_t,
        synthetic.provenance.tau,
        theta_start,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = batch_plan(&mut rng, synthetic.pairs(), m, t);
    let mut built =
        build_unroll_graph(synthetic, &theta_v, &theta_t, &plan, kind, beta, false, false, false)?;
    bind_and_forward(&mut built, synthetic)?;
    let anchors = built.anchors.iter().map(|&id| built.graph.value(id).clone()).collect();
    let flat = flatten_theta(built.graph.value(built.theta_v), built.graph.value(built.theta_t));
    Ok((flat, DynamicsScratch { gamma: synthetic.inner_lr, anchor_weights: anchors }))
}

fn check_finite_theta(v: &Tensor, t: &Tensor, context: &str) -> Result<()> {
    if !v.all_finite() || !t.all_finite() {
        return Err(Error::Numeric(format!("non-finite parameters after {context}")));
    }
    Ok(())
}

/// Gradients of one matching step w.r.t. the requested parameter groups.
#[derive(Debug, Clone)]
pub struct StepGradients {
    pub loss: f64,
    pub x: Option<Tensor>,
    pub y: Option<Tensor>,
    pub omega: Option<Tensor>,
    pub l: Option<Tensor>,
    pub r: Option<Tensor>,
    pub s_full: Option<Tensor>,
    pub gamma: Option<f64>,
}

/// One explicit matching step: unroll along `plan`, compare against the
/// target parameters, and return the matching loss with gradients for the
/// requested groups. `distill_step` drives this with sampled plans; tests
/// drive it with fixed plans for finite-difference checks.
#[allow(clippy::too_many_arguments)]
pub fn step_gradients(
    synthetic: &SyntheticDataset,
    theta_start: &[f64],
    theta_target: &[f64],
    plan: &[Vec<usize>],
    kind: LossKind,
    beta: f64,
    want_x: bool,
    want_y: bool,
    want_sim: bool,
    want_gamma: bool,
    no_omega: bool,
    no_lr_residual: bool,
) -> Result<StepGradients> {
    let prov = &synthetic.provenance;
    let (start_v, start_t) = split_theta(&prov.spec_v, &prov.spec_t, prov.tau, theta_start)?;
    let (target_v, target_t) = split_theta(&prov.spec_v, &prov.spec_t, prov.tau, theta_target)?;
    let denom: f64 = theta_start
        .iter()
        .zip(theta_target)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    if denom == 0.0 {
        return Err(Error::Numeric("degenerate expert segment".into()));
    }

    let learn_sim = want_sim && kind != LossKind::Nce && synthetic.sim.kind() != SimKind::Identity;
    let mut built = build_unroll_graph(
        synthetic,
        &start_v,
        &start_t,
        plan,
        kind,
        beta,
        learn_sim,
        no_omega,
        no_lr_residual,
    )?;
    let g = &mut built.graph;
    let tv = g.constant(target_v);
    let tt = g.constant(target_t);
    let dv = g.sub(built.theta_v, tv);
    let dv2 = g.mul(dv, dv);
    let sum_v = g.sum_all(dv2);
    let dt = g.sub(built.theta_t, tt);
    let dt2 = g.mul(dt, dt);
    let sum_t = g.sum_all(dt2);
    let num = g.add(sum_v, sum_t);
    let loss_node = g.mul_scalar(num, 1.0 / denom);

    bind_and_forward(&mut built, synthetic)?;
    let loss = built.graph.value(loss_node).scalar_value();
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite matching loss {loss}")));
    }

    let mut targets: Vec<NodeId> = Vec::new();
    let mut slots: Vec<&str> = Vec::new();
    if want_x {
        targets.push(built.x);
        slots.push("x");
    }
    if want_y {
        targets.push(built.y);
        slots.push("y");
    }
    if learn_sim {
        if let Some(id) = built.omega_in {
            targets.push(id);
            slots.push("omega");
        }
        if let Some(id) = built.l_in {
            targets.push(id);
            slots.push("l");
        }
        if let Some(id) = built.r_in {
            targets.push(id);
            slots.push("r");
        }
        if let Some(id) = built.s_full_in {
            targets.push(id);
            slots.push("s_full");
        }
    }
    if want_gamma {
        targets.push(built.gamma);
        slots.push("gamma");
    }

    let mut out = StepGradients {
        loss,
        x: None,
        y: None,
        omega: None,
        l: None,
        r: None,
        s_full: None,
        gamma: None,
    };
    if !targets.is_empty() {
        let grads = built.graph.gradients(loss_node, &targets)?;
        for (slot, grad) in slots.into_iter().zip(grads) {
            match slot {
                "x" => out.x = Some(grad),
                "y" => out.y = Some(grad),
                "omega" => out.omega = Some(grad),
                "l" => out.l = Some(grad),
                "r" => out.r = Some(grad),
                "s_full" => out.s_full = Some(grad),
                "gamma" => out.gamma = Some(grad.scalar_value()),
                _ => unreachable!(),
            }
        }
    }
    Ok(out)
}

// ── outer optimization ───────────────────────────────────────────────

#[derive(Debug)]
pub struct DistillState {
    pub synthetic: SyntheticDataset,
    vel_x: Tensor,
    vel_y: Tensor,
    vel_omega: Option<Tensor>,
    vel_l: Option<Tensor>,
    vel_r: Option<Tensor>,
    vel_full: Option<Tensor>,
    vel_lr: f64,
    rng: ChaCha8Rng,
}

impl DistillState {
    pub fn new(synthetic: SyntheticDataset, seed: u64) -> Self {
        let (n, dx, dy) = (synthetic.pairs(), synthetic.x.cols(), synthetic.y.cols());
        let (vel_omega, vel_l, vel_r, vel_full) = match &synthetic.sim {
            SimParams::Lors(p) => (
                Some(Tensor::zeros(n, 1)),
                Some(Tensor::zeros(n, p.rank)),
                Some(Tensor::zeros(n, p.rank)),
                None,
            ),
            SimParams::Full(_) => (None, None, None, Some(Tensor::zeros(n, n))),
            SimParams::Identity => (None, None, None, None),
        };
        DistillState {
            synthetic,
            vel_x: Tensor::zeros(n, dx),
            vel_y: Tensor::zeros(n, dy),
            vel_omega,
            vel_l,
            vel_r,
            vel_full,
            vel_lr: 0.0,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, "distill-loop")),
        }
    }
}

fn sgd_update(param: &mut Tensor, vel: &mut Tensor, grad: &Tensor, lr: f64, momentum: f64) {
    *vel = vel.scale(momentum).add(grad);
    *param = param.add_scaled(vel, -lr);
}

const SEGMENT_RESAMPLE_LIMIT: usize = 32;

/// One outer iteration: sample an expert segment and batch plan, compute
/// matching gradients, and apply momentum updates to every unfrozen group.
pub fn distill_step(
    state: &mut DistillState,
    store: &TrajectoryStore,
    cfg: &DistillConfig,
    iteration: usize,
) -> Result<MatchRecord> {
    let n = state.synthetic.pairs();

    // Sample a non-degenerate expert segment, consuming the rng
    // deterministically on retries.
    let mut chosen = None;
    for _ in 0..SEGMENT_RESAMPLE_LIMIT {
        let expert = state.rng.gen_range(0..store.len());
        let start_epoch = state.rng.gen_range(0..=cfg.max_start_epoch);
        let buffer = &store.buffers[expert];
        let theta_start = &buffer.snapshots[start_epoch];
        let theta_target = &buffer.snapshots[start_epoch + cfg.expert_epochs];
        let denom: f64 = theta_start
            .iter()
            .zip(theta_target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if denom > 0.0 {
            chosen = Some((expert, start_epoch));
            break;
        }
    }
    let (expert, start_epoch) = chosen.ok_or_else(|| {
        Error::Numeric(format!(
            "iteration {iteration}: no non-degenerate expert segment after {SEGMENT_RESAMPLE_LIMIT} resamples"
        ))
    })?;
    let buffer = &store.buffers[expert];
    let theta_start = buffer.snapshots[start_epoch].clone();
    let theta_target = buffer.snapshots[start_epoch + cfg.expert_epochs].clone();

    let plan = batch_plan(&mut state.rng, n, cfg.batch_size, cfg.synth_steps);
    let grads = step_gradients(
        &state.synthetic,
        &theta_start,
        &theta_target,
        &plan,
        cfg.loss,
        cfg.beta,
        !cfg.fix_image,
        !cfg.fix_text,
        !cfg.fix_similarity,
        !cfg.fix_lr,
        cfg.no_omega,
        cfg.no_lr_residual,
    )
    .map_err(|e| match e {
        Error::Numeric(msg) => Error::Numeric(format!("iteration {iteration}: {msg}")),
        other => other,
    })?;

    if let Some(gx) = &grads.x {
        sgd_update(&mut state.synthetic.x, &mut state.vel_x, gx, cfg.lr_x, cfg.momentum);
    }
    if let Some(gy) = &grads.y {
        sgd_update(&mut state.synthetic.y, &mut state.vel_y, gy, cfg.lr_y, cfg.momentum);
    }
    match &mut state.synthetic.sim {
        SimParams::Lors(p) => {
            if let Some(go) = &grads.omega {
                sgd_update(&mut p.omega, state.vel_omega.as_mut().expect("lors vel"), go, cfg.lr_sim, cfg.momentum);
            }
            if let Some(gl) = &grads.l {
                sgd_update(&mut p.l, state.vel_l.as_mut().expect("lors vel"), gl, cfg.lr_sim, cfg.momentum);
            }
            if let Some(gr) = &grads.r {
                sgd_update(&mut p.r, state.vel_r.as_mut().expect("lors vel"), gr, cfg.lr_sim, cfg.momentum);
            }
        }
        SimParams::Full(p) => {
            if let Some(gs) = &grads.s_full {
                sgd_update(&mut p.s, state.vel_full.as_mut().expect("full vel"), gs, cfg.lr_sim, cfg.momentum);
            }
        }
        SimParams::Identity => {}
    }
    if let Some(gg) = grads.gamma {
        state.vel_lr = cfg.momentum * state.vel_lr + gg;
        state.synthetic.inner_lr =
            (state.synthetic.inner_lr - cfg.lr_lr * state.vel_lr).max(INNER_LR_FLOOR);
    }

    if !state.synthetic.x.all_finite() || !state.synthetic.y.all_finite() {
        return Err(Error::Numeric(format!(
            "iteration {iteration}: synthetic data diverged to non-finite values"
        )));
    }

    Ok(MatchRecord {
        iteration,
        loss: grads.loss,
        start_epoch,
        expert_id: expert,
        inner_lr: state.synthetic.inner_lr,
    })
}

/// Run the full outer loop from an already-initialized synthetic dataset.
pub fn run_distillation_from(
    init: SyntheticDataset,
    store: &TrajectoryStore,
    cfg: &DistillConfig,
) -> Result<(SyntheticDataset, Vec<MatchRecord>)> {
    cfg.validate(store, init.pairs())?;
    let mut state = DistillState::new(init, cfg.seed);
    let mut records = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        records.push(distill_step(&mut state, store, cfg, iteration)?);
    }
    Ok((state.synthetic, records))
}

/// Initialize from real data and run the outer loop.
pub fn run_distillation(
    real: &EmbeddingPairDataset,
    store: &TrajectoryStore,
    init: &SyntheticInit,
    cfg: &DistillConfig,
) -> Result<(SyntheticDataset, Vec<MatchRecord>)> {
    let synthetic = init_synthetic(
        real,
        init,
        store.spec_v(),
        store.spec_t(),
        store.tau(),
        cfg.digest(init),
        cfg.seed,
    )?;
    run_distillation_from(synthetic, store, cfg)
}
