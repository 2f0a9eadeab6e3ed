//! Shared SGD machinery for training ITC models on real or synthetic data.
//!
//! One trainer drives both the expert phase (real data, InfoNCE, identity
//! similarity) and student training on a synthetic artifact (any loss kind,
//! composed similarity sub-matrix per batch); only the parameterization
//! differs. Gradients come from a reverse-mode sweep over a per-batch-size
//! cached graph.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::format::fnv1a;
use crate::graph::{Graph, NodeId};
use crate::losses::{build_loss, LossKind};
use crate::model::{build_encode, build_similarity_logits, EncoderSpec, ModelParams};
use crate::tensor::Tensor;

/// Derive a sub-stream seed from a run seed and a purpose tag.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    fnv1a(tag.as_bytes()) ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

#[derive(Debug, Clone, Copy)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
}

/// Where batch ground-truth similarity comes from.
pub enum SimSource<'a> {
    Identity,
    /// Full composed N x N matrix; batches index both axes.
    Matrix(&'a Tensor),
}

impl SimSource<'_> {
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        match self {
            SimSource::Identity => Tensor::eye(indices.len()),
            SimSource::Matrix(s) => s.gather_rows(indices).gather_cols(indices),
        }
    }
}

struct TrainGraph {
    graph: Graph,
    loss: NodeId,
    logits: NodeId,
    weight_nodes: Vec<NodeId>,
}

pub struct StepInfo {
    pub loss: f64,
    pub logits: Tensor,
}

pub struct ItcTrainer {
    pub params: ModelParams,
    spec_v: EncoderSpec,
    spec_t: EncoderSpec,
    kind: LossKind,
    beta: f64,
    sgd: SgdConfig,
    velocity: Vec<Tensor>,
    graphs: HashMap<usize, TrainGraph>,
    steps_done: usize,
}

impl ItcTrainer {
    pub fn new(
        params: ModelParams,
        spec_v: EncoderSpec,
        spec_t: EncoderSpec,
        kind: LossKind,
        beta: f64,
        sgd: SgdConfig,
    ) -> Self {
        let velocity = params
            .layers_v
            .iter()
            .chain(params.layers_t.iter())
            .map(|w| Tensor::zeros(w.rows(), w.cols()))
            .collect();
        ItcTrainer {
            params,
            spec_v,
            spec_t,
            kind,
            beta,
            sgd,
            velocity,
            graphs: HashMap::new(),
            steps_done: 0,
        }
    }

    fn build_graph(&self, m: usize) -> TrainGraph {
        let mut g = Graph::new();
        let x = g.input("x", vec![m, self.spec_v.input_dim]);
        let y = g.input("y", vec![m, self.spec_t.input_dim]);
        let s = g.input("s", vec![m, m]);
        let mut weight_nodes = Vec::new();
        for (i, (rows, cols)) in self.spec_v.layer_shapes().into_iter().enumerate() {
            weight_nodes.push(g.input(&format!("wv{i}"), vec![rows, cols]));
        }
        let n_v = weight_nodes.len();
        for (i, (rows, cols)) in self.spec_t.layer_shapes().into_iter().enumerate() {
            weight_nodes.push(g.input(&format!("wt{i}"), vec![rows, cols]));
        }
        let u = build_encode(&mut g, x, &weight_nodes[..n_v]);
        let v = build_encode(&mut g, y, &weight_nodes[n_v..]);
        let logits = build_similarity_logits(&mut g, u, v, self.params.tau);
        let loss = build_loss(&mut g, self.kind, logits, s, m, self.beta);
        TrainGraph { graph: g, loss, logits, weight_nodes }
    }

    /// One SGD step on a bound batch. Returns the loss and the logits for
    /// observers. Aborts on a non-finite loss.
    pub fn step(&mut self, x_b: &Tensor, y_b: &Tensor, s_b: &Tensor) -> Result<StepInfo> {
        let m = x_b.rows();
        if !self.graphs.contains_key(&m) {
            let built = self.build_graph(m);
            self.graphs.insert(m, built);
        }
        let tg = self.graphs.get_mut(&m).expect("graph just inserted");

        let mut bindings: Vec<(String, Tensor)> = vec![
            ("x".to_string(), x_b.clone()),
            ("y".to_string(), y_b.clone()),
            ("s".to_string(), s_b.clone()),
        ];
        for (i, w) in self.params.layers_v.iter().enumerate() {
            bindings.push((format!("wv{i}"), w.clone()));
        }
        for (i, w) in self.params.layers_t.iter().enumerate() {
            bindings.push((format!("wt{i}"), w.clone()));
        }
        let borrowed: Vec<(&str, &Tensor)> =
            bindings.iter().map(|(n, t)| (n.as_str(), t)).collect();
        tg.graph.forward(&borrowed)?;

        let loss = tg.graph.value(tg.loss).scalar_value();
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite training loss {loss} at step {}",
                self.steps_done
            )));
        }
        let logits = tg.graph.value(tg.logits).clone();
        let grads = tg.graph.gradients(tg.loss, &tg.weight_nodes)?;

        let n_v = self.params.layers_v.len();
        for (slot, grad) in grads.into_iter().enumerate() {
            self.velocity[slot] = self.velocity[slot].scale(self.sgd.momentum).add(&grad);
            let target = if slot < n_v {
                &mut self.params.layers_v[slot]
            } else {
                &mut self.params.layers_t[slot - n_v]
            };
            *target = target.add_scaled(&self.velocity[slot], -self.sgd.lr);
        }
        self.steps_done += 1;
        Ok(StepInfo { loss, logits })
    }
}

/// Full-size batches from repeated seeded shuffles; a pass's tail shorter
/// than the batch size is dropped and triggers a reshuffle.
pub fn batch_plan(rng: &mut impl Rng, n: usize, m: usize, count: usize) -> Vec<Vec<usize>> {
    assert!(m >= 1 && m <= n, "batch size {m} out of range for {n} items");
    let mut plan = Vec::with_capacity(count);
    let mut order: Vec<usize> = (0..n).collect();
    let mut pos = n; // force an initial shuffle
    for _ in 0..count {
        if pos + m > n {
            order.shuffle(rng);
            pos = 0;
        }
        plan.push(order[pos..pos + m].to_vec());
        pos += m;
    }
    plan
}

/// One epoch's batches over a seeded shuffle, keeping the partial tail so
/// every example appears exactly once per epoch.
pub fn epoch_chunks(rng: &mut impl Rng, n: usize, m: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(m.max(1)).map(|c| c.to_vec()).collect()
}
