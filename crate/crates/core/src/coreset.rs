//! Coreset selection baselines at equal pair budget: random, k-center
//! greedy, herding, and a forgetting criterion adapted from classification
//! accuracy to in-batch retrieval.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::EmbeddingPairDataset;
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::model::{init_params, EncoderSpec};
use crate::tensor::Tensor;
use crate::train::{derive_seed, epoch_chunks, ItcTrainer, SgdConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub method: String,
    pub indices: Vec<usize>,
    pub config: serde_json::Value,
}

fn check_budget(ds: &EmbeddingPairDataset, n: usize) -> Result<()> {
    if n == 0 || n > ds.len() {
        return Err(Error::InvalidArgument(format!(
            "selection size {n} out of range for {} samples",
            ds.len()
        )));
    }
    Ok(())
}

/// Uniform sample without replacement.
pub fn select_random(ds: &EmbeddingPairDataset, n: usize, seed: u64) -> Result<SelectionResult> {
    check_budget(ds, n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = rand::seq::index::sample(&mut rng, ds.len(), n).into_vec();
    indices.sort_unstable();
    Ok(SelectionResult {
        method: "random".into(),
        indices,
        config: serde_json::json!({ "seed": seed }),
    })
}

/// Concatenated per-modality-normalized feature rows used by k-center.
fn normalized_concat_features(ds: &EmbeddingPairDataset) -> Vec<Vec<f64>> {
    let xn = ds.x.row_l2_normalize();
    let yn = ds.y.row_l2_normalize();
    (0..ds.len())
        .map(|i| {
            let mut f = xn.row(i).to_vec();
            f.extend_from_slice(yn.row(i));
            f
        })
        .collect()
}

fn raw_concat_features(ds: &EmbeddingPairDataset) -> Vec<Vec<f64>> {
    (0..ds.len())
        .map(|i| {
            let mut f = ds.x.row(i).to_vec();
            f.extend_from_slice(ds.y.row(i));
            f
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Greedy farthest-point selection on concatenated normalized features, with
/// a seeded first center and lower-index tie breaking.
pub fn select_kcenter(ds: &EmbeddingPairDataset, n: usize, seed: u64) -> Result<SelectionResult> {
    check_budget(ds, n)?;
    let features = normalized_concat_features(ds);
    let m = ds.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.gen_range(0..m);
    let mut selected = vec![first];
    let mut min_dist: Vec<f64> = features.iter().map(|f| sq_dist(f, &features[first])).collect();
    while selected.len() < n {
        let mut best = None;
        let mut best_dist = f64::NEG_INFINITY;
        for (i, &d) in min_dist.iter().enumerate() {
            if selected.contains(&i) {
                continue;
            }
            if d > best_dist {
                best_dist = d;
                best = Some(i);
            }
        }
        let next = best.expect("n <= m leaves candidates");
        selected.push(next);
        for (i, f) in features.iter().enumerate() {
            let d = sq_dist(f, &features[next]);
            if d < min_dist[i] {
                min_dist[i] = d;
            }
        }
    }
    selected.sort_unstable();
    Ok(SelectionResult {
        method: "kcenter".into(),
        indices: selected,
        config: serde_json::json!({ "seed": seed }),
    })
}

/// Greedy herding: repeatedly add the candidate minimizing the gap between
/// the full-data mean and the selected mean, on raw concatenated features.
/// Deterministic; ties go to the lower index.
pub fn select_herding(ds: &EmbeddingPairDataset, n: usize) -> Result<SelectionResult> {
    check_budget(ds, n)?;
    let features = raw_concat_features(ds);
    let m = ds.len();
    let dim = features[0].len();
    let mut target = vec![0.0; dim];
    for f in &features {
        for (t, &v) in target.iter_mut().zip(f) {
            *t += v;
        }
    }
    for t in target.iter_mut() {
        *t /= m as f64;
    }

    let mut selected: Vec<usize> = Vec::with_capacity(n);
    let mut picked = vec![false; m];
    let mut running_sum = vec![0.0; dim];
    for round in 0..n {
        let count = (round + 1) as f64;
        let mut best = None;
        let mut best_gap = f64::INFINITY;
        for (i, f) in features.iter().enumerate() {
            if picked[i] {
                continue;
            }
            let mut gap = 0.0;
            for ((&s, &fv), &t) in running_sum.iter().zip(f).zip(&target) {
                let mean = (s + fv) / count;
                gap += (mean - t) * (mean - t);
            }
            if gap < best_gap {
                best_gap = gap;
                best = Some(i);
            }
        }
        let next = best.expect("n <= m leaves candidates");
        picked[next] = true;
        selected.push(next);
        for (s, &fv) in running_sum.iter_mut().zip(&features[next]) {
            *s += fv;
        }
    }
    selected.sort_unstable();
    Ok(SelectionResult {
        method: "herding".into(),
        indices: selected,
        config: serde_json::json!({}),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub embed_dim: usize,
    pub tau: f64,
}

/// Forgetting events adapted to retrieval: per epoch, an example is
/// "learned" when its in-batch diagonal is the row argmax over the batch;
/// an event is a learned-to-not-learned transition between consecutive
/// epochs. Selects the N most-forgotten examples (ties to lower index).
pub fn select_forgetting(
    ds: &EmbeddingPairDataset,
    n: usize,
    probe: &ForgettingProbeConfig,
    seed: u64,
) -> Result<SelectionResult> {
    check_budget(ds, n)?;
    let m = ds.len();
    if probe.epochs == 0 {
        // No probe signal; deterministic lower-index fallback.
        return Ok(SelectionResult {
            method: "forgetting".into(),
            indices: (0..n).collect(),
            config: serde_json::json!({
                "seed": seed,
                "probe": probe,
                "warning": "zero probe epochs: fell back to lower-index selection",
            }),
        });
    }
    let spec_v = EncoderSpec::linear(ds.dx(), probe.embed_dim);
    let spec_t = EncoderSpec::linear(ds.dy(), probe.embed_dim);
    let params = init_params(&spec_v, &spec_t, probe.tau, derive_seed(seed, "forget-init"))?;
    let mut trainer = ItcTrainer::new(
        params,
        spec_v,
        spec_t,
        LossKind::Nce,
        crate::losses::DEFAULT_BETA,
        SgdConfig { lr: probe.lr, momentum: probe.momentum },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "forget-shuffle"));
    let mut learned_prev: Vec<bool> = vec![false; m];
    let mut events = vec![0usize; m];
    for epoch in 0..probe.epochs {
        let mut learned_now = vec![false; m];
        for chunk in epoch_chunks(&mut rng, m, probe.batch_size.min(m)) {
            let x_b = ds.x.gather_rows(&chunk);
            let y_b = ds.y.gather_rows(&chunk);
            let s_b = Tensor::eye(chunk.len());
            let info = trainer.step(&x_b, &y_b, &s_b)?;
            for (row, &example) in chunk.iter().enumerate() {
                learned_now[example] = row_argmax(&info.logits, row) == row;
            }
        }
        if epoch > 0 {
            for i in 0..m {
                if learned_prev[i] && !learned_now[i] {
                    events[i] += 1;
                }
            }
        }
        learned_prev = learned_now;
    }
    // Most-forgotten first; ties resolved by lower index.
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| events[b].cmp(&events[a]).then(a.cmp(&b)));
    let mut indices: Vec<usize> = order.into_iter().take(n).collect();
    indices.sort_unstable();
    Ok(SelectionResult {
        method: "forgetting".into(),
        indices,
        config: serde_json::json!({ "seed": seed, "probe": probe }),
    })
}

/// Argmax over a logits row with ties to the lower index.
pub fn row_argmax(logits: &Tensor, row: usize) -> usize {
    let r = logits.row(row);
    let mut best = 0;
    for (j, &v) in r.iter().enumerate() {
        if v > r[best] {
            best = j;
        }
    }
    best
}
