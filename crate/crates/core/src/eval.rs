//! Student training on synthetic data and cross-modal retrieval metrics,
//! with multi-seed aggregation and cross-architecture evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::EmbeddingPairDataset;
use crate::distill::SyntheticDataset;
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::model::{encode_images, encode_texts, init_params, EncoderSpec, ModelParams};
use crate::train::{batch_plan, derive_seed, ItcTrainer, SgdConfig, SimSource};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Student learning rate; defaults to the artifact's learned inner lr.
    pub lr: Option<f64>,
    pub momentum: f64,
    pub loss: LossKind,
    pub beta: f64,
}

/// Train a fresh student on the synthetic dataset with its composed
/// similarity. Deterministic per seed; steps = 0 returns the seeded
/// initialization.
pub fn train_student(
    synthetic: &SyntheticDataset,
    spec_v: &EncoderSpec,
    spec_t: &EncoderSpec,
    cfg: &StudentConfig,
    seed: u64,
) -> Result<ModelParams> {
    let n = synthetic.pairs();
    if spec_v.input_dim != synthetic.x.cols() || spec_t.input_dim != synthetic.y.cols() {
        return Err(Error::shape(
            "train_student",
            format!(
                "encoder input dims ({}, {}) vs synthetic dims ({}, {})",
                spec_v.input_dim,
                spec_t.input_dim,
                synthetic.x.cols(),
                synthetic.y.cols()
            ),
        ));
    }
    let batch = cfg.batch_size.min(n);
    let tau = synthetic.provenance.tau;
    let params = init_params(spec_v, spec_t, tau, derive_seed(seed, "student-init"))?;
    if cfg.steps == 0 {
        return Ok(params);
    }
    let lr = cfg.lr.unwrap_or(synthetic.inner_lr);
    let composed = synthetic.compose_similarity()?;
    let sim = SimSource::Matrix(&composed);
    let mut trainer = ItcTrainer::new(
        params,
        spec_v.clone(),
        spec_t.clone(),
        cfg.loss,
        cfg.beta,
        SgdConfig { lr, momentum: cfg.momentum },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "student-shuffle"));
    for chunk in batch_plan(&mut rng, n, batch, cfg.steps) {
        let x_b = synthetic.x.gather_rows(&chunk);
        let y_b = synthetic.y.gather_rows(&chunk);
        let s_b = sim.batch(&chunk);
        trainer.step(&x_b, &y_b, &s_b)?;
    }
    Ok(trainer.params)
}

/// Single-seed recall values: recalls[i] is the percentage for ks[i].
#[derive(Debug, Clone, PartialEq)]
pub struct SingleRetrieval {
    pub ks: Vec<usize>,
    pub ir: Vec<f64>,
    pub tr: Vec<f64>,
}

/// Top-K recall with ties broken by lower gallery index. IR@K retrieves
/// images from text queries; TR@K retrieves texts from image queries.
pub fn retrieval_metrics(
    params: &ModelParams,
    spec_v: &EncoderSpec,
    spec_t: &EncoderSpec,
    test: &EmbeddingPairDataset,
    ks: &[usize],
) -> Result<SingleRetrieval> {
    let gallery = test.len();
    if ks.iter().any(|&k| k == 0 || k > gallery) {
        return Err(Error::InvalidArgument(format!(
            "retrieval K out of range for gallery size {gallery}"
        )));
    }
    let u = encode_images(params, spec_v, &test.x)?;
    let v = encode_texts(params, spec_t, &test.y)?;
    let sims = u.matmul(&v.transpose());

    // Rank of the true match for each query: 1 + number of strictly better
    // candidates, where equal scores at a lower index also count as better.
    let mut ir_rank = vec![0usize; gallery];
    let mut tr_rank = vec![0usize; gallery];
    for q in 0..gallery {
        // Text query q over image gallery (column q of sims).
        let target = sims.at(q, q);
        let mut better = 0;
        for i in 0..gallery {
            if i == q {
                continue;
            }
            let s = sims.at(i, q);
            if s > target || (s == target && i < q) {
                better += 1;
            }
        }
        ir_rank[q] = better + 1;
        // Image query q over text gallery (row q).
        let mut better = 0;
        for j in 0..gallery {
            if j == q {
                continue;
            }
            let s = sims.at(q, j);
            if s > target || (s == target && j < q) {
                better += 1;
            }
        }
        tr_rank[q] = better + 1;
    }
    let recall = |ranks: &[usize], k: usize| {
        100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / gallery as f64
    };
    Ok(SingleRetrieval {
        ks: ks.to_vec(),
        ir: ks.iter().map(|&k| recall(&ir_rank, k)).collect(),
        tr: ks.iter().map(|&k| recall(&tr_rank, k)).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricStat {
    pub k: usize,
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub arch: String,
    pub seeds: Vec<u64>,
    pub ir: Vec<MetricStat>,
    pub tr: Vec<MetricStat>,
}

pub fn aggregate(k: usize, values: &[f64]) -> MetricStat {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    MetricStat { k, mean, std, per_seed: values.to_vec() }
}

/// Named architecture to evaluate: (label, image spec, text spec).
pub type ArchSpec = (String, EncoderSpec, EncoderSpec);

/// Train one student per (seed, architecture) and aggregate mean and sample
/// std per metric. The synthetic artifact is never mutated.
pub fn evaluate_synthetic(
    synthetic: &SyntheticDataset,
    archs: &[ArchSpec],
    cfg: &StudentConfig,
    test: &EmbeddingPairDataset,
    ks: &[usize],
    seeds: &[u64],
) -> Result<Vec<RetrievalReport>> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("need at least one evaluation seed".into()));
    }
    archs
        .iter()
        .map(|(name, spec_v, spec_t)| {
            let per_seed: Vec<SingleRetrieval> = seeds
                .par_iter()
                .map(|&seed| {
                    let params = train_student(synthetic, spec_v, spec_t, cfg, seed)?;
                    retrieval_metrics(&params, spec_v, spec_t, test, ks)
                })
                .collect::<Result<Vec<_>>>()?;
            let ir = ks
                .iter()
                .enumerate()
                .map(|(i, &k)| aggregate(k, &per_seed.iter().map(|r| r.ir[i]).collect::<Vec<_>>()))
                .collect();
            let tr = ks
                .iter()
                .enumerate()
                .map(|(i, &k)| aggregate(k, &per_seed.iter().map(|r| r.tr[i]).collect::<Vec<_>>()))
                .collect();
            Ok(RetrievalReport { arch: name.clone(), seeds: seeds.to_vec(), ir, tr })
        })
        .collect()
}
