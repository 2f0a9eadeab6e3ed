//! Cross-module pipeline checks on the reference toy configuration.

use std::time::Instant;

use lors_core::data::{generate_toy, ToyGenConfig};
use lors_core::distill::{init_synthetic, Provenance, SyntheticDataset, SyntheticInit};
use lors_core::eval::{retrieval_metrics, train_student, StudentConfig};
use lors_core::expert::{build_store, ExpertConfig};
use lors_core::losses::LossKind;
use lors_core::lors::{SimKind, SimParams};
use lors_core::model::{init_params, EncoderSpec};
use lors_core::train::{batch_plan, derive_seed, ItcTrainer, SgdConfig, SimSource};
use lors_core::Tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn reference_config() -> ToyGenConfig {
    ToyGenConfig {
        k_topics: 20,
        latent_dim: 16,
        dx: 32,
        dy: 32,
        train_per_topic: 100,
        test_per_topic: 25,
        noise: 0.1,
        seed: 17,
    }
}

fn full_data_artifact(
    train: &lors_core::data::EmbeddingPairDataset,
    spec_v: &EncoderSpec,
    spec_t: &EncoderSpec,
    inner_lr: f64,
) -> SyntheticDataset {
    SyntheticDataset {
        x: train.x.clone(),
        y: train.y.clone(),
        sim: SimParams::Identity,
        inner_lr,
        provenance: Provenance {
            init_indices: (0..train.len()).collect(),
            config_digest: 0,
            spec_v: spec_v.clone(),
            spec_t: spec_t.clone(),
            tau: 0.07,
        },
    }
}

#[test]
fn full_data_student_reaches_strong_retrieval() {
    // Sanity oracle for the generator: training on the whole train split
    // must give IR@1 well above 50 on the held-out gallery.
    let (train, test) = generate_toy(&reference_config()).unwrap();
    let spec_v = EncoderSpec::linear(32, 16);
    let spec_t = EncoderSpec::linear(32, 16);
    let artifact = full_data_artifact(&train, &spec_v, &spec_t, 0.05);
    let cfg = StudentConfig {
        steps: 1200,
        batch_size: 100,
        lr: None,
        momentum: 0.0,
        loss: LossKind::Nce,
        beta: 0.5,
    };
    let params = train_student(&artifact, &spec_v, &spec_t, &cfg, 1).unwrap();
    let report = retrieval_metrics(&params, &spec_v, &spec_t, &test, &[1]).unwrap();
    assert!(report.ir[0] > 50.0, "IR@1 = {}", report.ir[0]);
    assert!(report.tr[0] > 50.0, "TR@1 = {}", report.tr[0]);
}

#[test]
fn student_training_loss_decreases_on_reference_artifact() {
    let (train, _) = generate_toy(&reference_config()).unwrap();
    let spec_v = EncoderSpec::linear(32, 16);
    let spec_t = EncoderSpec::linear(32, 16);
    let init = SyntheticInit {
        pairs: 50,
        sim: SimKind::Lors,
        rank: 2,
        alpha: 1.0,
        initial_inner_lr: 0.05,
    };
    let synthetic = init_synthetic(&train, &init, &spec_v, &spec_t, 0.07, 0, 3).unwrap();
    let composed = synthetic.compose_similarity().unwrap();
    for seed in [1u64, 2, 3] {
        // Drive the trainer manually to observe per-step losses.
        let params = init_params(&spec_v, &spec_t, 0.07, derive_seed(seed, "student-init")).unwrap();
        let mut trainer = ItcTrainer::new(
            params,
            spec_v.clone(),
            spec_t.clone(),
            LossKind::Wbce,
            0.5,
            SgdConfig { lr: 0.05, momentum: 0.0 },
        );
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "student-shuffle"));
        let sim = SimSource::Matrix(&composed);
        let mut first = None;
        let mut last = 0.0;
        for chunk in batch_plan(&mut rng, 50, 20, 400) {
            let info = trainer
                .step(
                    &synthetic.x.gather_rows(&chunk),
                    &synthetic.y.gather_rows(&chunk),
                    &sim.batch(&chunk),
                )
                .unwrap();
            first.get_or_insert(info.loss);
            last = info.loss;
        }
        assert!(last < first.unwrap(), "seed {seed}: {first:?} -> {last}");
    }
}

#[test]
fn identity_nce_student_is_a_plain_contrastive_run() {
    // With identity similarity and InfoNCE, train_student must coincide with
    // a hand-driven contrastive training loop.
    let (train, _) = generate_toy(&reference_config()).unwrap();
    let spec_v = EncoderSpec::linear(32, 8);
    let spec_t = EncoderSpec::linear(32, 8);
    let init = SyntheticInit {
        pairs: 24,
        sim: SimKind::Identity,
        rank: 1,
        alpha: 1.0,
        initial_inner_lr: 0.05,
    };
    let synthetic = init_synthetic(&train, &init, &spec_v, &spec_t, 0.07, 0, 5).unwrap();
    let cfg = StudentConfig {
        steps: 50,
        batch_size: 8,
        lr: None,
        momentum: 0.0,
        loss: LossKind::Nce,
        beta: 0.5,
    };
    let seed = 7;
    let via_eval = train_student(&synthetic, &spec_v, &spec_t, &cfg, seed).unwrap();

    let params = init_params(&spec_v, &spec_t, 0.07, derive_seed(seed, "student-init")).unwrap();
    let mut trainer = ItcTrainer::new(
        params,
        spec_v.clone(),
        spec_t.clone(),
        LossKind::Nce,
        0.5,
        SgdConfig { lr: 0.05, momentum: 0.0 },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "student-shuffle"));
    for chunk in batch_plan(&mut rng, 24, 8, 50) {
        trainer
            .step(
                &synthetic.x.gather_rows(&chunk),
                &synthetic.y.gather_rows(&chunk),
                &Tensor::eye(chunk.len()),
            )
            .unwrap();
    }
    assert_eq!(via_eval, trainer.params);
}

#[test]
fn evaluation_does_not_mutate_the_artifact() {
    let (train, test) = generate_toy(&reference_config()).unwrap();
    let spec_v = EncoderSpec::linear(32, 16);
    let spec_t = EncoderSpec::linear(32, 16);
    let init = SyntheticInit {
        pairs: 20,
        sim: SimKind::Lors,
        rank: 2,
        alpha: 1.0,
        initial_inner_lr: 0.05,
    };
    let synthetic = init_synthetic(&train, &init, &spec_v, &spec_t, 0.07, 0, 7).unwrap();
    let before = lors_core::data::artifact_digest(&synthetic).unwrap();
    let cfg = StudentConfig {
        steps: 100,
        batch_size: 10,
        lr: None,
        momentum: 0.0,
        loss: LossKind::Wbce,
        beta: 0.5,
    };
    let archs = vec![
        ("linear".to_string(), spec_v.clone(), spec_t.clone()),
        ("mlp".to_string(), EncoderSpec::mlp(32, vec![12], 16), EncoderSpec::mlp(32, vec![12], 16)),
    ];
    let reports =
        lors_core::eval::evaluate_synthetic(&synthetic, &archs, &cfg, &test, &[1, 5], &[1, 2])
            .unwrap();
    assert_eq!(reports.len(), 2, "one report block per architecture");
    assert_eq!(lors_core::data::artifact_digest(&synthetic).unwrap(), before);
}

#[test]
fn reference_expert_store_builds_quickly() {
    // Desk default: 8 experts of 6 epochs over the 2000-pair toy set must
    // stay comfortably inside the minutes envelope.
    let (train, _) = generate_toy(&reference_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    let store = build_store(
        &train,
        &EncoderSpec::linear(32, 16),
        &EncoderSpec::linear(32, 16),
        0.07,
        &ExpertConfig { epochs: 6, batch_size: 100, lr: 0.05, momentum: 0.0 },
        8,
        500,
        dir.path(),
    )
    .unwrap();
    let elapsed = t0.elapsed();
    assert_eq!(store.len(), 8);
    assert!(elapsed.as_secs() < 300, "store build took {elapsed:?}");
    // Different expert seeds end at different parameters.
    let ends: Vec<&Vec<f64>> = store.buffers.iter().map(|b| b.snapshots.last().unwrap()).collect();
    for i in 1..ends.len() {
        assert_ne!(ends[0], ends[i], "experts 0 and {i} coincide");
    }
}

#[test]
fn init_with_full_budget_is_a_permutation_of_the_data() {
    let (train, _) = generate_toy(&ToyGenConfig { train_per_topic: 3, ..reference_config() }).unwrap();
    let spec_v = EncoderSpec::linear(32, 8);
    let spec_t = EncoderSpec::linear(32, 8);
    let init = SyntheticInit {
        pairs: train.len(),
        sim: SimKind::Identity,
        rank: 1,
        alpha: 1.0,
        initial_inner_lr: 0.05,
    };
    let synthetic = init_synthetic(&train, &init, &spec_v, &spec_t, 0.07, 0, 2).unwrap();
    let mut indices = synthetic.provenance.init_indices.clone();
    indices.sort_unstable();
    assert_eq!(indices, (0..train.len()).collect::<Vec<_>>());
}
