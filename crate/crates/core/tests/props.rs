//! Property tests for the invariants that hold over whole input families.

use proptest::prelude::*;

use lors_core::data::{load_dataset, save_dataset, DatasetMeta, EmbeddingPairDataset};
use lors_core::losses::{loss_value, GtSimilarity, LossKind};
use lors_core::model::{EncoderSpec, ModelParams};
use lors_core::Tensor;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dataset_roundtrip_is_lossless(
        m in 1usize..8,
        dx in 1usize..6,
        dy in 1usize..6,
        seed in any::<u64>(),
    ) {
        let mut x_data = Vec::new();
        let mut y_data = Vec::new();
        let mut state = seed;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        for _ in 0..m * dx { x_data.push(next()); }
        for _ in 0..m * dy { y_data.push(next()); }
        let ds = EmbeddingPairDataset::new(
            Tensor::matrix(m, dx, x_data).unwrap(),
            Tensor::matrix(m, dy, y_data).unwrap(),
            DatasetMeta { split: "train".into(), k_topics: 1, latent_dim: 1, noise: 0.0, seed },
        ).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.lepd");
        save_dataset(&path, &ds).unwrap();
        let loaded = load_dataset(&path).unwrap();
        prop_assert_eq!(loaded, ds);
    }

    #[test]
    fn flatten_unflatten_roundtrip(
        dx in 1usize..7,
        dy in 1usize..7,
        d in 1usize..5,
        hidden in proptest::option::of(1usize..6),
        seed in any::<u64>(),
    ) {
        let spec_v = match hidden {
            Some(h) => EncoderSpec::mlp(dx, vec![h], d),
            None => EncoderSpec::linear(dx, d),
        };
        let spec_t = EncoderSpec::linear(dy, d);
        let params = lors_core::model::init_params(&spec_v, &spec_t, 0.07, seed).unwrap();
        let flat = params.flatten();
        let rebuilt = ModelParams::unflatten(&spec_v, &spec_t, 0.07, &flat).unwrap();
        prop_assert_eq!(rebuilt.flatten(), flat);
    }

    #[test]
    fn losses_are_permutation_consistent(
        m in 2usize..6,
        logits in proptest::collection::vec(-4f64..4.0, 36),
        sims in proptest::collection::vec(-0.5f64..1.5, 36),
        perm_seed in any::<u64>(),
    ) {
        let logits = Tensor::matrix(m, m, logits[..m * m].to_vec()).unwrap();
        let gt = GtSimilarity::new(Tensor::matrix(m, m, sims[..m * m].to_vec()).unwrap(), 0.5).unwrap();
        // Derive a permutation from the seed.
        let mut perm: Vec<usize> = (0..m).collect();
        let mut state = perm_seed | 1;
        for i in (1..m).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            perm.swap(i, (state >> 33) as usize % (i + 1));
        }
        let lp = logits.gather_rows(&perm).gather_cols(&perm);
        let sp = gt.s.gather_rows(&perm).gather_cols(&perm);
        let gtp = GtSimilarity::new(sp, gt.beta).unwrap();
        for kind in [LossKind::Nce, LossKind::Ence, LossKind::Bce, LossKind::Wbce] {
            let a = loss_value(kind, &logits, &gt).unwrap().value;
            let b = loss_value(kind, &lp, &gtp).unwrap().value;
            prop_assert!((a - b).abs() < 1e-12, "{}: {} vs {}", kind, a, b);
        }
    }

    #[test]
    fn composed_similarity_entries_are_bilinear_bounded(
        n in 2usize..8,
        rank in 1usize..4,
        seed in any::<u64>(),
    ) {
        // compose(init) is the exact identity for all seeds and shapes.
        let rank = rank.min(n);
        let p = lors_core::lors::init_lors(n, rank, 1.0, seed).unwrap();
        let s = lors_core::lors::compose_all(&p).unwrap();
        prop_assert_eq!(s, Tensor::eye(n));
    }
}
