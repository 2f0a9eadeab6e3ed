//! Expert trajectories: ITC models trained on the real dataset with InfoNCE,
//! snapshotted once per epoch and persisted in the LTRJ checkpoint format.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::EmbeddingPairDataset;
use crate::error::{Error, Result};
use crate::format::{fnv1a, write_file, BlockReader, BlockWriter};
use crate::losses::LossKind;
use crate::model::{init_params, EncoderSpec, ModelParams};
use crate::tensor::Tensor;
use crate::train::{derive_seed, epoch_chunks, ItcTrainer, SgdConfig};

const LTRJ_MAGIC: &[u8; 8] = b"LTRJ0001";
const LTRJ_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
}

/// Ordered checkpoints of one expert run; snapshot 0 is the initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBuffer {
    pub spec_v: EncoderSpec,
    pub spec_t: EncoderSpec,
    pub tau: f64,
    pub optimizer: ExpertConfig,
    pub data_digest: u64,
    pub seed: u64,
    pub snapshots: Vec<Vec<f64>>,
}

impl TrajectoryBuffer {
    /// Number of trained epochs (snapshots minus the initialization).
    pub fn epochs(&self) -> usize {
        self.snapshots.len() - 1
    }

    pub fn flat_len(&self) -> usize {
        self.snapshots[0].len()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BufferDescriptor {
    spec_v: EncoderSpec,
    spec_t: EncoderSpec,
    tau: f64,
    optimizer: ExpertConfig,
    data_digest: u64,
    seed: u64,
}

pub fn buffer_to_bytes(b: &TrajectoryBuffer) -> Result<Vec<u8>> {
    let mut w = BlockWriter::new(LTRJ_MAGIC);
    w.put_u32(LTRJ_VERSION);
    w.put_json_block(&BufferDescriptor {
        spec_v: b.spec_v.clone(),
        spec_t: b.spec_t.clone(),
        tau: b.tau,
        optimizer: b.optimizer.clone(),
        data_digest: b.data_digest,
        seed: b.seed,
    })?;
    w.put_u32(b.snapshots.len() as u32);
    w.put_u64(b.flat_len() as u64);
    for snap in &b.snapshots {
        w.put_f64_slice(snap);
    }
    Ok(w.finish())
}

pub fn save_buffer(path: &Path, b: &TrajectoryBuffer) -> Result<()> {
    write_file(path, &buffer_to_bytes(b)?)
}

pub fn load_buffer(path: &Path) -> Result<TrajectoryBuffer> {
    let mut r = BlockReader::open(path, LTRJ_MAGIC)?;
    let version = r.take_u32()?;
    if version != LTRJ_VERSION {
        return Err(Error::format(
            path.display().to_string(),
            format!("unsupported LTRJ version {version}"),
        ));
    }
    let desc: BufferDescriptor = r.take_json_block()?;
    let count = r.take_u32()? as usize;
    let flat_len = r.take_u64()? as usize;
    if count == 0 {
        return Err(Error::format(path.display().to_string(), "empty trajectory"));
    }
    let mut snapshots = Vec::with_capacity(count);
    for _ in 0..count {
        snapshots.push(r.take_f64_vec(flat_len)?);
    }
    r.finish()?;
    Ok(TrajectoryBuffer {
        spec_v: desc.spec_v,
        spec_t: desc.spec_t,
        tau: desc.tau,
        optimizer: desc.optimizer,
        data_digest: desc.data_digest,
        seed: desc.seed,
        snapshots,
    })
}

/// Train one expert with SGD on shuffled batches, snapshotting after every
/// epoch. Fully deterministic per seed, shuffling included.
pub fn train_expert(
    dataset: &EmbeddingPairDataset,
    spec_v: &EncoderSpec,
    spec_t: &EncoderSpec,
    tau: f64,
    cfg: &ExpertConfig,
    seed: u64,
) -> Result<TrajectoryBuffer> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("expert training needs a non-empty dataset".into()));
    }
    if cfg.batch_size == 0 || cfg.batch_size > dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "batch size {} out of range for {} samples",
            cfg.batch_size,
            dataset.len()
        )));
    }
    let params = init_params(spec_v, spec_t, tau, derive_seed(seed, "expert-init"))?;
    let mut snapshots = vec![params.flatten()];
    let mut trainer = ItcTrainer::new(
        params,
        spec_v.clone(),
        spec_t.clone(),
        LossKind::Nce,
        crate::losses::DEFAULT_BETA,
        SgdConfig { lr: cfg.lr, momentum: cfg.momentum },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "expert-shuffle"));
    for _epoch in 0..cfg.epochs {
        for chunk in epoch_chunks(&mut rng, dataset.len(), cfg.batch_size) {
            let x_b = dataset.x.gather_rows(&chunk);
            let y_b = dataset.y.gather_rows(&chunk);
            let s_b = Tensor::eye(chunk.len());
            trainer.step(&x_b, &y_b, &s_b)?;
        }
        snapshots.push(trainer.params.flatten());
    }
    Ok(TrajectoryBuffer {
        spec_v: spec_v.clone(),
        spec_t: spec_t.clone(),
        tau,
        optimizer: cfg.clone(),
        data_digest: dataset.digest()?,
        seed,
        snapshots,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub version: u32,
    pub count: usize,
    pub seeds: Vec<u64>,
    pub config_digest: u64,
    pub files: Vec<String>,
    pub epochs: usize,
    pub flat_len: usize,
}

#[derive(Debug)]
pub struct TrajectoryStore {
    pub dir: PathBuf,
    pub manifest: StoreManifest,
    pub buffers: Vec<TrajectoryBuffer>,
}

impl TrajectoryStore {
    pub fn epochs(&self) -> usize {
        self.manifest.epochs
    }

    pub fn len(&self) -> usize {
        self.buffers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffers.is_empty()
    }

    pub fn spec_v(&self) -> &EncoderSpec {
        &self.buffers[0].spec_v
    }

    pub fn spec_t(&self) -> &EncoderSpec {
        &self.buffers[0].spec_t
    }

    pub fn tau(&self) -> f64 {
        self.buffers[0].tau
    }
}

fn store_config_digest(
    spec_v: &EncoderSpec,
    spec_t: &EncoderSpec,
    tau: f64,
    cfg: &ExpertConfig,
    data_digest: u64,
) -> Result<u64> {
    let blob = serde_json::to_vec(&(spec_v, spec_t, tau, cfg, data_digest))
        .map_err(|e| Error::Config(format!("digest encode: {e}")))?;
    Ok(fnv1a(&blob))
}

/// Train `num_experts` independent experts (seeds base..base+n-1, run in
/// parallel) and persist them with a manifest written last.
#[allow(clippy::too_many_arguments)]
pub fn build_store(
    dataset: &EmbeddingPairDataset,
    spec_v: &EncoderSpec,
    spec_t: &EncoderSpec,
    tau: f64,
    cfg: &ExpertConfig,
    num_experts: usize,
    base_seed: u64,
    dir: &Path,
) -> Result<TrajectoryStore> {
    if num_experts == 0 {
        return Err(Error::InvalidArgument("need at least one expert".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let seeds: Vec<u64> = (0..num_experts as u64).map(|i| base_seed + i).collect();
    let buffers: Vec<TrajectoryBuffer> = seeds
        .par_iter()
        .map(|&seed| train_expert(dataset, spec_v, spec_t, tau, cfg, seed))
        .collect::<Result<Vec<_>>>()?;
    let mut files = Vec::with_capacity(num_experts);
    for (i, buffer) in buffers.iter().enumerate() {
        let name = format!("expert_{i:04}.ltrj");
        save_buffer(&dir.join(&name), buffer)?;
        files.push(name);
    }
    let manifest = StoreManifest {
        version: LTRJ_VERSION,
        count: num_experts,
        seeds,
        config_digest: store_config_digest(spec_v, spec_t, tau, cfg, dataset.digest()?)?,
        files,
        epochs: cfg.epochs,
        flat_len: buffers[0].flat_len(),
    };
    let manifest_json = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| Error::Config(format!("manifest encode: {e}")))?;
    write_file(&dir.join(MANIFEST_FILE), &manifest_json)?;
    Ok(TrajectoryStore { dir: dir.to_path_buf(), manifest, buffers })
}

pub fn load_store(dir: &Path) -> Result<TrajectoryStore> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let bytes = std::fs::read(&manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let manifest: StoreManifest = serde_json::from_slice(&bytes)
        .map_err(|e| Error::format(manifest_path.display().to_string(), format!("manifest: {e}")))?;
    if manifest.files.len() != manifest.count {
        return Err(Error::format(
            manifest_path.display().to_string(),
            format!("manifest count {} vs {} files", manifest.count, manifest.files.len()),
        ));
    }
    let buffers: Vec<TrajectoryBuffer> = manifest
        .files
        .iter()
        .map(|name| load_buffer(&dir.join(name)))
        .collect::<Result<Vec<_>>>()?;
    for b in &buffers {
        if b.epochs() != manifest.epochs
            || b.flat_len() != manifest.flat_len
            || b.spec_v != buffers[0].spec_v
            || b.spec_t != buffers[0].spec_t
        {
            return Err(Error::format(
                dir.display().to_string(),
                "store buffers disagree on specs or epoch count",
            ));
        }
    }
    Ok(TrajectoryStore { dir: dir.to_path_buf(), manifest, buffers })
}

/// Convenience for tests and tools: final parameters of a buffer as a model.
pub fn snapshot_params(b: &TrajectoryBuffer, index: usize) -> Result<ModelParams> {
    ModelParams::unflatten(&b.spec_v, &b.spec_t, b.tau, &b.snapshots[index])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_toy, ToyGenConfig};

    fn tiny_data() -> EmbeddingPairDataset {
        let cfg = ToyGenConfig {
            k_topics: 3,
            latent_dim: 4,
            dx: 6,
            dy: 5,
            train_per_topic: 10,
            test_per_topic: 2,
            noise: 0.05,
            seed: 77,
        };
        generate_toy(&cfg).unwrap().0
    }

    fn tiny_cfg() -> ExpertConfig {
        ExpertConfig { epochs: 2, batch_size: 10, lr: 0.2, momentum: 0.0 }
    }

    #[test]
    fn zero_epochs_keeps_only_init() {
        let ds = tiny_data();
        let cfg = ExpertConfig { epochs: 0, ..tiny_cfg() };
        let b = train_expert(&ds, &EncoderSpec::linear(6, 3), &EncoderSpec::linear(5, 3), 0.1, &cfg, 1)
            .unwrap();
        assert_eq!(b.snapshots.len(), 1);
    }

    #[test]
    fn expert_training_is_deterministic_and_moves() {
        let ds = tiny_data();
        let sv = EncoderSpec::linear(6, 3);
        let st = EncoderSpec::linear(5, 3);
        let a = train_expert(&ds, &sv, &st, 0.1, &tiny_cfg(), 5).unwrap();
        let b = train_expert(&ds, &sv, &st, 0.1, &tiny_cfg(), 5).unwrap();
        assert_eq!(a, b);
        let dist: f64 = a.snapshots[0]
            .iter()
            .zip(&a.snapshots[a.epochs()])
            .map(|(p, q)| (p - q) * (p - q))
            .sum();
        assert!(dist > 0.0, "theta_0 equals theta_T");
        let c = train_expert(&ds, &sv, &st, 0.1, &tiny_cfg(), 6).unwrap();
        assert_ne!(
            a.snapshots[a.epochs()],
            c.snapshots[c.epochs()],
            "different seeds must give different endpoints"
        );
    }

    #[test]
    fn training_loss_decreases_over_epochs() {
        let ds = tiny_data();
        let sv = EncoderSpec::linear(6, 4);
        let st = EncoderSpec::linear(5, 4);
        for seed in [1u64, 2, 3] {
            let b = train_expert(
                &ds,
                &sv,
                &st,
                0.1,
                &ExpertConfig { epochs: 4, batch_size: 10, lr: 0.3, momentum: 0.0 },
                seed,
            )
            .unwrap();
            // Full-batch NCE loss at the initial vs final parameters.
            let eval_loss = |flat: &[f64]| {
                let p = ModelParams::unflatten(&sv, &st, 0.1, flat).unwrap();
                let u = crate::model::encode_images(&p, &sv, &ds.x).unwrap();
                let v = crate::model::encode_texts(&p, &st, &ds.y).unwrap();
                let logits = crate::model::similarity_logits(&u, &v, 0.1).unwrap();
                crate::losses::nce_loss(&logits).unwrap().value
            };
            let first = eval_loss(&b.snapshots[0]);
            let last = eval_loss(&b.snapshots[b.epochs()]);
            assert!(last <= first, "seed {seed}: loss {first} -> {last}");
        }
    }

    #[test]
    fn buffer_roundtrip_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_data();
        let b = train_expert(&ds, &EncoderSpec::linear(6, 3), &EncoderSpec::linear(5, 3), 0.1, &tiny_cfg(), 9)
            .unwrap();
        let p1 = dir.path().join("one.ltrj");
        save_buffer(&p1, &b).unwrap();
        let loaded = load_buffer(&p1).unwrap();
        assert_eq!(loaded, b);
        let p2 = dir.path().join("two.ltrj");
        save_buffer(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_data();
        let b = train_expert(&ds, &EncoderSpec::linear(6, 3), &EncoderSpec::linear(5, 3), 0.1, &tiny_cfg(), 9)
            .unwrap();
        let path = dir.path().join("bad.ltrj");
        let mut bytes = buffer_to_bytes(&b).unwrap();
        // Rewrite the magic and fix up the digest so only the magic is wrong.
        bytes[0..8].copy_from_slice(b"XXXX0001");
        let body = bytes.len() - 8;
        let digest = fnv1a(&bytes[..body]);
        bytes[body..].copy_from_slice(&digest.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = load_buffer(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn store_roundtrip_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_data();
        let store = build_store(
            &ds,
            &EncoderSpec::linear(6, 3),
            &EncoderSpec::linear(5, 3),
            0.1,
            &tiny_cfg(),
            3,
            100,
            dir.path(),
        )
        .unwrap();
        assert_eq!(store.manifest.count, 3);
        let bytes_before: Vec<Vec<u8>> = store
            .manifest
            .files
            .iter()
            .map(|f| std::fs::read(dir.path().join(f)).unwrap())
            .collect();
        let loaded = load_store(dir.path()).unwrap();
        assert_eq!(loaded.manifest, store.manifest);
        assert_eq!(loaded.buffers.len(), 3);
        assert_eq!(loaded.buffers[1], store.buffers[1]);
        // Loading never mutates the store on disk.
        for (f, before) in store.manifest.files.iter().zip(&bytes_before) {
            assert_eq!(&std::fs::read(dir.path().join(f)).unwrap(), before);
        }
    }
}
