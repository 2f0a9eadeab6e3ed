//! Image-text contrastive model: two small encoders producing L2-normalized
//! embeddings and a scaled similarity-logit matrix.
//!
//! Encoders are bias-free stacks of weight matrices. The linear kind is a
//! single matrix followed by row normalization; the mlp kind applies tanh
//! between layers. Distillation only ever sees linear encoders; mlp is for
//! evaluation and cross-architecture studies.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub input_dim: usize,
    pub output_dim: usize,
    /// Hidden layer widths; only used by the mlp kind.
    #[serde(default)]
    pub hidden: Vec<usize>,
}

impl EncoderSpec {
    pub fn linear(input_dim: usize, output_dim: usize) -> Self {
        EncoderSpec { kind: EncoderKind::Linear, input_dim, output_dim, hidden: vec![] }
    }

    pub fn mlp(input_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Self {
        EncoderSpec { kind: EncoderKind::Mlp, input_dim, output_dim, hidden }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidArgument("encoder dims must be >= 1".into()));
        }
        match self.kind {
            EncoderKind::Linear => {
                if !self.hidden.is_empty() {
                    return Err(Error::InvalidArgument(
                        "linear encoder must not declare hidden sizes".into(),
                    ));
                }
            }
            EncoderKind::Mlp => {
                if self.hidden.contains(&0) {
                    return Err(Error::InvalidArgument("mlp hidden sizes must be >= 1".into()));
                }
            }
        }
        Ok(())
    }

    /// Weight matrix shapes, in application order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend_from_slice(&self.hidden);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_len(&self) -> usize {
        self.layer_shapes().iter().map(|(a, b)| a * b).sum()
    }
}

/// Flattenable parameters of one ITC model: image-encoder layers, then
/// text-encoder layers, plus a fixed positive temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers_v: Vec<Tensor>,
    pub layers_t: Vec<Tensor>,
    pub tau: f64,
}

impl ModelParams {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in self.layers_v.iter().chain(self.layers_t.iter()) {
            out.extend_from_slice(layer.data());
        }
        out
    }

    pub fn flat_len(&self) -> usize {
        self.layers_v
            .iter()
            .chain(self.layers_t.iter())
            .map(Tensor::numel)
            .sum()
    }

    pub fn unflatten(spec_v: &EncoderSpec, spec_t: &EncoderSpec, tau: f64, flat: &[f64]) -> Result<Self> {
        let expect = spec_v.param_len() + spec_t.param_len();
        if flat.len() != expect {
            return Err(Error::shape(
                "ModelParams::unflatten",
                format!("expected {} values, got {}", expect, flat.len()),
            ));
        }
        let mut cursor = 0;
        let mut take = |rows: usize, cols: usize| {
            let t = Tensor::matrix(rows, cols, flat[cursor..cursor + rows * cols].to_vec())
                .expect("sized slice");
            cursor += rows * cols;
            t
        };
        let layers_v = spec_v.layer_shapes().into_iter().map(|(a, b)| take(a, b)).collect();
        let layers_t = spec_t.layer_shapes().into_iter().map(|(a, b)| take(a, b)).collect();
        Ok(ModelParams { layers_v, layers_t, tau })
    }
}

/// A batch of paired rows with their source indices.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub texts: Tensor,
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn new(images: Tensor, texts: Tensor, indices: Vec<usize>) -> Result<Self> {
        if images.rows() != texts.rows() || images.rows() == 0 {
            return Err(Error::shape(
                "Batch::new",
                format!("row counts {} vs {}", images.rows(), texts.rows()),
            ));
        }
        Ok(Batch { images, texts, indices })
    }

    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Seeded initialization: every layer i.i.d. N(0, 1/fan_in).
pub fn init_params(spec_v: &EncoderSpec, spec_t: &EncoderSpec, tau: f64, seed: u64) -> Result<ModelParams> {
    spec_v.validate()?;
    spec_t.validate()?;
    if spec_v.output_dim != spec_t.output_dim {
        return Err(Error::InvalidArgument(format!(
            "encoder output dims differ: {} vs {}",
            spec_v.output_dim, spec_t.output_dim
        )));
    }
    if tau <= 0.0 {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {tau}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init_layers = |spec: &EncoderSpec| -> Vec<Tensor> {
        spec.layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let dist = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("std > 0");
                let data: Vec<f64> = (0..fan_in * fan_out).map(|_| dist.sample(&mut rng)).collect();
                Tensor::matrix(fan_in, fan_out, data).expect("sized init")
            })
            .collect()
    };
    let layers_v = init_layers(spec_v);
    let layers_t = init_layers(spec_t);
    Ok(ModelParams { layers_v, layers_t, tau })
}

fn encode_layers(layers: &[Tensor], spec: &EncoderSpec, inputs: &Tensor) -> Tensor {
    let mut h = inputs.matmul(&layers[0]);
    for layer in &layers[1..] {
        h = h.map(f64::tanh).matmul(layer);
    }
    debug_assert_eq!(h.cols(), spec.output_dim);
    h.row_l2_normalize()
}

/// Encode a batch of image rows to unit-norm embeddings.
pub fn encode_images(params: &ModelParams, spec: &EncoderSpec, inputs: &Tensor) -> Result<Tensor> {
    check_input(spec, inputs)?;
    Ok(encode_layers(&params.layers_v, spec, inputs))
}

/// Encode a batch of text rows to unit-norm embeddings.
pub fn encode_texts(params: &ModelParams, spec: &EncoderSpec, inputs: &Tensor) -> Result<Tensor> {
    check_input(spec, inputs)?;
    Ok(encode_layers(&params.layers_t, spec, inputs))
}

fn check_input(spec: &EncoderSpec, inputs: &Tensor) -> Result<()> {
    if inputs.cols() != spec.input_dim {
        return Err(Error::shape(
            "encode",
            format!("input dim {} vs spec {}", inputs.cols(), spec.input_dim),
        ));
    }
    Ok(())
}

/// Scaled similarity logits: entry (i,j) = <u_i, v_j> / tau.
pub fn similarity_logits(u: &Tensor, v: &Tensor, tau: f64) -> Result<Tensor> {
    if tau <= 0.0 {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {tau}")));
    }
    if u.cols() != v.cols() {
        return Err(Error::shape(
            "similarity_logits",
            format!("embedding dims {} vs {}", u.cols(), v.cols()),
        ));
    }
    Ok(u.matmul(&v.transpose()).scale(1.0 / tau))
}

/// Graph version of the encoder: inputs node [m, D] through the layer nodes
/// to normalized embeddings [m, d].
pub fn build_encode(graph: &mut Graph, inputs: NodeId, layer_nodes: &[NodeId]) -> NodeId {
    let mut h = graph.matmul(inputs, layer_nodes[0]);
    for &layer in &layer_nodes[1..] {
        let a = graph.tanh(h);
        h = graph.matmul(a, layer);
    }
    graph.row_l2_normalize(h)
}

/// Graph version of scaled similarity logits.
pub fn build_similarity_logits(graph: &mut Graph, u: NodeId, v: NodeId, tau: f64) -> NodeId {
    let vt = graph.transpose(v);
    let s = graph.matmul(u, vt);
    graph.mul_scalar(s, 1.0 / tau)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> (EncoderSpec, EncoderSpec) {
        (EncoderSpec::linear(8, 4), EncoderSpec::linear(6, 4))
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let (sv, st) = specs();
        let a = init_params(&sv, &st, 0.07, 42).unwrap();
        let c = init_params(&sv, &st, 0.07, 42).unwrap();
        assert_eq!(a.flatten(), c.flatten());
        let d = init_params(&sv, &st, 0.07, 43).unwrap();
        assert_ne!(a.flatten(), d.flatten());
        assert!(init_params(&sv, &st, 0.0, 1).is_err());
    }

    #[test]
    fn linear_param_length() {
        let sv = EncoderSpec::linear(8, 4);
        assert_eq!(sv.param_len(), 32);
        let (s1, s2) = specs();
        let p = init_params(&s1, &s2, 0.07, 1).unwrap();
        assert_eq!(p.flatten().len(), 32 + 24);
    }

    #[test]
    fn flatten_roundtrip_bit_identical() {
        let sv = EncoderSpec::mlp(5, vec![7], 3);
        let st = EncoderSpec::linear(4, 3);
        let p = init_params(&sv, &st, 0.07, 9).unwrap();
        let flat = p.flatten();
        let q = ModelParams::unflatten(&sv, &st, 0.07, &flat).unwrap();
        assert_eq!(flat, q.flatten());
        assert_eq!(p, q);
    }

    #[test]
    fn identity_encoder_normalizes() {
        let spec = EncoderSpec::linear(4, 4);
        let params = ModelParams {
            layers_v: vec![Tensor::eye(4)],
            layers_t: vec![Tensor::eye(4)],
            tau: 1.0,
        };
        let x = Tensor::matrix(1, 4, vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        let u = encode_images(&params, &spec, &x).unwrap();
        assert!((u.data()[0] - 0.6).abs() < 1e-15);
        assert!((u.data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn encoded_rows_unit_norm() {
        let sv = EncoderSpec::mlp(6, vec![5], 3);
        let st = EncoderSpec::linear(6, 3);
        let p = init_params(&sv, &st, 0.07, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..4 * 6).map(|_| rand::Rng::gen_range(&mut rng, -2.0..2.0)).collect();
        let x = Tensor::matrix(4, 6, data).unwrap();
        let u = encode_images(&p, &sv, &x).unwrap();
        for i in 0..4 {
            let norm: f64 = u.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_equivariance() {
        let sv = EncoderSpec::linear(5, 3);
        let st = EncoderSpec::linear(5, 3);
        let p = init_params(&sv, &st, 0.07, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<f64> = (0..3 * 5).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
        let x = Tensor::matrix(3, 5, data).unwrap();
        let u = encode_images(&p, &sv, &x).unwrap();
        let perm = [2usize, 0, 1];
        let xp = x.gather_rows(&perm);
        let up = encode_images(&p, &sv, &xp).unwrap();
        assert_eq!(up, u.gather_rows(&perm));
    }

    #[test]
    fn similarity_identity_rows() {
        let u = Tensor::eye(3);
        let s = similarity_logits(&u, &u, 1.0).unwrap();
        assert_eq!(s, Tensor::eye(3));
        let s2 = similarity_logits(&u, &u, 0.5).unwrap();
        for i in 0..3 {
            assert_eq!(s2.at(i, i), 2.0);
        }
        assert!(similarity_logits(&u, &u, 0.0).is_err());
    }

    #[test]
    fn encode_gradient_matches_finite_differences() {
        use crate::gradcheck;
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let spec = EncoderSpec::linear(5, 3);
        let w_t = Tensor::matrix(5, 3, (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let x_t = Tensor::matrix(4, 5, (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();

        let mut g = crate::graph::Graph::new();
        let w = g.input("w", vec![5, 3]);
        let x = g.constant(x_t);
        let u = build_encode(&mut g, x, &[w]);
        let out = g.sum_all(u);
        g.forward(&[("w", &w_t)]).unwrap();
        let grad = g.gradients(out, &[w]).unwrap()[0].data().to_vec();
        let _ = spec;

        let g_cell = std::cell::RefCell::new(g);
        let f = |flat: &[f64]| {
            let wt = Tensor::matrix(5, 3, flat.to_vec()).unwrap();
            let mut gg = g_cell.borrow_mut();
            gg.forward(&[("w", &wt)]).unwrap();
            gg.value(out).scalar_value()
        };
        let worst = gradcheck::check_gradient(f, w_t.data(), &grad, 1e-4, 8, &mut rng);
        assert!(worst <= 1e-4, "worst rel err {worst}");
    }

    #[test]
    fn similarity_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mk = |rng: &mut ChaCha8Rng| {
            let data: Vec<f64> = (0..4 * 3).map(|_| rand::Rng::gen_range(rng, -1.0..1.0)).collect();
            Tensor::matrix(4, 3, data).unwrap().row_l2_normalize()
        };
        let u = mk(&mut rng);
        let v = mk(&mut rng);
        let tau = 0.07;
        let s = similarity_logits(&u, &v, tau).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = u.row(i).iter().zip(v.row(j)).map(|(&a, &b)| a * b).sum();
                assert!((s.at(i, j) - dot / tau).abs() < 1e-12);
                assert!(dot.abs() <= 1.0 + 1e-12);
            }
        }
    }
}
