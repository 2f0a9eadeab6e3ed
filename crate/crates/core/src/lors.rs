//! Factorized learnable ground-truth similarity: a per-pair diagonal plus a
//! rank-r residual, S = diag(omega) + (alpha/r) L R^T.
//!
//! Initialization sets omega to ones, L to seeded standard normals, and R to
//! zeros, so the composed matrix starts as the exact identity while keeping
//! nonzero early gradients for R. The full-matrix variant used by ablations
//! lives here too.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LorsParams {
    /// Diagonal weights, one per pair (N x 1).
    pub omega: Tensor,
    /// Left low-rank factor (N x r).
    pub l: Tensor,
    /// Right low-rank factor (N x r).
    pub r: Tensor,
    /// Fixed residual weighting factor.
    pub alpha: f64,
    /// Fixed rank of the residual.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullSimParams {
    pub s: Tensor,
}

/// The similarity parameterization attached to a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub enum SimParams {
    /// Frozen identity: the vanilla trajectory-matching baseline.
    Identity,
    Lors(LorsParams),
    Full(FullSimParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimKind {
    Identity,
    Lors,
    Full,
}

impl SimParams {
    pub fn kind(&self) -> SimKind {
        match self {
            SimParams::Identity => SimKind::Identity,
            SimParams::Lors(_) => SimKind::Lors,
            SimParams::Full(_) => SimKind::Full,
        }
    }

    /// Composed similarity over arbitrary index sets.
    pub fn compose(&self, n: usize, row_indices: &[usize], col_indices: &[usize]) -> Result<Tensor> {
        match self {
            SimParams::Identity => {
                check_indices(n, row_indices, col_indices)?;
                let mut out = Tensor::zeros(row_indices.len(), col_indices.len());
                for (a, &i) in row_indices.iter().enumerate() {
                    for (b, &j) in col_indices.iter().enumerate() {
                        if i == j {
                            out.set(a, b, 1.0);
                        }
                    }
                }
                Ok(out)
            }
            SimParams::Lors(p) => compose(p, row_indices, col_indices),
            SimParams::Full(p) => {
                check_indices(n, row_indices, col_indices)?;
                Ok(p.s.gather_rows(row_indices).gather_cols(col_indices))
            }
        }
    }

    pub fn compose_all(&self, n: usize) -> Result<Tensor> {
        let all: Vec<usize> = (0..n).collect();
        self.compose(n, &all, &all)
    }
}

fn check_indices(n: usize, rows: &[usize], cols: &[usize]) -> Result<()> {
    if rows.iter().chain(cols.iter()).any(|&i| i >= n) {
        return Err(Error::InvalidArgument(format!("similarity index out of range (N={n})")));
    }
    Ok(())
}

/// Seeded init: omega = 1, L ~ N(0, scale^2), R = 0; composes to the exact
/// identity.
pub fn init_lors(n: usize, rank: usize, alpha: f64, seed: u64) -> Result<LorsParams> {
    init_lors_scaled(n, rank, alpha, seed, 1.0)
}

pub fn init_lors_scaled(n: usize, rank: usize, alpha: f64, seed: u64, l_scale: f64) -> Result<LorsParams> {
    if rank == 0 || rank > n {
        return Err(Error::InvalidArgument(format!("rank must satisfy 1 <= r <= N, got r={rank}, N={n}")));
    }
    if alpha <= 0.0 {
        return Err(Error::InvalidArgument(format!("alpha must be > 0, got {alpha}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, l_scale).expect("scale > 0");
    let l_data: Vec<f64> = (0..n * rank).map(|_| dist.sample(&mut rng)).collect();
    Ok(LorsParams {
        omega: Tensor::filled(n, 1, 1.0),
        l: Tensor::matrix(n, rank, l_data)?,
        r: Tensor::zeros(n, rank),
        alpha,
        rank,
    })
}

/// Sub-matrix of the composed similarity:
/// S[i,j] = omega_i [i = j] + (alpha/r) <L_i, R_j>.
pub fn compose(p: &LorsParams, row_indices: &[usize], col_indices: &[usize]) -> Result<Tensor> {
    let n = p.omega.rows();
    check_indices(n, row_indices, col_indices)?;
    let scale = p.alpha / p.rank as f64;
    let mut out = Tensor::zeros(row_indices.len(), col_indices.len());
    for (a, &i) in row_indices.iter().enumerate() {
        for (b, &j) in col_indices.iter().enumerate() {
            let dot: f64 = p.l.row(i).iter().zip(p.r.row(j)).map(|(&x, &y)| x * y).sum();
            let diag = if i == j { p.omega.at(i, 0) } else { 0.0 };
            out.set(a, b, diag + scale * dot);
        }
    }
    Ok(out)
}

pub fn compose_all(p: &LorsParams) -> Result<Tensor> {
    let n = p.omega.rows();
    let all: Vec<usize> = (0..n).collect();
    compose(p, &all, &all)
}

/// Learnable parameter count of the factorization: N(2r + 1).
pub fn param_count(n: usize, rank: usize) -> usize {
    n * (2 * rank + 1)
}

/// Largest pair count N' <= pairs such that the parameters freed by the
/// dropped pairs cover the similarity factorization:
/// (pairs - N') * (image_params + text_dim) >= N'(2r + 1).
pub fn pair_budget_reduction(
    pairs: usize,
    image_params: usize,
    text_dim: usize,
    rank: usize,
) -> Result<usize> {
    if pairs == 0 || image_params + text_dim == 0 {
        return Err(Error::InvalidArgument("pair budget needs positive sizes".into()));
    }
    let per_pair = image_params + text_dim;
    let mut best = None;
    for n in (0..=pairs).rev() {
        if (pairs - n) * per_pair >= n * (2 * rank + 1) {
            best = Some(n);
            break;
        }
    }
    match best {
        Some(n) if n >= 1 => Ok(n),
        _ => Err(Error::InvalidArgument(format!(
            "rank {rank} infeasible for budget of {pairs} pairs at {per_pair} params/pair"
        ))),
    }
}

/// Graph nodes for the batch sub-matrix S[idx, idx] built from omega, L, R
/// nodes, differentiable w.r.t. all three.
pub fn build_compose_batch(
    g: &mut Graph,
    omega: NodeId,
    l: NodeId,
    r: NodeId,
    alpha: f64,
    rank: usize,
    batch: &[usize],
) -> NodeId {
    let omega_b = g.gather_rows(omega, batch.to_vec());
    let diag = g.diag_embed(omega_b);
    let l_b = g.gather_rows(l, batch.to_vec());
    let r_b = g.gather_rows(r, batch.to_vec());
    let r_b_t = g.transpose(r_b);
    let prod = g.matmul(l_b, r_b_t);
    let resid = g.mul_scalar(prod, alpha / rank as f64);
    g.add(diag, resid)
}

/// Same sub-matrix for the fully learnable variant.
pub fn build_compose_batch_full(g: &mut Graph, s: NodeId, batch: &[usize]) -> NodeId {
    let rows = g.gather_rows(s, batch.to_vec());
    g.gather_cols(rows, batch.to_vec())
}
