//! Batch contrastive losses over a continuous ground-truth similarity
//! matrix, plus the closed-form per-representation gradients used both as
//! graph building blocks inside the unrolled distillation loop and as
//! oracles in tests.
//!
//! All losses take pre-scaled logits (cosine similarity / tau). The binary
//! cross entropy per cell is evaluated in the stable form
//! l(y, sigmoid(x)) = log(1 + e^{-x}) + (1-y)x.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{sigmoid, softplus, Tensor};

pub const DEFAULT_BETA: f64 = 0.5;

/// Ground-truth similarity for one batch: an m-by-m matrix of target values
/// and the positive/negative threshold used by the weighted BCE loss.
/// Values are not constrained to [0, 1].
#[derive(Debug, Clone)]
pub struct GtSimilarity {
    pub s: Tensor,
    pub beta: f64,
}

impl GtSimilarity {
    pub fn new(s: Tensor, beta: f64) -> Result<Self> {
        if !s.is_matrix() || s.rows() != s.cols() {
            return Err(Error::shape("GtSimilarity", format!("{:?} not square", s.shape())));
        }
        if !beta.is_finite() {
            return Err(Error::InvalidArgument("beta must be finite".into()));
        }
        Ok(GtSimilarity { s, beta })
    }

    pub fn identity(m: usize) -> Self {
        GtSimilarity { s: Tensor::eye(m), beta: DEFAULT_BETA }
    }

    pub fn len(&self) -> usize {
        self.s.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.s.rows() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Nce,
    Ence,
    Bce,
    Wbce,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            LossKind::Nce => "nce",
            LossKind::Ence => "ence",
            LossKind::Bce => "bce",
            LossKind::Wbce => "wbce",
        };
        f.write_str(name)
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nce" => Ok(LossKind::Nce),
            "ence" => Ok(LossKind::Ence),
            "bce" => Ok(LossKind::Bce),
            "wbce" => Ok(LossKind::Wbce),
            other => Err(Error::InvalidArgument(format!(
                "unknown loss kind '{other}' (expected nce|ence|bce|wbce)"
            ))),
        }
    }
}

/// Loss value with the softmax probability matrices cached when the loss
/// uses them (NCE and eNCE).
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub p_v: Option<Tensor>,
    pub p_t: Option<Tensor>,
}

fn check_square(logits: &Tensor, context: &str) -> Result<()> {
    if !logits.is_matrix() || logits.rows() != logits.cols() {
        return Err(Error::shape(context, format!("{:?} not square", logits.shape())));
    }
    Ok(())
}

fn check_matching(logits: &Tensor, gt: &GtSimilarity, context: &str) -> Result<()> {
    check_square(logits, context)?;
    if gt.s.rows() != logits.rows() {
        return Err(Error::shape(
            context,
            format!("gt size {} vs batch {}", gt.s.rows(), logits.rows()),
        ));
    }
    Ok(())
}

/// Row softmax and column softmax of the logits.
pub fn probability_matrices(logits: &Tensor) -> (Tensor, Tensor) {
    let p_v = logits.row_softmax();
    let p_t = logits.transpose().row_softmax().transpose();
    (p_v, p_t)
}

/// InfoNCE over the batch diagonal.
pub fn nce_loss(logits: &Tensor) -> Result<LossValue> {
    check_square(logits, "nce_loss")?;
    let m = logits.rows();
    let (p_v, p_t) = probability_matrices(logits);
    let mut acc = 0.0;
    for i in 0..m {
        acc += p_v.at(i, i).ln() + p_t.at(i, i).ln();
    }
    let value = -(acc / m as f64);
    Ok(LossValue { value, p_v: Some(p_v), p_t: Some(p_t) })
}

/// Extended InfoNCE: every cell weighted by its ground-truth similarity.
/// Degrades to `nce_loss` bit-for-bit when the ground truth is the identity.
pub fn ence_loss(logits: &Tensor, gt: &GtSimilarity) -> Result<LossValue> {
    check_matching(logits, gt, "ence_loss")?;
    let m = logits.rows();
    let (p_v, p_t) = probability_matrices(logits);
    let mut acc = 0.0;
    for i in 0..m {
        for j in 0..m {
            acc += gt.s.at(i, j) * (p_v.at(i, j).ln() + p_t.at(i, j).ln());
        }
    }
    let value = -(acc / m as f64);
    Ok(LossValue { value, p_v: Some(p_v), p_t: Some(p_t) })
}

/// Stable per-cell binary cross entropy against sigmoid(x).
fn bce_cell(y: f64, x: f64) -> f64 {
    softplus(-x) + (1.0 - y) * x
}

/// Multi-label BCE, normalized by the batch size m (not m^2).
pub fn bce_loss(logits: &Tensor, gt: &GtSimilarity) -> Result<LossValue> {
    check_matching(logits, gt, "bce_loss")?;
    let m = logits.rows();
    let mut acc = 0.0;
    for i in 0..m {
        for j in 0..m {
            acc += bce_cell(gt.s.at(i, j), logits.at(i, j));
        }
    }
    Ok(LossValue { value: acc / m as f64, p_v: None, p_t: None })
}

/// Weighted BCE: positives (s > beta) and negatives averaged separately.
/// An empty group contributes 0.
pub fn wbce_loss(logits: &Tensor, gt: &GtSimilarity) -> Result<LossValue> {
    check_matching(logits, gt, "wbce_loss")?;
    let m = logits.rows();
    let (mut pos_sum, mut neg_sum) = (0.0, 0.0);
    let (mut pos_n, mut neg_n) = (0usize, 0usize);
    for i in 0..m {
        for j in 0..m {
            let cell = bce_cell(gt.s.at(i, j), logits.at(i, j));
            if gt.s.at(i, j) > gt.beta {
                pos_sum += cell;
                pos_n += 1;
            } else {
                neg_sum += cell;
                neg_n += 1;
            }
        }
    }
    let value = pos_sum / pos_n.max(1) as f64 + neg_sum / neg_n.max(1) as f64;
    Ok(LossValue { value, p_v: None, p_t: None })
}

pub fn loss_value(kind: LossKind, logits: &Tensor, gt: &GtSimilarity) -> Result<LossValue> {
    match kind {
        LossKind::Nce => nce_loss(logits),
        LossKind::Ence => ence_loss(logits, gt),
        LossKind::Bce => bce_loss(logits, gt),
        LossKind::Wbce => wbce_loss(logits, gt),
    }
}

/// Anchor-weight matrix W. Row n holds the coefficients W_nj such that the
/// loss gradient w.r.t. the (normalized) image representation u_n is
/// sum_j W_nj v_j; -gamma * W are the attraction/repulsion coefficients of
/// the training dynamics.
pub fn anchor_weights(
    kind: LossKind,
    u: &Tensor,
    v: &Tensor,
    gt: &GtSimilarity,
    tau: f64,
) -> Result<Tensor> {
    let logits = crate::model::similarity_logits(u, v, tau)?;
    check_matching(&logits, gt, "anchor_weights")?;
    let m = logits.rows();
    let mf = m as f64;
    let mut w = Tensor::zeros(m, m);
    match kind {
        LossKind::Nce => {
            let (p_v, p_t) = probability_matrices(&logits);
            for n in 0..m {
                for j in 0..m {
                    let delta = if j == n { 2.0 } else { 0.0 };
                    w.set(n, j, (p_v.at(n, j) + p_t.at(n, j) - delta) / (mf * tau));
                }
            }
        }
        LossKind::Ence => {
            let (p_v, p_t) = probability_matrices(&logits);
            let row_marginal = gt.s.row_sum();
            let col_marginal = gt.s.col_sum();
            for n in 0..m {
                for j in 0..m {
                    let val = row_marginal.at(n, 0) * p_v.at(n, j)
                        + col_marginal.at(0, j) * p_t.at(n, j)
                        - 2.0 * gt.s.at(n, j);
                    w.set(n, j, val / (mf * tau));
                }
            }
        }
        LossKind::Bce => {
            for n in 0..m {
                for j in 0..m {
                    w.set(n, j, (sigmoid(logits.at(n, j)) - gt.s.at(n, j)) / (mf * tau));
                }
            }
        }
        LossKind::Wbce => {
            let mut pos_n = 0usize;
            for i in 0..m {
                for j in 0..m {
                    if gt.s.at(i, j) > gt.beta {
                        pos_n += 1;
                    }
                }
            }
            let neg_n = m * m - pos_n;
            let pos_norm = 1.0 / pos_n.max(1) as f64;
            let neg_norm = 1.0 / neg_n.max(1) as f64;
            for n in 0..m {
                for j in 0..m {
                    let c = if gt.s.at(n, j) > gt.beta { pos_norm } else { neg_norm };
                    w.set(n, j, c * (sigmoid(logits.at(n, j)) - gt.s.at(n, j)) / tau);
                }
            }
        }
    }
    Ok(w)
}

/// Closed-form loss gradient w.r.t. the image representation u_n
/// (post-normalization): sum_j W_nj v_j.
pub fn analytic_grad_u(
    kind: LossKind,
    n: usize,
    u: &Tensor,
    v: &Tensor,
    gt: &GtSimilarity,
    tau: f64,
) -> Result<Vec<f64>> {
    if n >= u.rows() {
        return Err(Error::InvalidArgument(format!("row {n} out of batch {}", u.rows())));
    }
    let w = anchor_weights(kind, u, v, gt, tau)?;
    let d = v.cols();
    let mut grad = vec![0.0; d];
    for j in 0..v.rows() {
        let wj = w.at(n, j);
        for (g, &vj) in grad.iter_mut().zip(v.row(j)) {
            *g += wj * vj;
        }
    }
    Ok(grad)
}

// ── graph builders ───────────────────────────────────────────────────

/// Row- and column-softmax probability nodes.
pub fn build_probability_matrices(g: &mut Graph, logits: NodeId) -> (NodeId, NodeId) {
    let p_v = g.row_softmax(logits);
    let lt = g.transpose(logits);
    let p_t_t = g.row_softmax(lt);
    let p_t = g.transpose(p_t_t);
    (p_v, p_t)
}

fn build_bce_cells(g: &mut Graph, logits: NodeId, s: NodeId, m: usize) -> NodeId {
    // softplus(-x) + (1 - y) x
    let neg_x = g.mul_scalar(logits, -1.0);
    let sp = g.softplus(neg_x);
    let ones = g.constant(Tensor::filled(m, m, 1.0));
    let one_minus_y = g.sub(ones, s);
    let linear = g.mul(one_minus_y, logits);
    g.add(sp, linear)
}

/// Scalar loss node over square logits (and ground-truth similarity node for
/// the similarity-aware kinds; NCE ignores it).
pub fn build_loss(
    g: &mut Graph,
    kind: LossKind,
    logits: NodeId,
    s: NodeId,
    m: usize,
    beta: f64,
) -> NodeId {
    match kind {
        LossKind::Nce => {
            let (p_v, p_t) = build_probability_matrices(g, logits);
            let lv = g.ln(p_v);
            let lt = g.ln(p_t);
            let sum = g.add(lv, lt);
            let eye = g.constant(Tensor::eye(m));
            let diag = g.mul(sum, eye);
            let total = g.sum_all(diag);
            g.mul_scalar(total, -1.0 / m as f64)
        }
        LossKind::Ence => {
            let (p_v, p_t) = build_probability_matrices(g, logits);
            let lv = g.ln(p_v);
            let lt = g.ln(p_t);
            let sum = g.add(lv, lt);
            let weighted = g.mul(s, sum);
            let total = g.sum_all(weighted);
            g.mul_scalar(total, -1.0 / m as f64)
        }
        LossKind::Bce => {
            let cells = build_bce_cells(g, logits, s, m);
            let total = g.sum_all(cells);
            g.mul_scalar(total, 1.0 / m as f64)
        }
        LossKind::Wbce => {
            let cells = build_bce_cells(g, logits, s, m);
            let mask_pos = g.gt_scalar_mask(s, beta);
            let ones = g.constant(Tensor::filled(m, m, 1.0));
            let mask_neg = g.sub(ones, mask_pos);
            let pos_cells = g.mul(mask_pos, cells);
            let neg_cells = g.mul(mask_neg, cells);
            let pos_sum = g.sum_all(pos_cells);
            let neg_sum = g.sum_all(neg_cells);
            let n_pos_raw = g.sum_all(mask_pos);
            let n_neg_raw = g.sum_all(mask_neg);
            let n_pos = g.clamp_min(n_pos_raw, 1.0);
            let n_neg = g.clamp_min(n_neg_raw, 1.0);
            let pos_term = g.div(pos_sum, n_pos);
            let neg_term = g.div(neg_sum, n_neg);
            g.add(pos_term, neg_term)
        }
    }
}

/// Anchor-weight matrix node W (m x m). The gradient w.r.t. the normalized
/// image embeddings is W @ V and w.r.t. the text embeddings is W^T @ U.
pub fn build_anchor_weights(
    g: &mut Graph,
    kind: LossKind,
    logits: NodeId,
    s: NodeId,
    m: usize,
    tau: f64,
    beta: f64,
) -> NodeId {
    let scale = 1.0 / (m as f64 * tau);
    match kind {
        LossKind::Nce => {
            let (p_v, p_t) = build_probability_matrices(g, logits);
            let sum = g.add(p_v, p_t);
            let eye = g.constant(Tensor::eye(m));
            let two_eye = g.mul_scalar(eye, 2.0);
            let w = g.sub(sum, two_eye);
            g.mul_scalar(w, scale)
        }
        LossKind::Ence => {
            let (p_v, p_t) = build_probability_matrices(g, logits);
            let row_marginal = g.row_sum(s);
            let col_marginal = g.col_sum(s);
            let row_diag = g.diag_embed(row_marginal);
            let col_t = g.transpose(col_marginal);
            let col_diag = g.diag_embed(col_t);
            let left = g.matmul(row_diag, p_v);
            let right = g.matmul(p_t, col_diag);
            let sum = g.add(left, right);
            let two_s = g.mul_scalar(s, 2.0);
            let w = g.sub(sum, two_s);
            g.mul_scalar(w, scale)
        }
        LossKind::Bce => {
            let sig = g.sigmoid(logits);
            let w = g.sub(sig, s);
            g.mul_scalar(w, scale)
        }
        LossKind::Wbce => {
            let mask_pos = g.gt_scalar_mask(s, beta);
            let ones = g.constant(Tensor::filled(m, m, 1.0));
            let mask_neg = g.sub(ones, mask_pos);
            let n_pos_raw = g.sum_all(mask_pos);
            let n_neg_raw = g.sum_all(mask_neg);
            let n_pos = g.clamp_min(n_pos_raw, 1.0);
            let n_neg = g.clamp_min(n_neg_raw, 1.0);
            let inv_pos = g.pow_scalar(n_pos, -1.0);
            let inv_neg = g.pow_scalar(n_neg, -1.0);
            let c_pos = g.scalar_mul(inv_pos, mask_pos);
            let c_neg = g.scalar_mul(inv_neg, mask_neg);
            let c = g.add(c_pos, c_neg);
            let sig = g.sigmoid(logits);
            let diff = g.sub(sig, s);
            let w = g.mul(c, diff);
            g.mul_scalar(w, 1.0 / tau)
        }
    }
}
