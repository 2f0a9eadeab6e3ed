//! Diagnostics over learned similarity matrices: duplicate-probe histograms,
//! diagonal/residual decomposition views, and singular-value spectra.
//!
//! Spectra use singular values rather than eigenvalues: the learned
//! similarity is generally non-symmetric, so eigenvalues may be complex,
//! while singular values preserve the low-rank property being tested.

use crate::data::{build_duplicate_probe, EmbeddingPairDataset};
use crate::distill::{
    run_distillation_from, DistillConfig, MatchRecord, Provenance, SyntheticDataset, SyntheticInit,
};
use crate::error::{Error, Result};
use crate::expert::TrajectoryStore;
use crate::lors::{init_lors, FullSimParams, LorsParams, SimKind, SimParams};
use crate::tensor::Tensor;
use crate::train::derive_seed;

/// Singular values of a real matrix by one-sided Jacobi, descending.
#[allow(clippy::needless_range_loop)]
pub fn singular_values(a: &Tensor) -> Vec<f64> {
    let (m, n) = (a.rows(), a.cols());
    // Work on the orientation with fewer columns.
    let work = if m >= n { a.clone() } else { a.transpose() };
    let (rows, cols) = (work.rows(), work.cols());
    let mut c: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..rows).map(|i| work.at(i, j)).collect())
        .collect();

    let tol = 1e-14;
    for _sweep in 0..100 {
        let mut converged = true;
        for p in 0..cols.saturating_sub(1) {
            for q in p + 1..cols {
                let alpha: f64 = c[p].iter().map(|v| v * v).sum();
                let beta: f64 = c[q].iter().map(|v| v * v).sum();
                let gamma: f64 = c[p].iter().zip(&c[q]).map(|(x, y)| x * y).sum();
                if gamma.abs() <= tol * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                converged = false;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for i in 0..rows {
                    let vp = c[p][i];
                    let vq = c[q][i];
                    c[p][i] = cs * vp - sn * vq;
                    c[q][i] = sn * vp + cs * vq;
                }
            }
        }
        if converged {
            break;
        }
    }
    let mut sigma: Vec<f64> = c
        .iter()
        .map(|col| col.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    sigma.sort_by(|a, b| b.partial_cmp(a).expect("finite singular values"));
    sigma
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SpectrumReport {
    pub singular_values: Vec<f64>,
    pub numerical_rank: usize,
    pub threshold_factor: f64,
}

/// Full singular-value spectrum with a numerical-rank estimate: the count of
/// values above threshold_factor times the largest.
pub fn spectrum(matrix: &Tensor, threshold_factor: f64) -> Result<SpectrumReport> {
    if !matrix.all_finite() {
        return Err(Error::Numeric("spectrum of a matrix with non-finite entries".into()));
    }
    let singular_values = singular_values(matrix);
    let sigma_max = singular_values.first().copied().unwrap_or(0.0);
    let numerical_rank = singular_values
        .iter()
        .filter(|&&s| s > threshold_factor * sigma_max && s > 0.0)
        .count();
    Ok(SpectrumReport { singular_values, numerical_rank, threshold_factor })
}

/// Diagonal vector and residual matrix of a factorization; adding
/// diag(omega) to the residual reproduces the composed matrix exactly.
pub fn decompose_view(p: &LorsParams) -> (Tensor, Tensor) {
    let n = p.omega.rows();
    let scale = p.alpha / p.rank as f64;
    let mut residual = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = p.l.row(i).iter().zip(p.r.row(j)).map(|(&x, &y)| x * y).sum();
            residual.set(i, j, scale * dot);
        }
    }
    (p.omega.clone(), residual)
}

/// Normalized per-group histogram of the composed similarity values over the
/// three duplicate-probe cell groups.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SimHistogram {
    pub edges: Vec<f64>,
    pub true_positive: Vec<f64>,
    pub false_negative: Vec<f64>,
    pub true_negative: Vec<f64>,
    /// Group means in the order (true positive, false negative, true negative).
    pub means: [f64; 3],
    pub cell_counts: [usize; 3],
}

pub fn similarity_histogram(
    s: &Tensor,
    false_negative_cells: &[(usize, usize)],
    bins: usize,
) -> Result<SimHistogram> {
    if bins == 0 {
        return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
    }
    let n = s.rows();
    let mut is_fn = vec![false; n * n];
    for &(i, j) in false_negative_cells {
        if i >= n || j >= n || i == j {
            return Err(Error::InvalidArgument(format!(
                "false-negative cell ({i},{j}) invalid for N={n}"
            )));
        }
        is_fn[i * n + j] = true;
    }

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in s.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|b| lo + b as f64 * width).collect();

    let mut counts = [vec![0usize; bins], vec![0usize; bins], vec![0usize; bins]];
    let mut sums = [0.0f64; 3];
    let mut totals = [0usize; 3];
    for i in 0..n {
        for j in 0..n {
            let v = s.at(i, j);
            let group = if i == j {
                0
            } else if is_fn[i * n + j] {
                1
            } else {
                2
            };
            let bin = (((v - lo) / width) as usize).min(bins - 1);
            counts[group][bin] += 1;
            sums[group] += v;
            totals[group] += 1;
        }
    }
    let normalize = |c: &[usize], total: usize| -> Vec<f64> {
        if total == 0 {
            vec![0.0; c.len()]
        } else {
            c.iter().map(|&v| v as f64 / total as f64).collect()
        }
    };
    let mean = |g: usize| if totals[g] == 0 { 0.0 } else { sums[g] / totals[g] as f64 };
    Ok(SimHistogram {
        edges,
        true_positive: normalize(&counts[0], totals[0]),
        false_negative: normalize(&counts[1], totals[1]),
        true_negative: normalize(&counts[2], totals[2]),
        means: [mean(0), mean(1), mean(2)],
        cell_counts: totals,
    })
}

/// Everything the duplicate probe produces: the distilled artifact, its loss
/// trace, and the per-group histogram of the learned similarity.
#[derive(Debug, Clone)]
pub struct ProbeOutcome {
    pub histogram: SimHistogram,
    pub synthetic: SyntheticDataset,
    pub records: Vec<MatchRecord>,
    pub false_negative_cells: Vec<(usize, usize)>,
}

/// Duplicate-probe experiment: initialize 2*dup synthetic pairs from dup
/// real pairs and their adjacent replicates, distill against the store, and
/// histogram the composed similarity per cell group.
#[allow(clippy::too_many_arguments)]
pub fn false_negative_probe(
    real: &EmbeddingPairDataset,
    store: &TrajectoryStore,
    dup: usize,
    sim_kind: SimKind,
    rank: usize,
    alpha: f64,
    initial_inner_lr: f64,
    cfg: &DistillConfig,
    bins: usize,
) -> Result<ProbeOutcome> {
    if 2 * dup > real.len() {
        // The probe replaces sampling: it needs dup sources, and the
        // resulting synthetic size is 2*dup.
        return Err(Error::InvalidArgument(format!(
            "dup {dup} too large for dataset of {}",
            real.len()
        )));
    }
    let probe = build_duplicate_probe(real, dup, derive_seed(cfg.seed, "probe"))?;
    let n = probe.dataset.len();
    let sim = match sim_kind {
        SimKind::Identity => SimParams::Identity,
        SimKind::Lors => SimParams::Lors(init_lors(n, rank, alpha, derive_seed(cfg.seed, "probe-lors"))?),
        SimKind::Full => SimParams::Full(FullSimParams { s: Tensor::eye(n) }),
    };
    let init = SyntheticDataset {
        x: probe.dataset.x.clone(),
        y: probe.dataset.y.clone(),
        sim,
        inner_lr: initial_inner_lr,
        provenance: Provenance {
            init_indices: probe
                .source_indices
                .iter()
                .flat_map(|&i| [i, i])
                .collect(),
            config_digest: cfg.digest(&SyntheticInit {
                pairs: n,
                sim: sim_kind,
                rank,
                alpha,
                initial_inner_lr,
            }),
            spec_v: store.spec_v().clone(),
            spec_t: store.spec_t().clone(),
            tau: store.tau(),
        },
    };
    let (synthetic, records) = run_distillation_from(init, store, cfg)?;
    let composed = synthetic.compose_similarity()?;
    let histogram = similarity_histogram(&composed, &probe.false_negative_cells, bins)?;
    Ok(ProbeOutcome {
        histogram,
        synthetic,
        records,
        false_negative_cells: probe.false_negative_cells,
    })
}
