//! Mutual-information and balance losses on paired prediction snapshots,
//! plus the supervised cross-entropy for the classifier phase.
//!
//! The pairwise joint is the symmetrized average outer product of each
//! pair's two prediction vectors. Each loss exists twice: a plain numeric
//! evaluation for reporting, and a tape builder whose current-step
//! predictions stay differentiable so gradient can reach the prompt (or,
//! in the prompt-free variant, the classifier). Natural log throughout;
//! zero-probability terms contribute zero.

use crate::align::{PairSet, PredictionSet};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gather the two sides of every pair into aligned matrices: row k holds
/// pair k's current-step prediction (left) and its trusted previous-step
/// partner (right).
pub fn paired_matrices(
    curr: &PredictionSet,
    prev: &PredictionSet,
    pairs: &PairSet,
) -> Result<(Tensor, Tensor)> {
    if pairs.pairs.is_empty() {
        return Err(Error::contract("pair set is empty"));
    }
    let n = curr.way_count();
    let mut left = Vec::with_capacity(pairs.pairs.len() * n);
    let mut right = Vec::with_capacity(pairs.pairs.len() * n);
    for &(i, j) in &pairs.pairs {
        left.extend_from_slice(curr.row(i));
        right.extend_from_slice(prev.row(j));
    }
    Ok((
        Tensor::from_vec(vec![pairs.pairs.len(), n], left)?,
        Tensor::from_vec(vec![pairs.pairs.len(), n], right)?,
    ))
}

/// Symmetrized joint class distribution over pairs:
/// `P = (1/|pairs|) Σ p ⊗ p'`, then `(P + Pᵀ)/2`.
pub fn joint_distribution(left: &Tensor, right: &Tensor) -> Result<Tensor> {
    if left.shape() != right.shape() || left.rows() == 0 {
        return Err(Error::contract(
            "joint distribution needs equal-shape nonempty pair matrices",
        ));
    }
    let (m, n) = (left.rows(), left.cols());
    let mut joint = vec![0.0; n * n];
    for k in 0..m {
        let (l, r) = (left.row(k), right.row(k));
        for a in 0..n {
            for b in 0..n {
                joint[a * n + b] += l[a] * r[b];
            }
        }
    }
    let scale = 1.0 / m as f64;
    let mut sym = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            sym[a * n + b] = 0.5 * (joint[a * n + b] + joint[b * n + a]) * scale;
        }
    }
    Tensor::from_vec(vec![n, n], sym)
}

/// Negative mutual information of a joint matrix:
/// `−Σ P_ab ln(P_ab / (P_a· P_·b))`, in `[−ln N, 0]`.
pub fn mi_loss_of_joint(joint: &Tensor) -> f64 {
    let n = joint.rows();
    let mut row_m = vec![0.0; n];
    let mut col_m = vec![0.0; n];
    for a in 0..n {
        for b in 0..n {
            row_m[a] += joint.data()[a * n + b];
            col_m[b] += joint.data()[a * n + b];
        }
    }
    let mut info = 0.0;
    for a in 0..n {
        for b in 0..n {
            let p = joint.data()[a * n + b];
            if p > 0.0 {
                info += p * (p / (row_m[a] * col_m[b])).ln();
            }
        }
    }
    -info
}

/// Numeric pairwise-alignment loss (negative mutual information).
pub fn mutual_information_loss(
    curr: &PredictionSet,
    prev: &PredictionSet,
    pairs: &PairSet,
) -> Result<f64> {
    let (left, right) = paired_matrices(curr, prev, pairs)?;
    Ok(mi_loss_of_joint(&joint_distribution(&left, &right)?))
}

/// KL divergence of the mean prediction from uniform:
/// `Σ_n p̄_n ln(N·p̄_n)` with `p̄ = column mean`. Zero iff balanced.
pub fn kl_diversity_loss(preds: &PredictionSet) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::contract("diversity loss needs at least one sample"));
    }
    let (m, n) = (preds.len(), preds.way_count());
    let mut marginal = vec![0.0; n];
    for i in 0..m {
        for (c, &p) in preds.row(i).iter().enumerate() {
            marginal[c] += p;
        }
    }
    let mut kl = 0.0;
    for v in marginal.iter_mut() {
        *v /= m as f64;
        if *v > 0.0 {
            kl += *v * (n as f64 * *v).ln();
        }
    }
    Ok(kl)
}

/// Combined alignment objective: `L_MI + sigma·L_KL`, with switches for the
/// single-loss variants (`use_mi` off drops the first term).
pub fn external_loss(
    curr: &PredictionSet,
    prev: &PredictionSet,
    pairs: &PairSet,
    sigma: f64,
    use_mi: bool,
) -> Result<f64> {
    let mi = if use_mi {
        mutual_information_loss(curr, prev, pairs)?
    } else {
        0.0
    };
    Ok(mi + sigma * kl_diversity_loss(curr)?)
}

/// Summed support cross-entropy: `−Σ_i ln p_{i, y_i}`, probabilities
/// clamped at 1e-12 inside the log.
pub fn cross_entropy_loss(preds: &Tensor, labels: &[usize]) -> Result<f64> {
    if preds.rows() != labels.len() {
        return Err(Error::contract(
            "prediction rows and label count differ",
        ));
    }
    let n = preds.cols();
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= n {
            return Err(Error::contract(format!("label {y} outside [0, {n})")));
        }
        total -= preds.row(i)[y].max(1e-12).ln();
    }
    Ok(total)
}

// ── tape builders ──────────────────────────────────────────────────────

/// Record the symmetrized joint on the tape. `curr` is the differentiable
/// `[pairs, N]` matrix of current predictions in pair order; `prev_paired`
/// holds the matching trusted snapshots and enters as a constant.
pub fn tape_joint(tape: &mut Tape, curr: Var, prev_paired: &Tensor) -> Result<Var> {
    let m = prev_paired.rows();
    let prev_c = tape.constant(prev_paired.clone());
    let curr_t = tape.transpose(curr)?;
    let outer_sum = tape.matmul(curr_t, prev_c)?; // [N, N]
    let joint = tape.scale(outer_sum, 1.0 / m as f64)?;
    let joint_t = tape.transpose(joint)?;
    let sum = tape.add(joint, joint_t)?;
    tape.scale(sum, 0.5)
}

/// Negative mutual information of a tape-resident joint matrix.
pub fn tape_mi_loss(tape: &mut Tape, joint: Var) -> Result<Var> {
    let n = tape.value(joint).rows();
    let ones_col = tape.constant(Tensor::filled(&[n, 1], 1.0));
    let ones_row = tape.constant(Tensor::filled(&[1, n], 1.0));
    let row_m = tape.matmul(joint, ones_col)?; // [N, 1]
    let col_m = tape.matmul(ones_row, joint)?; // [1, N]
    let outer = tape.matmul(row_m, col_m)?; // [N, N] product of marginals
    let log_j = tape.log(joint)?;
    let log_o = tape.log(outer)?;
    let diff = tape.sub(log_j, log_o)?;
    let weighted = tape.mul(joint, diff)?;
    let info = tape.sum(weighted)?;
    tape.neg(info)
}

/// KL of the mean prediction from uniform, on the tape. `preds` is the
/// differentiable `[m, N]` prediction matrix.
pub fn tape_kl_loss(tape: &mut Tape, preds: Var) -> Result<Var> {
    let (m, n) = {
        let t = tape.value(preds);
        (t.rows(), t.cols())
    };
    let ones = tape.constant(Tensor::filled(&[1, m], 1.0));
    let col_sum = tape.matmul(ones, preds)?; // [1, N]
    let marginal = tape.scale(col_sum, 1.0 / m as f64)?;
    let scaled = tape.scale(marginal, n as f64)?;
    let log_term = tape.log(scaled)?;
    let weighted = tape.mul(marginal, log_term)?;
    tape.sum(weighted)
}

/// Combined external objective on the tape. `curr_all` is the full `[m, N]`
/// differentiable prediction matrix; `curr_paired` is the same predictions
/// re-ordered per pair (built by the caller from `curr_all` rows, usually
/// identical because every sample pairs exactly once in index order).
pub fn tape_external_loss(
    tape: &mut Tape,
    curr_all: Var,
    curr_paired: Var,
    prev_paired: &Tensor,
    sigma: f64,
    use_mi: bool,
) -> Result<Var> {
    let kl = tape_kl_loss(tape, curr_all)?;
    let kl_term = tape.scale(kl, sigma)?;
    if use_mi {
        let joint = tape_joint(tape, curr_paired, prev_paired)?;
        let mi = tape_mi_loss(tape, joint)?;
        tape.add(mi, kl_term)
    } else {
        Ok(kl_term)
    }
}

/// Summed support cross-entropy on the tape via a one-hot mask.
pub fn tape_cross_entropy(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let (rows, n) = {
        let t = tape.value(probs);
        (t.rows(), t.cols())
    };
    if rows != labels.len() {
        return Err(Error::contract(
            "prediction rows and label count differ",
        ));
    }
    let mut mask = vec![0.0; rows * n];
    for (i, &y) in labels.iter().enumerate() {
        if y >= n {
            return Err(Error::contract(format!("label {y} outside [0, {n})")));
        }
        mask[i * n + y] = 1.0;
    }
    let mask = tape.constant(Tensor::from_vec(vec![rows, n], mask)?);
    let lp = tape.log(probs)?;
    let picked = tape.mul(mask, lp)?;
    let total = tape.sum(picked)?;
    tape.neg(total)
}
