//! Credible-group selection over a previous step's predictions, and
//! chain-based pairing between adjacent prediction snapshots.
//!
//! A step trusts the samples that are simultaneously low-entropy and close
//! (in cosine) to some class prototype built from the support predictions.
//! Each sample is then paired with a trusted sample by hopping through
//! prediction space: repeatedly move to the cosine-nearest unvisited
//! prediction until the first hop that lands inside the trusted group.
//!
//! Everything here is a pure function of its inputs; all ranking ties break
//! toward the lower sample index so results are storage-order reproducible.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One step's class-probability vectors for all m episode samples, row i
/// belonging to episode sample i (support first, then query).
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    preds: Tensor,
    step_index: usize,
}

impl PredictionSet {
    /// Validates that every row is a probability vector (sum within 1e-9).
    pub fn new(preds: Tensor, step_index: usize) -> Result<Self> {
        if preds.shape().len() != 2 || preds.cols() == 0 {
            return Err(Error::contract("predictions must form an m×N matrix"));
        }
        for i in 0..preds.rows() {
            let row = preds.row(i);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&p| p < -1e-12) {
                return Err(Error::contract(format!(
                    "prediction row {i} is not a distribution (sum {sum})"
                )));
            }
        }
        Ok(PredictionSet { preds, step_index })
    }

    pub fn len(&self) -> usize {
        self.preds.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.preds.rows() == 0
    }

    pub fn way_count(&self) -> usize {
        self.preds.cols()
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.preds.row(i)
    }

    pub fn matrix(&self) -> &Tensor {
        &self.preds
    }
}

/// Trusted subset of a step's samples with their snapshotted predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct CredibleGroup {
    /// Ascending sample indices.
    members: Vec<usize>,
    /// Snapshot of each member's previous-step prediction, row-aligned
    /// with `members`.
    snapshot: Tensor,
    /// True when the two selections did not overlap and the entropy
    /// selection was used alone.
    pub used_fallback: bool,
}

impl CredibleGroup {
    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn contains(&self, i: usize) -> bool {
        self.members.binary_search(&i).is_ok()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn snapshot(&self) -> &Tensor {
        &self.snapshot
    }
}

/// Pairing of every sample with a trusted partner: `(i, j)` where `i` runs
/// over all m samples exactly once and `j` is always a group member.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSet {
    pub pairs: Vec<(usize, usize)>,
}

/// Cosine similarity. Errors on a zero-norm input.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine_sim",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na <= 0.0 || nb <= 0.0 {
        return Err(Error::contract("cosine similarity of a zero-norm vector"));
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// Natural-log entropy of a probability vector; zero entries contribute 0.
pub fn entropy(p: &[f64]) -> Result<f64> {
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || p.iter().any(|&v| v < -1e-12) {
        return Err(Error::contract(format!(
            "entropy input is not a distribution (sum {sum})"
        )));
    }
    Ok(p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.ln())
        .sum())
}

/// Number of samples a fraction keeps: `max(1, floor(frac·m))`.
fn keep_count(frac: f64, m: usize) -> usize {
    ((frac * m as f64).floor() as usize).max(1)
}

/// Indices selected by a score, ascending or descending, ties toward the
/// lower index; the result is returned in ascending index order.
fn select_by_score(scores: &[f64], keep: usize, descending: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let cmp = scores[a].partial_cmp(&scores[b]).expect("finite scores");
        let cmp = if descending { cmp.reverse() } else { cmp };
        cmp.then(a.cmp(&b))
    });
    let mut picked: Vec<usize> = order.into_iter().take(keep).collect();
    picked.sort_unstable();
    picked
}

/// The `max(1, floor(alpha·m))` lowest-entropy samples.
pub fn entropy_group(prev: &PredictionSet, alpha: f64) -> Result<Vec<usize>> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::config(format!(
            "alpha must lie in (0, 1], got {alpha}"
        )));
    }
    let entropies: Vec<f64> = (0..prev.len())
        .map(|i| entropy(prev.row(i)))
        .collect::<Result<_>>()?;
    Ok(select_by_score(
        &entropies,
        keep_count(alpha, prev.len()),
        false,
    ))
}

/// Per-class prototypes: the mean of each class's support predictions.
/// `support_labels[i]` labels support prediction row i.
pub fn prototype_centers(
    support_preds: &Tensor,
    support_labels: &[usize],
    way_count: usize,
) -> Result<Tensor> {
    if support_preds.rows() != support_labels.len() {
        return Err(Error::contract(
            "support predictions and labels have different lengths",
        ));
    }
    let n = support_preds.cols();
    let mut centers = vec![0.0; way_count * n];
    let mut counts = vec![0usize; way_count];
    for (i, &label) in support_labels.iter().enumerate() {
        if label >= way_count {
            return Err(Error::contract(format!(
                "support label {label} outside [0, {way_count})"
            )));
        }
        for (c, &p) in support_preds.row(i).iter().enumerate() {
            centers[label * n + c] += p;
        }
        counts[label] += 1;
    }
    for (class, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(Error::contract(format!(
                "class {class} has no support predictions"
            )));
        }
        for c in 0..n {
            centers[class * n + c] /= count as f64;
        }
    }
    Tensor::from_vec(vec![way_count, n], centers)
}

/// The `max(1, floor(gamma·m))` samples whose best prototype cosine
/// similarity is highest.
pub fn prototype_group(
    prev: &PredictionSet,
    centers: &Tensor,
    gamma: f64,
) -> Result<Vec<usize>> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::config(format!(
            "gamma must lie in (0, 1], got {gamma}"
        )));
    }
    let mut scores = Vec::with_capacity(prev.len());
    for i in 0..prev.len() {
        let mut best = f64::NEG_INFINITY;
        for c in 0..centers.rows() {
            best = best.max(cosine_sim(prev.row(i), centers.row(c))?);
        }
        scores.push(best);
    }
    Ok(select_by_score(
        &scores,
        keep_count(gamma, prev.len()),
        true,
    ))
}

/// Intersection of the entropy and prototype selections; when they do not
/// overlap, the entropy selection is used alone and flagged.
pub fn credible_group(
    prev: &PredictionSet,
    alpha: f64,
    gamma: f64,
    support_preds: &Tensor,
    support_labels: &[usize],
    way_count: usize,
) -> Result<CredibleGroup> {
    let g_en = entropy_group(prev, alpha)?;
    let centers = prototype_centers(support_preds, support_labels, way_count)?;
    let g_pro = prototype_group(prev, &centers, gamma)?;
    Ok(intersect_groups(prev, &g_en, &g_pro))
}

/// Group from precomputed selections; exposed so single-criterion variants
/// can pass the same selection twice.
pub fn intersect_groups(prev: &PredictionSet, g_en: &[usize], g_pro: &[usize]) -> CredibleGroup {
    let pro: std::collections::HashSet<usize> = g_pro.iter().copied().collect();
    let mut members: Vec<usize> = g_en.iter().copied().filter(|i| pro.contains(i)).collect();
    let used_fallback = members.is_empty();
    if used_fallback {
        members = g_en.to_vec();
    }
    group_from_members(prev, members, used_fallback)
}

/// Group directly from member indices (for the single-selection variants).
pub fn group_from_members(
    prev: &PredictionSet,
    members: Vec<usize>,
    used_fallback: bool,
) -> CredibleGroup {
    let n = prev.way_count();
    let mut snapshot = Vec::with_capacity(members.len() * n);
    for &i in &members {
        snapshot.extend_from_slice(prev.row(i));
    }
    CredibleGroup {
        snapshot: Tensor::from_vec(vec![members.len(), n], snapshot).expect("snapshot shape"),
        members,
        used_fallback,
    }
}

/// Pair sample `i` with a trusted sample by nearest-neighbor hopping.
///
/// Starting from `i` (which counts as visited), repeatedly hop to the
/// cosine-nearest unvisited prediction among all m; the first hop that
/// lands in the group is the partner. If every node is exhausted first,
/// the partner is the group member most similar to `p_i` itself. At most
/// m hops happen either way.
pub fn chain_search(i: usize, prev: &PredictionSet, group: &CredibleGroup) -> Result<usize> {
    if group.is_empty() {
        return Err(Error::contract("chain search needs a nonempty group"));
    }
    if i >= prev.len() {
        return Err(Error::contract(format!(
            "chain start {i} outside [0, {})",
            prev.len()
        )));
    }
    let m = prev.len();
    let mut visited = vec![false; m];
    visited[i] = true;
    let mut current = i;
    for _ in 0..m {
        let mut next: Option<(usize, f64)> = None;
        for j in 0..m {
            if visited[j] {
                continue;
            }
            let sim = cosine_sim(prev.row(current), prev.row(j))?;
            let better = match next {
                None => true,
                Some((_, best)) => sim > best,
            };
            if better {
                next = Some((j, sim));
            }
        }
        match next {
            Some((j, _)) => {
                if group.contains(j) {
                    return Ok(j);
                }
                visited[j] = true;
                current = j;
            }
            None => break,
        }
    }
    // exhausted without touching the group: fall back to the member most
    // similar to the starting prediction
    let mut best = (group.members()[0], f64::NEG_INFINITY);
    for &j in group.members() {
        let sim = cosine_sim(prev.row(i), prev.row(j))?;
        if sim > best.1 {
            best = (j, sim);
        }
    }
    Ok(best.0)
}

/// One chain-search partner for every sample.
pub fn pair_all(
    curr: &PredictionSet,
    prev: &PredictionSet,
    group: &CredibleGroup,
) -> Result<PairSet> {
    if curr.len() != prev.len() || curr.way_count() != prev.way_count() {
        return Err(Error::contract(
            "adjacent prediction sets must have identical shape",
        ));
    }
    let pairs = (0..prev.len())
        .map(|i| chain_search(i, prev, group).map(|j| (i, j)))
        .collect::<Result<Vec<_>>>()?;
    Ok(PairSet { pairs })
}
