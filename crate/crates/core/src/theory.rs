//! Numeric diagnostics for the gradual-alignment analysis: target-error
//! bounds for single-step and step-wise adaptation, the frequency-domain
//! contraction factor of the step recursion, and empirical bottleneck
//! (Wasserstein-∞) distances between prediction snapshots.

use crate::align::{cosine_sim, PredictionSet};
use crate::error::{Error, Result};
use crate::tensor::{argmax, Tensor};
use num_complex::Complex64;

/// Inputs of the step-wise bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundParams {
    /// Max per-step distribution distance (≥ 0).
    pub tau_m: f64,
    /// Inverse regularization strength (> 0).
    pub r: f64,
    /// Step count E (the recursion is applied E+1 times).
    pub steps_e: usize,
    /// Source-domain loss term (≥ 0).
    pub alpha0: f64,
    /// Unlabeled sample count (≥ 1).
    pub n: usize,
    /// Explicit constant for the order-1/√n term (≥ 0).
    pub c_order: f64,
}

fn check_finite(value: f64, name: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("{name} must be finite, got {value}")))
    }
}

/// Single-step adaptation bound:
/// `2/(1 − tau·r) · source_loss + alpha_star + c_order/√n`.
///
/// Only valid in the regime `tau·r < 1`.
pub fn theorem1_bound(
    tau: f64,
    r: f64,
    source_loss: f64,
    alpha_star: f64,
    n: usize,
    c_order: f64,
) -> Result<f64> {
    for (v, name) in [
        (tau, "tau"),
        (r, "r"),
        (source_loss, "source_loss"),
        (alpha_star, "alpha_star"),
        (c_order, "c_order"),
    ] {
        check_finite(v, name)?;
    }
    if tau < 0.0 || r <= 0.0 || n == 0 {
        return Err(Error::config(
            "single-step bound needs tau >= 0, r > 0, n >= 1",
        ));
    }
    if tau * r >= 1.0 {
        return Err(Error::Regime(format!(
            "single-step bound requires tau·r < 1, got {}",
            tau * r
        )));
    }
    Ok(2.0 / (1.0 - tau * r) * source_loss + alpha_star + c_order / (n as f64).sqrt())
}

/// Step-wise adaptation bound: the per-step factor `2/(1 − tau_m·r)` taken
/// in magnitude and applied E+1 times to the source term:
/// `|2/(1 − tau_m·r)|^(E+1) · (alpha0 + c_order/√n)`.
///
/// Singular at `tau_m·r = 1`. The factor itself is negative for
/// `tau_m·r > 1`; its magnitude is what the convergence argument bounds,
/// so the magnitude is what this returns.
pub fn theorem2_bound(p: &BoundParams) -> Result<f64> {
    for (v, name) in [
        (p.tau_m, "tau_m"),
        (p.r, "r"),
        (p.alpha0, "alpha0"),
        (p.c_order, "c_order"),
    ] {
        check_finite(v, name)?;
    }
    if p.tau_m < 0.0 || p.r <= 0.0 || p.n == 0 || p.alpha0 < 0.0 || p.c_order < 0.0 {
        return Err(Error::config(
            "step-wise bound needs tau_m >= 0, r > 0, n >= 1, alpha0 >= 0, c_order >= 0",
        ));
    }
    let tr = p.tau_m * p.r;
    if tr == 1.0 {
        return Err(Error::Regime(
            "step-wise bound is singular at tau_m·r = 1".into(),
        ));
    }
    let factor = (2.0 / (1.0 - tr)).abs();
    let base = p.alpha0 + p.c_order / (p.n as f64).sqrt();
    Ok(factor.powf((p.steps_e + 1) as f64) * base)
}

/// Frequency response magnitude of the step recursion:
/// `|2 / ((1 − tau_m·r) − 2·e^{−jω})|`.
pub fn contraction_factor(tau_m: f64, r: f64, omega_freq: f64) -> Result<f64> {
    check_finite(tau_m, "tau_m")?;
    check_finite(r, "r")?;
    check_finite(omega_freq, "omega_freq")?;
    let denom = Complex64::new(1.0 - tau_m * r, 0.0)
        - 2.0 * Complex64::new(0.0, -omega_freq).exp();
    let mag = denom.norm();
    if mag < 1e-12 {
        return Err(Error::Regime(format!(
            "contraction factor is singular at tau_m·r = {}, omega = {omega_freq}",
            tau_m * r
        )));
    }
    Ok(2.0 / mag)
}

/// Whether the geometric series behind the step-wise bound converges:
/// `|2·e^{−jω} / (1 − tau_m·r)| < 1`, independent of ω. For `tau_m·r > 1`
/// this holds exactly when `tau_m·r > 3`.
pub fn series_converges(tau_m: f64, r: f64) -> bool {
    let denom = (1.0 - tau_m * r).abs();
    2.0 < denom
}

// ── bottleneck distances ───────────────────────────────────────────────

/// Sorted-coupling bottleneck distance between two real samples of the
/// same size: sort both and take the largest aligned gap.
pub fn wasserstein_inf_1d(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(Error::contract(format!(
            "1-d bottleneck needs equal nonempty sizes, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let mut a = xs.to_vec();
    let mut b = ys.to_vec();
    a.sort_by(|x, y| x.partial_cmp(y).expect("finite values"));
    b.sort_by(|x, y| x.partial_cmp(y).expect("finite values"));
    Ok(a.iter()
        .zip(&b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max))
}

/// Ground metric for point-set distances.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Metric {
    Euclidean,
    /// `1 − cosine similarity`; errors on zero-norm points.
    Cosine,
}

impl Metric {
    fn cost(self, a: &[f64], b: &[f64]) -> Result<f64> {
        match self {
            Metric::Euclidean => Ok(a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()),
            Metric::Cosine => Ok(1.0 - cosine_sim(a, b)?),
        }
    }
}

/// Desk-scale cap on matching size.
pub const BOTTLENECK_CAP: usize = 64;

/// Minimum over perfect matchings of the maximum pairwise cost, for two
/// equal-size point sets given as row matrices. Solved by binary search
/// over the sorted distinct costs with a bipartite-matching feasibility
/// check, so the result is exactly one of the pairwise costs.
pub fn wasserstein_inf_bottleneck(x: &Tensor, y: &Tensor, metric: Metric) -> Result<f64> {
    if x.shape().len() != 2 || y.shape().len() != 2 {
        return Err(Error::contract("bottleneck distance needs row matrices"));
    }
    let n = x.rows();
    if n != y.rows() || x.cols() != y.cols() || n == 0 {
        return Err(Error::contract(format!(
            "bottleneck distance needs equal nonempty shapes, got {:?} and {:?}",
            x.shape(),
            y.shape()
        )));
    }
    if n > BOTTLENECK_CAP {
        return Err(Error::contract(format!(
            "bottleneck matching capped at {BOTTLENECK_CAP} points, got {n}"
        )));
    }

    let mut costs = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            costs[i * n + j] = metric.cost(x.row(i), y.row(j))?;
        }
    }
    let mut thresholds = costs.clone();
    thresholds.sort_by(|a, b| a.partial_cmp(b).expect("finite costs"));
    thresholds.dedup();

    let feasible = |t: f64| -> bool {
        // Kuhn's augmenting paths over edges with cost <= t
        let mut match_of_y = vec![usize::MAX; n];
        fn try_assign(
            i: usize,
            n: usize,
            t: f64,
            costs: &[f64],
            seen: &mut [bool],
            match_of_y: &mut [usize],
        ) -> bool {
            for j in 0..n {
                if costs[i * n + j] <= t && !seen[j] {
                    seen[j] = true;
                    if match_of_y[j] == usize::MAX
                        || try_assign(match_of_y[j], n, t, costs, seen, match_of_y)
                    {
                        match_of_y[j] = i;
                        return true;
                    }
                }
            }
            false
        }
        for i in 0..n {
            let mut seen = vec![false; n];
            if !try_assign(i, n, t, &costs, &mut seen, &mut match_of_y) {
                return false;
            }
        }
        true
    };

    let (mut lo, mut hi) = (0usize, thresholds.len() - 1);
    if !feasible(thresholds[hi]) {
        return Err(Error::contract(
            "no perfect matching even at the maximum cost",
        ));
    }
    while lo < hi {
        let mid = (lo + hi) / 2;
        if feasible(thresholds[mid]) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Ok(thresholds[lo])
}

/// Bottleneck shift between two prediction snapshots, partitioned by
/// pseudo-label.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftReport {
    /// Max over classes of the per-class bottleneck distance.
    pub value: f64,
    /// Classes that were empty on one side and therefore skipped.
    pub skipped_classes: Vec<usize>,
}

/// Max over pseudo-classes of the bottleneck distance between the two
/// snapshots' prediction vectors of that class.
///
/// Samples are partitioned by argmax prediction on each side separately;
/// the larger side of each class is subsampled (lowest indices first) to
/// the smaller count, and both sides are clamped to `per_class_cap` so the
/// matching stays within the desk-scale limit. Classes empty on either
/// side are skipped and flagged.
pub fn distribution_shift_capped(
    prev: &PredictionSet,
    curr: &PredictionSet,
    metric: Metric,
    per_class_cap: usize,
) -> Result<ShiftReport> {
    if prev.way_count() != curr.way_count() {
        return Err(Error::contract(
            "snapshots have different class counts",
        ));
    }
    let n = prev.way_count();
    let cap = per_class_cap.min(BOTTLENECK_CAP).max(1);
    let mut value: f64 = 0.0;
    let mut skipped = Vec::new();
    for class in 0..n {
        let rows_prev: Vec<usize> = (0..prev.len())
            .filter(|&i| argmax(prev.row(i)) == class)
            .collect();
        let rows_curr: Vec<usize> = (0..curr.len())
            .filter(|&i| argmax(curr.row(i)) == class)
            .collect();
        if rows_prev.is_empty() || rows_curr.is_empty() {
            skipped.push(class);
            continue;
        }
        let take = rows_prev.len().min(rows_curr.len()).min(cap);
        let gather = |set: &PredictionSet, rows: &[usize]| {
            let mut data = Vec::with_capacity(take * n);
            for &i in &rows[..take] {
                data.extend_from_slice(set.row(i));
            }
            Tensor::from_vec(vec![take, n], data)
        };
        let a = gather(prev, &rows_prev)?;
        let b = gather(curr, &rows_curr)?;
        value = value.max(wasserstein_inf_bottleneck(&a, &b, metric)?);
    }
    Ok(ShiftReport {
        value,
        skipped_classes: skipped,
    })
}

/// [`distribution_shift_capped`] at the full desk-scale cap.
pub fn distribution_shift(
    prev: &PredictionSet,
    curr: &PredictionSet,
    metric: Metric,
) -> Result<ShiftReport> {
    distribution_shift_capped(prev, curr, metric, BOTTLENECK_CAP)
}
