//! Dual-phase episodic tuner: a classifier phase (support cross-entropy)
//! and a prompt phase (group-paired alignment) interleaved over a fixed
//! step schedule, plus the ablation switchboard and post-hoc label
//! propagation over the prediction graph.

use crate::align::{
    credible_group, entropy_group, group_from_members, prototype_centers, prototype_group,
    CredibleGroup, PredictionSet,
};
use crate::autodiff::Tape;
use crate::data::{derive_seed, Episode};
use crate::error::{Error, Result};
use crate::loss::{cross_entropy_loss, paired_matrices, tape_cross_entropy, tape_external_loss};
use crate::model::{
    build_forward, compute_target_stats, predict, ForwardSpec, FrozenBackbone, LinearClassifier,
    StylePrompt, TargetStats,
};
use crate::optim::Sgd;
use crate::tensor::{argmax, Tensor};
use crate::theory::{distribution_shift_capped, Metric};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// How the tuning epochs are split into alignment steps.
///
/// Each of the `total_steps` steps runs `internal_epochs_per_step`
/// classifier epochs followed by one prompt update, so the classifier
/// sees `total_steps · internal_epochs_per_step` epochs overall.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub total_steps: usize,
    pub internal_epochs_per_step: usize,
    /// Support mini-batch size; 0 means the full support set.
    pub support_batch_size: usize,
}

impl StepSchedule {
    /// Splits `max_epochs` evenly across `total_steps` steps; the split
    /// must be exact.
    pub fn new(total_steps: usize, max_epochs: usize, support_batch_size: usize) -> Result<Self> {
        if total_steps == 0 || max_epochs == 0 {
            return Err(Error::config(
                "steps and max_epochs must both be at least 1",
            ));
        }
        if max_epochs % total_steps != 0 {
            return Err(Error::config(format!(
                "max_epochs ({max_epochs}) must be divisible by steps ({total_steps})"
            )));
        }
        Ok(StepSchedule {
            total_steps,
            internal_epochs_per_step: max_epochs / total_steps,
            support_batch_size,
        })
    }

    pub fn max_epochs(&self) -> usize {
        self.total_steps * self.internal_epochs_per_step
    }
}

/// Which part of the pipeline a run switches off; `Full` is the complete
/// method and `Baseline` is the classifier-only control.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    Full,
    /// Collapse the schedule to a single alignment step.
    NoStep,
    /// Drop the prompt; alignment gradients go to the classifier instead.
    NoStyle,
    EntropyGroupOnly,
    PrototypeGroupOnly,
    NoMi,
    NoKl,
    NoLabelPropagation,
    /// Classifier-only control: no prompt, no alignment, no propagation.
    Baseline,
}

impl AblationMode {
    pub const ALL: [AblationMode; 9] = [
        AblationMode::Full,
        AblationMode::NoStep,
        AblationMode::NoStyle,
        AblationMode::EntropyGroupOnly,
        AblationMode::PrototypeGroupOnly,
        AblationMode::NoMi,
        AblationMode::NoKl,
        AblationMode::NoLabelPropagation,
        AblationMode::Baseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::NoStep => "no_step",
            AblationMode::NoStyle => "no_style",
            AblationMode::EntropyGroupOnly => "entropy_group_only",
            AblationMode::PrototypeGroupOnly => "prototype_group_only",
            AblationMode::NoMi => "no_mi",
            AblationMode::NoKl => "no_kl",
            AblationMode::NoLabelPropagation => "no_label_propagation",
            AblationMode::Baseline => "baseline",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = AblationMode::ALL.iter().map(|m| m.name()).collect();
                Error::config(format!(
                    "unknown ablation mode `{s}`; expected one of: {}",
                    names.join(", ")
                ))
            })
    }
}

/// Which trusted-sample selection the prompt phase uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupRule {
    /// Entropy ∩ prototype selection, falling back to entropy alone.
    Intersection,
    EntropyOnly,
    PrototypeOnly,
}

/// A mode resolved into concrete switches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EffectiveSettings {
    pub schedule: StepSchedule,
    /// Standardize-and-modulate inputs before the backbone.
    pub use_prompt: bool,
    /// Run the alignment phase at all.
    pub run_external: bool,
    /// Alignment gradients update the classifier instead of the prompt.
    pub external_updates_classifier: bool,
    pub group_rule: GroupRule,
    pub use_mi: bool,
    pub sigma: f64,
    pub apply_lp: bool,
}

/// Resolve an ablation mode against the configured schedule and KL weight.
pub fn apply_ablation(mode: AblationMode, schedule: StepSchedule, sigma: f64) -> EffectiveSettings {
    let collapsed = StepSchedule {
        total_steps: 1,
        internal_epochs_per_step: schedule.max_epochs(),
        support_batch_size: schedule.support_batch_size,
    };
    let mut eff = EffectiveSettings {
        schedule,
        use_prompt: true,
        run_external: true,
        external_updates_classifier: false,
        group_rule: GroupRule::Intersection,
        use_mi: true,
        sigma,
        apply_lp: true,
    };
    match mode {
        AblationMode::Full => {}
        AblationMode::NoStep => eff.schedule = collapsed,
        AblationMode::NoStyle => {
            eff.use_prompt = false;
            eff.external_updates_classifier = true;
        }
        AblationMode::EntropyGroupOnly => eff.group_rule = GroupRule::EntropyOnly,
        AblationMode::PrototypeGroupOnly => eff.group_rule = GroupRule::PrototypeOnly,
        AblationMode::NoMi => eff.use_mi = false,
        AblationMode::NoKl => eff.sigma = 0.0,
        AblationMode::NoLabelPropagation => eff.apply_lp = false,
        AblationMode::Baseline => {
            eff.schedule = collapsed;
            eff.use_prompt = false;
            eff.run_external = false;
            eff.apply_lp = false;
        }
    }
    eff
}

/// Propagation-graph settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LpParams {
    pub neighbors: usize,
    /// Mix of propagated vs. anchored mass per iteration, in [0, 1].
    pub mixing: f64,
    pub iterations: usize,
}

impl LpParams {
    pub fn validate(&self) -> Result<()> {
        if self.neighbors == 0 {
            return Err(Error::config("lp_neighbors must be at least 1"));
        }
        if !(self.mixing.is_finite() && (0.0..=1.0).contains(&self.mixing)) {
            return Err(Error::config(format!(
                "lp_alpha must lie in [0, 1], got {}",
                self.mixing
            )));
        }
        Ok(())
    }
}

/// Everything the per-episode tuner needs besides the episode itself.
#[derive(Clone, Debug)]
pub struct TrainerParams {
    pub schedule: StepSchedule,
    pub mode: AblationMode,
    /// Entropy-selection keep fraction.
    pub alpha: f64,
    /// Prototype-selection keep fraction.
    pub gamma: f64,
    /// KL diversity weight.
    pub sigma: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Variance floor inside the prompt's standardization.
    pub epsilon: f64,
    pub lp: LpParams,
    /// Record the per-step prediction-distribution movement (costs one
    /// bottleneck matching per class per step).
    pub track_shift: bool,
    /// Per-class sample cap for that matching.
    pub shift_cap: usize,
}

impl TrainerParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config(format!(
                "alpha must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config(format!(
                "gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::config(format!(
                "sigma must be non-negative, got {}",
                self.sigma
            )));
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::config(format!(
                "epsilon must be non-negative, got {}",
                self.epsilon
            )));
        }
        self.lp.validate()?;
        // optimizer hyperparameters are validated when the groups are built
        Sgd::new(self.learning_rate, self.momentum, self.weight_decay).map(|_| ())
    }
}

/// One tuned episode: accuracies, loss traces, and the final parameters.
#[derive(Clone, Debug)]
pub struct EpisodeResult {
    /// Query accuracy of the tuned pipeline, in [0, 1].
    pub accuracy: f64,
    /// Query accuracy after propagation; equals `accuracy` when
    /// propagation is off.
    pub accuracy_lp: f64,
    /// Full-support cross-entropy after each classifier epoch.
    pub ce_trace: Vec<f64>,
    /// Alignment objective value at each step's prompt update.
    pub external_trace: Vec<f64>,
    /// Per-step prediction-distribution movement, when tracked.
    pub shift_trace: Vec<f64>,
    /// Steps whose trusted-group intersection was empty.
    pub fallback_steps: usize,
    /// Final prompt; `None` when the mode runs without one.
    pub prompt: Option<StylePrompt>,
    pub classifier: LinearClassifier,
}

fn prompt_view<'a>(
    on: bool,
    prompt: &'a StylePrompt,
    stats: &'a TargetStats,
) -> Option<(&'a StylePrompt, &'a TargetStats)> {
    if on {
        Some((prompt, stats))
    } else {
        None
    }
}

fn support_predictions(prev: &PredictionSet, support_count: usize) -> Result<Tensor> {
    let n = prev.way_count();
    let mut data = Vec::with_capacity(support_count * n);
    for i in 0..support_count {
        data.extend_from_slice(prev.row(i));
    }
    Tensor::from_vec(vec![support_count, n], data)
}

fn build_group(
    prev: &PredictionSet,
    episode: &Episode,
    rule: GroupRule,
    alpha: f64,
    gamma: f64,
) -> Result<CredibleGroup> {
    let support_preds = support_predictions(prev, episode.support_labels.len())?;
    match rule {
        GroupRule::Intersection => credible_group(
            prev,
            alpha,
            gamma,
            &support_preds,
            &episode.support_labels,
            episode.way_count,
        ),
        GroupRule::EntropyOnly => {
            let members = entropy_group(prev, alpha)?;
            Ok(group_from_members(prev, members, false))
        }
        GroupRule::PrototypeOnly => {
            let centers =
                prototype_centers(&support_preds, &episode.support_labels, episode.way_count)?;
            let members = prototype_group(prev, &centers, gamma)?;
            Ok(group_from_members(prev, members, false))
        }
    }
}

/// Classifier phase: mini-batch SGD on summed support cross-entropy for
/// `epochs` passes. The prompt and backbone enter as constants, so only
/// the classifier moves. Appends the full-support cross-entropy after
/// each epoch to `ce_trace`.
pub fn internal_phase(
    episode: &Episode,
    prompt: Option<(&StylePrompt, &TargetStats)>,
    backbone: &FrozenBackbone,
    clf: &mut LinearClassifier,
    epochs: usize,
    batch_size: usize,
    opt: &mut Sgd,
    rng: &mut ChaCha8Rng,
    ce_trace: &mut Vec<f64>,
) -> Result<()> {
    let support_count = episode.support_labels.len();
    let batch = if batch_size == 0 || batch_size > support_count {
        support_count
    } else {
        batch_size
    };
    let dim = episode.dim();

    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..support_count).collect();
        order.shuffle(rng);
        for chunk in order.chunks(batch) {
            let mut xs = Vec::with_capacity(chunk.len() * dim);
            let mut labels = Vec::with_capacity(chunk.len());
            for &row in chunk {
                xs.extend_from_slice(episode.support.row(row));
                labels.push(episode.support_labels[row]);
            }
            let x = Tensor::from_vec(vec![chunk.len(), dim], xs)?;

            let mut tape = Tape::new();
            let fv = build_forward(
                &mut tape,
                &x,
                &ForwardSpec {
                    prompt,
                    train_prompt: false,
                    backbone,
                    clf,
                    train_clf: true,
                },
            )?;
            let loss = tape_cross_entropy(&mut tape, fv.probs, &labels)?;
            let grads = tape.backward(loss)?;
            clf.weight.take_grad(&grads, fv.weight.expect("trainable head"))?;
            clf.bias.take_grad(&grads, fv.bias.expect("trainable head"))?;
            opt.step(&mut [&mut clf.weight, &mut clf.bias])?;
        }
        let preds = predict(&episode.support, prompt, backbone, clf)?;
        ce_trace.push(cross_entropy_loss(&preds, &episode.support_labels)?);
    }
    Ok(())
}

/// Prompt phase: pair every sample with a trusted partner from the
/// previous step's predictions, then take one full-batch SGD step of the
/// alignment objective on the prompt. The classifier and backbone enter
/// as constants. Returns the objective value at the update point.
#[allow(clippy::too_many_arguments)]
pub fn external_phase(
    all_x: &Tensor,
    stats: &TargetStats,
    prompt: &mut StylePrompt,
    backbone: &FrozenBackbone,
    clf: &LinearClassifier,
    curr: &PredictionSet,
    prev: &PredictionSet,
    group: &CredibleGroup,
    sigma: f64,
    use_mi: bool,
    opt: &mut Sgd,
) -> Result<f64> {
    let pairs = crate::align::pair_all(curr, prev, group)?;
    let (_, prev_paired) = paired_matrices(curr, prev, &pairs)?;

    let mut tape = Tape::new();
    let fv = build_forward(
        &mut tape,
        all_x,
        &ForwardSpec {
            prompt: Some((prompt, stats)),
            train_prompt: true,
            backbone,
            clf,
            train_clf: false,
        },
    )?;
    // every sample pairs exactly once in index order, so the paired view
    // of the current predictions is the prediction matrix itself
    let loss = tape_external_loss(&mut tape, fv.probs, fv.probs, &prev_paired, sigma, use_mi)?;
    let value = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;
    prompt
        .omega1
        .take_grad(&grads, fv.omega1.expect("trainable prompt"))?;
    prompt
        .omega2
        .take_grad(&grads, fv.omega2.expect("trainable prompt"))?;
    opt.step(&mut [&mut prompt.omega1, &mut prompt.omega2])?;
    Ok(value)
}

/// Prompt-free variant of the alignment step: the same objective, with
/// its gradient applied to the classifier instead.
#[allow(clippy::too_many_arguments)]
pub fn external_phase_on_classifier(
    all_x: &Tensor,
    backbone: &FrozenBackbone,
    clf: &mut LinearClassifier,
    curr: &PredictionSet,
    prev: &PredictionSet,
    group: &CredibleGroup,
    sigma: f64,
    use_mi: bool,
    opt: &mut Sgd,
) -> Result<f64> {
    let pairs = crate::align::pair_all(curr, prev, group)?;
    let (_, prev_paired) = paired_matrices(curr, prev, &pairs)?;

    let mut tape = Tape::new();
    let fv = build_forward(
        &mut tape,
        all_x,
        &ForwardSpec {
            prompt: None,
            train_prompt: false,
            backbone,
            clf,
            train_clf: true,
        },
    )?;
    let loss = tape_external_loss(&mut tape, fv.probs, fv.probs, &prev_paired, sigma, use_mi)?;
    let value = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;
    clf.weight.take_grad(&grads, fv.weight.expect("trainable head"))?;
    clf.bias.take_grad(&grads, fv.bias.expect("trainable head"))?;
    opt.step(&mut [&mut clf.weight, &mut clf.bias])?;
    Ok(value)
}

fn query_accuracy(preds: &Tensor, offset: usize, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(preds.row(offset + i)) == y)
        .count();
    hits as f64 / labels.len() as f64
}

/// Refine query predictions by propagating support labels through a
/// mutual-similarity graph over all prediction vectors.
///
/// `preds` stacks support rows first. The anchor matrix holds one-hot
/// support labels and the incoming query predictions; each iteration
/// mixes `mixing` parts propagated mass with `1 − mixing` parts anchor.
/// Returns the query rows, row-normalized.
pub fn label_propagation(
    preds: &Tensor,
    support_labels: &[usize],
    k_neighbors: usize,
    mixing: f64,
    iterations: usize,
) -> Result<Tensor> {
    if preds.shape().len() != 2 {
        return Err(Error::contract("propagation needs an m×N matrix"));
    }
    let m = preds.rows();
    let n = preds.cols();
    let s = support_labels.len();
    if s > m {
        return Err(Error::contract(
            "more support labels than prediction rows",
        ));
    }
    if k_neighbors == 0 {
        return Err(Error::config("lp_neighbors must be at least 1"));
    }
    if !(mixing.is_finite() && (0.0..=1.0).contains(&mixing)) {
        return Err(Error::config(format!(
            "lp_alpha must lie in [0, 1], got {mixing}"
        )));
    }
    let q = m - s;

    let mut anchor = vec![0.0; m * n];
    for (i, &y) in support_labels.iter().enumerate() {
        if y >= n {
            return Err(Error::contract(format!("label {y} outside [0, {n})")));
        }
        anchor[i * n + y] = 1.0;
    }
    for i in s..m {
        anchor[i * n..(i + 1) * n].copy_from_slice(preds.row(i));
    }

    let mut f = anchor.clone();
    if iterations > 0 && m > 1 {
        let k = k_neighbors.min(m - 1);
        // mutual-or affinity: keep an edge if either endpoint ranks the
        // other among its k most similar predictions
        let mut sims = vec![0.0; m * m];
        for i in 0..m {
            for j in (i + 1)..m {
                let c = crate::align::cosine_sim(preds.row(i), preds.row(j))?;
                sims[i * m + j] = c;
                sims[j * m + i] = c;
            }
        }
        let mut affinity = vec![0.0; m * m];
        for i in 0..m {
            let mut order: Vec<usize> = (0..m).filter(|&j| j != i).collect();
            order.sort_by(|&a, &b| {
                sims[i * m + b]
                    .partial_cmp(&sims[i * m + a])
                    .expect("finite similarity")
                    .then(a.cmp(&b))
            });
            for &j in order.iter().take(k) {
                affinity[i * m + j] = sims[i * m + j];
                affinity[j * m + i] = sims[j * m + i];
            }
        }
        let mut transition = affinity;
        for i in 0..m {
            let row = &mut transition[i * m..(i + 1) * m];
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                for w in row.iter_mut() {
                    *w /= total;
                }
            }
        }

        let mut next = vec![0.0; m * n];
        for _ in 0..iterations {
            for (i, cell) in next.iter_mut().enumerate() {
                let (row, col) = (i / n, i % n);
                let mut propagated = 0.0;
                for j in 0..m {
                    let w = transition[row * m + j];
                    if w != 0.0 {
                        propagated += w * f[j * n + col];
                    }
                }
                *cell = mixing * propagated + (1.0 - mixing) * anchor[i];
            }
            let moved = f
                .iter()
                .zip(&next)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            std::mem::swap(&mut f, &mut next);
            if moved < 1e-12 {
                break;
            }
        }
    }

    let mut out = vec![0.0; q * n];
    for i in 0..q {
        let row = &f[(s + i) * n..(s + i + 1) * n];
        let total: f64 = row.iter().sum();
        let dst = &mut out[i * n..(i + 1) * n];
        if total > 0.0 {
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = v / total;
            }
        } else {
            for d in dst.iter_mut() {
                *d = 1.0 / n as f64;
            }
        }
    }
    Tensor::from_vec(vec![q, n], out)
}

/// Run the full dual-phase schedule on one episode against a frozen
/// backbone. `episode_seed` drives every stochastic choice inside the
/// episode (currently only support-batch shuffling).
pub fn run_episode(
    episode: &Episode,
    backbone: &FrozenBackbone,
    params: &TrainerParams,
    episode_seed: u64,
) -> Result<EpisodeResult> {
    params.validate()?;
    let eff = apply_ablation(params.mode, params.schedule, params.sigma);

    let all_x = episode.all_inputs();
    let stats = compute_target_stats(&all_x)?;
    let mut prompt = StylePrompt::init(episode.dim(), params.epsilon)?;
    let mut clf = LinearClassifier::zeros(backbone.feature_dim(), episode.way_count);

    let mut opt_prompt = Sgd::new(params.learning_rate, params.momentum, params.weight_decay)?;
    let mut opt_clf = Sgd::new(params.learning_rate, params.momentum, params.weight_decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(episode_seed, 0x7261_696e));

    let mut ce_trace = Vec::new();
    let mut external_trace = Vec::new();
    let mut shift_trace = Vec::new();
    let mut fallback_steps = 0;

    if eff.run_external {
        let mut prev = PredictionSet::new(
            predict(&all_x, prompt_view(eff.use_prompt, &prompt, &stats), backbone, &clf)?,
            0,
        )?;
        for step in 1..=eff.schedule.total_steps {
            let group = build_group(&prev, episode, eff.group_rule, params.alpha, params.gamma)?;
            if group.used_fallback {
                fallback_steps += 1;
            }

            internal_phase(
                episode,
                prompt_view(eff.use_prompt, &prompt, &stats),
                backbone,
                &mut clf,
                eff.schedule.internal_epochs_per_step,
                eff.schedule.support_batch_size,
                &mut opt_clf,
                &mut rng,
                &mut ce_trace,
            )?;

            let curr = PredictionSet::new(
                predict(&all_x, prompt_view(eff.use_prompt, &prompt, &stats), backbone, &clf)?,
                step,
            )?;

            let value = if eff.external_updates_classifier {
                external_phase_on_classifier(
                    &all_x, backbone, &mut clf, &curr, &prev, &group, eff.sigma, eff.use_mi,
                    &mut opt_clf,
                )?
            } else {
                external_phase(
                    &all_x, &stats, &mut prompt, backbone, &clf, &curr, &prev, &group, eff.sigma,
                    eff.use_mi, &mut opt_prompt,
                )?
            };
            external_trace.push(value);

            if params.track_shift {
                let report =
                    distribution_shift_capped(&prev, &curr, Metric::Euclidean, params.shift_cap)?;
                shift_trace.push(report.value);
            }
            // the pre-update predictions become the next step's reference
            prev = curr;
        }
    } else {
        internal_phase(
            episode,
            prompt_view(eff.use_prompt, &prompt, &stats),
            backbone,
            &mut clf,
            eff.schedule.max_epochs(),
            eff.schedule.support_batch_size,
            &mut opt_clf,
            &mut rng,
            &mut ce_trace,
        )?;
    }

    let final_preds = predict(
        &all_x,
        prompt_view(eff.use_prompt, &prompt, &stats),
        backbone,
        &clf,
    )?;
    let support_count = episode.support_labels.len();
    let accuracy = query_accuracy(&final_preds, support_count, &episode.query_labels);

    let accuracy_lp = if eff.apply_lp {
        let refined = label_propagation(
            &final_preds,
            &episode.support_labels,
            params.lp.neighbors,
            params.lp.mixing,
            params.lp.iterations,
        )?;
        query_accuracy(&refined, 0, &episode.query_labels)
    } else {
        accuracy
    };

    Ok(EpisodeResult {
        accuracy,
        accuracy_lp,
        ce_trace,
        external_trace,
        shift_trace,
        fallback_steps,
        prompt: eff.use_prompt.then_some(prompt),
        classifier: clf,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, sample_episode};
    use crate::model::pretrain_and_freeze;
    use crate::model::BackboneSpec;

    fn toy_backbone(dim: usize) -> FrozenBackbone {
        let source = generate_dataset(4, dim, 12, 0.5, 11).unwrap();
        let spec = BackboneSpec::new(dim, vec![12, 8]).unwrap();
        pretrain_and_freeze(&source, &spec, 3, 0.05, 12).unwrap()
    }

    fn toy_episode(dim: usize, seed: u64) -> Episode {
        let target = generate_dataset(6, dim, 20, 0.4, seed).unwrap();
        sample_episode(&target, 3, 2, 4, seed + 1).unwrap()
    }

    fn toy_params(mode: AblationMode) -> TrainerParams {
        TrainerParams {
            schedule: StepSchedule::new(4, 8, 0).unwrap(),
            mode,
            alpha: 0.7,
            gamma: 0.4,
            sigma: 2.0,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-3,
            epsilon: 1e-5,
            lp: LpParams {
                neighbors: 5,
                mixing: 0.75,
                iterations: 20,
            },
            track_shift: true,
            shift_cap: 16,
        }
    }

    #[test]
    fn schedule_splits_epochs_exactly() {
        let s = StepSchedule::new(4, 20, 0).unwrap();
        assert_eq!(s.internal_epochs_per_step, 5);
        assert_eq!(s.max_epochs(), 20);
        assert!(StepSchedule::new(3, 20, 0).is_err());
        assert!(StepSchedule::new(0, 20, 0).is_err());
        assert!(StepSchedule::new(4, 0, 0).is_err());
    }

    #[test]
    fn ablation_modes_round_trip_names() {
        for mode in AblationMode::ALL {
            assert_eq!(mode.name().parse::<AblationMode>().unwrap(), mode);
        }
        assert!("warp_speed".parse::<AblationMode>().is_err());
    }

    #[test]
    fn ablation_switches_resolve() {
        let base = StepSchedule::new(4, 20, 0).unwrap();
        let full = apply_ablation(AblationMode::Full, base, 2.0);
        assert!(full.use_prompt && full.run_external && full.use_mi && full.apply_lp);
        assert_eq!(full.schedule, base);

        let ns = apply_ablation(AblationMode::NoStep, base, 2.0);
        assert_eq!(ns.schedule.total_steps, 1);
        assert_eq!(ns.schedule.internal_epochs_per_step, 20);

        let style = apply_ablation(AblationMode::NoStyle, base, 2.0);
        assert!(!style.use_prompt && style.external_updates_classifier);

        assert_eq!(
            apply_ablation(AblationMode::EntropyGroupOnly, base, 2.0).group_rule,
            GroupRule::EntropyOnly
        );
        assert_eq!(
            apply_ablation(AblationMode::PrototypeGroupOnly, base, 2.0).group_rule,
            GroupRule::PrototypeOnly
        );
        assert!(!apply_ablation(AblationMode::NoMi, base, 2.0).use_mi);
        assert_eq!(apply_ablation(AblationMode::NoKl, base, 2.0).sigma, 0.0);
        assert!(!apply_ablation(AblationMode::NoLabelPropagation, base, 2.0).apply_lp);

        let bl = apply_ablation(AblationMode::Baseline, base, 2.0);
        assert!(!bl.use_prompt && !bl.run_external && !bl.apply_lp);
    }

    #[test]
    fn zero_epoch_internal_phase_changes_nothing() {
        let dim = 6;
        let backbone = toy_backbone(dim);
        let episode = toy_episode(dim, 21);
        let all_x = episode.all_inputs();
        let stats = compute_target_stats(&all_x).unwrap();
        let prompt = StylePrompt::init(dim, 1e-5).unwrap();
        let mut clf = LinearClassifier::zeros(backbone.feature_dim(), episode.way_count);
        let before = clf.weight.value().clone();
        let mut opt = Sgd::new(0.01, 0.9, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut trace = Vec::new();
        internal_phase(
            &episode,
            Some((&prompt, &stats)),
            &backbone,
            &mut clf,
            0,
            0,
            &mut opt,
            &mut rng,
            &mut trace,
        )
        .unwrap();
        assert!(clf.weight.value().bits_eq(&before));
        assert!(trace.is_empty());
    }

    #[test]
    fn internal_phase_never_touches_the_prompt_constants() {
        // the prompt is passed immutably and entered on the tape as a
        // constant; assert the bits anyway as the contract demands
        let dim = 6;
        let backbone = toy_backbone(dim);
        let episode = toy_episode(dim, 22);
        let all_x = episode.all_inputs();
        let stats = compute_target_stats(&all_x).unwrap();
        let prompt = StylePrompt::init(dim, 1e-5).unwrap();
        let w1_before = prompt.omega1.value().clone();
        let w2_before = prompt.omega2.value().clone();
        let mut clf = LinearClassifier::zeros(backbone.feature_dim(), episode.way_count);
        let head_before = clf.weight.value().clone();
        let mut opt = Sgd::new(0.01, 0.9, 1e-3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut trace = Vec::new();
        internal_phase(
            &episode,
            Some((&prompt, &stats)),
            &backbone,
            &mut clf,
            3,
            0,
            &mut opt,
            &mut rng,
            &mut trace,
        )
        .unwrap();
        assert!(prompt.omega1.value().bits_eq(&w1_before));
        assert!(prompt.omega2.value().bits_eq(&w2_before));
        assert!(!clf.weight.value().bits_eq(&head_before), "head should move");
        assert_eq!(trace.len(), 3);
    }

    #[test]
    fn support_ce_is_non_increasing_on_a_separable_episode() {
        // widely spread clusters, tiny in-cluster noise: linearly separable
        let dim = 6;
        let backbone = toy_backbone(dim);
        let target = generate_dataset(5, dim, 16, 0.05, 31).unwrap();
        let episode = sample_episode(&target, 3, 4, 4, 32).unwrap();
        let all_x = episode.all_inputs();
        let stats = compute_target_stats(&all_x).unwrap();
        let prompt = StylePrompt::init(dim, 1e-5).unwrap();
        let mut clf = LinearClassifier::zeros(backbone.feature_dim(), episode.way_count);
        // plain gradient descent so the convex support objective is monotone
        let mut opt = Sgd::new(0.01, 0.0, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut trace = Vec::new();
        internal_phase(
            &episode,
            Some((&prompt, &stats)),
            &backbone,
            &mut clf,
            25,
            0,
            &mut opt,
            &mut rng,
            &mut trace,
        )
        .unwrap();
        for pair in trace.windows(2) {
            assert!(
                pair[1] <= pair[0] + 1e-9,
                "support CE rose: {} -> {}",
                pair[0],
                pair[1]
            );
        }
    }

    #[test]
    fn external_phase_with_zero_lr_leaves_the_prompt_alone() {
        let dim = 6;
        let backbone = toy_backbone(dim);
        let episode = toy_episode(dim, 23);
        let all_x = episode.all_inputs();
        let stats = compute_target_stats(&all_x).unwrap();
        let mut prompt = StylePrompt::init(dim, 1e-5).unwrap();
        let clf = LinearClassifier::zeros(backbone.feature_dim(), episode.way_count);
        let w1 = prompt.omega1.value().clone();
        let w2 = prompt.omega2.value().clone();

        let preds = predict(&all_x, Some((&prompt, &stats)), &backbone, &clf).unwrap();
        let prev = PredictionSet::new(preds.clone(), 0).unwrap();
        let curr = PredictionSet::new(preds, 1).unwrap();
        // keep fractions of 1: everything is trusted
        let group = build_group(&prev, &episode, GroupRule::Intersection, 1.0, 1.0).unwrap();
        let mut opt = Sgd::new(0.0, 0.9, 1e-3).unwrap();
        external_phase(
            &all_x, &stats, &mut prompt, &backbone, &clf, &curr, &prev, &group, 2.0, true,
            &mut opt,
        )
        .unwrap();
        assert!(prompt.omega1.value().bits_eq(&w1));
        assert!(prompt.omega2.value().bits_eq(&w2));
    }

    #[test]
    fn external_phase_never_touches_the_classifier() {
        let dim = 6;
        let backbone = toy_backbone(dim);
        let episode = toy_episode(dim, 24);
        let all_x = episode.all_inputs();
        let stats = compute_target_stats(&all_x).unwrap();
        let mut prompt = StylePrompt::init(dim, 1e-5).unwrap();
        // a zero head would block all gradient flow to the prompt, so give
        // the classifier a couple of epochs first (as the real loop does)
        let mut clf = LinearClassifier::zeros(backbone.feature_dim(), episode.way_count);
        let mut head_opt = Sgd::new(0.01, 0.9, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        internal_phase(
            &episode,
            Some((&prompt, &stats)),
            &backbone,
            &mut clf,
            2,
            0,
            &mut head_opt,
            &mut rng,
            &mut Vec::new(),
        )
        .unwrap();
        let head_w = clf.weight.value().clone();
        let head_b = clf.bias.value().clone();
        let w1 = prompt.omega1.value().clone();

        let preds = predict(&all_x, Some((&prompt, &stats)), &backbone, &clf).unwrap();
        let prev = PredictionSet::new(preds.clone(), 0).unwrap();
        let curr = PredictionSet::new(preds, 1).unwrap();
        let group = build_group(&prev, &episode, GroupRule::EntropyOnly, 0.7, 0.4).unwrap();
        let mut opt = Sgd::new(0.05, 0.0, 0.0).unwrap();
        external_phase(
            &all_x, &stats, &mut prompt, &backbone, &clf, &curr, &prev, &group, 2.0, true,
            &mut opt,
        )
        .unwrap();
        assert!(clf.weight.value().bits_eq(&head_w));
        assert!(clf.bias.value().bits_eq(&head_b));
        assert!(
            !prompt.omega1.value().bits_eq(&w1),
            "prompt should move under a real learning rate"
        );
    }

    #[test]
    fn run_episode_is_deterministic() {
        let dim = 6;
        let backbone = toy_backbone(dim);
        let episode = toy_episode(dim, 25);
        let params = toy_params(AblationMode::Full);
        let a = run_episode(&episode, &backbone, &params, 99).unwrap();
        let b = run_episode(&episode, &backbone, &params, 99).unwrap();
        assert_eq!(a.accuracy.to_bits(), b.accuracy.to_bits());
        assert_eq!(a.accuracy_lp.to_bits(), b.accuracy_lp.to_bits());
        assert_eq!(a.ce_trace, b.ce_trace);
        assert_eq!(a.external_trace, b.external_trace);
        let (pa, pb) = (a.prompt.unwrap(), b.prompt.unwrap());
        assert!(pa.omega1.value().bits_eq(pb.omega1.value()));
        assert!(pa.omega2.value().bits_eq(pb.omega2.value()));
        assert!(a
            .classifier
            .weight
            .value()
            .bits_eq(b.classifier.weight.value()));
    }

    #[test]
    fn no_step_equals_a_single_step_schedule() {
        let dim = 6;
        let backbone = toy_backbone(dim);
        let episode = toy_episode(dim, 26);
        let collapsed = run_episode(&episode, &backbone, &toy_params(AblationMode::NoStep), 7)
            .unwrap();
        let mut explicit = toy_params(AblationMode::Full);
        explicit.schedule = StepSchedule::new(1, 8, 0).unwrap();
        let single = run_episode(&episode, &backbone, &explicit, 7).unwrap();
        assert_eq!(collapsed.accuracy.to_bits(), single.accuracy.to_bits());
        assert_eq!(collapsed.external_trace, single.external_trace);
        let (pa, pb) = (collapsed.prompt.unwrap(), single.prompt.unwrap());
        assert!(pa.omega1.value().bits_eq(pb.omega1.value()));
    }

    #[test]
    fn zero_lr_everywhere_matches_the_untouched_pipeline() {
        let dim = 6;
        let backbone = toy_backbone(dim);
        let episode = toy_episode(dim, 27);
        let mut params = toy_params(AblationMode::Full);
        params.learning_rate = 0.0;
        params.weight_decay = 0.0;
        let result = run_episode(&episode, &backbone, &params, 3).unwrap();

        let all_x = episode.all_inputs();
        let stats = compute_target_stats(&all_x).unwrap();
        let prompt = StylePrompt::init(dim, params.epsilon).unwrap();
        let clf = LinearClassifier::zeros(backbone.feature_dim(), episode.way_count);
        let preds = predict(&all_x, Some((&prompt, &stats)), &backbone, &clf).unwrap();
        let baseline = query_accuracy(&preds, episode.support_labels.len(), &episode.query_labels);
        assert_eq!(result.accuracy.to_bits(), baseline.to_bits());
        assert!(result.prompt.unwrap().omega1.value().bits_eq(prompt.omega1.value()));
    }

    #[test]
    fn baseline_mode_runs_classifier_only() {
        let dim = 6;
        let backbone = toy_backbone(dim);
        let episode = toy_episode(dim, 28);
        let result = run_episode(&episode, &backbone, &toy_params(AblationMode::Baseline), 5)
            .unwrap();
        assert!(result.prompt.is_none());
        assert!(result.external_trace.is_empty());
        assert!(result.shift_trace.is_empty());
        assert_eq!(result.accuracy_lp.to_bits(), result.accuracy.to_bits());
        assert_eq!(result.ce_trace.len(), 8);
    }

    #[test]
    fn full_run_produces_all_traces() {
        let dim = 6;
        let backbone = toy_backbone(dim);
        let episode = toy_episode(dim, 29);
        let result = run_episode(&episode, &backbone, &toy_params(AblationMode::Full), 5).unwrap();
        assert_eq!(result.ce_trace.len(), 8);
        assert_eq!(result.external_trace.len(), 4);
        assert_eq!(result.shift_trace.len(), 4);
        for v in &result.shift_trace {
            assert!(v.is_finite() && *v >= 0.0);
        }
        let way = episode.way_count as f64;
        for v in &result.external_trace {
            assert!(*v >= -(way.ln()) - 1e-9, "alignment objective {v} out of range");
        }
    }

    // ── label propagation ──────────────────────────────────────────────

    fn lp_input() -> (Tensor, Vec<usize>) {
        // 4 support (2 per class), 2 query, 2 classes
        let preds = Tensor::matrix(
            6,
            2,
            vec![
                0.9, 0.1, //
                0.8, 0.2, //
                0.1, 0.9, //
                0.2, 0.8, //
                0.6, 0.4, //
                0.3, 0.7, //
            ],
        )
        .unwrap();
        (preds, vec![0, 0, 1, 1])
    }

    #[test]
    fn zero_iterations_returns_the_query_rows_unchanged() {
        let (preds, labels) = lp_input();
        let out = label_propagation(&preds, &labels, 3, 0.75, 0).unwrap();
        assert_eq!(out.shape(), &[2, 2]);
        assert!((out.row(0)[0] - 0.6).abs() < 1e-12);
        assert!((out.row(1)[1] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn zero_mixing_reverts_to_the_anchor() {
        let (preds, labels) = lp_input();
        let out = label_propagation(&preds, &labels, 3, 0.0, 10).unwrap();
        assert!((out.row(0)[0] - 0.6).abs() < 1e-12);
        assert!((out.row(1)[1] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn a_query_surrounded_by_one_class_adopts_it() {
        // the query's two nearest predictions are class-0 supports, and
        // both class clusters are tight enough that no class-1 support
        // ranks the query among its own two nearest, so even after
        // symmetrization every edge at the query is class 0
        let preds = Tensor::matrix(
            7,
            2,
            vec![
                0.85, 0.15, //
                0.80, 0.20, //
                0.75, 0.25, //
                0.05, 0.95, //
                0.10, 0.90, //
                0.15, 0.85, //
                0.55, 0.45, //
            ],
        )
        .unwrap();
        let labels = vec![0, 0, 0, 1, 1, 1];
        let out = label_propagation(&preds, &labels, 2, 0.9, 30).unwrap();
        assert_eq!(out.shape(), &[1, 2]);
        assert_eq!(argmax(out.row(0)), 0);
        let total: f64 = out.row(0).iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn propagation_rejects_bad_arguments() {
        let (preds, labels) = lp_input();
        assert!(label_propagation(&preds, &labels, 0, 0.5, 5).is_err());
        assert!(label_propagation(&preds, &labels, 3, 1.5, 5).is_err());
        assert!(label_propagation(&preds, &[0, 0, 0, 9], 3, 0.5, 5).is_err());
    }
}
