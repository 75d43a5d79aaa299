//! The composed predictor: per-channel style prompt on standardized inputs,
//! a frozen feed-forward feature extractor, and a linear classifier head.
//!
//! The prompt is a batch-norm-style affine `ω₁ ⊙ (x − μ)/√(σ² + ε) + ω₂`
//! whose statistics come from one episode's support ∪ query pool and stay
//! fixed for that episode. The backbone is pretrained on a source task with
//! a throwaway head, then frozen; gradient still flows through it to the
//! prompt. The classifier starts at exactly zero so the initial prediction
//! is uniform.

use crate::autodiff::{Parameter, Tape, Var};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::optim::Sgd;
use crate::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Learnable per-channel affine applied to standardized inputs.
#[derive(Clone, Debug)]
pub struct StylePrompt {
    pub omega1: Parameter,
    pub omega2: Parameter,
    pub epsilon: f64,
}

impl StylePrompt {
    /// Fresh prompt: scale 1, shift 0 per channel.
    pub fn init(channels: usize, epsilon: f64) -> Result<Self> {
        if !(epsilon.is_finite() && epsilon >= 0.0) {
            return Err(Error::config(format!(
                "epsilon must be non-negative, got {epsilon}"
            )));
        }
        Ok(StylePrompt {
            omega1: Parameter::trainable(Tensor::filled(&[channels], 1.0)),
            omega2: Parameter::trainable(Tensor::zeros(&[channels])),
            epsilon,
        })
    }

    pub fn channels(&self) -> usize {
        self.omega1.value().len()
    }
}

/// Per-channel mean and population variance over one episode's pooled
/// support ∪ query inputs (divisor m), fixed for the episode.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetStats {
    pub mu: Tensor,
    pub sigma2: Tensor,
    pub sample_count: usize,
}

/// Population statistics over the rows of `samples` (an m×d matrix).
pub fn compute_target_stats(samples: &Tensor) -> Result<TargetStats> {
    if samples.shape().len() != 2 {
        return Err(Error::contract("target stats need a 2-d sample matrix"));
    }
    let (m, d) = (samples.rows(), samples.cols());
    if m < 2 {
        return Err(Error::contract(format!(
            "target stats need at least 2 samples, got {m}"
        )));
    }
    let mut mu = vec![0.0; d];
    for i in 0..m {
        for c in 0..d {
            mu[c] += samples.data()[i * d + c];
        }
    }
    for v in mu.iter_mut() {
        *v /= m as f64;
    }
    let mut sigma2 = vec![0.0; d];
    for i in 0..m {
        for c in 0..d {
            let diff = samples.data()[i * d + c] - mu[c];
            sigma2[c] += diff * diff;
        }
    }
    for v in sigma2.iter_mut() {
        *v /= m as f64;
    }
    Ok(TargetStats {
        mu: Tensor::vector(mu),
        sigma2: Tensor::vector(sigma2),
        sample_count: m,
    })
}

/// Numeric (tape-free) prompt application for diagnostics and histograms.
pub fn apply_style_prompt(x: &Tensor, stats: &TargetStats, prompt: &StylePrompt) -> Result<Tensor> {
    let d = stats.mu.len();
    if x.cols() != d || prompt.channels() != d {
        return Err(Error::ShapeMismatch {
            op: "apply_style_prompt",
            lhs: x.shape().to_vec(),
            rhs: vec![d],
        });
    }
    let (w1, w2) = (prompt.omega1.value().data(), prompt.omega2.value().data());
    let (mu, s2) = (stats.mu.data(), stats.sigma2.data());
    let rows = x.rows();
    let mut out = vec![0.0; rows * d];
    for i in 0..rows {
        for c in 0..d {
            let denom = (s2[c] + prompt.epsilon).sqrt();
            out[i * d + c] = w1[c] * (x.data()[i * d + c] - mu[c]) / denom + w2[c];
        }
    }
    Tensor::from_vec(vec![rows, d], out)
}

/// Shape of the feature extractor: input dim, then one width per layer.
/// Every layer is affine + ReLU; the last width is the feature dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub input_dim: usize,
    pub widths: Vec<usize>,
}

impl BackboneSpec {
    pub fn new(input_dim: usize, widths: Vec<usize>) -> Result<Self> {
        if input_dim == 0 || widths.is_empty() || widths.contains(&0) {
            return Err(Error::config(
                "backbone needs input_dim >= 1 and at least one nonzero layer width",
            ));
        }
        Ok(BackboneSpec { input_dim, widths })
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }
}

/// Frozen feed-forward feature extractor. Weights are plain tensors: they
/// enter every tape as constants, so no update path exists by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenBackbone {
    spec: BackboneSpec,
    /// One (weight `[in, out]`, bias `[out]`) per layer.
    layers: Vec<(Tensor, Tensor)>,
}

impl FrozenBackbone {
    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim()
    }

    pub fn layers(&self) -> &[(Tensor, Tensor)] {
        &self.layers
    }

    /// Record the feature computation on a tape: affine + ReLU per layer.
    pub fn features(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for (w, b) in &self.layers {
            let wv = tape.constant(w.clone());
            let bv = tape.constant(b.clone());
            let lin = tape.matmul(h, wv)?;
            let biased = tape.add_rows(lin, bv)?;
            h = tape.relu(biased)?;
        }
        Ok(h)
    }
}

/// Linear head `[feature_dim, way_count]` + bias, zero-initialized so the
/// untrained prediction is exactly uniform.
#[derive(Clone, Debug)]
pub struct LinearClassifier {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl LinearClassifier {
    pub fn zeros(feature_dim: usize, way_count: usize) -> Self {
        LinearClassifier {
            weight: Parameter::trainable(Tensor::zeros(&[feature_dim, way_count])),
            bias: Parameter::trainable(Tensor::zeros(&[way_count])),
        }
    }

    pub fn way_count(&self) -> usize {
        self.bias.value().len()
    }
}

/// What enters the forward pass and which pieces are trainable this pass.
pub struct ForwardSpec<'a> {
    /// `None` runs the backbone on raw inputs (the prompt-free variant).
    pub prompt: Option<(&'a StylePrompt, &'a TargetStats)>,
    pub train_prompt: bool,
    pub backbone: &'a FrozenBackbone,
    pub clf: &'a LinearClassifier,
    pub train_clf: bool,
}

/// Tape handles for whatever was trainable in a forward pass.
pub struct ForwardVars {
    pub probs: Var,
    pub omega1: Option<Var>,
    pub omega2: Option<Var>,
    pub weight: Option<Var>,
    pub bias: Option<Var>,
}

/// Record the full pipeline `softmax(clf(backbone(prompt(x))))` for a batch
/// `x` of shape `[rows, input_dim]`.
pub fn build_forward(tape: &mut Tape, x: &Tensor, fs: &ForwardSpec) -> Result<ForwardVars> {
    if x.cols() != fs.backbone.spec().input_dim {
        return Err(Error::ShapeMismatch {
            op: "build_forward",
            lhs: x.shape().to_vec(),
            rhs: vec![fs.backbone.spec().input_dim],
        });
    }
    let xv = tape.constant(x.clone());

    let (h0, omega1, omega2) = match fs.prompt {
        Some((prompt, stats)) => {
            let d = x.cols();
            if prompt.channels() != d || stats.mu.len() != d {
                return Err(Error::ShapeMismatch {
                    op: "build_forward",
                    lhs: vec![prompt.channels()],
                    rhs: vec![d],
                });
            }
            // stats are episode constants: fold 1/√(σ²+ε) into one vector
            let inv_denom: Vec<f64> = stats
                .sigma2
                .data()
                .iter()
                .map(|&s2| 1.0 / (s2 + prompt.epsilon).sqrt())
                .collect();
            let neg_mu: Vec<f64> = stats.mu.data().iter().map(|&m| -m).collect();
            let neg_mu_v = tape.constant(Tensor::vector(neg_mu));
            let inv_v = tape.constant(Tensor::vector(inv_denom));
            let centered = tape.add_rows(xv, neg_mu_v)?;
            let standardized = tape.mul_rows(centered, inv_v)?;

            let w1 = if fs.train_prompt {
                tape.trainable(prompt.omega1.value().clone())
            } else {
                tape.constant(prompt.omega1.value().clone())
            };
            let w2 = if fs.train_prompt {
                tape.trainable(prompt.omega2.value().clone())
            } else {
                tape.constant(prompt.omega2.value().clone())
            };
            let scaled = tape.mul_rows(standardized, w1)?;
            let prompted = tape.add_rows(scaled, w2)?;
            (prompted, Some(w1), Some(w2))
        }
        None => (xv, None, None),
    };

    let feats = fs.backbone.features(tape, h0)?;

    let wv = if fs.train_clf {
        tape.trainable(fs.clf.weight.value().clone())
    } else {
        tape.constant(fs.clf.weight.value().clone())
    };
    let bv = if fs.train_clf {
        tape.trainable(fs.clf.bias.value().clone())
    } else {
        tape.constant(fs.clf.bias.value().clone())
    };
    let logits = tape.matmul(feats, wv)?;
    let biased = tape.add_rows(logits, bv)?;
    let probs = tape.softmax(biased)?;

    Ok(ForwardVars {
        probs,
        omega1: if fs.train_prompt { omega1 } else { None },
        omega2: if fs.train_prompt { omega2 } else { None },
        weight: if fs.train_clf { Some(wv) } else { None },
        bias: if fs.train_clf { Some(bv) } else { None },
    })
}

/// Numeric forward pass: class probabilities for each row of `x`.
pub fn predict(
    x: &Tensor,
    prompt: Option<(&StylePrompt, &TargetStats)>,
    backbone: &FrozenBackbone,
    clf: &LinearClassifier,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let fv = build_forward(
        &mut tape,
        x,
        &ForwardSpec {
            prompt,
            train_prompt: false,
            backbone,
            clf,
            train_clf: false,
        },
    )?;
    Ok(tape.value(fv.probs).clone())
}

/// Train a backbone on the source task with a throwaway head, then freeze.
///
/// Xavier-uniform init, mini-batch momentum SGD on mean cross-entropy.
/// `epochs == 0` returns the seeded random initialization unchanged. The
/// caller is responsible for keeping the source label space disjoint from
/// any target task this backbone will serve.
pub fn pretrain_and_freeze(
    source: &LabeledDataset,
    spec: &BackboneSpec,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<FrozenBackbone> {
    pretrain_with_head(source, spec, epochs, lr, seed).map(|(bb, _)| bb)
}

/// Like [`pretrain_and_freeze`] but also hands back the trained source head,
/// which the caller may want for source-accuracy diagnostics.
pub fn pretrain_with_head(
    source: &LabeledDataset,
    spec: &BackboneSpec,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<(FrozenBackbone, LinearClassifier)> {
    if source.dim() != spec.input_dim {
        return Err(Error::config(format!(
            "source dim {} does not match backbone input dim {}",
            source.dim(),
            spec.input_dim
        )));
    }
    if source.is_empty() || source.class_count() < 2 {
        return Err(Error::config("pretraining needs a non-empty multi-class source"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers: Vec<(Parameter, Parameter)> = Vec::new();
    let mut fan_in = spec.input_dim;
    for &out in &spec.widths {
        let bound = (6.0 / (fan_in + out) as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        layers.push((
            Parameter::trainable(Tensor::from_vec(vec![fan_in, out], w)?),
            Parameter::trainable(Tensor::zeros(&[out])),
        ));
        fan_in = out;
    }
    let mut head = LinearClassifier::zeros(spec.feature_dim(), source.class_count());

    if epochs > 0 {
        let mut opt = Sgd::new(lr, 0.9, 0.0)?;
        let batch = 32.min(source.len());
        let mut order: Vec<usize> = (0..source.len()).collect();
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(batch) {
                train_batch(source, chunk, &mut layers, &mut head, &mut opt)?;
            }
        }
    }

    let frozen = layers
        .into_iter()
        .map(|(w, b)| (w.value().clone(), b.value().clone()))
        .collect();
    Ok((
        FrozenBackbone {
            spec: spec.clone(),
            layers: frozen,
        },
        head,
    ))
}

fn train_batch(
    source: &LabeledDataset,
    rows: &[usize],
    layers: &mut [(Parameter, Parameter)],
    head: &mut LinearClassifier,
    opt: &mut Sgd,
) -> Result<()> {
    let d = source.dim();
    let mut x = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        x.extend_from_slice(source.row(r));
    }
    let x = Tensor::from_vec(vec![rows.len(), d], x)?;

    let mut tape = Tape::new();
    let mut h = tape.constant(x);
    let mut handles = Vec::new();
    for (w, b) in layers.iter() {
        let wv = tape.param(w);
        let bv = tape.param(b);
        let lin = tape.matmul(h, wv)?;
        let biased = tape.add_rows(lin, bv)?;
        h = tape.relu(biased)?;
        handles.push((wv, bv));
    }
    let wv = tape.param(&head.weight);
    let bv = tape.param(&head.bias);
    let logits = tape.matmul(h, wv)?;
    let biased = tape.add_rows(logits, bv)?;
    let probs = tape.softmax(biased)?;

    // mean CE over the batch via a one-hot mask
    let n = source.class_count();
    let mut mask = vec![0.0; rows.len() * n];
    for (i, &r) in rows.iter().enumerate() {
        mask[i * n + source.labels()[r]] = 1.0;
    }
    let mask = tape.constant(Tensor::from_vec(vec![rows.len(), n], mask)?);
    let lp = tape.log(probs)?;
    let picked = tape.mul(mask, lp)?;
    let total = tape.sum(picked)?;
    let loss = tape.scale(total, -1.0 / rows.len() as f64)?;

    let grads = tape.backward(loss)?;
    for ((w, b), (wv, bv)) in layers.iter_mut().zip(&handles) {
        w.take_grad(&grads, *wv)?;
        b.take_grad(&grads, *bv)?;
    }
    head.weight.take_grad(&grads, wv)?;
    head.bias.take_grad(&grads, bv)?;

    let mut group: Vec<&mut Parameter> = Vec::new();
    for (w, b) in layers.iter_mut() {
        group.push(w);
        group.push(b);
    }
    group.push(&mut head.weight);
    group.push(&mut head.bias);
    opt.step(&mut group)
}

/// Fraction of `data` rows whose argmax prediction matches the label,
/// running the bare backbone + head (no prompt). Ties resolve to the
/// lowest class index.
pub fn source_accuracy(
    data: &LabeledDataset,
    backbone: &FrozenBackbone,
    head: &LinearClassifier,
) -> Result<f64> {
    let probs = predict(data.features(), None, backbone, head)?;
    let n = head.way_count();
    let mut hits = 0usize;
    for i in 0..data.len() {
        if crate::tensor::argmax(&probs.data()[i * n..(i + 1) * n]) == data.labels()[i] {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

// ── checkpoint format ──────────────────────────────────────────────────
//
// Little-endian layout: magic "SPTM", version u32 = 1, layer count u32,
// then per layer: rows u32, cols u32, rows·cols f64 weights row-major,
// cols f64 biases.

const CHECKPOINT_MAGIC: &[u8; 4] = b"SPTM";
const CHECKPOINT_VERSION: u32 = 1;

pub fn save_backbone(path: &std::path::Path, backbone: &FrozenBackbone) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(backbone.layers.len() as u32).to_le_bytes());
    for (w, b) in &backbone.layers {
        buf.extend_from_slice(&(w.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(w.cols() as u32).to_le_bytes());
        for v in w.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in b.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_backbone(path: &std::path::Path) -> Result<FrozenBackbone> {
    let bytes = std::fs::read(path)?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
        if *off + n > bytes.len() {
            return Err(Error::Format {
                offset: *off,
                reason: format!("truncated while reading {what}"),
            });
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    let magic = take(&mut off, 4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: format!("bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"),
        });
    }
    let u32_at = |off: &mut usize, what: &str| -> Result<u32> {
        Ok(u32::from_le_bytes(take(off, 4, what)?.try_into().unwrap()))
    };
    let version = u32_at(&mut off, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let layer_count = u32_at(&mut off, "layer count")? as usize;
    if layer_count == 0 {
        return Err(Error::Format {
            offset: 8,
            reason: "checkpoint has no layers".into(),
        });
    }
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let rows = u32_at(&mut off, "layer rows")? as usize;
        let cols = u32_at(&mut off, "layer cols")? as usize;
        let mut w = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let b = take(&mut off, 8, "weights")?;
            w.push(f64::from_le_bytes(b.try_into().unwrap()));
        }
        let mut bias = Vec::with_capacity(cols);
        for _ in 0..cols {
            let b = take(&mut off, 8, "biases")?;
            bias.push(f64::from_le_bytes(b.try_into().unwrap()));
        }
        layers.push((
            Tensor::from_vec(vec![rows, cols], w)?,
            Tensor::vector(bias),
        ));
    }
    if off != bytes.len() {
        return Err(Error::Format {
            offset: off,
            reason: format!("{} trailing bytes", bytes.len() - off),
        });
    }
    // rebuild the BackboneSpec and check layer chaining
    let input_dim = layers[0].0.rows();
    let widths: Vec<usize> = layers.iter().map(|(w, _)| w.cols()).collect();
    for i in 1..layers.len() {
        if layers[i].0.rows() != widths[i - 1] {
            return Err(Error::Format {
                offset: 8,
                reason: format!(
                    "layer {i} input {} does not chain from previous width {}",
                    layers[i].0.rows(),
                    widths[i - 1]
                ),
            });
        }
    }
    Ok(FrozenBackbone {
        spec: BackboneSpec::new(input_dim, widths)
            .map_err(|e| Error::Format { offset: 8, reason: e.to_string() })?,
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;

    fn toy_backbone(seed: u64) -> FrozenBackbone {
        let source = generate_dataset(4, 6, 12, 0.4, seed).unwrap();
        let spec = BackboneSpec::new(6, vec![16, 8]).unwrap();
        pretrain_and_freeze(&source, &spec, 5, 0.05, seed).unwrap()
    }

    #[test]
    fn two_point_stats() {
        let samples = Tensor::matrix(2, 1, vec![0.0, 2.0]).unwrap();
        let st = compute_target_stats(&samples).unwrap();
        assert_eq!(st.mu.data(), &[1.0]);
        assert_eq!(st.sigma2.data(), &[1.0]);
        assert_eq!(st.sample_count, 2);
    }

    #[test]
    fn identical_samples_have_zero_variance() {
        let samples = Tensor::matrix(3, 2, vec![4.0, -1.0, 4.0, -1.0, 4.0, -1.0]).unwrap();
        let st = compute_target_stats(&samples).unwrap();
        assert_eq!(st.sigma2.data(), &[0.0, 0.0]);
    }

    #[test]
    fn two_sample_two_channel_stats() {
        let samples = Tensor::matrix(2, 2, vec![1.0, 0.0, 3.0, 4.0]).unwrap();
        let st = compute_target_stats(&samples).unwrap();
        assert_eq!(st.mu.data(), &[2.0, 2.0]);
        assert_eq!(st.sigma2.data(), &[1.0, 4.0]);
    }

    #[test]
    fn single_sample_stats_are_rejected() {
        let samples = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        assert!(compute_target_stats(&samples).is_err());
    }

    #[test]
    fn prompt_inverse_recovers_the_input() {
        let samples = Tensor::matrix(4, 3, (0..12).map(|i| (i as f64).sin()).collect()).unwrap();
        let st = compute_target_stats(&samples).unwrap();
        let mut prompt = StylePrompt::init(3, 1e-5).unwrap();
        let w1: Vec<f64> = st.sigma2.data().iter().map(|&s| (s + 1e-5).sqrt()).collect();
        prompt.omega1 = Parameter::trainable(Tensor::vector(w1));
        prompt.omega2 = Parameter::trainable(st.mu.clone());
        let out = apply_style_prompt(&samples, &st, &prompt).unwrap();
        assert!(out.max_abs_diff(&samples) <= 1e-9);
    }

    #[test]
    fn unit_prompt_standardizes() {
        let samples = Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let st = compute_target_stats(&samples).unwrap();
        let prompt = StylePrompt::init(1, 0.0).unwrap();
        let out = apply_style_prompt(&samples, &st, &prompt).unwrap();
        let sd = st.sigma2.data()[0].sqrt();
        for (o, x) in out.data().iter().zip(samples.data()) {
            assert!((o - (x - 2.0) / sd).abs() < 1e-12);
        }
    }

    #[test]
    fn prompt_direct_arithmetic() {
        let st = TargetStats {
            mu: Tensor::vector(vec![1.0]),
            sigma2: Tensor::vector(vec![4.0]),
            sample_count: 2,
        };
        let prompt = StylePrompt {
            omega1: Parameter::trainable(Tensor::vector(vec![2.0])),
            omega2: Parameter::trainable(Tensor::vector(vec![5.0])),
            epsilon: 0.0,
        };
        let x = Tensor::matrix(1, 1, vec![3.0]).unwrap();
        let out = apply_style_prompt(&x, &st, &prompt).unwrap();
        assert_eq!(out.data(), &[7.0]);
    }

    #[test]
    fn predictions_are_distributions() {
        let bb = toy_backbone(3);
        let clf = LinearClassifier::zeros(bb.feature_dim(), 5);
        let x = Tensor::matrix(7, 6, (0..42).map(|i| (i as f64 * 0.37).cos()).collect()).unwrap();
        let probs = predict(&x, None, &bb, &clf).unwrap();
        for i in 0..7 {
            let row = probs.row(i);
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn zero_classifier_predicts_uniform() {
        let bb = toy_backbone(4);
        let clf = LinearClassifier::zeros(bb.feature_dim(), 4);
        let x = Tensor::matrix(2, 6, (0..12).map(|i| i as f64 * 0.1).collect()).unwrap();
        let probs = predict(&x, None, &bb, &clf).unwrap();
        for &p in probs.data() {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn prediction_is_bit_deterministic() {
        let bb = toy_backbone(5);
        let clf = LinearClassifier::zeros(bb.feature_dim(), 3);
        let samples = Tensor::matrix(4, 6, (0..24).map(|i| (i as f64).sin()).collect()).unwrap();
        let st = compute_target_stats(&samples).unwrap();
        let prompt = StylePrompt::init(6, 1e-5).unwrap();
        let a = predict(&samples, Some((&prompt, &st)), &bb, &clf).unwrap();
        let b = predict(&samples, Some((&prompt, &st)), &bb, &clf).unwrap();
        assert!(a.bits_eq(&b));
    }

    #[test]
    fn zero_epoch_pretraining_is_the_seeded_init() {
        let source = generate_dataset(4, 6, 12, 0.4, 8).unwrap();
        let spec = BackboneSpec::new(6, vec![16, 8]).unwrap();
        let a = pretrain_and_freeze(&source, &spec, 0, 0.05, 21).unwrap();
        let b = pretrain_and_freeze(&source, &spec, 0, 0.05, 21).unwrap();
        assert_eq!(a, b);
        let c = pretrain_and_freeze(&source, &spec, 0, 0.05, 22).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn pretraining_is_deterministic_per_seed() {
        let source = generate_dataset(4, 6, 20, 0.4, 8).unwrap();
        let spec = BackboneSpec::new(6, vec![16, 8]).unwrap();
        let a = pretrain_and_freeze(&source, &spec, 6, 0.05, 9).unwrap();
        let b = pretrain_and_freeze(&source, &spec, 6, 0.05, 9).unwrap();
        for ((wa, ba), (wb, bb_)) in a.layers().iter().zip(b.layers()) {
            assert!(wa.bits_eq(wb));
            assert!(ba.bits_eq(bb_));
        }
    }

    #[test]
    fn pretrained_source_accuracy_beats_chance() {
        // measured on this pinned seed; chance is 1/6
        let source = generate_dataset(6, 8, 30, 0.5, 13).unwrap();
        let spec = BackboneSpec::new(8, vec![24, 16]).unwrap();
        let (bb, head) = pretrain_with_head(&source, &spec, 25, 0.05, 13).unwrap();
        let acc = source_accuracy(&source, &bb, &head).unwrap();
        assert!(acc > 1.0 / 6.0 + 0.3, "accuracy {acc} too close to chance");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join("stepalign-model-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bb.sptm");
        let bb = toy_backbone(6);
        save_backbone(&path, &bb).unwrap();
        let back = load_backbone(&path).unwrap();
        assert_eq!(bb.spec(), back.spec());
        for ((wa, ba), (wb, bb_)) in bb.layers().iter().zip(back.layers()) {
            assert!(wa.bits_eq(wb));
            assert!(ba.bits_eq(bb_));
        }
    }

    #[test]
    fn checkpoint_bad_magic_is_a_format_error() {
        let dir = std::env::temp_dir().join("stepalign-model-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.sptm");
        std::fs::write(&path, b"XXXX\x01\x00\x00\x00").unwrap();
        match load_backbone(&path).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other}"),
        }
    }
}
