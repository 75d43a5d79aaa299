//! Run orchestration: seed streams, pool construction, backbone
//! provisioning, parallel episode fan-out, and the paired ablation and
//! step-size matrices.

use crate::config::RunConfig;
use crate::data::{
    apply_domain_shift, derive_seed, generate_dataset, sample_episode, Episode, LabeledDataset,
};
use crate::error::{Error, Result};
use crate::model::{load_backbone, pretrain_and_freeze, BackboneSpec, FrozenBackbone, StylePrompt};
use crate::report::{emit_style_histogram, record_episode, RunReport, Timing};
use crate::train::{run_episode, AblationMode, EpisodeResult};
use rayon::prelude::*;

// Seed streams. These constants are part of the reproducibility contract:
// changing any of them changes every stored run.
const STREAM_SOURCE: u64 = 1;
const STREAM_TARGET: u64 = 2;
const STREAM_SHIFT: u64 = 3;
const STREAM_BACKBONE: u64 = 4;
const STREAM_EPISODE: u64 = 5;
const STREAM_SHIFT_NOISE: u64 = 6;

pub fn source_pool_seed(cfg: &RunConfig) -> u64 {
    cfg.source_seed
        .unwrap_or_else(|| derive_seed(cfg.seed, STREAM_SOURCE))
}

pub fn target_pool_seed(cfg: &RunConfig) -> u64 {
    cfg.target_seed
        .unwrap_or_else(|| derive_seed(cfg.seed, STREAM_TARGET))
}

/// The labeled pool the backbone pretrains on.
pub fn build_source_pool(cfg: &RunConfig) -> Result<LabeledDataset> {
    generate_dataset(
        cfg.source_classes,
        cfg.input_dim,
        cfg.per_class,
        cfg.cluster_spread,
        source_pool_seed(cfg),
    )
}

/// The unlabeled-at-tuning-time pool episodes are drawn from: freshly
/// generated classes pushed through the preset's style shift.
pub fn build_target_pool(cfg: &RunConfig) -> Result<LabeledDataset> {
    let base = generate_dataset(
        cfg.target_classes,
        cfg.input_dim,
        cfg.per_class,
        cfg.cluster_spread,
        target_pool_seed(cfg),
    )?;
    let shift = cfg
        .preset
        .spec(cfg.input_dim, derive_seed(cfg.seed, STREAM_SHIFT));
    apply_domain_shift(&base, &shift, derive_seed(cfg.seed, STREAM_SHIFT_NOISE))
}

/// Load the configured backbone checkpoint, or pretrain one on the source
/// pool and freeze it.
pub fn provision_backbone(cfg: &RunConfig) -> Result<FrozenBackbone> {
    if let Some(path) = &cfg.backbone_path {
        let backbone = load_backbone(path)?;
        if backbone.spec().input_dim != cfg.input_dim {
            return Err(Error::config(format!(
                "backbone_path expects input_dim {}, config says {}",
                backbone.spec().input_dim,
                cfg.input_dim
            )));
        }
        return Ok(backbone);
    }
    let source = build_source_pool(cfg)?;
    let spec = BackboneSpec::new(cfg.input_dim, cfg.backbone_hidden.clone())?;
    pretrain_and_freeze(
        &source,
        &spec,
        cfg.backbone_epochs,
        cfg.backbone_lr,
        derive_seed(cfg.seed, STREAM_BACKBONE),
    )
}

/// Deterministic episode draw: episode i is fully determined by
/// `(config seed, i)` regardless of count or worker layout.
pub fn sample_episodes(cfg: &RunConfig, target: &LabeledDataset) -> Result<Vec<Episode>> {
    let base = derive_seed(cfg.seed, STREAM_EPISODE);
    (0..cfg.episodes)
        .map(|i| {
            sample_episode(
                target,
                cfg.way,
                cfg.shot,
                cfg.query_per_class,
                derive_seed(base, i as u64),
            )
            .map_err(|e| e.in_episode(i))
        })
        .collect()
}

fn tune_all(
    cfg: &RunConfig,
    backbone: &FrozenBackbone,
    episodes: &[Episode],
) -> Result<Vec<EpisodeResult>> {
    let params = cfg.trainer_params()?;
    let base = derive_seed(cfg.seed, STREAM_EPISODE);
    let work = || {
        episodes
            .par_iter()
            .enumerate()
            .map(|(i, episode)| {
                run_episode(episode, backbone, &params, derive_seed(base, i as u64))
                    .map_err(|e| e.in_episode(i))
            })
            .collect()
    };
    if cfg.threads > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::contract(format!("worker pool: {e}")))?;
        pool.install(work)
    } else {
        work()
    }
}

/// End-to-end run: provision, sample, tune every episode, aggregate.
pub fn run(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let mut timing = Timing::started_now();
    let clock = std::time::Instant::now();

    let backbone = provision_backbone(cfg)?;
    let target = build_target_pool(cfg)?;
    let episodes = sample_episodes(cfg, &target)?;
    let results = tune_all(cfg, &backbone, &episodes)?;

    let records = episodes
        .iter()
        .zip(&results)
        .enumerate()
        .map(|(i, (episode, result))| record_episode(i, episode, result))
        .collect();
    let mut report = RunReport::new(cfg.clone(), records)?;
    timing.wall_clock_seconds = clock.elapsed().as_secs_f64();
    report.timing = timing;
    Ok(report)
}

/// Tune the first episode only and dump per-channel input histograms
/// before and after prompt tuning as CSV.
pub fn run_histogram(cfg: &RunConfig) -> Result<String> {
    cfg.validate()?;
    let backbone = provision_backbone(cfg)?;
    let target = build_target_pool(cfg)?;
    let mut one = cfg.clone();
    one.episodes = 1;
    let episodes = sample_episodes(&one, &target)?;
    let params = cfg.trainer_params()?;
    let base = derive_seed(cfg.seed, STREAM_EPISODE);
    let result = run_episode(&episodes[0], &backbone, &params, derive_seed(base, 0))
        .map_err(|e| e.in_episode(0))?;
    let after = result.prompt.ok_or_else(|| {
        Error::config(format!(
            "ablation `{}` tunes no style prompt; pick a prompt-bearing mode",
            cfg.ablation
        ))
    })?;
    let before = StylePrompt::init(episodes[0].dim(), cfg.epsilon)?;
    emit_style_histogram(&episodes[0], &before, &after, cfg.histogram_bins)
}

/// One run per mode with identical seeds, so every mode sees byte-identical
/// episodes (verifiable through the membership hashes).
pub fn run_ablation_matrix(cfg: &RunConfig, modes: &[AblationMode]) -> Result<Vec<RunReport>> {
    modes
        .iter()
        .map(|&mode| {
            let mut c = cfg.clone();
            c.ablation = mode;
            run(&c)
        })
        .collect()
}

/// One run per step count, sharing seeds the same way. Counts that do not
/// divide `max_epochs` are configuration errors.
pub fn run_step_sweep(cfg: &RunConfig, step_counts: &[usize]) -> Result<Vec<RunReport>> {
    step_counts
        .iter()
        .map(|&steps| {
            let mut c = cfg.clone();
            c.steps = steps;
            run(&c)
        })
        .collect()
}
