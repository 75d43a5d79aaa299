//! Run reports: per-episode records, aggregate accuracy with a
//! normal-approximation confidence interval, versioned JSON plus CSV
//! emission, episode-membership hashes for paired-design audits, and the
//! style-prompt histogram dump.

use crate::config::RunConfig;
use crate::data::Episode;
use crate::error::{Error, Result};
use crate::model::{apply_style_prompt, compute_target_stats, StylePrompt};
use crate::train::EpisodeResult;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Sample mean with a 1.96·s/√n half-width interval (Bessel-corrected s).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub ci95: f64,
    /// True when one sample made the interval collapse to zero.
    pub degenerate_ci: bool,
}

pub fn aggregate(values: &[f64]) -> Result<Aggregate> {
    if values.is_empty() {
        return Err(Error::contract("cannot aggregate zero values"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok(Aggregate {
            mean,
            ci95: 0.0,
            degenerate_ci: true,
        });
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok(Aggregate {
        mean,
        ci95: 1.96 * var.sqrt() / n.sqrt(),
        degenerate_ci: false,
    })
}

/// Digest of which pool rows an episode drew, for verifying that paired
/// runs really saw identical episodes.
pub fn membership_hash(episode: &Episode) -> String {
    let mut h = Sha256::new();
    let mut feed = |v: u64| h.update(v.to_le_bytes());
    feed(episode.way_count as u64);
    feed(episode.shot_count as u64);
    feed(episode.support_rows.len() as u64);
    for &r in &episode.support_rows {
        feed(r as u64);
    }
    feed(episode.query_rows.len() as u64);
    for &r in &episode.query_rows {
        feed(r as u64);
    }
    let digest = h.finalize();
    let mut hex = String::with_capacity(64);
    for byte in digest {
        use std::fmt::Write;
        write!(hex, "{byte:02x}").expect("hex into string");
    }
    hex
}

/// One episode's outcome, reduced to report size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub index: usize,
    pub accuracy: f64,
    pub accuracy_lp: f64,
    pub fallback_steps: usize,
    pub membership_hash: String,
    pub final_support_ce: Option<f64>,
    pub final_external: Option<f64>,
    pub mean_step_shift: Option<f64>,
}

pub fn record_episode(index: usize, episode: &Episode, result: &EpisodeResult) -> EpisodeRecord {
    let mean_of = |xs: &[f64]| {
        if xs.is_empty() {
            None
        } else {
            Some(xs.iter().sum::<f64>() / xs.len() as f64)
        }
    };
    EpisodeRecord {
        index,
        accuracy: result.accuracy,
        accuracy_lp: result.accuracy_lp,
        fallback_steps: result.fallback_steps,
        membership_hash: membership_hash(episode),
        final_support_ce: result.ce_trace.last().copied(),
        final_external: result.external_trace.last().copied(),
        mean_step_shift: mean_of(&result.shift_trace),
    }
}

/// The only report field allowed to differ between identical runs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub started_unix_ms: u64,
    pub wall_clock_seconds: f64,
}

impl Timing {
    pub fn started_now() -> Self {
        let ms = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        Timing {
            started_unix_ms: ms,
            wall_clock_seconds: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format_version: u32,
    pub config: RunConfig,
    pub episodes: Vec<EpisodeRecord>,
    pub accuracy: Aggregate,
    pub accuracy_lp: Aggregate,
    pub timing: Timing,
}

impl RunReport {
    /// Aggregate episode records into a report. `timing` starts zeroed;
    /// the orchestrator fills it in.
    pub fn new(config: RunConfig, episodes: Vec<EpisodeRecord>) -> Result<Self> {
        if episodes.len() != config.episodes {
            return Err(Error::contract(format!(
                "report holds {} episodes but the config promised {}",
                episodes.len(),
                config.episodes
            )));
        }
        let accs: Vec<f64> = episodes.iter().map(|e| e.accuracy).collect();
        let accs_lp: Vec<f64> = episodes.iter().map(|e| e.accuracy_lp).collect();
        Ok(RunReport {
            format_version: REPORT_FORMAT_VERSION,
            config,
            episodes,
            accuracy: aggregate(&accs)?,
            accuracy_lp: aggregate(&accs_lp)?,
            timing: Timing::default(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::contract(format!("report serialization failed: {e}")))
    }

    /// JSON with the timing field zeroed; two runs of the same config and
    /// seed must agree on this byte for byte.
    pub fn deterministic_json(&self) -> Result<String> {
        let mut clone = self.clone();
        clone.timing = Timing::default();
        clone.to_json()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    /// Per-episode CSV for plotting.
    pub fn episodes_csv(&self) -> String {
        let mut out = String::from("episode,accuracy,accuracy_lp,fallback_steps\n");
        for e in &self.episodes {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.index, e.accuracy, e.accuracy_lp, e.fallback_steps
            ));
        }
        out
    }
}

/// One comparison row per report (paired ablation table).
pub fn comparison_csv(reports: &[RunReport]) -> String {
    let mut out =
        String::from("mode,episodes,mean_accuracy,ci95,mean_accuracy_lp,ci95_lp\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.config.ablation,
            r.episodes.len(),
            r.accuracy.mean,
            r.accuracy.ci95,
            r.accuracy_lp.mean,
            r.accuracy_lp.ci95
        ));
    }
    out
}

/// Per-channel input histograms before and after prompt tuning, sharing
/// bin edges per channel so the columns are directly comparable.
///
/// Output rows are `channel,bin_left,count_before,count_after`, channel
/// by channel; exactly `channels × bins` data rows.
pub fn emit_style_histogram(
    episode: &Episode,
    before: &StylePrompt,
    after: &StylePrompt,
    bins: usize,
) -> Result<String> {
    if bins < 2 {
        return Err(Error::config(format!(
            "histogram needs at least 2 bins, got {bins}"
        )));
    }
    let all_x = episode.all_inputs();
    let stats = compute_target_stats(&all_x)?;
    let xb = apply_style_prompt(&all_x, &stats, before)?;
    let xa = apply_style_prompt(&all_x, &stats, after)?;
    let (m, d) = (all_x.rows(), all_x.cols());

    let mut out = String::from("channel,bin_left,count_before,count_after\n");
    for c in 0..d {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..m {
            for v in [xb.row(i)[c], xa.row(i)[c]] {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        // degenerate channel: every value identical; park all mass in bin 0
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let mut count_b = vec![0usize; bins];
        let mut count_a = vec![0usize; bins];
        for i in 0..m {
            let slot = |v: f64| (((v - lo) / width) as usize).min(bins - 1);
            count_b[slot(xb.row(i)[c])] += 1;
            count_a[slot(xa.row(i)[c])] += 1;
        }
        for b in 0..bins {
            out.push_str(&format!(
                "{},{},{},{}\n",
                c,
                lo + b as f64 * width,
                count_b[b],
                count_a[b]
            ));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, sample_episode};

    #[test]
    fn interval_matches_the_hand_computed_pair() {
        let a = aggregate(&[0.8, 0.6]).unwrap();
        assert!((a.mean - 0.7).abs() < 1e-12);
        assert!((a.ci95 - 0.196).abs() < 1e-12);
        assert!(!a.degenerate_ci);
    }

    #[test]
    fn single_sample_interval_is_zero_and_flagged() {
        let a = aggregate(&[0.5]).unwrap();
        assert_eq!(a.ci95, 0.0);
        assert!(a.degenerate_ci);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn identical_values_give_a_zero_interval() {
        let a = aggregate(&[0.4; 10]).unwrap();
        assert!((a.mean - 0.4).abs() < 1e-12);
        assert!(a.ci95.abs() < 1e-12);
    }

    fn episode(seed: u64) -> Episode {
        let pool = generate_dataset(5, 4, 10, 0.5, seed).unwrap();
        sample_episode(&pool, 3, 2, 3, seed + 100).unwrap()
    }

    #[test]
    fn membership_hash_tracks_the_drawn_rows() {
        let a = episode(1);
        let b = episode(1);
        let c = episode(2);
        assert_eq!(membership_hash(&a), membership_hash(&b));
        assert_ne!(membership_hash(&a), membership_hash(&c));
        assert_eq!(membership_hash(&a).len(), 64);
    }

    fn tiny_report(seed: u64) -> RunReport {
        let mut cfg = RunConfig::default();
        cfg.episodes = 2;
        let e0 = episode(seed);
        let e1 = episode(seed + 1);
        let fake = |acc: f64, ep: &Episode| EpisodeRecord {
            index: 0,
            accuracy: acc,
            accuracy_lp: acc,
            fallback_steps: 0,
            membership_hash: membership_hash(ep),
            final_support_ce: Some(1.0),
            final_external: None,
            mean_step_shift: None,
        };
        RunReport::new(cfg, vec![fake(0.8, &e0), fake(0.6, &e1)]).unwrap()
    }

    #[test]
    fn deterministic_json_ignores_timing() {
        let mut a = tiny_report(3);
        let mut b = tiny_report(3);
        a.timing = Timing {
            started_unix_ms: 111,
            wall_clock_seconds: 5.0,
        };
        b.timing = Timing {
            started_unix_ms: 999,
            wall_clock_seconds: 7.5,
        };
        assert_ne!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_eq!(
            a.deterministic_json().unwrap(),
            b.deterministic_json().unwrap()
        );
    }

    #[test]
    fn report_length_must_match_the_config() {
        let mut cfg = RunConfig::default();
        cfg.episodes = 3;
        let e = episode(9);
        let rec = EpisodeRecord {
            index: 0,
            accuracy: 0.5,
            accuracy_lp: 0.5,
            fallback_steps: 0,
            membership_hash: membership_hash(&e),
            final_support_ce: None,
            final_external: None,
            mean_step_shift: None,
        };
        assert!(RunReport::new(cfg, vec![rec]).is_err());
    }

    #[test]
    fn csv_emission_has_one_row_per_episode() {
        let r = tiny_report(4);
        let csv = r.episodes_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("episode,accuracy"));
        let cmp = comparison_csv(&[r]);
        assert_eq!(cmp.lines().count(), 2);
        assert!(cmp.contains("full,2,0.7"));
    }

    #[test]
    fn identity_prompt_histogram_columns_agree() {
        let ep = episode(5);
        let identity = StylePrompt::init(ep.dim(), 1e-5).unwrap();
        let csv = emit_style_histogram(&ep, &identity, &identity, 8).unwrap();
        let rows: Vec<&str> = csv.lines().skip(1).collect();
        assert_eq!(rows.len(), ep.dim() * 8);
        let m = ep.sample_total();
        let mut per_channel = vec![(0usize, 0usize); ep.dim()];
        for row in rows {
            let cols: Vec<&str> = row.split(',').collect();
            let channel: usize = cols[0].parse().unwrap();
            let cb: usize = cols[2].parse().unwrap();
            let ca: usize = cols[3].parse().unwrap();
            assert_eq!(cb, ca, "identity prompt must not move any mass");
            per_channel[channel].0 += cb;
            per_channel[channel].1 += ca;
        }
        for (cb, ca) in per_channel {
            assert_eq!(cb, m);
            assert_eq!(ca, m);
        }
    }

    #[test]
    fn shifted_prompt_moves_histogram_mass() {
        let ep = episode(6);
        let identity = StylePrompt::init(ep.dim(), 1e-5).unwrap();
        let mut moved = StylePrompt::init(ep.dim(), 1e-5).unwrap();
        let deltas: Vec<f64> = vec![3.0; ep.dim()];
        moved.omega2.apply_delta(&deltas);
        let csv = emit_style_histogram(&ep, &identity, &moved, 8).unwrap();
        let differs = csv
            .lines()
            .skip(1)
            .any(|row| {
                let cols: Vec<&str> = row.split(',').collect();
                cols[2] != cols[3]
            });
        assert!(differs);
        assert!(emit_style_histogram(&ep, &identity, &moved, 1).is_err());
    }
}
