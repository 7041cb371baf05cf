//! Precision/recall against ground truth and timing statistics.

mod plot;
pub mod worlds;

use std::collections::BTreeSet;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use crate::ingest::{DescriptorSet, GroundTruth};
use crate::pipeline::{detections, Detection, Detector, IterationReport, PipelineConfig, PipelineError};
use crate::store::StoreOptions;

pub use plot::{pr_curve_svg, timing_svg};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no iteration reports to summarize")]
    Empty,
    #[error("threshold {0} outside (0, 1]")]
    Threshold(f64),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// One operating point.
#[derive(Clone, Debug, PartialEq)]
pub struct PrPoint {
    pub threshold: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    /// Query images with at least one ground-truth match.
    pub gt_count: usize,
}

impl std::fmt::Display for PrPoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if let Some(t) = self.threshold {
            write!(f, "threshold={t} ")?;
        }
        write!(
            f,
            "precision={:.4} recall={:.4} tp={} fp={} gt_count={}",
            self.precision, self.recall, self.tp, self.fp, self.gt_count
        )
    }
}

/// A detection is correct when one of the matched images is a ground-truth
/// match of the query. Recall counts each query image once.
pub fn score(detections: &[Detection], gt: &GroundTruth) -> PrPoint {
    let mut tp = 0;
    let mut fp = 0;
    let mut found = BTreeSet::new();
    for d in detections {
        if d.matched.iter().any(|&m| gt.contains(d.image_id, m)) {
            tp += 1;
            found.insert(d.image_id);
        } else {
            fp += 1;
        }
    }
    let queries = gt.query_images();
    let gt_count = queries.len();
    PrPoint {
        threshold: None,
        precision: if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 },
        recall: if gt_count == 0 {
            0.0
        } else {
            found.intersection(&queries).count() as f64 / gt_count as f64
        },
        tp,
        fp,
        gt_count,
    }
}

/// How a threshold sweep obtains detections.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepMode {
    /// One run at the lowest threshold; each threshold then filters the
    /// recorded best hypotheses.
    Replay,
    /// One full run per threshold.
    Rerun,
}

impl std::str::FromStr for SweepMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "replay" => Ok(SweepMode::Replay),
            "rerun" => Ok(SweepMode::Rerun),
            _ => Err(format!("unknown sweep mode {s:?} (expected replay or rerun)")),
        }
    }
}

/// Detections a run would have made with loop threshold `t_loop`, read off
/// the recorded best hypotheses.
pub fn replay_detections(reports: &[IterationReport], t_loop: f64) -> Vec<Detection> {
    reports
        .iter()
        .filter(|r| r.eligible && r.candidate.is_some_and(|h| h.probability > t_loop))
        .map(|r| Detection {
            image_id: r.image_id,
            matched: r.candidate_images.clone(),
        })
        .collect()
}

/// Runs a stream through a fresh detector. When `store_path` is given the
/// long-term store lives there (an existing file is replaced).
pub fn run_stream(
    stream: &[DescriptorSet],
    config: PipelineConfig,
    store_path: Option<&Path>,
) -> Result<Vec<IterationReport>, EvalError> {
    let mut detector = match store_path {
        Some(p) => {
            if p.exists() {
                std::fs::remove_file(p)?;
            }
            Detector::with_store_path(config, p, StoreOptions::default())?
        }
        None => Detector::new(config)?,
    };
    let reports = detector.run(stream.iter().cloned())?;
    detector.finish()?;
    Ok(reports)
}

/// Precision/recall for each threshold. Stores of the runs are kept in
/// `workdir`.
pub fn pr_sweep(
    stream: &[DescriptorSet],
    gt: &GroundTruth,
    config: &PipelineConfig,
    thresholds: &[f64],
    mode: SweepMode,
    workdir: &Path,
) -> Result<Vec<PrPoint>, EvalError> {
    if let Some(&t) = thresholds.iter().find(|&&t| !(t > 0.0 && t <= 1.0)) {
        return Err(EvalError::Threshold(t));
    }
    if thresholds.is_empty() {
        return Ok(Vec::new());
    }
    std::fs::create_dir_all(workdir)?;
    let with_threshold = |t: f64, detections: &[Detection]| PrPoint {
        threshold: Some(t),
        ..score(detections, gt)
    };
    match mode {
        SweepMode::Replay => {
            let lowest = thresholds.iter().copied().fold(f64::INFINITY, f64::min);
            let cfg = PipelineConfig {
                t_loop: lowest,
                ..config.clone()
            };
            let reports = run_stream(stream, cfg, Some(&workdir.join("ltm-replay.db")))?;
            Ok(thresholds
                .iter()
                .map(|&t| with_threshold(t, &replay_detections(&reports, t)))
                .collect())
        }
        SweepMode::Rerun => thresholds
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let cfg = PipelineConfig {
                    t_loop: t,
                    ..config.clone()
                };
                let reports = run_stream(stream, cfg, Some(&workdir.join(format!("ltm-rerun-{i}.db"))))?;
                Ok(with_threshold(t, &detections(&reports)))
            })
            .collect(),
    }
}

/// Best recall among points with full precision.
pub fn recall_at_full_precision(points: &[PrPoint]) -> Option<&PrPoint> {
    points
        .iter()
        .filter(|p| p.precision >= 1.0 && p.tp > 0)
        .max_by(|a, b| a.recall.total_cmp(&b.recall))
}

pub const PR_CSV_HEADER: &str = "threshold,precision,recall,tp,fp,gt_count";

pub fn write_pr_csv<W: Write>(mut out: W, points: &[PrPoint]) -> io::Result<()> {
    writeln!(out, "{PR_CSV_HEADER}")?;
    for p in points {
        let t = p.threshold.map(|t| t.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{t},{:.6},{:.6},{},{},{}",
            p.precision, p.recall, p.tp, p.fp, p.gt_count
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingSummary {
    pub iterations: usize,
    pub max: f64,
    pub mean: f64,
    /// Nearest-rank 95th percentile.
    pub p95: f64,
    pub max_wm: usize,
    pub max_dict: usize,
}

impl std::fmt::Display for TimingSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "iterations={} max={:.6}s mean={:.6}s p95={:.6}s max_wm={} max_dict={}",
            self.iterations, self.max, self.mean, self.p95, self.max_wm, self.max_dict
        )
    }
}

pub fn timing_summary(reports: &[IterationReport]) -> Result<TimingSummary, EvalError> {
    let elapsed: Vec<f64> = reports.iter().map(|r| r.elapsed).collect();
    summarize_timing(
        &elapsed,
        reports.iter().map(|r| r.wm_size).max().unwrap_or(0),
        reports.iter().map(|r| r.dict_size).max().unwrap_or(0),
    )
}

/// Timing statistics from raw iteration times.
pub fn summarize_timing(
    elapsed: &[f64],
    max_wm: usize,
    max_dict: usize,
) -> Result<TimingSummary, EvalError> {
    if elapsed.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut times = elapsed.to_vec();
    times.sort_by(f64::total_cmp);
    let n = times.len();
    let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
    Ok(TimingSummary {
        iterations: n,
        max: times[n - 1],
        mean: times.iter().sum::<f64>() / n as f64,
        p95: times[rank - 1],
        max_wm,
        max_dict,
    })
}

/// Trailing moving average; the first `window - 1` entries average over
/// what is available.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// Expands a threshold list. Entries are separated by commas; `...`
/// between two values continues the step of the two values before it,
/// e.g. `0.05,0.1,...,0.9`.
pub fn parse_thresholds(text: &str) -> Result<Vec<f64>, String> {
    let parts: Vec<&str> = text.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    let mut out: Vec<f64> = Vec::new();
    let mut i = 0;
    while i < parts.len() {
        if parts[i] == "..." {
            let end: f64 = parts
                .get(i + 1)
                .ok_or("\"...\" needs an end value")?
                .parse()
                .map_err(|_| format!("invalid threshold {:?}", parts[i + 1]))?;
            let [.., a, b] = out[..] else {
                return Err("\"...\" needs two values before it".into());
            };
            let step = b - a;
            if step.is_nan() || step <= 0.0 {
                return Err("\"...\" needs increasing values".into());
            }
            let mut k = 1;
            loop {
                let v = b + step * k as f64;
                if v > end + step * 1e-6 {
                    break;
                }
                // Round away accumulated binary noise.
                out.push((v * 1e9).round() / 1e9);
                k += 1;
            }
            if out.last().is_none_or(|&l| (l - end).abs() > step * 1e-6) {
                out.push(end);
            }
            i += 2;
        } else {
            out.push(parts[i].parse().map_err(|_| format!("invalid threshold {:?}", parts[i]))?);
            i += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(q: u64, m: &[u64]) -> Detection {
        Detection {
            image_id: q,
            matched: m.to_vec(),
        }
    }

    #[test]
    fn score_trivial_cases() {
        let gt: GroundTruth = [(5, 1), (6, 2), (7, 1), (7, 3)].into_iter().collect();
        let none = score(&[], &gt);
        assert_eq!((none.precision, none.recall, none.gt_count), (1.0, 0.0, 3));
        let all = score(&[det(5, &[1]), det(6, &[2, 0]), det(7, &[3])], &gt);
        assert_eq!((all.precision, all.recall, all.tp, all.fp), (1.0, 1.0, 3, 0));
        let mixed = score(&[det(5, &[2]), det(6, &[2])], &gt);
        assert_eq!((mixed.precision, mixed.tp, mixed.fp), (0.5, 1, 1));
    }

    #[test]
    fn score_matches_naive_scorer_and_ignores_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let pairs: Vec<(u64, u64)> = (0..rng.random_range(0..15))
                .map(|_| (rng.random_range(0..20), rng.random_range(0..20)))
                .filter(|(a, b)| a != b)
                .collect();
            let gt: GroundTruth = pairs.iter().copied().collect();
            let mut log: Vec<Detection> = (0..rng.random_range(0..10))
                .map(|_| {
                    let k = rng.random_range(1..4);
                    det(rng.random_range(0..20), &(0..k).map(|_| rng.random_range(0..20)).collect::<Vec<_>>())
                })
                .collect();
            // Naive scorer over the raw pair list.
            let hit = |d: &Detection| {
                d.matched
                    .iter()
                    .any(|&m| pairs.iter().any(|&(a, b)| (a, b) == (d.image_id, m) || (b, a) == (d.image_id, m)))
            };
            let tp = log.iter().filter(|d| hit(d)).count();
            let queries: BTreeSet<u64> = pairs.iter().map(|&(a, b)| a.max(b)).collect();
            let found: BTreeSet<u64> = log
                .iter()
                .filter(|d| hit(d) && queries.contains(&d.image_id))
                .map(|d| d.image_id)
                .collect();
            let p = score(&log, &gt);
            assert_eq!(p.tp, tp);
            assert_eq!(p.fp, log.len() - tp);
            assert_eq!(p.gt_count, queries.len());
            let recall = if queries.is_empty() { 0.0 } else { found.len() as f64 / queries.len() as f64 };
            assert_eq!(p.recall, recall);
            log.reverse();
            assert_eq!(score(&log, &gt), p);
        }
    }

    fn report(elapsed: f64, wm: usize) -> IterationReport {
        IterationReport {
            image_id: 0,
            location: 0,
            elapsed,
            accepted: None,
            matched_images: Vec::new(),
            candidate: None,
            candidate_images: Vec::new(),
            hypothesis_wm_size: wm,
            eligible: false,
            rehearsed: false,
            retrieved: Vec::new(),
            transferred: Vec::new(),
            deleted: Vec::new(),
            wm_size: wm,
            stm_size: 0,
            ltm_size: 0,
            dict_size: wm * 2,
        }
    }

    #[test]
    fn timing_examples() {
        assert!(matches!(timing_summary(&[]), Err(EvalError::Empty)));
        let one = timing_summary(&[report(0.3, 1)]).unwrap();
        assert_eq!((one.max, one.mean, one.p95), (0.3, 0.3, 0.3));
        let flat: Vec<_> = (0..37).map(|i| report(0.25, i)).collect();
        let s = timing_summary(&flat).unwrap();
        assert_eq!(s.p95, 0.25);
        assert_eq!((s.max_wm, s.max_dict), (36, 72));
    }

    #[test]
    fn timing_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in 1..60 {
            let times: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let reports: Vec<_> = times.iter().map(|&t| report(t, 0)).collect();
            let mut sorted = times.clone();
            sorted.sort_by(f64::total_cmp);
            // Smallest value with at least 95% of the sample at or below it.
            let p95 = *sorted
                .iter()
                .find(|&&v| sorted.iter().filter(|&&x| x <= v).count() as f64 >= 0.95 * n as f64)
                .unwrap();
            let s = timing_summary(&reports).unwrap();
            assert_eq!(s.p95, p95);
            assert_eq!(s.max, sorted[n - 1]);
            assert!((s.mean - times.iter().sum::<f64>() / n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn threshold_lists() {
        let t = parse_thresholds("0.05,0.1,...,0.9").unwrap();
        assert_eq!(t.len(), 18);
        assert_eq!(t[2], 0.15);
        assert_eq!(*t.last().unwrap(), 0.9);
        assert_eq!(parse_thresholds("0.2, 0.5").unwrap(), vec![0.2, 0.5]);
        assert!(parse_thresholds("0.1,...,0.5").is_err());
        assert!(parse_thresholds("a").is_err());
    }

    #[test]
    fn moving_average_window() {
        let ma = moving_average(&[1.0, 2.0, 3.0, 4.0], 2);
        assert_eq!(ma, vec![1.0, 1.5, 2.5, 3.5]);
    }

    #[test]
    fn replay_is_monotone_in_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let reports: Vec<IterationReport> = (0..200)
            .map(|i| {
                let mut r = report(0.0, 20);
                r.image_id = i;
                r.eligible = rng.random_bool(0.8);
                r.candidate = Some(crate::bayes::Hypothesis {
                    location: 0,
                    probability: rng.random(),
                });
                r
            })
            .collect();
        let mut last = usize::MAX;
        for k in 1..=20 {
            let n = replay_detections(&reports, k as f64 / 20.0).len();
            assert!(n <= last);
            last = n;
        }
        assert_eq!(last, 0);
    }
}
