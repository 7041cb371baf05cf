//! Reference scenarios shared by the acceptance suite, the CLI and the
//! Python bindings. All of them run on the virtual clock so that transfer
//! decisions, and therefore results, are reproducible.

use crate::ingest::SyntheticWorldConfig;
use crate::pipeline::{ClockMode, PipelineConfig};

/// Names accepted by [`preset`].
pub const PRESETS: [&str; 3] = ["benchmark", "timing", "retrieval"];

/// Loop threshold grid for precision/recall sweeps.
pub const BENCHMARK_THRESHOLDS: &str = "0.05,0.1,...,0.9";

/// Finite budget used against the unbounded run on the benchmark world.
pub const BENCHMARK_T_TIME: f64 = 0.002;

/// Unbounded, mid and small budgets for the timing world.
pub const TIMING_BUDGETS: [f64; 3] = [f64::INFINITY, 0.03, 0.015];

/// Budget under which the retrieval world pushes the revisited route to LTM.
pub const RETRIEVAL_T_TIME: f64 = 0.003;

/// Detector settings for the synthetic scenarios. The worlds are far
/// smaller than a real trajectory, so STM and the minimum hypothesis count
/// are scaled down with them.
pub fn scenario_config() -> PipelineConfig {
    PipelineConfig {
        stm_size: 2,
        t_min_hyp: 5,
        clock: ClockMode::Virtual,
        ..PipelineConfig::default()
    }
}

/// Ten places driven around the same loop sixty times (600 frames).
pub fn benchmark_world() -> SyntheticWorldConfig {
    SyntheticWorldConfig {
        num_places: 10,
        words_per_place: 40,
        dim: 64,
        revisit_script: (0..60).flat_map(|_| 0..10).collect(),
        noise_sigma: 0.05,
        dropout_rate: 0.2,
        aliasing_rate: 0.3,
        seed: 7,
    }
}

/// 3000 frames of mostly new territory: blocks of fifty new places, each
/// block driven twice. Working memory grows steadily without a budget.
pub fn timing_world() -> SyntheticWorldConfig {
    SyntheticWorldConfig {
        num_places: 1500,
        words_per_place: 20,
        dim: 32,
        revisit_script: (0..30)
            .flat_map(|b| (0..2).flat_map(move |_| b * 50..b * 50 + 50))
            .collect(),
        noise_sigma: 0.05,
        dropout_rate: 0.2,
        aliasing_rate: 0.2,
        seed: 7,
    }
}

/// A long dwell at place 5 gives it a high weight, so it survives in WM
/// while its low-weight neighbours go to LTM during the following
/// exploration. The stream then drives back along places 5 to 20.
pub fn retrieval_world() -> SyntheticWorldConfig {
    let mut script: Vec<usize> = (0..5).collect();
    script.extend(std::iter::repeat_n(5, 10));
    script.extend(6..100);
    script.extend(5..=20);
    SyntheticWorldConfig {
        num_places: 100,
        words_per_place: 40,
        dim: 64,
        revisit_script: script,
        noise_sigma: 0.05,
        dropout_rate: 0.2,
        aliasing_rate: 0.2,
        seed: 7,
    }
}

/// Frame at which the retrieval world starts driving back.
pub const RETRIEVAL_REVISIT_START: usize = 109;

pub fn preset(name: &str) -> Option<SyntheticWorldConfig> {
    match name {
        "benchmark" => Some(benchmark_world()),
        "timing" => Some(timing_world()),
        "retrieval" => Some(retrieval_world()),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for name in PRESETS {
            preset(name).unwrap().validate().unwrap();
        }
        assert!(preset("nope").is_none());
        scenario_config().validate().unwrap();
    }

    #[test]
    fn scenario_shapes() {
        let b = benchmark_world();
        assert_eq!(b.revisit_script.len(), 600);
        assert_eq!(b.revisit_script[..12], [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 0, 1]);
        let t = timing_world();
        assert_eq!(t.revisit_script.len(), 3000);
        assert_eq!(t.revisit_script[49..52], [49, 0, 1]);
        assert_eq!(t.revisit_script[100], 50);
        let r = retrieval_world();
        assert_eq!(r.revisit_script[RETRIEVAL_REVISIT_START - 1], 99);
        assert_eq!(r.revisit_script[RETRIEVAL_REVISIT_START], 5);
        assert_eq!(r.revisit_script.len(), RETRIEVAL_REVISIT_START + 16);
    }
}
