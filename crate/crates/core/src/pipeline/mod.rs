//! The per-observation processing cycle.
//!
//! [`Detector::process`] runs, in order: quantization into a new location,
//! rehearsal against the STM, STM insertion and promotion, the filter update
//! over the WM, hypothesis selection and loop closure merging, retrieval
//! around the best hypothesis and, when the iteration has used up its time
//! budget, transfer of WM locations to the long-term store.

mod config;

use std::io::{self, Write};
use std::path::Path;
use std::time::Instant;

use thiserror::Error;

use crate::bayes::{
    best_candidate, compute_likelihood, predict, update, Hypothesis, Posterior, TransitionParams,
};
use crate::dictionary::Dictionary;
use crate::ingest::DescriptorSet;
use crate::memory::{Memory, MemoryConfig, MemoryError};
use crate::store::{LtmStore, StoreError, StoreOptions};
use crate::{ImageId, LocationId};

pub use config::{parse_seconds, ClockMode, PipelineConfig, VirtualCosts};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("filter invariant violated: {0}")]
    Invariant(String),
}

/// What happened while processing one image.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationReport {
    pub image_id: ImageId,
    /// Location created for the image (it may have absorbed an STM one).
    pub location: LocationId,
    /// Iteration time in seconds.
    pub elapsed: f64,
    pub accepted: Option<Hypothesis>,
    /// Member images of the accepted location.
    pub matched_images: Vec<ImageId>,
    /// Best hypothesis before the acceptance gates.
    pub candidate: Option<Hypothesis>,
    pub candidate_images: Vec<ImageId>,
    /// WM size when the hypothesis was selected.
    pub hypothesis_wm_size: usize,
    /// Whether the candidate passed every gate but the loop threshold.
    pub eligible: bool,
    pub rehearsed: bool,
    pub retrieved: Vec<LocationId>,
    pub transferred: Vec<LocationId>,
    pub deleted: Vec<LocationId>,
    pub wm_size: usize,
    pub stm_size: usize,
    pub ltm_size: usize,
    pub dict_size: usize,
}

/// A query image and the images of the location it closed a loop with.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Detection {
    pub image_id: ImageId,
    pub matched: Vec<ImageId>,
}

impl std::fmt::Display for Detection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let list: Vec<String> = self.matched.iter().map(|m| m.to_string()).collect();
        write!(f, "{}: {}", self.image_id, list.join(","))
    }
}

impl Detection {
    /// Parses a line `query: m1,m2`.
    pub fn parse(line: &str) -> Option<Self> {
        let (q, rest) = line.split_once(':')?;
        let image_id = q.trim().parse().ok()?;
        let matched = rest
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().ok())
            .collect::<Option<Vec<_>>>()?;
        Some(Self { image_id, matched })
    }
}

pub fn detections(reports: &[IterationReport]) -> Vec<Detection> {
    reports
        .iter()
        .filter(|r| r.accepted.is_some())
        .map(|r| Detection {
            image_id: r.image_id,
            matched: r.matched_images.clone(),
        })
        .collect()
}

pub fn write_detection_log<W: Write>(mut out: W, detections: &[Detection]) -> io::Result<()> {
    for d in detections {
        writeln!(out, "{d}")?;
    }
    Ok(())
}

/// Reads a detection log; blank and `#` lines are skipped.
pub fn parse_detection_log(text: &str) -> Result<Vec<Detection>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| Detection::parse(l).ok_or_else(|| format!("line {}: malformed detection", i + 1)))
        .collect()
}

pub const ITERATION_CSV_HEADER: &str =
    "image_id,elapsed_s,wm_size,stm_size,dict_size,hypothesis_id,hypothesis_p,retrieved,transferred";

pub fn write_iterations_csv<W: Write>(mut out: W, reports: &[IterationReport]) -> io::Result<()> {
    writeln!(out, "{ITERATION_CSV_HEADER}")?;
    for r in reports {
        let (id, p) = match r.accepted {
            Some(h) => (h.location.to_string(), format!("{:.9}", h.probability)),
            None => (String::new(), String::new()),
        };
        writeln!(
            out,
            "{},{:.9},{},{},{},{},{},{},{}",
            r.image_id,
            r.elapsed,
            r.wm_size,
            r.stm_size,
            r.dict_size,
            id,
            p,
            r.retrieved.len(),
            r.transferred.len()
        )?;
    }
    Ok(())
}

/// One row of the iteration CSV read back.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationRow {
    pub image_id: ImageId,
    pub elapsed: f64,
    pub wm_size: usize,
    pub stm_size: usize,
    pub dict_size: usize,
    pub hypothesis: Option<(LocationId, f64)>,
    pub retrieved: usize,
    pub transferred: usize,
}

pub fn parse_iterations_csv(text: &str) -> Result<Vec<IterationRow>, String> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == ITERATION_CSV_HEADER => {}
        _ => return Err("missing iteration CSV header".into()),
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let err = || format!("line {}: malformed iteration row", i + 1);
            let f: Vec<&str> = line.trim().split(',').collect();
            if f.len() != 9 {
                return Err(err());
            }
            fn num<T: std::str::FromStr>(s: &str) -> Option<T> {
                s.parse().ok()
            }
            let hypothesis = match (f[5], f[6]) {
                ("", "") => None,
                (id, p) => Some((num(id).ok_or_else(err)?, num(p).ok_or_else(err)?)),
            };
            Ok(IterationRow {
                image_id: num(f[0]).ok_or_else(err)?,
                elapsed: num(f[1]).ok_or_else(err)?,
                wm_size: num(f[2]).ok_or_else(err)?,
                stm_size: num(f[3]).ok_or_else(err)?,
                dict_size: num(f[4]).ok_or_else(err)?,
                hypothesis,
                retrieved: num(f[7]).ok_or_else(err)?,
                transferred: num(f[8]).ok_or_else(err)?,
            })
        })
        .collect()
}

struct IterationClock {
    mode: ClockMode,
    start: Instant,
    charged: f64,
}

impl IterationClock {
    fn start(mode: ClockMode) -> Self {
        Self {
            mode,
            start: Instant::now(),
            charged: 0.0,
        }
    }

    fn charge(&mut self, seconds: f64) {
        self.charged += seconds;
    }

    fn elapsed(&self) -> f64 {
        match self.mode {
            ClockMode::Wall => self.start.elapsed().as_secs_f64(),
            ClockMode::Virtual => self.charged,
        }
    }
}

/// Loop closure detector: memory, filter state and configuration.
#[derive(Debug)]
pub struct Detector {
    config: PipelineConfig,
    memory: Memory,
    posterior: Posterior,
    transition: TransitionParams,
    iteration: u64,
}

impl Detector {
    /// A detector without long-term store. A transfer then fails, so this
    /// only suits runs with an infinite time budget.
    pub fn new(config: PipelineConfig) -> Result<Self, PipelineError> {
        Self::build(config, None)
    }

    pub fn with_store(config: PipelineConfig, store: LtmStore) -> Result<Self, PipelineError> {
        Self::build(config, Some(store))
    }

    /// Opens (creating or appending to) the store at `path`.
    pub fn with_store_path(
        config: PipelineConfig,
        path: impl AsRef<Path>,
        options: StoreOptions,
    ) -> Result<Self, PipelineError> {
        let store = LtmStore::open(path, options)?;
        Self::build(config, Some(store))
    }

    fn build(config: PipelineConfig, store: Option<LtmStore>) -> Result<Self, PipelineError> {
        config.validate()?;
        let memory_config = MemoryConfig {
            stm_size: config.stm_size,
            t_rehearsal: config.t_rehearsal,
            ..MemoryConfig::default()
        };
        let transition = TransitionParams {
            gaussian_sigma: config.gaussian_sigma,
            radius: memory_config.neighborhood,
            ..TransitionParams::default()
        };
        let dictionary = Dictionary::new(config.match_ratio, config.index.clone());
        Ok(Self {
            memory: Memory::new(memory_config, dictionary, store),
            posterior: Posterior::initial(),
            transition,
            iteration: 0,
            config,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn memory(&self) -> &Memory {
        &self.memory
    }

    pub fn posterior(&self) -> &Posterior {
        &self.posterior
    }

    /// Number of images processed so far.
    pub fn iterations(&self) -> u64 {
        self.iteration
    }

    /// Processes one image.
    pub fn process(&mut self, set: &DescriptorSet) -> Result<IterationReport, PipelineError> {
        let costs = self.config.costs.clone();
        let radius = self.memory.config().neighborhood;
        let mut clock = IterationClock::start(self.config.clock);
        self.memory.begin_iteration();

        let dict_before = self.memory.dictionary().len();
        self.memory.dictionary_mut().maintain_index();
        clock.charge(costs.iteration + costs.per_word * dict_before as f64);

        // Location creation and rehearsal.
        let lt = self.memory.create_location(set, self.iteration)?;
        clock.charge(costs.per_descriptor * set.len() as f64 * ((dict_before + 2) as f64).log2());
        let rehearsed = self.memory.rehearse(lt)?.is_some();
        if let Some(promoted) = self.memory.push_stm(lt) {
            self.posterior.adjust_states(&[], &[promoted]);
        }

        // Filter update.
        let hypothesis_wm_size = self.memory.wm().len();
        // A featureless image cannot close a loop.
        let informative = !self.memory.location(lt).expect("just created").signature.is_empty();
        clock.charge(costs.per_wm_state * hypothesis_wm_size as f64);
        if hypothesis_wm_size == 0 {
            self.posterior = Posterior::initial();
        } else {
            let current = &self.memory.location(lt).expect("just created").signature;
            let likelihood = compute_likelihood(current, &self.memory.wm_signatures());
            let prior = predict(&self.posterior, self.memory.wm(), self.memory.graph(), &self.transition);
            self.posterior = update(&prior, &likelihood);
        }

        // Hypothesis selection and merging.
        let candidate = best_candidate(&self.posterior, self.memory.graph(), radius);
        let eligible = informative && hypothesis_wm_size >= self.config.t_min_hyp;
        let accepted = candidate.filter(|h| eligible && h.probability > self.config.t_loop);
        let images_of = |m: &Memory, h: Option<Hypothesis>| {
            h.and_then(|h| m.location(h.location))
                .map(|l| l.member_images.clone())
                .unwrap_or_default()
        };
        let candidate_images = images_of(&self.memory, candidate);
        let matched_images = images_of(&self.memory, accepted);
        let top = candidate.map(|h| h.location);
        let deleted = self.memory.delete_stale_merged(top)?;
        self.posterior.adjust_states(&deleted, &[]);
        if let Some(h) = accepted {
            self.memory.merge_loop_closure(lt, h.location)?;
        }

        // Retrieval around the best hypothesis.
        let mut retrieved = Vec::new();
        if let (true, Some(t)) = (self.config.retrieval, top) {
            retrieved = self.memory.retrieve(t)?;
            self.posterior.adjust_states(&[], &retrieved);
            clock.charge(costs.per_retrieval * retrieved.len() as f64);
        }

        // Transfer when over budget.
        let mut transferred = Vec::new();
        if clock.elapsed() > self.config.t_time {
            let words_added = self.memory.dictionary().len().saturating_sub(dict_before);
            transferred = self.memory.select_transfer_victims(words_added, top);
            self.memory.transfer(&transferred)?;
            self.posterior.adjust_states(&transferred, &[]);
            clock.charge(costs.per_transfer * transferred.len() as f64);
        }

        if self.config.check_invariants {
            self.check_invariants()?;
        }
        self.iteration += 1;
        Ok(IterationReport {
            image_id: set.image_id,
            location: lt,
            elapsed: clock.elapsed(),
            accepted,
            matched_images,
            candidate,
            candidate_images,
            hypothesis_wm_size,
            eligible,
            rehearsed,
            retrieved,
            transferred,
            deleted,
            wm_size: self.memory.wm().len(),
            stm_size: self.memory.stm_len(),
            ltm_size: self.memory.ltm().len(),
            dict_size: self.memory.dictionary().len(),
        })
    }

    /// Memory invariants plus agreement of the filter's states with the WM.
    pub fn check_invariants(&self) -> Result<(), PipelineError> {
        self.memory.check_invariants()?;
        if !self.posterior.states().eq(self.memory.wm().iter().copied()) {
            return Err(PipelineError::Invariant("filter states differ from WM".into()));
        }
        let total = self.posterior.total();
        if (total - 1.0).abs() > 1e-9 {
            return Err(PipelineError::Invariant(format!("posterior sums to {total}")));
        }
        if self.posterior.new_place < 0.0 || self.posterior.locations.values().any(|&p| p < 0.0) {
            return Err(PipelineError::Invariant("negative probability".into()));
        }
        Ok(())
    }

    /// Processes a whole stream.
    pub fn run<I>(&mut self, stream: I) -> Result<Vec<IterationReport>, PipelineError>
    where
        I: IntoIterator<Item = DescriptorSet>,
    {
        stream.into_iter().map(|set| self.process(&set)).collect()
    }

    /// Flushes and closes the long-term store.
    pub fn finish(mut self) -> Result<(), PipelineError> {
        if let Some(store) = self.memory.take_store() {
            store.close()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{generate_synthetic, Descriptor, SyntheticWorldConfig};

    fn small_config() -> PipelineConfig {
        PipelineConfig {
            clock: ClockMode::Virtual,
            check_invariants: true,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn first_image() {
        let mut d = Detector::new(small_config()).unwrap();
        let set = DescriptorSet::new(0, vec![Descriptor::new(vec![0.0, 1.0]).unwrap()], 0.0);
        let r = d.process(&set).unwrap();
        assert_eq!((r.wm_size, r.stm_size), (0, 1));
        assert!(r.accepted.is_none());
    }

    #[test]
    fn empty_stream_and_empty_images() {
        let mut d = Detector::new(small_config()).unwrap();
        assert!(d.run(Vec::new()).unwrap().is_empty());
        let sets: Vec<_> = (0..40).map(|i| DescriptorSet::new(i, Vec::new(), i as f64)).collect();
        let reports = d.run(sets).unwrap();
        assert_eq!(reports.last().unwrap().wm_size, 15);
        assert!(reports.iter().all(|r| r.accepted.is_none() && !r.rehearsed));
    }

    #[test]
    fn identical_images_collapse() {
        let mut d = Detector::new(small_config()).unwrap();
        let descs: Vec<Descriptor> = (0..5)
            .map(|i| Descriptor::new(vec![i as f32, (i * i) as f32, 1.0]).unwrap())
            .collect();
        for t in 0..10 {
            d.process(&DescriptorSet::new(t, descs.clone(), t as f64)).unwrap();
        }
        let m = d.memory();
        assert_eq!(m.stm_len(), 1);
        let only = m.stm().next().unwrap();
        assert_eq!(m.location(only).unwrap().weight, 9);
        assert_eq!(m.location(only).unwrap().member_images, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn infinite_budget_never_transfers() {
        let world = SyntheticWorldConfig {
            num_places: 30,
            revisit_script: (0..30).chain(0..30).collect(),
            ..SyntheticWorldConfig::default()
        };
        let (stream, _) = generate_synthetic(&world).unwrap();
        let mut d = Detector::new(small_config()).unwrap();
        let reports = d.run(stream).unwrap();
        assert!(reports.iter().all(|r| r.transferred.is_empty()));
    }

    #[test]
    fn detection_line_round_trip() {
        let d = Detection {
            image_id: 12,
            matched: vec![2, 7],
        };
        assert_eq!(d.to_string(), "12: 2,7");
        assert_eq!(Detection::parse("12: 2,7"), Some(d));
        assert!(parse_detection_log("1: 0\n\nx\n").is_err());
    }

    #[test]
    fn iteration_csv_round_trip() {
        let world = SyntheticWorldConfig {
            revisit_script: (0..10).chain(0..10).collect(),
            aliasing_rate: 0.3,
            ..SyntheticWorldConfig::default()
        };
        let (stream, _) = generate_synthetic(&world).unwrap();
        let config = PipelineConfig {
            stm_size: 1,
            t_min_hyp: 1,
            ..small_config()
        };
        let reports = Detector::new(config).unwrap().run(stream).unwrap();
        let mut buf = Vec::new();
        write_iterations_csv(&mut buf, &reports).unwrap();
        let rows = parse_iterations_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(rows.len(), reports.len());
        for (row, r) in rows.iter().zip(&reports) {
            assert_eq!((row.image_id, row.wm_size, row.dict_size), (r.image_id, r.wm_size, r.dict_size));
            assert!((row.elapsed - r.elapsed).abs() < 1e-9);
            assert_eq!(row.hypothesis.map(|h| h.0), r.accepted.map(|h| h.location));
        }
        assert!(rows.iter().any(|r| r.hypothesis.is_some()));
        assert!(parse_iterations_csv("nope\n").is_err());
        assert!(parse_iterations_csv(&format!("{ITERATION_CSV_HEADER}\n1,2\n")).is_err());
    }
}
