use std::fmt::Write as _;
use std::path::Path;

use crate::dictionary::IndexParams;

use super::PipelineError;

/// How iteration time is measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClockMode {
    Wall,
    /// Fixed synthetic costs per operation: runs are reproducible.
    Virtual,
}

impl std::str::FromStr for ClockMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "wall" => Ok(ClockMode::Wall),
            "virtual" => Ok(ClockMode::Virtual),
            _ => Err(format!("unknown clock {s:?} (expected wall or virtual)")),
        }
    }
}

impl std::fmt::Display for ClockMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ClockMode::Wall => "wall",
            ClockMode::Virtual => "virtual",
        })
    }
}

/// Charges of the virtual clock, in seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct VirtualCosts {
    pub iteration: f64,
    /// Per descriptor, times `log2(dictionary size + 2)`.
    pub per_descriptor: f64,
    /// Per resident word, modelling the index rebuild.
    pub per_word: f64,
    /// Per WM location scored by the filter.
    pub per_wm_state: f64,
    pub per_retrieval: f64,
    pub per_transfer: f64,
}

impl Default for VirtualCosts {
    fn default() -> Self {
        Self {
            iteration: 1e-3,
            per_descriptor: 2e-6,
            per_word: 2e-6,
            per_wm_state: 2e-5,
            per_retrieval: 1e-3,
            per_transfer: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    /// Iteration time budget in seconds; infinite disables transfer.
    pub t_time: f64,
    pub t_rehearsal: f64,
    pub t_loop: f64,
    pub t_min_hyp: usize,
    pub stm_size: usize,
    pub match_ratio: f32,
    pub gaussian_sigma: f64,
    pub seed: u64,
    pub clock: ClockMode,
    pub retrieval: bool,
    /// Verify memory invariants after every iteration.
    pub check_invariants: bool,
    pub index: IndexParams,
    pub costs: VirtualCosts,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            t_time: f64::INFINITY,
            t_rehearsal: 0.2,
            t_loop: 0.1,
            t_min_hyp: 15,
            stm_size: 25,
            match_ratio: 0.8,
            gaussian_sigma: 1.6,
            seed: 0,
            clock: ClockMode::Wall,
            retrieval: true,
            check_invariants: false,
            index: IndexParams::default(),
            costs: VirtualCosts::default(),
        }
    }
}

/// Parses seconds or `inf`.
pub fn parse_seconds(text: &str) -> Result<f64, String> {
    let t = text.trim();
    if t.eq_ignore_ascii_case("inf") || t.eq_ignore_ascii_case("infinity") {
        return Ok(f64::INFINITY);
    }
    match t.parse::<f64>() {
        Ok(v) if v > 0.0 => Ok(v),
        _ => Err(format!("expected positive seconds or \"inf\", got {t:?}")),
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        let fraction = |v: f64| v > 0.0 && v <= 1.0;
        if self.t_time.is_nan() || self.t_time <= 0.0 {
            return bad("t_time must be positive");
        }
        if !fraction(self.t_rehearsal) || !fraction(self.t_loop) {
            return bad("t_rehearsal and t_loop must lie in (0, 1]");
        }
        if !fraction(self.match_ratio as f64) {
            return bad("match_ratio must lie in (0, 1]");
        }
        if self.stm_size == 0 {
            return bad("stm_size must be at least 1");
        }
        if !(self.gaussian_sigma > 0.0 && self.gaussian_sigma.is_finite()) {
            return bad("gaussian_sigma must be positive");
        }
        if self.index.trees == 0 || self.index.leaf_size == 0 || self.index.checks == 0 {
            return bad("index_trees, index_checks and index_leaf_size must be positive");
        }
        Ok(())
    }

    /// Parses a flat `key = value` file on top of the defaults. Unknown keys
    /// are rejected.
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: &str| PipelineError::Config(format!("line {}: {m}", i + 1));
            let (key, value) = line.split_once('=').ok_or_else(|| err("expected key = value"))?;
            cfg.set(key.trim(), value.trim()).map_err(|m| err(&m))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
            value.parse().map_err(|_| format!("invalid {key}: {value:?}"))
        }
        fn flag(key: &str, value: &str) -> Result<bool, String> {
            match value {
                "true" | "on" | "1" => Ok(true),
                "false" | "off" | "0" => Ok(false),
                _ => Err(format!("invalid {key}: {value:?}")),
            }
        }
        match key {
            "t_time" => self.t_time = parse_seconds(value)?,
            "t_rehearsal" => self.t_rehearsal = num(key, value)?,
            "t_loop" => self.t_loop = num(key, value)?,
            "t_min_hyp" => self.t_min_hyp = num(key, value)?,
            "stm_size" => self.stm_size = num(key, value)?,
            "match_ratio" => self.match_ratio = num(key, value)?,
            "gaussian_sigma" => self.gaussian_sigma = num(key, value)?,
            "seed" => {
                self.seed = num(key, value)?;
                self.index.seed = self.seed;
            }
            "clock" => self.clock = value.parse()?,
            "retrieval" => self.retrieval = flag(key, value)?,
            "check_invariants" => self.check_invariants = flag(key, value)?,
            "index_trees" => self.index.trees = num(key, value)?,
            "index_checks" => self.index.checks = num(key, value)?,
            "index_leaf_size" => self.index.leaf_size = num(key, value)?,
            "index_exact_below" => self.index.exact_below = num(key, value)?,
            "index_stale_fraction" => self.index.stale_fraction = num(key, value)?,
            "cost_iteration" => self.costs.iteration = num(key, value)?,
            "cost_per_descriptor" => self.costs.per_descriptor = num(key, value)?,
            "cost_per_word" => self.costs.per_word = num(key, value)?,
            "cost_per_wm_state" => self.costs.per_wm_state = num(key, value)?,
            "cost_per_retrieval" => self.costs.per_retrieval = num(key, value)?,
            "cost_per_transfer" => self.costs.per_transfer = num(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Text form accepted by [`PipelineConfig::parse`]; floats are written
    /// so that they parse back exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let t_time = if self.t_time.is_infinite() {
            "inf".to_string()
        } else {
            format!("{:?}", self.t_time)
        };
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("t_time", t_time);
        put("t_rehearsal", format!("{:?}", self.t_rehearsal));
        put("t_loop", format!("{:?}", self.t_loop));
        put("t_min_hyp", self.t_min_hyp.to_string());
        put("stm_size", self.stm_size.to_string());
        put("match_ratio", format!("{:?}", self.match_ratio));
        put("gaussian_sigma", format!("{:?}", self.gaussian_sigma));
        put("seed", self.seed.to_string());
        put("clock", self.clock.to_string());
        put("retrieval", self.retrieval.to_string());
        put("check_invariants", self.check_invariants.to_string());
        put("index_trees", self.index.trees.to_string());
        put("index_checks", self.index.checks.to_string());
        put("index_leaf_size", self.index.leaf_size.to_string());
        put("index_exact_below", self.index.exact_below.to_string());
        put("index_stale_fraction", format!("{:?}", self.index.stale_fraction));
        put("cost_iteration", format!("{:?}", self.costs.iteration));
        put("cost_per_descriptor", format!("{:?}", self.costs.per_descriptor));
        put("cost_per_word", format!("{:?}", self.costs.per_word));
        put("cost_per_wm_state", format!("{:?}", self.costs.per_wm_state));
        put("cost_per_retrieval", format!("{:?}", self.costs.per_retrieval));
        put("cost_per_transfer", format!("{:?}", self.costs.per_transfer));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        assert_eq!(PipelineConfig::parse(&cfg.to_text()).unwrap(), cfg);
        let mut other = cfg.clone();
        other.t_time = 0.7;
        other.clock = ClockMode::Virtual;
        other.seed = 9;
        other.index.seed = 9;
        other.costs.per_word = 3.3e-7;
        assert_eq!(PipelineConfig::parse(&other.to_text()).unwrap(), other);
    }

    #[test]
    fn parse_errors() {
        assert!(PipelineConfig::parse("t_loop = 0").is_err());
        assert!(PipelineConfig::parse("stm_size = 0").is_err());
        assert!(PipelineConfig::parse("bogus = 1").is_err());
        assert!(PipelineConfig::parse("t_time = -1").is_err());
        assert!(PipelineConfig::parse("no equals sign").is_err());
        let cfg = PipelineConfig::parse("t_time = inf\n# comment\nstm_size = 3 # trailing").unwrap();
        assert!(cfg.t_time.is_infinite());
        assert_eq!(cfg.stm_size, 3);
    }

    #[test]
    fn seconds() {
        assert_eq!(parse_seconds("inf").unwrap(), f64::INFINITY);
        assert_eq!(parse_seconds("0.7").unwrap(), 0.7);
        assert!(parse_seconds("0").is_err());
        assert!(parse_seconds("soon").is_err());
    }
}
