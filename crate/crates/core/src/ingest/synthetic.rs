//! Seeded synthetic worlds.
//!
//! Every place owns `words_per_place` latent descriptors drawn uniformly from
//! `[0, 1]^dim`. A frame showing a place emits each latent word with
//! probability `1 - dropout_rate`; each emitted word is swapped for a draw from
//! a shared pool with probability `aliasing_rate` (perceptual aliasing), and
//! every component gets Gaussian noise of standard deviation `noise_sigma`.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Descriptor, DescriptorSet, GroundTruth, IngestError};
use crate::ImageId;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorldConfig {
    pub num_places: usize,
    pub words_per_place: usize,
    pub dim: usize,
    /// Place shown by each frame.
    pub revisit_script: Vec<usize>,
    pub noise_sigma: f64,
    pub dropout_rate: f64,
    pub aliasing_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        Self {
            num_places: 10,
            words_per_place: 40,
            dim: 64,
            revisit_script: (0..10).collect(),
            noise_sigma: 0.05,
            dropout_rate: 0.1,
            aliasing_rate: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<(), IngestError> {
        let bad = |m: String| Err(IngestError::Config(m));
        if self.num_places == 0 {
            return bad("num_places must be at least 1".into());
        }
        if self.dim < 2 {
            return bad("dim must be at least 2".into());
        }
        if let Some((t, &p)) = self
            .revisit_script
            .iter()
            .enumerate()
            .find(|(_, &p)| p >= self.num_places)
        {
            return bad(format!(
                "revisit_script[{t}] = {p} but only {} places exist",
                self.num_places
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.aliasing_rate) {
            return bad("aliasing_rate must lie in [0, 1]".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and non-negative".into());
        }
        Ok(())
    }

    /// Parses a flat `key = value` file. Unknown keys are rejected; missing
    /// keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self, IngestError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: &str| IngestError::Config(format!("line {}: {m}", i + 1));
            let (key, value) = line.split_once('=').ok_or_else(|| err("expected key = value"))?;
            let (key, value) = (key.trim(), value.trim());
            let num = |m: &str| err(&format!("invalid {m}: {value:?}"));
            match key {
                "num_places" => cfg.num_places = value.parse().map_err(|_| num(key))?,
                "words_per_place" => cfg.words_per_place = value.parse().map_err(|_| num(key))?,
                "dim" => cfg.dim = value.parse().map_err(|_| num(key))?,
                "revisit_script" => cfg.revisit_script = parse_script(value).map_err(|m| err(&m))?,
                "noise_sigma" => cfg.noise_sigma = value.parse().map_err(|_| num(key))?,
                "dropout_rate" => cfg.dropout_rate = value.parse().map_err(|_| num(key))?,
                "aliasing_rate" => cfg.aliasing_rate = value.parse().map_err(|_| num(key))?,
                "seed" => cfg.seed = value.parse().map_err(|_| num(key))?,
                _ => return Err(err(&format!("unknown key {key:?}"))),
            }
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, IngestError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let script: Vec<String> = self.revisit_script.iter().map(|p| p.to_string()).collect();
        let mut out = String::new();
        let _ = writeln!(out, "num_places = {}", self.num_places);
        let _ = writeln!(out, "words_per_place = {}", self.words_per_place);
        let _ = writeln!(out, "dim = {}", self.dim);
        let _ = writeln!(out, "revisit_script = {}", script.join(","));
        let _ = writeln!(out, "noise_sigma = {}", self.noise_sigma);
        let _ = writeln!(out, "dropout_rate = {}", self.dropout_rate);
        let _ = writeln!(out, "aliasing_rate = {}", self.aliasing_rate);
        let _ = writeln!(out, "seed = {}", self.seed);
        out
    }
}

/// Parses a revisit script: comma separated entries, each a place index `7`
/// or an inclusive range `0-9` (descending ranges allowed), optionally
/// repeated with a suffix `x3`.
pub fn parse_script(text: &str) -> Result<Vec<usize>, String> {
    let mut out = Vec::new();
    for entry in text.split(',').map(str::trim).filter(|e| !e.is_empty()) {
        let (body, repeat) = match entry.split_once('x') {
            Some((b, r)) => (
                b.trim(),
                r.trim()
                    .parse::<usize>()
                    .map_err(|_| format!("invalid repeat in {entry:?}"))?,
            ),
            None => (entry, 1),
        };
        let parse = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| format!("invalid place index in {entry:?}"))
        };
        let items: Vec<usize> = match body.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (parse(a)?, parse(b)?);
                if a <= b {
                    (a..=b).collect()
                } else {
                    (b..=a).rev().collect()
                }
            }
            None => vec![parse(body)?],
        };
        for _ in 0..repeat {
            out.extend_from_slice(&items);
        }
    }
    Ok(out)
}

/// Generates the descriptor stream and its ground truth. Equal configs give
/// bit-identical output.
pub fn generate_synthetic(
    cfg: &SyntheticWorldConfig,
) -> Result<(Vec<DescriptorSet>, GroundTruth), IngestError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let uniform_word = |rng: &mut ChaCha8Rng| -> Vec<f32> {
        (0..cfg.dim).map(|_| rng.random::<f32>()).collect()
    };
    let places: Vec<Vec<Vec<f32>>> = (0..cfg.num_places)
        .map(|_| (0..cfg.words_per_place).map(|_| uniform_word(&mut rng)).collect())
        .collect();
    let pool: Vec<Vec<f32>> = (0..cfg.words_per_place.max(1))
        .map(|_| uniform_word(&mut rng))
        .collect();

    let mut stream = Vec::with_capacity(cfg.revisit_script.len());
    for (t, &place) in cfg.revisit_script.iter().enumerate() {
        let mut descriptors = Vec::with_capacity(cfg.words_per_place);
        for latent in &places[place] {
            let dropped = rng.random::<f64>() < cfg.dropout_rate;
            let aliased = rng.random::<f64>() < cfg.aliasing_rate;
            let pool_pick = rng.random_range(0..pool.len());
            if dropped {
                continue;
            }
            let base = if aliased { &pool[pool_pick] } else { latent };
            let values: Vec<f32> = base
                .iter()
                .map(|&v| {
                    let z: f64 = rng.sample(StandardNormal);
                    v + (cfg.noise_sigma * z) as f32
                })
                .collect();
            descriptors.push(Descriptor::new(values)?);
        }
        stream.push(DescriptorSet::new(t as ImageId, descriptors, t as f64));
    }

    let mut gt = GroundTruth::new();
    for (t, &p) in cfg.revisit_script.iter().enumerate() {
        for (earlier, &q) in cfg.revisit_script[..t].iter().enumerate() {
            if p == q {
                gt.insert(t as ImageId, earlier as ImageId);
            }
        }
    }
    Ok((stream, gt))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(script: &[usize]) -> SyntheticWorldConfig {
        SyntheticWorldConfig {
            num_places: 3,
            words_per_place: 8,
            dim: 6,
            revisit_script: script.to_vec(),
            noise_sigma: 0.0,
            dropout_rate: 0.0,
            aliasing_rate: 0.0,
            seed: 7,
        }
    }

    /// Independent ground truth: walk the script and look backwards.
    fn walk_script(script: &[usize]) -> Vec<(ImageId, ImageId)> {
        let mut pairs = Vec::new();
        for t in 0..script.len() {
            for u in 0..t {
                if script[t] == script[u] {
                    pairs.push((t as ImageId, u as ImageId));
                }
            }
        }
        pairs.sort();
        pairs
    }

    #[test]
    fn zero_noise_revisit_is_identical() {
        let (stream, gt) = generate_synthetic(&cfg(&[0, 1, 0])).unwrap();
        assert_eq!(gt.pairs().collect::<Vec<_>>(), vec![(2, 0)]);
        assert_eq!(stream[0].descriptors, stream[2].descriptors);
        assert_ne!(stream[0].descriptors, stream[1].descriptors);
        assert_eq!(stream[0].len(), 8);
    }

    #[test]
    fn no_revisit_no_ground_truth() {
        let mut c = cfg(&[0, 1]);
        c.noise_sigma = 0.3;
        c.dropout_rate = 0.5;
        c.aliasing_rate = 0.4;
        assert!(generate_synthetic(&c).unwrap().1.is_empty());
    }

    #[test]
    fn noisy_script_ground_truth_matches_walker() {
        let script = [0, 1, 2, 0, 1, 2];
        let mut c = cfg(&script);
        c.noise_sigma = 0.05;
        let (_, gt) = generate_synthetic(&c).unwrap();
        let pairs: Vec<_> = gt.pairs().collect();
        assert_eq!(pairs, vec![(3, 0), (4, 1), (5, 2)]);
        assert_eq!(pairs, walk_script(&script));
    }

    #[test]
    fn config_errors() {
        let mut c = cfg(&[0, 3]);
        assert!(matches!(generate_synthetic(&c), Err(IngestError::Config(_))));
        c.revisit_script = vec![0];
        c.num_places = 0;
        assert!(generate_synthetic(&c).is_err());
        c.num_places = 1;
        c.dim = 1;
        assert!(generate_synthetic(&c).is_err());
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let mut c = cfg(&[0, 1, 2, 1]);
        c.noise_sigma = 0.1;
        c.dropout_rate = 0.2;
        c.aliasing_rate = 0.3;
        let a = generate_synthetic(&c).unwrap();
        let b = generate_synthetic(&c).unwrap();
        assert_eq!(a, b);
        let mut bytes_a = Vec::new();
        let mut bytes_b = Vec::new();
        crate::ingest::write_stream_to(&mut bytes_a, 6, &a.0).unwrap();
        crate::ingest::write_stream_to(&mut bytes_b, 6, &b.0).unwrap();
        assert_eq!(bytes_a, bytes_b);
        c.seed += 1;
        assert_ne!(generate_synthetic(&c).unwrap().0, a.0);
    }

    #[test]
    fn script_syntax() {
        assert_eq!(parse_script("0-3").unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(parse_script("2-0, 5").unwrap(), vec![2, 1, 0, 5]);
        assert_eq!(parse_script("0-1x3").unwrap(), vec![0, 1, 0, 1, 0, 1]);
        assert_eq!(parse_script("4x2,1").unwrap(), vec![4, 4, 1]);
        assert!(parse_script("a").is_err());
    }

    #[test]
    fn config_text_round_trip() {
        let mut c = cfg(&[0, 2, 1]);
        c.noise_sigma = 0.125;
        let parsed = SyntheticWorldConfig::parse(&c.to_text()).unwrap();
        assert_eq!(parsed, c);
        assert!(SyntheticWorldConfig::parse("bogus = 1").is_err());
        assert!(SyntheticWorldConfig::parse("dim = x").is_err());
    }

    proptest::proptest! {
        #[test]
        fn gt_size_equals_earlier_same_place_count(script in proptest::collection::vec(0usize..4, 0..30)) {
            let mut c = cfg(&script);
            c.num_places = 4;
            let (stream, gt) = generate_synthetic(&c).unwrap();
            let expected: usize = (0..script.len())
                .map(|t| script[..t].iter().filter(|&&p| p == script[t]).count())
                .sum();
            proptest::prop_assert_eq!(gt.len(), expected);
            proptest::prop_assert_eq!(stream.len(), script.len());
        }
    }
}
