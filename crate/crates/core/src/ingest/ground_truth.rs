use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use super::IngestError;
use crate::ImageId;

/// Unordered pairs of images showing the same place.
///
/// Pairs are stored as `(query, match)` with `query > match`, the later image
/// being the one that closes the loop.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GroundTruth {
    pairs: BTreeSet<(ImageId, ImageId)>,
}

impl GroundTruth {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts the unordered pair `{a, b}`. Self pairs are ignored and
    /// reported as `false`.
    pub fn insert(&mut self, a: ImageId, b: ImageId) -> bool {
        if a == b {
            return false;
        }
        self.pairs.insert((a.max(b), a.min(b)))
    }

    pub fn contains(&self, a: ImageId, b: ImageId) -> bool {
        self.pairs.contains(&(a.max(b), a.min(b)))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (ImageId, ImageId)> + '_ {
        self.pairs.iter().copied()
    }

    /// Images that close at least one loop (the later member of a pair).
    pub fn query_images(&self) -> BTreeSet<ImageId> {
        self.pairs.iter().map(|&(q, _)| q).collect()
    }

    /// Checks every id lies in `0..image_count`.
    pub fn validate(&self, image_count: u64) -> Result<(), IngestError> {
        match self.pairs.iter().find(|&&(q, _)| q >= image_count) {
            Some(&(q, m)) => Err(IngestError::GroundTruth {
                line: 0,
                reason: format!("pair ({q}, {m}) outside stream of {image_count} images"),
            }),
            None => Ok(()),
        }
    }

    pub fn parse(text: &str) -> Result<Self, IngestError> {
        let mut gt = Self::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |reason: &str| IngestError::GroundTruth {
                line: i + 1,
                reason: reason.to_string(),
            };
            let mut fields = line.split_whitespace();
            let (Some(a), Some(b), None) = (fields.next(), fields.next(), fields.next()) else {
                return Err(bad("expected two image ids"));
            };
            let a: ImageId = a.parse().map_err(|_| bad("invalid image id"))?;
            let b: ImageId = b.parse().map_err(|_| bad("invalid image id"))?;
            if a == b {
                return Err(bad("an image cannot close a loop with itself"));
            }
            gt.insert(a, b);
        }
        Ok(gt)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# query match\n");
        for (q, m) in &self.pairs {
            let _ = writeln!(out, "{q} {m}");
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, IngestError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IngestError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

impl FromIterator<(ImageId, ImageId)> for GroundTruth {
    fn from_iter<T: IntoIterator<Item = (ImageId, ImageId)>>(iter: T) -> Self {
        let mut gt = Self::new();
        for (a, b) in iter {
            gt.insert(a, b);
        }
        gt
    }
}
