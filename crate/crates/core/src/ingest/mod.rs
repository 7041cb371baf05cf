//! Descriptor streams and ground truth.
//!
//! Observations enter the detector as [`DescriptorSet`]s: the local feature
//! descriptors extracted from one image. They come either from a binary
//! `.lgds` file ([`load_stream`]) or from a seeded synthetic world
//! ([`generate_synthetic`]). No feature extractor is shipped; anything that
//! produces descriptors can implement [`FeatureExtractor`].

mod format;
mod ground_truth;
mod synthetic;

pub use format::{load_stream, read_stream, write_stream, write_stream_to, StreamReader};
pub use ground_truth::GroundTruth;
pub use synthetic::{generate_synthetic, parse_script, SyntheticWorldConfig};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ImageId;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic at byte offset {offset}: expected \"LGDS\"")]
    BadMagic { offset: u64 },
    #[error("unsupported format version {version} at byte offset {offset}")]
    UnsupportedVersion { offset: u64, version: u32 },
    #[error("malformed header at byte offset {offset}: {reason}")]
    MalformedHeader { offset: u64, reason: String },
    #[error("unexpected end of file at byte offset {offset}")]
    Truncated { offset: u64 },
    #[error("trailing bytes after the last image at byte offset {offset} (descriptor dimension mismatch?)")]
    TrailingBytes { offset: u64 },
    #[error("non-finite descriptor value at byte offset {offset}")]
    NonFinite { offset: u64 },
    #[error("descriptor dimension mismatch in image {image}: expected {expected}, found {found}")]
    DimensionMismatch {
        image: ImageId,
        expected: usize,
        found: usize,
    },
    #[error("non-finite descriptor component at index {index}")]
    NonFiniteValue { index: usize },
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error("ground truth line {line}: {reason}")]
    GroundTruth { line: usize, reason: String },
}

/// One local feature vector. All components are finite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Descriptor(Vec<f32>);

impl Descriptor {
    pub fn new(values: Vec<f32>) -> Result<Self, IngestError> {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(IngestError::NonFiniteValue { index });
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn squared_distance(&self, other: &Descriptor) -> f32 {
        squared_distance(&self.0, &other.0)
    }
}

pub(crate) fn squared_distance(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// The descriptors extracted from one image. May be empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescriptorSet {
    pub image_id: ImageId,
    pub descriptors: Vec<Descriptor>,
    /// Acquisition time in seconds.
    pub stamp: f64,
}

impl DescriptorSet {
    pub fn new(image_id: ImageId, descriptors: Vec<Descriptor>, stamp: f64) -> Self {
        Self {
            image_id,
            descriptors,
            stamp,
        }
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    /// Dimension of the descriptors, or `None` for a featureless image.
    pub fn dim(&self) -> Option<usize> {
        self.descriptors.first().map(Descriptor::dim)
    }
}

/// Adapter for a real feature extractor (SURF, ORB, ...). None is bundled.
pub trait FeatureExtractor {
    type Image;
    type Error: std::error::Error;

    fn extract(&mut self, image: &Self::Image) -> Result<Vec<Descriptor>, Self::Error>;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descriptor_rejects_non_finite() {
        assert!(matches!(
            Descriptor::new(vec![0.0, f32::NAN]),
            Err(IngestError::NonFiniteValue { index: 1 })
        ));
        assert!(Descriptor::new(vec![f32::INFINITY]).is_err());
        assert_eq!(Descriptor::new(vec![1.0, 2.0]).unwrap().dim(), 2);
    }

    #[test]
    fn squared_distance_is_euclidean() {
        let a = Descriptor::new(vec![0.0, 0.0]).unwrap();
        let b = Descriptor::new(vec![3.0, 4.0]).unwrap();
        assert_eq!(a.squared_distance(&b), 25.0);
    }
}
