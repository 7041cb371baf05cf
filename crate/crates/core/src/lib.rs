//! Real-time appearance-based loop closure detection with a bounded working set.
//!
//! Each incoming observation (a set of local feature descriptors) is quantized
//! into visual words, turned into a location of a topological graph and scored
//! against the working memory by a discrete Bayesian filter. When one
//! iteration takes longer than the configured time budget, the oldest
//! lowest-weight locations are moved to a long-term store on disk, and brought
//! back when a loop closure hypothesis lands next to them.
//!
//! The crate is organised by subsystem:
//!
//! - [`ingest`]: descriptor streams (binary files, synthetic worlds) and ground truth
//! - [`dictionary`]: the incremental visual vocabulary and its nearest-neighbour index
//! - [`memory`]: locations, the STM/WM/LTM tiers, rehearsal, transfer and retrieval
//! - [`store`]: the long-term memory database with a background writer
//! - [`bayes`]: the loop closure filter
//! - [`pipeline`]: the per-observation processing cycle and time budget
//! - [`eval`]: precision/recall and timing statistics
//! - [`cli`]: the `loopgraph` command line tool

pub mod bayes;
pub mod cli;
pub mod dictionary;
pub mod eval;
pub mod graph;
pub mod ingest;
pub mod memory;
pub mod pipeline;
pub mod store;

/// Identifier of a location (graph node), assigned in creation order.
pub type LocationId = u64;
/// Identifier of a visual word. Never reused within a run.
pub type WordId = u64;
/// Index of an image in the input stream.
pub type ImageId = u64;

pub use bayes::{Hypothesis, Likelihood, Posterior, TransitionParams};
pub use dictionary::{Dictionary, IndexParams, VisualWord};
pub use graph::LocationGraph;
pub use ingest::{Descriptor, DescriptorSet, GroundTruth, SyntheticWorldConfig};
pub use memory::{similarity, Location, Memory, MemoryConfig, Signature};
pub use pipeline::{ClockMode, Detection, Detector, IterationReport, PipelineConfig};
pub use store::{LtmStore, StoreOptions, StoredLocation, StoredWord};
