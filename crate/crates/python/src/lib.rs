//! Python bindings for the loopgraph loop closure detector.

use std::collections::BTreeMap;
use std::path::PathBuf;

use loopgraph::bayes;
use loopgraph::eval::{self, worlds};
use loopgraph::ingest::{self, Descriptor, DescriptorSet, GroundTruth, SyntheticWorldConfig};
use loopgraph::memory::{self, Signature};
use loopgraph::pipeline::{self, Detection, Detector as CoreDetector, IterationReport, PipelineConfig};
use loopgraph::store::StoreOptions;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Detector configuration. Keys and values follow the `key = value` config
/// file format used by the command line tool.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
pub struct PyConfig {
    inner: PipelineConfig,
}

#[pymethods]
impl PyConfig {
    /// Defaults, with any keyword overrides applied (`Config(t_time="0.7")`).
    #[new]
    #[pyo3(signature = (**overrides))]
    fn new(overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut cfg = Self { inner: PipelineConfig::default() };
        if let Some(kw) = overrides {
            for (k, v) in kw.iter() {
                cfg.set(&k.extract::<String>()?, &v.str()?.to_string())?;
            }
        }
        cfg.inner.validate().map_err(value_err)?;
        Ok(cfg)
    }

    /// Settings of the built-in synthetic scenarios.
    #[staticmethod]
    fn scenario() -> Self {
        Self { inner: worlds::scenario_config() }
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Ok(Self { inner: PipelineConfig::parse(text).map_err(value_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: PipelineConfig::load(path).map_err(value_err)? })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(PyValueError::new_err)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn t_time(&self) -> f64 {
        self.inner.t_time
    }

    #[getter]
    fn t_loop(&self) -> f64 {
        self.inner.t_loop
    }

    #[getter]
    fn stm_size(&self) -> usize {
        self.inner.stm_size
    }

    fn __repr__(&self) -> String {
        format!("Config({:?})", self.inner.to_text().trim())
    }
}

fn descriptor_set(image_id: u64, descriptors: Vec<Vec<f32>>, stamp: f64) -> PyResult<DescriptorSet> {
    let descriptors = descriptors
        .into_iter()
        .map(Descriptor::new)
        .collect::<Result<Vec<_>, _>>()
        .map_err(value_err)?;
    Ok(DescriptorSet::new(image_id, descriptors, stamp))
}

fn report_dict<'py>(py: Python<'py>, r: &IterationReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("image_id", r.image_id)?;
    d.set_item("location", r.location)?;
    d.set_item("elapsed", r.elapsed)?;
    d.set_item("accepted", r.accepted.map(|h| (h.location, h.probability)))?;
    d.set_item("matched_images", r.matched_images.clone())?;
    d.set_item("candidate", r.candidate.map(|h| (h.location, h.probability)))?;
    d.set_item("rehearsed", r.rehearsed)?;
    d.set_item("retrieved", r.retrieved.clone())?;
    d.set_item("transferred", r.transferred.clone())?;
    d.set_item("wm_size", r.wm_size)?;
    d.set_item("stm_size", r.stm_size)?;
    d.set_item("ltm_size", r.ltm_size)?;
    d.set_item("dict_size", r.dict_size)?;
    Ok(d)
}

/// Loop closure detector. Without a store path the long-term memory stays
/// empty and the time budget must be infinite.
#[pyclass(name = "Detector", unsendable)]
pub struct PyDetector {
    inner: Option<CoreDetector>,
    reports: Vec<IterationReport>,
}

impl PyDetector {
    fn detector(&mut self) -> PyResult<&mut CoreDetector> {
        self.inner.as_mut().ok_or_else(|| PyRuntimeError::new_err("detector is finished"))
    }
}

#[pymethods]
impl PyDetector {
    #[new]
    #[pyo3(signature = (config = None, store_path = None))]
    fn new(config: Option<PyConfig>, store_path: Option<PathBuf>) -> PyResult<Self> {
        let config = config.map(|c| c.inner).unwrap_or_default();
        let inner = match store_path {
            Some(p) => CoreDetector::with_store_path(config, p, StoreOptions::default()),
            None => CoreDetector::new(config),
        }
        .map_err(value_err)?;
        Ok(Self { inner: Some(inner), reports: Vec::new() })
    }

    /// Processes one image and returns its iteration report as a dict.
    #[pyo3(signature = (image_id, descriptors, stamp = 0.0))]
    fn process<'py>(
        &mut self,
        py: Python<'py>,
        image_id: u64,
        descriptors: Vec<Vec<f32>>,
        stamp: f64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let set = descriptor_set(image_id, descriptors, stamp)?;
        let report = self.detector()?.process(&set).map_err(runtime_err)?;
        let d = report_dict(py, &report)?;
        self.reports.push(report);
        Ok(d)
    }

    /// Processes every image of a descriptor stream file.
    fn run_file<'py>(&mut self, py: Python<'py>, path: PathBuf) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let stream = ingest::load_stream(path).map_err(value_err)?;
        let mut out = Vec::with_capacity(stream.len());
        for set in &stream {
            let report = self.detector()?.process(set).map_err(runtime_err)?;
            out.push(report_dict(py, &report)?);
            self.reports.push(report);
        }
        Ok(out)
    }

    /// Accepted loop closures so far, as `(image_id, matched_images)`.
    fn detections(&self) -> Vec<(u64, Vec<u64>)> {
        pipeline::detections(&self.reports)
            .into_iter()
            .map(|d| (d.image_id, d.matched))
            .collect()
    }

    #[getter]
    fn wm_size(&mut self) -> PyResult<usize> {
        Ok(self.detector()?.memory().wm().len())
    }

    #[getter]
    fn stm_size(&mut self) -> PyResult<usize> {
        Ok(self.detector()?.memory().stm_len())
    }

    #[getter]
    fn ltm_size(&mut self) -> PyResult<usize> {
        Ok(self.detector()?.memory().ltm().len())
    }

    /// Flushes and closes the long-term store.
    fn finish(&mut self) -> PyResult<()> {
        match self.inner.take() {
            Some(d) => d.finish().map_err(runtime_err),
            None => Ok(()),
        }
    }
}

fn signature(words: &[u64]) -> Signature {
    let mut s = Signature::new();
    for &w in words {
        s.push(w);
    }
    s
}

/// Similarity of two signatures given as word id lists (repeats count).
#[pyfunction]
fn similarity(a: Vec<u64>, b: Vec<u64>) -> f64 {
    memory::similarity(&signature(&a), &signature(&b))
}

/// Likelihood of each location and of a new place from raw similarity
/// scores. Returns `(per_location, new_place)`.
#[pyfunction]
fn likelihood(scores: BTreeMap<u64, f64>) -> (BTreeMap<u64, f64>, f64) {
    let l = bayes::likelihood_from_scores(scores);
    (l.locations, l.new_place)
}

type Stream = Vec<(u64, Vec<Vec<f32>>)>;

fn stream_tuples(stream: Vec<DescriptorSet>) -> Stream {
    stream
        .into_iter()
        .map(|s| (s.image_id, s.descriptors.into_iter().map(Descriptor::into_inner).collect()))
        .collect()
}

/// Synthetic world from a preset name or a config text. Returns
/// `(stream, ground_truth)`; the stream is a list of `(image_id,
/// descriptors)` and the ground truth a list of `(query, match)` pairs.
#[pyfunction]
#[pyo3(signature = (preset = None, config = None, seed = None))]
fn generate_synthetic(
    preset: Option<&str>,
    config: Option<&str>,
    seed: Option<u64>,
) -> PyResult<(Stream, Vec<(u64, u64)>)> {
    let mut world = match (preset, config) {
        (Some(name), None) => worlds::preset(name)
            .ok_or_else(|| PyValueError::new_err(format!("unknown preset {name:?}")))?,
        (None, Some(text)) => SyntheticWorldConfig::parse(text).map_err(value_err)?,
        (None, None) => SyntheticWorldConfig::default(),
        _ => return Err(PyValueError::new_err("pass either preset or config, not both")),
    };
    if let Some(seed) = seed {
        world.seed = seed;
    }
    let (stream, gt) = ingest::generate_synthetic(&world).map_err(value_err)?;
    Ok((stream_tuples(stream), gt.pairs().collect()))
}

/// Reads a descriptor stream file.
#[pyfunction]
fn load_stream(path: PathBuf) -> PyResult<Stream> {
    Ok(stream_tuples(ingest::load_stream(path).map_err(value_err)?))
}

/// Precision and recall of detections against ground-truth pairs.
#[pyfunction]
fn score<'py>(
    py: Python<'py>,
    detections: Vec<(u64, Vec<u64>)>,
    ground_truth: Vec<(u64, u64)>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut gt = GroundTruth::new();
    for (q, m) in ground_truth {
        gt.insert(q, m);
    }
    let dets: Vec<Detection> = detections
        .into_iter()
        .map(|(image_id, matched)| Detection { image_id, matched })
        .collect();
    let p = eval::score(&dets, &gt);
    let d = PyDict::new(py);
    d.set_item("precision", p.precision)?;
    d.set_item("recall", p.recall)?;
    d.set_item("tp", p.tp)?;
    d.set_item("fp", p.fp)?;
    d.set_item("gt_count", p.gt_count)?;
    Ok(d)
}

/// Extension module `loopgraph_py`.
#[pymodule]
pub mod loopgraph_py {
    #[pymodule_export]
    use super::{
        generate_synthetic, likelihood, load_stream, score, similarity, PyConfig, PyDetector,
    };
}
