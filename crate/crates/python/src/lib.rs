//! Python module `rcfuse`: model files, fusion planning, pruning, traffic
//! and the accelerator model. Structured results come back as plain dicts.

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use serde::Serialize;

use rcfuse_core::cli::{full_pipeline, traffic_summary, PipelineSettings, RunConfig};
use rcfuse_core::convert::{conversion_report, to_lightweight};
use rcfuse_core::fusion::{check_guidelines, partition};
use rcfuse_core::netir::load_model;
use rcfuse_core::prune::{rcnet_iterate, GammaDistribution, GammaSource, GammaTable, RcnetConfig};
use rcfuse_core::sim::{estimate_cycles, ArchConfig};
use rcfuse_core::tiling::{writemask_map, BoundaryPolicy};
use rcfuse_core::traffic::{buffer_sweep, dram_energy as energy, execution_plan};
use rcfuse_core::{Error, NetGraph};

create_exception!(rcfuse, RcfuseError, PyException);
create_exception!(rcfuse, ParseError, RcfuseError);
create_exception!(rcfuse, ValidationError, RcfuseError);
create_exception!(rcfuse, InfeasibleError, RcfuseError);

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Parse(_) => ParseError::new_err(msg),
        Error::Infeasible { .. } => InfeasibleError::new_err(msg),
        Error::Io(_) | Error::InvalidArgument(_) => RcfuseError::new_err(msg),
        _ => ValidationError::new_err(msg),
    }
}

/// Converts any serializable value into Python objects through `json`.
fn to_py<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| RcfuseError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse_policy(s: &str) -> PyResult<BoundaryPolicy> {
    s.parse().map_err(|e: String| RcfuseError::new_err(e))
}

fn arch(weight_buffer: u64, feature_half: u64) -> PyResult<ArchConfig> {
    let a = ArchConfig {
        weight_buffer_bytes: weight_buffer,
        feature_half_bytes: feature_half,
        ..ArchConfig::default()
    };
    a.validate().map_err(py_err)?;
    Ok(a)
}

#[pyclass(module = "rcfuse", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct Model {
    graph: NetGraph,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        load_model(path).map(|graph| Self { graph }).map_err(py_err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        NetGraph::from_json(text).map(|graph| Self { graph }).map_err(py_err)
    }

    fn to_json(&self) -> String {
        self.graph.to_json()
    }

    #[getter]
    fn name(&self) -> String {
        self.graph.name.clone()
    }

    /// (width, height, channels) of the network input.
    #[getter]
    fn input(&self) -> (u32, u32, u32) {
        let s = self.graph.input;
        (s.width, s.height, s.channels)
    }

    #[getter]
    fn output(&self) -> (u32, u32, u32) {
        let s = self.graph.output_shape();
        (s.width, s.height, s.channels)
    }

    fn __len__(&self) -> usize {
        self.graph.len()
    }

    fn __repr__(&self) -> String {
        format!("Model({:?}, {} layers, {} params)", self.graph.name, self.graph.len(), self.graph.param_count())
    }

    fn param_count(&self) -> u64 {
        self.graph.param_count()
    }

    fn macs(&self) -> u64 {
        self.graph.macs()
    }

    fn feature_io_bytes(&self) -> u64 {
        self.graph.feature_io_bytes(1)
    }

    /// Layer records with inferred shapes.
    fn layers<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.graph.layers)
    }

    /// Depthwise-separable version of the model.
    fn convert(&self) -> PyResult<Model> {
        to_lightweight(&self.graph).map(|graph| Model { graph }).map_err(py_err)
    }

    fn conversion_report<'py>(&self, py: Python<'py>, other: &Model) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &conversion_report(&self.graph, &other.graph))
    }
}

/// Fusion plan as a dict with `groups`, `warnings` and guideline violations.
#[pyfunction]
#[pyo3(signature = (model, budget, overshoot = 0.0))]
fn plan<'py>(py: Python<'py>, model: &Model, budget: u64, overshoot: f64) -> PyResult<Bound<'py, PyAny>> {
    let p = partition(&model.graph, budget, overshoot);
    let v = check_guidelines(&p, &model.graph);
    to_py(py, &serde_json::json!({ "plan": p, "guideline_violations": v }))
}

/// Layer ids of each fusion group.
#[pyfunction]
#[pyo3(signature = (model, budget, overshoot = 0.0))]
fn groups(model: &Model, budget: u64, overshoot: f64) -> Vec<Vec<usize>> {
    partition(&model.graph, budget, overshoot)
        .groups
        .into_iter()
        .map(|g| g.layer_ids)
        .collect()
}

/// Prunes and rescales until every group fits. Returns (model, iterations).
#[pyfunction]
#[pyo3(signature = (model, budget, overshoot = 0.5, iterations = 2, rescale_first = 1, seed = 0, gammas = None))]
#[allow(clippy::too_many_arguments)]
fn rcnet<'py>(
    py: Python<'py>,
    model: &Model,
    budget: u64,
    overshoot: f64,
    iterations: usize,
    rescale_first: usize,
    seed: u64,
    gammas: Option<&str>,
) -> PyResult<(Model, Bound<'py, PyAny>)> {
    let cfg = RcnetConfig {
        budget_bytes: budget,
        overshoot,
        iterations,
        rescale_first_k: rescale_first,
        bytes_per_weight: 1,
    };
    let source = match gammas {
        Some(path) => GammaSource::Fixed(GammaTable::load(path).map_err(py_err)?),
        None => GammaSource::Synthetic {
            seed,
            dist: GammaDistribution::Uniform,
        },
    };
    let out = rcnet_iterate(&model.graph, &cfg, &source).map_err(py_err)?;
    let report = to_py(py, &out.iterations)?;
    Ok((Model { graph: out.graph }, report))
}

/// Fused traffic of `model` against `baseline` (default: itself) run layer by layer.
#[pyfunction]
#[pyo3(signature = (model, baseline = None, weight_buffer = 98304, feature_half = 196608, fps = 30.0, pj_per_bit = 70.0, boundary = "zero"))]
#[allow(clippy::too_many_arguments)]
fn traffic<'py>(
    py: Python<'py>,
    model: &Model,
    baseline: Option<&Model>,
    weight_buffer: u64,
    feature_half: u64,
    fps: f64,
    pj_per_bit: f64,
    boundary: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = RunConfig {
        arch: arch(weight_buffer, feature_half)?,
        fps,
        pj_per_bit,
        boundary: parse_policy(boundary)?,
        ..RunConfig::default()
    };
    let base = baseline.map_or(&model.graph, |b| &b.graph);
    to_py(py, &traffic_summary(&model.graph, base, &cfg))
}

/// Bandwidth in bytes per second for each weight-buffer size.
#[pyfunction]
#[pyo3(signature = (model, sizes, feature_half = 196608, fps = 30.0))]
fn sweep<'py>(py: Python<'py>, model: &Model, sizes: Vec<u64>, feature_half: u64, fps: f64) -> PyResult<Bound<'py, PyAny>> {
    if sizes.is_empty() || sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(RcfuseError::new_err("sizes must be non-empty and strictly ascending"));
    }
    let a = arch(sizes[0], feature_half)?;
    to_py(py, &buffer_sweep(&model.graph, &sizes, &a, fps))
}

/// Cycle estimate of the execution plan.
#[pyfunction]
#[pyo3(signature = (model, weight_buffer = 98304, feature_half = 196608))]
fn perf<'py>(py: Python<'py>, model: &Model, weight_buffer: u64, feature_half: u64) -> PyResult<Bound<'py, PyAny>> {
    let a = arch(weight_buffer, feature_half)?;
    let (_, tiles) = execution_plan(&model.graph, &a, BoundaryPolicy::Zero);
    to_py(py, &estimate_cycles(&model.graph, &tiles, &a))
}

/// Convert, prune, plan, tile and report. Returns (report, final model).
#[pyfunction]
#[pyo3(signature = (model, weight_buffer = 98304, feature_half = 196608, overshoot = 0.5, iterations = 2, seed = 0, convert = true))]
#[allow(clippy::too_many_arguments)]
fn pipeline<'py>(
    py: Python<'py>,
    model: &Model,
    weight_buffer: u64,
    feature_half: u64,
    overshoot: f64,
    iterations: usize,
    seed: u64,
    convert: bool,
) -> PyResult<(Bound<'py, PyAny>, Model)> {
    let cfg = RunConfig {
        arch: arch(weight_buffer, feature_half)?,
        overshoot,
        seed,
        ..RunConfig::default()
    };
    let settings = PipelineSettings {
        convert,
        iterations,
        gammas: None,
    };
    let (report, g) = full_pipeline(&model.graph, &cfg, &settings).map_err(py_err)?;
    Ok((to_py(py, &report)?, Model { graph: g }))
}

/// DRAM energy in mJ per second.
#[pyfunction]
#[pyo3(signature = (bytes_per_s, pj_per_bit = 70.0))]
fn dram_energy(bytes_per_s: f64, pj_per_bit: f64) -> f64 {
    energy(bytes_per_s, pj_per_bit)
}

/// (bank, word, byte_lane) of a write in the transposing buffer.
#[pyfunction(name = "writemask_map")]
fn py_writemask_map(spatial: usize, channel: usize, spatial_len: usize) -> (u8, u64, u8) {
    let a = writemask_map(spatial, channel, spatial_len);
    (a.bank, a.word, a.byte_lane)
}

#[pyfunction]
fn peak_gops() -> f64 {
    ArchConfig::default().peak_gops()
}

#[pymodule]
#[pyo3(name = "rcfuse")]
fn rcfuse_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add_class::<Model>()?;
    m.add("RcfuseError", py.get_type::<RcfuseError>())?;
    m.add("ParseError", py.get_type::<ParseError>())?;
    m.add("ValidationError", py.get_type::<ValidationError>())?;
    m.add("InfeasibleError", py.get_type::<InfeasibleError>())?;
    m.add_function(wrap_pyfunction!(plan, m)?)?;
    m.add_function(wrap_pyfunction!(groups, m)?)?;
    m.add_function(wrap_pyfunction!(rcnet, m)?)?;
    m.add_function(wrap_pyfunction!(traffic, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(perf, m)?)?;
    m.add_function(wrap_pyfunction!(pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(dram_energy, m)?)?;
    m.add_function(wrap_pyfunction!(py_writemask_map, m)?)?;
    m.add_function(wrap_pyfunction!(peak_gops, m)?)?;
    Ok(())
}
