//! Python module `sigprobe`.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use sigprobe::evaluate::{self, AccuracyMatrix, RrcConvention};
use sigprobe::fca::{self, FormalContext};
use sigprobe::infometrics;
use sigprobe::modelzoo::{build_autoencoder, build_classifier, builtin_zoo};
use sigprobe::orchestrator::{self, pipeline};
use sigprobe::{Error, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::InvariantBreach { .. } | Error::NonFiniteLoss { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn convention(name: &str) -> PyResult<RrcConvention> {
    match name {
        "diagonal" => Ok(RrcConvention::Diagonal),
        "standalone" => Ok(RrcConvention::Standalone),
        _ => Err(PyValueError::new_err(format!("unknown convention {name}"))),
    }
}

/// Relative rate of change of the rows of an accuracy matrix. Undefined
/// entries come back as None.
#[pyfunction]
#[pyo3(signature = (rows, cols, top1, convention = "diagonal"))]
fn rrc(rows: Vec<String>, cols: Vec<String>, top1: Vec<Vec<f64>>, convention: &str) -> PyResult<Vec<Vec<Option<f64>>>> {
    let m = AccuracyMatrix::from_top1(rows, cols, top1).map_err(py_err)?;
    Ok(evaluate::rrc(&m, self::convention(convention)?).map_err(py_err)?.values)
}

/// RRC entries as `(autoencoder, classifier, value)`, descending.
#[pyfunction]
#[pyo3(signature = (rows, cols, top1, convention = "diagonal"))]
fn sorted_rrc(
    rows: Vec<String>,
    cols: Vec<String>,
    top1: Vec<Vec<f64>>,
    convention: &str,
) -> PyResult<Vec<(String, String, Option<f64>)>> {
    let m = AccuracyMatrix::from_top1(rows, cols, top1).map_err(py_err)?;
    let r = evaluate::rrc(&m, self::convention(convention)?).map_err(py_err)?;
    Ok(evaluate::sort_rrc(&r).into_iter().map(|e| (e.autoencoder, e.classifier, e.value)).collect())
}

/// Concept lattice of a boolean context.
#[pyclass(name = "ConceptLattice", frozen)]
struct PyLattice(fca::ConceptLattice);

#[pymethods]
impl PyLattice {
    #[new]
    fn new(objects: Vec<String>, attributes: Vec<String>, incidence: Vec<Vec<bool>>) -> PyResult<Self> {
        let ctx = FormalContext::from_matrix(objects, attributes, &incidence).map_err(py_err)?;
        Ok(Self(fca::concept_lattice(&ctx).map_err(py_err)?))
    }

    /// `(extent, intent)` name lists, largest extent first.
    fn concepts(&self) -> Vec<(Vec<String>, Vec<String>)> {
        let ctx = &self.0.context;
        self.0
            .concepts
            .iter()
            .map(|c| (owned(ctx.names(c.extent, true)), owned(ctx.names(c.intent, false))))
            .collect()
    }

    /// Covering pairs `(upper, lower)` as concept indices.
    fn edges(&self) -> Vec<(usize, usize)> {
        self.0.edges.clone()
    }

    fn is_total_order(&self) -> bool {
        fca::is_total_order(&self.0)
    }

    fn to_dot(&self) -> String {
        fca::export_dot(&self.0)
    }

    fn __len__(&self) -> usize {
        self.0.concepts.len()
    }
}

fn owned(v: Vec<&str>) -> Vec<String> {
    v.into_iter().map(String::from).collect()
}

/// Lattice of the RRC context at threshold `t` (objects are classifiers).
#[pyfunction]
#[pyo3(signature = (rows, cols, top1, t, convention = "diagonal"))]
fn rrc_lattice(rows: Vec<String>, cols: Vec<String>, top1: Vec<Vec<f64>>, t: f64, convention: &str) -> PyResult<PyLattice> {
    let m = AccuracyMatrix::from_top1(rows, cols, top1).map_err(py_err)?;
    let r = evaluate::rrc(&m, self::convention(convention)?).map_err(py_err)?;
    let ctx = fca::threshold_context(&r, t).map_err(py_err)?;
    Ok(PyLattice(fca::concept_lattice(&ctx).map_err(py_err)?))
}

fn image(data: Vec<f64>, shape: Vec<usize>) -> PyResult<Tensor> {
    Tensor::new(shape, data).map_err(py_err)
}

/// Normalized mutual information between two images given as flat
/// `[C, H, W]` buffers in [0, 1].
#[pyfunction]
#[pyo3(signature = (a, b, shape, bins = infometrics::DEFAULT_BINS))]
fn nmi(a: Vec<f64>, b: Vec<f64>, shape: Vec<usize>, bins: usize) -> PyResult<f64> {
    infometrics::nmi(&image(a, shape.clone())?, &image(b, shape)?, bins).map_err(py_err)
}

#[pyfunction]
fn rgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    infometrics::rgb_to_lab(rgb)
}

#[pyfunction]
fn lab_to_rgb(lab: [f64; 3]) -> [f64; 3] {
    infometrics::lab_to_rgb(lab)
}

#[pyfunction]
fn architectures() -> Vec<String> {
    builtin_zoo().into_keys().collect()
}

/// Parameter checksum of a freshly initialized built-in architecture.
#[pyfunction]
fn initial_checksum(name: &str, seed: u64) -> PyResult<String> {
    let zoo = builtin_zoo();
    let spec = zoo.get(name).ok_or_else(|| py_err(Error::UnknownSpec(name.into())))?;
    if spec.family.is_classifier() {
        Ok(build_classifier(spec, seed).map_err(py_err)?.checksum())
    } else {
        Ok(build_autoencoder(spec, seed).map_err(py_err)?.checksum())
    }
}

/// Parses and validates manifest text; returns its digest.
#[pyfunction]
fn validate_manifest(text: &str) -> PyResult<String> {
    orchestrator::validate_manifest(text).and_then(|m| m.digest()).map_err(py_err)
}

#[pyfunction]
fn stage_seed(global_seed: u64, stage: &str) -> u64 {
    pipeline::stage_seed(global_seed, stage)
}

/// Runs every declared stage; returns the run directory and per-stage status.
#[pyfunction]
#[pyo3(signature = (manifest, out, resume = false))]
fn run_pipeline<'py>(py: Python<'py>, manifest: PathBuf, out: PathBuf, resume: bool) -> PyResult<Bound<'py, PyDict>> {
    let (dir, record) = py
        .allow_threads(|| {
            let m = orchestrator::load_manifest(&manifest)?;
            let dir = pipeline::run_dir_for(&out, &m.digest()?);
            Ok::<_, Error>((dir, pipeline::run_pipeline(m, &out, resume)?))
        })
        .map_err(py_err)?;
    let stages = PyDict::new(py);
    for s in &record.stages {
        stages.set_item(&s.name, format!("{:?}", s.status).to_lowercase())?;
    }
    let d = PyDict::new(py);
    d.set_item("run_dir", dir)?;
    d.set_item("digest", record.manifest_digest)?;
    d.set_item("stages", stages)?;
    Ok(d)
}

#[pymodule]
#[pyo3(name = "sigprobe")]
fn sigprobe_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyLattice>()?;
    m.add_function(wrap_pyfunction!(rrc, m)?)?;
    m.add_function(wrap_pyfunction!(sorted_rrc, m)?)?;
    m.add_function(wrap_pyfunction!(rrc_lattice, m)?)?;
    m.add_function(wrap_pyfunction!(nmi, m)?)?;
    m.add_function(wrap_pyfunction!(rgb_to_lab, m)?)?;
    m.add_function(wrap_pyfunction!(lab_to_rgb, m)?)?;
    m.add_function(wrap_pyfunction!(architectures, m)?)?;
    m.add_function(wrap_pyfunction!(initial_checksum, m)?)?;
    m.add_function(wrap_pyfunction!(validate_manifest, m)?)?;
    m.add_function(wrap_pyfunction!(stage_seed, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
