//! Python bindings for the dldseg toolkit.
//!
//! The module mirrors the Rust API at desk scale: synthesize phantom cases,
//! split them into leakage-free folds, train the mini U-Net under any loss
//! mode, and score predictions slice by slice. Volumes and label maps cross
//! the boundary as flat row-major lists together with their shapes.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;

use dldseg_core::dataset as ds;
use dldseg_core::eval as ev;
use dldseg_core::folds as fl;
use dldseg_core::loss::{ClassId, LossMode as CoreLossMode, PixelLabel};
use dldseg_core::train as tr;
use dldseg_core::{Error, Model as CoreModel, ModelConfig, CLASS_NAMES, NUM_CLASSES, PROB_FLOOR};

fn to_py_err(err: Error) -> PyErr {
    match err {
        Error::Io { .. } => PyIOError::new_err(err.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn class_from_name(name: &str) -> PyResult<ClassId> {
    CLASS_NAMES
        .iter()
        .position(|&n| n.eq_ignore_ascii_case(name))
        .map(|i| ClassId::from_index(i).expect("CLASS_NAMES indexes are valid"))
        .ok_or_else(|| {
            PyValueError::new_err(format!(
                "unknown class {name:?}; expected one of {CLASS_NAMES:?}"
            ))
        })
}

/// Settings for the synthetic phantom generator.
#[pyclass(name = "GeneratorConfig", module = "dldseg")]
#[derive(Clone)]
struct PyGeneratorConfig {
    inner: ds::GeneratorConfig,
}

#[pymethods]
impl PyGeneratorConfig {
    #[new]
    #[pyo3(signature = (num_cases=250, image_size=32, context_slices=3, slices_min=8, slices_max=12, seed=0, class_slice_weights=None))]
    fn new(
        num_cases: usize,
        image_size: usize,
        context_slices: usize,
        slices_min: usize,
        slices_max: usize,
        seed: u64,
        class_slice_weights: Option<[f64; NUM_CLASSES]>,
    ) -> PyResult<Self> {
        let mut inner = ds::GeneratorConfig {
            num_cases,
            image_size,
            context_slices,
            slices_min,
            slices_max,
            seed,
            ..ds::GeneratorConfig::default()
        };
        if let Some(w) = class_slice_weights {
            inner.class_slice_weights = w;
        }
        inner.validate().map_err(to_py_err)?;
        Ok(PyGeneratorConfig { inner })
    }

    #[getter]
    fn num_cases(&self) -> usize {
        self.inner.num_cases
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.inner.image_size
    }

    #[getter]
    fn context_slices(&self) -> usize {
        self.inner.context_slices
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn class_slice_weights(&self) -> [f64; NUM_CLASSES] {
        self.inner.class_slice_weights
    }

    fn __repr__(&self) -> String {
        format!(
            "GeneratorConfig(num_cases={}, image_size={}, context_slices={}, seed={})",
            self.inner.num_cases, self.inner.image_size, self.inner.context_slices, self.inner.seed
        )
    }
}

/// One synthetic volume with its lung mask, dense truth, and designated slices.
#[pyclass(name = "Case", module = "dldseg")]
#[derive(Clone)]
struct PyCase {
    inner: ds::Case,
}

#[pymethods]
impl PyCase {
    #[getter]
    fn case_id(&self) -> String {
        self.inner.case_id.clone()
    }

    #[getter]
    fn num_slices(&self) -> usize {
        self.inner.num_slices()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    /// The designated slices as (slice_index, class_name) pairs.
    #[getter]
    fn annotated_slices(&self) -> Vec<(usize, &'static str)> {
        self.inner
            .annotated_slices
            .iter()
            .map(|&(z, c)| (z, c.name()))
            .collect()
    }

    /// Flat (num_slices, height, width) row-major HU-like intensities.
    fn volume(&self) -> Vec<f64> {
        self.inner.volume.data().to_vec()
    }

    /// Flat row-major lung mask for one slice, 1 inside the lung.
    fn lung_mask(&self, slice_index: usize) -> PyResult<Vec<u8>> {
        let hw = self.inner.height() * self.inner.width();
        if slice_index >= self.inner.num_slices() {
            return Err(PyValueError::new_err(format!(
                "slice {slice_index} out of range for {} slices",
                self.inner.num_slices()
            )));
        }
        Ok(self.inner.lung_mask.data()[slice_index * hw..(slice_index + 1) * hw].to_vec())
    }

    /// Flat row-major dense truth for one slice: class indices inside the
    /// lung, 255 outside.
    fn truth(&self, slice_index: usize) -> PyResult<Vec<u8>> {
        let hw = self.inner.height() * self.inner.width();
        if slice_index >= self.inner.num_slices() {
            return Err(PyValueError::new_err(format!(
                "slice {slice_index} out of range for {} slices",
                self.inner.num_slices()
            )));
        }
        Ok(self.inner.full_truth.data()[slice_index * hw..(slice_index + 1) * hw].to_vec())
    }

    fn __repr__(&self) -> String {
        format!(
            "Case(case_id={:?}, shape=({}, {}, {}), annotated={})",
            self.inner.case_id,
            self.inner.num_slices(),
            self.inner.height(),
            self.inner.width(),
            self.inner.annotated_slices.len()
        )
    }
}

/// Per-pixel Strong/Weak/Ignore labels for one designated slice.
#[pyclass(name = "PartialAnnotation", module = "dldseg")]
#[derive(Clone)]
struct PyAnnotation {
    inner: ds::PartialAnnotation,
}

#[pymethods]
impl PyAnnotation {
    #[getter]
    fn slice_index(&self) -> usize {
        self.inner.slice_index
    }

    #[getter]
    fn chosen_class(&self) -> &'static str {
        self.inner.chosen_class.name()
    }

    #[getter]
    fn strong_count(&self) -> usize {
        self.inner
            .labels
            .iter()
            .filter(|l| matches!(l, PixelLabel::Strong(_)))
            .count()
    }

    #[getter]
    fn weak_count(&self) -> usize {
        self.inner
            .labels
            .iter()
            .filter(|l| matches!(l, PixelLabel::Weak(_)))
            .count()
    }

    #[getter]
    fn ignore_count(&self) -> usize {
        self.inner
            .labels
            .iter()
            .filter(|l| matches!(l, PixelLabel::Ignore))
            .count()
    }

    /// Flat row-major label map: "strong", "weak", or "ignore" per pixel.
    fn labels(&self) -> Vec<&'static str> {
        self.inner
            .labels
            .iter()
            .map(|l| match l {
                PixelLabel::Strong(_) => "strong",
                PixelLabel::Weak(_) => "weak",
                PixelLabel::Ignore => "ignore",
            })
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "PartialAnnotation(slice_index={}, chosen_class={:?}, strong={}, weak={})",
            self.inner.slice_index,
            self.inner.chosen_class.name(),
            self.strong_count(),
            self.weak_count()
        )
    }
}

/// Which loss the trainer optimizes.
#[pyclass(name = "LossMode", module = "dldseg")]
#[derive(Clone)]
struct PyLossMode {
    inner: CoreLossMode,
}

#[pymethods]
impl PyLossMode {
    /// Cross-entropy on strong pixels only.
    #[staticmethod]
    fn supervised_only() -> Self {
        PyLossMode { inner: CoreLossMode::SupervisedOnly }
    }

    /// The partial-annotation loss: strong cross-entropy plus a weak term
    /// that penalizes predicting the forbidden class, weighted by `lam`.
    #[staticmethod]
    fn proposed(lam: f64) -> PyResult<Self> {
        if !lam.is_finite() || lam < 0.0 {
            return Err(PyValueError::new_err(format!(
                "lambda must be finite and >= 0, got {lam}"
            )));
        }
        Ok(PyLossMode { inner: CoreLossMode::Proposed { lambda: lam } })
    }

    /// Pseudo-labeling baseline: weak pixels train toward their best
    /// non-forbidden class.
    #[staticmethod]
    fn semi_supervised() -> Self {
        PyLossMode { inner: CoreLossMode::SemiSupervised }
    }

    /// The canonical method label used in reports, e.g. "proposed_lambda_0.1".
    #[getter]
    fn label(&self) -> String {
        ev::method_label(&self.inner)
    }

    fn __repr__(&self) -> String {
        format!("LossMode({:?})", self.label())
    }
}

/// Case-aware stratified fold assignment.
#[pyclass(name = "FoldPlan", module = "dldseg")]
#[derive(Clone)]
struct PyFoldPlan {
    inner: fl::FoldPlan,
}

fn slice_tuples(refs: &[fl::SliceRef]) -> Vec<(String, usize, &'static str)> {
    refs.iter()
        .map(|r| (r.case_id.clone(), r.slice_index, r.chosen.name()))
        .collect()
}

#[pymethods]
impl PyFoldPlan {
    #[getter]
    fn num_folds(&self) -> usize {
        self.inner.k
    }

    /// Test slices of one fold as (case_id, slice_index, class_name) tuples.
    fn test_slices(&self, fold: usize) -> PyResult<Vec<(String, usize, &'static str)>> {
        if fold >= self.inner.k {
            return Err(PyValueError::new_err(format!(
                "fold {fold} out of range for {} folds",
                self.inner.k
            )));
        }
        Ok(slice_tuples(self.inner.test_slices(fold)))
    }

    /// Training slices of one fold: everything outside its test cases.
    fn train_slices(&self, fold: usize) -> PyResult<Vec<(String, usize, &'static str)>> {
        if fold >= self.inner.k {
            return Err(PyValueError::new_err(format!(
                "fold {fold} out of range for {} folds",
                self.inner.k
            )));
        }
        Ok(slice_tuples(&self.inner.train_slices(fold)))
    }

    fn __repr__(&self) -> String {
        format!("FoldPlan(num_folds={})", self.inner.k)
    }
}

/// The mini 3D-in/2D-out U-Net.
#[pyclass(name = "Model", module = "dldseg")]
struct PyModel {
    inner: CoreModel,
}

impl PyModel {
    fn forward_probabilities(&self, case: &PyCase, slice_index: usize) -> PyResult<Vec<f64>> {
        let input = ds::context_volume(&case.inner, slice_index, self.inner.config().context_slices)
            .map_err(to_py_err)?;
        let mut pass = self.inner.forward(&input).map_err(to_py_err)?;
        let probs = pass.graph.softmax_channels(pass.logits).map_err(to_py_err)?;
        Ok(pass.graph.value(probs).data().to_vec())
    }
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (context_slices=3, image_size=32, base_channels=8, depth=2, num_classes=5, seed=0))]
    fn new(
        context_slices: usize,
        image_size: usize,
        base_channels: usize,
        depth: usize,
        num_classes: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let config = ModelConfig { context_slices, image_size, base_channels, depth, num_classes };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inner = CoreModel::build(config, &mut rng).map_err(to_py_err)?;
        Ok(PyModel { inner })
    }

    /// Loads a model saved with `save`.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel { inner: CoreModel::load(&path).map_err(to_py_err)? })
    }

    /// Writes architecture and parameters into a directory.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py_err)
    }

    #[getter]
    fn context_slices(&self) -> usize {
        self.inner.config().context_slices
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.inner.config().image_size
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.config().num_classes
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.count_parameters()
    }

    /// Class index per pixel for one slice, flat row-major (height*width).
    fn predict(&self, case: &PyCase, slice_index: usize) -> PyResult<Vec<usize>> {
        let input = ds::context_volume(&case.inner, slice_index, self.inner.config().context_slices)
            .map_err(to_py_err)?;
        let pass = self.inner.forward(&input).map_err(to_py_err)?;
        let decoded =
            ev::decode_argmax(pass.graph.value(pass.logits)).map_err(to_py_err)?;
        Ok(decoded.into_iter().map(|c| c.index()).collect())
    }

    /// Class probabilities per pixel, flat row-major (height*width*5),
    /// channel-last.
    fn predict_probabilities(&self, case: &PyCase, slice_index: usize) -> PyResult<Vec<f64>> {
        self.forward_probabilities(case, slice_index)
    }

    /// The training loss of this model on one designated slice.
    fn loss(&self, case: &PyCase, slice_index: usize, mode: &PyLossMode) -> PyResult<f64> {
        let &(_, chosen) = case
            .inner
            .annotated_slices
            .iter()
            .find(|&&(z, _)| z == slice_index)
            .ok_or_else(|| {
                PyValueError::new_err(format!("slice {slice_index} is not designated"))
            })?;
        let ann =
            ds::make_partial_annotation(&case.inner, slice_index, chosen).map_err(to_py_err)?;
        let input = ds::context_volume(&case.inner, slice_index, self.inner.config().context_slices)
            .map_err(to_py_err)?;
        let mut pass = self.inner.forward(&input).map_err(to_py_err)?;
        let loss = dldseg_core::loss::attach_loss(&mut pass.graph, pass.logits, &ann.labels, mode.inner)
            .map_err(to_py_err)?;
        pass.graph.value(loss).item().map_err(to_py_err)
    }

    /// Trains in place with Adam and early stopping on a held-out strong
    /// cross-entropy. Returns the history and the best epoch.
    #[pyo3(signature = (cases, mode, seed=0, validation_fraction=0.2, step_size=None, max_epochs=None, patience=None, batch_size=None))]
    #[allow(clippy::too_many_arguments)]
    fn fit(
        &mut self,
        py: Python<'_>,
        cases: Vec<PyCase>,
        mode: &PyLossMode,
        seed: u64,
        validation_fraction: f64,
        step_size: Option<f64>,
        max_epochs: Option<usize>,
        patience: Option<usize>,
        batch_size: Option<usize>,
    ) -> PyResult<Py<PyDict>> {
        let cases: Vec<ds::Case> = cases.into_iter().map(|c| c.inner).collect();
        let refs = fl::annotated_slice_refs(&cases);
        let (train_refs, val_refs) =
            fl::validation_split(&refs, validation_fraction, seed).map_err(to_py_err)?;
        let mut hyper = tr::AdamHyper::default();
        if let Some(v) = step_size {
            hyper.step_size = v;
        }
        if let Some(v) = max_epochs {
            hyper.max_epochs = v;
        }
        if let Some(v) = patience {
            hyper.patience = v;
        }
        if let Some(v) = batch_size {
            hyper.batch_size = v;
        }
        hyper.validate().map_err(to_py_err)?;
        let outcome = tr::train(
            self.inner.clone(),
            &cases,
            &train_refs,
            &val_refs,
            mode.inner,
            &hyper,
            seed,
        )
        .map_err(to_py_err)?;
        self.inner = outcome.model;
        let dict = PyDict::new(py);
        dict.set_item("best_epoch", outcome.best_epoch)?;
        dict.set_item("best_val_loss", outcome.best_val_loss)?;
        let history: Vec<(usize, f64, f64)> = outcome
            .history
            .iter()
            .map(|e| (e.epoch, e.train_loss, e.val_loss))
            .collect();
        dict.set_item("history", history)?;
        Ok(dict.into())
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!(
            "Model(context_slices={}, image_size={}, base_channels={}, depth={}, parameters={})",
            c.context_slices,
            c.image_size,
            c.base_channels,
            c.depth,
            self.inner.count_parameters()
        )
    }
}

/// Synthesizes one deterministic phantom case.
#[pyfunction]
fn synth_case(cfg: &PyGeneratorConfig, case_seed: u64) -> PyResult<PyCase> {
    Ok(PyCase { inner: ds::synth_case(&cfg.inner, case_seed).map_err(to_py_err)? })
}

/// Synthesizes the whole dataset described by the config.
#[pyfunction]
fn synth_dataset(cfg: &PyGeneratorConfig) -> PyResult<Vec<PyCase>> {
    let cases = ds::synth_dataset(&cfg.inner).map_err(to_py_err)?;
    Ok(cases.into_iter().map(|inner| PyCase { inner }).collect())
}

/// Writes a dataset directory (manifest plus per-case binaries).
#[pyfunction]
fn save_dataset(cfg: &PyGeneratorConfig, cases: Vec<PyCase>, dir: PathBuf) -> PyResult<()> {
    let cases: Vec<ds::Case> = cases.into_iter().map(|c| c.inner).collect();
    ds::save_dataset(&cfg.inner, &cases, &dir).map_err(to_py_err)
}

/// Reads a dataset directory back into (config, cases).
#[pyfunction]
fn load_dataset(dir: PathBuf) -> PyResult<(PyGeneratorConfig, Vec<PyCase>)> {
    let (cfg, cases) = ds::load_dataset(&dir).map_err(to_py_err)?;
    Ok((
        PyGeneratorConfig { inner: cfg },
        cases.into_iter().map(|inner| PyCase { inner }).collect(),
    ))
}

/// Builds the Strong/Weak/Ignore label map for one designated slice.
#[pyfunction]
fn make_partial_annotation(
    case: &PyCase,
    slice_index: usize,
    chosen: &str,
) -> PyResult<PyAnnotation> {
    let chosen = class_from_name(chosen)?;
    Ok(PyAnnotation {
        inner: ds::make_partial_annotation(&case.inner, slice_index, chosen).map_err(to_py_err)?,
    })
}

/// Assigns cases to k folds, stratified by slice class, leakage-free by case.
#[pyfunction]
#[pyo3(signature = (cases, k, seed=0))]
fn stratified_group_kfold(cases: Vec<PyCase>, k: usize, seed: u64) -> PyResult<PyFoldPlan> {
    let cases: Vec<ds::Case> = cases.into_iter().map(|c| c.inner).collect();
    Ok(PyFoldPlan { inner: fl::stratified_group_kfold(&cases, k, seed).map_err(to_py_err)? })
}

/// Scores one predicted slice against its partial annotation. Returns a dict
/// with recall, precision, and dice.
#[pyfunction]
#[pyo3(signature = (prediction, annotation, case_id=""))]
fn slice_metrics(
    py: Python<'_>,
    prediction: Vec<usize>,
    annotation: &PyAnnotation,
    case_id: &str,
) -> PyResult<Py<PyDict>> {
    let decoded: Vec<ClassId> = prediction
        .into_iter()
        .map(|i| ClassId::from_index(i).map_err(to_py_err))
        .collect::<PyResult<_>>()?;
    let m = ev::slice_metrics(&decoded, &annotation.inner, case_id).map_err(to_py_err)?;
    let dict = PyDict::new(py);
    dict.set_item("case_id", m.case_id)?;
    dict.set_item("slice_index", m.slice_index)?;
    dict.set_item("class", m.chosen.name())?;
    dict.set_item("recall", m.recall)?;
    dict.set_item("precision", m.precision)?;
    dict.set_item("dice", m.dice)?;
    Ok(dict.into())
}

/// Two-sided paired t-test. Returns a dict with t, df, and p.
#[pyfunction]
fn paired_t_test(py: Python<'_>, a: Vec<f64>, b: Vec<f64>) -> PyResult<Py<PyDict>> {
    let r = ev::paired_t_test(&a, &b).map_err(to_py_err)?;
    let dict = PyDict::new(py);
    dict.set_item("t", r.t)?;
    dict.set_item("df", r.df)?;
    dict.set_item("p", r.p)?;
    Ok(dict.into())
}

/// The five class names in canonical channel order.
#[pyfunction]
fn class_names() -> Vec<&'static str> {
    CLASS_NAMES.to_vec()
}

#[pymodule]
fn dldseg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGeneratorConfig>()?;
    m.add_class::<PyCase>()?;
    m.add_class::<PyAnnotation>()?;
    m.add_class::<PyLossMode>()?;
    m.add_class::<PyFoldPlan>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synth_case, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(save_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(make_partial_annotation, m)?)?;
    m.add_function(wrap_pyfunction!(stratified_group_kfold, m)?)?;
    m.add_function(wrap_pyfunction!(slice_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(paired_t_test, m)?)?;
    m.add_function(wrap_pyfunction!(class_names, m)?)?;
    m.add("NUM_CLASSES", NUM_CLASSES)?;
    m.add("PROB_FLOOR", PROB_FLOOR)?;
    Ok(())
}
