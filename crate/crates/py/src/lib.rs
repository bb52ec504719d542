//! Python module `hbu`.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use hbu_core::eaws::DetectParams;
use hbu_core::error::Error;
use hbu_core::manifest::load_manifest;
use hbu_core::pipeline::{self, IngestParams, WindowParams};
use hbu_core::progress::{self, ModelConfig, TrainConfig, WindowDataset};
use hbu_core::softdtw::{self, ExemplarLibrary, FeatureSequence, SoftDtwParams};
use hbu_core::synth::{generate, ScenarioSpec};

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Image { .. } => PyIOError::new_err(e.to_string()),
        Error::NonFiniteLoss { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn seq(rows: Vec<Vec<f64>>) -> PyResult<FeatureSequence> {
    FeatureSequence::new(&rows).map_err(err)
}

fn sdtw(gamma: f64) -> PyResult<SoftDtwParams> {
    SoftDtwParams::new(gamma).map_err(err)
}

/// Soft-DTW cost between two sequences of feature vectors.
#[pyfunction]
#[pyo3(signature = (x, y, gamma = 0.1))]
fn soft_dtw(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>, gamma: f64) -> PyResult<f64> {
    softdtw::soft_dtw(&seq(x)?, &seq(y)?, &sdtw(gamma)?).map_err(err)
}

/// Cost and gradient with respect to `x`, shaped like `x`.
#[pyfunction]
#[pyo3(signature = (x, y, gamma = 0.1))]
fn soft_dtw_grad(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>, gamma: f64) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let x = seq(x)?;
    let (cost, g) = softdtw::soft_dtw_grad(&x, &seq(y)?, &sdtw(gamma)?).map_err(err)?;
    Ok((cost, g.chunks(x.dim()).map(<[f64]>::to_vec).collect()))
}

#[pyfunction]
fn hard_dtw(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> PyResult<f64> {
    softdtw::hard_dtw(&seq(x)?, &seq(y)?).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (duration_s, window_s = 8.0, hop_s = 4.0))]
fn window_count(duration_s: f64, window_s: f64, hop_s: f64) -> usize {
    hbu_core::eaws::window_count(duration_s, window_s, hop_s)
}

/// ROC points (fpr, tpr) and AUC.
#[pyfunction]
fn binary_roc(scores: Vec<f64>, positive: Vec<bool>) -> PyResult<(Vec<(f64, f64)>, f64)> {
    let r = hbu_core::metrics::binary_roc(&scores, &positive).map_err(err)?;
    Ok((r.points, r.auc))
}

/// Writes a synthetic recording into `out_dir`; returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, scenario = "standard", seed = 7, cycle_s = None))]
fn synth(out_dir: PathBuf, scenario: &str, seed: u64, cycle_s: Option<f64>) -> PyResult<PathBuf> {
    let mut spec = match scenario {
        "standard" => ScenarioSpec::standard(seed),
        "library" => ScenarioSpec::library(seed),
        other => return Err(PyValueError::new_err(format!("unknown scenario `{other}`"))),
    };
    if let Some(c) = cycle_s {
        spec.cycle_duration_s = c;
        spec.episodes.retain(|e| e.start_s + e.duration_s <= c);
    }
    generate(&spec).and_then(|c| c.write(&out_dir)).map_err(err)
}

/// Normalized recording: selected worker pose per 30 Hz frame plus door
/// series, ground truth and annotations when present.
#[pyclass]
struct Bundle(pipeline::Bundle);

#[pymethods]
impl Bundle {
    #[staticmethod]
    fn read(dir: PathBuf) -> PyResult<Self> {
        pipeline::Bundle::read(&dir).map(Bundle).map_err(err)
    }

    fn write(&self, dir: PathBuf) -> PyResult<()> {
        self.0.write(&dir).map_err(err)
    }

    #[getter]
    fn frames(&self) -> usize {
        self.0.poses.len()
    }

    #[getter]
    fn duration_s(&self) -> f64 {
        self.0.poses.duration()
    }

    #[getter]
    fn has_reference(&self) -> bool {
        self.0.reference.is_some()
    }

    /// Camera chosen per frame; `None` for dropped frames.
    #[getter]
    fn provenance(&self) -> Vec<(f64, Option<String>)> {
        self.0.provenance.iter().map(|p| (p.timestamp, p.camera.clone())).collect()
    }

    /// `(joint, mpjpe_mm, pck)` rows plus a `"mean"` row, against the ground truth.
    #[pyo3(signature = (threshold_mm = 150.0))]
    fn pose_errors(&self, threshold_mm: f64) -> PyResult<Vec<(String, f64, f64)>> {
        let t = self.0.pose_errors(threshold_mm).map_err(err)?;
        let mut out: Vec<_> = t.joints.iter().zip(&t.mpjpe_mm).zip(&t.pck).map(|((j, m), p)| (j.clone(), *m, *p)).collect();
        out.push(("mean".into(), t.mean_mpjpe_mm, t.mean_pck));
        Ok(out)
    }

    /// Subgoal-labeled token windows for the progress classifier.
    #[pyo3(signature = (cycle = 0))]
    fn windows(&self, cycle: usize) -> PyResult<Windows> {
        pipeline::progress_windows(&self.0, cycle, &WindowParams::default()).map(Windows).map_err(err)
    }
}

#[pyfunction]
fn ingest(manifest: PathBuf) -> PyResult<Bundle> {
    let m = load_manifest(&manifest).map_err(err)?;
    pipeline::ingest(&m, &IngestParams::default()).map(Bundle).map_err(err)
}

#[pyclass]
struct Analysis(pipeline::Analysis);

#[pymethods]
impl Analysis {
    /// `(class, start_s, end_s, valid)` per merged segment.
    #[getter]
    fn segments(&self) -> Vec<(String, f64, f64, bool)> {
        self.0.detection.segments.iter().map(|s| (s.class.code().to_string(), s.start_s, s.end_s, s.valid)).collect()
    }

    #[getter]
    fn window_labels(&self) -> Vec<String> {
        self.0.detection.windows.iter().map(|w| w.label.clone()).collect()
    }

    fn report_csv(&self) -> String {
        self.0.report.to_csv()
    }

    fn write(&self, dir: PathBuf) -> PyResult<()> {
        self.0.write(&dir).map_err(err)
    }
}

/// Posture analysis of `bundle` with exemplars from a library file or
/// from another bundle's posture episodes.
#[pyfunction]
#[pyo3(signature = (bundle, exemplars, gamma = 0.1))]
fn analyze(bundle: &Bundle, exemplars: PathBuf, gamma: f64) -> PyResult<Analysis> {
    let params = DetectParams { gamma, ..DetectParams::default() };
    let lib = if exemplars.is_dir() {
        pipeline::Bundle::read(&exemplars).and_then(|b| b.exemplars(&params))
    } else {
        ExemplarLibrary::read(&exemplars)
    }
    .map_err(err)?;
    pipeline::analyze(&bundle.0, &lib, &params).map(Analysis).map_err(err)
}

#[pyclass]
struct Windows(WindowDataset);

#[pymethods]
impl Windows {
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        WindowDataset::read(&path).map(Windows).map_err(err)
    }

    /// Generated set with one fixed pattern per class.
    #[staticmethod]
    #[pyo3(signature = (n_classes, per_class, d_in = 51, noise = 0.3, seed = 0))]
    fn separable(n_classes: usize, per_class: usize, d_in: usize, noise: f64, seed: u64) -> PyResult<Self> {
        progress::separable_windows(n_classes, per_class, d_in, noise, seed).map(Windows).map_err(err)
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        self.0.write(&path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.windows.len()
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.0.class_names.clone()
    }

    #[getter]
    fn d_in(&self) -> usize {
        self.0.d_in
    }

    /// `(tokens as 10 rows, label)` of window `i`.
    fn __getitem__(&self, i: usize) -> PyResult<(Vec<Vec<f64>>, usize)> {
        let w = self.0.windows.get(i).ok_or_else(|| pyo3::exceptions::PyIndexError::new_err(i))?;
        Ok((w.tokens.chunks(w.d_in).map(<[f64]>::to_vec).collect(), w.label))
    }
}

#[pyclass]
struct Transformer(progress::Transformer);

fn flat(tokens: Vec<Vec<f64>>) -> Vec<f64> {
    tokens.into_iter().flatten().collect()
}

#[pymethods]
impl Transformer {
    #[new]
    #[pyo3(signature = (d_in, class_names, d_model = 64, n_heads = 4, n_layers = 2, d_ffn = 128, dropout = 0.1, positional = true, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        d_in: usize,
        class_names: Vec<String>,
        d_model: usize,
        n_heads: usize,
        n_layers: usize,
        d_ffn: usize,
        dropout: f64,
        positional: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let mc = ModelConfig {
            d_in,
            d_model,
            n_heads,
            n_layers,
            d_ffn,
            n_classes: class_names.len(),
            dropout_rate: dropout,
            positional,
            seed,
        };
        progress::Transformer::new(mc, class_names).map(Transformer).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        progress::Transformer::load(&path).map(Transformer).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(err)
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.0.class_names.clone()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.0.parameter_count()
    }

    /// Class probabilities for 10 tokens of `d_in` values.
    fn forward(&self, tokens: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        self.0.forward(&flat(tokens)).map_err(err)
    }

    fn predict(&self, tokens: Vec<Vec<f64>>) -> PyResult<usize> {
        self.0.predict(&flat(tokens)).map_err(err)
    }

    fn loss(&self, tokens: Vec<Vec<f64>>, label: usize) -> PyResult<f64> {
        self.0.loss(&flat(tokens), label).map_err(err)
    }

    /// Largest relative error between analytic and numeric gradients.
    fn grad_check(&self, tokens: Vec<Vec<f64>>, label: usize) -> PyResult<f64> {
        progress::grad_check(&self.0, &flat(tokens), label).map(|r| r.max_rel_error).map_err(err)
    }
}

/// Trains a fresh model; returns it with one `(epoch, train_loss,
/// train_accuracy, val_recall, val_f1, val_auc)` tuple per epoch and the
/// test accuracy (NaN without a test split).
#[pyfunction]
#[pyo3(signature = (windows, epochs = 60, seed = 0, d_model = 64, n_heads = 4, n_layers = 2, d_ffn = 128, learning_rate = 1e-3))]
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
fn train(
    py: Python<'_>,
    windows: &Windows,
    epochs: usize,
    seed: u64,
    d_model: usize,
    n_heads: usize,
    n_layers: usize,
    d_ffn: usize,
    learning_rate: f64,
) -> PyResult<(Transformer, Vec<(usize, f64, f64, f64, f64, f64)>, f64)> {
    let ds = &windows.0;
    let mc = ModelConfig {
        d_model,
        n_heads,
        n_layers,
        d_ffn,
        seed,
        ..ModelConfig::with_io(ds.d_in, ds.class_names.len())
    };
    let tc = TrainConfig {
        epochs,
        seed,
        learning_rate,
        ..TrainConfig::default()
    };
    let out = py.detach(|| progress::train(ds, &mc, &tc)).map_err(err)?;
    let trace = out
        .trace
        .iter()
        .map(|m| (m.epoch, m.train_loss, m.train_accuracy, m.val_recall, m.val_f1, m.val_auc))
        .collect();
    let test = out.test.as_ref().map_or(f64::NAN, |t| t.scores.overall_accuracy);
    Ok((Transformer(out.model), trace, test))
}

#[pymodule]
fn hbu(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(soft_dtw, m)?)?;
    m.add_function(wrap_pyfunction!(soft_dtw_grad, m)?)?;
    m.add_function(wrap_pyfunction!(hard_dtw, m)?)?;
    m.add_function(wrap_pyfunction!(window_count, m)?)?;
    m.add_function(wrap_pyfunction!(binary_roc, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(ingest, m)?)?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_class::<Bundle>()?;
    m.add_class::<Analysis>()?;
    m.add_class::<Windows>()?;
    m.add_class::<Transformer>()?;
    Ok(())
}
