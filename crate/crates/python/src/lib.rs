//! Python bindings: window schedules, focal-bias matrices, attention
//! analysis, model inference and training.
//!
//! Images cross the boundary as flat row-major `[batch, 3, px, px]` lists.

use std::path::Path;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use vitp_core::analysis::{mad_report, mean_attention_distance as mad, model_bias_histogram, MadRow};
use vitp_core::config::RunConfig;
use vitp_core::focal_bias::{
    self, build_absolute_bias, build_relative_table, materialize_relative_bias, GridShape, MrfaMode, SuppressionValue,
    WindowSchedule, WindowSpec,
};
use vitp_core::model::ViTPModel;
use vitp_core::train::trainer::load_model;
use vitp_core::train::Trainer;
use vitp_core::{Error, Scalar, Tensor};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Config(_) | Error::Input(_) | Error::Shape(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Window sides as a `layers × heads` matrix.
pub fn schedule_sides(mode: &str, layers: usize, heads: usize, m: usize) -> vitp_core::Result<Vec<Vec<usize>>> {
    let mode = MrfaMode::parse(mode).ok_or_else(|| Error::Config(format!("unknown MRFA mode `{mode}` (D, W, DW)")))?;
    Ok(WindowSchedule::build(mode, layers, heads, GridShape::new(m, 1)?)?.side_matrix())
}

/// Initial focal bias for one head as an `N × N` matrix, built either
/// directly or by gathering from the relative table.
pub fn bias_matrix(
    m: usize,
    window: usize,
    suppression: f64,
    class_token: bool,
    relative: bool,
) -> vitp_core::Result<Vec<Vec<f64>>> {
    let grid = GridShape::new(m, 1)?;
    let w = WindowSpec::new(window, grid)?;
    let v = SuppressionValue::new(suppression)?;
    let t = if relative {
        materialize_relative_bias(&build_relative_table::<f64>(w, grid, v), grid, class_token)?
    } else {
        build_absolute_bias::<f64>(w, grid, v, class_token)
    };
    Ok(rows(&t))
}

fn rows<T: Scalar>(t: &Tensor<T>) -> Vec<Vec<T>> {
    let n = *t.shape().last().unwrap_or(&1);
    t.data().chunks(n.max(1)).map(<[T]>::to_vec).collect()
}

/// Reshapes a flat image buffer to `[b, 3, px, px]`.
pub fn image_tensor(flat: Vec<f32>, image_px: usize) -> vitp_core::Result<Tensor<f32>> {
    let per = 3 * image_px * image_px;
    if flat.is_empty() || !flat.len().is_multiple_of(per) {
        return Err(Error::Input(format!(
            "image buffer of {} values is not a whole number of 3x{image_px}x{image_px} images",
            flat.len()
        )));
    }
    Tensor::new(vec![flat.len() / per, 3, image_px, image_px], flat)
}

fn overrides(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    if let Some(kw) = kwargs {
        for (k, v) in kw.iter() {
            let v = if let Ok(b) = v.extract::<bool>() {
                b.to_string()
            } else {
                v.str()?.to_string()
            };
            out.push((k.extract::<String>()?, v));
        }
    }
    Ok(out)
}

/// Resolves `key = value` text plus keyword overrides.
pub fn resolve_config(text: &str, flags: &[(String, String)]) -> vitp_core::Result<RunConfig> {
    RunConfig::resolve(Some((text, "<python>")), flags, None)
}

#[pyfunction]
#[pyo3(signature = (mode, layers, heads, m))]
fn window_schedule(mode: &str, layers: usize, heads: usize, m: usize) -> PyResult<Vec<Vec<usize>>> {
    schedule_sides(mode, layers, heads, m).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (m, window, suppression = -100.0, class_token = false, relative = false))]
fn focal_bias_matrix(
    m: usize,
    window: usize,
    suppression: f64,
    class_token: bool,
    relative: bool,
) -> PyResult<Vec<Vec<f64>>> {
    bias_matrix(m, window, suppression, class_token, relative).map_err(to_py)
}

/// Mean attention distance in pixels of `[batch][N][N]` attention rows.
#[pyfunction]
#[pyo3(signature = (attention, m, patch_px))]
fn mean_attention_distance(attention: Vec<Vec<Vec<f64>>>, m: usize, patch_px: usize) -> PyResult<f64> {
    let b = attention.len();
    let n = attention.first().map_or(0, Vec::len);
    let data: Vec<f64> = attention.into_iter().flatten().flatten().collect();
    let t = Tensor::new(vec![b, n, n], data).map_err(to_py)?;
    mad(&t, GridShape::new(m, patch_px).map_err(to_py)?).map_err(to_py)
}

/// `(left, right, count)` per bin over `[lo, hi]`.
#[pyfunction]
#[pyo3(signature = (values, bins, lo, hi))]
fn bias_histogram(values: Vec<f64>, bins: usize, lo: f64, hi: f64) -> PyResult<Vec<(f64, f64, u64)>> {
    let h = focal_bias::bias_histogram(values, bins, lo, hi).map_err(to_py)?;
    Ok((0..h.bins())
        .map(|b| (h.edges(b).0, h.edges(b).1, h.counts()[b]))
        .collect())
}

/// Trains a run and returns its summary.
#[pyfunction]
#[pyo3(signature = (config = "", **kwargs))]
fn train(py: Python<'_>, config: &str, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Py<PyDict>> {
    let cfg = resolve_config(config, &overrides(kwargs)?).map_err(to_py)?;
    let (summary, out_dir) = py
        .detach(move || -> vitp_core::Result<_> {
            let mut t = Trainer::new(cfg)?;
            let s = t.run(&mut |_| {})?;
            Ok((s, t.cfg.out_dir.display().to_string()))
        })
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("steps", summary.steps)?;
    d.set_item(
        "losses",
        summary.step_records.iter().map(|r| r.loss).collect::<Vec<_>>(),
    )?;
    d.set_item(
        "eval_acc",
        summary.epoch_records.iter().map(|r| r.eval_acc).collect::<Vec<_>>(),
    )?;
    d.set_item("out_dir", out_dir)?;
    Ok(d.unbind())
}

#[pyclass(name = "Model", module = "vitp")]
struct PyModel {
    model: ViTPModel<f32>,
}

fn mad_tuple(r: &MadRow) -> (usize, usize, usize, f64) {
    (r.layer, r.head, r.window_side_at_init, r.mad_px)
}

#[pymethods]
impl PyModel {
    /// Freshly initialized model from config text and keyword overrides.
    #[new]
    #[pyo3(signature = (config = "", seed = None, **kwargs))]
    fn new(config: &str, seed: Option<u64>, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let cfg = resolve_config(config, &overrides(kwargs)?).map_err(to_py)?;
        let model = ViTPModel::new(&cfg.model, seed.unwrap_or(cfg.seed)).map_err(to_py)?;
        Ok(PyModel { model })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (_, model, _) = load_model(Path::new(path)).map_err(to_py)?;
        Ok(PyModel { model })
    }

    #[getter]
    fn image_px(&self) -> usize {
        self.model.config().image_px
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.model.config().num_classes
    }

    #[getter]
    fn tokens(&self) -> usize {
        self.model.config().tokens()
    }

    fn param_count(&self) -> usize {
        self.model.param_count()
    }

    fn schedule(&self) -> Vec<Vec<usize>> {
        self.model.schedule().side_matrix()
    }

    /// `[batch][classes]` logits.
    fn logits(&self, py: Python<'_>, images: Vec<f32>) -> PyResult<Vec<Vec<f32>>> {
        let x = image_tensor(images, self.image_px()).map_err(to_py)?;
        let out = py.detach(|| self.model.logits(&x)).map_err(to_py)?;
        Ok(rows(&out))
    }

    /// `(layer, head, window_side_at_init, mad_px)` rows.
    fn mean_attention_distance(&self, images: Vec<f32>) -> PyResult<Vec<(usize, usize, usize, f64)>> {
        let x = image_tensor(images, self.image_px()).map_err(to_py)?;
        let r = mad_report(&self.model, &x).map_err(to_py)?;
        Ok(r.rows.iter().map(mad_tuple).collect())
    }

    /// Materialized `[heads][N][N]` bias of one layer, or None without bias.
    fn bias(&self, layer: usize) -> PyResult<Option<Vec<Vec<Vec<f32>>>>> {
        if layer >= self.model.config().depth {
            return Err(PyValueError::new_err(format!("layer {layer} out of range")));
        }
        Ok(self.model.materialized_bias(layer).map(|t| {
            let n = t.shape()[1];
            rows(&t).chunks(n).map(<[Vec<f32>]>::to_vec).collect()
        }))
    }

    #[pyo3(signature = (bins = 20, lo = None, hi = None))]
    fn bias_histogram(&self, bins: usize, lo: Option<f64>, hi: Option<f64>) -> PyResult<Vec<(f64, f64, u64)>> {
        let range = match (lo, hi) {
            (Some(l), Some(h)) => Some((l, h)),
            (None, None) => None,
            _ => return Err(PyValueError::new_err("lo and hi must be given together")),
        };
        let h = model_bias_histogram(&self.model, bins, range).map_err(to_py)?;
        Ok((0..h.bins())
            .map(|b| (h.edges(b).0, h.edges(b).1, h.counts()[b]))
            .collect())
    }
}

#[pymodule]
fn vitp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(window_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(focal_bias_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(mean_attention_distance, m)?)?;
    m.add_function(wrap_pyfunction!(bias_histogram, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_class::<PyModel>()?;
    Ok(())
}
