//! Python bindings. Grids travel as nested lists of rows.

use std::path::Path;

use ndarray::Array2;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use cloudflow::bemm::{fit_em, fit_em_masked, normalize_temps, normalize_temps_masked};
use cloudflow::flowfield::{div_curl, extrapolate, grid_coords, normalize_coords};
use cloudflow::imaging::{CloudMask, ThermalFrame};
use cloudflow::motionpool::{change_rank, threshold_select};
use cloudflow::optflow::{derivatives, wlk, WlkConfig};
use cloudflow::pipeline::dataset::write_synthetic;
use cloudflow::pipeline::plot::plot_results;
use cloudflow::pipeline::{run_pipeline, PipelineConfig};
use cloudflow::wsvr::{fit_two_outputs, FcGrid, FcSettings, FlowConstraintOps, KernelSpec, SolverKind, SolverSettings, SvrProblem};
use cloudflow::Error;

type Grid = Vec<Vec<f64>>;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_array<T: Copy>(rows: Vec<Vec<T>>) -> PyResult<Array2<T>> {
    let m = rows.len();
    let n = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Array2::from_shape_vec((m, n), rows.into_iter().flatten().collect()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_rows<T: Copy>(a: &Array2<T>) -> Vec<Vec<T>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn frame(temps: Vec<Vec<f64>>) -> PyResult<ThermalFrame> {
    // Air temperature only matters for the height model, unused here.
    ThermalFrame::new(to_array(temps)?, 300.0).map_err(py_err)
}

fn kernel(name: &str, gamma: f64, beta: f64, degree: u32) -> PyResult<KernelSpec> {
    let k = match name.to_ascii_lowercase().as_str() {
        "linear" => KernelSpec::Linear,
        "rbf" => KernelSpec::Rbf { gamma },
        "polynomial" | "poly" => KernelSpec::Polynomial { gamma, beta, degree },
        other => return Err(PyValueError::new_err(format!("unknown kernel '{other}'"))),
    };
    k.validate().map_err(py_err)?;
    Ok(k)
}

/// Fits a beta mixture to a temperature grid (kelvin). With `mask`, only
/// cloud pixels shape the fit.
#[pyfunction]
#[pyo3(signature = (temps, n_clusters, mask=None, seed=0, max_iters=200, tol=1e-6))]
fn fit_bemm<'py>(
    py: Python<'py>,
    temps: Vec<Vec<f64>>,
    n_clusters: usize,
    mask: Option<Vec<Vec<bool>>>,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let f = frame(temps)?;
    let fit = match mask {
        Some(m) => {
            let m = CloudMask::new(to_array(m)?);
            let t = normalize_temps_masked(&f, &m).map_err(py_err)?;
            fit_em_masked(&t, &m, n_clusters, seed, max_iters, tol)
        }
        None => fit_em(&normalize_temps(&f), n_clusters, seed, max_iters, tol),
    }
    .map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("alpha", fit.components.iter().map(|c| c.alpha).collect::<Vec<_>>())?;
    d.set_item("beta", fit.components.iter().map(|c| c.beta).collect::<Vec<_>>())?;
    d.set_item("prior", fit.components.iter().map(|c| c.prior).collect::<Vec<_>>())?;
    d.set_item("labels", to_rows(&fit.labels()))?;
    d.set_item("trace", fit.cdll_trace.clone())?;
    d.set_item("converged", fit.converged)?;
    Ok(d)
}

/// Weighted Lucas-Kanade flow in pixels per frame; returns `(u, v)`.
#[pyfunction]
#[pyo3(signature = (prev, next, weights=None, window=16, tau=1e-8, sigma=1.0))]
fn optical_flow(
    prev: Vec<Vec<f64>>,
    next: Vec<Vec<f64>>,
    weights: Option<Vec<Vec<f64>>>,
    window: usize,
    tau: f64,
    sigma: f64,
) -> PyResult<(Grid, Grid)> {
    let (a, b) = (frame(prev)?, frame(next)?);
    let w = match weights {
        Some(w) => to_array(w)?,
        None => Array2::ones(a.dim()),
    };
    let cfg = WlkConfig {
        window_area: window,
        reg_tau: tau,
        kernel_sigma: sigma,
        ..WlkConfig::default()
    };
    let d = derivatives(&a, &b, sigma).map_err(py_err)?;
    let f = wlk(&d, &w, &cfg).map_err(py_err)?;
    Ok((to_rows(&f.u), to_rows(&f.v)))
}

/// Pixels carrying the top `1 - tau` share of change between two frames.
#[pyfunction]
#[pyo3(signature = (prev, next, tau=0.95))]
fn select_changes(prev: Vec<Vec<f64>>, next: Vec<Vec<f64>>, tau: f64) -> PyResult<Vec<Vec<bool>>> {
    let rank = change_rank(&frame(prev)?, &frame(next)?).map_err(py_err)?;
    Ok(to_rows(&threshold_select(&rank, tau).map_err(py_err)?.bits))
}

/// Fits a velocity field to scattered vectors at pixel positions `(col, row)`
/// and evaluates it on the full `rows x cols` grid.
#[allow(clippy::too_many_arguments)]
#[pyfunction]
#[pyo3(signature = (points, velocities, rows, cols, weights=None, solver="mo-wsvm-fc", kernel_name="linear", gamma=1.0, beta=1.0, degree=2, c=38.5, epsilon=0.19))]
fn fit_field<'py>(
    py: Python<'py>,
    points: Vec<[f64; 2]>,
    velocities: Vec<[f64; 2]>,
    rows: usize,
    cols: usize,
    weights: Option<Vec<f64>>,
    solver: &str,
    kernel_name: &str,
    gamma: f64,
    beta: f64,
    degree: u32,
    c: f64,
    epsilon: f64,
) -> PyResult<Bound<'py, PyDict>> {
    if points.len() != velocities.len() {
        return Err(PyValueError::new_err("points and velocities differ in length"));
    }
    let k = kernel(kernel_name, gamma, beta, degree)?;
    let kind = SolverKind::parse(solver).map_err(py_err)?;
    let inputs = normalize_coords(&points, rows, cols);
    let weights = weights.unwrap_or_else(|| vec![1.0; points.len()]);
    let problem = SvrProblem::multi_output(inputs.clone(), &velocities, weights, c, epsilon, k);
    let ops = FlowConstraintOps::new(rows, cols).map_err(py_err)?;
    let coords = grid_coords(rows, cols);
    let settings = FcSettings::default();
    let grid = FcGrid {
        ops: &ops,
        coords: &coords,
        settings: &settings,
    };
    let sol = fit_two_outputs(kind, &problem, Some(grid), &SolverSettings::default()).map_err(py_err)?;
    let field = extrapolate(&sol, &k, &inputs, rows, cols, 1.0).map_err(py_err)?;
    let res = div_curl(&field, &ops).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("u", to_rows(&field.u))?;
    d.set_item("v", to_rows(&field.v))?;
    d.set_item("div_norm", res.div_norm)?;
    d.set_item("curl_norm", res.curl_norm)?;
    d.set_item("converged", sol.converged)?;
    Ok(d)
}

/// Writes a synthetic scene from a JSON spec; returns the manifest path.
#[pyfunction]
fn synth(spec_json: &str, out: &str) -> PyResult<String> {
    let spec = serde_json::from_str(spec_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let m = write_synthetic(&spec, Path::new(out)).map_err(py_err)?;
    Ok(m.display().to_string())
}

/// Runs the pipeline over a manifest; `config` holds `key = value` lines.
/// Returns one dict per results.csv row.
#[pyfunction]
#[pyo3(signature = (manifest, out, config=""))]
fn run<'py>(py: Python<'py>, manifest: &str, out: &str, config: &str) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = PipelineConfig::parse(config).map_err(py_err)?;
    let report = py
        .detach(|| run_pipeline(Path::new(manifest), &cfg, Path::new(out)))
        .map_err(py_err)?;
    report
        .results
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("frame", r.frame)?;
            d.set_item("layer", r.layer)?;
            d.set_item("speed", r.speed)?;
            d.set_item("direction", r.direction)?;
            d.set_item("height", r.height_layer)?;
            d.set_item("div", r.div)?;
            d.set_item("curl", r.curl)?;
            d.set_item("field_path", &r.field_path)?;
            Ok(d)
        })
        .collect()
}

/// Renders SVG figures for a results.csv; returns the written paths.
#[pyfunction]
fn plot(results: &str, out: &str) -> PyResult<Vec<String>> {
    let paths = plot_results(Path::new(results), Path::new(out)).map_err(py_err)?;
    Ok(paths.iter().map(|p| p.display().to_string()).collect())
}

/// Adds every binding to `m`.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(fit_bemm, m)?)?;
    m.add_function(wrap_pyfunction!(optical_flow, m)?)?;
    m.add_function(wrap_pyfunction!(select_changes, m)?)?;
    m.add_function(wrap_pyfunction!(fit_field, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(plot, m)?)?;
    Ok(())
}

#[pymodule]
fn cloudflow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}
