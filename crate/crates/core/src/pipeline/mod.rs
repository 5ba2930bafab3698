//! Per-frame orchestration from raw frames to extrapolated wind fields, plus
//! dataset and plot writers.

mod config;
pub mod dataset;
pub mod plot;

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{cv_spec_from_pairs, parse_pairs, PipelineConfig};

use crate::bemm::{fit_em_masked, layer_mean_height, normalize_temps_masked};
use crate::error::{Error, Result};
use crate::eval::{cross_validate, Candidate, CvData, ScoreRow};
use crate::flowfield::{
    div_curl, extrapolate, grid_coords, normalize_coords, stream_potential, DivCurl, GridField, StreamFunction,
};
use crate::imaging::{default_cloud_mask, height_map, pixel_geometry, CloudMask, PixelGeometry, ThermalFrame};
use crate::io::{write_field, FieldGrids, Manifest};
use crate::layers::{icm_height, icm_velocity, order_layers, LayerModel};
use crate::motionpool::{change_rank, threshold_select, PooledVector, VectorPool};
use crate::optflow::{derivatives, to_metric, wlk};
use crate::subsample::{subsample, SampleSet};
use crate::wsvr::{fit_two_outputs, DualSolution, FcGrid, FlowConstraintOps, SvrProblem};

/// Everything known about one frame once its samples have been drawn.
#[derive(Debug, Clone)]
pub struct PreparedFrame {
    pub index: usize,
    pub timestamp: f64,
    pub frame: ThermalFrame,
    pub geometry: PixelGeometry,
    /// Beta-mixture layer heights in meters, one per cluster.
    pub bemm_heights: Vec<f64>,
    pub model: LayerModel,
    pub samples: SampleSet,
    pub pool_size: usize,
}

impl PreparedFrame {
    /// Regression data of one layer with normalized inputs.
    pub fn layer_data(&self, layer: usize) -> CvData {
        let (rows, cols) = self.frame.dim();
        CvData {
            inputs: normalize_coords(&self.samples.coords, rows, cols),
            velocities: self.samples.velocities.clone(),
            weights: self.samples.layer_weights(layer),
            rows,
            cols,
        }
    }

    /// Beta-mixture height closest to the layer's inferred mean height.
    pub fn bemm_height_for(&self, layer: usize) -> f64 {
        let target = self.model.layers[layer].mean_height;
        self.bemm_heights
            .iter()
            .copied()
            .min_by(|a, b| (a - target).abs().total_cmp(&(b - target).abs()))
            .unwrap_or(f64::NAN)
    }
}

/// Rolling state carried from frame to frame.
#[derive(Debug, Clone)]
pub struct PipelineState {
    pub prev: Option<ThermalFrame>,
    pub pool: VectorPool,
}

impl PipelineState {
    pub fn new(cfg: &PipelineConfig) -> Result<Self> {
        Ok(Self {
            prev: None,
            pool: VectorPool::with_lookback(cfg.ell, cfg.ell_inclusive)?,
        })
    }
}

fn frame_seed(cfg: &PipelineConfig, index: usize) -> u64 {
    cfg.seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

/// Flow, pooling, layer inference and sampling for one frame. Returns `None`
/// for the frame that primes the state.
pub fn prepare_frame(
    cfg: &PipelineConfig,
    state: &mut PipelineState,
    next: ThermalFrame,
    mask: Option<CloudMask>,
) -> Result<Option<PreparedFrame>> {
    let Some(prev) = state.prev.replace(next.clone()) else {
        return Ok(None);
    };
    if prev.dim() != next.dim() {
        return Err(Error::DimensionMismatch {
            expected: prev.dim(),
            got: next.dim(),
        });
    }
    let (rows, cols) = next.dim();
    let seed = frame_seed(cfg, next.frame_index);
    let heights = height_map(&next, &cfg.height)?;
    let mask = mask.unwrap_or_else(|| default_cloud_mask(&heights, &cfg.height));
    let geometry = pixel_geometry(&next, cfg.diag_fov_deg.to_radians())?;

    let normalized = normalize_temps_masked(&next, &mask)?;
    let bemm = fit_em_masked(&normalized, &mask, cfg.n_layers, seed, cfg.em_max_iters, cfg.em_tol)?;
    let gammas: Vec<Array2<f64>> = (0..bemm.n_clusters()).map(|c| bemm.responsibility(c)).collect();
    let fallback = {
        let cloud: Vec<f64> = heights.heights.iter().zip(mask.bits.iter()).filter(|(_, b)| **b).map(|(h, _)| *h).collect();
        if cloud.is_empty() {
            heights.heights.mean().unwrap_or(f64::NAN)
        } else {
            cloud.iter().sum::<f64>() / cloud.len() as f64
        }
    };
    let bemm_heights: Vec<f64> = (0..gammas.len())
        .map(|c| match layer_mean_height(&gammas[c], &heights, &mask, c) {
            Ok(h) if h > 0.0 => h,
            _ => fallback,
        })
        .collect();
    if bemm_heights.iter().any(|h| !(*h > 0.0)) {
        return Err(Error::invalid(format!("frame {}: no positive cloud height", next.frame_index)));
    }

    let d = derivatives(&prev, &next, cfg.wlk.kernel_sigma)?;
    let flows = gammas.iter().map(|g| wlk(&d, g, &cfg.wlk)).collect::<Result<Vec<_>>>()?;
    let metric = to_metric(&flows, &gammas, &bemm_heights, &geometry, &cfg.wlk)?;

    let selected = threshold_select(&change_rank(&prev, &next)?, cfg.tau_sel)?;
    let mut vectors = Vec::new();
    for ((i, j), &sel) in selected.bits.indexed_iter() {
        if sel {
            vectors.push(PooledVector {
                x: j as f64,
                y: i as f64,
                u: metric.u[[i, j]],
                v: metric.v[[i, j]],
                age: 0,
                responsibilities: gammas.iter().map(|g| g[[i, j]]).collect(),
            });
        }
    }
    log::debug!("frame {}: {} vectors selected", next.frame_index, vectors.len());
    state.pool = state.pool.push_frame(vectors);
    let pool = state.pool.to_vec();
    let data: Vec<[f64; 2]> = pool.iter().map(|p| [p.u, p.v]).collect();

    let velocity = icm_velocity(&data, cfg.n_layers, seed, cfg.icm_max_iters)?;
    let height_fit = icm_height(&heights, &mask, &metric.u, &metric.v, &velocity, cfg.icm_max_iters)?;
    let model = order_layers(LayerModel::new(&velocity, &height_fit));
    let samples = subsample(&pool, &model, cfg.n_samples, seed)?;
    debug_assert_eq!(geometry.dim(), (rows, cols));
    Ok(Some(PreparedFrame {
        index: next.frame_index,
        timestamp: next.timestamp,
        frame: next,
        geometry,
        bemm_heights,
        model,
        samples,
        pool_size: pool.len(),
    }))
}

/// Fitted field of one layer.
#[derive(Debug, Clone)]
pub struct LayerSolution {
    pub layer: usize,
    pub params: Candidate,
    pub solution: DualSolution,
    pub field: GridField,
    pub residuals: DivCurl,
    pub stream: StreamFunction,
    /// Cross-validation scores when the parameters were searched.
    pub scores: Vec<ScoreRow>,
}

/// Fits, extrapolates and integrates one layer.
pub fn solve_layer(cfg: &PipelineConfig, frame: &PreparedFrame, layer: usize) -> Result<LayerSolution> {
    let data = frame.layer_data(layer);
    let (params, scores) = match &cfg.cv {
        Some(spec) => {
            let spec = crate::eval::CvSpec {
                seed: spec.seed.wrapping_add(frame_seed(cfg, frame.index)),
                ..spec.clone()
            };
            let out = cross_validate(&data, &spec, &cfg.smo)?;
            (out.best, out.table)
        }
        None => (
            Candidate {
                c_reg: cfg.c_reg,
                epsilon: cfg.epsilon,
                kernel: cfg.kernel,
            },
            Vec::new(),
        ),
    };
    let ops = FlowConstraintOps::new(data.rows, data.cols)?;
    let grid = grid_coords(data.rows, data.cols);
    let problem = SvrProblem::multi_output(
        data.inputs.clone(),
        &data.velocities,
        data.weights.clone(),
        params.c_reg,
        params.epsilon,
        params.kernel,
    );
    let fc = FcGrid {
        ops: &ops,
        coords: &grid,
        settings: &cfg.fc,
    };
    let solution = fit_two_outputs(cfg.solver, &problem, Some(fc), &cfg.smo)?;
    let height = frame.model.layers[layer].mean_height;
    let height = if height.is_finite() { height } else { frame.bemm_height_for(layer) };
    let field = extrapolate(&solution, &params.kernel, &data.inputs, data.rows, data.cols, height)?;
    let residuals = div_curl(&field, &ops)?;
    let stream = stream_potential(&field, &frame.geometry)?;
    Ok(LayerSolution {
        layer,
        params,
        solution,
        field,
        residuals,
        stream,
        scores,
    })
}

/// One row of `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub frame: usize,
    pub timestamp: f64,
    pub layer: usize,
    pub n_layers: usize,
    /// Beta-mixture mean height (m).
    pub height_bemm: f64,
    /// Height-model mean of the layer's pixels (m).
    pub height_layer: f64,
    pub speed: f64,
    /// Radians, atan2 of row over column component.
    pub direction: f64,
    pub div: f64,
    pub curl: f64,
    pub kernel: String,
    pub c_reg: f64,
    pub epsilon: f64,
    pub rho: f64,
    pub support_vectors: usize,
    pub iterations: usize,
    pub converged: bool,
    pub pool_size: usize,
    pub tie: bool,
    /// Relative to the output directory.
    pub field_path: String,
    pub samples_path: String,
    /// As written in the manifest.
    pub frame_path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameFailure {
    pub frame: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub results: Vec<FrameResult>,
    pub failures: Vec<FrameFailure>,
    /// Frames consumed only to prime the flow state.
    pub primed: Vec<usize>,
}

fn write_samples(path: &Path, frame: &PreparedFrame) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let k = frame.samples.n_layers();
    let mut header = vec!["x".to_string(), "y".into(), "u".into(), "v".into(), "drawn_for".into()];
    header.extend((0..k).map(|c| format!("z{c}")));
    w.write_record(&header)?;
    let s = &frame.samples;
    for n in 0..s.len() {
        let mut rec = vec![
            s.coords[n][0].to_string(),
            s.coords[n][1].to_string(),
            s.velocities[n][0].to_string(),
            s.velocities[n][1].to_string(),
            s.drawn_for[n].to_string(),
        ];
        rec.extend((0..k).map(|c| s.posteriors[[n, c]].to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn emit_frame(
    out: &Path,
    frame: &PreparedFrame,
    layers: &[LayerSolution],
    frame_path: &str,
) -> Result<Vec<FrameResult>> {
    let samples_rel = format!("samples/frame_{:04}.csv", frame.index);
    write_samples(&out.join(&samples_rel), frame)?;
    let mut rows = Vec::new();
    for l in layers {
        let field_rel = format!("fields/frame_{:04}_layer{}.tfld", frame.index, l.layer);
        write_field(
            &out.join(&field_rel),
            &FieldGrids {
                u: l.field.u.clone(),
                v: l.field.v.clone(),
                phi: l.stream.phi.clone(),
                psi: l.stream.psi.clone(),
            },
        )?;
        if !l.scores.is_empty() {
            let path = out.join(format!("cv/frame_{:04}_layer{}.csv", frame.index, l.layer));
            let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            crate::eval::write_score_table(&l.scores, file)?;
        }
        rows.push(FrameResult {
            frame: frame.index,
            timestamp: frame.timestamp,
            layer: l.layer,
            n_layers: frame.model.n_layers(),
            height_bemm: frame.bemm_height_for(l.layer),
            height_layer: l.field.height,
            speed: l.field.mean_speed(),
            direction: l.field.mean_direction(),
            div: l.residuals.div_norm,
            curl: l.residuals.curl_norm,
            kernel: l.params.kernel.name(),
            c_reg: l.params.c_reg,
            epsilon: l.params.epsilon,
            rho: l.solution.fc.as_ref().map_or(0.0, |f| f.rho),
            support_vectors: l.solution.support_vectors,
            iterations: l.solution.iterations,
            converged: l.solution.converged,
            pool_size: frame.pool_size,
            tie: frame.model.tie,
            field_path: field_rel,
            samples_path: samples_rel.clone(),
            frame_path: frame_path.to_string(),
        });
    }
    Ok(rows)
}

fn process(
    cfg: &PipelineConfig,
    state: &mut PipelineState,
    manifest: &Manifest,
    k: usize,
    out: &Path,
) -> Result<Option<Vec<FrameResult>>> {
    let (frame, mask) = manifest.load_frame(k)?;
    let Some(prepared) = prepare_frame(cfg, state, frame, mask)? else {
        return Ok(None);
    };
    let layers = (0..prepared.model.n_layers())
        .into_par_iter()
        .map(|c| solve_layer(cfg, &prepared, c))
        .collect::<Result<Vec<_>>>()?;
    let frame_path = manifest.records[k].frame_path.to_string_lossy().into_owned();
    emit_frame(out, &prepared, &layers, &frame_path).map(Some)
}

/// Sidecar describing where a run's inputs came from; read back by the plotter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub manifest: PathBuf,
    pub isolines: usize,
}

pub const RESULTS_FILE: &str = "results.csv";
pub const FAILURES_FILE: &str = "failures.csv";
pub const RUN_INFO_FILE: &str = "run.json";

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Runs every frame of a manifest, writing results, fields and samples under
/// `out`. A frame that fails is logged and skipped; the next readable frame
/// primes the flow state again.
pub fn run_pipeline(manifest_path: &Path, cfg: &PipelineConfig, out: &Path) -> Result<RunReport> {
    cfg.validate()?;
    let manifest = Manifest::read(manifest_path)?;
    if manifest.records.len() < 2 {
        return Err(Error::invalid(format!(
            "manifest lists {} frame(s); at least 2 are required",
            manifest.records.len()
        )));
    }
    for sub in ["", "fields", "samples", "cv"] {
        create_dir(&out.join(sub))?;
    }
    let mut state = PipelineState::new(cfg)?;
    let mut report = RunReport::default();
    for k in 0..manifest.records.len() {
        match process(cfg, &mut state, &manifest, k, out) {
            Ok(Some(rows)) => report.results.extend(rows),
            Ok(None) => report.primed.push(k),
            Err(e) => {
                log::warn!("frame {k} skipped: {e}");
                if matches!(e, Error::Io { .. } | Error::Format { .. } | Error::DimensionMismatch { .. }) {
                    state.prev = None;
                }
                report.failures.push(FrameFailure {
                    frame: k,
                    reason: e.to_string(),
                });
            }
        }
    }

    let path = out.join(RESULTS_FILE);
    let mut w = csv::Writer::from_path(&path)?;
    for r in &report.results {
        w.serialize(r)?;
    }
    if report.results.is_empty() {
        w.write_record(RESULT_COLUMNS)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let path = out.join(FAILURES_FILE);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["frame", "reason"])?;
    for f in &report.failures {
        w.write_record([f.frame.to_string(), f.reason.clone()])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let info = RunInfo {
        manifest: fs::canonicalize(manifest_path).unwrap_or_else(|_| manifest_path.to_path_buf()),
        isolines: cfg.isolines,
    };
    let path = out.join(RUN_INFO_FILE);
    fs::write(&path, serde_json::to_string_pretty(&info)?).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

const RESULT_COLUMNS: [&str; 22] = [
    "frame",
    "timestamp",
    "layer",
    "n_layers",
    "height_bemm",
    "height_layer",
    "speed",
    "direction",
    "div",
    "curl",
    "kernel",
    "c_reg",
    "epsilon",
    "rho",
    "support_vectors",
    "iterations",
    "converged",
    "pool_size",
    "tie",
    "field_path",
    "samples_path",
    "frame_path",
];

/// Reads `results.csv` back.
pub fn read_results(path: &Path) -> Result<Vec<FrameResult>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Cross-validation of every frame and layer of a manifest without writing
/// fields; one score table per frame and layer.
pub fn cross_validate_manifest(
    manifest_path: &Path,
    cfg: &PipelineConfig,
    spec: &crate::eval::CvSpec,
) -> Result<Vec<(usize, usize, crate::eval::CvOutcome)>> {
    let manifest = Manifest::read(manifest_path)?;
    let mut state = PipelineState::new(cfg)?;
    let mut out = Vec::new();
    for k in 0..manifest.records.len() {
        let step = manifest
            .load_frame(k)
            .and_then(|(frame, mask)| prepare_frame(cfg, &mut state, frame, mask));
        match step {
            Ok(Some(p)) => {
                for c in 0..p.model.n_layers() {
                    match cross_validate(&p.layer_data(c), spec, &cfg.smo) {
                        Ok(o) => out.push((p.index, c, o)),
                        Err(e) => log::warn!("frame {k} layer {c}: cross-validation failed: {e}"),
                    }
                }
            }
            Ok(None) => {}
            Err(e) => {
                log::warn!("frame {k} skipped: {e}");
                state.prev = None;
            }
        }
    }
    Ok(out)
}
