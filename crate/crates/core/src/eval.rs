//! Error metrics, label comparison and hyperparameter cross-validation.

use std::f64::consts::PI;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowfield::{div_curl, extrapolate, grid_coords};
use crate::wsvr::{
    fit_two_outputs, predict, FcGrid, FcSettings, FlowConstraintOps, KernelSpec, SolverKind, SolverSettings,
    SvrProblem,
};

/// Mean absolute error and its weighted counterpart.
pub fn mae_wmae(pred: &[f64], truth: &[f64], weights: &[f64]) -> Result<(f64, f64)> {
    if pred.len() != truth.len() || pred.len() != weights.len() {
        return Err(Error::invalid(format!(
            "metric inputs differ in length: {}, {}, {}",
            pred.len(),
            truth.len(),
            weights.len()
        )));
    }
    let errors: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).collect();
    errors_mae_wmae(&errors, weights)
}

/// Same as [`mae_wmae`] for precomputed non-negative errors.
pub fn errors_mae_wmae(errors: &[f64], weights: &[f64]) -> Result<(f64, f64)> {
    if errors.is_empty() || errors.len() != weights.len() {
        return Err(Error::invalid("metrics need equally long, non-empty inputs"));
    }
    if weights.iter().any(|z| !(*z >= 0.0) || !z.is_finite()) {
        return Err(Error::invalid("metric weights must be finite and non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("metric weights are all zero"));
    }
    let mae = errors.iter().sum::<f64>() / errors.len() as f64;
    let wmae = errors.iter().zip(weights).map(|(e, z)| e * z).sum::<f64>() / total;
    Ok((mae, wmae))
}

/// Height (m), speed (m/s) and direction (radians) of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerLabel {
    pub height: f64,
    pub speed: f64,
    pub direction: f64,
}

/// Ground truth for one frame, upper layer first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameLabels {
    pub layers: Vec<LayerLabel>,
}

impl FrameLabels {
    pub fn validate(&self) -> Result<()> {
        for l in &self.layers {
            if !(l.speed >= 0.0) || !l.height.is_finite() || !(l.direction > -PI && l.direction <= PI) {
                return Err(Error::invalid(format!("invalid layer label {l:?}")));
            }
        }
        Ok(())
    }
}

/// Wraps an angle to (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Percentage errors of one layer; `None` marks a skipped quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Mape {
    pub height: Option<f64>,
    pub speed: Option<f64>,
    pub angle: Option<f64>,
    /// Mean over the quantities that were not skipped.
    pub combined: f64,
    pub skipped: bool,
}

/// A zero height or speed label is skipped; the angle is skipped with a zero
/// speed since the direction is then undefined.
pub fn mape_labels(est: &LayerLabel, label: &LayerLabel) -> Mape {
    let pct = |e: f64, t: f64| (t != 0.0 && t.is_finite()).then(|| (e - t).abs() / t.abs() * 100.0);
    let height = pct(est.height, label.height);
    let speed = pct(est.speed, label.speed);
    let angle = (label.speed > 0.0).then(|| wrap_angle(est.direction - label.direction).abs() / PI * 100.0);
    let present: Vec<f64> = [height, speed, angle].into_iter().flatten().collect();
    let combined = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Mape {
        height,
        speed,
        angle,
        combined,
        skipped: present.len() < 3,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionScore {
    pub score: f64,
    pub mean: f64,
    pub mean_change: f64,
    /// Fewer than two frames; the change term is zero.
    pub single_frame: bool,
}

/// Average of the mean MAPE and the mean absolute frame-to-frame change.
pub fn selection_score(mapes: &[f64]) -> Result<SelectionScore> {
    if mapes.is_empty() {
        return Err(Error::invalid("selection score needs at least one frame"));
    }
    let mean = mapes.iter().sum::<f64>() / mapes.len() as f64;
    let single_frame = mapes.len() < 2;
    let mean_change = if single_frame {
        0.0
    } else {
        mapes.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>() / (mapes.len() - 1) as f64
    };
    Ok(SelectionScore {
        score: 0.5 * (mean + mean_change),
        mean,
        mean_change,
        single_frame,
    })
}

/// One point of the hyperparameter grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub c_reg: f64,
    pub epsilon: f64,
    pub kernel: KernelSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSpec {
    pub solver: SolverKind,
    pub c_values: Vec<f64>,
    pub eps_values: Vec<f64>,
    pub gammas: Vec<f64>,
    pub betas: Vec<f64>,
    pub degrees: Vec<u32>,
    /// Kernel families to search: "linear", "rbf", "polynomial".
    pub kernels: Vec<String>,
    pub train_fraction: f64,
    /// Independent random splits averaged per candidate.
    pub folds: usize,
    pub seed: u64,
    /// Replay these parameters without searching.
    pub fixed: Option<Candidate>,
}

impl Default for CvSpec {
    fn default() -> Self {
        Self {
            solver: SolverKind::MoWsvm,
            c_values: vec![1.0, 10.0, 38.5, 100.0],
            eps_values: vec![0.05, 0.19, 0.5],
            gammas: vec![1.0, 10.0],
            betas: vec![1.0],
            degrees: vec![2],
            kernels: vec!["linear".into()],
            train_fraction: 0.75,
            folds: 1,
            seed: 0,
            fixed: None,
        }
    }
}

impl CvSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::invalid(format!("train fraction must lie in (0, 1), got {}", self.train_fraction)));
        }
        if self.folds == 0 {
            return Err(Error::invalid("at least one fold is required"));
        }
        if self.fixed.is_none() && (self.c_values.is_empty() || self.eps_values.is_empty() || self.kernels.is_empty())
        {
            return Err(Error::invalid("cross-validation grid is empty"));
        }
        Ok(())
    }

    /// Grid points in search order: kernel, then C, then ε.
    pub fn candidates(&self) -> Result<Vec<Candidate>> {
        self.validate()?;
        if let Some(c) = self.fixed {
            c.kernel.validate()?;
            return Ok(vec![c]);
        }
        let mut kernels = Vec::new();
        for name in &self.kernels {
            match name.trim().to_ascii_lowercase().as_str() {
                "linear" => kernels.push(KernelSpec::Linear),
                "rbf" => kernels.extend(self.gammas.iter().map(|&gamma| KernelSpec::Rbf { gamma })),
                "polynomial" | "poly" => {
                    for &gamma in &self.gammas {
                        for &beta in &self.betas {
                            for &degree in &self.degrees {
                                kernels.push(KernelSpec::Polynomial { gamma, beta, degree });
                            }
                        }
                    }
                }
                other => return Err(Error::invalid(format!("unknown kernel '{other}'"))),
            }
        }
        let mut out = Vec::new();
        for kernel in kernels {
            kernel.validate()?;
            for &c_reg in &self.c_values {
                for &epsilon in &self.eps_values {
                    out.push(Candidate { c_reg, epsilon, kernel });
                }
            }
        }
        if out.is_empty() {
            return Err(Error::invalid("cross-validation grid is empty"));
        }
        Ok(out)
    }
}

/// Samples of one layer with normalized inputs, on an `rows × cols` frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CvData {
    pub inputs: Vec<[f64; 2]>,
    pub velocities: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreRow {
    pub candidate: Candidate,
    pub mae: f64,
    pub wmae: f64,
    /// Squared residual norms of the full-frame fit.
    pub div: f64,
    pub curl: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvOutcome {
    pub best: Candidate,
    pub best_index: usize,
    /// One row per candidate, in grid order.
    pub table: Vec<ScoreRow>,
}

fn split(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(2, n - 1);
    let test = idx.split_off(n_train);
    (idx, test)
}

fn pick<T: Copy>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i]).collect()
}

fn score(
    data: &CvData,
    spec: &CvSpec,
    cand: &Candidate,
    ops: &FlowConstraintOps,
    grid: &[[f64; 2]],
    solver: &SolverSettings,
) -> Result<ScoreRow> {
    let start = Instant::now();
    let fc_settings = FcSettings::default();
    let fc = FcGrid {
        ops,
        coords: grid,
        settings: &fc_settings,
    };
    let n = data.inputs.len();
    let (mut mae, mut wmae) = (0.0, 0.0);
    for fold in 0..spec.folds {
        let (train, test) = split(n, spec.train_fraction, spec.seed.wrapping_add(fold as u64));
        let x_train = pick(&data.inputs, &train);
        let problem = SvrProblem::multi_output(
            x_train.clone(),
            &pick(&data.velocities, &train),
            pick(&data.weights, &train),
            cand.c_reg,
            cand.epsilon,
            cand.kernel,
        );
        let sol = fit_two_outputs(spec.solver, &problem, Some(fc), solver)?;
        let x_test = pick(&data.inputs, &test);
        let pred = predict(&sol, &cand.kernel, &x_train, &x_test)?;
        let errors: Vec<f64> = test
            .iter()
            .enumerate()
            .map(|(k, &i)| (pred[0][k] - data.velocities[i][0]).hypot(pred[1][k] - data.velocities[i][1]))
            .collect();
        let (a, b) = errors_mae_wmae(&errors, &pick(&data.weights, &test))?;
        mae += a / spec.folds as f64;
        wmae += b / spec.folds as f64;
    }
    // residuals of the fit on all samples, as used downstream
    let problem = SvrProblem::multi_output(
        data.inputs.clone(),
        &data.velocities,
        data.weights.clone(),
        cand.c_reg,
        cand.epsilon,
        cand.kernel,
    );
    let sol = fit_two_outputs(spec.solver, &problem, Some(fc), solver)?;
    let field = extrapolate(&sol, &cand.kernel, &data.inputs, data.rows, data.cols, f64::NAN)?;
    let dc = div_curl(&field, ops)?;
    Ok(ScoreRow {
        candidate: *cand,
        mae,
        wmae,
        div: dc.div_norm,
        curl: dc.curl_norm,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Grid search scored by held-out WMAE. Candidates run in parallel; the
/// first candidate in grid order wins ties.
pub fn cross_validate(data: &CvData, spec: &CvSpec, solver: &SolverSettings) -> Result<CvOutcome> {
    let candidates = spec.candidates()?;
    let n = data.inputs.len();
    if n < 4 || data.velocities.len() != n || data.weights.len() != n {
        return Err(Error::invalid(format!(
            "cross-validation needs at least 4 consistent samples, got {n} inputs, {} targets, {} weights",
            data.velocities.len(),
            data.weights.len()
        )));
    }
    let ops = FlowConstraintOps::new(data.rows, data.cols)?;
    let grid = grid_coords(data.rows, data.cols);
    let table = candidates
        .par_iter()
        .map(|c| score(data, spec, c, &ops, &grid, solver))
        .collect::<Result<Vec<_>>>()?;
    let mut best_index = 0;
    for (k, row) in table.iter().enumerate() {
        if row.wmae < table[best_index].wmae {
            best_index = k;
        }
    }
    Ok(CvOutcome {
        best: table[best_index].candidate,
        best_index,
        table,
    })
}

fn kernel_columns(k: &KernelSpec) -> (String, String, String) {
    let f = |x: f64| x.to_string();
    match k {
        KernelSpec::Linear => (String::new(), String::new(), String::new()),
        KernelSpec::Rbf { gamma } => (f(*gamma), String::new(), String::new()),
        KernelSpec::Polynomial { gamma, beta, degree } => (f(*gamma), f(*beta), degree.to_string()),
    }
}

/// Writes the score table as CSV.
pub fn write_score_table(table: &[ScoreRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["kernel", "C", "epsilon", "gamma", "beta", "d", "MAE", "WMAE", "div", "curl", "seconds"])?;
    for r in table {
        let (g, b, d) = kernel_columns(&r.candidate.kernel);
        w.write_record([
            r.candidate.kernel.name().to_string(),
            r.candidate.c_reg.to_string(),
            r.candidate.epsilon.to_string(),
            g,
            b,
            d,
            r.mae.to_string(),
            r.wmae.to_string(),
            r.div.to_string(),
            r.curl.to_string(),
            format!("{:.4}", r.seconds),
        ])?;
    }
    w.flush().map_err(|e| Error::io("score table", e))?;
    Ok(())
}
