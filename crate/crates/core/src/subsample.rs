//! Importance subsampling of the vector pool and posterior layer weights.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{Gaussian2, LayerModel};
use crate::motionpool::PooledVector;

pub const DEFAULT_SAMPLES: usize = 200;
/// Lower bound on a sample's layer weight when handed to a solver.
pub const WEIGHT_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceWeights {
    pub weights: Vec<f64>,
    /// Every likelihood underflowed; weights fell back to uniform.
    pub degenerate: bool,
}

fn normalize_log(lps: &[f64]) -> (Vec<f64>, bool) {
    let max = lps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        let n = lps.len() as f64;
        return (vec![1.0 / n; lps.len()], true);
    }
    let w: Vec<f64> = lps.iter().map(|lp| (lp - max).exp()).collect();
    let total: f64 = w.iter().sum();
    (w.into_iter().map(|x| x / total).collect(), false)
}

/// Likelihood of each vector under `layer`, normalized to sum to one.
pub fn importance_weights(vectors: &[[f64; 2]], layer: &Gaussian2) -> Result<ImportanceWeights> {
    if vectors.is_empty() {
        return Err(Error::invalid("cannot weight an empty pool"));
    }
    let lps: Vec<f64> = vectors.iter().map(|v| layer.log_pdf(v)).collect();
    let (weights, degenerate) = normalize_log(&lps);
    Ok(ImportanceWeights { weights, degenerate })
}

/// Inclusive cumulative sum, with the last entry pinned to one.
pub fn cdf(weights: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out: Vec<f64> = weights
        .iter()
        .map(|w| {
            acc += w;
            acc
        })
        .collect();
    if let Some(last) = out.last_mut() {
        *last = 1.0;
    }
    out
}

/// Index whose CDF value is closest to `z`; ties go to the lower index.
fn closest(cdf: &[f64], z: f64) -> usize {
    let k = cdf.partition_point(|&c| c < z);
    if k == 0 {
        return 0;
    }
    if k == cdf.len() {
        return cdf.len() - 1;
    }
    if (cdf[k] - z) < (z - cdf[k - 1]) {
        k
    } else {
        k - 1
    }
}

/// Draws `quota` indices by matching uniforms to the weight CDF.
/// Indices can repeat.
pub fn sample_layer(weights: &[f64], quota: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if quota == 0 {
        return Err(Error::invalid("sample quota must be at least 1"));
    }
    if weights.is_empty() {
        return Err(Error::invalid("cannot sample from an empty pool"));
    }
    let c = cdf(weights);
    Ok((0..quota).map(|_| closest(&c, rng.random::<f64>())).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Posteriors {
    /// One row per vector, one column per layer.
    pub z: Array2<f64>,
    /// Rows where every layer likelihood underflowed.
    pub degenerate_rows: usize,
}

/// Layer posteriors under a uniform prior.
pub fn posteriors(vectors: &[[f64; 2]], layers: &[Gaussian2]) -> Posteriors {
    let k = layers.len();
    let mut z = Array2::zeros((vectors.len(), k));
    let mut degenerate_rows = 0;
    for (i, v) in vectors.iter().enumerate() {
        let lps: Vec<f64> = layers.iter().map(|g| g.log_pdf(v)).collect();
        let (row, bad) = normalize_log(&lps);
        degenerate_rows += bad as usize;
        for (c, p) in row.into_iter().enumerate() {
            z[[i, c]] = p;
        }
    }
    Posteriors { z, degenerate_rows }
}

/// Per-layer sample counts; the remainder goes to layer 0 (the upper one).
pub fn layer_quotas(n_samples: usize, n_layers: usize) -> Vec<usize> {
    let mut q = vec![n_samples / n_layers; n_layers];
    q[0] += n_samples % n_layers;
    q
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    /// (column, row) per sample.
    pub coords: Vec<[f64; 2]>,
    /// (u, v) in m/s per sample.
    pub velocities: Vec<[f64; 2]>,
    pub posteriors: Array2<f64>,
    /// Pool index each sample was drawn from.
    pub sources: Vec<usize>,
    /// Layer whose importance weights produced each sample.
    pub drawn_for: Vec<usize>,
    pub degenerate: bool,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn n_layers(&self) -> usize {
        self.posteriors.ncols()
    }

    /// Solver weights for `layer`, floored to stay positive.
    pub fn layer_weights(&self, layer: usize) -> Vec<f64> {
        self.posteriors.column(layer).iter().map(|z| z.max(WEIGHT_FLOOR)).collect()
    }
}

/// Importance-samples `n_samples` vectors from the pool, split across the
/// model's layers, and attaches their posteriors.
pub fn subsample(pool: &[PooledVector], model: &LayerModel, n_samples: usize, seed: u64) -> Result<SampleSet> {
    let k = model.n_layers();
    if n_samples < k {
        return Err(Error::invalid(format!("{n_samples} samples cannot cover {k} layers")));
    }
    let vectors: Vec<[f64; 2]> = pool.iter().map(|p| [p.u, p.v]).collect();
    let gaussians = model.gaussians();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sources = Vec::with_capacity(n_samples);
    let mut drawn_for = Vec::with_capacity(n_samples);
    let mut degenerate = false;
    for (c, quota) in layer_quotas(n_samples, k).into_iter().enumerate() {
        let w = importance_weights(&vectors, &gaussians[c])?;
        degenerate |= w.degenerate;
        sources.extend(sample_layer(&w.weights, quota, &mut rng)?);
        drawn_for.extend(std::iter::repeat_n(c, quota));
    }
    let picked: Vec<[f64; 2]> = sources.iter().map(|&i| vectors[i]).collect();
    let post = posteriors(&picked, &gaussians);
    Ok(SampleSet {
        coords: sources.iter().map(|&i| [pool[i].x, pool[i].y]).collect(),
        velocities: picked,
        posteriors: post.z,
        sources,
        drawn_for,
        degenerate: degenerate || post.degenerate_rows > 0,
    })
}
