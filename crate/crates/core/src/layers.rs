//! Hard-assignment (ICM) inference of per-layer velocity and height
//! distributions, and ordering of layers by height.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::{CloudMask, HeightField};

const EIG_FLOOR: f64 = 1e-9;
pub const HEIGHT_VAR_FLOOR: f64 = 1e-6;
pub const DEFAULT_MAX_ITERS: usize = 100;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Bivariate normal over velocity vectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian2 {
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
}

impl Gaussian2 {
    /// Maximum-likelihood fit, regularized to stay positive definite.
    pub fn fit<'a>(points: impl IntoIterator<Item = &'a [f64; 2]>) -> Option<Self> {
        let pts: Vec<&[f64; 2]> = points.into_iter().collect();
        if pts.is_empty() {
            return None;
        }
        let n = pts.len() as f64;
        let mean = [
            pts.iter().map(|p| p[0]).sum::<f64>() / n,
            pts.iter().map(|p| p[1]).sum::<f64>() / n,
        ];
        let mut cov = [[0.0; 2]; 2];
        for p in &pts {
            let d = [p[0] - mean[0], p[1] - mean[1]];
            cov[0][0] += d[0] * d[0];
            cov[0][1] += d[0] * d[1];
            cov[1][1] += d[1] * d[1];
        }
        cov[0][0] /= n;
        cov[0][1] /= n;
        cov[1][1] /= n;
        cov[1][0] = cov[0][1];
        Some(Self {
            mean,
            cov: regularize(cov),
        })
    }

    pub fn det(&self) -> f64 {
        self.cov[0][0] * self.cov[1][1] - self.cov[0][1] * self.cov[1][0]
    }

    pub fn eigenvalues(&self) -> [f64; 2] {
        eigenvalues(&self.cov)
    }

    pub fn log_pdf(&self, x: &[f64; 2]) -> f64 {
        let det = self.det();
        let d = [x[0] - self.mean[0], x[1] - self.mean[1]];
        let q = (self.cov[1][1] * d[0] * d[0] - 2.0 * self.cov[0][1] * d[0] * d[1] + self.cov[0][0] * d[1] * d[1]) / det;
        -0.5 * (q + det.ln()) - LN_2PI
    }
}

fn eigenvalues(c: &[[f64; 2]; 2]) -> [f64; 2] {
    let tr = c[0][0] + c[1][1];
    let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
    let disc = ((tr * tr / 4.0) - det).max(0.0).sqrt();
    [tr / 2.0 - disc, tr / 2.0 + disc]
}

/// Adds `1e-9 * trace * I` when near-singular, then lifts the smallest
/// eigenvalue to at least `1e-9`.
fn regularize(mut c: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let tr = c[0][0] + c[1][1];
    let [lo, _] = eigenvalues(&c);
    if lo < EIG_FLOOR * tr.max(1.0) {
        c[0][0] += EIG_FLOOR * tr;
        c[1][1] += EIG_FLOOR * tr;
    }
    let [lo, _] = eigenvalues(&c);
    if lo < EIG_FLOOR {
        // eigenvalues are computed with rounding; pad slightly past the floor
        let pad = 2.0 * (EIG_FLOOR - lo);
        c[0][0] += pad;
        c[1][1] += pad;
    }
    c
}

#[derive(Debug, Clone)]
pub struct VelocityFit {
    pub layers: Vec<Gaussian2>,
    /// Layer index per input vector.
    pub labels: Vec<usize>,
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// A layer emptied once and was reseeded.
    pub reinitialized: bool,
    /// A layer emptied twice; the model fell back to a single layer.
    pub collapsed: bool,
}

impl VelocityFit {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Hard membership indicator, `lambda_ic`.
    pub fn lambda(&self, i: usize, c: usize) -> f64 {
        if self.labels[i] == c {
            1.0
        } else {
            0.0
        }
    }

    pub fn map_layer(&self, v: &[f64; 2]) -> usize {
        map_label(&self.layers, v)
    }
}

fn map_label(layers: &[Gaussian2], v: &[f64; 2]) -> usize {
    let mut best = 0;
    let mut best_lp = f64::NEG_INFINITY;
    for (c, g) in layers.iter().enumerate() {
        let lp = g.log_pdf(v);
        if lp > best_lp {
            best_lp = lp;
            best = c;
        }
    }
    best
}

fn objective(layers: &[Gaussian2], data: &[[f64; 2]], labels: &[usize]) -> f64 {
    data.iter().zip(labels).map(|(v, &c)| layers[c].log_pdf(v)).sum()
}

fn single_layer(data: &[[f64; 2]], collapsed: bool, reinitialized: bool) -> VelocityFit {
    let g = Gaussian2::fit(data.iter()).expect("non-empty data");
    let labels = vec![0; data.len()];
    VelocityFit {
        objective_trace: vec![objective(&[g], data, &labels)],
        layers: vec![g],
        labels,
        iterations: 0,
        converged: true,
        reinitialized,
        collapsed,
    }
}

/// Alternates maximum-likelihood Gaussian updates and MAP reassignment from
/// a seeded random labelling until no label changes.
pub fn icm_velocity(data: &[[f64; 2]], n_layers: usize, seed: u64, max_iters: usize) -> Result<VelocityFit> {
    if !(1..=2).contains(&n_layers) {
        return Err(Error::invalid(format!("layer count must be 1 or 2, got {n_layers}")));
    }
    if data.len() < 4 * n_layers {
        return Err(Error::invalid(format!(
            "{} vectors are too few for {n_layers} layer(s)",
            data.len()
        )));
    }
    if data.iter().any(|v| !(v[0].is_finite() && v[1].is_finite())) {
        return Err(Error::invalid("velocity vectors must be finite"));
    }
    if n_layers == 1 {
        return Ok(single_layer(data, false, false));
    }

    // Random labels are drawn in a canonical (value-sorted) order so the
    // result does not depend on the input order.
    let mut canonical: Vec<usize> = (0..data.len()).collect();
    canonical.sort_by(|&a, &b| {
        data[a][0]
            .total_cmp(&data[b][0])
            .then(data[a][1].total_cmp(&data[b][1]))
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = vec![0usize; data.len()];
    for &i in &canonical {
        labels[i] = rng.random_range(0..n_layers);
    }

    let mut layers: Vec<Gaussian2> = Vec::with_capacity(n_layers);
    let mut trace = Vec::new();
    let mut reinitialized = false;
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..max_iters.max(1) {
        iterations += 1;
        let counts = (0..n_layers).map(|c| labels.iter().filter(|&&l| l == c).count()).collect::<Vec<_>>();
        if let Some(empty) = counts.iter().position(|&n| n == 0) {
            if reinitialized {
                return Ok(single_layer(data, true, true));
            }
            reinitialized = true;
            let full = 1 - empty;
            let g = Gaussian2::fit(data.iter()).expect("non-empty");
            let lps: Vec<f64> = data.iter().map(|v| g.log_pdf(v)).collect();
            let mut sorted = lps.clone();
            sorted.sort_by(f64::total_cmp);
            let median = sorted[sorted.len() / 2];
            for (l, lp) in labels.iter_mut().zip(&lps) {
                *l = if *lp < median { empty } else { full };
            }
            trace.clear();
            continue;
        }
        layers = (0..n_layers)
            .map(|c| {
                Gaussian2::fit(data.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(v, _)| v))
                    .expect("non-empty layer")
            })
            .collect();
        trace.push(objective(&layers, data, &labels));
        let next: Vec<usize> = data.iter().map(|v| map_label(&layers, v)).collect();
        let changed = next.iter().zip(&labels).filter(|(a, b)| a != b).count();
        labels = next;
        if changed == 0 {
            converged = true;
            break;
        }
        trace.push(objective(&layers, data, &labels));
    }
    if (0..n_layers).any(|c| !labels.contains(&c)) {
        return Ok(single_layer(data, true, reinitialized));
    }
    Ok(VelocityFit {
        layers,
        labels,
        objective_trace: trace,
        iterations,
        converged,
        reinitialized,
        collapsed: false,
    })
}

#[derive(Debug, Clone)]
pub struct HeightFit {
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    /// Layer per pixel; cloud pixels from the height ICM, others from the
    /// velocity MAP initialization.
    pub pixel_labels: Array2<usize>,
    /// Mean cloud height per layer; `None` when no cloud pixel is assigned.
    pub mean_heights: Vec<Option<f64>>,
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

impl HeightFit {
    /// Hard pixel membership indicator, `rho_ijc`.
    pub fn rho(&self, i: usize, j: usize, c: usize) -> f64 {
        if self.pixel_labels[[i, j]] == c {
            1.0
        } else {
            0.0
        }
    }
}

fn normal_log_pdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((x - mean).powi(2) / var + var.ln() + LN_2PI)
}

fn height_params(values: &[(f64, usize)], c: usize) -> Option<(f64, f64)> {
    let xs: Vec<f64> = values.iter().filter(|(_, l)| *l == c).map(|(h, _)| *h).collect();
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|h| (h - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.max(HEIGHT_VAR_FLOOR)))
}

/// ICM on 1-D height Gaussians over cloud pixels, seeded by the MAP layer of
/// each pixel's velocity vector.
pub fn icm_height(
    heights: &HeightField,
    mask: &CloudMask,
    u: &Array2<f64>,
    v: &Array2<f64>,
    velocity: &VelocityFit,
    max_iters: usize,
) -> Result<HeightFit> {
    let dim = heights.heights.dim();
    if mask.dim() != dim || u.dim() != dim || v.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: mask.dim(),
        });
    }
    if mask.count() == 0 {
        return Err(Error::LayerEmpty(0));
    }
    let k = velocity.n_layers();
    let mut pixel_labels = Array2::from_shape_fn(dim, |p| velocity.map_layer(&[u[p], v[p]]));
    let cloud: Vec<(usize, usize)> = mask
        .bits
        .indexed_iter()
        .filter(|(_, b)| **b)
        .map(|(p, _)| p)
        .collect();
    let mut values: Vec<(f64, usize)> = cloud.iter().map(|&p| (heights.heights[p], pixel_labels[p])).collect();

    let mut means = vec![f64::NAN; k];
    let mut vars = vec![f64::NAN; k];
    let mut trace = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iters.max(1) {
        iterations += 1;
        for c in 0..k {
            if let Some((m, s2)) = height_params(&values, c) {
                means[c] = m;
                vars[c] = s2;
            }
        }
        let live: Vec<usize> = (0..k).filter(|&c| means[c].is_finite()).collect();
        let obj = |vals: &[(f64, usize)]| -> f64 {
            vals.iter().map(|(h, l)| normal_log_pdf(*h, means[*l], vars[*l])).sum()
        };
        trace.push(obj(&values));
        let mut changed = 0;
        for (h, l) in values.iter_mut() {
            let best = live
                .iter()
                .copied()
                .max_by(|&a, &b| normal_log_pdf(*h, means[a], vars[a]).total_cmp(&normal_log_pdf(*h, means[b], vars[b])))
                .unwrap_or(*l);
            if best != *l {
                *l = best;
                changed += 1;
            }
        }
        if changed == 0 {
            break;
        }
        trace.push(obj(&values));
    }
    for (&p, &(_, l)) in cloud.iter().zip(&values) {
        pixel_labels[p] = l;
    }
    let mean_heights = (0..k)
        .map(|c| {
            let (num, den) = values
                .iter()
                .filter(|(_, l)| *l == c)
                .fold((0.0, 0.0), |(n, d), (h, _)| (n + h, d + 1.0));
            (den > 0.0).then(|| num / den)
        })
        .collect();
    Ok(HeightFit {
        means,
        variances: vars,
        pixel_labels,
        mean_heights,
        objective_trace: trace,
        iterations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerParams {
    pub velocity: Gaussian2,
    pub height_mean: f64,
    pub height_var: f64,
    /// Mean cloud height; NaN when the layer has no cloud pixels.
    pub mean_height: f64,
}

/// Velocity and height model per layer; after ordering, layer 0 is the upper one.
#[derive(Debug, Clone)]
pub struct LayerModel {
    pub layers: Vec<LayerParams>,
    pub labels: Vec<usize>,
    pub pixel_labels: Array2<usize>,
    /// Layer heights within 1 m of each other or unavailable; order kept.
    pub tie: bool,
    pub collapsed: bool,
}

impl LayerModel {
    pub fn new(velocity: &VelocityFit, heights: &HeightFit) -> Self {
        let layers = velocity
            .layers
            .iter()
            .enumerate()
            .map(|(c, g)| LayerParams {
                velocity: *g,
                height_mean: heights.means[c],
                height_var: heights.variances[c],
                mean_height: heights.mean_heights[c].unwrap_or(f64::NAN),
            })
            .collect();
        Self {
            layers,
            labels: velocity.labels.clone(),
            pixel_labels: heights.pixel_labels.clone(),
            tie: false,
            collapsed: velocity.collapsed,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn gaussians(&self) -> Vec<Gaussian2> {
        self.layers.iter().map(|l| l.velocity).collect()
    }
}

/// Puts the higher layer first, permuting every per-layer field.
pub fn order_layers(mut model: LayerModel) -> LayerModel {
    if model.n_layers() < 2 {
        return model;
    }
    let (h0, h1) = (model.layers[0].mean_height, model.layers[1].mean_height);
    if !(h0.is_finite() && h1.is_finite()) || (h0 - h1).abs() < 1.0 {
        model.tie = true;
        return model;
    }
    if h0 < h1 {
        model.layers.swap(0, 1);
        for l in model.labels.iter_mut() {
            *l = 1 - *l;
        }
        model.pixel_labels.mapv_inplace(|l| 1 - l);
    }
    model
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn clusters(seed: u64) -> (Vec<[f64; 2]>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let mut data = Vec::new();
        let mut truth = Vec::new();
        for i in 0..200 {
            let c = i % 2;
            let cx = if c == 0 { 10.0 } else { -10.0 };
            data.push([cx + noise.sample(&mut rng), noise.sample(&mut rng)]);
            truth.push(c);
        }
        (data, truth)
    }

    #[test]
    fn separates_two_clusters() {
        let (data, truth) = clusters(1);
        let fit = icm_velocity(&data, 2, 42, DEFAULT_MAX_ITERS).unwrap();
        assert!(fit.converged && !fit.collapsed);
        let agree = fit.labels.iter().zip(&truth).filter(|(a, b)| a == b).count();
        assert!(agree == 200 || agree == 0, "split not exact: {agree}");
        for c in 0..2 {
            let members: Vec<&[f64; 2]> = data.iter().zip(&fit.labels).filter(|(_, &l)| l == c).map(|(v, _)| v).collect();
            let mx = members.iter().map(|v| v[0]).sum::<f64>() / members.len() as f64;
            assert!((fit.layers[c].mean[0] - mx).abs() <= 0.01 * mx.abs());
        }
        for g in &fit.layers {
            assert!(g.eigenvalues()[0] >= 1e-9);
        }
        for w in fit.objective_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "{w:?}");
        }
    }

    #[test]
    fn identical_vectors_collapse() {
        let data = vec![[3.0, -1.0]; 20];
        let fit = icm_velocity(&data, 2, 0, DEFAULT_MAX_ITERS).unwrap();
        assert!(fit.collapsed);
        assert_eq!(fit.n_layers(), 1);
        assert!(fit.layers[0].eigenvalues()[0] >= 1e-9);
    }

    #[test]
    fn lambda_is_complementary() {
        let (data, _) = clusters(2);
        let fit = icm_velocity(&data, 2, 5, DEFAULT_MAX_ITERS).unwrap();
        for i in 0..data.len() {
            assert_eq!(fit.lambda(i, 0) + fit.lambda(i, 1), 1.0);
        }
    }

    #[test]
    fn input_order_does_not_matter() {
        let (data, _) = clusters(3);
        let fit = icm_velocity(&data, 2, 9, DEFAULT_MAX_ITERS).unwrap();
        let mut perm: Vec<usize> = (0..data.len()).collect();
        perm.reverse();
        perm.swap(3, 77);
        let shuffled: Vec<[f64; 2]> = perm.iter().map(|&i| data[i]).collect();
        let fit2 = icm_velocity(&shuffled, 2, 9, DEFAULT_MAX_ITERS).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(fit2.labels[k], fit.labels[i]);
        }
        for c in 0..2 {
            assert!((fit.layers[c].mean[0] - fit2.layers[c].mean[0]).abs() < 1e-9);
        }
    }

    #[test]
    fn too_few_vectors_rejected() {
        assert!(icm_velocity(&[[0.0, 0.0]; 7], 2, 0, 10).is_err());
        assert!(icm_velocity(&[[0.0, 0.0]; 8], 3, 0, 10).is_err());
    }

    #[test]
    fn single_layer_is_mle() {
        let (data, _) = clusters(4);
        let fit = icm_velocity(&data, 1, 0, 10).unwrap();
        let mean = data.iter().map(|v| v[0]).sum::<f64>() / data.len() as f64;
        assert!((fit.layers[0].mean[0] - mean).abs() < 1e-12);
    }

    fn banded_scene(seed: u64) -> (HeightField, CloudMask, Array2<f64>, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 50.0).unwrap();
        let vnoise = Normal::new(0.0, 0.3).unwrap();
        let (m, n) = (30, 40);
        let mut h = Array2::zeros((m, n));
        let mut u = Array2::zeros((m, n));
        let v = Array2::zeros((m, n));
        for i in 0..m {
            for j in 0..n {
                let upper = j < n / 2;
                h[[i, j]] = if upper { 8000.0 } else { 3000.0 } + noise.sample(&mut rng);
                // a few velocity outliers so the height step has work to do
                let flip = rng.random::<f64>() < 0.1;
                u[[i, j]] = if upper ^ flip { 10.0 } else { -10.0 } + vnoise.sample(&mut rng);
            }
        }
        (HeightField { heights: h }, CloudMask::full(m, n), u, v)
    }

    #[test]
    fn recovers_height_bands() {
        let (h, mask, u, v) = banded_scene(8);
        let vecs: Vec<[f64; 2]> = u.iter().zip(v.iter()).map(|(a, b)| [*a, *b]).collect();
        let vel = icm_velocity(&vecs, 2, 1, DEFAULT_MAX_ITERS).unwrap();
        let fit = icm_height(&h, &mask, &u, &v, &vel, DEFAULT_MAX_ITERS).unwrap();
        let mut got: Vec<f64> = fit.mean_heights.iter().map(|x| x.unwrap()).collect();
        got.sort_by(f64::total_cmp);
        assert!((got[0] - 3000.0).abs() < 0.02 * 3000.0);
        assert!((got[1] - 8000.0).abs() < 0.02 * 8000.0);
        for w in fit.objective_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9);
        }
        let model = order_layers(LayerModel::new(&vel, &fit));
        assert!(model.layers[0].mean_height > model.layers[1].mean_height);
    }

    #[test]
    fn single_layer_height_matches_plain_mean() {
        let (h, _, u, v) = banded_scene(9);
        let mut bits = Array2::from_elem(h.heights.dim(), false);
        for j in 0..10 {
            bits[[3, j]] = true;
        }
        let mask = CloudMask::new(bits);
        let vecs: Vec<[f64; 2]> = u.iter().zip(v.iter()).map(|(a, b)| [*a, *b]).collect();
        let vel = icm_velocity(&vecs, 1, 1, DEFAULT_MAX_ITERS).unwrap();
        let fit = icm_height(&h, &mask, &u, &v, &vel, DEFAULT_MAX_ITERS).unwrap();
        let ones = Array2::ones(h.heights.dim());
        let bemm = crate::bemm::layer_mean_height(&ones, &h, &mask, 0).unwrap();
        assert!((fit.mean_heights[0].unwrap() - bemm).abs() < 1e-9);
    }

    #[test]
    fn constant_heights_floor_variance() {
        let h = HeightField {
            heights: Array2::from_elem((4, 4), 2000.0),
        };
        let mask = CloudMask::full(4, 4);
        let z = Array2::zeros((4, 4));
        let vel = icm_velocity(&vec![[1.0, 0.0]; 16], 1, 0, 10).unwrap();
        let fit = icm_height(&h, &mask, &z, &z, &vel, 10).unwrap();
        assert_eq!(fit.variances[0], HEIGHT_VAR_FLOOR);
        assert_eq!(fit.mean_heights[0], Some(2000.0));
        assert!(icm_height(&h, &CloudMask::empty(4, 4), &z, &z, &vel, 10).is_err());
    }

    fn model_with_heights(h0: f64, h1: f64) -> LayerModel {
        let g = Gaussian2 {
            mean: [0.0, 0.0],
            cov: [[1.0, 0.0], [0.0, 1.0]],
        };
        let g1 = Gaussian2 { mean: [5.0, 0.0], ..g };
        LayerModel {
            layers: vec![
                LayerParams { velocity: g, height_mean: h0, height_var: 1.0, mean_height: h0 },
                LayerParams { velocity: g1, height_mean: h1, height_var: 1.0, mean_height: h1 },
            ],
            labels: vec![0, 1, 1],
            pixel_labels: Array2::from_elem((1, 2), 0),
            tie: false,
            collapsed: false,
        }
    }

    #[test]
    fn ordering_cases() {
        let m = order_layers(model_with_heights(3000.0, 8000.0));
        assert_eq!(m.layers[0].mean_height, 8000.0);
        assert_eq!(m.layers[0].velocity.mean[0], 5.0);
        assert_eq!(m.labels, vec![1, 0, 0]);
        assert!(m.pixel_labels.iter().all(|l| *l == 1));

        let m = order_layers(model_with_heights(8000.0, 3000.0));
        assert_eq!(m.layers[0].mean_height, 8000.0);
        assert_eq!(m.labels, vec![0, 1, 1]);

        let m = order_layers(model_with_heights(3000.0, 3000.5));
        assert!(m.tie);
        assert_eq!(m.layers[0].mean_height, 3000.0);
    }
}
