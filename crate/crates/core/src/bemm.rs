//! Beta mixture model over normalized pixel temperatures, fitted by EM with a
//! gradient-ascent M step.

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::imaging::{CloudMask, HeightField, ThermalFrame};

/// Boundary squeeze keeping normalized values strictly inside (0, 1).
pub const SQUEEZE: f64 = 1e-4;
/// Lower bound applied to the shape parameters after every update.
pub const PARAM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedTemps {
    pub values: Array2<f64>,
    /// Set when the source frame had no temperature spread.
    pub degenerate: bool,
}

impl NormalizedTemps {
    /// Wraps values already in (0, 1).
    pub fn from_values(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
            return Err(Error::Domain("normalized temperatures must lie in (0, 1)".into()));
        }
        Ok(Self {
            values,
            degenerate: false,
        })
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }
}

/// Min-max normalization followed by an affine squeeze into `[SQUEEZE, 1 - SQUEEZE]`.
pub fn normalize_temps(frame: &ThermalFrame) -> NormalizedTemps {
    let t = frame.temps();
    let (lo, hi) = t
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi <= lo {
        return NormalizedTemps {
            values: Array2::from_elem(t.dim(), 0.5),
            degenerate: true,
        };
    }
    let span = hi - lo;
    NormalizedTemps {
        values: t.mapv(|v| SQUEEZE + (1.0 - 2.0 * SQUEEZE) * (v - lo) / span),
        degenerate: false,
    }
}

/// Normalization whose range comes from the cloud pixels only; other pixels
/// are clamped into the same squeezed interval. Falls back to the whole
/// frame when the mask is empty or flat.
pub fn normalize_temps_masked(frame: &ThermalFrame, mask: &CloudMask) -> Result<NormalizedTemps> {
    let t = frame.temps();
    if mask.dim() != t.dim() {
        return Err(Error::DimensionMismatch {
            expected: t.dim(),
            got: mask.dim(),
        });
    }
    let (lo, hi) = t
        .iter()
        .zip(mask.bits.iter())
        .filter(|(_, b)| **b)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&v, _)| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return Ok(normalize_temps(frame));
    }
    let span = hi - lo;
    Ok(NormalizedTemps {
        values: t.mapv(|v| SQUEEZE + (1.0 - 2.0 * SQUEEZE) * ((v - lo) / span).clamp(0.0, 1.0)),
        degenerate: false,
    })
}

/// Fits the mixture to the cloud pixels of `t` and assigns responsibilities
/// to every pixel from the fitted components.
pub fn fit_em_masked(
    t: &NormalizedTemps,
    mask: &CloudMask,
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<BetaMixtureFit> {
    if mask.dim() != t.dim() {
        return Err(Error::DimensionMismatch {
            expected: t.dim(),
            got: mask.dim(),
        });
    }
    let cloud: Vec<f64> = t.values.iter().zip(mask.bits.iter()).filter(|(_, b)| **b).map(|(v, _)| *v).collect();
    if cloud.len() < 2 * k || cloud.len() == t.values.len() {
        return fit_em(t, k, seed, max_iters, tol);
    }
    let n = cloud.len();
    let sub = NormalizedTemps {
        values: Array2::from_shape_vec((1, n), cloud).expect("row vector"),
        degenerate: t.degenerate,
    };
    let mut fit = fit_em(&sub, k, seed, max_iters, tol)?;
    let e = e_step(t, &fit.components)?;
    fit.responsibilities = e.responsibilities;
    fit.underflow_pixels = e.underflow_pixels;
    Ok(fit)
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Log density of `Be(alpha, beta)` at `x`.
pub fn beta_logpdf(x: f64, alpha: f64, beta: f64) -> Result<f64> {
    if !(x > 0.0 && x < 1.0) {
        return Err(Error::Domain(format!("beta density evaluated at {x}")));
    }
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(Error::Domain(format!("beta shape ({alpha}, {beta}) must be positive")));
    }
    Ok(log_density(x.ln(), (-x).ln_1p(), alpha, beta))
}

#[inline]
fn log_density(ln_x: f64, ln_1mx: f64, alpha: f64, beta: f64) -> f64 {
    (alpha - 1.0) * ln_x + (beta - 1.0) * ln_1mx - ln_beta(alpha, beta)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaComponent {
    pub alpha: f64,
    pub beta: f64,
    pub prior: f64,
}

impl BetaComponent {
    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }
}

#[derive(Debug, Clone)]
pub struct BetaMixtureFit {
    pub components: Vec<BetaComponent>,
    /// Responsibilities, shape `(rows, cols, n_clusters)`.
    pub responsibilities: Array3<f64>,
    /// EM objective after each iteration: the expected complete-data
    /// log-likelihood plus the entropy of the responsibilities. It equals the
    /// observed-data log-likelihood right after an E step and never decreases.
    pub cdll_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Pixels where every component underflowed in the final E step.
    pub underflow_pixels: usize,
    /// Set when the input had no spread and a single flat component was used.
    pub degenerate: bool,
}

impl BetaMixtureFit {
    pub fn n_clusters(&self) -> usize {
        self.components.len()
    }

    /// Responsibility grid of cluster `c`; zeros when `c` is out of range.
    pub fn responsibility(&self, c: usize) -> Array2<f64> {
        let (m, n, k) = self.responsibilities.dim();
        if c < k {
            self.responsibilities.index_axis(Axis(2), c).to_owned()
        } else {
            Array2::zeros((m, n))
        }
    }

    /// MAP cluster per pixel.
    pub fn labels(&self) -> Array2<usize> {
        let (m, n, k) = self.responsibilities.dim();
        Array2::from_shape_fn((m, n), |(i, j)| {
            (0..k)
                .max_by(|&a, &b| self.responsibilities[[i, j, a]].total_cmp(&self.responsibilities[[i, j, b]]))
                .unwrap_or(0)
        })
    }
}

struct LogTemps {
    ln_x: Array2<f64>,
    ln_1mx: Array2<f64>,
}

impl LogTemps {
    fn new(t: &NormalizedTemps) -> Self {
        Self {
            ln_x: t.values.mapv(f64::ln),
            ln_1mx: t.values.mapv(|v| (-v).ln_1p()),
        }
    }
}

pub struct EStep {
    pub responsibilities: Array3<f64>,
    pub underflow_pixels: usize,
}

/// Posterior cluster memberships, normalized per pixel in log space.
pub fn e_step(t: &NormalizedTemps, params: &[BetaComponent]) -> Result<EStep> {
    check_params(params)?;
    Ok(e_step_logs(&LogTemps::new(t), params))
}

fn e_step_logs(logs: &LogTemps, params: &[BetaComponent]) -> EStep {
    let (m, n) = logs.ln_x.dim();
    let k = params.len();
    let mut gamma = Array3::zeros((m, n, k));
    let mut underflow = 0;
    let mut lp = vec![0.0; k];
    for i in 0..m {
        for j in 0..n {
            for (c, p) in params.iter().enumerate() {
                lp[c] = p.prior.ln() + log_density(logs.ln_x[[i, j]], logs.ln_1mx[[i, j]], p.alpha, p.beta);
            }
            let mx = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !mx.is_finite() {
                underflow += 1;
                for c in 0..k {
                    gamma[[i, j, c]] = 1.0 / k as f64;
                }
                continue;
            }
            let z: f64 = lp.iter().map(|v| (v - mx).exp()).sum();
            for c in 0..k {
                gamma[[i, j, c]] = (lp[c] - mx).exp() / z;
            }
        }
    }
    EStep {
        responsibilities: gamma,
        underflow_pixels: underflow,
    }
}

fn check_params(params: &[BetaComponent]) -> Result<()> {
    if params.is_empty() {
        return Err(Error::invalid("mixture needs at least one component"));
    }
    for p in params {
        if !(p.alpha > 0.0 && p.beta > 0.0 && p.prior >= 0.0) {
            return Err(Error::invalid(format!("invalid beta component {p:?}")));
        }
    }
    Ok(())
}

/// Weighted sufficient statistics of one component.
#[derive(Debug, Clone, Copy)]
struct SuffStats {
    weight: f64,
    sum_ln_x: f64,
    sum_ln_1mx: f64,
}

impl SuffStats {
    fn objective(&self, a: f64, b: f64) -> f64 {
        (a - 1.0) * self.sum_ln_x + (b - 1.0) * self.sum_ln_1mx - self.weight * ln_beta(a, b)
    }

    fn gradient(&self, a: f64, b: f64) -> (f64, f64) {
        let dab = digamma(a + b);
        (
            self.sum_ln_x - self.weight * (digamma(a) - dab),
            self.sum_ln_1mx - self.weight * (digamma(b) - dab),
        )
    }
}

fn suff_stats(logs: &LogTemps, gamma: &Array3<f64>, c: usize) -> SuffStats {
    let g = gamma.index_axis(Axis(2), c);
    let mut s = SuffStats {
        weight: 0.0,
        sum_ln_x: 0.0,
        sum_ln_1mx: 0.0,
    };
    for ((w, lx), l1) in g.iter().zip(logs.ln_x.iter()).zip(logs.ln_1mx.iter()) {
        s.weight += w;
        s.sum_ln_x += w * lx;
        s.sum_ln_1mx += w * l1;
    }
    s
}

const MAX_ASCENT_STEPS: usize = 2000;
const GRADIENT_TOL: f64 = 1e-10;

/// Backtracking gradient ascent on one component's weighted log-likelihood.
/// Every accepted step strictly increases the objective.
fn ascend(stats: &SuffStats, mut a: f64, mut b: f64) -> (f64, f64) {
    if stats.weight <= 0.0 {
        return (a, b);
    }
    // Work with the per-sample mean so the step size is scale free.
    let mean = SuffStats {
        weight: 1.0,
        sum_ln_x: stats.sum_ln_x / stats.weight,
        sum_ln_1mx: stats.sum_ln_1mx / stats.weight,
    };
    let mut lr = 1.0;
    let mut f = mean.objective(a, b);
    for _ in 0..MAX_ASCENT_STEPS {
        let (ga, gb) = mean.gradient(a, b);
        if !(ga.is_finite() && gb.is_finite()) {
            lr *= 0.5;
            continue;
        }
        let gnorm2 = ga * ga + gb * gb;
        if gnorm2.sqrt() < GRADIENT_TOL {
            break;
        }
        let mut accepted = false;
        while lr > 1e-14 {
            let na = (a + lr * ga).max(PARAM_FLOOR);
            let nb = (b + lr * gb).max(PARAM_FLOOR);
            let nf = mean.objective(na, nb);
            // Armijo condition on the projected step.
            let gain = ga * (na - a) + gb * (nb - b);
            if nf.is_finite() && nf >= f + 1e-4 * gain && nf > f {
                a = na;
                b = nb;
                f = nf;
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        if !accepted {
            break;
        }
        lr *= 2.0;
    }
    (a, b)
}

/// Closed-form priors plus gradient-ascent shape updates.
pub fn m_step(t: &NormalizedTemps, gamma: &Array3<f64>, params: &[BetaComponent]) -> Result<Vec<BetaComponent>> {
    check_params(params)?;
    let (m, n, k) = gamma.dim();
    if (m, n) != t.dim() || k != params.len() {
        return Err(Error::invalid("responsibilities do not match data and parameters"));
    }
    Ok(m_step_logs(&LogTemps::new(t), gamma, params))
}

fn m_step_logs(logs: &LogTemps, gamma: &Array3<f64>, params: &[BetaComponent]) -> Vec<BetaComponent> {
    let total = (gamma.dim().0 * gamma.dim().1) as f64;
    let mut out: Vec<BetaComponent> = params
        .iter()
        .enumerate()
        .map(|(c, p)| {
            let stats = suff_stats(logs, gamma, c);
            let (alpha, beta) = ascend(&stats, p.alpha, p.beta);
            BetaComponent {
                alpha,
                beta,
                prior: stats.weight / total,
            }
        })
        .collect();
    let z: f64 = out.iter().map(|p| p.prior).sum();
    for p in &mut out {
        p.prior /= z;
    }
    out
}

/// Expected complete-data log-likelihood plus responsibility entropy.
fn free_energy(logs: &LogTemps, gamma: &Array3<f64>, params: &[BetaComponent]) -> f64 {
    let mut total = 0.0;
    for (c, p) in params.iter().enumerate() {
        let stats = suff_stats(logs, gamma, c);
        if stats.weight > 0.0 {
            total += stats.weight * p.prior.ln() + stats.objective(p.alpha, p.beta);
        }
        let g = gamma.index_axis(Axis(2), c);
        total -= g.iter().filter(|w| **w > 0.0).map(|w| w * w.ln()).sum::<f64>();
    }
    total
}

fn method_of_moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let v = values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let factor = if v > 0.0 { m * (1.0 - m) / v - 1.0 } else { 0.0 };
    if factor > 0.0 {
        ((m * factor).max(PARAM_FLOOR), ((1.0 - m) * factor).max(PARAM_FLOOR))
    } else {
        (1.0, 1.0)
    }
}

/// Quantile split into `k` groups with moment-matched shapes; the seed adds a
/// small multiplicative jitter.
fn initialize(t: &NormalizedTemps, k: usize, seed: u64) -> Vec<BetaComponent> {
    let mut sorted: Vec<f64> = t.values.iter().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = sorted.len();
    (0..k)
        .map(|c| {
            let group = &sorted[c * len / k..((c + 1) * len / k).max(c * len / k + 1)];
            let (a, b) = method_of_moments(group);
            let jitter = 1.0 + 0.01 * (rng.random::<f64>() - 0.5);
            BetaComponent {
                alpha: a * jitter,
                beta: b / jitter,
                prior: 1.0 / k as f64,
            }
        })
        .collect()
}

/// EM fit of a `k`-component beta mixture.
pub fn fit_em(t: &NormalizedTemps, k: usize, seed: u64, max_iters: usize, tol: f64) -> Result<BetaMixtureFit> {
    if !(1..=2).contains(&k) {
        return Err(Error::invalid(format!("cluster count must be 1 or 2, got {k}")));
    }
    if max_iters == 0 {
        return Err(Error::invalid("max_iters must be at least 1"));
    }
    let (m, n) = t.dim();
    if t.degenerate {
        return Ok(BetaMixtureFit {
            components: vec![BetaComponent {
                alpha: 1.0,
                beta: 1.0,
                prior: 1.0,
            }],
            responsibilities: Array3::ones((m, n, 1)),
            cdll_trace: vec![],
            iterations: 0,
            converged: true,
            underflow_pixels: 0,
            degenerate: true,
        });
    }
    let logs = LogTemps::new(t);
    let mut params = initialize(t, k, seed);
    let mut e = e_step_logs(&logs, &params);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        params = m_step_logs(&logs, &e.responsibilities, &params);
        let f = free_energy(&logs, &e.responsibilities, &params);
        let done = trace.last().is_some_and(|prev: &f64| (f - prev).abs() < tol);
        trace.push(f);
        e = e_step_logs(&logs, &params);
        if done || k == 1 {
            converged = true;
            break;
        }
    }

    // Canonical label order: ascending component mean.
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| params[a].mean().total_cmp(&params[b].mean()));
    let components = order.iter().map(|&c| params[c]).collect();
    let mut gamma = Array3::zeros((m, n, k));
    for (dst, &src) in order.iter().enumerate() {
        gamma
            .index_axis_mut(Axis(2), dst)
            .assign(&e.responsibilities.index_axis(Axis(2), src));
    }
    Ok(BetaMixtureFit {
        components,
        responsibilities: gamma,
        cdll_trace: trace,
        iterations,
        converged,
        underflow_pixels: e.underflow_pixels,
        degenerate: false,
    })
}

/// Responsibility-weighted mean height over cloud pixels for cluster `c`.
pub fn layer_mean_height(gamma: &Array2<f64>, heights: &HeightField, mask: &CloudMask, c: usize) -> Result<f64> {
    if gamma.dim() != heights.heights.dim() || gamma.dim() != mask.dim() {
        return Err(Error::DimensionMismatch {
            expected: heights.heights.dim(),
            got: gamma.dim(),
        });
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for ((g, h), b) in gamma.iter().zip(heights.heights.iter()).zip(mask.bits.iter()) {
        if *b {
            num += g * h;
            den += g;
        }
    }
    if den <= 0.0 {
        return Err(Error::LayerEmpty(c));
    }
    Ok(num / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand_distr::{Beta, Distribution};

    #[test]
    fn logpdf_reference_values() {
        assert!(beta_logpdf(0.5, 1.0, 1.0).unwrap().abs() < 1e-12);
        assert!((beta_logpdf(0.5, 2.0, 2.0).unwrap() - 1.5f64.ln()).abs() < 1e-12);
        // B(2,5) = 1/30, so f(0.25) = 30 * 0.25 * 0.75^4
        assert!((beta_logpdf(0.25, 2.0, 5.0).unwrap() - 2.373046875f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn logpdf_domain_errors() {
        assert!(beta_logpdf(0.0, 1.0, 1.0).is_err());
        assert!(beta_logpdf(1.0, 1.0, 1.0).is_err());
        assert!(beta_logpdf(0.5, 0.0, 1.0).is_err());
    }

    #[test]
    fn logpdf_integrates_to_one() {
        for &a in &[0.5, 1.0, 2.0, 5.0] {
            for &b in &[0.5, 1.0, 2.0, 5.0] {
                if a < 1.0 || b < 1.0 {
                    // Endpoint singularities: integrate in the substituted
                    // variable x = sin^2(t), dx = 2 sin t cos t dt.
                    let n = 100_000;
                    let h = std::f64::consts::FRAC_PI_2 / n as f64;
                    let f = |t: f64| {
                        let x = t.sin().powi(2);
                        if x <= 0.0 || x >= 1.0 {
                            return 0.0;
                        }
                        beta_logpdf(x, a, b).unwrap().exp() * 2.0 * t.sin() * t.cos()
                    };
                    let mut s = 0.5 * (f(0.0) + f(std::f64::consts::FRAC_PI_2));
                    for i in 1..n {
                        s += f(i as f64 * h);
                    }
                    assert!((s * h - 1.0).abs() < 1e-4, "a={a} b={b} integral={}", s * h);
                } else {
                    let n = 100_000;
                    let h = 1.0 / n as f64;
                    let f = |x: f64| {
                        if x <= 0.0 || x >= 1.0 {
                            if (x <= 0.0 && a == 1.0) || (x >= 1.0 && b == 1.0) {
                                return (-ln_beta(a, b)).exp();
                            }
                            return 0.0;
                        }
                        beta_logpdf(x, a, b).unwrap().exp()
                    };
                    let mut s = 0.5 * (f(0.0) + f(1.0));
                    for i in 1..n {
                        s += f(i as f64 * h);
                    }
                    assert!((s * h - 1.0).abs() < 1e-4, "a={a} b={b} integral={}", s * h);
                }
            }
        }
    }

    #[test]
    fn masked_fit_ignores_clear_sky() {
        // sky at 240 K dominates; two cloud decks at 265 K and 290 K
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let temps = Array2::from_shape_fn((40, 50), |(i, j)| match (i + j) % 5 {
            0 | 1 => 240.0 + rng.random_range(-0.5..0.5),
            2 => 265.0 + rng.random_range(-2.0..2.0),
            _ => 290.0 + rng.random_range(-2.0..2.0),
        });
        let frame = ThermalFrame::new(temps.clone(), 300.0).unwrap();
        let mask = CloudMask::new(temps.mapv(|t| t > 250.0));
        let t = normalize_temps_masked(&frame, &mask).unwrap();
        assert!(t.values.iter().all(|v| *v > 0.0 && *v < 1.0));
        let fit = fit_em_masked(&t, &mask, 2, 0, 200, 1e-8).unwrap();
        let labels = fit.labels();
        let lab = |want: f64| {
            let ls: Vec<usize> = temps
                .indexed_iter()
                .filter(|(_, v)| (**v - want).abs() < 3.0)
                .map(|(p, _)| labels[p])
                .collect();
            let ones = ls.iter().filter(|l| **l == 1).count();
            ones as f64 / ls.len() as f64
        };
        let (a, b) = (lab(265.0), lab(290.0));
        assert!((a < 0.05 && b > 0.95) || (a > 0.95 && b < 0.05), "{a} {b}");
        assert_eq!(fit.responsibilities.dim(), (40, 50, 2));
    }

    #[test]
    fn normalize_constant_frame_is_degenerate() {
        let f = ThermalFrame::new(Array2::from_elem((3, 3), 250.0), 300.0).unwrap();
        let t = normalize_temps(&f);
        assert!(t.degenerate);
        assert!(t.values.iter().all(|v| *v == 0.5));
    }

    #[test]
    fn normalize_extremes_and_ramp() {
        let f = ThermalFrame::new(array![[250.0, 260.0], [270.0, 280.0]], 300.0).unwrap();
        let t = normalize_temps(&f);
        assert!((t.values[[0, 0]] - SQUEEZE).abs() < 1e-15);
        assert!((t.values[[1, 1]] - (1.0 - SQUEEZE)).abs() < 1e-15);
        // affine oracle
        for (k, v) in t.values.iter().enumerate() {
            let expected = SQUEEZE + (1.0 - 2.0 * SQUEEZE) * k as f64 / 3.0;
            assert!((v - expected).abs() < 1e-12);
        }
    }

    fn normalized(values: Vec<f64>, rows: usize) -> NormalizedTemps {
        let cols = values.len() / rows;
        NormalizedTemps::from_values(Array2::from_shape_vec((rows, cols), values).unwrap()).unwrap()
    }

    #[test]
    fn single_component_responsibilities_are_one() {
        let t = normalized(vec![0.1, 0.4, 0.6, 0.9], 2);
        let e = e_step(&t, &[BetaComponent { alpha: 2.0, beta: 3.0, prior: 1.0 }]).unwrap();
        assert!(e.responsibilities.iter().all(|g| *g == 1.0));
    }

    #[test]
    fn identical_components_split_evenly() {
        let t = normalized(vec![0.1, 0.4, 0.6, 0.9], 2);
        let p = BetaComponent { alpha: 2.0, beta: 3.0, prior: 0.5 };
        let e = e_step(&t, &[p, p]).unwrap();
        assert!(e.responsibilities.iter().all(|g| (*g - 0.5).abs() < 1e-15));
    }

    #[test]
    fn separated_components_match_bayes_posterior() {
        let p = [
            BetaComponent { alpha: 3.0, beta: 12.0, prior: 0.4 },
            BetaComponent { alpha: 12.0, beta: 3.0, prior: 0.6 },
        ];
        let modes = [2.0 / 13.0, 11.0 / 13.0];
        let t = normalized(modes.to_vec(), 1);
        let e = e_step(&t, &p).unwrap();
        for (j, &x) in modes.iter().enumerate() {
            let l0 = p[0].prior * beta_logpdf(x, 3.0, 12.0).unwrap().exp();
            let l1 = p[1].prior * beta_logpdf(x, 12.0, 3.0).unwrap().exp();
            let exact = [l0 / (l0 + l1), l1 / (l0 + l1)];
            for c in 0..2 {
                assert!((e.responsibilities[[0, j, c]] - exact[c]).abs() < 1e-12);
            }
            assert!(e.responsibilities[[0, j, j]] >= 0.99);
        }
    }

    #[test]
    fn m_step_recovers_beta_2_2() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dist = Beta::new(2.0, 2.0).unwrap();
        let xs: Vec<f64> = (0..10_000).map(|_| dist.sample(&mut rng)).collect();
        let t = normalized(xs.clone(), 100);
        let gamma = Array3::ones((100, 100, 1));
        let start = [BetaComponent { alpha: 1.0, beta: 1.0, prior: 1.0 }];
        let p = m_step(&t, &gamma, &start).unwrap()[0];
        let (a_mom, b_mom) = method_of_moments(&xs);
        assert!((p.alpha - a_mom).abs() / a_mom < 0.05, "{} vs {a_mom}", p.alpha);
        assert!((p.beta - b_mom).abs() / b_mom < 0.05, "{} vs {b_mom}", p.beta);
        assert_eq!(p.prior, 1.0);
    }

    #[test]
    fn m_step_fixed_point_and_prior_normalization() {
        let t = normalized(vec![0.2, 0.3, 0.7, 0.8, 0.5, 0.45], 2);
        let gamma = Array3::ones((2, 3, 1));
        let start = [BetaComponent { alpha: 1.0, beta: 1.0, prior: 1.0 }];
        let opt = m_step(&t, &gamma, &start).unwrap();
        let again = m_step(&t, &gamma, &opt).unwrap();
        assert!((again[0].alpha - opt[0].alpha).abs() < 1e-8);
        assert!((again[0].beta - opt[0].beta).abs() < 1e-8);

        let two = [
            BetaComponent { alpha: 2.0, beta: 5.0, prior: 0.5 },
            BetaComponent { alpha: 5.0, beta: 2.0, prior: 0.5 },
        ];
        let e = e_step(&t, &two).unwrap();
        let next = m_step(&t, &e.responsibilities, &two).unwrap();
        let s: f64 = next.iter().map(|p| p.prior).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fit_em_single_cluster_equals_mle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dist = Beta::new(3.0, 5.0).unwrap();
        let xs: Vec<f64> = (0..2_500).map(|_| dist.sample(&mut rng)).collect();
        let t = normalized(xs, 50);
        let fit = fit_em(&t, 1, 0, 50, 1e-10).unwrap();
        let init = initialize(&t, 1, 0);
        let direct = m_step(&t, &Array3::ones((50, 50, 1)), &init).unwrap()[0];
        assert!((fit.components[0].alpha - direct.alpha).abs() < 1e-9);
        assert!((fit.components[0].beta - direct.beta).abs() < 1e-9);
    }

    #[test]
    fn fit_em_rejects_bad_arguments() {
        let t = normalized(vec![0.2, 0.3, 0.7, 0.8], 2);
        assert!(fit_em(&t, 0, 0, 10, 1e-8).is_err());
        assert!(fit_em(&t, 3, 0, 10, 1e-8).is_err());
        assert!(fit_em(&t, 2, 0, 0, 1e-8).is_err());
    }

    #[test]
    fn degenerate_input_falls_back_to_one_cluster() {
        let f = ThermalFrame::new(Array2::from_elem((4, 4), 250.0), 300.0).unwrap();
        let fit = fit_em(&normalize_temps(&f), 2, 0, 10, 1e-8).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.n_clusters(), 1);
        assert!(fit.responsibility(1).iter().all(|g| *g == 0.0));
    }

    #[test]
    fn label_permutation_is_consistent() {
        let t = normalized(vec![0.1, 0.15, 0.2, 0.8, 0.85, 0.9], 2);
        let p = [
            BetaComponent { alpha: 2.0, beta: 8.0, prior: 0.3 },
            BetaComponent { alpha: 8.0, beta: 2.0, prior: 0.7 },
        ];
        let swapped = [p[1], p[0]];
        let e = e_step(&t, &p).unwrap();
        let es = e_step(&t, &swapped).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(e.responsibilities[[i, j, 0]], es.responsibilities[[i, j, 1]]);
            }
        }
        let m = m_step(&t, &e.responsibilities, &p).unwrap();
        let ms = m_step(&t, &es.responsibilities, &swapped).unwrap();
        assert_eq!(m[0], ms[1]);
        assert_eq!(m[1], ms[0]);
    }

    #[test]
    fn layer_mean_height_cases() {
        let heights = HeightField {
            heights: array![[1000.0, 2000.0], [3000.0, 4000.0]],
        };
        let mask = CloudMask::new(array![[true, true], [true, false]]);
        let one_hot = array![[0.0, 1.0], [0.0, 0.0]];
        assert_eq!(layer_mean_height(&one_hot, &heights, &mask, 0).unwrap(), 2000.0);

        let flat = HeightField {
            heights: Array2::from_elem((2, 2), 2000.0),
        };
        let g = array![[0.3, 0.9], [0.5, 0.1]];
        assert!((layer_mean_height(&g, &flat, &mask, 0).unwrap() - 2000.0).abs() < 1e-9);

        // brute-force weighted mean over masked pixels
        let expected = (0.3 * 1000.0 + 0.9 * 2000.0 + 0.5 * 3000.0) / (0.3 + 0.9 + 0.5);
        assert!((layer_mean_height(&g, &heights, &mask, 0).unwrap() - expected).abs() < 1e-9);

        let empty = CloudMask::empty(2, 2);
        assert!(matches!(
            layer_mean_height(&g, &heights, &empty, 1),
            Err(Error::LayerEmpty(1))
        ));
    }
}
