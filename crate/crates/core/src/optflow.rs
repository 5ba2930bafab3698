//! Weighted Lucas-Kanade flow per cloud layer and the pixel-to-metric transform.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::imaging::{PixelGeometry, ThermalFrame};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WlkConfig {
    /// Window area in pixels squared; its square root is the window side.
    pub window_area: usize,
    pub reg_tau: f64,
    /// Amplitude of the derivative-of-Gaussian kernel.
    pub kernel_sigma: f64,
    /// `f_r` divisor of the metric transform.
    pub frame_rate: f64,
    /// `delta` velocity scale of the metric transform.
    pub vector_scale: f64,
    /// Multiply the layer weights by a Gaussian taper centred on the pixel.
    pub taper: bool,
}

impl Default for WlkConfig {
    fn default() -> Self {
        Self {
            window_area: 16,
            reg_tau: 1e-8,
            kernel_sigma: 1.0,
            frame_rate: 15.0,
            vector_scale: 2.29,
            taper: true,
        }
    }
}

impl WlkConfig {
    pub fn window_side(&self) -> Result<usize> {
        let side = (self.window_area as f64).sqrt().round() as usize;
        if side * side != self.window_area || side < 2 {
            return Err(Error::invalid(format!(
                "window area {} must be a perfect square of side >= 2",
                self.window_area
            )));
        }
        Ok(side)
    }

    pub fn validate(&self) -> Result<()> {
        self.window_side()?;
        if !(self.reg_tau >= 0.0) {
            return Err(Error::invalid("regularization must be non-negative"));
        }
        if !(self.kernel_sigma > 0.0) {
            return Err(Error::invalid("kernel sigma must be positive"));
        }
        if !(self.frame_rate > 0.0 && self.vector_scale > 0.0) {
            return Err(Error::invalid("frame rate and vector scale must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Derivatives {
    pub ix: Array2<f64>,
    pub iy: Array2<f64>,
    pub it: Array2<f64>,
}

/// Min-max normalizes two frames jointly onto [0, 1].
pub fn normalize_pair(prev: &ThermalFrame, next: &ThermalFrame) -> Result<(Array2<f64>, Array2<f64>)> {
    prev.check_same_dim(next)?;
    let (lo, hi) = prev
        .temps()
        .iter()
        .chain(next.temps().iter())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi <= lo {
        let z = Array2::zeros(prev.dim());
        return Ok((z.clone(), z));
    }
    let s = 1.0 / (hi - lo);
    Ok((prev.temps().mapv(|v| (v - lo) * s), next.temps().mapv(|v| (v - lo) * s)))
}

fn gaussian_kernels(sigma: f64) -> (Vec<f64>, Vec<f64>) {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let g: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let gs: f64 = g.iter().sum();
    let smooth: Vec<f64> = g.iter().map(|v| v / gs).collect();
    // d[k] = -k g[k], scaled so a unit ramp differentiates to exactly 1.
    let raw: Vec<f64> = (-radius..=radius)
        .zip(g.iter())
        .map(|(k, gk)| -(k as f64) * gk)
        .collect();
    let moment: f64 = (-radius..=radius).zip(raw.iter()).map(|(k, d)| k as f64 * d).sum();
    let deriv = raw.iter().map(|d| -d / moment).collect();
    (smooth, deriv)
}

/// Correlates along rows (`axis = 1`) or columns (`axis = 0`) with replicated borders.
fn convolve_axis(img: &Array2<f64>, kernel: &[f64], axis: usize) -> Array2<f64> {
    let (m, n) = img.dim();
    let r = (kernel.len() / 2) as i64;
    Array2::from_shape_fn((m, n), |(i, j)| {
        let mut s = 0.0;
        for (t, w) in kernel.iter().enumerate() {
            let k = t as i64 - r;
            // (f * d)(x) = sum_k f(x - k) d[k]
            let (ii, jj) = if axis == 1 {
                (i as i64, (j as i64 - k).clamp(0, n as i64 - 1))
            } else {
                ((i as i64 - k).clamp(0, m as i64 - 1), j as i64)
            };
            s += w * img[[ii as usize, jj as usize]];
        }
        s
    })
}

fn spatial_gradients(img: &Array2<f64>, sigma: f64) -> (Array2<f64>, Array2<f64>) {
    let (smooth, deriv) = gaussian_kernels(sigma);
    let ix = convolve_axis(&convolve_axis(img, &deriv, 1), &smooth, 0);
    let iy = convolve_axis(&convolve_axis(img, &deriv, 0), &smooth, 1);
    (ix, iy)
}

/// Spatial derivatives averaged over both frames, temporal derivative as the
/// frame difference smoothed by the same Gaussian so both sides of the flow
/// equation see equal blur. Intensities are normalized per pair.
pub fn derivatives(prev: &ThermalFrame, next: &ThermalFrame, sigma: f64) -> Result<Derivatives> {
    if !(sigma > 0.0) {
        return Err(Error::invalid("derivative kernel sigma must be positive"));
    }
    let (a, b) = normalize_pair(prev, next)?;
    Ok(derivatives_of(&a, &b, sigma))
}

pub(crate) fn derivatives_of(a: &Array2<f64>, b: &Array2<f64>, sigma: f64) -> Derivatives {
    let (ax, ay) = spatial_gradients(a, sigma);
    let (bx, by) = spatial_gradients(b, sigma);
    let (smooth, _) = gaussian_kernels(sigma);
    let diff = b - a;
    Derivatives {
        ix: (ax + bx) * 0.5,
        iy: (ay + by) * 0.5,
        it: convolve_axis(&convolve_axis(&diff, &smooth, 1), &smooth, 0),
    }
}

/// Per-layer velocity in pixels per frame.
#[derive(Debug, Clone)]
pub struct LayerFlow {
    pub u: Array2<f64>,
    pub v: Array2<f64>,
    /// Pixels whose clipped window keeps less than a quarter of its area.
    pub low_confidence: Array2<bool>,
}

/// Solves the weighted, Tikhonov-regularized 2x2 normal equations of
/// Lucas-Kanade in a square window around every pixel.
pub fn wlk(d: &Derivatives, weights: &Array2<f64>, cfg: &WlkConfig) -> Result<LayerFlow> {
    cfg.validate()?;
    let dim = d.ix.dim();
    if d.iy.dim() != dim || d.it.dim() != dim || weights.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: weights.dim(),
        });
    }
    if weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
        return Err(Error::invalid("layer weights must lie in [0, 1]"));
    }
    let side = cfg.window_side()? as i64;
    let lo = -(side / 2);
    let hi = lo + side - 1;
    let taper_s2 = 2.0 * (side as f64 / 2.0).powi(2);
    let (m, n) = dim;
    let mut u = Array2::zeros(dim);
    let mut v = Array2::zeros(dim);
    let mut low = Array2::from_elem(dim, false);
    let full = (side * side) as f64;
    for i in 0..m as i64 {
        for j in 0..n as i64 {
            let (mut sxx, mut sxy, mut syy, mut sxt, mut syt) = (0.0, 0.0, 0.0, 0.0, 0.0);
            let mut valid = 0usize;
            for di in lo..=hi {
                let ii = i + di;
                if ii < 0 || ii >= m as i64 {
                    continue;
                }
                for dj in lo..=hi {
                    let jj = j + dj;
                    if jj < 0 || jj >= n as i64 {
                        continue;
                    }
                    valid += 1;
                    let p = [ii as usize, jj as usize];
                    let mut w = weights[p];
                    if cfg.taper {
                        w *= (-((di * di + dj * dj) as f64) / taper_s2).exp();
                    }
                    let (gx, gy, gt) = (d.ix[p], d.iy[p], d.it[p]);
                    sxx += w * gx * gx;
                    sxy += w * gx * gy;
                    syy += w * gy * gy;
                    sxt += w * gx * gt;
                    syt += w * gy * gt;
                }
            }
            let a = sxx + cfg.reg_tau;
            let c = syy + cfg.reg_tau;
            let det = a * c - sxy * sxy;
            let p = [i as usize, j as usize];
            if det > 0.0 {
                u[p] = (-c * sxt + sxy * syt) / det;
                v[p] = (sxy * sxt - a * syt) / det;
            }
            low[p] = (valid as f64) < 0.25 * full;
        }
    }
    Ok(LayerFlow {
        u,
        v,
        low_confidence: low,
    })
}

/// Metric velocities in m/s.
#[derive(Debug, Clone)]
pub struct MetricFlow {
    /// Each layer's term of the transform, `(delta / f_r) dx H_c gamma_c u_c`.
    pub layers: Vec<(Array2<f64>, Array2<f64>)>,
    /// Sum over layers.
    pub u: Array2<f64>,
    pub v: Array2<f64>,
}

/// `u = (delta / f_r) dx sum_c H_c gamma_c u_c`, likewise for `v` with `dy`.
pub fn to_metric(
    flows: &[LayerFlow],
    gammas: &[Array2<f64>],
    heights: &[f64],
    geom: &PixelGeometry,
    cfg: &WlkConfig,
) -> Result<MetricFlow> {
    if flows.is_empty() || flows.len() != gammas.len() || flows.len() != heights.len() {
        return Err(Error::invalid(format!(
            "need one flow, weight grid and height per layer (got {}, {}, {})",
            flows.len(),
            gammas.len(),
            heights.len()
        )));
    }
    if let Some(h) = heights.iter().find(|h| !(**h > 0.0 && h.is_finite())) {
        return Err(Error::invalid(format!("layer height {h} must be positive")));
    }
    let dim = geom.dim();
    let scale = cfg.vector_scale / cfg.frame_rate;
    let mut layers = Vec::with_capacity(flows.len());
    let mut u = Array2::zeros(dim);
    let mut v = Array2::zeros(dim);
    for ((flow, gamma), &h) in flows.iter().zip(gammas).zip(heights) {
        if flow.u.dim() != dim || gamma.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: flow.u.dim(),
            });
        }
        let lu = &geom.dx * gamma * &flow.u * (scale * h);
        let lv = &geom.dy * gamma * &flow.v * (scale * h);
        u += &lu;
        v += &lv;
        layers.push((lu, lv));
    }
    Ok(MetricFlow { layers, u, v })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Sum of random long-wavelength plane waves, evaluated at (x - sx, y - sy).
    pub(crate) fn wave_texture(rows: usize, cols: usize, seed: u64, shift: (f64, f64)) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves: Vec<(f64, f64, f64, f64)> = (0..8)
            .map(|_| {
                let wl = rng.random_range(24.0..48.0);
                let th = rng.random_range(0.0..std::f64::consts::TAU);
                let k = std::f64::consts::TAU / wl;
                (k * th.cos(), k * th.sin(), rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.5..1.0))
            })
            .collect();
        Array2::from_shape_fn((rows, cols), |(i, j)| {
            let x = j as f64 - shift.0;
            let y = i as f64 - shift.1;
            waves.iter().map(|(kx, ky, ph, a)| a * (kx * x + ky * y + ph).sin()).sum()
        })
    }

    fn median(mut v: Vec<f64>) -> f64 {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    }

    #[test]
    fn identical_frames_have_no_temporal_derivative() {
        let img = wave_texture(20, 20, 1, (0.0, 0.0)) + 300.0;
        let f = ThermalFrame::new(img, 300.0).unwrap();
        let d = derivatives(&f, &f, 1.0).unwrap();
        assert!(d.it.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn ramp_gradient_is_constant() {
        let img = Array2::from_shape_fn((20, 30), |(_, j)| j as f64);
        let d = derivatives_of(&img, &img, 1.0);
        for i in 0..20 {
            for j in 4..26 {
                assert!((d.ix[[i, j]] - 1.0).abs() < 1e-12);
                assert!(d.iy[[i, j]].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bad_sigma_and_dims_rejected() {
        let a = ThermalFrame::new(Array2::from_elem((4, 4), 280.0), 300.0).unwrap();
        let b = ThermalFrame::new(Array2::from_elem((4, 5), 280.0), 300.0).unwrap();
        assert!(derivatives(&a, &a, 0.0).is_err());
        assert!(derivatives(&a, &b, 1.0).is_err());
    }

    #[test]
    fn recovers_unit_translation() {
        let a = wave_texture(60, 80, 5, (0.0, 0.0));
        let b = wave_texture(60, 80, 5, (1.0, 0.0));
        let d = derivatives_of(&a, &b, 1.0);
        let flow = wlk(&d, &Array2::ones((60, 80)), &WlkConfig::default()).unwrap();
        let interior = |g: &Array2<f64>| -> Vec<f64> {
            (8..52).flat_map(|i| (8..72).map(move |j| (i, j))).map(|p| g[[p.0, p.1]]).collect()
        };
        assert!((median(interior(&flow.u)) - 1.0).abs() < 0.1);
        assert!(median(interior(&flow.v)).abs() < 0.1);
    }

    #[test]
    fn static_scene_and_zero_weights_give_zero_flow() {
        let a = wave_texture(20, 20, 2, (0.0, 0.0));
        let d = derivatives_of(&a, &a, 1.0);
        let flow = wlk(&d, &Array2::ones((20, 20)), &WlkConfig::default()).unwrap();
        assert!(flow.u.iter().chain(flow.v.iter()).all(|v| *v == 0.0));

        let b = wave_texture(20, 20, 2, (1.0, 1.0));
        let d = derivatives_of(&a, &b, 1.0);
        let flow = wlk(&d, &Array2::zeros((20, 20)), &WlkConfig::default()).unwrap();
        assert!(flow.u.iter().chain(flow.v.iter()).all(|v| *v == 0.0));
    }

    #[test]
    fn flow_scales_linearly_with_temporal_derivative() {
        let a = wave_texture(20, 20, 3, (0.0, 0.0));
        let b = wave_texture(20, 20, 3, (0.5, -0.3));
        let d = derivatives_of(&a, &b, 1.0);
        let cfg = WlkConfig {
            reg_tau: 0.0,
            ..WlkConfig::default()
        };
        let f1 = wlk(&d, &Array2::ones((20, 20)), &cfg).unwrap();
        let d3 = Derivatives {
            it: &d.it * 3.0,
            ..d.clone()
        };
        let f3 = wlk(&d3, &Array2::ones((20, 20)), &cfg).unwrap();
        for (x, y) in f1.u.iter().zip(f3.u.iter()) {
            assert!((3.0 * x - y).abs() < 1e-9 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn window_must_be_square() {
        let cfg = WlkConfig {
            window_area: 15,
            ..WlkConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn metric_transform_identity_and_linearity() {
        let geom = PixelGeometry::uniform(2, 2, 1.0, 1.0);
        let flow = LayerFlow {
            u: Array2::from_elem((2, 2), 2.0),
            v: Array2::from_elem((2, 2), -1.0),
            low_confidence: Array2::from_elem((2, 2), false),
        };
        let cfg = WlkConfig {
            frame_rate: 1.0,
            vector_scale: 1.0,
            ..WlkConfig::default()
        };
        let g = vec![Array2::ones((2, 2))];
        let m = to_metric(std::slice::from_ref(&flow), &g, &[1.0], &geom, &cfg).unwrap();
        assert!(m.u.iter().all(|v| *v == 2.0));
        assert!(m.v.iter().all(|v| *v == -1.0));
        let m2 = to_metric(std::slice::from_ref(&flow), &g, &[2.0], &geom, &cfg).unwrap();
        assert!(m2.u.iter().all(|v| *v == 4.0));
        let unit_rate = WlkConfig {
            frame_rate: 1.0,
            ..WlkConfig::default()
        };
        let m3 = to_metric(std::slice::from_ref(&flow), &g, &[1.0], &geom, &unit_rate).unwrap();
        assert!(m3.u.iter().all(|v| (*v - 2.0 * 2.29).abs() < 1e-12));
        assert!(to_metric(std::slice::from_ref(&flow), &g, &[], &geom, &cfg).is_err());
        assert!(to_metric(&[flow], &g, &[0.0], &geom, &cfg).is_err());
    }
}
