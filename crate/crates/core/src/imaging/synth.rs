//! Synthetic multi-layer thermal scenes with known ground truth.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::geometry::focal_length_px;
use super::{CloudMask, HeightModel, ThermalFrame};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LayerSpec {
    /// Wind velocity in m/s, (along columns, along rows).
    pub velocity: [f64; 2],
    pub height_m: f64,
    /// Amplitude in kelvin of the temperature texture inside the cloud.
    pub temp_offset: f64,
    pub seed: u64,
    /// Target fraction of the frame covered by this layer.
    pub coverage: f64,
    /// Gaussian blob radius in pixels.
    pub blob_scale: f64,
}

impl Default for LayerSpec {
    fn default() -> Self {
        Self {
            velocity: [8.0, 0.0],
            height_m: 3000.0,
            temp_offset: 6.0,
            seed: 1,
            coverage: 0.45,
            blob_scale: 7.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub rows: usize,
    pub cols: usize,
    pub n_frames: usize,
    /// Seconds between frames.
    pub frame_interval: f64,
    /// The `f_r` divisor of the pixel-to-metric transform.
    pub frame_rate: f64,
    /// The `delta` velocity scale of the pixel-to-metric transform.
    pub velocity_scale: f64,
    pub diag_fov_deg: f64,
    pub air_temp: f64,
    pub sky_temp: f64,
    pub lapse_rate: f64,
    pub start_timestamp: f64,
    pub layers: Vec<LayerSpec>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            rows: super::DEFAULT_ROWS,
            cols: super::DEFAULT_COLS,
            n_frames: 21,
            frame_interval: 15.0,
            frame_rate: 15.0,
            velocity_scale: 2.29,
            diag_fov_deg: 60.0,
            air_temp: 300.0,
            sky_temp: 240.0,
            lapse_rate: 0.0065,
            start_timestamp: 1_600_000_000.0,
            layers: vec![LayerSpec::default()],
        }
    }
}

impl SceneSpec {
    /// Footprint per meter of height of the zenith-pointing synthetic camera.
    pub fn pixel_footprint(&self) -> f64 {
        1.0 / focal_length_px(self.rows, self.cols, self.diag_fov_deg.to_radians())
    }

    /// Pixel displacement per frame that the pixel-to-metric transform maps
    /// back onto `layer.velocity`.
    pub fn pixel_velocity(&self, layer: &LayerSpec) -> [f64; 2] {
        let per_px = self.velocity_scale / self.frame_rate * self.pixel_footprint() * layer.height_m;
        [layer.velocity[0] / per_px, layer.velocity[1] / per_px]
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows < 2 || self.cols < 2 {
            return Err(Error::invalid("scene must be at least 2x2"));
        }
        if self.n_frames < 2 {
            return Err(Error::invalid("scene needs at least two frames"));
        }
        if self.layers.len() > 2 {
            return Err(Error::invalid("at most two cloud layers are supported"));
        }
        if !(self.frame_rate > 0.0 && self.velocity_scale > 0.0 && self.lapse_rate > 0.0) {
            return Err(Error::invalid("frame rate, velocity scale and lapse rate must be positive"));
        }
        if !(self.diag_fov_deg > 0.0 && self.diag_fov_deg < 180.0) {
            return Err(Error::invalid("diagonal FOV must lie in (0, 180) degrees"));
        }
        for l in &self.layers {
            if !(l.height_m > 0.0) || !(0.0..=1.0).contains(&l.coverage) || !(l.blob_scale > 0.0) {
                return Err(Error::invalid("layer needs positive height and blob scale, coverage in [0,1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SceneFrame {
    pub frame: ThermalFrame,
    pub mask: CloudMask,
    /// True layer velocities in m/s, same order as the spec's layers.
    pub velocities: Vec<[f64; 2]>,
    pub heights: Vec<f64>,
    /// Whether enough of each layer is visible to be tracked.
    pub visible: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub frames: Vec<SceneFrame>,
    /// Set when layer temperature ranges overlap enough to be ambiguous.
    pub overlapping_temperatures: bool,
}

struct Blob {
    x: f64,
    y: f64,
    inv_two_s2: f64,
    amp: f64,
}

struct LayerTexture {
    blobs: Vec<Blob>,
    threshold: f64,
    peak: f64,
    shift: [f64; 2],
}

impl LayerTexture {
    fn build(spec: &SceneSpec, layer: &LayerSpec) -> Self {
        let shift = spec.pixel_velocity(layer);
        let mut rng = ChaCha8Rng::seed_from_u64(layer.seed);
        let travel_x = shift[0].abs() * spec.n_frames as f64;
        let travel_y = shift[1].abs() * spec.n_frames as f64;
        let pad = 3.0 * layer.blob_scale;
        let (x0, x1) = (-pad - travel_x, spec.cols as f64 + pad + travel_x);
        let (y0, y1) = (-pad - travel_y, spec.rows as f64 + pad + travel_y);
        let area = (x1 - x0) * (y1 - y0);
        let count = (area / (layer.blob_scale * layer.blob_scale * 2.5)).ceil() as usize;
        let blobs = (0..count)
            .map(|_| {
                let s = layer.blob_scale * rng.random_range(0.7..1.4);
                Blob {
                    x: rng.random_range(x0..x1),
                    y: rng.random_range(y0..y1),
                    inv_two_s2: 1.0 / (2.0 * s * s),
                    amp: rng.random_range(0.5..1.0),
                }
            })
            .collect();
        let mut tex = LayerTexture {
            blobs,
            threshold: 0.0,
            peak: 1.0,
            shift,
        };
        // Coverage threshold and peak are fixed from frame 0 so the texture
        // translates rigidly.
        let mut values: Vec<f64> = (0..spec.rows)
            .flat_map(|i| (0..spec.cols).map(move |j| (i, j)))
            .map(|(i, j)| tex.raw(j as f64, i as f64))
            .collect();
        values.sort_by(f64::total_cmp);
        let q = ((1.0 - layer.coverage) * (values.len() - 1) as f64).round() as usize;
        tex.threshold = values[q.min(values.len() - 1)];
        tex.peak = values[values.len() - 1].max(tex.threshold + 1e-6);
        tex
    }

    fn raw(&self, x: f64, y: f64) -> f64 {
        self.blobs
            .iter()
            .map(|b| {
                let d2 = (x - b.x).powi(2) + (y - b.y).powi(2);
                b.amp * (-d2 * b.inv_two_s2).exp()
            })
            .sum()
    }

    /// (opacity, interior texture in [0,1]) at pixel (row, col) of frame k.
    fn sample(&self, row: usize, col: usize, k: usize) -> (f64, f64) {
        let x = col as f64 - self.shift[0] * k as f64;
        let y = row as f64 - self.shift[1] * k as f64;
        let t = self.raw(x, y);
        let span = self.peak - self.threshold;
        let edge = 0.6 * span;
        let opacity = smoothstep((t - self.threshold + 0.5 * edge) / edge);
        let interior = ((t - self.threshold) / span).clamp(0.0, 1.0);
        (opacity, interior)
    }
}

fn smoothstep(x: f64) -> f64 {
    let t = x.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

// Opacity above which a pixel is labelled cloud in the ground-truth mask.
const MASK_OPACITY: f64 = 0.9;

/// Renders advected blob-textured cloud layers over a uniform sky. Lower
/// layers occlude higher ones.
pub fn synth_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let model = HeightModel {
        lapse_rate: spec.lapse_rate,
        ..HeightModel::default()
    };

    // Draw order: highest first so lower layers paint over.
    let mut order: Vec<usize> = (0..spec.layers.len()).collect();
    order.sort_by(|&a, &b| spec.layers[b].height_m.total_cmp(&spec.layers[a].height_m));
    let textures: Vec<LayerTexture> = spec.layers.iter().map(|l| LayerTexture::build(spec, l)).collect();

    let overlapping_temperatures = spec.layers.len() == 2 && {
        let (a, b) = (&spec.layers[0], &spec.layers[1]);
        let gap = (model.temp_at(a.height_m, spec.air_temp) - model.temp_at(b.height_m, spec.air_temp)).abs();
        gap <= a.temp_offset + b.temp_offset
    };

    let min_visible = (spec.rows * spec.cols / 50).max(4);
    let mut frames = Vec::with_capacity(spec.n_frames);
    for k in 0..spec.n_frames {
        let mut temps = Array2::from_elem((spec.rows, spec.cols), spec.sky_temp);
        let mut mask = Array2::from_elem((spec.rows, spec.cols), false);
        let mut visible_px = vec![0usize; spec.layers.len()];
        for i in 0..spec.rows {
            for j in 0..spec.cols {
                let mut t = spec.sky_temp;
                let mut top: Option<usize> = None;
                for &c in &order {
                    let layer = &spec.layers[c];
                    let (opacity, interior) = textures[c].sample(i, j, k);
                    if opacity <= 0.0 {
                        continue;
                    }
                    let base = model.temp_at(layer.height_m, spec.air_temp);
                    let cloud_t = base + layer.temp_offset * (interior - 0.5);
                    t = opacity * cloud_t + (1.0 - opacity) * t;
                    if opacity >= MASK_OPACITY {
                        top = Some(c);
                    }
                }
                temps[[i, j]] = t;
                if let Some(c) = top {
                    mask[[i, j]] = true;
                    visible_px[c] += 1;
                }
            }
        }
        let frame = ThermalFrame::new(temps, spec.air_temp)?
            .with_index(k, spec.start_timestamp + k as f64 * spec.frame_interval)
            .with_sun(std::f64::consts::FRAC_PI_2, 0.0);
        frames.push(SceneFrame {
            frame,
            mask: CloudMask::new(mask),
            velocities: spec.layers.iter().map(|l| l.velocity).collect(),
            heights: spec.layers.iter().map(|l| l.height_m).collect(),
            visible: visible_px.iter().map(|&n| n >= min_visible).collect(),
        });
    }
    Ok(SyntheticScene {
        frames,
        overlapping_temperatures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_px_per_frame_spec() -> SceneSpec {
        let mut spec = SceneSpec {
            n_frames: 3,
            ..SceneSpec::default()
        };
        let per_px = spec.velocity_scale / spec.frame_rate * spec.pixel_footprint() * 3000.0;
        spec.layers = vec![LayerSpec {
            velocity: [per_px, 0.0],
            height_m: 3000.0,
            ..LayerSpec::default()
        }];
        spec
    }

    #[test]
    fn pure_translation_by_one_column() {
        let spec = one_px_per_frame_spec();
        let shift = spec.pixel_velocity(&spec.layers[0]);
        assert!((shift[0] - 1.0).abs() < 1e-12 && shift[1] == 0.0);
        let scene = synth_scene(&spec).unwrap();
        let a = scene.frames[0].frame.temps();
        let b = scene.frames[1].frame.temps();
        for i in 0..spec.rows {
            for j in 1..spec.cols {
                assert!((b[[i, j]] - a[[i, j - 1]]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cross_correlation_peaks_at_shift() {
        let mut spec = one_px_per_frame_spec();
        spec.layers[0].velocity[0] *= 2.0;
        spec.layers[0].velocity[1] = -spec.layers[0].velocity[0] / 2.0;
        let scene = synth_scene(&spec).unwrap();
        let a = scene.frames[0].frame.temps();
        let b = scene.frames[1].frame.temps();
        let mut best = (f64::NEG_INFINITY, 0i64, 0i64);
        let ma = a.mean().unwrap();
        let mb = b.mean().unwrap();
        for dy in -3i64..=3 {
            for dx in -3i64..=3 {
                let mut s = 0.0;
                for i in 3..spec.rows as i64 - 3 {
                    for j in 3..spec.cols as i64 - 3 {
                        s += (a[[i as usize, j as usize]] - ma) * (b[[(i + dy) as usize, (j + dx) as usize]] - mb);
                    }
                }
                if s > best.0 {
                    best = (s, dx, dy);
                }
            }
        }
        assert_eq!((best.1, best.2), (2, -1));
    }

    #[test]
    fn two_layers_give_bimodal_histogram() {
        let spec = SceneSpec {
            n_frames: 2,
            layers: vec![
                LayerSpec {
                    height_m: 8000.0,
                    coverage: 0.6,
                    seed: 3,
                    ..LayerSpec::default()
                },
                LayerSpec {
                    height_m: 2500.0,
                    coverage: 0.3,
                    seed: 4,
                    ..LayerSpec::default()
                },
            ],
            ..SceneSpec::default()
        };
        let scene = synth_scene(&spec).unwrap();
        assert!(!scene.overlapping_temperatures);
        let temps = scene.frames[0].frame.temps();
        let upper = 300.0 - 0.0065 * 8000.0;
        let lower = 300.0 - 0.0065 * 2500.0;
        let near = |c: f64| temps.iter().filter(|t| (**t - c).abs() < 2.0).count();
        let between = temps.iter().filter(|t| (**t - (upper + lower) / 2.0).abs() < 2.0).count();
        assert!(near(upper) > 5 * between.max(1));
        assert!(near(lower) > 5 * between.max(1));
    }

    #[test]
    fn empty_scene_is_constant_sky() {
        let spec = SceneSpec {
            n_frames: 2,
            layers: vec![],
            ..SceneSpec::default()
        };
        let scene = synth_scene(&spec).unwrap();
        for f in &scene.frames {
            assert_eq!(f.mask.count(), 0);
            assert!(f.frame.temps().iter().all(|t| *t == spec.sky_temp));
        }
    }

    #[test]
    fn overlapping_layers_flagged() {
        let spec = SceneSpec {
            n_frames: 2,
            layers: vec![
                LayerSpec {
                    height_m: 3000.0,
                    temp_offset: 5.0,
                    ..LayerSpec::default()
                },
                LayerSpec {
                    height_m: 3500.0,
                    temp_offset: 5.0,
                    seed: 9,
                    ..LayerSpec::default()
                },
            ],
            ..SceneSpec::default()
        };
        assert!(synth_scene(&spec).unwrap().overlapping_temperatures);
    }
}
