//! Thermal frames, temperature-to-height mapping and pixel geometry.

mod geometry;
mod synth;

pub use geometry::{pixel_geometry, PixelGeometry};
pub use synth::{synth_scene, LayerSpec, SceneFrame, SceneSpec, SyntheticScene};

use ndarray::Array2;

use crate::error::{Error, Result};

pub const DEFAULT_ROWS: usize = 60;
pub const DEFAULT_COLS: usize = 80;

/// One radiometric thermal image plus the ambient metadata recorded with it.
///
/// Temperatures are held in kelvin; the on-disk format stores centi-kelvin.
#[derive(Debug, Clone, PartialEq)]
pub struct ThermalFrame {
    temps: Array2<f64>,
    pub frame_index: usize,
    /// Seconds since the epoch.
    pub timestamp: f64,
    /// Sun elevation in radians.
    pub sun_elevation: f64,
    /// Sun azimuth in radians.
    pub sun_azimuth: f64,
    /// Ground-level air temperature in kelvin.
    pub air_temp: f64,
}

impl ThermalFrame {
    pub fn new(temps_kelvin: Array2<f64>, air_temp: f64) -> Result<Self> {
        let (m, n) = temps_kelvin.dim();
        if m < 2 || n < 2 {
            return Err(Error::invalid(format!("frame must be at least 2x2, got {m}x{n}")));
        }
        if let Some(bad) = temps_kelvin.iter().find(|t| !t.is_finite() || **t <= 0.0) {
            return Err(Error::invalid(format!("non-physical temperature {bad}")));
        }
        if !air_temp.is_finite() || air_temp <= 0.0 {
            return Err(Error::invalid(format!("non-physical air temperature {air_temp}")));
        }
        Ok(Self {
            temps: temps_kelvin,
            frame_index: 0,
            timestamp: 0.0,
            sun_elevation: std::f64::consts::FRAC_PI_2,
            sun_azimuth: 0.0,
            air_temp,
        })
    }

    pub fn from_centikelvin(temps_ck: &Array2<f64>, air_temp: f64) -> Result<Self> {
        Self::new(temps_ck.mapv(|t| t / 100.0), air_temp)
    }

    pub fn with_index(mut self, frame_index: usize, timestamp: f64) -> Self {
        self.frame_index = frame_index;
        self.timestamp = timestamp;
        self
    }

    pub fn with_sun(mut self, elevation: f64, azimuth: f64) -> Self {
        self.sun_elevation = elevation;
        self.sun_azimuth = azimuth;
        self
    }

    /// Temperatures in kelvin.
    pub fn temps(&self) -> &Array2<f64> {
        &self.temps
    }

    pub fn centikelvin(&self) -> Array2<f64> {
        self.temps.mapv(|t| t * 100.0)
    }

    pub fn dim(&self) -> (usize, usize) {
        self.temps.dim()
    }

    pub(crate) fn check_same_dim(&self, other: &ThermalFrame) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(())
    }
}

/// Lapse-rate model mapping pixel temperature to cloud height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeightModel {
    /// Kelvin per meter.
    pub lapse_rate: f64,
    pub height_floor: f64,
    pub height_ceiling: f64,
}

impl Default for HeightModel {
    fn default() -> Self {
        Self {
            lapse_rate: 0.0065,
            height_floor: 0.0,
            height_ceiling: 12_000.0,
        }
    }
}

impl HeightModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.lapse_rate > 0.0 && self.lapse_rate.is_finite()) {
            return Err(Error::invalid("lapse rate must be positive"));
        }
        if !(self.height_floor >= 0.0 && self.height_floor < self.height_ceiling) {
            return Err(Error::invalid("height range must satisfy 0 <= floor < ceiling"));
        }
        Ok(())
    }

    /// Height in meters of a single temperature reading in kelvin.
    pub fn height_of(&self, temp_k: f64, air_temp: f64) -> f64 {
        ((air_temp - temp_k) / self.lapse_rate).clamp(self.height_floor, self.height_ceiling)
    }

    /// Inverse of [`HeightModel::height_of`] inside the clamp range.
    pub fn temp_at(&self, height_m: f64, air_temp: f64) -> f64 {
        air_temp - self.lapse_rate * height_m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeightField {
    pub heights: Array2<f64>,
}

/// Binary cloud membership: `true` marks a cloud pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudMask {
    pub bits: Array2<bool>,
}

impl CloudMask {
    pub fn new(bits: Array2<bool>) -> Self {
        Self { bits }
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            bits: Array2::from_elem((rows, cols), true),
        }
    }

    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            bits: Array2::from_elem((rows, cols), false),
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.bits.dim()
    }
}

/// Per-pixel cloud height, `H = clamp((T_air - T) / lapse_rate, floor, ceiling)`.
pub fn height_map(frame: &ThermalFrame, model: &HeightModel) -> Result<HeightField> {
    model.validate()?;
    if frame.temps.iter().any(|t| !t.is_finite()) || !frame.air_temp.is_finite() {
        return Err(Error::invalid("non-finite temperature"));
    }
    let air = frame.air_temp;
    Ok(HeightField {
        heights: frame.temps.mapv(|t| model.height_of(t, air)),
    })
}

/// Cloud mask used when none is supplied: pixels whose height falls strictly
/// inside the clamp range.
pub fn default_cloud_mask(heights: &HeightField, model: &HeightModel) -> CloudMask {
    CloudMask::new(
        heights
            .heights
            .mapv(|h| h > model.height_floor && h < model.height_ceiling),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn frame(temps_ck: Array2<f64>, air: f64) -> ThermalFrame {
        ThermalFrame::from_centikelvin(&temps_ck, air).unwrap()
    }

    #[test]
    fn zero_temperature_difference_hits_floor() {
        let f = frame(Array2::from_elem((2, 2), 30000.0), 300.0);
        let h = height_map(&f, &HeightModel::default()).unwrap();
        assert!(h.heights.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lapse_rate_inversion() {
        let f = frame(Array2::from_elem((2, 3), 29350.0), 300.0);
        let h = height_map(&f, &HeightModel::default()).unwrap();
        for &v in h.heights.iter() {
            assert!((v - 1000.0).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn nan_temperature_rejected() {
        let temps = array![[30000.0, f64::NAN], [30000.0, 30000.0]];
        assert!(ThermalFrame::from_centikelvin(&temps, 300.0).is_err());
    }

    #[test]
    fn too_small_frame_rejected() {
        assert!(ThermalFrame::new(Array2::from_elem((1, 5), 280.0), 300.0).is_err());
    }

    #[test]
    fn heights_clamped_to_ceiling() {
        let f = frame(Array2::from_elem((2, 2), 15000.0), 300.0);
        let h = height_map(&f, &HeightModel::default()).unwrap();
        assert!(h.heights.iter().all(|&v| v == 12_000.0));
    }

    #[test]
    fn invalid_model_rejected() {
        let f = frame(Array2::from_elem((2, 2), 29000.0), 300.0);
        let bad = HeightModel {
            lapse_rate: 0.0,
            ..HeightModel::default()
        };
        assert!(height_map(&f, &bad).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn height_monotone_and_clamped(a in 150.0f64..330.0, b in 150.0f64..330.0, air in 260.0f64..320.0) {
                let model = HeightModel::default();
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                let h_lo = model.height_of(lo, air);
                let h_hi = model.height_of(hi, air);
                prop_assert!(h_hi <= h_lo);
                prop_assert!((model.height_floor..=model.height_ceiling).contains(&h_lo));
                prop_assert!((model.height_floor..=model.height_ceiling).contains(&h_hi));
            }
        }
    }
}
