use ndarray::Array2;

use super::ThermalFrame;
use crate::error::{Error, Result};

/// Ground footprint of each pixel on a horizontal plane one meter above the
/// camera, so that multiplying by a cloud height gives meters per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGeometry {
    pub dx: Array2<f64>,
    pub dy: Array2<f64>,
    pub diag_fov: f64,
}

impl PixelGeometry {
    /// Uniform footprint, mostly useful for tests and precomputed inputs.
    pub fn uniform(rows: usize, cols: usize, dx: f64, dy: f64) -> Self {
        Self {
            dx: Array2::from_elem((rows, cols), dx),
            dy: Array2::from_elem((rows, cols), dy),
            diag_fov: 0.0,
        }
    }

    pub fn from_grids(dx: Array2<f64>, dy: Array2<f64>) -> Result<Self> {
        if dx.dim() != dy.dim() {
            return Err(Error::DimensionMismatch {
                expected: dx.dim(),
                got: dy.dim(),
            });
        }
        if dx.iter().chain(dy.iter()).any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid("pixel footprints must be positive and finite"));
        }
        Ok(Self { dx, dy, diag_fov: 0.0 })
    }

    pub fn dim(&self) -> (usize, usize) {
        self.dx.dim()
    }
}

/// Focal length in pixels of a pinhole camera with the given diagonal FOV.
pub fn focal_length_px(rows: usize, cols: usize, diag_fov: f64) -> f64 {
    let half_diag = ((rows * rows + cols * cols) as f64).sqrt() / 2.0;
    half_diag / (diag_fov / 2.0).tan()
}

// Rays flatter than this are clamped so footprints stay finite near the horizon.
const MIN_RAY_ELEVATION_SIN: f64 = 0.035;

/// Pinhole camera aimed at the sun, projected onto a flat cloud plane.
pub fn pixel_geometry(frame: &ThermalFrame, diag_fov: f64) -> Result<PixelGeometry> {
    let (rows, cols) = frame.dim();
    geometry_for(rows, cols, frame.sun_elevation, frame.sun_azimuth, diag_fov)
}

pub fn geometry_for(
    rows: usize,
    cols: usize,
    elevation: f64,
    azimuth: f64,
    diag_fov: f64,
) -> Result<PixelGeometry> {
    if !(diag_fov > 1e-6 && diag_fov < std::f64::consts::PI) {
        return Err(Error::invalid(format!("diagonal FOV {diag_fov} rad is degenerate")));
    }
    if !elevation.is_finite() || !azimuth.is_finite() {
        return Err(Error::invalid("sun angles must be finite"));
    }
    let f = focal_length_px(rows, cols, diag_fov);
    // East-north-up world frame.
    let axis = [
        elevation.cos() * azimuth.sin(),
        elevation.cos() * azimuth.cos(),
        elevation.sin(),
    ];
    let right = [azimuth.cos(), -azimuth.sin(), 0.0];
    let down = cross(axis, right);

    let project = |x: f64, y: f64| -> [f64; 2] {
        let dir = [
            axis[0] + x / f * right[0] + y / f * down[0],
            axis[1] + x / f * right[1] + y / f * down[1],
            axis[2] + x / f * right[2] + y / f * down[2],
        ];
        let z = dir[2].max(MIN_RAY_ELEVATION_SIN);
        [dir[0] / z, dir[1] / z]
    };

    let cx = (cols as f64 - 1.0) / 2.0;
    let cy = (rows as f64 - 1.0) / 2.0;
    let mut dx = Array2::zeros((rows, cols));
    let mut dy = Array2::zeros((rows, cols));
    for i in 0..rows {
        for j in 0..cols {
            let x = j as f64 - cx;
            let y = i as f64 - cy;
            dx[[i, j]] = dist(project(x - 0.5, y), project(x + 0.5, y));
            dy[[i, j]] = dist(project(x, y - 0.5), project(x, y + 0.5));
        }
    }
    Ok(PixelGeometry { dx, dy, diag_fov })
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn zenith_center_pixel_matches_pinhole() {
        let g = geometry_for(60, 80, FRAC_PI_2, 0.0, 60f64.to_radians()).unwrap();
        // half diagonal 50 px, f = 50 / tan(30 deg) = 86.6025 px, footprint 1/f
        let expected = 1.0 / 86.602_540_378_443_86;
        assert!((g.dx[[30, 40]] - expected).abs() < 1e-9);
        assert!((g.dy[[30, 40]] - expected).abs() < 1e-9);
        // flat plane parallel to the sensor: footprint is uniform
        assert!(g.dx.iter().all(|v| (v - expected).abs() < 1e-9));
    }

    #[test]
    fn degenerate_fov_rejected() {
        assert!(geometry_for(60, 80, FRAC_PI_2, 0.0, 0.0).is_err());
        assert!(geometry_for(60, 80, FRAC_PI_2, 0.0, std::f64::consts::PI).is_err());
    }

    #[test]
    fn tilted_camera_symmetric_about_center_column() {
        let g = geometry_for(60, 80, 50f64.to_radians(), 0.3, 60f64.to_radians()).unwrap();
        for i in 0..60 {
            for j in 0..40 {
                let a = g.dx[[i, j]];
                let b = g.dx[[i, 79 - j]];
                assert!((a - b).abs() < 1e-9 * a.max(1.0), "row {i} col {j}: {a} vs {b}");
            }
        }
        // rows pointing closer to the horizon see a larger footprint
        assert!(g.dy[[59, 40]] != g.dy[[0, 40]]);
        assert!(g.dx.iter().chain(g.dy.iter()).all(|v| *v > 0.0));
    }

    #[test]
    fn precomputed_grids_validated() {
        let ok = PixelGeometry::from_grids(Array2::from_elem((2, 2), 0.1), Array2::from_elem((2, 2), 0.1));
        assert!(ok.is_ok());
        let bad = PixelGeometry::from_grids(Array2::from_elem((2, 2), 0.1), Array2::from_elem((2, 2), -1.0));
        assert!(bad.is_err());
    }
}
