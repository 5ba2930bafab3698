//! Full-frame extrapolation of a fitted regression, grid divergence and
//! vorticity residuals, and stream/potential functions.

mod isolines;

use ndarray::{Array1, Array2, Axis};

pub use isolines::{extract_isolines, IsolineSet};

use crate::error::{Error, Result};
use crate::imaging::PixelGeometry;
use crate::wsvr::{predict, DualSolution, FlowConstraintOps, KernelSpec};

/// Scale mapping pixel (column, row) positions into the unit range used as
/// regression inputs.
pub fn coord_scale(rows: usize, cols: usize) -> f64 {
    1.0 / (rows.max(cols).max(2) - 1) as f64
}

/// Pixel (column, row) positions to regression inputs.
pub fn normalize_coords(points: &[[f64; 2]], rows: usize, cols: usize) -> Vec<[f64; 2]> {
    let s = coord_scale(rows, cols);
    points.iter().map(|p| [p[0] * s, p[1] * s]).collect()
}

/// Regression inputs of every pixel, row-major.
pub fn grid_coords(rows: usize, cols: usize) -> Vec<[f64; 2]> {
    let s = coord_scale(rows, cols);
    (0..rows * cols)
        .map(|p| [(p % cols) as f64 * s, (p / cols) as f64 * s])
        .collect()
}

/// Extrapolated velocity grids of one layer, in m/s.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub u: Array2<f64>,
    pub v: Array2<f64>,
    /// Layer height in meters.
    pub height: f64,
}

impl GridField {
    pub fn dim(&self) -> (usize, usize) {
        self.u.dim()
    }

    pub fn mean_speed(&self) -> f64 {
        let n = self.u.len() as f64;
        self.u.iter().zip(self.v.iter()).map(|(u, v)| u.hypot(*v)).sum::<f64>() / n
    }

    /// Direction of the mean vector, radians from the column axis.
    pub fn mean_direction(&self) -> f64 {
        self.v.mean().unwrap_or(0.0).atan2(self.u.mean().unwrap_or(0.0))
    }
}

/// Evaluates a two-output solution at every pixel. `train` are the
/// normalized sample inputs the solution was fitted on.
pub fn extrapolate(
    solution: &DualSolution,
    kernel: &KernelSpec,
    train: &[[f64; 2]],
    rows: usize,
    cols: usize,
    height: f64,
) -> Result<GridField> {
    if solution.n_outputs() != 2 {
        return Err(Error::invalid("extrapolation needs a two-output solution"));
    }
    let mut out = predict(solution, kernel, train, &grid_coords(rows, cols))?.into_iter();
    let to_grid = |v: Vec<f64>| Array2::from_shape_vec((rows, cols), v).expect("grid length");
    Ok(GridField {
        u: to_grid(out.next().unwrap()),
        v: to_grid(out.next().unwrap()),
        height,
    })
}

/// Per-cell `u_x + v_y` (div) and `u_x − v_y` (curl) and their squared norms.
#[derive(Debug, Clone, PartialEq)]
pub struct DivCurl {
    pub div: Array2<f64>,
    pub curl: Array2<f64>,
    pub div_norm: f64,
    pub curl_norm: f64,
}

pub fn div_curl(field: &GridField, ops: &FlowConstraintOps) -> Result<DivCurl> {
    let dim = field.dim();
    if dim != (ops.rows, ops.cols) || field.v.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: (ops.rows, ops.cols),
            got: dim,
        });
    }
    let u = Array1::from_iter(field.u.iter().copied());
    let v = Array1::from_iter(field.v.iter().copied());
    let (d, c) = ops.residual_grids(u.view(), v.view())?;
    Ok(DivCurl {
        div_norm: d.dot(&d),
        curl_norm: c.dot(&c),
        div: d.into_shape_with_order(dim).expect("grid length"),
        curl: c.into_shape_with_order(dim).expect("grid length"),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamFunction {
    /// Stream function values.
    pub phi: Array2<f64>,
    /// Potential values.
    pub psi: Array2<f64>,
}

/// Trapezoid cumulative integral along `axis`, zero at index 0.
fn cumtrapz(f: &Array2<f64>, axis: Axis) -> Array2<f64> {
    let mut out = Array2::zeros(f.dim());
    for (src, mut dst) in f.lanes(axis).into_iter().zip(out.lanes_mut(axis)) {
        let mut acc = 0.0;
        for k in 1..src.len() {
            acc += 0.5 * (src[k - 1] + src[k]);
            dst[k] = acc;
        }
    }
    out
}

/// `Φ = (H/2)[∫ u·Δy over rows − ∫ v·Δx over columns]` and
/// `Ψ = (H/2)[∫ u·Δx over columns + ∫ v·Δy over rows]`, both zero at the origin.
pub fn stream_potential(field: &GridField, geom: &PixelGeometry) -> Result<StreamFunction> {
    let dim = field.dim();
    if geom.dim() != dim || field.v.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: geom.dim(),
        });
    }
    if field.u.iter().chain(field.v.iter()).any(|x| !x.is_finite()) || !field.height.is_finite() {
        return Err(Error::invalid("velocity field must be finite"));
    }
    let half_h = field.height / 2.0;
    let u_dy = cumtrapz(&(&field.u * &geom.dy), Axis(0));
    let v_dx = cumtrapz(&(&field.v * &geom.dx), Axis(1));
    let u_dx = cumtrapz(&(&field.u * &geom.dx), Axis(1));
    let v_dy = cumtrapz(&(&field.v * &geom.dy), Axis(0));
    Ok(StreamFunction {
        phi: (&u_dy - &v_dx) * half_h,
        psi: (&u_dx + &v_dy) * half_h,
    })
}

/// Largest departure from 90° (degrees) between the gradients of two grids,
/// over interior cells where both gradients exceed `min_grad` times their
/// grid's largest gradient.
pub fn orthogonality_deviation(a: &Array2<f64>, b: &Array2<f64>, min_grad: f64) -> f64 {
    let (m, n) = a.dim();
    let grad = |g: &Array2<f64>, i: usize, j: usize| {
        [
            (g[[i, j + 1]] - g[[i, j - 1]]) / 2.0,
            (g[[i + 1, j]] - g[[i - 1, j]]) / 2.0,
        ]
    };
    let mut ga = Vec::new();
    let mut gb = Vec::new();
    for i in 1..m.saturating_sub(1) {
        for j in 1..n.saturating_sub(1) {
            ga.push(grad(a, i, j));
            gb.push(grad(b, i, j));
        }
    }
    let norm = |g: &[f64; 2]| g[0].hypot(g[1]);
    let max_a = ga.iter().map(norm).fold(0.0, f64::max);
    let max_b = gb.iter().map(norm).fold(0.0, f64::max);
    let mut worst = 0.0f64;
    for (x, y) in ga.iter().zip(&gb) {
        let (nx, ny) = (norm(x), norm(y));
        if nx <= min_grad * max_a || ny <= min_grad * max_b || nx == 0.0 || ny == 0.0 {
            continue;
        }
        let cos = ((x[0] * y[0] + x[1] * y[1]) / (nx * ny)).clamp(-1.0, 1.0);
        worst = worst.max((cos.acos().to_degrees() - 90.0).abs());
    }
    worst
}
