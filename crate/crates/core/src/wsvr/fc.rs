//! Shift-difference operators on row-major grids and the penalty they induce
//! on the multi-output dual.

use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::error::{Error, Result};

/// Forward differences along columns (`Δx`) and rows (`Δy`) of an `rows × cols`
/// grid flattened row-major. Differences that would leave the grid are zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlowConstraintOps {
    pub rows: usize,
    pub cols: usize,
}

impl FlowConstraintOps {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows < 2 || cols < 2 {
            return Err(Error::invalid(format!("flow constraints need at least a 2x2 grid, got {rows}x{cols}")));
        }
        Ok(Self { rows, cols })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, n: usize) -> Result<()> {
        if n != self.len() {
            return Err(Error::DimensionMismatch {
                expected: (self.rows, self.cols),
                got: (n, 1),
            });
        }
        Ok(())
    }

    /// `Δx` applied to every column of `m` (rows of `m` are grid cells).
    pub fn dx_rows(&self, m: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(m.nrows())?;
        let mut out = Array2::zeros(m.dim());
        for i in 0..self.rows {
            for j in 0..self.cols - 1 {
                let p = i * self.cols + j;
                let d = &m.row(p + 1) - &m.row(p);
                out.row_mut(p).assign(&d);
            }
        }
        Ok(out)
    }

    /// `Δy` applied to every column of `m`.
    pub fn dy_rows(&self, m: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(m.nrows())?;
        let mut out = Array2::zeros(m.dim());
        for i in 0..self.rows - 1 {
            for j in 0..self.cols {
                let p = i * self.cols + j;
                let d = &m.row(p + self.cols) - &m.row(p);
                out.row_mut(p).assign(&d);
            }
        }
        Ok(out)
    }

    pub fn dx(&self, u: ArrayView1<f64>) -> Result<Array1<f64>> {
        let m = u.to_owned().insert_axis(Axis(1));
        Ok(self.dx_rows(&m)?.remove_axis(Axis(1)))
    }

    pub fn dy(&self, v: ArrayView1<f64>) -> Result<Array1<f64>> {
        let m = v.to_owned().insert_axis(Axis(1));
        Ok(self.dy_rows(&m)?.remove_axis(Axis(1)))
    }

    /// Per-cell `u_x + v_y` and `u_x − v_y` for row-major flattened grids.
    pub fn residual_grids(&self, u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
        let ux = self.dx(u)?;
        let vy = self.dy(v)?;
        Ok((&ux + &vy, &ux - &vy))
    }

    /// Squared norms of the two residual grids.
    pub fn residuals(&self, u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<(f64, f64)> {
        let (d, c) = self.residual_grids(u, v)?;
        Ok((d.dot(&d), c.dot(&c)))
    }

    /// Dense `Δx` as a matrix acting on column vectors; used by tests as an oracle.
    pub fn dense_dx(&self) -> Array2<f64> {
        let n = self.len();
        let mut m = Array2::zeros((n, n));
        for i in 0..self.rows {
            for j in 0..self.cols - 1 {
                let p = i * self.cols + j;
                m[[p, p]] = -1.0;
                m[[p, p + 1]] = 1.0;
            }
        }
        m
    }

    pub fn dense_dy(&self) -> Array2<f64> {
        let n = self.len();
        let mut m = Array2::zeros((n, n));
        for i in 0..self.rows - 1 {
            for j in 0..self.cols {
                let p = i * self.cols + j;
                m[[p, p]] = -1.0;
                m[[p, p + self.cols]] = 1.0;
            }
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FcSettings {
    pub rho0: f64,
    pub rho_max: f64,
    pub growth: f64,
    /// Target for both squared residual norms.
    pub fc_tol: f64,
}

impl Default for FcSettings {
    fn default() -> Self {
        Self {
            rho0: 1.0,
            rho_max: 1e12,
            growth: 10.0,
            fc_tol: 1e-6,
        }
    }
}

impl FcSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho0 > 0.0 && self.rho_max >= self.rho0 && self.growth > 1.0 && self.fc_tol > 0.0) {
            return Err(Error::invalid("flow constraint schedule needs rho0 > 0, rho_max >= rho0, growth > 1, fc_tol > 0"));
        }
        Ok(())
    }
}

/// One step of the penalty schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FcStep {
    pub rho: f64,
    pub div: f64,
    pub curl: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcReport {
    pub rho: f64,
    /// Squared norm of `u_x + v_y` over the grid.
    pub div: f64,
    /// Squared norm of `u_x − v_y` over the grid.
    pub curl: f64,
    pub schedule: Vec<FcStep>,
    /// Both residuals reached `fc_tol`.
    pub satisfied: bool,
}
