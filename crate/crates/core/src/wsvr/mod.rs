//! Weighted ε-insensitive support vector regression: single output, two
//! independent outputs, and two outputs with divergence/vorticity penalties.

mod fc;
mod kernel;
mod smo;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

pub use fc::{FcReport, FcSettings, FcStep, FlowConstraintOps};
pub use kernel::{gram, gram_mo, KernelSpec};

use crate::error::{Error, Result};
use kernel::block_diag;
use smo::{Qp, QpSettings};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    /// Maximal violating pair gap at exit, relative to `max(1, max H_ii)`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 5_000_000,
        }
    }
}

/// Training data and hyperparameters. `targets` holds N values for a single
/// output or 2N (u block then v block) for two outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SvrProblem {
    pub inputs: Vec<[f64; 2]>,
    pub targets: Vec<f64>,
    /// Per-sample weights in (0, 1].
    pub weights: Vec<f64>,
    pub c_reg: f64,
    pub epsilon: f64,
    pub kernel: KernelSpec,
}

impl SvrProblem {
    pub fn n_samples(&self) -> usize {
        self.inputs.len()
    }

    /// Two-output problem from per-sample `(u, v)` targets.
    pub fn multi_output(
        inputs: Vec<[f64; 2]>,
        velocities: &[[f64; 2]],
        weights: Vec<f64>,
        c_reg: f64,
        epsilon: f64,
        kernel: KernelSpec,
    ) -> Self {
        let targets = velocities.iter().map(|v| v[0]).chain(velocities.iter().map(|v| v[1])).collect();
        Self {
            inputs,
            targets,
            weights,
            c_reg,
            epsilon,
            kernel,
        }
    }

    fn validate(&self, outputs: usize) -> Result<()> {
        let n = self.inputs.len();
        if n < 2 {
            return Err(Error::invalid(format!("regression needs at least 2 samples, got {n}")));
        }
        if self.targets.len() != outputs * n {
            return Err(Error::invalid(format!(
                "expected {} targets for {n} samples and {outputs} output(s), got {}",
                outputs * n,
                self.targets.len()
            )));
        }
        if self.weights.len() != n {
            return Err(Error::invalid(format!("expected {n} weights, got {}", self.weights.len())));
        }
        if self.weights.iter().any(|z| !(*z > 0.0 && *z <= 1.0)) {
            return Err(Error::invalid("sample weights must lie in (0, 1]"));
        }
        if self.targets.iter().chain(self.inputs.iter().flatten()).any(|x| !x.is_finite()) {
            return Err(Error::invalid("inputs and targets must be finite"));
        }
        if !(self.c_reg > 0.0 && self.c_reg.is_finite()) {
            return Err(Error::invalid(format!("complexity must be positive, got {}", self.c_reg)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!("tube width must be positive, got {}", self.epsilon)));
        }
        self.kernel.validate()
    }
}

/// Weights duplicated across both outputs.
pub fn extend_weights(z: &[f64]) -> Vec<f64> {
    z.iter().chain(z.iter()).copied().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualSolution {
    pub alpha: Vec<f64>,
    pub alpha_star: Vec<f64>,
    /// One bias per output.
    pub bias: Vec<f64>,
    /// Box cap of every dual variable pair.
    pub caps: Vec<f64>,
    pub support_vectors: usize,
    pub objective: f64,
    /// Dual objective sampled once per sweep over the variables.
    pub objective_trace: Vec<f64>,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub fc: Option<FcReport>,
}

impl DualSolution {
    pub fn n_outputs(&self) -> usize {
        self.bias.len()
    }

    /// `α − α*` for one output block.
    pub fn coefficients(&self, output: usize) -> Vec<f64> {
        let n = self.alpha.len() / self.n_outputs();
        (output * n..(output + 1) * n).map(|k| self.alpha[k] - self.alpha_star[k]).collect()
    }
}

/// Box, equality and complementarity violations of a solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktReport {
    pub box_violation: f64,
    pub equality_violation: f64,
    pub complementarity: f64,
}

pub fn kkt_report(sol: &DualSolution) -> KktReport {
    let mut box_violation = 0.0f64;
    let mut complementarity = 0.0f64;
    for ((a, s), c) in sol.alpha.iter().zip(&sol.alpha_star).zip(&sol.caps) {
        box_violation = box_violation.max(-a).max(-s).max(a - c).max(s - c);
        complementarity = complementarity.max(a * s);
    }
    let equality_violation = (0..sol.n_outputs())
        .map(|o| sol.coefficients(o).iter().sum::<f64>().abs())
        .fold(0.0, f64::max);
    KktReport {
        box_violation,
        equality_violation,
        complementarity,
    }
}

fn finish(res: smo::QpResult, caps: Vec<f64>, fc: Option<FcReport>) -> DualSolution {
    let support_vectors = res
        .alpha
        .iter()
        .zip(&res.alpha_star)
        .filter(|(a, s)| **a > 0.0 || **s > 0.0)
        .count();
    DualSolution {
        support_vectors,
        kkt_residual: res.gap,
        alpha: res.alpha,
        alpha_star: res.alpha_star,
        bias: res.bias,
        caps,
        objective: res.objective,
        objective_trace: res.trace,
        iterations: res.iterations,
        converged: res.converged,
        fc,
    }
}

fn settings(s: &SolverSettings) -> QpSettings {
    QpSettings {
        tol: s.tol,
        max_iter: s.max_iter,
    }
}

/// Single-output weighted SVR with caps `z_i·C/N`.
pub fn solve_wsvm(problem: &SvrProblem, solver: &SolverSettings) -> Result<DualSolution> {
    problem.validate(1)?;
    let n = problem.n_samples();
    let k = gram(&problem.inputs, &problem.inputs, &problem.kernel)?;
    let caps: Vec<f64> = problem.weights.iter().map(|z| z * problem.c_reg / n as f64).collect();
    let blocks = [0..n];
    let qp = Qp {
        h: k.view(),
        y: &problem.targets,
        caps: &caps,
        eps: problem.epsilon,
        blocks: &blocks,
    };
    let res = smo::solve(&qp, settings(solver), None);
    if !res.converged {
        log::warn!("single-output SVR stopped at iteration limit, gap {:.3e}", res.gap);
    }
    Ok(finish(res, caps, None))
}

fn mo_caps(problem: &SvrProblem) -> Vec<f64> {
    let n2 = 2.0 * problem.n_samples() as f64;
    extend_weights(&problem.weights)
        .into_iter()
        .map(|z| z * problem.c_reg / n2)
        .collect()
}

/// Two-output weighted SVR over the block-diagonal Gram, caps `z̃_i·C/(2N)`.
pub fn solve_mo_wsvm(problem: &SvrProblem, solver: &SolverSettings) -> Result<DualSolution> {
    problem.validate(2)?;
    let n = problem.n_samples();
    let h = gram_mo(&problem.inputs, &problem.kernel)?;
    let caps = mo_caps(problem);
    let blocks = [0..n, n..2 * n];
    let qp = Qp {
        h: h.view(),
        y: &problem.targets,
        caps: &caps,
        eps: problem.epsilon,
        blocks: &blocks,
    };
    let res = smo::solve(&qp, settings(solver), None);
    if !res.converged {
        log::warn!("multi-output SVR stopped at iteration limit, gap {:.3e}", res.gap);
    }
    Ok(finish(res, caps, None))
}

/// Grid-difference images of the training kernel columns, `Δx·K(grid, X)`
/// and `Δy·K(grid, X)`.
struct FcOperators {
    a_u: Array2<f64>,
    a_v: Array2<f64>,
}

impl FcOperators {
    fn new(problem: &SvrProblem, ops: &FlowConstraintOps, grid: &[[f64; 2]]) -> Result<Self> {
        if grid.len() != ops.len() {
            return Err(Error::DimensionMismatch {
                expected: (ops.rows, ops.cols),
                got: (grid.len(), 1),
            });
        }
        let kg = gram(grid, &problem.inputs, &problem.kernel)?;
        Ok(Self {
            a_u: ops.dx_rows(&kg)?,
            a_v: ops.dy_rows(&kg)?,
        })
    }

    fn residuals(&self, sol: &DualSolution) -> (f64, f64) {
        let a = self.a_u.dot(&Array1::from(sol.coefficients(0)));
        let b = self.a_v.dot(&Array1::from(sol.coefficients(1)));
        let d = &a + &b;
        let c = &a - &b;
        (d.dot(&d), c.dot(&c))
    }
}

/// Two-output weighted SVR whose dual objective carries the penalty
/// `ρ(‖u_x + v_y‖² + ‖u_x − v_y‖²)` over the extrapolated grid field. `ρ`
/// grows geometrically, warm-starting each solve, until both squared
/// residuals fall below `fc_tol` or `rho_max` is passed.
pub fn solve_mo_wsvm_fc(
    problem: &SvrProblem,
    ops: &FlowConstraintOps,
    grid: &[[f64; 2]],
    fc: &FcSettings,
    solver: &SolverSettings,
) -> Result<DualSolution> {
    problem.validate(2)?;
    fc.validate()?;
    let n = problem.n_samples();
    let k = gram(&problem.inputs, &problem.inputs, &problem.kernel)?;
    let fops = FcOperators::new(problem, ops, grid)?;
    let p_u = fops.a_u.t().dot(&fops.a_u);
    let p_v = fops.a_v.t().dot(&fops.a_v);
    let caps = mo_caps(problem);
    let blocks = [0..n, n..2 * n];

    let run = |rho: f64, warm: Option<&DualSolution>| -> DualSolution {
        let h = block_diag(&(&k + &(4.0 * rho * &p_u)), &(&k + &(4.0 * rho * &p_v)));
        let qp = Qp {
            h: h.view(),
            y: &problem.targets,
            caps: &caps,
            eps: problem.epsilon,
            blocks: &blocks,
        };
        let res = smo::solve(
            &qp,
            settings(solver),
            warm.map(|w| (w.alpha.as_slice(), w.alpha_star.as_slice())),
        );
        if !res.converged {
            log::warn!("penalized SVR at rho {rho:e} stopped at iteration limit, gap {:.3e}", res.gap);
        }
        finish(res, caps.clone(), None)
    };

    let mut sol = run(0.0, None);
    let (div, curl) = fops.residuals(&sol);
    let mut schedule = vec![FcStep { rho: 0.0, div, curl }];
    let mut rho = 0.0;
    let mut satisfied = div <= fc.fc_tol && curl <= fc.fc_tol;
    let mut next = fc.rho0;
    while !satisfied && next <= fc.rho_max {
        rho = next;
        sol = run(rho, Some(&sol));
        let (div, curl) = fops.residuals(&sol);
        schedule.push(FcStep { rho, div, curl });
        satisfied = div <= fc.fc_tol && curl <= fc.fc_tol;
        next *= fc.growth;
    }
    let last = *schedule.last().expect("at least one step");
    if !satisfied {
        log::warn!(
            "flow constraints unmet at rho {rho:e}: div {:.3e}, curl {:.3e}",
            last.div,
            last.curl
        );
    }
    sol.fc = Some(FcReport {
        rho,
        div: last.div,
        curl: last.curl,
        schedule,
        satisfied,
    });
    Ok(sol)
}

/// `f(x) = Σ (α_i − α*_i) k(x_i, x) + b` for every output; one vector per output.
pub fn predict(
    solution: &DualSolution,
    kernel: &KernelSpec,
    x_train: &[[f64; 2]],
    x_query: &[[f64; 2]],
) -> Result<Vec<Vec<f64>>> {
    let outputs = solution.n_outputs();
    if solution.alpha.len() != outputs * x_train.len() {
        return Err(Error::invalid(format!(
            "solution has {} dual pairs, expected {} for {} training points",
            solution.alpha.len(),
            outputs * x_train.len(),
            x_train.len()
        )));
    }
    let kq = gram(x_query, x_train, kernel)?;
    Ok((0..outputs)
        .map(|o| {
            let beta = Array1::from(solution.coefficients(o));
            (kq.dot(&beta) + solution.bias[o]).to_vec()
        })
        .collect())
}

/// The three regression variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverKind {
    /// Independent single-output fits per component.
    Wsvm,
    MoWsvm,
    MoWsvmFc,
}

impl SolverKind {
    pub fn name(&self) -> &'static str {
        match self {
            SolverKind::Wsvm => "wsvm",
            SolverKind::MoWsvm => "mo-wsvm",
            SolverKind::MoWsvmFc => "mo-wsvm-fc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "wsvm" => Ok(SolverKind::Wsvm),
            "mo-wsvm" | "mo_wsvm" => Ok(SolverKind::MoWsvm),
            "mo-wsvm-fc" | "mo_wsvm_fc" | "fc" => Ok(SolverKind::MoWsvmFc),
            other => Err(Error::invalid(format!("unknown solver '{other}'"))),
        }
    }
}

/// Grid over which flow constraints are enforced.
#[derive(Debug, Clone, Copy)]
pub struct FcGrid<'a> {
    pub ops: &'a FlowConstraintOps,
    pub coords: &'a [[f64; 2]],
    pub settings: &'a FcSettings,
}

/// Fits a two-output problem with the chosen variant; the result always has
/// a u block and a v block.
pub fn fit_two_outputs(
    kind: SolverKind,
    problem: &SvrProblem,
    fc: Option<FcGrid<'_>>,
    solver: &SolverSettings,
) -> Result<DualSolution> {
    match kind {
        SolverKind::MoWsvm => solve_mo_wsvm(problem, solver),
        SolverKind::MoWsvmFc => {
            let fc = fc.ok_or_else(|| Error::invalid("flow-constrained fit needs a grid"))?;
            solve_mo_wsvm_fc(problem, fc.ops, fc.coords, fc.settings, solver)
        }
        SolverKind::Wsvm => {
            problem.validate(2)?;
            let n = problem.n_samples();
            let mut parts = Vec::with_capacity(2);
            for o in 0..2 {
                let single = SvrProblem {
                    targets: problem.targets[o * n..(o + 1) * n].to_vec(),
                    ..problem.clone()
                };
                parts.push(solve_wsvm(&single, solver)?);
            }
            let (u, v) = (&parts[0], &parts[1]);
            let mut trace = u.objective_trace.clone();
            trace.extend(&v.objective_trace);
            Ok(DualSolution {
                alpha: [u.alpha.as_slice(), v.alpha.as_slice()].concat(),
                alpha_star: [u.alpha_star.as_slice(), v.alpha_star.as_slice()].concat(),
                bias: vec![u.bias[0], v.bias[0]],
                caps: [u.caps.as_slice(), v.caps.as_slice()].concat(),
                support_vectors: u.support_vectors + v.support_vectors,
                objective: u.objective + v.objective,
                objective_trace: trace,
                kkt_residual: u.kkt_residual.max(v.kkt_residual),
                iterations: u.iterations + v.iterations,
                converged: u.converged && v.converged,
                fc: None,
            })
        }
    }
}

#[cfg(test)]
mod tests;
