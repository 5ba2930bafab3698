use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn line_problem(eps: f64, c_reg: f64) -> SvrProblem {
    let xs: Vec<f64> = (0..21).map(|i| i as f64 / 20.0).collect();
    SvrProblem {
        inputs: xs.iter().map(|&x| [x, 0.0]).collect(),
        targets: xs.iter().map(|&x| 2.0 * x + 1.0).collect(),
        weights: vec![1.0; xs.len()],
        c_reg,
        epsilon: eps,
        kernel: KernelSpec::Linear,
    }
}

fn assert_kkt(sol: &DualSolution) {
    let r = kkt_report(sol);
    assert!(r.box_violation <= 1e-12, "{r:?}");
    assert!(r.equality_violation <= 1e-8, "{r:?}");
    assert!(r.complementarity <= 1e-10, "{r:?}");
    assert!(sol.kkt_residual <= 1e-6, "gap {}", sol.kkt_residual);
}

#[test]
fn linear_fit_matches_least_squares() {
    let p = line_problem(0.01, 1e3);
    let sol = solve_wsvm(&p, &SolverSettings::default()).unwrap();
    assert!(sol.converged);
    assert_kkt(&sol);
    let f = &predict(&sol, &p.kernel, &p.inputs, &p.inputs).unwrap()[0];
    // least squares recovers the generating line exactly
    let mae: f64 = f.iter().zip(&p.targets).map(|(a, b)| (a - b).abs()).sum::<f64>() / f.len() as f64;
    assert!(mae <= 0.01 + 1e-3, "mae {mae}");
}

#[test]
fn constant_targets_need_no_support_vectors() {
    let mut p = line_problem(0.1, 10.0);
    p.targets = vec![4.2; p.inputs.len()];
    p.kernel = KernelSpec::Rbf { gamma: 2.0 };
    let sol = solve_wsvm(&p, &SolverSettings::default()).unwrap();
    assert_eq!(sol.support_vectors, 0);
    assert!((sol.bias[0] - 4.2).abs() <= 0.1);
    let f = &predict(&sol, &p.kernel, &p.inputs, &[[0.3, 0.0], [5.0, 5.0]]).unwrap()[0];
    assert!(f.iter().all(|v| (v - 4.2).abs() <= 0.1));
}

#[test]
fn tiny_weight_silences_outlier() {
    let mut p = line_problem(0.01, 1e3);
    p.targets[10] += 50.0;
    p.weights[10] = 1e-9;
    let sol = solve_wsvm(&p, &SolverSettings::default()).unwrap();
    // the outlier sits above the tube, so its dual is pinned at the vanishing cap
    assert!(sol.caps[10] < 1e-7);
    assert_eq!(sol.alpha[10], sol.caps[10]);
    let f = &predict(&sol, &p.kernel, &p.inputs, &[[0.5, 0.0]]).unwrap()[0];
    assert!((f[0] - 2.0).abs() < 0.02, "{}", f[0]);
}

#[test]
fn training_points_inside_tube() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs: Vec<[f64; 2]> = (0..40).map(|_| [rng.random(), rng.random()]).collect();
    let targets: Vec<f64> = inputs.iter().map(|x| (3.0 * x[0]).sin() + x[1] + 0.05 * rng.random::<f64>()).collect();
    let p = SvrProblem {
        weights: (0..40).map(|_| 0.2 + 0.8 * rng.random::<f64>()).collect(),
        inputs,
        targets,
        c_reg: 200.0,
        epsilon: 0.05,
        kernel: KernelSpec::Rbf { gamma: 4.0 },
    };
    let sol = solve_wsvm(&p, &SolverSettings::default()).unwrap();
    assert_kkt(&sol);
    let f = &predict(&sol, &p.kernel, &p.inputs, &p.inputs).unwrap()[0];
    for i in 0..40 {
        let bounded = sol.alpha[i] >= sol.caps[i] || sol.alpha_star[i] >= sol.caps[i];
        if !bounded {
            assert!((f[i] - p.targets[i]).abs() <= p.epsilon + 1e-6, "point {i}");
        }
    }
    for w in sol.objective_trace.windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "{w:?}");
    }
}

#[test]
fn zero_duals_predict_bias() {
    let sol = DualSolution {
        alpha: vec![0.0; 4],
        alpha_star: vec![0.0; 4],
        bias: vec![1.5, -2.0],
        caps: vec![1.0; 4],
        support_vectors: 0,
        objective: 0.0,
        objective_trace: vec![],
        kkt_residual: 0.0,
        iterations: 0,
        converged: true,
        fc: None,
    };
    let out = predict(&sol, &KernelSpec::Linear, &[[0.0, 1.0], [1.0, 0.0]], &[[3.0, 3.0]]).unwrap();
    assert_eq!(out, vec![vec![1.5], vec![-2.0]]);
}

#[test]
fn linear_extrapolation_beyond_hull() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs: Vec<[f64; 2]> = (0..30).map(|_| [0.25 + 0.5 * rng.random::<f64>(), 0.25 + 0.5 * rng.random::<f64>()]).collect();
    let plane = |x: &[f64; 2]| 3.0 * x[0] - 2.0 * x[1] + 0.5;
    let p = SvrProblem {
        targets: inputs.iter().map(plane).collect(),
        weights: vec![1.0; 30],
        inputs,
        c_reg: 1e4,
        epsilon: 1e-4,
        kernel: KernelSpec::Linear,
    };
    let sol = solve_wsvm(&p, &SolverSettings::default()).unwrap();
    let q = [[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]];
    let f = &predict(&sol, &p.kernel, &p.inputs, &q).unwrap()[0];
    for (x, v) in q.iter().zip(f) {
        assert!((v - plane(x)).abs() < 1e-3, "{x:?}: {v} vs {}", plane(x));
    }
}

fn random_mo(seed: u64, n: usize) -> SvrProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<[f64; 2]> = (0..n).map(|_| [rng.random(), rng.random()]).collect();
    let vel: Vec<[f64; 2]> = inputs
        .iter()
        .map(|x| [5.0 * x[1] + rng.random::<f64>(), -3.0 * x[0] + 2.0 + rng.random::<f64>()])
        .collect();
    let weights = (0..n).map(|_| 0.1 + 0.9 * rng.random::<f64>()).collect();
    SvrProblem::multi_output(inputs, &vel, weights, 40.0, 0.1, KernelSpec::Rbf { gamma: 3.0 })
}

#[test]
fn multi_output_decouples() {
    let p = random_mo(6, 30);
    let mo = solve_mo_wsvm(&p, &SolverSettings::default()).unwrap();
    assert_kkt(&mo);
    for o in 0..2 {
        let single = SvrProblem {
            targets: p.targets[o * 30..(o + 1) * 30].to_vec(),
            // single-output caps are z·C/N, the two-output caps z·C/(2N)
            c_reg: p.c_reg / 2.0,
            ..p.clone()
        };
        let s = solve_wsvm(&single, &SolverSettings::default()).unwrap();
        for k in 0..30 {
            assert!((mo.alpha[o * 30 + k] - s.alpha[k]).abs() < 1e-8);
            assert!((mo.alpha_star[o * 30 + k] - s.alpha_star[k]).abs() < 1e-8);
        }
        assert!((mo.bias[o] - s.bias[0]).abs() < 1e-8);
    }
}

#[test]
fn constant_block_has_zero_duals() {
    let mut p = random_mo(7, 25);
    for t in p.targets[..25].iter_mut() {
        *t = -1.0;
    }
    let mo = solve_mo_wsvm(&p, &SolverSettings::default()).unwrap();
    assert!(mo.alpha[..25].iter().chain(&mo.alpha_star[..25]).all(|a| *a == 0.0));
    assert!((mo.bias[0] + 1.0).abs() <= p.epsilon);
}

#[test]
fn extended_weights_sum_to_two() {
    let z = [0.1, 0.3, 0.6];
    let e = extend_weights(&z);
    assert_eq!(e.len(), 6);
    assert!((e.iter().sum::<f64>() - 2.0).abs() < 1e-15);
}

#[test]
fn rejects_bad_problems() {
    let mut p = line_problem(0.1, 1.0);
    p.weights[0] = 0.0;
    assert!(solve_wsvm(&p, &SolverSettings::default()).is_err());
    let p = line_problem(0.1, 1.0);
    assert!(solve_mo_wsvm(&p, &SolverSettings::default()).is_err());
    let mut p = line_problem(0.1, 1.0);
    p.inputs.truncate(1);
    p.targets.truncate(1);
    p.weights.truncate(1);
    assert!(solve_wsvm(&p, &SolverSettings::default()).is_err());
}

pub(crate) fn unit_grid(rows: usize, cols: usize) -> Vec<[f64; 2]> {
    let s = 1.0 / (rows.max(cols) - 1) as f64;
    (0..rows * cols).map(|p| [(p % cols) as f64 * s, (p / cols) as f64 * s]).collect()
}

fn field_problem(
    rows: usize,
    cols: usize,
    n: usize,
    seed: u64,
    field: impl Fn(&[f64; 2]) -> [f64; 2],
    kernel: KernelSpec,
) -> (SvrProblem, Vec<[f64; 2]>) {
    let grid = unit_grid(rows, cols);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<[f64; 2]> = (0..n).map(|_| grid[rng.random_range(0..grid.len())]).collect();
    let vel: Vec<[f64; 2]> = inputs.iter().map(&field).collect();
    (SvrProblem::multi_output(inputs, &vel, vec![1.0; n], 38.5, 0.05, kernel), grid)
}

fn grid_residuals(sol: &DualSolution, p: &SvrProblem, grid: &[[f64; 2]], ops: &FlowConstraintOps) -> (f64, f64) {
    let f = predict(sol, &p.kernel, &p.inputs, grid).unwrap();
    ops.residuals(Array1::from(f[0].clone()).view(), Array1::from(f[1].clone()).view()).unwrap()
}

#[test]
fn constant_field_needs_no_penalty() {
    let (p, grid) = field_problem(8, 10, 30, 1, |_| [2.0, -1.0], KernelSpec::Linear);
    let ops = FlowConstraintOps::new(8, 10).unwrap();
    let fc = solve_mo_wsvm_fc(&p, &ops, &grid, &FcSettings::default(), &SolverSettings::default()).unwrap();
    let mo = solve_mo_wsvm(&p, &SolverSettings::default()).unwrap();
    let report = fc.fc.as_ref().unwrap();
    assert!(report.satisfied);
    assert_eq!(report.rho, 0.0);
    for (a, b) in fc.alpha.iter().zip(&mo.alpha) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn source_field_divergence_suppressed() {
    let (p, grid) = field_problem(12, 16, 60, 2, |x| [x[0], x[1]], KernelSpec::Linear);
    let ops = FlowConstraintOps::new(12, 16).unwrap();
    let mo = solve_mo_wsvm(&p, &SolverSettings::default()).unwrap();
    let fc = solve_mo_wsvm_fc(&p, &ops, &grid, &FcSettings::default(), &SolverSettings::default()).unwrap();
    let (d0, c0) = grid_residuals(&mo, &p, &grid, &ops);
    let (d1, c1) = grid_residuals(&fc, &p, &grid, &ops);
    let report = fc.fc.as_ref().unwrap();
    assert!(report.satisfied, "{report:?}");
    assert!(d0 > 1e-2, "unconstrained divergence {d0}");
    assert!(d1 <= 1e-3 * d0, "{d1} vs {d0}");
    assert!(c1 <= 1e-3 * c0.max(d0), "{c1} vs {c0}");
    // reported residuals agree with the grid evaluation
    assert!((report.div - d1).abs() <= 1e-9 + 1e-6 * d1);
    let pen: Vec<f64> = report.schedule.iter().map(|s| s.div + s.curl).collect();
    for w in pen.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-6) + 1e-12, "{pen:?}");
    }
}

#[test]
fn vortex_residuals_suppressed_with_rbf() {
    let vortex = |x: &[f64; 2]| {
        let (dx, dy) = (x[0] - 0.5, x[1] - 0.35);
        let g = 10.0 * (-(dx * dx + dy * dy) / 0.05).exp();
        [-dy * g, dx * g]
    };
    let (p, grid) = field_problem(12, 16, 80, 3, vortex, KernelSpec::Rbf { gamma: 8.0 });
    let ops = FlowConstraintOps::new(12, 16).unwrap();
    let mo = solve_mo_wsvm(&p, &SolverSettings::default()).unwrap();
    let fc = solve_mo_wsvm_fc(&p, &ops, &grid, &FcSettings::default(), &SolverSettings::default()).unwrap();
    let (d0, c0) = grid_residuals(&mo, &p, &grid, &ops);
    let (d1, c1) = grid_residuals(&fc, &p, &grid, &ops);
    assert!(c0 > 1e-2 && d0 > 1e-2);
    assert!(c1 <= 1e-3 * c0 && d1 <= 1e-3 * d0, "{c1}/{c0} {d1}/{d0}");
}

#[test]
fn per_component_fit_matches_single_solves() {
    let p = random_mo(8, 20);
    let both = fit_two_outputs(SolverKind::Wsvm, &p, None, &SolverSettings::default()).unwrap();
    let single = SvrProblem {
        targets: p.targets[20..].to_vec(),
        ..p.clone()
    };
    let v = solve_wsvm(&single, &SolverSettings::default()).unwrap();
    assert_eq!(both.coefficients(1), v.coefficients(0));
    assert_eq!(both.bias[1], v.bias[0]);
    assert!(fit_two_outputs(SolverKind::MoWsvmFc, &p, None, &SolverSettings::default()).is_err());
    assert_eq!(SolverKind::parse("MO-WSVM-FC").unwrap(), SolverKind::MoWsvmFc);
    assert!(SolverKind::parse("svm").is_err());
}
