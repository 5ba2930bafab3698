//! Sequential minimal optimization for the ε-insensitive regression dual
//!
//! ```text
//! min  ½ βᵀHβ − yᵀβ + ε·1ᵀ(α + α*)    β = α − α*
//! s.t. Σ_{i∈block} β_i = 0 for every block,  0 ≤ α_i, α*_i ≤ c_i
//! ```
//!
//! The 2n variables are laid out as `[α; α*]` with signs `+1`/`−1`. Working
//! pairs are chosen inside one block (second-order selection), so blocks
//! with a block-diagonal `H` evolve exactly as independent problems.

use std::ops::Range;

use ndarray::ArrayView2;

const TAU: f64 = 1e-12;
/// Sweeps between Newton polishing steps.
const POLISH_SWEEPS: usize = 1;

pub(crate) struct Qp<'a> {
    pub h: ArrayView2<'a, f64>,
    pub y: &'a [f64],
    pub caps: &'a [f64],
    pub eps: f64,
    pub blocks: &'a [Range<usize>],
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct QpSettings {
    /// Stopping threshold on the maximal violating pair gap, relative to
    /// `max(1, max H_ii)`.
    pub tol: f64,
    pub max_iter: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct QpResult {
    pub alpha: Vec<f64>,
    pub alpha_star: Vec<f64>,
    pub bias: Vec<f64>,
    pub objective: f64,
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Final maximal violating pair gap, relative like `tol`.
    pub gap: f64,
}

struct State<'a, 'q> {
    qp: &'q Qp<'a>,
    n: usize,
    a: Vec<f64>,
    /// `Hβ`
    g: Vec<f64>,
}

impl State<'_, '_> {
    #[inline]
    fn sign(&self, t: usize) -> f64 {
        if t < self.n {
            1.0
        } else {
            -1.0
        }
    }

    #[inline]
    fn point(&self, t: usize) -> usize {
        if t < self.n {
            t
        } else {
            t - self.n
        }
    }

    #[inline]
    fn cap(&self, t: usize) -> f64 {
        self.qp.caps[self.point(t)]
    }

    #[inline]
    fn grad(&self, t: usize) -> f64 {
        let k = self.point(t);
        if t < self.n {
            self.g[k] - self.qp.y[k] + self.qp.eps
        } else {
            -self.g[k] + self.qp.y[k] + self.qp.eps
        }
    }

    #[inline]
    fn at_upper(&self, t: usize) -> bool {
        self.a[t] >= self.cap(t)
    }

    #[inline]
    fn at_lower(&self, t: usize) -> bool {
        self.a[t] <= 0.0
    }

    fn beta(&self, k: usize) -> f64 {
        self.a[k] - self.a[k + self.n]
    }

    fn recompute_gradient(&mut self) {
        let beta: Vec<f64> = (0..self.n).map(|k| self.beta(k)).collect();
        for i in 0..self.n {
            let row = self.qp.h.row(i);
            self.g[i] = row.iter().zip(&beta).map(|(h, b)| h * b).sum();
        }
    }

    fn objective(&self) -> f64 {
        let mut obj = 0.0;
        for k in 0..self.n {
            let b = self.beta(k);
            obj += 0.5 * b * self.g[k] - self.qp.y[k] * b + self.qp.eps * (self.a[k] + self.a[k + self.n]);
        }
        obj
    }

    fn block_vars(&self, r: &Range<usize>) -> impl Iterator<Item = usize> + '_ {
        let n = self.n;
        r.clone().chain(r.start + n..r.end + n)
    }

    /// Second-order working pair in one block and its violation gap.
    fn select(&self, r: &Range<usize>) -> Option<(usize, usize, f64)> {
        let mut gmax = f64::NEG_INFINITY;
        let mut i = None;
        for t in self.block_vars(r) {
            let up = if self.sign(t) > 0.0 { !self.at_upper(t) } else { !self.at_lower(t) };
            if up {
                let v = -self.sign(t) * self.grad(t);
                if v >= gmax {
                    gmax = v;
                    i = Some(t);
                }
            }
        }
        let i = i?;
        let ki = self.point(i);
        let hii = self.qp.h[[ki, ki]];
        let mut gmax2 = f64::NEG_INFINITY;
        let mut best = f64::INFINITY;
        let mut j = None;
        for t in self.block_vars(r) {
            let low = if self.sign(t) > 0.0 { !self.at_lower(t) } else { !self.at_upper(t) };
            if !low {
                continue;
            }
            let sg = self.sign(t) * self.grad(t);
            gmax2 = gmax2.max(sg);
            let diff = gmax + sg;
            if diff > 0.0 {
                let kt = self.point(t);
                let quad = hii + self.qp.h[[kt, kt]] - 2.0 * self.qp.h[[ki, kt]];
                let quad = if quad > 0.0 { quad } else { TAU };
                let obj = -diff * diff / quad;
                if obj <= best {
                    best = obj;
                    j = Some(t);
                }
            }
        }
        let gap = gmax + gmax2;
        Some((i, j?, gap))
    }

    fn update(&mut self, i: usize, j: usize) {
        let (si, sj) = (self.sign(i), self.sign(j));
        let (ki, kj) = (self.point(i), self.point(j));
        let h = &self.qp.h;
        let (qii, qjj) = (h[[ki, ki]], h[[kj, kj]]);
        let qij = si * sj * h[[ki, kj]];
        let (ci, cj) = (self.cap(i), self.cap(j));
        let (gi, gj) = (self.grad(i), self.grad(j));
        let (old_i, old_j) = (self.a[i], self.a[j]);
        let (mut ai, mut aj) = (old_i, old_j);
        if si != sj {
            let quad = (qii + qjj + 2.0 * qij).max(TAU);
            let delta = (-gi - gj) / quad;
            let diff = ai - aj;
            ai += delta;
            aj += delta;
            if diff > 0.0 {
                if aj < 0.0 {
                    aj = 0.0;
                    ai = diff;
                }
            } else if ai < 0.0 {
                ai = 0.0;
                aj = -diff;
            }
            if diff > ci - cj {
                if ai > ci {
                    ai = ci;
                    aj = ci - diff;
                }
            } else if aj > cj {
                aj = cj;
                ai = cj + diff;
            }
        } else {
            let quad = (qii + qjj - 2.0 * qij).max(TAU);
            let delta = (gi - gj) / quad;
            let sum = ai + aj;
            ai -= delta;
            aj += delta;
            if sum > ci {
                if ai > ci {
                    ai = ci;
                    aj = sum - ci;
                }
            } else if aj < 0.0 {
                aj = 0.0;
                ai = sum;
            }
            if sum > cj {
                if aj > cj {
                    aj = cj;
                    ai = sum - cj;
                }
            } else if ai < 0.0 {
                ai = 0.0;
                aj = sum;
            }
        }
        self.a[i] = ai;
        self.a[j] = aj;
        let db_i = si * (ai - old_i);
        let db_j = sj * (aj - old_j);
        for (k, db) in [(ki, db_i), (kj, db_j)] {
            if db != 0.0 {
                let col = h.column(k);
                for (g, hk) in self.g.iter_mut().zip(col.iter()) {
                    *g += hk * db;
                }
            }
        }
    }

    /// Newton step on the face where every free `β_k` keeps its sign: solves
    /// the equality-constrained stationarity system on the free points and
    /// moves toward it until the first bound is hit. Returns `None` when no
    /// progress was made, otherwise whether the full step was taken.
    fn newton_step(&mut self, r: &Range<usize>) -> Option<bool> {
        let n = self.n;
        for k in r.clone() {
            let m = self.a[k].min(self.a[k + n]);
            if m > 0.0 {
                self.a[k] -= m;
                self.a[k + n] -= m;
            }
        }
        let free: Vec<usize> = r
            .clone()
            .filter(|&k| {
                let b = self.beta(k).abs();
                b > 0.0 && b < self.qp.caps[k]
            })
            .collect();
        if free.is_empty() {
            return None;
        }
        let f = free.len();
        let h = &self.qp.h;
        // [H_FF 1; 1ᵀ 0] [β_F; b] = [y_F − εσ_F − H_FB β_B; −Σ β_B]
        let mut m = vec![0.0; (f + 1) * (f + 1)];
        let mut rhs = vec![0.0; f + 1];
        let mut sum_bound = 0.0;
        for k in r.clone() {
            if !free.contains(&k) {
                sum_bound += self.beta(k);
            }
        }
        // A small ridge keeps duplicated inputs from making the system singular;
        // the objective check below rejects a poor step.
        let ridge = 1e-10 * free.iter().map(|&k| h[[k, k]]).fold(0.0, f64::max);
        for (p, &kp) in free.iter().enumerate() {
            for (q, &kq) in free.iter().enumerate() {
                m[p * (f + 1) + q] = h[[kp, kq]];
            }
            m[p * (f + 1) + p] += ridge;
            m[p * (f + 1) + f] = 1.0;
            m[f * (f + 1) + p] = 1.0;
            let sigma = self.beta(kp).signum();
            let free_part: f64 = free.iter().map(|&kq| h[[kp, kq]] * self.beta(kq)).sum();
            let bound_part = self.g[kp] - free_part;
            rhs[p] = self.qp.y[kp] - self.qp.eps * sigma - bound_part;
        }
        rhs[f] = -sum_bound;
        let sol = solve_dense(&mut m, &mut rhs, f + 1)?;
        let dir: Vec<f64> = free.iter().enumerate().map(|(p, &k)| sol[p] - self.beta(k)).collect();
        let mut t = 1.0f64;
        let mut hit = None;
        for (p, &k) in free.iter().enumerate() {
            let b = self.beta(k);
            let d = dir[p];
            if d == 0.0 {
                continue;
            }
            let limit = if b.signum() * d < 0.0 {
                b.abs() / d.abs()
            } else {
                (self.qp.caps[k] - b.abs()) / d.abs()
            };
            if limit < t {
                t = limit;
                hit = Some(p);
            }
        }
        if t <= 0.0 {
            return None;
        }
        let before = self.objective();
        let saved_a = self.a.clone();
        let saved_g = self.g.clone();
        for (p, &k) in free.iter().enumerate() {
            let sign = self.beta(k).signum();
            let mut nb = self.beta(k) + t * dir[p];
            if hit == Some(p) {
                nb = if sign * dir[p] < 0.0 { 0.0 } else { sign * self.qp.caps[k] };
            }
            let nb = nb.clamp(-self.qp.caps[k], self.qp.caps[k]);
            let db = nb - self.beta(k);
            if nb >= 0.0 {
                self.a[k] = nb;
                self.a[k + n] = 0.0;
            } else {
                self.a[k] = 0.0;
                self.a[k + n] = -nb;
            }
            if db != 0.0 {
                for (g, hk) in self.g.iter_mut().zip(h.column(k).iter()) {
                    *g += hk * db;
                }
            }
        }
        if self.objective() > before {
            self.a = saved_a;
            self.g = saved_g;
            return None;
        }
        Some(hit.is_none())
    }

    /// Repeats Newton steps while each one stops at a newly hit bound.
    fn polish(&mut self, r: &Range<usize>) {
        for _ in 0..r.len() {
            match self.newton_step(r) {
                Some(false) => continue,
                _ => break,
            }
        }
    }

    /// Free-variable average of `-s·G`, falling back to the feasible midpoint.
    fn bias(&self, r: &Range<usize>) -> f64 {
        let mut sum = 0.0;
        let mut free = 0usize;
        let mut ub = f64::INFINITY;
        let mut lb = f64::NEG_INFINITY;
        for t in self.block_vars(r) {
            let sg = self.sign(t) * self.grad(t);
            if self.at_upper(t) {
                if self.sign(t) < 0.0 {
                    ub = ub.min(sg);
                } else {
                    lb = lb.max(sg);
                }
            } else if self.at_lower(t) {
                if self.sign(t) > 0.0 {
                    ub = ub.min(sg);
                } else {
                    lb = lb.max(sg);
                }
            } else {
                sum += sg;
                free += 1;
            }
        }
        let rho = if free > 0 {
            sum / free as f64
        } else if ub.is_finite() && lb.is_finite() {
            (ub + lb) / 2.0
        } else if ub.is_finite() {
            ub
        } else if lb.is_finite() {
            lb
        } else {
            0.0
        };
        -rho
    }
}

pub(crate) fn solve(qp: &Qp<'_>, settings: QpSettings, warm: Option<(&[f64], &[f64])>) -> QpResult {
    let n = qp.y.len();
    let mut a = vec![0.0; 2 * n];
    if let Some((al, as_)) = warm {
        for k in 0..n {
            a[k] = al[k].clamp(0.0, qp.caps[k]);
            a[k + n] = as_[k].clamp(0.0, qp.caps[k]);
        }
    }
    let mut st = State {
        qp,
        n,
        a,
        g: vec![0.0; n],
    };
    st.recompute_gradient();

    let scale = (0..n).map(|k| qp.h[[k, k]]).fold(1.0f64, f64::max);
    let tol = settings.tol * scale;
    let sweep = (2 * n).max(1);
    let mut trace = vec![st.objective()];
    let mut iterations = 0;
    let mut converged = false;
    let mut gap = f64::INFINITY;
    // Refreshes guard against drift in the incrementally updated gradient.
    let mut refreshes = 0;
    let mut block_steps = vec![0usize; qp.blocks.len()];
    while iterations < settings.max_iter {
        let mut pick: Option<(usize, usize, f64, usize)> = None;
        let mut worst = f64::NEG_INFINITY;
        for (b, r) in qp.blocks.iter().enumerate() {
            if let Some((i, j, g)) = st.select(r) {
                worst = worst.max(g);
                if g >= tol && pick.is_none_or(|p| g > p.2) {
                    pick = Some((i, j, g, b));
                }
            }
        }
        gap = worst.max(0.0);
        let Some((i, j, _, b)) = pick else {
            st.recompute_gradient();
            let still = qp
                .blocks
                .iter()
                .filter_map(|r| st.select(r))
                .any(|(_, _, g)| g >= tol);
            if still && refreshes < 3 {
                refreshes += 1;
                continue;
            }
            converged = !still;
            break;
        };
        st.update(i, j);
        iterations += 1;
        // Polishing follows each block's own step count so that decoupled
        // blocks follow the same path as when solved alone.
        block_steps[b] += 1;
        let block_len = qp.blocks[b].len();
        if block_steps[b].is_multiple_of((POLISH_SWEEPS * 2 * block_len).max(1)) {
            st.polish(&qp.blocks[b]);
        }
        if iterations % sweep == 0 {
            trace.push(st.objective());
        }
    }
    st.recompute_gradient();

    let bias = qp.blocks.iter().map(|r| st.bias(r)).collect();
    // Both sides of one point cannot be active at the optimum; removing the
    // common part keeps β and lowers the ε term.
    for k in 0..n {
        let m = st.a[k].min(st.a[k + n]);
        if m > 0.0 {
            st.a[k] -= m;
            st.a[k + n] -= m;
        }
    }
    let objective = st.objective();
    trace.push(objective);
    QpResult {
        alpha: st.a[..n].to_vec(),
        alpha_star: st.a[n..].to_vec(),
        bias,
        objective,
        trace,
        iterations,
        converged,
        gap: gap / scale,
    }
}

/// Gaussian elimination with partial pivoting on a row-major `n × n` system.
fn solve_dense(m: &mut [f64], rhs: &mut [f64], n: usize) -> Option<Vec<f64>> {
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    for col in 0..n {
        let piv = (col..n).max_by(|&a, &b| m[a * n + col].abs().total_cmp(&m[b * n + col].abs()))?;
        if m[piv * n + col].abs() <= 1e-14 * scale {
            return None;
        }
        if piv != col {
            for j in 0..n {
                m.swap(piv * n + j, col * n + j);
            }
            rhs.swap(piv, col);
        }
        let d = m[col * n + col];
        for row in col + 1..n {
            let factor = m[row * n + col] / d;
            if factor != 0.0 {
                for j in col..n {
                    m[row * n + j] -= factor * m[col * n + j];
                }
                rhs[row] -= factor * rhs[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|j| m[row * n + j] * x[j]).sum();
        x[row] = (rhs[row] - s) / m[row * n + row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}
