//! Black-box fixed-point solvers for `z = f(z)`.
//!
//! Three methods behind one entry point: damped Picard iteration,
//! Anderson acceleration, and limited-memory (good) Broyden. All share the
//! stopping criteria, residual bookkeeping, and trace recording, and all
//! return the best iterate seen rather than the last one, since the
//! quasi-Newton residual histories are not monotone.
//!
//! Iteration counting convention: one iteration is one evaluation of `f`,
//! starting with the evaluation at the initial guess `z0`. The residual
//! reported for iteration `k` (1-based) therefore belongs to the iterate
//! `z^[k-1]`, with `z^[0] = z0`.

use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// Floor used in the relative-residual denominator `max(|f(z)|, 1e-8)`.
pub const REL_RESIDUAL_FLOOR: f64 = 1e-8;

/// Threshold below which a Broyden rank-1 update is skipped.
const BROYDEN_DENOM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Picard,
    Anderson,
    Broyden,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Picard => write!(f, "picard"),
            Method::Anderson => write!(f, "anderson"),
            Method::Broyden => write!(f, "broyden"),
        }
    }
}

/// Which iterates to keep in the trace besides the returned solution.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum RecordIterates {
    #[default]
    None,
    /// Record iterates `z^[i]` for the given iteration indices.
    Sampled(Vec<usize>),
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub method: Method,
    pub max_iters: usize,
    /// Stop when `|f(z) - z| / max(|f(z)|, 1e-8)` falls to this level.
    pub rel_tol: f64,
    /// Stop when `|f(z) - z|` falls to this level (0 disables).
    pub abs_tol: f64,
    /// Anderson history depth m.
    pub anderson_memory: usize,
    /// Anderson mixing parameter in (0, 1].
    pub anderson_beta: f64,
    /// Ridge added to the Anderson normal equations.
    pub anderson_ridge: f64,
    /// Picard damping in (0, 1]; 1 is the undamped update.
    pub picard_damping: f64,
    #[serde(skip)]
    pub record: RecordIterates,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            method: Method::Anderson,
            max_iters: 40,
            rel_tol: 1e-3,
            abs_tol: 0.0,
            anderson_memory: 5,
            anderson_beta: 1.0,
            anderson_ridge: 1e-8,
            picard_damping: 1.0,
            record: RecordIterates::None,
        }
    }
}

impl SolverConfig {
    pub fn with_method(method: Method) -> Self {
        SolverConfig {
            method,
            ..SolverConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.max_iters < 1 {
            return Err("max_iters must be at least 1".into());
        }
        if self.rel_tol < 0.0 || self.abs_tol < 0.0 {
            return Err("tolerances must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.picard_damping) || self.picard_damping == 0.0 {
            return Err("picard_damping must lie in (0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.anderson_beta) || self.anderson_beta == 0.0 {
            return Err("anderson_beta must lie in (0, 1]".into());
        }
        if self.anderson_memory < 1 {
            return Err("anderson_memory must be at least 1".into());
        }
        if self.anderson_ridge <= 0.0 {
            return Err("anderson_ridge must be positive".into());
        }
        Ok(())
    }
}

/// Record of one solve: per-iteration residuals, the convergence flags,
/// and any recorded iterates.
#[derive(Debug, Clone, Default)]
pub struct SolverTrace {
    /// Absolute residuals `|f(z^[k]) - z^[k]|`, one per iteration.
    pub residuals: Vec<f64>,
    /// Matching relative residuals.
    pub rel_residuals: Vec<f64>,
    /// Number of `f` evaluations performed.
    pub n_iters: usize,
    pub converged: bool,
    /// Set when a non-finite value aborted the solve.
    pub diverged: bool,
    /// Number of Anderson steps that fell back to plain Picard.
    pub fallback_steps: usize,
    /// Recorded `(iteration index, iterate)` pairs.
    pub recorded: Vec<(usize, Vec<f64>)>,
    /// Iteration index (0-based iterate index) of the returned solution.
    pub best_index: usize,
}

impl SolverTrace {
    pub fn best_residual(&self) -> f64 {
        self.residuals
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn best_rel_residual(&self) -> f64 {
        self.rel_residuals
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// One damped Picard update `z' = (1 - damping) z + damping f(z)`.
pub fn picard_step(z: &[f64], fz: &[f64], damping: f64) -> Vec<f64> {
    z.iter()
        .zip(fz)
        .map(|(zi, fi)| (1.0 - damping) * zi + damping * fi)
        .collect()
}

/// Solves the ridge-regularized Anderson mixing problem over the stored
/// history and returns the mixed iterate.
///
/// The weights minimize `|sum_i a_i g_i|^2` subject to `sum_i a_i = 1`
/// over residuals `g_i = f(z_i) - z_i`, via the normal equations
/// `(G^T G + ridge I) w = 1`, `a = w / sum(w)`. Returns `None` when the
/// system is too ill-conditioned even with the ridge, in which case the
/// caller falls back to a Picard step.
pub fn anderson_step(
    history: &VecDeque<(Vec<f64>, Vec<f64>)>,
    beta: f64,
    ridge: f64,
) -> Option<Vec<f64>> {
    let m = history.len();
    assert!(m >= 1, "anderson_step needs a non-empty history");
    let dim = history[0].0.len();
    // Gram matrix of residuals.
    let mut gram = vec![0.0; m * m];
    for i in 0..m {
        for j in i..m {
            let gi = &history[i];
            let gj = &history[j];
            let mut acc = 0.0;
            for k in 0..dim {
                let ri = gi.1[k] - gi.0[k];
                let rj = gj.1[k] - gj.0[k];
                acc += ri * rj;
            }
            gram[i * m + j] = acc;
            gram[j * m + i] = acc;
        }
    }
    for i in 0..m {
        gram[i * m + i] += ridge;
    }
    let rhs = vec![1.0; m];
    let w = solve_dense(&mut gram, rhs, m)?;
    let total: f64 = w.iter().sum();
    if !total.is_finite() || total.abs() < 1e-300 {
        return None;
    }
    let alphas: Vec<f64> = w.iter().map(|v| v / total).collect();
    if !all_finite(&alphas) {
        return None;
    }
    let mut out = vec![0.0; dim];
    for (a, (z, fz)) in alphas.iter().zip(history) {
        for k in 0..dim {
            out[k] += a * ((1.0 - beta) * z[k] + beta * fz[k]);
        }
    }
    Some(out)
}

/// Gaussian elimination with partial pivoting on a dense row-major
/// system. Returns `None` for singular systems.
fn solve_dense(a: &mut [f64], mut b: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    for col in 0..n {
        let mut pivot = col;
        let mut best = a[col * n + col].abs();
        for row in (col + 1)..n {
            let v = a[row * n + col].abs();
            if v > best {
                best = v;
                pivot = row;
            }
        }
        if best < 1e-300 || !best.is_finite() {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        let diag = a[col * n + col];
        for row in (col + 1)..n {
            let factor = a[row * n + col] / diag;
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row * n + k] -= factor * a[col * n + k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut acc = b[col];
        for k in (col + 1)..n {
            acc -= a[col * n + k] * x[k];
        }
        x[col] = acc / a[col * n + col];
    }
    if all_finite(&x) {
        Some(x)
    } else {
        None
    }
}

/// Limited-memory inverse-Jacobian approximation for good Broyden,
/// stored as `B = -I + sum_k u_k v_k^T`.
#[derive(Debug, Clone, Default)]
pub struct BroydenState {
    us: Vec<Vec<f64>>,
    vs: Vec<Vec<f64>>,
}

impl BroydenState {
    pub fn new() -> Self {
        BroydenState::default()
    }

    pub fn rank(&self) -> usize {
        self.us.len()
    }

    /// Applies `B x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = x.iter().map(|v| -v).collect();
        for (u, v) in self.us.iter().zip(&self.vs) {
            let c: f64 = v.iter().zip(x).map(|(a, b)| a * b).sum();
            if c != 0.0 {
                for (o, ui) in out.iter_mut().zip(u) {
                    *o += c * ui;
                }
            }
        }
        out
    }

    /// Applies `B^T x`.
    pub fn apply_transpose(&self, x: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = x.iter().map(|v| -v).collect();
        for (u, v) in self.us.iter().zip(&self.vs) {
            let c: f64 = u.iter().zip(x).map(|(a, b)| a * b).sum();
            if c != 0.0 {
                for (o, vi) in out.iter_mut().zip(v) {
                    *o += c * vi;
                }
            }
        }
        out
    }

    /// Good-Broyden rank-1 update from a step `dz` and residual change
    /// `dg`. Skipped when the curvature denominator is negligible.
    pub fn update(&mut self, dz: &[f64], dg: &[f64]) {
        let b_dg = self.apply(dg);
        let bt_dz = self.apply_transpose(dz);
        let denom: f64 = dz.iter().zip(&b_dg).map(|(a, b)| a * b).sum();
        if denom.abs() < BROYDEN_DENOM_EPS || !denom.is_finite() {
            return;
        }
        let u: Vec<f64> = dz
            .iter()
            .zip(&b_dg)
            .map(|(zi, bi)| (zi - bi) / denom)
            .collect();
        if !all_finite(&u) || !all_finite(&bt_dz) {
            return;
        }
        self.us.push(u);
        self.vs.push(bt_dz);
    }
}

/// One Broyden step from `z` with residual `g = f(z) - z`: returns
/// `z - B g` and leaves the state ready for the post-step update.
pub fn broyden_step(state: &BroydenState, z: &[f64], g: &[f64]) -> Vec<f64> {
    let bg = state.apply(g);
    z.iter().zip(&bg).map(|(zi, bi)| zi - bi).collect()
}

/// Runs the configured fixed-point solver on `f` from `z0`.
///
/// Returns the iterate with the smallest recorded absolute residual
/// together with the full trace. Non-finite values abort the solve with
/// `diverged` set, returning the best finite iterate seen so far.
pub fn solve<F>(f: F, z0: &[f64], cfg: &SolverConfig) -> (Vec<f64>, SolverTrace)
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let mut f = f;
    let mut trace = SolverTrace::default();
    let mut z = z0.to_vec();
    let mut best = z0.to_vec();
    let mut best_res = f64::INFINITY;
    let mut best_index = 0usize;

    let record_iterate = |trace: &mut SolverTrace, index: usize, state: &[f64]| match &cfg.record {
        RecordIterates::None => {}
        RecordIterates::All => trace.recorded.push((index, state.to_vec())),
        RecordIterates::Sampled(indices) => {
            if indices.contains(&index) {
                trace.recorded.push((index, state.to_vec()));
            }
        }
    };
    record_iterate(&mut trace, 0, &z);

    let mut anderson_history: VecDeque<(Vec<f64>, Vec<f64>)> = VecDeque::new();
    let mut broyden = BroydenState::new();
    let mut prev_zg: Option<(Vec<f64>, Vec<f64>)> = None;

    for it in 1..=cfg.max_iters {
        if !all_finite(&z) {
            trace.diverged = true;
            break;
        }
        let fz = f(&z);
        trace.n_iters = it;
        if !all_finite(&fz) {
            trace.diverged = true;
            break;
        }
        let g: Vec<f64> = fz.iter().zip(&z).map(|(a, b)| a - b).collect();
        let res = norm(&g);
        let rel = res / norm(&fz).max(REL_RESIDUAL_FLOOR);
        trace.residuals.push(res);
        trace.rel_residuals.push(rel);
        if res < best_res {
            best_res = res;
            best.copy_from_slice(&z);
            best_index = it - 1;
        }
        if (cfg.rel_tol > 0.0 && rel <= cfg.rel_tol) || (cfg.abs_tol > 0.0 && res <= cfg.abs_tol) {
            trace.converged = true;
            break;
        }

        let next = match cfg.method {
            Method::Picard => picard_step(&z, &fz, cfg.picard_damping),
            Method::Anderson => {
                if anderson_history.len() == cfg.anderson_memory {
                    anderson_history.pop_front();
                }
                anderson_history.push_back((z.clone(), fz.clone()));
                match anderson_step(&anderson_history, cfg.anderson_beta, cfg.anderson_ridge) {
                    Some(mixed) => mixed,
                    None => {
                        trace.fallback_steps += 1;
                        picard_step(&z, &fz, cfg.picard_damping)
                    }
                }
            }
            Method::Broyden => {
                if let Some((pz, pg)) = prev_zg.take() {
                    let dz: Vec<f64> = z.iter().zip(&pz).map(|(a, b)| a - b).collect();
                    let dg: Vec<f64> = g.iter().zip(&pg).map(|(a, b)| a - b).collect();
                    broyden.update(&dz, &dg);
                }
                prev_zg = Some((z.clone(), g.clone()));
                broyden_step(&broyden, &z, &g)
            }
        };
        z = next;
        record_iterate(&mut trace, it, &z);
        if it == cfg.max_iters {
            break;
        }
    }

    trace.best_index = best_index;
    (best, trace)
}
