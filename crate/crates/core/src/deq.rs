//! The equilibrium layer.
//!
//! Wraps a [`VjpBundle`] operator into a trainable fixed-point layer:
//! forward solve with optional warm-start reuse, sparse recording of
//! intermediate iterates for fixed-point correction, loss assembly over
//! the flow component, and gradient assembly under a configurable
//! gradient mode. The backward pass reads only the final solution and the
//! recorded correction states, never the full solver trajectory.

use crate::error::CoreError;
use crate::grad::{ift_gradient, phantom_gradient, phantom_gradient_damped, VjpBundle};
use crate::rng::Rng;
use crate::solver::{solve, RecordIterates, SolverConfig, SolverTrace};
use crate::tensor::Tensor;
use crate::Result;
use serde::{Deserialize, Serialize};

/// The paired solver state `z = (h, f)`: hidden state plus flow field at
/// feature resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumState {
    pub h: Tensor,
    pub f: Tensor,
}

/// Shape bookkeeping for the state <-> flat-vector bijection: the flat
/// layout is the hidden-state data followed by the flow data, both
/// row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateLayout {
    pub c_h: usize,
    pub height: usize,
    pub width: usize,
}

impl StateLayout {
    pub fn new(c_h: usize, height: usize, width: usize) -> Self {
        StateLayout { c_h, height, width }
    }

    pub fn hidden_len(&self) -> usize {
        self.c_h * self.height * self.width
    }

    pub fn flow_len(&self) -> usize {
        2 * self.height * self.width
    }

    pub fn total_len(&self) -> usize {
        self.hidden_len() + self.flow_len()
    }

    /// Flow component of a flat state vector.
    pub fn flow_of<'a>(&self, z: &'a [f64]) -> &'a [f64] {
        &z[self.hidden_len()..self.total_len()]
    }
}

impl EquilibriumState {
    pub fn zeros(layout: &StateLayout) -> Self {
        EquilibriumState {
            h: Tensor::zeros(&[layout.c_h, layout.height, layout.width]),
            f: Tensor::zeros(&[2, layout.height, layout.width]),
        }
    }

    pub fn layout(&self) -> Result<StateLayout> {
        let hs = self.h.shape();
        let fs = self.f.shape();
        if hs.len() != 3 || fs.len() != 3 || fs[0] != 2 || hs[1] != fs[1] || hs[2] != fs[2] {
            return Err(CoreError::shape(
                "EquilibriumState",
                "h [C_h, H, W] and f [2, H, W] with matching spatial dims".to_string(),
                format!("h {hs:?}, f {fs:?}"),
            ));
        }
        Ok(StateLayout::new(hs[0], hs[1], hs[2]))
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.h.len() + self.f.len());
        out.extend_from_slice(self.h.data());
        out.extend_from_slice(self.f.data());
        out
    }

    pub fn from_flat(layout: &StateLayout, z: &[f64]) -> Result<Self> {
        if z.len() != layout.total_len() {
            return Err(CoreError::shape(
                "EquilibriumState::from_flat",
                format!("{}", layout.total_len()),
                format!("{}", z.len()),
            ));
        }
        let h = Tensor::new(
            vec![layout.c_h, layout.height, layout.width],
            z[..layout.hidden_len()].to_vec(),
        )?;
        let f = Tensor::new(
            vec![2, layout.height, layout.width],
            z[layout.hidden_len()..].to_vec(),
        )?;
        Ok(EquilibriumState { h, f })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    Uniform,
    Random,
}

/// Sparse fixed-point correction schedule: how many intermediate iterates
/// to supervise, their loss weights, and how to place them on the solver
/// trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionSchedule {
    /// Number of correction terms r; 0 disables correction.
    pub freq: usize,
    /// Loss weights, one per correction, each in (0, 1).
    pub gammas: Vec<f64>,
    pub placement: Placement,
}

impl CorrectionSchedule {
    pub fn disabled() -> Self {
        CorrectionSchedule {
            freq: 0,
            gammas: Vec::new(),
            placement: Placement::Uniform,
        }
    }

    /// Geometric default weights 0.8^(r-i+1) for i = 1..r, so the latest
    /// correction carries weight 0.8 and earlier ones decay.
    pub fn geometric(freq: usize) -> Self {
        let gammas = (1..=freq).map(|i| 0.8f64.powi((freq - i + 1) as i32)).collect();
        CorrectionSchedule {
            freq,
            gammas,
            placement: Placement::Uniform,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gammas.len() != self.freq {
            return Err(CoreError::InvalidConfig(format!(
                "correction schedule has freq {} but {} weights",
                self.freq,
                self.gammas.len()
            )));
        }
        if self.gammas.iter().any(|&g| g <= 0.0 || g >= 1.0) {
            return Err(CoreError::InvalidConfig(
                "correction weights must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Picks `r` interior trajectory indices in `(0, n_iters)`.
///
/// Uniform placement divides the trajectory into `r + 1` equal segments
/// and returns `floor(i * n_iters / (r + 1))` for `i = 1..r`; random
/// placement draws `r` distinct indices from `[1, n_iters - 1]`, sorted.
/// When the trajectory is too short (`n_iters < r + 1`) all interior
/// points are returned and the result is flagged.
pub fn sample_correction_indices(
    n_iters: usize,
    r: usize,
    placement: Placement,
    rng: &mut Rng,
) -> (Vec<usize>, bool) {
    if r == 0 {
        return (Vec::new(), false);
    }
    let interior = n_iters.saturating_sub(1);
    if interior < r {
        return ((1..n_iters).collect(), true);
    }
    match placement {
        Placement::Uniform => (
            (1..=r).map(|i| i * n_iters / (r + 1)).collect(),
            false,
        ),
        Placement::Random => {
            let picks = rng.sample_distinct(interior, r);
            (picks.into_iter().map(|i| i + 1).collect(), false)
        }
    }
}

/// Warm-start storage: the previous solution keyed by stream identity.
#[derive(Debug, Clone, Default)]
pub struct ReuseState {
    entry: Option<(u64, Vec<f64>)>,
}

impl ReuseState {
    pub fn new() -> Self {
        ReuseState::default()
    }

    /// Stored state for this stream, if the identity and shape match.
    pub fn initial_guess(&self, stream_id: u64, dim: usize) -> Option<&[f64]> {
        match &self.entry {
            Some((id, z)) if *id == stream_id && z.len() == dim => Some(z.as_slice()),
            _ => None,
        }
    }

    pub fn is_warm(&self, stream_id: u64, dim: usize) -> bool {
        self.initial_guess(stream_id, dim).is_some()
    }
}

/// Stores `z_star` keyed to `stream_id`; any other stream id presented
/// later forces a cold start.
pub fn advance_reuse(reuse: &mut ReuseState, z_star: &[f64], stream_id: u64) {
    reuse.entry = Some((stream_id, z_star.to_vec()));
}

/// How the main-loss gradient is computed at the fixed point.
#[derive(Debug, Clone, PartialEq)]
pub enum GradientMode {
    /// Exact implicit-function-theorem gradient via an adjoint solve.
    Ift { backward: SolverConfig },
    /// Truncated damped Neumann series; `k = 1`, `lambda = 1` is the
    /// 1-step gradient.
    Phantom { k: usize, lambda: f64 },
}

impl GradientMode {
    pub fn one_step() -> Self {
        GradientMode::Phantom { k: 1, lambda: 1.0 }
    }
}

/// Result of a forward equilibrium solve.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub z_star: Vec<f64>,
    pub trace: SolverTrace,
    /// Recorded `(index, state)` pairs at the schedule positions.
    pub correction_states: Vec<(usize, Vec<f64>)>,
    /// Schedule positions requested (computed from the iteration budget).
    pub scheduled: Vec<usize>,
    /// True when the solve stopped before reaching every scheduled
    /// position, so fewer correction states were recorded.
    pub missing_corrections: bool,
    /// True when the solve started from a reused previous solution.
    pub warm_started: bool,
}

/// Runs the forward fixed-point solve.
///
/// The initial state comes from `reuse` when it holds a shape-compatible
/// solution for `stream_id`, otherwise the zero state. Correction
/// positions are computed from the configured iteration budget
/// (`cfg.max_iters`); the solver records exactly those iterates and
/// nothing else, and no differentiation bookkeeping happens here.
pub fn forward_solve<B: VjpBundle + ?Sized>(
    bundle: &B,
    cfg: &SolverConfig,
    schedule: &CorrectionSchedule,
    reuse: &ReuseState,
    stream_id: u64,
    rng: &mut Rng,
) -> ForwardOutput {
    let dim = bundle.state_dim();
    let (z0, warm_started) = match reuse.initial_guess(stream_id, dim) {
        Some(z) => (z.to_vec(), true),
        None => (vec![0.0; dim], false),
    };
    let (scheduled, _short) =
        sample_correction_indices(cfg.max_iters, schedule.freq, schedule.placement, rng);
    let mut solver_cfg = cfg.clone();
    solver_cfg.record = if scheduled.is_empty() {
        RecordIterates::None
    } else {
        RecordIterates::Sampled(scheduled.clone())
    };
    let (z_star, trace) = solve(|z| bundle.eval(z), &z0, &solver_cfg);
    let correction_states = trace.recorded.clone();
    let missing_corrections = correction_states.len() < scheduled.len();
    ForwardOutput {
        z_star,
        trace,
        correction_states,
        scheduled,
        missing_corrections,
        warm_started,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Squared Euclidean distance summed over the flow field.
    SqL2,
    /// Absolute distance summed over the flow field.
    L1,
}

fn flow_distance(kind: LossKind, f: &[f64], f_gt: &[f64]) -> f64 {
    match kind {
        LossKind::SqL2 => f
            .iter()
            .zip(f_gt)
            .map(|(a, b)| (a - b) * (a - b))
            .sum(),
        LossKind::L1 => f.iter().zip(f_gt).map(|(a, b)| (a - b).abs()).sum(),
    }
}

/// d dist / d f, scaled by `weight`, embedded at the flow block of a flat
/// state cotangent (the hidden block stays zero).
fn flow_cotangent(
    kind: LossKind,
    layout: &StateLayout,
    z: &[f64],
    f_gt: &[f64],
    weight: f64,
) -> Vec<f64> {
    let mut cot = vec![0.0; layout.total_len()];
    let f = layout.flow_of(z);
    let dst = &mut cot[layout.hidden_len()..];
    match kind {
        LossKind::SqL2 => {
            for i in 0..f.len() {
                dst[i] = weight * 2.0 * (f[i] - f_gt[i]);
            }
        }
        LossKind::L1 => {
            for i in 0..f.len() {
                dst[i] = weight * (f[i] - f_gt[i]).signum();
            }
        }
    }
    cot
}

/// Loss values for one sample: the main term on the solution plus the
/// weighted correction terms on recorded intermediate iterates. Only the
/// flow component of each state enters; the hidden state is excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub main: f64,
    pub corrections: Vec<f64>,
}

impl LossParts {
    pub fn correction_sum(&self) -> f64 {
        self.corrections.iter().sum()
    }
}

pub fn assemble_loss(
    layout: &StateLayout,
    z_star: &[f64],
    correction_states: &[(usize, Vec<f64>)],
    f_gt: &Tensor,
    schedule: &CorrectionSchedule,
    kind: LossKind,
) -> Result<LossParts> {
    if f_gt.shape() != [2, layout.height, layout.width] {
        return Err(CoreError::shape(
            "assemble_loss",
            format!("[2, {}, {}]", layout.height, layout.width),
            format!("{:?}", f_gt.shape()),
        ));
    }
    if z_star.len() != layout.total_len() {
        return Err(CoreError::shape(
            "assemble_loss",
            format!("{}", layout.total_len()),
            format!("{}", z_star.len()),
        ));
    }
    let main = flow_distance(kind, layout.flow_of(z_star), f_gt.data());
    let mut corrections = Vec::with_capacity(correction_states.len());
    for (slot, (_, state)) in correction_states.iter().enumerate() {
        let gamma = *schedule
            .gammas
            .get(slot)
            .ok_or_else(|| CoreError::arg("assemble_loss", "more states than weights"))?;
        corrections.push(gamma * flow_distance(kind, layout.flow_of(state), f_gt.data()));
    }
    let total = main + corrections.iter().sum::<f64>();
    Ok(LossParts {
        total,
        main,
        corrections,
    })
}

/// Gradient assembly result.
#[derive(Debug, Clone)]
pub struct BackwardOutput {
    pub param_grad: Vec<f64>,
    /// Trace of the adjoint solve when the mode was IFT.
    pub adjoint_trace: Option<SolverTrace>,
    /// Set when an IFT adjoint solve diverged and the main gradient fell
    /// back to the 1-step rule.
    pub ift_fell_back: bool,
}

/// Assembles the parameter gradient for one sample.
///
/// The main-loss gradient is computed at `z_star` under `mode`; each
/// correction term contributes a mandatory 1-step gradient at its
/// recorded iterate with its own weighted cotangent. Reads nothing
/// besides `z_star` and the recorded correction states.
#[allow(clippy::too_many_arguments)]
pub fn backward_grads<B: VjpBundle + ?Sized>(
    bundle: &B,
    layout: &StateLayout,
    z_star: &[f64],
    correction_states: &[(usize, Vec<f64>)],
    f_gt: &Tensor,
    schedule: &CorrectionSchedule,
    kind: LossKind,
    mode: &GradientMode,
) -> Result<BackwardOutput> {
    let dl_dz = flow_cotangent(kind, layout, z_star, f_gt.data(), 1.0);
    let mut adjoint_trace = None;
    let mut ift_fell_back = false;
    let mut param_grad = match mode {
        GradientMode::Ift { backward } => {
            let out = ift_gradient(bundle, z_star, &dl_dz, backward);
            let grad = if out.diverged {
                ift_fell_back = true;
                phantom_gradient(bundle, z_star, &dl_dz, 1, 1.0)
            } else {
                out.param_grad
            };
            adjoint_trace = Some(out.adjoint_trace);
            grad
        }
        GradientMode::Phantom { k, lambda } => {
            phantom_gradient(bundle, z_star, &dl_dz, *k, *lambda)
        }
    };
    for (slot, (_, state)) in correction_states.iter().enumerate() {
        let gamma = *schedule
            .gammas
            .get(slot)
            .ok_or_else(|| CoreError::arg("backward_grads", "more states than weights"))?;
        let cot = flow_cotangent(kind, layout, state, f_gt.data(), gamma);
        let g = phantom_gradient(bundle, state, &cot, 1, 1.0);
        for (p, gi) in param_grad.iter_mut().zip(&g) {
            *p += gi;
        }
    }
    Ok(BackwardOutput {
        param_grad,
        adjoint_trace,
        ift_fell_back,
    })
}

/// Phantom damping vector from a gate tensor: the hidden block damps by
/// the gate activations, the flow block stays undamped.
pub fn gate_damping(layout: &StateLayout, gate: &Tensor) -> Result<Vec<f64>> {
    if gate.shape() != [layout.c_h, layout.height, layout.width] {
        return Err(CoreError::shape(
            "gate_damping",
            format!("[{}, {}, {}]", layout.c_h, layout.height, layout.width),
            format!("{:?}", gate.shape()),
        ));
    }
    let mut damping = vec![1.0; layout.total_len()];
    damping[..layout.hidden_len()].copy_from_slice(gate.data());
    Ok(damping)
}

/// `backward_grads` variant whose main-loss gradient uses per-coordinate
/// phantom damping (the gate-adaptive lambda); corrections still use the
/// plain 1-step rule.
#[allow(clippy::too_many_arguments)]
pub fn backward_grads_gated<B: VjpBundle + ?Sized>(
    bundle: &B,
    layout: &StateLayout,
    z_star: &[f64],
    correction_states: &[(usize, Vec<f64>)],
    f_gt: &Tensor,
    schedule: &CorrectionSchedule,
    kind: LossKind,
    k: usize,
    damping: &[f64],
) -> Result<BackwardOutput> {
    let dl_dz = flow_cotangent(kind, layout, z_star, f_gt.data(), 1.0);
    let mut param_grad = phantom_gradient_damped(bundle, z_star, &dl_dz, k, damping);
    for (slot, (_, state)) in correction_states.iter().enumerate() {
        let gamma = *schedule
            .gammas
            .get(slot)
            .ok_or_else(|| CoreError::arg("backward_grads", "more states than weights"))?;
        let cot = flow_cotangent(kind, layout, state, f_gt.data(), gamma);
        let g = phantom_gradient(bundle, state, &cot, 1, 1.0);
        for (p, gi) in param_grad.iter_mut().zip(&g) {
            *p += gi;
        }
    }
    Ok(BackwardOutput {
        param_grad,
        adjoint_trace: None,
        ift_fell_back: false,
    })
}
