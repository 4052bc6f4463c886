//! The training loop: forward equilibrium solve, loss assembly, gradient
//! assembly, and clipped adaptive-moment updates, with periodic
//! evaluation and append-only logs.

use crate::config::ExperimentConfig;
use crate::data::{eval_set, train_batch};
use crate::logs::{CsvField, CsvLog};
use crate::optim::Adam;
use crate::{CliError, Result};
use deqflow_core::deq::{
    assemble_loss, backward_grads, backward_grads_gated, forward_solve, gate_damping,
    CorrectionSchedule, GradientMode, LossKind, ReuseState,
};
use deqflow_core::flow::{
    flow_to_image_resolution, prepare_sample, FlowModelParams, FlowOperator, FlowSample,
};
use deqflow_core::flow::{epe, f1_all, F1_ABS_THRESH, F1_REL_THRESH};
use deqflow_core::grad::VjpBundle;
use deqflow_core::par;
use deqflow_core::rng::Rng;
use deqflow_core::solver::SolverConfig;
use std::path::Path;
use std::time::Instant;

const PARAM_SALT: u64 = 0x7061_7261_6d5f_7364;
const SAMPLE_SALT: u64 = 0x7362_7473_616d_706c;
const JR_SALT: u64 = 0x6a72_5f70_726f_6265;

/// Consecutive skipped (non-finite) steps tolerated before aborting.
const MAX_CONSECUTIVE_SKIPS: usize = 10;

pub const TRAIN_LOG_HEADER: &str =
    "step,loss_total,loss_main,loss_cor,fwd_iters,abs_residual,rel_residual,wall_ms";
pub const EVAL_LOG_HEADER: &str = "step,aepe,f1_all,mean_residual";

#[derive(Debug, Clone, Copy)]
pub struct EvalStats {
    pub aepe: f64,
    pub f1_all: f64,
    pub mean_residual: f64,
}

pub struct TrainOutcome {
    pub params: FlowModelParams,
    pub steps_run: usize,
    pub skipped_steps: usize,
    pub final_eval: EvalStats,
}

struct SampleResult {
    total: f64,
    main: f64,
    correction: f64,
    grad: Vec<f64>,
    n_iters: usize,
    abs_residual: f64,
    rel_residual: f64,
    jr_value: f64,
}

/// Penalty `|J_f(z*)|_F^2` and its parameter gradient, estimated with
/// Hutchinson probes. The second-order term is formed by central
/// differences of `vjp_theta` along the probe's VJP direction, which
/// needs only first-order operator evaluations.
fn jr_penalty_grad<B: VjpBundle + ?Sized>(
    bundle: &B,
    z_star: &[f64],
    rng: &mut Rng,
    n_probes: usize,
) -> (f64, Vec<f64>) {
    let dim = z_star.len();
    let mut value = 0.0;
    let mut grad = vec![0.0; bundle.param_dim()];
    let z_norm = deqflow_core::tensor::l2_norm(z_star);
    for _ in 0..n_probes {
        let eps: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let w = bundle.vjp_z(z_star, &eps);
        let w_norm = deqflow_core::tensor::l2_norm(&w);
        value += w_norm * w_norm;
        if w_norm < 1e-12 {
            continue;
        }
        let tau = 1e-4 * (1.0 + z_norm) / w_norm;
        let z_plus: Vec<f64> = z_star.iter().zip(&w).map(|(z, wi)| z + tau * wi).collect();
        let z_minus: Vec<f64> = z_star.iter().zip(&w).map(|(z, wi)| z - tau * wi).collect();
        let g_plus = bundle.vjp_theta(&z_plus, &eps);
        let g_minus = bundle.vjp_theta(&z_minus, &eps);
        for ((g, p), m) in grad.iter_mut().zip(&g_plus).zip(&g_minus) {
            *g += (p - m) / tau;
        }
    }
    let inv = 1.0 / n_probes as f64;
    for g in grad.iter_mut() {
        *g *= inv;
    }
    (value * inv, grad)
}

#[allow(clippy::too_many_arguments)]
fn process_sample(
    params: &FlowModelParams,
    sample: &FlowSample,
    forward: &SolverConfig,
    schedule: &CorrectionSchedule,
    mode: &GradientMode,
    adaptive_lambda: bool,
    phantom_k: usize,
    jr_coeff: Option<f64>,
    sample_rng: &mut Rng,
    jr_rng: &mut Rng,
) -> Result<SampleResult> {
    let prep = prepare_sample(params, sample).map_err(|e| CliError::Config(e.to_string()))?;
    let op = FlowOperator::new(params, &prep.input).map_err(|e| CliError::Config(e.to_string()))?;
    let fwd = forward_solve(&op, forward, schedule, &ReuseState::new(), 0, sample_rng);
    let parts = assemble_loss(
        &prep.layout,
        &fwd.z_star,
        &fwd.correction_states,
        &prep.f_gt_feat,
        schedule,
        LossKind::SqL2,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    let backward = if adaptive_lambda {
        let gate = op
            .gate_at(&fwd.z_star)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let damping = gate_damping(&prep.layout, &gate)
            .map_err(|e| CliError::Config(e.to_string()))?;
        backward_grads_gated(
            &op,
            &prep.layout,
            &fwd.z_star,
            &fwd.correction_states,
            &prep.f_gt_feat,
            schedule,
            LossKind::SqL2,
            phantom_k,
            &damping,
        )
    } else {
        backward_grads(
            &op,
            &prep.layout,
            &fwd.z_star,
            &fwd.correction_states,
            &prep.f_gt_feat,
            schedule,
            LossKind::SqL2,
            mode,
        )
    }
    .map_err(|e| CliError::Config(e.to_string()))?;

    let mut total = parts.total;
    let mut grad = backward.param_grad;
    let mut jr_value = 0.0;
    if let Some(coeff) = jr_coeff {
        let (value, jr_grad) = jr_penalty_grad(&op, &fwd.z_star, jr_rng, 1);
        jr_value = value;
        total += coeff * value;
        for (g, j) in grad.iter_mut().zip(&jr_grad) {
            *g += coeff * j;
        }
    }
    Ok(SampleResult {
        total,
        main: parts.main,
        correction: parts.correction_sum(),
        grad,
        n_iters: fwd.trace.n_iters,
        abs_residual: fwd.trace.best_residual(),
        rel_residual: fwd.trace.best_rel_residual(),
        jr_value,
    })
}

/// Mean metrics over the held-out set with the current parameters.
pub fn evaluate(
    params: &FlowModelParams,
    samples: &[FlowSample],
    forward: &SolverConfig,
) -> Result<EvalStats> {
    let schedule = CorrectionSchedule::disabled();
    let results = par::map_slice(samples, |sample| -> deqflow_core::Result<(f64, f64, f64)> {
        let prep = prepare_sample(params, sample)?;
        let op = FlowOperator::new(params, &prep.input)?;
        let mut rng = Rng::new(0);
        let fwd = forward_solve(&op, forward, &schedule, &ReuseState::new(), 0, &mut rng);
        let state =
            deqflow_core::deq::EquilibriumState::from_flat(&prep.layout, &fwd.z_star)?;
        let f_img = flow_to_image_resolution(&state.f, params.config().stride)?;
        let aepe = epe(&f_img, &sample.f_gt)?;
        let f1 = f1_all(&f_img, &sample.f_gt, F1_ABS_THRESH, F1_REL_THRESH)?;
        Ok((aepe, f1, fwd.trace.best_residual()))
    });
    let mut aepe = 0.0;
    let mut f1 = 0.0;
    let mut residual = 0.0;
    let n = results.len() as f64;
    for r in results {
        let (a, f, res) = r.map_err(|e| CliError::Config(e.to_string()))?;
        aepe += a;
        f1 += f;
        residual += res;
    }
    Ok(EvalStats {
        aepe: aepe / n,
        f1_all: f1 / n,
        mean_residual: residual / n,
    })
}

/// Full training run: writes `train_log.csv`, `eval_log.csv`, and a
/// final `checkpoint/` under `out_dir`.
///
/// `jr_coeff` adds the Jacobian-norm penalty (the regularization
/// baseline) to the loss with the given weight.
pub fn train_run(
    config: &ExperimentConfig,
    out_dir: &Path,
    jr_coeff: Option<f64>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut param_rng = Rng::new(config.data.seed ^ PARAM_SALT);
    let mut params = FlowModelParams::init(config.model, &mut param_rng)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let mut adam = Adam::new(
        config.optimizer.clone(),
        params.param_dim(),
        params.trainable_mask(),
    );
    let schedule = config.correction.schedule()?;
    let mode = config.gradient_mode()?;
    let forward = config.forward_solver.clone();
    let eval_samples = eval_set(config)?;

    let mut train_log = CsvLog::create(
        &out_dir.join("train_log.csv"),
        TRAIN_LOG_HEADER,
        config.run.flush_every,
    )?;
    let mut eval_log = CsvLog::create(
        &out_dir.join("eval_log.csv"),
        EVAL_LOG_HEADER,
        1,
    )?;

    let log_eval = |step: usize, params: &FlowModelParams, log: &mut CsvLog| -> Result<EvalStats> {
        let stats = evaluate(params, &eval_samples, &forward)?;
        log.row(&[
            CsvField::UInt(step as u64),
            CsvField::Float(stats.aepe),
            CsvField::Float(stats.f1_all),
            CsvField::Float(stats.mean_residual),
        ])?;
        Ok(stats)
    };

    let mut last_eval = log_eval(0, &params, &mut eval_log)?;
    let mut consecutive_skips = 0usize;
    let mut skipped_steps = 0usize;
    let sample_root = Rng::new(config.data.seed ^ SAMPLE_SALT);
    let jr_root = Rng::new(config.data.seed ^ JR_SALT);

    for step in 0..config.run.steps {
        let t0 = Instant::now();
        let batch = train_batch(config, step)?;
        let lanes: Vec<(usize, FlowSample)> = batch.into_iter().enumerate().collect();
        let results: Vec<Result<SampleResult>> = par::map_slice(&lanes, |(i, sample)| {
            let lane = (step * config.run.batch_size + i) as u64;
            // Placement and JR probes draw from separate streams so
            // enabling the penalty does not shift placement randomness.
            let mut rng = sample_root.lane(lane);
            let mut jr_rng = jr_root.lane(lane);
            process_sample(
                &params,
                sample,
                &forward,
                &schedule,
                &mode,
                config.gradient.adaptive_lambda,
                config.gradient.k,
                jr_coeff,
                &mut rng,
                &mut jr_rng,
            )
        });
        let mut samples = Vec::with_capacity(results.len());
        for r in results {
            samples.push(r?);
        }
        let n = samples.len() as f64;
        let total = samples.iter().map(|s| s.total).sum::<f64>() / n;
        let main = samples.iter().map(|s| s.main).sum::<f64>() / n;
        let cor = samples.iter().map(|s| s.correction).sum::<f64>() / n;
        let fwd_iters: usize = samples.iter().map(|s| s.n_iters).sum();
        let abs_res = samples.iter().map(|s| s.abs_residual).sum::<f64>() / n;
        let rel_res = samples.iter().map(|s| s.rel_residual).sum::<f64>() / n;
        let _jr_mean = samples.iter().map(|s| s.jr_value).sum::<f64>() / n;

        let mut grad = vec![0.0; params.param_dim()];
        for s in &samples {
            for (g, gi) in grad.iter_mut().zip(&s.grad) {
                *g += gi;
            }
        }
        for g in grad.iter_mut() {
            *g /= n;
        }

        let finite = total.is_finite() && grad.iter().all(|g| g.is_finite());
        if finite {
            adam.update(params.theta_mut(), &grad);
            consecutive_skips = 0;
        } else {
            skipped_steps += 1;
            consecutive_skips += 1;
        }
        let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
        train_log.row(&[
            CsvField::UInt(step as u64),
            CsvField::Float(total),
            CsvField::Float(main),
            CsvField::Float(cor),
            CsvField::UInt(fwd_iters as u64),
            CsvField::Float(abs_res),
            CsvField::Float(rel_res),
            CsvField::Float(wall_ms),
        ])?;
        if !finite && consecutive_skips > MAX_CONSECUTIVE_SKIPS {
            train_log.flush()?;
            return Err(CliError::Numerical(format!(
                "{consecutive_skips} consecutive non-finite steps at step {step}"
            )));
        }
        if (step + 1) % config.run.eval_gap == 0 || step + 1 == config.run.steps {
            last_eval = log_eval(step + 1, &params, &mut eval_log)?;
        }
    }
    if config.run.steps == 0 {
        // The initial eval above is the only record.
        last_eval = evaluate(&params, &eval_samples, &forward)?;
    }
    train_log.flush()?;
    eval_log.flush()?;
    params
        .save(&out_dir.join("checkpoint"))
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(TrainOutcome {
        params,
        steps_run: config.run.steps,
        skipped_steps,
        final_eval: last_eval,
    })
}
