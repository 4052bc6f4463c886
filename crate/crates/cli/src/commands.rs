//! Command entry points behind the `deqflow` binary.

use crate::config::{echo_config, ExperimentConfig, GradientKind};
use crate::data::{eval_set, synth_config};
use crate::logs::{column, read_csv, CsvField, CsvLog};
use crate::stats::pearson;
use crate::train::{train_run, TrainOutcome};
use crate::{CliError, Result};
use deqflow_core::deq::{
    advance_reuse, forward_solve, CorrectionSchedule, EquilibriumState, ReuseState,
};
use deqflow_core::flow::{
    epe, f1_all, flow_to_image_resolution, prepare_sample, synth_stream, FlowModelParams,
    FlowOperator, F1_ABS_THRESH, F1_REL_THRESH,
};
use deqflow_core::par;
use deqflow_core::rng::Rng;
use deqflow_core::solver::{solve, Method, SolverConfig};
use deqflow_core::tensor::l2_norm;
use std::path::Path;
use std::time::Instant;

const REUSE_SALT: u64 = 0x7265_7573_655f_7364;
const STUDY_SALT: u64 = 0x7374_7564_795f_7364;
const BENCH_SALT: u64 = 0x6265_6e63_685f_7364;

fn load_checkpoint(config: &ExperimentConfig, checkpoint: &Path) -> Result<FlowModelParams> {
    FlowModelParams::load(checkpoint, config.model).map_err(|e| CliError::Config(e.to_string()))
}

/// `train`: optimize from scratch, leaving logs and a checkpoint.
pub fn cmd_train(config: &ExperimentConfig, out_dir: &Path) -> Result<TrainOutcome> {
    echo_config(config, out_dir)?;
    let outcome = train_run(config, out_dir, None)?;
    println!(
        "train: {} steps ({} skipped), final AEPE {:.4}, F1-all {:.2}%, mean residual {:.4}",
        outcome.steps_run, outcome.skipped_steps, outcome.final_eval.aepe,
        outcome.final_eval.f1_all, outcome.final_eval.mean_residual
    );
    Ok(outcome)
}

/// `eval`: metrics of a checkpoint on the held-out set.
pub fn cmd_eval(config: &ExperimentConfig, checkpoint: &Path, out_dir: &Path) -> Result<()> {
    echo_config(config, out_dir)?;
    let params = load_checkpoint(config, checkpoint)?;
    let samples = eval_set(config)?;
    let mut log = CsvLog::create(
        &out_dir.join("eval_samples.csv"),
        "sample,aepe,f1_all,abs_residual",
        config.run.flush_every,
    )?;
    let schedule = CorrectionSchedule::disabled();
    let rows = par::map_range(samples.len(), |i| -> deqflow_core::Result<(f64, f64, f64)> {
        let prep = prepare_sample(&params, &samples[i])?;
        let op = FlowOperator::new(&params, &prep.input)?;
        let mut rng = Rng::new(0);
        let fwd = forward_solve(
            &op,
            &config.forward_solver,
            &schedule,
            &ReuseState::new(),
            0,
            &mut rng,
        );
        let state = EquilibriumState::from_flat(&prep.layout, &fwd.z_star)?;
        let f_img = flow_to_image_resolution(&state.f, params.config().stride)?;
        Ok((
            epe(&f_img, &samples[i].f_gt)?,
            f1_all(&f_img, &samples[i].f_gt, F1_ABS_THRESH, F1_REL_THRESH)?,
            fwd.trace.best_residual(),
        ))
    });
    let mut sums = (0.0, 0.0, 0.0);
    let n = rows.len() as f64;
    for (i, r) in rows.into_iter().enumerate() {
        let (a, f, res) = r.map_err(|e| CliError::Config(e.to_string()))?;
        log.row(&[
            CsvField::UInt(i as u64),
            CsvField::Float(a),
            CsvField::Float(f),
            CsvField::Float(res),
        ])?;
        sums.0 += a;
        sums.1 += f;
        sums.2 += res;
    }
    log.flush()?;
    println!(
        "eval: AEPE {:.4}, F1-all {:.2}%, mean residual {:.4} over {} samples",
        sums.0 / n,
        sums.1 / n,
        sums.2 / n,
        n as usize
    );
    Ok(())
}

pub struct AblateOptions {
    pub freqs: Vec<usize>,
    pub budget: usize,
    pub with_ift_arm: bool,
    pub with_jr_arm: bool,
    /// Penalty weights for the Jacobian-regularization arms.
    pub jr_coeffs: Vec<f64>,
}

impl Default for AblateOptions {
    fn default() -> Self {
        AblateOptions {
            freqs: vec![0, 1],
            budget: 16,
            with_ift_arm: true,
            with_jr_arm: true,
            jr_coeffs: vec![0.1, 1.0],
        }
    }
}

/// `ablate-correction`: trains one arm per correction frequency (plus
/// IFT and Jacobian-regularization arms) under a shared forward budget
/// and identical data streams, then merges the arm logs into
/// deterministic comparison CSVs.
pub fn cmd_ablate_correction(
    config: &ExperimentConfig,
    out_dir: &Path,
    opts: &AblateOptions,
) -> Result<()> {
    if opts.freqs.iter().any(|&f| f > 3) {
        return Err(CliError::Config("ablation frequencies must lie in 0..=3".into()));
    }
    echo_config(config, out_dir)?;
    let mut arms: Vec<(String, ExperimentConfig, Option<f64>)> = Vec::new();
    let base = {
        let mut c = config.clone();
        c.forward_solver.max_iters = opts.budget;
        c
    };
    for &freq in &opts.freqs {
        let mut c = base.clone();
        c.gradient.mode = GradientKind::Phantom;
        c.gradient.k = 1;
        c.gradient.lambda = 1.0;
        c.correction.freq = freq;
        c.correction.gammas = None;
        arms.push((format!("freq{freq}"), c, None));
    }
    if opts.with_ift_arm {
        let mut c = base.clone();
        c.gradient.mode = GradientKind::Ift;
        c.correction.freq = 0;
        c.correction.gammas = None;
        arms.push(("ift".into(), c, None));
    }
    if opts.with_jr_arm {
        for &coeff in &opts.jr_coeffs {
            let mut c = base.clone();
            c.gradient.mode = GradientKind::Ift;
            c.correction.freq = 0;
            c.correction.gammas = None;
            arms.push((format!("jr{coeff}"), c, Some(coeff)));
        }
    }

    let mut merged_train = CsvLog::create(
        &out_dir.join("ablate_train.csv"),
        "arm,step,loss_total,loss_main,loss_cor,fwd_iters,abs_residual,rel_residual",
        1000,
    )?;
    let mut merged_eval = CsvLog::create(
        &out_dir.join("ablate_eval.csv"),
        "arm,step,aepe,f1_all,mean_residual",
        1000,
    )?;
    for (name, arm_config, jr_coeff) in &arms {
        let arm_dir = out_dir.join("arms").join(name);
        echo_config(arm_config, &arm_dir)?;
        let outcome = train_run(arm_config, &arm_dir, *jr_coeff)?;
        println!(
            "arm {name}: final AEPE {:.4}, mean residual {:.4}",
            outcome.final_eval.aepe, outcome.final_eval.mean_residual
        );
        // Merge, dropping the wall-clock column.
        let (header, rows) = read_csv(&arm_dir.join("train_log.csv"))?;
        let keep: Vec<usize> = [
            "step",
            "loss_total",
            "loss_main",
            "loss_cor",
            "fwd_iters",
            "abs_residual",
            "rel_residual",
        ]
        .iter()
        .map(|c| column(&header, c))
        .collect::<Result<_>>()?;
        for row in rows {
            let mut fields = vec![CsvField::Str(name.clone())];
            for &k in &keep {
                fields.push(CsvField::Str(row[k].clone()));
            }
            merged_train.row(&fields)?;
        }
        let (eheader, erows) = read_csv(&arm_dir.join("eval_log.csv"))?;
        let ekeep: Vec<usize> = ["step", "aepe", "f1_all", "mean_residual"]
            .iter()
            .map(|c| column(&eheader, c))
            .collect::<Result<_>>()?;
        for row in erows {
            let mut fields = vec![CsvField::Str(name.clone())];
            for &k in &ekeep {
                fields.push(CsvField::Str(row[k].clone()));
            }
            merged_eval.row(&fields)?;
        }
    }
    merged_train.flush()?;
    merged_eval.flush()?;
    Ok(())
}

/// `sequence-reuse`: per frame of each stream, solve once cold and once
/// warm-started from the previous frame's solution.
pub fn cmd_sequence_reuse(
    config: &ExperimentConfig,
    checkpoint: &Path,
    out_dir: &Path,
    n_streams: usize,
    frames: usize,
) -> Result<()> {
    if frames < 2 || n_streams == 0 {
        return Err(CliError::Config("need n_streams >= 1 and frames >= 2".into()));
    }
    echo_config(config, out_dir)?;
    let params = load_checkpoint(config, checkpoint)?;
    let mut log = CsvLog::create(
        &out_dir.join("reuse.csv"),
        "stream,frame,cold_iters,warm_iters,cold_rel_residual,warm_rel_residual,warm_started",
        config.run.flush_every,
    )?;
    let schedule = CorrectionSchedule::disabled();
    let scfg = synth_config(&config.data);
    let root = Rng::new(config.data.seed ^ REUSE_SALT);

    struct FrameRow {
        cold_iters: usize,
        warm_iters: usize,
        cold_rel: f64,
        warm_rel: f64,
        warm_started: bool,
    }
    let streams: Vec<deqflow_core::Result<Vec<FrameRow>>> = par::map_range(n_streams, |s| {
        let mut rng = root.lane(s as u64);
        let samples = synth_stream(&mut rng, frames, &scfg)?;
        let mut reuse = ReuseState::new();
        let mut rows = Vec::with_capacity(samples.len());
        for sample in &samples {
            let prep = prepare_sample(&params, sample)?;
            let op = FlowOperator::new(&params, &prep.input)?;
            let mut solve_rng = Rng::new(0);
            let cold = forward_solve(
                &op,
                &config.forward_solver,
                &schedule,
                &ReuseState::new(),
                s as u64,
                &mut solve_rng,
            );
            let warm = forward_solve(
                &op,
                &config.forward_solver,
                &schedule,
                &reuse,
                s as u64,
                &mut solve_rng,
            );
            advance_reuse(&mut reuse, &warm.z_star, s as u64);
            rows.push(FrameRow {
                cold_iters: cold.trace.n_iters,
                warm_iters: warm.trace.n_iters,
                cold_rel: cold.trace.best_rel_residual(),
                warm_rel: warm.trace.best_rel_residual(),
                warm_started: warm.warm_started,
            });
        }
        Ok(rows)
    });
    for (s, stream) in streams.into_iter().enumerate() {
        let rows = stream.map_err(|e| CliError::Config(e.to_string()))?;
        for (frame, r) in rows.into_iter().enumerate() {
            log.row(&[
                CsvField::UInt(s as u64),
                CsvField::UInt(frame as u64),
                CsvField::UInt(r.cold_iters as u64),
                CsvField::UInt(r.warm_iters as u64),
                CsvField::Float(r.cold_rel),
                CsvField::Float(r.warm_rel),
                CsvField::UInt(r.warm_started as u64),
            ])?;
        }
    }
    log.flush()?;
    Ok(())
}

/// `correlation-study`: per held-out sample, records the image-space
/// endpoint error, the absolute fixed-point residual, and the mean flow
/// magnitude, then reports the residual-EPE Pearson correlation.
pub fn cmd_correlation_study(
    config: &ExperimentConfig,
    checkpoint: &Path,
    out_dir: &Path,
    n_samples: usize,
    disps: &[f64],
) -> Result<()> {
    if n_samples == 0 || disps.is_empty() {
        return Err(CliError::Config("need n_samples >= 1 and a displacement list".into()));
    }
    echo_config(config, out_dir)?;
    let params = load_checkpoint(config, checkpoint)?;
    let mut log = CsvLog::create(
        &out_dir.join("correlation_scatter.csv"),
        "sample,max_disp,aepe,abs_residual,mean_flow_mag",
        config.run.flush_every,
    )?;
    let schedule = CorrectionSchedule::disabled();
    let root = Rng::new(config.data.seed ^ STUDY_SALT);
    let rows: Vec<deqflow_core::Result<(f64, f64, f64, f64)>> =
        par::map_range(n_samples, |i| {
            let disp = disps[i % disps.len()];
            let mut rng = root.lane(i as u64);
            let scfg = deqflow_core::flow::SynthConfig {
                max_disp: disp,
                ..synth_config(&config.data)
            };
            let sample = synth_stream(&mut rng, 2, &scfg)?.remove(0);
            let prep = prepare_sample(&params, &sample)?;
            let op = FlowOperator::new(&params, &prep.input)?;
            let mut solve_rng = Rng::new(0);
            let fwd = forward_solve(
                &op,
                &config.forward_solver,
                &schedule,
                &ReuseState::new(),
                0,
                &mut solve_rng,
            );
            let state = EquilibriumState::from_flat(&prep.layout, &fwd.z_star)?;
            let f_img = flow_to_image_resolution(&state.f, params.config().stride)?;
            let aepe = epe(&f_img, &sample.f_gt)?;
            // Mean per-pixel ground-truth flow magnitude (hardness).
            let plane = sample.f_gt.shape()[1] * sample.f_gt.shape()[2];
            let mag = (0..plane)
                .map(|px| {
                    let dx = sample.f_gt.data()[px];
                    let dy = sample.f_gt.data()[plane + px];
                    dx.hypot(dy)
                })
                .sum::<f64>()
                / plane as f64;
            Ok((disp, aepe, fwd.trace.best_residual(), mag))
        });
    let mut epes = Vec::with_capacity(n_samples);
    let mut residuals = Vec::with_capacity(n_samples);
    for (i, row) in rows.into_iter().enumerate() {
        let (disp, aepe, residual, mag) = row.map_err(|e| CliError::Config(e.to_string()))?;
        log.row(&[
            CsvField::UInt(i as u64),
            CsvField::Float(disp),
            CsvField::Float(aepe),
            CsvField::Float(residual),
            CsvField::Float(mag),
        ])?;
        epes.push(aepe);
        residuals.push(residual);
    }
    log.flush()?;
    let r = pearson(&residuals, &epes);
    let mut summary = CsvLog::create(&out_dir.join("correlation_summary.csv"), "pearson_r", 1)?;
    match r {
        Some(v) => summary.row(&[CsvField::Float(v)])?,
        None => summary.row(&[CsvField::Str("undefined".into())])?,
    }
    summary.flush()?;
    match r {
        Some(v) => println!("correlation-study: pearson r = {v:.4} over {n_samples} samples"),
        None => println!("correlation-study: pearson r undefined (degenerate variance)"),
    }
    Ok(())
}

/// Symmetric matrix with eigenvalues spread in `[-radius, radius]`
/// (extremes pinned), plus a random offset: a contractive affine test
/// map with a known spectral radius.
fn random_affine_map(rng: &mut Rng, dim: usize, radius: f64) -> (Vec<f64>, Vec<f64>) {
    let offset: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    if radius == 0.0 {
        return (vec![0.0; dim * dim], offset);
    }
    // Random orthogonal basis via Gram-Schmidt on a Gaussian matrix.
    let mut q = vec![0.0; dim * dim];
    for col in 0..dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        for prev in 0..col {
            let dot: f64 = (0..dim).map(|i| q[i * dim + prev] * v[i]).sum();
            for i in 0..dim {
                v[i] -= dot * q[i * dim + prev];
            }
        }
        let norm = l2_norm(&v);
        for i in 0..dim {
            q[i * dim + col] = v[i] / norm;
        }
    }
    let mut eigs: Vec<f64> = (0..dim).map(|_| rng.uniform_in(-radius, radius)).collect();
    eigs[0] = radius;
    if dim > 1 {
        eigs[1] = -radius;
    }
    let mut a = vec![0.0; dim * dim];
    for i in 0..dim {
        for j in 0..dim {
            let mut acc = 0.0;
            for k in 0..dim {
                acc += q[i * dim + k] * eigs[k] * q[j * dim + k];
            }
            a[i * dim + j] = acc;
        }
    }
    (a, offset)
}

/// `bench-solvers`: iterations-to-tolerance for all three methods on
/// seeded random contractive affine maps. Wall times go to a separate
/// timing CSV so the primary output stays byte-deterministic.
pub fn cmd_bench_solvers(
    config: &ExperimentConfig,
    out_dir: &Path,
    dim: usize,
    radii: &[f64],
    trials: usize,
) -> Result<()> {
    if dim == 0 || trials == 0 || radii.is_empty() {
        return Err(CliError::Config("need dim >= 1, trials >= 1, radii".into()));
    }
    if radii.iter().any(|&r| r < 0.0 || r >= 1.0) {
        return Err(CliError::Config("spectral radii must lie in [0, 1)".into()));
    }
    echo_config(config, out_dir)?;
    let mut log = CsvLog::create(
        &out_dir.join("bench_solvers.csv"),
        "method,radius,trial,iters,converged",
        1000,
    )?;
    let mut timing = CsvLog::create(
        &out_dir.join("bench_solvers_timing.csv"),
        "method,radius,trial,wall_ms",
        1000,
    )?;
    let tol = 1e-8;
    let root = Rng::new(config.data.seed ^ BENCH_SALT);
    for (ri, &radius) in radii.iter().enumerate() {
        for trial in 0..trials {
            // Identical problem instance across methods.
            let mut rng = root.lane((ri * 100_000 + trial) as u64);
            let (a, b) = random_affine_map(&mut rng, dim, radius);
            let map = |z: &[f64]| -> Vec<f64> {
                (0..dim)
                    .map(|i| {
                        b[i] + (0..dim).map(|j| a[i * dim + j] * z[j]).sum::<f64>()
                    })
                    .collect()
            };
            let z0 = vec![0.0; dim];
            for method in [Method::Picard, Method::Anderson, Method::Broyden] {
                let cfg = SolverConfig {
                    method,
                    max_iters: 5000,
                    rel_tol: tol,
                    ..SolverConfig::default()
                };
                let t0 = Instant::now();
                let (_, trace) = solve(map, &z0, &cfg);
                let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
                log.row(&[
                    CsvField::Str(method.to_string()),
                    CsvField::Float(radius),
                    CsvField::UInt(trial as u64),
                    CsvField::UInt(trace.n_iters as u64),
                    CsvField::UInt(trace.converged as u64),
                ])?;
                timing.row(&[
                    CsvField::Str(method.to_string()),
                    CsvField::Float(radius),
                    CsvField::UInt(trial as u64),
                    CsvField::Float(wall_ms),
                ])?;
            }
        }
    }
    log.flush()?;
    timing.flush()?;
    Ok(())
}
