use deqflow_cli::config::ExperimentConfig;
use deqflow_cli::optim::Adam;
use deqflow_core::deq::*;
use deqflow_core::flow::*;
use deqflow_core::rng::Rng;
use deqflow_core::solver::SolverConfig;

fn main() {
    let lr: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4e-4);
    let config = ExperimentConfig::default();
    let mut rng = Rng::new(42);
    let mut params = FlowModelParams::init(config.model, &mut rng).unwrap();
    let scfg = SynthConfig { max_disp: 2.0, smoothness: 1.0, warp: WarpKind::Translation, ..SynthConfig::default() };
    let sample = synth_stream(&mut rng, 2, &scfg).unwrap().remove(0);
    println!("target flow (px): ({:.3}, {:.3})", sample.f_gt.data()[0], sample.f_gt.data()[64*64]);
    let fwd = SolverConfig { max_iters: 16, rel_tol: 1e-3, ..SolverConfig::default() };
    let schedule = CorrectionSchedule::geometric(1);
    let mut adam = Adam::new(config.optimizer.clone(), params.param_dim(), params.trainable_mask());
    for step in 0..600 {
        let prep = prepare_sample(&params, &sample).unwrap();
        let op = FlowOperator::new(&params, &prep.input).unwrap();
        let mut srng = Rng::new(1);
        let out = forward_solve(&op, &fwd, &schedule, &ReuseState::new(), 0, &mut srng);
        let parts = assemble_loss(&op.layout(), &out.z_star, &out.correction_states, &prep.f_gt_feat, &schedule, LossKind::SqL2).unwrap();
        let grads = backward_grads(&op, &op.layout(), &out.z_star, &out.correction_states, &prep.f_gt_feat, &schedule, LossKind::SqL2, &GradientMode::one_step()).unwrap();
        adam.update(params.theta_mut(), &grads.param_grad);
        if step % 100 == 0 || step == 599 {
            let state = EquilibriumState::from_flat(&op.layout(), &out.z_star).unwrap();
            let f_img = flow_to_image_resolution(&state.f, 8).unwrap();
            let aepe = epe(&f_img, &sample.f_gt).unwrap();
            println!("step {step}: loss {:.4} main {:.4} residual {:.4} iters {} aepe {:.4} pred ({:.3},{:.3})",
                parts.total, parts.main, out.trace.best_residual(), out.trace.n_iters, aepe,
                8.0*state.f.data()[0], 8.0*state.f.data()[64]);
        }
    }
}
