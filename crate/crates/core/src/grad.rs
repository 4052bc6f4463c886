//! Backward passes for equilibrium solves.
//!
//! Given a fixed point `z* = f(z*, x)` and the loss cotangent `dL/dz*`,
//! the exact parameter gradient is `dL/dz* (I - df/dz*)^{-1} df/dtheta`.
//! [`ift_gradient`] obtains it by solving the adjoint linear fixed-point
//! system `g = (df/dz*)^T g + dL/dz*` with the same black-box solvers used
//! forward. [`phantom_gradient`] replaces the inverse with a truncated,
//! damped Neumann series; with `k = 1` it is the 1-step gradient
//! `dL/dz* df/dtheta`, whose backward cost is a single VJP evaluation.
//!
//! [`hutchinson_frobenius`] estimates `|df/dz*|_F^2 = tr(J^T J)` with
//! random probes, the quantity penalized by Jacobian regularization.

use crate::rng::Rng;
use crate::solver::{solve, SolverConfig, SolverTrace};

/// Reverse-mode interface of an equilibrium function `f(z, theta)` closed
/// over its input. Implementations provide the map itself and hand-written
/// vector-Jacobian products against the state and the flat parameter
/// vector; both VJPs must be linear in the cotangent.
pub trait VjpBundle {
    fn state_dim(&self) -> usize;
    fn param_dim(&self) -> usize;

    /// Evaluates `f(z)`.
    fn eval(&self, z: &[f64]) -> Vec<f64>;

    /// `v^T df/dz` at `z`.
    fn vjp_z(&self, z: &[f64], cot: &[f64]) -> Vec<f64>;

    /// `v^T df/dtheta` at `z`, as a flat parameter-gradient vector.
    fn vjp_theta(&self, z: &[f64], cot: &[f64]) -> Vec<f64>;

    /// Repeated-VJP hook: returns a closure computing `v^T df/dz` at the
    /// fixed linearization point `z`. Implementations with an expensive
    /// forward pass override this to share it across calls (adjoint
    /// iterations, Neumann terms); semantics are identical to calling
    /// [`VjpBundle::vjp_z`] each time.
    fn vjp_z_at<'a>(&'a self, z: &[f64]) -> Box<dyn Fn(&[f64]) -> Vec<f64> + 'a> {
        let z = z.to_vec();
        Box::new(move |cot| self.vjp_z(&z, cot))
    }

    /// Forward-mode product `(df/dz) u`, when available.
    fn jvp_z(&self, _z: &[f64], _tangent: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

/// Outcome of an adjoint-based gradient computation.
#[derive(Debug, Clone)]
pub struct IftGradient {
    pub param_grad: Vec<f64>,
    /// Trace of the adjoint linear fixed-point solve.
    pub adjoint_trace: SolverTrace,
    /// Set when the adjoint solve diverged; the gradient then comes from
    /// the best finite adjoint iterate and callers may prefer a phantom
    /// fallback.
    pub diverged: bool,
}

/// Exact implicit-function-theorem gradient.
///
/// Solves `g = vjp_z(z*, g) + dL/dz*` to the backward config's tolerance
/// and returns `vjp_theta(z*, g*)`.
pub fn ift_gradient<B: VjpBundle + ?Sized>(
    bundle: &B,
    z_star: &[f64],
    dl_dz: &[f64],
    backward_cfg: &SolverConfig,
) -> IftGradient {
    let vjp = bundle.vjp_z_at(z_star);
    let adjoint_map = |g: &[f64]| -> Vec<f64> {
        let mut out = vjp(g);
        for (o, d) in out.iter_mut().zip(dl_dz) {
            *o += d;
        }
        out
    };
    // Start at dL/dz*, the first Neumann term; a constant adjoint map
    // (zero Jacobian) then converges within one iteration.
    let (g_star, trace) = solve(adjoint_map, dl_dz, backward_cfg);
    let param_grad = bundle.vjp_theta(z_star, &g_star);
    IftGradient {
        param_grad,
        diverged: trace.diverged,
        adjoint_trace: trace,
    }
}

/// Truncated damped Neumann-series (phantom) gradient.
///
/// Accumulates `g <- lambda * vjp_z(z*, g) + dL/dz*` for `k - 1` rounds
/// starting from `g = dL/dz*`, then applies `vjp_theta` once; by linearity
/// of `vjp_theta` in the cotangent this equals the sum of the per-step
/// contributions of a `k`-step unrolled backward at `z*`. `k = 1` with
/// `lambda = 1` is exactly the 1-step gradient: one VJP evaluation, no
/// retained solver state.
pub fn phantom_gradient<B: VjpBundle + ?Sized>(
    bundle: &B,
    z_star: &[f64],
    dl_dz: &[f64],
    k: usize,
    lambda: f64,
) -> Vec<f64> {
    assert!(k >= 1, "phantom_gradient needs k >= 1");
    assert!(lambda > 0.0 && lambda <= 1.0, "lambda must lie in (0, 1]");
    let mut g = dl_dz.to_vec();
    if k > 1 {
        let vjp = bundle.vjp_z_at(z_star);
        for _ in 1..k {
            let jg = vjp(&g);
            for ((gi, ji), di) in g.iter_mut().zip(&jg).zip(dl_dz) {
                *gi = lambda * ji + di;
            }
        }
    }
    bundle.vjp_theta(z_star, &g)
}

/// Phantom gradient with a per-coordinate damping vector in place of the
/// scalar `lambda` (used for gate-adaptive damping).
pub fn phantom_gradient_damped<B: VjpBundle + ?Sized>(
    bundle: &B,
    z_star: &[f64],
    dl_dz: &[f64],
    k: usize,
    damping: &[f64],
) -> Vec<f64> {
    assert!(k >= 1, "phantom_gradient_damped needs k >= 1");
    assert_eq!(damping.len(), dl_dz.len());
    let mut g = dl_dz.to_vec();
    if k > 1 {
        let vjp = bundle.vjp_z_at(z_star);
        for _ in 1..k {
            let jg = vjp(&g);
            for i in 0..g.len() {
                g[i] = damping[i] * jg[i] + dl_dz[i];
            }
        }
    }
    bundle.vjp_theta(z_star, &g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeDistribution {
    Gaussian,
    Rademacher,
}

/// Hutchinson estimate of `|J_f(z*)|_F^2 = tr(J^T J)`.
///
/// Averages `|vjp_z(z*, eps)|^2` over `n_probes` random probes (or
/// `|jvp_z(z*, eps)|^2` when a forward-mode product is available). Probe
/// vectors are drawn sequentially from `rng`; probe evaluations may run
/// concurrently and are summed in probe-index order, so the result is
/// deterministic.
pub fn hutchinson_frobenius<B: VjpBundle + ?Sized + Sync>(
    bundle: &B,
    z_star: &[f64],
    n_probes: usize,
    rng: &mut Rng,
    distribution: ProbeDistribution,
) -> f64 {
    assert!(n_probes >= 1, "hutchinson_frobenius needs n_probes >= 1");
    let dim = z_star.len();
    let probes: Vec<Vec<f64>> = (0..n_probes)
        .map(|_| {
            (0..dim)
                .map(|_| match distribution {
                    ProbeDistribution::Gaussian => rng.normal(),
                    ProbeDistribution::Rademacher => rng.rademacher(),
                })
                .collect()
        })
        .collect();
    let sq_norms = crate::par::map_slice(&probes, |eps| {
        let v = match bundle.jvp_z(z_star, eps) {
            Some(jv) => jv,
            None => bundle.vjp_z(z_star, eps),
        };
        v.iter().map(|x| x * x).sum::<f64>()
    });
    sq_norms.iter().sum::<f64>() / n_probes as f64
}

/// Central-difference gradient check on randomly chosen coordinates.
///
/// Returns the max over checked coordinates of
/// `|fd - grad| / max(|fd|, |grad|, 1e-8)`.
pub fn finite_difference_check<F>(
    loss: F,
    theta: &[f64],
    param_grad: &[f64],
    epsilon: f64,
    n_coords: usize,
    rng: &mut Rng,
) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    assert!(epsilon > 0.0, "epsilon must be positive");
    assert!(n_coords <= theta.len(), "n_coords exceeds dim(theta)");
    assert_eq!(theta.len(), param_grad.len());
    let coords = rng.sample_distinct(theta.len(), n_coords);
    let mut worst = 0.0f64;
    let mut work = theta.to_vec();
    for &i in &coords {
        let orig = work[i];
        work[i] = orig + epsilon;
        let plus = loss(&work);
        work[i] = orig - epsilon;
        let minus = loss(&work);
        work[i] = orig;
        let fd = (plus - minus) / (2.0 * epsilon);
        let denom = fd.abs().max(param_grad[i].abs()).max(1e-8);
        worst = worst.max((fd - param_grad[i]).abs() / denom);
    }
    worst
}

/// Default central-difference step for 64-bit reals.
pub const DEFAULT_FD_EPSILON: f64 = 1e-5;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::Method;

    /// Affine equilibrium function f(z, theta) = A z + B theta with a
    /// fixed parameter point; the workhorse test bundle.
    pub struct AffineBundle {
        pub dim_z: usize,
        pub dim_theta: usize,
        pub a: Vec<f64>,
        pub b: Vec<f64>,
        pub theta: Vec<f64>,
    }

    impl AffineBundle {
        fn b_theta(&self) -> Vec<f64> {
            (0..self.dim_z)
                .map(|i| {
                    (0..self.dim_theta)
                        .map(|j| self.b[i * self.dim_theta + j] * self.theta[j])
                        .sum()
                })
                .collect()
        }
    }

    impl VjpBundle for AffineBundle {
        fn state_dim(&self) -> usize {
            self.dim_z
        }
        fn param_dim(&self) -> usize {
            self.dim_theta
        }
        fn eval(&self, z: &[f64]) -> Vec<f64> {
            let bt = self.b_theta();
            (0..self.dim_z)
                .map(|i| {
                    bt[i]
                        + (0..self.dim_z)
                            .map(|j| self.a[i * self.dim_z + j] * z[j])
                            .sum::<f64>()
                })
                .collect()
        }
        fn vjp_z(&self, _z: &[f64], cot: &[f64]) -> Vec<f64> {
            // v^T A => A^T v
            (0..self.dim_z)
                .map(|j| {
                    (0..self.dim_z)
                        .map(|i| self.a[i * self.dim_z + j] * cot[i])
                        .sum()
                })
                .collect()
        }
        fn vjp_theta(&self, _z: &[f64], cot: &[f64]) -> Vec<f64> {
            (0..self.dim_theta)
                .map(|j| {
                    (0..self.dim_z)
                        .map(|i| self.b[i * self.dim_theta + j] * cot[i])
                        .sum()
                })
                .collect()
        }
    }

    fn backward_cfg() -> SolverConfig {
        SolverConfig {
            method: Method::Anderson,
            max_iters: 200,
            rel_tol: 1e-12,
            ..SolverConfig::default()
        }
    }

    /// Dense Gaussian-elimination solve used as an independent oracle.
    fn dense_solve(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
        let mut m = a.to_vec();
        let mut rhs = b.to_vec();
        for col in 0..n {
            let mut pivot = col;
            for row in (col + 1)..n {
                if m[row * n + col].abs() > m[pivot * n + col].abs() {
                    pivot = row;
                }
            }
            for k in 0..n {
                m.swap(col * n + k, pivot * n + k);
            }
            rhs.swap(col, pivot);
            for row in (col + 1)..n {
                let f = m[row * n + col] / m[col * n + col];
                for k in col..n {
                    m[row * n + k] -= f * m[col * n + k];
                }
                rhs[row] -= f * rhs[col];
            }
        }
        let mut x = vec![0.0; n];
        for col in (0..n).rev() {
            let mut acc = rhs[col];
            for k in (col + 1)..n {
                acc -= m[col * n + k] * x[k];
            }
            x[col] = acc / m[col * n + col];
        }
        x
    }

    #[test]
    fn scalar_ift_geometric_series() {
        // f(z, theta) = 0.5 z + theta, theta = 1, L(z) = z.
        // z* = 2 and dL/dtheta = 1 / (1 - 0.5) = 2.
        let bundle = AffineBundle {
            dim_z: 1,
            dim_theta: 1,
            a: vec![0.5],
            b: vec![1.0],
            theta: vec![1.0],
        };
        let z_star = [2.0];
        let grad = ift_gradient(&bundle, &z_star, &[1.0], &backward_cfg());
        assert!(!grad.diverged);
        assert!((grad.param_grad[0] - 2.0).abs() < 1e-10);

        // Cross-check with central finite differences on theta.
        let loss = |theta: &[f64]| -> f64 {
            // z*(theta) = theta / (1 - 0.5)
            theta[0] / 0.5
        };
        let mut rng = Rng::new(1);
        let err = finite_difference_check(loss, &[1.0], &grad.param_grad, 1e-5, 1, &mut rng);
        assert!(err < 1e-8, "fd err {err}");
    }

    #[test]
    fn zero_jacobian_single_adjoint_iteration() {
        let bundle = AffineBundle {
            dim_z: 3,
            dim_theta: 2,
            a: vec![0.0; 9],
            b: vec![1.0, 0.0, 0.5, -1.0, 2.0, 0.25],
            theta: vec![0.3, 0.7],
        };
        let z_star = bundle.b_theta();
        let dl = [1.0, -2.0, 0.5];
        let grad = ift_gradient(&bundle, &z_star, &dl, &backward_cfg());
        let direct = bundle.vjp_theta(&z_star, &dl);
        assert_eq!(grad.param_grad, direct);
        // The adjoint map is constant at dl, which is also the starting
        // point, so one evaluation certifies the fixed point.
        assert_eq!(grad.adjoint_trace.n_iters, 1);
    }

    #[test]
    fn dense_affine_matches_linear_algebra_oracle() {
        let mut rng = Rng::new(77);
        let dim_z = 16;
        let dim_theta = 12;
        // Random A scaled to spectral norm <= 0.5 via power iteration.
        let mut a: Vec<f64> = (0..dim_z * dim_z).map(|_| rng.normal()).collect();
        let norm_est = {
            let mut v: Vec<f64> = (0..dim_z).map(|_| rng.normal()).collect();
            let mut s = 0.0;
            for _ in 0..200 {
                // w = A^T A v
                let av: Vec<f64> = (0..dim_z)
                    .map(|i| (0..dim_z).map(|j| a[i * dim_z + j] * v[j]).sum())
                    .collect();
                let w: Vec<f64> = (0..dim_z)
                    .map(|j| (0..dim_z).map(|i| a[i * dim_z + j] * av[i]).sum())
                    .collect();
                let n = crate::tensor::l2_norm(&w);
                s = n.sqrt();
                v = w.iter().map(|x| x / n).collect();
            }
            s
        };
        let scale = 0.5 / norm_est;
        for v in a.iter_mut() {
            *v *= scale;
        }
        let b: Vec<f64> = (0..dim_z * dim_theta).map(|_| rng.normal()).collect();
        let theta: Vec<f64> = (0..dim_theta).map(|_| rng.normal()).collect();
        let bundle = AffineBundle {
            dim_z,
            dim_theta,
            a: a.clone(),
            b: b.clone(),
            theta,
        };

        // Fixed point z* = (I - A)^{-1} B theta via dense solve.
        let mut i_minus_a = vec![0.0; dim_z * dim_z];
        for i in 0..dim_z {
            for j in 0..dim_z {
                i_minus_a[i * dim_z + j] = (if i == j { 1.0 } else { 0.0 }) - a[i * dim_z + j];
            }
        }
        let z_star = dense_solve(&i_minus_a, &bundle.b_theta(), dim_z);

        let dl: Vec<f64> = (0..dim_z).map(|i| (i as f64 * 0.37).sin()).collect();
        let grad = ift_gradient(&bundle, &z_star, &dl, &backward_cfg());

        // Oracle: dL/dtheta = dl^T (I - A)^{-1} B, via solving
        // (I - A)^T g = dl.
        let mut i_minus_a_t = vec![0.0; dim_z * dim_z];
        for i in 0..dim_z {
            for j in 0..dim_z {
                i_minus_a_t[j * dim_z + i] = i_minus_a[i * dim_z + j];
            }
        }
        let g = dense_solve(&i_minus_a_t, &dl, dim_z);
        let expect: Vec<f64> = (0..dim_theta)
            .map(|j| (0..dim_z).map(|i| b[i * dim_theta + j] * g[i]).sum())
            .collect();

        let num: f64 = grad
            .param_grad
            .iter()
            .zip(&expect)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let den = crate::tensor::l2_norm(&expect);
        assert!(num / den < 1e-8, "rel err {}", num / den);
    }

    #[test]
    fn phantom_k1_is_one_step_gradient() {
        let bundle = AffineBundle {
            dim_z: 4,
            dim_theta: 3,
            a: vec![0.1; 16],
            b: vec![0.5; 12],
            theta: vec![1.0, 2.0, 3.0],
        };
        let z = [0.1, 0.2, 0.3, 0.4];
        let dl = [1.0, 0.0, -1.0, 2.0];
        let phantom = phantom_gradient(&bundle, &z, &dl, 1, 1.0);
        let one_step = bundle.vjp_theta(&z, &dl);
        assert_eq!(phantom, one_step);
    }

    #[test]
    fn phantom_partial_sums_approach_ift() {
        // Scalar contraction a = 0.5: phantom(k) is the k-term geometric
        // partial sum, so the gap to the exact 2.0 is 0.5^k * 2.
        let bundle = AffineBundle {
            dim_z: 1,
            dim_theta: 1,
            a: vec![0.5],
            b: vec![1.0],
            theta: vec![1.0],
        };
        let z_star = [2.0];
        for k in [1usize, 3, 5, 10, 20] {
            let g = phantom_gradient(&bundle, &z_star, &[1.0], k, 1.0)[0];
            let expect_gap = 2.0 * 0.5f64.powi(k as i32);
            assert!(
                ((2.0 - g) - expect_gap).abs() < 1e-12,
                "k={k}: g={g}, gap {}",
                2.0 - g
            );
        }
        let g20 = phantom_gradient(&bundle, &z_star, &[1.0], 20, 1.0)[0];
        assert!((2.0 - g20).abs() / 2.0 <= 0.5f64.powi(20) + 1e-15);
    }

    #[test]
    fn phantom_equals_ift_for_zero_jacobian() {
        let bundle = AffineBundle {
            dim_z: 2,
            dim_theta: 2,
            a: vec![0.0; 4],
            b: vec![1.0, 2.0, 3.0, 4.0],
            theta: vec![0.5, -0.5],
        };
        let z_star = bundle.b_theta();
        let dl = [0.3, -0.8];
        let exact = ift_gradient(&bundle, &z_star, &dl, &backward_cfg()).param_grad;
        for k in 1..6 {
            let g = phantom_gradient(&bundle, &z_star, &dl, k, 1.0);
            for (a, b) in g.iter().zip(&exact) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn phantom_gap_nonincreasing_and_geometric() {
        let mut rng = Rng::new(5);
        let dim = 6;
        let mut a: Vec<f64> = (0..dim * dim).map(|_| rng.normal()).collect();
        // Crude scaling: row-sum norm bound 0.4 guarantees a contraction.
        let row_max: f64 = (0..dim)
            .map(|i| (0..dim).map(|j| a[i * dim + j].abs()).sum::<f64>())
            .fold(0.0, f64::max);
        for v in a.iter_mut() {
            *v *= 0.4 / row_max;
        }
        let bundle = AffineBundle {
            dim_z: dim,
            dim_theta: dim,
            a,
            b: (0..dim * dim).map(|_| rng.normal()).collect(),
            theta: (0..dim).map(|_| rng.normal()).collect(),
        };
        let (z_star, _) = solve(
            |z| bundle.eval(z),
            &vec![0.0; dim],
            &backward_cfg(),
        );
        let dl: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let exact = ift_gradient(&bundle, &z_star, &dl, &backward_cfg()).param_grad;
        let gap = |k: usize| -> f64 {
            let g = phantom_gradient(&bundle, &z_star, &dl, k, 1.0);
            g.iter()
                .zip(&exact)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        };
        let mut prev = f64::INFINITY;
        for k in 1..12 {
            let g = gap(k);
            assert!(g <= prev + 1e-12, "gap grew at k={k}");
            prev = g;
        }
        // Geometric decay with ratio at most the contraction factor.
        assert!(gap(8) <= gap(4) * 0.4f64.powi(4) + 1e-12);
    }

    #[test]
    fn one_step_memory_contract() {
        use std::sync::atomic::{AtomicUsize, Ordering};

        struct Counting<'a> {
            inner: &'a AffineBundle,
            vjp_calls: AtomicUsize,
            eval_calls: AtomicUsize,
        }
        impl VjpBundle for Counting<'_> {
            fn state_dim(&self) -> usize {
                self.inner.state_dim()
            }
            fn param_dim(&self) -> usize {
                self.inner.param_dim()
            }
            fn eval(&self, z: &[f64]) -> Vec<f64> {
                self.eval_calls.fetch_add(1, Ordering::SeqCst);
                self.inner.eval(z)
            }
            fn vjp_z(&self, z: &[f64], cot: &[f64]) -> Vec<f64> {
                self.vjp_calls.fetch_add(1, Ordering::SeqCst);
                self.inner.vjp_z(z, cot)
            }
            fn vjp_theta(&self, z: &[f64], cot: &[f64]) -> Vec<f64> {
                self.vjp_calls.fetch_add(1, Ordering::SeqCst);
                self.inner.vjp_theta(z, cot)
            }
        }

        let inner = AffineBundle {
            dim_z: 3,
            dim_theta: 2,
            a: vec![0.2; 9],
            b: vec![1.0; 6],
            theta: vec![0.5, 0.5],
        };
        for forward_iters in [8usize, 16, 40] {
            let counting = Counting {
                inner: &inner,
                vjp_calls: AtomicUsize::new(0),
                eval_calls: AtomicUsize::new(0),
            };
            // Forward solve with varying budgets...
            let fwd_cfg = SolverConfig {
                max_iters: forward_iters,
                rel_tol: 0.0,
                method: Method::Picard,
                ..SolverConfig::default()
            };
            let (z_star, _) = solve(|z| counting.eval(z), &vec![0.0; 3], &fwd_cfg);
            counting.eval_calls.store(0, Ordering::SeqCst);
            // ...must not change the backward cost: exactly one VJP
            // evaluation pair and no retained per-iteration state.
            let _ = phantom_gradient(&counting, &z_star, &[1.0, 1.0, 1.0], 1, 1.0);
            assert_eq!(counting.vjp_calls.load(Ordering::SeqCst), 1);
            assert_eq!(counting.eval_calls.load(Ordering::SeqCst), 0);
        }
    }

    #[test]
    fn vjp_linear_in_cotangent() {
        let mut rng = Rng::new(9);
        let bundle = AffineBundle {
            dim_z: 5,
            dim_theta: 4,
            a: (0..25).map(|_| rng.normal()).collect(),
            b: (0..20).map(|_| rng.normal()).collect(),
            theta: (0..4).map(|_| rng.normal()).collect(),
        };
        let z: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let v1: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let v2: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let (a, b) = (1.3, -0.7);
        let combo: Vec<f64> = v1.iter().zip(&v2).map(|(x, y)| a * x + b * y).collect();
        let lhs = bundle.vjp_z(&z, &combo);
        let rhs: Vec<f64> = bundle
            .vjp_z(&z, &v1)
            .iter()
            .zip(&bundle.vjp_z(&z, &v2))
            .map(|(x, y)| a * x + b * y)
            .collect();
        for (x, y) in lhs.iter().zip(&rhs) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn hutchinson_scaled_identity_exact_with_rademacher() {
        // f(z) = c z in d dims: per-probe |J^T eps|^2 = c^2 |eps|^2 and
        // rademacher probes have |eps|^2 = d exactly.
        let d = 7;
        let c = 1.5;
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            a[i * d + i] = c;
        }
        let bundle = AffineBundle {
            dim_z: d,
            dim_theta: 1,
            a,
            b: vec![0.0; d],
            theta: vec![0.0],
        };
        let z = vec![0.0; d];
        let mut rng = Rng::new(3);
        for n_probes in [1usize, 3, 10] {
            let est = hutchinson_frobenius(
                &bundle,
                &z,
                n_probes,
                &mut rng,
                ProbeDistribution::Rademacher,
            );
            assert!((est - c * c * d as f64).abs() < 1e-10, "n={n_probes}: {est}");
        }
    }

    #[test]
    fn hutchinson_zero_for_constant_map() {
        let bundle = AffineBundle {
            dim_z: 4,
            dim_theta: 1,
            a: vec![0.0; 16],
            b: vec![1.0; 4],
            theta: vec![2.0],
        };
        let mut rng = Rng::new(4);
        let est =
            hutchinson_frobenius(&bundle, &[0.0; 4], 50, &mut rng, ProbeDistribution::Gaussian);
        assert_eq!(est, 0.0);
    }

    #[test]
    fn hutchinson_diagonal_within_tolerance() {
        // J = diag(1, 2, 3): |J|_F^2 = 14.
        let d = 3;
        let mut a = vec![0.0; 9];
        a[0] = 1.0;
        a[4] = 2.0;
        a[8] = 3.0;
        let bundle = AffineBundle {
            dim_z: d,
            dim_theta: 1,
            a,
            b: vec![0.0; 3],
            theta: vec![0.0],
        };
        let mut rng = Rng::new(12);
        let est = hutchinson_frobenius(
            &bundle,
            &[0.0; 3],
            10_000,
            &mut rng,
            ProbeDistribution::Gaussian,
        );
        assert!((est - 14.0).abs() / 14.0 < 0.05, "estimate {est}");
    }

    #[test]
    fn hutchinson_unbiased_at_scale() {
        let d = 5;
        let mut a = vec![0.0; d * d];
        let diag = [0.5, 1.0, 1.5, 2.0, 2.5];
        let mut expect = 0.0;
        for i in 0..d {
            a[i * d + i] = diag[i];
            expect += diag[i] * diag[i];
        }
        let bundle = AffineBundle {
            dim_z: d,
            dim_theta: 1,
            a,
            b: vec![0.0; d],
            theta: vec![0.0],
        };
        let mut rng = Rng::new(2025);
        let est = hutchinson_frobenius(
            &bundle,
            &vec![0.0; d],
            100_000,
            &mut rng,
            ProbeDistribution::Gaussian,
        );
        assert!((est - expect).abs() / expect < 0.02, "estimate {est} vs {expect}");
    }

    #[test]
    fn fd_check_quadratic_loss() {
        let theta = [1.0, -2.0, 3.0, 0.5];
        let grad: Vec<f64> = theta.iter().map(|t| 2.0 * t).collect();
        let loss = |t: &[f64]| t.iter().map(|x| x * x).sum::<f64>();
        let mut rng = Rng::new(6);
        let err = finite_difference_check(loss, &theta, &grad, 1e-5, 4, &mut rng);
        assert!(err <= 1e-6, "err {err}");
    }

    #[test]
    fn fd_check_detects_wrong_gradient() {
        let theta = [1.0, -2.0, 3.0, 0.5];
        let wrong: Vec<f64> = theta.iter().map(|t| 4.0 * t).collect();
        let loss = |t: &[f64]| t.iter().map(|x| x * x).sum::<f64>();
        let mut rng = Rng::new(7);
        let err = finite_difference_check(loss, &theta, &wrong, 1e-5, 4, &mut rng);
        assert!((err - 0.5).abs() < 1e-4, "err {err}");
    }
}
