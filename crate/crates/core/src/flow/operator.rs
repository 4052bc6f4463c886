//! The equilibrium update operator and its hand-written reverse mode.
//!
//! One application maps the state `z = (h, f)` to
//!
//! ```text
//! x  = relu(Conv2d([q, f, lookup(C, f)]))
//! h' = ConvGRU(h, [x, q])           (with [xhat, x, q] for the
//!                                    attention variant)
//! f' = f + Conv2d(h')
//! ```
//!
//! closed over the constant input `(q, C)`. The VJP backpropagates
//! through every piece, including the bilinear correlation lookup's
//! dependence on the flow, producing cotangents against the state and
//! gradients against the flat parameter vector.

use super::corr::{correlation_lookup, correlation_lookup_vjp_flow, CorrelationPyramid};
use super::params::FlowModelParams;
use super::{ModelConfig, OperatorKind};
use crate::deq::{EquilibriumState, StateLayout};
use crate::error::CoreError;
use crate::grad::VjpBundle;
use crate::tensor::{concat_channels, conv2d, conv2d_vjp, conv2d_vjp_input, split_channels, Tensor};
use crate::Result;

/// Constant per-sample input of the equilibrium operator.
#[derive(Debug, Clone)]
pub struct FlowInput {
    /// Context embedding `[c_q, H, W]` at feature resolution.
    pub q: Tensor,
    pub pyr: CorrelationPyramid,
}

/// Extra forward outputs beyond the next state.
#[derive(Debug, Clone)]
pub struct UpdateExtras {
    /// ConvGRU update gate `[c_h, H, W]`, exposed for gate-adaptive
    /// phantom damping.
    pub gate: Tensor,
}

struct NamedKernel {
    w: Tensor,
    b: Tensor,
    w_off: usize,
    b_off: usize,
}

struct AttentionWeights {
    query: Tensor,
    key: Tensor,
    value: Tensor,
    query_off: usize,
    key_off: usize,
    value_off: usize,
}

struct Weights {
    motion: NamedKernel,
    gru_update: NamedKernel,
    gru_reset: NamedKernel,
    gru_cand: NamedKernel,
    head: NamedKernel,
    attention: Option<AttentionWeights>,
}

fn named_kernel(params: &FlowModelParams, base: &str) -> Result<NamedKernel> {
    let w_name = format!("{base}.weight");
    let b_name = format!("{base}.bias");
    Ok(NamedKernel {
        w: params.tensor(&w_name)?,
        b: params.tensor(&b_name)?,
        w_off: params.entry(&w_name)?.offset,
        b_off: params.entry(&b_name)?.offset,
    })
}

/// The operator bound to parameters and one sample's input; implements
/// [`VjpBundle`] over the flat state/parameter vectors.
pub struct FlowOperator<'a> {
    config: ModelConfig,
    layout: StateLayout,
    input: &'a FlowInput,
    weights: Weights,
    theta_len: usize,
}

struct ForwardCache {
    minp: Tensor,
    x_pre: Tensor,
    x: Tensor,
    hg: Tensor,
    zg: Tensor,
    rg: Tensor,
    cand_in: Tensor,
    cand: Tensor,
    h_new: Tensor,
    f_new: Tensor,
    attention: Option<AttentionCache>,
}

struct AttentionCache {
    q_proj: Vec<f64>,
    k_proj: Vec<f64>,
    v_proj: Vec<f64>,
    attn: Vec<f64>,
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `out[o, n] = sum_i w[o, i] input[i, n]` over flattened positions.
fn matmul_cn(w: &[f64], o: usize, i: usize, input: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; o * n];
    for oc in 0..o {
        let row = &w[oc * i..(oc + 1) * i];
        let dst = &mut out[oc * n..(oc + 1) * n];
        for (ic, &wv) in row.iter().enumerate() {
            if wv == 0.0 {
                continue;
            }
            let src = &input[ic * n..(ic + 1) * n];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += wv * s;
            }
        }
    }
    out
}

impl<'a> FlowOperator<'a> {
    pub fn new(params: &FlowModelParams, input: &'a FlowInput) -> Result<Self> {
        let config = *params.config();
        let qs = input.q.shape();
        if qs.len() != 3 || qs[0] != config.c_q {
            return Err(CoreError::shape(
                "FlowOperator::new",
                format!("q [{}, H, W]", config.c_q),
                format!("{qs:?}"),
            ));
        }
        let (h, w) = input.pyr.source_dims();
        if qs[1] != h || qs[2] != w {
            return Err(CoreError::shape(
                "FlowOperator::new",
                format!("pyramid source {h}x{w}"),
                format!("q {}x{}", qs[1], qs[2]),
            ));
        }
        if input.pyr.lookup_channels() != config.lookup_channels() {
            return Err(CoreError::shape(
                "FlowOperator::new",
                format!("{} lookup channels", config.lookup_channels()),
                format!("{}", input.pyr.lookup_channels()),
            ));
        }
        let attention = if config.operator == OperatorKind::Gma {
            Some(AttentionWeights {
                query: params.tensor("att.query.weight")?,
                key: params.tensor("att.key.weight")?,
                value: params.tensor("att.value.weight")?,
                query_off: params.entry("att.query.weight")?.offset,
                key_off: params.entry("att.key.weight")?.offset,
                value_off: params.entry("att.value.weight")?.offset,
            })
        } else {
            None
        };
        Ok(FlowOperator {
            config,
            layout: StateLayout::new(config.c_h, qs[1], qs[2]),
            input,
            weights: Weights {
                motion: named_kernel(params, "motion")?,
                gru_update: named_kernel(params, "gru.update")?,
                gru_reset: named_kernel(params, "gru.reset")?,
                gru_cand: named_kernel(params, "gru.cand")?,
                head: named_kernel(params, "head")?,
                attention,
            },
            theta_len: params.param_dim(),
        })
    }

    pub fn layout(&self) -> StateLayout {
        self.layout
    }

    fn positions(&self) -> usize {
        self.layout.height * self.layout.width
    }

    fn attention_forward(&self, x: &Tensor) -> (AttentionCache, Tensor) {
        let att = self.weights.attention.as_ref().expect("gma weights");
        let n = self.positions();
        let c_att = self.config.c_att;
        let c_m = self.config.c_m;
        let q_proj = matmul_cn(att.query.data(), c_att, self.config.c_q, self.input.q.data(), n);
        let k_proj = matmul_cn(att.key.data(), c_att, self.config.c_q, self.input.q.data(), n);
        let v_proj = matmul_cn(att.value.data(), c_m, c_m, x.data(), n);
        let scale = 1.0 / (c_att as f64).sqrt();
        let mut attn = vec![0.0; n * n];
        for p in 0..n {
            let row = &mut attn[p * n..(p + 1) * n];
            let mut max = f64::NEG_INFINITY;
            for (p2, r) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for c in 0..c_att {
                    acc += q_proj[c * n + p] * k_proj[c * n + p2];
                }
                *r = acc * scale;
                max = max.max(*r);
            }
            let mut total = 0.0;
            for r in row.iter_mut() {
                *r = (*r - max).exp();
                total += *r;
            }
            for r in row.iter_mut() {
                *r /= total;
            }
        }
        let mut xhat = vec![0.0; c_m * n];
        for c in 0..c_m {
            let v_row = &v_proj[c * n..(c + 1) * n];
            let dst = &mut xhat[c * n..(c + 1) * n];
            for p in 0..n {
                let a_row = &attn[p * n..(p + 1) * n];
                dst[p] = a_row.iter().zip(v_row).map(|(a, v)| a * v).sum();
            }
        }
        let xhat_t = Tensor::new(
            vec![c_m, self.layout.height, self.layout.width],
            xhat,
        )
        .unwrap();
        (
            AttentionCache {
                q_proj,
                k_proj,
                v_proj,
                attn,
            },
            xhat_t,
        )
    }

    fn forward(&self, h: &Tensor, f: &Tensor) -> Result<ForwardCache> {
        let w = &self.weights;
        let lkp = correlation_lookup(&self.input.pyr, f)?;
        let minp = concat_channels(&[&self.input.q, f, &lkp])?;
        let x_pre = conv2d(&minp, &w.motion.w, &w.motion.b, 1)?;
        let x = x_pre.map(|v| v.max(0.0));
        let (attention, aux) = match self.config.operator {
            OperatorKind::Raft => (None, concat_channels(&[&x, &self.input.q])?),
            OperatorKind::Gma => {
                let (cache, xhat) = self.attention_forward(&x);
                (Some(cache), concat_channels(&[&xhat, &x, &self.input.q])?)
            }
        };
        let hg = concat_channels(&[h, &aux])?;
        let zg = conv2d(&hg, &w.gru_update.w, &w.gru_update.b, 1)?.map(sigmoid);
        let rg = conv2d(&hg, &w.gru_reset.w, &w.gru_reset.b, 1)?.map(sigmoid);
        let rh = rg.mul(h)?;
        let cand_in = concat_channels(&[&rh, &aux])?;
        let cand = conv2d(&cand_in, &w.gru_cand.w, &w.gru_cand.b, 1)?.map(f64::tanh);
        let mut h_new = Tensor::zeros(h.shape());
        for i in 0..h_new.len() {
            let z = zg.data()[i];
            h_new.data_mut()[i] = (1.0 - z) * h.data()[i] + z * cand.data()[i];
        }
        let df = conv2d(&h_new, &w.head.w, &w.head.b, 1)?;
        let f_new = f.add(&df)?;
        Ok(ForwardCache {
            minp,
            x_pre,
            x,
            hg,
            zg,
            rg,
            cand_in,
            cand,
            h_new,
            f_new,
            attention,
        })
    }

    /// One operator application `(h, f) -> (h', f')` with extras.
    pub fn apply(&self, state: &EquilibriumState) -> Result<(EquilibriumState, UpdateExtras)> {
        let cache = self.forward(&state.h, &state.f)?;
        Ok((
            EquilibriumState {
                h: cache.h_new,
                f: cache.f_new,
            },
            UpdateExtras { gate: cache.zg },
        ))
    }

    /// Update gate at a flat state, for adaptive phantom damping.
    pub fn gate_at(&self, z: &[f64]) -> Result<Tensor> {
        let state = EquilibriumState::from_flat(&self.layout, z)?;
        let cache = self.forward(&state.h, &state.f)?;
        Ok(cache.zg)
    }

    fn attention_backward(
        &self,
        cache: &AttentionCache,
        x: &Tensor,
        cot_xhat: &Tensor,
        cot_x: &mut Tensor,
        theta_grad: Option<&mut [f64]>,
    ) {
        let att = self.weights.attention.as_ref().expect("gma weights");
        let n = self.positions();
        let c_att = self.config.c_att;
        let c_m = self.config.c_m;
        let c_q = self.config.c_q;
        let scale = 1.0 / (c_att as f64).sqrt();

        // xhat[c, p] = sum_p2 attn[p, p2] v[c, p2]
        let mut cot_attn = vec![0.0; n * n];
        for p in 0..n {
            let dst = &mut cot_attn[p * n..(p + 1) * n];
            for c in 0..c_m {
                let cx = cot_xhat.data()[c * n + p];
                if cx == 0.0 {
                    continue;
                }
                let v_row = &cache.v_proj[c * n..(c + 1) * n];
                for (d, v) in dst.iter_mut().zip(v_row) {
                    *d += cx * v;
                }
            }
        }
        let mut cot_v = vec![0.0; c_m * n];
        for c in 0..c_m {
            let dst = &mut cot_v[c * n..(c + 1) * n];
            for p in 0..n {
                let cx = cot_xhat.data()[c * n + p];
                if cx == 0.0 {
                    continue;
                }
                let a_row = &cache.attn[p * n..(p + 1) * n];
                for (d, a) in dst.iter_mut().zip(a_row) {
                    *d += cx * a;
                }
            }
        }
        // Softmax rows.
        let mut cot_logits = vec![0.0; n * n];
        for p in 0..n {
            let a_row = &cache.attn[p * n..(p + 1) * n];
            let c_row = &cot_attn[p * n..(p + 1) * n];
            let dot: f64 = a_row.iter().zip(c_row).map(|(a, c)| a * c).sum();
            let dst = &mut cot_logits[p * n..(p + 1) * n];
            for i in 0..n {
                dst[i] = a_row[i] * (c_row[i] - dot);
            }
        }
        // logits[p, p2] = scale * sum_c qp[c, p] kp[c, p2]
        let mut cot_qproj = vec![0.0; c_att * n];
        let mut cot_kproj = vec![0.0; c_att * n];
        for c in 0..c_att {
            let q_row = &cache.q_proj[c * n..(c + 1) * n];
            let k_row = &cache.k_proj[c * n..(c + 1) * n];
            let cq = &mut cot_qproj[c * n..(c + 1) * n];
            let ck = &mut cot_kproj[c * n..(c + 1) * n];
            for p in 0..n {
                let l_row = &cot_logits[p * n..(p + 1) * n];
                let mut acc = 0.0;
                for p2 in 0..n {
                    acc += l_row[p2] * k_row[p2];
                    ck[p2] += scale * l_row[p2] * q_row[p];
                }
                cq[p] += scale * acc;
            }
        }
        // Value projection: v = Wv x.
        for ic in 0..c_m {
            let dst = &mut cot_x.data_mut()[ic * n..(ic + 1) * n];
            for oc in 0..c_m {
                let wv = att.value.data()[oc * c_m + ic];
                if wv == 0.0 {
                    continue;
                }
                let src = &cot_v[oc * n..(oc + 1) * n];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wv * s;
                }
            }
        }
        if let Some(grad) = theta_grad {
            for oc in 0..c_m {
                let cot_row = &cot_v[oc * n..(oc + 1) * n];
                for ic in 0..c_m {
                    let x_row = &x.data()[ic * n..(ic + 1) * n];
                    grad[att.value_off + oc * c_m + ic] +=
                        cot_row.iter().zip(x_row).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            let q_in = self.input.q.data();
            for oc in 0..c_att {
                let cq_row = &cot_qproj[oc * n..(oc + 1) * n];
                let ck_row = &cot_kproj[oc * n..(oc + 1) * n];
                for ic in 0..c_q {
                    let in_row = &q_in[ic * n..(ic + 1) * n];
                    grad[att.query_off + oc * c_q + ic] +=
                        cq_row.iter().zip(in_row).map(|(a, b)| a * b).sum::<f64>();
                    grad[att.key_off + oc * c_q + ic] +=
                        ck_row.iter().zip(in_row).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
    }

    /// Reverse-mode through one application. `cot = (cot_h', cot_f')`.
    /// Returns the state cotangent and, when requested, the parameter
    /// gradient.
    fn backward(
        &self,
        h: &Tensor,
        f: &Tensor,
        cot_h_new: &Tensor,
        cot_f_new: &Tensor,
        want_theta: bool,
    ) -> Result<(Tensor, Tensor, Option<Vec<f64>>)> {
        let cache = self.forward(h, f)?;
        self.backward_with_cache(&cache, h, f, cot_h_new, cot_f_new, want_theta)
    }

    /// [`Self::backward`] with the forward intermediates already
    /// computed, so repeated VJPs at one point share the forward pass.
    fn backward_with_cache(
        &self,
        cache: &ForwardCache,
        h: &Tensor,
        f: &Tensor,
        cot_h_new: &Tensor,
        cot_f_new: &Tensor,
        want_theta: bool,
    ) -> Result<(Tensor, Tensor, Option<Vec<f64>>)> {
        let w = &self.weights;
        let mut theta_grad = if want_theta {
            Some(vec![0.0; self.theta_len])
        } else {
            None
        };

        // f' = f + conv(h'): flow cotangent passes through, head feeds h'.
        let mut cot_f = cot_f_new.clone();
        let mut cot_h_total = cot_h_new.clone();
        if want_theta {
            let (cot_hn, g_w, g_b) = conv2d_vjp(&cache.h_new, &w.head.w, cot_f_new, 1)?;
            cot_h_total = cot_h_total.add(&cot_hn)?;
            let grad = theta_grad.as_mut().unwrap();
            grad[w.head.w_off..w.head.w_off + g_w.len()].copy_from_slice(g_w.data());
            grad[w.head.b_off..w.head.b_off + g_b.len()].copy_from_slice(g_b.data());
        } else {
            let cot_hn = conv2d_vjp_input(cache.h_new.shape(), &w.head.w, cot_f_new, 1)?;
            cot_h_total = cot_h_total.add(&cot_hn)?;
        }

        // h' = (1 - zg) h + zg cand
        let mut cot_zg = Tensor::zeros(cache.zg.shape());
        let mut cot_h = Tensor::zeros(h.shape());
        let mut cot_cand = Tensor::zeros(cache.cand.shape());
        for i in 0..cot_h_total.len() {
            let chn = cot_h_total.data()[i];
            let z = cache.zg.data()[i];
            cot_zg.data_mut()[i] = chn * (cache.cand.data()[i] - h.data()[i]);
            cot_h.data_mut()[i] = chn * (1.0 - z);
            cot_cand.data_mut()[i] = chn * z;
        }

        // cand = tanh(conv(cand_in))
        let cot_cand_pre = {
            let mut t = cot_cand;
            for i in 0..t.len() {
                let c = cache.cand.data()[i];
                t.data_mut()[i] *= 1.0 - c * c;
            }
            t
        };
        let cot_cand_in = if want_theta {
            let (ci, g_w, g_b) = conv2d_vjp(&cache.cand_in, &w.gru_cand.w, &cot_cand_pre, 1)?;
            let grad = theta_grad.as_mut().unwrap();
            grad[w.gru_cand.w_off..w.gru_cand.w_off + g_w.len()].copy_from_slice(g_w.data());
            grad[w.gru_cand.b_off..w.gru_cand.b_off + g_b.len()].copy_from_slice(g_b.data());
            ci
        } else {
            conv2d_vjp_input(cache.cand_in.shape(), &w.gru_cand.w, &cot_cand_pre, 1)?
        };
        let aux_c = self.config.gru_aux_channels();
        let parts = split_channels(&cot_cand_in, &[self.config.c_h, aux_c])?;
        let (cot_rh, mut cot_aux) = (parts[0].clone(), parts[1].clone());

        // rh = rg * h
        let cot_rg = cot_rh.mul(h)?;
        cot_h = cot_h.add(&cot_rh.mul(&cache.rg)?)?;

        // Gates: sigmoid(conv(hg)).
        let mut cot_rg_pre = cot_rg;
        for i in 0..cot_rg_pre.len() {
            let s = cache.rg.data()[i];
            cot_rg_pre.data_mut()[i] *= s * (1.0 - s);
        }
        let mut cot_zg_pre = cot_zg;
        for i in 0..cot_zg_pre.len() {
            let s = cache.zg.data()[i];
            cot_zg_pre.data_mut()[i] *= s * (1.0 - s);
        }
        let cot_hg = if want_theta {
            let (hg_r, gr_w, gr_b) = conv2d_vjp(&cache.hg, &w.gru_reset.w, &cot_rg_pre, 1)?;
            let (hg_z, gz_w, gz_b) = conv2d_vjp(&cache.hg, &w.gru_update.w, &cot_zg_pre, 1)?;
            let grad = theta_grad.as_mut().unwrap();
            grad[w.gru_reset.w_off..w.gru_reset.w_off + gr_w.len()].copy_from_slice(gr_w.data());
            grad[w.gru_reset.b_off..w.gru_reset.b_off + gr_b.len()].copy_from_slice(gr_b.data());
            grad[w.gru_update.w_off..w.gru_update.w_off + gz_w.len()].copy_from_slice(gz_w.data());
            grad[w.gru_update.b_off..w.gru_update.b_off + gz_b.len()].copy_from_slice(gz_b.data());
            hg_r.add(&hg_z)?
        } else {
            let hg_r = conv2d_vjp_input(cache.hg.shape(), &w.gru_reset.w, &cot_rg_pre, 1)?;
            let hg_z = conv2d_vjp_input(cache.hg.shape(), &w.gru_update.w, &cot_zg_pre, 1)?;
            hg_r.add(&hg_z)?
        };
        let parts = split_channels(&cot_hg, &[self.config.c_h, aux_c])?;
        cot_h = cot_h.add(&parts[0])?;
        cot_aux = cot_aux.add(&parts[1])?;

        // Aux input: [x, q] or [xhat, x, q]; q is constant input.
        let mut cot_x = match self.config.operator {
            OperatorKind::Raft => {
                let parts = split_channels(&cot_aux, &[self.config.c_m, self.config.c_q])?;
                parts[0].clone()
            }
            OperatorKind::Gma => {
                let parts = split_channels(
                    &cot_aux,
                    &[self.config.c_m, self.config.c_m, self.config.c_q],
                )?;
                let mut cot_x = parts[1].clone();
                self.attention_backward(
                    cache.attention.as_ref().unwrap(),
                    &cache.x,
                    &parts[0],
                    &mut cot_x,
                    theta_grad.as_deref_mut(),
                );
                cot_x
            }
        };

        // x = relu(conv(minp))
        for i in 0..cot_x.len() {
            if cache.x_pre.data()[i] <= 0.0 {
                cot_x.data_mut()[i] = 0.0;
            }
        }
        let cot_minp = if want_theta {
            let (mi, g_w, g_b) = conv2d_vjp(&cache.minp, &w.motion.w, &cot_x, 1)?;
            let grad = theta_grad.as_mut().unwrap();
            grad[w.motion.w_off..w.motion.w_off + g_w.len()].copy_from_slice(g_w.data());
            grad[w.motion.b_off..w.motion.b_off + g_b.len()].copy_from_slice(g_b.data());
            mi
        } else {
            conv2d_vjp_input(cache.minp.shape(), &w.motion.w, &cot_x, 1)?
        };
        let parts = split_channels(
            &cot_minp,
            &[self.config.c_q, 2, self.config.lookup_channels()],
        )?;
        cot_f = cot_f.add(&parts[1])?;
        let cot_lkp = &parts[2];
        let lkp_flow = correlation_lookup_vjp_flow(&self.input.pyr, f, cot_lkp)?;
        cot_f = cot_f.add(&lkp_flow)?;

        Ok((cot_h, cot_f, theta_grad))
    }
}

impl VjpBundle for FlowOperator<'_> {
    fn state_dim(&self) -> usize {
        self.layout.total_len()
    }

    fn param_dim(&self) -> usize {
        self.theta_len
    }

    fn eval(&self, z: &[f64]) -> Vec<f64> {
        let state = EquilibriumState::from_flat(&self.layout, z).expect("state shape");
        let cache = self.forward(&state.h, &state.f).expect("operator forward");
        let mut out = Vec::with_capacity(z.len());
        out.extend_from_slice(cache.h_new.data());
        out.extend_from_slice(cache.f_new.data());
        out
    }

    fn vjp_z(&self, z: &[f64], cot: &[f64]) -> Vec<f64> {
        let state = EquilibriumState::from_flat(&self.layout, z).expect("state shape");
        let cot_state = EquilibriumState::from_flat(&self.layout, cot).expect("cotangent shape");
        let (cot_h, cot_f, _) = self
            .backward(&state.h, &state.f, &cot_state.h, &cot_state.f, false)
            .expect("operator backward");
        let mut out = Vec::with_capacity(z.len());
        out.extend_from_slice(cot_h.data());
        out.extend_from_slice(cot_f.data());
        out
    }

    fn vjp_theta(&self, z: &[f64], cot: &[f64]) -> Vec<f64> {
        let state = EquilibriumState::from_flat(&self.layout, z).expect("state shape");
        let cot_state = EquilibriumState::from_flat(&self.layout, cot).expect("cotangent shape");
        let (_, _, grad) = self
            .backward(&state.h, &state.f, &cot_state.h, &cot_state.f, true)
            .expect("operator backward");
        grad.unwrap()
    }

    fn vjp_z_at<'a>(&'a self, z: &[f64]) -> Box<dyn Fn(&[f64]) -> Vec<f64> + 'a> {
        let state = EquilibriumState::from_flat(&self.layout, z).expect("state shape");
        let cache = self.forward(&state.h, &state.f).expect("operator forward");
        Box::new(move |cot| {
            let cot_state =
                EquilibriumState::from_flat(&self.layout, cot).expect("cotangent shape");
            let (cot_h, cot_f, _) = self
                .backward_with_cache(&cache, &state.h, &state.f, &cot_state.h, &cot_state.f, false)
                .expect("operator backward");
            let mut out = Vec::with_capacity(cot.len());
            out.extend_from_slice(cot_h.data());
            out.extend_from_slice(cot_f.data());
            out
        })
    }
}

/// One RAFT-style update `(h, f) -> (h', f')` for params configured with
/// the plain operator.
pub fn raft_update(
    params: &FlowModelParams,
    input: &FlowInput,
    state: &EquilibriumState,
) -> Result<(EquilibriumState, UpdateExtras)> {
    if params.config().operator != OperatorKind::Raft {
        return Err(CoreError::arg("raft_update", "params configured for another operator"));
    }
    FlowOperator::new(params, input)?.apply(state)
}

/// Reverse mode of [`raft_update`]: returns the state cotangent and the
/// flat parameter gradient.
pub fn raft_update_vjp(
    params: &FlowModelParams,
    input: &FlowInput,
    state: &EquilibriumState,
    cot: &EquilibriumState,
) -> Result<(EquilibriumState, Vec<f64>)> {
    let op = FlowOperator::new(params, input)?;
    let (cot_h, cot_f, grad) = op.backward(&state.h, &state.f, &cot.h, &cot.f, true)?;
    Ok((EquilibriumState { h: cot_h, f: cot_f }, grad.unwrap()))
}

/// One attention-augmented update; params must carry the attention
/// projections.
pub fn gma_update(
    params: &FlowModelParams,
    input: &FlowInput,
    state: &EquilibriumState,
) -> Result<(EquilibriumState, UpdateExtras)> {
    if params.config().operator != OperatorKind::Gma {
        return Err(CoreError::arg("gma_update", "params lack attention projections"));
    }
    FlowOperator::new(params, input)?.apply(state)
}
