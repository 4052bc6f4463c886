//! Miniature correlation-volume flow estimator used as the equilibrium
//! operator: a frozen random feature/context encoder, an all-pairs
//! correlation pyramid with windowed bilinear lookup, and a ConvGRU
//! update operator (plus an attention-augmented variant) with
//! hand-written VJPs. Also hosts the synthetic data generator with exact
//! affine ground truth and the flow metrics.

mod corr;
mod metrics;
mod operator;
mod params;
mod pipeline;
mod synth;

pub use corr::{correlation_lookup, correlation_lookup_vjp_flow, correlation_pyramid, CorrelationPyramid};
pub use metrics::{epe, f1_all, F1_ABS_THRESH, F1_REL_THRESH};
pub use operator::{gma_update, raft_update, raft_update_vjp, FlowInput, FlowOperator, UpdateExtras};
pub use params::{FlowModelParams, ParamEntry};
pub use pipeline::{encode, encode_context, flow_to_image_resolution, prepare_sample, PreparedSample};
pub use synth::{synth_stream, AffineWarp, FlowSample, SynthConfig, TextureField, WarpKind};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OperatorKind {
    /// Correlation lookup -> motion conv -> ConvGRU -> residual flow head.
    Raft,
    /// Same with single-head attention aggregation of motion features.
    Gma,
}

/// Channel and geometry hyperparameters of the flow model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature channels produced by the encoder.
    pub c_f: usize,
    /// Context channels.
    pub c_q: usize,
    /// Hidden-state channels.
    pub c_h: usize,
    /// Motion-feature channels.
    pub c_m: usize,
    /// Attention projection channels (GMA only).
    pub c_att: usize,
    /// Total encoder stride; the feature grid is `H/stride x W/stride`.
    pub stride: usize,
    /// Correlation pyramid levels.
    pub p_levels: usize,
    /// Correlation lookup radius.
    pub radius: usize,
    pub operator: OperatorKind,
}

/// Width of the intermediate encoder layer.
pub const ENCODER_MID_CHANNELS: usize = 16;

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            c_f: 32,
            c_q: 32,
            c_h: 32,
            c_m: 32,
            c_att: 32,
            stride: 8,
            p_levels: 2,
            radius: 3,
            operator: OperatorKind::Raft,
        }
    }
}

impl ModelConfig {
    /// Channels produced by the correlation lookup:
    /// `p_levels * (2 radius + 1)^2`.
    pub fn lookup_channels(&self) -> usize {
        let window = 2 * self.radius + 1;
        self.p_levels * window * window
    }

    /// Input channels of the motion encoder: `[q, f, lookup]`.
    pub fn motion_in_channels(&self) -> usize {
        self.c_q + 2 + self.lookup_channels()
    }

    /// Channels of the GRU input alongside the hidden state.
    pub fn gru_aux_channels(&self) -> usize {
        match self.operator {
            OperatorKind::Raft => self.c_m + self.c_q,
            OperatorKind::Gma => 2 * self.c_m + self.c_q,
        }
    }

    /// Encoder layer strides `(s1, s2)` with `s1 * s2 == stride`.
    pub fn encoder_strides(&self) -> (usize, usize) {
        (self.stride / 2, 2)
    }

    pub fn validate(&self) -> crate::Result<()> {
        let fields = [
            (self.c_f, "c_f"),
            (self.c_q, "c_q"),
            (self.c_h, "c_h"),
            (self.c_m, "c_m"),
            (self.c_att, "c_att"),
            (self.p_levels, "p_levels"),
        ];
        for (v, name) in fields {
            if v == 0 {
                return Err(crate::CoreError::InvalidConfig(format!(
                    "model.{name} must be positive"
                )));
            }
        }
        if !matches!(self.stride, 2 | 4 | 8 | 16) {
            return Err(crate::CoreError::InvalidConfig(
                "model.stride must be one of 2, 4, 8, 16".into(),
            ));
        }
        Ok(())
    }

    /// Feature-grid size for an image of the given size.
    pub fn feature_dims(&self, height: usize, width: usize) -> crate::Result<(usize, usize)> {
        if height % self.stride != 0 || width % self.stride != 0 {
            return Err(crate::CoreError::arg(
                "encode",
                format!(
                    "image {height}x{width} not divisible by stride {}",
                    self.stride
                ),
            ));
        }
        Ok((height / self.stride, width / self.stride))
    }
}
