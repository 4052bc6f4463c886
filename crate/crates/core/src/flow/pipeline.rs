//! Per-sample preparation: feature/context encoding, correlation
//! pyramid, and feature-resolution ground truth.

use super::corr::correlation_pyramid;
use super::operator::FlowInput;
use super::params::FlowModelParams;
use super::synth::FlowSample;
use crate::deq::StateLayout;
use crate::tensor::{avg_pool2d, conv2d_strided, upsample_bilinear, Tensor};
use crate::Result;

/// Everything the equilibrium layer needs for one sample.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub input: FlowInput,
    /// Ground-truth flow pooled to the feature grid and rescaled to
    /// feature-pixel units.
    pub f_gt_feat: Tensor,
    pub layout: StateLayout,
}

/// Two-layer strided convolution encoder with ReLU after each layer.
fn encode_with(
    params: &FlowModelParams,
    prefix: &str,
    image: &Tensor,
) -> Result<Tensor> {
    let (s1, s2) = params.config().encoder_strides();
    let w1 = params.tensor(&format!("{prefix}.conv1.weight"))?;
    let b1 = params.tensor(&format!("{prefix}.conv1.bias"))?;
    let w2 = params.tensor(&format!("{prefix}.conv2.weight"))?;
    let b2 = params.tensor(&format!("{prefix}.conv2.bias"))?;
    let mid = conv2d_strided(image, &w1, &b1, 2, s1)?.map(|v| v.max(0.0));
    Ok(conv2d_strided(&mid, &w2, &b2, 1, s2)?.map(|v| v.max(0.0)))
}

/// Feature encoder `[3, H, W] -> [c_f, H/S, W/S]`.
pub fn encode(params: &FlowModelParams, image: &Tensor) -> Result<Tensor> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    params.config().feature_dims(h, w)?;
    encode_with(params, "enc", image)
}

/// Context encoder `[3, H, W] -> [c_q, H/S, W/S]`.
pub fn encode_context(params: &FlowModelParams, image: &Tensor) -> Result<Tensor> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    params.config().feature_dims(h, w)?;
    encode_with(params, "ctx", image)
}

/// Builds the operator input and feature-resolution supervision for one
/// sample. Images are mapped from `[0, 1]` to `[-1, 1]` before encoding.
pub fn prepare_sample(params: &FlowModelParams, sample: &FlowSample) -> Result<PreparedSample> {
    let cfg = params.config();
    let (h, w) = (sample.p1.shape()[1], sample.p1.shape()[2]);
    let (fh, fw) = cfg.feature_dims(h, w)?;
    let p1c = sample.p1.map(|v| 2.0 * v - 1.0);
    let p2c = sample.p2.map(|v| 2.0 * v - 1.0);
    let u1 = encode(params, &p1c)?;
    let u2 = encode(params, &p2c)?;
    let q = encode_context(params, &p1c)?;
    let pyr = correlation_pyramid(&u1, &u2, cfg.p_levels, cfg.radius)?;
    let f_gt_feat =
        avg_pool2d(&sample.f_gt, cfg.stride)?.scale(1.0 / cfg.stride as f64);
    Ok(PreparedSample {
        input: FlowInput { q, pyr },
        f_gt_feat,
        layout: StateLayout::new(cfg.c_h, fh, fw),
    })
}

/// Upsamples a feature-resolution flow to image resolution, rescaling the
/// displacement values by the stride.
pub fn flow_to_image_resolution(f_feat: &Tensor, stride: usize) -> Result<Tensor> {
    Ok(upsample_bilinear(f_feat, stride)?.scale(stride as f64))
}
