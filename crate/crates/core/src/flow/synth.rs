//! Synthetic flow streams with exact ground truth.
//!
//! Each stream renders one band-limited procedural texture (a normalized
//! sum of random sinusoids, evaluable at any real coordinate) under a
//! chain of affine warps whose inter-frame parameters follow a smooth
//! random walk. Because warps are affine and exactly invertible, the
//! per-pixel ground-truth flow between consecutive frames is exact, with
//! no interpolation error anywhere.

use crate::error::CoreError;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::Result;
use serde::{Deserialize, Serialize};

/// Number of sinusoids per texture channel.
const WAVES_PER_CHANNEL: usize = 24;
/// Wavelength band of the texture, in pixels.
const MIN_WAVELENGTH: f64 = 4.0;
const MAX_WAVELENGTH: f64 = 32.0;

/// Band-limited random field with values in `[0, 1]`, exact at any real
/// coordinate.
#[derive(Debug, Clone)]
pub struct TextureField {
    channels: Vec<Vec<Wave>>,
    inv_amp_sums: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Wave {
    om_x: f64,
    om_y: f64,
    phase: f64,
    amp: f64,
}

impl TextureField {
    pub fn generate(rng: &mut Rng, n_channels: usize) -> Self {
        let mut channels = Vec::with_capacity(n_channels);
        let mut inv_amp_sums = Vec::with_capacity(n_channels);
        for _ in 0..n_channels {
            let mut waves = Vec::with_capacity(WAVES_PER_CHANNEL);
            let mut amp_sum = 0.0;
            for _ in 0..WAVES_PER_CHANNEL {
                let wavelength = rng.uniform_in(MIN_WAVELENGTH, MAX_WAVELENGTH);
                let k = std::f64::consts::TAU / wavelength;
                let angle = rng.uniform_in(0.0, std::f64::consts::TAU);
                let amp = rng.uniform_in(0.2, 1.0);
                amp_sum += amp;
                waves.push(Wave {
                    om_x: k * angle.cos(),
                    om_y: k * angle.sin(),
                    phase: rng.uniform_in(0.0, std::f64::consts::TAU),
                    amp,
                });
            }
            channels.push(waves);
            inv_amp_sums.push(1.0 / amp_sum);
        }
        TextureField {
            channels,
            inv_amp_sums,
        }
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    /// Value of channel `ch` at real coordinate `(x, y)`, in `[0, 1]`.
    pub fn sample(&self, ch: usize, x: f64, y: f64) -> f64 {
        let mut acc = 0.0;
        for w in &self.channels[ch] {
            acc += w.amp * (w.om_x * x + w.om_y * y + w.phase).sin();
        }
        0.5 + 0.5 * acc * self.inv_amp_sums[ch]
    }
}

/// Affine warp `w(c) = A (c - o) + o + t` around a fixed center `o`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineWarp {
    /// Row-major 2x2 linear part `[a11, a12, a21, a22]`.
    pub linear: [f64; 4],
    pub translation: [f64; 2],
    pub center: [f64; 2],
}

impl AffineWarp {
    pub fn identity(center: [f64; 2]) -> Self {
        AffineWarp {
            linear: [1.0, 0.0, 0.0, 1.0],
            translation: [0.0, 0.0],
            center,
        }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let dx = x - self.center[0];
        let dy = y - self.center[1];
        (
            self.linear[0] * dx + self.linear[1] * dy + self.center[0] + self.translation[0],
            self.linear[2] * dx + self.linear[3] * dy + self.center[1] + self.translation[1],
        )
    }

    /// Displacement `w(c) - c`.
    pub fn displacement(&self, x: f64, y: f64) -> (f64, f64) {
        let (wx, wy) = self.apply(x, y);
        (wx - x, wy - y)
    }

    pub fn det(&self) -> f64 {
        self.linear[0] * self.linear[3] - self.linear[1] * self.linear[2]
    }

    pub fn inverse(&self) -> Result<AffineWarp> {
        let det = self.det();
        if det.abs() < 1e-9 {
            return Err(CoreError::arg("AffineWarp::inverse", "singular linear part"));
        }
        let inv = [
            self.linear[3] / det,
            -self.linear[1] / det,
            -self.linear[2] / det,
            self.linear[0] / det,
        ];
        let t = [
            -(inv[0] * self.translation[0] + inv[1] * self.translation[1]),
            -(inv[2] * self.translation[0] + inv[3] * self.translation[1]),
        ];
        Ok(AffineWarp {
            linear: inv,
            translation: t,
            center: self.center,
        })
    }

    /// Composition `self(other(c))`; both warps must share a center.
    pub fn compose(&self, other: &AffineWarp) -> AffineWarp {
        let a = &self.linear;
        let b = &other.linear;
        AffineWarp {
            linear: [
                a[0] * b[0] + a[1] * b[2],
                a[0] * b[1] + a[1] * b[3],
                a[2] * b[0] + a[3] * b[2],
                a[2] * b[1] + a[3] * b[3],
            ],
            translation: [
                a[0] * other.translation[0] + a[1] * other.translation[1] + self.translation[0],
                a[2] * other.translation[0] + a[3] * other.translation[1] + self.translation[1],
            ],
            center: self.center,
        }
    }

    /// Largest displacement norm over the image corners; affine
    /// displacement fields attain their maximum at a vertex.
    pub fn max_corner_displacement(&self, width: usize, height: usize) -> f64 {
        let xs = [0.0, (width - 1) as f64];
        let ys = [0.0, (height - 1) as f64];
        let mut max = 0.0f64;
        for &x in &xs {
            for &y in &ys {
                let (dx, dy) = self.displacement(x, y);
                max = max.max((dx * dx + dy * dy).sqrt());
            }
        }
        max
    }

    /// Shrinks the displacement field by `s` in place: the scaled warp is
    /// `c + s (w(c) - c)`, still affine with the same center.
    fn scaled_displacement(&self, s: f64) -> AffineWarp {
        AffineWarp {
            linear: [
                1.0 + s * (self.linear[0] - 1.0),
                s * self.linear[1],
                s * self.linear[2],
                1.0 + s * (self.linear[3] - 1.0),
            ],
            translation: [s * self.translation[0], s * self.translation[1]],
            center: self.center,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WarpKind {
    /// Pure translations; ground-truth flow is constant.
    Translation,
    /// Full affine perturbations around the identity.
    Affine,
}

/// Generation settings for one stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Hard cap on the per-pixel displacement magnitude between frames.
    pub max_disp: f64,
    /// Motion scale in [0, 1]: scales both the initial inter-frame warp
    /// and the random-walk step between frames. Zero freezes the scene.
    pub smoothness: f64,
    pub warp: WarpKind,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 64,
            width: 64,
            max_disp: 3.0,
            smoothness: 1.0,
            warp: WarpKind::Affine,
        }
    }
}

/// One synthetic problem instance: an image pair, its exact ground-truth
/// flow at image resolution, and the generating warp.
#[derive(Debug, Clone)]
pub struct FlowSample {
    /// First frame `[3, H, W]`, values in `[0, 1]`.
    pub p1: Tensor,
    /// Second frame `[3, H, W]`; exactly the warp of the frame-1 content.
    pub p2: Tensor,
    /// Ground-truth flow `[2, H, W]` in pixels (dx, dy planes).
    pub f_gt: Tensor,
    /// Inter-frame warp that generated `f_gt`.
    pub warp: AffineWarp,
    /// Stream seed this sample came from.
    pub seed: u64,
}

/// Inter-frame warp parameters as a 6-vector around the identity:
/// (a11-1, a12, a21, a22-1, tx, ty).
fn warp_from_params(v: &[f64; 6], center: [f64; 2]) -> AffineWarp {
    AffineWarp {
        linear: [1.0 + v[0], v[1], v[2], 1.0 + v[3]],
        translation: [v[4], v[5]],
        center,
    }
}

fn clamp_warp(warp: AffineWarp, cfg: &SynthConfig) -> AffineWarp {
    let max_d = warp.max_corner_displacement(cfg.width, cfg.height);
    if max_d > cfg.max_disp && max_d > 0.0 {
        warp.scaled_displacement(cfg.max_disp / max_d)
    } else {
        warp
    }
}

fn render_frame(texture: &TextureField, warp_inv: &AffineWarp, h: usize, w: usize) -> Tensor {
    let mut t = Tensor::zeros(&[3, h, w]);
    let plane = h * w;
    let values = crate::par::map_range(plane, |px| {
        let (i, j) = (px / w, px % w);
        let (sx, sy) = warp_inv.apply(j as f64, i as f64);
        [
            texture.sample(0, sx, sy),
            texture.sample(1, sx, sy),
            texture.sample(2, sx, sy),
        ]
    });
    for (px, v) in values.iter().enumerate() {
        t.data_mut()[px] = v[0];
        t.data_mut()[plane + px] = v[1];
        t.data_mut()[2 * plane + px] = v[2];
    }
    t
}

fn flow_of_warp(warp: &AffineWarp, h: usize, w: usize) -> Tensor {
    let mut f = Tensor::zeros(&[2, h, w]);
    let plane = h * w;
    for i in 0..h {
        for j in 0..w {
            let (dx, dy) = warp.displacement(j as f64, i as f64);
            f.data_mut()[i * w + j] = dx;
            f.data_mut()[plane + i * w + j] = dy;
        }
    }
    f
}

/// Generates a coherent stream of `n_frames` frames and returns the
/// `n_frames - 1` consecutive-pair samples.
///
/// Frame `k` renders the stream texture under the cumulative warp `w_k`;
/// the inter-frame warps evolve by a random walk scaled by
/// `cfg.smoothness`, and every inter-frame displacement is clamped to
/// `cfg.max_disp`. For each sample, `p2` is exactly `p1`'s content warped
/// by the sample's warp, and `f_gt` is that warp's displacement field.
pub fn synth_stream(rng: &mut Rng, n_frames: usize, cfg: &SynthConfig) -> Result<Vec<FlowSample>> {
    if n_frames < 2 {
        return Err(CoreError::arg("synth_stream", "need at least 2 frames"));
    }
    if cfg.max_disp >= (cfg.height.min(cfg.width) as f64) / 4.0 {
        return Err(CoreError::arg(
            "synth_stream",
            format!(
                "max_disp {} too large for {}x{} frames",
                cfg.max_disp, cfg.height, cfg.width
            ),
        ));
    }
    let seed = rng.seed();
    let texture = TextureField::generate(rng, 3);
    let center = [
        (cfg.width - 1) as f64 / 2.0,
        (cfg.height - 1) as f64 / 2.0,
    ];
    let half_diag = (center[0] * center[0] + center[1] * center[1]).sqrt().max(1.0);

    // Parameter scales: translations up to ~max_disp, linear parts sized
    // so corner displacement is comparable.
    let sigma_t = cfg.max_disp;
    let sigma_l = cfg.max_disp / half_diag;
    let draw = |rng: &mut Rng, scale: f64, step: f64| -> [f64; 6] {
        let lin = match cfg.warp {
            WarpKind::Translation => [0.0; 4],
            WarpKind::Affine => {
                let mut l = [0.0; 4];
                for v in &mut l {
                    *v = rng.normal() * sigma_l * 0.5 * scale * step;
                }
                l
            }
        };
        [
            lin[0],
            lin[1],
            lin[2],
            lin[3],
            rng.normal() * sigma_t * scale * step,
            rng.normal() * sigma_t * scale * step,
        ]
    };

    let mut params = draw(rng, cfg.smoothness, 1.0);
    let mut cumulative = AffineWarp::identity(center);
    let mut prev_frame = render_frame(&texture, &cumulative.inverse()?, cfg.height, cfg.width);
    let mut samples = Vec::with_capacity(n_frames - 1);
    for _ in 1..n_frames {
        let delta = clamp_warp(warp_from_params(&params, center), cfg);
        cumulative = delta.compose(&cumulative);
        let frame = render_frame(&texture, &cumulative.inverse()?, cfg.height, cfg.width);
        samples.push(FlowSample {
            p1: prev_frame,
            p2: frame.clone(),
            f_gt: flow_of_warp(&delta, cfg.height, cfg.width),
            warp: delta,
            seed,
        });
        prev_frame = frame;
        // Random-walk step on the inter-frame parameters.
        let step = draw(rng, cfg.smoothness, 0.5);
        for (p, s) in params.iter_mut().zip(step) {
            *p += s;
        }
    }
    Ok(samples)
}
