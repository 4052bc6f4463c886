//! Flat parameter store for the flow model.
//!
//! Every kernel and bias lives as a named slice of one flat `f64` vector,
//! so optimizers and gradient code can treat the whole model as a single
//! vector while the operator code addresses pieces by name. Encoder and
//! context parameters are marked non-trainable: the equilibrium operator
//! receives its input `(q, correlation pyramid)` as a constant, and its
//! VJPs cover the update operator's parameters only.

use super::{ModelConfig, OperatorKind, ENCODER_MID_CHANNELS};
use crate::error::CoreError;
use crate::rng::Rng;
use crate::tensor::{load_named_tensors, save_named_tensors, NamedTensor, Tensor};
use crate::Result;
use std::ops::Range;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub trainable: bool,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModelParams {
    config: ModelConfig,
    entries: Vec<ParamEntry>,
    theta: Vec<f64>,
}

fn layout_for(config: &ModelConfig) -> Vec<ParamEntry> {
    let mid = ENCODER_MID_CHANNELS;
    let gru_in = config.c_h + config.gru_aux_channels();
    let mut specs: Vec<(String, Vec<usize>, bool)> = vec![
        ("enc.conv1.weight".into(), vec![mid, 3, 5, 5], false),
        ("enc.conv1.bias".into(), vec![mid], false),
        ("enc.conv2.weight".into(), vec![config.c_f, mid, 3, 3], false),
        ("enc.conv2.bias".into(), vec![config.c_f], false),
        ("ctx.conv1.weight".into(), vec![mid, 3, 5, 5], false),
        ("ctx.conv1.bias".into(), vec![mid], false),
        ("ctx.conv2.weight".into(), vec![config.c_q, mid, 3, 3], false),
        ("ctx.conv2.bias".into(), vec![config.c_q], false),
        (
            "motion.weight".into(),
            vec![config.c_m, config.motion_in_channels(), 3, 3],
            true,
        ),
        ("motion.bias".into(), vec![config.c_m], true),
        (
            "gru.update.weight".into(),
            vec![config.c_h, gru_in, 3, 3],
            true,
        ),
        ("gru.update.bias".into(), vec![config.c_h], true),
        (
            "gru.reset.weight".into(),
            vec![config.c_h, gru_in, 3, 3],
            true,
        ),
        ("gru.reset.bias".into(), vec![config.c_h], true),
        (
            "gru.cand.weight".into(),
            vec![config.c_h, gru_in, 3, 3],
            true,
        ),
        ("gru.cand.bias".into(), vec![config.c_h], true),
        ("head.weight".into(), vec![2, config.c_h, 3, 3], true),
        ("head.bias".into(), vec![2], true),
    ];
    if config.operator == OperatorKind::Gma {
        specs.push((
            "att.query.weight".into(),
            vec![config.c_att, config.c_q],
            true,
        ));
        specs.push(("att.key.weight".into(), vec![config.c_att, config.c_q], true));
        specs.push(("att.value.weight".into(), vec![config.c_m, config.c_m], true));
    }
    let mut entries = Vec::with_capacity(specs.len());
    let mut offset = 0;
    for (name, shape, trainable) in specs {
        let len: usize = shape.iter().product();
        entries.push(ParamEntry {
            name,
            shape,
            offset,
            trainable,
        });
        offset += len;
    }
    entries
}

impl FlowModelParams {
    /// Random initialization: kernels scaled by `1/sqrt(fan_in)`, flow
    /// head further shrunk so the operator starts near the identity flow
    /// update, biases zero.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let entries = layout_for(&config);
        let total = entries.iter().map(|e| e.len()).sum();
        let mut theta = vec![0.0; total];
        for e in &entries {
            if e.name.ends_with(".bias") {
                continue;
            }
            let fan_in: usize = e.shape[1..].iter().product();
            let mut scale = 1.0 / (fan_in as f64).sqrt();
            if e.name == "head.weight" {
                scale *= 0.1;
            }
            for v in &mut theta[e.range()] {
                *v = scale * rng.normal();
            }
        }
        Ok(FlowModelParams {
            config,
            entries,
            theta,
        })
    }

    /// All-zero parameters (used by tests of closed-form behavior).
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let entries = layout_for(&config);
        let total = entries.iter().map(|e| e.len()).sum();
        Ok(FlowModelParams {
            config,
            entries,
            theta: vec![0.0; total],
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn param_dim(&self) -> usize {
        self.theta.len()
    }

    pub fn entry(&self, name: &str) -> Result<&ParamEntry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| CoreError::arg("FlowModelParams::entry", format!("unknown parameter {name}")))
    }

    /// Parameter values as an owned tensor.
    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let e = self.entry(name)?;
        Tensor::new(e.shape.clone(), self.theta[e.range()].to_vec())
    }

    /// Per-element trainability mask.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.theta.len()];
        for e in &self.entries {
            if e.trainable {
                for m in &mut mask[e.range()] {
                    *m = true;
                }
            }
        }
        mask
    }

    /// Writes the parameter vector in the manifest + blob checkpoint
    /// format.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let tensors: Vec<NamedTensor> = self
            .entries
            .iter()
            .map(|e| {
                NamedTensor::new(
                    e.name.clone(),
                    Tensor::new(e.shape.clone(), self.theta[e.range()].to_vec()).unwrap(),
                )
            })
            .collect();
        save_named_tensors(dir, &tensors)
    }

    /// Loads a checkpoint, verifying that the stored names and shapes
    /// match the layout derived from `config`.
    pub fn load(dir: &Path, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let entries = layout_for(&config);
        let stored = load_named_tensors(dir)?;
        let total = entries.iter().map(|e| e.len()).sum();
        let mut theta = vec![0.0; total];
        for e in &entries {
            let t = stored
                .iter()
                .find(|nt| nt.name == e.name)
                .ok_or_else(|| CoreError::Manifest {
                    path: dir.display().to_string(),
                    reason: format!("checkpoint is missing parameter {}", e.name),
                })?;
            if t.tensor.shape() != e.shape.as_slice() {
                return Err(CoreError::Manifest {
                    path: dir.display().to_string(),
                    reason: format!(
                        "parameter {} has shape {:?}, expected {:?}",
                        e.name,
                        t.tensor.shape(),
                        e.shape
                    ),
                });
            }
            theta[e.range()].copy_from_slice(t.tensor.data());
        }
        Ok(FlowModelParams {
            config,
            entries,
            theta,
        })
    }
}
