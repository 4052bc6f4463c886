//! Experiment configuration: JSON schema with defaults, strict unknown
//! key rejection, and dotted-path overrides.

use crate::{CliError, Result};
use deqflow_core::deq::{CorrectionSchedule, GradientMode, Placement};
use deqflow_core::flow::{ModelConfig, WarpKind};
use deqflow_core::solver::{Method, SolverConfig};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientKind {
    Ift,
    Phantom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradientConfig {
    pub mode: GradientKind,
    /// Phantom unroll depth.
    pub k: usize,
    /// Phantom damping in (0, 1].
    pub lambda: f64,
    /// Use the ConvGRU update gate as a per-coordinate damping in place
    /// of the scalar lambda (phantom mode only).
    pub adaptive_lambda: bool,
}

impl Default for GradientConfig {
    fn default() -> Self {
        GradientConfig {
            mode: GradientKind::Phantom,
            k: 1,
            lambda: 1.0,
            adaptive_lambda: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectionConfig {
    /// Number of correction terms; 0 disables.
    pub freq: usize,
    /// Loss weights; omitted means the geometric default 0.8^(r-i+1).
    pub gammas: Option<Vec<f64>>,
    pub placement: Placement,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        CorrectionConfig {
            freq: 1,
            gammas: None,
            placement: Placement::Uniform,
        }
    }
}

impl CorrectionConfig {
    pub fn schedule(&self) -> Result<CorrectionSchedule> {
        let schedule = match &self.gammas {
            None => {
                let mut s = CorrectionSchedule::geometric(self.freq);
                s.placement = self.placement;
                s
            }
            Some(g) => CorrectionSchedule {
                freq: self.freq,
                gammas: g.clone(),
                placement: self.placement,
            },
        };
        schedule
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(schedule)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 4e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-5,
            clip_norm: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    /// Streams in the held-out evaluation set.
    pub n_streams: usize,
    /// Frames per evaluation stream (each contributes frames-1 samples).
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub max_disp: f64,
    /// Motion scale of the synthetic random walk; 0 freezes the scene.
    pub smoothness: f64,
    pub warp: WarpKind,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            n_streams: 16,
            frames: 2,
            height: 64,
            width: 64,
            max_disp: 3.0,
            smoothness: 1.0,
            warp: WarpKind::Affine,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Evaluate every this many steps (plus before and after training).
    pub eval_gap: usize,
    /// Flush log files every this many rows.
    pub flush_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            steps: 2000,
            batch_size: 4,
            eval_gap: 200,
            flush_every: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub forward_solver: SolverConfig,
    /// Adjoint solver for IFT gradients; omitted means the forward
    /// config.
    pub backward_solver: Option<SolverConfig>,
    pub gradient: GradientConfig,
    pub correction: CorrectionConfig,
    pub optimizer: OptimizerConfig,
    pub data: DataConfig,
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn gradient_mode(&self) -> Result<GradientMode> {
        match self.gradient.mode {
            GradientKind::Ift => Ok(GradientMode::Ift {
                backward: self.backward_solver(),
            }),
            GradientKind::Phantom => {
                if self.gradient.k < 1 {
                    return Err(CliError::Config("gradient.k must be at least 1".into()));
                }
                if !(self.gradient.lambda > 0.0 && self.gradient.lambda <= 1.0) {
                    return Err(CliError::Config(
                        "gradient.lambda must lie in (0, 1]".into(),
                    ));
                }
                Ok(GradientMode::Phantom {
                    k: self.gradient.k,
                    lambda: self.gradient.lambda,
                })
            }
        }
    }

    pub fn backward_solver(&self) -> SolverConfig {
        self.backward_solver
            .clone()
            .unwrap_or_else(|| self.forward_solver.clone())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.forward_solver
            .validate()
            .map_err(CliError::Config)?;
        if let Some(b) = &self.backward_solver {
            b.validate().map_err(CliError::Config)?;
        }
        self.gradient_mode()?;
        self.correction.schedule()?;
        if self.run.batch_size == 0 {
            return Err(CliError::Config("run.batch_size must be positive".into()));
        }
        if self.run.eval_gap == 0 {
            return Err(CliError::Config("run.eval_gap must be positive".into()));
        }
        if self.data.n_streams == 0 || self.data.frames < 2 {
            return Err(CliError::Config(
                "data.n_streams must be positive and data.frames at least 2".into(),
            ));
        }
        if self.optimizer.lr <= 0.0 || self.optimizer.clip_norm <= 0.0 {
            return Err(CliError::Config(
                "optimizer.lr and optimizer.clip_norm must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn method(&self) -> Method {
        self.forward_solver.method
    }
}

/// Loads a config file, applies `--override key=value` pairs (dotted
/// paths into the JSON tree) and an optional seed override, then parses
/// strictly.
pub fn load_config(
    path: &Path,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    for pair in overrides {
        apply_override(&mut value, pair)?;
    }
    if let Some(s) = seed {
        apply_override(&mut value, &format!("data.seed={s}"))?;
    }
    let config: ExperimentConfig = serde_json::from_value(value)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

fn apply_override(root: &mut serde_json::Value, pair: &str) -> Result<()> {
    let (path, raw) = pair
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override '{pair}' is not key=value")))?;
    let parsed: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        if !node.is_object() {
            return Err(CliError::Config(format!(
                "override path '{path}' crosses a non-object at '{seg}'"
            )));
        }
        let map = node.as_object_mut().unwrap();
        if i + 1 == segments.len() {
            map.insert(seg.to_string(), parsed);
            return Ok(());
        }
        node = map
            .entry(seg.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("empty override path");
}

/// Copies the fully resolved config into the run's output directory.
pub fn echo_config(config: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", out_dir.display())))?;
    let path = out_dir.join("config.json");
    let json = serde_json::to_string_pretty(config)
        .map_err(|e| CliError::Config(e.to_string()))?;
    fs::write(&path, json + "\n")
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}
