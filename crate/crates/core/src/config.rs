//! Experiment description shared by the trainer, the evaluator and the CLI.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GeometryConfig;
use crate::link::ChannelMode;
use crate::propagation::NoiseConfig;
use crate::surface::{ActivationKind, Smoothing};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelConfig {
    /// Rician factor (linear).
    pub kappa: f64,
    /// Total transmit power, split equally over the Tx antennas.
    pub tx_power_dbm: f64,
    pub mode: ChannelMode,
    pub noise: NoiseConfig,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self { kappa: 10.0, tx_power_dbm: 1.0, mode: ChannelMode::default(), noise: NoiseConfig::default() }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothingMode {
    /// Hard step forward, logistic surrogate backward.
    #[default]
    Hard,
    /// Logistic gate in the training forward as well.
    Smooth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurfaceConfig {
    pub kind: ActivationKind,
    /// Logistic temperature, relative to the layer reference amplitude.
    pub beta_temp: f64,
    pub smoothing: SmoothingMode,
    /// Initial raw threshold parameter.
    pub rho_init: f64,
    /// Samples in the reference-amplitude calibration pass.
    pub a_ref_samples: usize,
}

impl Default for SurfaceConfig {
    fn default() -> Self {
        Self {
            kind: ActivationKind::NonlinearPerUnit,
            beta_temp: 25.0,
            smoothing: SmoothingMode::Hard,
            rho_init: -4.0,
            a_ref_samples: 256,
        }
    }
}

impl SurfaceConfig {
    /// Forward smoothing used while training.
    pub fn training_smoothing(&self) -> Smoothing {
        match self.smoothing {
            SmoothingMode::Hard => Smoothing::Hard,
            SmoothingMode::Smooth => Smoothing::Smooth { beta_temp: self.beta_temp },
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    SoftmaxCe,
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip_norm: f64,
    pub loss_kind: LossKind,
    pub softmax_temp_scale: f64,
    pub equalizer_refresh_every: usize,
    pub eval_every: usize,
    /// Transmissions (of `tx_antennas` symbols each) per in-training SER estimate.
    pub eval_samples: usize,
    pub master_seed: Option<u64>,
    /// Worker threads; 0 uses every available core.
    pub threads: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            iterations: 200,
            lr: 0.02,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip_norm: 1.0,
            loss_kind: LossKind::SoftmaxCe,
            softmax_temp_scale: 0.1,
            equalizer_refresh_every: 50,
            eval_every: 2,
            eval_samples: 4096,
            master_seed: None,
            threads: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// Symbol decisions per SER estimate.
    pub trials: usize,
    /// Transmissions used to fit the frozen equalizer before evaluation.
    pub equalizer_samples: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { trials: 100_000, equalizer_samples: 4096 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Artifact directory. Left unset, front ends choose their own default.
    pub directory: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub geometry: GeometryConfig,
    pub channel: ChannelConfig,
    pub surface: SurfaceConfig,
    pub training: TrainingConfig,
    pub evaluation: EvaluationConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    /// Defaults with a seed, which is the one value that has none.
    pub fn with_seed(seed: u64) -> Self {
        let mut cfg = Self::default();
        cfg.training.master_seed = Some(seed);
        cfg
    }

    pub fn master_seed(&self) -> Result<u64> {
        self.training
            .master_seed
            .ok_or_else(|| Error::InvalidConfig("training.master_seed is required".into()))
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.channel.noise.validate()?;
        self.master_seed()?;
        let g = &self.geometry;
        if g.rx_antennas != g.tx_antennas {
            return Err(Error::InvalidConfig(format!(
                "geometry.rx_antennas ({}) must equal geometry.tx_antennas ({}): detection is per antenna",
                g.rx_antennas, g.tx_antennas
            )));
        }
        if g.cells_per_layer < g.tx_antennas {
            return Err(Error::InvalidConfig(format!(
                "geometry.cells_per_layer ({}) must be at least geometry.tx_antennas ({})",
                g.cells_per_layer, g.tx_antennas
            )));
        }
        if !(self.channel.kappa >= 0.0) {
            return Err(Error::InvalidConfig(format!("channel.kappa must be >= 0, got {}", self.channel.kappa)));
        }
        if !self.channel.tx_power_dbm.is_finite() {
            return Err(Error::InvalidConfig("channel.tx_power_dbm must be finite".into()));
        }
        if !(self.surface.beta_temp > 0.0) {
            return Err(Error::InvalidConfig(format!("surface.beta_temp must be > 0, got {}", self.surface.beta_temp)));
        }
        if !self.surface.rho_init.is_finite() {
            return Err(Error::InvalidConfig("surface.rho_init must be finite".into()));
        }
        let t = &self.training;
        for (key, v) in [
            ("training.batch_size", t.batch_size),
            ("training.equalizer_refresh_every", t.equalizer_refresh_every),
            ("training.eval_every", t.eval_every),
            ("training.eval_samples", t.eval_samples),
            ("surface.a_ref_samples", self.surface.a_ref_samples),
            ("evaluation.trials", self.evaluation.trials),
            ("evaluation.equalizer_samples", self.evaluation.equalizer_samples),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{key} must be at least 1")));
            }
        }
        for (key, v) in [
            ("training.lr", t.lr),
            ("training.eps", t.eps),
            ("training.grad_clip_norm", t.grad_clip_norm),
            ("training.softmax_temp_scale", t.softmax_temp_scale),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{key} must be positive, got {v}")));
            }
        }
        for (key, v) in [("training.beta1", t.beta1), ("training.beta2", t.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{key} must lie in [0, 1), got {v}")));
            }
        }
        Ok(())
    }
}
