use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::alignnet::{AlignDims, AlignNetConfig};
use crate::distill::DistillConfig;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::lightcontrol::LightControlConfig;
use crate::mmdit::{MmditConfig, TapPosition};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PipelineMode {
    Sequential,
    Overlapped,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimestepMode {
    /// Always the first denoising step from pure noise (`t = 1`).
    Fixed,
    /// `t ~ U[t_lo, 1]`, with the latent taken one teacher Euler step from
    /// the noise.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimestepConfig {
    pub mode: TimestepMode,
    pub t_lo: f64,
}

impl Default for TimestepConfig {
    fn default() -> Self {
        TimestepConfig {
            mode: TimestepMode::Fixed,
            t_lo: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// UTF-8 file with one prompt per line; synthetic prompts when absent.
    pub prompts: Option<PathBuf>,
    pub train_prompts: usize,
    pub heldout_prompts: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            prompts: None,
            train_prompts: 512,
            heldout_prompts: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Euler steps used for held-out final latents.
    pub sample_steps: usize,
    /// Smoothing factor of the reported loss curve.
    pub ema_alpha: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            sample_steps: 4,
            ema_alpha: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub train_pairs: usize,
    pub val_pairs: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            steps: 1000,
            batch_size: 8,
            lr: 1e-3,
            train_pairs: 256,
            val_pairs: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    /// Linear maps to adapt; every attention projection when absent.
    pub targets: Option<Vec<String>>,
    pub rank: usize,
    pub scale: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub train_pairs: usize,
    pub val_pairs: usize,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            targets: None,
            rank: 4,
            scale: 1.0,
            steps: 300,
            batch_size: 8,
            lr: 1e-3,
            train_pairs: 128,
            val_pairs: 32,
        }
    }
}

/// Full description of an experiment. Every field has a default, unknown
/// fields are rejected, and [`RunConfig::validate`] runs before anything is
/// allocated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Run seed: bridge initialization, batches, noise.
    pub seed: u64,
    /// Seed of every frozen component (encoders, generator).
    pub model_seed: u64,
    pub encoders: EncoderConfig,
    pub mmdit: MmditConfig,
    pub alignnet: AlignNetConfig,
    pub distill: DistillConfig,
    pub tap: TapPosition,
    pub optim: OptimConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub timestep: TimestepConfig,
    pub data: DataConfig,
    pub pipeline: PipelineMode,
    /// Forbid anything that could change reduction order between runs or
    /// between pipeline modes; equivalence is then checked bitwise.
    pub strict: bool,
    pub eval: EvalConfig,
    pub lightcontrol: LightControlConfig,
    pub stage2: Stage2Config,
    pub lora: LoraConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model_seed: 0,
            encoders: EncoderConfig::default(),
            mmdit: MmditConfig::default(),
            alignnet: AlignNetConfig::default(),
            distill: DistillConfig::default(),
            tap: TapPosition::Attn,
            optim: OptimConfig::default(),
            steps: 2000,
            batch_size: 8,
            timestep: TimestepConfig::default(),
            data: DataConfig::default(),
            pipeline: PipelineMode::Sequential,
            strict: false,
            eval: EvalConfig::default(),
            lightcontrol: LightControlConfig::default(),
            stage2: Stage2Config::default(),
            lora: LoraConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn align_dims(&self) -> AlignDims {
        AlignDims {
            m: self.encoders.stack_depth(),
            z: self.encoders.z,
            d_c: self.encoders.d_c,
            d_p: self.encoders.d_p,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::Config(msg.into())) };
        self.encoders.validate()?;
        self.mmdit.validate()?;
        self.alignnet.validate(self.align_dims())?;
        self.distill.validate()?;
        self.lightcontrol.resolve(&self.mmdit)?;
        let o = &self.optim;
        check(o.lr.is_finite() && o.lr > 0.0, "optim.lr must be positive")?;
        check((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2), "optim betas must lie in [0, 1)")?;
        check(o.eps > 0.0 && o.weight_decay >= 0.0, "optim.eps must be positive and weight_decay non-negative")?;
        check(self.batch_size > 0, "batch_size must be positive")?;
        check(self.data.train_prompts > 0, "data.train_prompts must be positive")?;
        check(self.data.heldout_prompts > 0, "data.heldout_prompts must be positive")?;
        check(
            (0.0..1.0).contains(&self.timestep.t_lo),
            "timestep.t_lo must lie in [0, 1)",
        )?;
        check(self.eval.sample_steps > 0, "eval.sample_steps must be positive")?;
        check(self.eval.ema_alpha > 0.0 && self.eval.ema_alpha <= 1.0, "eval.ema_alpha must lie in (0, 1]")?;
        let s = &self.stage2;
        check(s.batch_size > 0 && s.train_pairs > 0 && s.val_pairs > 0, "stage2 sizes must be positive")?;
        check(s.lr.is_finite() && s.lr > 0.0, "stage2.lr must be positive")?;
        let l = &self.lora;
        check(l.rank > 0, "lora.rank must be positive")?;
        check(l.scale.is_finite(), "lora.scale must be finite")?;
        check(l.batch_size > 0 && l.train_pairs > 0 && l.val_pairs > 0, "lora sizes must be positive")?;
        check(l.lr.is_finite() && l.lr > 0.0, "lora.lr must be positive")?;
        Ok(())
    }
}
