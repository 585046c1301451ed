//! Run configuration: TOML on disk, validated field by field, with named
//! presets for the component ablations.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::EncoderConfig;
use crate::error::{io_err, Error, Result};
use crate::objectives::LossConfig;
use crate::protohead::ProtoHeadConfig;
use crate::views::MaskConfig;
use crate::windows::WindowConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
    Plateau,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub schedule: LrSchedule,
    pub weight_decay: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 32,
            lr: 1e-3,
            lr_min: 0.0,
            schedule: LrSchedule::Cosine,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtoConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip: f64,
    pub episodes_per_epoch: usize,
    /// Windows drawn per class for each episode.
    pub per_class: usize,
    pub k_shot: usize,
}

impl Default for ProtoConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 1e-4,
            weight_decay: 1e-4,
            clip: 1.0,
            episodes_per_epoch: 10,
            per_class: 16,
            k_shot: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub epochs: usize,
    pub batch: usize,
    pub head_lr: f64,
    pub backbone_lr: f64,
    pub freeze_epochs: usize,
    pub schedule: LrSchedule,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    /// Learning rate for every parameter when training from random init.
    pub scratch_lr: f64,
    pub weight_decay: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch: 32,
            head_lr: 1e-4,
            backbone_lr: 1e-5,
            freeze_epochs: 10,
            schedule: LrSchedule::Plateau,
            plateau_patience: 5,
            plateau_factor: 0.5,
            scratch_lr: 1e-3,
            weight_decay: 0.0,
        }
    }
}

/// Component switches. Each named preset sets all four.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub dual_path: bool,
    pub enhanced_encoders: bool,
    pub hybrid_loss: bool,
    pub proto_head: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Preset::Full.flags()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    SinglePathBase,
    DualPathBase,
    DualPathEnhanced,
    DualPathEnhancedLoss,
    Full,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::SinglePathBase,
        Preset::DualPathBase,
        Preset::DualPathEnhanced,
        Preset::DualPathEnhancedLoss,
        Preset::Full,
    ];

    pub fn flags(self) -> AblationFlags {
        let (dual_path, enhanced_encoders, hybrid_loss, proto_head) = match self {
            Preset::SinglePathBase => (false, false, false, false),
            Preset::DualPathBase => (true, false, false, false),
            Preset::DualPathEnhanced => (true, true, false, false),
            Preset::DualPathEnhancedLoss => (true, true, true, false),
            Preset::Full => (true, true, true, true),
        };
        AblationFlags {
            dual_path,
            enhanced_encoders,
            hybrid_loss,
            proto_head,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::SinglePathBase => "single-path-base",
            Preset::DualPathBase => "dual-path-base",
            Preset::DualPathEnhanced => "dual-path-enhanced",
            Preset::DualPathEnhancedLoss => "dual-path-enhanced-loss",
            Preset::Full => "full",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub split: (f64, f64, f64),
    pub windows: WindowConfig,
    pub masks: MaskConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            split: (0.6, 0.2, 0.2),
            windows: WindowConfig::default(),
            masks: MaskConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub bootstrap_resamples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            bootstrap_resamples: crate::stats::BOOTSTRAP_RESAMPLES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Fraction of training patients whose labels are used for fine-tuning.
    pub label_fraction: f64,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub proto_head: ProtoHeadConfig,
    pub pretrain: PretrainConfig,
    pub proto: ProtoConfig,
    pub baseline: BaselineConfig,
    pub ablation: AblationFlags,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            label_fraction: 1.0,
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            loss: LossConfig::default(),
            proto_head: ProtoHeadConfig::default(),
            pretrain: PretrainConfig::default(),
            proto: ProtoConfig::default(),
            baseline: BaselineConfig::default(),
            ablation: AblationFlags::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn field_err(field: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        field: field.to_string(),
        msg: msg.into(),
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(field_err(field, format!("must be positive, got {v}")))
    }
}

fn nonzero(field: &str, v: usize) -> Result<()> {
    if v > 0 {
        Ok(())
    } else {
        Err(field_err(field, "must be > 0"))
    }
}

fn unit_fraction(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(field_err(field, format!("must lie in (0, 1], got {v}")))
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        Self {
            ablation: preset.flags(),
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let field = msg
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "<document>".to_string());
            field_err(&field, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        unit_fraction("label_fraction", self.label_fraction)?;
        let (a, b, c) = self.data.split;
        for (name, v) in [("data.split.train", a), ("data.split.val", b), ("data.split.test", c)] {
            positive(name, v)?;
        }
        nonzero("pretrain.epochs", self.pretrain.epochs)?;
        if self.pretrain.batch < 2 {
            return Err(field_err("pretrain.batch", "contrastive batches need at least 2 windows"));
        }
        positive("pretrain.lr", self.pretrain.lr)?;
        if self.pretrain.lr_min < 0.0 || self.pretrain.lr_min > self.pretrain.lr {
            return Err(field_err("pretrain.lr_min", "must lie in [0, lr]"));
        }
        if self.pretrain.schedule == LrSchedule::Plateau {
            return Err(field_err("pretrain.schedule", "pretraining has no validation signal for plateau"));
        }
        nonzero("proto.epochs", self.proto.epochs)?;
        positive("proto.lr", self.proto.lr)?;
        positive("proto.clip", self.proto.clip)?;
        nonzero("proto.episodes_per_epoch", self.proto.episodes_per_epoch)?;
        nonzero("proto.k_shot", self.proto.k_shot)?;
        if self.proto.per_class < 2 {
            return Err(field_err("proto.per_class", "need a support and a query member per class"));
        }
        nonzero("baseline.epochs", self.baseline.epochs)?;
        if self.baseline.batch < 2 {
            return Err(field_err("baseline.batch", "batch norm needs at least 2 windows"));
        }
        positive("baseline.head_lr", self.baseline.head_lr)?;
        positive("baseline.backbone_lr", self.baseline.backbone_lr)?;
        positive("baseline.scratch_lr", self.baseline.scratch_lr)?;
        if !(self.baseline.plateau_factor > 0.0 && self.baseline.plateau_factor < 1.0) {
            return Err(field_err("baseline.plateau_factor", "must lie in (0, 1)"));
        }
        nonzero("eval.bootstrap_resamples", self.eval.bootstrap_resamples)?;
        for (name, v) in [
            ("weight_decay", self.pretrain.weight_decay),
            ("proto.weight_decay", self.proto.weight_decay),
            ("baseline.weight_decay", self.baseline.weight_decay),
        ] {
            if v < 0.0 {
                return Err(field_err(name, "must be non-negative"));
            }
        }
        self.encoder
            .validate()
            .map_err(|e| field_err("encoder", e.to_string()))?;
        self.loss.validate().map_err(|e| field_err("loss", e.to_string()))?;
        if self.proto_head.metric_dim < 2 {
            return Err(field_err("proto_head.metric_dim", "must be at least 2"));
        }
        Ok(())
    }

    /// Applies the ablation flags to the module wiring. Single-path runs
    /// keep only the within-waveform loss term; without the hybrid loss the
    /// Wasserstein weight is zero.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let f = self.ablation;
        c.encoder.dual_path = f.dual_path;
        c.encoder.enhanced = f.enhanced_encoders;
        if !f.hybrid_loss {
            c.loss.alpha = 0.0;
        }
        if !f.dual_path {
            c.loss.weights = (1.0, 0.0, 0.0);
        }
        c
    }
}
