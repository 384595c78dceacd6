//! Flat `key = value` experiment configuration.
//!
//! Lines starting with `#` are comments. Unknown keys are errors. A
//! `vit.preset` line resets all backbone dimensions, so later `vit.*` lines
//! refine the preset rather than being overwritten by it.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::decoders::{BackboneInit, DecoderMode, FineTuneConfig, SegLoss};
use crate::dino::{CropPlan, DinoConfig};
use crate::error::{Error, Result};
use crate::geodata::SynthConfig;
use crate::optim::OptimizerKind;
use crate::vit::{Preset, ViTConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub tile_size: usize,
    pub band_height: f64,
    pub smoothness: f64,
    /// Speckle looks; 0 disables speckle.
    pub looks: f64,
}

impl DataConfig {
    pub fn synth(&self, seed: u64, size: usize) -> SynthConfig {
        SynthConfig {
            seed,
            size,
            smoothness: self.smoothness,
            looks: (self.looks > 0.0).then_some(self.looks),
            ..SynthConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridConfig {
    pub modes: Vec<DecoderMode>,
    pub fractions: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub preset: Preset,
    pub vit: ViTConfig,
    pub dino: DinoConfig,
    /// Collapse is declared when teacher entropy stays below this fraction
    /// of `ln K` for three consecutive epochs.
    pub collapse_floor: f64,
    pub finetune: FineTuneConfig,
    pub data: DataConfig,
    pub grid: GridConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::with_preset(Preset::Desk)
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::config(format!("invalid value '{value}' for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("invalid boolean '{value}' for {key}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

/// Shortest faithful text for a float, using an exponent for tiny values.
fn num(v: f64) -> String {
    if v != 0.0 && v.abs() < 1e-4 {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

fn join<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    items.iter().map(f).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn with_preset(preset: Preset) -> Self {
        let vit = ViTConfig::preset(preset);
        let dino = DinoConfig::for_backbone(&vit);
        Self {
            seed: 0,
            preset,
            dino,
            collapse_floor: 0.1,
            finetune: FineTuneConfig::default(),
            data: DataConfig { tile_size: vit.image_size, band_height: 1.0, smoothness: 16.0, looks: 5.0 },
            grid: GridConfig {
                modes: vec![DecoderMode::AttnUnet, DecoderMode::TokenDecoder],
                fractions: vec![0.001, 0.01, 0.1],
            },
            vit,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value, got '{line}'", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.dino.crops.validate()?;
        self.finetune.validate()?;
        for (k, t) in [("dino.student_temp", self.dino.student_temp), ("dino.teacher_temp", self.dino.teacher_temp.final_value), ("dino.warmup_teacher_temp", self.dino.teacher_temp.warmup)] {
            if !(t > 0.0) {
                return Err(Error::config(format!("{k} must be positive, got {t}")));
            }
        }
        if self.data.tile_size != self.vit.image_size {
            return Err(Error::config(format!(
                "data.tile_size {} differs from vit.image_size {}",
                self.data.tile_size, self.vit.image_size
            )));
        }
        if self.dino.batch_size == 0 || self.finetune.batch_size == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        if self.grid.fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return Err(Error::config("grid.fractions must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let d = &mut self.dino;
        let f = &mut self.finetune;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "vit.preset" => {
                let p: Preset = v.parse()?;
                let keep = (self.data.tile_size == self.vit.image_size).then_some(());
                self.preset = p;
                self.vit = ViTConfig::preset(p);
                if keep.is_some() {
                    self.data.tile_size = self.vit.image_size;
                }
                d.crops = CropPlan { global_size: self.vit.image_size, local_size: self.vit.image_size / 2, ..d.crops };
            }
            "vit.image_size" => {
                self.vit.image_size = parse(key, v)?;
                self.data.tile_size = self.vit.image_size;
                d.crops.global_size = self.vit.image_size;
                d.crops.local_size = self.vit.image_size / 2;
            }
            "vit.patch_size" => self.vit.patch_size = parse(key, v)?,
            "vit.in_channels" => self.vit.in_channels = parse(key, v)?,
            "vit.embed_dim" => self.vit.embed_dim = parse(key, v)?,
            "vit.depth" => self.vit.depth = parse(key, v)?,
            "vit.num_heads" => self.vit.num_heads = parse(key, v)?,
            "vit.mlp_ratio" => self.vit.mlp_ratio = parse(key, v)?,
            "dino.center_momentum" => d.center_momentum = parse(key, v)?,
            "dino.teacher_momentum" => d.teacher_momentum = parse(key, v)?,
            "dino.student_temp" => d.student_temp = parse(key, v)?,
            "dino.teacher_temp" => d.teacher_temp.final_value = parse(key, v)?,
            "dino.warmup_teacher_temp" => d.teacher_temp.warmup = parse(key, v)?,
            "dino.warmup_teacher_epochs" => d.teacher_temp.warmup_epochs = parse(key, v)?,
            "dino.learning_rate" => d.optimizer.learning_rate = parse(key, v)?,
            "dino.optimizer" => d.optimizer.kind = parse_optimizer(key, v)?,
            "dino.beta1" => d.optimizer.beta1 = parse(key, v)?,
            "dino.beta2" => d.optimizer.beta2 = parse(key, v)?,
            "dino.epsilon" => d.optimizer.epsilon = parse(key, v)?,
            "dino.epochs" => d.epochs = parse(key, v)?,
            "dino.batch_size" => d.batch_size = parse(key, v)?,
            "dino.centering" => d.centering = parse_bool(key, v)?,
            "dino.head_hidden_dim" => d.head.hidden_dim = parse(key, v)?,
            "dino.head_bottleneck_dim" => d.head.bottleneck_dim = parse(key, v)?,
            "dino.out_dim" => d.head.out_dim = parse(key, v)?,
            "dino.global_crops" => d.crops.n_global = parse(key, v)?,
            "dino.local_crops" => d.crops.n_local = parse(key, v)?,
            "dino.global_scale_min" => d.crops.global_scale.0 = parse(key, v)?,
            "dino.global_scale_max" => d.crops.global_scale.1 = parse(key, v)?,
            "dino.local_scale_min" => d.crops.local_scale.0 = parse(key, v)?,
            "dino.local_scale_max" => d.crops.local_scale.1 = parse(key, v)?,
            "dino.flip_prob" => d.crops.flip_prob = parse(key, v)?,
            "dino.collapse_floor" => self.collapse_floor = parse(key, v)?,
            "finetune.mode" => f.mode = v.parse()?,
            "finetune.init" => {
                f.init = match v {
                    "scratch" => BackboneInit::Scratch,
                    "pretrained" => BackboneInit::Pretrained,
                    _ => return Err(Error::config(format!("invalid value '{v}' for {key} (scratch or pretrained)"))),
                }
            }
            "finetune.freeze_backbone" => f.freeze_backbone = parse_bool(key, v)?,
            "finetune.fraction" => f.train_fraction = parse(key, v)?,
            "finetune.epochs" => f.epochs = parse(key, v)?,
            "finetune.batch_size" => f.batch_size = parse(key, v)?,
            "finetune.learning_rate" => f.optimizer.learning_rate = parse(key, v)?,
            "finetune.optimizer" => f.optimizer.kind = parse_optimizer(key, v)?,
            "finetune.loss" => {
                f.loss = match v {
                    "categorical" => SegLoss::Categorical,
                    "sigmoid_bce" => SegLoss::SigmoidBce,
                    _ => return Err(Error::config(format!("invalid value '{v}' for {key} (categorical or sigmoid_bce)"))),
                }
            }
            "finetune.unet_widths" => f.unet_widths = parse_list(key, v)?,
            "finetune.unet_bottleneck" => f.unet_bottleneck = parse(key, v)?,
            "data.tile_size" => self.data.tile_size = parse(key, v)?,
            "data.band_height" => self.data.band_height = parse(key, v)?,
            "data.smoothness" => self.data.smoothness = parse(key, v)?,
            "data.looks" => self.data.looks = parse(key, v)?,
            "grid.modes" => self.grid.modes = parse_list(key, v)?,
            "grid.fractions" => self.grid.fractions = parse_list(key, v)?,
            _ => return Err(Error::config(format!("unknown configuration key '{key}'"))),
        }
        Ok(())
    }

    /// Every key with its current value, in dump order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.dino;
        let f = &self.finetune;
        let v = &self.vit;
        vec![
            ("seed", self.seed.to_string()),
            ("vit.preset", self.preset.name().into()),
            ("vit.image_size", v.image_size.to_string()),
            ("vit.patch_size", v.patch_size.to_string()),
            ("vit.in_channels", v.in_channels.to_string()),
            ("vit.embed_dim", v.embed_dim.to_string()),
            ("vit.depth", v.depth.to_string()),
            ("vit.num_heads", v.num_heads.to_string()),
            ("vit.mlp_ratio", v.mlp_ratio.to_string()),
            ("dino.center_momentum", num(d.center_momentum)),
            ("dino.teacher_momentum", num(d.teacher_momentum)),
            ("dino.student_temp", num(d.student_temp)),
            ("dino.teacher_temp", num(d.teacher_temp.final_value)),
            ("dino.warmup_teacher_temp", num(d.teacher_temp.warmup)),
            ("dino.warmup_teacher_epochs", num(d.teacher_temp.warmup_epochs)),
            ("dino.learning_rate", num(d.optimizer.learning_rate)),
            ("dino.optimizer", optimizer_name(d.optimizer.kind).into()),
            ("dino.beta1", num(d.optimizer.beta1)),
            ("dino.beta2", num(d.optimizer.beta2)),
            ("dino.epsilon", num(d.optimizer.epsilon)),
            ("dino.epochs", d.epochs.to_string()),
            ("dino.batch_size", d.batch_size.to_string()),
            ("dino.centering", d.centering.to_string()),
            ("dino.head_hidden_dim", d.head.hidden_dim.to_string()),
            ("dino.head_bottleneck_dim", d.head.bottleneck_dim.to_string()),
            ("dino.out_dim", d.head.out_dim.to_string()),
            ("dino.global_crops", d.crops.n_global.to_string()),
            ("dino.local_crops", d.crops.n_local.to_string()),
            ("dino.global_scale_min", num(d.crops.global_scale.0)),
            ("dino.global_scale_max", num(d.crops.global_scale.1)),
            ("dino.local_scale_min", num(d.crops.local_scale.0)),
            ("dino.local_scale_max", num(d.crops.local_scale.1)),
            ("dino.flip_prob", num(d.crops.flip_prob)),
            ("dino.collapse_floor", num(self.collapse_floor)),
            ("finetune.mode", f.mode.name().into()),
            ("finetune.init", f.init.name().into()),
            ("finetune.freeze_backbone", f.freeze_backbone.to_string()),
            ("finetune.fraction", num(f.train_fraction)),
            ("finetune.epochs", f.epochs.to_string()),
            ("finetune.batch_size", f.batch_size.to_string()),
            ("finetune.learning_rate", num(f.optimizer.learning_rate)),
            ("finetune.optimizer", optimizer_name(f.optimizer.kind).into()),
            (
                "finetune.loss",
                match f.loss {
                    SegLoss::Categorical => "categorical",
                    SegLoss::SigmoidBce => "sigmoid_bce",
                }
                .into(),
            ),
            ("finetune.unet_widths", join(&f.unet_widths, |w| w.to_string())),
            ("finetune.unet_bottleneck", f.unet_bottleneck.to_string()),
            ("data.tile_size", self.data.tile_size.to_string()),
            ("data.band_height", num(self.data.band_height)),
            ("data.smoothness", num(self.data.smoothness)),
            ("data.looks", num(self.data.looks)),
            ("grid.modes", join(&self.grid.modes, |m| m.name().to_string())),
            ("grid.fractions", join(&self.grid.fractions, |&x| num(x))),
        ]
    }

    /// Plain `key = value` text that [`ExperimentConfig::parse`] reads back
    /// to an equal configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Annotated defaults for `--dump-defaults`.
    pub fn dump_defaults() -> String {
        let cfg = Self::default();
        let mut s = String::from(
            "# Default experiment configuration (desk preset).\n\
             # Full-size backbones: embedding dimension 192 (tiny) / 768 (base),\n\
             # attention heads 3 (tiny) / 12 (base); select them with vit.preset = tiny or base.\n",
        );
        let mut section = "";
        for (k, v) in cfg.entries() {
            let sec = k.split('.').next().unwrap_or("");
            if sec != section && k.contains('.') {
                s.push('\n');
                section = sec;
            }
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

}

fn parse_optimizer(key: &str, v: &str) -> Result<OptimizerKind> {
    match v {
        "adam" => Ok(OptimizerKind::Adam),
        "sgd" => Ok(OptimizerKind::Sgd),
        _ => Err(Error::config(format!("invalid value '{v}' for {key} (adam or sgd)"))),
    }
}

fn optimizer_name(k: OptimizerKind) -> &'static str {
    match k {
        OptimizerKind::Adam => "adam",
        OptimizerKind::Sgd => "sgd",
    }
}
