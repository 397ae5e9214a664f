//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use vidmae::evaluation::PipelineConfig;
use vidmae::model::ModelConfig;
use vidmae::tokenizer::PatchSize;
use vidmae::{Error, Result};

/// Keys that name files rather than settings.
pub const PATH_KEYS: &[&str] = &["data", "checkpoint", "gru", "features"];

/// Every accepted settings key, in rendering order.
pub const KEYS: &[&str] = &[
    "preset",
    "seed",
    "frames",
    "height",
    "width",
    "patch_t",
    "patch_h",
    "patch_w",
    "dim",
    "depth",
    "heads",
    "mlp_ratio",
    "decoder_dim",
    "decoder_depth",
    "decoder_heads",
    "pos_mode",
    "pos_learnable",
    "patch_bias",
    "strategy",
    "ratio",
    "alpha",
    "past",
    "loss",
    "normalize",
    "steps",
    "warmup_steps",
    "batch_size",
    "lr",
    "beta1",
    "beta2",
    "weight_decay",
    "grad_clip",
    "finetune_epochs",
    "finetune_lr",
    "finetune_batch_size",
    "finetune_warmup_steps",
    "finetune_weight_decay",
    "layer_decay",
    "temporal_epochs",
    "temporal_lr",
    "videos",
    "phases",
    "clips_min",
    "clips_max",
    "n_objects",
    "object_size",
    "speed_min",
    "speed_max",
    "label_fraction",
    "test_fraction",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Tiny,
    VitB,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Tiny => "tiny",
            Preset::VitB => "vit-b",
        }
    }

    pub fn pipeline(self) -> PipelineConfig {
        match self {
            Preset::Tiny => PipelineConfig::tiny(),
            Preset::VitB => PipelineConfig {
                model: ModelConfig::vit_b(),
                object_size: 32,
                speed: (2, 6),
                ..PipelineConfig::tiny()
            },
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "vit-b" => Ok(Preset::VitB),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected tiny, vit-b)"))),
        }
    }
}

/// Resolved settings plus any file paths.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub pipeline: PipelineConfig,
    pub paths: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Tiny,
            pipeline: Preset::Tiny.pipeline(),
            paths: BTreeMap::new(),
        }
    }
}

/// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_entries(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

impl RunConfig {
    /// Applies layers in order (later wins). The preset, wherever it is set,
    /// is applied first so explicit keys always override it.
    pub fn resolve(layers: &[Vec<(String, String)>]) -> Result<Self> {
        let mut preset = Preset::Tiny;
        for (k, v) in layers.iter().flatten() {
            if k == "preset" {
                preset = v.parse()?;
            }
        }
        let mut cfg = Self {
            preset,
            pipeline: preset.pipeline(),
            paths: BTreeMap::new(),
        };
        for (k, v) in layers.iter().flatten() {
            cfg.set(k, v)?;
        }
        cfg.pipeline.validate()?;
        Ok(cfg)
    }

    /// Defaults, then `file` (if any), then `flags`.
    pub fn load(file: Option<&Path>, flags: Vec<(String, String)>) -> Result<Self> {
        let mut layers = Vec::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)?;
            layers.push(parse_entries(&text)?);
        }
        layers.push(flags);
        Self::resolve(&layers)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if PATH_KEYS.contains(&key) {
            self.paths.insert(key.to_string(), value.to_string());
            return Ok(());
        }
        let p = &mut self.pipeline;
        let m = &mut p.model;
        let g = &mut m.geometry;
        match key {
            "preset" => self.preset = value.parse()?,
            "seed" => p.seed = parse(key, value)?,
            "frames" => g.frames = parse(key, value)?,
            "height" => g.height = parse(key, value)?,
            "width" => g.width = parse(key, value)?,
            "patch_t" => g.patch = PatchSize { t: parse(key, value)?, ..g.patch },
            "patch_h" => g.patch = PatchSize { h: parse(key, value)?, ..g.patch },
            "patch_w" => g.patch = PatchSize { w: parse(key, value)?, ..g.patch },
            "dim" => m.dim = parse(key, value)?,
            "depth" => m.depth = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "mlp_ratio" => m.mlp_ratio = parse(key, value)?,
            "decoder_dim" => m.decoder_dim = parse(key, value)?,
            "decoder_depth" => m.decoder_depth = parse(key, value)?,
            "decoder_heads" => m.decoder_heads = parse(key, value)?,
            "pos_mode" => m.pos_mode = value.parse()?,
            "pos_learnable" => m.pos_learnable = parse_bool(key, value)?,
            "patch_bias" => m.patch_bias = parse_bool(key, value)?,
            "strategy" => p.pretrain.mask.strategy = value.parse()?,
            "ratio" => p.pretrain.mask.ratio = parse(key, value)?,
            "alpha" => p.pretrain.mask.alpha = parse(key, value)?,
            "past" => p.pretrain.mask.past = parse_bool(key, value)?,
            "loss" => p.pretrain.loss = value.parse()?,
            "normalize" => p.pretrain.normalize = parse_bool(key, value)?,
            "steps" => p.pretrain.steps = parse(key, value)?,
            "warmup_steps" => p.pretrain.warmup_steps = parse(key, value)?,
            "batch_size" => p.pretrain.batch_size = parse(key, value)?,
            "lr" => p.pretrain.base_lr = parse(key, value)?,
            "beta1" => p.pretrain.betas.0 = parse(key, value)?,
            "beta2" => p.pretrain.betas.1 = parse(key, value)?,
            "weight_decay" => p.pretrain.weight_decay = parse(key, value)?,
            "grad_clip" => {
                p.pretrain.grad_clip = match value {
                    "none" | "off" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "finetune_epochs" => p.finetune.epochs = parse(key, value)?,
            "finetune_lr" => p.finetune.base_lr = parse(key, value)?,
            "finetune_batch_size" => p.finetune.batch_size = parse(key, value)?,
            "finetune_warmup_steps" => p.finetune.warmup_steps = parse(key, value)?,
            "finetune_weight_decay" => p.finetune.weight_decay = parse(key, value)?,
            "layer_decay" => p.finetune.layer_decay = parse(key, value)?,
            "temporal_epochs" => p.temporal.epochs = parse(key, value)?,
            "temporal_lr" => p.temporal.base_lr = parse(key, value)?,
            "videos" => p.videos = parse(key, value)?,
            "phases" => p.phases = parse(key, value)?,
            "clips_min" => p.clips_per_phase.0 = parse(key, value)?,
            "clips_max" => p.clips_per_phase.1 = parse(key, value)?,
            "n_objects" => p.n_objects = parse(key, value)?,
            "object_size" => p.object_size = parse(key, value)?,
            "speed_min" => p.speed.0 = parse(key, value)?,
            "speed_max" => p.speed.1 = parse(key, value)?,
            "label_fraction" => p.label_fraction = parse(key, value)?,
            "test_fraction" => p.test_fraction = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        if let Some(v) = self.paths.get(key) {
            return Some(v.clone());
        }
        let p = &self.pipeline;
        let m = &p.model;
        let g = &m.geometry;
        let v = match key {
            "preset" => self.preset.as_str().to_string(),
            "seed" => p.seed.to_string(),
            "frames" => g.frames.to_string(),
            "height" => g.height.to_string(),
            "width" => g.width.to_string(),
            "patch_t" => g.patch.t.to_string(),
            "patch_h" => g.patch.h.to_string(),
            "patch_w" => g.patch.w.to_string(),
            "dim" => m.dim.to_string(),
            "depth" => m.depth.to_string(),
            "heads" => m.heads.to_string(),
            "mlp_ratio" => m.mlp_ratio.to_string(),
            "decoder_dim" => m.decoder_dim.to_string(),
            "decoder_depth" => m.decoder_depth.to_string(),
            "decoder_heads" => m.decoder_heads.to_string(),
            "pos_mode" => m.pos_mode.to_string(),
            "pos_learnable" => m.pos_learnable.to_string(),
            "patch_bias" => m.patch_bias.to_string(),
            "strategy" => p.pretrain.mask.strategy.as_str().to_string(),
            "ratio" => p.pretrain.mask.ratio.to_string(),
            "alpha" => p.pretrain.mask.alpha.to_string(),
            "past" => p.pretrain.mask.past.to_string(),
            "loss" => p.pretrain.loss.to_string(),
            "normalize" => p.pretrain.normalize.to_string(),
            "steps" => p.pretrain.steps.to_string(),
            "warmup_steps" => p.pretrain.warmup_steps.to_string(),
            "batch_size" => p.pretrain.batch_size.to_string(),
            "lr" => p.pretrain.base_lr.to_string(),
            "beta1" => p.pretrain.betas.0.to_string(),
            "beta2" => p.pretrain.betas.1.to_string(),
            "weight_decay" => p.pretrain.weight_decay.to_string(),
            "grad_clip" => p.pretrain.grad_clip.map_or("none".to_string(), |c| c.to_string()),
            "finetune_epochs" => p.finetune.epochs.to_string(),
            "finetune_lr" => p.finetune.base_lr.to_string(),
            "finetune_batch_size" => p.finetune.batch_size.to_string(),
            "finetune_warmup_steps" => p.finetune.warmup_steps.to_string(),
            "finetune_weight_decay" => p.finetune.weight_decay.to_string(),
            "layer_decay" => p.finetune.layer_decay.to_string(),
            "temporal_epochs" => p.temporal.epochs.to_string(),
            "temporal_lr" => p.temporal.base_lr.to_string(),
            "videos" => p.videos.to_string(),
            "phases" => p.phases.to_string(),
            "clips_min" => p.clips_per_phase.0.to_string(),
            "clips_max" => p.clips_per_phase.1.to_string(),
            "n_objects" => p.n_objects.to_string(),
            "object_size" => p.object_size.to_string(),
            "speed_min" => p.speed.0.to_string(),
            "speed_max" => p.speed.1.to_string(),
            "label_fraction" => p.label_fraction.to_string(),
            "test_fraction" => p.test_fraction.to_string(),
            _ => return None,
        };
        Some(v)
    }

    /// Every settings key with its resolved value, then any paths.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key).expect("every listed key renders"));
        }
        for (k, v) in &self.paths {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Hash of the resolved pipeline settings; paths and the preset name are excluded.
    pub fn hash(&self) -> String {
        self.pipeline.hash()
    }

    pub fn path(&self, key: &str) -> Option<&Path> {
        self.paths.get(key).map(Path::new)
    }
}
