//! Flat `key = value` run configuration.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::context_network::ContextConfig;
use crate::error::{Error, Result};
use crate::feature_encoder::EncoderConfig;
use crate::model::ModelConfig;
use crate::quantizer::{QuantizerConfig, TempSchedule};
use crate::trainer::optim::AdamWConfig;
use crate::trainer::schedule::{lr_heuristic_with, CyclicLr, LrKind};

/// Every knob of a pre-training run. Field names are the config-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub train_manifest: String,
    /// Empty to split validation data off the training manifest.
    pub val_manifest: String,
    pub val_fraction: f64,

    pub encoder_channels: usize,
    pub encoder_grad_scale: f64,
    pub context_dim: usize,
    pub context_layers: usize,
    pub context_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub pos_kernel: usize,
    pub pos_groups: usize,
    pub codebooks: usize,
    pub codebook_entries: usize,
    pub codebook_dim: usize,
    pub sim_dim: usize,

    /// Speech seconds per optimizer step, split evenly over `gpu_batches`.
    pub batch_seconds: f64,
    pub gpu_batches: usize,
    pub bin_size: usize,
    /// `masked_steps` divides each gpu-batch gradient by its number of
    /// masked steps before averaging; `none` averages the summed gradients.
    pub grad_normalization: String,
    pub iterations: u64,

    /// `const`, `sub` or `lin` to derive the peak rate from the batch size;
    /// `fixed` to use `max_lr` as given.
    pub lr_kind: String,
    pub max_lr: f64,
    pub lr_reference: f64,
    pub lr_reference_seconds: f64,
    pub half_cycle: u64,
    pub cycles: u64,

    pub distractors: usize,
    pub mask_prob: f64,
    pub mask_span: usize,
    pub tau_start: f64,
    pub tau_floor: f64,
    /// Fraction of `iterations` after which the temperature sits at its floor.
    pub tau_floor_fraction: f64,

    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,

    pub val_interval: u64,
    /// `ssl` or `contrastive`: the validation loss used to pick the best checkpoint.
    pub select_on: String,
}

impl TrainConfig {
    pub fn canonical() -> Self {
        let m = ModelConfig::canonical();
        TrainConfig {
            batch_seconds: 6000.0,
            iterations: 400_000,
            half_cycle: 25_000,
            val_interval: 5000,
            distractors: 100,
            lr_kind: "lin".into(),
            ..Self::from_model(&m)
        }
    }

    /// Desk-scale preset: small model, short cycles.
    pub fn toy() -> Self {
        Self::from_model(&ModelConfig::toy())
    }

    fn from_model(m: &ModelConfig) -> Self {
        let adam = AdamWConfig::default();
        TrainConfig {
            seed: 0,
            train_manifest: String::new(),
            val_manifest: String::new(),
            val_fraction: 0.05,
            encoder_channels: m.encoder.channels,
            encoder_grad_scale: m.encoder.grad_scale,
            context_dim: m.context.dim,
            context_layers: m.context.layers,
            context_heads: m.context.heads,
            ffn_dim: m.context.ffn_dim,
            dropout: m.context.dropout,
            pos_kernel: m.context.pos_kernel,
            pos_groups: m.context.pos_groups,
            codebooks: m.quantizer.codebooks,
            codebook_entries: m.quantizer.entries,
            codebook_dim: m.quantizer.entry_dim,
            sim_dim: m.sim_dim,
            batch_seconds: 8.0,
            gpu_batches: 1,
            grad_normalization: "masked_steps".into(),
            bin_size: crate::batch_assembler::BIN_SIZE,
            iterations: 4000,
            lr_kind: "fixed".into(),
            max_lr: 5e-4,
            lr_reference: crate::trainer::schedule::REFERENCE_LR,
            lr_reference_seconds: crate::trainer::schedule::REFERENCE_SECONDS,
            half_cycle: 250,
            cycles: 8,
            distractors: 5,
            mask_prob: 0.5,
            mask_span: 10,
            tau_start: TempSchedule::START,
            tau_floor: TempSchedule::FLOOR,
            tau_floor_fraction: 0.75,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_eps: adam.eps,
            weight_decay: adam.weight_decay,
            val_interval: 500,
            select_on: "ssl".into(),
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                channels: self.encoder_channels,
                grad_scale: self.encoder_grad_scale,
                ..EncoderConfig::canonical()
            },
            quantizer: QuantizerConfig {
                codebooks: self.codebooks,
                entries: self.codebook_entries,
                entry_dim: self.codebook_dim,
            },
            context: ContextConfig {
                dim: self.context_dim,
                layers: self.context_layers,
                heads: self.context_heads,
                ffn_dim: self.ffn_dim,
                dropout: self.dropout,
                pos_kernel: self.pos_kernel,
                pos_groups: self.pos_groups,
            },
            sim_dim: self.sim_dim,
        }
    }

    pub fn adam(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn peak_lr(&self) -> f64 {
        match self.lr_kind.parse::<LrKind>() {
            Ok(kind) => lr_heuristic_with(self.batch_seconds, kind, self.lr_reference, self.lr_reference_seconds),
            Err(_) => self.max_lr,
        }
    }

    pub fn lr_schedule(&self) -> CyclicLr {
        CyclicLr::new(self.peak_lr(), self.half_cycle, self.cycles)
    }

    pub fn tau_schedule(&self) -> TempSchedule {
        let at = ((self.iterations as f64 * self.tau_floor_fraction).round() as u64).max(1);
        TempSchedule::reaching_floor_at(self.tau_start, self.tau_floor, at)
    }

    pub fn gpu_batch_seconds(&self) -> f64 {
        self.batch_seconds / self.gpu_batches as f64
    }

}

/// A flat configuration record whose field names are its config-file keys.
pub trait FlatConfig: Serialize + DeserializeOwned {
    /// Defaults used when no `preset` key is given.
    fn default_preset() -> Self;

    fn preset(name: &str) -> Result<Self>;

    /// Every semantic problem, one message per key.
    fn validate(&self) -> Vec<String>;

    /// Apply `key = value` overrides on top of `self`. Unknown keys,
    /// unparsable values and semantic problems of the remaining values are
    /// all reported together.
    fn with_overrides<'a>(&self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let Value::Object(mut map) = serde_json::to_value(self)? else {
            unreachable!("config serializes to an object")
        };
        let mut errs = Vec::new();
        for (key, raw) in pairs {
            match map.get(key) {
                None => errs.push(format!("{key}: unknown key")),
                Some(old) => match parse_like(old, raw) {
                    Some(v) => {
                        map.insert(key.to_string(), v);
                    }
                    None => errs.push(format!("{key}: cannot parse {raw:?}")),
                },
            }
        }
        let cfg: Self = serde_json::from_value(Value::Object(map))?;
        errs.extend(cfg.validate());
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Parse config text. A `preset` key, if present, picks the defaults.
    fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut errs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => pairs.push((k.trim(), v.trim())),
                None => errs.push(format!("line {}: expected key = value", n + 1)),
            }
        }
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let base = match pairs.iter().find(|(k, _)| *k == "preset") {
            Some((_, p)) => Self::preset(p)?,
            None => Self::default_preset(),
        };
        base.with_overrides(pairs.into_iter().filter(|(k, _)| *k != "preset"))
    }

    fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Render as config text that [`FlatConfig::parse`] reads back exactly.
    fn to_text(&self) -> String {
        let Ok(Value::Object(map)) = serde_json::to_value(self) else {
            unreachable!("config serializes to an object")
        };
        render(&map)
    }
}

impl FlatConfig for TrainConfig {
    fn default_preset() -> Self {
        Self::toy()
    }

    fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "canonical" => Ok(Self::canonical()),
            _ => Err(Error::Config(vec![format!(
                "preset: unknown preset {name:?}; expected toy or canonical"
            )])),
        }
    }

    fn validate(&self) -> Vec<String> {
        let mut errs = self.model().validate();
        let mut check = |ok: bool, msg: &str| {
            if !ok {
                errs.push(msg.to_string());
            }
        };
        check(self.codebooks == 2, "codebooks: metrics are reported for exactly two codebooks");
        check(
            self.val_fraction > 0.0 && self.val_fraction < 1.0,
            "val_fraction: must lie in (0, 1)",
        );
        check(self.batch_seconds > 0.0 && self.batch_seconds.is_finite(), "batch_seconds: must be positive");
        check(self.gpu_batches >= 1, "gpu_batches: must be at least 1");
        check(self.bin_size >= 1, "bin_size: must be at least 1");
        check(
            matches!(self.grad_normalization.as_str(), "masked_steps" | "none"),
            "grad_normalization: expected masked_steps or none",
        );
        check(self.iterations >= 1, "iterations: must be at least 1");
        check(
            matches!(self.lr_kind.as_str(), "const" | "sub" | "lin" | "fixed"),
            "lr_kind: expected const, sub, lin or fixed",
        );
        check(self.max_lr > 0.0, "max_lr: must be positive");
        check(self.lr_reference > 0.0, "lr_reference: must be positive");
        check(self.lr_reference_seconds > 0.0, "lr_reference_seconds: must be positive");
        check(self.half_cycle >= 1, "half_cycle: must be at least 1");
        check(self.cycles >= 1, "cycles: must be at least 1");
        check(self.distractors >= 1, "distractors: must be at least 1");
        check(self.mask_prob > 0.0 && self.mask_prob <= 1.0, "mask_prob: must lie in (0, 1]");
        check(self.mask_span >= 1, "mask_span: must be at least 1");
        check(
            self.tau_start >= self.tau_floor && self.tau_floor > 0.0,
            "tau_start, tau_floor: need tau_start >= tau_floor > 0",
        );
        check(
            self.tau_floor_fraction > 0.0 && self.tau_floor_fraction <= 1.0,
            "tau_floor_fraction: must lie in (0, 1]",
        );
        check((0.0..1.0).contains(&self.adam_beta1), "adam_beta1: must lie in [0, 1)");
        check((0.0..1.0).contains(&self.adam_beta2), "adam_beta2: must lie in [0, 1)");
        check(self.adam_eps > 0.0, "adam_eps: must be positive");
        check(self.weight_decay >= 0.0, "weight_decay: must be non-negative");
        check(self.val_interval >= 1, "val_interval: must be at least 1");
        check(
            matches!(self.select_on.as_str(), "ssl" | "contrastive"),
            "select_on: expected ssl or contrastive",
        );
        errs
    }
}

fn parse_like(old: &Value, raw: &str) -> Option<Value> {
    match old {
        Value::String(_) => Some(Value::String(raw.to_string())),
        Value::Bool(_) => raw.parse::<bool>().ok().map(Value::Bool),
        Value::Number(n) if n.is_u64() => raw.parse::<u64>().ok().map(Value::from),
        Value::Number(_) => raw
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .and_then(serde_json::Number::from_f64)
            .map(Value::Number),
        _ => None,
    }
}

fn render(map: &Map<String, Value>) -> String {
    map.iter()
        .map(|(k, v)| match v {
            Value::String(s) => format!("{k} = {s}\n"),
            other => format!("{k} = {other}\n"),
        })
        .collect()
}
