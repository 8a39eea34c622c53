//! Training configuration and its flat `key = value` text form.
//!
//! Keys match [`TrainConfig`] field names exactly. Unknown keys are hard
//! errors, and command-line overrides are applied key by key on top of the
//! file.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::inference::SlidingWindowSpec;
use crate::plgdf::{ConsisOptions, DTerm, NormKind};
use crate::volume::Dims;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// `lr * (1 - t / t_max)^0.9`
    Poly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub t_max: u64,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub labeled_per_batch: usize,
    pub unlabeled_per_batch: usize,
    pub patch_shape: Dims,

    pub base_filters: usize,
    pub depth: usize,
    pub block_convs: usize,
    pub scale_count: usize,

    #[serde(rename = "sharpen_T")]
    pub sharpen_t: f64,
    pub consis_w: f64,
    pub ema_decay: f64,
    pub mix_alpha: f64,
    pub noise_sigma: f64,
    pub noise_clip: f64,
    pub dice_eps: f64,
    pub consis_norm: NormKind,
    pub consis_d_term: DTerm,
    pub semi_rampup: bool,

    pub enable_semi: bool,
    pub enable_mix: bool,
    pub enable_consis: bool,
    pub enable_sharp: bool,

    pub validation_interval: u64,
    pub val_stride: Dims,

    pub clip_lo: Option<f32>,
    pub clip_hi: Option<f32>,
    pub target_spacing: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            t_max: 15_000,
            lr: 1e-2,
            lr_schedule: LrSchedule::Constant,
            momentum: 0.9,
            weight_decay: 1e-4,
            labeled_per_batch: 2,
            unlabeled_per_batch: 2,
            patch_shape: [96, 96, 96],
            base_filters: 16,
            depth: 4,
            block_convs: 2,
            scale_count: 4,
            sharpen_t: 0.1,
            consis_w: 0.1,
            ema_decay: 0.99,
            mix_alpha: 0.75,
            noise_sigma: 0.1,
            noise_clip: 0.2,
            dice_eps: 1e-5,
            consis_norm: NormKind::L2,
            consis_d_term: DTerm::Mean,
            semi_rampup: false,
            enable_semi: true,
            enable_mix: true,
            enable_consis: true,
            enable_sharp: true,
            validation_interval: 200,
            val_stride: [16, 16, 16],
            clip_lo: None,
            clip_hi: None,
            target_spacing: None,
        }
    }
}

fn known_keys() -> BTreeSet<String> {
    match toml::Value::try_from(TrainConfig::default()) {
        Ok(toml::Value::Table(t)) => {
            let mut keys: BTreeSet<String> = t.keys().cloned().collect();
            // Option fields serialize to nothing when unset
            keys.extend(["clip_lo", "clip_hi", "target_spacing"].map(String::from));
            keys
        }
        _ => unreachable!("TrainConfig serializes to a table"),
    }
}

impl TrainConfig {
    /// Named presets: `base` (full-size network and 96³ patches) and `desk`
    /// (depth-3, 8-filter network on 32³ patches for CPU-scale runs).
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "base" => Some(Self::default()),
            "desk" => Some(Self {
                t_max: 2000,
                patch_shape: [32, 32, 32],
                base_filters: 8,
                depth: 3,
                block_convs: 1,
                val_stride: [16, 16, 16],
                ..Self::default()
            }),
            _ => None,
        }
    }

    /// Parses config text, applies `key=value` overrides and validates.
    pub fn from_toml_with_overrides(base: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = base
            .parse()
            .map_err(|e| Error::Config(format!("cannot parse config: {e}")))?;
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let key = key.trim();
            let value = value.trim();
            // bare words (enum variants) are accepted as strings
            let parsed = format!("v = {value}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(value.to_string()));
            table.insert(key.to_string(), parsed);
        }
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        let known = known_keys();
        let unknown: Vec<&str> = table
            .keys()
            .filter(|k| !known.contains(*k))
            .map(String::as_str)
            .collect();
        if !unknown.is_empty() {
            return Err(Error::Config(format!(
                "unknown config keys: {}",
                unknown.join(", ")
            )));
        }
        let mut offending = Vec::new();
        let defaults = match toml::Value::try_from(TrainConfig::default()) {
            Ok(toml::Value::Table(t)) => t,
            _ => unreachable!(),
        };
        for (k, v) in &table {
            let mut probe = defaults.clone();
            probe.insert(k.clone(), v.clone());
            if let Err(e) = toml::Value::Table(probe).try_into::<TrainConfig>() {
                offending.push(format!("{k} ({})", e.message().trim()));
            }
        }
        if !offending.is_empty() {
            return Err(Error::Config(format!(
                "invalid values for keys: {}",
                offending.join("; ")
            )));
        }
        let cfg: TrainConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("TrainConfig always serializes")
    }

    pub fn semi_losses_enabled(&self) -> bool {
        self.enable_semi || self.enable_mix || self.enable_consis || self.enable_sharp
    }

    pub fn backbone(&self, class_count: usize) -> BackboneConfig {
        BackboneConfig {
            in_channels: 1,
            class_count,
            base_filters: self.base_filters,
            depth: self.depth,
            head_count: self.scale_count,
            block_convs: self.block_convs,
        }
    }

    pub fn window(&self) -> SlidingWindowSpec {
        SlidingWindowSpec {
            patch_shape: self.patch_shape,
            stride: self.val_stride,
        }
    }

    pub fn consis_options(&self) -> ConsisOptions {
        ConsisOptions {
            norm: self.consis_norm,
            d_term: self.consis_d_term,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.lr > 0.0) {
            problems.push(format!("lr must be > 0 (got {})", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            problems.push(format!("momentum must be in [0, 1) (got {})", self.momentum));
        }
        if self.weight_decay < 0.0 {
            problems.push("weight_decay must be >= 0".into());
        }
        if self.t_max == 0 {
            problems.push("t_max must be > 0".into());
        }
        if self.labeled_per_batch == 0 {
            problems.push("labeled_per_batch must be >= 1".into());
        }
        if self.semi_losses_enabled() && self.unlabeled_per_batch == 0 {
            problems.push("unlabeled_per_batch must be >= 1 when semi losses are enabled".into());
        }
        if !(self.sharpen_t > 0.0) {
            problems.push("sharpen_T must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            problems.push("ema_decay must be in [0, 1]".into());
        }
        if !(self.mix_alpha > 0.0) {
            problems.push("mix_alpha must be > 0".into());
        }
        if self.noise_sigma < 0.0 || self.noise_clip < 0.0 {
            problems.push("noise_sigma and noise_clip must be >= 0".into());
        }
        if self.consis_w < 0.0 {
            problems.push("consis_w must be >= 0".into());
        }
        if !(self.dice_eps > 0.0) {
            problems.push("dice_eps must be > 0".into());
        }
        if self.validation_interval == 0 {
            problems.push("validation_interval must be > 0".into());
        }
        if let (Some(lo), Some(hi)) = (self.clip_lo, self.clip_hi) {
            if !(lo < hi) {
                problems.push("clip_lo must be < clip_hi".into());
            }
        } else if self.clip_lo.is_some() != self.clip_hi.is_some() {
            problems.push("clip_lo and clip_hi must be given together".into());
        }
        if let Some(t) = self.target_spacing {
            if !(t > 0.0) {
                problems.push("target_spacing must be > 0".into());
            }
        }
        if let Err(e) = self.backbone(2).validate() {
            problems.push(e.to_string());
        }
        let factor = 1usize << self.depth;
        if self.patch_shape.iter().any(|&p| p == 0 || p % factor != 0) {
            problems.push(format!(
                "patch_shape {:?} must be divisible by 2^depth = {factor}",
                self.patch_shape
            ));
        }
        if let Err(e) = self.window().validate() {
            problems.push(e.to_string());
        }
        if self.enable_consis && self.scale_count < 2 {
            problems.push("enable_consis needs scale_count >= 2".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_documented_values() {
        let c = TrainConfig::default();
        assert_eq!((c.lr, c.momentum, c.weight_decay), (1e-2, 0.9, 1e-4));
        assert_eq!((c.labeled_per_batch, c.unlabeled_per_batch), (2, 2));
        assert_eq!(c.sharpen_t, 0.1);
        assert_eq!(c.scale_count, 4);
        assert_eq!(c.ema_decay, 0.99);
        c.validate().unwrap();
        TrainConfig::preset("desk").unwrap().validate().unwrap();
    }

    #[test]
    fn overrides_apply_key_by_key() {
        let cfg = TrainConfig::from_toml_with_overrides(
            "t_max = 50\nlr = 0.5",
            &["t_max=10".into(), "enable_mix=false".into(), "sharpen_T=0.5".into()],
        )
        .unwrap();
        assert_eq!(cfg.t_max, 10);
        assert_eq!(cfg.lr, 0.5);
        assert!(!cfg.enable_mix);
        assert_eq!(cfg.sharpen_t, 0.5);
    }

    #[test]
    fn enum_override_accepts_bare_word() {
        let cfg =
            TrainConfig::from_toml_with_overrides("", &["consis_norm=squared_l2".into()]).unwrap();
        assert_eq!(cfg.consis_norm, NormKind::SquaredL2);
    }

    #[test]
    fn unknown_keys_are_all_listed() {
        let err = TrainConfig::from_toml_with_overrides("lrr = 1\nsharpen_t = 0.2", &[])
            .unwrap_err()
            .to_string();
        assert!(err.contains("lrr") && err.contains("sharpen_t"), "{err}");
    }

    #[test]
    fn bad_values_name_their_keys() {
        let err = TrainConfig::from_toml_with_overrides("t_max = \"ten\"\nlr = true", &[])
            .unwrap_err()
            .to_string();
        assert!(err.contains("t_max") && err.contains("lr"), "{err}");
        let err = TrainConfig::from_toml_with_overrides("momentum = 1.0", &[])
            .unwrap_err()
            .to_string();
        assert!(err.contains("momentum"), "{err}");
    }

    #[test]
    fn text_roundtrip() {
        let mut c = TrainConfig::preset("desk").unwrap();
        c.clip_lo = Some(-125.0);
        c.clip_hi = Some(275.0);
        let back = TrainConfig::from_toml_with_overrides(&c.to_toml(), &[]).unwrap();
        assert_eq!(back, c);
    }
}
