//! Flat `section.key=value` run configuration.
//!
//! Lines are `key=value`; blank lines and lines starting with `#` are
//! ignored. Sizes are written `HxW`, ranges `lo,hi`.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::augment::AugmentSpec;
use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::train_eval::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    /// Seed for synthetic dataset generation.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub augment: AugmentSpec,
}

pub const MODEL_KEYS: [&str; 8] = [
    "model.num_classes",
    "model.input_size",
    "model.bot_blocks",
    "model.irc",
    "model.kernel_mod",
    "model.seed",
    "model.base_width",
    "model.heads",
];

pub const TRAIN_KEYS: [&str; 7] = [
    "train.lr",
    "train.epochs",
    "train.batch_size",
    "train.seed",
    "train.beta1",
    "train.beta2",
    "train.eps",
];

pub const DATA_KEYS: [&str; 2] = ["data.root", "data.seed"];

pub const AUGMENT_KEYS: [&str; 11] = [
    "augment.rotation_degrees",
    "augment.hflip_prob",
    "augment.vflip_prob",
    "augment.crop_scale",
    "augment.output_size",
    "augment.brightness",
    "augment.contrast",
    "augment.saturation",
    "augment.hue",
    "augment.copies_per_image",
    "augment.seed",
];

fn bad(key: &str, value: &str, expect: &str) -> Error {
    Error::config(format!("{key}={value:?}: expected {expect}"))
}

fn num<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| bad(key, value, std::any::type_name::<V>()))
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(bad(key, value, "true or false")),
    }
}

pub fn parse_size(key: &str, value: &str) -> Result<(usize, usize)> {
    let v = value.trim();
    let (h, w) = v
        .split_once(['x', 'X'])
        .map(|(h, w)| (h.trim(), w.trim()))
        .unwrap_or((v, v));
    match (h.parse(), w.parse()) {
        (Ok(h), Ok(w)) => Ok((h, w)),
        _ => Err(bad(key, value, "HxW")),
    }
}

fn range(key: &str, value: &str) -> Result<(f64, f64)> {
    let parse = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(key, value, "lo,hi"));
    match value.split_once(',') {
        Some((lo, hi)) => Ok((parse(lo)?, parse(hi)?)),
        None => {
            let v = parse(value)?;
            Ok((v, v))
        }
    }
}

impl RunConfig {
    /// Sets one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let a = &mut self.augment;
        match key {
            "model.num_classes" => m.num_classes = num(key, value)?,
            "model.input_size" => m.input_size = parse_size(key, value)?,
            "model.bot_blocks" => m.bot_blocks = num(key, value)?,
            "model.irc" => m.irc = boolean(key, value)?,
            "model.kernel_mod" => m.kernel_mod = num(key, value)?,
            "model.seed" => m.seed = num(key, value)?,
            "model.base_width" => m.base_width = num(key, value)?,
            "model.heads" => m.heads = num(key, value)?,
            "train.lr" => t.lr = num(key, value)?,
            "train.epochs" => t.epochs = num(key, value)?,
            "train.batch_size" => t.batch_size = num(key, value)?,
            "train.seed" => t.seed = num(key, value)?,
            "train.beta1" => t.beta1 = num(key, value)?,
            "train.beta2" => t.beta2 = num(key, value)?,
            "train.eps" => t.eps = num(key, value)?,
            "data.root" => {
                let v = value.trim();
                self.data.root = (!v.is_empty()).then(|| PathBuf::from(v));
            }
            "data.seed" => self.data.seed = num(key, value)?,
            "augment.rotation_degrees" => a.rotation_degrees = range(key, value)?,
            "augment.hflip_prob" => a.hflip_prob = num(key, value)?,
            "augment.vflip_prob" => a.vflip_prob = num(key, value)?,
            "augment.crop_scale" => a.crop_scale = range(key, value)?,
            "augment.output_size" => a.output_size = parse_size(key, value)?,
            "augment.brightness" => a.brightness = range(key, value)?,
            "augment.contrast" => a.contrast = range(key, value)?,
            "augment.saturation" => a.saturation = range(key, value)?,
            "augment.hue" => a.hue = range(key, value)?,
            "augment.copies_per_image" => a.copies_per_image = num(key, value)?,
            "augment.seed" => a.seed = num(key, value)?,
            _ => return Err(Error::config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines in order.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.augment.validate()
    }

    /// Every key with its resolved value, in the order of the key tables.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&model_text(&self.model));
        s.push_str(&train_text(&self.train));
        let root = self
            .data
            .root
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        let _ = writeln!(s, "data.root={root}");
        let _ = writeln!(s, "data.seed={}", self.data.seed);
        let a = &self.augment;
        let r = |(lo, hi): (f64, f64)| format!("{lo},{hi}");
        let _ = writeln!(s, "augment.rotation_degrees={}", r(a.rotation_degrees));
        let _ = writeln!(s, "augment.hflip_prob={}", a.hflip_prob);
        let _ = writeln!(s, "augment.vflip_prob={}", a.vflip_prob);
        let _ = writeln!(s, "augment.crop_scale={}", r(a.crop_scale));
        let _ = writeln!(s, "augment.output_size={}x{}", a.output_size.0, a.output_size.1);
        let _ = writeln!(s, "augment.brightness={}", r(a.brightness));
        let _ = writeln!(s, "augment.contrast={}", r(a.contrast));
        let _ = writeln!(s, "augment.saturation={}", r(a.saturation));
        let _ = writeln!(s, "augment.hue={}", r(a.hue));
        let _ = writeln!(s, "augment.copies_per_image={}", a.copies_per_image);
        let _ = writeln!(s, "augment.seed={}", a.seed);
        s
    }
}

pub fn model_text(m: &ModelConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "model.num_classes={}", m.num_classes);
    let _ = writeln!(s, "model.input_size={}x{}", m.input_size.0, m.input_size.1);
    let _ = writeln!(s, "model.bot_blocks={}", m.bot_blocks);
    let _ = writeln!(s, "model.irc={}", m.irc);
    let _ = writeln!(s, "model.kernel_mod={}", m.kernel_mod);
    let _ = writeln!(s, "model.seed={}", m.seed);
    let _ = writeln!(s, "model.base_width={}", m.base_width);
    let _ = writeln!(s, "model.heads={}", m.heads);
    s
}

pub fn train_text(t: &TrainConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "train.lr={}", t.lr);
    let _ = writeln!(s, "train.epochs={}", t.epochs);
    let _ = writeln!(s, "train.batch_size={}", t.batch_size);
    let _ = writeln!(s, "train.seed={}", t.seed);
    let _ = writeln!(s, "train.beta1={}", t.beta1);
    let _ = writeln!(s, "train.beta2={}", t.beta2);
    let _ = writeln!(s, "train.eps={}", t.eps);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("model.irc", "true").unwrap();
        cfg.set("model.bot_blocks", "2").unwrap();
        cfg.set("augment.hue", "-5.5,7.25").unwrap();
        cfg.set("data.root", "/tmp/x").unwrap();
        cfg.set("train.lr", "0.0003").unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_rejected() {
        assert!(matches!(
            RunConfig::parse("model.depth=50"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::parse("model.irc=maybe"),
            Err(Error::Config(_))
        ));
    }
}
