//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::encoder::{Ablation, EncoderConfig};
use crate::error::{Error, Result};
use crate::init::{InitConfig, InitMethod};
use crate::training::TrainConfig;

/// Every tunable of a training run. `seed` drives weight initialization,
/// endmember initialization and training alike.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub init: InitMethod,
    /// Replaces VCA's SNR estimate when set.
    pub init_snr: Option<f64>,
    pub ablation: Ablation,
    /// Whether the decoder's nonlinear head is active.
    pub nonlinear: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            init: InitMethod::Vca,
            init_snr: None,
            ablation: Ablation::None,
            nonlinear: true,
        }
    }
}

/// Recognized keys, in the order [`RunConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "channels",
    "gamma",
    "spectral_stages",
    "spectral_channels",
    "ca_reduction",
    "window",
    "alpha",
    "epochs",
    "lr_endmember",
    "lr_rest",
    "weight_decay",
    "clip_norm",
    "seed",
    "init",
    "init_snr",
    "ablate",
    "nonlinear",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

/// `none` or a value.
fn parse_opt<T: FromStr>(key: &str, value: &str, none: &str) -> Result<Option<T>> {
    if value == none {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn show_opt<T: ToString>(v: Option<T>, none: &str) -> String {
    v.map_or_else(|| none.to_string(), |v| v.to_string())
}

pub fn parse_ablation(value: &str) -> Result<Ablation> {
    match value {
        "none" => Ok(Ablation::None),
        "spatial" => Ok(Ablation::NoSpatial),
        "spectral" => Ok(Ablation::NoSpectral),
        other => Err(Error::Config(format!("ablate: expected none, spatial or spectral, got {other:?}"))),
    }
}

fn show_ablation(a: Ablation) -> &'static str {
    match a {
        Ablation::None => "none",
        Ablation::NoSpatial => "spatial",
        Ablation::NoSpectral => "spectral",
    }
}

impl RunConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "channels" => self.encoder.channels = parse(key, value)?,
            "gamma" => self.encoder.gamma = parse(key, value)?,
            "spectral_stages" => self.encoder.spectral_stages = parse_opt(key, value, "auto")?,
            "spectral_channels" => self.encoder.spectral_channels = parse(key, value)?,
            "ca_reduction" => self.encoder.ca_reduction = parse(key, value)?,
            "window" => self.encoder.window = parse(key, value)?,
            "alpha" => self.train.alpha = parse(key, value)?,
            "epochs" => self.train.epochs = parse(key, value)?,
            "lr_endmember" => self.train.lr_endmember = parse(key, value)?,
            "lr_rest" => self.train.lr_rest = parse(key, value)?,
            "weight_decay" => self.train.weight_decay = parse(key, value)?,
            "clip_norm" => self.train.clip_norm = parse_opt(key, value, "none")?,
            "seed" => self.train.seed = parse(key, value)?,
            "init" => self.init = value.parse()?,
            "init_snr" => self.init_snr = parse_opt(key, value, "auto")?,
            "ablate" => self.ablation = parse_ablation(value)?,
            "nonlinear" => self.nonlinear = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "channels" => self.encoder.channels.to_string(),
            "gamma" => self.encoder.gamma.to_string(),
            "spectral_stages" => show_opt(self.encoder.spectral_stages, "auto"),
            "spectral_channels" => self.encoder.spectral_channels.to_string(),
            "ca_reduction" => self.encoder.ca_reduction.to_string(),
            "window" => self.encoder.window.to_string(),
            "alpha" => self.train.alpha.to_string(),
            "epochs" => self.train.epochs.to_string(),
            "lr_endmember" => self.train.lr_endmember.to_string(),
            "lr_rest" => self.train.lr_rest.to_string(),
            "weight_decay" => self.train.weight_decay.to_string(),
            "clip_norm" => show_opt(self.train.clip_norm, "none"),
            "seed" => self.train.seed.to_string(),
            "init" => self.init.to_string(),
            "init_snr" => show_opt(self.init_snr, "auto"),
            "ablate" => show_ablation(self.ablation).to_string(),
            "nonlinear" => self.nonlinear.to_string(),
            _ => unreachable!("key list and accessors agree"),
        }
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are ignored; unknown and repeated keys are rejected.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            let key = key.trim();
            if seen.contains(&key) {
                return Err(Error::Config(format!("line {}: repeated key {key:?}", n + 1)));
            }
            seen.push(key);
            self.set(key, value).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Defaults overridden by `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Every key, one per line; parses back to an equal value.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.train.validate()?;
        if let Some(snr) = self.init_snr {
            if snr.is_nan() {
                return Err(Error::Config("init_snr must be a number".into()));
            }
        }
        Ok(())
    }

    pub fn init_config(&self) -> InitConfig {
        InitConfig {
            method: self.init,
            seed: self.train.seed,
            snr_override: self.init_snr,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("lr_rest", "0.003").unwrap();
        cfg.set("clip_norm", "2.5").unwrap();
        cfg.set("spectral_stages", "2").unwrap();
        cfg.set("ablate", "spectral").unwrap();
        cfg.set("init_snr", "inf").unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(RunConfig::parse(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        for bad in ["chanels = 3", "epochs = many", "epochs", "init = kmeans", "epochs = 1\nepochs = 2"] {
            assert!(matches!(RunConfig::parse(bad), Err(Error::Config(_))), "{bad}");
        }
        let cfg = RunConfig::parse("# comment\n\nepochs = 7  # trailing\n").unwrap();
        assert_eq!(cfg.train.epochs, 7);
    }
}
