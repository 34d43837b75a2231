//! Run configuration and its text format.
//!
//! One `key = value` per line, dotted keys, `#` starts a comment. Later
//! lines and command-line overrides replace earlier values.

use std::path::{Path, PathBuf};

use crate::dataio::{Normalization, PadMode};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// How the reported epoch is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Selection {
    /// Best test accuracy over epochs.
    #[default]
    Test,
    /// Best accuracy on a held-out part of the training split; the test
    /// split is only scored at the selected epoch.
    Validation,
    /// The last epoch.
    Last,
}

impl std::str::FromStr for Selection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "test" => Ok(Selection::Test),
            "validation" => Ok(Selection::Validation),
            "last" => Ok(Selection::Last),
            _ => Err(Error::Config(format!("unknown selection `{s}` (test, validation, last)"))),
        }
    }
}

impl std::fmt::Display for Selection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Selection::Test => "test",
            Selection::Validation => "validation",
            Selection::Last => "last",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub data_dir: PathBuf,
    pub dataset: String,
    pub pad_mode: PadMode,
    pub normalization: Normalization,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub selection: Selection,
    pub val_fraction: f64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            data_dir: PathBuf::from("data"),
            dataset: "BasicMotions".into(),
            pad_mode: PadMode::ZeroPadToMax,
            normalization: Normalization::ZScore,
            epochs: 60,
            batch_size: 8,
            lr_init: 3e-3,
            lr_min: 1e-5,
            weight_decay: 0.0,
            clip_norm: 5.0,
            seed: 0,
            selection: Selection::Test,
            val_fraction: 0.2,
            out_dir: PathBuf::from("runs"),
            model: ModelConfig::default(),
        }
    }
}

/// Every key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("data.dir", "directory holding NAME/NAME_TRAIN.ts (or .csv)"),
    ("data.name", "dataset name"),
    ("data.pad", "variable-length handling: pad | truncate"),
    ("data.normalize", "per-channel normalization fitted on train: zscore | none"),
    ("train.epochs", "number of epochs"),
    ("train.batch_size", "samples per optimizer step"),
    ("train.lr_init", "initial learning rate"),
    ("train.lr_min", "final learning rate of the cosine schedule"),
    ("train.weight_decay", "L2 penalty added to Adam gradients"),
    ("train.clip_norm", "global gradient-norm clip, 0 disables"),
    ("train.seed", "seed for initialization, shuffling and dropout"),
    ("train.selection", "reported epoch: test | validation | last"),
    ("train.val_fraction", "share of train held out when selection = validation"),
    ("output.dir", "directory for metrics, checkpoint and caches"),
    ("model.width", "shared feature width X (even)"),
    ("model.disable_mamba", "bypass both scans: true | false"),
    ("temporal.seed", "seed of the random kernel set"),
    ("spectral.l1", "side of the resized scalogram"),
    ("spectral.patch", "patch size of the embedding, divides spectral.l1"),
    ("spectral.sigma_sq", "wavelet sigma squared"),
    ("spectral.freq", "wavelet frequency"),
    ("spectral.num_scales", "number of geometric scales from 1 to L/4"),
    ("ssm.d_state", "state size N"),
    ("ssm.d_conv", "causal convolution width"),
    ("ssm.expand", "inner width multiplier"),
    ("ssm.dt_rank", "step projection rank: auto | integer"),
    ("scan.scheme", "forward | flipped | tango"),
    ("fusion.mode", "additive | multiplicative"),
    ("fusion.switch", "temporal view: local | global | gate"),
    ("fusion.lambda_init", "initial lambda in [0, 2]"),
    ("head.pooling", "average | max"),
    ("head.activation", "gelu | relu | silu"),
    ("head.dropout", "dropout rate between head layers"),
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got `{value}`"))),
    }
}

/// Nearest known key, if any is reasonably close.
pub fn suggest(key: &str) -> Option<&'static str> {
    KEYS.iter()
        .map(|(k, _)| (*k, strsim::jaro_winkler(key, k)))
        .filter(|(_, s)| *s > 0.7)
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(k, _)| k)
}

fn unknown(key: &str) -> Error {
    match suggest(key) {
        Some(s) => Error::Config(format!("unknown key `{key}`, did you mean `{s}`?")),
        None => Error::Config(format!("unknown key `{key}`")),
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "data.dir" => self.data_dir = PathBuf::from(value),
            "data.name" => self.dataset = value.to_string(),
            "data.pad" => self.pad_mode = value.parse()?,
            "data.normalize" => self.normalization = value.parse()?,
            "train.epochs" => self.epochs = parse(key, value)?,
            "train.batch_size" => self.batch_size = parse(key, value)?,
            "train.lr_init" => self.lr_init = parse(key, value)?,
            "train.lr_min" => self.lr_min = parse(key, value)?,
            "train.weight_decay" => self.weight_decay = parse(key, value)?,
            "train.clip_norm" => self.clip_norm = parse(key, value)?,
            "train.seed" => self.seed = parse(key, value)?,
            "train.selection" => self.selection = value.parse()?,
            "train.val_fraction" => self.val_fraction = parse(key, value)?,
            "output.dir" => self.out_dir = PathBuf::from(value),
            "model.width" => m.width = parse(key, value)?,
            "model.disable_mamba" => m.disable_mamba = parse_bool(key, value)?,
            "temporal.seed" => m.rocket_seed = parse(key, value)?,
            "spectral.l1" => m.morlet.l1 = parse(key, value)?,
            "spectral.patch" => m.patch = parse(key, value)?,
            "spectral.sigma_sq" => m.morlet.sigma_sq = parse(key, value)?,
            "spectral.freq" => m.morlet.freq = parse(key, value)?,
            "spectral.num_scales" => m.morlet.num_scales = parse(key, value)?,
            "ssm.d_state" => m.ssm.d_state = parse(key, value)?,
            "ssm.d_conv" => m.ssm.d_conv = parse(key, value)?,
            "ssm.expand" => m.ssm.expand = parse(key, value)?,
            "ssm.dt_rank" => m.ssm.dt_rank = if value == "auto" { None } else { Some(parse(key, value)?) },
            "scan.scheme" => m.scheme = value.parse()?,
            "fusion.mode" => m.fusion_mode = value.parse()?,
            "fusion.switch" => m.switch = value.parse()?,
            "fusion.lambda_init" => m.lambda_init = parse(key, value)?,
            "head.pooling" => m.pooling = value.parse()?,
            "head.activation" => m.activation = value.parse()?,
            "head.dropout" => m.dropout = parse(key, value)?,
            _ => return Err(unknown(key)),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let m = &self.model;
        Ok(match key {
            "data.dir" => self.data_dir.display().to_string(),
            "data.name" => self.dataset.clone(),
            "data.pad" => self.pad_mode.to_string(),
            "data.normalize" => self.normalization.to_string(),
            "train.epochs" => self.epochs.to_string(),
            "train.batch_size" => self.batch_size.to_string(),
            "train.lr_init" => self.lr_init.to_string(),
            "train.lr_min" => self.lr_min.to_string(),
            "train.weight_decay" => self.weight_decay.to_string(),
            "train.clip_norm" => self.clip_norm.to_string(),
            "train.seed" => self.seed.to_string(),
            "train.selection" => self.selection.to_string(),
            "train.val_fraction" => self.val_fraction.to_string(),
            "output.dir" => self.out_dir.display().to_string(),
            "model.width" => m.width.to_string(),
            "model.disable_mamba" => m.disable_mamba.to_string(),
            "temporal.seed" => m.rocket_seed.to_string(),
            "spectral.l1" => m.morlet.l1.to_string(),
            "spectral.patch" => m.patch.to_string(),
            "spectral.sigma_sq" => m.morlet.sigma_sq.to_string(),
            "spectral.freq" => m.morlet.freq.to_string(),
            "spectral.num_scales" => m.morlet.num_scales.to_string(),
            "ssm.d_state" => m.ssm.d_state.to_string(),
            "ssm.d_conv" => m.ssm.d_conv.to_string(),
            "ssm.expand" => m.ssm.expand.to_string(),
            "ssm.dt_rank" => m.ssm.dt_rank.map_or("auto".into(), |r| r.to_string()),
            "scan.scheme" => m.scheme.to_string(),
            "fusion.mode" => m.fusion_mode.to_string(),
            "fusion.switch" => m.switch.to_string(),
            "fusion.lambda_init" => m.lambda_init.to_string(),
            "head.pooling" => m.pooling.to_string(),
            "head.activation" => m.activation.to_string(),
            "head.dropout" => m.dropout.to_string(),
            _ => return Err(unknown(key)),
        })
    }

    /// Applies `key = value` lines.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip_prefix(&e))))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = TrainConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Every key with its current value, in the file format.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|(k, _)| format!("{k} = {}\n", self.get(k).unwrap()))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("train.epochs and train.batch_size must be >= 1".into()));
        }
        if !(self.lr_init > self.lr_min && self.lr_min >= 0.0) {
            return Err(Error::Config(format!(
                "need train.lr_init > train.lr_min >= 0, got {} and {}",
                self.lr_init, self.lr_min
            )));
        }
        if !(self.clip_norm >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("train.clip_norm and train.weight_decay must be >= 0".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config("train.val_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

/// Help text listing every key with its default.
pub fn keys_help() -> String {
    let d = TrainConfig::default();
    let width = KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    KEYS.iter()
        .map(|(k, h)| format!("  {k:<width$}  {h} [default: {}]\n", d.get(k).unwrap()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scanning::ScanScheme;

    #[test]
    fn every_key_round_trips() {
        let d = TrainConfig::default();
        for (k, _) in KEYS {
            let mut c = TrainConfig::default();
            c.set(k, &d.get(k).unwrap()).unwrap();
            assert_eq!(c, d, "{k}");
        }
        let mut c = TrainConfig::default();
        c.apply_text(&d.to_text()).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn text_and_overrides() {
        let mut c = TrainConfig::default();
        c.apply_text("# comment\ntrain.epochs = 5  # trailing\n\nscan.scheme=forward\nssm.dt_rank = 3\n").unwrap();
        assert_eq!(c.epochs, 5);
        assert_eq!(c.model.scheme, ScanScheme::Forward);
        assert_eq!(c.model.ssm.dt_rank, Some(3));
        c.apply_overrides(&["train.epochs=7", "ssm.dt_rank=auto"]).unwrap();
        assert_eq!(c.epochs, 7);
        assert_eq!(c.model.ssm.dt_rank, None);
        assert!(c.apply_overrides(&["train.epochs"]).is_err());
        assert!(c.apply_text("no equals sign").is_err());
        assert!(c.set("train.epochs", "many").is_err());
        assert!(c.set("scan.scheme", "sideways").is_err());
    }

    #[test]
    fn unknown_keys_get_suggestions() {
        let mut c = TrainConfig::default();
        let e = c.set("train.epoch", "3").unwrap_err().to_string();
        assert!(e.contains("did you mean `train.epochs`"), "{e}");
        let e = c.apply_text("fusion.lamda_init = 1").unwrap_err().to_string();
        assert!(e.contains("line 1") && e.contains("fusion.lambda_init"), "{e}");
        assert!(!c.set("zzzzzz", "1").unwrap_err().to_string().contains("did you mean"));
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = |k: &str, v: &str| {
            let mut c = TrainConfig::default();
            c.set(k, v).unwrap();
            c.validate().is_err()
        };
        assert!(bad("train.lr_min", "1"));
        assert!(bad("model.width", "7"));
        assert!(bad("spectral.patch", "5"));
        assert!(bad("train.epochs", "0"));
        assert!(bad("train.val_fraction", "1"));
    }

    #[test]
    fn help_lists_all_keys() {
        let h = keys_help();
        for (k, _) in KEYS {
            assert!(h.contains(k));
        }
        assert!(h.contains("[default: tango]"));
    }
}
