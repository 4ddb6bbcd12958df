//! Run settings: an optional `key = value` file overlaid by command-line flags.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use poirec::model::{LongSetting, VariantSpec};
use poirec::train::TrainConfig;

/// Every key accepted in a config file or as a flag (`-` and `_` are
/// interchangeable).
pub const KEYS: &[&str] = &[
    "dataset",
    "out",
    "checkpoint",
    "seed",
    "epochs",
    "batch",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "neg",
    "dropout_inter",
    "dropout_mlp",
    "s1_window",
    "seq_cap",
    "t_min",
    "resample_negatives",
    "early_stopping",
    "patience",
    "grad_check",
    "variant",
    "variants",
    "long_setting",
    "format",
    "min_poi_count",
    "max_history",
    "min_history",
    "users",
    "areas",
    "pois_per_area",
    "categories",
    "blocks",
    "routines",
    "checkins_per_user",
    "noise",
    "eps",
    "coords",
    "instances",
];

fn normalize(key: &str) -> String {
    key.trim().replace('-', "_")
}

#[derive(Clone, Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse_file(text: &str, origin: &Path) -> Result<Settings> {
        let mut s = Settings::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{}:{}: expected key = value", origin.display(), i + 1))?;
            s.set(k, v.trim()).with_context(|| format!("{}:{}", origin.display(), i + 1))?;
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Settings> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Settings::parse_file(&text, path)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        let key = normalize(key);
        if !KEYS.contains(&key.as_str()) {
            bail!("unknown config key {key:?}");
        }
        self.values.insert(key, value.into());
        Ok(())
    }

    /// Flags win over file values.
    pub fn overlay(&mut self, flags: Settings) {
        self.values.extend(flags.values);
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.raw(key)
            .map(|v| v.parse::<T>().map_err(|e| anyhow!("invalid value {v:?} for {key}: {e}")))
            .transpose()
    }

    pub fn get_or<T>(&self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn path(&self, key: &str, command: &str) -> Result<PathBuf> {
        self.raw(key)
            .map(PathBuf::from)
            .ok_or_else(|| anyhow!("{command} requires {}", flag_name(key)))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            negatives: self.get_or("neg", d.negatives)?,
            batch_size: self.get_or("batch", d.batch_size)?,
            epochs: self.get_or("epochs", d.epochs)?,
            lr: self.get_or("lr", d.lr)?,
            beta1: self.get_or("beta1", d.beta1)?,
            beta2: self.get_or("beta2", d.beta2)?,
            adam_eps: self.get_or("adam_eps", d.adam_eps)?,
            dropout_inter: self.get_or("dropout_inter", d.dropout_inter)?,
            dropout_mlp: self.get_or("dropout_mlp", d.dropout_mlp)?,
            s1_window: self.get_or("s1_window", d.s1_window)?,
            seq_cap: self.get_or("seq_cap", d.seq_cap)?,
            seed: self.get_or("seed", d.seed)?,
            t_min: self.get_or("t_min", d.t_min)?,
            resample_negatives: self.get_or("resample_negatives", d.resample_negatives)?,
            early_stopping: self.get_or("early_stopping", d.early_stopping)?,
            patience: self.get_or("patience", d.patience)?,
            grad_check: self.get_or("grad_check", d.grad_check)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `variant` (default `full`) with `long_setting` applied.
    pub fn variant(&self) -> Result<VariantSpec> {
        let v = VariantSpec::parse(self.raw("variant").unwrap_or("full"))?;
        self.with_long_setting(v)
    }

    pub fn with_long_setting(&self, v: VariantSpec) -> Result<VariantSpec> {
        Ok(match self.get::<LongSetting>("long_setting")? {
            Some(s) => v.with_setting(s),
            None => v,
        })
    }

    pub fn format(&self) -> Result<Format> {
        match self.raw("format").unwrap_or("json") {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            other => bail!("format must be json or csv, got {other:?}"),
        }
    }
}

pub fn flag_name(key: &str) -> String {
    format!("--{}", key.replace('_', "-"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
}
