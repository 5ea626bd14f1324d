//! Flat `namespace.key=value` run configuration.
//!
//! Every run starts from the defaults, applies a config file, then command
//! line overrides, then `TUL_SEED`. The effective configuration is echoed in
//! the same format into checkpoints and reports.

use std::path::Path;

use crate::augment::Strategy;
use crate::data::{FormatSpec, SplitRule, TimeFormat};
use crate::error::{Result, TulError};
use crate::synth::SynthConfig;
use crate::train::TrainConfig;
use crate::transformer::PositionKind;

pub const SEED_ENV: &str = "TUL_SEED";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DataConfig {
    pub format: FormatSpec,
    pub split: SplitRule,
    /// Keep only the users with the most trajectories; 0 keeps everyone.
    pub top_users: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub train: TrainConfig,
}

trait ConfigValue: Sized {
    fn parse(raw: &str) -> Option<Self>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse(raw: &str) -> Option<Self> {
                raw.parse().ok()
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

plain_value!(usize, u64, bool, Strategy, PositionKind);

impl ConfigValue for f64 {
    fn parse(raw: &str) -> Option<Self> {
        raw.parse().ok().filter(|v: &f64| v.is_finite())
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for f32 {
    fn parse(raw: &str) -> Option<Self> {
        raw.parse().ok().filter(|v: &f32| v.is_finite())
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for Option<usize> {
    fn parse(raw: &str) -> Option<Self> {
        if raw == "none" {
            Some(None)
        } else {
            raw.parse().ok().map(Some)
        }
    }
    fn render(&self) -> String {
        self.map_or_else(|| "none".into(), |v| v.to_string())
    }
}

impl ConfigValue for char {
    fn parse(raw: &str) -> Option<Self> {
        match raw {
            "tab" => Some('\t'),
            "comma" => Some(','),
            "space" => Some(' '),
            "semicolon" => Some(';'),
            _ => {
                let mut cs = raw.chars();
                let c = cs.next()?;
                cs.next().is_none().then_some(c)
            }
        }
    }
    fn render(&self) -> String {
        match self {
            '\t' => "tab".into(),
            ',' => "comma".into(),
            ' ' => "space".into(),
            ';' => "semicolon".into(),
            c => c.to_string(),
        }
    }
}

impl ConfigValue for TimeFormat {
    fn parse(raw: &str) -> Option<Self> {
        TimeFormat::from_config_value(raw)
    }
    fn render(&self) -> String {
        self.as_config_value()
    }
}

fn parse_as<T: ConfigValue>(key: &str, raw: &str) -> Result<T> {
    T::parse(raw).ok_or_else(|| TulError::Config(format!("invalid value {raw:?} for {key}")))
}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+;)*) => {
        /// Every accepted key, in echo order.
        pub const KEYS: &[&str] = &[$($key),*];

        impl RunConfig {
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key {
                    $($key => self.$($field).+ = parse_as(key, value)?,)*
                    _ => return Err(TulError::Config(format!("unknown config key {key:?}"))),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $($key => Some(self.$($field).+.render()),)*
                    _ => None,
                }
            }
        }
    };
}

config_keys! {
    "data.delimiter" => data.format.delimiter;
    "data.user_col" => data.format.user_col;
    "data.time_col" => data.format.time_col;
    "data.poi_col" => data.format.poi_col;
    "data.category_col" => data.format.category_col;
    "data.lat_col" => data.format.lat_col;
    "data.lon_col" => data.format.lon_col;
    "data.time_format" => data.format.time_format;
    "data.skip_header" => data.format.skip_header;
    "data.time_slices" => train.time_slices;
    "data.min_trajectories" => data.split.min_trajectories;
    "data.top_users" => data.top_users;
    "synth.num_users" => synth.num_users;
    "synth.num_days" => synth.num_days;
    "synth.checkins_min" => synth.checkins_min;
    "synth.checkins_max" => synth.checkins_max;
    "synth.pois_per_user" => synth.pois_per_user;
    "synth.overlap" => synth.overlap;
    "synth.category_count" => synth.category_count;
    "synth.time_jitter" => synth.time_jitter;
    "synth.seed" => synth.seed;
    "augment.strategy" => train.augment.strategy;
    "augment.k" => train.augment.k;
    "augment.seed" => train.augment.seed;
    "distill.temperature" => train.distill.temperature;
    "distill.lambda" => train.distill.lambda;
    "distill.disable_l2" => train.distill.disable_l2;
    "distill.disable_input_ce" => train.distill.disable_input_ce;
    "model.dim" => train.model.dim;
    "model.hidden" => train.model.hidden;
    "transformer.max_len" => train.model.max_len;
    "model.use_context" => train.model.use_context;
    "transformer.layers" => train.model.layers;
    "transformer.heads" => train.model.heads;
    "transformer.ff_dim" => train.model.ff_dim;
    "transformer.dropout" => train.model.dropout;
    "pe.kind" => train.model.position;
    "pe.time_unit" => train.model.time_unit;
    "train.lr" => train.lr;
    "train.decay" => train.decay;
    "train.decay_period" => train.decay_period;
    "train.patience" => train.patience;
    "train.batch_size" => train.batch_size;
    "train.max_epochs" => train.max_epochs;
    "train.seed" => train.seed;
    "train.clip_norm" => train.clip_norm;
    "train.chunk_size" => train.chunk_size;
}

impl RunConfig {
    /// `key=value` lines; blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TulError::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| TulError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| TulError::io(path, e))?;
        self.apply_text(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// `key=value` overrides as given on the command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| TulError::Config(format!("expected key=value, got {o:?}")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Applies `TUL_SEED` to the training and augmentation seeds.
    pub fn apply_env(&mut self) -> Result<()> {
        match std::env::var(SEED_ENV) {
            Ok(v) => self.apply_seed(&v),
            Err(_) => Ok(()),
        }
    }

    pub fn apply_seed(&mut self, raw: &str) -> Result<()> {
        let seed: u64 = parse_as(SEED_ENV, raw.trim())?;
        self.train.seed = seed;
        self.train.augment.seed = seed;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.data.format;
        if f.lat_col.is_some() != f.lon_col.is_some() {
            return Err(TulError::Config("data.lat_col and data.lon_col must both be set or both be none".into()));
        }
        if self.data.split.min_trajectories < 5 {
            return Err(TulError::Config("data.min_trajectories must be at least 5".into()));
        }
        if self.train.time_slices == 0 || 86_400 % self.train.time_slices != 0 {
            return Err(TulError::Config(format!(
                "data.time_slices must divide 86400, got {}",
                self.train.time_slices
            )));
        }
        self.synth.validate()?;
        self.train.validate()
    }

    /// Canonical echo: every key in fixed order.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k}={}\n", self.get(k).expect("listed key")))
            .collect()
    }

    /// Keys whose values differ between two configurations.
    pub fn diff(&self, other: &RunConfig) -> Vec<&'static str> {
        KEYS.iter().copied().filter(|k| self.get(k) != other.get(k)).collect()
    }
}
