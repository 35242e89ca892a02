//! Training configuration as flat `key = value` text.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::codec::{noise_registry, Z_DIM};
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::objectives::LossWeights;

/// How iteration budgets relate to the full-scale schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleScale {
    Full,
    /// Full-scale budgets divided by this factor.
    Desk(u32),
}

pub const DEFAULT_DESK_FACTOR: u32 = 100;

impl ScheduleScale {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "desk" => Ok(Self::Desk(DEFAULT_DESK_FACTOR)),
            n => match n.parse::<u32>() {
                Ok(f) if f >= 1 => Ok(Self::Desk(f)),
                _ => Err(Error::Config(format!(
                    "schedule_scale must be `full`, `desk` or a positive divisor, got `{s}`"
                ))),
            },
        }
    }
}

impl std::fmt::Display for ScheduleScale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Full => f.write_str("full"),
            Self::Desk(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub c: usize,
    pub d_a: usize,
    pub max_resolution: usize,
    pub width_factor: f32,
    pub noise: String,
    pub norm: String,
    pub fade: String,
    pub lambda_gp: f32,
    pub lambda_cls: f32,
    pub lr: f32,
    pub batch: usize,
    pub seed: u64,
    pub schedule_scale: ScheduleScale,
    pub data_manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
}

/// Every key with a one-line description, in file order.
pub const CONFIG_KEYS: [(&str, &str); 15] = [
    ("c", "number of modalities"),
    ("d_a", "number of attributes"),
    ("max_resolution", "final resolution, a power of two in [4, 256]"),
    ("width_factor", "multiplier on every channel width, in (0, 1]"),
    ("noise", "noise distribution: normal | uniform"),
    ("norm", "feature normalization: equalize | batch | instance"),
    ("fade", "fade-in weight: trainable | linear"),
    ("lambda_gp", "gradient penalty weight"),
    ("lambda_cls", "classification loss weight"),
    ("lr", "Adam learning rate for both networks"),
    ("batch", "images per modality per step"),
    ("seed", "seed for initialization, sampling and noise"),
    ("schedule_scale", "full | desk | a divisor of the full-scale iteration budgets"),
    ("data_manifest", "path to the dataset manifest"),
    ("out_dir", "directory for checkpoints, logs and sample grids"),
];

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            c: 3,
            d_a: 3,
            max_resolution: 32,
            width_factor: 0.25,
            noise: "normal".into(),
            norm: "equalize".into(),
            fade: "linear".into(),
            lambda_gp: 10.0,
            lambda_cls: 1.0,
            lr: 1e-3,
            batch: 4,
            seed: 0,
            schedule_scale: ScheduleScale::Desk(DEFAULT_DESK_FACTOR),
            data_manifest: None,
            out_dir: PathBuf::from("runs/desk"),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

impl TrainConfig {
    /// Parses config text. Relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("key `{key}` set twice")));
            }
            cfg.set(key, value, base)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new("")))
    }

    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        match key {
            "c" => self.c = parse_num(key, value)?,
            "d_a" => self.d_a = parse_num(key, value)?,
            "max_resolution" => self.max_resolution = parse_num(key, value)?,
            "width_factor" => self.width_factor = parse_num(key, value)?,
            "noise" => self.noise = value.to_string(),
            "norm" => self.norm = value.to_string(),
            "fade" => self.fade = value.to_string(),
            "lambda_gp" => self.lambda_gp = parse_num(key, value)?,
            "lambda_cls" => self.lambda_cls = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "batch" => self.batch = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "schedule_scale" => self.schedule_scale = ScheduleScale::parse(value)?,
            "data_manifest" => self.data_manifest = Some(base.join(value)),
            "out_dir" => self.out_dir = base.join(value),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.network().validate()?;
        self.weights().validate()?;
        noise_registry()
            .create(&self.noise)
            .map_err(|e| Error::Config(e.to_string()))?;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        Ok(())
    }

    pub fn network(&self) -> GeneratorConfig {
        GeneratorConfig {
            c: self.c,
            d_a: self.d_a,
            z_dim: Z_DIM,
            max_resolution: self.max_resolution,
            width_factor: self.width_factor,
            norm: self.norm.clone(),
            fade: self.fade.clone(),
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_gp: self.lambda_gp,
            lambda_cls: self.lambda_cls,
        }
    }

    pub fn values(&self) -> Vec<(&'static str, String)> {
        vec![
            ("c", self.c.to_string()),
            ("d_a", self.d_a.to_string()),
            ("max_resolution", self.max_resolution.to_string()),
            ("width_factor", self.width_factor.to_string()),
            ("noise", self.noise.clone()),
            ("norm", self.norm.clone()),
            ("fade", self.fade.clone()),
            ("lambda_gp", self.lambda_gp.to_string()),
            ("lambda_cls", self.lambda_cls.to_string()),
            ("lr", self.lr.to_string()),
            ("batch", self.batch.to_string()),
            ("seed", self.seed.to_string()),
            ("schedule_scale", self.schedule_scale.to_string()),
            (
                "data_manifest",
                self.data_manifest
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
            ),
            ("out_dir", self.out_dir.display().to_string()),
        ]
    }

    /// Config text that parses back to `self` (paths written as given).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.values() {
            if k == "data_manifest" && v.is_empty() {
                continue;
            }
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_comments_and_paths() {
        let text = "# desk run\nc = 2\nd_a=4\nfade = linear  # scheduled\nschedule_scale = 50\n\
                    data_manifest = data/manifest.txt\nout_dir = /abs/out\n";
        let cfg = TrainConfig::parse(text, Path::new("/cfg")).unwrap();
        assert_eq!((cfg.c, cfg.d_a), (2, 4));
        assert_eq!(cfg.fade, "linear");
        assert_eq!(cfg.schedule_scale, ScheduleScale::Desk(50));
        assert_eq!(cfg.data_manifest.unwrap(), PathBuf::from("/cfg/data/manifest.txt"));
        assert_eq!(cfg.out_dir, PathBuf::from("/abs/out"));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = TrainConfig::parse("learning_rate = 0.1\n", Path::new("")).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("learning_rate")), "{err}");
    }

    #[test]
    fn bad_values_are_rejected() {
        for text in ["batch = 0", "lr = -1", "noise = cauchy", "max_resolution = 12", "c = x", "c = 1\nc = 2"] {
            assert!(matches!(TrainConfig::parse(text, Path::new("")), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn text_round_trip() {
        let cfg = TrainConfig {
            data_manifest: Some(PathBuf::from("/d/m.txt")),
            width_factor: 0.125,
            schedule_scale: ScheduleScale::Full,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::parse(&cfg.to_text(), Path::new("")).unwrap(), cfg);
    }

    #[test]
    fn every_key_is_documented() {
        let keys: Vec<&str> = TrainConfig::default().values().iter().map(|(k, _)| *k).collect();
        let documented: Vec<&str> = CONFIG_KEYS.iter().map(|(k, _)| *k).collect();
        assert_eq!(keys, documented);
    }
}
