//! Flat `key = value` config files and the resolved run settings.
//!
//! Keys mirror the long flag names (`batch-size = 32`); `#` starts a comment.
//! A flag given on the command line always beats the file.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// A problem with user-supplied settings (exit code 2).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Default, Clone)]
pub struct ConfigFile {
    entries: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError(format!(
                    "config line {}: expected key = value",
                    i + 1
                )));
            };
            entries.insert(k.trim().replace('_', "-"), v.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::parse(&text)?)
    }

    /// Flag value, else file value, else `default`.
    pub fn pick<T: FromStr>(
        &self,
        flag: Option<T>,
        key: &str,
        default: T,
    ) -> Result<T, ConfigError> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.entries.get(key) {
            Some(raw) => raw
                .parse()
                .map_err(|_| ConfigError(format!("config key `{key}`: cannot parse `{raw}`"))),
            None => Ok(default),
        }
    }

    pub fn pick_opt<T: FromStr>(
        &self,
        flag: Option<T>,
        key: &str,
    ) -> Result<Option<T>, ConfigError> {
        if flag.is_some() {
            return Ok(flag);
        }
        self.entries
            .get(key)
            .map(|raw| {
                raw.parse()
                    .map_err(|_| ConfigError(format!("config key `{key}`: cannot parse `{raw}`")))
            })
            .transpose()
    }

    /// Boolean switches: set by the flag, or by `key = true` in the file.
    pub fn switch(&self, flag: bool, key: &str) -> Result<bool, ConfigError> {
        if flag {
            return Ok(true);
        }
        self.pick(None, key, false)
    }
}

/// Every setting that influences a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub images: Vec<PathBuf>,
    pub scale: usize,
    pub split: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub branch_width: usize,
    pub seed: u64,
    pub patch: usize,
    pub stride: usize,
    pub limit_patches: Option<usize>,
    pub augment: bool,
    pub local_residual: bool,
}

impl TrainSettings {
    /// `key = value` lines for the reproducibility record.
    pub fn record_lines(&self) -> Vec<String> {
        let mut out = vec![
            format!("scale = {}", self.scale),
            format!("split = {}", self.split),
            format!("epochs = {}", self.epochs),
            format!("batch-size = {}", self.batch_size),
            format!("lr = {:e}", self.lr),
            format!("lambda = {:e}", self.lambda),
            format!("alpha = {:e}", self.alpha),
            format!("branch-width = {}", self.branch_width),
            format!("seed = {}", self.seed),
            format!("patch = {}", self.patch),
            format!("stride = {}", self.stride),
            format!(
                "limit-patches = {}",
                self.limit_patches
                    .map_or("none".to_string(), |n| n.to_string())
            ),
            format!("augment = {}", self.augment),
            format!("local-residual = {}", self.local_residual),
        ];
        out.extend(
            self.images
                .iter()
                .map(|p| format!("image = {}", p.display())),
        );
        out
    }
}
