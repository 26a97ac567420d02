//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapt::LossConfig;
use crate::error::{Error, Result};
use crate::pyramid::RESNET50_PROVIDER;
use crate::segment::{CrfBackend, CrfConfig};

/// When the CRF may replace plain thresholding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Refinement {
    /// Decided per support set on a pseudo episode.
    #[default]
    Dynamic,
    Never,
    Always,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// `(width, height)` images are resized to; `None` keeps native size.
    pub input_size: Option<(usize, usize)>,
    pub shots: usize,
    pub augmentations: usize,
    pub max_shear_deg: f64,
    pub loss: LossConfig,
    pub crf: CrfConfig,
    pub refinement: Refinement,
    pub backbone: String,
    pub weights: Option<PathBuf>,
    pub quick_infer: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input_size: Some((400, 400)),
            shots: 1,
            augmentations: 2,
            max_shear_deg: 20.0,
            loss: LossConfig::default(),
            crf: CrfConfig::default(),
            refinement: Refinement::Dynamic,
            backbone: RESNET50_PROVIDER.to_string(),
            weights: None,
            quick_infer: false,
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::config(format!("{key}: cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected a boolean, got `{value}`"))),
    }
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "input_size",
        "shots",
        "augmentations",
        "max_shear_deg",
        "temperature",
        "epochs",
        "learning_rate",
        "momentum",
        "adapter_channels",
        "crf_sxy_gaussian",
        "crf_sxy_bilateral",
        "crf_srgb",
        "crf_compat_gaussian",
        "crf_compat_bilateral",
        "crf_iterations",
        "crf_temperature",
        "crf_backend",
        "refinement",
        "backbone",
        "weights",
        "quick_infer",
        "seed",
    ];

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "input_size" => {
                self.input_size = if value.eq_ignore_ascii_case("native") {
                    None
                } else {
                    let (w, h) = value
                        .split_once(['x', 'X'])
                        .ok_or_else(|| Error::config(format!("input_size: expected WxH or native, got `{value}`")))?;
                    Some((parse(key, w.trim())?, parse(key, h.trim())?))
                }
            }
            "shots" => self.shots = parse(key, value)?,
            "augmentations" => self.augmentations = parse(key, value)?,
            "max_shear_deg" => self.max_shear_deg = parse(key, value)?,
            "temperature" => self.loss.temperature = parse(key, value)?,
            "epochs" => self.loss.epochs = parse(key, value)?,
            "learning_rate" => self.loss.learning_rate = parse(key, value)?,
            "momentum" => self.loss.momentum = parse(key, value)?,
            "adapter_channels" => self.loss.adapter_channels = parse(key, value)?,
            "crf_sxy_gaussian" => self.crf.sxy_gaussian = parse(key, value)?,
            "crf_sxy_bilateral" => self.crf.sxy_bilateral = parse(key, value)?,
            "crf_srgb" => self.crf.srgb = parse(key, value)?,
            "crf_compat_gaussian" => self.crf.compat_gaussian = parse(key, value)?,
            "crf_compat_bilateral" => self.crf.compat_bilateral = parse(key, value)?,
            "crf_iterations" => self.crf.iterations = parse(key, value)?,
            "crf_temperature" => self.crf.temperature = parse(key, value)?,
            "crf_backend" => {
                self.crf.backend = match value.to_ascii_lowercase().as_str() {
                    "lattice" => CrfBackend::Lattice,
                    "exact" => CrfBackend::Exact,
                    _ => return Err(Error::config(format!("crf_backend: unknown `{value}`"))),
                }
            }
            "refinement" => {
                self.refinement = match value.to_ascii_lowercase().as_str() {
                    "dynamic" => Refinement::Dynamic,
                    "never" => Refinement::Never,
                    "always" => Refinement::Always,
                    _ => return Err(Error::config(format!("refinement: unknown `{value}`"))),
                }
            }
            "backbone" => self.backbone = value.to_string(),
            "weights" => {
                self.weights = (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
            }
            "quick_infer" => self.quick_infer = parse_bool(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            other => return Err(Error::config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines over the current values. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::ingest(path, e.to_string()))?;
        Self::from_text(&text)
    }

    /// Every key with its current value, in [`RunConfig::KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("known key"));
        }
        out
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "input_size" => self
                .input_size
                .map_or_else(|| "native".into(), |(w, h)| format!("{w}x{h}")),
            "shots" => self.shots.to_string(),
            "augmentations" => self.augmentations.to_string(),
            "max_shear_deg" => self.max_shear_deg.to_string(),
            "temperature" => self.loss.temperature.to_string(),
            "epochs" => self.loss.epochs.to_string(),
            "learning_rate" => self.loss.learning_rate.to_string(),
            "momentum" => self.loss.momentum.to_string(),
            "adapter_channels" => self.loss.adapter_channels.to_string(),
            "crf_sxy_gaussian" => self.crf.sxy_gaussian.to_string(),
            "crf_sxy_bilateral" => self.crf.sxy_bilateral.to_string(),
            "crf_srgb" => self.crf.srgb.to_string(),
            "crf_compat_gaussian" => self.crf.compat_gaussian.to_string(),
            "crf_compat_bilateral" => self.crf.compat_bilateral.to_string(),
            "crf_iterations" => self.crf.iterations.to_string(),
            "crf_temperature" => self.crf.temperature.to_string(),
            "crf_backend" => match self.crf.backend {
                CrfBackend::Lattice => "lattice".into(),
                CrfBackend::Exact => "exact".into(),
            },
            "refinement" => match self.refinement {
                Refinement::Dynamic => "dynamic".into(),
                Refinement::Never => "never".into(),
                Refinement::Always => "always".into(),
            },
            "backbone" => self.backbone.clone(),
            "weights" => self
                .weights
                .as_ref()
                .map_or_else(|| "none".into(), |p| p.display().to_string()),
            "quick_infer" => self.quick_infer.to_string(),
            "seed" => self.seed.to_string(),
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.crf.validate()?;
        if self.shots == 0 {
            return Err(Error::config("shots must be at least 1"));
        }
        if self.augmentations == 0 {
            return Err(Error::config("augmentations must be at least 1"));
        }
        if !(0.0..90.0).contains(&self.max_shear_deg) {
            return Err(Error::config("max_shear_deg must lie in [0, 90)"));
        }
        if let Some((w, h)) = self.input_size {
            if w == 0 || h == 0 {
                return Err(Error::config("input_size must be positive"));
            }
        }
        Ok(())
    }
}
