//! Run configuration and its `key = value` text form.

use std::fmt;
use std::str::FromStr;

use crate::error::{CenError, Result};
use crate::pipeline::PipelineConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StnMode {
    Identity,
    Linear,
}

impl FromStr for StnMode {
    type Err = CenError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(StnMode::Identity),
            "linear" => Ok(StnMode::Linear),
            other => Err(CenError::Config(format!("unknown STN mode {other:?} (identity|linear)"))),
        }
    }
}

impl fmt::Display for StnMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StnMode::Identity => "identity",
            StnMode::Linear => "linear",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub lesions_per_scene: usize,
    /// Mirror-symmetric lesion look-alikes per scene (each adds two blobs).
    pub distractor_pairs: usize,
    pub background_proposals: usize,
    pub noise_sigma: f64,
    pub num_classes: usize,
    pub channels: usize,
    pub image_size: usize,
    pub stn_mode: StnMode,
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub stn_epochs: usize,
    pub stn_learning_rate: f64,
    pub max_proposals: usize,
    pub proposal_nms: f64,
    pub final_nms: f64,
    pub score_threshold: f64,
    pub max_detections: usize,
    pub weak_top_k: usize,
    pub weak_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            seed: 1,
            train_scenes: 50,
            test_scenes: 20,
            lesions_per_scene: 2,
            distractor_pairs: 2,
            background_proposals: 4,
            noise_sigma: 0.02,
            num_classes: 4,
            channels: 8,
            image_size: 512,
            stn_mode: StnMode::Identity,
            hidden: crate::fusion::DEFAULT_HIDDEN,
            epochs: 150,
            learning_rate: 0.02,
            momentum: 0.9,
            stn_epochs: 3,
            stn_learning_rate: 1e-4,
            max_proposals: p.max_proposals,
            proposal_nms: p.proposal_nms,
            final_nms: p.final_nms,
            score_threshold: p.score_threshold,
            max_detections: p.max_detections,
            weak_top_k: p.weak_top_k,
            weak_threshold: p.weak_threshold,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| CenError::Config(format!("invalid value {value:?} for {key}")))
}

impl RunConfig {
    pub const KEYS: [&'static str; 24] = [
        "seed",
        "train_scenes",
        "test_scenes",
        "lesions_per_scene",
        "distractor_pairs",
        "background_proposals",
        "noise_sigma",
        "num_classes",
        "channels",
        "image_size",
        "stn_mode",
        "hidden",
        "epochs",
        "learning_rate",
        "momentum",
        "stn_epochs",
        "stn_learning_rate",
        "max_proposals",
        "proposal_nms",
        "final_nms",
        "score_threshold",
        "max_detections",
        "weak_top_k",
        "weak_threshold",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "train_scenes" => self.train_scenes = parse(key, value)?,
            "test_scenes" => self.test_scenes = parse(key, value)?,
            "lesions_per_scene" => self.lesions_per_scene = parse(key, value)?,
            "distractor_pairs" => self.distractor_pairs = parse(key, value)?,
            "background_proposals" => self.background_proposals = parse(key, value)?,
            "noise_sigma" => self.noise_sigma = parse(key, value)?,
            "num_classes" => self.num_classes = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "image_size" => self.image_size = parse(key, value)?,
            "stn_mode" => self.stn_mode = value.parse()?,
            "hidden" => self.hidden = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "stn_epochs" => self.stn_epochs = parse(key, value)?,
            "stn_learning_rate" => self.stn_learning_rate = parse(key, value)?,
            "max_proposals" => self.max_proposals = parse(key, value)?,
            "proposal_nms" => self.proposal_nms = parse(key, value)?,
            "final_nms" => self.final_nms = parse(key, value)?,
            "score_threshold" => self.score_threshold = parse(key, value)?,
            "max_detections" => self.max_detections = parse(key, value)?,
            "weak_top_k" => self.weak_top_k = parse(key, value)?,
            "weak_threshold" => self.weak_threshold = parse(key, value)?,
            other => return Err(CenError::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CenError::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            self.set(key.trim(), value.trim()).map_err(|e| CenError::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(CenError::Config(format!("{name} must lie in (0, 1], got {v}")))
            }
        };
        unit("proposal_nms", self.proposal_nms)?;
        unit("final_nms", self.final_nms)?;
        if !(0.0..1.0).contains(&self.score_threshold) || !(0.0..1.0).contains(&self.weak_threshold) {
            return Err(CenError::Config("score thresholds must lie in [0, 1)".into()));
        }
        if self.num_classes == 0 || self.channels == 0 || self.hidden == 0 {
            return Err(CenError::Config("num_classes, channels and hidden must be positive".into()));
        }
        if self.image_size < 128 || !self.image_size.is_multiple_of(crate::pipeline::WEAK_CELL) {
            return Err(CenError::Config(format!(
                "image_size must be a multiple of 32 and at least 128, got {}",
                self.image_size
            )));
        }
        if !(self.noise_sigma >= 0.0) || !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(CenError::Config("noise_sigma ≥ 0, learning_rate > 0, momentum in [0, 1) required".into()));
        }
        if self.train_scenes == 0 || self.test_scenes == 0 {
            return Err(CenError::Config("need at least one train and one test scene".into()));
        }
        Ok(())
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            max_proposals: self.max_proposals,
            proposal_nms: self.proposal_nms,
            final_nms: self.final_nms,
            score_threshold: self.score_threshold,
            max_detections: self.max_detections,
            weak_top_k: self.weak_top_k,
            weak_threshold: self.weak_threshold,
            ..PipelineConfig::default()
        }
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "train_scenes = {}", self.train_scenes)?;
        writeln!(f, "test_scenes = {}", self.test_scenes)?;
        writeln!(f, "lesions_per_scene = {}", self.lesions_per_scene)?;
        writeln!(f, "distractor_pairs = {}", self.distractor_pairs)?;
        writeln!(f, "background_proposals = {}", self.background_proposals)?;
        writeln!(f, "noise_sigma = {}", self.noise_sigma)?;
        writeln!(f, "num_classes = {}", self.num_classes)?;
        writeln!(f, "channels = {}", self.channels)?;
        writeln!(f, "image_size = {}", self.image_size)?;
        writeln!(f, "stn_mode = {}", self.stn_mode)?;
        writeln!(f, "hidden = {}", self.hidden)?;
        writeln!(f, "epochs = {}", self.epochs)?;
        writeln!(f, "learning_rate = {}", self.learning_rate)?;
        writeln!(f, "momentum = {}", self.momentum)?;
        writeln!(f, "stn_epochs = {}", self.stn_epochs)?;
        writeln!(f, "stn_learning_rate = {}", self.stn_learning_rate)?;
        writeln!(f, "max_proposals = {}", self.max_proposals)?;
        writeln!(f, "proposal_nms = {}", self.proposal_nms)?;
        writeln!(f, "final_nms = {}", self.final_nms)?;
        writeln!(f, "score_threshold = {}", self.score_threshold)?;
        writeln!(f, "max_detections = {}", self.max_detections)?;
        writeln!(f, "weak_top_k = {}", self.weak_top_k)?;
        writeln!(f, "weak_threshold = {}", self.weak_threshold)
    }
}
