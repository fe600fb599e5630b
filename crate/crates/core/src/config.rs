//! Flat `key = value` run configuration.
//!
//! Every setting of a run lives in one [`Config`]. Files hold one `key = value`
//! per line; `#` starts a comment. Unknown keys are errors. [`Config::to_text`]
//! writes the fully resolved configuration back in the same format.

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::spiking::LifParams;
use crate::ssam::{AttentionVariant, ValueMode};
use crate::stfs::StfsConfig;
use crate::synthgen::SynthConfig;

/// Where an attention stage is inserted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsamSite {
    /// After backbone stage 2.
    Shallow,
    /// After backbone stage 4.
    Deep,
}

impl SsamSite {
    /// Index of the backbone stage (0-based) the site follows.
    pub fn after_stage(self) -> usize {
        match self {
            Self::Shallow => 1,
            Self::Deep => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Shallow => "shallow",
            Self::Deep => "deep",
        }
    }
}

impl FromStr for SsamSite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shallow" => Ok(Self::Shallow),
            "deep" => Ok(Self::Deep),
            _ => Err(Error::Config(format!("unknown ssam stage {s:?} (shallow|deep)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,

    /// Time steps per sequence.
    pub steps: usize,
    /// Input and sensor rows.
    pub height: usize,
    /// Input and sensor columns.
    pub width: usize,
    pub window_us: u64,
    pub bin_clip: Option<f32>,
    /// Trailing sequences of every (identity, camera) held out for evaluation.
    pub test_seqs: usize,

    pub widths: Vec<usize>,
    pub blocks: Vec<usize>,
    pub strides: Vec<usize>,
    pub lif: LifParams,
    pub surrogate_width: f64,
    pub bn_momentum: f64,

    pub ssam_stages: Vec<SsamSite>,
    pub ssam_variant: AttentionVariant,
    pub ssam_value_mode: ValueMode,
    pub ssam_residual: bool,

    pub stfs: StfsConfig,
    pub loss: LossWeights,

    pub batch_p: usize,
    pub batch_k: usize,
    pub epochs: usize,
    pub lr: f64,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Held-out evaluation every this many epochs; 0 disables it.
    pub eval_every: usize,

    pub synth_ids: usize,
    pub synth_seqs: usize,
    pub synth_frames: usize,
    pub synth_frame_dt_us: u64,
    pub synth_threshold: f64,
}

impl Default for Config {
    fn default() -> Self {
        let synth = SynthConfig::default();
        Self {
            seed: 0,
            steps: 8,
            height: 48,
            width: 24,
            window_us: 80_000,
            bin_clip: None,
            test_seqs: 2,
            widths: vec![16, 32, 64, 128],
            blocks: vec![1, 1, 1, 1],
            strides: vec![2, 2, 2, 2],
            lif: LifParams::default(),
            surrogate_width: 1.0,
            bn_momentum: 0.1,
            ssam_stages: vec![SsamSite::Shallow, SsamSite::Deep],
            ssam_variant: AttentionVariant::Staw,
            ssam_value_mode: ValueMode::Literal,
            ssam_residual: true,
            stfs: StfsConfig::default(),
            loss: LossWeights::default(),
            batch_p: 4,
            batch_k: 4,
            epochs: 30,
            lr: 3.5e-4,
            decay_every: 30,
            decay_factor: 1.0 / 3.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            eval_every: 1,
            synth_ids: synth.n_ids,
            synth_seqs: synth.seqs_per_cam,
            synth_frames: synth.frames,
            synth_frame_dt_us: synth.frame_dt_us,
            synth_threshold: synth.threshold,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {v:?}: {e}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected on/off, got {v:?}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    if v.trim().is_empty() || v.trim() == "none" {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn list<T: Display>(v: &[T]) -> String {
    if v.is_empty() {
        return "none".into();
    }
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn onoff(b: bool) -> String {
    if b { "on" } else { "off" }.into()
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "seed",
    "model.steps",
    "data.height",
    "data.width",
    "data.window_us",
    "bin_clip",
    "data.test_seqs",
    "model.widths",
    "model.blocks",
    "model.strides",
    "lif.tau_m",
    "lif.dt",
    "lif.v_rest",
    "lif.v_th",
    "lif.v_reset",
    "surrogate.width",
    "bn.momentum",
    "ssam.stages",
    "ssam.variant",
    "ssam.value_mode",
    "ssam.residual",
    "stfs.enabled",
    "stfs.temporal",
    "stfs.spatial",
    "loss.lambda1",
    "loss.lambda2",
    "loss.margin",
    "loss.epsilon",
    "batch.P",
    "batch.K",
    "train.epochs",
    "train.lr",
    "train.decay_every",
    "train.decay_factor",
    "adam.beta1",
    "adam.beta2",
    "adam.eps",
    "train.eval_every",
    "synth.ids",
    "synth.seqs",
    "synth.frames",
    "synth.frame_dt_us",
    "synth.threshold",
];

impl Config {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "model.steps" => self.steps = parse(key, v)?,
            "data.height" => self.height = parse(key, v)?,
            "data.width" => self.width = parse(key, v)?,
            "data.window_us" => self.window_us = parse(key, v)?,
            "bin_clip" => {
                self.bin_clip = match v {
                    "none" | "off" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "data.test_seqs" => self.test_seqs = parse(key, v)?,
            "model.widths" => self.widths = parse_list(key, v)?,
            "model.blocks" => self.blocks = parse_list(key, v)?,
            "model.strides" => self.strides = parse_list(key, v)?,
            "lif.tau_m" => self.lif.tau_m = parse(key, v)?,
            "lif.dt" => self.lif.dt = parse(key, v)?,
            "lif.v_rest" => self.lif.v_rest = parse(key, v)?,
            "lif.v_th" => self.lif.v_th = parse(key, v)?,
            "lif.v_reset" => self.lif.v_reset = parse(key, v)?,
            "surrogate.width" => self.surrogate_width = parse(key, v)?,
            "bn.momentum" => self.bn_momentum = parse(key, v)?,
            "ssam.stages" => self.ssam_stages = parse_list(key, v)?,
            "ssam.variant" => self.ssam_variant = v.parse()?,
            "ssam.value_mode" => self.ssam_value_mode = v.parse()?,
            "ssam.residual" => self.ssam_residual = parse_bool(key, v)?,
            "stfs.enabled" => self.stfs.enabled = parse_bool(key, v)?,
            "stfs.temporal" => self.stfs.temporal = parse_bool(key, v)?,
            "stfs.spatial" => self.stfs.spatial = parse_bool(key, v)?,
            "loss.lambda1" => self.loss.lambda1 = parse(key, v)?,
            "loss.lambda2" => self.loss.lambda2 = parse(key, v)?,
            "loss.margin" => self.loss.margin = parse(key, v)?,
            "loss.epsilon" => self.loss.epsilon = parse(key, v)?,
            "batch.P" => self.batch_p = parse(key, v)?,
            "batch.K" => self.batch_k = parse(key, v)?,
            "train.epochs" => self.epochs = parse(key, v)?,
            "train.lr" => self.lr = parse(key, v)?,
            "train.decay_every" => self.decay_every = parse(key, v)?,
            "train.decay_factor" => self.decay_factor = parse(key, v)?,
            "adam.beta1" => self.adam_beta1 = parse(key, v)?,
            "adam.beta2" => self.adam_beta2 = parse(key, v)?,
            "adam.eps" => self.adam_eps = parse(key, v)?,
            "train.eval_every" => self.eval_every = parse(key, v)?,
            "synth.ids" => self.synth_ids = parse(key, v)?,
            "synth.seqs" => self.synth_seqs = parse(key, v)?,
            "synth.frames" => self.synth_frames = parse(key, v)?,
            "synth.frame_dt_us" => self.synth_frame_dt_us = parse(key, v)?,
            "synth.threshold" => self.synth_threshold = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "model.steps" => self.steps.to_string(),
            "data.height" => self.height.to_string(),
            "data.width" => self.width.to_string(),
            "data.window_us" => self.window_us.to_string(),
            "bin_clip" => self.bin_clip.map_or("none".into(), |c| c.to_string()),
            "data.test_seqs" => self.test_seqs.to_string(),
            "model.widths" => list(&self.widths),
            "model.blocks" => list(&self.blocks),
            "model.strides" => list(&self.strides),
            "lif.tau_m" => self.lif.tau_m.to_string(),
            "lif.dt" => self.lif.dt.to_string(),
            "lif.v_rest" => self.lif.v_rest.to_string(),
            "lif.v_th" => self.lif.v_th.to_string(),
            "lif.v_reset" => self.lif.v_reset.to_string(),
            "surrogate.width" => self.surrogate_width.to_string(),
            "bn.momentum" => self.bn_momentum.to_string(),
            "ssam.stages" => list(&self.ssam_stages.iter().map(|s| s.name()).collect::<Vec<_>>()),
            "ssam.variant" => self.ssam_variant.to_string(),
            "ssam.value_mode" => self.ssam_value_mode.to_string(),
            "ssam.residual" => onoff(self.ssam_residual),
            "stfs.enabled" => onoff(self.stfs.enabled),
            "stfs.temporal" => onoff(self.stfs.temporal),
            "stfs.spatial" => onoff(self.stfs.spatial),
            "loss.lambda1" => self.loss.lambda1.to_string(),
            "loss.lambda2" => self.loss.lambda2.to_string(),
            "loss.margin" => self.loss.margin.to_string(),
            "loss.epsilon" => self.loss.epsilon.to_string(),
            "batch.P" => self.batch_p.to_string(),
            "batch.K" => self.batch_k.to_string(),
            "train.epochs" => self.epochs.to_string(),
            "train.lr" => self.lr.to_string(),
            "train.decay_every" => self.decay_every.to_string(),
            "train.decay_factor" => self.decay_factor.to_string(),
            "adam.beta1" => self.adam_beta1.to_string(),
            "adam.beta2" => self.adam_beta2.to_string(),
            "adam.eps" => self.adam_eps.to_string(),
            "train.eval_every" => self.eval_every.to_string(),
            "synth.ids" => self.synth_ids.to_string(),
            "synth.seqs" => self.synth_seqs.to_string(),
            "synth.frames" => self.synth_frames.to_string(),
            "synth.frame_dt_us" => self.synth_frame_dt_us.to_string(),
            "synth.threshold" => self.synth_threshold.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", i + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.merge_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.lif.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.loss.validate()?;
        if self.steps == 0 || self.window_us == 0 {
            return bad(format!("model.steps={} data.window_us={}", self.steps, self.window_us));
        }
        if self.widths.len() != 4 || self.blocks.len() != 4 || self.strides.len() != 4 {
            return bad("model.widths, model.blocks and model.strides need 4 entries".into());
        }
        if self.widths.contains(&0) || self.blocks.contains(&0) || self.strides.contains(&0) {
            return bad("model widths, blocks and strides must be positive".into());
        }
        if self.batch_p < 2 || self.batch_k < 2 {
            return bad(format!("batch.P={} batch.K={} (each needs >= 2)", self.batch_p, self.batch_k));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || self.decay_every == 0 {
            return bad(format!("train.lr={} train.decay_every={}", self.lr, self.decay_every));
        }
        if !(self.surrogate_width > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad(format!("surrogate.width={} bn.momentum={}", self.surrogate_width, self.bn_momentum));
        }
        let (h, w) = self.feature_size(self.strides.len());
        if self.stfs.enabled && self.stfs.spatial && (h < 2 || w < 2) {
            return bad(format!("spatial sampling needs a final map of at least 2x2, got {h}x{w}"));
        }
        if self.stfs.enabled && self.stfs.temporal && self.steps < 2 {
            return bad("temporal sampling needs model.steps >= 2".into());
        }
        Ok(())
    }

    /// Generator settings; sensor size and seed come from the shared keys.
    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            n_ids: self.synth_ids,
            seqs_per_cam: self.synth_seqs,
            frames: self.synth_frames,
            width: self.width,
            height: self.height,
            frame_dt_us: self.synth_frame_dt_us,
            threshold: self.synth_threshold,
        }
    }

    /// Spatial size after the first `stages` backbone stages.
    pub fn feature_size(&self, stages: usize) -> (usize, usize) {
        let down = |n: usize, s: usize| (n + 2 - 3) / s + 1;
        self.strides[..stages]
            .iter()
            .fold((self.height, self.width), |(h, w), &s| (down(h, s), down(w, s)))
    }
}
