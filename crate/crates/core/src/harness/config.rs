use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::ImageSize;
use crate::model::{AttentionMode, DNetTopology};

use super::detect::SelectionMode;
use super::synth::SceneMode;

/// Every knob of data generation, training, detection and evaluation.
///
/// Read from `key = value` text; `#` starts a comment. Unknown keys are errors.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub scene_mode: SceneMode,
    pub contrast: f64,
    pub noise: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub lambda: f64,
    /// Negative candidates sampled per image and epoch; all positives are used.
    pub negatives_per_image: usize,
    pub candidate_step: f64,
    pub positive_threshold: f64,
    pub sigma: f64,
    pub pool_threshold: f64,
    pub attention: AttentionMode,
    pub fc1_width: usize,
    pub siamese_hidden: usize,
    pub siamese_epochs: usize,
    pub siamese_learning_rate: f64,
    /// Matching pairs sampled per training image for M-Net.
    pub pair_cap: usize,
    /// Also rank detections of the primary line above those of other lines.
    pub rank_primary_pairs: bool,
    pub selection: SelectionMode,
    pub nms_threshold: f64,
    pub tau_lo: f64,
    pub tau_hi: f64,
    pub tau_step: f64,
    /// Operating point reported in summaries.
    pub eval_tau: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 7,
            width: 64,
            height: 64,
            train_scenes: 500,
            test_scenes: 100,
            scene_mode: SceneMode::Heterogeneous,
            contrast: 0.4,
            noise: 0.05,
            epochs: 12,
            learning_rate: 0.1,
            batch_size: 1,
            lambda: 0.1,
            negatives_per_image: 16,
            candidate_step: 8.0,
            positive_threshold: 0.85,
            sigma: 4.0,
            pool_threshold: 3.0,
            attention: AttentionMode::Mirror,
            fc1_width: 32,
            siamese_hidden: 64,
            siamese_epochs: 10,
            siamese_learning_rate: 0.1,
            pair_cap: 64,
            rank_primary_pairs: true,
            selection: SelectionMode::RankMatch,
            nms_threshold: 0.85,
            tau_lo: 0.5,
            tau_hi: 1.0,
            tau_step: 0.005,
            eval_tau: 0.85,
        }
    }
}

fn parse_val<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {v:?} for {key}"))),
    }
}

impl TrainConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_val(key, v)?,
            "width" => self.width = parse_val(key, v)?,
            "height" => self.height = parse_val(key, v)?,
            "train_scenes" => self.train_scenes = parse_val(key, v)?,
            "test_scenes" => self.test_scenes = parse_val(key, v)?,
            "scene_mode" => self.scene_mode = v.parse()?,
            "contrast" => self.contrast = parse_val(key, v)?,
            "noise" => self.noise = parse_val(key, v)?,
            "epochs" => self.epochs = parse_val(key, v)?,
            "learning_rate" => self.learning_rate = parse_val(key, v)?,
            "batch_size" => self.batch_size = parse_val(key, v)?,
            "lambda" => self.lambda = parse_val(key, v)?,
            "negatives_per_image" => self.negatives_per_image = parse_val(key, v)?,
            "candidate_step" => self.candidate_step = parse_val(key, v)?,
            "positive_threshold" => self.positive_threshold = parse_val(key, v)?,
            "sigma" => self.sigma = parse_val(key, v)?,
            "pool_threshold" => self.pool_threshold = parse_val(key, v)?,
            "attention" => self.attention = v.parse()?,
            "fc1_width" => self.fc1_width = parse_val(key, v)?,
            "siamese_hidden" => self.siamese_hidden = parse_val(key, v)?,
            "siamese_epochs" => self.siamese_epochs = parse_val(key, v)?,
            "siamese_learning_rate" => self.siamese_learning_rate = parse_val(key, v)?,
            "pair_cap" => self.pair_cap = parse_val(key, v)?,
            "rank_primary_pairs" => self.rank_primary_pairs = parse_bool(key, v)?,
            "selection" => self.selection = v.parse()?,
            "nms_threshold" => self.nms_threshold = parse_val(key, v)?,
            "tau_lo" => self.tau_lo = parse_val(key, v)?,
            "tau_hi" => self.tau_hi = parse_val(key, v)?,
            "tau_step" => self.tau_step = parse_val(key, v)?,
            "eval_tau" => self.eval_tau = parse_val(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Defaults overridden by the settings in `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key = value", n + 1)));
            };
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every setting as `key = value` lines; `parse` reads it back unchanged.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").expect("string write");
        kv("seed", self.seed.to_string());
        kv("width", self.width.to_string());
        kv("height", self.height.to_string());
        kv("train_scenes", self.train_scenes.to_string());
        kv("test_scenes", self.test_scenes.to_string());
        kv("scene_mode", self.scene_mode.as_str().into());
        kv("contrast", self.contrast.to_string());
        kv("noise", self.noise.to_string());
        kv("epochs", self.epochs.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lambda", self.lambda.to_string());
        kv("negatives_per_image", self.negatives_per_image.to_string());
        kv("candidate_step", self.candidate_step.to_string());
        kv("positive_threshold", self.positive_threshold.to_string());
        kv("sigma", self.sigma.to_string());
        kv("pool_threshold", self.pool_threshold.to_string());
        kv("attention", self.attention.as_str().into());
        kv("fc1_width", self.fc1_width.to_string());
        kv("siamese_hidden", self.siamese_hidden.to_string());
        kv("siamese_epochs", self.siamese_epochs.to_string());
        kv("siamese_learning_rate", self.siamese_learning_rate.to_string());
        kv("pair_cap", self.pair_cap.to_string());
        kv("rank_primary_pairs", self.rank_primary_pairs.to_string());
        kv("selection", self.selection.as_str().into());
        kv("nms_threshold", self.nms_threshold.to_string());
        kv("tau_lo", self.tau_lo.to_string());
        kv("tau_hi", self.tau_hi.to_string());
        kv("tau_step", self.tau_step.to_string());
        kv("eval_tau", self.eval_tau.to_string());
        out
    }

    pub fn validate(&self) -> Result<()> {
        ImageSize::new(self.width, self.height)?;
        let positive = [
            ("learning_rate", self.learning_rate),
            ("lambda", self.lambda),
            ("candidate_step", self.candidate_step),
            ("positive_threshold", self.positive_threshold),
            ("sigma", self.sigma),
            ("pool_threshold", self.pool_threshold),
            ("siamese_learning_rate", self.siamese_learning_rate),
            ("nms_threshold", self.nms_threshold),
            ("tau_step", self.tau_step),
        ];
        for (k, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        if self.batch_size == 0 || self.fc1_width == 0 || self.siamese_hidden == 0 {
            return Err(Error::Config("batch size and layer widths must be positive".into()));
        }
        if !(0.0 <= self.tau_lo && self.tau_lo < self.tau_hi && self.tau_hi <= 1.0) {
            return Err(Error::Config(format!(
                "tau range [{}, {}] must lie in [0, 1]",
                self.tau_lo, self.tau_hi
            )));
        }
        if !(0.0..=1.0).contains(&self.eval_tau) || self.positive_threshold >= 1.0 {
            return Err(Error::Config("thresholds must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn image_size(&self) -> ImageSize {
        ImageSize::new(self.width, self.height).expect("validated size")
    }

    pub fn topology(&self) -> DNetTopology {
        DNetTopology {
            sigma: self.sigma,
            pool_threshold: self.pool_threshold,
            attention: self.attention,
            fc1_width: self.fc1_width,
            ..DNetTopology::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let mut c = TrainConfig::default();
        c.learning_rate = 0.0123;
        c.attention = AttentionMode::NoFlip;
        c.selection = SelectionMode::Nms;
        c.rank_primary_pairs = false;
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn comments_and_errors() {
        let c = TrainConfig::parse("# header\nepochs = 3  # short\n\nseed=11\n").unwrap();
        assert_eq!((c.epochs, c.seed), (3, 11));
        assert!(matches!(TrainConfig::parse("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::parse("epochs = many"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::parse("learning_rate = -1"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::parse("no equals sign"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::parse("tau_lo = 0.9\ntau_hi = 0.8"), Err(Error::Config(_))));
    }
}
