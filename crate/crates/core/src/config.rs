//! Flat `key=value` run configuration shared by every command.
//!
//! ```text
//! seed=0
//! model.stage_channels=16,32,64,128
//! optim.lr0=0.0003
//! loss.lambda_mask=3
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::ResidualExtractor;
use crate::error::{Error, Result};
use crate::eval::{DEFAULT_FUSION_ALPHA, DEFAULT_FUSION_WEIGHT};
use crate::model::ModelConfig;
use crate::training::{LossConfig, OptimConfig, TrainConfig};

pub const SEED_ENV: &str = "EDGEDOC_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub fusion_weight: f32,
    pub fusion_alpha: f32,
    pub threshold: f32,
    /// Directory of per-id residual maps; `None` selects the high-pass stand-in.
    pub residual_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            fusion_weight: DEFAULT_FUSION_WEIGHT,
            fusion_alpha: DEFAULT_FUSION_ALPHA,
            threshold: 0.5,
            residual_dir: None,
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = num(key, v)?,
            "loss.lambda_mask" => self.loss.lambda_mask = num(key, v)?,
            "loss.dice_epsilon" => self.loss.dice_epsilon = num(key, v)?,
            "optim.lr0" => self.optim.lr0 = num(key, v)?,
            "optim.weight_decay" => self.optim.weight_decay = num(key, v)?,
            "optim.beta1" => self.optim.betas.0 = num(key, v)?,
            "optim.beta2" => self.optim.betas.1 = num(key, v)?,
            "optim.eps" => self.optim.eps = num(key, v)?,
            "optim.epochs" => self.optim.epochs = num(key, v)?,
            "optim.batch_size" => self.optim.batch_size = num(key, v)?,
            "optim.eta_min" => self.optim.eta_min = num(key, v)?,
            "fusion.weight" => self.fusion_weight = num(key, v)?,
            "fusion.alpha" => self.fusion_alpha = num(key, v)?,
            "eval.threshold" => self.threshold = num(key, v)?,
            "data.residual_dir" => self.residual_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            _ => match key.strip_prefix("model.") {
                Some(k) if self.model.to_pairs().iter().any(|(name, _)| name == k) => {
                    self.model.apply_pairs([(k, v)])?
                }
                _ => return Err(Error::Config(format!("unknown key {key:?}"))),
            },
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Every key, in a fixed order; feeding it back reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut lines = vec![format!("seed={}", self.seed)];
        for (k, v) in self.model.to_pairs() {
            lines.push(format!("model.{k}={v}"));
        }
        let o = &self.optim;
        lines.extend([
            format!("loss.lambda_mask={}", self.loss.lambda_mask),
            format!("loss.dice_epsilon={}", self.loss.dice_epsilon),
            format!("optim.lr0={}", o.lr0),
            format!("optim.weight_decay={}", o.weight_decay),
            format!("optim.beta1={}", o.betas.0),
            format!("optim.beta2={}", o.betas.1),
            format!("optim.eps={}", o.eps),
            format!("optim.epochs={}", o.epochs),
            format!("optim.batch_size={}", o.batch_size),
            format!("optim.eta_min={}", o.eta_min),
            format!("fusion.weight={}", self.fusion_weight),
            format!("fusion.alpha={}", self.fusion_alpha),
            format!("eval.threshold={}", self.threshold),
            format!(
                "data.residual_dir={}",
                self.residual_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
            ),
        ]);
        lines.join("\n") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        for (name, v) in [("fusion.weight", self.fusion_weight), ("fusion.alpha", self.fusion_alpha)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("eval.threshold must lie in [0, 1], got {}", self.threshold)));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            loss: self.loss,
            optim: self.optim,
            seed: self.seed,
        }
    }

    pub fn extractor(&self) -> ResidualExtractor {
        match &self.residual_dir {
            Some(dir) => ResidualExtractor::FromFile(dir.clone()),
            None => ResidualExtractor::HighPassStandIn,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.seed = 42;
        cfg.model = ModelConfig::reduced(64);
        cfg.optim.lr0 = 1e-3;
        cfg.loss.lambda_mask = 0.0;
        cfg.residual_dir = Some("maps".into());
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), cfg.to_text());
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("optim.lr", "1").is_err());
        assert!(cfg.set("model.nonsense", "1").is_err());
        assert!(cfg.set("optim.epochs", "many").is_err());
        assert!(cfg.apply_text("seed 3").is_err());
        cfg.set("fusion.weight", "1.5").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        assert_eq!(RunConfig::default().extractor(), ResidualExtractor::HighPassStandIn);
    }
}
