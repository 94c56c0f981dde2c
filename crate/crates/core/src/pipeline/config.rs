//! `key = value` configuration files.

use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{parse_value, ModelConfig};
use crate::tensor::fft::is_pow2;
use crate::tensor::DType;

/// Splits text into `(key, value)` pairs. Blank lines and `#` comments are
/// skipped; repeated keys are errors.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value', got '{line}'", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.iter().any(|(ek, _)| ek == k) {
            return Err(Error::Config(format!("line {}: duplicate key '{k}'", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',').map(|s| parse_value::<f64>(key, s)).collect()
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ")
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub crop_size: usize,
    pub iterations: usize,
    /// Fractions of `iterations` at which the learning rate decays.
    pub milestones: Vec<f64>,
    pub decay: f64,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub precision: DType,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            learning_rate: 4e-4,
            batch_size: 2,
            crop_size: 64,
            iterations: 500,
            milestones: vec![0.5, 0.75, 0.9],
            decay: 0.5,
            loss_weights: LossWeights::default(),
            seed: 0,
            precision: DType::F32,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.model.set(key, value)? {
            return Ok(());
        }
        match key {
            "learning_rate" | "lr" => self.learning_rate = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "crop_size" => self.crop_size = parse_value(key, value)?,
            "iterations" => self.iterations = parse_value(key, value)?,
            "milestones" => self.milestones = parse_list(key, value)?,
            "decay" => self.decay = parse_value(key, value)?,
            "loss_weights" => {
                let w = parse_list(key, value)?;
                let arr: [f64; 3] = w
                    .try_into()
                    .map_err(|_| Error::Config("loss_weights needs three values".into()))?;
                self.loss_weights = LossWeights::from_array(arr)?;
            }
            "seed" => self.seed = parse_value(key, value)?,
            "precision" => {
                self.precision = match value.trim() {
                    "f32" | "32" => DType::F32,
                    "f64" | "64" => DType::F64,
                    v => return Err(Error::Config(format!("precision must be f32 or f64, got '{v}'"))),
                }
            }
            "log_every" => self.log_every = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown setting '{key}'"))),
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (k, v) in parse_pairs(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !is_pow2(self.crop_size) || self.crop_size < crate::model::MIN_SIDE {
            return bad(format!(
                "crop_size must be a power of two >= 16, got {}",
                self.crop_size
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.iterations == 0 || self.log_every == 0 {
            return bad("batch_size, iterations and log_every must be positive".into());
        }
        if self.milestones.iter().any(|m| !(*m > 0.0 && *m < 1.0)) || self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "milestones must be strictly increasing in (0,1), got {:?}",
                self.milestones
            ));
        }
        if !(self.decay > 0.0 && self.decay.is_finite()) {
            return bad(format!("decay must be positive, got {}", self.decay));
        }
        crate::model::Model::new(self.model.clone()).map(|_| ())
    }

    pub fn to_text(&self) -> String {
        let mut s = self.model.to_text();
        let prec = match self.precision {
            DType::F32 => "f32",
            DType::F64 => "f64",
        };
        let lines = [
            ("learning_rate", format!("{:?}", self.learning_rate)),
            ("batch_size", self.batch_size.to_string()),
            ("crop_size", self.crop_size.to_string()),
            ("iterations", self.iterations.to_string()),
            ("milestones", fmt_list(&self.milestones)),
            ("decay", format!("{:?}", self.decay)),
            ("loss_weights", fmt_list(&self.loss_weights.as_array())),
            ("seed", self.seed.to_string()),
            ("precision", prec.to_string()),
            ("log_every", self.log_every.to_string()),
        ];
        for (k, v) in lines {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let cfg = TrainConfig::from_text("# desk run\nlr = 1e-3\ncomposition = vanilla_ss2d\nloss_weights = 1, 0, 0\n")
            .unwrap();
        assert_eq!(cfg.learning_rate, 1e-3);
        assert_eq!(cfg.model.composition.name(), "vanilla_ss2d");
        assert_eq!(cfg.loss_weights.as_array(), [1.0, 0.0, 0.0]);
        assert_eq!(cfg.batch_size, 2);
    }

    #[test]
    fn text_round_trip() {
        let cfg = TrainConfig {
            precision: DType::F64,
            seed: 9,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_values() {
        for text in [
            "crop_size = 48",
            "milestones = 0.5, 0.4",
            "lr = 0",
            "nope = 1",
            "a b",
            "seed = 1\nseed = 2",
        ] {
            assert!(matches!(TrainConfig::from_text(text), Err(Error::Config(_))), "{text}");
        }
    }
}
