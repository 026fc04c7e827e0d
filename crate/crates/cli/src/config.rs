//! Flat `key = value` run configuration.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use edgemix::backbone::{AdamConfig, NetworkConfig};
use edgemix::datapipe::{AugmentPlan, Flip};
use edgemix::evalkit::EvalConfig;
use edgemix::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub adam: AdamConfig,
    pub steps: u64,
    pub batch_size: usize,
    pub checkpoint_every: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            steps: 1000,
            batch_size: 1,
            checkpoint_every: 100,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub net: NetworkConfig,
    pub augment: AugmentPlan,
    pub eval: EvalConfig,
    pub train: TrainSettings,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "augment.rotations" => self.augment.rotations = list(key, v)?,
            "augment.crop_size" => self.augment.crop_size = parse(key, v)?,
            "augment.gammas" => self.augment.gammas = list(key, v)?,
            "augment.flips" => {
                self.augment.flips = v
                    .split(',')
                    .map(|t| Flip::from_tag(t.trim()))
                    .collect::<Result<_>>()?
            }
            "augment.split" => self.augment.split = parse(key, v)?,
            "eval.maxdist" => self.eval.maxdist = parse(key, v)?,
            "eval.thresholds" => {
                self.eval.thresholds = EvalConfig::with_threshold_count(parse(key, v)?).thresholds
            }
            "eval.f_beta" => self.eval.f_beta = parse(key, v)?,
            "train.lr" => self.train.adam.lr = parse(key, v)?,
            "train.beta1" => self.train.adam.beta1 = parse(key, v)?,
            "train.beta2" => self.train.adam.beta2 = parse(key, v)?,
            "train.eps" => self.train.adam.eps = parse(key, v)?,
            "train.weight_decay" => self.train.adam.weight_decay = parse(key, v)?,
            "train.steps" => self.train.steps = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse(key, v)?,
            _ => match key.strip_prefix("net.") {
                Some(field) if field != "side_outputs" => {
                    self.net.set(field, v)?;
                    if let Some(&c) = self.net.channels.first() {
                        self.net.racmix.channels = c;
                    }
                }
                _ => return Err(Error::Config(format!("unknown key {key:?}"))),
            },
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.augment.validate()?;
        self.eval.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if self.train.checkpoint_every == 0 {
            return Err(Error::Config(
                "train.checkpoint_every must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(
            RunConfig::parse("# nothing\n\n").unwrap(),
            RunConfig::default()
        );
    }

    #[test]
    fn keys_land_in_fields() {
        let cfg = RunConfig::parse(
            "seed = 7\nnet.channels = 8, 8, 16, 16, 16  # small\naugment.flips = i,v\neval.thresholds = 9\ntrain.lr = 1e-3\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.net.channels, vec![8, 8, 16, 16, 16]);
        assert_eq!(cfg.augment.flips, vec![Flip::Identity, Flip::Vertical]);
        assert_eq!(cfg.eval.thresholds.len(), 9);
        assert_eq!(cfg.train.adam.lr, 1e-3);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        for bad in [
            "net.width = 3",
            "seed 3",
            "seed = x",
            "augment.flips = i,q",
            "train.batch_size = 0",
        ] {
            assert!(
                matches!(RunConfig::parse(bad), Err(Error::Config(_))),
                "{bad}"
            );
        }
    }
}
