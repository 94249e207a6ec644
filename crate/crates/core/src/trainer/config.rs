use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::adam::AdamConfig;
use crate::distributions::{make_alpha, DomainSpec};
use crate::error::{Error, Result};
use crate::networks::ArchConfig;
use crate::objectives::LossWeights;

/// Everything a training run depends on, read from a TOML file.
///
/// ```toml
/// [train]
/// epochs = 20
/// batch_size = 32
/// seed = 0
/// checkpoint_every = 500
///
/// [optim]
/// learning_rate = 2e-4
/// beta1 = 0.5
/// beta2 = 0.999
///
/// [loss]
/// ind = 1.0
/// rec = 10.0
/// adv = 1.0
/// mc_samples = 1
/// sigma_x = 0.1
///
/// [model]
/// style_dim = 8
/// content_dim = 16
///
/// [data]
/// domains = ["ink", "paint"]
/// root = "data"
/// ```
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub train: Schedule,
    pub optim: AdamConfig,
    pub loss: LossConfig,
    pub model: ArchConfig,
    pub data: DataConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub epochs: u64,
    pub batch_size: usize,
    /// Overrides `epochs` when set.
    pub max_steps: Option<u64>,
    pub seed: u64,
    /// Checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Discriminator updates per generator update.
    pub disc_updates: u32,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { epochs: 20, batch_size: 32, max_steps: None, seed: 0, checkpoint_every: 500, disc_updates: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub ind: f64,
    pub rec: f64,
    pub adv: f64,
    /// Monte Carlo samples per image in the ELBO.
    pub mc_samples: usize,
    pub sigma_x: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self { ind: w.ind, rec: w.rec, adv: w.adv, mc_samples: 1, sigma_x: 0.1 }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights { ind: self.ind, rec: self.rec, adv: self.adv }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Source first, then targets.
    pub domains: Vec<String>,
    /// Distance of each style prior mean from the origin.
    pub separation: f64,
    pub root: PathBuf,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            domains: vec!["ink".into(), "paint".into()],
            separation: 3.0,
            root: PathBuf::from("data"),
            train_size: 4096,
            test_size: 512,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.train.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.train.disc_updates == 0 {
            return bad("disc_updates must be at least 1".into());
        }
        self.optim.validate()?;
        self.loss.weights().validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.loss.mc_samples == 0 {
            return bad("mc_samples must be at least 1".into());
        }
        if !(self.loss.sigma_x > 0.0 && self.loss.sigma_x.is_finite()) {
            return bad(format!("sigma_x = {} must be positive", self.loss.sigma_x));
        }
        if !(self.data.separation > 0.0 && self.data.separation.is_finite()) {
            return bad(format!("separation = {} must be positive", self.data.separation));
        }
        self.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        let d = &self.data.domains;
        if d.len() < 2 {
            return bad("need a source and at least one target domain".into());
        }
        if d.iter().enumerate().any(|(i, a)| d[..i].contains(a)) {
            return bad(format!("duplicate domain in {d:?}"));
        }
        if d.len() > self.model.style_dim {
            return bad(format!("{} domains need style_dim >= {}", d.len(), d.len()));
        }
        Ok(())
    }

    /// Domain specs with `alpha_i = separation · e_i`.
    pub fn domain_specs(&self) -> Result<Vec<DomainSpec>> {
        self.data
            .domains
            .iter()
            .enumerate()
            .map(|(i, id)| {
                Ok(DomainSpec { id: id.clone(), alpha: make_alpha(i, self.model.style_dim, self.data.separation)?, is_source: i == 0 })
            })
            .collect()
    }
}
