//! TOML experiment configuration.
//!
//! ```toml
//! [experiment]
//! regimes = ["multitask", "cilicia"]
//! seeds = [0, 1, 2, 3, 4]
//! test_fraction = 0.2
//! val_fraction = 0.2
//!
//! [dataset]            # or a [synth] table holding a SynthSpec
//! features = "features.csv"
//! labels = "labels.csv"
//!
//! [model]
//! hidden = 512
//! shared_adapter = true
//! batch_size = 64
//!
//! [sgd]
//! base_lr = 0.001
//!
//! [transfer]
//! lambda = 0.25
//! epochs_phase1 = 300
//! epochs_phase2 = 300
//! strong_heads_phase2 = "trainable"
//! ```
//!
//! Every section and key is optional except the data source. Relative dataset
//! paths resolve against the directory of the config file.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::nn::SgdConfig;
use crate::trainer::{ModelConfig, TransferConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Individual,
    Multitask,
    Cilicia,
    CiliciaRandomSplit,
    CiliciaNoTransfer,
}

impl Regime {
    pub const ALL: [Regime; 5] =
        [Regime::Individual, Regime::Multitask, Regime::Cilicia, Regime::CiliciaRandomSplit, Regime::CiliciaNoTransfer];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Individual => "individual",
            Regime::Multitask => "multitask",
            Regime::Cilicia => "cilicia",
            Regime::CiliciaRandomSplit => "cilicia_random_split",
            Regime::CiliciaNoTransfer => "cilicia_no_transfer",
        }
    }

    pub fn is_curriculum(self) -> bool {
        matches!(self, Regime::Cilicia | Regime::CiliciaRandomSplit | Regime::CiliciaNoTransfer)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::config(format!("unknown regime '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub regimes: Vec<Regime>,
    pub seeds: Vec<u64>,
    pub test_fraction: f64,
    pub val_fraction: f64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self { regimes: vec![Regime::Cilicia], seeds: (0..5).collect(), test_fraction: 0.2, val_fraction: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetFiles {
    pub features: PathBuf,
    pub labels: PathBuf,
}

/// Where the samples come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Files(DatasetFiles),
    Synthetic(SynthSpec),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetFiles>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub sgd: SgdConfig,
    #[serde(default)]
    pub transfer: TransferConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("bad config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let (Some(files), Some(dir)) = (cfg.dataset.as_mut(), path.parent()) {
            files.features = dir.join(&files.features);
            files.labels = dir.join(&files.labels);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn source(&self) -> Result<DataSource> {
        match (&self.dataset, &self.synth) {
            (Some(files), None) => Ok(DataSource::Files(files.clone())),
            (None, Some(spec)) => Ok(DataSource::Synthetic(spec.clone())),
            (Some(_), Some(_)) => Err(Error::config("give either [dataset] or [synth], not both")),
            (None, None) => Err(Error::config("no data source: add a [dataset] or [synth] section")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        if e.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if e.regimes.is_empty() {
            return Err(Error::config("at least one regime is required"));
        }
        if !(e.test_fraction > 0.0 && e.test_fraction < 1.0) {
            return Err(Error::config(format!("test fraction {} outside (0, 1)", e.test_fraction)));
        }
        if !(0.0..1.0).contains(&e.val_fraction) {
            return Err(Error::config(format!("validation fraction {} outside [0, 1)", e.val_fraction)));
        }
        if let Some(d) = self.model.dropout {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::config(format!("dropout {d} outside [0, 1)")));
            }
        }
        if self.model.batch_size < 2 || self.model.hidden == 0 {
            return Err(Error::config("batch size must be ≥ 2 and hidden width > 0"));
        }
        self.sgd.validate()?;
        self.transfer.validate()?;
        if let Some(spec) = &self.synth {
            spec.validate()?;
        }
        self.source().map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::StrongHeads;

    #[test]
    fn full_document_parses() {
        let cfg = ExperimentConfig::from_toml(
            r#"
            [experiment]
            regimes = ["individual", "cilicia_no_transfer"]
            seeds = [3]
            [synth]
            n_samples = 100
            n_tasks = 4
            cluster_assignment = [0, 1, 0, 1]
            intra_correlation = [0.8, 0.2]
            latent_dim = 10
            label_noise = 0.0
            feature_noise = 0.05
            seed = 9
            [transfer]
            lambda = 0.5
            strong_heads_phase2 = "frozen"
            "#,
        )
        .unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.experiment.regimes, vec![Regime::Individual, Regime::CiliciaNoTransfer]);
        assert_eq!(cfg.transfer.strong_heads_phase2, StrongHeads::Frozen);
        assert_eq!(cfg.transfer.epochs_phase1, 300);
        assert_eq!(cfg.model.hidden, 512);
        assert!(matches!(cfg.source().unwrap(), DataSource::Synthetic(_)));
        let again = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_missing_source() {
        assert!(ExperimentConfig::from_toml("[model]\nwidth = 3").is_err());
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn regime_names_round_trip() {
        for r in Regime::ALL {
            assert_eq!(r.name().parse::<Regime>().unwrap(), r);
        }
        assert!("joint".parse::<Regime>().is_err());
    }
}
