//! Run configuration, read from TOML (or JSON by file extension).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dam::budget;
use crate::data::PlantedOptions;
use crate::error::{Error, Result};
use crate::models::ModularShape;
use crate::theory::TheoryConfig;

use super::optim::OptimizerKind;

/// Environment variable overriding the configured seed.
pub const SEED_ENV: &str = "DIFFORA_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    #[default]
    Modular,
    Theory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sharing {
    Off,
    #[default]
    On,
    /// Decide from the relaxed weights (see [`crate::dam::auto_sharing`]).
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    /// Teacher network with `planted_k` modules per layer carrying an increment.
    Planted {
        planted_k: usize,
        #[serde(flatten)]
        options: PlantedOptions,
    },
    /// Unit-sphere inputs with bounded labels.
    Sphere { n: usize, c_label: f64 },
    Csv {
        path: PathBuf,
        #[serde(default = "default_label")]
        label: String,
        #[serde(default)]
        normalize: bool,
    },
}

fn default_label() -> String {
    "y".into()
}

/// Hidden layer of the theory architecture inside the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoryModel {
    pub d: usize,
    pub m: usize,
    /// Number of contiguous unit blocks, i.e. DAM columns.
    pub groups: usize,
    pub w0_scale: f64,
}

impl Default for TheoryModel {
    fn default() -> Self {
        Self {
            d: 8,
            m: 256,
            groups: 6,
            w0_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub architecture: Architecture,
    /// Step size for adapter parameters.
    pub eta: f64,
    /// Step size for the DAM logits; defaults to `eta`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_dam: Option<f64>,
    /// Step size for stage-2 fine-tuning; defaults to `eta`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_finetune: Option<f64>,
    /// Outer (logits) updates in stage 1.
    pub v_outer: usize,
    /// Parameter updates after each outer update.
    pub t_inner: usize,
    /// Parameter updates in stage 2.
    pub t_finetune: usize,
    pub rho: f64,
    pub r_l: usize,
    pub r_s: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub dropout_p: f64,
    #[serde(default)]
    pub sharing: Sharing,
    /// Keep stage-1 adapters of selected modules instead of re-initializing.
    #[serde(default)]
    pub warm_start: bool,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    /// Fraction of examples used for training; the rest validate.
    #[serde(default = "default_split")]
    pub split_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModularShape>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theory_model: Option<TheoryModel>,
    pub data: DataSource,
    /// Settings for `verify-theory`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theory: Option<TheoryConfig>,
}

fn default_alpha() -> f64 {
    16.0
}

fn default_split() -> f64 {
    0.5
}

impl RunConfig {
    /// Small planted-task configuration used by tests and as a template.
    pub fn planted_default(seed: u64) -> Self {
        Self {
            seed,
            architecture: Architecture::Modular,
            eta: 0.01,
            eta_dam: Some(5.0),
            eta_finetune: Some(5e-4),
            v_outer: 10,
            t_inner: 10,
            t_finetune: 100,
            rho: 0.5,
            r_l: 2,
            r_s: 1,
            alpha: 16.0,
            dropout_p: 0.0,
            sharing: Sharing::On,
            warm_start: false,
            optimizer: OptimizerKind::Gd,
            split_fraction: 0.5,
            model: Some(ModularShape {
                layers: 4,
                dim: 8,
                seq_len: 4,
            }),
            theory_model: None,
            data: DataSource::Planted {
                planted_k: 3,
                options: PlantedOptions::default(),
            },
            theory: None,
        }
    }

    pub fn eta_dam(&self) -> f64 {
        self.eta_dam.unwrap_or(self.eta)
    }

    pub fn eta_finetune(&self) -> f64 {
        self.eta_finetune.unwrap_or(self.eta)
    }

    /// Total parameter updates across both stages.
    pub fn total_steps(&self) -> usize {
        self.v_outer * self.t_inner + self.t_finetune
    }

    /// DAM shape `(L, N)`.
    pub fn dam_shape(&self) -> Result<(usize, usize)> {
        match self.architecture {
            Architecture::Modular => Ok((self.shape()?.layers, crate::adapters::Family::COUNT)),
            Architecture::Theory => Ok((1, self.theory_model()?.groups)),
        }
    }

    pub fn shape(&self) -> Result<ModularShape> {
        self.model
            .ok_or_else(|| Error::Config("modular architecture needs a [model] section".into()))
    }

    pub fn theory_model(&self) -> Result<TheoryModel> {
        Ok(self.theory_model.unwrap_or_default())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("eta", self.eta)?;
        positive("eta_dam", self.eta_dam())?;
        positive("eta_finetune", self.eta_finetune())?;
        positive("alpha", self.alpha)?;
        if self.v_outer == 0 {
            return Err(Error::Config("v_outer must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} must lie in [0, 1)", self.dropout_p)));
        }
        if self.r_l == 0 || self.r_s == 0 {
            return Err(Error::Config("adapter ranks must be at least 1".into()));
        }
        let (_, n) = self.dam_shape()?;
        budget(self.rho, n)?;
        match self.architecture {
            Architecture::Modular => {
                let shape = self.shape()?;
                shape.validate()?;
                for r in [self.r_l, self.r_s] {
                    if r > shape.dim {
                        return Err(Error::Rank { rank: r, max: shape.dim });
                    }
                }
                if let DataSource::Sphere { .. } = self.data {
                    return Err(Error::Config("sphere data only feeds the theory architecture".into()));
                }
                if let DataSource::Planted { planted_k, .. } = self.data {
                    if planted_k == 0 || planted_k > n {
                        return Err(Error::Config(format!("planted_k {planted_k} outside 1..={n}")));
                    }
                }
            }
            Architecture::Theory => {
                let tm = self.theory_model()?;
                if tm.d < 2 || tm.groups == 0 || tm.groups > tm.m {
                    return Err(Error::Config(format!(
                        "theory model needs d >= 2 and 1 <= groups <= m (got d={}, m={}, groups={})",
                        tm.d, tm.m, tm.groups
                    )));
                }
                if self.sharing == Sharing::On {
                    return Err(Error::Config("weight sharing is not defined for the theory architecture".into()));
                }
                if self.dropout_p != 0.0 {
                    return Err(Error::Config("dropout is not defined for the theory architecture".into()));
                }
                if let DataSource::Planted { .. } = self.data {
                    return Err(Error::Config("planted data needs the modular architecture".into()));
                }
            }
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::Config(format!("split_fraction {} must lie in (0, 1)", self.split_fraction)));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file (`.json` parsed as JSON, anything else as TOML) and
    /// applies the seed override from the environment.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut cfg = if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&text)?
        } else {
            Self::from_toml_str(&text)?
        };
        if let Ok(seed) = std::env::var(SEED_ENV) {
            cfg.seed = seed
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={seed:?} is not an unsigned integer")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical TOML text: fixed field order, so equal configs give equal bytes.
    pub fn to_canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_validates_and_round_trips() {
        let cfg = RunConfig::planted_default(3);
        cfg.validate().unwrap();
        let text = cfg.to_canonical();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_canonical(), text);
        assert_eq!(cfg.total_steps(), 200);
    }

    #[test]
    fn json_matches_toml() {
        let cfg = RunConfig::planted_default(4);
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json_str(&json).unwrap(), cfg);
    }

    #[test]
    fn rejects_empty_budget_and_bad_values() {
        let mut cfg = RunConfig::planted_default(0);
        cfg.rho = 0.1;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = RunConfig::planted_default(0);
        cfg.eta = 0.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = RunConfig::planted_default(0);
        cfg.r_l = 9;
        assert!(matches!(cfg.validate(), Err(Error::Rank { .. })));
    }

    #[test]
    fn theory_architecture_rejects_sharing() {
        let mut cfg = RunConfig::planted_default(0);
        cfg.architecture = Architecture::Theory;
        cfg.data = DataSource::Sphere { n: 20, c_label: 1.0 };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.sharing = Sharing::Off;
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = "bogus = 1\n".to_string() + &RunConfig::planted_default(0).to_canonical();
        assert!(RunConfig::from_toml_str(&text).is_err());
    }
}
