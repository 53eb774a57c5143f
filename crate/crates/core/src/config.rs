//! Run configuration: defaults, TOML overrides, and the ablation switches.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autoencoder::AeConfig;
use crate::data::SynthConfig;
use crate::error::PipelineError;
use crate::loss::LossWeights;
use crate::optim::AdamConfig;
use crate::scoring::PsnrPeak;
use crate::som::SomParams;

pub const CONFIG_ENV_VAR: &str = "PROTOVAD_CONFIG";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SomSettings {
    pub enabled: bool,
    pub neurons: usize,
    pub delta0: f64,
    pub eta0: f64,
    pub iters_per_map: usize,
}

impl Default for SomSettings {
    fn default() -> Self {
        let p = SomParams::default();
        Self {
            enabled: true,
            neurons: p.neurons,
            delta0: p.delta0,
            eta0: p.eta0,
            iters_per_map: p.iters_per_map,
        }
    }
}

impl SomSettings {
    pub fn params(&self) -> SomParams {
        SomParams {
            neurons: self.neurons,
            delta0: self.delta0,
            eta0: self.eta0,
            iters_per_map: self.iters_per_map,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtoSettings {
    pub alpha: f64,
    pub proj_noise: f64,
}

impl Default for ProtoSettings {
    fn default() -> Self {
        Self { alpha: 10.0, proj_noise: 0.01 }
    }
}

/// Everything a training run needs; every field has a default and every
/// field can be overridden from a TOML config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub seed: u64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub psnr_peak: PsnrPeak,
    pub ae: AeConfig,
    pub som: SomSettings,
    pub proto: ProtoSettings,
    pub adam: AdamConfig,
    pub loss: LossWeights,
    pub data: SynthConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            stage1_epochs: 10,
            stage2_epochs: 40,
            batch_size: 8,
            lr0: 2e-4,
            psnr_peak: PsnrPeak::default(),
            ae: AeConfig::default(),
            som: SomSettings::default(),
            proto: ProtoSettings::default(),
            adam: AdamConfig::default(),
            loss: LossWeights::default(),
            data: SynthConfig::default(),
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.stage1_epochs == 0 || self.stage2_epochs == 0 {
            return Err(PipelineError::config("epoch counts must be positive"));
        }
        if self.batch_size == 0 {
            return Err(PipelineError::config("batch size must be positive"));
        }
        if self.lr0 <= 0.0 {
            return Err(PipelineError::config("learning rate must be positive"));
        }
        self.ae.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: Config = toml::from_str(text)
            .map_err(|e| PipelineError::config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Loads the config from `--config` if given, else from the
    /// `PROTOVAD_CONFIG` env var if set, else defaults.
    pub fn resolve(flag: Option<&Path>) -> Result<Self, PipelineError> {
        let path: Option<PathBuf> = match flag {
            Some(p) => Some(p.to_path_buf()),
            None => std::env::var_os(CONFIG_ENV_VAR).map(PathBuf::from),
        };
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text =
                    std::fs::read_to_string(&p).map_err(|e| PipelineError::io(&p, e))?;
                Self::from_toml(&text)
            }
        }
    }
}

/// Model-variant switches, all reachable from the CLI with no code edits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    /// Full model.
    None,
    /// Skip the clusterer: fixed prototype count (10), random centers.
    NoAc,
    /// Plain autoencoder, no prototype stage.
    NoDlan,
    /// Keep every cluster as a prototype (M = L).
    NoDrcs,
    /// Keep the clusterer's M but draw random centers.
    RandInit,
    /// Fixed prototype count with random centers.
    FixedM(usize),
}

impl Ablation {
    pub fn as_string(&self) -> String {
        match self {
            Ablation::None => "none".into(),
            Ablation::NoAc => "no-ac".into(),
            Ablation::NoDlan => "no-dlan".into(),
            Ablation::NoDrcs => "no-drcs".into(),
            Ablation::RandInit => "rand-init".into(),
            Ablation::FixedM(n) => format!("fixed-m={n}"),
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Ablation::None),
            "no-ac" => Ok(Ablation::NoAc),
            "no-dlan" => Ok(Ablation::NoDlan),
            "no-drcs" => Ok(Ablation::NoDrcs),
            "rand-init" => Ok(Ablation::RandInit),
            other => {
                if let Some(n) = other.strip_prefix("fixed-m=") {
                    let n: usize = n.parse().map_err(|_| {
                        PipelineError::config(format!("bad fixed-m value in {other}"))
                    })?;
                    if n == 0 {
                        return Err(PipelineError::config("fixed-m must be positive"));
                    }
                    Ok(Ablation::FixedM(n))
                } else {
                    Err(PipelineError::config(format!(
                        "unknown ablation {other}; expected none|no-ac|no-dlan|no-drcs|rand-init|fixed-m=N"
                    )))
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        Config::default().validate().unwrap();
    }

    #[test]
    fn toml_overrides_any_field() {
        let cfg = Config::from_toml(
            "seed = 7\nstage2_epochs = 3\n[ae]\nframe_size = 32\ndepth = 2\n[loss]\nmargin = 0.5\n[som]\niters_per_map = 100\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.stage2_epochs, 3);
        assert_eq!(cfg.ae.frame_size, 32);
        assert_eq!(cfg.loss.margin, 0.5);
        assert_eq!(cfg.som.iters_per_map, 100);
        // untouched fields keep defaults
        assert_eq!(cfg.batch_size, 8);
        assert_eq!(cfg.lr0, 2e-4);
    }

    #[test]
    fn config_roundtrips_through_toml() {
        let cfg = Config::default();
        let text = cfg.to_toml();
        let back = Config::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn ablation_parsing() {
        assert_eq!("none".parse::<Ablation>().unwrap(), Ablation::None);
        assert_eq!("no-drcs".parse::<Ablation>().unwrap(), Ablation::NoDrcs);
        assert_eq!("fixed-m=10".parse::<Ablation>().unwrap(), Ablation::FixedM(10));
        assert!("fixed-m=0".parse::<Ablation>().is_err());
        assert!("nope".parse::<Ablation>().is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(Config::from_toml("batch_size = 0").is_err());
        assert!(Config::from_toml("stage1_epochs = 0").is_err());
        assert!(Config::from_toml("[ae]\nframe_size = 60").is_err());
    }
}
