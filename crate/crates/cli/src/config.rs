//! Run configuration: one TOML file, overridden by command-line flags, echoed
//! as `config.toml` into every output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use nft_ood::gradcheck::GradcheckConfig;
use nft_ood::mining::MiningStat;
use nft_ood::objectives::{KrScope, KrVariant};
use nft_ood::scoring::ScoreMethod;
use nft_ood::trainer::TrainConfig;
use nft_ood::data::SynthConfig;
use nft_ood::TransformMode;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const ECHO_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: TransformMode,
    /// Meta-net width; defaults to the dimension-based rule when absent.
    pub hidden: Option<usize>,
    pub shared_net: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: TransformMode::ScaleShift,
            hidden: None,
            shared_net: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    pub method: ScoreMethod,
    pub tau_score: f64,
    /// Decision threshold: an image is called ID when its score is at least `gamma`.
    pub gamma: f64,
    pub tpr: f64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            method: ScoreMethod::Krnft,
            tau_score: 0.01,
            gamma: 0.5,
            tpr: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningConfig {
    /// Number of negative labels to mine.
    pub m: usize,
    /// `max` or `quantile:<q>`.
    pub stat: String,
    /// Crops kept per side when selecting training samples.
    pub q: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            m: 64,
            stat: "max".into(),
            q: 4,
        }
    }
}

impl MiningConfig {
    pub fn stat(&self) -> Result<MiningStat, CliError> {
        parse_stat(&self.stat)
    }
}

fn parse_stat(s: &str) -> Result<MiningStat, CliError> {
    if s == "max" {
        return Ok(MiningStat::Max);
    }
    let q = s
        .strip_prefix("quantile:")
        .and_then(|q| q.parse::<f64>().ok())
        .ok_or_else(|| CliError::Usage(format!("stat must be `max` or `quantile:<q>`, got `{s}`")))?;
    if !(0.0..=1.0).contains(&q) {
        return Err(CliError::Usage(format!("quantile must lie in [0, 1], got {q}")));
    }
    Ok(MiningStat::Quantile(q))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Dataset directory holding `manifest.jsonl` and the bank files.
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    /// Candidate names, one per line, matching lexicon rows.
    pub names: Option<PathBuf>,
    pub id_bank: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives synthesis, initialization, batching and gradient checks.
    pub seed: u64,
    pub paths: PathsConfig,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub score: ScoreConfig,
    pub mining: MiningConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            paths: PathsConfig::default(),
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            score: ScoreConfig::default(),
            mining: MiningConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

/// Flags shared by every subcommand; each replaces the matching config value.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub tau_loss: Option<f64>,
    #[arg(long, global = true)]
    pub tau_score: Option<f64>,
    #[arg(long, global = true)]
    pub lambda1: Option<f64>,
    #[arg(long, global = true)]
    pub lambda2: Option<f64>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    /// feature, logits or prob.
    #[arg(long, global = true)]
    pub kr_variant: Option<String>,
    /// pos or both.
    #[arg(long, global = true)]
    pub kr_scope: Option<String>,
    /// Scoring method: mcm, neglabel or krnft.
    #[arg(long, global = true)]
    pub method: Option<String>,
    #[arg(long, global = true)]
    pub tpr: Option<f64>,
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
}

fn parse<T: FromStr<Err = nft_ood::Error>>(s: &str) -> Result<T, CliError> {
    s.parse().map_err(|e: nft_ood::Error| CliError::Usage(e.to_string()))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    /// Loads `--config` (or defaults), applies flag overrides and propagates the seed.
    pub fn resolve(o: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match &o.config {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_toml(&text)?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = o.seed {
            cfg.seed = s;
        }
        if let Some(p) = &o.out {
            cfg.paths.out = Some(p.clone());
        }
        if let Some(x) = o.tau_loss {
            cfg.train.tau_loss = x;
            cfg.gradcheck.tau_loss = x;
        }
        if let Some(x) = o.lambda2 {
            cfg.train.lambda2 = x;
            cfg.gradcheck.lambda2 = x;
        }
        if let Some(x) = o.tau_score {
            cfg.score.tau_score = x;
        }
        if let Some(x) = o.lambda1 {
            cfg.train.lambda1 = x;
        }
        if let Some(x) = o.epochs {
            cfg.train.epochs = x;
        }
        if let Some(x) = o.lr {
            cfg.train.lr = x;
        }
        if let Some(x) = o.batch_size {
            cfg.train.batch_size = x;
        }
        if let Some(s) = &o.kr_variant {
            cfg.train.kr_variant = parse::<KrVariant>(s)?;
        }
        if let Some(s) = &o.kr_scope {
            cfg.train.kr_scope = parse::<KrScope>(s)?;
        }
        if let Some(s) = &o.method {
            cfg.score.method = parse::<ScoreMethod>(s)?;
        }
        if let Some(x) = o.tpr {
            cfg.score.tpr = x;
        }
        if let Some(x) = o.gamma {
            cfg.score.gamma = x;
        }
        cfg.synth.seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        cfg.gradcheck.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: nft_ood::Error| CliError::Usage(e.to_string());
        self.synth.validate().map_err(usage)?;
        self.train.validate().map_err(usage)?;
        self.mining.stat()?;
        let s = &self.score;
        if !(s.tau_score > 0.0 && s.tau_score.is_finite()) {
            return Err(CliError::Usage(format!("tau_score must be positive, got {}", s.tau_score)));
        }
        if !(s.tpr > 0.0 && s.tpr <= 1.0) {
            return Err(CliError::Usage(format!("tpr must lie in (0, 1], got {}", s.tpr)));
        }
        if !s.gamma.is_finite() {
            return Err(CliError::Usage("gamma must be finite".into()));
        }
        if self.model.hidden == Some(0) {
            return Err(CliError::Usage("model.hidden must be at least 1".into()));
        }
        Ok(())
    }

    pub fn out_dir(&self) -> Result<&Path, CliError> {
        self.paths
            .out
            .as_deref()
            .ok_or_else(|| CliError::Usage("--out is required".into()))
    }

    pub fn data_dir(&self) -> Result<&Path, CliError> {
        self.paths
            .data
            .as_deref()
            .ok_or_else(|| CliError::Usage("--data is required".into()))
    }

    /// Creates `dir` and writes the resolved configuration into it.
    pub fn echo(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir).map_err(nft_ood::Error::from)?;
        fs::write(dir.join(ECHO_FILE), self.to_toml()?).map_err(nft_ood::Error::from)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn seed_reaches_every_section() {
        let o = Overrides {
            seed: Some(11),
            lambda2: Some(3.0),
            ..Default::default()
        };
        let cfg = RunConfig::resolve(&o).unwrap();
        assert_eq!((cfg.synth.seed, cfg.train.seed, cfg.gradcheck.seed), (11, 11, 11));
        assert_eq!((cfg.train.lambda2, cfg.gradcheck.lambda2), (3.0, 3.0));
    }

    #[test]
    fn bad_values_are_usage_errors() {
        for o in [
            Overrides { kr_variant: Some("bogus".into()), ..Default::default() },
            Overrides { tau_score: Some(0.0), ..Default::default() },
            Overrides { lr: Some(-1.0), ..Default::default() },
            Overrides { tpr: Some(1.5), ..Default::default() },
        ] {
            assert!(matches!(RunConfig::resolve(&o), Err(CliError::Usage(_))));
        }
        assert!(matches!(RunConfig::from_toml("unknown = 1"), Err(CliError::Usage(_))));
    }

    #[test]
    fn stat_strings() {
        assert_eq!(parse_stat("max").unwrap(), MiningStat::Max);
        assert_eq!(parse_stat("quantile:0.9").unwrap(), MiningStat::Quantile(0.9));
        assert!(parse_stat("quantile:2").is_err());
        assert!(parse_stat("mean").is_err());
    }
}
