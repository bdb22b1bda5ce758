//! The TOML run configuration.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use trcdag::actor::SdgatConfig;
use trcdag::critic::CriticConfig;
use trcdag::datagen::GenConfig;
use trcdag::pipeline::{ProcedureConfig, TrainingSetup};
use trcdag::rlopt::TrcConfig;
use trcdag::scoring::ScoreConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathConfig {
    pub data: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub epsilons: Vec<f64>,
    /// Trust-region thresholds.
    pub deltas: Vec<f64>,
    /// Runs per cell; cell runs use seeds `seed, seed + 1, …`.
    pub seeds: u64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            epsilons: vec![0.1, 0.2],
            deltas: vec![0.02, 0.035, 0.05, 0.065, 0.08],
            seeds: 3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, overrides the generator, scorer and procedure seeds.
    pub seed: Option<u64>,
    /// Z-score every variable after loading.
    pub standardize: bool,
    pub paths: PathConfig,
    pub generate: GenConfig,
    pub score: ScoreConfig,
    pub encoder: SdgatConfig,
    pub critic: CriticConfig,
    pub trc: TrcConfig,
    pub procedure: ProcedureConfig,
    pub grid: GridConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text)?;
        cfg.apply_seed();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.apply_seed();
    }

    fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            self.generate.seed = s;
            self.score.seed = s;
            self.procedure.seed = s;
        }
    }

    pub fn setup(&self) -> TrainingSetup {
        TrainingSetup {
            score: self.score.clone(),
            encoder: self.encoder.clone(),
            critic: self.critic.clone(),
            trc: self.trc.clone(),
            procedure: self.procedure.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generate.validate()?;
        self.score.validate()?;
        self.encoder.validate()?;
        self.critic.validate()?;
        self.trc.validate()?;
        self.procedure.validate()?;
        anyhow::ensure!(
            !self.grid.epsilons.is_empty() && !self.grid.deltas.is_empty() && self.grid.seeds > 0,
            "the grid needs at least one epsilon, one delta and one seed"
        );
        Ok(())
    }
}
