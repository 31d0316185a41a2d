//! Run configuration: one TOML file with a section per stage. Every field has
//! a default, so an empty file is a complete config.

use std::path::{Path, PathBuf};

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discriminator::{ModelConfig, TrainConfig};
use crate::envgen::EnvSpec;
use crate::instruction_parser::{InstructionParser, LanguageAssets, DEFAULT_WINDOW};
use crate::metrics::DEFAULT_SUCCESS_RADIUS;
use crate::path_proposer::ProposerLimits;

/// Overrides `paths.root` when set.
pub const DATA_ENV: &str = "IPPD_DATA";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Data root; the other entries are relative to it unless absolute.
    pub root: PathBuf,
    pub maps: PathBuf,
    pub episodes: PathBuf,
    pub checkpoint: PathBuf,
    pub output: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            maps: PathBuf::from("maps"),
            episodes: PathBuf::from("episodes"),
            checkpoint: PathBuf::from("model.ckpt"),
            output: PathBuf::from("reports"),
        }
    }
}

impl PathsConfig {
    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn maps_dir(&self) -> PathBuf {
        self.resolve(&self.maps)
    }

    pub fn episodes_dir(&self) -> PathBuf {
        self.resolve(&self.episodes)
    }

    pub fn checkpoint_file(&self) -> PathBuf {
        self.resolve(&self.checkpoint)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.output)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    pub train_maps: usize,
    /// Train maps reused, with fresh instructions, for the seen split.
    pub seen_maps: usize,
    pub unseen_maps: usize,
    pub train_episodes: usize,
    pub seen_episodes: usize,
    pub unseen_episodes: usize,
    pub grid_rooms: (u32, u32),
    pub room_size: (f64, f64),
    pub objects_per_room: (u32, u32),
    /// Categories drawn per map.
    pub category_pool: usize,
    pub resolution: f64,
    /// Word instructions with synonyms and hyponyms.
    pub paraphrase: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_maps: 20,
            seen_maps: 4,
            unseen_maps: 4,
            train_episodes: 500,
            seen_episodes: 100,
            unseen_episodes: 100,
            grid_rooms: (2, 3),
            room_size: (3.0, 5.0),
            objects_per_room: (2, 5),
            category_pool: 6,
            resolution: crate::semantic_map::DEFAULT_RESOLUTION,
            paraphrase: false,
        }
    }
}

impl GenConfig {
    /// Spec of the map with the given seed.
    pub fn env_spec(&self, map_seed: u64) -> EnvSpec {
        let mut spec = EnvSpec::with_random_pool(map_seed, self.category_pool);
        spec.grid_rooms = self.grid_rooms;
        spec.room_size_range = self.room_size;
        spec.objects_per_room_range = self.objects_per_room;
        spec.resolution = self.resolution;
        spec
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParserConfig {
    /// Similarity threshold, compared strictly; converted to an exact ratio.
    pub gamma: f64,
    /// Context window on each side for sense disambiguation.
    pub window: usize,
}

impl Default for ParserConfig {
    fn default() -> Self {
        Self { gamma: 0.85, window: DEFAULT_WINDOW }
    }
}

impl ParserConfig {
    pub fn gamma_ratio(&self) -> Result<Ratio<u32>, ConfigError> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(ConfigError::Invalid(format!("parser.gamma {} outside [0, 1]", self.gamma)));
        }
        let scaled = (self.gamma * 10_000.0).round() as u32;
        Ok(Ratio::new(scaled, 10_000))
    }

    pub fn build(&self, assets: std::sync::Arc<LanguageAssets>) -> Result<InstructionParser, ConfigError> {
        let g = self.gamma_ratio()?;
        Ok(InstructionParser::new(assets).with_gamma(*g.numer(), *g.denom()).with_window(self.window))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub d_th: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { d_th: DEFAULT_SUCCESS_RADIUS }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Agent {
    Ippd,
    ProposalOnlyUniform,
    RandomPath,
}

impl Agent {
    pub const ALL: [Agent; 3] = [Agent::Ippd, Agent::ProposalOnlyUniform, Agent::RandomPath];

    pub fn name(self) -> &'static str {
        match self {
            Agent::Ippd => "ippd",
            Agent::ProposalOnlyUniform => "proposal-only-uniform",
            Agent::RandomPath => "random-path",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub agent: Agent,
    pub workers: usize,
    /// Single worker and fixed merge order.
    pub deterministic: bool,
    /// Seed of the random agents and fallbacks.
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { agent: Agent::Ippd, workers: 1, deterministic: false, seed: 0 }
    }
}

impl RunSection {
    pub fn effective_workers(&self) -> usize {
        if self.deterministic {
            1
        } else {
            self.workers.max(1)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub gen: GenConfig,
    pub parser: ParserConfig,
    pub proposer: ProposerLimits,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub metrics: MetricsConfig,
    pub run: RunSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, then applies the data-root environment override.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.apply_env();
        Ok(cfg)
    }

    pub fn apply_env(&mut self) {
        if let Some(root) = std::env::var_os(DATA_ENV).filter(|v| !v.is_empty()) {
            self.paths.root = PathBuf::from(root);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.parser.gamma_ratio()?;
        if !(self.metrics.d_th > 0.0) {
            return bad(format!("metrics.d_th {} must be positive", self.metrics.d_th));
        }
        let g = &self.gen;
        if g.seen_maps > g.train_maps {
            return bad(format!("gen.seen_maps {} exceeds gen.train_maps {}", g.seen_maps, g.train_maps));
        }
        if (g.train_episodes > 0 && g.train_maps == 0)
            || (g.seen_episodes > 0 && g.seen_maps == 0)
            || (g.unseen_episodes > 0 && g.unseen_maps == 0)
        {
            return bad("a split with episodes needs at least one map".into());
        }
        g.env_spec(0).validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.proposer.eps > 0.0 && self.proposer.segment_bound > 0.0 && self.proposer.max_candidates > 0) {
            return bad("proposer eps, segment bound and candidate cap must be positive".into());
        }
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.parser.gamma_ratio().unwrap(), Ratio::new(85, 100));
        assert_eq!((cfg.gen.train_maps, cfg.gen.seen_maps, cfg.gen.unseen_maps), (20, 4, 4));
        assert_eq!(cfg.proposer.segment_bound, 5.0);
        assert_eq!(cfg.train.lr, 1e-4);
        assert_eq!(cfg.train.mask_rate, 0.15);
        assert_eq!(cfg.model.encoder.compass_radius, 3.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[parser]\ngama = 0.9\n").is_err());
        assert!(RunConfig::from_toml("[nonsense]\n").is_err());
        assert!(RunConfig::from_toml("[model.encoder]\nradius = 2.0\n").is_err());
    }

    #[test]
    fn sections_override_defaults() {
        let cfg = RunConfig::from_toml("[train]\nepochs = 3\n[run]\nagent = \"random-path\"\n[proposer]\neps = 0.75\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.run.agent, Agent::RandomPath);
        assert_eq!(cfg.proposer.eps, 0.75);
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.gen.seed = 9;
        cfg.run.deterministic = true;
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml("[parser]\ngamma = 1.5\n").is_err());
        assert!(RunConfig::from_toml("[gen]\nseen_maps = 30\n").is_err());
        assert!(RunConfig::from_toml("[model]\nheads = 7\n").is_err());
        assert!(RunConfig::from_toml("[metrics]\nd_th = 0.0\n").is_err());
    }

    #[test]
    fn agents_parse_by_name() {
        for a in Agent::ALL {
            assert_eq!(Agent::parse(a.name()), Some(a));
        }
        assert_eq!(Agent::parse("oracle"), None);
    }
}
