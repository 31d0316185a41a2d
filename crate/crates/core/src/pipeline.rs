//! End-to-end stages behind the command-line tool: generate, train, run and
//! report. Every stage is a pure function of the config and the files it reads.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::config::{Agent, ConfigError, RunConfig};
use crate::discriminator::{self, target_score, EpochLog, ModelError, TrainCandidate, TrainEpisode, TrainError};
use crate::envgen::{generate_episode_with, generate_map, read_episodes, write_episodes, EnvError, Episode, VerbalizeOptions};
use crate::instruction_parser::{InstructionParser, LanguageAssets};
use crate::metrics::{compare, evaluate, EvalCase, EvalReport, MetricsError};
use crate::path_encoder::{prepare_path, EncoderError, PathInput, Vocab};
use crate::path_proposer::{fallback_random, propose, random_baseline, CandidatePath, PlanningContext, ProposerError};
use crate::semantic_map::{load_map, save_map, MapError, SemanticVoxelMap};
use crate::Model;

/// Attempts per episode slot before generation gives up.
const EPISODE_ATTEMPTS: u64 = 16;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Proposer(#[from] ProposerError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("worker pool: {0}")]
    Pool(String),
}

impl PipelineError {
    pub fn is_config(&self) -> bool {
        matches!(self, PipelineError::Config(_))
            || matches!(self, PipelineError::Train(TrainError::Config(_)) | PipelineError::Model(ModelError::Config(_)))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    EvalSeen,
    EvalUnseen,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::EvalSeen, Split::EvalUnseen];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::EvalSeen => "eval_seen",
            Split::EvalUnseen => "eval_unseen",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::EvalSeen => 2,
            Split::EvalUnseen => 3,
        }
    }
}

/// SplitMix64 finalizer; decorrelates seeds that differ in one field.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ p))
}

/// Seed that depends only on `base` and the episode id.
pub fn episode_seed(base: u64, id: &str) -> u64 {
    let h = id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3));
    derive_seed(base, &[h])
}

pub fn train_map_id(i: usize) -> String {
    format!("train-{i:03}")
}

pub fn unseen_map_id(i: usize) -> String {
    format!("unseen-{i:03}")
}

/// `(id, seed)` of every map in generation order.
pub fn map_plan(cfg: &RunConfig) -> Vec<(String, u64)> {
    let g = &cfg.gen;
    let train = (0..g.train_maps).map(|i| (train_map_id(i), derive_seed(g.seed, &[10, i as u64])));
    let unseen = (0..g.unseen_maps).map(|i| (unseen_map_id(i), derive_seed(g.seed, &[11, i as u64])));
    train.chain(unseen).collect()
}

/// Map ids episodes of `split` are drawn from, in round-robin order.
pub fn split_maps(cfg: &RunConfig, split: Split) -> Vec<String> {
    let g = &cfg.gen;
    match split {
        Split::Train => (0..g.train_maps).map(train_map_id).collect(),
        Split::EvalSeen => (0..g.seen_maps).map(train_map_id).collect(),
        Split::EvalUnseen => (0..g.unseen_maps).map(unseen_map_id).collect(),
    }
}

fn split_size(cfg: &RunConfig, split: Split) -> usize {
    match split {
        Split::Train => cfg.gen.train_episodes,
        Split::EvalSeen => cfg.gen.seen_episodes,
        Split::EvalUnseen => cfg.gen.unseen_episodes,
    }
}

pub fn map_file(cfg: &RunConfig, id: &str) -> PathBuf {
    cfg.paths.maps_dir().join(format!("{id}.map"))
}

pub fn episodes_file(cfg: &RunConfig, split: Split) -> PathBuf {
    cfg.paths.episodes_dir().join(format!("{}.jsonl", split.name()))
}

fn pool(cfg: &RunConfig) -> Result<rayon::ThreadPool, PipelineError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.run.effective_workers())
        .build()
        .map_err(|e| PipelineError::Pool(e.to_string()))
}

/// Writes every map file; returns the ids in generation order.
pub fn cmd_gen_maps(cfg: &RunConfig) -> Result<Vec<String>, PipelineError> {
    let dir = cfg.paths.maps_dir();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let plan = map_plan(cfg);
    let maps = pool(cfg)?.install(|| {
        plan.par_iter().map(|(_, seed)| generate_map(&cfg.gen.env_spec(*seed))).collect::<Result<Vec<_>, _>>()
    })?;
    for ((id, _), map) in plan.iter().zip(&maps) {
        save_map(map, map_file(cfg, id))?;
    }
    Ok(plan.into_iter().map(|(id, _)| id).collect())
}

pub fn load_maps(cfg: &RunConfig, ids: &[String]) -> Result<BTreeMap<String, SemanticVoxelMap>, PipelineError> {
    let mut out = BTreeMap::new();
    for id in ids {
        if !out.contains_key(id) {
            let path = map_file(cfg, id);
            if !path.exists() {
                return Err(PipelineError::Data(format!("map {} not found; run gen-maps first", path.display())));
            }
            out.insert(id.clone(), load_map(&path)?);
        }
    }
    Ok(out)
}

/// Episodes of one split, generated on maps already on disk.
pub fn generate_split(cfg: &RunConfig, split: Split, maps: &BTreeMap<String, SemanticVoxelMap>) -> Result<Vec<Episode>, PipelineError> {
    let ids = split_maps(cfg, split);
    let options = VerbalizeOptions { paraphrase: cfg.gen.paraphrase, ..Default::default() };
    let n = split_size(cfg, split);
    pool(cfg)?.install(|| {
        (0..n)
            .into_par_iter()
            .map(|j| {
                let map_id = &ids[j % ids.len()];
                let map = &maps[map_id];
                let mut last = None;
                for attempt in 0..EPISODE_ATTEMPTS {
                    let seed = derive_seed(cfg.gen.seed, &[split.stream(), j as u64, attempt]);
                    match generate_episode_with(map, map_id, seed, &options) {
                        Ok(mut e) => {
                            e.id = format!("{}-{j:04}", split.name());
                            return Ok(e);
                        }
                        Err(e) => last = Some(e),
                    }
                }
                Err(PipelineError::from(last.expect("at least one attempt")))
            })
            .collect()
    })
}

/// Writes the three episode files; returns their sizes.
pub fn cmd_gen_episodes(cfg: &RunConfig) -> Result<Vec<(Split, usize)>, PipelineError> {
    let ids: Vec<String> = Split::ALL.iter().flat_map(|&s| split_maps(cfg, s)).collect();
    let maps = load_maps(cfg, &ids)?;
    let dir = cfg.paths.episodes_dir();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut sizes = Vec::new();
    for split in Split::ALL {
        let episodes = generate_split(cfg, split, &maps)?;
        write_episodes(episodes_file(cfg, split), &episodes)?;
        sizes.push((split, episodes.len()));
    }
    Ok(sizes)
}

pub fn cmd_gen(cfg: &RunConfig) -> Result<Vec<(Split, usize)>, PipelineError> {
    cmd_gen_maps(cfg)?;
    cmd_gen_episodes(cfg)
}

pub fn load_split(cfg: &RunConfig, split: Split) -> Result<Vec<Episode>, PipelineError> {
    let path = episodes_file(cfg, split);
    if !path.exists() {
        return Err(PipelineError::Data(format!("episodes {} not found; run gen-episodes first", path.display())));
    }
    Ok(read_episodes(path)?)
}

/// Finds an episode by id across the splits, or reads the first one from a
/// JSONL file when `key` names a file.
pub fn find_episode(cfg: &RunConfig, key: &str) -> Result<Episode, PipelineError> {
    let as_path = Path::new(key);
    if as_path.is_file() {
        return read_episodes(as_path)?.into_iter().next().ok_or_else(|| PipelineError::Data(format!("{key} holds no episodes")));
    }
    for split in Split::ALL {
        let path = episodes_file(cfg, split);
        if path.exists() {
            if let Some(e) = read_episodes(path)?.into_iter().find(|e| e.id == key) {
                return Ok(e);
            }
        }
    }
    Err(PipelineError::Data(format!("episode {key} not found")))
}

/// Parser, vocabulary and planning contexts shared across episodes.
pub struct Workspace {
    pub cfg: RunConfig,
    pub parser: InstructionParser,
    pub vocab: Arc<Vocab>,
    pub maps: BTreeMap<String, SemanticVoxelMap>,
    contexts: BTreeMap<String, PlanningContext>,
}

/// Candidate set for one episode; `fallback` marks the random fallback set.
#[derive(Debug, Clone)]
pub struct Proposal {
    pub candidates: Vec<CandidatePath>,
    pub fallback: bool,
}

impl Workspace {
    pub fn new(cfg: &RunConfig, maps: BTreeMap<String, SemanticVoxelMap>) -> Result<Self, PipelineError> {
        let assets = LanguageAssets::bundled();
        let parser = cfg.parser.build(assets)?;
        let contexts = maps.iter().map(|(id, m)| (id.clone(), PlanningContext::new(m, cfg.proposer.clone()))).collect();
        Ok(Self { cfg: cfg.clone(), parser, vocab: Vocab::bundled(), maps, contexts })
    }

    /// Workspace over every map the episodes refer to.
    pub fn for_episodes(cfg: &RunConfig, episodes: &[Episode]) -> Result<Self, PipelineError> {
        let ids: Vec<String> = episodes.iter().map(|e| e.map_id.clone()).collect();
        Self::new(cfg, load_maps(cfg, &ids)?)
    }

    pub fn map(&self, e: &Episode) -> &SemanticVoxelMap {
        &self.maps[&e.map_id]
    }

    pub fn context(&self, e: &Episode) -> &PlanningContext {
        &self.contexts[&e.map_id]
    }

    /// Parse, then propose; an empty proposal set falls back to random endpoints.
    pub fn propose(&self, e: &Episode) -> Result<Proposal, PipelineError> {
        let ctx = self.context(e);
        let components = self.parser.extract_key_components(&e.instruction);
        let candidates = propose(ctx, &components, &e.start_pose)?;
        if !candidates.is_empty() {
            return Ok(Proposal { candidates, fallback: false });
        }
        let seed = episode_seed(self.cfg.run.seed, &e.id);
        Ok(Proposal { candidates: fallback_random(ctx, &e.start_pose, seed)?, fallback: true })
    }

    pub fn prepare(&self, e: &Episode, waypoints: &[[f64; 2]]) -> Result<PathInput, PipelineError> {
        Ok(prepare_path(self.map(e), &self.vocab, waypoints, &self.cfg.model.encoder)?)
    }

    pub fn tokens(&self, e: &Episode) -> Vec<u32> {
        self.vocab.encode(&e.instruction)
    }

    /// Training record: every candidate with its regression target.
    pub fn training_episode(&self, e: &Episode) -> Result<TrainEpisode, PipelineError> {
        let proposal = self.propose(e)?;
        let (lambda, d_th) = (self.cfg.train.lambda, self.cfg.metrics.d_th);
        let candidates = proposal
            .candidates
            .iter()
            .map(|c| {
                Ok(TrainCandidate {
                    path: self.prepare(e, &c.waypoints)?,
                    target: target_score(&c.waypoints, &e.gt_path, e.goal_xy(), lambda, d_th)?,
                })
            })
            .collect::<Result<Vec<_>, PipelineError>>()?;
        Ok(TrainEpisode { tokens: self.tokens(e), candidates })
    }

    /// Predicted path and fallback flag for one episode.
    pub fn predict(&self, e: &Episode, agent: Agent, model: Option<&Model>) -> Result<(Vec<[f64; 2]>, bool), PipelineError> {
        let seed = episode_seed(self.cfg.run.seed, &e.id);
        match agent {
            Agent::RandomPath => Ok((random_baseline(&self.context(e).grid, &e.start_pose, seed)?.waypoints, false)),
            Agent::ProposalOnlyUniform => {
                let p = self.propose(e)?;
                let pick = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[7])).random_range(0..p.candidates.len());
                Ok((p.candidates[pick].waypoints.clone(), p.fallback))
            }
            Agent::Ippd => {
                let model = model.ok_or_else(|| PipelineError::Data("the ippd agent needs a checkpoint".into()))?;
                let p = self.propose(e)?;
                let inputs = p.candidates.iter().map(|c| self.prepare(e, &c.waypoints)).collect::<Result<Vec<_>, _>>()?;
                let mut tokens = self.tokens(e);
                let keypoints = inputs.iter().map(PathInput::len).max().unwrap_or(0);
                tokens.truncate(model.max_tokens(keypoints));
                let ranking = model.rank(&tokens, &inputs)?;
                Ok((p.candidates[ranking.best].waypoints.clone(), p.fallback))
            }
        }
    }
}

pub fn build_training_set(cfg: &RunConfig, episodes: &[Episode]) -> Result<Vec<TrainEpisode>, PipelineError> {
    let ws = Workspace::for_episodes(cfg, episodes)?;
    pool(cfg)?.install(|| episodes.par_iter().map(|e| ws.training_episode(e)).collect())
}

/// Trains on the train split, saves the checkpoint and `train_log.csv` in the
/// output directory.
pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<EpochLog>, PipelineError> {
    let episodes = load_split(cfg, Split::Train)?;
    let data = build_training_set(cfg, &episodes)?;
    let mut model = Model::new(cfg.model.clone(), Vocab::bundled())?;
    let out = cfg.paths.output_dir();
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let log_path = out.join("train_log.csv");
    let mut log = std::io::BufWriter::new(fs::File::create(&log_path).map_err(io_err(&log_path))?);
    let history = discriminator::train(&mut model, &data, &cfg.train, Some(&mut log))?;
    log.flush().map_err(io_err(&log_path))?;
    let ckpt = cfg.paths.checkpoint_file();
    if let Some(parent) = ckpt.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    discriminator::save_checkpoint(&model, &ckpt)?;
    Ok(history)
}

pub fn load_model(cfg: &RunConfig) -> Result<Model, PipelineError> {
    let path = cfg.paths.checkpoint_file();
    if !path.exists() {
        return Err(PipelineError::Data(format!("checkpoint {} not found; run train first", path.display())));
    }
    Ok(discriminator::load_checkpoint(&path, Vocab::bundled())?)
}

/// Evaluates `agent` on `episodes`; predictions merge in episode order.
pub fn run_episodes(cfg: &RunConfig, split: &str, episodes: &[Episode], agent: Agent, model: Option<&Model>) -> Result<EvalReport, PipelineError> {
    let ws = Workspace::for_episodes(cfg, episodes)?;
    let preds: Vec<(Vec<[f64; 2]>, bool)> =
        pool(cfg)?.install(|| episodes.par_iter().map(|e| ws.predict(e, agent, model)).collect::<Result<_, _>>())?;
    let goals: Vec<[f64; 2]> = episodes.iter().map(Episode::goal_xy).collect();
    let cases: Vec<EvalCase<f64>> = episodes
        .iter()
        .zip(&preds)
        .zip(&goals)
        .map(|((e, (pred, fallback)), &goal)| EvalCase { episode: &e.id, pred: Some(pred), gt: &e.gt_path, goal, fallback: *fallback })
        .collect();
    Ok(evaluate(agent.name(), split, &cases, cfg.metrics.d_th)?)
}

pub fn report_stem(split: Split, agent: Agent) -> String {
    format!("{}_{}", split.name(), agent.name())
}

/// Runs one agent on one split and writes `<split>_<agent>.{json,csv}` to the
/// output directory.
pub fn cmd_run(cfg: &RunConfig, split: Split, agent: Agent) -> Result<EvalReport, PipelineError> {
    let episodes = load_split(cfg, split)?;
    let model = match agent {
        Agent::Ippd => Some(load_model(cfg)?),
        _ => None,
    };
    let report = run_episodes(cfg, split.name(), &episodes, agent, model.as_ref())?;
    let out = cfg.paths.output_dir();
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let stem = out.join(report_stem(split, agent));
    let json = stem.with_extension("json");
    fs::write(&json, report.to_json()).map_err(io_err(&json))?;
    let csv = stem.with_extension("csv");
    fs::write(&csv, report.to_csv()?).map_err(io_err(&csv))?;
    Ok(report)
}

/// Comparison table over saved reports, as text and CSV.
pub fn cmd_report(paths: &[PathBuf]) -> Result<(String, String), PipelineError> {
    let reports = paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            Ok(EvalReport::from_json(&text)?)
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    Ok(compare(&reports)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(root: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.paths.root = root.to_path_buf();
        cfg.gen.train_maps = 2;
        cfg.gen.seen_maps = 1;
        cfg.gen.unseen_maps = 1;
        cfg.gen.train_episodes = 6;
        cfg.gen.seen_episodes = 3;
        cfg.gen.unseen_episodes = 3;
        cfg.model = discriminator::ModelConfig { d: 24, heads: 3, layers: 1, max_len: 256, dropout: 0.0, ..Default::default() };
        cfg.train.epochs = 1;
        cfg
    }

    #[test]
    fn seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(1, &[2, 3]), derive_seed(1, &[2, 3]));
        assert_ne!(derive_seed(1, &[2, 3]), derive_seed(1, &[3, 2]));
        assert_ne!(episode_seed(0, "train-0001"), episode_seed(0, "train-0002"));
    }

    #[test]
    fn default_plan_has_disjoint_unseen_maps() {
        let cfg = RunConfig::default();
        let plan = map_plan(&cfg);
        assert_eq!(plan.len(), 24);
        let train = split_maps(&cfg, Split::Train);
        let seen = split_maps(&cfg, Split::EvalSeen);
        let unseen = split_maps(&cfg, Split::EvalUnseen);
        assert_eq!((train.len(), seen.len(), unseen.len()), (20, 4, 4));
        assert!(seen.iter().all(|s| train.contains(s)));
        assert!(unseen.iter().all(|u| !train.contains(u)));
    }

    #[test]
    fn generation_is_reproducible() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let (ca, cb) = (small(a.path()), small(b.path()));
        assert_eq!(cmd_gen(&ca).unwrap(), vec![(Split::Train, 6), (Split::EvalSeen, 3), (Split::EvalUnseen, 3)]);
        cmd_gen(&cb).unwrap();
        for split in Split::ALL {
            assert_eq!(fs::read(episodes_file(&ca, split)).unwrap(), fs::read(episodes_file(&cb, split)).unwrap());
        }
        for (id, _) in map_plan(&ca) {
            assert_eq!(fs::read(map_file(&ca, &id)).unwrap(), fs::read(map_file(&cb, &id)).unwrap());
        }
        let seen = load_split(&ca, Split::EvalSeen).unwrap();
        let train = load_split(&ca, Split::Train).unwrap();
        assert!(seen.iter().all(|e| e.map_id == train_map_id(0)));
        assert!(seen.iter().all(|s| train.iter().all(|t| t.instruction != s.instruction || t.start_pose != s.start_pose)));
    }

    #[test]
    fn train_run_and_report() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(dir.path());
        cmd_gen(&cfg).unwrap();
        assert!(matches!(cmd_run(&cfg, Split::EvalSeen, Agent::Ippd), Err(PipelineError::Data(_))));
        let history = cmd_train(&cfg).unwrap();
        assert_eq!(history.len(), 1);
        assert!(cfg.paths.checkpoint_file().exists());
        let mut paths = Vec::new();
        for agent in Agent::ALL {
            let r = cmd_run(&cfg, Split::EvalUnseen, agent).unwrap();
            assert_eq!(r.episodes.len(), 3);
            paths.push(cfg.paths.output_dir().join(format!("{}.json", report_stem(Split::EvalUnseen, agent))));
        }
        let (text, csv) = cmd_report(&paths).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(csv.lines().count(), 4);
        let first = fs::read(&paths[0]).unwrap();
        cfg.run.workers = 3;
        cmd_run(&cfg, Split::EvalUnseen, Agent::Ippd).unwrap();
        assert_eq!(fs::read(&paths[0]).unwrap(), first);
    }

    #[test]
    fn missing_inputs_are_data_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        let err = cmd_gen_episodes(&cfg).unwrap_err();
        assert!(matches!(err, PipelineError::Data(_)) && !err.is_config());
        assert!(matches!(find_episode(&cfg, "nope"), Err(PipelineError::Data(_))));
    }
}
