use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ippd::config::{Agent, RunConfig};
use ippd::envgen::{candidate_polylines, render, Episode};
use ippd::instruction_parser::components_to_json;
use ippd::path_encoder::{discretize, object_compass, pose_features, PoseNormalizer};
use ippd::pipeline::{self, PipelineError, Split, Workspace};
use ippd::semantic_map::{load_map, CategoryTable, SemanticVoxelMap};
use serde_json::json;

#[derive(Parser)]
#[command(name = "ippd", version, about = "Instruction-aware path proposal and discrimination on semantic voxel maps")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML run config; defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Data root, overriding the config and IPPD_DATA.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Worker threads for episode-level parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Single worker and fixed merge order.
    #[arg(long, global = true)]
    deterministic: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and unseen maps.
    GenMaps,
    /// Generate train, eval_seen and eval_unseen episodes on existing maps.
    GenEpisodes,
    /// Print the key-component sequence of an instruction as JSON.
    Parse {
        #[arg(long)]
        text: String,
    },
    /// Print candidate paths as JSON lines of waypoint arrays.
    Propose {
        /// Map file, or map id under the maps directory.
        #[arg(long)]
        map: Option<String>,
        /// Episode id, or a JSONL file whose first episode is used.
        #[arg(long)]
        episode: String,
        #[arg(long)]
        max_candidates: Option<usize>,
    },
    /// Print the keypoints, compasses and pose features of a path.
    Encode {
        #[arg(long)]
        map: Option<String>,
        #[arg(long)]
        episode: String,
    },
    /// Train the discriminator on the train split.
    Train,
    /// Evaluate one agent on one split and save its report.
    Run {
        #[arg(long, default_value = "eval_seen")]
        split: String,
        /// ippd, proposal-only-uniform or random-path; defaults to the config.
        #[arg(long)]
        agent: Option<String>,
    },
    /// Aligned comparison table over saved JSON reports.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write a top-down SVG of a map with optional episode paths.
    Render {
        #[arg(long)]
        map: Option<String>,
        #[arg(long)]
        episode: Option<String>,
        /// Overlay the proposed candidates as well as the ground truth.
        #[arg(long)]
        candidates: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score an episode's candidates with a checkpoint and print the ranking.
    Rank {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        episode: String,
    },
}

fn load_config(g: &Global) -> Result<RunConfig, PipelineError> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => {
            let mut c = RunConfig::default();
            c.apply_env();
            c
        }
    };
    if let Some(d) = &g.data {
        cfg.paths.root = d.clone();
    }
    if let Some(w) = g.workers {
        cfg.run.workers = w;
    }
    if g.deterministic {
        cfg.run.deterministic = true;
    }
    if let Some(s) = g.seed {
        cfg.gen.seed = s;
        cfg.run.seed = s;
        cfg.train.seed = s;
        cfg.proposer.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn map_for(cfg: &RunConfig, map: Option<&str>, episode: &Episode) -> Result<(String, SemanticVoxelMap), PipelineError> {
    let key = map.unwrap_or(&episode.map_id);
    let path = if Path::new(key).is_file() { PathBuf::from(key) } else { pipeline::map_file(cfg, key) };
    if !path.is_file() {
        return Err(PipelineError::Data(format!("map {} not found", path.display())));
    }
    Ok((episode.map_id.clone(), load_map(&path)?))
}

fn workspace_for(cfg: &RunConfig, map: Option<&str>, episode: &Episode) -> Result<Workspace, PipelineError> {
    let (id, m) = map_for(cfg, map, episode)?;
    Workspace::new(cfg, [(id, m)].into_iter().collect())
}

fn split_arg(s: &str) -> Result<Split, PipelineError> {
    Split::parse(s).ok_or_else(|| ippd::config::ConfigError::Invalid(format!("unknown split {s}; expected train, eval_seen or eval_unseen")).into())
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let cfg = load_config(&cli.global)?;
    let mut out = std::io::stdout().lock();
    let print = |out: &mut std::io::StdoutLock, s: &str| writeln!(out, "{s}").map_err(|source| PipelineError::Io { path: "<stdout>".into(), source });
    match cli.command {
        Command::GenMaps => {
            let ids = pipeline::cmd_gen_maps(&cfg)?;
            print(&mut out, &format!("wrote {} maps to {}", ids.len(), cfg.paths.maps_dir().display()))?;
        }
        Command::GenEpisodes => {
            for (split, n) in pipeline::cmd_gen_episodes(&cfg)? {
                print(&mut out, &format!("{}: {n} episodes -> {}", split.name(), pipeline::episodes_file(&cfg, split).display()))?;
            }
        }
        Command::Parse { text } => {
            let parser = cfg.parser.build(ippd::instruction_parser::LanguageAssets::bundled())?;
            let components = parser.extract_key_components(&text);
            print(&mut out, &components_to_json(&components, &CategoryTable::bundled()).to_string())?;
        }
        Command::Propose { map, episode, max_candidates } => {
            let mut cfg = cfg;
            if let Some(n) = max_candidates {
                cfg.proposer.max_candidates = n;
            }
            let e = pipeline::find_episode(&cfg, &episode)?;
            let ws = workspace_for(&cfg, map.as_deref(), &e)?;
            let p = ws.propose(&e)?;
            for c in &p.candidates {
                print(&mut out, &serde_json::to_string(&c.waypoints).expect("waypoints serialize"))?;
            }
            if p.fallback {
                eprintln!("no instruction-driven candidates; printed the random fallback set");
            }
        }
        Command::Encode { map, episode } => {
            let e = pipeline::find_episode(&cfg, &episode)?;
            let (_, m) = map_for(&cfg, map.as_deref(), &e)?;
            let enc = &cfg.model.encoder;
            let table = CategoryTable::bundled();
            let norm = PoseNormalizer::for_map(&m);
            for k in discretize(&e.gt_path, enc.spacing, enc.max_keypoints)? {
                let pose = k.pose();
                let compass: Vec<_> = object_compass(&m, &pose, enc.compass_radius)
                    .points
                    .iter()
                    .map(|p| json!({ "offset": p.offset, "category": table.label(p.category), "instance": p.instance.0 }))
                    .collect();
                let pe = pose_features(norm.normalize(&pose)?, enc);
                let row = json!({ "position": k.position, "heading": k.heading, "compass": compass, "pose_features": pe });
                print(&mut out, &row.to_string())?;
            }
        }
        Command::Train => {
            let history = pipeline::cmd_train(&cfg)?;
            for h in &history {
                print(&mut out, &format!("epoch {} step {} mse {:.6} mlm {:.6} total {:.6}", h.epoch, h.step, h.mse, h.mlm, h.total))?;
            }
            print(&mut out, &format!("checkpoint -> {}", cfg.paths.checkpoint_file().display()))?;
        }
        Command::Run { split, agent } => {
            let split = split_arg(&split)?;
            let agent = match agent {
                Some(a) => Agent::parse(&a).ok_or_else(|| ippd::config::ConfigError::Invalid(format!("unknown agent {a}")))?,
                None => cfg.run.agent,
            };
            let report = pipeline::cmd_run(&cfg, split, agent)?;
            let a = report.aggregate;
            print(
                &mut out,
                &format!(
                    "{} {}: TL {:.3} NE {:.3} nDTW {:.3} OS {:.3} SR {:.3} SPL {:.3} (fallback {})",
                    report.agent,
                    report.split,
                    a.tl,
                    a.ne,
                    a.ndtw,
                    a.os,
                    a.sr,
                    a.spl,
                    report.fallback_count()
                ),
            )?;
        }
        Command::Report { reports, csv } => {
            let (text, table) = pipeline::cmd_report(&reports)?;
            print(&mut out, text.trim_end())?;
            if let Some(path) = csv {
                std::fs::write(&path, table).map_err(|source| PipelineError::Io { path, source })?;
            }
        }
        Command::Render { map, episode, candidates, out: file } => {
            let (m, paths) = match episode {
                Some(id) => {
                    let e = pipeline::find_episode(&cfg, &id)?;
                    let ws = workspace_for(&cfg, map.as_deref(), &e)?;
                    let mut paths = vec![e.gt_path.clone()];
                    if candidates {
                        paths.extend(candidate_polylines(&ws.propose(&e)?.candidates));
                    }
                    (ws.maps.into_values().next().expect("one map"), paths)
                }
                None => {
                    let key = map.ok_or_else(|| ippd::config::ConfigError::Invalid("render needs --map or --episode".into()))?;
                    let path = if Path::new(&key).is_file() { PathBuf::from(&key) } else { pipeline::map_file(&cfg, &key) };
                    if !path.is_file() {
                        return Err(PipelineError::Data(format!("map {} not found", path.display())));
                    }
                    (load_map(&path)?, Vec::new())
                }
            };
            render(&m, &paths, &file)?;
            print(&mut out, &format!("wrote {}", file.display()))?;
        }
        Command::Rank { checkpoint, episode } => {
            let mut cfg = cfg;
            if let Some(c) = checkpoint {
                cfg.paths.checkpoint = c;
            }
            let model = pipeline::load_model(&cfg)?;
            let e = pipeline::find_episode(&cfg, &episode)?;
            let ws = workspace_for(&cfg, None, &e)?;
            let p = ws.propose(&e)?;
            let inputs = p.candidates.iter().map(|c| ws.prepare(&e, &c.waypoints)).collect::<Result<Vec<_>, _>>()?;
            let mut tokens = ws.tokens(&e);
            tokens.truncate(model.max_tokens(inputs.iter().map(|i| i.len()).max().unwrap_or(0)));
            let ranking = model.rank(&tokens, &inputs)?;
            let row = json!({
                "episode": e.id,
                "best": ranking.best,
                "fallback": p.fallback,
                "scores": ranking.scores,
                "path": p.candidates[ranking.best].waypoints,
            });
            print(&mut out, &row.to_string())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
