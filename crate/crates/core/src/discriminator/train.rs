use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{IppdModel, ModelError, Sample};
use crate::nn::AdamW;
use crate::path_encoder::PathInput;
use crate::Scalar;

/// Instructions shorter than this carry no masked-token term.
pub const MIN_MASKABLE: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Weight of nDTW against the endpoint term in the target score.
    pub lambda: f64,
    pub mask_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Candidates drawn per episode and epoch; the best-target one is always kept.
    pub candidates_per_episode: usize,
    /// Global gradient norm ceiling; `0` disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.01,
            lambda: 0.5,
            mask_rate: 0.15,
            batch_size: 16,
            epochs: 10,
            seed: 0,
            candidates_per_episode: 8,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return bad(format!("mask rate {} outside (0, 1)", self.mask_rate));
        }
        if self.batch_size == 0 || self.candidates_per_episode == 0 {
            return bad("batch size and candidates per episode must be positive".into());
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0 && self.grad_clip >= 0.0) {
            return bad("learning rate, weight decay and clip must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainCandidate {
    pub path: PathInput,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainEpisode {
    pub tokens: Vec<u32>,
    pub candidates: Vec<TrainCandidate>,
}

/// Mean losses over one epoch; `step` counts optimizer steps so far.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    pub mse: f64,
    pub mlm: f64,
    pub total: f64,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no training candidates")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, step {step} (mse {mse}, mlm {mlm})")]
    NonFinite { epoch: usize, step: usize, mse: f64, mlm: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Token positions to mask: each with probability `rate`, at least one once the
/// instruction has [`MIN_MASKABLE`] tokens, none below that.
pub fn sample_masks(n_tokens: usize, rate: f64, rng: &mut impl Rng) -> Vec<usize> {
    if n_tokens < MIN_MASKABLE {
        return Vec::new();
    }
    let mut m: Vec<usize> = (0..n_tokens).filter(|_| rng.random::<f64>() < rate).collect();
    if m.is_empty() {
        m.push(rng.random_range(0..n_tokens));
    }
    m
}

/// One `(episode, candidate)` pair per sampled item, deterministic in `rng`.
fn epoch_items(data: &[TrainEpisode], per_episode: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut items = Vec::new();
    for e in order {
        let n = data[e].candidates.len();
        if n == 0 {
            continue;
        }
        let best = (0..n).fold(0, |b, i| if data[e].candidates[i].target > data[e].candidates[b].target { i } else { b });
        let mut rest: Vec<usize> = (0..n).filter(|&i| i != best).collect();
        rest.shuffle(rng);
        rest.truncate(per_episode - 1);
        rest.push(best);
        rest.shuffle(rng);
        items.extend(rest.into_iter().map(|c| (e, c)));
    }
    items
}

/// AdamW training on score regression plus masked-token prediction. Writes a
/// CSV row per epoch to `log` and aborts on the first non-finite loss.
pub fn train<T: Scalar>(
    model: &mut IppdModel<T>,
    data: &[TrainEpisode],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<EpochLog>, TrainError> {
    cfg.validate()?;
    if data.iter().all(|e| e.candidates.is_empty()) {
        return Err(TrainError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut grads = model.params().zeros_like();
    let mut history = Vec::with_capacity(cfg.epochs);
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "epoch,step,mse,mlm,total")?;
    }
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let items = epoch_items(data, cfg.candidates_per_episode, &mut rng);
        let (mut mse, mut mlm, mut batches) = (0.0, 0.0, 0usize);
        for batch in items.chunks(cfg.batch_size) {
            let tokens: Vec<&[u32]> = batch
                .iter()
                .map(|&(e, c)| {
                    let keep = model.max_tokens(data[e].candidates[c].path.len());
                    &data[e].tokens[..data[e].tokens.len().min(keep)]
                })
                .collect();
            let masks: Vec<Vec<usize>> = tokens.iter().map(|t| sample_masks(t.len(), cfg.mask_rate, &mut rng)).collect();
            let samples: Vec<Sample> = batch
                .iter()
                .enumerate()
                .map(|(i, &(e, c))| Sample { tokens: tokens[i], path: &data[e].candidates[c].path, masked: &masks[i] })
                .collect();
            let targets: Vec<f64> = batch.iter().map(|&(e, c)| data[e].candidates[c].target).collect();
            grads.fill_zero();
            let parts = model.loss(&samples, &targets, Some(&mut rng), Some(&mut grads))?;
            step += 1;
            if !parts.total.is_finite() || !grads.all_finite() {
                return Err(TrainError::NonFinite { epoch, step, mse: parts.mse, mlm: parts.mlm });
            }
            if cfg.grad_clip > 0.0 {
                let norm = grads.norm();
                if norm > cfg.grad_clip {
                    grads.scale(T::of(cfg.grad_clip / norm));
                }
            }
            opt.update(model.params_mut(), &grads);
            mse += parts.mse;
            mlm += parts.mlm;
            batches += 1;
        }
        let n = batches.max(1) as f64;
        let entry = EpochLog { epoch, step, mse: mse / n, mlm: mlm / n, total: (mse + mlm) / n };
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{},{},{},{},{}", entry.epoch, entry.step, entry.mse, entry.mlm, entry.total)?;
        }
        history.push(entry);
    }
    Ok(history)
}
