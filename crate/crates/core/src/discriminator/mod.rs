//! Transformer scorer over `[CLS] + instruction + path` sequences, trained with a
//! score regression loss plus masked-token prediction.

mod checkpoint;
mod train;

use std::sync::Arc;

use ndarray::{s, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{ndtw, MetricsError};
use crate::nn::{EncoderLayer, LayerCache, LayerNorm, Linear, LnCache, ParamId, Params, Span};
use crate::path_encoder::{embedding_table, EncoderCache, EncoderConfig, EncoderError, PathEncoder, PathInput, Vocab, EMBED_DIM};
use crate::Scalar;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use train::{sample_masks, train, EpochLog, TrainCandidate, TrainConfig, TrainEpisode, TrainError, MIN_MASKABLE};

/// How the per-keypoint `h` and `s` vectors enter the sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Two consecutive elements per keypoint.
    Interleave,
    /// One element `h + s` per keypoint.
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub fusion: Fusion,
    /// Fine-tune the shared word table.
    pub train_embeddings: bool,
    pub embedding_seed: u64,
    pub init_seed: u64,
    pub encoder: EncoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 120,
            heads: 12,
            layers: 6,
            max_len: 256,
            dropout: 0.1,
            fusion: Fusion::Interleave,
            train_embeddings: false,
            embedding_seed: 0,
            init_seed: 0,
            encoder: EncoderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(ModelError::Config(format!("width {} must be a positive multiple of the head count {}", self.d, self.heads)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        let e = &self.encoder;
        if !(e.spacing > 0.0 && e.compass_radius > 0.0) || e.max_keypoints < 2 {
            return Err(ModelError::Config("encoder spacing, radius and keypoint cap must be positive".into()));
        }
        if self.max_len < 1 + self.path_rows(2) {
            return Err(ModelError::Config(format!("max_len {} cannot hold a two-keypoint path", self.max_len)));
        }
        Ok(())
    }

    /// Sequence elements used by `k` keypoints.
    pub fn path_rows(&self, k: usize) -> usize {
        match self.fusion {
            Fusion::Interleave => 2 * k,
            Fusion::Sum => k,
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of {len} elements exceeds the maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {token} outside a vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("masked position {0} is not a token position")]
    MaskOutOfRange(usize),
    #[error("path has fewer than two keypoints")]
    ShortPath,
    #[error("no candidates to rank")]
    NoCandidates,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One scored sequence. `masked` lists token positions replaced by `[MASK]`.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub tokens: &'a [u32],
    pub path: &'a PathInput,
    pub masked: &'a [usize],
}

#[derive(Debug, Clone)]
pub struct Output<T> {
    pub scores: Vec<T>,
    /// One row per masked position, samples in order.
    pub mlm_logits: Array2<T>,
    /// Original token id per `mlm_logits` row.
    pub mlm_labels: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    offsets: Vec<usize>,
    spans: Vec<Span>,
    n_tokens: Vec<usize>,
    enc: EncoderCache<T>,
    /// Word vectors of unmasked tokens and their sequence rows.
    lang_in: Array2<T>,
    lang_tokens: Vec<u32>,
    lang_rows: Vec<usize>,
    mask_rows: Vec<usize>,
    path_rows: Vec<(usize, usize)>,
    layers: Vec<LayerCache<T>>,
    final_ln: LnCache<T>,
    cls_in: Array2<T>,
    mlm_in: Array2<T>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub mse: f64,
    pub mlm: f64,
    pub total: f64,
}

/// Instruction-conditioned path discriminator.
#[derive(Debug, Clone)]
pub struct IppdModel<T> {
    config: ModelConfig,
    vocab: Arc<Vocab>,
    params: Params<T>,
    encoder: PathEncoder,
    lang: Linear,
    cls: ParamId,
    mask: ParamId,
    pos: ParamId,
    segment: ParamId,
    layers: Vec<EncoderLayer>,
    final_ln: LayerNorm,
    score: Linear,
    mlm: Linear,
}

const INIT_STD: f64 = 0.02;

impl<T: Scalar> IppdModel<T> {
    /// Freshly initialized model, deterministic in the config seeds.
    pub fn new(config: ModelConfig, vocab: Arc<Vocab>) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut p = Params::new();
        let d = config.d;
        let words = p.add("embed.words", embedding_table(vocab.len(), config.embedding_seed), config.train_embeddings);
        let encoder = PathEncoder::new(&mut p, words, d, config.encoder.pe_dim(), &mut rng);
        let lang = Linear::new(&mut p, "lang", EMBED_DIM, d, (2.0 / (EMBED_DIM + d) as f64).sqrt(), &mut rng);
        let cls = p.normal("cls", 1, d, INIT_STD, &mut rng);
        let mask = p.normal("mask", 1, d, INIT_STD, &mut rng);
        let pos = p.normal("pos", config.max_len, d, INIT_STD, &mut rng);
        let segment = p.normal("segment", 2, d, INIT_STD, &mut rng);
        let layers = (0..config.layers)
            .map(|i| EncoderLayer::new(&mut p, &format!("layer{i}"), d, config.heads, INIT_STD, &mut rng))
            .collect();
        let final_ln = LayerNorm::new(&mut p, "final_ln", d);
        let score = Linear::new(&mut p, "score", d, 1, INIT_STD, &mut rng);
        let mlm = Linear::new(&mut p, "mlm", d, vocab.len(), INIT_STD, &mut rng);
        Ok(Self { config, vocab, params: p, encoder, lang, cls, mask, pos, segment, layers, final_ln, score, mlm })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Arc<Vocab> {
        &self.vocab
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<T> {
        &mut self.params
    }

    pub fn encoder(&self) -> &PathEncoder {
        &self.encoder
    }

    /// Score head tensors `(w: d x 1, b: 1 x 1)`.
    pub fn score_head(&self) -> (ParamId, ParamId) {
        (self.score.w, self.score.b)
    }

    /// Same architecture and values at another precision.
    pub fn cast<U: Scalar>(&self) -> IppdModel<U> {
        IppdModel {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.params.cast(),
            encoder: self.encoder,
            lang: self.lang,
            cls: self.cls,
            mask: self.mask,
            pos: self.pos,
            segment: self.segment,
            layers: self.layers.clone(),
            final_ln: self.final_ln,
            score: self.score,
            mlm: self.mlm,
        }
    }

    pub fn seq_len(&self, tokens: usize, keypoints: usize) -> usize {
        1 + tokens + self.config.path_rows(keypoints)
    }

    /// Longest instruction that fits next to a path of `keypoints` keypoints.
    pub fn max_tokens(&self, keypoints: usize) -> usize {
        self.config.max_len.saturating_sub(1 + self.config.path_rows(keypoints))
    }

    /// Batched forward. Dropout is active only when `rng` is given.
    pub fn forward(&self, samples: &[Sample], mut rng: Option<&mut ChaCha8Rng>) -> Result<(Output<T>, ForwardCache<T>), ModelError> {
        let p = &self.params;
        let d = self.config.d;
        let vocab = self.vocab.len();
        let mut offsets = Vec::with_capacity(samples.len());
        let mut spans = Vec::with_capacity(samples.len());
        let mut total = 0;
        for smp in samples {
            if smp.path.len() < 2 {
                return Err(ModelError::ShortPath);
            }
            if let Some(&t) = smp.tokens.iter().find(|&&t| t as usize >= vocab) {
                return Err(ModelError::TokenOutOfRange { token: t, vocab });
            }
            if let Some(&m) = smp.masked.iter().find(|&&m| m >= smp.tokens.len()) {
                return Err(ModelError::MaskOutOfRange(m));
            }
            let len = self.seq_len(smp.tokens.len(), smp.path.len());
            if len > self.config.max_len {
                return Err(ModelError::SequenceTooLong { len, max: self.config.max_len });
            }
            offsets.push(total);
            spans.push((total, len));
            total += len;
        }

        let paths: Vec<&PathInput> = samples.iter().map(|s| s.path).collect();
        let (feat, enc) = self.encoder.forward(p, &paths);

        let words = p.get(self.encoder.words);
        let mut lang_tokens = Vec::new();
        let mut lang_rows = Vec::new();
        let mut mask_rows = Vec::new();
        let mut mlm_labels = Vec::new();
        for (smp, &o) in samples.iter().zip(&offsets) {
            let mut masked = vec![false; smp.tokens.len()];
            for &m in smp.masked {
                masked[m] = true;
            }
            for (j, &t) in smp.tokens.iter().enumerate() {
                if masked[j] {
                    mask_rows.push(o + 1 + j);
                } else {
                    lang_tokens.push(t);
                    lang_rows.push(o + 1 + j);
                }
            }
            let mut ms: Vec<usize> = smp.masked.to_vec();
            ms.sort_unstable();
            ms.dedup();
            mlm_labels.extend(ms.iter().map(|&m| smp.tokens[m]));
        }
        let lang_in = Array2::from_shape_fn((lang_tokens.len(), EMBED_DIM), |(i, j)| words[[lang_tokens[i] as usize, j]]);
        let lang_out = self.lang.forward(p, lang_in.view());

        let mut x = Array2::<T>::zeros((total, d));
        let pos = p.get(self.pos);
        let seg = p.get(self.segment);
        let mut path_rows = Vec::new();
        let mut gk = 0;
        for (i, smp) in samples.iter().enumerate() {
            let o = offsets[i];
            let n_tok = smp.tokens.len();
            x.row_mut(o).assign(&p.get(self.cls).row(0));
            for k in 0..smp.path.len() {
                match self.config.fusion {
                    Fusion::Interleave => {
                        let r = o + 1 + n_tok + 2 * k;
                        x.row_mut(r).assign(&feat.h.row(gk));
                        x.row_mut(r + 1).assign(&feat.s.row(gk));
                        path_rows.push((r, r + 1));
                    }
                    Fusion::Sum => {
                        let r = o + 1 + n_tok + k;
                        let mut row = x.row_mut(r);
                        row.assign(&feat.h.row(gk));
                        row += &feat.s.row(gk);
                        path_rows.push((r, r));
                    }
                }
                gk += 1;
            }
            for j in 0..spans[i].1 {
                let mut row = x.row_mut(o + j);
                row += &pos.row(j);
                row += &seg.row(usize::from(j > n_tok));
            }
        }
        for (r, &row) in lang_rows.iter().enumerate() {
            let mut dst = x.row_mut(row);
            dst += &lang_out.row(r);
        }
        for &row in &mask_rows {
            let mut dst = x.row_mut(row);
            dst += &p.get(self.mask).row(0);
        }

        let rate = self.config.dropout;
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let drop = match rng.as_deref_mut() {
                Some(r) if rate > 0.0 => Some((rate, r)),
                _ => None,
            };
            let (y, c) = layer.forward(p, x, &spans, drop);
            x = y;
            layers.push(c);
        }
        let (y, final_ln) = self.final_ln.forward(p, x.view());
        let cls_in = y.select(Axis(0), &offsets);
        let mlm_in = y.select(Axis(0), &mask_rows);
        let scores = self.score.forward(p, cls_in.view()).column(0).to_vec();
        let mlm_logits = self.mlm.forward(p, mlm_in.view());
        let n_tokens = samples.iter().map(|s| s.tokens.len()).collect();
        let cache = ForwardCache { offsets, spans, n_tokens, enc, lang_in, lang_tokens, lang_rows, mask_rows, path_rows, layers, final_ln, cls_in, mlm_in };
        Ok((Output { scores, mlm_logits, mlm_labels }, cache))
    }

    /// Accumulates parameter gradients given upstream gradients of the outputs.
    pub fn backward(&self, cache: &ForwardCache<T>, d_scores: &[T], d_mlm: &Array2<T>, g: &mut Params<T>) {
        let p = &self.params;
        let d = self.config.d;
        let ds = Array2::from_shape_fn((d_scores.len(), 1), |(i, _)| d_scores[i]);
        let dcls = self.score.backward(p, g, cache.cls_in.view(), ds.view());
        let dmlm = self.mlm.backward(p, g, cache.mlm_in.view(), d_mlm.view());
        let rows: usize = cache.spans.iter().map(|s| s.1).sum();
        let mut dy = Array2::<T>::zeros((rows, d));
        for (i, &o) in cache.offsets.iter().enumerate() {
            let mut r = dy.row_mut(o);
            r += &dcls.row(i);
        }
        for (i, &m) in cache.mask_rows.iter().enumerate() {
            let mut r = dy.row_mut(m);
            r += &dmlm.row(i);
        }
        let mut dx = self.final_ln.backward(p, g, &cache.final_ln, dy.view());
        for (layer, c) in self.layers.iter().zip(&cache.layers).rev() {
            dx = layer.backward(p, g, c, &cache.spans, dx);
        }

        for (i, &(o, len)) in cache.spans.iter().enumerate() {
            let n_tok = cache.n_tokens[i];
            {
                let gp = g.get_mut(self.pos);
                let mut block = gp.slice_mut(s![0..len, ..]);
                block += &dx.slice(s![o..o + len, ..]);
            }
            let gs = g.get_mut(self.segment);
            let text = dx.slice(s![o..o + 1 + n_tok, ..]).sum_axis(Axis(0));
            let path = dx.slice(s![o + 1 + n_tok..o + len, ..]).sum_axis(Axis(0));
            let mut r0 = gs.row_mut(0);
            r0 += &text;
            let mut r1 = gs.row_mut(1);
            r1 += &path;
            let mut c = g.get_mut(self.cls).row_mut(0);
            c += &dx.row(o);
        }
        for &m in &cache.mask_rows {
            let mut r = g.get_mut(self.mask).row_mut(0);
            r += &dx.row(m);
        }
        let dlang = dx.select(Axis(0), &cache.lang_rows);
        if p.is_trainable(self.encoder.words) {
            let de = self.lang.backward(p, g, cache.lang_in.view(), dlang.view());
            let gw = g.get_mut(self.encoder.words);
            for (r, &t) in cache.lang_tokens.iter().enumerate() {
                let mut row = gw.row_mut(t as usize);
                row += &de.row(r);
            }
        } else {
            self.lang.backward_params(g, cache.lang_in.view(), dlang.view());
        }
        let k = cache.path_rows.len();
        let mut dh = Array2::zeros((k, d));
        let mut dsv = Array2::zeros((k, d));
        for (i, &(rh, rs)) in cache.path_rows.iter().enumerate() {
            dh.row_mut(i).assign(&dx.row(rh));
            dsv.row_mut(i).assign(&dx.row(rs));
        }
        self.encoder.backward(p, g, &cache.enc, &dh, &dsv);
    }

    /// Loss and, when `grads` is given, its gradient. `targets[i]` is the
    /// regression target of `samples[i]`.
    pub fn loss(
        &self,
        samples: &[Sample],
        targets: &[f64],
        rng: Option<&mut ChaCha8Rng>,
        grads: Option<&mut Params<T>>,
    ) -> Result<LossParts, ModelError> {
        let (out, cache) = self.forward(samples, rng)?;
        let b = samples.len().max(1) as f64;
        let mut mse = 0.0;
        let mut d_scores = Vec::with_capacity(samples.len());
        for (y_hat, &y) in out.scores.iter().zip(targets) {
            let e = y_hat.as_f64() - y;
            mse += e * e / b;
            d_scores.push(T::of(2.0 * e / b));
        }
        let m = out.mlm_labels.len();
        let mut mlm = 0.0;
        let mut d_mlm = Array2::zeros(out.mlm_logits.raw_dim());
        for (r, &label) in out.mlm_labels.iter().enumerate() {
            let row = out.mlm_logits.row(r);
            let mx = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let z: T = row.iter().fold(T::zero(), |a, &v| a + (v - mx).exp());
            mlm += ((z.ln() + mx) - row[label as usize]).as_f64() / m as f64;
            let inv = T::one() / T::of(m as f64);
            for (c, &v) in row.iter().enumerate() {
                let pr = (v - mx).exp() / z;
                d_mlm[[r, c]] = (pr - if c == label as usize { T::one() } else { T::zero() }) * inv;
            }
        }
        if let Some(g) = grads {
            self.backward(&cache, &d_scores, &d_mlm, g);
        }
        Ok(LossParts { mse, mlm, total: mse + mlm })
    }

    /// Scores in input order, evaluated in chunks of `batch` without dropout.
    pub fn score_paths(&self, tokens: &[u32], paths: &[PathInput], batch: usize) -> Result<Vec<T>, ModelError> {
        let mut scores = Vec::with_capacity(paths.len());
        for chunk in paths.chunks(batch.max(1)) {
            let samples: Vec<Sample> = chunk.iter().map(|path| Sample { tokens, path, masked: &[] }).collect();
            scores.extend(self.forward(&samples, None)?.0.scores);
        }
        Ok(scores)
    }

    /// Highest-scoring candidate (first on ties) and all scores.
    pub fn rank(&self, tokens: &[u32], paths: &[PathInput]) -> Result<Ranking<T>, ModelError> {
        if paths.is_empty() {
            return Err(ModelError::NoCandidates);
        }
        let scores = self.score_paths(tokens, paths, 32)?;
        Ok(Ranking { best: argmax(&scores), scores })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranking<T> {
    pub best: usize,
    pub scores: Vec<T>,
}

/// First index of the maximum; NaN never wins.
pub fn argmax<T: Scalar>(scores: &[T]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] || scores[best].is_nan() {
            best = i;
        }
    }
    best
}

/// Regression target `lambda * nDTW + (1 - lambda) * exp(-|end - goal| / d_th)`.
pub fn target_score(candidate: &[[f64; 2]], gt: &[[f64; 2]], goal: [f64; 2], lambda: f64, d_th: f64) -> Result<f64, ModelError> {
    let end = candidate.last().ok_or(MetricsError::EmptyPath)?;
    let dist = ((end[0] - goal[0]).powi(2) + (end[1] - goal[1]).powi(2)).sqrt();
    Ok(lambda * ndtw(candidate, gt, d_th)? + (1.0 - lambda) * (-dist / d_th).exp())
}
