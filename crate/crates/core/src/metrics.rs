//! Navigation metrics (TL, NE, nDTW, OS, SR, SPL) and evaluation reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Scalar;

pub const DEFAULT_SUCCESS_RADIUS: f64 = 3.0;

pub type Point<T> = [T; 2];

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("path is empty")]
    EmptyPath,
    #[error("no prediction for episode {0}")]
    MissingPrediction(String),
    #[error("reports disagree on split {split}: {detail}")]
    MismatchedSplits { split: String, detail: String },
    #[error("no reports given")]
    NoReports,
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed report: {0}")]
    Malformed(String),
}

fn dist<T: Scalar>(a: Point<T>, b: Point<T>) -> T {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// DTW with Euclidean point cost and match/insert/delete steps.
pub fn dtw<T: Scalar>(pred: &[Point<T>], gt: &[Point<T>]) -> Result<T, MetricsError> {
    if pred.is_empty() || gt.is_empty() {
        return Err(MetricsError::EmptyPath);
    }
    let m = gt.len();
    let inf = T::infinity();
    let mut prev = vec![inf; m + 1];
    let mut cur = vec![inf; m + 1];
    prev[0] = T::zero();
    for p in pred {
        cur[0] = inf;
        for j in 1..=m {
            let best = prev[j].min(cur[j - 1]).min(prev[j - 1]);
            cur[j] = dist(*p, gt[j - 1]) + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

/// `exp(-DTW / (|gt| * d_th))`, in (0, 1].
pub fn ndtw<T: Scalar>(pred: &[Point<T>], gt: &[Point<T>], d_th: T) -> Result<T, MetricsError> {
    let d = dtw(pred, gt)?;
    Ok((-d / (T::of(gt.len() as f64) * d_th)).exp())
}

pub fn trajectory_length<T: Scalar>(path: &[Point<T>]) -> T {
    path.windows(2).fold(T::zero(), |acc, w| acc + dist(w[0], w[1]))
}

pub fn navigation_error<T: Scalar>(pred: &[Point<T>], goal: Point<T>) -> Result<T, MetricsError> {
    pred.last().map(|&p| dist(p, goal)).ok_or(MetricsError::EmptyPath)
}

pub fn oracle_success<T: Scalar>(pred: &[Point<T>], goal: Point<T>, d_th: T) -> Result<bool, MetricsError> {
    if pred.is_empty() {
        return Err(MetricsError::EmptyPath);
    }
    Ok(pred.iter().any(|&p| dist(p, goal) <= d_th))
}

/// Inclusive boundary: `NE <= d_th` succeeds.
pub fn success<T: Scalar>(pred: &[Point<T>], goal: Point<T>, d_th: T) -> Result<bool, MetricsError> {
    Ok(navigation_error(pred, goal)? <= d_th)
}

pub fn spl<T: Scalar>(success: bool, gt_len: T, pred_len: T) -> T {
    if !success {
        return T::zero();
    }
    let denom = gt_len.max(pred_len);
    if denom > T::zero() {
        gt_len / denom
    } else {
        T::one()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: String,
    pub tl: f64,
    pub ne: f64,
    pub ndtw: f64,
    pub os: f64,
    pub sr: f64,
    pub spl: f64,
    /// Answered from the random fallback set rather than instruction-driven proposals.
    pub fallback: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Aggregate {
    pub tl: f64,
    pub ne: f64,
    pub ndtw: f64,
    pub os: f64,
    pub sr: f64,
    pub spl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub agent: String,
    pub split: String,
    pub episodes: Vec<EpisodeMetrics>,
    pub aggregate: Aggregate,
}

/// One prediction to score against its reference.
#[derive(Debug, Clone, Copy)]
pub struct EvalCase<'a, T> {
    pub episode: &'a str,
    pub pred: Option<&'a [Point<T>]>,
    pub gt: &'a [Point<T>],
    pub goal: Point<T>,
    pub fallback: bool,
}

pub fn episode_metrics<T: Scalar>(
    episode: &str,
    pred: &[Point<T>],
    gt: &[Point<T>],
    goal: Point<T>,
    d_th: T,
) -> Result<EpisodeMetrics, MetricsError> {
    let tl = trajectory_length(pred);
    let sr = success(pred, goal, d_th)?;
    Ok(EpisodeMetrics {
        episode: episode.to_string(),
        tl: tl.as_f64(),
        ne: navigation_error(pred, goal)?.as_f64(),
        ndtw: ndtw(pred, gt, d_th)?.as_f64(),
        os: if oracle_success(pred, goal, d_th)? { 1.0 } else { 0.0 },
        sr: if sr { 1.0 } else { 0.0 },
        spl: spl(sr, trajectory_length(gt), tl).as_f64(),
        fallback: false,
    })
}

/// Scores every case in order; a case without a prediction is an error.
pub fn evaluate<T: Scalar>(
    agent: &str,
    split: &str,
    cases: &[EvalCase<'_, T>],
    d_th: T,
) -> Result<EvalReport, MetricsError> {
    let episodes = cases
        .iter()
        .map(|c| {
            let pred = c.pred.ok_or_else(|| MetricsError::MissingPrediction(c.episode.to_string()))?;
            let mut m = episode_metrics(c.episode, pred, c.gt, c.goal, d_th)?;
            m.fallback = c.fallback;
            Ok(m)
        })
        .collect::<Result<Vec<_>, MetricsError>>()?;
    Ok(EvalReport::from_episodes(agent, split, episodes))
}

impl EvalReport {
    pub fn from_episodes(agent: &str, split: &str, episodes: Vec<EpisodeMetrics>) -> Self {
        let n = episodes.len().max(1) as f64;
        let mean = |f: fn(&EpisodeMetrics) -> f64| episodes.iter().map(f).sum::<f64>() / n;
        let aggregate = Aggregate {
            tl: mean(|e| e.tl),
            ne: mean(|e| e.ne),
            ndtw: mean(|e| e.ndtw),
            os: mean(|e| e.os),
            sr: mean(|e| e.sr),
            spl: mean(|e| e.spl),
        };
        Self { agent: agent.to_string(), split: split.to_string(), episodes, aggregate }
    }

    pub fn fallback_count(&self) -> usize {
        self.episodes.iter().filter(|e| e.fallback).count()
    }

    /// One row per episode followed by an `AGGREGATE` row.
    pub fn to_csv(&self) -> Result<String, MetricsError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["episode", "tl", "ne", "ndtw", "os", "sr", "spl", "fallback"])?;
        for e in &self.episodes {
            w.write_record([
                e.episode.clone(),
                e.tl.to_string(),
                e.ne.to_string(),
                e.ndtw.to_string(),
                e.os.to_string(),
                e.sr.to_string(),
                e.spl.to_string(),
                e.fallback.to_string(),
            ])?;
        }
        let a = &self.aggregate;
        w.write_record([
            "AGGREGATE".to_string(),
            a.tl.to_string(),
            a.ne.to_string(),
            a.ndtw.to_string(),
            a.os.to_string(),
            a.sr.to_string(),
            a.spl.to_string(),
            self.fallback_count().to_string(),
        ])?;
        let bytes = w.into_inner().map_err(|e| MetricsError::Malformed(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, MetricsError> {
        serde_json::from_str(text).map_err(|e| MetricsError::Malformed(e.to_string()))
    }
}

const COLUMNS: [&str; 6] = ["TL", "NE", "nDTW", "OS", "SR", "SPL"];

fn row_values(a: &Aggregate) -> [f64; 6] {
    [a.tl, a.ne, a.ndtw, a.os, a.sr, a.spl]
}

/// Row of the comparison table: one agent on one split.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub agent: String,
    pub split: String,
    pub values: [f64; 6],
}

/// Aligned text table and CSV over several reports. Reports on the same split
/// must cover the same episodes in the same order.
pub fn compare(reports: &[EvalReport]) -> Result<(String, String), MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::NoReports);
    }
    for (i, a) in reports.iter().enumerate() {
        for b in &reports[..i] {
            if a.split == b.split {
                let ids_a: Vec<&str> = a.episodes.iter().map(|e| e.episode.as_str()).collect();
                let ids_b: Vec<&str> = b.episodes.iter().map(|e| e.episode.as_str()).collect();
                if ids_a != ids_b {
                    return Err(MetricsError::MismatchedSplits {
                        split: a.split.clone(),
                        detail: format!("{} and {} cover different episodes", b.agent, a.agent),
                    });
                }
            }
        }
    }
    let agent_w = reports.iter().map(|r| r.agent.len()).max().unwrap_or(0).max(5);
    let split_w = reports.iter().map(|r| r.split.len()).max().unwrap_or(0).max(5);
    let mut text = format!("{:<agent_w$}  {:<split_w$}", "agent", "split");
    for c in COLUMNS {
        write!(text, "  {c:>8}").unwrap();
    }
    text.push('\n');
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["agent", "split"];
    header.extend(COLUMNS);
    w.write_record(&header)?;
    for r in reports {
        write!(text, "{:<agent_w$}  {:<split_w$}", r.agent, r.split).unwrap();
        let vals = row_values(&r.aggregate);
        for v in vals {
            write!(text, "  {v:>8.4}").unwrap();
        }
        text.push('\n');
        let mut rec = vec![r.agent.clone(), r.split.clone()];
        rec.extend(vals.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| MetricsError::Malformed(e.to_string()))?;
    Ok((text, String::from_utf8(bytes).expect("csv output is utf-8")))
}

pub fn parse_comparison_csv(text: &str) -> Result<Vec<ComparisonRow>, MetricsError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 8 {
            return Err(MetricsError::Malformed(format!("expected 8 fields, found {}", rec.len())));
        }
        let mut values = [0.0; 6];
        for (i, v) in values.iter_mut().enumerate() {
            *v = rec[i + 2].parse().map_err(|_| MetricsError::Malformed(format!("bad number {:?}", &rec[i + 2])))?;
        }
        rows.push(ComparisonRow { agent: rec[0].to_string(), split: rec[1].to_string(), values });
    }
    Ok(rows)
}
