//! Greedy layer ranking.
//!
//! Layers are ordered by how little the model's output degrades when a
//! reduction is applied to them. Each round tries every unranked layer on
//! top of the layers ranked so far and keeps the one that scores best; the
//! final order is the order layers should be reduced in.
//!
//! Scores come from an [`Oracle`]. The built-in [`DivergenceOracle`] measures
//! how far the reduced model's next-token distributions drift from the full
//! model's on a small validation batch.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::write_atomic;
use crate::model::{forward, Checkpoint, ModelError, Modality, TokenLayout};
use crate::numkernel::Matrix;
use crate::reductions::ReductionPlan;

/// Default penalty multiplier for score drops.
pub const DEFAULT_ALPHA: f64 = 2.0;

#[derive(Debug, Error)]
pub enum RankError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("invalid ranking request: {0}")]
    InvalidRequest(String),
    #[error("oracle failed after {} evaluations: {source}", partial.eval_log.len())]
    Aborted {
        partial: Box<RankingResult>,
        #[source]
        source: Box<RankError>,
    },
    #[error("oracle error: {0}")]
    Oracle(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchItem {
    pub ids: Vec<usize>,
    pub layout: TokenLayout,
    pub subset: String,
}

#[derive(Serialize, Deserialize)]
struct BatchRecord {
    ids: Vec<usize>,
    tags: Vec<Modality>,
    subset: String,
}

/// Small validation set, grouped into named subsets.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidationBatch {
    pub items: Vec<BatchItem>,
}

impl ValidationBatch {
    /// One `{ids, tags, subset}` JSON object per non-blank line.
    pub fn from_jsonl(text: &str, origin: &str) -> Result<Self, RankError> {
        let mut items = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: BatchRecord = serde_json::from_str(line).map_err(|e| RankError::Parse {
                path: origin.to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
            if rec.ids.len() != rec.tags.len() {
                return Err(RankError::Parse {
                    path: origin.to_string(),
                    line: i + 1,
                    message: format!("{} ids but {} tags", rec.ids.len(), rec.tags.len()),
                });
            }
            items.push(BatchItem {
                ids: rec.ids,
                layout: TokenLayout::new(rec.tags),
                subset: rec.subset,
            });
        }
        Ok(Self { items })
    }

    pub fn load(path: &Path) -> Result<Self, RankError> {
        let text = std::fs::read_to_string(path).map_err(|source| RankError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_jsonl(&text, &path.display().to_string())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for item in &self.items {
            let rec = BatchRecord {
                ids: item.ids.clone(),
                tags: item.layout.tags().to_vec(),
                subset: item.subset.clone(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), RankError> {
        write_atomic(path, self.to_jsonl().as_bytes()).map_err(|source| RankError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn validate(&self, vocab_size: usize) -> Result<(), RankError> {
        if self.items.is_empty() {
            return Err(RankError::InvalidBatch("batch has no items".into()));
        }
        for (i, item) in self.items.iter().enumerate() {
            if item.ids.is_empty() {
                return Err(RankError::InvalidBatch(format!("item {i} is empty")));
            }
            if let Some(&id) = item.ids.iter().find(|&&id| id >= vocab_size) {
                return Err(RankError::InvalidBatch(format!(
                    "item {i} has token id {id} outside vocabulary of {vocab_size}"
                )));
            }
        }
        Ok(())
    }

    pub fn subsets(&self) -> BTreeSet<&str> {
        self.items.iter().map(|i| i.subset.as_str()).collect()
    }

    /// Random token ids laid out as `[text][visual][text]`, `per_subset`
    /// items for each subset name.
    pub fn synthetic(
        vocab_size: usize,
        subsets: &[&str],
        per_subset: usize,
        (prefix, visual, suffix): (usize, usize, usize),
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = TokenLayout::prompt_image_question(prefix, visual, suffix);
        let mut items = Vec::with_capacity(subsets.len() * per_subset);
        for name in subsets {
            for _ in 0..per_subset {
                items.push(BatchItem {
                    ids: (0..layout.len()).map(|_| rng.random_range(0..vocab_size)).collect(),
                    layout: layout.clone(),
                    subset: (*name).to_string(),
                });
            }
        }
        Self { items }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleKind {
    #[default]
    Divergence,
    Plugin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub alpha: f64,
    pub oracle_kind: OracleKind,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            oracle_kind: OracleKind::Divergence,
        }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<(), RankError> {
        if self.alpha.is_nan() || self.alpha < 1.0 {
            return Err(RankError::InvalidRequest(format!(
                "alpha must be >= 1, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Score per subset name; higher is better.
pub type SubsetScores = BTreeMap<String, f64>;

/// Anything that can score a reduction plan on a validation set.
pub trait Oracle: Sync {
    fn evaluate(&self, plan: &ReductionPlan) -> Result<SubsetScores, RankError>;
}

impl<F> Oracle for F
where
    F: Fn(&ReductionPlan) -> Result<SubsetScores, RankError> + Sync,
{
    fn evaluate(&self, plan: &ReductionPlan) -> Result<SubsetScores, RankError> {
        self(plan)
    }
}

/// Sum of per-subset deltas where drops count `alpha` times.
pub fn penalty_score(deltas: &[f64], alpha: f64) -> f64 {
    deltas
        .iter()
        .map(|&d| if d >= 0.0 { d } else { alpha * d })
        .fold(0.0, |acc, v| acc + v)
}

/// Penalty score of `scores` against `baseline`, subsets in name order.
pub fn score_against(scores: &SubsetScores, baseline: &SubsetScores, alpha: f64) -> f64 {
    let deltas: Vec<f64> = scores
        .iter()
        .map(|(k, v)| v - baseline.get(k).copied().unwrap_or(0.0))
        .collect();
    penalty_score(&deltas, alpha)
}

/// Result of one divergence evaluation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DivergenceReport {
    /// `-(mean KL)` per subset.
    pub subset_scores: SubsetScores,
    /// Mean KL over every evaluated item.
    pub mean_divergence: f64,
}

/// KL(full ‖ reduced) of next-token distributions at text positions.
pub struct DivergenceOracle<'a> {
    ckpt: &'a Checkpoint,
    batch: &'a ValidationBatch,
    seed: u64,
    /// Full-model log-probabilities at text positions, per item; `None` for
    /// items that have no text position.
    reference: Vec<Option<Vec<Vec<f64>>>>,
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v - lse).collect()
}

fn kl(logp: &[f64], logq: &[f64]) -> f64 {
    logp.iter()
        .zip(logq)
        .map(|(&a, &b)| if a == b { 0.0 } else { a.exp() * (a - b) })
        .sum()
}

fn text_rows(logits: &Matrix, positions: &[usize], layout: &TokenLayout) -> Vec<Vec<f64>> {
    layout
        .text_positions()
        .into_iter()
        .map(|t| {
            let row = positions
                .binary_search(&t)
                .expect("text positions are never pruned");
            log_softmax(logits.row(row))
        })
        .collect()
}

impl<'a> DivergenceOracle<'a> {
    pub fn new(ckpt: &'a Checkpoint, batch: &'a ValidationBatch, seed: u64) -> Result<Self, RankError> {
        batch.validate(ckpt.config.vocab_size)?;
        let reference = batch
            .items
            .par_iter()
            .map(|item| -> Result<_, RankError> {
                if item.layout.n_text() == 0 {
                    return Ok(None);
                }
                let out = forward(ckpt, &item.ids, &item.layout, None, seed)?;
                Ok(Some(text_rows(&out.logits, &out.positions, &item.layout)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        for (i, r) in reference.iter().enumerate() {
            if r.is_none() {
                warn!("batch item {i} has no text positions; excluded from scoring");
            }
        }
        Ok(Self {
            ckpt,
            batch,
            seed,
            reference,
        })
    }

    /// Mean KL per item (`None` for excluded items).
    pub fn item_divergences(&self, plan: &ReductionPlan) -> Result<Vec<Option<f64>>, RankError> {
        self.batch
            .items
            .par_iter()
            .zip(&self.reference)
            .map(|(item, reference)| {
                let Some(reference) = reference else {
                    return Ok(None);
                };
                if plan.is_noop() {
                    return Ok(Some(0.0));
                }
                let out = forward(self.ckpt, &item.ids, &item.layout, Some(plan), self.seed)?;
                let reduced = text_rows(&out.logits, &out.positions, &item.layout);
                let total: f64 = reference.iter().zip(&reduced).map(|(p, q)| kl(p, q)).sum();
                Ok(Some(total / reference.len() as f64))
            })
            .collect()
    }

    pub fn report(&self, plan: &ReductionPlan) -> Result<DivergenceReport, RankError> {
        let divs = self.item_divergences(plan)?;
        let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for item in &self.batch.items {
            groups.entry(item.subset.as_str()).or_default();
        }
        let mut all = Vec::new();
        for (item, d) in self.batch.items.iter().zip(&divs) {
            if let Some(d) = d {
                groups.get_mut(item.subset.as_str()).expect("seeded").push(*d);
                all.push(*d);
            }
        }
        let mut subset_scores = SubsetScores::new();
        for (name, ds) in groups {
            if ds.is_empty() {
                warn!("subset `{name}` has no scorable items; excluded");
                continue;
            }
            subset_scores.insert(name.to_string(), 0.0 - ds.iter().sum::<f64>() / ds.len() as f64);
        }
        let mean_divergence = if all.is_empty() {
            0.0
        } else {
            all.iter().sum::<f64>() / all.len() as f64
        };
        Ok(DivergenceReport {
            subset_scores,
            mean_divergence,
        })
    }
}

impl Oracle for DivergenceOracle<'_> {
    fn evaluate(&self, plan: &ReductionPlan) -> Result<SubsetScores, RankError> {
        Ok(self.report(plan)?.subset_scores)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankTarget {
    Attention,
    Ffn,
}

impl std::fmt::Display for RankTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RankTarget::Attention => "attention",
            RankTarget::Ffn => "ffn",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    /// Layers reduced in this evaluation, in ranking order with the
    /// candidate last.
    pub layers: Vec<usize>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub target: RankTarget,
    /// Most redundant layer first.
    pub ranked: Vec<usize>,
    /// Number of deepest layers ranked by position rather than search.
    #[serde(rename = "L_p")]
    pub l_p: usize,
    pub eval_log: Vec<EvalEntry>,
    /// Whether the other target's reductions were active while searching.
    #[serde(default)]
    pub other_target_reduced: bool,
}

impl RankingResult {
    pub fn load(path: &Path) -> Result<Self, RankError> {
        let text = std::fs::read_to_string(path).map_err(|source| RankError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| RankError::Parse {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("ranking serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), RankError> {
        write_atomic(path, self.to_json().as_bytes()).map_err(|source| RankError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Evaluations grouped by round: the round-`r` entries all share the
    /// same `layers` prefix of length `pre_ranked + r`.
    pub fn rounds(&self) -> Vec<&[EvalEntry]> {
        let mut out = Vec::new();
        let mut rest = &self.eval_log[..];
        while let Some(first) = rest.first() {
            let len = first.layers.len();
            let n = rest.iter().take_while(|e| e.layers.len() == len).count();
            out.push(&rest[..n]);
            rest = &rest[n..];
        }
        out
    }
}

/// Plan used to score `layers` for `target`: the template with the target's
/// layer set replaced, the other target switched off, and probes on every
/// in-scope token.
pub fn search_plan(template: &ReductionPlan, target: RankTarget, layers: &[usize]) -> ReductionPlan {
    let set: BTreeSet<usize> = layers.iter().copied().collect();
    let mut plan = template.clone();
    plan.probe_fraction = 1.0;
    match target {
        RankTarget::Attention => {
            plan.attn_layers = set;
            plan.ffn_layers.clear();
        }
        RankTarget::Ffn => {
            plan.ffn_layers = set;
            plan.attn_layers.clear();
        }
    }
    plan
}

/// Greedy rounds over `search_space`, with `pre_ranked` already reduced in
/// every evaluation. Candidates in a round run in parallel; the winner is
/// the highest score, ties going to the lower layer index.
pub fn greedy_search<F>(
    target: RankTarget,
    pre_ranked: Vec<usize>,
    search_space: &[usize],
    score: F,
) -> Result<RankingResult, RankError>
where
    F: Fn(&[usize]) -> Result<f64, RankError> + Sync,
{
    let l_p = pre_ranked.len();
    let mut result = RankingResult {
        target,
        ranked: pre_ranked,
        l_p,
        eval_log: Vec::new(),
        other_target_reduced: false,
    };
    let mut unranked: Vec<usize> = search_space.to_vec();
    unranked.sort_unstable();
    unranked.dedup();

    while !unranked.is_empty() {
        let sets: Vec<Vec<usize>> = unranked
            .iter()
            .map(|&layer| {
                let mut s = result.ranked.clone();
                s.push(layer);
                s
            })
            .collect();
        let scores: Vec<Result<f64, RankError>> = sets.par_iter().map(|s| score(s)).collect();

        let mut best: Option<(usize, f64)> = None;
        for (i, (set, outcome)) in sets.into_iter().zip(scores).enumerate() {
            match outcome {
                Ok(v) => {
                    result.eval_log.push(EvalEntry { layers: set, score: v });
                    if best.is_none_or(|(_, b)| v > b) {
                        best = Some((i, v));
                    }
                }
                Err(e) => {
                    return Err(RankError::Aborted {
                        partial: Box::new(result),
                        source: Box::new(e),
                    })
                }
            }
        }
        let (idx, _) = best.expect("round has candidates");
        result.ranked.push(unranked.remove(idx));
    }
    Ok(result)
}

/// Greedy ranking of `search_space` for one reduction target.
pub fn rank_layers(
    oracle: &dyn Oracle,
    target: RankTarget,
    search_space: &[usize],
    template: &ReductionPlan,
    score_cfg: &ScoreConfig,
) -> Result<RankingResult, RankError> {
    if search_space.is_empty() {
        return Err(RankError::InvalidRequest("search space is empty".into()));
    }
    ranked_search(oracle, target, Vec::new(), search_space, template, score_cfg)
}

fn ranked_search(
    oracle: &dyn Oracle,
    target: RankTarget,
    pre_ranked: Vec<usize>,
    search_space: &[usize],
    template: &ReductionPlan,
    score_cfg: &ScoreConfig,
) -> Result<RankingResult, RankError> {
    score_cfg.validate()?;
    if search_space.is_empty() {
        return greedy_search(target, pre_ranked, search_space, |_| Ok(0.0));
    }
    let baseline = oracle.evaluate(&search_plan(template, target, &[]))?;
    greedy_search(target, pre_ranked, search_space, |layers| {
        let scores = oracle.evaluate(&search_plan(template, target, layers))?;
        Ok(score_against(&scores, &baseline, score_cfg.alpha))
    })
}

/// The deepest `l_p` layers first, deepest leading, then a greedy search
/// over layers `0..n_layers - l_p` with those already reduced.
pub fn hybrid_ranking(
    oracle: &dyn Oracle,
    target: RankTarget,
    n_layers: usize,
    l_p: usize,
    template: &ReductionPlan,
    score_cfg: &ScoreConfig,
) -> Result<RankingResult, RankError> {
    if l_p > n_layers {
        return Err(RankError::InvalidRequest(format!(
            "L_p = {l_p} exceeds the {n_layers} layers"
        )));
    }
    let pre: Vec<usize> = (n_layers - l_p..n_layers).rev().collect();
    let space: Vec<usize> = (0..n_layers - l_p).collect();
    ranked_search(oracle, target, pre, &space, template, score_cfg)
}

pub fn default_l_p(n_layers: usize) -> usize {
    n_layers / 4
}

/// Plan reducing the top `round(p · L)` layers of each supplied ranking.
pub fn plan_for_fraction(
    attention: Option<&RankingResult>,
    ffn: Option<&RankingResult>,
    fraction: f64,
    n_layers: usize,
    template: &ReductionPlan,
) -> ReductionPlan {
    let count = ((fraction * n_layers as f64).round() as usize).min(n_layers);
    let top = |r: Option<&RankingResult>| -> BTreeSet<usize> {
        r.map(|r| r.ranked.iter().take(count).copied().collect())
            .unwrap_or_default()
    };
    ReductionPlan {
        attn_layers: top(attention),
        ffn_layers: top(ffn),
        ..template.clone()
    }
}
