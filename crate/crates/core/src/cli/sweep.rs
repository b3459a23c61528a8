//! Reduction sweeps: score and FLOPs-count the plan for every (target,
//! layer fraction) pair and tabulate the results.

use std::fmt::Write as _;

use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};

use crate::flops::count_flops;
use crate::model::Checkpoint;
use crate::ranker::{plan_for_fraction, score_against, DivergenceOracle, RankingResult, ValidationBatch};
use crate::reductions::{ReductionPlan, Scope};

pub const CSV_HEADER: &str = "fraction,target,scope,divergence,penalty_score,flops_ratio";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepTarget {
    Attention,
    Ffn,
    Both,
}

impl std::fmt::Display for SweepTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepTarget::Attention => "attention",
            SweepTarget::Ffn => "ffn",
            SweepTarget::Both => "both",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub targets: Vec<SweepTarget>,
    pub fractions: Vec<f64>,
    pub scope: Scope,
    pub alpha: f64,
    pub seed: u64,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            bail!("sweep needs at least one target");
        }
        if self.fractions.is_empty() {
            bail!("sweep needs at least one fraction");
        }
        if self.fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            bail!("fractions must lie in [0, 1]");
        }
        if self.fractions.windows(2).any(|w| w[0] > w[1]) {
            bail!("fractions must be sorted ascending");
        }
        Ok(())
    }
}

/// `0, 1/L, 2/L, ..., 1`.
pub fn default_fractions(n_layers: usize) -> Vec<f64> {
    (0..=n_layers).map(|i| i as f64 / n_layers as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub target: SweepTarget,
    pub scope: Scope,
    pub divergence: f64,
    pub penalty_score: f64,
    pub flops_ratio: f64,
}

/// Scores and FLOPs ratio of one plan over a batch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanEvaluation {
    pub subset_scores: std::collections::BTreeMap<String, f64>,
    pub divergence: f64,
    pub penalty_score: f64,
    pub flops_ratio: f64,
}

/// Shared by `sweep` and `eval` so both report identical numbers.
pub fn evaluate_plan(
    ckpt: &Checkpoint,
    batch: &ValidationBatch,
    oracle: &DivergenceOracle<'_>,
    plan: &ReductionPlan,
    alpha: f64,
) -> Result<PlanEvaluation> {
    let report = oracle.report(plan)?;
    // the unreduced model scores 0 on every subset
    let baseline = report
        .subset_scores
        .keys()
        .map(|k| (k.clone(), 0.0))
        .collect();
    let penalty_score = score_against(&report.subset_scores, &baseline, alpha);
    let (mut reduced, mut full) = (0u128, 0u128);
    for item in &batch.items {
        let b = count_flops(&ckpt.config, &item.layout, Some(plan));
        reduced += b.total as u128;
        full += b.full_total as u128;
    }
    Ok(PlanEvaluation {
        subset_scores: report.subset_scores,
        divergence: report.mean_divergence,
        penalty_score,
        flops_ratio: reduced as f64 / full as f64,
    })
}

pub fn run_sweep(
    ckpt: &Checkpoint,
    batch: &ValidationBatch,
    attention: Option<&RankingResult>,
    ffn: Option<&RankingResult>,
    template: &ReductionPlan,
    spec: &SweepSpec,
) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let n_layers = ckpt.config.n_layers;
    for (name, r) in [("attention", attention), ("ffn", ffn)] {
        if let Some(r) = r {
            let mut sorted = r.ranked.clone();
            sorted.sort_unstable();
            if sorted != (0..n_layers).collect::<Vec<_>>() {
                bail!("{name} ranking does not cover the model's {n_layers} layers");
            }
        }
    }
    let oracle = DivergenceOracle::new(ckpt, batch, spec.seed)?;
    let template = ReductionPlan {
        scope: spec.scope,
        ..template.clone()
    };
    let mut rows = Vec::new();
    for &target in &spec.targets {
        let (a, f) = match target {
            SweepTarget::Attention => (Some(attention), None),
            SweepTarget::Ffn => (None, Some(ffn)),
            SweepTarget::Both => (Some(attention), Some(ffn)),
        };
        let a = need(a, target, "attention")?;
        let f = need(f, target, "ffn")?;
        for &fraction in &spec.fractions {
            let plan = plan_for_fraction(a, f, fraction, n_layers, &template);
            let ev = evaluate_plan(ckpt, batch, &oracle, &plan, spec.alpha)?;
            rows.push(SweepRow {
                fraction,
                target,
                scope: spec.scope,
                divergence: ev.divergence,
                penalty_score: ev.penalty_score,
                flops_ratio: ev.flops_ratio,
            });
        }
    }
    Ok(rows)
}

fn need<'r>(
    r: Option<Option<&'r RankingResult>>,
    target: SweepTarget,
    what: &str,
) -> Result<Option<&'r RankingResult>> {
    match r {
        None => Ok(None),
        Some(Some(r)) => Ok(Some(r)),
        Some(None) => bail!("target `{target}` needs a {what} ranking"),
    }
}

/// Header plus one line per row; floats use the shortest round-trip form.
pub fn to_csv(rows: &[SweepRow]) -> String {
    let mut s = String::new();
    s.push_str(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.fraction, r.target, r.scope, r.divergence, r.penalty_score, r.flops_ratio
        );
    }
    s
}

/// Parses a CSV produced by [`to_csv`].
pub fn parse_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => bail!("unexpected sweep CSV header: {other:?}"),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            bail!("line {}: expected 6 fields, got {}", i + 2, f.len());
        }
        let enum_field = |s: &str| serde_json::Value::String(s.to_string());
        rows.push(SweepRow {
            fraction: f[0].parse()?,
            target: serde_json::from_value(enum_field(f[1]))?,
            scope: serde_json::from_value(enum_field(f[2]))?,
            divergence: f[3].parse()?,
            penalty_score: f[4].parse()?,
            flops_ratio: f[5].parse()?,
        });
    }
    Ok(rows)
}
