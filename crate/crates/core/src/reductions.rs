//! Per-token computation reductions for visual tokens.
//!
//! * Probe-activated dynamic FFN: a few randomly sampled rows ("probes") run
//!   the full FFN; the `K` hidden units with the largest mean absolute
//!   activation over the probes are the only ones the remaining rows use.
//! * Hollow attention: visual queries keep every causally visible text key
//!   but only a short look-back window over visual keys. Text queries are
//!   untouched.
//! * FastV-style pruning: drop the visual positions that receive the least
//!   attention at one layer.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{FfnWeights, TokenLayout};
use crate::numkernel::{Activation, AttentionMask, KernelError, Matrix};

/// Full-size model defaults: one sub-image worth of visual look-back, 20% of the
/// hidden units, probes on 10% of the visual tokens.
pub const DEFAULT_ATTENTION_RANGE: usize = 256;
pub const DEFAULT_K_FRACTION: f64 = 0.2;
pub const DEFAULT_PROBE_FRACTION: f64 = 0.1;

// Keeps ceil() from rounding 0.1 * 30 = 3.0000000000000004 up to 4.
const CEIL_SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReductionError {
    #[error("plan references layer {layer} but the model has {n_layers} layers")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("invalid reduction parameter: {0}")]
    Param(String),
    #[error("selection index {index} out of range for d_ff = {d_ff}")]
    SelectionOutOfRange { index: usize, d_ff: usize },
    #[error("selection indices must be strictly increasing")]
    SelectionOrder,
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    #[default]
    VisualOnly,
    AllTokens,
}

impl std::fmt::Display for Scope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scope::VisualOnly => "visual_only",
            Scope::AllTokens => "all_tokens",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pruning {
    pub at_layer: usize,
    pub keep_ratio: f64,
}

/// Which layers get which reduction, and with what parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReductionPlan {
    #[serde(default)]
    pub attn_layers: BTreeSet<usize>,
    #[serde(default)]
    pub ffn_layers: BTreeSet<usize>,
    #[serde(rename = "R_A", default = "default_range")]
    pub attention_range: usize,
    #[serde(default = "default_k")]
    pub k_fraction: f64,
    #[serde(default = "default_probe")]
    pub probe_fraction: f64,
    #[serde(default)]
    pub scope: Scope,
    #[serde(default)]
    pub pruning: Option<Pruning>,
}

fn default_range() -> usize {
    DEFAULT_ATTENTION_RANGE
}
fn default_k() -> f64 {
    DEFAULT_K_FRACTION
}
fn default_probe() -> f64 {
    DEFAULT_PROBE_FRACTION
}

impl Default for ReductionPlan {
    fn default() -> Self {
        Self {
            attn_layers: BTreeSet::new(),
            ffn_layers: BTreeSet::new(),
            attention_range: DEFAULT_ATTENTION_RANGE,
            k_fraction: DEFAULT_K_FRACTION,
            probe_fraction: DEFAULT_PROBE_FRACTION,
            scope: Scope::VisualOnly,
            pruning: None,
        }
    }
}

impl ReductionPlan {
    pub fn validate(&self, n_layers: usize) -> Result<(), ReductionError> {
        let layers = self
            .attn_layers
            .iter()
            .chain(&self.ffn_layers)
            .chain(self.pruning.as_ref().map(|p| &p.at_layer));
        for &layer in layers {
            if layer >= n_layers {
                return Err(ReductionError::LayerOutOfRange { layer, n_layers });
            }
        }
        if self.attention_range < 1 {
            return Err(ReductionError::Param("R_A must be at least 1".into()));
        }
        let in_unit = |v: f64| v > 0.0 && v <= 1.0;
        if !in_unit(self.k_fraction) {
            return Err(ReductionError::Param(format!(
                "k_fraction {} not in (0, 1]",
                self.k_fraction
            )));
        }
        if !in_unit(self.probe_fraction) {
            return Err(ReductionError::Param(format!(
                "probe_fraction {} not in (0, 1]",
                self.probe_fraction
            )));
        }
        if let Some(p) = &self.pruning {
            if !in_unit(p.keep_ratio) {
                return Err(ReductionError::Param(format!(
                    "keep_ratio {} not in (0, 1]",
                    p.keep_ratio
                )));
            }
        }
        Ok(())
    }

    /// True when the plan cannot change any output.
    pub fn is_noop(&self) -> bool {
        self.attn_layers.is_empty() && self.ffn_layers.is_empty() && self.pruning.is_none()
    }

    /// Number of hidden units kept, `ceil(k_fraction · d_ff)`.
    pub fn k_count(&self, d_ff: usize) -> usize {
        ceil_count(self.k_fraction, d_ff).clamp(1, d_ff.max(1))
    }

    /// Number of probe rows among `n` candidates, `max(1, ceil(M_frac · n))`.
    pub fn probe_count(&self, n: usize) -> usize {
        ceil_count(self.probe_fraction, n).clamp(1, n.max(1))
    }
}

pub(crate) fn ceil_count(fraction: f64, n: usize) -> usize {
    (fraction * n as f64 - CEIL_SLACK).ceil().max(0.0) as usize
}

/// Ascending set of active hidden-unit indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection(Vec<usize>);

impl Selection {
    pub fn new(indices: Vec<usize>, d_ff: usize) -> Result<Self, ReductionError> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ReductionError::SelectionOrder);
        }
        if let Some(&index) = indices.iter().find(|&&i| i >= d_ff) {
            return Err(ReductionError::SelectionOutOfRange { index, d_ff });
        }
        Ok(Self(indices))
    }

    pub fn all(d_ff: usize) -> Self {
        Self((0..d_ff).collect())
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Indices of the `k` largest entries, ties toward the lower index, returned
/// ascending.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Mean over rows of `|h|`, column by column.
pub fn mean_abs_columns(h: &Matrix) -> Vec<f64> {
    let mut acc = vec![0.0; h.cols()];
    for r in 0..h.rows() {
        for (a, v) in acc.iter_mut().zip(h.row(r)) {
            *a += v.abs();
        }
    }
    let m = h.rows() as f64;
    acc.iter_mut().for_each(|a| *a /= m);
    acc
}

/// Samples `m` of the rows of `x` without replacement, runs them through the
/// full FFN up to the hidden layer and keeps the `k` units with the largest
/// mean absolute activation.
///
/// Sampled rows are processed in ascending row order, so with `m == rows`
/// the result does not depend on `rng` at all.
pub fn probe_select<R: Rng + ?Sized>(
    x: &Matrix,
    ffn: &FfnWeights,
    act: Activation,
    m: usize,
    k: usize,
    rng: &mut R,
) -> Result<Selection, ReductionError> {
    let n = x.rows();
    let d_ff = ffn.d_ff();
    if m < 1 || m > n {
        return Err(ReductionError::Param(format!(
            "probe count {m} not in [1, {n}]"
        )));
    }
    if k < 1 || k > d_ff {
        return Err(ReductionError::Param(format!(
            "K = {k} not in [1, {d_ff}]"
        )));
    }
    let mut rows = rand::seq::index::sample(rng, n, m).into_vec();
    rows.sort_unstable();
    let hidden = ffn.hidden(&x.select_rows(&rows), act)?;
    let stat = mean_abs_columns(&hidden);
    Ok(Selection(top_k(&stat, k)))
}

/// FFN restricted to the selected hidden units.
pub fn dynamic_ffn_forward(
    x: &Matrix,
    ffn: &FfnWeights,
    act: Activation,
    sel: &Selection,
) -> Result<Matrix, ReductionError> {
    let d_ff = ffn.d_ff();
    if let Some(&index) = sel.indices().iter().find(|&&i| i >= d_ff) {
        return Err(ReductionError::SelectionOutOfRange { index, d_ff });
    }
    Ok(ffn.slice_hidden(sel.indices()).forward(x, act)?)
}

/// Independent probe stream for one layer of one forward pass.
pub fn layer_rng(seed: u64, layer: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(layer as u64);
    rng
}

/// Visual ordinal of each position (`None` for text).
fn visual_ordinals(layout: &TokenLayout) -> Vec<Option<usize>> {
    let mut next = 0;
    (0..layout.len())
        .map(|pos| {
            layout.is_visual(pos).then(|| {
                next += 1;
                next - 1
            })
        })
        .collect()
}

/// Hollow attention over `layout`: a visual query at visual ordinal `j`
/// keeps the causally earlier text keys and the visual keys with ordinals
/// `j - R_A ..= j`. Text rows are plain causal.
pub fn hollow_mask(layout: &TokenLayout, attention_range: usize) -> AttentionMask {
    hollow_mask_scoped(layout, attention_range, Scope::VisualOnly)
}

/// Like [`hollow_mask`], but with [`Scope::AllTokens`] text queries are
/// windowed as well: a text query preceded by `c` visual tokens keeps only
/// the visual keys with ordinals `c - R_A .. c`.
pub fn hollow_mask_scoped(layout: &TokenLayout, attention_range: usize, scope: Scope) -> AttentionMask {
    let ord = visual_ordinals(layout);
    // visual tokens strictly before each position
    let mut before = Vec::with_capacity(layout.len());
    let mut c = 0;
    for o in &ord {
        before.push(c);
        if o.is_some() {
            c += 1;
        }
    }
    AttentionMask::from_fn(layout.len(), |q, k| {
        let Some(kj) = ord[k] else { return true };
        match ord[q] {
            Some(qj) => qj - kj <= attention_range,
            None => match scope {
                Scope::VisualOnly => true,
                Scope::AllTokens => kj + attention_range >= before[q],
            },
        }
    })
}

/// Rows a reduction applies to.
pub fn scope_rows(layout: &TokenLayout, scope: Scope) -> Vec<usize> {
    match scope {
        Scope::VisualOnly => layout.visual_positions(),
        Scope::AllTokens => (0..layout.len()).collect(),
    }
}

/// Number of visual tokens that survive pruning.
pub fn pruned_visual_count(n_visual: usize, keep_ratio: f64) -> usize {
    ceil_count(keep_ratio, n_visual).min(n_visual)
}

/// Keeps every text position plus the `ceil(keep_ratio · n_visual)` visual
/// positions that receive the most attention (ties toward the lower
/// position). Returns kept positions ascending.
pub fn fastv_prune(attention_received: &[f64], layout: &TokenLayout, keep_ratio: f64) -> Vec<usize> {
    assert_eq!(attention_received.len(), layout.len());
    let mut visual = layout.visual_positions();
    let keep = pruned_visual_count(visual.len(), keep_ratio);
    visual.sort_by(|&a, &b| {
        attention_received[b]
            .total_cmp(&attention_received[a])
            .then(a.cmp(&b))
    });
    visual.truncate(keep);
    let mut kept = layout.text_positions();
    kept.extend(visual);
    kept.sort_unstable();
    kept
}
