//! Analytic floating-point-operation counts.
//!
//! One multiply-accumulate counts as 2 FLOPs; biases, norms and softmax are
//! ignored. Per layer with `n` live tokens, model width `d` and FFN width `f`:
//!
//! * `attn_proj = 8·n·d²` for the Q, K, V and O projections,
//! * `attn_core = 4·d·pairs`, `pairs` being the allowed query–key pairs of
//!   that layer's mask (QKᵀ plus PV),
//! * `ffn = c·n_full·d·f + c·n_red·d·K` with `c = 4` (two matrices) or
//!   `6` (gate, up, down),
//! * `probe_overhead = c'·M·d·f` on reduced FFN layers, `c' = 2` or `4`
//!   (probes only run up to the hidden layer).

use serde::Serialize;

use crate::model::{FfnKind, ModelConfig, Modality, TokenLayout};
use crate::numkernel::AttentionMask;
use crate::reductions::{hollow_mask_scoped, pruned_visual_count, scope_rows, ReductionPlan, Scope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct LayerFlops {
    pub live_tokens: usize,
    pub attn_proj: u64,
    pub attn_core: u64,
    pub ffn: u64,
    pub probe_overhead: u64,
}

impl LayerFlops {
    pub fn total(&self) -> u64 {
        self.attn_proj + self.attn_core + self.ffn + self.probe_overhead
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopsBreakdown {
    pub per_layer: Vec<LayerFlops>,
    pub total: u64,
    /// Total of the same config and layout with no plan.
    pub full_total: u64,
    pub ratio_vs_full: f64,
    /// Ratio when probe overhead is left out of the count.
    pub ratio_without_probe: f64,
}

impl FlopsBreakdown {
    pub fn probe_total(&self) -> u64 {
        self.per_layer.iter().map(|l| l.probe_overhead).sum()
    }
}

pub fn mask_pair_count(mask: &AttentionMask) -> usize {
    mask.pair_count()
}

/// Allowed pairs of the visual-only hollow mask from the row law: a visual
/// query at ordinal `j` sees the earlier text keys, `min(j, R_A)` earlier
/// visual keys and itself; a text query at position `q` sees `q + 1` keys.
pub fn hollow_pairs_closed_form(layout: &TokenLayout, attention_range: usize) -> usize {
    let mut text_seen = 0;
    let mut visual_seen = 0;
    let mut pairs = 0;
    for (q, tag) in layout.tags().iter().enumerate() {
        match tag {
            Modality::Text => {
                text_seen += 1;
                pairs += q + 1;
            }
            Modality::Visual => {
                pairs += text_seen + visual_seen.min(attention_range) + 1;
                visual_seen += 1;
            }
        }
    }
    pairs
}

fn causal_pairs(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Layout left after pruning for counting purposes: every text tag plus the
/// first `ceil(keep_ratio · n_visual)` visual tags. For a contiguous visual
/// block the count does not depend on which visual tokens actually survive.
pub fn pruned_layout(layout: &TokenLayout, keep_ratio: f64) -> TokenLayout {
    let keep = pruned_visual_count(layout.n_visual(), keep_ratio);
    let mut seen = 0;
    let kept: Vec<usize> = (0..layout.len())
        .filter(|&p| {
            if layout.is_visual(p) {
                seen += 1;
                seen <= keep
            } else {
                true
            }
        })
        .collect();
    layout.subset(&kept)
}

fn layer_counts(cfg: &ModelConfig, layout: &TokenLayout, plan: Option<&ReductionPlan>) -> Vec<LayerFlops> {
    let d = cfg.d_model as u64;
    let f = cfg.d_ff as u64;
    let (c_ffn, c_probe) = match cfg.ffn_kind {
        FfnKind::Vanilla => (4, 2),
        FfnKind::Gated => (6, 4),
    };
    let mut live = layout.clone();
    let mut hollow_cache: Option<(Scope, usize, usize)> = None;
    let mut out = Vec::with_capacity(cfg.n_layers);
    for li in 0..cfg.n_layers {
        let n = live.len() as u64;
        let pairs = match plan {
            Some(p) if p.attn_layers.contains(&li) => match hollow_cache {
                Some((s, r, count)) if s == p.scope && r == p.attention_range => count,
                _ => {
                    let count = hollow_mask_scoped(&live, p.attention_range, p.scope).pair_count();
                    hollow_cache = Some((p.scope, p.attention_range, count));
                    count
                }
            },
            _ => causal_pairs(live.len()),
        } as u64;

        let (ffn, probe) = match plan {
            Some(p) if p.ffn_layers.contains(&li) => {
                let n_red = scope_rows(&live, p.scope).len() as u64;
                let k = p.k_count(cfg.d_ff) as u64;
                let m = if n_red > 0 {
                    p.probe_count(n_red as usize) as u64
                } else {
                    0
                };
                (
                    c_ffn * (n - n_red) * d * f + c_ffn * n_red * d * k,
                    c_probe * m * d * f,
                )
            }
            _ => (c_ffn * n * d * f, 0),
        };

        out.push(LayerFlops {
            live_tokens: live.len(),
            attn_proj: 8 * n * d * d,
            attn_core: 4 * d * pairs,
            ffn,
            probe_overhead: probe,
        });

        if let Some(pr) = plan.and_then(|p| p.pruning).filter(|pr| pr.at_layer == li) {
            live = pruned_layout(&live, pr.keep_ratio);
            hollow_cache = None;
        }
    }
    out
}

pub fn count_flops(cfg: &ModelConfig, layout: &TokenLayout, plan: Option<&ReductionPlan>) -> FlopsBreakdown {
    let per_layer = layer_counts(cfg, layout, plan);
    let total: u64 = per_layer.iter().map(LayerFlops::total).sum();
    let full_total: u64 = if plan.is_some() {
        layer_counts(cfg, layout, None).iter().map(LayerFlops::total).sum()
    } else {
        total
    };
    let probe: u64 = per_layer.iter().map(|l| l.probe_overhead).sum();
    FlopsBreakdown {
        ratio_vs_full: total as f64 / full_total as f64,
        ratio_without_probe: (total - probe) as f64 / full_total as f64,
        per_layer,
        total,
        full_total,
    }
}

/// Human-readable per-layer table.
pub fn render_table(b: &FlopsBreakdown) -> String {
    use std::fmt::Write;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>5} {:>7} {:>16} {:>16} {:>16} {:>16} {:>16}",
        "layer", "tokens", "attn_proj", "attn_core", "ffn", "probe", "total"
    );
    for (i, l) in b.per_layer.iter().enumerate() {
        let _ = writeln!(
            s,
            "{:>5} {:>7} {:>16} {:>16} {:>16} {:>16} {:>16}",
            i,
            l.live_tokens,
            l.attn_proj,
            l.attn_core,
            l.ffn,
            l.probe_overhead,
            l.total()
        );
    }
    let _ = writeln!(s, "total {}  full {}", b.total, b.full_total);
    let _ = writeln!(s, "ratio_vs_full {:.4}", b.ratio_vs_full);
    if (b.ratio_vs_full - b.ratio_without_probe).abs() > 0.005 {
        let _ = writeln!(s, "ratio_without_probe {:.4}", b.ratio_without_probe);
    }
    s
}

/// Reference scenario: a 32-layer gated 4096/14336 model on 3072 visual and
/// 128 text tokens (64 before the image, 64 after), attention reduced on 16
/// layers and FFN on 17, R_A = 256, K = 20%, probes on 10%. The reduced
/// layers are the deepest ones; the count does not depend on that choice.
pub fn internvl2_table1_preset() -> (ModelConfig, TokenLayout, ReductionPlan) {
    let cfg = ModelConfig {
        n_layers: 32,
        d_model: 4096,
        d_ff: 14336,
        n_heads: 32,
        ffn_kind: FfnKind::Gated,
        vocab_size: 92553,
        activation: crate::numkernel::Activation::Silu,
    };
    let layout = TokenLayout::prompt_image_question(64, 3072, 64);
    let plan = ReductionPlan {
        attn_layers: (16..32).collect(),
        ffn_layers: (15..32).collect(),
        attention_range: 256,
        k_fraction: 0.2,
        probe_fraction: 0.1,
        scope: Scope::VisualOnly,
        pruning: None,
    };
    (cfg, layout, plan)
}
