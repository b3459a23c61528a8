use super::{Checkpoint, LayerWeights, ModelError, TokenLayout};
use crate::numkernel::{matmul, masked_softmax_rows, rms_norm, AttentionMask, Matrix};
use crate::reductions::{
    dynamic_ffn_forward, fastv_prune, hollow_mask_scoped, layer_rng, probe_select, scope_rows,
    ReductionPlan,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// One row per surviving position.
    pub logits: Matrix,
    /// Original position of each logits row; all positions unless the plan prunes.
    pub positions: Vec<usize>,
    /// Per layer, the attention each live key received, averaged over heads
    /// and queries. Only filled when requested.
    pub attention_received: Option<Vec<Vec<f64>>>,
}

/// Single prefill pass. `seed` only drives probe sampling.
pub fn forward(
    ckpt: &Checkpoint,
    token_ids: &[usize],
    layout: &TokenLayout,
    plan: Option<&ReductionPlan>,
    seed: u64,
) -> Result<ForwardOutput, ModelError> {
    forward_with(ckpt, token_ids, layout, plan, seed, false)
}

pub fn forward_with(
    ckpt: &Checkpoint,
    token_ids: &[usize],
    layout: &TokenLayout,
    plan: Option<&ReductionPlan>,
    seed: u64,
    record_attention: bool,
) -> Result<ForwardOutput, ModelError> {
    let cfg = &ckpt.config;
    if token_ids.len() != layout.len() {
        return Err(ModelError::LengthMismatch {
            ids: token_ids.len(),
            layout: layout.len(),
        });
    }
    if token_ids.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    if let Some((pos, &id)) = token_ids
        .iter()
        .enumerate()
        .find(|(_, &id)| id >= cfg.vocab_size)
    {
        return Err(ModelError::TokenOutOfRange {
            pos,
            id,
            vocab: cfg.vocab_size,
        });
    }
    if let Some(p) = plan {
        p.validate(cfg.n_layers)?;
    }

    let d = cfg.d_model;
    let mut x = Matrix::zeros(token_ids.len(), d);
    for (pos, &id) in token_ids.iter().enumerate() {
        let tag = ckpt.modality_embedding.row(layout.get(pos).embedding_row());
        for ((o, e), m) in x.row_mut(pos).iter_mut().zip(ckpt.embedding.row(id)).zip(tag) {
            *o = e + m;
        }
    }

    let mut positions: Vec<usize> = (0..token_ids.len()).collect();
    let mut live = layout.clone();
    let mut recorded = record_attention.then(Vec::new);

    for (li, layer) in ckpt.layers.iter().enumerate() {
        let prune = plan.and_then(|p| p.pruning.filter(|pr| pr.at_layer == li));

        let mask = match plan {
            Some(p) if p.attn_layers.contains(&li) => {
                hollow_mask_scoped(&live, p.attention_range, p.scope)
            }
            _ => AttentionMask::causal(live.len()),
        };
        let xn = rms_norm(&x, &layer.attn_norm)?;
        let (attn, received) = attention(layer, &xn, &mask, cfg.n_heads, recorded.is_some() || prune.is_some())?;
        x.add_assign(&attn)?;

        let xn = rms_norm(&x, &layer.ffn_norm)?;
        let y = match plan {
            Some(p) if p.ffn_layers.contains(&li) => reduced_ffn(layer, &xn, &live, p, cfg.activation, seed, li)?,
            _ => layer.ffn.forward(&xn, cfg.activation)?,
        };
        x.add_assign(&y)?;

        if let Some(pr) = prune {
            let received = received.as_deref().expect("computed when pruning");
            let kept = fastv_prune(received, &live, pr.keep_ratio);
            x = x.select_rows(&kept);
            positions = kept.iter().map(|&i| positions[i]).collect();
            live = live.subset(&kept);
        }
        if let (Some(rec), Some(r)) = (recorded.as_mut(), received) {
            rec.push(r);
        }
    }

    let xn = rms_norm(&x, &ckpt.final_norm)?;
    let logits = matmul(&xn, &ckpt.output)?;
    Ok(ForwardOutput {
        logits,
        positions,
        attention_received: recorded,
    })
}

/// Multi-head attention under `mask`, followed by the output projection.
fn attention(
    layer: &LayerWeights,
    xn: &Matrix,
    mask: &AttentionMask,
    n_heads: usize,
    want_received: bool,
) -> Result<(Matrix, Option<Vec<f64>>), ModelError> {
    let n = xn.rows();
    let d = xn.cols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = matmul(xn, &layer.wq)?;
    let k = matmul(xn, &layer.wk)?;
    let v = matmul(xn, &layer.wv)?;

    let mut concat = Matrix::zeros(n, d);
    let mut received = want_received.then(|| vec![0.0; n]);
    for h in 0..n_heads {
        let cols = h * dh..(h + 1) * dh;
        let mut scores = Matrix::zeros(n, n);
        for qi in 0..n {
            let qrow = &q.row(qi)[cols.clone()];
            for ki in 0..=qi {
                if mask.allowed(qi, ki) {
                    let krow = &k.row(ki)[cols.clone()];
                    let dot: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum();
                    scores.set(qi, ki, dot * scale);
                }
            }
        }
        let probs = masked_softmax_rows(&scores, mask)?;
        let out = matmul(&probs, &v.col_block(h * dh, dh))?;
        for r in 0..n {
            concat.row_mut(r)[cols.clone()].copy_from_slice(out.row(r));
        }
        if let Some(acc) = received.as_mut() {
            for qi in 0..n {
                for (a, p) in acc.iter_mut().zip(probs.row(qi)) {
                    *a += p;
                }
            }
        }
    }
    if let Some(acc) = received.as_mut() {
        let denom = (n_heads * n) as f64;
        acc.iter_mut().for_each(|a| *a /= denom);
    }
    Ok((matmul(&concat, &layer.wo)?, received))
}

/// FFN where the rows in the plan's scope use the probe-selected units and
/// every other row uses the full FFN.
fn reduced_ffn(
    layer: &LayerWeights,
    xn: &Matrix,
    live: &TokenLayout,
    plan: &ReductionPlan,
    act: crate::numkernel::Activation,
    seed: u64,
    layer_index: usize,
) -> Result<Matrix, ModelError> {
    let rows = scope_rows(live, plan.scope);
    if rows.is_empty() {
        return Ok(layer.ffn.forward(xn, act)?);
    }
    let ffn = &layer.ffn;
    let xs = xn.select_rows(&rows);
    let m = plan.probe_count(rows.len());
    let k = plan.k_count(ffn.d_ff());
    let sel = probe_select(&xs, ffn, act, m, k, &mut layer_rng(seed, layer_index))?;
    let reduced = dynamic_ffn_forward(&xs, ffn, act, &sel)?;

    let mut out = Matrix::zeros(xn.rows(), xn.cols());
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(r).copy_from_slice(reduced.row(i));
    }
    let mut in_scope = vec![false; xn.rows()];
    rows.iter().for_each(|&r| in_scope[r] = true);
    let rest: Vec<usize> = (0..xn.rows()).filter(|&r| !in_scope[r]).collect();
    if !rest.is_empty() {
        let full = ffn.forward(&xn.select_rows(&rest), act)?;
        for (i, &r) in rest.iter().enumerate() {
            out.row_mut(r).copy_from_slice(full.row(i));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FfnKind, ModelConfig, Modality};
    use crate::numkernel::Activation;
    use crate::reductions::{Pruning, Scope};

    fn setup(kind: FfnKind) -> (Checkpoint, Vec<usize>, TokenLayout) {
        let cfg = ModelConfig {
            n_layers: 3,
            d_model: 16,
            d_ff: 32,
            n_heads: 2,
            ffn_kind: kind,
            vocab_size: 50,
            activation: Activation::Silu,
        };
        let ck = Checkpoint::random_init(&cfg, 11).unwrap();
        let layout = TokenLayout::prompt_image_question(3, 10, 3);
        let ids = (0..16).map(|i| (i * 7) % 50).collect();
        (ck, ids, layout)
    }

    #[test]
    fn empty_plan_is_bitwise_noop() {
        let (ck, ids, layout) = setup(FfnKind::Vanilla);
        let base = forward(&ck, &ids, &layout, None, 0).unwrap();
        let plan = ReductionPlan::default();
        let same = forward(&ck, &ids, &layout, Some(&plan), 99).unwrap();
        assert_eq!(base, same);
        assert_eq!(base.logits.shape(), (16, 50));
        assert!(base.logits.is_finite());
    }

    #[test]
    fn full_k_matches_bitwise() {
        for kind in [FfnKind::Vanilla, FfnKind::Gated] {
            let (ck, ids, layout) = setup(kind);
            let base = forward(&ck, &ids, &layout, None, 0).unwrap();
            let plan = ReductionPlan {
                ffn_layers: [0, 1, 2].into(),
                k_fraction: 1.0,
                probe_fraction: 1.0,
                ..Default::default()
            };
            let red = forward(&ck, &ids, &layout, Some(&plan), 5).unwrap();
            assert_eq!(base.logits, red.logits);
        }
    }

    #[test]
    fn wide_window_matches() {
        let (ck, ids, layout) = setup(FfnKind::Gated);
        let base = forward(&ck, &ids, &layout, None, 0).unwrap();
        let plan = ReductionPlan {
            attn_layers: [0, 2].into(),
            attention_range: 10,
            ..Default::default()
        };
        let red = forward(&ck, &ids, &layout, Some(&plan), 0).unwrap();
        assert!(base.logits.max_abs_diff(&red.logits) <= 1e-9);
    }

    #[test]
    fn reductions_change_output() {
        let (ck, ids, layout) = setup(FfnKind::Vanilla);
        let base = forward(&ck, &ids, &layout, None, 0).unwrap();
        let plan = ReductionPlan {
            attn_layers: [0, 1, 2].into(),
            ffn_layers: [0, 1, 2].into(),
            attention_range: 1,
            ..Default::default()
        };
        let red = forward(&ck, &ids, &layout, Some(&plan), 0).unwrap();
        assert!(base.logits.max_abs_diff(&red.logits) > 0.0);
        // determinism
        assert_eq!(red, forward(&ck, &ids, &layout, Some(&plan), 0).unwrap());
    }

    #[test]
    fn text_only_input_untouched_by_visual_scope() {
        let (ck, _, _) = setup(FfnKind::Vanilla);
        let layout = TokenLayout::new(vec![Modality::Text; 6]);
        let ids = vec![1, 2, 3, 4, 5, 6];
        let base = forward(&ck, &ids, &layout, None, 0).unwrap();
        let plan = ReductionPlan {
            attn_layers: [0, 1, 2].into(),
            ffn_layers: [0, 1, 2].into(),
            attention_range: 1,
            k_fraction: 0.05,
            ..Default::default()
        };
        assert_eq!(base, forward(&ck, &ids, &layout, Some(&plan), 3).unwrap());
        let all = ReductionPlan {
            scope: Scope::AllTokens,
            ..plan
        };
        let reduced = forward(&ck, &ids, &layout, Some(&all), 3).unwrap();
        assert!(base.logits.max_abs_diff(&reduced.logits) > 0.0);
    }

    #[test]
    fn pruning_drops_only_visual() {
        let (ck, ids, layout) = setup(FfnKind::Vanilla);
        let plan = ReductionPlan {
            pruning: Some(Pruning {
                at_layer: 0,
                keep_ratio: 0.3,
            }),
            ..Default::default()
        };
        let out = forward_with(&ck, &ids, &layout, Some(&plan), 0, true).unwrap();
        assert_eq!(out.positions.len(), 6 + 3);
        for t in layout.text_positions() {
            assert!(out.positions.contains(&t));
        }
        let rec = out.attention_received.unwrap();
        assert_eq!(rec.len(), 3);
        assert_eq!(rec[0].len(), 16);
        assert_eq!(rec[1].len(), 9);
        // each query row distributes mass 1
        assert!((rec[0].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn input_errors() {
        let (ck, ids, layout) = setup(FfnKind::Vanilla);
        let mut bad = ids.clone();
        bad[4] = 50;
        assert!(matches!(
            forward(&ck, &bad, &layout, None, 0),
            Err(ModelError::TokenOutOfRange { pos: 4, id: 50, .. })
        ));
        let plan = ReductionPlan {
            ffn_layers: [3].into(),
            ..Default::default()
        };
        assert!(matches!(
            forward(&ck, &ids, &layout, Some(&plan), 0),
            Err(ModelError::Reduction(_))
        ));
        assert!(matches!(
            forward(&ck, &ids[..3], &layout, None, 0),
            Err(ModelError::LengthMismatch { .. })
        ));
    }
}
