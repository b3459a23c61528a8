//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line; exits nonzero on any failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use redundancy_lens::flops::{count_flops, hollow_pairs_closed_form, mask_pair_count};
use redundancy_lens::model::{
    forward, forward_with, Checkpoint, FfnKind, FfnWeights, Modality, ModelConfig, TokenLayout,
};
use redundancy_lens::numkernel::{Activation, AttentionMask, Matrix};
use redundancy_lens::ranker::{
    penalty_score, rank_layers, score_against, RankError, RankTarget, ScoreConfig, SubsetScores,
};
use redundancy_lens::reductions::{
    dynamic_ffn_forward, hollow_mask, Pruning, ReductionPlan, Scope, Selection,
};

type Check = Result<String, String>;
type CheckFn = fn() -> Check;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed <= limit, || format!("took {elapsed:?}, limit {limit:?}"))
}

fn random_layout(rng: &mut ChaCha8Rng, min: usize, max: usize) -> TokenLayout {
    let n = rng.random_range(min..=max);
    TokenLayout::new(
        (0..n)
            .map(|_| if rng.random_bool(0.5) { Modality::Visual } else { Modality::Text })
            .collect(),
    )
}

/// Text prefix, a visual block, text suffix; at least one of each.
fn random_prompt(rng: &mut ChaCha8Rng) -> TokenLayout {
    TokenLayout::prompt_image_question(
        rng.random_range(1..=4),
        rng.random_range(1..=16),
        rng.random_range(1..=4),
    )
}

fn random_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let heads = rng.random_range(1..=2);
    ModelConfig {
        n_layers: rng.random_range(1..=3),
        d_model: 8 * heads * rng.random_range(1..=2),
        d_ff: rng.random_range(8..=40),
        n_heads: heads,
        ffn_kind: if rng.random_bool(0.5) { FfnKind::Vanilla } else { FfnKind::Gated },
        vocab_size: 48,
        activation: if rng.random_bool(0.5) { Activation::Relu } else { Activation::Silu },
    }
}

fn random_ids(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}

fn max_abs(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for case in 0..100 {
        let cfg = random_config(&mut rng);
        let ckpt = Checkpoint::random_init(&cfg, rng.random()).map_err(|e| e.to_string())?;
        let layout = random_prompt(&mut rng);
        let ids = random_ids(&mut rng, layout.len(), cfg.vocab_size);
        let plan = ReductionPlan {
            ffn_layers: (0..cfg.n_layers).collect(),
            k_fraction: 1.0,
            probe_fraction: rng.random_range(0.05..=1.0),
            scope: if rng.random_bool(0.5) { Scope::VisualOnly } else { Scope::AllTokens },
            ..ReductionPlan::default()
        };
        let seed = rng.random();
        let full = forward(&ckpt, &ids, &layout, None, seed).map_err(|e| e.to_string())?;
        let red = forward(&ckpt, &ids, &layout, Some(&plan), seed).map_err(|e| e.to_string())?;
        let same = full
            .logits
            .data()
            .iter()
            .zip(red.logits.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, || format!("case {case}: logits differ ({cfg:?})"))?;
    }
    within(start.elapsed(), Duration::from_secs(30))?;
    Ok("100 cases bitwise equal".into())
}

fn act(kind: Activation, x: f64) -> f64 {
    match kind {
        Activation::Relu => x.max(0.0),
        Activation::Silu => x / (1.0 + (-x).exp()),
    }
}

/// Full FFN with every hidden unit outside `keep` zeroed before the down
/// projection, written out with plain loops.
fn zeroed_complement(x: &Matrix, ffn: &FfnWeights, kind: Activation, keep: &[usize]) -> Matrix {
    let (n, d) = x.shape();
    let f = ffn.d_ff();
    let mut mask = vec![0.0; f];
    keep.iter().for_each(|&u| mask[u] = 1.0);
    let mut out = Matrix::zeros(n, d);
    for r in 0..n {
        let mut h = vec![0.0; f];
        for (u, hu) in h.iter_mut().enumerate() {
            let v = match ffn {
                FfnWeights::Vanilla { w1, b1, .. } => {
                    let pre: f64 = (0..d).map(|c| x.get(r, c) * w1.get(c, u)).sum::<f64>() + b1[u];
                    act(kind, pre)
                }
                FfnWeights::Gated { wg, wu, .. } => {
                    let g: f64 = (0..d).map(|c| x.get(r, c) * wg.get(c, u)).sum();
                    let up: f64 = (0..d).map(|c| x.get(r, c) * wu.get(c, u)).sum();
                    act(kind, g) * up
                }
            };
            *hu = v * mask[u];
        }
        for c in 0..d {
            let v = match ffn {
                FfnWeights::Vanilla { w2, b2, .. } => {
                    (0..f).map(|u| h[u] * w2.get(u, c)).sum::<f64>() + b2[c]
                }
                FfnWeights::Gated { wd, .. } => (0..f).map(|u| h[u] * wd.get(u, c)).sum(),
            };
            out.set(r, c, v);
        }
    }
    out
}

fn criterion_2() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    let mut kinds = [0usize; 2];
    for case in 0..1000 {
        let n = rng.random_range(1..=6);
        let d = rng.random_range(1..=8);
        let f = rng.random_range(1..=24);
        let mut m = |r, c| Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
        let x = m(n, d);
        let gated = case % 2 == 1;
        kinds[case % 2] += 1;
        let ffn = if gated {
            FfnWeights::Gated { wg: m(d, f), wu: m(d, f), wd: m(f, d) }
        } else {
            let (w1, w2) = (m(d, f), m(f, d));
            FfnWeights::Vanilla {
                w1,
                b1: (0..f).map(|_| rng.random_range(-0.5..0.5)).collect(),
                w2,
                b2: (0..d).map(|_| rng.random_range(-0.5..0.5)).collect(),
            }
        };
        let kind = if rng.random_bool(0.5) { Activation::Relu } else { Activation::Silu };
        let k = rng.random_range(1..=f);
        let mut units: Vec<usize> = (0..f).collect();
        units.shuffle(&mut rng);
        units.truncate(k);
        units.sort_unstable();
        let sel = Selection::new(units.clone(), f).map_err(|e| e.to_string())?;
        let got = dynamic_ffn_forward(&x, &ffn, kind, &sel).map_err(|e| e.to_string())?;
        let want = zeroed_complement(&x, &ffn, kind, &units);
        let diff = max_abs(&got, &want);
        worst = worst.max(diff);
        ensure(diff <= 1e-12, || format!("case {case}: max abs diff {diff:e}"))?;
    }
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!(
        "1000 triples ({} vanilla, {} gated), worst diff {worst:e}",
        kinds[0], kinds[1]
    ))
}

fn criterion_3() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst: f64 = 0.0;
    for trial in 0..100 {
        let cfg = random_config(&mut rng);
        let ckpt = Checkpoint::random_init(&cfg, rng.random()).map_err(|e| e.to_string())?;
        let layout = random_layout(&mut rng, 1, 24);
        let ids = random_ids(&mut rng, layout.len(), cfg.vocab_size);
        let plan = ReductionPlan {
            attn_layers: (0..cfg.n_layers).collect(),
            attention_range: layout.n_visual().max(1) + rng.random_range(0..4),
            scope: if rng.random_bool(0.5) { Scope::VisualOnly } else { Scope::AllTokens },
            ..ReductionPlan::default()
        };
        let full = forward(&ckpt, &ids, &layout, None, 0).map_err(|e| e.to_string())?;
        let red = forward(&ckpt, &ids, &layout, Some(&plan), 0).map_err(|e| e.to_string())?;
        let diff = max_abs(&full.logits, &red.logits);
        worst = worst.max(diff);
        ensure(diff <= 1e-9, || format!("trial {trial}: max abs diff {diff:e}"))?;
    }
    for case in 0..500 {
        let layout = random_layout(&mut rng, 1, 64);
        let r = rng.random_range(1..=8);
        let mask = hollow_mask(&layout, r);
        let causal = AttentionMask::causal(layout.len());
        for q in layout.text_positions() {
            ensure(mask.row(q) == causal.row(q), || {
                format!("layout {case} ({layout}), R_A {r}: text row {q} is not causal")
            })?;
        }
    }
    within(start.elapsed(), Duration::from_secs(30))?;
    Ok(format!("100 forwards (worst diff {worst:e}), 500 layouts with causal text rows"))
}

/// The hollow rule checked pair by pair.
fn brute_force_pairs(layout: &TokenLayout, r: usize) -> usize {
    let ordinal = |p: usize| (0..p).filter(|&i| layout.is_visual(i)).count();
    let mut count = 0;
    for q in 0..layout.len() {
        for k in 0..=q {
            let allowed = !layout.is_visual(q)
                || !layout.is_visual(k)
                || ordinal(q) - ordinal(k) <= r;
            count += allowed as usize;
        }
    }
    count
}

fn criterion_4() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    for case in 0..500 {
        let layout = random_layout(&mut rng, 1, 64);
        let r = rng.random_range(1..=8);
        let counted = mask_pair_count(&hollow_mask(&layout, r));
        let closed = hollow_pairs_closed_form(&layout, r);
        let brute = brute_force_pairs(&layout, r);
        ensure(counted == closed && closed == brute, || {
            format!("case {case} ({layout}, R_A {r}): mask {counted}, closed form {closed}, enumeration {brute}")
        })?;
    }
    Ok("500 layouts agree exactly".into())
}

/// Integer-valued per-subset scores: per-layer effects plus pairwise
/// interactions, drawn from a small range so ties are common.
struct SyntheticOracle {
    single: Vec<Vec<i64>>,
    pair: Vec<Vec<Vec<i64>>>,
}

impl SyntheticOracle {
    fn random(rng: &mut ChaCha8Rng, n_layers: usize) -> Self {
        let subsets = rng.random_range(1..=3);
        let single = (0..subsets)
            .map(|_| (0..n_layers).map(|_| rng.random_range(-2..=2)).collect())
            .collect();
        let interact = rng.random_bool(0.5);
        let pair = (0..subsets)
            .map(|_| {
                (0..n_layers)
                    .map(|_| {
                        (0..n_layers)
                            .map(|_| if interact { rng.random_range(-1..=1) } else { 0 })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Self { single, pair }
    }

    fn values(&self, layers: &[usize]) -> Vec<i64> {
        (0..self.single.len())
            .map(|s| {
                let mut v = 0;
                for &a in layers {
                    v += self.single[s][a];
                    for &b in layers {
                        if a < b {
                            v += self.pair[s][a][b];
                        }
                    }
                }
                v
            })
            .collect()
    }
}

/// Greedy forward selection written from scratch: each round tries every
/// remaining layer in ascending order and keeps the first best.
fn reference_greedy(oracle: &SyntheticOracle, n_layers: usize) -> (Vec<usize>, usize) {
    let base = oracle.values(&[]);
    let score = |set: &[usize]| -> i64 {
        oracle
            .values(set)
            .iter()
            .zip(&base)
            .map(|(v, b)| if v - b < 0 { 2 * (v - b) } else { v - b })
            .sum()
    };
    let mut ranked = Vec::new();
    let mut remaining: Vec<usize> = (0..n_layers).collect();
    let mut evals = 0;
    while !remaining.is_empty() {
        let mut best: Option<(usize, i64)> = None;
        for (i, &c) in remaining.iter().enumerate() {
            let mut set = ranked.clone();
            set.push(c);
            let s = score(&set);
            evals += 1;
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        ranked.push(remaining.remove(best.unwrap().0));
    }
    (ranked, evals)
}

fn criterion_5() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut tie_cases = 0;
    for case in 0..50 {
        let n_layers = rng.random_range(1..=8);
        let synth = SyntheticOracle::random(&mut rng, n_layers);
        let oracle = |plan: &ReductionPlan| -> Result<SubsetScores, RankError> {
            let layers: Vec<usize> = plan.attn_layers.iter().copied().collect();
            Ok(synth
                .values(&layers)
                .into_iter()
                .enumerate()
                .map(|(s, v)| (format!("s{s}"), v as f64))
                .collect())
        };
        let space: Vec<usize> = (0..n_layers).collect();
        let got = rank_layers(
            &oracle,
            RankTarget::Attention,
            &space,
            &ReductionPlan::default(),
            &ScoreConfig::default(),
        )
        .map_err(|e| e.to_string())?;
        let (want, evals) = reference_greedy(&synth, n_layers);
        ensure(got.ranked == want, || {
            format!("case {case}: ranked {:?}, reference {want:?}", got.ranked)
        })?;
        let s = n_layers;
        ensure(got.eval_log.len() == evals && evals == s * (s + 1) / 2, || {
            format!("case {case}: {} evaluations, reference {evals}", got.eval_log.len())
        })?;
        let has_tie = got.rounds().iter().any(|round| {
            let best = round.iter().map(|e| e.score).fold(f64::NEG_INFINITY, f64::max);
            round.iter().filter(|e| e.score == best).count() > 1
        });
        tie_cases += has_tie as usize;
    }
    ensure(tie_cases > 0, || "no tie cases were generated".into())?;
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!("50 oracles match, {tie_cases} with tied rounds"))
}

fn criterion_6() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    for case in 0..200 {
        let n = rng.random_range(1..=8);
        let deltas: Vec<f64> = (0..n)
            .map(|_| match rng.random_range(0..4) {
                0 => 0.0,
                1 => rng.random_range(-10..=10) as f64,
                _ => rng.random_range(-5.0..5.0),
            })
            .collect();
        let mut want = 0.0;
        for &d in &deltas {
            want += if d < 0.0 { 2.0 * d } else { d };
        }
        let got = penalty_score(&deltas, 2.0);
        ensure(got == want, || format!("case {case}: {deltas:?} -> {got}, expected {want}"))?;

        let scores: BTreeMap<String, f64> =
            deltas.iter().enumerate().map(|(i, &d)| (format!("{i:02}"), d + 1.0)).collect();
        let baseline: BTreeMap<String, f64> =
            deltas.iter().enumerate().map(|(i, _)| (format!("{i:02}"), 1.0)).collect();
        let mut direct = 0.0;
        for (k, v) in &scores {
            let d = v - baseline[k];
            direct += if d < 0.0 { 2.0 * d } else { d };
        }
        let via = score_against(&scores, &baseline, 2.0);
        ensure(via == direct, || format!("case {case}: against baseline {via}, expected {direct}"))?;
    }
    Ok("200 cases exact".into())
}

fn lens() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lens"))
}

fn criterion_7() -> Check {
    let start = Instant::now();
    let out = lens()
        .args(["flops", "--preset", "internvl2-table1"])
        .output()
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())?;
    let text = String::from_utf8_lossy(&out.stdout);
    let json_start = text.find("\n{").ok_or("no JSON in output")? + 1;
    let v: serde_json::Value = serde_json::from_str(&text[json_start..]).map_err(|e| e.to_string())?;
    let ratio = v["ratio_vs_full"].as_f64().ok_or("missing ratio_vs_full")?;
    ensure((0.69..=0.75).contains(&ratio), || format!("ratio_vs_full {ratio} outside [0.69, 0.75]"))?;
    within(elapsed, Duration::from_secs(1))?;
    Ok(format!(
        "ratio_vs_full {ratio:.4} (without probe {:.4}) in {elapsed:?}",
        v["ratio_without_probe"].as_f64().unwrap_or(f64::NAN)
    ))
}

struct DemoRuns {
    _tmp: tempfile::TempDir,
    first: PathBuf,
    second: PathBuf,
    elapsed: Duration,
}

fn run_demo(dir: &Path) -> Result<(), String> {
    let out = lens()
        .arg("demo")
        .arg("--out")
        .arg(dir)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())
}

fn demo_runs() -> &'static Result<DemoRuns, String> {
    static RUNS: OnceLock<Result<DemoRuns, String>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let first = tmp.path().join("first");
        let second = tmp.path().join("second");
        let start = Instant::now();
        run_demo(&first)?;
        run_demo(&second)?;
        Ok(DemoRuns { elapsed: start.elapsed(), _tmp: tmp, first, second })
    })
}

fn sweep_divergence(path: &Path) -> Result<Vec<(f64, String, f64)>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or("empty CSV")?.split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).ok_or(format!("no {name} column"));
    let (fc, tc, dc) = (col("fraction")?, col("target")?, col("divergence")?);
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            Ok((
                f[fc].parse().map_err(|_| format!("bad fraction in {l}"))?,
                f[tc].to_string(),
                f[dc].parse().map_err(|_| format!("bad divergence in {l}"))?,
            ))
        })
        .collect()
}

fn criterion_8() -> Check {
    let runs = demo_runs().as_ref().map_err(Clone::clone)?;
    let visual = sweep_divergence(&runs.first.join("sweep_visual_only.csv"))?;
    let all = sweep_divergence(&runs.first.join("sweep_all_tokens.csv"))?;
    ensure(visual.len() == all.len() && !visual.is_empty(), || "sweeps have different rows".into())?;
    let mut compared = 0;
    for ((f, t, dv), (f2, t2, da)) in visual.iter().zip(&all) {
        ensure(f == f2 && t == t2, || format!("row mismatch: {f} {t} vs {f2} {t2}"))?;
        if *f >= 0.25 {
            compared += 1;
            ensure(da >= dv, || format!("{t} at {f}: all_tokens {da:e} < visual_only {dv:e}"))?;
        }
    }
    // both demo runs are included; the limit covers a single one
    within(runs.elapsed / 2, Duration::from_secs(300))?;
    Ok(format!("all_tokens >= visual_only on {compared} rows with fraction >= 0.25"))
}

fn criterion_9() -> Check {
    let runs = demo_runs().as_ref().map_err(Clone::clone)?;
    let mut names: Vec<String> = std::fs::read_dir(&runs.first)
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv") || n.ends_with(".json"))
        .collect();
    names.sort();
    ensure(names.len() >= 5, || format!("expected demo CSV and JSON outputs, found {names:?}"))?;
    for name in &names {
        let a = std::fs::read(runs.first.join(name)).map_err(|e| e.to_string())?;
        let b = std::fs::read(runs.second.join(name)).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("{name} differs between runs"))?;
    }
    within(runs.elapsed, Duration::from_secs(600))?;
    Ok(format!("{} files byte-identical across two runs ({:?})", names.len(), runs.elapsed))
}

fn criterion_10() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    for case in 0..100 {
        let mut cfg = random_config(&mut rng);
        cfg.n_layers = rng.random_range(2..=4);
        let layout = TokenLayout::prompt_image_question(
            rng.random_range(1..=4),
            rng.random_range(2..=16),
            rng.random_range(1..=4),
        );
        let nv = layout.n_visual();
        let pick = |rng: &mut ChaCha8Rng| -> std::collections::BTreeSet<usize> {
            (0..cfg.n_layers).filter(|_| rng.random_bool(0.5)).collect()
        };
        let base = ReductionPlan {
            attn_layers: pick(&mut rng),
            ffn_layers: pick(&mut rng),
            attention_range: rng.random_range(1..=6),
            k_fraction: rng.random_range(0.05..=1.0),
            probe_fraction: rng.random_range(0.05..=1.0),
            scope: if rng.random_bool(0.5) { Scope::VisualOnly } else { Scope::AllTokens },
            pruning: None,
        };
        // keep strictly fewer than all visual tokens
        let keep_ratio = rng.random_range(0.05..=(nv - 1) as f64 / nv as f64);
        let pruned = ReductionPlan {
            pruning: Some(Pruning { at_layer: rng.random_range(0..cfg.n_layers - 1), keep_ratio }),
            ..base.clone()
        };
        let without = count_flops(&cfg, &layout, Some(&base)).total;
        let with = count_flops(&cfg, &layout, Some(&pruned)).total;
        ensure(with < without, || {
            format!("case {case}: pruning did not reduce FLOPs ({with} vs {without}) for {pruned:?}")
        })?;

        let ckpt = Checkpoint::random_init(&cfg, rng.random()).map_err(|e| e.to_string())?;
        let ids = random_ids(&mut rng, layout.len(), cfg.vocab_size);
        let out = forward_with(&ckpt, &ids, &layout, Some(&pruned), 0, false).map_err(|e| e.to_string())?;
        for t in layout.text_positions() {
            ensure(out.positions.contains(&t), || {
                format!("case {case}: text position {t} dropped from {:?}", out.positions)
            })?;
        }
        ensure(out.positions.len() < layout.len(), || format!("case {case}: nothing was pruned"))?;
    }
    Ok("100 random plans: FLOPs strictly lower, text positions kept".into())
}

fn main() {
    let criteria: [(&str, CheckFn); 10] = [
        ("full-selection FFN equivalence", criterion_1),
        ("masked-equivalence identity", criterion_2),
        ("hollow-attention equivalence", criterion_3),
        ("hollow mask pair law", criterion_4),
        ("greedy search matches reference", criterion_5),
        ("penalty score", criterion_6),
        ("FLOPs reference scenario", criterion_7),
        ("scope contrast on the demo", criterion_8),
        ("end-to-end determinism", criterion_9),
        ("pruning accounting", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
