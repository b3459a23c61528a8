//! The `lens` command line.
//!
//! Every command returns the text it wants on stdout so the same code paths
//! can be driven from tests. Output files are written atomically.

pub mod svg;
pub mod sweep;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use crate::demo;
use crate::flops::{count_flops, internvl2_table1_preset, render_table};
use crate::fsutil::write_atomic;
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint, FfnKind, ModelConfig, TokenLayout};
use crate::numkernel::Activation;
use crate::ranker::{
    default_l_p, hybrid_ranking, plan_for_fraction, DivergenceOracle, RankTarget, RankingResult,
    ScoreConfig, ValidationBatch, DEFAULT_ALPHA,
};
use crate::reductions::{ReductionPlan, Scope};
use sweep::{default_fractions, evaluate_plan, run_sweep, to_csv, SweepRow, SweepSpec, SweepTarget};

pub const PRESET_INTERNVL2_TABLE1: &str = "internvl2-table1";

fn parse_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "lens", version, about = "Visual-token redundancy analysis on a toy multimodal decoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a random checkpoint.
    Gen(GenArgs),
    /// Generate a synthetic validation batch (JSON lines).
    Batch(BatchArgs),
    /// Rank layers for one reduction target.
    Rank(RankArgs),
    /// Build a reduction plan from rankings and a layer fraction.
    Plan(PlanArgs),
    /// Score and FLOPs-count plans over increasing layer fractions.
    Sweep(SweepArgs),
    /// Report analytic FLOPs for a plan.
    Flops(FlopsArgs),
    /// Score a single plan on a batch.
    Eval(EvalArgs),
    /// Run gen, batch, rank (both targets) and sweep (both scopes) into one directory.
    Demo(DemoArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[arg(long, default_value_t = 8)]
    pub layers: usize,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 256)]
    pub d_ff: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 512)]
    pub vocab: usize,
    #[arg(long, default_value = "vanilla", value_parser = parse_enum::<FfnKind>)]
    pub ffn_kind: FfnKind,
    #[arg(long, default_value = "relu", value_parser = parse_enum::<Activation>)]
    pub activation: Activation,
}

impl ConfigArgs {
    fn config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.layers,
            d_model: self.d_model,
            d_ff: self.d_ff,
            n_heads: self.heads,
            ffn_kind: self.ffn_kind,
            vocab_size: self.vocab,
            activation: self.activation,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value_t = demo::DEMO_SEED)]
    pub seed: u64,
    /// Output base path; writes `<out>.manifest.json` and `<out>.bin`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BatchArgs {
    /// Vocabulary size the ids are drawn from.
    #[arg(long, default_value_t = 512)]
    pub vocab: usize,
    #[arg(long, value_delimiter = ',', default_values_t = demo::DEMO_SUBSETS.map(String::from))]
    pub subsets: Vec<String>,
    #[arg(long, default_value_t = demo::DEMO_ITEMS_PER_SUBSET)]
    pub per_subset: usize,
    #[arg(long, default_value_t = demo::DEMO_LAYOUT.0)]
    pub prefix: usize,
    #[arg(long, default_value_t = demo::DEMO_LAYOUT.1)]
    pub visual: usize,
    #[arg(long, default_value_t = demo::DEMO_LAYOUT.2)]
    pub suffix: usize,
    #[arg(long, default_value_t = demo::DEMO_BATCH_SEED)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Reduction parameters shared by commands that build plans.
#[derive(Debug, Args, Clone)]
pub struct TemplateArgs {
    /// Plan JSON whose parameters seed the template (its layer sets are ignored
    /// by rank, plan and sweep).
    #[arg(long)]
    pub plan_template: Option<PathBuf>,
    /// Visual look-back window R_A.
    #[arg(long)]
    pub attention_range: Option<usize>,
    #[arg(long)]
    pub k_fraction: Option<f64>,
    #[arg(long)]
    pub probe_fraction: Option<f64>,
    #[arg(long, value_parser = parse_enum::<Scope>)]
    pub scope: Option<Scope>,
}

impl TemplateArgs {
    fn template(&self) -> Result<ReductionPlan> {
        let mut plan = match &self.plan_template {
            Some(p) => read_plan(p)?,
            None => ReductionPlan::default(),
        };
        if let Some(r) = self.attention_range {
            plan.attention_range = r;
        }
        if let Some(k) = self.k_fraction {
            plan.k_fraction = k;
        }
        if let Some(m) = self.probe_fraction {
            plan.probe_fraction = m;
        }
        if let Some(s) = self.scope {
            plan.scope = s;
        }
        Ok(plan)
    }
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub batch: PathBuf,
    #[arg(long, value_parser = parse_enum::<RankTarget>)]
    pub target: RankTarget,
    /// Deepest layers ranked by position; defaults to L/4.
    #[arg(long)]
    pub lp: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    #[command(flatten)]
    pub template: TemplateArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub attention_ranking: Option<PathBuf>,
    #[arg(long)]
    pub ffn_ranking: Option<PathBuf>,
    #[arg(long)]
    pub fraction: f64,
    #[arg(long, value_parser = parse_enum::<SweepTarget>, default_value = "both")]
    pub target: SweepTarget,
    #[command(flatten)]
    pub template: TemplateArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub batch: PathBuf,
    #[arg(long)]
    pub attention_ranking: Option<PathBuf>,
    #[arg(long)]
    pub ffn_ranking: Option<PathBuf>,
    /// Defaults to every target the supplied rankings allow.
    #[arg(long, value_delimiter = ',', value_parser = parse_enum::<SweepTarget>)]
    pub targets: Vec<SweepTarget>,
    /// Ascending layer fractions; defaults to 0, 1/L, ..., 1.
    #[arg(long, value_delimiter = ',')]
    pub fractions: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    #[command(flatten)]
    pub template: TemplateArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Writes `<prefix>.csv` and `<prefix>_<target>.svg`.
    #[arg(long)]
    pub out_prefix: PathBuf,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    /// Named reference scenario; overrides every other input.
    #[arg(long)]
    pub preset: Option<String>,
    /// Take the model config from a checkpoint manifest.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Layout as a T/V string, e.g. `TTVVVVT`.
    #[arg(long)]
    pub layout: Option<String>,
    #[arg(long, default_value_t = demo::DEMO_LAYOUT.0)]
    pub prefix: usize,
    #[arg(long, default_value_t = demo::DEMO_LAYOUT.1)]
    pub visual: usize,
    #[arg(long, default_value_t = demo::DEMO_LAYOUT.2)]
    pub suffix: usize,
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Also write the breakdown JSON here.
    #[arg(long)]
    pub json_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub batch: PathBuf,
    /// Plan JSON; omitted means no reduction.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = demo::DEMO_SEED)]
    pub seed: u64,
    #[arg(long)]
    pub lp: Option<usize>,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn read_plan(path: &Path) -> Result<ReductionPlan> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading plan {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("invalid plan JSON in {}", path.display()))
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn plan_json(plan: &ReductionPlan) -> String {
    let mut s = serde_json::to_string_pretty(plan).expect("plan serializes");
    s.push('\n');
    s
}

pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Batch(a) => cmd_batch(&a),
        Command::Rank(a) => cmd_rank(&a),
        Command::Plan(a) => cmd_plan(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Flops(a) => cmd_flops(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Demo(a) => cmd_demo(&a),
    }
}

pub fn cmd_gen(args: &GenArgs) -> Result<String> {
    let cfg = args.config.config();
    let ckpt = Checkpoint::random_init(&cfg, args.seed)?;
    let (manifest, blob) = save_checkpoint(&ckpt, &args.out)?;
    let mut s = String::new();
    let mut params = 0;
    for (name, shape, data) in ckpt.named_tensors() {
        params += data.len();
        let _ = writeln!(s, "{name:<24} {shape:?}");
    }
    let _ = writeln!(
        s,
        "{} tensors, {params} parameters -> {} + {}",
        cfg.tensor_count(),
        manifest.display(),
        blob.display()
    );
    Ok(s)
}

pub fn cmd_batch(args: &BatchArgs) -> Result<String> {
    if args.per_subset == 0 || args.subsets.is_empty() {
        bail!("batch needs at least one subset and one item per subset");
    }
    if args.prefix + args.visual + args.suffix == 0 {
        bail!("items need at least one token");
    }
    let names: Vec<&str> = args.subsets.iter().map(String::as_str).collect();
    let batch = ValidationBatch::synthetic(
        args.vocab,
        &names,
        args.per_subset,
        (args.prefix, args.visual, args.suffix),
        args.seed,
    );
    batch.save(&args.out)?;
    Ok(format!(
        "{} items in {} subsets -> {}\n",
        batch.items.len(),
        names.len(),
        args.out.display()
    ))
}

pub fn cmd_rank(args: &RankArgs) -> Result<String> {
    let ckpt = load_ckpt(&args.ckpt)?;
    let batch = ValidationBatch::load(&args.batch)?;
    let template = args.template.template()?;
    let n_layers = ckpt.config.n_layers;
    template.validate(n_layers)?;
    let l_p = args.lp.unwrap_or_else(|| default_l_p(n_layers));
    let score_cfg = ScoreConfig {
        alpha: args.alpha,
        ..Default::default()
    };
    let oracle = DivergenceOracle::new(&ckpt, &batch, args.seed)?;
    let result = hybrid_ranking(&oracle, args.target, n_layers, l_p, &template, &score_cfg)?;
    result.save(&args.out)?;

    let mut s = String::new();
    let _ = writeln!(s, "target {}  L_p {}", result.target, result.l_p);
    if l_p > 0 {
        let _ = writeln!(s, "position-ranked: {:?}", &result.ranked[..l_p]);
    }
    for (r, round) in result.rounds().iter().enumerate() {
        let winner = result.ranked[l_p + r];
        let best = round
            .iter()
            .find(|e| e.layers.last() == Some(&winner))
            .map(|e| e.score)
            .unwrap_or(f64::NAN);
        let _ = writeln!(
            s,
            "round {r}: layer {winner} score {best:e} ({} candidates)",
            round.len()
        );
    }
    let _ = writeln!(
        s,
        "ranked {:?}, {} evaluations -> {}",
        result.ranked,
        result.eval_log.len(),
        args.out.display()
    );
    Ok(s)
}

fn load_rankings(
    attention: Option<&Path>,
    ffn: Option<&Path>,
) -> Result<(Option<RankingResult>, Option<RankingResult>)> {
    let load = |p: Option<&Path>, want: RankTarget| -> Result<Option<RankingResult>> {
        let Some(p) = p else { return Ok(None) };
        let r = RankingResult::load(p)?;
        if r.target != want {
            bail!("{} ranks `{}`, expected `{want}`", p.display(), r.target);
        }
        Ok(Some(r))
    };
    Ok((
        load(attention, RankTarget::Attention)?,
        load(ffn, RankTarget::Ffn)?,
    ))
}

pub fn cmd_plan(args: &PlanArgs) -> Result<String> {
    let (a, f) = load_rankings(args.attention_ranking.as_deref(), args.ffn_ranking.as_deref())?;
    if !(0.0..=1.0).contains(&args.fraction) {
        bail!("fraction must lie in [0, 1]");
    }
    let (a, f) = match args.target {
        SweepTarget::Attention => (a, None),
        SweepTarget::Ffn => (None, f),
        SweepTarget::Both => (a, f),
    };
    let n_layers = match (&a, &f) {
        (Some(r), _) | (None, Some(r)) => r.ranked.len(),
        (None, None) => bail!("target `{}` needs its ranking file(s)", args.target),
    };
    let plan = plan_for_fraction(a.as_ref(), f.as_ref(), args.fraction, n_layers, &args.template.template()?);
    plan.validate(n_layers)?;
    let json = plan_json(&plan);
    write(&args.out, json.as_bytes())?;
    Ok(json)
}

fn chart(rows: &[SweepRow], target: SweepTarget) -> String {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.target == target)
        .map(|r| (r.fraction, -r.divergence))
        .collect();
    let scope = rows.first().map(|r| r.scope.to_string()).unwrap_or_default();
    svg::line_chart(
        &format!("{target} reductions"),
        "layers reduced",
        "-KL(full || reduced)",
        &[svg::Series {
            label: &scope,
            points: pts,
        }],
    )
}

fn svg_path(prefix: &Path, target: SweepTarget) -> PathBuf {
    PathBuf::from(format!("{}_{target}.svg", prefix.display()))
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<String> {
    let ckpt = load_ckpt(&args.ckpt)?;
    let batch = ValidationBatch::load(&args.batch)?;
    let (a, f) = load_rankings(args.attention_ranking.as_deref(), args.ffn_ranking.as_deref())?;
    let targets = if args.targets.is_empty() {
        let mut t = Vec::new();
        if a.is_some() {
            t.push(SweepTarget::Attention);
        }
        if f.is_some() {
            t.push(SweepTarget::Ffn);
        }
        if a.is_some() && f.is_some() {
            t.push(SweepTarget::Both);
        }
        if t.is_empty() {
            bail!("sweep needs --attention-ranking and/or --ffn-ranking");
        }
        t
    } else {
        args.targets.clone()
    };
    let template = args.template.template()?;
    template.validate(ckpt.config.n_layers)?;
    let spec = SweepSpec {
        targets,
        fractions: if args.fractions.is_empty() {
            default_fractions(ckpt.config.n_layers)
        } else {
            args.fractions.clone()
        },
        scope: template.scope,
        alpha: args.alpha,
        seed: args.seed,
    };
    let rows = run_sweep(&ckpt, &batch, a.as_ref(), f.as_ref(), &template, &spec)?;
    let csv = to_csv(&rows);
    let csv_path = PathBuf::from(format!("{}.csv", args.out_prefix.display()));
    write(&csv_path, csv.as_bytes())?;
    for &t in &spec.targets {
        write(&svg_path(&args.out_prefix, t), chart(&rows, t).as_bytes())?;
    }
    Ok(csv)
}

pub fn cmd_flops(args: &FlopsArgs) -> Result<String> {
    let (cfg, layout, plan, note) = match args.preset.as_deref() {
        Some(PRESET_INTERNVL2_TABLE1) => {
            let (c, l, p) = internvl2_table1_preset();
            let note = format!(
                "scenario: {} layers, gated FFN, d_model {}, d_ff {}, {} visual + {} text tokens (assumed), attn layers {}, ffn layers {}, R_A {}, K {}, probes {}\n",
                c.n_layers,
                c.d_model,
                c.d_ff,
                l.n_visual(),
                l.n_text(),
                p.attn_layers.len(),
                p.ffn_layers.len(),
                p.attention_range,
                p.k_fraction,
                p.probe_fraction
            );
            (c, l, Some(p), note)
        }
        Some(other) => bail!("unknown preset `{other}` (available: {PRESET_INTERNVL2_TABLE1})"),
        None => {
            let cfg = match &args.ckpt {
                Some(p) => load_ckpt(p)?.config,
                None => args.config.config(),
            };
            cfg.validate()?;
            let layout = match &args.layout {
                Some(s) => TokenLayout::parse(s)
                    .with_context(|| format!("layout `{s}` must only contain T and V"))?,
                None => TokenLayout::prompt_image_question(args.prefix, args.visual, args.suffix),
            };
            if layout.is_empty() {
                bail!("layout is empty");
            }
            let plan = args.plan.as_deref().map(read_plan).transpose()?;
            if let Some(p) = &plan {
                p.validate(cfg.n_layers)?;
            }
            (cfg, layout, plan, String::new())
        }
    };
    let breakdown = count_flops(&cfg, &layout, plan.as_ref());
    let mut json = serde_json::to_string_pretty(&breakdown).expect("breakdown serializes");
    json.push('\n');
    if let Some(p) = &args.json_out {
        write(p, json.as_bytes())?;
    }
    Ok(format!("{note}{}{json}", render_table(&breakdown)))
}

pub fn cmd_eval(args: &EvalArgs) -> Result<String> {
    let ckpt = load_ckpt(&args.ckpt)?;
    let batch = ValidationBatch::load(&args.batch)?;
    let plan = match &args.plan {
        Some(p) => read_plan(p)?,
        None => ReductionPlan::default(),
    };
    plan.validate(ckpt.config.n_layers)?;
    ScoreConfig {
        alpha: args.alpha,
        ..Default::default()
    }
    .validate()?;
    let oracle = DivergenceOracle::new(&ckpt, &batch, args.seed)?;
    let ev = evaluate_plan(&ckpt, &batch, &oracle, &plan, args.alpha)?;
    let mut json = serde_json::to_string_pretty(&ev).expect("report serializes");
    json.push('\n');
    if let Some(p) = &args.out {
        write(p, json.as_bytes())?;
    }
    Ok(json)
}

/// Whole pipeline with the bundled demo settings.
pub fn cmd_demo(args: &DemoArgs) -> Result<String> {
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let dir = &args.out;
    let cfg = demo::demo_config();
    let mut log = String::new();

    let ckpt_base = dir.join("demo");
    let inventory = cmd_gen(&GenArgs {
        config: ConfigArgs {
            layers: cfg.n_layers,
            d_model: cfg.d_model,
            d_ff: cfg.d_ff,
            heads: cfg.n_heads,
            vocab: cfg.vocab_size,
            ffn_kind: cfg.ffn_kind,
            activation: cfg.activation,
        },
        seed: args.seed,
        out: ckpt_base.clone(),
    })?;
    // only the summary line; the full inventory is what `gen` is for
    log += inventory.lines().last().unwrap_or_default();
    log.push('\n');

    let batch_path = dir.join("batch.jsonl");
    demo::demo_batch(cfg.vocab_size).save(&batch_path)?;
    let _ = writeln!(log, "demo batch -> {}", batch_path.display());

    let template = TemplateArgs {
        plan_template: None,
        attention_range: Some(demo::DEMO_ATTENTION_RANGE),
        k_fraction: None,
        probe_fraction: None,
        scope: None,
    };
    let mut rankings = Vec::new();
    for target in [RankTarget::Attention, RankTarget::Ffn] {
        let out = dir.join(format!("rank_{target}.json"));
        log += &cmd_rank(&RankArgs {
            ckpt: ckpt_base.clone(),
            batch: batch_path.clone(),
            target,
            lp: args.lp,
            alpha: DEFAULT_ALPHA,
            template: template.clone(),
            seed: args.seed,
            out: out.clone(),
        })?;
        rankings.push(out);
    }

    for scope in [Scope::VisualOnly, Scope::AllTokens] {
        let prefix = dir.join(format!("sweep_{scope}"));
        cmd_sweep(&SweepArgs {
            ckpt: ckpt_base.clone(),
            batch: batch_path.clone(),
            attention_ranking: Some(rankings[0].clone()),
            ffn_ranking: Some(rankings[1].clone()),
            targets: Vec::new(),
            fractions: Vec::new(),
            alpha: DEFAULT_ALPHA,
            template: TemplateArgs {
                scope: Some(scope),
                ..template.clone()
            },
            seed: args.seed,
            out_prefix: prefix.clone(),
        })?;
        let _ = writeln!(log, "sweep ({scope}) -> {}.csv", prefix.display());
    }
    Ok(log)
}
