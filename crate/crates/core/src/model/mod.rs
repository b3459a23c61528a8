//! Toy decoder-only multimodal transformer.
//!
//! Pre-norm blocks with RMS-norm, multi-head causal attention without
//! positional rotation, and either a two-matrix or a gated FFN. Every input
//! position carries a [`Modality`] tag; the tag picks a row of the modality
//! embedding and decides which rows a [`ReductionPlan`](crate::reductions::ReductionPlan)
//! may touch.

mod checkpoint;
mod forward;

pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest, TensorEntry, MANIFEST_FORMAT};
pub use forward::{forward, forward_with, ForwardOutput};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkernel::{activation_in_place, matmul, Activation, KernelError, Matrix};

/// Standard deviation of every randomly initialized weight.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed manifest: {source}")]
    Manifest {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("unsupported manifest: {0}")]
    UnsupportedManifest(String),
    #[error("tensor `{tensor}` is truncated: needs bytes {start}..{end}, blob has {blob_len}")]
    Truncated {
        tensor: String,
        start: usize,
        end: usize,
        blob_len: usize,
    },
    #[error("tensor `{tensor}` has shape {found:?}, config requires {expected:?}")]
    ShapeMismatch {
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor `{0}` is missing from the manifest")]
    MissingTensor(String),
    #[error("unexpected tensor `{0}` in manifest")]
    UnexpectedTensor(String),
    #[error("token id {id} at position {pos} is outside the vocabulary ({vocab})")]
    TokenOutOfRange { pos: usize, id: usize, vocab: usize },
    #[error("{ids} token ids but layout has {layout} positions")]
    LengthMismatch { ids: usize, layout: usize },
    #[error("empty input sequence")]
    EmptyInput,
    #[error(transparent)]
    Reduction(#[from] crate::reductions::ReductionError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FfnKind {
    Vanilla,
    Gated,
}

impl FfnKind {
    /// Tensors stored per layer: four attention projections, two norm gains,
    /// then the FFN tensors.
    pub fn tensors_per_layer(self) -> usize {
        6 + match self {
            FfnKind::Vanilla => 4,
            FfnKind::Gated => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub ffn_kind: FfnKind,
    pub vocab_size: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 8,
            d_model: 64,
            d_ff: 256,
            n_heads: 4,
            ffn_kind: FfnKind::Vanilla,
            vocab_size: 512,
            activation: Activation::Relu,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.n_layers == 0 {
            return bad("n_layers must be at least 1".into());
        }
        if self.d_ff == 0 {
            return bad("d_ff must be at least 1".into());
        }
        if self.d_model == 0 || self.n_heads == 0 || self.vocab_size == 0 {
            return bad("d_model, n_heads and vocab_size must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn tensor_count(&self) -> usize {
        2 + self.n_layers * self.ffn_kind.tensors_per_layer() + 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Modality {
    Visual,
    Text,
}

impl Modality {
    fn embedding_row(self) -> usize {
        match self {
            Modality::Text => 0,
            Modality::Visual => 1,
        }
    }
}

/// Per-position modality tags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenLayout {
    tags: Vec<Modality>,
}

impl TokenLayout {
    pub fn new(tags: Vec<Modality>) -> Self {
        Self { tags }
    }

    /// `[text prefix][visual block][text suffix]`.
    pub fn prompt_image_question(prefix: usize, visual: usize, suffix: usize) -> Self {
        let mut tags = vec![Modality::Text; prefix];
        tags.extend(std::iter::repeat_n(Modality::Visual, visual));
        tags.extend(std::iter::repeat_n(Modality::Text, suffix));
        Self { tags }
    }

    /// Parses a compact `T`/`V` string such as `"TTVVVVT"`.
    pub fn parse(s: &str) -> Option<Self> {
        s.chars()
            .map(|c| match c {
                'T' | 't' => Some(Modality::Text),
                'V' | 'v' => Some(Modality::Visual),
                _ => None,
            })
            .collect::<Option<Vec<_>>>()
            .map(Self::new)
    }

    pub fn tags(&self) -> &[Modality] {
        &self.tags
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn get(&self, pos: usize) -> Modality {
        self.tags[pos]
    }

    pub fn is_visual(&self, pos: usize) -> bool {
        self.tags[pos] == Modality::Visual
    }

    pub fn n_visual(&self) -> usize {
        self.tags.iter().filter(|&&t| t == Modality::Visual).count()
    }

    pub fn n_text(&self) -> usize {
        self.len() - self.n_visual()
    }

    pub fn visual_positions(&self) -> Vec<usize> {
        self.positions_of(Modality::Visual)
    }

    pub fn text_positions(&self) -> Vec<usize> {
        self.positions_of(Modality::Text)
    }

    fn positions_of(&self, m: Modality) -> Vec<usize> {
        self.tags
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == m)
            .map(|(i, _)| i)
            .collect()
    }

    /// Layout restricted to `kept` positions (ascending).
    pub fn subset(&self, kept: &[usize]) -> TokenLayout {
        TokenLayout::new(kept.iter().map(|&p| self.tags[p]).collect())
    }
}

impl std::fmt::Display for TokenLayout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for t in &self.tags {
            f.write_str(match t {
                Modality::Text => "T",
                Modality::Visual => "V",
            })?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FfnWeights {
    /// `act(x·w1 + b1)·w2 + b2`
    Vanilla {
        w1: Matrix,
        b1: Vec<f64>,
        w2: Matrix,
        b2: Vec<f64>,
    },
    /// `(act(x·wg) ⊙ (x·wu))·wd`
    Gated { wg: Matrix, wu: Matrix, wd: Matrix },
}

impl FfnWeights {
    pub fn kind(&self) -> FfnKind {
        match self {
            FfnWeights::Vanilla { .. } => FfnKind::Vanilla,
            FfnWeights::Gated { .. } => FfnKind::Gated,
        }
    }

    pub fn d_ff(&self) -> usize {
        match self {
            FfnWeights::Vanilla { w1, .. } => w1.cols(),
            FfnWeights::Gated { wg, .. } => wg.cols(),
        }
    }

    /// Hidden activations right before the down projection.
    pub fn hidden(&self, x: &Matrix, act: Activation) -> Result<Matrix, KernelError> {
        match self {
            FfnWeights::Vanilla { w1, b1, .. } => {
                let mut h = matmul(x, w1)?;
                h.add_row_vector(b1)?;
                activation_in_place(&mut h, act);
                Ok(h)
            }
            FfnWeights::Gated { wg, wu, .. } => {
                let mut g = matmul(x, wg)?;
                activation_in_place(&mut g, act);
                g.hadamard(&matmul(x, wu)?)
            }
        }
    }

    /// Down projection of hidden activations.
    pub fn project_down(&self, h: &Matrix) -> Result<Matrix, KernelError> {
        match self {
            FfnWeights::Vanilla { w2, b2, .. } => {
                let mut y = matmul(h, w2)?;
                y.add_row_vector(b2)?;
                Ok(y)
            }
            FfnWeights::Gated { wd, .. } => matmul(h, wd),
        }
    }

    pub fn forward(&self, x: &Matrix, act: Activation) -> Result<Matrix, KernelError> {
        self.project_down(&self.hidden(x, act)?)
    }

    /// Keeps only hidden units `units` (in the given order).
    pub fn slice_hidden(&self, units: &[usize]) -> FfnWeights {
        match self {
            FfnWeights::Vanilla { w1, b1, w2, b2 } => FfnWeights::Vanilla {
                w1: w1.select_cols(units),
                b1: units.iter().map(|&u| b1[u]).collect(),
                w2: w2.select_rows(units),
                b2: b2.clone(),
            },
            FfnWeights::Gated { wg, wu, wd } => FfnWeights::Gated {
                wg: wg.select_cols(units),
                wu: wu.select_cols(units),
                wd: wd.select_rows(units),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub attn_norm: Vec<f64>,
    pub ffn_norm: Vec<f64>,
    pub ffn: FfnWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// vocab × d_model
    pub embedding: Matrix,
    /// 2 × d_model; row 0 text, row 1 visual.
    pub modality_embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f64>,
    /// d_model × vocab
    pub output: Matrix,
}

impl Checkpoint {
    /// Deterministic random weights. Matrices and biases are drawn from
    /// N(0, 0.02²) and rounded to f32 so an in-memory checkpoint equals its
    /// reloaded copy; norm gains start at 1.
    pub fn random_init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut draw = |rows: usize, cols: usize| {
            Matrix::from_fn(rows, cols, |_, _| normal.sample(&mut rng) as f32 as f64)
        };
        let d = config.d_model;
        let f = config.d_ff;
        let embedding = draw(config.vocab_size, d);
        let modality_embedding = draw(2, d);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let wq = draw(d, d);
            let wk = draw(d, d);
            let wv = draw(d, d);
            let wo = draw(d, d);
            let ffn = match config.ffn_kind {
                FfnKind::Vanilla => FfnWeights::Vanilla {
                    w1: draw(d, f),
                    b1: draw(1, f).into_data(),
                    w2: draw(f, d),
                    b2: draw(1, d).into_data(),
                },
                FfnKind::Gated => FfnWeights::Gated {
                    wg: draw(d, f),
                    wu: draw(d, f),
                    wd: draw(f, d),
                },
            };
            layers.push(LayerWeights {
                wq,
                wk,
                wv,
                wo,
                attn_norm: vec![1.0; d],
                ffn_norm: vec![1.0; d],
                ffn,
            });
        }
        let output = draw(d, config.vocab_size);
        Ok(Self {
            config: config.clone(),
            embedding,
            modality_embedding,
            layers,
            final_norm: vec![1.0; d],
            output,
        })
    }

    /// Named tensors in storage order with their shapes.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        fn mat(name: String, m: &Matrix) -> (String, Vec<usize>, &[f64]) {
            (name, vec![m.rows(), m.cols()], m.data())
        }
        out.push(mat("embedding".into(), &self.embedding));
        out.push(mat("modality_embedding".into(), &self.modality_embedding));
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("layers.{i}.");
            out.push(mat(format!("{p}Wq"), &l.wq));
            out.push(mat(format!("{p}Wk"), &l.wk));
            out.push(mat(format!("{p}Wv"), &l.wv));
            out.push(mat(format!("{p}Wo"), &l.wo));
            out.push((format!("{p}attn_norm"), vec![l.attn_norm.len()], &l.attn_norm));
            out.push((format!("{p}ffn_norm"), vec![l.ffn_norm.len()], &l.ffn_norm));
            match &l.ffn {
                FfnWeights::Vanilla { w1, b1, w2, b2 } => {
                    out.push(mat(format!("{p}W1"), w1));
                    out.push((format!("{p}b1"), vec![b1.len()], b1));
                    out.push(mat(format!("{p}W2"), w2));
                    out.push((format!("{p}b2"), vec![b2.len()], b2));
                }
                FfnWeights::Gated { wg, wu, wd } => {
                    out.push(mat(format!("{p}Wg"), wg));
                    out.push(mat(format!("{p}Wu"), wu));
                    out.push(mat(format!("{p}Wd"), wd));
                }
            }
        }
        out.push(("final_norm".into(), vec![self.final_norm.len()], &self.final_norm));
        out.push(mat("output".into(), &self.output));
        out
    }
}

/// Expected (name, shape) list for a config, in storage order.
pub fn expected_tensors(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    let f = config.d_ff;
    let mut out = vec![
        ("embedding".to_string(), vec![config.vocab_size, d]),
        ("modality_embedding".to_string(), vec![2, d]),
    ];
    for i in 0..config.n_layers {
        let p = format!("layers.{i}.");
        for w in ["Wq", "Wk", "Wv", "Wo"] {
            out.push((format!("{p}{w}"), vec![d, d]));
        }
        out.push((format!("{p}attn_norm"), vec![d]));
        out.push((format!("{p}ffn_norm"), vec![d]));
        match config.ffn_kind {
            FfnKind::Vanilla => {
                out.push((format!("{p}W1"), vec![d, f]));
                out.push((format!("{p}b1"), vec![f]));
                out.push((format!("{p}W2"), vec![f, d]));
                out.push((format!("{p}b2"), vec![d]));
            }
            FfnKind::Gated => {
                out.push((format!("{p}Wg"), vec![d, f]));
                out.push((format!("{p}Wu"), vec![d, f]));
                out.push((format!("{p}Wd"), vec![f, d]));
            }
        }
    }
    out.push(("final_norm".to_string(), vec![d]));
    out.push(("output".to_string(), vec![d, config.vocab_size]));
    out
}
