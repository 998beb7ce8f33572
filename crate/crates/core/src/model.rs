//! A small byte-level decoder-only transformer used as the quantization
//! target.
//!
//! Blocks are pre-norm: `h = x + Attn(PreLN(x))`, `y = h + MLP(PostAttnLN(h))`.
//! Both norms are RMSNorm; the post-attention norm carries an additive bias
//! slot that deviation correction writes into. The MLP is the gated form
//! `(silu(a·W_gateᵀ) ⊙ a·W_upᵀ)·W_downᵀ`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, matmul_bt, rmsnorm, softmax_in_place, Matrix, DEFAULT_NORM_EPS};
use crate::quant::Weight;

pub const BYTE_VOCAB: usize = 256;
pub const ROPE_BASE: f64 = 10_000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub rope_enabled: bool,
    pub norm_eps: f64,
}

impl ModelConfig {
    /// The desk-scale configuration used throughout the tests.
    pub fn toy() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_ffn: 128,
            vocab: BYTE_VOCAB,
            max_seq: 128,
            rope_enabled: true,
            norm_eps: DEFAULT_NORM_EPS,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if self.vocab != BYTE_VOCAB {
            return Err(Error::InvalidConfig(format!(
                "vocab must be {BYTE_VOCAB}, got {}",
                self.vocab
            )));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "n_heads {} does not divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if self.rope_enabled && !self.d_head().is_multiple_of(2) {
            return Err(Error::InvalidConfig("rotary encoding needs an even head dimension".into()));
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return Err(Error::InvalidConfig("norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Both quantized input dimensions must be multiples of `group_size`.
    pub fn check_group_size(&self, group_size: usize) -> Result<()> {
        if group_size == crate::quant::PER_CHANNEL {
            return Ok(());
        }
        for cols in [self.d_model, self.d_ffn] {
            if cols % group_size != 0 {
                return Err(Error::GroupSize { cols, group_size });
            }
        }
        Ok(())
    }
}

/// How a down-projection's dual-scale column factors are carried.
#[derive(Clone, Debug, PartialEq, Default)]
pub enum ColScale {
    #[default]
    None,
    /// Already multiplied into the up-projection; kept for reporting only.
    Folded(Vec<f32>),
    /// Applied explicitly to the hidden activations before the down-projection.
    Explicit(Vec<f32>),
}

impl ColScale {
    pub fn values(&self) -> Option<&[f32]> {
        match self {
            ColScale::None => None,
            ColScale::Folded(v) | ColScale::Explicit(v) => Some(v),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub w_q: Weight,
    pub w_k: Weight,
    pub w_v: Weight,
    pub w_o: Weight,
    pub w_up: Weight,
    pub w_gate: Weight,
    pub w_down: Weight,
    pub pre_ln_gamma: Vec<f32>,
    pub post_attn_ln_gamma: Vec<f32>,
    pub post_attn_ln_bias: Vec<f32>,
    pub down_col_scale: ColScale,
}

/// Names of the seven projection slots, in canonical order.
pub const PROJECTIONS: [&str; 7] = ["w_q", "w_k", "w_v", "w_o", "w_up", "w_gate", "w_down"];

impl BlockWeights {
    pub fn projection(&self, name: &str) -> Option<&Weight> {
        Some(match name {
            "w_q" => &self.w_q,
            "w_k" => &self.w_k,
            "w_v" => &self.w_v,
            "w_o" => &self.w_o,
            "w_up" => &self.w_up,
            "w_gate" => &self.w_gate,
            "w_down" => &self.w_down,
            _ => return None,
        })
    }

    pub fn projection_mut(&mut self, name: &str) -> Option<&mut Weight> {
        Some(match name {
            "w_q" => &mut self.w_q,
            "w_k" => &mut self.w_k,
            "w_v" => &mut self.w_v,
            "w_o" => &mut self.w_o,
            "w_up" => &mut self.w_up,
            "w_gate" => &mut self.w_gate,
            "w_down" => &mut self.w_down,
            _ => return None,
        })
    }

    fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let (d, f) = (cfg.d_model, cfg.d_ffn);
        let expected = [(d, d), (d, d), (d, d), (d, d), (f, d), (f, d), (d, f)];
        for (name, shape) in PROJECTIONS.iter().zip(expected) {
            let got = self.projection(name).expect("known projection").shape();
            if got != shape {
                return Err(Error::ShapeMismatch {
                    op: name,
                    left: shape,
                    right: got,
                });
            }
        }
        for (name, v) in [
            ("pre_ln_gamma", &self.pre_ln_gamma),
            ("post_attn_ln_gamma", &self.post_attn_ln_gamma),
            ("post_attn_ln_bias", &self.post_attn_ln_bias),
        ] {
            if v.len() != d {
                return Err(Error::LengthMismatch {
                    op: name,
                    expected: d,
                    actual: v.len(),
                });
            }
        }
        if let Some(c) = self.down_col_scale.values() {
            if c.len() != f {
                return Err(Error::LengthMismatch {
                    op: "down_col_scale",
                    expected: f,
                    actual: c.len(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub embedding: Matrix,
    pub blocks: Vec<BlockWeights>,
    pub final_norm_gamma: Vec<f32>,
    pub head: Matrix,
}

impl ModelBundle {
    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        if self.blocks.len() != cfg.n_layers {
            return Err(Error::LengthMismatch {
                op: "blocks",
                expected: cfg.n_layers,
                actual: self.blocks.len(),
            });
        }
        for (name, m) in [("embedding", &self.embedding), ("head", &self.head)] {
            if m.shape() != (cfg.vocab, cfg.d_model) {
                return Err(Error::ShapeMismatch {
                    op: name,
                    left: (cfg.vocab, cfg.d_model),
                    right: m.shape(),
                });
            }
        }
        if self.final_norm_gamma.len() != cfg.d_model {
            return Err(Error::LengthMismatch {
                op: "final_norm_gamma",
                expected: cfg.d_model,
                actual: self.final_norm_gamma.len(),
            });
        }
        self.blocks.iter().try_for_each(|b| b.validate(cfg))
    }

    /// Token embeddings for `tokens`.
    pub fn embed(&self, tokens: &[u32]) -> Result<Matrix> {
        check_tokens(&self.config, tokens)?;
        let d = self.config.d_model;
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            data.extend_from_slice(self.embedding.row(t as usize));
        }
        Ok(Matrix::from_raw(tokens.len(), d, data))
    }

    /// Final norm and output head.
    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        let zeros = vec![0.0; self.config.d_model];
        let normed = rmsnorm(x, &self.final_norm_gamma, &zeros, self.config.norm_eps)?;
        matmul_bt(&normed, &self.head)
    }
}

fn check_tokens(cfg: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput("token sequence"));
    }
    if tokens.len() > cfg.max_seq {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: cfg.max_seq,
        });
    }
    if let Some(&id) = tokens.iter().find(|&&t| t as usize >= cfg.vocab) {
        return Err(Error::TokenOutOfRange { id, vocab: cfg.vocab });
    }
    Ok(())
}

/// Rotary position encoding applied in place to one head slice of every row.
fn apply_rope(x: &mut Matrix, head: usize, d_head: usize) {
    let half = d_head / 2;
    for t in 0..x.rows() {
        let row = &mut x.row_mut(t)[head * d_head..(head + 1) * d_head];
        for i in 0..half {
            let freq = ROPE_BASE.powf(-2.0 * i as f64 / d_head as f64);
            let (sin, cos) = (t as f64 * freq).sin_cos();
            let (a, b) = (row[2 * i] as f64, row[2 * i + 1] as f64);
            row[2 * i] = (a * cos - b * sin) as f32;
            row[2 * i + 1] = (a * sin + b * cos) as f32;
        }
    }
}

/// Causal multi-head self-attention on already-normalized input `a`.
pub fn attention(block: &BlockWeights, a: &Matrix, cfg: &ModelConfig) -> Result<Matrix> {
    let mut q = matmul_bt(a, &block.w_q.materialize())?;
    let mut k = matmul_bt(a, &block.w_k.materialize())?;
    let v = matmul_bt(a, &block.w_v.materialize())?;
    let (l, dh) = (a.rows(), cfg.d_head());
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Matrix::zeros(l, cfg.d_model);
    let mut scores = vec![0.0f32; l];
    for h in 0..cfg.n_heads {
        if cfg.rope_enabled {
            apply_rope(&mut q, h, dh);
            apply_rope(&mut k, h, dh);
        }
        let cols = h * dh..(h + 1) * dh;
        for t in 0..l {
            let qt = &q.row(t)[cols.clone()];
            let s = &mut scores[..=t];
            for (u, su) in s.iter_mut().enumerate() {
                *su = (numerics::dot(qt, &k.row(u)[cols.clone()]) * scale) as f32;
            }
            softmax_in_place(s);
            let mut acc = vec![0.0f64; dh];
            for (u, &p) in s.iter().enumerate() {
                for (o, &vv) in acc.iter_mut().zip(&v.row(u)[cols.clone()]) {
                    *o += p as f64 * vv as f64;
                }
            }
            for (dst, o) in ctx.row_mut(t)[cols.clone()].iter_mut().zip(acc) {
                *dst = o as f32;
            }
        }
    }
    matmul_bt(&ctx, &block.w_o.materialize())
}

/// `(silu(x·W_gateᵀ) ⊙ x·W_upᵀ)·W_downᵀ`.
pub fn mlp_forward(x: &Matrix, w_gate: &Matrix, w_up: &Matrix, w_down: &Matrix) -> Result<Matrix> {
    let hidden = mlp_hidden(x, w_gate, w_up)?;
    matmul_bt(&hidden, w_down)
}

/// Same as [`mlp_forward`] with `diag(col_scale)` inserted before the
/// down-projection.
pub fn mlp_forward_explicit(
    x: &Matrix,
    w_gate: &Matrix,
    w_up: &Matrix,
    w_down: &Matrix,
    col_scale: &[f32],
) -> Result<Matrix> {
    let hidden = mlp_hidden(x, w_gate, w_up)?.scale_cols(col_scale)?;
    matmul_bt(&hidden, w_down)
}

fn mlp_hidden(x: &Matrix, w_gate: &Matrix, w_up: &Matrix) -> Result<Matrix> {
    let gate = matmul_bt(x, w_gate)?;
    let up = matmul_bt(x, w_up)?;
    numerics::hadamard(&numerics::silu(&gate), &up)
}

fn block_mlp(block: &BlockWeights, a: &Matrix) -> Result<Matrix> {
    let gate = block.w_gate.materialize();
    let up = block.w_up.materialize();
    let down = block.w_down.materialize();
    match &block.down_col_scale {
        ColScale::Explicit(c) => mlp_forward_explicit(a, &gate, &up, &down, c),
        ColScale::None | ColScale::Folded(_) => mlp_forward(a, &gate, &up, &down),
    }
}

/// `h = x + Attn(PreLN(x))`.
pub fn attention_residual(block: &BlockWeights, x: &Matrix, cfg: &ModelConfig) -> Result<Matrix> {
    if x.cols() != cfg.d_model {
        return Err(Error::ShapeMismatch {
            op: "block input",
            left: (x.rows(), cfg.d_model),
            right: x.shape(),
        });
    }
    if x.rows() > cfg.max_seq {
        return Err(Error::SequenceTooLong {
            len: x.rows(),
            max: cfg.max_seq,
        });
    }
    let zeros = vec![0.0; cfg.d_model];
    let a = rmsnorm(x, &block.pre_ln_gamma, &zeros, cfg.norm_eps)?;
    numerics::add(x, &attention(block, &a, cfg)?)
}

/// `PostAttnLN(h)` including the correction bias.
pub fn post_attn_norm(block: &BlockWeights, h: &Matrix, cfg: &ModelConfig) -> Result<Matrix> {
    rmsnorm(h, &block.post_attn_ln_gamma, &block.post_attn_ln_bias, cfg.norm_eps)
}

/// `PreLN(x)` of a block (no bias slot).
pub fn pre_norm(block: &BlockWeights, x: &Matrix, cfg: &ModelConfig) -> Result<Matrix> {
    rmsnorm(x, &block.pre_ln_gamma, &vec![0.0; cfg.d_model], cfg.norm_eps)
}

/// Which intermediate activation [`block_forward`] returns alongside its output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Capture {
    None,
    PostAttnLn,
}

pub fn block_forward(
    block: &BlockWeights,
    x: &Matrix,
    cfg: &ModelConfig,
    capture: Capture,
) -> Result<(Matrix, Option<Matrix>)> {
    let h = attention_residual(block, x, cfg)?;
    let a = post_attn_norm(block, &h, cfg)?;
    let y = numerics::add(&h, &block_mlp(block, &a)?)?;
    Ok((y, (capture == Capture::PostAttnLn).then_some(a)))
}

/// Logits `L × vocab` for one token sequence.
pub fn model_forward(m: &ModelBundle, tokens: &[u32]) -> Result<Matrix> {
    let mut x = m.embed(tokens)?;
    for block in &m.blocks {
        x = block_forward(block, &x, &m.config, Capture::None)?.0;
    }
    m.logits(&x)
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let std = 1.0 / (cols as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            (z * std) as f32
        })
        .collect();
    Matrix::from_raw(rows, cols, data)
}

/// Seeded random weights, each tensor `N(0, 1/fan_in)` with `fan_in` the
/// number of input columns. Norm gains start at one, biases at zero.
pub fn init_random(cfg: &ModelConfig, seed: u64) -> Result<ModelBundle> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, f) = (cfg.d_model, cfg.d_ffn);
    let embedding = gaussian(&mut rng, cfg.vocab, d);
    let blocks = (0..cfg.n_layers)
        .map(|_| BlockWeights {
            w_q: gaussian(&mut rng, d, d).into(),
            w_k: gaussian(&mut rng, d, d).into(),
            w_v: gaussian(&mut rng, d, d).into(),
            w_o: gaussian(&mut rng, d, d).into(),
            w_up: gaussian(&mut rng, f, d).into(),
            w_gate: gaussian(&mut rng, f, d).into(),
            w_down: gaussian(&mut rng, d, f).into(),
            pre_ln_gamma: vec![1.0; d],
            post_attn_ln_gamma: vec![1.0; d],
            post_attn_ln_bias: vec![0.0; d],
            down_col_scale: ColScale::None,
        })
        .collect();
    let head = gaussian(&mut rng, cfg.vocab, d);
    Ok(ModelBundle {
        config: cfg.clone(),
        embedding,
        blocks,
        final_norm_gamma: vec![1.0; d],
        head,
    })
}
