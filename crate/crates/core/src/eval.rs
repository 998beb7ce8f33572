//! Held-out perplexity and weight reconstruction metrics.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::report::TensorError;
use crate::model::{model_forward, BlockWeights, ColScale, ModelBundle, PROJECTIONS};
use crate::numerics::Matrix;

/// Default evaluation window at desk scale.
pub const DEFAULT_EVAL_SEQ_LEN: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// `exp(mean_nll)`.
    pub perplexity: f64,
    /// Mean next-byte negative log-likelihood in nats.
    pub mean_nll: f64,
    pub token_count: usize,
    /// Mean next-byte KL divergence from a reference model, when one is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl_to_reference: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub reconstruction: BTreeMap<String, TensorError>,
}

/// Sum of next-token NLL over one window, in nats.
fn window_nll(m: &ModelBundle, window: &[u32]) -> Result<f64> {
    let logits = model_forward(m, window)?;
    let mut total = 0.0f64;
    for t in 0..window.len() - 1 {
        total -= log_softmax_row(logits.row(t))[window[t + 1] as usize];
    }
    Ok(total)
}

/// Splits `text` into non-overlapping windows of `seq_len` bytes. A shorter
/// tail is kept when it still contains a prediction (two or more bytes).
pub fn eval_windows(text: &[u8], seq_len: usize) -> Vec<Vec<u32>> {
    text.chunks(seq_len.max(2))
        .filter(|c| c.len() >= 2)
        .map(|c| c.iter().map(|&b| b as u32).collect())
        .collect()
}

/// Next-byte cross-entropy of `m` over non-overlapping windows of `text`.
pub fn perplexity(m: &ModelBundle, text: &[u8], seq_len: usize) -> Result<EvalResult> {
    let seq_len = seq_len.min(m.config.max_seq);
    let windows = eval_windows(text, seq_len);
    if windows.is_empty() {
        return Err(Error::EmptyInput("evaluation text"));
    }
    let sums = windows
        .par_iter()
        .map(|w| window_nll(m, w))
        .collect::<Result<Vec<f64>>>()?;
    let token_count: usize = windows.iter().map(|w| w.len() - 1).sum();
    let mean_nll = sums.iter().sum::<f64>() / token_count as f64;
    Ok(EvalResult {
        perplexity: mean_nll.exp(),
        mean_nll,
        token_count,
        kl_to_reference: None,
        reconstruction: BTreeMap::new(),
    })
}

fn log_softmax_row(row: &[f32]) -> Vec<f64> {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v as f64 - lse).collect()
}

/// Mean per-position `KL(p_reference ‖ p_model)` of next-byte
/// distributions over the same windows [`perplexity`] uses, in nats.
pub fn kl_divergence(reference: &ModelBundle, m: &ModelBundle, text: &[u8], seq_len: usize) -> Result<f64> {
    if reference.config != m.config {
        return Err(Error::InvalidConfig("reference and model differ in configuration".into()));
    }
    let windows = eval_windows(text, seq_len.min(m.config.max_seq));
    if windows.is_empty() {
        return Err(Error::EmptyInput("evaluation text"));
    }
    let sums = windows
        .par_iter()
        .map(|w| {
            let (lr, lm) = (model_forward(reference, w)?, model_forward(m, w)?);
            let mut total = 0.0f64;
            for t in 0..w.len() - 1 {
                let (p, q) = (log_softmax_row(lr.row(t)), log_softmax_row(lm.row(t)));
                total += p.iter().zip(&q).map(|(a, b)| a.exp() * (a - b)).sum::<f64>();
            }
            Ok(total)
        })
        .collect::<Result<Vec<f64>>>()?;
    let count: usize = windows.iter().map(|w| w.len() - 1).sum();
    Ok(sums.iter().sum::<f64>() / count as f64)
}

pub fn tensor_error(reference: &Matrix, approx: &Matrix) -> Result<TensorError> {
    let num = reference.diff_frobenius_sq(approx)?;
    let den = reference.frobenius_sq();
    Ok(TensorError {
        frobenius_rel_err: if den > 0.0 { (num / den).sqrt() } else { num.sqrt() },
        max_abs_err: reference.max_abs_diff(approx)? as f64,
    })
}

/// Effective dense weights of a block's projections, undoing any folded
/// column scale so they are comparable with the original weights.
pub fn effective_projections(block: &BlockWeights) -> Result<Vec<(&'static str, Matrix)>> {
    let col = block.down_col_scale.values();
    PROJECTIONS
        .iter()
        .map(|&name| {
            let w = block.projection(name).expect("known projection").materialize().into_owned();
            let w = match (name, &block.down_col_scale, col) {
                ("w_down", _, Some(c)) => w.scale_cols(c)?,
                ("w_up", ColScale::Folded(_), Some(c)) => {
                    let inv: Vec<f32> = c.iter().map(|v| 1.0 / v).collect();
                    w.scale_rows(&inv)?
                }
                _ => w,
            };
            Ok((name, w))
        })
        .collect()
}

/// Per-block, per-projection reconstruction errors against `reference`.
pub fn block_reconstruction(reference: &BlockWeights, quantized: &BlockWeights) -> Result<BTreeMap<String, TensorError>> {
    let refs = effective_projections(reference)?;
    let quant = effective_projections(quantized)?;
    refs.iter()
        .zip(&quant)
        .map(|((name, r), (_, q))| Ok((name.to_string(), tensor_error(r, q)?)))
        .collect()
}

/// Reconstruction table keyed `blocks.{l}.{slot}`.
pub fn reconstruction_table(reference: &ModelBundle, quantized: &ModelBundle) -> Result<BTreeMap<String, TensorError>> {
    if reference.config != quantized.config {
        return Err(Error::InvalidConfig("reference and quantized models differ in configuration".into()));
    }
    let mut out = BTreeMap::new();
    for (l, (r, q)) in reference.blocks.iter().zip(&quantized.blocks).enumerate() {
        for (name, e) in block_reconstruction(r, q)? {
            out.insert(format!("blocks.{l}.{name}"), e);
        }
    }
    Ok(out)
}
