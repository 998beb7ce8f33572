//! Block-wise quantization driver.
//!
//! For each block, in order:
//!
//! 1. quantize `W_q, W_k, W_v, W_o`;
//! 2. compare post-attention-norm activations of the full-precision and
//!    attention-quantized block on the current calibration inputs, and add
//!    the mean deviation to the norm's bias (deviation-aware correction);
//! 3. quantize `W_up, W_gate`, then the down-projection, either plainly,
//!    after static smoothing, or with dual-scale quantization whose column
//!    scale is folded into the quantized up-projection;
//! 4. forward the calibration inputs through the finished quantized block
//!    to produce the next block's inputs.
//!
//! Calibration forwards for different sequences run in parallel; all
//! accumulation happens in sequence order so results do not depend on the
//! thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dac::{DeviationAccumulator, ReductionAccumulator};
use crate::dsq::{apply_updown_scaling, dsq_quantize, fold_scale, static_smooth_eta, DEFAULT_DSQ_ITERS};
use crate::error::{Error, Result};
use crate::eval::{block_reconstruction, perplexity, DEFAULT_EVAL_SEQ_LEN};
use crate::io::calibration::CalibrationSet;
use crate::io::report::{
    AblationReport, AblationRow, BlockReport, DsqSummary, ReportKind, SiteStats, SnrReport, REPORT_VERSION,
};
use crate::model::{
    attention_residual, block_forward, post_attn_norm, pre_norm, BlockWeights, Capture, ColScale, ModelBundle,
};
use crate::numerics::{rmsnorm, Matrix};
use crate::quant::{QuantConfig, Quantizer, Weight};

/// Default number of calibration sequences.
pub const DEFAULT_CALIB_SAMPLES: usize = 128;
/// Full-scale calibration sequence length.
pub const FULL_CALIB_SEQ_LEN: usize = 2048;
/// Desk-scale calibration sequence length.
pub const TOY_CALIB_SEQ_LEN: usize = 128;
/// Desk-scale group size (toy dimensions are not 128-aligned).
pub const TOY_GROUP_SIZE: usize = 32;

/// Calibration sequences are processed in batches of this many; each batch
/// is forwarded in parallel and then accumulated in order.
const BATCH: usize = 32;

const ATTENTION: [&str; 4] = ["w_q", "w_k", "w_v", "w_o"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub quantizer: Quantizer,
    pub dsq_iters: usize,
    pub dac_enabled: bool,
    pub dsq_enabled: bool,
    pub static_smooth_enabled: bool,
    pub calib_samples: usize,
    pub calib_seq_len: usize,
    /// Fold the dual-scale column factor into the up-projection. When off,
    /// the factor is applied explicitly at inference (a debugging path).
    pub fold_col_scale: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            quantizer: Quantizer::Rtn(QuantConfig::default()),
            dsq_iters: DEFAULT_DSQ_ITERS,
            dac_enabled: true,
            dsq_enabled: true,
            static_smooth_enabled: false,
            calib_samples: DEFAULT_CALIB_SAMPLES,
            calib_seq_len: FULL_CALIB_SEQ_LEN,
            fold_col_scale: true,
        }
    }
}

impl PipelineConfig {
    /// Defaults at desk scale: 2-bit, group 32, 128-byte sequences.
    pub fn toy() -> Self {
        Self {
            quantizer: Quantizer::Rtn(QuantConfig {
                bits: 2,
                group_size: TOY_GROUP_SIZE,
            }),
            calib_seq_len: TOY_CALIB_SEQ_LEN,
            ..Self::default()
        }
    }

    /// Plain round-to-nearest with no DSQ or DAC.
    pub fn baseline(mut self) -> Self {
        self.dsq_enabled = false;
        self.dac_enabled = false;
        self.static_smooth_enabled = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dsq_enabled && self.static_smooth_enabled {
            return Err(Error::InvalidConfig(
                "dual-scale quantization and static smoothing are mutually exclusive".into(),
            ));
        }
        if self.calib_samples == 0 {
            return Err(Error::InvalidConfig("calib_samples must be at least 1".into()));
        }
        if self.calib_seq_len == 0 {
            return Err(Error::InvalidConfig("calib_seq_len must be at least 1".into()));
        }
        if let Some(q) = self.quantizer.config() {
            q.validate()?;
        }
        Ok(())
    }
}

/// Result of a pipeline run.
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub model: ModelBundle,
    pub report: SnrReport,
}

fn par_map<T: Send>(inputs: &[Matrix], f: impl Fn(&Matrix) -> Result<T> + Sync) -> Result<Vec<T>> {
    inputs.par_iter().map(&f).collect()
}

fn embed_all(m: &ModelBundle, set: &CalibrationSet) -> Result<Vec<Matrix>> {
    set.sequences()
        .par_iter()
        .map(|s| m.embed(s))
        .collect()
}

/// Converts a block to plain dense-equivalent form: an explicit column
/// scale is pushed into the down-projection, a folded one is forgotten
/// (its effect already lives in the up-projection).
fn normalize_block(block: &BlockWeights) -> Result<BlockWeights> {
    let mut b = block.clone();
    if let ColScale::Explicit(c) = &block.down_col_scale {
        b.w_down = Weight::Dense(block.w_down.materialize().scale_cols(c)?);
    }
    b.down_col_scale = ColScale::None;
    Ok(b)
}

fn check_inputs(m: &ModelBundle, calib: &CalibrationSet, cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    m.validate()?;
    if let Some(q) = cfg.quantizer.config() {
        m.config.check_group_size(q.group_size)?;
    }
    if calib.is_empty() {
        return Err(Error::Calibration("calibration set is empty".into()));
    }
    CalibrationSet::new(calib.sequences().to_vec(), m.config.vocab, m.config.max_seq)?;
    Ok(())
}

/// Post-attention-norm activations of `fp` and `q` on the same inputs.
fn post_attn_pair(fp: &BlockWeights, q: &BlockWeights, x: &Matrix, m: &ModelBundle) -> Result<(Matrix, Matrix)> {
    let cfg = &m.config;
    let a_fp = post_attn_norm(fp, &attention_residual(fp, x, cfg)?, cfg)?;
    let a_q = post_attn_norm(q, &attention_residual(q, x, cfg)?, cfg)?;
    Ok((a_fp, a_q))
}

/// Streams deviation statistics between `fp` and `q` post-attention norms.
fn accumulate_deviation(fp: &BlockWeights, q: &BlockWeights, inputs: &[Matrix], m: &ModelBundle) -> Result<DeviationAccumulator> {
    let mut acc = DeviationAccumulator::new(m.config.d_model);
    for batch in inputs.chunks(BATCH) {
        for (a_fp, a_q) in par_map(batch, |x| post_attn_pair(fp, q, x, m))? {
            acc.push(&a_fp, &a_q)?;
        }
    }
    Ok(acc)
}

/// Measures the per-feature MSE reduction that adding `bias` to the
/// post-attention norm of `q` achieves against `fp` on `inputs`. The bias is
/// a pure output offset, so it is applied to the uncorrected activations.
fn measure_reduction(fp: &BlockWeights, q: &BlockWeights, bias: &[f32], inputs: &[Matrix], m: &ModelBundle) -> Result<Vec<f64>> {
    let mut acc = ReductionAccumulator::new(m.config.d_model);
    for batch in inputs.chunks(BATCH) {
        for (a_fp, a_q) in par_map(batch, |x| post_attn_pair(fp, q, x, m))? {
            acc.push(&a_fp, &a_q, bias)?;
        }
    }
    Ok(acc.finish())
}

/// Quantizes the MLP of `qb` (whose source weights are in `fp`).
fn quantize_mlp(fp: &BlockWeights, qb: &mut BlockWeights, cfg: &PipelineConfig) -> Result<Option<DsqSummary>> {
    let up = fp.w_up.materialize();
    let gate = fp.w_gate.materialize();
    let down = fp.w_down.materialize();

    let (up_src, down_src, smooth) = if cfg.static_smooth_enabled {
        let eta = static_smooth_eta(&down);
        let (u, d) = apply_updown_scaling(&up, &gate, &down, &eta)?;
        (u, d, Some(eta))
    } else {
        (up.into_owned(), down.into_owned(), None)
    };

    qb.w_gate = cfg.quantizer.apply(&gate)?;
    qb.w_up = cfg.quantizer.apply(&up_src)?;
    qb.down_col_scale = smooth.map_or(ColScale::None, |eta| ColScale::Folded(eta.eta().to_vec()));

    match (cfg.dsq_enabled, cfg.quantizer) {
        (true, Quantizer::Rtn(qcfg)) => {
            let res = dsq_quantize(&down_src, &qcfg, cfg.dsq_iters)?;
            let summary = DsqSummary {
                iterations_run: res.iterations_run,
                objective_trace: res.objective_trace.clone(),
            };
            qb.w_down = Weight::Quantized(res.q_down);
            if cfg.fold_col_scale {
                let q_up = qb.w_up.as_quantized().expect("RTN quantizer yields quantized slots");
                qb.w_up = Weight::Quantized(fold_scale(q_up, &res.col_scale)?);
                qb.down_col_scale = ColScale::Folded(res.col_scale);
            } else {
                qb.down_col_scale = ColScale::Explicit(res.col_scale);
            }
            Ok(Some(summary))
        }
        _ => {
            qb.w_down = cfg.quantizer.apply(&down_src)?;
            Ok(None)
        }
    }
}

/// Runs the full pipeline on `m`. See [`run_d2quant_with_holdout`].
pub fn run_d2quant(m: &ModelBundle, calib: &CalibrationSet, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    run_d2quant_with_holdout(m, calib, None, cfg)
}

/// Runs the full pipeline. `holdout` sequences are propagated alongside the
/// calibration data and used only to measure how well each correction bias
/// generalizes; they never influence the quantized weights or biases.
pub fn run_d2quant_with_holdout(
    m: &ModelBundle,
    calib: &CalibrationSet,
    holdout: Option<&CalibrationSet>,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput> {
    check_inputs(m, calib, cfg)?;
    if let Some(h) = holdout {
        CalibrationSet::new(h.sequences().to_vec(), m.config.vocab, m.config.max_seq)?;
    }
    let calib = calib.take(cfg.calib_samples.min(calib.len()))?;

    let mut out = m.clone();
    let mut inputs = embed_all(m, &calib)?;
    let mut held = match holdout {
        Some(h) => embed_all(m, h)?,
        None => Vec::new(),
    };
    let mut reports = Vec::with_capacity(m.config.n_layers);

    for l in 0..m.config.n_layers {
        let fp = normalize_block(&m.blocks[l])?;
        let mut qb = fp.clone();
        for name in ATTENTION {
            let src = fp.projection(name).expect("attention slot").materialize();
            *qb.projection_mut(name).expect("attention slot") = cfg.quantizer.apply(&src)?;
        }

        let stats = accumulate_deviation(&fp, &qb, &inputs, &out)?.finish()?;
        let mut site = SiteStats::from_stats(&stats);
        if cfg.dac_enabled {
            let bias = stats.bias();
            site.realized_reduction = Some(measure_reduction(&fp, &qb, &bias, &inputs, &out)?);
            if !held.is_empty() {
                site.holdout_realized_reduction = Some(measure_reduction(&fp, &qb, &bias, &held, &out)?);
            }
            for (b, mu) in qb.post_attn_ln_bias.iter_mut().zip(&bias) {
                *b += mu;
            }
        }

        let dsq = quantize_mlp(&fp, &mut qb, cfg)?;
        let tensors = block_reconstruction(&fp, &qb)?;

        let mcfg = &out.config;
        inputs = par_map(&inputs, |x| Ok(block_forward(&qb, x, mcfg, Capture::None)?.0))?;
        held = par_map(&held, |x| Ok(block_forward(&qb, x, mcfg, Capture::None)?.0))?;
        out.blocks[l] = qb;

        reports.push(BlockReport {
            block: l,
            post_attn: Some(site),
            pre_norm: None,
            dac_applied: cfg.dac_enabled,
            dsq,
            tensors,
        });
    }

    let report = SnrReport::new(ReportKind::Quantize, 0, Some(cfg.clone()), m.config.clone(), reports);
    Ok(PipelineOutput { model: out, report })
}

/// Per-block deviation diagnostics on shadow copies; `m` is not modified.
///
/// For every block, with inputs from the full-precision prefix:
/// * post-attention site: quantize only the attention projections and
///   compare post-attention-norm outputs;
/// * pre-norm site: quantize only the MLP projections and compare the
///   next block's pre-norm outputs (the final norm after the last block).
pub fn diagnose(m: &ModelBundle, calib: &CalibrationSet, quantizer: Quantizer) -> Result<SnrReport> {
    m.validate()?;
    if let Some(q) = quantizer.config() {
        q.validate()?;
        m.config.check_group_size(q.group_size)?;
    }
    CalibrationSet::new(calib.sequences().to_vec(), m.config.vocab, m.config.max_seq)?;
    let cfg = &m.config;
    let zeros = vec![0.0f32; cfg.d_model];
    let mut inputs = embed_all(m, calib)?;
    let mut reports = Vec::with_capacity(cfg.n_layers);

    for l in 0..cfg.n_layers {
        let fp = normalize_block(&m.blocks[l])?;
        let mut attn_q = fp.clone();
        for name in ATTENTION {
            let src = fp.projection(name).expect("attention slot").materialize();
            *attn_q.projection_mut(name).expect("attention slot") = quantizer.apply(&src)?;
        }
        let mut mlp_q = fp.clone();
        for name in ["w_up", "w_gate", "w_down"] {
            let src = fp.projection(name).expect("mlp slot").materialize();
            *mlp_q.projection_mut(name).expect("mlp slot") = quantizer.apply(&src)?;
        }
        let post = accumulate_deviation(&fp, &attn_q, &inputs, m)?.finish()?;

        let next_norm = |y: &Matrix| match m.blocks.get(l + 1) {
            Some(next) => pre_norm(next, y, cfg),
            None => rmsnorm(y, &m.final_norm_gamma, &zeros, cfg.norm_eps),
        };
        let mut pre_acc = DeviationAccumulator::new(cfg.d_model);
        let mut next_inputs = Vec::with_capacity(inputs.len());
        for batch in inputs.chunks(BATCH) {
            let outs = par_map(batch, |x| {
                let y_fp = block_forward(&fp, x, cfg, Capture::None)?.0;
                let y_q = block_forward(&mlp_q, x, cfg, Capture::None)?.0;
                Ok((next_norm(&y_fp)?, next_norm(&y_q)?, y_fp))
            })?;
            for (n_fp, n_q, y_fp) in outs {
                pre_acc.push(&n_fp, &n_q)?;
                next_inputs.push(y_fp);
            }
        }
        inputs = next_inputs;

        reports.push(BlockReport {
            block: l,
            post_attn: Some(SiteStats::from_stats(&post)),
            pre_norm: Some(SiteStats::from_stats(&pre_acc.finish()?)),
            dac_applied: false,
            dsq: None,
            tensors: Default::default(),
        });
    }
    Ok(SnrReport::new(ReportKind::Diagnose, 0, None, cfg.clone(), reports))
}

/// Which cells [`ablation_matrix`] evaluates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    /// Baseline, +DSQ, +DAC, +DSQ+DAC.
    pub components: bool,
    /// Static smoothing of the down-projection, without DSQ or DAC.
    pub static_smooth: bool,
    /// DSQ-only rows at these iteration counts.
    pub dsq_iters: Vec<usize>,
    /// DSQ+DAC rows at these calibration sizes.
    pub calib_sizes: Vec<usize>,
    pub eval_seq_len: usize,
    /// Held-out sequences used to measure correction generalization.
    pub holdout_sequences: usize,
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self {
            components: true,
            static_smooth: true,
            dsq_iters: vec![0, 1, 3, 15],
            calib_sizes: vec![16, 32, 64, 128],
            eval_seq_len: DEFAULT_EVAL_SEQ_LEN,
            holdout_sequences: 32,
        }
    }
}

impl AblationGrid {
    pub fn len(&self) -> usize {
        4 * self.components as usize + self.static_smooth as usize + self.dsq_iters.len() + self.calib_sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(group, label, config)` for every cell, in report order.
    pub fn cells(&self, base: &PipelineConfig) -> Vec<(String, String, PipelineConfig)> {
        let plain = base.clone().baseline();
        let mut cells = Vec::with_capacity(self.len());
        if self.components {
            for (label, dsq, dac) in [
                ("baseline", false, false),
                ("+dsq", true, false),
                ("+dac", false, true),
                ("+dsq+dac", true, true),
            ] {
                let mut c = plain.clone();
                c.dsq_enabled = dsq;
                c.dac_enabled = dac;
                cells.push(("components".into(), label.into(), c));
            }
        }
        if self.static_smooth {
            let mut c = plain.clone();
            c.static_smooth_enabled = true;
            cells.push(("dsq_design".into(), "+static_smooth".into(), c));
        }
        for &it in &self.dsq_iters {
            let mut c = plain.clone();
            c.dsq_enabled = true;
            c.dsq_iters = it;
            cells.push(("dsq_design".into(), format!("+dsq(iters={it})"), c));
        }
        for &n in &self.calib_sizes {
            let mut c = plain.clone();
            c.dsq_enabled = true;
            c.dac_enabled = true;
            c.calib_samples = n;
            cells.push(("calib_size".into(), format!("+dsq+dac(calib={n})"), c));
        }
        cells
    }
}

/// Runs every cell of `grid` on the same model and data and reports
/// held-out perplexity, reconstruction error and realized correction.
pub fn ablation_matrix(
    m: &ModelBundle,
    calib: &CalibrationSet,
    holdout_text: &[u8],
    base: &PipelineConfig,
    grid: &AblationGrid,
) -> Result<AblationReport> {
    base.clone().baseline().validate()?;
    let holdout = CalibrationSet::from_bytes(holdout_text, grid.holdout_sequences.max(1), base.calib_seq_len.min(m.config.max_seq))?;
    let fp_eval = perplexity(m, holdout_text, grid.eval_seq_len)?;
    let mut rows = Vec::with_capacity(grid.len());
    for (group, label, cfg) in grid.cells(base) {
        let out = run_d2quant_with_holdout(m, calib, Some(&holdout), &cfg)?;
        let eval = perplexity(&out.model, holdout_text, grid.eval_seq_len)?;
        let s = &out.report.summary;
        rows.push(AblationRow {
            group,
            label,
            dsq: cfg.dsq_enabled,
            dac: cfg.dac_enabled,
            static_smooth: cfg.static_smooth_enabled,
            dsq_iters: cfg.dsq_iters,
            calib_samples: cfg.calib_samples.min(calib.len()),
            perplexity: eval.perplexity,
            mean_nll: eval.mean_nll,
            mean_rel_err: s.mean_rel_err.unwrap_or(0.0),
            down_rel_err: s.mean_down_rel_err.unwrap_or(0.0),
            realized_reduction: s.mean_realized_reduction.unwrap_or(0.0),
            holdout_realized_reduction: s.mean_holdout_realized_reduction.unwrap_or(0.0),
        });
    }
    Ok(AblationReport {
        format_version: REPORT_VERSION.into(),
        kind: ReportKind::Ablation,
        seed: 0,
        base: base.clone(),
        model: m.config.clone(),
        full_precision_perplexity: fp_eval.perplexity,
        rows,
    })
}
