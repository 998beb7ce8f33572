//! JSON reports produced by quantization, diagnosis and ablation runs.
//!
//! Every report carries `format_version` and `kind`. Numbers must be
//! finite: a report with NaN or infinity anywhere is refused at write time
//! rather than silently serialized as `null`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dac::DeviationStats;
use crate::io::artifact::write_atomic;
use crate::model::ModelConfig;
use crate::pipeline::PipelineConfig;

pub const REPORT_VERSION: &str = "d2q-report/1";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("report field {0} is not finite")]
    NonFinite(String),
    #[error("report field {field} has length {actual}, expected {expected}")]
    Length {
        field: String,
        expected: usize,
        actual: usize,
    },
    #[error("cannot write report to {path}: {reason}")]
    Write { path: String, reason: String },
    #[error("cannot read report {path}: {reason}")]
    Read { path: String, reason: String },
}

/// Deviation statistics at one normalization site, pooled over the
/// calibration tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteStats {
    pub token_count: usize,
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub snr_diag: Vec<f64>,
    pub predicted_reduction: Vec<f64>,
    /// Measured reduction on the calibration tokens after the bias was written.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub realized_reduction: Option<Vec<f64>>,
    /// Measured reduction on held-out tokens the bias was not fitted on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holdout_realized_reduction: Option<Vec<f64>>,
}

impl SiteStats {
    pub fn from_stats(s: &DeviationStats) -> Self {
        Self {
            token_count: s.token_count,
            mu: s.mu.clone(),
            sigma2: s.sigma2.clone(),
            snr_diag: s.snr_diag.clone(),
            predicted_reduction: s.reduction.clone(),
            realized_reduction: None,
            holdout_realized_reduction: None,
        }
    }

    pub fn mean_snr(&self) -> f64 {
        crate::dac::mean(&self.snr_diag)
    }

    pub fn mean_predicted(&self) -> f64 {
        crate::dac::mean(&self.predicted_reduction)
    }

    pub fn mean_realized(&self) -> Option<f64> {
        self.realized_reduction.as_deref().map(crate::dac::mean)
    }

    pub fn mean_holdout_realized(&self) -> Option<f64> {
        self.holdout_realized_reduction.as_deref().map(crate::dac::mean)
    }

    fn check(&self, prefix: &str, width: usize) -> Result<(), ReportError> {
        let mut arrays = vec![
            ("mu", &self.mu),
            ("sigma2", &self.sigma2),
            ("snr_diag", &self.snr_diag),
            ("predicted_reduction", &self.predicted_reduction),
        ];
        if let Some(r) = &self.realized_reduction {
            arrays.push(("realized_reduction", r));
        }
        if let Some(r) = &self.holdout_realized_reduction {
            arrays.push(("holdout_realized_reduction", r));
        }
        for (name, v) in arrays {
            let field = format!("{prefix}.{name}");
            if v.len() != width {
                return Err(ReportError::Length {
                    field,
                    expected: width,
                    actual: v.len(),
                });
            }
            finite(&field, v)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorError {
    pub frobenius_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DsqSummary {
    pub iterations_run: usize,
    pub objective_trace: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub block: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_attn: Option<SiteStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pre_norm: Option<SiteStats>,
    pub dac_applied: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dsq: Option<DsqSummary>,
    /// Effective reconstruction error of each projection against the
    /// full-precision weight, keyed by slot name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tensors: BTreeMap<String, TensorError>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    Quantize,
    Diagnose,
    Ablation,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub mean_post_attn_snr: Option<f64>,
    pub mean_pre_norm_snr: Option<f64>,
    pub mean_predicted_reduction: Option<f64>,
    pub mean_realized_reduction: Option<f64>,
    pub mean_holdout_realized_reduction: Option<f64>,
    pub mean_down_rel_err: Option<f64>,
    pub mean_rel_err: Option<f64>,
}

/// Per-block deviation statistics, reconstruction errors and the run
/// configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnrReport {
    pub format_version: String,
    pub kind: ReportKind,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pipeline: Option<PipelineConfig>,
    pub model: ModelConfig,
    pub blocks: Vec<BlockReport>,
    pub summary: ReportSummary,
}

impl SnrReport {
    pub fn new(kind: ReportKind, seed: u64, pipeline: Option<PipelineConfig>, model: ModelConfig, blocks: Vec<BlockReport>) -> Self {
        let mut r = Self {
            format_version: REPORT_VERSION.into(),
            kind,
            seed,
            pipeline,
            model,
            blocks,
            summary: ReportSummary::default(),
        };
        r.summary = r.summarize();
        r
    }

    fn summarize(&self) -> ReportSummary {
        let avg = |vals: Vec<f64>| (!vals.is_empty()).then(|| crate::dac::mean(&vals));
        let post: Vec<&SiteStats> = self.blocks.iter().filter_map(|b| b.post_attn.as_ref()).collect();
        let pre: Vec<&SiteStats> = self.blocks.iter().filter_map(|b| b.pre_norm.as_ref()).collect();
        ReportSummary {
            mean_post_attn_snr: avg(post.iter().map(|s| s.mean_snr()).collect()),
            mean_pre_norm_snr: avg(pre.iter().map(|s| s.mean_snr()).collect()),
            mean_predicted_reduction: avg(post.iter().map(|s| s.mean_predicted()).collect()),
            mean_realized_reduction: avg(post.iter().filter_map(|s| s.mean_realized()).collect()),
            mean_holdout_realized_reduction: avg(post.iter().filter_map(|s| s.mean_holdout_realized()).collect()),
            mean_down_rel_err: avg(self
                .blocks
                .iter()
                .filter_map(|b| b.tensors.get("w_down").map(|t| t.frobenius_rel_err))
                .collect()),
            mean_rel_err: avg(self
                .blocks
                .iter()
                .flat_map(|b| b.tensors.values().map(|t| t.frobenius_rel_err))
                .collect()),
        }
    }

    pub fn validate(&self) -> Result<(), ReportError> {
        let width = self.model.d_model;
        for b in &self.blocks {
            if let Some(s) = &b.post_attn {
                s.check(&format!("blocks[{}].post_attn", b.block), width)?;
            }
            if let Some(s) = &b.pre_norm {
                s.check(&format!("blocks[{}].pre_norm", b.block), width)?;
            }
            if let Some(d) = &b.dsq {
                finite(&format!("blocks[{}].dsq.objective_trace", b.block), &d.objective_trace)?;
            }
            for (name, t) in &b.tensors {
                finite(
                    &format!("blocks[{}].tensors.{name}", b.block),
                    &[t.frobenius_rel_err, t.max_abs_err],
                )?;
            }
        }
        let s = &self.summary;
        for (name, v) in [
            ("mean_post_attn_snr", s.mean_post_attn_snr),
            ("mean_pre_norm_snr", s.mean_pre_norm_snr),
            ("mean_predicted_reduction", s.mean_predicted_reduction),
            ("mean_realized_reduction", s.mean_realized_reduction),
            ("mean_holdout_realized_reduction", s.mean_holdout_realized_reduction),
            ("mean_down_rel_err", s.mean_down_rel_err),
            ("mean_rel_err", s.mean_rel_err),
        ] {
            if let Some(v) = v {
                finite(&format!("summary.{name}"), &[v])?;
            }
        }
        Ok(())
    }
}

/// One cell of an ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub group: String,
    pub label: String,
    pub dsq: bool,
    pub dac: bool,
    pub static_smooth: bool,
    pub dsq_iters: usize,
    pub calib_samples: usize,
    pub perplexity: f64,
    pub mean_nll: f64,
    pub mean_rel_err: f64,
    pub down_rel_err: f64,
    pub realized_reduction: f64,
    pub holdout_realized_reduction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub format_version: String,
    pub kind: ReportKind,
    pub seed: u64,
    pub base: PipelineConfig,
    pub model: ModelConfig,
    /// Perplexity of the unquantized model on the same held-out text.
    pub full_precision_perplexity: f64,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn validate(&self) -> Result<(), ReportError> {
        finite("full_precision_perplexity", &[self.full_precision_perplexity])?;
        for (i, r) in self.rows.iter().enumerate() {
            finite(
                &format!("rows[{i}]"),
                &[
                    r.perplexity,
                    r.mean_nll,
                    r.mean_rel_err,
                    r.down_rel_err,
                    r.realized_reduction,
                    r.holdout_realized_reduction,
                ],
            )?;
        }
        Ok(())
    }

    pub fn row(&self, group: &str, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.group == group && r.label == label)
    }
}

fn finite(field: &str, v: &[f64]) -> Result<(), ReportError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(ReportError::NonFinite(field.to_string()))
    }
}

/// Reports that can be written to disk.
pub trait Report: Serialize + DeserializeOwned {
    fn check(&self) -> Result<(), ReportError>;
}

impl Report for SnrReport {
    fn check(&self) -> Result<(), ReportError> {
        self.validate()
    }
}

impl Report for AblationReport {
    fn check(&self) -> Result<(), ReportError> {
        self.validate()
    }
}

pub fn to_json<R: Report>(report: &R) -> Result<String, ReportError> {
    report.check()?;
    serde_json::to_string_pretty(report).map_err(|e| ReportError::Write {
        path: "<memory>".into(),
        reason: e.to_string(),
    })
}

pub fn write_report<R: Report>(report: &R, path: &Path) -> Result<(), ReportError> {
    let mut json = to_json(report)?;
    json.push('\n');
    write_atomic(path, json.as_bytes()).map_err(|e| ReportError::Write {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

pub fn read_report<R: Report>(path: &Path) -> Result<R, ReportError> {
    let err = |reason: String| ReportError::Read {
        path: path.display().to_string(),
        reason,
    };
    let bytes = std::fs::read(path).map_err(|e| err(e.to_string()))?;
    serde_json::from_slice(&bytes).map_err(|e| err(e.to_string()))
}
