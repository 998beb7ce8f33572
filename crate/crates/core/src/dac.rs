//! Deviation statistics at normalization outputs and mean-shift correction.
//!
//! For full-precision activations `Y_fp` and quantized activations `Y_q`
//! (tokens × features) the deviation is `ΔY = Y_fp − Y_q`. Per feature we
//! track the token mean `μ` and population variance `σ²`. Adding `μ` to the
//! quantized output removes exactly `μ² / (μ² + σ²)` of the per-feature MSE
//! on the data the mean was measured on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Added to `σ²` in the diagnostic `|μ| / σ²` ratio.
pub const SNR_EPS: f64 = 1e-12;
/// Below this total second moment a feature is treated as undeviated.
pub const REDUCTION_FLOOR: f64 = 1e-20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationStats {
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
    /// `|μ| / (σ² + ε)` per feature.
    pub snr_diag: Vec<f64>,
    /// Predicted relative MSE reduction `μ² / (μ² + σ²)` per feature.
    pub reduction: Vec<f64>,
    pub token_count: usize,
}

impl DeviationStats {
    fn from_moments(mu: Vec<f64>, sigma2: Vec<f64>, token_count: usize) -> Self {
        let snr_diag = mu
            .iter()
            .zip(&sigma2)
            .map(|(m, v)| m.abs() / (v + SNR_EPS))
            .collect();
        let reduction = mu.iter().zip(&sigma2).map(|(&m, &v)| reduction_ratio(m, v)).collect();
        Self {
            mu,
            sigma2,
            snr_diag,
            reduction,
            token_count,
        }
    }

    pub fn features(&self) -> usize {
        self.mu.len()
    }

    /// Squared form `μ² / σ²`, for which the predicted reduction equals
    /// `snr / (1 + snr)`. Infinite for a feature with zero variance and
    /// nonzero mean, NaN when both vanish.
    pub fn snr_squared(&self) -> Vec<f64> {
        self.mu.iter().zip(&self.sigma2).map(|(m, v)| m * m / v).collect()
    }

    pub fn mean_snr(&self) -> f64 {
        mean(&self.snr_diag)
    }

    pub fn mean_reduction(&self) -> f64 {
        mean(&self.reduction)
    }

    /// Correction bias to add to the quantized normalization output.
    pub fn bias(&self) -> Vec<f32> {
        self.mu.iter().map(|&m| m as f32).collect()
    }
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn reduction_ratio(mu: f64, sigma2: f64) -> f64 {
    let total = mu * mu + sigma2;
    if total < REDUCTION_FLOOR {
        0.0
    } else {
        (mu * mu / total).clamp(0.0, 1.0)
    }
}

fn check_pair(op: &'static str, y_fp: &Matrix, y_q: &Matrix) -> Result<()> {
    if y_fp.shape() != y_q.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: y_fp.shape(),
            right: y_q.shape(),
        });
    }
    Ok(())
}

/// Streaming per-feature mean/variance of `ΔY` over token batches
/// (Welford/Chan merge), so calibration never holds all tokens at once.
#[derive(Clone, Debug)]
pub struct DeviationAccumulator {
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl DeviationAccumulator {
    pub fn new(features: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; features],
            m2: vec![0.0; features],
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Folds in one batch of token rows.
    pub fn push(&mut self, y_fp: &Matrix, y_q: &Matrix) -> Result<()> {
        check_pair("DeviationAccumulator::push", y_fp, y_q)?;
        if y_fp.cols() != self.mean.len() {
            return Err(Error::LengthMismatch {
                op: "DeviationAccumulator::push",
                expected: self.mean.len(),
                actual: y_fp.cols(),
            });
        }
        for t in 0..y_fp.rows() {
            self.count += 1;
            let n = self.count as f64;
            for (((m, m2), &a), &b) in self
                .mean
                .iter_mut()
                .zip(self.m2.iter_mut())
                .zip(y_fp.row(t))
                .zip(y_q.row(t))
            {
                let d = a as f64 - b as f64;
                let delta = d - *m;
                *m += delta / n;
                *m2 += delta * (d - *m);
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<DeviationStats> {
        if self.count == 0 {
            return Err(Error::EmptyInput("DeviationAccumulator::finish"));
        }
        let n = self.count as f64;
        let sigma2 = self.m2.iter().map(|v| (v / n).max(0.0)).collect();
        Ok(DeviationStats::from_moments(self.mean.clone(), sigma2, self.count))
    }
}

pub fn deviation_stats(y_fp: &Matrix, y_q: &Matrix) -> Result<DeviationStats> {
    check_pair("deviation_stats", y_fp, y_q)?;
    let mut acc = DeviationAccumulator::new(y_fp.cols());
    acc.push(y_fp, y_q)?;
    acc.finish()
}

/// The per-feature mean deviation, to be added as a normalization bias.
pub fn calibrate_bias(y_fp: &Matrix, y_q: &Matrix) -> Result<Vec<f32>> {
    Ok(deviation_stats(y_fp, y_q)?.bias())
}

/// `μ² / (μ² + σ²)` per feature; 0 where the deviation vanishes.
pub fn predict_reduction(stats: &DeviationStats) -> Vec<f64> {
    stats
        .mu
        .iter()
        .zip(&stats.sigma2)
        .map(|(&m, &v)| reduction_ratio(m, v))
        .collect()
}

/// Streaming per-feature MSE of `Y_fp − (Y_q + bias)` and of `Y_fp − Y_q`.
#[derive(Clone, Debug)]
pub struct ReductionAccumulator {
    count: usize,
    before: Vec<f64>,
    after: Vec<f64>,
}

impl ReductionAccumulator {
    pub fn new(features: usize) -> Self {
        Self {
            count: 0,
            before: vec![0.0; features],
            after: vec![0.0; features],
        }
    }

    /// `y_q` is uncorrected; `bias` is applied here in f64.
    pub fn push(&mut self, y_fp: &Matrix, y_q: &Matrix, bias: &[f32]) -> Result<()> {
        check_pair("ReductionAccumulator::push", y_fp, y_q)?;
        if bias.len() != self.before.len() || y_fp.cols() != self.before.len() {
            return Err(Error::LengthMismatch {
                op: "ReductionAccumulator::push",
                expected: self.before.len(),
                actual: bias.len(),
            });
        }
        for t in 0..y_fp.rows() {
            for (i, (&a, &b)) in y_fp.row(t).iter().zip(y_q.row(t)).enumerate() {
                let d = a as f64 - b as f64;
                let e = d - bias[i] as f64;
                self.before[i] += d * d;
                self.after[i] += e * e;
            }
        }
        self.count += y_fp.rows();
        Ok(())
    }

    /// Pushes an already-corrected pair: `y_corrected` includes the bias.
    pub fn push_corrected(&mut self, y_fp: &Matrix, y_q: &Matrix, y_corrected: &Matrix) -> Result<()> {
        check_pair("ReductionAccumulator::push_corrected", y_fp, y_q)?;
        check_pair("ReductionAccumulator::push_corrected", y_fp, y_corrected)?;
        for t in 0..y_fp.rows() {
            for (i, ((&a, &b), &c)) in y_fp
                .row(t)
                .iter()
                .zip(y_q.row(t))
                .zip(y_corrected.row(t))
                .enumerate()
            {
                let d = a as f64 - b as f64;
                let e = a as f64 - c as f64;
                self.before[i] += d * d;
                self.after[i] += e * e;
            }
        }
        self.count += y_fp.rows();
        Ok(())
    }

    pub fn mse_before(&self) -> Vec<f64> {
        self.before.iter().map(|v| v / self.count.max(1) as f64).collect()
    }

    pub fn mse_after(&self) -> Vec<f64> {
        self.after.iter().map(|v| v / self.count.max(1) as f64).collect()
    }

    /// `1 − MSE_after / MSE_before`; 0 for features with no deviation.
    pub fn finish(&self) -> Vec<f64> {
        self.before
            .iter()
            .zip(&self.after)
            .map(|(&b, &a)| if b == 0.0 { 0.0 } else { 1.0 - a / b })
            .collect()
    }
}

/// Measured per-feature relative MSE reduction from adding `bias` to `y_q`.
pub fn realized_reduction(y_fp: &Matrix, y_q: &Matrix, bias: &[f32]) -> Result<Vec<f64>> {
    let mut acc = ReductionAccumulator::new(y_fp.cols());
    acc.push(y_fp, y_q, bias)?;
    Ok(acc.finish())
}
