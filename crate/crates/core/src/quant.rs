//! Group-wise asymmetric uniform quantization.
//!
//! Each row is split into contiguous groups of `group_size` input columns.
//! Per group the dynamic range is widened to include zero, then
//!
//! ```text
//! s = (max - min) / (2^b - 1)          (s = 1 when max == min)
//! z = clip(-round(min / s), 0, 2^b - 1)
//! q = clip(round(w / s) + z, 0, 2^b - 1)
//! ŵ = s · (q - z)
//! ```
//!
//! Rounding is half-away-from-zero everywhere. Arithmetic is plain `f32`
//! in exactly the order written above so that a scalar evaluation of the
//! same formulas reproduces every code bit-for-bit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Sentinel group size meaning one group spanning the whole row.
pub const PER_CHANNEL: usize = 0;

pub const SUPPORTED_BITS: [u8; 4] = [2, 3, 4, 8];

/// Per-group metadata cost used for compression accounting: a 16-bit
/// scale plus a 16-bit zero-point, as a deployment format would store them.
pub const GROUP_OVERHEAD_BITS: u64 = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits: u8,
    /// Columns per group, or [`PER_CHANNEL`].
    pub group_size: usize,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            bits: 2,
            group_size: 128,
        }
    }
}

impl QuantConfig {
    pub fn new(bits: u8, group_size: usize) -> Result<Self> {
        let cfg = Self { bits, group_size };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn per_channel(bits: u8) -> Result<Self> {
        Self::new(bits, PER_CHANNEL)
    }

    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_BITS.contains(&self.bits) {
            return Err(Error::UnsupportedBits(self.bits));
        }
        Ok(())
    }

    /// Largest code value, `2^bits - 1`.
    pub fn max_code(&self) -> u8 {
        ((1u16 << self.bits) - 1) as u8
    }

    /// Group width for a row of `cols` entries; errors when it does not divide.
    pub fn effective_group(&self, cols: usize) -> Result<usize> {
        if self.group_size == PER_CHANNEL {
            return Ok(cols);
        }
        if !cols.is_multiple_of(self.group_size) {
            return Err(Error::GroupSize {
                cols,
                group_size: self.group_size,
            });
        }
        Ok(self.group_size)
    }
}

/// Integer codes plus per-(row, group) scale and zero-point.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    rows: usize,
    cols: usize,
    bits: u8,
    group_size: usize,
    codes: Vec<u8>,
    scales: Vec<f32>,
    zero_points: Vec<u8>,
}

impl QuantizedTensor {
    /// Reassembles a tensor from its parts, enforcing every layout invariant.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        bits: u8,
        group_size: usize,
        codes: Vec<u8>,
        scales: Vec<f32>,
        zero_points: Vec<u8>,
    ) -> Result<Self> {
        let q = Self {
            rows,
            cols,
            bits,
            group_size,
            codes,
            scales,
            zero_points,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_BITS.contains(&self.bits) {
            return Err(Error::UnsupportedBits(self.bits));
        }
        if self.rows == 0 || self.cols == 0 || self.group_size == 0 {
            return Err(Error::EmptyInput("QuantizedTensor"));
        }
        if !self.cols.is_multiple_of(self.group_size) {
            return Err(Error::GroupSize {
                cols: self.cols,
                group_size: self.group_size,
            });
        }
        let n_groups = self.n_groups();
        for (name, expected, actual) in [
            ("codes", self.rows * self.cols, self.codes.len()),
            ("scales", self.rows * n_groups, self.scales.len()),
            ("zero_points", self.rows * n_groups, self.zero_points.len()),
        ] {
            if expected != actual {
                return Err(Error::LengthMismatch {
                    op: name,
                    expected,
                    actual,
                });
            }
        }
        let max = ((1u16 << self.bits) - 1) as u8;
        if let Some(&c) = self.codes.iter().chain(&self.zero_points).find(|&&c| c > max) {
            return Err(Error::InvalidConfig(format!(
                "code {c} exceeds {max} for {}-bit tensor",
                self.bits
            )));
        }
        // Folding may flip the sign of a scale; it may never zero it.
        if self.scales.iter().any(|s| !s.is_finite() || *s == 0.0) {
            return Err(Error::NonFinite("quantization scales"));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
    pub fn bits(&self) -> u8 {
        self.bits
    }
    pub fn group_size(&self) -> usize {
        self.group_size
    }
    pub fn n_groups(&self) -> usize {
        self.cols / self.group_size
    }
    pub fn codes(&self) -> &[u8] {
        &self.codes
    }
    pub fn scales(&self) -> &[f32] {
        &self.scales
    }
    pub fn zero_points(&self) -> &[u8] {
        &self.zero_points
    }

    pub fn scale(&self, row: usize, group: usize) -> f32 {
        self.scales[row * self.n_groups() + group]
    }

    pub fn zero_point(&self, row: usize, group: usize) -> u8 {
        self.zero_points[row * self.n_groups() + group]
    }

    pub(crate) fn scales_mut(&mut self) -> &mut [f32] {
        &mut self.scales
    }

    /// Largest absolute scale in the tensor.
    pub fn max_scale(&self) -> f32 {
        self.scales.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    /// Ŵ = s ⊙ (q − z), broadcast per (row, group).
    pub fn dequantize(&self) -> Matrix {
        let ng = self.n_groups();
        let mut out = Vec::with_capacity(self.codes.len());
        for r in 0..self.rows {
            for g in 0..ng {
                let s = self.scales[r * ng + g];
                let z = self.zero_points[r * ng + g] as f32;
                let start = r * self.cols + g * self.group_size;
                out.extend(
                    self.codes[start..start + self.group_size]
                        .iter()
                        .map(|&q| s * (q as f32 - z)),
                );
            }
        }
        Matrix::from_raw(self.rows, self.cols, out)
    }

    /// Theoretical storage in bits: codes at nominal width plus
    /// [`GROUP_OVERHEAD_BITS`] per group.
    pub fn theoretical_bits(&self) -> u64 {
        let n = (self.rows * self.cols) as u64;
        let groups = (self.rows * self.n_groups()) as u64;
        n * self.bits as u64 + groups * GROUP_OVERHEAD_BITS
    }

    /// Compression ratio against a 16-bit dense weight:
    /// `16 / (bits + GROUP_OVERHEAD_BITS / group_size)`.
    pub fn theoretical_ratio(&self) -> f64 {
        (16 * self.rows * self.cols) as f64 / self.theoretical_bits() as f64
    }
}

/// Parameters of one group: (scale, zero-point).
fn group_params(values: &[f32], max_code: f32) -> (f32, f32) {
    let mut lo = 0.0f32;
    let mut hi = 0.0f32;
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let s = if hi == lo { 1.0 } else { (hi - lo) / max_code };
    let z = (-(lo / s).round()).clamp(0.0, max_code);
    (s, z)
}

/// Quantizes `w` row-group by row-group.
pub fn quantize(w: &Matrix, cfg: &QuantConfig) -> Result<QuantizedTensor> {
    cfg.validate()?;
    if !w.is_finite() {
        return Err(Error::NonFinite("quantize input"));
    }
    let (rows, cols) = w.shape();
    let group = cfg.effective_group(cols)?;
    let ng = cols / group;
    let max_code = cfg.max_code() as f32;

    let per_row = |r: usize| {
        let row = w.row(r);
        let mut codes = Vec::with_capacity(cols);
        let mut scales = Vec::with_capacity(ng);
        let mut zps = Vec::with_capacity(ng);
        for chunk in row.chunks_exact(group) {
            let (s, z) = group_params(chunk, max_code);
            codes.extend(
                chunk
                    .iter()
                    .map(|&v| ((v / s).round() + z).clamp(0.0, max_code) as u8),
            );
            scales.push(s);
            zps.push(z as u8);
        }
        (codes, scales, zps)
    };
    let parts: Vec<_> = if rows * cols >= 1 << 15 {
        (0..rows).into_par_iter().map(per_row).collect()
    } else {
        (0..rows).map(per_row).collect()
    };

    let mut codes = Vec::with_capacity(rows * cols);
    let mut scales = Vec::with_capacity(rows * ng);
    let mut zero_points = Vec::with_capacity(rows * ng);
    for (c, s, z) in parts {
        codes.extend(c);
        scales.extend(s);
        zero_points.extend(z);
    }
    Ok(QuantizedTensor {
        rows,
        cols,
        bits: cfg.bits,
        group_size: group,
        codes,
        scales,
        zero_points,
    })
}

pub fn dequantize(q: &QuantizedTensor) -> Matrix {
    q.dequantize()
}

/// A weight slot: either full precision or quantized.
#[derive(Clone, Debug, PartialEq)]
pub enum Weight {
    Dense(Matrix),
    Quantized(QuantizedTensor),
}

impl Weight {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            Weight::Dense(m) => m.shape(),
            Weight::Quantized(q) => q.shape(),
        }
    }

    /// The matrix used at inference time.
    pub fn materialize(&self) -> std::borrow::Cow<'_, Matrix> {
        match self {
            Weight::Dense(m) => std::borrow::Cow::Borrowed(m),
            Weight::Quantized(q) => std::borrow::Cow::Owned(q.dequantize()),
        }
    }

    pub fn as_quantized(&self) -> Option<&QuantizedTensor> {
        match self {
            Weight::Quantized(q) => Some(q),
            Weight::Dense(_) => None,
        }
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self, Weight::Quantized(_))
    }
}

impl From<Matrix> for Weight {
    fn from(m: Matrix) -> Self {
        Weight::Dense(m)
    }
}

/// No-op quantizer: the weight passes through untouched, so
/// `materialize(identity_quantize(w)) == w` bit for bit.
pub fn identity_quantize(w: &Matrix) -> Weight {
    Weight::Dense(w.clone())
}

/// Which weight quantizer a pipeline run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Quantizer {
    /// Round-to-nearest min-max quantization.
    Rtn(QuantConfig),
    /// Pass-through; used for regression checks of the surrounding plumbing.
    Identity,
}

impl Quantizer {
    pub fn apply(&self, w: &Matrix) -> Result<Weight> {
        match self {
            Quantizer::Rtn(cfg) => quantize(w, cfg).map(Weight::Quantized),
            Quantizer::Identity => Ok(identity_quantize(w)),
        }
    }

    pub fn config(&self) -> Option<&QuantConfig> {
        match self {
            Quantizer::Rtn(cfg) => Some(cfg),
            Quantizer::Identity => None,
        }
    }
}
