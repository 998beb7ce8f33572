//! Weight-only post-training quantization for decoder transformers.
//!
//! The toolkit combines three pieces:
//!
//! * [`quant`]: group-wise asymmetric round-to-nearest quantization.
//! * [`dsq`]: dual-scale quantization of the MLP down-projection, with the
//!   extra column scale folded into the already-quantized up-projection.
//! * [`dac`]: deviation-aware correction, a calibrated mean-shift bias on the
//!   post-attention normalization.
//!
//! [`pipeline`] runs them block by block over a [`model::ModelBundle`],
//! propagating calibration activations through the quantized prefix.
//! [`io`] holds the on-disk artifact, calibration and report formats, and
//! [`eval`] the perplexity and reconstruction metrics.

pub mod dac;
pub mod dsq;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod quant;

pub use dac::{calibrate_bias, deviation_stats, predict_reduction, realized_reduction, DeviationStats};
pub use dsq::{apply_updown_scaling, dsq_quantize, fold_scale, static_smooth_eta, DualScaleResult, UpDownScaling};
pub use error::{Error, Result};
pub use eval::EvalResult;
pub use io::{CalibrationSet, ModelArtifact};
pub use model::{init_random, model_forward, ModelBundle, ModelConfig};
pub use numerics::Matrix;
pub use pipeline::{ablation_matrix, diagnose, run_d2quant, PipelineConfig};
pub use quant::{dequantize, identity_quantize, quantize, QuantConfig, QuantizedTensor, Quantizer, Weight};
