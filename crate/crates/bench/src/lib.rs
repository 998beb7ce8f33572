//! Shared inputs for the benchmarks.

use d2q_core::{init_random, CalibrationSet, ModelBundle, ModelConfig};

pub fn toy_model(seed: u64) -> ModelBundle {
    init_random(&ModelConfig::toy(), seed).expect("toy config is valid")
}

/// Deterministic pseudo-text so the benches need no fixture files.
pub fn synthetic_text(len: usize) -> Vec<u8> {
    let words: [&[u8]; 8] = [b"the ", b"quiet ", b"river ", b"turns ", b"north ", b"past ", b"stone ", b"mills. "];
    let mut out = Vec::with_capacity(len);
    let mut i = 0usize;
    while out.len() < len {
        out.extend_from_slice(words[(i * 5 + i / 3) % words.len()]);
        i += 1;
    }
    out.truncate(len);
    out
}

pub fn calibration(samples: usize, seq_len: usize) -> CalibrationSet {
    CalibrationSet::from_bytes(&synthetic_text(samples * seq_len), samples, seq_len).expect("enough text")
}
