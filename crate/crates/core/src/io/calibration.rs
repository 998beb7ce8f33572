//! Byte-level calibration data: every byte of a text file is a token id.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CalibrationSet {
    sequences: Vec<Vec<u32>>,
}

impl CalibrationSet {
    pub fn new(sequences: Vec<Vec<u32>>, vocab: usize, max_seq: usize) -> Result<Self> {
        if sequences.is_empty() || sequences.iter().any(Vec::is_empty) {
            return Err(Error::Calibration("calibration set is empty".into()));
        }
        for s in &sequences {
            if s.len() > max_seq {
                return Err(Error::SequenceTooLong { len: s.len(), max: max_seq });
            }
            if let Some(&id) = s.iter().find(|&&t| t as usize >= vocab) {
                return Err(Error::TokenOutOfRange { id, vocab });
            }
        }
        Ok(Self { sequences })
    }

    /// Chunks `bytes` into at most `samples` sequences of exactly
    /// `seq_len` tokens; a partial tail is dropped.
    pub fn from_bytes(bytes: &[u8], samples: usize, seq_len: usize) -> Result<Self> {
        if seq_len == 0 || samples == 0 {
            return Err(Error::Calibration("samples and seq_len must be positive".into()));
        }
        if bytes.len() < seq_len {
            return Err(Error::Calibration(format!(
                "need at least {seq_len} bytes for one sequence, got {}",
                bytes.len()
            )));
        }
        let sequences = bytes
            .chunks_exact(seq_len)
            .take(samples)
            .map(|c| c.iter().map(|&b| b as u32).collect())
            .collect();
        Ok(Self { sequences })
    }

    pub fn sequences(&self) -> &[Vec<u32>] {
        &self.sequences
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    /// The first `n` sequences.
    pub fn take(&self, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Calibration("cannot take zero sequences".into()));
        }
        Ok(Self {
            sequences: self.sequences.iter().take(n).cloned().collect(),
        })
    }
}

pub fn load_calibration(path: &Path, samples: usize, seq_len: usize) -> Result<CalibrationSet> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    CalibrationSet::from_bytes(&bytes, samples, seq_len)
}
