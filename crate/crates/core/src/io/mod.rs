//! On-disk formats: model artifacts, calibration text and JSON reports.

pub mod artifact;
pub mod calibration;
pub mod report;

pub use artifact::{load_model, read_artifact, save_model, ArtifactError, Manifest, ModelArtifact};
pub use calibration::{load_calibration, CalibrationSet};
pub use report::{read_report, write_report, ReportError};
