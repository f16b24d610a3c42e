//! Metrics files: one JSON record per line followed by a summary line.

use std::path::Path;

use thiserror::Error;

use quadgrasp::metrics::{from_ndjson, to_ndjson, MetricsError, MetricsRecord, MetricsSummary};

#[derive(Debug, Error)]
pub enum MetricsIoError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Format { path: String, source: MetricsError },
}

pub fn write_metrics(records: &[MetricsRecord], path: impl AsRef<Path>) -> Result<(), MetricsIoError> {
    let path = path.as_ref();
    std::fs::write(path, to_ndjson(records)).map_err(|source| MetricsIoError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<(Vec<MetricsRecord>, MetricsSummary), MetricsIoError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| MetricsIoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_ndjson(&text).map_err(|source| MetricsIoError::Format {
        path: path.display().to_string(),
        source,
    })
}
