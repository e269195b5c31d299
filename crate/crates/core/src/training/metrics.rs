use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Phase, TrainError};

/// One line of `metrics.csv`. Validation columns are empty on steps where
/// no validation ran.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: usize,
    pub phase: Phase,
    pub train_loss: Option<f64>,
    pub valid_bleu: Option<f64>,
    pub valid_fbert: Option<f64>,
    pub epoch_end: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn push(&mut self, row: MetricsRow) {
        self.rows.push(row);
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
        }
        w.flush().map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))
    }
}
