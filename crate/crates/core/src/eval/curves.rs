use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use super::EvalError;
use crate::training::MetricsRow;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Point {
    pub step: u64,
    pub value: f64,
}

/// Plot-ready series read back from a `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Curves {
    /// `train_loss`, `valid_bleu` and `valid_fbert`, each present only if
    /// the file has at least one value for it.
    pub series: BTreeMap<String, Vec<Point>>,
    /// Steps at which an epoch ended.
    pub epoch_markers: Vec<u64>,
}

pub fn curves_from_rows(rows: &[MetricsRow]) -> Curves {
    let mut series: BTreeMap<String, Vec<Point>> = BTreeMap::new();
    let mut epoch_markers = Vec::new();
    for r in rows {
        for (name, v) in [("train_loss", r.train_loss), ("valid_bleu", r.valid_bleu), ("valid_fbert", r.valid_fbert)] {
            if let Some(value) = v {
                series.entry(name.to_string()).or_default().push(Point { step: r.step, value });
            }
        }
        if r.epoch_end {
            epoch_markers.push(r.step);
        }
    }
    Curves { series, epoch_markers }
}

pub fn export_curves(metrics: &Path) -> Result<Curves, EvalError> {
    let mut reader = csv::Reader::from_path(metrics).map_err(|e| EvalError::Format(format!("{}: {e}", metrics.display())))?;
    let mut rows = Vec::new();
    for (i, rec) in reader.deserialize::<MetricsRow>().enumerate() {
        let row = rec.map_err(|e| EvalError::Malformed {
            line: e.position().map(|p| p.line() as usize).unwrap_or(i + 2),
            detail: e.to_string(),
        })?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(EvalError::Malformed { line: 1, detail: "no metric rows".into() });
    }
    Ok(curves_from_rows(&rows))
}
