use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricsReport;

/// Summary of one completed epoch. Undefined scores are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub lr: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub oa: Option<f64>,
    pub iou: Option<f64>,
    pub wall_time_s: f64,
}

impl EpochRecord {
    pub fn new(epoch: usize, train_loss: f64, lr: f64, val: &MetricsReport, wall_time_s: f64) -> Self {
        Self {
            epoch,
            train_loss,
            lr,
            precision: val.precision.value(),
            recall: val.recall.value(),
            f1: val.f1.value(),
            oa: val.oa.value(),
            iou: val.iou.value(),
            wall_time_s,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn push(&mut self, r: EpochRecord) {
        debug_assert!(self.records.last().is_none_or(|l| l.epoch < r.epoch));
        self.records.push(r);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Epoch with the highest validation F1; ties go to the earliest epoch
    /// and undefined F1 ranks below every defined value.
    pub fn best_epoch(&self) -> Option<usize> {
        let mut best: Option<(&EpochRecord, f64)> = None;
        for r in &self.records {
            let score = r.f1.unwrap_or(f64::NEG_INFINITY);
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((r, score));
            }
        }
        best.map(|(r, _)| r.epoch)
    }

    /// Tab-separated table with a header row.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .delimiter(b'\t')
            .from_path(path)
            .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))?;
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new()
            .delimiter(b'\t')
            .from_path(path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        let records = rd.deserialize().collect::<std::result::Result<Vec<_>, _>>().map_err(|e| Error::Data(e.to_string()))?;
        Ok(Self { records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(epoch: usize, f1: Option<f64>) -> EpochRecord {
        EpochRecord {
            epoch,
            train_loss: 0.5,
            lr: 1e-3,
            precision: f1,
            recall: f1,
            f1,
            oa: Some(0.9),
            iou: None,
            wall_time_s: 1.0,
        }
    }

    #[test]
    fn best_epoch_prefers_earliest_maximum() {
        let mut h = TrainHistory::default();
        assert_eq!(h.best_epoch(), None);
        for (e, f) in [(0, None), (1, Some(0.7)), (2, Some(0.9)), (3, Some(0.9)), (4, Some(0.8))] {
            h.push(rec(e, f));
        }
        assert_eq!(h.best_epoch(), Some(2));
    }

    #[test]
    fn tsv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("history.tsv");
        let h = TrainHistory { records: vec![rec(0, Some(0.25)), rec(1, None)] };
        h.write_tsv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("epoch\ttrain_loss\tlr\tprecision"));
        assert_eq!(TrainHistory::read_tsv(&p).unwrap(), h);
    }
}
