//! Append-only metrics CSV: `epoch,split,metric,value,seconds`.

use std::fs::File;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use lorentzian::params::ParamStore;
use lorentzian::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
    pub seconds: f64,
}

/// Writes rows as they arrive and keeps them for the caller. The seconds column
/// is 0 unless wall-clock logging is on, so default runs are byte-reproducible.
pub struct MetricsLog {
    writer: Option<csv::Writer<File>>,
    records: Vec<MetricsRecord>,
    start: Instant,
    wall_clock: bool,
}

impl MetricsLog {
    pub fn create(path: &Path, wall_clock: bool) -> Result<Self> {
        let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
        w.write_record(["epoch", "split", "metric", "value", "seconds"])?;
        w.flush()?;
        Ok(Self { writer: Some(w), records: Vec::new(), start: Instant::now(), wall_clock })
    }

    /// In-memory only.
    pub fn memory() -> Self {
        Self { writer: None, records: Vec::new(), start: Instant::now(), wall_clock: false }
    }

    pub fn log(&mut self, epoch: usize, split: &str, metric: &str, value: f64) -> Result<()> {
        let seconds = if self.wall_clock { self.start.elapsed().as_secs_f64() } else { 0.0 };
        let r = MetricsRecord { epoch, split: split.into(), metric: metric.into(), value, seconds };
        if let Some(w) = self.writer.as_mut() {
            w.write_record([
                r.epoch.to_string(),
                r.split.clone(),
                r.metric.clone(),
                format!("{}", r.value),
                format!("{:.3}", r.seconds),
            ])?;
            w.flush()?;
        }
        self.records.push(r);
        Ok(())
    }

    /// One `K.<manifold>` row per manifold.
    pub fn log_curvatures<T: Scalar>(&mut self, epoch: usize, store: &ParamStore<T>) -> Result<()> {
        for h in store.manifolds() {
            self.log(epoch, "train", &format!("K.{}", h.name()), h.k().f64())?;
        }
        Ok(())
    }

    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }

    /// Values of one metric in epoch order.
    pub fn series(&self, split: &str, metric: &str) -> Vec<f64> {
        self.records.iter().filter(|r| r.split == split && r.metric == metric).map(|r| r.value).collect()
    }

    pub fn last(&self, split: &str, metric: &str) -> Option<f64> {
        self.series(split, metric).last().copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut m = MetricsLog::create(&path, false).unwrap();
        m.log(1, "train", "loss", 0.5).unwrap();
        m.log(1, "test", "accuracy", 1.0).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "epoch,split,metric,value,seconds\n1,train,loss,0.5,0.000\n1,test,accuracy,1,0.000\n");
        assert_eq!(m.series("train", "loss"), vec![0.5]);
        assert_eq!(m.last("test", "accuracy"), Some(1.0));
    }

    #[test]
    fn curvatures_are_named_by_manifold() {
        let mut store = ParamStore::<f64>::new();
        store.add_manifold("head", 2, 0.5, true);
        let mut m = MetricsLog::memory();
        m.log_curvatures(3, &store).unwrap();
        assert_eq!(m.records()[0].metric, "K.head");
        assert!((m.records()[0].value - 0.5).abs() < 1e-12);
    }
}
