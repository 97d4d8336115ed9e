//! JSON-lines metric logs and the CSV report aggregated from them.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::EpochRecord;

/// One evaluation result, logged next to the epoch records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub kind: String,
    /// `essa`, `sa`, `ttt`, or `none` for an untrained backbone.
    pub stage: String,
    pub adapter: String,
    pub protocol: String,
    pub metric: String,
    /// `None` when the metric is undefined.
    pub value: Option<f64>,
    pub note: Option<String>,
}

/// Appends `record` as a single JSON line.
pub fn append_jsonl<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    let mut line = serde_json::to_string(record).map_err(|e| Error::Format(format!("log record: {e}")))?;
    line.push('\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(line.as_bytes())?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub adapter: String,
    pub stage: String,
    pub metric: Option<String>,
    pub value: Option<f64>,
    pub epochs: usize,
    pub trainable_count: Option<usize>,
    pub trainable_fraction: Option<f64>,
    pub optimizer_state_bytes: Option<usize>,
    pub mean_steps_per_sec: Option<f64>,
}

impl ReportRow {
    fn new(adapter: &str, stage: &str) -> Self {
        ReportRow {
            adapter: adapter.into(),
            stage: stage.into(),
            metric: None,
            value: None,
            epochs: 0,
            trainable_count: None,
            trainable_fraction: None,
            optimizer_state_bytes: None,
            mean_steps_per_sec: None,
        }
    }
}

fn log_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    Ok(files)
}

/// One row per (adapter, stage), in order of first appearance. The metric is
/// the last evaluation logged for the pair and the accounting columns come
/// from its last epoch.
pub fn build_report(dir: &Path) -> Result<Vec<ReportRow>> {
    let files = log_files(dir)?;
    if files.is_empty() {
        return Err(Error::Data(format!("no .jsonl metric logs in {}", dir.display())));
    }
    let mut rows: IndexMap<(String, String), (ReportRow, f64)> = IndexMap::new();
    for file in files {
        let text = fs::read_to_string(&file)?;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Format(format!("{}:{}: {msg}", file.display(), i + 1));
            let value: serde_json::Value = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
            match value.get("kind").and_then(|k| k.as_str()) {
                Some("epoch") => {
                    let r: EpochRecord = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
                    let key = (r.adapter.clone(), r.stage.as_str().to_string());
                    let (row, sps_sum) = rows.entry(key).or_insert_with(|| (ReportRow::new(&r.adapter, r.stage.as_str()), 0.0));
                    row.epochs += 1;
                    *sps_sum += r.steps_per_sec;
                    row.mean_steps_per_sec = Some(*sps_sum / row.epochs as f64);
                    row.trainable_count = Some(r.trainable_count);
                    row.trainable_fraction = Some(r.trainable_fraction);
                    row.optimizer_state_bytes = Some(r.optimizer_state_bytes);
                }
                Some("eval") => {
                    let r: EvalRecord = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
                    let key = (r.adapter.clone(), r.stage.clone());
                    let (row, _) = rows.entry(key).or_insert_with(|| (ReportRow::new(&r.adapter, &r.stage), 0.0));
                    row.metric = Some(r.metric);
                    row.value = r.value;
                }
                other => return Err(bad(format!("unknown record kind {other:?}"))),
            }
        }
    }
    Ok(rows.into_values().map(|(r, _)| r).collect())
}

pub fn write_csv(rows: &[ReportRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}
