use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::CheckpointRecord;
use crate::seg::SegMetricSet;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// A fixed number of real pairs plus growing synthetic prefixes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixingPlan {
    pub real_count: usize,
    pub synthetic_counts: Vec<usize>,
}

impl MixingPlan {
    /// 100 real pairs, 0 to 1000 synthetic in steps of 100.
    pub fn standard() -> Self {
        Self::stepped(100, 100, 10)
    }

    /// `real` plus `{0, step, ..., steps * step}`.
    pub fn stepped(real: usize, step: usize, steps: usize) -> Self {
        Self {
            real_count: real,
            synthetic_counts: (0..=steps).map(|i| i * step).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.synthetic_counts.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidConfig(
                "synthetic_counts must be sorted ascending".into(),
            ));
        }
        Ok(())
    }

    pub fn max_synthetic(&self) -> usize {
        self.synthetic_counts.iter().copied().max().unwrap_or(0)
    }
}

impl Default for MixingPlan {
    fn default() -> Self {
        Self::standard()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub experiment: String,
    pub model: String,
    pub real_n: usize,
    pub synth_n: usize,
    pub micro: SegMetricSet,
    pub imagewise: SegMetricSet,
}

/// Evaluated snapshots of one generator and the chosen one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointTable {
    pub name: String,
    pub records: Vec<CheckpointRecord>,
    pub selected: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub rows: Vec<ReportRow>,
    /// Index of the row with the highest image-wise IoU, when flagged.
    pub best_row: Option<usize>,
    pub checkpoints: Vec<CheckpointTable>,
}

impl Default for MetricReport {
    fn default() -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            rows: Vec::new(),
            best_row: None,
            checkpoints: Vec::new(),
        }
    }
}

impl MetricReport {
    /// Index of the highest image-wise IoU; the first such row on ties.
    pub fn best_imagewise_iou(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, r) in self.rows.iter().enumerate() {
            if best.map_or(true, |b| r.imagewise.iou > self.rows[b].imagewise.iou) {
                best = Some(i);
            }
        }
        best
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::VersionMismatch {
                found: r.schema_version,
                expected: REPORT_SCHEMA_VERSION,
            });
        }
        Ok(r)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Lowest FID wins; equal FIDs go to the earliest id.
///
/// Ids compare numerically when both parse as step counts (`230000`,
/// `step-0000135`, `200k`), and as strings otherwise.
pub fn select_best_checkpoint(records: &[CheckpointRecord]) -> Result<CheckpointRecord> {
    let mut best: Option<&CheckpointRecord> = None;
    for r in records {
        best = Some(match best {
            None => r,
            Some(b) if r.fid < b.fid => r,
            Some(b) if r.fid == b.fid && id_order(&r.id, &b.id).is_lt() => r,
            Some(b) => b,
        });
    }
    best.cloned().ok_or(Error::EmptyList)
}

fn id_order(a: &str, b: &str) -> std::cmp::Ordering {
    match (parse_step(a), parse_step(b)) {
        (Some(x), Some(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        _ => a.cmp(b),
    }
}

/// `"step-0000135"` -> 135, `"200k"` -> 200000, `"88"` -> 88.
pub fn parse_step(id: &str) -> Option<u64> {
    let s = id.strip_prefix("step-").unwrap_or(id);
    if let Some(k) = s.strip_suffix(['k', 'K']) {
        return k.parse::<u64>().ok()?.checked_mul(1000);
    }
    s.parse().ok()
}

fn metric_cells(m: &SegMetricSet) -> [String; 4] {
    [m.iou, m.f1, m.accuracy, m.precision].map(|v| v.to_string())
}

/// Writes `<stem>.csv`, `<stem>.json` and, when generators were scored,
/// `<stem>_checkpoints.csv`.
pub fn emit_report(report: &MetricReport, out: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let csv_err = |p: &Path, e: csv::Error| Error::io(p, std::io::Error::other(e));
    let mut paths = Vec::new();

    let path = out.join(format!("{stem}.csv"));
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record([
        "schema_version",
        "experiment",
        "model",
        "real_n",
        "synth_n",
        "micro_iou",
        "micro_f1",
        "micro_accuracy",
        "micro_precision",
        "imagewise_iou",
        "imagewise_f1",
        "imagewise_accuracy",
        "imagewise_precision",
        "best",
    ])
    .map_err(|e| csv_err(&path, e))?;
    for (i, r) in report.rows.iter().enumerate() {
        let mut rec = vec![
            report.schema_version.to_string(),
            r.experiment.clone(),
            r.model.clone(),
            r.real_n.to_string(),
            r.synth_n.to_string(),
        ];
        rec.extend(metric_cells(&r.micro));
        rec.extend(metric_cells(&r.imagewise));
        rec.push((report.best_row == Some(i)).to_string());
        w.write_record(&rec).map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    paths.push(path);

    if !report.checkpoints.is_empty() {
        let path = out.join(format!("{stem}_checkpoints.csv"));
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
        w.write_record(["schema_version", "generator", "id", "fid", "sim", "n_real", "n_generated", "selected"])
            .map_err(|e| csv_err(&path, e))?;
        for t in &report.checkpoints {
            for c in &t.records {
                w.write_record([
                    report.schema_version.to_string(),
                    t.name.clone(),
                    c.id.clone(),
                    c.fid.to_string(),
                    c.sim.map(|s| s.to_string()).unwrap_or_default(),
                    c.n_real.to_string(),
                    c.n_generated.to_string(),
                    (c.id == t.selected).to_string(),
                ])
                .map_err(|e| csv_err(&path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }

    let path = out.join(format!("{stem}.json"));
    fs::write(&path, report.to_json()).map_err(|e| Error::io(&path, e))?;
    paths.push(path);
    Ok(paths)
}

pub fn load_report(path: &Path) -> Result<MetricReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    MetricReport::from_json(&text)
}
