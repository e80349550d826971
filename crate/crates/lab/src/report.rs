//! Run outputs: long-format metric rows (CSV), replayable run records
//! (JSON lines), and a human-readable summary.
//!
//! `results.csv` is the deterministic product: with a fixed config and
//! seed its bytes are identical across runs and worker counts. Wall-clock
//! timings only appear in `records.jsonl` and `summary.txt`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::Serialize;

use weakguide_core::codec::CondEmbedding;

/// Version tag carried by every run record; bump when the row schema or
/// column order changes.
pub const SCHEMA_VERSION: u32 = 1;

/// Pinned header of `results.csv`.
pub const RESULTS_HEADER: &str = "experiment,cell,context,metric,value,n";

/// One measurement: experiment x cell x context x metric.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub experiment: String,
    pub cell: String,
    pub context: String,
    pub metric: String,
    pub value: f64,
    pub n: usize,
}

/// Everything needed to replay one cell.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub schema: u32,
    pub experiment: String,
    pub cell: String,
    pub context: String,
    pub seed: u64,
    pub n: usize,
    /// Resolved guidance description (scheme and parameters).
    pub guidance: String,
    pub codec_hash: String,
    pub world_hash: String,
    pub schedule_hash: String,
    /// Per-chain steering targets for schemes that draw them.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chain_targets: Option<Vec<String>>,
    pub metrics: BTreeMap<String, f64>,
    pub wall_ms: u64,
}

/// The full product of one experiment run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub experiment: String,
    pub rows: Vec<MetricRow>,
    pub records: Vec<RunRecord>,
    pub summary: String,
}

impl RunOutput {
    pub fn new(experiment: &str) -> Self {
        Self {
            experiment: experiment.to_string(),
            rows: Vec::new(),
            records: Vec::new(),
            summary: String::new(),
        }
    }

    pub fn push_row(&mut self, cell: &str, context: &str, metric: &str, value: f64, n: usize) {
        self.rows.push(MetricRow {
            experiment: self.experiment.clone(),
            cell: cell.to_string(),
            context: context.to_string(),
            metric: metric.to_string(),
            value,
            n,
        });
    }

    /// Look up a single metric value.
    pub fn value(&self, cell: &str, context: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.cell == cell && r.context == context && r.metric == metric)
            .map(|r| r.value)
    }

    pub fn results_csv(&self) -> String {
        let mut out = String::from(RESULTS_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.experiment, r.cell, r.context, r.metric, r.value, r.n
            );
        }
        out
    }

    pub fn records_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in &self.records {
            out.push_str(&serde_json::to_string(rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

/// Write `results.csv`, `records.jsonl`, and `summary.txt` into `dir`.
pub fn write_outputs(dir: &Path, output: &RunOutput) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("results.csv"), output.results_csv())?;
    fs::write(dir.join("records.jsonl"), output.records_jsonl())?;
    fs::write(dir.join("summary.txt"), &output.summary)?;
    Ok(())
}

/// Samples as CSV rows `chain_id,step,c0,c1,...`; the step column reports
/// the schedule position the samples were taken at (0 = data space).
pub fn write_samples_csv(path: &Path, samples: &[Vec<f64>], step: usize) -> std::io::Result<()> {
    let dim = samples.first().map_or(0, Vec::len);
    let mut file = fs::File::create(path)?;
    let mut header = String::from("chain_id,step");
    for d in 0..dim {
        let _ = write!(header, ",c{d}");
    }
    writeln!(file, "{header}")?;
    for (i, x) in samples.iter().enumerate() {
        let mut line = format!("{i},{step}");
        for v in x {
            let _ = write!(line, ",{v}");
        }
        writeln!(file, "{line}")?;
    }
    Ok(())
}

/// Embedding matrix as CSV rows `position,dim,value`.
pub fn write_embedding_csv(path: &Path, c: &CondEmbedding) -> std::io::Result<()> {
    let mut file = fs::File::create(path)?;
    writeln!(file, "position,dim,value")?;
    for i in 0..c.positions() {
        for (d, v) in c.row(i).iter().enumerate() {
            writeln!(file, "{i},{d},{v}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_header_is_pinned() {
        assert_eq!(RESULTS_HEADER, "experiment,cell,context,metric,value,n");
        let mut out = RunOutput::new("demo");
        out.push_row("cell", "ctx", "metric", 0.5, 10);
        let csv = out.results_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(RESULTS_HEADER));
        assert_eq!(lines.next(), Some("demo,cell,ctx,metric,0.5,10"));
    }

    #[test]
    fn lookup_finds_rows() {
        let mut out = RunOutput::new("demo");
        out.push_row("a", "x", "m", 1.25, 3);
        assert_eq!(out.value("a", "x", "m"), Some(1.25));
        assert_eq!(out.value("a", "x", "other"), None);
    }
}
