//! Diagnostics reports and their JSON / CSV serializations.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};

/// One measured condition for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    /// Condition label, e.g. `"front_loaded@r=0.50"`.
    pub condition: String,
    pub protocol: Option<String>,
    /// Ground-truth ratio `r` or replacement ratio `r'`.
    pub ratio: Option<f64>,
    pub seed: u64,
    pub samples: usize,
    /// Metric name to value (`ctr`, `perplexity`, `psnr`, `perceptual`, ...).
    pub metrics: BTreeMap<String, f64>,
}

/// Mean and standard deviation of one metric over the seeds of a condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryStat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub experiment: String,
    pub conditions: Vec<String>,
    pub records: Vec<Record>,
    /// Condition to metric to statistics.
    pub summary: BTreeMap<String, BTreeMap<String, SummaryStat>>,
}

impl DiagnosticsReport {
    pub fn new(experiment: &str) -> Self {
        Self { experiment: experiment.to_string(), conditions: Vec::new(), records: Vec::new(), summary: BTreeMap::new() }
    }

    pub fn push(&mut self, record: Record) {
        if !self.conditions.contains(&record.condition) {
            self.conditions.push(record.condition.clone());
        }
        self.records.push(record);
    }

    /// Recompute `summary` from `records`.
    pub fn summarize(&mut self) {
        let mut groups: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
        for r in &self.records {
            let g = groups.entry(r.condition.clone()).or_default();
            for (k, v) in &r.metrics {
                g.entry(k.clone()).or_default().push(*v);
            }
        }
        self.summary = groups
            .into_iter()
            .map(|(cond, metrics)| {
                let stats = metrics
                    .into_iter()
                    .map(|(k, vals)| {
                        let n = vals.len();
                        let mean = vals.iter().sum::<f64>() / n as f64;
                        let var = if n > 1 { vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
                        (k, SummaryStat { mean, std: var.sqrt(), n })
                    })
                    .collect();
                (cond, stats)
            })
            .collect();
    }

    pub fn mean(&self, condition: &str, metric: &str) -> Option<f64> {
        self.summary.get(condition)?.get(metric).map(|s| s.mean)
    }

    /// One row per record; metric columns are the union over all records.
    pub fn to_csv(&self) -> String {
        let mut cols: Vec<&String> = self.records.iter().flat_map(|r| r.metrics.keys()).collect();
        cols.sort();
        cols.dedup();
        let mut out = String::from("experiment,condition,protocol,ratio,seed,samples");
        for c in &cols {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}",
                self.experiment,
                r.condition,
                r.protocol.as_deref().unwrap_or(""),
                r.ratio.map(|v| v.to_string()).unwrap_or_default(),
                r.seed,
                r.samples
            ));
            for c in &cols {
                out.push(',');
                if let Some(v) = r.metrics.get(*c) {
                    out.push_str(&v.to_string());
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Check that a JSON value has the report schema: `experiment` (string),
/// `conditions` (strings), `records` (objects with `condition`, `seed`,
/// `samples` and numeric `metrics`), and `summary` (object).
pub fn validate_report_json(v: &serde_json::Value) -> Result<()> {
    let obj = v.as_object().ok_or_else(|| input_err!("report must be a JSON object"))?;
    if !obj.get("experiment").is_some_and(|e| e.is_string()) {
        return Err(input_err!("report.experiment must be a string"));
    }
    let conds = obj.get("conditions").and_then(|c| c.as_array()).ok_or_else(|| input_err!("report.conditions must be an array"))?;
    if conds.iter().any(|c| !c.is_string()) {
        return Err(input_err!("report.conditions must hold strings"));
    }
    let records = obj.get("records").and_then(|r| r.as_array()).ok_or_else(|| input_err!("report.records must be an array"))?;
    for (i, r) in records.iter().enumerate() {
        let ok = r.get("condition").is_some_and(|c| c.is_string())
            && r.get("seed").is_some_and(|s| s.is_u64())
            && r.get("samples").is_some_and(|s| s.is_u64())
            && r.get("metrics").and_then(|m| m.as_object()).is_some_and(|m| m.values().all(|x| x.is_number()));
        if !ok {
            return Err(input_err!("report.records[{i}] does not match the record schema"));
        }
    }
    if !obj.get("summary").is_some_and(|s| s.is_object()) {
        return Err(input_err!("report.summary must be an object"));
    }
    Ok(())
}

/// Write `<stem>.json` and `<stem>.csv` next to each other.
pub fn write_report(report: &DiagnosticsReport, json_path: &Path) -> Result<()> {
    std::fs::write(json_path, serde_json::to_vec_pretty(report)?)?;
    std::fs::write(json_path.with_extension("csv"), report.to_csv())?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<DiagnosticsReport> {
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(path)?)?;
    validate_report_json(&v)?;
    Ok(serde_json::from_value(v)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> DiagnosticsReport {
        let mut r = DiagnosticsReport::new("demo");
        for seed in 0..3 {
            r.push(Record {
                condition: "a".into(),
                protocol: Some("front_loaded".into()),
                ratio: Some(0.5),
                seed,
                samples: 10,
                metrics: BTreeMap::from([("ctr".into(), 0.1 * seed as f64 + 0.3), ("psnr".into(), 20.0)]),
            });
        }
        r.summarize();
        r
    }

    #[test]
    fn summary_statistics() {
        let r = sample();
        let s = &r.summary["a"]["ctr"];
        assert!((s.mean - 0.4).abs() < 1e-12);
        assert!((s.std - 0.1).abs() < 1e-12);
        assert_eq!(s.n, 3);
    }

    #[test]
    fn json_round_trip_and_schema() {
        let r = sample();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        write_report(&r, &p).unwrap();
        assert_eq!(read_report(&p).unwrap(), r);
        let csv = std::fs::read_to_string(p.with_extension("csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(validate_report_json(&serde_json::json!({"experiment": 1})).is_err());
    }
}
