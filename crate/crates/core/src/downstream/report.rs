//! TA/SA report assembly and serialization.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::util::{atomic_write, digest_of};
use crate::Result;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// `round(100 · sa / ta)`, or `None` when `ta` is zero.
pub fn ratio_percent(ta: f64, sa: f64) -> Option<i64> {
    (ta > 0.0).then(|| (100.0 * sa / ta).round() as i64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: String,
    pub ta: f64,
    pub sa: f64,
    /// `sa / ta`; absent when `ta` is zero.
    pub ratio: Option<f64>,
    pub ratio_percent: Option<i64>,
    /// Queries spent extracting the target-side downstream features.
    pub queries_downstream: u64,
    pub test_size: usize,
}

impl TaskResult {
    pub fn new(task: &str, ta: f64, sa: f64, queries_downstream: u64, test_size: usize) -> Self {
        TaskResult {
            task: task.to_string(),
            ta,
            sa,
            ratio: (ta > 0.0).then(|| sa / ta),
            ratio_percent: ratio_percent(ta, sa),
            queries_downstream,
            test_size,
        }
    }
}

/// Position of a report on a sweep axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub axis: String,
    pub value: String,
    /// Numeric form of `value`, when it has one.
    pub x: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub label: String,
    pub variant: Option<String>,
    pub defense: String,
    pub tasks: Vec<TaskResult>,
    pub queries_attack: u64,
    pub queries_downstream: u64,
    pub cost_dollars: f64,
    pub manifest_digest: Option<String>,
    pub config_digests: Vec<(String, String)>,
    pub encoder_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepPoint>,
}

impl EvalReport {
    pub fn new(label: &str, defense: &str, tasks: Vec<TaskResult>, queries_attack: u64, price_per_1000: f64) -> Self {
        let queries_downstream = tasks.iter().map(|t| t.queries_downstream).sum();
        EvalReport {
            schema_version: REPORT_SCHEMA_VERSION,
            label: label.to_string(),
            variant: None,
            defense: defense.to_string(),
            cost_dollars: crate::eaas::cost_of(queries_attack, price_per_1000),
            tasks,
            queries_attack,
            queries_downstream,
            manifest_digest: None,
            config_digests: Vec::new(),
            encoder_digest: None,
            sweep: None,
        }
    }

    pub fn task(&self, name: &str) -> Option<&TaskResult> {
        self.tasks.iter().find(|t| t.task == name)
    }

    /// Digest of the report content.
    pub fn digest(&self) -> String {
        digest_of(self)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn csv_header() -> &'static str {
        "label,variant,defense,task,ta,sa,ratio_percent,queries_attack,queries_downstream,cost_dollars"
    }

    pub fn csv_rows(&self) -> Vec<String> {
        self.tasks
            .iter()
            .map(|t| {
                format!(
                    "{},{},{},{},{:.4},{:.4},{},{},{},{:.4}",
                    self.label,
                    self.variant.as_deref().unwrap_or(""),
                    self.defense,
                    t.task,
                    t.ta,
                    t.sa,
                    t.ratio_percent.map(|r| r.to_string()).unwrap_or_else(|| "undefined".into()),
                    self.queries_attack,
                    t.queries_downstream,
                    self.cost_dollars
                )
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::csv_header());
        s.push('\n');
        for r in self.csv_rows() {
            s.push_str(&r);
            s.push('\n');
        }
        s
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        atomic_write(&dir.join(format!("{stem}.json")), self.to_json()?.as_bytes())?;
        atomic_write(&dir.join(format!("{stem}.csv")), self.to_csv().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::Error::load(path, e.to_string()))?;
        let r: EvalReport = serde_json::from_str(&text).map_err(|e| crate::Error::load(path, e.to_string()))?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(crate::Error::load(path, format!("report schema {} unsupported", r.schema_version)));
        }
        Ok(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_examples() {
        assert_eq!(ratio_percent(0.8067, 0.7943), Some(98));
        assert_eq!(ratio_percent(0.5, 0.5), Some(100));
        assert_eq!(ratio_percent(0.0, 0.3), None);
        let t = TaskResult::new("x", 0.0, 0.2, 0, 10);
        assert!(t.ratio.is_none());
        let r = EvalReport::new("a", "none", vec![t], 0, 3.2);
        assert!(r.to_csv().contains("undefined"));
    }

    #[test]
    fn round_trip_and_schema_guard() {
        let r = EvalReport::new("a", "none", vec![TaskResult::new("d", 0.9, 0.85, 100, 50)], 2500, 3.2);
        assert!((r.cost_dollars - 8.0).abs() < 1e-12);
        let dir = tempfile::tempdir().unwrap();
        r.write(dir.path(), "rep").unwrap();
        let back = EvalReport::load(&dir.path().join("rep.json")).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.digest(), r.digest());
        let mut v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        v["schema_version"] = 9.into();
        std::fs::write(dir.path().join("bad.json"), v.to_string()).unwrap();
        assert!(EvalReport::load(&dir.path().join("bad.json")).is_err());
    }
}
