//! Versioned run reports, serialized as JSON or flattened to CSV.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Result, SraError};

pub const REPORT_SCHEMA: &str = "sra-report/v1";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Json,
    Csv,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(SraError::Usage(format!("unknown report format {other:?}; expected json or csv"))),
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
        }
    }
}

/// One pass/fail threshold evaluated by a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    /// Human-readable condition, e.g. `"> 0.5"`.
    pub condition: String,
    pub passed: bool,
}

impl Check {
    pub fn new(name: &str, value: f64, condition: &str, passed: bool) -> Check {
        Check {
            name: name.into(),
            value,
            condition: condition.into(),
            passed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub command: String,
    /// Root seed; together with `config` it reproduces the run.
    pub seed: u64,
    /// Fully resolved configuration.
    pub config: Value,
    pub metrics: Map<String, Value>,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn new(command: &str, seed: u64, config: Value) -> Report {
        Report {
            schema: REPORT_SCHEMA.into(),
            command: command.into(),
            seed,
            config,
            metrics: Map::new(),
            checks: Vec::new(),
        }
    }

    pub fn metric(&mut self, key: &str, value: impl Serialize) -> &mut Self {
        let v = serde_json::to_value(value).expect("metrics are plain data");
        self.metrics.insert(key.into(), v);
        self
    }

    pub fn check(&mut self, check: Check) -> &mut Self {
        self.checks.push(check);
        self
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `key,value` rows; nested values use dotted keys, arrays numeric ones.
    pub fn to_csv(&self) -> String {
        let mut rows = Vec::new();
        flatten("schema", &Value::from(self.schema.clone()), &mut rows);
        flatten("command", &Value::from(self.command.clone()), &mut rows);
        flatten("seed", &Value::from(self.seed), &mut rows);
        flatten("config", &self.config, &mut rows);
        flatten("metrics", &Value::Object(self.metrics.clone()), &mut rows);
        for c in &self.checks {
            rows.push((format!("checks.{}.value", c.name), c.value.to_string()));
            rows.push((format!("checks.{}.condition", c.name), c.condition.clone()));
            rows.push((format!("checks.{}.passed", c.name), c.passed.to_string()));
        }
        let mut out = String::from("key,value\n");
        for (k, v) in rows {
            let _ = writeln!(out, "{},{}", csv_field(&k), csv_field(&v));
        }
        out
    }

    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Json => self.to_json(),
            ReportFormat::Csv => self.to_csv(),
        }
    }

    /// Writes `<dir>/<command>.<ext>` and returns the path.
    pub fn write(&self, dir: impl AsRef<Path>, format: ReportFormat) -> Result<PathBuf> {
        fs::create_dir_all(dir.as_ref())?;
        let path = dir.as_ref().join(format!("{}.{}", self.command, format.extension()));
        fs::write(&path, self.render(format))?;
        Ok(path)
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                flatten(&format!("{prefix}.{k}"), v, out);
            }
        }
        Value::Array(a) => {
            for (i, v) in a.iter().enumerate() {
                flatten(&format!("{prefix}.{i}"), v, out);
            }
        }
        Value::String(s) => out.push((prefix.into(), s.clone())),
        other => out.push((prefix.into(), other.to_string())),
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.into()
    }
}
