use serde::Serialize;
use serde_json::{json, Value};

/// Plain-text table derived from a report.
#[derive(Debug, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn row(&mut self, cells: Vec<String>) {
        self.rows.push(cells);
    }

    pub fn render(&self) -> String {
        let cols = self.header.len();
        let mut widths: Vec<usize> = self.header.iter().map(|h| h.chars().count()).collect();
        for r in &self.rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |cells: &[String]| {
            let parts: Vec<String> = (0..cols)
                .map(|i| {
                    let c = cells.get(i).map(String::as_str).unwrap_or("");
                    format!("{c:<width$}", width = widths[i])
                })
                .collect();
            parts.join("  ").trim_end().to_string()
        };
        let mut out = line(&self.header);
        out.push('\n');
        out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }
}

pub fn f(v: f64) -> String {
    format!("{v:.4}")
}

/// Result of one command: the JSON body and its tabular view.
pub struct Outcome {
    pub config: Value,
    pub result: Value,
    pub table: Table,
    /// A self-check command found a failing row.
    pub failed: bool,
}

impl Outcome {
    pub fn new(config: impl Serialize, result: impl Serialize, table: Table) -> Self {
        Outcome { config: to_value(config), result: to_value(result), table, failed: false }
    }
}

pub fn to_value(v: impl Serialize) -> Value {
    serde_json::to_value(v).expect("report values serialize")
}

/// The full JSON document: command, toolkit version, seed, config, result.
pub fn document(command: &str, seed: u64, outcome: &Outcome) -> String {
    let doc = json!({
        "command": command,
        "version": mavlkit::VERSION,
        "seed": seed,
        "config": outcome.config,
        "result": outcome.result,
    });
    let mut s = serde_json::to_string_pretty(&doc).expect("report serializes");
    s.push('\n');
    s
}
