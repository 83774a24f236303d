use std::path::Path;

use bml::config::ExperimentConfig;
use bml::{BmlError, Result};
use serde_json::Value;

/// One CSV artifact. The header is fixed even when there are no rows.
#[derive(Debug, Clone)]
pub struct Table {
    pub file: String,
    pub header: &'static [&'static str],
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(file: impl Into<String>, header: &'static [&'static str]) -> Self {
        Table { file: file.into(), header, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }
}

#[derive(Debug, Clone)]
pub struct Report {
    /// Deterministic given the config: no timings, no paths.
    pub summary: Value,
    pub tables: Vec<Table>,
    /// Human-readable lines, also written to summary.txt.
    pub text: Vec<String>,
    pub passed: bool,
}

fn io(path: &Path, e: impl std::fmt::Display) -> BmlError {
    BmlError::IOError(format!("{}: {e}", path.display()))
}

pub fn write_csv(table: &Table, dir: &Path) -> Result<()> {
    let path = dir.join(&table.file);
    let mut w = csv::Writer::from_path(&path).map_err(|e| io(&path, e))?;
    w.write_record(table.header).map_err(|e| io(&path, e))?;
    for r in &table.rows {
        w.write_record(r).map_err(|e| io(&path, e))?;
    }
    w.flush().map_err(|e| io(&path, e))
}

pub fn emit(rep: &Report, cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let name = cfg.experiment.name();
    let write = |file: &str, body: String| {
        let p = dir.join(file);
        std::fs::write(&p, body).map_err(|e| io(&p, e))
    };
    write("config.json", cfg.to_json() + "\n")?;
    let summary = serde_json::to_string_pretty(&rep.summary).expect("json values serialize");
    write(&format!("{name}.json"), summary + "\n")?;
    write("summary.txt", rep.text.join("\n") + "\n")?;
    for t in &rep.tables {
        write_csv(t, dir)?;
    }
    Ok(())
}

pub fn num(x: f64) -> String {
    format!("{x}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_table_is_header_only() {
        let dir = std::env::temp_dir().join(format!("bml-report-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let t = Table::new("empty.csv", &["t", "M1", "M2", "MDon", "pred_num", "pred_den"]);
        write_csv(&t, &dir).unwrap();
        assert_eq!(std::fs::read_to_string(dir.join("empty.csv")).unwrap(), "t,M1,M2,MDon,pred_num,pred_den\n");
    }
}
