//! Table emission: every result table is written as CSV (machine) and
//! Markdown (human) with deterministic formatting, so identical runs produce
//! identical bytes.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::regions::RegionReport;

#[derive(Debug, Clone)]
pub struct Table {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

fn csv_escape(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

impl Table {
    pub fn new(title: impl Into<String>, columns: Vec<String>) -> Self {
        Self { title: title.into(), columns, rows: Vec::new() }
    }

    pub fn push_row(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.columns.iter().map(|c| csv_escape(c)).collect::<Vec<_>>().join(","));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.iter().map(|c| csv_escape(c)).collect::<Vec<_>>().join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("### {}\n\n", self.title);
        out.push_str(&format!("| {} |\n", self.columns.join(" | ")));
        out.push_str(&format!("|{}\n", "---|".repeat(self.columns.len())));
        for row in &self.rows {
            out.push_str(&format!("| {} |\n", row.join(" | ")));
        }
        out
    }

    /// Write `<stem>.csv` and `<stem>.md` under `dir`; returns both paths.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let md_path = dir.join(format!("{stem}.md"));
        std::fs::write(&csv_path, self.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
        std::fs::write(&md_path, self.to_markdown()).map_err(|e| Error::io(&md_path, e))?;
        Ok(vec![csv_path, md_path])
    }
}

pub fn fmt_rate(x: f64) -> String {
    format!("{x:.3}")
}

pub fn fmt_l2(x: f64) -> String {
    format!("{x:.3}")
}

pub fn fmt_err(x: f64) -> String {
    format!("{x:.4}")
}

pub fn fmt_size(x: f64) -> String {
    format!("{x:.4}")
}

fn model_columns(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("M_{i}")).collect()
}

/// Per-model clean-test misclassification rates (one row).
pub fn baseline_table(arch: &str, errors: &[f64]) -> Table {
    let mut t = Table::new(
        format!("{arch} misclassification rates on clean test images"),
        model_columns(errors.len()),
    );
    t.push_row(errors.iter().map(|&e| fmt_err(e)).collect());
    t
}

/// Attack transfer matrix: one row per adversarial set with its perturbed
/// pixel count and per-model misclassification rate.
pub fn transfer_table(rows: &[(String, Vec<f64>)], n_models: usize) -> Table {
    let mut cols = vec!["attack".to_string()];
    cols.extend(model_columns(n_models));
    let mut t = Table::new("attack misclassification rates", cols);
    for (label, rates) in rows {
        let mut row = vec![label.clone()];
        row.extend(rates.iter().map(|&r| fmt_rate(r)));
        t.push_row(row);
    }
    t
}

/// Hyper-rectangle misclassification rates with the smallest selected
/// interval size and the region type.
pub fn region_rate_table(reports: &[RegionReport], n_models: usize) -> Table {
    let mut cols = vec!["region".to_string(), "s_(b)".to_string()];
    cols.extend(model_columns(n_models));
    cols.push("type".to_string());
    let mut t = Table::new("misclassification rates in hyper-rectangles", cols);
    for r in reports {
        let mut row = vec![r.label.clone(), fmt_size(r.smallest_size)];
        row.extend(r.rates.iter().map(|&x| fmt_rate(x)));
        row.push(r.region_type.label().to_string());
        t.push_row(row);
    }
    t
}

/// Sampled-vs-attack L2 distance comparison.
pub fn region_l2_table(reports: &[RegionReport]) -> Table {
    let cols = [
        "region",
        "L2_min",
        "L2_max",
        "L2_mean",
        "L2_min attack",
        "L2_max attack",
        "L2_mean attack",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let mut t = Table::new("L2 distance of sampled vs attack images", cols);
    let opt = |v: Option<f64>| v.map_or("-".to_string(), fmt_l2);
    for r in reports {
        t.push_row(vec![
            r.label.clone(),
            fmt_l2(r.sample_l2_min),
            fmt_l2(r.sample_l2_max),
            fmt_l2(r.sample_l2_mean),
            opt(r.attack_l2_min),
            opt(r.attack_l2_max),
            opt(r.attack_l2_mean),
        ]);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_and_markdown_shapes() {
        let mut t = Table::new("demo", vec!["a".into(), "b".into()]);
        t.push_row(vec!["1".into(), "x,y".into()]);
        let csv = t.to_csv();
        assert_eq!(csv, "a,b\n1,\"x,y\"\n");
        let md = t.to_markdown();
        assert!(md.starts_with("### demo"));
        assert!(md.contains("| a | b |"));
        assert!(md.contains("| 1 | x,y |"));
    }

    #[test]
    fn baseline_row_formats_errors() {
        let t = baseline_table("CNN", &[0.033, 0.0125]);
        assert_eq!(t.columns, vec!["M_1", "M_2"]);
        assert_eq!(t.rows[0], vec!["0.0330", "0.0125"]);
    }
}
