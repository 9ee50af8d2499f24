use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Accuracies of one encoder across probed blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub accuracies: Vec<f64>,
}

impl ReportRow {
    pub fn average(&self) -> f64 {
        if self.accuracies.is_empty() {
            return f64::NAN;
        }
        self.accuracies.iter().sum::<f64>() / self.accuracies.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub method: String,
    pub fraction: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ProbeReport {
    /// 1-based block indices labelling the columns.
    pub blocks: Vec<usize>,
    pub rows: Vec<ReportRow>,
    pub curve: Vec<CurvePoint>,
}

fn header(blocks: &[usize]) -> Vec<String> {
    let mut h = vec!["method".to_string()];
    h.extend(blocks.iter().map(|b| format!("conv{b}")));
    h.push("average".into());
    h
}

pub fn render_markdown(r: &ProbeReport) -> String {
    let h = header(&r.blocks);
    let mut s = String::new();
    if !r.rows.is_empty() {
        s.push_str(&format!("| {} |\n", h.join(" | ")));
        s.push_str(&format!("|{}\n", "---|".repeat(h.len())));
    }
    for row in &r.rows {
        let cells: Vec<String> = row
            .accuracies
            .iter()
            .chain(std::iter::once(&row.average()))
            .map(|a| format!("{:.1}", 100.0 * a))
            .collect();
        s.push_str(&format!("| {} | {} |\n", row.method, cells.join(" | ")));
    }
    if !r.curve.is_empty() {
        if !s.is_empty() {
            s.push('\n');
        }
        s.push_str("| method | label fraction | accuracy |\n|---|---|---|\n");
        for p in &r.curve {
            s.push_str(&format!("| {} | {} | {:.1} |\n", p.method, p.fraction, 100.0 * p.accuracy));
        }
    }
    s
}

fn table_csv(r: &ProbeReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header(&r.blocks))?;
    for row in &r.rows {
        let mut rec = vec![row.method.clone()];
        rec.extend(row.accuracies.iter().map(|a| a.to_string()));
        rec.push(row.average().to_string());
        w.write_record(&rec)?;
    }
    finish(w)
}

fn curve_csv(r: &ProbeReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "fraction", "accuracy"])?;
    for p in &r.curve {
        w.write_record([p.method.clone(), p.fraction.to_string(), p.accuracy.to_string()])?;
    }
    finish(w)
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

fn num(s: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::Format(format!("not a number: '{s}'")))
}

/// Parse the block table back into rows (block labels and averages checked).
pub fn parse_report_csv(text: &str) -> Result<(Vec<usize>, Vec<ReportRow>)> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let h = rdr.headers()?.clone();
    let n = h.len();
    if n < 3 || &h[0] != "method" || &h[n - 1] != "average" {
        return Err(Error::Format("report header must be method,conv..,average".into()));
    }
    let blocks = (1..n - 1)
        .map(|i| {
            h[i].strip_prefix("conv")
                .and_then(|b| b.parse().ok())
                .ok_or_else(|| Error::Format(format!("bad column '{}'", &h[i])))
        })
        .collect::<Result<Vec<usize>>>()?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let accuracies = (1..n - 1).map(|i| num(&rec[i])).collect::<Result<Vec<_>>>()?;
        let row = ReportRow { method: rec[0].to_string(), accuracies };
        if (row.average() - num(&rec[n - 1])?).abs() > 1e-9 {
            return Err(Error::Format(format!("average column of '{}' is inconsistent", row.method)));
        }
        rows.push(row);
    }
    Ok((blocks, rows))
}

pub fn parse_curve_csv(text: &str) -> Result<Vec<CurvePoint>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

/// Write `report.md`, `report.csv` and, when present, `curve.csv` into `dir`.
pub fn emit_report(r: &ProbeReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = vec![(dir.join("report.md"), render_markdown(r))];
    if !r.rows.is_empty() {
        files.push((dir.join("report.csv"), table_csv(r)?));
    }
    if !r.curve.is_empty() {
        files.push((dir.join("curve.csv"), curve_csv(r)?));
    }
    for (p, text) in &files {
        std::fs::write(p, text).map_err(|e| Error::io(p, e))?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}
