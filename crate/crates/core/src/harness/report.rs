//! Run-directory reports: JSON summary, CSV tables and SVG line plots.

use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde_json::{json, Value};

use super::io::write_atomic;
use crate::error::{Error, Result};

pub const CURVES_FILE: &str = "curves.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const DEPTH_FILE: &str = "depth.csv";
pub const LATENCY_FILE: &str = "latency.csv";
pub const REPORT_FILE: &str = "report.json";

/// A numeric CSV table with a header row.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for r in &self.rows {
            let cells: Vec<String> = r.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, head) = lines.next().ok_or(Error::Parse { line: 1, message: "empty table".into() })?;
        let columns: Vec<String> = head.split(',').map(|s| s.trim().to_string()).collect();
        let mut rows = Vec::new();
        for (i, line) in lines {
            let row = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
            if row.len() != columns.len() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("{} cells for {} columns", row.len(), columns.len()),
                });
            }
            rows.push(row);
        }
        Ok(Self { columns, rows })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Draws one SVG with a line per series.
pub fn line_plot(path: &Path, title: &str, x_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    let pts = || series.iter().flat_map(|(_, s)| s.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts() {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        return Err(Error::contract(format!("nothing to plot for {}", path.display())));
    }
    let pad = ((y1 - y0) * 0.05).max(1e-9);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let x1 = if x1 > x0 { x1 } else { x0 + 1.0 };

    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (720, 440)).into_drawing_area();
        let plot_err = |e: &dyn std::fmt::Display| Error::contract(format!("plot {}: {e}", path.display()));
        root.fill(&WHITE).map_err(|e| plot_err(&e))?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(64)
            .build_cartesian_2d(x0..x1, y0..y1)
            .map_err(|e| plot_err(&e))?;
        chart.configure_mesh().x_desc(x_label).draw().map_err(|e| plot_err(&e))?;
        for (i, (name, s)) in series.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(s.iter().copied(), color.stroke_width(2)))
                .map_err(|e| plot_err(&e))?
                .label(name.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| plot_err(&e))?;
        root.present().map_err(|e| plot_err(&e))?;
    }
    write_atomic(path, svg.as_bytes())
}

fn table_series(t: &Table, x: &str, ys: &[&str]) -> Vec<(String, Vec<(f64, f64)>)> {
    let Some(xs) = t.column(x) else { return Vec::new() };
    ys.iter()
        .filter_map(|&y| t.column(y).map(|v| (y.to_string(), xs.iter().copied().zip(v).collect())))
        .collect()
}

/// Columns whose name ends in one of `suffixes`, in table order.
fn matching<'a>(t: &'a Table, suffixes: &[&str]) -> Vec<&'a str> {
    t.columns.iter().map(String::as_str).filter(|c| suffixes.iter().any(|s| c.ends_with(s))).collect()
}

/// Writes `report.json` and SVG plots for whatever a run directory holds.
/// Curves and metrics are required; depth and latency tables are optional.
pub fn emit_report(run_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = run_dir.as_ref();
    let missing: Vec<String> = [CURVES_FILE, METRICS_FILE]
        .iter()
        .filter(|f| !dir.join(f).is_file())
        .map(|f| dir.join(f).display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingArtifacts(missing));
    }
    let mut written = Vec::new();
    let curves = Table::read(dir.join(CURVES_FILE))?;
    let metrics_path = dir.join(METRICS_FILE);
    let metrics: Value =
        serde_json::from_str(&fs::read_to_string(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?)?;

    let valid_cols = matching(&curves, &["NDCG@10", "Recall@10"]);
    if !curves.rows.is_empty() && !valid_cols.is_empty() {
        let p = dir.join("curves.svg");
        line_plot(&p, "validation metrics", "epoch", &table_series(&curves, "epoch", &valid_cols))?;
        written.push(p);
    }
    let mut report = json!({
        "metrics": metrics,
        "epochs": curves.rows.len(),
    });
    if dir.join(DEPTH_FILE).is_file() {
        let t = Table::read(dir.join(DEPTH_FILE))?;
        let cols = matching(&t, &["@10"]);
        let p = dir.join("depth.svg");
        line_plot(&p, "metric vs reasoning depth", "depth", &table_series(&t, "depth", &cols))?;
        written.push(p);
        report["depth"] = table_json(&t);
    }
    if dir.join(LATENCY_FILE).is_file() {
        let t = Table::read(dir.join(LATENCY_FILE))?;
        let p = dir.join("latency.svg");
        line_plot(&p, "forward latency vs depth", "depth", &table_series(&t, "depth", &["ratio"]))?;
        written.push(p);
        report["latency"] = table_json(&t);
    }
    let p = dir.join(REPORT_FILE);
    write_atomic(&p, &serde_json::to_vec_pretty(&report)?)?;
    written.push(p);
    Ok(written)
}

fn table_json(t: &Table) -> Value {
    let rows: Vec<Value> = t
        .rows
        .iter()
        .map(|r| Value::Object(t.columns.iter().cloned().zip(r.iter().map(|&v| json!(v))).collect()))
        .collect();
    Value::Array(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_round_trip() {
        let t = Table { columns: vec!["depth".into(), "x".into()], rows: vec![vec![1.0, 0.5], vec![2.0, 0.25]] };
        assert_eq!(Table::parse(&t.to_csv()).unwrap(), t);
        assert!(Table::parse("a,b\n1\n").is_err());
        assert!(Table::parse("").is_err());
    }

    #[test]
    fn empty_run_dir_lists_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        match emit_report(dir.path()) {
            Err(Error::MissingArtifacts(files)) => {
                assert_eq!(files.len(), 2);
                assert!(files[0].ends_with(CURVES_FILE) && files[1].ends_with(METRICS_FILE));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn report_with_all_tables() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        fs::write(d.join(CURVES_FILE), "epoch,loss,valid_NDCG@10\n1,2.5,0.01\n2,2.1,0.02\n").unwrap();
        fs::write(d.join(METRICS_FILE), r#"{"split":"test","metrics":{"NDCG@10":0.02}}"#).unwrap();
        fs::write(d.join(DEPTH_FILE), "depth,Recall@10,NDCG@10\n1,0.1,0.05\n2,0.12,0.06\n").unwrap();
        fs::write(d.join(LATENCY_FILE), "depth,secs,ratio\n1,0.1,1\n2,0.2,2\n").unwrap();
        let files = emit_report(d).unwrap();
        assert_eq!(files.len(), 4);
        let svg = fs::read_to_string(d.join("curves.svg")).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("valid_NDCG@10"));
        let r: Value = serde_json::from_str(&fs::read_to_string(d.join(REPORT_FILE)).unwrap()).unwrap();
        assert_eq!(r["epochs"], 2);
        assert_eq!(r["latency"][1]["ratio"], 2.0);
        assert_eq!(r["depth"][0]["NDCG@10"], 0.05);
    }
}
