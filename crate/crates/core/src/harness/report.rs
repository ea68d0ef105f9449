//! CSV, JSON and SVG output for experiment results.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::Result;
use crate::harness::experiments::{ConsistencyReport, ConvergenceTable, RateReport};
use crate::training::LossBreakdown;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Writes `rates.csv`, `rates.json` and `rates.svg` into `dir`.
pub fn write_rate_report(dir: &Path, report: &RateReport) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let csv_path = dir.join("rates.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["delta", "worst_error", "mean_error"])?;
    for r in &report.rows {
        w.write_record([r.delta.to_string(), r.worst_error.to_string(), r.mean_error.to_string()])?;
    }
    w.flush()?;

    let json_path = dir.join("rates.json");
    write_json(&json_path, report)?;

    let worst: Vec<(f64, f64)> = report.rows.iter().map(|r| (r.delta, r.worst_error)).collect();
    let mean: Vec<(f64, f64)> = report.rows.iter().map(|r| (r.delta, r.mean_error)).collect();
    // reference line through the first worst-case point with the expected slope
    let reference: Vec<(f64, f64)> = match worst.first() {
        Some(&(d0, e0)) => worst
            .iter()
            .map(|&(d, _)| (d, e0 * (d / d0).powf(report.expected_slope)))
            .collect(),
        None => Vec::new(),
    };
    let svg_path = dir.join("rates.svg");
    let title = format!(
        "{} mu={} slope {:.3} (expected {:.3})",
        report.filter, report.mu, report.fitted_slope, report.expected_slope
    );
    fs::write(
        &svg_path,
        loglog_svg(
            &title,
            &[
                Series::new("worst", &worst, "#c0392b"),
                Series::new("mean", &mean, "#2980b9"),
                Series::new("reference", &reference, "#7f8c8d"),
            ],
        ),
    )?;
    Ok(vec![csv_path, json_path, svg_path])
}

/// Writes `convergence.csv`, `convergence.json` and `convergence.svg` into `dir`.
pub fn write_convergence_report(dir: &Path, table: &ConvergenceTable) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let csv_path = dir.join("convergence.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["delta", "alpha", "sup_error", "mean_error"])?;
    for r in &table.rows {
        w.write_record([
            r.delta.to_string(),
            r.alpha.to_string(),
            r.sup_error.to_string(),
            r.mean_error.to_string(),
        ])?;
    }
    w.flush()?;

    let json_path = dir.join("convergence.json");
    write_json(&json_path, table)?;

    let sup: Vec<(f64, f64)> = table.rows.iter().map(|r| (r.delta, r.sup_error)).collect();
    let svg_path = dir.join("convergence.svg");
    fs::write(&svg_path, loglog_svg("convergence", &[Series::new("sup", &sup, "#c0392b")]))?;
    Ok(vec![csv_path, json_path, svg_path])
}

pub fn write_consistency_report(dir: &Path, report: &ConsistencyReport) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join("consistency.json");
    write_json(&path, report)?;
    Ok(path)
}

/// One row per epoch: `epoch,data_term,reg_term,total`.
pub fn write_loss_history(path: &Path, history: &[LossBreakdown]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "data_term", "reg_term", "total"])?;
    for (epoch, l) in history.iter().enumerate() {
        w.write_record([
            epoch.to_string(),
            l.data_term.to_string(),
            l.reg_term.to_string(),
            l.total.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub struct Series<'a> {
    pub label: &'a str,
    pub points: &'a [(f64, f64)],
    pub color: &'a str,
}

impl<'a> Series<'a> {
    pub fn new(label: &'a str, points: &'a [(f64, f64)], color: &'a str) -> Self {
        Self { label, points, color }
    }
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 60.0;

/// Minimal log-log line plot. Non-positive points are dropped.
pub fn loglog_svg(title: &str, series: &[Series<'_>]) -> String {
    let logs: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|s| {
            s.points
                .iter()
                .filter(|(x, y)| *x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite())
                .map(|(x, y)| (x.log10(), y.log10()))
                .collect()
        })
        .collect();
    let all = logs.iter().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let (x0, x1) = (x0.floor(), x1.ceil().max(x0.floor() + 1.0));
    let (y0, y1) = (y0.floor(), y1.ceil().max(y0.floor() + 1.0));
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    for d in (x0 as i64)..=(x1 as i64) {
        let x = sx(d as f64);
        let _ = writeln!(
            out,
            r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{MARGIN}" stroke="#eee"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">1e{d}</text>"##,
            HEIGHT - MARGIN,
            HEIGHT - MARGIN + 16.0
        );
    }
    for d in (y0 as i64)..=(y1 as i64) {
        let y = sy(d as f64);
        let _ = writeln!(
            out,
            r##"<line x1="{MARGIN}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#eee"/><text x="{:.1}" y="{:.1}" text-anchor="end">1e{d}</text>"##,
            WIDTH - MARGIN,
            MARGIN - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        WIDTH - 2.0 * MARGIN,
        HEIGHT - 2.0 * MARGIN
    );
    for (i, (s, pts)) in series.iter().zip(&logs).enumerate() {
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"/>"#,
            path.join(" "),
            s.color
        );
        for &(x, y) in pts {
            let _ = writeln!(out, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{}"/>"#, sx(x), sy(y), s.color);
        }
        let ly = MARGIN + 16.0 + 16.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{ly:.1}" fill="{}">{}</text>"#,
            MARGIN + 10.0,
            s.color,
            escape(s.label)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
