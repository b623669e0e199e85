//! CSV report rows and the size-vs-F1 scatter plot.

use std::fmt::Write as _;
use std::path::Path;

use crate::CliError;

/// Appends `row` to a CSV file, writing `header` first if the file is new.
pub fn append_csv_row(path: &Path, header: &str, row: &str) -> Result<(), CliError> {
    let mut text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(_) => format!("{header}\n"),
    };
    if !text.ends_with('\n') {
        text.push('\n');
    }
    text.push_str(row);
    text.push('\n');
    std::fs::write(path, text)
        .map_err(|e| CliError::user(format!("cannot write {}: {e}", path.display())))
}

pub fn read_csv_rows(path: &Path) -> Vec<Vec<String>> {
    match std::fs::read_to_string(path) {
        Ok(text) => text
            .lines()
            .skip(1)
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.split(',').map(str::to_string).collect())
            .collect(),
        Err(_) => Vec::new(),
    }
}

/// One marker on the scatter plot.
pub struct ScatterPoint {
    pub size_mb: f64,
    pub f1: f64,
    pub label: String,
}

/// Writes a minimal standalone SVG scatter of model size against macro-F1.
pub fn write_scatter_svg(path: &Path, points: &[ScatterPoint]) -> Result<(), CliError> {
    let (w, h, margin) = (640.0, 420.0, 60.0);
    let (x_lo, x_hi) = bounds(points.iter().map(|p| p.size_mb), 0.0, 1.0);
    let (y_lo, y_hi) = bounds(points.iter().map(|p| p.f1), 0.0, 1.0);
    let sx = |v: f64| margin + (v - x_lo) / (x_hi - x_lo) * (w - 2.0 * margin);
    let sy = |v: f64| h - margin - (v - y_lo) / (y_hi - y_lo) * (h - 2.0 * margin);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">"
    );
    let _ = writeln!(svg, "  <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "  <line x1=\"{m}\" y1=\"{y}\" x2=\"{x}\" y2=\"{y}\" stroke=\"black\"/>",
        m = margin,
        x = w - margin,
        y = h - margin
    );
    let _ = writeln!(
        svg,
        "  <line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{y}\" stroke=\"black\"/>",
        m = margin,
        y = h - margin
    );
    let _ = writeln!(
        svg,
        "  <text x=\"{x}\" y=\"{y}\" text-anchor=\"middle\" font-size=\"13\">model size (MB)</text>",
        x = w / 2.0,
        y = h - margin / 3.0
    );
    let _ = writeln!(
        svg,
        "  <text x=\"{x}\" y=\"{y}\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 {x} {y})\">macro F1</text>",
        x = margin / 3.0,
        y = h / 2.0
    );
    for frac in [0.0, 0.5, 1.0] {
        let xv = x_lo + frac * (x_hi - x_lo);
        let yv = y_lo + frac * (y_hi - y_lo);
        let _ = writeln!(
            svg,
            "  <text x=\"{x}\" y=\"{y}\" text-anchor=\"middle\" font-size=\"11\">{v:.2}</text>",
            x = sx(xv),
            y = h - margin + 16.0,
            v = xv
        );
        let _ = writeln!(
            svg,
            "  <text x=\"{x}\" y=\"{y}\" text-anchor=\"end\" font-size=\"11\">{v:.2}</text>",
            x = margin - 6.0,
            y = sy(yv) + 4.0,
            v = yv
        );
    }
    for p in points {
        let _ = writeln!(
            svg,
            "  <circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"5\" fill=\"#2d7dd2\" fill-opacity=\"0.75\"/>",
            x = sx(p.size_mb),
            y = sy(p.f1)
        );
        let _ = writeln!(
            svg,
            "  <text x=\"{x:.1}\" y=\"{y:.1}\" font-size=\"10\">{label}</text>",
            x = sx(p.size_mb) + 7.0,
            y = sy(p.f1) - 5.0,
            label = p.label
        );
    }
    let _ = writeln!(svg, "</svg>");
    std::fs::write(path, svg)
        .map_err(|e| CliError::user(format!("cannot write {}: {e}", path.display())))
}

fn bounds(values: impl Iterator<Item = f64>, fallback_lo: f64, fallback_hi: f64) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (fallback_lo, fallback_hi);
    }
    if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = (hi - lo) * 0.08;
        (lo - pad, hi + pad)
    }
}
