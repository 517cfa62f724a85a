//! Gap-versus-sample-size summary as CSV and a self-contained SVG.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{io_err, Result};
use crate::experiment::{aggregate, Aggregate, Row};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum PlotOutcome {
    Written { csv: PathBuf, svg: PathBuf },
    Skipped { warning: String },
}

/// Writes `gap_vs_n.csv` and `gap_vs_n.svg` into `dir`; an empty table writes nothing.
pub fn emit_plots(rows: &[Row], dir: &Path) -> Result<PlotOutcome> {
    if rows.is_empty() {
        return Ok(PlotOutcome::Skipped {
            warning: "result table is empty; no plot written".into(),
        });
    }
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let aggs = aggregate(rows);
    let csv_path = dir.join("gap_vs_n.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    for a in &aggs {
        w.serialize(a)?;
    }
    w.flush().map_err(io_err(&csv_path))?;
    let svg_path = dir.join("gap_vs_n.svg");
    std::fs::write(&svg_path, render_svg(&aggs)).map_err(io_err(&svg_path))?;
    Ok(PlotOutcome::Written {
        csv: csv_path,
        svg: svg_path,
    })
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 60.0;

/// Median gap with interquartile whiskers against `log10 n`.
pub fn render_svg(aggs: &[Aggregate]) -> String {
    let points: Vec<(f64, f64, f64, f64)> = aggs
        .iter()
        .filter_map(|a| {
            Some((
                (a.n as f64).log10(),
                a.median?,
                a.q25?,
                a.q75.unwrap_or(a.median?),
            ))
        })
        .collect();
    let (x_lo, x_hi) = span(points.iter().map(|p| p.0), 0.5);
    let (_, y_hi) = span(
        points.iter().flat_map(|p| [p.1, p.2, p.3]).chain([0.0]),
        0.0,
    );
    let y_hi = if y_hi > 0.0 { y_hi * 1.1 } else { 1.0 };
    let px = |x: f64| MARGIN + (x - x_lo) / (x_hi - x_lo) * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - y / y_hi * (HEIGHT - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (x0, y0) = (MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        s,
        r#"<path d="M{x0} {m} L{x0} {y0} L{x1} {y0}" stroke="black" fill="none"/>"#,
        m = MARGIN,
        x1 = WIDTH - MARGIN
    );
    for a in aggs {
        let x = px((a.n as f64).log10());
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{:.2}" font-size="12" text-anchor="middle">{}</text>"#,
            y0 + 18.0,
            a.n
        );
    }
    for i in 0..=4 {
        let v = y_hi * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="end">{v:.3}</text>"#,
            x0 - 6.0,
            py(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-size="13" text-anchor="middle">n (log scale)</text>"#,
        WIDTH / 2.0,
        HEIGHT - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{:.2}" font-size="13" text-anchor="middle" transform="rotate(-90 15 {:.2})">median gap</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );
    if points.len() > 1 {
        let path: Vec<String> = points
            .iter()
            .map(|p| format!("{:.2},{:.2}", px(p.0), py(p.1)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" stroke="steelblue" fill="none" stroke-width="2"/>"#,
            path.join(" ")
        );
    }
    for (x, m, lo, hi) in &points {
        let cx = px(*x);
        let _ = writeln!(
            s,
            r#"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="steelblue"/>"#,
            py(*lo),
            py(*hi)
        );
        let _ = writeln!(
            s,
            r#"<circle cx="{cx:.2}" cy="{:.2}" r="4" fill="steelblue"/>"#,
            py(*m)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn span(values: impl Iterator<Item = f64>, pad: f64) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - pad.max(0.5), hi + pad.max(0.5))
    } else {
        (lo - pad, hi + pad)
    }
}
