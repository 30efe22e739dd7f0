//! Deterministic SVG line plots of EER against interpolation weight.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    /// `(x, y)` points in drawing order
    pub points: Vec<(f64, f64)>,
    /// optional horizontal reference line in the same colour
    pub reference: Option<f64>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 60.0;
const COLOURS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

pub fn render_svg(series: &[Series], x_label: &str, y_label: &str) -> Result<String> {
    if series.is_empty() || series.iter().any(|s| s.points.is_empty()) {
        return Err(invalid("plot needs at least one non-empty series"));
    }
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let ys = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.1).chain(s.reference));
    let (x0, x1) = bounds(xs);
    let (y0, y1) = bounds(ys);
    let (y0, y1) = (y0 - 0.05 * (y1 - y0), y1 + 0.05 * (y1 - y0));
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    let (l, r, t, b) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    writeln!(
        s,
        r#"<path d="M{l} {t} L{l} {b} L{r} {b}" stroke="black" fill="none"/>"#
    )
    .unwrap();
    for i in 0..=5 {
        let fx = x0 + (x1 - x0) * i as f64 / 5.0;
        let fy = y0 + (y1 - y0) * i as f64 / 5.0;
        writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{fx:.2}</text>"#,
            sx(fx),
            b + 18.0
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{fy:.2}</text>"#,
            l - 6.0,
            sy(fy) + 4.0
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{x_label}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 15.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="15" y="{:.2}" text-anchor="middle" transform="rotate(-90 15 {:.2})">{y_label}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    )
    .unwrap();
    for (i, ser) in series.iter().enumerate() {
        let colour = COLOURS[i % COLOURS.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        writeln!(
            s,
            r#"<polyline points="{}" stroke="{colour}" stroke-width="2" fill="none"/>"#,
            pts.join(" ")
        )
        .unwrap();
        for &(x, y) in &ser.points {
            writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{colour}"/>"#,
                sx(x),
                sy(y)
            )
            .unwrap();
        }
        if let Some(y) = ser.reference {
            writeln!(
                s,
                r#"<line x1="{l}" y1="{:.2}" x2="{r}" y2="{:.2}" stroke="{colour}" stroke-dasharray="6 4"/>"#,
                sy(y),
                sy(y)
            )
            .unwrap();
        }
        writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" fill="{colour}">{}</text>"#,
            r - 90.0,
            t + 16.0 * (i as f64 + 1.0),
            ser.label
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn bounds(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| {
        (a.min(x), b.max(x))
    });
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

/// EER (%) against interpolation weight.
pub fn emit_plot(series: &[Series], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(
        path,
        render_svg(series, "interpolation weight w", "EER (%)")?,
    )?;
    Ok(())
}
