//! Minimal SVG output: a bar series on the left axis with line series on the
//! right axis, enough for the trade-off figures.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub struct LineSeries {
    pub name: String,
    pub color: String,
    pub values: Vec<f64>,
}

const W: f64 = 760.0;
const H: f64 = 440.0;
const ML: f64 = 64.0; // margins
const MR: f64 = 64.0;
const MT: f64 = 56.0;
const MB: f64 = 56.0;

/// Writes a combined bar+line chart. `x_labels`, the bar values and every
/// line series must share one length.
pub fn bar_line_chart(
    path: &Path,
    title: &str,
    x_labels: &[String],
    bars: (&str, &[f64]),
    lines: &[LineSeries],
    left_label: &str,
    right_label: &str,
) -> Result<()> {
    let n = x_labels.len();
    if n == 0 || bars.1.len() != n || lines.iter().any(|l| l.values.len() != n) {
        return Err(Error::contract("chart: empty or mismatched series"));
    }
    let plot_w = W - ML - MR;
    let plot_h = H - MT - MB;

    // left axis over the bars, zero-based
    let bar_max = bars.1.iter().cloned().fold(f64::MIN_POSITIVE, f64::max) * 1.05;
    // right axis over the lines, padded
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for l in lines {
        for &v in &l.values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    let pad = ((hi - lo).abs()).max(1e-9) * 0.1;
    let (lo, hi) = (lo.min(0.0) - pad, hi + pad);

    let x_of = |i: usize| ML + plot_w * (i as f64 + 0.5) / n as f64;
    let y_left = |v: f64| MT + plot_h * (1.0 - v / bar_max);
    let y_right = |v: f64| MT + plot_h * (1.0 - (v - lo) / (hi - lo));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"##
    );
    let _ = writeln!(s, r##"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r##"<text x="{}" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">{title}</text>"##,
        W / 2.0
    );

    // gridlines and left ticks
    for k in 0..=4 {
        let v = bar_max * k as f64 / 4.0;
        let y = y_left(v);
        let _ = writeln!(
            s,
            r##"<line x1="{ML}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#dddddd" stroke-width="1"/>"##,
            W - MR
        );
        let _ = writeln!(
            s,
            r##"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="end">{v:.2}</text>"##,
            ML - 6.0,
            y + 4.0
        );
    }
    // right ticks
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let y = y_right(v);
        let _ = writeln!(
            s,
            r##"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="start">{v:.3}</text>"##,
            W - MR + 6.0,
            y + 4.0
        );
    }

    // bars
    let bw = plot_w / n as f64 * 0.55;
    for (i, &v) in bars.1.iter().enumerate() {
        let x = x_of(i) - bw / 2.0;
        let y = y_left(v);
        let _ = writeln!(
            s,
            r##"<rect x="{x:.1}" y="{y:.1}" width="{bw:.1}" height="{:.1}" fill="#74a9cf"/>"##,
            MT + plot_h - y
        );
    }

    // zero line for the right axis when it is inside the range
    if lo < 0.0 && hi > 0.0 {
        let y = y_right(0.0);
        let _ = writeln!(
            s,
            r##"<line x1="{ML}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#999999" stroke-width="1" stroke-dasharray="4 3"/>"##,
            W - MR
        );
    }

    // lines
    for l in lines {
        let points: Vec<String> = l
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.1},{:.1}", x_of(i), y_right(v)))
            .collect();
        let _ = writeln!(
            s,
            r##"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"/>"##,
            points.join(" "),
            l.color
        );
        for (i, &v) in l.values.iter().enumerate() {
            let _ = writeln!(
                s,
                r##"<circle cx="{:.1}" cy="{:.1}" r="2.6" fill="{}"/>"##,
                x_of(i),
                y_right(v),
                l.color
            );
        }
    }

    // x labels
    for (i, label) in x_labels.iter().enumerate() {
        let _ = writeln!(
            s,
            r##"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle">{label}</text>"##,
            x_of(i),
            MT + plot_h + 18.0
        );
    }

    // axis frames and labels
    let _ = writeln!(
        s,
        r##"<rect x="{ML}" y="{MT}" width="{plot_w:.1}" height="{plot_h:.1}" fill="none" stroke="#555555"/>"##
    );
    let _ = writeln!(
        s,
        r##"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 {1:.1} {2:.1})" >{left_label}</text>"##,
        16.0,
        16.0,
        MT + plot_h / 2.0
    );
    let _ = writeln!(
        s,
        r##"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(90 {0:.1} {1:.1})">{right_label}</text>"##,
        W - 14.0,
        MT + plot_h / 2.0
    );

    // legend
    let mut lx = ML;
    let ly = MT - 14.0;
    let _ = writeln!(
        s,
        r##"<rect x="{lx:.1}" y="{:.1}" width="12" height="12" fill="#74a9cf"/><text x="{:.1}" y="{ly:.1}" font-family="sans-serif" font-size="11">{}</text>"##,
        ly - 10.0,
        lx + 16.0,
        bars.0
    );
    lx += 110.0;
    for l in lines {
        let _ = writeln!(
            s,
            r##"<line x1="{lx:.1}" y1="{:.1}" x2="{:.1}" y2="{0:.1}" stroke="{}" stroke-width="2"/><text x="{:.1}" y="{ly:.1}" font-family="sans-serif" font-size="11">{}</text>"##,
            ly - 4.0,
            lx + 14.0,
            l.color,
            lx + 18.0,
            l.name
        );
        lx += 120.0;
    }

    let _ = writeln!(s, "</svg>");
    std::fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_writes_wellformed_svg() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.svg");
        let labels: Vec<String> = (0..5).map(|i| format!("{}", i * 10)).collect();
        let bars = [0.8, 0.82, 0.85, 0.83, 0.8];
        let lines = vec![
            LineSeries {
                name: "gain".into(),
                color: "#1a9641".into(),
                values: vec![0.01, 0.03, -0.02, 0.0, 0.02],
            },
        ];
        bar_line_chart(&path, "t", &labels, ("acc", &bars), &lines, "l", "r").unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.trim_end().ends_with("</svg>"));
        assert!(text.contains("polyline"));
        assert!(text.matches("<rect").count() >= 6);
        assert!(bar_line_chart(&path, "t", &labels, ("acc", &bars[..2]), &lines, "l", "r").is_err());
    }
}
