//! Minimal SVG line and bar charts.

use std::fmt::Write as _;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// A panel placed at `(x, y)` with the given size.
#[derive(Clone, Copy, Debug)]
pub struct Frame {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

const MARGIN: f64 = 40.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn axes(out: &mut String, f: Frame, title: &str, y_range: (f64, f64)) {
    let (x0, y0) = (f.x + MARGIN, f.y + MARGIN / 2.0);
    let (w, h) = (f.w - 1.5 * MARGIN, f.h - 1.5 * MARGIN);
    let _ = write!(
        out,
        r##"<g><text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">{}</text><rect x="{x0:.1}" y="{y0:.1}" width="{w:.1}" height="{h:.1}" fill="none" stroke="#444"/><text x="{:.1}" y="{:.1}" font-size="9" text-anchor="end">{:.4}</text><text x="{:.1}" y="{:.1}" font-size="9" text-anchor="end">{:.4}</text></g>"##,
        f.x + f.w / 2.0,
        f.y + 12.0,
        escape(title),
        x0 - 3.0,
        y0 + 8.0,
        y_range.1,
        x0 - 3.0,
        y0 + h,
        y_range.0,
    );
}

/// Line chart of every series in `frame`.
pub fn line_panel(out: &mut String, frame: Frame, title: &str, series: &[Series]) {
    let xr = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let yr = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    axes(out, frame, title, yr);
    let (x0, y0) = (frame.x + MARGIN, frame.y + MARGIN / 2.0);
    let (w, h) = (frame.w - 1.5 * MARGIN, frame.h - 1.5 * MARGIN);
    let px = |x: f64| x0 + (x - xr.0) / (xr.1 - xr.0) * w;
    let py = |y: f64| y0 + h - (y - yr.0) / (yr.1 - yr.0) * h;
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = write!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/><text x="{:.1}" y="{:.1}" font-size="9" fill="{color}">{}</text>"#,
            pts.join(" "),
            x0 + 4.0,
            y0 + 12.0 + 11.0 * i as f64,
            escape(&s.name),
        );
    }
}

/// Grouped bar chart: one group per label, one bar per named value.
pub fn bar_panel(out: &mut String, frame: Frame, title: &str, groups: &[(String, Vec<(String, f64)>)]) {
    let yr = (0.0, bounds(groups.iter().flat_map(|g| g.1.iter().map(|v| v.1))).1.max(1e-9));
    axes(out, frame, title, yr);
    let (x0, y0) = (frame.x + MARGIN, frame.y + MARGIN / 2.0);
    let (w, h) = (frame.w - 1.5 * MARGIN, frame.h - 1.5 * MARGIN);
    let slot = w / groups.len().max(1) as f64;
    for (gi, (label, bars)) in groups.iter().enumerate() {
        let bw = slot * 0.8 / bars.len().max(1) as f64;
        for (bi, (name, v)) in bars.iter().enumerate() {
            let bh = (v / yr.1).clamp(0.0, 1.0) * h;
            let bx = x0 + gi as f64 * slot + slot * 0.1 + bi as f64 * bw;
            let _ = write!(
                out,
                r#"<rect x="{bx:.2}" y="{:.2}" width="{:.2}" height="{bh:.2}" fill="{}"><title>{} {}: {v}</title></rect>"#,
                y0 + h - bh,
                bw * 0.9,
                PALETTE[bi % PALETTE.len()],
                escape(label),
                escape(name),
            );
        }
        let _ = write!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="8" text-anchor="middle">{}</text>"#,
            x0 + (gi as f64 + 0.5) * slot,
            y0 + h + 10.0,
            escape(label),
        );
    }
}

pub fn document(width: f64, height: f64, body: &str) -> String {
    format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif">{body}</svg>
"#
    )
}
