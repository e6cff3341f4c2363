//! Minimal SVG line plots, dependency-free. One `<path>` element per series.

use std::fmt::Write;

pub struct Series {
    pub name: String,
    /// (x, y) points in data coordinates.
    pub points: Vec<(f64, f64)>,
}

const PALETTE: &[&str] = &[
    "#1b6ca8", "#d1495b", "#3a7d44", "#edae49", "#6f4a8e", "#00798c", "#8d5a2b", "#5c5c5c",
];

/// Render series as polyline paths with axes and a legend. Y is clamped to
/// [y_min, y_max]; X spans the data range.
pub fn line_plot(title: &str, y_min: f64, y_max: f64, series: &[Series]) -> String {
    let (w, h) = (720.0, 440.0);
    let (left, right, top, bottom) = (60.0, 160.0, 40.0, 40.0);
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;

    let x_min = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .fold(f64::INFINITY, f64::min);
    let x_max = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .fold(f64::NEG_INFINITY, f64::max);
    let x_span = (x_max - x_min).max(1e-9);
    let y_span = (y_max - y_min).max(1e-9);

    let to_px = |x: f64, y: f64| -> (f64, f64) {
        let px = left + (x - x_min) / x_span * plot_w;
        let py = top + (1.0 - (y.clamp(y_min, y_max) - y_min) / y_span) * plot_h;
        (px, py)
    };

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(
        out,
        r#"  <rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#
    );
    let _ = writeln!(
        out,
        r#"  <text x="{:.2}" y="24" font-family="monospace" font-size="14">{}</text>"#,
        left,
        xml_escape(title)
    );
    // axes
    let _ = writeln!(
        out,
        r#"  <line x1="{left:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>"#,
        top + plot_h,
        left + plot_w,
        top + plot_h
    );
    let _ = writeln!(
        out,
        r#"  <line x1="{left:.2}" y1="{top:.2}" x2="{left:.2}" y2="{:.2}" stroke="black"/>"#,
        top + plot_h
    );
    for frac in [0.0, 0.5, 1.0] {
        let y = y_min + frac * y_span;
        let (_, py) = to_px(x_min, y);
        let _ = writeln!(
            out,
            r#"  <text x="8" y="{:.2}" font-family="monospace" font-size="11">{:.2}</text>"#,
            py + 4.0,
            y
        );
    }
    let _ = writeln!(
        out,
        r#"  <text x="{:.2}" y="{:.2}" font-family="monospace" font-size="11">{:.0}</text>"#,
        left,
        top + plot_h + 16.0,
        x_min
    );
    let _ = writeln!(
        out,
        r#"  <text x="{:.2}" y="{:.2}" font-family="monospace" font-size="11">{:.0}</text>"#,
        left + plot_w - 12.0,
        top + plot_h + 16.0,
        x_max
    );

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut d = String::new();
        for (j, &(x, y)) in s.points.iter().enumerate() {
            let (px, py) = to_px(x, y);
            let _ = write!(d, "{}{px:.2} {py:.2}", if j == 0 { "M" } else { " L" });
        }
        let _ = writeln!(
            out,
            r#"  <path d="{d}" fill="none" stroke="{color}" stroke-width="1.5"/>"#
        );
        let ly = top + 16.0 * i as f64;
        let _ = writeln!(
            out,
            r#"  <text x="{:.2}" y="{:.2}" font-family="monospace" font-size="11" fill="{color}">{}</text>"#,
            left + plot_w + 12.0,
            ly + 10.0,
            xml_escape(&s.name)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
