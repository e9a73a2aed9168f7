//! Comparison tables and standalone SVG line plots.
//!
//! Plot structure: one `<svg>` root holding a `<title>`, two axis `<line>`
//! elements with classes `x-axis` and `y-axis`, axis labels as `<text>`
//! with classes `x-label` and `y-label`, tick labels with class `tick`, and
//! one `<polyline class="series" data-label="...">` plus a legend `<text
//! class="legend">` per series.

use std::fmt::Write as _;

use crate::telemetry::{EvalReport, TelemetryRecord};

/// `71.00%` style.
pub fn format_pct(v: f64) -> String {
    format!("{v:.2}%")
}

/// Plain-text table with ACC, LEN and ΔLEN per arm; ΔLEN is relative to the
/// first report.
pub fn comparison_table(reports: &[EvalReport]) -> String {
    let Some(base) = reports.first() else {
        return String::new();
    };
    let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(0).max(3);
    let mut out = format!("{:<width$}  {:>8}  {:>8}  {:>8}\n", "arm", "ACC", "LEN", "ΔLEN");
    for r in reports {
        let delta = crate::telemetry::delta_length_pct(base.mean_length, r.mean_length);
        let _ = writeln!(
            out,
            "{:<width$}  {:>8}  {:>8.2}  {:>8}",
            r.name,
            format_pct(100.0 * r.accuracy),
            r.mean_length,
            format_pct(delta)
        );
    }
    out
}

/// Per-difficulty ΔLEN of `candidate` against `baseline`.
pub fn difficulty_table(baseline: &EvalReport, candidate: &EvalReport) -> String {
    let mut out = format!("{:>4}  {:>8}  {:>8}  {:>8}  {:>8}\n", "k", "ACC", "LEN", "BASE LEN", "ΔLEN");
    for d in &candidate.by_difficulty {
        if let Some(b) = baseline.difficulty(d.difficulty) {
            let _ = writeln!(
                out,
                "{:>4}  {:>8}  {:>8.2}  {:>8.2}  {:>8}",
                d.difficulty,
                format_pct(100.0 * d.accuracy),
                d.mean_length,
                b.mean_length,
                format_pct(crate::telemetry::delta_length_pct(b.mean_length, d.mean_length))
            );
        }
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// A labelled list of `(x, y)` points.
pub type Series = (String, Vec<(f64, f64)>);

/// Line plot of several `(label, points)` series.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (70.0, 20.0, 40.0, 50.0);
    let pts = series.iter().flat_map(|(_, p)| p.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 <= 0.0 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 <= 0.0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, "<title>{}</title>", escape(title));
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<line class="x-axis" x1="{left}" y1="{yb}" x2="{xr}" y2="{yb}" stroke="black"/>"#,
        yb = h - bottom,
        xr = w - right
    );
    let _ = writeln!(
        s,
        r#"<line class="y-axis" x1="{left}" y1="{top}" x2="{left}" y2="{yb}" stroke="black"/>"#,
        yb = h - bottom
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        let _ = writeln!(
            s,
            r#"<text class="tick" x="{:.1}" y="{:.1}" text-anchor="middle" font-size="11">{}</text>"#,
            px(xv),
            h - bottom + 16.0,
            trim_num(xv)
        );
        let _ = writeln!(
            s,
            r#"<text class="tick" x="{:.1}" y="{:.1}" text-anchor="end" font-size="11">{}</text>"#,
            left - 6.0,
            py(yv) + 4.0,
            trim_num(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text class="x-label" x="{:.1}" y="{:.1}" text-anchor="middle" font-size="13">{}</text>"#,
        (left + w - right) / 2.0,
        h - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text class="y-label" x="16" y="{:.1}" text-anchor="middle" font-size="13" transform="rotate(-90 16 {:.1})">{}</text>"#,
        (top + h - bottom) / 2.0,
        (top + h - bottom) / 2.0,
        escape(y_label)
    );
    for (i, (label, points)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let coords: Vec<String> = points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline class="series" data-label="{}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            escape(label),
            coords.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text class="legend" x="{:.1}" y="{:.1}" font-size="12" fill="{color}">{}</text>"#,
            w - right - 150.0,
            top + 14.0 * (i as f64 + 1.0),
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn trim_num(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.trunc() {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

/// One plot of `field` against iteration, one series per telemetry file.
pub fn telemetry_plot(field: &str, runs: &[(String, Vec<TelemetryRecord>)]) -> Option<String> {
    let series: Option<Vec<Series>> = runs
        .iter()
        .map(|(label, recs)| {
            recs.iter()
                .map(|r| r.field(field).map(|v| (r.iteration as f64, v)))
                .collect::<Option<Vec<_>>>()
                .map(|pts| (label.clone(), pts))
        })
        .collect();
    Some(line_plot(field, "iteration", field, &series?))
}

/// Telemetry series plotted by `report`.
pub const PLOTTED_FIELDS: [&str; 5] = ["mean_length", "clip_ratio", "min_length", "accuracy", "mean_teca_last"];
