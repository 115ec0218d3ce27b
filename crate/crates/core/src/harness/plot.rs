//! Static SVG charts: training curves and per-arm bars.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<path d="M{MARGIN} {MARGIN} V{} H{}" stroke="black" fill="none"/>"#,
        H - MARGIN,
        W - MARGIN
    );
}

fn y_axis(out: &mut String, max: f64, label: &str) {
    for k in 0..=4 {
        let v = max * k as f64 / 4.0;
        let y = H - MARGIN - (H - 2.0 * MARGIN) * k as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.3}</text>"#,
            MARGIN - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="16" y="{}" transform="rotate(-90 16 {})" text-anchor="middle">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(label)
    );
}

fn finite_max(vals: impl Iterator<Item = f64>) -> f64 {
    let m = vals.filter(|v| v.is_finite()).fold(0.0f64, f64::max);
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// One line per series over the epoch index.
pub fn curves_svg(title: &str, series: &[(String, Vec<f64>)]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let max = finite_max(series.iter().flat_map(|(_, v)| v.iter().copied()));
    let len = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0).max(2);
    y_axis(&mut out, max, "training KL per dim");
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">epoch</text>"#,
        W / 2.0,
        H - 20.0
    );
    for (k, (name, vals)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let points: Vec<String> = vals
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(e, v)| {
                let x = MARGIN + (W - 2.0 * MARGIN) * e as f64 / (len - 1) as f64;
                let y = H - MARGIN - (H - 2.0 * MARGIN) * (v / max).min(1.0);
                format!("{x:.1},{y:.1}")
            })
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            points.join(" ")
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            W - MARGIN - 150.0,
            MARGIN + 16.0 * k as f64,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// One bar per `(label, value)`.
pub fn bar_chart_svg(title: &str, bars: &[(String, f64)]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let max = finite_max(bars.iter().map(|(_, v)| *v));
    y_axis(&mut out, max, "median test KL per dim");
    let slot = (W - 2.0 * MARGIN) / bars.len().max(1) as f64;
    for (k, (name, v)) in bars.iter().enumerate() {
        let h = if v.is_finite() { (H - 2.0 * MARGIN) * (v / max).min(1.0) } else { 0.0 };
        let x = MARGIN + slot * k as f64 + slot * 0.15;
        let _ = writeln!(
            out,
            r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{h:.1}" fill="{}"/>"#,
            H - MARGIN - h,
            slot * 0.7,
            COLORS[k % COLORS.len()]
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{}" text-anchor="middle" font-size="10">{}</text>"#,
            x + slot * 0.35,
            H - MARGIN + 14.0,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}
