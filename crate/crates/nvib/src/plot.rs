//! Minimal SVG line charts for robustness curves.

use std::fmt::Write;

use nvib_core::analysis::{Perturbation, RobustnessRow};

const PANEL: f64 = 220.0;
const MARGIN: f64 = 40.0;
const COLOURS: [&str; 4] = ["#440154", "#21918c", "#fde725", "#e34a33"];

/// One panel per perturbation kind with reconstruction accuracy against
/// rate, one line per labelled series.
pub fn robustness_svg(series: &[(String, Vec<RobustnessRow>)]) -> String {
    let kinds: Vec<Perturbation> = Perturbation::ALL
        .into_iter()
        .filter(|k| series.iter().any(|(_, rows)| rows.iter().any(|r| r.kind == *k)))
        .collect();
    let max_rate = series
        .iter()
        .flat_map(|(_, rows)| rows.iter().map(|r| r.rate))
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let width = kinds.len() as f64 * (PANEL + MARGIN) + MARGIN;
    let height = PANEL + 3.0 * MARGIN + 16.0 * series.len() as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (p, kind) in kinds.iter().enumerate() {
        let x0 = MARGIN + p as f64 * (PANEL + MARGIN);
        let y0 = MARGIN;
        let px = |rate: f64| x0 + rate / max_rate * PANEL;
        let py = |acc: f64| y0 + (1.0 - acc.clamp(0.0, 1.0)) * PANEL;
        let _ = writeln!(
            s,
            r#"<rect x="{x0}" y="{y0}" width="{PANEL}" height="{PANEL}" fill="none" stroke="black"/>"#
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            x0 + PANEL / 2.0,
            y0 - 8.0,
            kind.name()
        );
        for tick in [0.0, 0.5, 1.0] {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="end">{tick}</text>"#,
                x0 - 4.0,
                py(tick) + 4.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{x0}" y="{}">0</text><text x="{}" y="{}" text-anchor="end">{max_rate}</text>"#,
            y0 + PANEL + 14.0,
            x0 + PANEL,
            y0 + PANEL + 14.0
        );
        for (i, (_, rows)) in series.iter().enumerate() {
            let pts: Vec<String> = rows
                .iter()
                .filter(|r| r.kind == *kind)
                .map(|r| format!("{:.2},{:.2}", px(r.rate), py(r.accuracy)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"/>"#,
                pts.join(" "),
                COLOURS[i % COLOURS.len()]
            );
        }
    }
    for (i, (label, _)) in series.iter().enumerate() {
        let y = PANEL + 2.5 * MARGIN + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{MARGIN}" y1="{y}" x2="{}" y2="{y}" stroke="{}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            MARGIN + 24.0,
            COLOURS[i % COLOURS.len()],
            MARGIN + 30.0,
            y + 4.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
