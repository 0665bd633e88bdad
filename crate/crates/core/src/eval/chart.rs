//! Minimal SVG line chart of accuracy against label fraction.

use std::fmt::Write as _;

use super::sweep::SweepResult;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// One polyline per encoder; x is log-scaled fraction, y is mean accuracy.
pub fn accuracy_chart_svg(result: &SweepResult) -> String {
    let mut encoders: Vec<&str> = Vec::new();
    for s in &result.summary {
        if !encoders.contains(&s.encoder.as_str()) {
            encoders.push(&s.encoder);
        }
    }
    let fracs: Vec<f64> = result.summary.iter().map(|s| s.fraction).collect();
    let lo = fracs.iter().copied().fold(f64::INFINITY, f64::min).ln();
    let hi = fracs.iter().copied().fold(f64::NEG_INFINITY, f64::max).ln();
    let span = if hi > lo { hi - lo } else { 1.0 };
    let px = |f: f64| MARGIN + (f.ln() - lo) / span * (W - 2.0 * MARGIN);
    let py = |a: f64| H - MARGIN - a * (H - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN}" y1="{y}" x2="{x2}" y2="{y}" stroke="black"/><line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{y}" stroke="black"/>"#,
        y = H - MARGIN,
        x2 = W - MARGIN
    );
    for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{t:.2}</text>"#, MARGIN - 6.0, py(t) + 4.0);
    }
    let mut seen = Vec::new();
    for &f in &fracs {
        if !seen.contains(&f) {
            seen.push(f);
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{f}</text>"#, px(f), H - MARGIN + 18.0);
        }
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">label fraction</text>"#, W / 2.0, H - 10.0);
    let _ = writeln!(s, r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">accuracy</text>"#, H / 2.0, H / 2.0);
    for (i, enc) in encoders.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = result
            .curve(enc)
            .iter()
            .map(|p| format!("{:.2},{:.2}", px(p.fraction), py(p.accuracy_mean)))
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{enc}</text>"#,
            W - MARGIN - 110.0,
            MARGIN + 16.0 * i as f64
        );
    }
    s.push_str("</svg>\n");
    s
}
