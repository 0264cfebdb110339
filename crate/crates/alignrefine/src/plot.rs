//! Minimal SVG line chart of WER against refinement step. Step 0 is the
//! first pass.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// One line per `(label, [first-pass WER, step-1 WER, ...])`.
pub fn wer_chart(title: &str, series: &[(String, Vec<f64>)]) -> String {
    let steps = series.iter().map(|s| s.1.len()).max().unwrap_or(1).max(2) - 1;
    let finite = series.iter().flat_map(|s| s.1.iter().copied()).filter(|v| v.is_finite());
    let top = finite.fold(1.0f64, f64::max) * 1.1;
    let x = |k: usize| MARGIN + (W - 2.0 * MARGIN) * k as f64 / steps as f64;
    let y = |v: f64| H - MARGIN - (H - 2.0 * MARGIN) * v / top;

    let mut svg = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    svg.push('\n');
    let _ = writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        svg,
        r#"<path d="M{m} {m} V{b} H{r}" fill="none" stroke="black"/>"#,
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN
    );
    for k in 0..=steps {
        let label = if k == 0 { "first".to_string() } else { format!("{k}") };
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{}" text-anchor="middle">{label}</text>"#, x(k), H - MARGIN + 18.0);
    }
    for i in 0..=4 {
        let v = top * i as f64 / 4.0;
        let _ = writeln!(svg, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.1}</text>"#, MARGIN - 6.0, y(v) + 4.0);
    }
    let _ = writeln!(svg, r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">WER (%)</text>"#, H / 2.0, H / 2.0);
    for (i, (label, values)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> = values.iter().enumerate().map(|(k, &v)| format!("{:.1},{:.1}", x(k), y(v))).collect();
        let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, points.join(" "));
        let ly = MARGIN + 16.0 * i as f64;
        let _ = writeln!(svg, r#"<text x="{}" y="{ly:.1}" fill="{color}">{}</text>"#, W - MARGIN - 150.0, escape(label));
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_polyline_per_series() {
        let svg = wer_chart("dev", &[("S=1".into(), vec![18.0, 10.0, 12.0]), ("S=3 <L'=0>".into(), vec![18.0, 10.2, 9.9])]);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("S=3 &lt;L'=0&gt;"));
        assert_eq!(svg.matches(',').count(), 6);
    }

    #[test]
    fn empty_input_still_renders() {
        let svg = wer_chart("none", &[]);
        assert!(svg.contains("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 0);
    }
}
