use std::fmt::Write;

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const W: f64 = 640.0;
const H: f64 = 420.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Polylines with axes, tick labels at the corners and dashed vertical markers.
pub fn line_plot(title: &str, series: &[Series], markers: &[f64]) -> String {
    let finite = series.iter().flat_map(|s| &s.points).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in finite {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let margin = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - margin, y1 + margin);
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ =
        writeln!(out, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        out,
        r#"<polyline points="{PAD},{PAD} {PAD},{} {},{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD,
        H - PAD
    );
    let _ = writeln!(out, r#"<text x="{PAD}" y="{}" text-anchor="middle">{x0:.3}</text>"#, H - PAD + 16.0);
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{x1:.3}</text>"#, W - PAD, H - PAD + 16.0);
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{y0:.3}</text>"#, PAD - 4.0, H - PAD);
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{y1:.3}</text>"#, PAD - 4.0, PAD + 4.0);
    if y0 < 0.0 && y1 > 0.0 {
        let _ = writeln!(out, r##"<line x1="{PAD}" y1="{0}" x2="{1}" y2="{0}" stroke="#bbb"/>"##, sy(0.0), W - PAD);
    }
    for &m in markers.iter().filter(|m| **m >= x0 && **m <= x1) {
        let _ = writeln!(
            out,
            r##"<line x1="{0}" y1="{PAD}" x2="{0}" y2="{1}" stroke="#888" stroke-dasharray="4 3"/>"##,
            sx(m),
            H - PAD
        );
    }
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ =
            writeln!(out, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, pts.join(" "));
        let ly = PAD + 14.0 * i as f64;
        let _ = writeln!(out, r#"<text x="{}" y="{ly}" fill="{color}">{}</text>"#, W - PAD - 90.0, escape(&s.label));
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
