//! Self-contained SVG line plots of cumulative error curves.

use std::fmt::Write;

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 320.0;
const MARGIN: f64 = 48.0;
const COLOURS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Fraction of `errors` at or below each of `samples` evenly spaced points on `[0, max_x]`.
pub fn cumulative_curve(errors: &[f64], max_x: f64, samples: usize) -> Vec<(f64, f64)> {
    let n = errors.len().max(1) as f64;
    (0..=samples)
        .map(|k| {
            let x = max_x * k as f64 / samples as f64;
            (x, errors.iter().filter(|&&e| e <= x).count() as f64 / n)
        })
        .collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One polyline per series; `y` is a fraction in `[0, 1]`.
pub fn line_plot(title: &str, x_label: &str, max_x: f64, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let pw = WIDTH - 2.0 * MARGIN;
    let ph = HEIGHT - 2.0 * MARGIN;
    let sx = |x: f64| MARGIN + pw * (x / max_x).clamp(0.0, 1.0);
    let sy = |y: f64| HEIGHT - MARGIN - ph * y.clamp(0.0, 1.0);
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="11">"#).unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, WIDTH / 2.0, escape(title)).unwrap();
    writeln!(
        s,
        r#"<polyline fill="none" stroke="black" points="{m},{t} {m},{b} {r},{b}"/>"#,
        m = MARGIN,
        t = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN
    )
    .unwrap();
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.2}</text>"#, MARGIN - 4.0, sy(f) + 4.0, f).unwrap();
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, sx(max_x * f), HEIGHT - MARGIN + 14.0, max_x * f).unwrap();
    }
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, WIDTH / 2.0, HEIGHT - 10.0, escape(x_label)).unwrap();
    for (idx, (name, pts)) in series.iter().enumerate() {
        let colour = COLOURS[idx % COLOURS.len()];
        let points: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        writeln!(s, r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#, points.join(" ")).unwrap();
        let ly = MARGIN + 14.0 * idx as f64;
        writeln!(s, r#"<text x="{:.1}" y="{ly:.1}" fill="{colour}">{}</text>"#, WIDTH - MARGIN - 80.0, escape(name)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}
