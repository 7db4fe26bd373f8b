//! Static SVG charts with a fixed layout and fixed number formatting, so the
//! same data always produces the same bytes.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 16.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Equal-width bin counts over `[min, max]` of the finite values; the top
/// edge is closed. Returns `(lo, hi, counts)`.
pub fn bin_counts(values: &[f64], bins: usize) -> (f64, f64, Vec<usize>) {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let mut counts = vec![0; bins.max(1)];
    if finite.is_empty() {
        return (0.0, 0.0, counts);
    }
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let last = counts.len() - 1;
    let width = (hi - lo) / counts.len() as f64;
    for v in finite {
        let k = if width > 0.0 { ((v - lo) / width) as usize } else { 0 };
        counts[k.min(last)] += 1;
    }
    (lo, hi, counts)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String, title: &str, x_label: &str, y_label: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        LEFT + (WIDTH - LEFT - RIGHT) / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        TOP + (HEIGHT - TOP - BOTTOM) / 2.0,
        TOP + (HEIGHT - TOP - BOTTOM) / 2.0,
        escape(y_label)
    );
    let _ = writeln!(
        out,
        r##"<path d="M{LEFT:.1} {TOP:.1} V{:.1} H{:.1}" fill="none" stroke="#333"/>"##,
        HEIGHT - BOTTOM,
        WIDTH - RIGHT
    );
}

fn tick_label(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn axis_ticks(out: &mut String, x: (f64, f64), y: (f64, f64), x_text: impl Fn(f64) -> String) {
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let px = LEFT + f * pw;
        let py = HEIGHT - BOTTOM - f * ph;
        let _ = writeln!(
            out,
            r#"<text x="{px:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            HEIGHT - BOTTOM + 16.0,
            x_text(x.0 + f * (x.1 - x.0))
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            py + 4.0,
            tick_label(y.0 + f * (y.1 - y.0))
        );
    }
}

/// Histogram of `values`; returns the document and the bin counts it drew.
pub fn histogram(values: &[f64], bins: usize, title: &str, x_label: &str) -> (String, Vec<usize>) {
    let (lo, hi, counts) = bin_counts(values, bins);
    let mut out = String::new();
    header(&mut out, title, x_label, "count");
    let peak = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let bw = pw / counts.len() as f64;
    for (k, &c) in counts.iter().enumerate() {
        let h = ph * c as f64 / peak;
        let _ = writeln!(
            out,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#1f77b4" stroke="white"><title>{c}</title></rect>"##,
            LEFT + k as f64 * bw,
            HEIGHT - BOTTOM - h,
            bw,
            h
        );
    }
    axis_ticks(&mut out, (lo, hi), (0.0, peak), tick_label);
    out.push_str("</svg>\n");
    (out, counts)
}

/// A named polyline.
pub struct Series<'a> {
    pub name: &'a str,
    pub points: Vec<(f64, f64)>,
}

/// Line chart of one or more series; `log_x` plots `log10(x)` and labels the
/// ticks in the original scale.
pub fn line_chart(series: &[Series], title: &str, x_label: &str, y_label: &str, log_x: bool) -> String {
    let tx = |x: f64| if log_x { x.log10() } else { x };
    let pts = || {
        series
            .iter()
            .flat_map(|s| s.points.iter().map(|&(x, y)| (tx(x), y)))
            .filter(|(x, y)| x.is_finite() && y.is_finite())
    };
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in pts() {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| HEIGHT - BOTTOM - (y - y0) / (y1 - y0) * ph;
    let mut out = String::new();
    header(&mut out, title, x_label, y_label);
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let coords: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| (tx(x), y))
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            coords.join(" ")
        );
        if s.points.len() <= 32 {
            for c in &coords {
                let (cx, cy) = c.split_once(',').expect("formatted pair");
                let _ = writeln!(out, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{color}"/>"#);
            }
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" fill="{color}">{}</text>"#,
            LEFT + 8.0,
            TOP + 14.0 + 14.0 * i as f64,
            escape(s.name)
        );
    }
    axis_ticks(&mut out, (x0, x1), (y0, y1), |v| {
        if log_x {
            tick_label(10f64.powf(v))
        } else {
            tick_label(v)
        }
    });
    out.push_str("</svg>\n");
    out
}
