//! Minimal SVG output: scatter plots and polylines with axes.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 48.0;

pub const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub color: String,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

impl Series {
    pub fn new(label: impl Into<String>, color: impl Into<String>, xs: Vec<f64>, ys: Vec<f64>) -> Self {
        assert_eq!(xs.len(), ys.len(), "series coordinates differ in length");
        Self { label: label.into(), color: color.into(), xs, ys }
    }
}

#[derive(Debug, Clone, Copy)]
struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(series: &[Series]) -> Frame {
        let finite = |v: &&f64| v.is_finite();
        let xs = series.iter().flat_map(|s| s.xs.iter()).filter(finite);
        let ys = series.iter().flat_map(|s| s.ys.iter()).filter(finite);
        let (x0, x1) = bounds(xs);
        let (y0, y1) = bounds(ys);
        Frame { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn bounds<'a>(values: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn header(out: &mut String, title: &str, frame: &Frame) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title));
    let (l, r, t, b) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(out, r#"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="gray"/>"#, r - l, b - t);
    for (x, anchor, v) in [(l, "start", frame.x0), (r, "end", frame.x1)] {
        let _ = writeln!(out, r#"<text x="{x}" y="{}" text-anchor="{anchor}">{}</text>"#, b + 16.0, tick(v));
    }
    for (y, v) in [(b, frame.y0), (t, frame.y1)] {
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, l - 4.0, y + 4.0, tick(v));
    }
}

fn legend(out: &mut String, series: &[Series]) {
    for (i, s) in series.iter().enumerate() {
        let y = MARGIN + 14.0 + 16.0 * i as f64;
        let x = WIDTH - MARGIN - 8.0;
        let _ = writeln!(out, r#"<rect x="{}" y="{}" width="10" height="10" fill="{}"/>"#, x - 130.0, y - 9.0, s.color);
        let _ = writeln!(out, r#"<text x="{}" y="{y}">{}</text>"#, x - 114.0, escape(&s.label));
    }
}

fn tick(v: f64) -> String {
    format!("{v:.3}")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Points of every series as small translucent dots.
pub fn scatter_svg(title: &str, series: &[Series]) -> String {
    let frame = Frame::fit(series);
    let mut out = String::new();
    header(&mut out, title, &frame);
    for s in series {
        let _ = writeln!(out, r#"<g fill="{}" fill-opacity="0.45">"#, s.color);
        for (&x, &y) in s.xs.iter().zip(&s.ys) {
            if x.is_finite() && y.is_finite() {
                let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="1.6"/>"#, frame.px(x), frame.py(y));
            }
        }
        let _ = writeln!(out, "</g>");
    }
    legend(&mut out, series);
    out.push_str("</svg>\n");
    out
}

/// Each series as a polyline in x order of its samples.
pub fn line_svg(title: &str, series: &[Series]) -> String {
    let frame = Frame::fit(series);
    let mut out = String::new();
    header(&mut out, title, &frame);
    for s in series {
        let points: Vec<String> = s
            .xs
            .iter()
            .zip(&s.ys)
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(&x, &y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y)))
            .collect();
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#, s.color, points.join(" "));
    }
    legend(&mut out, series);
    out.push_str("</svg>\n");
    out
}
