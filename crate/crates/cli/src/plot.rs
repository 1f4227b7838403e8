//! Minimal SVG line charts.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 16.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 48.0;

pub struct Series<'a> {
    pub ys: &'a [f64],
    pub color: &'a str,
    pub dashed: bool,
    pub width: f64,
}

pub struct Chart<'a> {
    pub title: String,
    pub x_label: &'a str,
    pub y_label: &'a str,
    pub series: Vec<Series<'a>>,
    /// (color, dashed, text)
    pub legend: Vec<(&'a str, bool, String)>,
    /// First x value; points are one unit apart.
    pub x0: f64,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= 6.0)
        .unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + step * 1e-9 {
        out.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
        t += step;
    }
    out
}

impl Chart<'_> {
    pub fn render(&self) -> String {
        let n = self
            .series
            .iter()
            .map(|s| s.ys.len())
            .max()
            .unwrap_or(0)
            .max(2);
        let finite = self
            .series
            .iter()
            .flat_map(|s| s.ys.iter().copied())
            .filter(|v| v.is_finite());
        let (mut lo, mut hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(v), b.max(v))
        });
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            (lo, hi) = (lo - 0.5, hi + 0.5);
        }
        let pad = 0.05 * (hi - lo);
        (lo, hi) = (lo - pad, hi + pad);
        let (x_lo, x_hi) = (self.x0, self.x0 + (n - 1) as f64);
        let px = |x: f64| LEFT + (x - x_lo) / (x_hi - x_lo) * (W - LEFT - RIGHT);
        let py = |y: f64| H - BOTTOM - (y - lo) / (hi - lo) * (H - TOP - BOTTOM);

        let mut s = String::new();
        writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        )
        .unwrap();
        writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
        writeln!(
            s,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            W / 2.0,
            escape(&self.title)
        )
        .unwrap();
        let (x1, x2, y1, y2) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
        writeln!(
            s,
            r##"<rect x="{x1}" y="{y1}" width="{}" height="{}" fill="none" stroke="#444"/>"##,
            x2 - x1,
            y2 - y1
        )
        .unwrap();
        for t in ticks(lo, hi) {
            let y = py(t);
            writeln!(
                s,
                r##"<line x1="{x1}" y1="{y:.2}" x2="{x2}" y2="{y:.2}" stroke="#ddd"/>"##
            )
            .unwrap();
            writeln!(
                s,
                r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#,
                x1 - 6.0,
                y + 4.0,
                fmt_tick(t)
            )
            .unwrap();
        }
        for t in ticks(x_lo, x_hi) {
            let x = px(t);
            writeln!(
                s,
                r#"<text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#,
                y2 + 16.0,
                fmt_tick(t)
            )
            .unwrap();
        }
        writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            (x1 + x2) / 2.0,
            H - 10.0,
            escape(self.x_label)
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
            (y1 + y2) / 2.0,
            escape(self.y_label)
        )
        .unwrap();
        for series in &self.series {
            let pts: Vec<String> = series
                .ys
                .iter()
                .enumerate()
                .filter(|(_, v)| v.is_finite())
                .map(|(i, &v)| format!("{:.2},{:.2}", px(self.x0 + i as f64), py(v)))
                .collect();
            let dash = if series.dashed {
                r#" stroke-dasharray="5,3""#
            } else {
                ""
            };
            writeln!(
                s,
                r#"<polyline fill="none" stroke="{}" stroke-width="{}"{dash} points="{}"/>"#,
                series.color,
                series.width,
                pts.join(" ")
            )
            .unwrap();
        }
        for (i, (color, dashed, text)) in self.legend.iter().enumerate() {
            let y = TOP + 14.0 + 16.0 * i as f64;
            let dash = if *dashed {
                r#" stroke-dasharray="5,3""#
            } else {
                ""
            };
            writeln!(
                s,
                r#"<line x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"{dash}/>"#,
                x2 - 150.0,
                x2 - 126.0
            )
            .unwrap();
            writeln!(
                s,
                r#"<text x="{}" y="{}">{}</text>"#,
                x2 - 120.0,
                y + 4.0,
                escape(text)
            )
            .unwrap();
        }
        s.push_str("</svg>\n");
        s
    }
}

fn fmt_tick(t: f64) -> String {
    let s = format!("{t:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}
