//! Minimal SVG line charts with a shaded band, written as plain text so the
//! output is byte-stable.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 24.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 52.0;

pub(crate) struct Series<'a> {
    pub title: &'a str,
    pub y_label: &'a str,
    /// Subset sizes; drawn left to right in the given order.
    pub x: &'a [usize],
    pub mean: &'a [f64],
    pub std: &'a [f64],
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn y_range(s: &Series) -> (f64, f64) {
    let lo = s
        .mean
        .iter()
        .zip(s.std)
        .map(|(m, d)| m - d)
        .filter(|v| v.is_finite())
        .fold(f64::INFINITY, f64::min);
    let hi = s
        .mean
        .iter()
        .zip(s.std)
        .map(|(m, d)| m + d)
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

pub(crate) fn line_chart(s: &Series) -> String {
    let n = s.x.len();
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let (lo, hi) = y_range(s);
    let px = |i: usize| {
        if n <= 1 {
            LEFT + plot_w / 2.0
        } else {
            LEFT + plot_w * i as f64 / (n - 1) as f64
        }
    };
    let py = |v: f64| TOP + plot_h * (hi - v) / (hi - lo);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        out,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(s.title)
    );

    // axes
    let _ = writeln!(
        out,
        r#"<polyline points="{LEFT:.1},{TOP:.1} {LEFT:.1},{:.1} {:.1},{:.1}" fill="none" stroke="black"/>"#,
        TOP + plot_h,
        LEFT + plot_w,
        TOP + plot_h
    );
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let y = py(v);
        let _ = writeln!(
            out,
            r##"<line x1="{:.1}" y1="{y:.1}" x2="{LEFT:.1}" y2="{y:.1}" stroke="black"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"##,
            LEFT - 4.0,
            LEFT - 6.0,
            y + 4.0
        );
    }
    let stride = n.div_ceil(10).max(1);
    for (i, size) in s.x.iter().enumerate() {
        if i % stride != 0 && i + 1 != n {
            continue;
        }
        let x = px(i);
        let _ = writeln!(
            out,
            r#"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="black"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{size}</text>"#,
            TOP + plot_h,
            TOP + plot_h + 4.0,
            TOP + plot_h + 18.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">number of features</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0,
        escape(s.y_label)
    );

    if n > 0 {
        let mut band = String::new();
        for i in 0..n {
            let _ = write!(band, "{:.2},{:.2} ", px(i), py(s.mean[i] + s.std[i]));
        }
        for i in (0..n).rev() {
            let _ = write!(band, "{:.2},{:.2} ", px(i), py(s.mean[i] - s.std[i]));
        }
        let _ = writeln!(
            out,
            r##"<polygon points="{}" fill="#1f77b4" fill-opacity="0.2" stroke="none"/>"##,
            band.trim_end()
        );
        let line: Vec<String> = (0..n)
            .map(|i| format!("{:.2},{:.2}", px(i), py(s.mean[i])))
            .collect();
        let _ = writeln!(
            out,
            r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##,
            line.join(" ")
        );
    }
    out.push_str("</svg>\n");
    out
}
