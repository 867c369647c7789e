//! Minimal line-chart SVG writer. Coordinates are printed with two decimals
//! so that identical data gives identical bytes.

use std::fmt::Write as _;

const PANEL_W: f64 = 440.0;
const PANEL_H: f64 = 270.0;
const MARGIN_L: f64 = 62.0;
const MARGIN_R: f64 = 14.0;
const MARGIN_T: f64 = 28.0;
const MARGIN_B: f64 = 36.0;
const MAX_POINTS: usize = 2000;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

impl Series {
    pub fn new(label: impl Into<String>, xs: Vec<f64>, ys: Vec<f64>) -> Self {
        Self {
            label: label.into(),
            xs,
            ys,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Panel {
    pub title: String,
    pub series: Vec<Series>,
    /// Horizontal window; the data range when `None`.
    pub x_range: Option<(f64, f64)>,
}

impl Panel {
    pub fn new(title: impl Into<String>, series: Vec<Series>) -> Self {
        Self {
            title: title.into(),
            series,
            x_range: None,
        }
    }

    pub fn window(mut self, lo: f64, hi: f64) -> Self {
        self.x_range = Some((lo, hi));
        self
    }

    /// Horizontal and vertical extent of the finite points inside the window.
    pub fn bounds(&self) -> ((f64, f64), (f64, f64)) {
        let (mut xlo, mut xhi) = self.x_range.unwrap_or((f64::INFINITY, f64::NEG_INFINITY));
        if self.x_range.is_none() {
            for s in &self.series {
                for &x in s.xs.iter().filter(|x| x.is_finite()) {
                    xlo = xlo.min(x);
                    xhi = xhi.max(x);
                }
            }
        }
        let (mut ylo, mut yhi) = (f64::INFINITY, f64::NEG_INFINITY);
        for s in &self.series {
            for (&x, &y) in s.xs.iter().zip(&s.ys) {
                if x.is_finite() && y.is_finite() && x >= xlo && x <= xhi {
                    ylo = ylo.min(y);
                    yhi = yhi.max(y);
                }
            }
        }
        (pad(xlo, xhi, 0.0), pad(ylo, yhi, 0.05))
    }
}

fn pad(lo: f64, hi: f64, frac: f64) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    if hi - lo <= 1e-12 * (1.0 + lo.abs()) {
        let d = 0.5 * (1.0 + lo.abs());
        return (lo - d, hi + d);
    }
    let d = (hi - lo) * frac;
    (lo - d, hi + d)
}

/// Evenly spaced "nice" tick values covering `[lo, hi]`.
pub fn ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    let raw = (hi - lo) / target.max(1) as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 2.5, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|i| i as f64 * step).collect()
}

fn tick_label(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 {
        "0".into()
    } else if (1e-3..1e5).contains(&a) {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.2e}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn render_panel(out: &mut String, panel: &Panel, ox: f64, oy: f64) {
    let ((xlo, xhi), (ylo, yhi)) = panel.bounds();
    let (w, h) = (PANEL_W - MARGIN_L - MARGIN_R, PANEL_H - MARGIN_T - MARGIN_B);
    let (x0, y0) = (ox + MARGIN_L, oy + MARGIN_T);
    let sx = |x: f64| x0 + (x - xlo) / (xhi - xlo) * w;
    let sy = |y: f64| y0 + h - (y - ylo) / (yhi - ylo) * h;
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" font-size="13" text-anchor="middle">{}</text>"#,
        x0 + w / 2.0,
        oy + 18.0,
        escape(&panel.title)
    );
    let _ = writeln!(
        out,
        r##"<rect x="{x0:.2}" y="{y0:.2}" width="{w:.2}" height="{h:.2}" fill="none" stroke="#444"/>"##
    );
    for t in ticks(xlo, xhi, 5) {
        let x = sx(t);
        let _ = writeln!(
            out,
            r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#ddd"/><text x="{x:.2}" y="{:.2}" font-size="10" text-anchor="middle">{}</text>"##,
            y0,
            y0 + h,
            y0 + h + 14.0,
            tick_label(t)
        );
    }
    for t in ticks(ylo, yhi, 5) {
        let y = sy(t);
        let _ = writeln!(
            out,
            r##"<line x1="{x0:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" font-size="10" text-anchor="end">{}</text>"##,
            x0 + w,
            x0 - 4.0,
            y + 3.0,
            tick_label(t)
        );
    }
    for (i, s) in panel.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<(f64, f64)> = s
            .xs
            .iter()
            .zip(&s.ys)
            .filter(|(x, y)| x.is_finite() && y.is_finite() && **x >= xlo && **x <= xhi)
            .map(|(x, y)| (*x, *y))
            .collect();
        let stride = pts.len().div_ceil(MAX_POINTS).max(1);
        let mut d = String::new();
        for (j, (x, y)) in pts.iter().enumerate() {
            if j % stride == 0 || j + 1 == pts.len() {
                let _ = write!(d, "{:.2},{:.2} ", sx(*x), sy(*y));
            }
        }
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{}"/>"#,
            d.trim_end()
        );
        let ly = y0 + 12.0 + 13.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}" font-size="10">{}</text>"#,
            x0 + 8.0,
            x0 + 24.0,
            x0 + 28.0,
            ly + 3.0,
            escape(&s.label)
        );
    }
}

/// Lay the panels out on a grid with `cols` columns.
pub fn render(title: &str, panels: &[Panel], cols: usize) -> String {
    let cols = cols.max(1);
    let rows = panels.len().div_ceil(cols).max(1);
    let (width, height) = (PANEL_W * cols as f64, PANEL_H * rows as f64 + 30.0);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="20" font-size="15" text-anchor="middle">{}</text>"#,
        width / 2.0,
        escape(title)
    );
    for (i, p) in panels.iter().enumerate() {
        let (c, r) = (i % cols, i / cols);
        render_panel(&mut out, p, c as f64 * PANEL_W, 30.0 + r as f64 * PANEL_H);
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ticks_are_increasing_and_inside_the_range() {
        for (lo, hi) in [(0.0, 1.0), (0.95, 1.0), (-250.0, 3.0), (1e-6, 3e-6)] {
            let t = ticks(lo, hi, 5);
            assert!(t.len() >= 2, "{lo} {hi}");
            assert!(t.windows(2).all(|w| w[1] > w[0]));
            assert!(t.iter().all(|v| *v >= lo - 1e-12 && *v <= hi + 1e-12));
        }
    }

    #[test]
    fn window_restricts_both_axes() {
        let xs: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 10.0 * x).collect();
        let p = Panel::new("p", vec![Series::new("y", xs, ys)]).window(0.95, 1.0);
        let ((xlo, xhi), (ylo, yhi)) = p.bounds();
        assert_eq!((xlo, xhi), (0.95, 1.0));
        assert!(ylo > 9.0 && yhi < 10.5);
    }

    #[test]
    fn output_is_deterministic_and_escaped() {
        let p = Panel::new("a<b", vec![Series::new("s", vec![0.0, 1.0], vec![f64::NAN, 2.0])]);
        let a = render("t", &[p.clone()], 1);
        assert_eq!(a, render("t", &[p], 1));
        assert!(a.contains("a&lt;b") && a.ends_with("</svg>\n"));
    }
}
