//! Standalone SVG figures: solution slices, selected-point scatter and
//! layer-wise gradient-norm bars.

use std::fmt::Write as _;

use pinnx_core::metrics::LayerGradNorm;

use crate::rundir::SelectedPoint;

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;
const COLORS: [&str; 4] = ["#000000", "#1f77b4", "#d62728", "#2ca02c"];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn new(x: (f64, f64), y: (f64, f64)) -> Self {
        let pad = |(lo, hi): (f64, f64)| if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
        Frame { x: pad(x), y: pad(y) }
    }
    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (W - LEFT - RIGHT)
    }
    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (H - TOP - BOTTOM)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect()
}

fn open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    s
}

fn axes(s: &mut String, f: &Frame, xlabel: &str, ylabel: &str) {
    let (x0, x1) = (f.px(f.x.0), f.px(f.x.1));
    let (y0, y1) = (f.py(f.y.0), f.py(f.y.1));
    let _ = writeln!(s, r#"<rect x="{x0:.2}" y="{y1:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#, x1 - x0, y0 - y1);
    for t in ticks(f.x.0, f.x.1, 5) {
        let x = f.px(t);
        let _ = writeln!(s, r#"<line x1="{x:.2}" y1="{y0:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/>"#, y0 + 5.0);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{t:.2}</text>"#, y0 + 18.0);
    }
    for t in ticks(f.y.0, f.y.1, 5) {
        let y = f.py(t);
        let _ = writeln!(s, r#"<line x1="{:.2}" y1="{y:.2}" x2="{x0:.2}" y2="{y:.2}" stroke="black"/>"#, x0 - 5.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{t:.2}</text>"#, x0 - 8.0, y + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, H - 12.0, escape(xlabel));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(ylabel)
    );
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    vals.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)))
}

/// Line plot of several series over a shared x axis.
pub fn line_plot(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let xr = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (ylo, yhi) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let pad = 0.05 * (yhi - ylo).max(1e-12);
    let f = Frame::new(xr, (ylo - pad, yhi + pad));
    let mut s = open(title);
    axes(&mut s, &f, xlabel, ylabel);
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> =
            ser.points.iter().filter(|p| p.1.is_finite()).map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y))).collect();
        let dash = if ser.dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{}"/>"#, pts.join(" "));
        let ly = TOP + 14.0 + 16.0 * i as f64;
        let lx = W - RIGHT - 170.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="1.5"{dash}/>"#, lx + 24.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 30.0, ly + 4.0, escape(&ser.label));
    }
    s.push_str("</svg>\n");
    s
}

/// Selected collocation points over the `(t, x)` plane, marked by class.
pub fn scatter_plot(title: &str, points: &[SelectedPoint], t_range: (f64, f64)) -> String {
    let f = Frame::new(t_range, (-1.0, 1.0));
    let mut s = open(title);
    axes(&mut s, &f, "t", "x");
    for p in points {
        let _ = writeln!(s, r#"<circle class="point" cx="{:.2}" cy="{:.2}" r="3" fill="{}" fill-opacity="0.7"/>"#, f.px(p.t), f.py(p.x), COLORS[2]);
    }
    s.push_str("</svg>\n");
    s
}

/// One bar per layer of `ln|dW| + ln|db|`; flagged layers get a marker
/// instead of a bar.
pub fn grad_bars(title: &str, layers: &[LayerGradNorm]) -> String {
    let vals: Vec<f64> = layers.iter().filter_map(|l| l.log_sum).collect();
    let (lo, hi) = range(vals.iter().copied().chain([0.0]));
    let pad = 0.05 * (hi - lo).max(1e-12);
    let n = layers.len().max(1) as f64;
    let f = Frame::new((0.0, n), (lo - pad, hi + pad));
    let mut s = open(title);
    axes(&mut s, &f, "layer", "ln|dL/dW| + ln|dL/db|");
    let zero = f.py(0.0);
    let bw = (f.px(1.0) - f.px(0.0)) * 0.7;
    for (i, l) in layers.iter().enumerate() {
        let cx = f.px(i as f64 + 0.5);
        let label = if i + 1 == layers.len() { "out".to_string() } else { format!("{}", l.layer + 1) };
        let _ = writeln!(s, r#"<text x="{cx:.2}" y="{:.2}" text-anchor="middle">{label}</text>"#, H - BOTTOM + 32.0);
        match l.log_sum {
            Some(v) => {
                let y = f.py(v);
                let _ = writeln!(
                    s,
                    r#"<rect class="bar" x="{:.2}" y="{:.2}" width="{bw:.2}" height="{:.2}" fill="{}"/>"#,
                    cx - bw / 2.0,
                    y.min(zero),
                    (y - zero).abs(),
                    COLORS[1]
                );
            }
            None => {
                let _ = writeln!(s, r#"<text class="bar flagged" x="{cx:.2}" y="{:.2}" text-anchor="middle">n/a</text>"#, zero - 4.0);
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_bar_per_layer() {
        let layers: Vec<LayerGradNorm> = (0..7)
            .map(|i| LayerGradNorm { layer: i, weight_norm: 1.0, bias_norm: 1.0, log_sum: (i != 0).then_some(i as f64 - 3.0) })
            .collect();
        let svg = grad_bars("g", &layers);
        assert_eq!(svg.matches(r#"class="bar"#).count(), 7);
        assert_eq!(svg.matches("flagged").count(), 1);
    }

    #[test]
    fn scatter_has_every_point() {
        let pts: Vec<SelectedPoint> = (0..80).map(|i| SelectedPoint { t: 0.5 + i as f64 / 300.0, x: 0.0, residual_sq: 1.0 }).collect();
        let svg = scatter_plot("s", &pts, (0.5, 0.8));
        assert_eq!(svg.matches(r#"class="point""#).count(), 80);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }
}
