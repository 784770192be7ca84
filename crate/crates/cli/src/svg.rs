//! Minimal SVG charts: lines, bars and heatmaps.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    /// Draw markers only.
    pub scatter: bool,
}

impl Series {
    pub fn line(name: &str, points: Vec<(f64, f64)>) -> Self {
        Self {
            name: name.to_string(),
            points,
            scatter: false,
        }
    }

    pub fn scatter(name: &str, points: Vec<(f64, f64)>) -> Self {
        Self {
            scatter: true,
            ..Self::line(name, points)
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    pub log_y: bool,
    /// Labelled vertical markers.
    pub marks: Vec<(f64, String)>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        W / 2.0,
        esc(title)
    )
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-2 {
        format!("{v:.1e}")
    } else if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}").trim_end_matches('0').to_string()
    }
}

fn range(vals: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = vals
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return None;
    }
    Some(if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) })
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (H - TOP - BOTTOM)
    }

    fn axes(&self, out: &mut String, x_label: &str, y_label: &str, log_y: bool) {
        let (x0, x1, y0, y1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
        let _ = writeln!(
            out,
            "<rect x=\"{x0}\" y=\"{y0}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#333\"/>",
            x1 - x0,
            y1 - y0
        );
        for i in 0..=4 {
            let t = i as f64 / 4.0;
            let xv = self.x.0 + t * (self.x.1 - self.x.0);
            let yv = self.y.0 + t * (self.y.1 - self.y.0);
            let (px, py) = (self.px(xv), self.py(yv));
            let ylab = if log_y { fmt_tick(10f64.powf(yv)) } else { fmt_tick(yv) };
            let _ = writeln!(
                out,
                "<line x1=\"{px:.1}\" y1=\"{y1}\" x2=\"{px:.1}\" y2=\"{}\" stroke=\"#333\"/><text x=\"{px:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
                y1 + 4.0,
                y1 + 16.0,
                fmt_tick(xv)
            );
            let _ = writeln!(
                out,
                "<line x1=\"{}\" y1=\"{py:.1}\" x2=\"{x0}\" y2=\"{py:.1}\" stroke=\"#333\"/><text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{ylab}</text>",
                x0 - 4.0,
                x0 - 6.0,
                py + 4.0
            );
        }
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            (x0 + x1) / 2.0,
            H - 12.0,
            esc(x_label)
        );
        let _ = writeln!(
            out,
            "<text x=\"16\" y=\"{0}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {0})\">{1}</text>",
            (y0 + y1) / 2.0,
            esc(y_label)
        );
    }
}

fn legend(out: &mut String, names: &[&str]) {
    for (i, n) in names.iter().enumerate() {
        let y = TOP + 10.0 + 16.0 * i as f64;
        let x = W - RIGHT + 12.0;
        let _ = writeln!(
            out,
            "<rect x=\"{x}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{}\" y=\"{}\">{}</text>",
            y - 9.0,
            PALETTE[i % PALETTE.len()],
            x + 14.0,
            y,
            esc(n)
        );
    }
}

impl LineChart {
    pub fn render(&self) -> String {
        let tr = |y: f64| {
            if self.log_y {
                if y > 0.0 {
                    y.log10()
                } else {
                    f64::NAN
                }
            } else {
                y
            }
        };
        let mut out = header(&self.title);
        let xs = self.series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
        let ys = self.series.iter().flat_map(|s| s.points.iter().map(|p| tr(p.1)));
        let (Some(x), Some(y)) = (range(xs.chain(self.marks.iter().map(|m| m.0))), range(ys)) else {
            out.push_str("<text x=\"320\" y=\"200\" text-anchor=\"middle\">no data</text>\n</svg>\n");
            return out;
        };
        let f = Frame { x, y };
        f.axes(&mut out, &self.x_label, &self.y_label, self.log_y);
        for (x, label) in &self.marks {
            let px = f.px(*x);
            let _ = writeln!(
                out,
                "<line x1=\"{px:.1}\" y1=\"{TOP}\" x2=\"{px:.1}\" y2=\"{}\" stroke=\"#999\" stroke-dasharray=\"4 3\"/><text x=\"{:.1}\" y=\"{}\">{}</text>",
                H - BOTTOM,
                px + 3.0,
                TOP + 12.0,
                esc(label)
            );
        }
        for (i, s) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let pts: Vec<(f64, f64)> = s
                .points
                .iter()
                .filter(|p| p.0.is_finite() && tr(p.1).is_finite())
                .map(|p| (f.px(p.0), f.py(tr(p.1))))
                .collect();
            if s.scatter {
                for (x, y) in pts {
                    let _ = writeln!(out, "<circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"3\" fill=\"{color}\"/>");
                }
            } else if !pts.is_empty() {
                let d: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
                let _ = writeln!(
                    out,
                    "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
                    d.join(" ")
                );
            }
        }
        let names: Vec<&str> = self.series.iter().map(|s| s.name.as_str()).collect();
        legend(&mut out, &names);
        out.push_str("</svg>\n");
        out
    }
}

#[derive(Clone, Debug, Default)]
pub struct BarChart {
    pub title: String,
    pub y_label: String,
    pub labels: Vec<String>,
    pub values: Vec<f64>,
    /// Symmetric error half-widths.
    pub errors: Option<Vec<f64>>,
    /// Shaded horizontal band, e.g. the range of control values.
    pub band: Option<(f64, f64, String)>,
}

impl BarChart {
    pub fn render(&self) -> String {
        let mut out = header(&self.title);
        let err = |i: usize| self.errors.as_ref().and_then(|e| e.get(i).copied()).unwrap_or(0.0);
        let mut lo = 0.0f64;
        let mut hi = 0.0f64;
        for (i, v) in self.values.iter().enumerate().filter(|(_, v)| v.is_finite()) {
            lo = lo.min(v - err(i));
            hi = hi.max(v + err(i));
        }
        if let Some((a, b, _)) = &self.band {
            lo = lo.min(*a);
            hi = hi.max(*b);
        }
        if hi == lo {
            hi = lo + 1.0;
        }
        let n = self.values.len().max(1) as f64;
        let f = Frame {
            x: (0.0, n),
            y: (lo, hi),
        };
        let (x0, x1) = (LEFT, W - RIGHT);
        let _ = writeln!(
            out,
            "<rect x=\"{x0}\" y=\"{TOP}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#333\"/>",
            x1 - x0,
            H - TOP - BOTTOM
        );
        for i in 0..=4 {
            let yv = lo + i as f64 / 4.0 * (hi - lo);
            let py = f.py(yv);
            let _ = writeln!(out, "<line x1=\"{}\" y1=\"{py:.1}\" x2=\"{x0}\" y2=\"{py:.1}\" stroke=\"#333\"/><text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>", x0 - 4.0, x0 - 6.0, py + 4.0, fmt_tick(yv));
        }
        let _ = writeln!(
            out,
            "<text x=\"16\" y=\"{0}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {0})\">{1}</text>",
            (TOP + H - BOTTOM) / 2.0,
            esc(&self.y_label)
        );
        if let Some((a, b, label)) = &self.band {
            let (ya, yb) = (f.py(*a), f.py(*b));
            let _ = writeln!(
                out,
                "<rect x=\"{x0}\" y=\"{yb:.1}\" width=\"{}\" height=\"{:.1}\" fill=\"#d62728\" fill-opacity=\"0.15\"/><text x=\"{}\" y=\"{:.1}\">{}</text>",
                x1 - x0,
                (ya - yb).max(1.0),
                x1 + 6.0,
                yb + 4.0,
                esc(label)
            );
        }
        let zero = f.py(0.0);
        let _ = writeln!(
            out,
            "<line x1=\"{x0}\" y1=\"{zero:.1}\" x2=\"{x1}\" y2=\"{zero:.1}\" stroke=\"#333\"/>"
        );
        let slot = (x1 - x0) / n;
        for (i, (v, label)) in self.values.iter().zip(&self.labels).enumerate() {
            let cx = f.px(i as f64 + 0.5);
            if v.is_finite() {
                let py = f.py(*v);
                let (top, h) = if py < zero { (py, zero - py) } else { (zero, py - zero) };
                let _ = writeln!(
                    out,
                    "<rect x=\"{:.1}\" y=\"{top:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{}\"/>",
                    cx - slot * 0.35,
                    slot * 0.7,
                    h.max(0.5),
                    PALETTE[0]
                );
                let e = err(i);
                if e > 0.0 {
                    let _ = writeln!(
                        out,
                        "<line x1=\"{cx:.1}\" y1=\"{:.1}\" x2=\"{cx:.1}\" y2=\"{:.1}\" stroke=\"#000\"/>",
                        f.py(v - e),
                        f.py(v + e)
                    );
                }
            }
            let _ = writeln!(
                out,
                "<text x=\"{cx:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
                H - BOTTOM + 16.0,
                esc(label)
            );
        }
        out.push_str("</svg>\n");
        out
    }
}

#[derive(Clone, Debug, Default)]
pub struct Heatmap {
    pub title: String,
    pub rows: usize,
    pub cols: usize,
    /// Row-major.
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn render(&self) -> String {
        let mut out = header(&self.title);
        let (lo, hi) = range(self.values.iter().copied()).unwrap_or((0.0, 1.0));
        let side = ((H - TOP - BOTTOM) / self.rows.max(1) as f64).min((W - LEFT - RIGHT) / self.cols.max(1) as f64);
        for r in 0..self.rows {
            for c in 0..self.cols {
                let v = self.values.get(r * self.cols + c).copied().unwrap_or(f64::NAN);
                let t = if v.is_finite() { (v - lo) / (hi - lo) } else { 0.0 };
                let shade = (255.0 * (1.0 - t)).round() as u8;
                let _ = writeln!(
                    out,
                    "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{side:.1}\" height=\"{side:.1}\" fill=\"rgb({shade},{shade},255)\"/>",
                    LEFT + c as f64 * side,
                    TOP + r as f64 * side
                );
            }
        }
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\">min {} / max {}</text>",
            LEFT,
            H - 16.0,
            fmt_tick(lo),
            fmt_tick(hi)
        );
        out.push_str("</svg>\n");
        out
    }
}
