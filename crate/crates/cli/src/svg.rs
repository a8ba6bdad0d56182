//! Minimal SVG line and scatter plots with linear or log10 axes.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 78.0;
const MARGIN_RIGHT: f64 = 150.0;
const MARGIN_TOP: f64 = 36.0;
const MARGIN_BOTTOM: f64 = 52.0;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#7f7f7f",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Style {
    Line,
    Dashed,
    Markers,
}

#[derive(Debug, Clone)]
pub struct Series {
    /// Legend label; empty hides the series from the legend.
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub style: Style,
    /// Palette index.
    pub color: usize,
}

impl Series {
    pub fn new(
        name: impl Into<String>,
        points: Vec<(f64, f64)>,
        style: Style,
        color: usize,
    ) -> Self {
        Self {
            name: name.into(),
            points,
            style,
            color,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub log_y: bool,
    pub series: Vec<Series>,
}

impl Plot {
    pub fn new(
        title: impl Into<String>,
        x_label: impl Into<String>,
        y_label: impl Into<String>,
    ) -> Self {
        Self {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            log_x: false,
            log_y: false,
            series: Vec::new(),
        }
    }

    pub fn log_x(mut self) -> Self {
        self.log_x = true;
        self
    }

    pub fn log_y(mut self) -> Self {
        self.log_y = true;
        self
    }

    pub fn with(mut self, series: Series) -> Self {
        self.series.push(series);
        self
    }

    pub fn render(&self) -> String {
        render_panels(std::slice::from_ref(self))
    }
}

/// Panels laid out left to right in one document.
pub fn render_panels(panels: &[Plot]) -> String {
    let total_width = WIDTH * panels.len().max(1) as f64;
    let mut out = String::new();
    writeln!(
        out,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{total_width}" height="{HEIGHT}" viewBox="0 0 {total_width} {HEIGHT}" font-family="sans-serif" font-size="12">
<rect width="100%" height="100%" fill="white"/>"#
    )
    .unwrap();
    for (i, p) in panels.iter().enumerate() {
        writeln!(out, r#"<g transform="translate({},0)">"#, i as f64 * WIDTH).unwrap();
        panel(&mut out, p);
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    out
}

/// Data range along one axis, in plot coordinates (log10 when `log`).
#[derive(Debug, Clone, Copy, PartialEq)]
struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>, log: bool) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            if !v.is_finite() || (log && v <= 0.0) {
                continue;
            }
            let v = if log { v.log10() } else { v };
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            return Self {
                lo: 0.0,
                hi: 1.0,
                log,
            };
        }
        if log {
            (lo, hi) = (lo.floor(), hi.ceil());
        }
        if hi - lo < 1e-12 {
            let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
            (lo, hi) = (lo - pad, hi + pad);
        }
        Self { lo, hi, log }
    }

    fn map(&self, v: f64) -> Option<f64> {
        if !v.is_finite() || (self.log && v <= 0.0) {
            return None;
        }
        let v = if self.log { v.log10() } else { v };
        Some((v - self.lo) / (self.hi - self.lo))
    }

    /// Tick positions in data units.
    fn ticks(&self) -> Vec<f64> {
        if self.log {
            let (a, b) = (self.lo as i32, self.hi as i32);
            let stride = ((b - a) / 6).max(1);
            return (a..=b)
                .step_by(stride as usize)
                .map(|e| 10f64.powi(e))
                .collect();
        }
        let step = nice_step((self.hi - self.lo) / 5.0);
        let first = (self.lo / step).ceil() as i64;
        let last = (self.hi / step).floor() as i64;
        (first..=last).map(|k| k as f64 * step).collect()
    }
}

fn nice_step(raw: f64) -> f64 {
    let mag = 10f64.powf(raw.log10().floor());
    let f = raw / mag;
    let nice = if f <= 1.0 {
        1.0
    } else if f <= 2.0 {
        2.0
    } else if f <= 5.0 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

fn tick_label(v: f64, log: bool) -> String {
    if log {
        return format!("1e{}", v.log10().round() as i32);
    }
    let s = format!("{v:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

pub fn escape(text: &str) -> String {
    let mut s = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => s.push_str("&amp;"),
            '<' => s.push_str("&lt;"),
            '>' => s.push_str("&gt;"),
            '"' => s.push_str("&quot;"),
            '\'' => s.push_str("&apos;"),
            c => s.push(c),
        }
    }
    s
}

fn panel(out: &mut String, plot: &Plot) {
    let pw = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let ph = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let xs = Axis::fit(
        plot.series
            .iter()
            .flat_map(|s| s.points.iter().map(|p| p.0)),
        plot.log_x,
    );
    let ys = Axis::fit(
        plot.series
            .iter()
            .flat_map(|s| s.points.iter().map(|p| p.1)),
        plot.log_y,
    );
    let px = |u: f64| MARGIN_LEFT + u * pw;
    let py = |u: f64| MARGIN_TOP + (1.0 - u) * ph;

    writeln!(
        out,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        MARGIN_LEFT + pw / 2.0,
        escape(&plot.title)
    )
    .unwrap();
    writeln!(
        out,
        r##"<rect x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>"##
    )
    .unwrap();

    for t in xs.ticks() {
        if let Some(u) = xs.map(t) {
            let x = px(u);
            writeln!(
                out,
                r##"<line x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="#333"/><text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"##,
                MARGIN_TOP + ph,
                MARGIN_TOP + ph + 5.0,
                MARGIN_TOP + ph + 18.0,
                tick_label(t, xs.log)
            )
            .unwrap();
        }
    }
    for t in ys.ticks() {
        if let Some(u) = ys.map(t) {
            let y = py(u);
            writeln!(
                out,
                r##"<line x1="{}" y1="{y:.2}" x2="{MARGIN_LEFT}" y2="{y:.2}" stroke="#333"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"##,
                MARGIN_LEFT - 5.0,
                MARGIN_LEFT - 8.0,
                y + 4.0,
                tick_label(t, ys.log)
            )
            .unwrap();
        }
    }
    writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        MARGIN_LEFT + pw / 2.0,
        HEIGHT - 12.0,
        escape(&plot.x_label)
    )
    .unwrap();
    writeln!(
        out,
        r#"<text x="18" y="{y}" text-anchor="middle" transform="rotate(-90 18 {y})">{}</text>"#,
        escape(&plot.y_label),
        y = MARGIN_TOP + ph / 2.0
    )
    .unwrap();

    let mut legend_row = 0;
    for s in &plot.series {
        let color = PALETTE[s.color % PALETTE.len()];
        let coords: Vec<(f64, f64)> = s
            .points
            .iter()
            .filter_map(|&(x, y)| Some((px(xs.map(x)?), py(ys.map(y)?))))
            .collect();
        match s.style {
            Style::Markers => {
                for (x, y) in &coords {
                    writeln!(
                        out,
                        r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{color}"/>"#
                    )
                    .unwrap();
                }
            }
            Style::Line | Style::Dashed if coords.len() >= 2 => {
                let pts: Vec<String> = coords
                    .iter()
                    .map(|(x, y)| format!("{x:.2},{y:.2}"))
                    .collect();
                let dash = if s.style == Style::Dashed {
                    r#" stroke-dasharray="6 4""#
                } else {
                    ""
                };
                writeln!(
                    out,
                    r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#,
                    pts.join(" ")
                )
                .unwrap();
            }
            _ => {
                for (x, y) in &coords {
                    writeln!(
                        out,
                        r#"<circle cx="{x:.2}" cy="{y:.2}" r="2" fill="{color}"/>"#
                    )
                    .unwrap();
                }
            }
        }
        if !s.name.is_empty() {
            let y = MARGIN_TOP + 12.0 + 18.0 * legend_row as f64;
            let x = MARGIN_LEFT + pw + 12.0;
            writeln!(
                out,
                r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
                x + 20.0,
                x + 26.0,
                y + 4.0,
                escape(&s.name)
            )
            .unwrap();
            legend_row += 1;
        }
    }
}
