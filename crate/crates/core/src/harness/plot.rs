//! Learning-curve aggregation and deterministic SVG rendering.

use std::fmt::Write as _;
use std::path::Path;

use super::log::RunLog;
use super::HarnessError;

/// Mean and population standard deviation over seeds on a shared step grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub steps: Vec<u64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Linear interpolation of `(xs, ys)` at `x`, clamped to the end values.
pub fn interpolate(xs: &[u64], ys: &[f64], x: u64) -> f64 {
    match xs.partition_point(|&s| s < x) {
        0 => ys[0],
        i if i == xs.len() => ys[xs.len() - 1],
        i if xs[i] == x => ys[i],
        i => {
            let (x0, x1) = (xs[i - 1] as f64, xs[i] as f64);
            let t = (x as f64 - x0) / (x1 - x0);
            ys[i - 1] + t * (ys[i] - ys[i - 1])
        }
    }
}

/// Resamples every log onto the union of their evaluation steps inside the
/// range all logs cover, then takes the mean and population std per step.
pub fn aggregate(logs: &[RunLog]) -> Result<Curve, HarnessError> {
    let series: Vec<(Vec<u64>, Vec<f64>)> =
        logs.iter().map(|l| (l.steps(), l.eval_means())).collect();
    if series.is_empty() || series.iter().any(|(s, _)| s.is_empty()) {
        return Err(HarnessError::Log("cannot aggregate empty logs".into()));
    }
    let lo = series.iter().map(|(s, _)| s[0]).max().unwrap_or(0);
    let hi = series
        .iter()
        .map(|(s, _)| s[s.len() - 1])
        .min()
        .unwrap_or(0);
    let mut steps: Vec<u64> = series
        .iter()
        .flat_map(|(s, _)| s.iter().copied())
        .filter(|&s| s >= lo && s <= hi)
        .collect();
    steps.sort_unstable();
    steps.dedup();
    if steps.is_empty() {
        return Err(HarnessError::Log("logs share no step range".into()));
    }
    let n = series.len() as f64;
    let (mut mean, mut std) = (Vec::new(), Vec::new());
    for &x in &steps {
        let vals: Vec<f64> = series.iter().map(|(s, y)| interpolate(s, y, x)).collect();
        let m = vals.iter().sum::<f64>() / n;
        mean.push(m);
        std.push((vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt());
    }
    Ok(Curve { steps, mean, std })
}

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 190.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Data-to-pixel mapping of the plot area.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frame {
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Frame {
    pub fn fit(curves: &[Curve]) -> Self {
        let x_max = curves
            .iter()
            .flat_map(|c| c.steps.last())
            .copied()
            .max()
            .unwrap_or(1)
            .max(1) as f64;
        let lows = curves
            .iter()
            .flat_map(|c| c.mean.iter().zip(&c.std).map(|(m, s)| m - s));
        let highs = curves
            .iter()
            .flat_map(|c| c.mean.iter().zip(&c.std).map(|(m, s)| m + s));
        let y_min = lows.fold(0.0_f64, f64::min);
        let mut y_max = highs.fold(f64::NEG_INFINITY, f64::max);
        if !(y_max > y_min) {
            y_max = y_min + 1.0;
        }
        Self {
            x_max,
            y_min,
            y_max,
        }
    }

    pub fn x(&self, step: f64) -> f64 {
        LEFT + step / self.x_max * (WIDTH - LEFT - RIGHT)
    }

    pub fn y(&self, value: f64) -> f64 {
        HEIGHT - BOTTOM - (value - self.y_min) / (self.y_max - self.y_min) * (HEIGHT - TOP - BOTTOM)
    }
}

fn points(pts: impl Iterator<Item = (f64, f64)>) -> String {
    pts.map(|(x, y)| format!("{x:.2},{y:.2}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Renders labelled curves with mean lines and ±std bands.
pub fn render_svg(named: &[(String, Curve)]) -> String {
    let curves: Vec<Curve> = named.iter().map(|(_, c)| c.clone()).collect();
    let f = Frame::fit(&curves);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        s,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let (x0, x1, y0, y1) = (LEFT, WIDTH - RIGHT, HEIGHT - BOTTOM, TOP);
    let _ = writeln!(
        s,
        r#"<path d="M{x0:.2},{y1:.2} L{x0:.2},{y0:.2} L{x1:.2},{y0:.2}" fill="none" stroke="black"/>"#
    );
    for i in 0..=5 {
        let step = f.x_max * i as f64 / 5.0;
        let x = f.x(step);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{y0:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{step:.0}</text>"#,
            y0 + 5.0,
            y0 + 20.0
        );
        let v = f.y_min + (f.y_max - f.y_min) * i as f64 / 5.0;
        let y = f.y(v);
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{y:.2}" x2="{x0:.2}" y2="{y:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{v:.1}</text>"#,
            x0 - 5.0,
            x0 - 8.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">environment steps</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{:.2}" text-anchor="middle" transform="rotate(-90 15 {:.2})">evaluation return</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );
    for (k, (name, c)) in named.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let upper = c
            .steps
            .iter()
            .zip(c.mean.iter().zip(&c.std))
            .map(|(&t, (m, d))| (f.x(t as f64), f.y(m + d)));
        let lower = c
            .steps
            .iter()
            .zip(c.mean.iter().zip(&c.std))
            .rev()
            .map(|(&t, (m, d))| (f.x(t as f64), f.y(m - d)));
        let _ = writeln!(
            s,
            r#"<polygon class="band" points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
            points(upper.chain(lower))
        );
        let _ = writeln!(
            s,
            r#"<polyline class="mean" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            points(
                c.steps
                    .iter()
                    .zip(&c.mean)
                    .map(|(&t, &m)| (f.x(t as f64), f.y(m)))
            )
        );
        let ly = TOP + 10.0 + 20.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            x1 + 15.0,
            x1 + 35.0,
            x1 + 40.0,
            ly + 4.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Aggregates each group of logs and writes the SVG to `path`.
pub fn plot_curves(groups: &[(String, Vec<RunLog>)], path: &Path) -> Result<(), HarnessError> {
    let named = groups
        .iter()
        .map(|(n, logs)| Ok((n.clone(), aggregate(logs)?)))
        .collect::<Result<Vec<_>, HarnessError>>()?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, render_svg(&named))?;
    Ok(())
}
