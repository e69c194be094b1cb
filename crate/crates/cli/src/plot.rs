//! SVG figures: planar trajectories with covariance ellipses, and input
//! commands over time.

use std::fmt::Write as _;

use anyhow::{bail, ensure, Result};
use nalgebra::{Matrix2, SymmetricEigen};

use crate::document::ReportDocument;

const WIDTH: f64 = 720.0;
const PANEL_HEIGHT: f64 = 300.0;
const MARGIN: f64 = 56.0;
const ELLIPSE_POINTS: usize = 72;
const PATH_COLOR: &str = "#4a72b0";
const LIMIT_COLOR: &str = "#c0392b";

#[derive(Clone, Debug, PartialEq)]
pub struct FigureSpec {
    /// Confidence multiplier for the ellipses.
    pub sigma: f64,
    /// State components drawn on the horizontal and vertical axes.
    pub axes: (usize, usize),
    pub x_range: Option<(f64, f64)>,
    pub y_range: Option<(f64, f64)>,
}

impl Default for FigureSpec {
    fn default() -> Self {
        Self { sigma: 3.0, axes: (0, 1), x_range: None, y_range: None }
    }
}

impl FigureSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.sigma.is_finite() && self.sigma > 0.0, "ellipse multiplier must be positive");
        for (name, r) in [("x", self.x_range), ("y", self.y_range)] {
            if let Some((lo, hi)) = r {
                ensure!(lo.is_finite() && hi.is_finite() && lo < hi, "{name} range must satisfy lo < hi");
            }
        }
        Ok(())
    }
}

/// Semi-axes and rotation (radians) of the `sigma`-level ellipse of a 2×2
/// covariance. Negative eigenvalues from round-off are treated as zero.
pub fn ellipse_axes(cov: &Matrix2<f64>, sigma: f64) -> (f64, f64, f64) {
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let (major, minor) = if eig.eigenvalues[0] >= eig.eigenvalues[1] { (0, 1) } else { (1, 0) };
    let radius = |i: usize| sigma * eig.eigenvalues[i].max(0.0).sqrt();
    let dir = eig.eigenvectors.column(major);
    (radius(major), radius(minor), dir[1].atan2(dir[0]))
}

fn ellipse_points(center: (f64, f64), cov: &Matrix2<f64>, sigma: f64) -> Vec<(f64, f64)> {
    let (a, b, theta) = ellipse_axes(cov, sigma);
    let (s, c) = theta.sin_cos();
    (0..=ELLIPSE_POINTS)
        .map(|i| {
            let t = std::f64::consts::TAU * i as f64 / ELLIPSE_POINTS as f64;
            let (u, v) = (a * t.cos(), b * t.sin());
            (center.0 + c * u - s * v, center.1 + s * u + c * v)
        })
        .collect()
}

fn bounds(points: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    points.filter(|v| v.is_finite()).fold(None, |acc, v| match acc {
        None => Some((v, v)),
        Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
    })
}

fn padded((lo, hi): (f64, f64)) -> (f64, f64) {
    let span = hi - lo;
    if span <= 1e-12 * lo.abs().max(1.0) {
        (lo - 1.0, hi + 1.0)
    } else {
        (lo - 0.05 * span, hi + 0.05 * span)
    }
}

/// Round tick positions covering `[lo, hi]`.
fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let raw = (hi - lo) / 6.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|s| s * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|i| i as f64 * step).collect()
}

fn fmt_tick(v: f64) -> String {
    let v = if v.abs() < 1e-12 { 0.0 } else { v };
    let s = format!("{v:.4}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

struct Panel {
    left: f64,
    top: f64,
    width: f64,
    height: f64,
    x: (f64, f64),
    y: (f64, f64),
    id: String,
}

impl Panel {
    fn px(&self, x: f64) -> f64 {
        self.left + (x - self.x.0) / (self.x.1 - self.x.0) * self.width
    }

    fn py(&self, y: f64) -> f64 {
        self.top + (self.y.1 - y) / (self.y.1 - self.y.0) * self.height
    }

    fn points(&self, pts: &[(f64, f64)]) -> String {
        let mut s = String::new();
        for (i, (x, y)) in pts.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            let _ = write!(s, "{:.2},{:.2}", self.px(*x), self.py(*y));
        }
        s
    }

    fn frame(&self, svg: &mut String, x_label: &str, y_label: &str) {
        let _ = writeln!(
            svg,
            r#"<clipPath id="{}"><rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}"/></clipPath>"#,
            self.id, self.left, self.top, self.width, self.height
        );
        let _ = writeln!(
            svg,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#333"/>"##,
            self.left, self.top, self.width, self.height
        );
        let bottom = self.top + self.height;
        for t in ticks(self.x.0, self.x.1) {
            let x = self.px(t);
            let _ = writeln!(svg, r##"<line x1="{x:.2}" y1="{bottom:.2}" x2="{x:.2}" y2="{:.2}" stroke="#333"/>"##, bottom + 5.0);
            let _ = writeln!(svg, r#"<text x="{x:.2}" y="{:.2}" font-size="11" text-anchor="middle">{}</text>"#, bottom + 18.0, fmt_tick(t));
        }
        for t in ticks(self.y.0, self.y.1) {
            let y = self.py(t);
            let _ = writeln!(svg, r##"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#333"/>"##, self.left - 5.0, self.left);
            let _ = writeln!(svg, r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end">{}</text>"#, self.left - 8.0, y + 4.0, fmt_tick(t));
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-size="13" text-anchor="middle">{x_label}</text>"#,
            self.left + self.width / 2.0,
            bottom + 38.0
        );
        let (lx, ly) = (self.left - 42.0, self.top + self.height / 2.0);
        let _ = writeln!(
            svg,
            r#"<text x="{lx:.2}" y="{ly:.2}" font-size="13" text-anchor="middle" transform="rotate(-90 {lx:.2} {ly:.2})">{y_label}</text>"#
        );
    }

    fn polyline(&self, svg: &mut String, pts: &[(f64, f64)], attrs: &str) {
        let _ = writeln!(svg, r#"<polyline clip-path="url(#{})" fill="none" {attrs} points="{}"/>"#, self.id, self.points(pts));
    }
}

fn open(height: f64) -> String {
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH:.0}" height="{height:.0}" viewBox="0 0 {WIDTH:.0} {height:.0}" font-family="sans-serif">"#
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH:.0}" height="{height:.0}" fill="white"/>"#);
    svg
}

fn require_trajectories(doc: &ReportDocument) -> Result<()> {
    if doc.report.trajectories.is_empty() {
        bail!("report has no retained trajectories (rerun simulate with retain > 0)");
    }
    Ok(())
}

fn block(cov: &nalgebra::DMatrix<f64>, (i, j): (usize, usize)) -> Matrix2<f64> {
    Matrix2::new(cov[(i, i)], cov[(i, j)], cov[(j, i)], cov[(j, j)])
}

/// Retained paths in the chosen plane, per-step confidence ellipses of the
/// sample covariance, the initial and target distributions in red, and the
/// state constraint lines that lie in the plane.
pub fn trajectory_svg(doc: &ReportDocument, fig: &FigureSpec) -> Result<String> {
    fig.validate()?;
    require_trajectories(doc)?;
    let (ix, iy) = fig.axes;
    let n = doc.spec.state_dim();
    ensure!(ix < n && iy < n && ix != iy, "plot axes ({ix}, {iy}) invalid for state dimension {n}");
    let report = &doc.report;
    ensure!(report.step_means.len() == report.step_covs.len(), "report step moments are inconsistent");

    let paths: Vec<Vec<(f64, f64)>> =
        report.trajectories.iter().map(|t| t.states.iter().map(|x| (x[ix], x[iy])).collect()).collect();
    let mut ellipses: Vec<Vec<(f64, f64)>> = report
        .step_means
        .iter()
        .zip(&report.step_covs)
        .map(|(m, c)| ellipse_points((m[ix], m[iy]), &block(c, fig.axes), fig.sigma))
        .collect();
    let marks = [&doc.spec.initial, &doc.spec.terminal]
        .map(|g| ellipse_points((g.mean[ix], g.mean[iy]), &block(&g.cov, fig.axes), fig.sigma));

    let all = || paths.iter().chain(ellipses.iter()).chain(marks.iter()).flatten();
    let x = fig.x_range.or_else(|| bounds(all().map(|p| p.0)).map(padded)).unwrap_or((-1.0, 1.0));
    let y = fig.y_range.or_else(|| bounds(all().map(|p| p.1)).map(padded)).unwrap_or((-1.0, 1.0));
    let height = PANEL_HEIGHT * 1.6;
    let panel = Panel {
        left: MARGIN + 10.0,
        top: 30.0,
        width: WIDTH - 2.0 * MARGIN - 10.0,
        height: height - 30.0 - MARGIN,
        x,
        y,
        id: "plot-area".into(),
    };

    let mut svg = open(height);
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="20" font-size="14" text-anchor="middle">Closed-loop trajectories ({} samples shown, {}σ ellipses)</text>"#,
        WIDTH / 2.0,
        paths.len(),
        fmt_tick(fig.sigma)
    );
    panel.frame(&mut svg, &format!("x{ix}"), &format!("x{iy}"));

    for c in &doc.spec.state_constraints {
        let others = c.alpha.iter().enumerate().any(|(i, v)| i != ix && i != iy && *v != 0.0);
        let (a, b) = (c.alpha[ix], c.alpha[iy]);
        if others || (a == 0.0 && b == 0.0) {
            continue;
        }
        let seg = if b.abs() >= a.abs() {
            [(x.0, (c.beta - a * x.0) / b), (x.1, (c.beta - a * x.1) / b)]
        } else {
            [((c.beta - b * y.0) / a, y.0), ((c.beta - b * y.1) / a, y.1)]
        };
        panel.polyline(&mut svg, &seg, &format!(r#"class="constraint" stroke="{LIMIT_COLOR}" stroke-width="1.5""#));
    }
    for p in &paths {
        panel.polyline(&mut svg, p, &format!(r#"class="path" stroke="{PATH_COLOR}" stroke-width="0.8" stroke-opacity="0.4""#));
    }
    for e in ellipses.drain(..) {
        panel.polyline(&mut svg, &e, r##"class="ellipse" stroke="#222" stroke-width="1""##);
    }
    for m in &marks {
        panel.polyline(&mut svg, m, &format!(r#"class="distribution" stroke="{LIMIT_COLOR}" stroke-width="2""#));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Axis-aligned bounds `c·u_i ≤ β` on input component `i`, as values of `u_i`.
fn input_limits(doc: &ReportDocument, i: usize) -> Vec<f64> {
    let mut out: Vec<f64> = doc
        .spec
        .input_constraints
        .iter()
        .filter(|c| c.alpha.iter().enumerate().all(|(j, v)| j == i || *v == 0.0) && c.alpha[i] != 0.0)
        .map(|c| c.beta / c.alpha[i])
        .collect();
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}

/// One panel per input component, zero-order hold, with the axis-aligned
/// hard limits as dashed lines.
pub fn input_svg(doc: &ReportDocument, fig: &FigureSpec) -> Result<String> {
    fig.validate()?;
    require_trajectories(doc)?;
    let report = &doc.report;
    let m = doc.spec.input_dim();
    let horizon = doc.spec.horizon;
    let dt = doc.dt.unwrap_or(1.0);
    let time_label = if doc.dt.is_some() { "t" } else { "k" };
    let height = 30.0 + m as f64 * PANEL_HEIGHT;
    let mut svg = open(height);
    let _ = writeln!(svg, r#"<text x="{:.2}" y="20" font-size="14" text-anchor="middle">Input commands</text>"#, WIDTH / 2.0);

    for i in 0..m {
        let limits = input_limits(doc, i);
        let paths: Vec<Vec<(f64, f64)>> = report
            .trajectories
            .iter()
            .map(|t| {
                t.inputs
                    .iter()
                    .enumerate()
                    .flat_map(|(k, u)| [(k as f64 * dt, u[i]), ((k + 1) as f64 * dt, u[i])])
                    .collect()
            })
            .collect();
        let y = fig
            .y_range
            .or_else(|| bounds(paths.iter().flatten().map(|p| p.1).chain(limits.iter().copied())).map(padded))
            .unwrap_or((-1.0, 1.0));
        let panel = Panel {
            left: MARGIN + 10.0,
            top: 30.0 + i as f64 * PANEL_HEIGHT + 10.0,
            width: WIDTH - 2.0 * MARGIN - 10.0,
            height: PANEL_HEIGHT - MARGIN - 10.0,
            x: (0.0, horizon as f64 * dt),
            y,
            id: format!("input-{i}"),
        };
        panel.frame(&mut svg, time_label, &format!("u{i}"));
        for p in &paths {
            panel.polyline(&mut svg, p, &format!(r#"class="path" stroke="{PATH_COLOR}" stroke-width="0.8" stroke-opacity="0.4""#));
        }
        for l in &limits {
            let py = panel.py(*l);
            let _ = writeln!(
                svg,
                r#"<line class="limit" data-limit="{l}" x1="{:.2}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="{LIMIT_COLOR}" stroke-width="1.5" stroke-dasharray="6,4"/>"#,
                panel.left,
                panel.left + panel.width
            );
            let _ = writeln!(
                svg,
                r#"<text x="{:.2}" y="{:.2}" font-size="11" fill="{LIMIT_COLOR}">{}</text>"#,
                panel.left + panel.width + 4.0,
                py + 4.0,
                fmt_tick(*l)
            );
        }
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
