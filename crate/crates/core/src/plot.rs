//! Standalone SVG figure of a bound curve: smoothed lower and upper bounds,
//! the true effect, the naive regression and a density strip of the observed
//! treatment.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::BoundCurve;
use crate::report::fit_bound_spline;

/// Kernel density estimate evaluated on a grid.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Density {
    pub bandwidth: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Silverman's rule: `0.9 min(sd, IQR / 1.34) n^(-1/5)`, falling back to
/// whichever spread is positive.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    if samples.len() < 2 {
        return 1.0;
    }
    let mean = samples.iter().sum::<f64>() / n;
    let sd = (samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (n - 1.0);
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
    };
    let iqr = (q(0.75) - q(0.25)) / 1.34;
    let spread = match (sd > 0.0, iqr > 0.0) {
        (true, true) => sd.min(iqr),
        (true, false) => sd,
        (false, true) => iqr,
        (false, false) => return 1.0,
    };
    0.9 * spread * n.powf(-0.2)
}

/// Gaussian KDE with Silverman bandwidth on `points` equally spaced values
/// in `[lo, hi]`.
pub fn kde(samples: &[f64], lo: f64, hi: f64, points: usize) -> Density {
    if samples.is_empty() || points == 0 {
        return Density::default();
    }
    let h = silverman_bandwidth(samples);
    let norm = 1.0 / (samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let x: Vec<f64> = (0..points)
        .map(|i| if points == 1 { lo } else { lo + (hi - lo) * i as f64 / (points - 1) as f64 })
        .collect();
    let y = x
        .iter()
        .map(|&g| norm * samples.iter().map(|s| (-0.5 * ((g - s) / h).powi(2)).exp()).sum::<f64>())
        .collect();
    Density { bandwidth: h, x, y }
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 16.0;
const TOP: f64 = 32.0;
/// Height of the density strip below the main panel.
const STRIP: f64 = 48.0;
const BOTTOM: f64 = 40.0;
const SAMPLES: usize = 200;

/// Data ranges of the plot, each padded by 5% of its span.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ranges {
    pub x: (f64, f64),
    pub y: (f64, f64),
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    let span = hi - lo;
    let pad = if span > 0.0 { 0.05 * span } else { 0.5 };
    (lo - pad, hi + pad)
}

fn series(curve: &BoundCurve) -> Vec<f64> {
    let mut v: Vec<f64> = curve.lower.iter().chain(&curve.upper).flatten().copied().collect();
    for s in [&curve.true_effect, &curve.naive].into_iter().flatten() {
        v.extend(s);
    }
    v.retain(|x| x.is_finite());
    v
}

pub fn ranges(curve: &BoundCurve) -> Result<Ranges> {
    let xs = curve.varied();
    if xs.len() < 2 {
        return Err(Error::config("plotting needs at least two grid points"));
    }
    let ys = series(curve);
    if ys.is_empty() {
        return Err(Error::config("nothing to plot"));
    }
    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(Ranges {
        x: padded(min(&xs), max(&xs)),
        y: padded(min(&ys), max(&ys)),
    })
}

struct Frame {
    r: Ranges,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.r.x.0) / (self.r.x.1 - self.r.x.0) * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        let bottom = HEIGHT - BOTTOM - STRIP;
        bottom - (y - self.r.y.0) / (self.r.y.1 - self.r.y.0) * (bottom - TOP)
    }
}

fn path(points: impl IntoIterator<Item = (f64, f64)>) -> String {
    let mut d = String::new();
    for (i, (x, y)) in points.into_iter().enumerate() {
        let _ = write!(d, "{}{:.2},{:.2}", if i == 0 { "M" } else { " L" }, x, y);
    }
    d
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Renders the figure. Output depends only on `curve`.
pub fn render_svg(curve: &BoundCurve) -> Result<String> {
    let r = ranges(curve)?;
    let f = Frame { r };
    let xs = curve.varied();
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        escape(&curve.dataset)
    );
    let (x0, x1) = (f.px(r.x.0), f.px(r.x.1));
    let (y0, y1) = (f.py(r.y.0), f.py(r.y.1));
    let _ = writeln!(
        s,
        r#"<rect x="{x0:.2}" y="{y1:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#,
        x1 - x0,
        y0 - y1
    );
    for (v, label) in [(r.x.0, r.x.0), (r.x.1, r.x.1)] {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{label:.2}</text>"#,
            f.px(v),
            HEIGHT - 8.0
        );
    }
    for v in [r.y.0, r.y.1] {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.2}</text>"#,
            LEFT - 6.0,
            f.py(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">x*_{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 8.0,
        curve.coordinate
    );

    let (lo_x, hi_x) = (xs[0], xs[xs.len() - 1]);
    let fine: Vec<f64> = (0..SAMPLES).map(|i| lo_x + (hi_x - lo_x) * i as f64 / (SAMPLES - 1) as f64).collect();
    for (values, color, name) in [(&curve.lower, "#1f77b4", "lower"), (&curve.upper, "#d62728", "upper")] {
        if let Some(sp) = fit_bound_spline(&xs, values) {
            let (a, b) = (sp.knots[0], sp.knots[sp.knots.len() - 1]);
            let pts = fine.iter().filter(|&&x| x >= a && x <= b).map(|&x| (f.px(x), f.py(sp.eval(x))));
            let _ = writeln!(s, r#"<path class="{name}" d="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, path(pts));
        }
        for (x, v) in xs.iter().zip(values.iter()) {
            if let Some(v) = v.filter(|v| v.is_finite()) {
                let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, f.px(*x), f.py(v));
            }
        }
    }
    if let Some(t) = &curve.true_effect {
        let pts = xs.iter().zip(t).map(|(x, y)| (f.px(*x), f.py(*y)));
        let _ = writeln!(s, r#"<path class="truth" d="{}" fill="none" stroke="black" stroke-width="2"/>"#, path(pts));
    }
    if let Some(nv) = &curve.naive {
        let pts = xs.iter().zip(nv).map(|(x, y)| (f.px(*x), f.py(*y)));
        let _ = writeln!(
            s,
            r##"<path class="naive" d="{}" fill="none" stroke="#2ca02c" stroke-width="1.5" stroke-dasharray="6 4"/>"##,
            path(pts)
        );
    }

    // Density strip under the main panel, scaled to its own peak.
    let d = &curve.density;
    let peak = d.y.iter().copied().fold(0.0, f64::max);
    if peak > 0.0 {
        let base = HEIGHT - BOTTOM;
        let mut pts: Vec<(f64, f64)> = d
            .x
            .iter()
            .zip(&d.y)
            .filter(|(x, _)| **x >= r.x.0 && **x <= r.x.1)
            .map(|(x, y)| (f.px(*x), base - y / peak * (STRIP - 8.0)))
            .collect();
        if let (Some(&(first, _)), Some(&(last, _))) = (pts.first(), pts.last()) {
            pts.insert(0, (first, base));
            pts.push((last, base));
            let _ = writeln!(
                s,
                r##"<path class="density" d="{} Z" fill="#999999" fill-opacity="0.5" stroke="none"/>"##,
                path(pts)
            );
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn emit_svg_plot(curve: &BoundCurve, path: &Path) -> Result<()> {
    std::fs::write(path, render_svg(curve)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve() -> BoundCurve {
        let xs = [-2.0, -1.0, 0.0, 1.0, 2.0];
        let obs: Vec<f64> = (0..200).map(|i| -2.5 + 5.0 * i as f64 / 199.0).collect();
        BoundCurve {
            dataset: "IV-lin-2d-weak".into(),
            coordinate: 1,
            x_star: xs.iter().map(|x| vec![*x, 0.1]).collect(),
            lower: vec![Some(-12.0), Some(-6.0), None, Some(3.0), Some(8.0)],
            upper: xs.iter().map(|x| Some(5.0 * x + 2.0)).collect(),
            true_effect: Some(xs.iter().map(|x| 5.0 * x).collect()),
            naive: Some(xs.iter().map(|x| 4.0 * x + 1.0).collect()),
            density: kde(&obs, -3.0, 3.0, 50),
        }
    }

    #[test]
    fn svg_has_one_root_and_all_layers() {
        let svg = render_svg(&curve()).unwrap();
        assert!(svg.starts_with("<svg "));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<svg").count(), 1);
        assert_eq!(svg.matches("</svg>").count(), 1);
        for class in ["lower", "upper", "truth", "naive", "density"] {
            assert!(svg.contains(&format!("class=\"{class}\"")), "missing {class}");
        }
        assert!(svg.contains("stroke-dasharray"));
        // Every opened element is self-closed or closed.
        let opens = svg.matches('<').count();
        let closes = svg.matches("/>").count() + svg.matches("</").count() * 2;
        assert_eq!(opens, closes);
    }

    #[test]
    fn svg_is_deterministic() {
        assert_eq!(render_svg(&curve()).unwrap(), render_svg(&curve()).unwrap());
    }

    #[test]
    fn ranges_cover_all_series_with_margin() {
        let r = ranges(&curve()).unwrap();
        assert!((r.x.0 - (-2.2)).abs() < 1e-12 && (r.x.1 - 2.2).abs() < 1e-12);
        // Series span [-12, 12].
        assert!((r.y.0 - (-13.2)).abs() < 1e-12 && (r.y.1 - 13.2).abs() < 1e-12);
    }

    #[test]
    fn too_few_points_is_an_error() {
        let mut c = curve();
        c.x_star.truncate(1);
        assert!(render_svg(&c).is_err());
    }

    #[test]
    fn kde_integrates_to_one_and_uses_silverman() {
        let obs: Vec<f64> = (0..1000).map(|i| ((i as f64 + 0.5) / 1000.0 * 6.0) - 3.0).collect();
        let d = kde(&obs, -8.0, 8.0, 801);
        let mass: f64 = d.y.iter().sum::<f64>() * 16.0 / 800.0;
        assert!((mass - 1.0).abs() < 1e-3, "mass {mass}");
        let sd = (obs.iter().map(|v| v * v).sum::<f64>() / 999.0).sqrt();
        let iqr = 3.0 / 1.34;
        assert!((d.bandwidth - 0.9 * sd.min(iqr) * 1000f64.powf(-0.2)).abs() < 1e-3);
    }
}
