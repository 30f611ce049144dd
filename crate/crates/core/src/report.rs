//! Output files: one CSV row per solve and a JSON summary of the curve.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{BoundCurve, BoundResult, RunOutput};
use crate::plot::Density;
use crate::spline::NaturalSpline;

/// Relative-plus-absolute tolerance used for the summary's validity flag.
pub fn containment_tolerance(truth: f64) -> f64 {
    0.05 * (1.0 + truth.abs())
}

pub fn csv_header(p: usize) -> Vec<String> {
    let mut h: Vec<String> = (1..=p).map(|i| format!("x_star_{i}")).collect();
    for c in ["direction", "seed", "bound", "converged", "max_violation", "wall_time_s"] {
        h.push(c.to_string());
    }
    h
}

/// Rows in grid order, then direction (lower first), then seed.
pub fn sorted(results: &[BoundResult], grid: &[Vec<f64>]) -> Vec<BoundResult> {
    let pos = |x: &[f64]| grid.iter().position(|g| g == x).unwrap_or(usize::MAX);
    let mut out = results.to_vec();
    out.sort_by(|a, b| {
        (pos(&a.x_star), a.direction, a.seed).cmp(&(pos(&b.x_star), b.direction, b.seed))
    });
    out
}

/// Writes one row per result in the given order.
pub fn emit_csv(results: &[BoundResult], path: &Path) -> Result<()> {
    let first = results.first().ok_or_else(|| Error::config("no results to write"))?;
    let p = first.x_star.len();
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(csv_header(p)).map_err(csv_err)?;
    for r in results {
        if r.x_star.len() != p {
            return Err(Error::dim("results have different treatment dims"));
        }
        let mut row: Vec<String> = r.x_star.iter().map(f64::to_string).collect();
        row.push(r.direction.to_string());
        row.push(r.seed.to_string());
        row.push(r.bound.to_string());
        row.push(r.converged.to_string());
        row.push(r.max_violation.to_string());
        row.push(r.wall_time_s.to_string());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn parse_csv(path: &Path) -> Result<Vec<BoundResult>> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = rdr.headers().map_err(csv_err)?.clone();
    let p = header.iter().filter(|h| h.starts_with("x_star_")).count();
    if header.iter().collect::<Vec<_>>() != csv_header(p) {
        return Err(Error::parse("unexpected bounds CSV header"));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let bad = |what: &str| Error::parse(format!("row {}: bad {what}", i + 2));
        let f = |j: usize, what: &str| rec[j].parse::<f64>().map_err(|_| bad(what));
        out.push(BoundResult {
            x_star: (0..p).map(|j| f(j, "x_star")).collect::<Result<_>>()?,
            direction: rec[p].parse().map_err(|_| bad("direction"))?,
            seed: rec[p + 1].parse().map_err(|_| bad("seed"))?,
            bound: f(p + 2, "bound")?,
            converged: rec[p + 3].parse().map_err(|_| bad("converged"))?,
            max_violation: f(p + 4, "max_violation")?,
            wall_time_s: f(p + 5, "wall_time_s")?,
        });
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::parse(format!("csv: {e}"))
}

/// One grid point of the summary; missing values are `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryPoint {
    pub x_star: Vec<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub true_effect: Option<f64>,
    pub naive: Option<f64>,
}

/// Smoothing splines through the available lower and upper values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Smoothing {
    pub lower: Option<NaturalSpline>,
    pub upper: Option<NaturalSpline>,
}

/// The JSON summary. Field order is the serialized key order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config: BTreeMap<String, String>,
    pub dataset: String,
    pub epsilon: f64,
    pub coordinate: usize,
    pub points: Vec<SummaryPoint>,
    /// Every available interval contains the truth; `null` without a truth.
    pub valid: Option<bool>,
    pub converged_runs: usize,
    pub total_runs: usize,
    pub smoothing: Smoothing,
    pub density: Density,
}

/// Splines over the varied coordinate through the non-missing values of one
/// side; `None` with fewer than two values.
pub fn fit_bound_spline(xs: &[f64], values: &[Option<f64>]) -> Option<NaturalSpline> {
    let (k, v): (Vec<f64>, Vec<f64>) = xs
        .iter()
        .zip(values)
        .filter_map(|(x, v)| v.filter(|v| v.is_finite()).map(|v| (*x, v)))
        .unzip();
    NaturalSpline::fit(&k, &v).ok()
}

impl Summary {
    pub fn from_output(out: &RunOutput) -> Self {
        let c = &out.curve;
        let xs = c.varied();
        Self {
            config: out.config.to_pairs().into_iter().collect(),
            dataset: c.dataset.clone(),
            epsilon: out.epsilon,
            coordinate: c.coordinate,
            points: (0..c.x_star.len())
                .map(|i| SummaryPoint {
                    x_star: c.x_star[i].clone(),
                    lower: c.lower[i],
                    upper: c.upper[i],
                    true_effect: c.true_effect.as_ref().map(|t| t[i]),
                    naive: c.naive.as_ref().map(|t| t[i]),
                })
                .collect(),
            valid: c.contains_truth(containment_tolerance),
            converged_runs: out.results.iter().filter(|r| r.converged).count(),
            total_runs: out.results.len(),
            smoothing: Smoothing {
                lower: fit_bound_spline(&xs, &c.lower),
                upper: fit_bound_spline(&xs, &c.upper),
            },
            density: c.density.clone(),
        }
    }

    /// Rebuilds the curve, for re-plotting.
    pub fn curve(&self) -> BoundCurve {
        let opt_all = |f: fn(&SummaryPoint) -> Option<f64>| -> Option<Vec<f64>> {
            self.points.iter().map(f).collect()
        };
        BoundCurve {
            dataset: self.dataset.clone(),
            coordinate: self.coordinate,
            x_star: self.points.iter().map(|p| p.x_star.clone()).collect(),
            lower: self.points.iter().map(|p| p.lower).collect(),
            upper: self.points.iter().map(|p| p.upper).collect(),
            true_effect: opt_all(|p| p.true_effect),
            naive: opt_all(|p| p.naive),
            density: self.density.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::parse(format!("json: {e}")))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse(format!("summary json: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub fn emit_summary_json(out: &RunOutput, path: &Path) -> Result<()> {
    std::fs::write(path, Summary::from_output(out).to_json()?)?;
    Ok(())
}

/// Per-round solver diagnostics, one row per (result, round).
pub fn emit_trace_csv(out: &RunOutput, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["run", "direction", "seed", "round", "objective", "max_violation", "tau", "lambda_norm"])
        .map_err(csv_err)?;
    for (i, trace) in &out.traces {
        let r = &out.results[*i];
        for t in trace {
            w.write_record([
                i.to_string(),
                r.direction.to_string(),
                r.seed.to_string(),
                t.round.to_string(),
                t.objective.to_string(),
                t.max_violation.to_string(),
                t.tau.to_string(),
                t.lambda_norm.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auglag::Direction;

    fn result(x: f64, direction: Direction, seed: u64, bound: f64) -> BoundResult {
        BoundResult {
            x_star: vec![x, 0.25],
            direction,
            seed,
            bound,
            converged: seed % 2 == 0,
            max_violation: 1e-5 * seed as f64,
            wall_time_s: 0.0,
        }
    }

    fn grid_results() -> (Vec<Vec<f64>>, Vec<BoundResult>) {
        let grid = vec![vec![-1.0, 0.25], vec![1.0, 0.25]];
        let mut rs = Vec::new();
        for x in [1.0, -1.0] {
            for d in [Direction::Upper, Direction::Lower] {
                for s in (0..5).rev() {
                    rs.push(result(x, d, s, x + 0.1 * s as f64 + 1.0 / 3.0));
                }
            }
        }
        (grid, rs)
    }

    #[test]
    fn header_is_exact() {
        assert_eq!(
            csv_header(2).join(","),
            "x_star_1,x_star_2,direction,seed,bound,converged,max_violation,wall_time_s"
        );
    }

    #[test]
    fn csv_rows_and_round_trip() {
        let (grid, rs) = grid_results();
        let rows = sorted(&rs, &grid);
        assert_eq!(rows.len(), 20);
        assert_eq!(rows[0].x_star[0], -1.0);
        assert_eq!(rows[0].direction, Direction::Lower);
        assert_eq!(rows[4].seed, 4);
        assert_eq!(rows[5].direction, Direction::Upper);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.csv");
        emit_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 21);
        assert_eq!(parse_csv(&path).unwrap(), rows);
    }

    #[test]
    fn nan_bounds_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.csv");
        let mut r = result(0.0, Direction::Upper, 1, f64::NAN);
        r.max_violation = f64::NAN;
        emit_csv(&[r], &path).unwrap();
        let back = parse_csv(&path).unwrap();
        assert!(back[0].bound.is_nan() && back[0].max_violation.is_nan());
    }

    #[test]
    fn empty_results_and_bad_paths_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_csv(&[], &dir.path().join("x.csv")).is_err());
        let r = result(0.0, Direction::Lower, 0, 1.0);
        assert!(emit_csv(&[r], &dir.path().join("missing/x.csv")).is_err());
    }

    fn curve() -> BoundCurve {
        BoundCurve {
            dataset: "IV-lin-1d-weak-add".into(),
            coordinate: 1,
            x_star: vec![vec![-1.0], vec![0.0], vec![1.0]],
            lower: vec![Some(-1.2), None, Some(0.9)],
            upper: vec![Some(-0.8), Some(0.3), Some(1.1)],
            true_effect: Some(vec![-1.0, 0.0, 1.0]),
            naive: Some(vec![-1.5, 0.1, 1.5]),
            density: Density::default(),
        }
    }

    fn output(c: BoundCurve) -> RunOutput {
        let config = crate::pipeline::RunConfig::new(crate::pipeline::DataSource::Named(
            crate::scm::ScmName::IvLin1dWeakAdd,
        ));
        RunOutput {
            config,
            epsilon: 0.2,
            results: vec![result(0.0, Direction::Lower, 0, 1.0)],
            traces: BTreeMap::new(),
            curve: c,
        }
    }

    #[test]
    fn summary_marks_missing_points_null_and_validity() {
        let s = Summary::from_output(&output(curve()));
        assert_eq!(s.valid, Some(true));
        let json = s.to_json().unwrap();
        assert!(json.contains("\"lower\": null"));
        assert_eq!(Summary::from_json(&json).unwrap(), s);
        assert_eq!(s.curve(), curve());
        assert!(s.smoothing.lower.is_some());

        let mut bad = curve();
        bad.upper[2] = Some(0.5);
        assert_eq!(Summary::from_output(&output(bad)).valid, Some(false));
        let mut unknown = curve();
        unknown.true_effect = None;
        let s = Summary::from_output(&output(unknown));
        assert_eq!(s.valid, None);
        assert!(s.to_json().unwrap().contains("\"true_effect\": null"));
    }

    #[test]
    fn summary_keys_are_stable() {
        let a = Summary::from_output(&output(curve())).to_json().unwrap();
        let b = Summary::from_output(&output(curve())).to_json().unwrap();
        assert_eq!(a, b);
        let order: Vec<usize> = ["\"config\"", "\"dataset\"", "\"epsilon\"", "\"points\"", "\"valid\"", "\"density\""]
            .iter()
            .map(|k| a.find(k).unwrap())
            .collect();
        assert!(order.windows(2).all(|w| w[0] < w[1]));
    }
}
