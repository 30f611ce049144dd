use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};

/// Causal structure the observations come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Setting {
    /// Instrument `Z -> X -> Y` with `X` and `Y` confounded.
    #[serde(rename = "IV")]
    Iv,
    /// Leaky mediator `X -> M -> Y` with `X–Y` and `M–Y` confounded.
    #[serde(rename = "LM")]
    Lm,
}

impl std::fmt::Display for Setting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Setting::Iv => "IV",
            Setting::Lm => "LM",
        })
    }
}

impl std::str::FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "IV" => Ok(Setting::Iv),
            "LM" => Ok(Setting::Lm),
            _ => Err(Error::parse(format!("unknown setting `{s}` (expected IV or LM)"))),
        }
    }
}

/// Observed samples only; confounders never appear here.
///
/// IV data holds `(z, x, y)`, leaky-mediator data holds `(x, m, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    setting: Setting,
    treatments: Tensor,
    instruments: Option<Tensor>,
    mediators: Option<Tensor>,
    outcome: Tensor,
    seed: Option<u64>,
}

fn check_rows(n: usize, t: &Tensor, what: &str) -> Result<()> {
    if t.rows() != n {
        return Err(Error::dim(format!("{what} has {} rows, expected {n}", t.rows())));
    }
    if !t.all_finite() {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(())
}

impl Dataset {
    pub fn iv(instruments: Tensor, treatments: Tensor, outcome: Vec<f64>) -> Result<Self> {
        let n = outcome.len();
        if n == 0 {
            return Err(Error::EmptyData);
        }
        let outcome = Tensor::column(outcome);
        check_rows(n, &outcome, "outcome")?;
        check_rows(n, &instruments, "instruments")?;
        check_rows(n, &treatments, "treatments")?;
        Ok(Self {
            setting: Setting::Iv,
            treatments,
            instruments: Some(instruments),
            mediators: None,
            outcome,
            seed: None,
        })
    }

    pub fn lm(treatments: Tensor, mediators: Tensor, outcome: Vec<f64>) -> Result<Self> {
        let n = outcome.len();
        if n == 0 {
            return Err(Error::EmptyData);
        }
        let outcome = Tensor::column(outcome);
        check_rows(n, &outcome, "outcome")?;
        check_rows(n, &treatments, "treatments")?;
        check_rows(n, &mediators, "mediators")?;
        Ok(Self {
            setting: Setting::Lm,
            treatments,
            instruments: None,
            mediators: Some(mediators),
            outcome,
            seed: None,
        })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    /// Same covariates with a replaced outcome column.
    pub fn with_outcome(&self, outcome: Vec<f64>) -> Result<Self> {
        let outcome = Tensor::column(outcome);
        check_rows(self.n(), &outcome, "outcome")?;
        Ok(Self {
            outcome,
            ..self.clone()
        })
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn setting(&self) -> Setting {
        self.setting
    }

    pub fn n(&self) -> usize {
        self.outcome.rows()
    }

    pub fn treatment_dim(&self) -> usize {
        self.treatments.cols()
    }

    pub fn treatments(&self) -> &Tensor {
        &self.treatments
    }

    pub fn instruments(&self) -> Option<&Tensor> {
        self.instruments.as_ref()
    }

    pub fn mediators(&self) -> Option<&Tensor> {
        self.mediators.as_ref()
    }

    /// `n x 1` outcome column.
    pub fn outcome(&self) -> &Tensor {
        &self.outcome
    }

    /// Conditioning variable of the fitted invertible model: `Z` for IV,
    /// `X` for the leaky mediator.
    pub fn flow_condition(&self) -> &Tensor {
        match self.setting {
            Setting::Iv => self.instruments.as_ref().expect("IV data has instruments"),
            Setting::Lm => &self.treatments,
        }
    }

    /// Variable modelled by the invertible model: `X` for IV, `M` for the
    /// leaky mediator.
    pub fn flow_variable(&self) -> &Tensor {
        match self.setting {
            Setting::Iv => &self.treatments,
            Setting::Lm => self.mediators.as_ref().expect("LM data has mediators"),
        }
    }

    /// Argument of the response functions: `X` for IV, `M` for the leaky
    /// mediator.
    pub fn basis_input(&self) -> &Tensor {
        self.flow_variable()
    }

    /// Regressor inputs for the conditional outcome moments: `[x | z]` for
    /// IV, `[x | m]` for the leaky mediator.
    pub fn regressor_input(&self) -> Tensor {
        let other = match self.setting {
            Setting::Iv => self.instruments.as_ref(),
            Setting::Lm => self.mediators.as_ref(),
        }
        .expect("second block present");
        self.treatments.hstack(other).expect("row counts checked")
    }

    pub fn column_names(&self) -> Vec<String> {
        let block = |prefix: &'static str, t: &Tensor| (1..=t.cols()).map(move |i| format!("{prefix}{i}"));
        let mut names: Vec<String> = Vec::new();
        match self.setting {
            Setting::Iv => {
                names.extend(block("z", self.instruments.as_ref().unwrap()));
                names.extend(block("x", &self.treatments));
            }
            Setting::Lm => {
                names.extend(block("x", &self.treatments));
                names.extend(block("m", self.mediators.as_ref().unwrap()));
            }
        }
        names.push("y".into());
        names
    }

    /// Writes `z1..zq, x1..xp, y` (IV) or `x1..xp, m1..mq, y` (LM) with a
    /// header row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(self.column_names()).map_err(csv_err)?;
        let (first, second) = match self.setting {
            Setting::Iv => (self.instruments.as_ref().unwrap(), &self.treatments),
            Setting::Lm => (&self.treatments, self.mediators.as_ref().unwrap()),
        };
        for r in 0..self.n() {
            let row = first
                .row(r)
                .iter()
                .chain(second.row(r))
                .chain(self.outcome.row(r))
                .map(|v| v.to_string());
            w.write_record(row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
        let header: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(|h| h.trim().to_string()).collect();
        let cols_with = |p: char| -> Vec<usize> {
            header
                .iter()
                .enumerate()
                .filter(|(_, h)| h.starts_with(p) && h[1..].parse::<usize>().is_ok())
                .map(|(i, _)| i)
                .collect()
        };
        let (zc, xc, mc) = (cols_with('z'), cols_with('x'), cols_with('m'));
        let yc = header
            .iter()
            .position(|h| h == "y")
            .ok_or_else(|| Error::parse("CSV header has no `y` column"))?;
        if xc.is_empty() {
            return Err(Error::parse("CSV header has no x1.. columns"));
        }
        let setting = match (zc.is_empty(), mc.is_empty()) {
            (false, true) => Setting::Iv,
            (true, false) => Setting::Lm,
            _ => {
                return Err(Error::parse(
                    "CSV header must contain either z1.. (IV) or m1.. (LM) columns",
                ))
            }
        };
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let vals = rec
                .iter()
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::parse(format!("row {}: {e}", line + 2)))?;
            if vals.len() != header.len() {
                return Err(Error::parse(format!("row {} has {} fields", line + 2, vals.len())));
            }
            rows.push(vals);
        }
        if rows.is_empty() {
            return Err(Error::EmptyData);
        }
        let take = |idx: &[usize]| -> Result<Tensor> {
            let data = rows.iter().flat_map(|r| idx.iter().map(move |&i| r[i])).collect();
            Tensor::new(rows.len(), idx.len(), data)
        };
        let y: Vec<f64> = rows.iter().map(|r| r[yc]).collect();
        match setting {
            Setting::Iv => Dataset::iv(take(&zc)?, take(&xc)?, y),
            Setting::Lm => Dataset::lm(take(&xc)?, take(&mc)?, y),
        }
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::parse(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_iv() -> Dataset {
        Dataset::iv(
            Tensor::from_rows(&[vec![0.1, 0.2], vec![0.3, 0.4]]).unwrap(),
            Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(),
            vec![-1.0, 0.5],
        )
        .unwrap()
    }

    #[test]
    fn csv_header_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let d = small_iv();
        d.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next(), Some("z1,z2,x1,x2,y"));
        assert_eq!(Dataset::read_csv(&path).unwrap(), d);
    }

    #[test]
    fn lm_header() {
        let d = Dataset::lm(Tensor::column(vec![1.0]), Tensor::row_vector(vec![2.0, 3.0]), vec![4.0]).unwrap();
        assert_eq!(d.column_names(), vec!["x1", "m1", "m2", "y"]);
        assert_eq!(d.regressor_input().row(0), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Dataset::iv(Tensor::zeros(2, 1), Tensor::zeros(3, 1), vec![0.0, 0.0]).is_err());
        assert!(matches!(
            Dataset::iv(Tensor::zeros(1, 1), Tensor::filled(1, 1, f64::INFINITY), vec![0.0]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn csv_without_role_columns_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "x1,y\n1,2\n").unwrap();
        assert!(Dataset::read_csv(&path).is_err());
    }
}
