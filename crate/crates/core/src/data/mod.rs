//! Observational datasets: in-memory representation, CSV I/O, seeded splits
//! and a factor-structured synthetic generator with known potential outcomes.

mod csv_io;
mod split;
mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor2D;

pub use csv_io::{load_csv, read_csv, save_csv, write_csv, CsvSchema};
pub use split::{largest_remainder_sizes, split_dataset, Split};
pub use synthetic::{
    generate_synthetic, FactorIndexSets, OutcomeForm, SyntheticData, SyntheticSidecar,
    SyntheticSpec, SyntheticTruth,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeType {
    #[default]
    Continuous,
    Binary,
}

/// Tolerance for the factual-consistency check on continuous outcomes.
const CONSISTENCY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n × d` covariates.
    pub x: Tensor2D,
    pub t: Vec<u8>,
    /// Factual outcomes.
    pub y: Vec<f64>,
    /// Ground-truth potential outcomes, when known.
    pub y0: Option<Vec<f64>>,
    pub y1: Option<Vec<f64>>,
    /// True propensity, when known.
    pub propensity: Option<Vec<f64>>,
    pub outcome_type: OutcomeType,
    pub feature_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        x: Tensor2D,
        t: Vec<u8>,
        y: Vec<f64>,
        potential: Option<(Vec<f64>, Vec<f64>)>,
        outcome_type: OutcomeType,
    ) -> Result<Self> {
        let feature_names = (0..x.cols()).map(|j| format!("f{j}")).collect();
        let (y0, y1) = match potential {
            Some((a, b)) => (Some(a), Some(b)),
            None => (None, None),
        };
        let ds = Self {
            x,
            t,
            y,
            y0,
            y1,
            propensity: None,
            outcome_type,
            feature_names,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.t.len()
    }

    pub fn d(&self) -> usize {
        self.x.cols()
    }

    pub fn n_treated(&self) -> usize {
        self.t.iter().filter(|&&v| v == 1).count()
    }

    pub fn has_potential_outcomes(&self) -> bool {
        self.y0.is_some() && self.y1.is_some()
    }

    pub fn potential_outcomes(&self) -> Result<(&[f64], &[f64])> {
        match (&self.y0, &self.y1) {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => Err(Error::Capability(
                "dataset has no ground-truth potential outcomes (y0, y1)".into(),
            )),
        }
    }

    /// True individual effects `y1 − y0`.
    pub fn true_ite(&self) -> Result<Vec<f64>> {
        let (y0, y1) = self.potential_outcomes()?;
        Ok(y1.iter().zip(y0).map(|(a, b)| a - b).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.x.rows();
        let lens = [
            ("t", self.t.len()),
            ("y", self.y.len()),
            ("y0", self.y0.as_ref().map_or(n, Vec::len)),
            ("y1", self.y1.as_ref().map_or(n, Vec::len)),
            ("e", self.propensity.as_ref().map_or(n, Vec::len)),
        ];
        for (name, len) in lens {
            if len != n {
                return Err(Error::Dimension(format!(
                    "column {name} has {len} entries for {n} rows"
                )));
            }
        }
        if self.feature_names.len() != self.x.cols() {
            return Err(Error::Dimension(format!(
                "{} feature names for {} covariates",
                self.feature_names.len(),
                self.x.cols()
            )));
        }
        if self.y0.is_some() != self.y1.is_some() {
            return Err(Error::Validation("y0 and y1 must be given together".into()));
        }
        crate::model::validate_binary(&self.t)?;
        if !self.x.is_finite() {
            return Err(Error::Validation(
                "covariates contain non-finite values".into(),
            ));
        }
        let outcome_cols = [Some(&self.y), self.y0.as_ref(), self.y1.as_ref()];
        for col in outcome_cols.into_iter().flatten() {
            if col.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(
                    "outcomes contain non-finite values".into(),
                ));
            }
            if self.outcome_type == OutcomeType::Binary && col.iter().any(|&v| v != 0.0 && v != 1.0)
            {
                return Err(Error::Validation(
                    "binary outcome type requires values in {0, 1}".into(),
                ));
            }
        }
        if let (Some(y0), Some(y1)) = (&self.y0, &self.y1) {
            for i in 0..n {
                let expect = if self.t[i] == 1 { y1[i] } else { y0[i] };
                if (self.y[i] - expect).abs() > CONSISTENCY_TOL {
                    return Err(Error::Validation(format!(
                        "row {i}: factual outcome {} does not match potential outcome {expect}",
                        self.y[i]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Rows in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let pick = |v: &Vec<f64>| indices.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Dataset {
            x: self.x.select_rows(indices),
            t: indices.iter().map(|&i| self.t[i]).collect(),
            y: pick(&self.y),
            y0: self.y0.as_ref().map(pick),
            y1: self.y1.as_ref().map(pick),
            propensity: self.propensity.as_ref().map(pick),
            outcome_type: self.outcome_type,
            feature_names: self.feature_names.clone(),
        }
    }
}
