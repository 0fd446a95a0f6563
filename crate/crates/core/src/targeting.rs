//! Budget-constrained treatment targeting.
//!
//! The objective `Σ_{i∈λ} y¹_i + Σ_{i∉λ} y⁰_i` is separable, so with a budget of
//! `B` units the best subgroup is the (at most) `B` units with the largest
//! non-negative effects.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// A treatment subgroup chosen under a budget. Units outside `selected` form
/// the control subgroup.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetingPolicy {
    pub budget: usize,
    /// Ascending row indices.
    pub selected: Vec<usize>,
}

impl TargetingPolicy {
    pub fn greedy(tau_hat: &[f64], budget: usize) -> Self {
        Self {
            budget,
            selected: greedy_select(tau_hat, budget),
        }
    }

    pub fn complement(&self, n: usize) -> Vec<usize> {
        let mut mask = vec![true; n];
        for &i in &self.selected {
            if i < n {
                mask[i] = false;
            }
        }
        (0..n).filter(|&i| mask[i]).collect()
    }
}

/// Up to `budget` units with `τ̂ ≥ 0`, largest first, ties broken by the lower
/// index. The result is sorted ascending. NaN estimates are never selected.
pub fn greedy_select(tau_hat: &[f64], budget: usize) -> Vec<usize> {
    let mut candidates: Vec<usize> = (0..tau_hat.len()).filter(|&i| tau_hat[i] >= 0.0).collect();
    candidates.sort_by(|&a, &b| tau_hat[b].total_cmp(&tau_hat[a]).then(a.cmp(&b)));
    candidates.truncate(budget);
    candidates.sort_unstable();
    candidates
}

/// `Σ_{i∈selected} y1_i + Σ_{i∉selected} y0_i`
pub fn policy_value(ds: &Dataset, selected: &[usize]) -> Result<f64> {
    crate::metrics::policy_sum(ds, selected)
}

/// One-column CSV (`index`) of the selected rows.
pub fn write_selection_csv<W: Write>(selected: &[usize], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["index"])?;
    for i in selected {
        w.write_record([i.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn save_selection_csv(selected: &[usize], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_selection_csv(selected, std::io::BufWriter::new(f))
}
