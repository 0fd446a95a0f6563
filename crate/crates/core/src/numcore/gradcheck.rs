use rayon::prelude::*;

use crate::error::{Error, Result};

/// Outcome of comparing an analytic gradient against central finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Index of the parameter with the worst error.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub tolerance: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }
}

/// Finite-difference settings. The relative error of one component is
/// `|a - n| / max(|a|, |n|, floor)`, so components whose true gradient is
/// below `floor` are judged on absolute error scaled by `floor`.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-4,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / scale
}

/// Checks `analytic` (the claimed gradient of `loss_fn` at `params`) component by
/// component. Components are evaluated in parallel; `loss_fn` must be deterministic.
pub fn grad_check<F>(
    loss_fn: F,
    params: &[f64],
    analytic: &[f64],
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    grad_check_with(
        loss_fn,
        params,
        analytic,
        tolerance,
        GradCheckConfig::default(),
    )
}

pub fn grad_check_with<F>(
    loss_fn: F,
    params: &[f64],
    analytic: &[f64],
    tolerance: f64,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    if params.len() != analytic.len() {
        return Err(Error::Dimension(format!(
            "{} parameters but {} gradient entries",
            params.len(),
            analytic.len()
        )));
    }
    let base = loss_fn(params)?;
    if !base.is_finite() {
        return Err(Error::Numeric(
            "loss is not finite at the check point".into(),
        ));
    }

    let h = cfg.step;
    let numeric: Vec<f64> = (0..params.len())
        .into_par_iter()
        .map_init(
            || params.to_vec(),
            |p, i| -> Result<f64> {
                let orig = p[i];
                p[i] = orig + h;
                let up = loss_fn(p)?;
                p[i] = orig - h;
                let down = loss_fn(p)?;
                p[i] = orig;
                if !up.is_finite() || !down.is_finite() {
                    return Err(Error::Numeric(format!(
                        "loss not finite when perturbing parameter {i}"
                    )));
                }
                Ok((up - down) / (2.0 * h))
            },
        )
        .collect::<Result<_>>()?;

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_index: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: numeric.first().copied().unwrap_or(0.0),
        tolerance,
        checked: params.len(),
    };
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = relative_error(a, n, cfg.floor);
        if err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = n;
        }
    }
    Ok(report)
}
