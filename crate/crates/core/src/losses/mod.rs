//! Loss terms and their composition
//!
//! `L = L_pred + α·L_treat + β·L_disc + γ·L_mi + λ·L_reg`
//!
//! where `L_mi` is the vCLUB sum, the orthogonality penalty, or absent,
//! depending on [`MiMode`].

mod club;
mod ipm;
mod rlo;

use serde::{Deserialize, Serialize};

use crate::data::OutcomeType;
use crate::error::{Error, Result};
use crate::model::{
    split_by_treatment, validate_binary, Block, FactorTriple, MainGrads, ModelParams,
};
use crate::numcore::{clamp_prob, Tensor2D, PROB_CLAMP};

pub use club::{
    loss_club, loss_club_with_grad, q_loglik, q_loglik_with_grad, vclub_pair, vclub_pair_with_grad,
    ClubOutput,
};
pub use ipm::{ipm_wasserstein, ipm_wasserstein_with_grad, IpmOutput, SinkhornConfig};
pub use rlo::{loss_rlo, loss_rlo_accumulate, rlo_from_vectors};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.01,
            lambda: 1e-4,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            lambda: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Validation(format!(
                    "loss weight {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Which mutual-information surrogate fills the γ slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MiMode {
    Mim,
    Rlo,
    None,
}

impl MiMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mim" => Some(Self::Mim),
            "rlo" => Some(Self::Rlo),
            "none" => Some(Self::None),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mim => "mim",
            Self::Rlo => "rlo",
            Self::None => "none",
        }
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!("length mismatch: {a} vs {b}")));
    }
    if a == 0 {
        return Err(Error::Validation("loss of an empty vector".into()));
    }
    Ok(())
}

fn bce_term(p: f64, y: f64) -> (f64, f64) {
    let pc = clamp_prob(p);
    let loss = -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
    // the clamp is flat outside its bounds
    let grad = if p <= PROB_CLAMP || p >= 1.0 - PROB_CLAMP {
        0.0
    } else {
        (pc - y) / (pc * (1.0 - pc))
    };
    (loss, grad)
}

/// Mean loss and its gradient with respect to `y_hat`.
pub fn loss_pred_with_grad(
    y_hat: &[f64],
    y: &[f64],
    outcome_type: OutcomeType,
) -> Result<(f64, Vec<f64>)> {
    check_lengths(y_hat.len(), y.len())?;
    let n = y.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(y.len());
    match outcome_type {
        OutcomeType::Continuous => {
            for (&p, &t) in y_hat.iter().zip(y) {
                let r = p - t;
                total += r * r;
                grad.push(2.0 * r / n);
            }
        }
        OutcomeType::Binary => {
            if let Some(v) = y.iter().find(|&&v| v != 0.0 && v != 1.0) {
                return Err(Error::Validation(format!(
                    "binary outcome loss needs y in {{0, 1}}, got {v}"
                )));
            }
            for (&p, &t) in y_hat.iter().zip(y) {
                let (l, g) = bce_term(p, t);
                total += l;
                grad.push(g / n);
            }
        }
    }
    Ok((total / n, grad))
}

/// Mean squared error (continuous) or mean binary cross-entropy (binary).
pub fn loss_pred(y_hat: &[f64], y: &[f64], outcome_type: OutcomeType) -> Result<f64> {
    loss_pred_with_grad(y_hat, y, outcome_type).map(|r| r.0)
}

pub fn loss_treat_with_grad(p_hat: &[f64], t: &[u8]) -> Result<(f64, Vec<f64>)> {
    check_lengths(p_hat.len(), t.len())?;
    validate_binary(t)?;
    let n = t.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(t.len());
    for (&p, &ti) in p_hat.iter().zip(t) {
        let (l, g) = bce_term(p, f64::from(ti));
        total += l;
        grad.push(g / n);
    }
    Ok((total / n, grad))
}

/// Mean binary cross-entropy of the propensity estimates.
pub fn loss_treat(p_hat: &[f64], t: &[u8]) -> Result<f64> {
    loss_treat_with_grad(p_hat, t).map(|r| r.0)
}

/// Sum of squared weights of the main model (biases and variational nets excluded).
pub fn loss_reg(params: &ModelParams) -> f64 {
    params
        .main_layers()
        .iter()
        .map(|l| l.weight.squared_norm())
        .sum()
}

/// Unweighted component values. A component whose weight is zero (or whose
/// mode is inactive) is not evaluated and reported as 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub pred: f64,
    pub treat: f64,
    pub disc: f64,
    pub mi: f64,
    pub reg: f64,
}

#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub breakdown: LossBreakdown,
    pub grads: MainGrads,
}

/// A minibatch view: covariates, treatment flags and factual outcomes.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub x: &'a Tensor2D,
    pub t: &'a [u8],
    pub y: &'a [f64],
}

impl<'a> Batch<'a> {
    pub fn of(ds: &'a crate::data::Dataset) -> Self {
        Self {
            x: &ds.x,
            t: &ds.t,
            y: &ds.y,
        }
    }
}

/// Objective value and gradients for every main-model parameter. The
/// variational nets are held fixed.
pub fn total_loss(
    params: &ModelParams,
    batch: Batch<'_>,
    weights: &LossWeights,
    mode: MiMode,
    sinkhorn: &SinkhornConfig,
) -> Result<TotalLoss> {
    weights.validate()?;
    let n = batch.x.rows();
    if n == 0 {
        return Err(Error::Validation("empty batch".into()));
    }
    if batch.t.len() != n || batch.y.len() != n {
        return Err(Error::Dimension(format!(
            "batch has {n} rows, {} treatments and {} outcomes",
            batch.t.len(),
            batch.y.len()
        )));
    }
    validate_binary(batch.t)?;
    let m = params.config.factor_dim;
    let (factors, cache) = params.encode_cached(batch.x)?;
    let mut grads = MainGrads::zeros(params);
    let mut d = FactorTriple {
        gamma: Tensor2D::zeros(n, m),
        delta: Tensor2D::zeros(n, m),
        upsilon: Tensor2D::zeros(n, m),
    };
    let mut parts = LossBreakdown::default();

    // factual outcome through h¹ / h⁰ on Φ = concat(Υ, Δ)
    let phi = factors.phi()?;
    let (treated, control) = split_by_treatment(batch.t);
    let mut y_hat = vec![0.0; n];
    let mut head_caches = Vec::with_capacity(2);
    for (idx, head) in [(&treated, &params.h1), (&control, &params.h0)] {
        if idx.is_empty() {
            head_caches.push(None);
            continue;
        }
        let c = head.forward_cached(&phi.select_rows(idx))?;
        for (k, &i) in idx.iter().enumerate() {
            y_hat[i] = c.output().get(k, 0);
        }
        head_caches.push(Some(c));
    }
    let (pred, dy) = loss_pred_with_grad(&y_hat, batch.y, params.config.outcome_type)?;
    parts.pred = pred;
    let mut d_phi = Tensor2D::zeros(n, 2 * m);
    for ((idx, head, block), c) in [
        (&treated, &params.h1, Block::H1),
        (&control, &params.h0, Block::H0),
    ]
    .into_iter()
    .zip(&head_caches)
    {
        let Some(c) = c else { continue };
        let up = Tensor2D::column(&idx.iter().map(|&i| dy[i]).collect::<Vec<_>>());
        let (g, gi) = head.backward(c, &up)?;
        grads.accumulate(block, &g)?;
        d_phi.scatter_add_rows(idx, &gi);
    }
    d.upsilon.add_assign(&d_phi.slice_cols(0, m))?;
    d.delta.add_assign(&d_phi.slice_cols(m, 2 * m))?;

    if weights.alpha > 0.0 {
        let c = params.pi.forward_cached(&factors.omega()?)?;
        let (treat, dp) = loss_treat_with_grad(c.output().data(), batch.t)?;
        parts.treat = treat;
        let up = Tensor2D::column(&dp.iter().map(|g| g * weights.alpha).collect::<Vec<_>>());
        let (g, gi) = params.pi.backward(&c, &up)?;
        grads.accumulate(Block::Pi, &g)?;
        d.gamma.add_assign(&gi.slice_cols(0, m))?;
        d.delta.add_assign(&gi.slice_cols(m, 2 * m))?;
    }

    if weights.beta > 0.0 {
        let ut = factors.upsilon.select_rows(&treated);
        let uc = factors.upsilon.select_rows(&control);
        let out = ipm_wasserstein_with_grad(&ut, &uc, sinkhorn)?;
        parts.disc = out.value;
        let mut gt = out.grad_treated;
        gt.scale(weights.beta);
        let mut gc = out.grad_control;
        gc.scale(weights.beta);
        d.upsilon.scatter_add_rows(&treated, &gt);
        d.upsilon.scatter_add_rows(&control, &gc);
    }

    if weights.gamma > 0.0 {
        match mode {
            MiMode::Mim => {
                let (v, mut g) = loss_club_with_grad(params, &factors)?;
                parts.mi = v;
                for t in [&mut g.gamma, &mut g.delta, &mut g.upsilon] {
                    t.scale(weights.gamma);
                }
                d.gamma.add_assign(&g.gamma)?;
                d.delta.add_assign(&g.delta)?;
                d.upsilon.add_assign(&g.upsilon)?;
            }
            MiMode::Rlo => {
                parts.mi = loss_rlo_accumulate(params, weights.gamma, &mut grads)?;
            }
            MiMode::None => {}
        }
    }

    params.encode_backward(&cache, &d, &mut grads)?;

    if weights.lambda > 0.0 {
        parts.reg = loss_reg(params);
        for (g, l) in grads.layers.iter_mut().zip(params.main_layers()) {
            for (gv, &w) in g.weight.data_mut().iter_mut().zip(l.weight.data()) {
                *gv += 2.0 * weights.lambda * w;
            }
        }
    }

    let mi_weight = if mode == MiMode::None {
        0.0
    } else {
        weights.gamma
    };
    parts.total = parts.pred
        + weights.alpha * parts.treat
        + weights.beta * parts.disc
        + mi_weight * parts.mi
        + weights.lambda * parts.reg;
    if !parts.total.is_finite() {
        return Err(Error::Numeric(format!(
            "objective is not finite: {parts:?}"
        )));
    }
    Ok(TotalLoss {
        breakdown: parts,
        grads,
    })
}
