//! Variational contrastive log-ratio upper bound (vCLUB) on mutual information.
//!
//! For a diagonal Gaussian `q(b | a) = N(μ(a), diag(e^{s(a)}))` and a batch of
//! pairs `(a_i, b_i)`,
//!
//! `Î = (1/n) Σ_i log q(b_i | a_i) − (1/n²) Σ_i Σ_j log q(b_j | a_i)`.
//!
//! The normalizing terms cancel, and the inner sum over `j` only needs the
//! per-dimension mean and variance of `b`, so the estimator costs O(n·m).

use crate::error::{Error, Result};
use crate::model::{FactorTriple, ModelParams, QGrads, VariationalNet};
use crate::numcore::Tensor2D;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

fn check_pair(q: &VariationalNet, a: &Tensor2D, b: &Tensor2D) -> Result<()> {
    if a.rows() != b.rows() {
        return Err(Error::Dimension(format!(
            "{} conditioning rows vs {} target rows",
            a.rows(),
            b.rows()
        )));
    }
    if a.cols() != q.input_dim() || b.cols() != q.mean_head.out_dim() {
        return Err(Error::Dimension(format!(
            "variational net maps {} -> {}, got {} -> {}",
            q.input_dim(),
            q.mean_head.out_dim(),
            a.cols(),
            b.cols()
        )));
    }
    Ok(())
}

/// Mean over rows of `log q(b_i | a_i)`, with gradients for the net's parameters.
pub fn q_loglik_with_grad(q: &VariationalNet, a: &Tensor2D, b: &Tensor2D) -> Result<(f64, QGrads)> {
    check_pair(q, a, b)?;
    let n = a.rows();
    if n == 0 {
        return Err(Error::Validation("log-likelihood of an empty batch".into()));
    }
    let fwd = q.forward(a)?;
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let mut d_mean = Tensor2D::zeros(b.rows(), b.cols());
    let mut d_logvar = Tensor2D::zeros(b.rows(), b.cols());
    for ((((&bv, &mu), &s), dm), ds) in b
        .data()
        .iter()
        .zip(fwd.mean.data())
        .zip(fwd.logvar.data())
        .zip(d_mean.data_mut())
        .zip(d_logvar.data_mut())
    {
        let r = bv - mu;
        let inv_var = (-s).exp();
        total += -0.5 * r * r * inv_var - 0.5 * s - HALF_LN_2PI;
        *dm = r * inv_var * inv_n;
        *ds = (0.5 * r * r * inv_var - 0.5) * inv_n;
    }
    let grads = q.backward_params(&fwd, &d_mean, &d_logvar)?;
    Ok((total * inv_n, grads))
}

pub fn q_loglik(q: &VariationalNet, a: &Tensor2D, b: &Tensor2D) -> Result<f64> {
    check_pair(q, a, b)?;
    if a.rows() == 0 {
        return Err(Error::Validation("log-likelihood of an empty batch".into()));
    }
    let fwd = q.forward(a)?;
    let mut total = 0.0;
    for ((&bv, &mu), &s) in b.data().iter().zip(fwd.mean.data()).zip(fwd.logvar.data()) {
        let r = bv - mu;
        total += -0.5 * r * r * (-s).exp() - 0.5 * s - HALF_LN_2PI;
    }
    Ok(total / a.rows() as f64)
}

/// vCLUB estimate with gradients for both inputs; `q` is held constant.
#[derive(Debug, Clone)]
pub struct ClubOutput {
    pub value: f64,
    pub grad_a: Tensor2D,
    pub grad_b: Tensor2D,
}

pub fn vclub_pair_with_grad(q: &VariationalNet, a: &Tensor2D, b: &Tensor2D) -> Result<ClubOutput> {
    check_pair(q, a, b)?;
    let n = a.rows();
    if n < 2 {
        return Err(Error::Validation(format!(
            "vCLUB needs at least 2 samples, got {n}"
        )));
    }
    let m = b.cols();
    let nf = n as f64;
    let fwd = q.forward(a)?;
    let (mean_b, var_b) = column_moments(b);

    let mut value = 0.0;
    let mut d_mean = Tensor2D::zeros(n, m);
    let mut d_logvar = Tensor2D::zeros(n, m);
    // Σ_i w_ik and Σ_i w_ik μ_ik
    let mut w_sum = vec![0.0; m];
    let mut wmu_sum = vec![0.0; m];
    for i in 0..n {
        for k in 0..m {
            let mu = fwd.mean.get(i, k);
            let w = 0.5 * (-fwd.logvar.get(i, k)).exp();
            let pos = b.get(i, k) - mu;
            let neg = mean_b[k] - mu;
            let bracket = -pos * pos + var_b[k] + neg * neg;
            value += w * bracket;
            d_mean.set(i, k, 2.0 * w * (b.get(i, k) - mean_b[k]) / nf);
            d_logvar.set(i, k, -w * bracket / nf);
            w_sum[k] += w;
            wmu_sum[k] += w * mu;
        }
    }
    value /= nf;

    let mut grad_b = Tensor2D::zeros(n, m);
    let nn = nf * nf;
    for i in 0..n {
        for k in 0..m {
            let bv = b.get(i, k);
            let w = 0.5 * (-fwd.logvar.get(i, k)).exp();
            let direct = -2.0 * w * (bv - fwd.mean.get(i, k)) / nf;
            let pooled = 2.0 * (bv * w_sum[k] - wmu_sum[k]) / nn;
            grad_b.set(i, k, direct + pooled);
        }
    }
    let grad_a = q.backward_input(&fwd, &d_mean, &d_logvar)?;
    if !value.is_finite() {
        return Err(Error::Numeric("vCLUB estimate is not finite".into()));
    }
    Ok(ClubOutput {
        value,
        grad_a,
        grad_b,
    })
}

pub fn vclub_pair(q: &VariationalNet, a: &Tensor2D, b: &Tensor2D) -> Result<f64> {
    check_pair(q, a, b)?;
    let n = a.rows();
    if n < 2 {
        return Err(Error::Validation(format!(
            "vCLUB needs at least 2 samples, got {n}"
        )));
    }
    let fwd = q.forward(a)?;
    let (mean_b, var_b) = column_moments(b);
    let mut value = 0.0;
    for i in 0..n {
        for (k, (&bv, (&mu, &lv))) in b
            .row(i)
            .iter()
            .zip(fwd.mean.row(i).iter().zip(fwd.logvar.row(i)))
            .enumerate()
        {
            let pos = bv - mu;
            let neg = mean_b[k] - mu;
            value += 0.5 * (-lv).exp() * (-pos * pos + var_b[k] + neg * neg);
        }
    }
    value /= n as f64;
    if !value.is_finite() {
        return Err(Error::Numeric("vCLUB estimate is not finite".into()));
    }
    Ok(value)
}

/// Per-column mean and population variance.
fn column_moments(b: &Tensor2D) -> (Vec<f64>, Vec<f64>) {
    let (n, m) = b.shape();
    let nf = n as f64;
    let mut mean = vec![0.0; m];
    for i in 0..n {
        for (acc, v) in mean.iter_mut().zip(b.row(i)) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= nf);
    let mut var = vec![0.0; m];
    for i in 0..n {
        for ((acc, v), mu) in var.iter_mut().zip(b.row(i)).zip(&mean) {
            *acc += (v - mu) * (v - mu);
        }
    }
    var.iter_mut().for_each(|v| *v /= nf);
    (mean, var)
}

/// `I(Γ;Δ) + I(Δ;Υ) + I(Υ;Γ)` estimated with `q_gd`, `q_du`, `q_ug`, and the
/// gradient with respect to each factor.
pub fn loss_club_with_grad(
    params: &ModelParams,
    factors: &FactorTriple,
) -> Result<(f64, FactorTriple)> {
    let gd = vclub_pair_with_grad(&params.q_gd, &factors.gamma, &factors.delta)?;
    let du = vclub_pair_with_grad(&params.q_du, &factors.delta, &factors.upsilon)?;
    let ug = vclub_pair_with_grad(&params.q_ug, &factors.upsilon, &factors.gamma)?;
    let mut d_gamma = gd.grad_a;
    d_gamma.add_assign(&ug.grad_b)?;
    let mut d_delta = gd.grad_b;
    d_delta.add_assign(&du.grad_a)?;
    let mut d_upsilon = du.grad_b;
    d_upsilon.add_assign(&ug.grad_a)?;
    Ok((
        gd.value + du.value + ug.value,
        FactorTriple {
            gamma: d_gamma,
            delta: d_delta,
            upsilon: d_upsilon,
        },
    ))
}

pub fn loss_club(params: &ModelParams, factors: &FactorTriple) -> Result<f64> {
    Ok(vclub_pair(&params.q_gd, &factors.gamma, &factors.delta)?
        + vclub_pair(&params.q_du, &factors.delta, &factors.upsilon)?
        + vclub_pair(&params.q_ug, &factors.upsilon, &factors.gamma)?)
}
