//! Factor-structured synthetic data.
//!
//! Three independent standard-normal latent blocks Γ*, Δ*, Υ* are observed
//! directly as covariates `X = [Γ* | Δ* | Υ*]`. Treatment depends on (Γ*, Δ*)
//! only, outcomes on (Δ*, Υ*) only, so the ground-truth role of every column is
//! known.
//!
//! * `t_i = 1[U_i < σ(s·(w·[Γ*_i, Δ*_i]) + b)]`, with the offset `b` found by
//!   bisection so the treated fraction lands within 0.02 of the target.
//! * continuous: `y⁰ = f(v) + ε`, `y¹ = f(v) + g(v) + ε`, with `v = [Δ*, Υ*]` and
//!   one noise draw `ε` per unit shared by both arms, so `τ = g(v)` exactly.
//! * binary: `yᵗ = 1[U'_i < σ(f(v) + t·g(v) + ε)]` with a shared uniform `U'_i`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, OutcomeType};
use crate::error::{Error, Result};
use crate::numcore::{sigmoid, Tensor2D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeForm {
    Linear,
    Quadratic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub m_gamma: usize,
    pub m_delta: usize,
    pub m_upsilon: usize,
    pub n: usize,
    pub target_treated_fraction: f64,
    pub outcome_form: OutcomeForm,
    pub outcome_type: OutcomeType,
    pub noise_std: f64,
    /// Scale of the treatment logit's dependence on covariates; 0 gives a
    /// randomized assignment.
    pub selection_strength: f64,
    /// Multiplies the treatment-effect function; 0 gives `y¹ = y⁰`.
    pub effect_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            m_gamma: 5,
            m_delta: 5,
            m_upsilon: 5,
            n: 1000,
            target_treated_fraction: 0.3,
            outcome_form: OutcomeForm::Linear,
            outcome_type: OutcomeType::Continuous,
            noise_std: 0.5,
            selection_strength: 1.5,
            effect_scale: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// The reference dataset used by the ablation benchmark: 4000 rows, linear outcome.
    pub fn bundled() -> Self {
        Self {
            n: 4000,
            seed: 2022,
            ..Self::default()
        }
    }

    pub fn d(&self) -> usize {
        self.m_gamma + self.m_delta + self.m_upsilon
    }

    pub fn validate(&self) -> Result<()> {
        if self.d() == 0 {
            return Err(Error::Validation(
                "at least one latent dimension is required".into(),
            ));
        }
        if self.m_gamma + self.m_delta == 0 && self.selection_strength != 0.0 {
            return Err(Error::Validation(
                "selection bias needs at least one Γ or Δ dimension".into(),
            ));
        }
        if self.n < 10 {
            return Err(Error::Validation(format!("n = {} is below 10", self.n)));
        }
        let f = self.target_treated_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Validation(format!(
                "target_treated_fraction {f} is outside (0, 1)"
            )));
        }
        for (name, v) in [
            ("noise_std", self.noise_std),
            ("selection_strength", self.selection_strength),
            ("effect_scale", self.effect_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Validation(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Ground-truth column indices of each latent block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorIndexSets {
    pub gamma: Vec<usize>,
    pub delta: Vec<usize>,
    pub upsilon: Vec<usize>,
}

impl FactorIndexSets {
    pub fn blocks(&self) -> [&[usize]; 3] {
        [&self.gamma, &self.delta, &self.upsilon]
    }
}

/// Polynomial `c + a·v + Σ_{j<k} A_jk v_j v_k` over a subset of columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Poly {
    intercept: f64,
    linear: Vec<f64>,
    pairs: Vec<(usize, usize, f64)>,
}

impl Poly {
    fn draw(p: usize, form: OutcomeForm, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let lin_sd = 1.0 / (p.max(1) as f64).sqrt();
        let intercept: f64 = rng.sample::<f64, _>(StandardNormal) * scale;
        let linear = (0..p)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * lin_sd * scale)
            .collect();
        let mut pairs = Vec::new();
        if form == OutcomeForm::Quadratic && p > 1 {
            let pair_sd = std::f64::consts::SQRT_2 / p as f64;
            for j in 0..p {
                for k in j + 1..p {
                    let c: f64 = rng.sample(StandardNormal);
                    pairs.push((j, k, c * pair_sd * scale));
                }
            }
        }
        Self {
            intercept,
            linear,
            pairs,
        }
    }

    fn eval(&self, v: &[f64]) -> f64 {
        let mut s = self.intercept;
        for (a, x) in self.linear.iter().zip(v) {
            s += a * x;
        }
        for &(j, k, c) in &self.pairs {
            s += c * v[j] * v[k];
        }
        s
    }
}

/// Generating mechanism of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub factors: FactorIndexSets,
    /// Columns feeding the treatment logit (Γ then Δ).
    treatment_cols: Vec<usize>,
    treatment_weights: Vec<f64>,
    pub logit_offset: f64,
    /// Columns feeding the outcome (Δ then Υ).
    outcome_cols: Vec<usize>,
    base: Poly,
    effect: Poly,
    outcome_type: OutcomeType,
}

impl SyntheticTruth {
    /// Covariate part of the treatment logit (offset excluded).
    pub fn treatment_score(&self, row: &[f64]) -> f64 {
        self.treatment_cols
            .iter()
            .zip(&self.treatment_weights)
            .map(|(&c, w)| w * row[c])
            .sum()
    }

    pub fn propensity(&self, row: &[f64]) -> f64 {
        sigmoid(self.treatment_score(row) + self.logit_offset)
    }

    fn outcome_inputs(&self, row: &[f64]) -> Vec<f64> {
        self.outcome_cols.iter().map(|&c| row[c]).collect()
    }

    /// Noise-free outcome signals `(f(v), f(v) + g(v))`; on the logit scale for
    /// binary outcomes.
    pub fn mean_potential_outcomes(&self, row: &[f64]) -> (f64, f64) {
        let v = self.outcome_inputs(row);
        let f = self.base.eval(&v);
        (f, f + self.effect.eval(&v))
    }

    /// Potential outcomes of a row given its noise draw and (binary only) its uniform.
    pub fn potential_outcomes(&self, row: &[f64], noise: f64, uniform: f64) -> (f64, f64) {
        let (m0, m1) = self.mean_potential_outcomes(row);
        match self.outcome_type {
            OutcomeType::Continuous => (m0 + noise, m1 + noise),
            OutcomeType::Binary => (
                f64::from(uniform < sigmoid(m0 + noise)),
                f64::from(uniform < sigmoid(m1 + noise)),
            ),
        }
    }
}

/// JSON sidecar written next to a generated CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSidecar {
    pub schema_version: u32,
    pub spec: SyntheticSpec,
    pub d: usize,
    pub factor_indices: FactorIndexSets,
    pub realized_treated_fraction: f64,
    pub logit_offset: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub truth: SyntheticTruth,
    /// Per-unit outcome noise shared by both arms.
    pub noise: Vec<f64>,
    /// Per-unit uniforms coupling binary potential outcomes.
    pub outcome_uniforms: Vec<f64>,
}

impl SyntheticData {
    pub fn sidecar(&self, spec: &SyntheticSpec) -> SyntheticSidecar {
        let ds = &self.dataset;
        SyntheticSidecar {
            schema_version: crate::SCHEMA_VERSION,
            spec: spec.clone(),
            d: ds.d(),
            factor_indices: self.truth.factors.clone(),
            realized_treated_fraction: ds.n_treated() as f64 / ds.n() as f64,
            logit_offset: self.truth.logit_offset,
        }
    }
}

const TREATED_FRACTION_TOL: f64 = 0.02;

fn treated_fraction(scores: &[f64], uniforms: &[f64], offset: f64) -> f64 {
    let k = scores
        .iter()
        .zip(uniforms)
        .filter(|(s, u)| **u < sigmoid(**s + offset))
        .count();
    k as f64 / scores.len() as f64
}

fn bisect_offset(scores: &[f64], uniforms: &[f64], target: f64) -> Result<f64> {
    let (mut lo, mut hi) = (-50.0_f64, 50.0_f64);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        let frac = treated_fraction(scores, uniforms, mid);
        if (frac - target).abs() <= TREATED_FRACTION_TOL {
            return Ok(mid);
        }
        if frac < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Convergence(format!(
        "could not reach treated fraction {target} within {TREATED_FRACTION_TOL} after 100 bisection steps"
    )))
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (mg, md) = (spec.m_gamma, spec.m_delta);
    let d = spec.d();
    let n = spec.n;

    let factors = FactorIndexSets {
        gamma: (0..mg).collect(),
        delta: (mg..mg + md).collect(),
        upsilon: (mg + md..d).collect(),
    };

    let latent: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
    let x = Tensor2D::from_vec(n, d, latent)?;

    let treatment_cols: Vec<usize> = factors
        .gamma
        .iter()
        .chain(&factors.delta)
        .copied()
        .collect();
    let w_sd = spec.selection_strength / (treatment_cols.len().max(1) as f64).sqrt();
    let treatment_weights: Vec<f64> = treatment_cols
        .iter()
        .map(|_| rng.sample::<f64, _>(StandardNormal) * w_sd)
        .collect();

    let outcome_cols: Vec<usize> = factors
        .delta
        .iter()
        .chain(&factors.upsilon)
        .copied()
        .collect();
    let p = outcome_cols.len();
    let base = Poly::draw(p, spec.outcome_form, 1.0, &mut rng);
    let effect = Poly::draw(p, spec.outcome_form, spec.effect_scale, &mut rng);

    let treat_uniforms: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let noise: Vec<f64> = (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * spec.noise_std)
        .collect();
    let outcome_uniforms: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();

    let mut truth = SyntheticTruth {
        factors,
        treatment_cols,
        treatment_weights,
        logit_offset: 0.0,
        outcome_cols,
        base,
        effect,
        outcome_type: spec.outcome_type,
    };

    let scores: Vec<f64> = (0..n).map(|i| truth.treatment_score(x.row(i))).collect();
    truth.logit_offset = bisect_offset(&scores, &treat_uniforms, spec.target_treated_fraction)?;

    let mut t = Vec::with_capacity(n);
    let mut e = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut y0 = Vec::with_capacity(n);
    let mut y1 = Vec::with_capacity(n);
    for i in 0..n {
        let prop = sigmoid(scores[i] + truth.logit_offset);
        let ti = u8::from(treat_uniforms[i] < prop);
        let (a, b) = truth.potential_outcomes(x.row(i), noise[i], outcome_uniforms[i]);
        t.push(ti);
        e.push(prop);
        y0.push(a);
        y1.push(b);
        y.push(if ti == 1 { b } else { a });
    }

    let mut dataset = Dataset::new(x, t, y, Some((y0, y1)), spec.outcome_type)?;
    dataset.propensity = Some(e);
    Ok(SyntheticData {
        dataset,
        truth,
        noise,
        outcome_uniforms,
    })
}
