//! Effect-estimation accuracy, uplift curves and policy diagnostics.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FactorIndexSets};
use crate::error::{Error, Result};
use crate::model::{validate_binary, ModelParams};

fn true_effects<'a>(tau_hat: &[f64], ds: &'a Dataset) -> Result<(&'a [f64], &'a [f64])> {
    let (y0, y1) = ds.potential_outcomes()?;
    if tau_hat.len() != y0.len() {
        return Err(Error::Dimension(format!(
            "{} effect estimates for {} rows",
            tau_hat.len(),
            y0.len()
        )));
    }
    if tau_hat.is_empty() {
        return Err(Error::Validation("no rows to evaluate".into()));
    }
    Ok((y0, y1))
}

/// `√((1/n) Σ (τ̂ − τ)²)` against the dataset's true effects.
pub fn pehe(tau_hat: &[f64], ds: &Dataset) -> Result<f64> {
    let (y0, y1) = true_effects(tau_hat, ds)?;
    let sse: f64 = tau_hat
        .iter()
        .zip(y0.iter().zip(y1))
        .map(|(th, (a, b))| (th - (b - a)).powi(2))
        .sum();
    Ok((sse / tau_hat.len() as f64).sqrt())
}

/// `|mean(τ) − mean(τ̂)|`
pub fn ate_error(tau_hat: &[f64], ds: &Dataset) -> Result<f64> {
    let (y0, y1) = true_effects(tau_hat, ds)?;
    let n = tau_hat.len() as f64;
    let ate: f64 = y1.iter().zip(y0).map(|(b, a)| b - a).sum::<f64>() / n;
    let ate_hat: f64 = tau_hat.iter().sum::<f64>() / n;
    Ok((ate - ate_hat).abs())
}

/// Integration grid for [`auuc`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AuucGrid {
    /// `k = i/n` for `i = 1..=n`, `dk = 1/n`.
    #[default]
    PerSample,
    /// `k = 0.1, 0.2, …, 1.0`, `dk = 0.1`.
    Deciles,
}

/// Value of the uplift curve at one `k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuucAtK {
    pub value: f64,
    /// One treatment group is absent from the prefix; its rate was taken as 0.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpliftCurve {
    pub k_grid: Vec<f64>,
    pub auuc_at_k: Vec<f64>,
    pub auuc_total: f64,
    /// `auuc_total / AUUC_π(1)`; `None` when `AUUC_π(1) = 0`.
    pub auuc_normalized: Option<f64>,
    /// At least one grid point had a prefix missing a treatment group.
    pub degenerate_prefix: bool,
}

impl UpliftCurve {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["k", "auuc_at_k"])?;
        for (k, v) in self.k_grid.iter().zip(&self.auuc_at_k) {
            w.write_record([k.to_string(), v.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Row order by descending score; ties keep the original order.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

fn check_inputs(scores: &[f64], t: &[u8], y: &[f64]) -> Result<()> {
    if scores.len() != t.len() || t.len() != y.len() {
        return Err(Error::Dimension(format!(
            "{} scores, {} treatments, {} outcomes",
            scores.len(),
            t.len(),
            y.len()
        )));
    }
    validate_binary(t)?;
    if let Some(v) = scores.iter().chain(y).find(|v| !v.is_finite()) {
        return Err(Error::Validation(format!(
            "non-finite score or outcome {v}"
        )));
    }
    let treated = t.iter().filter(|&&v| v == 1).count();
    if treated == 0 || treated == t.len() {
        return Err(Error::Validation(
            "uplift evaluation needs both treated and control rows".into(),
        ));
    }
    Ok(())
}

/// `⌈k·n⌉`, with `k·n` snapped to the nearest integer when within rounding error.
fn prefix_len(k: f64, n: usize) -> usize {
    let c = k * n as f64;
    let r = c.round();
    let len = if (c - r).abs() < 1e-9 { r } else { c.ceil() };
    (len as usize).clamp(1, n)
}

fn check_k(k: f64) -> Result<()> {
    if !(k > 0.0 && k <= 1.0) {
        return Err(Error::Validation(format!("k must lie in (0, 1], got {k}")));
    }
    Ok(())
}

/// Running sums over the ranked rows: outcome and count per treatment group.
#[derive(Default, Clone, Copy)]
struct Tally {
    r1: f64,
    n1: usize,
    r0: f64,
    n0: usize,
}

impl Tally {
    fn push(&mut self, t: u8, y: f64) {
        if t == 1 {
            self.r1 += y;
            self.n1 += 1;
        } else {
            self.r0 += y;
            self.n0 += 1;
        }
    }

    /// `(R¹/N¹ − R⁰/N⁰)(N¹ + N⁰)`
    fn value(&self) -> AuucAtK {
        let rate = |r: f64, n: usize| if n == 0 { 0.0 } else { r / n as f64 };
        AuucAtK {
            value: (rate(self.r1, self.n1) - rate(self.r0, self.n0)) * (self.n1 + self.n0) as f64,
            degenerate: self.n1 == 0 || self.n0 == 0,
        }
    }
}

/// Uplift of the top `⌈k·n⌉` rows ranked by descending score. Outcomes may be
/// binary or real-valued; `R` is the sum of outcomes in each group.
pub fn auuc_at_k(scores: &[f64], t: &[u8], y: &[f64], k: f64) -> Result<AuucAtK> {
    check_k(k)?;
    check_inputs(scores, t, y)?;
    let order = ranking(scores);
    let mut tally = Tally::default();
    for &i in order.iter().take(prefix_len(k, scores.len())) {
        tally.push(t[i], y[i]);
    }
    Ok(tally.value())
}

/// Uplift curve over `grid` and its Riemann-sum area.
pub fn auuc(scores: &[f64], t: &[u8], y: &[f64], grid: AuucGrid) -> Result<UpliftCurve> {
    check_inputs(scores, t, y)?;
    let n = scores.len();
    let order = ranking(scores);
    let mut running = Vec::with_capacity(n);
    let mut tally = Tally::default();
    for &i in &order {
        tally.push(t[i], y[i]);
        running.push(tally.value());
    }
    let (k_grid, dk): (Vec<f64>, f64) = match grid {
        AuucGrid::PerSample => (
            (1..=n).map(|i| i as f64 / n as f64).collect(),
            1.0 / n as f64,
        ),
        AuucGrid::Deciles => ((1..=10).map(|i| i as f64 / 10.0).collect(), 0.1),
    };
    let mut values = Vec::with_capacity(k_grid.len());
    let mut degenerate = false;
    for (idx, &k) in k_grid.iter().enumerate() {
        let len = match grid {
            AuucGrid::PerSample => idx + 1,
            AuucGrid::Deciles => prefix_len(k, n),
        };
        let v = running[len - 1];
        degenerate |= v.degenerate;
        values.push(v.value);
    }
    let total: f64 = values.iter().map(|v| v * dk).sum();
    let full = running[n - 1].value;
    let normalized = if full != 0.0 {
        Some(total / full)
    } else {
        log::warn!("AUUC at k = 1 is zero; the normalized value is undefined");
        None
    };
    Ok(UpliftCurve {
        k_grid,
        auuc_at_k: values,
        auuc_total: total,
        auuc_normalized: normalized,
        degenerate_prefix: degenerate,
    })
}

fn selection_mask(n: usize, selected: &[usize]) -> Result<Vec<bool>> {
    let mut mask = vec![false; n];
    for &i in selected {
        if i >= n {
            return Err(Error::Validation(format!(
                "selected index {i} out of range for {n} rows"
            )));
        }
        if std::mem::replace(&mut mask[i], true) {
            return Err(Error::Validation(format!("index {i} selected twice")));
        }
    }
    Ok(mask)
}

/// `Σ_{i∈S} y1_i + Σ_{i∉S} y0_i` for real-valued potential outcomes.
pub(crate) fn policy_sum(ds: &Dataset, selected: &[usize]) -> Result<f64> {
    let (y0, y1) = ds.potential_outcomes()?;
    let mask = selection_mask(ds.n(), selected)?;
    Ok(mask
        .iter()
        .zip(y0.iter().zip(y1))
        .map(|(&s, (a, b))| if s { *b } else { *a })
        .sum())
}

/// Number of positive outcomes when `selected` is treated and everyone else is not.
pub fn dlu(ds: &Dataset, selected: &[usize]) -> Result<u64> {
    let (y0, y1) = ds.potential_outcomes()?;
    if let Some(v) = y0.iter().chain(y1).find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Validation(format!(
            "DLU needs binary potential outcomes, found {v}"
        )));
    }
    Ok(policy_sum(ds, selected)? as u64)
}

/// Row `h` gives the share of head `h`'s contribution mass that falls on each
/// true factor block (Γ, Δ, Υ). Rows sum to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisentanglementReport {
    pub heads: [String; 3],
    pub blocks: [String; 3],
    pub attribution: [[f64; 3]; 3],
}

impl DisentanglementReport {
    /// Index of the block with the largest attribution for head `h`.
    pub fn dominant_block(&self, h: usize) -> usize {
        let row = &self.attribution[h];
        (0..3).fold(0, |best, j| if row[j] > row[best] { j } else { best })
    }
}

pub fn disentanglement_report(
    params: &ModelParams,
    sets: &FactorIndexSets,
) -> Result<DisentanglementReport> {
    let w = params.contribution_vectors()?;
    let blocks = sets.blocks();
    let d = params.config.input_dim;
    if let Some(&j) = blocks.iter().flat_map(|b| b.iter()).find(|&&j| j >= d) {
        return Err(Error::Dimension(format!(
            "factor index {j} exceeds input dimension {d}"
        )));
    }
    let mut attribution = [[0.0; 3]; 3];
    for (h, wh) in w.iter().enumerate() {
        let mass: Vec<f64> = blocks
            .iter()
            .map(|b| b.iter().map(|&j| wh[j]).sum())
            .collect();
        let total: f64 = mass.iter().sum();
        for (b, m) in mass.iter().enumerate() {
            attribution[h][b] = if total > 0.0 { m / total } else { 1.0 / 3.0 };
        }
    }
    let names = || {
        [
            "gamma".to_string(),
            "delta".to_string(),
            "upsilon".to_string(),
        ]
    };
    Ok(DisentanglementReport {
        heads: names(),
        blocks: names(),
        attribution,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::OutcomeType;
    use crate::numcore::Tensor2D;

    fn ds_with_effects(tau: &[f64]) -> Dataset {
        let n = tau.len();
        let y0 = vec![0.0; n];
        let y1 = tau.to_vec();
        let t = (0..n).map(|i| (i % 2) as u8).collect::<Vec<_>>();
        let y = t
            .iter()
            .zip(y0.iter().zip(&y1))
            .map(|(&ti, (a, b))| if ti == 1 { *b } else { *a })
            .collect();
        Dataset::new(
            Tensor2D::zeros(n, 1),
            t,
            y,
            Some((y0, y1)),
            OutcomeType::Continuous,
        )
        .unwrap()
    }

    #[test]
    fn pehe_examples() {
        let ds = ds_with_effects(&[0.0, 2.0, 5.0]);
        assert_eq!(pehe(&[0.0, 2.0, 5.0], &ds).unwrap(), 0.0);
        assert!((pehe(&[0.5, 2.5, 5.5], &ds).unwrap() - 0.5).abs() < 1e-12);
        assert!((pehe(&[1.0, 2.0, 3.0], &ds).unwrap() - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn ate_examples() {
        let ds = ds_with_effects(&[0.0, 4.0]);
        assert_eq!(ate_error(&[1.0, 1.0], &ds).unwrap(), 1.0);
        assert_eq!(ate_error(&[4.0, 0.0], &ds).unwrap(), 0.0);
    }

    #[test]
    fn missing_potential_outcomes_is_capability_error() {
        let ds = Dataset::new(
            Tensor2D::zeros(2, 1),
            vec![0, 1],
            vec![0.0, 1.0],
            None,
            OutcomeType::Continuous,
        )
        .unwrap();
        assert!(matches!(pehe(&[0.0, 0.0], &ds), Err(Error::Capability(_))));
        assert!(matches!(
            ate_error(&[0.0, 0.0], &ds),
            Err(Error::Capability(_))
        ));
    }

    #[test]
    fn auuc_at_k_examples() {
        // already in rank order
        let scores = [4.0, 3.0, 2.0, 1.0];
        let t = [1, 0, 1, 0];
        let y = [1.0, 0.0, 0.0, 1.0];
        let half = auuc_at_k(&scores, &t, &y, 0.5).unwrap();
        assert_eq!(half.value, 2.0);
        assert!(!half.degenerate);
        assert_eq!(auuc_at_k(&scores, &t, &y, 1.0).unwrap().value, 0.0);
        let first = auuc_at_k(&scores, &t, &y, 0.25).unwrap();
        assert!(first.degenerate);
        assert_eq!(first.value, 1.0);
    }

    #[test]
    fn auuc_at_k_rejects_bad_k() {
        let (s, t, y) = ([1.0, 0.0], [1, 0], [1.0, 0.0]);
        assert!(auuc_at_k(&s, &t, &y, 0.0).is_err());
        assert!(auuc_at_k(&s, &t, &y, 1.2).is_err());
        assert!(auuc_at_k(&s, &t, &y, f64::NAN).is_err());
    }

    #[test]
    fn equal_rates_give_zero_everywhere() {
        let scores = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4];
        let t = [1, 0, 1, 0, 1, 0];
        let y = [1.0, 1.0, 0.0, 0.0, 1.0, 1.0];
        for k in [2.0 / 6.0, 4.0 / 6.0, 1.0] {
            assert_eq!(auuc_at_k(&scores, &t, &y, k).unwrap().value, 0.0);
        }
    }

    #[test]
    fn constant_scores_follow_index_order() {
        let scores = [0.0; 6];
        let t = [0, 1, 1, 0, 1, 0];
        let y = [1.0, 1.0, 0.0, 0.0, 1.0, 1.0];
        let curve = auuc(&scores, &t, &y, AuucGrid::PerSample).unwrap();
        // direct loop oracle
        let mut total = 0.0;
        for len in 1..=6 {
            let (mut r1, mut n1, mut r0, mut n0) = (0.0, 0.0, 0.0, 0.0);
            for i in 0..len {
                if t[i] == 1 {
                    r1 += y[i];
                    n1 += 1.0;
                } else {
                    r0 += y[i];
                    n0 += 1.0;
                }
            }
            let a = if n1 > 0.0 { r1 / n1 } else { 0.0 };
            let b = if n0 > 0.0 { r0 / n0 } else { 0.0 };
            total += (a - b) * (n1 + n0) / 6.0;
        }
        assert!((curve.auuc_total - total).abs() < 1e-12);
        assert_eq!(curve.k_grid.len(), 6);
        assert_eq!(*curve.k_grid.last().unwrap(), 1.0);
        assert!(curve.degenerate_prefix);
    }

    #[test]
    fn curve_normalization() {
        let scores = [0.9, 0.1, 0.8, 0.2];
        let t = [1, 0, 0, 1];
        let y = [1.0, 0.0, 0.0, 0.0];
        let c = auuc(&scores, &t, &y, AuucGrid::PerSample).unwrap();
        let full = auuc_at_k(&scores, &t, &y, 1.0).unwrap().value;
        assert_eq!(c.auuc_normalized, Some(c.auuc_total / full));
        let deciles = auuc(&scores, &t, &y, AuucGrid::Deciles).unwrap();
        assert_eq!(deciles.k_grid.len(), 10);
        let flat = auuc(&scores, &t, &[0.0; 4], AuucGrid::PerSample).unwrap();
        assert_eq!(flat.auuc_normalized, None);
    }

    #[test]
    fn curve_csv_layout() {
        let c = auuc(
            &[0.3, 0.2, 0.1],
            &[1, 0, 1],
            &[1.0, 0.0, 0.0],
            AuucGrid::PerSample,
        )
        .unwrap();
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(text.lines().next().unwrap(), "k,auuc_at_k");
    }

    #[test]
    fn single_group_population_is_rejected() {
        assert!(auuc(&[0.1, 0.2], &[1, 1], &[0.0, 1.0], AuucGrid::PerSample).is_err());
    }

    fn binary_ds() -> Dataset {
        let y0 = vec![0.0, 1.0, 0.0, 1.0];
        let y1 = vec![1.0, 1.0, 0.0, 0.0];
        let t = vec![1, 0, 0, 1];
        let y = vec![1.0, 1.0, 0.0, 0.0];
        Dataset::new(
            Tensor2D::zeros(4, 1),
            t,
            y,
            Some((y0, y1)),
            OutcomeType::Binary,
        )
        .unwrap()
    }

    #[test]
    fn dlu_examples() {
        let ds = binary_ds();
        assert_eq!(dlu(&ds, &[]).unwrap(), 2);
        assert_eq!(dlu(&ds, &[0, 1, 2, 3]).unwrap(), 2);
        assert_eq!(dlu(&ds, &[0]).unwrap(), 3);
        assert!(dlu(&ds, &[4]).is_err());
        assert!(dlu(&ds, &[1, 1]).is_err());
    }

    #[test]
    fn dlu_rejects_continuous_outcomes() {
        let ds = ds_with_effects(&[0.5, 1.0]);
        assert!(matches!(dlu(&ds, &[]), Err(Error::Validation(_))));
    }

    #[test]
    fn attribution_rows_sum_to_one() {
        use crate::model::ModelConfig;
        let p = ModelParams::init(ModelConfig::new(6)).unwrap();
        let sets = FactorIndexSets {
            gamma: vec![0, 1],
            delta: vec![2, 3],
            upsilon: vec![4, 5],
        };
        let r = disentanglement_report(&p, &sets).unwrap();
        for row in r.attribution {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_heads_give_uniform_attribution() {
        use crate::model::ModelConfig;
        let mut cfg = ModelConfig::new(6);
        cfg.shared_layers = vec![];
        let mut p = ModelParams::init(cfg).unwrap();
        for h in [&mut p.gamma_head, &mut p.delta_head, &mut p.upsilon_head] {
            h.layers[0].weight = Tensor2D::identity(6);
        }
        let sets = FactorIndexSets {
            gamma: vec![0, 1],
            delta: vec![2, 3],
            upsilon: vec![4, 5],
        };
        let r = disentanglement_report(&p, &sets).unwrap();
        for row in r.attribution {
            for v in row {
                assert!((v - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }
}
