//! Alternating optimization: the variational nets are fitted by likelihood
//! ascent on detached factors, then the main model takes one step on the
//! composite objective with the variational nets frozen.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{largest_remainder_sizes, split_dataset, Dataset};
use crate::error::{Error, Result};
use crate::losses::{
    ipm_wasserstein, loss_club, loss_pred, loss_reg, loss_rlo, loss_treat, q_loglik_with_grad,
    total_loss, Batch, LossBreakdown, LossWeights, MiMode, SinkhornConfig,
};
use crate::metrics::{ate_error, pehe};
use crate::model::{split_by_treatment, ModelConfig, ModelParams, QGrads};
use crate::numcore::{AdamConfig, AdamState, DenseLayer, LayerGrad, Tensor2D};
use crate::SCHEMA_VERSION;

/// Hidden widths of each block; input and output widths follow from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    /// Factor dimension; `None` uses the input dimension.
    pub factor_dim: Option<usize>,
    pub shared_layers: Vec<usize>,
    pub head_layers: Vec<usize>,
    pub classifier_layers: Vec<usize>,
    pub outcome_layers: Vec<usize>,
    pub q_layers: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        let c = ModelConfig::new(1);
        Self {
            factor_dim: None,
            shared_layers: c.shared_layers,
            head_layers: c.head_layers,
            classifier_layers: c.classifier_layers,
            outcome_layers: c.outcome_layers,
            q_layers: c.q_layers,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub batch_size: usize,
    pub epochs: usize,
    pub q_steps_per_main_step: usize,
    pub learning_rate_main: f64,
    pub learning_rate_q: f64,
    /// Epochs without improvement of the validation prediction loss before
    /// stopping; 0 disables early stopping.
    pub early_stop_patience: usize,
    pub mode: MiMode,
    pub sfd_enabled: bool,
    pub seed: u64,
    /// Share of rows held out for validation when [`fit`] splits internally.
    pub validation_fraction: f64,
    pub sinkhorn: SinkhornConfig,
    pub architecture: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            batch_size: 128,
            epochs: 100,
            q_steps_per_main_step: 5,
            learning_rate_main: 1e-3,
            learning_rate_q: 1e-2,
            early_stop_patience: 10,
            mode: MiMode::Mim,
            sfd_enabled: true,
            seed: 0,
            validation_fraction: 0.3,
            sinkhorn: SinkhornConfig::default(),
            architecture: Architecture::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.sinkhorn.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Validation("batch_size must be at least 2".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Validation("epochs must be at least 1".into()));
        }
        for (name, lr) in [
            ("learning_rate_main", self.learning_rate_main),
            ("learning_rate_q", self.learning_rate_q),
        ] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Validation(format!(
                    "{name} must be positive, got {lr}"
                )));
            }
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Validation(format!(
                "validation_fraction must lie in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        if self.architecture.factor_dim == Some(0) {
            return Err(Error::Validation("factor_dim must be at least 1".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, ds: &Dataset) -> ModelConfig {
        let a = &self.architecture;
        ModelConfig {
            input_dim: ds.d(),
            factor_dim: a.factor_dim.unwrap_or(ds.d()),
            shared_layers: a.shared_layers.clone(),
            head_layers: a.head_layers.clone(),
            classifier_layers: a.classifier_layers.clone(),
            outcome_layers: a.outcome_layers.clone(),
            q_layers: a.q_layers.clone(),
            sfd_enabled: self.sfd_enabled,
            outcome_type: ds.outcome_type,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Row-weighted mean of the minibatch values.
    pub train: LossBreakdown,
    pub validation: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub schema_version: u32,
    pub seed: u64,
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub n_train: usize,
    pub n_validation: usize,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
    pub best_validation_pred: f64,
    pub final_epoch: usize,
    pub stopped_early: bool,
    /// Not serialized, so that reports of identical runs are byte-identical.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

/// Optimizer state for one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub params: ModelParams,
    config: TrainConfig,
    main_opt: AdamState,
    q_opts: [AdamState; 3],
}

fn buffer_sizes<'a>(layers: impl IntoIterator<Item = &'a DenseLayer>) -> Vec<usize> {
    layers
        .into_iter()
        .flat_map(|l| [l.weight.data().len(), l.bias.len()])
        .collect()
}

fn adam_apply(
    opt: &mut AdamState,
    layers: Vec<&mut DenseLayer>,
    grads: &[&LayerGrad],
    sign: f64,
) -> Result<()> {
    let mut bufs: Vec<&mut [f64]> = Vec::with_capacity(2 * layers.len());
    for l in layers {
        let DenseLayer { weight, bias, .. } = l;
        bufs.push(weight.data_mut());
        bufs.push(bias.as_mut_slice());
    }
    let owned: Vec<Vec<f64>>;
    let gs: Vec<&[f64]> = if sign == 1.0 {
        grads
            .iter()
            .flat_map(|g| [g.weight.data(), g.bias.as_slice()])
            .collect()
    } else {
        owned = grads
            .iter()
            .flat_map(|g| [g.weight.data(), g.bias.as_slice()])
            .map(|s| s.iter().map(|v| sign * v).collect())
            .collect();
        owned.iter().map(Vec::as_slice).collect()
    };
    opt.step(&mut bufs, &gs)
}

fn q_grads_in_order(g: &QGrads) -> Vec<&LayerGrad> {
    g.trunk
        .iter()
        .chain([&g.mean_head, &g.logvar_head])
        .collect()
}

impl Trainer {
    pub fn new(params: ModelParams, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let main_opt = AdamState::new(
            AdamConfig {
                learning_rate: config.learning_rate_main,
                ..AdamConfig::default()
            },
            &buffer_sizes(params.main_layers()),
        );
        let q_cfg = AdamConfig {
            learning_rate: config.learning_rate_q,
            ..AdamConfig::default()
        };
        let [a, b, c] = params.q_nets();
        let q_opts = [
            AdamState::new(q_cfg, &buffer_sizes(a.layers())),
            AdamState::new(q_cfg, &buffer_sizes(b.layers())),
            AdamState::new(q_cfg, &buffer_sizes(c.layers())),
        ];
        Ok(Self {
            params,
            config,
            main_opt,
            q_opts,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Likelihood ascent for the three variational nets on factors of `x`
    /// computed with the current (untouched) main model. Returns the last
    /// log-likelihood of each net, or `None` when no step was taken.
    pub fn q_phase(&mut self, x: &Tensor2D) -> Result<Option<[f64; 3]>> {
        if self.config.q_steps_per_main_step == 0 {
            return Ok(None);
        }
        let f = self.params.encode(x)?;
        let pairs = [
            (&f.gamma, &f.delta),
            (&f.delta, &f.upsilon),
            (&f.upsilon, &f.gamma),
        ];
        let mut last = [0.0; 3];
        for (k, (a, b)) in pairs.into_iter().enumerate() {
            for _ in 0..self.config.q_steps_per_main_step {
                let q = self.params.q_nets()[k];
                let (ll, g) = q_loglik_with_grad(q, a, b)?;
                last[k] = ll;
                let q = &mut self.params.q_nets_mut()[k];
                adam_apply(
                    &mut self.q_opts[k],
                    q.layers_mut(),
                    &q_grads_in_order(&g),
                    -1.0,
                )?;
            }
        }
        Ok(Some(last))
    }

    /// One optimizer step of the main model on the composite objective.
    pub fn main_phase(&mut self, batch: Batch<'_>) -> Result<LossBreakdown> {
        let out = total_loss(
            &self.params,
            batch,
            &self.config.weights,
            self.config.mode,
            &self.config.sinkhorn,
        )?;
        let grads: Vec<&LayerGrad> = out.grads.layers.iter().collect();
        adam_apply(
            &mut self.main_opt,
            self.params.main_layers_mut(),
            &grads,
            1.0,
        )?;
        Ok(out.breakdown)
    }

    /// Both phases on one minibatch.
    pub fn step(&mut self, batch: Batch<'_>) -> Result<LossBreakdown> {
        if self.config.mode == MiMode::Mim {
            self.q_phase(batch.x)?;
        }
        self.main_phase(batch)
    }
}

/// Component values without gradients. Components with zero weight (or an
/// inactive mode) are reported as 0, matching [`total_loss`].
pub fn evaluate_losses(
    params: &ModelParams,
    ds: &Dataset,
    weights: &LossWeights,
    mode: MiMode,
    sinkhorn: &SinkhornConfig,
) -> Result<LossBreakdown> {
    let f = params.encode(&ds.x)?;
    let mut b = LossBreakdown {
        pred: loss_pred(
            &params.predict_outcome(&f, &ds.t)?,
            &ds.y,
            params.config.outcome_type,
        )?,
        ..LossBreakdown::default()
    };
    if weights.alpha > 0.0 {
        b.treat = loss_treat(&params.predict_propensity(&f)?, &ds.t)?;
    }
    if weights.beta > 0.0 {
        let (treated, control) = split_by_treatment(&ds.t);
        b.disc = ipm_wasserstein(
            &f.upsilon.select_rows(&treated),
            &f.upsilon.select_rows(&control),
            sinkhorn,
        )?;
    }
    if weights.gamma > 0.0 {
        b.mi = match mode {
            MiMode::Mim if ds.n() >= 2 => loss_club(params, &f)?,
            MiMode::Rlo => loss_rlo(params)?,
            _ => 0.0,
        };
    }
    if weights.lambda > 0.0 {
        b.reg = loss_reg(params);
    }
    let mi_weight = if mode == MiMode::None {
        0.0
    } else {
        weights.gamma
    };
    b.total = b.pred
        + weights.alpha * b.treat
        + weights.beta * b.disc
        + mi_weight * b.mi
        + weights.lambda * b.reg;
    Ok(b)
}

fn require_both_groups(ds: &Dataset, what: &str) -> Result<()> {
    let n1 = ds.n_treated();
    if n1 == 0 || n1 == ds.n() {
        return Err(Error::Validation(format!(
            "{what} has a single treatment group ({n1} of {} treated)",
            ds.n()
        )));
    }
    Ok(())
}

fn as_divergence(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Numeric(m) => Error::Divergence(format!("epoch {epoch}, batch {batch}: {m}")),
        other => other,
    }
}

/// Minibatch index lists for one epoch. A trailing batch of a single row is
/// merged into the previous one.
fn minibatches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().expect("non-empty") = &order[start..];
    }
    out
}

fn add_scaled(acc: &mut LossBreakdown, b: &LossBreakdown, w: f64) {
    acc.total += w * b.total;
    acc.pred += w * b.pred;
    acc.treat += w * b.treat;
    acc.disc += w * b.disc;
    acc.mi += w * b.mi;
    acc.reg += w * b.reg;
}

/// Holds out `validation_fraction` of the rows (seeded) and trains on the rest.
pub fn fit(ds: &Dataset, config: &TrainConfig) -> Result<(ModelParams, TrainReport)> {
    config.validate()?;
    ds.validate()?;
    require_both_groups(ds, "dataset")?;
    let sizes = largest_remainder_sizes(
        ds.n(),
        &[1.0 - config.validation_fraction, config.validation_fraction],
    )?;
    if sizes[1] == 0 {
        return Err(Error::Validation(format!(
            "{} rows leave no validation rows",
            ds.n()
        )));
    }
    let mut perm: Vec<usize> = (0..ds.n()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    perm.shuffle(&mut rng);
    let train = ds.select(&perm[..sizes[0]]);
    let validation = ds.select(&perm[sizes[0]..]);
    fit_with_validation(&train, &validation, config)
}

/// Trains on `train`, monitoring the prediction loss on `validation`, and
/// returns the parameters of the best validation epoch.
pub fn fit_with_validation(
    train: &Dataset,
    validation: &Dataset,
    config: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    let started = Instant::now();
    config.validate()?;
    train.validate()?;
    validation.validate()?;
    require_both_groups(train, "training set")?;
    if train.n() < config.batch_size {
        return Err(Error::Validation(format!(
            "training set has {} rows, fewer than batch_size {}",
            train.n(),
            config.batch_size
        )));
    }
    if validation.n() == 0 {
        return Err(Error::Validation("validation set is empty".into()));
    }
    if validation.d() != train.d() || validation.outcome_type != train.outcome_type {
        return Err(Error::Validation(
            "training and validation sets differ in layout".into(),
        ));
    }
    let model_config = config.model_config(train);
    let mut trainer = Trainer::new(ModelParams::init(model_config.clone())?, config.clone())?;
    let mut shuffle = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle.set_stream(1);

    let mut order: Vec<usize> = (0..train.n()).collect();
    let mut records = Vec::with_capacity(config.epochs);
    let mut best = (f64::INFINITY, 0usize, trainer.params.clone());
    let mut stale = 0usize;
    let mut stopped_early = false;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle);
        let mut acc = LossBreakdown::default();
        for (bi, idx) in minibatches(&order, config.batch_size)
            .into_iter()
            .enumerate()
        {
            let batch = train.select(idx);
            let b = trainer
                .step(Batch::of(&batch))
                .map_err(|e| as_divergence(e, epoch, bi))?;
            add_scaled(&mut acc, &b, idx.len() as f64 / train.n() as f64);
        }
        let val = evaluate_losses(
            &trainer.params,
            validation,
            &config.weights,
            config.mode,
            &config.sinkhorn,
        )
        .map_err(|e| as_divergence(e, epoch, usize::MAX))?;
        if !val.pred.is_finite() {
            return Err(Error::Divergence(format!(
                "epoch {epoch}: validation prediction loss is {}",
                val.pred
            )));
        }
        log::debug!(
            "epoch {epoch}: train total {:.5} pred {:.5}, validation pred {:.5}",
            acc.total,
            acc.pred,
            val.pred
        );
        records.push(EpochRecord {
            epoch,
            train: acc,
            validation: val,
        });
        if val.pred < best.0 {
            best = (val.pred, epoch, trainer.params.clone());
            stale = 0;
        } else {
            stale += 1;
            if config.early_stop_patience > 0 && stale >= config.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
    }
    let final_epoch = records.len();
    let (best_pred, best_epoch, params) = best;
    let report = TrainReport {
        schema_version: SCHEMA_VERSION,
        seed: config.seed,
        config: config.clone(),
        model: model_config,
        n_train: train.n(),
        n_validation: validation.n(),
        epochs: records,
        best_epoch,
        best_validation_pred: best_pred,
        final_epoch,
        stopped_early,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    log::info!(
        "trained {final_epoch} epochs in {:.1}s, best epoch {best_epoch}",
        report.wall_clock_seconds
    );
    Ok((params, report))
}

/// Ablation variants of the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    WoSfd,
    WoMim,
    WoBoth,
    Rlo,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::WoSfd,
        Variant::WoMim,
        Variant::WoBoth,
        Variant::Rlo,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WoSfd => "wo_sfd",
            Variant::WoMim => "wo_mim",
            Variant::WoBoth => "wo_both",
            Variant::Rlo => "rlo",
        }
    }

    pub fn configure(self, base: &TrainConfig) -> TrainConfig {
        let (mode, sfd) = match self {
            Variant::Full => (MiMode::Mim, true),
            Variant::WoSfd => (MiMode::Mim, false),
            Variant::WoMim => (MiMode::None, true),
            Variant::WoBoth => (MiMode::None, false),
            Variant::Rlo => (MiMode::Rlo, true),
        };
        TrainConfig {
            mode,
            sfd_enabled: sfd,
            ..base.clone()
        }
    }
}

/// Proportions of the train/validation/test split used by the ablation study.
pub const ABLATION_SPLIT: (f64, f64, f64) = (0.63, 0.27, 0.10);

/// Held-out accuracy of one training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariantScore {
    pub sqrt_pehe: f64,
    pub ate_error: f64,
}

/// Splits `ds` with `seed`, trains `config` (with its seed replaced by `seed`)
/// and scores the test part.
pub fn evaluate_config(ds: &Dataset, config: &TrainConfig, seed: u64) -> Result<VariantScore> {
    let split = split_dataset(ds, ABLATION_SPLIT, seed)?;
    let cfg = TrainConfig {
        seed,
        ..config.clone()
    };
    let (params, _) = fit_with_validation(&split.train, &split.validation, &cfg)?;
    let tau = params.predict_ite(&split.test.x)?;
    Ok(VariantScore {
        sqrt_pehe: pehe(&tau, &split.test)?,
        ate_error: ate_error(&tau, &split.test)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub pehe_mean: f64,
    pub pehe_std: f64,
    pub ate_mean: f64,
    pub ate_std: f64,
    /// Per-seed values, in seed order.
    pub pehe: Vec<f64>,
    pub ate_error: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub schema_version: u32,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant.label())
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["variant", "pehe_mean", "pehe_std", "ate_mean", "ate_std"])?;
        for r in &self.rows {
            w.write_record([
                r.variant.clone(),
                r.pehe_mean.to_string(),
                r.pehe_std.to_string(),
                r.ate_mean.to_string(),
                r.ate_std.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// All five variants over `seeds`.
pub fn run_ablations(ds: &Dataset, base: &TrainConfig, seeds: &[u64]) -> Result<AblationTable> {
    run_variants(ds, base, seeds, &Variant::ALL)
}

/// The listed variants over `seeds`; runs are independent and execute in parallel.
pub fn run_variants(
    ds: &Dataset,
    base: &TrainConfig,
    seeds: &[u64],
    variants: &[Variant],
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Validation("at least one seed is required".into()));
    }
    base.validate()?;
    ds.potential_outcomes()?;
    let jobs: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let scores: Vec<VariantScore> = jobs
        .par_iter()
        .map(|&(v, s)| evaluate_config(ds, &v.configure(base), s))
        .collect::<Result<_>>()?;
    let rows = variants
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let chunk = &scores[k * seeds.len()..(k + 1) * seeds.len()];
            let pehe: Vec<f64> = chunk.iter().map(|s| s.sqrt_pehe).collect();
            let ate: Vec<f64> = chunk.iter().map(|s| s.ate_error).collect();
            let (pehe_mean, pehe_std) = mean_std(&pehe);
            let (ate_mean, ate_std) = mean_std(&ate);
            AblationRow {
                variant: v.label().to_string(),
                pehe_mean,
                pehe_std,
                ate_mean,
                ate_std,
                pehe,
                ate_error: ate,
            }
        })
        .collect();
    Ok(AblationTable {
        schema_version: SCHEMA_VERSION,
        seeds: seeds.to_vec(),
        rows,
    })
}
