//! The disentangled counterfactual network.
//!
//! Covariates pass through a shared bottom stack and three factor-specific
//! heads producing the instrumental (Γ), confounding (Δ) and adjustment (Υ)
//! factors. The treatment classifier sees `concat(Γ, Δ)`; the two outcome
//! heads see `concat(Υ, Δ)`. Three variational conditional-density networks
//! score pairwise dependence between factors.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::OutcomeType;
use crate::error::{Error, Result};
use crate::numcore::{clamp_prob, Activation, DenseLayer, LayerGrad, Mlp, MlpCache, Tensor2D};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};

/// Bounds applied to the predicted log-variance of the variational nets.
pub const LOGVAR_MIN: f64 = -8.0;
pub const LOGVAR_MAX: f64 = 8.0;

/// Architecture of the network. Every width list holds *hidden* widths; the
/// output layer of each block (width `factor_dim` for heads and q-net outputs,
/// width 1 for the classifier and outcome heads) is appended automatically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub factor_dim: usize,
    pub shared_layers: Vec<usize>,
    pub head_layers: Vec<usize>,
    pub classifier_layers: Vec<usize>,
    pub outcome_layers: Vec<usize>,
    pub q_layers: Vec<usize>,
    pub sfd_enabled: bool,
    pub outcome_type: OutcomeType,
    pub seed: u64,
}

impl ModelConfig {
    /// Default architecture with the factor dimension equal to the input dimension.
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            factor_dim: input_dim,
            shared_layers: vec![64, 64],
            head_layers: vec![],
            classifier_layers: vec![32],
            outcome_layers: vec![64, 32],
            q_layers: vec![32],
            sfd_enabled: true,
            outcome_type: OutcomeType::Continuous,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.factor_dim == 0 {
            return Err(Error::Validation(
                "input_dim and factor_dim must be at least 1".into(),
            ));
        }
        let lists = [
            ("shared_layers", &self.shared_layers),
            ("head_layers", &self.head_layers),
            ("classifier_layers", &self.classifier_layers),
            ("outcome_layers", &self.outcome_layers),
            ("q_layers", &self.q_layers),
        ];
        for (name, widths) in lists {
            if widths.contains(&0) {
                return Err(Error::Validation(format!("{name} contains a zero width")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Factor {
    Gamma,
    Delta,
    Upsilon,
}

impl Factor {
    pub const ALL: [Factor; 3] = [Factor::Gamma, Factor::Delta, Factor::Upsilon];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Factor::Gamma => "gamma",
            Factor::Delta => "delta",
            Factor::Upsilon => "upsilon",
        }
    }
}

/// Per-sample latent factors, batched as three `n × m` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorTriple {
    pub gamma: Tensor2D,
    pub delta: Tensor2D,
    pub upsilon: Tensor2D,
}

impl FactorTriple {
    pub fn get(&self, f: Factor) -> &Tensor2D {
        match f {
            Factor::Gamma => &self.gamma,
            Factor::Delta => &self.delta,
            Factor::Upsilon => &self.upsilon,
        }
    }

    pub fn rows(&self) -> usize {
        self.gamma.rows()
    }

    /// `Ω = concat(Γ, Δ)`
    pub fn omega(&self) -> Result<Tensor2D> {
        self.gamma.concat_cols(&self.delta)
    }

    /// `Φ = concat(Υ, Δ)`
    pub fn phi(&self) -> Result<Tensor2D> {
        self.upsilon.concat_cols(&self.delta)
    }

    fn check(&self) -> Result<()> {
        let s = self.gamma.shape();
        if self.delta.shape() != s || self.upsilon.shape() != s {
            return Err(Error::Dimension(format!(
                "factor shapes differ: {:?}, {:?}, {:?}",
                s,
                self.delta.shape(),
                self.upsilon.shape()
            )));
        }
        Ok(())
    }
}

/// Diagonal-Gaussian conditional density `q(b | a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalNet {
    pub trunk: Mlp,
    pub mean_head: DenseLayer,
    pub logvar_head: DenseLayer,
}

/// Forward values of a [`VariationalNet`] kept for the backward pass.
#[derive(Debug, Clone)]
pub struct QForward {
    pub mean: Tensor2D,
    /// Log-variance after clamping.
    pub logvar: Tensor2D,
    trunk: MlpCache,
    /// Raw log-variance before clamping, used to zero gradients outside the bounds.
    logvar_raw: Tensor2D,
}

/// Parameter gradients of one variational net.
#[derive(Debug, Clone)]
pub struct QGrads {
    pub trunk: Vec<LayerGrad>,
    pub mean_head: LayerGrad,
    pub logvar_head: LayerGrad,
}

impl VariationalNet {
    pub fn new<R: rand::Rng + ?Sized>(m: usize, hidden: &[usize], rng: &mut R) -> Self {
        let trunk = Mlp::stack(m, hidden, Activation::Elu, rng);
        let h = trunk.out_dim_or(m);
        Self {
            trunk,
            mean_head: DenseLayer::glorot(h, m, Activation::Identity, rng),
            logvar_head: DenseLayer::glorot(h, m, Activation::Identity, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.trunk
            .layers
            .first()
            .map_or(self.mean_head.in_dim(), DenseLayer::in_dim)
    }

    pub fn layers(&self) -> Vec<&DenseLayer> {
        let mut v: Vec<&DenseLayer> = self.trunk.layers.iter().collect();
        v.push(&self.mean_head);
        v.push(&self.logvar_head);
        v
    }

    pub fn layers_mut(&mut self) -> Vec<&mut DenseLayer> {
        let mut v: Vec<&mut DenseLayer> = self.trunk.layers.iter_mut().collect();
        v.push(&mut self.mean_head);
        v.push(&mut self.logvar_head);
        v
    }

    pub fn forward(&self, a: &Tensor2D) -> Result<QForward> {
        let trunk = self.trunk.forward_cached(a)?;
        let h = trunk.output();
        let mean = crate::numcore::dense_forward(&self.mean_head, h)?;
        let logvar_raw = crate::numcore::dense_forward(&self.logvar_head, h)?;
        let logvar = logvar_raw.map(|s| s.clamp(LOGVAR_MIN, LOGVAR_MAX));
        Ok(QForward {
            mean,
            logvar,
            trunk,
            logvar_raw,
        })
    }

    fn clamp_mask(fwd: &QForward, d_logvar: &Tensor2D) -> Tensor2D {
        let mut g = d_logvar.clone();
        for (v, &raw) in g.data_mut().iter_mut().zip(fwd.logvar_raw.data()) {
            if !(LOGVAR_MIN..=LOGVAR_MAX).contains(&raw) {
                *v = 0.0;
            }
        }
        g
    }

    /// Gradients for the net's parameters, given gradients on (mean, clamped log-variance).
    pub fn backward_params(
        &self,
        fwd: &QForward,
        d_mean: &Tensor2D,
        d_logvar: &Tensor2D,
    ) -> Result<QGrads> {
        let h = fwd.trunk.output();
        let d_logvar = Self::clamp_mask(fwd, d_logvar);
        let (gm, dh_m) = crate::numcore::layer_backward(&self.mean_head, h, &fwd.mean, d_mean)?;
        let (gs, dh_s) =
            crate::numcore::layer_backward(&self.logvar_head, h, &fwd.logvar_raw, &d_logvar)?;
        let mut dh = dh_m;
        dh.add_assign(&dh_s)?;
        let (trunk, _) = self.trunk.backward(&fwd.trunk, &dh)?;
        Ok(QGrads {
            trunk,
            mean_head: gm,
            logvar_head: gs,
        })
    }

    /// Gradient with respect to the input `a`, parameters held constant.
    pub fn backward_input(
        &self,
        fwd: &QForward,
        d_mean: &Tensor2D,
        d_logvar: &Tensor2D,
    ) -> Result<Tensor2D> {
        let d_logvar = Self::clamp_mask(fwd, d_logvar);
        // both heads are identity-activated
        let mut dh = d_mean.matmul_t(&self.mean_head.weight)?;
        dh.add_assign(&d_logvar.matmul_t(&self.logvar_head.weight)?)?;
        self.trunk.backward_input(&fwd.trunk, &dh)
    }
}

/// All trainable weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// Shared bottom; `None` when the factor heads are fully separate stacks.
    pub shared: Option<Mlp>,
    pub gamma_head: Mlp,
    pub delta_head: Mlp,
    pub upsilon_head: Mlp,
    /// Treatment classifier π on `concat(Γ, Δ)`, sigmoid output.
    pub pi: Mlp,
    pub h0: Mlp,
    pub h1: Mlp,
    /// q(Δ | Γ)
    pub q_gd: VariationalNet,
    /// q(Υ | Δ)
    pub q_du: VariationalNet,
    /// q(Γ | Υ)
    pub q_ug: VariationalNet,
}

/// Named groups of main-model layers, in flattening order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Shared,
    Gamma,
    Delta,
    Upsilon,
    Pi,
    H0,
    H1,
}

impl Block {
    pub const ALL: [Block; 7] = [
        Block::Shared,
        Block::Gamma,
        Block::Delta,
        Block::Upsilon,
        Block::Pi,
        Block::H0,
        Block::H1,
    ];

    pub fn head(f: Factor) -> Block {
        match f {
            Factor::Gamma => Block::Gamma,
            Factor::Delta => Block::Delta,
            Factor::Upsilon => Block::Upsilon,
        }
    }
}

/// Gradients for every main-model layer, aligned with [`ModelParams::main_layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct MainGrads {
    pub layers: Vec<LayerGrad>,
    offsets: [usize; 8],
}

impl MainGrads {
    pub fn zeros(params: &ModelParams) -> Self {
        let layers = params
            .main_layers()
            .into_iter()
            .map(LayerGrad::zeros_like)
            .collect();
        Self {
            layers,
            offsets: params.block_offsets(),
        }
    }

    pub fn block_mut(&mut self, b: Block) -> &mut [LayerGrad] {
        let i = b as usize;
        &mut self.layers[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn block(&self, b: Block) -> &[LayerGrad] {
        let i = b as usize;
        &self.layers[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn accumulate(&mut self, b: Block, grads: &[LayerGrad]) -> Result<()> {
        let dst = self.block_mut(b);
        if dst.len() != grads.len() {
            return Err(Error::Dimension(format!(
                "block {b:?} has {} layers, got {} gradients",
                dst.len(),
                grads.len()
            )));
        }
        for (d, g) in dst.iter_mut().zip(grads) {
            d.add_assign(g)?;
        }
        Ok(())
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.layers {
            out.extend_from_slice(g.weight.data());
            out.extend_from_slice(&g.bias);
        }
        out
    }
}

/// Cached activations of [`ModelParams::encode_cached`].
#[derive(Debug, Clone)]
pub struct EncodeCache {
    shared: Option<MlpCache>,
    heads: [MlpCache; 3],
}

impl ModelParams {
    /// Seeded initialization. Main-model layers are drawn first, then the three
    /// variational nets, so the main weights do not depend on the q-net sizes.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.input_dim;
        let m = config.factor_dim;
        let elu = Activation::Elu;

        let (shared, head_in, head_hidden) = if config.sfd_enabled {
            let shared = Mlp::stack(d, &config.shared_layers, elu, &mut rng);
            let out = shared.out_dim_or(d);
            (Some(shared), out, config.head_layers.clone())
        } else {
            let mut widths = config.shared_layers.clone();
            widths.extend_from_slice(&config.head_layers);
            (None, d, widths)
        };
        let head = |rng: &mut ChaCha8Rng| Mlp::new(head_in, &head_hidden, m, elu, elu, rng);
        let gamma_head = head(&mut rng);
        let delta_head = head(&mut rng);
        let upsilon_head = head(&mut rng);

        let pi = Mlp::new(
            2 * m,
            &config.classifier_layers,
            1,
            elu,
            Activation::Sigmoid,
            &mut rng,
        );
        let out_act = match config.outcome_type {
            OutcomeType::Continuous => Activation::Identity,
            OutcomeType::Binary => Activation::Sigmoid,
        };
        let h0 = Mlp::new(2 * m, &config.outcome_layers, 1, elu, out_act, &mut rng);
        let h1 = Mlp::new(2 * m, &config.outcome_layers, 1, elu, out_act, &mut rng);

        let q_gd = VariationalNet::new(m, &config.q_layers, &mut rng);
        let q_du = VariationalNet::new(m, &config.q_layers, &mut rng);
        let q_ug = VariationalNet::new(m, &config.q_layers, &mut rng);

        Ok(Self {
            config,
            shared,
            gamma_head,
            delta_head,
            upsilon_head,
            pi,
            h0,
            h1,
            q_gd,
            q_du,
            q_ug,
        })
    }

    pub fn head(&self, f: Factor) -> &Mlp {
        match f {
            Factor::Gamma => &self.gamma_head,
            Factor::Delta => &self.delta_head,
            Factor::Upsilon => &self.upsilon_head,
        }
    }

    pub fn block(&self, b: Block) -> &[DenseLayer] {
        match b {
            Block::Shared => self.shared.as_ref().map_or(&[], |s| &s.layers[..]),
            Block::Gamma => &self.gamma_head.layers,
            Block::Delta => &self.delta_head.layers,
            Block::Upsilon => &self.upsilon_head.layers,
            Block::Pi => &self.pi.layers,
            Block::H0 => &self.h0.layers,
            Block::H1 => &self.h1.layers,
        }
    }

    fn block_offsets(&self) -> [usize; 8] {
        let mut offs = [0usize; 8];
        for (i, b) in Block::ALL.iter().enumerate() {
            offs[i + 1] = offs[i] + self.block(*b).len();
        }
        offs
    }

    /// Main-model layers (everything except the variational nets) in a fixed order:
    /// shared, Γ head, Δ head, Υ head, π, h⁰, h¹.
    pub fn main_layers(&self) -> Vec<&DenseLayer> {
        Block::ALL.iter().flat_map(|&b| self.block(b)).collect()
    }

    pub fn main_layers_mut(&mut self) -> Vec<&mut DenseLayer> {
        let mut v: Vec<&mut DenseLayer> = Vec::new();
        if let Some(s) = self.shared.as_mut() {
            v.extend(s.layers.iter_mut());
        }
        v.extend(self.gamma_head.layers.iter_mut());
        v.extend(self.delta_head.layers.iter_mut());
        v.extend(self.upsilon_head.layers.iter_mut());
        v.extend(self.pi.layers.iter_mut());
        v.extend(self.h0.layers.iter_mut());
        v.extend(self.h1.layers.iter_mut());
        v
    }

    pub fn q_nets(&self) -> [&VariationalNet; 3] {
        [&self.q_gd, &self.q_du, &self.q_ug]
    }

    pub fn q_nets_mut(&mut self) -> [&mut VariationalNet; 3] {
        [&mut self.q_gd, &mut self.q_du, &mut self.q_ug]
    }

    pub fn main_num_params(&self) -> usize {
        self.main_layers().iter().map(|l| l.num_params()).sum()
    }

    pub fn num_params(&self) -> usize {
        self.main_num_params()
            + self
                .q_nets()
                .iter()
                .flat_map(|q| q.layers())
                .map(DenseLayer::num_params)
                .sum::<usize>()
    }

    pub fn main_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.main_num_params());
        for l in self.main_layers() {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_main_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.main_num_params() {
            return Err(Error::Dimension(format!(
                "expected {} main parameters, got {}",
                self.main_num_params(),
                values.len()
            )));
        }
        let mut k = 0;
        for l in self.main_layers_mut() {
            let nw = l.weight.data().len();
            l.weight.data_mut().copy_from_slice(&values[k..k + nw]);
            k += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&values[k..k + nb]);
            k += nb;
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor2D) -> Result<()> {
        if x.cols() != self.config.input_dim {
            return Err(Error::Dimension(format!(
                "model expects {} covariates, got {}",
                self.config.input_dim,
                x.cols()
            )));
        }
        Ok(())
    }

    pub fn encode(&self, x: &Tensor2D) -> Result<FactorTriple> {
        self.check_input(x)?;
        let h = match &self.shared {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok(FactorTriple {
            gamma: self.gamma_head.forward(&h)?,
            delta: self.delta_head.forward(&h)?,
            upsilon: self.upsilon_head.forward(&h)?,
        })
    }

    pub fn encode_cached(&self, x: &Tensor2D) -> Result<(FactorTriple, EncodeCache)> {
        self.check_input(x)?;
        let shared = match &self.shared {
            Some(s) => Some(s.forward_cached(x)?),
            None => None,
        };
        let h = shared.as_ref().map_or(x, |c| c.output());
        let heads = [
            self.gamma_head.forward_cached(h)?,
            self.delta_head.forward_cached(h)?,
            self.upsilon_head.forward_cached(h)?,
        ];
        let factors = FactorTriple {
            gamma: heads[0].output().clone(),
            delta: heads[1].output().clone(),
            upsilon: heads[2].output().clone(),
        };
        Ok((factors, EncodeCache { shared, heads }))
    }

    /// Backpropagates factor gradients into the encoder's blocks of `grads`.
    pub fn encode_backward(
        &self,
        cache: &EncodeCache,
        d_factors: &FactorTriple,
        grads: &mut MainGrads,
    ) -> Result<()> {
        let mut d_h: Option<Tensor2D> = None;
        for f in Factor::ALL {
            let (g, gi) = self
                .head(f)
                .backward(&cache.heads[f.index()], d_factors.get(f))?;
            grads.accumulate(Block::head(f), &g)?;
            match d_h.as_mut() {
                Some(acc) => acc.add_assign(&gi)?,
                None => d_h = Some(gi),
            }
        }
        if let (Some(shared), Some(c)) = (&self.shared, &cache.shared) {
            let (g, _) = shared.backward(c, &d_h.expect("three heads"))?;
            grads.accumulate(Block::Shared, &g)?;
        }
        Ok(())
    }

    /// π(concat(Γ, Δ)), clamped to `[1e-7, 1 - 1e-7]`.
    pub fn predict_propensity(&self, factors: &FactorTriple) -> Result<Vec<f64>> {
        factors.check()?;
        let p = self.pi.forward(&factors.omega()?)?;
        Ok(p.data().iter().map(|&v| clamp_prob(v)).collect())
    }

    /// Row `i` goes through h¹ when `t[i] == 1`, else h⁰, applied to `concat(Υ, Δ)`.
    pub fn predict_outcome(&self, factors: &FactorTriple, t: &[u8]) -> Result<Vec<f64>> {
        factors.check()?;
        if t.len() != factors.rows() {
            return Err(Error::Dimension(format!(
                "{} treatment flags for {} rows",
                t.len(),
                factors.rows()
            )));
        }
        validate_binary(t)?;
        let phi = factors.phi()?;
        let (treated, control) = split_by_treatment(t);
        let mut out = vec![0.0; t.len()];
        for (idx, head) in [(&treated, &self.h1), (&control, &self.h0)] {
            if idx.is_empty() {
                continue;
            }
            let y = head.forward(&phi.select_rows(idx))?;
            for (k, &i) in idx.iter().enumerate() {
                out[i] = y.get(k, 0);
            }
        }
        Ok(out)
    }

    /// Both potential-outcome predictions `(ŷ⁰, ŷ¹)` for every row.
    pub fn predict_potential_outcomes(&self, x: &Tensor2D) -> Result<(Vec<f64>, Vec<f64>)> {
        let factors = self.encode(x)?;
        let phi = factors.phi()?;
        let y0 = self.h0.forward(&phi)?.into_data();
        let y1 = self.h1.forward(&phi)?.into_data();
        Ok((y0, y1))
    }

    /// τ̂ = ŷ¹ − ŷ⁰
    pub fn predict_ite(&self, x: &Tensor2D) -> Result<Vec<f64>> {
        let (y0, y1) = self.predict_potential_outcomes(x)?;
        Ok(y1.iter().zip(&y0).map(|(a, b)| a - b).collect())
    }

    /// Weight matrices along the input → factor path, first to last.
    pub fn factor_path(&self, f: Factor) -> Vec<&Tensor2D> {
        self.block(Block::Shared)
            .iter()
            .chain(self.head(f).layers.iter())
            .map(|l| &l.weight)
            .collect()
    }

    /// For each factor: the linearized path product `W` (d × m), taken in absolute
    /// value and averaged over its m columns, giving one contribution per input feature.
    pub fn contribution_vectors(&self) -> Result<[Vec<f64>; 3]> {
        let mut out: [Vec<f64>; 3] = Default::default();
        for f in Factor::ALL {
            let w = chain_product(&self.factor_path(f))?;
            out[f.index()] = column_mean_abs(&w);
        }
        Ok(out)
    }
}

pub(crate) fn chain_product(mats: &[&Tensor2D]) -> Result<Tensor2D> {
    let (first, rest) = mats
        .split_first()
        .ok_or_else(|| Error::Validation("empty layer path".into()))?;
    let mut acc = (*first).clone();
    for m in rest {
        acc = acc.matmul(m)?;
    }
    Ok(acc)
}

pub(crate) fn column_mean_abs(w: &Tensor2D) -> Vec<f64> {
    let m = w.cols() as f64;
    (0..w.rows())
        .map(|i| w.row(i).iter().map(|v| v.abs()).sum::<f64>() / m)
        .collect()
}

pub(crate) fn validate_binary(t: &[u8]) -> Result<()> {
    if let Some(i) = t.iter().position(|&v| v > 1) {
        return Err(Error::Validation(format!(
            "treatment at row {i} is {}, expected 0 or 1",
            t[i]
        )));
    }
    Ok(())
}

/// Row indices of (treated, control).
pub(crate) fn split_by_treatment(t: &[u8]) -> (Vec<usize>, Vec<usize>) {
    let mut treated = Vec::new();
    let mut control = Vec::new();
    for (i, &v) in t.iter().enumerate() {
        if v == 1 {
            treated.push(i);
        } else {
            control.push(i);
        }
    }
    (treated, control)
}
