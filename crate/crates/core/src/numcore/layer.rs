use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor2D;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Elu,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Elu => {
                if z > 0.0 {
                    z
                } else {
                    z.exp_m1()
                }
            }
            Activation::Sigmoid => sigmoid(z),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output `y = f(z)`.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Elu => {
                if y > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Elu => "elu",
            Activation::Sigmoid => "sigmoid",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "elu" => Some(Activation::Elu),
            "sigmoid" => Some(Activation::Sigmoid),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Fully connected layer `activation(x·W + b)`; `W` is `in_dim × out_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Tensor2D,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weight: Tensor2D, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.cols() {
            return Err(Error::Dimension(format!(
                "bias of length {} for a layer with {} outputs",
                bias.len(),
                weight.cols()
            )));
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Self {
            weight: Tensor2D::from_vec(in_dim, out_dim, data).expect("sized buffer"),
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn num_params(&self) -> usize {
        self.weight.data().len() + self.bias.len()
    }

    fn pre_activation(&self, input: &Tensor2D) -> Result<Tensor2D> {
        if input.cols() != self.in_dim() {
            return Err(Error::Dimension(format!(
                "layer expects {} inputs, got {}",
                self.in_dim(),
                input.cols()
            )));
        }
        let mut z = input.matmul(&self.weight)?;
        for r in 0..z.rows() {
            for (v, b) in z.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(z)
    }
}

/// Gradient of a scalar with respect to one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Tensor2D,
    pub bias: Vec<f64>,
}

impl LayerGrad {
    pub fn zeros_like(layer: &DenseLayer) -> Self {
        Self {
            weight: Tensor2D::zeros(layer.in_dim(), layer.out_dim()),
            bias: vec![0.0; layer.out_dim()],
        }
    }

    pub fn add_assign(&mut self, other: &LayerGrad) -> Result<()> {
        self.weight.add_assign(&other.weight)?;
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        self.weight.scale(k);
        self.bias.iter_mut().for_each(|b| *b *= k);
    }
}

pub fn dense_forward(layer: &DenseLayer, input: &Tensor2D) -> Result<Tensor2D> {
    let act = layer.activation;
    let mut out = layer.pre_activation(input)?;
    out.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
    out.ensure_finite("dense layer output")?;
    Ok(out)
}

/// Exact gradients of `Σ upstream ⊙ dense_forward(layer, cached_input)` with respect to
/// the weight, the bias and the input.
pub fn dense_backward(
    layer: &DenseLayer,
    cached_input: &Tensor2D,
    upstream_grad: &Tensor2D,
) -> Result<(Tensor2D, Vec<f64>, Tensor2D)> {
    let output = dense_forward(layer, cached_input)?;
    let (g, gi) = backward_with_output(layer, cached_input, &output, upstream_grad)?;
    Ok((g.weight, g.bias, gi))
}

/// Backward pass using the already computed layer `output`; returns the
/// parameter gradient and the input gradient.
pub fn backward_with_output(
    layer: &DenseLayer,
    input: &Tensor2D,
    output: &Tensor2D,
    upstream: &Tensor2D,
) -> Result<(LayerGrad, Tensor2D)> {
    if upstream.shape() != output.shape() || input.cols() != layer.in_dim() {
        return Err(Error::Dimension(format!(
            "backward: input {:?}, output {:?}, upstream {:?}",
            input.shape(),
            output.shape(),
            upstream.shape()
        )));
    }
    let act = layer.activation;
    let mut dz = upstream.clone();
    for (g, &y) in dz.data_mut().iter_mut().zip(output.data()) {
        *g *= act.derivative_from_output(y);
    }
    let weight = input.t_matmul(&dz)?;
    let mut bias = vec![0.0; layer.out_dim()];
    for r in 0..dz.rows() {
        for (b, g) in bias.iter_mut().zip(dz.row(r)) {
            *b += g;
        }
    }
    let grad_input = dz.matmul_t(&layer.weight)?;
    Ok((LayerGrad { weight, bias }, grad_input))
}

/// A stack of dense layers evaluated in order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

/// Activations recorded by [`Mlp::forward_cached`]: entry 0 is the input,
/// entry `i + 1` the output of layer `i`.
#[derive(Debug, Clone)]
pub struct MlpCache {
    acts: Vec<Tensor2D>,
}

impl MlpCache {
    pub fn output(&self) -> &Tensor2D {
        self.acts.last().expect("cache holds at least the input")
    }
}

impl Mlp {
    /// Hidden layers use `hidden_act`; the final layer (width `out_dim`) uses `out_act`.
    pub fn new<R: Rng + ?Sized>(
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        hidden_act: Activation,
        out_act: Activation,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = in_dim;
        for &w in hidden {
            layers.push(DenseLayer::glorot(prev, w, hidden_act, rng));
            prev = w;
        }
        layers.push(DenseLayer::glorot(prev, out_dim, out_act, rng));
        Self { layers }
    }

    /// Hidden stack only, every layer with the same activation.
    pub fn stack<R: Rng + ?Sized>(
        in_dim: usize,
        widths: &[usize],
        act: Activation,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = in_dim;
        for &w in widths {
            layers.push(DenseLayer::glorot(prev, w, act, rng));
            prev = w;
        }
        Self { layers }
    }

    pub fn out_dim_or(&self, input_dim: usize) -> usize {
        self.layers.last().map_or(input_dim, DenseLayer::out_dim)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(DenseLayer::num_params).sum()
    }

    pub fn forward(&self, input: &Tensor2D) -> Result<Tensor2D> {
        let mut h = input.clone();
        for layer in &self.layers {
            h = dense_forward(layer, &h)?;
        }
        Ok(h)
    }

    pub fn forward_cached(&self, input: &Tensor2D) -> Result<MlpCache> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.clone());
        for layer in &self.layers {
            let next = dense_forward(layer, acts.last().expect("non-empty"))?;
            acts.push(next);
        }
        Ok(MlpCache { acts })
    }

    /// Returns per-layer parameter gradients and the gradient with respect to the input.
    pub fn backward(
        &self,
        cache: &MlpCache,
        upstream: &Tensor2D,
    ) -> Result<(Vec<LayerGrad>, Tensor2D)> {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = upstream.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (lg, gi) = backward_with_output(layer, &cache.acts[i], &cache.acts[i + 1], &g)?;
            grads.push(lg);
            g = gi;
        }
        grads.reverse();
        Ok((grads, g))
    }

    /// Input gradient only; parameters are treated as constants.
    pub fn backward_input(&self, cache: &MlpCache, upstream: &Tensor2D) -> Result<Tensor2D> {
        let mut g = upstream.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let act = layer.activation;
            let out = &cache.acts[i + 1];
            for (v, &y) in g.data_mut().iter_mut().zip(out.data()) {
                *v *= act.derivative_from_output(y);
            }
            g = g.matmul_t(&layer.weight)?;
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_layer_passes_input_through() {
        let layer =
            DenseLayer::new(Tensor2D::identity(2), vec![0.0, 0.0], Activation::Identity).unwrap();
        let x = Tensor2D::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(dense_forward(&layer, &x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let layer =
            DenseLayer::new(Tensor2D::zeros(3, 4), vec![0.0; 4], Activation::Sigmoid).unwrap();
        let x = Tensor2D::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.5, 0.5]]).unwrap();
        let y = dense_forward(&layer, &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn elu_values() {
        let layer =
            DenseLayer::new(Tensor2D::identity(2), vec![0.0, 0.0], Activation::Elu).unwrap();
        let x = Tensor2D::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let y = dense_forward(&layer, &x).unwrap();
        assert_abs_diff_eq!(y.get(0, 0), 1.0);
        assert_abs_diff_eq!(y.get(0, 1), -0.632_120_558_828_557_7, epsilon = 1e-12);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let layer =
            DenseLayer::new(Tensor2D::zeros(3, 1), vec![0.0], Activation::Identity).unwrap();
        assert!(matches!(
            dense_forward(&layer, &Tensor2D::zeros(2, 2)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn forward_flags_overflow() {
        let layer = DenseLayer::new(
            Tensor2D::filled(1, 1, 1e308),
            vec![0.0],
            Activation::Identity,
        )
        .unwrap();
        let x = Tensor2D::filled(1, 1, 10.0);
        assert!(matches!(dense_forward(&layer, &x), Err(Error::Numeric(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = DenseLayer::glorot(4, 3, Activation::Elu, &mut rng);
        let x = Tensor2D::filled(5, 4, 0.3);
        let (gw, gb, gi) = dense_backward(&layer, &x, &Tensor2D::zeros(5, 3)).unwrap();
        assert!(gw.data().iter().all(|&v| v == 0.0));
        assert!(gb.iter().all(|&v| v == 0.0));
        assert!(gi.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_identity_weight_gradient() {
        let layer =
            DenseLayer::new(Tensor2D::filled(1, 1, 0.7), vec![0.1], Activation::Identity).unwrap();
        let x = Tensor2D::filled(1, 1, 3.0);
        let up = Tensor2D::filled(1, 1, -2.0);
        let (gw, gb, gi) = dense_backward(&layer, &x, &up).unwrap();
        assert_eq!(gw.get(0, 0), 3.0 * -2.0);
        assert_eq!(gb[0], -2.0);
        assert_abs_diff_eq!(gi.get(0, 0), 0.7 * -2.0);
    }

    #[test]
    fn backward_input_matches_full_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::new(
            4,
            &[6, 5],
            2,
            Activation::Elu,
            Activation::Sigmoid,
            &mut rng,
        );
        let x =
            Tensor2D::from_vec(3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let cache = mlp.forward_cached(&x).unwrap();
        let up = Tensor2D::filled(3, 2, 0.5);
        let (_, gi) = mlp.backward(&cache, &up).unwrap();
        let gi2 = mlp.backward_input(&cache, &up).unwrap();
        for (a, b) in gi.data().iter().zip(gi2.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
    }
}
