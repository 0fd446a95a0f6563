//! Representation-layer orthogonality penalty.
//!
//! Each factor's contribution vector `w̄` (see
//! [`ModelParams::contribution_vectors`]) is L2-normalized and the squared inner
//! products of the three pairs are summed, giving a value in `[0, 3]` that is
//! zero exactly when the three vectors are pairwise orthogonal.

use crate::error::Result;
use crate::model::{chain_product, column_mean_abs, Block, Factor, MainGrads, ModelParams};
use crate::numcore::Tensor2D;

const PAIRS: [(usize, usize); 3] = [(0, 1), (1, 2), (2, 0)];

fn normalize(w: &[f64]) -> (Vec<f64>, f64) {
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        (w.iter().map(|v| v / norm).collect(), norm)
    } else {
        (vec![0.0; w.len()], 0.0)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// The penalty evaluated on three raw contribution vectors. A zero vector
/// counts as orthogonal to everything.
pub fn rlo_from_vectors(w: &[Vec<f64>; 3]) -> f64 {
    let u: Vec<Vec<f64>> = w.iter().map(|v| normalize(v).0).collect();
    PAIRS.iter().map(|&(a, b)| dot(&u[a], &u[b]).powi(2)).sum()
}

pub fn loss_rlo(params: &ModelParams) -> Result<f64> {
    Ok(rlo_from_vectors(&params.contribution_vectors()?))
}

/// Adds `scale · ∂L_rlo/∂W` into the encoder blocks of `grads` and returns `L_rlo`.
pub fn loss_rlo_accumulate(params: &ModelParams, scale: f64, grads: &mut MainGrads) -> Result<f64> {
    let mut products = Vec::with_capacity(3);
    let mut units = Vec::with_capacity(3);
    let mut norms = Vec::with_capacity(3);
    for f in Factor::ALL {
        let m = chain_product(&params.factor_path(f))?;
        let (u, norm) = normalize(&column_mean_abs(&m));
        products.push(m);
        units.push(u);
        norms.push(norm);
    }
    let d = units[0].len();
    let mut du = vec![vec![0.0; d]; 3];
    let mut value = 0.0;
    for &(a, b) in &PAIRS {
        let c = dot(&units[a], &units[b]);
        value += c * c;
        for k in 0..d {
            du[a][k] += 2.0 * c * units[b][k];
            du[b][k] += 2.0 * c * units[a][k];
        }
    }

    let n_shared = params.block(Block::Shared).len();
    for f in Factor::ALL {
        let i = f.index();
        if norms[i] == 0.0 {
            continue;
        }
        let u = &units[i];
        let proj = dot(u, &du[i]);
        let m = &products[i];
        let cols = m.cols() as f64;
        // d w̄ through the normalization, then through the mean of |M| over columns
        let mut dm = Tensor2D::zeros(m.rows(), m.cols());
        for r in 0..m.rows() {
            let dw = (du[i][r] - u[r] * proj) / norms[i];
            for c in 0..m.cols() {
                let v = m.get(r, c);
                let s = if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                dm.set(r, c, scale * s * dw / cols);
            }
        }
        let path = params.factor_path(f);
        let chain_grads = chain_product_backward(&path, &dm)?;
        for (k, g) in chain_grads.into_iter().enumerate() {
            let target = if k < n_shared {
                &mut grads.block_mut(Block::Shared)[k]
            } else {
                &mut grads.block_mut(Block::head(f))[k - n_shared]
            };
            target.weight.add_assign(&g)?;
        }
    }
    Ok(value)
}

/// Gradients of `⟨dM, A_1 ⋯ A_k⟩` with respect to each `A_i`:
/// `(A_1 ⋯ A_{i−1})ᵀ · dM · (A_{i+1} ⋯ A_k)ᵀ`.
fn chain_product_backward(mats: &[&Tensor2D], dm: &Tensor2D) -> Result<Vec<Tensor2D>> {
    let k = mats.len();
    // prefix[i] = A_1 ⋯ A_i (prefix[0] unused), suffix[i] = A_i ⋯ A_k
    let mut prefix: Vec<Option<Tensor2D>> = vec![None; k + 1];
    for i in 1..=k {
        prefix[i] = Some(match &prefix[i - 1] {
            Some(p) => p.matmul(mats[i - 1])?,
            None => mats[i - 1].clone(),
        });
    }
    let mut suffix: Vec<Option<Tensor2D>> = vec![None; k + 2];
    for i in (1..=k).rev() {
        suffix[i] = Some(match &suffix[i + 1] {
            Some(s) => mats[i - 1].matmul(s)?,
            None => mats[i - 1].clone(),
        });
    }
    let mut out = Vec::with_capacity(k);
    for i in 1..=k {
        let left = match &prefix[i - 1] {
            Some(p) => p.t_matmul(dm)?,
            None => dm.clone(),
        };
        let g = match &suffix[i + 1] {
            Some(s) => left.matmul_t(s)?,
            None => left,
        };
        out.push(g);
    }
    Ok(out)
}
