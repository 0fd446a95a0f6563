use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};

/// Train/validation/test partition together with the row indices of each part.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    pub indices: [Vec<usize>; 3],
}

/// Part sizes for `n` items by the largest-remainder method. Ties in the
/// fractional part go to the earlier part.
pub fn largest_remainder_sizes(n: usize, fractions: &[f64]) -> Result<Vec<usize>> {
    if fractions.iter().any(|f| !f.is_finite() || *f <= 0.0) {
        return Err(Error::Validation("split fractions must be positive".into()));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!(
            "split fractions sum to {total}, expected 1"
        )));
    }
    let quotas: Vec<f64> = fractions
        .iter()
        .map(|f| {
            let q = f * n as f64;
            // snap representation error such as 0.07 * 100 = 7.000000000000001
            if (q - q.round()).abs() < 1e-9 {
                q.round()
            } else {
                q
            }
        })
        .collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &k in order.iter().take(n - assigned) {
        sizes[k] += 1;
    }
    Ok(sizes)
}

/// Seeded shuffle followed by contiguous slicing into (train, validation, test).
pub fn split_dataset(ds: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<Split> {
    let sizes = largest_remainder_sizes(ds.n(), &[fractions.0, fractions.1, fractions.2])?;
    if sizes.contains(&0) {
        return Err(Error::Validation(format!(
            "split of {} rows produces an empty part: {sizes:?}",
            ds.n()
        )));
    }
    let mut perm: Vec<usize> = (0..ds.n()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train_idx = perm[..sizes[0]].to_vec();
    let val_idx = perm[sizes[0]..sizes[0] + sizes[1]].to_vec();
    let test_idx = perm[sizes[0] + sizes[1]..].to_vec();
    Ok(Split {
        train: ds.select(&train_idx),
        validation: ds.select(&val_idx),
        test: ds.select(&test_idx),
        indices: [train_idx, val_idx, test_idx],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn benchmark_proportions() {
        assert_eq!(
            largest_remainder_sizes(100, &[0.63, 0.27, 0.10]).unwrap(),
            vec![63, 27, 10]
        );
    }

    #[test]
    fn largest_remainder_small_n() {
        // quotas 4.41, 1.89, 0.70 -> floors 4, 1, 0; the two spare rows go to .89 and .70
        assert_eq!(
            largest_remainder_sizes(7, &[0.63, 0.27, 0.10]).unwrap(),
            vec![4, 2, 1]
        );
    }

    #[test]
    fn invalid_fractions() {
        assert!(largest_remainder_sizes(10, &[0.5, 0.6, 0.1]).is_err());
        assert!(largest_remainder_sizes(10, &[0.5, 0.5, 0.0]).is_err());
    }
}
