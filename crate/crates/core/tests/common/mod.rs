//! Invariant checks shared by the property-test target and the acceptance suite.
//!
//! Each check drives a seeded proptest runner and returns `Err` with the
//! shrunk counterexample on failure.

#![allow(dead_code)]

use mimcfr::data::{
    generate_synthetic, read_csv, split_dataset, write_csv, CsvSchema, Dataset, OutcomeType,
    SyntheticSpec,
};
use mimcfr::losses::{
    ipm_wasserstein, loss_pred, loss_reg, loss_rlo, loss_treat, vclub_pair, SinkhornConfig,
};
use mimcfr::metrics::{ate_error, auuc_at_k, dlu, pehe};
use mimcfr::model::{ModelConfig, ModelParams, VariationalNet};
use mimcfr::numcore::{
    dense_backward, dense_forward, grad_check, Activation, AdamConfig, AdamState, DenseLayer,
    Tensor2D,
};
use mimcfr::targeting::{greedy_select, policy_value};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Check = fn() -> Result<(), String>;

/// Every invariant, by name.
pub const ALL: &[(&str, Check)] = &[
    (
        "dense backward matches finite differences",
        dense_backward_matches_fd,
    ),
    (
        "dense forward is deterministic",
        dense_forward_deterministic,
    ),
    (
        "adam with zero gradient is the identity",
        adam_zero_gradient_identity,
    ),
    ("propensity ignores upsilon", propensity_ignores_upsilon),
    ("outcomes and ite ignore gamma", outcomes_ignore_gamma),
    ("encode shapes", encode_shapes),
    (
        "ipm symmetric and translation invariant",
        ipm_symmetry_translation,
    ),
    ("vclub vanishes for input-independent q", vclub_constant_q),
    ("loss terms non-negative", losses_non_negative),
    ("rlo bounded in [0, 3]", rlo_bounded),
    (
        "synthetic data factor structure",
        synthetic_factor_structure,
    ),
    ("csv round trip is bit-exact", csv_round_trip),
    ("splits partition the rows", split_partition),
    ("pehe and ate bounds", pehe_ate_bounds),
    ("pehe permutation invariant", pehe_permutation_invariant),
    ("auuc depends on ranks only", auuc_rank_invariant),
    ("dlu identity", dlu_identity),
    ("greedy selection monotone in budget", greedy_monotone),
    (
        "greedy selection transform invariant",
        greedy_transform_invariant,
    ),
    ("greedy selection optimal", greedy_optimal),
];

fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    )
}

fn run<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String>
where
    S::Value: std::fmt::Debug,
{
    runner(cases)
        .run(&strategy, test)
        .map_err(|e| e.to_string())
}

fn fail<E: std::fmt::Display>(e: E) -> TestCaseError {
    TestCaseError::fail(e.to_string())
}

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor2D> {
    proptest::collection::vec(lo..hi, rows * cols)
        .prop_map(move |v| Tensor2D::from_vec(rows, cols, v).unwrap())
}

fn small_model(d: usize, m: usize, sfd: bool, seed: u64) -> ModelParams {
    ModelParams::init(ModelConfig {
        factor_dim: m,
        shared_layers: vec![6],
        head_layers: vec![],
        classifier_layers: vec![4],
        outcome_layers: vec![5],
        q_layers: vec![4],
        sfd_enabled: sfd,
        seed,
        ..ModelConfig::new(d)
    })
    .unwrap()
}

/// Continuous dataset with only potential outcomes of interest; everyone untreated
/// except row 0.
fn po_dataset(y0: Vec<f64>, y1: Vec<f64>) -> Dataset {
    let n = y0.len();
    let mut t = vec![0u8; n];
    t[0] = 1;
    let y = (0..n)
        .map(|i| if t[i] == 1 { y1[i] } else { y0[i] })
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

pub fn dense_backward_matches_fd() -> Result<(), String> {
    let strat = (1usize..=16, 1usize..=16, 1usize..=4, any::<u64>());
    run(24, strat, |(i, o, n, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = DenseLayer::glorot(i, o, Activation::Elu, &mut rng);
        let x = Tensor2D::from_vec(
            n,
            i,
            (0..n * i)
                .map(|k| ((k * 7 + seed as usize % 5) % 11) as f64 / 5.0 - 1.0)
                .collect(),
        )
        .unwrap();
        let up =
            Tensor2D::from_vec(n, o, (0..n * o).map(|k| (k % 3) as f64 - 0.7).collect()).unwrap();
        let (gw, gb, _) = dense_backward(&layer, &x, &up).map_err(fail)?;
        let analytic: Vec<f64> = gw.data().iter().chain(&gb).copied().collect();
        let params: Vec<f64> = layer
            .weight
            .data()
            .iter()
            .chain(&layer.bias)
            .copied()
            .collect();
        let wlen = layer.weight.data().len();
        let f = |p: &[f64]| {
            let mut l = layer.clone();
            l.weight.data_mut().copy_from_slice(&p[..wlen]);
            l.bias.copy_from_slice(&p[wlen..]);
            let out = dense_forward(&l, &x)?;
            Ok(out.data().iter().zip(up.data()).map(|(a, b)| a * b).sum())
        };
        let rep = grad_check(f, &params, &analytic, 1e-4).map_err(fail)?;
        prop_assert!(rep.passed(), "{rep:?}");
        Ok(())
    })
}

pub fn dense_forward_deterministic() -> Result<(), String> {
    run(
        32,
        (1usize..=8, 1usize..=8, any::<u64>()),
        |(i, o, seed)| {
            let layer =
                DenseLayer::glorot(i, o, Activation::Elu, &mut ChaCha8Rng::seed_from_u64(seed));
            let x = Tensor2D::filled(3, i, 0.37);
            let a = dense_forward(&layer, &x).map_err(fail)?;
            let b = dense_forward(&layer.clone(), &x.clone()).map_err(fail)?;
            prop_assert_eq!(a, b);
            Ok(())
        },
    )
}

pub fn adam_zero_gradient_identity() -> Result<(), String> {
    let strat = (
        proptest::collection::vec(-5.0f64..5.0, 1..20),
        proptest::collection::vec(-5.0f64..5.0, 1..20),
        0usize..5,
    );
    run(64, strat, |(p0, warm, steps)| {
        let n = p0.len();
        let mut opt = AdamState::new(AdamConfig::default(), &[n]);
        let mut p = p0.clone();
        // build up arbitrary moment state first
        for s in 0..steps {
            let g: Vec<f64> = (0..n).map(|k| warm[(k + s) % warm.len()]).collect();
            opt.step(&mut [p.as_mut_slice()], &[g.as_slice()])
                .map_err(fail)?;
        }
        let before = p.clone();
        opt.step(&mut [p.as_mut_slice()], &[vec![0.0; n].as_slice()])
            .map_err(fail)?;
        prop_assert_eq!(before, p);
        Ok(())
    })
}

fn model_and_batch() -> impl Strategy<Value = (ModelParams, Tensor2D)> {
    (2usize..6, 1usize..5, any::<bool>(), any::<u64>(), 1usize..6).prop_flat_map(
        |(d, m, sfd, seed, n)| {
            matrix(n, d, -2.0, 2.0).prop_map(move |x| (small_model(d, m, sfd, seed), x))
        },
    )
}

pub fn propensity_ignores_upsilon() -> Result<(), String> {
    run(
        48,
        (model_and_batch(), -3.0f64..3.0),
        |((params, x), shift)| {
            let f = params.encode(&x).map_err(fail)?;
            let mut g = f.clone();
            g.upsilon.data_mut().iter_mut().for_each(|v| *v += shift);
            let a = params.predict_propensity(&f).map_err(fail)?;
            let b = params.predict_propensity(&g).map_err(fail)?;
            prop_assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
            Ok(())
        },
    )
}

pub fn outcomes_ignore_gamma() -> Result<(), String> {
    run(
        48,
        (model_and_batch(), -3.0f64..3.0),
        |((params, x), shift)| {
            let f = params.encode(&x).map_err(fail)?;
            let mut g = f.clone();
            g.gamma.data_mut().iter_mut().for_each(|v| *v *= shift);
            for t in [0u8, 1] {
                let tv = vec![t; x.rows()];
                let a = params.predict_outcome(&f, &tv).map_err(fail)?;
                let b = params.predict_outcome(&g, &tv).map_err(fail)?;
                prop_assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
            }
            let ite_a: Vec<f64> = {
                let y1 = params
                    .predict_outcome(&f, &vec![1; x.rows()])
                    .map_err(fail)?;
                let y0 = params
                    .predict_outcome(&f, &vec![0; x.rows()])
                    .map_err(fail)?;
                y1.iter().zip(&y0).map(|(a, b)| a - b).collect()
            };
            let ite = params.predict_ite(&x).map_err(fail)?;
            prop_assert!(ite
                .iter()
                .zip(&ite_a)
                .all(|(p, q)| p.to_bits() == q.to_bits()));
            Ok(())
        },
    )
}

pub fn encode_shapes() -> Result<(), String> {
    run(48, model_and_batch(), |(params, x)| {
        let f = params.encode(&x).map_err(fail)?;
        let want = (x.rows(), params.config.factor_dim);
        prop_assert_eq!(f.gamma.shape(), want);
        prop_assert_eq!(f.delta.shape(), want);
        prop_assert_eq!(f.upsilon.shape(), want);
        Ok(())
    })
}

pub fn ipm_symmetry_translation() -> Result<(), String> {
    let strat = (1usize..12, 1usize..12, 1usize..4).prop_flat_map(|(n1, n0, m)| {
        (
            matrix(n1, m, -2.0, 2.0),
            matrix(n0, m, -1.0, 3.0),
            proptest::collection::vec(-5.0f64..5.0, m),
        )
    });
    let cfg = SinkhornConfig::default();
    run(64, strat, |(a, b, shift)| {
        let ab = ipm_wasserstein(&a, &b, &cfg).map_err(fail)?;
        let ba = ipm_wasserstein(&b, &a, &cfg).map_err(fail)?;
        prop_assert!((ab - ba).abs() <= 1e-6, "{ab} vs {ba}");
        let mv = |t: &Tensor2D| {
            let mut t = t.clone();
            for r in 0..t.rows() {
                for (v, s) in t.row_mut(r).iter_mut().zip(&shift) {
                    *v += s;
                }
            }
            t
        };
        let moved = ipm_wasserstein(&mv(&a), &mv(&b), &cfg).map_err(fail)?;
        prop_assert!((ab - moved).abs() <= 1e-6, "{ab} vs {moved}");
        Ok(())
    })
}

pub fn vclub_constant_q() -> Result<(), String> {
    let strat = (2usize..20, 1usize..5, any::<u64>()).prop_flat_map(|(n, m, seed)| {
        (matrix(n, m, -3.0, 3.0), matrix(n, m, -3.0, 3.0), Just(seed))
    });
    run(64, strat, |(a, b, seed)| {
        let m = a.cols();
        let mut q = VariationalNet::new(m, &[4], &mut ChaCha8Rng::seed_from_u64(seed));
        // zero outgoing weights: outputs are the head biases, whatever the input
        q.mean_head.weight.data_mut().fill(0.0);
        q.logvar_head.weight.data_mut().fill(0.0);
        q.mean_head
            .bias
            .iter_mut()
            .enumerate()
            .for_each(|(k, v)| *v = k as f64 * 0.3 - 0.2);
        q.logvar_head
            .bias
            .iter_mut()
            .enumerate()
            .for_each(|(k, v)| *v = 0.5 - k as f64 * 0.4);
        let v = vclub_pair(&q, &a, &b).map_err(fail)?;
        // zero up to rounding of the O(1) terms being cancelled
        prop_assert!(v.abs() <= 1e-12, "{v}");
        Ok(())
    })
}

pub fn losses_non_negative() -> Result<(), String> {
    let strat = proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0, 0.0f64..1.0, 0u8..2), 1..30);
    run(128, strat, |rows| {
        let yh: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let p: Vec<f64> = rows.iter().map(|r| r.2).collect();
        let t: Vec<u8> = rows.iter().map(|r| r.3).collect();
        let lp = loss_pred(&yh, &y, OutcomeType::Continuous).map_err(fail)?;
        prop_assert!(lp >= 0.0);
        prop_assert_eq!(lp == 0.0, yh == y);
        prop_assert_eq!(
            loss_pred(&y, &y, OutcomeType::Continuous).map_err(fail)?,
            0.0
        );
        let yb: Vec<f64> = t.iter().map(|&v| f64::from(v)).collect();
        prop_assert!(loss_pred(&p, &yb, OutcomeType::Binary).map_err(fail)? >= 0.0);
        prop_assert!(loss_treat(&p, &t).map_err(fail)? >= 0.0);
        Ok(())
    })?;
    run(32, any::<u64>(), |seed| {
        prop_assert!(loss_reg(&small_model(3, 2, seed % 2 == 0, seed)) >= 0.0);
        Ok(())
    })
}

pub fn rlo_bounded() -> Result<(), String> {
    run(
        64,
        (2usize..6, 1usize..5, any::<bool>(), any::<u64>()),
        |(d, m, sfd, seed)| {
            let v = loss_rlo(&small_model(d, m, sfd, seed)).map_err(fail)?;
            prop_assert!((0.0..=3.0 + 1e-12).contains(&v), "{v}");
            Ok(())
        },
    )
}

pub fn synthetic_factor_structure() -> Result<(), String> {
    let strat = (
        0usize..3,
        1usize..3,
        0usize..3,
        any::<u64>(),
        -2.0f64..2.0,
        any::<bool>(),
    );
    run(32, strat, |(mg, md, mu, seed, shift, binary)| {
        let spec = SyntheticSpec {
            m_gamma: mg,
            m_delta: md,
            m_upsilon: mu,
            n: 60,
            seed,
            outcome_type: if binary {
                OutcomeType::Binary
            } else {
                OutcomeType::Continuous
            },
            ..SyntheticSpec::default()
        };
        let g = generate_synthetic(&spec).map_err(fail)?;
        let ds = &g.dataset;
        let (y0, y1) = ds.potential_outcomes().map_err(fail)?;
        for i in 0..ds.n() {
            let want = if ds.t[i] == 1 { y1[i] } else { y0[i] };
            prop_assert!((ds.y[i] - want).abs() <= 1e-9);
            let row = ds.x.row(i).to_vec();
            let mut pg = row.clone();
            g.truth.factors.gamma.iter().for_each(|&j| pg[j] += shift);
            prop_assert_eq!(
                g.truth.mean_potential_outcomes(&row),
                g.truth.mean_potential_outcomes(&pg)
            );
            let mut pu = row.clone();
            g.truth.factors.upsilon.iter().for_each(|&j| pu[j] += shift);
            prop_assert_eq!(g.truth.treatment_score(&row), g.truth.treatment_score(&pu));
        }
        Ok(())
    })
}

pub fn csv_round_trip() -> Result<(), String> {
    let strat = (any::<u64>(), 50usize..90, any::<bool>());
    run(24, strat, |(seed, n, binary)| {
        let spec = SyntheticSpec {
            n,
            seed,
            m_gamma: 1,
            m_delta: 2,
            m_upsilon: 1,
            outcome_type: if binary {
                OutcomeType::Binary
            } else {
                OutcomeType::Continuous
            },
            ..SyntheticSpec::default()
        };
        let ds = generate_synthetic(&spec).map_err(fail)?.dataset;
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).map_err(fail)?;
        let back = read_csv(buf.as_slice(), &CsvSchema::default()).map_err(fail)?;
        prop_assert_eq!(ds, back);
        Ok(())
    })
}

pub fn split_partition() -> Result<(), String> {
    let strat = (
        3usize..300,
        0.05f64..1.0,
        0.05f64..1.0,
        0.05f64..1.0,
        any::<u64>(),
    );
    run(64, strat, |(n, a, b, c, seed)| {
        let s = a + b + c;
        let fr = (a / s, b / s, 1.0 - a / s - b / s);
        let ds = po_dataset(vec![0.0; n], vec![1.0; n]);
        match split_dataset(&ds, fr, seed) {
            Ok(sp) => {
                let mut all: Vec<usize> = sp.indices.iter().flatten().copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
                prop_assert_eq!(sp.train.n() + sp.validation.n() + sp.test.n(), n);
            }
            // only acceptable when some part rounds to zero rows
            Err(_) => prop_assert!(
                mimcfr::data::largest_remainder_sizes(n, &[fr.0, fr.1, fr.2])
                    .map_or(true, |v| v.contains(&0))
            ),
        }
        Ok(())
    })
}

fn effects() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    (1usize..40).prop_flat_map(|n| {
        (
            proptest::collection::vec(-3.0f64..3.0, n),
            proptest::collection::vec(-3.0f64..3.0, n),
            proptest::collection::vec(-3.0f64..3.0, n),
        )
    })
}

pub fn pehe_ate_bounds() -> Result<(), String> {
    run(128, effects(), |(y0, y1, tau_hat)| {
        let ds = po_dataset(y0, y1);
        let p = pehe(&tau_hat, &ds).map_err(fail)?;
        let a = ate_error(&tau_hat, &ds).map_err(fail)?;
        prop_assert!(p >= 0.0 && a >= 0.0);
        // |mean error| never exceeds the root mean square error
        prop_assert!(a <= p * (1.0 + 1e-12) + 1e-15, "ate {a} > pehe {p}");
        let exact = ds.true_ite().map_err(fail)?;
        prop_assert_eq!(pehe(&exact, &ds).map_err(fail)?, 0.0);
        prop_assert_eq!(ate_error(&exact, &ds).map_err(fail)?, 0.0);
        Ok(())
    })
}

pub fn pehe_permutation_invariant() -> Result<(), String> {
    let strat = effects().prop_flat_map(|(y0, y1, th)| {
        let n = y0.len();
        (
            Just((y0, y1, th)),
            Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
        )
    });
    run(128, strat, |((y0, y1, th), perm)| {
        let p = pehe(&th, &po_dataset(y0.clone(), y1.clone())).map_err(fail)?;
        let pick = |v: &[f64]| perm.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let q = pehe(&pick(&th), &po_dataset(pick(&y0), pick(&y1))).map_err(fail)?;
        prop_assert!((p - q).abs() <= 1e-12 * p.max(1.0), "{p} vs {q}");
        Ok(())
    })
}

pub fn auuc_rank_invariant() -> Result<(), String> {
    let strat = proptest::collection::vec((-20i32..20, 0u8..2, 0u8..2), 2..60);
    run(128, strat, |rows| {
        let mut rows = rows;
        rows[0].1 = 1;
        rows[1].1 = 0;
        let s: Vec<f64> = rows.iter().map(|r| f64::from(r.0)).collect();
        let t: Vec<u8> = rows.iter().map(|r| r.1).collect();
        let y: Vec<f64> = rows.iter().map(|r| f64::from(r.2)).collect();
        let transformed: Vec<f64> = s.iter().map(|v| (v / 4.0).exp() * 3.0 - 7.0).collect();
        for k in [0.1, 0.25, 0.5, 0.8, 1.0] {
            let a = auuc_at_k(&s, &t, &y, k).map_err(fail)?;
            let b = auuc_at_k(&transformed, &t, &y, k).map_err(fail)?;
            prop_assert_eq!(a, b);
        }
        Ok(())
    })
}

pub fn dlu_identity() -> Result<(), String> {
    let strat = proptest::collection::vec((0u8..2, 0u8..2), 1..50);
    run(128, strat, |rows| {
        let y0: Vec<f64> = rows.iter().map(|r| f64::from(r.0)).collect();
        let y1: Vec<f64> = rows.iter().map(|r| f64::from(r.1)).collect();
        let n = y0.len();
        let gain: f64 = y1.iter().zip(&y0).map(|(a, b)| a - b).sum();
        let ds = Dataset::new(
            Tensor2D::zeros(n, 1),
            vec![0; n],
            y0.clone(),
            Some((y0, y1)),
            OutcomeType::Binary,
        )
        .map_err(fail)?;
        let none = dlu(&ds, &[]).map_err(fail)? as f64;
        let all: Vec<usize> = (0..n).collect();
        prop_assert_eq!(none + gain, dlu(&ds, &all).map_err(fail)? as f64);
        Ok(())
    })
}

pub fn greedy_monotone() -> Result<(), String> {
    let strat = (
        proptest::collection::vec(-5.0f64..5.0, 0..40),
        0usize..45,
        0usize..45,
    );
    run(256, strat, |(tau, b1, b2)| {
        let (lo, hi) = (b1.min(b2), b1.max(b2));
        let small = greedy_select(&tau, lo);
        let big = greedy_select(&tau, hi);
        prop_assert!(small.iter().all(|i| big.contains(i)));
        prop_assert!(small.len() <= lo && small.iter().all(|&i| tau[i] >= 0.0));
        Ok(())
    })
}

pub fn greedy_transform_invariant() -> Result<(), String> {
    let strat = (proptest::collection::vec(-12i32..12, 0..40), 0usize..45);
    run(256, strat, |(ints, b)| {
        let tau: Vec<f64> = ints.iter().map(|&v| f64::from(v) / 4.0).collect();
        // strictly increasing and sign preserving
        let cubed: Vec<f64> = tau.iter().map(|v| v * v * v * 5.0).collect();
        prop_assert_eq!(greedy_select(&tau, b), greedy_select(&cubed, b));
        Ok(())
    })
}

/// Exhaustive optimum of the separable objective over subsets of size <= `budget`.
pub fn brute_force_value(ds: &Dataset, budget: usize) -> f64 {
    let n = ds.n();
    let mut best = f64::NEG_INFINITY;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize <= budget {
            let sel: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            best = best.max(policy_value(ds, &sel).unwrap());
        }
    }
    best
}

pub fn greedy_optimal() -> Result<(), String> {
    let strat = (1usize..=10).prop_flat_map(|n| {
        (
            proptest::collection::vec(-4i32..5, n),
            proptest::collection::vec(-4i32..5, n),
            0..=n,
        )
    });
    run(64, strat, |(a, b, budget)| {
        let ds = po_dataset(
            a.iter().map(|&v| f64::from(v)).collect(),
            b.iter().map(|&v| f64::from(v)).collect(),
        );
        let tau = ds.true_ite().map_err(fail)?;
        let g = policy_value(&ds, &greedy_select(&tau, budget)).map_err(fail)?;
        prop_assert_eq!(g, brute_force_value(&ds, budget));
        Ok(())
    })
}
