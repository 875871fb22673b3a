mod common;

use common::{brute_mmd2, rows_of};
use ctfgen::kernel::{mmd2, Estimator, KernelConfig};
use ctfgen::posterior::{standardizer, tuple_distance, Distance, PosSettings};
use ctfgen::rng::seeded;
use ctfgen::scm::{Domain, GroundTruthScm, ScmDims};
use ctfgen::{Tape, Tensor};
use proptest::prelude::*;

fn distance(s: &Tensor, p: &Tensor, settings: &PosSettings) -> f64 {
    let mut tape = Tape::new();
    let (sv, pv) = (tape.constant(s.clone()), tape.constant(p.clone()));
    let l = tuple_distance(&mut tape, sv, pv, settings).unwrap();
    tape.value(l).item()
}

fn tuples(d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-2.0..2.0f64, 5 * d), 1..=10)
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn mmd_distance_matches_brute_force(s in tuples(1), p in tuples(1)) {
        let settings = PosSettings { standardize: false, ..PosSettings::default() };
        let got = distance(&Tensor::from_rows(&s).unwrap(), &Tensor::from_rows(&p).unwrap(), &settings);
        prop_assert!((got - brute_mmd2(&s, &p, 1.0, false)).abs() < 1e-12);
    }

    #[test]
    fn standardized_distance_uses_first_set_statistics(s in tuples(1), p in tuples(1)) {
        prop_assume!(s.len() >= 2);
        let (st, pt) = (Tensor::from_rows(&s).unwrap(), Tensor::from_rows(&p).unwrap());
        let (mean, scale) = standardizer(&st);
        let apply = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
            rows.iter()
                .map(|r| r.iter().enumerate().map(|(j, v)| (v - mean[j]) * scale[j]).collect())
                .collect()
        };
        let got = distance(&st, &pt, &PosSettings::default());
        prop_assert!((got - brute_mmd2(&apply(&s), &apply(&p), 1.0, false)).abs() < 1e-12);
    }
}

#[test]
fn identical_tuple_sets_are_at_distance_zero() {
    let s = Tensor::matrix(3, 5, (0..15).map(|v| (v as f64 * 0.37).sin()).collect()).unwrap();
    for distance_kind in [Distance::MmdImq, Distance::Energy, Distance::Sinkhorn] {
        let settings = PosSettings {
            distance: distance_kind,
            ..PosSettings::default()
        };
        assert!(distance(&s, &s, &settings).abs() < 1e-10, "{distance_kind:?}");
    }
}

#[test]
fn every_block_of_the_tuple_matters() {
    let d = 2;
    let s = Tensor::matrix(4, 5 * d, (0..20 * d).map(|v| (v as f64 * 0.71).cos()).collect()).unwrap();
    // blocks x, c, n, y with widths d, d, d, 2d
    let blocks = [(0, d), (d, 2 * d), (2 * d, 3 * d), (3 * d, 5 * d)];
    for standardize in [false, true] {
        let settings = PosSettings {
            standardize,
            ..PosSettings::default()
        };
        for (start, end) in blocks {
            for col in start..end {
                let mut p = s.clone();
                for i in 0..p.rows() {
                    p.row_mut(i)[col] += 0.5;
                }
                assert!(distance(&s, &p, &settings) > 1e-6, "column {col}");
            }
        }
    }
}

/// Ground-truth analogue of the two tuple sets for `n` source observations:
/// generative tuples `(x, c, n, y)` from the priors, and posterior tuples
/// `(x_i, c(x_i, y_i), n', y_i)` with the exact abduction and fresh `n'`.
fn oracle_tuple_sets(n: usize, q: usize, seed: u64) -> (Tensor, Tensor) {
    let scm = GroundTruthScm::new(ScmDims::new(1).unwrap());
    let mut rng = seeded(seed);
    let observed: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .map(|_| {
            let t = scm.sample_prior(Domain::Source, &mut rng);
            let y = scm.source_mechanism(&t.x, &t.c, &t.n).unwrap();
            (t.x, y)
        })
        .collect();
    let mut gen_rows = Vec::with_capacity(n * q);
    let mut post_rows = Vec::with_capacity(n * q);
    for (x, y) in &observed {
        let c_post = scm.abduct_source_context(x, y).unwrap();
        for _ in 0..q {
            let c = scm.sample_c(Domain::Source, &mut rng);
            let noise = scm.sample_n(Domain::Source, &mut rng);
            let y_gen = scm.source_mechanism(x, &c, &noise).unwrap();
            gen_rows.push([x.clone(), c, noise, y_gen].concat());
            let fresh = scm.sample_n(Domain::Source, &mut rng);
            post_rows.push([x.clone(), c_post.clone(), fresh, y.clone()].concat());
        }
    }
    (Tensor::from_rows(&gen_rows).unwrap(), Tensor::from_rows(&post_rows).unwrap())
}

fn drop_noise_block(t: &Tensor) -> Tensor {
    let rows: Vec<Vec<f64>> = rows_of(t)
        .into_iter()
        .map(|r| [&r[..2], &r[3..]].concat())
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

fn standardized_mmd(s: &Tensor, p: &Tensor) -> f64 {
    let (mean, scale) = standardizer(s);
    let apply = |t: &Tensor| {
        let mut out = t.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = (*v - mean[j]) * scale[j];
            }
        }
        out
    };
    mmd2(&apply(s), &apply(p), &KernelConfig::default(), Estimator::Biased).unwrap()
}

fn null_percentile_95(reference: &Tensor, n: usize, q: usize, reps: usize, project: impl Fn(&Tensor) -> Tensor) -> f64 {
    let mut null: Vec<f64> = (0..reps)
        .map(|r| {
            let (fresh, _) = oracle_tuple_sets(n, q, 1000 + r as u64);
            standardized_mmd(&project(reference), &project(&fresh))
        })
        .collect();
    null.sort_by(f64::total_cmp);
    null[(0.95 * reps as f64).ceil() as usize - 1]
}

/// With oracle mechanisms and the exact abduction map, the `(x, c, y)`
/// marginals of the two tuple sets coincide: the statistic falls below the
/// 95th percentile of its same-distribution null.
#[test]
fn oracle_wiring_matches_context_marginal() {
    let (n, q) = (500, 8);
    let (s, p) = oracle_tuple_sets(n, q, 1);
    let stat = standardized_mmd(&drop_noise_block(&s), &drop_noise_block(&p));
    let threshold = null_percentile_95(&s, n, q, 20, drop_noise_block);
    assert!(stat < threshold, "{stat} vs null {threshold}");
}

/// The full tuples differ: on the generative side the noise is a function of
/// `(x, c, y)`, while the posterior side pairs `y` with an independent draw.
#[test]
fn oracle_wiring_full_tuples_differ() {
    let (n, q) = (3000, 2);
    let (s, p) = oracle_tuple_sets(n, q, 2);
    let stat = standardized_mmd(&s, &p);
    let threshold = null_percentile_95(&s, n, q, 20, Tensor::clone);
    assert!(stat > threshold, "{stat} vs null {threshold}");
}
