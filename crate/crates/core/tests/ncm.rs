mod common;

use common::{fd_compare, rows_of};
use ctfgen::kernel::{conditional_kls_loss, KernelConfig};
use ctfgen::ncm::{
    gen_effect, loss_cs, loss_gen, loss_tr, total_stage1_loss, BlockMse, BundleConfig, DisCost, ExogenousDraw,
    Net, NcmBundle, Stage1Settings, Stage1Weights, TrWiring, ZeroCost, tr_costs,
};
use ctfgen::nn::MlpConfig;
use ctfgen::rng::seeded;
use ctfgen::scm::{Domain, GroundTruthScm, ScmDims};
use ctfgen::{Mlp, Tape, Tensor};

fn small_bundle(seed: u64) -> NcmBundle {
    NcmBundle::new(BundleConfig::with_dims(1, 4), &mut seeded(seed)).unwrap()
}

fn column(values: &[f64]) -> Tensor {
    Tensor::matrix(values.len(), 1, values.to_vec()).unwrap()
}

/// Context and noise generators output zero, so generated effects are
/// `mech(x, 0, 0)` regardless of the exogenous draws.
fn noiseless_bundle(seed: u64) -> NcmBundle {
    let mut b = small_bundle(seed);
    for net in [Net::CtxSource, Net::CtxTarget, Net::NoiseSource, Net::NoiseTarget] {
        let cfg: MlpConfig = b.config().net_config(net);
        *b.net_mut(net) = Mlp::zeros(cfg).unwrap();
    }
    b
}

fn imq(a: &[f64], b: &[f64]) -> f64 {
    let r2: f64 = a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum();
    1.0 / (1.0 + r2).sqrt()
}

#[test]
fn gen_effect_matches_finite_differences() {
    let mut bundle = small_bundle(3);
    let x = column(&[-0.6, 0.1, 0.8]);
    let draw = ExogenousDraw::sample(3, 1, &mut seeded(4));
    let weights = Tensor::matrix(3, 2, vec![0.3, -1.2, 0.7, 0.5, -0.4, 1.1]).unwrap();
    for domain in [Domain::Source, Domain::Target] {
        let eval = |b: &NcmBundle, grads: bool| {
            let mut tape = Tape::new();
            let vars = b.bind(&mut tape, true);
            let xv = tape.constant(x.clone());
            let y = gen_effect(b, &mut tape, &vars, domain, xv, &draw).unwrap();
            let w = tape.constant(weights.clone());
            let wy = tape.mul(y, w).unwrap();
            let loss = tape.sum(wy);
            let value = tape.value(loss).item();
            if !grads {
                return (value, Vec::new());
            }
            tape.backward(loss).unwrap();
            (value, b.grads(&tape, &vars).into_iter().flat_map(|t| t.into_data()).collect())
        };
        let (base, analytic) = eval(&bundle, true);
        let report = fd_compare(&analytic, 0, base, |i, offset| {
            shift(&mut bundle, i, offset);
            let v = eval(&bundle, false).0;
            shift(&mut bundle, i, -offset);
            v
        });
        assert!(report.checked > 100, "{report:?}");
        assert!(report.norm_rel < 1e-6, "{domain:?}: {report:?}");
    }
}

fn shift(b: &mut NcmBundle, mut index: usize, delta: f64) {
    for (_, p) in b.params_mut() {
        if index < p.len() {
            p.data_mut()[index] += delta;
            return;
        }
        index -= p.len();
    }
    panic!("index out of range");
}

#[test]
fn gen_effect_is_zero_for_zero_bundle() {
    let bundle = NcmBundle::zeros(BundleConfig::with_dims(2, 8)).unwrap();
    let mut tape = Tape::new();
    let vars = bundle.bind(&mut tape, false);
    let x = tape.constant(Tensor::matrix(3, 2, vec![0.5, -0.2, 0.9, 0.0, -1.0, 0.3]).unwrap());
    let draw = ExogenousDraw::sample(3, 2, &mut seeded(0));
    let y = gen_effect(&bundle, &mut tape, &vars, Domain::Target, x, &draw).unwrap();
    assert_eq!(tape.value(y).shape(), &[3, 4]);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn loss_gen_matches_direct_estimator() {
    let bundle = small_bundle(8);
    let (x, y) = (column(&[0.2, -0.7]), Tensor::matrix(2, 2, vec![1.4, 0.3, 0.9, -0.5]).unwrap());
    let q = 4;
    for domain in [Domain::Source, Domain::Target] {
        let mut tape = Tape::new();
        let vars = bundle.bind(&mut tape, false);
        let l = loss_gen(&bundle, &mut tape, &vars, domain, &x, &y, q, KernelConfig::default(), &mut seeded(5)).unwrap();
        let got = tape.value(l).item();

        // same draws, evaluated off the tape
        let draw = ExogenousDraw::sample(2 * q, 1, &mut seeded(5));
        let c = bundle.net(Net::ctx(domain)).predict(&draw.eta_c).unwrap();
        let n = bundle.net(Net::noise(domain)).predict(&draw.eta_n).unwrap();
        let xr = x.repeat_rows(q);
        let gen = bundle
            .net(Net::mech(domain))
            .predict(&Tensor::concat_cols(&[&xr, &c, &n]).unwrap())
            .unwrap();
        let gen = rows_of(&gen);
        let mut expected = 0.0;
        for i in 0..2 {
            let yi = y.row(i);
            let group = &gen[i * q..(i + 1) * q];
            let mut term = imq(yi, yi);
            for a in group {
                term -= 2.0 * imq(yi, a) / q as f64;
                for b in group {
                    term += imq(a, b) / (q * q) as f64;
                }
            }
            expected += term / 2.0;
        }
        assert!((got - expected).abs() < 1e-12, "{domain:?}: {got} vs {expected}");
    }
}

#[test]
fn loss_gen_single_point_is_one_conditional_loss() {
    let bundle = small_bundle(2);
    let (x, y) = (column(&[0.4]), Tensor::matrix(1, 2, vec![0.8, 0.1]).unwrap());
    let mut tape = Tape::new();
    let vars = bundle.bind(&mut tape, false);
    let l = loss_gen(&bundle, &mut tape, &vars, Domain::Source, &x, &y, 1, KernelConfig::default(), &mut seeded(9)).unwrap();
    let got = tape.value(l).item();

    let draw = ExogenousDraw::sample(1, 1, &mut seeded(9));
    let xv = tape.constant(x.clone());
    let g = gen_effect(&bundle, &mut tape, &vars, Domain::Source, xv, &draw).unwrap();
    let single = conditional_kls_loss(&mut tape, y.row(0), g, KernelConfig::default()).unwrap();
    assert_eq!(got, tape.value(single).item());
}

#[test]
fn loss_gen_is_invariant_to_batch_order() {
    let bundle = noiseless_bundle(5);
    let xs = [0.9, -0.3, 0.1, -0.8];
    let ys = [[1.0, 0.2], [0.4, -0.6], [0.7, 0.0], [1.3, -0.2]];
    let value = |order: &[usize]| {
        let x = column(&order.iter().map(|&i| xs[i]).collect::<Vec<_>>());
        let y = Tensor::from_rows(&order.iter().map(|&i| ys[i]).collect::<Vec<_>>()).unwrap();
        let mut tape = Tape::new();
        let vars = bundle.bind(&mut tape, false);
        let l = loss_gen(&bundle, &mut tape, &vars, Domain::Target, &x, &y, 3, KernelConfig::default(), &mut seeded(1)).unwrap();
        tape.value(l).item()
    };
    let base = value(&[0, 1, 2, 3]);
    for order in [[3, 2, 1, 0], [1, 3, 0, 2], [2, 0, 3, 1]] {
        assert!((value(&order) - base).abs() < 1e-14);
    }
}

/// The finite-q estimator with ground-truth draws averages to
/// `k(y,y) - 2 E k(y,Y) + E k(Y,Y')(1 - 1/q) + E k(Y,Y)/q`.
#[test]
fn conditional_loss_with_oracle_generator_matches_its_expectation() {
    let scm = GroundTruthScm::new(ScmDims::new(1).unwrap());
    let mut rng = seeded(31);
    let x = [0.3];
    let y_obs = scm.source_mechanism(&x, &[0.2], &[0.1]).unwrap();
    let draw = |rng: &mut ctfgen::rng::Rng| {
        let c = scm.sample_c(Domain::Source, rng);
        let n = scm.sample_n(Domain::Source, rng);
        scm.source_mechanism(&x, &c, &n).unwrap()
    };
    let m = 200_000;
    let (mut cross, mut pair) = (0.0, 0.0);
    for _ in 0..m {
        let (a, b) = (draw(&mut rng), draw(&mut rng));
        cross += imq(&y_obs, &a) / m as f64;
        pair += imq(&a, &b) / m as f64;
    }
    let q = 4;
    let expected = 1.0 - 2.0 * cross + pair * (1.0 - 1.0 / q as f64) + 1.0 / q as f64;

    let reps = 50_000;
    let mut mean = 0.0;
    for _ in 0..reps {
        let rows: Vec<Vec<f64>> = (0..q).map(|_| draw(&mut rng)).collect();
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::from_rows(&rows).unwrap());
        let l = conditional_kls_loss(&mut tape, &y_obs, g, KernelConfig::default()).unwrap();
        mean += tape.value(l).item() / reps as f64;
    }
    assert!((mean - expected).abs() < 2e-3, "{mean} vs {expected}");
    // the irreducible part is what remains as q grows
    let theta = 1.0 - 2.0 * cross + pair;
    assert!(theta > 0.0 && expected > theta);
}

#[test]
fn disambiguation_cost_vanishes_for_ground_truth_wiring() {
    let scm = GroundTruthScm::new(ScmDims::new(1).unwrap());
    let mut rng = seeded(77);
    let draws = 10_000;
    let mut swapped = Vec::with_capacity(draws);
    for _ in 0..draws {
        let x = scm.sample_x(Domain::Source, &mut rng);
        let c = scm.sample_c(Domain::Source, &mut rng);
        let ns = scm.sample_n(Domain::Source, &mut rng);
        let nt = scm.sample_n(Domain::Target, &mut rng);
        let ys = scm.source_mechanism(&x, &c, &ns).unwrap();
        let yt = scm.target_mechanism(&x, &c, &nt).unwrap();
        assert_eq!(BlockMse.eval(&ys, &yt, 1), 0.0);
        let ys = scm.source_mechanism(&x, &ns, &c).unwrap();
        let yt = scm.target_mechanism(&x, &nt, &c).unwrap();
        swapped.push(BlockMse.eval(&ys, &yt, 1));
    }
    let n = draws as f64;
    let mean = swapped.iter().sum::<f64>() / n;
    let var = swapped.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    assert!(mean > 10.0 * se, "mean {mean}, standard error {se}");
}

#[test]
fn loss_tr_with_zero_cost_is_zero() {
    let bundle = small_bundle(1);
    let mut tape = Tape::new();
    let vars = bundle.bind(&mut tape, true);
    let x = column(&[0.1, -0.4]);
    for wiring in [TrWiring::Correct, TrWiring::Swapped] {
        let l = loss_tr(&bundle, &mut tape, &vars, &x, 3, &ZeroCost, wiring, &mut seeded(2)).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }
}

#[test]
fn per_draw_costs_average_to_the_taped_loss() {
    let bundle = small_bundle(3);
    let x = column(&[0.3, -0.7, 0.9, 0.0]);
    for wiring in [TrWiring::Correct, TrWiring::Swapped] {
        let costs = tr_costs(&bundle, &x, &BlockMse, wiring, &mut seeded(5)).unwrap();
        assert_eq!(costs.len(), 4);
        let mut tape = Tape::new();
        let vars = bundle.bind(&mut tape, false);
        let l = loss_tr(&bundle, &mut tape, &vars, &x, 1, &BlockMse, wiring, &mut seeded(5)).unwrap();
        let mean = costs.iter().sum::<f64>() / 4.0;
        assert!((tape.value(l).item() - mean).abs() < 1e-12);
    }
}

#[test]
fn block_mse_on_tape_matches_pairwise_mean() {
    let bundle = small_bundle(6);
    let x = column(&[0.5, -0.9, 0.2]);
    let q = 2;
    let mut tape = Tape::new();
    let vars = bundle.bind(&mut tape, false);
    let l = loss_tr(&bundle, &mut tape, &vars, &x, q, &BlockMse, TrWiring::Correct, &mut seeded(12)).unwrap();
    let got = tape.value(l).item();

    let mut rng = seeded(12);
    let rows = 3 * q;
    let ec = ctfgen::ncm::standard_normal(rows, 1, &mut rng);
    let ens = ctfgen::ncm::standard_normal(rows, 1, &mut rng);
    let ent = ctfgen::ncm::standard_normal(rows, 1, &mut rng);
    let c = bundle.net(Net::CtxSource).predict(&ec).unwrap();
    let ns = bundle.net(Net::NoiseSource).predict(&ens).unwrap();
    let nt = bundle.net(Net::NoiseTarget).predict(&ent).unwrap();
    let xr = x.repeat_rows(q);
    let ys = bundle.net(Net::MechSource).predict(&Tensor::concat_cols(&[&xr, &c, &ns]).unwrap()).unwrap();
    let yt = bundle.net(Net::MechTarget).predict(&Tensor::concat_cols(&[&xr, &c, &nt]).unwrap()).unwrap();
    let expected = (0..rows).map(|i| BlockMse.eval(ys.row(i), yt.row(i), 1)).sum::<f64>() / rows as f64;
    assert!((got - expected).abs() < 1e-14, "{got} vs {expected}");
}

fn cs_and_gen(bundle: &NcmBundle, xs: &Tensor, xt: &Tensor, yt: &Tensor, eps: Option<f64>) -> (f64, f64, bool) {
    let kernel = KernelConfig::default();
    let mut tape = Tape::new();
    let vars = bundle.bind(&mut tape, false);
    let cs = loss_cs(bundle, &mut tape, &vars, xs, xt, yt, 3, eps, kernel, &mut seeded(40)).unwrap();
    let g = loss_gen(bundle, &mut tape, &vars, Domain::Target, xs, yt, 3, kernel, &mut seeded(40)).unwrap();
    (tape.value(cs.loss).item(), tape.value(g).item(), cs.converged)
}

#[test]
fn loss_cs_single_points_reduce_to_generator_loss() {
    let bundle = small_bundle(4);
    let (xs, xt) = (column(&[0.3]), column(&[-0.8]));
    let yt = Tensor::matrix(1, 2, vec![0.6, 1.9]).unwrap();
    let (cs, gen, converged) = cs_and_gen(&bundle, &xs, &xt, &yt, None);
    assert!(converged);
    assert!((cs - gen).abs() < 1e-14, "{cs} vs {gen}");
}

#[test]
fn loss_cs_with_matched_batches_equals_generator_loss() {
    let bundle = small_bundle(11);
    let x = column(&[-0.9, -0.2, 0.4, 1.0]);
    let yt = Tensor::matrix(4, 2, vec![0.1, 0.9, -0.3, 1.4, 0.8, 2.2, 0.5, 3.0]).unwrap();
    let (cs, gen, converged) = cs_and_gen(&bundle, &x, &x, &yt, Some(1e-3));
    assert!(converged);
    assert!((cs - gen).abs() < 1e-6, "{cs} vs {gen}");
}

#[test]
fn stage1_weights_select_terms() {
    let bundle = small_bundle(21);
    let xs = column(&[0.2, -0.5, 0.7]);
    let ys = Tensor::matrix(3, 2, vec![1.0, 0.3, 0.8, -0.4, 1.6, 0.9]).unwrap();
    let xt = column(&[0.9, -0.9, 0.6]);
    let yt = Tensor::matrix(3, 2, vec![1.1, 2.0, -0.7, 1.3, 0.4, 2.6]).unwrap();
    let kernel = KernelConfig::default();
    let settings = |weights| Stage1Settings {
        weights,
        q_gen: 3,
        q_tr: 2,
        kernel,
        cs_epsilon: None,
        dis: &BlockMse,
    };

    let only_source = Stage1Weights {
        source: 1.0,
        target: 0.0,
        tr: 0.0,
        cs: 0.0,
    };
    let mut tape = Tape::new();
    let vars = bundle.bind(&mut tape, false);
    let total = total_stage1_loss(&bundle, &mut tape, &vars, (&xs, &ys), (&xt, &yt), &settings(only_source), &mut seeded(3)).unwrap();
    let single = loss_gen(&bundle, &mut tape, &vars, Domain::Source, &xs, &ys, 3, kernel, &mut seeded(3)).unwrap();
    assert_eq!(tape.value(total.total).item(), tape.value(single).item());
    assert_eq!((total.gen_target, total.cs, total.tr), (0.0, 0.0, 0.0));

    let mut tape = Tape::new();
    let vars = bundle.bind(&mut tape, false);
    let t = total_stage1_loss(&bundle, &mut tape, &vars, (&xs, &ys), (&xt, &yt), &settings(Stage1Weights::default()), &mut seeded(3)).unwrap();
    assert_eq!(t.cs, 0.0);
    let sum = t.gen_source + t.gen_target + t.tr;
    assert!((tape.value(t.total).item() - sum).abs() < 1e-14);
    assert!(t.gen_source > 0.0 && t.gen_target > 0.0 && t.tr > 0.0);
}

#[test]
fn losses_reject_bad_shapes() {
    let bundle = small_bundle(0);
    let mut tape = Tape::new();
    let vars = bundle.bind(&mut tape, false);
    let kernel = KernelConfig::default();
    let x = column(&[0.1, 0.2]);
    let y_bad = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
    let y = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
    let mut rng = seeded(0);
    assert!(loss_gen(&bundle, &mut tape, &vars, Domain::Source, &x, &y_bad, 2, kernel, &mut rng).is_err());
    assert!(loss_gen(&bundle, &mut tape, &vars, Domain::Source, &x, &y, 0, kernel, &mut rng).is_err());
    let empty = Tensor::matrix(0, 1, vec![]).unwrap();
    assert!(loss_tr(&bundle, &mut tape, &vars, &empty, 2, &BlockMse, TrWiring::Correct, &mut rng).is_err());
    assert!(loss_cs(&bundle, &mut tape, &vars, &empty, &x, &y, 2, None, kernel, &mut rng).is_err());
}
