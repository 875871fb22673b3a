//! Helpers shared by the integration test targets.

#![allow(dead_code)]

use ctfgen::kernel::KernelConfig;
use ctfgen::ncm::{
    loss_cs, loss_gen, loss_tr, total_stage1_loss, BlockMse, BundleConfig, NcmBundle,
    Stage1Settings, Stage1Weights, TrWiring,
};
use ctfgen::posterior::{loss_pos, Distance, PosSettings, PosteriorConfig, PosteriorNet};
use ctfgen::rng::seeded;
use ctfgen::scm::{generate_dataset, Domain, ScmDims};
use ctfgen::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    GenSource,
    GenTarget,
    Cs,
    Tr,
    /// Posterior loss with the bundle frozen.
    PosStage2(Distance),
    /// Posterior loss with every network trainable; no standardization.
    PosJoint(Distance),
    Stage1Total,
}

pub const ALL_LOSSES: [LossKind; 9] = [
    LossKind::GenSource,
    LossKind::GenTarget,
    LossKind::Cs,
    LossKind::Tr,
    LossKind::PosStage2(Distance::MmdImq),
    LossKind::PosStage2(Distance::Energy),
    LossKind::PosJoint(Distance::MmdImq),
    LossKind::PosJoint(Distance::Energy),
    LossKind::Stage1Total,
];

pub struct Fixture {
    pub bundle: NcmBundle,
    pub post: PosteriorNet,
    pub xs: Tensor,
    pub ys: Tensor,
    pub xt: Tensor,
    pub yt: Tensor,
}

/// Hidden width 4, d = 1, three data points per domain.
pub fn small_fixture(seed: u64) -> Fixture {
    let mut rng = seeded(seed);
    let bundle = NcmBundle::new(BundleConfig::with_dims(1, 4), &mut rng).unwrap();
    let post = PosteriorNet::new(PosteriorConfig::with_dims(1, 4), &mut rng).unwrap();
    let dims = ScmDims::new(1).unwrap();
    let s = generate_dataset(Domain::Source, 3, dims, seed, false).unwrap();
    let t = generate_dataset(Domain::Target, 3, dims, seed, false).unwrap();
    Fixture {
        bundle,
        post,
        xs: s.x,
        ys: s.y,
        xt: t.x,
        yt: t.y,
    }
}

/// Loss value and, if requested, gradients (bundle params then posterior params).
pub fn eval_loss(fx: &Fixture, kind: LossKind, seed: u64, grads: bool) -> (f64, Vec<f64>) {
    let mut rng = seeded(seed);
    let mut tape = Tape::new();
    let kernel = KernelConfig::default();
    let bundle_trainable = !matches!(kind, LossKind::PosStage2(_));
    let bv = fx.bundle.bind(&mut tape, bundle_trainable);
    let pv = fx.post.bind(&mut tape, true);
    let loss = match kind {
        LossKind::GenSource => {
            loss_gen(&fx.bundle, &mut tape, &bv, Domain::Source, &fx.xs, &fx.ys, 3, kernel, &mut rng).unwrap()
        }
        LossKind::GenTarget => {
            loss_gen(&fx.bundle, &mut tape, &bv, Domain::Target, &fx.xt, &fx.yt, 3, kernel, &mut rng).unwrap()
        }
        LossKind::Cs => {
            loss_cs(&fx.bundle, &mut tape, &bv, &fx.xs, &fx.xt, &fx.yt, 3, None, kernel, &mut rng)
                .unwrap()
                .loss
        }
        LossKind::Tr => {
            loss_tr(&fx.bundle, &mut tape, &bv, &fx.xs, 2, &BlockMse, TrWiring::Correct, &mut rng).unwrap()
        }
        LossKind::PosStage2(distance) | LossKind::PosJoint(distance) => {
            let settings = PosSettings {
                q: 2,
                distance,
                standardize: matches!(kind, LossKind::PosStage2(_)),
                ..PosSettings::default()
            };
            loss_pos(&fx.bundle, &bv, &fx.post, &pv, &mut tape, &fx.xs, &fx.ys, &settings, &mut rng).unwrap()
        }
        LossKind::Stage1Total => {
            let settings = Stage1Settings {
                weights: Stage1Weights {
                    source: 1.0,
                    target: 0.7,
                    tr: 1.3,
                    cs: 0.5,
                },
                q_gen: 3,
                q_tr: 2,
                kernel,
                cs_epsilon: None,
                dis: &BlockMse,
            };
            total_stage1_loss(&fx.bundle, &mut tape, &bv, (&fx.xs, &fx.ys), (&fx.xt, &fx.yt), &settings, &mut rng)
                .unwrap()
                .total
        }
    };
    let value = tape.value(loss).item();
    if !grads {
        return (value, Vec::new());
    }
    tape.backward(loss).unwrap();
    let mut g: Vec<f64> = fx
        .bundle
        .grads(&tape, &bv)
        .into_iter()
        .flat_map(|t| t.into_data())
        .collect();
    g.extend(fx.post.mlp().grads(&tape, &pv).into_iter().flat_map(|t| t.into_data()));
    (value, g)
}

pub fn perturb(fx: &mut Fixture, index: usize, delta: f64) {
    let mut i = index;
    for (_, p) in fx.bundle.params_mut() {
        if i < p.len() {
            p.data_mut()[i] += delta;
            return;
        }
        i -= p.len();
    }
    for (_, p) in fx.post.mlp_mut().params_mut() {
        if i < p.len() {
            p.data_mut()[i] += delta;
            return;
        }
        i -= p.len();
    }
    panic!("parameter index {index} out of range");
}

/// Finite-difference comparison over every parameter the loss depends on.
#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    /// `||g - fd|| / max(||g||, ||fd||)` over the checked parameters.
    pub norm_rel: f64,
    /// Worst element-wise `|g - fd| / max(|g|, |fd|, 1e-3)`, with its index.
    pub worst: (f64, usize),
    pub checked: usize,
}

/// Compares analytic gradients with central differences.
///
/// `at(i, offset)` evaluates the loss with parameter `i` shifted by `offset`.
/// A two-point stencil at `h = 1e-5` is used first; where it disagrees with
/// the analytic value, a four-point stencil at `h = 1e-4` and a two-point
/// stencil at `h = 1e-6` are tried and the closest estimate kept, since a
/// stencil can straddle a PReLU kink. Parameters with an exactly zero
/// gradient whose perturbation leaves the loss bit-identical are skipped as
/// unused.
pub fn fd_compare(analytic: &[f64], first: usize, base: f64, mut at: impl FnMut(usize, f64) -> f64) -> FdReport {
    let (mut diff2, mut a2, mut f2) = (0.0, 0.0, 0.0);
    let mut worst = (0.0, 0);
    let mut checked = 0;
    for (i, &a) in analytic.iter().enumerate().skip(first) {
        let h = 1e-5;
        let up = at(i, h);
        if a == 0.0 && up.to_bits() == base.to_bits() {
            continue;
        }
        checked += 1;
        let rel = |fd: f64| (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
        let mut fd = (up - at(i, -h)) / (2.0 * h);
        if rel(fd) > 1e-6 {
            let w = 1e-4;
            let wide = (8.0 * (at(i, w) - at(i, -w)) - (at(i, 2.0 * w) - at(i, -2.0 * w))) / (12.0 * w);
            let narrow = (at(i, 1e-6) - at(i, -1e-6)) / 2e-6;
            for alt in [wide, narrow] {
                if (a - alt).abs() < (a - fd).abs() {
                    fd = alt;
                }
            }
        }
        diff2 += (a - fd) * (a - fd);
        a2 += a * a;
        f2 += fd * fd;
        if rel(fd) > worst.0 {
            worst = (rel(fd), i);
            if std::env::var_os("FD_DEBUG").is_some() {
                eprintln!("param {i}: analytic {a:e} fd {fd:e}");
            }
        }
    }
    let norm = a2.max(f2).sqrt();
    FdReport {
        norm_rel: if norm > 0.0 { diff2.sqrt() / norm } else { 0.0 },
        worst,
        checked,
    }
}

pub fn fd_check(fx: &mut Fixture, kind: LossKind, seed: u64) -> FdReport {
    let (base, analytic) = eval_loss(fx, kind, seed, true);
    let first = match kind {
        // a frozen bundle has zero analytic gradient by construction
        LossKind::PosStage2(_) => fx.bundle.num_params(),
        _ => 0,
    };
    fd_compare(&analytic, first, base, |i, offset| {
        perturb(fx, i, offset);
        let v = eval_loss(fx, kind, seed, false).0;
        perturb(fx, i, -offset);
        v
    })
}

/// Double-sum MMD^2 with the IMQ kernel, straight from the definition.
pub fn brute_mmd2(a: &[Vec<f64>], b: &[Vec<f64>], rho: f64, unbiased: bool) -> f64 {
    let k = |x: &[f64], y: &[f64]| {
        let r2: f64 = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
        1.0 / (rho + r2).sqrt()
    };
    let within = |s: &[Vec<f64>]| {
        let mut total = 0.0;
        let mut count = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if unbiased && i == j {
                    continue;
                }
                total += k(&s[i], &s[j]);
                count += 1.0;
            }
        }
        total / count
    };
    let mut cross = 0.0;
    for x in a {
        for y in b {
            cross += k(x, y);
        }
    }
    within(a) + within(b) - 2.0 * cross / (a.len() * b.len()) as f64
}

pub fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}
