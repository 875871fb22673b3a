//! The joint neural causal model and its stage-1 training losses.
//!
//! Six networks: a mechanism per domain mapping `(x, c, n)` to the effect,
//! and per domain a context and a noise pushforward generator fed with
//! standard normal draws. The context is effect-intrinsic and shared across
//! domains, the noise is domain-intrinsic.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::kernel::sinkhorn::{default_epsilon, sinkhorn, sq_euclidean_cost};
use crate::kernel::{grouped_kls_loss, GroupWeights, KernelConfig};
use crate::nn::{MlpConfig, MlpVars};
use crate::scm::Domain;
use crate::{Mlp, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BundleConfig {
    pub d: usize,
    pub hidden_dim: usize,
    pub mech_hidden: usize,
    pub ctx_hidden: usize,
    pub noise_hidden: usize,
    pub mech_prelu: f64,
    pub gen_prelu: f64,
}

impl Default for BundleConfig {
    fn default() -> Self {
        Self {
            d: 1,
            hidden_dim: 128,
            mech_hidden: 5,
            ctx_hidden: 1,
            noise_hidden: 3,
            mech_prelu: 0.25,
            gen_prelu: 0.01,
        }
    }
}

impl BundleConfig {
    pub fn with_dims(d: usize, hidden_dim: usize) -> Self {
        Self {
            d,
            hidden_dim,
            ..Self::default()
        }
    }

    pub fn net_config(&self, net: Net) -> MlpConfig {
        let d = self.d;
        let (input_dim, output_dim, num_hidden, prelu_init, use_skip) = match net {
            Net::MechSource | Net::MechTarget => (3 * d, 2 * d, self.mech_hidden, self.mech_prelu, false),
            Net::CtxSource | Net::CtxTarget => (d, d, self.ctx_hidden, self.gen_prelu, true),
            Net::NoiseSource | Net::NoiseTarget => (d, d, self.noise_hidden, self.gen_prelu, true),
        };
        MlpConfig {
            input_dim,
            hidden_dim: self.hidden_dim,
            num_hidden,
            output_dim,
            prelu_init,
            use_skip,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("d must be at least 1".into()));
        }
        Net::ALL
            .iter()
            .try_for_each(|&n| self.net_config(n).validate())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Net {
    MechSource,
    MechTarget,
    CtxSource,
    CtxTarget,
    NoiseSource,
    NoiseTarget,
}

impl Net {
    pub const ALL: [Net; 6] = [
        Net::MechSource,
        Net::MechTarget,
        Net::CtxSource,
        Net::CtxTarget,
        Net::NoiseSource,
        Net::NoiseTarget,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Net::MechSource => "mech_source",
            Net::MechTarget => "mech_target",
            Net::CtxSource => "ctx_gen_source",
            Net::CtxTarget => "ctx_gen_target",
            Net::NoiseSource => "noise_gen_source",
            Net::NoiseTarget => "noise_gen_target",
        }
    }

    pub fn mech(domain: Domain) -> Net {
        match domain {
            Domain::Source => Net::MechSource,
            Domain::Target => Net::MechTarget,
        }
    }

    pub fn ctx(domain: Domain) -> Net {
        match domain {
            Domain::Source => Net::CtxSource,
            Domain::Target => Net::CtxTarget,
        }
    }

    pub fn noise(domain: Domain) -> Net {
        match domain {
            Domain::Source => Net::NoiseSource,
            Domain::Target => Net::NoiseTarget,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NcmBundle {
    config: BundleConfig,
    nets: [Mlp; 6],
}

/// Tape handles of a bound bundle.
#[derive(Clone, Debug)]
pub struct BundleVars {
    nets: [MlpVars; 6],
}

impl BundleVars {
    pub fn net(&self, net: Net) -> &MlpVars {
        &self.nets[net.index()]
    }
}

impl NcmBundle {
    /// Fresh initialization; networks are drawn in [`Net::ALL`] order.
    pub fn new<R: Rng + ?Sized>(config: BundleConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut build = |n: Net| Mlp::new(config.net_config(n), rng);
        let nets = [
            build(Net::MechSource)?,
            build(Net::MechTarget)?,
            build(Net::CtxSource)?,
            build(Net::CtxTarget)?,
            build(Net::NoiseSource)?,
            build(Net::NoiseTarget)?,
        ];
        Ok(Self { config, nets })
    }

    pub fn zeros(config: BundleConfig) -> Result<Self> {
        config.validate()?;
        let build = |n: Net| Mlp::zeros(config.net_config(n));
        let nets = [
            build(Net::MechSource)?,
            build(Net::MechTarget)?,
            build(Net::CtxSource)?,
            build(Net::CtxTarget)?,
            build(Net::NoiseSource)?,
            build(Net::NoiseTarget)?,
        ];
        Ok(Self { config, nets })
    }

    /// Assemble from networks given in [`Net::ALL`] order.
    pub fn from_nets(config: BundleConfig, nets: [Mlp; 6]) -> Result<Self> {
        config.validate()?;
        for (&n, net) in Net::ALL.iter().zip(&nets) {
            if *net.config() != config.net_config(n) {
                return Err(Error::Dimension(format!(
                    "{} has configuration {:?}, expected {:?}",
                    n.name(),
                    net.config(),
                    config.net_config(n)
                )));
            }
        }
        Ok(Self { config, nets })
    }

    pub fn config(&self) -> &BundleConfig {
        &self.config
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    pub fn net(&self, net: Net) -> &Mlp {
        &self.nets[net.index()]
    }

    pub fn net_mut(&mut self, net: Net) -> &mut Mlp {
        &mut self.nets[net.index()]
    }

    /// All parameters, named `<net>.<param>`, in a fixed order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        Net::ALL
            .iter()
            .flat_map(|&n| {
                self.net(n)
                    .params()
                    .into_iter()
                    .map(move |(p, t)| (format!("{}.{p}", n.name()), t))
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        Net::ALL
            .iter()
            .zip(self.nets.iter_mut())
            .flat_map(|(&n, net)| {
                net.params_mut()
                    .into_iter()
                    .map(move |(p, t)| (format!("{}.{p}", n.name()), t))
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.nets.iter().map(Mlp::num_params).sum()
    }

    /// SHA-256 over the little-endian bytes of every parameter.
    pub fn digest(&self) -> String {
        param_digest(self.params().into_iter().map(|(_, t)| t))
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BundleVars {
        BundleVars {
            nets: self.nets.each_ref().map(|n| n.bind(tape, trainable)),
        }
    }

    /// Gradients in [`NcmBundle::params`] order.
    pub fn grads(&self, tape: &Tape, vars: &BundleVars) -> Vec<Tensor> {
        Net::ALL
            .iter()
            .flat_map(|&n| self.net(n).grads(tape, vars.net(n)))
            .collect()
    }

    pub fn forward(&self, tape: &mut Tape, vars: &BundleVars, net: Net, input: Var) -> Result<Var> {
        self.net(net).forward(tape, vars.net(net), input)
    }
}

pub fn param_digest<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> String {
    let mut h = Sha256::new();
    for t in params {
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Standard normal inputs of the context and noise generators, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ExogenousDraw {
    pub eta_c: Tensor,
    pub eta_n: Tensor,
}

impl ExogenousDraw {
    /// All of `eta_c` is drawn before `eta_n`.
    pub fn sample<R: Rng + ?Sized>(rows: usize, d: usize, rng: &mut R) -> Self {
        let eta_c = standard_normal(rows, d, rng);
        let eta_n = standard_normal(rows, d, rng);
        Self { eta_c, eta_n }
    }
}

pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).expect("sized")
}

/// `mech(x, ctx_gen(eta_c), noise_gen(eta_n))` for a batch of rows.
pub fn gen_effect(
    bundle: &NcmBundle,
    tape: &mut Tape,
    vars: &BundleVars,
    domain: Domain,
    x: Var,
    draw: &ExogenousDraw,
) -> Result<Var> {
    let ec = tape.constant(draw.eta_c.clone());
    let en = tape.constant(draw.eta_n.clone());
    let c = bundle.forward(tape, vars, Net::ctx(domain), ec)?;
    let n = bundle.forward(tape, vars, Net::noise(domain), en)?;
    mechanism(bundle, tape, vars, domain, x, c, n)
}

/// Mechanism network on explicit `(x, c, n)` rows.
pub fn mechanism(
    bundle: &NcmBundle,
    tape: &mut Tape,
    vars: &BundleVars,
    domain: Domain,
    x: Var,
    c: Var,
    n: Var,
) -> Result<Var> {
    let input = tape.concat_cols(&[x, c, n])?;
    bundle.forward(tape, vars, Net::mech(domain), input)
}

fn check_batch(x: &Tensor, y: Option<&Tensor>, d: usize) -> Result<()> {
    if x.rows() == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    if x.cols() != d {
        return Err(Error::Dimension(format!("covariates of width {} for d={d}", x.cols())));
    }
    if let Some(y) = y {
        if y.cols() != 2 * d || y.rows() != x.rows() {
            return Err(Error::Dimension(format!(
                "effects of shape {:?} for {} covariate rows and d={d}",
                y.shape(),
                x.rows()
            )));
        }
    }
    Ok(())
}

/// Mean over the batch of the conditional kernel-mean loss with `q` fresh
/// generated effects per data point.
#[allow(clippy::too_many_arguments)]
pub fn loss_gen<R: Rng + ?Sized>(
    bundle: &NcmBundle,
    tape: &mut Tape,
    vars: &BundleVars,
    domain: Domain,
    x: &Tensor,
    y: &Tensor,
    q: usize,
    kernel: KernelConfig,
    rng: &mut R,
) -> Result<Var> {
    check_batch(x, Some(y), bundle.d())?;
    if q == 0 {
        return Err(Error::Contract("q_gen must be at least 1".into()));
    }
    let n = x.rows();
    let xr = tape.constant(x.repeat_rows(q));
    let draw = ExogenousDraw::sample(n * q, bundle.d(), rng);
    let gen = gen_effect(bundle, tape, vars, domain, xr, &draw)?;
    grouped_kls_loss(tape, gen, y, q, GroupWeights::diagonal(n, 1.0 / n as f64), kernel)
}

/// Cost comparing a source effect with a target effect generated from the same latents.
pub trait DisCost: Send + Sync {
    /// Mean cost over rows on the tape.
    fn cost(&self, tape: &mut Tape, y_source: Var, y_target: Var, d: usize) -> Result<Var>;

    /// Cost of a single pair.
    fn eval(&self, y_source: &[f64], y_target: &[f64], d: usize) -> f64;
}

/// `||y_s[:d] - y_t[d:] / 2||^2`: the blocks driven by the shared context.
#[derive(Clone, Copy, Debug, Default)]
pub struct BlockMse;

impl DisCost for BlockMse {
    fn cost(&self, tape: &mut Tape, y_source: Var, y_target: Var, d: usize) -> Result<Var> {
        let s = tape.slice_cols(y_source, 0, d)?;
        let t = tape.slice_cols(y_target, d, 2 * d)?;
        let t = tape.scale(t, 0.5);
        let diff = tape.sub(s, t)?;
        let sq = tape.square(diff);
        let per_row = tape.sum_cols(sq);
        Ok(tape.mean(per_row))
    }

    fn eval(&self, y_source: &[f64], y_target: &[f64], d: usize) -> f64 {
        (0..d)
            .map(|i| (y_source[i] - 0.5 * y_target[d + i]).powi(2))
            .sum()
    }
}

/// Cost that is identically zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroCost;

impl DisCost for ZeroCost {
    fn cost(&self, tape: &mut Tape, _y_source: Var, _y_target: Var, _d: usize) -> Result<Var> {
        Ok(tape.constant(Tensor::scalar(0.0)))
    }

    fn eval(&self, _y_source: &[f64], _y_target: &[f64], _d: usize) -> f64 {
        0.0
    }
}

/// Which generator feeds which slot in the disambiguation loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TrWiring {
    /// Shared source context in both context slots, domain noises in the noise slots.
    #[default]
    Correct,
    /// Shared context in both noise slots, domain noises in the context slots.
    Swapped,
}

/// Disambiguation loss: the same `(x, c)` pushed through both mechanisms
/// with independent domain noises, compared by `dis`.
///
/// Draws `eta_c`, `eta_n` (source) and `eta_n'` (target) for `n * q` rows, in that order.
#[allow(clippy::too_many_arguments)]
pub fn loss_tr<R: Rng + ?Sized>(
    bundle: &NcmBundle,
    tape: &mut Tape,
    vars: &BundleVars,
    x: &Tensor,
    q: usize,
    dis: &dyn DisCost,
    wiring: TrWiring,
    rng: &mut R,
) -> Result<Var> {
    let d = bundle.d();
    check_batch(x, None, d)?;
    if q == 0 {
        return Err(Error::Contract("q_tr must be at least 1".into()));
    }
    let (ys, yt) = tr_effects(bundle, tape, vars, x, q, wiring, rng)?;
    dis.cost(tape, ys, yt, d)
}

/// Per-draw disambiguation costs, one per row of `x`, without gradients.
/// Same draw order as [`loss_tr`] with `q = 1`.
pub fn tr_costs<R: Rng + ?Sized>(
    bundle: &NcmBundle,
    x: &Tensor,
    dis: &dyn DisCost,
    wiring: TrWiring,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let d = bundle.d();
    check_batch(x, None, d)?;
    let mut tape = Tape::new();
    let vars = bundle.bind(&mut tape, false);
    let (ys, yt) = tr_effects(bundle, &mut tape, &vars, x, 1, wiring, rng)?;
    let (ys, yt) = (tape.value(ys), tape.value(yt));
    Ok((0..x.rows()).map(|i| dis.eval(ys.row(i), yt.row(i), d)).collect())
}

#[allow(clippy::too_many_arguments)]
fn tr_effects<R: Rng + ?Sized>(
    bundle: &NcmBundle,
    tape: &mut Tape,
    vars: &BundleVars,
    x: &Tensor,
    q: usize,
    wiring: TrWiring,
    rng: &mut R,
) -> Result<(Var, Var)> {
    let d = bundle.d();
    let rows = x.rows() * q;
    let xr = tape.constant(x.repeat_rows(q));
    let ec = tape.constant(standard_normal(rows, d, rng));
    let ens = tape.constant(standard_normal(rows, d, rng));
    let ent = tape.constant(standard_normal(rows, d, rng));
    let c = bundle.forward(tape, vars, Net::CtxSource, ec)?;
    let ns = bundle.forward(tape, vars, Net::NoiseSource, ens)?;
    let nt = bundle.forward(tape, vars, Net::NoiseTarget, ent)?;
    Ok(match wiring {
        TrWiring::Correct => (
            mechanism(bundle, tape, vars, Domain::Source, xr, c, ns)?,
            mechanism(bundle, tape, vars, Domain::Target, xr, c, nt)?,
        ),
        TrWiring::Swapped => (
            mechanism(bundle, tape, vars, Domain::Source, xr, ns, c)?,
            mechanism(bundle, tape, vars, Domain::Target, xr, nt, c)?,
        ),
    })
}

/// Output of [`loss_cs`].
#[derive(Clone, Copy, Debug)]
pub struct CsLoss {
    pub loss: Var,
    pub converged: bool,
}

/// Covariate-shift corrective term: the target generator is evaluated at
/// source covariates and matched to target effects through an entropic OT
/// coupling between the covariate batches.
#[allow(clippy::too_many_arguments)]
pub fn loss_cs<R: Rng + ?Sized>(
    bundle: &NcmBundle,
    tape: &mut Tape,
    vars: &BundleVars,
    source_x: &Tensor,
    target_x: &Tensor,
    target_y: &Tensor,
    q: usize,
    epsilon: Option<f64>,
    kernel: KernelConfig,
    rng: &mut R,
) -> Result<CsLoss> {
    let d = bundle.d();
    check_batch(source_x, None, d)?;
    check_batch(target_x, Some(target_y), d)?;
    if q == 0 {
        return Err(Error::Contract("q_gen must be at least 1".into()));
    }
    let cost = sq_euclidean_cost(source_x, target_x)?;
    let eps = epsilon.unwrap_or_else(|| default_epsilon(&cost));
    let ot = sinkhorn(&cost, eps, SINKHORN_MAX_ITERS, SINKHORN_TOL)?;
    let m = source_x.rows();
    let xr = tape.constant(source_x.repeat_rows(q));
    let draw = ExogenousDraw::sample(m * q, d, rng);
    let gen = gen_effect(bundle, tape, vars, Domain::Target, xr, &draw)?;
    let loss = grouped_kls_loss(tape, gen, target_y, q, GroupWeights::dense(&ot.plan), kernel)?;
    Ok(CsLoss {
        loss,
        converged: ot.converged,
    })
}

pub const SINKHORN_MAX_ITERS: usize = 2000;
pub const SINKHORN_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1Weights {
    pub source: f64,
    pub target: f64,
    pub tr: f64,
    pub cs: f64,
}

impl Default for Stage1Weights {
    fn default() -> Self {
        Self {
            source: 1.0,
            target: 1.0,
            tr: 1.0,
            cs: 0.0,
        }
    }
}

/// Per-term settings of the stage-1 objective.
#[derive(Clone, Copy)]
pub struct Stage1Settings<'a> {
    pub weights: Stage1Weights,
    pub q_gen: usize,
    pub q_tr: usize,
    pub kernel: KernelConfig,
    pub cs_epsilon: Option<f64>,
    pub dis: &'a dyn DisCost,
}

/// Stage-1 objective on the tape plus the value of every term.
///
/// Disabled terms (weight 0) are not evaluated and report exactly 0.
#[derive(Clone, Copy, Debug)]
pub struct Stage1Loss {
    pub total: Var,
    pub gen_source: f64,
    pub gen_target: f64,
    pub cs: f64,
    pub tr: f64,
    pub cs_converged: bool,
}

/// `w_S l_gen^S + w_T l_gen^T + w_cs l_cs + w_tr l_tr`, terms drawn in that order.
#[allow(clippy::too_many_arguments)]
pub fn total_stage1_loss<R: Rng + ?Sized>(
    bundle: &NcmBundle,
    tape: &mut Tape,
    vars: &BundleVars,
    source: (&Tensor, &Tensor),
    target: (&Tensor, &Tensor),
    settings: &Stage1Settings<'_>,
    rng: &mut R,
) -> Result<Stage1Loss> {
    let w = settings.weights;
    let mut total = tape.constant(Tensor::scalar(0.0));
    let mut add = |tape: &mut Tape, term: Var, weight: f64| -> Result<f64> {
        let v = tape.value(term).item();
        let scaled = tape.scale(term, weight);
        total = tape.add(total, scaled)?;
        Ok(v)
    };
    let mut out = (0.0, 0.0, 0.0, 0.0, true);
    if w.source != 0.0 {
        let l = loss_gen(bundle, tape, vars, Domain::Source, source.0, source.1, settings.q_gen, settings.kernel, rng)?;
        out.0 = add(tape, l, w.source)?;
    }
    if w.target != 0.0 {
        let l = loss_gen(bundle, tape, vars, Domain::Target, target.0, target.1, settings.q_gen, settings.kernel, rng)?;
        out.1 = add(tape, l, w.target)?;
    }
    if w.cs != 0.0 {
        let cs = loss_cs(
            bundle,
            tape,
            vars,
            source.0,
            target.0,
            target.1,
            settings.q_gen,
            settings.cs_epsilon,
            settings.kernel,
            rng,
        )?;
        out.2 = add(tape, cs.loss, w.cs)?;
        out.4 = cs.converged;
    }
    if w.tr != 0.0 {
        let l = loss_tr(bundle, tape, vars, source.0, settings.q_tr, settings.dis, TrWiring::Correct, rng)?;
        out.3 = add(tape, l, w.tr)?;
    }
    Ok(Stage1Loss {
        total,
        gen_source: out.0,
        gen_target: out.1,
        cs: out.2,
        tr: out.3,
        cs_converged: out.4,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn small() -> BundleConfig {
        BundleConfig::with_dims(1, 4)
    }

    #[test]
    fn zero_bundle_generates_zero() {
        let b = NcmBundle::zeros(small()).unwrap();
        let mut t = Tape::new();
        let v = b.bind(&mut t, false);
        let x = t.constant(Tensor::matrix(3, 1, vec![0.2, -0.7, 0.9]).unwrap());
        let draw = ExogenousDraw::sample(3, 1, &mut seeded(1));
        for dom in [Domain::Source, Domain::Target] {
            let y = gen_effect(&b, &mut t, &v, dom, x, &draw).unwrap();
            assert_eq!(t.value(y).shape(), &[3, 2]);
            assert!(t.value(y).data().iter().all(|&e| e == 0.0));
        }
    }

    #[test]
    fn architecture_follows_config() {
        let b = NcmBundle::new(BundleConfig::default(), &mut seeded(0)).unwrap();
        assert_eq!(b.net(Net::MechSource).hidden_layers().len(), 5);
        assert!(b.net(Net::MechSource).projection().is_none());
        assert_eq!(b.net(Net::CtxTarget).hidden_layers().len(), 1);
        assert!(b.net(Net::CtxTarget).projection().is_some());
        assert_eq!(b.net(Net::NoiseSource).hidden_layers().len(), 3);
        assert_eq!(b.net(Net::MechTarget).hidden_layers()[0].slope.item(), 0.25);
        assert_eq!(b.net(Net::NoiseTarget).hidden_layers()[0].slope.item(), 0.01);
        assert_eq!(b.net(Net::MechSource).hidden_layers()[0].dense.weight.shape(), &[3, 128]);
    }

    #[test]
    fn digest_tracks_parameters() {
        let mut b = NcmBundle::new(small(), &mut seeded(2)).unwrap();
        let before = b.digest();
        assert_eq!(before, b.clone().digest());
        b.params_mut()[0].1.data_mut()[0] += 1e-12;
        assert_ne!(before, b.digest());
    }

    #[test]
    fn block_mse_tape_matches_eval() {
        let ys = Tensor::matrix(2, 4, vec![0.1, 0.2, 0.3, 0.4, -1.0, 0.5, 2.0, 0.0]).unwrap();
        let yt = Tensor::matrix(2, 4, vec![1.0, 1.0, 0.6, 0.2, 0.0, 0.0, -2.0, 3.0]).unwrap();
        let mut t = Tape::new();
        let (a, b) = (t.constant(ys.clone()), t.constant(yt.clone()));
        let l = BlockMse.cost(&mut t, a, b, 2).unwrap();
        let expected = 0.5 * (BlockMse.eval(ys.row(0), yt.row(0), 2) + BlockMse.eval(ys.row(1), yt.row(1), 2));
        assert!((t.value(l).item() - expected).abs() < 1e-15);
        assert_eq!(BlockMse.eval(&[1.0, 9.0], &[7.0, 2.0], 1), 0.0);
    }
}
