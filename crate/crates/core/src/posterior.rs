//! Pushforward posterior generator for abduction of the source context.
//!
//! `g(x, y, eta)` maps a factual pair and standard normal noise to a context
//! sample. It is trained by matching the joint of `(x, c, n, y)` tuples the
//! generative model produces against tuples built from data with the
//! context supplied by `g`.

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::kernel::{energy_distance_loss, mmd2_loss, sinkhorn_divergence_loss, KernelConfig};
use crate::ncm::{mechanism, standard_normal, BundleVars, NcmBundle, Net};
use crate::nn::{MlpConfig, MlpVars};
use crate::scm::Domain;
use crate::{Mlp, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PosteriorConfig {
    pub d: usize,
    /// Width of the pushforward noise; `0` means `d`.
    pub d_eta: usize,
    pub hidden_dim: usize,
    pub num_hidden: usize,
    pub prelu_init: f64,
}

impl Default for PosteriorConfig {
    fn default() -> Self {
        Self {
            d: 1,
            d_eta: 0,
            hidden_dim: 128,
            num_hidden: 3,
            prelu_init: 0.01,
        }
    }
}

impl PosteriorConfig {
    pub fn with_dims(d: usize, hidden_dim: usize) -> Self {
        Self {
            d,
            hidden_dim,
            ..Self::default()
        }
    }

    pub fn eta_dim(&self) -> usize {
        if self.d_eta == 0 {
            self.d
        } else {
            self.d_eta
        }
    }

    pub fn mlp_config(&self) -> MlpConfig {
        MlpConfig {
            input_dim: 3 * self.d + self.eta_dim(),
            hidden_dim: self.hidden_dim,
            num_hidden: self.num_hidden,
            output_dim: self.d,
            prelu_init: self.prelu_init,
            use_skip: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorNet {
    config: PosteriorConfig,
    net: Mlp,
}

impl PosteriorNet {
    pub fn new<R: Rng + ?Sized>(config: PosteriorConfig, rng: &mut R) -> Result<Self> {
        let net = Mlp::new(config.mlp_config(), rng)?;
        Ok(Self { config, net })
    }

    pub fn zeros(config: PosteriorConfig) -> Result<Self> {
        let net = Mlp::zeros(config.mlp_config())?;
        Ok(Self { config, net })
    }

    pub fn from_mlp(config: PosteriorConfig, net: Mlp) -> Result<Self> {
        if *net.config() != config.mlp_config() {
            return Err(Error::Dimension(format!(
                "posterior network has configuration {:?}, expected {:?}",
                net.config(),
                config.mlp_config()
            )));
        }
        Ok(Self { config, net })
    }

    pub fn config(&self) -> &PosteriorConfig {
        &self.config
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    pub fn mlp(&self) -> &Mlp {
        &self.net
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> MlpVars {
        self.net.bind(tape, trainable)
    }

    /// Context samples for rows of `(x, y, eta)`.
    pub fn forward(&self, tape: &mut Tape, vars: &MlpVars, x: Var, y: Var, eta: Var) -> Result<Var> {
        let input = tape.concat_cols(&[x, y, eta])?;
        self.net.forward(tape, vars, input)
    }
}

/// `k` context samples `g(x, y, eta_j)` with fresh `eta_j ~ N(0, I)`, as `[k x d]`.
pub fn posterior_sample<R: Rng + ?Sized>(
    net: &PosteriorNet,
    x: &[f64],
    y: &[f64],
    k: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let d = net.d();
    if x.len() != d || y.len() != 2 * d {
        return Err(Error::Dimension(format!(
            "factual of widths ({}, {}) for d={d}",
            x.len(),
            y.len()
        )));
    }
    let eta = standard_normal(k, net.config.eta_dim(), rng);
    posterior_apply(net, &Tensor::matrix(1, d, x.to_vec())?.repeat_rows(k), &Tensor::matrix(1, 2 * d, y.to_vec())?.repeat_rows(k), &eta)
}

/// `g(x_i, y_i, eta_i)` row by row, off the tape.
pub fn posterior_apply(net: &PosteriorNet, x: &Tensor, y: &Tensor, eta: &Tensor) -> Result<Tensor> {
    if x.rows() == 0 {
        return Ok(Tensor::zeros(&[0, net.d()]));
    }
    net.net.predict(&Tensor::concat_cols(&[x, y, eta])?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Distance {
    #[default]
    #[serde(rename = "mmd-imq")]
    MmdImq,
    #[serde(rename = "sinkhorn")]
    Sinkhorn,
    #[serde(rename = "energy")]
    Energy,
}

impl FromStr for Distance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mmd-imq" => Ok(Distance::MmdImq),
            "sinkhorn" => Ok(Distance::Sinkhorn),
            "energy" => Ok(Distance::Energy),
            other => Err(Error::Config(format!(
                "unknown distance `{other}` (expected mmd-imq, sinkhorn or energy)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosSettings {
    pub q: usize,
    pub distance: Distance,
    pub rho: f64,
    pub sinkhorn_epsilon: Option<f64>,
    pub standardize: bool,
}

impl Default for PosSettings {
    fn default() -> Self {
        Self {
            q: 8,
            distance: Distance::MmdImq,
            rho: 1.0,
            sinkhorn_epsilon: None,
            standardize: true,
        }
    }
}

const SINKHORN_MAX_ITERS: usize = 500;
const SINKHORN_TOL: f64 = 1e-4;

/// Per-column mean and reciprocal standard deviation; constant columns get scale 1.
pub fn standardizer(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, c) = (t.rows() as f64, t.cols());
    let mut mean = vec![0.0; c];
    for i in 0..t.rows() {
        for (m, v) in mean.iter_mut().zip(t.row(i)) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; c];
    for i in 0..t.rows() {
        for ((s, v), m) in var.iter_mut().zip(t.row(i)).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    let scale = var
        .iter()
        .map(|&v| if v.sqrt() > 1e-8 { 1.0 / v.sqrt() } else { 1.0 })
        .collect();
    (mean, scale)
}

/// Distance between two tuple sets on the tape, standardized by the first
/// set's statistics when requested.
pub fn tuple_distance(tape: &mut Tape, s: Var, p: Var, settings: &PosSettings) -> Result<Var> {
    let (s, p) = if settings.standardize {
        let (shift, scale) = standardizer(tape.value(s));
        (
            tape.col_affine(s, &shift, &scale)?,
            tape.col_affine(p, &shift, &scale)?,
        )
    } else {
        (s, p)
    };
    match settings.distance {
        Distance::MmdImq => mmd2_loss(tape, s, p, KernelConfig::Imq { rho: settings.rho }),
        Distance::Energy => energy_distance_loss(tape, s, p),
        Distance::Sinkhorn => {
            sinkhorn_divergence_loss(tape, s, p, settings.sinkhorn_epsilon, SINKHORN_MAX_ITERS, SINKHORN_TOL)
        }
    }
}

/// Posterior matching loss.
///
/// Generative tuples `(x_i, c, n, mech_S(x_i, c, n))` with `c, n` from the
/// source generators, against posterior tuples `(x_i, g(x_i, y_i, eta), n', y_i)`
/// with a fresh noise draw `n'`; `q` tuples per data point on each side.
/// Normal draws are taken in the order `eta_c, eta_n, eta, eta_n'`.
#[allow(clippy::too_many_arguments)]
pub fn loss_pos<R: Rng + ?Sized>(
    bundle: &NcmBundle,
    bundle_vars: &BundleVars,
    post: &PosteriorNet,
    post_vars: &MlpVars,
    tape: &mut Tape,
    x: &Tensor,
    y: &Tensor,
    settings: &PosSettings,
    rng: &mut R,
) -> Result<Var> {
    let d = bundle.d();
    if post.d() != d {
        return Err(Error::Dimension(format!(
            "posterior for d={} with bundle for d={d}",
            post.d()
        )));
    }
    if x.rows() == 0 || x.cols() != d || y.cols() != 2 * d || y.rows() != x.rows() {
        return Err(Error::Dimension(format!(
            "batch shapes {:?} / {:?} for d={d}",
            x.shape(),
            y.shape()
        )));
    }
    if settings.q == 0 {
        return Err(Error::Contract("q must be at least 1".into()));
    }
    let rows = x.rows() * settings.q;
    let xr = tape.constant(x.repeat_rows(settings.q));
    let yr = tape.constant(y.repeat_rows(settings.q));

    let ec = tape.constant(standard_normal(rows, d, rng));
    let en = tape.constant(standard_normal(rows, d, rng));
    let c = bundle.forward(tape, bundle_vars, Net::CtxSource, ec)?;
    let n = bundle.forward(tape, bundle_vars, Net::NoiseSource, en)?;
    let yhat = mechanism(bundle, tape, bundle_vars, Domain::Source, xr, c, n)?;
    let s = tape.concat_cols(&[xr, c, n, yhat])?;

    let eta = tape.constant(standard_normal(rows, post.config.eta_dim(), rng));
    let en2 = tape.constant(standard_normal(rows, d, rng));
    let c_post = post.forward(tape, post_vars, xr, yr, eta)?;
    let n2 = bundle.forward(tape, bundle_vars, Net::NoiseSource, en2)?;
    let p = tape.concat_cols(&[xr, c_post, n2, yr])?;

    tuple_distance(tape, s, p, settings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ncm::BundleConfig;
    use crate::rng::seeded;

    #[test]
    fn zero_net_samples_zero() {
        let net = PosteriorNet::zeros(PosteriorConfig::with_dims(2, 8)).unwrap();
        let s = posterior_sample(&net, &[0.1, 0.2], &[1.0, 2.0, 3.0, 4.0], 5, &mut seeded(0)).unwrap();
        assert_eq!(s.shape(), &[5, 2]);
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn samples_are_deterministic_per_seed() {
        let net = PosteriorNet::new(PosteriorConfig::with_dims(1, 8), &mut seeded(1)).unwrap();
        let a = posterior_sample(&net, &[0.3], &[1.0, 0.5], 4, &mut seeded(7)).unwrap();
        let b = posterior_sample(&net, &[0.3], &[1.0, 0.5], 4, &mut seeded(7)).unwrap();
        assert_eq!(a, b);
        assert!(posterior_sample(&net, &[0.3, 0.1], &[1.0, 0.5], 4, &mut seeded(7)).is_err());
    }

    #[test]
    fn architecture() {
        let net = PosteriorNet::new(PosteriorConfig::default(), &mut seeded(0)).unwrap();
        let m = net.mlp();
        assert_eq!(m.config().input_dim, 4);
        assert_eq!(m.hidden_layers().len(), 3);
        assert!(m.projection().is_some());
        assert_eq!(m.hidden_layers()[0].slope.item(), 0.01);
    }

    #[test]
    fn distance_names() {
        assert_eq!("mmd-imq".parse::<Distance>().unwrap(), Distance::MmdImq);
        assert_eq!("sinkhorn".parse::<Distance>().unwrap(), Distance::Sinkhorn);
        assert_eq!("energy".parse::<Distance>().unwrap(), Distance::Energy);
        assert!(matches!("wasserstein".parse::<Distance>(), Err(Error::Config(_))));
        let json = serde_json::to_string(&Distance::MmdImq).unwrap();
        assert_eq!(json, "\"mmd-imq\"");
    }

    #[test]
    fn identical_tuple_sets_have_zero_distance() {
        let mut rng = seeded(3);
        let s = standard_normal(12, 5, &mut rng);
        for distance in [Distance::MmdImq, Distance::Energy] {
            let mut t = Tape::new();
            let (a, b) = (t.constant(s.clone()), t.constant(s.clone()));
            let settings = PosSettings {
                distance,
                ..PosSettings::default()
            };
            let l = tuple_distance(&mut t, a, b, &settings).unwrap();
            assert!(t.value(l).item().abs() < 1e-12);
        }
    }

    #[test]
    fn stage_two_mode_leaves_bundle_without_gradient() {
        let mut rng = seeded(4);
        let bundle = NcmBundle::new(BundleConfig::with_dims(1, 4), &mut rng).unwrap();
        let post = PosteriorNet::new(PosteriorConfig::with_dims(1, 4), &mut rng).unwrap();
        let x = standard_normal(5, 1, &mut rng);
        let y = standard_normal(5, 2, &mut rng);
        let mut t = Tape::new();
        let bv = bundle.bind(&mut t, false);
        let pv = post.bind(&mut t, true);
        let l = loss_pos(&bundle, &bv, &post, &pv, &mut t, &x, &y, &PosSettings::default(), &mut rng).unwrap();
        t.backward(l).unwrap();
        assert!(bundle.grads(&t, &bv).iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
        assert!(post.mlp().grads(&t, &pv).iter().any(|g| g.data().iter().any(|&v| v != 0.0)));
    }
}
