//! Two-stage (and optional joint) training with checkpoints and metrics logs.
//!
//! Output directory layout: `config.json` (echo), `metrics.jsonl` (one
//! record per optimizer step, deterministic for a fixed seed),
//! `timings.jsonl` (wall-clock per step) and `checkpoint.json`, replaced
//! atomically at the end of every epoch.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::error::{Error, Result};
use crate::kernel::KernelConfig;
use crate::ncm::{total_stage1_loss, BlockMse, BundleConfig, NcmBundle, Stage1Settings, Stage1Weights};
use crate::optim::{LrSchedule, OptimizerConfig};
use crate::posterior::{loss_pos, Distance, PosSettings, PosteriorConfig, PosteriorNet};
use crate::rng::{self, streams};
use crate::scm::dataset::Dataset;
use crate::{Optimizer, Tape, Tensor};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMINGS_FILE: &str = "timings.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Mode {
    #[default]
    #[serde(rename = "two-stage")]
    TwoStage,
    #[serde(rename = "joint")]
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub posterior_hidden_dim: usize,
    /// Posterior noise width; `0` means `d`.
    pub d_eta: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 128,
            posterior_hidden_dim: 128,
            d_eta: 0,
        }
    }
}

/// Linear warmup over `warmup_fraction` of the steps, then cosine decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrConfig {
    pub base_lr: f64,
    pub warmup_fraction: f64,
}

impl Default for LrConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            warmup_fraction: 0.05,
        }
    }
}

impl LrConfig {
    fn schedule(&self, total_steps: usize) -> Result<LrSchedule> {
        if !(self.base_lr > 0.0) || !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!("invalid learning-rate settings {self:?}")));
        }
        let warmup = (self.warmup_fraction * total_steps as f64).round() as usize;
        LrSchedule::new(self.base_lr, warmup, total_steps)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub q_gen: usize,
    pub q_tr: usize,
    pub lambda_tr: f64,
    /// `[start, end]` fractions of the stage-1 steps: the transfer weight is 0
    /// before `start` and rises linearly to `lambda_tr` at `end`.
    pub lambda_tr_ramp: Option<[f64; 2]>,
    /// Same form of ramp for the weight of the source generative loss.
    pub source_gen_ramp: Option<[f64; 2]>,
    pub lambda_cs: f64,
    /// Entropic regularization of the covariate-shift coupling; default is scaled to the mean cost.
    pub cs_epsilon: Option<f64>,
    pub optimizer: OptimizerConfig,
    pub lr: LrConfig,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            q_gen: 32,
            q_tr: 8,
            lambda_tr: 1.0,
            lambda_tr_ramp: None,
            source_gen_ramp: None,
            lambda_cs: 0.0,
            cs_epsilon: None,
            optimizer: OptimizerConfig::adamw(),
            lr: LrConfig::default(),
            max_steps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub q: usize,
    pub distance: Distance,
    pub standardize: bool,
    pub sinkhorn_epsilon: Option<f64>,
    pub optimizer: OptimizerConfig,
    pub lr: LrConfig,
    pub max_steps: Option<usize>,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            q: 8,
            distance: Distance::MmdImq,
            standardize: true,
            sinkhorn_epsilon: None,
            optimizer: OptimizerConfig::adam(),
            lr: LrConfig::default(),
            max_steps: None,
        }
    }
}

/// Weight of the posterior loss when all seven networks train together.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JointConfig {
    pub lambda_pos: f64,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self { lambda_pos: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub d: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub source_data: Option<PathBuf>,
    #[serde(default)]
    pub target_data: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default)]
    pub stage1: Stage1Config,
    #[serde(default)]
    pub stage2: Stage2Config,
    #[serde(default)]
    pub joint: JointConfig,
}

impl TrainConfig {
    /// Defaults for dimension `d`.
    pub fn new(d: usize) -> Self {
        Self {
            d,
            seed: 0,
            mode: Mode::TwoStage,
            source_data: None,
            target_data: None,
            model: ModelConfig::default(),
            kernel: KernelConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            joint: JointConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("training config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("stage1.epochs", self.stage1.epochs),
            ("stage1.batch_size", self.stage1.batch_size),
            ("stage1.q_gen", self.stage1.q_gen),
            ("stage1.q_tr", self.stage1.q_tr),
            ("stage2.epochs", self.stage2.epochs),
            ("stage2.batch_size", self.stage2.batch_size),
            ("stage2.q", self.stage2.q),
            ("model.hidden_dim", self.model.hidden_dim),
            ("model.posterior_hidden_dim", self.model.posterior_hidden_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        for (name, v) in [
            ("stage1.lambda_tr", self.stage1.lambda_tr),
            ("stage1.lambda_cs", self.stage1.lambda_cs),
            ("joint.lambda_pos", self.joint.lambda_pos),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        for (name, ramp) in [
            ("stage1.lambda_tr_ramp", self.stage1.lambda_tr_ramp),
            ("stage1.source_gen_ramp", self.stage1.source_gen_ramp),
        ] {
            if let Some([a, b]) = ramp {
                if !(0.0..=1.0).contains(&a) || !(a..=1.0).contains(&b) {
                    return Err(Error::Config(format!("{name} [{a}, {b}] is not 0 <= start <= end <= 1")));
                }
            }
        }
        if matches!(self.stage1.max_steps, Some(0)) || matches!(self.stage2.max_steps, Some(0)) {
            return Err(Error::Config("max_steps must be positive when set".into()));
        }
        self.kernel.validate()?;
        self.bundle_config().validate()?;
        self.posterior_config().mlp_config().validate()
    }

    pub fn bundle_config(&self) -> BundleConfig {
        BundleConfig::with_dims(self.d, self.model.hidden_dim)
    }

    pub fn posterior_config(&self) -> PosteriorConfig {
        PosteriorConfig {
            d_eta: self.model.d_eta,
            ..PosteriorConfig::with_dims(self.d, self.model.posterior_hidden_dim)
        }
    }

    pub fn stage1_weights(&self) -> Stage1Weights {
        Stage1Weights {
            source: 1.0,
            target: 1.0,
            tr: self.stage1.lambda_tr,
            cs: self.stage1.lambda_cs,
        }
    }

    /// Transfer-loss weight at `step` (1-based) of `total`.
    pub fn lambda_tr_at(&self, step: usize, total: usize) -> f64 {
        self.stage1.lambda_tr * ramp(self.stage1.lambda_tr_ramp, step, total)
    }

    /// Source generative-loss weight at `step` (1-based) of `total`.
    pub fn source_gen_at(&self, step: usize, total: usize) -> f64 {
        ramp(self.stage1.source_gen_ramp, step, total)
    }

    pub fn pos_settings(&self) -> PosSettings {
        let rho = match self.kernel {
            KernelConfig::Imq { rho } => rho,
            KernelConfig::Rbf { .. } => PosSettings::default().rho,
        };
        PosSettings {
            q: self.stage2.q,
            distance: self.stage2.distance,
            rho,
            sinkhorn_epsilon: self.stage2.sinkhorn_epsilon,
            standardize: self.stage2.standardize,
        }
    }

    fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// 0 before fraction `a` of the steps, 1 from fraction `b`, linear in between.
fn ramp(window: Option<[f64; 2]>, step: usize, total: usize) -> f64 {
    let Some([a, b]) = window else { return 1.0 };
    let t = step as f64 / total.max(1) as f64;
    if t >= b {
        1.0
    } else if t < a {
        0.0
    } else {
        (t - a) / (b - a)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Stage1,
    Stage2,
    Joint,
}

/// One optimizer step. Disabled loss terms are exactly 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepMetrics {
    pub stage: Stage,
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub gen_source: f64,
    pub gen_target: f64,
    pub cs: f64,
    pub tr: f64,
    pub pos: f64,
    pub cs_converged: bool,
}

#[derive(Serialize)]
struct TimingRecord {
    stage: Stage,
    step: usize,
    seconds: f64,
}

/// Metrics sink and checkpoint writer for one run.
pub struct RunLog {
    dir: Option<PathBuf>,
    metrics: Option<BufWriter<File>>,
    timings: Option<BufWriter<File>>,
    records: Vec<StepMetrics>,
    config: serde_json::Value,
}

impl RunLog {
    /// Keeps records in memory only.
    pub fn in_memory(config: &TrainConfig) -> Self {
        Self {
            dir: None,
            metrics: None,
            timings: None,
            records: Vec::new(),
            config: config.echo(),
        }
    }

    /// Creates `dir` if needed, writes the config echo and starts fresh log files.
    pub fn create(dir: &Path, config: &TrainConfig) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let echo = config.echo();
        let cfg_path = dir.join("config.json");
        let text = serde_json::to_string_pretty(&echo).expect("value serializes");
        fs::write(&cfg_path, text).map_err(|e| Error::io(&cfg_path, e))?;
        let open = |name: &str| -> Result<BufWriter<File>> {
            let p = dir.join(name);
            File::create(&p).map(BufWriter::new).map_err(|e| Error::io(p, e))
        };
        Ok(Self {
            dir: Some(dir.to_path_buf()),
            metrics: Some(open(METRICS_FILE)?),
            timings: Some(open(TIMINGS_FILE)?),
            records: Vec::new(),
            config: echo,
        })
    }

    pub fn records(&self) -> &[StepMetrics] {
        &self.records
    }

    pub fn checkpoint_path(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(CHECKPOINT_FILE))
    }

    fn record(&mut self, m: StepMetrics, seconds: f64) -> Result<()> {
        if let (Some(w), Some(dir)) = (self.metrics.as_mut(), self.dir.as_ref()) {
            let line = serde_json::to_string(&m).expect("metrics serialize");
            writeln!(w, "{line}").map_err(|e| Error::io(dir.join(METRICS_FILE), e))?;
        }
        if let (Some(w), Some(dir)) = (self.timings.as_mut(), self.dir.as_ref()) {
            let t = TimingRecord {
                stage: m.stage,
                step: m.step,
                seconds,
            };
            let line = serde_json::to_string(&t).expect("timings serialize");
            writeln!(w, "{line}").map_err(|e| Error::io(dir.join(TIMINGS_FILE), e))?;
        }
        self.records.push(m);
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        for (w, name) in [(self.metrics.as_mut(), METRICS_FILE), (self.timings.as_mut(), TIMINGS_FILE)] {
            if let (Some(w), Some(dir)) = (w, self.dir.as_ref()) {
                w.flush().map_err(|e| Error::io(dir.join(name), e))?;
            }
        }
        Ok(())
    }

    fn save(&mut self, bundle: &NcmBundle, posterior: Option<&PosteriorNet>, step: u64) -> Result<()> {
        self.flush()?;
        if let Some(path) = self.checkpoint_path() {
            let ckpt = Checkpoint {
                bundle: bundle.clone(),
                posterior: posterior.cloned(),
                step,
                config: self.config.clone(),
            };
            save_checkpoint(&path, &ckpt)?;
        }
        Ok(())
    }
}

/// Shuffled index batches; a fresh permutation is drawn whenever the current one runs out.
struct Batcher {
    n: usize,
    perm: Vec<usize>,
    pos: usize,
}

impl Batcher {
    fn new(n: usize) -> Self {
        Self {
            n,
            perm: Vec::new(),
            pos: 0,
        }
    }

    fn next<R: rand::Rng + ?Sized>(&mut self, size: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.perm.len() {
                self.perm = (0..self.n).collect();
                self.perm.shuffle(rng);
                self.pos = 0;
            }
            let take = (size - out.len()).min(self.perm.len() - self.pos);
            out.extend_from_slice(&self.perm[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}

fn select_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let c = t.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::matrix(idx.len(), c, data).expect("sized")
}

fn check_dataset(data: &Dataset, d: usize, what: &str) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config(format!("{what} dataset is empty")));
    }
    if data.d() != d {
        return Err(Error::Dimension(format!(
            "{what} dataset has d={}, configuration expects d={d}",
            data.d()
        )));
    }
    Ok(())
}

/// Steps per epoch and total steps for `n` samples.
fn step_budget(n: usize, batch: usize, epochs: usize, max_steps: Option<usize>) -> (usize, usize, usize) {
    let batch = batch.min(n);
    let per_epoch = (n / batch).max(1);
    let total = (per_epoch * epochs).min(max_steps.unwrap_or(usize::MAX));
    (batch, per_epoch, total)
}

fn initial_bundle(cfg: &TrainConfig) -> Result<NcmBundle> {
    NcmBundle::new(cfg.bundle_config(), &mut rng::stream(cfg.seed, streams::INIT))
}

fn initial_posterior(cfg: &TrainConfig) -> Result<PosteriorNet> {
    PosteriorNet::new(cfg.posterior_config(), &mut rng::stream(cfg.seed, streams::POSTERIOR_INIT))
}

/// Stage-1 objective with the posterior loss optionally added (joint mode).
fn generative_loop(
    cfg: &TrainConfig,
    source: &Dataset,
    target: &Dataset,
    bundle: &mut NcmBundle,
    mut posterior: Option<&mut PosteriorNet>,
    log: &mut RunLog,
) -> Result<()> {
    check_dataset(source, cfg.d, "source")?;
    check_dataset(target, cfg.d, "target")?;
    bundle.config().validate()?;
    if bundle.d() != cfg.d {
        return Err(Error::Dimension(format!("bundle for d={} with config d={}", bundle.d(), cfg.d)));
    }
    let s1 = &cfg.stage1;
    let (batch, per_epoch, total) = step_budget(source.len(), s1.batch_size, s1.epochs, s1.max_steps);
    let schedule = s1.lr.schedule(total)?;
    let mut settings = Stage1Settings {
        weights: cfg.stage1_weights(),
        q_gen: s1.q_gen,
        q_tr: s1.q_tr,
        kernel: cfg.kernel,
        cs_epsilon: s1.cs_epsilon,
        dis: &BlockMse,
    };
    let pos_settings = cfg.pos_settings();
    let lambda_pos = if posterior.is_some() { cfg.joint.lambda_pos } else { 0.0 };
    let stage = if posterior.is_some() { Stage::Joint } else { Stage::Stage1 };

    let mut rng = rng::stream(cfg.seed, streams::STAGE1);
    let mut pos_rng = rng::stream(cfg.seed, streams::JOINT_POSTERIOR);
    let mut shuffle = rng::stream(cfg.seed, streams::SHUFFLE);
    let (mut src_batches, mut tgt_batches) = (Batcher::new(source.len()), Batcher::new(target.len()));
    let mut opt = Optimizer::new(s1.optimizer.clone());
    let mut post_opt = Optimizer::new(cfg.stage2.optimizer.clone());
    let batch_t = batch.min(target.len());

    let mut step = 0;
    'epochs: for epoch in 1..=s1.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..per_epoch {
            if step == total {
                break 'epochs;
            }
            step += 1;
            let started = Instant::now();
            let si = src_batches.next(batch, &mut shuffle);
            let ti = tgt_batches.next(batch_t, &mut shuffle);
            let (xs, ys) = (select_rows(&source.x, &si), select_rows(&source.y, &si));
            let (xt, yt) = (select_rows(&target.x, &ti), select_rows(&target.y, &ti));
            let lr = schedule.lr_at(step)?;
            settings.weights.tr = cfg.lambda_tr_at(step, total);
            settings.weights.source = cfg.source_gen_at(step, total);

            let mut tape = Tape::new();
            let vars = bundle.bind(&mut tape, true);
            let terms = total_stage1_loss(bundle, &mut tape, &vars, (&xs, &ys), (&xt, &yt), &settings, &mut rng)?;
            let mut total_var = terms.total;
            let mut pos_value = 0.0;
            let post_vars = match posterior.as_deref() {
                Some(post) if lambda_pos != 0.0 => {
                    let pv = post.bind(&mut tape, true);
                    let l = loss_pos(bundle, &vars, post, &pv, &mut tape, &xs, &ys, &pos_settings, &mut pos_rng)?;
                    pos_value = tape.value(l).item();
                    let scaled = tape.scale(l, lambda_pos);
                    total_var = tape.add(total_var, scaled)?;
                    Some(pv)
                }
                _ => None,
            };
            let total_value = tape.value(total_var).item();
            if !total_value.is_finite() {
                log::error!("non-finite loss at {stage:?} step {step}; keeping the last checkpoint");
                return Err(Error::NonFiniteLoss { step });
            }
            tape.backward(total_var)?;
            let grads = bundle.grads(&tape, &vars);
            if let (Some(post), Some(pv)) = (posterior.as_deref_mut(), post_vars.as_ref()) {
                let pg = post.mlp().grads(&tape, pv);
                post_opt.step(&mut post.mlp_mut().params_mut(), &pg, lr)?;
            }
            opt.step(&mut bundle.params_mut(), &grads, lr)?;

            epoch_loss += total_value;
            log.record(
                StepMetrics {
                    stage,
                    step,
                    epoch,
                    lr,
                    total: total_value,
                    gen_source: terms.gen_source,
                    gen_target: terms.gen_target,
                    cs: terms.cs,
                    tr: terms.tr,
                    pos: pos_value,
                    cs_converged: terms.cs_converged,
                },
                started.elapsed().as_secs_f64(),
            )?;
        }
        log::info!(
            "{stage:?} epoch {epoch}/{}: mean loss {:.6}",
            s1.epochs,
            epoch_loss / per_epoch as f64
        );
        log.save(bundle, posterior.as_deref(), step as u64)?;
    }
    log.save(bundle, posterior.as_deref(), step as u64)
}

/// Fits the six generative networks. Starts from `init` when given,
/// otherwise from the seeded initialization.
pub fn train_stage1(
    cfg: &TrainConfig,
    source: &Dataset,
    target: &Dataset,
    init: Option<NcmBundle>,
    log: &mut RunLog,
) -> Result<NcmBundle> {
    let mut bundle = match init {
        Some(b) => b,
        None => initial_bundle(cfg)?,
    };
    generative_loop(cfg, source, target, &mut bundle, None, log)?;
    Ok(bundle)
}

/// Fits the posterior network against a frozen bundle.
pub fn train_stage2(
    cfg: &TrainConfig,
    bundle: &NcmBundle,
    source: &Dataset,
    init: Option<PosteriorNet>,
    log: &mut RunLog,
) -> Result<PosteriorNet> {
    check_dataset(source, cfg.d, "source")?;
    let digest = bundle.digest();
    let mut post = match init {
        Some(p) => p,
        None => initial_posterior(cfg)?,
    };
    if post.d() != cfg.d || bundle.d() != cfg.d {
        return Err(Error::Dimension(format!(
            "networks for d={} / d={} with config d={}",
            bundle.d(),
            post.d(),
            cfg.d
        )));
    }
    let s2 = &cfg.stage2;
    let (batch, per_epoch, total) = step_budget(source.len(), s2.batch_size, s2.epochs, s2.max_steps);
    let schedule = s2.lr.schedule(total)?;
    let settings = cfg.pos_settings();
    let mut rng = rng::stream(cfg.seed, streams::STAGE2);
    let mut shuffle = rng::stream(cfg.seed, streams::STAGE2_SHUFFLE);
    let mut batches = Batcher::new(source.len());
    let mut opt = Optimizer::new(s2.optimizer.clone());

    let mut step = 0;
    'epochs: for epoch in 1..=s2.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..per_epoch {
            if step == total {
                break 'epochs;
            }
            step += 1;
            let started = Instant::now();
            let idx = batches.next(batch, &mut shuffle);
            let (xs, ys) = (select_rows(&source.x, &idx), select_rows(&source.y, &idx));
            let lr = schedule.lr_at(step)?;
            let mut tape = Tape::new();
            let bv = bundle.bind(&mut tape, false);
            let pv = post.bind(&mut tape, true);
            let l = loss_pos(bundle, &bv, &post, &pv, &mut tape, &xs, &ys, &settings, &mut rng)?;
            let value = tape.value(l).item();
            if !value.is_finite() {
                log::error!("non-finite loss at stage-2 step {step}; keeping the last checkpoint");
                return Err(Error::NonFiniteLoss { step });
            }
            tape.backward(l)?;
            let grads = post.mlp().grads(&tape, &pv);
            opt.step(&mut post.mlp_mut().params_mut(), &grads, lr)?;
            epoch_loss += value;
            log.record(
                StepMetrics {
                    stage: Stage::Stage2,
                    step,
                    epoch,
                    lr,
                    total: value,
                    gen_source: 0.0,
                    gen_target: 0.0,
                    cs: 0.0,
                    tr: 0.0,
                    pos: value,
                    cs_converged: true,
                },
                started.elapsed().as_secs_f64(),
            )?;
        }
        log::info!("Stage2 epoch {epoch}/{}: mean loss {:.6}", s2.epochs, epoch_loss / per_epoch as f64);
        log.save(bundle, Some(&post), step as u64)?;
    }
    if bundle.digest() != digest {
        return Err(Error::Contract("stage 2 modified the generative networks".into()));
    }
    log.save(bundle, Some(&post), step as u64)?;
    Ok(post)
}

/// All seven networks on the stage-1 objective plus `lambda_pos` times the
/// posterior loss, whose draws come from a separate stream.
pub fn train_joint(cfg: &TrainConfig, source: &Dataset, target: &Dataset, log: &mut RunLog) -> Result<(NcmBundle, PosteriorNet)> {
    let mut bundle = initial_bundle(cfg)?;
    let mut post = initial_posterior(cfg)?;
    generative_loop(cfg, source, target, &mut bundle, Some(&mut post), log)?;
    Ok((bundle, post))
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub bundle: NcmBundle,
    pub posterior: PosteriorNet,
}

/// Runs the configured mode end to end, logging into `out` when given.
pub fn train(cfg: &TrainConfig, source: &Dataset, target: &Dataset, out: Option<&Path>) -> Result<(Trained, RunLog)> {
    cfg.validate()?;
    let mut log = match out {
        Some(dir) => RunLog::create(dir, cfg)?,
        None => RunLog::in_memory(cfg),
    };
    let (bundle, posterior) = match cfg.mode {
        Mode::TwoStage => {
            let bundle = train_stage1(cfg, source, target, None, &mut log)?;
            let posterior = train_stage2(cfg, &bundle, source, None, &mut log)?;
            (bundle, posterior)
        }
        Mode::Joint => train_joint(cfg, source, target, &mut log)?,
    };
    Ok((Trained { bundle, posterior }, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(TrainConfig::from_json(r#"{"d": 1, "stage1": {"epochz": 3}}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"d": 1, "colour": 3}"#).is_err());
        let cfg = TrainConfig::from_json(r#"{"d": 2, "mode": "joint", "stage2": {"distance": "energy"}}"#).unwrap();
        assert_eq!(cfg.mode, Mode::Joint);
        assert_eq!(cfg.stage2.distance, Distance::Energy);
        assert_eq!(cfg.stage1.q_gen, 32);
    }

    #[test]
    fn transfer_weight_ramp() {
        let mut cfg = TrainConfig::new(1);
        cfg.stage1.lambda_tr = 2.0;
        assert_eq!(cfg.lambda_tr_at(1, 100), 2.0);
        cfg.stage1.lambda_tr_ramp = Some([0.2, 0.6]);
        assert_eq!(cfg.lambda_tr_at(10, 100), 0.0);
        assert!((cfg.lambda_tr_at(40, 100) - 1.0).abs() < 1e-12);
        assert_eq!(cfg.lambda_tr_at(60, 100), 2.0);
        assert_eq!(cfg.lambda_tr_at(100, 100), 2.0);
        cfg.stage1.lambda_tr_ramp = Some([0.5, 0.4]);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_rejects_zero_counts() {
        assert!(TrainConfig::from_json(r#"{"d": 1, "stage1": {"batch_size": 0}}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"d": 0}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"d": 1, "joint": {"lambda_pos": -1}}"#).is_err());
    }

    #[test]
    fn config_round_trips() {
        let cfg = TrainConfig::new(3);
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(TrainConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn batcher_visits_every_index_per_pass() {
        let mut b = Batcher::new(10);
        let mut rng = seeded(0);
        let mut seen: Vec<usize> = (0..2).flat_map(|_| b.next(5, &mut rng)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(b.next(15, &mut rng).len(), 15);
    }

    #[test]
    fn step_budget_caps() {
        assert_eq!(step_budget(100, 32, 3, None), (32, 3, 9));
        assert_eq!(step_budget(10, 32, 3, Some(2)), (10, 1, 2));
    }
}
