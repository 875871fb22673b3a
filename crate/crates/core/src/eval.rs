//! Counterfactual sampling from a trained model and the pairwise evaluation
//! protocol against the ground-truth SCM.
//!
//! For each pair `(x_s, x_intv)` the model and the truth each produce `k`
//! joints `[y_s ; y_cf]`, and the aggregated MMD test compares the two sets.
//! The score is the fraction of pairs where the test does not reject.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::mmdagg::{mmdagg_test, BandwidthStat, MmdAggConfig};
use crate::ncm::{standard_normal, ExogenousDraw, NcmBundle, Net};
use crate::posterior::{posterior_apply, PosteriorNet};
use crate::rng::{self, streams, Rng};
use crate::scm::{Domain, GroundTruthScm};
use crate::Tensor;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Redraws allowed for a single ground-truth factual whose context cannot be recovered.
pub const MAX_TRUTH_REDRAWS: usize = 1000;

/// Anything that can produce factual source effects and shifted counterfactuals.
pub trait CounterfactualModel: Sync {
    fn d(&self) -> usize;

    /// `k` factual source effects at `x`, as `[k x 2d]`.
    fn factual(&self, x: &[f64], k: usize, rng: &mut Rng) -> Result<Tensor>;

    /// One counterfactual at `x_intv` per row of `y`, each abducted from `(x_fact, y_i)`.
    fn counterfactual(&self, x_fact: &[f64], y: &Tensor, x_intv: &[f64], rng: &mut Rng) -> Result<Tensor>;
}

fn check_vec(name: &str, v: &[f64], len: usize) -> Result<()> {
    if v.len() != len {
        return Err(Error::Dimension(format!("{name} has length {}, expected {len}", v.len())));
    }
    Ok(())
}

fn row_block(v: &[f64], k: usize) -> Result<Tensor> {
    Ok(Tensor::matrix(1, v.len(), v.to_vec())?.repeat_rows(k))
}

/// Learned source generator for the factuals; posterior network, target
/// noise generator and target mechanism for the counterfactuals.
#[derive(Clone, Copy, Debug)]
pub struct TrainedModel<'a> {
    pub bundle: &'a NcmBundle,
    pub posterior: &'a PosteriorNet,
}

impl<'a> TrainedModel<'a> {
    pub fn new(bundle: &'a NcmBundle, posterior: &'a PosteriorNet) -> Result<Self> {
        if bundle.d() != posterior.d() {
            return Err(Error::Dimension(format!(
                "bundle for d={} paired with posterior for d={}",
                bundle.d(),
                posterior.d()
            )));
        }
        Ok(Self { bundle, posterior })
    }
}

impl CounterfactualModel for TrainedModel<'_> {
    fn d(&self) -> usize {
        self.bundle.d()
    }

    fn factual(&self, x: &[f64], k: usize, rng: &mut Rng) -> Result<Tensor> {
        let d = self.d();
        check_vec("x", x, d)?;
        if k == 0 {
            return Ok(Tensor::zeros(&[0, 2 * d]));
        }
        let draw = ExogenousDraw::sample(k, d, rng);
        let c = self.bundle.net(Net::CtxSource).predict(&draw.eta_c)?;
        let n = self.bundle.net(Net::NoiseSource).predict(&draw.eta_n)?;
        let input = Tensor::concat_cols(&[&row_block(x, k)?, &c, &n])?;
        self.bundle.net(Net::MechSource).predict(&input)
    }

    fn counterfactual(&self, x_fact: &[f64], y: &Tensor, x_intv: &[f64], rng: &mut Rng) -> Result<Tensor> {
        let d = self.d();
        check_vec("x_fact", x_fact, d)?;
        check_vec("x_intv", x_intv, d)?;
        if y.cols() != 2 * d {
            return Err(Error::Dimension(format!("factual effects of width {} for d={d}", y.cols())));
        }
        let k = y.rows();
        if k == 0 {
            return Ok(Tensor::zeros(&[0, 2 * d]));
        }
        let eta = standard_normal(k, self.posterior.config().eta_dim(), rng);
        let eta_n = standard_normal(k, d, rng);
        let c = posterior_apply(self.posterior, &row_block(x_fact, k)?, y, &eta)?;
        let n = self.bundle.net(Net::NoiseTarget).predict(&eta_n)?;
        let input = Tensor::concat_cols(&[&row_block(x_intv, k)?, &c, &n])?;
        self.bundle.net(Net::MechTarget).predict(&input)
    }
}

/// `k` shifted counterfactuals for one factual: `c_j = g(x_fact, y_fact, eta_j)`,
/// `n_j = noise_gen_target(eta_n_j)`, `mech_target(x_intv, c_j, n_j)`, as `[k x 2d]`.
pub fn counterfactual_sample(
    bundle: &NcmBundle,
    posterior: &PosteriorNet,
    x_fact: &[f64],
    y_fact: &[f64],
    x_intv: &[f64],
    k: usize,
    rng: &mut Rng,
) -> Result<Tensor> {
    let model = TrainedModel::new(bundle, posterior)?;
    check_vec("y_fact", y_fact, 2 * model.d())?;
    model.counterfactual(x_fact, &row_block(y_fact, k)?, x_intv, rng)
}

/// Ground-truth mechanisms with exact abduction.
#[derive(Clone, Debug)]
pub struct OracleModel {
    pub scm: GroundTruthScm,
}

impl OracleModel {
    pub fn new(scm: GroundTruthScm) -> Self {
        Self { scm }
    }

    /// One source factual at `x` whose context is recoverable, plus the
    /// number of redraws needed to find it.
    pub fn recoverable_factual(&self, x: &[f64], rng: &mut Rng) -> Result<(Vec<f64>, usize)> {
        for redraws in 0..=MAX_TRUTH_REDRAWS {
            let c = self.scm.sample_c(Domain::Source, rng);
            let n = self.scm.sample_n(Domain::Source, rng);
            let y = self.scm.source_mechanism(x, &c, &n)?;
            match self.scm.abduct_source(x, &y) {
                Ok(_) => return Ok((y, redraws)),
                Err(e) => log::debug!("redrawing ground-truth factual at x={x:?}: {e}"),
            }
        }
        Err(Error::Contract(format!(
            "no recoverable ground-truth factual at x={x:?} after {MAX_TRUTH_REDRAWS} redraws"
        )))
    }

    fn factual_counted(&self, x: &[f64], k: usize, rng: &mut Rng) -> Result<(Tensor, usize)> {
        let d = self.d();
        check_vec("x", x, d)?;
        let mut data = Vec::with_capacity(k * 2 * d);
        let mut redraws = 0;
        for _ in 0..k {
            let (y, r) = self.recoverable_factual(x, rng)?;
            data.extend(y);
            redraws += r;
        }
        Ok((Tensor::matrix(k, 2 * d, data)?, redraws))
    }
}

impl CounterfactualModel for OracleModel {
    fn d(&self) -> usize {
        self.scm.d()
    }

    fn factual(&self, x: &[f64], k: usize, rng: &mut Rng) -> Result<Tensor> {
        Ok(self.factual_counted(x, k, rng)?.0)
    }

    fn counterfactual(&self, x_fact: &[f64], y: &Tensor, x_intv: &[f64], rng: &mut Rng) -> Result<Tensor> {
        let d = self.d();
        check_vec("x_fact", x_fact, d)?;
        check_vec("x_intv", x_intv, d)?;
        let mut data = Vec::with_capacity(y.rows() * 2 * d);
        for i in 0..y.rows() {
            let (c, _) = self.scm.abduct_source(x_fact, y.row(i))?;
            let n_t = self.scm.sample_n(Domain::Target, rng);
            data.extend(self.scm.target_mechanism(x_intv, &c, &n_t)?);
        }
        Tensor::matrix(y.rows(), 2 * d, data)
    }
}

/// Emits the same vectors regardless of inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstantModel {
    pub factual: Vec<f64>,
    pub counterfactual: Vec<f64>,
}

impl ConstantModel {
    pub fn zeros(d: usize) -> Self {
        Self {
            factual: vec![0.0; 2 * d],
            counterfactual: vec![0.0; 2 * d],
        }
    }
}

impl CounterfactualModel for ConstantModel {
    fn d(&self) -> usize {
        self.factual.len() / 2
    }

    fn factual(&self, _x: &[f64], k: usize, _rng: &mut Rng) -> Result<Tensor> {
        row_block(&self.factual, k)
    }

    fn counterfactual(&self, _x_fact: &[f64], y: &Tensor, _x_intv: &[f64], _rng: &mut Rng) -> Result<Tensor> {
        row_block(&self.counterfactual, y.rows())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub num_pairs: usize,
    /// Samples per side for each pair.
    pub k: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Worker threads; results do not depend on it.
    #[serde(skip, default = "one_job")]
    pub jobs: usize,
}

fn one_job() -> usize {
    1
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            num_pairs: 100,
            k: 100,
            alpha: 0.05,
            seed: 0,
            jobs: 1,
        }
    }
}

impl EvalConfig {
    pub fn test_config(&self) -> MmdAggConfig {
        MmdAggConfig {
            alpha: self.alpha,
            ..MmdAggConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_pairs == 0 {
            return Err(Error::Config("num_pairs must be positive".into()));
        }
        self.test_config().validate()
    }
}

/// Joints `[y_s ; y_cf]` of both sides for one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct CfSampleSet {
    pub x_s: Vec<f64>,
    pub x_intv: Vec<f64>,
    pub model_joint: Tensor,
    pub truth_joint: Tensor,
    pub truth_redraws: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairReport {
    pub index: usize,
    pub x_s: Vec<f64>,
    pub x_intv: Vec<f64>,
    pub reject: bool,
    pub level_scale: f64,
    /// Largest `statistic - threshold` over the bandwidths; positive iff rejected.
    pub max_margin: f64,
    pub per_bandwidth: Vec<BandwidthStat>,
    pub truth_redraws: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub schema_version: u32,
    pub config: EvalConfig,
    /// Fraction of pairs where the test does not reject.
    pub score: f64,
    /// Normal-approximation binomial interval on the score, clipped to `[0, 1]`.
    pub ci_95: [f64; 2],
    pub pairs: Vec<PairReport>,
}

impl EvalReport {
    fn assemble(config: EvalConfig, pairs: Vec<PairReport>) -> Self {
        let n = pairs.len() as f64;
        let accepted = pairs.iter().filter(|p| !p.reject).count() as f64;
        let score = accepted / n;
        let half = 1.959964 * (score * (1.0 - score) / n).sqrt();
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            config,
            score,
            ci_95: [(score - half).max(0.0), (score + half).min(1.0)],
            pairs,
        }
    }

    pub fn rejections(&self) -> usize {
        self.pairs.iter().filter(|p| p.reject).count()
    }
}

/// Both joints for one pair, drawing from `rng` in a fixed order: model
/// factuals, model counterfactuals, truth factuals, truth counterfactuals.
pub fn pair_samples(
    model: &dyn CounterfactualModel,
    oracle: &OracleModel,
    x_s: &[f64],
    x_intv: &[f64],
    k: usize,
    rng: &mut Rng,
) -> Result<CfSampleSet> {
    let y_hat = model.factual(x_s, k, rng)?;
    let cf_hat = model.counterfactual(x_s, &y_hat, x_intv, rng)?;
    let (y, truth_redraws) = oracle.factual_counted(x_s, k, rng)?;
    let cf = oracle.counterfactual(x_s, &y, x_intv, rng)?;
    Ok(CfSampleSet {
        x_s: x_s.to_vec(),
        x_intv: x_intv.to_vec(),
        model_joint: Tensor::concat_cols(&[&y_hat, &cf_hat])?,
        truth_joint: Tensor::concat_cols(&[&y, &cf])?,
        truth_redraws,
    })
}

fn evaluate_pair(
    model: &dyn CounterfactualModel,
    oracle: &OracleModel,
    config: &EvalConfig,
    index: usize,
    covariates: Option<&(Vec<f64>, Vec<f64>)>,
) -> Result<PairReport> {
    let mut rng = rng::stream(config.seed, streams::EVAL_PAIR_BASE + index as u64);
    let (x_s, x_intv) = match covariates {
        Some((a, b)) => (a.clone(), b.clone()),
        None => {
            let x_s = oracle.scm.sample_x(Domain::Source, &mut rng);
            let x_intv = oracle.scm.sample_x(Domain::Target, &mut rng);
            (x_s, x_intv)
        }
    };
    let set = pair_samples(model, oracle, &x_s, &x_intv, config.k, &mut rng)?;
    let result = mmdagg_test(&set.model_joint, &set.truth_joint, &config.test_config(), &mut rng)?;
    let max_margin = result
        .per_bandwidth
        .iter()
        .map(|b| b.statistic - b.threshold)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(PairReport {
        index,
        x_s,
        x_intv,
        reject: result.reject,
        level_scale: result.level_scale,
        max_margin,
        per_bandwidth: result.per_bandwidth,
        truth_redraws: set.truth_redraws,
    })
}

fn run_pairs(
    model: &dyn CounterfactualModel,
    scm: &GroundTruthScm,
    config: &EvalConfig,
    covariates: Option<&[(Vec<f64>, Vec<f64>)]>,
) -> Result<EvalReport> {
    config.validate()?;
    if model.d() != scm.d() {
        return Err(Error::Dimension(format!(
            "model for d={} evaluated against an SCM with d={}",
            model.d(),
            scm.d()
        )));
    }
    let oracle = OracleModel::new(scm.clone());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs.max(1))
        .build()
        .map_err(|e| Error::Contract(format!("thread pool: {e}")))?;
    let pairs = pool.install(|| {
        (0..config.num_pairs)
            .into_par_iter()
            .map(|i| {
                let report = evaluate_pair(model, &oracle, config, i, covariates.map(|c| &c[i]))?;
                log::debug!("pair {i}: reject={} margin={:.3e}", report.reject, report.max_margin);
                Ok(report)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let report = EvalReport::assemble(config.clone(), pairs);
    log::info!(
        "evaluated {} pairs: score {:.3} (95% CI {:.3}..{:.3})",
        config.num_pairs,
        report.score,
        report.ci_95[0],
        report.ci_95[1]
    );
    Ok(report)
}

/// Pair covariates drawn from the source and target priors on per-pair
/// streams, so the report does not depend on evaluation order or `jobs`.
pub fn evaluate(model: &dyn CounterfactualModel, scm: &GroundTruthScm, config: &EvalConfig) -> Result<EvalReport> {
    run_pairs(model, scm, config, None)
}

/// As [`evaluate`] with caller-supplied `(x_s, x_intv)` covariates, e.g.
/// held-out dataset rows; `num_pairs` must equal their count.
pub fn evaluate_at(
    model: &dyn CounterfactualModel,
    scm: &GroundTruthScm,
    config: &EvalConfig,
    covariates: &[(Vec<f64>, Vec<f64>)],
) -> Result<EvalReport> {
    if covariates.len() != config.num_pairs {
        return Err(Error::Contract(format!(
            "{} covariate pairs for num_pairs={}",
            covariates.len(),
            config.num_pairs
        )));
    }
    for (a, b) in covariates {
        check_vec("x_s", a, scm.d())?;
        check_vec("x_intv", b, scm.d())?;
    }
    run_pairs(model, scm, config, Some(covariates))
}

/// Companion CSV path: the report path with a `.csv` extension.
pub fn csv_path(path: &Path) -> PathBuf {
    path.with_extension("csv")
}

/// Writes the JSON report at `path` and the per-pair CSV next to it; returns the CSV path.
pub fn emit_report(report: &EvalReport, path: &Path) -> Result<PathBuf> {
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::parse("report", e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    let csv_file = csv_path(path);
    let to_err = |e: csv::Error| Error::parse(csv_file.display().to_string(), e);
    let mut w = csv::Writer::from_path(&csv_file).map_err(to_err)?;
    let d = report.pairs.first().map_or(0, |p| p.x_s.len());
    let mut header = vec!["index".to_string()];
    header.extend((0..d).map(|j| format!("x_s_{j}")));
    header.extend((0..d).map(|j| format!("x_intv_{j}")));
    header.extend(["reject", "level_scale", "max_margin", "truth_redraws"].map(String::from));
    w.write_record(&header).map_err(to_err)?;
    for p in &report.pairs {
        let mut row = vec![p.index.to_string()];
        row.extend(p.x_s.iter().chain(&p.x_intv).map(|v| v.to_string()));
        row.push(u8::from(p.reject).to_string());
        row.push(p.level_scale.to_string());
        row.push(p.max_margin.to_string());
        row.push(p.truth_redraws.to_string());
        w.write_record(&row).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(&csv_file, e))?;
    Ok(csv_file)
}

pub fn load_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
    let found = value
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::parse(path.display().to_string(), "missing schema_version"))?;
    if found != REPORT_SCHEMA_VERSION as u64 {
        return Err(Error::SchemaVersion {
            expected: REPORT_SCHEMA_VERSION,
            found: found as u32,
        });
    }
    serde_json::from_value(value).map_err(|e| Error::parse(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ncm::BundleConfig;
    use crate::posterior::PosteriorConfig;
    use crate::scm::ScmDims;

    fn small_model(seed: u64) -> (NcmBundle, PosteriorNet) {
        let mut r = rng::seeded(seed);
        (
            NcmBundle::new(BundleConfig::with_dims(1, 4), &mut r).unwrap(),
            PosteriorNet::new(PosteriorConfig::with_dims(1, 4), &mut r).unwrap(),
        )
    }

    #[test]
    fn zero_samples_give_an_empty_set() {
        let (b, p) = small_model(1);
        let out = counterfactual_sample(&b, &p, &[0.3], &[1.0, 2.0], &[0.5], 0, &mut rng::seeded(2)).unwrap();
        assert_eq!(out.shape(), &[0, 2]);
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let (b, p) = small_model(1);
        let draw = |s| counterfactual_sample(&b, &p, &[0.3], &[1.0, 2.0], &[0.5], 5, &mut rng::seeded(s)).unwrap();
        assert_eq!(draw(3), draw(3));
        assert_ne!(draw(3), draw(4));
    }

    #[test]
    fn shapes_are_checked() {
        let (b, p) = small_model(1);
        let mut r = rng::seeded(0);
        assert!(matches!(
            counterfactual_sample(&b, &p, &[0.3, 0.1], &[1.0, 2.0], &[0.5], 2, &mut r),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            counterfactual_sample(&b, &p, &[0.3], &[1.0], &[0.5], 2, &mut r),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn ci_is_clipped_and_brackets_the_score() {
        let pair = |reject| PairReport {
            index: 0,
            x_s: vec![0.0],
            x_intv: vec![0.0],
            reject,
            level_scale: 1.0,
            max_margin: 0.0,
            per_bandwidth: vec![],
            truth_redraws: 0,
        };
        let all = EvalReport::assemble(EvalConfig::default(), vec![pair(false); 4]);
        assert_eq!((all.score, all.ci_95), (1.0, [1.0, 1.0]));
        let mixed = EvalReport::assemble(EvalConfig::default(), vec![pair(false), pair(true), pair(false), pair(false)]);
        assert_eq!(mixed.score, 0.75);
        assert!(mixed.ci_95[0] < 0.75 && mixed.ci_95[1] == 1.0);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let scm = GroundTruthScm::new(ScmDims::new(2).unwrap());
        let cfg = EvalConfig {
            num_pairs: 1,
            ..EvalConfig::default()
        };
        assert!(matches!(evaluate(&ConstantModel::zeros(1), &scm, &cfg), Err(Error::Dimension(_))));
    }
}
