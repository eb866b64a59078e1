use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::functions::*;
use super::metrics::{awoci, pva, q2};
use crate::cgp::{ConstrainedGp, MarginalSummary, MomentSource, ProbMethod, SIGMA_V2_DEFAULT};
use crate::gp::{mle_fit, predict_diag, HyperParams, MleBounds, MleOptions, TrainingSet, NUGGET_FLOOR};
use crate::kernel::{KernelConfig, KernelFamily};
use crate::linop::OperatorSet;
use crate::normal::quantile;
use crate::placement::{min_constraint_prob, place_per_suboperator, PlacementConfig, PlacementTrace, SearchStrategy};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Example1Noiseless,
    Example1Noisy,
    RobotArm,
    Pipeline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// The data-only GP.
    Unconstrained,
    /// Sampling-based search and inference.
    Constrained,
    /// Moment-based Gaussian search, sampling-based inference.
    MomentApprox1,
    /// Moment-based Gaussian search and Gaussian inference.
    MomentApprox2,
    /// Correlation-free moments in the search, sampling-based inference.
    CorrelationFree,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Unconstrained,
        Variant::Constrained,
        Variant::MomentApprox1,
        Variant::MomentApprox2,
        Variant::CorrelationFree,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Unconstrained => "unconstrained",
            Variant::Constrained => "constrained",
            Variant::MomentApprox1 => "moment-approx1",
            Variant::MomentApprox2 => "moment-approx2",
            Variant::CorrelationFree => "correlation-free",
        }
    }

    fn search_method(self) -> ProbMethod {
        match self {
            Variant::MomentApprox1 | Variant::MomentApprox2 => ProbMethod::Gaussian(MomentSource::Samples),
            Variant::CorrelationFree => ProbMethod::Gaussian(MomentSource::CorrelationFree),
            _ => ProbMethod::Samples,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidParameter(format!("unknown variant '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub n_x: usize,
    pub n_c: usize,
    pub n_train: usize,
    /// Cap on the number of virtual observations.
    pub n_v_max: usize,
    /// Posterior draws used for prediction.
    pub k_samples: usize,
    /// Draws of the virtual observations used during the search.
    pub m: usize,
    pub p_target: f64,
    pub replications: usize,
    pub base_seed: u64,
    pub variant: Variant,
    pub n_candidates: usize,
    pub n_test: usize,
    pub mle_restarts: usize,
    /// Importance samples for the constraint probability given the data.
    pub ghk_samples: usize,
    /// Local refinements used for the final minimum constraint probability; 0 skips it.
    pub pc_min_starts: usize,
}

impl ExperimentConfig {
    fn base(kind: ExperimentKind, n_x: usize, n_c: usize, n_train: usize) -> Self {
        Self {
            kind,
            n_x,
            n_c,
            n_train,
            n_v_max: 100,
            k_samples: 10_000,
            m: 1000,
            p_target: 0.99,
            replications: 1,
            base_seed: 0,
            variant: Variant::Constrained,
            n_candidates: 1000,
            n_test: 1000,
            mle_restarts: 5,
            ghk_samples: 5000,
            pc_min_starts: 0,
        }
    }

    /// Fixed-prior 1D problem with seven noiseless observations.
    pub fn example1_noiseless() -> Self {
        Self { n_candidates: 1001, ..Self::base(ExperimentKind::Example1Noiseless, 1, 2, 7) }
    }

    /// 1D problem with 50 noisy observations and fitted hyperparameters.
    pub fn example1_noisy() -> Self {
        Self { n_candidates: 1001, ..Self::base(ExperimentKind::Example1Noisy, 1, 2, 50) }
    }

    /// Four-input arm with 40 Latin hypercube observations and at most 80 sites.
    pub fn robot_arm() -> Self {
        Self { n_v_max: 80, ..Self::base(ExperimentKind::RobotArm, 4, 2, 40) }
    }

    /// Capacity function on the first `n_x` inputs with `n_c` sign constraints.
    pub fn pipeline(n_x: usize, n_c: usize, n_train: usize) -> Self {
        Self {
            p_target: 0.7,
            n_candidates: 2500,
            n_v_max: 100,
            pc_min_starts: 10,
            ..Self::base(ExperimentKind::Pipeline, n_x, n_c, n_train)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.replications == 0 {
            return bad("replications must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.p_target) {
            return bad(format!("p_target must be in [0, 1), got {}", self.p_target));
        }
        if self.k_samples < 2 || self.m == 0 || self.n_test < 2 || self.n_candidates == 0 || self.mle_restarts == 0 {
            return bad("k_samples >= 2, n_test >= 2, and m, n_candidates, mle_restarts >= 1 are required".into());
        }
        match self.kind {
            ExperimentKind::Example1Noiseless | ExperimentKind::Example1Noisy => {
                if self.n_x != 1 || self.n_c > 2 {
                    return bad("the 1D example has n_x = 1 and at most 2 constraints".into());
                }
            }
            ExperimentKind::RobotArm => {
                if self.n_x != 4 || self.n_c > 2 {
                    return bad("the robot arm has n_x = 4 and at most 2 constraints".into());
                }
            }
            ExperimentKind::Pipeline => {
                pipeline_opset(self.n_x, self.n_c)?;
            }
        }
        if self.n_train == 0 {
            return bad("n_train must be >= 1".into());
        }
        Ok(())
    }
}

/// One row of results. Timings are wall-clock seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub replication: usize,
    pub variant: Variant,
    pub n_v: usize,
    pub converged: Option<bool>,
    pub log10_p_c_given_y: Option<f64>,
    pub p_c_min: Option<f64>,
    /// Mean seconds per site search.
    pub t_v: f64,
    /// Seconds spent sampling for prediction.
    pub t_s: f64,
    pub pva: f64,
    pub q2: f64,
    pub awoci: f64,
    pub error: Option<String>,
}

impl ExperimentRecord {
    fn failed(replication: usize, variant: Variant, e: &Error) -> Self {
        Self {
            replication,
            variant,
            n_v: 0,
            converged: None,
            log10_p_c_given_y: None,
            p_c_min: None,
            t_v: 0.0,
            t_s: 0.0,
            pva: f64::NAN,
            q2: f64::NAN,
            awoci: f64::NAN,
            error: Some(e.to_string()),
        }
    }
}

/// Everything a replication needs before a variant is chosen.
#[derive(Debug, Clone)]
pub struct Problem {
    pub train: TrainingSet,
    pub hyper: HyperParams,
    pub opset: OperatorSet,
    pub domain: Vec<(f64, f64)>,
    pub candidates: DMatrix<f64>,
    pub test_x: DMatrix<f64>,
    /// Noise-free function values at `test_x`.
    pub test_y: DVector<f64>,
}

fn eval_rows(x: &DMatrix<f64>, f: impl Fn(&[f64]) -> Result<f64>) -> Result<DVector<f64>> {
    let v = (0..x.nrows())
        .map(|i| f(x.row(i).transpose().as_slice()))
        .collect::<Result<Vec<_>>>()?;
    Ok(DVector::from_vec(v))
}

fn sample_variance(y: &DVector<f64>) -> f64 {
    let n = y.len() as f64;
    let mean = y.mean();
    (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n.max(1.0)).max(1e-6)
}

pub(crate) fn fit_prior(train: &TrainingSet, family: KernelFamily, domain: &[(f64, f64)], noise: Option<(f64, (f64, f64))>, restarts: usize, seed: u64) -> Result<HyperParams> {
    let var_y = sample_variance(&train.y);
    let widths: Vec<f64> = domain.iter().map(|(lo, hi)| hi - lo).collect();
    let init_noise = noise.map_or(NUGGET_FLOOR, |(n, _)| n);
    let init = HyperParams::new(KernelConfig::new(family, var_y, widths.iter().map(|w| 0.3 * w).collect())?, init_noise);
    let bounds = MleBounds {
        variance: (1e-2 * var_y, 1e2 * var_y),
        lengthscale: widths.iter().map(|w| (0.02 * w, 20.0 * w)).collect(),
        noise_var: noise.map(|(_, b)| b),
    };
    mle_fit(train, &init, &bounds, &MleOptions { restarts, seed, ..Default::default() })
}

/// Builds the data, prior, candidates and test set of one replication.
pub fn setup(config: &ExperimentConfig, replication: usize) -> Result<Problem> {
    config.validate()?;
    let seed = config.base_seed.wrapping_add(replication as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = |d: usize| vec![(0.0, 1.0); d];
    let grid = |n: usize| DMatrix::from_fn(n, 1, |i, _| i as f64 / (n.max(2) - 1) as f64);
    let keep = |ops: OperatorSet, n_c: usize, dim: usize| -> Result<OperatorSet> {
        let mut out = OperatorSet::new(dim);
        for e in ops.entries().iter().take(n_c) {
            out.push(e.op, e.bounds.clone())?;
        }
        Ok(out)
    };
    match config.kind {
        ExperimentKind::Example1Noiseless | ExperimentKind::Example1Noisy => {
            let noisy = config.kind == ExperimentKind::Example1Noisy;
            let domain = unit(1);
            let (x, y) = if noisy {
                let x: Vec<f64> = (0..config.n_train).map(|_| 0.1 + 0.7 * rng.random::<f64>()).collect();
                let y: Vec<f64> = x.iter().map(|v| example1_f(*v) + 0.2 * rng.sample::<f64, _>(StandardNormal)).collect();
                (x, y)
            } else {
                let x = example1_design();
                let y = x.iter().map(|v| example1_f(*v)).collect();
                (x, y)
            };
            let train = TrainingSet::new(DMatrix::from_column_slice(x.len(), 1, &x), DVector::from_vec(y))?;
            let hyper = if noisy {
                fit_prior(&train, KernelFamily::Rbf, &domain, Some((0.04, (1e-4, 1.0))), config.mle_restarts, seed)?
            } else {
                HyperParams::new(KernelConfig::new(KernelFamily::Rbf, 0.5, vec![0.1])?, 1e-6)
            };
            let test_x = uniform_sample(config.n_test, &domain, &mut rng);
            let test_y = eval_rows(&test_x, |p| Ok(example1_f(p[0])))?;
            Ok(Problem {
                train,
                hyper,
                opset: keep(example1_opset(), config.n_c, 1)?,
                domain,
                candidates: grid(config.n_candidates),
                test_x,
                test_y,
            })
        }
        ExperimentKind::RobotArm => {
            let domain = ROBOT_BOX.to_vec();
            let x = lhs_sample(config.n_train, &domain, &mut rng);
            let y = eval_rows(&x, |p| Ok(robot_arm_f(p)))?;
            let candidates = uniform_sample(config.n_candidates, &domain, &mut rng);
            let test_x = uniform_sample(config.n_test, &domain, &mut rng);
            let test_y = eval_rows(&test_x, |p| Ok(robot_arm_f(p)))?;
            let train = TrainingSet::new(x, y)?;
            let hyper = fit_prior(&train, KernelFamily::Matern52, &domain, None, config.mle_restarts, seed)?;
            Ok(Problem { train, hyper, opset: keep(robot_opset(), config.n_c, 4)?, domain, candidates, test_x, test_y })
        }
        ExperimentKind::Pipeline => {
            let domain = unit(config.n_x);
            let x = lhs_sample(config.n_train, &domain, &mut rng);
            let clean = eval_rows(&x, pipeline_f)?;
            let y = clean.map(|v| v + 2.0 * rng.sample::<f64, _>(StandardNormal));
            let candidates = uniform_sample(config.n_candidates, &domain, &mut rng);
            let test_x = uniform_sample(config.n_test, &domain, &mut rng);
            let test_y = eval_rows(&test_x, pipeline_f)?;
            let train = TrainingSet::new(x, y)?;
            let hyper = fit_prior(&train, KernelFamily::Matern52, &domain, Some((4.0, (4.0, 4.0))), config.mle_restarts, seed)?;
            Ok(Problem { train, hyper, opset: pipeline_opset(config.n_x, config.n_c)?, domain, candidates, test_x, test_y })
        }
    }
}

/// The fitted model of one variant together with its record.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub record: ExperimentRecord,
    pub model: ConstrainedGp,
    pub trace: Option<PlacementTrace>,
    pub summary: MarginalSummary,
}

/// Gaussian summary with exact quantiles.
pub fn gaussian_summary(mean: DVector<f64>, var: DVector<f64>) -> MarginalSummary {
    let z = quantile(0.975);
    let var = var.map(|v| v.max(0.0));
    let sd = var.map(f64::sqrt);
    MarginalSummary { p025: &mean - &sd * z, p975: &mean + &sd * z, mean, var }
}

/// Places sites (for constrained variants), predicts at the test points and
/// scores the predictions. Deterministic given `seed`.
pub fn evaluate_variant(problem: &Problem, config: &ExperimentConfig, variant: Variant, replication: usize, seed: u64) -> Result<Evaluation> {
    let empty = OperatorSet::new(problem.train.dim());
    let base = ConstrainedGp::assemble(problem.train.clone(), problem.hyper.clone(), empty, SIGMA_V2_DEFAULT)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1_000_000 + Variant::ALL.iter().position(|v| *v == variant).unwrap_or(0) as u64);

    if variant == Variant::Unconstrained {
        let started = Instant::now();
        let (mean, var) = predict_diag(&base.train, &base.hyper, &base.data_factor, &problem.test_x)?;
        let summary = gaussian_summary(mean, var);
        let t_s = started.elapsed().as_secs_f64();
        let record = score(problem, &summary, variant, replication, 0, None, None, None, 0.0, t_s)?;
        return Ok(Evaluation { record, model: base, trace: None, summary });
    }

    let start = base.with_opset(problem.opset.clone())?;
    let mut placement = PlacementConfig::new(config.p_target, problem.candidates.clone(), problem.domain.clone());
    placement.m = config.m;
    placement.max_sites = config.n_v_max;
    placement.seed = seed;
    placement.method = variant.search_method();
    let outcome = place_per_suboperator(&start, &placement)?;
    if let Some(e) = &outcome.trace.error {
        return Err(Error::Optimization(format!("placement failed: {e}")));
    }
    let mut model = outcome.model;

    let started = Instant::now();
    model.refresh_c_samples(config.k_samples, &mut rng)?;
    let summary = if variant == Variant::MomentApprox2 {
        let (mean, cov) = model.posterior_moments(&problem.test_x, MomentSource::Samples)?;
        gaussian_summary(mean, cov.diagonal())
    } else {
        model.posterior_marginal_summary(&problem.test_x, config.k_samples, &mut rng)?
    };
    let t_s = started.elapsed().as_secs_f64();

    let (log_p, _) = model.prob_constraint_given_data(config.ghk_samples, &mut rng)?;
    let p_c_min = if config.pc_min_starts > 0 {
        let mut check = placement.clone();
        check.method = ProbMethod::Samples;
        check.strategy = SearchStrategy::MultiStartLocal {
            candidates: problem.candidates.clone(),
            starts: config.pc_min_starts,
            steps: 20,
        };
        let mut probe = model.clone();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(2_000_000);
        probe.refresh_c_samples(config.m, &mut r)?;
        Some(min_constraint_prob(&probe, &check)?.p)
    } else {
        None
    };
    let record = score(
        problem,
        &summary,
        variant,
        replication,
        model.n_virtual(),
        Some(outcome.trace.converged),
        Some(log_p / std::f64::consts::LN_10),
        p_c_min,
        outcome.trace.mean_seconds(),
        t_s,
    )?;
    Ok(Evaluation { record, model, trace: Some(outcome.trace), summary })
}

#[allow(clippy::too_many_arguments)]
fn score(
    problem: &Problem,
    s: &MarginalSummary,
    variant: Variant,
    replication: usize,
    n_v: usize,
    converged: Option<bool>,
    log10_p: Option<f64>,
    p_c_min: Option<f64>,
    t_v: f64,
    t_s: f64,
) -> Result<ExperimentRecord> {
    let y = problem.test_y.as_slice();
    Ok(ExperimentRecord {
        replication,
        variant,
        n_v,
        converged,
        log10_p_c_given_y: log10_p,
        p_c_min,
        t_v,
        t_s,
        pva: pva(y, s.mean.as_slice(), s.var.map(|v| v.max(f64::MIN_POSITIVE)).as_slice())?,
        q2: q2(y, s.mean.as_slice())?,
        awoci: awoci(s.p975.as_slice(), s.p025.as_slice())?,
        error: None,
    })
}

/// One replication of the configured variant; failures become error records.
pub fn run_replication(config: &ExperimentConfig, replication: usize) -> ExperimentRecord {
    let seed = config.base_seed.wrapping_add(replication as u64);
    setup(config, replication)
        .and_then(|p| evaluate_variant(&p, config, config.variant, replication, seed))
        .map(|e| e.record)
        .unwrap_or_else(|e| ExperimentRecord::failed(replication, config.variant, &e))
}

/// All replications, run in parallel, returned in replication order.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<ExperimentRecord>> {
    config.validate()?;
    Ok((0..config.replications).into_par_iter().map(|r| run_replication(config, r)).collect())
}

/// Several variants on the same replications (shared data and fitted prior).
pub fn run_variants(config: &ExperimentConfig, variants: &[Variant]) -> Result<Vec<ExperimentRecord>> {
    config.validate()?;
    let per_rep: Vec<Vec<ExperimentRecord>> = (0..config.replications)
        .into_par_iter()
        .map(|r| {
            let seed = config.base_seed.wrapping_add(r as u64);
            match setup(config, r) {
                Ok(p) => variants
                    .iter()
                    .map(|v| {
                        evaluate_variant(&p, config, *v, r, seed)
                            .map(|e| e.record)
                            .unwrap_or_else(|e| ExperimentRecord::failed(r, *v, &e))
                    })
                    .collect(),
                Err(e) => variants.iter().map(|v| ExperimentRecord::failed(r, *v, &e)).collect(),
            }
        })
        .collect();
    Ok(per_rep.into_iter().flatten().collect())
}

pub const RECORD_HEADER: [&str; 12] = [
    "replication",
    "variant",
    "n_v",
    "converged",
    "log10_p_c_given_y",
    "p_c_min",
    "t_v",
    "t_s",
    "pva",
    "q2",
    "awoci",
    "error",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn mean_of(vals: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = vals.filter(|x| x.is_finite()).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Writes one row per record plus, per variant, a row of means over the
/// successful replications (replication column `mean`). Timing columns are
/// written as 0 unless `with_timings`.
pub fn write_records_csv<W: Write>(records: &[ExperimentRecord], w: W, with_timings: bool) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(RECORD_HEADER)?;
    let t = |v: f64| if with_timings { v.to_string() } else { "0".to_string() };
    for r in records {
        out.write_record([
            r.replication.to_string(),
            r.variant.to_string(),
            r.n_v.to_string(),
            r.converged.map(|c| c.to_string()).unwrap_or_default(),
            opt(r.log10_p_c_given_y),
            opt(r.p_c_min),
            t(r.t_v),
            t(r.t_s),
            r.pva.to_string(),
            r.q2.to_string(),
            r.awoci.to_string(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    let mut variants: Vec<Variant> = Vec::new();
    for r in records {
        if !variants.contains(&r.variant) {
            variants.push(r.variant);
        }
    }
    for v in variants {
        let ok: Vec<&ExperimentRecord> = records.iter().filter(|r| r.variant == v && r.error.is_none()).collect();
        let failed = records.iter().filter(|r| r.variant == v && r.error.is_some()).count();
        out.write_record([
            "mean".to_string(),
            v.to_string(),
            opt(mean_of(ok.iter().map(|r| r.n_v as f64))),
            String::new(),
            opt(mean_of(ok.iter().filter_map(|r| r.log10_p_c_given_y))),
            opt(mean_of(ok.iter().filter_map(|r| r.p_c_min))),
            t(mean_of(ok.iter().map(|r| r.t_v)).unwrap_or(0.0)),
            t(mean_of(ok.iter().map(|r| r.t_s)).unwrap_or(0.0)),
            opt(mean_of(ok.iter().map(|r| r.pva))),
            opt(mean_of(ok.iter().map(|r| r.q2))),
            opt(mean_of(ok.iter().map(|r| r.awoci))),
            if failed > 0 { format!("{failed} failed") } else { String::new() },
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Posterior bands on a 1D grid plus the virtual sites, for plotting.
#[derive(Debug, Clone, Serialize)]
pub struct PlotData {
    pub x: Vec<f64>,
    pub mean: Vec<f64>,
    pub p025: Vec<f64>,
    pub p975: Vec<f64>,
    pub truth: Vec<f64>,
    /// `(sub-operator index, site coordinates)`.
    pub sites: Vec<(usize, Vec<f64>)>,
}

pub const PLOT_HEADER: [&str; 5] = ["x", "mean", "p025", "p975", "truth"];
pub const SITES_HEADER: [&str; 2] = ["sub_op", "x"];

impl PlotData {
    /// Bands of a 1D model on `n` equally spaced points of `[lo, hi]`.
    pub fn one_dim<R: Rng + ?Sized>(
        model: &ConstrainedGp,
        (lo, hi): (f64, f64),
        n: usize,
        k: usize,
        truth: impl Fn(f64) -> f64,
        gaussian: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let grid: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n.max(2) - 1) as f64).collect();
        let xs = DMatrix::from_column_slice(n, 1, &grid);
        let s = if gaussian {
            let (m, v) = predict_diag(&model.train, &model.hyper, &model.data_factor, &xs)?;
            gaussian_summary(m, v)
        } else {
            model.posterior_marginal_summary(&xs, k, rng)?
        };
        let sites = model
            .opset
            .entries()
            .iter()
            .enumerate()
            .flat_map(|(i, e)| e.sites.iter().map(move |x| (i, x.clone())))
            .collect();
        Ok(Self {
            truth: grid.iter().map(|x| truth(*x)).collect(),
            x: grid,
            mean: s.mean.iter().copied().collect(),
            p025: s.p025.iter().copied().collect(),
            p975: s.p975.iter().copied().collect(),
            sites,
        })
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(PLOT_HEADER)?;
        for i in 0..self.x.len() {
            out.write_record([self.x[i], self.mean[i], self.p025[i], self.p975[i], self.truth[i]].map(|v| v.to_string()))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_sites_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(SITES_HEADER)?;
        for (i, x) in &self.sites {
            let xs: Vec<String> = x.iter().map(|v| v.to_string()).collect();
            out.write_record([i.to_string(), xs.join(";")])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("bogus".parse::<Variant>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ExperimentConfig::robot_arm().validate().is_ok());
        assert!(ExperimentConfig::pipeline(3, 4, 15).validate().is_err());
        let mut c = ExperimentConfig::example1_noiseless();
        c.replications = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn setup_is_deterministic() {
        let mut c = ExperimentConfig::pipeline(3, 2, 15);
        c.mle_restarts = 2;
        let a = setup(&c, 1).unwrap();
        let b = setup(&c, 1).unwrap();
        assert_eq!(a.train.x, b.train.x);
        assert_eq!(a.train.y, b.train.y);
        assert_eq!(a.hyper.kernel, b.hyper.kernel);
        assert!(a.train.x.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a.hyper.noise_var, 4.0);
    }

    #[test]
    fn small_pipeline_run() {
        let mut c = ExperimentConfig::pipeline(2, 1, 10);
        c.k_samples = 500;
        c.m = 200;
        c.n_candidates = 200;
        c.n_test = 100;
        c.mle_restarts = 2;
        c.ghk_samples = 200;
        c.pc_min_starts = 2;
        let recs = run_variants(&c, &[Variant::Unconstrained, Variant::Constrained]).unwrap();
        assert_eq!(recs.len(), 2);
        for r in &recs {
            assert!(r.error.is_none(), "{r:?}");
            assert!(r.q2 <= 1.0 && r.awoci > 0.0 && r.pva.is_finite());
        }
        assert!(recs[1].p_c_min.is_some());
        let mut buf = Vec::new();
        write_records_csv(&recs, &mut buf, false).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 + 2);
        assert!(text.starts_with(&RECORD_HEADER.join(",")));
    }
}
