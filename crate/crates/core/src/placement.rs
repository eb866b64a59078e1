//! Greedy search for virtual observation sites: repeatedly find the point
//! (and sub-operator) where the constraint is least likely to hold and add a
//! site there, until every probability reaches the target.

use std::io::Write;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::cgp::{ConstrainedGp, MomentSource, ProbMethod};
use crate::normal::quantile;
use crate::{Error, Result};

/// Sites closer than this to an existing site of the same sub-operator are skipped.
pub const DUPLICATE_TOL: f64 = 1e-6;

const CHUNK: usize = 256;

#[derive(Debug, Clone)]
pub enum SearchStrategy {
    /// Evaluate every candidate.
    FiniteCandidates(DMatrix<f64>),
    /// Evaluate the candidates, then refine the `starts` lowest by
    /// coordinate descent for up to `steps` rounds.
    MultiStartLocal { candidates: DMatrix<f64>, starts: usize, steps: usize },
}

impl SearchStrategy {
    fn candidates(&self) -> &DMatrix<f64> {
        match self {
            SearchStrategy::FiniteCandidates(c) => c,
            SearchStrategy::MultiStartLocal { candidates, .. } => candidates,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlacementConfig {
    pub p_target: f64,
    /// Draws of `C` used by the probability estimate.
    pub m: usize,
    pub strategy: SearchStrategy,
    /// Cap on the total number of virtual observations.
    pub max_sites: usize,
    /// Axis-aligned search domain.
    pub domain: Vec<(f64, f64)>,
    /// Stop scanning at the first candidate below this probability.
    pub early_stop: Option<f64>,
    pub seed: u64,
    pub method: ProbMethod,
}

impl PlacementConfig {
    pub fn new(p_target: f64, candidates: DMatrix<f64>, domain: Vec<(f64, f64)>) -> Self {
        Self {
            p_target,
            m: 1000,
            strategy: SearchStrategy::FiniteCandidates(candidates),
            max_sites: 100,
            domain,
            early_stop: None,
            seed: 0,
            method: ProbMethod::Samples,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.p_target) {
            return Err(Error::InvalidParameter(format!("p_target must be in [0, 1), got {}", self.p_target)));
        }
        if self.m == 0 {
            return Err(Error::InvalidParameter("m must be >= 1".into()));
        }
        if self.domain.len() != dim {
            return Err(Error::Dimension(format!("domain has {} axes, expected {dim}", self.domain.len())));
        }
        if self.domain.iter().any(|(lo, hi)| !(lo <= hi)) {
            return Err(Error::InvalidParameter(format!("invalid domain {:?}", self.domain)));
        }
        let c = self.strategy.candidates();
        if c.nrows() == 0 {
            return Err(Error::InvalidParameter("candidate set is empty".into()));
        }
        if c.ncols() != dim {
            return Err(Error::Dimension(format!("candidates have {} columns, expected {dim}", c.ncols())));
        }
        for r in 0..c.nrows() {
            for (j, (lo, hi)) in self.domain.iter().enumerate() {
                let v = c[(r, j)];
                if v < *lo || v > *hi {
                    return Err(Error::InvalidParameter(format!("candidate {r} lies outside the domain")));
                }
            }
        }
        Ok(())
    }
}

/// Half-width added to each bound so that the target stays reachable under
/// the virtual observation noise.
pub fn margin(sigma_v2: f64, p_target: f64) -> f64 {
    (sigma_v2.sqrt() * quantile(p_target)).max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinProb {
    pub x: Vec<f64>,
    pub sub_op: usize,
    pub p: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceRow {
    pub iter: usize,
    /// Sub-operator that received the site; empty for joint placement.
    pub sub_op: Option<usize>,
    pub x_star: Vec<f64>,
    pub p_star: f64,
    /// Number of virtual observations when the minimum was computed.
    pub n_v: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct PlacementTrace {
    pub rows: Vec<TraceRow>,
    pub converged: bool,
    pub error: Option<String>,
}

impl PlacementTrace {
    pub const HEADER: [&'static str; 6] = ["iter", "sub_op", "x_star", "p_star", "n_v", "seconds"];

    /// CSV with columns `iter,sub_op,x_star,p_star,n_v,seconds`; `x_star`
    /// holds the coordinates separated by `;`.
    pub fn write_csv<W: Write>(&self, w: W, with_timings: bool) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(Self::HEADER)?;
        for r in &self.rows {
            let x: Vec<String> = r.x_star.iter().map(|v| v.to_string()).collect();
            out.write_record([
                r.iter.to_string(),
                r.sub_op.map(|s| s.to_string()).unwrap_or_default(),
                x.join(";"),
                r.p_star.to_string(),
                r.n_v.to_string(),
                if with_timings { r.seconds.to_string() } else { "0".into() },
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Mean seconds per added site.
    pub fn mean_seconds(&self) -> f64 {
        if self.rows.is_empty() {
            0.0
        } else {
            self.rows.iter().map(|r| r.seconds).sum::<f64>() / self.rows.len() as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Joint,
    PerSubOperator,
}

fn is_duplicate(cgp: &ConstrainedGp, mode: Mode, op: usize, x: &[f64]) -> bool {
    let near = |s: &Vec<f64>| s.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() < DUPLICATE_TOL;
    match mode {
        Mode::Joint => cgp.opset.entries().iter().any(|e| e.sites.iter().any(near)),
        Mode::PerSubOperator => cgp.opset.entries()[op].sites.iter().any(near),
    }
}

/// `(sub-operator, probability)` of the lowest admissible entry in a row.
fn row_min(cgp: &ConstrainedGp, mode: Mode, probs: &DMatrix<f64>, row: usize, x: &[f64]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for i in 0..probs.ncols() {
        if is_duplicate(cgp, mode, i, x) {
            continue;
        }
        let p = probs[(row, i)];
        if best.is_none_or(|(_, b)| p < b) {
            best = Some((i, p));
        }
    }
    best
}

fn point_probs(cgp: &ConstrainedGp, x: &DMatrix<f64>, margin: f64, method: ProbMethod) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    let chunks: Vec<usize> = (0..n).step_by(CHUNK).collect();
    let parts = chunks
        .par_iter()
        .map(|&s| cgp.constraint_prob_pointwise(&x.rows(s, CHUNK.min(n - s)).into_owned(), margin, method))
        .collect::<Result<Vec<_>>>()?;
    let k = cgp.opset.n_ops();
    let mut out = DMatrix::zeros(n, k);
    for (&s, p) in chunks.iter().zip(parts) {
        out.rows_mut(s, p.nrows()).copy_from(&p);
    }
    Ok(out)
}

fn minimize(cgp: &ConstrainedGp, config: &PlacementConfig, mode: Mode) -> Result<MinProb> {
    let margin = margin(cgp.sigma_v2, config.p_target);
    let cands = config.strategy.candidates();
    if cands.nrows() == 0 {
        return Err(Error::InvalidParameter("candidate set is empty".into()));
    }
    if cgp.opset.n_ops() == 0 {
        return Ok(MinProb { x: cands.row(0).iter().copied().collect(), sub_op: 0, p: 1.0 });
    }
    let row = |r: usize| -> Vec<f64> { cands.row(r).iter().copied().collect() };

    let mut scored: Vec<(usize, usize, f64)> = Vec::new();
    match config.early_stop {
        Some(thr) => {
            'scan: for s in (0..cands.nrows()).step_by(CHUNK) {
                let part = cands.rows(s, CHUNK.min(cands.nrows() - s)).into_owned();
                let probs = cgp.constraint_prob_pointwise(&part, margin, config.method)?;
                for r in 0..part.nrows() {
                    if let Some((op, p)) = row_min(cgp, mode, &probs, r, &row(s + r)) {
                        scored.push((s + r, op, p));
                        if p < thr {
                            break 'scan;
                        }
                    }
                }
            }
        }
        None => {
            let probs = point_probs(cgp, cands, margin, config.method)?;
            for r in 0..cands.nrows() {
                if let Some((op, p)) = row_min(cgp, mode, &probs, r, &row(r)) {
                    scored.push((r, op, p));
                }
            }
        }
    }
    // stable order keeps ties on the earliest candidate
    scored.sort_by(|a, b| a.2.total_cmp(&b.2));
    let &(r0, op0, p0) = scored
        .first()
        .ok_or_else(|| Error::InvalidParameter("every candidate duplicates an existing site".into()))?;
    let mut best = MinProb { x: row(r0), sub_op: op0, p: p0 };

    if let SearchStrategy::MultiStartLocal { starts, steps, .. } = &config.strategy {
        let eval = |x: &[f64]| -> Result<Option<(usize, f64)>> {
            let pm = DMatrix::from_row_slice(1, x.len(), x);
            let probs = cgp.constraint_prob_pointwise(&pm, margin, config.method)?;
            Ok(row_min(cgp, mode, &probs, 0, x))
        };
        let refined = scored
            .iter()
            .take(*starts)
            .collect::<Vec<_>>()
            .par_iter()
            .map(|&&(r, op, p)| -> Result<MinProb> {
                let mut cur = MinProb { x: row(r), sub_op: op, p };
                let mut step: Vec<f64> = config.domain.iter().map(|(lo, hi)| 0.1 * (hi - lo)).collect();
                for _ in 0..*steps {
                    let mut improved = false;
                    for j in 0..cur.x.len() {
                        for dir in [1.0, -1.0] {
                            let mut x = cur.x.clone();
                            x[j] = (x[j] + dir * step[j]).clamp(config.domain[j].0, config.domain[j].1);
                            if x[j] == cur.x[j] {
                                continue;
                            }
                            if let Some((o, q)) = eval(&x)? {
                                if q < cur.p {
                                    cur = MinProb { x, sub_op: o, p: q };
                                    improved = true;
                                }
                            }
                        }
                    }
                    if !improved {
                        step.iter_mut().for_each(|s| *s *= 0.5);
                    }
                }
                Ok(cur)
            })
            .collect::<Result<Vec<_>>>()?;
        for r in refined {
            if r.p < best.p {
                best = r;
            }
        }
    }
    Ok(best)
}

/// The point and sub-operator with the smallest estimated constraint
/// probability over the configured search set.
pub fn min_constraint_prob(cgp: &ConstrainedGp, config: &PlacementConfig) -> Result<MinProb> {
    config.validate(cgp.train.dim())?;
    minimize(cgp, config, Mode::PerSubOperator)
}

/// Result of a placement run. On a mid-run failure `model` holds the last
/// good state and `trace.error` the message.
#[derive(Debug, Clone)]
pub struct PlacementOutcome {
    pub model: ConstrainedGp,
    pub trace: PlacementTrace,
}

fn needs_samples(method: ProbMethod) -> bool {
    !matches!(method, ProbMethod::Gaussian(MomentSource::CorrelationFree))
}

fn run(cgp: &ConstrainedGp, config: &PlacementConfig, mode: Mode) -> Result<PlacementOutcome> {
    config.validate(cgp.train.dim())?;
    let mut model = cgp.clone();
    let mut trace = PlacementTrace::default();
    let k = model.opset.n_ops();
    let per_site = if mode == Mode::Joint { k.max(1) } else { 1 };
    for iter in 0.. {
        let started = Instant::now();
        let step = (|| -> Result<MinProb> {
            if model.n_virtual() > 0 && needs_samples(config.method) {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(iter as u64);
                model.refresh_c_samples(config.m, &mut rng)?;
            }
            minimize(&model, config, mode)
        })();
        let best = match step {
            Ok(b) => b,
            Err(e) => {
                trace.error = Some(e.to_string());
                break;
            }
        };
        let n_v = model.n_virtual();
        let done = best.p >= config.p_target;
        let full = n_v + per_site > config.max_sites;
        trace.rows.push(TraceRow {
            iter,
            sub_op: if mode == Mode::Joint || done || full { None } else { Some(best.sub_op) },
            x_star: best.x.clone(),
            p_star: best.p,
            n_v,
            seconds: started.elapsed().as_secs_f64(),
        });
        if done {
            trace.converged = true;
            break;
        }
        if full {
            break;
        }
        let mut ops = model.opset.clone();
        let added = match mode {
            Mode::Joint => ops.add_site_all(&best.x),
            Mode::PerSubOperator => ops.add_site(best.sub_op, best.x.clone()),
        };
        match added.and_then(|_| model.with_opset(ops)) {
            Ok(m) => model = m,
            Err(e) => {
                trace.error = Some(e.to_string());
                break;
            }
        }
        if let Some(last) = trace.rows.last_mut() {
            last.seconds = started.elapsed().as_secs_f64();
        }
    }
    Ok(PlacementOutcome { model, trace })
}

/// Adds each accepted site to every sub-operator. The probability at a point
/// is the smallest of its per-sub-operator probabilities.
pub fn place_joint(cgp: &ConstrainedGp, config: &PlacementConfig) -> Result<PlacementOutcome> {
    run(cgp, config, Mode::Joint)
}

/// Adds each accepted site only to the sub-operator where the minimum occurred.
pub fn place_per_suboperator(cgp: &ConstrainedGp, config: &PlacementConfig) -> Result<PlacementOutcome> {
    run(cgp, config, Mode::PerSubOperator)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cgp::SIGMA_V2_DEFAULT;
    use crate::gp::{HyperParams, TrainingSet};
    use crate::kernel::{KernelConfig, KernelFamily};
    use crate::linop::{BoundPair, OperatorSet, SubOperator};
    use nalgebra::DVector;

    fn grid(n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, 1, |i, _| i as f64 / (n - 1) as f64)
    }

    fn monotone_toy() -> ConstrainedGp {
        let x = DMatrix::from_column_slice(3, 1, &[0.2, 0.5, 0.8]);
        let y = DVector::from_vec(vec![0.1, 0.5, 0.9]);
        let h = HyperParams::new(KernelConfig::new(KernelFamily::Rbf, 0.5, vec![0.15]).unwrap(), 1e-6);
        let ops = OperatorSet::new(1).with_entry(SubOperator::Partial(0), BoundPair::lower_only(0.0)).unwrap();
        ConstrainedGp::assemble(TrainingSet::new(x, y).unwrap(), h, ops, SIGMA_V2_DEFAULT).unwrap()
    }

    #[test]
    fn margin_examples() {
        assert_eq!(margin(1e-6, 0.3), 0.0);
        assert!((margin(1e-6, 0.99) - 1e-3 * 2.326_347_874_040_841).abs() < 1e-12);
    }

    #[test]
    fn zero_target_stops_immediately() {
        let cgp = monotone_toy();
        let cfg = PlacementConfig::new(0.0, grid(21), vec![(0.0, 1.0)]);
        let out = place_joint(&cgp, &cfg).unwrap();
        assert_eq!(out.model.n_virtual(), 0);
        assert_eq!(out.trace.rows.len(), 1);
        assert!(out.trace.converged);
    }

    #[test]
    fn vacuous_bounds_give_probability_one() {
        let mut cgp = monotone_toy();
        let ops = OperatorSet::new(1).with_entry(SubOperator::Partial(0), BoundPair::unbounded()).unwrap();
        cgp = cgp.with_opset(ops).unwrap();
        let cfg = PlacementConfig::new(0.9, grid(11), vec![(0.0, 1.0)]);
        assert_eq!(min_constraint_prob(&cgp, &cfg).unwrap().p, 1.0);
        let out = place_per_suboperator(&cgp, &cfg).unwrap();
        assert_eq!(out.model.n_virtual(), 0);
    }

    #[test]
    fn monotone_toy_reaches_target() {
        let cgp = monotone_toy();
        let mut cfg = PlacementConfig::new(0.9, grid(101), vec![(0.0, 1.0)]);
        cfg.m = 300;
        cfg.max_sites = 20;
        let out = place_joint(&cgp, &cfg).unwrap();
        assert!(out.trace.converged, "{:?}", out.trace);
        let n = out.model.n_virtual();
        assert!(n <= 20);
        assert_eq!(out.trace.rows.len(), n + 1);
        for w in out.trace.rows.windows(2) {
            assert!(w[1].n_v > w[0].n_v);
        }
    }

    #[test]
    fn one_operator_joint_equals_per_suboperator() {
        let cgp = monotone_toy();
        let mut cfg = PlacementConfig::new(0.9, grid(51), vec![(0.0, 1.0)]);
        cfg.m = 200;
        cfg.max_sites = 10;
        let a = place_joint(&cgp, &cfg).unwrap();
        let b = place_per_suboperator(&cgp, &cfg).unwrap();
        assert_eq!(a.model.opset.entries()[0].sites, b.model.opset.entries()[0].sites);
    }

    #[test]
    fn local_refinement_never_worse() {
        let cgp = monotone_toy();
        let cands = grid(11);
        let cfg = PlacementConfig::new(0.9, cands.clone(), vec![(0.0, 1.0)]);
        let plain = min_constraint_prob(&cgp, &cfg).unwrap();
        let mut local = cfg.clone();
        local.strategy = SearchStrategy::MultiStartLocal { candidates: cands, starts: 3, steps: 10 };
        let refined = min_constraint_prob(&cgp, &local).unwrap();
        assert!(refined.p <= plain.p);
        assert!((0.0..=1.0).contains(&refined.x[0]));
    }

    #[test]
    fn invalid_configs() {
        let cgp = monotone_toy();
        let mut cfg = PlacementConfig::new(1.0, grid(5), vec![(0.0, 1.0)]);
        assert!(place_joint(&cgp, &cfg).is_err());
        cfg.p_target = 0.5;
        cfg.strategy = SearchStrategy::FiniteCandidates(DMatrix::zeros(0, 1));
        assert!(min_constraint_prob(&cgp, &cfg).is_err());
        cfg.strategy = SearchStrategy::FiniteCandidates(DMatrix::from_element(1, 1, 2.0));
        assert!(min_constraint_prob(&cgp, &cfg).is_err());
    }

    #[test]
    fn trace_csv_header() {
        let trace = PlacementTrace {
            rows: vec![TraceRow { iter: 0, sub_op: Some(1), x_star: vec![0.5, 0.25], p_star: 0.5, n_v: 0, seconds: 1.5 }],
            converged: false,
            error: None,
        };
        let mut buf = Vec::new();
        trace.write_csv(&mut buf, false).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s, "iter,sub_op,x_star,p_star,n_v,seconds\n0,1,0.5;0.25,0.5,0,0\n");
    }
}
