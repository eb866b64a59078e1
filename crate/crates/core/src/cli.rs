use std::ffi::OsString;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::{
    example1_f, gaussian_summary, run_variants, setup, uniform_sample, write_records_csv, evaluate_variant,
    ExperimentConfig, PlotData, Variant,
};
use crate::cgp::{ConstrainedGp, SIGMA_V2_DEFAULT};
use crate::gp::{predict_diag, TrainingSet, NUGGET_FLOOR};
use crate::kernel::KernelFamily;
use crate::linop::{BoundPair, OperatorSet, SubOperator};
use crate::placement::{place_per_suboperator, PlacementConfig};
use crate::{Error, Result};

/// Default output directory when `--out` is not given.
pub const OUT_DIR_ENV: &str = "CGP_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "cgp", version, about = "Gaussian process regression under linear inequality constraints")]
pub struct Cli {
    /// Write wall-clock timings instead of zeros (output is then not reproducible).
    #[arg(long, global = true)]
    pub timings: bool,
    /// Print progress to stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// 1D monotone and bounded example, with and without constraints.
    Example1(Example1Args),
    /// Robot arm benchmark.
    Robot(BenchArgs),
    /// Pipeline capacity benchmark.
    Pipeline(BenchArgs),
    /// Fit a constrained GP to a CSV data set.
    Fit(FitArgs),
}

#[derive(Debug, Args)]
pub struct Example1Args {
    /// Use 50 noisy observations and fitted hyperparameters.
    #[arg(long, conflicts_with = "noiseless")]
    pub noisy: bool,
    /// Use the seven noiseless observations (default).
    #[arg(long)]
    pub noiseless: bool,
    #[arg(long, default_value_t = 0.99)]
    pub p_target: f64,
    #[arg(long, env = OUT_DIR_ENV, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Posterior draws for the plotted bands and the metrics.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Number of grid points in the plot data.
    #[arg(long, default_value_t = 201)]
    pub grid: usize,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// TOML or JSON file with experiment settings; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub replications: Option<usize>,
    /// Comma-separated list of variants.
    #[arg(long, value_delimiter = ',')]
    pub variant: Vec<Variant>,
    #[arg(long)]
    pub nx: Option<usize>,
    #[arg(long)]
    pub nc: Option<usize>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub p_target: Option<f64>,
    #[arg(long)]
    pub n_v_max: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, env = OUT_DIR_ENV, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// CSV with a header row; the last column is the response.
    #[arg(long)]
    pub data: PathBuf,
    /// TOML or JSON constraint list.
    #[arg(long)]
    pub constraints: Option<PathBuf>,
    /// CSV of query points with a header row.
    #[arg(long)]
    pub predict: PathBuf,
    #[arg(long, default_value_t = 0.99)]
    pub p_target: f64,
    #[arg(long, default_value = "matern52")]
    pub kernel: KernelFamily,
    /// Fixed observation noise variance.
    #[arg(long, conflicts_with = "fit_noise")]
    pub noise: Option<f64>,
    /// Estimate the noise variance along with the kernel parameters.
    #[arg(long)]
    pub fit_noise: bool,
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 1000)]
    pub candidates: usize,
    #[arg(long, default_value_t = 100)]
    pub n_v_max: usize,
    #[arg(long, default_value_t = 5)]
    pub restarts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, env = OUT_DIR_ENV, default_value = "out")]
    pub out: PathBuf,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Parses `args` and runs the command. Returns the process exit code:
/// 0 on success, 1 on a runtime failure, 2 on a usage error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::Example1(a) => cmd_example1(a, &cli),
        Command::Robot(a) => cmd_bench(a, false, &cli),
        Command::Pipeline(a) => cmd_bench(a, true, &cli),
        Command::Fit(a) => cmd_fit(a, &cli),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn create(dir: &Path, name: &str) -> CliResult<BufWriter<File>> {
    let path = dir.join(name);
    let f = File::create(&path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    Ok(BufWriter::new(f))
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Input(format!("{}: {e}", dir.display())))?;
    Ok(())
}

fn log(cli: &Cli, msg: impl AsRef<str>) {
    if cli.verbose > 0 {
        eprintln!("{}", msg.as_ref());
    }
}

fn cmd_example1(a: &Example1Args, cli: &Cli) -> CliResult<()> {
    let mut config = if a.noisy { ExperimentConfig::example1_noisy() } else { ExperimentConfig::example1_noiseless() };
    config.p_target = a.p_target;
    config.base_seed = a.seed;
    if let Some(k) = a.samples {
        config.k_samples = k;
    }
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    if a.grid < 2 {
        return Err(Failure::Usage("--grid must be >= 2".into()));
    }
    ensure_dir(&a.out)?;
    let problem = setup(&config, 0)?;
    let mut records = Vec::new();
    for variant in [Variant::Unconstrained, Variant::Constrained] {
        log(cli, format!("example1: {variant}"));
        let ev = evaluate_variant(&problem, &config, variant, 0, a.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        rng.set_stream(3_000_000);
        let gaussian = ev.model.n_virtual() == 0;
        let plot = PlotData::one_dim(&ev.model, (0.0, 1.0), a.grid, config.k_samples, example1_f, gaussian, &mut rng)?;
        plot.write_csv(create(&a.out, &format!("example1_plot_{variant}.csv"))?)?;
        if let Some(trace) = &ev.trace {
            plot.write_sites_csv(create(&a.out, "example1_sites.csv")?)?;
            trace.write_csv(create(&a.out, "example1_trace.csv")?, cli.timings)?;
            log(cli, format!("example1: {} sites, per operator {:?}", ev.model.n_virtual(), ev.model.opset.site_counts()));
        }
        records.push(ev.record);
    }
    write_records_csv(&records, create(&a.out, "example1_metrics.csv")?, cli.timings)?;
    Ok(())
}

/// Experiment settings that may appear in a config file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    replications: Option<usize>,
    variants: Option<Vec<Variant>>,
    n_x: Option<usize>,
    n_c: Option<usize>,
    n_train: Option<usize>,
    n_v_max: Option<usize>,
    k_samples: Option<usize>,
    m: Option<usize>,
    p_target: Option<f64>,
    seed: Option<u64>,
    n_candidates: Option<usize>,
    n_test: Option<usize>,
    mle_restarts: Option<usize>,
    ghk_samples: Option<usize>,
    pc_min_starts: Option<usize>,
}

fn parse_structured<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let parsed = if json {
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    } else {
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    };
    parsed.map_err(|m| Failure::Runtime(Error::Input(m)))
}

#[derive(Serialize)]
struct Manifest<'a> {
    config: &'a ExperimentConfig,
    variants: &'a [Variant],
}

fn cmd_bench(a: &BenchArgs, pipeline: bool, cli: &Cli) -> CliResult<()> {
    let file: ConfigFile = match &a.config {
        Some(p) => parse_structured(p)?,
        None => ConfigFile::default(),
    };
    let n_x = a.nx.or(file.n_x);
    let n_c = a.nc.or(file.n_c);
    let n_train = a.n_train.or(file.n_train);
    let mut config = if pipeline {
        let n_x = n_x.unwrap_or(3);
        ExperimentConfig::pipeline(n_x, n_c.unwrap_or(2.min(n_x)), n_train.unwrap_or(5 * n_x))
    } else {
        let mut c = ExperimentConfig::robot_arm();
        c.n_x = n_x.unwrap_or(c.n_x);
        c.n_c = n_c.unwrap_or(c.n_c);
        c.n_train = n_train.unwrap_or(c.n_train);
        c
    };
    macro_rules! layer {
        ($field:ident, $flag:expr, $file:expr) => {
            if let Some(v) = $flag.or($file) {
                config.$field = v;
            }
        };
    }
    layer!(replications, a.replications, file.replications);
    layer!(p_target, a.p_target, file.p_target);
    layer!(n_v_max, a.n_v_max, file.n_v_max);
    layer!(k_samples, a.samples, file.k_samples);
    layer!(m, a.m, file.m);
    layer!(base_seed, a.seed, file.seed);
    layer!(n_candidates, None, file.n_candidates);
    layer!(n_test, None, file.n_test);
    layer!(mle_restarts, None, file.mle_restarts);
    layer!(ghk_samples, None, file.ghk_samples);
    layer!(pc_min_starts, None, file.pc_min_starts);
    let variants = if !a.variant.is_empty() {
        a.variant.clone()
    } else {
        file.variants.unwrap_or_else(|| vec![Variant::Unconstrained, Variant::Constrained])
    };
    config.variant = variants[0];
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;

    ensure_dir(&a.out)?;
    let name = if pipeline { "pipeline" } else { "robot" };
    log(cli, format!("{name}: {} replications of {variants:?}", config.replications));
    let records = run_variants(&config, &variants)?;
    write_records_csv(&records, create(&a.out, &format!("{name}_results.csv"))?, cli.timings)?;
    let manifest = serde_json::to_string_pretty(&Manifest { config: &config, variants: &variants }).map_err(Error::from)?;
    fs::write(a.out.join(format!("{name}_config.json")), manifest + "\n")?;
    let failed = records.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        eprintln!("warning: {failed} of {} runs failed; see the error column", records.len());
    }
    Ok(())
}

/// A bound given as a number or as `"inf"`, `"+inf"` or `"-inf"`.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum BoundValue {
    Num(f64),
    Text(String),
}

impl BoundValue {
    fn value(&self) -> Result<f64> {
        match self {
            BoundValue::Num(v) => Ok(*v),
            BoundValue::Text(s) => match s.trim().to_ascii_lowercase().as_str() {
                "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
                "-inf" | "-infinity" => Ok(f64::NEG_INFINITY),
                other => other.parse().map_err(|_| Error::Input(format!("bad bound '{s}'"))),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintKind {
    /// Bounds on the function itself.
    Value,
    /// Bounds on a partial derivative along `axis`.
    Derivative,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSpec {
    pub kind: ConstraintKind,
    pub axis: Option<usize>,
    pub lower: Option<BoundValue>,
    pub upper: Option<BoundValue>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintFile {
    #[serde(default)]
    pub constraints: Vec<ConstraintSpec>,
}

impl ConstraintFile {
    pub fn to_opset(&self, dim: usize) -> Result<OperatorSet> {
        let mut ops = OperatorSet::new(dim);
        for (i, c) in self.constraints.iter().enumerate() {
            let op = match (c.kind, c.axis) {
                (ConstraintKind::Value, None) => SubOperator::Identity,
                (ConstraintKind::Value, Some(_)) => {
                    return Err(Error::Input(format!("constraint {i}: a value constraint takes no axis")));
                }
                (ConstraintKind::Derivative, Some(a)) => SubOperator::Partial(a),
                (ConstraintKind::Derivative, None) => {
                    return Err(Error::Input(format!("constraint {i}: a derivative constraint needs an axis")));
                }
            };
            let lo = c.lower.as_ref().map_or(Ok(f64::NEG_INFINITY), BoundValue::value)?;
            let hi = c.upper.as_ref().map_or(Ok(f64::INFINITY), BoundValue::value)?;
            let bounds = BoundPair::constant(lo, hi).map_err(|e| Error::Input(format!("constraint {i}: {e}")))?;
            ops.push(op, bounds).map_err(|e| Error::Input(format!("constraint {i}: {e}")))?;
        }
        Ok(ops)
    }
}

/// Reads a numeric CSV with a header row. Errors name the file and line.
pub fn read_numeric_csv(path: &Path) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut vals = Vec::new();
    let mut n = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(Error::Input(format!(
                "{}:{line}: expected {} fields, found {}",
                path.display(),
                header.len(),
                rec.len()
            )));
        }
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Input(format!("{}:{line}: column '{}' is not a number: '{field}'", path.display(), header[j]))
            })?;
            if !v.is_finite() {
                return Err(Error::Input(format!("{}:{line}: column '{}' is not finite", path.display(), header[j])));
            }
            vals.push(v);
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Input(format!("{}: no data rows", path.display())));
    }
    Ok((header.clone(), DMatrix::from_row_slice(n, header.len(), &vals)))
}

pub const PREDICTION_HEADER: [&str; 4] = ["mean", "sd", "p025", "p975"];

fn cmd_fit(a: &FitArgs, cli: &Cli) -> CliResult<()> {
    if !(0.0..1.0).contains(&a.p_target) {
        return Err(Failure::Usage(format!("--p-target must be in [0, 1), got {}", a.p_target)));
    }
    if a.samples < 2 || a.candidates == 0 || a.restarts == 0 {
        return Err(Failure::Usage("--samples >= 2, --candidates >= 1 and --restarts >= 1 are required".into()));
    }
    let (header, data) = read_numeric_csv(&a.data)?;
    if header.len() < 2 {
        return Err(Failure::Runtime(Error::Input(format!("{}: need at least one input column and y", a.data.display()))));
    }
    let dim = header.len() - 1;
    let x = data.columns(0, dim).into_owned();
    let y = DVector::from_iterator(data.nrows(), data.column(dim).iter().copied());
    let (qheader, query) = read_numeric_csv(&a.predict)?;
    if qheader.len() != dim {
        return Err(Failure::Runtime(Error::Input(format!(
            "{}: expected {dim} columns to match the data inputs, found {}",
            a.predict.display(),
            qheader.len()
        ))));
    }
    let spec: ConstraintFile = match &a.constraints {
        Some(p) => parse_structured(p)?,
        None => ConstraintFile::default(),
    };
    let opset = spec.to_opset(dim)?;

    let domain: Vec<(f64, f64)> = (0..dim)
        .map(|j| {
            let (xc, qc) = (x.column(j), query.column(j));
            let (lo, hi) = xc.iter().chain(qc.iter()).copied().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
            if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) }
        })
        .collect();
    let train = TrainingSet::new(x, y)?;
    let noise = match (a.noise, a.fit_noise) {
        (Some(n), _) => Some((n, (n, n))),
        (None, true) => {
            let v = train.y.variance().max(1e-12);
            Some((1e-2 * v, (NUGGET_FLOOR, v)))
        }
        (None, false) => None,
    };
    log(cli, "fit: estimating hyperparameters");
    let hyper = crate::bench::fit_prior(&train, a.kernel, &domain, noise, a.restarts, a.seed)?;
    let base = ConstrainedGp::assemble(train, hyper, opset, SIGMA_V2_DEFAULT)?;

    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let candidates = uniform_sample(a.candidates, &domain, &mut rng);
    let mut placement = PlacementConfig::new(a.p_target, candidates, domain);
    placement.max_sites = a.n_v_max;
    placement.seed = a.seed;
    let (mut model, trace) = if base.opset.is_empty() {
        (base, None)
    } else {
        let outcome = place_per_suboperator(&base, &placement)?;
        if let Some(e) = &outcome.trace.error {
            return Err(Failure::Runtime(Error::Optimization(format!("placement failed: {e}"))));
        }
        (outcome.model, Some(outcome.trace))
    };
    log(cli, format!("fit: {} virtual observations", model.n_virtual()));

    let summary = if model.n_virtual() == 0 {
        let (m, v) = predict_diag(&model.train, &model.hyper, &model.data_factor, &query)?;
        gaussian_summary(m, v)
    } else {
        rng.set_stream(1);
        model.refresh_c_samples(a.samples, &mut rng)?;
        model.posterior_marginal_summary(&query, a.samples, &mut rng)?
    };

    ensure_dir(&a.out)?;
    let mut w = csv::Writer::from_writer(create(&a.out, "predictions.csv")?);
    let mut head = qheader.clone();
    head.extend(PREDICTION_HEADER.iter().map(|s| s.to_string()));
    w.write_record(&head).map_err(Error::from)?;
    for i in 0..query.nrows() {
        let mut row: Vec<String> = query.row(i).iter().map(|v| v.to_string()).collect();
        let s = [summary.mean[i], summary.var[i].max(0.0).sqrt(), summary.p025[i], summary.p975[i]];
        row.extend(s.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(Error::from)?;
    }
    w.flush()?;
    if let Some(t) = &trace {
        t.write_csv(create(&a.out, "trace.csv")?, cli.timings)?;
    }
    fs::write(a.out.join("hyperparameters.json"), serde_json::to_string_pretty(&model.hyper).map_err(Error::from)? + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bound_literals() {
        assert_eq!(BoundValue::Text("inf".into()).value().unwrap(), f64::INFINITY);
        assert_eq!(BoundValue::Text("-inf".into()).value().unwrap(), f64::NEG_INFINITY);
        assert_eq!(BoundValue::Text("2.5".into()).value().unwrap(), 2.5);
        assert_eq!(BoundValue::Num(-1.0).value().unwrap(), -1.0);
        assert!(BoundValue::Text("big".into()).value().is_err());
    }

    #[test]
    fn constraint_file_formats_agree() {
        let t: ConstraintFile = toml::from_str(
            "[[constraints]]\nkind = \"derivative\"\naxis = 0\nlower = 0.0\nupper = \"inf\"\n\n[[constraints]]\nkind = \"value\"\nupper = 3\n",
        )
        .unwrap();
        let j: ConstraintFile = serde_json::from_str(
            r#"{"constraints": [{"kind": "derivative", "axis": 0, "lower": 0, "upper": "inf"}, {"kind": "value", "upper": 3}]}"#,
        )
        .unwrap();
        for f in [t, j] {
            let ops = f.to_opset(2).unwrap();
            assert_eq!(ops.n_ops(), 2);
            assert_eq!(ops.entries()[0].op, SubOperator::Partial(0));
            assert_eq!(ops.entries()[1].bounds.eval(&[0.0, 0.0]).unwrap(), (f64::NEG_INFINITY, 3.0));
        }
    }

    #[test]
    fn bad_constraints_are_rejected() {
        let no_axis: ConstraintFile = toml::from_str("[[constraints]]\nkind = \"derivative\"\n").unwrap();
        assert!(no_axis.to_opset(1).is_err());
        let out_of_range: ConstraintFile = toml::from_str("[[constraints]]\nkind = \"derivative\"\naxis = 3\n").unwrap();
        assert!(out_of_range.to_opset(2).is_err());
        let empty: ConstraintFile =
            toml::from_str("[[constraints]]\nkind = \"value\"\nlower = 1\nupper = 0\n").unwrap();
        assert!(empty.to_opset(1).is_err());
        assert!(toml::from_str::<ConstraintFile>("[[constraints]]\nkind = \"curvature\"\n").is_err());
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        fs::write(&p, "x,y\n0.1,1\n0.2,oops\n").unwrap();
        let e = read_numeric_csv(&p).unwrap_err().to_string();
        assert!(e.contains(":3:") && e.contains("'y'"), "{e}");
        fs::write(&p, "x,y\n0.1,1\n0.2\n").unwrap();
        assert!(read_numeric_csv(&p).is_err());
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["cgp", "robot", "--variant", "nope"]), 2);
        assert_eq!(run(["cgp", "frobnicate"]), 2);
        assert_eq!(run(["cgp", "example1", "--p-target", "1.5", "--out", "/nonexistent/never"]), 2);
    }
}
