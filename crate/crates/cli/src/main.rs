mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gsps_core::gsps::{stage1_blocks, AlphaChoice, BlockPartition, GammaPooling, GspsConfig};
use gsps_core::harness::{predictor_from_file, run_crossval, run_experiment, Cell, ExperimentSpec, FitSettings, FittedModel};
use gsps_core::io::{self, FitMethod, FittedModelFile, SimulationSidecar};
use gsps_core::model::{CorrelationFamily, CorrelationModel, ThetaBounds};
use gsps_core::predict::{BlockRule, Predict};
use gsps_core::simulate::{default_w, random_true_params, sample_grf_psd, uniform_locations};
use gsps_core::stage1::{SolverConfig, SpectralBounds, DEFAULT_ALPHA_C};
use gsps_core::{derive_seed, GspsError};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] GspsError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numerical() => 2,
            _ => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

type CliResult<T> = Result<T, CliError>;

/// Fit separable multivariate Gaussian random fields.
#[derive(Debug, Parser)]
#[command(name = "gsps", version)]
struct Cli {
    /// TOML file with one table per subcommand; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw realizations of a separable field and write the dataset CSV.
    Simulate(SimulateArgs),
    /// Fit a dataset with GSPS, independent per-response fits or MLE.
    Fit(FitArgs),
    /// Predict at query locations from a fitted model.
    Predict(PredictArgs),
    /// Simulation study over a grid of (d, n, p, N) cells.
    Experiment(ExperimentArgs),
    /// Location-level k-fold cross-validation.
    Crossval(CrossvalArgs),
}

/// Options shared by everything that fits a model.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
struct FitKnobs {
    /// anisotropic-exponential or isotropic-exponential
    #[arg(long)]
    family: Option<String>,
    /// Fixed STAGE-I penalty.
    #[arg(long)]
    alpha: Option<f64>,
    /// Constant c in alpha = c sqrt(ln(np)/N).
    #[arg(long)]
    alpha_c: Option<f64>,
    #[arg(long)]
    a_star: Option<f64>,
    #[arg(long)]
    b_star: Option<f64>,
    /// Random starts for the theta search.
    #[arg(long)]
    multistart: Option<usize>,
    #[arg(long)]
    theta_lower: Option<f64>,
    #[arg(long)]
    theta_upper: Option<f64>,
    /// ADMM iteration cap.
    #[arg(long)]
    max_iter: Option<usize>,
    /// ADMM primal and dual tolerance.
    #[arg(long)]
    tol: Option<f64>,
    /// unweighted or size-weighted
    #[arg(long)]
    pooling: Option<String>,
    /// Number of random-selection blocks.
    #[arg(long)]
    blocks: Option<usize>,
    /// Target locations per block (alternative to --blocks).
    #[arg(long)]
    block_size: Option<usize>,
    /// nearest or inverse-distance
    #[arg(long)]
    block_rule: Option<String>,
}

impl FitKnobs {
    fn family(&self) -> CliResult<CorrelationFamily> {
        Ok(self.family.as_deref().unwrap_or("anisotropic-exponential").parse()?)
    }

    fn settings(&self) -> CliResult<FitSettings> {
        let mut gsps = GspsConfig { family: self.family()?, ..GspsConfig::default() };
        gsps.alpha = match (self.alpha, self.alpha_c) {
            (Some(_), Some(_)) => return Err(CliError::Usage("give --alpha or --alpha-c, not both".into())),
            (Some(a), None) if a >= 0.0 => AlphaChoice::Fixed(a),
            (Some(a), None) => return Err(CliError::Usage(format!("alpha must be >= 0, got {a}"))),
            (None, c) => AlphaChoice::Scaled(c.unwrap_or(DEFAULT_ALPHA_C)),
        };
        gsps.spectral_bounds = match (self.a_star, self.b_star) {
            (Some(a), Some(b)) => Some(SpectralBounds::new(a, b)?),
            (None, None) => None,
            _ => return Err(CliError::Usage("--a-star and --b-star go together".into())),
        };
        if let Some(m) = self.multistart {
            gsps.multistart = m;
        }
        let mut solver = SolverConfig::default();
        if let Some(it) = self.max_iter {
            solver.max_iter = it;
        }
        if let Some(t) = self.tol {
            solver.primal_tol = t;
            solver.dual_tol = t;
        }
        solver.validate()?;
        gsps.solver = solver;
        gsps.pooling = match self.pooling.as_deref() {
            None | Some("unweighted") => GammaPooling::Unweighted,
            Some("size-weighted") => GammaPooling::SizeWeighted,
            Some(other) => return Err(CliError::Usage(format!("unknown pooling '{other}'"))),
        };
        let block_rule = match self.block_rule.as_deref() {
            None | Some("nearest") => BlockRule::Nearest,
            Some("inverse-distance") => BlockRule::InverseDistance,
            Some(other) => return Err(CliError::Usage(format!("unknown block rule '{other}'"))),
        };
        Ok(FitSettings {
            mle_starts: gsps.multistart,
            gsps,
            blocks: self.blocks,
            block_size: self.block_size,
            block_rule,
        })
    }

    /// Settings with theta bounds sized for `d`-dimensional inputs.
    fn settings_for(&self, d: usize) -> CliResult<FitSettings> {
        let mut s = self.settings()?;
        if self.theta_lower.is_some() || self.theta_upper.is_some() {
            let q = s.gsps.family.num_params(d);
            s.gsps.theta_bounds = Some(ThetaBounds::uniform(
                q,
                self.theta_lower.unwrap_or(ThetaBounds::DEFAULT_LOWER),
                self.theta_upper.unwrap_or(ThetaBounds::DEFAULT_UPPER),
            )?);
        }
        Ok(s)
    }
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
struct SimulateArgs {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    /// Number of realizations N.
    #[arg(long, short = 'N')]
    num_realizations: Option<usize>,
    #[arg(long)]
    family: Option<String>,
    /// Comma-separated theta*; drawn on the hypersphere when omitted.
    #[arg(long, value_delimiter = ',')]
    theta: Option<Vec<f64>>,
    /// Gamma* rows separated by ';', entries by ','; drawn as A'A when omitted.
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    w: Option<usize>,
    /// Side of the domain [0, side]^d for random locations.
    #[arg(long)]
    side: Option<f64>,
    /// CSV of locations (`x1..xd`) to use instead of random ones.
    #[arg(long)]
    locations: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset CSV to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Ground-truth JSON sidecar (default: output path with .json).
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
struct FitArgs {
    /// Dataset CSV (`rep,x1..xd,y1..yp`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// gsps, independent or mle
    #[arg(long)]
    method: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    knobs: FitKnobs,
    #[arg(long)]
    seed: Option<u64>,
    /// Only solve STAGE-I and report its diagnostics.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    stage1_only: Option<bool>,
    /// With --stage1-only, write each block's precision estimate as text.
    #[arg(long)]
    dump_matrix: Option<PathBuf>,
    /// JSON output (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
struct PredictArgs {
    /// Fitted-model JSON from `fit`.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Training dataset CSV used for the fit.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Query locations CSV (`x1..xd`).
    #[arg(long)]
    query: Option<PathBuf>,
    /// Also write the predictive covariance entries.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    cov: Option<bool>,
    #[arg(long)]
    block_rule: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
struct ExperimentArgs {
    #[arg(long, value_delimiter = ',')]
    d: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    n: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    p: Option<Vec<usize>>,
    #[arg(long = "num-realizations", short = 'N', value_delimiter = ',')]
    num_realizations: Option<Vec<usize>>,
    /// Replications per cell.
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    side: Option<f64>,
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    w: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    knobs: FitKnobs,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON report path (stdout gets the table either way).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Summary CSV path.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
struct CrossvalArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[command(flatten)]
    #[serde(flatten)]
    knobs: FitKnobs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn required<T: Clone>(v: &Option<T>, flag: &str) -> CliResult<T> {
    v.clone().ok_or_else(|| CliError::Usage(format!("missing --{flag}")))
}

fn output(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(std::io::stdout())),
    })
}

fn write_json<T: Serialize>(value: &T, path: Option<&Path>) -> CliResult<()> {
    let mut w = output(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(GspsError::from)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn parse_methods(list: &Option<Vec<String>>) -> CliResult<Vec<FitMethod>> {
    match list {
        None => Ok(vec![FitMethod::Gsps]),
        Some(v) => Ok(v.iter().map(|s| s.parse()).collect::<Result<Vec<_>, _>>()?),
    }
}

fn parse_gamma(text: &str) -> CliResult<DMatrix<f64>> {
    let rows = text
        .split(';')
        .map(|row| {
            row.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| CliError::Usage(format!("bad Gamma entry '{v}'"))))
                .collect::<CliResult<Vec<_>>>()
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(io::rows_to_matrix(&rows)?)
}

fn simulate(a: SimulateArgs) -> CliResult<()> {
    let out = required(&a.out, "out")?;
    let seed = a.seed.unwrap_or(0);
    let family: CorrelationFamily = a.family.as_deref().unwrap_or("anisotropic-exponential").parse()?;
    let locations = match &a.locations {
        Some(path) => io::read_locations(File::open(path)?)?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1]));
            uniform_locations(&mut rng, a.n.unwrap_or(50), a.d.unwrap_or(2), a.side.unwrap_or(10.0))
        }
    };
    let d = locations.first().map_or(0, |l| l.dim());
    let q = family.num_params(d);
    let p = a.p.unwrap_or(2);
    let (drawn_theta, drawn_gamma) = random_true_params(
        q,
        p,
        a.w.unwrap_or_else(|| default_w(p)),
        a.radius.unwrap_or(1.0),
        derive_seed(seed, &[0]),
    )?;
    let theta = a.theta.clone().unwrap_or(drawn_theta);
    let gamma = match &a.gamma {
        Some(text) => parse_gamma(text)?,
        None => drawn_gamma,
    };
    let corr = CorrelationModel::new(family, theta.clone(), ThetaBounds::new(theta.clone(), theta.clone())?)?;
    let num_realizations = a.num_realizations.unwrap_or(10);
    let ds = sample_grf_psd(&locations, &corr, &gamma, num_realizations, derive_seed(seed, &[2]))?;
    io::write_dataset(&ds, BufWriter::new(File::create(&out)?))?;

    let sidecar = SimulationSidecar {
        family,
        theta,
        gamma: io::matrix_to_rows(&gamma),
        seed,
        n: ds.n(),
        p: ds.p(),
        d: ds.dim(),
        num_realizations,
    };
    let truth = a.truth.clone().unwrap_or_else(|| out.with_extension("json"));
    write_json(&sidecar, Some(&truth))?;
    eprintln!("wrote {} ({} locations x {} realizations) and {}", out.display(), ds.n(), num_realizations, truth.display());
    Ok(())
}

#[derive(Serialize)]
struct Stage1Report {
    block: usize,
    size: usize,
    alpha: f64,
    a_star: f64,
    b_star: f64,
    iterations: usize,
    converged: bool,
    primal_residual: f64,
    dual_residual: f64,
    objective: f64,
    off_diagonal_nonzeros: usize,
    off_diagonal_sparsity: f64,
    trace: Vec<gsps_core::stage1::IterationRecord>,
}

fn fit(a: FitArgs) -> CliResult<()> {
    let data = required(&a.data, "data")?;
    let ds = io::read_dataset_path(&data)?;
    let settings = a.knobs.settings_for(ds.dim())?;
    let seed = a.seed.unwrap_or(0);
    let method: FitMethod = a.method.as_deref().unwrap_or("gsps").parse()?;

    if a.stage1_only.unwrap_or(false) {
        let mut cfg = settings.gsps.clone();
        cfg.seed = seed;
        let partition = settings
            .partition(ds.n(), derive_seed(seed, &[0xB10C]))?
            .unwrap_or_else(|| BlockPartition::single(ds.n()));
        let blocks = stage1_blocks(&ds, &cfg, &partition)?;
        if let Some(dump) = &a.dump_matrix {
            for (b, blk) in blocks.iter().enumerate() {
                let path = if blocks.len() == 1 {
                    dump.clone()
                } else {
                    PathBuf::from(format!("{}.block{b}", dump.display()))
                };
                io::write_matrix_text(&blk.estimate.p_hat, BufWriter::new(File::create(path)?))?;
            }
        }
        let report: Vec<Stage1Report> = blocks
            .iter()
            .enumerate()
            .map(|(b, blk)| {
                let e = &blk.estimate;
                let m = e.p_hat.nrows();
                let nonzeros = (0..m).flat_map(|i| (0..m).map(move |j| (i, j))).filter(|&(i, j)| i != j && e.p_hat[(i, j)] != 0.0).count();
                Stage1Report {
                    block: b,
                    size: blk.indices.len(),
                    alpha: blk.alpha,
                    a_star: blk.bounds.a_star,
                    b_star: blk.bounds.b_star,
                    iterations: e.iterations,
                    converged: e.converged,
                    primal_residual: e.primal_residual,
                    dual_residual: e.dual_residual,
                    objective: e.objective,
                    off_diagonal_nonzeros: nonzeros,
                    off_diagonal_sparsity: e.off_diagonal_sparsity(),
                    trace: e.trace.clone(),
                }
            })
            .collect();
        return write_json(&report, a.out.as_deref());
    }
    if a.dump_matrix.is_some() {
        return Err(CliError::Usage("--dump-matrix needs --stage1-only".into()));
    }
    let fitted = FittedModel::fit(method, &ds, &settings, seed)?;
    write_json(&fitted.to_file(), a.out.as_deref())
}

fn predict(a: PredictArgs) -> CliResult<()> {
    let model_path = required(&a.model, "model")?;
    let file = FittedModelFile::from_reader(File::open(&model_path)?)?;
    let training = io::read_dataset_path(&required(&a.data, "data")?)?;
    let query = io::read_locations(File::open(required(&a.query, "query")?)?)?;
    let rule = match a.block_rule.as_deref() {
        None | Some("nearest") => BlockRule::Nearest,
        Some("inverse-distance") => BlockRule::InverseDistance,
        Some(other) => return Err(CliError::Usage(format!("unknown block rule '{other}'"))),
    };
    if let Some(q) = query.iter().find(|q| q.dim() != training.dim()) {
        return Err(CliError::Usage(format!("query point has {} coordinates, training data {}", q.dim(), training.dim())));
    }
    let predictor = predictor_from_file(&file, &training, rule)?;
    let means = query.iter().map(|x| predictor.predict_mean(x)).collect::<Result<Vec<_>, _>>()?;
    let covs = if a.cov.unwrap_or(false) {
        Some(query.iter().map(|x| predictor.predict_cov(x)).collect::<Result<Vec<_>, _>>()?)
    } else {
        None
    };
    let mut w = output(a.out.as_deref())?;
    io::write_predictions(&query, &means, covs.as_deref(), &mut w)?;
    w.flush()?;
    Ok(())
}

fn experiment(a: ExperimentArgs) -> CliResult<()> {
    let list = |v: &Option<Vec<usize>>, default: usize| v.clone().unwrap_or_else(|| vec![default]);
    let mut cells = Vec::new();
    for &d in &list(&a.d, 2) {
        for &n in &list(&a.n, 60) {
            for &p in &list(&a.p, 2) {
                for &big_n in &list(&a.num_realizations, 10) {
                    cells.push(Cell { d, n, p, num_realizations: big_n });
                }
            }
        }
    }
    let defaults = ExperimentSpec::default();
    let mut settings = a.knobs.settings()?;
    if a.knobs.theta_lower.is_some() || a.knobs.theta_upper.is_some() {
        let dims: Vec<usize> = list(&a.d, 2);
        if dims.len() != 1 {
            return Err(CliError::Usage("theta bounds need a single --d".into()));
        }
        settings = a.knobs.settings_for(dims[0])?;
    }
    let spec = ExperimentSpec {
        cells,
        replications: a.reps.unwrap_or(defaults.replications),
        methods: parse_methods(&a.methods)?,
        settings,
        n_test: a.n_test.unwrap_or(defaults.n_test),
        domain_side: a.side.unwrap_or(defaults.domain_side),
        theta_radius: a.radius.unwrap_or(defaults.theta_radius),
        w: a.w,
        gamma_star: None,
        seed: a.seed.unwrap_or(0),
    };
    let report = run_experiment(&spec)?;
    print!("{}", report.to_table());
    for f in &report.failures {
        eprintln!(
            "cell {} replicate {} {}: {}",
            f.cell,
            f.replicate,
            f.method.map_or("simulation", FitMethod::name),
            f.message
        );
    }
    if let Some(path) = &a.out {
        write_json(&report, Some(path))?;
    }
    if let Some(path) = &a.csv {
        std::fs::write(path, report.to_csv())?;
    }
    Ok(())
}

fn crossval(a: CrossvalArgs) -> CliResult<()> {
    let ds = io::read_dataset_path(&required(&a.data, "data")?)?;
    let settings = a.knobs.settings_for(ds.dim())?;
    let report = run_crossval(&ds, a.folds.unwrap_or(10), &parse_methods(&a.methods)?, &settings, a.seed.unwrap_or(0))?;
    print!("{}", report.to_table());
    if let Some(path) = &a.out {
        write_json(&report, Some(path))?;
    }
    Ok(())
}

fn configure_threads() -> CliResult<()> {
    if let Ok(v) = std::env::var("GSPS_THREADS") {
        let n: usize = v.parse().map_err(|_| CliError::Usage(format!("GSPS_THREADS must be a count, got '{v}'")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    let file = config::load(cli.config.as_deref())?;
    match cli.command {
        Command::Simulate(a) => simulate(config::merge(&a, &file, "simulate")?),
        Command::Fit(a) => fit(config::merge(&a, &file, "fit")?),
        Command::Predict(a) => predict(config::merge(&a, &file, "predict")?),
        Command::Experiment(a) => experiment(config::merge(&a, &file, "experiment")?),
        Command::Crossval(a) => crossval(config::merge(&a, &file, "crossval")?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
