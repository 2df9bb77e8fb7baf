//! Command-line driver: data simulation, fitting, bandwidth selection,
//! confidence bands, constancy tests, replication studies, and plot-data
//! export.
//!
//! Exit codes: 0 success, 2 usage, 3 bad input data, 4 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use vcmoe::bandwidth::select_bandwidth;
use vcmoe::fit::{fit_vcmoe, FitConfig};
use vcmoe::inference::{
    asymptotic_band, bootstrap_band, test_constancy_asymptotic, test_constancy_bootstrap,
    test_constancy_glrt, BandMethod,
};
use vcmoe::io::{
    fit_report, read_band_report, read_dataset, read_fit_report, sha256_hex, write_band_csv,
    write_constants_csv, write_coverage_csv, write_curves_csv, write_dataset, write_json,
    write_rase_csv, write_wilks_csv, BandReport, CvOutput, RunManifest, StudyOutput, TestReport,
    SCHEMA_VERSION,
};
use vcmoe::model::{CoefId, ExpertFamily, GatingForm, ModelSpec};
use vcmoe::simulate::{
    generate, run_study, BandStudy, GlrtStudy, ScenarioSpec, StudyConfig,
};
use vcmoe::Error;

#[derive(Parser)]
#[command(
    name = "vcmoe",
    version,
    about = "Varying-coefficient mixture-of-experts estimation",
    propagate_version = true
)]
struct Cli {
    /// Cap the worker-thread pool. Results are identical for any value.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic benchmark dataset and write it as CSV.
    Simulate(SimulateArgs),
    /// Fit coefficient curves to a CSV dataset.
    Fit(FitArgs),
    /// Score candidate bandwidths by cross-validated likelihood.
    Cv(CvArgs),
    /// Simultaneous confidence band around one fitted coefficient.
    Band(BandArgs),
    /// Test whether coefficient functions are constant.
    Test(TestArgs),
    /// Replication study on a synthetic scenario.
    Study(StudyArgs),
    /// Extract plot-ready CSV tracks from a fit or band artifact.
    PlotData(PlotDataArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Sim1,
    Sim2,
    Sim3,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ExpertArg {
    Gaussian,
    Binomial,
}

#[derive(Clone, Copy, ValueEnum)]
enum GatingArg {
    Logistic,
    Softmax,
}

#[derive(Clone, Copy, ValueEnum)]
enum BandMethodArg {
    Asymptotic,
    Bootstrap,
}

#[derive(Clone, Copy, ValueEnum)]
enum TestMethodArg {
    Asymptotic,
    Bootstrap,
    Glrt,
}

/// Mixture shape flags shared by fit, cv, and test.
#[derive(Args)]
struct ModelFlags {
    /// Number of mixture components.
    #[arg(long, default_value_t = 2)]
    components: usize,
    /// Expert family.
    #[arg(long, value_enum, default_value_t = ExpertArg::Gaussian)]
    expert: ExpertArg,
    /// Bernoulli trials per observation; binomial experts only.
    #[arg(long)]
    trials: Option<u32>,
    /// Gating form; defaults to logistic for two components, softmax above.
    #[arg(long, value_enum)]
    gating: Option<GatingArg>,
}

impl ModelFlags {
    fn spec(&self, p_x: usize, p_z: usize) -> Result<ModelSpec, CliError> {
        let expert = match (self.expert, self.trials) {
            (ExpertArg::Gaussian, None) => ExpertFamily::Gaussian,
            (ExpertArg::Gaussian, Some(_)) => {
                return Err(CliError::Usage("--trials only applies to binomial experts".into()))
            }
            (ExpertArg::Binomial, Some(trials)) => ExpertFamily::Binomial { trials },
            (ExpertArg::Binomial, None) => {
                return Err(CliError::Usage("binomial experts require --trials".into()))
            }
        };
        let gating = match self.gating {
            Some(GatingArg::Logistic) => GatingForm::Logistic,
            Some(GatingArg::Softmax) => GatingForm::Softmax,
            None if self.components == 2 => GatingForm::Logistic,
            None => GatingForm::Softmax,
        };
        Ok(ModelSpec::new(self.components, expert, gating, p_x, p_z)?)
    }

    fn snapshot(&self, spec: &ModelSpec) -> serde_json::Value {
        serde_json::to_value(spec).expect("model spec serializes")
    }
}

/// Estimation flags shared by fit, cv, and test.
#[derive(Args)]
struct FitFlags {
    /// Kernel bandwidth on the index scale.
    #[arg(long)]
    h: f64,
    /// Number of equispaced grid nodes spanning [0, 1].
    #[arg(long, default_value_t = 100)]
    grid: usize,
    /// EM iteration cap.
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
}

impl FitFlags {
    fn config(&self) -> Result<FitConfig, CliError> {
        if self.grid < 2 {
            return Err(CliError::Usage("--grid needs at least 2 nodes".into()));
        }
        let mut config = FitConfig::new(self.h);
        config.grid = (0..self.grid).map(|i| i as f64 / (self.grid - 1) as f64).collect();
        config.max_iter = self.max_iter;
        Ok(config)
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// Benchmark scenario.
    #[arg(long, value_enum)]
    scenario: ScenarioArg,
    /// Sample size.
    #[arg(long)]
    n: usize,
    /// Generator seed.
    #[arg(long)]
    seed: u64,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Optional CSV of the hidden true component labels.
    #[arg(long)]
    labels_out: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    /// Input dataset CSV.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    fit: FitFlags,
    /// Output fit JSON path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CvArgs {
    /// Input dataset CSV.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelFlags,
    /// Candidate bandwidths, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    candidates: Vec<f64>,
    /// Number of equispaced grid nodes spanning [0, 1].
    #[arg(long, default_value_t = 100)]
    grid: usize,
    /// EM iteration cap per candidate's full fit.
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    /// Output JSON path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BandArgs {
    /// Fit artifact produced by the fit command.
    #[arg(long)]
    fit: PathBuf,
    /// The CSV the fit was produced from.
    #[arg(long)]
    data: PathBuf,
    /// Coefficient name, e.g. beta0, alpha21, delta1.
    #[arg(long)]
    coefficient: String,
    #[arg(long, value_enum)]
    method: BandMethodArg,
    /// Simultaneous coverage probability in (0, 1).
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Bootstrap replicates for the variance stage.
    #[arg(long)]
    m1: Option<usize>,
    /// Bootstrap replicates for the sup-statistic stage; defaults to --m1.
    #[arg(long)]
    m2: Option<usize>,
    /// Resampling seed; derived from the input digest when omitted.
    #[arg(long)]
    seed: Option<u64>,
    /// Shift the band centre by the estimated smoothing bias.
    #[arg(long)]
    debias: bool,
    /// Output band JSON path.
    #[arg(long)]
    out: PathBuf,
    /// Optional plot-data CSV (u, estimate, lower, upper).
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Args)]
struct TestArgs {
    /// Input dataset CSV.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    fit: FitFlags,
    /// Coefficient name under the constancy null. The likelihood-ratio
    /// method accepts several names; the sup methods take exactly one.
    #[arg(long, required = true)]
    coefficient: Vec<String>,
    #[arg(long, value_enum)]
    method: TestMethodArg,
    /// Significance level in (0, 1).
    #[arg(long, default_value_t = 0.05)]
    level: f64,
    /// Bootstrap replicates for the variance stage.
    #[arg(long)]
    m1: Option<usize>,
    /// Bootstrap replicates for the null-statistic stage; defaults to --m1.
    #[arg(long)]
    m2: Option<usize>,
    /// Resampling seed; derived from the input digest when omitted.
    #[arg(long)]
    seed: Option<u64>,
    /// Output test JSON path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StudyArgs {
    /// Benchmark scenario.
    #[arg(long, value_enum)]
    scenario: ScenarioArg,
    /// Replicates per bandwidth.
    #[arg(long)]
    replicates: usize,
    /// Bandwidths to run, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    h: Vec<f64>,
    /// Sample size per replicate.
    #[arg(long, default_value_t = 500)]
    n: usize,
    /// Master seed; replicate streams derive from it.
    #[arg(long)]
    seed: u64,
    /// Number of equispaced grid nodes spanning [0, 1].
    #[arg(long, default_value_t = 100)]
    grid: usize,
    /// EM iteration cap.
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    /// Coefficients to score band coverage for, comma separated.
    #[arg(long, value_delimiter = ',')]
    band_coefficients: Vec<String>,
    /// Coverage levels for the band stage.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.95])]
    band_levels: Vec<f64>,
    /// Band constructions to score.
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = vec![BandMethodArg::Bootstrap])]
    band_methods: Vec<BandMethodArg>,
    /// Bootstrap replicates for the variance stage.
    #[arg(long, default_value_t = 200)]
    m1: usize,
    /// Bootstrap replicates for the sup-statistic stage.
    #[arg(long, default_value_t = 200)]
    m2: usize,
    /// Shift band centres by the estimated smoothing bias.
    #[arg(long)]
    debias: bool,
    /// Coefficients held constant under a likelihood-ratio null per
    /// replicate, comma separated.
    #[arg(long, value_delimiter = ',')]
    glrt_coefficients: Vec<String>,
    /// Significance level for the likelihood-ratio stage.
    #[arg(long, default_value_t = 0.05)]
    glrt_level: f64,
    /// Coefficients whose constant-fit estimates are tracked across
    /// replicates, comma separated.
    #[arg(long, value_delimiter = ',')]
    track_constant: Vec<String>,
    /// Replace the scenario's gate functions with these constants
    /// (class-major), making gate-constancy nulls true.
    #[arg(long, value_delimiter = ',')]
    constant_gate: Vec<f64>,
    /// Directory for study.json and the CSV tables.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct PlotDataArgs {
    /// Fit artifact to extract coefficient tracks from.
    #[arg(long, conflicts_with = "band")]
    fit: Option<PathBuf>,
    /// Band artifact to extract (u, estimate, lower, upper) from.
    #[arg(long)]
    band: Option<PathBuf>,
    /// Coefficient names to keep; all of them when omitted. Fit mode only.
    #[arg(long, value_delimiter = ',')]
    coefficient: Vec<String>,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

/// Library failures keep their exit-code mapping; usage problems found
/// before any estimation exit with the usage code.
enum CliError {
    Usage(String),
    Lib(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

fn lib_exit_code(err: &Error) -> u8 {
    match err {
        // Knobs the caller can fix.
        Error::InvalidSpec(_)
        | Error::UnknownCoefficient(_)
        | Error::NonPositiveBandwidth(_)
        | Error::TooFewReplicates { .. }
        | Error::PilotTooSmall { .. }
        | Error::BandwidthGeqOne(_)
        | Error::InsufficientData(_)
        | Error::OutOfDomain(_) => 2,
        // Input that does not parse or does not fit the schema.
        Error::ParseError { .. }
        | Error::SchemaError(_)
        | Error::InvalidData(_)
        | Error::InvalidResponse { .. }
        | Error::LengthMismatch { .. }
        | Error::DegenerateIndex(_)
        | Error::Io(_)
        | Error::Csv(_) => 3,
        // Estimation gave up.
        Error::QuadratureFailure { .. }
        | Error::NoEffectiveSamples { .. }
        | Error::SingularHessian { .. }
        | Error::AllFoldsFailed(_)
        | Error::TooManyFailures { .. } => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if threads == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .expect("worker pool is configured once, before any parallel work");
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Lib(err)) => {
            eprintln!("error: {err}");
            ExitCode::from(lib_exit_code(&err))
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Cv(args) => cmd_cv(args),
        Command::Band(args) => cmd_band(args),
        Command::Test(args) => cmd_test(args),
        Command::Study(args) => cmd_study(args),
        Command::PlotData(args) => cmd_plot_data(args),
    }
}

fn scenario_spec(id: ScenarioArg, n: usize, seed: u64) -> ScenarioSpec {
    match id {
        ScenarioArg::Sim1 => ScenarioSpec::sim1(n, seed),
        ScenarioArg::Sim2 => ScenarioSpec::sim2(n, seed),
        ScenarioArg::Sim3 => ScenarioSpec::sim3(n, seed),
    }
}

/// Seed for stochastic commands: explicit flag, or the leading 64 bits of
/// the input digest so reruns on identical bytes reproduce.
fn resolve_seed(explicit: Option<u64>, digest: &str) -> u64 {
    explicit.unwrap_or_else(|| {
        u64::from_str_radix(&digest[..16], 16).expect("digest is lowercase hex")
    })
}

fn require_level_in_unit_interval(level: f64) -> Result<(), CliError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(CliError::Usage(format!("--level must lie strictly in (0, 1), got {level}")));
    }
    Ok(())
}

/// Bootstrap sizing: `--m1` is mandatory for bootstrap methods, `--m2`
/// defaults to it.
fn resolve_bootstrap_sizes(m1: Option<usize>, m2: Option<usize>) -> Result<(usize, usize), CliError> {
    let m1 = m1.ok_or_else(|| CliError::Usage("bootstrap methods require --m1".into()))?;
    Ok((m1, m2.unwrap_or(m1)))
}

fn parse_coefficients(spec: &ModelSpec, names: &[String]) -> Result<Vec<CoefId>, CliError> {
    names
        .iter()
        .map(|name| {
            spec.parse_coef(name).map_err(|_| {
                let known: Vec<String> =
                    spec.coef_ids().iter().map(|&id| spec.coef_name(id)).collect();
                CliError::Usage(format!(
                    "unknown coefficient {name:?}; this model has {}",
                    known.join(", ")
                ))
            })
        })
        .collect()
}

/// Check that the dataset the caller supplied is the one the fit artifact
/// was produced from.
fn require_matching_digest(manifest: &RunManifest, digest: &str) -> Result<(), CliError> {
    if let Some(recorded) = &manifest.input_sha256 {
        if recorded != digest {
            return Err(CliError::Lib(Error::InvalidData(format!(
                "data file digest {digest} does not match the fit artifact's input {recorded}"
            ))));
        }
    }
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let scenario = scenario_spec(args.scenario, args.n, args.seed);
    let draw = generate(&scenario, args.n, args.seed)?;
    write_dataset(&args.out, &draw.data)?;
    if let Some(labels_path) = &args.labels_out {
        let mut body = String::from("label\n");
        for label in &draw.labels {
            body.push_str(&format!("{label}\n"));
        }
        std::fs::write(labels_path, body).map_err(Error::from)?;
    }
    let mut manifest = RunManifest::new(
        "simulate",
        json!({
            "scenario": scenario.id,
            "n": args.n,
        }),
    );
    manifest.seed = Some(args.seed);
    manifest.input_sha256 = Some(sha256_hex(&args.out)?);
    manifest.wall_seconds = start.elapsed().as_secs_f64();
    write_json(&args.out.with_extension("manifest.json"), &manifest)?;
    println!("wrote {} rows to {}", args.n, args.out.display());
    Ok(())
}

fn cmd_fit(args: FitArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let data = read_dataset(&args.data)?;
    let spec = args.model.spec(data.x.ncols(), data.z.ncols())?;
    let config = args.fit.config()?;

    let curve = fit_vcmoe(&spec, &data, &config)?;
    let status = if curve.converged {
        format!("converged in {} EM iterations", curve.n_iter)
    } else {
        format!("stopped at the {}-iteration cap", curve.n_iter)
    };
    let loglik = curve.loglik_trace.last().copied().unwrap_or(f64::NAN);

    let mut manifest = RunManifest::new(
        "fit",
        json!({
            "model": args.model.snapshot(&spec),
            "fit": &config,
        }),
    );
    manifest.input_sha256 = Some(sha256_hex(&args.data)?);
    manifest.wall_seconds = start.elapsed().as_secs_f64();
    let report = fit_report(&spec, curve, manifest);
    write_json(&args.out, &report)?;
    println!("{status}; mean log likelihood {loglik:.6}; wrote {}", args.out.display());
    Ok(())
}

fn cmd_cv(args: CvArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let data = read_dataset(&args.data)?;
    let spec = args.model.spec(data.x.ncols(), data.z.ncols())?;
    let flags = FitFlags { h: 0.0, grid: args.grid, max_iter: args.max_iter };
    let mut config = flags.config()?;
    config.h = args.candidates.first().copied().unwrap_or(0.2);

    let report = select_bandwidth(&spec, &data, &args.candidates, &config)?;
    let best = report.best_h;

    let mut manifest = RunManifest::new(
        "cv",
        json!({
            "model": args.model.snapshot(&spec),
            "candidates": &args.candidates,
            "grid": args.grid,
            "max_iter": args.max_iter,
        }),
    );
    manifest.input_sha256 = Some(sha256_hex(&args.data)?);
    manifest.wall_seconds = start.elapsed().as_secs_f64();
    write_json(&args.out, &CvOutput { schema_version: SCHEMA_VERSION, report, manifest })?;
    println!("best h = {best}; wrote {}", args.out.display());
    Ok(())
}

fn cmd_band(args: BandArgs) -> Result<(), CliError> {
    let start = Instant::now();
    require_level_in_unit_interval(args.level)?;
    let artifact = read_fit_report(&args.fit)?;
    let digest = sha256_hex(&args.data)?;
    require_matching_digest(&artifact.manifest, &digest)?;
    let data = read_dataset(&args.data)?;
    let spec = artifact.model;
    let coefficient = parse_coefficients(&spec, std::slice::from_ref(&args.coefficient))?[0];

    let mut config = json!({
        "coefficient": &args.coefficient,
        "level": args.level,
        "debias": args.debias,
    });
    let mut seed = None;
    let band = match args.method {
        BandMethodArg::Asymptotic => {
            asymptotic_band(&spec, &artifact.curve, &data, coefficient, args.level, args.debias)?
        }
        BandMethodArg::Bootstrap => {
            let (m1, m2) = resolve_bootstrap_sizes(args.m1, args.m2)?;
            let chosen = resolve_seed(args.seed, &digest);
            seed = Some(chosen);
            config["m1"] = json!(m1);
            config["m2"] = json!(m2);
            bootstrap_band(&spec, &artifact.curve, &data, coefficient, args.level, m1, m2, chosen)?
        }
    };

    let mut manifest = RunManifest::new("band", config);
    manifest.seed = seed;
    manifest.input_sha256 = Some(digest);
    manifest.wall_seconds = start.elapsed().as_secs_f64();
    if let Some(plot) = &args.plot {
        write_band_csv(plot, &band)?;
    }
    let crit = band.critical_value;
    write_json(&args.out, &BandReport { schema_version: SCHEMA_VERSION, band, manifest })?;
    println!(
        "{} band for {} with critical value {crit:.4}; wrote {}",
        args.level,
        args.coefficient,
        args.out.display()
    );
    Ok(())
}

fn cmd_test(args: TestArgs) -> Result<(), CliError> {
    let start = Instant::now();
    require_level_in_unit_interval(args.level)?;
    let data = read_dataset(&args.data)?;
    let spec = args.model.spec(data.x.ncols(), data.z.ncols())?;
    let config = args.fit.config()?;
    let targets = parse_coefficients(&spec, &args.coefficient)?;
    let digest = sha256_hex(&args.data)?;

    let mut snapshot = json!({
        "model": args.model.snapshot(&spec),
        "fit": &config,
        "coefficients": &args.coefficient,
        "level": args.level,
    });
    let mut seed = None;
    let result = match args.method {
        TestMethodArg::Glrt => test_constancy_glrt(&spec, &data, &config, &targets, args.level)?,
        TestMethodArg::Asymptotic => {
            let [target] = targets[..] else {
                return Err(CliError::Usage(
                    "the asymptotic test takes exactly one --coefficient".into(),
                ));
            };
            test_constancy_asymptotic(&spec, &data, &config, target, args.level)?
        }
        TestMethodArg::Bootstrap => {
            let [target] = targets[..] else {
                return Err(CliError::Usage(
                    "the bootstrap test takes exactly one --coefficient".into(),
                ));
            };
            let (m1, m2) = resolve_bootstrap_sizes(args.m1, args.m2)?;
            let chosen = resolve_seed(args.seed, &digest);
            seed = Some(chosen);
            snapshot["m1"] = json!(m1);
            snapshot["m2"] = json!(m2);
            test_constancy_bootstrap(&spec, &data, &config, target, args.level, m1, m2, chosen)?
        }
    };

    let mut manifest = RunManifest::new("test", snapshot);
    manifest.seed = seed;
    manifest.input_sha256 = Some(digest);
    manifest.wall_seconds = start.elapsed().as_secs_f64();
    let verdict = if result.reject { "rejected" } else { "not rejected" };
    let p_note = match result.p_value {
        Some(p) => format!(", p = {p:.4}"),
        None => String::new(),
    };
    let statistic = result.statistic;
    write_json(&args.out, &TestReport { schema_version: SCHEMA_VERSION, result, manifest })?;
    println!(
        "constancy {verdict} at level {} (statistic {statistic:.4}{p_note}); wrote {}",
        args.level,
        args.out.display()
    );
    Ok(())
}

fn cmd_study(args: StudyArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let mut scenario = scenario_spec(args.scenario, args.n, args.seed);
    if !args.constant_gate.is_empty() {
        scenario = scenario.with_constant_gate(args.constant_gate.clone())?;
    }
    let spec = scenario.model_spec();

    let fit_flags = FitFlags { h: 0.0, grid: args.grid, max_iter: args.max_iter };
    let mut config = StudyConfig::new();
    config.fit = fit_flags.config()?;
    config.fit.h = args.h.first().copied().unwrap_or(0.2);

    if !args.band_coefficients.is_empty() {
        for &level in &args.band_levels {
            require_level_in_unit_interval(level)?;
        }
        config.bands = Some(BandStudy {
            coefficients: parse_coefficients(&spec, &args.band_coefficients)?,
            levels: args.band_levels.clone(),
            methods: args
                .band_methods
                .iter()
                .map(|m| match m {
                    BandMethodArg::Asymptotic => BandMethod::Asymptotic,
                    BandMethodArg::Bootstrap => BandMethod::Bootstrap,
                })
                .collect(),
            m1: args.m1,
            m2: args.m2,
            debias: args.debias,
        });
    }
    if !args.glrt_coefficients.is_empty() {
        require_level_in_unit_interval(args.glrt_level)?;
        config.glrt = Some(GlrtStudy {
            targets: parse_coefficients(&spec, &args.glrt_coefficients)?,
            level: args.glrt_level,
        });
    }
    config.track_constant = parse_coefficients(&spec, &args.track_constant)?;

    let report = run_study(&scenario, args.replicates, &args.h, &config)?;

    std::fs::create_dir_all(&args.out_dir).map_err(Error::from)?;
    let table_path = args.out_dir.join("rase.csv");
    write_rase_csv(&table_path, &report)?;
    let mut written = vec![table_path];
    if !report.coverage.is_empty() {
        let path = args.out_dir.join("coverage.csv");
        write_coverage_csv(&path, &report)?;
        written.push(path);
    }
    if !report.glrt.is_empty() {
        let path = args.out_dir.join("wilks.csv");
        write_wilks_csv(&path, &report)?;
        written.push(path);
    }
    if !report.constants.is_empty() {
        let path = args.out_dir.join("constants.csv");
        write_constants_csv(&path, &report)?;
        written.push(path);
    }

    let mut manifest = RunManifest::new(
        "study",
        json!({
            "scenario": serde_json::to_value(&scenario).expect("scenario serializes"),
            "replicates": args.replicates,
            "h": &args.h,
            "study": {
                "fit": &config.fit,
                "bands": &config.bands,
                "glrt": &config.glrt,
                "track_constant": &config.track_constant,
            },
        }),
    );
    manifest.seed = Some(args.seed);
    manifest.wall_seconds = start.elapsed().as_secs_f64();
    let failed = report.failed_runs;
    let total = report.total_runs;
    let json_path = args.out_dir.join("study.json");
    write_json(&json_path, &StudyOutput { schema_version: SCHEMA_VERSION, report, manifest })?;
    written.push(json_path);

    let names: Vec<String> =
        written.iter().map(|p| p.file_name().unwrap_or_default().to_string_lossy().into()).collect();
    println!(
        "{} replicates ({failed}/{total} cells failed); wrote {} in {}",
        args.replicates,
        names.join(", "),
        args.out_dir.display()
    );
    Ok(())
}

fn cmd_plot_data(args: PlotDataArgs) -> Result<(), CliError> {
    match (&args.fit, &args.band) {
        (Some(fit_path), None) => {
            let artifact = read_fit_report(fit_path)?;
            let curves = if args.coefficient.is_empty() {
                artifact.coefficients
            } else {
                let spec = &artifact.model;
                let wanted: Vec<String> = parse_coefficients(spec, &args.coefficient)?
                    .into_iter()
                    .map(|id| spec.coef_name(id))
                    .collect();
                artifact
                    .coefficients
                    .into_iter()
                    .filter(|c| wanted.contains(&c.name))
                    .collect()
            };
            write_curves_csv(&args.out, &artifact.curve.grid, &curves)?;
        }
        (None, Some(band_path)) => {
            if !args.coefficient.is_empty() {
                return Err(CliError::Usage(
                    "--coefficient only applies to --fit extraction".into(),
                ));
            }
            let artifact = read_band_report(band_path)?;
            write_band_csv(&args.out, &artifact.band)?;
        }
        _ => {
            return Err(CliError::Usage("pass exactly one of --fit or --band".into()));
        }
    }
    println!("wrote {}", args.out.display());
    Ok(())
}
