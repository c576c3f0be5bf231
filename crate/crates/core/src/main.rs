use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use clustrial::analyze::{analyze, AnalysisConfig};
use clustrial::dataset::{load_csv, WeightScheme};
use clustrial::harness::{run_scenario, ScenarioConfig};
use clustrial::simgen::{true_estimands, DgmSpec};
use clustrial::{Error, Result};

#[derive(Parser)]
#[command(name = "clustrial", version, about = "Center-aware AIPW estimation for multi-center randomized trials")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Analyze a trial CSV with the estimator roster.
    Analyze(AnalyzeArgs),
    /// Run a Monte Carlo scenario.
    Simulate(SimulateArgs),
    /// Print the true estimands of a scenario.
    Truth(TruthArgs),
}

#[derive(Args)]
struct AnalyzeArgs {
    csv: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    cluster_randomized: bool,
    #[arg(long)]
    hierarchical: bool,
    #[arg(long, value_parser = parse_scheme)]
    weights: Option<WeightScheme>,
    #[arg(long)]
    level: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    columns: ColumnArgs,
}

/// Column-name overrides for the CSV schema in the config.
#[derive(Args)]
struct ColumnArgs {
    #[arg(long)]
    col_outcome: Option<String>,
    #[arg(long)]
    col_treatment: Option<String>,
    #[arg(long)]
    col_center: Option<String>,
    #[arg(long)]
    col_cluster: Option<String>,
    #[arg(long)]
    col_patient: Option<String>,
    /// Comma-separated covariate columns.
    #[arg(long, value_delimiter = ',')]
    col_covariates: Option<Vec<String>>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TruthArgs {
    #[arg(long)]
    config: PathBuf,
}

fn parse_scheme(s: &str) -> std::result::Result<WeightScheme, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn read_config(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))
}

fn seed_override() -> Result<Option<u64>> {
    match std::env::var("CLUSTRIAL_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("CLUSTRIAL_SEED must be an unsigned integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

fn run_analyze(args: AnalyzeArgs) -> Result<()> {
    let mut cfg = AnalysisConfig::from_json(&read_config(&args.config)?)?;
    let c = args.columns;
    if let Some(v) = c.col_outcome {
        cfg.columns.outcome = v;
    }
    if let Some(v) = c.col_treatment {
        cfg.columns.treatment = v;
    }
    if let Some(v) = c.col_center {
        cfg.columns.center = v;
    }
    if c.col_cluster.is_some() {
        cfg.columns.cluster = c.col_cluster;
    }
    if c.col_patient.is_some() {
        cfg.columns.patient_id = c.col_patient;
    }
    if let Some(v) = c.col_covariates {
        cfg.columns.covariates = v;
    }
    cfg.cluster_randomized |= args.cluster_randomized;
    cfg.hierarchical |= args.hierarchical;
    if let Some(w) = args.weights {
        cfg.weights = w;
    }
    if let Some(l) = args.level {
        cfg.level = l;
    }
    if let Some(s) = seed_override()? {
        cfg.seed = s;
    }
    let data = load_csv(&args.csv, &cfg.columns, cfg.family)?;
    let report = analyze(&data, &cfg)?;
    print!("{}", report.render());
    if let Some(dir) = args.out {
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("analysis.json"), serde_json::to_string_pretty(&report)?)?;
        std::fs::write(dir.join("per_center.csv"), report.per_center_csv()?)?;
    }
    Ok(())
}

fn run_simulate(args: SimulateArgs) -> Result<()> {
    let mut cfg = ScenarioConfig::from_json(&read_config(&args.config)?)?;
    if let Some(s) = seed_override()? {
        cfg.seed = s;
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = args.jobs {
        if j == 0 {
            return Err(Error::Config("--jobs must be positive".into()));
        }
        builder = builder.num_threads(j);
    }
    let pool = builder.build().map_err(|e| Error::Config(e.to_string()))?;
    let result = pool.install(|| run_scenario(&cfg))?;
    print!("{}", result.table());
    for (label, reasons) in &result.failures {
        for (reason, n) in reasons {
            eprintln!("{label}: {n} failed replications ({reason})");
        }
    }
    let dir = args.out.or(cfg.output.clone()).unwrap_or_else(|| PathBuf::from("."));
    let (csv, json) = result.write(&dir)?;
    eprintln!("wrote {} and {}", csv.display(), json.display());
    result.check_failures()
}

fn run_truth(args: TruthArgs) -> Result<()> {
    let text = read_config(&args.config)?;
    // either a full scenario config or a bare generator spec
    let (dgm, weights, draws, seed) = match ScenarioConfig::from_json(&text) {
        Ok(cfg) => (cfg.dgm, cfg.weights, cfg.truth_draws, cfg.seed),
        Err(_) => {
            let dgm: DgmSpec = serde_json::from_str(&text)?;
            (dgm, vec![WeightScheme::EqualCenters, WeightScheme::EqualPatients], clustrial::simgen::DEFAULT_TRUTH_DRAWS, 0)
        }
    };
    let seed = seed_override()?.unwrap_or(seed);
    let mut all = Vec::new();
    for w in weights {
        all.extend(true_estimands(&dgm, w, draws, seed)?);
    }
    println!("{}", serde_json::to_string_pretty(&all)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Analyze(a) => run_analyze(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Truth(a) => run_truth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
