//! Command-line front end: `fit`, `simulate`, `summarize`, `compare` and
//! `describe`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::bdmcmc::{Chain, ChainConfig, ChainInput, RunOutputs, CHECKPOINT_FILE};
use crate::dataset::{describe, load_proximity, load_survey, load_trait_schema, write_proximity, write_survey, write_trait_schema, SurveySchema};
use crate::diagnostics::{compute_dic, export_summaries, read_dic, variant_description, GhkConfig, RunSummary, DIC_FILE, SUMMARY_FILE};
use crate::error::{Error, Result};
use crate::graph_prior::Variant;
use crate::marginals::{Link, MarginalSet};
use crate::synthesis::{generate_scenario, ScenarioConfig};

pub const MARGINALS_FILE: &str = "marginals.json";
pub const SURVEY_FILE: &str = "survey.csv";
pub const SCHEMA_FILE: &str = "schema.json";
pub const PROXIMITY_FILE: &str = "proximity.csv";
pub const TRUTH_FILE: &str = "truth.json";

#[derive(Debug, Parser)]
#[command(name = "gcgm", version, about = "Joint Gaussian copula graphical models for grouped ordinal surveys")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit marginals and run the sampler, then write the summary bundle.
    Fit(FitArgs),
    /// Generate a synthetic survey with known graphs from a scenario file.
    Simulate(SimulateArgs),
    /// Print the posterior summary of a finished run.
    Summarize(SummarizeArgs),
    /// Rank finished runs by DIC.
    Compare(CompareArgs),
    /// Print per-group descriptive statistics of a survey.
    Describe(DescribeArgs),
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Survey CSV (`group,respondent_id,<covariates>,<traits>`) [default: none]
    #[arg(long)]
    data: Option<PathBuf>,
    /// Trait schema JSON [default: none]
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Pairwise proximity CSV, needed by the proximity variants [default: none]
    #[arg(long)]
    proximity: Option<PathBuf>,
    /// Graph-prior variant: int, int+ls, int+prox or full [default: int]
    #[arg(long)]
    variant: Option<String>,
    /// Total iterations [default: 50000]
    #[arg(long)]
    iters: Option<u64>,
    /// Burn-in iterations [default: 10000, capped at half of --iters]
    #[arg(long)]
    burnin: Option<u64>,
    /// Thinning stride for stored draws [default: 10]
    #[arg(long)]
    thin: Option<u64>,
    /// Random seed [default: 1]
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads, 0 for all cores [default: 0]
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory [default: none]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Marginal link: logit or probit [default: logit]
    #[arg(long)]
    link: Option<String>,
    /// Draws used for the deviance variance [default: 50]
    #[arg(long)]
    deviance_draws: Option<usize>,
    /// Iterations between checkpoints [default: 10000]
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// TOML file with any of the settings above; flags take precedence [default: none]
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from the checkpoint in the output directory [default: false]
    #[arg(long)]
    resume: bool,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Scenario JSON [default: none]
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory [default: none]
    #[arg(long)]
    out: PathBuf,
    /// Override the scenario seed [default: scenario value]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct SummarizeArgs {
    /// Run directory written by `fit` [default: none]
    run: PathBuf,
    /// Edge probability threshold for the printed edge lists [default: 0.5]
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Debug, Args)]
struct CompareArgs {
    /// Two or more run directories [default: none]
    runs: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct DescribeArgs {
    /// Survey CSV [default: none]
    #[arg(long)]
    data: PathBuf,
    /// Trait schema JSON [default: none]
    #[arg(long)]
    schema: PathBuf,
}

/// Fit settings as read from a `--config` file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub data: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub proximity: Option<PathBuf>,
    pub variant: Option<String>,
    pub iters: Option<u64>,
    pub burnin: Option<u64>,
    pub thin: Option<u64>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub link: Option<String>,
    pub deviance_draws: Option<usize>,
    pub checkpoint_every: Option<u64>,
}

impl FileConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::parse(path, e))
    }
}

/// Fully resolved `fit` invocation.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub data: PathBuf,
    pub schema: PathBuf,
    pub proximity: Option<PathBuf>,
    pub out: PathBuf,
    pub link: Link,
    pub chain: ChainConfig,
    pub resume: bool,
}

pub fn parse_link(s: &str) -> Result<Link> {
    match s.trim().to_ascii_lowercase().as_str() {
        "logit" => Ok(Link::Logit),
        "probit" => Ok(Link::Probit),
        other => Err(Error::Invalid(format!("unknown link `{other}` (expected logit or probit)"))),
    }
}

fn resolve_fit(args: FitArgs) -> Result<RunConfig> {
    let file = match &args.config {
        Some(path) => FileConfig::from_toml_file(path)?,
        None => FileConfig::default(),
    };
    let variant: Variant = args.variant.or(file.variant).as_deref().unwrap_or("int").parse()?;
    let link = parse_link(args.link.or(file.link).as_deref().unwrap_or("logit"))?;
    let mut chain = ChainConfig::desk(variant, args.seed.or(file.seed).unwrap_or(1));
    if let Some(v) = args.iters.or(file.iters) {
        chain.n_iterations = v;
    }
    chain.burn_in = args.burnin.or(file.burnin).unwrap_or(chain.burn_in.min(chain.n_iterations / 2));
    if let Some(v) = args.thin.or(file.thin) {
        chain.thin = v;
    }
    if let Some(v) = args.threads.or(file.threads) {
        chain.threads = v;
    }
    if let Some(v) = args.deviance_draws.or(file.deviance_draws) {
        chain.n_deviance_draws = v;
    }
    if let Some(v) = args.checkpoint_every.or(file.checkpoint_every) {
        chain.checkpoint_every = v;
    }
    chain.validate()?;
    let need = |v: Option<PathBuf>, flag: &str| v.ok_or_else(|| Error::Invalid(format!("missing required {flag}")));
    let proximity = args.proximity.or(file.proximity);
    if variant.uses_proximity() && proximity.is_none() {
        return Err(Error::Invalid(format!("variant {variant} requires --proximity")));
    }
    Ok(RunConfig {
        data: need(args.data.or(file.data), "--data")?,
        schema: need(args.schema.or(file.schema), "--schema")?,
        proximity,
        out: need(args.out.or(file.out), "--out")?,
        link,
        chain,
        resume: args.resume,
    })
}

/// Runs `fit` end to end and returns the summary it wrote.
pub fn fit(cfg: &RunConfig) -> Result<RunSummary> {
    let traits = load_trait_schema(&cfg.schema)?;
    let loaded = load_survey(&cfg.data, &SurveySchema::from_traits(traits))?;
    for (group, n) in &loaded.dropped_rows {
        if *n > 0 {
            log::warn!("group {group}: dropped {n} rows with missing covariates");
        }
    }
    let dataset = loaded.dataset;
    let prox = match (&cfg.proximity, cfg.chain.variant.uses_proximity()) {
        (Some(path), true) => Some(load_proximity(path, &dataset.group_ids())?),
        _ => None,
    };
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    log::info!(
        "{} groups, {} traits, {} respondents; fitting marginals",
        dataset.n_groups(),
        dataset.n_traits(),
        dataset.total_respondents()
    );
    let marginals = MarginalSet::fit(&dataset, cfg.link)?;
    marginals.write_json(cfg.out.join(MARGINALS_FILE))?;

    let input = ChainInput {
        dataset: &dataset,
        marginals: &marginals,
        prox: prox.as_ref(),
    };
    let checkpoint = cfg.out.join(CHECKPOINT_FILE);
    let mut chain = if cfg.resume && checkpoint.exists() {
        log::info!("resuming from {}", checkpoint.display());
        Chain::resume(input, cfg.chain.clone(), &checkpoint)?
    } else {
        Chain::new(input, cfg.chain.clone())?
    };
    log::info!("sampling {} iterations ({} burn-in), variant {}", cfg.chain.n_iterations, cfg.chain.burn_in, cfg.chain.variant);
    chain.run(&RunOutputs {
        dir: Some(cfg.out.clone()),
        resume: cfg.resume,
    })?;
    log::info!("computing DIC");
    let report = compute_dic(&chain.acc, input, GhkConfig::default())?;
    log::info!("DIC {:.2}", report.dic);
    export_summaries(&cfg.out, &chain.acc, &dataset, &marginals, prox.as_ref(), Some(&report))
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let mut scenario = ScenarioConfig::from_json_file(&args.scenario)?;
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    let (truth, dataset) = generate_scenario(&scenario)?;
    let out = &args.out;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_survey(&dataset, out.join(SURVEY_FILE))?;
    write_trait_schema(&dataset.traits, out.join(SCHEMA_FILE))?;
    if let Some(prox) = &truth.proximity {
        write_proximity(prox, out.join(PROXIMITY_FILE))?;
    }
    truth.write_truth(out.join(TRUTH_FILE))?;
    eprintln!(
        "wrote {} groups x {} traits ({} respondents) to {}",
        dataset.n_groups(),
        dataset.n_traits(),
        dataset.total_respondents(),
        out.display()
    );
    Ok(())
}

fn summarize(args: SummarizeArgs) -> Result<()> {
    let path = args.run.join(SUMMARY_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let summary: RunSummary = serde_json::from_str(&text).map_err(|e| Error::parse(&path, e))?;
    println!("variant: {} ({})", summary.variant, variant_description(summary.variant));
    println!("stored draws: {}", summary.n_draws);
    for (name, (m, s)) in summary.proximity_names.iter().zip(summary.beta_mean.iter().zip(&summary.beta_sd)) {
        println!("beta[{name}] = {m:.3} (sd {s:.3})");
    }
    let p = summary.traits.len();
    for g in &summary.groups {
        let mut edges = Vec::new();
        for i in 0..p {
            for j in i + 1..p {
                let pr = g.edge_probabilities[i][j];
                if pr >= args.threshold {
                    edges.push(format!("{}-{} ({pr:.2})", summary.traits[i], summary.traits[j]));
                }
            }
        }
        println!("{}: alpha {:.3} (sd {:.3}); edges: {}", g.group, g.alpha_mean, g.alpha_sd, if edges.is_empty() { "none".into() } else { edges.join(", ") });
    }
    for (g, c) in summary.groups.iter().zip(&summary.latent_positions) {
        println!("position {}: ({:.3}, {:.3})", g.group, c[0], c[1]);
    }
    if let Ok(report) = read_dic(&args.run.join(DIC_FILE)) {
        println!("DIC {:.2} (deviance at mean {:.2}, variance {:.2})", report.dic, report.deviance_at_mean, report.deviance_variance);
    }
    Ok(())
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub run: PathBuf,
    pub variant: Variant,
    pub description: String,
    pub dic: f64,
}

/// Reads `dic.json` from every run and sorts ascending by DIC.
pub fn compare_runs(runs: &[PathBuf]) -> Result<Vec<CompareRow>> {
    if runs.len() < 2 {
        return Err(Error::Invalid(format!("compare needs at least two runs, got {}", runs.len())));
    }
    let mut rows = Vec::with_capacity(runs.len());
    for run in runs {
        let path = run.join(DIC_FILE);
        if !path.exists() {
            return Err(Error::Invalid(format!("{} has no {DIC_FILE}", run.display())));
        }
        let report = read_dic(&path)?;
        rows.push(CompareRow {
            run: run.clone(),
            variant: report.variant,
            description: report.description,
            dic: report.dic,
        });
    }
    rows.sort_by(|a, b| a.dic.total_cmp(&b.dic));
    Ok(rows)
}

pub fn format_comparison(rows: &[CompareRow]) -> String {
    let width = rows.iter().map(|r| r.description.len()).max().unwrap_or(0).max("parameters".len());
    let mut out = format!("  {:<20} {:<width$} {:>16}  run\n", "variant", "parameters", "DIC");
    for (i, r) in rows.iter().enumerate() {
        let mark = if i == 0 { "*" } else { " " };
        out.push_str(&format!(
            "{mark} {:<20} {:<width$} {:>16.2}  {}\n",
            r.variant.name(),
            r.description,
            r.dic,
            r.run.display()
        ));
    }
    out.push_str("* lowest DIC (selected)\n");
    out
}

fn describe_cmd(args: DescribeArgs) -> Result<()> {
    let traits = load_trait_schema(&args.schema)?;
    let loaded = load_survey(&args.data, &SurveySchema::from_traits(traits))?;
    let stats = describe(&loaded.dataset);
    let text = serde_json::to_string_pretty(&stats).map_err(|e| Error::Numerical(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Fit(args) => {
            let cfg = resolve_fit(args)?;
            fit(&cfg)?;
            eprintln!("wrote {}", cfg.out.display());
            Ok(())
        }
        Command::Simulate(args) => simulate(args),
        Command::Summarize(args) => summarize(args),
        Command::Compare(args) => {
            let rows = compare_runs(&args.runs)?;
            print!("{}", format_comparison(&rows));
            Ok(())
        }
        Command::Describe(args) => describe_cmd(args),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code: 0 success, 1 invalid input, 2 runtime failure.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}
