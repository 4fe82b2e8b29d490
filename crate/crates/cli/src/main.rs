//! `pse`: estimate path-specific effects with a nonignorably missing covariate,
//! run the simulation study, and compute the simulation truth.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 solver failure.

mod config;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pse_core::baselines::run_method;
use pse_core::data::{fmt_f64, validate, ValidationReport};
use pse_core::simulation::{
    closed_form_estimand, closed_form_psi, generate, missing_rate, run_monte_carlo, true_effects, TruthTable,
};
use pse_core::{Analysis, Dataset, Descriptor, DgpConfig, McConfig, Method, PseError, TreatmentProfile};
use serde::Serialize;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "pse", version, about = "Path-specific effects with a covariate missing not at random")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a dataset against its descriptor and summarize it.
    Validate(Flags),
    /// Estimate path-specific effects on a dataset.
    Estimate(Flags),
    /// Run the Monte-Carlo study on the simulation design.
    Simulate(Flags),
    /// Closed-form and simulated true effects of the simulation design.
    Truth(Flags),
}

/// Flags override the matching keys of the `--config` file, which override
/// the built-in defaults.
#[derive(Args, Debug, Default)]
struct Flags {
    /// JSON run configuration (a previous run_manifest.json also works).
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV data file.
    #[arg(long)]
    data: Option<PathBuf>,
    /// JSON descriptor naming the column groups of the data file.
    #[arg(long)]
    descriptor: Option<PathBuf>,
    /// sri, oracle, cca or mi; comma-separated list for `simulate`.
    #[arg(long)]
    method: Option<String>,
    /// nde, nie_k, te, pse_mk or psi(a1,..,aK+1); repeatable or comma-separated.
    #[arg(long)]
    estimand: Vec<String>,
    /// Treatment profile A of an explicit contrast psi(A) - psi(B).
    #[arg(long)]
    profile_a: Option<String>,
    /// Treatment profile B; omit to estimate psi(A) alone.
    #[arg(long)]
    profile_b: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    reps: Option<usize>,
    /// Simulated sample size (`simulate`) or Monte-Carlo draws (`truth`).
    #[arg(long)]
    n: Option<usize>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Confidence level of the intervals.
    #[arg(long)]
    level: Option<f64>,
    /// Number of imputations for the MI baseline.
    #[arg(long)]
    mi_m: Option<usize>,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<PseError> for Failure {
    fn from(e: PseError) -> Self {
        let code = match &e {
            PseError::Config(_) | PseError::Json(_) => 2,
            PseError::UnsolvableSystem { .. } | PseError::AllZeroWeights | PseError::EmptyResult => 4,
            _ => 3,
        };
        Failure { code, message: e.to_string() }
    }
}

fn config_error(message: String) -> Failure {
    Failure { code: 2, message }
}

fn io_error(path: &Path, e: std::io::Error) -> Failure {
    Failure { code: 3, message: format!("{}: {e}", path.display()) }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, flags) = match &cli.command {
        Command::Validate(f) => ("validate", f),
        Command::Estimate(f) => ("estimate", f),
        Command::Simulate(f) => ("simulate", f),
        Command::Truth(f) => ("truth", f),
    };
    let outcome = resolve(name, flags).and_then(|cfg| {
        if let Some(t) = cfg.threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build_global()
                .map_err(|e| config_error(format!("cannot start {t} worker threads: {e}")))?;
        }
        match name {
            "validate" => cmd_validate(&cfg),
            "estimate" => cmd_estimate(&cfg),
            "simulate" => cmd_simulate(&cfg),
            _ => cmd_truth(&cfg),
        }
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn resolve(name: &str, flags: &Flags) -> CliResult<RunConfig> {
    let mut cfg = match &flags.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.command = Some(name.to_string());
    if let Some(p) = &flags.data {
        cfg.data = Some(p.clone());
    }
    if let Some(p) = &flags.descriptor {
        cfg.descriptor = Some(p.clone());
    }
    if let Some(m) = &flags.method {
        let methods = config::split_list(m).iter().map(|s| s.parse::<Method>()).collect::<Result<Vec<_>, _>>()?;
        match (name, methods.as_slice()) {
            ("simulate", _) => cfg.methods = methods,
            (_, [one]) => cfg.method = *one,
            _ => return Err(config_error(format!("--method takes exactly one method for `{name}`"))),
        }
    }
    if !flags.estimand.is_empty() {
        cfg.estimands = flags.estimand.clone();
    }
    if flags.profile_a.is_some() || flags.profile_b.is_some() {
        cfg.profile_a = flags.profile_a.clone();
        cfg.profile_b = flags.profile_b.clone();
    }
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    if let Some(r) = flags.reps {
        cfg.reps = r;
    }
    if let Some(n) = flags.n {
        match name {
            "truth" => cfg.truth_n = n,
            _ => cfg.n = n,
        }
    }
    if flags.threads.is_some() {
        cfg.threads = flags.threads;
    }
    if let Some(o) = &flags.out {
        cfg.out = o.clone();
    }
    if let Some(l) = flags.level {
        cfg.pipeline.level = l;
    }
    if let Some(m) = flags.mi_m {
        cfg.mi_m = m;
    }
    cfg.check()?;
    Ok(cfg)
}

fn load_dataset(cfg: &RunConfig) -> CliResult<Dataset> {
    let desc_path = cfg.descriptor.as_ref().ok_or_else(|| config_error("--descriptor is required".into()))?;
    let data_path = cfg.data.as_ref().ok_or_else(|| config_error("--data is required".into()))?;
    if !desc_path.is_file() {
        return Err(config_error(format!("descriptor file not found: {}", desc_path.display())));
    }
    if !data_path.is_file() {
        return Err(config_error(format!("data file not found: {}", data_path.display())));
    }
    let descriptor = Descriptor::load(desc_path).map_err(|e| match e {
        PseError::Io(io) => io_error(desc_path, io),
        other => config_error(format!("descriptor {}: {other}", desc_path.display())),
    })?;
    Dataset::read_csv(data_path, descriptor).map_err(|e| {
        let f = Failure::from(e);
        Failure { code: 3, message: format!("{}: {}", data_path.display(), f.message) }
    })
}

fn prepare_out(cfg: &RunConfig) -> CliResult<()> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| io_error(&cfg.out, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let file = File::create(path).map_err(|e| io_error(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(PseError::from)?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| io_error(path, e))
}

fn write_manifest(cfg: &RunConfig) -> CliResult<()> {
    write_json(&cfg.out.join("run_manifest.json"), cfg)
}

fn cmd_validate(cfg: &RunConfig) -> CliResult<()> {
    let ds = load_dataset(cfg)?;
    let report: ValidationReport = validate(&ds)?;
    let estimands = cfg.resolved_estimands(ds.k())?;
    prepare_out(cfg)?;
    write_json(&cfg.out.join("validation.json"), &report)?;
    write_manifest(cfg)?;
    println!(
        "n = {}, missing = {} ({:.1}%), K = {}, estimands: {}",
        report.n,
        report.n_missing,
        100.0 * report.miss_frac,
        report.k,
        estimands.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
    );
    for flag in &report.flags {
        println!("warning: {flag}");
    }
    Ok(())
}

#[derive(Serialize)]
struct EstimateOutput<'a> {
    method: Method,
    #[serde(flatten)]
    analysis: &'a Analysis,
}

fn cmd_estimate(cfg: &RunConfig) -> CliResult<()> {
    let ds = load_dataset(cfg)?;
    let estimands = cfg.resolved_estimands(ds.k())?;
    let method = cfg.resolved_method();
    let analysis = run_method(method, &ds, None, &cfg.pipeline, &estimands, cfg.seed)?;
    prepare_out(cfg)?;
    write_json(&cfg.out.join("estimate.json"), &EstimateOutput { method, analysis: &analysis })?;
    let csv_path = cfg.out.join("estimate.csv");
    let mut w = BufWriter::new(File::create(&csv_path).map_err(|e| io_error(&csv_path, e))?);
    let mut text = String::from("estimand,estimate,se,ci_lo,ci_hi,level\n");
    for e in &analysis.estimands {
        let r = &e.report;
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.name,
            fmt_f64(r.psi_hat),
            fmt_f64(r.se()),
            fmt_f64(r.ci_lo),
            fmt_f64(r.ci_hi),
            fmt_f64(r.level)
        ));
    }
    w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(|e| io_error(&csv_path, e))?;
    write_manifest(cfg)?;
    println!("{method}: n = {}, complete = {}", analysis.n, analysis.n_complete);
    for e in &analysis.estimands {
        let r = &e.report;
        println!("  {:10} {:+.5}  se {:.5}  [{:+.5}, {:+.5}]", e.name, r.psi_hat, r.se(), r.ci_lo, r.ci_hi);
    }
    if !analysis.gamma.converged {
        println!("warning: the odds solver did not converge; see estimate.json");
    }
    Ok(())
}

fn simulation_dgp(cfg: &RunConfig) -> DgpConfig {
    DgpConfig { n: cfg.n, seed: cfg.seed, ..cfg.dgp.clone() }
}

fn cmd_simulate(cfg: &RunConfig) -> CliResult<()> {
    let estimands = cfg.resolved_estimands(2)?;
    let mc = McConfig {
        dgp: simulation_dgp(cfg),
        reps: cfg.reps,
        methods: cfg.resolved_methods(),
        estimands: estimands.clone(),
        master_seed: cfg.seed,
        pipeline: cfg.pipeline.clone(),
    };
    let result = run_monte_carlo(&mc)?;
    prepare_out(cfg)?;
    result.write_files(&cfg.out, &estimands)?;
    write_manifest(cfg)?;
    println!("{} replications at n = {}", result.reps, result.n);
    for m in &result.methods {
        for e in &m.estimands {
            println!("  {:7} {:8} bias {:+.4}  se {:.4}  cp {:.3}", m.label, e.estimand, e.bias, e.se, e.cp);
        }
        if m.failures > 0 {
            println!("  {}: {} failed replications", m.label, m.failures);
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct TruthOutput {
    closed_form_psi: BTreeMap<String, f64>,
    closed_form: BTreeMap<String, f64>,
    monte_carlo: Option<TruthTable>,
    /// Fraction of `r = 0` in one simulated sample of `truth_n` units.
    missing_rate: Option<f64>,
}

fn cmd_truth(cfg: &RunConfig) -> CliResult<()> {
    let dgp = simulation_dgp(cfg);
    dgp.check()?;
    let estimands = cfg.resolved_estimands(2)?;
    let mut psi_table = BTreeMap::new();
    for bits in 0..8u8 {
        let p = TreatmentProfile::new(vec![bits >> 2 & 1, bits >> 1 & 1, bits & 1], 2)?;
        psi_table.insert(p.to_string(), closed_form_psi(&dgp, &p)?);
    }
    let mut closed_form = BTreeMap::new();
    for e in &estimands {
        closed_form.insert(e.to_string(), closed_form_estimand(&dgp, e)?);
    }
    let (monte_carlo, missing) = if cfg.truth_n > 0 {
        let table = true_effects(&dgp, cfg.truth_n, cfg.seed)?;
        let (_, observed) = generate(&DgpConfig { n: cfg.truth_n, ..dgp.clone() })?;
        (Some(table), Some(missing_rate(&observed)))
    } else {
        (None, None)
    };
    let out = TruthOutput { closed_form_psi: psi_table, closed_form, monte_carlo, missing_rate: missing };
    prepare_out(cfg)?;
    write_json(&cfg.out.join("truth.json"), &out)?;
    write_manifest(cfg)?;
    for (name, v) in &out.closed_form {
        match out.monte_carlo.as_ref().and_then(|t| t.contrasts.get(name)) {
            Some((mc, se)) => println!("  {name:8} {v:+.6}  (simulated {mc:+.6} ± {se:.6})"),
            None => println!("  {name:8} {v:+.6}"),
        }
    }
    if let Some(rate) = out.missing_rate {
        println!("  missing rate {rate:.4}");
    }
    Ok(())
}
