//! Subcommands of the `diffora` binary.
//!
//! Every command returns an exit code from [`exit`]; files are written to a
//! temporary sibling and renamed into place, so an output is either complete
//! or absent.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Deserialize;

use diffora_core::dam::{discretize, DamState};
use diffora_core::data::{format_f64, write_csv};
use diffora_core::pipeline::{
    build_report, compare, dam_csv, loss_csv, prepare_task, run_all, run_stage1, run_stage2, Checkpoint, CompareRow,
    Model, RunConfig, Stage1Output, Strategy, Weights, SEED_ENV,
};
use diffora_core::theory::{verify_theory, TheoryConfig, TheoryReport};
use diffora_core::{Error, SeededRng};

/// Stable exit codes.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const DIVERGENCE: i32 = 3;
    pub const IO: i32 = 4;
    pub const ASSERTION: i32 = 5;
}

pub const REPORT_FILE: &str = "report.toml";
pub const LOSS_FILE: &str = "losses.csv";
pub const GAMMA_BAR_FILE: &str = "gamma_bar.csv";
pub const GAMMA_BIN_FILE: &str = "gamma_bin.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.dfra";
pub const THEORY_REPORT_FILE: &str = "theory_report.toml";
pub const COMPARE_FILE: &str = "compare.csv";

#[derive(Debug, Parser)]
#[command(name = "diffora", version, about = "Module-wise selective low-rank adaptation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the configured dataset as CSV.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: relax the adaptation matrix.
    Relax {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Keep the top k modules per layer of a relaxed checkpoint.
    Discretize {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sample rate overriding the checkpoint's.
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Stage 2: fine-tune the selected modules.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Config overriding the one stored in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Stage 1, discretization and stage 2.
    RunAll {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Monte-Carlo Gram, eigenvalue and convergence checks.
    VerifyTheory {
        #[arg(long)]
        config: PathBuf,
        /// Directory for the report; printed only when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Selection strategies over seeds at matched budgets.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "diffora,random")]
        strategies: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        /// Sample rates to sweep; defaults to the config's.
        #[arg(long, value_delimiter = ',')]
        rhos: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the adaptation matrix of a checkpoint as CSV.
    DumpDam {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Print the binary selection instead of the relaxed weights.
        #[arg(long)]
        binary: bool,
    },
}

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    Assertion(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Assertion(_) => exit::ASSERTION,
            CliError::Core(Error::Divergence { .. }) => exit::DIVERGENCE,
            CliError::Core(Error::Io(_) | Error::Format(_)) => exit::IO,
            CliError::Core(_) => exit::USAGE,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => e.fmt(f),
            CliError::Assertion(msg) => f.write_str(msg),
        }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::USAGE } else { exit::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(()) => exit::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

pub fn execute(command: Command) -> CliResult {
    match command {
        Command::GenData { config, out } => cmd_gen_data(&config, &out),
        Command::Relax { config, out } => cmd_relax(&config, &out),
        Command::Discretize { checkpoint, rho, out } => cmd_discretize(&checkpoint, rho, &out),
        Command::Finetune { checkpoint, config, out } => cmd_finetune(&checkpoint, config.as_deref(), &out),
        Command::RunAll { config, out } => cmd_run_all(&config, &out),
        Command::VerifyTheory { config, out } => cmd_verify_theory(&config, out.as_deref()).map(|_| ()),
        Command::Compare {
            config,
            strategies,
            seeds,
            rhos,
            out,
        } => cmd_compare(&config, &strategies, &seeds, &rhos, out.as_deref()).map(|_| ()),
        Command::DumpDam { checkpoint, binary } => {
            print!("{}", dump_dam(&checkpoint, binary)?);
            Ok(())
        }
    }
}

/// Writes `bytes` to a temporary file next to `path`, then renames it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| CliError::from(e.error))?;
    Ok(())
}

fn read_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Ok(Checkpoint::from_bytes(&std::fs::read(path)?)?)
}

fn checkpoint_config(ckpt: &Checkpoint) -> CliResult<RunConfig> {
    let cfg = RunConfig::from_toml_str(&ckpt.config)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_gen_data(config: &Path, out: &Path) -> CliResult {
    let cfg = RunConfig::load(config)?;
    let task = prepare_task(&cfg)?;
    let mut buf = Vec::new();
    write_csv(&task.full, &mut buf)?;
    write_atomic(out, &buf)?;
    eprintln!("wrote {} examples with {} features to {}", task.full.len(), task.full.dim(), out.display());
    Ok(())
}

pub fn cmd_relax(config: &Path, out: &Path) -> CliResult {
    let cfg = RunConfig::load(config)?;
    let task = prepare_task(&cfg)?;
    let stage1 = run_stage1(&cfg, &task)?;
    let ckpt = Checkpoint {
        config: cfg.to_canonical(),
        dam: Some(stage1.dam.clone()),
        weights: Some(Weights::of(&stage1.model)),
    };
    write_atomic(&out.join(CHECKPOINT_FILE), &ckpt.to_bytes())?;
    write_atomic(&out.join(GAMMA_BAR_FILE), dam_csv(stage1.dam.gamma_bar(), false).as_bytes())?;
    write_atomic(&out.join(LOSS_FILE), loss_csv(&stage1.rows).as_bytes())?;
    Ok(())
}

pub fn cmd_discretize(checkpoint: &Path, rho: Option<f64>, out: &Path) -> CliResult {
    let mut ckpt = read_checkpoint(checkpoint)?;
    let mut cfg = checkpoint_config(&ckpt)?;
    let dam = ckpt
        .dam
        .as_ref()
        .ok_or_else(|| Error::Config("checkpoint holds no adaptation matrix".into()))?;
    let dam = match rho {
        Some(rho) => {
            cfg.rho = rho;
            cfg.validate()?;
            DamState::from_logits(dam.logits().clone(), rho)?
        }
        None => dam.clone(),
    };
    let dam = discretize(&dam);
    write_atomic(&out.join(GAMMA_BIN_FILE), dam_csv(dam.gamma_bin().expect("discretized"), true).as_bytes())?;
    ckpt.config = cfg.to_canonical();
    ckpt.dam = Some(dam);
    write_atomic(&out.join(CHECKPOINT_FILE), &ckpt.to_bytes())?;
    Ok(())
}

pub fn cmd_finetune(checkpoint: &Path, config: Option<&Path>, out: &Path) -> CliResult {
    let ckpt = read_checkpoint(checkpoint)?;
    let cfg = match config {
        Some(path) => RunConfig::load(path)?,
        None => checkpoint_config(&ckpt)?,
    };
    let dam = ckpt
        .dam
        .clone()
        .ok_or_else(|| Error::Config("checkpoint holds no adaptation matrix".into()))?;
    let task = prepare_task(&cfg)?;
    let mut warm: Model = task.base.clone();
    if let Some(w) = &ckpt.weights {
        w.apply(&mut warm)?;
    }
    let stage2 = run_stage2(&cfg, &dam, Some(&warm), &task)?;
    let stage1 = Stage1Output {
        dam: dam.clone(),
        model: warm,
        rows: Vec::new(),
        outer_valid: Vec::new(),
    };
    let report = build_report(&cfg, &task, &stage1, &stage2)?;
    let out_ckpt = Checkpoint {
        config: cfg.to_canonical(),
        dam: Some(stage2.dam.clone()),
        weights: Some(Weights::of(&stage2.model)),
    };
    write_atomic(&out.join(CHECKPOINT_FILE), &out_ckpt.to_bytes())?;
    write_atomic(&out.join(REPORT_FILE), report.to_toml().as_bytes())?;
    write_atomic(&out.join(LOSS_FILE), loss_csv(&stage2.rows).as_bytes())?;
    write_atomic(&out.join(GAMMA_BIN_FILE), dam_csv(stage2.dam.gamma_bin().expect("discretized"), true).as_bytes())?;
    Ok(())
}

/// Runs both stages and writes the report, loss curve, both DAM matrices and
/// the checkpoint into `out`. Timings go to stderr only.
pub fn cmd_run_all(config: &Path, out: &Path) -> CliResult {
    let cfg = RunConfig::load(config)?;
    let started = Instant::now();
    let outcome = run_all(&cfg)?;
    write_atomic(&out.join(REPORT_FILE), outcome.report.to_toml().as_bytes())?;
    write_atomic(&out.join(LOSS_FILE), loss_csv(outcome.rows()).as_bytes())?;
    write_atomic(&out.join(GAMMA_BAR_FILE), dam_csv(outcome.stage1.dam.gamma_bar(), false).as_bytes())?;
    let bin = outcome.stage2.dam.gamma_bin().expect("discretized");
    write_atomic(&out.join(GAMMA_BIN_FILE), dam_csv(bin, true).as_bytes())?;
    write_atomic(&out.join(CHECKPOINT_FILE), &outcome.checkpoint(&cfg).to_bytes())?;
    let t = outcome.timings;
    eprintln!(
        "prepare {:.3}s, stage 1 {:.3}s, stage 2 {:.3}s, total {:.3}s",
        t.prepare.as_secs_f64(),
        t.stage1.as_secs_f64(),
        t.stage2.as_secs_f64(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

/// The parts of a config file `verify-theory` reads; other keys are ignored.
#[derive(Debug, Deserialize)]
struct TheoryFile {
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    theory: TheoryConfig,
}

fn load_theory_file(path: &Path) -> CliResult<(u64, TheoryConfig)> {
    let text = std::fs::read_to_string(path)?;
    let file: TheoryFile = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
    } else {
        toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
    };
    let seed = match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?,
        Err(_) => file.seed,
    };
    Ok((seed, file.theory))
}

pub fn theory_summary(report: &TheoryReport) -> String {
    let mut s = String::new();
    for c in &report.checks {
        let status = match (c.passed, c.asserted) {
            (true, _) => "pass",
            (false, true) => "FAIL",
            (false, false) => "info",
        };
        let _ = writeln!(s, "{status:>4}  {:<24} {}", c.name, c.detail);
    }
    s
}

/// Exit code 5 when any asserted check fails; the report is written first.
pub fn cmd_verify_theory(config: &Path, out: Option<&Path>) -> CliResult<TheoryReport> {
    let (seed, theory) = load_theory_file(config)?;
    let report = verify_theory(&theory, &SeededRng::new(seed, 0))?;
    print!("{}", theory_summary(&report));
    if let Some(dir) = out {
        let text = toml::to_string(&report).map_err(|e| Error::Config(e.to_string()))?;
        write_atomic(&dir.join(THEORY_REPORT_FILE), text.as_bytes())?;
    }
    let failures = report.failures();
    if failures.is_empty() {
        Ok(report)
    } else {
        let names: Vec<&str> = failures.iter().map(|c| c.name.as_str()).collect();
        Err(CliError::Assertion(format!("failed checks: {}", names.join(", "))))
    }
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut s = String::from("strategy,rho,k,seeds,mean_loss,sd_loss,mean_valid_loss,recovery,params\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.strategy.name(),
            r.rho,
            r.k,
            r.seeds,
            format_f64(r.mean_loss),
            format_f64(r.sd_loss),
            format_f64(r.mean_valid_loss),
            r.recovery.map(format_f64).unwrap_or_default(),
            r.params
        );
    }
    s
}

pub fn compare_table(rows: &[CompareRow]) -> String {
    let mut s = format!(
        "{:<8} {:>5} {:>2} {:>24} {:>9} {:>7}\n",
        "strategy", "rho", "k", "final loss (mean ± sd)", "recovery", "params"
    );
    for r in rows {
        let rec = r.recovery.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "{:<8} {:>5} {:>2} {:>11.4e} ± {:>10.3e} {:>9} {:>7}",
            r.strategy.name(),
            r.rho,
            r.k,
            r.mean_loss,
            r.sd_loss,
            rec,
            r.params
        );
    }
    s
}

pub fn cmd_compare(
    config: &Path,
    strategies: &[String],
    seeds: &[u64],
    rhos: &[f64],
    out: Option<&Path>,
) -> CliResult<Vec<CompareRow>> {
    let cfg = RunConfig::load(config)?;
    let strategies: Vec<Strategy> = strategies.iter().map(|s| Strategy::parse(s)).collect::<Result<_, _>>()?;
    if strategies.is_empty() || seeds.is_empty() {
        return Err(Error::Config("compare needs at least one strategy and one seed".into()).into());
    }
    let rhos = if rhos.is_empty() { vec![cfg.rho] } else { rhos.to_vec() };
    let mut rows = Vec::new();
    for rho in rhos {
        let mut c = cfg.clone();
        c.rho = rho;
        c.validate()?;
        rows.extend(compare(&c, &strategies, seeds)?);
    }
    print!("{}", compare_table(&rows));
    if let Some(dir) = out {
        write_atomic(&dir.join(COMPARE_FILE), compare_csv(&rows).as_bytes())?;
    }
    Ok(rows)
}

pub fn dump_dam(checkpoint: &Path, binary: bool) -> CliResult<String> {
    let ckpt = read_checkpoint(checkpoint)?;
    let dam = ckpt
        .dam
        .ok_or_else(|| Error::Config("checkpoint holds no adaptation matrix".into()))?;
    if binary {
        let bin = dam
            .gamma_bin()
            .ok_or_else(|| Error::Config("checkpoint is not discretized".into()))?;
        Ok(dam_csv(bin, true))
    } else {
        Ok(dam_csv(dam.gamma_bar(), false))
    }
}
