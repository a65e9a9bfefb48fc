//! `rkb`: scenario-driven front end to `rkb-core`.
//!
//! Every command reads a scenario (the bundled default unless `--config` is
//! given), writes CSV or JSON into `--out`, and records a `manifest.json`
//! with the seed, the SHA-256 of the scenario bytes and the crate version.
//! Outputs depend only on (scenario, seed, flags), never on `--threads`.

pub mod commands;
pub mod verify;

use std::ffi::OsString;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context as _, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use rkb_core::config::Scenario;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const DEFAULT_SCENARIO: &str = include_str!("../scenarios/default.json");
const DEFAULT_SEED: u64 = 20_240_601;

#[derive(Debug, Parser)]
#[command(name = "rkb", version, about = "Robust Kalman-Bucy filtering under drift uncertainty")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Scenario JSON; the bundled default when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed; overrides `run.seed`.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Worker threads for path simulation and sweeps.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Output directory; overrides `run.out`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate signal and observation paths.
    Simulate(commands::SimulateArgs),
    /// Solve the Riccati equation, optionally with error statistics.
    Riccati(commands::RiccatiArgs),
    /// Run the classical or drift-adjusted filter on an observation file.
    Filter(commands::FilterArgs),
    /// Compare the adjusted filter with classical output plus correction.
    Decompose(commands::DecomposeArgs),
    /// Worst-case MSE search and saddle report.
    Minimax(commands::MinimaxArgs),
    /// Run the verification suite.
    Verify(verify::VerifyArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Riccati(_) => "riccati",
            Command::Filter(_) => "filter",
            Command::Decompose(_) => "decompose",
            Command::Minimax(_) => "minimax",
            Command::Verify(_) => "verify",
        }
    }
}

/// Loaded scenario plus the provenance stamped on every output.
#[derive(Debug)]
pub struct Context {
    pub scenario: Scenario,
    /// Where the scenario came from (a path or `<default>`).
    pub source: String,
    pub config_hash: String,
    pub seed: u64,
    pub out: PathBuf,
    pub command: &'static str,
    files: std::sync::Mutex<Vec<String>>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    config: &'a str,
    config_hash: &'a str,
    seed: u64,
    files: Vec<String>,
}

impl Context {
    pub fn load(global: &GlobalArgs, command: &'static str) -> Result<Self> {
        let (text, source) = match &global.config {
            Some(p) => (
                fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?,
                p.display().to_string(),
            ),
            None => (DEFAULT_SCENARIO.to_string(), "<default>".to_string()),
        };
        let scenario = Scenario::from_json_str(&text).with_context(|| format!("invalid config {source}"))?;
        let config_hash = hex::encode(Sha256::digest(text.as_bytes()));
        let seed = global.seed.or(scenario.run.seed).unwrap_or(DEFAULT_SEED);
        let out = global
            .out
            .clone()
            .or_else(|| scenario.run.out.as_ref().map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("rkb-out"));
        Ok(Context {
            scenario,
            source,
            config_hash,
            seed,
            out,
            command,
            files: Default::default(),
        })
    }

    /// The comment line opening every CSV.
    pub fn header(&self) -> String {
        format!(
            "rkb {VERSION} {} config_hash={} seed={}",
            self.command, self.config_hash, self.seed
        )
    }

    fn ensure_out(&self) -> Result<()> {
        fs::create_dir_all(&self.out).with_context(|| format!("cannot create output directory {}", self.out.display()))
    }

    /// Creates `name` in the output directory and registers it in the manifest.
    pub fn create(&self, name: &str) -> Result<BufWriter<fs::File>> {
        self.ensure_out()?;
        let path = self.out.join(name);
        let file = fs::File::create(&path).with_context(|| format!("cannot write {}", path.display()))?;
        self.files.lock().unwrap().push(name.to_string());
        Ok(BufWriter::new(file))
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        use std::io::Write;
        writeln!(w)?;
        Ok(())
    }

    pub fn write_manifest(&self) -> Result<()> {
        let mut files = self.files.lock().unwrap().clone();
        files.sort();
        files.dedup();
        let manifest = Manifest {
            command: self.command,
            version: VERSION,
            config: &self.source,
            config_hash: &self.config_hash,
            seed: self.seed,
            files,
        };
        self.write_json("manifest.json", &manifest)
    }

    pub fn out_path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

/// Exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_USAGE
        }
    }
}

fn execute(cli: Cli) -> Result<i32> {
    let ctx = Context::load(&cli.global, cli.command.name())?;
    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = cli.global.threads {
            anyhow::ensure!(n >= 1, "--threads must be at least 1");
            b = b.num_threads(n);
        }
        b.build()?
    };
    let code = pool.install(|| -> Result<i32> {
        match &cli.command {
            Command::Simulate(a) => commands::simulate(&ctx, a).map(|_| EXIT_OK),
            Command::Riccati(a) => commands::riccati(&ctx, a).map(|_| EXIT_OK),
            Command::Filter(a) => commands::filter(&ctx, a).map(|_| EXIT_OK),
            Command::Decompose(a) => commands::decompose(&ctx, a).map(|_| EXIT_OK),
            Command::Minimax(a) => commands::minimax(&ctx, a).map(|_| EXIT_OK),
            Command::Verify(a) => verify::run(&ctx, a).map(|ok| if ok { EXIT_OK } else { EXIT_VERIFY_FAILED }),
        }
    })?;
    ctx.write_manifest()?;
    Ok(code)
}

/// Reads a drift given inline (`0.5`, `1,-0.5`) or as a CSV file with
/// `theta_*` columns.
pub fn policy_arg(spec: &str, n_steps: usize, n: usize) -> Result<rkb_core::DriftPolicy> {
    let path = Path::new(spec);
    if path.is_file() {
        let f = fs::File::open(path).with_context(|| format!("cannot read policy {spec}"))?;
        return rkb_core::export::read_policy(f, n_steps, n).with_context(|| format!("invalid policy file {spec}"));
    }
    Ok(rkb_core::config::PolicySpec::parse_inline(spec)?.resolve(n_steps, n)?)
}
