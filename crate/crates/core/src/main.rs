use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mmbeam::beamformers::Architecture;
use mmbeam::harness::{self, SimConfig};
use mmbeam::power::{rf_chain_counts, rx_circuit_power_mw, tx_circuit_power_mw};
use mmbeam::validate;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(name = "mmbeam", version, about = "mmWave MU-MIMO beamforming ASE/GEE simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the Monte Carlo sweep and write the CSV table
    Sweep(SweepArgs),
    /// Print circuit-power breakdowns per architecture and array size
    PowerTable(PowerArgs),
    /// Run the invariant suite on small random instances
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// JSON configuration file; omitted fields take their defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated architecture tags (cm-fd, pzf-fd, pzf-hy, an, sw-phsh, sw)
    #[arg(long, value_delimiter = ',')]
    archs: Option<Vec<Architecture>>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Output CSV path (stdout when neither this nor the config sets one)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `base_seed`
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the number of drops per sweep point
    #[arg(long)]
    drops: Option<usize>,
    /// Worker threads (defaults to the number of cores)
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Args)]
struct PowerArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[arg(long, default_value_t = 200)]
    instances: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn load_config(common: &CommonArgs) -> Result<SimConfig> {
    let mut config = match &common.config {
        Some(path) => SimConfig::load(path)?,
        None => SimConfig::default(),
    };
    if let Some(archs) = &common.archs {
        config.architectures = archs.clone();
    }
    Ok(config)
}

fn sweep(args: SweepArgs) -> Result<()> {
    let mut config = load_config(&args.common)?;
    if let Some(seed) = args.seed {
        config.base_seed = seed;
    }
    if let Some(drops) = args.drops {
        config.drops = drops;
    }
    config.validate()?;
    let threads = args.threads.unwrap_or(0);
    let table = if threads > 0 {
        harness::run_sweep_with_threads(&config, threads)?
    } else {
        harness::run_sweep(&config)?
    };
    match args.out.or_else(|| config.output.clone()) {
        Some(path) => harness::write_csv(&table, &path)?,
        None => harness::emit_csv(&table, io::stdout().lock()).context("writing to stdout")?,
    }
    Ok(())
}

fn power_table(args: PowerArgs) -> Result<()> {
    let config = load_config(&args.common)?;
    config.validate()?;
    let c = &config.power;
    let mut out = io::stdout().lock();
    writeln!(out, "arch,m,n_t,n_r,n_t_rf,n_r_rf,p_txc_mw,p_rxc_mw,total_circuit_w")?;
    for &m in &config.m_streams {
        let n_t_rf = config.n_t_rf.unwrap_or(config.k_users * m);
        let n_r_rf = config.n_r_rf.unwrap_or(m);
        for &n_t in &config.n_t {
            for &n_r in &config.n_r {
                for &arch in &config.architectures {
                    let (t_rf, r_rf) = rf_chain_counts(arch, n_t, n_r, n_t_rf, n_r_rf);
                    let tx = tx_circuit_power_mw(arch, n_t, t_rf, config.n_q, c);
                    let rx = rx_circuit_power_mw(arch, n_r, r_rf, config.n_q, c);
                    let total = (tx + config.k_users as f64 * rx) / 1000.0;
                    writeln!(out, "{arch},{m},{n_t},{n_r},{t_rf},{r_rf},{tx},{rx},{total}")?;
                }
            }
        }
    }
    Ok(())
}

fn run_validate(args: ValidateArgs) -> Result<()> {
    let report = validate::run_suite(args.instances, args.seed);
    let mut out = io::stdout().lock();
    for check in &report.checks {
        writeln!(out, "{check}")?;
    }
    if !report.passed() {
        bail!("{} invariant check(s) failed", report.failed_checks().count());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Sweep(args) => sweep(args),
        Command::PowerTable(args) => power_table(args),
        Command::Validate(args) => run_validate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
