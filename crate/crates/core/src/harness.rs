//! Monte Carlo orchestration: configuration, per-drop evaluation, sweeps and
//! CSV output.
//!
//! Every drop draws its users from its own ChaCha20 stream, selected by the
//! base seed (key) and the pair `(sweep index, drop index)` (stream id), so
//! results do not depend on how drops are scheduled across threads.

use crate::beamformers::{Architecture, SynthesisOptions, SynthesisTarget, Synthesizer};
use crate::channel::{assemble_channel, draw_geometry, noise_variance, ChannelError, ChannelParams, ChannelRealization};
use crate::metrics::{ase, gee, MetricSample};
use crate::power::{rf_chain_counts, rx_circuit_power, tx_circuit_power, InvalidConstant, PowerConstants};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const TOOL_NAME: &str = env!("CARGO_PKG_NAME");
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const CSV_HEADER: &str = "arch,n_t,n_r,k,m,p_t_dbw,drop,ase_bit_s_hz,p_txc_w,p_rxc_w,gee_bit_per_joule,flags";
pub const SUMMARY_HEADER: &str =
    "summary,arch,n_t,n_r,k,m,p_t_dbw,samples,failures,ase_mean,ase_stderr,gee_mean,gee_stderr,p_txc_w,p_rxc_w";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("configuration: {0}")]
    Invalid(String),
    #[error("configuration: {0}")]
    Channel(#[from] ChannelError),
    #[error("configuration: {0}")]
    Power(#[from] InvalidConstant),
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: io::Error },
    #[error("cannot parse config {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
}

#[derive(Debug, Error)]
#[error("cannot write {path}: {source}")]
pub struct OutputError {
    pub path: PathBuf,
    #[source]
    pub source: io::Error,
}

#[derive(Debug, Error)]
#[error("malformed CSV line {line}: {reason}")]
pub struct ParseCsvError {
    pub line: usize,
    pub reason: String,
}

/// Full simulation configuration. Every field defaults to the 73 GHz
/// street-canyon scenario with ten users in a 100 m cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub architectures: Vec<Architecture>,
    pub k_users: usize,
    pub m_streams: Vec<usize>,
    pub n_t: Vec<usize>,
    pub n_r: Vec<usize>,
    pub p_t_dbw: f64,
    pub bandwidth_hz: f64,
    pub noise_figure_db: f64,
    pub noise_density_dbm_hz: f64,
    pub drops: usize,
    pub base_seed: u64,
    /// Array sizes inside are overridden by each sweep point.
    pub channel: ChannelParams,
    pub power: PowerConstants,
    pub n_q: usize,
    pub an_min_sep_deg: f64,
    pub bcd_max_iters: usize,
    pub bcd_rel_tol: f64,
    pub switch_target: SynthesisTarget,
    pub n_t_rf: Option<usize>,
    pub n_r_rf: Option<usize>,
    #[serde(skip_serializing)]
    pub output: Option<PathBuf>,
}

impl Default for SimConfig {
    fn default() -> Self {
        let synth = SynthesisOptions::default();
        Self {
            architectures: Architecture::ALL.to_vec(),
            k_users: 10,
            m_streams: vec![1, 3],
            n_t: vec![50, 100, 150, 200, 250, 300],
            n_r: vec![30],
            p_t_dbw: 0.0,
            bandwidth_hz: 500e6,
            noise_figure_db: 3.0,
            noise_density_dbm_hz: -174.0,
            drops: 200,
            base_seed: 1,
            channel: ChannelParams::default(),
            power: PowerConstants::default(),
            n_q: synth.n_q,
            an_min_sep_deg: synth.an_min_sep_deg,
            bcd_max_iters: synth.bcd_max_iters,
            bcd_rel_tol: synth.bcd_rel_tol,
            switch_target: synth.switch_target,
            n_t_rf: None,
            n_r_rf: None,
            output: None,
        }
    }
}

impl SimConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        if self.architectures.is_empty() {
            return bad("architecture list is empty".into());
        }
        if self.m_streams.is_empty() || self.n_t.is_empty() || self.n_r.is_empty() {
            return bad("sweep lists must be non-empty".into());
        }
        if self.drops == 0 {
            return bad("drops must be at least 1".into());
        }
        if self.k_users == 0 {
            return bad("k_users must be at least 1".into());
        }
        if self.m_streams.contains(&0) || self.n_t.contains(&0) || self.n_r.contains(&0) {
            return bad("stream and antenna counts must be positive".into());
        }
        if self.bandwidth_hz.is_nan() || self.bandwidth_hz <= 0.0 {
            return bad("bandwidth must be positive".into());
        }
        if self.n_q < 2 {
            return bad("n_q must be at least 2".into());
        }
        if !self.p_t_dbw.is_finite() {
            return bad("p_t_dbw must be finite".into());
        }
        self.channel.validate()?;
        self.power.validate()?;
        Ok(())
    }

    /// Sweep points in emission order: streams, then N_T, then N_R.
    pub fn sweep_points(&self) -> Vec<SweepPoint> {
        let mut points = Vec::new();
        for &m in &self.m_streams {
            for &n_t in &self.n_t {
                for &n_r in &self.n_r {
                    points.push(SweepPoint {
                        index: points.len(),
                        m,
                        n_t,
                        n_r,
                    });
                }
            }
        }
        points
    }

    pub fn transmit_power_w(&self) -> f64 {
        10f64.powf(self.p_t_dbw / 10.0)
    }

    pub fn noise_power_w(&self) -> f64 {
        noise_variance(self.noise_figure_db, self.noise_density_dbm_hz, self.bandwidth_hz)
    }

    pub fn synthesis_options(&self, streams: usize) -> SynthesisOptions {
        SynthesisOptions {
            streams,
            n_t_rf: self.n_t_rf,
            n_r_rf: self.n_r_rf,
            n_q: self.n_q,
            an_min_sep_deg: self.an_min_sep_deg,
            bcd_max_iters: self.bcd_max_iters,
            bcd_rel_tol: self.bcd_rel_tol,
            switch_target: self.switch_target,
        }
    }

    pub fn channel_params(&self, point: &SweepPoint) -> ChannelParams {
        ChannelParams {
            n_t: point.n_t,
            n_r: point.n_r,
            ..self.channel.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepPoint {
    pub index: usize,
    pub m: usize,
    pub n_t: usize,
    pub n_r: usize,
}

/// The random stream for one drop.
pub fn drop_rng(base_seed: u64, sweep_index: usize, drop_index: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(base_seed);
    rng.set_stream(((sweep_index as u64) << 32) | (drop_index as u64 & 0xffff_ffff));
    rng
}

/// Draws and assembles the channels of all users for one drop.
pub fn draw_channels(
    config: &SimConfig,
    point: &SweepPoint,
    drop_index: usize,
) -> Result<Vec<ChannelRealization>, ChannelError> {
    let params = config.channel_params(point);
    let mut rng = drop_rng(config.base_seed, point.index, drop_index);
    (0..config.k_users)
        .map(|_| {
            let geometry = draw_geometry(&params, &mut rng);
            assemble_channel(&params, geometry)
        })
        .collect()
}

/// Evaluates every configured architecture on one shared channel set.
pub fn evaluate_drop(
    config: &SimConfig,
    point: &SweepPoint,
    drop_index: usize,
    channels: &[ChannelRealization],
) -> Vec<MetricSample> {
    let opts = config.synthesis_options(point.m);
    let synth = Synthesizer::new(channels, &opts);
    let p_t = config.transmit_power_w();
    let sigma2 = config.noise_power_w();
    let k = config.k_users;

    config
        .architectures
        .iter()
        .map(|&arch| {
            let mut flags = Vec::new();
            let default_chains = rf_chain_counts(arch, point.n_t, point.n_r, opts.tx_rf_chains(k), opts.rx_rf_chains());
            let (rate, chains) = match synth.build(arch) {
                Ok(bf) => {
                    if bf.an_separation_fallback {
                        flags.push("an-separation-fallback".to_string());
                    }
                    match ase(channels, &bf, p_t, sigma2) {
                        Ok(rate) => (rate, (bf.n_t_rf, bf.n_r_rf)),
                        Err(_) => {
                            flags.push("error:singular-disturbance".to_string());
                            (0.0, (bf.n_t_rf, bf.n_r_rf))
                        }
                    }
                }
                Err(err) => {
                    flags.push(format!("error:{}", err.kind()));
                    (0.0, default_chains)
                }
            };
            let p_tx_c = tx_circuit_power(arch, point.n_t, chains.0, config.n_q, &config.power);
            let p_rx_c = rx_circuit_power(arch, point.n_r, chains.1, config.n_q, &config.power);
            let energy = gee(rate, config.bandwidth_hz, p_t, p_tx_c, p_rx_c, k, config.power.eta);
            MetricSample {
                arch,
                n_t: point.n_t,
                n_r: point.n_r,
                k,
                m: point.m,
                p_t_dbw: config.p_t_dbw,
                drop: drop_index,
                ase: rate,
                p_tx_c,
                p_rx_c,
                gee: energy,
                flags,
            }
        })
        .collect()
}

/// One Monte Carlo drop: one sample per configured architecture.
pub fn run_drop(config: &SimConfig, point: &SweepPoint, drop_index: usize) -> Vec<MetricSample> {
    match draw_channels(config, point, drop_index) {
        Ok(channels) => evaluate_drop(config, point, drop_index, &channels),
        Err(_) => config
            .architectures
            .iter()
            .map(|&arch| MetricSample {
                arch,
                n_t: point.n_t,
                n_r: point.n_r,
                k: config.k_users,
                m: point.m,
                p_t_dbw: config.p_t_dbw,
                drop: drop_index,
                ase: 0.0,
                p_tx_c: 0.0,
                p_rx_c: 0.0,
                gee: 0.0,
                flags: vec!["error:channel".to_string()],
            })
            .collect(),
    }
}

/// Mean and standard error of one (sweep point, architecture) cell,
/// excluding failed rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub arch: Architecture,
    pub n_t: usize,
    pub n_r: usize,
    pub k: usize,
    pub m: usize,
    pub p_t_dbw: f64,
    pub samples: usize,
    pub failures: usize,
    pub ase_mean: f64,
    pub ase_stderr: f64,
    pub gee_mean: f64,
    pub gee_stderr: f64,
    pub p_tx_c: f64,
    pub p_rx_c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metadata {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub config: SimConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    pub metadata: Metadata,
    pub samples: Vec<MetricSample>,
    pub summaries: Vec<SummaryRow>,
}

impl ResultTable {
    pub fn empty(config: &SimConfig) -> Self {
        Self {
            metadata: metadata(config),
            samples: Vec::new(),
            summaries: Vec::new(),
        }
    }

    pub fn summary(&self, arch: Architecture, m: usize, n_t: usize, n_r: usize) -> Option<&SummaryRow> {
        self.summaries
            .iter()
            .find(|s| s.arch == arch && s.m == m && s.n_t == n_t && s.n_r == n_r)
    }
}

fn metadata(config: &SimConfig) -> Metadata {
    Metadata {
        tool: TOOL_NAME.to_string(),
        version: TOOL_VERSION.to_string(),
        seed: config.base_seed,
        config: config.clone(),
    }
}

fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

pub fn summarize(config: &SimConfig, samples: &[MetricSample]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for point in config.sweep_points() {
        for &arch in &config.architectures {
            let cell: Vec<&MetricSample> = samples
                .iter()
                .filter(|s| s.arch == arch && s.m == point.m && s.n_t == point.n_t && s.n_r == point.n_r)
                .collect();
            let ok: Vec<&MetricSample> = cell.iter().copied().filter(|s| !s.is_failure()).collect();
            let ases: Vec<f64> = ok.iter().map(|s| s.ase).collect();
            let gees: Vec<f64> = ok.iter().map(|s| s.gee).collect();
            let (ase_mean, ase_stderr) = mean_and_stderr(&ases);
            let (gee_mean, gee_stderr) = mean_and_stderr(&gees);
            let (p_tx_c, p_rx_c) = cell.first().map_or((f64::NAN, f64::NAN), |s| (s.p_tx_c, s.p_rx_c));
            rows.push(SummaryRow {
                arch,
                n_t: point.n_t,
                n_r: point.n_r,
                k: config.k_users,
                m: point.m,
                p_t_dbw: config.p_t_dbw,
                samples: ok.len(),
                failures: cell.len() - ok.len(),
                ase_mean,
                ase_stderr,
                gee_mean,
                gee_stderr,
                p_tx_c,
                p_rx_c,
            });
        }
    }
    rows
}

/// Runs every (sweep point, drop) pair on the current rayon pool. Output
/// order is point-major, then drop, then architecture.
pub fn run_sweep(config: &SimConfig) -> Result<ResultTable, ConfigError> {
    config.validate()?;
    let points = config.sweep_points();
    let units: Vec<(SweepPoint, usize)> = points
        .iter()
        .flat_map(|p| (0..config.drops).map(move |d| (*p, d)))
        .collect();
    let samples: Vec<MetricSample> = units
        .par_iter()
        .map(|(point, drop)| run_drop(config, point, *drop))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    let summaries = summarize(config, &samples);
    Ok(ResultTable {
        metadata: metadata(config),
        samples,
        summaries,
    })
}

/// `run_sweep` on a dedicated pool with the given number of threads.
pub fn run_sweep_with_threads(config: &SimConfig, threads: usize) -> Result<ResultTable, ConfigError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| ConfigError::Invalid(format!("thread pool: {e}")))?;
    pool.install(|| run_sweep(config))
}

/// Nine significant digits.
pub fn format_number(x: f64) -> String {
    format!("{x:.8e}")
}

fn sample_line(s: &MetricSample) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{}",
        s.arch,
        s.n_t,
        s.n_r,
        s.k,
        s.m,
        format_number(s.p_t_dbw),
        s.drop,
        format_number(s.ase),
        format_number(s.p_tx_c),
        format_number(s.p_rx_c),
        format_number(s.gee),
        s.flags.join(";")
    )
}

fn summary_line(s: &SummaryRow) -> String {
    format!(
        "summary,{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        s.arch,
        s.n_t,
        s.n_r,
        s.k,
        s.m,
        format_number(s.p_t_dbw),
        s.samples,
        s.failures,
        format_number(s.ase_mean),
        format_number(s.ase_stderr),
        format_number(s.gee_mean),
        format_number(s.gee_stderr),
        format_number(s.p_tx_c),
        format_number(s.p_rx_c)
    )
}

/// Renders the table: `#` metadata lines, the column header, one row per
/// sample, then `#`-prefixed summary rows.
pub fn render_csv(table: &ResultTable) -> String {
    let mut out = String::new();
    let meta = &table.metadata;
    let config_json = serde_json::to_string(&meta.config).expect("config serializes");
    let constants_json = serde_json::to_string(&meta.config.power).expect("constants serialize");
    let _ = writeln!(out, "# tool: {} {}", meta.tool, meta.version);
    let _ = writeln!(out, "# seed: {}", meta.seed);
    let _ = writeln!(out, "# config: {config_json}");
    let _ = writeln!(out, "# power_constants_mw: {constants_json}");
    let _ = writeln!(out, "{CSV_HEADER}");
    for s in &table.samples {
        let _ = writeln!(out, "{}", sample_line(s));
    }
    if !table.summaries.is_empty() {
        let _ = writeln!(out, "# {SUMMARY_HEADER}");
        for s in &table.summaries {
            let _ = writeln!(out, "# {}", summary_line(s));
        }
    }
    out
}

pub fn emit_csv<W: Write>(table: &ResultTable, mut writer: W) -> io::Result<()> {
    writer.write_all(render_csv(table).as_bytes())?;
    writer.flush()
}

pub fn write_csv(table: &ResultTable, path: &Path) -> Result<(), OutputError> {
    let wrap = |source| OutputError {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::create(path).map_err(wrap)?;
    emit_csv(table, io::BufWriter::new(file)).map_err(wrap)
}

/// Reads the sample rows back from emitted CSV text, skipping `#` lines.
pub fn parse_csv(text: &str) -> Result<Vec<MetricSample>, ParseCsvError> {
    let mut rows = Vec::new();
    let mut seen_header = false;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if !seen_header {
            if line != CSV_HEADER {
                return Err(ParseCsvError {
                    line: line_no,
                    reason: "unexpected header".into(),
                });
            }
            seen_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 12 {
            return Err(ParseCsvError {
                line: line_no,
                reason: format!("expected 12 fields, found {}", fields.len()),
            });
        }
        let err = |reason: String| ParseCsvError { line: line_no, reason };
        let int = |s: &str| s.parse::<usize>().map_err(|e| err(format!("{s}: {e}")));
        let float = |s: &str| s.parse::<f64>().map_err(|e| err(format!("{s}: {e}")));
        rows.push(MetricSample {
            arch: fields[0].parse().map_err(|e| err(format!("{e}")))?,
            n_t: int(fields[1])?,
            n_r: int(fields[2])?,
            k: int(fields[3])?,
            m: int(fields[4])?,
            p_t_dbw: float(fields[5])?,
            drop: int(fields[6])?,
            ase: float(fields[7])?,
            p_tx_c: float(fields[8])?,
            p_rx_c: float(fields[9])?,
            gee: float(fields[10])?,
            flags: if fields[11].is_empty() {
                Vec::new()
            } else {
                fields[11].split(';').map(str::to_string).collect()
            },
        });
    }
    Ok(rows)
}
