//! `qkdf` command-line front end.
//!
//! Exit codes: 0 success, 2 no positive key, 3 protocol abort, 4 configuration
//! error.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use qkdf::channel::{sample_tallies, sifted_z_per_pulse};
use qkdf::finitekey::{estimate_decoy_bounds, secret_key_length, DecoyBounds, KeyRateResult, ObservedTallies};
use qkdf::optimizer::{rate_distance_curve, write_curve_csv, OptimizerConfig};
use qkdf::pa::pa_throughput_bench;
use qkdf::polar::{median_steps, monte_carlo, run_compensation, DriftModel, InitialAlignment, Scenario};
use qkdf::preset::{load_preset, ExperimentPreset};
use qkdf::session::wire::TcpLink;
use qkdf::session::{run_alice, run_bob, run_loopback, SessionConfig, SessionError, SessionOutcome, SessionSeeds};

const EXIT_NO_KEY: u8 = 2;
const EXIT_PROTOCOL: u8 = 3;
const EXIT_CONFIG: u8 = 4;

#[derive(Parser)]
#[command(name = "qkdf", version, about = "Decoy-state BB84 key-rate, post-processing and polarization tools")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Built-in preset name, or a path to a preset TOML file.
    #[arg(long, default_value = "10km")]
    preset: String,
    /// Override the preset's total channel loss.
    #[arg(long, allow_negative_numbers = true)]
    loss_db: Option<f64>,
    /// Override the preset's sifted Z block size.
    #[arg(long)]
    n_z: Option<u64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output file (stdout when absent). For `session`, a directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Optimized secret-key rate against channel loss, as CSV.
    Rate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated losses in dB, replacing the preset's own loss.
        #[arg(long = "losses", value_delimiter = ',')]
        losses: Vec<f64>,
        /// Loss sweep `start:stop:step` in dB; empty when stop < start.
        #[arg(long, conflicts_with = "losses")]
        sweep: Option<String>,
        /// Emit JSON instead of CSV.
        #[arg(long)]
        json: bool,
    },
    /// Run one party (or both, over loopback) of a full simulated session.
    Session {
        #[command(flatten)]
        common: Common,
        role: SessionRole,
        #[arg(long, conflicts_with = "connect")]
        listen: Option<String>,
        #[arg(long)]
        connect: Option<String>,
        /// Pulses to simulate (default from the preset).
        #[arg(long)]
        pulses: Option<u64>,
        /// Allow privacy-amplification primes above the default size limit.
        #[arg(long)]
        allow_large_pa: bool,
    },
    /// Polarization-compensation trace, as CSV.
    Polar {
        #[command(flatten)]
        common: Common,
        /// Scenario file (JSON or TOML) replacing the preset-derived one.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// none, lab-slow or spike.
        #[arg(long, default_value = "none")]
        drift: String,
        /// Use strong calibration pulses.
        #[arg(long, conflicts_with = "weak")]
        strong: bool,
        /// Use weak calibration pulses.
        #[arg(long)]
        weak: bool,
        /// Start aligned instead of at a random misalignment.
        #[arg(long)]
        aligned: bool,
        #[arg(long)]
        steps: Option<usize>,
        /// Run this many seeded trials and emit a JSON summary instead of a
        /// trace.
        #[arg(long)]
        trials: Option<u64>,
        /// Emit the trace as JSON instead of CSV.
        #[arg(long)]
        json: bool,
    },
    /// Decoy bounds and key length for a tallies JSON file.
    Bounds {
        #[command(flatten)]
        common: Common,
        tallies: PathBuf,
        /// Reconciliation efficiency (default from the preset).
        #[arg(long)]
        f: Option<f64>,
    },
    /// Sample observed tallies from the preset's channel model, as JSON.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Accumulation time; by default long enough for `n_z` sifted Z bits.
        #[arg(long, allow_negative_numbers = true)]
        duration_s: Option<f64>,
    },
    /// Privacy-amplification throughput.
    PaBench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = [1usize << 16, 1 << 20, 1 << 22])]
        sizes: Vec<usize>,
        #[arg(long)]
        allow_large: bool,
        #[arg(long)]
        csv: bool,
    },
    /// Print a preset as TOML.
    Preset {
        #[arg(default_value = "10km")]
        name: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SessionRole {
    Alice,
    Bob,
    Loopback,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Protocol(String),
    #[error("no positive key: {0}")]
    NoKey(String),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::NoKey(_) => EXIT_NO_KEY,
            CliError::Protocol(_) => EXIT_PROTOCOL,
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io(_) => 1,
        }
    }
}

impl From<SessionError> for CliError {
    fn from(e: SessionError) -> Self {
        if e.is_config() {
            CliError::Config(e.to_string())
        } else if let SessionError::Io(io) = e {
            CliError::Io(io)
        } else {
            CliError::Protocol(e.to_string())
        }
    }
}

fn config<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Config(e.to_string())
}

type Result<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            // usage errors are configuration errors; 2 is reserved
            return if usage { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("qkdf: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Rate {
            common,
            losses,
            sweep,
            json,
        } => cmd_rate(&common, losses, sweep.as_deref(), json),
        Cmd::Session {
            common,
            role,
            listen,
            connect,
            pulses,
            allow_large_pa,
        } => cmd_session(&common, role, listen, connect, pulses, allow_large_pa),
        Cmd::Polar {
            common,
            scenario,
            drift,
            strong,
            weak,
            aligned,
            steps,
            trials,
            json,
        } => {
            let strong = if strong {
                Some(true)
            } else if weak {
                Some(false)
            } else {
                None
            };
            cmd_polar(&common, scenario.as_deref(), &drift, strong, aligned, steps, trials, json)
        }
        Cmd::Bounds { common, tallies, f } => cmd_bounds(&common, &tallies, f),
        Cmd::Sample { common, duration_s } => cmd_sample(&common, duration_s),
        Cmd::PaBench {
            common,
            sizes,
            allow_large,
            csv,
        } => {
            let rows = pa_throughput_bench(&sizes, allow_large, common.seed).map_err(config)?;
            let mut out = output(common.out.as_deref())?;
            if csv {
                let mut w = csv::Writer::from_writer(&mut out);
                for r in &rows {
                    w.serialize(r).map_err(io::Error::other)?;
                }
                w.flush()?;
                Ok(())
            } else {
                write_json(out, &rows)
            }
        }
        Cmd::Preset { name } => {
            let p = load_preset(&name).map_err(config)?;
            print!("{}", p.to_toml());
            Ok(())
        }
    }
}

fn preset(c: &Common) -> Result<ExperimentPreset> {
    let mut p = load_preset(&c.preset).map_err(config)?;
    if let Some(l) = c.loss_db {
        p = p.with_loss_db(l);
    }
    if let Some(n) = c.n_z {
        p.params.n_z_target = n;
    }
    p.validate().map_err(config)?;
    Ok(p)
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_json<T: Serialize>(mut out: impl Write, v: &T) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, v).map_err(io::Error::other)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn parse_sweep(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<f64> = s
        .split(':')
        .map(|x| x.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| CliError::Config(format!("sweep {s:?}: {e}")))?;
    let [start, stop, step] = parts[..] else {
        return Err(CliError::Config(format!("sweep {s:?}: expected start:stop:step")));
    };
    if !(step > 0.0) {
        return Err(CliError::Config(format!("sweep {s:?}: step must be positive")));
    }
    let n = ((stop - start) / step + 1e-9).floor();
    Ok(if n < 0.0 {
        Vec::new()
    } else {
        (0..=n as usize).map(|i| start + i as f64 * step).collect()
    })
}

fn cmd_rate(c: &Common, losses: Vec<f64>, sweep: Option<&str>, json: bool) -> Result<()> {
    let p = preset(c)?;
    let losses = match sweep {
        Some(s) => parse_sweep(s)?,
        None if losses.is_empty() => vec![p.model.loss_db()],
        None => losses,
    };
    let cfg = OptimizerConfig {
        f_ec: p.runtime.f_ec,
        clock_hz: p.params.clock_hz,
        ..Default::default()
    };
    let curve = rate_distance_curve(&p.model, &losses, p.params.n_z_target, p.params.security, &cfg);
    let out = output(c.out.as_deref())?;
    if json {
        write_json(out, &curve)
    } else {
        write_curve_csv(&curve, out).map_err(|e| CliError::Io(io::Error::other(e)))
    }
}

fn session_config(c: &Common, p: &ExperimentPreset, pulses: Option<u64>, allow_large_pa: bool) -> SessionConfig {
    let mut cfg = SessionConfig::new(p.model, p.params, pulses.unwrap_or(p.runtime.session_pulses));
    cfg.calibration_period = Some(p.runtime.calibration_period);
    cfg.allow_large_pa = allow_large_pa;
    cfg.seeds = SessionSeeds {
        alice: c.seed,
        channel: c.seed.wrapping_add(1),
        bob: c.seed.wrapping_add(2),
    };
    cfg
}

fn connect(listen: Option<String>, connect: Option<String>) -> Result<TcpLink> {
    let stream = match (listen, connect) {
        (Some(addr), _) => TcpListener::bind(&addr)?.accept()?.0,
        (None, Some(addr)) => TcpStream::connect(&addr)?,
        (None, None) => return Err(CliError::Config("alice and bob need --listen or --connect".into())),
    };
    Ok(TcpLink::from_tcp(stream)?)
}

fn save(out: Option<&Path>, name: &str, o: &SessionOutcome) -> Result<()> {
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        o.key
            .write_file(&dir.join(format!("{name}.key")), &o.seed_digest)
            .map_err(|e| CliError::Io(io::Error::other(e)))?;
        write_json(File::create(dir.join(format!("{name}.json")))?, &o.report)?;
    }
    Ok(())
}

fn cmd_session(
    c: &Common,
    role: SessionRole,
    listen: Option<String>,
    connect_to: Option<String>,
    pulses: Option<u64>,
    allow_large_pa: bool,
) -> Result<()> {
    let p = preset(c)?;
    let cfg = session_config(c, &p, pulses, allow_large_pa);
    let out = c.out.as_deref();
    let secret_len = match role {
        SessionRole::Loopback => {
            let (a, b) = run_loopback(&cfg)?;
            save(out, "alice", &a)?;
            save(out, "bob", &b)?;
            if a.key.bits() != b.key.bits() {
                return Err(CliError::Protocol("loopback keys differ".into()));
            }
            write_json(io::stdout().lock(), &b.report)?;
            b.report.secret_len
        }
        SessionRole::Alice | SessionRole::Bob => {
            let mut link = connect(listen, connect_to)?;
            let (name, o) = match role {
                SessionRole::Alice => ("alice", run_alice(&mut link, &cfg)?),
                _ => ("bob", run_bob(&mut link, &cfg)?),
            };
            save(out, name, &o)?;
            write_json(io::stdout().lock(), &o.report)?;
            o.report.secret_len
        }
    };
    if secret_len == 0 {
        return Err(CliError::NoKey("session produced an empty secret key".into()));
    }
    Ok(())
}

fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = fs::read_to_string(path)?;
    let parsed = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(config)
    } else {
        serde_json::from_str(&text).map_err(config)
    };
    parsed.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct TrialSummary {
    trials: u64,
    strong_pulses: bool,
    converged: usize,
    median_steps: Option<usize>,
    steps: Vec<Option<usize>>,
}

#[allow(clippy::too_many_arguments)]
fn cmd_polar(
    c: &Common,
    scenario: Option<&Path>,
    drift: &str,
    strong: Option<bool>,
    aligned: bool,
    steps: Option<usize>,
    trials: Option<u64>,
    json: bool,
) -> Result<()> {
    let mut sc = match scenario {
        Some(path) => load_scenario(path)?,
        None => {
            let mut sc = Scenario::from_preset(&preset(c)?, DriftModel::preset(drift).map_err(config)?);
            sc.seed = c.seed;
            sc
        }
    };
    if let Some(s) = strong {
        sc.strong_pulses = s;
    }
    if aligned {
        sc.initial = InitialAlignment::Aligned;
    }
    if let Some(n) = steps {
        sc.spgd.max_steps = n;
    }
    let out = output(c.out.as_deref())?;
    if let Some(n) = trials {
        let steps = monte_carlo(&sc, n).map_err(config)?;
        let summary = TrialSummary {
            trials: n,
            strong_pulses: sc.strong_pulses,
            converged: steps.iter().filter(|s| s.is_some()).count(),
            median_steps: median_steps(&steps),
            steps,
        };
        return write_json(out, &summary);
    }
    let trace = run_compensation(&sc).map_err(config)?;
    if json {
        write_json(out, &trace)
    } else {
        trace.write_csv(out).map_err(|e| CliError::Io(io::Error::other(e)))
    }
}

#[derive(Serialize)]
struct BoundsOutput {
    infeasible: bool,
    reason: Option<String>,
    bounds: Option<DecoyBounds>,
    key: Option<KeyRateResult>,
}

fn cmd_bounds(c: &Common, path: &Path, f: Option<f64>) -> Result<()> {
    let p = preset(c)?;
    let text = fs::read_to_string(path)?;
    let tallies: ObservedTallies =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    tallies.validate().map_err(config)?;
    let f = f.unwrap_or(p.runtime.f_ec);
    let result = match estimate_decoy_bounds(&tallies, &p.params) {
        Ok(b) => BoundsOutput {
            infeasible: false,
            reason: None,
            bounds: Some(b),
            key: Some(secret_key_length(&tallies, &b, f, &p.params)),
        },
        Err(e) => BoundsOutput {
            infeasible: true,
            reason: Some(e.to_string()),
            bounds: None,
            key: None,
        },
    };
    let empty = result.key.is_none_or(|k| k.secret_len == 0);
    write_json(output(c.out.as_deref())?, &result)?;
    if empty {
        return Err(CliError::NoKey(
            result.reason.unwrap_or_else(|| "key length is zero".into()),
        ));
    }
    Ok(())
}

fn cmd_sample(c: &Common, duration_s: Option<f64>) -> Result<()> {
    let p = preset(c)?;
    let duration = match duration_s {
        Some(d) if d > 0.0 => d,
        Some(d) => return Err(CliError::Config(format!("duration must be positive, got {d}"))),
        None => {
            let per_pulse = sifted_z_per_pulse(&p.model, &p.params);
            if per_pulse <= 0.0 {
                return Err(CliError::NoKey("channel delivers no detections".into()));
            }
            p.params.n_z_target as f64 / (per_pulse * p.params.clock_hz)
        }
    };
    let t = sample_tallies(&p.model, &p.params, duration, c.seed);
    write_json(output(c.out.as_deref())?, &t)
}
