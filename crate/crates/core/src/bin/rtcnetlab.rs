use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use tracing::info;

use rtcnetlab::metrics::{compare, format_deltas, CSV_COLUMNS, CSV_SCHEMA_VERSION};
use rtcnetlab::network::TransportMode;
use rtcnetlab::rate_control::ControllerKind;
use rtcnetlab::scenario::{self, PAIRS};
use rtcnetlab::session::{self, RunOptions, RunReport};

#[derive(Parser)]
#[command(name = "rtcnetlab", version, about = "Real-time media transport simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Transport {
    Udp,
    Tcp,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario and write metrics.csv, summary.json and config.echo.json.
    Run {
        /// Preset name or path to a scenario JSON file.
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Duration override in seconds.
        #[arg(long)]
        duration: Option<f64>,
        /// gcc, fixed, scripted-aggressive or bridge.
        #[arg(long)]
        controller: Option<ControllerKind>,
        #[arg(long, value_enum)]
        transport: Option<Transport>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Serve the agent bridge on this address (implies --controller bridge).
        #[arg(long)]
        bridge_listen: Option<String>,
    },
    /// Run two scenarios (or a named pair) on one seed and print the deltas.
    Compare {
        /// Named pair, or two scenarios separated by a comma.
        pair: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the preset parameter table as JSON.
    Presets,
    /// Print the metrics CSV schema.
    Schema,
}

fn main() -> ExitCode {
    let filter = tracing_subscriber::EnvFilter::try_from_env("RTCNETLAB_LOG")
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn"));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();

    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn execute(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.cmd {
        Cmd::Run {
            scenario,
            seed,
            duration,
            controller,
            transport,
            out,
            bridge_listen,
        } => {
            let sc = scenario::load(&scenario)?;
            let opts = RunOptions {
                seed,
                duration_s: duration,
                controller: if bridge_listen.is_some() {
                    Some(ControllerKind::Bridge)
                } else {
                    controller
                },
                transport: transport.map(|t| match t {
                    Transport::Udp => TransportMode::Udp,
                    Transport::Tcp => TransportMode::Tcp,
                }),
            };
            let report = match bridge_listen {
                Some(addr) => rtcnetlab::bridge::serve(&addr, &sc, &opts)?,
                None => session::run(&sc, &opts)?,
            };
            write_outputs(&out, &report)?;
            let s = &report.summary;
            println!(
                "{} seed={} controller={} rx={:.2} MB playout_plr={:.2}% ({}) rtt_mean={} ms",
                s.scenario,
                s.seed,
                s.controller,
                s.rx_total_mbytes,
                s.playout_plr_pct,
                s.plr_band,
                s.rtt_ms.map(|r| format!("{:.1}", r.mean)).unwrap_or_else(|| "-".into()),
            );
            if !s.conservation_holds || s.release_violations > 0 {
                eprintln!("invariant violated: {:?}", s.conservation);
                return Ok(ExitCode::from(1));
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Compare {
            pair,
            seed,
            duration,
            out,
        } => {
            let (a, b) = match PAIRS.iter().find(|p| p.0 == pair) {
                Some(&(_, a, b)) => (a.to_string(), b.to_string()),
                None => match pair.split_once(',') {
                    Some((a, b)) => (a.trim().to_string(), b.trim().to_string()),
                    None => bail!(
                        "`{pair}` is not a named pair ({}) or `a,b`",
                        PAIRS.iter().map(|p| p.0).collect::<Vec<_>>().join(", ")
                    ),
                },
            };
            let opts = RunOptions {
                seed,
                duration_s: duration,
                ..RunOptions::default()
            };
            let ra = session::run(&scenario::load(&a)?, &opts)?;
            let rb = session::run(&scenario::load(&b)?, &opts)?;
            if let Some(dir) = out {
                write_outputs(&dir.join(&a), &ra)?;
                write_outputs(&dir.join(&b), &rb)?;
            }
            print!("{}", format_deltas(&a, &b, &compare(&ra.summary, &rb.summary)));
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Presets => {
            println!("{}", serde_json::to_string_pretty(&scenario::preset_table())?);
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Schema => {
            println!("schema_version {CSV_SCHEMA_VERSION}");
            for c in CSV_COLUMNS {
                println!("{c}");
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn write_outputs(dir: &Path, report: &RunReport) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("metrics.csv"), report.csv())?;
    std::fs::write(dir.join("summary.json"), report.summary_json())?;
    std::fs::write(dir.join("config.echo.json"), &report.config_echo)?;
    info!(dir = %dir.display(), "wrote outputs");
    Ok(())
}
