//! Episodic decision environment for external rate agents, plus the
//! newline-delimited JSON socket server that exposes it.
//!
//! Messages (one JSON object per line, `type` tags the kind):
//!
//! | dir | type  | fields |
//! |-----|-------|--------|
//! | s→c | hello | `v`, `scenario`, `decision_interval_s`, `timeout_s` |
//! | c→s | reset | optional `scenario`, `seed`, `duration_s`, `decision_interval_s` |
//! | s→c | obs   | [`Observation`] fields |
//! | c→s | act   | `episode_id`, `step_id`, `target_bitrate_bps` |
//! | s→c | end   | `episode_id`, `steps`, `summary` |
//! | s→c | error | `message` |
//!
//! The server never advances simulated time while an observation is
//! outstanding. An `act` must echo the pending `step_id`.

use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::net::{TcpListener, TcpStream};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tracing::{debug, info, warn};

use crate::error::{ConfigError, Error, Result};
use crate::metrics::RunSummary;
use crate::rate_control::{clamp_rate, ControllerKind};
use crate::scenario::{self, Scenario};
use crate::session::{Counters, RunOptions, RunReport, Session};
use crate::sim::SimTime;

pub const PROTOCOL_VERSION: u32 = 1;
/// Relative change at or below which an action is ignored.
pub const DEAD_BAND: f64 = 0.10;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeConfig {
    pub scenario: String,
    pub seed: u64,
    pub duration_s: f64,
    #[serde(default = "one")]
    pub decision_interval_s: f64,
}

fn one() -> f64 {
    1.0
}

impl EpisodeConfig {
    pub fn steps(&self) -> Result<u64, ConfigError> {
        let bad = |m: &str| ConfigError::new("decision_interval_s", m.to_string());
        if !(self.decision_interval_s > 0.0 && self.duration_s > 0.0) {
            return Err(bad("duration and interval must be positive"));
        }
        let dur_us = SimTime::from_secs_f64(self.duration_s).0;
        let int_us = SimTime::from_secs_f64(self.decision_interval_s).0;
        if int_us == 0 || !dur_us.is_multiple_of(int_us) {
            return Err(bad("duration must be a multiple of the decision interval"));
        }
        Ok(dur_us / int_us)
    }
}

/// State exported to the agent once per decision interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub episode_id: u64,
    pub step_id: u64,
    pub sim_time_s: f64,
    /// Latest RTCP round trip; 0 until the first report arrives.
    pub rtt_ms: f64,
    pub plr_window: f64,
    pub plr_global: f64,
    pub jitter_ms: f64,
    pub retransmission_rate: f64,
    pub goodput_bps: f64,
    pub rx_rate_bps: f64,
    pub current_target_bps: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// What the agent sent for one step. `None` is a timeout.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Rate(Value),
    Timeout,
}

impl Action {
    pub fn bps(v: f64) -> Self {
        Action::Rate(serde_json::json!(v))
    }
}

#[derive(Debug, Clone)]
pub enum Step {
    Obs(Observation),
    End(Box<RunReport>),
}

/// One episode: a session advanced in lock-step with the agent.
pub struct Episode {
    id: u64,
    session: Option<Session>,
    interval: SimTime,
    steps: u64,
    step: u64,
    prev: Counters,
    warnings: Vec<String>,
    applied: Vec<f64>,
}

impl Episode {
    /// Fresh engine, advanced one interval at the start rate.
    pub fn reset(id: u64, cfg: &EpisodeConfig) -> Result<(Self, Observation)> {
        let sc = scenario::load(&cfg.scenario)?;
        Self::reset_with(id, &sc, cfg)
    }

    pub fn reset_with(id: u64, sc: &Scenario, cfg: &EpisodeConfig) -> Result<(Self, Observation)> {
        let steps = cfg.steps()?;
        let opts = RunOptions {
            seed: Some(cfg.seed),
            duration_s: Some(cfg.duration_s),
            controller: Some(ControllerKind::Bridge),
            transport: None,
        };
        let session = Session::new(sc, &opts)?;
        let mut ep = Self {
            id,
            applied: Vec::new(),
            session: Some(session),
            interval: SimTime::from_secs_f64(cfg.decision_interval_s),
            steps,
            step: 0,
            prev: Counters::default(),
            warnings: Vec::new(),
        };
        let obs = ep.advance()?;
        ep.applied.push(obs.current_target_bps);
        Ok((ep, obs))
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Step id of the observation awaiting an action.
    pub fn pending_step(&self) -> u64 {
        self.step - 1
    }

    /// Every bitrate the episode actually switched to, starting rate first.
    pub fn applied_rates(&self) -> &[f64] {
        &self.applied
    }

    pub fn current_target(&self) -> f64 {
        self.session.as_ref().map_or(0.0, |s| s.target_bps())
    }

    /// Applies the action under the dead-band rule and advances one interval.
    pub fn step(&mut self, action: Action) -> Result<Step> {
        let session = self
            .session
            .as_mut()
            .ok_or_else(|| Error::Protocol("episode already ended".into()))?;
        let current = session.target_bps();
        let wanted = match action {
            Action::Timeout => {
                self.warnings.push("timeout: previous bitrate retained".into());
                None
            }
            Action::Rate(v) => match v.as_f64().filter(|x| x.is_finite()) {
                None => {
                    self.warnings.push(format!("malformed action {v}: previous bitrate retained"));
                    None
                }
                Some(x) => {
                    let c = clamp_rate(x);
                    if c != x {
                        self.warnings.push(format!("action {x} clamped to {c}"));
                    }
                    Some(c)
                }
            },
        };
        if let Some(new) = wanted {
            if (new - current).abs() / current > DEAD_BAND {
                let applied = session.apply_external(new)?;
                self.applied.push(applied);
            }
        }
        if self.step >= self.steps {
            let session = self.session.take().expect("checked above");
            return Ok(Step::End(Box::new(session.finish()?)));
        }
        Ok(Step::Obs(self.advance()?))
    }

    fn advance(&mut self) -> Result<Observation> {
        let session = self.session.as_mut().expect("episode running");
        let t = SimTime(self.interval.0 * (self.step + 1));
        session.run_to(t)?;
        let c = session.counters();
        let p = self.prev;
        let secs = self.interval.as_secs_f64();
        let frac = |a: u64, b: u64| if b == 0 { 0.0 } else { (a as f64 / b as f64).min(1.0) };
        let rx = (c.rx_bytes - p.rx_bytes) as f64 * 8.0 / secs;
        let goodput = (session.take_window_goodput() as f64 * 8.0 / secs).min(rx);
        let obs = Observation {
            episode_id: self.id,
            step_id: self.step,
            sim_time_s: t.as_secs_f64(),
            rtt_ms: session.rtt().map_or(0.0, |r| r.as_millis_f64()),
            plr_window: frac(
                c.playout_lost - p.playout_lost,
                c.playout_expected - p.playout_expected,
            ),
            plr_global: frac(c.playout_lost, c.playout_expected),
            jitter_ms: session.jitter_us() / 1000.0,
            retransmission_rate: frac(c.rtx_sent - p.rtx_sent, c.media_sent - p.media_sent),
            goodput_bps: goodput,
            rx_rate_bps: rx,
            current_target_bps: session.target_bps(),
            warnings: std::mem::take(&mut self.warnings),
        };
        self.prev = c;
        self.step += 1;
        Ok(obs)
    }
}

#[derive(Debug, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum ClientMsg {
    Reset {
        scenario: Option<String>,
        seed: Option<u64>,
        duration_s: Option<f64>,
        decision_interval_s: Option<f64>,
    },
    Act {
        episode_id: u64,
        step_id: u64,
        target_bitrate_bps: Value,
    },
}

#[derive(Debug, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum ServerMsg<'a> {
    Hello {
        v: u32,
        scenario: &'a str,
        decision_interval_s: f64,
        timeout_s: f64,
    },
    Obs(&'a Observation),
    End {
        episode_id: u64,
        steps: u64,
        summary: &'a RunSummary,
    },
    Error {
        message: String,
    },
}

fn send(out: &mut impl Write, msg: &ServerMsg) -> Result<()> {
    let mut line = serde_json::to_string(msg)?;
    line.push('\n');
    out.write_all(line.as_bytes())?;
    out.flush()?;
    Ok(())
}

/// Defaults for episodes on one connection.
#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub scenario: Scenario,
    pub seed: u64,
    pub duration_s: f64,
    pub decision_interval_s: f64,
    pub timeout: Duration,
}

/// Listens on `addr`, serves one agent connection, and returns the report
/// of the last finished episode.
pub fn serve(addr: &str, sc: &Scenario, opts: &RunOptions) -> Result<RunReport> {
    let listener = TcpListener::bind(addr)?;
    info!(addr = %listener.local_addr()?, "bridge listening");
    let sc = opts.apply(sc);
    let cfg = ServerConfig {
        seed: sc.seed,
        duration_s: sc.duration_s,
        decision_interval_s: 1.0,
        timeout: DEFAULT_TIMEOUT,
        scenario: sc,
    };
    let (stream, peer) = listener.accept()?;
    info!(%peer, "agent connected");
    serve_connection(stream, &cfg)?
        .ok_or_else(|| Error::Protocol("connection closed before any episode ended".into()))
}

/// Runs the protocol on an accepted stream until the peer disconnects.
pub fn serve_connection(stream: TcpStream, cfg: &ServerConfig) -> Result<Option<RunReport>> {
    stream.set_read_timeout(Some(cfg.timeout))?;
    let mut out = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    send(
        &mut out,
        &ServerMsg::Hello {
            v: PROTOCOL_VERSION,
            scenario: &cfg.scenario.name,
            decision_interval_s: cfg.decision_interval_s,
            timeout_s: cfg.timeout.as_secs_f64(),
        },
    )?;

    let mut episode: Option<Episode> = None;
    let mut next_id = 0;
    let mut last = None;
    let mut line = String::new();
    loop {
        line.clear();
        let msg = match reader.read_line(&mut line) {
            Ok(0) => return Ok(last),
            Ok(_) => serde_json::from_str::<ClientMsg>(line.trim()),
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                // no answer in time: keep the bitrate and move on
                if let Some(ep) = episode.as_mut() {
                    warn!(step = ep.pending_step(), "action timeout");
                    match ep.step(Action::Timeout)? {
                        Step::Obs(o) => send(&mut out, &ServerMsg::Obs(&o))?,
                        Step::End(r) => {
                            finish(&mut out, episode.take().expect("running"), &r)?;
                            last = Some(*r);
                        }
                    }
                }
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let msg = match msg {
            Ok(m) => m,
            Err(e) => {
                send(&mut out, &ServerMsg::Error { message: format!("bad message: {e}") })?;
                continue;
            }
        };
        match msg {
            ClientMsg::Reset {
                scenario,
                seed,
                duration_s,
                decision_interval_s,
            } => {
                let ec = EpisodeConfig {
                    scenario: scenario.clone().unwrap_or_else(|| cfg.scenario.name.clone()),
                    seed: seed.unwrap_or(cfg.seed),
                    duration_s: duration_s.unwrap_or(cfg.duration_s),
                    decision_interval_s: decision_interval_s.unwrap_or(cfg.decision_interval_s),
                };
                let res = match scenario {
                    Some(_) => Episode::reset(next_id, &ec),
                    None => Episode::reset_with(next_id, &cfg.scenario, &ec),
                };
                match res {
                    Ok((ep, obs)) => {
                        debug!(episode = next_id, ?ec, "reset");
                        next_id += 1;
                        send(&mut out, &ServerMsg::Obs(&obs))?;
                        episode = Some(ep);
                    }
                    Err(e) => send(&mut out, &ServerMsg::Error { message: e.to_string() })?,
                }
            }
            ClientMsg::Act {
                episode_id,
                step_id,
                target_bitrate_bps,
            } => {
                let Some(ep) = episode.as_mut() else {
                    send(&mut out, &ServerMsg::Error { message: "no episode running; send reset".into() })?;
                    continue;
                };
                if episode_id != ep.id() || step_id != ep.pending_step() {
                    let message = format!(
                        "act for episode {episode_id} step {step_id}, pending is episode {} step {}",
                        ep.id(),
                        ep.pending_step()
                    );
                    send(&mut out, &ServerMsg::Error { message })?;
                    continue;
                }
                match ep.step(Action::Rate(target_bitrate_bps))? {
                    Step::Obs(o) => send(&mut out, &ServerMsg::Obs(&o))?,
                    Step::End(r) => {
                        finish(&mut out, episode.take().expect("running"), &r)?;
                        last = Some(*r);
                    }
                }
            }
        }
    }
}

fn finish(out: &mut impl Write, ep: Episode, report: &RunReport) -> Result<()> {
    send(
        out,
        &ServerMsg::End {
            episode_id: ep.id(),
            steps: ep.steps(),
            summary: &report.summary,
        },
    )
}
