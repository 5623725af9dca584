use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use rtcnetlab::bridge::{self, EpisodeConfig, Step};
use rtcnetlab::network::TransportMode;
use rtcnetlab::rate_control::ControllerKind;
use rtcnetlab::scenario::{self as sc, Scenario};
use rtcnetlab::session::{self, RunOptions, RunReport};

create_exception!(rtcnetlab, SimError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    SimError::new_err(e.to_string())
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    json_to_py(py, &serde_json::to_string(v).map_err(err)?)
}

/// Preset name, path to a JSON file, or an inline JSON document.
fn load_scenario(spec: &str) -> PyResult<Scenario> {
    if spec.trim_start().starts_with('{') {
        Scenario::from_json(spec).map_err(err)
    } else {
        sc::load(spec).map_err(err)
    }
}

/// Finished run: summary, per-second rows and the effective scenario.
#[pyclass(frozen)]
struct Report {
    inner: RunReport,
}

#[pymethods]
impl Report {
    fn summary<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.summary)
    }

    fn rows<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.rows)
    }

    fn csv(&self) -> String {
        self.inner.csv()
    }

    fn summary_json(&self) -> String {
        self.inner.summary_json()
    }

    fn config_echo(&self) -> String {
        self.inner.config_echo.clone()
    }

    fn __repr__(&self) -> String {
        let s = &self.inner.summary;
        format!(
            "Report(scenario={:?}, seed={}, controller={:?}, rx_total_mbytes={:.2}, playout_plr_pct={:.3})",
            s.scenario, s.seed, s.controller, s.rx_total_mbytes, s.playout_plr_pct
        )
    }
}

#[pyfunction]
#[pyo3(signature = (scenario, seed=None, duration_s=None, controller=None, transport=None))]
fn run(
    py: Python<'_>,
    scenario: &str,
    seed: Option<u64>,
    duration_s: Option<f64>,
    controller: Option<&str>,
    transport: Option<&str>,
) -> PyResult<Report> {
    let s = load_scenario(scenario)?;
    let controller = controller
        .map(|c| c.parse::<ControllerKind>())
        .transpose()
        .map_err(err)?;
    let transport = match transport {
        None => None,
        Some("udp") => Some(TransportMode::Udp),
        Some("tcp") => Some(TransportMode::Tcp),
        Some(other) => return Err(err(format!("unknown transport `{other}` (udp, tcp)"))),
    };
    let opts = RunOptions {
        seed,
        duration_s,
        controller,
        transport,
    };
    let inner = py.detach(|| session::run(&s, &opts)).map_err(err)?;
    Ok(Report { inner })
}

#[pyfunction]
fn presets() -> Vec<&'static str> {
    sc::PRESETS.to_vec()
}

#[pyfunction]
fn preset_json(name: &str) -> PyResult<String> {
    sc::preset(name)
        .map(|s| s.to_json())
        .ok_or_else(|| err(format!("unknown preset `{name}`")))
}

/// Lock-step episode driven by an external bitrate decision each interval.
#[pyclass(unsendable)]
struct Episode {
    scenario: Scenario,
    cfg: EpisodeConfig,
    next_id: u64,
    inner: Option<bridge::Episode>,
    last: Option<RunReport>,
}

#[pymethods]
impl Episode {
    #[new]
    #[pyo3(signature = (scenario, seed=1, duration_s=None, decision_interval_s=1.0))]
    fn new(scenario: &str, seed: u64, duration_s: Option<f64>, decision_interval_s: f64) -> PyResult<Self> {
        let s = load_scenario(scenario)?;
        let cfg = EpisodeConfig {
            scenario: s.name.clone(),
            seed,
            duration_s: duration_s.unwrap_or(s.duration_s),
            decision_interval_s,
        };
        cfg.steps().map_err(err)?;
        Ok(Self {
            scenario: s,
            cfg,
            next_id: 0,
            inner: None,
            last: None,
        })
    }

    /// Starts a fresh episode and returns the first observation.
    #[pyo3(signature = (seed=None))]
    fn reset<'py>(&mut self, py: Python<'py>, seed: Option<u64>) -> PyResult<Bound<'py, PyAny>> {
        if let Some(s) = seed {
            self.cfg.seed = s;
        }
        let (ep, obs) = bridge::Episode::reset_with(self.next_id, &self.scenario, &self.cfg).map_err(err)?;
        self.next_id += 1;
        self.inner = Some(ep);
        self.last = None;
        to_py(py, &obs)
    }

    /// Applies a bitrate (any JSON-compatible value; `None` keeps the current
    /// rate) and returns `(observation, done)`. The observation is `None` once done.
    #[pyo3(signature = (target_bitrate_bps=None))]
    fn step<'py>(
        &mut self,
        py: Python<'py>,
        target_bitrate_bps: Option<Bound<'py, PyAny>>,
    ) -> PyResult<(Option<Bound<'py, PyAny>>, bool)> {
        let ep = self.inner.as_mut().ok_or_else(|| err("no episode running; call reset()"))?;
        let action = match target_bitrate_bps {
            None => bridge::Action::Timeout,
            Some(v) => {
                let text: String = py.import("json")?.call_method1("dumps", (v,))?.extract()?;
                bridge::Action::Rate(serde_json::from_str(&text).map_err(err)?)
            }
        };
        match ep.step(action).map_err(err)? {
            Step::Obs(o) => Ok((Some(to_py(py, &o)?), false)),
            Step::End(r) => {
                self.inner = None;
                self.last = Some(*r);
                Ok((None, true))
            }
        }
    }

    #[getter]
    fn steps(&self) -> PyResult<u64> {
        self.cfg.steps().map_err(err)
    }

    #[getter]
    fn current_target_bps(&self) -> Option<f64> {
        self.inner.as_ref().map(|e| e.current_target())
    }

    /// Rates the episode actually switched to, start rate first.
    fn applied_rates(&self) -> Vec<f64> {
        self.inner.as_ref().map(|e| e.applied_rates().to_vec()).unwrap_or_default()
    }

    /// Report of the last finished episode.
    fn report(&self) -> Option<Report> {
        self.last.clone().map(|inner| Report { inner })
    }
}

#[pymodule]
#[pyo3(name = "rtcnetlab")]
fn init(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SimError", m.py().get_type::<SimError>())?;
    m.add("PROTOCOL_VERSION", bridge::PROTOCOL_VERSION)?;
    m.add("DEAD_BAND", bridge::DEAD_BAND)?;
    m.add_class::<Report>()?;
    m.add_class::<Episode>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    m.add_function(wrap_pyfunction!(preset_json, m)?)?;
    Ok(())
}
