use std::collections::BTreeMap;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use signalrho::inversion::{self, InversionParams, SweepSpec};
use signalrho::jump::{ChannelSchedule, FeedbackSchedule};
use signalrho::model::jump_instruments;
use signalrho::{CMatrix, Jump, QuantumModel};

use crate::CliError;

/// A matrix as rows of `[re, im]` pairs.
pub type MatrixSpec = Vec<Vec<[f64; 2]>>;

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub dimension: Option<usize>,
    #[serde(default)]
    pub matrices: BTreeMap<String, MatrixSpec>,
    pub model: Option<ModelSpec>,
    /// Segments per channel label, keyed by the label as a string.
    pub feedback: Option<BTreeMap<String, Vec<SegmentSpec>>>,
    pub inversion: Option<InversionSpec>,
    pub signal: Option<SignalSpec>,
    #[serde(default)]
    pub run: RunSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub hamiltonian: String,
    pub jumps: Vec<JumpSpec>,
    /// Defaults to every jump label.
    pub monitored: Option<Vec<i64>>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct JumpSpec {
    pub label: i64,
    pub operator: String,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentSpec {
    pub start: f64,
    pub hamiltonian: Option<String>,
    pub jumps: Option<Vec<JumpSpec>>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct InversionSpec {
    pub gamma: f64,
    pub nbar: f64,
    pub lambda: f64,
    #[serde(default)]
    pub tau0: f64,
    /// Defaults to the optimal drive duration.
    pub tau1: Option<f64>,
    #[serde(default)]
    pub detuning: f64,
    pub sweep: Option<SweepJson>,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SweepJson {
    pub gamma: Option<f64>,
    pub ratios: Option<Vec<f64>>,
    pub nbar: Option<Vec<f64>>,
    pub gamma_tau0: Option<Vec<f64>>,
    pub ratios_d: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SignalSpec {
    LastJump { initial: i64 },
}

#[derive(Clone, Copy, Debug, Default, Deserialize, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    #[default]
    Omega,
    Coupled,
    Combined,
    Discrete,
}

#[derive(Clone, Copy, Debug, Default, Deserialize, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    #[default]
    Coupled,
    TauGrid,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub mode: Option<String>,
    pub route: Option<Route>,
    pub engine: Option<Engine>,
    pub t_final: Option<f64>,
    pub dt: Option<f64>,
    pub bins: Option<usize>,
    pub trajectories: Option<usize>,
    pub seed: Option<u64>,
    pub sample_every: Option<usize>,
    pub window: Option<[f64; 2]>,
    pub initial_state: Option<String>,
    pub initial_channel: Option<i64>,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: Option<String>,
    /// Observable name → matrix name.
    #[serde(default)]
    pub observables: BTreeMap<String, String>,
}

pub const MODES: [&str; 5] = ["validate", "steady", "evolve", "trajectories", "inversion"];

/// The input document: a scenario, or a run manifest that embeds one.
pub struct Input {
    pub scenario: Scenario,
    pub raw: Value,
    pub manifest_flags: Option<Value>,
}

pub fn read_input(path: &Path) -> Result<Input, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| {
        CliError::Config(format!("{}:{}:{}: {e}", path.display(), e.line(), e.column()))
    })?;
    let (raw, manifest_flags) = match value.get("config_hash").and(value.get("scenario")) {
        Some(inner) => (inner.clone(), value.get("flags").cloned()),
        None => (value, None),
    };
    let scenario: Scenario = serde_json::from_value(raw.clone())
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(Input {
        scenario,
        raw,
        manifest_flags,
    })
}

/// Everything the engines need, with all references resolved.
pub struct Built {
    pub dim: usize,
    pub schedule: FeedbackSchedule,
    pub observables: Vec<(String, CMatrix)>,
    pub initial_state: CMatrix,
    pub initial_channel: i64,
}

fn config(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl Scenario {
    fn matrix(&self, name: &str, dim: usize, role: &str) -> Result<CMatrix, CliError> {
        let rows = self
            .matrices
            .get(name)
            .ok_or_else(|| config(format!("{role} refers to undefined matrix \"{name}\"")))?;
        if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
            return Err(config(format!("matrix \"{name}\" must be {dim}x{dim}")));
        }
        let m = CMatrix::from_fn(dim, dim, |i, j| Complex64::new(rows[i][j][0], rows[i][j][1]));
        if m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(config(format!("matrix \"{name}\" has non-finite entries")));
        }
        Ok(m)
    }

    fn jumps(&self, specs: &[JumpSpec], dim: usize, role: &str) -> Result<Vec<Jump>, CliError> {
        specs
            .iter()
            .map(|j| Ok(Jump::new(j.label, self.matrix(&j.operator, dim, role)?)))
            .collect()
    }

    pub fn inversion_params(&self) -> Result<Option<InversionParams>, CliError> {
        let Some(inv) = &self.inversion else {
            return Ok(None);
        };
        let p = match inv.tau1 {
            Some(t1) => InversionParams::new(inv.gamma, inv.nbar, inv.lambda, inv.tau0, t1),
            None => InversionParams::optimal(inv.gamma, inv.nbar, inv.lambda, inv.tau0),
        }
        .and_then(|p| p.with_detuning(inv.detuning))
        .map_err(|e| config(format!("inversion parameters: {e}")))?;
        Ok(Some(p))
    }

    pub fn sweep_spec(&self) -> SweepSpec {
        let mut spec = SweepSpec::default();
        if let Some(s) = self.inversion.as_ref().and_then(|i| i.sweep.clone()) {
            if let Some(g) = s.gamma {
                spec.gamma = g;
            }
            if let Some(v) = s.ratios {
                spec.ratios = v;
            }
            if let Some(v) = s.nbar {
                spec.nbar = v;
            }
            if let Some(v) = s.gamma_tau0 {
                spec.gamma_tau0 = v;
            }
            if let Some(v) = s.ratios_d {
                spec.ratios_d = v;
            }
        }
        spec
    }

    fn explicit_schedule(&self, dim: usize) -> Result<FeedbackSchedule, CliError> {
        let spec = self
            .model
            .as_ref()
            .ok_or_else(|| config("scenario needs either \"model\" or \"inversion\""))?;
        let h = self.matrix(&spec.hamiltonian, dim, "model.hamiltonian")?;
        let jumps = self.jumps(&spec.jumps, dim, "model.jumps")?;
        let monitored = spec
            .monitored
            .clone()
            .unwrap_or_else(|| spec.jumps.iter().map(|j| j.label).collect());
        let build = |h: CMatrix, jumps: Vec<Jump>| {
            QuantumModel::new(h, jumps, monitored.iter().copied().collect::<std::collections::BTreeSet<i64>>())
                .map_err(|e| config(format!("model: {e}")))
        };
        let base = build(h.clone(), jumps.clone())?;
        let feedback = self.feedback.clone().unwrap_or_default();
        let mut channels = BTreeMap::new();
        for (key, segs) in &feedback {
            let k: i64 = key
                .parse()
                .map_err(|_| config(format!("feedback key \"{key}\" is not an integer channel label")))?;
            if !monitored.contains(&k) {
                return Err(config(format!("feedback given for unmonitored channel {k}")));
            }
            let mut pieces = Vec::with_capacity(segs.len());
            for (i, s) in segs.iter().enumerate() {
                let role = format!("feedback[{key}][{i}]");
                let hs = match &s.hamiltonian {
                    Some(n) => self.matrix(n, dim, &role)?,
                    None => h.clone(),
                };
                let js = match &s.jumps {
                    Some(j) => self.jumps(j, dim, &role)?,
                    None => jumps.clone(),
                };
                pieces.push((s.start, build(hs, js)?));
            }
            channels.insert(
                k,
                ChannelSchedule::new(pieces).map_err(|e| config(format!("feedback[{key}]: {e}")))?,
            );
        }
        for &k in &monitored {
            channels
                .entry(k)
                .or_insert_with(|| ChannelSchedule::constant(base.clone()));
        }
        FeedbackSchedule::new(channels).map_err(|e| config(format!("feedback schedule: {e}")))
    }

    /// Resolve every reference and run the model-level validations.
    pub fn build(&self) -> Result<Built, CliError> {
        if let Some(mode) = &self.run.mode {
            if !MODES.contains(&mode.as_str()) {
                return Err(config(format!("run.mode \"{mode}\" is not one of {MODES:?}")));
            }
        }
        let params = self.inversion_params()?;
        if params.is_some() && (self.model.is_some() || self.feedback.is_some()) {
            return Err(config("give either \"inversion\" or \"model\"/\"feedback\", not both"));
        }
        let dim = match (self.dimension, params.is_some()) {
            (Some(d), true) if d != 2 => return Err(config("the inversion protocol is a qubit (dimension 2)")),
            (Some(0), _) => return Err(config("dimension must be positive")),
            (Some(d), _) => d,
            (None, true) => 2,
            (None, false) => return Err(config("\"dimension\" is required")),
        };
        let schedule = match &params {
            Some(p) => inversion::build_schedule(p).map_err(|e| config(e.to_string()))?,
            None => self.explicit_schedule(dim)?,
        };
        let channels = schedule.channels();
        if let Some(dt) = self.run.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(config(format!("run.dt must be positive, got {dt}")));
            }
        }
        if let Some(t) = self.run.t_final {
            if !(t > 0.0 && t.is_finite()) {
                return Err(config(format!("run.t_final must be positive, got {t}")));
            }
        }
        if let Some([a, b]) = self.run.window {
            if !(a >= 0.0 && b > a) {
                return Err(config(format!("run.window [{a}, {b}] must satisfy 0 ≤ t0 < t1")));
            }
        }
        let observables = self
            .output
            .observables
            .iter()
            .map(|(name, m)| Ok((name.clone(), self.matrix(m, dim, &format!("output.observables.{name}"))?)))
            .collect::<Result<Vec<_>, CliError>>()?;
        let initial_state = match &self.run.initial_state {
            Some(n) => {
                let rho = self.matrix(n, dim, "run.initial_state")?;
                let tr = signalrho::linops::trace(&rho);
                if (tr.re - 1.0).abs() > 1e-9 || tr.im.abs() > 1e-9 || signalrho::linops::min_eigenvalue(&rho) < -1e-9 {
                    return Err(config(format!("run.initial_state \"{n}\" is not a density matrix")));
                }
                rho
            }
            None => signalrho::linops::ket_bra(dim, 0, 0),
        };
        let signal_initial = self.signal.as_ref().map(|SignalSpec::LastJump { initial }| *initial);
        let initial_channel = self.run.initial_channel.or(signal_initial).unwrap_or(channels[0]);
        if !channels.contains(&initial_channel) {
            return Err(config(format!(
                "initial channel {initial_channel} is not one of the monitored channels {channels:?}"
            )));
        }
        if let Some(dt) = self.run.dt {
            for k in &channels {
                for seg in schedule.channel(*k).map_err(|e| config(e.to_string()))?.segments() {
                    jump_instruments(&seg.model, dt).map_err(|e| config(format!("run.dt: {e}")))?;
                }
            }
        }
        Ok(Built {
            dim,
            schedule,
            observables,
            initial_state,
            initial_channel,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn parse(v: Value) -> Result<Scenario, serde_json::Error> {
        serde_json::from_value(v)
    }

    fn qubit() -> Value {
        json!({
            "dimension": 2,
            "matrices": {
                "H": [[[0.5, 0.0], [0.0, 0.0]], [[0.0, 0.0], [-0.5, 0.0]]],
                "L": [[[0.0, 0.0], [1.0, 0.0]], [[0.0, 0.0], [0.0, 0.0]]]
            },
            "model": {"hamiltonian": "H", "jumps": [{"label": -1, "operator": "L"}]}
        })
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut v = qubit();
        v["model"]["hamiltonain"] = json!("H");
        assert!(parse(v).is_err());
    }

    #[test]
    fn builds_single_channel_model() {
        let b = parse(qubit()).unwrap().build().unwrap();
        assert_eq!(b.dim, 2);
        assert_eq!(b.schedule.channels(), vec![-1]);
        assert_eq!(b.initial_channel, -1);
        assert!(b.schedule.is_tau_independent());
    }

    #[test]
    fn wrong_shape_is_named() {
        let mut v = qubit();
        v["matrices"]["L"] = json!([[[0.0, 0.0]]]);
        let err = parse(v).unwrap().build().err().unwrap().to_string();
        assert!(err.contains("\"L\"") && err.contains("2x2"), "{err}");
    }

    #[test]
    fn inversion_and_model_are_exclusive() {
        let mut v = qubit();
        v["inversion"] = json!({"gamma": 1.0, "nbar": 0.2, "lambda": 1.0, "tau0": 0.2});
        assert!(parse(v).unwrap().build().is_err());
    }

    #[test]
    fn non_state_initial_is_rejected() {
        let mut v = qubit();
        v["run"] = json!({"initial_state": "H"});
        let err = parse(v).unwrap().build().err().unwrap().to_string();
        assert!(err.contains("density matrix"), "{err}");
    }
}
