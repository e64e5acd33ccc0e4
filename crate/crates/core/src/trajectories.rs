//! Monte Carlo unraveling with feedback: outcomes are drawn step by step from
//! the signal-dependent instruments, the conditional state is renormalized and
//! the signal updated, exactly as in the deterministic engines.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::discrete::{InstrumentFamily, ResolvedState};
use crate::error::{Error, Result};
use crate::linops::{self, CMatrix, ZERO};
use crate::model::NO_JUMP;
use crate::signals::{Signal, SignalRule};

/// Largest allowed jump probability in a single step.
pub const JUMP_PROBABILITY_GUARD: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct SimulationConfig {
    pub t_final: f64,
    pub dt: f64,
    /// Record observables every this many steps (and at `t = 0`).
    pub sample_every: usize,
    pub observables: Vec<(String, CMatrix)>,
}

impl SimulationConfig {
    pub fn new(t_final: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::StepSize {
                dt,
                reason: "time step must be positive and finite".into(),
            });
        }
        if !(t_final >= 0.0 && t_final.is_finite()) {
            return Err(Error::Config(format!("final time must be ≥ 0, got {t_final}")));
        }
        Ok(SimulationConfig {
            t_final,
            dt,
            sample_every: 1,
            observables: Vec::new(),
        })
    }

    pub fn sample_every(mut self, steps: usize) -> Self {
        self.sample_every = steps.max(1);
        self
    }

    pub fn observable(mut self, name: impl Into<String>, op: CMatrix) -> Self {
        self.observables.push((name.into(), op));
        self
    }

    pub fn steps(&self) -> usize {
        (self.t_final / self.dt).round() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JumpEvent {
    pub time: f64,
    pub channel: i64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub time: f64,
    pub signal: Signal,
    /// `Tr[O ρ_c]` for each configured observable, in order.
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    pub seed: u64,
    pub stream: u64,
    pub dt: f64,
    pub steps: usize,
    pub observables: Arc<Vec<String>>,
    pub events: Vec<JumpEvent>,
    pub samples: Vec<Sample>,
    pub final_signal: Signal,
    pub final_state: CMatrix,
}

impl TrajectoryRecord {
    pub fn observable_index(&self, name: &str) -> Option<usize> {
        self.observables.iter().position(|n| n == name)
    }

    pub fn first_jump(&self) -> Option<f64> {
        self.events.first().map(|e| e.time)
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn expectation(op: &CMatrix, rho: &CMatrix) -> f64 {
    let d = rho.nrows();
    let mut s = ZERO;
    for i in 0..d {
        for j in 0..d {
            s += op[(i, j)] * rho[(j, i)];
        }
    }
    s.re
}

/// One trajectory using stream `stream` of the master `seed`.
pub fn simulate<F, R>(
    family: &F,
    rule: &R,
    rho0: &CMatrix,
    config: &SimulationConfig,
    seed: u64,
    stream: u64,
) -> Result<TrajectoryRecord>
where
    F: InstrumentFamily + ?Sized,
    R: SignalRule + ?Sized,
{
    let names = Arc::new(config.observables.iter().map(|(n, _)| n.clone()).collect());
    simulate_with_names(family, rule, rho0, config, seed, stream, names)
}

fn simulate_with_names<F, R>(
    family: &F,
    rule: &R,
    rho0: &CMatrix,
    config: &SimulationConfig,
    seed: u64,
    stream: u64,
    names: Arc<Vec<String>>,
) -> Result<TrajectoryRecord>
where
    F: InstrumentFamily + ?Sized,
    R: SignalRule + ?Sized,
{
    let d = family.dim();
    if rho0.nrows() != d || rho0.ncols() != d {
        return Err(Error::Dimension(format!(
            "initial state is {}x{} but the instruments act on dimension {d}",
            rho0.nrows(),
            rho0.ncols()
        )));
    }
    let mut rng = rng_for(seed, stream);
    let steps = config.steps();
    let mut rho = rho0 / linops::trace(rho0);
    let mut buf = CMatrix::zeros(d, d);
    let mut signal = rule.initial();
    let mut events = Vec::new();
    let mut samples = Vec::with_capacity(steps / config.sample_every + 2);
    let sample = |t: f64, signal: Signal, rho: &CMatrix| Sample {
        time: t,
        signal,
        values: config.observables.iter().map(|(_, o)| expectation(o, rho)).collect(),
    };
    samples.push(sample(0.0, signal, &rho));
    for n in 0..steps {
        let set = family.instruments(signal).ok_or_else(|| {
            Error::Config(format!("no instrument defined at signal {signal}"))
        })?;
        let u: f64 = rng.random();
        let mut cumulative = 0.0;
        let mut chosen = None;
        let mut p_nojump = None;
        for (i, map) in set.maps().iter().enumerate() {
            buf.fill(ZERO);
            map.apply_add(&rho, &mut buf);
            let p = linops::trace(&buf).re.max(0.0);
            if set.outcomes()[i].label == NO_JUMP {
                p_nojump = Some(p);
            }
            cumulative += p;
            if u < cumulative {
                chosen = Some((i, p));
                break;
            }
        }
        let (i, p) = match chosen {
            Some(x) => x,
            None => {
                // Round-off left `u` beyond the total; take the last positive outcome.
                let i = set.len() - 1;
                buf.fill(ZERO);
                set.map(i).apply_add(&rho, &mut buf);
                (i, linops::trace(&buf).re)
            }
        };
        if let Some(p0) = p_nojump {
            if 1.0 - p0 >= JUMP_PROBABILITY_GUARD {
                return Err(Error::StepSize {
                    dt: config.dt,
                    reason: format!(
                        "jump probability {:.3} per step at t = {:.6} exceeds {JUMP_PROBABILITY_GUARD}",
                        1.0 - p0,
                        n as f64 * config.dt
                    ),
                });
            }
        }
        if !(p > 0.0) {
            return Err(Error::NonFinite(format!("outcome probability {p} at step {n}")));
        }
        let outcome = set.outcomes()[i];
        buf.unscale_mut(p);
        std::mem::swap(&mut rho, &mut buf);
        signal = rule.update(&outcome, signal);
        let t = (n + 1) as f64 * config.dt;
        if outcome.label != NO_JUMP {
            events.push(JumpEvent {
                time: t,
                channel: outcome.label,
            });
        }
        if (n + 1) % config.sample_every == 0 {
            samples.push(sample(t, signal, &rho));
        }
    }
    Ok(TrajectoryRecord {
        seed,
        stream,
        dt: config.dt,
        steps,
        observables: names,
        events,
        samples,
        final_signal: signal,
        final_state: rho,
    })
}

/// `n` trajectories on streams `0..n`, returned in stream order.
pub fn run_ensemble<F, R>(
    family: &F,
    rule: &R,
    rho0: &CMatrix,
    config: &SimulationConfig,
    seed: u64,
    n: usize,
) -> Result<Vec<TrajectoryRecord>>
where
    F: InstrumentFamily + ?Sized,
    R: SignalRule + ?Sized,
{
    let names: Arc<Vec<String>> = Arc::new(config.observables.iter().map(|(n, _)| n.clone()).collect());
    (0..n as u64)
        .into_par_iter()
        .map(|i| simulate_with_names(family, rule, rho0, config, seed, i, names.clone()))
        .collect()
}

/// Mean and standard error of a scalar across trajectories.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Estimate {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let stderr = if xs.len() > 1 {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            f64::NAN
        };
        Estimate { mean, stderr }
    }

    /// `|mean − target| ≤ k·stderr`.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.stderr
    }
}

fn check_grid(records: &[TrajectoryRecord]) -> Result<()> {
    let first = records
        .first()
        .ok_or_else(|| Error::Aggregation("no trajectory records".into()))?;
    for r in records {
        if r.dt != first.dt || r.steps != first.steps || r.samples.len() != first.samples.len() {
            return Err(Error::Aggregation(format!(
                "records use different grids (dt {} vs {}, {} vs {} steps)",
                r.dt, first.dt, r.steps, first.steps
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct EnsembleResolved {
    pub state: ResolvedState,
    /// Entrywise standard errors of the real and imaginary parts.
    pub stderr_re: BTreeMap<Signal, DMatrix<f64>>,
    pub stderr_im: BTreeMap<Signal, DMatrix<f64>>,
    /// Standard error of `Tr ϱ(y)`.
    pub stderr_trace: BTreeMap<Signal, f64>,
}

/// `ϱ(y) ≈ (1/M) Σ_m ρ_m δ_{y, y_m}` from the final states of the records.
pub fn ensemble_resolved(records: &[TrajectoryRecord]) -> Result<EnsembleResolved> {
    check_grid(records)?;
    let d = records[0].final_state.nrows();
    let m = records.len() as f64;
    let mut sum: BTreeMap<Signal, CMatrix> = BTreeMap::new();
    let mut sq_re: BTreeMap<Signal, DMatrix<f64>> = BTreeMap::new();
    let mut sq_im: BTreeMap<Signal, DMatrix<f64>> = BTreeMap::new();
    let mut counts: BTreeMap<Signal, f64> = BTreeMap::new();
    for r in records {
        let y = r.final_signal;
        *sum.entry(y).or_insert_with(|| CMatrix::zeros(d, d)) += &r.final_state;
        *sq_re.entry(y).or_insert_with(|| DMatrix::zeros(d, d)) += r.final_state.map(|z| z.re * z.re);
        *sq_im.entry(y).or_insert_with(|| DMatrix::zeros(d, d)) += r.final_state.map(|z| z.im * z.im);
        *counts.entry(y).or_insert(0.0) += 1.0;
    }
    let se = |mean: f64, sq_mean: f64| {
        if m > 1.0 {
            ((sq_mean - mean * mean).max(0.0) * m / (m - 1.0) / m).sqrt()
        } else {
            f64::NAN
        }
    };
    let mut blocks = BTreeMap::new();
    let mut stderr_re = BTreeMap::new();
    let mut stderr_im = BTreeMap::new();
    let mut stderr_trace = BTreeMap::new();
    for (y, s) in sum {
        let mean = s / linops::c(m, 0.0);
        let re = DMatrix::from_fn(d, d, |i, j| se(mean[(i, j)].re, sq_re[&y][(i, j)] / m));
        let im = DMatrix::from_fn(d, d, |i, j| se(mean[(i, j)].im, sq_im[&y][(i, j)] / m));
        let p = counts[&y] / m;
        stderr_trace.insert(y, se(p, p));
        stderr_re.insert(y, re);
        stderr_im.insert(y, im);
        blocks.insert(y, mean);
    }
    Ok(EnsembleResolved {
        state: ResolvedState::from_blocks(d, blocks, records[0].steps),
        stderr_re,
        stderr_im,
        stderr_trace,
    })
}

/// Mean ± standard error of an observable at every sample time.
pub fn ensemble_observable(records: &[TrajectoryRecord], name: &str) -> Result<Vec<(f64, Estimate)>> {
    check_grid(records)?;
    let idx = records[0]
        .observable_index(name)
        .ok_or_else(|| Error::Aggregation(format!("observable {name:?} was not recorded")))?;
    let mut out = Vec::with_capacity(records[0].samples.len());
    let mut xs = vec![0.0; records.len()];
    for (s, sample) in records[0].samples.iter().enumerate() {
        for (x, r) in xs.iter_mut().zip(records) {
            *x = r.samples[s].values[idx];
        }
        out.push((sample.time, Estimate::from_samples(&xs)));
    }
    Ok(out)
}

fn window_samples(r: &TrajectoryRecord, t0: f64, t1: f64) -> impl Iterator<Item = &Sample> {
    r.samples
        .iter()
        .filter(move |s| s.time >= t0 - 1e-12 && s.time <= t1 + 1e-12)
}

/// Per-trajectory time average over `[t0, t1]`, then mean ± stderr across
/// trajectories.
pub fn window_average(records: &[TrajectoryRecord], name: &str, t0: f64, t1: f64) -> Result<Estimate> {
    check_grid(records)?;
    let idx = records[0]
        .observable_index(name)
        .ok_or_else(|| Error::Aggregation(format!("observable {name:?} was not recorded")))?;
    let xs: Vec<f64> = records
        .iter()
        .map(|r| {
            let (s, n) = window_samples(r, t0, t1).fold((0.0, 0usize), |(s, n), x| (s + x.values[idx], n + 1));
            s / n as f64
        })
        .collect();
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::Aggregation(format!("no samples in window [{t0}, {t1}]")));
    }
    Ok(Estimate::from_samples(&xs))
}

/// Fraction of window samples at which `key(signal) == k`, averaged per
/// trajectory, for every key value seen.
pub fn window_signal_frequencies(
    records: &[TrajectoryRecord],
    t0: f64,
    t1: f64,
    key: impl Fn(Signal) -> i64,
) -> Result<BTreeMap<i64, Estimate>> {
    check_grid(records)?;
    let mut per: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
    for (m, r) in records.iter().enumerate() {
        let mut counts: BTreeMap<i64, f64> = BTreeMap::new();
        let mut n = 0.0;
        for s in window_samples(r, t0, t1) {
            *counts.entry(key(s.signal)).or_insert(0.0) += 1.0;
            n += 1.0;
        }
        if n == 0.0 {
            return Err(Error::Aggregation(format!("no samples in window [{t0}, {t1}]")));
        }
        for (k, c) in counts {
            per.entry(k).or_insert_with(|| vec![0.0; records.len()])[m] = c / n;
        }
    }
    Ok(per
        .into_iter()
        .map(|(k, xs)| (k, Estimate::from_samples(&xs)))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    /// Asymptotic 1% critical value `1.628/√n`.
    pub critical: f64,
    pub passed: bool,
}

/// One-sample Kolmogorov–Smirnov test of `samples` against `Exp(rate)`.
pub fn ks_exponential(samples: &[f64], rate: f64) -> Result<KsResult> {
    if samples.is_empty() {
        return Err(Error::Aggregation("no samples for the KS test".into()));
    }
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut stat: f64 = 0.0;
    for (i, x) in xs.iter().enumerate() {
        let cdf = 1.0 - (-rate * x).exp();
        stat = stat.max(((i + 1) as f64 / n - cdf).abs()).max((cdf - i as f64 / n).abs());
    }
    let critical = 1.628 / n.sqrt();
    Ok(KsResult {
        statistic: stat,
        critical,
        passed: stat <= critical,
    })
}
