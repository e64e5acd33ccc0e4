use std::collections::BTreeMap;

use signalrho::discrete::{marginal_state, stationary_resolved, SignalTable};
use signalrho::inversion::{self, Panel};
use signalrho::jump::{
    combined_steady, coupled_generator, evolve_coupled, integrated_propagator, marginal, omega_map, steady_coupled,
    steady_unconditional, ChannelBlocks, FeedbackSchedule, ScheduleFamily, TauGridState, TauGridStepper,
};
use signalrho::linops::{self, ket_bra};
use signalrho::model::jump_instruments;
use signalrho::signals::{jump_time, LastJump};
use signalrho::trajectories::{
    ensemble_observable, run_ensemble, window_average, window_signal_frequencies, SimulationConfig,
};
use signalrho::{CMatrix, InstrumentSet, Signal};

use crate::output::{Cell, Csv};
use crate::scenario::{Built, Engine, Route, Scenario};
use crate::CliError;

fn config(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn require<T: Copy>(v: Option<T>, what: &str, mode: &str) -> Result<T, CliError> {
    v.ok_or_else(|| config(format!("{mode} needs {what}")))
}

fn expectation(op: &CMatrix, rho: &CMatrix) -> f64 {
    linops::trace(&(op * rho)).re
}

fn state_header(first: &[&str], b: &Built) -> Vec<String> {
    let mut h: Vec<String> = first.iter().map(|s| s.to_string()).collect();
    h.extend((0..b.dim).map(|i| format!("pop_{i}")));
    h.extend(b.observables.iter().map(|(n, _)| n.clone()));
    h
}

fn state_cells(b: &Built, rho: &CMatrix) -> Vec<Cell> {
    let mut row: Vec<Cell> = (0..b.dim).map(|i| Cell::Num(rho[(i, i)].re)).collect();
    row.extend(b.observables.iter().map(|(_, o)| Cell::Num(expectation(o, rho))));
    row
}

fn require_tau_independent(schedule: &FeedbackSchedule, what: &str) -> Result<(), CliError> {
    if schedule.is_tau_independent() {
        Ok(())
    } else {
        Err(config(format!(
            "{what} needs τ-independent feedback; this schedule has several segments per channel"
        )))
    }
}

pub fn steady(b: &Built, s: &Scenario) -> Result<Vec<Csv>, CliError> {
    let route = s.run.route.unwrap_or_default();
    let sched = &b.schedule;
    let (rho, blocks): (CMatrix, ChannelBlocks) = match route {
        Route::Omega => {
            let om = omega_map(sched)?;
            let rho = steady_unconditional(&om.omega)?;
            let blocks = om.per_channel.iter().map(|(k, m)| (*k, m.apply(&rho))).collect();
            (rho, blocks)
        }
        Route::Coupled => {
            require_tau_independent(sched, "the coupled route")?;
            let pi = coupled_generator(&sched.channel_models()?)?;
            let blocks = steady_coupled(&pi)?;
            (marginal(&blocks).expect("at least one channel"), blocks)
        }
        Route::Combined => {
            let cs = combined_steady(sched)?;
            let mut blocks = BTreeMap::new();
            for (k, boundary) in &cs.boundary {
                blocks.insert(*k, integrated_propagator(sched, *k)?.apply(boundary));
            }
            (cs.unconditional, blocks)
        }
        Route::Discrete => {
            require_tau_independent(sched, "the discrete route")?;
            let dt = require(s.run.dt, "run.dt", "the discrete route")?;
            let entries: BTreeMap<Signal, InstrumentSet> = sched
                .channel_models()?
                .iter()
                .map(|(k, m)| Ok((Signal::Int(*k), jump_instruments(m, dt)?)))
                .collect::<signalrho::Result<_>>()?;
            let table = SignalTable::new(entries, None)?;
            let rule = LastJump::new(sched.channels(), b.initial_channel)?;
            let ss = stationary_resolved(&table, &rule, 4 * sched.channels().len())?;
            let blocks = ss
                .blocks()
                .iter()
                .filter_map(|(y, m)| y.int().map(|k| (k, m.clone())))
                .collect();
            (marginal_state(&ss), blocks)
        }
    };
    let mut summary = Csv::new("steady.csv", state_header(&["block", "trace"], b));
    let mut matrix = Csv::new(
        "steady_rho.csv",
        ["block", "row", "col", "re", "im"].iter().map(|s| s.to_string()).collect(),
    );
    let mut add = |name: String, m: &CMatrix| {
        let mut row = vec![Cell::Text(name.clone()), Cell::Num(linops::trace(m).re)];
        row.extend(state_cells(b, m));
        summary.push(row);
        for j in 0..b.dim {
            for i in 0..b.dim {
                matrix.push(vec![
                    Cell::Text(name.clone()),
                    Cell::Int(i as i64),
                    Cell::Int(j as i64),
                    Cell::Num(m[(i, j)].re),
                    Cell::Num(m[(i, j)].im),
                ]);
            }
        }
    };
    add("unconditional".into(), &rho);
    for (k, m) in &blocks {
        add(format!("channel_{k}"), m);
    }
    Ok(vec![summary, matrix])
}

pub fn evolve(b: &Built, s: &Scenario) -> Result<Vec<Csv>, CliError> {
    let t_final = require(s.run.t_final, "run.t_final", "evolve")?;
    let dt = require(s.run.dt, "run.dt", "evolve")?;
    let steps = (t_final / dt).round() as usize;
    if steps == 0 {
        return Err(config("evolve needs run.t_final ≥ run.dt"));
    }
    let every = s.run.sample_every.unwrap_or(1).max(1);
    let channels = b.schedule.channels();
    let mut first = vec!["time", "trace"];
    let names: Vec<String> = channels.iter().map(|k| format!("trace_channel_{k}")).collect();
    first.extend(names.iter().map(String::as_str));
    let mut csv = Csv::new("evolve.csv", state_header(&first, b));
    let mut record = |t: f64, blocks: &ChannelBlocks| {
        let rho = marginal(blocks).expect("at least one channel");
        let mut row = vec![Cell::Num(t), Cell::Num(linops::trace(&rho).re)];
        row.extend(channels.iter().map(|k| Cell::Num(linops::trace(&blocks[k]).re)));
        row.extend(state_cells(b, &rho));
        csv.push(row);
    };
    match s.run.engine.unwrap_or_default() {
        Engine::Coupled => {
            require_tau_independent(&b.schedule, "the coupled engine")?;
            let pi = coupled_generator(&b.schedule.channel_models()?)?;
            let start: ChannelBlocks = channels
                .iter()
                .map(|&k| {
                    let m = if k == b.initial_channel { b.initial_state.clone() } else { CMatrix::zeros(b.dim, b.dim) };
                    (k, m)
                })
                .collect();
            record(0.0, &start);
            for n in (every..=steps).step_by(every) {
                let t = n as f64 * dt;
                record(t, &evolve_coupled(&start, &pi, t)?);
            }
        }
        Engine::TauGrid => {
            let bins = s.run.bins.unwrap_or(steps + 1).max(2);
            let stepper = TauGridStepper::new(&b.schedule, dt, bins)?;
            let mut state = TauGridState::initial(&b.schedule, &b.initial_state, b.initial_channel, dt, bins)?;
            record(0.0, &state.channel_marginals());
            for n in 1..=steps {
                state = stepper.step(&state, dt)?;
                if n % every == 0 {
                    record(n as f64 * dt, &state.channel_marginals());
                }
            }
        }
    }
    Ok(vec![csv])
}

pub fn trajectories(b: &Built, s: &Scenario, seed: u64) -> Result<Vec<Csv>, CliError> {
    let t_final = require(s.run.t_final, "run.t_final", "trajectories")?;
    let dt = require(s.run.dt, "run.dt", "trajectories")?;
    let n = require(s.run.trajectories, "run.trajectories (or --ntraj)", "trajectories")?;
    if n < 2 {
        return Err(config("trajectories needs at least 2 trajectories"));
    }
    let steps = (t_final / dt).round() as usize;
    let every = s.run.sample_every.unwrap_or((steps / 200).max(1)).max(1);
    let [t0, t1] = s.run.window.unwrap_or([0.5 * t_final, t_final]);
    let family = ScheduleFamily::new(&b.schedule, dt)?;
    let rule = jump_time(b.schedule.channels(), b.initial_channel, dt)?;
    let mut cfg = SimulationConfig::new(t_final, dt)?.sample_every(every);
    let mut names: Vec<String> = (0..b.dim).map(|i| format!("pop_{i}")).collect();
    for i in 0..b.dim {
        cfg = cfg.observable(names[i].clone(), ket_bra(b.dim, i, i));
    }
    for (name, op) in &b.observables {
        cfg = cfg.observable(name.clone(), op.clone());
        names.push(name.clone());
    }
    let records = run_ensemble(&family, &rule, &b.initial_state, &cfg, seed, n)?;

    let mut header = vec!["time".to_string()];
    for name in &names {
        header.push(format!("{name}_mean"));
        header.push(format!("{name}_stderr"));
    }
    let mut series = Csv::new("trajectories.csv", header);
    let columns = names
        .iter()
        .map(|name| ensemble_observable(&records, name))
        .collect::<signalrho::Result<Vec<_>>>()?;
    for i in 0..columns[0].len() {
        let mut row = vec![Cell::Num(columns[0][i].0)];
        for col in &columns {
            row.push(Cell::Num(col[i].1.mean));
            row.push(Cell::Num(col[i].1.stderr));
        }
        series.push(row);
    }

    let mut summary = Csv::new(
        "trajectories_summary.csv",
        ["quantity", "mean", "stderr"].iter().map(|s| s.to_string()).collect(),
    );
    for name in &names {
        let e = window_average(&records, name, t0, t1)?;
        summary.push(vec![Cell::Text(format!("window_{name}")), e.mean.into(), e.stderr.into()]);
    }
    let freqs = window_signal_frequencies(&records, t0, t1, |y| y.pair().map_or(0, |p| p.0))?;
    for (k, e) in freqs {
        summary.push(vec![Cell::Text(format!("window_last_jump_{k}")), e.mean.into(), e.stderr.into()]);
    }
    let jumps: Vec<f64> = records.iter().map(|r| r.events.len() as f64).collect();
    let e = signalrho::trajectories::Estimate::from_samples(&jumps);
    summary.push(vec![Cell::Text("jumps_per_trajectory".into()), e.mean.into(), e.stderr.into()]);
    Ok(vec![series, summary])
}

pub fn inversion(s: &Scenario, panel: Option<Panel>) -> Result<Vec<Csv>, CliError> {
    if let Some(panel) = panel {
        let table = inversion::sweep_figures(&s.sweep_spec(), panel)?;
        let name = match panel {
            Panel::B => "panel_b.csv",
            Panel::C => "panel_c.csv",
            Panel::D => "panel_d.csv",
        };
        let mut csv = Csv::new(name, table.header.iter().map(|h| h.to_string()).collect());
        for row in table.rows {
            csv.push(row.into_iter().map(Cell::Num).collect());
        }
        return Ok(vec![csv]);
    }
    let p = s
        .inversion_params()?
        .ok_or_else(|| config("the inversion command needs an \"inversion\" block (or --panel)"))?;
    let mut csv = Csv::new("inversion.csv", vec!["quantity".into(), "value".into()]);
    let mut put = |k: &str, v: f64| csv.push(vec![Cell::Text(k.into()), Cell::Num(v)]);
    put("gamma", p.gamma);
    put("nbar", p.nbar);
    put("lambda", p.lambda);
    put("tau0", p.tau0);
    put("tau1", p.tau1);
    put("pe_numeric", inversion::pe_numeric(&p)?);
    if p.detuning == 0.0 && p.nbar > 0.0 {
        put("pe_analytic", inversion::pe_analytic(&p)?);
    }
    if p.ratio() < 4.0 {
        put("tau1_opt", inversion::tau1_opt(p.gamma, p.lambda)?);
        put("pe_zero_temp", inversion::pe_zero_temp(p.gamma, p.lambda, p.tau0)?);
        put("tau0_max", inversion::tau0_max(p.gamma, p.lambda)?);
    }
    put("threshold_ratio", inversion::threshold_ratio(inversion::NBAR_EPSILON, 1.0, 1.5)?);
    Ok(vec![csv])
}
