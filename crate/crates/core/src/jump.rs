//! Feedback conditioned on the channel of the last jump and the time elapsed
//! since it: coupled master equations, no-jump propagators, the `Ω` map for
//! steady states, τ-resolved states and waiting-time statistics.
//!
//! Schedules are piecewise constant in τ, so every propagator is a product of
//! matrix exponentials and every τ-integral is a resolvent expression.

use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::discrete::InstrumentFamily;
use crate::error::{Error, Result};
use crate::linops::{self, c, CMatrix, CVector, SuperOp, ONE, ZERO};
use crate::model::{jump_instruments, jump_superop, nojump_generator, InstrumentSet, QuantumModel};
use crate::signals::Signal;

/// Per-channel output: one block per last-jump channel.
pub type ChannelBlocks = BTreeMap<i64, CMatrix>;

#[derive(Clone, Debug)]
pub struct Segment {
    /// Left end of the interval on which `model` applies.
    pub start: f64,
    pub model: QuantumModel,
}

/// Ordered segments for one channel; the last one extends to infinity.
#[derive(Clone, Debug)]
pub struct ChannelSchedule {
    segments: Vec<Segment>,
}

impl ChannelSchedule {
    /// `breaks` holds `0 = s₀ < s₁ < … < s_m` paired with the model valid from each.
    pub fn new(segments: Vec<(f64, QuantumModel)>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::Config("channel schedule has no segments".into()));
        }
        if segments[0].0 != 0.0 {
            return Err(Error::Config(format!(
                "first breakpoint must be 0, got {}",
                segments[0].0
            )));
        }
        for w in segments.windows(2) {
            if !(w[1].0 > w[0].0) || !w[1].0.is_finite() {
                return Err(Error::Config(format!(
                    "breakpoints must be finite and strictly increasing ({} then {})",
                    w[0].0, w[1].0
                )));
            }
        }
        Ok(ChannelSchedule {
            segments: segments
                .into_iter()
                .map(|(start, model)| Segment { start, model })
                .collect(),
        })
    }

    pub fn constant(model: QuantumModel) -> Self {
        ChannelSchedule {
            segments: vec![Segment { start: 0.0, model }],
        }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// `(start, end, model)` with `end = None` for the tail.
    pub fn intervals(&self) -> impl Iterator<Item = (f64, Option<f64>, &QuantumModel)> {
        self.segments.iter().enumerate().map(move |(i, s)| {
            (s.start, self.segments.get(i + 1).map(|n| n.start), &s.model)
        })
    }

    pub fn segment_index(&self, tau: f64) -> usize {
        self.segments
            .iter()
            .rposition(|s| s.start <= tau)
            .unwrap_or(0)
    }

    pub fn model_at(&self, tau: f64) -> &QuantumModel {
        &self.segments[self.segment_index(tau)].model
    }

    pub fn tail(&self) -> &QuantumModel {
        &self.segments.last().expect("non-empty").model
    }
}

/// `H(k,τ)` and `L_j(k,τ)` for every last-jump channel `k`.
#[derive(Clone, Debug)]
pub struct FeedbackSchedule {
    dim: usize,
    channels: BTreeMap<i64, ChannelSchedule>,
}

impl FeedbackSchedule {
    pub fn new(channels: BTreeMap<i64, ChannelSchedule>) -> Result<Self> {
        let first = channels
            .values()
            .next()
            .ok_or_else(|| Error::Config("feedback schedule has no channels".into()))?;
        let dim = first.segments[0].model.dim();
        let labels: Vec<i64> = channels.keys().copied().collect();
        for (k, ch) in &channels {
            for seg in &ch.segments {
                if seg.model.dim() != dim {
                    return Err(Error::Validation(format!(
                        "channel {k} segment at τ={} has dimension {} instead of {dim}",
                        seg.start,
                        seg.model.dim()
                    )));
                }
                let monitored: Vec<i64> = seg.model.monitored().iter().copied().collect();
                if monitored != labels {
                    return Err(Error::Validation(format!(
                        "channel {k} segment at τ={} monitors {monitored:?} but the schedule channels are {labels:?}",
                        seg.start
                    )));
                }
            }
        }
        Ok(FeedbackSchedule { dim, channels })
    }

    /// No feedback: every channel uses `model` at all τ.
    pub fn constant(model: &QuantumModel) -> Result<Self> {
        Self::new(
            model
                .monitored()
                .iter()
                .map(|&k| (k, ChannelSchedule::constant(model.clone())))
                .collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn channels(&self) -> Vec<i64> {
        self.channels.keys().copied().collect()
    }

    pub fn channel(&self, k: i64) -> Result<&ChannelSchedule> {
        self.channels
            .get(&k)
            .ok_or_else(|| Error::Config(format!("schedule has no channel {k}")))
    }

    pub fn model_at(&self, k: i64, tau: f64) -> Result<&QuantumModel> {
        Ok(self.channel(k)?.model_at(tau))
    }

    /// True if no channel has more than one segment.
    pub fn is_tau_independent(&self) -> bool {
        self.channels.values().all(|c| c.segments.len() == 1)
    }

    /// The per-channel models of a τ-independent schedule.
    pub fn channel_models(&self) -> Result<BTreeMap<i64, QuantumModel>> {
        if !self.is_tau_independent() {
            return Err(Error::Config(
                "schedule depends on the elapsed time; coupled equations need τ-independent feedback"
                    .into(),
            ));
        }
        Ok(self
            .channels
            .iter()
            .map(|(k, c)| (*k, c.segments[0].model.clone()))
            .collect())
    }

    /// The common jump superoperators `𝓙_k`, if they are the same in every
    /// channel and segment.
    pub fn shared_jumps(&self) -> Result<BTreeMap<i64, SuperOp>> {
        let reference = self.channels.values().next().expect("non-empty").segments[0]
            .model
            .clone();
        let jumps: BTreeMap<i64, SuperOp> = reference
            .monitored_jumps()
            .map(|j| (j.label, jump_superop(&j.op)))
            .collect();
        for (k, ch) in &self.channels {
            for seg in &ch.segments {
                for j in seg.model.monitored_jumps() {
                    let diff = linops::max_abs(&(jump_superop(&j.op).matrix() - jumps[&j.label].matrix()));
                    let scale = linops::max_abs(jumps[&j.label].matrix()).max(1.0);
                    if diff > 1e-14 * scale {
                        return Err(Error::Config(format!(
                            "jump operator {} differs in channel {k} at τ={}; feedback must act on the no-jump part only",
                            j.label, seg.start
                        )));
                    }
                }
            }
        }
        Ok(jumps)
    }
}

/// `G(k,τ)`: the time-ordered no-jump propagator.
pub fn nojump_propagator(schedule: &FeedbackSchedule, k: i64, tau: f64) -> Result<SuperOp> {
    interval_propagator(schedule.channel(k)?, 0.0, tau)
}

/// `G(k,b)G(k,a)⁻¹`, the no-jump propagator from `a` to `b`.
fn interval_propagator(ch: &ChannelSchedule, a: f64, b: f64) -> Result<SuperOp> {
    if !(a >= 0.0 && b >= a) {
        return Err(Error::Domain(format!("propagator interval [{a}, {b}] is invalid")));
    }
    let d = ch.segments[0].model.dim();
    let mut p = SuperOp::identity(d);
    for (start, end, model) in ch.intervals() {
        let lo = start.max(a);
        let hi = end.unwrap_or(f64::INFINITY).min(b);
        if hi > lo {
            p = nojump_generator(model).expm(hi - lo)?.compose(&p);
        }
    }
    Ok(p)
}

/// Block generator of the coupled master equations on `⊕_k ϱ(k)`.
#[derive(Clone, Debug)]
pub struct CoupledGenerator {
    dim: usize,
    channels: Vec<i64>,
    matrix: CMatrix,
}

impl CoupledGenerator {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn channels(&self) -> &[i64] {
        &self.channels
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    /// `max |(⊕_k vec(I))† Π|`.
    pub fn trace_defect(&self) -> f64 {
        let d = self.dim;
        let n = self.channels.len();
        let mut row = CVector::zeros(n * d * d);
        for b in 0..n {
            for a in 0..d {
                row[b * d * d + a + a * d] = ONE;
            }
        }
        (row.transpose() * &self.matrix).iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    fn stack(&self, blocks: &ChannelBlocks) -> Result<CVector> {
        let d2 = self.dim * self.dim;
        let mut v = CVector::zeros(self.channels.len() * d2);
        for (i, k) in self.channels.iter().enumerate() {
            if let Some(b) = blocks.get(k) {
                v.rows_mut(i * d2, d2).copy_from(&linops::vec(b)?);
            }
        }
        Ok(v)
    }

    fn unstack(&self, v: &CVector) -> ChannelBlocks {
        let d2 = self.dim * self.dim;
        self.channels
            .iter()
            .enumerate()
            .map(|(i, k)| {
                let part = CVector::from_iterator(d2, v.rows(i * d2, d2).iter().copied());
                (*k, linops::unvec(&part, self.dim).expect("block length"))
            })
            .collect()
    }
}

/// `Π`: diagonal blocks `𝓛₀(k) + 𝓙_k(k)`, off-diagonal `(k,k')` blocks `𝓙_k(k')`.
pub fn coupled_generator(models: &BTreeMap<i64, QuantumModel>) -> Result<CoupledGenerator> {
    let channels: Vec<i64> = models.keys().copied().collect();
    let dim = models
        .values()
        .next()
        .ok_or_else(|| Error::Validation("no channel models".into()))?
        .dim();
    let d2 = dim * dim;
    let n = channels.len();
    let mut matrix = CMatrix::zeros(n * d2, n * d2);
    for (col, kp) in channels.iter().enumerate() {
        let model = &models[kp];
        if model.dim() != dim {
            return Err(Error::Validation(format!(
                "channel {kp} model has dimension {} instead of {dim}",
                model.dim()
            )));
        }
        let monitored: Vec<i64> = model.monitored().iter().copied().collect();
        if monitored != channels {
            return Err(Error::Validation(format!(
                "channel {kp} monitors {monitored:?} but the channels are {channels:?}"
            )));
        }
        let mut diag = matrix.view_mut((col * d2, col * d2), (d2, d2));
        diag += nojump_generator(model).matrix();
        for j in model.monitored_jumps() {
            let row = channels.iter().position(|k| *k == j.label).expect("checked");
            let mut view = matrix.view_mut((row * d2, col * d2), (d2, d2));
            view += jump_superop(&j.op).matrix();
        }
    }
    Ok(CoupledGenerator {
        dim,
        channels,
        matrix,
    })
}

fn eig_tol(m: &CMatrix) -> f64 {
    1e-8 * linops::norm1(m).max(1.0)
}

/// Null vector of `Π`, normalized so that `Σ_k Tr ϱ_ss(k) = 1`.
pub fn steady_coupled(pi: &CoupledGenerator) -> Result<ChannelBlocks> {
    let pair = linops::eig_near(&pi.matrix, ZERO, eig_tol(&pi.matrix))?;
    let blocks = pi.unstack(&pair.vector);
    let total: linops::C64 = blocks.values().map(linops::trace).sum();
    if total.norm() < 1e-300 {
        return Err(Error::Validation("steady null vector has zero trace".into()));
    }
    Ok(blocks
        .into_iter()
        .map(|(k, b)| (k, linops::hermitian_part(&(b / total))))
        .collect())
}

pub fn evolve_coupled(blocks: &ChannelBlocks, pi: &CoupledGenerator, t: f64) -> Result<ChannelBlocks> {
    if !(t >= 0.0) {
        return Err(Error::Domain(format!("evolution time must be non-negative, got {t}")));
    }
    let v = pi.stack(blocks)?;
    let e = linops::expm(&pi.matrix, t)?;
    Ok(pi.unstack(&(e * v)))
}

/// `Σ_k ϱ(k)`.
pub fn marginal(blocks: &ChannelBlocks) -> Option<CMatrix> {
    let mut it = blocks.values();
    let first = it.next()?.clone();
    Some(it.fold(first, |acc, b| acc + b))
}

fn hurwitz_check(gen: &SuperOp, what: &str) -> Result<()> {
    let abscissa = linops::spectral_abscissa(gen.matrix())?;
    if abscissa >= -1e-12 * linops::norm1(gen.matrix()).max(1.0) {
        return Err(Error::Divergent(format!(
            "{what}: no-jump generator has spectral abscissa {abscissa:.3e}, so ∫G dτ does not converge"
        )));
    }
    Ok(())
}

/// `∫₀^Δ e^{s𝓛} ds` from the upper-right block of `exp([[𝓛, I], [0, 0]]Δ)`.
fn segment_integral_augmented(gen: &CMatrix, delta: f64) -> Result<CMatrix> {
    let n = gen.nrows();
    let mut aug = CMatrix::zeros(2 * n, 2 * n);
    aug.view_mut((0, 0), (n, n)).copy_from(gen);
    aug.view_mut((0, n), (n, n)).fill_with_identity();
    let e = linops::expm(&aug, delta)?;
    Ok(e.view((0, n), (n, n)).into_owned())
}

/// `∫₀^Δ e^{s𝓛} ds = 𝓛⁻¹(e^{Δ𝓛} − I)`, falling back to the augmented
/// exponential when `𝓛` is singular.
fn segment_integral(gen: &SuperOp, step: &SuperOp, delta: f64) -> Result<CMatrix> {
    let n = gen.matrix().nrows();
    let rhs = step.matrix() - CMatrix::identity(n, n);
    match linops::solve(gen.matrix(), &rhs, "segment no-jump generator") {
        Ok(x) => Ok(x),
        Err(Error::Singular { .. }) => segment_integral_augmented(gen.matrix(), delta),
        Err(e) => Err(e),
    }
}

/// Segmentwise pieces of `∫₀^∞ G(k,τ) dτ` for one channel: each item is
/// `(model, ∫_{segment} G dτ)`.
fn channel_integrals<'a>(
    ch: &'a ChannelSchedule,
    k: i64,
) -> Result<Vec<(&'a QuantumModel, CMatrix)>> {
    let d = ch.segments[0].model.dim();
    let mut p = CMatrix::identity(d * d, d * d);
    let mut out = Vec::with_capacity(ch.segments.len());
    for (start, end, model) in ch.intervals() {
        let gen = nojump_generator(model);
        match end {
            Some(end) => {
                let delta = end - start;
                let step = gen.expm(delta)?;
                let integral = segment_integral(&gen, &step, delta)?;
                out.push((model, integral * &p));
                p = step.matrix() * p;
            }
            None => {
                hurwitz_check(&gen, &format!("tail of channel {k}"))?;
                let integral = -linops::solve(gen.matrix(), &p, "tail no-jump generator")?;
                out.push((model, integral));
            }
        }
    }
    Ok(out)
}

/// `I_k = ∫₀^∞ G(k,τ) dτ`.
pub fn integrated_propagator(schedule: &FeedbackSchedule, k: i64) -> Result<SuperOp> {
    let d = schedule.dim;
    let total = channel_integrals(schedule.channel(k)?, k)?
        .into_iter()
        .fold(CMatrix::zeros(d * d, d * d), |acc, (_, m)| acc + m);
    SuperOp::from_matrix(d, total)
}

#[derive(Clone, Debug)]
pub struct OmegaMap {
    /// `Ω = Σ_k Ω_k`.
    pub omega: SuperOp,
    /// `Ω_k = I_k 𝓙_k`, so that `ϱ_ss(k) = Ω_k ρ̄_ss` integrated over τ.
    pub per_channel: BTreeMap<i64, SuperOp>,
}

/// `Ω = Σ_k ∫₀^∞ G(k,τ)𝓙_k dτ` for feedback acting on the no-jump part only.
pub fn omega_map(schedule: &FeedbackSchedule) -> Result<OmegaMap> {
    let jumps = schedule.shared_jumps()?;
    let d = schedule.dim;
    let mut omega = SuperOp::zero(d);
    let mut per_channel = BTreeMap::new();
    for k in schedule.channels() {
        let ik = integrated_propagator(schedule, k)?;
        let jk = jumps.get(&k).ok_or_else(|| {
            Error::Config(format!("channel {k} has no matching jump operator"))
        })?;
        let part = ik.compose(jk);
        omega += &part;
        per_channel.insert(k, part);
    }
    linops::check_finite(omega.matrix(), "Ω map")?;
    Ok(OmegaMap { omega, per_channel })
}

/// Fixed point of `Ω`: `eig_near(Ω, 1)`, Hermitized and trace-normalized.
pub fn steady_unconditional(omega: &SuperOp) -> Result<CMatrix> {
    let pair = linops::eig_near(omega.matrix(), ONE, 1e-8)?;
    let rho = linops::unvec(&pair.vector, omega.dim())?;
    let tr = linops::trace(&rho);
    if tr.norm() < 1e-300 {
        return Err(Error::Validation("fixed point of Ω has zero trace".into()));
    }
    let rho = linops::hermitian_part(&(rho / tr));
    let tr = linops::trace(&rho).re;
    Ok(rho / c(tr, 0.0))
}

/// `ϱ(k,τ) = G(k,τ)𝓙_k ρ̄` in the steady regime.
pub fn resolved_from_unconditional(
    rho: &CMatrix,
    schedule: &FeedbackSchedule,
    k: i64,
    tau: f64,
) -> Result<CMatrix> {
    let model = schedule.model_at(k, 0.0)?;
    let l = model
        .jump(k)
        .ok_or_else(|| Error::Config(format!("no jump operator for channel {k}")))?;
    let boundary = l * rho * l.adjoint();
    Ok(nojump_propagator(schedule, k, tau)?.apply(&boundary))
}

/// `ϱ(k,τ_i)` on the grid `τ_i = iΔτ`; the last bin collects all `τ ≥ τ_{n−1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct TauGridState {
    pub dtau: f64,
    pub time: f64,
    pub blocks: BTreeMap<i64, Vec<CMatrix>>,
}

impl TauGridState {
    /// All weight at `τ = 0` in channel `k`.
    pub fn initial(
        schedule: &FeedbackSchedule,
        rho: &CMatrix,
        k: i64,
        dtau: f64,
        bins: usize,
    ) -> Result<Self> {
        if !(dtau > 0.0) || bins < 2 {
            return Err(Error::Grid(format!(
                "τ grid needs Δτ > 0 and at least two bins (Δτ={dtau}, bins={bins})"
            )));
        }
        schedule.channel(k)?;
        let d = schedule.dim;
        let mut blocks: BTreeMap<i64, Vec<CMatrix>> = schedule
            .channels()
            .into_iter()
            .map(|ch| (ch, vec![CMatrix::zeros(d, d); bins]))
            .collect();
        blocks.get_mut(&k).expect("checked")[0] = rho / c(dtau, 0.0);
        Ok(TauGridState {
            dtau,
            time: 0.0,
            blocks,
        })
    }

    pub fn bins(&self) -> usize {
        self.blocks.values().next().map_or(0, |v| v.len())
    }

    pub fn tau(&self, i: usize) -> f64 {
        i as f64 * self.dtau
    }

    /// `Σ_k Σ_i Δτ Tr ϱ(k,τ_i)`.
    pub fn total_trace(&self) -> f64 {
        self.blocks
            .values()
            .flatten()
            .map(|b| linops::trace(b).re * self.dtau)
            .sum()
    }

    /// `Σ_k Σ_i Δτ ϱ(k,τ_i)`.
    pub fn marginal(&self) -> CMatrix {
        let d = self.blocks.values().next().map_or(0, |v| v[0].nrows());
        self.blocks
            .values()
            .flatten()
            .fold(CMatrix::zeros(d, d), |acc, b| acc + b * c(self.dtau, 0.0))
    }

    /// `Σ_i Δτ ϱ(k,τ_i)` for each channel.
    pub fn channel_marginals(&self) -> ChannelBlocks {
        self.blocks
            .iter()
            .map(|(k, v)| {
                let d = v[0].nrows();
                (*k, v.iter().fold(CMatrix::zeros(d, d), |acc, b| acc + b * c(self.dtau, 0.0)))
            })
            .collect()
    }
}

type BinMaps = (SuperOp, Vec<(usize, SuperOp)>);

/// Propagator over `[a, b)` and, per target channel, `Σ 𝓙 ∫ G(a→s) ds` over
/// the pieces of `[a, b)` cut by segment breakpoints. Their traces add up to
/// the trace lost by the propagator, so stepping conserves probability.
fn bin_maps(ch: &ChannelSchedule, channels: &[i64], a: f64, b: f64) -> Result<BinMaps> {
    let d = ch.segments[0].model.dim();
    let mut p = SuperOp::identity(d);
    let mut acc: BTreeMap<usize, CMatrix> = BTreeMap::new();
    for (start, end, model) in ch.intervals() {
        let lo = start.max(a);
        let hi = end.unwrap_or(f64::INFINITY).min(b);
        if hi <= lo {
            continue;
        }
        let gen = nojump_generator(model);
        let step = gen.expm(hi - lo)?;
        let integral = segment_integral(&gen, &step, hi - lo)? * p.matrix();
        for j in model.monitored_jumps() {
            let t = channels.iter().position(|x| *x == j.label).expect("validated");
            let term = jump_superop(&j.op).matrix() * &integral;
            *acc.entry(t).or_insert_with(|| CMatrix::zeros(d * d, d * d)) += term;
        }
        p = step.compose(&p);
    }
    let jumps = acc
        .into_iter()
        .map(|(t, m)| Ok((t, SuperOp::from_matrix(d, m)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok((p, jumps))
}

/// Precomputed one-bin propagators and jump maps for stepping a τ grid.
pub struct TauGridStepper {
    dtau: f64,
    channels: Vec<i64>,
    /// `[channel][bin]` propagator over `[τ_i, τ_i + Δτ)`.
    shift: Vec<Vec<SuperOp>>,
    /// `[source channel][bin]` list of `(target channel index, 𝓙 ∫_bin G)`.
    jumps: Vec<Vec<Vec<(usize, SuperOp)>>>,
}

impl TauGridStepper {
    pub fn new(schedule: &FeedbackSchedule, dtau: f64, bins: usize) -> Result<Self> {
        if !(dtau > 0.0) || bins < 2 {
            return Err(Error::Grid(format!(
                "τ grid needs Δτ > 0 and at least two bins (Δτ={dtau}, bins={bins})"
            )));
        }
        let channels = schedule.channels();
        let mut shift = Vec::with_capacity(channels.len());
        let mut jumps = Vec::with_capacity(channels.len());
        for &k in &channels {
            let ch = schedule.channel(k)?;
            let mut cache: BTreeMap<usize, BinMaps> = BTreeMap::new();
            let mut row = Vec::with_capacity(bins);
            let mut jrow = Vec::with_capacity(bins);
            for i in 0..bins {
                let a = i as f64 * dtau;
                let b = a + dtau;
                let seg = ch.segment_index(a);
                let crosses = ch.segments.get(seg + 1).is_some_and(|s| s.start < b);
                let maps = if crosses {
                    bin_maps(ch, &channels, a, b)?
                } else if let Some(m) = cache.get(&seg) {
                    m.clone()
                } else {
                    let m = bin_maps(ch, &channels, a, b)?;
                    cache.insert(seg, m.clone());
                    m
                };
                row.push(maps.0);
                jrow.push(maps.1);
            }
            shift.push(row);
            jumps.push(jrow);
        }
        Ok(TauGridStepper {
            dtau,
            channels,
            shift,
            jumps,
        })
    }

    /// One shift-and-propagate step of size `dt = Δτ`.
    pub fn step(&self, state: &TauGridState, dt: f64) -> Result<TauGridState> {
        if (dt - self.dtau).abs() > 1e-12 * self.dtau || (state.dtau - self.dtau).abs() > 1e-12 * self.dtau {
            return Err(Error::Grid(format!(
                "step {dt} must equal the grid spacing {} (state grid {})",
                self.dtau, state.dtau
            )));
        }
        let bins = self.shift[0].len();
        if state.bins() != bins {
            return Err(Error::Grid(format!(
                "state has {} bins but the stepper was built for {bins}",
                state.bins()
            )));
        }
        let d = state.blocks.values().next().expect("channels")[0].nrows();
        let n = self.channels.len();
        let mut boundary = vec![CMatrix::zeros(d, d); n];
        let mut next: BTreeMap<i64, Vec<CMatrix>> = BTreeMap::new();
        for (ci, k) in self.channels.iter().enumerate() {
            let old = state
                .blocks
                .get(k)
                .ok_or_else(|| Error::Grid(format!("state lacks channel {k}")))?;
            let mut new = vec![CMatrix::zeros(d, d); bins];
            for (i, block) in old.iter().enumerate() {
                for (target, j) in &self.jumps[ci][i] {
                    let mut contrib = CMatrix::zeros(d, d);
                    j.apply_add(block, &mut contrib);
                    boundary[*target] += contrib;
                }
                let dest = (i + 1).min(bins - 1);
                self.shift[ci][i].apply_add(block, &mut new[dest]);
            }
            next.insert(*k, new);
        }
        for (ci, k) in self.channels.iter().enumerate() {
            next.get_mut(k).expect("inserted")[0] = boundary[ci].clone();
        }
        Ok(TauGridState {
            dtau: self.dtau,
            time: state.time + dt,
            blocks: next,
        })
    }
}

/// One step of the τ-resolved equations.
pub fn evolve_tau_grid(state: &TauGridState, schedule: &FeedbackSchedule, dt: f64) -> Result<TauGridState> {
    TauGridStepper::new(schedule, state.dtau, state.bins())?.step(state, dt)
}

#[derive(Clone, Debug)]
pub struct CombinedSteady {
    /// `ϱ_ss(k, 0)`, the density of states just after a jump into `k`.
    pub boundary: ChannelBlocks,
    /// `ρ̄_ss = Σ_k I_k ϱ_ss(k,0)`.
    pub unconditional: CMatrix,
    /// The block matrix `Λ∞`.
    pub lambda: CMatrix,
}

/// Steady state for jump operators that may depend on `(k', τ')`: the
/// unit-eigenvalue eigenvector of `Λ∞`, whose `(k,k')` block is
/// `∫₀^∞ 𝓙_k(k',τ')G(k',τ') dτ'`.
pub fn combined_steady(schedule: &FeedbackSchedule) -> Result<CombinedSteady> {
    let channels = schedule.channels();
    let d = schedule.dim;
    let d2 = d * d;
    let n = channels.len();
    let mut lambda = CMatrix::zeros(n * d2, n * d2);
    let mut integrals = Vec::with_capacity(n);
    for (col, &kp) in channels.iter().enumerate() {
        let pieces = channel_integrals(schedule.channel(kp)?, kp)?;
        let mut total = CMatrix::zeros(d2, d2);
        for (model, integral) in &pieces {
            for j in model.monitored_jumps() {
                let row = channels.iter().position(|x| *x == j.label).expect("validated");
                let mut view = lambda.view_mut((row * d2, col * d2), (d2, d2));
                view += jump_superop(&j.op).matrix() * integral;
            }
            total += integral;
        }
        integrals.push(total);
    }
    let pair = linops::eig_near(&lambda, ONE, 1e-8)?;
    let raw: Vec<CMatrix> = (0..n)
        .map(|i| {
            let part = CVector::from_iterator(d2, pair.vector.rows(i * d2, d2).iter().copied());
            linops::unvec(&part, d).expect("block length")
        })
        .collect();
    let mut rho = CMatrix::zeros(d, d);
    for (b, integral) in raw.iter().zip(&integrals) {
        let v = integral * linops::vec(b)?;
        rho += linops::unvec(&v, d)?;
    }
    let tr = linops::trace(&rho);
    if tr.norm() < 1e-300 {
        return Err(Error::Validation("combined steady state has zero trace".into()));
    }
    let boundary = channels
        .iter()
        .zip(raw)
        .map(|(k, b)| (*k, linops::hermitian_part(&(b / tr))))
        .collect();
    Ok(CombinedSteady {
        boundary,
        unconditional: linops::hermitian_part(&(rho / tr)),
        lambda,
    })
}

/// Trace-sense column stochasticity of `Λ∞`: `max_{k'} |Σ_k vec(I)†Λ(k,k') − vec(I)†|`.
pub fn lambda_trace_defect(lambda: &CMatrix, dim: usize) -> f64 {
    let d2 = dim * dim;
    let n = lambda.nrows() / d2;
    let mut row = CVector::zeros(n * d2);
    for b in 0..n {
        for a in 0..dim {
            row[b * d2 + a + a * dim] = ONE;
        }
    }
    let prod = row.transpose() * lambda;
    let mut worst: f64 = 0.0;
    for col in 0..n * d2 {
        let a = col % d2;
        let want = if a % (dim + 1) == 0 { ONE } else { ZERO };
        worst = worst.max((prod[col] - want).norm());
    }
    worst
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
}

#[derive(Clone, Debug)]
pub struct WaitingTimeStats {
    pub tau: Vec<f64>,
    /// `w(k,τ) ∝ Tr ϱ_ss(k,τ)` jointly normalized over `k` and τ: the
    /// distribution of the time elapsed since the last jump.
    pub age_density: BTreeMap<i64, Vec<f64>>,
    pub age_moments: Moments,
    /// Density of the time from a jump into `k` to the next jump.
    pub waiting_density: BTreeMap<i64, Vec<f64>>,
    pub waiting_moments: BTreeMap<i64, Moments>,
    /// Waiting time between consecutive jumps of any kind.
    pub overall_waiting: Vec<f64>,
    pub overall_moments: Moments,
    /// Exact mean waiting time after a jump into `k`, `Tr[I_k ϱ(k,0)] / Tr ϱ(k,0)`.
    pub exact_mean_waiting: BTreeMap<i64, f64>,
    /// Probability mass beyond the end of the grid, before renormalization.
    pub truncated_mass: f64,
}

fn trapezoid(dtau: f64, f: &[f64]) -> f64 {
    if f.len() < 2 {
        return 0.0;
    }
    dtau * (f.iter().sum::<f64>() - 0.5 * (f[0] + f[f.len() - 1]))
}

fn moments(tau: &[f64], f: &[f64], dtau: f64) -> Moments {
    let norm = trapezoid(dtau, f);
    let m1: Vec<f64> = tau.iter().zip(f).map(|(t, w)| t * w).collect();
    let m2: Vec<f64> = tau.iter().zip(f).map(|(t, w)| t * t * w).collect();
    let mean = trapezoid(dtau, &m1) / norm;
    Moments {
        mean,
        variance: trapezoid(dtau, &m2) / norm - mean * mean,
    }
}

/// `G(k,τ_i)ρ` for `τ_i = iΔτ`, `i = 0..=n`.
fn propagate_grid(ch: &ChannelSchedule, rho: &CMatrix, dtau: f64, n: usize) -> Result<Vec<CMatrix>> {
    let mut out = Vec::with_capacity(n + 1);
    out.push(rho.clone());
    let mut cache: BTreeMap<usize, SuperOp> = BTreeMap::new();
    for i in 0..n {
        let a = i as f64 * dtau;
        let b = (i + 1) as f64 * dtau;
        let seg = ch.segment_index(a);
        let crosses = ch.segments.get(seg + 1).is_some_and(|s| s.start < b);
        let op = if crosses {
            interval_propagator(ch, a, b)?
        } else {
            match cache.get(&seg) {
                Some(op) => op.clone(),
                None => {
                    let op = nojump_generator(&ch.segments[seg].model).expm(dtau)?;
                    cache.insert(seg, op.clone());
                    op
                }
            }
        };
        let next = op.apply(&out[i]);
        out.push(next);
    }
    Ok(out)
}

/// Waiting-time and age statistics on `τ ∈ [0, τ_max]` from the boundary
/// blocks `ϱ_ss(k,0)`.
pub fn waiting_time_stats(
    boundary: &ChannelBlocks,
    schedule: &FeedbackSchedule,
    dtau: f64,
    tau_max: f64,
) -> Result<WaitingTimeStats> {
    if !(dtau > 0.0 && tau_max > dtau) {
        return Err(Error::Grid(format!(
            "waiting-time grid needs 0 < Δτ < τ_max (Δτ={dtau}, τ_max={tau_max})"
        )));
    }
    let n = (tau_max / dtau).round() as usize;
    let tau: Vec<f64> = (0..=n).map(|i| i as f64 * dtau).collect();
    let mut age = BTreeMap::new();
    let mut waiting = BTreeMap::new();
    let mut waiting_moments = BTreeMap::new();
    let mut exact = BTreeMap::new();
    let mut overall = vec![0.0; n + 1];
    let mut weights_total = 0.0;
    let mut age_total = 0.0;
    let mut age_tail = 0.0;
    for (&k, b) in boundary {
        let ch = schedule.channel(k)?;
        let weight = linops::trace(b).re;
        if weight <= 0.0 {
            continue;
        }
        let traj = propagate_grid(ch, b, dtau, n)?;
        let a: Vec<f64> = traj.iter().map(|r| linops::trace(r).re).collect();
        let ik = integrated_propagator(schedule, k)?;
        age_tail += a[n];
        exact.insert(k, linops::trace(&ik.apply(b)).re / weight);
        let mut w = Vec::with_capacity(n + 1);
        for (i, r) in traj.iter().enumerate() {
            let model = ch.model_at(tau[i]);
            let rate: f64 = model
                .monitored_jumps()
                .map(|j| linops::trace(&(&j.op * r * j.op.adjoint())).re)
                .sum();
            w.push(rate / weight);
        }
        for (o, x) in overall.iter_mut().zip(&w) {
            *o += x * weight;
        }
        weights_total += weight;
        age_total += trapezoid(dtau, &a);
        waiting_moments.insert(k, moments(&tau, &w, dtau));
        waiting.insert(k, w);
        age.insert(k, a);
    }
    if weights_total <= 0.0 {
        return Err(Error::Validation("boundary blocks carry no weight".into()));
    }
    for o in overall.iter_mut() {
        *o /= weights_total;
    }
    let joint: Vec<f64> = (0..=n).map(|i| age.values().map(|a: &Vec<f64>| a[i]).sum()).collect();
    let age_moments = moments(&tau, &joint, dtau);
    for a in age.values_mut() {
        for x in a.iter_mut() {
            *x /= age_total;
        }
    }
    for w in waiting.values_mut() {
        let norm = trapezoid(dtau, w);
        for x in w.iter_mut() {
            *x /= norm;
        }
    }
    let overall_moments = moments(&tau, &overall, dtau);
    let norm = trapezoid(dtau, &overall);
    for o in overall.iter_mut() {
        *o /= norm;
    }
    Ok(WaitingTimeStats {
        tau,
        age_density: age,
        age_moments,
        waiting_density: waiting,
        waiting_moments,
        overall_waiting: overall,
        overall_moments,
        exact_mean_waiting: exact,
        truncated_mass: age_tail / weights_total,
    })
}

/// First-order jump instruments at signal `(k, steps)`, using the schedule
/// segment that contains `τ = steps·δt`.
pub struct ScheduleFamily<'a> {
    schedule: &'a FeedbackSchedule,
    dt: f64,
    sets: BTreeMap<(i64, usize), InstrumentSet>,
}

impl<'a> ScheduleFamily<'a> {
    pub fn new(schedule: &'a FeedbackSchedule, dt: f64) -> Result<Self> {
        let mut sets = BTreeMap::new();
        for k in schedule.channels() {
            for (i, seg) in schedule.channel(k)?.segments().iter().enumerate() {
                sets.insert((k, i), jump_instruments(&seg.model, dt)?);
            }
        }
        Ok(ScheduleFamily { schedule, dt, sets })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }
}

impl InstrumentFamily for ScheduleFamily<'_> {
    fn dim(&self) -> usize {
        self.schedule.dim
    }

    fn instruments(&self, signal: Signal) -> Option<Cow<'_, InstrumentSet>> {
        let (k, steps) = match signal {
            Signal::Pair(k, s) => (k, s),
            Signal::Int(k) => (k, 0),
        };
        let seg = self.schedule.channel(k).ok()?.segment_index(steps as f64 * self.dt);
        self.sets.get(&(k, seg)).map(Cow::Borrowed)
    }
}
