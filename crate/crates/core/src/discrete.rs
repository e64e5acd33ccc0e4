//! Deterministic propagation of the signal-resolved state under arbitrary
//! instruments and causal signals:
//!
//! `ϱ_{n+1}(y) = Σ_{x',y'} δ_{y, f(x',y')} M_{x'}(y') ϱ_n(y')`.
//!
//! Blocks are stored sparsely, keyed by signal value. Contributions are
//! accumulated sequentially in ascending `y'` and then outcome order, so the
//! result is bit-for-bit reproducible.

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::error::{Error, Result};
use crate::linops::{self, c, CMatrix, CVector, ONE};
use crate::model::InstrumentSet;
use crate::signals::{Signal, SignalRule};

/// Blocks whose trace falls below this are dropped after each step.
pub const PRUNE_THRESHOLD: f64 = 1e-14;

/// Limit on the number of outcome sequences the enumeration oracle will visit.
pub const BRUTE_FORCE_LIMIT: u128 = 1_000_000;

/// Instruments that may depend on the current signal value.
pub trait InstrumentFamily: Sync {
    fn dim(&self) -> usize;

    /// The instrument set in force while the signal equals `signal`, if defined.
    fn instruments(&self, signal: Signal) -> Option<Cow<'_, InstrumentSet>>;
}

impl InstrumentFamily for InstrumentSet {
    fn dim(&self) -> usize {
        InstrumentSet::dim(self)
    }

    fn instruments(&self, _signal: Signal) -> Option<Cow<'_, InstrumentSet>> {
        Some(Cow::Borrowed(self))
    }
}

/// Per-signal lookup table with an optional fallback.
#[derive(Clone, Debug)]
pub struct SignalTable {
    dim: usize,
    entries: BTreeMap<Signal, InstrumentSet>,
    default: Option<InstrumentSet>,
}

impl SignalTable {
    pub fn new(
        entries: BTreeMap<Signal, InstrumentSet>,
        default: Option<InstrumentSet>,
    ) -> Result<Self> {
        let dim = entries
            .values()
            .chain(default.iter())
            .map(|s| s.dim())
            .next()
            .ok_or_else(|| Error::Config("empty instrument table".into()))?;
        if entries.values().chain(default.iter()).any(|s| s.dim() != dim) {
            return Err(Error::Config("instrument table mixes dimensions".into()));
        }
        Ok(SignalTable {
            dim,
            entries,
            default,
        })
    }
}

impl InstrumentFamily for SignalTable {
    fn dim(&self) -> usize {
        self.dim
    }

    fn instruments(&self, signal: Signal) -> Option<Cow<'_, InstrumentSet>> {
        self.entries
            .get(&signal)
            .or(self.default.as_ref())
            .map(Cow::Borrowed)
    }
}

/// Instruments computed on demand from the signal.
pub struct FnFamily<F> {
    dim: usize,
    f: F,
}

impl<F> FnFamily<F>
where
    F: Fn(Signal) -> Option<InstrumentSet> + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        FnFamily { dim, f }
    }
}

impl<F> InstrumentFamily for FnFamily<F>
where
    F: Fn(Signal) -> Option<InstrumentSet> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn instruments(&self, signal: Signal) -> Option<Cow<'_, InstrumentSet>> {
        (self.f)(signal).map(Cow::Owned)
    }
}

fn lookup<'a, F: InstrumentFamily + ?Sized>(
    family: &'a F,
    signal: Signal,
) -> Result<Cow<'a, InstrumentSet>> {
    let set = family.instruments(signal).ok_or_else(|| {
        Error::Config(format!("no instrument defined at populated signal {signal}"))
    })?;
    if set.dim() != family.dim() {
        return Err(Error::Config(format!(
            "instrument at signal {signal} has dimension {} but the family declares {}",
            set.dim(),
            family.dim()
        )));
    }
    Ok(set)
}

/// `ϱ(y)` for every populated signal value.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedState {
    dim: usize,
    blocks: BTreeMap<Signal, CMatrix>,
    step: usize,
}

impl ResolvedState {
    /// All weight on `signal` with system state `rho`.
    pub fn new(rho: CMatrix, signal: Signal) -> Self {
        let dim = rho.nrows();
        let mut blocks = BTreeMap::new();
        blocks.insert(signal, rho);
        ResolvedState {
            dim,
            blocks,
            step: 0,
        }
    }

    pub fn from_blocks(dim: usize, blocks: BTreeMap<Signal, CMatrix>, step: usize) -> Self {
        ResolvedState { dim, blocks, step }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn blocks(&self) -> &BTreeMap<Signal, CMatrix> {
        &self.blocks
    }

    pub fn block(&self, signal: Signal) -> Option<&CMatrix> {
        self.blocks.get(&signal)
    }

    pub fn total_trace(&self) -> f64 {
        self.blocks.values().map(|b| linops::trace(b).re).sum()
    }

    pub fn min_block_eigenvalue(&self) -> f64 {
        self.blocks
            .values()
            .map(linops::min_eigenvalue)
            .fold(f64::INFINITY, f64::min)
    }

    /// Largest entrywise difference, treating absent blocks as zero.
    pub fn max_difference(&self, other: &ResolvedState) -> f64 {
        let keys: BTreeSet<&Signal> = self.blocks.keys().chain(other.blocks.keys()).collect();
        let zero = CMatrix::zeros(self.dim, self.dim);
        keys.into_iter()
            .map(|k| {
                let a = self.blocks.get(k).unwrap_or(&zero);
                let b = other.blocks.get(k).unwrap_or(&zero);
                linops::max_abs(&(a - b))
            })
            .fold(0.0, f64::max)
    }
}

/// One application of the deterministic feedback equation.
pub fn step<F, R>(state: &ResolvedState, family: &F, rule: &R) -> Result<ResolvedState>
where
    F: InstrumentFamily + ?Sized,
    R: SignalRule + ?Sized,
{
    let d = state.dim;
    let mut next: BTreeMap<Signal, CMatrix> = BTreeMap::new();
    for (&y_prev, block) in &state.blocks {
        let set = lookup(family, y_prev)?;
        for (outcome, map) in set.outcomes().iter().zip(set.maps()) {
            let y = rule.update(outcome, y_prev);
            let acc = next.entry(y).or_insert_with(|| CMatrix::zeros(d, d));
            map.apply_add(block, acc);
        }
    }
    next.retain(|_, b| linops::trace(b).re.abs() >= PRUNE_THRESHOLD);
    Ok(ResolvedState {
        dim: d,
        blocks: next,
        step: state.step + 1,
    })
}

pub fn evolve_n<F, R>(state: &ResolvedState, family: &F, rule: &R, n: usize) -> Result<ResolvedState>
where
    F: InstrumentFamily + ?Sized,
    R: SignalRule + ?Sized,
{
    let mut s = state.clone();
    for _ in 0..n {
        s = step(&s, family, rule)?;
    }
    Ok(s)
}

/// Enumeration oracle: the sum over every outcome sequence of length `n` of
/// the unnormalized conditional state, grouped by the final signal.
pub fn brute_force_resolved<F, R>(
    rho0: &CMatrix,
    family: &F,
    rule: &R,
    n: usize,
) -> Result<ResolvedState>
where
    F: InstrumentFamily + ?Sized,
    R: SignalRule + ?Sized,
{
    let y0 = rule.initial();
    let outcomes = lookup(family, y0)?.len() as u128;
    let count = (0..n).try_fold(1u128, |acc, _| acc.checked_mul(outcomes));
    match count {
        Some(c) if c <= BRUTE_FORCE_LIMIT => {}
        _ => {
            return Err(Error::TooLarge {
                count: count.unwrap_or(u128::MAX),
                limit: BRUTE_FORCE_LIMIT,
            })
        }
    }
    let d = rho0.nrows();
    let mut acc: BTreeMap<Signal, CMatrix> = BTreeMap::new();
    visit(rho0.clone(), y0, n, family, rule, &mut acc)?;
    let _ = d;
    Ok(ResolvedState {
        dim: rho0.nrows(),
        blocks: acc,
        step: n,
    })
}

fn visit<F, R>(
    rho: CMatrix,
    signal: Signal,
    remaining: usize,
    family: &F,
    rule: &R,
    acc: &mut BTreeMap<Signal, CMatrix>,
) -> Result<()>
where
    F: InstrumentFamily + ?Sized,
    R: SignalRule + ?Sized,
{
    if remaining == 0 {
        let d = rho.nrows();
        *acc.entry(signal).or_insert_with(|| CMatrix::zeros(d, d)) += rho;
        return Ok(());
    }
    let set = lookup(family, signal)?;
    for (outcome, map) in set.outcomes().iter().zip(set.maps()) {
        visit(
            map.apply(&rho),
            rule.update(outcome, signal),
            remaining - 1,
            family,
            rule,
            acc,
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SignalDistribution {
    /// Renormalized probabilities `Tr[ϱ(y)] / Σ_y Tr[ϱ(y)]`.
    pub probabilities: BTreeMap<Signal, f64>,
    /// `Σ_y Tr[ϱ(y)]` before renormalization.
    pub total: f64,
}

impl SignalDistribution {
    pub fn deviation(&self) -> f64 {
        (self.total - 1.0).abs()
    }

    pub fn get(&self, signal: Signal) -> f64 {
        self.probabilities.get(&signal).copied().unwrap_or(0.0)
    }
}

pub fn signal_distribution(state: &ResolvedState) -> SignalDistribution {
    let total = state.total_trace();
    let probabilities = state
        .blocks
        .iter()
        .map(|(y, b)| (*y, linops::trace(b).re / total))
        .collect();
    SignalDistribution {
        probabilities,
        total,
    }
}

/// `Σ_y ϱ(y)`.
pub fn marginal_state(state: &ResolvedState) -> CMatrix {
    state
        .blocks
        .values()
        .fold(CMatrix::zeros(state.dim, state.dim), |acc, b| acc + b)
}

/// Signal values reachable from the rule's initial value, in ascending order.
pub fn reachable_signals<F, R>(family: &F, rule: &R, max_states: usize) -> Result<Vec<Signal>>
where
    F: InstrumentFamily + ?Sized,
    R: SignalRule + ?Sized,
{
    let declared: Option<BTreeSet<Signal>> = rule.space().enumerate().map(|v| v.into_iter().collect());
    let start = rule.initial();
    let mut seen = BTreeSet::from([start]);
    let mut queue = VecDeque::from([start]);
    while let Some(y) = queue.pop_front() {
        let set = lookup(family, y)?;
        for outcome in set.outcomes() {
            let next = rule.update(outcome, y);
            if let Some(space) = &declared {
                if !space.contains(&next) {
                    return Err(Error::Config(format!(
                        "signal {next} reached from {y} lies outside the declared signal space"
                    )));
                }
            }
            if seen.insert(next) {
                if seen.len() > max_states {
                    return Err(Error::Config(format!(
                        "more than {max_states} reachable signal values; the signal space is not finite"
                    )));
                }
                queue.push_back(next);
            }
        }
    }
    Ok(seen.into_iter().collect())
}

/// Block transfer matrix `Λ` over `signals`: block `(y, y')` is
/// `Σ_{x'} δ_{y, f(x', y')} M_{x'}(y')`.
pub fn transfer_matrix<F, R>(family: &F, rule: &R, signals: &[Signal]) -> Result<CMatrix>
where
    F: InstrumentFamily + ?Sized,
    R: SignalRule + ?Sized,
{
    let d2 = family.dim() * family.dim();
    let index: BTreeMap<Signal, usize> = signals.iter().enumerate().map(|(i, y)| (*y, i)).collect();
    let mut lambda = CMatrix::zeros(signals.len() * d2, signals.len() * d2);
    for (col, &y_prev) in signals.iter().enumerate() {
        let set = lookup(family, y_prev)?;
        for (outcome, map) in set.outcomes().iter().zip(set.maps()) {
            let y = rule.update(outcome, y_prev);
            let row = *index.get(&y).ok_or_else(|| {
                Error::Config(format!("signal {y} is not among the listed signal values"))
            })?;
            let mut view = lambda.view_mut((row * d2, col * d2), (d2, d2));
            view += map.matrix();
        }
    }
    Ok(lambda)
}

/// Tolerance on the unit eigenvalue of the transfer matrix.
pub const STATIONARY_TOL: f64 = 1e-8;

/// Stationary signal-resolved state: the unit-eigenvalue eigenvector of the
/// block transfer matrix over the reachable signal values.
pub fn stationary_resolved<F, R>(family: &F, rule: &R, max_states: usize) -> Result<ResolvedState>
where
    F: InstrumentFamily + ?Sized,
    R: SignalRule + ?Sized,
{
    let signals = reachable_signals(family, rule, max_states)?;
    let lambda = transfer_matrix(family, rule, &signals)?;
    let pair = linops::eig_near(&lambda, ONE, STATIONARY_TOL)?;
    let d = family.dim();
    let d2 = d * d;
    let blocks_raw: Vec<CMatrix> = (0..signals.len())
        .map(|i| {
            let v = CVector::from_iterator(d2, pair.vector.rows(i * d2, d2).iter().copied());
            linops::unvec(&v, d).expect("block length is d²")
        })
        .collect();
    let total: linops::C64 = blocks_raw.iter().map(linops::trace).sum();
    if total.norm() < 1e-300 {
        return Err(Error::NoFixedPoint {
            target: ONE,
            nearest: pair.value,
            distance: (pair.value - ONE).norm(),
            tol: STATIONARY_TOL,
        });
    }
    let mut blocks = BTreeMap::new();
    for (y, b) in signals.into_iter().zip(blocks_raw) {
        let b = linops::hermitian_part(&(b / total));
        if linops::trace(&b).re.abs() >= PRUNE_THRESHOLD {
            blocks.insert(y, b);
        }
    }
    let _ = c;
    Ok(ResolvedState {
        dim: d,
        blocks,
        step: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linops::{ket_bra, SuperOp};
    use crate::model::{self, jump_instruments, random_density, thermal_qubit, Outcome};
    use crate::signals::{Charge, LastOutcome};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn coin() -> InstrumentSet {
        let h = CMatrix::identity(2, 2) * c(0.5f64.sqrt(), 0.0);
        InstrumentSet::from_kraus(
            vec![Outcome::labelled(1), Outcome::labelled(-1)],
            vec![vec![h.clone()], vec![h]],
        )
        .unwrap()
    }

    #[test]
    fn identity_instrument_leaves_state_unchanged() {
        let set = InstrumentSet::from_kraus(vec![Outcome::labelled(0)], vec![vec![CMatrix::identity(2, 2)]])
            .unwrap();
        let rule = LastOutcome::new([0], 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s0 = ResolvedState::new(random_density(&mut rng, 2), Signal::Int(0));
        assert_eq!(step(&s0, &set, &rule).unwrap().blocks(), s0.blocks());
        assert_eq!(evolve_n(&s0, &set, &rule, 0).unwrap(), s0);
    }

    #[test]
    fn binomial_charge_distribution() {
        let rule = Charge::new([(1, 1), (-1, 0)], 1.0, (0, 20), 0).unwrap();
        let s0 = ResolvedState::new(ket_bra(2, 0, 0), Signal::Int(0));
        let n = 10;
        let dist = signal_distribution(&evolve_n(&s0, &coin(), &rule, n).unwrap());
        let mut binom = 1.0;
        for k in 0..=n {
            let p = binom / 2f64.powi(n as i32);
            assert!((dist.get(Signal::Int(k as i64)) - p).abs() <= 1e-14);
            binom = binom * (n - k) as f64 / (k + 1) as f64;
        }
        assert!(dist.deviation() <= 1e-12);
    }

    #[test]
    fn decay_one_step_distribution() {
        let gamma: f64 = 0.8;
        let dt = 1e-3;
        let m = model::QuantumModel::fully_monitored(
            CMatrix::zeros(2, 2),
            vec![model::Jump::new(-1, model::sigma_minus() * c(gamma.sqrt(), 0.0))],
        )
        .unwrap();
        let set = jump_instruments(&m, dt).unwrap();
        let rule = LastOutcome::new([0, -1], 0).unwrap();
        let s = step(&ResolvedState::new(ket_bra(2, 1, 1), Signal::Int(0)), &set, &rule).unwrap();
        let dist = signal_distribution(&s);
        assert!((dist.get(Signal::Int(-1)) - gamma * dt).abs() <= 1e-15);
        assert!((dist.get(Signal::Int(0)) - (1.0 - gamma * dt)).abs() <= 1e-15);
    }

    #[test]
    fn missing_instrument_names_signal() {
        let table = SignalTable::new(BTreeMap::from([(Signal::Int(1), coin())]), None).unwrap();
        let rule = LastOutcome::new([1, -1], 1).unwrap();
        let s = step(&ResolvedState::new(ket_bra(2, 0, 0), Signal::Int(1)), &table, &rule).unwrap();
        match step(&s, &table, &rule) {
            Err(Error::Config(msg)) => assert!(msg.contains("-1"), "{msg}"),
            other => panic!("expected configuration error, got {other:?}"),
        }
    }

    #[test]
    fn brute_force_guard() {
        let rule = LastOutcome::new([1, -1], 1).unwrap();
        assert!(matches!(
            brute_force_resolved(&ket_bra(2, 0, 0), &coin(), &rule, 21),
            Err(Error::TooLarge { .. })
        ));
        let s = brute_force_resolved(&ket_bra(2, 0, 0), &coin(), &rule, 1).unwrap();
        assert!((s.total_trace() - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn thermal_stationary_is_gibbs() {
        for nbar in [0.5, 1.0, 2.0] {
            let m = thermal_qubit(1.0, nbar, CMatrix::zeros(2, 2)).unwrap();
            let set = jump_instruments(&m, 1e-2).unwrap();
            let rule = LastOutcome::new([0, -1, 1], 0).unwrap();
            let ss = stationary_resolved(&set, &rule, 64).unwrap();
            let pe = marginal_state(&ss)[(1, 1)].re;
            assert!((pe - nbar / (2.0 * nbar + 1.0)).abs() <= 1e-10);
            let again = step(&ss, &set, &rule).unwrap();
            assert!(again.max_difference(&ss) <= 1e-9);
        }
    }

    #[test]
    fn identity_stationary_is_degenerate() {
        let set = InstrumentSet::from_superops(vec![Outcome::labelled(0)], vec![SuperOp::identity(2)]).unwrap();
        let rule = LastOutcome::new([0], 0).unwrap();
        assert!(matches!(
            stationary_resolved(&set, &rule, 8),
            Err(Error::Degenerate { .. })
        ));
    }
}
