//! Causal signal update rules `y' = f(x, y)`.
//!
//! Every signal value is stored as a [`Signal`], an integer key: labels and
//! charges directly, elapsed times as step counts, and real-valued signals as
//! bin indices. Keys order the sparse block storage of the engines.

use std::collections::BTreeSet;
use std::fmt;

use crate::error::{Error, Result};
use crate::model::{Outcome, NO_JUMP};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Signal {
    Int(i64),
    Pair(i64, i64),
}

impl Signal {
    pub fn int(self) -> Option<i64> {
        match self {
            Signal::Int(v) => Some(v),
            Signal::Pair(..) => None,
        }
    }

    pub fn pair(self) -> Option<(i64, i64)> {
        match self {
            Signal::Pair(a, b) => Some((a, b)),
            Signal::Int(_) => None,
        }
    }
}

impl fmt::Display for Signal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Signal::Int(v) => write!(f, "{v}"),
            Signal::Pair(a, b) => write!(f, "({a},{b})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SignalSpace {
    Finite(Vec<Signal>),
    /// Integers `lo..=hi`.
    Lattice { lo: i64, hi: i64 },
    /// `[lo, hi]` cut into bins of `width`; bin `i` is centred at `lo + i·width`.
    Binned { lo: f64, hi: f64, width: f64 },
    /// Non-negative integers with no upper bound.
    Counter,
    Product(Box<SignalSpace>, Box<SignalSpace>),
}

impl SignalSpace {
    /// All members, or `None` if the space is unbounded.
    pub fn enumerate(&self) -> Option<Vec<Signal>> {
        match self {
            SignalSpace::Finite(v) => Some(v.clone()),
            SignalSpace::Lattice { lo, hi } => Some((*lo..=*hi).map(Signal::Int).collect()),
            SignalSpace::Binned { lo, hi, width } => {
                let n = bin_count(*lo, *hi, *width);
                Some((0..n as i64).map(Signal::Int).collect())
            }
            SignalSpace::Counter => None,
            SignalSpace::Product(a, b) => {
                let (a, b) = (a.enumerate()?, b.enumerate()?);
                let mut out = Vec::with_capacity(a.len() * b.len());
                for x in &a {
                    for y in &b {
                        out.push(Signal::Pair(x.int()?, y.int()?));
                    }
                }
                Some(out)
            }
        }
    }
}

fn bin_count(lo: f64, hi: f64, width: f64) -> usize {
    ((hi - lo) / width).round() as usize + 1
}

/// A deterministic, causal update of a classical signal.
pub trait SignalRule: Send + Sync {
    fn initial(&self) -> Signal;

    fn update(&self, outcome: &Outcome, signal: Signal) -> Signal;

    fn space(&self) -> SignalSpace;

    /// Physical value of a signal key (label, charge, time or bin centre).
    fn value(&self, signal: Signal) -> f64 {
        match signal {
            Signal::Int(v) => v as f64,
            Signal::Pair(a, _) => a as f64,
        }
    }

    fn iterate(&self, outcomes: &[Outcome]) -> Signal {
        outcomes
            .iter()
            .fold(self.initial(), |y, x| self.update(x, y))
    }
}

/// `y_n = x_n`.
#[derive(Clone, Debug)]
pub struct LastOutcome {
    labels: Vec<i64>,
    initial: i64,
}

impl LastOutcome {
    pub fn new(labels: impl IntoIterator<Item = i64>, initial: i64) -> Result<Self> {
        let labels: BTreeSet<i64> = labels.into_iter().collect();
        if labels.is_empty() {
            return Err(Error::Config("last-outcome signal needs at least one outcome".into()));
        }
        if !labels.contains(&initial) {
            return Err(Error::Config(format!(
                "initial signal {initial} is not an outcome label"
            )));
        }
        Ok(LastOutcome {
            labels: labels.into_iter().collect(),
            initial,
        })
    }
}

impl SignalRule for LastOutcome {
    fn initial(&self) -> Signal {
        Signal::Int(self.initial)
    }

    fn update(&self, outcome: &Outcome, _signal: Signal) -> Signal {
        Signal::Int(outcome.label)
    }

    fn space(&self) -> SignalSpace {
        SignalSpace::Finite(self.labels.iter().copied().map(Signal::Int).collect())
    }
}

/// Exponentially filtered outcome value, `y' = γδt·x + e^{−γδt}·y`, re-binned.
#[derive(Clone, Debug)]
pub struct LowPass {
    alpha: f64,
    decay: f64,
    lo: f64,
    hi: f64,
    width: f64,
    initial: i64,
}

impl LowPass {
    /// Number of bins used when no width is given.
    pub const DEFAULT_BINS: usize = 512;

    pub fn new(
        bandwidth: f64,
        dt: f64,
        range: (f64, f64),
        width: Option<f64>,
        initial: f64,
    ) -> Result<Self> {
        let (lo, hi) = range;
        if !(bandwidth > 0.0 && dt > 0.0) {
            return Err(Error::Config(format!(
                "low-pass filter needs γ > 0 and δt > 0, got γ = {bandwidth}, δt = {dt}"
            )));
        }
        if !(hi > lo) {
            return Err(Error::Config(format!("empty low-pass range [{lo}, {hi}]")));
        }
        let width = width.unwrap_or((hi - lo) / Self::DEFAULT_BINS as f64);
        if !(width > 0.0) {
            return Err(Error::Config(format!("bin width {width} must be positive")));
        }
        let mut rule = LowPass {
            alpha: bandwidth * dt,
            decay: (-bandwidth * dt).exp(),
            lo,
            hi,
            width,
            initial: 0,
        };
        rule.initial = rule.bin(initial);
        Ok(rule)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    /// The filter recursion before re-quantization.
    pub fn raw_update(&self, x: f64, y: f64) -> f64 {
        self.alpha * x + self.decay * y
    }

    /// Nearest bin; values outside the range land in the edge bins.
    pub fn bin(&self, y: f64) -> i64 {
        let n = bin_count(self.lo, self.hi, self.width) as i64;
        (((y - self.lo) / self.width).round() as i64).clamp(0, n - 1)
    }

    pub fn centre(&self, bin: i64) -> f64 {
        self.lo + bin as f64 * self.width
    }
}

impl SignalRule for LowPass {
    fn initial(&self) -> Signal {
        Signal::Int(self.initial)
    }

    fn update(&self, outcome: &Outcome, signal: Signal) -> Signal {
        let y = self.value(signal);
        Signal::Int(self.bin(self.raw_update(outcome.value, y)))
    }

    fn space(&self) -> SignalSpace {
        SignalSpace::Binned {
            lo: self.lo,
            hi: self.hi,
            width: self.width,
        }
    }

    fn value(&self, signal: Signal) -> f64 {
        self.centre(signal.int().unwrap_or(0))
    }
}

/// Stochastic charge `N' = N + ν_x`, in integer multiples of a base unit.
#[derive(Clone, Debug)]
pub struct Charge {
    weights: Vec<(i64, i64)>,
    unit: f64,
    window: (i64, i64),
    initial: i64,
}

impl Charge {
    /// `weights` maps jump labels to integer charge steps; unlisted outcomes
    /// (including no-jump) leave the charge unchanged.
    pub fn new(
        weights: impl IntoIterator<Item = (i64, i64)>,
        unit: f64,
        window: (i64, i64),
        initial: i64,
    ) -> Result<Self> {
        let weights: Vec<(i64, i64)> = weights.into_iter().collect();
        if weights.iter().any(|(k, _)| *k == NO_JUMP) {
            return Err(Error::Config("the no-jump outcome carries zero charge".into()));
        }
        if window.0 > window.1 || initial < window.0 || initial > window.1 {
            return Err(Error::Config(format!(
                "charge window {window:?} must be ordered and contain the initial charge {initial}"
            )));
        }
        Ok(Charge {
            weights,
            unit,
            window,
            initial,
        })
    }

    pub fn weight(&self, label: i64) -> i64 {
        self.weights
            .iter()
            .find(|(k, _)| *k == label)
            .map(|(_, w)| *w)
            .unwrap_or(0)
    }

    pub fn weights(&self) -> &[(i64, i64)] {
        &self.weights
    }

    pub fn window(&self) -> (i64, i64) {
        self.window
    }
}

impl SignalRule for Charge {
    fn initial(&self) -> Signal {
        Signal::Int(self.initial)
    }

    fn update(&self, outcome: &Outcome, signal: Signal) -> Signal {
        Signal::Int(signal.int().unwrap_or(0) + self.weight(outcome.label))
    }

    fn space(&self) -> SignalSpace {
        SignalSpace::Lattice {
            lo: self.window.0,
            hi: self.window.1,
        }
    }

    fn value(&self, signal: Signal) -> f64 {
        signal.int().unwrap_or(0) as f64 * self.unit
    }
}

/// Channel of the most recent jump, `k' = x + k·δ_{x,0}`.
#[derive(Clone, Debug)]
pub struct LastJump {
    channels: Vec<i64>,
    initial: i64,
}

impl LastJump {
    pub fn new(channels: impl IntoIterator<Item = i64>, initial: i64) -> Result<Self> {
        let channels: BTreeSet<i64> = channels.into_iter().collect();
        if channels.is_empty() {
            return Err(Error::Config("last-jump signal needs at least one channel".into()));
        }
        if !channels.contains(&initial) {
            return Err(Error::Config(format!(
                "initial last-jump channel {initial} is not a monitored channel"
            )));
        }
        Ok(LastJump {
            channels: channels.into_iter().collect(),
            initial,
        })
    }

    pub fn channels(&self) -> &[i64] {
        &self.channels
    }
}

impl SignalRule for LastJump {
    fn initial(&self) -> Signal {
        Signal::Int(self.initial)
    }

    fn update(&self, outcome: &Outcome, signal: Signal) -> Signal {
        if outcome.label == NO_JUMP {
            signal
        } else {
            Signal::Int(outcome.label)
        }
    }

    fn space(&self) -> SignalSpace {
        SignalSpace::Finite(self.channels.iter().copied().map(Signal::Int).collect())
    }
}

/// Steps elapsed since the last jump, `τ' = δ_{x,0}(τ + δt)`; the key counts steps.
#[derive(Clone, Debug)]
pub struct Counting {
    dt: f64,
}

impl Counting {
    pub fn new(dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::Config(format!("counting signal needs δt > 0, got {dt}")));
        }
        Ok(Counting { dt })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }
}

impl SignalRule for Counting {
    fn initial(&self) -> Signal {
        Signal::Int(0)
    }

    fn update(&self, outcome: &Outcome, signal: Signal) -> Signal {
        if outcome.label == NO_JUMP {
            Signal::Int(signal.int().unwrap_or(0) + 1)
        } else {
            Signal::Int(0)
        }
    }

    fn space(&self) -> SignalSpace {
        SignalSpace::Counter
    }

    fn value(&self, signal: Signal) -> f64 {
        signal.int().unwrap_or(0) as f64 * self.dt
    }
}

/// Two scalar rules iterated side by side; the key is `Signal::Pair`.
#[derive(Clone, Debug)]
pub struct Joint<A, B> {
    pub first: A,
    pub second: B,
}

impl<A: SignalRule, B: SignalRule> Joint<A, B> {
    pub fn new(first: A, second: B) -> Self {
        Joint { first, second }
    }

    pub fn split(signal: Signal) -> (Signal, Signal) {
        match signal {
            Signal::Pair(a, b) => (Signal::Int(a), Signal::Int(b)),
            Signal::Int(a) => (Signal::Int(a), Signal::Int(0)),
        }
    }
}

fn join(a: Signal, b: Signal) -> Signal {
    Signal::Pair(a.int().unwrap_or(0), b.int().unwrap_or(0))
}

impl<A: SignalRule, B: SignalRule> SignalRule for Joint<A, B> {
    fn initial(&self) -> Signal {
        join(self.first.initial(), self.second.initial())
    }

    fn update(&self, outcome: &Outcome, signal: Signal) -> Signal {
        let (a, b) = Self::split(signal);
        join(self.first.update(outcome, a), self.second.update(outcome, b))
    }

    fn space(&self) -> SignalSpace {
        SignalSpace::Product(Box::new(self.first.space()), Box::new(self.second.space()))
    }
}

/// The `(last jump, elapsed time)` signal.
pub type JumpTime = Joint<LastJump, Counting>;

pub fn jump_time(channels: impl IntoIterator<Item = i64>, initial: i64, dt: f64) -> Result<JumpTime> {
    Ok(Joint::new(LastJump::new(channels, initial)?, Counting::new(dt)?))
}

impl<R: SignalRule + ?Sized> SignalRule for Box<R> {
    fn initial(&self) -> Signal {
        (**self).initial()
    }
    fn update(&self, outcome: &Outcome, signal: Signal) -> Signal {
        (**self).update(outcome, signal)
    }
    fn space(&self) -> SignalSpace {
        (**self).space()
    }
    fn value(&self, signal: Signal) -> f64 {
        (**self).value(signal)
    }
}
