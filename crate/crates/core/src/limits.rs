//! Deterministic equations for three classic feedback limits: feedback
//! triggered by the most recent jump, diffusive (homodyne-type) feedback and
//! feedback on a counted charge.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::linops::{self, c, CMatrix, SuperOp, I};
use crate::model::{dissipator, jump_superop, nojump_generator, QuantumModel};

/// Generator `−i[H,·] + Σ_k (𝓕(k)[L_k·L_k†] − ½{L_k†L_k, ·})`.
///
/// Channels without an entry in `feedback` get the identity; unmonitored
/// jumps never trigger feedback.
pub fn single_jump_feedback_generator(
    model: &QuantumModel,
    feedback: &BTreeMap<i64, SuperOp>,
) -> Result<SuperOp> {
    let d = model.dim();
    for (k, f) in feedback {
        if f.dim() != d {
            return Err(Error::Dimension(format!(
                "feedback map for channel {k} acts on dimension {} instead of {d}",
                f.dim()
            )));
        }
        if model.jump(*k).is_none() {
            return Err(Error::Validation(format!("feedback given for unknown channel {k}")));
        }
        let defect = f.trace_preservation_defect();
        if defect > 1e-10 {
            return Err(Error::Validation(format!(
                "feedback map for channel {k} is not trace preserving (defect {defect:.3e})"
            )));
        }
    }
    let mut gen = nojump_generator(model);
    for j in model.monitored_jumps() {
        let jump = jump_superop(&j.op);
        match feedback.get(&j.label) {
            Some(f) => gen += &f.compose(&jump),
            None => gen += &jump,
        }
    }
    Ok(gen)
}

/// `𝓕 = e^{𝓚}`.
pub fn feedback_from_generator(k: &SuperOp) -> Result<SuperOp> {
    k.expm(1.0)
}

fn require_hermitian(m: &CMatrix, role: &str) -> Result<()> {
    let tol = 1e-12 * linops::max_abs(m).max(1.0);
    if !linops::is_hermitian(m, tol) {
        return Err(Error::Validation(format!(
            "{role} is not Hermitian (defect {:.3e})",
            linops::hermiticity_defect(m)
        )));
    }
    Ok(())
}

/// `−i[H,ρ] + D[√λA]ρ + D[F]ρ − i[F, √λ(Aρ + ρA)]`.
pub fn diffusion_feedback_generator(
    h: &CMatrix,
    a: &CMatrix,
    lambda: f64,
    f: &CMatrix,
) -> Result<SuperOp> {
    require_hermitian(h, "Hamiltonian")?;
    require_hermitian(a, "measured observable")?;
    require_hermitian(f, "feedback Hamiltonian")?;
    if !(lambda >= 0.0) {
        return Err(Error::Validation(format!("measurement rate must be ≥ 0, got {lambda}")));
    }
    let s = lambda.sqrt();
    let sa = a * c(s, 0.0);
    let fa = f * &sa;
    let af = &sa * f;
    let cross = SuperOp::left(&fa) + SuperOp::sandwich(f, &sa)
        - SuperOp::sandwich(&sa, f)
        - SuperOp::right(&af);
    Ok(SuperOp::commutator(h) + dissipator(&sa) + dissipator(f) + cross * (-I))
}

/// Equivalent Lindblad form `−i[H + (√λ/2)(AF + FA), ·] + D[√λA − iF]`.
pub fn diffusion_feedback_lindblad_form(
    h: &CMatrix,
    a: &CMatrix,
    lambda: f64,
    f: &CMatrix,
) -> Result<SuperOp> {
    require_hermitian(h, "Hamiltonian")?;
    require_hermitian(a, "measured observable")?;
    require_hermitian(f, "feedback Hamiltonian")?;
    let s = lambda.sqrt();
    let h_eff = h + (a * f + f * a) * c(0.5 * s, 0.0);
    let l = a * c(s, 0.0) - f * I;
    Ok(SuperOp::commutator(&h_eff) + dissipator(&l))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundaryPolicy {
    /// Jumps that would leave the window leave the charge unchanged.
    Reflecting,
    /// Jumps out of the window are lost; the lost trace is reported.
    Absorbing,
}

/// Charge lattice `N ∈ [lo, hi]` in units of the weight base unit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChargeWindow {
    pub lo: i64,
    pub hi: i64,
    pub policy: BoundaryPolicy,
}

impl ChargeWindow {
    pub fn new(lo: i64, hi: i64, policy: BoundaryPolicy) -> Result<Self> {
        if lo > hi {
            return Err(Error::Config(format!("empty charge window [{lo}, {hi}]")));
        }
        Ok(ChargeWindow { lo, hi, policy })
    }

    pub fn len(&self) -> usize {
        (self.hi - self.lo + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, n: i64) -> bool {
        (self.lo..=self.hi).contains(&n)
    }

    fn index(&self, n: i64) -> usize {
        (n - self.lo) as usize
    }
}

/// Allowed leakage through an absorbing boundary.
pub const LEAKAGE_LIMIT: f64 = 1e-6;

/// Block generator of `∂_t ϱ(N) = 𝓛₀(N)ϱ(N) + Σ_k 𝓙_k(N−ν_k)ϱ(N−ν_k)`.
#[derive(Clone, Debug)]
pub struct ChargeGenerator {
    dim: usize,
    window: ChargeWindow,
    weights: BTreeMap<i64, i64>,
    matrix: CMatrix,
    /// `(N, channel)` couplings redirected or dropped at the boundary.
    pub boundary_hits: Vec<(i64, i64)>,
}

/// Charge-resolved generator. `model_at(N)` gives `H(N), L_k(N)`; `weights`
/// maps each monitored channel to its charge increment `ν_k`.
pub fn charge_resolved_generator(
    model_at: impl Fn(i64) -> QuantumModel,
    weights: &BTreeMap<i64, i64>,
    window: ChargeWindow,
) -> Result<ChargeGenerator> {
    let first = model_at(window.lo);
    let d = first.dim();
    let d2 = d * d;
    let m = window.len();
    let mut matrix = CMatrix::zeros(m * d2, m * d2);
    let mut boundary_hits = Vec::new();
    for n in window.lo..=window.hi {
        let model = model_at(n);
        if model.dim() != d {
            return Err(Error::Dimension(format!(
                "model at charge {n} has dimension {} instead of {d}",
                model.dim()
            )));
        }
        let col = window.index(n);
        let mut diag = matrix.view_mut((col * d2, col * d2), (d2, d2));
        diag += nojump_generator(&model).matrix();
        for j in model.monitored_jumps() {
            let nu = *weights.get(&j.label).ok_or_else(|| {
                Error::Config(format!("no charge weight for monitored channel {}", j.label))
            })?;
            let target = n + nu;
            let row = if window.contains(target) {
                Some(window.index(target))
            } else {
                boundary_hits.push((n, j.label));
                match window.policy {
                    BoundaryPolicy::Reflecting => Some(col),
                    BoundaryPolicy::Absorbing => None,
                }
            };
            if let Some(row) = row {
                let mut view = matrix.view_mut((row * d2, col * d2), (d2, d2));
                view += jump_superop(&j.op).matrix();
            }
        }
    }
    Ok(ChargeGenerator {
        dim: d,
        window,
        weights: weights.clone(),
        matrix,
        boundary_hits,
    })
}

impl ChargeGenerator {
    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn window(&self) -> ChargeWindow {
        self.window
    }

    pub fn weights(&self) -> &BTreeMap<i64, i64> {
        &self.weights
    }

    /// `max |(⊕_N vec(I))† generator|`.
    pub fn trace_defect(&self) -> f64 {
        let d = self.dim;
        let d2 = d * d;
        let mut worst: f64 = 0.0;
        for col in 0..self.matrix.ncols() {
            let mut s = linops::ZERO;
            for b in 0..self.window.len() {
                for a in 0..d {
                    s += self.matrix[(b * d2 + a + a * d, col)];
                }
            }
            worst = worst.max(s.norm());
        }
        worst
    }

    /// Evolve `ρ₀` placed at charge `n0` for time `t`.
    pub fn evolve(&self, rho0: &CMatrix, n0: i64, t: f64) -> Result<ChargeState> {
        if !self.window.contains(n0) {
            return Err(Error::Config(format!("initial charge {n0} outside the window")));
        }
        if !(t >= 0.0) {
            return Err(Error::Domain(format!("evolution time must be non-negative, got {t}")));
        }
        let d2 = self.dim * self.dim;
        let mut v = linops::CVector::zeros(self.matrix.nrows());
        v.rows_mut(self.window.index(n0) * d2, d2)
            .copy_from(&linops::vec(rho0)?);
        let out = linops::expm(&self.matrix, t)? * v;
        let blocks: Vec<CMatrix> = (0..self.window.len())
            .map(|i| {
                let part = linops::CVector::from_iterator(d2, out.rows(i * d2, d2).iter().copied());
                linops::unvec(&part, self.dim).expect("block length")
            })
            .collect();
        let state = ChargeState {
            lo: self.window.lo,
            blocks,
            leaked: 0.0,
        };
        let leaked = (linops::trace(rho0).re - state.total_trace()).max(0.0);
        if self.window.policy == BoundaryPolicy::Absorbing && leaked > LEAKAGE_LIMIT {
            return Err(Error::WindowTooSmall {
                leaked,
                limit: LEAKAGE_LIMIT,
            });
        }
        Ok(ChargeState { leaked, ..state })
    }
}

#[derive(Clone, Debug)]
pub struct ChargeState {
    pub lo: i64,
    pub blocks: Vec<CMatrix>,
    /// Trace lost through an absorbing boundary.
    pub leaked: f64,
}

impl ChargeState {
    pub fn block(&self, n: i64) -> Option<&CMatrix> {
        usize::try_from(n - self.lo).ok().and_then(|i| self.blocks.get(i))
    }

    pub fn total_trace(&self) -> f64 {
        self.blocks.iter().map(|b| linops::trace(b).re).sum()
    }

    pub fn marginal(&self) -> CMatrix {
        let d = self.blocks[0].nrows();
        self.blocks.iter().fold(CMatrix::zeros(d, d), |acc, b| acc + b)
    }

    /// `P(N)` for each lattice point, in increasing `N`.
    pub fn distribution(&self) -> Vec<(i64, f64)> {
        self.blocks
            .iter()
            .enumerate()
            .map(|(i, b)| (self.lo + i as i64, linops::trace(b).re))
            .collect()
    }

    /// `Σ_N N·Tr ϱ(N)` in lattice units.
    pub fn mean_charge(&self) -> f64 {
        self.distribution().iter().map(|(n, p)| *n as f64 * p).sum()
    }
}

/// Instantaneous charge current `Σ_k ν_k Tr[𝓙_k ρ]`.
pub fn mean_current(model: &QuantumModel, weights: &BTreeMap<i64, i64>, rho: &CMatrix) -> f64 {
    model
        .monitored_jumps()
        .map(|j| {
            let nu = weights.get(&j.label).copied().unwrap_or(0) as f64;
            nu * linops::trace(&(&j.op * rho * j.op.adjoint())).re
        })
        .sum()
}
