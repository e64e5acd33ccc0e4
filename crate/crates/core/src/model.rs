//! Hamiltonians, jump operators, GKSL generators and instruments.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linops::{self, c, CMatrix, SuperOp, C64};

/// Reserved outcome label for "no jump detected".
pub const NO_JUMP: i64 = 0;

/// A jump operator with its rate absorbed, `L = √rate · A`.
#[derive(Clone, Debug, PartialEq)]
pub struct Jump {
    pub label: i64,
    pub op: CMatrix,
}

impl Jump {
    pub fn new(label: i64, op: CMatrix) -> Self {
        Jump { label, op }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantumModel {
    dim: usize,
    hamiltonian: CMatrix,
    jumps: Vec<Jump>,
    monitored: BTreeSet<i64>,
}

impl QuantumModel {
    pub fn new(
        hamiltonian: CMatrix,
        jumps: Vec<Jump>,
        monitored: impl IntoIterator<Item = i64>,
    ) -> Result<Self> {
        let dim = hamiltonian.nrows();
        if !hamiltonian.is_square() || dim == 0 {
            return Err(Error::Validation(format!(
                "Hamiltonian must be a non-empty square matrix, got {}x{}",
                hamiltonian.nrows(),
                hamiltonian.ncols()
            )));
        }
        linops::check_finite(&hamiltonian, "Hamiltonian")?;
        let defect = linops::hermiticity_defect(&hamiltonian);
        if defect > 1e-12 * linops::max_abs(&hamiltonian).max(1.0) {
            return Err(Error::Validation(format!(
                "Hamiltonian is not Hermitian (max |H - H†| = {defect:.3e})"
            )));
        }
        let mut labels = BTreeSet::new();
        for jump in &jumps {
            if jump.label == NO_JUMP {
                return Err(Error::Validation(format!(
                    "jump label {NO_JUMP} is reserved for the no-jump outcome"
                )));
            }
            if !labels.insert(jump.label) {
                return Err(Error::Validation(format!("duplicate jump label {}", jump.label)));
            }
            if jump.op.shape() != (dim, dim) {
                return Err(Error::Validation(format!(
                    "jump {} has shape {}x{}, expected {dim}x{dim}",
                    jump.label,
                    jump.op.nrows(),
                    jump.op.ncols()
                )));
            }
            linops::check_finite(&jump.op, "jump operator")?;
        }
        let monitored: BTreeSet<i64> = monitored.into_iter().collect();
        if let Some(bad) = monitored.iter().find(|k| !labels.contains(k)) {
            return Err(Error::Validation(format!(
                "monitored label {bad} does not name a jump operator"
            )));
        }
        Ok(QuantumModel {
            dim,
            hamiltonian,
            jumps,
            monitored,
        })
    }

    /// Every jump monitored.
    pub fn fully_monitored(hamiltonian: CMatrix, jumps: Vec<Jump>) -> Result<Self> {
        let labels: Vec<i64> = jumps.iter().map(|j| j.label).collect();
        Self::new(hamiltonian, jumps, labels)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hamiltonian(&self) -> &CMatrix {
        &self.hamiltonian
    }

    pub fn jumps(&self) -> &[Jump] {
        &self.jumps
    }

    pub fn jump(&self, label: i64) -> Option<&CMatrix> {
        self.jumps.iter().find(|j| j.label == label).map(|j| &j.op)
    }

    pub fn monitored(&self) -> &BTreeSet<i64> {
        &self.monitored
    }

    /// Monitored jumps in ascending label order.
    pub fn monitored_jumps(&self) -> impl Iterator<Item = &Jump> {
        self.monitored
            .iter()
            .filter_map(move |k| self.jumps.iter().find(|j| j.label == *k))
    }

    pub fn with_hamiltonian(&self, hamiltonian: CMatrix) -> Result<Self> {
        Self::new(hamiltonian, self.jumps.clone(), self.monitored.iter().copied())
    }

    /// `Σ_k L_k† L_k` over all jumps.
    pub fn decay_operator(&self) -> CMatrix {
        let mut out = CMatrix::zeros(self.dim, self.dim);
        for j in &self.jumps {
            out += j.op.adjoint() * &j.op;
        }
        out
    }
}

/// `ρ ↦ L ρ L†`.
pub fn jump_superop(l: &CMatrix) -> SuperOp {
    SuperOp::conjugation(l)
}

/// `D[L]ρ = LρL† − ½{L†L, ρ}`.
pub fn dissipator(l: &CMatrix) -> SuperOp {
    let ldl = l.adjoint() * l;
    SuperOp::conjugation(l) - SuperOp::anticommutator(&ldl) * 0.5
}

/// `𝓛₀ = 𝓛 − Σ_{k∈Σ} 𝓙_k`: the generator between detected jumps.
pub fn nojump_generator(model: &QuantumModel) -> SuperOp {
    let mut gen = SuperOp::commutator(model.hamiltonian())
        - SuperOp::anticommutator(&model.decay_operator()) * 0.5;
    for j in model.jumps() {
        if !model.monitored().contains(&j.label) {
            gen += &jump_superop(&j.op);
        }
    }
    gen
}

/// The GKSL generator `−i[H,·] + Σ_k (L_k·L_k† − ½{L_k†L_k, ·})`.
///
/// Assembled as the no-jump generator plus the monitored jump terms so that
/// the decomposition `𝓛 = 𝓛₀ + Σ 𝓙_k` holds in floating point exactly.
pub fn liouvillian(model: &QuantumModel) -> SuperOp {
    let mut gen = nojump_generator(model);
    for j in model.monitored_jumps() {
        gen += &jump_superop(&j.op);
    }
    gen
}

/// A measurement outcome: an integer label plus the real value a signal sees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Outcome {
    pub label: i64,
    pub value: f64,
}

impl Outcome {
    pub fn labelled(label: i64) -> Self {
        Outcome {
            label,
            value: label as f64,
        }
    }
}

/// A labelled family of completely positive maps whose sum should be a channel.
#[derive(Clone, Debug)]
pub struct InstrumentSet {
    dim: usize,
    outcomes: Vec<Outcome>,
    maps: Vec<SuperOp>,
    kraus: Vec<Option<Vec<CMatrix>>>,
}

impl InstrumentSet {
    pub fn from_superops(outcomes: Vec<Outcome>, maps: Vec<SuperOp>) -> Result<Self> {
        let n = outcomes.len();
        Self::build(outcomes, maps, vec![None; n])
    }

    pub fn from_kraus(outcomes: Vec<Outcome>, kraus: Vec<Vec<CMatrix>>) -> Result<Self> {
        let maps = kraus
            .iter()
            .map(|ops| {
                let d = ops.first().map(|k| k.nrows()).unwrap_or(0);
                ops.iter().fold(SuperOp::zero(d), |acc, k| acc + SuperOp::conjugation(k))
            })
            .collect();
        Self::build(outcomes, maps, kraus.into_iter().map(Some).collect())
    }

    fn build(
        outcomes: Vec<Outcome>,
        maps: Vec<SuperOp>,
        kraus: Vec<Option<Vec<CMatrix>>>,
    ) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(Error::Validation("instrument set has no outcomes".into()));
        }
        if outcomes.len() != maps.len() {
            return Err(Error::Validation(format!(
                "{} outcomes but {} maps",
                outcomes.len(),
                maps.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for o in &outcomes {
            if !seen.insert(o.label) {
                return Err(Error::Validation(format!("duplicate outcome label {}", o.label)));
            }
        }
        let dim = maps[0].dim();
        if dim == 0 || maps.iter().any(|m| m.dim() != dim) {
            return Err(Error::Validation(
                "instrument maps must share one non-zero dimension".into(),
            ));
        }
        Ok(InstrumentSet {
            dim,
            outcomes,
            maps,
            kraus,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    pub fn outcomes(&self) -> &[Outcome] {
        &self.outcomes
    }

    pub fn maps(&self) -> &[SuperOp] {
        &self.maps
    }

    pub fn map(&self, index: usize) -> &SuperOp {
        &self.maps[index]
    }

    pub fn kraus(&self, index: usize) -> Option<&[CMatrix]> {
        self.kraus[index].as_deref()
    }

    pub fn index_of(&self, label: i64) -> Option<usize> {
        self.outcomes.iter().position(|o| o.label == label)
    }

    /// `Σ_x M_x`.
    pub fn total_channel(&self) -> SuperOp {
        self.maps
            .iter()
            .fold(SuperOp::zero(self.dim), |acc, m| acc + m.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub invariant: &'static str,
    pub outcome: Option<i64>,
    pub worst: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationReport {
    pub passed: bool,
    pub violations: Vec<Violation>,
    /// `max Tr[M_x ρ] − Tr[ρ]` seen over outcomes and trial states.
    pub worst_trace_excess: f64,
    /// `max |Tr[Σ_x M_x ρ] − Tr[ρ]|` over trial states.
    pub worst_sum_defect: f64,
}

/// A random full-rank density matrix.
pub fn random_density<R: Rng>(rng: &mut R, dim: usize) -> CMatrix {
    let g = CMatrix::from_fn(dim, dim, |_, _| {
        c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    });
    let rho = &g * g.adjoint();
    let tr = linops::trace(&rho);
    rho / tr
}

/// A random pure state `|ψ⟩⟨ψ|`.
pub fn random_pure<R: Rng>(rng: &mut R, dim: usize) -> CMatrix {
    let psi = linops::CVector::from_fn(dim, |_, _| {
        c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    })
    .normalize();
    &psi * psi.adjoint()
}

/// Check the instrument axioms on `trials` random states (half mixed, half pure).
pub fn validate_instruments(set: &InstrumentSet, trials: usize, tol: f64) -> ValidationReport {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_1257);
    let mut worst_excess = vec![f64::NEG_INFINITY; set.len()];
    let mut worst_sum = 0.0f64;
    for trial in 0..trials.max(1) {
        let rho = if trial % 2 == 0 {
            random_density(&mut rng, set.dim())
        } else {
            random_pure(&mut rng, set.dim())
        };
        let mut total = 0.0;
        for (idx, map) in set.maps().iter().enumerate() {
            let p = linops::trace(&map.apply(&rho)).re;
            worst_excess[idx] = worst_excess[idx].max(p - 1.0);
            total += p;
        }
        worst_sum = worst_sum.max((total - 1.0).abs());
    }
    let mut violations = Vec::new();
    for (idx, &excess) in worst_excess.iter().enumerate() {
        if excess > tol {
            violations.push(Violation {
                invariant: "trace non-increasing",
                outcome: Some(set.outcomes()[idx].label),
                worst: excess,
            });
        }
    }
    if worst_sum > tol {
        violations.push(Violation {
            invariant: "sum trace-preserving",
            outcome: None,
            worst: worst_sum,
        });
    }
    ValidationReport {
        passed: violations.is_empty(),
        violations,
        worst_trace_excess: worst_excess.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        worst_sum_defect: worst_sum,
    }
}

/// First-order jump instruments: outcome 0 is `1 + δt𝓛₀`, outcome `k ∈ Σ` is `δt𝓙_k`.
pub fn jump_instruments(model: &QuantumModel, dt: f64) -> Result<InstrumentSet> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::StepSize {
            dt,
            reason: "time step must be positive and finite".into(),
        });
    }
    let d = model.dim();
    let l0 = nojump_generator(model);
    let min_diag = (0..d * d)
        .map(|i| 1.0 + dt * l0.matrix()[(i, i)].re)
        .fold(f64::INFINITY, f64::min);
    if min_diag <= 0.0 {
        return Err(Error::StepSize {
            dt,
            reason: format!("1 + δt·𝓛₀ has a non-positive diagonal entry ({min_diag:.3e})"),
        });
    }
    let mut rate_op = CMatrix::zeros(d, d);
    for j in model.monitored_jumps() {
        rate_op += j.op.adjoint() * &j.op;
    }
    let max_rate = linops::hermitian_eigenvalues(&rate_op).last().copied().unwrap_or(0.0);
    if dt * max_rate >= 1.0 {
        return Err(Error::StepSize {
            dt,
            reason: format!("total jump probability per step reaches {:.3}", dt * max_rate),
        });
    }

    let mut outcomes = vec![Outcome::labelled(NO_JUMP)];
    let mut maps = vec![SuperOp::identity(d) + l0 * dt];
    for j in model.monitored_jumps() {
        outcomes.push(Outcome::labelled(j.label));
        maps.push(jump_superop(&j.op) * dt);
    }
    let mut kraus = vec![None];
    kraus.extend(
        model
            .monitored_jumps()
            .map(|j| Some(vec![&j.op * c(dt.sqrt(), 0.0)])),
    );
    let set = InstrumentSet::build(outcomes, maps, kraus)?;
    let report = validate_instruments(&set, 16, 1e-9);
    if !report.passed {
        return Err(Error::StepSize {
            dt,
            reason: format!("instrument validation failed: {:?}", report.violations),
        });
    }
    Ok(set)
}

/// Kraus operator of a weak Gaussian measurement of `a`,
/// `K_x = (2λδt/π)^¼ exp(−λδt (x − A)²)`.
pub fn gaussian_kraus(a: &CMatrix, strength: f64, dt: f64, x: f64) -> Result<CMatrix> {
    if !linops::is_hermitian(a, 1e-12 * linops::max_abs(a).max(1.0)) {
        return Err(Error::Validation("measured observable must be Hermitian".into()));
    }
    if !(strength > 0.0 && dt > 0.0) {
        return Err(Error::Domain(format!(
            "Gaussian measurement needs λ > 0 and δt > 0, got λ = {strength}, δt = {dt}"
        )));
    }
    let k = strength * dt;
    let norm = (2.0 * k / std::f64::consts::PI).powf(0.25);
    Ok(linops::hermitian_function(a, |ev| {
        c(norm * (-k * (x - ev).powi(2)).exp(), 0.0)
    }))
}

/// Gaussian measurement on a uniform outcome grid, preceded by an optional channel.
///
/// Outcome `j` has value `grid[j]` and Kraus operator `√Δx · K_{x_j}`; the sum is
/// trace preserving up to the quadrature error of the grid.
pub fn gaussian_instruments(
    a: &CMatrix,
    strength: f64,
    dt: f64,
    grid: &[f64],
    pre_channel: Option<&SuperOp>,
) -> Result<InstrumentSet> {
    if grid.len() < 2 {
        return Err(Error::Domain("Gaussian outcome grid needs at least two points".into()));
    }
    let dx = (grid[grid.len() - 1] - grid[0]) / (grid.len() - 1) as f64;
    let mut outcomes = Vec::with_capacity(grid.len());
    let mut maps = Vec::with_capacity(grid.len());
    for (j, &x) in grid.iter().enumerate() {
        let k = gaussian_kraus(a, strength, dt, x)? * c(dx.sqrt(), 0.0);
        let mut map = SuperOp::conjugation(&k);
        if let Some(ch) = pre_channel {
            map = map.compose(ch);
        }
        outcomes.push(Outcome {
            label: j as i64,
            value: x,
        });
        maps.push(map);
    }
    InstrumentSet::from_superops(outcomes, maps)
}

/// Lowering operator `|0⟩⟨1|` in the `(g, e)` qubit basis.
pub fn sigma_minus() -> CMatrix {
    linops::ket_bra(2, 0, 1)
}

pub fn sigma_plus() -> CMatrix {
    linops::ket_bra(2, 1, 0)
}

pub fn sigma_x() -> CMatrix {
    sigma_minus() + sigma_plus()
}

/// `σ_z = |g⟩⟨g| − |e⟩⟨e|`, so that `−(ω/2)σ_z` puts `|g⟩` at energy `−ω/2`.
pub fn sigma_z() -> CMatrix {
    linops::real_diag(&[1.0, -1.0])
}

/// Qubit exchanging quanta with a thermal bath: emission `-1`, absorption `+1`.
pub fn thermal_qubit(gamma: f64, nbar: f64, hamiltonian: CMatrix) -> Result<QuantumModel> {
    let lm = sigma_minus() * c((gamma * (nbar + 1.0)).sqrt(), 0.0);
    let lp = sigma_plus() * c((gamma * nbar).sqrt(), 0.0);
    QuantumModel::fully_monitored(hamiltonian, vec![Jump::new(-1, lm), Jump::new(1, lp)])
}

pub fn scalar(x: f64) -> C64 {
    c(x, 0.0)
}
