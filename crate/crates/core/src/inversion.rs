//! Population inversion of a thermal qubit by jump-triggered driving: after an
//! emission and a delay `τ₀` without absorption, a resonant drive `λσ_x` is
//! switched on for a duration `τ₁`.

use std::collections::BTreeMap;

use log::warn;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::jump::{omega_map, steady_unconditional, ChannelSchedule, FeedbackSchedule};
use crate::linops::{self, c, CMatrix, SuperOp};
use crate::model::{jump_superop, nojump_generator, sigma_x, sigma_z, thermal_qubit, QuantumModel};

/// Label of the emission channel, which triggers the drive.
pub const EMISSION: i64 = -1;
/// Label of the absorption channel.
pub const ABSORPTION: i64 = 1;

/// Smallest occupation used by the numerical route; the tail generator is
/// not Hurwitz at `N̄ = 0`.
pub const NBAR_EPSILON: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InversionParams {
    pub gamma: f64,
    pub nbar: f64,
    pub lambda: f64,
    pub detuning: f64,
    pub tau0: f64,
    pub tau1: f64,
}

impl InversionParams {
    pub fn new(gamma: f64, nbar: f64, lambda: f64, tau0: f64, tau1: f64) -> Result<Self> {
        let p = InversionParams {
            gamma,
            nbar,
            lambda,
            detuning: 0.0,
            tau0,
            tau1,
        };
        p.validate()?;
        Ok(p)
    }

    /// Same parameters with `τ₁ = τ₁opt(γ, λ)`.
    pub fn optimal(gamma: f64, nbar: f64, lambda: f64, tau0: f64) -> Result<Self> {
        Self::new(gamma, nbar, lambda, tau0, tau1_opt(gamma, lambda)?)
    }

    pub fn with_detuning(mut self, detuning: f64) -> Result<Self> {
        self.detuning = detuning;
        self.validate()?;
        Ok(self)
    }

    pub fn with_nbar(mut self, nbar: f64) -> Result<Self> {
        self.nbar = nbar;
        self.validate()?;
        Ok(self)
    }

    pub fn ratio(&self) -> f64 {
        self.gamma / self.lambda
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.gamma, self.nbar, self.lambda, self.detuning, self.tau0, self.tau1]
            .iter()
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::Config("inversion parameters must be finite".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Config(format!("γ must be > 0, got {}", self.gamma)));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config(format!("λ must be ≥ 0, got {}", self.lambda)));
        }
        if self.nbar < 0.0 {
            return Err(Error::Config(format!("N̄ must be ≥ 0, got {}", self.nbar)));
        }
        if self.tau0 < 0.0 || self.tau1 < 0.0 {
            return Err(Error::Config(format!(
                "delays must be ≥ 0 (τ₀={}, τ₁={})",
                self.tau0, self.tau1
            )));
        }
        Ok(())
    }

    fn hamiltonians(&self) -> (CMatrix, CMatrix) {
        let off = sigma_z() * c(-0.5 * self.detuning, 0.0);
        let on = &off + sigma_x() * c(self.lambda, 0.0);
        (off, on)
    }

    fn models(&self) -> Result<(QuantumModel, QuantumModel)> {
        let (h_off, h_on) = self.hamiltonians();
        let off = thermal_qubit(self.gamma, self.nbar, h_off)?;
        let on = off.with_hamiltonian(h_on)?;
        Ok((off, on))
    }
}

/// Absorption: always off. Emission: off on `[0,τ₀)`, on on `[τ₀, τ₀+τ₁)`,
/// off afterwards. Empty segments are omitted.
pub fn build_schedule(params: &InversionParams) -> Result<FeedbackSchedule> {
    params.validate()?;
    let (off, on) = params.models()?;
    let emission = if params.lambda == 0.0 || params.tau1 == 0.0 {
        ChannelSchedule::constant(off.clone())
    } else if params.tau0 == 0.0 {
        ChannelSchedule::new(vec![(0.0, on), (params.tau1, off.clone())])?
    } else {
        ChannelSchedule::new(vec![
            (0.0, off.clone()),
            (params.tau0, on),
            (params.tau0 + params.tau1, off.clone()),
        ])?
    };
    FeedbackSchedule::new(BTreeMap::from([
        (EMISSION, emission),
        (ABSORPTION, ChannelSchedule::constant(off)),
    ]))
}

/// `P_e` of the steady state from the fixed point of `Ω`.
///
/// Occupations below [`NBAR_EPSILON`] are evaluated at `NBAR_EPSILON`.
/// Populations are unchanged by the σ_z rotation back from the rotating
/// frame, so no frame transformation is applied.
pub fn pe_numeric(params: &InversionParams) -> Result<f64> {
    let mut p = *params;
    if p.nbar < NBAR_EPSILON {
        warn!(
            "N̄ = {:e} is below {NBAR_EPSILON:e}; evaluating at N̄ = {NBAR_EPSILON:e}",
            p.nbar
        );
        p.nbar = NBAR_EPSILON;
    }
    let rho = steady_state(&p)?;
    Ok(rho[(1, 1)].re)
}

/// The rotating-frame steady state `ρ̄_ss` from the Ω route.
pub fn steady_state(params: &InversionParams) -> Result<CMatrix> {
    let schedule = build_schedule(params)?;
    steady_unconditional(&omega_map(&schedule)?.omega)
}

/// The explicit two-phase expression
/// `−𝓛_off⁻¹𝓙₊ + {−𝓛_off⁻¹ + (𝓛_off⁻¹ − 𝓛_on⁻¹)e^{τ₀𝓛_off} + (𝓛_on⁻¹ − 𝓛_off⁻¹)e^{τ₁𝓛_on}e^{τ₀𝓛_off}}𝓙₋`.
pub fn omega_closed_form(params: &InversionParams) -> Result<SuperOp> {
    params.validate()?;
    let (off, on) = params.models()?;
    let l_off = nojump_generator(&off);
    let l_on = nojump_generator(&on);
    let inv_off = linops::inverse(l_off.matrix(), "drive-off no-jump generator")?;
    let inv_on = linops::inverse(l_on.matrix(), "drive-on no-jump generator")?;
    let e0 = l_off.expm(params.tau0)?.into_matrix();
    let e1 = l_on.expm(params.tau1)?.into_matrix();
    let j_plus = jump_superop(off.jump(ABSORPTION).expect("thermal model"));
    let j_minus = jump_superop(off.jump(EMISSION).expect("thermal model"));
    let bracket = -&inv_off + (&inv_off - &inv_on) * &e0 + (&inv_on - &inv_off) * &e1 * &e0;
    let omega = -&inv_off * j_plus.matrix() + bracket * j_minus.matrix();
    SuperOp::from_matrix(2, omega)
}

struct Xi {
    value: Complex64,
    /// `∂ξ/∂τ₁`.
    d_tau1: Complex64,
}

fn xi(params: &InversionParams) -> Result<Xi> {
    if params.detuning != 0.0 {
        return Err(Error::Domain(format!(
            "the closed form requires zero detuning, got Δ = {}",
            params.detuning
        )));
    }
    if !(params.nbar > 0.0) {
        return Err(Error::Domain(
            "the closed form needs N̄ > 0; use pe_zero_temp for N̄ = 0".into(),
        ));
    }
    let (g, n, l, t0, t1) = (params.gamma, params.nbar, params.lambda, params.tau0, params.tau1);
    let u = 2.0 * n + 1.0;
    let delta = n * (n + 1.0) * g * g + 4.0 * l * l;
    let wr = Complex64::new(g * g - 16.0 * l * l, 0.0).sqrt();
    let ep = (wr * (0.5 * t1)).exp();
    let em = (-wr * (0.5 * t1)).exp();
    let damp = 2.0 * l * l * (-(n * t0 + 0.5 * u * t1) * g).exp();
    let b = 4.0 * delta + 8.0 * u * l * l * (ep + em) - (n + 1.0) * g * u * (wr * (ep - em) + g * (ep + em));
    let db = 0.5 * wr * (8.0 * u * l * l * (ep - em) - (n + 1.0) * g * u * (wr * (ep + em) + g * (ep - em)));
    let psi = damp * b;
    let dpsi = damp * (db - 0.5 * u * g * b);
    let wr2 = wr * wr;
    let pre = (n + 1.0) / (n * u * wr2 * delta);
    let value = pre * (u * wr2 * delta - 4.0 * (1.0 + n) * l * l * wr2 * (-n * t0 * g).exp() - psi);
    Ok(Xi {
        value,
        d_tau1: -pre * dpsi,
    })
}

/// `P_e = 1/(1+ξ)` from the closed-form ξ, evaluated in complex arithmetic.
pub fn pe_analytic(params: &InversionParams) -> Result<f64> {
    Ok(pe_analytic_complex(params)?.re)
}

/// The complex value of `1/(1+ξ)`; its imaginary part is round-off only.
pub fn pe_analytic_complex(params: &InversionParams) -> Result<Complex64> {
    let x = xi(params)?;
    Ok(1.0 / (1.0 + x.value))
}

/// `∂P_e/∂τ₁` of the closed form, differentiated exactly.
pub fn pe_analytic_dtau1(params: &InversionParams) -> Result<f64> {
    let x = xi(params)?;
    Ok((-x.d_tau1 / ((1.0 + x.value) * (1.0 + x.value))).re)
}

fn check_ratio(gamma: f64, lambda: f64) -> Result<f64> {
    if !(gamma > 0.0 && lambda > 0.0) {
        return Err(Error::Domain(format!("γ and λ must be > 0 (γ={gamma}, λ={lambda})")));
    }
    let p = gamma / lambda;
    if p >= 4.0 {
        return Err(Error::Divergent(format!(
            "optimal drive duration is infinite for γ/λ = {p} ≥ 4"
        )));
    }
    Ok(p)
}

/// `τ₁opt = 2[2π + arctan(p√(16−p²)/(8−p²)) − πθ(√8−p)] / (λ√(16−p²))`,
/// evaluated as `2[π + atan2(p√(16−p²), 8−p²)] / (λ√(16−p²))`, which is the
/// same function and continuous through `p = √8`.
pub fn tau1_opt(gamma: f64, lambda: f64) -> Result<f64> {
    let p = check_ratio(gamma, lambda)?;
    let s = (16.0 - p * p).sqrt();
    Ok(2.0 * (std::f64::consts::PI + (p * s).atan2(8.0 - p * p)) / (lambda * s))
}

/// `lim_{N̄→0} P_e` at `τ₁ = τ₁opt`.
pub fn pe_zero_temp(gamma: f64, lambda: f64, tau0: f64) -> Result<f64> {
    let t1 = tau1_opt(gamma, lambda)?;
    let p = gamma / lambda;
    Ok(1.0 / (2.0 - (-gamma * t1 / 2.0).exp() + 0.25 * p * p + gamma * tau0))
}

/// Largest delay with `P_e ≥ ½` at zero temperature; zero when inversion is
/// impossible.
pub fn tau0_max(gamma: f64, lambda: f64) -> Result<f64> {
    let t1 = tau1_opt(gamma, lambda)?;
    let p = gamma / lambda;
    Ok(((4.0 * (-gamma * t1 / 2.0).exp() - p * p) / (4.0 * gamma)).max(0.0))
}

/// Bisection on a sign change of `f` in `[a, b]`.
fn bisect(mut a: f64, mut b: f64, f: impl Fn(f64) -> Result<f64>, xtol: f64) -> Result<f64> {
    let mut fa = f(a)?;
    let fb = f(b)?;
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    if fa.signum() == fb.signum() {
        return Err(Error::Domain(format!(
            "no sign change on [{a}, {b}] ({fa:e}, {fb:e})"
        )));
    }
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if (b - a).abs() <= xtol {
            return Ok(m);
        }
        let fm = f(m)?;
        if fm == 0.0 {
            return Ok(m);
        }
        if fm.signum() == fa.signum() {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    Ok(0.5 * (a + b))
}

/// Numerical argmax of `pe_analytic` over `τ₁`: a global grid scan over
/// `(0, τ_max]` followed by bisection on the exact `∂P_e/∂τ₁`.
pub fn tau1_argmax(params: &InversionParams, tau_max: f64) -> Result<f64> {
    let n = 4000;
    let h_grid = tau_max / n as f64;
    let at = |t1: f64| pe_analytic(&InversionParams { tau1: t1, ..*params });
    let mut best = (0usize, f64::NEG_INFINITY);
    for i in 1..=n {
        let v = at(i as f64 * h_grid)?;
        if v > best.1 {
            best = (i, v);
        }
    }
    if best.0 == n {
        return Err(Error::Domain(format!(
            "P_e still increasing at τ₁ = {tau_max}; no interior maximum"
        )));
    }
    // Near γ/λ = 4 the maximum is flat to ~1e-9 in P_e, far below what
    // differences of P_e values resolve; the exact derivative is not.
    let deriv = |t1: f64| pe_analytic_dtau1(&InversionParams { tau1: t1, ..*params });
    let a = (best.0 as f64 - 3.0).max(0.5) * h_grid;
    let b = (best.0 as f64 + 3.0).min(n as f64) * h_grid;
    bisect(a, b, deriv, 1e-12)
}

/// `γ/λ` at which `pe_numeric = ½` for `τ₀ = 0`, `τ₁ = τ₁opt`, with `λ = 1`,
/// searched in `[lo, hi]`.
pub fn threshold_ratio(nbar: f64, lo: f64, hi: f64) -> Result<f64> {
    bisect(
        lo,
        hi,
        |p| pe_numeric(&InversionParams::optimal(p, nbar, 1.0, 0.0)?).map(|x| x - 0.5),
        1e-10,
    )
}

/// Critical occupation `N̄_c` with `P_e(N̄_c) = ½` at `τ₀ = 0`, `τ₁ = τ₁opt`,
/// or `None` if no inversion occurs even at `N̄ → 0`.
pub fn critical_nbar(gamma: f64, lambda: f64) -> Result<Option<f64>> {
    let f = |n: f64| pe_analytic(&InversionParams::optimal(gamma, n, lambda, 0.0)?).map(|x| x - 0.5);
    if f(NBAR_EPSILON)? <= 0.0 {
        return Ok(None);
    }
    let mut hi = 1.0;
    while f(hi)? > 0.0 {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::Domain("no crossing below N̄ = 1e6".into()));
        }
    }
    bisect(NBAR_EPSILON, hi, f, 1e-12).map(Some)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub gamma: f64,
    /// `γ/λ` values for panels (b) and (c).
    pub ratios: Vec<f64>,
    pub nbar: Vec<f64>,
    /// `γτ₀` values for panel (c).
    pub gamma_tau0: Vec<f64>,
    /// `γ/λ` values for panel (d).
    pub ratios_d: Vec<f64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            gamma: 1.0,
            ratios: vec![0.25, 0.5, 0.75, 1.0, 1.145],
            nbar: (0..=50).map(|i| 0.01 * i as f64).collect(),
            gamma_tau0: (0..=50).map(|i| 0.02 * i as f64).collect(),
            ratios_d: (1..=399).map(|i| 0.01 * i as f64).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<f64>>,
}

/// Panel (b): `P_e` vs `N̄` per `γ/λ` at `τ₀ = 0`, `τ₁ = τ₁opt`, with the
/// no-feedback value alongside.
pub fn panel_b(spec: &SweepSpec) -> Result<Table> {
    let points: Vec<(f64, f64)> = spec
        .ratios
        .iter()
        .flat_map(|&r| spec.nbar.iter().map(move |&n| (r, n)))
        .collect();
    let rows = points
        .par_iter()
        .map(|&(r, n)| {
            let p = InversionParams::optimal(spec.gamma, n, spec.gamma / r, 0.0)?;
            Ok(vec![r, n, pe_numeric(&p)?, n / (2.0 * n + 1.0)])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Table {
        header: vec!["gamma_over_lambda", "nbar", "pe", "pe_no_feedback"],
        rows,
    })
}

/// Panel (c): `P_e` vs `γτ₀` per `γ/λ` at `N̄ → 0`.
pub fn panel_c(spec: &SweepSpec) -> Result<Table> {
    let points: Vec<(f64, f64)> = spec
        .ratios
        .iter()
        .flat_map(|&r| spec.gamma_tau0.iter().map(move |&t| (r, t)))
        .collect();
    let rows = points
        .par_iter()
        .map(|&(r, gt)| {
            let lambda = spec.gamma / r;
            let tau0 = gt / spec.gamma;
            let p = InversionParams::optimal(spec.gamma, NBAR_EPSILON, lambda, tau0)?;
            Ok(vec![r, gt, pe_numeric(&p)?, pe_zero_temp(spec.gamma, lambda, tau0)?])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Table {
        header: vec!["gamma_over_lambda", "gamma_tau0", "pe", "pe_zero_temp"],
        rows,
    })
}

/// Panel (d): `γτ₁opt` and `γτ₀max` vs `γ/λ` at `N̄ = 0`.
pub fn panel_d(spec: &SweepSpec) -> Result<Table> {
    let rows = spec
        .ratios_d
        .iter()
        .map(|&r| {
            let lambda = spec.gamma / r;
            Ok(vec![
                r,
                spec.gamma * tau1_opt(spec.gamma, lambda)?,
                spec.gamma * tau0_max(spec.gamma, lambda)?,
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Table {
        header: vec!["gamma_over_lambda", "gamma_tau1_opt", "gamma_tau0_max"],
        rows,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Panel {
    B,
    C,
    D,
}

pub fn sweep_figures(spec: &SweepSpec, panel: Panel) -> Result<Table> {
    match panel {
        Panel::B => panel_b(spec),
        Panel::C => panel_c(spec),
        Panel::D => panel_d(spec),
    }
}
