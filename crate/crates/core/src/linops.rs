//! Dense complex linear algebra shared by every engine.
//!
//! Vectorization is column stacking throughout: `vec(X)[i + d*j] = X[(i, j)]`,
//! so that `vec(A X B) = (Bᵀ ⊗ A) vec(X)`. With the qubit basis ordered
//! `(g, e)` this gives the vectorized ordering `(gg, eg, ge, ee)`.

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use nalgebra::{DMatrix, DVector, Schur, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

pub fn real_diag(entries: &[f64]) -> CMatrix {
    CMatrix::from_diagonal(&CVector::from_iterator(
        entries.len(),
        entries.iter().map(|&x| c(x, 0.0)),
    ))
}

/// `|row⟩⟨col|` in a `dim`-dimensional space.
pub fn ket_bra(dim: usize, row: usize, col: usize) -> CMatrix {
    let mut m = CMatrix::zeros(dim, dim);
    m[(row, col)] = ONE;
    m
}

pub fn vec(m: &CMatrix) -> Result<CVector> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "vec expects a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    // nalgebra storage is column-major, which is exactly column stacking
    Ok(CVector::from_column_slice(m.as_slice()))
}

pub fn unvec(v: &CVector, dim: usize) -> Result<CMatrix> {
    if v.len() != dim * dim {
        return Err(Error::Dimension(format!(
            "cannot unvec length {} into {dim}x{dim}",
            v.len()
        )));
    }
    Ok(CMatrix::from_column_slice(dim, dim, v.as_slice()))
}

pub fn kron(a: &CMatrix, b: &CMatrix) -> CMatrix {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = CMatrix::zeros(ar * br, ac * bc);
    for j in 0..ac {
        for i in 0..ar {
            let aij = a[(i, j)];
            if aij == ZERO {
                continue;
            }
            for q in 0..bc {
                for p in 0..br {
                    out[(i * br + p, j * bc + q)] = aij * b[(p, q)];
                }
            }
        }
    }
    out
}

pub fn trace(m: &CMatrix) -> C64 {
    m.diagonal().iter().sum()
}

/// Largest entry modulus.
pub fn max_abs(m: &CMatrix) -> f64 {
    m.iter().fold(0.0, |acc, z| acc.max(z.norm()))
}

pub fn norm1(m: &CMatrix) -> f64 {
    m.column_iter()
        .map(|col| col.iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn is_finite(m: &CMatrix) -> bool {
    m.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

pub fn check_finite(m: &CMatrix, role: &str) -> Result<()> {
    if is_finite(m) {
        Ok(())
    } else {
        Err(Error::NonFinite(role.to_string()))
    }
}

pub fn hermiticity_defect(m: &CMatrix) -> f64 {
    max_abs(&(m - m.adjoint()))
}

pub fn is_hermitian(m: &CMatrix, tol: f64) -> bool {
    m.is_square() && hermiticity_defect(m) <= tol
}

pub fn hermitian_part(m: &CMatrix) -> CMatrix {
    (m + m.adjoint()) * c(0.5, 0.0)
}

/// Eigenvalues of the Hermitian part, ascending.
pub fn hermitian_eigenvalues(m: &CMatrix) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(hermitian_part(m))
        .eigenvalues
        .iter()
        .copied()
        .collect();
    ev.sort_by(f64::total_cmp);
    ev
}

pub fn min_eigenvalue(m: &CMatrix) -> f64 {
    hermitian_eigenvalues(m).first().copied().unwrap_or(0.0)
}

/// Hermitian within `tol` and no eigenvalue below `-tol`.
pub fn is_psd(m: &CMatrix, tol: f64) -> bool {
    is_hermitian(m, tol) && min_eigenvalue(m) >= -tol
}

/// Apply `f` to the eigenvalues of a Hermitian matrix.
pub fn hermitian_function(m: &CMatrix, f: impl Fn(f64) -> C64) -> CMatrix {
    let eig = SymmetricEigen::new(hermitian_part(m));
    let u = &eig.eigenvectors;
    let diag = CVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|&x| f(x)));
    u * CMatrix::from_diagonal(&diag) * u.adjoint()
}

// Padé [13/13] coefficients for scaling and squaring.
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA13: f64 = 5.371920351148152;

/// `exp(t·a)` by scaling and squaring with a degree-13 Padé approximant.
pub fn expm(a: &CMatrix, t: f64) -> Result<CMatrix> {
    if !a.is_square() {
        return Err(Error::Dimension(format!(
            "expm expects a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if !t.is_finite() {
        return Err(Error::NonFinite("expm time argument".into()));
    }
    check_finite(a, "expm argument")?;
    let n = a.nrows();
    if t == 0.0 || n == 0 {
        return Ok(CMatrix::identity(n, n));
    }
    let scaled = a * c(t, 0.0);
    let norm = norm1(&scaled);
    if norm == 0.0 {
        return Ok(CMatrix::identity(n, n));
    }
    let s = if norm > THETA13 {
        (norm / THETA13).log2().ceil() as i32
    } else {
        0
    };
    let x = scaled * c(0.5f64.powi(s), 0.0);
    let id = CMatrix::identity(n, n);
    let x2 = &x * &x;
    let x4 = &x2 * &x2;
    let x6 = &x4 * &x2;
    let b = |k: usize| c(PADE13[k], 0.0);

    let u_inner = &x6 * (&x6 * b(13) + &x4 * b(11) + &x2 * b(9));
    let u = &x * (u_inner + &x6 * b(7) + &x4 * b(5) + &x2 * b(3) + &id * b(1));
    let v_inner = &x6 * (&x6 * b(12) + &x4 * b(10) + &x2 * b(8));
    let v = v_inner + &x6 * b(6) + &x4 * b(4) + &x2 * b(2) + &id * b(0);

    let denom = &v - &u;
    let numer = &v + &u;
    let mut r = denom
        .lu()
        .solve(&numer)
        .ok_or_else(|| Error::Singular {
            role: "Padé denominator in expm".into(),
            cond: f64::INFINITY,
        })?;
    for _ in 0..s {
        r = &r * &r;
    }
    check_finite(&r, "expm result")?;
    Ok(r)
}

/// Condition numbers above this are treated as singular.
pub const SINGULAR_CONDITION: f64 = 1e13;

pub fn inverse(a: &CMatrix, role: &str) -> Result<CMatrix> {
    let n = a.nrows();
    solve(a, &CMatrix::identity(n, n), role)
}

/// Solve `a·X = b`. `role` names the matrix in singularity errors.
pub fn solve(a: &CMatrix, b: &CMatrix, role: &str) -> Result<CMatrix> {
    if !a.is_square() || a.nrows() != b.nrows() {
        return Err(Error::Dimension(format!(
            "solve: {role} is {}x{} but right-hand side has {} rows",
            a.nrows(),
            a.ncols(),
            b.nrows()
        )));
    }
    check_finite(a, role)?;
    check_finite(b, "right-hand side")?;
    let n = a.nrows();
    let lu = a.clone().lu();
    let inv = lu.solve(&CMatrix::identity(n, n)).ok_or_else(|| Error::Singular {
        role: role.to_string(),
        cond: f64::INFINITY,
    })?;
    let cond = norm1(a) * norm1(&inv);
    if !cond.is_finite() || cond > SINGULAR_CONDITION {
        return Err(Error::Singular {
            role: role.to_string(),
            cond,
        });
    }
    lu.solve(b).ok_or_else(|| Error::Singular {
        role: role.to_string(),
        cond,
    })
}

pub fn eigenvalues(a: &CMatrix) -> Result<Vec<C64>> {
    if !a.is_square() {
        return Err(Error::Dimension("eigenvalues of a non-square matrix".into()));
    }
    check_finite(a, "eigenproblem matrix")?;
    let n = a.nrows();
    let schur = Schur::try_new(a.clone(), f64::EPSILON, 10_000 * n.max(1))
        .ok_or(Error::NoConvergence(n))?;
    let ev = schur.eigenvalues().ok_or(Error::NoConvergence(n))?;
    Ok(ev.iter().copied().collect())
}

/// Largest real part of the spectrum.
pub fn spectral_abscissa(a: &CMatrix) -> Result<f64> {
    Ok(eigenvalues(a)?
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max))
}

#[derive(Clone, Debug)]
pub struct Eigenpair {
    pub value: C64,
    /// Unit 2-norm; phase and scale are left to the caller.
    pub vector: CVector,
}

/// Eigenpair whose eigenvalue is nearest `target`.
///
/// Fails when nothing lies within `tol` of `target`, and refuses to choose
/// when a second eigenvalue is also within `tol`.
pub fn eig_near(a: &CMatrix, target: C64, tol: f64) -> Result<Eigenpair> {
    let mut ev = eigenvalues(a)?;
    if ev.is_empty() {
        return Err(Error::Dimension("eigenproblem on an empty matrix".into()));
    }
    ev.sort_by(|x, y| (x - target).norm().total_cmp(&(y - target).norm()));
    let nearest = ev[0];
    let distance = (nearest - target).norm();
    if distance > tol {
        return Err(Error::NoFixedPoint {
            target,
            nearest,
            distance,
            tol,
        });
    }
    if ev.len() > 1 && (ev[1] - target).norm() <= tol {
        return Err(Error::Degenerate {
            target,
            first: nearest,
            second: ev[1],
            tol,
        });
    }
    let vector = inverse_iteration(a, nearest)?;
    Ok(Eigenpair {
        value: nearest,
        vector,
    })
}

fn inverse_iteration(a: &CMatrix, value: C64) -> Result<CVector> {
    let n = a.nrows();
    let scale = norm1(a).max(1.0);
    let mut shift_offset = 1e-13 * scale;
    // a fixed, generic start vector keeps the result reproducible
    let start = CVector::from_iterator(n, (0..n).map(|i| c(1.0 + 0.37 * i as f64, 0.11 * i as f64)));
    for _ in 0..8 {
        let mut shifted = a.clone();
        let mu = value + c(shift_offset, 0.0);
        for i in 0..n {
            shifted[(i, i)] -= mu;
        }
        let lu = shifted.lu();
        let mut v = start.normalize();
        let mut ok = true;
        for _ in 0..6 {
            match lu.solve(&v) {
                Some(w) if w.iter().all(|z| z.re.is_finite() && z.im.is_finite()) && w.norm() > 0.0 => {
                    v = w.normalize();
                }
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            return Ok(v);
        }
        shift_offset *= 100.0;
    }
    Err(Error::NoConvergence(n))
}

/// A linear map on `d×d` matrices stored as its `d²×d²` column-stacked matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SuperOp {
    dim: usize,
    matrix: CMatrix,
}

impl SuperOp {
    pub fn from_matrix(dim: usize, matrix: CMatrix) -> Result<Self> {
        let n = dim * dim;
        if matrix.shape() != (n, n) {
            return Err(Error::Dimension(format!(
                "superoperator on dimension {dim} needs a {n}x{n} matrix, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        Ok(SuperOp { dim, matrix })
    }

    pub fn identity(dim: usize) -> Self {
        SuperOp {
            dim,
            matrix: CMatrix::identity(dim * dim, dim * dim),
        }
    }

    pub fn zero(dim: usize) -> Self {
        SuperOp {
            dim,
            matrix: CMatrix::zeros(dim * dim, dim * dim),
        }
    }

    /// `ρ ↦ a ρ b`.
    pub fn sandwich(a: &CMatrix, b: &CMatrix) -> Self {
        SuperOp {
            dim: a.nrows(),
            matrix: kron(&b.transpose(), a),
        }
    }

    /// `ρ ↦ a ρ`.
    pub fn left(a: &CMatrix) -> Self {
        let d = a.nrows();
        Self::sandwich(a, &CMatrix::identity(d, d))
    }

    /// `ρ ↦ ρ b`.
    pub fn right(b: &CMatrix) -> Self {
        let d = b.nrows();
        Self::sandwich(&CMatrix::identity(d, d), b)
    }

    /// `ρ ↦ l ρ l†`.
    pub fn conjugation(l: &CMatrix) -> Self {
        SuperOp {
            dim: l.nrows(),
            matrix: kron(&l.map(|z| z.conj()), l),
        }
    }

    /// `ρ ↦ -i[h, ρ]`.
    pub fn commutator(h: &CMatrix) -> Self {
        (Self::left(h) - Self::right(h)) * (-I)
    }

    /// `ρ ↦ {a, ρ}`.
    pub fn anticommutator(a: &CMatrix) -> Self {
        Self::left(a) + Self::right(a)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> CMatrix {
        self.matrix
    }

    pub fn apply(&self, rho: &CMatrix) -> CMatrix {
        let v = CVector::from_column_slice(rho.as_slice());
        let out = &self.matrix * v;
        CMatrix::from_column_slice(self.dim, self.dim, out.as_slice())
    }

    /// Accumulate `self(rho)` into `out` without allocating.
    pub fn apply_add(&self, rho: &CMatrix, out: &mut CMatrix) {
        let n = self.dim * self.dim;
        let x = rho.as_slice();
        let y = out.as_mut_slice();
        for j in 0..n {
            let xj = x[j];
            if xj == ZERO {
                continue;
            }
            let col = self.matrix.column(j);
            for (yi, mij) in y.iter_mut().zip(col.iter()) {
                *yi += mij * xj;
            }
        }
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &SuperOp) -> SuperOp {
        SuperOp {
            dim: self.dim,
            matrix: &self.matrix * &other.matrix,
        }
    }

    pub fn expm(&self, t: f64) -> Result<SuperOp> {
        Ok(SuperOp {
            dim: self.dim,
            matrix: expm(&self.matrix, t)?,
        })
    }

    /// The row vector `vec(I)†·T`, i.e. the functional `ρ ↦ Tr[T ρ]`.
    pub fn dual_identity(&self) -> CVector {
        let d = self.dim;
        let n = d * d;
        CVector::from_iterator(
            n,
            (0..n).map(|j| (0..d).map(|a| self.matrix[(a + a * d, j)]).sum()),
        )
    }

    /// `max_j |(vec(I)†·T − vec(I)†)_j|`; zero for trace-preserving maps.
    pub fn trace_preservation_defect(&self) -> f64 {
        let d = self.dim;
        self.dual_identity()
            .iter()
            .enumerate()
            .map(|(j, z)| {
                let target = if j % (d + 1) == 0 { 1.0 } else { 0.0 };
                (z - c(target, 0.0)).norm()
            })
            .fold(0.0, f64::max)
    }

    /// `max_j |(vec(I)†·T)_j|`; zero for generators of trace-preserving flows.
    pub fn trace_annihilation_defect(&self) -> f64 {
        self.dual_identity()
            .iter()
            .fold(0.0, |acc, z| acc.max(z.norm()))
    }

    /// Choi matrix `Σ_ij |i⟩⟨j| ⊗ T(|i⟩⟨j|)`.
    pub fn choi(&self) -> CMatrix {
        let d = self.dim;
        let mut out = CMatrix::zeros(d * d, d * d);
        for i in 0..d {
            for j in 0..d {
                let image = self.apply(&ket_bra(d, i, j));
                for p in 0..d {
                    for q in 0..d {
                        out[(i * d + p, j * d + q)] = image[(p, q)];
                    }
                }
            }
        }
        out
    }

    /// Rebuild the matrix from the action on the basis `|i⟩⟨j|`.
    pub fn from_action(dim: usize, f: impl Fn(&CMatrix) -> CMatrix) -> Self {
        let n = dim * dim;
        let mut matrix = CMatrix::zeros(n, n);
        for j in 0..dim {
            for i in 0..dim {
                let image = f(&ket_bra(dim, i, j));
                let col = i + dim * j;
                for (row, z) in image.as_slice().iter().enumerate() {
                    matrix[(row, col)] = *z;
                }
            }
        }
        SuperOp { dim, matrix }
    }
}

impl Add for SuperOp {
    type Output = SuperOp;
    fn add(self, rhs: SuperOp) -> SuperOp {
        SuperOp {
            dim: self.dim,
            matrix: self.matrix + rhs.matrix,
        }
    }
}

impl<'a> Add<&'a SuperOp> for &'a SuperOp {
    type Output = SuperOp;
    fn add(self, rhs: &SuperOp) -> SuperOp {
        SuperOp {
            dim: self.dim,
            matrix: &self.matrix + &rhs.matrix,
        }
    }
}

impl AddAssign<&SuperOp> for SuperOp {
    fn add_assign(&mut self, rhs: &SuperOp) {
        self.matrix += &rhs.matrix;
    }
}

impl Sub for SuperOp {
    type Output = SuperOp;
    fn sub(self, rhs: SuperOp) -> SuperOp {
        SuperOp {
            dim: self.dim,
            matrix: self.matrix - rhs.matrix,
        }
    }
}

impl<'a> Sub<&'a SuperOp> for &'a SuperOp {
    type Output = SuperOp;
    fn sub(self, rhs: &SuperOp) -> SuperOp {
        SuperOp {
            dim: self.dim,
            matrix: &self.matrix - &rhs.matrix,
        }
    }
}

impl Neg for SuperOp {
    type Output = SuperOp;
    fn neg(self) -> SuperOp {
        SuperOp {
            dim: self.dim,
            matrix: -self.matrix,
        }
    }
}

impl Mul<C64> for SuperOp {
    type Output = SuperOp;
    fn mul(self, rhs: C64) -> SuperOp {
        SuperOp {
            dim: self.dim,
            matrix: self.matrix * rhs,
        }
    }
}

impl Mul<f64> for SuperOp {
    type Output = SuperOp;
    fn mul(self, rhs: f64) -> SuperOp {
        self * c(rhs, 0.0)
    }
}

impl<'a> Mul<&'a SuperOp> for &'a SuperOp {
    type Output = SuperOp;
    fn mul(self, rhs: &SuperOp) -> SuperOp {
        self.compose(rhs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> CMatrix {
        CMatrix::from_fn(rows, cols, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
    }

    #[test]
    fn vec_of_identity_and_single_entry() {
        let v = vec(&CMatrix::identity(2, 2)).unwrap();
        assert_eq!(v.as_slice(), &[ONE, ZERO, ZERO, ONE]);
        // |g⟩⟨e| with g = 0, e = 1 sits at row 0, column 1 -> index 0 + 2*1
        let v = vec(&ket_bra(2, 0, 1)).unwrap();
        assert_eq!(v.as_slice(), &[ZERO, ZERO, ONE, ZERO]);
    }

    #[test]
    fn vec_rejects_non_square() {
        assert!(matches!(vec(&CMatrix::zeros(2, 3)), Err(Error::Dimension(_))));
    }

    #[test]
    fn vec_of_product_matches_kron() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_matrix(&mut rng, 3, 3);
        let x = random_matrix(&mut rng, 3, 3);
        let b = random_matrix(&mut rng, 3, 3);
        let lhs = vec(&(&a * &x * &b)).unwrap();
        let rhs = kron(&b.transpose(), &a) * vec(&x).unwrap();
        assert!((lhs - rhs).camax() <= 1e-13);
    }

    #[test]
    fn kron_examples() {
        assert_eq!(kron(&CMatrix::identity(2, 2), &CMatrix::identity(2, 2)), CMatrix::identity(4, 4));
        assert_eq!(
            kron(&real_diag(&[1.0, 2.0]), &real_diag(&[3.0, 4.0])),
            real_diag(&[3.0, 4.0, 6.0, 8.0])
        );
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b, cc, d) = (
            random_matrix(&mut rng, 2, 2),
            random_matrix(&mut rng, 2, 2),
            random_matrix(&mut rng, 2, 2),
            random_matrix(&mut rng, 2, 2),
        );
        let lhs = kron(&(&a * &cc), &(&b * &d));
        let rhs = kron(&a, &b) * kron(&cc, &d);
        assert!((lhs - rhs).camax() <= 1e-13);
    }

    #[test]
    fn expm_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(&mut rng, 4, 4);
        assert_eq!(expm(&a, 0.0).unwrap(), CMatrix::identity(4, 4));

        let e = expm(&real_diag(&[-1.0, -2.0]), 1.0).unwrap();
        let want = real_diag(&[(-1.0f64).exp(), (-2.0f64).exp()]);
        assert!((e - &want).camax() <= 1e-15);

        // nilpotent shift: the series terminates after the linear term
        let n = ket_bra(2, 0, 1);
        let e = expm(&n, 1.0).unwrap();
        assert!((e - (CMatrix::identity(2, 2) + &n)).camax() <= 1e-15);
    }

    #[test]
    fn expm_matches_truncated_series_for_large_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_matrix(&mut rng, 5, 5) * c(3.0, 0.0);
        // oracle: exp(A) = exp(A/2^k)^(2^k) with a long Taylor series for the small factor
        let k = 10;
        let small = &a * c(0.5f64.powi(k), 0.0);
        let mut term = CMatrix::identity(5, 5);
        let mut sum = term.clone();
        for j in 1..30 {
            term = &term * &small * c(1.0 / j as f64, 0.0);
            sum += &term;
        }
        for _ in 0..k {
            sum = &sum * &sum;
        }
        let e = expm(&a, 1.0).unwrap();
        assert!((&e - &sum).camax() / sum.camax() <= 1e-10);
    }

    #[test]
    fn expm_rejects_nan() {
        let mut a = CMatrix::identity(2, 2);
        a[(0, 1)] = c(f64::NAN, 0.0);
        assert!(matches!(expm(&a, 1.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn solve_examples() {
        let b = CMatrix::from_fn(2, 2, |i, j| c(i as f64 + 1.0, j as f64));
        assert!((solve(&CMatrix::identity(2, 2), &b, "identity").unwrap() - &b).camax() == 0.0);
        let x = solve(&real_diag(&[2.0, 4.0]), &CMatrix::identity(2, 2), "diag").unwrap();
        assert!((x - real_diag(&[0.5, 0.25])).camax() <= 1e-15);
    }

    #[test]
    fn solve_reports_singular_role() {
        let a = real_diag(&[1.0, 0.0]);
        match solve(&a, &CMatrix::identity(2, 2), "test generator") {
            Err(Error::Singular { role, .. }) => assert_eq!(role, "test generator"),
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn eig_near_examples() {
        let pair = eig_near(&real_diag(&[1.0, 0.5, 0.2]), ONE, 1e-8).unwrap();
        assert!((pair.value - ONE).norm() <= 1e-12);
        assert!((pair.vector[0].norm() - 1.0).abs() <= 1e-12);
        assert!(pair.vector[1].norm() <= 1e-12 && pair.vector[2].norm() <= 1e-12);

        assert!(matches!(
            eig_near(&CMatrix::identity(4, 4), ONE, 1e-8),
            Err(Error::Degenerate { .. })
        ));
        assert!(matches!(
            eig_near(&real_diag(&[0.5, 0.2]), ONE, 1e-8),
            Err(Error::NoFixedPoint { .. })
        ));
    }

    #[test]
    fn eig_near_non_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_matrix(&mut rng, 6, 6);
        let ev = eigenvalues(&a).unwrap();
        let pair = eig_near(&a, ev[2], 1e-8).unwrap();
        let resid = &a * &pair.vector - &pair.vector * pair.value;
        assert!(resid.camax() <= 1e-10);
    }

    #[test]
    fn superop_constructors_act_as_documented() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_matrix(&mut rng, 3, 3);
        let b = random_matrix(&mut rng, 3, 3);
        let x = random_matrix(&mut rng, 3, 3);
        assert!((SuperOp::sandwich(&a, &b).apply(&x) - &a * &x * &b).camax() <= 1e-13);
        assert!((SuperOp::conjugation(&a).apply(&x) - &a * &x * a.adjoint()).camax() <= 1e-13);
        let comm = SuperOp::commutator(&a).apply(&x);
        assert!((comm - (&a * &x - &x * &a) * (-I)).camax() <= 1e-13);
        let mut acc = CMatrix::zeros(3, 3);
        SuperOp::sandwich(&a, &b).apply_add(&x, &mut acc);
        assert!((acc - &a * &x * &b).camax() <= 1e-13);
    }

    #[test]
    fn trace_preserving_row_identity() {
        assert_eq!(SuperOp::identity(3).trace_preservation_defect(), 0.0);
        let t = SuperOp::conjugation(&(CMatrix::identity(2, 2) * c(2f64.sqrt(), 0.0)));
        assert!((t.trace_preservation_defect() - 1.0).abs() <= 1e-14);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn matrix(n: usize) -> impl Strategy<Value = CMatrix> {
            proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), n * n)
                .prop_map(move |v| CMatrix::from_iterator(n, n, v.into_iter().map(|(r, i)| c(r, i))))
        }

        proptest! {
            #[test]
            fn unvec_inverts_vec(m in matrix(3)) {
                prop_assert_eq!(unvec(&vec(&m).unwrap(), 3).unwrap(), m);
            }

            #[test]
            fn mixed_product(a in matrix(2), b in matrix(2), cc in matrix(2), d in matrix(2)) {
                let lhs = kron(&(&a * &cc), &(&b * &d));
                let rhs = kron(&a, &b) * kron(&cc, &d);
                prop_assert!((lhs - rhs).camax() <= 1e-12);
            }

            #[test]
            fn expm_semigroup(a in matrix(3), s in 0.0f64..1.5, t in 0.0f64..1.5) {
                let lhs = expm(&a, s).unwrap() * expm(&a, t).unwrap();
                let rhs = expm(&a, s + t).unwrap();
                prop_assert!((&lhs - &rhs).camax() <= 1e-10 * rhs.camax().max(1.0));
            }

            #[test]
            fn solve_residual(a in matrix(4), b in matrix(4)) {
                let a = a + CMatrix::identity(4, 4) * c(3.0, 0.0);
                let x = solve(&a, &b, "random").unwrap();
                prop_assert!((&a * x - &b).camax() <= 1e-10 * b.camax().max(1e-300));
            }
        }
    }
}
