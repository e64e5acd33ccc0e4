#![allow(dead_code)]

use rand::Rng;
use signalrho::linops::{self, c};
use signalrho::{CMatrix, InstrumentSet, Outcome};

pub fn random_matrix<R: Rng>(rng: &mut R, dim: usize) -> CMatrix {
    CMatrix::from_fn(dim, dim, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
}

pub fn random_hermitian<R: Rng>(rng: &mut R, dim: usize) -> CMatrix {
    linops::hermitian_part(&random_matrix(rng, dim))
}

/// Random instrument with the given labels: each outcome gets one or two
/// Kraus operators, jointly normalized by `S^{-1/2}` with `S = Σ K†K`.
pub fn random_instrument<R: Rng>(rng: &mut R, dim: usize, labels: &[i64]) -> InstrumentSet {
    let raw: Vec<Vec<CMatrix>> = labels
        .iter()
        .map(|_| {
            let n = rng.random_range(1..=2);
            (0..n).map(|_| random_matrix(rng, dim)).collect()
        })
        .collect();
    let s = raw
        .iter()
        .flatten()
        .fold(CMatrix::zeros(dim, dim), |acc, k| acc + k.adjoint() * k);
    let inv_sqrt = linops::hermitian_function(&s, |x| c(1.0 / x.sqrt(), 0.0));
    let kraus = raw
        .into_iter()
        .map(|ops| ops.into_iter().map(|k| k * &inv_sqrt).collect())
        .collect();
    InstrumentSet::from_kraus(labels.iter().map(|&l| Outcome::labelled(l)).collect(), kraus)
        .expect("valid instrument")
}

pub fn projector(dim: usize, i: usize) -> CMatrix {
    linops::ket_bra(dim, i, i)
}

pub fn gibbs_pe(nbar: f64) -> f64 {
    nbar / (2.0 * nbar + 1.0)
}
