//! Smearing functions, their entropies, the chemical potential and
//! occupation matrices.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::block_linalg::{hermitian_eigen, is_hermitian};
use crate::error::{Error, Result};

/// Default Marzari-Vanderbilt parameter.
pub const MV_DEFAULT_A: f64 = -0.5634;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SmearingKind {
    FermiDirac,
    Gaussian,
    MethfesselPaxton { order: usize },
    MarzariVanderbilt { a: f64 },
}

impl SmearingKind {
    /// Fermi-Dirac and Gaussian occupations are strictly decreasing.
    pub fn is_monotone(&self) -> bool {
        matches!(self, SmearingKind::FermiDirac | SmearingKind::Gaussian)
    }

    pub fn name(&self) -> &'static str {
        match self {
            SmearingKind::FermiDirac => "fermi-dirac",
            SmearingKind::Gaussian => "gaussian",
            SmearingKind::MethfesselPaxton { .. } => "methfessel-paxton",
            SmearingKind::MarzariVanderbilt { .. } => "marzari-vanderbilt",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmearingSpec {
    pub kind: SmearingKind,
    /// Width in hartree.
    pub sigma: f64,
}

impl SmearingSpec {
    pub fn new(kind: SmearingKind, sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::InvalidSmearing(format!("sigma must be positive, got {sigma}")));
        }
        match kind {
            SmearingKind::MethfesselPaxton { order } if order == 0 => {
                return Err(Error::InvalidSmearing("Methfessel-Paxton order must be >= 1".into()))
            }
            SmearingKind::MarzariVanderbilt { a } if !a.is_finite() => {
                return Err(Error::InvalidSmearing("Marzari-Vanderbilt a must be finite".into()))
            }
            _ => {}
        }
        Ok(Self { kind, sigma })
    }

    pub fn f(&self, x: f64) -> f64 {
        f_value(self.kind, x)
    }

    pub fn fp(&self, x: f64) -> f64 {
        f_prime(self.kind, x)
    }

    pub fn s(&self, x: f64) -> f64 {
        s_value(self.kind, x)
    }
}

/// Physicists' Hermite polynomials H_0..=H_n at x.
fn hermite(n: usize, x: f64) -> Vec<f64> {
    let mut h = vec![1.0; n + 1];
    if n >= 1 {
        h[1] = 2.0 * x;
    }
    for i in 1..n {
        h[i + 1] = 2.0 * x * h[i] - 2.0 * i as f64 * h[i - 1];
    }
    h
}

/// A_i = (-1)^i / (i! 4^i sqrt(pi)).
pub fn mp_coefficient(i: usize) -> f64 {
    let mut fact = 1.0;
    for j in 1..=i {
        fact *= j as f64;
    }
    let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
    sign / (fact * 4f64.powi(i as i32) * PI.sqrt())
}

fn fd_tail(x: f64) -> f64 {
    let e = (-x.abs()).exp();
    e / (1.0 + e)
}

pub fn f_value(kind: SmearingKind, x: f64) -> f64 {
    match kind {
        SmearingKind::FermiDirac => {
            let t = fd_tail(x);
            if x >= 0.0 {
                t
            } else {
                1.0 - t
            }
        }
        SmearingKind::Gaussian => 0.5 * erfc(x),
        SmearingKind::MethfesselPaxton { order } => {
            let h = hermite(2 * order, x);
            let g = (-x * x).exp();
            let mut f = 0.5 * erfc(x);
            for i in 1..=order {
                f += mp_coefficient(i) * h[2 * i - 1] * g;
            }
            f
        }
        SmearingKind::MarzariVanderbilt { a } => {
            let h2 = 4.0 * x * x - 2.0;
            let h1 = 2.0 * x;
            0.5 * erfc(x) + (-0.5 * a * h2 + h1) * (-x * x).exp() / (4.0 * PI.sqrt())
        }
    }
}

pub fn f_prime(kind: SmearingKind, x: f64) -> f64 {
    match kind {
        SmearingKind::FermiDirac => {
            let e = (-x.abs()).exp();
            -e / ((1.0 + e) * (1.0 + e))
        }
        SmearingKind::Gaussian => -(-x * x).exp() / PI.sqrt(),
        SmearingKind::MethfesselPaxton { order } => {
            let h = hermite(2 * order, x);
            let g = (-x * x).exp();
            -(0..=order).map(|i| mp_coefficient(i) * h[2 * i]).sum::<f64>() * g
        }
        SmearingKind::MarzariVanderbilt { a } => {
            let x2 = x * x;
            (a * x2 * x - x2 - 1.5 * a * x - 0.5) * (-x2).exp() / PI.sqrt()
        }
    }
}

/// Entropy function, normalized so S vanishes at +-infinity and S' = x f'.
pub fn s_value(kind: SmearingKind, x: f64) -> f64 {
    match kind {
        SmearingKind::FermiDirac => {
            let ax = x.abs();
            (-ax).exp().ln_1p() + ax * fd_tail(ax)
        }
        SmearingKind::Gaussian => (-x * x).exp() / (2.0 * PI.sqrt()),
        SmearingKind::MethfesselPaxton { order } => {
            let h = hermite(2 * order, x);
            0.5 * mp_coefficient(order) * h[2 * order] * (-x * x).exp()
        }
        SmearingKind::MarzariVanderbilt { a } => {
            let x2 = x * x;
            (-0.5 * a * x2 * x + 0.5 * x2 + 0.75) * (-x2).exp() / PI.sqrt()
        }
    }
}

/// (f(x2) - f(x1)) / (e2 - e1) with x = (e - mu)/sigma. Falls back to f'/sigma
/// when the energies nearly coincide.
pub fn divided_difference_f(kind: SmearingKind, sigma: f64, mu: f64, e1: f64, e2: f64) -> f64 {
    let switch = 1e-8 * 1f64.max(e1.abs()).max(e2.abs());
    if (e2 - e1).abs() > switch {
        (f_value(kind, (e2 - mu) / sigma) - f_value(kind, (e1 - mu) / sigma)) / (e2 - e1)
    } else {
        f_prime(kind, (0.5 * (e1 + e2) - mu) / sigma) / sigma
    }
}

/// sum_k w_k sum_i f((e_ki - mu)/sigma)
pub fn electron_count(eigs: &[Vec<f64>], weights: &[f64], spec: &SmearingSpec, mu: f64) -> f64 {
    eigs.iter()
        .zip(weights)
        .map(|(e, w)| w * e.iter().map(|x| spec.f((x - mu) / spec.sigma)).sum::<f64>())
        .sum()
}

fn count_slope(eigs: &[Vec<f64>], weights: &[f64], spec: &SmearingSpec, mu: f64) -> f64 {
    eigs.iter()
        .zip(weights)
        .map(|(e, w)| -w * e.iter().map(|x| spec.fp((x - mu) / spec.sigma)).sum::<f64>() / spec.sigma)
        .sum()
}

/// Level at which a step-function occupation holds n_e electrons.
pub fn step_fermi_level(eigs: &[Vec<f64>], weights: &[f64], n_e: f64) -> f64 {
    let mut pairs: Vec<(f64, f64)> = eigs
        .iter()
        .zip(weights)
        .flat_map(|(e, &w)| e.iter().map(move |&x| (x, w)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut acc = 0.0;
    for (e, w) in &pairs {
        acc += w;
        if acc >= n_e - 1e-12 {
            return *e;
        }
    }
    pairs.last().map(|p| p.0).unwrap_or(0.0)
}

/// Chemical potential with sum_k w_k sum_i f = n_e. `warm` selects the root for
/// the non-monotone smearings; without it the step-function level is used.
pub fn solve_mu(
    eigs: &[Vec<f64>],
    weights: &[f64],
    spec: &SmearingSpec,
    n_e: f64,
    warm: Option<f64>,
) -> Result<f64> {
    if eigs.len() != weights.len() {
        return Err(Error::Dimension("eigenvalue blocks and weights differ in length".into()));
    }
    let capacity: f64 = eigs.iter().zip(weights).map(|(e, w)| w * e.len() as f64).sum();
    if !(n_e > 0.0 && n_e < capacity) {
        return Err(Error::InfeasibleOccupation { n_e, max: capacity });
    }
    if eigs.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::NoChemicalPotential("non-finite eigenvalue".into()));
    }
    let sigma = spec.sigma;
    let emin = eigs.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
    let emax = eigs.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (lo_lim, hi_lim) = (emin - 60.0 * sigma, emax + 60.0 * sigma);
    let resid = |mu: f64| electron_count(eigs, weights, spec, mu) - n_e;

    let (mut lo, mut hi) = if spec.kind.is_monotone() {
        (lo_lim, hi_lim)
    } else {
        let start = warm
            .filter(|m| m.is_finite())
            .unwrap_or_else(|| step_fermi_level(eigs, weights, n_e))
            .clamp(lo_lim, hi_lim);
        nearest_bracket(&resid, start, sigma / 8.0, lo_lim, hi_lim)?
    };
    let (mut rlo, rhi) = (resid(lo), resid(hi));
    if rlo > 0.0 || rhi < 0.0 {
        return Err(Error::NoChemicalPotential(format!(
            "count does not change sign on [{lo}, {hi}]"
        )));
    }
    let tol = 1e-14 * n_e;
    let mut mu = 0.5 * (lo + hi);
    for _ in 0..400 {
        mu = 0.5 * (lo + hi);
        if mu == lo || mu == hi {
            break;
        }
        let r = resid(mu);
        if r.abs() <= tol {
            break;
        }
        if (r < 0.0) == (rlo < 0.0) {
            lo = mu;
            rlo = r;
        } else {
            hi = mu;
        }
    }
    // Newton polish, kept only while it improves the residual
    let mut best = (resid(mu).abs(), mu);
    for _ in 0..5 {
        let slope = count_slope(eigs, weights, spec, best.1);
        if !(slope.is_finite() && slope.abs() > 0.0) {
            break;
        }
        let cand = best.1 - resid(best.1) / slope;
        let r = resid(cand).abs();
        if r < best.0 {
            best = (r, cand);
        } else {
            break;
        }
    }
    if best.0 > 1e-9 * n_e {
        return Err(Error::NoChemicalPotential(format!(
            "residual {} after bisection",
            best.0
        )));
    }
    Ok(best.1)
}

/// Walk outward from `start` in steps of `h` and return the sign-change bracket
/// closest to it, ordered so the count residual is negative at the first end.
/// That end may lie to the right where the count decreases locally.
fn nearest_bracket(
    resid: &dyn Fn(f64) -> f64,
    start: f64,
    h: f64,
    lo_lim: f64,
    hi_lim: f64,
) -> Result<(f64, f64)> {
    let r0 = resid(start);
    if r0 == 0.0 {
        return Ok((start, start));
    }
    let orient = |a: f64, b: f64, ra: f64| if ra < 0.0 { (a, b) } else { (b, a) };
    let (mut up, mut dn) = (start, start);
    let (mut rup, mut rdn) = (r0, r0);
    loop {
        let can_up = up < hi_lim;
        let can_dn = dn > lo_lim;
        if !can_up && !can_dn {
            return Err(Error::NoChemicalPotential("no sign change within the search window".into()));
        }
        if can_up {
            let next = (up + h).min(hi_lim);
            let r = resid(next);
            if (r < 0.0) != (rup < 0.0) || r == 0.0 {
                return Ok(orient(up, next, rup));
            }
            up = next;
            rup = r;
        }
        if can_dn {
            let next = (dn - h).max(lo_lim);
            let r = resid(next);
            if (r < 0.0) != (rdn < 0.0) || r == 0.0 {
                return Ok(orient(dn, next, rdn));
            }
            dn = next;
            rdn = r;
        }
    }
}

/// Occupations and their derivatives for diagonal eta, at a fixed mu.
#[derive(Clone, Debug)]
pub struct OccupationState {
    pub mu: f64,
    /// f((e_ki - mu)/sigma)
    pub f: Vec<Vec<f64>>,
    /// f'((e_ki - mu)/sigma), without the 1/sigma
    pub fp: Vec<Vec<f64>>,
    pub electron_count: f64,
}

pub fn occupations(eigs: &[Vec<f64>], weights: &[f64], spec: &SmearingSpec, mu: f64) -> OccupationState {
    let x = |e: f64| (e - mu) / spec.sigma;
    let f: Vec<Vec<f64>> = eigs.iter().map(|b| b.iter().map(|&e| spec.f(x(e))).collect()).collect();
    let fp = eigs.iter().map(|b| b.iter().map(|&e| spec.fp(x(e))).collect()).collect();
    let electron_count = f.iter().zip(weights).map(|(b, w)| w * b.iter().sum::<f64>()).sum();
    OccupationState { mu, f, fp, electron_count }
}

fn matrix_function(eta: &DMatrix<Complex64>, g: impl Fn(f64) -> f64) -> Result<DMatrix<Complex64>> {
    if !is_hermitian(eta, 1e-10) {
        return Err(Error::Dimension("matrix is not Hermitian".into()));
    }
    let (vals, vecs) = hermitian_eigen(eta);
    let n = vals.len();
    let mut scaled = vecs.clone();
    for j in 0..n {
        let gj = g(vals[j]);
        for i in 0..n {
            scaled[(i, j)] *= gj;
        }
    }
    let out = &scaled * vecs.adjoint();
    Ok((&out + out.adjoint()) * Complex64::new(0.5, 0.0))
}

/// F = f((eta - mu I)/sigma)
pub fn occupation_matrix(eta: &DMatrix<Complex64>, mu: f64, spec: &SmearingSpec) -> Result<DMatrix<Complex64>> {
    matrix_function(eta, |e| spec.f((e - mu) / spec.sigma))
}

/// -sigma sum_k w_k tr S((eta_k - mu I)/sigma)
pub fn entropy_term(eta: &[DMatrix<Complex64>], mu: f64, weights: &[f64], spec: &SmearingSpec) -> Result<f64> {
    let mut total = 0.0;
    for (e, w) in eta.iter().zip(weights) {
        if !is_hermitian(e, 1e-10) {
            return Err(Error::Dimension("matrix is not Hermitian".into()));
        }
        let (vals, _) = hermitian_eigen(e);
        total += w * vals.iter().map(|&x| spec.s((x - mu) / spec.sigma)).sum::<f64>();
    }
    Ok(-spec.sigma * total)
}
