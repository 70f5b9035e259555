//! Per-k block arithmetic: inner products, shifted Frobenius norms, tangent
//! projections, the QR retraction and the eta diagonalization step.

use nalgebra::{Cholesky, DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type CMat = DMatrix<Complex64>;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

pub fn c(x: f64) -> Complex64 {
    Complex64::new(x, 0.0)
}

/// One matrix per k-point. Used both for orbital blocks (N_G(k) x N) and for
/// the N x N matrices eta, Sigma and their gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Blocks(pub Vec<CMat>);

pub type BlockStates = Blocks;
pub type BlockMatrix = Blocks;

impl Blocks {
    pub fn new(blocks: Vec<CMat>) -> Self {
        Self(blocks)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, CMat> {
        self.0.iter()
    }

    pub fn zeros_like(&self) -> Self {
        Self(self.0.iter().map(|b| CMat::zeros(b.nrows(), b.ncols())).collect())
    }

    pub fn identity(n_blocks: usize, n: usize) -> Self {
        Self(vec![CMat::identity(n, n); n_blocks])
    }

    pub fn diagonal(values: &[Vec<f64>]) -> Self {
        Self(
            values
                .iter()
                .map(|v| CMat::from_diagonal(&nalgebra::DVector::from_iterator(v.len(), v.iter().map(|&x| c(x)))))
                .collect(),
        )
    }

    /// sum_k tr(A_k^* B_k)
    pub fn inner(&self, other: &Self) -> Complex64 {
        assert_eq!(self.len(), other.len(), "block count mismatch");
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum::<Complex64>())
            .sum()
    }

    pub fn re_inner(&self, other: &Self) -> f64 {
        self.inner(other).re
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|b| b.norm_squared()).sum::<f64>().sqrt()
    }

    /// max_k ||A_k||_F
    pub fn inf_norm(&self) -> f64 {
        self.0.iter().map(|b| b.norm()).fold(0.0, f64::max)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self(self.0.iter().map(|b| b * c(s)).collect())
    }

    /// self + a x
    pub fn axpy(&self, a: f64, x: &Self) -> Self {
        Self(self.0.iter().zip(&x.0).map(|(s, x)| s + x * c(a)).collect())
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.axpy(-1.0, other)
    }

    pub fn add(&self, other: &Self) -> Self {
        self.axpy(1.0, other)
    }

    /// Right-multiply each block by its own matrix.
    pub fn mul_right(&self, m: &Blocks) -> Self {
        Self(self.0.iter().zip(&m.0).map(|(a, b)| a * b).collect())
    }

    /// P_k^* A_k P_k for every block.
    pub fn conjugate_by(&self, p: &Blocks) -> Self {
        Self(self.0.iter().zip(&p.0).map(|(a, p)| p.adjoint() * a * p).collect())
    }

    pub fn adjoint(&self) -> Self {
        Self(self.0.iter().map(|a| a.adjoint()).collect())
    }

    pub fn is_diagonal(&self) -> bool {
        self.0.iter().all(is_diagonal)
    }
}

/// Applies the generalized overlap B to one k-block of orbitals.
pub trait Overlap {
    fn apply_overlap(&self, k: usize, psi: &CMat) -> CMat;

    fn apply_all(&self, psi: &Blocks) -> Blocks {
        Blocks(psi.0.iter().enumerate().map(|(k, p)| self.apply_overlap(k, p)).collect())
    }
}

/// B = I.
pub struct IdentityOverlap;

impl Overlap for IdentityOverlap {
    fn apply_overlap(&self, _k: usize, psi: &CMat) -> CMat {
        psi.clone()
    }
}

/// <Psi^* Phi> per k.
pub fn gram(psi: &Blocks, phi: &Blocks) -> Result<Blocks> {
    if psi.len() != phi.len() {
        return Err(Error::Dimension("block count mismatch".into()));
    }
    psi.0
        .iter()
        .zip(&phi.0)
        .map(|(a, b)| {
            if a.nrows() != b.nrows() {
                Err(Error::Dimension(format!("basis sizes {} and {} differ", a.nrows(), b.nrows())))
            } else {
                Ok(a.adjoint() * b)
            }
        })
        .collect::<Result<Vec<_>>>()
        .map(Blocks)
}

/// c_A = sum_k tr A_k / (n N)
pub fn sf_shift(a: &Blocks) -> Complex64 {
    let n_tot: usize = a.0.iter().map(|b| b.nrows()).sum();
    a.0.iter().map(|b| b.trace()).sum::<Complex64>() / c(n_tot as f64)
}

/// min_c ||c I - A||_F over all blocks jointly.
pub fn sf_norm(a: &Blocks) -> f64 {
    let s = sf_shift(a);
    a.0.iter()
        .map(|b| shifted(b, s).norm_squared())
        .sum::<f64>()
        .sqrt()
}

/// min over blocks of ||c_A I - A_k||_F.
pub fn sf_inf_norm(a: &Blocks) -> f64 {
    let s = sf_shift(a);
    a.0.iter().map(|b| shifted(b, s).norm()).fold(f64::INFINITY, f64::min)
}

fn shifted(b: &CMat, s: Complex64) -> CMat {
    let mut m = -b.clone();
    for i in 0..m.nrows() {
        m[(i, i)] += s;
    }
    m
}

/// P_{alpha,Psi}(Phi) = Phi - B Psi <Psi^* Phi> + alpha B Psi (<Psi^* Phi> - <Phi^* Psi>)
pub fn project_tangent(psi: &Blocks, phi: &Blocks, alpha: f64, b: &dyn Overlap) -> Blocks {
    Blocks(
        psi.0
            .iter()
            .zip(&phi.0)
            .enumerate()
            .map(|(k, (p, f))| {
                let bp = b.apply_overlap(k, p);
                let g = p.adjoint() * f;
                let skew = &g - g.adjoint();
                f - &bp * &g + &bp * skew * c(alpha)
            })
            .collect(),
    )
}

/// P^*_{alpha,Psi}(Phi) = Phi - Psi <Psi^* B Phi> + alpha Psi (<Psi^* B Phi> - <Phi^* B Psi>)
pub fn project_tangent_adjoint(psi: &Blocks, phi: &Blocks, alpha: f64, b: &dyn Overlap) -> Blocks {
    Blocks(
        psi.0
            .iter()
            .zip(&phi.0)
            .enumerate()
            .map(|(k, (p, f))| {
                let bf = b.apply_overlap(k, f);
                let g = p.adjoint() * bf;
                let skew = &g - g.adjoint();
                f - p * &g + p * skew * c(alpha)
            })
            .collect(),
    )
}

/// ||<Psi^* B Psi> - I||_F summed over blocks.
pub fn orthonormality_error(psi: &Blocks, b: &dyn Overlap) -> f64 {
    psi.0
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let g = p.adjoint() * b.apply_overlap(k, p);
            (g - CMat::identity(p.ncols(), p.ncols())).norm_squared()
        })
        .sum::<f64>()
        .sqrt()
}

/// Lower Cholesky factor, retried once with a tiny diagonal jitter.
pub fn cholesky_lower(m: &CMat, block: usize) -> Result<CMat> {
    let herm = (m + m.adjoint()) * c(0.5);
    if let Some(ch) = Cholesky::new(herm.clone()) {
        return Ok(ch.l());
    }
    let scale = 1.0 + herm.diagonal().iter().map(|x| x.re.abs()).fold(0.0, f64::max);
    let jittered = &herm + CMat::identity(m.nrows(), m.ncols()) * c(1e-15 * scale);
    Cholesky::new(jittered)
        .map(|ch| ch.l())
        .ok_or_else(|| Error::CholeskyFailed { block, reason: "matrix is not positive definite".into() })
}

/// X L^{-*}
pub fn right_solve_lower_adjoint(x: &CMat, l: &CMat) -> CMat {
    let xt = x.adjoint();
    let y = l.solve_lower_triangular(&xt).expect("Cholesky factor has a positive diagonal");
    y.adjoint()
}

/// Psi L^{-*} with L L^* = <Psi^* B Psi>.
pub fn b_orthonormalize(psi: &Blocks, b: &dyn Overlap) -> Result<Blocks> {
    psi.0
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let g = p.adjoint() * b.apply_overlap(k, p);
            let l = cholesky_lower(&g, k)?;
            Ok(right_solve_lower_adjoint(p, &l))
        })
        .collect::<Result<Vec<_>>>()
        .map(Blocks)
}

/// QR retraction (Psi + t D) L^{-*} with L L^* = I + t^2 <D^* B D>.
pub fn ortho_qr(psi: &Blocks, d: &Blocks, t: f64, b: &dyn Overlap) -> Result<Blocks> {
    if t == 0.0 {
        return Ok(psi.clone());
    }
    psi.0
        .iter()
        .zip(&d.0)
        .enumerate()
        .map(|(k, (p, dk))| {
            let n = p.ncols();
            let s = dk.adjoint() * b.apply_overlap(k, dk);
            let m = CMat::identity(n, n) + s * c(t * t);
            let l = cholesky_lower(&m, k)?;
            Ok(right_solve_lower_adjoint(&(p + dk * c(t)), &l))
        })
        .collect::<Result<Vec<_>>>()
        .map(Blocks)
}

/// Lower-triangular Phi(S) with Phi(S) + Phi(S)^* = S.
pub fn lower_half(s: &CMat) -> CMat {
    let n = s.nrows();
    CMat::from_fn(n, n, |i, j| {
        if i > j {
            s[(i, j)]
        } else if i == j {
            s[(i, i)] * 0.5
        } else {
            ZERO
        }
    })
}

/// Third-order model of d/dt ortho_qr(Psi, D, t):
/// D - 2t Psi Phi(S)^* - 3t^2 D Phi(S)^*, S = <D^* B D>.
pub fn retraction_taylor_derivative(psi: &Blocks, d: &Blocks, t: f64, b: &dyn Overlap) -> Blocks {
    Blocks(
        psi.0
            .iter()
            .zip(&d.0)
            .enumerate()
            .map(|(k, (p, dk))| {
                let s = dk.adjoint() * b.apply_overlap(k, dk);
                let phi_adj = lower_half(&s).adjoint();
                dk - p * &phi_adj * c(2.0 * t) - dk * &phi_adj * c(3.0 * t * t)
            })
            .collect(),
    )
}

pub fn is_diagonal(m: &CMat) -> bool {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if i != j && m[(i, j)] != ZERO {
                return false;
            }
        }
    }
    true
}

pub fn is_hermitian(m: &CMat, tol: f64) -> bool {
    m.is_square() && (m - m.adjoint()).norm() <= tol
}

/// Ascending eigenvalues and eigenvectors of a Hermitian matrix. Each
/// eigenvector is scaled so its largest-magnitude entry is real positive.
/// Diagonal input only gets sorted.
pub fn hermitian_eigen(m: &CMat) -> (Vec<f64>, CMat) {
    let n = m.nrows();
    if is_diagonal(m) {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| m[(a, a)].re.total_cmp(&m[(b, b)].re));
        let vals = order.iter().map(|&i| m[(i, i)].re).collect();
        let mut p = CMat::zeros(n, n);
        for (j, &i) in order.iter().enumerate() {
            p[(i, j)] = ONE;
        }
        return (vals, p);
    }
    let herm = (m + m.adjoint()) * c(0.5);
    let eig = SymmetricEigen::new(herm);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut p = CMat::zeros(n, n);
    for (j, &src) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(src);
        let mut best = 0;
        for i in 1..n {
            if col[i].norm() > col[best].norm() {
                best = i;
            }
        }
        let ph = col[best].conj() / col[best].norm();
        for i in 0..n {
            p[(i, j)] = col[i] * ph;
        }
    }
    (vals, p)
}

/// Result of rotating (Psi, eta, D_Psi, D_eta) into the eigenbasis of eta.
#[derive(Clone, Debug)]
pub struct Rotated {
    pub eigenvalues: Vec<Vec<f64>>,
    pub eta: Blocks,
    pub psi: Blocks,
    pub d_psi: Option<Blocks>,
    pub d_eta: Option<Blocks>,
    pub p: Blocks,
}

pub fn diagonalize_and_rotate(
    eta: &Blocks,
    psi: &Blocks,
    d_psi: Option<&Blocks>,
    d_eta: Option<&Blocks>,
) -> Result<Rotated> {
    let mut eigenvalues = Vec::with_capacity(eta.len());
    let mut ps = Vec::with_capacity(eta.len());
    for e in &eta.0 {
        if !is_hermitian(e, 1e-10 * (1.0 + e.norm())) {
            return Err(Error::Dimension("eta block is not Hermitian".into()));
        }
        let (v, p) = hermitian_eigen(e);
        eigenvalues.push(v);
        ps.push(p);
    }
    let p = Blocks(ps);
    Ok(Rotated {
        eta: Blocks::diagonal(&eigenvalues),
        eigenvalues,
        psi: psi.mul_right(&p),
        d_psi: d_psi.map(|d| d.mul_right(&p)),
        d_eta: d_eta.map(|d| d.conjugate_by(&p)),
        p,
    })
}

pub fn random_complex_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> CMat {
    CMat::from_fn(rows, cols, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        Complex64::new(re, im)
    })
}

pub fn random_hermitian<R: Rng + ?Sized>(n: usize, scale: f64, rng: &mut R) -> CMat {
    let a = random_complex_matrix(n, n, rng);
    (&a + a.adjoint()) * c(0.5 * scale)
}

pub fn random_unitary<R: Rng + ?Sized>(n: usize, rng: &mut R) -> CMat {
    let a = random_complex_matrix(n, n, rng);
    let qr = a.qr();
    let (q, r) = (qr.q(), qr.r());
    let mut u = q.clone();
    for j in 0..n {
        let d = r[(j, j)];
        let ph = if d.norm() > 0.0 { d / d.norm() } else { ONE };
        for i in 0..n {
            u[(i, j)] = q[(i, j)] * ph;
        }
    }
    u
}
