//! Gradients of the free energy in Psi and eta, preconditioners, line-search
//! partial derivatives and the Kohn-Sham residual.

use crate::block_linalg::{c, retraction_taylor_derivative, ortho_qr, Blocks, CMat};
use crate::error::{Error, Result};
use crate::model::{Evaluation, Model};
use crate::smearing::divided_difference_f;

/// Gradients at one point, expressed in the evaluation's rotated frame
/// (where eta is diagonal).
#[derive(Clone, Debug)]
pub struct GradientPair {
    /// 2 w (H Psi - B Psi Sigma) F
    pub g_psi: Blocks,
    pub g_eta: Blocks,
    /// H Psi - B Psi Sigma, without occupations.
    pub residual: Blocks,
    pub sigma_matrices: Blocks,
    pub mu: f64,
    pub d_mu: f64,
    /// Shift with Sigma = eta + c I at stationarity.
    pub shift_c: f64,
}

impl GradientPair {
    /// Gradients in the caller's frame: g_psi P^*, P g_eta P^*.
    pub fn unrotated(&self, p: &Blocks) -> (Blocks, Blocks) {
        let pa = p.adjoint();
        (self.g_psi.mul_right(&pa), Blocks(self.g_eta.0.iter().zip(&p.0).map(|(g, p)| p * g * p.adjoint()).collect()))
    }

    /// sqrt(||g_psi / 2||^2 + ||g_eta||_sF^2)
    pub fn error_metric(&self) -> f64 {
        let a = 0.5 * self.g_psi.norm();
        let b = crate::block_linalg::sf_norm(&self.g_eta);
        (a * a + b * b).sqrt()
    }
}

/// Gradients for the diagonal frame of `ev` (which must be a full evaluation).
pub fn gradients(model: &Model, ev: &Evaluation) -> Result<GradientPair> {
    let sm = model.smearing;
    let sigma_w = sm.sigma;
    let weights = model.weights();
    let sig = ev.sigma();
    let nk = model.n_kpoints();
    let n = model.n_orbitals();

    let mut d_mu = 0.0;
    let mut sum_fp = 0.0;
    for k in 0..nk {
        for i in 0..n {
            let fp = ev.occ.fp[k][i];
            d_mu += weights[k] * (sig.0[k][(i, i)].re - ev.eigenvalues[k][i]) * fp / sigma_w;
            sum_fp += weights[k] * fp;
        }
    }
    if !(sum_fp.abs() >= f64::MIN_POSITIVE) {
        return Err(Error::FlatOccupation);
    }
    let shift_c = sigma_w * d_mu / sum_fp;

    let mut g_psi = Vec::with_capacity(nk);
    let mut g_eta = Vec::with_capacity(nk);
    let mut residual = Vec::with_capacity(nk);
    for k in 0..nk {
        let w = weights[k];
        let r = &ev.h_psi().0[k] - &ev.b_psi().0[k] * &sig.0[k];
        let mut g = r.clone();
        for j in 0..n {
            let s = c(2.0 * w * ev.occ.f[k][j]);
            for x in g.column_mut(j).iter_mut() {
                *x *= s;
            }
        }
        g_psi.push(g);
        residual.push(r);

        let eps = &ev.eigenvalues[k];
        let ge = CMat::from_fn(n, n, |i, j| {
            if i == j {
                let fp = ev.occ.fp[k][i];
                c(w * ((sig.0[k][(i, i)].re - eps[i]) * fp / sigma_w - fp * d_mu / sum_fp))
            } else {
                sig.0[k][(i, j)] * c(w * divided_difference_f(sm.kind, sigma_w, ev.occ.mu, eps[i], eps[j]))
            }
        });
        g_eta.push(ge);
    }
    Ok(GradientPair {
        g_psi: Blocks(g_psi),
        g_eta: Blocks(g_eta),
        residual: Blocks(residual),
        sigma_matrices: sig.clone(),
        mu: ev.occ.mu,
        d_mu,
        shift_c,
    })
}

/// K(x) = 1/(1 + x + sqrt(1 + (x-1)^2)), x = 1/2 |k+G|^2
pub fn kinetic_preconditioner(x: f64) -> f64 {
    1.0 / (1.0 + x + (1.0 + (x - 1.0) * (x - 1.0)).sqrt())
}

/// Residuals are preconditioned in rydberg, so that K(x) R tends to the
/// Newton step R / x at large kinetic energy.
pub const RESIDUAL_TO_RY: f64 = 2.0;

/// Diagonal-in-G preconditioner applied to the residual H Psi - B Psi Sigma.
pub fn precond_psi(model: &Model, residual: &Blocks) -> Blocks {
    Blocks(
        residual
            .0
            .iter()
            .zip(&model.bases)
            .map(|(r, b)| {
                let mut out = r.clone();
                for (g, &t) in b.kinetic.iter().enumerate() {
                    let kg = c(RESIDUAL_TO_RY * kinetic_preconditioner(t));
                    for j in 0..r.ncols() {
                        out[(g, j)] *= kg;
                    }
                }
                out
            })
            .collect(),
    )
}

/// Largest ratio magnitude allowed in the eta preconditioner, in units of sigma.
pub const ETA_RATIO_CAP: f64 = 1e6;
/// Floor on |f_j - f_i| in the eta preconditioner.
pub const ETA_DENOM_FLOOR: f64 = 1e-12;

/// M(A)_ij = A_ij (1/w_k) (e_i - e_j)/(f_j - f_i), with the diagonal limit
/// -sigma/f'. Returns the result and the number of guarded entries.
pub fn precond_eta(model: &Model, eigenvalues: &[Vec<f64>], mu: f64, a: &Blocks) -> (Blocks, usize) {
    let sm = model.smearing;
    let cap = ETA_RATIO_CAP * sm.sigma;
    let mut clamped = 0;
    let out = a
        .0
        .iter()
        .enumerate()
        .map(|(k, ak)| {
            let w = model.weights()[k];
            let e = &eigenvalues[k];
            let n = ak.nrows();
            CMat::from_fn(n, n, |i, j| {
                let dd = divided_difference_f(sm.kind, sm.sigma, mu, e[i], e[j]);
                let mut r = if dd == 0.0 { cap } else { -1.0 / dd };
                let gap = e[i] - e[j];
                let df = -dd * gap;
                if i != j && gap != 0.0 && df.abs() < ETA_DENOM_FLOOR {
                    r = gap / (ETA_DENOM_FLOOR.copysign(if df == 0.0 { gap } else { df }));
                    clamped += 1;
                }
                if r.abs() > cap {
                    r = cap.copysign(r);
                    clamped += 1;
                }
                ak[(i, j)] * c(r / w)
            })
        })
        .collect();
    (Blocks(out), clamped)
}

/// c I + eta - Sigma, the preconditioned eta gradient in closed form.
pub fn precond_eta_closed_form(gp: &GradientPair, eigenvalues: &[Vec<f64>]) -> Blocks {
    Blocks(
        gp.sigma_matrices
            .0
            .iter()
            .zip(eigenvalues)
            .map(|(s, e)| {
                let mut m = -s.clone();
                for i in 0..e.len() {
                    m[(i, i)] += c(gp.shift_c + e[i]);
                }
                m
            })
            .collect(),
    )
}

/// max_k max_i ||H psi_i - (e_i + c) B psi_i|| in the diagonal frame.
pub fn ks_stationarity_residual(ev: &Evaluation, gp: &GradientPair) -> f64 {
    let mut worst: f64 = 0.0;
    for k in 0..ev.psi.len() {
        let h = &ev.h_psi().0[k];
        let b = &ev.b_psi().0[k];
        for i in 0..h.ncols() {
            let e = ev.eigenvalues[k][i] + gp.shift_c;
            let r = h.column(i) - b.column(i) * c(e);
            worst = worst.max(r.norm());
        }
    }
    worst
}

/// Partial derivatives of t -> F(ortho(Psi, D_Psi, t_Psi), eta + t_eta D_eta).
#[derive(Clone, Debug)]
pub struct LinePoint {
    pub d_psi: f64,
    pub d_eta: f64,
    pub psi: Blocks,
    pub eta: Blocks,
    pub eval: Evaluation,
    pub grads: GradientPair,
}

/// Directional partials given an evaluation at X and the tangent X'.
pub fn partials_at(model: &Model, ev: &Evaluation, gp: &GradientPair, x_prime: &Blocks, d_eta: &Blocks) -> (f64, f64) {
    // F_Psi = w H X F in the rotated frame, paired with X' P
    let xp = x_prime.mul_right(&ev.p);
    let mut dpsi = 0.0;
    for k in 0..model.n_kpoints() {
        let w = model.weights()[k];
        let h = &ev.h_psi().0[k];
        for j in 0..h.ncols() {
            let f = ev.occ.f[k][j];
            if f == 0.0 {
                continue;
            }
            let dot: f64 = h.column(j).iter().zip(xp.0[k].column(j).iter()).map(|(a, b)| (a.conj() * b).re).sum();
            dpsi += 2.0 * w * f * dot;
        }
    }
    let de = d_eta.conjugate_by(&ev.p);
    (dpsi, gp.g_eta.re_inner(&de))
}

pub fn line_partials(
    model: &Model,
    psi: &Blocks,
    eta: &Blocks,
    d_psi: &Blocks,
    d_eta: &Blocks,
    t_psi: f64,
    t_eta: f64,
    mu_hint: Option<f64>,
) -> Result<LinePoint> {
    let x = ortho_qr(psi, d_psi, t_psi, model)?;
    let eta_t = eta.axpy(t_eta, d_eta);
    let ev = model.evaluate(&x, &eta_t, mu_hint, true)?;
    let gp = gradients(model, &ev)?;
    let x_prime = retraction_taylor_derivative(psi, d_psi, t_psi, model);
    let (a, b) = partials_at(model, &ev, &gp, &x_prime, d_eta);
    Ok(LinePoint { d_psi: a, d_eta: b, psi: x, eta: eta_t, eval: ev, grads: gp })
}
