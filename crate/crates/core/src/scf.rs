//! Density-mixing self-consistent field iteration used as a reference solver.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::block_linalg::{c, cholesky_lower, hermitian_eigen, right_solve_lower_adjoint, sf_norm, Blocks, CMat};
use crate::error::{Error, Result};
use crate::gradients::{gradients, kinetic_preconditioner, ks_stationarity_residual};
use crate::model::{EnergyBreakdown, Model, Potential};
use crate::smearing::{occupations, solve_mu};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Mixing {
    Linear { factor: f64 },
    BroydenLite { history: usize, factor: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScfConfig {
    pub mixing: Mixing,
    /// Stop when sqrt(int (rho_out - rho_in)^2) falls below this.
    pub eps_density: f64,
    pub max_iter: usize,
    /// Residual bound per eigenpair.
    pub eig_tol: f64,
    /// Largest basis solved densely; bigger ones use the iterative solver.
    pub dense_limit: usize,
}

impl Default for ScfConfig {
    fn default() -> Self {
        Self {
            mixing: Mixing::BroydenLite { history: 8, factor: 0.3 },
            eps_density: 1e-9,
            max_iter: 500,
            eig_tol: 1e-9,
            dense_limit: 2000,
        }
    }
}

impl ScfConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let (factor, history) = match self.mixing {
            Mixing::Linear { factor } => (factor, 1),
            Mixing::BroydenLite { history, factor } => (factor, history),
        };
        if !(factor > 0.0 && factor <= 1.0) {
            v.push(format!("mixing factor {factor} must lie in (0, 1]"));
        }
        if history < 1 {
            v.push("mixing history must be at least 1".into());
        }
        if !(self.eps_density > 0.0) {
            v.push("eps_density must be positive".into());
        }
        if !(self.eig_tol > 0.0) {
            v.push("eig_tol must be positive".into());
        }
        v
    }
}

/// Lowest `n_pairs` solutions of H phi = e B phi at every k-point, B-orthonormal
/// and ascending. `guess` seeds the iterative solver.
pub fn solve_eigenpairs(
    model: &Model,
    pot: &Potential,
    n_pairs: usize,
    eig_tol: f64,
    dense_limit: usize,
    guess: Option<&Blocks>,
) -> Result<(Blocks, Vec<Vec<f64>>)> {
    let mut psi = Vec::with_capacity(model.n_kpoints());
    let mut eigs = Vec::with_capacity(model.n_kpoints());
    for k in 0..model.n_kpoints() {
        let ng = model.bases[k].len();
        if n_pairs > ng {
            return Err(Error::Eigensolver(format!("{n_pairs} pairs requested from a basis of {ng}")));
        }
        let (x, e) = if ng <= dense_limit {
            dense_pairs(model, k, pot, n_pairs)?
        } else {
            davidson(model, k, pot, n_pairs, eig_tol, guess.map(|g| &g.0[k]))?
        };
        let worst = pair_residuals(model, k, pot, &x, &e).into_iter().fold(0.0, f64::max);
        if worst > eig_tol {
            return Err(Error::Eigensolver(format!("k-point {k}: residual {worst:e} exceeds {eig_tol:e}")));
        }
        psi.push(x);
        eigs.push(e);
    }
    Ok((Blocks(psi), eigs))
}

fn pair_residuals(model: &Model, k: usize, pot: &Potential, x: &CMat, e: &[f64]) -> Vec<f64> {
    let hx = model.apply_hamiltonian(k, x, pot);
    let bx = model.apply_overlap_k(k, x);
    (0..e.len()).map(|j| (hx.column(j) - bx.column(j) * c(e[j])).norm()).collect()
}

fn dense_pairs(model: &Model, k: usize, pot: &Potential, n_pairs: usize) -> Result<(CMat, Vec<f64>)> {
    let h = model.hamiltonian_matrix(k, pot);
    let b = model.overlap_matrix(k);
    let l = cholesky_lower(&b, k)?;
    // A = L^{-1} H L^{-*}
    let hl = right_solve_lower_adjoint(&h, &l);
    let a = l
        .solve_lower_triangular(&hl)
        .ok_or_else(|| Error::Eigensolver("singular overlap factor".into()))?;
    let (vals, vecs) = hermitian_eigen(&a);
    let y = vecs.columns(0, n_pairs).into_owned();
    let x = l
        .adjoint()
        .solve_upper_triangular(&y)
        .ok_or_else(|| Error::Eigensolver("singular overlap factor".into()))?;
    Ok((x, vals[..n_pairs].to_vec()))
}

fn b_orthonormal_columns(model: &Model, k: usize, v: &CMat) -> Result<CMat> {
    let g = v.adjoint() * model.apply_overlap_k(k, v);
    let l = cholesky_lower(&g, k)?;
    Ok(right_solve_lower_adjoint(v, &l))
}

/// Block Davidson with the kinetic preconditioner.
fn davidson(
    model: &Model,
    k: usize,
    pot: &Potential,
    n_pairs: usize,
    tol: f64,
    guess: Option<&CMat>,
) -> Result<(CMat, Vec<f64>)> {
    use rand::SeedableRng;
    let ng = model.bases[k].len();
    let kinetic = &model.bases[k].kinetic;
    let start = match guess {
        Some(g) if g.nrows() == ng && g.ncols() == n_pairs => g.clone(),
        _ => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(k as u64);
            let mut m = crate::block_linalg::random_complex_matrix(ng, n_pairs, &mut rng);
            // bias toward low kinetic energy
            for g in 0..ng {
                let s = c(kinetic_preconditioner(kinetic[g]));
                for j in 0..n_pairs {
                    m[(g, j)] *= s;
                }
            }
            m
        }
    };
    let max_dim = (4 * n_pairs).max(n_pairs + 8).min(ng);
    let mut v = b_orthonormal_columns(model, k, &start)?;
    let mut last = f64::INFINITY;
    for _ in 0..1000 {
        let hv = model.apply_hamiltonian(k, &v, pot);
        let s = v.adjoint() * &hv;
        let (vals, vecs) = hermitian_eigen(&((&s + s.adjoint()) * c(0.5)));
        let y = vecs.columns(0, n_pairs).into_owned();
        let x = &v * &y;
        let e = vals[..n_pairs].to_vec();
        let hx = &hv * &y;
        let bx = model.apply_overlap_k(k, &x);
        let mut corr = Vec::new();
        let mut worst: f64 = 0.0;
        for j in 0..n_pairs {
            let r = hx.column(j) - bx.column(j) * c(e[j]);
            let rn = r.norm();
            worst = worst.max(rn);
            if rn > tol {
                let t = DVector::from_fn(ng, |g, _| r[g] * c(kinetic_preconditioner(kinetic[g])));
                corr.push(t);
            }
        }
        last = worst;
        if corr.is_empty() {
            return Ok((x, e));
        }
        let base = if v.ncols() + corr.len() > max_dim { x } else { v };
        let mut t = CMat::from_columns(&corr);
        let bt = model.apply_overlap_k(k, &t);
        let proj = base.adjoint() * &bt;
        t -= &base * proj;
        let t = match b_orthonormal_columns(model, k, &t) {
            Ok(t) => t,
            Err(_) => return Err(Error::Eigensolver(format!("k-point {k}: correction block lost rank"))),
        };
        let mut next = CMat::zeros(ng, base.ncols() + t.ncols());
        next.columns_mut(0, base.ncols()).copy_from(&base);
        next.columns_mut(base.ncols(), t.ncols()).copy_from(&t);
        v = b_orthonormal_columns(model, k, &next)?;
    }
    Err(Error::Eigensolver(format!("k-point {k}: Davidson stopped at residual {last:e}")))
}

/// Density mixing with a short history.
#[derive(Clone, Debug)]
pub struct Mixer {
    mixing: Mixing,
    dv: f64,
    prev: Option<(Vec<f64>, Vec<f64>)>,
    d_in: Vec<Vec<f64>>,
    d_res: Vec<Vec<f64>>,
}

impl Mixer {
    pub fn new(mixing: Mixing, dv: f64) -> Self {
        Self { mixing, dv, prev: None, d_in: Vec::new(), d_res: Vec::new() }
    }

    pub fn next(&mut self, rho_in: &[f64], rho_out: &[f64]) -> Vec<f64> {
        let res: Vec<f64> = rho_out.iter().zip(rho_in).map(|(o, i)| o - i).collect();
        match self.mixing {
            Mixing::Linear { factor } => rho_in.iter().zip(&res).map(|(x, r)| x + factor * r).collect(),
            Mixing::BroydenLite { history, factor } => {
                if let Some((pin, pres)) = self.prev.take() {
                    self.d_in.push(rho_in.iter().zip(&pin).map(|(a, b)| a - b).collect());
                    self.d_res.push(res.iter().zip(&pres).map(|(a, b)| a - b).collect());
                    if self.d_in.len() > history {
                        self.d_in.remove(0);
                        self.d_res.remove(0);
                    }
                }
                self.prev = Some((rho_in.to_vec(), res.clone()));
                let m = self.d_res.len();
                let mut out: Vec<f64> = rho_in.iter().zip(&res).map(|(x, r)| x + factor * r).collect();
                if m == 0 {
                    return out;
                }
                // minimize |res - dR gamma| in the dV-weighted norm
                let a = DMatrix::from_fn(m, m, |i, j| dot(&self.d_res[i], &self.d_res[j]) * self.dv);
                let b = DVector::from_fn(m, |i, _| dot(&self.d_res[i], &res) * self.dv);
                let Ok(gamma) = a.svd(true, true).solve(&b, 1e-12 * b.norm().max(f64::MIN_POSITIVE)) else {
                    return out;
                };
                for i in 0..m {
                    let gi = gamma[i];
                    for (o, (dx, dr)) in out.iter_mut().zip(self.d_in[i].iter().zip(&self.d_res[i])) {
                        *o -= gi * (dx + factor * dr);
                    }
                }
                out
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScfRecord {
    pub n: usize,
    pub free_energy: f64,
    pub density_residual: f64,
    pub grad_psi_half: f64,
    pub grad_eta_sf: f64,
    pub error: f64,
    pub mu: f64,
}

#[derive(Clone, Debug)]
pub struct ScfResult {
    pub psi: Blocks,
    pub eta: Blocks,
    pub eigenvalues: Vec<Vec<f64>>,
    pub occupations: Vec<Vec<f64>>,
    pub mu: f64,
    pub energy: EnergyBreakdown,
    pub converged: bool,
    pub iterations: usize,
    pub density_residual: f64,
    pub error: f64,
    pub ks_residual: f64,
    pub log: Vec<ScfRecord>,
}

pub fn run_scf(model: &Model, config: &ScfConfig, init_density: &[f64]) -> Result<ScfResult> {
    let errs = config.violations();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let n = model.n_orbitals();
    let dv = model.grid.dv();
    let mut mixer = Mixer::new(config.mixing, dv);
    let mut rho_in = init_density.to_vec();
    let mut guess: Option<Blocks> = None;
    let mut mu_prev = None;
    let mut log = Vec::new();
    let mut converged = false;
    let mut state = None;
    for it in 0..config.max_iter {
        let (pot, _) = model.potential(&rho_in);
        let (psi, eigs) = solve_eigenpairs(model, &pot, n, config.eig_tol, config.dense_limit, guess.as_ref())?;
        let mu = solve_mu(&eigs, model.weights(), &model.smearing, model.spec.n_electrons, mu_prev)?;
        let occ = occupations(&eigs, model.weights(), &model.smearing, mu);
        let rho_out = model.density(&psi, &occ.f);
        let resid = (rho_out.iter().zip(&rho_in).map(|(o, i)| (o - i).powi(2)).sum::<f64>() * dv).sqrt();
        let eta = Blocks::diagonal(&eigs);
        let ev = model.evaluate(&psi, &eta, Some(mu), true)?;
        let gp = gradients(model, &ev)?;
        log.push(ScfRecord {
            n: it,
            free_energy: ev.energy.total,
            density_residual: resid,
            grad_psi_half: 0.5 * gp.g_psi.norm(),
            grad_eta_sf: sf_norm(&gp.g_eta),
            error: gp.error_metric(),
            mu: ev.occ.mu,
        });
        mu_prev = Some(mu);
        guess = Some(psi.clone());
        state = Some((psi, eta, eigs, ev, gp, resid));
        if resid <= config.eps_density {
            converged = true;
            break;
        }
        rho_in = mixer.next(&rho_in, &rho_out);
    }
    let (psi, eta, eigs, ev, gp, resid) =
        state.ok_or_else(|| Error::Config(vec!["scf max_iter must be at least 1".into()]))?;
    Ok(ScfResult {
        ks_residual: ks_stationarity_residual(&ev, &gp),
        error: gp.error_metric(),
        occupations: ev.occ.f.clone(),
        mu: ev.occ.mu,
        energy: ev.energy,
        iterations: log.len(),
        density_residual: resid,
        converged,
        psi,
        eta,
        eigenvalues: eigs,
        log,
    })
}
