//! Plane-wave model: local and nonlocal pseudopotentials, generalized overlap,
//! Hartree and exchange terms, and evaluation of the free energy.

use std::f64::consts::PI;

use nalgebra::Vector3;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::block_linalg::{c, diagonalize_and_rotate, is_hermitian, Blocks, CMat, Overlap};
use crate::error::{Error, Result};
use crate::lattice::{build_bases, FftGrid, KpointSet, PlanewaveBasis, ReciprocalLattice, UnitCell};
use crate::smearing::{occupations, solve_mu, OccupationState, SmearingSpec};

/// C_x = (3/4)(3/pi)^{1/3}
pub fn slater_cx() -> f64 {
    0.75 * (3.0 / PI).cbrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum XcKind {
    None,
    SlaterX,
}

/// Gaussian well -A exp(-|r-R|^2 / (2 w^2)) at each position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Species {
    pub amplitude: f64,
    pub width: f64,
    /// Cartesian positions in bohr.
    pub positions: Vec<[f64; 3]>,
}

/// Normalized Gaussian projector centred at `position`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectorSpec {
    pub position: [f64; 3],
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub species: Vec<Species>,
    pub projectors: Vec<ProjectorSpec>,
    /// K x K nonlocal strengths.
    pub d: CMat,
    /// K x K overlap augmentation, the integrals of the augmentation functions.
    pub q: CMat,
    /// Width of the Gaussian shape carrying augmentation charge.
    pub aug_width: f64,
    pub xc: XcKind,
    pub n_electrons: f64,
    pub n_orbitals: usize,
}

impl ModelSpec {
    pub fn local_only(species: Vec<Species>, xc: XcKind, n_electrons: f64, n_orbitals: usize) -> Self {
        Self {
            species,
            projectors: Vec::new(),
            d: CMat::zeros(0, 0),
            q: CMat::zeros(0, 0),
            aug_width: 0.5,
            xc,
            n_electrons,
            n_orbitals,
        }
    }

    /// Collects every violated constraint.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let k = self.projectors.len();
        if self.d.nrows() != k || self.d.ncols() != k {
            v.push(format!("D must be {k}x{k}"));
        } else if !is_hermitian(&self.d, 1e-12) {
            v.push("D must be Hermitian".into());
        }
        if self.q.nrows() != k || self.q.ncols() != k {
            v.push(format!("Q must be {k}x{k}"));
        } else {
            if !is_hermitian(&self.q, 1e-12) {
                v.push("Q must be Hermitian".into());
            }
            for i in 0..k {
                for j in 0..k {
                    if self.q[(i, j)].norm() > 0.0 && self.projectors[i].position != self.projectors[j].position {
                        v.push(format!("Q[{i}][{j}] couples projectors on different sites"));
                    }
                }
            }
        }
        for (i, p) in self.projectors.iter().enumerate() {
            if !(p.radius > 0.0) {
                v.push(format!("projector {i} radius must be positive"));
            }
        }
        for (i, s) in self.species.iter().enumerate() {
            if !(s.width > 0.0) {
                v.push(format!("species {i} width must be positive"));
            }
            if !s.amplitude.is_finite() {
                v.push(format!("species {i} amplitude must be finite"));
            }
        }
        if !(self.aug_width > 0.0) {
            v.push("augmentation width must be positive".into());
        }
        if !(self.n_electrons > 0.0) {
            v.push("n_electrons must be positive".into());
        }
        let nb = (self.n_electrons / 2.0).ceil() as usize;
        if self.n_orbitals <= nb {
            v.push(format!(
                "n_orbitals = {} must exceed the number of occupied bands {nb}",
                self.n_orbitals
            ));
        }
        v
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub kinetic_nonlocal: f64,
    pub local: f64,
    pub hartree: f64,
    pub xc: f64,
    pub entropy: f64,
    pub total: f64,
}

/// Effective potential: the grid field V_loc + v_H + v_xc and the
/// augmentation correction D~ = int V 𝒬.
#[derive(Clone, Debug)]
pub struct Potential {
    pub v: Vec<f64>,
    pub d_tilde: CMat,
}

/// Everything derived from (Psi, eta) at one point, in the frame where eta is
/// diagonal. `p` maps back: Psi_rot = Psi P, Lambda = P^* eta P.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub p: Blocks,
    pub rotated: bool,
    pub eigenvalues: Vec<Vec<f64>>,
    pub psi: Blocks,
    pub occ: OccupationState,
    pub rho: Vec<f64>,
    pub potential: Potential,
    pub energy: EnergyBreakdown,
    pub h_psi: Option<Blocks>,
    pub b_psi: Option<Blocks>,
    pub sigma: Option<Blocks>,
}

impl Evaluation {
    /// Sigma_k = <Psi^* H Psi> in the rotated frame.
    pub fn sigma(&self) -> &Blocks {
        self.sigma.as_ref().expect("evaluation was built without the Hamiltonian")
    }

    pub fn h_psi(&self) -> &Blocks {
        self.h_psi.as_ref().expect("evaluation was built without the Hamiltonian")
    }

    pub fn b_psi(&self) -> &Blocks {
        self.b_psi.as_ref().expect("evaluation was built without the Hamiltonian")
    }

    pub fn eta(&self) -> Blocks {
        Blocks::diagonal(&self.eigenvalues)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cell: UnitCell,
    pub recip: ReciprocalLattice,
    pub kpoints: KpointSet,
    pub bases: Vec<PlanewaveBasis>,
    pub grid: FftGrid,
    pub spec: ModelSpec,
    pub smearing: SmearingSpec,
    vloc: Vec<f64>,
    /// |G|^2 per grid frequency.
    g2: Vec<f64>,
    projectors: Vec<CMat>,
    /// Unit-integral augmentation shape per projector.
    aug_shapes: Vec<Vec<f64>>,
}

impl Model {
    pub fn new(
        cell: UnitCell,
        kpoints: KpointSet,
        e_cut: f64,
        spec: ModelSpec,
        smearing: SmearingSpec,
    ) -> Result<Self> {
        let errs = spec.violations();
        if !errs.is_empty() {
            return Err(Error::InvalidModel(errs.join("; ")));
        }
        let recip = cell.reciprocal();
        let (bases, grid) = build_bases(&recip, &kpoints, e_cut)?;
        for (i, b) in bases.iter().enumerate() {
            if b.len() < spec.n_orbitals {
                return Err(Error::InvalidModel(format!(
                    "basis at k-point {i} has {} plane waves, fewer than {} orbitals",
                    b.len(),
                    spec.n_orbitals
                )));
            }
        }
        let capacity = 2.0 * spec.n_orbitals as f64;
        if spec.n_electrons >= capacity {
            return Err(Error::InfeasibleOccupation { n_e: spec.n_electrons, max: capacity });
        }
        let g_vecs: Vec<Vector3<f64>> = (0..grid.len()).map(|i| recip.g_vector(grid.frequency(i))).collect();
        let g2: Vec<f64> = g_vecs.iter().map(|g| g.norm_squared()).collect();
        let omega = cell.volume();

        let mut vhat = vec![Complex64::new(0.0, 0.0); grid.len()];
        for s in &spec.species {
            let pref = -s.amplitude / omega * (2.0 * PI * s.width * s.width).powf(1.5);
            for (i, g) in g_vecs.iter().enumerate() {
                if g2[i] == 0.0 {
                    continue;
                }
                let env = pref * (-0.5 * g2[i] * s.width * s.width).exp();
                for r in &s.positions {
                    vhat[i] += Complex64::from_polar(env, -g.dot(&Vector3::from(*r)));
                }
            }
        }
        let vloc = grid.synthesize_real(&vhat);

        let projectors = bases
            .iter()
            .map(|b| {
                CMat::from_fn(b.len(), spec.projectors.len(), |gi, p| {
                    let pr = &spec.projectors[p];
                    let q = &b.kpg[gi];
                    let amp = omega.sqrt().recip()
                        * (4.0 * PI * pr.radius * pr.radius).powf(0.75)
                        * (-0.5 * q.norm_squared() * pr.radius * pr.radius).exp();
                    Complex64::from_polar(amp, -q.dot(&Vector3::from(pr.position)))
                })
            })
            .collect();

        let aug_shapes = spec
            .projectors
            .iter()
            .map(|p| {
                let coeffs: Vec<Complex64> = g_vecs
                    .iter()
                    .zip(&g2)
                    .map(|(g, &gg)| {
                        Complex64::from_polar(
                            (-0.5 * gg * spec.aug_width * spec.aug_width).exp() / omega,
                            -g.dot(&Vector3::from(p.position)),
                        )
                    })
                    .collect();
                grid.synthesize_real(&coeffs)
            })
            .collect();

        Ok(Self {
            cell,
            recip,
            kpoints,
            bases,
            grid,
            spec,
            smearing,
            vloc,
            g2,
            projectors,
            aug_shapes,
        })
    }

    pub fn n_kpoints(&self) -> usize {
        self.kpoints.len()
    }

    pub fn n_orbitals(&self) -> usize {
        self.spec.n_orbitals
    }

    pub fn weights(&self) -> &[f64] {
        &self.kpoints.weights
    }

    pub fn local_potential(&self) -> &[f64] {
        &self.vloc
    }

    /// M for k-point `k` (N_G x K).
    pub fn projector_matrix(&self, k: usize) -> &CMat {
        &self.projectors[k]
    }

    pub fn has_projectors(&self) -> bool {
        !self.spec.projectors.is_empty()
    }

    pub fn integrate(&self, field: &[f64]) -> f64 {
        field.iter().sum::<f64>() * self.grid.dv()
    }

    /// Electron density for orbitals in a frame where occupations are diagonal.
    pub fn density(&self, psi: &Blocks, occ: &[Vec<f64>]) -> Vec<f64> {
        let mut rho = vec![0.0; self.grid.len()];
        let nk = self.kpoints.len();
        let kdim = self.spec.projectors.len();
        let mut w_aug = CMat::zeros(kdim, kdim);
        for k in 0..nk {
            let w = self.kpoints.weights[k];
            let block = &psi.0[k];
            for i in 0..block.ncols() {
                let f = occ[k][i];
                if f == 0.0 {
                    continue;
                }
                let col: Vec<Complex64> = block.column(i).iter().cloned().collect();
                let field = self.grid.to_realspace(&self.bases[k], &col);
                for (r, z) in rho.iter_mut().zip(&field) {
                    *r += w * f * z.norm_sqr();
                }
            }
            if kdim > 0 {
                let a = self.projectors[k].adjoint() * block;
                let fdiag = CMat::from_diagonal(&nalgebra::DVector::from_iterator(
                    occ[k].len(),
                    occ[k].iter().map(|&x| c(x * w)),
                ));
                w_aug += &a * fdiag * a.adjoint();
            }
        }
        if kdim > 0 && self.spec.q.norm() > 0.0 {
            let qw = &self.spec.q * &w_aug;
            for p in 0..kdim {
                let weight = qw[(p, p)].re;
                if weight != 0.0 {
                    for (r, g) in rho.iter_mut().zip(&self.aug_shapes[p]) {
                        *r += weight * g;
                    }
                }
            }
        }
        rho
    }

    /// Neutral-atom guess: unit Gaussians on every atom scaled to N_e, or a
    /// uniform density without atoms.
    pub fn superposition_density(&self) -> Vec<f64> {
        let n_e = self.spec.n_electrons;
        let atoms: Vec<(&[f64; 3], f64)> = self
            .spec
            .species
            .iter()
            .flat_map(|s| s.positions.iter().map(move |p| (p, s.width)))
            .collect();
        if atoms.is_empty() {
            return vec![n_e / self.cell.volume(); self.grid.len()];
        }
        let omega = self.cell.volume();
        let coeffs: Vec<Complex64> = (0..self.grid.len())
            .map(|i| {
                let g = self.recip.g_vector(self.grid.frequency(i));
                atoms
                    .iter()
                    .map(|(r, w)| {
                        Complex64::from_polar(
                            (-0.5 * self.g2[i] * w * w).exp() / omega,
                            -g.dot(&Vector3::from(**r)),
                        )
                    })
                    .sum::<Complex64>()
            })
            .collect();
        let mut rho: Vec<f64> = self.grid.synthesize_real(&coeffs).into_iter().map(|x| x.max(0.0)).collect();
        let total = self.integrate(&rho);
        for r in &mut rho {
            *r *= n_e / total;
        }
        rho
    }

    /// B Psi = Psi + M Q <M^* Psi>
    pub fn apply_overlap_k(&self, k: usize, psi: &CMat) -> CMat {
        if self.spec.projectors.is_empty() || self.spec.q.norm() == 0.0 {
            return psi.clone();
        }
        let m = &self.projectors[k];
        psi + m * (&self.spec.q * (m.adjoint() * psi))
    }

    /// Hartree energy and potential: v_H(G) = 4 pi rho(G)/|G|^2, v_H(0) = 0.
    pub fn hartree(&self, rho: &[f64]) -> (f64, Vec<f64>) {
        let rhat = self.grid.fourier_coefficients(rho);
        let mut energy = 0.0;
        let vhat: Vec<Complex64> = rhat
            .iter()
            .zip(&self.g2)
            .map(|(r, &g2)| {
                if g2 == 0.0 {
                    Complex64::new(0.0, 0.0)
                } else {
                    energy += 4.0 * PI * r.norm_sqr() / g2;
                    r * (4.0 * PI / g2)
                }
            })
            .collect();
        (0.5 * self.cell.volume() * energy, self.grid.synthesize_real(&vhat))
    }

    pub fn xc(&self, rho: &[f64]) -> (f64, Vec<f64>) {
        xc_energy_potential(rho, self.spec.xc, self.grid.dv())
    }

    /// Effective potential for a density, with D~_pq = int V 𝒬_pq.
    pub fn potential(&self, rho: &[f64]) -> (Potential, [f64; 3]) {
        let (e_h, v_h) = self.hartree(rho);
        let (e_xc, v_xc) = self.xc(rho);
        let e_loc = self.vloc.iter().zip(rho).map(|(v, r)| v * r).sum::<f64>() * self.grid.dv();
        let v: Vec<f64> = (0..rho.len()).map(|i| self.vloc[i] + v_h[i] + v_xc[i]).collect();
        let kdim = self.spec.projectors.len();
        let mut d_tilde = CMat::zeros(kdim, kdim);
        for p in 0..kdim {
            let vint: f64 = self.aug_shapes[p].iter().zip(&v).map(|(g, x)| g * x).sum::<f64>() * self.grid.dv();
            for q in 0..kdim {
                d_tilde[(p, q)] = self.spec.q[(p, q)] * vint;
            }
        }
        (Potential { v, d_tilde }, [e_loc, e_h, e_xc])
    }

    /// H_k Psi = -1/2 (ik + nabla)^2 Psi + V Psi + M (D + D~) <M^* Psi>
    pub fn apply_hamiltonian(&self, k: usize, psi: &CMat, pot: &Potential) -> CMat {
        let basis = &self.bases[k];
        let mut out = CMat::zeros(psi.nrows(), psi.ncols());
        for j in 0..psi.ncols() {
            let col: Vec<Complex64> = psi.column(j).iter().cloned().collect();
            let mut field = self.grid.to_realspace(basis, &col);
            for (z, v) in field.iter_mut().zip(&pot.v) {
                *z *= *v;
            }
            let vpsi = self.grid.to_reciprocal(basis, &field);
            for g in 0..psi.nrows() {
                out[(g, j)] = col[g] * basis.kinetic[g] + vpsi[g];
            }
        }
        if !self.spec.projectors.is_empty() {
            let m = &self.projectors[k];
            out += m * ((&self.spec.d + &pot.d_tilde) * (m.adjoint() * psi));
        }
        out
    }

    /// Dense H_k on the full basis, for direct diagonalization.
    pub fn hamiltonian_matrix(&self, k: usize, pot: &Potential) -> CMat {
        let basis = &self.bases[k];
        let vhat: Vec<Complex64> = self
            .grid
            .fourier_coefficients(&pot.v);
        let n = basis.len();
        let mut h = CMat::from_fn(n, n, |a, b| {
            let ma = basis.millers[a];
            let mb = basis.millers[b];
            let dm = [ma[0] - mb[0], ma[1] - mb[1], ma[2] - mb[2]];
            vhat[self.grid.flat_index(dm)]
        });
        for a in 0..n {
            h[(a, a)] += c(basis.kinetic[a]);
        }
        if !self.spec.projectors.is_empty() {
            let m = &self.projectors[k];
            h += m * (&self.spec.d + &pot.d_tilde) * m.adjoint();
        }
        h
    }

    /// Dense B_k.
    pub fn overlap_matrix(&self, k: usize) -> CMat {
        let n = self.bases[k].len();
        self.apply_overlap_k(k, &CMat::identity(n, n))
    }

    /// Kinetic plus bare nonlocal energy per orbital, sum_G 1/2|k+G|^2 |c|^2 + (A^* D A)_ii.
    fn kinetic_nonlocal_diag(&self, k: usize, psi: &CMat) -> Vec<f64> {
        let basis = &self.bases[k];
        let mut out: Vec<f64> = (0..psi.ncols())
            .map(|j| psi.column(j).iter().zip(&basis.kinetic).map(|(z, t)| z.norm_sqr() * t).sum())
            .collect();
        if !self.spec.projectors.is_empty() {
            let a = self.projectors[k].adjoint() * psi;
            let dad = a.adjoint() * &self.spec.d * &a;
            for (j, o) in out.iter_mut().enumerate() {
                *o += dad[(j, j)].re;
            }
        }
        out
    }

    /// Evaluate at (Psi, eta) for Hermitian eta. With `full` the Hamiltonian
    /// is applied and Sigma stored for gradients.
    pub fn evaluate(&self, psi: &Blocks, eta: &Blocks, mu_hint: Option<f64>, full: bool) -> Result<Evaluation> {
        if psi.len() != self.n_kpoints() || eta.len() != self.n_kpoints() {
            return Err(Error::Dimension("state has the wrong number of k blocks".into()));
        }
        let sorted = eta.0.iter().all(|e| (1..e.nrows()).all(|i| e[(i - 1, i - 1)].re <= e[(i, i)].re));
        let rotated = !(eta.is_diagonal() && sorted);
        let (p, eigenvalues, psi_rot) = if rotated {
            let r = diagonalize_and_rotate(eta, psi, None, None)?;
            (r.p, r.eigenvalues, r.psi)
        } else {
            let n = self.n_orbitals();
            let vals: Vec<Vec<f64>> = eta.0.iter().map(|e| (0..n).map(|i| e[(i, i)].re).collect()).collect();
            (Blocks::identity(self.n_kpoints(), n), vals, psi.clone())
        };
        let weights = self.weights();
        let mu = solve_mu(&eigenvalues, weights, &self.smearing, self.spec.n_electrons, mu_hint)?;
        let occ = occupations(&eigenvalues, weights, &self.smearing, mu);
        let rho = self.density(&psi_rot, &occ.f);
        let (potential, [e_loc, e_h, e_xc]) = self.potential(&rho);

        let mut e_kn = 0.0;
        let mut entropy = 0.0;
        let sigma_w = self.smearing.sigma;
        for k in 0..self.n_kpoints() {
            let w = weights[k];
            let diag = self.kinetic_nonlocal_diag(k, &psi_rot.0[k]);
            e_kn += w * diag.iter().zip(&occ.f[k]).map(|(d, f)| d * f).sum::<f64>();
            entropy += w * eigenvalues[k].iter().map(|&e| self.smearing.s((e - mu) / sigma_w)).sum::<f64>();
        }
        let entropy = -sigma_w * entropy;
        let energy = EnergyBreakdown {
            kinetic_nonlocal: e_kn,
            local: e_loc,
            hartree: e_h,
            xc: e_xc,
            entropy,
            total: e_kn + e_loc + e_h + e_xc + entropy,
        };
        let (h_psi, b_psi, sigma) = if full {
            let h: Vec<CMat> = (0..self.n_kpoints())
                .map(|k| self.apply_hamiltonian(k, &psi_rot.0[k], &potential))
                .collect();
            let b: Vec<CMat> = (0..self.n_kpoints()).map(|k| self.apply_overlap_k(k, &psi_rot.0[k])).collect();
            let s: Vec<CMat> = psi_rot
                .0
                .iter()
                .zip(&h)
                .map(|(p, hp)| {
                    let m = p.adjoint() * hp;
                    (&m + m.adjoint()) * c(0.5)
                })
                .collect();
            (Some(Blocks(h)), Some(Blocks(b)), Some(Blocks(s)))
        } else {
            (None, None, None)
        };
        Ok(Evaluation {
            p,
            rotated,
            eigenvalues,
            psi: psi_rot,
            occ,
            rho,
            potential,
            energy,
            h_psi,
            b_psi,
            sigma,
        })
    }

    pub fn free_energy(&self, psi: &Blocks, eta: &Blocks) -> Result<EnergyBreakdown> {
        Ok(self.evaluate(psi, eta, None, false)?.energy)
    }
}

impl Overlap for Model {
    fn apply_overlap(&self, k: usize, psi: &CMat) -> CMat {
        self.apply_overlap_k(k, psi)
    }
}

/// Exchange energy and potential on a grid with volume element `dv`.
/// Negative noise in rho is clamped to zero.
pub fn xc_energy_potential(rho: &[f64], kind: XcKind, dv: f64) -> (f64, Vec<f64>) {
    match kind {
        XcKind::None => (0.0, vec![0.0; rho.len()]),
        XcKind::SlaterX => {
            let cx = slater_cx();
            let mut e = 0.0;
            let v = rho
                .iter()
                .map(|&r| {
                    let r = r.max(0.0);
                    let c13 = r.cbrt();
                    e -= cx * r * c13;
                    -4.0 / 3.0 * cx * c13
                })
                .collect();
            (e * dv, v)
        }
    }
}
