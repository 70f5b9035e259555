//! Preconditioned conjugate gradient minimization over (Psi, eta) with the
//! adaptive double step size rule and optional restarts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::block_linalg::{
    b_orthonormalize, diagonalize_and_rotate, ortho_qr, orthonormality_error, project_tangent_adjoint,
    random_complex_matrix, retraction_taylor_derivative, sf_inf_norm, sf_norm, Blocks,
};
use crate::error::{Error, Result};
use crate::gradients::{
    gradients, ks_stationarity_residual, partials_at, precond_eta_closed_form, precond_psi, GradientPair,
};
use crate::model::{EnergyBreakdown, Evaluation, Model};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Pcg,
    PcgR1,
    PcgR2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    S1,
    S2,
    S3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub variant: Variant,
    pub strategy: Strategy,
    pub nu: f64,
    /// Memory of the nonmonotone reference value.
    pub alpha: f64,
    pub gamma: f64,
    /// Exponent in the restart test.
    pub a: f64,
    pub t_min_psi: f64,
    pub t_min_eta: f64,
    pub t_trial_init: f64,
    pub theta_max: f64,
    /// (lower, upper) bounds on t_eta / t_psi.
    pub ratio_bounds: Option<(f64, f64)>,
    pub max_iter: usize,
    pub tol: f64,
    /// Step halvings allowed when the accepted step misses the Armijo test.
    pub max_backtracks: usize,
    /// Diagnostic: negate the search direction at this iteration.
    pub inject_ascent_at: Option<usize>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Pcg,
            strategy: Strategy::S3,
            nu: 0.25,
            alpha: 0.0,
            gamma: 0.5,
            a: 1.0,
            t_min_psi: 1e-3,
            t_min_eta: 1e-3,
            t_trial_init: 0.4,
            theta_max: 0.8,
            ratio_bounds: None,
            max_iter: 500,
            tol: 1e-8,
            max_backtracks: 40,
            inject_ascent_at: None,
        }
    }
}

impl OptimizerConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.nu > 0.0 && self.nu <= 0.5) {
            v.push(format!("nu = {} must lie in (0, 1/2]", self.nu));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            v.push(format!("alpha = {} must lie in [0, 1)", self.alpha));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            v.push(format!("gamma = {} must lie in (0, 1)", self.gamma));
        }
        if !(self.a > 0.0) {
            v.push("restart exponent a must be positive".into());
        }
        for (name, x) in [
            ("t_min_psi", self.t_min_psi),
            ("t_min_eta", self.t_min_eta),
            ("t_trial_init", self.t_trial_init),
        ] {
            if !(x > 0.0 && x.is_finite()) {
                v.push(format!("{name} must be positive"));
            }
        }
        if !(self.theta_max > 0.0 && self.theta_max < 1.0) {
            v.push("theta_max must lie in (0, 1)".into());
        }
        if let Some((lo, hi)) = self.ratio_bounds {
            if !(lo > 0.0 && lo < 1.0 && hi > 1.0) {
                v.push(format!("ratio bounds ({lo}, {hi}) need 0 < lower < 1 < upper"));
            }
        }
        if !(self.tol >= 0.0) {
            v.push("tol must be non-negative".into());
        }
        v
    }
}

/// Nonmonotone reference value C_n with its weight Q_n.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NonmonotoneRef {
    pub c_value: f64,
    pub q_value: f64,
}

impl NonmonotoneRef {
    pub fn new(f0: f64) -> Self {
        Self { c_value: f0, q_value: 1.0 }
    }

    pub fn update(&self, f_new: f64, alpha: f64) -> Self {
        let q = alpha * self.q_value + 1.0;
        Self { c_value: (alpha * self.q_value * self.c_value + f_new) / q, q_value: q }
    }
}

/// Ratio of the quadratic-model decrease to the linear prediction. None when
/// the linear prediction vanishes.
pub fn estimator_zeta(
    f0: f64,
    g_psi: f64,
    g_eta: f64,
    c1: f64,
    c2: f64,
    t_psi: f64,
    t_eta: f64,
    c_ref: f64,
) -> Option<f64> {
    let lin = t_psi * g_psi + t_eta * g_eta;
    if lin == 0.0 {
        return None;
    }
    Some((f0 + lin + 0.5 * c1 * t_psi * t_psi + 0.5 * c2 * t_eta * t_eta - c_ref) / lin)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInputs {
    pub f0: f64,
    pub g_psi: f64,
    pub g_eta: f64,
    pub c1: f64,
    pub c2: f64,
    pub t_init_psi: f64,
    pub t_init_eta: f64,
    pub t_min_psi: f64,
    pub t_min_eta: f64,
    pub cap_psi: f64,
    pub cap_eta: f64,
    pub c_ref: f64,
    pub nu: f64,
    pub ratio_bounds: Option<(f64, f64)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepState {
    pub t_psi: f64,
    pub t_eta: f64,
    pub c1: f64,
    pub c2: f64,
    pub zeta: f64,
    pub improved: bool,
    pub ratio_clamped: bool,
}

/// One pass of the adaptive double step rule. None means both directional
/// derivatives vanish.
pub fn adaptive_double_step(inp: &StepInputs) -> Option<StepState> {
    let mut t_psi = inp.t_init_psi.max(inp.t_min_psi).min(inp.cap_psi);
    let mut t_eta = inp.t_init_eta.max(inp.t_min_eta).min(inp.cap_eta);
    let zeta = estimator_zeta(inp.f0, inp.g_psi, inp.g_eta, inp.c1, inp.c2, t_psi, t_eta, inp.c_ref)?;
    let mut improved = false;
    if zeta < inp.nu {
        improved = true;
        let m_psi = if inp.g_psi != 0.0 { Some(-inp.g_psi / inp.c1) } else { None };
        let m_eta = if inp.g_eta != 0.0 { Some(-inp.g_eta / inp.c2) } else { None };
        let (mp, me) = match (m_psi, m_eta) {
            (Some(a), Some(b)) => (a, b),
            (Some(a), None) => (a, a),
            (None, Some(b)) => (b, b),
            (None, None) => return None,
        };
        t_psi = mp.min(inp.cap_psi);
        t_eta = me.min(inp.cap_eta);
    }
    let mut ratio_clamped = false;
    if let Some((lo, hi)) = inp.ratio_bounds {
        if t_eta / t_psi < lo {
            t_psi = t_eta / lo;
            ratio_clamped = true;
        } else if t_eta / t_psi > hi {
            t_eta = hi * t_psi;
            ratio_clamped = true;
        }
    }
    let zeta = estimator_zeta(inp.f0, inp.g_psi, inp.g_eta, inp.c1, inp.c2, t_psi, t_eta, inp.c_ref).unwrap_or(zeta);
    Some(StepState { t_psi, t_eta, c1: inp.c1, c2: inp.c2, zeta, improved, ratio_clamped })
}

fn minimizer_or_trial(g0: f64, c: f64, t_trial: f64, floor: f64) -> (f64, f64) {
    if c > 0.0 {
        let tm = -g0 / c;
        if tm > 0.0 {
            return (c, tm);
        }
        (c, t_trial)
    } else {
        (floor, t_trial)
    }
}

/// Same-step curvature from one energy value: c = 2(F(t) - F(0) - t F'(0))/t^2.
pub fn strategy_s1(f0: f64, g0: f64, f_trial: f64, t_trial: f64, floor: f64) -> (f64, f64) {
    let c = 2.0 * (f_trial - f0 - t_trial * g0) / (t_trial * t_trial);
    minimizer_or_trial(g0, c, t_trial, floor)
}

/// Same-step curvature from one slope: c = (F'(t) - F'(0))/t.
pub fn strategy_s2(g0: f64, g_trial: f64, t_trial: f64, floor: f64) -> (f64, f64) {
    let c = (g_trial - g0) / t_trial;
    minimizer_or_trial(g0, c, t_trial, floor)
}

/// Separate curvatures from the two partial derivatives at a trial point.
/// Returns (c1, c2, t_init_psi, t_init_eta).
pub fn strategy_s3(
    g_psi0: f64,
    g_eta0: f64,
    g_psi_tr: f64,
    g_eta_tr: f64,
    t_tr_psi: f64,
    t_tr_eta: f64,
    floor: f64,
) -> (f64, f64, f64, f64) {
    let mut c1 = (g_psi_tr - g_psi0) / t_tr_psi;
    let mut c2 = (g_eta_tr - g_eta0) / t_tr_eta;
    let tm_psi = if c1 > 0.0 { -g_psi0 / c1 } else { -1.0 };
    let tm_eta = if c2 > 0.0 { -g_eta0 / c2 } else { -1.0 };
    if g_psi0 == 0.0 {
        c1 = 0.0;
    } else if c1 <= 0.0 {
        c1 = floor;
    }
    if g_eta0 == 0.0 {
        c2 = 0.0;
    } else if c2 <= 0.0 {
        c2 = floor;
    }
    if tm_psi > 0.0 && tm_eta > 0.0 {
        (c1, c2, tm_psi, tm_eta)
    } else if tm_psi > 0.0 && g_eta0 == 0.0 {
        (c1, c2, tm_psi, tm_psi)
    } else if tm_eta > 0.0 && g_psi0 == 0.0 {
        (c1, c2, tm_eta, tm_eta)
    } else {
        (c1, c2, t_tr_psi, t_tr_eta)
    }
}

/// Dai-Yuan parameter. None when the denominator is negligible.
pub fn dy_beta(numerator: f64, denominator: f64) -> Option<f64> {
    if !(denominator.abs() > 1e-14 * numerator.abs()) || numerator == 0.0 {
        None
    } else {
        Some(numerator / denominator)
    }
}

/// Dai-Yuan parameter clipped to [0, Hestenes-Stiefel]. Both share the
/// denominator Re<D_prev, G - G_prev>, so the clip only swaps numerators.
pub fn hybrid_beta(num_dy: f64, num_hs: f64, denominator: f64) -> Option<f64> {
    dy_beta(num_dy, denominator).map(|dy| (num_hs / denominator).min(dy).max(0.0))
}

/// -Re<G, D> / (|<G_psi, M G_psi>|^a + |<G_eta, M G_eta>|^a).
/// None when the denominator vanishes.
pub fn restart_ratio(g_dot_d: f64, gpg_psi: f64, gpg_eta: f64, a: f64) -> Option<f64> {
    let den = gpg_psi.abs().powf(a) + gpg_eta.abs().powf(a);
    if den == 0.0 {
        None
    } else {
        Some(-g_dot_d / den)
    }
}

/// True when the ratio above falls below gamma.
pub fn restart_condition(g_dot_d: f64, gpg_psi: f64, gpg_eta: f64, gamma: f64, a: f64) -> Option<bool> {
    restart_ratio(g_dot_d, gpg_psi, gpg_eta, a).map(|r| r < gamma)
}

/// One row of the iteration log. Step fields describe the step taken from
/// this iterate and are NaN on the final row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub n: usize,
    pub free_energy: f64,
    pub grad_psi_half: f64,
    pub grad_eta_sf: f64,
    pub error: f64,
    pub mu: f64,
    pub t_psi: f64,
    pub t_eta: f64,
    pub beta: f64,
    pub zeta: f64,
    pub restarted: bool,
    pub sign_flipped: bool,
    pub forced_restart: bool,
    pub backtracks: usize,
    pub descent_psi: f64,
    pub descent_eta: f64,
    pub c_ref: f64,
    pub q_ref: f64,
    /// F at the accepted step minus C_n, and the Armijo bound it must not exceed.
    pub armijo_lhs: f64,
    pub armijo_rhs: f64,
    pub orthonormality: f64,
    /// |sum_k w_k tr F_k - N_e| after the chemical-potential solve.
    pub charge_error: f64,
    /// |sum_k tr grad_eta_k F|.
    pub eta_grad_trace: f64,
    /// Restart ratio evaluated by the restarted variants, NaN otherwise.
    pub restart_ratio: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    Converged,
    MaxIter,
    Stalled,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::Converged => "converged",
            StopReason::MaxIter => "max-iter",
            StopReason::Stalled => "stalled",
        }
    }
}

#[derive(Clone, Debug)]
pub struct MinimizeResult {
    pub psi: Blocks,
    pub eta: Blocks,
    pub eigenvalues: Vec<Vec<f64>>,
    pub occupations: Vec<Vec<f64>>,
    pub mu: f64,
    pub energy: EnergyBreakdown,
    pub converged: bool,
    pub stop: StopReason,
    pub iterations: usize,
    pub error: f64,
    pub ks_residual: f64,
    /// Shift c such that eta + c matches the Kohn-Sham eigenvalues.
    pub shift_c: f64,
    pub log: Vec<IterationRecord>,
}

/// Seeded random orbitals, B-orthonormalized, with eta the diagonal of the
/// Ritz matrix for the superposition-density Hamiltonian, sorted ascending.
pub fn initial_state(model: &Model, seed: u64) -> Result<(Blocks, Blocks)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = model.n_orbitals();
    let psi = Blocks(model.bases.iter().map(|b| random_complex_matrix(b.len(), n, &mut rng)).collect());
    let psi = b_orthonormalize(&psi, model)?;
    let rho = model.superposition_density();
    let (pot, _) = model.potential(&rho);
    let diag: Vec<Vec<f64>> = psi
        .0
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let h = model.apply_hamiltonian(k, p, &pot);
            let s = p.adjoint() * h;
            (0..n).map(|i| s[(i, i)].re).collect()
        })
        .collect();
    let r = diagonalize_and_rotate(&Blocks::diagonal(&diag), &psi, None, None)?;
    Ok((r.psi, r.eta))
}

/// Evaluation re-expressed in its own diagonal frame.
fn rebase(mut ev: Evaluation) -> Evaluation {
    let n = ev.eigenvalues.first().map(|e| e.len()).unwrap_or(0);
    ev.p = Blocks::identity(ev.eigenvalues.len(), n);
    ev.rotated = false;
    ev
}

struct Previous {
    d_psi: Blocks,
    d_eta: Blocks,
    g_psi: Blocks,
    g_eta: Blocks,
}

fn cap(theta: f64, norm: f64) -> f64 {
    if norm > 0.0 {
        theta / norm
    } else {
        f64::INFINITY
    }
}

pub fn minimize(model: &Model, config: &OptimizerConfig, psi0: Blocks, eta0: Blocks) -> Result<MinimizeResult> {
    let errs = config.violations();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    if !eta0.is_diagonal() {
        return Err(Error::Dimension("initial eta must be diagonal".into()));
    }
    let start = diagonalize_and_rotate(&eta0, &psi0, None, None)?;
    let mut psi = start.psi;
    let mut eta = start.eta;
    let mut ev = model.evaluate(&psi, &eta, None, true)?;
    let mut gp = gradients(model, &ev)?;
    let mut nref = NonmonotoneRef::new(ev.energy.total);
    let mut prev: Option<Previous> = None;
    let (mut t_prev_psi, mut t_prev_eta) = (config.t_trial_init, config.t_trial_init);
    let mut log = Vec::new();
    let mut stop = StopReason::MaxIter;
    let q_max = 1.0 / (1.0 - config.alpha);

    for n in 0..=config.max_iter {
        let f_n = ev.energy.total;
        if n > 0 {
            nref = nref.update(f_n, config.alpha);
        }
        if !(nref.q_value >= 1.0 - 1e-15 && nref.q_value <= q_max + 1e-12) {
            return Err(Error::Breakdown { iteration: n, reason: format!("Q_n = {} out of range", nref.q_value) });
        }
        let mut rec = IterationRecord {
            n,
            free_energy: f_n,
            grad_psi_half: 0.5 * gp.g_psi.norm(),
            grad_eta_sf: sf_norm(&gp.g_eta),
            error: gp.error_metric(),
            mu: ev.occ.mu,
            t_psi: f64::NAN,
            t_eta: f64::NAN,
            beta: f64::NAN,
            zeta: f64::NAN,
            restarted: false,
            sign_flipped: false,
            forced_restart: false,
            backtracks: 0,
            descent_psi: f64::NAN,
            descent_eta: f64::NAN,
            c_ref: nref.c_value,
            q_ref: nref.q_value,
            armijo_lhs: f64::NAN,
            armijo_rhs: f64::NAN,
            orthonormality: orthonormality_error(&psi, model),
            charge_error: (ev.occ.f.iter().zip(model.weights()).map(|(f, w)| w * f.iter().sum::<f64>()).sum::<f64>()
                - model.spec.n_electrons)
                .abs(),
            eta_grad_trace: gp.g_eta.0.iter().map(|g| g.trace()).sum::<num_complex::Complex64>().norm(),
            restart_ratio: f64::NAN,
        };
        if rec.error < config.tol {
            stop = StopReason::Converged;
            log.push(rec);
            break;
        }
        if n == config.max_iter {
            log.push(rec);
            break;
        }

        let pg_psi = precond_psi(model, &gp.residual);
        let pg_eta = precond_eta_closed_form(&gp, &ev.eigenvalues);
        let gpg_psi = pg_psi.re_inner(&gp.g_psi);
        let gpg_eta = pg_eta.re_inner(&gp.g_eta);

        let restart_dir = || (project_tangent_adjoint(&psi, &pg_psi.scale(-1.0), 0.0, model), pg_eta.scale(-1.0));
        let (beta, forced) = match &prev {
            None => (0.0, false),
            Some(p) => {
                let den = p.d_psi.re_inner(&gp.g_psi.sub(&p.g_psi)) + p.d_eta.re_inner(&gp.g_eta.sub(&p.g_eta));
                let num_hs = pg_psi.re_inner(&gp.g_psi.sub(&p.g_psi)) + pg_eta.re_inner(&gp.g_eta.sub(&p.g_eta));
                match hybrid_beta(gpg_psi + gpg_eta, num_hs, den) {
                    Some(b) => (b, false),
                    None => (0.0, true),
                }
            }
        };
        let (mut d_psi, mut d_eta) = match &prev {
            Some(p) if !forced => (
                pg_psi.scale(-1.0).axpy(beta, &p.d_psi),
                pg_eta.scale(-1.0).axpy(beta, &p.d_eta),
            ),
            _ => (pg_psi.scale(-1.0), pg_eta.scale(-1.0)),
        };
        d_psi = project_tangent_adjoint(&psi, &d_psi, 0.0, model);
        if config.inject_ascent_at == Some(n) {
            d_psi = d_psi.scale(-1.0);
            d_eta = d_eta.scale(-1.0);
        }
        rec.beta = beta;
        rec.forced_restart = forced;
        if forced && config.variant != Variant::Pcg {
            rec.restarted = true;
        }

        let mut s_psi = gp.g_psi.re_inner(&d_psi);
        let mut s_eta = gp.g_eta.re_inner(&d_eta);
        match config.variant {
            Variant::Pcg | Variant::PcgR1 => {
                if s_psi > 0.0 {
                    d_psi = d_psi.scale(-1.0);
                    s_psi = -s_psi;
                    rec.sign_flipped = true;
                }
                if s_eta > 0.0 {
                    d_eta = d_eta.scale(-1.0);
                    s_eta = -s_eta;
                    rec.sign_flipped = true;
                }
                if config.variant == Variant::PcgR1 && !rec.restarted {
                    let ratio = restart_ratio(s_psi + s_eta, gpg_psi, gpg_eta, config.a);
                    rec.restart_ratio = ratio.unwrap_or(f64::NAN);
                    if ratio.is_some_and(|r| r < config.gamma) {
                        let (a, b) = restart_dir();
                        d_psi = a;
                        d_eta = b;
                        rec.restarted = true;
                    }
                }
            }
            Variant::PcgR2 => {
                let nonascent = s_psi >= 0.0 || s_eta >= 0.0;
                let ratio = restart_ratio(s_psi + s_eta, gpg_psi, gpg_eta, config.a);
                rec.restart_ratio = ratio.unwrap_or(f64::NAN);
                let cond = ratio.is_some_and(|r| r < config.gamma);
                if !rec.restarted && (nonascent || cond) {
                    let (a, b) = restart_dir();
                    d_psi = a;
                    d_eta = b;
                    rec.restarted = true;
                }
            }
        }
        if rec.restarted {
            s_psi = gp.g_psi.re_inner(&d_psi);
            s_eta = gp.g_eta.re_inner(&d_eta);
        }
        rec.descent_psi = s_psi;
        rec.descent_eta = s_eta;
        let slack = 1e-12 * (1.0 + f_n.abs());
        if s_psi > slack || s_eta > slack {
            return Err(Error::Breakdown {
                iteration: n,
                reason: format!("search direction is not a descent direction ({s_psi:e}, {s_eta:e})"),
            });
        }
        if s_psi + s_eta == 0.0 {
            stop = StopReason::Stalled;
            log.push(rec);
            break;
        }

        let dpsi_inf = d_psi.inf_norm();
        let deta_inf = sf_inf_norm(&d_eta);
        let floor = 1e-14 * (d_psi.norm().powi(2) + sf_norm(&d_eta).powi(2));
        let mut trial: Option<(f64, f64, Evaluation, GradientPair, Blocks)> = None;

        let (c1, c2, t_init_psi, t_init_eta, cap_psi, cap_eta) = match config.strategy {
            Strategy::S1 | Strategy::S2 => {
                let joint = (dpsi_inf * dpsi_inf + deta_inf * deta_inf).sqrt();
                let cp = cap(config.theta_max.min(joint), joint);
                let t_tr = t_prev_psi.max(config.t_min_psi).min(cp);
                let g0 = s_psi + s_eta;
                let (c, t_init) = if config.strategy == Strategy::S1 {
                    let x = ortho_qr(&psi, &d_psi, t_tr, model)?;
                    let e = model.evaluate(&x, &eta.axpy(t_tr, &d_eta), Some(ev.occ.mu), false)?;
                    strategy_s1(f_n, g0, e.energy.total, t_tr, floor)
                } else {
                    let x = ortho_qr(&psi, &d_psi, t_tr, model)?;
                    let e = model.evaluate(&x, &eta.axpy(t_tr, &d_eta), Some(ev.occ.mu), true)?;
                    let g = gradients(model, &e)?;
                    let xp = retraction_taylor_derivative(&psi, &d_psi, t_tr, model);
                    let (a, b) = partials_at(model, &e, &g, &xp, &d_eta);
                    trial = Some((t_tr, t_tr, e, g, x));
                    strategy_s2(g0, a + b, t_tr, floor)
                };
                (c * s_psi / g0, c * s_eta / g0, t_init, t_init, cp, cp)
            }
            Strategy::S3 => {
                let cp = cap(config.theta_max.min(dpsi_inf), dpsi_inf);
                let ce = cap(config.theta_max.min(deta_inf), deta_inf);
                let t_tr_psi = t_prev_psi.max(config.t_min_psi).min(cp);
                let t_tr_eta = t_prev_eta.max(config.t_min_eta).min(ce);
                let x = ortho_qr(&psi, &d_psi, t_tr_psi, model)?;
                let e = model.evaluate(&x, &eta.axpy(t_tr_eta, &d_eta), Some(ev.occ.mu), true)?;
                let g = gradients(model, &e)?;
                let xp = retraction_taylor_derivative(&psi, &d_psi, t_tr_psi, model);
                let (a, b) = partials_at(model, &e, &g, &xp, &d_eta);
                trial = Some((t_tr_psi, t_tr_eta, e, g, x));
                let (c1, c2, ip, ie) = strategy_s3(s_psi, s_eta, a, b, t_tr_psi, t_tr_eta, floor);
                (c1, c2, ip, ie, cp, ce)
            }
        };

        let inputs = StepInputs {
            f0: f_n,
            g_psi: s_psi,
            g_eta: s_eta,
            c1,
            c2,
            t_init_psi,
            t_init_eta,
            t_min_psi: config.t_min_psi,
            t_min_eta: config.t_min_eta,
            cap_psi,
            cap_eta,
            c_ref: nref.c_value,
            nu: config.nu,
            ratio_bounds: config.ratio_bounds,
        };
        let step = match adaptive_double_step(&inputs) {
            Some(s) => s,
            None => {
                stop = StopReason::Stalled;
                log.push(rec);
                break;
            }
        };
        let (mut t_psi, mut t_eta) = (step.t_psi, step.t_eta);
        rec.zeta = step.zeta;

        // Evaluate the accepted step; halve both sizes while the Armijo test fails.
        let mut accepted = None;
        for bt in 0..=config.max_backtracks {
            let reuse = matches!(&trial, Some((a, b, ..)) if *a == t_psi && *b == t_eta);
            let (x, e, g) = if reuse {
                let (_, _, e, g, x) = trial.take().expect("checked above");
                (x, e, g)
            } else {
                let x = ortho_qr(&psi, &d_psi, t_psi, model)?;
                let e = model.evaluate(&x, &eta.axpy(t_eta, &d_eta), Some(ev.occ.mu), true)?;
                let g = gradients(model, &e)?;
                (x, e, g)
            };
            let lhs = e.energy.total - nref.c_value;
            let rhs = config.nu * (t_psi * s_psi + t_eta * s_eta);
            if lhs <= rhs + slack || bt == config.max_backtracks {
                rec.backtracks = bt;
                rec.armijo_lhs = lhs;
                rec.armijo_rhs = rhs;
                accepted = Some((x, e, g));
                break;
            }
            t_psi *= 0.5;
            t_eta *= 0.5;
        }
        let (_x, e, g) = accepted.expect("loop always accepts on the last pass");
        if rec.armijo_lhs > rec.armijo_rhs + slack {
            return Err(Error::Breakdown {
                iteration: n,
                reason: format!("Armijo test failed after {} halvings", config.max_backtracks),
            });
        }
        rec.t_psi = t_psi;
        rec.t_eta = t_eta;

        // rotate stored directions and gradients into the new diagonal frame
        let p = &e.p;
        prev = Some(Previous {
            d_psi: d_psi.mul_right(p),
            d_eta: d_eta.conjugate_by(p),
            g_psi: gp.g_psi.mul_right(p),
            g_eta: gp.g_eta.conjugate_by(p),
        });
        psi = e.psi.clone();
        eta = e.eta();
        ev = rebase(e);
        gp = g;
        t_prev_psi = t_psi;
        t_prev_eta = t_eta;
        log.push(rec);
    }

    let last = log.last().expect("at least one record");
    let error = last.error;
    let iterations = last.n;
    let ks_residual = ks_stationarity_residual(&ev, &gp);
    Ok(MinimizeResult {
        eigenvalues: ev.eigenvalues.clone(),
        occupations: ev.occ.f.clone(),
        mu: ev.occ.mu,
        energy: ev.energy,
        converged: stop == StopReason::Converged,
        stop,
        iterations,
        error,
        ks_residual,
        shift_c: gp.shift_c,
        psi,
        eta,
        log,
    })
}
