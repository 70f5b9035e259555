//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.

use std::time::{Duration, Instant};

use ensemble_dft::block_linalg::{
    b_orthonormalize, c, ortho_qr, project_tangent_adjoint, random_complex_matrix, random_hermitian, random_unitary,
    retraction_taylor_derivative, Blocks, CMat,
};
use ensemble_dft::config::RunConfig;
use ensemble_dft::fixtures::{make_fixture, names};
use ensemble_dft::gradients::{gradients, ETA_RATIO_CAP, kinetic_preconditioner, precond_eta, precond_eta_closed_form};
use ensemble_dft::model::Model;
use ensemble_dft::optimizer::{
    initial_state, minimize, restart_condition, restart_ratio, MinimizeResult, OptimizerConfig, Strategy, Variant,
};
use ensemble_dft::scf::{run_scf, ScfResult};
use ensemble_dft::smearing::{f_prime, f_value, s_value, SmearingKind, MV_DEFAULT_A};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn fixture(name: &str) -> (RunConfig, Model) {
    let cfg = make_fixture(name).unwrap();
    let m = cfg.build_model().unwrap();
    (cfg, m)
}

fn pcg(m: &Model, variant: Variant, strategy: Strategy, seed: u64, tweak: impl Fn(&mut OptimizerConfig)) -> MinimizeResult {
    let (psi, eta) = initial_state(m, seed).unwrap();
    let mut cfg = OptimizerConfig { variant, strategy, ..Default::default() };
    tweak(&mut cfg);
    minimize(m, &cfg, psi, eta).unwrap()
}

fn scf(cfg: &RunConfig, m: &Model) -> ScfResult {
    run_scf(m, &cfg.scf_config(), &m.superposition_density()).unwrap()
}

/// Random orthonormal orbitals and a Hermitian eta near their Ritz values.
fn random_point(m: &Model, rng: &mut ChaCha8Rng, spread: f64) -> (Blocks, Blocks) {
    let n = m.n_orbitals();
    let psi = Blocks(m.bases.iter().map(|b| random_complex_matrix(b.len(), n, rng)).collect());
    let psi = b_orthonormalize(&psi, m).unwrap();
    let ritz = m.evaluate(&psi, &Blocks::identity(m.n_kpoints(), n), None, true).unwrap();
    let eta = Blocks(
        ritz.sigma()
            .0
            .iter()
            .map(|s| {
                let mut e = random_hermitian(n, spread, rng);
                for i in 0..n {
                    e[(i, i)] += s[(i, i)];
                }
                e
            })
            .collect(),
    );
    (psi, eta)
}

fn rel(a: f64, b: f64, scale: f64) -> f64 {
    (a - b).abs() / scale
}

fn invariance() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_f: f64 = 0.0;
    let mut worst_g: f64 = 0.0;
    for name in names() {
        let (_, m) = fixture(name);
        let n = m.n_orbitals();
        for _ in 0..20 {
            let (psi, eta) = random_point(&m, &mut rng, 0.1);
            let p = Blocks((0..m.n_kpoints()).map(|_| random_unitary(n, &mut rng)).collect());
            let shift: f64 = rng.random_range(-1.0..1.0);
            let shifted = Blocks(eta.0.iter().map(|e| e + CMat::identity(n, n) * c(shift)).collect());
            let (psi2, eta2) = (psi.mul_right(&p), shifted.conjugate_by(&p));

            let e1 = m.evaluate(&psi, &eta, None, true).unwrap();
            let e2 = m.evaluate(&psi2, &eta2, None, true).unwrap();
            let f1 = e1.energy.total;
            worst_f = worst_f.max((e2.energy.total - f1).abs() / (1.0 + f1.abs()));

            let (gp1, ge1) = gradients(&m, &e1).unwrap().unrotated(&e1.p);
            let (gp2, ge2) = gradients(&m, &e2).unwrap().unrotated(&e2.p);
            let scale = 1.0 + gp1.norm() + ge1.norm();
            worst_g = worst_g.max(gp2.sub(&gp1.mul_right(&p)).norm() / scale);
            worst_g = worst_g.max(ge2.sub(&ge1.conjugate_by(&p)).norm() / scale);
        }
    }
    ensure!(worst_f <= 1e-9, "energy changed by {worst_f:e} (relative)");
    ensure!(worst_g <= 1e-9, "gradient covariance off by {worst_g:e}");
    Ok(format!("{} fixtures x 20 samples, max dF {worst_f:.1e}, max dG {worst_g:.1e}", names().len()))
}

/// Fourth-order central difference of g at 0.
fn stencil(h: f64, g: impl Fn(f64) -> f64) -> f64 {
    (8.0 * (g(h) - g(-h)) - (g(2.0 * h) - g(-2.0 * h))) / (12.0 * h)
}

fn gradient_oracle() -> Check {
    let (_, m) = fixture("fd-small");
    ensure!(m.n_orbitals() == 3, "fd fixture must have 3 orbitals");
    let ng = m.bases[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (psi, eta) = random_point(&m, &mut rng, 0.05);
    let ev = m.evaluate(&psi, &eta, None, true).unwrap();
    let (g_psi, g_eta) = gradients(&m, &ev).unwrap().unrotated(&ev.p);
    let f = |x: &Blocks, e: &Blocks| m.free_energy(x, e).unwrap().total;
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    for h in [1e-4, 1e-5] {
        for _ in 0..10 {
            let raw = Blocks(m.bases.iter().map(|b| random_complex_matrix(b.len(), 3, &mut rng)).collect());
            let d = project_tangent_adjoint(&psi, &raw, 0.0, &m);
            let d = d.scale(1.0 / d.norm());
            let fd = stencil(h, |t| f(&ortho_qr(&psi, &d, t, &m).unwrap(), &eta));
            let an = g_psi.re_inner(&d);
            worst = worst.max(rel(fd, an, an.abs().max(1e-3 * g_psi.norm())));
            checks += 1;
        }
        let scale_eta = 1e-3 * g_eta.norm();
        for k in 0..m.n_kpoints() {
            for i in 0..3 {
                for j in i..3 {
                    for imag in [false, true] {
                        if i == j && imag {
                            continue;
                        }
                        let mut e = eta.zeros_like();
                        let z = if imag { Complex64::new(0.0, 1.0) } else { c(1.0) };
                        e.0[k][(i, j)] += z;
                        e.0[k][(j, i)] += z.conj();
                        let fd = stencil(h, |t| f(&psi, &eta.axpy(t, &e)));
                        let an = g_eta.re_inner(&e);
                        worst = worst.max(rel(fd, an, an.abs().max(scale_eta)));
                        checks += 1;
                    }
                }
            }
        }
    }
    ensure!(worst <= 1e-6, "worst relative error {worst:e}");
    let trace: f64 = g_eta.0.iter().map(|g| g.trace()).sum::<Complex64>().norm();
    let skew = g_eta.0.iter().map(|g| (g - g.adjoint()).norm()).fold(0.0, f64::max);
    ensure!(trace <= 1e-10, "eta gradient trace {trace:e}");
    ensure!(skew <= 1e-12, "eta gradient not Hermitian: {skew:e}");
    Ok(format!("N_G = {ng}, {checks} directional and entry checks, worst relative error {worst:.1e}, trace {trace:.1e}"))
}

fn smearing_axioms() -> Check {
    let kinds = [
        SmearingKind::FermiDirac,
        SmearingKind::Gaussian,
        SmearingKind::MethfesselPaxton { order: 1 },
        SmearingKind::MarzariVanderbilt { a: MV_DEFAULT_A },
    ];
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for k in kinds {
        let mut x = -6.0;
        while x <= 6.0 {
            let ds = (s_value(k, x + h) - s_value(k, x - h)) / (2.0 * h);
            worst = worst.max((ds - x * f_prime(k, x)).abs());
            x += 0.037;
        }
        ensure!((f_value(k, -40.0) - 1.0).abs() < 1e-14 && f_value(k, 40.0).abs() < 1e-14, "{k:?}: occupation limits");
        ensure!(s_value(k, 40.0).abs() < 1e-14 && s_value(k, -40.0).abs() < 1e-14, "{k:?}: entropy limits");
    }
    ensure!(worst <= 1e-7, "S' - x f' reached {worst:e}");
    for k in [SmearingKind::FermiDirac, SmearingKind::Gaussian] {
        let xs: Vec<f64> = (0..1000).map(|i| -5.0 + 10.0 * i as f64 / 999.0).collect();
        ensure!(xs.windows(2).all(|w| f_value(k, w[1]) < f_value(k, w[0])), "{k:?} not strictly decreasing");
    }
    Ok(format!("4 kinds, max |S' - x f'| {worst:.1e}, limits at +-40, strict monotonicity on 1000 points"))
}

fn preconditioner_identity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst: f64 = 0.0;
    let (mut compared, mut guarded) = (0usize, 0usize);
    for name in ["fd-small", "toy-metal", "generalized-overlap"] {
        let (_, m) = fixture(name);
        for _ in 0..5 {
            let (psi, eta) = random_point(&m, &mut rng, 0.05);
            let ev = m.evaluate(&psi, &eta, None, true).unwrap();
            let gp = gradients(&m, &ev).unwrap();
            let (applied, _) = precond_eta(&m, &ev.eigenvalues, ev.occ.mu, &gp.g_eta);
            let closed = precond_eta_closed_form(&gp, &ev.eigenvalues);
            let ones = Blocks(gp.g_eta.0.iter().map(|b| CMat::from_element(b.nrows(), b.ncols(), c(1.0))).collect());
            let (ratios, _) = precond_eta(&m, &ev.eigenvalues, ev.occ.mu, &ones);
            let cap = ETA_RATIO_CAP * m.smearing.sigma;
            for k in 0..m.n_kpoints() {
                let e = &ev.eigenvalues[k];
                let n = e.len();
                for i in 0..n {
                    for j in 0..n {
                        // entries with vanishing occupation contrast are capped on purpose
                        if ratios.0[k][(i, j)].re.abs() * m.weights()[k] >= cap * (1.0 - 1e-12) {
                            guarded += 1;
                            continue;
                        }
                        let d = if i == j { c(gp.shift_c + e[i]) } else { c(0.0) };
                        let direct = d - gp.sigma_matrices.0[k][(i, j)];
                        worst = worst.max((applied.0[k][(i, j)] - direct).norm());
                        worst = worst.max((closed.0[k][(i, j)] - direct).norm());
                        compared += 1;
                    }
                }
            }
        }
    }
    ensure!(worst <= 1e-10, "M(grad) - (cI + eta - Sigma) = {worst:e}");
    let k0 = kinetic_preconditioner(0.0);
    let k1 = kinetic_preconditioner(1.0);
    let x = 1e3;
    let kx = kinetic_preconditioner(x);
    ensure!((k0 - (2f64.sqrt() - 1.0)).abs() < 1e-15, "K(0) = {k0}");
    ensure!((k1 - 1.0 / 3.0).abs() < 1e-15, "K(1) = {k1}");
    ensure!((kx * 2.0 * x - 1.0).abs() < 2e-3, "K(1e3) = {kx}");
    Ok(format!("eta identity to {worst:.1e} on {compared} entries ({guarded} guarded); K(0) = {k0:.5}, K(1) = {k1:.5}, 2x K(x) at 1e3 = {:.5}", 2.0 * x * kx))
}

fn occupation_constraint() -> Check {
    let mut worst_n: f64 = 0.0;
    let mut worst_tr: f64 = 0.0;
    let mut rows = 0;
    for name in ["smooth-potential", "toy-metal", "generalized-overlap", "free-electron"] {
        let (cfg, m) = fixture(name);
        let n_e = cfg.system.n_electrons;
        for v in [Variant::Pcg, Variant::PcgR2] {
            let r = pcg(&m, v, Strategy::S3, 1, |_| {});
            for row in &r.log {
                worst_n = worst_n.max(row.charge_error / n_e);
                worst_tr = worst_tr.max(row.eta_grad_trace);
                rows += 1;
            }
        }
    }
    ensure!(worst_n <= 1e-12, "electron count off by {worst_n:e} N_e");
    ensure!(worst_tr <= 1e-10, "trace of eta gradient {worst_tr:e}");
    Ok(format!("{rows} iterates, max count error {worst_n:.1e} N_e, max trace {worst_tr:.1e}"))
}

fn manifold_discipline() -> Check {
    let (_, m) = fixture("toy-metal");
    let r = pcg(&m, Variant::Pcg, Strategy::S3, 1, |c| {
        c.max_iter = 200;
        c.tol = 0.0;
    });
    ensure!(r.log.len() == 201, "expected 200 steps, got {}", r.log.len() - 1);
    let worst_o = r.log.iter().map(|x| x.orthonormality).fold(0.0, f64::max);
    ensure!(worst_o <= 1e-10, "orthonormality error {worst_o:e}");
    let steps = &r.log[..r.log.len() - 1];
    for x in steps {
        ensure!(x.armijo_lhs <= x.armijo_rhs, "Armijo violated at {}: {} > {}", x.n, x.armijo_lhs, x.armijo_rhs);
    }
    Ok(format!("200 iterations, max ||Psi* B Psi - I|| {worst_o:.1e}, Armijo held at every step"))
}

fn retraction_order() -> Check {
    let (_, m) = fixture("generalized-overlap");
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let (psi, _) = random_point(&m, &mut rng, 0.0);
    let raw = Blocks(m.bases.iter().map(|b| random_complex_matrix(b.len(), m.n_orbitals(), &mut rng)).collect());
    let d = project_tangent_adjoint(&psi, &raw, 0.0, &m);
    let d = d.scale(1.0 / d.norm());
    let mismatch = |t: f64| {
        let h = 1e-5 * t;
        let fd = ortho_qr(&psi, &d, t + h, &m)
            .unwrap()
            .sub(&ortho_qr(&psi, &d, t - h, &m).unwrap())
            .scale(0.5 / h);
        fd.sub(&retraction_taylor_derivative(&psi, &d, t, &m)).norm()
    };
    let ts = [0.2, 0.1, 0.05, 0.025];
    let errs: Vec<f64> = ts.iter().map(|&t| mismatch(t)).collect();
    let orders: Vec<f64> = errs.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    let min = orders.iter().cloned().fold(f64::INFINITY, f64::min);
    ensure!(min >= 2.7, "observed orders {orders:?}");
    Ok(format!("observed orders {:?} under halving", orders.iter().map(|o| (o * 100.0).round() / 100.0).collect::<Vec<_>>()))
}

fn cross_method() -> Check {
    let mut parts = Vec::new();
    for name in ["smooth-potential", "toy-metal"] {
        let (cfg, m) = fixture(name);
        let s = scf(&cfg, &m);
        let p = pcg(&m, Variant::Pcg, Strategy::S3, cfg.run.seed, |_| {});
        ensure!(s.converged && p.converged, "{name}: scf {} pcg {}", s.converged, p.converged);
        let de = (s.energy.total - p.energy.total).abs();
        ensure!(de <= 1e-8, "{name}: energies differ by {de:e}");
        ensure!(s.ks_residual <= 1e-5 && p.ks_residual <= 1e-5, "{name}: ks residuals {:e} {:e}", s.ks_residual, p.ks_residual);
        parts.push(format!("{name} dF {de:.1e} ks {:.1e}/{:.1e}", p.ks_residual, s.ks_residual));
    }
    Ok(parts.join("; "))
}

fn trend() -> Check {
    let (cfg, m) = fixture("toy-metal");
    let its: Vec<usize> = [Strategy::S1, Strategy::S2, Strategy::S3]
        .iter()
        .map(|&s| {
            let r = pcg(&m, Variant::Pcg, s, cfg.run.seed, |_| {});
            if r.converged { r.iterations } else { usize::MAX }
        })
        .collect();
    ensure!(its[2] <= its[1] && its[1] <= its[0], "toy-metal iterations S1 {} S2 {} S3 {}", its[0], its[1], its[2]);

    let (acfg, am) = fixture("adversarial-scf");
    let s = scf(&acfg, &am);
    ensure!(acfg.scf_config().max_iter == 500, "adversarial SCF must run 500 iterations");
    ensure!(!s.converged, "linear mixing converged on the adversarial fixture");
    let tail = &s.log[s.log.len() - 20..];
    let osc = tail.iter().map(|r| r.density_residual).fold(0.0, f64::max);
    let p = pcg(&am, Variant::Pcg, Strategy::S3, acfg.run.seed, |_| {});
    ensure!(p.converged, "PCG-S3 did not converge on the adversarial fixture");
    Ok(format!(
        "toy-metal S1/S2/S3 = {}/{}/{}; adversarial: SCF unconverged after 500 (residual still {osc:.1e}), PCG-S3 converged in {}",
        its[0], its[1], its[2], p.iterations
    ))
}

fn restarts() -> Check {
    ensure!(restart_condition(-1.2, 0.5, 1.5, 0.5, 1.0) == Some(false), "hand value 1");
    ensure!(restart_condition(-0.8, 0.5, 1.5, 0.5, 1.0) == Some(true), "hand value 2");
    ensure!(restart_ratio(-0.8, 0.5, 1.5, 1.0) == Some(0.4), "hand value 3");
    ensure!(restart_ratio(-1.0, -2.0, 2.0, 1.0) == Some(0.25), "hand value 4");
    ensure!(restart_condition(-1.0, 0.0, 0.0, 0.5, 1.0).is_none(), "zero denominator");

    let (cfg, m) = fixture("smooth-potential");
    let at = 6;
    let r1 = pcg(&m, Variant::PcgR1, Strategy::S3, cfg.run.seed, |c| c.inject_ascent_at = Some(at));
    let r2 = pcg(&m, Variant::PcgR2, Strategy::S3, cfg.run.seed, |c| c.inject_ascent_at = Some(at));
    ensure!(r1.log[at].sign_flipped, "R1 did not flip the injected ascent direction");
    ensure!(r2.log[at].restarted, "R2 did not restart on the injected ascent direction");
    ensure!(r1.converged && r2.converged, "R1 converged {} R2 converged {}", r1.converged, r2.converged);
    let logged = r1.log.iter().chain(&r2.log).filter(|x| x.restart_ratio.is_finite()).count();
    ensure!(logged > 0, "restart ratios not logged");
    Ok(format!(
        "ascent injected at {at}: R1 flipped and converged in {}, R2 restarted and converged in {}; {logged} ratios logged",
        r1.iterations, r2.iterations
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Check, u64); 10] = [
        ("invariance", invariance, 30),
        ("gradient oracle", gradient_oracle, 60),
        ("smearing axioms", smearing_axioms, 30),
        ("preconditioner identity", preconditioner_identity, 30),
        ("occupation constraint", occupation_constraint, 120),
        ("manifold discipline", manifold_discipline, 120),
        ("retraction order", retraction_order, 30),
        ("cross-method agreement", cross_method, 300),
        ("strategy trend and SCF failure", trend, 600),
        ("restart behavior", restarts, 120),
    ];
    let mut failed = Vec::new();
    for (i, (name, check, budget)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let out = check();
        let dt = t.elapsed();
        let out = match out {
            Ok(s) if dt > Duration::from_secs(*budget) => Err(format!("{s}; took {dt:?}, budget {budget} s")),
            other => other,
        };
        match out {
            Ok(detail) => println!("criterion {:>2} PASS {name}: {detail} ({:.2} s)", i + 1, dt.as_secs_f64()),
            Err(why) => {
                println!("criterion {:>2} FAIL {name}: {why}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
    println!("all {} criteria passed", criteria.len());
}

