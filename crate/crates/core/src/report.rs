//! Run orchestration and artifacts: iteration CSV, summary JSON and a
//! matplotlib script for the convergence curves.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{Algorithm, RunConfig};
use crate::error::{Error, Result};
use crate::model::EnergyBreakdown;
use crate::optimizer::{initial_state, minimize, IterationRecord, StopReason};
use crate::scf::{run_scf, ScfRecord};

pub const HARTREE_TO_RY: f64 = 2.0;

pub const PCG_CSV_HEADER: &str =
    "n,free_energy_ry,free_energy_ha,grad_psi_half,grad_eta_sf,error,t_psi,t_eta,beta,zeta,restarted,mu";
pub const SCF_CSV_HEADER: &str =
    "n,free_energy_ry,free_energy_ha,grad_psi_half,grad_eta_sf,error,density_residual,mu";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnergySummary {
    pub total_ha: f64,
    pub total_ry: f64,
    pub kinetic_nonlocal_ha: f64,
    pub local_ha: f64,
    pub hartree_ha: f64,
    pub xc_ha: f64,
    pub entropy_ha: f64,
}

impl From<&EnergyBreakdown> for EnergySummary {
    fn from(e: &EnergyBreakdown) -> Self {
        Self {
            total_ha: e.total,
            total_ry: e.total * HARTREE_TO_RY,
            kinetic_nonlocal_ha: e.kinetic_nonlocal,
            local_ha: e.local,
            hartree_ha: e.hartree,
            xc_ha: e.xc,
            entropy_ha: e.entropy,
        }
    }
}

/// Final state of one run, as written to the summary JSON.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub name: String,
    pub algorithm: String,
    pub seed: u64,
    pub converged: bool,
    pub stop: String,
    pub iterations: usize,
    pub energy: EnergySummary,
    pub mu_ha: f64,
    pub mu_ry: f64,
    /// Eigenvalues of eta shifted by c, so they are comparable with SCF eigenvalues.
    pub eigenvalues_ha: Vec<Vec<f64>>,
    pub occupations: Vec<Vec<f64>>,
    pub error: f64,
    pub ks_residual: f64,
    pub density_residual: Option<f64>,
}

#[derive(Clone, Debug)]
pub enum Log {
    Pcg(Vec<IterationRecord>),
    Scf(Vec<ScfRecord>),
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub summary: Summary,
    pub log: Log,
}

/// Runs one algorithm on a validated config.
pub fn execute(config: &RunConfig, algorithm: Algorithm) -> Result<RunOutcome> {
    let model = config.build_model()?;
    let name = config.run.name.clone();
    let seed = config.run.seed;
    match algorithm {
        Algorithm::Pcg { variant, strategy } => {
            let opt = crate::optimizer::OptimizerConfig { variant, strategy, ..config.optimizer_config() };
            let (psi, eta) = initial_state(&model, seed)?;
            let r = minimize(&model, &opt, psi, eta)?;
            // report eigenvalues in the frame where the KS residual is measured
            let shift = r.shift_c;
            let summary = Summary {
                name,
                algorithm: algorithm.label(),
                seed,
                converged: r.converged,
                stop: r.stop.as_str().into(),
                iterations: r.iterations,
                energy: (&r.energy).into(),
                mu_ha: r.mu + shift,
                mu_ry: (r.mu + shift) * HARTREE_TO_RY,
                eigenvalues_ha: r.eigenvalues.iter().map(|e| e.iter().map(|x| x + shift).collect()).collect(),
                occupations: r.occupations.clone(),
                error: r.error,
                ks_residual: r.ks_residual,
                density_residual: None,
            };
            Ok(RunOutcome { summary, log: Log::Pcg(r.log) })
        }
        Algorithm::Scf => {
            let r = run_scf(&model, &config.scf_config(), &model.superposition_density())?;
            let summary = Summary {
                name,
                algorithm: algorithm.label(),
                seed,
                converged: r.converged,
                stop: if r.converged { StopReason::Converged } else { StopReason::MaxIter }.as_str().into(),
                iterations: r.iterations,
                energy: (&r.energy).into(),
                mu_ha: r.mu,
                mu_ry: r.mu * HARTREE_TO_RY,
                eigenvalues_ha: r.eigenvalues.clone(),
                occupations: r.occupations.clone(),
                error: r.error,
                ks_residual: r.ks_residual,
                density_residual: Some(r.density_residual),
            };
            Ok(RunOutcome { summary, log: Log::Scf(r.log) })
        }
    }
}

fn num(x: f64) -> String {
    format!("{x:.15e}")
}

pub fn csv(log: &Log) -> String {
    let mut out = String::new();
    match log {
        Log::Pcg(rows) => {
            out.push_str(PCG_CSV_HEADER);
            out.push('\n');
            for r in rows {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{},{},{}",
                    r.n,
                    num(r.free_energy * HARTREE_TO_RY),
                    num(r.free_energy),
                    num(r.grad_psi_half),
                    num(r.grad_eta_sf),
                    num(r.error),
                    num(r.t_psi),
                    num(r.t_eta),
                    num(r.beta),
                    num(r.zeta),
                    u8::from(r.restarted),
                    num(r.mu)
                );
            }
        }
        Log::Scf(rows) => {
            out.push_str(SCF_CSV_HEADER);
            out.push('\n');
            for r in rows {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    r.n,
                    num(r.free_energy * HARTREE_TO_RY),
                    num(r.free_energy),
                    num(r.grad_psi_half),
                    num(r.grad_eta_sf),
                    num(r.error),
                    num(r.density_residual),
                    num(r.mu)
                );
            }
        }
    }
    out
}

pub fn summary_json(s: &Summary) -> Result<String> {
    serde_json::to_string_pretty(s).map(|mut t| {
        t.push('\n');
        t
    })
    .map_err(|e| Error::Serialize(e.to_string()))
}

/// Python script drawing three log-scale panels: F - F_min, the orbital
/// gradient and the eta gradient, one curve per CSV.
pub fn plot_script(csv_files: &[String], png: &str) -> String {
    let files = csv_files.iter().map(|f| format!("{f:?}")).collect::<Vec<_>>().join(", ");
    format!(
        r#"import csv
import os
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

HERE = os.path.dirname(os.path.abspath(__file__))
FILES = [{files}]


def load(name):
    with open(os.path.join(HERE, name)) as fh:
        rows = list(csv.DictReader(fh))
    return {{k: [float(r[k]) for r in rows] for k in ("n", "free_energy_ha", "grad_psi_half", "grad_eta_sf")}}


data = {{f: load(f) for f in FILES}}
f_min = min(min(d["free_energy_ha"]) for d in data.values())
fig, axes = plt.subplots(1, 3, figsize=(15, 4))
panels = [
    ("F - F_min (Ha)", lambda d: [max(x - f_min, 1e-16) for x in d["free_energy_ha"]]),
    ("|1/2 grad_Psi F|", lambda d: d["grad_psi_half"]),
    ("|grad_eta F|_sF", lambda d: d["grad_eta_sf"]),
]
for ax, (title, pick) in zip(axes, panels):
    for f, d in data.items():
        ax.semilogy(d["n"], pick(d), label=os.path.splitext(f)[0])
    ax.set_title(title)
    ax.set_xlabel("iteration")
    ax.legend()
fig.tight_layout()
fig.savefig(os.path.join(HERE, {png:?}), dpi=120)
"#
    )
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io { path: path.display().to_string(), source })
}

/// Paths of the files written for one run.
#[derive(Clone, Debug)]
pub struct Artifacts {
    pub csv: PathBuf,
    pub json: PathBuf,
    pub plot: PathBuf,
}

fn stem(outcome: &RunOutcome) -> String {
    format!("{}-{}", outcome.summary.name, outcome.summary.algorithm)
}

pub fn write_run(outcome: &RunOutcome, dir: &Path) -> Result<Artifacts> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.display().to_string(), source })?;
    let stem = stem(outcome);
    let a = Artifacts {
        csv: dir.join(format!("{stem}.csv")),
        json: dir.join(format!("{stem}.json")),
        plot: dir.join(format!("{stem}_plot.py")),
    };
    write(&a.csv, &csv(&outcome.log))?;
    write(&a.json, &summary_json(&outcome.summary)?)?;
    write(&a.plot, &plot_script(&[format!("{stem}.csv")], &format!("{stem}.png")))?;
    Ok(a)
}

/// Runs each algorithm, writes its artifacts and a combined plot script.
pub fn compare(config: &RunConfig, algorithms: &[Algorithm], dir: &Path) -> Result<(Vec<RunOutcome>, PathBuf)> {
    let mut outcomes = Vec::new();
    let mut csvs = Vec::new();
    for &alg in algorithms {
        let o = execute(config, alg)?;
        write_run(&o, dir)?;
        csvs.push(format!("{}.csv", stem(&o)));
        outcomes.push(o);
    }
    let plot = dir.join(format!("{}-compare_plot.py", config.run.name));
    write(&plot, &plot_script(&csvs, &format!("{}-compare.png", config.run.name)))?;
    Ok((outcomes, plot))
}

/// One-line human summary.
pub fn describe(s: &Summary) -> String {
    format!(
        "{} {}: {} after {} iterations, F = {:.12} Ha ({:.12} Ry), error {:.3e}, ks residual {:.3e}",
        s.name,
        s.algorithm,
        if s.converged { "converged" } else { "not converged" },
        s.iterations,
        s.energy.total_ha,
        s.energy.total_ry,
        s.error,
        s.ks_residual
    )
}
