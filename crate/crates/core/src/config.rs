//! Run configuration: a TOML document describing the system, the smearing,
//! and the solver settings. Every violated constraint is reported at once.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::block_linalg::CMat;
use crate::error::{Error, Result};
use crate::lattice::{KpointSet, UnitCell};
use crate::model::{Model, ModelSpec, ProjectorSpec, Species, XcKind};
use crate::optimizer::{OptimizerConfig, Strategy, Variant};
use crate::scf::{Mixing, ScfConfig};
use crate::smearing::{SmearingKind, SmearingSpec, MV_DEFAULT_A};
use num_complex::Complex64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeciesConfig {
    pub amplitude: f64,
    pub width: f64,
    /// Cartesian positions in bohr.
    pub positions: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectorConfig {
    pub position: [f64; 3],
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    /// Lattice vectors as rows, in bohr.
    pub cell: [[f64; 3]; 3],
    /// Fractional reciprocal coordinates.
    pub kpoints: Vec<[f64; 3]>,
    /// Spin-including weights summing to 2.
    pub weights: Vec<f64>,
    pub e_cut: f64,
    pub n_electrons: f64,
    pub n_orbitals: usize,
    #[serde(default)]
    pub xc: XcChoice,
    #[serde(default)]
    pub species: Vec<SpeciesConfig>,
    #[serde(default)]
    pub projectors: Vec<ProjectorConfig>,
    /// Real part of the nonlocal strengths, K x K.
    #[serde(default)]
    pub d: Vec<Vec<f64>>,
    #[serde(default)]
    pub d_imag: Vec<Vec<f64>>,
    /// Real part of the overlap augmentation, K x K.
    #[serde(default)]
    pub q: Vec<Vec<f64>>,
    #[serde(default)]
    pub q_imag: Vec<Vec<f64>>,
    #[serde(default = "default_aug_width")]
    pub aug_width: f64,
}

fn default_aug_width() -> f64 {
    0.7
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum XcChoice {
    None,
    #[default]
    Slater,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SmearingChoice {
    FermiDirac,
    Gaussian,
    MethfesselPaxton,
    MarzariVanderbilt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmearingConfig {
    pub kind: SmearingChoice,
    /// Width in hartree.
    pub sigma: f64,
    /// Methfessel-Paxton order.
    #[serde(default)]
    pub order: Option<usize>,
    /// Marzari-Vanderbilt shape parameter.
    #[serde(default)]
    pub a: Option<f64>,
}

impl SmearingConfig {
    pub fn kind(&self) -> SmearingKind {
        match self.kind {
            SmearingChoice::FermiDirac => SmearingKind::FermiDirac,
            SmearingChoice::Gaussian => SmearingKind::Gaussian,
            SmearingChoice::MethfesselPaxton => SmearingKind::MethfesselPaxton { order: self.order.unwrap_or(1) },
            SmearingChoice::MarzariVanderbilt => SmearingKind::MarzariVanderbilt { a: self.a.unwrap_or(MV_DEFAULT_A) },
        }
    }
}

/// Optimizer settings; anything omitted takes the library default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub nu: Option<f64>,
    pub alpha: Option<f64>,
    pub gamma: Option<f64>,
    pub a: Option<f64>,
    pub t_min: Option<f64>,
    pub t_min_psi: Option<f64>,
    pub t_min_eta: Option<f64>,
    pub t_trial: Option<f64>,
    pub theta_max: Option<f64>,
    pub ratio_lower: Option<f64>,
    pub ratio_upper: Option<f64>,
    pub max_iter: Option<usize>,
    pub tol: Option<f64>,
    pub max_backtracks: Option<usize>,
    pub inject_ascent_at: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixingChoice {
    Linear,
    #[default]
    Broyden,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScfSection {
    pub mixing: Option<MixingChoice>,
    pub factor: Option<f64>,
    pub history: Option<usize>,
    pub eps_density: Option<f64>,
    pub max_iter: Option<usize>,
    pub eig_tol: Option<f64>,
    pub dense_limit: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_algorithm")]
    pub algorithm: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
    #[serde(default = "default_name")]
    pub name: String,
}

fn default_algorithm() -> String {
    "pcg-s3".into()
}
fn default_seed() -> u64 {
    1
}
fn default_out_dir() -> String {
    "out".into()
}
fn default_name() -> String {
    "run".into()
}

impl Default for RunSection {
    fn default() -> Self {
        Self { algorithm: default_algorithm(), seed: default_seed(), out_dir: default_out_dir(), name: default_name() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemConfig,
    pub smearing: SmearingConfig,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub scf: ScfSection,
    #[serde(default)]
    pub run: RunSection,
}

/// Which solver a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algorithm {
    Pcg { variant: Variant, strategy: Strategy },
    Scf,
}

impl Algorithm {
    /// Accepts `scf` and `pcg-s{1,2,3}` with an optional `-r1` or `-r2` suffix.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "scf" {
            return Ok(Algorithm::Scf);
        }
        let bad = || Error::Config(vec![format!("unknown algorithm '{s}' (expected scf or pcg-s1|s2|s3[-r1|-r2])")]);
        let rest = s.strip_prefix("pcg-").ok_or_else(bad)?;
        let mut parts = rest.split('-');
        let strategy = match parts.next() {
            Some("s1") => Strategy::S1,
            Some("s2") => Strategy::S2,
            Some("s3") => Strategy::S3,
            _ => return Err(bad()),
        };
        let variant = match parts.next() {
            None => Variant::Pcg,
            Some("r1") => Variant::PcgR1,
            Some("r2") => Variant::PcgR2,
            _ => return Err(bad()),
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(Algorithm::Pcg { variant, strategy })
    }

    pub fn label(&self) -> String {
        match self {
            Algorithm::Scf => "scf".into(),
            Algorithm::Pcg { variant, strategy } => {
                let s = match strategy {
                    Strategy::S1 => "s1",
                    Strategy::S2 => "s2",
                    Strategy::S3 => "s3",
                };
                match variant {
                    Variant::Pcg => format!("pcg-{s}"),
                    Variant::PcgR1 => format!("pcg-{s}-r1"),
                    Variant::PcgR2 => format!("pcg-{s}-r2"),
                }
            }
        }
    }
}

fn complex_matrix(name: &str, re: &[Vec<f64>], im: &[Vec<f64>], k: usize, errs: &mut Vec<String>) -> CMat {
    let mut m = CMat::zeros(k, k);
    if re.is_empty() && k == 0 {
        return m;
    }
    if re.len() != k || re.iter().any(|r| r.len() != k) {
        errs.push(format!("system.{name} must be {k}x{k}"));
        return m;
    }
    if !im.is_empty() && (im.len() != k || im.iter().any(|r| r.len() != k)) {
        errs.push(format!("system.{name}_imag must be {k}x{k}"));
        return m;
    }
    for i in 0..k {
        for j in 0..k {
            let b = if im.is_empty() { 0.0 } else { im[i][j] };
            m[(i, j)] = Complex64::new(re[i][j], b);
        }
    }
    m
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        let errs = cfg.violations();
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| Error::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialize(e.to_string()))
    }

    pub fn algorithm(&self) -> Result<Algorithm> {
        Algorithm::parse(&self.run.algorithm)
    }

    pub fn model_spec(&self) -> std::result::Result<ModelSpec, Vec<String>> {
        let s = &self.system;
        let mut errs = Vec::new();
        let k = s.projectors.len();
        let d = complex_matrix("d", &s.d, &s.d_imag, k, &mut errs);
        let q = complex_matrix("q", &s.q, &s.q_imag, k, &mut errs);
        let spec = ModelSpec {
            species: s
                .species
                .iter()
                .map(|x| Species { amplitude: x.amplitude, width: x.width, positions: x.positions.clone() })
                .collect(),
            projectors: s.projectors.iter().map(|p| ProjectorSpec { position: p.position, radius: p.radius }).collect(),
            d,
            q,
            aug_width: s.aug_width,
            xc: match s.xc {
                XcChoice::None => XcKind::None,
                XcChoice::Slater => XcKind::SlaterX,
            },
            n_electrons: s.n_electrons,
            n_orbitals: s.n_orbitals,
        };
        if errs.is_empty() {
            errs.extend(spec.violations());
        }
        if errs.is_empty() {
            Ok(spec)
        } else {
            Err(errs)
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        let o = &self.optimizer;
        let d = OptimizerConfig::default();
        let (variant, strategy) = match self.algorithm() {
            Ok(Algorithm::Pcg { variant, strategy }) => (variant, strategy),
            _ => (d.variant, d.strategy),
        };
        OptimizerConfig {
            variant,
            strategy,
            nu: o.nu.unwrap_or(d.nu),
            alpha: o.alpha.unwrap_or(d.alpha),
            gamma: o.gamma.unwrap_or(d.gamma),
            a: o.a.unwrap_or(d.a),
            t_min_psi: o.t_min_psi.or(o.t_min).unwrap_or(d.t_min_psi),
            t_min_eta: o.t_min_eta.or(o.t_min).unwrap_or(d.t_min_eta),
            t_trial_init: o.t_trial.unwrap_or(d.t_trial_init),
            theta_max: o.theta_max.unwrap_or(d.theta_max),
            ratio_bounds: match (o.ratio_lower, o.ratio_upper) {
                (None, None) => None,
                (lo, hi) => Some((lo.unwrap_or(0.0), hi.unwrap_or(f64::INFINITY))),
            },
            max_iter: o.max_iter.unwrap_or(d.max_iter),
            tol: o.tol.unwrap_or(d.tol),
            max_backtracks: o.max_backtracks.unwrap_or(d.max_backtracks),
            inject_ascent_at: o.inject_ascent_at,
        }
    }

    pub fn scf_config(&self) -> ScfConfig {
        let s = &self.scf;
        let d = ScfConfig::default();
        let (d_hist, d_factor) = match d.mixing {
            Mixing::BroydenLite { history, factor } => (history, factor),
            Mixing::Linear { factor } => (1, factor),
        };
        let factor = s.factor.unwrap_or(d_factor);
        ScfConfig {
            mixing: match s.mixing.unwrap_or_default() {
                MixingChoice::Linear => Mixing::Linear { factor },
                MixingChoice::Broyden => Mixing::BroydenLite { history: s.history.unwrap_or(d_hist), factor },
            },
            eps_density: s.eps_density.unwrap_or(d.eps_density),
            max_iter: s.max_iter.unwrap_or(d.max_iter),
            eig_tol: s.eig_tol.unwrap_or(d.eig_tol),
            dense_limit: s.dense_limit.unwrap_or(d.dense_limit),
        }
    }

    /// Every violated constraint in the document.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let s = &self.system;
        let a = s.cell;
        if let Err(e) = UnitCell::new(a[0], a[1], a[2]) {
            v.push(format!("system.cell: {e}"));
        }
        if s.kpoints.len() != s.weights.len() {
            v.push(format!("system: {} k-points but {} weights", s.kpoints.len(), s.weights.len()));
        } else if let Err(e) = KpointSet::new(s.kpoints.clone(), s.weights.clone()) {
            v.push(format!("system.weights: {e}"));
        }
        if !(s.e_cut > 0.0) {
            v.push(format!("system.e_cut = {} must be positive", s.e_cut));
        }
        if let Err(errs) = self.model_spec() {
            v.extend(errs.into_iter().map(|e| format!("system: {e}")));
        }
        if let Err(e) = SmearingSpec::new(self.smearing.kind(), self.smearing.sigma) {
            v.push(format!("smearing: {e}"));
        }
        if self.smearing.order.is_some() && self.smearing.kind != SmearingChoice::MethfesselPaxton {
            v.push("smearing.order only applies to methfessel-paxton".into());
        }
        if self.smearing.a.is_some() && self.smearing.kind != SmearingChoice::MarzariVanderbilt {
            v.push("smearing.a only applies to marzari-vanderbilt".into());
        }
        match self.algorithm() {
            Ok(_) => {}
            Err(Error::Config(e)) => v.extend(e.into_iter().map(|e| format!("run.algorithm: {e}"))),
            Err(e) => v.push(e.to_string()),
        }
        v.extend(self.optimizer_config().violations().into_iter().map(|e| format!("optimizer: {e}")));
        if self.optimizer.max_iter == Some(0) {
            v.push("optimizer: max_iter must be at least 1".into());
        }
        v.extend(self.scf_config().violations().into_iter().map(|e| format!("scf: {e}")));
        if self.scf.max_iter == Some(0) {
            v.push("scf: max_iter must be at least 1".into());
        }
        v
    }

    pub fn build_model(&self) -> Result<Model> {
        let errs = self.violations();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let a = self.system.cell;
        let cell = UnitCell::new(a[0], a[1], a[2])?;
        let kpts = KpointSet::new(self.system.kpoints.clone(), self.system.weights.clone())?;
        let spec = self.model_spec().map_err(Error::Config)?;
        let smearing = SmearingSpec::new(self.smearing.kind(), self.smearing.sigma)?;
        Model::new(cell, kpts, self.system.e_cut, spec, smearing)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[system]
cell = [[6.0, 0.0, 0.0], [0.0, 6.0, 0.0], [0.0, 0.0, 6.0]]
kpoints = [[0.0, 0.0, 0.0]]
weights = [2.0]
e_cut = 1.5
n_electrons = 2.0
n_orbitals = 3

[smearing]
kind = "gaussian"
sigma = 0.02
"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        let o = cfg.optimizer_config();
        assert_eq!(o.nu, 0.25);
        assert_eq!(o.alpha, 0.0);
        assert_eq!(o.gamma, 0.5);
        assert_eq!(o.a, 1.0);
        assert_eq!(o.t_min_psi, 1e-3);
        assert_eq!(o.t_min_eta, 1e-3);
        assert_eq!(o.t_trial_init, 0.4);
        assert_eq!(o.ratio_bounds, None);
        assert_eq!(cfg.algorithm().unwrap(), Algorithm::Pcg { variant: Variant::Pcg, strategy: Strategy::S3 });
        assert!(cfg.build_model().is_ok());
    }

    #[test]
    fn weight_sum_and_sigma_are_both_reported() {
        let text = MINIMAL.replace("weights = [2.0]", "weights = [1.7]").replace("sigma = 0.02", "sigma = -0.02");
        match RunConfig::from_toml(&text) {
            Err(Error::Config(errs)) => {
                assert_eq!(errs.len(), 2, "{errs:?}");
                assert!(errs[0].contains("weights"));
                assert!(errs[1].contains("smearing"));
            }
            other => panic!("expected config errors, got {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("e_cut = 1.5", "e_cut = 1.5\necut = 2.0");
        assert!(matches!(RunConfig::from_toml(&text), Err(Error::Config(_))));
        let text = format!("{MINIMAL}\n[optimizer]\nnu = 0.3\nbogus = 1\n");
        assert!(matches!(RunConfig::from_toml(&text), Err(Error::Config(_))));
    }

    #[test]
    fn algorithm_names_round_trip() {
        for s in ["scf", "pcg-s1", "pcg-s2", "pcg-s3", "pcg-s3-r1", "pcg-s2-r2"] {
            assert_eq!(Algorithm::parse(s).unwrap().label(), s);
        }
        for s in ["pcg", "pcg-s4", "pcg-s3-r3", "pcg-s3-r1-x", "newton"] {
            assert!(Algorithm::parse(s).is_err(), "{s}");
        }
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::from_toml(MINIMAL).unwrap();
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, back);
    }
}
