//! Named, deterministic test systems.

use crate::config::{
    OptimizerSection, ProjectorConfig, RunConfig, RunSection, ScfSection, SmearingChoice, SmearingConfig,
    SpeciesConfig, SystemConfig, XcChoice,
};
use crate::error::{Error, Result};

pub const FIXTURES: [(&str, &str); 7] = [
    ("free-electron", "no potentials, complete shells, analytic energy"),
    ("smooth-potential", "two Gaussian wells in a skewed cell, insulator-like"),
    ("toy-metal", "two bands crossing the Fermi level, Gaussian smearing"),
    ("rank-k-nonlocal", "two nonlocal projectors, identity overlap"),
    ("generalized-overlap", "two projectors on one site with a positive augmentation"),
    ("adversarial-scf", "long metallic cell where plain linear mixing sloshes"),
    ("fd-small", "three orbitals on about thirty plane waves"),
];

/// Sheared cell without point symmetry, so no level is degenerate by symmetry.
const SKEW: [[f64; 3]; 3] = [[5.5, 0.0, 0.0], [0.4, 6.1, 0.0], [0.3, -0.2, 6.7]];

fn two_wells() -> Vec<SpeciesConfig> {
    vec![
        SpeciesConfig { amplitude: 3.0, width: 1.0, positions: vec![[2.0, 2.5, 3.0]] },
        SpeciesConfig { amplitude: 1.5, width: 0.8, positions: vec![[4.2, 4.0, 4.6]] },
    ]
}

fn cubic(l: f64) -> [[f64; 3]; 3] {
    [[l, 0.0, 0.0], [0.0, l, 0.0], [0.0, 0.0, l]]
}

fn base(system: SystemConfig, kind: SmearingChoice, sigma: f64, name: &str) -> RunConfig {
    RunConfig {
        system,
        smearing: SmearingConfig { kind, sigma, order: None, a: None },
        optimizer: OptimizerSection::default(),
        scf: ScfSection::default(),
        run: RunSection { name: name.into(), ..RunSection::default() },
    }
}

fn local_system(cell: [[f64; 3]; 3], e_cut: f64, n_e: f64, n: usize, species: Vec<SpeciesConfig>) -> SystemConfig {
    SystemConfig {
        cell,
        kpoints: vec![[0.0; 3]],
        weights: vec![2.0],
        e_cut,
        n_electrons: n_e,
        n_orbitals: n,
        xc: XcChoice::Slater,
        species,
        projectors: Vec::new(),
        d: Vec::new(),
        d_imag: Vec::new(),
        q: Vec::new(),
        q_imag: Vec::new(),
        aug_width: 0.7,
    }
}

pub fn names() -> Vec<&'static str> {
    FIXTURES.iter().map(|(n, _)| *n).collect()
}

pub fn make_fixture(name: &str) -> Result<RunConfig> {
    let cfg = match name {
        "free-electron" => {
            let mut s = local_system(cubic(2.0 * std::f64::consts::PI), 2.1, 2.0, 7, Vec::new());
            s.xc = XcChoice::None;
            base(s, SmearingChoice::FermiDirac, 0.1, name)
        }
        "smooth-potential" => {
            let s = local_system(SKEW, 2.0, 2.0, 3, two_wells());
            base(s, SmearingChoice::FermiDirac, 0.1, name)
        }
        "toy-metal" => {
            let mut s = local_system(
                [[6.07, 0.0, 0.0], [0.3, 4.57, 0.0], [0.2, 0.1, 9.01]],
                1.8,
                3.42,
                3,
                vec![
                    SpeciesConfig { amplitude: 3.05, width: 1.11, positions: vec![[5.8, 0.1, 8.88]] },
                    SpeciesConfig { amplitude: 1.06, width: 1.0, positions: vec![[1.02, 0.56, 0.08]] },
                ],
            );
            s.kpoints = vec![[0.0, 0.0, 0.0], [0.0, 0.0, 0.5]];
            s.weights = vec![1.0, 1.0];
            base(s, SmearingChoice::Gaussian, 0.025, name)
        }
        "rank-k-nonlocal" => {
            let mut s = local_system(SKEW, 2.0, 2.0, 3, two_wells());
            s.projectors = vec![
                ProjectorConfig { position: [2.0, 2.5, 3.0], radius: 0.8 },
                ProjectorConfig { position: [4.2, 4.0, 4.6], radius: 0.9 },
            ];
            s.d = vec![vec![0.5, 0.1], vec![0.1, -0.3]];
            s.q = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
            base(s, SmearingChoice::FermiDirac, 0.1, name)
        }
        "generalized-overlap" => {
            let mut s = local_system(SKEW, 2.0, 2.0, 3, two_wells());
            s.projectors = vec![
                ProjectorConfig { position: [2.0, 2.5, 3.0], radius: 0.8 },
                ProjectorConfig { position: [2.0, 2.5, 3.0], radius: 1.2 },
            ];
            s.d = vec![vec![0.3, 0.0], vec![0.0, -0.2]];
            s.q = vec![vec![0.3, 0.1], vec![0.1, 0.2]];
            base(s, SmearingChoice::FermiDirac, 0.1, name)
        }
        "adversarial-scf" => {
            let mut s = local_system(
                [[4.0, 0.0, 0.0], [0.0, 4.0, 0.0], [0.0, 0.0, 24.0]],
                1.2,
                4.0,
                5,
                vec![SpeciesConfig { amplitude: 1.0, width: 1.0, positions: vec![[2.0, 2.0, 6.0], [2.0, 2.0, 18.0]] }],
            );
            s.xc = XcChoice::Slater;
            let mut c = base(s, SmearingChoice::Gaussian, 0.01, name);
            c.scf.mixing = Some(crate::config::MixingChoice::Linear);
            c.scf.factor = Some(0.9);
            c
        }
        "fd-small" => {
            let mut s = local_system(
                [[4.0, 0.0, 0.0], [0.0, 3.6, 0.0], [0.3, 0.0, 4.4]],
                4.4,
                3.0,
                3,
                vec![SpeciesConfig { amplitude: 1.5, width: 0.8, positions: vec![[1.0, 1.0, 1.5]] }],
            );
            s.projectors = vec![ProjectorConfig { position: [2.0, 1.5, 2.0], radius: 0.8 }];
            s.d = vec![vec![0.4]];
            s.q = vec![vec![0.25]];
            base(s, SmearingChoice::FermiDirac, 0.08, name)
        }
        other => return Err(Error::UnknownFixture(other.to_string())),
    };
    debug_assert!(cfg.violations().is_empty(), "{name}: {:?}", cfg.violations());
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_fixture_builds() {
        for name in names() {
            let cfg = make_fixture(name).unwrap();
            assert!(cfg.violations().is_empty(), "{name}: {:?}", cfg.violations());
            cfg.build_model().unwrap();
        }
        assert!(matches!(make_fixture("nope"), Err(Error::UnknownFixture(_))));
    }

    #[test]
    fn free_electron_has_no_potentials() {
        let m = make_fixture("free-electron").unwrap().build_model().unwrap();
        assert!(m.local_potential().iter().all(|v| *v == 0.0));
        assert!(!m.has_projectors());
    }

    #[test]
    fn generalized_overlap_is_coercive() {
        let m = make_fixture("generalized-overlap").unwrap().build_model().unwrap();
        assert!(m.spec.q.norm() > 0.0);
        for k in 0..m.n_kpoints() {
            let (vals, _) = crate::block_linalg::hermitian_eigen(&m.overlap_matrix(k));
            assert!(vals[0] > 0.1, "smallest overlap eigenvalue {}", vals[0]);
        }
    }

    #[test]
    fn fd_fixture_size() {
        let m = make_fixture("fd-small").unwrap().build_model().unwrap();
        assert_eq!(m.n_orbitals(), 3);
        let ng = m.bases[0].len();
        assert!((20..=45).contains(&ng), "{ng} plane waves");
    }
}
