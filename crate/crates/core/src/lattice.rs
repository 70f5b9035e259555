//! Cells, k-point sets, plane-wave bases and the shared FFT grid.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Real-space cell. Lattice vectors are stored as columns (bohr).
#[derive(Clone, Debug, PartialEq)]
pub struct UnitCell {
    pub lattice: Matrix3<f64>,
}

impl UnitCell {
    pub fn new(a1: [f64; 3], a2: [f64; 3], a3: [f64; 3]) -> Result<Self> {
        let lattice = Matrix3::from_columns(&[
            Vector3::from(a1),
            Vector3::from(a2),
            Vector3::from(a3),
        ]);
        if lattice.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidCell("non-finite lattice vector".into()));
        }
        let scale = lattice.column(0).norm() * lattice.column(1).norm() * lattice.column(2).norm();
        let det = lattice.determinant();
        if scale == 0.0 || det.abs() <= 1e-10 * scale {
            return Err(Error::InvalidCell(format!(
                "lattice vectors are (nearly) linearly dependent, det = {det:e}"
            )));
        }
        Ok(Self { lattice })
    }

    pub fn cubic(l: f64) -> Result<Self> {
        Self::new([l, 0.0, 0.0], [0.0, l, 0.0], [0.0, 0.0, l])
    }

    pub fn volume(&self) -> f64 {
        self.lattice.determinant().abs()
    }

    pub fn a(&self, i: usize) -> Vector3<f64> {
        self.lattice.column(i).into_owned()
    }

    pub fn reciprocal(&self) -> ReciprocalLattice {
        reciprocal(self)
    }

    /// Cartesian position of a point given in fractional coordinates.
    pub fn to_cartesian(&self, frac: &Vector3<f64>) -> Vector3<f64> {
        self.lattice * frac
    }
}

/// Reciprocal vectors b_i as columns, with a_i . b_j = 2 pi delta_ij.
#[derive(Clone, Debug, PartialEq)]
pub struct ReciprocalLattice {
    pub b: Matrix3<f64>,
    pub volume: f64,
    a: Matrix3<f64>,
}

impl ReciprocalLattice {
    pub fn b(&self, i: usize) -> Vector3<f64> {
        self.b.column(i).into_owned()
    }

    pub fn g_vector(&self, m: [i32; 3]) -> Vector3<f64> {
        self.b * Vector3::new(m[0] as f64, m[1] as f64, m[2] as f64)
    }

    pub fn k_cartesian(&self, k_frac: &[f64; 3]) -> Vector3<f64> {
        self.b * Vector3::from(*k_frac)
    }

    fn a_norm(&self, i: usize) -> f64 {
        self.a.column(i).norm()
    }
}

pub fn reciprocal(cell: &UnitCell) -> ReciprocalLattice {
    let inv = cell
        .lattice
        .try_inverse()
        .expect("UnitCell::new rejects singular lattices");
    ReciprocalLattice {
        b: inv.transpose() * (2.0 * PI),
        volume: cell.volume(),
        a: cell.lattice,
    }
}

/// Brillouin-zone sample in fractional coordinates of the reciprocal vectors.
/// Weights carry the spin factor and sum to 2.
#[derive(Clone, Debug, PartialEq)]
pub struct KpointSet {
    pub points: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
}

impl KpointSet {
    pub fn new(points: Vec<[f64; 3]>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidKpoints("no k-points".into()));
        }
        if points.len() != weights.len() {
            return Err(Error::InvalidKpoints(format!(
                "{} points but {} weights",
                points.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidKpoints("weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 2.0).abs() > 1e-12 {
            return Err(Error::InvalidKpoints(format!(
                "weights sum to {total}, expected 2"
            )));
        }
        Ok(Self { points, weights })
    }

    pub fn gamma() -> Self {
        Self { points: vec![[0.0; 3]], weights: vec![2.0] }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Plane waves e^{i G.r}/sqrt(|Omega|) with 1/2 |k+G|^2 <= e_cut, sorted by
/// kinetic energy and then by Miller index.
#[derive(Clone, Debug)]
pub struct PlanewaveBasis {
    pub k_frac: [f64; 3],
    pub k_cart: Vector3<f64>,
    pub e_cut: f64,
    pub millers: Vec<[i32; 3]>,
    /// Cartesian k+G.
    pub kpg: Vec<Vector3<f64>>,
    /// 1/2 |k+G|^2.
    pub kinetic: Vec<f64>,
    grid_dims: [usize; 3],
    grid_index: Vec<usize>,
}

impl PlanewaveBasis {
    pub fn len(&self) -> usize {
        self.millers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.millers.is_empty()
    }

    pub fn max_miller(&self) -> [i32; 3] {
        max_abs_miller(&self.millers)
    }

    pub fn grid_dims(&self) -> [usize; 3] {
        self.grid_dims
    }

    pub fn grid_index(&self) -> &[usize] {
        &self.grid_index
    }

    /// Position of a Miller index in the basis, if present.
    pub fn find(&self, m: [i32; 3]) -> Option<usize> {
        self.millers.iter().position(|x| *x == m)
    }

    fn attach_grid(&mut self, dims: [usize; 3]) {
        self.grid_dims = dims;
        self.grid_index = self.millers.iter().map(|m| flat_index(dims, *m)).collect();
    }
}

fn max_abs_miller(millers: &[[i32; 3]]) -> [i32; 3] {
    let mut out = [0; 3];
    for m in millers {
        for i in 0..3 {
            out[i] = out[i].max(m[i].abs());
        }
    }
    out
}

fn flat_index(dims: [usize; 3], m: [i32; 3]) -> usize {
    let w = |mi: i32, n: usize| mi.rem_euclid(n as i32) as usize;
    (w(m[0], dims[0]) * dims[1] + w(m[1], dims[1])) * dims[2] + w(m[2], dims[2])
}

/// Smallest n >= min whose only prime factors are 2, 3 and 5.
pub fn smooth_size(min: usize) -> usize {
    let mut n = min.max(1);
    loop {
        let mut r = n;
        for p in [2, 3, 5] {
            while r % p == 0 {
                r /= p;
            }
        }
        if r == 1 {
            return n;
        }
        n += 1;
    }
}

/// Grid large enough that products of two basis functions are represented
/// without aliasing: 4 max|m| + 1 points per axis, rounded up to a smooth size.
pub fn grid_dims_for(max_m: [i32; 3]) -> [usize; 3] {
    let mut d = [0; 3];
    for i in 0..3 {
        d[i] = smooth_size(4 * max_m[i] as usize + 1);
    }
    d
}

/// Enumerate the basis for one k-point, with its own grid.
pub fn build_basis(recip: &ReciprocalLattice, k_frac: [f64; 3], e_cut: f64) -> Result<PlanewaveBasis> {
    let mut basis = enumerate_basis(recip, k_frac, e_cut)?;
    let dims = grid_dims_for(basis.max_miller());
    basis.attach_grid(dims);
    Ok(basis)
}

/// Bases for every k-point sharing one grid sized by the largest |m| overall.
pub fn build_bases(
    recip: &ReciprocalLattice,
    kpoints: &KpointSet,
    e_cut: f64,
) -> Result<(Vec<PlanewaveBasis>, FftGrid)> {
    let mut bases = kpoints
        .points
        .iter()
        .map(|k| enumerate_basis(recip, *k, e_cut))
        .collect::<Result<Vec<_>>>()?;
    let mut max_m = [0; 3];
    for b in &bases {
        let m = b.max_miller();
        for i in 0..3 {
            max_m[i] = max_m[i].max(m[i]);
        }
    }
    let dims = grid_dims_for(max_m);
    for b in &mut bases {
        b.attach_grid(dims);
    }
    Ok((bases, FftGrid::new(dims, recip.volume)))
}

fn enumerate_basis(recip: &ReciprocalLattice, k_frac: [f64; 3], e_cut: f64) -> Result<PlanewaveBasis> {
    if !(e_cut.is_finite() && e_cut > 0.0) {
        return Err(Error::EmptyBasis { k: k_frac, e_cut });
    }
    let k_cart = recip.k_cartesian(&k_frac);
    let q_max = (2.0 * e_cut).sqrt();
    let limit = e_cut * (1.0 + 1e-12);
    // |(k+G).a_i| <= q_max |a_i| bounds each Miller index
    let mut bound = [0i32; 3];
    for i in 0..3 {
        bound[i] = (q_max * recip.a_norm(i) / (2.0 * PI) + k_frac[i].abs()).floor() as i32 + 1;
    }
    let mut entries = Vec::new();
    for m1 in -bound[0]..=bound[0] {
        for m2 in -bound[1]..=bound[1] {
            for m3 in -bound[2]..=bound[2] {
                let m = [m1, m2, m3];
                let q = k_cart + recip.g_vector(m);
                let kin = 0.5 * q.norm_squared();
                if kin <= limit {
                    entries.push((kin, m, q));
                }
            }
        }
    }
    if entries.is_empty() {
        return Err(Error::EmptyBasis { k: k_frac, e_cut });
    }
    entries.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(PlanewaveBasis {
        k_frac,
        k_cart,
        e_cut,
        millers: entries.iter().map(|e| e.1).collect(),
        kpg: entries.iter().map(|e| e.2).collect(),
        kinetic: entries.iter().map(|e| e.0).collect(),
        grid_dims: [0; 3],
        grid_index: Vec::new(),
    })
}

/// Uniform real-space grid with cached FFT plans. Flat index is
/// (j1 * n2 + j2) * n3 + j3.
#[derive(Clone)]
pub struct FftGrid {
    pub dims: [usize; 3],
    pub volume: f64,
    forward: [Arc<dyn Fft<f64>>; 3],
    inverse: [Arc<dyn Fft<f64>>; 3],
}

impl fmt::Debug for FftGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FftGrid")
            .field("dims", &self.dims)
            .field("volume", &self.volume)
            .finish()
    }
}

impl FftGrid {
    pub fn new(dims: [usize; 3], volume: f64) -> Self {
        let mut planner = FftPlanner::new();
        let forward = [0, 1, 2].map(|i| planner.plan_fft_forward(dims[i]));
        let inverse = [0, 1, 2].map(|i| planner.plan_fft_inverse(dims[i]));
        Self { dims, volume, forward, inverse }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Volume element |Omega| / N_grid.
    pub fn dv(&self) -> f64 {
        self.volume / self.len() as f64
    }

    /// Fractional coordinates of grid point (j1, j2, j3).
    pub fn point_frac(&self, idx: usize) -> Vector3<f64> {
        let [n1, n2, n3] = self.dims;
        let j3 = idx % n3;
        let j2 = (idx / n3) % n2;
        let j1 = idx / (n2 * n3);
        Vector3::new(j1 as f64 / n1 as f64, j2 as f64 / n2 as f64, j3 as f64 / n3 as f64)
    }

    /// Signed Miller index of the FFT frequency stored at flat index `idx`.
    pub fn frequency(&self, idx: usize) -> [i32; 3] {
        let [n1, n2, n3] = self.dims;
        let j3 = idx % n3;
        let j2 = (idx / n3) % n2;
        let j1 = idx / (n2 * n3);
        let s = |j: usize, n: usize| if j > n / 2 { j as i32 - n as i32 } else { j as i32 };
        [s(j1, n1), s(j2, n2), s(j3, n3)]
    }

    pub fn flat_index(&self, m: [i32; 3]) -> usize {
        flat_index(self.dims, m)
    }

    /// In-place unnormalized transform, sum_j x_j e^{-+ 2 pi i j k / n} along each axis.
    pub fn fft_in_place(&self, data: &mut [Complex64], inverse: bool) {
        assert_eq!(data.len(), self.len(), "grid field has wrong length");
        let plans = if inverse { &self.inverse } else { &self.forward };
        let [n1, n2, n3] = self.dims;
        plans[2].process(data);

        let mut line = vec![Complex64::new(0.0, 0.0); n2.max(n1)];
        for j1 in 0..n1 {
            for j3 in 0..n3 {
                let base = j1 * n2 * n3 + j3;
                for j2 in 0..n2 {
                    line[j2] = data[base + j2 * n3];
                }
                plans[1].process(&mut line[..n2]);
                for j2 in 0..n2 {
                    data[base + j2 * n3] = line[j2];
                }
            }
        }
        let stride = n2 * n3;
        for rest in 0..stride {
            for j1 in 0..n1 {
                line[j1] = data[rest + j1 * stride];
            }
            plans[0].process(&mut line[..n1]);
            for j1 in 0..n1 {
                data[rest + j1 * stride] = line[j1];
            }
        }
    }

    /// psi(r_j) = |Omega|^{-1/2} sum_G c_G e^{i G.r_j}
    pub fn to_realspace(&self, basis: &PlanewaveBasis, coeffs: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(basis.grid_dims, self.dims, "basis was built for another grid");
        assert_eq!(coeffs.len(), basis.len());
        let mut field = vec![Complex64::new(0.0, 0.0); self.len()];
        let scale = self.volume.sqrt().recip();
        for (c, &idx) in coeffs.iter().zip(&basis.grid_index) {
            field[idx] = c * scale;
        }
        self.fft_in_place(&mut field, true);
        field
    }

    /// Adjoint of `to_realspace` under the grid quadrature (and its inverse on
    /// band-limited fields).
    pub fn to_reciprocal(&self, basis: &PlanewaveBasis, field: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(basis.grid_dims, self.dims, "basis was built for another grid");
        let mut work = field.to_vec();
        self.fft_in_place(&mut work, false);
        let scale = self.volume.sqrt() / self.len() as f64;
        basis.grid_index.iter().map(|&idx| work[idx] * scale).collect()
    }

    /// Plain Fourier coefficients f_G of a real field, f(r) = sum_G f_G e^{iG.r}.
    pub fn fourier_coefficients(&self, field: &[f64]) -> Vec<Complex64> {
        let mut work: Vec<Complex64> = field.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.fft_in_place(&mut work, false);
        let inv = 1.0 / self.len() as f64;
        for w in &mut work {
            *w *= inv;
        }
        work
    }

    /// Inverse of `fourier_coefficients`; drops the imaginary residue.
    pub fn synthesize_real(&self, coeffs: &[Complex64]) -> Vec<f64> {
        let mut work = coeffs.to_vec();
        self.fft_in_place(&mut work, true);
        work.iter().map(|c| c.re).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force(recip: &ReciprocalLattice, k: [f64; 3], e_cut: f64) -> Vec<[i32; 3]> {
        let kc = recip.k_cartesian(&k);
        let mut out = Vec::new();
        for m1 in -12..=12 {
            for m2 in -12..=12 {
                for m3 in -12..=12 {
                    let q = kc + recip.g_vector([m1, m2, m3]);
                    if 0.5 * q.norm_squared() <= e_cut * (1.0 + 1e-12) {
                        out.push([m1, m2, m3]);
                    }
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn reciprocal_duality() {
        let cell = UnitCell::new([3.0, 0.2, 0.0], [0.5, 4.0, 0.1], [0.0, 0.3, 5.0]).unwrap();
        let r = cell.reciprocal();
        for i in 0..3 {
            for j in 0..3 {
                let d = cell.a(i).dot(&r.b(j));
                let want = if i == j { 2.0 * PI } else { 0.0 };
                assert!((d - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn singular_cell_rejected() {
        assert!(UnitCell::new([1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn cubic_gamma_cutoff_half_has_seven_waves() {
        let cell = UnitCell::cubic(2.0 * PI).unwrap();
        let b = build_basis(&cell.reciprocal(), [0.0; 3], 0.5).unwrap();
        assert_eq!(b.len(), 7);
        assert_eq!(b.millers[0], [0, 0, 0]);
        let mut rest: Vec<_> = b.millers[1..].to_vec();
        rest.sort();
        assert_eq!(
            rest,
            vec![[-1, 0, 0], [0, -1, 0], [0, 0, -1], [0, 0, 1], [0, 1, 0], [1, 0, 0]]
        );
    }

    #[test]
    fn shifted_k_changes_membership() {
        let cell = UnitCell::cubic(2.0 * PI).unwrap();
        let r = cell.reciprocal();
        let b = build_basis(&r, [0.5, 0.0, 0.0], 0.5).unwrap();
        // |k+G|^2 <= 1 keeps m = (0,0,0) and (-1,0,0) only
        let mut m = b.millers.clone();
        m.sort();
        assert_eq!(m, vec![[-1, 0, 0], [0, 0, 0]]);
    }

    #[test]
    fn matches_brute_force_on_skewed_cells() {
        let cell = UnitCell::new([4.0, 0.0, 0.0], [1.3, 3.5, 0.0], [0.4, -0.7, 4.5]).unwrap();
        let r = cell.reciprocal();
        for (k, ec) in [([0.0, 0.0, 0.0], 3.0), ([0.25, -0.1, 0.4], 2.2), ([0.5, 0.5, 0.5], 1.1)] {
            let b = build_basis(&r, k, ec).unwrap();
            let mut got = b.millers.clone();
            got.sort();
            assert_eq!(got, brute_force(&r, k, ec));
            for w in b.kinetic.windows(2) {
                assert!(w[0] <= w[1]);
            }
        }
    }

    #[test]
    fn grid_is_smooth_and_large_enough() {
        let cell = UnitCell::cubic(7.0).unwrap();
        let b = build_basis(&cell.reciprocal(), [0.1, 0.2, 0.3], 4.0).unwrap();
        let mm = b.max_miller();
        for i in 0..3 {
            let n = b.grid_dims()[i];
            assert!(n >= 2 * mm[i] as usize + 1);
            assert!(n >= 4 * mm[i] as usize + 1);
            assert_eq!(smooth_size(n), n);
        }
        assert_eq!(smooth_size(7), 8);
        assert_eq!(smooth_size(11), 12);
        assert_eq!(smooth_size(13), 15);
    }

    #[test]
    fn empty_basis_reported() {
        let cell = UnitCell::cubic(2.0 * PI).unwrap();
        let err = build_basis(&cell.reciprocal(), [0.5, 0.5, 0.5], 0.01).unwrap_err();
        assert!(matches!(err, Error::EmptyBasis { .. }));
    }

    #[test]
    fn kpoint_weights_validated() {
        assert!(KpointSet::new(vec![[0.0; 3]], vec![1.0]).is_err());
        assert!(KpointSet::new(vec![[0.0; 3], [0.5, 0.0, 0.0]], vec![1.0, 1.0]).is_ok());
    }

    #[test]
    fn transforms_round_trip_and_are_adjoint() {
        let cell = UnitCell::new([5.0, 0.0, 0.0], [0.0, 4.0, 0.0], [1.0, 0.0, 4.5]).unwrap();
        let recip = cell.reciprocal();
        let kp = KpointSet::new(vec![[0.1, 0.0, 0.2], [0.0; 3]], vec![1.5, 0.5]).unwrap();
        let (bases, grid) = build_bases(&recip, &kp, 3.0).unwrap();
        let b = &bases[0];
        let c: Vec<Complex64> = (0..b.len())
            .map(|i| Complex64::new((i as f64 * 0.37).sin(), (i as f64 * 1.3).cos()))
            .collect();
        let f = grid.to_realspace(b, &c);
        let back = grid.to_reciprocal(b, &f);
        for (x, y) in c.iter().zip(&back) {
            assert!((x - y).norm() < 1e-12);
        }
        // <c, R* f> = dV sum conj(R c) f
        let g: Vec<Complex64> = (0..grid.len())
            .map(|j| Complex64::new((j as f64 * 0.11).cos(), (j as f64 * 0.07).sin()))
            .collect();
        let lhs: Complex64 = c.iter().zip(grid.to_reciprocal(b, &g)).map(|(a, b)| a.conj() * b).sum();
        let rhs: Complex64 = f.iter().zip(&g).map(|(a, b)| a.conj() * b).sum::<Complex64>() * grid.dv();
        assert!((lhs - rhs).norm() < 1e-10 * lhs.norm().max(1.0));
        // normalization: a single plane wave has unit L2 norm
        let mut e = vec![Complex64::new(0.0, 0.0); b.len()];
        e[3] = Complex64::new(1.0, 0.0);
        let fe = grid.to_realspace(b, &e);
        let n2: f64 = fe.iter().map(|z| z.norm_sqr()).sum::<f64>() * grid.dv();
        assert!((n2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fourier_coefficients_invert() {
        let grid = FftGrid::new([6, 5, 4], 10.0);
        let f: Vec<f64> = (0..grid.len()).map(|j| (j as f64 * 0.3).sin()).collect();
        let c = grid.fourier_coefficients(&f);
        let back = grid.synthesize_real(&c);
        for (a, b) in f.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(grid.frequency(grid.flat_index([-1, 2, -2])), [-1, 2, 2]);
        assert_eq!(grid.frequency(grid.flat_index([-2, 2, 1])), [-2, 2, 1]);
    }
}
