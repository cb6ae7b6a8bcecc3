//! Spectral solvers for the three difference equations on the torus:
//!
//! * tangential: `mu + f(theta + 2 pi alpha) - f(theta) = g`
//! * weighted:   `a f(theta + 2 pi alpha) - b f(theta) = g`
//! * normal:     `f(theta + 2 pi alpha) - A f(theta) = g` (vector valued)
//! * reducibility: `F(theta + 2 pi alpha) A - A F(theta) = G` (matrix valued)
//!
//! Each mode divides by its divisor; modes whose divisor falls below the
//! resonance tolerance are reported as errors, except the structurally
//! unsolvable averages which are returned as counter-terms (the kernel of
//! `A - I` for the normal equation, the diagonal of the commutant for the
//! reducibility equation).

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fourier::{FourierSeries, ValueShape};

/// Rotation vector, normal matrix, and its cached eigendecomposition.
#[derive(Clone, Debug)]
pub struct SpectralData {
    alpha: Vec<f64>,
    a: DMatrix<f64>,
    eigenvalues: Vec<Complex64>,
    /// Columns are eigenvectors: `A = S diag(a_j) S^{-1}`.
    s_mat: DMatrix<Complex64>,
    s_inv: DMatrix<Complex64>,
    resonance_tolerance: f64,
    unit_tolerance: f64,
    simple: bool,
    real_spectrum: bool,
    unit_eigen: Vec<bool>,
}

pub const DEFAULT_RESONANCE_TOLERANCE: f64 = 1e-10;
pub const DEFAULT_UNIT_TOLERANCE: f64 = 1e-8;

impl SpectralData {
    pub fn new(alpha: Vec<f64>, a: DMatrix<f64>) -> Result<Self> {
        Self::with_tolerances(alpha, a, DEFAULT_RESONANCE_TOLERANCE, DEFAULT_UNIT_TOLERANCE)
    }

    pub fn with_tolerances(
        alpha: Vec<f64>,
        a: DMatrix<f64>,
        resonance_tolerance: f64,
        unit_tolerance: f64,
    ) -> Result<Self> {
        assert!(resonance_tolerance > 0.0 && unit_tolerance > 0.0);
        let m = a.nrows();
        if a.ncols() != m || m == 0 {
            return Err(Error::DimensionMismatch {
                context: "normal matrix",
                expected: m,
                got: a.ncols(),
            });
        }
        let scale = a.norm().max(1.0);
        let eigenvalues: Vec<Complex64> = a.complex_eigenvalues().iter().copied().collect();
        for ev in &eigenvalues {
            if ev.norm() <= resonance_tolerance * scale {
                return Err(Error::Eigendecomposition(format!(
                    "eigenvalue {ev} is numerically zero"
                )));
            }
        }
        let mut simple = true;
        for i in 0..m {
            for j in i + 1..m {
                if (eigenvalues[i] - eigenvalues[j]).norm() <= 1e-9 * scale {
                    simple = false;
                }
            }
        }
        let real_spectrum = eigenvalues.iter().all(|ev| ev.im.abs() <= 1e-12 * scale);
        let ac: DMatrix<Complex64> = a.map(|x| Complex64::new(x, 0.0));
        let s_mat = eigenvector_matrix(&ac, &eigenvalues, scale)?;
        let s_inv = s_mat
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Eigendecomposition("eigenvector matrix is singular".into()))?;
        // reconstruction check
        let mut d = DMatrix::<Complex64>::zeros(m, m);
        for j in 0..m {
            d[(j, j)] = eigenvalues[j];
        }
        let recon = &s_mat * d * &s_inv;
        let err = (&recon - &ac).norm();
        if err > 1e-12 * scale {
            return Err(Error::Eigendecomposition(format!(
                "reconstruction error {err:.3e} exceeds 1e-12 * |A|"
            )));
        }
        let unit_eigen = eigenvalues
            .iter()
            .map(|ev| (ev - Complex64::new(1.0, 0.0)).norm() <= unit_tolerance)
            .collect();
        Ok(SpectralData {
            alpha,
            a,
            eigenvalues,
            s_mat,
            s_inv,
            resonance_tolerance,
            unit_tolerance,
            simple,
            real_spectrum,
            unit_eigen,
        })
    }

    pub fn n(&self) -> usize {
        self.alpha.len()
    }

    pub fn m(&self) -> usize {
        self.a.nrows()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    /// The step of the rotation, `2 pi alpha`.
    pub fn rotation_step(&self) -> Vec<f64> {
        self.alpha
            .iter()
            .map(|a| 2.0 * std::f64::consts::PI * a)
            .collect()
    }

    pub fn normal_matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn eigenvalues(&self) -> &[Complex64] {
        &self.eigenvalues
    }

    pub fn transition(&self) -> &DMatrix<Complex64> {
        &self.s_mat
    }

    pub fn transition_inverse(&self) -> &DMatrix<Complex64> {
        &self.s_inv
    }

    pub fn resonance_tolerance(&self) -> f64 {
        self.resonance_tolerance
    }

    pub fn unit_tolerance(&self) -> f64 {
        self.unit_tolerance
    }

    pub fn is_simple(&self) -> bool {
        self.simple
    }

    pub fn is_real_spectrum(&self) -> bool {
        self.real_spectrum
    }

    pub fn unit_eigen(&self) -> &[bool] {
        &self.unit_eigen
    }

    pub fn unit_count(&self) -> usize {
        self.unit_eigen.iter().filter(|&&u| u).count()
    }

    /// `e^{i 2 pi k . alpha}` for an integer mode vector.
    pub fn rotation_multiplier(&self, k: &[i64]) -> Complex64 {
        let dot: f64 = k
            .iter()
            .zip(&self.alpha)
            .map(|(&kj, &aj)| kj as f64 * aj)
            .sum();
        Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * dot)
    }

    /// Same tolerances, different normal matrix.
    pub fn with_normal_matrix(&self, a: DMatrix<f64>) -> Result<SpectralData> {
        SpectralData::with_tolerances(
            self.alpha.clone(),
            a,
            self.resonance_tolerance,
            self.unit_tolerance,
        )
    }
}

/// Eigenvector matrix via nullspace extraction: eigenvalues are grouped by
/// numerical coincidence and each group gets the right singular vectors of
/// `A - lambda I` belonging to its smallest singular values, so genuinely
/// diagonalizable matrices with repeated eigenvalues still decompose (Jordan
/// blocks are caught later by the reconstruction check).
fn eigenvector_matrix(
    ac: &DMatrix<Complex64>,
    eigenvalues: &[Complex64],
    scale: f64,
) -> Result<DMatrix<Complex64>> {
    let m = ac.nrows();
    let mut s_mat = DMatrix::<Complex64>::zeros(m, m);
    let mut assigned = vec![false; m];
    for j in 0..m {
        if assigned[j] {
            continue;
        }
        let group: Vec<usize> = (0..m)
            .filter(|&l| !assigned[l] && (eigenvalues[l] - eigenvalues[j]).norm() <= 1e-9 * scale)
            .collect();
        let mut mean = Complex64::new(0.0, 0.0);
        for &l in &group {
            mean += eigenvalues[l];
        }
        mean /= group.len() as f64;
        let mut shifted = ac.clone();
        for i in 0..m {
            shifted[(i, i)] -= mean;
        }
        let svd = shifted.svd(false, true);
        let v_t = svd
            .v_t
            .ok_or_else(|| Error::Eigendecomposition("SVD failed".into()))?;
        // indices of the group.len() smallest singular values
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| {
            svd.singular_values[a]
                .partial_cmp(&svd.singular_values[b])
                .unwrap()
        });
        for (slot, &l) in group.iter().enumerate() {
            let row = order[slot];
            let mut v = DVector::<Complex64>::from_fn(m, |i, _| v_t[(row, i)].conj());
            // rotate the phase so the largest entry is real and positive
            let mut big = 0usize;
            for i in 0..m {
                if v[i].norm() > v[big].norm() {
                    big = i;
                }
            }
            let phase = v[big] / Complex64::new(v[big].norm(), 0.0);
            v /= phase;
            if eigenvalues[l].im.abs() <= 1e-12 * scale {
                for x in v.iter_mut() {
                    *x = Complex64::new(x.re, 0.0);
                }
                let norm = v.norm();
                v /= Complex64::new(norm, 0.0);
            }
            s_mat.set_column(l, &v);
            assigned[l] = true;
        }
    }
    Ok(s_mat)
}

/// `mu + f(theta + 2 pi alpha) - f(theta) = g`, solved componentwise; `f` has
/// zero average and `mu` is the average of `g`.
pub fn solve_tangential(
    g: &FourierSeries,
    sd: &SpectralData,
) -> Result<(FourierSeries, Vec<Complex64>)> {
    let modes = g.modes();
    let mut f = g.clone();
    let mut k = vec![0i64; g.dim()];
    let zero_idx = modes.index_of(&vec![0; g.dim()]).unwrap();
    let mut mu = vec![Complex64::new(0.0, 0.0); g.shape().len()];
    let ncomp = g.shape().len();
    for (idx, _) in modes.iter() {
        modes.mode_at(idx, &mut k);
        if idx == zero_idx {
            for c in 0..ncomp {
                mu[c] = g.coeff(&k, c);
                f.set_coeff(&k, c, Complex64::new(0.0, 0.0));
            }
            continue;
        }
        let div = sd.rotation_multiplier(&k) - Complex64::new(1.0, 0.0);
        if div.norm() <= sd.resonance_tolerance {
            return Err(Error::ResonantMode {
                mode: k.clone(),
                magnitude: div.norm(),
                tolerance: sd.resonance_tolerance,
            });
        }
        for c in 0..ncomp {
            let v = g.coeff(&k, c) / div;
            f.set_coeff(&k, c, v);
        }
    }
    if g.reality() {
        f.symmetrize();
    }
    Ok((f, mu))
}

/// `a f(theta + 2 pi alpha) - b f(theta) = g`, componentwise; every divisor
/// (including `k = 0`) must clear the resonance tolerance.
pub fn solve_weighted(
    a: Complex64,
    b: Complex64,
    g: &FourierSeries,
    sd: &SpectralData,
) -> Result<FourierSeries> {
    let modes = g.modes();
    let mut f = g.clone();
    let mut k = vec![0i64; g.dim()];
    let ncomp = g.shape().len();
    for (idx, _) in modes.iter() {
        modes.mode_at(idx, &mut k);
        let div = a * sd.rotation_multiplier(&k) - b;
        if div.norm() <= sd.resonance_tolerance {
            return Err(Error::ResonantMode {
                mode: k.clone(),
                magnitude: div.norm(),
                tolerance: sd.resonance_tolerance,
            });
        }
        for c in 0..ncomp {
            let v = g.coeff(&k, c) / div;
            f.set_coeff(&k, c, v);
        }
    }
    if g.reality() && a.im == 0.0 && b.im == 0.0 {
        f.symmetrize();
    }
    Ok(f)
}

/// `f(theta + 2 pi alpha) - A f(theta) = g - b_bar`, with `b_bar` the
/// unremovable average in `ker(A - I)` (zero when no eigenvalue is 1).
pub fn solve_normal(g: &FourierSeries, sd: &SpectralData) -> Result<(FourierSeries, Vec<f64>)> {
    let m = sd.m();
    if g.shape() != ValueShape::Vector(m) {
        return Err(Error::ShapeMismatch {
            left: format!("vector({m})"),
            right: format!("{:?}", g.shape()),
        });
    }
    let s_inv: Vec<Complex64> = mat_to_vec(sd.transition_inverse());
    let s_mat: Vec<Complex64> = mat_to_vec(sd.transition());
    let gt = g.left_mul_matrix(&s_inv, m);
    let modes = gt.modes();
    let mut ft = gt.clone();
    let mut k = vec![0i64; g.dim()];
    let zero_idx = modes.index_of(&vec![0; g.dim()]).unwrap();
    let mut b_eig = vec![Complex64::new(0.0, 0.0); m];
    for (idx, _) in modes.iter() {
        modes.mode_at(idx, &mut k);
        let rot = sd.rotation_multiplier(&k);
        for j in 0..m {
            let aj = sd.eigenvalues()[j];
            if idx == zero_idx && sd.unit_eigen()[j] {
                b_eig[j] = gt.coeff(&k, j);
                ft.set_coeff(&k, j, Complex64::new(0.0, 0.0));
                continue;
            }
            let div = rot - aj;
            if div.norm() <= sd.resonance_tolerance {
                return Err(Error::ResonantMode {
                    mode: k.clone(),
                    magnitude: div.norm(),
                    tolerance: sd.resonance_tolerance,
                });
            }
            let v = gt.coeff(&k, j) / div;
            ft.set_coeff(&k, j, v);
        }
    }
    let mut f = ft.left_mul_matrix(&s_mat, m);
    if g.reality() {
        f.symmetrize();
    }
    // b_bar back in the original basis; real for real data
    let mut b_bar = vec![0.0; m];
    for i in 0..m {
        let mut acc = Complex64::new(0.0, 0.0);
        for j in 0..m {
            acc += sd.transition()[(i, j)] * b_eig[j];
        }
        b_bar[i] = acc.re;
    }
    Ok((f, b_bar))
}

/// `F(theta + 2 pi alpha) A - A F(theta) = G - B_bar`, with `B_bar` in the
/// commutant of `A` (diagonal in the eigenbasis); the diagonal entries of the
/// eigenbasis solution have exactly zero average.
pub fn solve_reducibility(
    g: &FourierSeries,
    sd: &SpectralData,
) -> Result<(FourierSeries, Vec<f64>)> {
    let m = sd.m();
    if g.shape() != ValueShape::Matrix(m, m) {
        return Err(Error::ShapeMismatch {
            left: format!("matrix({m}x{m})"),
            right: format!("{:?}", g.shape()),
        });
    }
    if !sd.is_simple() {
        return Err(Error::RepeatedEigenvalues);
    }
    let s_inv: Vec<Complex64> = mat_to_vec(sd.transition_inverse());
    let s_mat: Vec<Complex64> = mat_to_vec(sd.transition());
    // conjugate into the eigenbasis: S^{-1} G S
    let gt = g.left_mul_matrix(&s_inv, m).right_mul_matrix(&s_mat, m);
    let modes = gt.modes();
    let mut ft = gt.clone();
    let mut k = vec![0i64; g.dim()];
    let zero_idx = modes.index_of(&vec![0; g.dim()]).unwrap();
    let mut b_eig = vec![Complex64::new(0.0, 0.0); m];
    for (idx, _) in modes.iter() {
        modes.mode_at(idx, &mut k);
        let rot = sd.rotation_multiplier(&k);
        for i in 0..m {
            for j in 0..m {
                let comp = i * m + j;
                let (ai, aj) = (sd.eigenvalues()[i], sd.eigenvalues()[j]);
                if i == j {
                    if idx == zero_idx {
                        b_eig[j] = gt.coeff(&k, comp);
                        ft.set_coeff(&k, comp, Complex64::new(0.0, 0.0));
                        continue;
                    }
                    let div = aj * (rot - Complex64::new(1.0, 0.0));
                    if div.norm() <= sd.resonance_tolerance {
                        return Err(Error::ResonantMode {
                            mode: k.clone(),
                            magnitude: div.norm(),
                            tolerance: sd.resonance_tolerance,
                        });
                    }
                    let v = gt.coeff(&k, comp) / div;
                    ft.set_coeff(&k, comp, v);
                } else {
                    let div = aj * rot - ai;
                    if div.norm() <= sd.resonance_tolerance {
                        return Err(Error::ResonantMode {
                            mode: k.clone(),
                            magnitude: div.norm(),
                            tolerance: sd.resonance_tolerance,
                        });
                    }
                    let v = gt.coeff(&k, comp) / div;
                    ft.set_coeff(&k, comp, v);
                }
            }
        }
    }
    let mut f = ft.left_mul_matrix(&s_mat, m).right_mul_matrix(&s_inv, m);
    if g.reality() {
        f.symmetrize();
    }
    // B_bar = S diag(b_eig) S^{-1}
    let mut b_bar = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            let mut acc = Complex64::new(0.0, 0.0);
            for l in 0..m {
                acc += sd.transition()[(i, l)] * b_eig[l] * sd.transition_inverse()[(l, j)];
            }
            b_bar[i * m + j] = acc.re;
        }
    }
    Ok((f, b_bar))
}

pub(crate) fn mat_to_vec(m: &DMatrix<Complex64>) -> Vec<Complex64> {
    let (r, c) = (m.nrows(), m.ncols());
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(m[(i, j)]);
        }
    }
    out
}
