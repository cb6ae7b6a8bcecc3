//! Truncated Fourier series on the n-torus with analyticity-weighted norms.
//!
//! A [`FourierSeries`] stores the modes `k` with `|k|_inf <= K` of a scalar-,
//! vector- or matrix-valued function of `theta in T^n`; truncation is part of
//! the value. The weight in [`FourierSeries::weighted_norm`] uses the l1 size
//! `|k| = |k_1| + ... + |k_n|` while the index truncation is an l-infinity
//! box. Reality (`f_{-k} = conj(f_k)`) is enforced by explicit symmetrization
//! after every grid transform so FFT rounding cannot break the symmetry.

use num_complex::Complex64;
use serde::de::Error as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft;

/// Shape of the values a series takes: scalars, column vectors or matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValueShape {
    Scalar,
    Vector(usize),
    Matrix(usize, usize),
}

impl ValueShape {
    pub fn rows(&self) -> usize {
        match *self {
            ValueShape::Scalar => 1,
            ValueShape::Vector(m) => m,
            ValueShape::Matrix(r, _) => r,
        }
    }

    pub fn cols(&self) -> usize {
        match *self {
            ValueShape::Scalar | ValueShape::Vector(_) => 1,
            ValueShape::Matrix(_, c) => c,
        }
    }

    pub fn len(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn describe(&self) -> String {
        match *self {
            ValueShape::Scalar => "scalar".into(),
            ValueShape::Vector(m) => format!("vector({m})"),
            ValueShape::Matrix(r, c) => format!("matrix({r}x{c})"),
        }
    }
}

/// Dense enumeration of the mode box `k in [-K, K]^n`, lexicographic with the
/// first axis slowest.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModeBox {
    pub dim: usize,
    pub cutoff: usize,
}

impl ModeBox {
    pub fn new(dim: usize, cutoff: usize) -> Self {
        assert!(dim >= 1, "mode box needs dim >= 1");
        assert!(cutoff >= 1, "mode box needs cutoff >= 1");
        ModeBox { dim, cutoff }
    }

    pub fn side(&self) -> usize {
        2 * self.cutoff + 1
    }

    pub fn len(&self) -> usize {
        self.side().pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Linear index of a mode vector; `None` if outside the box.
    pub fn index_of(&self, k: &[i64]) -> Option<usize> {
        debug_assert_eq!(k.len(), self.dim);
        let side = self.side() as i64;
        let cut = self.cutoff as i64;
        let mut idx: i64 = 0;
        for &kj in k {
            if kj.abs() > cut {
                return None;
            }
            idx = idx * side + (kj + cut);
        }
        Some(idx as usize)
    }

    /// Mode vector of a linear index.
    pub fn mode_at(&self, mut idx: usize, out: &mut [i64]) {
        let side = self.side();
        let cut = self.cutoff as i64;
        for j in (0..self.dim).rev() {
            out[j] = (idx % side) as i64 - cut;
            idx /= side;
        }
    }

    pub fn iter(&self) -> ModeIter {
        ModeIter {
            boxed: *self,
            next: 0,
            scratch: vec![0; self.dim],
        }
    }

    /// Index of the mode `-k` given the index of `k`.
    pub fn conjugate_index(&self, idx: usize) -> usize {
        self.len() - 1 - idx
    }
}

pub struct ModeIter {
    boxed: ModeBox,
    next: usize,
    scratch: Vec<i64>,
}

impl Iterator for ModeIter {
    type Item = (usize, Vec<i64>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.boxed.len() {
            return None;
        }
        let idx = self.next;
        self.boxed.mode_at(idx, &mut self.scratch);
        self.next += 1;
        Some((idx, self.scratch.clone()))
    }
}

/// Values of a (possibly vector/matrix valued) function on the regular
/// `size^n` grid `theta_g = 2*pi*g/size`. Layout is point-major, then the
/// value entries in row-major order.
#[derive(Clone, Debug)]
pub struct GridData {
    pub dim: usize,
    pub size: usize,
    pub shape: ValueShape,
    pub values: Vec<Complex64>,
}

impl GridData {
    pub fn zeros(dim: usize, size: usize, shape: ValueShape) -> Self {
        let npts = size.pow(dim as u32);
        GridData {
            dim,
            size,
            shape,
            values: vec![Complex64::new(0.0, 0.0); npts * shape.len()],
        }
    }

    pub fn points(&self) -> usize {
        self.size.pow(self.dim as u32)
    }

    pub fn entry(&self, point: usize, row: usize, col: usize) -> Complex64 {
        self.values[(point * self.shape.len()) + row * self.shape.cols() + col]
    }

    pub fn entry_mut(&mut self, point: usize, row: usize, col: usize) -> &mut Complex64 {
        let cols = self.shape.cols();
        let len = self.shape.len();
        &mut self.values[point * len + row * cols + col]
    }

    pub fn point_slice(&self, point: usize) -> &[Complex64] {
        let len = self.shape.len();
        &self.values[point * len..(point + 1) * len]
    }

    pub fn point_slice_mut(&mut self, point: usize) -> &mut [Complex64] {
        let len = self.shape.len();
        &mut self.values[point * len..(point + 1) * len]
    }

    /// Grid angles of a point index (row-major over axes).
    pub fn theta_of(&self, mut point: usize, out: &mut [f64]) {
        let step = 2.0 * std::f64::consts::PI / self.size as f64;
        for j in (0..self.dim).rev() {
            out[j] = (point % self.size) as f64 * step;
            point /= self.size;
        }
    }

    /// Pointwise matrix product `self * rhs`.
    pub fn matmul(&self, rhs: &GridData) -> Result<GridData> {
        if self.shape.cols() != rhs.shape.rows() || self.size != rhs.size {
            return Err(Error::ShapeMismatch {
                left: self.shape.describe_with_grid(self.size),
                right: rhs.shape.describe_with_grid(rhs.size),
            });
        }
        let (r, k, c) = (self.shape.rows(), self.shape.cols(), rhs.shape.cols());
        let shape = product_shape(self.shape, rhs.shape, r, c);
        let mut out = GridData::zeros(self.dim, self.size, shape);
        for p in 0..self.points() {
            for i in 0..r {
                for j in 0..c {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for l in 0..k {
                        acc += self.entry(p, i, l) * rhs.entry(p, l, j);
                    }
                    *out.entry_mut(p, i, j) = acc;
                }
            }
        }
        Ok(out)
    }

    /// Pointwise inverse of a square-matrix-valued grid. Returns the minimum
    /// absolute determinant encountered.
    pub fn inverse(&self) -> Result<(GridData, f64)> {
        let m = self.shape.rows();
        if self.shape.cols() != m {
            return Err(Error::ShapeMismatch {
                left: self.shape.describe(),
                right: "square matrix".into(),
            });
        }
        let mut out = GridData::zeros(self.dim, self.size, self.shape);
        let mut min_det = f64::INFINITY;
        let mut work = vec![Complex64::new(0.0, 0.0); m * m];
        for p in 0..self.points() {
            work.copy_from_slice(self.point_slice(p));
            let (inv, det) = invert_small(&mut work, m)?;
            min_det = min_det.min(det);
            out.point_slice_mut(p).copy_from_slice(&inv);
        }
        Ok((out, min_det))
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}

impl ValueShape {
    fn describe_with_grid(&self, size: usize) -> String {
        format!("{} on {size}-grid", self.describe())
    }
}

/// Result shape of a product, dispatching on the operand kinds so that
/// `Vector(1)` and `Matrix(1,1)` keep their identities through dimension-one
/// cases.
pub(crate) fn product_shape(
    left: ValueShape,
    right: ValueShape,
    rows: usize,
    cols: usize,
) -> ValueShape {
    use ValueShape::*;
    match (left, right) {
        (Scalar, Scalar) => Scalar,
        (_, Vector(_)) | (Vector(_), Scalar) => Vector(rows),
        _ => Matrix(rows, cols),
    }
}

/// Gauss elimination with partial pivoting for the tiny matrices that appear
/// pointwise on grids.
fn invert_small(a: &mut [Complex64], m: usize) -> Result<(Vec<Complex64>, f64)> {
    let mut inv = vec![Complex64::new(0.0, 0.0); m * m];
    for i in 0..m {
        inv[i * m + i] = Complex64::new(1.0, 0.0);
    }
    let mut det = Complex64::new(1.0, 0.0);
    for col in 0..m {
        let mut pivot = col;
        for row in col + 1..m {
            if a[row * m + col].norm_sqr() > a[pivot * m + col].norm_sqr() {
                pivot = row;
            }
        }
        if a[pivot * m + col].norm() == 0.0 {
            return Err(Error::SingularMatrix {
                context: "pointwise matrix inverse".into(),
                magnitude: 0.0,
            });
        }
        if pivot != col {
            for j in 0..m {
                a.swap(col * m + j, pivot * m + j);
                inv.swap(col * m + j, pivot * m + j);
            }
            det = -det;
        }
        let p = a[col * m + col];
        det *= p;
        let pinv = p.inv();
        for j in 0..m {
            a[col * m + j] *= pinv;
            inv[col * m + j] *= pinv;
        }
        for row in 0..m {
            if row == col {
                continue;
            }
            let f = a[row * m + col];
            if f.norm() == 0.0 {
                continue;
            }
            for j in 0..m {
                let s = a[col * m + j];
                let t = inv[col * m + j];
                a[row * m + j] -= f * s;
                inv[row * m + j] -= f * t;
            }
        }
    }
    Ok((inv, det.norm()))
}

/// Truncated Fourier expansion on `T^n`, immutable after construction.
#[derive(Clone, Debug)]
pub struct FourierSeries {
    dim: usize,
    cutoff: usize,
    shape: ValueShape,
    reality: bool,
    /// Component-major storage: `coeffs[c][mode_index]` with `c` running over
    /// the row-major value entries.
    coeffs: Vec<Vec<Complex64>>,
}

impl FourierSeries {
    pub fn zeros(dim: usize, cutoff: usize, shape: ValueShape) -> Self {
        let modes = ModeBox::new(dim, cutoff).len();
        FourierSeries {
            dim,
            cutoff,
            shape,
            reality: true,
            coeffs: vec![vec![Complex64::new(0.0, 0.0); modes]; shape.len()],
        }
    }

    /// Constant series with the given value entries (row-major).
    pub fn constant(dim: usize, cutoff: usize, shape: ValueShape, value: &[f64]) -> Self {
        assert_eq!(value.len(), shape.len());
        let mut s = Self::zeros(dim, cutoff, shape);
        let zero = ModeBox::new(dim, cutoff).index_of(&vec![0; dim]).unwrap();
        for (c, &v) in value.iter().enumerate() {
            s.coeffs[c][zero] = Complex64::new(v, 0.0);
        }
        s
    }

    /// Identity-matrix constant series.
    pub fn identity_matrix(dim: usize, cutoff: usize, m: usize) -> Self {
        let mut v = vec![0.0; m * m];
        for i in 0..m {
            v[i * m + i] = 1.0;
        }
        Self::constant(dim, cutoff, ValueShape::Matrix(m, m), &v)
    }

    /// Build a series from an explicit list of `(mode, component, value)`
    /// entries, then symmetrize. Entries outside the box are rejected.
    pub fn from_modes(
        dim: usize,
        cutoff: usize,
        shape: ValueShape,
        entries: &[(Vec<i64>, usize, Complex64)],
    ) -> Result<Self> {
        let mut s = Self::zeros(dim, cutoff, shape);
        let modes = s.modes();
        for (k, comp, v) in entries {
            let idx = modes.index_of(k).ok_or_else(|| Error::Config(format!(
                "mode {k:?} outside cutoff {cutoff}"
            )))?;
            s.coeffs[*comp][idx] += *v;
        }
        s.reality = s.is_conjugate_symmetric(1e-13);
        if s.reality {
            s.symmetrize();
        }
        Ok(s)
    }

    /// Real trigonometric construction: adds `c*cos(k.theta) + d*sin(k.theta)`
    /// to component `comp`.
    pub fn add_trig(&mut self, k: &[i64], comp: usize, cos_amp: f64, sin_amp: f64) -> Result<()> {
        let modes = self.modes();
        let idx = modes
            .index_of(k)
            .ok_or_else(|| Error::Config(format!("mode {k:?} outside cutoff {}", self.cutoff)))?;
        let minus: Vec<i64> = k.iter().map(|x| -x).collect();
        let jdx = modes.index_of(&minus).unwrap();
        let half = Complex64::new(0.5 * cos_amp, -0.5 * sin_amp);
        self.coeffs[comp][idx] += half;
        if jdx != idx {
            self.coeffs[comp][jdx] += half.conj();
        } else {
            // k = 0: cos term only, sine of zero vanishes
            self.coeffs[comp][idx] += Complex64::new(0.5 * cos_amp, 0.5 * sin_amp);
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    pub fn shape(&self) -> ValueShape {
        self.shape
    }

    pub fn reality(&self) -> bool {
        self.reality
    }

    pub fn modes(&self) -> ModeBox {
        ModeBox::new(self.dim, self.cutoff)
    }

    pub fn coeff(&self, k: &[i64], comp: usize) -> Complex64 {
        match self.modes().index_of(k) {
            Some(idx) => self.coeffs[comp][idx],
            None => Complex64::new(0.0, 0.0),
        }
    }

    pub fn component_coeffs(&self, comp: usize) -> &[Complex64] {
        &self.coeffs[comp]
    }

    pub fn set_coeff(&mut self, k: &[i64], comp: usize, v: Complex64) {
        let idx = self.modes().index_of(k).expect("mode outside cutoff");
        self.coeffs[comp][idx] = v;
    }

    /// Largest coefficient magnitude over all components.
    pub fn max_coeff(&self) -> f64 {
        self.coeffs
            .iter()
            .flat_map(|c| c.iter())
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    /// Discrete Fourier coefficients of samples on the regular `size^n` grid.
    ///
    /// Requires `size >= 2K + 2` per axis so every retained mode is alias-free.
    pub fn from_grid(grid: &GridData, cutoff: usize, reality: bool) -> Result<Self> {
        let required = 2 * cutoff + 2;
        if grid.size < required {
            return Err(Error::GridTooSmall {
                cutoff,
                required,
                got: grid.size,
            });
        }
        let dim = grid.dim;
        let ncomp = grid.shape.len();
        let npts = grid.points();
        let modes = ModeBox::new(dim, cutoff);
        let mut s = FourierSeries {
            dim,
            cutoff,
            shape: grid.shape,
            reality,
            coeffs: vec![vec![Complex64::new(0.0, 0.0); modes.len()]; ncomp],
        };
        let mut buf = vec![Complex64::new(0.0, 0.0); npts];
        let scale = 1.0 / npts as f64;
        let mut k = vec![0i64; dim];
        for c in 0..ncomp {
            for p in 0..npts {
                buf[p] = grid.values[p * ncomp + c];
            }
            fft::forward_nd(&mut buf, dim, grid.size);
            for (idx, _) in modes.iter() {
                modes.mode_at(idx, &mut k);
                let mut bin = 0usize;
                for &kj in &k {
                    let b = kj.rem_euclid(grid.size as i64) as usize;
                    bin = bin * grid.size + b;
                }
                s.coeffs[c][idx] = buf[bin] * scale;
            }
        }
        if reality {
            s.symmetrize();
        }
        Ok(s)
    }

    /// Sample the series on the regular `size^n` grid (inverse transform).
    pub fn to_grid(&self, size: usize) -> Result<GridData> {
        let required = 2 * self.cutoff + 2;
        if size < required {
            return Err(Error::GridTooSmall {
                cutoff: self.cutoff,
                required,
                got: size,
            });
        }
        let ncomp = self.shape.len();
        let mut grid = GridData::zeros(self.dim, size, self.shape);
        let npts = grid.points();
        let modes = self.modes();
        let mut buf = vec![Complex64::new(0.0, 0.0); npts];
        let mut k = vec![0i64; self.dim];
        for c in 0..ncomp {
            buf.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
            for (idx, _) in modes.iter() {
                modes.mode_at(idx, &mut k);
                let mut bin = 0usize;
                for &kj in &k {
                    let b = kj.rem_euclid(size as i64) as usize;
                    bin = bin * size + b;
                }
                buf[bin] = self.coeffs[c][idx];
            }
            fft::inverse_nd(&mut buf, self.dim, size);
            for p in 0..npts {
                grid.values[p * ncomp + c] = buf[p];
            }
        }
        Ok(grid)
    }

    /// Weighted analytic norm `|f|_s = sum_k |f_k| e^{|k| s}` with `|k|` the
    /// l1 size; vector/matrix values take the max over components.
    pub fn weighted_norm(&self, s: f64) -> f64 {
        assert!(s >= 0.0, "analyticity width must be nonnegative");
        let modes = self.modes();
        let mut k = vec![0i64; self.dim];
        let mut best = 0.0f64;
        for comp in &self.coeffs {
            let mut acc = 0.0;
            for (idx, z) in comp.iter().enumerate() {
                if z.re == 0.0 && z.im == 0.0 {
                    continue;
                }
                modes.mode_at(idx, &mut k);
                let l1: i64 = k.iter().map(|x| x.abs()).sum();
                acc += z.norm() * (s * l1 as f64).exp();
            }
            best = best.max(acc);
        }
        best
    }

    /// `f(theta + omega)`: multiplies mode `k` by `e^{i k.omega}`.
    pub fn shift(&self, omega: &[f64]) -> FourierSeries {
        assert_eq!(omega.len(), self.dim);
        let modes = self.modes();
        let mut out = self.clone();
        let mut k = vec![0i64; self.dim];
        for (idx, _) in modes.iter() {
            modes.mode_at(idx, &mut k);
            let phase: f64 = k.iter().zip(omega).map(|(&kj, &w)| kj as f64 * w).sum();
            let rot = Complex64::from_polar(1.0, phase);
            for comp in &mut out.coeffs {
                comp[idx] *= rot;
            }
        }
        if out.reality {
            out.symmetrize();
        }
        out
    }

    /// Partial derivative along `axis`: multiplies mode `k` by `i k_axis`.
    pub fn derivative(&self, axis: usize) -> FourierSeries {
        assert!(axis < self.dim);
        let modes = self.modes();
        let mut out = self.clone();
        let mut k = vec![0i64; self.dim];
        for (idx, _) in modes.iter() {
            modes.mode_at(idx, &mut k);
            let ik = Complex64::new(0.0, k[axis] as f64);
            for comp in &mut out.coeffs {
                comp[idx] *= ik;
            }
        }
        if out.reality {
            out.symmetrize();
        }
        out
    }

    /// The mean value `f_0` (row-major component list).
    pub fn average(&self) -> Vec<Complex64> {
        let zero = self.modes().index_of(&vec![0; self.dim]).unwrap();
        self.coeffs.iter().map(|c| c[zero]).collect()
    }

    /// Product with dealiasing: both factors are sampled on a grid of at
    /// least `2(2K+1)` points per axis, multiplied pointwise with the shape
    /// rules (scalar*any, any*scalar, matrix*vector, matrix*matrix), and
    /// re-truncated to the common cutoff.
    pub fn multiply(&self, rhs: &FourierSeries) -> Result<FourierSeries> {
        if self.dim != rhs.dim {
            return Err(Error::DimensionMismatch {
                context: "series product",
                expected: self.dim,
                got: rhs.dim,
            });
        }
        let cutoff = self.cutoff.max(rhs.cutoff);
        let size = dealias_grid_size(cutoff);
        let scalar_left = matches!(self.shape, ValueShape::Scalar);
        let scalar_right = matches!(rhs.shape, ValueShape::Scalar);
        if !scalar_left && !scalar_right && self.shape.cols() != rhs.shape.rows() {
            return Err(Error::ShapeMismatch {
                left: self.shape.describe(),
                right: rhs.shape.describe(),
            });
        }
        let ga = self.to_grid(size)?;
        let gb = rhs.to_grid(size)?;
        let product = if scalar_left && !scalar_right {
            let mut out = gb.clone();
            for p in 0..out.points() {
                let s = ga.entry(p, 0, 0);
                for v in out.point_slice_mut(p) {
                    *v *= s;
                }
            }
            out
        } else if scalar_right && !scalar_left {
            let mut out = ga.clone();
            for p in 0..out.points() {
                let s = gb.entry(p, 0, 0);
                for v in out.point_slice_mut(p) {
                    *v *= s;
                }
            }
            out
        } else {
            ga.matmul(&gb)?
        };
        FourierSeries::from_grid(&product, cutoff, self.reality && rhs.reality)
    }

    /// Apply a constant matrix on the left: `M * f` for vector/matrix series.
    pub fn left_mul_matrix(&self, m: &[Complex64], rows: usize) -> FourierSeries {
        let inner = self.shape.rows();
        assert_eq!(m.len(), rows * inner);
        let cols = self.shape.cols();
        let shape = product_shape(self.shape, self.shape, rows, cols);
        let mut out = FourierSeries::zeros(self.dim, self.cutoff, shape);
        out.reality = false;
        let nmodes = self.coeffs[0].len();
        for i in 0..rows {
            for j in 0..cols {
                let dst = i * cols + j;
                for l in 0..inner {
                    let w = m[i * inner + l];
                    if w.re == 0.0 && w.im == 0.0 {
                        continue;
                    }
                    let src = &self.coeffs[l * cols + j];
                    let dst_col = &mut out.coeffs[dst];
                    for idx in 0..nmodes {
                        dst_col[idx] += w * src[idx];
                    }
                }
            }
        }
        out.reality = out.is_conjugate_symmetric(0.0);
        out
    }

    /// Apply a constant matrix on the right: `f * M` for matrix series.
    pub fn right_mul_matrix(&self, m: &[Complex64], cols: usize) -> FourierSeries {
        let inner = self.shape.cols();
        assert_eq!(m.len(), inner * cols);
        let rows = self.shape.rows();
        let shape = product_shape(self.shape, self.shape, rows, cols);
        let mut out = FourierSeries::zeros(self.dim, self.cutoff, shape);
        out.reality = false;
        let nmodes = self.coeffs[0].len();
        for i in 0..rows {
            for j in 0..cols {
                let dst = i * cols + j;
                for l in 0..inner {
                    let w = m[l * cols + j];
                    if w.re == 0.0 && w.im == 0.0 {
                        continue;
                    }
                    let src = &self.coeffs[i * inner + l];
                    let dst_col = &mut out.coeffs[dst];
                    for idx in 0..nmodes {
                        dst_col[idx] += w * src[idx];
                    }
                }
            }
        }
        out.reality = out.is_conjugate_symmetric(0.0);
        out
    }

    pub fn add(&self, rhs: &FourierSeries) -> Result<FourierSeries> {
        if self.shape != rhs.shape || self.dim != rhs.dim || self.cutoff != rhs.cutoff {
            return Err(Error::ShapeMismatch {
                left: self.shape.describe(),
                right: rhs.shape.describe(),
            });
        }
        let mut out = self.clone();
        for (c, comp) in out.coeffs.iter_mut().enumerate() {
            for (idx, v) in comp.iter_mut().enumerate() {
                *v += rhs.coeffs[c][idx];
            }
        }
        out.reality = self.reality && rhs.reality;
        if out.reality {
            out.symmetrize();
        }
        Ok(out)
    }

    pub fn sub(&self, rhs: &FourierSeries) -> Result<FourierSeries> {
        self.add(&rhs.scale(-1.0))
    }

    pub fn scale(&self, factor: f64) -> FourierSeries {
        let mut out = self.clone();
        for comp in &mut out.coeffs {
            for v in comp.iter_mut() {
                *v *= factor;
            }
        }
        out
    }

    pub fn scale_complex(&self, factor: Complex64) -> FourierSeries {
        let mut out = self.clone();
        for comp in &mut out.coeffs {
            for v in comp.iter_mut() {
                *v *= factor;
            }
        }
        out.reality = factor.im == 0.0 && out.reality;
        out
    }

    /// Copy with the mean of every component removed.
    pub fn remove_average(&self) -> FourierSeries {
        let zero = self.modes().index_of(&vec![0; self.dim]).unwrap();
        let mut out = self.clone();
        for comp in &mut out.coeffs {
            comp[zero] = Complex64::new(0.0, 0.0);
        }
        out
    }

    /// Extract one component as a scalar series.
    pub fn component(&self, row: usize, col: usize) -> FourierSeries {
        let c = row * self.shape.cols() + col;
        FourierSeries {
            dim: self.dim,
            cutoff: self.cutoff,
            shape: ValueShape::Scalar,
            reality: self.reality,
            coeffs: vec![self.coeffs[c].clone()],
        }
    }

    /// Assemble a vector/matrix series from scalar components (row-major).
    pub fn from_components(shape: ValueShape, parts: &[FourierSeries]) -> Result<FourierSeries> {
        assert_eq!(parts.len(), shape.len());
        let dim = parts[0].dim;
        let cutoff = parts[0].cutoff;
        for p in parts {
            if p.dim != dim || p.cutoff != cutoff || p.shape != ValueShape::Scalar {
                return Err(Error::ShapeMismatch {
                    left: "scalar components with common cutoff".into(),
                    right: p.shape.describe(),
                });
            }
        }
        Ok(FourierSeries {
            dim,
            cutoff,
            shape,
            reality: parts.iter().all(|p| p.reality),
            coeffs: parts.iter().map(|p| p.coeffs[0].clone()).collect(),
        })
    }

    /// Evaluate at an arbitrary point by direct summation.
    pub fn eval(&self, theta: &[f64]) -> Vec<Complex64> {
        assert_eq!(theta.len(), self.dim);
        let modes = self.modes();
        let mut k = vec![0i64; self.dim];
        let mut out = vec![Complex64::new(0.0, 0.0); self.shape.len()];
        for (idx, _) in modes.iter() {
            modes.mode_at(idx, &mut k);
            let phase: f64 = k.iter().zip(theta).map(|(&kj, &t)| kj as f64 * t).sum();
            let e = Complex64::from_polar(1.0, phase);
            for (c, comp) in self.coeffs.iter().enumerate() {
                out[c] += comp[idx] * e;
            }
        }
        out
    }

    /// Evaluate assuming real values (imaginary part discarded).
    pub fn eval_real(&self, theta: &[f64]) -> Vec<f64> {
        self.eval(theta).iter().map(|z| z.re).collect()
    }

    /// Enforce `f_{-k} = conj(f_k)` exactly by averaging conjugate pairs.
    pub fn symmetrize(&mut self) {
        let modes = self.modes();
        let len = modes.len();
        for comp in &mut self.coeffs {
            for idx in 0..len / 2 {
                let jdx = modes.conjugate_index(idx);
                let a = comp[idx];
                let b = comp[jdx];
                let avg = Complex64::new(0.5 * (a.re + b.re), 0.5 * (a.im - b.im));
                comp[idx] = avg;
                comp[jdx] = avg.conj();
            }
            let mid = len / 2; // k = 0
            comp[mid] = Complex64::new(comp[mid].re, 0.0);
        }
        self.reality = true;
    }

    /// Maximum violation of conjugate symmetry.
    pub fn conjugate_symmetry_defect(&self) -> f64 {
        let modes = self.modes();
        let len = modes.len();
        let mut worst = 0.0f64;
        for comp in &self.coeffs {
            for idx in 0..=len / 2 {
                let jdx = modes.conjugate_index(idx);
                worst = worst.max((comp[idx] - comp[jdx].conj()).norm());
            }
        }
        worst
    }

    fn is_conjugate_symmetric(&self, tol: f64) -> bool {
        self.conjugate_symmetry_defect() <= tol
    }

    /// Re-truncate to a (possibly different) cutoff; growing pads with zeros.
    pub fn with_cutoff(&self, cutoff: usize) -> FourierSeries {
        if cutoff == self.cutoff {
            return self.clone();
        }
        let mut out = FourierSeries::zeros(self.dim, cutoff, self.shape);
        out.reality = self.reality;
        let src = self.modes();
        let dst = out.modes();
        let mut k = vec![0i64; self.dim];
        for (idx, _) in src.iter() {
            src.mode_at(idx, &mut k);
            if let Some(j) = dst.index_of(&k) {
                for (c, comp) in self.coeffs.iter().enumerate() {
                    out.coeffs[c][j] = comp[idx];
                }
            }
        }
        out
    }
}

/// Dealiased grid size for products at cutoff `K`: at least `2(2K+1)` and
/// even, so the retained modes of a quadratic product are alias-free.
pub fn dealias_grid_size(cutoff: usize) -> usize {
    4 * cutoff + 4
}

/// Default sampling grid for a cutoff: `2K + 2` points per axis.
pub fn base_grid_size(cutoff: usize) -> usize {
    2 * cutoff + 2
}

// --- serialization ------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct SeriesRepr {
    dim: usize,
    cutoff: usize,
    shape: ShapeRepr,
    #[serde(default = "default_true")]
    reality: bool,
    /// Each entry is `[k_1, ..., k_n, re_1, im_1, ..., re_c, im_c]` over the
    /// row-major components; omitted modes are zero.
    coeffs: Vec<Vec<f64>>,
}

fn default_true() -> bool {
    true
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ShapeRepr {
    Scalar,
    Vector(usize),
    Matrix(usize, usize),
}

impl Serialize for FourierSeries {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        let shape = match self.shape {
            ValueShape::Scalar => ShapeRepr::Scalar,
            ValueShape::Vector(m) => ShapeRepr::Vector(m),
            ValueShape::Matrix(r, c) => ShapeRepr::Matrix(r, c),
        };
        let modes = self.modes();
        let mut coeffs = Vec::new();
        let mut k = vec![0i64; self.dim];
        for (idx, _) in modes.iter() {
            let nonzero = self
                .coeffs
                .iter()
                .any(|c| c[idx].re != 0.0 || c[idx].im != 0.0);
            if !nonzero {
                continue;
            }
            modes.mode_at(idx, &mut k);
            let mut row: Vec<f64> = k.iter().map(|&x| x as f64).collect();
            for c in &self.coeffs {
                row.push(c[idx].re);
                row.push(c[idx].im);
            }
            coeffs.push(row);
        }
        SeriesRepr {
            dim: self.dim,
            cutoff: self.cutoff,
            shape,
            reality: self.reality,
            coeffs,
        }
        .serialize(ser)
    }
}

impl<'de> Deserialize<'de> for FourierSeries {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let repr = SeriesRepr::deserialize(de)?;
        let shape = match repr.shape {
            ShapeRepr::Scalar => ValueShape::Scalar,
            ShapeRepr::Vector(m) => ValueShape::Vector(m),
            ShapeRepr::Matrix(r, c) => ValueShape::Matrix(r, c),
        };
        let mut s = FourierSeries::zeros(repr.dim, repr.cutoff, shape);
        s.reality = repr.reality;
        let modes = s.modes();
        let ncomp = shape.len();
        for row in &repr.coeffs {
            if row.len() != repr.dim + 2 * ncomp {
                return Err(D::Error::custom(format!(
                    "coefficient row has {} entries, expected {}",
                    row.len(),
                    repr.dim + 2 * ncomp
                )));
            }
            let k: Vec<i64> = row[..repr.dim].iter().map(|&x| x as i64).collect();
            let idx = modes
                .index_of(&k)
                .ok_or_else(|| D::Error::custom(format!("mode {k:?} outside cutoff")))?;
            for c in 0..ncomp {
                s.coeffs[c][idx] =
                    Complex64::new(row[repr.dim + 2 * c], row[repr.dim + 2 * c + 1]);
            }
        }
        Ok(s)
    }
}
