//! Polynomial jets in the action variable `r` whose coefficients are Fourier
//! series in `theta`, plus their numeric per-grid-point counterparts.
//!
//! Multi-indices over the `r` variables are enumerated in graded
//! lexicographic order and truncated at a fixed total degree; products beyond
//! the degree are discarded (jet arithmetic).

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use num_complex::Complex64;
use once_cell::sync::Lazy;

use crate::error::{Error, Result};
use crate::fourier::{FourierSeries, GridData, ValueShape};

/// All multi-indices of `nvars` variables with total degree `<= degree`,
/// graded lexicographic, together with product and factorial tables.
#[derive(Debug)]
pub struct MultiIndexTable {
    pub nvars: usize,
    pub degree: usize,
    list: Vec<Vec<u8>>,
    index: HashMap<Vec<u8>, usize>,
    /// product[i * len + j] = index of list[i] + list[j], if within degree
    product: Vec<Option<u16>>,
    /// nu! = prod nu_a!
    factorial: Vec<f64>,
    order: Vec<u8>,
    /// all (i, j, k) with list[i] + list[j] = list[k]
    triples: Vec<(u16, u16, u16)>,
    /// for idx > 0: (parent, var) with list[idx] = list[parent] + e_var
    decrement: Vec<Option<(u16, u8)>>,
}

fn enumerate(nvars: usize, degree: usize) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    for total in 0..=degree {
        let mut cur = vec![0u8; nvars];
        fill(&mut out, &mut cur, 0, total as u8);
    }
    out
}

fn fill(out: &mut Vec<Vec<u8>>, cur: &mut Vec<u8>, pos: usize, remaining: u8) {
    if pos == cur.len() - 1 {
        cur[pos] = remaining;
        out.push(cur.clone());
        return;
    }
    for v in (0..=remaining).rev() {
        cur[pos] = v;
        fill(out, cur, pos + 1, remaining - v);
    }
    cur[pos] = 0;
}

impl MultiIndexTable {
    fn build(nvars: usize, degree: usize) -> Self {
        assert!(nvars >= 1);
        let list = enumerate(nvars, degree);
        let index: HashMap<Vec<u8>, usize> =
            list.iter().enumerate().map(|(i, v)| (v.clone(), i)).collect();
        let len = list.len();
        let mut product = vec![None; len * len];
        for i in 0..len {
            for j in 0..len {
                let sum: Vec<u8> = list[i]
                    .iter()
                    .zip(&list[j])
                    .map(|(a, b)| a + b)
                    .collect();
                if sum.iter().map(|&x| x as usize).sum::<usize>() <= degree {
                    product[i * len + j] = index.get(&sum).map(|&k| k as u16);
                }
            }
        }
        let factorial = list
            .iter()
            .map(|v| {
                v.iter()
                    .map(|&x| (1..=x as u64).product::<u64>() as f64)
                    .product()
            })
            .collect();
        let order: Vec<u8> = list.iter().map(|v| v.iter().sum::<u8>()).collect();
        let mut triples = Vec::new();
        for i in 0..len {
            for j in 0..len {
                if let Some(k) = product[i * len + j] {
                    triples.push((i as u16, j as u16, k));
                }
            }
        }
        let decrement = list
            .iter()
            .enumerate()
            .map(|(idx, mi)| {
                if idx == 0 {
                    return None;
                }
                let var = mi.iter().position(|&x| x > 0).unwrap();
                let mut parent = mi.clone();
                parent[var] -= 1;
                Some((index[&parent] as u16, var as u8))
            })
            .collect();
        MultiIndexTable {
            nvars,
            degree,
            list,
            index,
            product,
            factorial,
            order,
            triples,
            decrement,
        }
    }

    pub fn shared(nvars: usize, degree: usize) -> Arc<MultiIndexTable> {
        static CACHE: Lazy<Mutex<HashMap<(usize, usize), Arc<MultiIndexTable>>>> =
            Lazy::new(|| Mutex::new(HashMap::new()));
        CACHE
            .lock()
            .unwrap()
            .entry((nvars, degree))
            .or_insert_with(|| Arc::new(MultiIndexTable::build(nvars, degree)))
            .clone()
    }

    pub fn len(&self) -> usize {
        self.list.len()
    }

    pub fn is_empty(&self) -> bool {
        self.list.is_empty()
    }

    pub fn indices(&self) -> &[Vec<u8>] {
        &self.list
    }

    pub fn multi_index(&self, idx: usize) -> &[u8] {
        &self.list[idx]
    }

    pub fn order_of(&self, idx: usize) -> usize {
        self.order[idx] as usize
    }

    pub fn factorial_of(&self, idx: usize) -> f64 {
        self.factorial[idx]
    }

    pub fn index_of(&self, mi: &[u8]) -> Option<usize> {
        self.index.get(mi).copied()
    }

    pub fn product_index(&self, i: usize, j: usize) -> Option<usize> {
        self.product[i * self.len() + j].map(|k| k as usize)
    }

    /// Index of the first-order monomial in variable `v`.
    pub fn linear_index(&self, v: usize) -> usize {
        let mut mi = vec![0u8; self.nvars];
        mi[v] = 1;
        self.index[&mi]
    }

    pub fn product_triples(&self) -> &[(u16, u16, u16)] {
        &self.triples
    }

    pub fn decrement_of(&self, idx: usize) -> Option<(usize, usize)> {
        self.decrement[idx].map(|(p, v)| (p as usize, v as usize))
    }

    /// Scalar truncated polynomial product over this index set.
    pub fn poly_mul_scalar(&self, a: &[Complex64], b: &[Complex64], out: &mut [Complex64]) {
        out.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
        for &(i, j, k) in &self.triples {
            out[k as usize] += a[i as usize] * b[j as usize];
        }
    }
}

/// A degree-truncated polynomial in `r` whose coefficients are Fourier
/// series of a common shape.
#[derive(Clone, Debug)]
pub struct Jet {
    pub table: Arc<MultiIndexTable>,
    pub shape: ValueShape,
    pub terms: Vec<FourierSeries>,
}

impl Jet {
    pub fn zeros(
        table: Arc<MultiIndexTable>,
        shape: ValueShape,
        dim: usize,
        cutoff: usize,
    ) -> Self {
        let terms = (0..table.len())
            .map(|_| FourierSeries::zeros(dim, cutoff, shape))
            .collect();
        Jet {
            table,
            shape,
            terms,
        }
    }

    pub fn dim(&self) -> usize {
        self.terms[0].dim()
    }

    pub fn cutoff(&self) -> usize {
        self.terms[0].cutoff()
    }

    pub fn term(&self, idx: usize) -> &FourierSeries {
        &self.terms[idx]
    }

    pub fn term_mut(&mut self, idx: usize) -> &mut FourierSeries {
        &mut self.terms[idx]
    }

    pub fn set_term(&mut self, idx: usize, s: FourierSeries) {
        assert_eq!(s.shape(), self.shape);
        self.terms[idx] = s;
    }

    pub fn add(&self, rhs: &Jet) -> Result<Jet> {
        let mut out = self.clone();
        for (i, t) in out.terms.iter_mut().enumerate() {
            *t = t.add(&rhs.terms[i])?;
        }
        Ok(out)
    }

    pub fn sub(&self, rhs: &Jet) -> Result<Jet> {
        self.add(&rhs.scale(-1.0))
    }

    pub fn scale(&self, f: f64) -> Jet {
        let mut out = self.clone();
        for t in out.terms.iter_mut() {
            *t = t.scale(f);
        }
        out
    }

    /// Largest coefficient magnitude over all terms.
    pub fn max_coeff(&self) -> f64 {
        self.terms.iter().map(|t| t.max_coeff()).fold(0.0, f64::max)
    }

    /// Max of the weighted norms of the terms.
    pub fn weighted_norm(&self, s: f64) -> f64 {
        self.terms
            .iter()
            .map(|t| t.weighted_norm(s))
            .fold(0.0, f64::max)
    }

    /// Evaluate at numeric `(theta, r)`.
    pub fn eval_real(&self, theta: &[f64], r: &[f64]) -> Vec<f64> {
        assert_eq!(r.len(), self.table.nvars);
        let mut out = vec![0.0; self.shape.len()];
        for (idx, term) in self.terms.iter().enumerate() {
            let mi = self.table.multi_index(idx);
            let mono: f64 = mi
                .iter()
                .zip(r)
                .map(|(&p, &x)| x.powi(p as i32))
                .product();
            if mono == 0.0 {
                continue;
            }
            let v = term.eval(theta);
            for (o, z) in out.iter_mut().zip(&v) {
                *o += mono * z.re;
            }
        }
        out
    }

    /// Sample every term on the grid.
    pub fn to_grid_jet(&self, size: usize) -> Result<GridJet> {
        let nterms = self.table.len();
        let rows = self.shape.rows();
        let cols = self.shape.cols();
        let dim = self.dim();
        let npts = size.pow(dim as u32);
        let mut values = vec![Complex64::new(0.0, 0.0); npts * nterms * rows * cols];
        for (t, term) in self.terms.iter().enumerate() {
            let g = term.to_grid(size)?;
            let clen = rows * cols;
            for p in 0..npts {
                let dst = (p * nterms + t) * clen;
                values[dst..dst + clen].copy_from_slice(g.point_slice(p));
            }
        }
        Ok(GridJet {
            dim,
            size,
            rows,
            cols,
            table: self.table.clone(),
            values,
        })
    }
}

/// Numeric jet values on the theta grid: layout `[point][term][row][col]`.
#[derive(Clone, Debug)]
pub struct GridJet {
    pub dim: usize,
    pub size: usize,
    pub rows: usize,
    pub cols: usize,
    pub table: Arc<MultiIndexTable>,
    pub values: Vec<Complex64>,
}

impl GridJet {
    pub fn zeros(
        dim: usize,
        size: usize,
        rows: usize,
        cols: usize,
        table: Arc<MultiIndexTable>,
    ) -> Self {
        let npts = size.pow(dim as u32);
        GridJet {
            dim,
            size,
            rows,
            cols,
            values: vec![Complex64::new(0.0, 0.0); npts * table.len() * rows * cols],
            table,
        }
    }

    pub fn points(&self) -> usize {
        self.size.pow(self.dim as u32)
    }

    fn clen(&self) -> usize {
        self.rows * self.cols
    }

    pub fn point_term(&self, p: usize, t: usize) -> &[Complex64] {
        let clen = self.clen();
        let base = (p * self.table.len() + t) * clen;
        &self.values[base..base + clen]
    }

    pub fn point_term_mut(&mut self, p: usize, t: usize) -> &mut [Complex64] {
        let clen = self.clen();
        let base = (p * self.table.len() + t) * clen;
        &mut self.values[base..base + clen]
    }

    /// Pointwise jet-matrix product.
    pub fn matmul(&self, rhs: &GridJet) -> Result<GridJet> {
        if self.cols != rhs.rows || self.size != rhs.size {
            return Err(Error::ShapeMismatch {
                left: format!("{}x{} grid jet", self.rows, self.cols),
                right: format!("{}x{} grid jet", rhs.rows, rhs.cols),
            });
        }
        let mut out = GridJet::zeros(self.dim, self.size, self.rows, rhs.cols, self.table.clone());
        let nterms = self.table.len();
        let (r, kk, c) = (self.rows, self.cols, rhs.cols);
        for p in 0..self.points() {
            for ta in 0..nterms {
                let a = self.point_term(p, ta);
                if a.iter().all(|z| z.re == 0.0 && z.im == 0.0) {
                    continue;
                }
                for tb in 0..nterms {
                    let Some(tc) = self.table.product_index(ta, tb) else {
                        continue;
                    };
                    let b = rhs.point_term(p, tb);
                    let clen_o = r * c;
                    let base = (p * nterms + tc) * clen_o;
                    for i in 0..r {
                        for j in 0..c {
                            let mut acc = Complex64::new(0.0, 0.0);
                            for l in 0..kk {
                                acc += a[i * kk + l] * b[l * c + j];
                            }
                            out.values[base + i * c + j] += acc;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, rhs: &GridJet) -> Result<GridJet> {
        if self.rows != rhs.rows || self.cols != rhs.cols || self.size != rhs.size {
            return Err(Error::ShapeMismatch {
                left: format!("{}x{}", self.rows, self.cols),
                right: format!("{}x{}", rhs.rows, rhs.cols),
            });
        }
        let mut out = self.clone();
        for (o, r) in out.values.iter_mut().zip(&rhs.values) {
            *o += *r;
        }
        Ok(out)
    }

    pub fn sub(&self, rhs: &GridJet) -> Result<GridJet> {
        self.add(&rhs.scale(-1.0))
    }

    pub fn scale(&self, f: f64) -> GridJet {
        let mut out = self.clone();
        for v in out.values.iter_mut() {
            *v *= f;
        }
        out
    }

    /// Left-multiply every point and term by a constant matrix.
    pub fn left_mul_const(&self, m: &[Complex64], rows: usize) -> GridJet {
        assert_eq!(m.len() % self.rows, 0);
        let mut out = GridJet::zeros(self.dim, self.size, rows, self.cols, self.table.clone());
        let nterms = self.table.len();
        for p in 0..self.points() {
            for t in 0..nterms {
                let src = self.point_term(p, t);
                let base = (p * nterms + t) * rows * self.cols;
                for i in 0..rows {
                    for j in 0..self.cols {
                        let mut acc = Complex64::new(0.0, 0.0);
                        for l in 0..self.rows {
                            acc += m[i * self.rows + l] * src[l * self.cols + j];
                        }
                        out.values[base + i * self.cols + j] = acc;
                    }
                }
            }
        }
        out
    }

    /// Solve `self(r) * X(r) = rhs(r)` pointwise, order by order in `r`.
    /// `self` must be square with an invertible constant term at every point.
    pub fn solve(&self, rhs: &GridJet) -> Result<GridJet> {
        if self.rows != self.cols || self.cols != rhs.rows || self.size != rhs.size {
            return Err(Error::ShapeMismatch {
                left: format!("{}x{} system", self.rows, self.cols),
                right: format!("{}x{} rhs", rhs.rows, rhs.cols),
            });
        }
        let m = self.rows;
        let c = rhs.cols;
        let nterms = self.table.len();
        let mut out = GridJet::zeros(self.dim, self.size, m, c, self.table.clone());
        let mut j0 = vec![Complex64::new(0.0, 0.0); m * m];
        for p in 0..self.points() {
            j0.copy_from_slice(self.point_term(p, 0));
            let inv0 = invert_dense(&mut j0, m).map_err(|_| Error::SingularMatrix {
                context: "jet linear solve: constant term".into(),
                magnitude: 0.0,
            })?;
            // ascending total order so lower-order solutions feed higher ones
            for t in 0..nterms {
                let mut acc: Vec<Complex64> = rhs.point_term(p, t).to_vec();
                for ta in 1..nterms {
                    // find tb with ta + tb = t
                    let Some(tb) = difference_index(&self.table, t, ta) else {
                        continue;
                    };
                    let a = self.point_term(p, ta);
                    let x = out.point_term(p, tb);
                    for i in 0..m {
                        for j in 0..c {
                            let mut s = Complex64::new(0.0, 0.0);
                            for l in 0..m {
                                s += a[i * m + l] * x[l * c + j];
                            }
                            acc[i * c + j] -= s;
                        }
                    }
                }
                let dst = out.point_term_mut(p, t);
                for i in 0..m {
                    for j in 0..c {
                        let mut s = Complex64::new(0.0, 0.0);
                        for l in 0..m {
                            s += inv0[i * m + l] * acc[l * c + j];
                        }
                        dst[i * c + j] = s;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Transform back to spectral jets.
    pub fn to_jet(&self, cutoff: usize, reality: bool) -> Result<Jet> {
        let shape = match (self.rows, self.cols) {
            (1, 1) => ValueShape::Scalar,
            (r, 1) => ValueShape::Vector(r),
            (r, c) => ValueShape::Matrix(r, c),
        };
        let mut jet = Jet::zeros(self.table.clone(), shape, self.dim, cutoff);
        let nterms = self.table.len();
        let clen = self.clen();
        for t in 0..nterms {
            let mut g = GridData::zeros(self.dim, self.size, shape);
            for p in 0..self.points() {
                g.point_slice_mut(p)
                    .copy_from_slice(self.point_term(p, t));
            }
            jet.terms[t] = FourierSeries::from_grid(&g, cutoff, reality)?;
        }
        let _ = clen;
        Ok(jet)
    }

    /// Extract one term as plain grid data.
    pub fn term_grid(&self, t: usize) -> GridData {
        let shape = match (self.rows, self.cols) {
            (1, 1) => ValueShape::Scalar,
            (r, 1) => ValueShape::Vector(r),
            (r, c) => ValueShape::Matrix(r, c),
        };
        let mut g = GridData::zeros(self.dim, self.size, shape);
        for p in 0..self.points() {
            g.point_slice_mut(p).copy_from_slice(self.point_term(p, t));
        }
        g
    }
}

/// Index `tb` such that `mi[ta] + mi[tb] = mi[t]`, if the difference is a
/// valid multi-index.
fn difference_index(table: &MultiIndexTable, t: usize, ta: usize) -> Option<usize> {
    let target = table.multi_index(t);
    let sub = table.multi_index(ta);
    let mut diff = vec![0u8; table.nvars];
    for a in 0..table.nvars {
        if sub[a] > target[a] {
            return None;
        }
        diff[a] = target[a] - sub[a];
    }
    table.index_of(&diff)
}

/// Dense inverse via Gauss-Jordan (tiny matrices only).
pub(crate) fn invert_dense(a: &mut [Complex64], m: usize) -> Result<Vec<Complex64>> {
    let mut inv = vec![Complex64::new(0.0, 0.0); m * m];
    for i in 0..m {
        inv[i * m + i] = Complex64::new(1.0, 0.0);
    }
    for col in 0..m {
        let mut pivot = col;
        for row in col + 1..m {
            if a[row * m + col].norm_sqr() > a[pivot * m + col].norm_sqr() {
                pivot = row;
            }
        }
        let pv = a[pivot * m + col];
        if pv.norm() == 0.0 {
            return Err(Error::SingularMatrix {
                context: "dense inverse".into(),
                magnitude: 0.0,
            });
        }
        if pivot != col {
            for j in 0..m {
                a.swap(col * m + j, pivot * m + j);
                inv.swap(col * m + j, pivot * m + j);
            }
        }
        let pinv = a[col * m + col].inv();
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
    Ok(inv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn graded_lex_enumeration() {
        let t = MultiIndexTable::shared(2, 2);
        let list: Vec<&[u8]> = t.indices().iter().map(|v| v.as_slice()).collect();
        assert_eq!(
            list,
            vec![
                &[0u8, 0][..],
                &[1, 0],
                &[0, 1],
                &[2, 0],
                &[1, 1],
                &[0, 2]
            ]
        );
        assert_eq!(t.product_index(1, 2), t.index_of(&[1, 1]));
        assert_eq!(t.product_index(3, 3), None);
        assert_eq!(t.factorial_of(t.index_of(&[2, 0]).unwrap()), 2.0);
    }

    #[test]
    fn grid_jet_solve_inverts_matmul() {
        let table = MultiIndexTable::shared(1, 2);
        let dim = 1usize;
        let size = 18usize;
        // J = [[2 + r, 0.3], [0.1 r, 1]] pointwise constant in theta
        let mut j = GridJet::zeros(dim, size, 2, 2, table.clone());
        for p in 0..j.points() {
            j.point_term_mut(p, 0)
                .copy_from_slice(&[
                    Complex64::new(2.0, 0.0),
                    Complex64::new(0.3, 0.0),
                    Complex64::new(0.0, 0.0),
                    Complex64::new(1.0, 0.0),
                ]);
            j.point_term_mut(p, 1)
                .copy_from_slice(&[
                    Complex64::new(1.0, 0.0),
                    Complex64::new(0.0, 0.0),
                    Complex64::new(0.1, 0.0),
                    Complex64::new(0.0, 0.0),
                ]);
        }
        let mut x = GridJet::zeros(dim, size, 2, 1, table.clone());
        for p in 0..x.points() {
            x.point_term_mut(p, 0)
                .copy_from_slice(&[Complex64::new(0.5, 0.0), Complex64::new(-1.0, 0.0)]);
            x.point_term_mut(p, 2)
                .copy_from_slice(&[Complex64::new(0.2, 0.0), Complex64::new(0.7, 0.0)]);
        }
        let rhs = j.matmul(&x).unwrap();
        let got = j.solve(&rhs).unwrap();
        for (a, b) in got.values.iter().zip(&x.values) {
            assert!((a - b).norm() < 1e-13);
        }
    }
}
