//! Map germs near `T^n x {0}`: Taylor jets in the action `r` whose
//! coefficients are Fourier series in the angle `theta`.
//!
//! The angle component is stored in lift convention as
//! `theta + rotation + periodic(theta, r)`, so composition is well defined on
//! the cover and rotation constants add. Composition samples the inner map on
//! a grid, evaluates the outer coefficient series (and the theta-derivatives
//! needed for the Taylor step in the order->=1 angle deviation) at the exact
//! displaced points, performs the polynomial composition in `r` pointwise,
//! and re-transforms; it is exact on band-limited, polynomial-in-`r` data up
//! to the final truncation.

use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft;
use crate::fourier::{base_grid_size, FourierSeries, GridData, ValueShape};
use crate::jet::{Jet, MultiIndexTable};

/// Tuning knobs for the composition engine.
#[derive(Clone, Copy, Debug)]
pub struct CompositionOptions {
    /// Sampling grid is `oversample * (2K + 2)` points per axis (rounded up
    /// to even).
    pub oversample: f64,
    /// Modes whose coefficients are below `mode_floor` times the largest
    /// coefficient of their series are skipped in nonuniform evaluation.
    pub mode_floor: f64,
}

impl Default for CompositionOptions {
    fn default() -> Self {
        CompositionOptions {
            oversample: 1.0,
            mode_floor: 1e-18,
        }
    }
}

impl CompositionOptions {
    pub fn grid_size(&self, cutoff: usize) -> usize {
        let base = base_grid_size(cutoff);
        let scaled = (self.oversample * base as f64).ceil() as usize;
        let s = scaled.max(base);
        if s % 2 == 0 {
            s
        } else {
            s + 1
        }
    }
}

/// Germ of a map `T^n x R^m -> T^n x R^m` along the zero section, to a fixed
/// jet degree in `r`.
#[derive(Clone, Debug)]
pub struct FourierTaylorMap {
    n: usize,
    m: usize,
    degree: usize,
    cutoff: usize,
    /// Constant part of the angle displacement (lift convention).
    rotation: Vec<f64>,
    /// Periodic angle displacement, jets over the `m` action variables.
    theta: Jet,
    /// Action component, jets over the `m` action variables.
    rpart: Jet,
    /// Guard radius in `r` for compositions; metadata, not precision.
    validity: f64,
}

pub const DEFAULT_VALIDITY: f64 = 0.5;

impl FourierTaylorMap {
    pub fn identity(n: usize, m: usize, degree: usize, cutoff: usize) -> Self {
        let table = MultiIndexTable::shared(m, degree);
        let theta = Jet::zeros(table.clone(), ValueShape::Vector(n), n, cutoff);
        let mut rpart = Jet::zeros(table.clone(), ValueShape::Vector(m), n, cutoff);
        for v in 0..m {
            let idx = table.linear_index(v);
            let mut unit = vec![0.0; m];
            unit[v] = 1.0;
            rpart.set_term(
                idx,
                FourierSeries::constant(n, cutoff, ValueShape::Vector(m), &unit),
            );
        }
        FourierTaylorMap {
            n,
            m,
            degree,
            cutoff,
            rotation: vec![0.0; n],
            theta,
            rpart,
            validity: DEFAULT_VALIDITY,
        }
    }

    pub fn from_parts(
        n: usize,
        m: usize,
        degree: usize,
        cutoff: usize,
        rotation: Vec<f64>,
        theta: Jet,
        rpart: Jet,
    ) -> Result<Self> {
        if rotation.len() != n {
            return Err(Error::DimensionMismatch {
                context: "rotation constant",
                expected: n,
                got: rotation.len(),
            });
        }
        if theta.shape != ValueShape::Vector(n) || rpart.shape != ValueShape::Vector(m) {
            return Err(Error::ShapeMismatch {
                left: "theta: vector(n), r: vector(m)".into(),
                right: "given jets".into(),
            });
        }
        Ok(FourierTaylorMap {
            n,
            m,
            degree,
            cutoff,
            rotation,
            theta,
            rpart,
            validity: DEFAULT_VALIDITY,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    pub fn rotation(&self) -> &[f64] {
        &self.rotation
    }

    pub fn rotation_mut(&mut self) -> &mut [f64] {
        &mut self.rotation
    }

    pub fn theta_jet(&self) -> &Jet {
        &self.theta
    }

    pub fn r_jet(&self) -> &Jet {
        &self.rpart
    }

    pub fn theta_jet_mut(&mut self) -> &mut Jet {
        &mut self.theta
    }

    pub fn r_jet_mut(&mut self) -> &mut Jet {
        &mut self.rpart
    }

    pub fn table(&self) -> Arc<MultiIndexTable> {
        self.theta.table.clone()
    }

    pub fn validity(&self) -> f64 {
        self.validity
    }

    pub fn set_validity(&mut self, v: f64) {
        self.validity = v;
    }

    /// Order-1 theta jet assembled as an `n x m` matrix series (the torsion
    /// coefficient: column `j` multiplies `r_j`).
    pub fn torsion_matrix(&self) -> FourierSeries {
        let table = &self.theta.table;
        let mut parts = Vec::with_capacity(self.n * self.m);
        for i in 0..self.n {
            for j in 0..self.m {
                let idx = table.linear_index(j);
                parts.push(self.theta.term(idx).component(i, 0));
            }
        }
        FourierSeries::from_components(ValueShape::Matrix(self.n, self.m), &parts).unwrap()
    }

    /// Order-1 action jet as an `m x m` matrix series.
    pub fn linear_matrix(&self) -> FourierSeries {
        let table = &self.rpart.table;
        let mut parts = Vec::with_capacity(self.m * self.m);
        for i in 0..self.m {
            for j in 0..self.m {
                let idx = table.linear_index(j);
                parts.push(self.rpart.term(idx).component(i, 0));
            }
        }
        FourierSeries::from_components(ValueShape::Matrix(self.m, self.m), &parts).unwrap()
    }

    /// Directional matrix of the quadratic action jet: the matrix `D(theta)`
    /// with `D . r = d/dt [Q2(r + t w)]_{t=0}`, i.e. twice the symmetric
    /// quadratic form contracted with `w`.
    pub fn quadratic_contraction(&self, w: &FourierSeries) -> Result<FourierSeries> {
        assert_eq!(w.shape(), ValueShape::Vector(self.m));
        let table = &self.rpart.table;
        let zero = FourierSeries::zeros(self.n, self.cutoff, ValueShape::Scalar);
        let mut entries = vec![zero; self.m * self.m];
        if self.degree >= 2 {
            for (idx, mi) in table.indices().iter().enumerate() {
                if table.order_of(idx) != 2 {
                    continue;
                }
                for j in 0..self.m {
                    if mi[j] == 0 {
                        continue;
                    }
                    // d(r^mi)/dr_j = mi_j * r^(mi - e_j); mi - e_j = e_l
                    let mut rest = mi.clone();
                    rest[j] -= 1;
                    let l = rest.iter().position(|&x| x > 0).unwrap();
                    let factor = mi[j] as f64;
                    for i in 0..self.m {
                        let term = self
                            .rpart
                            .term(idx)
                            .component(i, 0)
                            .multiply(&w.component(l, 0))?
                            .scale(factor);
                        entries[i * self.m + j] = entries[i * self.m + j].add(&term)?;
                    }
                }
            }
        }
        FourierSeries::from_components(ValueShape::Matrix(self.m, self.m), &entries)
    }

    /// Largest coefficient magnitude over all jets.
    pub fn max_coeff(&self) -> f64 {
        self.theta.max_coeff().max(self.rpart.max_coeff())
    }

    /// Evaluate at numeric `(theta, r)`; angle output in lift convention.
    pub fn eval(&self, theta: &[f64], r: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let u = self.theta.eval_real(theta, r);
        let v = self.rpart.eval_real(theta, r);
        let th: Vec<f64> = (0..self.n)
            .map(|a| theta[a] + self.rotation[a] + u[a])
            .collect();
        (th, v)
    }

    /// Map difference as plain jets, with the rotation difference folded into
    /// the constant of the order-0 angle term.
    pub fn sub_as_jets(&self, rhs: &FourierTaylorMap) -> Result<(Jet, Jet)> {
        let mut dtheta = self.theta.sub(&rhs.theta)?;
        let drot: Vec<f64> = self
            .rotation
            .iter()
            .zip(&rhs.rotation)
            .map(|(a, b)| a - b)
            .collect();
        let shift = FourierSeries::constant(self.n, self.cutoff, ValueShape::Vector(self.n), &drot);
        dtheta.set_term(0, dtheta.term(0).add(&shift)?);
        let dr = self.rpart.sub(&rhs.rpart)?;
        Ok((dtheta, dr))
    }

    pub fn add_jets(&self, dtheta: &Jet, dr: &Jet) -> Result<FourierTaylorMap> {
        let mut out = self.clone();
        out.theta = out.theta.add(dtheta)?;
        out.rpart = out.rpart.add(dr)?;
        Ok(out)
    }

    pub fn scale_jets(&self, f: f64) -> FourierTaylorMap {
        let mut out = self.clone();
        out.theta = out.theta.scale(f);
        out.rpart = out.rpart.scale(f);
        for r in out.rotation.iter_mut() {
            *r *= f;
        }
        out
    }

    /// Zero out whole jet orders, returning the truncated map and the removed
    /// content as jets.
    pub fn jet_truncate(&self, slots: &[JetSlot]) -> (FourierTaylorMap, (Jet, Jet)) {
        let mut out = self.clone();
        let mut removed_theta = Jet::zeros(
            self.theta.table.clone(),
            self.theta.shape,
            self.n,
            self.cutoff,
        );
        let mut removed_r = Jet::zeros(
            self.rpart.table.clone(),
            self.rpart.shape,
            self.n,
            self.cutoff,
        );
        for slot in slots {
            let (jet, removed) = match slot.part {
                MapPart::Theta => (&mut out.theta, &mut removed_theta),
                MapPart::Action => (&mut out.rpart, &mut removed_r),
            };
            let table = jet.table.clone();
            for idx in 0..table.len() {
                if table.order_of(idx) == slot.order {
                    removed.set_term(idx, jet.term(idx).clone());
                    let shape = jet.shape;
                    jet.set_term(idx, FourierSeries::zeros(self.n, self.cutoff, shape));
                }
            }
        }
        (out, (removed_theta, removed_r))
    }

    /// Left-compose with the translation `(theta, r) -> (beta + theta,
    /// b + (I + B) r)`.
    pub fn left_translate(&self, beta: &[f64], b: &[f64], bmat: &[f64]) -> Result<FourierTaylorMap> {
        let m = self.m;
        let mut out = self.clone();
        for (r, d) in out.rotation.iter_mut().zip(beta) {
            *r += d;
        }
        let ipb: Vec<Complex64> = (0..m * m)
            .map(|i| {
                let (r, c) = (i / m, i % m);
                Complex64::new(bmat[i] + if r == c { 1.0 } else { 0.0 }, 0.0)
            })
            .collect();
        for t in 0..out.rpart.table.len() {
            let s = out.rpart.term(t).left_mul_matrix(&ipb, m);
            out.rpart.set_term(t, s);
        }
        let badd = FourierSeries::constant(self.n, self.cutoff, ValueShape::Vector(m), b);
        out.rpart.set_term(0, out.rpart.term(0).add(&badd)?);
        Ok(out)
    }

    /// Left-compose with the inverse translation: `r -> (I+B)^{-1}(r - b)`.
    pub fn left_translate_inverse(
        &self,
        beta: &[f64],
        b: &[f64],
        bmat: &[f64],
    ) -> Result<FourierTaylorMap> {
        let m = self.m;
        let mut out = self.clone();
        for (r, d) in out.rotation.iter_mut().zip(beta) {
            *r -= d;
        }
        let bsub = FourierSeries::constant(self.n, self.cutoff, ValueShape::Vector(m), b);
        out.rpart.set_term(0, out.rpart.term(0).sub(&bsub)?);
        let mut ipb: Vec<Complex64> = (0..m * m)
            .map(|i| {
                let (r, c) = (i / m, i % m);
                Complex64::new(bmat[i] + if r == c { 1.0 } else { 0.0 }, 0.0)
            })
            .collect();
        let inv = crate::jet::invert_dense(&mut ipb, m).map_err(|_| Error::SingularMatrix {
            context: "I + B in translation inverse".into(),
            magnitude: 0.0,
        })?;
        for t in 0..out.rpart.table.len() {
            let s = out.rpart.term(t).left_mul_matrix(&inv, m);
            out.rpart.set_term(t, s);
        }
        Ok(out)
    }

    /// Conjugate by the angle rotation `rho_c(theta, r) = (theta + c, r)`:
    /// `rho_c^{-1} . self . rho_c`. All jet series are shifted by `c`; the
    /// rotation constant is unchanged.
    pub fn shift_angles(&self, c: &[f64]) -> FourierTaylorMap {
        let mut out = self.clone();
        for t in 0..out.theta.table.len() {
            let s = out.theta.term(t).shift(c);
            out.theta.set_term(t, s);
        }
        for t in 0..out.rpart.table.len() {
            let s = out.rpart.term(t).shift(c);
            out.rpart.set_term(t, s);
        }
        out
    }

    /// Precompose with the action shift `(theta, r) -> (theta, r + c)`.
    pub fn precompose_action_shift(
        &self,
        c: &[f64],
        opts: &CompositionOptions,
    ) -> Result<FourierTaylorMap> {
        let mut shift = FourierTaylorMap::identity(self.n, self.m, self.degree, self.cutoff);
        let cadd = FourierSeries::constant(self.n, self.cutoff, ValueShape::Vector(self.m), c);
        shift.rpart.set_term(0, shift.rpart.term(0).add(&cadd)?);
        self.compose(&shift, opts)
    }

    /// Full jet Jacobian as a matrix-shaped jet: block rows `(theta; r)`,
    /// block columns `(d/dtheta; d/dr)`; includes the identity of the angle
    /// lift.
    pub fn jacobian(&self) -> Result<Jet> {
        let nm = self.n + self.m;
        let table = self.theta.table.clone();
        let zero = || FourierSeries::zeros(self.n, self.cutoff, ValueShape::Scalar);
        // entries[term][row * nm + col]
        let mut entries: Vec<Vec<FourierSeries>> = (0..table.len())
            .map(|_| (0..nm * nm).map(|_| zero()).collect())
            .collect();
        let component = |row: usize, t: usize| -> FourierSeries {
            if row < self.n {
                self.theta.term(t).component(row, 0)
            } else {
                self.rpart.term(t).component(row - self.n, 0)
            }
        };
        for t in 0..table.len() {
            for row in 0..nm {
                let src = component(row, t);
                // angle derivatives of term t stay at term t
                for b in 0..self.n {
                    entries[t][row * nm + b] = src.derivative(b);
                }
            }
            // action derivatives of term t land at term t - e_j
            let mi = table.multi_index(t).to_vec();
            for j in 0..self.m {
                if mi[j] == 0 {
                    continue;
                }
                let mut parent = mi.clone();
                parent[j] -= 1;
                let dst = table.index_of(&parent).unwrap();
                let factor = mi[j] as f64;
                for row in 0..nm {
                    let src = component(row, t).scale(factor);
                    entries[dst][row * nm + self.n + j] =
                        entries[dst][row * nm + self.n + j].add(&src)?;
                }
            }
        }
        // identity of the angle lift
        let one = FourierSeries::constant(self.n, self.cutoff, ValueShape::Scalar, &[1.0]);
        for a in 0..self.n {
            entries[0][a * nm + a] = entries[0][a * nm + a].add(&one)?;
        }
        let mut jac = Jet::zeros(table.clone(), ValueShape::Matrix(nm, nm), self.n, self.cutoff);
        for (t, parts) in entries.into_iter().enumerate() {
            jac.set_term(
                t,
                FourierSeries::from_components(ValueShape::Matrix(nm, nm), &parts)?,
            );
        }
        Ok(jac)
    }

    /// `self` composed with `inner` (that is, `self(inner(theta, r))`).
    pub fn compose(
        &self,
        inner: &FourierTaylorMap,
        opts: &CompositionOptions,
    ) -> Result<FourierTaylorMap> {
        if self.n != inner.n || self.m != inner.m {
            return Err(Error::DimensionMismatch {
                context: "map composition",
                expected: self.n,
                got: inner.n,
            });
        }
        if self.degree != inner.degree || self.cutoff != inner.cutoff {
            return Err(Error::DimensionMismatch {
                context: "composition degree/cutoff",
                expected: self.degree,
                got: inner.degree,
            });
        }
        // validity guard: the inner image of the zero section must stay
        // within the outer germ's radius
        let v0 = inner.rpart.term(0);
        let v0_sup = v0
            .to_grid(base_grid_size(self.cutoff))?
            .sup_norm();
        if v0_sup > self.validity {
            return Err(Error::DomainGuard(format!(
                "inner action offset {v0_sup:.3e} exceeds outer validity radius {:.3e}",
                self.validity
            )));
        }
        let evaluated = evaluate_jets_along(&[&self.theta, &self.rpart], inner, opts)?;
        let theta = inner.theta.add(&evaluated[0])?;
        let rotation: Vec<f64> = self
            .rotation
            .iter()
            .zip(&inner.rotation)
            .map(|(a, b)| a + b)
            .collect();
        Ok(FourierTaylorMap {
            n: self.n,
            m: self.m,
            degree: self.degree,
            cutoff: self.cutoff,
            rotation,
            theta,
            rpart: evaluated[1].clone(),
            validity: inner.validity,
        })
    }
}

/// Which component of a map a jet slot refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapPart {
    Theta,
    Action,
}

#[derive(Clone, Copy, Debug)]
pub struct JetSlot {
    pub part: MapPart,
    pub order: usize,
}

// --- composition engine ---------------------------------------------------

/// Evaluate a family of jets `g(theta, r) = sum_kappa g_kappa(theta) r^kappa`
/// along a map `H`: returns the jets of `g(H_theta(theta, r), H_r(theta, r))`.
///
/// The angle argument is split as `Theta0(theta) + U(theta, r)` with
/// `Theta0 = theta + c_H + u_0(theta)` evaluated exactly (nonuniform direct
/// summation, or a phase shift and FFT when `u_0 = 0`) and `U = O(r)` handled
/// by a terminating Taylor expansion in the jet algebra.
pub fn evaluate_jets_along(
    outer: &[&Jet],
    inner: &FourierTaylorMap,
    opts: &CompositionOptions,
) -> Result<Vec<Jet>> {
    let n = inner.n;
    let m = inner.m;
    let degree = inner.degree;
    let cutoff = inner.cutoff;
    let mi_r = inner.theta.table.clone();
    for jet in outer {
        if jet.table.nvars != m || jet.dim() != n {
            return Err(Error::DimensionMismatch {
                context: "jet evaluation along map",
                expected: m,
                got: jet.table.nvars,
            });
        }
    }
    let size = opts.grid_size(cutoff);
    let npts = size.pow(n as u32);
    let nterms = mi_r.len();

    let gtheta = inner.theta.to_grid_jet(size)?;
    let grpart = inner.rpart.to_grid_jet(size)?;

    // does the inner map displace angles nonuniformly at order 0 / in r?
    let u0_zero = inner.theta.term(0).max_coeff() == 0.0;
    let taylor_needed = (1..nterms).any(|t| inner.theta.term(t).max_coeff() != 0.0);
    let mi_nu = MultiIndexTable::shared(n, if taylor_needed { degree } else { 0 });

    // flatten outer jets into scalar channels [(jet, term, comp)]
    let mut channels: Vec<(usize, usize, usize)> = Vec::new();
    for (j, jet) in outer.iter().enumerate() {
        for t in 0..jet.table.len() {
            for c in 0..jet.shape.len() {
                channels.push((j, t, c));
            }
        }
    }
    let chan_series: Vec<FourierSeries> = channels
        .iter()
        .map(|&(j, t, c)| {
            let s = outer[j].term(t);
            s.component(c / s.shape().cols(), c % s.shape().cols())
        })
        .collect();

    // channel values and theta-derivatives at the displaced points
    let vals = if u0_zero {
        eval_channels_uniform(&chan_series, &inner.rotation, size, n, &mi_nu)?
    } else {
        let mut points = vec![0.0f64; npts * n];
        let step = 2.0 * std::f64::consts::PI / size as f64;
        for p in 0..npts {
            let mut idx = p;
            for a in (0..n).rev() {
                points[p * n + a] = (idx % size) as f64 * step;
                idx /= size;
            }
            let u0 = gtheta.point_term(p, 0);
            for a in 0..n {
                points[p * n + a] += inner.rotation[a] + u0[a].re;
            }
        }
        eval_channels_at_points(&chan_series, cutoff, &points, n, &mi_nu, opts.mode_floor)
    };
    let nnu = mi_nu.len();
    let nchan = channels.len();

    // output buffers per jet: [point][term][comp]
    let out_dims: Vec<usize> = outer.iter().map(|j| j.shape.len()).collect();
    let mut out_vals: Vec<Vec<Complex64>> = out_dims
        .iter()
        .map(|&d| vec![Complex64::new(0.0, 0.0); npts * nterms * d])
        .collect();

    // channel offsets into each jet's output
    let chunk = 256usize;
    let out_ptrs: Vec<&mut [Complex64]> = out_vals.iter_mut().map(|v| v.as_mut_slice()).collect();
    // process points in parallel chunks; each chunk owns disjoint output rows
    {
        let mut borrows: Vec<Vec<&mut [Complex64]>> = Vec::new();
        let mut rest: Vec<&mut [Complex64]> = out_ptrs;
        let mut start = 0usize;
        while start < npts {
            let len = chunk.min(npts - start);
            let mut row = Vec::new();
            let mut next_rest = Vec::new();
            for (j, buf) in rest.into_iter().enumerate() {
                let w = nterms * out_dims[j];
                let (head, tail) = buf.split_at_mut(len * w);
                row.push(head);
                next_rest.push(tail);
            }
            borrows.push(row);
            rest = next_rest;
            start += len;
        }
        borrows
            .into_par_iter()
            .enumerate()
            .for_each(|(chunk_idx, mut bufs)| {
                let base = chunk_idx * chunk;
                let len = bufs[0].len() / (nterms * out_dims[0]);
                let mut upoly = vec![Complex64::new(0.0, 0.0); n * nterms];
                let mut rpoly = vec![Complex64::new(0.0, 0.0); m * nterms];
                let mut upow = vec![Complex64::new(0.0, 0.0); nnu * nterms];
                let mut rpow = vec![Complex64::new(0.0, 0.0); nterms * nterms];
                let mut tay = vec![Complex64::new(0.0, 0.0); nterms];
                let mut contrib = vec![Complex64::new(0.0, 0.0); nterms];
                for local in 0..len {
                    let p = base + local;
                    // inner polynomials at this point
                    for a in 0..n {
                        upoly[a * nterms] = Complex64::new(0.0, 0.0);
                        for t in 1..nterms {
                            upoly[a * nterms + t] = gtheta.point_term(p, t)[a];
                        }
                    }
                    for b in 0..m {
                        for t in 0..nterms {
                            rpoly[b * nterms + t] = grpart.point_term(p, t)[b];
                        }
                    }
                    // powers of U over the nu table
                    upow[..nterms]
                        .iter_mut()
                        .for_each(|z| *z = Complex64::new(0.0, 0.0));
                    upow[0] = Complex64::new(1.0, 0.0);
                    for nu in 1..nnu {
                        let (parent, var) = mi_nu.decrement_of(nu).unwrap();
                        let (lo, hi) = (nu * nterms, (nu + 1) * nterms);
                        let (pa, pb) = (parent * nterms, (parent + 1) * nterms);
                        let (left, right) = upow.split_at_mut(lo);
                        mi_r.poly_mul_scalar(
                            &left[pa..pb],
                            &upoly[var * nterms..(var + 1) * nterms],
                            &mut right[..hi - lo],
                        );
                    }
                    // powers of rho over the r table
                    rpow[..nterms]
                        .iter_mut()
                        .for_each(|z| *z = Complex64::new(0.0, 0.0));
                    rpow[0] = Complex64::new(1.0, 0.0);
                    for t in 1..nterms {
                        let (parent, var) = mi_r.decrement_of(t).unwrap();
                        let (lo, hi) = (t * nterms, (t + 1) * nterms);
                        let (pa, pb) = (parent * nterms, (parent + 1) * nterms);
                        let (left, right) = rpow.split_at_mut(lo);
                        mi_r.poly_mul_scalar(
                            &left[pa..pb],
                            &rpoly[var * nterms..(var + 1) * nterms],
                            &mut right[..hi - lo],
                        );
                    }
                    // assemble each channel
                    for (ch, &(j, t_out, c)) in channels.iter().enumerate() {
                        let vbase = (p * nchan + ch) * nnu;
                        // Taylor polynomial of the channel in U
                        tay.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
                        for nu in 0..nnu {
                            let w = vals[vbase + nu] / mi_nu.factorial_of(nu);
                            if w.re == 0.0 && w.im == 0.0 {
                                continue;
                            }
                            for tt in 0..nterms {
                                tay[tt] += w * upow[nu * nterms + tt];
                            }
                        }
                        // multiply by rho^kappa_out
                        mi_r.poly_mul_scalar(&tay, &rpow[t_out * nterms..(t_out + 1) * nterms], &mut contrib);
                        let d = out_dims[j];
                        let row = &mut bufs[j];
                        for tt in 0..nterms {
                            row[(local * nterms + tt) * d + c] += contrib[tt];
                        }
                    }
                }
            });
    }

    // transform back to series jets
    let reality = outer.iter().all(|j| j.terms.iter().all(|s| s.reality()))
        && inner.theta.terms.iter().all(|s| s.reality())
        && inner.rpart.terms.iter().all(|s| s.reality());
    let mut out_jets = Vec::with_capacity(outer.len());
    for (j, jet) in outer.iter().enumerate() {
        let d = out_dims[j];
        let mut res = Jet::zeros(mi_r.clone(), jet.shape, n, cutoff);
        for t in 0..nterms {
            let mut g = GridData::zeros(n, size, jet.shape);
            for p in 0..npts {
                let src = &out_vals[j][(p * nterms + t) * d..(p * nterms + t + 1) * d];
                g.point_slice_mut(p).copy_from_slice(src);
            }
            res.set_term(t, FourierSeries::from_grid(&g, cutoff, reality)?);
        }
        out_jets.push(res);
    }
    Ok(out_jets)
}

/// Values (and theta-derivatives up to the table degree) of scalar series at
/// uniformly shifted grid points `theta_g + shift`, via phase twiddle + FFT.
fn eval_channels_uniform(
    channels: &[FourierSeries],
    shift: &[f64],
    size: usize,
    dim: usize,
    mi_nu: &MultiIndexTable,
) -> Result<Vec<Complex64>> {
    let npts = size.pow(dim as u32);
    let nnu = mi_nu.len();
    let nchan = channels.len();
    let mut out = vec![Complex64::new(0.0, 0.0); npts * nchan * nnu];
    let mut buf = vec![Complex64::new(0.0, 0.0); npts];
    let mut k = vec![0i64; dim];
    for (ch, series) in channels.iter().enumerate() {
        let modes = series.modes();
        for nu in 0..nnu {
            let mi = mi_nu.multi_index(nu);
            buf.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
            for (idx, _) in modes.iter() {
                modes.mode_at(idx, &mut k);
                let c = series.component_coeffs(0)[idx];
                if c.re == 0.0 && c.im == 0.0 {
                    continue;
                }
                let phase: f64 = k.iter().zip(shift).map(|(&kj, &s)| kj as f64 * s).sum();
                let mut w = Complex64::from_polar(1.0, phase);
                for a in 0..dim {
                    for _ in 0..mi[a] {
                        w *= Complex64::new(0.0, k[a] as f64);
                    }
                }
                let mut bin = 0usize;
                for &kj in &k {
                    bin = bin * size + kj.rem_euclid(size as i64) as usize;
                }
                buf[bin] = c * w;
            }
            fft::inverse_nd(&mut buf, dim, size);
            for p in 0..npts {
                out[(p * nchan + ch) * nnu + nu] = buf[p];
            }
        }
    }
    Ok(out)
}

/// Values (and theta-derivatives) of scalar series at arbitrary points by
/// filtered direct summation. Deterministic: the retained mode set is a pure
/// function of the inputs.
pub(crate) fn eval_channels_at_points(
    channels: &[FourierSeries],
    cutoff: usize,
    points: &[f64],
    dim: usize,
    mi_nu: &MultiIndexTable,
    mode_floor: f64,
) -> Vec<Complex64> {
    let nchan = channels.len();
    let nnu = mi_nu.len();
    let npts = points.len() / dim;
    let modes = crate::fourier::ModeBox::new(dim, cutoff);
    let nmodes = modes.len();

    // per-channel floor
    let floors: Vec<f64> = channels
        .iter()
        .map(|s| {
            let mx = s.max_coeff();
            if mx == 0.0 {
                f64::INFINITY
            } else {
                mode_floor * mx
            }
        })
        .collect();

    // filtered entries
    let mut k = vec![0i64; dim];
    let mut k_list: Vec<i64> = Vec::new();
    let mut coeffs: Vec<Complex64> = Vec::new();
    let mut wfact: Vec<Complex64> = Vec::new();
    for idx in 0..nmodes {
        modes.mode_at(idx, &mut k);
        let keep = channels
            .iter()
            .zip(&floors)
            .any(|(s, &f)| s.component_coeffs(0)[idx].norm() >= f);
        if !keep {
            continue;
        }
        k_list.extend_from_slice(&k);
        for s in channels {
            coeffs.push(s.component_coeffs(0)[idx]);
        }
        for nu in 0..nnu {
            let mi = mi_nu.multi_index(nu);
            let mut w = Complex64::new(1.0, 0.0);
            for a in 0..dim {
                for _ in 0..mi[a] {
                    w *= Complex64::new(0.0, k[a] as f64);
                }
            }
            wfact.push(w);
        }
    }
    let nentries = k_list.len() / dim;
    let side = 2 * cutoff + 1;

    let mut out = vec![Complex64::new(0.0, 0.0); npts * nchan * nnu];
    out.par_chunks_mut(nchan * nnu)
        .enumerate()
        .for_each(|(p, acc)| {
            // per-axis phase tables e^{i k theta_a}
            let mut tables = vec![Complex64::new(0.0, 0.0); dim * side];
            for a in 0..dim {
                let z = Complex64::from_polar(1.0, points[p * dim + a]);
                let row = &mut tables[a * side..(a + 1) * side];
                row[cutoff] = Complex64::new(1.0, 0.0);
                for j in 1..=cutoff {
                    row[cutoff + j] = row[cutoff + j - 1] * z;
                    row[cutoff - j] = row[cutoff + j].conj();
                }
            }
            for e in 0..nentries {
                let mut phase = Complex64::new(1.0, 0.0);
                for a in 0..dim {
                    let ka = k_list[e * dim + a];
                    phase *= tables[a * side + (ka + cutoff as i64) as usize];
                }
                let wrow = &wfact[e * nnu..(e + 1) * nnu];
                let crow = &coeffs[e * nchan..(e + 1) * nchan];
                for ch in 0..nchan {
                    let c = crow[ch];
                    if c.re == 0.0 && c.im == 0.0 {
                        continue;
                    }
                    let t = c * phase;
                    let dst = &mut acc[ch * nnu..(ch + 1) * nnu];
                    for nu in 0..nnu {
                        dst[nu] += t * wrow[nu];
                    }
                }
            }
        });
    out
}

/// Evaluate vector-valued series at arbitrary points (no derivatives):
/// returns `[point][series][component]` real parts.
pub fn eval_series_at_points(series: &[&FourierSeries], points: &[f64], dim: usize) -> Vec<f64> {
    let mut chans = Vec::new();
    for s in series {
        for c in 0..s.shape().len() {
            chans.push(s.component(c / s.shape().cols(), c % s.shape().cols()));
        }
    }
    let cutoff = series[0].cutoff();
    let mi0 = MultiIndexTable::shared(dim, 0);
    let vals = eval_channels_at_points(&chans, cutoff, points, dim, &mi0, 0.0);
    vals.iter().map(|z| z.re).collect()
}

// --- serialization --------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct MapRepr {
    n: usize,
    m: usize,
    degree: usize,
    cutoff: usize,
    theta_rotation: Vec<f64>,
    theta_jets: Vec<JetTermRepr>,
    r_jets: Vec<JetTermRepr>,
    #[serde(default = "default_validity")]
    validity: f64,
}

fn default_validity() -> f64 {
    DEFAULT_VALIDITY
}

#[derive(Serialize, Deserialize)]
struct JetTermRepr {
    orders: Vec<u8>,
    series: FourierSeries,
}

impl Serialize for FourierTaylorMap {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        let dump = |jet: &Jet| -> Vec<JetTermRepr> {
            jet.terms
                .iter()
                .enumerate()
                .filter(|(_, s)| s.max_coeff() != 0.0)
                .map(|(t, s)| JetTermRepr {
                    orders: jet.table.multi_index(t).to_vec(),
                    series: s.clone(),
                })
                .collect()
        };
        MapRepr {
            n: self.n,
            m: self.m,
            degree: self.degree,
            cutoff: self.cutoff,
            theta_rotation: self.rotation.clone(),
            theta_jets: dump(&self.theta),
            r_jets: dump(&self.rpart),
            validity: self.validity,
        }
        .serialize(ser)
    }
}

impl<'de> Deserialize<'de> for FourierTaylorMap {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = MapRepr::deserialize(de)?;
        let table = MultiIndexTable::shared(repr.m, repr.degree);
        let mut theta = Jet::zeros(
            table.clone(),
            ValueShape::Vector(repr.n),
            repr.n,
            repr.cutoff,
        );
        let mut rpart = Jet::zeros(
            table.clone(),
            ValueShape::Vector(repr.m),
            repr.n,
            repr.cutoff,
        );
        for (dst, src) in [(&mut theta, &repr.theta_jets), (&mut rpart, &repr.r_jets)] {
            for term in src {
                let idx = table
                    .index_of(&term.orders)
                    .ok_or_else(|| D::Error::custom(format!("jet orders {:?} out of range", term.orders)))?;
                dst.set_term(idx, term.series.clone());
            }
        }
        let mut map = FourierTaylorMap::from_parts(
            repr.n,
            repr.m,
            repr.degree,
            repr.cutoff,
            repr.theta_rotation,
            theta,
            rpart,
        )
        .map_err(D::Error::custom)?;
        map.validity = repr.validity;
        Ok(map)
    }
}
