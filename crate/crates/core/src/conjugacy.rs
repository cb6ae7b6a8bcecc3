//! The geometric objects of the normal form: the fiber-affine change of
//! variables `G(theta, r) = (phi(theta), R0(theta) + R1(theta) r)`, the
//! translation `T_lambda`, the affine space `U(alpha, A)` of reference maps,
//! the operator `(G, P, lambda) -> T_lambda . G . P . G^{-1}`, and the
//! pulled-back residual feeding the linearized equations.

use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::cohomology::SpectralData;
use crate::error::{Error, Result};
use crate::fourier::{dealias_grid_size, FourierSeries, GridData, ValueShape};
use crate::jet::{GridJet, Jet, MultiIndexTable};
use crate::map::{
    eval_series_at_points, evaluate_jets_along, CompositionOptions, FourierTaylorMap,
};

/// Analyticity widths used by the near-identity guards.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Widths {
    pub s: f64,
    pub sigma: f64,
}

impl Default for Widths {
    fn default() -> Self {
        // 0 < s < s + sigma < 1 with sigma < s
        Widths { s: 0.2, sigma: 0.1 }
    }
}

/// Fiber-affine conjugacy `G = (id + u, R0 + R1 r)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Conjugacy {
    u: FourierSeries,
    r0: FourierSeries,
    r1: FourierSeries,
}

pub const R1_DET_TOLERANCE: f64 = 1e-10;

impl Conjugacy {
    pub fn identity(n: usize, m: usize, cutoff: usize) -> Self {
        Conjugacy {
            u: FourierSeries::zeros(n, cutoff, ValueShape::Vector(n)),
            r0: FourierSeries::zeros(n, cutoff, ValueShape::Vector(m)),
            r1: FourierSeries::identity_matrix(n, cutoff, m),
        }
    }

    pub fn new(u: FourierSeries, r0: FourierSeries, r1: FourierSeries) -> Result<Self> {
        let n = u.dim();
        let m = r0.shape().rows();
        if u.shape() != ValueShape::Vector(n)
            || r0.shape() != ValueShape::Vector(m)
            || r1.shape() != ValueShape::Matrix(m, m)
        {
            return Err(Error::ShapeMismatch {
                left: "u: vector(n), R0: vector(m), R1: matrix(m,m)".into(),
                right: format!("{:?}/{:?}/{:?}", u.shape(), r0.shape(), r1.shape()),
            });
        }
        let g = Conjugacy { u, r0, r1 };
        g.check_r1_invertible()?;
        Ok(g)
    }

    pub fn n(&self) -> usize {
        self.u.dim()
    }

    pub fn m(&self) -> usize {
        self.r0.shape().rows()
    }

    pub fn cutoff(&self) -> usize {
        self.u.cutoff()
    }

    pub fn phi_periodic(&self) -> &FourierSeries {
        &self.u
    }

    pub fn r0(&self) -> &FourierSeries {
        &self.r0
    }

    pub fn r1(&self) -> &FourierSeries {
        &self.r1
    }

    fn check_r1_invertible(&self) -> Result<f64> {
        let grid = self.r1.to_grid(dealias_grid_size(self.cutoff()))?;
        let (_, min_det) = grid.inverse().map_err(|_| Error::SingularMatrix {
            context: "R1 on the sampling grid".into(),
            magnitude: 0.0,
        })?;
        if min_det < R1_DET_TOLERANCE {
            return Err(Error::SingularMatrix {
                context: "R1 determinant below tolerance on the grid".into(),
                magnitude: min_det,
            });
        }
        Ok(min_det)
    }

    /// Near-identity guard of the inversion theorem: `|u|_s < sigma / n`.
    pub fn check_near_identity(&self, widths: Widths) -> Result<()> {
        let bound = widths.sigma / self.n() as f64;
        let norm = self.u.weighted_norm(widths.s);
        if norm >= bound {
            return Err(Error::DomainGuard(format!(
                "|phi - id|_s = {norm:.3e} >= sigma/n = {bound:.3e}"
            )));
        }
        Ok(())
    }

    /// Max distance to the identity in the flat norm.
    pub fn distance_to_identity(&self) -> f64 {
        let m = self.m();
        let mut id = vec![0.0; m * m];
        for i in 0..m {
            id[i * m + i] = 1.0;
        }
        let eye = FourierSeries::constant(self.n(), self.cutoff(), ValueShape::Matrix(m, m), &id);
        let dr1 = self.r1.sub(&eye).unwrap();
        self.u
            .weighted_norm(0.0)
            .max(self.r0.weighted_norm(0.0))
            .max(dr1.weighted_norm(0.0))
    }

    /// Embed into a map germ of the requested degree.
    pub fn to_map(&self, degree: usize) -> FourierTaylorMap {
        let (n, m, k) = (self.n(), self.m(), self.cutoff());
        let mut map = FourierTaylorMap::identity(n, m, degree, k);
        map.theta_jet_mut().set_term(0, self.u.clone());
        map.r_jet_mut().set_term(0, self.r0.clone());
        let table = map.table();
        for j in 0..m {
            let idx = table.linear_index(j);
            let mut col_parts = Vec::with_capacity(m);
            for i in 0..m {
                col_parts.push(self.r1.component(i, j));
            }
            let col = FourierSeries::from_components(ValueShape::Vector(m), &col_parts).unwrap();
            map.r_jet_mut().set_term(idx, col);
        }
        map
    }

    pub fn add_increment(
        &self,
        du: &FourierSeries,
        dr0: &FourierSeries,
        dr1: &FourierSeries,
    ) -> Result<Conjugacy> {
        Conjugacy::new(self.u.add(du)?, self.r0.add(dr0)?, self.r1.add(dr1)?)
    }

    /// Reparametrize the torus origin: `G . rho_c` with
    /// `rho_c(theta, r) = (theta + c, r)`. Used to renormalize `u` to zero
    /// average without changing the conjugacy class.
    pub fn rotate_origin(&self, c: &[f64]) -> Conjugacy {
        let mut u = self.u.shift(c);
        let cc = FourierSeries::constant(self.n(), self.cutoff(), ValueShape::Vector(self.n()), c);
        u = u.add(&cc).unwrap();
        Conjugacy {
            u,
            r0: self.r0.shift(c),
            r1: self.r1.shift(c),
        }
    }
}

/// Counter-term `lambda = (beta, b, B)` subject to `(A - I) b = 0` and
/// `[A, B] = 0`; violations are constructor errors.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Translation {
    pub beta: Vec<f64>,
    pub b: Vec<f64>,
    /// Row-major `m x m`.
    pub bmat: Vec<f64>,
}

pub const TRANSLATION_CONSTRAINT_TOLERANCE: f64 = 1e-12;

impl Translation {
    pub fn zero(n: usize, m: usize) -> Self {
        Translation {
            beta: vec![0.0; n],
            b: vec![0.0; m],
            bmat: vec![0.0; m * m],
        }
    }

    pub fn new(beta: Vec<f64>, b: Vec<f64>, bmat: Vec<f64>, a: &DMatrix<f64>) -> Result<Self> {
        let t = Translation { beta, b, bmat };
        let (rb, rc) = t.constraint_residuals(a);
        let bn = t.b.iter().map(|x| x.abs()).fold(0.0, f64::max);
        let cn = t.bmat.iter().map(|x| x.abs()).fold(0.0, f64::max);
        if rb > TRANSLATION_CONSTRAINT_TOLERANCE * bn.max(1.0) {
            return Err(Error::ConstraintViolation(format!(
                "(A - I) b residual {rb:.3e} for |b| = {bn:.3e}"
            )));
        }
        if rc > TRANSLATION_CONSTRAINT_TOLERANCE * cn.max(1.0) {
            return Err(Error::ConstraintViolation(format!(
                "[A, B] residual {rc:.3e} for |B| = {cn:.3e}"
            )));
        }
        Ok(t)
    }

    /// `(|(A - I) b|_inf, |[A, B]|_inf)`.
    pub fn constraint_residuals(&self, a: &DMatrix<f64>) -> (f64, f64) {
        let m = a.nrows();
        let mut rb = 0.0f64;
        for i in 0..m {
            let mut acc = -self.b[i];
            for l in 0..m {
                acc += a[(i, l)] * self.b[l];
            }
            rb = rb.max(acc.abs());
        }
        let mut rc = 0.0f64;
        for i in 0..m {
            for j in 0..m {
                let mut acc = 0.0;
                for l in 0..m {
                    acc += a[(i, l)] * self.bmat[l * m + j] - self.bmat[i * m + l] * a[(l, j)];
                }
                rc = rc.max(acc.abs());
            }
        }
        (rb, rc)
    }

    pub fn n(&self) -> usize {
        self.beta.len()
    }

    pub fn m(&self) -> usize {
        self.b.len()
    }

    pub fn norm(&self) -> f64 {
        self.beta
            .iter()
            .chain(&self.b)
            .chain(&self.bmat)
            .map(|x| x.abs())
            .fold(0.0, f64::max)
    }

    pub fn add(&self, rhs: &Translation) -> Translation {
        Translation {
            beta: self.beta.iter().zip(&rhs.beta).map(|(a, b)| a + b).collect(),
            b: self.b.iter().zip(&rhs.b).map(|(a, b)| a + b).collect(),
            bmat: self.bmat.iter().zip(&rhs.bmat).map(|(a, b)| a + b).collect(),
        }
    }
}

/// Reference map in `U(alpha, A)`: angle part `theta + 2 pi alpha + O(r)`,
/// action part `A r + O(r^2)`.
#[derive(Clone, Debug)]
pub struct NormalForm {
    map: FourierTaylorMap,
}

pub const MEMBERSHIP_TOLERANCE: f64 = 1e-11;

impl NormalForm {
    /// Verify membership in `U(alpha, A)`.
    pub fn new(map: FourierTaylorMap, sd: &SpectralData) -> Result<Self> {
        let defect = Self::membership_defect(&map, sd);
        if defect > MEMBERSHIP_TOLERANCE {
            return Err(Error::DomainGuard(format!(
                "map is not in U(alpha, A): defect {defect:.3e}"
            )));
        }
        Ok(NormalForm { map })
    }

    /// Overwrite the three defect slots (constant rotation `2 pi alpha`, zero
    /// angle and action offsets, constant linear part `A`); returns the
    /// defect magnitude that was projected away.
    pub fn project(map: &FourierTaylorMap, sd: &SpectralData) -> (NormalForm, f64) {
        let n = map.n();
        let m = map.m();
        let k = map.cutoff();
        let mut out = map.clone();
        let defect = Self::membership_defect(map, sd);
        out.rotation_mut().copy_from_slice(&sd.rotation_step());
        out.theta_jet_mut()
            .set_term(0, FourierSeries::zeros(n, k, ValueShape::Vector(n)));
        out.r_jet_mut()
            .set_term(0, FourierSeries::zeros(n, k, ValueShape::Vector(m)));
        let table = out.table();
        for j in 0..m {
            let idx = table.linear_index(j);
            let col: Vec<f64> = (0..m).map(|i| sd.normal_matrix()[(i, j)]).collect();
            out.r_jet_mut()
                .set_term(idx, FourierSeries::constant(n, k, ValueShape::Vector(m), &col));
        }
        (NormalForm { map: out }, defect)
    }

    /// Max deviation from the membership conditions.
    pub fn membership_defect(map: &FourierTaylorMap, sd: &SpectralData) -> f64 {
        let step = sd.rotation_step();
        let mut defect = map
            .rotation()
            .iter()
            .zip(&step)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        defect = defect.max(map.theta_jet().term(0).weighted_norm(0.0));
        defect = defect.max(map.r_jet().term(0).weighted_norm(0.0));
        let lin = map.linear_matrix();
        let m = map.m();
        let a: Vec<f64> = (0..m * m)
            .map(|i| sd.normal_matrix()[(i / m, i % m)])
            .collect();
        let amat = FourierSeries::constant(map.n(), map.cutoff(), ValueShape::Matrix(m, m), &a);
        defect.max(lin.sub(&amat).unwrap().weighted_norm(0.0))
    }

    /// The trivial element of `U(alpha, A)`.
    pub fn trivial(sd: &SpectralData, degree: usize, cutoff: usize) -> NormalForm {
        let map = FourierTaylorMap::identity(sd.n(), sd.m(), degree, cutoff);
        NormalForm::project(&map, sd).0
    }

    pub fn map(&self) -> &FourierTaylorMap {
        &self.map
    }

    pub fn into_map(self) -> FourierTaylorMap {
        self.map
    }

    /// Torsion coefficient `p_1` as an `n x m` matrix series.
    pub fn torsion(&self) -> FourierSeries {
        self.map.torsion_matrix()
    }
}

/// Inverse of the torus diffeomorphism `id + u` by the contraction
/// `x -> y - u(x)` on the grid; returns `w` with `(id + u)(id + w) = id`.
pub fn invert_torus_diffeo(u: &FourierSeries, widths: Widths) -> Result<FourierSeries> {
    let n = u.dim();
    let bound = widths.sigma / n as f64;
    let norm = u.weighted_norm(widths.s);
    if norm >= bound {
        return Err(Error::DomainGuard(format!(
            "|u|_s = {norm:.3e} >= sigma/n = {bound:.3e}: contraction not guaranteed"
        )));
    }
    let k = u.cutoff();
    let size = dealias_grid_size(k);
    let npts = size.pow(n as u32);
    let step = 2.0 * std::f64::consts::PI / size as f64;
    let mut target = vec![0.0f64; npts * n];
    for p in 0..npts {
        let mut idx = p;
        for a in (0..n).rev() {
            target[p * n + a] = (idx % size) as f64 * step;
            idx /= size;
        }
    }
    let mut x = target.clone();
    let mut converged = false;
    let mut delta = f64::INFINITY;
    for _ in 0..50 {
        let vals = eval_series_at_points(&[u], &x, n);
        delta = 0.0;
        for p in 0..npts {
            for a in 0..n {
                let next = target[p * n + a] - vals[p * n + a];
                delta = delta.max((next - x[p * n + a]).abs());
                x[p * n + a] = next;
            }
        }
        if delta <= 1e-14 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            what: "torus diffeomorphism inversion".into(),
            iterations: 50,
            residual: delta,
        });
    }
    let mut grid = GridData::zeros(n, size, ValueShape::Vector(n));
    for p in 0..npts {
        for a in 0..n {
            grid.values[p * n + a] = Complex64::new(x[p * n + a] - target[p * n + a], 0.0);
        }
    }
    FourierSeries::from_grid(&grid, k, u.reality())
}

/// Fiber-affine inverse of `G`:
/// `(phi^{-1}, R1^{-1}.phi^{-1} (r - R0.phi^{-1}))`.
pub fn invert_conjugacy(g: &Conjugacy, degree: usize, widths: Widths) -> Result<FourierTaylorMap> {
    let n = g.n();
    let m = g.m();
    let k = g.cutoff();
    let w = invert_torus_diffeo(g.phi_periodic(), widths)?;
    let size = dealias_grid_size(k);
    let npts = size.pow(n as u32);
    let step = 2.0 * std::f64::consts::PI / size as f64;
    // points phi^{-1}(theta_g) = theta_g + w(theta_g)
    let wgrid = w.to_grid(size)?;
    let mut pts = vec![0.0f64; npts * n];
    for p in 0..npts {
        let mut idx = p;
        for a in (0..n).rev() {
            pts[p * n + a] = (idx % size) as f64 * step;
            idx /= size;
        }
        for a in 0..n {
            pts[p * n + a] += wgrid.entry(p, a, 0).re;
        }
    }
    let vals = eval_series_at_points(&[g.r0(), g.r1()], &pts, n);
    let stride = m + m * m;
    let mut s_grid = GridData::zeros(n, size, ValueShape::Matrix(m, m));
    let mut t_grid = GridData::zeros(n, size, ValueShape::Vector(m));
    let mut work = vec![Complex64::new(0.0, 0.0); m * m];
    for p in 0..npts {
        let r0v = &vals[p * stride..p * stride + m];
        let r1v = &vals[p * stride + m..(p + 1) * stride];
        for (i, z) in work.iter_mut().enumerate() {
            *z = Complex64::new(r1v[i], 0.0);
        }
        let inv = crate::jet::invert_dense(&mut work, m).map_err(|_| Error::SingularMatrix {
            context: "R1 along phi^{-1}".into(),
            magnitude: 0.0,
        })?;
        s_grid.point_slice_mut(p).copy_from_slice(&inv);
        for i in 0..m {
            let mut acc = Complex64::new(0.0, 0.0);
            for l in 0..m {
                acc -= inv[i * m + l] * Complex64::new(r0v[l], 0.0);
            }
            *t_grid.entry_mut(p, i, 0) = acc;
        }
    }
    let s_series = FourierSeries::from_grid(&s_grid, k, true)?;
    let t_series = FourierSeries::from_grid(&t_grid, k, true)?;
    let mut map = FourierTaylorMap::identity(n, m, degree, k);
    map.theta_jet_mut().set_term(0, w);
    map.r_jet_mut().set_term(0, t_series);
    let table = map.table();
    for j in 0..m {
        let idx = table.linear_index(j);
        let mut parts = Vec::with_capacity(m);
        for i in 0..m {
            parts.push(s_series.component(i, j));
        }
        map.r_jet_mut()
            .set_term(idx, FourierSeries::from_components(ValueShape::Vector(m), &parts)?);
    }
    Ok(map)
}

/// The normal-form operator `phi(G, P, lambda) = T_lambda . G . P . G^{-1}`.
pub fn normal_form_operator(
    g: &Conjugacy,
    p: &NormalForm,
    lam: &Translation,
    widths: Widths,
    opts: &CompositionOptions,
) -> Result<FourierTaylorMap> {
    g.check_near_identity(widths)?;
    let degree = p.map().degree();
    let ginv = invert_conjugacy(g, degree, widths)?;
    let gmap = g.to_map(degree);
    let pginv = p.map().compose(&ginv, opts)?;
    let gpginv = gmap.compose(&pginv, opts)?;
    gpginv.left_translate(&lam.beta, &lam.b, &lam.bmat)
}

/// Right-hand-side jets for the linearized equations plus the reusable
/// factor data for counter-term probes. Produced either from the pulled-back
/// residual `E = (G' . P)^{-1} M^{-1} (Q - phi(G, P, lambda)) . G` (which
/// carries the full jets, needed to identify `delta P`) or directly from the
/// defect of `W = G^{-1} . T^{-1} . Q . G` (the two agree to first order; the
/// defect vanishes exactly at the solution).
pub struct ResidualJets {
    /// theta component, order 0
    pub q0dot: FourierSeries,
    /// action component, order 0
    pub big_q0dot: FourierSeries,
    /// action component, order 1 as a matrix
    pub big_q1dot: FourierSeries,
    /// full pulled-back jets (theta rows then action rows), E-route only
    pub full: Option<Jet>,
    pub context: ProbeContext,
}

/// Grid-resident factors of the linearized equation shared by all
/// counter-term probes of one Newton step.
pub struct ProbeContext {
    pub n: usize,
    pub m: usize,
    pub cutoff: usize,
    pub size: usize,
    pub table: Arc<MultiIndexTable>,
    /// `(G' . P)` as a grid jet, rows/cols `n + m`
    pub jac_grid: GridJet,
    /// action jets of `G . P` on the grid (rows m)
    pub gp_r_grid: GridJet,
    /// `diag(I, (I+B)^{-1})`
    pub minv: Vec<Complex64>,
}

/// Shared factor data for counter-term probes at a state `(G, P, lambda)`.
fn build_probe_context(
    g: &Conjugacy,
    p: &NormalForm,
    lam: &Translation,
    opts: &CompositionOptions,
) -> Result<ProbeContext> {
    let n = g.n();
    let m = g.m();
    let k = g.cutoff();
    let degree = p.map().degree();
    let gmap = g.to_map(degree);
    let jac = gmap.jacobian()?;
    let jac_along_p = evaluate_jets_along(&[&jac], p.map(), opts)?
        .into_iter()
        .next()
        .unwrap();
    let size = opts.grid_size(k);
    let jac_grid = jac_along_p.to_grid_jet(size)?;

    // M^{-1} = diag(I, (I+B)^{-1})
    let nm = n + m;
    let mut ipb = vec![Complex64::new(0.0, 0.0); m * m];
    for i in 0..m {
        for j in 0..m {
            ipb[i * m + j] =
                Complex64::new(lam.bmat[i * m + j] + if i == j { 1.0 } else { 0.0 }, 0.0);
        }
    }
    let ipb_inv = crate::jet::invert_dense(&mut ipb, m).map_err(|_| Error::SingularMatrix {
        context: "I + B".into(),
        magnitude: 0.0,
    })?;
    let mut minv = vec![Complex64::new(0.0, 0.0); nm * nm];
    for a in 0..n {
        minv[a * nm + a] = Complex64::new(1.0, 0.0);
    }
    for i in 0..m {
        for j in 0..m {
            minv[(n + i) * nm + (n + j)] = ipb_inv[i * m + j];
        }
    }

    let gp = gmap.compose(p.map(), opts)?;
    let gp_r_grid = gp.r_jet().to_grid_jet(size)?;
    Ok(ProbeContext {
        n,
        m,
        cutoff: k,
        size,
        table: p.map().table(),
        jac_grid,
        gp_r_grid,
        minv,
    })
}

/// E-route residual: pull `Q - phi(G, P, lambda)` back along `G` and through
/// `(G' . P)^{-1} M^{-1}`; carries the full jets.
pub fn pulled_back_residual(
    q: &FourierTaylorMap,
    g: &Conjugacy,
    p: &NormalForm,
    lam: &Translation,
    phi_value: &FourierTaylorMap,
    opts: &CompositionOptions,
) -> Result<ResidualJets> {
    let n = g.n();
    let m = g.m();
    let k = g.cutoff();
    let degree = p.map().degree();
    let gmap = g.to_map(degree);
    let context = build_probe_context(g, p, lam, opts)?;

    // residual jets of Q - phi(G, P, lambda), pulled back along G
    let (dtheta, dr) = q.sub_as_jets(phi_value)?;
    let pulled = evaluate_jets_along(&[&dtheta, &dr], &gmap, opts)?;

    // stack into an (n+m) x 1 grid jet and solve against (G' . P)
    let table = context.table.clone();
    let size = context.size;
    let nm = n + m;
    let gt = pulled[0].to_grid_jet(size)?;
    let gr = pulled[1].to_grid_jet(size)?;
    let mut rhs = GridJet::zeros(n, size, nm, 1, table.clone());
    for pidx in 0..rhs.points() {
        for t in 0..table.len() {
            let (head, tail) = {
                let src_t = gt.point_term(pidx, t).to_vec();
                let src_r = gr.point_term(pidx, t).to_vec();
                (src_t, src_r)
            };
            let dst = rhs.point_term_mut(pidx, t);
            dst[..n].copy_from_slice(&head);
            dst[n..].copy_from_slice(&tail);
        }
    }
    let rhs = rhs.left_mul_const(&context.minv, nm);
    let e_grid = context.jac_grid.solve(&rhs)?;
    let full = e_grid.to_jet(k, true)?;

    let (q0dot, big_q0dot, big_q1dot) = split_pulled_jets(&full, n, m)?;
    Ok(ResidualJets {
        q0dot,
        big_q0dot,
        big_q1dot,
        full: Some(full),
        context,
    })
}

/// Defect route: compute `W = G^{-1} . T_lambda^{-1} . Q . G` and read the
/// residual directly off its membership defect against `U(alpha, A)`. Exact
/// at the solution, and the natural quantity the reference-map projection
/// feeds back. Returns `W` for reuse by the projection update.
pub fn defect_residual(
    q: &FourierTaylorMap,
    g: &Conjugacy,
    p: &NormalForm,
    lam: &Translation,
    widths: Widths,
    opts: &CompositionOptions,
) -> Result<(FourierTaylorMap, ResidualJets)> {
    let n = g.n();
    let m = g.m();
    let degree = p.map().degree();
    let context = build_probe_context(g, p, lam, opts)?;
    let w = conjugated_map(q, g, lam, degree, widths, opts)?;
    let (dtheta, dr) = w.sub_as_jets(p.map())?;
    let q0dot = dtheta.term(0).clone();
    let big_q0dot = dr.term(0).clone();
    let table = w.table();
    let mut flat = Vec::with_capacity(m * m);
    for i in 0..m {
        for j in 0..m {
            flat.push(dr.term(table.linear_index(j)).component(i, 0));
        }
    }
    let big_q1dot = FourierSeries::from_components(ValueShape::Matrix(m, m), &flat)?;
    let _ = n;
    Ok((
        w,
        ResidualJets {
            q0dot,
            big_q0dot,
            big_q1dot,
            full: None,
            context,
        },
    ))
}

/// `W = G^{-1} . T_lambda^{-1} . Q . G`.
pub fn conjugated_map(
    q: &FourierTaylorMap,
    g: &Conjugacy,
    lam: &Translation,
    degree: usize,
    widths: Widths,
    opts: &CompositionOptions,
) -> Result<FourierTaylorMap> {
    let ginv = invert_conjugacy(g, degree, widths)?;
    let gmap = g.to_map(degree);
    let qg = q.compose(&gmap, opts)?;
    let tinv_qg = qg.left_translate_inverse(&lam.beta, &lam.b, &lam.bmat)?;
    ginv.compose(&tinv_qg, opts)
}

/// Split a stacked `(n+m)`-vector jet into the three linearized-equation
/// slots: theta order 0, action order 0, action order 1 (as a matrix).
pub fn split_pulled_jets(
    full: &Jet,
    n: usize,
    m: usize,
) -> Result<(FourierSeries, FourierSeries, FourierSeries)> {
    let term0 = full.term(0);
    let mut tparts = Vec::with_capacity(n);
    for a in 0..n {
        tparts.push(term0.component(a, 0));
    }
    let q0dot = FourierSeries::from_components(ValueShape::Vector(n), &tparts)?;
    let mut rparts = Vec::with_capacity(m);
    for i in 0..m {
        rparts.push(term0.component(n + i, 0));
    }
    let big_q0dot = FourierSeries::from_components(ValueShape::Vector(m), &rparts)?;
    let mut flat = Vec::with_capacity(m * m);
    for i in 0..m {
        for j in 0..m {
            let idx = full.table.linear_index(j);
            flat.push(full.term(idx).component(n + i, 0));
        }
    }
    let big_q1dot = FourierSeries::from_components(ValueShape::Matrix(m, m), &flat)?;
    Ok((q0dot, big_q0dot, big_q1dot))
}

impl ProbeContext {
    /// Jets of `(G'.P)^{-1} M^{-1} (T_{delta lambda} . G . P)` for a probe
    /// direction `delta lambda = (beta, b, B)`: the translation term entering
    /// the linearized equations with a minus sign.
    pub fn translation_term(
        &self,
        beta: &[f64],
        b: &[f64],
        bmat: &[f64],
    ) -> Result<(FourierSeries, FourierSeries, FourierSeries)> {
        let (bt, bh, bm, _) = self.translation_term_full(beta, b, bmat)?;
        Ok((bt, bh, bm))
    }

    /// As [`ProbeContext::translation_term`], also returning the full stacked
    /// jet (needed to identify `delta P`).
    pub fn translation_term_full(
        &self,
        beta: &[f64],
        b: &[f64],
        bmat: &[f64],
    ) -> Result<(FourierSeries, FourierSeries, FourierSeries, Jet)> {
        let (n, m) = (self.n, self.m);
        let nm = n + m;
        let nterms = self.table.len();
        let mut rhs = GridJet::zeros(n, self.size, nm, 1, self.table.clone());
        for p in 0..rhs.points() {
            for t in 0..nterms {
                let mut rrow = vec![Complex64::new(0.0, 0.0); m];
                {
                    let gp_r = self.gp_r_grid.point_term(p, t);
                    for i in 0..m {
                        let mut acc = Complex64::new(0.0, 0.0);
                        for l in 0..m {
                            acc += Complex64::new(bmat[i * m + l], 0.0) * gp_r[l];
                        }
                        if t == 0 {
                            acc += Complex64::new(b[i], 0.0);
                        }
                        rrow[i] = acc;
                    }
                }
                let dst = rhs.point_term_mut(p, t);
                if t == 0 {
                    for a in 0..n {
                        dst[a] = Complex64::new(beta[a], 0.0);
                    }
                }
                dst[n..].copy_from_slice(&rrow);
            }
        }
        let rhs = rhs.left_mul_const(&self.minv, nm);
        let sol = self.jac_grid.solve(&rhs)?;
        let jet = sol.to_jet(self.cutoff, true)?;
        let (bt, bh, bm) = split_pulled_jets(&jet, n, m)?;
        Ok((bt, bh, bm, jet))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohomology::SpectralData;
    use nalgebra::dmatrix;

    const GOLDEN: f64 = 0.6180339887498949;

    fn small_conjugacy(k: usize) -> Conjugacy {
        let mut u = FourierSeries::zeros(1, k, ValueShape::Vector(1));
        u.add_trig(&[1], 0, 0.008, -0.004).unwrap();
        u.add_trig(&[2], 0, 0.002, 0.001).unwrap();
        let mut r0 = FourierSeries::zeros(1, k, ValueShape::Vector(1));
        r0.add_trig(&[1], 0, 0.005, 0.002).unwrap();
        let mut r1 = FourierSeries::identity_matrix(1, k, 1);
        r1.add_trig(&[1], 0, 0.006, 0.0).unwrap();
        Conjugacy::new(u, r0, r1).unwrap()
    }

    #[test]
    fn invert_torus_diffeo_trivial_and_sin() {
        let k = 32;
        let zero = FourierSeries::zeros(1, k, ValueShape::Vector(1));
        let w = invert_torus_diffeo(&zero, Widths::default()).unwrap();
        assert!(w.max_coeff() < 1e-15);

        let mut u = FourierSeries::zeros(1, k, ValueShape::Vector(1));
        u.add_trig(&[1], 0, 0.0, 0.05).unwrap(); // 0.05 sin(theta)
        let w = invert_torus_diffeo(&u, Widths::default()).unwrap();
        // phi^{-1} . phi = id on a 256-point grid
        let mut worst = 0.0f64;
        for j in 0..256 {
            let t = 2.0 * std::f64::consts::PI * j as f64 / 256.0;
            let phi = t + u.eval_real(&[t])[0];
            let back = phi + w.eval_real(&[phi])[0];
            worst = worst.max((back - t).abs());
        }
        assert!(worst < 1e-12, "round trip {worst}");
        // inverse displacement is no larger than the forward one at grid
        // level; the true sup of |u| is approximated on a fine grid
        let wsup = w.to_grid(130).unwrap().sup_norm();
        let usup = u.to_grid(8192).unwrap().sup_norm();
        assert!(wsup <= usup + 1e-8, "sup |w| = {wsup} vs sup |u| = {usup}");
    }

    #[test]
    fn invert_torus_diffeo_guard() {
        let k = 8;
        let mut u = FourierSeries::zeros(1, k, ValueShape::Vector(1));
        u.add_trig(&[1], 0, 0.5, 0.0).unwrap();
        assert!(matches!(
            invert_torus_diffeo(&u, Widths::default()),
            Err(Error::DomainGuard(_))
        ));
    }

    #[test]
    fn conjugacy_inverse_two_sided() {
        let k = 24;
        let g = small_conjugacy(k);
        let ginv = invert_conjugacy(&g, 2, Widths::default()).unwrap();
        let gmap = g.to_map(2);
        let opts = CompositionOptions::default();
        let gginv = gmap.compose(&ginv, &opts).unwrap();
        let id = FourierTaylorMap::identity(1, 1, 2, k);
        let (dt, dr) = gginv.sub_as_jets(&id).unwrap();
        assert!(dt.max_coeff() < 1e-11, "G.G^-1 theta: {}", dt.max_coeff());
        assert!(dr.max_coeff() < 1e-11, "G.G^-1 action: {}", dr.max_coeff());
        let ginvg = ginv.compose(&gmap, &opts).unwrap();
        let (dt, dr) = ginvg.sub_as_jets(&id).unwrap();
        assert!(dt.max_coeff() < 1e-11);
        assert!(dr.max_coeff() < 1e-11);
    }

    #[test]
    fn pure_scaling_inverts_exactly() {
        let k = 8;
        let u = FourierSeries::zeros(1, k, ValueShape::Vector(1));
        let r0 = FourierSeries::zeros(1, k, ValueShape::Vector(1));
        let r1 = FourierSeries::constant(1, k, ValueShape::Matrix(1, 1), &[2.5]);
        let g = Conjugacy::new(u, r0, r1).unwrap();
        let ginv = invert_conjugacy(&g, 2, Widths::default()).unwrap();
        let lin = ginv.r_jet().term(ginv.table().linear_index(0)).clone();
        assert!((lin.coeff(&[0], 0).re - 0.4).abs() < 1e-13);
    }

    #[test]
    fn translation_constraints_enforced() {
        let a = dmatrix![2.0, 0.0; 0.0, 3.0];
        // b must lie in ker(A - I) = {0} here
        assert!(Translation::new(vec![0.1, 0.0], vec![0.5, 0.0], vec![0.0; 4], &a).is_err());
        // diagonal B commutes with diagonal A
        let t = Translation::new(
            vec![0.1, 0.2],
            vec![0.0, 0.0],
            vec![0.3, 0.0, 0.0, -0.2],
            &a,
        )
        .unwrap();
        assert!(t.norm() > 0.0);
        // off-diagonal B does not commute
        assert!(Translation::new(
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![0.0, 0.4, 0.0, 0.0],
            &a
        )
        .is_err());
    }

    #[test]
    fn operator_at_base_point_is_p() {
        let k = 16;
        let sd = SpectralData::new(vec![GOLDEN], dmatrix![2.0]).unwrap();
        let mut pmap = FourierTaylorMap::identity(1, 1, 2, k);
        pmap.rotation_mut()[0] = 2.0 * std::f64::consts::PI * GOLDEN;
        let lin = pmap.table().linear_index(0);
        pmap.r_jet_mut().set_term(
            lin,
            FourierSeries::constant(1, k, ValueShape::Vector(1), &[2.0]),
        );
        let mut p1 = FourierSeries::zeros(1, k, ValueShape::Vector(1));
        p1.add_trig(&[0], 0, 1.0, 0.0).unwrap();
        p1.add_trig(&[1], 0, 0.2, 0.0).unwrap();
        pmap.theta_jet_mut().set_term(lin, p1);
        let p = NormalForm::new(pmap.clone(), &sd).unwrap();
        let g = Conjugacy::identity(1, 1, k);
        let lam = Translation::zero(1, 1);
        let phi =
            normal_form_operator(&g, &p, &lam, Widths::default(), &CompositionOptions::default())
                .unwrap();
        let (dt, dr) = phi.sub_as_jets(&pmap).unwrap();
        assert!(dt.max_coeff() < 1e-12);
        assert!(dr.max_coeff() < 1e-12);

        // left translation only shifts the rotation constant
        let lam2 = Translation::new(vec![0.3], vec![0.0], vec![0.0], sd.normal_matrix()).unwrap();
        let phi2 =
            normal_form_operator(&g, &p, &lam2, Widths::default(), &CompositionOptions::default())
                .unwrap();
        assert!((phi2.rotation()[0] - (pmap.rotation()[0] + 0.3)).abs() < 1e-14);
    }

    #[test]
    fn operator_matches_pointwise_composition() {
        let k = 24;
        let sd = SpectralData::new(vec![GOLDEN], dmatrix![2.0]).unwrap();
        let mut pmap = FourierTaylorMap::identity(1, 1, 2, k);
        pmap.rotation_mut()[0] = 2.0 * std::f64::consts::PI * GOLDEN;
        let lin = pmap.table().linear_index(0);
        pmap.r_jet_mut().set_term(
            lin,
            FourierSeries::constant(1, k, ValueShape::Vector(1), &[2.0]),
        );
        pmap.theta_jet_mut().set_term(
            lin,
            FourierSeries::constant(1, k, ValueShape::Vector(1), &[1.0]),
        );
        let p = NormalForm::new(pmap, &sd).unwrap();
        let g = small_conjugacy(k);
        let lam = Translation::zero(1, 1);
        let phi =
            normal_form_operator(&g, &p, &lam, Widths::default(), &CompositionOptions::default())
                .unwrap();
        let ginv = invert_conjugacy(&g, 2, Widths::default()).unwrap();
        let gmap = g.to_map(2);
        // agreement is exact on the zero section and O(r^3) off it (the jets
        // are a degree-2 germ)
        for j in 0..16 {
            let t = [2.0 * std::f64::consts::PI * j as f64 / 16.0];
            for (r, tol) in [([0.0], 1e-11), ([1e-4], 1e-11), ([0.01], 1e-6)] {
                let (x1, y1) = ginv.eval(&t, &r);
                let (x2, y2) = p.map().eval(&x1, &y1);
                let (x3, y3) = gmap.eval(&x2, &y2);
                let (xc, yc) = phi.eval(&t, &r);
                assert!(
                    (x3[0] - xc[0]).abs() < tol,
                    "theta mismatch {:.3e} at j={j} r={}",
                    (x3[0] - xc[0]).abs(),
                    r[0]
                );
                assert!((y3[0] - yc[0]).abs() < tol);
            }
        }
    }

    #[test]
    fn pulled_back_zero_residual_at_solution() {
        let k = 16;
        let sd = SpectralData::new(vec![GOLDEN], dmatrix![2.0]).unwrap();
        let p = NormalForm::trivial(&sd, 2, k);
        let g = small_conjugacy(k);
        let lam = Translation::zero(1, 1);
        let widths = Widths::default();
        let opts = CompositionOptions::default();
        let phi = normal_form_operator(&g, &p, &lam, widths, &opts).unwrap();
        let pb = pulled_back_residual(&phi, &g, &p, &lam, &phi, &opts).unwrap();
        assert!(pb.q0dot.max_coeff() < 1e-12);
        assert!(pb.big_q0dot.max_coeff() < 1e-12);
        assert!(pb.big_q1dot.max_coeff() < 1e-12);
    }

    #[test]
    fn pulled_back_additive_perturbation_at_identity() {
        let k = 16;
        let sd = SpectralData::new(vec![GOLDEN], dmatrix![2.0]).unwrap();
        let p = NormalForm::trivial(&sd, 2, k);
        let g = Conjugacy::identity(1, 1, k);
        let lam = Translation::zero(1, 1);
        let widths = Widths::default();
        let opts = CompositionOptions::default();
        let phi = normal_form_operator(&g, &p, &lam, widths, &opts).unwrap();
        let eps = 1e-3;
        let mut q = phi.clone();
        let mut pert = q.theta_jet().term(0).clone();
        pert.add_trig(&[1], 0, eps, 0.0).unwrap();
        q.theta_jet_mut().set_term(0, pert);
        let pb = pulled_back_residual(&q, &g, &p, &lam, &phi, &opts).unwrap();
        // q0dot = eps cos theta, action slots zero
        assert!((pb.q0dot.coeff(&[1], 0).re - eps / 2.0).abs() < 1e-13);
        assert!(pb.big_q0dot.max_coeff() < 1e-13);
        assert!(pb.big_q1dot.max_coeff() < 1e-13);
    }

    #[test]
    fn origin_rotation_normalizes_average() {
        let k = 12;
        let g = small_conjugacy(k);
        let avg = g.phi_periodic().average()[0].re;
        let rotated = g.rotate_origin(&[-avg]);
        assert!(rotated.phi_periodic().average()[0].re.abs() < 1e-13);
    }
}
