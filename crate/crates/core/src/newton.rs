//! Quadratically convergent solver for `Q = T_lambda . G . P . G^{-1}`.
//!
//! Each step pulls the residual back along the current conjugacy, solves the
//! three linearized difference equations in the order the data dependencies
//! dictate (action offset, then angle, then linear part), determines the
//! counter-term increment by probing the affine map from `delta lambda` to
//! the collected solvability averages, and pushes the tangent solution back
//! through `delta G = G' . Gdot`. The reference map is updated by projection:
//! `P <- project(G^{-1} . T_lambda^{-1} . Q . G)`, so the projected defect
//! feeds the next residual.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::Serialize;

use crate::cohomology::{
    solve_normal, solve_reducibility, solve_tangential, SpectralData,
};
use crate::conjugacy::{
    conjugated_map, defect_residual, normal_form_operator, Conjugacy, NormalForm, ResidualJets,
    Translation, Widths,
};
use crate::error::{Error, Result};
use crate::fourier::{FourierSeries, ValueShape};
use crate::jet::Jet;
use crate::map::{evaluate_jets_along, CompositionOptions, FourierTaylorMap};

#[derive(Clone, Copy, Debug)]
pub struct NewtonOptions {
    pub max_iter: usize,
    pub residual_tol: f64,
    /// Abort when the residual grows by this factor over the best seen.
    pub divergence_guard: f64,
    /// Bound on `|G - id|` during the iteration.
    pub trust_radius: f64,
    pub widths: Widths,
    pub composition: CompositionOptions,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            max_iter: 30,
            residual_tol: 1e-12,
            divergence_guard: 1e3,
            trust_radius: 0.5,
            widths: Widths::default(),
            composition: CompositionOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub residual: f64,
    pub dg_norm: f64,
    pub dlambda_norm: f64,
    pub counterterm_cond: f64,
}

#[derive(Clone, Debug)]
pub struct NormalFormResult {
    pub g: Conjugacy,
    pub p: NormalForm,
    pub lambda: Translation,
    pub iterations: Vec<IterationRecord>,
    pub converged: bool,
    pub residual: f64,
}

impl NormalFormResult {
    /// Reparametrize so the periodic part of `phi` has zero average; an exact
    /// conjugacy-class-preserving rotation of the torus origin.
    pub fn normalize_origin(&mut self, sd: &SpectralData) {
        let n = self.g.n();
        let avg = self.g.phi_periodic().average();
        let c: Vec<f64> = (0..n).map(|a| -avg[a].re).collect();
        if c.iter().all(|x| x.abs() < 1e-300) {
            return;
        }
        self.g = self.g.rotate_origin(&c);
        let shifted = self.p.map().shift_angles(&c);
        self.p = NormalForm::project(&shifted, sd).0;
    }
}

/// Current iterate of the solver.
#[derive(Clone, Debug)]
pub struct State {
    pub g: Conjugacy,
    pub p: NormalForm,
    pub lambda: Translation,
}

impl State {
    pub fn initial(p0: &NormalForm, cutoff: usize) -> State {
        let n = p0.map().n();
        let m = p0.map().m();
        State {
            g: Conjugacy::identity(n, m, cutoff),
            p: p0.clone(),
            lambda: Translation::zero(n, m),
        }
    }
}

/// Basis of the counter-term space `Lambda`, parametrized so the collected
/// averages respond with `-I` at the trivial state: `beta` directions, then
/// `ker(A - I)` directions for `b`, then the commutant directions for `B`
/// scaled by `A^{-1}` (the probe enters the equations through `B . A`).
pub struct LambdaBasis {
    pub n: usize,
    pub m: usize,
    pub unit_positions: Vec<usize>,
    directions: Vec<Translation>,
}

impl LambdaBasis {
    pub fn new(sd: &SpectralData) -> Result<LambdaBasis> {
        if !sd.is_real_spectrum() {
            return Err(Error::ComplexSpectrumUnsupported);
        }
        if !sd.is_simple() {
            return Err(Error::RepeatedEigenvalues);
        }
        let n = sd.n();
        let m = sd.m();
        let mut directions = Vec::new();
        for a in 0..n {
            let mut beta = vec![0.0; n];
            beta[a] = 1.0;
            directions.push(Translation {
                beta,
                b: vec![0.0; m],
                bmat: vec![0.0; m * m],
            });
        }
        let unit_positions: Vec<usize> = (0..m).filter(|&j| sd.unit_eigen()[j]).collect();
        for &j in &unit_positions {
            // real eigenvector for the unit eigenvalue
            let mut b = vec![0.0; m];
            for i in 0..m {
                b[i] = sd.transition()[(i, j)].re;
            }
            directions.push(Translation {
                beta: vec![0.0; n],
                b,
                bmat: vec![0.0; m * m],
            });
        }
        for j in 0..m {
            // S E_jj S^{-1} A^{-1}
            let mut bmat = vec![0.0; m * m];
            let aj = sd.eigenvalues()[j];
            for r in 0..m {
                for c in 0..m {
                    let v = sd.transition()[(r, j)] * sd.transition_inverse()[(j, c)] / aj;
                    bmat[r * m + c] = v.re;
                }
            }
            directions.push(Translation {
                beta: vec![0.0; n],
                b: vec![0.0; m],
                bmat,
            });
        }
        Ok(LambdaBasis {
            n,
            m,
            unit_positions,
            directions,
        })
    }

    pub fn dim(&self) -> usize {
        self.directions.len()
    }

    pub fn realize(&self, coords: &[f64]) -> Translation {
        let mut out = Translation::zero(self.n, self.m);
        for (c, dir) in coords.iter().zip(&self.directions) {
            out = out.add(&Translation {
                beta: dir.beta.iter().map(|x| x * c).collect(),
                b: dir.b.iter().map(|x| x * c).collect(),
                bmat: dir.bmat.iter().map(|x| x * c).collect(),
            });
        }
        out
    }

    /// Coordinates of the collected averages: `beta_bar`, then the
    /// `ker(A-I)` components of `b_bar`, then the eigen-diagonal of `B_bar`.
    pub fn obstruction_coords(
        &self,
        sd: &SpectralData,
        beta_bar: &[Complex64],
        b_bar: &[f64],
        bmat_bar: &[f64],
    ) -> Vec<f64> {
        let m = self.m;
        let mut out = Vec::with_capacity(self.dim());
        for z in beta_bar {
            out.push(z.re);
        }
        // S^{-1} b_bar at the unit positions
        for &j in &self.unit_positions {
            let mut acc = Complex64::new(0.0, 0.0);
            for l in 0..m {
                acc += sd.transition_inverse()[(j, l)] * Complex64::new(b_bar[l], 0.0);
            }
            out.push(acc.re);
        }
        // diag(S^{-1} B_bar S)
        for j in 0..m {
            let mut acc = Complex64::new(0.0, 0.0);
            for r in 0..m {
                for c in 0..m {
                    acc += sd.transition_inverse()[(j, r)]
                        * Complex64::new(bmat_bar[r * m + c], 0.0)
                        * sd.transition()[(c, j)];
                }
            }
            out.push(acc.re);
        }
        out
    }
}

/// Solution of the linearized equation at one state for one right-hand side.
pub struct LinearSolution {
    pub phi_dot: FourierSeries,
    pub r0_dot: FourierSeries,
    pub r1_dot: FourierSeries,
    pub delta_lambda: Translation,
    /// Increment of the conjugacy, `delta G = G' . Gdot`.
    pub delta_u: FourierSeries,
    pub delta_r0: FourierSeries,
    pub delta_r1: FourierSeries,
    /// Increment of the reference map, by identification of the remainders
    /// (only available on the pulled-back route that carries the full jets).
    pub delta_p: Option<(Jet, Jet)>,
    /// Collected averages after applying `delta_lambda` (should vanish).
    pub obstruction_residual: f64,
    /// Condition number of the assembled counter-term system.
    pub counterterm_cond: f64,
}

/// Matrix of the angle derivatives of a vector/matrix series: block column
/// `b` holds `d/d theta_b`.
fn angle_jacobian(series: &FourierSeries, n: usize) -> FourierSeries {
    let rows = series.shape().len();
    let mut parts = Vec::with_capacity(rows * n);
    for comp in 0..rows {
        let scalar = series.component(comp / series.shape().cols(), comp % series.shape().cols());
        for b in 0..n {
            parts.push(scalar.derivative(b));
        }
    }
    FourierSeries::from_components(ValueShape::Matrix(rows, n), &parts).unwrap()
}

/// One pass of the three difference equations for a fixed counter-term probe.
struct PipelineOutput {
    phi_dot: FourierSeries,
    r0_dot: FourierSeries,
    r1_dot: FourierSeries,
    coords: Vec<f64>,
    /// RHS jets actually used (for the delta P identification)
    rhs1: FourierSeries,
    rhs2: FourierSeries,
    rhs3: FourierSeries,
}

#[allow(clippy::too_many_arguments)]
fn run_pipeline(
    pulled: &ResidualJets,
    probe: Option<(&FourierSeries, &FourierSeries, &FourierSeries)>,
    sd: &SpectralData,
    basis: &LambdaBasis,
    p1: &FourierSeries,
    p: &NormalForm,
    rotation_step: &[f64],
) -> Result<PipelineOutput> {
    let rhs2 = match probe {
        Some((_, bh, _)) => pulled.big_q0dot.sub(bh)?,
        None => pulled.big_q0dot.clone(),
    };
    let (r0_dot, b_bar) = solve_normal(&rhs2, sd)?;

    let coupling = p1.multiply(&r0_dot)?;
    let mut rhs1 = pulled.q0dot.add(&coupling)?;
    if let Some((bt, _, _)) = probe {
        rhs1 = rhs1.sub(bt)?;
    }
    let (phi_dot, beta_bar) = solve_tangential(&rhs1, sd)?;

    let r0_jac = angle_jacobian(&r0_dot, sd.n()).shift(rotation_step);
    let transport = r0_jac.multiply(p1)?;
    let curvature = p.map().quadratic_contraction(&r0_dot)?;
    let mut rhs3 = pulled.big_q1dot.sub(&transport)?.add(&curvature)?;
    if let Some((_, _, bm)) = probe {
        rhs3 = rhs3.sub(bm)?;
    }
    let (r1_dot, bmat_bar) = solve_reducibility(&rhs3, sd)?;

    let coords = basis.obstruction_coords(sd, &beta_bar, &b_bar, &bmat_bar);
    Ok(PipelineOutput {
        phi_dot,
        r0_dot,
        r1_dot,
        coords,
        rhs1,
        rhs2,
        rhs3,
    })
}

/// Solve the full linearized equation `phi'(state) . (dG, dP, dlambda) = dQ`
/// given the pulled-back jets of `dQ`.
pub fn linearized_solve(
    state: &State,
    sd: &SpectralData,
    pulled: &ResidualJets,
    opts: &NewtonOptions,
) -> Result<LinearSolution> {
    let basis = LambdaBasis::new(sd)?;
    let p1 = state.p.torsion();
    let rotation_step = sd.rotation_step();

    // affine probing: base run plus one run per Lambda direction
    let base = run_pipeline(pulled, None, sd, &basis, &p1, &state.p, &rotation_step)?;
    let dim = basis.dim();
    let mut mat = DMatrix::<f64>::zeros(dim, dim);
    for i in 0..dim {
        let mut e = vec![0.0; dim];
        e[i] = 1.0;
        let dir = basis.realize(&e);
        let (bt, bh, bm, _) = probe_jets(&pulled.context, &dir)?;
        let out = run_pipeline(
            pulled,
            Some((&bt, &bh, &bm)),
            sd,
            &basis,
            &p1,
            &state.p,
            &rotation_step,
        )?;
        for r in 0..dim {
            mat[(r, i)] = out.coords[r] - base.coords[r];
        }
    }
    let svd = mat.clone().svd(false, false);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let smin = svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min);
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    let rhs = nalgebra::DVector::from_iterator(dim, base.coords.iter().map(|x| -x));
    let coords = mat.lu().solve(&rhs).ok_or_else(|| Error::SingularMatrix {
        context: format!("counter-term system (condition number {cond:.3e})"),
        magnitude: smin,
    })?;
    let delta_lambda = basis.realize(coords.as_slice());

    // final pass with the solved counter-term
    let (bt, bh, bm, t_full) = probe_jets(&pulled.context, &delta_lambda)?;
    let fin = run_pipeline(
        pulled,
        Some((&bt, &bh, &bm)),
        sd,
        &basis,
        &p1,
        &state.p,
        &rotation_step,
    )?;
    let obstruction_residual = fin.coords.iter().map(|x| x.abs()).fold(0.0, f64::max);

    // delta G = G' . Gdot
    let n = sd.n();
    let u_jac = angle_jacobian(state.g.phi_periodic(), n);
    let delta_u = fin.phi_dot.add(&u_jac.multiply(&fin.phi_dot)?)?;
    let r0_jac = angle_jacobian(state.g.r0(), n);
    let delta_r0 = r0_jac
        .multiply(&fin.phi_dot)?
        .add(&state.g.r1().multiply(&fin.r0_dot)?)?;
    let m = sd.m();
    let mut r1_shear_parts = Vec::with_capacity(m * m);
    for i in 0..m {
        for l in 0..m {
            let entry = state.g.r1().component(i, l);
            let mut acc = FourierSeries::zeros(sd.n(), state.g.cutoff(), ValueShape::Scalar);
            for b in 0..n {
                acc = acc.add(&entry.derivative(b).multiply(&fin.phi_dot.component(b, 0))?)?;
            }
            r1_shear_parts.push(acc);
        }
    }
    let r1_shear = FourierSeries::from_components(ValueShape::Matrix(m, m), &r1_shear_parts)?;
    let delta_r1 = r1_shear.add(&state.g.r1().multiply(&fin.r1_dot)?)?;

    // delta P by identification: E - T_hat - (Gdot . P - P' . Gdot) on the
    // complementary jet slots (needs the full pulled-back jets)
    let delta_p = if pulled.full.is_some() {
        Some(identify_delta_p(state, sd, pulled, &t_full, &fin, opts)?)
    } else {
        None
    };

    Ok(LinearSolution {
        phi_dot: fin.phi_dot,
        r0_dot: fin.r0_dot,
        r1_dot: fin.r1_dot,
        delta_lambda,
        delta_u,
        delta_r0,
        delta_r1,
        delta_p,
        obstruction_residual,
        counterterm_cond: cond,
    })
}

/// Translation probe jets plus the full stacked jet.
fn probe_jets(
    ctx: &crate::conjugacy::ProbeContext,
    dir: &Translation,
) -> Result<(FourierSeries, FourierSeries, FourierSeries, Jet)> {
    let (bt, bh, bm, full) = ctx.translation_term_full(&dir.beta, &dir.b, &dir.bmat)?;
    Ok((bt, bh, bm, full))
}

fn identify_delta_p(
    state: &State,
    sd: &SpectralData,
    pulled: &ResidualJets,
    t_full: &Jet,
    fin: &PipelineOutput,
    opts: &NewtonOptions,
) -> Result<(Jet, Jet)> {
    let full = pulled.full.as_ref().expect("full jets required");
    let n = sd.n();
    let m = sd.m();
    let k = state.g.cutoff();
    let table = state.p.map().table();
    let degree = state.p.map().degree();

    // Gdot as jets
    let mut gdot_theta = Jet::zeros(table.clone(), ValueShape::Vector(n), n, k);
    gdot_theta.set_term(0, fin.phi_dot.clone());
    let mut gdot_r = Jet::zeros(table.clone(), ValueShape::Vector(m), n, k);
    gdot_r.set_term(0, fin.r0_dot.clone());
    for j in 0..m {
        let idx = table.linear_index(j);
        let mut parts = Vec::with_capacity(m);
        for i in 0..m {
            parts.push(fin.r1_dot.component(i, j));
        }
        gdot_r.set_term(idx, FourierSeries::from_components(ValueShape::Vector(m), &parts)?);
    }

    // Gdot . P
    let along = evaluate_jets_along(&[&gdot_theta, &gdot_r], state.p.map(), &opts.composition)?;

    // P' . Gdot on the grid
    let pjac = state.p.map().jacobian()?;
    let size = opts.composition.grid_size(k);
    let pjac_grid = pjac.to_grid_jet(size)?;
    let mut gdot_grid =
        crate::jet::GridJet::zeros(n, size, n + m, 1, table.clone());
    let gt = gdot_theta.to_grid_jet(size)?;
    let gr = gdot_r.to_grid_jet(size)?;
    for p in 0..gdot_grid.points() {
        for t in 0..table.len() {
            let (head, tail) = (
                gt.point_term(p, t).to_vec(),
                gr.point_term(p, t).to_vec(),
            );
            let dst = gdot_grid.point_term_mut(p, t);
            dst[..n].copy_from_slice(&head);
            dst[n..].copy_from_slice(&tail);
        }
    }
    let pdot = pjac_grid.matmul(&gdot_grid)?;
    let pdot_jet = pdot.to_jet(k, true)?;

    // delta P = (E - T_hat) - (Gdot . P - P' . Gdot), restricted to the
    // direction space of U(alpha, A): theta orders >= 1, action orders >= 2
    let mut dp_theta = Jet::zeros(table.clone(), ValueShape::Vector(n), n, k);
    let mut dp_r = Jet::zeros(table.clone(), ValueShape::Vector(m), n, k);
    for t in 0..table.len() {
        let order = table.order_of(t);
        // stacked E - T_hat
        let mut theta_parts = Vec::with_capacity(n);
        let mut r_parts = Vec::with_capacity(m);
        for a in 0..n {
            let e = full.term(t).component(a, 0);
            let tt = t_full.term(t).component(a, 0);
            let lhs_g = along[0].term(t).component(a, 0);
            let lhs_p = pdot_jet.term(t).component(a, 0);
            theta_parts.push(e.sub(&tt)?.sub(&lhs_g.sub(&lhs_p)?)?);
        }
        for i in 0..m {
            let e = full.term(t).component(n + i, 0);
            let tt = t_full.term(t).component(n + i, 0);
            let lhs_g = along[1].term(t).component(i, 0);
            let lhs_p = pdot_jet.term(t).component(n + i, 0);
            r_parts.push(e.sub(&tt)?.sub(&lhs_g.sub(&lhs_p)?)?);
        }
        if order >= 1 && table.order_of(t) <= degree {
            dp_theta.set_term(
                t,
                FourierSeries::from_components(ValueShape::Vector(n), &theta_parts)?,
            );
        }
        if order >= 2 {
            dp_r.set_term(t, FourierSeries::from_components(ValueShape::Vector(m), &r_parts)?);
        }
    }
    Ok((dp_theta, dp_r))
}

/// Residual norm: largest flat norm over the jets of `Q - phi(state)`.
pub fn residual_norm(q: &FourierTaylorMap, phi_value: &FourierTaylorMap) -> Result<f64> {
    let (dt, dr) = q.sub_as_jets(phi_value)?;
    Ok(dt.weighted_norm(0.0).max(dr.weighted_norm(0.0)))
}

pub struct StepOutcome {
    pub state: State,
    pub record: IterationRecord,
}

/// One Newton step from `state` toward `Q`.
pub fn newton_step(
    q: &FourierTaylorMap,
    state: &State,
    sd: &SpectralData,
    opts: &NewtonOptions,
    iter: usize,
) -> Result<StepOutcome> {
    let phi_value = normal_form_operator(&state.g, &state.p, &state.lambda, opts.widths, &opts.composition)?;
    let residual = residual_norm(q, &phi_value)?;
    let pulled = pulled_back_residual(
        q,
        &state.g,
        &state.p,
        &state.lambda,
        &phi_value,
        &opts.composition,
    )?;
    let lin = linearized_solve(state, sd, &pulled, opts)?;

    let g_new = state
        .g
        .add_increment(&lin.delta_u, &lin.delta_r0, &lin.delta_r1)?;
    if g_new.distance_to_identity() > opts.trust_radius {
        return Err(Error::DomainGuard(format!(
            "|G - id| = {:.3e} exceeds the trust radius {:.3e}",
            g_new.distance_to_identity(),
            opts.trust_radius
        )));
    }
    let lambda_new = Translation::new(
        state.lambda.beta.iter().zip(&lin.delta_lambda.beta).map(|(a, b)| a + b).collect(),
        state.lambda.b.iter().zip(&lin.delta_lambda.b).map(|(a, b)| a + b).collect(),
        state.lambda.bmat.iter().zip(&lin.delta_lambda.bmat).map(|(a, b)| a + b).collect(),
        sd.normal_matrix(),
    )?;

    // P update by projection of W = G^{-1} . T^{-1} . Q . G
    let ginv = crate::conjugacy::invert_conjugacy(&g_new, state.p.map().degree(), opts.widths)?;
    let qg = q.compose(&g_new.to_map(state.p.map().degree()), &opts.composition)?;
    let tinv_qg = qg.left_translate_inverse(&lambda_new.beta, &lambda_new.b, &lambda_new.bmat)?;
    let w = ginv.compose(&tinv_qg, &opts.composition)?;
    let (p_new, _defect) = NormalForm::project(&w, sd);

    let dg_norm = lin
        .delta_u
        .weighted_norm(0.0)
        .max(lin.delta_r0.weighted_norm(0.0))
        .max(lin.delta_r1.weighted_norm(0.0));
    let record = IterationRecord {
        iter,
        residual,
        dg_norm,
        dlambda_norm: lin.delta_lambda.norm(),
        counterterm_cond: lin.counterterm_cond,
    };
    Ok(StepOutcome {
        state: State {
            g: g_new,
            p: p_new,
            lambda: lambda_new,
        },
        record,
    })
}

/// Newton iteration from `(id, P0, 0)` (or a warm-start state) until the
/// residual tolerance is met.
pub fn solve(
    q: &FourierTaylorMap,
    p0: &NormalForm,
    sd: &SpectralData,
    opts: &NewtonOptions,
    initial: Option<State>,
) -> Result<NormalFormResult> {
    let mut state = initial.unwrap_or_else(|| State::initial(p0, q.cutoff()));
    let mut iterations = Vec::new();
    let mut best = f64::INFINITY;
    for iter in 0..=opts.max_iter {
        let phi_value = normal_form_operator(
            &state.g,
            &state.p,
            &state.lambda,
            opts.widths,
            &opts.composition,
        )?;
        let residual = residual_norm(q, &phi_value)?;
        if residual <= opts.residual_tol {
            return Ok(NormalFormResult {
                g: state.g,
                p: state.p,
                lambda: state.lambda,
                iterations,
                converged: true,
                residual,
            });
        }
        if residual > opts.divergence_guard * best.max(opts.residual_tol) {
            return Err(Error::Divergence {
                iteration: iter,
                floor: best,
                residual,
            });
        }
        best = best.min(residual);
        if iter == opts.max_iter {
            return Err(Error::NonConvergence {
                what: "normal-form Newton iteration".into(),
                iterations: iter,
                residual,
            });
        }
        let outcome = newton_step(q, &state, sd, opts, iter)?;
        iterations.push(outcome.record);
        state = outcome.state;
    }
    unreachable!()
}

/// Fitted convergence order from the tail of a residual history: the ratio
/// `log(r_{i+1}/r_i) / log(r_i/r_{i-1})` over the last three residuals above
/// the numerical floor.
pub fn fit_convergence_order(residuals: &[f64], floor: f64) -> Option<f64> {
    let above: Vec<f64> = residuals.iter().copied().filter(|&r| r > floor).collect();
    if above.len() < 3 {
        return None;
    }
    let tail = &above[above.len() - 3..];
    let num = (tail[2] / tail[1]).ln();
    let den = (tail[1] / tail[0]).ln();
    if den.abs() < 1e-12 {
        return None;
    }
    Some(num / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    const GOLDEN: f64 = 0.6180339887498949;

    fn base_problem(k: usize) -> (SpectralData, NormalForm) {
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
        let quad = pmap.table().index_of(&[2]).unwrap();
        pmap.r_jet_mut().set_term(
            quad,
            FourierSeries::constant(1, k, ValueShape::Vector(1), &[0.3]),
        );
        (sd.clone(), NormalForm::new(pmap, &sd).unwrap())
    }

    #[test]
    fn counterterm_matrix_is_minus_identity_at_base() {
        let k = 16;
        let (sd, p0) = base_problem(k);
        let state = State::initial(&p0, k);
        let opts = NewtonOptions::default();
        // a perturbed Q so the pulled-back machinery has something to chew on
        let mut q = p0.map().clone();
        let mut pert = q.theta_jet().term(0).clone();
        pert.add_trig(&[1], 0, 1e-3, 0.0).unwrap();
        q.theta_jet_mut().set_term(0, pert);
        let phi_value = normal_form_operator(
            &state.g,
            &state.p,
            &state.lambda,
            opts.widths,
            &opts.composition,
        )
        .unwrap();
        let pulled = pulled_back_residual(
            &q,
            &state.g,
            &state.p,
            &state.lambda,
            &phi_value,
            &opts.composition,
        )
        .unwrap();
        let basis = LambdaBasis::new(&sd).unwrap();
        let p1 = state.p.torsion();
        let step = sd.rotation_step();
        let base = run_pipeline(&pulled, None, &sd, &basis, &p1, &state.p, &step).unwrap();
        for i in 0..basis.dim() {
            let mut e = vec![0.0; basis.dim()];
            e[i] = 1.0;
            let dir = basis.realize(&e);
            let (bt, bh, bm, _) = probe_jets(&pulled.context, &dir).unwrap();
            let out = run_pipeline(
                &pulled,
                Some((&bt, &bh, &bm)),
                &sd,
                &basis,
                &p1,
                &state.p,
                &step,
            )
            .unwrap();
            for r in 0..basis.dim() {
                let expect = if r == i { -1.0 } else { 0.0 };
                assert!(
                    (out.coords[r] - base.coords[r] - expect).abs() < 1e-10,
                    "matrix entry ({r},{i})"
                );
            }
        }
    }

    #[test]
    fn zero_residual_gives_zero_increments() {
        let k = 16;
        let (sd, p0) = base_problem(k);
        let state = State::initial(&p0, k);
        let opts = NewtonOptions::default();
        let q = p0.map().clone();
        let outcome = newton_step(&q, &state, &sd, &opts, 0).unwrap();
        assert!(outcome.record.residual < 1e-14);
        assert!(outcome.record.dg_norm < 1e-13);
        assert!(outcome.record.dlambda_norm < 1e-13);
    }

    #[test]
    fn single_step_matches_dense_cohomology_oracle() {
        // G = id, lambda = 0, A = 2: one step's r0_dot solves
        // R(theta + 2 pi alpha) - 2 R(theta) = eps cos theta
        let k = 32;
        let sd = SpectralData::new(vec![GOLDEN], dmatrix![2.0]).unwrap();
        let mut pmap = FourierTaylorMap::identity(1, 1, 2, k);
        pmap.rotation_mut()[0] = 2.0 * std::f64::consts::PI * GOLDEN;
        let lin = pmap.table().linear_index(0);
        pmap.r_jet_mut().set_term(
            lin,
            FourierSeries::constant(1, k, ValueShape::Vector(1), &[2.0]),
        );
        let p0 = NormalForm::new(pmap, &sd).unwrap();
        let eps = 1e-3;
        let mut q = p0.map().clone();
        let mut pert = q.r_jet().term(0).clone();
        pert.add_trig(&[1], 0, eps, 0.0).unwrap();
        q.r_jet_mut().set_term(0, pert);

        let state = State::initial(&p0, k);
        let opts = NewtonOptions::default();
        let phi_value = normal_form_operator(
            &state.g,
            &state.p,
            &state.lambda,
            opts.widths,
            &opts.composition,
        )
        .unwrap();
        let pulled = pulled_back_residual(
            &q,
            &state.g,
            &state.p,
            &state.lambda,
            &phi_value,
            &opts.composition,
        )
        .unwrap();
        let lin_sol = linearized_solve(&state, &sd, &pulled, &opts).unwrap();
        // dense oracle for the normal equation
        let mut g = FourierSeries::zeros(1, k, ValueShape::Vector(1));
        g.add_trig(&[1], 0, eps, 0.0).unwrap();
        let (oracle, b_bar) = solve_normal(&g, &sd).unwrap();
        assert!(b_bar[0].abs() < 1e-15);
        for kk in -(k as i64)..=(k as i64) {
            assert!(
                (lin_sol.r0_dot.coeff(&[kk], 0) - oracle.coeff(&[kk], 0)).norm() < 1e-12,
                "mode {kk}"
            );
        }
        assert!(lin_sol.obstruction_residual < 1e-12);
        assert!((lin_sol.counterterm_cond - 1.0).abs() < 1e-6);
    }

    #[test]
    fn solve_converges_in_zero_steps_on_exact_input() {
        let k = 16;
        let (sd, p0) = base_problem(k);
        let opts = NewtonOptions::default();
        let res = solve(p0.map(), &p0, &sd, &opts, None).unwrap();
        assert!(res.converged);
        assert!(res.iterations.is_empty());
        assert!(res.lambda.norm() < 1e-14);
    }

    #[test]
    fn convergence_order_fit() {
        // r_{i+1} = r_i^2: order 2
        let rs = [1e-2, 1e-4, 1e-8, 1e-16];
        let p = fit_convergence_order(&rs, 1e-14).unwrap();
        assert!((p - 2.0).abs() < 1e-9);
        assert!(fit_convergence_order(&rs[..2], 0.0).is_none());
    }
}
