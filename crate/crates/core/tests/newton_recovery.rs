//! End-to-end solver checks on a constructed benchmark: build
//! `Q = T_{lambda0} . G0 . P0 . G0^{-1}` from a known small conjugacy and
//! counter-term, then verify the solver recovers them (the normal form is
//! unique up to the torus-origin normalization).

use nalgebra::dmatrix;
use invtorus::cohomology::SpectralData;
use invtorus::conjugacy::{
    invert_conjugacy, normal_form_operator, Conjugacy, NormalForm, Translation, Widths,
};
use invtorus::fourier::{FourierSeries, ValueShape};
use invtorus::map::{CompositionOptions, FourierTaylorMap};
use invtorus::newton::{fit_convergence_order, solve, NewtonOptions};

const GOLDEN: f64 = 0.6180339887498949;

fn base_p0(k: usize, a: f64) -> FourierTaylorMap {
    let mut pmap = FourierTaylorMap::identity(1, 1, 2, k);
    pmap.rotation_mut()[0] = 2.0 * std::f64::consts::PI * GOLDEN;
    let lin = pmap.table().linear_index(0);
    pmap.r_jet_mut()
        .set_term(lin, FourierSeries::constant(1, k, ValueShape::Vector(1), &[a]));
    // unit torsion plus a quadratic action term to exercise the couplings
    pmap.theta_jet_mut()
        .set_term(lin, FourierSeries::constant(1, k, ValueShape::Vector(1), &[1.0]));
    let quad = pmap.table().index_of(&[2]).unwrap();
    pmap.r_jet_mut()
        .set_term(quad, FourierSeries::constant(1, k, ValueShape::Vector(1), &[0.3]));
    pmap
}

fn small_g0(k: usize) -> Conjugacy {
    let mut u = FourierSeries::zeros(1, k, ValueShape::Vector(1));
    u.add_trig(&[1], 0, 0.0, 5e-3).unwrap();
    u.add_trig(&[2], 0, 2.5e-3, 0.0).unwrap();
    let mut r0 = FourierSeries::zeros(1, k, ValueShape::Vector(1));
    r0.add_trig(&[1], 0, 4e-3, 0.0).unwrap();
    r0.add_trig(&[3], 0, 0.0, -1e-3).unwrap();
    let mut r1 = FourierSeries::identity_matrix(1, k, 1);
    r1.add_trig(&[1], 0, 0.0, 6e-3).unwrap();
    r1.add_trig(&[2], 0, -2e-3, 0.0).unwrap();
    Conjugacy::new(u, r0, r1).unwrap()
}

#[test]
fn recovers_constructed_conjugacy_and_counterterm() {
    let k = 64usize;
    let sd = SpectralData::new(vec![GOLDEN], dmatrix![2.0]).unwrap();
    let p0 = NormalForm::new(base_p0(k, 2.0), &sd).unwrap();
    let g0 = small_g0(k);
    // A = 2: b is constrained to 0, beta and B are free
    let lambda0 = Translation::new(vec![8e-3], vec![0.0], vec![-5e-3], sd.normal_matrix()).unwrap();
    let widths = Widths::default();
    let opts = NewtonOptions::default();
    let q = normal_form_operator(&g0, &p0, &lambda0, widths, &opts.composition).unwrap();

    let mut res = solve(&q, &p0, &sd, &opts, None).unwrap();
    assert!(res.converged, "converged");
    assert!(
        res.iterations.len() <= 8,
        "took {} iterations",
        res.iterations.len()
    );
    res.normalize_origin(&sd);

    // counter-term recovery
    assert!(
        (res.lambda.beta[0] - lambda0.beta[0]).abs() <= 1e-10,
        "beta: {} vs {}",
        res.lambda.beta[0],
        lambda0.beta[0]
    );
    assert!((res.lambda.bmat[0] - lambda0.bmat[0]).abs() <= 1e-10);
    assert!(res.lambda.b[0].abs() <= 1e-12, "b is structurally zero");

    // conjugacy recovery up to normalization (g0 already has zero-average u)
    let du = res.g.phi_periodic().sub(g0.phi_periodic()).unwrap();
    let dr0 = res.g.r0().sub(g0.r0()).unwrap();
    let dr1 = res.g.r1().sub(g0.r1()).unwrap();
    assert!(du.max_coeff() <= 1e-9, "u differs by {}", du.max_coeff());
    assert!(dr0.max_coeff() <= 1e-9, "r0 differs by {}", dr0.max_coeff());
    assert!(dr1.max_coeff() <= 1e-9, "r1 differs by {}", dr1.max_coeff());
}

#[test]
fn invariance_identity_and_first_order_reducibility() {
    let k = 48usize;
    let sd = SpectralData::new(vec![GOLDEN], dmatrix![1.5]).unwrap();
    let p0 = NormalForm::new(base_p0(k, 1.5), &sd).unwrap();
    // perturb Q away from the constructed form
    let g0 = small_g0(k);
    let lambda0 = Translation::new(vec![2e-3], vec![0.0], vec![1e-3], sd.normal_matrix()).unwrap();
    let opts = NewtonOptions::default();
    let mut q = normal_form_operator(&g0, &p0, &lambda0, Widths::default(), &opts.composition).unwrap();
    let mut pert = q.r_jet().term(0).clone();
    pert.add_trig(&[2], 0, 5e-4, 3e-4).unwrap();
    q.r_jet_mut().set_term(0, pert);

    let res = solve(&q, &p0, &sd, &opts, None).unwrap();
    assert!(res.converged);

    // invariance: Q(G(theta, 0)) = T_lambda(G(theta + 2 pi alpha, 0))
    let gmap = res.g.to_map(2);
    let step = 2.0 * std::f64::consts::PI * GOLDEN;
    let mut worst = 0.0f64;
    for j in 0..256 {
        let t = [2.0 * std::f64::consts::PI * j as f64 / 256.0];
        let (x, y) = gmap.eval(&t, &[0.0]);
        let (qx, qy) = q.eval(&x, &y);
        let (xs, ys) = gmap.eval(&[t[0] + step], &[0.0]);
        let tx = xs[0] + res.lambda.beta[0];
        let ty = res.lambda.b[0] + (1.0 + res.lambda.bmat[0]) * ys[0];
        let dtheta = (qx[0] - tx).rem_euclid(2.0 * std::f64::consts::PI);
        let dtheta = dtheta.min(2.0 * std::f64::consts::PI - dtheta);
        worst = worst.max(dtheta).max((qy[0] - ty).abs());
    }
    assert!(worst <= 10.0 * opts.residual_tol, "invariance residual {worst}");

    // first-order reducibility: the linear action jet of
    // G^{-1} . T^{-1} . Q . G equals A
    let ginv = invert_conjugacy(&res.g, 2, Widths::default()).unwrap();
    let qg = q.compose(&gmap, &opts.composition).unwrap();
    let tinv_qg = qg
        .left_translate_inverse(&res.lambda.beta, &res.lambda.b, &res.lambda.bmat)
        .unwrap();
    let w = ginv.compose(&tinv_qg, &opts.composition).unwrap();
    let lin = w.linear_matrix();
    let a_recovered = lin.coeff(&[0], 0).re;
    assert!(
        (a_recovered - 1.5).abs() <= 10.0 * opts.residual_tol,
        "linear jet {} vs 1.5",
        a_recovered
    );
    let lin_var = {
        let c = lin.sub(&FourierSeries::constant(1, k, ValueShape::Matrix(1, 1), &[1.5])).unwrap();
        c.max_coeff()
    };
    assert!(lin_var <= 10.0 * opts.residual_tol);
}

#[test]
fn quadratic_convergence_on_perturbed_problem() {
    let k = 48usize;
    let sd = SpectralData::new(vec![GOLDEN], dmatrix![1.5]).unwrap();
    let p0 = NormalForm::new(base_p0(k, 1.5), &sd).unwrap();
    let eps = 1e-3;
    let mut q = p0.map().clone();
    let mut pt = q.theta_jet().term(0).clone();
    pt.add_trig(&[1], 0, 0.0, eps).unwrap();
    q.theta_jet_mut().set_term(0, pt);
    let mut pr = q.r_jet().term(0).clone();
    pr.add_trig(&[1], 0, eps, 0.0).unwrap();
    q.r_jet_mut().set_term(0, pr);

    let mut opts = NewtonOptions::default();
    opts.residual_tol = 1e-13;
    let res = solve(&q, &p0, &sd, &opts, None).unwrap();
    assert!(res.converged);
    let residuals: Vec<f64> = res.iterations.iter().map(|r| r.residual).collect();
    assert!(residuals.len() >= 3, "history: {residuals:?}");
    let order = fit_convergence_order(&residuals, 1e-12 * 10.0).unwrap_or(0.0);
    assert!(order >= 1.8, "fitted order {order} from {residuals:?}");
    // lambda constraints hold at every iterate by construction; check final
    let (rb, rc) = res.lambda.constraint_residuals(sd.normal_matrix());
    assert!(rb <= 1e-12 && rc <= 1e-12);
}
