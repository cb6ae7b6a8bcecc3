use nalgebra::dmatrix;
use invtorus::cohomology::SpectralData;
use invtorus::conjugacy::{normal_form_operator, NormalForm, Widths};
use invtorus::fourier::{FourierSeries, ValueShape};
use invtorus::map::FourierTaylorMap;
use invtorus::newton::{newton_step, residual_norm, NewtonOptions, State};

const GOLDEN: f64 = 0.6180339887498949;

#[test]
fn trace_newton() {
    let k = 32usize;
    let sd = SpectralData::new(vec![GOLDEN], dmatrix![1.5]).unwrap();
    let mut pmap = FourierTaylorMap::identity(1, 1, 2, k);
    pmap.rotation_mut()[0] = 2.0 * std::f64::consts::PI * GOLDEN;
    let lin = pmap.table().linear_index(0);
    pmap.r_jet_mut().set_term(lin, FourierSeries::constant(1, k, ValueShape::Vector(1), &[1.5]));
    pmap.theta_jet_mut().set_term(lin, FourierSeries::constant(1, k, ValueShape::Vector(1), &[1.0]));
    let quad = pmap.table().index_of(&[2]).unwrap();
    pmap.r_jet_mut().set_term(quad, FourierSeries::constant(1, k, ValueShape::Vector(1), &[0.3]));
    let p0 = NormalForm::new(pmap, &sd).unwrap();

    let eps = 1e-3;
    let mut q = p0.map().clone();
    let mut pt = q.theta_jet().term(0).clone();
    pt.add_trig(&[1], 0, 0.0, eps).unwrap();
    q.theta_jet_mut().set_term(0, pt);
    let mut pr = q.r_jet().term(0).clone();
    pr.add_trig(&[1], 0, eps, 0.0).unwrap();
    q.r_jet_mut().set_term(0, pr);

    let opts = NewtonOptions::default();
    let mut state = State::initial(&p0, k);
    for it in 0..8 {
        let phi = normal_form_operator(&state.g, &state.p, &state.lambda, opts.widths, &opts.composition).unwrap();
        let res = residual_norm(&q, &phi).unwrap();
        println!("iter {it}: residual {res:.6e} lambda=({:.6e},{:.6e},{:.6e}) |u|={:.3e} |r0|={:.3e}",
            state.lambda.beta[0], state.lambda.b[0], state.lambda.bmat[0],
            state.g.phi_periodic().max_coeff(), state.g.r0().max_coeff());
        let out = newton_step(&q, &state, &sd, &opts, it).unwrap();
        println!("   step: dg={:.3e} dlam={:.3e} cond={:.3e}", out.record.dg_norm, out.record.dlambda_norm, out.record.counterterm_cond);
        state = out.state;
    }


    // does T.G.W.G^{-1} reconstruct Q exactly?
    use invtorus::conjugacy::invert_conjugacy;
    let ginv = invert_conjugacy(&state.g, 2, opts.widths).unwrap();
    let gmap = state.g.to_map(2);
    let qg = q.compose(&gmap, &opts.composition).unwrap();
    let tinv_qg = qg.left_translate_inverse(&state.lambda.beta, &state.lambda.b, &state.lambda.bmat).unwrap();
    let w = ginv.compose(&tinv_qg, &opts.composition).unwrap();
    let wginv = w.compose(&ginv, &opts.composition).unwrap();
    let gwginv = gmap.compose(&wginv, &opts.composition).unwrap();
    let v = gwginv.left_translate(&state.lambda.beta, &state.lambda.b, &state.lambda.bmat).unwrap();
    let (vt, vr) = v.sub_as_jets(&q).unwrap();
    println!("reconstruction: theta {:.3e} r {:.3e}", vt.max_coeff(), vr.max_coeff());
    // compare W's kept jets vs current P
    let (wt, wr) = w.sub_as_jets(state.p.map()).unwrap();
    for t in 0..wt.table.len() {
        println!("W - P theta {:?}: {:.3e}   r: {:.3e}", wt.table.multi_index(t), wt.term(t).max_coeff(), wr.term(t).max_coeff());
    }

    // pointwise bisection of the reconstruction chain
    let test_pts: Vec<(f64, f64)> = vec![(0.3, 0.0), (1.7, 0.002), (4.1, -0.003)];
    for &(t0, r0v) in &test_pts {
        let (a1, b1) = gmap.eval(&[t0], &[r0v]);
        let (a2, b2) = q.eval(&a1, &b1);
        let (ac, bc) = qg.eval(&[t0], &[r0v]);
        println!("Q.G       : {:.3e} {:.3e}", (a2[0]-ac[0]).abs(), (b2[0]-bc[0]).abs());
        // T^{-1}
        let a3 = [a2[0] - state.lambda.beta[0]];
        let b3 = [(b2[0] - state.lambda.b[0])/(1.0 + state.lambda.bmat[0])];
        let (at, bt2) = tinv_qg.eval(&[t0], &[r0v]);
        println!("Tinv.Q.G  : {:.3e} {:.3e}", (a3[0]-at[0]).abs(), (b3[0]-bt2[0]).abs());
        let (a4, b4) = ginv.eval(&a3, &b3);
        let (aw, bw) = w.eval(&[t0], &[r0v]);
        println!("W chain   : {:.3e} {:.3e}", (a4[0]-aw[0]).abs(), (b4[0]-bw[0]).abs());
        // now forward: W.G^{-1}
        let (gi_a, gi_b) = ginv.eval(&[t0], &[r0v]);
        let (w_a, w_b) = w.eval(&gi_a, &gi_b);
        let (wg_a, wg_b) = wginv.eval(&[t0], &[r0v]);
        println!("W.Ginv    : {:.3e} {:.3e}", (w_a[0]-wg_a[0]).abs(), (w_b[0]-wg_b[0]).abs());
        let (g_a, g_b) = gmap.eval(&w_a, &w_b);
        let (gw_a, gw_b) = gwginv.eval(&[t0], &[r0v]);
        println!("G.W.Ginv  : {:.3e} {:.3e}", (g_a[0]-gw_a[0]).abs(), (g_b[0]-gw_b[0]).abs());
        // G.Ginv = id?
        let (ga, gb) = gmap.eval(&gi_a, &gi_b);
        println!("G.Ginv-id : {:.3e} {:.3e}", (ga[0]-t0).abs(), (gb[0]-r0v).abs());
    }

    // FD-in-r jets of the pointwise chain vs W's jets, at theta = 0.3
    let theta_probe = 0.3f64;
    let chain = |rr: f64| -> (f64, f64) {
        let (a1, b1) = gmap.eval(&[theta_probe], &[rr]);
        let (a2, b2) = q.eval(&a1, &b1);
        let a3 = [a2[0] - state.lambda.beta[0]];
        let b3 = [(b2[0] - state.lambda.b[0])/(1.0 + state.lambda.bmat[0])];
        let (a4, b4) = ginv.eval(&a3, &b3);
        (a4[0], b4[0])
    };
    let h = 1e-3;
    let (t_m2, r_m2) = chain(-2.0*h); let (t_m1, r_m1) = chain(-h);
    let (t_0, r_0) = chain(0.0); let (t_p1, r_p1) = chain(h); let (t_p2, r_p2) = chain(2.0*h);
    let d2_t = (-t_m2 + 16.0*t_m1 - 30.0*t_0 + 16.0*t_p1 - t_p2) / (12.0*h*h) / 2.0;
    let d2_r = (-r_m2 + 16.0*r_m1 - 30.0*r_0 + 16.0*r_p1 - r_p2) / (12.0*h*h) / 2.0;
    let quad = w.table().index_of(&[2]).unwrap();
    let w_t2 = w.theta_jet().term(quad).eval_real(&[theta_probe])[0];
    let w_r2 = w.r_jet().term(quad).eval_real(&[theta_probe])[0];
    println!("order2 theta: FD {:.9e} vs W {:.9e} diff {:.3e}", d2_t, w_t2, (d2_t - w_t2).abs());
    println!("order2 r    : FD {:.9e} vs W {:.9e} diff {:.3e}", d2_r, w_r2, (d2_r - w_r2).abs());
    // and Q vs phi order-2 jets at same theta
    let q2t = q.theta_jet().term(quad).eval_real(&[theta_probe])[0];
    let p2t = state.p.map().theta_jet().term(quad).eval_real(&[theta_probe])[0];
    println!("q theta2 {:.9e}  P theta2 {:.9e}", q2t, p2t);
    // locate the stalled residual
    let phi = normal_form_operator(&state.g, &state.p, &state.lambda, opts.widths, &opts.composition).unwrap();
    let (dt, dr) = q.sub_as_jets(&phi).unwrap();
    for t in 0..dt.table.len() {
        println!("theta slot {:?}: {:.3e}", dt.table.multi_index(t), dt.term(t).max_coeff());
        println!("    r slot {:?}: {:.3e}", dr.table.multi_index(t), dr.term(t).max_coeff());
    }
    for kk in -6i64..=6 {
        println!("theta0 mode {kk}: {:.3e}  r0 mode {kk}: {:.3e}", dt.term(0).coeff(&[kk],0).norm(), dr.term(0).coeff(&[kk],0).norm());
    }
}

