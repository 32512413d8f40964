use parakernel::dual::*;
use parakernel::*;
use proptest::prelude::*;
use std::f64::consts::PI;

fn random(g: Grid, seed: u64, amp: f64) -> ScalarField {
    sample_field(g, &FieldDescriptor::Random { seed, max_mode: 2, amplitude: amp }).unwrap()
}

fn times(t: f64, steps: usize) -> Vec<f64> {
    TimeGrid::new(0.0, t, steps).unwrap().times()
}

/// `(1+α) ∫₀¹ (b + s(a−b))^α ds` by composite Gauss–Legendre quadrature.
fn secant_oracle(a: f64, b: f64, alpha: f64) -> f64 {
    let nodes = [-0.906_179_845_938_664, -0.538_469_310_105_683, 0.0, 0.538_469_310_105_683, 0.906_179_845_938_664];
    let weights = [0.236_926_885_056_189, 0.478_628_670_499_366, 0.568_888_888_888_889, 0.478_628_670_499_366, 0.236_926_885_056_189];
    let panels = 400;
    let mut sum = 0.0;
    for p in 0..panels {
        let (lo, hi) = (p as f64 / panels as f64, (p + 1) as f64 / panels as f64);
        for (x, w) in nodes.iter().zip(&weights) {
            let s = 0.5 * (lo + hi) + 0.5 * (hi - lo) * x;
            sum += 0.5 * (hi - lo) * w * (b + s * (a - b)).powf(alpha);
        }
    }
    (1.0 + alpha) * sum
}

fn pointwise(a: f64, b: f64, alpha: f64) -> f64 {
    let g = Grid::new(1, 1.0, 8).unwrap();
    quotient_A(&ScalarField::constant(g, a), &ScalarField::constant(g, b), alpha).unwrap().values[0]
}

#[test]
fn quotient_examples() {
    assert!((pointwise(2.0, 2.0, 1.0) - 4.0).abs() < 1e-12);
    assert!((pointwise(3.0, 1.0, 1.0) - 4.0).abs() < 1e-12);
    assert!((pointwise(4.0, 0.0, 0.5) - 2.0).abs() < 1e-12);
    assert_eq!(pointwise(0.0, 0.0, 0.5), 0.0);
    let g = Grid::new(1, 1.0, 8).unwrap();
    assert!(quotient_A(&ScalarField::constant(g, -1.0), &ScalarField::zeros(g), 0.5).is_err());
    assert!(quotient_A(&ScalarField::zeros(g), &ScalarField::zeros(g), 0.0).is_err());
}

#[test]
fn quotient_matches_quadrature_oracle() {
    for &(a, b, alpha) in &[(1.3, 0.2, 0.5), (0.01, 2.0, 0.25), (5.0, 4.999, 1.5), (0.7, 0.7 + 1e-9, 0.5)] {
        let exact = secant_oracle(a, b, alpha);
        assert!((pointwise(a, b, alpha) / exact - 1.0).abs() < 1e-6, "{a} {b} {alpha}");
    }
}

proptest! {
    #[test]
    fn quotient_symmetric_and_bracketed(a in 0.0f64..10.0, b in 0.0f64..10.0, alpha in 0.05f64..2.0) {
        let q = pointwise(a, b, alpha);
        prop_assert!((q - pointwise(b, a, alpha)).abs() <= 1e-12 * q.max(1.0));
        let (lo, hi) = (a.min(b), a.max(b));
        let m = 1.0 + alpha;
        prop_assert!(q >= m * lo.powf(alpha) * (1.0 - 1e-9) - 1e-12);
        prop_assert!(q <= m * hi.powf(alpha) * (1.0 + 1e-9) + 1e-12);
    }
}

#[test]
fn aux_eigenmode_decay() {
    let g = Grid::new(1, 1.0, 32).unwrap();
    let plan = SpectralPlan::new(g);
    let tg = TimeGrid::new(0.0, 0.1, 10).unwrap();
    let v = vec![ScalarField::zeros(g); 11];
    let f0 = sample_field(g, &FieldDescriptor::sin(2)).unwrap();
    let (delta, mu) = (0.3, 2.0);
    let sol = auxiliary_solve(&plan, &v, delta, mu, None, &f0, &tg, None).unwrap();
    let k2 = (4.0 * PI).powi(2);
    for (t, s) in tg.times().iter().zip(&sol.slices) {
        assert!(s.sub(&f0.scale((-(delta * k2 + mu) * t).exp())).max_abs() < 1e-12);
    }
}

#[test]
fn aux_constant_data_decays_at_mu() {
    let g = Grid::new(2, 1.0, 16).unwrap();
    let plan = SpectralPlan::new(g);
    let tg = TimeGrid::new(0.0, 0.2, 8).unwrap();
    let v: Vec<ScalarField> = (0..9).map(|j| random(g, j, 0.5).map(|x| x + 0.6)).collect();
    let sol = auxiliary_solve(&plan, &v, 0.01, 3.0, None, &ScalarField::constant(g, 2.0), &tg, None).unwrap();
    for (t, s) in tg.times().iter().zip(&sol.slices) {
        assert!(s.sub(&ScalarField::constant(g, 2.0 * (-3.0 * t).exp())).max_abs() < 1e-12);
    }
}

#[test]
fn aux_damping() {
    let g = Grid::new(2, 1.0, 16).unwrap();
    let plan = SpectralPlan::new(g);
    let tg = TimeGrid::new(0.0, 0.1, 10).unwrap();
    let f0 = random(g, 3, 1.0);
    let l2 = |f: &ScalarField| f.dot(f).sqrt();
    let flat = vec![ScalarField::constant(g, 0.5); 11];
    let sol = auxiliary_solve(&plan, &flat, 0.01, 0.0, None, &f0, &tg, None).unwrap();
    for w in sol.slices.windows(2) {
        assert!(l2(&w[1]) <= l2(&w[0]) * (1.0 + 1e-12));
    }
    let varying: Vec<ScalarField> = (0..11).map(|j| random(g, 10 + j, 0.5).map(|x| x + 0.6)).collect();
    let sol = auxiliary_solve(&plan, &varying, 0.01, 0.0, None, &f0, &tg, None).unwrap();
    let m0 = f0.max_abs();
    for s in &sol.slices {
        assert!(s.max_abs() <= m0 * (1.0 + 1e-3));
    }
    assert!(sol.estimates.iter().all(|e| e.is_finite() && *e >= 0.0));
    assert!(auxiliary_solve(&plan, &varying, 0.01, 0.0, None, &f0, &tg, Some(1.0)).is_err());
    assert!(auxiliary_solve(&plan, &varying, 0.0, 0.0, None, &f0, &tg, None).is_err());
}

#[test]
fn sources_vanish_for_zero_dual_or_quiescent_state() {
    let g = Grid::new(2, 1.0, 16).unwrap();
    let plan = SpectralPlan::new(g);
    let snaps = Snapshots::synthetic(&plan, 2, times(0.1, 8)).unwrap();
    let prob = DualProblem::new(&plan, &snaps, 0.01, 1.0, 0.5, random(g, 1, 1.0)).unwrap();
    let zero = vec![ScalarField::zeros(g); 9];
    for t in assemble_terms(&plan, &zero, &prob).unwrap().terms.iter().flatten() {
        assert_eq!(t.max_abs(), 0.0);
    }
    let calm = Snapshots::quiescent(g, times(0.1, 8), 1.5).unwrap();
    let prob = DualProblem::new(&plan, &calm, 0.01, 1.0, 0.5, random(g, 1, 1.0)).unwrap();
    let psi: Vec<ScalarField> = (0..9).map(|j| random(g, 20 + j, 1.0)).collect();
    for t in assemble_source(&plan, &psi, &prob).unwrap() {
        assert!(t.max_abs() < 1e-12);
    }
}

#[test]
fn drift_alone_activates_first_term() {
    let g = Grid::new(2, 1.0, 16).unwrap();
    let plan = SpectralPlan::new(g);
    let th = times(0.1, 4);
    let z = ScalarField::zeros(g);
    let flow = plan.leray_project(&VectorField::new(vec![random(g, 5, 1.0), random(g, 6, 1.0)]).unwrap());
    let snaps = Snapshots::new(&plan, th.clone(), vec![z.clone(); 5], vec![z.clone(); 5], vec![z.clone(); 5], vec![z.clone(); 5], vec![flow.clone(); 5], random(g, 7, 1.0)).unwrap();
    let prob = DualProblem::new(&plan, &snaps, 0.01, 1.0, 0.5, z.clone()).unwrap();
    let psi: Vec<ScalarField> = (0..5).map(|j| random(g, 30 + j, 1.0)).collect();
    let terms = assemble_terms(&plan, &psi, &prob).unwrap().terms;
    for (j, p) in psi.iter().enumerate() {
        let grad = plan.gradient(p);
        let expect = grad.components[0].mul(&flow.components[0]).add(&grad.components[1].mul(&flow.components[1]));
        assert!(terms[0][j].sub(&expect).max_abs() < 1e-12);
    }
    for t in terms[1..].iter().flatten() {
        assert!(t.max_abs() < 1e-12);
    }
}

#[test]
fn decoupled_picard_is_a_single_aux_solve() {
    let g = Grid::new(1, 1.0, 32).unwrap();
    let plan = SpectralPlan::new(g);
    let snaps = Snapshots::quiescent(g, times(0.1, 10), 1.0).unwrap();
    let psi0 = sample_field(g, &FieldDescriptor::sin(1)).unwrap();
    let prob = DualProblem::new(&plan, &snaps, 0.01, 1.0, 0.5, psi0.clone()).unwrap();
    let opts = PicardOptions { escalate: false, ..Default::default() };
    let (psi, rep) = picard_solve(&plan, &prob, &opts).unwrap();
    assert!(rep.converged && rep.iterations <= 3);
    let h = g.spacing();
    let k = 2.0 * PI;
    let fd = (2.0 - 2.0 * (k * h).cos()) / (h * h);
    let rate = 0.01 * k * k + 1.5 * fd + 1.0;
    let last = psi.last().unwrap();
    assert!(last.sub(&psi0.scale((-rate * 0.1f64).exp())).max_abs() < 1e-3);
}

#[test]
fn picard_is_deterministic_and_bounded() {
    let g = Grid::new(2, 1.0, 16).unwrap();
    let plan = SpectralPlan::new(g);
    let snaps = Snapshots::synthetic(&plan, 3, times(0.1, 8)).unwrap();
    let prob = DualProblem::new(&plan, &snaps, 0.01, 1.0, 0.5, random(g, 1, 1.0)).unwrap();
    let opts = PicardOptions::default();
    let (a, ra) = picard_solve(&plan, &prob, &opts).unwrap();
    let (b, rb) = picard_solve(&plan, &prob, &opts).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    assert!(ra.converged);
    assert!(ra.max_ratio <= 0.9);
    assert!(ra.norms.iter().all(|n| *n <= 2.0 * ra.first_norm));
}

#[test]
fn sweep_with_zero_data_is_zero() {
    let g = Grid::new(1, 1.0, 16).unwrap();
    let plan = SpectralPlan::new(g);
    let snaps = Snapshots::synthetic(&plan, 1, times(0.1, 4)).unwrap();
    let prob = DualProblem::new(&plan, &snaps, 0.01, 1.0, 0.5, ScalarField::zeros(g)).unwrap();
    let chi: Vec<ScalarField> = (0..5).map(|j| random(g, j, 1.0)).collect();
    let res = viscosity_sweep(&plan, &prob, &[1e-1, 1e-2, 1e-3], &chi, &PicardOptions::default()).unwrap();
    assert!(res.records.iter().all(|r| r.delta_l2_dpsi_sq == 0.0 && r.delta_chi_pairing == 0.0));
    assert!(res.bound_ratio.is_none() && res.decay_exponent.is_none());
    let mut buf = Vec::new();
    write_sweep_csv(&res, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), "delta,mu,iters,max_ratio,delta_l2_dpsi_sq,delta_chi_pairing");
    assert!(viscosity_sweep(&plan, &prob, &[1e-1, 1e-2], &chi, &PicardOptions::default()).is_err());
}

#[test]
fn energy_budget_zero_cases() {
    let g = Grid::new(2, 1.0, 16).unwrap();
    let plan = SpectralPlan::new(g);
    let snaps = Snapshots::synthetic(&plan, 4, times(0.1, 6)).unwrap();
    let prob = DualProblem::new(&plan, &snaps, 0.01, 1.0, 0.5, ScalarField::zeros(g)).unwrap();
    let zero = vec![ScalarField::zeros(g); 7];
    let b = energy_budget(&plan, &zero, &prob, 1.0).unwrap();
    assert!(b.holds);
    assert!(b.terms.iter().flatten().chain(&b.grad_sq).chain(&b.dissipation).all(|x| *x == 0.0));
    let calm = Snapshots::quiescent(g, times(0.1, 6), 0.0).unwrap();
    assert_eq!(gronwall_majorant(&plan, &calm, 1.0), 0.0);
}

#[test]
fn duality_vanishes_for_identical_solutions() {
    let g = Grid::new(2, 1.0, 16).unwrap();
    let plan = SpectralPlan::new(g);
    let mut snaps = Snapshots::synthetic(&plan, 5, times(0.1, 8)).unwrap();
    snaps.eta1 = snaps.eta2.clone();
    let prob = DualProblem::new(&plan, &snaps, 0.01, 1.0, 0.5, ScalarField::zeros(g)).unwrap();
    let phi: Vec<ScalarField> = (0..9).map(|j| random(g, j, 1.0)).collect();
    let rep = duality_identity_residual(&plan, &prob, &phi).unwrap();
    assert_eq!(rep.residual, 0.0);
    assert_eq!(rep.lhs, 0.0);
}

#[test]
fn duality_with_constant_test_field_is_mass_balance() {
    let g = Grid::new(2, 1.0, 16).unwrap();
    let plan = SpectralPlan::new(g);
    let mut snaps = Snapshots::synthetic(&plan, 6, times(0.1, 32)).unwrap();
    for (e, t) in snaps.eta1.iter_mut().zip(&snaps.times) {
        *e = e.map(|x| x + 3.0 * t);
    }
    let prob = DualProblem::new(&plan, &snaps, 0.01, 1.0, 0.5, ScalarField::zeros(g)).unwrap();
    let phi = vec![ScalarField::constant(g, 1.0); 33];
    let rep = duality_identity_residual(&plan, &prob, &phi).unwrap();
    assert!(rep.rhs.abs() <= 1e-12 * rep.scale);
    assert!((rep.lhs - 0.3).abs() < 1e-9);
    assert!(rep.residual <= 1e-3, "{rep:?}");
}
