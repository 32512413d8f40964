use parakernel::green::*;
use parakernel::*;
use proptest::prelude::*;
use std::f64::consts::PI;

/// Periodic heat kernel by explicit image sums.
fn oracle(grid: Grid, y: usize, tau: f64) -> ScalarField {
    let yc = grid.coords(y);
    let norm = (4.0 * PI * tau).powf(-(grid.dim as f64) / 2.0);
    ScalarField::from_fn(grid, |x| {
        let mut prod = norm;
        for d in 0..grid.dim {
            let mut s = 0.0;
            for m in -4i32..=4 {
                let r = x[d] - yc[d] + m as f64 * grid.length;
                s += (-r * r / (4.0 * tau)).exp();
            }
            prod *= s;
        }
        prod
    })
}

fn center(grid: Grid) -> usize {
    grid.flat_index([grid.points / 2; 3])
}

fn rel_linf_bulk(exact: &ScalarField, got: &ScalarField) -> f64 {
    let peak = exact.max();
    let mut worst = 0.0f64;
    for (e, g) in exact.values.iter().zip(&got.values) {
        if *e > 1e-6 * peak {
            worst = worst.max((e - g).abs());
        }
    }
    worst / peak
}

#[test]
fn forward_eigenfunction_decay() {
    let g = Grid::new(1, 1.0, 64).unwrap();
    let plan = SpectralPlan::new(g);
    let f0 = sample_field(g, &FieldDescriptor::sin(1)).unwrap();
    let traj = solve_forward(&plan, &Coefficients::zero(g), &f0, &NoForcing, TimeGrid::new(0.0, 0.1, 50).unwrap()).unwrap();
    let k2 = (2.0 * PI).powi(2);
    assert!(traj.last().unwrap().sub(&f0.scale((-k2 * 0.1).exp())).max_abs() < 1e-6);
}

#[test]
fn forward_constant_potential_scales_heat_flow() {
    let g = Grid::new(2, 1.0, 32).unwrap();
    let plan = SpectralPlan::new(g);
    let f0 = sample_field(g, &FieldDescriptor::Random { seed: 4, max_mode: 3, amplitude: 1.0 }).unwrap();
    let b0 = 0.7;
    let coeffs = Coefficients::constant(g, &[0.0, 0.0], b0).unwrap();
    let traj = solve_forward(&plan, &coeffs, &f0, &NoForcing, TimeGrid::new(0.0, 0.2, 100).unwrap()).unwrap();
    let expected = plan.heat_semigroup(&f0, 0.2).unwrap().scale((-b0 * 0.2f64).exp());
    assert!(traj.last().unwrap().sub(&expected).max_abs() < 1e-5);
}

#[test]
fn forward_constant_drift_translates() {
    let g = Grid::new(1, 4.0, 256).unwrap();
    let plan = SpectralPlan::new(g);
    let f0 = sample_field(g, &FieldDescriptor::Gaussian { center: vec![1.0], sigma: 0.1, amplitude: 1.0 }).unwrap();
    let a0 = 0.8;
    let t = 0.5;
    let coeffs = Coefficients::constant(g, &[a0], 0.0).unwrap();
    let dt = coeffs.admissible_dt().min(t / 100.0);
    let steps = (t / dt).ceil() as usize;
    let traj = solve_forward(&plan, &coeffs, &f0, &NoForcing, TimeGrid::new(0.0, t, steps).unwrap()).unwrap();
    let peak_x = g.coords(traj.last().unwrap().argmax())[0];
    assert!((peak_x - (1.0 + a0 * t)).abs() <= g.spacing());
}

#[test]
fn forward_refuses_unstable_step() {
    let g = Grid::new(1, 1.0, 64).unwrap();
    let plan = SpectralPlan::new(g);
    let coeffs = Coefficients::constant(g, &[10.0], 0.0).unwrap();
    let err = solve_forward(&plan, &coeffs, &ScalarField::zeros(g), &NoForcing, TimeGrid::new(0.0, 1.0, 2).unwrap());
    assert!(matches!(err, Err(Error::Stability { .. })));
}

#[test]
fn averaged_kernel_matches_heat_kernel() {
    let g = Grid::new(1, 4.0, 256).unwrap();
    let plan = SpectralPlan::new(g);
    let y = center(g);
    let eps = 2.0 * g.spacing();
    let table = averaged_green(&plan, &Coefficients::zero(g), SourcePoint { time: 0.0, node: y }, eps, TimeGrid::new(0.0, 0.2, 40).unwrap(), &GreenOptions::default()).unwrap();
    let taus = table.taus();
    let j = taus.iter().position(|t| (t - 0.1).abs() < 0.003).expect("slice near tau = 0.1");
    assert!(rel_linf_bulk(&oracle(g, y, taus[j]), &table.slices[j]) < 0.02);
}

#[test]
fn averaged_kernel_mass_laws() {
    let g = Grid::new(1, 2.0, 128).unwrap();
    let plan = SpectralPlan::new(g);
    let y = center(g);
    let eps = 2.0 * g.spacing();
    let tg = TimeGrid::new(0.0, 0.5, 25).unwrap();
    let opts = GreenOptions::default();
    let damped = averaged_green(&plan, &Coefficients::constant(g, &[0.0], 1.0).unwrap(), SourcePoint { time: 0.0, node: y }, eps, tg, &opts).unwrap();
    for (t, s) in damped.times.iter().zip(&damped.slices) {
        assert!((integrate(s) / (-(t - damped.effective_time)).exp() - 1.0).abs() < 0.01);
    }
    let drift = Coefficients::synthetic(&plan, 2, 1.0, 0.0, 0.0, 0.5, 8).unwrap();
    let moved = averaged_green(&plan, &drift, SourcePoint { time: 0.0, node: y }, eps, tg, &opts).unwrap();
    for s in &moved.slices {
        assert!((integrate(s) - 1.0).abs() < 1e-6);
    }
    assert!(averaged_green(&plan, &drift, SourcePoint { time: 0.0, node: y }, g.spacing(), tg, &opts).is_err());
}

#[test]
fn green_function_matches_heat_kernel_in_bulk() {
    for (dim, n) in [(1usize, 128usize), (2, 64)] {
        let g = Grid::new(dim, 1.0, n).unwrap();
        let plan = SpectralPlan::new(g);
        let y = center(g);
        let h = g.spacing();
        let taus = [(6.0 * h).powi(2), (10.0 * h).powi(2)];
        let table = green_function_at(&plan, &Coefficients::zero(g), SourcePoint { time: 0.0, node: y }, &taus, &GreenOptions::default()).unwrap();
        for (tau, s) in taus.iter().zip(&table.slices) {
            assert!(rel_linf_bulk(&oracle(g, y, *tau), s) < 0.01, "dim {dim} tau {tau}");
        }
    }
}

#[test]
fn constant_drift_moves_the_peak() {
    let g = Grid::new(2, 2.0, 64).unwrap();
    let plan = SpectralPlan::new(g);
    let y = g.flat_index([16, 32, 0]);
    let coeffs = Coefficients::constant(g, &[1.0, 0.0], 0.0).unwrap();
    let table = green_function_at(&plan, &coeffs, SourcePoint { time: 0.0, node: y }, &[0.1, 0.3], &GreenOptions::default()).unwrap();
    for (t, s) in table.times.iter().zip(&table.slices) {
        let x = g.coords(s.argmax());
        assert!((x[0] - (0.5 + t)).abs() <= g.spacing() + 1e-12);
        assert!((x[1] - 1.0).abs() <= g.spacing() + 1e-12);
    }
}

#[test]
fn variable_coefficient_constructions_agree() {
    let g = Grid::new(2, 4.0, 64).unwrap();
    let plan = SpectralPlan::new(g);
    let coeffs = Coefficients::synthetic(&plan, 5, 1.0, 1.0, 0.0, 0.5, 8).unwrap();
    let table = green_function(&plan, &coeffs, SourcePoint { time: 0.0, node: center(g) }, TimeGrid::new(0.0, 0.5, 10).unwrap(), &GreenOptions::default()).unwrap();
    assert_eq!(table.converged, Some(true));
    assert!(table.agreement.unwrap() <= 0.03);
}

fn table(dim: usize, n: usize, l: f64, coeffs: impl Fn(&SpectralPlan) -> Coefficients) -> (SpectralPlan, GreenTable) {
    let g = Grid::new(dim, l, n).unwrap();
    let plan = SpectralPlan::new(g);
    let c = coeffs(&plan);
    let t = green_function(&plan, &c, SourcePoint { time: 0.0, node: center(g) }, TimeGrid::new(0.0, 0.5, 20).unwrap(), &GreenOptions::default()).unwrap();
    (plan, t)
}

#[test]
fn heat_envelope_recovers_gaussian_constants() {
    for (dim, n) in [(1usize, 256usize), (2, 128)] {
        let (_, t) = table(dim, n, 8.0, |p| Coefficients::zero(p.grid()));
        let fit = envelope_fit(&t, 1e-8).unwrap();
        let c0 = (4.0 * PI).powf(-(dim as f64) / 2.0);
        assert!((fit.c_rate - 0.25).abs() <= 0.01);
        assert!((fit.c_const / c0 - 1.0).abs() <= 0.05);
        assert!(fit.c_const > 0.0 && fit.rms_residual.is_finite());
    }
}

#[test]
fn constant_potential_keeps_rate_and_lowers_constant() {
    let (_, free) = table(1, 256, 8.0, |p| Coefficients::zero(p.grid()));
    let (_, damped) = table(1, 256, 8.0, |p| Coefficients::constant(p.grid(), &[0.0], 1.0).unwrap());
    let (a, b) = (envelope_fit(&free, 1e-8).unwrap(), envelope_fit(&damped, 1e-8).unwrap());
    assert!((b.c_rate - 0.25).abs() <= 0.01);
    assert!(b.c_const < a.c_const);
}

#[test]
fn bounded_coefficients_respect_envelope() {
    let (_, t) = table(1, 256, 8.0, |p| Coefficients::synthetic(p, 3, 1.0, 1.0, 0.0, 0.5, 8).unwrap());
    let fit = envelope_fit(&t, 1e-8).unwrap();
    assert!(fit.c_rate >= 0.20);
    assert!(fit.violation_fraction < 0.01);
}

#[test]
fn heat_gradient_peaks_match_closed_form() {
    let (plan, t) = table(2, 128, 8.0, |p| Coefficients::zero(p.grid()));
    let h = plan.grid().spacing();
    let keep: Vec<usize> = (0..t.times.len()).filter(|&i| t.taus()[i] >= 36.0 * h * h).collect();
    let t = GreenTable { times: keep.iter().map(|&i| t.times[i]).collect(), slices: keep.iter().map(|&i| t.slices[i].clone()).collect(), ..t };
    let report = derivative_envelope_check(&plan, &t, 1e-8).unwrap();
    for (tau, peak) in t.taus().iter().zip(&report.gradient_peaks) {
        let exact = (4.0 * PI * tau).powi(-1) * (2.0 * tau).powf(-0.5) * (-0.5f64).exp();
        assert!((peak / exact - 1.0).abs() < 0.03, "tau {tau}: {peak} vs {exact}");
    }
    assert!((report.first.c_rate - 0.25).abs() <= 0.02);
    assert!((report.first.tau_exponent - 1.5).abs() <= 0.15);
    assert!((report.second.tau_exponent - 2.0).abs() <= 0.2);
}

#[test]
fn derivative_check_refuses_unresolved_tables() {
    let (plan, t) = table(1, 64, 8.0, |p| Coefficients::zero(p.grid()));
    assert!(matches!(derivative_envelope_check(&plan, &t, 1e-8), Err(Error::UnderResolved(_))));
}

#[test]
fn chapman_kolmogorov_composition() {
    let o = GreenOptions::default();
    for (dim, n) in [(1usize, 128usize), (2, 32)] {
        let g = Grid::new(dim, 4.0, n).unwrap();
        let plan = SpectralPlan::new(g);
        let free = chapman_kolmogorov_residual(&plan, &Coefficients::zero(g), 0.0, 0.15, 0.3, center(g), &o).unwrap();
        assert!(free.residual <= 0.01);
        let var = Coefficients::synthetic(&plan, 3, 1.0, 1.0, 0.0, 0.5, 8).unwrap();
        let bounded = chapman_kolmogorov_residual(&plan, &var, 0.0, 0.15, 0.3, center(g), &o).unwrap();
        assert!(bounded.residual <= 0.03);
    }
}

#[test]
fn duhamel_free_heat_flow() {
    let g = Grid::new(1, 1.0, 32).unwrap();
    let plan = SpectralPlan::new(g);
    let f0 = sample_field(g, &FieldDescriptor::Gaussian { center: vec![0.5], sigma: 0.1, amplitude: 1.0 }).unwrap();
    let tg = TimeGrid::new(0.0, 0.1, 10).unwrap();
    let rec = duhamel_reconstruct(&plan, &Coefficients::zero(g), &f0, None, tg, &DuhamelOptions::default()).unwrap();
    let exact = plan.heat_semigroup(&f0, 0.1).unwrap();
    assert!(rec.last().unwrap().sub(&exact).max_abs() / exact.max_abs() < 0.02);
}

#[test]
fn duhamel_unit_source_grows_mean_linearly() {
    let g = Grid::new(1, 1.0, 32).unwrap();
    let plan = SpectralPlan::new(g);
    let tg = TimeGrid::new(0.0, 0.1, 10).unwrap();
    let ones = Trajectory::new(tg.times(), vec![ScalarField::constant(g, 1.0); 11]).unwrap();
    let coeffs = Coefficients::synthetic(&plan, 1, 1.0, 0.0, 0.0, 0.1, 4).unwrap();
    let rec = duhamel_reconstruct(&plan, &coeffs, &ScalarField::zeros(g), Some(&ones), tg, &DuhamelOptions::default()).unwrap();
    let means: Vec<f64> = rec.slices.iter().map(|s| integrate(s) / g.volume()).collect();
    let (slope, _, _) = parakernel::spectral::linear_fit(&rec.times, &means);
    assert!((slope - 1.0).abs() < 0.01);
}

#[test]
fn duhamel_matches_forward_solver() {
    let g = Grid::new(1, 1.0, 64).unwrap();
    let plan = SpectralPlan::new(g);
    let c = Coefficients::synthetic(&plan, 5, 1.0, 1.0, 0.0, 0.2, 8).unwrap();
    let f0 = sample_field(g, &FieldDescriptor::Gaussian { center: vec![0.5], sigma: 0.08, amplitude: 1.0 }).unwrap();
    let tg = TimeGrid::new(0.0, 0.2, 40).unwrap();
    let forcing: Vec<ScalarField> = tg.times().iter().map(|&t| ScalarField::from_fn(g, |x| (1.0 + (2.0 * PI * x[0]).sin()) * (1.0 + t))).collect();
    let fs = Trajectory::new(tg.times(), forcing).unwrap();
    let dt = c.admissible_dt().min(2.0 * g.spacing().powi(2));
    let fine = TimeGrid::new(0.0, 0.2, (0.2 / dt).ceil() as usize).unwrap();
    let fwd = solve_forward(&plan, &c, &f0, &SampledForcing(&fs), fine).unwrap();
    let opts = DuhamelOptions { method: GreenMethod::Averaged, ..Default::default() };
    let rec = duhamel_reconstruct(&plan, &c, &f0, Some(&fs), tg, &opts).unwrap();
    let (a, b) = (rec.last().unwrap(), fwd.last().unwrap());
    let l2 = |f: &ScalarField| lp_norm(f, NormSpec::lp(2.0));
    assert!(l2(&a.sub(b)) / l2(b) <= 0.03);
}

#[test]
fn duhamel_respects_budget() {
    let g = Grid::new(2, 1.0, 16).unwrap();
    let plan = SpectralPlan::new(g);
    let opts = DuhamelOptions { budget_bytes: 1024, ..Default::default() };
    let err = duhamel_reconstruct(&plan, &Coefficients::zero(g), &ScalarField::constant(g, 1.0), None, TimeGrid::new(0.0, 0.5, 4).unwrap(), &opts);
    assert!(matches!(err, Err(Error::Budget(_))));
}

#[test]
fn construction_error_is_second_order() {
    let err = |n: usize| {
        let g = Grid::new(1, 1.0, n).unwrap();
        let plan = SpectralPlan::new(g);
        let y = center(g);
        let tau = 0.0025;
        let t = green_function_at(&plan, &Coefficients::zero(g), SourcePoint { time: 0.0, node: y }, &[tau], &GreenOptions { three_level: false, ..Default::default() }).unwrap();
        rel_linf_bulk(&oracle(g, y, tau), &t.slices[0])
    };
    let (coarse, fine) = (err(64), err(128));
    assert!(coarse / fine >= 3.0, "{coarse} -> {fine}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn tables_are_positive_and_mass_consistent(seed in 0u64..1000, potential in 0.0f64..1.0) {
        let g = Grid::new(1, 2.0, 64).unwrap();
        let plan = SpectralPlan::new(g);
        let c = Coefficients::synthetic(&plan, seed, 1.0, potential, 0.0, 0.4, 6).unwrap();
        let t = green_function(&plan, &c, SourcePoint { time: 0.0, node: center(g) }, TimeGrid::new(0.0, 0.4, 8).unwrap(), &GreenOptions::default()).unwrap();
        let masses: Vec<f64> = t.slices.iter().map(integrate).collect();
        for s in &t.slices {
            prop_assert!(s.min() >= -1e-8 * s.max());
        }
        if potential == 0.0 || !c.has_potential() {
            for m in &masses { prop_assert!((m - 1.0).abs() <= 1e-6); }
        }
        for w in masses.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-8);
        }
    }

    #[test]
    fn forward_l2_energy_decays(seed in 0u64..1000, potential in 0.0f64..1.0) {
        let g = Grid::new(2, 1.0, 32).unwrap();
        let plan = SpectralPlan::new(g);
        let c = Coefficients::synthetic(&plan, seed, 1.0, potential, 0.0, 0.1, 4).unwrap();
        let f0 = sample_field(g, &FieldDescriptor::Random { seed, max_mode: 4, amplitude: 1.0 }).unwrap();
        let steps = (0.1 / c.admissible_dt()).ceil() as usize;
        let traj = solve_forward(&plan, &c, &f0, &NoForcing, TimeGrid::new(0.0, 0.1, steps.max(10)).unwrap()).unwrap();
        let e0 = lp_norm(&f0, NormSpec::lp(2.0));
        for s in &traj.slices {
            prop_assert!(lp_norm(s, NormSpec::lp(2.0)) <= e0 * (1.0 + 1e-8));
        }
    }

    #[test]
    fn larger_potential_gives_smaller_solution(seed in 0u64..1000) {
        let g = Grid::new(1, 1.0, 64).unwrap();
        let plan = SpectralPlan::new(g);
        let base = Coefficients::synthetic(&plan, seed, 1.0, 1.0, 0.0, 0.1, 4).unwrap();
        let shifted = Coefficients::new(&plan, base.times.clone(), base.drift.clone(), base.potential.iter().map(|b| b.map(|v| v + 1.0)).collect(), base.drift_bound, base.potential_bound + 1.0).unwrap();
        let f0 = sample_field(g, &FieldDescriptor::Random { seed, max_mode: 3, amplitude: 1.0 }).unwrap().map(|v| v + 1.0);
        let dt = shifted.admissible_dt().min(base.admissible_dt());
        let tg = TimeGrid::new(0.0, 0.1, (0.1 / dt).ceil() as usize).unwrap();
        let a = solve_forward(&plan, &base, &f0, &NoForcing, tg).unwrap();
        let b = solve_forward(&plan, &shifted, &f0, &NoForcing, tg).unwrap();
        for (x, y) in a.slices.iter().zip(&b.slices) {
            for (u, v) in x.values.iter().zip(&y.values) {
                prop_assert!(*v <= *u + 1e-10);
            }
        }
    }
}
