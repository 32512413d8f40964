use criterion::{criterion_group, criterion_main, Criterion};
use parakernel::dual::auxiliary_solve;
use parakernel::green::{green_function_at, Coefficients, GreenOptions, SourcePoint};
use parakernel::kssim::{admissible_dt, ks_step, KSParams, KSState};
use parakernel::{sample_field, FieldDescriptor, Grid, ScalarField, SpectralPlan, TimeGrid};
use std::hint::black_box;

fn random(g: Grid, seed: u64) -> ScalarField {
    sample_field(g, &FieldDescriptor::Random { seed, max_mode: 3, amplitude: 0.5 }).unwrap()
}

fn heat_step(c: &mut Criterion) {
    let g = Grid::new(2, 1.0, 128).unwrap();
    let plan = SpectralPlan::new(g);
    let f = random(g, 1);
    c.bench_function("heat_semigroup_128x128", |b| b.iter(|| plan.heat_semigroup(black_box(&f), 1e-3).unwrap()));
}

fn coupled_step(c: &mut Criterion) {
    let g = Grid::new(2, 1.0, 64).unwrap();
    let plan = SpectralPlan::new(g);
    let (params, _) = KSParams::new(0.5, random(g, 2)).unwrap();
    let mut s = KSState::zeros(g);
    s.eta = random(g, 3).map(|x| x + 1.0);
    s.c = random(g, 4).map(|x| x + 1.0);
    let grad_phi = plan.gradient(&params.phi);
    let dt = 0.4 * admissible_dt(&s, &params);
    c.bench_function("ks_step_64x64", |b| b.iter(|| ks_step(&plan, black_box(&s), &params, &grad_phi, dt).unwrap()));
}

fn green_solve(c: &mut Criterion) {
    let g = Grid::new(2, 1.0, 64).unwrap();
    let plan = SpectralPlan::new(g);
    let coeffs = Coefficients::synthetic(&plan, 5, 1.0, 1.0, 0.0, 0.05, 4).unwrap();
    let source = SourcePoint { time: 0.0, node: g.flat_index([32, 32, 0]) };
    let opts = GreenOptions::default();
    c.bench_function("green_function_64x64", |b| b.iter(|| green_function_at(&plan, &coeffs, source, &[0.02], &opts).unwrap()));
}

fn aux_solve(c: &mut Criterion) {
    let g = Grid::new(2, 1.0, 64).unwrap();
    let plan = SpectralPlan::new(g);
    let tg = TimeGrid::new(0.0, 0.05, 16).unwrap();
    let v: Vec<ScalarField> = (0..17).map(|j| random(g, 10 + j).map(|x| x + 1.0)).collect();
    let f0 = random(g, 6);
    c.bench_function("auxiliary_solve_64x64", |b| b.iter(|| auxiliary_solve(&plan, &v, 0.01, 1.0, None, black_box(&f0), &tg, None).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = heat_step, coupled_step, green_solve, aux_solve
}
criterion_main!(benches);
