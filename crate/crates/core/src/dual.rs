//! Dual problem for the difference of two solutions: the secant quotient,
//! the variable-diffusivity auxiliary solver, the nonlocal source assembly,
//! Picard iteration with damping escalation, the vanishing-viscosity sweep,
//! the energy budget and the duality identity residual.
//!
//! Snapshots are stored in forward time `τ`. The dual problem runs in
//! `θ = t − τ`; node `j` in `θ` reads snapshot `M − j`.

use crate::error::{Error, Result};
use crate::field::{lp_values, trapezoid_weights, Grid, ScalarField, TimeGrid, VectorField};
use crate::kssim::Simulation;
use crate::spectral::SpectralPlan;
use rustfft::num_complex::Complex64;
use serde::Serialize;

/// Time-indexed read access to a sequence of fields.
pub trait Samples {
    fn len(&self) -> usize;
    fn get(&self, j: usize) -> &ScalarField;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Forward view over a slice.
#[derive(Clone, Copy)]
pub struct Forward<'a>(pub &'a [ScalarField]);

impl Samples for Forward<'_> {
    fn len(&self) -> usize {
        self.0.len()
    }
    fn get(&self, j: usize) -> &ScalarField {
        &self.0[j]
    }
}

impl Samples for Vec<ScalarField> {
    fn len(&self) -> usize {
        Vec::len(self)
    }
    fn get(&self, j: usize) -> &ScalarField {
        &self[j]
    }
}

/// Index-reversed view: `get(j)` returns `inner[len − 1 − j]`.
#[derive(Clone, Copy)]
pub struct Reversed<'a>(pub &'a [ScalarField]);

impl Samples for Reversed<'_> {
    fn len(&self) -> usize {
        self.0.len()
    }
    fn get(&self, j: usize) -> &ScalarField {
        &self.0[self.0.len() - 1 - j]
    }
}

/// Two solutions sampled on a shared time grid, plus the static potential.
#[derive(Clone, Debug)]
pub struct Snapshots {
    pub times: Vec<f64>,
    pub eta1: Vec<ScalarField>,
    pub eta2: Vec<ScalarField>,
    pub c1: Vec<ScalarField>,
    pub c2: Vec<ScalarField>,
    pub v1: Vec<VectorField>,
    pub phi: ScalarField,
}

impl Snapshots {
    pub fn new(
        plan: &SpectralPlan,
        times: Vec<f64>,
        eta1: Vec<ScalarField>,
        eta2: Vec<ScalarField>,
        c1: Vec<ScalarField>,
        c2: Vec<ScalarField>,
        v1: Vec<VectorField>,
        phi: ScalarField,
    ) -> Result<Self> {
        let m = times.len();
        if m < 2 || times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::arg("snapshot times must be increasing with at least two entries"));
        }
        if [eta1.len(), eta2.len(), c1.len(), c2.len(), v1.len()].iter().any(|&l| l != m) {
            return Err(Error::arg("every snapshot series needs one field per time"));
        }
        let grid = plan.grid();
        for (name, series) in [("eta1", &eta1), ("eta2", &eta2), ("c1", &c1), ("c2", &c2)] {
            for f in series.iter() {
                if f.grid != grid || !f.is_finite() {
                    return Err(Error::arg(format!("{name} snapshot is off-grid or non-finite")));
                }
                if f.min() < 0.0 {
                    return Err(Error::Domain(format!("{name} snapshot has negative value {}", f.min())));
                }
            }
        }
        for v in &v1 {
            if v.grid() != grid || v.components.iter().any(|c| !c.is_finite()) {
                return Err(Error::arg("v1 snapshot is off-grid or non-finite"));
            }
            let div = plan.divergence(v).max_abs();
            if div > 1e-8 {
                return Err(Error::arg(format!("v1 snapshot divergence {div:e} exceeds 1e-8")));
            }
        }
        if phi.grid != grid || !phi.is_finite() {
            return Err(Error::arg("phi is off-grid or non-finite"));
        }
        Ok(Self { times, eta1, eta2, c1, c2, v1, phi })
    }

    /// Pairs two coupled runs sampled at the same output times.
    pub fn from_simulations(plan: &SpectralPlan, first: &Simulation, second: &Simulation, phi: ScalarField) -> Result<Self> {
        let times = first.times();
        let t2 = second.times();
        if times.len() != t2.len() || times.iter().zip(&t2).any(|(a, b)| (a - b).abs() > 1e-12) {
            return Err(Error::arg("simulations must share output times"));
        }
        Self::new(
            plan,
            times,
            first.states.iter().map(|s| s.eta.clone()).collect(),
            second.states.iter().map(|s| s.eta.clone()).collect(),
            first.states.iter().map(|s| s.c.clone()).collect(),
            second.states.iter().map(|s| s.c.clone()).collect(),
            first.states.iter().map(|s| s.v.clone()).collect(),
            phi,
        )
    }

    /// Quiescent snapshots: constant densities `eta`, no chemical, no flow, `φ = 0`.
    pub fn quiescent(grid: Grid, times: Vec<f64>, eta: f64) -> Result<Self> {
        let plan = SpectralPlan::new(grid);
        let m = times.len();
        let e = ScalarField::constant(grid, eta);
        let z = ScalarField::zeros(grid);
        Self::new(&plan, times, vec![e.clone(); m], vec![e; m], vec![z.clone(); m], vec![z.clone(); m], vec![VectorField::zeros(grid); m], z)
    }

    /// Seeded smooth snapshots with `η₁ = η₂` at the first time, positive
    /// densities, a divergence-free drift and a band-limited potential.
    pub fn synthetic(plan: &SpectralPlan, seed: u64, times: Vec<f64>) -> Result<Self> {
        use crate::field::{sample_field, FieldDescriptor};
        let grid = plan.grid();
        let field = |k: u64, amp: f64| sample_field(grid, &FieldDescriptor::Random { seed: seed.wrapping_mul(16).wrapping_add(k), max_mode: 2, amplitude: amp });
        let base = field(1, 0.3)?.map(|x| 1.0 + x);
        let q = field(2, 0.2)?;
        let m3 = field(3, 0.3)?;
        let m4 = field(4, 0.1)?;
        let phi = field(5, 1.0)?;
        let flow = VectorField { components: (0..grid.dim).map(|d| field(6 + d as u64, 0.5)).collect::<Result<_>>()? };
        let flow = plan.leray_project(&flow);
        let t0 = times[0];
        let span = (times[times.len() - 1] - t0).max(f64::MIN_POSITIVE);
        let (mut e1, mut e2, mut c1, mut c2, mut v1) = (vec![], vec![], vec![], vec![], vec![]);
        for &t in &times {
            let s = (t - t0) / span;
            let eta2 = base.scale(1.0 + 0.5 * s);
            let mut eta1 = eta2.clone();
            eta1.axpy((0.5 * std::f64::consts::PI * s).sin(), &q);
            let ca = m3.map(|x| 1.0 + x * (2.0 * s).cos());
            let mut cb = ca.clone();
            cb.axpy(s, &m4);
            e1.push(eta1);
            e2.push(eta2);
            c1.push(ca);
            c2.push(cb);
            v1.push(flow.scale((3.0 * s).cos()));
        }
        Self::new(plan, times, e1, e2, c1, c2, v1, phi)
    }

    pub fn grid(&self) -> Grid {
        self.phi.grid
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        self.times[self.times.len() - 1] - self.times[0]
    }

    /// Dual times `θ_j = t − τ_{M−j}`.
    pub fn theta(&self) -> Vec<f64> {
        let t = self.times[self.times.len() - 1];
        self.times.iter().rev().map(|&tau| t - tau).collect()
    }

    /// Snapshot index holding dual node `j`.
    pub fn tau_index(&self, j: usize) -> usize {
        self.times.len() - 1 - j
    }

    /// Difference `η₁ − η₂` at every snapshot.
    pub fn eta_difference(&self) -> Vec<ScalarField> {
        self.eta1.iter().zip(&self.eta2).map(|(a, b)| a.sub(b)).collect()
    }
}

/// Pointwise secant quotient `(η₁^{α+1} − η₂^{α+1}) / (η₁ − η₂)`.
#[allow(non_snake_case)]
pub fn quotient_A(eta1: &ScalarField, eta2: &ScalarField, alpha: f64) -> Result<ScalarField> {
    if eta1.grid != eta2.grid {
        return Err(Error::arg("quotient operands on different grids"));
    }
    if !(alpha > 0.0) {
        return Err(Error::arg(format!("alpha = {alpha} must be positive")));
    }
    let neg = eta1.min().min(eta2.min());
    if neg < 0.0 {
        return Err(Error::Domain(format!("quotient needs nonnegative densities, found {neg}")));
    }
    Ok(eta1.zip_map(eta2, |a, b| crate::kssim::secant_quotient(a, b, alpha).max(0.0)))
}

/// Output of [`auxiliary_solve`].
#[derive(Clone, Debug)]
pub struct AuxSolution {
    pub slices: Vec<ScalarField>,
    /// `(‖∂t f‖, δ‖∇²f‖, μ‖f‖)` in discrete `L²_T L²`.
    pub estimates: [f64; 3],
    pub substeps: usize,
}

/// Largest substep for the explicit variable-diffusivity part.
pub fn auxiliary_admissible_dt(grid: Grid, vmax: f64) -> f64 {
    let h = grid.spacing();
    if vmax <= 0.0 {
        f64::INFINITY
    } else {
        0.4 * h * h / (grid.dim as f64 * vmax)
    }
}

/// Solves `∂t f − (δ + V)Δf + μ f = g` on the nodes of `tg`.
///
/// Each substep applies `exp(−(δ|k|² + μ)dt)` to `f + dt (V Δ_h f + g)`,
/// with `Δ_h` the second-difference Laplacian and `V`, `g` interpolated
/// linearly between nodes.
pub fn auxiliary_solve(
    plan: &SpectralPlan,
    v: &dyn Samples,
    delta: f64,
    mu: f64,
    g: Option<&dyn Samples>,
    f0: &ScalarField,
    tg: &TimeGrid,
    dt: Option<f64>,
) -> Result<AuxSolution> {
    let grid = plan.grid();
    let m = tg.steps + 1;
    if !(delta > 0.0) || !(mu >= 0.0) {
        return Err(Error::arg(format!("need delta > 0 and mu >= 0, got {delta}, {mu}")));
    }
    if v.len() != m || g.map_or(false, |g| g.len() != m) {
        return Err(Error::arg("diffusivity and source need one sample per time node"));
    }
    let mut vmax = 0.0f64;
    for j in 0..m {
        let f = v.get(j);
        if f.min() < 0.0 {
            return Err(Error::Domain(format!("diffusivity has negative value {}", f.min())));
        }
        vmax = vmax.max(f.max());
    }
    let bound = auxiliary_admissible_dt(grid, vmax);
    let dt_out = tg.dt();
    let sub = dt.unwrap_or_else(|| bound.min(dt_out));
    if sub > bound * (1.0 + 1e-12) {
        return Err(Error::Stability { message: format!("auxiliary substep {sub:e}"), admissible_dt: bound });
    }
    let nsub = (dt_out / sub).ceil().max(1.0) as usize;
    let h = dt_out / nsub as f64;
    let decay: Vec<f64> = plan.k_squared().iter().map(|k| (-(delta * k + mu) * h).exp()).collect();
    let mut f = f0.clone();
    let mut slices = Vec::with_capacity(m);
    slices.push(f.clone());
    for j in 0..tg.steps {
        for s in 0..nsub {
            let w = s as f64 / nsub as f64;
            let lap = plan.fd_laplacian(&f);
            let (va, vb) = (v.get(j), v.get(j + 1));
            let mut work = f.values.clone();
            for i in 0..work.len() {
                let vi = (1.0 - w) * va.values[i] + w * vb.values[i];
                let mut inc = vi * lap.values[i];
                if let Some(g) = g {
                    inc += (1.0 - w) * g.get(j).values[i] + w * g.get(j + 1).values[i];
                }
                work[i] += h * inc;
            }
            let mut hat = plan.forward(&work);
            for (x, d) in hat.iter_mut().zip(&decay) {
                *x *= *d;
            }
            f = plan.to_field(hat);
        }
        slices.push(f.clone());
    }
    let estimates = regularity_estimates(plan, &slices, tg, delta, mu);
    Ok(AuxSolution { slices, estimates, substeps: nsub * tg.steps })
}

fn regularity_estimates(plan: &SpectralPlan, slices: &[ScalarField], tg: &TimeGrid, delta: f64, mu: f64) -> [f64; 3] {
    let times = tg.times();
    let dt = tg.dt();
    let m = slices.len();
    let dtf: Vec<ScalarField> = (0..m)
        .map(|j| {
            let (a, b, w) = if j == 0 {
                (0, 1, dt)
            } else if j == m - 1 {
                (m - 2, m - 1, dt)
            } else {
                (j - 1, j + 1, 2.0 * dt)
            };
            slices[b].sub(&slices[a]).scale(1.0 / w)
        })
        .collect();
    let hess: Vec<ScalarField> = slices.iter().map(|f| hessian_norm(plan, f)).collect();
    let l2 = |fs: &[ScalarField]| space_time_norm(&times, fs, 2.0, 2.0);
    [l2(&dtf), delta * l2(&hess), mu * l2(slices)]
}

/// Pointwise Frobenius norm of the spectral Hessian.
pub(crate) fn hessian_norm(plan: &SpectralPlan, f: &ScalarField) -> ScalarField {
    let grid = f.grid;
    let mut acc = vec![0.0; grid.len()];
    let first: Vec<ScalarField> = (0..grid.dim).map(|d| plan.derivative(f, d)).collect();
    for a in 0..grid.dim {
        for b in 0..grid.dim {
            let second = plan.derivative(&first[a], b);
            for (x, y) in acc.iter_mut().zip(&second.values) {
                *x += y * y;
            }
        }
    }
    ScalarField::from_raw(grid, acc.into_iter().map(f64::sqrt).collect())
}

/// Discrete `L^s_T L^p` norm with trapezoidal weights in time.
pub fn space_time_norm(times: &[f64], slices: &[ScalarField], s: f64, p: f64) -> f64 {
    if slices.is_empty() {
        return 0.0;
    }
    let dv = slices[0].grid.cell_volume();
    let norms: Vec<f64> = slices.iter().map(|f| lp_values(&f.values, dv, p)).collect();
    if times.len() < 2 {
        return norms[0];
    }
    if s.is_infinite() {
        return norms.iter().copied().fold(0.0, f64::max);
    }
    let w = trapezoid_weights(times);
    w.iter().zip(&norms).map(|(w, n)| w * n.powf(s)).sum::<f64>().powf(1.0 / s)
}

/// Step operators for `∂τ u + v₁·∇u − Δu + η₂ u = 0` between snapshot times
/// and their exact discrete transposes.
struct Propagator<'a> {
    plan: &'a SpectralPlan,
    snaps: &'a Snapshots,
    max_dt: f64,
}

impl<'a> Propagator<'a> {
    fn new(plan: &'a SpectralPlan, snaps: &'a Snapshots, max_dt: Option<f64>) -> Self {
        let h = plan.grid().spacing();
        let vmax = snaps.v1.iter().map(|v| v.max_abs()).fold(0.0, f64::max);
        let cfl = if vmax > 0.0 { 0.5 * h / vmax } else { f64::INFINITY };
        Self { plan, snaps, max_dt: max_dt.unwrap_or(f64::INFINITY).min(cfl) }
    }

    fn substeps(&self, r: usize) -> (usize, f64) {
        let span = self.snaps.times[r + 1] - self.snaps.times[r];
        let n = (span / self.max_dt).ceil().max(1.0) as usize;
        (n, span / n as f64)
    }

    fn coefficients(&self, r: usize, w: f64) -> (VectorField, ScalarField) {
        let s = self.snaps;
        let v = s.v1[r].scale(1.0 - w).add(&s.v1[r + 1].scale(w));
        let b = s.eta2[r].scale(1.0 - w).add(&s.eta2[r + 1].scale(w));
        (v, b)
    }

    fn half_heat(&self, u: &ScalarField, dt: f64) -> ScalarField {
        let mut hat = self.plan.forward(&u.values);
        self.plan.heat_hat(&mut hat, 0.5 * dt);
        self.plan.to_field(hat)
    }

    /// `τ_r → τ_{r+1}`.
    fn forward(&self, r: usize, u: &ScalarField) -> ScalarField {
        let (n, dt) = self.substeps(r);
        let mut u = u.clone();
        for k in 0..n {
            let (v, b) = self.coefficients(r, (k as f64 + 0.5) / n as f64);
            u = self.half_heat(&u, dt);
            let mut adv = u.clone();
            for d in 0..v.dim() {
                let du = self.plan.derivative(&u, d);
                for ((a, vd), g) in adv.values.iter_mut().zip(&v.components[d].values).zip(&du.values) {
                    *a -= dt * vd * g;
                }
            }
            let damped = adv.zip_map(&b, |x, e| x * (-e * dt).exp());
            u = self.half_heat(&damped, dt);
        }
        u
    }

    /// Transpose of [`Propagator::forward`] for the same interval.
    fn adjoint(&self, r: usize, u: &ScalarField) -> ScalarField {
        let (n, dt) = self.substeps(r);
        let mut u = u.clone();
        for k in (0..n).rev() {
            let (v, b) = self.coefficients(r, (k as f64 + 0.5) / n as f64);
            u = self.half_heat(&u, dt);
            let damped = u.zip_map(&b, |x, e| x * (-e * dt).exp());
            let mut out = damped.clone();
            for d in 0..v.dim() {
                let flux = v.components[d].mul(&damped);
                let df = self.plan.derivative(&flux, d);
                out.axpy(dt, &df);
            }
            u = self.half_heat(&out, dt);
        }
        u
    }
}

/// Regularized dual problem on a fixed set of snapshots.
#[derive(Clone, Debug)]
pub struct DualProblem<'a> {
    pub snapshots: &'a Snapshots,
    pub delta: f64,
    pub mu: f64,
    pub alpha: f64,
    pub psi0: ScalarField,
    /// Secant quotient at every snapshot time (forward order).
    pub a_field: Vec<ScalarField>,
    /// Substep cap for the drift-potential propagators.
    pub propagator_dt: Option<f64>,
    /// Substep for [`auxiliary_solve`]; `None` picks the stability bound.
    pub aux_dt: Option<f64>,
    grad_c1: Vec<VectorField>,
    grad_c2: Vec<VectorField>,
    grad_phi: VectorField,
}

impl<'a> DualProblem<'a> {
    pub fn new(plan: &SpectralPlan, snapshots: &'a Snapshots, delta: f64, mu: f64, alpha: f64, psi0: ScalarField) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::arg(format!("viscosity delta = {delta} must be positive")));
        }
        if !(mu >= 0.0 && mu.is_finite()) {
            return Err(Error::arg(format!("damping mu = {mu} must be nonnegative")));
        }
        if psi0.grid != snapshots.grid() || plan.grid() != snapshots.grid() {
            return Err(Error::arg("psi0, plan and snapshots must share a grid"));
        }
        let a_field = snapshots
            .eta1
            .iter()
            .zip(&snapshots.eta2)
            .map(|(a, b)| quotient_A(a, b, alpha))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            snapshots,
            delta,
            mu,
            alpha,
            psi0,
            a_field,
            propagator_dt: None,
            aux_dt: None,
            grad_c1: snapshots.c1.iter().map(|c| plan.gradient(c)).collect(),
            grad_c2: snapshots.c2.iter().map(|c| plan.gradient(c)).collect(),
            grad_phi: plan.gradient(&snapshots.phi),
        })
    }

    pub fn with_mu(&self, mu: f64) -> Self {
        Self { mu, ..self.clone() }
    }

    pub fn theta_grid(&self) -> Result<TimeGrid> {
        let th = self.snapshots.theta();
        let n = th.len() - 1;
        let tg = TimeGrid::new(th[0], th[n], n)?;
        if th.iter().enumerate().any(|(j, &t)| (t - tg.time(j)).abs() > 1e-9 * tg.dt()) {
            return Err(Error::arg("dual problem needs uniformly spaced snapshots"));
        }
        Ok(tg)
    }
}

/// The five source contributions `F₁..F₅` at every dual node.
#[derive(Clone, Debug)]
pub struct SourceTerms {
    pub terms: [Vec<ScalarField>; 5],
}

impl SourceTerms {
    pub fn total(&self) -> Vec<ScalarField> {
        let m = self.terms[0].len();
        (0..m)
            .map(|j| {
                let mut g = self.terms[0][j].clone();
                for t in &self.terms[1..] {
                    g.axpy(1.0, &t[j]);
                }
                g
            })
            .collect()
    }
}

fn dot_grad(a: &VectorField, g: &VectorField) -> ScalarField {
    a.dot_field(g)
}

/// `W_{j+1} = S(Δ)(W_j + Δ/2 ℙs_j) + Δ/2 ℙs_{j+1}` with `W_0 = 0`.
fn stokes_duhamel(plan: &SpectralPlan, theta: &[f64], sources: &[VectorField]) -> Vec<VectorField> {
    let grid = plan.grid();
    let m = theta.len();
    let projected = |s: &VectorField| -> Vec<Vec<Complex64>> {
        let mut h: Vec<Vec<Complex64>> = s.components.iter().map(|c| plan.forward(&c.values)).collect();
        plan.leray_hat(&mut h);
        h
    };
    let mut w: Vec<Vec<Complex64>> = vec![vec![Complex64::new(0.0, 0.0); grid.len()]; grid.dim];
    let mut out = vec![VectorField::zeros(grid)];
    let mut cur = projected(&sources[0]);
    for j in 0..m - 1 {
        let dt = theta[j + 1] - theta[j];
        let next = projected(&sources[j + 1]);
        for d in 0..grid.dim {
            for (x, s) in w[d].iter_mut().zip(&cur[d]) {
                *x += s * (0.5 * dt);
            }
            plan.heat_hat(&mut w[d], dt);
            for (x, s) in w[d].iter_mut().zip(&next[d]) {
                *x += s * (0.5 * dt);
            }
        }
        out.push(VectorField { components: w.iter().map(|h| plan.to_field(h.clone())).collect() });
        cur = next;
    }
    out
}

/// Builds `F₁..F₅` from a dual trajectory `ψ` (indexed by `θ`).
pub fn assemble_terms(plan: &SpectralPlan, psi: &dyn Samples, prob: &DualProblem) -> Result<SourceTerms> {
    let snaps = prob.snapshots;
    let m = snaps.len();
    if psi.len() != m {
        return Err(Error::arg(format!("dual trajectory has {} slices, snapshots cover {m}", psi.len())));
    }
    let theta = snaps.theta();
    let prop = Propagator::new(plan, snaps, prob.propagator_dt);
    let grads: Vec<VectorField> = (0..m).map(|j| plan.gradient(psi.get(j))).collect();
    let mut f1 = Vec::with_capacity(m);
    let mut f2 = Vec::with_capacity(m);
    let mut s_w = Vec::with_capacity(m);
    let mut sigma = Vec::with_capacity(m);
    for (j, g) in grads.iter().enumerate() {
        let r = snaps.tau_index(j);
        f1.push(dot_grad(&snaps.v1[r], g));
        f2.push(dot_grad(&prob.grad_c1[r], g));
        let flux = g.scale_by(&snaps.eta2[r]);
        sigma.push(plan.divergence(&flux).scale(-1.0));
        s_w.push(flux);
    }
    let w = stokes_duhamel(plan, &theta, &s_w);
    let f3: Vec<ScalarField> = w.iter().map(|w| dot_grad(&prob.grad_phi, w).scale(-1.0)).collect();

    let mut z = vec![ScalarField::zeros(plan.grid())];
    for j in 0..m - 1 {
        let dt = theta[j + 1] - theta[j];
        let mut start = z[j].clone();
        start.axpy(0.5 * dt, &sigma[j]);
        let mut next = prop.adjoint(snaps.tau_index(j + 1), &start);
        next.axpy(0.5 * dt, &sigma[j + 1]);
        z.push(next);
    }
    let f4: Vec<ScalarField> = (0..m).map(|j| snaps.c1[snaps.tau_index(j)].mul(&z[j])).collect();
    let s_y: Vec<VectorField> = (0..m).map(|j| prob.grad_c2[snaps.tau_index(j)].scale_by(&z[j])).collect();
    let y = stokes_duhamel(plan, &theta, &s_y);
    let f5: Vec<ScalarField> = y.iter().map(|y| dot_grad(&prob.grad_phi, y).scale(-1.0)).collect();
    Ok(SourceTerms { terms: [f1, f2, f3, f4, f5] })
}

/// `G = F₁ + … + F₅` at every dual node.
pub fn assemble_source(plan: &SpectralPlan, psi: &dyn Samples, prob: &DualProblem) -> Result<Vec<ScalarField>> {
    Ok(assemble_terms(plan, psi, prob)?.total())
}

#[derive(Clone, Debug)]
pub struct PicardOptions {
    /// Stop once `‖ψ_k − ψ_{k−1}‖ < tol · ‖ψ₁‖`.
    pub tol: f64,
    pub max_iter: usize,
    /// Escalate `μ` from `mu_start` by doubling; otherwise use the problem's `μ`.
    pub escalate: bool,
    pub mu_start: f64,
    pub mu_cap: f64,
    pub ratio_limit: f64,
    /// Exponents of the discrete `L^s_T L^p` metric.
    pub s: f64,
    pub p: f64,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 60, escalate: true, mu_start: 1.0, mu_cap: (1u64 << 20) as f64, ratio_limit: 0.9, s: 2.0, p: 2.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PicardReport {
    pub mu: f64,
    pub mu_tried: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Some ratio after the escalation window exceeded the limit.
    pub flagged: bool,
    pub norms: Vec<f64>,
    pub differences: Vec<f64>,
    pub ratios: Vec<f64>,
    pub max_ratio: f64,
    /// Norm of the first iterate, the reference bound for all iterates.
    pub first_norm: f64,
}

enum Attempt {
    Done(Vec<ScalarField>, PicardReport),
    Escalate(PicardReport),
}

fn picard_attempt(plan: &SpectralPlan, prob: &DualProblem, opts: &PicardOptions, check_window: bool) -> Result<Attempt> {
    let tg = prob.theta_grid()?;
    let theta = tg.times();
    let a = Reversed(&prob.a_field);
    let norm = |fs: &[ScalarField]| space_time_norm(&theta, fs, opts.s, opts.p);
    let first = auxiliary_solve(plan, &a, prob.delta, prob.mu, None, &prob.psi0, &tg, prob.aux_dt)?.slices;
    let first_norm = norm(&first);
    let mut report = PicardReport {
        mu: prob.mu,
        mu_tried: vec![prob.mu],
        iterations: 1,
        converged: false,
        flagged: false,
        norms: vec![first_norm],
        differences: Vec::new(),
        ratios: Vec::new(),
        max_ratio: 0.0,
        first_norm,
    };
    let scale = if first_norm > 0.0 { first_norm } else { 1.0 };
    let mut prev = first;
    for _ in 1..opts.max_iter {
        let g = assemble_source(plan, &prev, prob)?;
        let next = auxiliary_solve(plan, &a, prob.delta, prob.mu, Some(&g), &prob.psi0, &tg, prob.aux_dt)?.slices;
        let diff: Vec<ScalarField> = next.iter().zip(&prev).map(|(x, y)| x.sub(y)).collect();
        let d = norm(&diff);
        report.iterations += 1;
        report.norms.push(norm(&next));
        if let Some(&last) = report.differences.last() {
            if last > 0.0 {
                let ratio: f64 = d / last;
                report.ratios.push(ratio);
                report.max_ratio = report.max_ratio.max(ratio);
                if ratio > opts.ratio_limit {
                    if check_window && report.ratios.len() <= 3 {
                        report.differences.push(d);
                        return Ok(Attempt::Escalate(report));
                    }
                    report.flagged = true;
                }
            }
        }
        report.differences.push(d);
        prev = next;
        if !d.is_finite() {
            return Err(Error::Divergence(format!("non-finite Picard difference at mu = {}", prob.mu)));
        }
        if d < opts.tol * scale {
            report.converged = true;
            break;
        }
    }
    Ok(Attempt::Done(prev, report))
}

/// Picard iteration `ψ_k = aux(A, δ, μ, G[ψ_{k−1}], ψ₀)` starting from the
/// homogeneous solution, with optional doubling of `μ` until the first three
/// contraction ratios stay below the limit.
pub fn picard_solve(plan: &SpectralPlan, prob: &DualProblem, opts: &PicardOptions) -> Result<(Vec<ScalarField>, PicardReport)> {
    if !opts.escalate {
        return match picard_attempt(plan, prob, opts, false)? {
            Attempt::Done(psi, rep) => Ok((psi, rep)),
            Attempt::Escalate(_) => unreachable!("escalation disabled"),
        };
    }
    let mut mu = opts.mu_start.max(f64::MIN_POSITIVE);
    let mut tried = Vec::new();
    loop {
        tried.push(mu);
        let p = prob.with_mu(mu);
        match picard_attempt(plan, &p, opts, true)? {
            Attempt::Done(psi, mut rep) => {
                rep.mu_tried = tried;
                return Ok((psi, rep));
            }
            Attempt::Escalate(rep) => {
                if mu * 2.0 > opts.mu_cap {
                    return Err(Error::Divergence(format!(
                        "no contraction up to mu = {mu}: ratios {:?}",
                        rep.ratios
                    )));
                }
                mu *= 2.0;
            }
        }
    }
}

/// One row of a viscosity sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRecord {
    pub delta: f64,
    pub mu: f64,
    pub iters: usize,
    pub max_ratio: f64,
    pub delta_l2_dpsi_sq: f64,
    pub delta_chi_pairing: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepResult {
    pub records: Vec<SweepRecord>,
    /// Slope of `log |δ∫∫χΔψ|` against `log δ`, if every pairing is nonzero.
    pub decay_exponent: Option<f64>,
    /// `max / min` of `δ‖Δψ‖²` over the sweep, if the minimum is positive.
    pub bound_ratio: Option<f64>,
    pub reports: Vec<PicardReport>,
}

/// Solves the dual problem for each viscosity and records the viscous terms.
/// `chi` is indexed by `θ` like the dual trajectory.
pub fn viscosity_sweep(
    plan: &SpectralPlan,
    template: &DualProblem,
    deltas: &[f64],
    chi: &[ScalarField],
    opts: &PicardOptions,
) -> Result<SweepResult> {
    use rayon::prelude::*;
    if deltas.len() < 2 {
        return Err(Error::arg("sweep needs at least two viscosities"));
    }
    let (lo, hi) = deltas.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &d| (l.min(d), h.max(d)));
    if hi / lo < 100.0 * (1.0 - 1e-9) {
        return Err(Error::arg("viscosity list must span at least two decades"));
    }
    if chi.len() != template.snapshots.len() {
        return Err(Error::arg("test field needs one slice per dual node"));
    }
    let theta = template.snapshots.theta();
    let weights = trapezoid_weights(&theta);
    let runs: Vec<Result<(SweepRecord, PicardReport)>> = crate::with_pool(|| {
        deltas
            .par_iter()
            .map(|&delta| {
                let prob = DualProblem { delta, ..template.clone() };
                let (psi, rep) = picard_solve(plan, &prob, opts)?;
                let lap: Vec<ScalarField> = psi.iter().map(|p| plan.laplacian(p)).collect();
                let sq = space_time_norm(&theta, &lap, 2.0, 2.0).powi(2);
                let pairing: f64 = weights.iter().zip(&lap).zip(chi).map(|((w, l), c)| w * l.dot(c)).sum();
                let rec = SweepRecord {
                    delta,
                    mu: rep.mu,
                    iters: rep.iterations,
                    max_ratio: rep.max_ratio,
                    delta_l2_dpsi_sq: delta * sq,
                    delta_chi_pairing: delta * pairing,
                };
                Ok((rec, rep))
            })
            .collect()
    });
    let mut records = Vec::new();
    let mut reports = Vec::new();
    for r in runs {
        let (rec, rep) = r?;
        records.push(rec);
        reports.push(rep);
    }
    let decay_exponent = if records.iter().all(|r| r.delta_chi_pairing != 0.0) {
        let x: Vec<f64> = records.iter().map(|r| r.delta.ln()).collect();
        let y: Vec<f64> = records.iter().map(|r| r.delta_chi_pairing.abs().ln()).collect();
        Some(crate::spectral::linear_fit(&x, &y).0)
    } else {
        None
    };
    let (bmin, bmax) = records
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(l, h), r| (l.min(r.delta_l2_dpsi_sq), h.max(r.delta_l2_dpsi_sq)));
    let bound_ratio = if bmin > 0.0 { Some(bmax / bmin) } else { None };
    Ok(SweepResult { records, decay_exponent, bound_ratio, reports })
}

pub fn write_sweep_csv<W: std::io::Write>(result: &SweepResult, mut w: W) -> std::io::Result<()> {
    use crate::green::fmt_float;
    writeln!(w, "delta,mu,iters,max_ratio,delta_l2_dpsi_sq,delta_chi_pairing")?;
    for r in &result.records {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            fmt_float(r.delta),
            fmt_float(r.mu),
            r.iters,
            fmt_float(r.max_ratio),
            fmt_float(r.delta_l2_dpsi_sq),
            fmt_float(r.delta_chi_pairing)
        )?;
    }
    Ok(())
}

/// Terms of the `‖∇ψ‖²` energy identity along a dual trajectory.
#[derive(Clone, Debug, Serialize)]
pub struct EnergyBudget {
    pub theta: Vec<f64>,
    /// `I..V`: `−∫F_i Δψ` at each node.
    pub terms: [Vec<f64>; 5],
    pub grad_sq: Vec<f64>,
    /// `∫(δ + A)|Δψ|²` at each node.
    pub dissipation: Vec<f64>,
    /// Gronwall majorant assembled from snapshot norms.
    pub majorant: f64,
    /// Per step: `d/dθ ‖∇ψ‖²`, the majorant bound, and the slack used.
    pub growth: Vec<f64>,
    pub bound: Vec<f64>,
    pub slack: Vec<f64>,
    pub holds: bool,
}

fn max_over(fs: impl Iterator<Item = f64>) -> f64 {
    fs.fold(0.0, f64::max)
}

fn jacobian_sup(plan: &SpectralPlan, v: &VectorField) -> f64 {
    let grid = v.grid();
    let mut acc = vec![0.0; grid.len()];
    for c in &v.components {
        for d in 0..grid.dim {
            let g = plan.derivative(c, d);
            for (a, x) in acc.iter_mut().zip(&g.values) {
                *a += x * x;
            }
        }
    }
    acc.into_iter().fold(0.0, f64::max).sqrt()
}

/// Gronwall majorant `𝒥` with unknown embedding constants set to `constant`.
pub fn gronwall_majorant(plan: &SpectralPlan, snaps: &Snapshots, constant: f64) -> f64 {
    let t = snaps.horizon();
    let dv = snaps.grid().cell_volume();
    let phi = &snaps.phi;
    let phi_w2 = phi.max_abs().max(plan.gradient(phi).max_abs()).max(hessian_norm(plan, phi).max_abs());
    let grad_v1 = max_over(snaps.v1.iter().map(|v| jacobian_sup(plan, v)));
    let hess_c1 = max_over(snaps.c1.iter().map(|c| hessian_norm(plan, c).max_abs()));
    let lap_c1 = max_over(snaps.c1.iter().map(|c| plan.laplacian(c).max_abs()));
    let eta2_l3 = max_over(snaps.eta2.iter().map(|e| lp_values(&e.values, dv, 3.0)));
    let eta2_inf = max_over(snaps.eta2.iter().map(|e| e.max_abs()));
    let c1_w1 = max_over(snaps.c1.iter().map(|c| c.max_abs().max(plan.gradient(c).max_abs())));
    let grad_c2_l3 = max_over(snaps.c2.iter().map(|c| lp_values(&plan.gradient(c).magnitude().values, dv, 3.0)));
    let growth = constant * (1.0 + t * t);
    phi_w2 * phi_w2
        + grad_v1
        + hess_c1
        + lap_c1
        + growth * eta2_l3.max(eta2_inf).powi(2)
        + c1_w1 * c1_w1
        + growth * grad_c2_l3 * grad_c2_l3 * eta2_inf * eta2_inf
}

/// Evaluates the energy identity along `psi` and checks the Gronwall-type
/// growth bound `d/dθ‖∇ψ‖² ≤ 𝒥 ‖∇ψ‖²` with 10% slack plus the discrete
/// mismatch of the identity itself.
pub fn energy_budget(plan: &SpectralPlan, psi: &[ScalarField], prob: &DualProblem, constant: f64) -> Result<EnergyBudget> {
    let snaps = prob.snapshots;
    let theta = snaps.theta();
    let m = theta.len();
    let src = assemble_terms(plan, &Forward(psi), prob)?;
    let lap: Vec<ScalarField> = psi.iter().map(|p| plan.laplacian(p)).collect();
    let mut terms: [Vec<f64>; 5] = Default::default();
    for (i, t) in terms.iter_mut().enumerate() {
        *t = (0..m).map(|j| -src.terms[i][j].dot(&lap[j])).collect();
    }
    let grad_sq: Vec<f64> = psi.iter().map(|p| plan.gradient(p).dot(&plan.gradient(p))).collect();
    let dissipation: Vec<f64> = (0..m)
        .map(|j| {
            let a = &prob.a_field[snaps.tau_index(j)];
            let w = lap[j].zip_map(a, |l, a| (prob.delta + a) * l * l);
            crate::field::integrate(&w)
        })
        .collect();
    let majorant = gronwall_majorant(plan, snaps, constant);
    let rate = |j: usize| -> f64 {
        let forcing: f64 = terms.iter().map(|t| t[j]).sum();
        2.0 * (forcing - prob.mu * grad_sq[j] - dissipation[j])
    };
    let mut growth = Vec::with_capacity(m - 1);
    let mut bound = Vec::with_capacity(m - 1);
    let mut slack = Vec::with_capacity(m - 1);
    let mut holds = true;
    for j in 0..m - 1 {
        let dt = theta[j + 1] - theta[j];
        let g = (grad_sq[j + 1] - grad_sq[j]) / dt;
        let b = majorant * grad_sq[j].max(grad_sq[j + 1]);
        let mismatch = (g - 0.5 * (rate(j) + rate(j + 1))).abs();
        let s = 0.1 * b.abs() + mismatch;
        if g > b + s {
            holds = false;
        }
        growth.push(g);
        bound.push(b);
        slack.push(s);
    }
    Ok(EnergyBudget { theta, terms, grad_sq, dissipation, majorant, growth, bound, slack, holds })
}

/// Both sides of the duality identity and their mismatch.
#[derive(Clone, Debug, Serialize)]
pub struct DualityReport {
    pub lhs: f64,
    pub rhs: f64,
    /// Pairing of the test field with the defect of the difference equation.
    pub defect: f64,
    pub residual: f64,
    pub scale: f64,
}

fn time_derivative(times: &[f64], fs: &[ScalarField]) -> Vec<ScalarField> {
    let m = fs.len();
    (0..m)
        .map(|j| {
            let (i0, i1, i2) = if j == 0 {
                (0, 1, 2)
            } else if j == m - 1 {
                (m - 3, m - 2, m - 1)
            } else {
                (j - 1, j, j + 1)
            };
            let (t0, t1, t2, t) = (times[i0], times[i1], times[i2], times[j]);
            let w0 = ((t - t1) + (t - t2)) / ((t0 - t1) * (t0 - t2));
            let w1 = ((t - t0) + (t - t2)) / ((t1 - t0) * (t1 - t2));
            let w2 = ((t - t0) + (t - t1)) / ((t2 - t0) * (t2 - t1));
            let mut d = fs[i0].scale(w0);
            d.axpy(w1, &fs[i1]);
            d.axpy(w2, &fs[i2]);
            d
        })
        .collect()
}

/// Residual of `∫η(t)Φ(t) − ∫η(0)Φ(0) + δ∫∫ηΔΦ = ∫∫η𝒟*Φ + ∫∫ΦR`, where
/// `η = η₁ − η₂`, `R` is the defect of `η` in the difference equation with
/// `v`, `c` rebuilt from `η` by their Duhamel formulas, and `𝒟*Φ` is
/// assembled with the same kernel realizations as [`assemble_source`].
/// `phi_test` is indexed by forward time.
pub fn duality_identity_residual(plan: &SpectralPlan, prob: &DualProblem, phi_test: &[ScalarField]) -> Result<DualityReport> {
    let snaps = prob.snapshots;
    let m = snaps.len();
    if phi_test.len() != m {
        return Err(Error::arg("test field needs one slice per snapshot"));
    }
    if m < 3 {
        return Err(Error::InsufficientData("duality residual needs at least three snapshots".into()));
    }
    let times = &snaps.times;
    let w = trapezoid_weights(times);
    let eta = snaps.eta_difference();
    let grid = plan.grid();
    let grad_phi = &prob.grad_phi;

    // v[η] by the Stokes Duhamel recursion, c[η] by the drift-potential propagator.
    let forcing: Vec<VectorField> = eta.iter().map(|e| grad_phi.scale_by(e).scale(-1.0)).collect();
    let v = stokes_duhamel(plan, times, &forcing);
    let prop = Propagator::new(plan, snaps, prob.propagator_dt);
    let source: Vec<ScalarField> = (0..m)
        .map(|r| {
            let mut f = snaps.c1[r].mul(&eta[r]);
            f.axpy(1.0, &v[r].dot_field(&prob.grad_c2[r]));
            f.scale(-1.0)
        })
        .collect();
    let mut c = vec![ScalarField::zeros(grid)];
    for r in 0..m - 1 {
        let dt = times[r + 1] - times[r];
        let mut start = c[r].clone();
        start.axpy(0.5 * dt, &source[r]);
        let mut next = prop.forward(r, &start);
        next.axpy(0.5 * dt, &source[r + 1]);
        c.push(next);
    }

    let deta = time_derivative(times, &eta);
    let dphi = time_derivative(times, phi_test);
    let g = assemble_terms(plan, &Reversed(phi_test), prob)?;
    let mut parts: Vec<f64> = Vec::new();
    let mut rhs = 0.0;
    let mut defect = 0.0;
    let mut viscous = 0.0;
    for r in 0..m {
        let lap_phi = plan.laplacian(&phi_test[r]);
        let a = &prob.a_field[r];
        let e = &eta[r];
        let j = snaps.tau_index(r);
        let mut local = vec![e.dot(&dphi[r]), e.dot(&lap_phi) * prob.delta, e.dot(&a.mul(&lap_phi))];
        for t in &g.terms {
            local.push(e.dot(&t[j]));
        }
        // Defect R = ∂τη + ∇·(v₁η) + ∇·(vη₂) − Δ(Aη) + ∇·(η∇c₁) − ∇·(η₂∇c).
        let mut flux = snaps.v1[r].scale_by(e);
        flux = flux.add(&v[r].scale_by(&snaps.eta2[r]));
        flux = flux.add(&prob.grad_c1[r].scale_by(e));
        flux = flux.sub(&plan.gradient(&c[r]).scale_by(&snaps.eta2[r]));
        let mut defect_field = deta[r].add(&plan.divergence(&flux));
        defect_field.axpy(-1.0, &plan.laplacian(&a.mul(e)));
        let d = phi_test[r].dot(&defect_field);
        rhs += w[r] * local.iter().sum::<f64>();
        viscous += w[r] * local[1];
        defect += w[r] * d;
        parts.extend(local.iter().map(|x| (w[r] * x).abs()));
        parts.push((w[r] * d).abs());
    }
    let end = eta[m - 1].dot(&phi_test[m - 1]);
    let start = eta[0].dot(&phi_test[0]);
    let lhs = end - start + viscous;
    let scale = parts.iter().sum::<f64>() + end.abs() + start.abs() + viscous.abs();
    let mismatch = lhs - rhs - defect;
    let residual = if scale > 0.0 { mismatch.abs() / scale } else { 0.0 };
    Ok(DualityReport { lhs, rhs, defect, residual, scale })
}
