//! Time stepper for the porous-medium chemotaxis system coupled to Stokes flow:
//!
//! ```text
//! ∂t η + v·∇η − Δη^{1+α} + ∇·(η ∇c) = 0
//! ∂t c + v·∇c − Δc + c η = 0
//! ∂t v − Δv + ∇p + η ∇φ = 0,   ∇·v = 0
//! ```

use crate::error::{Error, Result};
use crate::field::{boundary_fraction, integrate, Grid, ScalarField, TimeGrid, VectorField};
use crate::spectral::SpectralPlan;
use rustfft::num_complex::Complex64;
use serde::Serialize;

pub const SCHEME_VERSION: &str = "ks-fv-upwind-secant/1";

#[derive(Clone, Debug)]
pub struct KSParams {
    pub alpha: f64,
    pub phi: ScalarField,
    /// Fraction of the admissible step actually taken by `run_simulation`.
    pub safety: f64,
    /// Lower bound on the diffusivity used in the step bound.
    pub delta_floor: f64,
}

impl KSParams {
    /// Validates `α > 0`; `α ≤ 1/8` is accepted with a warning string.
    pub fn new(alpha: f64, phi: ScalarField) -> Result<(Self, Vec<String>)> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::arg(format!("alpha = {alpha} must be positive")));
        }
        let mut warnings = Vec::new();
        if alpha <= 0.125 {
            warnings.push(format!("alpha = {alpha} is at or below 1/8, outside the existence regime"));
        }
        if !phi.is_finite() {
            return Err(Error::arg("potential phi has non-finite values"));
        }
        Ok((Self { alpha, phi, safety: 0.4, delta_floor: 1e-10 }, warnings))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KSState {
    pub t: f64,
    pub eta: ScalarField,
    pub c: ScalarField,
    pub v: VectorField,
}

impl KSState {
    pub fn zeros(grid: Grid) -> Self {
        Self { t: 0.0, eta: ScalarField::zeros(grid), c: ScalarField::zeros(grid), v: VectorField::zeros(grid) }
    }

    pub fn grid(&self) -> Grid {
        self.eta.grid
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Diagnostics {
    pub t: f64,
    pub mass: f64,
    pub min_eta: f64,
    pub c_inf: f64,
    pub kinetic: f64,
    pub div_res: f64,
    pub boundary: f64,
}

pub fn diagnostics(plan: &SpectralPlan, state: &KSState) -> Diagnostics {
    Diagnostics {
        t: state.t,
        mass: integrate(&state.eta),
        min_eta: state.eta.min(),
        c_inf: state.c.max_abs(),
        kinetic: 0.5 * state.v.dot(&state.v),
        div_res: plan.divergence(&state.v).max_abs(),
        boundary: boundary_fraction(&state.eta),
    }
}

/// Face secant quotient `(a^{m} − b^{m}) / (a − b)` with `m = 1 + α`.
#[inline]
pub fn secant_quotient(a: f64, b: f64, alpha: f64) -> f64 {
    let m = 1.0 + alpha;
    if (a - b).abs() < 1e-12 {
        m * a.max(0.0).powf(alpha)
    } else {
        (a.max(0.0).powf(m) - b.max(0.0).powf(m)) / (a - b)
    }
}

fn max_face_gradient(f: &ScalarField) -> f64 {
    let g = f.grid;
    let mut m = 0.0f64;
    for d in 0..g.dim {
        for i in 0..g.len() {
            let up = g.shifted(i, d, 1);
            m = m.max((f.values[up] - f.values[i]).abs());
        }
    }
    m / g.spacing()
}

/// Largest step allowed by the diffusive and advective bounds.
pub fn admissible_dt(state: &KSState, params: &KSParams) -> f64 {
    let h = state.grid().spacing();
    let emax = state.eta.max().max(0.0);
    let diff = (1.0 + params.alpha) * emax.powf(params.alpha);
    let adv = state.v.max_abs() + max_face_gradient(&state.c) + 1e-12;
    (0.4 * h * h / diff.max(params.delta_floor)).min(0.5 * h / adv)
}

/// One split step: η by limited finite-volume fluxes, then c, then v.
pub fn ks_step(plan: &SpectralPlan, state: &KSState, params: &KSParams, grad_phi: &VectorField, dt: f64) -> Result<KSState> {
    let bound = admissible_dt(state, params);
    if !(dt > 0.0) || dt > bound * (1.0 + 1e-12) {
        return Err(Error::Stability { message: format!("ks_step with dt = {dt:e}"), admissible_dt: bound });
    }
    let eta = eta_update(state, params.alpha, dt);
    let c = c_update(plan, state, &eta, dt)?;
    let v = v_update(plan, &state.v, &eta, grad_phi, dt);
    Ok(KSState { t: state.t + dt, eta, c, v })
}

fn eta_update(state: &KSState, alpha: f64, dt: f64) -> ScalarField {
    let g = state.grid();
    let n = g.points;
    let h = g.spacing();
    let eta = &state.eta.values;
    let c = &state.c.values;
    // Face transfers (amount moved from cell i to its upper neighbour) per axis.
    let mut faces: Vec<Vec<f64>> = Vec::with_capacity(g.dim);
    let mut outflow = vec![0.0; g.len()];
    for d in 0..g.dim {
        let stride = g.stride(d);
        let vd = &state.v.components[d].values;
        let mut flux = vec![0.0; g.len()];
        for i in 0..g.len() {
            let m = (i / stride) % n;
            let up = if m + 1 == n { i + stride - n * stride } else { i + stride };
            let w = 0.5 * (vd[i] + vd[up]) + (c[up] - c[i]) / h;
            let adv = if w >= 0.0 { w * eta[i] } else { w * eta[up] };
            let diff = -secant_quotient(eta[i], eta[up], alpha) * (eta[up] - eta[i]) / h;
            let amount = dt / h * (adv + diff);
            flux[i] = amount;
            if amount > 0.0 {
                outflow[i] += amount;
            } else {
                outflow[up] -= amount;
            }
        }
        faces.push(flux);
    }
    let scale: Vec<f64> = outflow
        .iter()
        .zip(eta)
        .map(|(&o, &e)| if o > e { e.max(0.0) / o } else { 1.0 })
        .collect();
    let mut out = eta.clone();
    for (d, flux) in faces.iter().enumerate() {
        let stride = g.stride(d);
        for i in 0..g.len() {
            let m = (i / stride) % n;
            let up = if m + 1 == n { i + stride - n * stride } else { i + stride };
            let f = flux[i];
            let f = if f > 0.0 { f * scale[i] } else { f * scale[up] };
            out[i] -= f;
            out[up] += f;
        }
    }
    for v in out.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    ScalarField::from_raw(g, out)
}

fn c_update(plan: &SpectralPlan, state: &KSState, eta: &ScalarField, dt: f64) -> Result<ScalarField> {
    let g = state.grid();
    let h = g.spacing();
    let c = &state.c.values;
    let mut adv = c.clone();
    for d in 0..g.dim {
        let vd = &state.v.components[d].values;
        for i in 0..g.len() {
            let w = vd[i];
            let j = if w >= 0.0 { g.shifted(i, d, -1) } else { g.shifted(i, d, 1) };
            adv[i] -= dt / h * w.abs() * (c[i] - c[j]);
        }
    }
    let cmax = adv.iter().copied().fold(0.0f64, f64::max);
    let mut diffused = plan.fd_heat(&ScalarField::from_raw(g, adv), dt)?;
    for (v, e) in diffused.values.iter_mut().zip(&eta.values) {
        *v = v.clamp(0.0, cmax) * (-e * dt).exp();
    }
    Ok(diffused)
}

fn v_update(plan: &SpectralPlan, v: &VectorField, eta: &ScalarField, grad_phi: &VectorField, dt: f64) -> VectorField {
    let mut vh: Vec<Vec<Complex64>> = v.components.iter().map(|c| plan.forward(&c.values)).collect();
    let mut fh: Vec<Vec<Complex64>> = grad_phi
        .components
        .iter()
        .map(|g| plan.forward(&g.mul(eta).values))
        .collect();
    plan.leray_hat(&mut vh);
    plan.leray_hat(&mut fh);
    let k2 = plan.k_squared();
    for (a, f) in vh.iter_mut().zip(&fh) {
        for ((x, y), k) in a.iter_mut().zip(f).zip(k2) {
            *x = *x * (-k * dt).exp() - y * (dt * (-0.5 * k * dt).exp());
        }
    }
    VectorField { components: vh.into_iter().map(|h| plan.to_field(h)).collect() }
}

/// Output of [`run_simulation`]: states and diagnostics at every output time.
#[derive(Clone, Debug)]
pub struct Simulation {
    pub states: Vec<KSState>,
    pub diagnostics: Vec<Diagnostics>,
    pub steps: usize,
    pub warnings: Vec<String>,
}

impl Simulation {
    pub fn times(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.t).collect()
    }

    pub fn final_state(&self) -> &KSState {
        self.states.last().expect("simulation has at least one state")
    }
}

/// Marches from `initial` through every node of `tg` with adaptive substeps.
pub fn run_simulation(plan: &SpectralPlan, params: &KSParams, initial: &KSState, tg: &TimeGrid) -> Result<Simulation> {
    let g = initial.grid();
    if g != plan.grid() || params.phi.grid != g {
        return Err(Error::InvalidGrid("state, potential and plan grids differ".into()));
    }
    if initial.eta.min() < 0.0 || initial.c.min() < 0.0 {
        return Err(Error::arg("initial eta and c must be nonnegative"));
    }
    let div = plan.divergence(&initial.v).max_abs();
    if div > 1e-8 {
        return Err(Error::arg(format!("initial velocity has divergence {div:e}")));
    }
    let grad_phi = plan.gradient(&params.phi);
    let mut state = initial.clone();
    state.t = tg.t0;
    let mut states = vec![state.clone()];
    let mut diags = vec![diagnostics(plan, &state)];
    let mut steps = 0usize;
    for j in 1..=tg.steps {
        let target = tg.time(j);
        while state.t < target - 1e-14 * target.abs().max(1.0) {
            let dt = (params.safety * admissible_dt(&state, params)).min(target - state.t);
            let mut next = ks_step(plan, &state, params, &grad_phi, dt)?;
            steps += 1;
            if next.eta.values.iter().chain(&next.c.values).any(|v| !v.is_finite())
                || next.v.components.iter().any(|c| !c.is_finite())
            {
                return Err(Error::InvariantBreach { step: steps, t: next.t, message: "non-finite value".into() });
            }
            let neg = next.eta.min().min(next.c.min());
            if neg < -1e-12 {
                return Err(Error::InvariantBreach { step: steps, t: next.t, message: format!("negative density {neg:e}") });
            }
            if target - next.t < 1e-14 * target.abs().max(1.0) {
                next.t = target;
            }
            state = next;
        }
        states.push(state.clone());
        diags.push(diagnostics(plan, &state));
    }
    Ok(Simulation { states, diagnostics: diags, steps, warnings: Vec::new() })
}

/// Self-similar porous-medium profile with exponent `m = 1 + α` and shape constant `c0`.
pub fn barenblatt(grid: Grid, center: [f64; 3], alpha: f64, c0: f64, t: f64) -> ScalarField {
    let n = grid.dim as f64;
    let m = 1.0 + alpha;
    let beta = 1.0 / (n * (m - 1.0) + 2.0);
    let k = (m - 1.0) * beta / (2.0 * m);
    ScalarField::from_fn(grid, |x| {
        let r2: f64 = (0..grid.dim).map(|d| grid.periodic_delta(x[d], center[d]).powi(2)).sum();
        let core = c0 - k * r2 * t.powf(-2.0 * beta);
        t.powf(-n * beta) * core.max(0.0).powf(1.0 / (m - 1.0))
    })
}

/// Exponent `1 / (n α + 2)` of the self-similar support radius.
pub fn barenblatt_exponent(dim: usize, alpha: f64) -> f64 {
    1.0 / (dim as f64 * alpha + 2.0)
}

/// Largest distance from `center` at which `f` exceeds `rel` times its peak,
/// interpolated linearly along each axis across the threshold crossing.
pub fn support_radius(f: &ScalarField, center: [f64; 3], rel: f64) -> f64 {
    let g = f.grid;
    let thr = rel * f.max();
    let mut r = 0.0f64;
    for i in 0..g.len() {
        let fi = f.values[i];
        if fi <= thr {
            continue;
        }
        let x = g.coords(i);
        let ri = (0..g.dim).map(|d| g.periodic_delta(x[d], center[d]).powi(2)).sum::<f64>().sqrt();
        for d in 0..g.dim {
            for off in [-1isize, 1] {
                let j = g.shifted(i, d, off);
                let fj = f.values[j];
                if fj > thr {
                    continue;
                }
                let y = g.coords(j);
                let rj = (0..g.dim).map(|e| g.periodic_delta(y[e], center[e]).powi(2)).sum::<f64>().sqrt();
                if rj <= ri {
                    continue;
                }
                let w = (fi - thr) / (fi - fj);
                r = r.max(ri + w * (rj - ri));
            }
        }
        r = r.max(ri);
    }
    r
}

/// Root-mean-square distance from `center` weighted by `f`.
pub fn moment_radius(f: &ScalarField, center: [f64; 3]) -> f64 {
    let g = f.grid;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..g.len() {
        let x = g.coords(i);
        let r2: f64 = (0..g.dim).map(|d| g.periodic_delta(x[d], center[d]).powi(2)).sum();
        num += r2 * f.values[i];
        den += f.values[i];
    }
    (num / den).sqrt()
}

/// Settings for the Green-function reconstruction of `c`.
#[derive(Clone, Debug, Default)]
pub struct CReconstructOptions {
    pub duhamel: crate::green::DuhamelOptions,
    /// Compare only every `stride`-th output (0 or 1 compares all of them).
    pub stride: usize,
}

/// Relative errors of the mild-form reconstructions of `v` and `c`.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub v_error: f64,
    pub c_error: Option<f64>,
    pub v_fields: Vec<VectorField>,
    pub c_fields: Option<Vec<ScalarField>>,
    /// Reason the `c` reconstruction was skipped, if it was.
    pub c_skipped: Option<String>,
}

/// Rebuilds `v` from the stored `η` history with a Stokes Duhamel integral
/// (forcing interpolated linearly in `s`, semigroup integrated exactly) and `c`
/// as the Green representation of the operator with drift `v` and potential `η`.
/// A [`Error::Budget`] from the `c` part downgrades to a `v`-only result.
pub fn reconstruct_fields(
    plan: &SpectralPlan,
    params: &KSParams,
    sim: &Simulation,
    c_opts: Option<&CReconstructOptions>,
) -> Result<Reconstruction> {
    let states = &sim.states;
    if states.len() < 2 {
        return Err(Error::InsufficientData("reconstruction needs at least two outputs".into()));
    }
    let grad_phi = plan.gradient(&params.phi);
    let k2 = plan.k_squared().to_vec();
    let forcing_hat = |eta: &ScalarField| -> Vec<Vec<Complex64>> {
        let mut f: Vec<Vec<Complex64>> =
            grad_phi.components.iter().map(|g| plan.forward(&g.mul(eta).values)).collect();
        plan.leray_hat(&mut f);
        f
    };
    let mut vh: Vec<Vec<Complex64>> = states[0].v.components.iter().map(|c| plan.forward(&c.values)).collect();
    plan.leray_hat(&mut vh);
    let mut f_prev = forcing_hat(&states[0].eta);
    let mut v_fields = vec![states[0].v.clone()];
    let mut v_error = 0.0f64;
    for j in 1..states.len() {
        let tau = states[j].t - states[j - 1].t;
        let f_next = forcing_hat(&states[j].eta);
        for ((a, fp), fnx) in vh.iter_mut().zip(&f_prev).zip(&f_next) {
            for (idx, x) in a.iter_mut().enumerate() {
                let z = k2[idx] * tau;
                let e = (-z).exp();
                // ∫_0^τ e^{-k²(τ-s)} [(1 - s/τ) f0 + (s/τ) f1] ds
                let (w0, w1) = if z < 1e-6 {
                    (tau * (0.5 - z / 3.0), tau * (0.5 - z / 6.0))
                } else {
                    let phi1 = (1.0 - e) / z;
                    ((tau * (phi1 - e)) / z, tau * (1.0 - phi1) / z)
                };
                *x = *x * e - fp[idx] * w0 - fnx[idx] * w1;
            }
        }
        let v = VectorField { components: vh.iter().map(|h| plan.to_field(h.clone())).collect() };
        let diff = v.sub(&states[j].v).l2_norm();
        let norm = states[j].v.l2_norm();
        if norm > 0.0 {
            v_error = v_error.max(diff / norm);
        } else {
            v_error = v_error.max(diff);
        }
        v_fields.push(v);
        f_prev = f_next;
    }

    let (mut c_error, mut c_fields, mut c_skipped) = (None, None, None);
    if let Some(opts) = c_opts {
        match reconstruct_c(plan, sim, opts) {
            Ok((err, fields)) => {
                c_error = Some(err);
                c_fields = Some(fields);
            }
            Err(Error::Budget(msg)) => c_skipped = Some(msg),
            Err(e) => return Err(e),
        }
    } else {
        c_skipped = Some("c reconstruction not requested".into());
    }
    Ok(Reconstruction { v_error, c_error, v_fields, c_fields, c_skipped })
}

fn reconstruct_c(
    plan: &SpectralPlan,
    sim: &Simulation,
    opts: &CReconstructOptions,
) -> Result<(f64, Vec<ScalarField>)> {
    let states = &sim.states;
    let times = sim.times();
    let stride = opts.stride.max(1);
    let n = times.len() - 1;
    if n % stride != 0 {
        return Err(Error::arg(format!("stride {stride} does not divide {n} output intervals")));
    }
    let tg = TimeGrid::new(times[0], times[n], n / stride)?;
    let spread = (0..=n / stride)
        .map(|j| (times[j * stride] - tg.time(j)).abs())
        .fold(0.0, f64::max);
    if spread > 1e-9 * tg.dt() {
        return Err(Error::arg("c reconstruction needs uniformly spaced outputs"));
    }
    let drift: Vec<VectorField> = states.iter().map(|s| s.v.clone()).collect();
    let potential: Vec<ScalarField> = states.iter().map(|s| s.eta.clone()).collect();
    let a_bound = drift.iter().map(|v| v.max_abs()).fold(0.0, f64::max);
    let b_bound = potential.iter().map(|p| p.max_abs()).fold(0.0, f64::max);
    let coeffs = crate::green::Coefficients::new(plan, times, drift, potential, a_bound, b_bound)?;
    let traj = crate::green::duhamel_reconstruct(plan, &coeffs, &states[0].c, None, tg, &opts.duhamel)?;
    let mut err = 0.0f64;
    for (rec, s) in traj.slices.iter().zip(states.iter().step_by(stride)) {
        let d = rec.sub(&s.c);
        let norm = s.c.dot(&s.c).sqrt();
        let e = d.dot(&d).sqrt();
        err = err.max(if norm > 0.0 { e / norm } else { e });
    }
    Ok((err, traj.slices))
}

/// Writes `t,field,node_index,value` rows for every stored output.
pub fn write_trajectory_csv<W: std::io::Write>(sim: &Simulation, mut w: W) -> std::io::Result<()> {
    use crate::green::fmt_float;
    writeln!(w, "t,field,node_index,value")?;
    for s in &sim.states {
        let t = fmt_float(s.t);
        let mut emit = |name: &str, f: &ScalarField| -> std::io::Result<()> {
            for (i, v) in f.values.iter().enumerate() {
                writeln!(w, "{t},{name},{i},{}", fmt_float(*v))?;
            }
            Ok(())
        };
        emit("eta", &s.eta)?;
        emit("c", &s.c)?;
        for (d, comp) in s.v.components.iter().enumerate() {
            emit(&format!("v{d}"), comp)?;
        }
    }
    Ok(())
}

pub fn write_diagnostics_csv<W: std::io::Write>(sim: &Simulation, mut w: W) -> std::io::Result<()> {
    use crate::green::fmt_float;
    writeln!(w, "t,mass,min_eta,c_inf,kinetic,div_res,boundary")?;
    for d in &sim.diagnostics {
        let row = [d.t, d.mass, d.min_eta, d.c_inf, d.kinetic, d.div_res, d.boundary].map(fmt_float);
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Summary object with keys `params`, `grid`, `times`, `final_diagnostics`, `scheme_version`.
pub fn summary_json(sim: &Simulation, params: &KSParams) -> serde_json::Value {
    let g = sim.final_state().grid();
    serde_json::json!({
        "params": { "alpha": params.alpha, "safety": params.safety, "steps": sim.steps },
        "grid": { "dim": g.dim, "length": g.length, "points": g.points },
        "times": sim.times(),
        "final_diagnostics": serde_json::to_value(sim.diagnostics.last()).unwrap_or(serde_json::Value::Null),
        "scheme_version": SCHEME_VERSION,
    })
}
