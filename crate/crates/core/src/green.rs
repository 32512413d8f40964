//! Forward solver for `∂t u − Δu + a·∇u + b u = F`, tabulated fundamental
//! solutions and checks of their Gaussian envelopes.

use crate::error::{Error, Result};
use crate::field::{bracket, integrate, Grid, ScalarField, TimeGrid, Trajectory, VectorField};
use crate::spectral::SpectralPlan;
use std::io::Write;

/// Time-sampled drift `a` and potential `b`. Empty sample lists mean zero.
#[derive(Clone, Debug)]
pub struct Coefficients {
    grid: Grid,
    pub times: Vec<f64>,
    pub drift: Vec<VectorField>,
    pub potential: Vec<ScalarField>,
    pub drift_bound: f64,
    pub potential_bound: f64,
}

impl Coefficients {
    pub fn zero(grid: Grid) -> Self {
        Self {
            grid,
            times: vec![0.0],
            drift: Vec::new(),
            potential: Vec::new(),
            drift_bound: 0.0,
            potential_bound: 0.0,
        }
    }

    /// Constant drift vector and constant potential.
    pub fn constant(grid: Grid, drift: &[f64], potential: f64) -> Result<Self> {
        if drift.len() != grid.dim {
            return Err(Error::arg(format!("drift has {} components, grid dimension {}", drift.len(), grid.dim)));
        }
        let a = if drift.iter().all(|&v| v == 0.0) {
            Vec::new()
        } else {
            vec![VectorField {
                components: drift.iter().map(|&v| ScalarField::constant(grid, v)).collect(),
            }]
        };
        let b = if potential == 0.0 { Vec::new() } else { vec![ScalarField::constant(grid, potential)] };
        let bound = drift.iter().map(|v| v * v).sum::<f64>().sqrt();
        let plan = SpectralPlan::new(grid);
        Self::new(&plan, vec![0.0], a, b, bound, potential.abs())
    }

    /// Validated coefficients; bounds must dominate the measured maxima.
    pub fn new(
        plan: &SpectralPlan,
        times: Vec<f64>,
        drift: Vec<VectorField>,
        potential: Vec<ScalarField>,
        drift_bound: f64,
        potential_bound: f64,
    ) -> Result<Self> {
        let grid = plan.grid();
        if times.is_empty() || times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::arg("coefficient sample times must be non-empty and increasing"));
        }
        for (name, len) in [("drift", drift.len()), ("potential", potential.len())] {
            if len != 0 && len != times.len() {
                return Err(Error::arg(format!("{name} has {len} samples for {} times", times.len())));
            }
        }
        let mut max_a = 0.0f64;
        for a in &drift {
            if a.grid() != grid || a.dim() != grid.dim {
                return Err(Error::arg("drift sample on a different grid"));
            }
            let div = plan.divergence(a).max_abs();
            if div > 1e-8 {
                return Err(Error::arg(format!("drift divergence {div:e} exceeds 1e-8")));
            }
            max_a = max_a.max(a.max_abs());
        }
        let mut max_b = 0.0f64;
        for b in &potential {
            if b.grid != grid {
                return Err(Error::arg("potential sample on a different grid"));
            }
            if b.min() < -1e-12 {
                return Err(Error::arg(format!("potential minimum {} is negative", b.min())));
            }
            max_b = max_b.max(b.max_abs());
        }
        let slack = |m: f64| m * (1.0 + 1e-12) + 1e-300;
        if drift_bound < 0.0 || slack(drift_bound) < max_a {
            return Err(Error::arg(format!("declared drift bound {drift_bound} below measured {max_a}")));
        }
        if potential_bound < 0.0 || slack(potential_bound) < max_b {
            return Err(Error::arg(format!("declared potential bound {potential_bound} below measured {max_b}")));
        }
        Ok(Self { grid, times, drift, potential, drift_bound, potential_bound })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn has_drift(&self) -> bool {
        !self.drift.is_empty()
    }

    pub fn has_potential(&self) -> bool {
        !self.potential.is_empty()
    }

    pub fn drift_at(&self, t: f64) -> Option<VectorField> {
        if self.drift.is_empty() {
            return None;
        }
        let (i, j, w) = bracket(&self.times, t);
        if i == j || w == 0.0 {
            return Some(self.drift[i].clone());
        }
        let (a, b) = (&self.drift[i], &self.drift[j]);
        Some(VectorField {
            components: a
                .components
                .iter()
                .zip(&b.components)
                .map(|(x, y)| x.zip_map(y, |p, q| (1.0 - w) * p + w * q))
                .collect(),
        })
    }

    pub fn potential_at(&self, t: f64) -> Option<ScalarField> {
        if self.potential.is_empty() {
            return None;
        }
        Some(crate::field::interpolate(&self.times, &self.potential, t))
    }

    /// Largest step allowed by `dt ≤ 0.5 h / ‖a‖` and `dt ‖b‖ ≤ 0.5`.
    pub fn admissible_dt(&self) -> f64 {
        let h = self.grid.spacing();
        let mut dt = f64::INFINITY;
        if self.has_drift() {
            dt = dt.min(0.5 * h / self.drift_bound.max(1e-12));
        }
        if self.has_potential() && self.potential_bound > 0.0 {
            dt = dt.min(0.5 / self.potential_bound);
        }
        dt
    }
}

/// Source term supplied as integrals over time steps.
pub trait Forcing: Sync {
    /// `∫_{t0}^{t1} F(s, ·) ds`, or `None` when it vanishes.
    fn step_integral(&self, t0: f64, t1: f64) -> Option<ScalarField>;

    fn active(&self, _t0: f64, _t1: f64) -> bool {
        true
    }
}

pub struct NoForcing;

impl Forcing for NoForcing {
    fn step_integral(&self, _t0: f64, _t1: f64) -> Option<ScalarField> {
        None
    }

    fn active(&self, _t0: f64, _t1: f64) -> bool {
        false
    }
}

/// Time-independent source.
pub struct ConstantForcing(pub ScalarField);

impl Forcing for ConstantForcing {
    fn step_integral(&self, t0: f64, t1: f64) -> Option<ScalarField> {
        Some(self.0.scale(t1 - t0))
    }
}

/// Source sampled in time and linearly interpolated between samples.
pub struct SampledForcing<'a>(pub &'a Trajectory);

impl Forcing for SampledForcing<'_> {
    fn step_integral(&self, t0: f64, t1: f64) -> Option<ScalarField> {
        let traj = self.0;
        let mut knots = vec![t0];
        knots.extend(traj.times.iter().copied().filter(|&s| s > t0 && s < t1));
        knots.push(t1);
        let mut acc = ScalarField::zeros(traj.slices[0].grid);
        for w in knots.windows(2) {
            let (fa, fb) = (traj.at(w[0]), traj.at(w[1]));
            acc.axpy(0.5 * (w[1] - w[0]), &fa);
            acc.axpy(0.5 * (w[1] - w[0]), &fb);
        }
        Some(acc)
    }
}

/// Normalized indicator of `B × (start, end]`, integrating to one.
struct CylinderSource {
    profile: ScalarField,
    start: f64,
    end: f64,
}

impl Forcing for CylinderSource {
    fn step_integral(&self, t0: f64, t1: f64) -> Option<ScalarField> {
        let overlap = (t1.min(self.end) - t0.max(self.start)).max(0.0);
        if overlap == 0.0 {
            return None;
        }
        Some(self.profile.scale(overlap / (self.end - self.start)))
    }

    fn active(&self, t0: f64, t1: f64) -> bool {
        t1 > self.start && t0 < self.end
    }
}

/// Split-step integrator: half heat, source, upwind drift, potential, half heat.
pub(crate) struct Stepper<'a> {
    pub plan: &'a SpectralPlan,
    pub coeffs: &'a Coefficients,
}

impl Stepper<'_> {
    /// Advances `u` from `ta` to `tb` using equal substeps no larger than `max_dt`.
    pub fn march(&self, u: &mut ScalarField, ta: f64, tb: f64, forcing: &dyn Forcing, max_dt: f64) -> Result<()> {
        let span = tb - ta;
        if span <= 0.0 {
            return Ok(());
        }
        let plain = !self.coeffs.has_drift() && !self.coeffs.has_potential() && !forcing.active(ta, tb);
        if plain {
            *u = self.plan.heat_semigroup(u, span)?;
            return Ok(());
        }
        let limit = max_dt.min(self.coeffs.admissible_dt());
        let steps = ((span / limit) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        let dt = span / steps as f64;
        let mut hat = self.plan.forward(&u.values);
        self.plan.heat_hat(&mut hat, 0.5 * dt);
        for k in 0..steps {
            let t0 = ta + k as f64 * dt;
            let t1 = if k + 1 == steps { tb } else { t0 + dt };
            let mid = 0.5 * (t0 + t1);
            *u = self.plan.to_field(hat);
            if let Some(j) = forcing.step_integral(t0, t1) {
                u.axpy(1.0, &j);
            }
            if let Some(a) = self.coeffs.drift_at(mid) {
                upwind_transport(u, &a, dt);
            }
            if let Some(b) = self.coeffs.potential_at(mid) {
                for (v, bb) in u.values.iter_mut().zip(&b.values) {
                    *v *= (-bb * dt).exp();
                }
            }
            hat = self.plan.forward(&u.values);
            self.plan.heat_hat(&mut hat, if k + 1 == steps { 0.5 * dt } else { dt });
        }
        *u = self.plan.to_field(hat);
        Ok(())
    }
}

/// Conservative first-order upwind step for `∂t u + ∇·(a u) = 0` with
/// node-averaged face velocities.
pub(crate) fn upwind_transport(u: &mut ScalarField, a: &VectorField, dt: f64) {
    let g = u.grid;
    let n = g.points;
    let ratio = dt / g.spacing();
    let mut delta = vec![0.0; g.len()];
    for d in 0..g.dim {
        let stride = g.stride(d);
        let ad = &a.components[d].values;
        for i in 0..g.len() {
            let m = (i / stride) % n;
            let up = if m + 1 == n { i + stride - n * stride } else { i + stride };
            let face = 0.5 * (ad[i] + ad[up]);
            let flux = if face >= 0.0 { face * u.values[i] } else { face * u.values[up] };
            delta[i] -= ratio * flux;
            delta[up] += ratio * flux;
        }
    }
    for (v, dv) in u.values.iter_mut().zip(delta) {
        *v += dv;
    }
}

/// Solves the forward problem on `tg`, one split step per grid interval.
pub fn solve_forward(
    plan: &SpectralPlan,
    coeffs: &Coefficients,
    f0: &ScalarField,
    forcing: &dyn Forcing,
    tg: TimeGrid,
) -> Result<Trajectory> {
    let dt = tg.dt();
    let admissible = coeffs.admissible_dt();
    if dt > admissible * (1.0 + 1e-12) {
        return Err(Error::Stability {
            message: format!("dt = {dt:e} violates 0.5 h / |a| and dt |b| <= 0.5"),
            admissible_dt: admissible,
        });
    }
    let stepper = Stepper { plan, coeffs };
    let times = tg.times();
    let mut u = f0.clone();
    let mut slices = vec![u.clone()];
    for w in times.windows(2) {
        stepper.march(&mut u, w[0], w[1], forcing, dt)?;
        slices.push(u.clone());
    }
    Trajectory::new(times, slices)
}

/// Source `(s, y)` of a fundamental solution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SourcePoint {
    pub time: f64,
    pub node: usize,
}

/// Tabulated `Γ(t, ·, s, y)` at a list of times.
#[derive(Clone, Debug)]
pub struct GreenTable {
    pub source: SourcePoint,
    /// Time the slices are referenced to when forming `τ = t − s`.
    pub effective_time: f64,
    pub times: Vec<f64>,
    pub slices: Vec<ScalarField>,
    pub epsilon: f64,
    /// Relative L∞ gap between the two constructions, when cross-checked.
    pub agreement: Option<f64>,
    pub converged: Option<bool>,
}

impl GreenTable {
    pub fn grid(&self) -> Grid {
        self.slices[0].grid
    }

    pub fn taus(&self) -> Vec<f64> {
        self.times.iter().map(|t| t - self.effective_time).collect()
    }

    /// CSV with header `t,node_index,x0..,gamma`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let g = self.grid();
        let mut header = String::from("t,node_index");
        for d in 0..g.dim {
            header.push_str(&format!(",x{d}"));
        }
        header.push_str(",gamma\n");
        w.write_all(header.as_bytes())?;
        for (t, slice) in self.times.iter().zip(&self.slices) {
            for (i, v) in slice.values.iter().enumerate() {
                let x = g.coords(i);
                let mut line = format!("{},{}", fmt_float(*t), i);
                for xd in x.iter().take(g.dim) {
                    line.push(',');
                    line.push_str(&fmt_float(*xd));
                }
                line.push(',');
                line.push_str(&fmt_float(*v));
                line.push('\n');
                w.write_all(line.as_bytes())?;
            }
        }
        Ok(())
    }
}

/// Float text with 17 significant digits.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// Tuning of the fundamental-solution constructions.
#[derive(Clone, Copy, Debug)]
pub struct GreenOptions {
    /// Averaging radius in cells; the extrapolation partner uses twice this.
    pub epsilon_cells: f64,
    /// Width of the mollified delta, in cells.
    pub mollifier_cells: f64,
    /// Upper bound on the internal step; `None` uses `4 h²`.
    pub max_dt: Option<f64>,
    pub agreement_tol: f64,
    pub failure_tol: f64,
    /// Adds a middle radius `1.5 ε` and extrapolates quadratically.
    pub three_level: bool,
}

impl Default for GreenOptions {
    fn default() -> Self {
        Self { epsilon_cells: 2.0, mollifier_cells: 2.0, max_dt: None, agreement_tol: 0.03, failure_tol: 0.10, three_level: true }
    }
}

impl GreenOptions {
    fn step(&self, grid: Grid) -> f64 {
        self.max_dt.unwrap_or(4.0 * grid.spacing().powi(2))
    }
}

/// Closed discrete ball: normalized indicator and per-axis second moment.
fn ball_profile(grid: Grid, y: usize, eps: f64) -> (ScalarField, f64) {
    let r2 = eps * eps * (1.0 + 1e-12);
    let xy = grid.coords(y);
    let mut inside = Vec::new();
    let mut m2 = 0.0;
    for i in 0..grid.len() {
        if grid.distance_sq(i, y) <= r2 {
            inside.push(i);
            m2 += grid.periodic_delta(grid.coords(i)[0], xy[0]).powi(2);
        }
    }
    let count = inside.len() as f64;
    let mut profile = ScalarField::zeros(grid);
    let height = 1.0 / (count * grid.cell_volume());
    for i in inside {
        profile.values[i] = height;
    }
    (profile, m2 / count)
}

fn check_source(grid: Grid, y: SourcePoint) -> Result<()> {
    if y.node >= grid.len() || !y.time.is_finite() {
        return Err(Error::arg(format!("source node {} outside grid of {} nodes", y.node, grid.len())));
    }
    Ok(())
}

fn check_radius(grid: Grid, eps: f64) -> Result<()> {
    if eps < 2.0 * grid.spacing() * (1.0 - 1e-12) {
        return Err(Error::UnderResolved(format!(
            "averaging radius {eps:e} below 2h = {:e}",
            2.0 * grid.spacing()
        )));
    }
    Ok(())
}

/// Solution driven by the cylinder source over `(start, start + ε²]`,
/// reported at `outputs` (each later than the window).
fn averaged_solve(
    plan: &SpectralPlan,
    coeffs: &Coefficients,
    y: usize,
    eps: f64,
    start: f64,
    outputs: &[f64],
    max_dt: f64,
) -> Result<Vec<ScalarField>> {
    let grid = plan.grid();
    let (profile, _) = ball_profile(grid, y, eps);
    let end = start + eps * eps;
    let source = CylinderSource { profile, start, end };
    let stepper = Stepper { plan, coeffs };
    let mut u = ScalarField::zeros(grid);
    stepper.march(&mut u, start, end, &source, max_dt.min(0.5 * eps * eps))?;
    let mut t = end;
    let mut out = Vec::with_capacity(outputs.len());
    for &to in outputs {
        if to < t {
            return Err(Error::arg(format!("output time {to} precedes averaging window end {t}")));
        }
        stepper.march(&mut u, t, to, &NoForcing, max_dt)?;
        t = to;
        out.push(u.clone());
    }
    Ok(out)
}

/// Averaged fundamental solution driven by the normalized indicator of
/// `B_ε(y) × (s, s + ε²]`; slices are referenced to `s + ε²/2`.
pub fn averaged_green(
    plan: &SpectralPlan,
    coeffs: &Coefficients,
    source: SourcePoint,
    eps: f64,
    tg: TimeGrid,
    opts: &GreenOptions,
) -> Result<GreenTable> {
    let grid = plan.grid();
    check_source(grid, source)?;
    check_radius(grid, eps)?;
    let end = source.time + eps * eps;
    if end >= tg.t1 {
        return Err(Error::arg(format!("averaging window ends at {end}, beyond horizon {}", tg.t1)));
    }
    let times: Vec<f64> = tg.times().into_iter().filter(|&t| t > end).collect();
    let slices = averaged_solve(plan, coeffs, source.node, eps, source.time, &times, opts.step(grid))?;
    Ok(GreenTable {
        source,
        effective_time: source.time + 0.5 * eps * eps,
        times,
        slices,
        epsilon: eps,
        agreement: None,
        converged: None,
    })
}

/// Fundamental solution on the nodes of `tg` later than the source.
pub fn green_function(
    plan: &SpectralPlan,
    coeffs: &Coefficients,
    source: SourcePoint,
    tg: TimeGrid,
    opts: &GreenOptions,
) -> Result<GreenTable> {
    let eps2 = 2.0 * opts.epsilon_cells * plan.grid().spacing();
    let first = source.time + 0.5 * eps2 * eps2;
    let times: Vec<f64> = tg.times().into_iter().filter(|&t| t > first).collect();
    if times.is_empty() {
        return Err(Error::arg("no output time after the source window"));
    }
    green_function_at(plan, coeffs, source, &times, opts)
}

/// Richardson-extrapolated averaged solutions cross-checked against a
/// mollified-delta start, at explicit output times.
pub fn green_function_at(
    plan: &SpectralPlan,
    coeffs: &Coefficients,
    source: SourcePoint,
    times: &[f64],
    opts: &GreenOptions,
) -> Result<GreenTable> {
    let grid = plan.grid();
    check_source(grid, source)?;
    let h = grid.spacing();
    let e1 = opts.epsilon_cells * h;
    let e2 = 2.0 * e1;
    check_radius(grid, e1)?;
    let s = source.time;
    if let Some(&t) = times.iter().find(|&&t| t <= s + 0.5 * e2 * e2) {
        return Err(Error::arg(format!("output time {t} inside the averaging window of source time {s}")));
    }
    let dt = opts.step(grid);
    let radii: Vec<f64> = if opts.three_level { vec![e1, 1.5 * e1, e2] } else { vec![e1, e2] };
    let mut levels = Vec::with_capacity(radii.len());
    let mut moments = Vec::with_capacity(radii.len());
    for &e in &radii {
        levels.push(averaged_solve(plan, coeffs, source.node, e, s - 0.5 * e * e, times, dt)?);
        moments.push(ball_profile(grid, source.node, e).1);
    }
    // Lagrange extrapolation to zero second moment.
    let weights: Vec<f64> = (0..moments.len())
        .map(|i| {
            (0..moments.len())
                .filter(|&j| j != i)
                .map(|j| moments[j] / (moments[j] - moments[i]))
                .product()
        })
        .collect();
    let extrapolated: Vec<ScalarField> = (0..times.len())
        .map(|k| {
            let mut acc = ScalarField::zeros(grid);
            for (lvl, w) in levels.iter().zip(&weights) {
                acc.axpy(*w, &lvl[k]);
            }
            acc
        })
        .collect();

    let sigma = opts.mollifier_cells * h;
    let mollified = mollified_solve(plan, coeffs, source.node, sigma, s + 0.5 * sigma * sigma, times, dt)?;
    let mut gap = 0.0f64;
    for (a, b) in extrapolated.iter().zip(&mollified) {
        gap = gap.max(bulk_relative_gap(a, b, 1e-6));
    }
    if gap > opts.failure_tol {
        return Err(Error::ConstructionFailed(format!(
            "averaged and mollified constructions differ by {gap:.3e} (limit {})",
            opts.failure_tol
        )));
    }
    Ok(GreenTable {
        source,
        effective_time: s,
        times: times.to_vec(),
        slices: extrapolated,
        epsilon: e1,
        agreement: Some(gap),
        converged: Some(gap <= opts.agreement_tol),
    })
}

fn mollified_solve(
    plan: &SpectralPlan,
    coeffs: &Coefficients,
    y: usize,
    sigma: f64,
    start: f64,
    outputs: &[f64],
    max_dt: f64,
) -> Result<Vec<ScalarField>> {
    let grid = plan.grid();
    let mut u = ScalarField::from_raw(
        grid,
        (0..grid.len()).map(|i| (-grid.distance_sq(i, y) / (2.0 * sigma * sigma)).exp()).collect(),
    );
    let mass = integrate(&u);
    u = u.scale(1.0 / mass);
    let stepper = Stepper { plan, coeffs };
    let mut t = start;
    let mut out = Vec::with_capacity(outputs.len());
    for &to in outputs {
        stepper.march(&mut u, t, to, &NoForcing, max_dt)?;
        t = to;
        out.push(u.clone());
    }
    Ok(out)
}

/// `max |a − b| / max a` over nodes where `a > floor · max a`.
pub fn bulk_relative_gap(a: &ScalarField, b: &ScalarField, floor: f64) -> f64 {
    let peak = a.max();
    if peak <= 0.0 {
        return 0.0;
    }
    a.values
        .iter()
        .zip(&b.values)
        .filter(|(x, _)| **x > floor * peak)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
        / peak
}

/// Free-space heat kernel `(4πτ)^{-n/2} exp(−r²/4τ)` with minimum-image `r`.
pub fn heat_kernel(grid: Grid, y: usize, tau: f64) -> ScalarField {
    let norm = (4.0 * std::f64::consts::PI * tau).powf(-(grid.dim as f64) / 2.0);
    ScalarField::from_raw(
        grid,
        (0..grid.len()).map(|i| norm * (-grid.distance_sq(i, y) / (4.0 * tau)).exp()).collect(),
    )
}

/// Gaussian upper-envelope fit `Γ ≲ C τ^{-n/2} exp(−c r²/τ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvelopeFit {
    pub c_const: f64,
    pub c_rate: f64,
    pub rms_residual: f64,
    pub samples: usize,
    pub violation_fraction: f64,
    pub window: String,
}

/// Slices with fewer cells than this across `√τ` are left out of fits.
pub const MIN_ENVELOPE_CELLS: f64 = 4.0;

/// One sample `(τ, z = r²/τ, value)` of a tabulated kernel quantity.
#[derive(Clone, Copy, Debug)]
struct Sample {
    tau: f64,
    z: f64,
    value: f64,
    slice: usize,
}

fn kernel_samples(table: &GreenTable, fields: &[ScalarField], floor: f64, zmin: f64) -> Vec<Sample> {
    let grid = table.grid();
    let y = table.source.node;
    let dist: Vec<f64> = (0..grid.len()).map(|i| grid.distance_sq(i, y)).collect();
    let mut out = Vec::new();
    let resolved = (MIN_ENVELOPE_CELLS * grid.spacing()).powi(2);
    for (slice, (tau, f)) in table.taus().into_iter().zip(fields).enumerate() {
        if tau < resolved {
            continue;
        }
        let peak = f.max_abs();
        for (v, r2) in f.values.iter().zip(&dist) {
            let z = r2 / tau;
            if v.abs() > floor * peak && (zmin..=20.0).contains(&z) {
                out.push(Sample { tau, z, value: v.abs(), slice });
            }
        }
    }
    out
}

struct Envelope {
    c_const: f64,
    c_rate: f64,
    rms: f64,
    violations: f64,
}

/// Envelope `y ≤ log C − c z`: the line of least mean gap lying above every
/// sample from the even slices, i.e. the upper-hull edge over the mean `z`.
/// Violations (`> 1.05 ×` the envelope) are counted on the odd slices, which
/// take no part in the fit.
fn upper_envelope(samples: &[Sample], transform: impl Fn(&Sample) -> f64) -> Envelope {
    let mut pts: Vec<(f64, f64)> = samples
        .iter()
        .filter(|s| s.slice % 2 == 0)
        .map(|s| (s.z, transform(s)))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    // Keep only the highest point of each equal-z run.
    pts.dedup_by(|later, first| later.0 == first.0);
    let zbar = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for &p in &pts {
        while hull.len() >= 2 {
            let (o, a) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            let cross = (a.0 - o.0) * (p.1 - o.1) - (a.1 - o.1) * (p.0 - o.0);
            if cross >= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(p);
    }
    let (slope, intercept) = if hull.len() < 2 {
        (0.0, hull.first().map_or(0.0, |p| p.1))
    } else {
        let k = hull.windows(2).position(|w| w[1].0 >= zbar).unwrap_or(hull.len() - 2);
        let (a, b) = (hull[k], hull[k + 1]);
        let slope = (b.1 - a.1) / (b.0 - a.0);
        (slope, a.1 - slope * a.0)
    };
    let rms = (pts.iter().map(|(z, y)| (intercept + slope * z - y).powi(2)).sum::<f64>() / pts.len() as f64).sqrt();
    let held: Vec<&Sample> = samples.iter().filter(|s| s.slice % 2 == 1).collect();
    let above = held.iter().filter(|s| transform(s) > intercept + slope * s.z + 1.05f64.ln()).count();
    Envelope {
        c_const: intercept.exp(),
        c_rate: -slope,
        rms,
        violations: if held.is_empty() { 0.0 } else { above as f64 / held.len() as f64 },
    }
}

/// Envelope fit over samples with `Γ > floor · peak` and `r²/τ ≤ 20`.
pub fn envelope_fit(table: &GreenTable, floor: f64) -> Result<EnvelopeFit> {
    if table.times.len() < 3 {
        return Err(Error::InsufficientData(format!("table has {} times, need 3", table.times.len())));
    }
    if !(1e-14..=1e-3).contains(&floor) {
        return Err(Error::arg(format!("floor {floor:e} outside [1e-14, 1e-3]")));
    }
    let samples = kernel_samples(table, &table.slices, floor, 0.0);
    if samples.len() < 16 {
        return Err(Error::InsufficientData(format!("{} samples above the floor", samples.len())));
    }
    let half_n = table.grid().dim as f64 / 2.0;
    let env = upper_envelope(&samples, |s| s.value.ln() + half_n * s.tau.ln());
    Ok(EnvelopeFit {
        c_const: env.c_const,
        c_rate: env.c_rate,
        rms_residual: env.rms,
        samples: samples.len(),
        violation_fraction: env.violations,
        window: format!("gamma > {floor:e} * peak, r^2/tau <= 20"),
    })
}

/// Envelope of one derivative order `j` of the kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct DerivativeFit {
    pub order: usize,
    /// Fitted `κ` in `max_x |D^j Γ| ∝ τ^{−κ}`.
    pub tau_exponent: f64,
    pub expected_exponent: f64,
    pub c_const: f64,
    pub c_rate: f64,
    pub violation_fraction: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DerivativeReport {
    pub first: DerivativeFit,
    pub second: DerivativeFit,
    /// `max_x |∇Γ|` per table time.
    pub gradient_peaks: Vec<f64>,
}

/// Fits envelopes for `|∇Γ|` and `|∇²Γ| + |∂tΓ|`. The spatial profile model
/// is `C τ^{−κ} z^{j/2} exp(−c z)`.
pub fn derivative_envelope_check(plan: &SpectralPlan, table: &GreenTable, floor: f64) -> Result<DerivativeReport> {
    let grid = table.grid();
    let h = grid.spacing();
    let taus = table.taus();
    if taus.len() < 3 {
        return Err(Error::InsufficientData("derivative fits need at least 3 times".into()));
    }
    let tau_min = taus.iter().copied().fold(f64::INFINITY, f64::min);
    if tau_min.sqrt() < 6.0 * h {
        return Err(Error::UnderResolved(format!(
            "earliest tau {tau_min:e} gives fewer than 6 cells across sqrt(tau); minimum tau is {:e}",
            36.0 * h * h
        )));
    }
    let n = grid.dim as f64;
    let grads: Vec<ScalarField> = table.slices.iter().map(|s| plan.gradient(s).magnitude()).collect();
    let mut second = Vec::with_capacity(table.slices.len());
    for (k, s) in table.slices.iter().enumerate() {
        let hess = hessian_magnitude(plan, s);
        let dt = time_derivative(&table.times, &table.slices, k);
        second.push(hess.zip_map(&dt, |a, b| a + b.abs()));
    }
    let fit = |fields: &[ScalarField], order: usize| -> Result<DerivativeFit> {
        let expected = (n + order as f64) / 2.0;
        let x: Vec<f64> = taus.iter().map(|t| t.ln()).collect();
        let y: Vec<f64> = fields.iter().map(|f| f.max_abs().ln()).collect();
        let (slope, _, _) = crate::spectral::linear_fit(&x, &y);
        let samples = kernel_samples(table, fields, floor, 0.5);
        if samples.len() < 16 {
            return Err(Error::InsufficientData(format!("{} derivative samples above floor", samples.len())));
        }
        let half_j = order as f64 / 2.0;
        let env = upper_envelope(&samples, |s| s.value.ln() + expected * s.tau.ln() - half_j * s.z.ln());
        Ok(DerivativeFit {
            order,
            tau_exponent: -slope,
            expected_exponent: expected,
            c_const: env.c_const,
            c_rate: env.c_rate,
            violation_fraction: env.violations,
            samples: samples.len(),
        })
    };
    Ok(DerivativeReport {
        first: fit(&grads, 1)?,
        second: fit(&second, 2)?,
        gradient_peaks: grads.iter().map(|g| g.max_abs()).collect(),
    })
}

fn hessian_magnitude(plan: &SpectralPlan, f: &ScalarField) -> ScalarField {
    let grid = plan.grid();
    let hat = plan.forward(&f.values);
    let mut acc = ScalarField::zeros(grid);
    for a in 0..grid.dim {
        for b in 0..grid.dim {
            let h: Vec<_> = hat
                .iter()
                .enumerate()
                .map(|(i, c)| c * (-plan.k_axis(a, i) * plan.k_axis(b, i)))
                .collect();
            let d = plan.to_field(h);
            for (s, v) in acc.values.iter_mut().zip(&d.values) {
                *s += v * v;
            }
        }
    }
    acc.map(f64::sqrt)
}

/// Second-order finite difference in time on a possibly non-uniform sample.
fn time_derivative(times: &[f64], slices: &[ScalarField], k: usize) -> ScalarField {
    let m = times.len();
    let (i0, i1, i2) = if k == 0 {
        (0, 1, 2)
    } else if k + 1 == m {
        (m - 3, m - 2, m - 1)
    } else {
        (k - 1, k, k + 1)
    };
    let (t0, t1, t2, t) = (times[i0], times[i1], times[i2], times[k]);
    // Derivatives of the Lagrange basis through three nodes, evaluated at t.
    let w0 = ((t - t1) + (t - t2)) / ((t0 - t1) * (t0 - t2));
    let w1 = ((t - t0) + (t - t2)) / ((t1 - t0) * (t1 - t2));
    let w2 = ((t - t0) + (t - t1)) / ((t2 - t0) * (t2 - t1));
    let (a, b, c) = (&slices[i0].values, &slices[i1].values, &slices[i2].values);
    ScalarField::from_raw(
        slices[k].grid,
        (0..a.len()).map(|i| w0 * a[i] + w1 * b[i] + w2 * c[i]).collect(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CkReport {
    pub residual: f64,
    pub sources: usize,
}

/// Relative L¹ gap between `Γ(t,·,s,y)` and `Σ_z Γ(t,·,r,z) Γ(r,z,s,y) hⁿ`.
/// Intermediate sources below `1e-10 · peak` of `Γ(r,·,s,y)` are skipped.
pub fn chapman_kolmogorov_residual(
    plan: &SpectralPlan,
    coeffs: &Coefficients,
    s: f64,
    r: f64,
    t: f64,
    y: usize,
    opts: &GreenOptions,
) -> Result<CkReport> {
    if !(s < r && r < t) {
        return Err(Error::arg(format!("need s < r < t, got {s}, {r}, {t}")));
    }
    let grid = plan.grid();
    let direct = green_function_at(plan, coeffs, SourcePoint { time: s, node: y }, &[r, t], opts)?;
    let middle = &direct.slices[0];
    let peak = middle.max();
    let support: Vec<(usize, f64)> = middle
        .values
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > 1e-10 * peak)
        .map(|(i, v)| (i, *v))
        .collect();
    let dv = grid.cell_volume();
    let composed = crate::ordered_accumulate(&support, 16, grid.len(), |&(z, weight), acc| {
        let table = green_function_at(plan, coeffs, SourcePoint { time: r, node: z }, &[t], opts)?;
        for (a, g) in acc.iter_mut().zip(&table.slices[0].values) {
            *a += g * weight * dv;
        }
        Ok(())
    })?;
    let target = &direct.slices[1].values;
    let num: f64 = composed.iter().zip(target).map(|(a, b)| (a - b).abs()).sum();
    let den: f64 = target.iter().map(|v| v.abs()).sum();
    Ok(CkReport { residual: num / den, sources: support.len() })
}

/// How each source's kernel is built in [`duhamel_reconstruct`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GreenMethod {
    /// Extrapolated construction with the mollified cross-check.
    Full,
    /// One averaged solve at `ε = epsilon_cells · h`, window centred on the source time.
    Averaged,
}

#[derive(Clone, Copy, Debug)]
pub struct DuhamelOptions {
    pub method: GreenMethod,
    pub green: GreenOptions,
    pub budget_bytes: usize,
    pub max_solves: usize,
}

impl Default for DuhamelOptions {
    fn default() -> Self {
        Self { method: GreenMethod::Full, green: GreenOptions::default(), budget_bytes: 1 << 30, max_solves: 500_000 }
    }
}

/// `f(t) = ∫Γ(t,·,t0,y) f0 dy + ∫∫Γ(t,·,s,y) F dy ds` on the nodes of `tg`,
/// with trapezoidal quadrature in `s`.
pub fn duhamel_reconstruct(
    plan: &SpectralPlan,
    coeffs: &Coefficients,
    f0: &ScalarField,
    forcing: Option<&Trajectory>,
    tg: TimeGrid,
    opts: &DuhamelOptions,
) -> Result<Trajectory> {
    let grid = plan.grid();
    let times = tg.times();
    let m = times.len();
    let dt = tg.dt();
    let h = grid.spacing();
    let e1 = opts.green.epsilon_cells * h;
    let gap = match opts.method {
        GreenMethod::Full => 2.0 * e1 * e1,
        GreenMethod::Averaged => 0.5 * e1 * e1,
    };
    if dt <= gap {
        return Err(Error::UnderResolved(format!(
            "output spacing {dt:e} must exceed the source window half-width {gap:e}"
        )));
    }
    let f_at: Vec<Option<ScalarField>> = times.iter().map(|&t| forcing.map(|f| f.at(t))).collect();
    let mut sources: Vec<(usize, usize, f64)> = Vec::new();
    for (k, fk) in f_at.iter().enumerate().take(m - 1) {
        for y in 0..grid.len() {
            let mut c = if k == 0 { f0.values[y] } else { 0.0 };
            if let Some(f) = fk {
                c += if k == 0 { 0.5 * dt } else { dt } * f.values[y];
            }
            if c != 0.0 {
                sources.push((k, y, c));
            }
        }
    }
    let per_source = match opts.method {
        GreenMethod::Full => if opts.green.three_level { 4 } else { 3 },
        GreenMethod::Averaged => 1,
    };
    let solves = sources.len() * per_source;
    let workers = crate::worker_threads();
    let bytes = (2 + 2 * workers) * m * grid.len() * std::mem::size_of::<f64>();
    if bytes > opts.budget_bytes || solves > opts.max_solves {
        return Err(Error::Budget(format!(
            "needs {bytes} bytes and {solves} solves (limits {} bytes, {} solves)",
            opts.budget_bytes, opts.max_solves
        )));
    }
    let len = grid.len();
    let dv = grid.cell_volume();
    let acc = crate::ordered_accumulate(&sources, 32, m * len, |&(k, y, c), acc| {
        let outs = &times[k + 1..];
        let slices = match opts.method {
            GreenMethod::Full => {
                green_function_at(plan, coeffs, SourcePoint { time: times[k], node: y }, outs, &opts.green)?.slices
            }
            GreenMethod::Averaged => {
                averaged_solve(plan, coeffs, y, e1, times[k] - 0.5 * e1 * e1, outs, opts.green.step(grid))?
            }
        };
        for (j, slice) in slices.iter().enumerate() {
            let row = &mut acc[(k + 1 + j) * len..(k + 2 + j) * len];
            for (a, g) in row.iter_mut().zip(&slice.values) {
                *a += c * g * dv;
            }
        }
        Ok(())
    })?;
    let mut slices = Vec::with_capacity(m);
    for j in 0..m {
        let mut v = acc[j * len..(j + 1) * len].to_vec();
        if j == 0 {
            v.copy_from_slice(&f0.values);
        } else if let Some(f) = &f_at[j] {
            for (a, fv) in v.iter_mut().zip(&f.values) {
                *a += 0.5 * dt * fv;
            }
        }
        slices.push(ScalarField::from_raw(grid, v));
    }
    Trajectory::new(times, slices)
}

impl Coefficients {
    /// Seeded smooth coefficients: a divergence-free drift rotating between
    /// two stream-function modes with `max |a| = drift_amp`, and a potential
    /// with values in `[0, potential_amp]`, sampled at `samples + 1` times.
    pub fn synthetic(
        plan: &SpectralPlan,
        seed: u64,
        drift_amp: f64,
        potential_amp: f64,
        t0: f64,
        t1: f64,
        samples: usize,
    ) -> Result<Self> {
        use crate::field::{sample_field, FieldDescriptor};
        let grid = plan.grid();
        let samples = samples.max(1);
        let times: Vec<f64> = (0..=samples).map(|j| t0 + (t1 - t0) * j as f64 / samples as f64).collect();
        let omega = 2.0 * std::f64::consts::PI / (t1 - t0).max(1e-12);
        let rand = |s: u64| sample_field(grid, &FieldDescriptor::Random { seed: s, max_mode: 2, amplitude: 1.0 });
        let mut drift = Vec::new();
        if drift_amp > 0.0 {
            let base: Vec<VectorField> = if grid.dim == 1 {
                vec![
                    VectorField { components: vec![ScalarField::constant(grid, 1.0)] },
                    VectorField { components: vec![ScalarField::constant(grid, -0.5)] },
                ]
            } else {
                [seed.wrapping_mul(3).wrapping_add(1), seed.wrapping_mul(3).wrapping_add(2)]
                    .iter()
                    .map(|&s| {
                        let g = plan.gradient(&rand(s)?);
                        let mut comps = vec![g.components[1].scale(-1.0), g.components[0].clone()];
                        comps.extend((2..grid.dim).map(|_| ScalarField::zeros(grid)));
                        Ok(VectorField { components: comps })
                    })
                    .collect::<Result<_>>()?
            };
            let raw: Vec<VectorField> = times
                .iter()
                .map(|&t| base[0].scale((omega * t).cos()).add(&base[1].scale((omega * t).sin())))
                .collect();
            let peak = raw.iter().map(|a| a.max_abs()).fold(0.0, f64::max);
            drift = raw.into_iter().map(|a| a.scale(drift_amp / peak)).collect();
        }
        let mut potential = Vec::new();
        if potential_amp > 0.0 {
            let (p, q) = (rand(seed.wrapping_mul(3).wrapping_add(3))?, rand(seed.wrapping_mul(5).wrapping_add(7))?);
            potential = times
                .iter()
                .map(|&t| {
                    let w = p.scale((omega * t).cos()).add(&q.scale((omega * t).sin()));
                    let m = w.max_abs().max(1e-300);
                    w.map(|v| potential_amp * 0.5 * (1.0 + v / m))
                })
                .collect();
        }
        let drift_bound = drift.iter().map(|a| a.max_abs()).fold(0.0, f64::max);
        let potential_bound = potential.iter().map(|b| b.max_abs()).fold(0.0, f64::max);
        Self::new(plan, times, drift, potential, drift_bound, potential_bound)
    }
}
