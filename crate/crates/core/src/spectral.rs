//! FFT-based derivatives, the heat semigroup, the Leray projection and the
//! Stokes propagator on a periodic box.

use crate::error::{Error, Result};
use crate::field::{lp_norm, Grid, NormSpec, ScalarField, VectorField};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

/// Cached FFTs and wavenumber tables for one grid.
#[derive(Clone)]
pub struct SpectralPlan {
    grid: Grid,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    /// Per-axis derivative wavenumbers, Nyquist zeroed.
    k_deriv: Vec<f64>,
    /// Full |k|² per flat index.
    k2: Vec<f64>,
    /// Eigenvalues of the negated second-order finite-difference Laplacian.
    lambda_fd: Vec<f64>,
}

impl std::fmt::Debug for SpectralPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpectralPlan").field("grid", &self.grid).finish()
    }
}

/// Signed integer frequency of FFT bin `m` on `n` points.
pub fn frequency(m: usize, n: usize) -> i64 {
    if m < n.div_ceil(2) {
        m as i64
    } else {
        m as i64 - n as i64
    }
}

impl SpectralPlan {
    pub fn new(grid: Grid) -> Self {
        let n = grid.points;
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        let base = 2.0 * std::f64::consts::PI / grid.length;
        let k_full: Vec<f64> = (0..n).map(|m| base * frequency(m, n) as f64).collect();
        let k_deriv: Vec<f64> = (0..n)
            .map(|m| if n % 2 == 0 && m == n / 2 { 0.0 } else { k_full[m] })
            .collect();
        let h = grid.spacing();
        let fd: Vec<f64> = (0..n)
            .map(|m| {
                let s = (std::f64::consts::PI * m as f64 / n as f64).sin();
                4.0 * s * s / (h * h)
            })
            .collect();
        let len = grid.len();
        let mut k2 = vec![0.0; len];
        let mut lambda_fd = vec![0.0; len];
        for idx in 0..len {
            let mi = grid.multi_index(idx);
            for d in 0..grid.dim {
                k2[idx] += k_full[mi[d]] * k_full[mi[d]];
                lambda_fd[idx] += fd[mi[d]];
            }
        }
        Self { grid, fwd, inv, k_deriv, k2, lambda_fd }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    /// Full |k|² of each flat Fourier index.
    pub fn k_squared(&self) -> &[f64] {
        &self.k2
    }

    /// Derivative wavenumber along `axis` at flat Fourier index `idx`.
    #[inline]
    pub fn k_axis(&self, axis: usize, idx: usize) -> f64 {
        let m = (idx / self.grid.stride(axis)) % self.grid.points;
        self.k_deriv[m]
    }

    fn transform(&self, buf: &mut [Complex64], inverse: bool) {
        let fft = if inverse { &self.inv } else { &self.fwd };
        let n = self.grid.points;
        let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        fft.process_with_scratch(buf, &mut scratch);
        if self.grid.dim == 1 {
            return;
        }
        let mut lines = vec![Complex64::new(0.0, 0.0); buf.len()];
        for axis in 1..self.grid.dim {
            let stride = self.grid.stride(axis);
            let block = stride * n;
            let outer = buf.len() / block;
            let mut line = 0;
            for o in 0..outer {
                for r in 0..stride {
                    let base = o * block + r;
                    let dst = &mut lines[line * n..(line + 1) * n];
                    for (m, slot) in dst.iter_mut().enumerate() {
                        *slot = buf[base + m * stride];
                    }
                    line += 1;
                }
            }
            fft.process_with_scratch(&mut lines, &mut scratch);
            line = 0;
            for o in 0..outer {
                for r in 0..stride {
                    let base = o * block + r;
                    let src = &lines[line * n..(line + 1) * n];
                    for (m, v) in src.iter().enumerate() {
                        buf[base + m * stride] = *v;
                    }
                    line += 1;
                }
            }
        }
    }

    pub fn forward(&self, values: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.transform(&mut buf, false);
        buf
    }

    /// Inverse transform keeping the real part, normalized.
    pub fn inverse(&self, mut buf: Vec<Complex64>) -> Vec<f64> {
        self.transform(&mut buf, true);
        let scale = 1.0 / buf.len() as f64;
        buf.into_iter().map(|c| c.re * scale).collect()
    }

    pub fn to_field(&self, buf: Vec<Complex64>) -> ScalarField {
        ScalarField::from_raw(self.grid, self.inverse(buf))
    }

    fn apply_symbol(&self, f: &ScalarField, symbol: impl Fn(usize) -> Complex64) -> ScalarField {
        let mut hat = self.forward(&f.values);
        for (i, c) in hat.iter_mut().enumerate() {
            *c *= symbol(i);
        }
        self.to_field(hat)
    }

    pub fn derivative(&self, f: &ScalarField, axis: usize) -> ScalarField {
        self.apply_symbol(f, |i| Complex64::new(0.0, self.k_axis(axis, i)))
    }

    pub fn gradient(&self, f: &ScalarField) -> VectorField {
        let hat = self.forward(&f.values);
        let components = (0..self.grid.dim)
            .map(|d| {
                let h: Vec<Complex64> = hat
                    .iter()
                    .enumerate()
                    .map(|(i, c)| c * Complex64::new(0.0, self.k_axis(d, i)))
                    .collect();
                self.to_field(h)
            })
            .collect();
        VectorField { components }
    }

    pub fn divergence(&self, u: &VectorField) -> ScalarField {
        let mut acc = vec![Complex64::new(0.0, 0.0); self.grid.len()];
        for (d, comp) in u.components.iter().enumerate() {
            let hat = self.forward(&comp.values);
            for (i, (a, c)) in acc.iter_mut().zip(hat).enumerate() {
                *a += c * Complex64::new(0.0, self.k_axis(d, i));
            }
        }
        self.to_field(acc)
    }

    pub fn laplacian(&self, f: &ScalarField) -> ScalarField {
        self.apply_symbol(f, |i| Complex64::new(-self.k2[i], 0.0))
    }

    /// Second-order central-difference Laplacian.
    pub fn fd_laplacian(&self, f: &ScalarField) -> ScalarField {
        fd_laplacian(f)
    }

    pub fn heat_semigroup(&self, f: &ScalarField, t: f64) -> Result<ScalarField> {
        check_duration(t)?;
        if t == 0.0 {
            return Ok(f.clone());
        }
        Ok(self.apply_symbol(f, |i| Complex64::new((-self.k2[i] * t).exp(), 0.0)))
    }

    pub fn heat_semigroup_vector(&self, u: &VectorField, t: f64) -> Result<VectorField> {
        let components = u
            .components
            .iter()
            .map(|c| self.heat_semigroup(c, t))
            .collect::<Result<Vec<_>>>()?;
        Ok(VectorField { components })
    }

    /// `exp(t Δ_h)` for the finite-difference Laplacian; positivity preserving.
    pub fn fd_heat(&self, f: &ScalarField, t: f64) -> Result<ScalarField> {
        check_duration(t)?;
        if t == 0.0 {
            return Ok(f.clone());
        }
        Ok(self.apply_symbol(f, |i| Complex64::new((-self.lambda_fd[i] * t).exp(), 0.0)))
    }

    /// In-place `e^{tΔ}` on Fourier coefficients.
    pub fn heat_hat(&self, hat: &mut [Complex64], t: f64) {
        for (c, k2) in hat.iter_mut().zip(&self.k2) {
            *c *= (-k2 * t).exp();
        }
    }

    /// In-place Leray projection on Fourier coefficients of each component.
    pub fn leray_hat(&self, hats: &mut [Vec<Complex64>]) {
        let dim = self.grid.dim;
        for i in 0..self.grid.len() {
            let mut kk = 0.0;
            let mut kdotu = Complex64::new(0.0, 0.0);
            for (d, hat) in hats.iter().enumerate().take(dim) {
                let k = self.k_axis(d, i);
                kk += k * k;
                kdotu += hat[i] * k;
            }
            if kk == 0.0 {
                continue;
            }
            let q = kdotu / kk;
            for (d, hat) in hats.iter_mut().enumerate().take(dim) {
                hat[i] -= q * self.k_axis(d, i);
            }
        }
    }

    pub fn leray_project(&self, u: &VectorField) -> VectorField {
        let mut hats: Vec<Vec<Complex64>> = u.components.iter().map(|c| self.forward(&c.values)).collect();
        self.leray_hat(&mut hats);
        VectorField { components: hats.into_iter().map(|h| self.to_field(h)).collect() }
    }

    pub fn stokes_propagate(&self, u: &VectorField, t: f64) -> Result<VectorField> {
        check_duration(t)?;
        let mut hats: Vec<Vec<Complex64>> = u.components.iter().map(|c| self.forward(&c.values)).collect();
        self.leray_hat(&mut hats);
        if t > 0.0 {
            for h in hats.iter_mut() {
                self.heat_hat(h, t);
            }
        }
        Ok(VectorField { components: hats.into_iter().map(|h| self.to_field(h)).collect() })
    }

    /// Rank-checked entry point for gradient, divergence and Laplacian.
    pub fn spectral_derivatives(&self, f: FieldRef<'_>, which: Derivative) -> Result<FieldValue> {
        match (f, which) {
            (FieldRef::Scalar(s), Derivative::Grad) => Ok(FieldValue::Vector(self.gradient(s))),
            (FieldRef::Scalar(s), Derivative::Laplacian) => Ok(FieldValue::Scalar(self.laplacian(s))),
            (FieldRef::Vector(v), Derivative::Div) => Ok(FieldValue::Scalar(self.divergence(v))),
            (FieldRef::Vector(v), Derivative::Laplacian) => Ok(FieldValue::Vector(VectorField {
                components: v.components.iter().map(|c| self.laplacian(c)).collect(),
            })),
            (FieldRef::Scalar(_), Derivative::Div) => Err(Error::arg("divergence of a scalar field")),
            (FieldRef::Vector(_), Derivative::Grad) => {
                Err(Error::arg("gradient of a vector field is not supported"))
            }
        }
    }
}

fn check_duration(t: f64) -> Result<()> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::arg(format!("propagation time {t} must be finite and >= 0")));
    }
    Ok(())
}

/// Second-order central-difference Laplacian on a periodic grid.
pub fn fd_laplacian(f: &ScalarField) -> ScalarField {
    let g = f.grid;
    let inv_h2 = 1.0 / (g.spacing() * g.spacing());
    let mut out = vec![0.0; g.len()];
    for d in 0..g.dim {
        let stride = g.stride(d);
        let n = g.points;
        for (i, o) in out.iter_mut().enumerate() {
            let m = (i / stride) % n;
            let up = if m + 1 == n { i + stride - n * stride } else { i + stride };
            let dn = if m == 0 { i + (n - 1) * stride } else { i - stride };
            *o += (f.values[up] - 2.0 * f.values[i] + f.values[dn]) * inv_h2;
        }
    }
    ScalarField::from_raw(g, out)
}

#[derive(Clone, Copy, Debug)]
pub enum FieldRef<'a> {
    Scalar(&'a ScalarField),
    Vector(&'a VectorField),
}

#[derive(Clone, Debug, PartialEq)]
pub enum FieldValue {
    Scalar(ScalarField),
    Vector(VectorField),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Derivative {
    Grad,
    Div,
    Laplacian,
}

/// Data family for [`verify_smoothing`]: scalars evolve under the heat
/// semigroup, vectors under the Stokes propagator.
#[derive(Clone, Debug)]
pub enum SmoothingFamily {
    Scalar(Vec<ScalarField>),
    Vector(Vec<VectorField>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SmoothingFit {
    pub slope: f64,
    pub intercept: f64,
    pub expected_slope: f64,
    pub rms_residual: f64,
    /// `(t, worst-case ratio)` pairs used in the fit.
    pub points: Vec<(f64, f64)>,
}

/// Gaussian bumps centred in the box with widths geometric between `2h` and
/// `L/32` (ratio 2^{1/4}), plus the constant field when `with_constant`.
pub fn bump_family(grid: Grid, with_constant: bool) -> Vec<ScalarField> {
    let h = grid.spacing();
    let (lo, hi) = (2.0 * h, grid.length / 32.0);
    let mut out = Vec::new();
    let mut sigma = lo;
    while sigma <= hi * (1.0 + 1e-12) {
        let c = 0.5 * grid.length;
        out.push(ScalarField::from_fn(grid, |x| {
            let r2: f64 = (0..grid.dim).map(|d| (x[d] - c).powi(2)).sum();
            (-r2 / (2.0 * sigma * sigma)).exp()
        }));
        sigma *= 2f64.powf(0.25);
    }
    if with_constant {
        out.push(ScalarField::constant(grid, 1.0));
    }
    out
}

fn norm_of(f: &ScalarField, p: f64) -> f64 {
    lp_norm(f, NormSpec::lp(p))
}

fn vector_norm(u: &VectorField, p: f64) -> f64 {
    norm_of(&u.magnitude(), p)
}

fn jacobian_magnitude(plan: &SpectralPlan, u: &VectorField) -> ScalarField {
    let grid = plan.grid();
    let mut acc = ScalarField::zeros(grid);
    for c in &u.components {
        let g = plan.gradient(c);
        for comp in &g.components {
            for (a, v) in acc.values.iter_mut().zip(&comp.values) {
                *a += v * v;
            }
        }
    }
    acc.map(f64::sqrt)
}

/// Ordinary least squares `y = a + b x`, returning `(b, a, rms)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let rms = (x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum::<f64>() / n).sqrt();
    (slope, intercept, rms)
}

/// Fits the power law of the worst-case `‖T(t) f‖_r / ‖f‖_p` over a family,
/// where `T` is the heat semigroup (scalars) or Stokes propagator (vectors),
/// optionally followed by a gradient.
pub fn verify_smoothing(
    plan: &SpectralPlan,
    p: f64,
    r: f64,
    family: &SmoothingFamily,
    times: &[f64],
    gradient: bool,
) -> Result<SmoothingFit> {
    if !(p >= 1.0 && r >= p) {
        return Err(Error::arg(format!("need 1 <= p <= r, got p = {p}, r = {r}")));
    }
    let grid = plan.grid();
    let limit = (grid.length / 8.0).powi(2);
    let window: Vec<f64> = times.iter().copied().filter(|&t| t > 0.0 && t <= limit).collect();
    if window.len() < 2 {
        return Err(Error::arg("fewer than two fit times with sqrt(t) <= L/8"));
    }
    let (tmin, tmax) = window.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &t| (a.min(t), b.max(t)));
    if tmax / tmin < 10.0 * (1.0 - 1e-12) {
        return Err(Error::arg(format!("fit times span {tmin:e}..{tmax:e}, less than one decade")));
    }
    let mut points = Vec::with_capacity(window.len());
    for &t in &window {
        let mut worst = 0.0f64;
        match family {
            SmoothingFamily::Scalar(fs) => {
                for f in fs {
                    let base = norm_of(f, p);
                    if base == 0.0 {
                        continue;
                    }
                    let g = plan.heat_semigroup(f, t)?;
                    let top = if gradient { vector_norm(&plan.gradient(&g), r) } else { norm_of(&g, r) };
                    worst = worst.max(top / base);
                }
            }
            SmoothingFamily::Vector(us) => {
                for u in us {
                    let base = vector_norm(u, p);
                    if base == 0.0 {
                        continue;
                    }
                    let g = plan.stokes_propagate(u, t)?;
                    let top = if gradient { norm_of(&jacobian_magnitude(plan, &g), r) } else { vector_norm(&g, r) };
                    worst = worst.max(top / base);
                }
            }
        }
        if worst <= 0.0 {
            return Err(Error::InsufficientData("family gives identically zero output".into()));
        }
        points.push((t, worst));
    }
    let x: Vec<f64> = points.iter().map(|(t, _)| t.ln()).collect();
    let y: Vec<f64> = points.iter().map(|(_, v)| v.ln()).collect();
    let (slope, intercept, rms_residual) = linear_fit(&x, &y);
    let inv = |q: f64| if q.is_infinite() { 0.0 } else { 1.0 / q };
    let expected_slope = -(grid.dim as f64 / 2.0) * (inv(p) - inv(r)) - if gradient { 0.5 } else { 0.0 };
    Ok(SmoothingFit { slope, intercept, expected_slope, rms_residual, points })
}
