//! Periodic grids, sampled fields, discrete norms and seeded field generation.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Uniform periodic grid on `[0, L)^n`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dim: usize,
    pub length: f64,
    pub points: usize,
}

impl Grid {
    pub fn new(dim: usize, length: f64, points: usize) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(Error::InvalidGrid(format!("dimension {dim} not in 1..=3")));
        }
        if points < 8 {
            return Err(Error::InvalidGrid(format!("need at least 8 points per axis, got {points}")));
        }
        if !(length.is_finite() && length > 0.0) {
            return Err(Error::InvalidGrid(format!("box length {length} must be positive")));
        }
        Ok(Self { dim, length, points })
    }

    pub fn spacing(&self) -> f64 {
        self.length / self.points as f64
    }

    pub fn len(&self) -> usize {
        self.points.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }

    pub fn volume(&self) -> f64 {
        self.length.powi(self.dim as i32)
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.points.pow(axis as u32)
    }

    pub fn multi_index(&self, index: usize) -> [usize; 3] {
        let mut out = [0; 3];
        let mut rest = index;
        for slot in out.iter_mut().take(self.dim) {
            *slot = rest % self.points;
            rest /= self.points;
        }
        out
    }

    pub fn flat_index(&self, idx: [usize; 3]) -> usize {
        (0..self.dim).rev().fold(0, |acc, d| acc * self.points + idx[d] % self.points)
    }

    pub fn coords(&self, index: usize) -> [f64; 3] {
        let m = self.multi_index(index);
        let h = self.spacing();
        [m[0] as f64 * h, m[1] as f64 * h, m[2] as f64 * h]
    }

    /// Neighbour index shifted by `offset` cells along `axis`, with wrap-around.
    pub fn shifted(&self, index: usize, axis: usize, offset: isize) -> usize {
        let stride = self.stride(axis);
        let i = (index / stride) % self.points;
        let n = self.points as isize;
        let j = ((i as isize + offset) % n + n) % n;
        index - i * stride + j as usize * stride
    }

    /// Signed minimum-image displacement `x - y` along one axis.
    pub fn periodic_delta(&self, x: f64, y: f64) -> f64 {
        let l = self.length;
        let mut d = (x - y) % l;
        if d > 0.5 * l {
            d -= l;
        } else if d < -0.5 * l {
            d += l;
        }
        d
    }

    /// Squared Euclidean minimum-image distance between two nodes.
    pub fn distance_sq(&self, a: usize, b: usize) -> f64 {
        let (xa, xb) = (self.coords(a), self.coords(b));
        (0..self.dim)
            .map(|d| self.periodic_delta(xa[d], xb[d]).powi(2))
            .sum()
    }

    /// Max-coordinate minimum-image distance between two nodes.
    pub fn distance_max(&self, a: usize, b: usize) -> f64 {
        let (xa, xb) = (self.coords(a), self.coords(b));
        (0..self.dim)
            .map(|d| self.periodic_delta(xa[d], xb[d]).abs())
            .fold(0.0, f64::max)
    }
}

/// Real samples at every node of a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::arg(format!(
                "field has {} values, grid expects {}",
                values.len(),
                grid.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::arg(format!("non-finite value at node {i}")));
        }
        Ok(Self { grid, values })
    }

    /// Builds a field without the finiteness scan.
    pub fn from_raw(grid: Grid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self { grid, values }
    }

    pub fn zeros(grid: Grid) -> Self {
        Self { grid, values: vec![0.0; grid.len()] }
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        Self { grid, values: vec![value; grid.len()] }
    }

    pub fn from_fn(grid: Grid, f: impl Fn([f64; 3]) -> f64) -> Self {
        let values = (0..grid.len()).map(|i| f(grid.coords(i))).collect();
        Self { grid, values }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        best
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_raw(self.grid, self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.grid, other.grid);
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        Self::from_raw(self.grid, values)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| c * v)
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn axpy(&mut self, a: f64, x: &Self) {
        for (s, v) in self.values.iter_mut().zip(&x.values) {
            *s += a * v;
        }
    }

    /// Discrete L² inner product `Σ f g hⁿ`.
    pub fn dot(&self, other: &Self) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum::<f64>()
            * self.grid.cell_volume()
    }
}

/// `n` scalar components on a shared grid.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    pub components: Vec<ScalarField>,
}

impl VectorField {
    pub fn new(components: Vec<ScalarField>) -> Result<Self> {
        let Some(first) = components.first() else {
            return Err(Error::arg("vector field needs at least one component"));
        };
        if components.len() != first.grid.dim {
            return Err(Error::arg(format!(
                "{} components on a {}-dimensional grid",
                components.len(),
                first.grid.dim
            )));
        }
        if components.iter().any(|c| c.grid != first.grid) {
            return Err(Error::arg("components live on different grids"));
        }
        if components.iter().any(|c| !c.is_finite()) {
            return Err(Error::arg("non-finite vector component"));
        }
        Ok(Self { components })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self { components: (0..grid.dim).map(|_| ScalarField::zeros(grid)).collect() }
    }

    pub fn grid(&self) -> Grid {
        self.components[0].grid
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    /// Pointwise Euclidean magnitude.
    pub fn magnitude(&self) -> ScalarField {
        let grid = self.grid();
        let values = (0..grid.len())
            .map(|i| self.components.iter().map(|c| c.values[i].powi(2)).sum::<f64>().sqrt())
            .collect();
        ScalarField::from_raw(grid, values)
    }

    pub fn max_abs(&self) -> f64 {
        self.magnitude().max_abs()
    }

    pub fn scale(&self, c: f64) -> Self {
        Self { components: self.components.iter().map(|f| f.scale(c)).collect() }
    }

    pub fn add(&self, other: &Self) -> Self {
        Self {
            components: self.components.iter().zip(&other.components).map(|(a, b)| a.add(b)).collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self {
            components: self.components.iter().zip(&other.components).map(|(a, b)| a.sub(b)).collect(),
        }
    }

    /// Each component multiplied by a scalar field.
    pub fn scale_by(&self, f: &ScalarField) -> Self {
        Self { components: self.components.iter().map(|c| c.mul(f)).collect() }
    }

    /// Pointwise dot product with another vector field.
    pub fn dot_field(&self, other: &Self) -> ScalarField {
        let grid = self.grid();
        let mut out = ScalarField::zeros(grid);
        for (a, b) in self.components.iter().zip(&other.components) {
            for ((o, x), y) in out.values.iter_mut().zip(&a.values).zip(&b.values) {
                *o += x * y;
            }
        }
        out
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.components.iter().zip(&other.components).map(|(a, b)| a.dot(b)).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.dot(self).max(0.0).sqrt()
    }
}

/// Uniform time grid `t0 < t0 + dt < ... < t1` with `steps` intervals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub t1: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t1: f64, steps: usize) -> Result<Self> {
        if !(t0.is_finite() && t1.is_finite() && t1 > t0) {
            return Err(Error::arg(format!("time grid needs t1 > t0, got [{t0}, {t1}]")));
        }
        if steps == 0 {
            return Err(Error::arg("time grid needs at least one step"));
        }
        Ok(Self { t0, t1, steps })
    }

    pub fn dt(&self) -> f64 {
        (self.t1 - self.t0) / self.steps as f64
    }

    pub fn time(&self, j: usize) -> f64 {
        if j == self.steps {
            self.t1
        } else {
            self.t0 + j as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|j| self.time(j)).collect()
    }
}

/// Exponents of a discrete `L^s_T L^p` norm; `s = None` means a single slice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormSpec {
    pub p: f64,
    pub s: Option<f64>,
}

impl NormSpec {
    pub fn new(p: f64, s: Option<f64>) -> Result<Self> {
        if !(p >= 1.0) {
            return Err(Error::arg(format!("norm exponent p = {p} must be >= 1")));
        }
        if let Some(s) = s {
            if !(s >= 1.0) {
                return Err(Error::arg(format!("temporal exponent s = {s} must be >= 1")));
            }
        }
        Ok(Self { p, s })
    }

    pub fn lp(p: f64) -> Self {
        Self { p, s: None }
    }

    pub fn l2() -> Self {
        Self { p: 2.0, s: Some(2.0) }
    }
}

/// Time-indexed sequence of scalar fields.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub slices: Vec<ScalarField>,
}

impl Trajectory {
    pub fn new(times: Vec<f64>, slices: Vec<ScalarField>) -> Result<Self> {
        if times.len() != slices.len() {
            return Err(Error::arg("trajectory times and slices differ in length"));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::arg("trajectory times must increase strictly"));
        }
        if let Some(first) = slices.first() {
            if slices.iter().any(|s| s.grid != first.grid) {
                return Err(Error::arg("trajectory slices live on different grids"));
            }
        }
        Ok(Self { times, slices })
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn last(&self) -> Option<&ScalarField> {
        self.slices.last()
    }

    /// Linear interpolation in time, clamped to the sampled range.
    pub fn at(&self, t: f64) -> ScalarField {
        interpolate(&self.times, &self.slices, t)
    }
}

pub(crate) fn bracket(times: &[f64], t: f64) -> (usize, usize, f64) {
    let n = times.len();
    if n == 1 || t <= times[0] {
        return (0, 0, 0.0);
    }
    if t >= times[n - 1] {
        return (n - 1, n - 1, 0.0);
    }
    let j = times.partition_point(|&s| s <= t).clamp(1, n - 1);
    let (a, b) = (times[j - 1], times[j]);
    (j - 1, j, (t - a) / (b - a))
}

pub(crate) fn interpolate(times: &[f64], slices: &[ScalarField], t: f64) -> ScalarField {
    let (i, j, w) = bracket(times, t);
    if i == j || w == 0.0 {
        return slices[i].clone();
    }
    slices[i].zip_map(&slices[j], |a, b| (1.0 - w) * a + w * b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Wave {
    Sin,
    Cos,
}

/// One factor `sin` or `cos` of `2π m x_d / L` along an axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisWave {
    pub wave: Wave,
    pub number: i32,
}

/// Analytic or seeded-random recipe for a scalar field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FieldDescriptor {
    Constant(f64),
    /// `amplitude * Π_d wave_d(2π m_d x_d / L)`; missing axes contribute 1.
    Mode { amplitude: f64, waves: Vec<AxisWave> },
    /// Unnormalized `amplitude * exp(-r² / 2σ²)` with periodic `r`.
    Gaussian { center: Vec<f64>, sigma: f64, amplitude: f64 },
    /// Sum of Fourier modes with `|m_d| <= max_mode`, zero mean, unit max-norm
    /// before scaling by `amplitude`.
    Random { seed: u64, max_mode: u32, amplitude: f64 },
}

impl FieldDescriptor {
    pub fn sin(number: i32) -> Self {
        FieldDescriptor::Mode {
            amplitude: 1.0,
            waves: vec![AxisWave { wave: Wave::Sin, number }],
        }
    }
}

pub fn sample_field(grid: Grid, descriptor: &FieldDescriptor) -> Result<ScalarField> {
    match descriptor {
        FieldDescriptor::Constant(c) => {
            if !c.is_finite() {
                return Err(Error::InvalidDescriptor(format!("constant {c} is not finite")));
            }
            Ok(ScalarField::constant(grid, *c))
        }
        FieldDescriptor::Mode { amplitude, waves } => {
            if waves.len() > grid.dim {
                return Err(Error::InvalidDescriptor(format!(
                    "{} wave factors on a {}-dimensional grid",
                    waves.len(),
                    grid.dim
                )));
            }
            let k = 2.0 * PI / grid.length;
            let waves = waves.clone();
            let amp = *amplitude;
            Ok(ScalarField::from_fn(grid, move |x| {
                waves.iter().enumerate().fold(amp, |acc, (d, w)| {
                    let arg = k * w.number as f64 * x[d];
                    acc * match w.wave {
                        Wave::Sin => arg.sin(),
                        Wave::Cos => arg.cos(),
                    }
                })
            }))
        }
        FieldDescriptor::Gaussian { center, sigma, amplitude } => {
            if !(*sigma > 0.0) || !sigma.is_finite() {
                return Err(Error::InvalidDescriptor(format!("sigma {sigma} must be positive")));
            }
            if center.len() != grid.dim {
                return Err(Error::InvalidDescriptor(format!(
                    "center has {} coordinates, grid has dimension {}",
                    center.len(),
                    grid.dim
                )));
            }
            if center.iter().any(|&c| !(0.0..grid.length).contains(&c)) {
                return Err(Error::InvalidDescriptor(format!(
                    "center {center:?} outside the box [0, {})",
                    grid.length
                )));
            }
            let (c, s2, amp) = (center.clone(), 2.0 * sigma * sigma, *amplitude);
            Ok(ScalarField::from_fn(grid, move |x| {
                let r2: f64 = c.iter().enumerate().map(|(d, &cd)| grid.periodic_delta(x[d], cd).powi(2)).sum();
                amp * (-r2 / s2).exp()
            }))
        }
        FieldDescriptor::Random { seed, max_mode, amplitude } => {
            let kmax = *max_mode as usize;
            if kmax == 0 || 2 * kmax >= grid.points {
                return Err(Error::InvalidDescriptor(format!(
                    "max_mode {max_mode} must lie in 1..{}",
                    grid.points / 2
                )));
            }
            Ok(random_band_limited(grid, *seed, kmax, *amplitude))
        }
    }
}

fn random_band_limited(grid: Grid, seed: u64, kmax: usize, amplitude: f64) -> ScalarField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = 2 * kmax + 1;
    let count = width.pow(grid.dim as u32);
    let k = 2.0 * PI / grid.length;
    // Per-axis phase tables e^{i k m x}.
    let mut cos_t = vec![vec![0.0; grid.points]; width];
    let mut sin_t = vec![vec![0.0; grid.points]; width];
    for (mi, (ct, st)) in cos_t.iter_mut().zip(sin_t.iter_mut()).enumerate() {
        let m = mi as f64 - kmax as f64;
        for i in 0..grid.points {
            let arg = k * m * i as f64 * grid.spacing();
            ct[i] = arg.cos();
            st[i] = arg.sin();
        }
    }
    let mut modes = Vec::new();
    for code in 0..count {
        let mut m = [0usize; 3];
        let mut rest = code;
        for slot in m.iter_mut().take(grid.dim) {
            *slot = rest % width;
            rest /= width;
        }
        // Keep one representative of each ±m pair and drop the zero mode.
        let signed: Vec<i64> = (0..grid.dim).map(|d| m[d] as i64 - kmax as i64).collect();
        let lead = signed.iter().rev().find(|&&s| s != 0);
        if lead.is_none_or(|&s| s < 0) {
            continue;
        }
        let a: f64 = rng.gen_range(-1.0..1.0);
        let b: f64 = rng.gen_range(-1.0..1.0);
        modes.push((m, a, b));
    }
    let mut values = vec![0.0; grid.len()];
    for (idx, val) in values.iter_mut().enumerate() {
        let mi = grid.multi_index(idx);
        let mut acc = 0.0;
        for (m, a, b) in &modes {
            let (mut re, mut im) = (1.0, 0.0);
            for d in 0..grid.dim {
                let (c, s) = (cos_t[m[d]][mi[d]], sin_t[m[d]][mi[d]]);
                (re, im) = (re * c - im * s, re * s + im * c);
            }
            acc += a * re + b * im;
        }
        *val = acc;
    }
    let peak = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { amplitude / peak } else { 0.0 };
    ScalarField::from_raw(grid, values.into_iter().map(|v| v * scale).collect())
}

/// Discrete `(Σ |f|^p hⁿ)^{1/p}`, or `max |f|` for `p = ∞`. The temporal
/// exponent of `spec` is ignored.
pub fn lp_norm(f: &ScalarField, spec: NormSpec) -> f64 {
    lp_values(&f.values, f.grid.cell_volume(), spec.p)
}

pub(crate) fn lp_values(values: &[f64], dv: f64, p: f64) -> f64 {
    if p.is_infinite() {
        values.iter().fold(0.0, |m, v| m.max(v.abs()))
    } else if p == 1.0 {
        values.iter().map(|v| v.abs()).sum::<f64>() * dv
    } else if p == 2.0 {
        (values.iter().map(|v| v * v).sum::<f64>() * dv).sqrt()
    } else {
        (values.iter().map(|v| v.abs().powf(p)).sum::<f64>() * dv).powf(1.0 / p)
    }
}

pub fn integrate(f: &ScalarField) -> f64 {
    f.values.iter().sum::<f64>() * f.grid.cell_volume()
}

/// Trapezoidal weights for a (possibly non-uniform) time sample.
pub fn trapezoid_weights(times: &[f64]) -> Vec<f64> {
    let n = times.len();
    let mut w = vec![0.0; n];
    for j in 1..n {
        let dt = times[j] - times[j - 1];
        w[j - 1] += 0.5 * dt;
        w[j] += 0.5 * dt;
    }
    w
}

/// Discrete `L^s_T L^p` norm with trapezoidal time weights; `s = ∞` or a
/// missing `s` gives the max over slices.
pub fn mixed_norm(times: &[f64], slices: &[ScalarField], spec: NormSpec) -> f64 {
    let per: Vec<f64> = slices.iter().map(|f| lp_norm(f, spec)).collect();
    match spec.s {
        Some(s) if s.is_finite() && times.len() > 1 => {
            let w = trapezoid_weights(times);
            per.iter().zip(&w).map(|(v, w)| w * v.powf(s)).sum::<f64>().powf(1.0 / s)
        }
        _ => per.iter().fold(0.0, |m, &v| m.max(v)),
    }
}

/// Fraction of `∫|f|` carried by nodes within 5% of a box face on any axis.
pub fn boundary_fraction(f: &ScalarField) -> f64 {
    let g = f.grid;
    let (lo, hi) = (0.05 * g.length, 0.95 * g.length);
    let mut shell = 0.0;
    let mut total = 0.0;
    for (i, v) in f.values.iter().enumerate() {
        let x = g.coords(i);
        total += v.abs();
        if (0..g.dim).any(|d| x[d] < lo || x[d] >= hi) {
            shell += v.abs();
        }
    }
    if total > 0.0 {
        shell / total
    } else {
        0.0
    }
}

/// Controls for [`holder_seminorm`].
#[derive(Clone, Copy, Debug)]
pub struct HolderOptions {
    /// Exhaustive search when the number of space-time samples is at most this.
    pub exhaustive_limit: usize,
    pub samples: usize,
    pub seed: u64,
}

impl Default for HolderOptions {
    fn default() -> Self {
        Self { exhaustive_limit: 4096, samples: 100_000, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HolderEstimate {
    pub value: f64,
    pub pairs: usize,
    pub exhaustive: bool,
}

/// A pair of space-time samples `(slice, node)`.
pub type SamplePair = ((usize, usize), (usize, usize));

/// Hölder quotient of one pair, using `|t-s|^β + d_max(x,y)^β`.
pub fn holder_pair_ratio(traj: &Trajectory, pair: SamplePair, beta: f64) -> f64 {
    let ((ja, ia), (jb, ib)) = pair;
    let g = traj.slices[0].grid;
    let dt = (traj.times[ja] - traj.times[jb]).abs();
    let dx = g.distance_max(ia, ib);
    let denom = dt.powf(beta) + dx.powf(beta);
    if denom == 0.0 {
        return 0.0;
    }
    (traj.slices[ja].values[ia] - traj.slices[jb].values[ib]).abs() / denom
}

/// Seeded uniform sample of distinct space-time pairs.
pub fn holder_sample_pairs(traj: &Trajectory, count: usize, seed: u64) -> Vec<SamplePair> {
    let nodes = traj.slices[0].grid.len();
    let total = nodes * traj.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let a = rng.gen_range(0..total);
        let b = rng.gen_range(0..total);
        if a != b {
            out.push(((a / nodes, a % nodes), (b / nodes, b % nodes)));
        }
    }
    out
}

/// Lower-bound estimate of the space-time Hölder seminorm of a trajectory.
pub fn holder_seminorm(traj: &Trajectory, beta: f64, opts: HolderOptions) -> Result<HolderEstimate> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::arg(format!("Hölder exponent {beta} must lie in (0, 1)")));
    }
    if traj.len() < 2 {
        return Err(Error::InsufficientData("need at least two time slices".into()));
    }
    let nodes = traj.slices[0].grid.len();
    let total = nodes * traj.len();
    if total < 2 {
        return Err(Error::InsufficientData("need at least two space-time samples".into()));
    }
    if total <= opts.exhaustive_limit {
        let mut best = 0.0f64;
        let mut pairs = 0;
        for a in 0..total {
            for b in a + 1..total {
                let pair = ((a / nodes, a % nodes), (b / nodes, b % nodes));
                best = best.max(holder_pair_ratio(traj, pair, beta));
                pairs += 1;
            }
        }
        return Ok(HolderEstimate { value: best, pairs, exhaustive: true });
    }
    let pairs = holder_sample_pairs(traj, opts.samples, opts.seed);
    let value = pairs.iter().fold(0.0f64, |m, &p| m.max(holder_pair_ratio(traj, p, beta)));
    Ok(HolderEstimate { value, pairs: pairs.len(), exhaustive: false })
}
