//! Numerical machinery for a porous-medium Keller–Segel system coupled to
//! Stokes flow: discrete fundamental solutions of drift-diffusion operators,
//! Gaussian envelope checks, the coupled time stepper and the dual
//! (Picard / vanishing viscosity) construction used in uniqueness arguments.
//!
//! All fields live on a periodic box. Node `i` along each axis sits at
//! `x = i * h`, and flat indices run with axis 0 fastest.

pub mod dual;
pub mod error;
pub mod field;
pub mod green;
pub mod harness;
pub mod kssim;
pub mod spectral;

pub use error::{Error, Result};
pub use field::{
    holder_seminorm, integrate, lp_norm, mixed_norm, sample_field, AxisWave, FieldDescriptor,
    Grid, HolderOptions, NormSpec, ScalarField, TimeGrid, Trajectory, VectorField, Wave,
};
pub use spectral::SpectralPlan;

/// Worker count for parallel batches, honouring `PARAKERNEL_THREADS`.
pub fn worker_threads() -> usize {
    std::env::var("PARAKERNEL_THREADS")
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `f` inside a rayon pool sized by [`worker_threads`].
pub fn with_pool<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    match rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
    {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

/// Sums per-item contributions into a buffer of length `len`. Items are
/// grouped into fixed chunks whose partial sums are added in chunk order,
/// so the result does not depend on the worker count.
pub(crate) fn ordered_accumulate<T, F>(items: &[T], chunk: usize, len: usize, f: F) -> Result<Vec<f64>>
where
    T: Sync,
    F: Fn(&T, &mut [f64]) -> Result<()> + Sync,
{
    use rayon::prelude::*;
    let chunks: Vec<&[T]> = items.chunks(chunk.max(1)).collect();
    let wave = worker_threads().max(1);
    let mut total = vec![0.0; len];
    for group in chunks.chunks(wave) {
        let partials: Vec<Result<Vec<f64>>> = with_pool(|| {
            group
                .par_iter()
                .map(|c| {
                    let mut acc = vec![0.0; len];
                    for item in c.iter() {
                        f(item, &mut acc)?;
                    }
                    Ok(acc)
                })
                .collect()
        });
        for p in partials {
            for (t, v) in total.iter_mut().zip(p?) {
                *t += v;
            }
        }
    }
    Ok(total)
}
