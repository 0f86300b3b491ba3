//! Solvers and verification tools for the discrete Smoluchowski
//! coagulation equations with mass-dependent diffusion on a periodic box.
//!
//! * [`kernels`]: coagulation kernels, diffusion profiles and hypothesis checks
//! * [`field`]: grids, mass-resolved density fields and their moments
//! * [`coagulation`]: gain/loss operators and truncation policies
//! * [`diffusion`]: spectral heat propagator
//! * [`integrator`]: split-step PDE solver and the homogeneous ODE path
//! * [`tracer`]: tracer-particle Monte Carlo against solver fields
//! * [`analysis`]: bound monitors, gelation scans, growth exponents
//! * [`scenario`]: config files, pipelines and CSV output used by the binary

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod coagulation;
pub mod diffusion;
pub mod error;
pub mod field;
pub mod integrator;
pub mod kernels;
pub mod scenario;
pub mod tracer;

pub use error::{Error, Result};

/// Runs `op` on a dedicated pool of `workers` threads (all cores if `None`).
///
/// Results never depend on the worker count: every parallel reduction in the
/// crate combines partial results in a fixed order.
pub fn with_workers<T: Send>(workers: Option<usize>, op: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        if n == 0 {
            return Err(Error::InvalidParameter("worker count must be at least 1".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::InvalidParameter(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(op))
}
