//! Gaussian mixture ring (GMR) convolution.
//!
//! Radially symmetric convolution kernels built as a learned mixture of
//! Gaussian rings, an efficient two-stage evaluation, exact gradients,
//! and tooling to measure equivariance and speed.

pub mod bench;
pub mod conv;
pub mod equiv;
pub mod error;
pub mod gmr_kernel;
pub mod io;
pub mod net;
pub mod scalar;
pub mod tensor;

pub use error::{GmrError, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Runs `f` on a rayon pool with `threads` workers (0 = rayon default).
///
/// Every engine partitions work so that results are bitwise identical
/// for any worker count.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| GmrError::InvalidArgument(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}
