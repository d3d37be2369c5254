//! Low-light image quality: pairwise studies, a blind quality model, and
//! quality-guided enhancement.

pub mod dataio;
pub mod enhance;
pub mod error;
pub mod graph;
pub mod iqa;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod study;
pub mod tensor;

pub use error::{Error, Result};

/// Caps the global rayon pool at `PERCEPT_LOOP_THREADS` when set.
///
/// Call once at startup; later calls are no-ops.
pub fn init_threads() -> Result<usize> {
    let n = match std::env::var("PERCEPT_LOOP_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| Error::config("PERCEPT_LOOP_THREADS", format!("`{v}` is not a positive integer")))?,
        Err(_) => 0,
    };
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(rayon::current_num_threads())
}
