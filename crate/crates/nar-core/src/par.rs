//! Data-parallel helpers with a sequential fallback.
//!
//! With the default `parallel` feature the maps below fan out over rayon;
//! without it they degrade to plain iteration. Both paths produce results
//! in input order, and callers reduce in fixed order, so outputs are
//! identical whichever path runs and however many worker threads exist.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Order-preserving map over a slice.
#[cfg(feature = "parallel")]
pub fn map_slice<I: Sync, O: Send>(items: &[I], f: impl Fn(&I) -> O + Sync + Send) -> Vec<O> {
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_slice<I, O>(items: &[I], f: impl Fn(&I) -> O) -> Vec<O> {
    items.iter().map(f).collect()
}

/// Always-sequential variant, kept public so benchmarks can compare paths.
pub fn map_slice_seq<I, O>(items: &[I], f: impl Fn(&I) -> O) -> Vec<O> {
    items.iter().map(f).collect()
}

/// Order-preserving map that consumes its items (for work that mutates them).
#[cfg(feature = "parallel")]
pub fn map_vec<I: Send, O: Send>(items: Vec<I>, f: impl Fn(I) -> O + Sync + Send) -> Vec<O> {
    items.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_vec<I, O>(items: Vec<I>, f: impl Fn(I) -> O) -> Vec<O> {
    items.into_iter().map(f).collect()
}

/// Order-preserving map by index (for windows into shared state).
#[cfg(feature = "parallel")]
pub fn map_range<O: Send>(n: usize, f: impl Fn(usize) -> O + Sync + Send) -> Vec<O> {
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_range<O>(n: usize, f: impl Fn(usize) -> O) -> Vec<O> {
    (0..n).map(f).collect()
}

pub fn map_range_seq<O>(n: usize, f: impl Fn(usize) -> O) -> Vec<O> {
    (0..n).map(f).collect()
}

/// Caps the rayon worker count. A no-op without the `parallel` feature and
/// after the pool has already started.
pub fn configure_threads(n: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
        false
    }
}

/// True when the parallel feature is compiled in.
pub const fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}
