//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the helpers dispatch to rayon unless the
//! process-wide mode has been switched to [`Exec::Serial`]. Every helper
//! returns results in input order and callers reduce them sequentially, which
//! keeps floating-point results independent of the execution mode.

use std::sync::atomic::{AtomicBool, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Serial,
    Parallel,
}

static FORCE_SERIAL: AtomicBool = AtomicBool::new(false);

pub fn set_mode(mode: Exec) {
    FORCE_SERIAL.store(mode == Exec::Serial, Ordering::SeqCst);
}

/// The effective mode: `Parallel` only when compiled with rayon and not
/// forced serial.
pub fn mode() -> Exec {
    if cfg!(feature = "parallel") && !FORCE_SERIAL.load(Ordering::SeqCst) {
        Exec::Parallel
    } else {
        Exec::Serial
    }
}

/// Whether the crate was built with the `parallel` feature.
pub fn compiled_parallel() -> bool {
    cfg!(feature = "parallel")
}

/// Configures the global rayon pool. A no-op without the `parallel` feature.
/// Returns false if the pool was already initialized.
pub fn init_threads(threads: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        true
    }
}

/// Number of workers the helpers will use in the current mode.
pub fn threads() -> usize {
    #[cfg(feature = "parallel")]
    if mode() == Exec::Parallel {
        return rayon::current_num_threads();
    }
    1
}

pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode() == Exec::Parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode() == Exec::Parallel {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    items.iter().map(f).collect()
}

pub fn for_each_mut<T, F>(items: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode() == Exec::Parallel {
        use rayon::prelude::*;
        items.par_iter_mut().enumerate().for_each(|(i, x)| f(i, x));
        return;
    }
    items.iter_mut().enumerate().for_each(|(i, x)| f(i, x));
}

pub fn map_mut<T, R, F>(items: &mut [T], f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(usize, &mut T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode() == Exec::Parallel {
        use rayon::prelude::*;
        return items
            .par_iter_mut()
            .enumerate()
            .map(|(i, x)| f(i, x))
            .collect();
    }
    items.iter_mut().enumerate().map(|(i, x)| f(i, x)).collect()
}

/// Applies `f` to consecutive `chunk`-sized mutable blocks of `data`.
pub fn chunks_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    if mode() == Exec::Parallel {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}
