//! Data-parallel execution helpers.
//!
//! Every kernel in the crate funnels its per-sample or per-chunk loops through
//! this module. With the `parallel` feature the loops run on rayon; without it,
//! or after [`set_sequential`]`(true)`, they run in order on the calling thread.
//!
//! Loops over less than [`PARALLEL_THRESHOLD`] elements of work also run
//! inline: handing them to the pool costs more than the work itself.
//!
//! Work partitions never depend on the thread count, and partial results are
//! always combined in partition order, so outputs are bit-identical whether a
//! loop ran on one thread or many.

use std::sync::atomic::{AtomicBool, Ordering};

static SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Smallest loop, in elements touched, worth spreading over threads.
pub const PARALLEL_THRESHOLD: usize = 1 << 15;

/// Forces every kernel onto the calling thread.
pub fn set_sequential(sequential: bool) {
    SEQUENTIAL.store(sequential, Ordering::Relaxed);
}

pub fn is_sequential() -> bool {
    !cfg!(feature = "parallel") || SEQUENTIAL.load(Ordering::Relaxed)
}

/// Caps kernel parallelism at `threads`. One thread also switches to the
/// sequential code path.
///
/// The global rayon pool can only be built once per process; later calls only
/// toggle the sequential switch.
pub fn configure_threads(threads: usize) {
    let threads = threads.max(1);
    set_sequential(threads == 1);
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}

/// Reads `AUATTN_THREADS` and applies it with [`configure_threads`].
pub fn configure_from_env() {
    if let Some(threads) = std::env::var("AUATTN_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
    {
        configure_threads(threads);
    }
}

fn parallel_for(items: usize, work: usize) -> bool {
    items > 1 && work >= PARALLEL_THRESHOLD && !is_sequential()
}

/// Maps `f` over `0..n`, returning results in index order. Each item is
/// assumed to be worth a thread (file I/O, image synthesis).
pub fn map<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    map_work(n, usize::MAX, f)
}

/// [`map`] for a loop touching about `work` elements in total; small loops
/// run inline.
pub fn map_work<R, F>(n: usize, work: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_for(n, work) {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Calls `f(index, chunk, scratch)` for each `chunk_len`-sized chunk of `data`.
/// `init` builds per-worker scratch state. The length of `data` is the work
/// estimate.
pub fn for_each_chunk_init<T, S, I, F>(data: &mut [T], chunk_len: usize, init: I, f: F)
where
    T: Send,
    I: Fn() -> S + Sync + Send,
    F: Fn(usize, &mut [T], &mut S) + Sync + Send,
{
    assert!(chunk_len > 0, "chunk length must be positive");
    #[cfg(feature = "parallel")]
    if parallel_for(data.len().div_ceil(chunk_len), data.len()) {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each_init(&init, |scratch, (i, chunk)| f(i, chunk, scratch));
        return;
    }
    let mut scratch = init();
    for (i, chunk) in data.chunks_mut(chunk_len).enumerate() {
        f(i, chunk, &mut scratch);
    }
}

/// [`for_each_chunk_init`] without scratch state.
pub fn for_each_chunk<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    for_each_chunk_init(data, chunk_len, || (), |i, chunk, _| f(i, chunk));
}

/// Splits `0..n` into consecutive ranges of at most `chunk` items.
pub(crate) fn ranges(n: usize, chunk: usize) -> Vec<std::ops::Range<usize>> {
    let chunk = chunk.max(1);
    (0..n.div_ceil(chunk))
        .map(|i| i * chunk..((i + 1) * chunk).min(n))
        .collect()
}
