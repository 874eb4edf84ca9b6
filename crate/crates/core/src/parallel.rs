//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) loops are distributed over the rayon
//! pool. Without it, or after [`set_enabled(false)`](set_enabled), every helper
//! runs the same per-item closure on the calling thread. Each output element is
//! always produced by one closure call in a fixed order, so both paths give
//! bit-identical results.

use std::sync::atomic::{AtomicBool, Ordering};

static ENABLED: AtomicBool = AtomicBool::new(true);

/// Below this many scalar operations a loop stays on the calling thread.
const MIN_PARALLEL_WORK: usize = 1 << 15;

/// Runtime switch, mainly for benchmarks comparing both paths.
pub fn set_enabled(on: bool) {
    ENABLED.store(on, Ordering::Relaxed);
}

pub fn enabled() -> bool {
    cfg!(feature = "parallel") && ENABLED.load(Ordering::Relaxed)
}

/// Sizes the global worker pool. `0` keeps the default; returns `false` when
/// the pool was already initialised or parallelism is compiled out.
pub fn set_threads(n: usize) -> bool {
    #[cfg(feature = "parallel")]
    if n > 0 {
        return rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_ok();
    }
    let _ = n;
    false
}

/// Calls `f(chunk_index, chunk)` for every `chunk_len`-sized chunk of `out`.
///
/// `work_per_chunk` is a rough scalar-op count used to decide whether the loop
/// is worth distributing.
pub fn for_each_chunk<T, F>(out: &mut [T], chunk_len: usize, work_per_chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk_len = chunk_len.max(1);
    let n_chunks = out.len().div_ceil(chunk_len);
    #[cfg(feature = "parallel")]
    if enabled() && n_chunks > 1 && n_chunks.saturating_mul(work_per_chunk) >= MIN_PARALLEL_WORK {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = (n_chunks, work_per_chunk);
    out.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
}

/// Maps `f` over `0..n`, preserving order.
pub fn map_range<R, F>(n: usize, work_per_item: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if enabled() && n > 1 && n.saturating_mul(work_per_item) >= MIN_PARALLEL_WORK {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = work_per_item;
    (0..n).map(f).collect()
}

/// Maps `f` over a slice, preserving order.
pub fn map_slice<T, R, F>(items: &[T], work_per_item: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    map_range(items.len(), work_per_item, |i| f(&items[i]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_cover_everything_in_order() {
        let mut v = vec![0usize; 100_000];
        for_each_chunk(&mut v, 1000, 1000, |ci, c| {
            for (j, x) in c.iter_mut().enumerate() {
                *x = ci * 1000 + j;
            }
        });
        assert!(v.iter().enumerate().all(|(i, &x)| i == x));
    }

    #[test]
    fn map_range_preserves_order() {
        let v = map_range(5000, 1 << 20, |i| i * 2);
        assert_eq!(v[4999], 9998);
        assert_eq!(v.len(), 5000);
    }
}
