//! Deterministic chunked parallelism.
//!
//! Paths are split into fixed-size chunks; chunks are mapped in parallel and
//! reduced strictly in chunk order. With the chunk size held constant the
//! result is bit-identical for any worker count, because each chunk's partial
//! result and the fold order never change.

use rayon::prelude::*;

/// Default paths per chunk; part of the reproducibility contract, so runs
/// with different worker counts agree bit for bit.
pub const DEFAULT_CHUNK: usize = 16_384;

/// Half-open index ranges covering `0..q` in chunks of `chunk`.
pub fn chunk_ranges(q: usize, chunk: usize) -> Vec<(usize, usize)> {
    assert!(chunk > 0, "chunk size must be positive");
    (0..q.div_ceil(chunk))
        .map(|c| (c * chunk, ((c + 1) * chunk).min(q)))
        .collect()
}

/// Map chunks in parallel, then fold the per-chunk results in chunk order.
pub fn par_chunk_reduce<A, M, F>(q: usize, chunk: usize, map: M, mut fold: F) -> Option<A>
where
    A: Send,
    M: Fn(usize, usize) -> A + Sync,
    F: FnMut(A, A) -> A,
{
    let parts: Vec<A> = chunk_ranges(q, chunk)
        .into_par_iter()
        .map(|(lo, hi)| map(lo, hi))
        .collect();
    parts.into_iter().reduce(|a, b| fold(a, b))
}

/// Run `f` on a dedicated rayon pool with `workers` threads (0 = rayon's
/// default pool).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    if workers == 0 {
        f()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .expect("failed to build worker pool")
            .install(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_cover_exactly() {
        let r = chunk_ranges(10, 4);
        assert_eq!(r, vec![(0, 4), (4, 8), (8, 10)]);
        assert_eq!(chunk_ranges(8, 4), vec![(0, 4), (4, 8)]);
        assert_eq!(chunk_ranges(3, 16), vec![(0, 3)]);
    }

    #[test]
    fn reduce_is_worker_count_invariant() {
        let run = |workers| {
            with_workers(workers, || {
                par_chunk_reduce(
                    1_000,
                    7,
                    |lo, hi| (lo..hi).map(|i| (i as f64).sqrt()).sum::<f64>(),
                    |a, b| a + b,
                )
                .unwrap()
            })
        };
        let one = run(1);
        let four = run(4);
        assert_eq!(one.to_bits(), four.to_bits());
    }
}
