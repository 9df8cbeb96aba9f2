//! Process-wide runtime knobs.
//!
//! `DVHGNN_THREADS` caps kernel parallelism: 0 or 1 runs everything on the
//! calling thread, n > 1 uses a rayon pool of n workers, unset uses the
//! machine's logical CPU count. Work is only ever split across independent
//! output rows and every row's reduction stays sequential in ascending index
//! order, so the thread count never changes a single bit of output.
//!
//! This module also hosts the similarity-evaluation counter the benchmark
//! reads; the cosine kernels bump it so counted ops come from the code that
//! actually ran rather than from a formula on the side.

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

const UNSET: usize = usize::MAX;

static THREAD_CAP: AtomicUsize = AtomicUsize::new(UNSET);

/// The lazily built pool, tagged with the worker count it was built for.
type PoolSlot = Mutex<Option<(usize, Arc<rayon::ThreadPool>)>>;

fn pool_slot() -> &'static PoolSlot {
    static SLOT: OnceLock<PoolSlot> = OnceLock::new();
    SLOT.get_or_init(|| Mutex::new(None))
}

/// Current worker cap. First call reads `DVHGNN_THREADS`; unparsable or
/// unset values fall back to the logical CPU count.
pub fn threads() -> usize {
    let cached = THREAD_CAP.load(Ordering::Relaxed);
    if cached != UNSET {
        return cached;
    }
    let n = std::env::var("DVHGNN_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        });
    THREAD_CAP.store(n, Ordering::Relaxed);
    n
}

/// Override the worker cap in-process (tests flip between sequential and
/// parallel runs without re-execing). 0 and 1 both mean sequential.
pub fn set_threads(n: usize) {
    THREAD_CAP.store(n, Ordering::Relaxed);
}

fn pool_for(n: usize) -> Arc<rayon::ThreadPool> {
    let mut slot = pool_slot().lock().expect("pool lock");
    match slot.as_ref() {
        Some((size, pool)) if *size == n => pool.clone(),
        _ => {
            let pool = Arc::new(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .expect("rayon pool"),
            );
            *slot = Some((n, pool.clone()));
            pool
        }
    }
}

/// Fill `out` in row-sized chunks, one call of `fill` per row index.
///
/// Rows are disjoint, so scheduling order is irrelevant to the result; the
/// sequential path and the pooled path write identical bytes.
pub fn for_each_row<T, F>(out: &mut [T], row_len: usize, fill: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    assert!(row_len > 0 && out.len().is_multiple_of(row_len), "ragged row split");
    let cap = threads();
    if cap <= 1 || out.len() / row_len <= 1 {
        for (r, chunk) in out.chunks_mut(row_len).enumerate() {
            fill(r, chunk);
        }
    } else {
        use rayon::prelude::*;
        pool_for(cap).install(|| {
            out.par_chunks_mut(row_len)
                .enumerate()
                .for_each(|(r, chunk)| fill(r, chunk));
        });
    }
}

// ── Similarity op accounting ───────────────────────────────────────────────

static SIM_EVALS: AtomicU64 = AtomicU64::new(0);

/// Record `n` cosine-similarity evaluations.
pub fn add_sim_evals(n: u64) {
    SIM_EVALS.fetch_add(n, Ordering::Relaxed);
}

/// Zero the counter (benchmarks call this before each timed run).
pub fn reset_sim_evals() {
    SIM_EVALS.store(0, Ordering::Relaxed);
}

/// Evaluations recorded since the last reset.
pub fn sim_evals() -> u64 {
    SIM_EVALS.load(Ordering::Relaxed)
}
