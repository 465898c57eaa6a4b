//! Scoped-thread fan-out over independent items.
//!
//! Results are placed by item index, so the output is identical for any
//! worker count; `XLAB_THREADS` caps the number of worker contexts.

/// Worker-context cap: `XLAB_THREADS` if set, else available parallelism.
pub fn worker_count() -> usize {
    std::env::var("XLAB_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

/// Map `f` over `items`, fanning out across up to [`worker_count`] threads.
/// Output order follows item order regardless of scheduling.
pub fn parallel_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync,
{
    let n = items.len();
    let workers = worker_count().min(n).max(1);
    if workers <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let chunk = n.div_ceil(workers);
    let mut out: Vec<Vec<U>> = Vec::new();
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(w, slice)| {
                let f = &f;
                s.spawn(move || {
                    slice
                        .iter()
                        .enumerate()
                        .map(|(j, t)| f(w * chunk + j, t))
                        .collect::<Vec<U>>()
                })
            })
            .collect();
        out = handles
            .into_iter()
            .map(|h| h.join().expect("worker thread panicked"))
            .collect();
    });
    out.into_iter().flatten().collect()
}
