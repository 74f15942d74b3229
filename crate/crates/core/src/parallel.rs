//! Deterministic fan-out over scoped threads.

/// Worker cap: `ROADCLIP_THREADS` if set, else the machine's parallelism.
pub fn worker_count() -> usize {
    std::env::var("ROADCLIP_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Maps `f` over `items` with up to `workers` threads. Output order, and
/// therefore every downstream byte, is independent of `workers`.
pub fn par_map<T: Sync, U: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| {
                let f = &f;
                s.spawn(move || c.iter().map(f).collect::<Vec<U>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_independent_of_workers() {
        let xs: Vec<u64> = (0..37).collect();
        let one = par_map(&xs, 1, |x| x * x);
        let four = par_map(&xs, 4, |x| x * x);
        assert_eq!(one, four);
    }
}
