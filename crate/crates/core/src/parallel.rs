//! Indexed data-parallel map. With the `parallel` feature the work runs on a
//! rayon pool of the requested size; otherwise, or with one worker, it runs
//! in order on the calling thread. Results are always returned by index.

/// Worker count to use: `0` means all available cores.
pub fn resolve_workers(requested: usize) -> usize {
    if requested > 0 {
        return requested;
    }
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// `(0..n).map(f)` spread over `workers` threads.
pub fn par_map<T, F>(n: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    let workers = resolve_workers(workers);
    if workers <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    run(n, workers, f)
}

#[cfg(feature = "parallel")]
fn run<T, F>(n: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
        Err(_) => (0..n).map(f).collect(),
    }
}

#[cfg(not(feature = "parallel"))]
fn run<T, F>(n: usize, _workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}
