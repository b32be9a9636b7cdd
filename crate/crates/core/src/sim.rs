//! Monte-Carlo sample paths. Each path owns its own [`RandomStream`];
//! results come back in path order whatever the completion order.
//!
//! With the `parallel` feature (default) work is spread over a rayon pool;
//! without it every helper runs sequentially with identical output.

use crate::channel::{RandomStream, INITIAL_DATA_STREAM};
use crate::graph::Graph;
use crate::metrics::RunTrace;
use crate::protocol::{self, ProtocolConfig};
use crate::Result;

/// `f(0), f(1), ..., f(count - 1)`, evaluated in parallel when enabled.
pub fn map_indexed<T, F>(count: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..count).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_indexed_sequential(count, f)
    }
}

pub fn map_indexed_sequential<T, F>(count: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..count).map(f).collect()
}

/// Run `f` on a pool of `workers` threads (`None`: one per processor).
/// Sequential builds ignore the worker count.
pub fn with_workers<R, F>(workers: Option<usize>, f: F) -> Result<R>
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    #[cfg(feature = "parallel")]
    {
        match workers {
            None => Ok(f()),
            Some(w) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(w.max(1))
                    .build()
                    .map_err(|e| crate::Error::invalid(format!("worker pool: {e}")))?;
                Ok(pool.install(f))
            }
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = workers;
        Ok(f())
    }
}

/// Fixed initial data: i.i.d. `N(mean, variance)` from a stream keyed by `(seed, n)`.
pub fn draw_initial_values(n: usize, mean: f64, variance: f64, seed: u64) -> Vec<f64> {
    let mut rng = RandomStream::new(seed, INITIAL_DATA_STREAM + n as u64);
    let sd = variance.max(0.0).sqrt();
    (0..n).map(|_| rng.normal(mean, sd)).collect()
}

/// Path `p` uses stream `(seed, p)`.
pub fn run_sample_paths(
    g: &Graph,
    theta0: &[f64],
    config: &ProtocolConfig,
    seed: u64,
    paths: usize,
) -> Result<Vec<RunTrace>> {
    run_sample_paths_from(g, theta0, config, seed, 0, paths)
}

/// Path `p` uses stream `(seed, first_stream + p)`.
pub fn run_sample_paths_from(
    g: &Graph,
    theta0: &[f64],
    config: &ProtocolConfig,
    seed: u64,
    first_stream: u64,
    paths: usize,
) -> Result<Vec<RunTrace>> {
    map_indexed(paths, |p| {
        run_path(g, theta0, config, seed, first_stream + p as u64)
    })
    .into_iter()
    .collect()
}

pub fn run_sample_paths_sequential(
    g: &Graph,
    theta0: &[f64],
    config: &ProtocolConfig,
    seed: u64,
    paths: usize,
) -> Result<Vec<RunTrace>> {
    map_indexed_sequential(paths, |p| run_path(g, theta0, config, seed, p as u64))
        .into_iter()
        .collect()
}

fn run_path(
    g: &Graph,
    theta0: &[f64],
    config: &ProtocolConfig,
    seed: u64,
    stream: u64,
) -> Result<RunTrace> {
    let mut rng = RandomStream::new(seed, stream);
    let mut trace = protocol::run(g, theta0, config, &mut rng)?;
    trace.sample_path_id = stream;
    Ok(trace)
}
