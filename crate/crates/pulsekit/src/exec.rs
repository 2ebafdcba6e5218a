//! Execution-mode switch: rayon data parallelism with a sequential fallback.
//!
//! The `parallel` cargo feature (on by default) pulls in rayon; building with
//! `--no-default-features` removes the dependency entirely and every mode
//! degrades to the sequential path. With the feature enabled, callers can
//! still request [`ExecMode::Sequential`] at runtime, which is what the
//! bench suite uses to compare both paths in one binary.
//!
//! Work items are mapped in index order and collected into a `Vec`, so
//! floating-point reductions performed by the caller over the result are
//! deterministic for a fixed seed regardless of thread scheduling.

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ExecMode {
    #[default]
    Parallel,
    Sequential,
}

impl ExecMode {
    /// True when this mode will actually fan work out across threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == ExecMode::Parallel
    }
}

/// Map `f` over `0..n`, in parallel when the mode and feature allow it.
/// Results are ordered by index in both paths.
pub fn map_indexed<T, F>(mode: ExecMode, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if mode == ExecMode::Parallel {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    let _ = mode;
    (0..n).map(f).collect()
}

/// Configure the global worker count. A no-op without the `parallel` feature
/// or when called more than once (the first configuration wins).
pub fn configure_workers(workers: Option<usize>) {
    #[cfg(feature = "parallel")]
    {
        if let Some(n) = workers {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = workers;
    }
}
