//! The `cochstream` pipeline: every subcommand resolves a JSON config (file
//! keys overridden by flags), runs one stage, and returns a JSON report that
//! echoes the resolved config, seed and input hashes.

pub mod commands;
pub mod config;
pub mod report;

pub use config::{resolve, SCHEMA_VERSION};
pub use report::{hash_input, Report};

/// Sizes the global worker pool from `COCHSTREAM_THREADS` (default: all cores).
pub fn init_threads() -> anyhow::Result<usize> {
    let n = match std::env::var("COCHSTREAM_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| anyhow::anyhow!("COCHSTREAM_THREADS must be a positive integer, got {v:?}"))?,
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    // A second initialization (e.g. from tests) keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(rayon::current_num_threads())
}
