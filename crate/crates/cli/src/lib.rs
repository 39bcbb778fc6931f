//! Command-line companion to `cyclediff-core`: configuration, file formats
//! (volumes, checkpoints, latent traces), the training loop, whole-volume
//! sampling, and CSV reports.

pub mod cli;
pub mod ckpt;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod report;
pub mod samplers;
pub mod trace;
pub mod train;
pub mod vvol;

/// Initializes the global worker pool. Thread count comes from the flag,
/// then the `CYCLEDIFF_THREADS` environment variable, then the core count;
/// it affects wall time only, never results.
pub fn init_threads(flag: Option<usize>) {
    let n = flag.or_else(|| {
        std::env::var("CYCLEDIFF_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = n {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}
