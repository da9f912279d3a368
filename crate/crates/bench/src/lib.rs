//! Shared fixtures for the criterion benchmarks.

use facesnap::pipeline::{synthetic_dataset, Sample};
use facesnap::{Result, TrainConfig};

/// Default config with a small batch, and a synthetic dataset of `n` samples.
pub fn fixture(n: usize) -> Result<(TrainConfig, Vec<Sample>)> {
    let mut cfg = TrainConfig::default();
    cfg.train.batch_size = n.min(4);
    cfg.train.lr = 1e-3;
    let data = synthetic_dataset(&cfg, n, 0)?;
    Ok((cfg, data))
}
