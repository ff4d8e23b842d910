//! Shared fixtures for the depth benchmarks.

use lares_core::corpus::{build_dataset, synthetic_events};
use lares_core::reasoner::{ArchitectureConfig, ModelParameters};

/// A freshly initialized model and `batch` inputs from a synthetic log.
pub fn fixture(batch: usize) -> (ModelParameters, Vec<Vec<usize>>) {
    let ds = build_dataset(&synthetic_events(400, 1000, (8, 30), 7), 20);
    let splits = ds.splits().expect("synthetic users have >= 3 events");
    let params = ModelParameters::init(&ArchitectureConfig::default(), ds.num_items, 1).expect("default config is valid");
    let inputs = splits.test.iter().cycle().take(batch).map(|s| s.input.clone()).collect();
    (params, inputs)
}
