//! Twin-experiment drivers: configuration, synthetic truth, filter runs and sweeps.

pub mod config;
pub mod run;
pub mod sweep;
pub mod twin;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use config::{ExperimentConfig, FilterSpec, Method};
pub use run::{run_filter_trajectory, spatiotemporal_rmse, RunRecord};
pub use sweep::{aggregate_table, read_long_csv, run_sweep, SweepOutput};
pub use twin::{generate_twin_data, TwinData};

/// Independent generator for a labelled stream. The label is hashed, so
/// adding streams never perturbs existing ones.
pub fn stream_rng(label: &str, seed: u64, members: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(label.as_bytes());
    h.update([0u8]);
    h.update(seed.to_le_bytes());
    h.update((members as u64).to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}
