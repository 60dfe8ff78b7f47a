//! Run configuration files, checkpoints and JSON Lines output.

mod checkpoint;
mod config;
mod metrics;

pub use checkpoint::{latest_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, SavedParam, CHECKPOINT_VERSION};
pub use config::{default_pool_size, ConfigOverrides, RunConfig};
pub use metrics::{metrics_json, read_jsonl, write_trajectories, JsonlWriter};
