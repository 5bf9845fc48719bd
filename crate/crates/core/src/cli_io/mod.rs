//! Command-line surface, run configuration, FXCK checkpoints, manifests and image output.

mod checkpoint;
mod cli;
mod commands;
mod config;
mod image;
mod lock;
mod manifest;

pub use checkpoint::{Checkpoint, CheckpointError, Entry, TrainState, FLATTEN_ORDER, MAGIC, VERSION};
pub use cli::{main_exit, run_with};
pub use commands::{build_plan, execute, replay, CliError, ReplayReport};
pub use config::{parse_value, resolve, ConfigError, FlexifyConfig, Layered, RunConfig, SampleConfig, DEFAULT_STEPS};
pub use image::{encode as encode_image, quantize, write as write_image};
pub use lock::{DirLock, LOCK_NAME};
pub use manifest::{input_artifact, Artifact, FlopsSummary, Job, RunManifest, MANIFEST_NAME};
