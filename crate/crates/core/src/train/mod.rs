mod checkpoint;
mod config;
mod model;
mod optim;
mod run;

pub use checkpoint::{Checkpoint, Stage, TrainState, MAGIC, VERSION};
pub use config::{parse_pairs, NetworkConfig, RunConfig, TrainConfig, LEVELS};
pub use model::{EncoderLevel, Features, NetOutput, Network, MAE_PREFIX};
pub use optim::{cosine_lr, Adam, AdamParams, OPTIM_PREFIX};
pub use run::{canonicalize, FitSummary, Trainer, CHECKPOINT_FILE, LOG_FILE, PRETRAIN_LOG_FILE, REPORT_FILE};
