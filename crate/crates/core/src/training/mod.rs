//! Losses, metrics, optimiser, checkpoints and the three training stages.

pub mod checkpoint;
pub mod config;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod stages;

pub use checkpoint::Checkpoint;
pub use config::{Stage, TrainConfig};
pub use losses::{deblur_loss, diffusion_loss, l1_loss, msfr_loss, total_loss};
pub use metrics::{psnr, ssim};
pub use optim::{AdamW, AdamWConfig};
pub use stages::{evaluate_clip, mean_metrics, restore_clip, stage_loss, ClipMetrics, PriorSource, StepLog, Trainer};
