//! OHEM loss, AdamW, the warmup/poly schedule, and the training loop.

mod ohem;
mod optim;
mod schedule;
mod trainer;

pub use ohem::{ohem_ce, ohem_select, pixel_ce, total_loss, LossParts, OhemConfig, OhemSelection};
pub use optim::AdamW;
pub use schedule::Schedule;
pub use trainer::{format_sig6, train, train_epochs, train_miou, EpochMetrics, TrainReport, TrainSettings};
