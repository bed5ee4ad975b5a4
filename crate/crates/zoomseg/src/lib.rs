//! File formats, reports and the command line around `zoomseg-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod manifest;
pub mod nifti;
pub mod report;

/// Files written by `zoomseg train` into its output directory.
pub const CKPT_FINAL: &str = "final.lfck";
pub const CKPT_PRE_FINETUNE: &str = "pre_finetune.lfck";
pub const CKPT_BEST_DEV: &str = "best_dev.lfck";
pub const HISTORY_FILE: &str = "history.json";
