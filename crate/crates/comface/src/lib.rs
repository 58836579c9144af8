//! Run orchestration for comface: dataset generation on disk, pretraining runs
//! with checkpoints and logs, transfer evaluation reports, ablations, scale
//! sweeps, saliency overlays and the command line.

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod experiments;
pub mod io;
pub mod pretrain;
pub mod run;
pub mod saliency;
pub mod transfer;

pub use error::{Error, Result};
