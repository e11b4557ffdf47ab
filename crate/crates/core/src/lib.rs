//! Continual-learning engine for drifting speaker populations.
//!
//! The crate trains a small per-frame token classifier over a stream of
//! utterance batches whose speaker population changes over time, and
//! compares three ways of protecting what was learned earlier: plain
//! fine-tuning, elastic weight consolidation (EWC) and synaptic
//! intelligence (SI). After each batch a snapshot store decides which
//! model continues (latest, best of the last three, or best so far), and
//! models are scored by word error rate with bootstrap confidence intervals.
//!
//! Modules, bottom-up:
//!
//! * [`nncore`]: the network, its exact gradients and plain SGD.
//! * [`regularizers`]: Fisher estimation, EWC and SI states, combined loss.
//! * [`stream`]: speaker-retention schedule and synthetic corpus generation.
//! * [`eval`]: edit-distance alignment, corpus WER, bootstrap intervals.
//! * [`selection`]: snapshot persistence and the NS / RW3 / BoA strategies.
//! * [`harness`]: per-batch training, full runs, grids and reports.

pub mod error;
pub mod eval;
pub mod harness;
pub mod nncore;
pub mod regularizers;
pub mod seed;
pub mod selection;
pub mod stream;

pub use error::{Error, ErrorClass, Result};
pub use nncore::{Activation, FrameBatch, Layout, Matrix, MlpConfig, Network, ParamVector};
pub use regularizers::{
    estimate_fisher_diag, regularized_loss_and_grad, EwcState, FisherConfig, FisherMode, Method,
    RegState, RegularizedLoss, SiState,
};
pub use stream::{build_stream, CorpusStream, GenConfig, ScheduleSpec, SpeakerId, Utterance};
pub use selection::{SnapshotRecord, SnapshotStore, Strategy};
pub use harness::{run_grid, run_sequence, train_one_batch, BatchResult, GridResult, RunConfig, RunKey, RunResult};
