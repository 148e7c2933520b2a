//! The pruning engine: α prune vectors attached to every dimension-carrying
//! tensor, the weighted-L1 regularized objective, magnitude truncation,
//! fold-and-extract compaction, and the full round schedule.

mod attach;
mod extract;
mod schedule;
mod state;
mod truncate;

pub use attach::{
    attach_prune_params, prox_step, subgradient_step, AlphaGrads, PrunableModel, RegularizedLoss,
};
pub use extract::fold_and_extract;
pub use schedule::{run_schedule, Penalty, PruneConfig, PruneRoundRecord};
pub use state::{AlphaVector, PruneSite, PruneState};
pub use truncate::select_truncation;

pub(crate) use schedule::derive_seed;
