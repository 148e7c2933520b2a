//! Desk-scale structured pruning for BERT-style encoders.
//!
//! The crate generalizes the classic encoder so every layer carries its own
//! design dimensions (head count, key/query size, value size, feed-forward
//! size), prices each dimension with an exact parameter/FLOPs cost model, and
//! shrinks a trained model with a regularize–truncate–extract–fine-tune loop:
//! learnable prune scalars are multiplied onto every tensor slice that
//! carries a dimension unit, driven toward zero by a cost-weighted L1
//! penalty, and the slices whose scalars get zeroed are deleted to yield a
//! strictly smaller dense model.
//!
//! Start with the runnable examples (`cargo run --release --example <name>`):
//!
//! - `grad_check` — finite-difference validation of the autograd core
//! - `count_architectures` — parameter counts and cost weights for classic
//!   configurations
//! - `pretrain_tiny` — minutes-scale MLM + NSP pre-training on synthetic text
//! - `mask_vs_extract` — zeroed prune scalars versus physically removed
//!   slices, compared bit for bit
//! - `prune_schedule` — the full pruning loop end to end
//! - `depth_sweep` — loss versus depth at a fixed parameter budget
//!
//! The same workflows are scriptable through the `schubert` binary; see the
//! README for the file formats involved.

pub mod autograd;
pub mod commands;
pub mod cost;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod manifest;
pub mod model;
pub mod prune;
pub mod report;
pub mod train;

pub use autograd::{adam_step, AdamParams, AdamState, Gradients, Real, Tape, Tensor, TensorRef};
pub use cost::{
    compute_betas, compute_betas_with, count_flops, count_params, marginal_savings, CostBreakdown,
    CostWeights, CountFlags, Dimension, Objective, DEFAULT_FLOPS_SEQ_LEN,
};
pub use data::{
    batch_iterator, generate_synthetic_corpus, make_examples, split_examples, Batch,
    MaskingParams, TrainingExample, Vocab,
};
pub use error::{Error, Result};
pub use model::{
    encoder_layer_forward, encoder_multiply_count, init_model, load_checkpoint, mlm_nsp_loss,
    mlm_nsp_loss_with_grads, model_forward, model_logits, save_checkpoint, ArchConfig,
    LayerWeights, LossValues, ModelWeights,
};
pub use prune::{
    attach_prune_params, fold_and_extract, prox_step, run_schedule, select_truncation,
    subgradient_step, AlphaGrads, Penalty, PrunableModel, PruneConfig, PruneRoundRecord,
    PruneSite, PruneState,
};
pub use report::ReportTable;
pub use train::{evaluate_mlm, train, StepLoss, TrainConfig};
