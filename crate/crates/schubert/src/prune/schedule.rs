use serde::{Deserialize, Serialize};

use crate::autograd::{AdamParams, Real};
use crate::cost::{
    compute_betas_with, count_params, objective_count, CountFlags, Objective,
    DEFAULT_FLOPS_SEQ_LEN,
};
use crate::data::TrainingExample;
use crate::error::{Error, Result};
use crate::model::{ArchConfig, ModelWeights};
use crate::prune::attach::{attach_prune_params, prox_step, subgradient_step};
use crate::prune::extract::fold_and_extract;
use crate::prune::state::{PruneSite, PruneState};
use crate::prune::truncate::select_truncation;
use crate::train::{evaluate_mlm, train, BatchCycler, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Penalty {
    L1,
    Prox,
}

impl std::fmt::Display for Penalty {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Penalty::L1 => write!(f, "l1"),
            Penalty::Prox => write!(f, "prox"),
        }
    }
}

fn default_flops_seq_len() -> usize {
    DEFAULT_FLOPS_SEQ_LEN
}

fn default_batch_size() -> usize {
    8
}

fn default_alpha_lr() -> Real {
    1e-2
}

/// Knobs for the regularize–truncate–extract–fine-tune loop.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneConfig {
    /// Regularization coefficient γ on the weighted L1 penalty.
    pub gamma: Real,
    /// Target fraction η of the objective to remove over all rounds.
    pub target_fraction: f64,
    /// Number of rounds T; each removes ~η/T of the original objective.
    pub rounds: usize,
    pub objective: Objective,
    pub penalty: Penalty,
    pub regularize_steps: usize,
    pub finetune_steps: usize,
    #[serde(default = "default_alpha_lr")]
    pub alpha_lr: Real,
    pub seed: u64,
    #[serde(default = "default_flops_seq_len")]
    pub flops_seq_len: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Optimizer for the fine-tuning phases.
    #[serde(default)]
    pub adam: AdamParams,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            gamma: 0.01,
            target_fraction: 0.3,
            rounds: 3,
            objective: Objective::Params,
            penalty: Penalty::L1,
            regularize_steps: 30,
            finetune_steps: 100,
            alpha_lr: default_alpha_lr(),
            seed: 0,
            flops_seq_len: default_flops_seq_len(),
            batch_size: default_batch_size(),
            adam: AdamParams::default(),
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.target_fraction) {
            return Err(Error::InvalidConfig(
                "target_fraction must lie in [0, 1)".into(),
            ));
        }
        if self.rounds < 1 {
            return Err(Error::InvalidConfig("rounds must be >= 1".into()));
        }
        if self.gamma < 0.0 {
            return Err(Error::InvalidConfig("gamma must be >= 0".into()));
        }
        Ok(())
    }
}

/// What one round did: which entries were zeroed, the exact parameter counts
/// around it, and evaluation losses before and after fine-tuning.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneRoundRecord {
    pub round: usize,
    pub removed: Vec<PruneSite>,
    pub params_before: u64,
    pub params_after: u64,
    pub mlm_loss_pre_finetune: Real,
    pub mlm_loss_post_finetune: Real,
    pub config_after: ArchConfig,
}

pub(crate) fn derive_seed(base: u64, stream: u64, salt: u64) -> u64 {
    // splitmix64 over the combined inputs
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(salt.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const EVAL_CAP: usize = 64;

/// The full pruning loop, starting from pre-trained weights. Each round
/// initializes fresh all-one prune vectors, optimizes the regularized
/// objective for `regularize_steps` with the base weights frozen, zeroes the
/// smallest entries until the round's share of the reduction target is met,
/// folds and extracts the compact model, and fine-tunes it.
///
/// Round r aims at the absolute milestone (1 − η·r/T)·original, so overshoot
/// never compounds: the final objective sits within one prunable unit below
/// (1 − η)·original.
pub fn run_schedule(
    weights: ModelWeights,
    config: ArchConfig,
    prune: &PruneConfig,
    train_examples: &[TrainingExample],
    eval_examples: &[TrainingExample],
) -> Result<(ModelWeights, ArchConfig, Vec<PruneRoundRecord>)> {
    prune.validate()?;
    config.validate()?;
    let flags = CountFlags::all();
    let original = objective_count(&config, prune.objective, flags, prune.flops_seq_len);

    let mut cur_weights = weights;
    let mut cur_config = config;
    let mut records = Vec::with_capacity(prune.rounds);

    for round in 1..=prune.rounds {
        let cost = compute_betas_with(&cur_config, prune.objective, flags, prune.flops_seq_len);
        let mut state = PruneState::new(&cur_config, cost);
        let model = attach_prune_params(&cur_weights, &cur_config, &state)?;

        let mut cycler = BatchCycler::new(
            train_examples,
            prune.batch_size,
            derive_seed(prune.seed, round as u64, 1),
        )?;
        for _ in 0..prune.regularize_steps {
            let batch = cycler.next_batch();
            match prune.penalty {
                Penalty::L1 => {
                    let (_, grads) =
                        model.regularized_loss_and_grads(&state, &batch, Some(prune.gamma))?;
                    subgradient_step(&mut state, &grads, prune.alpha_lr);
                }
                Penalty::Prox => {
                    let (_, grads) = model.regularized_loss_and_grads(&state, &batch, None)?;
                    prox_step(&mut state, &grads, prune.gamma, prune.alpha_lr);
                }
            }
        }

        let milestone = (original as f64
            * (1.0 - prune.target_fraction * round as f64 / prune.rounds as f64))
            .round() as u64;
        let current = objective_count(&cur_config, prune.objective, flags, prune.flops_seq_len);
        let reduction_target = current.saturating_sub(milestone);
        let removed = select_truncation(
            &state,
            &cur_config,
            prune.objective,
            reduction_target,
            prune.flops_seq_len,
        )?;
        for site in &removed {
            state.mask_site(*site);
        }

        let params_before = count_params(&cur_config, flags).total_params;
        let (mut new_weights, new_config) = fold_and_extract(&cur_weights, &cur_config, &state)?;
        let params_after = count_params(&new_config, flags).total_params;

        let pre = evaluate_mlm(&new_weights, &new_config, eval_examples, EVAL_CAP)?;
        let finetune = TrainConfig {
            steps: prune.finetune_steps,
            batch_size: prune.batch_size,
            adam: prune.adam,
            dropout: 0.0,
            seed: derive_seed(prune.seed, round as u64, 2),
        };
        train(&mut new_weights, &new_config, train_examples, &finetune)?;
        let post = evaluate_mlm(&new_weights, &new_config, eval_examples, EVAL_CAP)?;

        records.push(PruneRoundRecord {
            round,
            removed,
            params_before,
            params_after,
            mlm_loss_pre_finetune: pre.mlm,
            mlm_loss_post_finetune: post.mlm,
            config_after: new_config.clone(),
        });
        cur_weights = new_weights;
        cur_config = new_config;
    }

    Ok((cur_weights, cur_config, records))
}
