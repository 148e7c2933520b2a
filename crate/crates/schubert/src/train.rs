//! Seeded Adam training loop over the MLM + NSP objective.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{adam_step, AdamParams, AdamState, Real};
use crate::data::{Batch, TrainingExample};
use crate::error::{Error, Result};
use crate::model::{mlm_nsp_loss, mlm_nsp_loss_with_grads, ArchConfig, LossValues, ModelWeights};

fn default_batch_size() -> usize {
    8
}

/// Optimizer hyperparameters and step budget for one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub adam: AdamParams,
    /// Single global dropout rate; 0 disables dropout entirely.
    #[serde(default)]
    pub dropout: Real,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(steps: usize, seed: u64) -> Self {
        TrainConfig {
            steps,
            batch_size: default_batch_size(),
            adam: AdamParams::default(),
            dropout: 0.0,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub mlm: Real,
    pub nsp: Real,
    pub total: Real,
}

/// Endless deterministic stream of padded batches: reshuffles the example
/// order at every epoch boundary from its own seeded generator.
pub(crate) struct BatchCycler<'a> {
    examples: &'a [TrainingExample],
    batch_size: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl<'a> BatchCycler<'a> {
    pub fn new(examples: &'a [TrainingExample], batch_size: usize, seed: u64) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Contract("no training examples".into()));
        }
        if batch_size < 1 {
            return Err(Error::Contract("batch_size must be >= 1".into()));
        }
        let mut cycler = BatchCycler {
            examples,
            batch_size,
            order: (0..examples.len()).collect(),
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        cycler.order.shuffle(&mut cycler.rng);
        Ok(cycler)
    }

    pub fn next_batch(&mut self) -> Batch {
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let selected: Vec<TrainingExample> = self.order[self.cursor..end]
            .iter()
            .map(|&i| self.examples[i].clone())
            .collect();
        self.cursor = end;
        Batch::from_examples(&selected)
    }
}

/// Train in place for `config.steps` Adam steps. Returns one loss row per
/// step. Deterministic per seed: batch order, dropout draws and updates all
/// stem from the single seed.
pub fn train(
    weights: &mut ModelWeights,
    arch: &ArchConfig,
    examples: &[TrainingExample],
    config: &TrainConfig,
) -> Result<Vec<StepLoss>> {
    let mut cycler = BatchCycler::new(examples, config.batch_size, config.seed)?;
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9E37_79B9));
    let mut states: HashMap<String, AdamState> = HashMap::new();
    let mut curve = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let batch = cycler.next_batch();
        weights.zero_grads();
        let dropout = (config.dropout > 0.0).then_some((config.dropout, &mut dropout_rng));
        let losses = mlm_nsp_loss_with_grads(weights, arch, &batch, dropout)
            .map_err(|source| Error::Numeric {
                step,
                source: Box::new(source),
            })?;
        for (name, tensor) in weights.named_tensors_mut() {
            let state = states
                .entry(name)
                .or_insert_with(|| AdamState::new(tensor.numel()));
            let (data, grad) = tensor.data_and_grad();
            if let Some(grad) = grad {
                adam_step(data, grad, state, &config.adam);
            }
        }
        curve.push(StepLoss {
            step,
            mlm: losses.mlm,
            nsp: losses.nsp,
            total: losses.total,
        });
    }
    Ok(curve)
}

pub(crate) const EVAL_BATCH: usize = 32;

/// Deterministic evaluation over up to `cap` examples, batched and aggregated
/// by masked-token and example counts.
pub fn evaluate_mlm(
    weights: &ModelWeights,
    arch: &ArchConfig,
    examples: &[TrainingExample],
    cap: usize,
) -> Result<LossValues> {
    let take = examples.len().min(cap.max(1));
    if take == 0 {
        return Err(Error::Contract("no evaluation examples".into()));
    }
    let mut mlm_weighted = 0.0;
    let mut nsp_weighted = 0.0;
    let mut masked_total = 0usize;
    let mut item_total = 0usize;
    for chunk in examples[..take].chunks(EVAL_BATCH) {
        let batch = Batch::from_examples(chunk);
        let losses = mlm_nsp_loss(weights, arch, &batch)?;
        mlm_weighted += losses.mlm * losses.masked_tokens as Real;
        nsp_weighted += losses.nsp * chunk.len() as Real;
        masked_total += losses.masked_tokens;
        item_total += chunk.len();
    }
    let mlm = if masked_total > 0 {
        mlm_weighted / masked_total as Real
    } else {
        0.0
    };
    let nsp = nsp_weighted / item_total as Real;
    Ok(LossValues {
        total: mlm + nsp,
        mlm,
        nsp,
        masked_tokens: masked_total,
    })
}
