//! Exact parameter and FLOPs accounting over an [`ArchConfig`], plus the
//! per-dimension cost weights used by the sparsity penalty.
//!
//! All parameter math is integer and closed-form; FLOPs are counted as
//! multiply-accumulates in the matmul-style products of one forward pass
//! (embeddings, softmax, layer-norm and activation costs excluded), which is
//! exactly what the tape's multiply instrumentation reports.

use serde::{Deserialize, Serialize};

use crate::autograd::Real;
use crate::error::{Error, Result};
use crate::model::ArchConfig;

/// Sequence length at which FLOPs-objective pruning evaluates savings.
pub const DEFAULT_FLOPS_SEQ_LEN: usize = 128;

/// Which parameter groups the count includes. Everything is on by default;
/// `weights_only` keeps just the matrices of the encoder and the token
/// embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountFlags {
    pub biases: bool,
    pub layer_norms: bool,
    /// pooler, NSP classifier and MLM output bias
    pub heads: bool,
    /// position and segment embedding tables
    pub position_segment: bool,
}

impl CountFlags {
    pub fn all() -> Self {
        CountFlags {
            biases: true,
            layer_norms: true,
            heads: true,
            position_segment: true,
        }
    }

    pub fn weights_only() -> Self {
        CountFlags {
            biases: false,
            layer_norms: false,
            heads: false,
            position_segment: false,
        }
    }
}

impl Default for CountFlags {
    fn default() -> Self {
        CountFlags::all()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub attention: u64,
    pub feed_forward: u64,
}

/// Parameter counts split the way the architecture splits: embeddings, one
/// attention/feed-forward pair per layer, and the task heads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub embedding_params: u64,
    pub layer_params: Vec<LayerCost>,
    pub head_params: u64,
    pub total_params: u64,
}

/// Exact integer parameter count.
pub fn count_params(config: &ArchConfig, flags: CountFlags) -> CostBreakdown {
    let h = config.hidden_size as u64;
    let vocab = config.vocab_size as u64;

    let mut embedding = vocab * h;
    if flags.position_segment {
        embedding += (config.max_positions as u64 + config.segment_types as u64) * h;
    }
    if flags.layer_norms {
        embedding += 2 * h;
    }

    let mut layer_params = Vec::with_capacity(config.layers);
    for i in 0..config.layers {
        let a = config.heads[i] as u64;
        let k = config.key_size[i] as u64;
        let v = config.value_size[i] as u64;
        let f = config.ff_size[i] as u64;

        let mut attention = 2 * a * h * (k + v); // K, Q, V, P
        if flags.biases {
            attention += 2 * a * k + a * v + h;
        }
        if flags.layer_norms {
            attention += 2 * h;
        }

        let mut feed_forward = 2 * f * h; // D, G
        if flags.biases {
            feed_forward += f + h;
        }
        if flags.layer_norms {
            feed_forward += 2 * h;
        }
        layer_params.push(LayerCost {
            attention,
            feed_forward,
        });
    }

    let mut head_params = 0;
    if flags.heads {
        head_params += h * h + 2 * h; // pooler + NSP weights
        if flags.biases {
            head_params += h + 2 + vocab; // pooler bias, NSP bias, MLM bias
        }
    }

    let total_params = embedding
        + layer_params
            .iter()
            .map(|l| l.attention + l.feed_forward)
            .sum::<u64>()
        + head_params;
    CostBreakdown {
        embedding_params: embedding,
        layer_params,
        head_params,
        total_params,
    }
}

/// Multiply-accumulate count of one encoder forward pass at `seq_len`:
/// per layer, seq·h·aᵢ·(2kᵢ+vᵢ) for the key/query/value projections,
/// seq²·aᵢ·(kᵢ+vᵢ) for attention scores and context, seq·h·aᵢ·vᵢ for the
/// output projection, and 2·seq·h·fᵢ for the feed-forward pair.
pub fn count_flops(config: &ArchConfig, seq_len: usize) -> u64 {
    let seq = seq_len as u64;
    let h = config.hidden_size as u64;
    (0..config.layers)
        .map(|i| {
            let a = config.heads[i] as u64;
            let k = config.key_size[i] as u64;
            let v = config.value_size[i] as u64;
            let f = config.ff_size[i] as u64;
            seq * h * a * (2 * k + v) + seq * seq * a * (k + v) + seq * h * a * v + 2 * seq * h * f
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Params,
    Flops,
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Objective::Params => write!(f, "params"),
            Objective::Flops => write!(f, "flops"),
        }
    }
}

/// One prunable design dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "dim", rename_all = "lowercase")]
pub enum Dimension {
    Hidden,
    Heads { layer: usize },
    KeySize { layer: usize },
    ValueSize { layer: usize },
    FfSize { layer: usize },
}

impl Dimension {
    pub fn layer(&self) -> Option<usize> {
        match *self {
            Dimension::Hidden => None,
            Dimension::Heads { layer }
            | Dimension::KeySize { layer }
            | Dimension::ValueSize { layer }
            | Dimension::FfSize { layer } => Some(layer),
        }
    }

    fn current(&self, config: &ArchConfig) -> usize {
        match *self {
            Dimension::Hidden => config.hidden_size,
            Dimension::Heads { layer } => config.heads[layer],
            Dimension::KeySize { layer } => config.key_size[layer],
            Dimension::ValueSize { layer } => config.value_size[layer],
            Dimension::FfSize { layer } => config.ff_size[layer],
        }
    }

    /// Config with this dimension one smaller; the result may violate the
    /// size-one lower bound and is only meant for cost arithmetic.
    pub(crate) fn reduced(&self, config: &ArchConfig) -> ArchConfig {
        let mut c = config.clone();
        match *self {
            Dimension::Hidden => c.hidden_size -= 1,
            Dimension::Heads { layer } => c.heads[layer] -= 1,
            Dimension::KeySize { layer } => c.key_size[layer] -= 1,
            Dimension::ValueSize { layer } => c.value_size[layer] -= 1,
            Dimension::FfSize { layer } => c.ff_size[layer] -= 1,
        }
        c
    }
}

pub fn objective_count(
    config: &ArchConfig,
    objective: Objective,
    flags: CountFlags,
    flops_seq_len: usize,
) -> u64 {
    match objective {
        Objective::Params => count_params(config, flags).total_params,
        Objective::Flops => count_flops(config, flops_seq_len),
    }
}

/// Objective units freed by removing one unit of `dim`, with no lower-bound
/// check. Exact count difference, so interactions with every other current
/// dimension are respected.
pub(crate) fn unit_savings(
    config: &ArchConfig,
    dim: Dimension,
    objective: Objective,
    flags: CountFlags,
    flops_seq_len: usize,
) -> u64 {
    let before = objective_count(config, objective, flags, flops_seq_len);
    let after = objective_count(&dim.reduced(config), objective, flags, flops_seq_len);
    before - after
}

/// Objective units freed by shrinking `dim` by one. Errors when the dimension
/// already sits at the lower bound of one.
pub fn marginal_savings(
    config: &ArchConfig,
    dim: Dimension,
    objective: Objective,
    flags: CountFlags,
    flops_seq_len: usize,
) -> Result<u64> {
    if let Some(layer) = dim.layer() {
        if layer >= config.layers {
            return Err(Error::IndexOutOfRange {
                op: "marginal_savings",
                index: layer,
                extent: config.layers,
            });
        }
    }
    if dim.current(config) < 2 {
        return Err(Error::Contract(format!(
            "{dim:?} is at the lower bound of one and cannot shrink"
        )));
    }
    Ok(unit_savings(config, dim, objective, flags, flops_seq_len))
}

/// Per-dimension cost weights: objective units freed per zeroed prune entry,
/// normalized so the largest equals one.
#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    pub beta_hidden: Real,
    pub beta_heads: Vec<Real>,
    pub beta_key: Vec<Real>,
    pub beta_value: Vec<Real>,
    pub beta_ff: Vec<Real>,
    /// Largest raw per-unit cost, the normalization reference.
    pub reference: u64,
}

impl CostWeights {
    pub fn for_dimension(&self, dim: Dimension) -> Real {
        match dim {
            Dimension::Hidden => self.beta_hidden,
            Dimension::Heads { layer } => self.beta_heads[layer],
            Dimension::KeySize { layer } => self.beta_key[layer],
            Dimension::ValueSize { layer } => self.beta_value[layer],
            Dimension::FfSize { layer } => self.beta_ff[layer],
        }
    }
}

pub fn compute_betas_with(
    config: &ArchConfig,
    objective: Objective,
    flags: CountFlags,
    flops_seq_len: usize,
) -> CostWeights {
    let unit = |dim: Dimension| unit_savings(config, dim, objective, flags, flops_seq_len);
    let hidden = unit(Dimension::Hidden);
    let heads: Vec<u64> = (0..config.layers)
        .map(|layer| unit(Dimension::Heads { layer }))
        .collect();
    let keys: Vec<u64> = (0..config.layers)
        .map(|layer| unit(Dimension::KeySize { layer }))
        .collect();
    let values: Vec<u64> = (0..config.layers)
        .map(|layer| unit(Dimension::ValueSize { layer }))
        .collect();
    let ffs: Vec<u64> = (0..config.layers)
        .map(|layer| unit(Dimension::FfSize { layer }))
        .collect();

    let reference = heads
        .iter()
        .chain(&keys)
        .chain(&values)
        .chain(&ffs)
        .copied()
        .chain(std::iter::once(hidden))
        .max()
        .unwrap_or(1)
        .max(1);
    let norm = |raw: u64| raw as Real / reference as Real;
    CostWeights {
        beta_hidden: norm(hidden),
        beta_heads: heads.into_iter().map(norm).collect(),
        beta_key: keys.into_iter().map(norm).collect(),
        beta_value: values.into_iter().map(norm).collect(),
        beta_ff: ffs.into_iter().map(norm).collect(),
        reference,
    }
}

/// Cost weights under the default all-inclusive parameter accounting. The
/// hidden weight covers every layer plus the embedding rows, since the hidden
/// prune vector is global.
pub fn compute_betas(config: &ArchConfig, objective: Objective) -> CostWeights {
    compute_betas_with(config, objective, CountFlags::all(), DEFAULT_FLOPS_SEQ_LEN)
}
