use serde::{Deserialize, Serialize};

use crate::autograd::Real;
use crate::cost::{CostWeights, Dimension};
use crate::error::{Error, Result};
use crate::model::ArchConfig;

/// One prune vector: learnable scalars with a zero mask. Masked entries hold
/// exactly 0 and stay there through every subsequent update.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaVector {
    values: Vec<Real>,
    masked: Vec<bool>,
}

impl AlphaVector {
    fn ones(n: usize) -> Self {
        AlphaVector {
            values: vec![1.0; n],
            masked: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[Real] {
        &self.values
    }

    pub fn masked(&self) -> &[bool] {
        &self.masked
    }

    pub fn survivors(&self) -> usize {
        self.masked.iter().filter(|&&m| !m).count()
    }

    pub fn survivor_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.masked[i]).collect()
    }

    pub fn mask_entry(&mut self, index: usize) {
        self.masked[index] = true;
        self.values[index] = 0.0;
    }

    /// Gradient-style update that leaves masked entries pinned at zero.
    pub fn update<F: FnMut(usize, Real) -> Real>(&mut self, mut f: F) {
        for i in 0..self.values.len() {
            if self.masked[i] {
                self.values[i] = 0.0;
            } else {
                self.values[i] = f(i, self.values[i]);
            }
        }
    }
}

/// One entry of one prune vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PruneSite {
    Hidden { unit: usize },
    Head { layer: usize, unit: usize },
    Key { layer: usize, unit: usize },
    Value { layer: usize, unit: usize },
    Ff { layer: usize, unit: usize },
}

impl PruneSite {
    pub fn dimension(&self) -> Dimension {
        match *self {
            PruneSite::Hidden { .. } => Dimension::Hidden,
            PruneSite::Head { layer, .. } => Dimension::Heads { layer },
            PruneSite::Key { layer, .. } => Dimension::KeySize { layer },
            PruneSite::Value { layer, .. } => Dimension::ValueSize { layer },
            PruneSite::Ff { layer, .. } => Dimension::FfSize { layer },
        }
    }
}

/// The prune vectors of one attachment round: a single global hidden vector
/// plus per-layer head, key, value and feed-forward vectors, with their cost
/// weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneState {
    pub hidden: AlphaVector,
    pub heads: Vec<AlphaVector>,
    pub keys: Vec<AlphaVector>,
    pub values: Vec<AlphaVector>,
    pub ffs: Vec<AlphaVector>,
    pub cost: CostWeights,
}

impl PruneState {
    /// Fresh state: every prune parameter starts at one, nothing masked.
    pub fn new(config: &ArchConfig, cost: CostWeights) -> PruneState {
        PruneState {
            hidden: AlphaVector::ones(config.hidden_size),
            heads: config.heads.iter().map(|&n| AlphaVector::ones(n)).collect(),
            keys: config
                .key_size
                .iter()
                .map(|&n| AlphaVector::ones(n))
                .collect(),
            values: config
                .value_size
                .iter()
                .map(|&n| AlphaVector::ones(n))
                .collect(),
            ffs: config
                .ff_size
                .iter()
                .map(|&n| AlphaVector::ones(n))
                .collect(),
            cost,
        }
    }

    pub fn matches_config(&self, config: &ArchConfig) -> Result<()> {
        let ok = self.hidden.len() == config.hidden_size
            && self.heads.len() == config.layers
            && self.keys.len() == config.layers
            && self.values.len() == config.layers
            && self.ffs.len() == config.layers
            && (0..config.layers).all(|i| {
                self.heads[i].len() == config.heads[i]
                    && self.keys[i].len() == config.key_size[i]
                    && self.values[i].len() == config.value_size[i]
                    && self.ffs[i].len() == config.ff_size[i]
            });
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                op: "attach_prune_params",
                lhs: vec![self.hidden.len(), self.heads.len()],
                rhs: vec![config.hidden_size, config.layers],
            })
        }
    }

    pub fn mask_site(&mut self, site: PruneSite) {
        match site {
            PruneSite::Hidden { unit } => self.hidden.mask_entry(unit),
            PruneSite::Head { layer, unit } => self.heads[layer].mask_entry(unit),
            PruneSite::Key { layer, unit } => self.keys[layer].mask_entry(unit),
            PruneSite::Value { layer, unit } => self.values[layer].mask_entry(unit),
            PruneSite::Ff { layer, unit } => self.ffs[layer].mask_entry(unit),
        }
    }

    pub fn site_value(&self, site: PruneSite) -> Real {
        match site {
            PruneSite::Hidden { unit } => self.hidden.values()[unit],
            PruneSite::Head { layer, unit } => self.heads[layer].values()[unit],
            PruneSite::Key { layer, unit } => self.keys[layer].values()[unit],
            PruneSite::Value { layer, unit } => self.values[layer].values()[unit],
            PruneSite::Ff { layer, unit } => self.ffs[layer].values()[unit],
        }
    }

    /// Hidden-unit activity mask for the masked layer-norm statistics, or
    /// None while nothing is masked.
    pub fn hidden_active(&self) -> Option<Vec<bool>> {
        if self.hidden.masked().iter().any(|&m| m) {
            Some(self.hidden.masked().iter().map(|&m| !m).collect())
        } else {
            None
        }
    }

    /// Every site in canonical enumeration order (hidden first, then per
    /// layer: heads, keys, values, feed-forward units).
    pub fn all_sites(&self) -> Vec<PruneSite> {
        let mut out = Vec::new();
        for unit in 0..self.hidden.len() {
            out.push(PruneSite::Hidden { unit });
        }
        for layer in 0..self.heads.len() {
            for unit in 0..self.heads[layer].len() {
                out.push(PruneSite::Head { layer, unit });
            }
            for unit in 0..self.keys[layer].len() {
                out.push(PruneSite::Key { layer, unit });
            }
            for unit in 0..self.values[layer].len() {
                out.push(PruneSite::Value { layer, unit });
            }
            for unit in 0..self.ffs[layer].len() {
                out.push(PruneSite::Ff { layer, unit });
            }
        }
        out
    }

    pub fn is_masked(&self, site: PruneSite) -> bool {
        match site {
            PruneSite::Hidden { unit } => self.hidden.masked()[unit],
            PruneSite::Head { layer, unit } => self.heads[layer].masked()[unit],
            PruneSite::Key { layer, unit } => self.keys[layer].masked()[unit],
            PruneSite::Value { layer, unit } => self.values[layer].masked()[unit],
            PruneSite::Ff { layer, unit } => self.ffs[layer].masked()[unit],
        }
    }
}
