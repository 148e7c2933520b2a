use crate::autograd::{Gradients, Real, Tape, Tensor, TensorRef};
use crate::data::{Batch, PaddedExample};
use crate::error::{Error, Result};
use crate::model::{ArchConfig, LossValues, ModelWeights};
use crate::model::{mlm_nsp_graph, model_graph_with_pooler, LayerRefs, ModelRefs};
use crate::prune::state::{AlphaVector, PruneState};

/// Tape handles for the α vectors of one attachment.
pub(crate) struct AlphaRefs {
    pub hidden: TensorRef,
    pub heads: Vec<TensorRef>,
    pub keys: Vec<TensorRef>,
    pub values: Vec<TensorRef>,
    pub ffs: Vec<TensorRef>,
}

/// Gradients with respect to every α entry; masked entries are pinned to 0.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaGrads {
    pub hidden: Vec<Real>,
    pub heads: Vec<Vec<Real>>,
    pub keys: Vec<Vec<Real>>,
    pub values: Vec<Vec<Real>>,
    pub ffs: Vec<Vec<Real>>,
}

/// Data and penalty parts of the regularized objective value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularizedLoss {
    pub data: LossValues,
    pub penalty: Real,
    pub total: Real,
}

/// A model with prune parameters multiplied onto every tensor that carries a
/// design dimension. The base weights are frozen; only the α vectors are
/// differentiable here.
pub struct PrunableModel<'a> {
    weights: &'a ModelWeights,
    config: &'a ArchConfig,
}

/// Validate α lengths against the architecture and wrap the weights for
/// prunable forward passes.
pub fn attach_prune_params<'a>(
    weights: &'a ModelWeights,
    config: &'a ArchConfig,
    state: &PruneState,
) -> Result<PrunableModel<'a>> {
    state.matches_config(config)?;
    Ok(PrunableModel { weights, config })
}

fn alpha_leaf(tape: &mut Tape, alpha: &AlphaVector, trainable: bool) -> Result<TensorRef> {
    let t = Tensor::new(vec![alpha.len()], alpha.values().to_vec())?;
    if trainable {
        tape.param(&t)
    } else {
        tape.input(&t)
    }
}

impl<'a> PrunableModel<'a> {
    pub fn config(&self) -> &ArchConfig {
        self.config
    }

    /// Register frozen weights and α leaves, and build the α-scaled tensor
    /// handles: K̃ᵢ, Q̃ᵢ scaled along (kᵢ, aᵢ, h), Ṽᵢ along (vᵢ, aᵢ, h), P̃ᵢ
    /// along (h, vᵢ, aᵢ), D̃ᵢ along (fᵢ, h), G̃ᵢ along (h, fᵢ). Biases and
    /// layer-norm parameters scale by the α of the dimensions they carry, and
    /// the embedding tables scale along h so the hidden dimension is pruned
    /// consistently end to end.
    fn scaled_refs(
        &self,
        tape: &mut Tape,
        state: &PruneState,
        alpha_trainable: bool,
    ) -> Result<(ModelRefs, AlphaRefs)> {
        let w = self.weights;
        let base = ModelRefs::register(tape, w, false)?;

        let a_hidden = alpha_leaf(tape, &state.hidden, alpha_trainable)?;
        let mut a_heads = Vec::with_capacity(state.heads.len());
        let mut a_keys = Vec::with_capacity(state.keys.len());
        let mut a_values = Vec::with_capacity(state.values.len());
        let mut a_ffs = Vec::with_capacity(state.ffs.len());
        for i in 0..self.config.layers {
            a_heads.push(alpha_leaf(tape, &state.heads[i], alpha_trainable)?);
            a_keys.push(alpha_leaf(tape, &state.keys[i], alpha_trainable)?);
            a_values.push(alpha_leaf(tape, &state.values[i], alpha_trainable)?);
            a_ffs.push(alpha_leaf(tape, &state.ffs[i], alpha_trainable)?);
        }

        let scale_h = |tape: &mut Tape, x: TensorRef, axis: usize| tape.mul_axis(x, a_hidden, axis);

        let embedding = scale_h(tape, base.embedding, 1)?;
        let position_embedding = scale_h(tape, base.position_embedding, 1)?;
        let segment_embedding = scale_h(tape, base.segment_embedding, 1)?;
        let embedding_ln_gain = scale_h(tape, base.embedding_ln_gain, 0)?;
        let embedding_ln_shift = scale_h(tape, base.embedding_ln_shift, 0)?;

        let mut layers = Vec::with_capacity(self.config.layers);
        for (i, l) in base.layers.iter().enumerate() {
            let (ak, aa, av, af) = (a_keys[i], a_heads[i], a_values[i], a_ffs[i]);
            let key = tape.mul_axis(l.key, ak, 0)?;
            let key = tape.mul_axis(key, aa, 1)?;
            let key = scale_h(tape, key, 2)?;
            let query = tape.mul_axis(l.query, ak, 0)?;
            let query = tape.mul_axis(query, aa, 1)?;
            let query = scale_h(tape, query, 2)?;
            let value = tape.mul_axis(l.value, av, 0)?;
            let value = tape.mul_axis(value, aa, 1)?;
            let value = scale_h(tape, value, 2)?;
            let proj = scale_h(tape, l.proj, 0)?;
            let proj = tape.mul_axis(proj, av, 1)?;
            let proj = tape.mul_axis(proj, aa, 2)?;

            let key_bias = tape.mul_axis(l.key_bias, aa, 0)?;
            let key_bias = tape.mul_axis(key_bias, ak, 1)?;
            let query_bias = tape.mul_axis(l.query_bias, aa, 0)?;
            let query_bias = tape.mul_axis(query_bias, ak, 1)?;
            let value_bias = tape.mul_axis(l.value_bias, aa, 0)?;
            let value_bias = tape.mul_axis(value_bias, av, 1)?;

            let ff_in = tape.mul_axis(l.ff_in, af, 0)?;
            let ff_in = scale_h(tape, ff_in, 1)?;
            let ff_out = scale_h(tape, l.ff_out, 0)?;
            let ff_out = tape.mul_axis(ff_out, af, 1)?;

            layers.push(LayerRefs {
                key,
                query,
                value,
                proj,
                key_bias,
                query_bias,
                value_bias,
                attn_out_bias: scale_h(tape, l.attn_out_bias, 0)?,
                attn_ln_gain: scale_h(tape, l.attn_ln_gain, 0)?,
                attn_ln_shift: scale_h(tape, l.attn_ln_shift, 0)?,
                ff_in,
                ff_in_bias: tape.mul_axis(l.ff_in_bias, af, 0)?,
                ff_out,
                ff_out_bias: scale_h(tape, l.ff_out_bias, 0)?,
                out_ln_gain: scale_h(tape, l.out_ln_gain, 0)?,
                out_ln_shift: scale_h(tape, l.out_ln_shift, 0)?,
            });
        }

        let pooler_weight = scale_h(tape, base.pooler_weight, 0)?;
        let pooler_weight = scale_h(tape, pooler_weight, 1)?;
        let refs = ModelRefs {
            embedding,
            position_embedding,
            segment_embedding,
            embedding_ln_gain,
            embedding_ln_shift,
            layers,
            pooler_weight,
            pooler_bias: scale_h(tape, base.pooler_bias, 0)?,
            nsp_weight: scale_h(tape, base.nsp_weight, 1)?,
            nsp_bias: base.nsp_bias,
            mlm_bias: base.mlm_bias,
        };
        Ok((
            refs,
            AlphaRefs {
                hidden: a_hidden,
                heads: a_heads,
                keys: a_keys,
                values: a_values,
                ffs: a_ffs,
            },
        ))
    }

    /// Pre-training loss of the α-scaled model, no gradients.
    pub fn loss(&self, state: &PruneState, batch: &Batch) -> Result<LossValues> {
        let mut tape = Tape::new();
        let (refs, _) = self.scaled_refs(&mut tape, state, false)?;
        let h_active = state.hidden_active();
        let loss = mlm_nsp_graph(
            &mut tape,
            &refs,
            self.config.layer_norm_eps,
            &batch.items,
            h_active.as_deref(),
            &mut None,
        )?;
        Ok(LossValues {
            total: tape.scalar_value(loss.total),
            mlm: tape.scalar_value(loss.mlm),
            nsp: tape.scalar_value(loss.nsp),
            masked_tokens: loss.masked_tokens,
        })
    }

    /// The full regularized objective: data loss plus
    /// γ·Σ β·‖α‖₁ over every prune vector. Masked entries contribute zero.
    pub fn regularized_loss(
        &self,
        state: &PruneState,
        batch: &Batch,
        gamma: Real,
    ) -> Result<RegularizedLoss> {
        let (loss, _) = self.regularized_loss_and_grads(state, batch, Some(gamma))?;
        Ok(loss)
    }

    /// Regularized objective and dL/dα. With `gamma = Some(γ)` the penalty is
    /// part of the differentiated objective (L1 subgradient mode, sign(0)
    /// taken as 0); with `None` only the data term is differentiated
    /// (proximal mode handles the penalty in its shrinkage step).
    pub fn regularized_loss_and_grads(
        &self,
        state: &PruneState,
        batch: &Batch,
        gamma: Option<Real>,
    ) -> Result<(RegularizedLoss, AlphaGrads)> {
        if let Some(g) = gamma {
            if g < 0.0 {
                return Err(Error::Contract("gamma must be nonnegative".into()));
            }
        }
        let mut tape = Tape::new();
        let (refs, alpha) = self.scaled_refs(&mut tape, state, true)?;
        let h_active = state.hidden_active();
        let loss = mlm_nsp_graph(
            &mut tape,
            &refs,
            self.config.layer_norm_eps,
            &batch.items,
            h_active.as_deref(),
            &mut None,
        )?;
        let data = LossValues {
            total: tape.scalar_value(loss.total),
            mlm: tape.scalar_value(loss.mlm),
            nsp: tape.scalar_value(loss.nsp),
            masked_tokens: loss.masked_tokens,
        };

        let mut objective = loss.total;
        let mut penalty = 0.0;
        if let Some(g) = gamma {
            let cost = &state.cost;
            let mut terms: Vec<(TensorRef, Real)> = vec![(alpha.hidden, cost.beta_hidden)];
            for i in 0..self.config.layers {
                terms.push((alpha.heads[i], cost.beta_heads[i]));
                terms.push((alpha.values[i], cost.beta_value[i]));
                terms.push((alpha.keys[i], cost.beta_key[i]));
                terms.push((alpha.ffs[i], cost.beta_ff[i]));
            }
            for (vec_ref, beta) in terms {
                let term = tape.weighted_l1(vec_ref, g * beta)?;
                penalty += tape.scalar_value(term);
                objective = tape.add(objective, term)?;
            }
        }
        let total = tape.scalar_value(objective);
        let grads = tape.backward(objective)?;
        let alpha_grads = extract_alpha_grads(&grads, &alpha, state);
        Ok((
            RegularizedLoss {
                data,
                penalty,
                total,
            },
            alpha_grads,
        ))
    }

    /// Decode logits at every position plus NSP logits for one example, the
    /// surface the extraction-equivalence oracle compares.
    pub fn logits(&self, state: &PruneState, item: &PaddedExample) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let (refs, _) = self.scaled_refs(&mut tape, state, false)?;
        let h_active = state.hidden_active();
        let positions: Vec<usize> = (0..item.tokens.len()).collect();
        let (seq_out, pooled) = model_graph_with_pooler(
            &mut tape,
            &refs,
            self.config.layer_norm_eps,
            &item.tokens,
            &item.segments,
            &positions,
            &item.attention_mask,
            h_active.as_deref(),
            &mut None,
        )?;
        let logits = tape.matmul_nt(seq_out, refs.embedding)?;
        let logits = tape.add_rowvec(logits, refs.mlm_bias)?;
        let nsp_logits = tape.matmul_nt(pooled, refs.nsp_weight)?;
        let nsp_logits = tape.add_rowvec(nsp_logits, refs.nsp_bias)?;
        Ok((tape.to_tensor(logits), tape.to_tensor(nsp_logits)))
    }
}

fn grad_or_zeros(grads: &Gradients, r: TensorRef, n: usize, masked: &[bool]) -> Vec<Real> {
    let mut g = grads.get(r).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
    for (gi, &m) in g.iter_mut().zip(masked) {
        if m {
            *gi = 0.0;
        }
    }
    g
}

fn extract_alpha_grads(grads: &Gradients, alpha: &AlphaRefs, state: &PruneState) -> AlphaGrads {
    AlphaGrads {
        hidden: grad_or_zeros(grads, alpha.hidden, state.hidden.len(), state.hidden.masked()),
        heads: state
            .heads
            .iter()
            .zip(&alpha.heads)
            .map(|(v, &r)| grad_or_zeros(grads, r, v.len(), v.masked()))
            .collect(),
        keys: state
            .keys
            .iter()
            .zip(&alpha.keys)
            .map(|(v, &r)| grad_or_zeros(grads, r, v.len(), v.masked()))
            .collect(),
        values: state
            .values
            .iter()
            .zip(&alpha.values)
            .map(|(v, &r)| grad_or_zeros(grads, r, v.len(), v.masked()))
            .collect(),
        ffs: state
            .ffs
            .iter()
            .zip(&alpha.ffs)
            .map(|(v, &r)| grad_or_zeros(grads, r, v.len(), v.masked()))
            .collect(),
    }
}

/// Plain gradient step on the regularized objective (L1 subgradient mode).
/// Masked entries stay exactly zero.
pub fn subgradient_step(state: &mut PruneState, grads: &AlphaGrads, lr: Real) {
    state.hidden.update(|i, v| v - lr * grads.hidden[i]);
    for layer in 0..state.heads.len() {
        state.heads[layer].update(|i, v| v - lr * grads.heads[layer][i]);
        state.keys[layer].update(|i, v| v - lr * grads.keys[layer][i]);
        state.values[layer].update(|i, v| v - lr * grads.values[layer][i]);
        state.ffs[layer].update(|i, v| v - lr * grads.ffs[layer][i]);
    }
}

fn soft_threshold(x: Real, threshold: Real) -> Real {
    if x > threshold {
        x - threshold
    } else if x < -threshold {
        x + threshold
    } else {
        0.0
    }
}

/// Proximal update: gradient step on the data term, then soft-threshold each
/// entry by lr·γ·β. Entries crossing zero clamp to exactly 0.
pub fn prox_step(state: &mut PruneState, data_grads: &AlphaGrads, gamma: Real, lr: Real) {
    let cost = state.cost.clone();
    let th = |beta: Real| lr * gamma * beta;
    state
        .hidden
        .update(|i, v| soft_threshold(v - lr * data_grads.hidden[i], th(cost.beta_hidden)));
    for layer in 0..state.heads.len() {
        state.heads[layer].update(|i, v| {
            soft_threshold(v - lr * data_grads.heads[layer][i], th(cost.beta_heads[layer]))
        });
        state.keys[layer].update(|i, v| {
            soft_threshold(v - lr * data_grads.keys[layer][i], th(cost.beta_key[layer]))
        });
        state.values[layer].update(|i, v| {
            soft_threshold(v - lr * data_grads.values[layer][i], th(cost.beta_value[layer]))
        });
        state.ffs[layer].update(|i, v| {
            soft_threshold(v - lr * data_grads.ffs[layer][i], th(cost.beta_ff[layer]))
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{compute_betas, Objective};

    fn toy_state(config: &ArchConfig) -> PruneState {
        PruneState::new(config, compute_betas(config, Objective::Params))
    }

    #[test]
    fn soft_threshold_cases() {
        assert_eq!(soft_threshold(0.001, 0.01), 0.0);
        assert_eq!(soft_threshold(1.0, 0.3), 0.7);
        assert_eq!(soft_threshold(-1.0, 0.3), -0.7);
    }

    #[test]
    fn prox_step_thresholds_to_exact_zero() {
        let config = ArchConfig::uniform(1, 4, 1, 2, 2, 4, 16, 8);
        let mut state = toy_state(&config);
        // No data gradient; alpha 0.001 with threshold 0.01 lands on exact 0.
        state.hidden.update(|_, _| 0.001);
        let zero_grads = AlphaGrads {
            hidden: vec![0.0; 4],
            heads: vec![vec![0.0; 1]],
            keys: vec![vec![0.0; 2]],
            values: vec![vec![0.0; 2]],
            ffs: vec![vec![0.0; 4]],
        };
        // Pick gamma/lr so lr*gamma*beta_hidden == 0.01.
        let beta = state.cost.beta_hidden;
        prox_step(&mut state, &zero_grads, 0.01 / (0.1 * beta), 0.1);
        assert!(state.hidden.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn alpha_length_mismatch_is_rejected() {
        let config = ArchConfig::uniform(1, 4, 1, 2, 2, 4, 16, 8);
        let other = ArchConfig::uniform(1, 6, 1, 2, 2, 4, 16, 8);
        let weights = crate::model::init_model(&config, 0).unwrap();
        let state = toy_state(&other);
        assert!(attach_prune_params(&weights, &config, &state).is_err());
    }
}
