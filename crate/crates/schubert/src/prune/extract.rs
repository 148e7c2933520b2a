use crate::autograd::{Real, Tensor};
use crate::error::{Error, Result};
use crate::model::{ArchConfig, ModelWeights};
use crate::prune::state::{AlphaVector, PruneState};

struct AxisPlan<'a> {
    keep: Vec<usize>,
    alpha: &'a [Real],
}

impl<'a> AxisPlan<'a> {
    fn from_alpha(alpha: &'a AlphaVector) -> Self {
        AxisPlan {
            keep: alpha.survivor_indices(),
            alpha: alpha.values(),
        }
    }

    fn identity(n: usize, ones: &'a [Real]) -> Self {
        AxisPlan {
            keep: (0..n).collect(),
            alpha: &ones[..n],
        }
    }
}

fn extract1(t: &Tensor, p0: &AxisPlan) -> Tensor {
    let data = p0
        .keep
        .iter()
        .map(|&i| t.data()[i] * p0.alpha[i])
        .collect();
    Tensor::new(vec![p0.keep.len()], data).expect("extracted tensor is well formed")
}

fn extract2(t: &Tensor, p0: &AxisPlan, p1: &AxisPlan) -> Tensor {
    let d1 = t.shape()[1];
    let mut data = Vec::with_capacity(p0.keep.len() * p1.keep.len());
    for &i in &p0.keep {
        let ai = p0.alpha[i];
        let row = &t.data()[i * d1..(i + 1) * d1];
        for &j in &p1.keep {
            data.push(row[j] * ai * p1.alpha[j]);
        }
    }
    Tensor::new(vec![p0.keep.len(), p1.keep.len()], data).expect("extracted tensor is well formed")
}

fn extract3(t: &Tensor, p0: &AxisPlan, p1: &AxisPlan, p2: &AxisPlan) -> Tensor {
    let (d1, d2) = (t.shape()[1], t.shape()[2]);
    let mut data = Vec::with_capacity(p0.keep.len() * p1.keep.len() * p2.keep.len());
    for &i in &p0.keep {
        let ai = p0.alpha[i];
        for &j in &p1.keep {
            let aij = ai * p1.alpha[j];
            let base = (i * d1 + j) * d2;
            for &l in &p2.keep {
                data.push(t.data()[base + l] * aij * p2.alpha[l]);
            }
        }
    }
    Tensor::new(
        vec![p0.keep.len(), p1.keep.len(), p2.keep.len()],
        data,
    )
    .expect("extracted tensor is well formed")
}

fn scale_in_place(t: &mut Tensor, factor: Real) {
    for x in t.data_mut() {
        *x *= factor;
    }
}

/// Fold surviving α values into the weights and delete every slice whose α is
/// masked, producing a strictly smaller dense model whose config records the
/// surviving counts. After extraction all effective α are one.
///
/// When key units were removed, the key projection (weights and bias) is
/// rescaled by √(k'ᵢ/kᵢ) so the extracted model's own 1/√k'ᵢ attention
/// scaling reproduces the masked model's scores exactly.
pub fn fold_and_extract(
    weights: &ModelWeights,
    config: &ArchConfig,
    state: &PruneState,
) -> Result<(ModelWeights, ArchConfig)> {
    state.matches_config(config)?;
    if state.hidden.survivors() == 0
        || (0..config.layers).any(|i| {
            state.heads[i].survivors() == 0
                || state.keys[i].survivors() == 0
                || state.values[i].survivors() == 0
                || state.ffs[i].survivors() == 0
        })
    {
        return Err(Error::Contract(
            "extraction would drop a dimension to zero".into(),
        ));
    }

    let new_config = ArchConfig {
        layers: config.layers,
        hidden_size: state.hidden.survivors(),
        heads: state.heads.iter().map(|v| v.survivors()).collect(),
        key_size: state.keys.iter().map(|v| v.survivors()).collect(),
        value_size: state.values.iter().map(|v| v.survivors()).collect(),
        ff_size: state.ffs.iter().map(|v| v.survivors()).collect(),
        vocab_size: config.vocab_size,
        max_positions: config.max_positions,
        segment_types: config.segment_types,
        layer_norm_eps: config.layer_norm_eps,
    };

    let ones = vec![1.0 as Real; config.vocab_size.max(config.max_positions).max(2)];
    let hidden = AxisPlan::from_alpha(&state.hidden);

    let mut new = ModelWeights::zeros(&new_config);
    new.embedding = extract2(
        &weights.embedding,
        &AxisPlan::identity(config.vocab_size, &ones),
        &hidden,
    );
    new.position_embedding = extract2(
        &weights.position_embedding,
        &AxisPlan::identity(config.max_positions, &ones),
        &hidden,
    );
    new.segment_embedding = extract2(
        &weights.segment_embedding,
        &AxisPlan::identity(config.segment_types, &ones),
        &hidden,
    );
    new.embedding_ln_gain = extract1(&weights.embedding_ln_gain, &hidden);
    new.embedding_ln_shift = extract1(&weights.embedding_ln_shift, &hidden);

    for (i, layer) in weights.layers.iter().enumerate() {
        let heads = AxisPlan::from_alpha(&state.heads[i]);
        let keys = AxisPlan::from_alpha(&state.keys[i]);
        let values = AxisPlan::from_alpha(&state.values[i]);
        let ffs = AxisPlan::from_alpha(&state.ffs[i]);
        let key_rescale =
            ((keys.keep.len() as Real) / (config.key_size[i] as Real)).sqrt();

        let out = &mut new.layers[i];
        out.key = extract3(&layer.key, &keys, &heads, &hidden);
        scale_in_place(&mut out.key, key_rescale);
        out.query = extract3(&layer.query, &keys, &heads, &hidden);
        out.value = extract3(&layer.value, &values, &heads, &hidden);
        out.proj = extract3(&layer.proj, &hidden, &values, &heads);
        out.key_bias = extract2(&layer.key_bias, &heads, &keys);
        scale_in_place(&mut out.key_bias, key_rescale);
        out.query_bias = extract2(&layer.query_bias, &heads, &keys);
        out.value_bias = extract2(&layer.value_bias, &heads, &values);
        out.attn_out_bias = extract1(&layer.attn_out_bias, &hidden);
        out.attn_ln_gain = extract1(&layer.attn_ln_gain, &hidden);
        out.attn_ln_shift = extract1(&layer.attn_ln_shift, &hidden);
        out.ff_in = extract2(&layer.ff_in, &ffs, &hidden);
        out.ff_in_bias = extract1(&layer.ff_in_bias, &ffs);
        out.ff_out = extract2(&layer.ff_out, &hidden, &ffs);
        out.ff_out_bias = extract1(&layer.ff_out_bias, &hidden);
        out.out_ln_gain = extract1(&layer.out_ln_gain, &hidden);
        out.out_ln_shift = extract1(&layer.out_ln_shift, &hidden);
    }

    new.pooler_weight = extract2(&weights.pooler_weight, &hidden, &hidden);
    new.pooler_bias = extract1(&weights.pooler_bias, &hidden);
    new.nsp_weight = extract2(&weights.nsp_weight, &AxisPlan::identity(2, &ones), &hidden);
    new.nsp_bias = weights.nsp_bias.clone();
    new.mlm_bias = weights.mlm_bias.clone();

    Ok((new, new_config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{compute_betas, Objective};
    use crate::model::init_model;

    #[test]
    fn identity_extraction_with_all_ones() {
        let config = ArchConfig::uniform(2, 6, 2, 3, 3, 8, 20, 10);
        let weights = init_model(&config, 5).unwrap();
        let state = PruneState::new(&config, compute_betas(&config, Objective::Params));
        let (extracted, new_config) = fold_and_extract(&weights, &config, &state).unwrap();
        assert_eq!(new_config, config);
        assert_eq!(extracted, weights);
    }

    #[test]
    fn fully_masked_vector_is_rejected() {
        let config = ArchConfig::uniform(1, 4, 1, 2, 2, 2, 8, 4);
        let weights = init_model(&config, 1).unwrap();
        let mut state = PruneState::new(&config, compute_betas(&config, Objective::Params));
        state.mask_site(crate::prune::PruneSite::Head { layer: 0, unit: 0 });
        assert!(fold_and_extract(&weights, &config, &state).is_err());
    }

    #[test]
    fn surviving_counts_recorded_in_config() {
        let config = ArchConfig::uniform(2, 6, 2, 3, 3, 8, 20, 10);
        let weights = init_model(&config, 2).unwrap();
        let mut state = PruneState::new(&config, compute_betas(&config, Objective::Params));
        state.mask_site(crate::prune::PruneSite::Hidden { unit: 1 });
        state.mask_site(crate::prune::PruneSite::Ff { layer: 1, unit: 0 });
        state.mask_site(crate::prune::PruneSite::Ff { layer: 1, unit: 7 });
        let (extracted, new_config) = fold_and_extract(&weights, &config, &state).unwrap();
        assert_eq!(new_config.hidden_size, 5);
        assert_eq!(new_config.ff_size, vec![8, 6]);
        assert_eq!(extracted.layers[1].ff_in.shape(), &[6, 5]);
        assert_eq!(extracted.embedding.shape(), &[20, 5]);
    }
}
