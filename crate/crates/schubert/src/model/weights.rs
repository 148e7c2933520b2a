use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Real, Tensor};
use crate::error::Result;
use crate::model::config::ArchConfig;

/// One encoder layer. Key and query share the leading extent; the value
/// tensor's leading extent matches the projection's value extent.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    /// [k, a, h]
    pub key: Tensor,
    /// [k, a, h]
    pub query: Tensor,
    /// [v, a, h]
    pub value: Tensor,
    /// [h, v, a]
    pub proj: Tensor,
    /// [a, k]
    pub key_bias: Tensor,
    /// [a, k]
    pub query_bias: Tensor,
    /// [a, v]
    pub value_bias: Tensor,
    /// [h]
    pub attn_out_bias: Tensor,
    pub attn_ln_gain: Tensor,
    pub attn_ln_shift: Tensor,
    /// [f, h]
    pub ff_in: Tensor,
    /// [f]
    pub ff_in_bias: Tensor,
    /// [h, f]
    pub ff_out: Tensor,
    /// [h]
    pub ff_out_bias: Tensor,
    pub out_ln_gain: Tensor,
    pub out_ln_shift: Tensor,
}

/// All model parameters. The token embedding doubles as the decode
/// projection: there is no separate decode matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    /// [vocab, h], tied for decoding
    pub embedding: Tensor,
    /// [max_positions, h]
    pub position_embedding: Tensor,
    /// [segment_types, h]
    pub segment_embedding: Tensor,
    pub embedding_ln_gain: Tensor,
    pub embedding_ln_shift: Tensor,
    pub layers: Vec<LayerWeights>,
    /// [h, h]
    pub pooler_weight: Tensor,
    pub pooler_bias: Tensor,
    /// [2, h]
    pub nsp_weight: Tensor,
    /// [2]
    pub nsp_bias: Tensor,
    /// [vocab]
    pub mlm_bias: Tensor,
}

/// Canonical tensor order for checkpoints, optimizers and registration.
pub fn tensor_shapes(config: &ArchConfig) -> Vec<(String, Vec<usize>)> {
    let h = config.hidden_size;
    let mut out = vec![
        ("embedding".to_string(), vec![config.vocab_size, h]),
        ("position_embedding".to_string(), vec![config.max_positions, h]),
        ("segment_embedding".to_string(), vec![config.segment_types, h]),
        ("embedding_ln_gain".to_string(), vec![h]),
        ("embedding_ln_shift".to_string(), vec![h]),
    ];
    for i in 0..config.layers {
        let (a, k, v, f) = (
            config.heads[i],
            config.key_size[i],
            config.value_size[i],
            config.ff_size[i],
        );
        let name = |field: &str| format!("layer{i}.{field}");
        out.push((name("key"), vec![k, a, h]));
        out.push((name("query"), vec![k, a, h]));
        out.push((name("value"), vec![v, a, h]));
        out.push((name("proj"), vec![h, v, a]));
        out.push((name("key_bias"), vec![a, k]));
        out.push((name("query_bias"), vec![a, k]));
        out.push((name("value_bias"), vec![a, v]));
        out.push((name("attn_out_bias"), vec![h]));
        out.push((name("attn_ln_gain"), vec![h]));
        out.push((name("attn_ln_shift"), vec![h]));
        out.push((name("ff_in"), vec![f, h]));
        out.push((name("ff_in_bias"), vec![f]));
        out.push((name("ff_out"), vec![h, f]));
        out.push((name("ff_out_bias"), vec![h]));
        out.push((name("out_ln_gain"), vec![h]));
        out.push((name("out_ln_shift"), vec![h]));
    }
    out.push(("pooler_weight".to_string(), vec![h, h]));
    out.push(("pooler_bias".to_string(), vec![h]));
    out.push(("nsp_weight".to_string(), vec![2, h]));
    out.push(("nsp_bias".to_string(), vec![2]));
    out.push(("mlm_bias".to_string(), vec![config.vocab_size]));
    out
}

impl ModelWeights {
    /// All-zero weights with the shapes demanded by `config` (layer-norm
    /// gains start at one).
    pub fn zeros(config: &ArchConfig) -> Self {
        let h = config.hidden_size;
        let layers = (0..config.layers)
            .map(|i| {
                let (a, k, v, f) = (
                    config.heads[i],
                    config.key_size[i],
                    config.value_size[i],
                    config.ff_size[i],
                );
                LayerWeights {
                    key: Tensor::zeros(vec![k, a, h]),
                    query: Tensor::zeros(vec![k, a, h]),
                    value: Tensor::zeros(vec![v, a, h]),
                    proj: Tensor::zeros(vec![h, v, a]),
                    key_bias: Tensor::zeros(vec![a, k]),
                    query_bias: Tensor::zeros(vec![a, k]),
                    value_bias: Tensor::zeros(vec![a, v]),
                    attn_out_bias: Tensor::zeros(vec![h]),
                    attn_ln_gain: Tensor::filled(vec![h], 1.0),
                    attn_ln_shift: Tensor::zeros(vec![h]),
                    ff_in: Tensor::zeros(vec![f, h]),
                    ff_in_bias: Tensor::zeros(vec![f]),
                    ff_out: Tensor::zeros(vec![h, f]),
                    ff_out_bias: Tensor::zeros(vec![h]),
                    out_ln_gain: Tensor::filled(vec![h], 1.0),
                    out_ln_shift: Tensor::zeros(vec![h]),
                }
            })
            .collect();
        ModelWeights {
            embedding: Tensor::zeros(vec![config.vocab_size, h]),
            position_embedding: Tensor::zeros(vec![config.max_positions, h]),
            segment_embedding: Tensor::zeros(vec![config.segment_types, h]),
            embedding_ln_gain: Tensor::filled(vec![h], 1.0),
            embedding_ln_shift: Tensor::zeros(vec![h]),
            layers,
            pooler_weight: Tensor::zeros(vec![h, h]),
            pooler_bias: Tensor::zeros(vec![h]),
            nsp_weight: Tensor::zeros(vec![2, h]),
            nsp_bias: Tensor::zeros(vec![2]),
            mlm_bias: Tensor::zeros(vec![config.vocab_size]),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embedding".into(), &self.embedding),
            ("position_embedding".into(), &self.position_embedding),
            ("segment_embedding".into(), &self.segment_embedding),
            ("embedding_ln_gain".into(), &self.embedding_ln_gain),
            ("embedding_ln_shift".into(), &self.embedding_ln_shift),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let name = |field: &str| format!("layer{i}.{field}");
            out.push((name("key"), &l.key));
            out.push((name("query"), &l.query));
            out.push((name("value"), &l.value));
            out.push((name("proj"), &l.proj));
            out.push((name("key_bias"), &l.key_bias));
            out.push((name("query_bias"), &l.query_bias));
            out.push((name("value_bias"), &l.value_bias));
            out.push((name("attn_out_bias"), &l.attn_out_bias));
            out.push((name("attn_ln_gain"), &l.attn_ln_gain));
            out.push((name("attn_ln_shift"), &l.attn_ln_shift));
            out.push((name("ff_in"), &l.ff_in));
            out.push((name("ff_in_bias"), &l.ff_in_bias));
            out.push((name("ff_out"), &l.ff_out));
            out.push((name("ff_out_bias"), &l.ff_out_bias));
            out.push((name("out_ln_gain"), &l.out_ln_gain));
            out.push((name("out_ln_shift"), &l.out_ln_shift));
        }
        out.push(("pooler_weight".into(), &self.pooler_weight));
        out.push(("pooler_bias".into(), &self.pooler_bias));
        out.push(("nsp_weight".into(), &self.nsp_weight));
        out.push(("nsp_bias".into(), &self.nsp_bias));
        out.push(("mlm_bias".into(), &self.mlm_bias));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("embedding".into(), &mut self.embedding),
            ("position_embedding".into(), &mut self.position_embedding),
            ("segment_embedding".into(), &mut self.segment_embedding),
            ("embedding_ln_gain".into(), &mut self.embedding_ln_gain),
            ("embedding_ln_shift".into(), &mut self.embedding_ln_shift),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let name = |field: &str| format!("layer{i}.{field}");
            out.push((name("key"), &mut l.key));
            out.push((name("query"), &mut l.query));
            out.push((name("value"), &mut l.value));
            out.push((name("proj"), &mut l.proj));
            out.push((name("key_bias"), &mut l.key_bias));
            out.push((name("query_bias"), &mut l.query_bias));
            out.push((name("value_bias"), &mut l.value_bias));
            out.push((name("attn_out_bias"), &mut l.attn_out_bias));
            out.push((name("attn_ln_gain"), &mut l.attn_ln_gain));
            out.push((name("attn_ln_shift"), &mut l.attn_ln_shift));
            out.push((name("ff_in"), &mut l.ff_in));
            out.push((name("ff_in_bias"), &mut l.ff_in_bias));
            out.push((name("ff_out"), &mut l.ff_out));
            out.push((name("ff_out_bias"), &mut l.ff_out_bias));
            out.push((name("out_ln_gain"), &mut l.out_ln_gain));
            out.push((name("out_ln_shift"), &mut l.out_ln_shift));
        }
        out.push(("pooler_weight".into(), &mut self.pooler_weight));
        out.push(("pooler_bias".into(), &mut self.pooler_bias));
        out.push(("nsp_weight".into(), &mut self.nsp_weight));
        out.push(("nsp_bias".into(), &mut self.nsp_bias));
        out.push(("mlm_bias".into(), &mut self.mlm_bias));
        out
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.named_tensors_mut() {
            t.zero_grad();
        }
    }
}

/// Sample std ratio of a standard normal truncated at ±2, used to rescale
/// draws so the sample standard deviation matches the requested one.
const TRUNC_STD_RATIO: f64 = 0.879_625_661_034_239_8;

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; u1 bounded away from zero so the log stays finite.
    loop {
        let u1: f64 = rng.gen();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        let u2: f64 = rng.gen();
        return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
    }
}

/// Normal draw truncated to ±2 standard deviations by resampling, rescaled
/// so the result's standard deviation equals `std`.
pub fn truncated_normal(rng: &mut ChaCha8Rng, std: Real) -> Real {
    loop {
        let z = standard_normal(rng);
        if z.abs() <= 2.0 {
            return ((z / TRUNC_STD_RATIO) * std as f64) as Real;
        }
    }
}

const INIT_STD: Real = 0.02;

fn fill_truncated_normal(t: &mut Tensor, rng: &mut ChaCha8Rng) {
    for x in t.data_mut() {
        *x = truncated_normal(rng, INIT_STD);
    }
}

/// Fresh weights: matrices from a truncated normal (σ = 0.02), biases zero,
/// layer-norm gain one / shift zero. Deterministic per seed.
pub fn init_model(config: &ArchConfig, seed: u64) -> Result<ModelWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = ModelWeights::zeros(config);
    fill_truncated_normal(&mut w.embedding, &mut rng);
    fill_truncated_normal(&mut w.position_embedding, &mut rng);
    fill_truncated_normal(&mut w.segment_embedding, &mut rng);
    for layer in &mut w.layers {
        fill_truncated_normal(&mut layer.key, &mut rng);
        fill_truncated_normal(&mut layer.query, &mut rng);
        fill_truncated_normal(&mut layer.value, &mut rng);
        fill_truncated_normal(&mut layer.proj, &mut rng);
        fill_truncated_normal(&mut layer.ff_in, &mut rng);
        fill_truncated_normal(&mut layer.ff_out, &mut rng);
    }
    fill_truncated_normal(&mut w.pooler_weight, &mut rng);
    fill_truncated_normal(&mut w.nsp_weight, &mut rng);
    Ok(w)
}
