use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Gradients, Real, Tape, Tensor, TensorRef};
use crate::error::{Error, Result};
use crate::model::config::ArchConfig;
use crate::model::weights::{LayerWeights, ModelWeights};

/// Additive logit for masked-out attention keys; effectively −∞ while keeping
/// every intermediate finite even for all-padding rows.
pub const ATTENTION_MASK_NEG: Real = -1e9;

pub(crate) struct DropoutDraw<'a> {
    pub p: Real,
    pub rng: &'a mut ChaCha8Rng,
}

fn maybe_dropout(
    tape: &mut Tape,
    x: TensorRef,
    dropout: &mut Option<DropoutDraw>,
) -> Result<TensorRef> {
    match dropout {
        Some(d) if d.p > 0.0 => {
            let keep: Vec<bool> = (0..tape.value(x).len())
                .map(|_| d.rng.gen::<f64>() >= d.p as f64)
                .collect();
            tape.dropout(x, keep, d.p)
        }
        _ => Ok(x),
    }
}

/// Tape handles for one layer's tensors, in base or α-scaled form.
pub(crate) struct LayerRefs {
    pub key: TensorRef,
    pub query: TensorRef,
    pub value: TensorRef,
    pub proj: TensorRef,
    pub key_bias: TensorRef,
    pub query_bias: TensorRef,
    pub value_bias: TensorRef,
    pub attn_out_bias: TensorRef,
    pub attn_ln_gain: TensorRef,
    pub attn_ln_shift: TensorRef,
    pub ff_in: TensorRef,
    pub ff_in_bias: TensorRef,
    pub ff_out: TensorRef,
    pub ff_out_bias: TensorRef,
    pub out_ln_gain: TensorRef,
    pub out_ln_shift: TensorRef,
}

impl LayerRefs {
    pub fn register(tape: &mut Tape, layer: &LayerWeights, trainable: bool) -> Result<LayerRefs> {
        let reg = |tape: &mut Tape, t: &Tensor| {
            if trainable {
                tape.param(t)
            } else {
                tape.input(t)
            }
        };
        Ok(LayerRefs {
            key: reg(tape, &layer.key)?,
            query: reg(tape, &layer.query)?,
            value: reg(tape, &layer.value)?,
            proj: reg(tape, &layer.proj)?,
            key_bias: reg(tape, &layer.key_bias)?,
            query_bias: reg(tape, &layer.query_bias)?,
            value_bias: reg(tape, &layer.value_bias)?,
            attn_out_bias: reg(tape, &layer.attn_out_bias)?,
            attn_ln_gain: reg(tape, &layer.attn_ln_gain)?,
            attn_ln_shift: reg(tape, &layer.attn_ln_shift)?,
            ff_in: reg(tape, &layer.ff_in)?,
            ff_in_bias: reg(tape, &layer.ff_in_bias)?,
            ff_out: reg(tape, &layer.ff_out)?,
            ff_out_bias: reg(tape, &layer.ff_out_bias)?,
            out_ln_gain: reg(tape, &layer.out_ln_gain)?,
            out_ln_shift: reg(tape, &layer.out_ln_shift)?,
        })
    }

    fn apply_gradients(&self, grads: &Gradients, layer: &mut LayerWeights) -> Result<()> {
        grads.apply_to(self.key, &mut layer.key)?;
        grads.apply_to(self.query, &mut layer.query)?;
        grads.apply_to(self.value, &mut layer.value)?;
        grads.apply_to(self.proj, &mut layer.proj)?;
        grads.apply_to(self.key_bias, &mut layer.key_bias)?;
        grads.apply_to(self.query_bias, &mut layer.query_bias)?;
        grads.apply_to(self.value_bias, &mut layer.value_bias)?;
        grads.apply_to(self.attn_out_bias, &mut layer.attn_out_bias)?;
        grads.apply_to(self.attn_ln_gain, &mut layer.attn_ln_gain)?;
        grads.apply_to(self.attn_ln_shift, &mut layer.attn_ln_shift)?;
        grads.apply_to(self.ff_in, &mut layer.ff_in)?;
        grads.apply_to(self.ff_in_bias, &mut layer.ff_in_bias)?;
        grads.apply_to(self.ff_out, &mut layer.ff_out)?;
        grads.apply_to(self.ff_out_bias, &mut layer.ff_out_bias)?;
        grads.apply_to(self.out_ln_gain, &mut layer.out_ln_gain)?;
        grads.apply_to(self.out_ln_shift, &mut layer.out_ln_shift)?;
        Ok(())
    }
}

/// Tape handles for the full model.
pub(crate) struct ModelRefs {
    pub embedding: TensorRef,
    pub position_embedding: TensorRef,
    pub segment_embedding: TensorRef,
    pub embedding_ln_gain: TensorRef,
    pub embedding_ln_shift: TensorRef,
    pub layers: Vec<LayerRefs>,
    pub pooler_weight: TensorRef,
    pub pooler_bias: TensorRef,
    pub nsp_weight: TensorRef,
    pub nsp_bias: TensorRef,
    pub mlm_bias: TensorRef,
}

impl ModelRefs {
    pub fn register(tape: &mut Tape, w: &ModelWeights, trainable: bool) -> Result<ModelRefs> {
        let reg = |tape: &mut Tape, t: &Tensor| {
            if trainable {
                tape.param(t)
            } else {
                tape.input(t)
            }
        };
        let embedding = reg(tape, &w.embedding)?;
        let position_embedding = reg(tape, &w.position_embedding)?;
        let segment_embedding = reg(tape, &w.segment_embedding)?;
        let embedding_ln_gain = reg(tape, &w.embedding_ln_gain)?;
        let embedding_ln_shift = reg(tape, &w.embedding_ln_shift)?;
        let layers = w
            .layers
            .iter()
            .map(|l| LayerRefs::register(tape, l, trainable))
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelRefs {
            embedding,
            position_embedding,
            segment_embedding,
            embedding_ln_gain,
            embedding_ln_shift,
            layers,
            pooler_weight: reg(tape, &w.pooler_weight)?,
            pooler_bias: reg(tape, &w.pooler_bias)?,
            nsp_weight: reg(tape, &w.nsp_weight)?,
            nsp_bias: reg(tape, &w.nsp_bias)?,
            mlm_bias: reg(tape, &w.mlm_bias)?,
        })
    }

    pub fn apply_gradients(&self, grads: &Gradients, w: &mut ModelWeights) -> Result<()> {
        grads.apply_to(self.embedding, &mut w.embedding)?;
        grads.apply_to(self.position_embedding, &mut w.position_embedding)?;
        grads.apply_to(self.segment_embedding, &mut w.segment_embedding)?;
        grads.apply_to(self.embedding_ln_gain, &mut w.embedding_ln_gain)?;
        grads.apply_to(self.embedding_ln_shift, &mut w.embedding_ln_shift)?;
        for (refs, layer) in self.layers.iter().zip(w.layers.iter_mut()) {
            refs.apply_gradients(grads, layer)?;
        }
        grads.apply_to(self.pooler_weight, &mut w.pooler_weight)?;
        grads.apply_to(self.pooler_bias, &mut w.pooler_bias)?;
        grads.apply_to(self.nsp_weight, &mut w.nsp_weight)?;
        grads.apply_to(self.nsp_bias, &mut w.nsp_bias)?;
        grads.apply_to(self.mlm_bias, &mut w.mlm_bias)?;
        Ok(())
    }
}

pub(crate) fn attention_mask_bias(tape: &mut Tape, attention_mask: &[bool]) -> Result<TensorRef> {
    let bias: Vec<Real> = attention_mask
        .iter()
        .map(|&real| if real { 0.0 } else { ATTENTION_MASK_NEG })
        .collect();
    tape.input_from(vec![attention_mask.len()], bias)
}

/// One encoder layer: per-head attention scaled by 1/√kᵢ (the layer's own
/// key size), projection back to h, residual + layer norm, then the
/// D → GELU → G feed-forward with its own residual + layer norm.
pub(crate) fn encoder_layer_graph(
    tape: &mut Tape,
    x: TensorRef,
    layer: &LayerRefs,
    mask_bias: TensorRef,
    eps: Real,
    h_active: Option<&[bool]>,
    dropout: &mut Option<DropoutDraw>,
) -> Result<TensorRef> {
    let key_shape = tape.shape(layer.key).to_vec();
    let (k, a) = (key_shape[0], key_shape[1]);
    let scale = 1.0 / (k as Real).sqrt();

    let mut attn: Option<TensorRef> = None;
    for j in 0..a {
        let kj = tape.index_axis(layer.key, 1, j)?;
        let qj = tape.index_axis(layer.query, 1, j)?;
        let vj = tape.index_axis(layer.value, 1, j)?;
        let pj = tape.index_axis(layer.proj, 2, j)?;
        let kb = tape.index_axis(layer.key_bias, 0, j)?;
        let qb = tape.index_axis(layer.query_bias, 0, j)?;
        let vb = tape.index_axis(layer.value_bias, 0, j)?;

        let keys = tape.matmul_nt(x, kj)?;
        let keys = tape.add_rowvec(keys, kb)?;
        let queries = tape.matmul_nt(x, qj)?;
        let queries = tape.add_rowvec(queries, qb)?;
        let values = tape.matmul_nt(x, vj)?;
        let values = tape.add_rowvec(values, vb)?;

        let scores = tape.matmul_nt(queries, keys)?;
        let scores = tape.scale(scores, scale)?;
        let scores = tape.add_rowvec(scores, mask_bias)?;
        let probs = tape.softmax(scores, 1)?;
        let context = tape.matmul(probs, values)?;
        let head_out = tape.matmul_nt(context, pj)?;
        attn = Some(match attn {
            Some(acc) => tape.add(acc, head_out)?,
            None => head_out,
        });
    }
    let attn = attn.expect("head count is at least one");
    let attn = tape.add_rowvec(attn, layer.attn_out_bias)?;
    let attn = maybe_dropout(tape, attn, dropout)?;
    let res1 = tape.add(x, attn)?;
    let y = match h_active {
        Some(active) => {
            tape.layer_norm_masked(res1, layer.attn_ln_gain, layer.attn_ln_shift, eps, active)?
        }
        None => tape.layer_norm(res1, layer.attn_ln_gain, layer.attn_ln_shift, eps)?,
    };

    let hidden = tape.matmul_nt(y, layer.ff_in)?;
    let hidden = tape.add_rowvec(hidden, layer.ff_in_bias)?;
    let hidden = tape.gelu(hidden)?;
    let ff = tape.matmul_nt(hidden, layer.ff_out)?;
    let ff = tape.add_rowvec(ff, layer.ff_out_bias)?;
    let ff = maybe_dropout(tape, ff, dropout)?;
    let res2 = tape.add(y, ff)?;
    match h_active {
        Some(active) => {
            tape.layer_norm_masked(res2, layer.out_ln_gain, layer.out_ln_shift, eps, active)
        }
        None => tape.layer_norm(res2, layer.out_ln_gain, layer.out_ln_shift, eps),
    }
}

/// Embeddings, encoder stack and pooler. Returns (sequence output [seq, h],
/// pooled CLS [1, h]).
pub(crate) fn model_graph_with_pooler(
    tape: &mut Tape,
    refs: &ModelRefs,
    eps: Real,
    tokens: &[usize],
    segments: &[usize],
    positions: &[usize],
    attention_mask: &[bool],
    h_active: Option<&[bool]>,
    dropout: &mut Option<DropoutDraw>,
) -> Result<(TensorRef, TensorRef)> {
    let seq = tokens.len();
    if seq == 0 || segments.len() != seq || positions.len() != seq || attention_mask.len() != seq {
        return Err(Error::Contract(format!(
            "token/segment/position/mask lengths disagree: {} / {} / {} / {}",
            seq,
            segments.len(),
            positions.len(),
            attention_mask.len()
        )));
    }

    let tok = tape.gather_rows(refs.embedding, tokens)?;
    let pos = tape.gather_rows(refs.position_embedding, positions)?;
    let seg = tape.gather_rows(refs.segment_embedding, segments)?;
    let sum = tape.add(tok, pos)?;
    let sum = tape.add(sum, seg)?;
    let emb = match h_active {
        Some(active) => tape.layer_norm_masked(
            sum,
            refs.embedding_ln_gain,
            refs.embedding_ln_shift,
            eps,
            active,
        )?,
        None => tape.layer_norm(sum, refs.embedding_ln_gain, refs.embedding_ln_shift, eps)?,
    };
    let mut x = maybe_dropout(tape, emb, dropout)?;

    let mask_bias = attention_mask_bias(tape, attention_mask)?;
    for layer in &refs.layers {
        x = encoder_layer_graph(tape, x, layer, mask_bias, eps, h_active, dropout)?;
    }

    let cls = tape.gather_rows(x, &[0])?;
    let pooled = tape.matmul_nt(cls, refs.pooler_weight)?;
    let pooled = tape.add_rowvec(pooled, refs.pooler_bias)?;
    let pooled = tape.tanh(pooled)?;
    Ok((x, pooled))
}

/// Instrumented multiply census of the encoder stack: runs the real forward
/// graph (embeddings and task heads excluded) on a dummy input at `seq_len`
/// and reports how many multiplications its matmul nodes performed. This is
/// the measurement the closed-form FLOPs model must reproduce exactly.
pub fn encoder_multiply_count(
    weights: &ModelWeights,
    config: &ArchConfig,
    seq_len: usize,
) -> Result<u64> {
    let mut tape = Tape::new();
    let mut x = tape.input(&Tensor::zeros(vec![seq_len, config.hidden_size]))?;
    let mask = vec![true; seq_len];
    let mask_bias = attention_mask_bias(&mut tape, &mask)?;
    for layer in &weights.layers {
        let refs = LayerRefs::register(&mut tape, layer, false)?;
        x = encoder_layer_graph(
            &mut tape,
            x,
            &refs,
            mask_bias,
            config.layer_norm_eps,
            None,
            &mut None,
        )?;
    }
    Ok(tape.matmul_multiplies())
}

/// Run one encoder layer in evaluation mode.
pub fn encoder_layer_forward(
    x: &Tensor,
    layer: &LayerWeights,
    attention_mask: &[bool],
    eps: Real,
) -> Result<Tensor> {
    if x.shape().len() != 2 || attention_mask.len() != x.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "encoder_layer_forward",
            lhs: x.shape().to_vec(),
            rhs: vec![attention_mask.len()],
        });
    }
    let mut tape = Tape::new();
    let refs = LayerRefs::register(&mut tape, layer, false)?;
    let x_ref = tape.input(x)?;
    let mask_bias = attention_mask_bias(&mut tape, attention_mask)?;
    let out = encoder_layer_graph(&mut tape, x_ref, &refs, mask_bias, eps, None, &mut None)?;
    Ok(tape.to_tensor(out))
}

/// Full forward in evaluation mode: (sequence output [seq, h], pooled CLS
/// vector [h] through the tanh pooler).
pub fn model_forward(
    weights: &ModelWeights,
    config: &ArchConfig,
    tokens: &[usize],
    segments: &[usize],
    positions: &[usize],
    attention_mask: &[bool],
) -> Result<(Tensor, Tensor)> {
    if tokens.len() > config.max_positions {
        return Err(Error::IndexOutOfRange {
            op: "model_forward",
            index: tokens.len(),
            extent: config.max_positions,
        });
    }
    let mut tape = Tape::new();
    let refs = ModelRefs::register(&mut tape, weights, false)?;
    let (seq_out, pooled) = model_graph_with_pooler(
        &mut tape,
        &refs,
        config.layer_norm_eps,
        tokens,
        segments,
        positions,
        attention_mask,
        None,
        &mut None,
    )?;
    let seq_tensor = tape.to_tensor(seq_out);
    let h = config.hidden_size;
    let pooled_tensor = Tensor::new(vec![h], tape.value(pooled).to_vec())?;
    Ok((seq_tensor, pooled_tensor))
}
