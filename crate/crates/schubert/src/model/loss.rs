use rand_chacha::ChaCha8Rng;

use crate::autograd::{Real, Tape, Tensor, TensorRef};
use crate::data::{Batch, PaddedExample};
use crate::error::{Error, Result};
use crate::model::config::ArchConfig;
use crate::model::forward::{model_graph_with_pooler, DropoutDraw, ModelRefs};
use crate::model::weights::ModelWeights;

/// NSP class index convention: a true next sentence is class 0.
pub fn nsp_label(is_next: bool) -> usize {
    if is_next {
        0
    } else {
        1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub total: Real,
    pub mlm: Real,
    pub nsp: Real,
    pub masked_tokens: usize,
}

pub(crate) struct LossRefs {
    pub total: TensorRef,
    pub mlm: TensorRef,
    pub nsp: TensorRef,
    pub masked_tokens: usize,
}

fn check_masked_positions(item: &PaddedExample) -> Result<()> {
    let real_len = item.attention_mask.iter().filter(|&&m| m).count();
    if item.masked_positions.len() != item.original_ids.len() {
        return Err(Error::Contract(
            "masked_positions and original_ids must pair up".into(),
        ));
    }
    for &pos in &item.masked_positions {
        if pos >= item.tokens.len() || !item.attention_mask[pos] {
            return Err(Error::IndexOutOfRange {
                op: "mlm_nsp_loss",
                index: pos,
                extent: real_len,
            });
        }
    }
    Ok(())
}

/// Eq-style pre-training objective on a batch: total = mlm + nsp, where mlm
/// is the cross-entropy of embedding-tied decode logits at masked positions
/// (averaged over every masked token in the batch) and nsp is the two-way
/// cross-entropy on the pooled CLS vector (averaged over examples).
pub(crate) fn mlm_nsp_graph(
    tape: &mut Tape,
    refs: &ModelRefs,
    eps: Real,
    items: &[PaddedExample],
    h_active: Option<&[bool]>,
    dropout: &mut Option<DropoutDraw>,
) -> Result<LossRefs> {
    if items.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let total_masked: usize = items.iter().map(|e| e.masked_positions.len()).sum();

    let mut mlm: Option<TensorRef> = None;
    let mut nsp: Option<TensorRef> = None;
    let nsp_weight = 1.0 / items.len() as Real;

    for item in items {
        check_masked_positions(item)?;
        let positions: Vec<usize> = (0..item.tokens.len()).collect();
        let (seq_out, pooled) = model_graph_with_pooler(
            tape,
            refs,
            eps,
            &item.tokens,
            &item.segments,
            &positions,
            &item.attention_mask,
            h_active,
            dropout,
        )?;

        if !item.masked_positions.is_empty() {
            let rows = tape.gather_rows(seq_out, &item.masked_positions)?;
            let logits = tape.matmul_nt(rows, refs.embedding)?;
            let logits = tape.add_rowvec(logits, refs.mlm_bias)?;
            let ce = tape.cross_entropy(logits, &item.original_ids)?;
            let weighted = tape.scale(
                ce,
                item.masked_positions.len() as Real / total_masked as Real,
            )?;
            mlm = Some(match mlm {
                Some(acc) => tape.add(acc, weighted)?,
                None => weighted,
            });
        }

        let nsp_logits = tape.matmul_nt(pooled, refs.nsp_weight)?;
        let nsp_logits = tape.add_rowvec(nsp_logits, refs.nsp_bias)?;
        let ce = tape.cross_entropy(nsp_logits, &[nsp_label(item.is_next)])?;
        let weighted = tape.scale(ce, nsp_weight)?;
        nsp = Some(match nsp {
            Some(acc) => tape.add(acc, weighted)?,
            None => weighted,
        });
    }

    let mlm = mlm.unwrap_or_else(|| tape.constant(0.0));
    let nsp = nsp.expect("batch is non-empty");
    let total = tape.add(mlm, nsp)?;
    Ok(LossRefs {
        total,
        mlm,
        nsp,
        masked_tokens: total_masked,
    })
}

fn loss_values(tape: &Tape, refs: &LossRefs) -> LossValues {
    LossValues {
        total: tape.scalar_value(refs.total),
        mlm: tape.scalar_value(refs.mlm),
        nsp: tape.scalar_value(refs.nsp),
        masked_tokens: refs.masked_tokens,
    }
}

/// Evaluate the pre-training loss without touching gradients.
pub fn mlm_nsp_loss(
    weights: &ModelWeights,
    config: &ArchConfig,
    batch: &Batch,
) -> Result<LossValues> {
    let mut tape = Tape::new();
    let refs = ModelRefs::register(&mut tape, weights, false)?;
    let loss = mlm_nsp_graph(
        &mut tape,
        &refs,
        config.layer_norm_eps,
        &batch.items,
        None,
        &mut None,
    )?;
    Ok(loss_values(&tape, &loss))
}

/// Evaluate the pre-training loss and accumulate dL/dθ into every weight's
/// gradient buffer. An optional dropout rate applies during the forward pass.
pub fn mlm_nsp_loss_with_grads(
    weights: &mut ModelWeights,
    config: &ArchConfig,
    batch: &Batch,
    dropout: Option<(Real, &mut ChaCha8Rng)>,
) -> Result<LossValues> {
    let mut tape = Tape::new();
    let refs = ModelRefs::register(&mut tape, weights, true)?;
    let mut draw = dropout.map(|(p, rng)| DropoutDraw { p, rng });
    let loss = mlm_nsp_graph(
        &mut tape,
        &refs,
        config.layer_norm_eps,
        &batch.items,
        None,
        &mut draw,
    )?;
    let values = loss_values(&tape, &loss);
    let grads = tape.backward(loss.total)?;
    refs.apply_gradients(&grads, weights)?;
    Ok(values)
}

/// Decode logits at every sequence position plus the NSP logits, in
/// evaluation mode. This is the comparison surface for the masked-vs-extracted
/// equivalence checks.
pub fn model_logits(
    weights: &ModelWeights,
    config: &ArchConfig,
    item: &PaddedExample,
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let refs = ModelRefs::register(&mut tape, weights, false)?;
    let positions: Vec<usize> = (0..item.tokens.len()).collect();
    let (seq_out, pooled) = model_graph_with_pooler(
        &mut tape,
        &refs,
        config.layer_norm_eps,
        &item.tokens,
        &item.segments,
        &positions,
        &item.attention_mask,
        None,
        &mut None,
    )?;
    let logits = tape.matmul_nt(seq_out, refs.embedding)?;
    let logits = tape.add_rowvec(logits, refs.mlm_bias)?;
    let nsp_logits = tape.matmul_nt(pooled, refs.nsp_weight)?;
    let nsp_logits = tape.add_rowvec(nsp_logits, refs.nsp_bias)?;
    Ok((tape.to_tensor(logits), tape.to_tensor(nsp_logits)))
}
