use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::corpus::parse_documents;
use crate::data::vocab::{Vocab, CLS_ID, MASK_ID, PAD_ID, SEP_ID};
use crate::error::{Error, Result};

/// One sentence-pair training example: `[CLS] A [SEP] B [SEP]` plus the
/// masked-position bookkeeping the MLM loss needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub tokens: Vec<usize>,
    pub segments: Vec<usize>,
    pub masked_positions: Vec<usize>,
    /// Original token ids at the masked positions, in the same order.
    pub original_ids: Vec<usize>,
    pub is_next: bool,
    /// Set when the pair had to be truncated to fit `max_positions`.
    pub truncated: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct MaskingParams {
    pub mask_rate: f64,
    /// (mask-token, random-word, unchanged) proportions among selected tokens.
    pub replace_splits: (f64, f64, f64),
    pub max_positions: usize,
}

impl MaskingParams {
    pub fn standard(max_positions: usize) -> Self {
        MaskingParams {
            mask_rate: 0.15,
            replace_splits: (0.8, 0.1, 0.1),
            max_positions,
        }
    }
}

/// Drop tokens from the longer tail until the pair fits the budget.
fn truncate_pair(a: &mut Vec<usize>, b: &mut Vec<usize>, budget: usize) -> bool {
    let mut truncated = false;
    while a.len() + b.len() > budget {
        truncated = true;
        if a.len() >= b.len() && a.len() > 1 {
            a.pop();
        } else if b.len() > 1 {
            b.pop();
        } else {
            a.pop();
        }
    }
    truncated
}

/// Build sentence-pair examples from a corpus: one example per adjacent
/// sentence slot, 50% true-next / 50% random second sentence, then BERT-style
/// masking (each eligible token selected with `mask_rate`; selected tokens go
/// 80% to `[MASK]`, 10% to a random word, 10% unchanged). Deterministic per
/// seed.
pub fn make_examples(
    corpus: &str,
    vocab: &Vocab,
    seed: u64,
    params: &MaskingParams,
) -> Result<Vec<TrainingExample>> {
    if !(0.0..=1.0).contains(&params.mask_rate) {
        return Err(Error::Contract("mask_rate must lie in [0, 1]".into()));
    }
    let (p_mask, p_rand, p_keep) = params.replace_splits;
    if (p_mask + p_rand + p_keep - 1.0).abs() > 1e-9 || p_mask < 0.0 || p_rand < 0.0 || p_keep < 0.0
    {
        return Err(Error::Contract("replace_splits must sum to 1".into()));
    }
    if params.max_positions < 5 {
        return Err(Error::Contract(
            "max_positions must fit [CLS] a [SEP] b [SEP]".into(),
        ));
    }

    let docs: Vec<Vec<Vec<usize>>> = parse_documents(corpus)
        .iter()
        .map(|doc| doc.iter().map(|s| vocab.tokenize(s)).collect())
        .collect();
    let docs: Vec<Vec<Vec<usize>>> = docs
        .into_iter()
        .map(|doc| doc.into_iter().filter(|s| !s.is_empty()).collect())
        .filter(|doc: &Vec<Vec<usize>>| doc.len() >= 1)
        .collect();
    if docs.iter().map(|d| d.len()).sum::<usize>() < 2 {
        return Err(Error::InvalidConfig(
            "corpus needs at least two non-empty sentences".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let word_ids: Vec<usize> = vocab.word_ids().collect();
    let mut examples = Vec::new();

    for (d, doc) in docs.iter().enumerate() {
        for s in 0..doc.len().saturating_sub(1) {
            let mut first = doc[s].clone();
            let take_next = rng.gen_bool(0.5);
            let (mut second, is_next) = if take_next || docs.len() == 1 {
                (doc[s + 1].clone(), true)
            } else {
                // Random sentence from a different document.
                let mut od = rng.gen_range(0..docs.len() - 1);
                if od >= d {
                    od += 1;
                }
                let os = rng.gen_range(0..docs[od].len());
                (docs[od][os].clone(), false)
            };

            let truncated = truncate_pair(&mut first, &mut second, params.max_positions - 3);
            if first.is_empty() || second.is_empty() {
                continue;
            }

            let mut tokens = Vec::with_capacity(first.len() + second.len() + 3);
            let mut segments = Vec::with_capacity(tokens.capacity());
            tokens.push(CLS_ID);
            segments.push(0);
            let mut eligible = Vec::new();
            for &t in &first {
                eligible.push(tokens.len());
                tokens.push(t);
                segments.push(0);
            }
            tokens.push(SEP_ID);
            segments.push(0);
            for &t in &second {
                eligible.push(tokens.len());
                tokens.push(t);
                segments.push(1);
            }
            tokens.push(SEP_ID);
            segments.push(1);

            let mut masked_positions = Vec::new();
            let mut original_ids = Vec::new();
            for &pos in &eligible {
                if rng.gen_bool(params.mask_rate) {
                    masked_positions.push(pos);
                    original_ids.push(tokens[pos]);
                    let roll: f64 = rng.gen();
                    if roll < p_mask {
                        tokens[pos] = MASK_ID;
                    } else if roll < p_mask + p_rand && !word_ids.is_empty() {
                        tokens[pos] = word_ids[rng.gen_range(0..word_ids.len())];
                    }
                    // otherwise left unchanged
                }
            }

            examples.push(TrainingExample {
                tokens,
                segments,
                masked_positions,
                original_ids,
                is_next,
                truncated,
            });
        }
    }

    if examples.is_empty() {
        return Err(Error::InvalidConfig(
            "corpus produced no sentence pairs".into(),
        ));
    }
    Ok(examples)
}

/// A training example padded to its batch's sequence length.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedExample {
    pub tokens: Vec<usize>,
    pub segments: Vec<usize>,
    /// true where the token is real, false on padding
    pub attention_mask: Vec<bool>,
    pub masked_positions: Vec<usize>,
    pub original_ids: Vec<usize>,
    pub is_next: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub items: Vec<PaddedExample>,
}

impl Batch {
    /// Pad all examples to the longest one with `[PAD]` and emit attention
    /// masks.
    pub fn from_examples(examples: &[TrainingExample]) -> Batch {
        let max_len = examples.iter().map(|e| e.tokens.len()).max().unwrap_or(0);
        let items = examples
            .iter()
            .map(|e| {
                let real = e.tokens.len();
                let mut tokens = e.tokens.clone();
                let mut segments = e.segments.clone();
                tokens.resize(max_len, PAD_ID);
                segments.resize(max_len, 0);
                let mut attention_mask = vec![true; real];
                attention_mask.resize(max_len, false);
                PaddedExample {
                    tokens,
                    segments,
                    attention_mask,
                    masked_positions: e.masked_positions.clone(),
                    original_ids: e.original_ids.clone(),
                    is_next: e.is_next,
                }
            })
            .collect();
        Batch { items }
    }

    pub fn seq_len(&self) -> usize {
        self.items.first().map(|e| e.tokens.len()).unwrap_or(0)
    }
}

/// One epoch of seed-shuffled batches; ⌈N/batch_size⌉ batches covering every
/// example exactly once.
pub fn batch_iterator(
    examples: &[TrainingExample],
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size < 1 {
        return Err(Error::Contract("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    Ok(order
        .chunks(batch_size)
        .map(|chunk| {
            let selected: Vec<TrainingExample> =
                chunk.iter().map(|&i| examples[i].clone()).collect();
            Batch::from_examples(&selected)
        })
        .collect())
}

/// Deterministic train/eval split by shuffled assignment.
pub fn split_examples(
    examples: &[TrainingExample],
    eval_fraction: f64,
    seed: u64,
) -> (Vec<TrainingExample>, Vec<TrainingExample>) {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_eval = ((examples.len() as f64) * eval_fraction).round() as usize;
    let n_eval = n_eval.min(examples.len().saturating_sub(1));
    let eval = order[..n_eval].iter().map(|&i| examples[i].clone()).collect();
    let train = order[n_eval..].iter().map(|&i| examples[i].clone()).collect();
    (train, eval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::generate_synthetic_corpus;

    fn fixture() -> (String, Vocab) {
        let corpus = generate_synthetic_corpus(5, 200, 40).unwrap();
        let vocab = Vocab::build(&corpus, 64).unwrap();
        (corpus, vocab)
    }

    #[test]
    fn zero_mask_rate_masks_nothing() {
        let (corpus, vocab) = fixture();
        let params = MaskingParams {
            mask_rate: 0.0,
            ..MaskingParams::standard(64)
        };
        let examples = make_examples(&corpus, &vocab, 1, &params).unwrap();
        assert!(examples.iter().all(|e| e.masked_positions.is_empty()));
    }

    #[test]
    fn masked_positions_never_hit_special_tokens() {
        let (corpus, vocab) = fixture();
        let examples =
            make_examples(&corpus, &vocab, 2, &MaskingParams::standard(64)).unwrap();
        for e in &examples {
            for (&pos, &orig) in e.masked_positions.iter().zip(&e.original_ids) {
                assert!(pos < e.tokens.len());
                assert!(orig != CLS_ID && orig != SEP_ID && orig != PAD_ID);
            }
            assert_eq!(e.tokens[0], CLS_ID);
            assert!(e.tokens.len() <= 64);
        }
    }

    #[test]
    fn long_sentences_truncate_and_flag() {
        let (corpus, vocab) = fixture();
        let examples =
            make_examples(&corpus, &vocab, 3, &MaskingParams::standard(12)).unwrap();
        assert!(examples.iter().any(|e| e.truncated));
        assert!(examples.iter().all(|e| e.tokens.len() <= 12));
    }

    #[test]
    fn batches_partition_an_epoch() {
        let (corpus, vocab) = fixture();
        let examples =
            make_examples(&corpus, &vocab, 4, &MaskingParams::standard(64)).unwrap();
        let batches = batch_iterator(&examples, 7, 9).unwrap();
        assert_eq!(batches.len(), examples.len().div_ceil(7));
        let covered: usize = batches.iter().map(|b| b.items.len()).sum();
        assert_eq!(covered, examples.len());
    }

    #[test]
    fn identical_length_batch_has_no_padding() {
        let e = TrainingExample {
            tokens: vec![CLS_ID, 5, SEP_ID, 6, SEP_ID],
            segments: vec![0, 0, 0, 1, 1],
            masked_positions: vec![],
            original_ids: vec![],
            is_next: true,
            truncated: false,
        };
        let batch = Batch::from_examples(&[e.clone(), e]);
        for item in &batch.items {
            assert!(item.attention_mask.iter().all(|&m| m));
            assert!(!item.tokens.contains(&PAD_ID));
        }
    }

    #[test]
    fn same_seed_same_batches() {
        let (corpus, vocab) = fixture();
        let examples =
            make_examples(&corpus, &vocab, 5, &MaskingParams::standard(64)).unwrap();
        let a = batch_iterator(&examples, 4, 17).unwrap();
        let b = batch_iterator(&examples, 4, 17).unwrap();
        assert_eq!(a, b);
    }
}
