use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const SYLLABLES: [&str; 24] = [
    "ba", "be", "bi", "bo", "da", "de", "di", "do", "ka", "ke", "ki", "ko", "la", "le", "li",
    "lo", "ma", "me", "mi", "mo", "ra", "re", "ri", "ro",
];

fn word_for(index: usize) -> String {
    let n = SYLLABLES.len();
    let mut w = String::new();
    w.push_str(SYLLABLES[index % n]);
    w.push_str(SYLLABLES[(index / n) % n]);
    if index >= n * n {
        w.push_str(SYLLABLES[(index / (n * n)) % n]);
    }
    w
}

/// Draw skewed toward low indices so word frequencies are clearly non-uniform.
fn skewed_index(rng: &mut ChaCha8Rng, n: usize) -> usize {
    let u: f64 = rng.gen();
    ((u * u * n as f64) as usize).min(n - 1)
}

/// Seeded Markov-chain text: `vocab_hint` synthetic words, each with a small
/// set of preferred successors, so masked-token prediction has learnable
/// structure well below the uniform-distribution baseline. One sentence per
/// line; a blank line separates documents.
pub fn generate_synthetic_corpus(seed: u64, n_sentences: usize, vocab_hint: usize) -> Result<String> {
    if n_sentences < 2 {
        return Err(Error::InvalidConfig(
            "need at least two sentences to form next-sentence pairs".into(),
        ));
    }
    let n_words = vocab_hint.max(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Three preferred successors per word, drawn once.
    let successors: Vec<[usize; 3]> = (0..n_words)
        .map(|_| {
            [
                skewed_index(&mut rng, n_words),
                skewed_index(&mut rng, n_words),
                skewed_index(&mut rng, n_words),
            ]
        })
        .collect();

    let mut out = String::new();
    let mut sentences_in_doc = 0usize;
    let mut doc_len = 4 + rng.gen_range(0..5);
    for _ in 0..n_sentences {
        if sentences_in_doc == doc_len {
            out.push('\n');
            sentences_in_doc = 0;
            doc_len = 4 + rng.gen_range(0..5);
        }
        let len = rng.gen_range(6..=12);
        let mut word = skewed_index(&mut rng, n_words);
        let mut sentence = Vec::with_capacity(len);
        sentence.push(word_for(word));
        for _ in 1..len {
            let u: f64 = rng.gen();
            word = if u < 0.45 {
                successors[word][0]
            } else if u < 0.75 {
                successors[word][1]
            } else if u < 0.90 {
                successors[word][2]
            } else {
                skewed_index(&mut rng, n_words)
            };
            sentence.push(word_for(word));
        }
        out.push_str(&sentence.join(" "));
        out.push('\n');
        sentences_in_doc += 1;
    }
    Ok(out)
}

/// Parse the corpus file format into documents of sentences.
pub fn parse_documents(corpus: &str) -> Vec<Vec<String>> {
    let mut docs = Vec::new();
    let mut current = Vec::new();
    for line in corpus.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                docs.push(std::mem::take(&mut current));
            }
        } else {
            current.push(line.to_string());
        }
    }
    if !current.is_empty() {
        docs.push(current);
    }
    docs
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn same_seed_same_corpus() {
        let a = generate_synthetic_corpus(3, 100, 50).unwrap();
        let b = generate_synthetic_corpus(3, 100, 50).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_corpus(4, 100, 50).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn unigram_entropy_below_uniform() {
        let text = generate_synthetic_corpus(1, 2000, 80).unwrap();
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut total = 0usize;
        for w in text.split_whitespace() {
            *counts.entry(w).or_insert(0) += 1;
            total += 1;
        }
        let entropy: f64 = counts
            .values()
            .map(|&c| {
                let p = c as f64 / total as f64;
                -p * p.ln()
            })
            .sum();
        assert!(
            entropy < (80f64).ln(),
            "entropy {entropy} not below ln(80) = {}",
            (80f64).ln()
        );
    }

    #[test]
    fn documents_are_blank_line_separated() {
        let text = generate_synthetic_corpus(9, 40, 30).unwrap();
        let docs = parse_documents(&text);
        assert!(docs.len() > 1);
        assert_eq!(docs.iter().map(|d| d.len()).sum::<usize>(), 40);
    }

    #[test]
    fn too_few_sentences_rejected() {
        assert!(generate_synthetic_corpus(0, 1, 10).is_err());
    }
}
