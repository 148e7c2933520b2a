#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use schubert::data::PaddedExample;
use schubert::gradcheck::{central_difference, max_relative_error};
use schubert::{
    generate_synthetic_corpus, make_examples, ArchConfig, MaskingParams, Real, Tape, Tensor,
    TensorRef, TrainingExample, Vocab,
};

/// Independent f64 reference implementations used as oracles for the
/// per-op finite-difference checks. None of this code touches the tape.
pub mod refimpl {
    pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    pub fn softmax(x: &[f64]) -> Vec<f64> {
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / sum).collect()
    }

    pub fn layer_norm_unit(x: &[f64], eps: f64) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        x.iter().map(|v| (v - mean) * inv).collect()
    }

    pub fn gelu(x: f64) -> f64 {
        let u = (2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x);
        0.5 * x * (1.0 + u.tanh())
    }

    pub fn cross_entropy(logits: &[f64], targets: &[usize], vocab: usize) -> f64 {
        if targets.is_empty() {
            return 0.0;
        }
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &logits[i * vocab..(i + 1) * vocab];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[t];
        }
        total / targets.len() as f64
    }
}

/// Central differences evaluated entirely in f64, for the tight per-op
/// oracle tolerances where f32 cancellation would drown the signal.
pub fn central_difference_f64<F>(mut f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = f(&probe);
        probe[i] = orig - step;
        let minus = f(&probe);
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Max relative error between an f32 analytic gradient and an f64 oracle.
pub fn max_rel_err_vs_f64(analytic: &[Real], oracle: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(oracle)
        .map(|(&a, &o)| {
            let a = a as f64;
            (a - o).abs() / a.abs().max(o.abs()).max(1.0)
        })
        .fold(0.0, f64::max)
}

pub fn upcast(x: &[Real]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: Real) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<Real> = (0..numel)
        .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) as Real * scale)
        .collect();
    Tensor::new(shape, data).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Check every input's tape gradient against a central finite difference of
/// the tape's own forward pass. The forward evaluation is the oracle here;
/// the reverse sweep is what gets validated.
pub fn check_grads_against_fd<F>(inputs: &[Tensor], tol: Real, step: Real, build: F)
where
    F: Fn(&mut Tape, &[TensorRef]) -> schubert::Result<TensorRef>,
{
    let mut tape = Tape::new();
    let refs: Vec<TensorRef> = inputs.iter().map(|t| tape.param(t).unwrap()).collect();
    let loss = build(&mut tape, &refs).unwrap();
    assert_eq!(tape.value(loss).len(), 1, "gradcheck losses must be scalar");
    let grads = tape.backward(loss).unwrap();

    for (i, input) in inputs.iter().enumerate() {
        let zeros = vec![0.0; input.numel()];
        let analytic = grads.get(refs[i]).unwrap_or(&zeros);
        let evaluate = |values: &[Real]| -> Real {
            let mut probe: Vec<Tensor> = inputs.to_vec();
            probe[i] = Tensor::new(input.shape().to_vec(), values.to_vec()).unwrap();
            let mut tape = Tape::new();
            let refs: Vec<TensorRef> = probe.iter().map(|t| tape.param(t).unwrap()).collect();
            let loss = build(&mut tape, &refs).unwrap();
            tape.scalar_value(loss)
        };
        let numeric = central_difference(evaluate, input.data(), step);
        let err = max_relative_error(analytic, &numeric);
        assert!(
            err <= tol,
            "input {i}: max relative gradient error {err} exceeds {tol}"
        );
    }
}

pub fn rel_diff(a: Real, b: Real) -> Real {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

pub fn max_tensor_rel_diff(a: &Tensor, b: &Tensor) -> Real {
    assert_eq!(a.shape(), b.shape(), "comparing mismatched shapes");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| rel_diff(x, y))
        .fold(0.0, Real::max)
}

/// Two-layer, hidden-8 architecture for fast whole-model checks.
pub fn tiny_arch() -> ArchConfig {
    ArchConfig::uniform(2, 8, 2, 4, 4, 16, 32, 16)
}

/// Random small heterogeneous architecture.
pub fn random_arch(rng: &mut ChaCha8Rng) -> ArchConfig {
    let layers = rng.gen_range(1..=3);
    ArchConfig {
        layers,
        hidden_size: rng.gen_range(4..=10),
        heads: (0..layers).map(|_| rng.gen_range(1..=3)).collect(),
        key_size: (0..layers).map(|_| rng.gen_range(2..=5)).collect(),
        value_size: (0..layers).map(|_| rng.gen_range(2..=5)).collect(),
        ff_size: (0..layers).map(|_| rng.gen_range(3..=12)).collect(),
        vocab_size: rng.gen_range(12..=40),
        max_positions: 12,
        segment_types: 2,
        layer_norm_eps: 1e-12,
    }
}

/// Random input example (tokens, segments, mask, masked positions) for a
/// given architecture.
pub fn random_example(rng: &mut ChaCha8Rng, config: &ArchConfig) -> PaddedExample {
    let seq = rng.gen_range(4..=config.max_positions.min(10));
    let tokens: Vec<usize> = (0..seq).map(|_| rng.gen_range(0..config.vocab_size)).collect();
    let segments: Vec<usize> = (0..seq).map(|i| usize::from(i > seq / 2)).collect();
    let real_len = seq - usize::from(rng.gen_bool(0.3));
    let attention_mask: Vec<bool> = (0..seq).map(|i| i < real_len).collect();
    let n_masked = rng.gen_range(0..=2.min(real_len - 1));
    let masked_positions: Vec<usize> = (0..n_masked).map(|_| rng.gen_range(0..real_len)).collect();
    let original_ids: Vec<usize> = masked_positions
        .iter()
        .map(|_| rng.gen_range(0..config.vocab_size))
        .collect();
    PaddedExample {
        tokens,
        segments,
        attention_mask,
        masked_positions,
        original_ids,
        is_next: rng.gen_bool(0.5),
    }
}

/// Corpus, vocab and examples for the toy training runs.
pub fn toy_training_data(
    seed: u64,
    sentences: usize,
    words: usize,
    config: &ArchConfig,
) -> (Vocab, Vec<TrainingExample>) {
    let corpus = generate_synthetic_corpus(seed, sentences, words).unwrap();
    let vocab = Vocab::build(&corpus, config.vocab_size).unwrap();
    let examples = make_examples(
        &corpus,
        &vocab,
        seed,
        &MaskingParams::standard(config.max_positions),
    )
    .unwrap();
    (vocab, examples)
}
