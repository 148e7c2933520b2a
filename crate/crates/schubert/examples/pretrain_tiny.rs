//! Minutes-scale MLM + NSP pre-training on a synthetic corpus.
//!
//! Builds a seeded Markov-chain corpus, trains the toy configuration from a
//! fresh initialization, and reports the loss trajectory plus a held-out
//! evaluation. Run with `cargo run --release --example pretrain_tiny`.

use schubert::{
    evaluate_mlm, generate_synthetic_corpus, init_model, make_examples, split_examples, train,
    ArchConfig, MaskingParams, Real, TrainConfig, Vocab,
};

fn main() -> schubert::Result<()> {
    let config = ArchConfig::toy();
    let corpus = generate_synthetic_corpus(7, 1500, 160)?;
    let vocab = Vocab::build(&corpus, config.vocab_size)?;
    let examples = make_examples(
        &corpus,
        &vocab,
        7,
        &MaskingParams::standard(config.max_positions),
    )?;
    let (train_set, eval_set) = split_examples(&examples, 0.1, 7);
    println!(
        "corpus: {} sentences, vocab {} ids, {} train / {} eval examples",
        1500,
        vocab.size(),
        train_set.len(),
        eval_set.len()
    );

    let mut weights = init_model(&config, 7)?;
    let uniform = (config.vocab_size as Real).ln();
    let start = evaluate_mlm(&weights, &config, &eval_set, 64)?;
    println!(
        "before training: eval mlm {:.4} (uniform baseline ln V = {:.4})",
        start.mlm, uniform
    );

    let started = std::time::Instant::now();
    let steps = 400;
    let curve = train(&mut weights, &config, &train_set, &TrainConfig::new(steps, 7))?;
    for row in curve.iter().step_by(50) {
        println!(
            "step {:>4}: mlm {:.4}, nsp {:.4}, total {:.4}",
            row.step, row.mlm, row.nsp, row.total
        );
    }
    let elapsed = started.elapsed();

    let end = evaluate_mlm(&weights, &config, &eval_set, 64)?;
    println!(
        "after {steps} steps ({:.1}s): eval mlm {:.4}, nsp {:.4}",
        elapsed.as_secs_f64(),
        end.mlm,
        end.nsp
    );
    println!(
        "improvement over uniform baseline: {:.1}%",
        100.0 * (1.0 - end.mlm / uniform)
    );
    Ok(())
}
