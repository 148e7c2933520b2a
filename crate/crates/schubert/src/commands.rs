//! The workflows behind the CLI subcommands, callable as library functions so
//! tests and examples can drive them directly.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::autograd::Real;
use crate::cost::{compute_betas, count_flops, count_params, CountFlags, Objective};
use crate::data::{
    generate_synthetic_corpus, make_examples, split_examples, MaskingParams, TrainingExample,
    Vocab,
};
use crate::error::{Error, Result};
use crate::manifest::RunManifest;
use crate::model::{init_model, load_checkpoint, save_checkpoint, ArchConfig};
use crate::prune::{run_schedule, Penalty, PruneConfig};
use crate::report::{records_from_jsonl, records_to_jsonl, ReportTable};
use crate::train::{evaluate_mlm, train, StepLoss, TrainConfig};

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| {
        Error::InvalidConfig(format!("cannot read {}: {e}", path.display()))
    })
}

fn load_config(path: &Path) -> Result<ArchConfig> {
    ArchConfig::from_json(&read_to_string(path)?)
}

fn prepare_examples(
    corpus_path: &Path,
    config: &ArchConfig,
    seed: u64,
) -> Result<(Vocab, Vec<TrainingExample>)> {
    let corpus = read_to_string(corpus_path)?;
    let vocab = Vocab::build(&corpus, config.vocab_size)?;
    let examples = make_examples(
        &corpus,
        &vocab,
        seed,
        &MaskingParams::standard(config.max_positions),
    )?;
    Ok((vocab, examples))
}

fn loss_curve_csv(curve: &[StepLoss]) -> String {
    let mut out = String::from("step,mlm,nsp,total\n");
    for row in curve {
        let _ = writeln!(out, "{},{},{},{}", row.step, row.mlm, row.nsp, row.total);
    }
    out
}

#[derive(Debug, Clone)]
pub struct PretrainOpts {
    pub config: PathBuf,
    pub corpus: PathBuf,
    pub steps: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub lr: Real,
    pub dropout: Real,
    pub out: PathBuf,
}

/// Train from a fresh initialization and write `checkpoint.schu`,
/// `loss_curve.csv` and `manifest.json` under the output directory.
pub fn pretrain(opts: &PretrainOpts) -> Result<()> {
    let mut manifest = RunManifest::new("pretrain", opts.seed);
    manifest.record_input(&opts.config)?;
    manifest.record_input(&opts.corpus)?;

    let config = load_config(&opts.config)?;
    let (_, examples) = prepare_examples(&opts.corpus, &config, opts.seed)?;
    let mut weights = init_model(&config, opts.seed)?;

    let mut train_config = TrainConfig::new(opts.steps, opts.seed);
    train_config.batch_size = opts.batch_size;
    train_config.adam.lr = opts.lr;
    train_config.dropout = opts.dropout;
    let curve = train(&mut weights, &config, &examples, &train_config)?;

    std::fs::create_dir_all(&opts.out)?;
    let ckpt_path = opts.out.join("checkpoint.schu");
    save_checkpoint(&weights, &config, &ckpt_path)?;
    let curve_path = opts.out.join("loss_curve.csv");
    std::fs::write(&curve_path, loss_curve_csv(&curve))?;
    manifest.record_output(&ckpt_path);
    manifest.record_output(&curve_path);
    manifest.finish_and_write(&opts.out.join("manifest.json"))?;

    if let Some(last) = curve.last() {
        println!(
            "pretrained {} steps: mlm {:.4}, nsp {:.4}, total {:.4}",
            curve.len(),
            last.mlm,
            last.nsp,
            last.total
        );
    } else {
        println!("wrote freshly initialized checkpoint (0 steps)");
    }
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct PruneOverrides {
    pub gamma: Option<Real>,
    pub eta: Option<f64>,
    pub rounds: Option<usize>,
    pub objective: Option<Objective>,
    pub penalty: Option<Penalty>,
    pub regularize_steps: Option<usize>,
    pub finetune_steps: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct PruneOpts {
    pub checkpoint: PathBuf,
    pub corpus: PathBuf,
    pub prune_config: Option<PathBuf>,
    pub overrides: PruneOverrides,
    pub out: PathBuf,
}

/// Run the full pruning schedule on a checkpoint and write `pruned.schu`,
/// `rounds.jsonl`, `final_config.json` and `manifest.json`.
pub fn prune(opts: &PruneOpts) -> Result<()> {
    let mut prune_config = match &opts.prune_config {
        Some(path) => {
            let cfg: PruneConfig = serde_json::from_str(&read_to_string(path)?)?;
            cfg
        }
        None => PruneConfig::default(),
    };
    let o = &opts.overrides;
    if let Some(v) = o.gamma {
        prune_config.gamma = v;
    }
    if let Some(v) = o.eta {
        prune_config.target_fraction = v;
    }
    if let Some(v) = o.rounds {
        prune_config.rounds = v;
    }
    if let Some(v) = o.objective {
        prune_config.objective = v;
    }
    if let Some(v) = o.penalty {
        prune_config.penalty = v;
    }
    if let Some(v) = o.regularize_steps {
        prune_config.regularize_steps = v;
    }
    if let Some(v) = o.finetune_steps {
        prune_config.finetune_steps = v;
    }
    if let Some(v) = o.seed {
        prune_config.seed = v;
    }
    prune_config.validate()?;

    let mut manifest = RunManifest::new("prune", prune_config.seed);
    manifest.record_input(&opts.checkpoint)?;
    manifest.record_input(&opts.corpus)?;
    if let Some(path) = &opts.prune_config {
        manifest.record_input(path)?;
    }

    let (weights, config) = load_checkpoint(&opts.checkpoint)?;
    let (_, examples) = prepare_examples(&opts.corpus, &config, prune_config.seed)?;
    let (train_examples, eval_examples) = split_examples(&examples, 0.1, prune_config.seed);

    let (final_weights, final_config, records) = run_schedule(
        weights,
        config,
        &prune_config,
        &train_examples,
        &eval_examples,
    )?;

    std::fs::create_dir_all(&opts.out)?;
    let ckpt_path = opts.out.join("pruned.schu");
    save_checkpoint(&final_weights, &final_config, &ckpt_path)?;
    let records_path = opts.out.join("rounds.jsonl");
    std::fs::write(&records_path, records_to_jsonl(&records)?)?;
    let config_path = opts.out.join("final_config.json");
    std::fs::write(&config_path, final_config.to_json())?;
    manifest.record_output(&ckpt_path);
    manifest.record_output(&records_path);
    manifest.record_output(&config_path);
    manifest.finish_and_write(&opts.out.join("manifest.json"))?;

    for record in &records {
        println!(
            "round {}: {} -> {} params ({} entries zeroed), mlm {:.4} -> {:.4}",
            record.round,
            record.params_before,
            record.params_after,
            record.removed.len(),
            record.mlm_loss_pre_finetune,
            record.mlm_loss_post_finetune
        );
    }
    println!("pruned checkpoint: {}", ckpt_path.display());
    Ok(())
}

/// Cost breakdown and normalized cost weights for a config file.
pub fn count(config_path: &Path, weights_only: bool, flops_seq_len: usize) -> Result<String> {
    let config = load_config(config_path)?;
    let flags = if weights_only {
        CountFlags::weights_only()
    } else {
        CountFlags::all()
    };
    let breakdown = count_params(&config, flags);
    let betas = compute_betas(&config, Objective::Params);
    let mut out = String::new();
    let _ = writeln!(out, "layers: {}, hidden: {}", config.layers, config.hidden_size);
    let _ = writeln!(out, "embedding params: {}", breakdown.embedding_params);
    for (i, l) in breakdown.layer_params.iter().enumerate() {
        let _ = writeln!(
            out,
            "layer {i}: attention {}, feed-forward {}",
            l.attention, l.feed_forward
        );
    }
    let _ = writeln!(out, "head params: {}", breakdown.head_params);
    let _ = writeln!(out, "total params: {}", breakdown.total_params);
    let _ = writeln!(
        out,
        "flops per forward pass at seq {}: {}",
        flops_seq_len,
        count_flops(&config, flops_seq_len)
    );
    let _ = writeln!(
        out,
        "normalized betas (layer 0): a {:.4}, h {:.4}, k {:.4}, v {:.4}, f {:.6}",
        betas.beta_heads[0], betas.beta_hidden, betas.beta_key[0], betas.beta_value[0], betas.beta_ff[0]
    );
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

/// Render per-layer dimension tables from round records (`.jsonl`), a stored
/// config (`.json`), or an existing report (`.csv` / report JSON), in the
/// requested format.
pub fn report(input: &Path, format: ReportFormat) -> Result<String> {
    let text = read_to_string(input)?;
    let ext = input
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    let table = match ext.as_str() {
        "jsonl" => ReportTable::from_records(&records_from_jsonl(&text)?),
        "csv" => ReportTable::from_csv(&text)?,
        _ => match ArchConfig::from_json(&text) {
            Ok(config) => ReportTable::from_config(&config),
            Err(_) => ReportTable::from_json(&text)?,
        },
    };
    match format {
        ReportFormat::Csv => Ok(table.to_csv()),
        ReportFormat::Json => table.to_json(),
    }
}

#[derive(Debug, Clone)]
pub struct SweepOpts {
    pub config: PathBuf,
    pub ell_list: Vec<usize>,
    pub budget: u64,
    pub corpus: PathBuf,
    pub steps: usize,
    pub seed: u64,
}

/// For each requested depth, pick the hidden size that meets the parameter
/// budget, pre-train briefly at toy scale, and report train/eval MLM losses.
/// Rows whose budget is unreachable are marked infeasible; the sweep
/// continues.
pub fn sweep_layers(opts: &SweepOpts) -> Result<String> {
    let base = load_config(&opts.config)?;
    let corpus = read_to_string(&opts.corpus)?;
    let vocab = Vocab::build(&corpus, base.vocab_size)?;
    let examples = make_examples(
        &corpus,
        &vocab,
        opts.seed,
        &MaskingParams::standard(base.max_positions),
    )?;
    let (train_examples, eval_examples) = split_examples(&examples, 0.15, opts.seed);

    let mut out = String::from("ell,hidden,params,status,train_mlm,eval_mlm\n");
    for (row, &ell) in opts.ell_list.iter().enumerate() {
        if ell < 1 {
            let _ = writeln!(out, "{ell},,,infeasible,,");
            continue;
        }
        let with_h = |h: usize| ArchConfig {
            layers: ell,
            hidden_size: h,
            heads: vec![base.heads[0]; ell],
            key_size: vec![base.key_size[0]; ell],
            value_size: vec![base.value_size[0]; ell],
            ff_size: vec![base.ff_size[0]; ell],
            vocab_size: base.vocab_size,
            max_positions: base.max_positions,
            segment_types: base.segment_types,
            layer_norm_eps: base.layer_norm_eps,
        };
        let params_at = |h: usize| count_params(&with_h(h), CountFlags::all()).total_params;

        // Exact monotone search for the h whose count lands nearest the budget.
        let mut hi = 1usize;
        while params_at(hi) < opts.budget && hi < (1 << 22) {
            hi *= 2;
        }
        let mut lo = 1usize;
        let mut best = hi;
        let mut hi_b = hi;
        while lo <= hi_b {
            let mid = (lo + hi_b) / 2;
            if params_at(mid) >= opts.budget {
                best = mid;
                if mid == 0 {
                    break;
                }
                hi_b = mid - 1;
            } else {
                lo = mid + 1;
            }
        }
        let candidates = [best.saturating_sub(1).max(1), best];
        let h = *candidates
            .iter()
            .min_by_key(|&&h| params_at(h).abs_diff(opts.budget))
            .unwrap();
        let params = params_at(h);
        let rel = params.abs_diff(opts.budget) as f64 / opts.budget as f64;
        if rel > 0.02 {
            let _ = writeln!(out, "{ell},{h},{params},infeasible,,");
            continue;
        }

        let config = with_h(h);
        let mut weights = init_model(&config, opts.seed)?;
        let tc = TrainConfig::new(opts.steps, crate::prune::derive_seed(opts.seed, row as u64, 3));
        let curve = train(&mut weights, &config, &train_examples, &tc)?;
        let train_mlm = curve.last().map(|s| s.mlm).unwrap_or(0.0);
        let eval = evaluate_mlm(&weights, &config, &eval_examples, 64)?;
        let _ = writeln!(out, "{ell},{h},{params},ok,{train_mlm},{}", eval.mlm);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct GenCorpusOpts {
    pub seed: u64,
    pub sentences: usize,
    pub words: usize,
    pub out: PathBuf,
}

/// Write a seeded synthetic corpus to a file.
pub fn gen_corpus(opts: &GenCorpusOpts) -> Result<()> {
    let text = generate_synthetic_corpus(opts.seed, opts.sentences, opts.words)?;
    if let Some(parent) = opts.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(&opts.out, text)?;
    println!(
        "wrote {} sentences over ~{} words to {}",
        opts.sentences,
        opts.words,
        opts.out.display()
    );
    Ok(())
}
