//! Pruning-engine oracles: attachment identity, zero-equals-removed
//! equivalence, gradient flow through zeroed slices, penalty algebra,
//! proximal-vs-subgradient behavior, brute-force truncation checks and the
//! schedule's accounting.

mod common;

use common::{max_tensor_rel_diff, random_arch, random_example, rng, tiny_arch, toy_training_data};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use schubert::data::Batch;
use schubert::gradcheck::central_difference;
use schubert::{
    attach_prune_params, compute_betas, count_params, fold_and_extract, init_model,
    marginal_savings, mlm_nsp_loss, mlm_nsp_loss_with_grads, model_logits, prox_step,
    run_schedule, select_truncation, subgradient_step, ArchConfig, CountFlags, Objective,
    Penalty, PruneConfig, PruneSite, PruneState, Real, Tensor,
};

fn fresh_state(config: &ArchConfig) -> PruneState {
    PruneState::new(config, compute_betas(config, Objective::Params))
}

fn toy_batch(config: &ArchConfig, seed: u64, n: usize) -> Batch {
    let (_, examples) = toy_training_data(seed, 60, 18, config);
    Batch::from_examples(&examples[..n.min(examples.len())])
}

/// Random masks leaving at least one survivor per vector, plus random
/// surviving α values.
fn randomize_state(state: &mut PruneState, rng: &mut ChaCha8Rng) {
    fn scramble(values: &mut schubert::prune::AlphaVector, rng: &mut ChaCha8Rng) {
        let n = values.len();
        values.update(|_, _| (rng.gen::<f64>() * 1.6 - 0.3) as Real);
        if n > 1 {
            // Mask up to n-1 distinct entries so one always survives.
            let n_mask = rng.gen_range(0..n);
            let mut indices: Vec<usize> = (0..n).collect();
            for _ in 0..n_mask {
                let pick = rng.gen_range(0..indices.len());
                let idx = indices.swap_remove(pick);
                values.mask_entry(idx);
            }
        }
    }
    scramble(&mut state.hidden, rng);
    for i in 0..state.heads.len() {
        scramble(&mut state.heads[i], rng);
        scramble(&mut state.keys[i], rng);
        scramble(&mut state.values[i], rng);
        scramble(&mut state.ffs[i], rng);
    }
}

#[test]
fn attachment_with_all_ones_is_the_identity() {
    let config = tiny_arch();
    let weights = init_model(&config, 70).unwrap();
    let state = fresh_state(&config);
    let batch = toy_batch(&config, 71, 4);
    let base = mlm_nsp_loss(&weights, &config, &batch).unwrap();
    let model = attach_prune_params(&weights, &config, &state).unwrap();
    let attached = model.loss(&state, &batch).unwrap();
    assert_eq!(base.total, attached.total, "identity attachment must be exact");
    assert_eq!(base.mlm, attached.mlm);
    assert_eq!(base.nsp, attached.nsp);
}

#[test]
fn gamma_zero_equals_plain_loss_and_negative_gamma_rejected() {
    let config = tiny_arch();
    let weights = init_model(&config, 72).unwrap();
    let state = fresh_state(&config);
    let batch = toy_batch(&config, 73, 3);
    let model = attach_prune_params(&weights, &config, &state).unwrap();
    let plain = mlm_nsp_loss(&weights, &config, &batch).unwrap();
    let reg = model.regularized_loss(&state, &batch, 0.0).unwrap();
    assert_eq!(reg.total, plain.total);
    assert_eq!(reg.penalty, 0.0);
    assert!(model.regularized_loss(&state, &batch, -0.1).is_err());
}

#[test]
fn zeroed_ff_alpha_makes_outputs_invariant_to_those_weights() {
    let config = ArchConfig::uniform(2, 8, 2, 4, 4, 6, 24, 12);
    let mut weights = init_model(&config, 74).unwrap();
    let mut state = fresh_state(&config);
    state.ffs[1].update(|i, v| if i == 2 { 0.0 } else { v });

    let mut r = rng(75);
    let item = random_example(&mut r, &config);
    let model = attach_prune_params(&weights, &config, &state).unwrap();
    let (before, _) = model.logits(&state, &item).unwrap();

    // Scribble over row 2 of D and column 2 of G in layer 1.
    {
        let h = config.hidden_size;
        let ff = &mut weights.layers[1].ff_in;
        for c in 0..h {
            ff.data_mut()[2 * h + c] = r.gen::<f32>() as Real * 5.0 - 2.5;
        }
        let f = config.ff_size[1];
        let g = &mut weights.layers[1].ff_out;
        for row in 0..h {
            g.data_mut()[row * f + 2] = r.gen::<f32>() as Real * 5.0 - 2.5;
        }
        let bias = &mut weights.layers[1].ff_in_bias;
        bias.data_mut()[2] = 9.9;
    }
    let model = attach_prune_params(&weights, &config, &state).unwrap();
    let (after, _) = model.logits(&state, &item).unwrap();
    assert_eq!(before, after, "zeroed ff unit must fully gate its weights");
}

#[test]
fn folded_zero_head_receives_zero_gradients() {
    // Zeroing every slice of head j (the folded form of α_a[j] = 0) must cut
    // gradient flow to all four of its tensors' slices.
    let config = ArchConfig::uniform(1, 8, 3, 4, 4, 8, 24, 12);
    let mut weights = init_model(&config, 76).unwrap();
    let (h, a, k, v) = (8usize, 3usize, 4usize, 4usize);
    let head = 1usize;
    {
        let l = &mut weights.layers[0];
        for kk in 0..k {
            for hh in 0..h {
                l.key.data_mut()[(kk * a + head) * h + hh] = 0.0;
                l.query.data_mut()[(kk * a + head) * h + hh] = 0.0;
            }
        }
        for vv in 0..v {
            for hh in 0..h {
                l.value.data_mut()[(vv * a + head) * h + hh] = 0.0;
            }
        }
        for hh in 0..h {
            for vv in 0..v {
                l.proj.data_mut()[(hh * v + vv) * a + head] = 0.0;
            }
        }
        for kk in 0..k {
            l.key_bias.data_mut()[head * k + kk] = 0.0;
            l.query_bias.data_mut()[head * k + kk] = 0.0;
        }
        for vv in 0..v {
            l.value_bias.data_mut()[head * v + vv] = 0.0;
        }
    }
    let batch = toy_batch(&config, 77, 3);
    weights.zero_grads();
    mlm_nsp_loss_with_grads(&mut weights, &config, &batch, None).unwrap();

    let l = &weights.layers[0];
    let head_grad_abs_sum: Real = (0..k)
        .flat_map(|kk| (0..h).map(move |hh| (kk, hh)))
        .map(|(kk, hh)| {
            l.key.grad().unwrap()[(kk * a + head) * h + hh].abs()
                + l.query.grad().unwrap()[(kk * a + head) * h + hh].abs()
        })
        .sum::<Real>()
        + (0..v)
            .flat_map(|vv| (0..h).map(move |hh| (vv, hh)))
            .map(|(vv, hh)| l.value.grad().unwrap()[(vv * a + head) * h + hh].abs())
            .sum::<Real>()
        + (0..h)
            .flat_map(|hh| (0..v).map(move |vv| (hh, vv)))
            .map(|(hh, vv)| l.proj.grad().unwrap()[(hh * v + vv) * a + head].abs())
            .sum::<Real>();
    assert_eq!(head_grad_abs_sum, 0.0, "zeroed head must get no gradient");

    // A live head still learns.
    let live_grad: Real = l.key.grad().unwrap()[(0 * a) * h..]
        .iter()
        .step_by(1)
        .take(h)
        .map(|g| g.abs())
        .sum();
    assert!(live_grad > 0.0);
}

#[test]
fn penalty_matches_closed_form_at_all_ones() {
    let config = tiny_arch();
    let weights = init_model(&config, 78).unwrap();
    let state = fresh_state(&config);
    let batch = toy_batch(&config, 79, 2);
    let gamma: Real = 0.37;
    let model = attach_prune_params(&weights, &config, &state).unwrap();
    let reg = model.regularized_loss(&state, &batch, gamma).unwrap();

    let cost = &state.cost;
    let mut expected = cost.beta_hidden * config.hidden_size as Real;
    for i in 0..config.layers {
        expected += cost.beta_heads[i] * config.heads[i] as Real
            + cost.beta_value[i] * config.value_size[i] as Real
            + cost.beta_key[i] * config.key_size[i] as Real
            + cost.beta_ff[i] * config.ff_size[i] as Real;
    }
    expected *= gamma;
    assert!(
        (reg.penalty - expected).abs() / expected < 1e-5,
        "penalty {} vs closed form {}",
        reg.penalty,
        expected
    );
    assert!((reg.total - (reg.data.total + reg.penalty)).abs() < 1e-4);
}

/// Flatten α into one vector for finite differences.
fn flatten_alphas(state: &PruneState) -> Vec<Real> {
    let mut out = state.hidden.values().to_vec();
    for i in 0..state.heads.len() {
        out.extend_from_slice(state.heads[i].values());
        out.extend_from_slice(state.keys[i].values());
        out.extend_from_slice(state.values[i].values());
        out.extend_from_slice(state.ffs[i].values());
    }
    out
}

fn unflatten_alphas(state: &mut PruneState, flat: &[Real]) {
    let mut cursor = 0usize;
    let mut take = |v: &mut schubert::prune::AlphaVector| {
        let n = v.len();
        let slice = &flat[cursor..cursor + n];
        v.update(|i, _| slice[i]);
        cursor += n;
    };
    take(&mut state.hidden);
    for i in 0..state.heads.len() {
        take(&mut state.heads[i]);
        take(&mut state.keys[i]);
        take(&mut state.values[i]);
        take(&mut state.ffs[i]);
    }
}

#[test]
fn alpha_gradient_matches_finite_differences_at_ones() {
    let config = ArchConfig::uniform(2, 6, 2, 3, 3, 8, 24, 12);
    let weights = init_model(&config, 80).unwrap();
    let batch = toy_batch(&config, 81, 2);
    let gamma: Real = 0.05;
    let state = fresh_state(&config);
    let model = attach_prune_params(&weights, &config, &state).unwrap();

    let (_, grads) = model
        .regularized_loss_and_grads(&state, &batch, Some(gamma))
        .unwrap();
    let mut analytic = grads.hidden.clone();
    for i in 0..config.layers {
        analytic.extend_from_slice(&grads.heads[i]);
        analytic.extend_from_slice(&grads.keys[i]);
        analytic.extend_from_slice(&grads.values[i]);
        analytic.extend_from_slice(&grads.ffs[i]);
    }

    let flat0 = flatten_alphas(&state);
    let numeric = central_difference(
        |flat| {
            let mut probe = fresh_state(&config);
            unflatten_alphas(&mut probe, flat);
            model.regularized_loss(&probe, &batch, gamma).unwrap().total
        },
        &flat0,
        1e-3,
    );
    let err = schubert::gradcheck::max_relative_error(&analytic, &numeric);
    assert!(err <= 1e-3, "d(loss)/dalpha error {err}");
}

#[test]
fn proximal_mode_produces_at_least_as_many_zeros_as_subgradient() {
    let config = ArchConfig::uniform(2, 8, 2, 4, 4, 8, 32, 16);
    let weights = init_model(&config, 82).unwrap();
    let (_, examples) = toy_training_data(83, 60, 18, &config);
    let batch = Batch::from_examples(&examples[..4]);
    // Strong enough that cumulative shrinkage lr·γ·β·steps crosses 1 even for
    // the cheapest dimension.
    let gamma: Real = 8.0;
    let lr: Real = 0.1;

    let count_zeros = |state: &PruneState| -> usize {
        flatten_alphas(state).iter().filter(|&&v| v == 0.0).count()
    };

    let validation_state = fresh_state(&config);
    let model = attach_prune_params(&weights, &config, &validation_state).unwrap();
    let mut prox_state = fresh_state(&config);
    let mut sub_state = fresh_state(&config);
    for _ in 0..20 {
        let (_, grads) = model
            .regularized_loss_and_grads(&prox_state, &batch, None)
            .unwrap();
        prox_step(&mut prox_state, &grads, gamma, lr);

        let (_, grads) = model
            .regularized_loss_and_grads(&sub_state, &batch, Some(gamma))
            .unwrap();
        subgradient_step(&mut sub_state, &grads, lr);
    }
    let (pz, sz) = (count_zeros(&prox_state), count_zeros(&sub_state));
    assert!(pz >= sz, "prox zeros {pz} < subgradient zeros {sz}");
    assert!(pz > 0, "proximal run should produce exact zeros at this gamma");
}

#[test]
fn shrinkage_below_threshold_count_is_monotone_in_gamma() {
    let config = ArchConfig::uniform(1, 8, 2, 4, 4, 8, 24, 12);
    let weights = init_model(&config, 84).unwrap();
    let batch = toy_batch(&config, 85, 3);
    let model = attach_prune_params(&weights, &config, &fresh_state(&config)).unwrap();

    let below_after_run = |gamma: Real, threshold: Real| -> usize {
        let mut state = fresh_state(&config);
        for _ in 0..10 {
            let (_, grads) = model
                .regularized_loss_and_grads(&state, &batch, None)
                .unwrap();
            prox_step(&mut state, &grads, gamma, 0.02);
        }
        flatten_alphas(&state)
            .iter()
            .filter(|v| v.abs() < threshold)
            .count()
    };
    for threshold in [0.25 as Real, 0.5, 0.9] {
        let counts: Vec<usize> = [0.0 as Real, 0.05, 0.2, 1.0]
            .iter()
            .map(|&g| below_after_run(g, threshold))
            .collect();
        for pair in counts.windows(2) {
            assert!(
                pair[1] >= pair[0],
                "shrinkage not monotone in gamma at threshold {threshold}: {counts:?}"
            );
        }
    }
}

/// Independent greedy reimplementation that recounts the whole config from
/// scratch at every prefix instead of accumulating marginals.
fn brute_force_selection(
    state: &PruneState,
    config: &ArchConfig,
    target: u64,
) -> Result<Vec<PruneSite>, u64> {
    let mut candidates: Vec<(usize, PruneSite)> = state
        .all_sites()
        .into_iter()
        .enumerate()
        .filter(|(_, s)| !state.is_masked(*s))
        .collect();
    candidates.sort_by(|(ia, a), (ib, b)| {
        state
            .site_value(*a)
            .abs()
            .total_cmp(&state.site_value(*b).abs())
            .then(ia.cmp(ib))
    });

    let full = count_params(config, CountFlags::all()).total_params;
    let mut taken: Vec<PruneSite> = Vec::new();
    let mut reduced = config.clone();
    let mut survivors = (
        state.hidden.survivors(),
        state.heads.iter().map(|v| v.survivors()).collect::<Vec<_>>(),
        state.keys.iter().map(|v| v.survivors()).collect::<Vec<_>>(),
        state.values.iter().map(|v| v.survivors()).collect::<Vec<_>>(),
        state.ffs.iter().map(|v| v.survivors()).collect::<Vec<_>>(),
    );
    if target == 0 {
        return Ok(taken);
    }
    for (_, site) in candidates {
        let s = match site {
            PruneSite::Hidden { .. } => &mut survivors.0,
            PruneSite::Head { layer, .. } => &mut survivors.1[layer],
            PruneSite::Key { layer, .. } => &mut survivors.2[layer],
            PruneSite::Value { layer, .. } => &mut survivors.3[layer],
            PruneSite::Ff { layer, .. } => &mut survivors.4[layer],
        };
        if *s <= 1 {
            continue;
        }
        *s -= 1;
        match site {
            PruneSite::Hidden { .. } => reduced.hidden_size -= 1,
            PruneSite::Head { layer, .. } => reduced.heads[layer] -= 1,
            PruneSite::Key { layer, .. } => reduced.key_size[layer] -= 1,
            PruneSite::Value { layer, .. } => reduced.value_size[layer] -= 1,
            PruneSite::Ff { layer, .. } => reduced.ff_size[layer] -= 1,
        }
        taken.push(site);
        // Whole-config recount, not incremental accumulation.
        let saved = full - count_params(&reduced, CountFlags::all()).total_params;
        if saved >= target {
            return Ok(taken);
        }
    }
    Err(full - count_params(&reduced, CountFlags::all()).total_params)
}

#[test]
fn truncation_matches_brute_force_on_small_instances() {
    let mut r = rng(86);
    for trial in 0..40 {
        let config = ArchConfig {
            layers: 1,
            hidden_size: r.gen_range(2..=3),
            heads: vec![r.gen_range(1..=2)],
            key_size: vec![r.gen_range(1..=2)],
            value_size: vec![r.gen_range(1..=2)],
            ff_size: vec![r.gen_range(2..=3)],
            vocab_size: r.gen_range(5..=9),
            max_positions: 6,
            segment_types: 2,
            layer_norm_eps: 1e-12,
        };
        let mut state = fresh_state(&config);
        // Quantized values provoke ties; the tie-break must agree too.
        let quantize = |rng: &mut ChaCha8Rng| ((rng.gen::<f64>() * 5.0).round() / 5.0) as Real;
        state.hidden.update(|_, _| quantize(&mut r));
        state.heads[0].update(|_, _| quantize(&mut r));
        state.keys[0].update(|_, _| quantize(&mut r));
        state.values[0].update(|_, _| quantize(&mut r));
        state.ffs[0].update(|_, _| quantize(&mut r));

        let all_ones = ArchConfig::uniform(
            1,
            1,
            1,
            1,
            1,
            1,
            config.vocab_size,
            config.max_positions,
        );
        let achievable = count_params(&config, CountFlags::all()).total_params
            - count_params(&all_ones, CountFlags::all()).total_params;
        let target = r.gen_range(0..=achievable + achievable / 4 + 1);

        let got = select_truncation(&state, &config, Objective::Params, target, 1);
        let expect = brute_force_selection(&state, &config, target);
        match (got, expect) {
            (Ok(a), Ok(b)) => assert_eq!(a, b, "trial {trial} target {target}"),
            (Err(schubert::Error::Infeasible { achievable: a, .. }), Err(b)) => {
                assert_eq!(a, b, "trial {trial} achievable mismatch")
            }
            (g, e) => panic!("trial {trial}: mismatch {g:?} vs {e:?}"),
        }
    }
}

#[test]
fn masked_and_extracted_models_agree_on_logits() {
    let mut r = rng(87);
    for trial in 0..8 {
        let config = random_arch(&mut r);
        let weights = init_model(&config, 100 + trial).unwrap();
        let mut state = fresh_state(&config);
        randomize_state(&mut state, &mut r);

        let item = random_example(&mut r, &config);
        let model = attach_prune_params(&weights, &config, &state).unwrap();
        let (masked_logits, masked_nsp) = model.logits(&state, &item).unwrap();
        let (extracted, new_config) = fold_and_extract(&weights, &config, &state).unwrap();
        let (ex_logits, ex_nsp) = model_logits(&extracted, &new_config, &item).unwrap();

        let diff = max_tensor_rel_diff(&masked_logits, &ex_logits);
        assert!(diff <= 1e-5, "trial {trial}: logits diverge by {diff}");
        let diff = max_tensor_rel_diff(&masked_nsp, &ex_nsp);
        assert!(diff <= 1e-5, "trial {trial}: NSP logits diverge by {diff}");
    }
}

#[test]
fn extraction_count_matches_sum_of_replayed_marginals() {
    let mut r = rng(88);
    let config = ArchConfig::uniform(2, 8, 2, 4, 4, 8, 32, 16);
    let state_cost = compute_betas(&config, Objective::Params);
    let mut state = PruneState::new(&config, state_cost);
    state.hidden.update(|_, _| (r.gen::<f64>()) as Real);
    state.ffs[0].update(|_, _| (r.gen::<f64>()) as Real);

    let before = count_params(&config, CountFlags::all()).total_params;
    let target = 900u64;
    let sites = select_truncation(&state, &config, Objective::Params, target, 1).unwrap();

    // Replay the removal sequence through the public marginal-savings API.
    let mut replay = config.clone();
    let mut total_saved = 0u64;
    for site in &sites {
        let dim = site.dimension();
        total_saved +=
            marginal_savings(&replay, dim, Objective::Params, CountFlags::all(), 1).unwrap();
        replay = match dim {
            schubert::Dimension::Hidden => {
                let mut c = replay;
                c.hidden_size -= 1;
                c
            }
            schubert::Dimension::Heads { layer } => {
                let mut c = replay;
                c.heads[layer] -= 1;
                c
            }
            schubert::Dimension::KeySize { layer } => {
                let mut c = replay;
                c.key_size[layer] -= 1;
                c
            }
            schubert::Dimension::ValueSize { layer } => {
                let mut c = replay;
                c.value_size[layer] -= 1;
                c
            }
            schubert::Dimension::FfSize { layer } => {
                let mut c = replay;
                c.ff_size[layer] -= 1;
                c
            }
        };
    }
    assert!(total_saved >= target);

    let weights = init_model(&config, 89).unwrap();
    for site in &sites {
        state.mask_site(*site);
    }
    let (_, new_config) = fold_and_extract(&weights, &config, &state).unwrap();
    let after = count_params(&new_config, CountFlags::all()).total_params;
    assert_eq!(after, before - total_saved);
}

#[test]
fn identity_fold_keeps_weights_bitwise() {
    let config = tiny_arch();
    let weights = init_model(&config, 90).unwrap();
    let state = fresh_state(&config);
    let (extracted, new_config) = fold_and_extract(&weights, &config, &state).unwrap();
    assert_eq!(config, new_config);
    assert_eq!(weights, extracted);
}

#[test]
fn schedule_with_zero_target_keeps_config_and_is_deterministic() {
    let config = ArchConfig::uniform(2, 8, 2, 4, 4, 8, 48, 16);
    let (_, examples) = toy_training_data(91, 80, 20, &config);
    let (train_ex, eval_ex) = schubert::split_examples(&examples, 0.2, 91);
    let weights = init_model(&config, 92).unwrap();

    let prune_config = PruneConfig {
        gamma: 0.02,
        target_fraction: 0.0,
        rounds: 2,
        regularize_steps: 3,
        finetune_steps: 2,
        seed: 93,
        batch_size: 4,
        ..PruneConfig::default()
    };
    let (_, final_config, records) = run_schedule(
        weights.clone(),
        config.clone(),
        &prune_config,
        &train_ex,
        &eval_ex,
    )
    .unwrap();
    assert_eq!(final_config, config);
    assert!(records.iter().all(|r| r.removed.is_empty()));
    assert!(records.iter().all(|r| r.params_before == r.params_after));

    // Determinism: an identical second run produces identical records.
    let (_, _, records2) = run_schedule(
        weights,
        config.clone(),
        &prune_config,
        &train_ex,
        &eval_ex,
    )
    .unwrap();
    let a = serde_json::to_string(&records).unwrap();
    let b = serde_json::to_string(&records2).unwrap();
    assert_eq!(a, b);
}

#[test]
fn schedule_removes_toward_target_with_exact_accounting() {
    let config = ArchConfig::uniform(2, 10, 2, 4, 4, 12, 48, 16);
    let (_, examples) = toy_training_data(94, 80, 20, &config);
    let (train_ex, eval_ex) = schubert::split_examples(&examples, 0.2, 94);
    let weights = init_model(&config, 95).unwrap();

    let prune_config = PruneConfig {
        gamma: 0.05,
        target_fraction: 0.25,
        rounds: 2,
        penalty: Penalty::Prox,
        regularize_steps: 4,
        finetune_steps: 3,
        seed: 96,
        batch_size: 4,
        ..PruneConfig::default()
    };
    let original = count_params(&config, CountFlags::all()).total_params;
    let (final_weights, final_config, records) =
        run_schedule(weights, config, &prune_config, &train_ex, &eval_ex).unwrap();

    // Records' own accounting must match the cost model recomputed from the
    // surviving configs.
    let mut prev = original;
    for record in &records {
        assert_eq!(record.params_before, prev);
        assert_eq!(
            record.params_after,
            count_params(&record.config_after, CountFlags::all()).total_params
        );
        assert!(record.params_after < record.params_before);
        prev = record.params_after;
    }

    // Final count sits within one coarsest unit below the milestone.
    let coarsest = compute_betas(&final_config, Objective::Params).reference;
    let milestone = (original as f64 * (1.0 - 0.25)).round() as u64;
    let final_params = count_params(&final_config, CountFlags::all()).total_params;
    assert!(final_params <= milestone);
    assert!(milestone - final_params <= coarsest);

    // The extracted model still evaluates.
    let eval = schubert::evaluate_mlm(&final_weights, &final_config, &eval_ex, 16).unwrap();
    assert!(eval.total.is_finite());
}
