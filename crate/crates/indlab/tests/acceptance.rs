//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//!
//! The training-dependent criteria share one lazily trained set of runs, so
//! the whole suite performs each training run exactly once regardless of
//! test-thread interleaving. Expect several hours of wall time on a small
//! machine; the numerical criterion (6) and the spiked oracle (7) run in
//! under a minute and can be filtered with `cargo test --test acceptance
//! numerical` / `spiked`.

use std::sync::OnceLock;

use indlab::datagen::{gen_probe, DataSpec, TokenDistribution};
use indlab::intervene::{
    apply_edit, default_bridge_rank, eval_copy, random_head_subset, shuffle_heads, spiked_pipeline,
    Circuit, EditedModel, HeadEdit, ProjectionMode, ShuffleMode,
};
use indlab::linalg::{
    principal_subspace, subspace_similarity, svd, Matrix, OrthonormalBasis, Side, SimilarityMode,
};
use indlab::measures::{
    avg_predictive_tv, diagonal_score, rank_heads, MeasureConfig, MeasureReport,
};
use indlab::model::checkpoint;
use indlab::model::{forward, ForwardOpts, ModelConfig, ModelParameters};
use indlab::trainer::{grad_check, train, MetricSeries, TrainCallbacks, TrainConfig};
use indlab::{derive_rng, salts};

const TRANSITION_OOD: f64 = 0.2;
const SUBMATCH_THRESHOLD: f64 = 0.8;

fn default_train(seed: u64) -> TrainConfig {
    TrainConfig { seed, ..TrainConfig::default() }
}

struct DefaultRun {
    series: MetricSeries,
    params: ModelParameters<f32>,
}

/// Criterion 1/3 runs: the default 2L1H config over five seeds.
fn default_runs() -> &'static Vec<DefaultRun> {
    static RUNS: OnceLock<Vec<DefaultRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        (0..5)
            .map(|seed| {
                eprintln!("[acceptance] training default 2L1H seed {seed} ...");
                let out = train(&default_train(seed), None, progress_callbacks("2l1h", seed))
                    .expect("default training run");
                DefaultRun { series: out.series, params: out.params }
            })
            .collect()
    })
}

fn progress_callbacks(tag: &'static str, seed: u64) -> TrainCallbacks<'static> {
    TrainCallbacks {
        on_report: Some(Box::new(move |r: &MeasureReport| {
            if r.step % 1000 == 0 {
                eprintln!(
                    "[acceptance {tag} s{seed}] step {:>6} loss {:.3} id {:.3} ood {:.3} sub {:.3}",
                    r.step, r.train_loss, r.id_err, r.ood_err, r.submatch_max
                );
            }
        })),
        ..Default::default()
    }
}

fn transition_step(series: &MetricSeries) -> Option<u64> {
    series.first_step_where(|r| r.ood_err < TRANSITION_OOD)
}

#[test]
fn criterion_1_phase_transition() {
    let runs = default_runs();
    let mut in_band = 0;
    let mut all_ok = true;
    for (seed, run) in runs.iter().enumerate() {
        let last = run.series.last().expect("non-empty series");
        let t = transition_step(&run.series);
        let band = matches!(t, Some(s) if (1000..=5000).contains(&s));
        if band {
            in_band += 1;
        }
        eprintln!(
            "  seed {seed}: final id_err {:.4} ood_err {:.4} transition {:?}",
            last.id_err, last.ood_err, t
        );
        if last.ood_err > 0.1 || last.id_err > 0.1 {
            all_ok = false;
        }
    }
    let pass = all_ok && in_band >= 4;
    println!(
        "criterion 1 (phase transition: final errors <= 0.1, transition in [1000,5000] for >=4/5 seeds; {in_band}/5 in band): {}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass);
}

#[test]
fn criterion_2_one_layer_failure() {
    let mut cfg = default_train(0);
    cfg.model.n_layers = 1;
    let out = train(&cfg, None, progress_callbacks("1l", 0)).expect("one-layer run");
    let last = out.series.last().unwrap();

    // Weak-learning signature: the average predictive distribution moves
    // toward the training marginal between step 0 and the end.
    let dist = indlab::measures::default_train_dist(cfg.model.vocab, cfg.data.alpha).unwrap();
    let contexts: Vec<Vec<u32>> =
        out.eval_ctx.id_set.iter().take(500).map(|s| s.tokens.clone()).collect();
    let tv0 = avg_predictive_tv(&out.init_params, &contexts, &dist).unwrap();
    let tv1 = avg_predictive_tv(&out.params, &contexts, &dist).unwrap();

    let pass = last.ood_err >= 0.9 && tv1 < tv0;
    println!(
        "criterion 2 (one-layer failure: final ood_err {:.4} >= 0.9, marginal TV {:.4} -> {:.4} shrinks): {}",
        last.ood_err,
        tv0,
        tv1,
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass);
}

#[test]
fn criterion_3_co_emergence() {
    let run = &default_runs()[0];
    let last = run.series.last().unwrap();
    let t_err = transition_step(&run.series);
    let t_sub = run.series.first_step_where(|r| r.submatch_max > SUBMATCH_THRESHOLD);
    let gap_ok = match (t_err, t_sub) {
        (Some(a), Some(b)) => a.abs_diff(b) <= 1000,
        _ => false,
    };
    let pass = gap_ok && last.diag_score > 5.0 && last.pth_score > 0.9 && last.ih_score > 0.8;
    println!(
        "criterion 3 (co-emergence: |{t_err:?} - {t_sub:?}| <= 1000, final diag {:.2} > 5, pth {:.3} > 0.9, ih {:.3} > 0.8): {}",
        last.diag_score,
        last.pth_score,
        last.ih_score,
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass);
}

#[test]
fn criterion_4_pool_sweep() {
    let run_pool = |pool: usize| {
        let mut cfg = default_train(0);
        cfg.data.pool_size = Some(pool);
        train(&cfg, None, progress_callbacks(if pool == 1000 { "pool1000" } else { "pool100" }, 0))
            .expect("pool run")
    };
    let big = run_pool(1000);
    let small = run_pool(100);

    let big_transitions = transition_step(&big.series).is_some();
    let small_final = small.series.last().unwrap();
    let at_2000 = |series: &MetricSeries| {
        series.reports.iter().find(|r| r.step == 2000).map(|r| r.id_err).expect("step-2000 row")
    };
    let small_id_2000 = at_2000(&small.series);
    let big_id_2000 = at_2000(&big.series);
    let memorization = small_id_2000 < big_id_2000;

    let pass = big_transitions && small_final.ood_err >= 0.8 && memorization;
    println!(
        "criterion 4 (pool sweep: S=1000 reaches ood<0.2 within 20K ({}), S=100 final ood {:.3} >= 0.8, id@2000 {:.3} < {:.3}): {}",
        big_transitions,
        small_final.ood_err,
        small_id_2000,
        big_id_2000,
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass);
}

struct BigModelRun {
    params: ModelParameters<f32>,
}

/// The 8L8H model for the intervention criterion, trained until it
/// generalizes (early stop once OOD error reaches 0.05).
fn big_model() -> &'static BigModelRun {
    static RUN: OnceLock<BigModelRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let mut cfg = default_train(0);
        cfg.model.n_layers = 8;
        cfg.model.n_heads = 8;
        let callbacks = TrainCallbacks {
            stop_when: Some(Box::new(|r: &MeasureReport| r.ood_err <= 0.05)),
            on_report: progress_callbacks("8l8h", 0).on_report,
            ..Default::default()
        };
        eprintln!("[acceptance] training 8L8H (early stop at ood 0.05) ...");
        let out = train(&cfg, None, callbacks).expect("8L8H run");
        let last = out.series.last().unwrap();
        assert!(
            last.ood_err <= 0.2,
            "8L8H failed to train: final ood_err {:.3}",
            last.ood_err
        );
        BigModelRun { params: out.params }
    })
}

#[test]
fn criterion_5_intervention_dominance() {
    let run = big_model();
    let params = &run.params;
    let icfg = MeasureConfig::default();
    let table = rank_heads(params, icfg.probe_count, 25, 1234).unwrap();
    let screened = indlab::measures::screen_pairs(&table, params, 2.3, 10).unwrap();
    eprintln!(
        "  screened: {} pairs, {} IHs, {} PTHs",
        screened.pairs.len(),
        screened.ih.len(),
        screened.pth.len()
    );

    let triples: Vec<_> = (0..50)
        .map(|i| {
            let mut rng = derive_rng(99, salts::INTERVENE, i);
            gen_probe(20, 3, 64, &mut rng).unwrap()
        })
        .collect();
    let baseline = eval_copy(&EditedModel::unedited(params), &triples).unwrap();
    eprintln!("  baseline: prob {:.4} acc {:.4}", baseline.mean_prob, baseline.mean_acc);

    // (a) removing top-K IHs hurts more than removing K random heads.
    let mut removal_ok = true;
    for k in [2usize, 4, 8] {
        let targets: Vec<_> = table.ih_ranking.iter().take(k).copied().collect();
        let top = eval_copy(&apply_edit(params, &HeadEdit::Remove { targets }).unwrap(), &triples)
            .unwrap();
        let mut rand_acc = 0.0;
        for seed in 0..5u64 {
            let mut rng = derive_rng(777, salts::INTERVENE, seed);
            let targets = random_head_subset(&params.all_heads(), k, &mut rng);
            let stats =
                eval_copy(&apply_edit(params, &HeadEdit::Remove { targets }).unwrap(), &triples)
                    .unwrap();
            rand_acc += stats.mean_acc;
        }
        rand_acc /= 5.0;
        eprintln!("  remove K={k}: top-IH acc {:.4} vs random {:.4}", top.mean_acc, rand_acc);
        if top.mean_acc >= rand_acc {
            removal_ok = false;
        }
    }

    // (b) within-shuffle degrades correct-token probability less than
    // outside-shuffle (QK over the screened IH list).
    let shuffle_list = if screened.ih.is_empty() { &table.ih_ranking[..4] } else { &screened.ih[..] };
    let mut within = 0.0;
    let mut outside = 0.0;
    for seed in 0..5u64 {
        let mut rng = derive_rng(31, salts::INTERVENE, seed);
        let e = shuffle_heads(params, shuffle_list, Circuit::Qk, ShuffleMode::Within, &mut rng)
            .unwrap();
        within += eval_copy(&e, &triples).unwrap().mean_prob;
        let mut rng = derive_rng(32, salts::INTERVENE, seed);
        let e = shuffle_heads(params, shuffle_list, Circuit::Qk, ShuffleMode::Outside, &mut rng)
            .unwrap();
        outside += eval_copy(&e, &triples).unwrap().mean_prob;
    }
    within /= 5.0;
    outside /= 5.0;
    let shuffle_ok = within > outside;
    eprintln!("  shuffle: within prob {within:.4} vs outside {outside:.4}");

    // (c) keep-projection hurts less than remove-projection.
    let r = default_bridge_rank(params.config.d_model);
    let project = |mode| {
        let outcome = indlab::intervene::edit_protocol_projection(
            params, &table, r, mode, 2.3, 10, 0.25,
        )
        .unwrap();
        assert!(!outcome.no_op, "screened IH list empty: projection protocol was a no-op");
        eval_copy(&outcome.edited, &triples).unwrap()
    };
    let keep = project(ProjectionMode::Keep);
    let remove = project(ProjectionMode::Remove);
    let projection_ok = keep.mean_acc > remove.mean_acc;
    eprintln!("  projection r={r}: keep acc {:.4} vs remove acc {:.4}", keep.mean_acc, remove.mean_acc);

    let pass = removal_ok && shuffle_ok && projection_ok;
    println!(
        "criterion 5 (intervention dominance: removal {removal_ok}, shuffle {shuffle_ok}, projection {projection_ok}): {}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass);
}

#[test]
fn criterion_6_numerical_property_suite() {
    let mut failures: Vec<String> = Vec::new();

    // Gradient check at 64-bit on a d=8 model.
    let small = ModelConfig {
        vocab: 8,
        d_model: 8,
        n_layers: 2,
        n_heads: 1,
        t_max: 8,
        rope_theta: 1000.0,
        use_mlp: false,
        mlp_hidden: 16,
        dropout_rate: 0.0,
        attn_dropout: true,
        final_ln: true,
        init_std: 0.05,
    };
    let tokens = vec![1u32, 5, 3, 3, 7, 0, 2, 6];
    let gc = grad_check(&small, &tokens, 3, 1e-5, 1e-4).unwrap();
    if gc.max_rel_err > 1e-4 {
        failures.push(format!("grad check {:.2e} > 1e-4 ({})", gc.max_rel_err, gc.worst_tensor));
    }

    // SVD reconstruction <= 1e-6 relative.
    let mut rng = derive_rng(5, salts::INIT, 0);
    use rand::Rng as _;
    let m = Matrix::from_fn(48, 32, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
    let dec = svd(&m).unwrap();
    let mid = Matrix::diag(&dec.singulars);
    let rec = dec.left.columns().matmul(&mid).matmul(&dec.right.columns().transpose());
    let rel = rec.sub(&m).frobenius_norm() / m.frobenius_norm();
    if rel > 1e-6 {
        failures.push(format!("svd reconstruction {rel:.2e} > 1e-6"));
    }

    // Basis invariance of the subspace similarity <= 1e-9.
    let u = principal_subspace(&m, Side::Left, 6).unwrap();
    let v = {
        let m2 = Matrix::from_fn(48, 20, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        principal_subspace(&m2, Side::Left, 6).unwrap()
    };
    let o1 = svd(&Matrix::from_fn(6, 6, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal)))
        .unwrap()
        .left
        .columns()
        .clone();
    let o2 = svd(&Matrix::from_fn(6, 6, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal)))
        .unwrap()
        .left
        .columns()
        .clone();
    for mode in [SimilarityMode::Max, SimilarityMode::Avg] {
        let a = subspace_similarity(&u, &v, mode).unwrap();
        let b = subspace_similarity(&u.rotate(&o1).unwrap(), &v.rotate(&o2).unwrap(), mode).unwrap();
        if (a - b).abs() > 1e-9 {
            failures.push(format!("basis invariance {mode:?}: {:.2e}", (a - b).abs()));
        }
    }

    // Diagonal score closed form.
    let z = diagonal_score(&Matrix::identity(64), &Matrix::identity(64)).unwrap();
    if (z - 63f64.sqrt()).abs() > 1e-9 {
        failures.push(format!("z(I_64) = {z}, want sqrt(63)"));
    }

    // Keep + remove projector complementarity <= 1e-6.
    let mut rng2 = derive_rng(6, salts::INIT, 0);
    let params = ModelParameters::<f32>::init(
        ModelConfig { dropout_rate: 0.0,
 attn_dropout: true, ..ModelConfig::default_2l1h() },
        &mut rng2,
    )
    .unwrap();
    let target = indlab::model::HeadId { layer: 1, head: 0 };
    let basis: OrthonormalBasis =
        principal_subspace(&params.extract_qk(target, 0).unwrap(), Side::Right, 5).unwrap();
    let keep = apply_edit(
        &params,
        &HeadEdit::ProjectQk { targets: vec![target], basis: basis.clone(), mode: ProjectionMode::Keep },
    )
    .unwrap();
    let remove = apply_edit(
        &params,
        &HeadEdit::ProjectQk { targets: vec![target], basis, mode: ProjectionMode::Remove },
    )
    .unwrap();
    let orig = params.extract_qk(target, 0).unwrap();
    let sum = keep
        .params
        .extract_qk(target, 0)
        .unwrap()
        .add(&remove.params.extract_qk(target, 0).unwrap());
    let rel = sum.sub(&orig).frobenius_norm() / orig.frobenius_norm();
    if rel > 1e-6 {
        failures.push(format!("projector complementarity {rel:.2e} > 1e-6"));
    }

    // Attention rows stochastic and causal on random inputs.
    let toks: Vec<u32> = (0..48).map(|i| ((i * 29 + 3) % 64) as u32).collect();
    let trace = forward(&params, &toks, ForwardOpts::capture()).unwrap();
    'outer: for l in 0..2 {
        let a = trace.attention(indlab::model::HeadId { layer: l, head: 0 }).unwrap();
        for t in 0..48 {
            let row = &a[t * 48..(t + 1) * 48];
            let sum: f32 = row[..=t].iter().sum();
            if (sum - 1.0).abs() > 1e-6 || row[t + 1..].iter().any(|&v| v != 0.0) {
                failures.push(format!("attention row {t} of layer {l} invalid"));
                break 'outer;
            }
        }
    }

    // Checkpoint roundtrip bit-exact.
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(&params, dir.path()).unwrap();
    let loaded = checkpoint::load(dir.path()).unwrap();
    if loaded.data != params.data {
        failures.push("checkpoint roundtrip not bit-exact".into());
    }

    let pass = failures.is_empty();
    println!(
        "criterion 6 (numerical property suite{}): {}",
        if pass { String::new() } else { format!("; failures: {failures:?}") },
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "{failures:?}");
}

#[test]
fn criterion_7_spiked_oracle() {
    // The criterion as stated: d=64, r=4, K=8, noise 0.1 x spike, full
    // pipeline with screening at delta = 2.3, recovery similarity >= 0.95 in
    // >= 18 of 20 seeds.
    //
    // The matched-pair diagonal score of a rank-r spike is bounded by
    // sqrt(r) * (d-1) / sqrt(d^2 - r) ~= 1.97 at r = 4, below the 2.3
    // cutoff, independent of the noise level; the run below reports what the
    // pipeline actually does.
    let mut successes = 0;
    let mut mean_diag = 0.0;
    for seed in 0..20u64 {
        let rec = spiked_pipeline(64, 4, 8, 0.1, 2.3, 10, 0, seed).unwrap();
        mean_diag += rec.mean_pair_diag;
        if rec.recovered {
            successes += 1;
        }
    }
    mean_diag /= 20.0;
    let pass = successes >= 18;
    println!(
        "criterion 7 (spiked oracle at delta=2.3: {successes}/20 recoveries, mean pair diag {:.3}, closed-form ceiling {:.3}): {}",
        mean_diag,
        indlab::intervene::spiked_diag_ceiling(64, 4),
        if pass { "PASS" } else { "FAIL" }
    );

    // Context for the report: the same pipeline with the cutoff below the
    // rank-4 ceiling, and rank-6 spikes against the 2.3 cutoff, both recover
    // reliably — the screening logic itself is sound.
    let below_ceiling: usize = (0..20u64)
        .map(|s| spiked_pipeline(64, 4, 8, 0.1, 1.5, 10, 0, s).unwrap().recovered as usize)
        .sum();
    let rank6: usize = (0..20u64)
        .map(|s| spiked_pipeline(64, 6, 8, 0.1, 2.3, 10, 0, s).unwrap().recovered as usize)
        .sum();
    println!(
        "criterion 7 context: delta=1.5 recovers {below_ceiling}/20; rank-6 spikes at delta=2.3 recover {rank6}/20"
    );
    assert!(pass);
}
