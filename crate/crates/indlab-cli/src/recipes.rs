//! Named experiment recipes. Each owns its run directory and emits CSV/JSON
//! artifacts plus a manifest with checksums.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use indlab::datagen::gen_probe;
use indlab::intervene::{
    apply_edit, bridge_subspace, default_bridge_rank, eval_copy, spiked_pipeline, Circuit,
    EditedModel, EvalStats, HeadEdit, ProjectionMode, ShuffleMode, StackOrientation,
};
use indlab::linalg::LinalgError;
use indlab::linalg::SimilarityMode;
use indlab::measures::{
    diagonal_score, rank_heads, screen_pairs, subspace_matching_score, token_matching_ratio,
    MeasureReport, CSV_HEADER,
};
use indlab::model::{checkpoint, HeadId, ModelParameters};
use indlab::trainer::{train_from, TrainCallbacks, TrainConfig, TrainError, TrainOutcome};
use indlab::{derive_rng, salts};

use crate::config::{ExperimentConfig, Recipe};
use crate::manifest::{write_manifest, RunManifest};
use crate::CliError;

fn prepare_run_dir(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let dir = cfg.run_dir();
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

/// Trains one model with metric streaming into `dir/metrics.csv`.
fn train_with_csv(
    tcfg: &TrainConfig,
    dir: &Path,
    stop_at_ood: Option<f64>,
    label: &str,
) -> Result<TrainOutcome, CliError> {
    train_with_csv_from(tcfg, None, dir, stop_at_ood, label)
}

fn train_with_csv_from(
    tcfg: &TrainConfig,
    initial: Option<indlab::model::ModelParameters<f32>>,
    dir: &Path,
    stop_at_ood: Option<f64>,
    label: &str,
) -> Result<TrainOutcome, CliError> {
    let csv_path = dir.join("metrics.csv");
    let mut csv = std::io::BufWriter::new(std::fs::File::create(&csv_path)?);
    writeln!(csv, "{CSV_HEADER}")?;
    let outcome = {
        let callbacks = TrainCallbacks {
            on_report: Some(Box::new(|r: &MeasureReport| {
                writeln!(csv, "{}", r.csv_row()).expect("metrics.csv write");
                eprintln!(
                    "[{label}] step {:>6}  loss {:.4}  id_err {:.4}  ood_err {:.4}  submatch {:.3}",
                    r.step, r.train_loss, r.id_err, r.ood_err, r.submatch_max
                );
            })),
            on_checkpoint: None,
            stop_when: stop_at_ood
                .map(|th| Box::new(move |r: &MeasureReport| r.ood_err <= th) as Box<_>),
        };
        train_from(tcfg, initial, Some(dir), callbacks)?
    };
    csv.flush()?;
    Ok(outcome)
}

pub fn run(cfg: &ExperimentConfig) -> Result<RunManifest, CliError> {
    let started = now();
    let dir = prepare_run_dir(cfg)?;
    std::fs::write(
        dir.join("config.json"),
        serde_json::to_string_pretty(cfg).expect("config serializes"),
    )?;
    match cfg.recipe {
        Recipe::TrainDynamics => train_dynamics(cfg, &dir)?,
        Recipe::PoolSweep => pool_sweep(cfg, &dir)?,
        Recipe::RopeDeltaSweep => rope_delta_sweep(cfg, &dir)?,
        Recipe::RankSweep => rank_sweep(cfg, &dir)?,
        Recipe::InterventionSuite => intervention_suite(cfg, &dir, None)?,
        Recipe::SpikedOracle => spiked_oracle(cfg, &dir)?,
    }
    write_manifest(&dir, cfg, started)
}

/// Variant of `run` for `intervene --ckpt`: reuses a trained checkpoint.
pub fn run_intervene_on(cfg: &ExperimentConfig, ckpt: &Path) -> Result<RunManifest, CliError> {
    let started = now();
    let dir = prepare_run_dir(cfg)?;
    std::fs::write(
        dir.join("config.json"),
        serde_json::to_string_pretty(cfg).expect("config serializes"),
    )?;
    let params = checkpoint::load_expecting(ckpt, &cfg.model)?;
    intervention_suite(cfg, &dir, Some(params))?;
    write_manifest(&dir, cfg, started)
}

fn train_dynamics(cfg: &ExperimentConfig, dir: &Path) -> Result<(), CliError> {
    let tcfg = cfg.to_train_config();
    let initial = match &cfg.train.warm_start {
        Some(path) => Some(checkpoint::load_expecting(path, &cfg.model)?),
        None => None,
    };
    train_with_csv_from(&tcfg, initial, dir, cfg.train.stop_at_ood, &cfg.name)?;
    Ok(())
}

fn pool_sweep(cfg: &ExperimentConfig, dir: &Path) -> Result<(), CliError> {
    #[derive(Serialize)]
    struct PoolRow {
        pool_size: usize,
        final_step: u64,
        final_id_err: f64,
        final_ood_err: f64,
        id_err_at_2000: Option<f64>,
        ood_err_at_2000: Option<f64>,
        transition_step: Option<u64>,
    }
    let mut rows = Vec::new();
    let mut csv = String::from(
        "pool_size,final_step,final_id_err,final_ood_err,id_err_at_2000,ood_err_at_2000,transition_step\n",
    );
    for &s in &cfg.sweep.pool_sizes {
        let sub = dir.join(format!("pool-{s}"));
        std::fs::create_dir_all(&sub)?;
        let mut tcfg = cfg.to_train_config();
        tcfg.data.pool_size = Some(s);
        let outcome =
            train_with_csv(&tcfg, &sub, cfg.train.stop_at_ood, &format!("{} S={s}", cfg.name))?;
        let at_2000 = outcome.series.reports.iter().find(|r| r.step == 2000);
        let last = outcome.series.last().expect("non-empty series");
        let row = PoolRow {
            pool_size: s,
            final_step: last.step,
            final_id_err: last.id_err,
            final_ood_err: last.ood_err,
            id_err_at_2000: at_2000.map(|r| r.id_err),
            ood_err_at_2000: at_2000.map(|r| r.ood_err),
            transition_step: outcome.series.first_step_where(|r| r.ood_err < 0.2),
        };
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.pool_size,
            row.final_step,
            row.final_id_err,
            row.final_ood_err,
            row.id_err_at_2000.map(|v| v.to_string()).unwrap_or_default(),
            row.ood_err_at_2000.map(|v| v.to_string()).unwrap_or_default(),
            row.transition_step.map(|v| v.to_string()).unwrap_or_default()
        ));
        rows.push(row);
    }
    std::fs::write(dir.join("pool_sweep.csv"), csv)?;
    std::fs::write(
        dir.join("pool_sweep.json"),
        serde_json::to_string_pretty(&rows).expect("rows serialize"),
    )?;
    Ok(())
}

/// Measures that depend on the extracted QK circuit, recomputed from saved
/// checkpoints for each relative distance in the grid.
fn rope_delta_sweep(cfg: &ExperimentConfig, dir: &Path) -> Result<(), CliError> {
    let mut tcfg = cfg.to_train_config();
    tcfg.ckpt_every = tcfg.eval_every;
    let outcome = train_with_csv(&tcfg, dir, cfg.train.stop_at_ood, &cfg.name)?;
    let mut csv = String::from("step,delta_t,diag_score,submatch_max,submatch_avg,token_match_ratio\n");
    for report in &outcome.series.reports {
        if report.step == 0 || report.step % tcfg.ckpt_every != 0 {
            continue;
        }
        let params = checkpoint::load(&dir.join(format!("ckpt-{}", report.step)))?;
        let table = indlab::measures::score_heads(
            &params,
            &outcome.eval_ctx.ih_eval,
            &outcome.eval_ctx.pth_probes,
        )?;
        let ov = params.extract_ov(table.top_pth())?;
        for &dt in &cfg.sweep.deltas {
            let qk = params.extract_qk(table.top_ih(), dt)?;
            let diag = diagonal_score(&qk, &ov)?;
            let smax = subspace_matching_score(&qk, &ov, cfg.measure.rank_r, SimilarityMode::Max)?;
            let savg = subspace_matching_score(&qk, &ov, cfg.measure.rank_r, SimilarityMode::Avg)?;
            let tmr = token_matching_ratio(
                &params.embed_matrix(),
                &qk.matmul(&ov),
                cfg.measure.restricted_argmax,
            )?;
            csv.push_str(&format!("{},{dt},{diag},{smax},{savg},{tmr}\n", report.step));
        }
    }
    std::fs::write(dir.join("delta_metrics.csv"), csv)?;
    Ok(())
}

fn rank_sweep(cfg: &ExperimentConfig, dir: &Path) -> Result<(), CliError> {
    let mut tcfg = cfg.to_train_config();
    tcfg.ckpt_every = tcfg.eval_every;
    let outcome = train_with_csv(&tcfg, dir, cfg.train.stop_at_ood, &cfg.name)?;
    let mut csv = String::from("step,r,submatch_max,submatch_avg\n");
    for report in &outcome.series.reports {
        if report.step == 0 || report.step % tcfg.ckpt_every != 0 {
            continue;
        }
        let params = checkpoint::load(&dir.join(format!("ckpt-{}", report.step)))?;
        let table = indlab::measures::score_heads(
            &params,
            &outcome.eval_ctx.ih_eval,
            &outcome.eval_ctx.pth_probes,
        )?;
        let qk = params.extract_qk(table.top_ih(), cfg.measure.delta_t)?;
        let ov = params.extract_ov(table.top_pth())?;
        for &r in &cfg.sweep.ranks {
            let smax = subspace_matching_score(&qk, &ov, r, SimilarityMode::Max)?;
            let savg = subspace_matching_score(&qk, &ov, r, SimilarityMode::Avg)?;
            csv.push_str(&format!("{},{r},{smax},{savg}\n", report.step));
        }
    }
    std::fs::write(dir.join("rank_metrics.csv"), csv)?;
    Ok(())
}

#[derive(Serialize)]
struct InterventionRecord {
    edit: String,
    seed: Option<u64>,
    eval: EvalStats,
    baseline: EvalStats,
}

fn write_intervention(
    dir: &Path,
    name: &str,
    record: &InterventionRecord,
) -> Result<(), CliError> {
    let sub = dir.join("interventions");
    std::fs::create_dir_all(&sub)?;
    std::fs::write(
        sub.join(format!("{name}.json")),
        serde_json::to_string_pretty(record).expect("record serializes"),
    )?;
    Ok(())
}

fn intervention_suite(
    cfg: &ExperimentConfig,
    dir: &Path,
    pretrained: Option<ModelParameters<f32>>,
) -> Result<(), CliError> {
    let icfg = &cfg.intervention;
    let params = match pretrained {
        Some(p) => p,
        None => {
            let tcfg = cfg.to_train_config();
            let stop = cfg.train.stop_at_ood;
            train_with_csv(&tcfg, dir, stop, &cfg.name)?.params
        }
    };

    // Evaluation triples, shared by every edit.
    let triples: Vec<_> = (0..icfg.n_eval)
        .map(|i| {
            let mut rng = derive_rng(cfg.seed, salts::INTERVENE, 10_000 + i as u64);
            gen_probe(icfg.probe_block_len, 3, cfg.model.vocab, &mut rng)
        })
        .collect::<Result<_, _>>()
        .map_err(indlab::intervene::InterveneError::from)?;

    let baseline = eval_copy(&EditedModel::unedited(&params), &triples)?;
    eprintln!(
        "[{}] baseline copy: prob {:.4} acc {:.4}",
        cfg.name, baseline.mean_prob, baseline.mean_acc
    );

    let table = rank_heads(&params, icfg.score_probe_count, icfg.score_block_len, cfg.seed)?;
    std::fs::write(
        dir.join("head_scores.json"),
        serde_json::to_string_pretty(&table).expect("table serializes"),
    )?;
    let screened = screen_pairs(&table, &params, icfg.delta, icfg.cap)?;
    std::fs::write(
        dir.join("screened.json"),
        serde_json::to_string_pretty(&screened).expect("screened serializes"),
    )?;

    let mut summary = serde_json::Map::new();
    summary.insert("baseline".into(), serde_json::to_value(&baseline).unwrap());

    // Removal: top-K IHs vs K random heads over several seeds.
    let all_heads = params.all_heads();
    let mut removal_rows = Vec::new();
    for &k in &icfg.removal_ks {
        let k = k.min(all_heads.len());
        let targets: Vec<HeadId> = table.ih_ranking.iter().take(k).copied().collect();
        let edited = apply_edit(&params, &HeadEdit::Remove { targets })?;
        let top_stats = eval_copy(&edited, &triples)?;
        write_intervention(
            dir,
            &format!("remove_top{k}_ih"),
            &InterventionRecord {
                edit: format!("remove top-{k} induction heads"),
                seed: None,
                eval: top_stats.clone(),
                baseline: baseline.clone(),
            },
        )?;
        let mut random_accs = Vec::new();
        for seed in 0..icfg.seeds {
            let mut rng = derive_rng(cfg.seed, salts::INTERVENE, 20_000 + seed);
            let targets = indlab::intervene::random_head_subset(&all_heads, k, &mut rng);
            let edited = apply_edit(&params, &HeadEdit::Remove { targets })?;
            let stats = eval_copy(&edited, &triples)?;
            write_intervention(
                dir,
                &format!("remove_random{k}_seed{seed}"),
                &InterventionRecord {
                    edit: format!("remove {k} random heads"),
                    seed: Some(seed),
                    eval: stats.clone(),
                    baseline: baseline.clone(),
                },
            )?;
            random_accs.push(stats.mean_acc);
        }
        let random_mean = random_accs.iter().sum::<f64>() / random_accs.len() as f64;
        eprintln!(
            "[{}] remove K={k}: top-IH acc {:.4} vs random mean acc {:.4}",
            cfg.name, top_stats.mean_acc, random_mean
        );
        removal_rows.push(serde_json::json!({
            "k": k,
            "top_ih_acc": top_stats.mean_acc,
            "random_mean_acc": random_mean,
        }));
    }
    summary.insert("removal".into(), serde_json::Value::Array(removal_rows));

    // Shuffle: QK within/outside the screened IH list; OV within/outside the
    // screened PTH list.
    let mut shuffle_rows = Vec::new();
    for (list, circuit, label) in
        [(&screened.ih, Circuit::Qk, "ih_qk"), (&screened.pth, Circuit::Ov, "pth_ov")]
    {
        if list.is_empty() {
            eprintln!("[{}] shuffle {label}: screened list empty, skipping", cfg.name);
            continue;
        }
        for mode in [ShuffleMode::Within, ShuffleMode::Outside] {
            let mut probs = Vec::new();
            for seed in 0..icfg.seeds {
                let mut rng = derive_rng(cfg.seed, salts::INTERVENE, 30_000 + seed);
                let edited =
                    indlab::intervene::shuffle_heads(&params, list, circuit, mode, &mut rng)?;
                let stats = eval_copy(&edited, &triples)?;
                write_intervention(
                    dir,
                    &format!("shuffle_{label}_{mode:?}_seed{seed}").to_lowercase(),
                    &InterventionRecord {
                        edit: format!("shuffle {circuit:?} {mode:?} over {} heads", list.len()),
                        seed: Some(seed),
                        eval: stats.clone(),
                        baseline: baseline.clone(),
                    },
                )?;
                probs.push(stats.mean_prob);
            }
            let mean = probs.iter().sum::<f64>() / probs.len() as f64;
            eprintln!("[{}] shuffle {label} {mode:?}: mean prob {:.4}", cfg.name, mean);
            shuffle_rows.push(serde_json::json!({
                "list": label,
                "mode": format!("{mode:?}"),
                "mean_prob": mean,
            }));
        }
    }
    summary.insert("shuffle".into(), serde_json::Value::Array(shuffle_rows));

    // Projection: keep vs remove of the bridge subspace.
    let r = icfg.bridge_rank.unwrap_or_else(|| default_bridge_rank(cfg.model.d_model));
    let mut projection_rows = Vec::new();
    for mode in [ProjectionMode::Keep, ProjectionMode::Remove] {
        let outcome = indlab::intervene::edit_protocol_projection(
            &params,
            &table,
            r,
            mode,
            icfg.delta,
            icfg.cap,
            icfg.edit_fraction,
        )?;
        if outcome.no_op {
            eprintln!("[{}] projection {mode:?}: screened IH list empty, no-op", cfg.name);
        }
        let stats = eval_copy(&outcome.edited, &triples)?;
        write_intervention(
            dir,
            &format!("project_{mode:?}").to_lowercase(),
            &InterventionRecord {
                edit: format!(
                    "project QK ({mode:?}) rank {r} on {} heads",
                    outcome.edited_heads.len()
                ),
                seed: None,
                eval: stats.clone(),
                baseline: baseline.clone(),
            },
        )?;
        eprintln!("[{}] projection {mode:?}: acc {:.4}", cfg.name, stats.mean_acc);
        projection_rows.push(serde_json::json!({
            "mode": format!("{mode:?}"),
            "rank": r,
            "edited_heads": outcome.edited_heads.len(),
            "no_op": outcome.no_op,
            "mean_acc": stats.mean_acc,
            "mean_prob": stats.mean_prob,
        }));
    }
    summary.insert("projection".into(), serde_json::Value::Array(projection_rows));

    std::fs::write(
        dir.join("interventions").join("summary.json"),
        serde_json::to_string_pretty(&serde_json::Value::Object(summary)).unwrap(),
    )?;
    Ok(())
}

fn spiked_oracle(cfg: &ExperimentConfig, dir: &Path) -> Result<(), CliError> {
    let s = &cfg.spiked;
    let mut results = Vec::new();
    let mut successes = 0u64;
    for seed in 0..s.n_seeds {
        let rec = spiked_pipeline(
            s.d,
            s.r,
            s.k,
            s.noise_scale,
            s.delta,
            s.cap,
            s.decoys,
            cfg.seed.wrapping_add(seed),
        )?;
        if rec.recovered {
            successes += 1;
        }
        println!(
            "spiked seed {seed}: pairs {} ih {} mean_diag {:.3} similarity {:.4} -> {}",
            rec.surviving_pairs,
            rec.screened_ih,
            rec.mean_pair_diag,
            rec.similarity,
            if rec.recovered { "PASS" } else { "FAIL" }
        );
        results.push(rec);
    }
    // Direct bridge recovery without screening, as a control.
    let mut control = Vec::new();
    for seed in 0..s.n_seeds {
        let mut rng = derive_rng(cfg.seed.wrapping_add(seed), salts::INTERVENE, 40_000);
        let c = indlab::intervene::spiked_circuits(s.d, s.r, s.k, s.noise_scale, &mut rng)?;
        let basis = bridge_subspace(&c.qk, s.r, StackOrientation::Vertical)?;
        let sim =
            indlab::linalg::subspace_similarity(&basis, &c.v, SimilarityMode::Max)?;
        control.push(sim);
    }
    let passed = successes >= s.required_successes;
    println!(
        "spiked oracle: {successes}/{} recoveries at delta {} (required {}): {}",
        s.n_seeds,
        s.delta,
        s.required_successes,
        if passed { "PASS" } else { "FAIL" }
    );
    let doc = serde_json::json!({
        "config": s,
        "pipeline": results,
        "bridge_control_similarity": control,
        "successes": successes,
        "passed": passed,
        "diag_ceiling": indlab::intervene::spiked_diag_ceiling(s.d, s.r),
    });
    std::fs::write(dir.join("spiked_oracle.json"), serde_json::to_string_pretty(&doc).unwrap())?;
    Ok(())
}

impl From<LinalgError> for CliError {
    fn from(e: LinalgError) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { step, last_checkpoint } => CliError::Diverged {
                step,
                last_checkpoint: last_checkpoint.map(|p| p.display().to_string()),
            },
            TrainError::InvalidConfig(msg) => CliError::Config(msg),
            other => CliError::Other(other.to_string()),
        }
    }
}
