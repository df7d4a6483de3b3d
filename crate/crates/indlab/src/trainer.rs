//! Autoregressive training on fresh batches with decoupled-weight-decay
//! adaptive optimization, periodic measure evaluation, checkpointing, and a
//! finite-difference gradient verification harness.
//!
//! Per-sample gradients fan out to rayon workers; the reduction runs in
//! ascending sample order, so serial and parallel runs produce bit-identical
//! results for a given seed.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{DataError, DataSource, DataSpec, Token};
use crate::measures::{measure_suite, EvalContext, MeasureConfig, MeasureError, MeasureReport};
use crate::model::backprop::{loss_and_grad, sequence_loss};
use crate::model::checkpoint::{self, CheckpointError};
use crate::model::{ModelConfig, ModelError, ModelParameters};
use crate::scalar::Real;
use crate::{derive_rng, salts};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at step {step}: non-finite loss{}", last_checkpoint.as_ref().map(|p| format!(" (last good checkpoint: {})", p.display())).unwrap_or_default())]
    Diverged { step: u64, last_checkpoint: Option<PathBuf> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Full training-run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub eval_every: u64,
    /// Checkpoint cadence; 0 keeps only the final checkpoint.
    pub ckpt_every: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub seed: u64,
    pub data: DataSpec,
    pub model: ModelConfig,
    pub measure: MeasureConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 5e-4,
            batch_size: 50,
            steps: 20_000,
            eval_every: 250,
            ckpt_every: 5000,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            seed: 0,
            data: DataSpec::default(),
            model: ModelConfig::default_2l1h(),
            measure: MeasureConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lr <= 0.0 {
            return Err(TrainError::InvalidConfig("lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(TrainError::InvalidConfig("eval_every must be >= 1".into()));
        }
        if self.data.t_max > self.model.t_max {
            return Err(TrainError::InvalidConfig(format!(
                "data t_max {} exceeds model t_max {}",
                self.data.t_max, self.model.t_max
            )));
        }
        self.model.validate()?;
        Ok(())
    }
}

/// AdamW first/second moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(n_params: usize) -> Self {
        Self { m: vec![0.0; n_params], v: vec![0.0; n_params], step: 0 }
    }
}

/// One AdamW update, decoupled weight decay applied separately from the
/// adaptive step: `p <- p - lr*wd*p - lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adamw_step(
    state: &mut OptimizerState,
    params: &mut ModelParameters<f32>,
    grads: &[f32],
    cfg: &TrainConfig,
) {
    assert_eq!(grads.len(), params.data.len());
    assert_eq!(grads.len(), state.m.len());
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let corr1 = 1.0 / (1.0 - (cfg.beta1).powf(t)) as f32;
    let corr2 = 1.0 / (1.0 - (cfg.beta2).powf(t)) as f32;
    let lr = cfg.lr as f32;
    let wd = (cfg.lr * cfg.weight_decay) as f32;
    let eps = cfg.eps_adam as f32;
    for i in 0..grads.len() {
        let g = grads[i];
        let p = params.data[i];
        let m = b1 * state.m[i] + (1.0 - b1) * g;
        let v = b2 * state.v[i] + (1.0 - b2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let m_hat = m * corr1;
        let v_hat = v * corr2;
        params.data[i] = p - wd * p - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Dropout stream derivation for one batch: sample `i` of step `s` draws its
/// dropout noise from stream `base + i` so batch contents are independent of
/// worker count.
#[derive(Debug, Clone, Copy)]
pub struct DropoutSpec {
    pub seed: u64,
    pub base_index: u64,
}

/// Mean loss and mean gradient over a batch of sequences. Per-sample work
/// runs in parallel; the reduction order is fixed (ascending sample index).
pub fn batch_loss_and_grads<T: Real>(
    params: &ModelParameters<T>,
    batch: &[Vec<Token>],
    train_mode: bool,
    dropout: Option<DropoutSpec>,
) -> Result<(T, Vec<T>), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::InvalidConfig("empty batch".into()));
    }
    let per_sample: Result<Vec<(T, Vec<T>)>, ModelError> = batch
        .par_iter()
        .enumerate()
        .map(|(i, tokens)| {
            let mut rng;
            let rng_opt = match dropout {
                Some(spec) if train_mode => {
                    rng = derive_rng(spec.seed, salts::DROPOUT, spec.base_index + i as u64);
                    Some(&mut rng)
                }
                _ => None,
            };
            loss_and_grad(params, tokens, train_mode, rng_opt)
        })
        .collect();
    let per_sample = per_sample?;

    let inv_n = T::one() / T::from_f64(batch.len() as f64);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); params.data.len()];
    for (l, g) in &per_sample {
        loss += *l;
        for (acc, &x) in grad.iter_mut().zip(g) {
            *acc += x;
        }
    }
    loss *= inv_n;
    for g in grad.iter_mut() {
        *g *= inv_n;
    }
    if !loss.as_f64().is_finite() {
        return Err(TrainError::Diverged { step: 0, last_checkpoint: None });
    }
    Ok((loss, grad))
}

/// Ordered training-dynamics record.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricSeries {
    pub reports: Vec<MeasureReport>,
}

impl MetricSeries {
    pub fn push(&mut self, r: MeasureReport) {
        if let Some(last) = self.reports.last() {
            assert!(r.step > last.step, "steps must strictly increase");
        }
        self.reports.push(r);
    }

    pub fn last(&self) -> Option<&MeasureReport> {
        self.reports.last()
    }

    /// First step at which `pred` holds, scanning in step order.
    pub fn first_step_where(&self, pred: impl Fn(&MeasureReport) -> bool) -> Option<u64> {
        self.reports.iter().find(|r| pred(r)).map(|r| r.step)
    }
}

/// Callbacks observed during training.
#[derive(Default)]
pub struct TrainCallbacks<'a> {
    /// Invoked after each measure-suite evaluation.
    pub on_report: Option<Box<dyn FnMut(&MeasureReport) + 'a>>,
    /// Invoked after each checkpoint write.
    pub on_checkpoint: Option<Box<dyn FnMut(u64, &Path) + 'a>>,
    /// When set, training stops early once a report satisfies the predicate.
    pub stop_when: Option<Box<dyn Fn(&MeasureReport) -> bool + 'a>>,
}

/// Artifacts of a completed training run.
pub struct TrainOutcome {
    pub params: ModelParameters<f32>,
    pub series: MetricSeries,
    /// Parameters as they were at initialization (step 0).
    pub init_params: ModelParameters<f32>,
    pub eval_ctx: EvalContext,
}

/// Runs `steps` iterations of fresh-batch sampling, loss, and AdamW updates.
/// Every `eval_every` steps (and at step 0) the measure suite runs on frozen
/// parameters and appends a report. With `run_dir` set, checkpoints land in
/// `run_dir/ckpt-<step>/`. Fully deterministic for a given seed.
pub fn train(
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
    callbacks: TrainCallbacks<'_>,
) -> Result<TrainOutcome, TrainError> {
    train_from(cfg, None, run_dir, callbacks)
}

/// [`train`] with an optional warm start: when `initial` is given it is used
/// in place of a fresh initialization (its config must match).
pub fn train_from(
    cfg: &TrainConfig,
    initial: Option<ModelParameters<f32>>,
    run_dir: Option<&Path>,
    mut callbacks: TrainCallbacks<'_>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let mut init_rng = derive_rng(cfg.seed, salts::INIT, 0);
    let mut params = match initial {
        Some(p) => {
            if !p.config.same_shape(&cfg.model) {
                return Err(TrainError::InvalidConfig(
                    "warm-start parameters do not match the model shape".into(),
                ));
            }
            // Re-wrap under the run's config so behavior flags (dropout,
            // final LN usage is shape-relevant and already checked) follow
            // the new run.
            ModelParameters::from_flat(cfg.model.clone(), p.data)?
        }
        None => ModelParameters::<f32>::init(cfg.model.clone(), &mut init_rng)?,
    };
    let init_params = params.clone();
    let source = DataSource::new(cfg.data.clone(), cfg.model.vocab, cfg.seed)?;
    let eval_ctx = EvalContext::build(cfg.seed, &source, &cfg.model, &cfg.measure)?;
    let mut opt = OptimizerState::new(params.n_params());
    let mut series = MetricSeries::default();
    let mut last_checkpoint: Option<PathBuf> = None;

    let emit = |params: &ModelParameters<f32>,
                    series: &mut MetricSeries,
                    step: u64,
                    window_loss: f64,
                    callbacks: &mut TrainCallbacks<'_>|
     -> Result<bool, TrainError> {
        let report = measure_suite(params, &eval_ctx, &cfg.measure, step, window_loss)?;
        if let Some(cb) = callbacks.on_report.as_mut() {
            cb(&report);
        }
        let stop = callbacks.stop_when.as_ref().map(|f| f(&report)).unwrap_or(false);
        series.push(report);
        Ok(stop)
    };

    // Step-0 row records the starting point of every curve.
    let init_loss = {
        let batch = sample_batch(&source, cfg, 0)?;
        batch_loss_and_grads(&params, &batch, false, None)?.0 as f64
    };
    let report = measure_suite(&params, &eval_ctx, &cfg.measure, 0, init_loss)?;
    if let Some(cb) = callbacks.on_report.as_mut() {
        cb(&report);
    }
    series.reports.push(report);

    let mut window_loss_sum = 0.0f64;
    let mut window_count = 0u64;
    let mut stopped_early = false;
    for step in 0..cfg.steps {
        let batch = sample_batch(&source, cfg, step)?;
        let dropout = DropoutSpec { seed: cfg.seed, base_index: step * cfg.batch_size as u64 };
        let (loss, grads) = match batch_loss_and_grads(&params, &batch, true, Some(dropout)) {
            Ok(ok) => ok,
            Err(TrainError::Diverged { .. }) => {
                return Err(TrainError::Diverged { step, last_checkpoint });
            }
            Err(e) => return Err(e),
        };
        adamw_step(&mut opt, &mut params, &grads, cfg);
        window_loss_sum += loss as f64;
        window_count += 1;

        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.steps {
            let window_loss = window_loss_sum / window_count as f64;
            window_loss_sum = 0.0;
            window_count = 0;
            if emit(&params, &mut series, done, window_loss, &mut callbacks)? {
                stopped_early = true;
            }
        }
        if let Some(dir) = run_dir {
            let at_ckpt = cfg.ckpt_every > 0 && done % cfg.ckpt_every == 0;
            if at_ckpt || done == cfg.steps || stopped_early {
                let path = dir.join(format!("ckpt-{done}"));
                checkpoint::save(&params, &path)?;
                if let Some(cb) = callbacks.on_checkpoint.as_mut() {
                    cb(done, &path);
                }
                last_checkpoint = Some(path);
            }
        }
        if stopped_early {
            break;
        }
    }

    Ok(TrainOutcome { params, series, init_params, eval_ctx })
}

fn sample_batch(source: &DataSource, cfg: &TrainConfig, step: u64) -> Result<Vec<Vec<Token>>, TrainError> {
    let base = step * cfg.batch_size as u64;
    (0..cfg.batch_size)
        .map(|i| {
            let mut rng = derive_rng(cfg.seed, salts::DATA, base + i as u64);
            Ok(source.sample(&mut rng)?.tokens)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Gradient verification
// ---------------------------------------------------------------------------

/// Outcome of comparing analytic gradients against central finite
/// differences over every parameter coordinate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_tensor: String,
    pub step_size: f64,
    pub tolerance: f64,
    /// True when the agreement misses the tolerance (expected for coarse
    /// step sizes, a red flag at h ~ 1e-5).
    pub degraded: bool,
    pub n_params: usize,
}

/// Runs the finite-difference oracle on a (small) f64 model. Dropout is
/// disabled: the check requires a deterministic loss.
pub fn grad_check(
    model: &ModelConfig,
    tokens: &[Token],
    seed: u64,
    step_size: f64,
    tolerance: f64,
) -> Result<GradCheckReport, TrainError> {
    let mut rng = derive_rng(seed, salts::INIT, 0);
    let mut params = ModelParameters::<f64>::init(model.clone(), &mut rng)?;
    let (_, grad) = loss_and_grad(&params, tokens, false, None)?;

    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    let specs = params.layout.specs.clone();
    for spec in &specs {
        for k in 0..spec.len {
            let i = spec.offset + k;
            let orig = params.data[i];
            params.data[i] = orig + step_size;
            let up = sequence_loss(&params, tokens, false, None)?;
            params.data[i] = orig - step_size;
            let down = sequence_loss(&params, tokens, false, None)?;
            params.data[i] = orig;
            let numeric = (up - down) / (2.0 * step_size);
            let analytic = grad[i];
            let denom = analytic.abs().max(numeric.abs()).max(1e-5);
            let rel = (analytic - numeric).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
                worst = spec.name.clone();
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        worst_tensor: worst,
        step_size,
        tolerance,
        degraded: max_rel > tolerance,
        n_params: params.n_params(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
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
        }
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            steps: 30,
            eval_every: 10,
            ckpt_every: 0,
            batch_size: 8,
            data: DataSpec { alpha: 1.0, l_set: vec![6], t_max: 16, pool_size: None },
            model: ModelConfig {
                vocab: 16,
                d_model: 16,
                n_layers: 2,
                n_heads: 1,
                t_max: 16,
                rope_theta: 10_000.0,
                use_mlp: false,
                mlp_hidden: 16,
                dropout_rate: 0.1,
                attn_dropout: true,
                final_ln: true,
                init_std: 0.02,
            },
            measure: MeasureConfig {
                eval_set_size: 16,
                probe_count: 8,
                ood_seg_len: 6,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let tokens: Vec<Token> = vec![1, 5, 3, 3, 7, 0, 2, 6];
        let report = grad_check(&tiny_model(), &tokens, 3, 1e-5, 1e-4).unwrap();
        assert!(
            report.max_rel_err <= 1e-4,
            "max rel err {} on {}",
            report.max_rel_err,
            report.worst_tensor
        );
        assert!(!report.degraded);
    }

    #[test]
    fn gradients_match_finite_differences_with_mlp() {
        let cfg = ModelConfig { use_mlp: true, mlp_hidden: 12, ..tiny_model() };
        let tokens: Vec<Token> = vec![2, 2, 4, 1, 6, 5, 0, 3];
        let report = grad_check(&cfg, &tokens, 4, 1e-5, 1e-4).unwrap();
        assert!(
            report.max_rel_err <= 1e-4,
            "max rel err {} on {}",
            report.max_rel_err,
            report.worst_tensor
        );
    }

    #[test]
    fn coarse_step_size_flags_degraded_agreement() {
        let tokens: Vec<Token> = vec![1, 5, 3, 3, 7, 0, 2, 6];
        let fine = grad_check(&tiny_model(), &tokens, 3, 1e-5, 1e-4).unwrap();
        let coarse = grad_check(&tiny_model(), &tokens, 3, 1e-1, 1e-4).unwrap();
        assert!(coarse.max_rel_err > fine.max_rel_err);
        assert!(coarse.degraded);
    }

    #[test]
    fn zero_classifier_loss_is_exactly_log_vocab() {
        let cfg = ModelConfig { init_std: 0.0, ..tiny_model() };
        let mut rng = derive_rng(0, salts::INIT, 0);
        let params = ModelParameters::<f64>::init(cfg, &mut rng).unwrap();
        let batch = vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7]];
        let (loss, _) = batch_loss_and_grads(&params, &batch, false, None).unwrap();
        assert!((loss - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn duplicating_the_batch_preserves_loss() {
        let mut rng = derive_rng(9, salts::INIT, 0);
        let params = ModelParameters::<f64>::init(tiny_model(), &mut rng).unwrap();
        let batch = vec![vec![1, 2, 3, 4, 5], vec![5, 4, 3, 2, 1]];
        let doubled: Vec<Vec<Token>> =
            batch.iter().cloned().chain(batch.iter().cloned()).collect();
        let (a, ga) = batch_loss_and_grads(&params, &batch, false, None).unwrap();
        let (b, gb) = batch_loss_and_grads(&params, &doubled, false, None).unwrap();
        assert!((a - b).abs() < 1e-12);
        for (x, y) in ga.iter().zip(&gb) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn adamw_zero_grads_and_decay_behave() {
        let cfg = TrainConfig { weight_decay: 0.0, ..Default::default() };
        let mut rng = derive_rng(1, salts::INIT, 0);
        let mut params = ModelParameters::<f32>::init(tiny_model(), &mut rng).unwrap();
        let before = params.data.clone();
        let zeros = vec![0.0f32; params.n_params()];
        let mut opt = OptimizerState::new(params.n_params());
        adamw_step(&mut opt, &mut params, &zeros, &cfg);
        assert_eq!(params.data, before, "zero grads + zero wd must be a no-op");

        // wd > 0, zero grads: every parameter scales by (1 - lr*wd).
        let cfg = TrainConfig { weight_decay: 0.5, lr: 0.1, ..Default::default() };
        let mut opt = OptimizerState::new(params.n_params());
        let before = params.data.clone();
        adamw_step(&mut opt, &mut params, &zeros, &cfg);
        let wd_term = (0.1 * 0.5) as f32;
        for (after, before) in params.data.iter().zip(&before) {
            assert_eq!(*after, before - wd_term * before);
        }
    }

    #[test]
    fn adamw_single_step_matches_hand_computation() {
        // Single scalar parameter, g = 1 at step 1, defaults beta1=0.9,
        // beta2=0.999: after bias correction m_hat = v_hat = 1, so the
        // adaptive step is -lr / (1 + eps).
        let cfg = TrainConfig { weight_decay: 0.0, lr: 1e-3, ..Default::default() };
        let model = ModelConfig { init_std: 0.3, ..tiny_model() };
        let mut rng = derive_rng(2, salts::INIT, 0);
        let mut params = ModelParameters::<f32>::init(model, &mut rng).unwrap();
        let before = params.data[0];
        let mut grads = vec![0.0f32; params.n_params()];
        grads[0] = 1.0;
        let mut opt = OptimizerState::new(params.n_params());
        adamw_step(&mut opt, &mut params, &grads, &cfg);
        let expect = before - (1e-3 / (1.0 + 1e-8)) as f32;
        assert!((params.data[0] - expect).abs() < 5e-7, "{} vs {expect}", params.data[0]);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn training_is_deterministic_across_runs() {
        let cfg = tiny_train_cfg();
        let a = train(&cfg, None, TrainCallbacks::default()).unwrap();
        let b = train(&cfg, None, TrainCallbacks::default()).unwrap();
        assert_eq!(a.series.reports, b.series.reports);
        assert_eq!(a.params.data, b.params.data);
        assert!(a.series.reports.len() >= 2);
    }

    #[test]
    fn loss_decreases_over_short_run() {
        let cfg = TrainConfig { steps: 200, eval_every: 200, ..tiny_train_cfg() };
        let out = train(&cfg, None, TrainCallbacks::default()).unwrap();
        let first = out.series.reports.first().unwrap().train_loss;
        let last = out.series.last().unwrap().train_loss;
        assert!(last < first, "loss {first} -> {last} did not decrease");
    }

    #[test]
    fn early_stop_callback_halts_training() {
        let cfg = TrainConfig { steps: 1000, eval_every: 5, ..tiny_train_cfg() };
        let callbacks = TrainCallbacks {
            stop_when: Some(Box::new(|r: &MeasureReport| r.step >= 10)),
            ..Default::default()
        };
        let out = train(&cfg, None, callbacks).unwrap();
        assert_eq!(out.series.last().unwrap().step, 10);
    }

    #[test]
    fn checkpoints_are_written_and_loadable() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { steps: 10, eval_every: 5, ckpt_every: 5, ..tiny_train_cfg() };
        let out = train(&cfg, Some(dir.path()), TrainCallbacks::default()).unwrap();
        let restored = checkpoint::load(&dir.path().join("ckpt-10")).unwrap();
        assert_eq!(restored.data, out.params.data);
        assert!(dir.path().join("ckpt-5").exists());
    }

    #[test]
    fn weak_learning_marginal_moves_toward_train_dist() {
        // Even a brief 1-layer run should move the average predictive
        // distribution toward the power-law marginal.
        let mut cfg = tiny_train_cfg();
        cfg.model.n_layers = 1;
        cfg.steps = 400;
        cfg.eval_every = 400;
        let out = train(&cfg, None, TrainCallbacks::default()).unwrap();
        let dist = crate::measures::default_train_dist(16, 1.0).unwrap();
        let contexts: Vec<Vec<Token>> =
            out.eval_ctx.id_set.iter().take(32).map(|s| s.tokens.clone()).collect();
        let tv0 = crate::measures::avg_predictive_tv(&out.init_params, &contexts, &dist).unwrap();
        let tv1 = crate::measures::avg_predictive_tv(&out.params, &contexts, &dist).unwrap();
        assert!(tv1 < tv0, "tv {tv0} -> {tv1} did not shrink");
    }
}
