//! Circuit-level intervention engine: head removal, QK/OV substitution and
//! shuffling, bridge-subspace estimation from stacked QK circuits, keep/remove
//! projection edits, and the spiked-matrix construction used as a
//! ground-truth oracle for the whole pipeline.
//!
//! Every edit is copy-on-edit: the original parameters are never touched.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{DataError, ProbeSample};
use crate::linalg::{
    principal_subspace, LinalgError, Matrix, OrthonormalBasis, Side, SimilarityMode,
};
use crate::measures::{rank_heads, screen_pairs, HeadScoreTable, MeasureError, ScreenedLists};
use crate::model::{
    forward, ForwardOpts, HeadId, HeadTensor, ModelConfig, ModelError, ModelParameters,
};
use crate::{derive_rng, salts, Rng};

#[derive(Debug, Error)]
pub enum InterveneError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("head not found: {0}")]
    NotFound(HeadId),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Projection direction for `project_qk` edits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProjectionMode {
    /// Attention may only use the subspace: `W_QK <- W_QK * B * B^T`.
    Keep,
    /// The subspace is removed: `W_QK <- W_QK * (I - B * B^T)`.
    Remove,
}

/// Which circuit of a head an edit touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Circuit {
    Qk,
    Ov,
}

/// Shuffle flavor: permute circuits within the list, or replace each by a
/// uniformly drawn circuit from outside the list (with replacement).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShuffleMode {
    Within,
    Outside,
}

/// A declarative description of one intervention.
#[derive(Debug, Clone)]
pub enum HeadEdit {
    /// Attention matrices of the targets are forced to zero at forward time.
    Remove { targets: Vec<HeadId> },
    /// Each target's (wq, wk) pair is replaced by the source head's pair.
    /// Sources are read from the unedited parameters.
    SubstituteQk { map: Vec<(HeadId, HeadId)> },
    /// Each target's (wv, wo-block) pair is replaced by the source head's.
    SubstituteOv { map: Vec<(HeadId, HeadId)> },
    /// The target's key map is projected so the effective QK circuit becomes
    /// `W_QK * B * B^T` (keep) or `W_QK * (I - B * B^T)` (remove).
    ProjectQk { targets: Vec<HeadId>, basis: OrthonormalBasis, mode: ProjectionMode },
}

/// An edited model: fresh parameters plus the forward-time head mask that
/// realizes removals.
#[derive(Debug, Clone)]
pub struct EditedModel {
    pub params: ModelParameters<f32>,
    pub head_mask: Vec<HeadId>,
    pub label: String,
}

impl EditedModel {
    pub fn unedited(params: &ModelParameters<f32>) -> Self {
        Self { params: params.clone(), head_mask: Vec::new(), label: "original".into() }
    }
}

fn check_heads(params: &ModelParameters<f32>, heads: &[HeadId]) -> Result<(), InterveneError> {
    for &h in heads {
        if h.layer >= params.config.n_layers || h.head >= params.config.n_heads {
            return Err(InterveneError::NotFound(h));
        }
    }
    Ok(())
}

/// Applies an edit to a copy of the parameters; the original is untouched.
pub fn apply_edit(
    params: &ModelParameters<f32>,
    edit: &HeadEdit,
) -> Result<EditedModel, InterveneError> {
    match edit {
        HeadEdit::Remove { targets } => {
            check_heads(params, targets)?;
            let mut mask = targets.clone();
            mask.sort();
            mask.dedup();
            Ok(EditedModel {
                params: params.clone(),
                head_mask: mask,
                label: format!("remove {} heads", targets.len()),
            })
        }
        HeadEdit::SubstituteQk { map } => substitute(params, map, Circuit::Qk),
        HeadEdit::SubstituteOv { map } => substitute(params, map, Circuit::Ov),
        HeadEdit::ProjectQk { targets, basis, mode } => project_qk(params, targets, basis, *mode),
    }
}

fn substitute(
    params: &ModelParameters<f32>,
    map: &[(HeadId, HeadId)],
    circuit: Circuit,
) -> Result<EditedModel, InterveneError> {
    let all: Vec<HeadId> = map.iter().flat_map(|&(a, b)| [a, b]).collect();
    check_heads(params, &all)?;
    // Read every source from the unedited parameters first so cyclic maps
    // behave as simultaneous substitution.
    let sources: Vec<(Vec<f32>, Vec<f32>)> = map
        .iter()
        .map(|&(_, src)| match circuit {
            Circuit::Qk => (params.wq(src).unwrap().to_vec(), params.wk(src).unwrap().to_vec()),
            Circuit::Ov => (params.wv(src).unwrap().to_vec(), params.wo(src).unwrap().to_vec()),
        })
        .collect();
    let mut edited = params.clone();
    for (&(target, _), (a, b)) in map.iter().zip(&sources) {
        match circuit {
            Circuit::Qk => {
                edited.set_head_tensor(target, HeadTensor::Wq, a)?;
                edited.set_head_tensor(target, HeadTensor::Wk, b)?;
            }
            Circuit::Ov => {
                edited.set_head_tensor(target, HeadTensor::Wv, a)?;
                edited.set_head_tensor(target, HeadTensor::Wo, b)?;
            }
        }
    }
    Ok(EditedModel {
        params: edited,
        head_mask: Vec::new(),
        label: format!("substitute {:?} on {} heads", circuit, map.len()),
    })
}

fn project_qk(
    params: &ModelParameters<f32>,
    targets: &[HeadId],
    basis: &OrthonormalBasis,
    mode: ProjectionMode,
) -> Result<EditedModel, InterveneError> {
    check_heads(params, targets)?;
    let d = params.config.d_model;
    let dh = params.config.d_head();
    if basis.dim() != d {
        return Err(InterveneError::InvalidConfig(format!(
            "basis ambient dimension {} does not match d_model {d}",
            basis.dim()
        )));
    }
    // P = B B^T, or I - B B^T for removal. Replacing wk by P wk makes the
    // effective bilinear form W_QK,dt * P for every relative distance.
    let bbt = basis.projector();
    let proj = match mode {
        ProjectionMode::Keep => bbt,
        ProjectionMode::Remove => Matrix::identity(d).sub(&bbt),
    };
    let mut edited = params.clone();
    for &t in targets {
        let wk = params.wk(t)?;
        let mut new_wk = vec![0.0f32; d * dh];
        for i in 0..d {
            for j in 0..dh {
                let mut acc = 0.0f64;
                for l in 0..d {
                    acc += proj.get(i, l) * wk[l * dh + j] as f64;
                }
                new_wk[i * dh + j] = acc as f32;
            }
        }
        edited.set_head_tensor(t, HeadTensor::Wk, &new_wk)?;
    }
    Ok(EditedModel {
        params: edited,
        head_mask: Vec::new(),
        label: format!("project_qk {:?} rank {} on {} heads", mode, basis.rank(), targets.len()),
    })
}

/// Shuffles the chosen circuit across `head_list` (within) or replaces each
/// listed head's circuit by one drawn uniformly from outside the list, with
/// replacement (outside).
pub fn shuffle_heads(
    params: &ModelParameters<f32>,
    head_list: &[HeadId],
    circuit: Circuit,
    mode: ShuffleMode,
    rng: &mut Rng,
) -> Result<EditedModel, InterveneError> {
    if head_list.is_empty() {
        return Err(InterveneError::InvalidConfig("empty head list".into()));
    }
    check_heads(params, head_list)?;
    let map: Vec<(HeadId, HeadId)> = match mode {
        ShuffleMode::Within => {
            let mut perm: Vec<usize> = (0..head_list.len()).collect();
            // Fisher-Yates
            for i in (1..perm.len()).rev() {
                let j = rng.gen_range(0..=i);
                perm.swap(i, j);
            }
            head_list.iter().enumerate().map(|(i, &t)| (t, head_list[perm[i]])).collect()
        }
        ShuffleMode::Outside => {
            let complement: Vec<HeadId> = params
                .all_heads()
                .into_iter()
                .filter(|h| !head_list.contains(h))
                .collect();
            if complement.is_empty() {
                return Err(InterveneError::InvalidConfig(
                    "outside shuffle needs at least one head outside the list".into(),
                ));
            }
            head_list
                .iter()
                .map(|&t| (t, complement[rng.gen_range(0..complement.len())]))
                .collect()
        }
    };
    let mut out = match circuit {
        Circuit::Qk => substitute(params, &map, Circuit::Qk)?,
        Circuit::Ov => substitute(params, &map, Circuit::Ov)?,
    };
    out.label = format!("shuffle {circuit:?} {mode:?} over {} heads", head_list.len());
    Ok(out)
}

/// Uniform random K-subset of heads (partial Fisher-Yates); the random
/// baseline for the removal experiment.
pub fn random_head_subset(all: &[HeadId], k: usize, rng: &mut Rng) -> Vec<HeadId> {
    let k = k.min(all.len());
    let mut pool = all.to_vec();
    for i in 0..k {
        let j = i + rng.gen_range(0..pool.len() - i);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// How the per-head QK matrices are combined before the SVD.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StackOrientation {
    /// `(K*d) x d` vertical stack; the bridge is its top right singular
    /// subspace. Dimensionally forced by `V` living in `R^d`; the default.
    Vertical,
    /// `d x (K*d)` horizontal stack; the top left singular subspace. The
    /// alternative literal reading, kept behind this flag.
    Horizontal,
}

/// Estimates the shared bridge subspace from a collection of QK circuits.
pub fn bridge_subspace(
    qk_list: &[Matrix],
    r: usize,
    orientation: StackOrientation,
) -> Result<OrthonormalBasis, InterveneError> {
    if qk_list.is_empty() {
        return Err(InterveneError::InvalidConfig("empty QK list".into()));
    }
    let d = qk_list[0].cols();
    if r == 0 || r > d {
        return Err(InterveneError::Linalg(LinalgError::InvalidRank { r, max: d }));
    }
    let refs: Vec<&Matrix> = qk_list.iter().collect();
    let basis = match orientation {
        StackOrientation::Vertical => {
            let stacked = Matrix::vstack(&refs);
            principal_subspace(&stacked, Side::Right, r)?
        }
        StackOrientation::Horizontal => {
            let stacked = Matrix::hstack(&refs);
            principal_subspace(&stacked, Side::Left, r)?
        }
    };
    Ok(basis)
}

/// Default bridge rank at model dimension `d`.
pub fn default_bridge_rank(d: usize) -> usize {
    ((d as f64) / 20.0).round().max(2.0) as usize
}

/// Outcome of the full projection protocol.
#[derive(Debug)]
pub struct ProjectionProtocol {
    pub edited: EditedModel,
    pub screened: ScreenedLists,
    pub edited_heads: Vec<HeadId>,
    pub bridge_rank: usize,
    /// Set when the screened IH list was empty and no edit was applied.
    pub no_op: bool,
}

/// The projection intervention: estimate the bridge from the screened IH
/// list's QK circuits, then project the key maps of the top `edit_fraction`
/// of all heads (by IH score). An empty screened list yields a no-op edit.
#[allow(clippy::too_many_arguments)]
pub fn edit_protocol_projection(
    params: &ModelParameters<f32>,
    table: &HeadScoreTable,
    r: usize,
    mode: ProjectionMode,
    delta: f64,
    cap: usize,
    edit_fraction: f64,
) -> Result<ProjectionProtocol, InterveneError> {
    let screened = screen_pairs(table, params, delta, cap)?;
    if screened.ih.is_empty() {
        return Ok(ProjectionProtocol {
            edited: EditedModel::unedited(params),
            screened,
            edited_heads: Vec::new(),
            bridge_rank: r,
            no_op: true,
        });
    }
    let qks: Vec<Matrix> = screened
        .ih
        .iter()
        .map(|&h| params.extract_qk(h, 0))
        .collect::<Result<_, _>>()?;
    let basis = bridge_subspace(&qks, r, StackOrientation::Vertical)?;
    let n_heads = params.all_heads().len();
    let n_edit = ((edit_fraction * n_heads as f64).round() as usize).clamp(1, n_heads);
    let targets: Vec<HeadId> = table.ih_ranking.iter().take(n_edit).copied().collect();
    let edited = apply_edit(params, &HeadEdit::ProjectQk { targets: targets.clone(), basis, mode })?;
    Ok(ProjectionProtocol { edited, screened, edited_heads: targets, bridge_rank: r, no_op: false })
}

// ---------------------------------------------------------------------------
// Copy evaluation on (s#, s#, s#) triples
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PositionStat {
    /// 1-based position within the third block.
    pub t: usize,
    pub mean_prob: f64,
    pub mean_acc: f64,
}

/// Copy-prediction quality on probe triples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalStats {
    pub mean_prob: f64,
    pub mean_acc: f64,
    pub per_position: Vec<PositionStat>,
    pub n_samples: usize,
}

/// First evaluated position (1-based) within the third block.
pub const EVAL_FROM: usize = 6;

/// Scores pre-extracted per-sample rows of (probability of true token,
/// greedy correctness), one row per sample, one entry per evaluated position.
pub fn eval_copy_scores(rows: &[Vec<(f64, bool)>]) -> Result<EvalStats, InterveneError> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(InterveneError::InvalidConfig("no evaluation rows".into()));
    }
    let width = rows[0].len();
    if rows.iter().any(|r| r.len() != width) {
        return Err(InterveneError::InvalidConfig("ragged evaluation rows".into()));
    }
    let mut per_position = Vec::with_capacity(width);
    for j in 0..width {
        let prob: f64 = rows.iter().map(|r| r[j].0).sum::<f64>() / rows.len() as f64;
        let acc: f64 =
            rows.iter().map(|r| if r[j].1 { 1.0 } else { 0.0 }).sum::<f64>() / rows.len() as f64;
        per_position.push(PositionStat { t: EVAL_FROM + j, mean_prob: prob, mean_acc: acc });
    }
    let mean_prob = per_position.iter().map(|p| p.mean_prob).sum::<f64>() / width as f64;
    let mean_acc = per_position.iter().map(|p| p.mean_acc).sum::<f64>() / width as f64;
    Ok(EvalStats { mean_prob, mean_acc, per_position, n_samples: rows.len() })
}

/// Evaluates copying on `(s#, s#, s#)` probe triples: for each position
/// `t in {6..L}` of the third block, the probability assigned to the true
/// token and the greedy 0-1 correctness.
pub fn eval_copy(model: &EditedModel, triples: &[ProbeSample]) -> Result<EvalStats, InterveneError> {
    use rayon::prelude::*;
    if triples.is_empty() {
        return Err(InterveneError::InvalidConfig("no probe triples".into()));
    }
    for p in triples {
        if p.n_blocks != 3 {
            return Err(InterveneError::InvalidConfig("triples must have n_blocks = 3".into()));
        }
        if p.block_len < EVAL_FROM {
            return Err(InterveneError::InvalidConfig(format!(
                "block length {} shorter than the first evaluated position {EVAL_FROM}",
                p.block_len
            )));
        }
    }
    let rows: Result<Vec<Vec<(f64, bool)>>, InterveneError> = triples
        .par_iter()
        .map(|probe| {
            let l = probe.block_len;
            let opts = ForwardOpts { head_mask: &model.head_mask, ..Default::default() };
            let trace = forward(&model.params, &probe.tokens, opts)?;
            let mut row = Vec::with_capacity(l - EVAL_FROM + 1);
            for t in EVAL_FROM..=l {
                let target_idx = 2 * l + t - 1; // 0-based position of s#_t in the third block
                let target = probe.tokens[target_idx];
                let probs = trace.probs_row(target_idx - 1);
                let acc = trace.argmax(target_idx - 1) == target;
                row.push((probs[target as usize], acc));
            }
            Ok(row)
        })
        .collect();
    eval_copy_scores(&rows?)
}

// ---------------------------------------------------------------------------
// Spiked-circuit oracle
// ---------------------------------------------------------------------------

/// K QK/OV pairs sharing one planted rank-r spike:
/// `QK_j = U V^T + noise`, `OV_j = V U^T + noise`.
#[derive(Debug, Clone)]
pub struct SpikedCircuits {
    pub u: OrthonormalBasis,
    pub v: OrthonormalBasis,
    pub qk: Vec<Matrix>,
    pub ov: Vec<Matrix>,
    pub noise_scale: f64,
}

fn random_orthonormal(d: usize, r: usize, rng: &mut Rng) -> OrthonormalBasis {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < r {
        let mut c: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for prev in &cols {
            let dot: f64 = c.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (x, p) in c.iter_mut().zip(prev) {
                *x -= dot * p;
            }
        }
        let n = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            for x in c.iter_mut() {
                *x /= n;
            }
            cols.push(c);
        }
    }
    OrthonormalBasis::new(Matrix::from_fn(d, r, |i, j| cols[j][i])).expect("gram-schmidt output")
}

/// Draws the spiked circuits: `U, V` independent uniformly random
/// orthonormal `d x r`; noise entries i.i.d. Gaussian with standard
/// deviation `noise_scale / sqrt(d)`.
pub fn spiked_circuits(
    d: usize,
    r: usize,
    k: usize,
    noise_scale: f64,
    rng: &mut Rng,
) -> Result<SpikedCircuits, InterveneError> {
    if r > d {
        return Err(InterveneError::Linalg(LinalgError::InvalidRank { r, max: d }));
    }
    let u = random_orthonormal(d, r, rng);
    let v = random_orthonormal(d, r, rng);
    let spike_qk = u.columns().matmul(&v.columns().transpose());
    let spike_ov = v.columns().matmul(&u.columns().transpose());
    let sd = noise_scale / (d as f64).sqrt();
    let noisy = |base: &Matrix, rng: &mut Rng| {
        let noise = Matrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal) * sd);
        base.add(&noise)
    };
    let qk: Vec<Matrix> = (0..k).map(|_| noisy(&spike_qk, rng)).collect();
    let ov: Vec<Matrix> = (0..k).map(|_| noisy(&spike_ov, rng)).collect();
    Ok(SpikedCircuits { u, v, qk, ov, noise_scale })
}

/// Builds a real model whose first `k` layers each carry one spiked circuit
/// exactly (single head per layer, full-width heads: `wq = sqrt(d) * QK_j`,
/// `wk = I`, `wv = I`, `wo = OV_j`), plus `decoys` extra layers left at
/// random initialization.
pub fn assemble_spiked_model(
    circuits: &SpikedCircuits,
    decoys: usize,
    vocab: usize,
    t_max: usize,
    seed: u64,
) -> Result<ModelParameters<f32>, InterveneError> {
    let d = circuits.u.dim();
    let k = circuits.qk.len();
    let config = ModelConfig {
        vocab,
        d_model: d,
        n_layers: k + decoys,
        n_heads: 1,
        t_max,
        rope_theta: 10_000.0,
        use_mlp: false,
        mlp_hidden: 4 * d,
        dropout_rate: 0.0,
        attn_dropout: true,
        final_ln: true,
        init_std: 0.02,
    };
    let mut rng = derive_rng(seed, salts::INTERVENE, 0);
    let mut params = ModelParameters::<f32>::init(config, &mut rng)?;
    let scale = (d as f64).sqrt();
    let identity: Vec<f32> = {
        let mut m = vec![0.0f32; d * d];
        for i in 0..d {
            m[i * d + i] = 1.0;
        }
        m
    };
    for (j, (qk, ov)) in circuits.qk.iter().zip(&circuits.ov).enumerate() {
        let id = HeadId { layer: j, head: 0 };
        let wq: Vec<f32> = (0..d * d).map(|i| (qk.data()[i] * scale) as f32).collect();
        let wo: Vec<f32> = (0..d * d).map(|i| ov.data()[i] as f32).collect();
        params.set_head_tensor(id, HeadTensor::Wq, &wq)?;
        params.set_head_tensor(id, HeadTensor::Wk, &identity)?;
        params.set_head_tensor(id, HeadTensor::Wv, &identity)?;
        params.set_head_tensor(id, HeadTensor::Wo, &wo)?;
    }
    Ok(params)
}

/// One run of the end-to-end spiked oracle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpikedRecovery {
    pub similarity: f64,
    pub surviving_pairs: usize,
    pub screened_ih: usize,
    pub mean_pair_diag: f64,
    pub recovered: bool,
}

/// Full pipeline on a hand-assembled spiked model: rank heads by attention
/// scores, screen pairs at `delta`, estimate the bridge from the surviving
/// IH list, and compare against the planted `V`.
#[allow(clippy::too_many_arguments)]
pub fn spiked_pipeline(
    d: usize,
    r: usize,
    k: usize,
    noise_scale: f64,
    delta: f64,
    cap: usize,
    decoys: usize,
    seed: u64,
) -> Result<SpikedRecovery, InterveneError> {
    let mut rng = derive_rng(seed, salts::INTERVENE, 1);
    let circuits = spiked_circuits(d, r, k, noise_scale, &mut rng)?;
    let params = assemble_spiked_model(&circuits, decoys, 64, 64, seed)?;
    let table = rank_heads(&params, 20, 25, seed)?;
    let screened = screen_pairs(&table, &params, delta, cap)?;
    let mean_pair_diag = if screened.pairs.is_empty() {
        0.0
    } else {
        screened.pairs.iter().map(|p| p.diag).sum::<f64>() / screened.pairs.len() as f64
    };
    if screened.ih.is_empty() {
        return Ok(SpikedRecovery {
            similarity: 0.0,
            surviving_pairs: 0,
            screened_ih: 0,
            mean_pair_diag,
            recovered: false,
        });
    }
    let qks: Vec<Matrix> = screened
        .ih
        .iter()
        .map(|&h| params.extract_qk(h, 0))
        .collect::<Result<_, _>>()?;
    let basis = bridge_subspace(&qks, r, StackOrientation::Vertical)?;
    let similarity =
        crate::linalg::subspace_similarity(&basis, &circuits.v, SimilarityMode::Max)?;
    Ok(SpikedRecovery {
        similarity,
        surviving_pairs: screened.pairs.len(),
        screened_ih: screened.ih.len(),
        mean_pair_diag,
        recovered: similarity >= 0.95,
    })
}

/// Mean diagonal score of matched spiked pairs: closed form
/// `sqrt(r) * (d-1) / sqrt(d^2 - r)` at zero noise, just under `sqrt(r)`.
pub fn spiked_diag_ceiling(d: usize, r: usize) -> f64 {
    (r as f64).sqrt() * (d as f64 - 1.0) / ((d * d - r) as f64).sqrt()
}
