//! Progress measures and head-scoring protocols: ID/OOD copy error, the
//! diagonal score of the composed QK·OV circuit, subspace matching between
//! the writing and reading principal subspaces, previous-token / induction
//! attention scores, the token matching ratio, and the ranking + screening
//! pipeline that selects circuit pairs for interventions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{
    gen_copy_sample, gen_probe, power_law_dist, CopyingSample, DataError, DataSource, Token,
    TokenDistribution,
};
use crate::linalg::{
    principal_subspace, subspace_similarity, LinalgError, Matrix, Side, SimilarityMode,
};
use crate::model::{forward, ForwardOpts, HeadId, ModelConfig, ModelError, ModelParameters};
use crate::scalar::Real;
use crate::{derive_rng, salts};

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid meta: {0}")]
    InvalidMeta(String),
    #[error("degenerate matrix: entry spread below 1e-12")]
    DegenerateMatrix,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// One row of the training-dynamics record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureReport {
    pub step: u64,
    pub train_loss: f64,
    pub id_err: f64,
    pub ood_err: f64,
    pub diag_score: f64,
    pub submatch_max: f64,
    pub submatch_avg: f64,
    pub pth_score: f64,
    pub ih_score: f64,
    pub token_match_ratio: f64,
}

pub const CSV_HEADER: &str =
    "step,train_loss,id_err,ood_err,diag_score,submatch_max,submatch_avg,pth_score,ih_score,token_match_ratio";

impl MeasureReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.train_loss,
            self.id_err,
            self.ood_err,
            self.diag_score,
            self.submatch_max,
            self.submatch_avg,
            self.pth_score,
            self.ih_score,
            self.token_match_ratio
        )
    }

    pub fn parse_csv(line: &str) -> Result<Self, MeasureError> {
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 10 {
            return Err(MeasureError::InvalidInput(format!(
                "expected 10 CSV fields, found {}",
                fields.len()
            )));
        }
        let f = |i: usize| -> Result<f64, MeasureError> {
            fields[i]
                .parse()
                .map_err(|_| MeasureError::InvalidInput(format!("bad float {:?}", fields[i])))
        };
        Ok(Self {
            step: fields[0]
                .parse()
                .map_err(|_| MeasureError::InvalidInput(format!("bad step {:?}", fields[0])))?,
            train_loss: f(1)?,
            id_err: f(2)?,
            ood_err: f(3)?,
            diag_score: f(4)?,
            submatch_max: f(5)?,
            submatch_avg: f(6)?,
            pth_score: f(7)?,
            ih_score: f(8)?,
            token_match_ratio: f(9)?,
        })
    }
}

// ---------------------------------------------------------------------------
// Copy error
// ---------------------------------------------------------------------------

/// Number of leading second-segment positions excluded from the error: the
/// model needs a burn-in before the repetition is identifiable against noise.
pub const ERR_BURN_IN: usize = 4;

/// Greedy predictions for every position of a sequence: entry `t` holds the
/// argmax prediction for token `t` (from logits at `t - 1`); entry 0 is
/// unused.
pub fn greedy_predictions<T: Real>(
    params: &ModelParameters<T>,
    tokens: &[Token],
) -> Result<Vec<Token>, MeasureError> {
    let trace = forward(params, tokens, ForwardOpts::default())?;
    let mut preds = vec![0 as Token; tokens.len()];
    for t in 1..tokens.len() {
        preds[t] = trace.argmax(t - 1);
    }
    Ok(preds)
}

/// Scores predictions against the copy targets: average 0-1 error over the
/// 5th through last token of each second segment.
pub fn copy_error_from_predictions(
    predictions: &[Vec<Token>],
    samples: &[CopyingSample],
) -> Result<f64, MeasureError> {
    if samples.is_empty() {
        return Err(MeasureError::InvalidInput("empty sample list".into()));
    }
    let mut wrong = 0usize;
    let mut total = 0usize;
    for (preds, s) in predictions.iter().zip(samples) {
        let m = s.second_start;
        for t in m + ERR_BURN_IN..m + s.seg_len {
            total += 1;
            if preds[t] != s.tokens[t] {
                wrong += 1;
            }
        }
    }
    if total == 0 {
        return Err(MeasureError::InvalidInput(
            "no positions to evaluate: all segments shorter than the burn-in".into(),
        ));
    }
    Ok(wrong as f64 / total as f64)
}

/// ID/OOD copy error of a model over a sample set.
pub fn copy_error<T: Real>(
    params: &ModelParameters<T>,
    samples: &[CopyingSample],
) -> Result<f64, MeasureError> {
    if samples.is_empty() {
        return Err(MeasureError::InvalidInput("empty sample list".into()));
    }
    let predictions: Result<Vec<Vec<Token>>, MeasureError> = samples
        .par_iter()
        .map(|s| greedy_predictions(params, &s.tokens))
        .collect();
    copy_error_from_predictions(&predictions?, samples)
}

// ---------------------------------------------------------------------------
// Circuit measures
// ---------------------------------------------------------------------------

/// Signal-to-noise statistic of the diagonal of `qk * ov` under the
/// "lambda I + noise" reading: (mean of diagonal - mean of all entries) /
/// population standard deviation of all entries.
pub fn diagonal_score(qk: &Matrix, ov: &Matrix) -> Result<f64, MeasureError> {
    if qk.rows() != qk.cols() || ov.rows() != ov.cols() || qk.rows() != ov.rows() {
        return Err(MeasureError::InvalidInput("diagonal score needs square d x d factors".into()));
    }
    let w = qk.matmul(ov);
    let d = w.rows();
    let n = (d * d) as f64;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut diag = 0.0;
    for i in 0..d {
        for j in 0..d {
            let v = w.get(i, j);
            sum += v;
            sum_sq += v * v;
            if i == j {
                diag += v;
            }
        }
    }
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    let std = var.sqrt();
    if std < 1e-12 {
        return Err(MeasureError::DegenerateMatrix);
    }
    Ok((diag / d as f64 - mean) / std)
}

/// Alignment between the reading subspace of `qk` (top-r right singular
/// vectors) and the writing subspace of `ov` (top-r left singular vectors).
pub fn subspace_matching_score(
    qk: &Matrix,
    ov: &Matrix,
    r: usize,
    mode: SimilarityMode,
) -> Result<f64, MeasureError> {
    let u = principal_subspace(qk, Side::Right, r)?;
    let v = principal_subspace(ov, Side::Left, r)?;
    Ok(subspace_similarity(&u, &v, mode)?)
}

/// Previous-token attention score: average over inputs of
/// `(T-1)^-1 * sum_t A[t][t-1]`.
pub fn pth_score(attns: &[Matrix]) -> Result<f64, MeasureError> {
    if attns.is_empty() {
        return Err(MeasureError::InvalidInput("no attention matrices".into()));
    }
    let mut acc = 0.0;
    for a in attns {
        let t_len = a.rows();
        if t_len < 2 || a.cols() != t_len {
            return Err(MeasureError::InvalidInput("attention must be T x T with T >= 2".into()));
        }
        let mut s = 0.0;
        for t in 1..t_len {
            s += a.get(t, t - 1);
        }
        acc += s / (t_len - 1) as f64;
    }
    Ok(acc / attns.len() as f64)
}

/// Which attention entries the induction score reads: for each position `t`
/// in `indices` (a repeated token), the entry `A[t][t - offset + 1]` pointing
/// at the to-be-copied token.
#[derive(Debug, Clone)]
pub struct IhMeta {
    pub indices: Vec<usize>,
    pub offset: usize,
}

impl IhMeta {
    pub fn from_copying(sample: &CopyingSample) -> Self {
        Self {
            indices: sample.second_segment().collect(),
            offset: sample.repeat_offset(),
        }
    }

    /// For an `(s#, s#)` probe: the second block repeats at distance
    /// `block_len`.
    pub fn from_probe(block_len: usize) -> Self {
        Self { indices: (block_len..2 * block_len).collect(), offset: block_len }
    }
}

/// Induction-head attention score: average attention mass on the
/// to-be-copied token over the repeated positions.
pub fn ih_score(attns: &[Matrix], meta: &[IhMeta]) -> Result<f64, MeasureError> {
    if attns.is_empty() || attns.len() != meta.len() {
        return Err(MeasureError::InvalidInput("attention/meta length mismatch or empty".into()));
    }
    let mut acc = 0.0;
    for (a, m) in attns.iter().zip(meta) {
        if m.indices.is_empty() {
            return Err(MeasureError::InvalidMeta("empty repeat index set".into()));
        }
        let t_len = a.rows();
        let mut s = 0.0;
        for &t in &m.indices {
            if t + 1 < m.offset || t >= t_len {
                return Err(MeasureError::InvalidMeta(format!(
                    "index {t} with offset {} out of range",
                    m.offset
                )));
            }
            s += a.get(t, t + 1 - m.offset);
        }
        acc += s / m.indices.len() as f64;
    }
    Ok(acc / attns.len() as f64)
}

/// Fraction of vocabulary tokens whose own embedding maximally activates the
/// composed circuit: `argmax_{j'} e_j^T W e_{j'} == j`, ties to the lowest
/// index. With `restricted` the argmax only ranges over `j' <= j`.
pub fn token_matching_ratio(embed: &Matrix, qkov: &Matrix, restricted: bool) -> Result<f64, MeasureError> {
    if embed.cols() != qkov.rows() || qkov.rows() != qkov.cols() {
        return Err(MeasureError::InvalidInput("embedding/circuit shape mismatch".into()));
    }
    let vocab = embed.rows();
    let scores = embed.matmul(qkov).matmul(&embed.transpose());
    let mut hits = 0usize;
    for j in 0..vocab {
        let limit = if restricted { j + 1 } else { vocab };
        let row = scores.row(j);
        let mut best = 0usize;
        for (jp, &v) in row.iter().enumerate().take(limit) {
            if v > row[best] {
                best = jp;
            }
        }
        if best == j {
            hits += 1;
        }
    }
    Ok(hits as f64 / vocab as f64)
}

// ---------------------------------------------------------------------------
// Head ranking and screening
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadScore {
    #[serde(flatten)]
    pub head: HeadId,
    pub pth: f64,
    pub ih: f64,
}

/// Per-head PTH/IH scores plus descending rankings
/// (ties broken lexicographically by (layer, head)).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadScoreTable {
    pub scores: Vec<HeadScore>,
    pub pth_ranking: Vec<HeadId>,
    pub ih_ranking: Vec<HeadId>,
}

impl HeadScoreTable {
    pub fn score_of(&self, id: HeadId) -> Option<&HeadScore> {
        self.scores.iter().find(|s| s.head == id)
    }

    pub fn top_pth(&self) -> HeadId {
        self.pth_ranking[0]
    }

    pub fn top_ih(&self) -> HeadId {
        self.ih_ranking[0]
    }
}

fn attn_as_matrix<T: Real>(attn: &[T], t_len: usize) -> Matrix {
    Matrix::from_fn(t_len, t_len, |i, j| attn[i * t_len + j].as_f64())
}

/// Captures every head's attention on each input and averages the two
/// pattern scores. IH inputs carry repeat metadata; PTH inputs are plain
/// sequences.
pub fn score_heads<T: Real>(
    params: &ModelParameters<T>,
    ih_inputs: &[(Vec<Token>, IhMeta)],
    pth_inputs: &[Vec<Token>],
) -> Result<HeadScoreTable, MeasureError> {
    if ih_inputs.is_empty() || pth_inputs.is_empty() {
        return Err(MeasureError::InvalidInput("probe sets must be non-empty".into()));
    }
    let heads = params.all_heads();

    let ih_sums: Result<Vec<Vec<f64>>, MeasureError> = ih_inputs
        .par_iter()
        .map(|(tokens, meta)| {
            let trace = forward(params, tokens, ForwardOpts::capture())?;
            heads
                .iter()
                .map(|&h| {
                    let a = attn_as_matrix(trace.attention(h).unwrap(), tokens.len());
                    ih_score(std::slice::from_ref(&a), std::slice::from_ref(meta))
                })
                .collect()
        })
        .collect();
    let pth_sums: Result<Vec<Vec<f64>>, MeasureError> = pth_inputs
        .par_iter()
        .map(|tokens| {
            let trace = forward(params, tokens, ForwardOpts::capture())?;
            heads
                .iter()
                .map(|&h| {
                    let a = attn_as_matrix(trace.attention(h).unwrap(), tokens.len());
                    pth_score(std::slice::from_ref(&a))
                })
                .collect()
        })
        .collect();
    let (ih_sums, pth_sums) = (ih_sums?, pth_sums?);

    let avg = |per_input: &[Vec<f64>], h: usize| -> f64 {
        per_input.iter().map(|row| row[h]).sum::<f64>() / per_input.len() as f64
    };
    let scores: Vec<HeadScore> = heads
        .iter()
        .enumerate()
        .map(|(i, &head)| HeadScore { head, pth: avg(&pth_sums, i), ih: avg(&ih_sums, i) })
        .collect();

    let ranking = |key: fn(&HeadScore) -> f64| -> Vec<HeadId> {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| {
            key(&scores[b])
                .partial_cmp(&key(&scores[a]))
                .unwrap()
                .then(scores[a].head.cmp(&scores[b].head))
        });
        order.into_iter().map(|i| scores[i].head).collect()
    };
    Ok(HeadScoreTable {
        pth_ranking: ranking(|s| s.pth),
        ih_ranking: ranking(|s| s.ih),
        scores,
    })
}

/// The head-ranking protocol on its standard probes: repeated-block probes
/// for IH scores and pure-random sequences of the same length for PTH scores.
pub fn rank_heads<T: Real>(
    params: &ModelParameters<T>,
    probe_count: usize,
    block_len: usize,
    seed: u64,
) -> Result<HeadScoreTable, MeasureError> {
    let vocab = params.config.vocab;
    let mut ih_inputs = Vec::with_capacity(probe_count);
    let mut pth_inputs = Vec::with_capacity(probe_count);
    for i in 0..probe_count {
        let mut rng = derive_rng(seed, salts::PROBES, i as u64);
        let probe = gen_probe(block_len, 2, vocab, &mut rng)?;
        ih_inputs.push((probe.tokens, IhMeta::from_probe(block_len)));
        let mut rng = derive_rng(seed, salts::PROBES, (1 << 32) + i as u64);
        let rand = gen_probe(2 * block_len, 1, vocab, &mut rng)?;
        pth_inputs.push(rand.tokens);
    }
    score_heads(params, &ih_inputs, &pth_inputs)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScreenedPair {
    pub ih: HeadId,
    pub pth: HeadId,
    pub diag: f64,
}

/// Ordered deduplicated IH and PTH lists surviving the diagonal-score cutoff.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ScreenedLists {
    pub pairs: Vec<ScreenedPair>,
    pub ih: Vec<HeadId>,
    pub pth: Vec<HeadId>,
}

/// Pairs the top-`cap` IHs with the top-`cap` PTHs, keeps pairs whose
/// diagonal score reaches `delta`, and reads off deduplicated head lists in
/// pair order (at most `cap` heads each). Empty lists are a legal outcome.
pub fn screen_pairs<T: Real>(
    table: &HeadScoreTable,
    params: &ModelParameters<T>,
    delta: f64,
    cap: usize,
) -> Result<ScreenedLists, MeasureError> {
    let top_ih: Vec<HeadId> = table.ih_ranking.iter().take(cap).copied().collect();
    let top_pth: Vec<HeadId> = table.pth_ranking.iter().take(cap).copied().collect();
    let mut pairs = Vec::new();
    for &ih in &top_ih {
        let qk = params.extract_qk(ih, 0)?;
        for &pth in &top_pth {
            let ov = params.extract_ov(pth)?;
            // A degenerate product has no diagonal structure to speak of;
            // such a pair can never reach a positive cutoff.
            if let Ok(diag) = diagonal_score(&qk, &ov) {
                pairs.push(ScreenedPair { ih, pth, diag });
            }
        }
    }
    pairs.sort_by(|a, b| {
        b.diag
            .partial_cmp(&a.diag)
            .unwrap()
            .then(a.ih.cmp(&b.ih))
            .then(a.pth.cmp(&b.pth))
    });
    pairs.retain(|p| p.diag >= delta);

    let mut ih = Vec::new();
    let mut pth = Vec::new();
    for p in &pairs {
        if !ih.contains(&p.ih) && ih.len() < cap {
            ih.push(p.ih);
        }
        if !pth.contains(&p.pth) && pth.len() < cap {
            pth.push(p.pth);
        }
    }
    Ok(ScreenedLists { pairs, ih, pth })
}

// ---------------------------------------------------------------------------
// Evaluation context and the full measure suite
// ---------------------------------------------------------------------------

/// Knobs for the measure suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeasureConfig {
    /// Rank parameter of the subspace matching score.
    pub rank_r: usize,
    /// ID and OOD evaluation set sizes.
    pub eval_set_size: usize,
    /// Number of probe sequences for PTH/IH scoring.
    pub probe_count: usize,
    /// Relative distance used when extracting the QK circuit.
    pub delta_t: usize,
    /// Restrict the token-matching argmax to `j' <= j`.
    pub restricted_argmax: bool,
    /// Segment length of the out-of-distribution test sequences.
    pub ood_seg_len: usize,
}

impl Default for MeasureConfig {
    fn default() -> Self {
        Self {
            rank_r: 10,
            eval_set_size: 5000,
            probe_count: 100,
            delta_t: 0,
            restricted_argmax: false,
            ood_seg_len: 25,
        }
    }
}

/// Fixed evaluation data, built once per run from a dedicated seed.
pub struct EvalContext {
    pub id_set: Vec<CopyingSample>,
    pub ood_set: Vec<CopyingSample>,
    pub ood_dist: TokenDistribution,
    /// Pure-random sequences scored for previous-token attention.
    pub pth_probes: Vec<Vec<Token>>,
    /// OOD copying sequences (with repeat metadata) scored for induction.
    pub ih_eval: Vec<(Vec<Token>, IhMeta)>,
}

impl EvalContext {
    pub fn build(
        seed: u64,
        source: &DataSource,
        model_cfg: &ModelConfig,
        mcfg: &MeasureConfig,
    ) -> Result<Self, MeasureError> {
        let t_max = source.spec().t_max;
        let id_set: Vec<CopyingSample> = (0..mcfg.eval_set_size)
            .map(|i| {
                let mut rng = derive_rng(seed, salts::EVAL_SET, i as u64);
                source.sample(&mut rng)
            })
            .collect::<Result<_, _>>()?;
        let ood_dist = TokenDistribution::uniform(model_cfg.vocab);
        let ood_l = [mcfg.ood_seg_len];
        let ood_set: Vec<CopyingSample> = (0..mcfg.eval_set_size)
            .map(|i| {
                let mut rng = derive_rng(seed, salts::EVAL_SET, (1 << 32) + i as u64);
                gen_copy_sample(&ood_dist, t_max, &ood_l, &mut rng)
            })
            .collect::<Result<_, _>>()?;
        let probe_len = 50.min(model_cfg.t_max);
        let pth_probes: Vec<Vec<Token>> = (0..mcfg.probe_count)
            .map(|i| {
                let mut rng = derive_rng(seed, salts::PROBES, (2 << 32) + i as u64);
                gen_probe(probe_len, 1, model_cfg.vocab, &mut rng).map(|p| p.tokens)
            })
            .collect::<Result<_, _>>()?;
        let ih_eval: Vec<(Vec<Token>, IhMeta)> = ood_set
            .iter()
            .take(mcfg.probe_count)
            .map(|s| (s.tokens.clone(), IhMeta::from_copying(s)))
            .collect();
        Ok(Self { id_set, ood_set, ood_dist, pth_probes, ih_eval })
    }
}

/// Runs every progress measure on frozen parameters.
///
/// The circuit pair feeding the diagonal, subspace-matching, and
/// token-matching measures is the top-1 IH's QK with the top-1 PTH's OV at
/// this evaluation step; for the 2-layer 1-head model after the transition
/// this is the second layer's QK against the first layer's OV.
pub fn measure_suite<T: Real>(
    params: &ModelParameters<T>,
    ctx: &EvalContext,
    mcfg: &MeasureConfig,
    step: u64,
    train_loss: f64,
) -> Result<MeasureReport, MeasureError> {
    let id_err = copy_error(params, &ctx.id_set)?;
    let ood_err = copy_error(params, &ctx.ood_set)?;
    let table = score_heads(params, &ctx.ih_eval, &ctx.pth_probes)?;
    let top_ih = table.top_ih();
    let top_pth = table.top_pth();
    let qk = params.extract_qk(top_ih, mcfg.delta_t)?;
    let ov = params.extract_ov(top_pth)?;
    let diag_score = diagonal_score(&qk, &ov)?;
    let submatch_max = subspace_matching_score(&qk, &ov, mcfg.rank_r, SimilarityMode::Max)?;
    let submatch_avg = subspace_matching_score(&qk, &ov, mcfg.rank_r, SimilarityMode::Avg)?;
    let qkov = qk.matmul(&ov);
    let token_match_ratio =
        token_matching_ratio(&params.embed_matrix(), &qkov, mcfg.restricted_argmax)?;
    let pth = table.score_of(top_pth).unwrap().pth;
    let ih = table.score_of(top_ih).unwrap().ih;
    Ok(MeasureReport {
        step,
        train_loss,
        id_err,
        ood_err,
        diag_score,
        submatch_max,
        submatch_avg,
        pth_score: pth,
        ih_score: ih,
        token_match_ratio,
    })
}

/// Average predictive distribution over the positions of the given contexts,
/// as total variation distance to `reference`. Used to detect weak learning:
/// a model that only fits the marginal token distribution drives this to 0.
pub fn avg_predictive_tv<T: Real>(
    params: &ModelParameters<T>,
    contexts: &[Vec<Token>],
    reference: &TokenDistribution,
) -> Result<f64, MeasureError> {
    if contexts.is_empty() {
        return Err(MeasureError::InvalidInput("no contexts".into()));
    }
    let vocab = params.config.vocab;
    let partial: Result<Vec<(Vec<f64>, usize)>, MeasureError> = contexts
        .par_iter()
        .map(|tokens| {
            let trace = forward(params, tokens, ForwardOpts::default())?;
            let mut acc = vec![0.0f64; vocab];
            for t in 0..tokens.len() - 1 {
                for (a, p) in acc.iter_mut().zip(trace.probs_row(t)) {
                    *a += p;
                }
            }
            Ok((acc, tokens.len() - 1))
        })
        .collect();
    let mut mean = vec![0.0f64; vocab];
    let mut count = 0usize;
    for (acc, n) in partial? {
        for (m, a) in mean.iter_mut().zip(&acc) {
            *m += a;
        }
        count += n;
    }
    for m in mean.iter_mut() {
        *m /= count as f64;
    }
    Ok(reference.total_variation(&mean))
}

/// The default power-law training distribution.
pub fn default_train_dist(vocab: usize, alpha: f64) -> Result<TokenDistribution, MeasureError> {
    Ok(power_law_dist(alpha, vocab)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::DataSpec;
    use crate::{derive_rng, salts};
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = derive_rng(seed, salts::INIT, 3);
        Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    fn random_orthonormal(dim: usize, rank: usize, seed: u64) -> Matrix {
        let mut rng = derive_rng(seed, salts::INIT, 4);
        let mut cols: Vec<Vec<f64>> = Vec::new();
        while cols.len() < rank {
            let mut c: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
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
        Matrix::from_fn(dim, rank, |i, j| cols[j][i])
    }

    // ---- copy error ----

    #[test]
    fn oracle_copier_scores_zero() {
        let dist = TokenDistribution::uniform(16);
        let samples: Vec<CopyingSample> = (0..10)
            .map(|i| {
                let mut rng = derive_rng(i, salts::DATA, 0);
                gen_copy_sample(&dist, 32, &[8], &mut rng).unwrap()
            })
            .collect();
        let preds: Vec<Vec<Token>> = samples.iter().map(|s| s.tokens.clone()).collect();
        assert_eq!(copy_error_from_predictions(&preds, &samples).unwrap(), 0.0);
    }

    #[test]
    fn constant_wrong_predictor_scores_one() {
        let dist = TokenDistribution::uniform(16);
        let mut rng = derive_rng(0, salts::DATA, 1);
        let s = gen_copy_sample(&dist, 32, &[8], &mut rng).unwrap();
        let preds = vec![vec![99 as Token; 32]];
        assert_eq!(copy_error_from_predictions(&preds, std::slice::from_ref(&s)).unwrap(), 1.0);
    }

    #[test]
    fn untrained_model_error_near_chance_on_uniform_targets() {
        // A fresh-init model predicts a token determined by the final input
        // token only; against uniform targets the expected error is 1 - 1/64.
        let cfg = ModelConfig::default_2l1h();
        let mut rng = derive_rng(5, salts::INIT, 0);
        let params = ModelParameters::<f32>::init(cfg, &mut rng).unwrap();
        let dist = TokenDistribution::uniform(64);
        let samples: Vec<CopyingSample> = (0..50)
            .map(|i| {
                let mut rng = derive_rng(600 + i, salts::DATA, 2);
                gen_copy_sample(&dist, 64, &[25], &mut rng).unwrap()
            })
            .collect();
        let err = copy_error(&params, &samples).unwrap();
        // 3 standard errors of a Bernoulli(63/64) mean over 50*21 positions
        // is 0.0115.
        assert!((err - (1.0 - 1.0 / 64.0)).abs() < 0.012, "err {err}");
    }

    #[test]
    fn empty_sample_list_is_invalid() {
        assert!(copy_error_from_predictions(&[], &[]).is_err());
    }

    // ---- diagonal score ----

    #[test]
    fn diagonal_score_of_identity_is_sqrt_dm1() {
        // Closed form: z(I_d) = sqrt(d - 1).
        let z = diagonal_score(&Matrix::identity(64), &Matrix::identity(64)).unwrap();
        assert!((z - 63.0f64.sqrt()).abs() < 1e-9, "z = {z}");
    }

    #[test]
    fn diagonal_score_is_scale_invariant() {
        let qk = random_matrix(16, 16, 1);
        let ov = random_matrix(16, 16, 2);
        let z = diagonal_score(&qk, &ov).unwrap();
        let z2 = diagonal_score(&qk.scale(3.7), &ov.scale(0.2)).unwrap();
        assert!((z - z2).abs() < 1e-9);
    }

    #[test]
    fn all_ones_product_is_degenerate() {
        // qk = ones, ov = identity: product has zero spread.
        let ones = Matrix::from_fn(8, 8, |_, _| 1.0);
        assert!(matches!(
            diagonal_score(&ones, &Matrix::identity(8)),
            Err(MeasureError::DegenerateMatrix)
        ));
    }

    // ---- subspace matching ----

    #[test]
    fn spiked_pair_at_zero_noise_matches_perfectly() {
        let (d, r) = (32, 4);
        let u = random_orthonormal(d, r, 10);
        let v = random_orthonormal(d, r, 11);
        let qk = u.matmul(&v.transpose());
        let ov = v.matmul(&u.transpose());
        let s = subspace_matching_score(&qk, &ov, r, SimilarityMode::Max).unwrap();
        assert!((s - 1.0).abs() < 1e-9, "s = {s}");
        let s = subspace_matching_score(&qk, &ov, r, SimilarityMode::Avg).unwrap();
        assert!((s - 1.0).abs() < 1e-9, "avg = {s}");
    }

    #[test]
    fn fresh_model_submatch_sits_in_random_band() {
        // Monte-Carlo reference for independent 10-dim subspaces of R^64:
        // mean 0.671, sd 0.045 (300 draws). One draw must land within 5 sd.
        let cfg = ModelConfig::default_2l1h();
        let mut rng = derive_rng(21, salts::INIT, 0);
        let params = ModelParameters::<f32>::init(cfg, &mut rng).unwrap();
        let qk = params.extract_qk(HeadId { layer: 1, head: 0 }, 0).unwrap();
        let ov = params.extract_ov(HeadId { layer: 0, head: 0 }).unwrap();
        for r in [5usize, 10, 15, 20] {
            let s = subspace_matching_score(&qk, &ov, r, SimilarityMode::Max).unwrap();
            assert!((0.0..=1.0).contains(&s));
            if r == 10 {
                assert!((s - 0.671).abs() < 5.0 * 0.045, "init submatch {s} outside band");
            }
        }
    }

    // ---- attention pattern scores ----

    fn shifter(t_len: usize) -> Matrix {
        Matrix::from_fn(t_len, t_len, |i, j| {
            if i == 0 && j == 0 {
                1.0
            } else if i > 0 && j == i - 1 {
                1.0
            } else {
                0.0
            }
        })
    }

    fn uniform_causal(t_len: usize) -> Matrix {
        Matrix::from_fn(t_len, t_len, |i, j| if j <= i { 1.0 / (i + 1) as f64 } else { 0.0 })
    }

    #[test]
    fn perfect_shifter_scores_one() {
        assert!((pth_score(&[shifter(12)]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identity_attention_scores_zero() {
        assert_eq!(pth_score(&[Matrix::identity(12)]).unwrap(), 0.0);
    }

    #[test]
    fn uniform_causal_matches_harmonic_sum() {
        // (T-1)^-1 * sum_{t=2..T} 1/t in 1-based terms.
        let t_len = 50;
        let want: f64 = (2..=t_len).map(|t| 1.0 / t as f64).sum::<f64>() / (t_len - 1) as f64;
        let got = pth_score(&[uniform_causal(t_len)]).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn handcrafted_induction_pattern_scores_one() {
        let (block, t_len) = (5usize, 10usize);
        let meta = IhMeta::from_probe(block);
        let a = Matrix::from_fn(t_len, t_len, |i, j| {
            if i >= block && j == i + 1 - block {
                1.0
            } else if i < block && j == 0 {
                1.0
            } else {
                0.0
            }
        });
        assert!((ih_score(&[a], std::slice::from_ref(&meta)).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shifter_scores_zero_induction_for_long_blocks() {
        let block = 5;
        let meta = IhMeta::from_probe(block);
        assert_eq!(ih_score(&[shifter(10)], &[meta]).unwrap(), 0.0);
    }

    #[test]
    fn uniform_causal_induction_is_mean_inverse_row() {
        let block = 5;
        let meta = IhMeta::from_probe(block);
        let want: f64 =
            meta.indices.iter().map(|&t| 1.0 / (t + 1) as f64).sum::<f64>() / block as f64;
        let got = ih_score(&[uniform_causal(10)], std::slice::from_ref(&meta)).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn ih_meta_out_of_range_is_invalid() {
        let meta = IhMeta { indices: vec![2], offset: 5 };
        assert!(matches!(
            ih_score(&[uniform_causal(10)], &[meta]),
            Err(MeasureError::InvalidMeta(_))
        ));
    }

    // ---- token matching ----

    #[test]
    fn identity_circuit_with_orthonormal_embeddings_matches_all() {
        let e = random_orthonormal(16, 16, 30).transpose(); // vocab x d, orthonormal rows
        let r = token_matching_ratio(&e, &Matrix::identity(16), false).unwrap();
        assert_eq!(r, 1.0);
    }

    #[test]
    fn negated_identity_matches_nothing() {
        // Self-score -1 loses to cross-score 0 under lowest-index tie-break.
        let e = random_orthonormal(16, 16, 31).transpose();
        let r = token_matching_ratio(&e, &Matrix::identity(16).scale(-1.0), false).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn random_circuit_matches_at_chance_rate() {
        // Monte-Carlo reference (2000 draws, independent generator):
        // mean 0.0158, sd 0.0158. Over 200 seeds the standard error is
        // 0.00112; assert within ~4.5 SE.
        let n = 200u64;
        let mut acc = 0.0;
        for seed in 0..n {
            let e = random_matrix(64, 64, 4000 + seed);
            let w = random_matrix(64, 64, 8000 + seed);
            acc += token_matching_ratio(&e, &w, false).unwrap();
        }
        let mean = acc / n as f64;
        assert!((mean - 0.0158).abs() < 4.5 * 0.00112, "mean {mean}");
    }

    #[test]
    fn restricted_argmax_variant_differs() {
        // Token 0's restricted argmax ranges over {0} only, so it always
        // matches itself.
        let e = random_matrix(8, 8, 50);
        let w = random_matrix(8, 8, 51).scale(-1.0);
        let full = token_matching_ratio(&e, &w, false).unwrap();
        let restricted = token_matching_ratio(&e, &w, true).unwrap();
        assert!(restricted >= 1.0 / 8.0);
        assert!(restricted >= full);
    }

    // ---- ranking and screening ----

    fn tiny_cfg(n_layers: usize, n_heads: usize) -> ModelConfig {
        ModelConfig {
            vocab: 16,
            d_model: 16,
            n_layers,
            n_heads,
            t_max: 24,
            rope_theta: 10_000.0,
            use_mlp: false,
            mlp_hidden: 16,
            dropout_rate: 0.0,
            attn_dropout: true,
            final_ln: true,
            init_std: 0.02,
        }
    }

    #[test]
    fn rankings_are_permutations() {
        let mut rng = derive_rng(60, salts::INIT, 0);
        let params = ModelParameters::<f32>::init(tiny_cfg(2, 2), &mut rng).unwrap();
        let table = rank_heads(&params, 8, 10, 61).unwrap();
        assert_eq!(table.scores.len(), 4);
        let mut pth = table.pth_ranking.clone();
        let mut ih = table.ih_ranking.clone();
        pth.sort();
        ih.sort();
        assert_eq!(pth, params.all_heads());
        assert_eq!(ih, params.all_heads());
    }

    #[test]
    fn screen_with_infinite_cutoff_empties_lists() {
        let mut rng = derive_rng(62, salts::INIT, 0);
        let params = ModelParameters::<f32>::init(tiny_cfg(1, 2), &mut rng).unwrap();
        let table = rank_heads(&params, 4, 8, 63).unwrap();
        let screened = screen_pairs(&table, &params, f64::INFINITY, 10).unwrap();
        assert!(screened.ih.is_empty() && screened.pth.is_empty());
    }

    // ---- serialization ----

    #[test]
    fn csv_roundtrip_preserves_report() {
        let r = MeasureReport {
            step: 1500,
            train_loss: 2.345678901,
            id_err: 0.25,
            ood_err: 0.875,
            diag_score: 1.25e-3,
            submatch_max: 0.66,
            submatch_avg: 0.5,
            pth_score: 0.125,
            ih_score: 0.0625,
            token_match_ratio: 0.015625,
        };
        let parsed = MeasureReport::parse_csv(&r.csv_row()).unwrap();
        assert_eq!(r, parsed);
    }

    #[test]
    fn head_table_json_is_flat() {
        let score = HeadScore { head: HeadId { layer: 3, head: 7 }, pth: 0.5, ih: 0.25 };
        let json = serde_json::to_value(&score).unwrap();
        assert_eq!(json["layer"], 3);
        assert_eq!(json["head"], 7);
        assert_eq!(json["pth"], 0.5);
    }

    #[test]
    fn eval_context_is_deterministic() {
        let spec = DataSpec { alpha: 1.0, l_set: (10..20).collect(), t_max: 64, pool_size: None };
        let source = DataSource::new(spec, 64, 99).unwrap();
        let mcfg = MeasureConfig { eval_set_size: 20, probe_count: 5, ..Default::default() };
        let cfg = ModelConfig::default_2l1h();
        let a = EvalContext::build(7, &source, &cfg, &mcfg).unwrap();
        let b = EvalContext::build(7, &source, &cfg, &mcfg).unwrap();
        assert_eq!(a.id_set, b.id_set);
        assert_eq!(a.ood_set, b.ood_set);
        assert_eq!(a.id_set.len(), 20);
        assert!(a.ood_set.iter().all(|s| s.seg_len == 25));
    }
}
