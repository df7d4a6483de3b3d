//! Deterministic generators for every dataset the experiments use: copying
//! sequences with planted repeated segments (ID and OOD variants), repetition
//! pools, repeat probes for head scoring, and pure-random sequences.
//!
//! All generation is pure given a seeded generator; batch helpers derive one
//! stream per sample index so contents never depend on worker count.

use std::io::Write as _;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Rng;

pub type Token = u32;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// A probability distribution over the token vocabulary.
#[derive(Debug, Clone)]
pub struct TokenDistribution {
    probs: Vec<f64>,
    cdf: Vec<f64>,
}

impl TokenDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, DataError> {
        if probs.is_empty() {
            return Err(DataError::InvalidInput("empty distribution".into()));
        }
        if probs.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(DataError::InvalidInput("negative or non-finite probability".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(DataError::InvalidInput(format!("probabilities sum to {sum}, not 1")));
        }
        let mut cdf = Vec::with_capacity(probs.len());
        let mut acc = 0.0;
        for &p in &probs {
            acc += p;
            cdf.push(acc);
        }
        *cdf.last_mut().unwrap() = 1.0;
        Ok(Self { probs, cdf })
    }

    pub fn uniform(n: usize) -> Self {
        Self::new(vec![1.0 / n as f64; n]).unwrap()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn vocab(&self) -> usize {
        self.probs.len()
    }

    /// Inverse-CDF sampling; one uniform draw per token.
    pub fn sample(&self, rng: &mut Rng) -> Token {
        let u: f64 = rng.gen();
        match self.cdf.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
            Ok(i) | Err(i) => i.min(self.cdf.len() - 1) as Token,
        }
    }

    /// Total variation distance to another distribution on the same vocabulary.
    pub fn total_variation(&self, other: &[f64]) -> f64 {
        0.5 * self
            .probs
            .iter()
            .zip(other)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }
}

/// Power-law distribution: `probs[i]` proportional to `(i+1)^(-alpha)`.
/// `alpha = 0` gives the uniform distribution.
pub fn power_law_dist(alpha: f64, n: usize) -> Result<TokenDistribution, DataError> {
    if !(alpha >= 0.0) {
        return Err(DataError::InvalidInput(format!("alpha must be >= 0, got {alpha}")));
    }
    if n == 0 {
        return Err(DataError::InvalidInput("vocabulary must be non-empty".into()));
    }
    let raw: Vec<f64> = (0..n).map(|i| ((i + 1) as f64).powf(-alpha)).collect();
    let z: f64 = raw.iter().sum();
    TokenDistribution::new(raw.into_iter().map(|x| x / z).collect())
}

/// A token sequence with a planted repeated segment plus placement metadata.
/// Layout: `(*, s#, *, s#, *)` with filler lengths `T0`, `T1-T0`, `r_L-T1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CopyingSample {
    pub tokens: Vec<Token>,
    pub seg_len: usize,
    pub first_start: usize,
    pub second_start: usize,
    pub pool_id: Option<usize>,
}

impl CopyingSample {
    /// Positions (0-based) of the second segment, which is where the copy
    /// rule is evaluated.
    pub fn second_segment(&self) -> std::ops::Range<usize> {
        self.second_start..self.second_start + self.seg_len
    }

    /// Distance between the two planted occurrences; the relative offset the
    /// induction pattern must bridge.
    pub fn repeat_offset(&self) -> usize {
        self.second_start - self.first_start
    }
}

/// The finite set of repeated patterns training may draw from.
#[derive(Debug, Clone)]
pub struct RepetitionPool {
    pub patterns: Vec<Vec<Token>>,
}

/// `n_blocks` identical blocks of `block_len` uniform tokens.
#[derive(Debug, Clone)]
pub struct ProbeSample {
    pub tokens: Vec<Token>,
    pub block_len: usize,
    pub n_blocks: usize,
}

fn check_l_set(l_set: &[usize], t_max: usize) -> Result<(), DataError> {
    if l_set.is_empty() {
        return Err(DataError::InvalidConfig("empty segment length set".into()));
    }
    let max_l = *l_set.iter().max().unwrap();
    if l_set.iter().any(|&l| l == 0) {
        return Err(DataError::InvalidConfig("segment length 0 not allowed".into()));
    }
    if 2 * max_l >= t_max {
        return Err(DataError::InvalidConfig(format!(
            "2 * max segment length ({max_l}) must be < t_max ({t_max})"
        )));
    }
    Ok(())
}

fn sample_pattern(dist: &TokenDistribution, l_set: &[usize], rng: &mut Rng) -> Vec<Token> {
    let l = l_set[rng.gen_range(0..l_set.len())];
    (0..l).map(|_| dist.sample(rng)).collect()
}

fn place_pattern(
    pattern: &[Token],
    pool_id: Option<usize>,
    dist: &TokenDistribution,
    t_max: usize,
    rng: &mut Rng,
) -> CopyingSample {
    let l = pattern.len();
    let r_l = t_max - 2 * l;
    // Two independent uniforms on {1..r_L}; the smaller is T0. They may
    // coincide, which makes the middle filler empty.
    let a = rng.gen_range(1..=r_l);
    let b = rng.gen_range(1..=r_l);
    let (t0, t1) = (a.min(b), a.max(b));
    let mut tokens = Vec::with_capacity(t_max);
    for _ in 0..t0 {
        tokens.push(dist.sample(rng));
    }
    let first_start = tokens.len();
    tokens.extend_from_slice(pattern);
    for _ in 0..t1 - t0 {
        tokens.push(dist.sample(rng));
    }
    let second_start = tokens.len();
    tokens.extend_from_slice(pattern);
    for _ in 0..r_l - t1 {
        tokens.push(dist.sample(rng));
    }
    debug_assert_eq!(tokens.len(), t_max);
    CopyingSample { tokens, seg_len: l, first_start, second_start, pool_id }
}

/// One fresh copying sample: segment length uniform on `l_set`, pattern and
/// filler tokens i.i.d. from `dist`, placement uniform.
pub fn gen_copy_sample(
    dist: &TokenDistribution,
    t_max: usize,
    l_set: &[usize],
    rng: &mut Rng,
) -> Result<CopyingSample, DataError> {
    check_l_set(l_set, t_max)?;
    let pattern = sample_pattern(dist, l_set, rng);
    Ok(place_pattern(&pattern, None, dist, t_max, rng))
}

/// Sample a repetition pool of `s` patterns, each generated independently
/// (own length from `l_set`, i.i.d. tokens). Duplicates are permitted.
pub fn gen_pool(
    dist: &TokenDistribution,
    l_set: &[usize],
    s: usize,
    rng: &mut Rng,
) -> Result<RepetitionPool, DataError> {
    if s == 0 {
        return Err(DataError::InvalidConfig("pool size must be >= 1".into()));
    }
    if l_set.is_empty() || l_set.iter().any(|&l| l == 0) {
        return Err(DataError::InvalidConfig("invalid segment length set".into()));
    }
    let patterns = (0..s).map(|_| sample_pattern(dist, l_set, rng)).collect();
    Ok(RepetitionPool { patterns })
}

/// One copying sample whose pattern is drawn uniformly from the pool;
/// placement and filler follow the fresh-sample recipe.
pub fn gen_copy_sample_pooled(
    pool: &RepetitionPool,
    dist: &TokenDistribution,
    t_max: usize,
    rng: &mut Rng,
) -> Result<CopyingSample, DataError> {
    if pool.patterns.is_empty() {
        return Err(DataError::InvalidConfig("empty repetition pool".into()));
    }
    let idx = rng.gen_range(0..pool.patterns.len());
    let pattern = &pool.patterns[idx];
    if 2 * pattern.len() >= t_max {
        return Err(DataError::InvalidConfig("pool pattern too long for t_max".into()));
    }
    Ok(place_pattern(pattern, Some(idx), dist, t_max, rng))
}

/// A block of `block_len` i.i.d. uniform tokens repeated `n_blocks` times.
/// `n_blocks = 1` is a pure-random sequence (the PTH probe); `n_blocks = 2`
/// is the head-scoring probe; `n_blocks = 3` is the intervention-evaluation
/// triple.
pub fn gen_probe(
    block_len: usize,
    n_blocks: usize,
    vocab: usize,
    rng: &mut Rng,
) -> Result<ProbeSample, DataError> {
    if block_len == 0 || n_blocks == 0 {
        return Err(DataError::InvalidConfig("block_len and n_blocks must be >= 1".into()));
    }
    if vocab == 0 {
        return Err(DataError::InvalidConfig("vocabulary must be non-empty".into()));
    }
    let block: Vec<Token> = (0..block_len).map(|_| rng.gen_range(0..vocab) as Token).collect();
    let mut tokens = Vec::with_capacity(block_len * n_blocks);
    for _ in 0..n_blocks {
        tokens.extend_from_slice(&block);
    }
    Ok(ProbeSample { tokens, block_len, n_blocks })
}

/// Declarative description of the training data distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSpec {
    /// Power-law exponent of the token distribution; 1.0 (Zipf) by default,
    /// 0.0 is uniform.
    pub alpha: f64,
    /// Allowed repeated-segment lengths.
    pub l_set: Vec<usize>,
    /// Sequence length.
    pub t_max: usize,
    /// When set, repeated patterns are drawn from a fixed pool of this size
    /// instead of being fresh every sample.
    pub pool_size: Option<usize>,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self { alpha: 1.0, l_set: (10..=19).collect(), t_max: 64, pool_size: None }
    }
}

/// A ready-to-sample data source: the token distribution plus, for pooled
/// training, the pool itself (drawn once from the seed so the ID evaluation
/// set sees the same patterns training does).
#[derive(Debug, Clone)]
pub struct DataSource {
    spec: DataSpec,
    dist: TokenDistribution,
    pool: Option<RepetitionPool>,
}

impl DataSource {
    pub fn new(spec: DataSpec, vocab: usize, seed: u64) -> Result<Self, DataError> {
        check_l_set(&spec.l_set, spec.t_max)?;
        let dist = power_law_dist(spec.alpha, vocab)?;
        let pool = match spec.pool_size {
            Some(s) => {
                let mut rng = crate::derive_rng(seed, crate::salts::POOL, 0);
                Some(gen_pool(&dist, &spec.l_set, s, &mut rng)?)
            }
            None => None,
        };
        Ok(Self { spec, dist, pool })
    }

    pub fn spec(&self) -> &DataSpec {
        &self.spec
    }

    pub fn dist(&self) -> &TokenDistribution {
        &self.dist
    }

    pub fn pool(&self) -> Option<&RepetitionPool> {
        self.pool.as_ref()
    }

    pub fn sample(&self, rng: &mut Rng) -> Result<CopyingSample, DataError> {
        match &self.pool {
            Some(pool) => gen_copy_sample_pooled(pool, &self.dist, self.spec.t_max, rng),
            None => gen_copy_sample(&self.dist, self.spec.t_max, &self.spec.l_set, rng),
        }
    }
}

/// Sidecar metadata row for a dumped sample.
#[derive(Debug, Serialize, Deserialize)]
struct SampleMeta {
    seg_len: usize,
    first_start: usize,
    second_start: usize,
    pool_id: Option<usize>,
}

/// Dump samples to `path` (one sample per line, token ids space-separated)
/// with metadata in a `<path>.meta.json` sidecar.
pub fn dump_samples(path: &Path, samples: &[CopyingSample]) -> Result<(), DataError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        let line: Vec<String> = s.tokens.iter().map(|t| t.to_string()).collect();
        writeln!(f, "{}", line.join(" "))?;
    }
    f.flush()?;
    let meta: Vec<SampleMeta> = samples
        .iter()
        .map(|s| SampleMeta {
            seg_len: s.seg_len,
            first_start: s.first_start,
            second_start: s.second_start,
            pool_id: s.pool_id,
        })
        .collect();
    let sidecar = path.with_extension(format!(
        "{}meta.json",
        path.extension().map(|e| format!("{}.", e.to_string_lossy())).unwrap_or_default()
    ));
    std::fs::write(sidecar, serde_json::to_string_pretty(&meta).unwrap())?;
    Ok(())
}
