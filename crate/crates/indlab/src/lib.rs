//! A laboratory for studying out-of-distribution generalization via
//! composition in minimal Transformers.
//!
//! The crate generates a synthetic copying task (sequences with a planted
//! repeated segment in a noisy background), trains small attention-only
//! Transformers from scratch with hand-rolled backpropagation, tracks four
//! circuit-level progress measures through the weak-learning → rule-learning
//! phase transition, and runs interventions (head removal, circuit shuffling,
//! bridge-subspace projection) on the trained models.
//!
//! Module map:
//! - [`linalg`] — dense matrix kernel: Jacobi SVD, principal subspaces,
//!   generalized cosine similarity between subspaces.
//! - [`datagen`] — deterministic generators for copying samples, repetition
//!   pools, and repeat probes.
//! - [`model`] — configurable attention-only Transformer with RoPE, forward
//!   tracing, head masking, and bit-exact checkpoints.
//! - [`trainer`] — AdamW training loop on fresh batches with gradient
//!   verification against finite differences.
//! - [`measures`] — diagonal score, subspace matching, PTH/IH attention
//!   scores, token matching ratio, copy error, head ranking and screening.
//! - [`intervene`] — head edits (removal, shuffle, projection), bridge
//!   subspace estimation, and the spiked-circuit oracle.

pub mod datagen;
pub mod intervene;
pub mod linalg;
pub mod measures;
pub mod model;
pub mod scalar;
pub mod trainer;

/// Crate-wide deterministic RNG. All randomness flows through seeded
/// ChaCha streams so runs reproduce bit-exactly across platforms.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Build an independent RNG stream from a base seed, a purpose salt, and an
/// index. Derived streams let batch generation fan out to workers without the
/// contents depending on worker count.
pub fn derive_rng(seed: u64, salt: u64, index: u64) -> Rng {
    use rand::SeedableRng;
    let mut rng = Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(index);
    rng
}

/// Purpose salts for [`derive_rng`]. Keeping them in one place guarantees
/// distinct subsystems never share a stream.
pub mod salts {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const EVAL_SET: u64 = 4;
    pub const PROBES: u64 = 5;
    pub const POOL: u64 = 6;
    pub const INTERVENE: u64 = 7;
}
