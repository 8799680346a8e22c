//! Token and sequence domain types, the masking noise schedule, and the
//! forward masking process used to build test fixtures.
//!
//! Conventions used everywhere downstream:
//! - a vocabulary of `V` categories reserves its last index `V - 1` as the
//!   MASK token, so real tokens are exactly `0..V-1`;
//! - a sequence's mask set is always derived from its tokens, never stored;
//! - the noise schedule maps a discrete step index `i ∈ {0..T}` to the
//!   keep-probability `α(i)`, with `α(0) = 1` (clean) and `α(T) = 0` (fully
//!   masked).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token index. Real tokens occupy `0..V-1`; `V-1` is the MASK token.
pub type Token = u32;

/// A vocabulary of `size` categories whose last index is the MASK token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    size: u32,
}

impl Vocab {
    /// Builds a vocabulary with `size` categories (`size - 1` real tokens
    /// plus the reserved MASK token). Requires `size >= 2`.
    pub fn new(size: u32) -> Result<Self> {
        if size < 2 {
            return Err(Error::config(format!(
                "vocab size must be at least 2 (one real token plus MASK), got {size}"
            )));
        }
        Ok(Vocab { size })
    }

    /// Total number of categories, MASK included.
    pub fn size(&self) -> u32 {
        self.size
    }

    /// The reserved MASK token, pinned to the last index.
    pub fn mask_id(&self) -> Token {
        self.size - 1
    }

    /// Number of real (non-mask) tokens; logit rows have this length.
    pub fn num_real_tokens(&self) -> usize {
        (self.size - 1) as usize
    }

    /// Whether `token` is a valid index in this vocabulary (MASK included).
    pub fn contains(&self, token: Token) -> bool {
        token < self.size
    }

    /// Whether `token` is the MASK token.
    pub fn is_mask(&self, token: Token) -> bool {
        token == self.mask_id()
    }
}

/// A fixed-length vector of token indices.
///
/// The mask set `M = {ℓ : tokens[ℓ] = mask_id}` is always computed on demand
/// so it can never disagree with the tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Sequence {
    tokens: Vec<Token>,
}

impl Sequence {
    /// Builds a sequence after validating every token against `vocab`.
    pub fn new(tokens: Vec<Token>, vocab: Vocab) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::invalid("sequence length must be positive"));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| !vocab.contains(t)) {
            return Err(Error::invalid(format!(
                "token {bad} out of range for vocab of size {}",
                vocab.size()
            )));
        }
        Ok(Sequence { tokens })
    }

    /// The all-MASK sequence of length `len` — the generation start state.
    pub fn all_masked(len: usize, vocab: Vocab) -> Result<Self> {
        if len == 0 {
            return Err(Error::invalid("sequence length must be positive"));
        }
        Ok(Sequence {
            tokens: vec![vocab.mask_id(); len],
        })
    }

    /// Sequence length `L`.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    /// True only for the unreachable zero-length case; present for API hygiene.
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Read-only view of the tokens.
    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    /// The token at `pos`.
    pub fn token(&self, pos: usize) -> Token {
        self.tokens[pos]
    }

    /// Overwrites the token at `pos`. The caller is responsible for keeping
    /// the value inside the vocabulary; the engine only writes drafted real
    /// tokens or MASK here.
    pub fn set_token(&mut self, pos: usize, token: Token) {
        self.tokens[pos] = token;
    }

    /// Positions currently holding MASK, in ascending order.
    pub fn mask_set(&self, vocab: Vocab) -> Vec<usize> {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| vocab.is_mask(t))
            .map(|(i, _)| i)
            .collect()
    }

    /// Number of masked positions.
    pub fn mask_count(&self, vocab: Vocab) -> usize {
        self.tokens.iter().filter(|&&t| vocab.is_mask(t)).count()
    }

    /// Whether no position holds MASK.
    pub fn is_fully_unmasked(&self, vocab: Vocab) -> bool {
        self.mask_count(vocab) == 0
    }
}

/// Which noise schedule family to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `α(i) = 1 − i / T`.
    Linear,
}

/// Discrete noise schedule: keep-probability `α(i)` over steps `i ∈ {0..T}`.
///
/// `α` is monotonically non-increasing with `α(0) = 1` and `α(T) = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSchedule {
    kind: ScheduleKind,
    steps: u32,
}

impl MaskSchedule {
    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> u32 {
        self.steps
    }

    /// Schedule family.
    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Keep-probability at step `i`.
    ///
    /// # Panics
    /// If `i > T`; step indices outside the schedule are a programming error.
    pub fn alpha(&self, i: u32) -> f64 {
        assert!(
            i <= self.steps,
            "step index {i} outside schedule 0..={}",
            self.steps
        );
        match self.kind {
            // Endpoints are exact: i=0 gives 1.0, i=T gives 1 - 1 = 0.0.
            ScheduleKind::Linear => 1.0 - f64::from(i) / f64::from(self.steps),
        }
    }
}

/// Builds a noise schedule over `steps >= 1` diffusion steps.
pub fn alpha_schedule(kind: ScheduleKind, steps: u32) -> Result<MaskSchedule> {
    if steps == 0 {
        return Err(Error::config("schedule needs at least one step"));
    }
    Ok(MaskSchedule { kind, steps })
}

/// How the sampler decides which drafted tokens to keep each step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RemaskPolicy {
    /// Keep the `ceil(remaining_masks / remaining_steps)` highest-confidence
    /// drafts; re-mask the rest. The budget rule guarantees the mask set is
    /// empty when the schedule runs out.
    TopK,
    /// Keep every draft whose confidence is at least `rho ∈ (0, 1]`, falling
    /// back to the single most confident draft when none clears the bar so a
    /// step always makes progress.
    Threshold { rho: f64 },
}

impl RemaskPolicy {
    /// The top-k policy with the built-in `ceil(remaining / steps_left)`
    /// budget rule.
    pub fn top_k() -> Self {
        RemaskPolicy::TopK
    }

    /// A threshold policy at confidence level `rho ∈ (0, 1]`.
    pub fn threshold(rho: f64) -> Result<Self> {
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(Error::config(format!(
                "threshold must lie in (0, 1], got {rho}"
            )));
        }
        Ok(RemaskPolicy::Threshold { rho })
    }
}

/// Number of tokens the top-k policy unmasks this step:
/// `ceil(mask_count / remaining_steps)`.
///
/// Returns 0 exactly when `mask_count` is 0. Applying this rule greedily each
/// step (re-evaluated on the remaining mask count) empties the mask set by
/// the time the schedule runs out.
pub fn unmask_budget(
    policy: &RemaskPolicy,
    mask_count: usize,
    remaining_steps: u32,
) -> Result<usize> {
    match policy {
        RemaskPolicy::TopK => {}
        RemaskPolicy::Threshold { .. } => {
            return Err(Error::invalid(
                "unmask budget is only defined for the top_k policy",
            ));
        }
    }
    if mask_count == 0 {
        return Ok(0);
    }
    if remaining_steps == 0 {
        return Err(Error::ScheduleExhausted {
            masks_remaining: mask_count,
        });
    }
    let steps = remaining_steps as usize;
    Ok(mask_count.div_ceil(steps))
}

/// Applies the forward masking process at step `i`: each position of the
/// clean sequence `x0` independently keeps its token with probability
/// `α(i)` and becomes MASK otherwise.
///
/// `x0` must contain no MASK tokens — this op corrupts clean data.
pub fn forward_mask(
    x0: &Sequence,
    step: u32,
    schedule: &MaskSchedule,
    vocab: Vocab,
    rng: &mut impl Rng,
) -> Result<Sequence> {
    if x0.mask_count(vocab) > 0 {
        return Err(Error::invalid(
            "forward masking expects a clean sequence with no MASK tokens",
        ));
    }
    let alpha = schedule.alpha(step);
    let mut out = x0.clone();
    for pos in 0..out.len() {
        // alpha = 1 keeps everything (random() < 1.0 always holds on [0,1));
        // alpha = 0 masks everything.
        if !(rng.random::<f64>() < alpha) {
            out.set_token(pos, vocab.mask_id());
        }
    }
    Ok(out)
}
