//! The predictive-model abstraction `p(x0 | xt)` with two backends: an
//! exact-Bayes tabular model over a known Markov chain, and a remote
//! wire-protocol client for external neural models.
//!
//! A prediction assigns one categorical distribution over the real (non-mask)
//! tokens to every masked position of the query sequence. Models never put
//! probability on the MASK token itself — masks are only retained through the
//! kernel's remask branch, never drafted.
//!
//! Wire protocol (the documented boundary for remote backends):
//!
//! - `POST {endpoint}/predict` with body
//!   `{"sequences": [[int,...],...], "mask_id": int, "vocab": int}`;
//!   response `{"logits": [[[float,...],...],...]}` where the outer index is
//!   the sequence, the middle index walks that sequence's masked positions in
//!   ascending position order, and the inner vector holds `V-1` logits.
//! - `POST {endpoint}/score` with body `{"sequences": [[int,...],...]}`;
//!   response `{"nll": [float,...]}`, one **total** negative log-likelihood
//!   per sequence.
//!
//! Chain specs load from a JSON file `{"init": [...], "trans": [[...],...]}`.

use std::path::Path;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::core::{Sequence, Token, Vocab};
use crate::error::{Error, Result};
use crate::numeric;

/// Hard ceiling on brute-force enumeration work (posterior completions,
/// oracle path counts). Exceeding it is an error, never an approximation.
pub const ENUMERATION_CAP: u64 = 1_000_000;

/// Probability-row tolerance: every derived probability row sums to 1
/// within this bound.
pub const ROW_SUM_TOL: f64 = 1e-9;

const REMOTE_ATTEMPTS: u32 = 3;
const PAYLOAD_SNIPPET: usize = 512;

// ---------------------------------------------------------------------------
// Predictions
// ---------------------------------------------------------------------------

/// Logits over the real tokens at one masked position.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionLogits {
    /// Masked position this row belongs to.
    pub pos: usize,
    /// `V-1` logits, one per real token. Entries may be `-inf` (a token the
    /// model rules out entirely) but never NaN or `+inf`, and at least one
    /// entry is finite.
    pub logits: Vec<f64>,
}

/// The model's `p(x0 | xt)`: one categorical distribution per masked
/// position, keyed by exactly the mask set of the query sequence.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictiveOutput {
    rows: Vec<PositionLogits>,
}

impl PredictiveOutput {
    /// The empty prediction, returned for fully-unmasked inputs.
    pub fn empty() -> Self {
        PredictiveOutput { rows: Vec::new() }
    }

    /// Builds a prediction from `(position, logits)` rows, sorting by
    /// position and validating each row.
    pub fn from_rows(mut rows: Vec<(usize, Vec<f64>)>) -> Result<Self> {
        rows.sort_by_key(|(pos, _)| *pos);
        let mut out = Vec::with_capacity(rows.len());
        let mut prev: Option<usize> = None;
        for (pos, logits) in rows {
            if prev == Some(pos) {
                return Err(Error::invalid(format!("duplicate prediction row for position {pos}")));
            }
            prev = Some(pos);
            validate_logits(&logits)?;
            out.push(PositionLogits { pos, logits });
        }
        Ok(PredictiveOutput { rows: out })
    }

    /// Number of predicted positions.
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    /// Whether no position is predicted.
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// The rows, ascending by position.
    pub fn rows(&self) -> &[PositionLogits] {
        &self.rows
    }

    /// The predicted positions, ascending.
    pub fn positions(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.pos).collect()
    }

    /// Logits at `pos`, if predicted.
    pub fn row(&self, pos: usize) -> Option<&[f64]> {
        self.rows
            .binary_search_by_key(&pos, |r| r.pos)
            .ok()
            .map(|i| self.rows[i].logits.as_slice())
    }

    /// Softmax probabilities at `pos`, if predicted.
    pub fn probabilities(&self, pos: usize) -> Option<Vec<f64>> {
        self.row(pos).map(numeric::softmax)
    }

    /// The sub-prediction covering only positions in `lo..hi` — used by
    /// block-wise generation to restrict a full-sequence prediction to the
    /// active block.
    pub fn restrict(&self, lo: usize, hi: usize) -> PredictiveOutput {
        PredictiveOutput {
            rows: self
                .rows
                .iter()
                .filter(|r| r.pos >= lo && r.pos < hi)
                .cloned()
                .collect(),
        }
    }
}

fn validate_logits(logits: &[f64]) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::invalid("logit row must be non-empty"));
    }
    if logits.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::invalid("logits must not contain NaN or +inf"));
    }
    if !logits.iter().any(|v| v.is_finite()) {
        return Err(Error::invalid("logit row needs at least one finite entry"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Ground-truth Markov chain
// ---------------------------------------------------------------------------

/// A known first-order Markov chain over the real tokens — the ground-truth
/// joint distribution used for exact posteriors and exact scoring at desk
/// scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkovChainSpec {
    /// Distribution of the first token; length `V-1`.
    pub init: Vec<f64>,
    /// Row-stochastic transition matrix, shape `(V-1) x (V-1)`.
    pub trans: Vec<Vec<f64>>,
}

impl MarkovChainSpec {
    /// Builds and validates a chain spec.
    pub fn new(init: Vec<f64>, trans: Vec<Vec<f64>>) -> Result<Self> {
        let spec = MarkovChainSpec { init, trans };
        spec.validate()?;
        Ok(spec)
    }

    /// The uniform chain over `states` tokens (handy in tests: every
    /// posterior is uniform by symmetry).
    pub fn uniform(states: usize) -> Self {
        let p = 1.0 / states as f64;
        MarkovChainSpec {
            init: vec![p; states],
            trans: vec![vec![p; states]; states],
        }
    }

    /// The documented default ground truth: a skewed 4-state chain (5-token
    /// vocabulary with MASK). Every state is sticky (self-transition 3×
    /// the off-diagonal mass) with a descending initial distribution and
    /// deliberately unequal off-diagonal entries.
    ///
    /// The shape is tuned for benchmarking the sampler against itself:
    /// stickiness gives trajectory-confidence weighting a real likelihood
    /// gradient to climb, the asymmetries keep confidences from tying
    /// (exact ties would be broken by position order, collapsing output
    /// diversity), and the near-equal total mass of the four sticky runs
    /// keeps best-of-N selection from funneling every run into the same
    /// mode.
    pub fn default_skewed() -> Self {
        MarkovChainSpec {
            init: vec![0.27, 0.26, 0.24, 0.23],
            trans: vec![
                vec![0.50, 0.18, 0.17, 0.15],
                vec![0.15, 0.50, 0.19, 0.16],
                vec![0.18, 0.15, 0.50, 0.17],
                vec![0.16, 0.18, 0.15, 0.51],
            ],
        }
    }

    /// Checks distribution validity: non-negative finite entries, rows
    /// summing to 1 within 1e-12, square transition matrix matching `init`.
    pub fn validate(&self) -> Result<()> {
        let k = self.init.len();
        if k == 0 {
            return Err(Error::config("chain must have at least one state"));
        }
        check_distribution(&self.init, "init")?;
        if self.trans.len() != k {
            return Err(Error::config(format!(
                "transition matrix has {} rows, expected {k}",
                self.trans.len()
            )));
        }
        for (i, row) in self.trans.iter().enumerate() {
            if row.len() != k {
                return Err(Error::config(format!(
                    "transition row {i} has {} entries, expected {k}",
                    row.len()
                )));
            }
            check_distribution(row, &format!("trans[{i}]"))?;
        }
        Ok(())
    }

    /// Number of chain states (= number of real tokens).
    pub fn num_states(&self) -> usize {
        self.init.len()
    }

    /// The vocabulary this chain induces: its states plus the MASK token.
    pub fn vocab(&self) -> Vocab {
        // num_states >= 1, so size >= 2 always holds.
        Vocab::new(self.init.len() as u32 + 1).expect("chain vocab")
    }

    /// Loads a chain spec from a JSON file `{"init": [...], "trans": [[...]]}`.
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let spec: MarkovChainSpec = serde_json::from_str(&text).map_err(|e| Error::Parse {
            location: format!("{}:{}:{}", path.display(), e.line(), e.column()),
            message: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    /// Log-probability of a fully-unmasked sequence under the chain
    /// (`-inf` when the chain rules it out).
    pub fn log_joint(&self, tokens: &[Token]) -> Result<f64> {
        let k = self.num_states() as u32;
        if tokens.is_empty() {
            return Err(Error::invalid("cannot score an empty sequence"));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= k) {
            return Err(Error::invalid(format!(
                "token {bad} is not a chain state (found MASK or out-of-range token)"
            )));
        }
        let mut log_p = self.init[tokens[0] as usize].ln();
        for pair in tokens.windows(2) {
            log_p += self.trans[pair[0] as usize][pair[1] as usize].ln();
        }
        Ok(log_p)
    }

    /// Draws one length-`len` sequence from the chain.
    pub fn sample(&self, len: usize, rng: &mut impl Rng) -> Sequence {
        assert!(len > 0, "cannot sample an empty sequence");
        let mut tokens = Vec::with_capacity(len);
        let mut state = draw_categorical(&self.init, rng);
        tokens.push(state as Token);
        for _ in 1..len {
            state = draw_categorical(&self.trans[state], rng);
            tokens.push(state as Token);
        }
        Sequence::new(tokens, self.vocab()).expect("chain sample is in-vocab")
    }
}

fn check_distribution(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::config(format!(
            "{what} must contain only finite non-negative entries"
        )));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(Error::config(format!("{what} sums to {sum}, expected 1 within 1e-12")));
    }
    Ok(())
}

fn draw_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Numerical leftover: fall back to the last positive entry.
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .expect("categorical row has positive mass")
}

// ---------------------------------------------------------------------------
// Backends
// ---------------------------------------------------------------------------

/// Which prediction backend to run and how to reach it.
#[derive(Debug, Clone, PartialEq)]
pub enum BackendDescriptor {
    /// Exact Bayes posteriors under a known Markov chain.
    ExactBayes {
        /// The ground-truth chain.
        chain: MarkovChainSpec,
    },
    /// A remote model server speaking the `/predict` wire protocol.
    Remote {
        /// Base URL, e.g. `http://127.0.0.1:8080`.
        endpoint: String,
        /// Per-request timeout.
        timeout: Duration,
        /// Maximum sequences per request; larger batches are an error for
        /// [`remote_predict`] and are chunked by [`Backend::predict_batch`].
        batch_limit: usize,
    },
}

impl BackendDescriptor {
    fn validate(&self) -> Result<()> {
        match self {
            BackendDescriptor::ExactBayes { chain } => chain.validate(),
            BackendDescriptor::Remote { endpoint, batch_limit, .. } => {
                if endpoint.trim().is_empty() {
                    return Err(Error::config("remote backend needs a non-empty endpoint"));
                }
                if *batch_limit == 0 {
                    return Err(Error::config("remote batch limit must be at least 1"));
                }
                Ok(())
            }
        }
    }
}

/// A validated, ready-to-call prediction backend bound to a fixed sequence
/// length and vocabulary.
#[derive(Debug, Clone)]
pub struct Backend {
    descriptor: BackendDescriptor,
    vocab: Vocab,
    expected_len: usize,
}

impl Backend {
    /// Binds `descriptor` to a vocabulary and sequence length, validating
    /// consistency (an exact-Bayes chain must have `V-1` states).
    pub fn new(descriptor: BackendDescriptor, vocab: Vocab, expected_len: usize) -> Result<Self> {
        descriptor.validate()?;
        if expected_len == 0 {
            return Err(Error::config("backend sequence length must be positive"));
        }
        if let BackendDescriptor::ExactBayes { chain } = &descriptor {
            if chain.num_states() != vocab.num_real_tokens() {
                return Err(Error::config(format!(
                    "chain has {} states but vocab expects {} real tokens",
                    chain.num_states(),
                    vocab.num_real_tokens()
                )));
            }
        }
        Ok(Backend { descriptor, vocab, expected_len })
    }

    /// The bound vocabulary.
    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    /// The sequence length every query must have.
    pub fn expected_len(&self) -> usize {
        self.expected_len
    }

    /// The underlying descriptor.
    pub fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    /// Predicts a single sequence; see [`predict`].
    pub fn predict(&self, seq: &Sequence) -> Result<PredictiveOutput> {
        predict(self, seq)
    }

    /// Predicts a batch in one logical call — the per-step performance
    /// contract for particle propagation. Order-preserving. Remote batches
    /// are chunked to the descriptor's batch limit; exact-Bayes batches are
    /// evaluated in parallel.
    pub fn predict_batch(&self, seqs: &[Sequence]) -> Result<Vec<PredictiveOutput>> {
        for seq in seqs {
            self.check_len(seq)?;
        }
        match &self.descriptor {
            BackendDescriptor::ExactBayes { chain } => {
                if seqs.len() > 1 {
                    use rayon::prelude::*;
                    seqs.par_iter().map(|s| exact_posterior(chain, s)).collect()
                } else {
                    seqs.iter().map(|s| exact_posterior(chain, s)).collect()
                }
            }
            BackendDescriptor::Remote { batch_limit, .. } => {
                let mut out = Vec::with_capacity(seqs.len());
                for chunk in seqs.chunks((*batch_limit).max(1)) {
                    out.extend(remote_predict(&self.descriptor, chunk, self.vocab)?);
                }
                Ok(out)
            }
        }
    }

    fn check_len(&self, seq: &Sequence) -> Result<()> {
        if seq.len() != self.expected_len {
            return Err(Error::invalid(format!(
                "sequence length {} does not match backend length {}",
                seq.len(),
                self.expected_len
            )));
        }
        Ok(())
    }
}

/// Returns the model's categorical distribution over real tokens for every
/// masked position of `seq`. A fully-unmasked input yields an empty output.
pub fn predict(backend: &Backend, seq: &Sequence) -> Result<PredictiveOutput> {
    backend.check_len(seq)?;
    match &backend.descriptor {
        BackendDescriptor::ExactBayes { chain } => exact_posterior(chain, seq),
        BackendDescriptor::Remote { .. } => {
            let mut out = remote_predict(&backend.descriptor, std::slice::from_ref(seq), backend.vocab)?;
            Ok(out.pop().expect("one output per input"))
        }
    }
}

/// Exact posterior marginals under the chain via forward-backward message
/// passing — `O(L * (V-1)^2)`, no enumeration, any mask count.
///
/// This is what the exact-Bayes backend serves. [`bayes_posterior`] computes
/// the same quantity by literal enumeration and is kept as its oracle.
fn exact_posterior(chain: &MarkovChainSpec, seq: &Sequence) -> Result<PredictiveOutput> {
    let vocab = chain.vocab();
    let k = chain.num_states();
    let len = seq.len();
    let masked = seq.mask_set(vocab);
    if masked.is_empty() {
        return Ok(PredictiveOutput::empty());
    }
    // Observation at each position: Some(state) for real tokens, None for MASK.
    let obs: Vec<Option<usize>> = seq
        .tokens()
        .iter()
        .map(|&t| if vocab.is_mask(t) { None } else { Some(t as usize) })
        .collect();
    if let Some(&bad) = seq.tokens().iter().find(|&&t| !vocab.contains(t)) {
        return Err(Error::invalid(format!("token {bad} outside the chain's vocabulary")));
    }

    let consistent = |state: usize, o: Option<usize>| o.is_none_or(|t| t == state);

    // Forward messages, normalized per layer to dodge underflow on long
    // sequences; normalization cancels in the posterior ratio.
    let mut fwd = vec![vec![0.0f64; k]; len];
    for v in 0..k {
        if consistent(v, obs[0]) {
            fwd[0][v] = chain.init[v];
        }
    }
    normalize_layer(&mut fwd[0], seq, 0)?;
    for i in 1..len {
        for w in 0..k {
            if !consistent(w, obs[i]) {
                continue;
            }
            let mut acc = 0.0;
            for v in 0..k {
                acc += fwd[i - 1][v] * chain.trans[v][w];
            }
            fwd[i][w] = acc;
        }
        normalize_layer(&mut fwd[i], seq, i)?;
    }

    // Backward messages, same layer normalization.
    let mut bwd = vec![vec![0.0f64; k]; len];
    bwd[len - 1] = vec![1.0; k];
    for i in (0..len - 1).rev() {
        for v in 0..k {
            let mut acc = 0.0;
            for w in 0..k {
                if consistent(w, obs[i + 1]) {
                    acc += chain.trans[v][w] * bwd[i + 1][w];
                }
            }
            bwd[i][v] = acc;
        }
        normalize_layer(&mut bwd[i], seq, i)?;
    }

    let mut rows = Vec::with_capacity(masked.len());
    for &j in &masked {
        let mut post: Vec<f64> = (0..k).map(|v| fwd[j][v] * bwd[j][v]).collect();
        let total: f64 = post.iter().sum();
        if total <= 0.0 {
            return Err(zero_probability_evidence(seq, j));
        }
        for p in &mut post {
            *p /= total;
        }
        rows.push((j, post.iter().map(|p| p.ln()).collect()));
    }
    PredictiveOutput::from_rows(rows)
}

fn normalize_layer(layer: &mut [f64], seq: &Sequence, pos: usize) -> Result<()> {
    let total: f64 = layer.iter().sum();
    if total <= 0.0 {
        return Err(zero_probability_evidence(seq, pos));
    }
    for v in layer {
        *v /= total;
    }
    Ok(())
}

fn zero_probability_evidence(seq: &Sequence, pos: usize) -> Error {
    Error::invalid(format!(
        "observed tokens {:?} have zero probability under the chain (around position {pos})",
        seq.tokens()
    ))
}

/// Exact posterior marginals by brute-force enumeration of every completion
/// of the masked positions, weighted by the chain's joint probability.
///
/// Requires `(V-1)^{|M|} <= ENUMERATION_CAP`. Agrees with the exact-Bayes
/// backend ([`predict`]) to within floating-point reassociation (elementwise
/// probability difference below 1e-12 in the test suite); the DP form exists
/// so the backend scales past the cap, this form exists to keep it honest.
pub fn bayes_posterior(chain: &MarkovChainSpec, seq: &Sequence) -> Result<PredictiveOutput> {
    let vocab = chain.vocab();
    let k = chain.num_states();
    if let Some(&bad) = seq.tokens().iter().find(|&&t| !vocab.contains(t)) {
        return Err(Error::invalid(format!("token {bad} outside the chain's vocabulary")));
    }
    let masked = seq.mask_set(vocab);
    if masked.is_empty() {
        return Ok(PredictiveOutput::empty());
    }
    let needed = (k as f64).powi(masked.len() as i32);
    if needed > ENUMERATION_CAP as f64 {
        return Err(Error::CapacityExceeded { needed, cap: ENUMERATION_CAP });
    }

    let mut mass = vec![vec![0.0f64; k]; masked.len()];
    let mut total = 0.0f64;
    let mut fill = vec![0usize; masked.len()];
    let mut tokens: Vec<Token> = seq.tokens().to_vec();
    loop {
        for (slot, &j) in masked.iter().enumerate() {
            tokens[j] = fill[slot] as Token;
        }
        // Joint probability of the completed sequence, in linear space —
        // exact at desk scale.
        let mut p = chain.init[tokens[0] as usize];
        for pair in tokens.windows(2) {
            p *= chain.trans[pair[0] as usize][pair[1] as usize];
        }
        if p > 0.0 {
            total += p;
            for (slot, &assigned) in fill.iter().enumerate() {
                mass[slot][assigned] += p;
            }
        }
        // Odometer increment over completions, last slot fastest.
        let mut slot = masked.len();
        loop {
            if slot == 0 {
                break;
            }
            slot -= 1;
            fill[slot] += 1;
            if fill[slot] < k {
                break;
            }
            fill[slot] = 0;
            if slot == 0 {
                slot = usize::MAX;
                break;
            }
        }
        if slot == usize::MAX {
            break;
        }
    }

    if total <= 0.0 {
        return Err(zero_probability_evidence(seq, masked[0]));
    }
    let rows = masked
        .iter()
        .enumerate()
        .map(|(slot, &j)| (j, mass[slot].iter().map(|m| (m / total).ln()).collect()))
        .collect();
    PredictiveOutput::from_rows(rows)
}

// ---------------------------------------------------------------------------
// Remote client
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct PredictRequest<'a> {
    sequences: Vec<&'a [Token]>,
    mask_id: Token,
    vocab: u32,
}

#[derive(Deserialize)]
struct PredictResponse {
    logits: Vec<Vec<Vec<f64>>>,
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    sequences: Vec<&'a [Token]>,
}

#[derive(Deserialize)]
struct ScoreResponse {
    nll: Vec<f64>,
}

/// Sends one `/predict` request for `batch` and parses the response into one
/// [`PredictiveOutput`] per input, order-preserving.
///
/// The batch must fit the descriptor's batch limit. Any malformed or
/// incomplete response fails the whole batch — no partial results.
pub fn remote_predict(
    descriptor: &BackendDescriptor,
    batch: &[Sequence],
    vocab: Vocab,
) -> Result<Vec<PredictiveOutput>> {
    let BackendDescriptor::Remote { endpoint, timeout, batch_limit } = descriptor else {
        return Err(Error::invalid("remote_predict needs a remote backend descriptor"));
    };
    if batch.len() > *batch_limit {
        return Err(Error::invalid(format!(
            "batch of {} exceeds the backend batch limit {batch_limit}",
            batch.len()
        )));
    }
    if batch.is_empty() {
        return Ok(Vec::new());
    }
    let request = PredictRequest {
        sequences: batch.iter().map(|s| s.tokens()).collect(),
        mask_id: vocab.mask_id(),
        vocab: vocab.size(),
    };
    let body = post_json(endpoint, "predict", *timeout, &request)?;
    let response: PredictResponse = parse_payload(&body)?;

    if response.logits.len() != batch.len() {
        return Err(protocol_error(
            format!("expected {} logit groups, got {}", batch.len(), response.logits.len()),
            &body,
        ));
    }
    let mut outputs = Vec::with_capacity(batch.len());
    for (seq, groups) in batch.iter().zip(response.logits) {
        let masked = seq.mask_set(vocab);
        if groups.len() != masked.len() {
            return Err(protocol_error(
                format!(
                    "sequence with {} masked positions got {} logit rows",
                    masked.len(),
                    groups.len()
                ),
                &body,
            ));
        }
        let mut rows = Vec::with_capacity(groups.len());
        for (&pos, logits) in masked.iter().zip(groups) {
            if logits.len() != vocab.num_real_tokens() {
                return Err(protocol_error(
                    format!(
                        "logit row of length {} (expected {})",
                        logits.len(),
                        vocab.num_real_tokens()
                    ),
                    &body,
                ));
            }
            rows.push((pos, logits));
        }
        outputs.push(PredictiveOutput::from_rows(rows).map_err(|e| protocol_error(e.to_string(), &body))?);
    }
    Ok(outputs)
}

/// POSTs `payload` to `{endpoint}/{route}`, retrying transient transport
/// failures, and returns the raw response body.
fn post_json(endpoint: &str, route: &str, timeout: Duration, payload: &impl Serialize) -> Result<String> {
    let url = format!("{}/{route}", endpoint.trim_end_matches('/'));
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .build()
        .into();
    let mut last_error = String::new();
    for attempt in 1..=REMOTE_ATTEMPTS {
        match agent.post(&url).send_json(payload) {
            Ok(mut response) => match response.body_mut().read_to_string() {
                Ok(body) => return Ok(body),
                Err(e) => last_error = format!("failed reading response body: {e}"),
            },
            Err(e) => last_error = e.to_string(),
        }
        if attempt < REMOTE_ATTEMPTS {
            std::thread::sleep(Duration::from_millis(10 * u64::from(attempt)));
        }
    }
    Err(Error::Backend { message: format!("{url}: {last_error}"), attempts: REMOTE_ATTEMPTS })
}

fn parse_payload<T: serde::de::DeserializeOwned>(body: &str) -> Result<T> {
    serde_json::from_str(body).map_err(|e| protocol_error(e.to_string(), body))
}

fn protocol_error(message: String, body: &str) -> Error {
    let payload = if body.len() > PAYLOAD_SNIPPET {
        let mut snippet: String = body.chars().take(PAYLOAD_SNIPPET).collect();
        snippet.push('…');
        snippet
    } else {
        body.to_string()
    };
    Error::Protocol { message, payload }
}

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

/// Ground-truth scoring backend: total negative log-likelihood per sequence,
/// served either by the exact chain or by a remote `/score` endpoint.
#[derive(Debug, Clone)]
pub struct Scorer {
    kind: ScorerKind,
    vocab: Vocab,
}

#[derive(Debug, Clone)]
enum ScorerKind {
    ExactChain(MarkovChainSpec),
    Remote { endpoint: String, timeout: Duration, batch_limit: usize },
}

impl Scorer {
    /// Scores against the exact chain joint.
    pub fn exact(chain: MarkovChainSpec) -> Result<Self> {
        chain.validate()?;
        let vocab = chain.vocab();
        Ok(Scorer { kind: ScorerKind::ExactChain(chain), vocab })
    }

    /// Scores against a remote `/score` endpoint.
    pub fn remote(endpoint: String, timeout: Duration, batch_limit: usize, vocab: Vocab) -> Result<Self> {
        if endpoint.trim().is_empty() {
            return Err(Error::config("remote scorer needs a non-empty endpoint"));
        }
        if batch_limit == 0 {
            return Err(Error::config("remote batch limit must be at least 1"));
        }
        Ok(Scorer { kind: ScorerKind::Remote { endpoint, timeout, batch_limit }, vocab })
    }

    /// The vocabulary sequences are validated against.
    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    /// Total negative log-likelihood of each fully-unmasked sequence.
    pub fn total_nll_batch(&self, seqs: &[Sequence]) -> Result<Vec<f64>> {
        for seq in seqs {
            if seq.mask_count(self.vocab) > 0 {
                return Err(Error::invalid("cannot score a sequence that still contains MASK"));
            }
        }
        match &self.kind {
            ScorerKind::ExactChain(chain) => {
                seqs.iter().map(|s| chain.log_joint(s.tokens()).map(|lp| -lp)).collect()
            }
            ScorerKind::Remote { endpoint, timeout, batch_limit } => {
                let mut out = Vec::with_capacity(seqs.len());
                for chunk in seqs.chunks((*batch_limit).max(1)) {
                    let request = ScoreRequest { sequences: chunk.iter().map(|s| s.tokens()).collect() };
                    let body = post_json(endpoint, "score", *timeout, &request)?;
                    let response: ScoreResponse = parse_payload(&body)?;
                    if response.nll.len() != chunk.len() {
                        return Err(protocol_error(
                            format!("expected {} nll values, got {}", chunk.len(), response.nll.len()),
                            &body,
                        ));
                    }
                    out.extend(response.nll);
                }
                Ok(out)
            }
        }
    }
}
