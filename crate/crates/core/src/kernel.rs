//! The reverse transition kernel of masked diffusion: draft sampling,
//! confidence, remasking selection, the per-token transition, and the step
//! potential.
//!
//! One kernel step over a sequence `x_t`:
//! 1. For every masked position, draw a draft token from the model's
//!    predictive distribution (Gumbel-Max, optionally temperature-scaled).
//! 2. Record each draft's confidence — the model's *untempered* probability
//!    of the drafted token; temperature reshapes sampling, never the
//!    confidence readout.
//! 3. Select an update set `S_t` by remasking policy (top-k budget or
//!    confidence threshold with a progress-guaranteeing top-1 fallback).
//! 4. Transition: positions in `S_t` take their drafts, remaining masked
//!    positions stay MASK (their drafts are discarded — the kernel is
//!    stateless across steps), unmasked positions are copied verbatim.
//!
//! The step potential is the joint model probability of the accepted tokens,
//! `Π_{j∈S_t} c_t(j)`, reported in log space. It doubles as the particle's
//! incremental importance weight in the SMC loop.

use rand::Rng;
use rand_distr::{Distribution, Gumbel};

use crate::core::{unmask_budget, RemaskPolicy, Sequence, Token, Vocab};
use crate::error::{Error, Result};
use crate::model::PredictiveOutput;
use crate::numeric;

/// Per-position confidence of the drafted tokens: the model probability
/// `c(j) ∈ (0, 1]` of the draft at each masked position `j`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Confidence {
    entries: Vec<(usize, f64)>,
}

impl Confidence {
    /// Builds from `(position, confidence)` pairs; sorted by position.
    pub fn from_entries(mut entries: Vec<(usize, f64)>) -> Self {
        entries.sort_by_key(|(pos, _)| *pos);
        Confidence { entries }
    }

    /// `(position, confidence)` pairs, ascending by position.
    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    /// Confidence at `pos`, if present.
    pub fn get(&self, pos: usize) -> Option<f64> {
        self.entries
            .binary_search_by_key(&pos, |(p, _)| *p)
            .ok()
            .map(|i| self.entries[i].1)
    }

    /// Number of covered positions.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Whether no position is covered.
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// The set of positions selected for unmasking this step, `S ⊆ M_t`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct UpdateSet {
    positions: Vec<usize>,
}

impl UpdateSet {
    /// Builds from positions; sorted ascending.
    pub fn from_positions(mut positions: Vec<usize>) -> Self {
        positions.sort_unstable();
        UpdateSet { positions }
    }

    /// Selected positions, ascending.
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    /// Number of selected positions.
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    /// Whether nothing was selected.
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Whether `pos` is selected.
    pub fn contains(&self, pos: usize) -> bool {
        self.positions.binary_search(&pos).is_ok()
    }
}

/// Everything one kernel step produces.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelStepResult {
    /// The next sequence: drafts accepted on the update set, masks retained
    /// elsewhere in the mask set, unmasked positions copied.
    pub next: Sequence,
    /// The positions unmasked this step.
    pub update_set: UpdateSet,
    /// `Σ_{j∈S} ln c(j)` — the log step potential, which is also the
    /// particle's incremental log importance weight.
    pub log_potential: f64,
    /// The sampled draft for every predicted masked position (accepted or
    /// not), ascending by position.
    pub draft: Vec<(usize, Token)>,
    /// Confidence of every draft, accepted or not.
    pub confidence: Confidence,
}

/// Draws one category index from `logits` via the Gumbel-Max trick at
/// temperature `tau`: `argmax_ℓ (logits[ℓ]/tau + g_ℓ)` with i.i.d. standard
/// Gumbel noise.
///
/// `tau = 0` is special-cased to a deterministic argmax (ties to the lowest
/// index) with **no** noise draw. Entries may be `-inf` (zero-probability
/// categories are simply never drawn); NaN, `+inf`, negative `tau`, or a row
/// with no finite entry are invalid input.
pub fn gumbel_max_sample(logits: &[f64], tau: f64, rng: &mut impl Rng) -> Result<usize> {
    if !(tau >= 0.0) {
        return Err(Error::invalid(format!("temperature must be non-negative, got {tau}")));
    }
    if logits.is_empty() {
        return Err(Error::invalid("cannot sample from an empty logit row"));
    }
    if logits.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::invalid("logits must not contain NaN or +inf"));
    }
    if !logits.iter().any(|v| v.is_finite()) {
        return Err(Error::invalid("logit row needs at least one finite entry"));
    }
    if tau == 0.0 {
        return Ok(numeric::argmax(logits).expect("non-empty row"));
    }
    let gumbel = Gumbel::new(0.0, 1.0).expect("standard Gumbel is valid");
    let perturbed: Vec<f64> = logits
        .iter()
        .map(|&z| if z.is_finite() { z / tau + gumbel.sample(rng) } else { f64::NEG_INFINITY })
        .collect();
    Ok(numeric::argmax(&perturbed).expect("non-empty row"))
}

/// Confidence of token `tok` under a logit row: its untempered softmax
/// probability. This single definition feeds both sampling-time confidence
/// and the oracle's engine-side recomputation.
pub fn confidence_of(logits: &[f64], tok: usize) -> f64 {
    numeric::softmax(logits)[tok]
}

/// Samples a draft token for every predicted position and reads off each
/// draft's confidence.
///
/// Sampling uses `tau`-tempered Gumbel-Max; confidence is always the
/// **untempered** model probability of the realized draft.
pub fn draft_and_confidence(
    pred: &PredictiveOutput,
    tau: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<(usize, Token)>, Confidence)> {
    let mut draft = Vec::with_capacity(pred.len());
    let mut conf = Vec::with_capacity(pred.len());
    for row in pred.rows() {
        let tok = gumbel_max_sample(&row.logits, tau, rng)?;
        draft.push((row.pos, tok as Token));
        conf.push((row.pos, confidence_of(&row.logits, tok)));
    }
    Ok((draft, Confidence::from_entries(conf)))
}

/// The `budget` highest-confidence positions (ties broken by lowest
/// position index). A budget at or above the domain size selects everything.
pub fn select_topk(conf: &Confidence, budget: usize) -> UpdateSet {
    let mut ranked: Vec<(usize, f64)> = conf.entries().to_vec();
    // Descending by confidence, then ascending by position.
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("confidences are not NaN").then(a.0.cmp(&b.0)));
    UpdateSet::from_positions(ranked.into_iter().take(budget).map(|(pos, _)| pos).collect())
}

/// Every position whose confidence reaches `rho ∈ (0, 1]`; when none does
/// and positions exist, falls back to the single most confident position
/// (ties to lowest index) so a step always makes progress.
pub fn select_threshold(conf: &Confidence, rho: f64) -> Result<UpdateSet> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::invalid(format!("threshold must lie in (0, 1], got {rho}")));
    }
    let passing: Vec<usize> =
        conf.entries().iter().filter(|(_, c)| *c >= rho).map(|(pos, _)| *pos).collect();
    if !passing.is_empty() || conf.is_empty() {
        return Ok(UpdateSet::from_positions(passing));
    }
    Ok(select_topk(conf, 1))
}

/// Applies one reverse transition to `seq`.
///
/// `pred` must be keyed on masked positions of `seq`. It may cover a
/// *subset* of the mask set: positions outside `pred` are outside this
/// step's window (block-wise generation predicts only the active block) and
/// simply stay MASK. An empty `pred` — fully unmasked input or an empty
/// window — is the identity step with an empty update set and zero log
/// potential.
///
/// `steps_remaining` feeds the top-k budget `ceil(|pred| / steps_remaining)`
/// and is ignored by the threshold policy.
pub fn kernel_step(
    seq: &Sequence,
    pred: &PredictiveOutput,
    policy: &RemaskPolicy,
    tau: f64,
    steps_remaining: u32,
    vocab: Vocab,
    rng: &mut impl Rng,
) -> Result<KernelStepResult> {
    for row in pred.rows() {
        if row.pos >= seq.len() || !vocab.is_mask(seq.token(row.pos)) {
            return Err(Error::invalid(format!(
                "prediction keyed on position {} which is not masked in the sequence",
                row.pos
            )));
        }
        if row.logits.len() != vocab.num_real_tokens() {
            return Err(Error::invalid(format!(
                "logit row of length {} does not match the {} real tokens",
                row.logits.len(),
                vocab.num_real_tokens()
            )));
        }
    }
    if pred.is_empty() {
        return Ok(KernelStepResult {
            next: seq.clone(),
            update_set: UpdateSet::default(),
            log_potential: 0.0,
            draft: Vec::new(),
            confidence: Confidence::default(),
        });
    }

    let (draft, confidence) = draft_and_confidence(pred, tau, rng)?;
    let update_set = match policy {
        RemaskPolicy::TopK => {
            let budget = unmask_budget(policy, pred.len(), steps_remaining)?;
            select_topk(&confidence, budget)
        }
        RemaskPolicy::Threshold { rho } => select_threshold(&confidence, *rho)?,
    };

    let mut next = seq.clone();
    let mut log_potential = 0.0;
    for &(pos, tok) in &draft {
        if update_set.contains(pos) {
            next.set_token(pos, tok);
            log_potential += confidence.get(pos).expect("draft positions have confidence").ln();
        }
        // Unselected drafts are discarded; the position stays MASK.
    }
    Ok(KernelStepResult { next, update_set, log_potential, draft, confidence })
}

/// One step of the plain time-reversal ancestral sampler (no remasking
/// policy): each masked position independently stays MASK with probability
/// `(1 - alpha_s) / (1 - alpha_t)` and otherwise unmasks with a token drawn
/// from the model's predictive distribution.
///
/// This vanilla mode exists to make the textbook reverse posterior
/// executable for schedule tests; the SMC sampler itself always uses
/// [`kernel_step`].
pub fn vanilla_step(
    seq: &Sequence,
    pred: &PredictiveOutput,
    alpha_s: f64,
    alpha_t: f64,
    vocab: Vocab,
    rng: &mut impl Rng,
) -> Result<Sequence> {
    if !(0.0..=1.0).contains(&alpha_s) || !(0.0..=1.0).contains(&alpha_t) || alpha_s < alpha_t {
        return Err(Error::invalid(format!(
            "need 0 <= alpha_t <= alpha_s <= 1 going backward, got alpha_s={alpha_s}, alpha_t={alpha_t}"
        )));
    }
    if seq.mask_count(vocab) > 0 && alpha_t >= 1.0 {
        return Err(Error::invalid("alpha_t = 1 leaves no mask mass to reverse from"));
    }
    let mut next = seq.clone();
    let keep_mask = (1.0 - alpha_s) / (1.0 - alpha_t);
    for row in pred.rows() {
        if row.pos >= seq.len() || !vocab.is_mask(seq.token(row.pos)) {
            return Err(Error::invalid(format!(
                "prediction keyed on position {} which is not masked in the sequence",
                row.pos
            )));
        }
        if !(rng.random::<f64>() < keep_mask) {
            let tok = gumbel_max_sample(&row.logits, 1.0, rng)?;
            next.set_token(row.pos, tok as Token);
        }
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::{alpha_schedule, forward_mask, ScheduleKind};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Logits whose softmax equals the given probabilities exactly enough.
    fn logits_of(probs: &[f64]) -> Vec<f64> {
        probs.iter().map(|p| p.ln()).collect()
    }

    #[test]
    fn tau_zero_is_argmax_on_every_seed() {
        let logits = [1.0, 3.0, 2.0];
        for seed in 0..1000 {
            let tok = gumbel_max_sample(&logits, 0.0, &mut rng(seed)).unwrap();
            assert_eq!(tok, 1);
        }
    }

    #[test]
    fn tau_zero_draws_no_randomness() {
        let mut r = rng(9);
        let before = r.clone();
        gumbel_max_sample(&[0.5, 0.1], 0.0, &mut r).unwrap();
        assert_eq!(r, before, "argmax must not consume the stream");
    }

    #[test]
    fn gumbel_rejects_bad_input() {
        let mut r = rng(1);
        assert!(gumbel_max_sample(&[0.0, 1.0], -0.5, &mut r).is_err());
        assert!(gumbel_max_sample(&[], 1.0, &mut r).is_err());
        assert!(gumbel_max_sample(&[f64::NAN, 0.0], 1.0, &mut r).is_err());
        assert!(gumbel_max_sample(&[f64::INFINITY, 0.0], 1.0, &mut r).is_err());
        assert!(gumbel_max_sample(&[f64::NEG_INFINITY; 2], 1.0, &mut r).is_err());
    }

    #[test]
    fn gumbel_never_draws_zero_probability_tokens() {
        let logits = [f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY];
        let mut r = rng(2);
        for _ in 0..500 {
            assert_eq!(gumbel_max_sample(&logits, 1.0, &mut r).unwrap(), 1);
        }
    }

    #[test]
    fn gumbel_frequencies_match_softmax() {
        // softmax([0, ln 3]) = (0.25, 0.75): token-1 frequency within 3
        // binomial standard errors over 100k draws.
        let logits = [0.0, 3.0f64.ln()];
        let draws = 100_000u32;
        let mut r = rng(3);
        let mut ones = 0u32;
        for _ in 0..draws {
            ones += gumbel_max_sample(&logits, 1.0, &mut r).unwrap() as u32;
        }
        let freq = f64::from(ones) / f64::from(draws);
        let se = (0.75f64 * 0.25 / f64::from(draws)).sqrt();
        assert!((freq - 0.75).abs() <= 3.0 * se, "frequency {freq}");
    }

    #[test]
    fn tempering_sharpens_the_draw_distribution() {
        // At tau = 0.25 the same logits draw the favored token much more
        // often than softmax at tau = 1 would.
        let logits = [0.0, 1.0];
        let mut r = rng(4);
        let mut ones = 0u32;
        for _ in 0..20_000 {
            ones += gumbel_max_sample(&logits, 0.25, &mut r).unwrap() as u32;
        }
        let freq = f64::from(ones) / 20_000.0;
        let tempered = (1.0f64 / 0.25).exp() / (1.0 + (1.0f64 / 0.25).exp());
        let se = (tempered * (1.0 - tempered) / 20_000.0).sqrt();
        assert!((freq - tempered).abs() <= 4.0 * se, "frequency {freq} vs {tempered}");
    }

    #[test]
    fn confidence_is_untempered_even_when_sampling_is_tempered() {
        let pred = PredictiveOutput::from_rows(vec![(0, logits_of(&[0.7, 0.2, 0.1]))]).unwrap();
        // tau = 0: draft is the argmax token, confidence its own probability.
        let (draft, conf) = draft_and_confidence(&pred, 0.0, &mut rng(5)).unwrap();
        assert_eq!(draft, vec![(0, 0)]);
        assert!((conf.get(0).unwrap() - 0.7).abs() < 1e-12);
        // Heavily tempered sampling still reports untempered probabilities.
        let mut r = rng(6);
        for _ in 0..200 {
            let (draft, conf) = draft_and_confidence(&pred, 3.0, &mut r).unwrap();
            let tok = draft[0].1 as usize;
            let expect = [0.7, 0.2, 0.1][tok];
            assert!((conf.get(0).unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_row_gives_certain_confidence() {
        let pred =
            PredictiveOutput::from_rows(vec![(2, vec![f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY])])
                .unwrap();
        for tau in [0.0, 0.5, 1.0, 4.0] {
            let (draft, conf) = draft_and_confidence(&pred, tau, &mut rng(7)).unwrap();
            assert_eq!(draft, vec![(2, 1)]);
            assert_eq!(conf.get(2).unwrap(), 1.0);
        }
    }

    #[test]
    fn even_row_always_reports_half() {
        let pred = PredictiveOutput::from_rows(vec![(0, logits_of(&[0.5, 0.5]))]).unwrap();
        let mut r = rng(8);
        for _ in 0..100 {
            let (_, conf) = draft_and_confidence(&pred, 1.0, &mut r).unwrap();
            assert!((conf.get(0).unwrap() - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn topk_selects_order_statistics() {
        let conf = Confidence::from_entries(vec![(0, 0.9), (1, 0.1), (2, 0.5)]);
        assert_eq!(select_topk(&conf, 2).positions(), &[0, 2]);
        assert_eq!(select_topk(&conf, 0).positions(), &[] as &[usize]);
        assert_eq!(select_topk(&conf, 99).positions(), &[0, 1, 2]);
        let tied = Confidence::from_entries(vec![(0, 0.4), (1, 0.4)]);
        assert_eq!(select_topk(&tied, 1).positions(), &[0], "ties break to the lowest index");
    }

    #[test]
    fn threshold_filters_with_fallback() {
        let conf = Confidence::from_entries(vec![(0, 0.9), (1, 0.1), (2, 0.5)]);
        assert_eq!(select_threshold(&conf, 0.6).unwrap().positions(), &[0]);
        let low = Confidence::from_entries(vec![(0, 0.3), (1, 0.2)]);
        assert_eq!(select_threshold(&low, 0.6).unwrap().positions(), &[0], "fallback to top-1");
        let exact = Confidence::from_entries(vec![(0, 1.0), (1, 0.7)]);
        assert_eq!(select_threshold(&exact, 1.0).unwrap().positions(), &[0]);
        assert!(select_threshold(&conf, 0.0).is_err());
        assert!(select_threshold(&conf, 1.5).is_err());
        assert!(select_threshold(&Confidence::default(), 0.5).unwrap().is_empty());
    }

    #[test]
    fn kernel_step_on_unmasked_input_is_identity() {
        let vocab = Vocab::new(3).unwrap();
        let seq = Sequence::new(vec![0, 1, 0], vocab).unwrap();
        let out = kernel_step(
            &seq,
            &PredictiveOutput::empty(),
            &RemaskPolicy::top_k(),
            1.0,
            4,
            vocab,
            &mut rng(10),
        )
        .unwrap();
        assert_eq!(out.next, seq);
        assert!(out.update_set.is_empty());
        assert_eq!(out.log_potential, 0.0);
    }

    #[test]
    fn single_mask_accumulates_its_log_confidence() {
        let vocab = Vocab::new(3).unwrap();
        let seq = Sequence::new(vec![0, 2], vocab).unwrap();
        let pred = PredictiveOutput::from_rows(vec![(1, logits_of(&[0.5, 0.5]))]).unwrap();
        let out =
            kernel_step(&seq, &pred, &RemaskPolicy::top_k(), 1.0, 1, vocab, &mut rng(11)).unwrap();
        assert_eq!(out.update_set.positions(), &[1]);
        assert!(out.next.is_fully_unmasked(vocab));
        assert!((out.log_potential - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn potential_is_the_product_of_accepted_confidences() {
        // Two masks whose argmax confidences are 0.5 and 0.2; both selected
        // gives log potential ln(0.1).
        let vocab = Vocab::new(7).unwrap();
        let row_half = logits_of(&[0.5, 0.1, 0.1, 0.1, 0.1, 0.1]);
        let row_fifth = logits_of(&[0.2, 0.16, 0.16, 0.16, 0.16, 0.16]);
        let seq = Sequence::new(vec![6, 0, 6], vocab).unwrap();
        let pred = PredictiveOutput::from_rows(vec![(0, row_half), (2, row_fifth)]).unwrap();
        let out =
            kernel_step(&seq, &pred, &RemaskPolicy::top_k(), 0.0, 1, vocab, &mut rng(12)).unwrap();
        // Budget ceil(2/1) = 2: both selected.
        assert_eq!(out.update_set.positions(), &[0, 2]);
        assert!((out.log_potential - 0.1f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kernel_step_rejects_mismatched_predictions() {
        let vocab = Vocab::new(3).unwrap();
        let seq = Sequence::new(vec![0, 2], vocab).unwrap();
        // Keyed on an unmasked position.
        let bad = PredictiveOutput::from_rows(vec![(0, vec![0.0, 0.0])]).unwrap();
        assert!(kernel_step(&seq, &bad, &RemaskPolicy::top_k(), 1.0, 1, vocab, &mut rng(13)).is_err());
        // Wrong row width.
        let wide = PredictiveOutput::from_rows(vec![(1, vec![0.0, 0.0, 0.0])]).unwrap();
        assert!(kernel_step(&seq, &wide, &RemaskPolicy::top_k(), 1.0, 1, vocab, &mut rng(14)).is_err());
    }

    #[test]
    fn windowed_predictions_leave_outside_masks_alone() {
        let vocab = Vocab::new(3).unwrap();
        let seq = Sequence::new(vec![2, 2, 2, 2], vocab).unwrap();
        let pred = PredictiveOutput::from_rows(vec![
            (0, logits_of(&[0.9, 0.1])),
            (1, logits_of(&[0.8, 0.2])),
        ])
        .unwrap();
        let out =
            kernel_step(&seq, &pred, &RemaskPolicy::top_k(), 0.0, 1, vocab, &mut rng(15)).unwrap();
        assert_eq!(out.update_set.positions(), &[0, 1]);
        assert!(vocab.is_mask(out.next.token(2)));
        assert!(vocab.is_mask(out.next.token(3)));
    }

    /// Random prediction rows for a sequence's mask subset.
    fn random_pred(
        seq: &Sequence,
        vocab: Vocab,
        seed: u64,
    ) -> PredictiveOutput {
        let mut r = rng(seed);
        let rows = seq
            .mask_set(vocab)
            .into_iter()
            .map(|pos| {
                let logits: Vec<f64> =
                    (0..vocab.num_real_tokens()).map(|_| r.random::<f64>() * 4.0 - 2.0).collect();
                (pos, logits)
            })
            .collect();
        PredictiveOutput::from_rows(rows).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        /// Unmasked positions are bitwise untouched; masks only decrease; the
        /// potential equals an independently recomputed sum over the update
        /// set; a step with masks always unmasks at least one position.
        #[test]
        fn kernel_step_respects_the_three_branches(
            seed in any::<u64>(),
            vocab_size in 2u32..8,
            len in 1usize..24,
            steps_remaining in 1u32..6,
            tau in prop_oneof![Just(0.0), 0.2f64..2.0],
            use_threshold in any::<bool>(),
            rho in 0.05f64..1.0,
        ) {
            let vocab = Vocab::new(vocab_size).unwrap();
            let mut r = rng(seed);
            let tokens: Vec<Token> = (0..len).map(|_| r.random_range(0..vocab_size)).collect();
            let seq = Sequence::new(tokens, vocab).unwrap();
            let pred = random_pred(&seq, vocab, seed ^ 0xabcd);
            let policy = if use_threshold {
                RemaskPolicy::threshold(rho).unwrap()
            } else {
                RemaskPolicy::top_k()
            };
            let before_masks = seq.mask_count(vocab);
            let out = kernel_step(&seq, &pred, &policy, tau, steps_remaining, vocab, &mut r).unwrap();

            // Dirac branch: non-mask positions identical.
            for pos in 0..len {
                if !vocab.is_mask(seq.token(pos)) {
                    prop_assert_eq!(out.next.token(pos), seq.token(pos));
                }
            }
            // Mask count strictly decreases whenever masks remain.
            let after_masks = out.next.mask_count(vocab);
            prop_assert!(after_masks <= before_masks);
            if before_masks > 0 {
                prop_assert!(after_masks < before_masks);
            }
            // S is the set difference of the mask sets.
            let unmasked: Vec<usize> = (0..len)
                .filter(|&p| vocab.is_mask(seq.token(p)) && !vocab.is_mask(out.next.token(p)))
                .collect();
            prop_assert_eq!(out.update_set.positions(), unmasked.as_slice());
            // Update-set size honors the policy.
            if !use_threshold {
                let budget = unmask_budget(&RemaskPolicy::top_k(), pred.len(), steps_remaining).unwrap();
                prop_assert_eq!(out.update_set.len(), budget.min(pred.len()));
            } else if before_masks > 0 {
                prop_assert!(!out.update_set.is_empty());
            }
            // Accepted positions carry their drafts.
            for &(pos, tok) in &out.draft {
                if out.update_set.contains(pos) {
                    prop_assert_eq!(out.next.token(pos), tok);
                } else {
                    prop_assert!(vocab.is_mask(out.next.token(pos)));
                }
            }
            // Log potential against an independent recomputation.
            let mut expect = 0.0;
            for &(pos, c) in out.confidence.entries() {
                if out.update_set.contains(pos) {
                    expect += c.ln();
                }
            }
            prop_assert!((out.log_potential - expect).abs() <= 1e-12);
            // Confidences live in (0, 1].
            for &(_, c) in out.confidence.entries() {
                prop_assert!(c > 0.0 && c <= 1.0);
            }
        }

        /// Selection invariants on random confidence maps.
        #[test]
        fn selection_contracts(
            entries in proptest::collection::btree_map(0usize..32, 0.0001f64..1.0, 0..12),
            budget in 0usize..14,
            rho in 0.05f64..1.0,
        ) {
            let conf = Confidence::from_entries(entries.clone().into_iter().collect());
            let top = select_topk(&conf, budget);
            prop_assert_eq!(top.len(), budget.min(conf.len()));
            // Every selected confidence >= every unselected confidence.
            let min_sel = top.positions().iter().map(|p| conf.get(*p).unwrap())
                .fold(f64::INFINITY, f64::min);
            for (pos, c) in conf.entries() {
                if !top.contains(*pos) && top.len() < conf.len() && !top.is_empty() {
                    prop_assert!(*c <= min_sel + 1e-15);
                }
            }
            let th = select_threshold(&conf, rho).unwrap();
            for pos in th.positions() {
                prop_assert!(entries.contains_key(pos));
            }
            if !conf.is_empty() {
                prop_assert!(!th.is_empty(), "threshold fallback guarantees progress");
            }
        }
    }

    #[test]
    fn vanilla_reverse_reproduces_the_forward_marginal() {
        // Forward-mask a clean sequence to step t, then run vanilla
        // ancestral steps (with the true x0 as a Dirac predictive) back to
        // step s. The mask rate at s must match 1 - alpha(s) within 3
        // standard errors over 10k runs.
        let vocab = Vocab::new(4).unwrap();
        let sched = alpha_schedule(ScheduleKind::Linear, 4).unwrap();
        let len = 8usize;
        let x0 = Sequence::new(vec![0, 1, 2, 0, 1, 2, 0, 1], vocab).unwrap();
        let t = 4u32;
        let s = 2u32;
        let runs = 10_000u32;
        let mut masked_at_s = 0usize;
        let mut r = rng(20);
        for _ in 0..runs {
            let mut x = forward_mask(&x0, t, &sched, vocab, &mut r).unwrap();
            for step in ((s + 1)..=t).rev() {
                // Dirac predictive at the true tokens.
                let rows = x
                    .mask_set(vocab)
                    .into_iter()
                    .map(|pos| {
                        let mut logits = vec![f64::NEG_INFINITY; vocab.num_real_tokens()];
                        logits[x0.token(pos) as usize] = 0.0;
                        (pos, logits)
                    })
                    .collect();
                let pred = PredictiveOutput::from_rows(rows).unwrap();
                x = vanilla_step(&x, &pred, sched.alpha(step - 1), sched.alpha(step), vocab, &mut r)
                    .unwrap();
            }
            masked_at_s += x.mask_count(vocab);
        }
        let n = f64::from(runs) * len as f64;
        let rate = masked_at_s as f64 / n;
        let expect = 1.0 - sched.alpha(s);
        let se = (expect * (1.0 - expect) / n).sqrt();
        assert!((rate - expect).abs() <= 3.0 * se, "mask rate {rate} vs {expect}");
    }
}
