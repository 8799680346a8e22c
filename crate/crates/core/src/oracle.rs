//! Brute-force ground truth for the sampler: exhaustive trajectory
//! enumeration under the transition kernel, exact path measures and
//! normalizer, ratio-form incremental weights, and plain importance
//! sampling — the references every statistical test of the engine leans on.
//!
//! Honesty rules. The enumerator never approximates: it either lists every
//! realizable trajectory exactly or refuses with a capacity error. Where it
//! can, it recomputes probabilities through its own arithmetic — a naive
//! exp-and-divide softmax over [`bayes_posterior`] rows, rather than the
//! engine's max-shifted one — so that agreement between the engine's
//! product-form weights and the oracle's ratio-form weights is a genuine
//! cross-check, not the same code run twice. Selection order (top-k,
//! ties to the lower position) is deliberately shared with the kernel:
//! it is a convention, not a probability, and is pinned by its own tests.
//!
//! Enumeration covers the top-k policy with `tau > 0`. Threshold selection
//! couples the branch structure to realized confidences; it enumerates in
//! principle but is excluded here because it doubles the enumerator without
//! adding verification power.

use std::collections::BTreeMap;

use crate::core::{unmask_budget, RemaskPolicy, Sequence, Token, Vocab};
use crate::error::{Error, Result};
use crate::kernel::{self, Confidence};
use crate::model::{bayes_posterior, Backend, MarkovChainSpec};
use crate::smc::{normalize_log_weights, particle_stream, SmcConfig};

/// Default ceiling on the worst-case number of enumerated trajectories.
pub const DEFAULT_PATH_CAP: u64 = 1_000_000;

/// One kernel step of one enumerated trajectory, with every probability
/// that the step realized.
#[derive(Debug, Clone, PartialEq)]
pub struct PathStep {
    /// Drafted token per masked position (ascending positions); empty for
    /// an identity step (no masks left but steps remaining).
    pub drafts: Vec<(usize, Token)>,
    /// Positions accepted this step (ascending).
    pub update_set: Vec<usize>,
    /// Sequence after accepting the update set.
    pub seq_after: Sequence,
    /// Log probability of drawing exactly these drafts from the tempered
    /// proposal.
    pub log_q: f64,
    /// Log potential of the step — the untempered model probability of the
    /// accepted tokens — computed by the oracle's own softmax.
    pub log_g_oracle: f64,
    /// The same potential as the engine computes it (kernel arithmetic).
    pub log_g_engine: f64,
}

/// One complete trajectory from all-MASK to fully unmasked.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    /// The steps, in order.
    pub steps: Vec<PathStep>,
    /// The terminal sequence.
    pub terminal: Sequence,
    /// Total log proposal probability `ln q(path)`.
    pub log_q: f64,
    /// Total log potential `ln Π_t G_t` (oracle arithmetic).
    pub log_g_oracle: f64,
    /// Total log potential per the engine's arithmetic.
    pub log_g_engine: f64,
}

/// Every realizable trajectory of a toy configuration, in deterministic
/// (draft-lexicographic) order.
#[derive(Debug, Clone)]
pub struct PathTable {
    /// The trajectories.
    pub paths: Vec<Path>,
    vocab: Vocab,
    len: usize,
    steps: u32,
    tau: f64,
}

impl PathTable {
    /// Vocabulary the table was enumerated under.
    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    /// Sequence length.
    pub fn len(&self) -> usize {
        self.len
    }

    /// True when the table holds no paths (unreachable for valid configs;
    /// present for API hygiene).
    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    /// Diffusion step count.
    pub fn steps(&self) -> u32 {
        self.steps
    }

    /// Proposal temperature the paths were enumerated at.
    pub fn tau(&self) -> f64 {
        self.tau
    }
}

/// The exact Feynman–Kac target computed from a complete [`PathTable`]:
/// the normalizer `Z = Σ_path q·ΠG` and the normalized terminal law.
#[derive(Debug, Clone)]
pub struct ExactTarget {
    /// Total unnormalized mass.
    pub z: f64,
    /// Terminal distribution `π_0`, sorted by token vector; sums to 1.
    pub terminal: Vec<(Sequence, f64)>,
}

impl ExactTarget {
    /// Probability of a terminal sequence (0 when unreachable).
    pub fn probability_of(&self, seq: &Sequence) -> f64 {
        self.terminal
            .iter()
            .find(|(s, _)| s == seq)
            .map(|(_, p)| *p)
            .unwrap_or(0.0)
    }
}

/// Exhaustively enumerates every trajectory the kernel can realize on the
/// exact-Bayes toy model: all draft combinations at every step (skipping
/// zero-probability drafts), top-k selection, until fully unmasked.
///
/// The worst-case trajectory count `Π_t (V−1)^{|M_t|}` must stay within
/// `cap`; temperature must be positive (zero temperature collapses the
/// proposal support and the path measure with it); the policy must be
/// top-k (threshold is excluded, see the module docs).
pub fn enumerate_paths(
    chain: &MarkovChainSpec,
    len: usize,
    steps: u32,
    tau: f64,
    policy: &RemaskPolicy,
    cap: u64,
) -> Result<PathTable> {
    if len == 0 {
        return Err(Error::invalid("sequence length must be positive"));
    }
    if steps == 0 {
        return Err(Error::invalid("step count must be positive"));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid(format!(
            "path enumeration requires tau > 0 (full proposal support), got {tau}"
        )));
    }
    if !matches!(policy, RemaskPolicy::TopK) {
        return Err(Error::invalid(
            "path enumeration supports only the top_k policy; threshold selection is excluded",
        ));
    }
    let vocab = chain.vocab();

    // Worst-case branch count: (V-1)^{masks} per step, masks shrinking by
    // the top-k budget. Refuse rather than approximate.
    let real = vocab.num_real_tokens() as f64;
    let mut masks = len;
    let mut needed = 1.0f64;
    for t in 1..=steps {
        if masks == 0 {
            break;
        }
        needed *= real.powi(masks as i32);
        if needed > cap as f64 {
            return Err(Error::CapacityExceeded { needed, cap });
        }
        masks -= unmask_budget(policy, masks, steps - t + 1)?;
    }

    let mut paths = Vec::new();
    let mut stack: Vec<PathStep> = Vec::new();
    let init = Sequence::all_masked(len, vocab)?;
    recurse(chain, vocab, &init, 1, steps, tau, &mut stack, &mut paths)?;
    Ok(PathTable { paths, vocab, len, steps, tau })
}

#[allow(clippy::too_many_arguments)]
fn recurse(
    chain: &MarkovChainSpec,
    vocab: Vocab,
    seq: &Sequence,
    t: u32,
    steps: u32,
    tau: f64,
    stack: &mut Vec<PathStep>,
    paths: &mut Vec<Path>,
) -> Result<()> {
    if t > steps {
        debug_assert!(seq.is_fully_unmasked(vocab), "budget rule must finish the schedule");
        paths.push(Path {
            steps: stack.clone(),
            terminal: seq.clone(),
            log_q: stack.iter().map(|s| s.log_q).sum(),
            log_g_oracle: stack.iter().map(|s| s.log_g_oracle).sum(),
            log_g_engine: stack.iter().map(|s| s.log_g_engine).sum(),
        });
        return Ok(());
    }

    let masked = seq.mask_set(vocab);
    if masked.is_empty() {
        // The ceiling budget can empty the sequence early; the remaining
        // steps are deterministic identity steps with unit q and G.
        stack.push(PathStep {
            drafts: vec![],
            update_set: vec![],
            seq_after: seq.clone(),
            log_q: 0.0,
            log_g_oracle: 0.0,
            log_g_engine: 0.0,
        });
        recurse(chain, vocab, seq, t + 1, steps, tau, stack, paths)?;
        stack.pop();
        return Ok(());
    }

    let budget = unmask_budget(&RemaskPolicy::TopK, masked.len(), steps - t + 1)?;
    let pred = bayes_posterior(chain, seq)?;
    let rows: Vec<&[f64]> = masked
        .iter()
        .map(|&p| pred.row(p).expect("every masked position has a row"))
        .collect();
    // Oracle-side arithmetic: naive softmax, no max shift.
    let tempered: Vec<Vec<f64>> = rows.iter().map(|r| plain_softmax(r, tau)).collect();
    let untempered: Vec<Vec<f64>> = rows.iter().map(|r| plain_softmax(r, 1.0)).collect();

    // Odometer over one drafted token per masked position, slot 0 fastest:
    // deterministic lexicographic branch order.
    let num_real = vocab.num_real_tokens();
    let mut combo = vec![0usize; masked.len()];
    loop {
        let mut log_q = 0.0;
        let mut realizable = true;
        for (slot, &tok) in combo.iter().enumerate() {
            let q = tempered[slot][tok];
            if q <= 0.0 {
                realizable = false;
                break;
            }
            log_q += q.ln();
        }
        if realizable {
            let conf = Confidence::from_entries(
                masked
                    .iter()
                    .zip(&combo)
                    .enumerate()
                    .map(|(slot, (&pos, &tok))| (pos, kernel::confidence_of(rows[slot], tok)))
                    .collect(),
            );
            let update = kernel::select_topk(&conf, budget);
            let mut next = seq.clone();
            let mut log_g_oracle = 0.0;
            let mut log_g_engine = 0.0;
            for &pos in update.positions() {
                let slot = masked.binary_search(&pos).expect("update set ⊆ mask set");
                let tok = combo[slot];
                log_g_oracle += untempered[slot][tok].ln();
                log_g_engine += conf.get(pos).expect("selected position has confidence").ln();
                next.set_token(pos, tok as Token);
            }
            stack.push(PathStep {
                drafts: masked.iter().zip(&combo).map(|(&p, &c)| (p, c as Token)).collect(),
                update_set: update.positions().to_vec(),
                seq_after: next.clone(),
                log_q,
                log_g_oracle,
                log_g_engine,
            });
            recurse(chain, vocab, &next, t + 1, steps, tau, stack, paths)?;
            stack.pop();
        }

        // Advance the odometer.
        let mut slot = 0;
        loop {
            combo[slot] += 1;
            if combo[slot] < num_real {
                break;
            }
            combo[slot] = 0;
            slot += 1;
            if slot == combo.len() {
                return Ok(());
            }
        }
    }
}

/// The oracle's own softmax: scale by `1/tau`, exponentiate, divide. No
/// max-shift — deliberately a different computation than the engine's.
fn plain_softmax(log_probs: &[f64], tau: f64) -> Vec<f64> {
    let scaled: Vec<f64> = log_probs.iter().map(|&l| (l / tau).exp()).collect();
    let sum: f64 = scaled.iter().sum();
    scaled.into_iter().map(|e| e / sum).collect()
}

/// Sums a complete path table into the exact normalizer `Z = Σ q·ΠG` and
/// the normalized terminal law `π_0(x) ∝ Σ_{paths ending at x} q·ΠG`.
pub fn exact_normalizer(table: &PathTable) -> ExactTarget {
    let mut z = 0.0f64;
    let mut mass: BTreeMap<Vec<Token>, f64> = BTreeMap::new();
    for path in &table.paths {
        let m = (path.log_q + path.log_g_oracle).exp();
        z += m;
        *mass.entry(path.terminal.tokens().to_vec()).or_insert(0.0) += m;
    }
    debug_assert!(z > 0.0, "a complete table always carries positive mass");
    let terminal = mass
        .into_iter()
        .map(|(tokens, m)| {
            let seq = Sequence::new(tokens, table.vocab).expect("terminal tokens are valid");
            (seq, m / z)
        })
        .collect();
    ExactTarget { z, terminal }
}

/// Evaluates the ratio-form incremental weight of `path`'s step `step`
/// directly from the unnormalized path measures:
/// `π̃_{after}/(π̃_{before} · q_step)`, each `π̃` a fresh prefix product.
/// Under the bootstrap proposal this must equal the step's product-form
/// potential `Π_{j∈S} c(j)` — the two sides reach that number through
/// different arithmetic, which is the point of the check.
pub fn ratio_incremental_weight(path: &Path, step: usize) -> Result<f64> {
    if step >= path.steps.len() {
        return Err(Error::invalid(format!(
            "step {step} out of range for a {}-step path",
            path.steps.len()
        )));
    }
    let log_pi = |upto: usize| -> f64 {
        path.steps[..upto].iter().map(|s| s.log_q + s.log_g_oracle).sum()
    };
    let numerator = log_pi(step + 1);
    let denominator = log_pi(step) + path.steps[step].log_q;
    if !denominator.is_finite() || !numerator.is_finite() {
        return Err(Error::DegeneratePath(format!(
            "zero path measure at step {step} (log num {numerator}, log den {denominator})"
        )));
    }
    Ok((numerator - denominator).exp())
}

/// Plain self-normalized importance sampling over whole trajectories: draws
/// `num_samples` independent rollouts from the proposal (no resampling),
/// weights each by its cumulative potential, and returns `Σ w_i f(x_i)`.
/// Exists to put a variance number next to SMC's on the same budget.
pub fn is_estimate(
    backend: &Backend,
    cfg: &SmcConfig,
    f: impl Fn(&Sequence) -> f64,
    num_samples: usize,
) -> Result<f64> {
    cfg.validate()?;
    if num_samples == 0 {
        return Err(Error::invalid("need at least one sample"));
    }
    let vocab = cfg.vocab;
    let mut log_weights = Vec::with_capacity(num_samples);
    let mut values = Vec::with_capacity(num_samples);
    for i in 0..num_samples {
        let mut rng = particle_stream(cfg.seed, i, 0);
        let mut seq = Sequence::all_masked(cfg.len, vocab)?;
        let mut log_w = 0.0;
        for step in 1..=cfg.steps {
            let pred = backend.predict(&seq)?;
            let out = kernel::kernel_step(
                &seq,
                &pred,
                &cfg.policy,
                cfg.tau,
                cfg.steps - step + 1,
                vocab,
                &mut rng,
            )?;
            log_w += out.log_potential;
            seq = out.next;
        }
        log_weights.push(log_w);
        values.push(f(&seq));
    }
    let weights = normalize_log_weights(&log_weights)?;
    Ok(weights.iter().zip(&values).map(|(w, v)| w * v).sum())
}
