//! The particle system: initialization, re-weighting by trajectory-level
//! confidence, ESS-adaptive resampling, propagation, and final selection.
//!
//! One generation runs `N` particles — independent reverse diffusion
//! processes — through the same step schedule. Each step every particle
//! drafts, accepts an update set, and multiplies its importance weight by
//! the step potential (the joint model probability of what it just
//! accepted). Because the proposal *is* the transition kernel, that
//! potential is exactly the incremental importance weight, and a particle's
//! weight is its trajectory-level confidence. Resampling — systematic or
//! multinomial, triggered adaptively when the effective sample size drops
//! below `N/2` at a checkpoint — culls low-confidence trajectories. The
//! returned output is the particle with the highest weight accumulated
//! since the last resample.
//!
//! All weights live in log space; normalization is max-shifted.
//!
//! Concurrency model: the propagate phase is embarrassingly parallel across
//! particles (the backend batches all `N` predictions per step);
//! normalization, ESS, resampling, and selection are single-orchestrator
//! barriers. Reproducibility comes from per-particle RNG streams keyed by
//! `(master seed, particle index, resample generation)` — independent of
//! scheduling order, and reassigned on every resample so duplicated
//! offspring immediately decorrelate.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::core::{RemaskPolicy, Sequence, Vocab};
use crate::error::{Error, Result};
use crate::kernel::{kernel_step, KernelStepResult};
use crate::model::Backend;
use crate::numeric;
use crate::pipeline::{BlockPlan, CheckpointRule, GenerationTrace, StepRecord};

const ROLE_PARTICLE: u64 = 0;
const ROLE_RESAMPLER: u64 = 1;

/// Builds the independent RNG stream for a particle slot: keyed by the
/// master seed, the slot index, and the resample generation. Exposed so
/// tests can replay exactly the stream a particle would consume.
pub fn particle_stream(master_seed: u64, index: usize, generation: u64) -> ChaCha8Rng {
    derive_stream(master_seed, ROLE_PARTICLE, index as u64, generation)
}

fn derive_stream(master_seed: u64, role: u64, index: u64, generation: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&master_seed.to_le_bytes());
    key[8..16].copy_from_slice(&role.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    key[24..32].copy_from_slice(&generation.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// One diffusion sampling process inside the ensemble.
#[derive(Debug, Clone)]
pub struct Particle {
    /// Current sequence state.
    pub seq: Sequence,
    /// Log of the importance weight accumulated since the last resample
    /// (finite or `-inf`, never NaN).
    pub cum_log_weight: f64,
    /// Index of the particle this one was copied from at the last resample
    /// (its own index before any resample).
    pub ancestor: usize,
    rng: ChaCha8Rng,
}

impl Particle {
    /// The per-particle RNG stream (used by tests that replay propagation).
    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// The `N`-particle system with its normalized weights and bookkeeping.
#[derive(Debug, Clone)]
pub struct Ensemble {
    /// The particles, in slot order.
    pub particles: Vec<Particle>,
    /// Normalized weights (softmax of the cumulative log weights); sums to
    /// 1 within 1e-9.
    pub normalized_weights: Vec<f64>,
    /// Effective sample size `1 / Σ w²`, in `[1, N]`.
    pub ess: f64,
    /// Number of kernel steps applied so far.
    pub step: u32,
    /// Running log of the normalizing-constant estimate `Ẑ`: one factor
    /// `log Σ_i w_prev_i · exp(inc_i)` per re-weight event.
    pub log_z_hat: f64,
    master_seed: u64,
    generation: u64,
}

impl Ensemble {
    /// Number of particles.
    pub fn num_particles(&self) -> usize {
        self.particles.len()
    }

    /// How many resamples have happened.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// The master seed the particle streams derive from.
    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }
}

/// Which resampling scheme to draw offspring with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleScheme {
    /// `N` independent weight-proportional draws; higher variance, used by
    /// the unbiasedness tests.
    Multinomial,
    /// One uniform offset, `N` stratified points; offspring counts are
    /// always `⌊Nw⌋` or `⌈Nw⌉`. The default.
    Systematic,
}

/// When resampling is allowed to fire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleTrigger {
    /// Resample at a checkpoint iff `ESS < N/2`.
    Adaptive,
    /// Resample at every checkpoint.
    Always,
    /// Never resample (plain importance decoding).
    Never,
}

/// Scheme + trigger + how often checkpoints occur.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResamplePolicy {
    /// Offspring-drawing scheme.
    pub scheme: ResampleScheme,
    /// Firing rule, evaluated only at checkpoints.
    pub trigger: ResampleTrigger,
    /// Steps between checkpoint eligibility checks (`>= 1`).
    pub checkpoint_every: u32,
}

impl Default for ResamplePolicy {
    fn default() -> Self {
        ResamplePolicy {
            scheme: ResampleScheme::Systematic,
            trigger: ResampleTrigger::Adaptive,
            checkpoint_every: 1,
        }
    }
}

impl ResamplePolicy {
    /// Validates `checkpoint_every >= 1`.
    pub fn validate(&self) -> Result<()> {
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every must be at least 1"));
        }
        Ok(())
    }
}

/// Everything a single SMC generation needs besides the backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmcConfig {
    /// Vocabulary (must match the backend's).
    pub vocab: Vocab,
    /// Sequence length `L`.
    pub len: usize,
    /// Diffusion steps `T` for single-block generation.
    pub steps: u32,
    /// Number of particles `N`.
    pub particles: usize,
    /// Sampling temperature (drafting only; confidence stays untempered).
    pub tau: f64,
    /// Remasking policy.
    pub policy: RemaskPolicy,
    /// Resampling policy.
    pub resample: ResamplePolicy,
    /// Master seed for all RNG streams.
    pub seed: u64,
}

impl SmcConfig {
    /// Validates every field range.
    pub fn validate(&self) -> Result<()> {
        if self.len == 0 {
            return Err(Error::config("sequence length must be positive"));
        }
        if self.steps == 0 {
            return Err(Error::config("step count must be positive"));
        }
        if self.particles == 0 {
            return Err(Error::config("particle count must be positive"));
        }
        if !(self.tau >= 0.0) {
            return Err(Error::config(format!("temperature must be non-negative, got {}", self.tau)));
        }
        if let RemaskPolicy::Threshold { rho } = self.policy {
            if !(rho > 0.0 && rho <= 1.0) {
                return Err(Error::config(format!("threshold must lie in (0, 1], got {rho}")));
            }
        }
        self.resample.validate()
    }
}

/// Fresh ensemble: `N` all-MASK sequences of length `len`, uniform weights,
/// zero cumulative log weights, independent per-particle RNG streams derived
/// from `master_seed`.
pub fn init_particles(n: usize, len: usize, vocab: Vocab, master_seed: u64) -> Result<Ensemble> {
    if n == 0 {
        return Err(Error::config("particle count must be positive"));
    }
    if len == 0 {
        return Err(Error::config("sequence length must be positive"));
    }
    let blank = Sequence::all_masked(len, vocab)?;
    let particles = (0..n)
        .map(|i| Particle {
            seq: blank.clone(),
            cum_log_weight: 0.0,
            ancestor: i,
            rng: particle_stream(master_seed, i, 0),
        })
        .collect();
    Ok(Ensemble {
        particles,
        normalized_weights: vec![1.0 / n as f64; n],
        ess: n as f64,
        step: 0,
        log_z_hat: 0.0,
        master_seed,
        generation: 0,
    })
}

/// The incremental log importance weight of one kernel step: exactly the
/// step's log potential, `Σ_{j∈S} ln c(j)` (0 for an empty update set).
/// With the proposal equal to the transition kernel the kernel densities
/// cancel out of the weight ratio and only the potential survives.
pub fn incremental_log_weight(result: &KernelStepResult) -> f64 {
    result.log_potential
}

/// Max-shifted softmax of the log weights; errors when no entry is finite.
pub fn normalize_log_weights(log_w: &[f64]) -> Result<Vec<f64>> {
    if log_w.is_empty() {
        return Err(Error::DegenerateEnsemble("no particles to normalize".into()));
    }
    if log_w.iter().any(|v| v.is_nan()) {
        return Err(Error::DegenerateEnsemble("log weight is NaN".into()));
    }
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::DegenerateEnsemble(
            "every particle carries zero weight (all log weights are -inf)".into(),
        ));
    }
    let shifted: Vec<f64> = log_w.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = shifted.iter().sum();
    Ok(shifted.into_iter().map(|w| w / total).collect())
}

/// Effective sample size `1 / Σ w²` of normalized weights.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    let sum_sq: f64 = weights.iter().map(|w| w * w).sum();
    1.0 / sum_sq
}

/// Replaces the ensemble with weight-proportional offspring: offspring copy
/// ancestor sequences, cumulative log weights reset to 0, normalized weights
/// to `1/N`, and every slot gets a fresh RNG stream for the new generation.
/// Returns the ancestry vector (offspring slot -> ancestor index) for the
/// trace.
pub fn resample(
    ensemble: &mut Ensemble,
    scheme: ResampleScheme,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let n = ensemble.num_particles();
    let weights = &ensemble.normalized_weights;
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::DegenerateEnsemble(
            "cannot resample from degenerate weights".into(),
        ));
    }
    let ancestry = match scheme {
        ResampleScheme::Systematic => systematic_ancestry(weights, rng),
        ResampleScheme::Multinomial => multinomial_ancestry(weights, rng),
    };
    ensemble.generation += 1;
    ensemble.particles = ancestry
        .iter()
        .enumerate()
        .map(|(slot, &a)| Particle {
            seq: ensemble.particles[a].seq.clone(),
            cum_log_weight: 0.0,
            ancestor: a,
            rng: particle_stream(ensemble.master_seed, slot, ensemble.generation),
        })
        .collect();
    ensemble.normalized_weights = vec![1.0 / n as f64; n];
    ensemble.ess = n as f64;
    Ok(ancestry)
}

fn systematic_ancestry(weights: &[f64], rng: &mut impl Rng) -> Vec<usize> {
    let n = weights.len();
    // Offset in (0, 1]: an offset of exactly 0 would hand the first
    // stratified point to particle 0 regardless of its weight, breaking the
    // floor/ceil offspring-count guarantee.
    let offset: f64 = 1.0 - rng.random::<f64>();
    let total: f64 = weights.iter().sum();
    let mut ancestry = Vec::with_capacity(n);
    let mut cum = weights[0];
    let mut i = 0usize;
    for k in 0..n {
        // Stratified point in (0, total], one per offspring slot.
        let point = (k as f64 + offset) / n as f64 * total;
        while point > cum && i < n - 1 {
            i += 1;
            cum += weights[i];
        }
        ancestry.push(i);
    }
    ancestry
}

fn multinomial_ancestry(weights: &[f64], rng: &mut impl Rng) -> Vec<usize> {
    let n = weights.len();
    let total: f64 = weights.iter().sum();
    (0..n)
        .map(|_| {
            let point: f64 = rng.random::<f64>() * total;
            let mut cum = 0.0;
            for (i, &w) in weights.iter().enumerate() {
                cum += w;
                if point < cum {
                    return i;
                }
            }
            // Numerical leftover: last positive-weight slot.
            weights.iter().rposition(|&w| w > 0.0).expect("positive total")
        })
        .collect()
}

/// Self-normalized estimator `Σ_i w_i f(seq_i)` over the current ensemble.
pub fn weighted_expectation(ensemble: &Ensemble, f: impl Fn(&Sequence) -> f64) -> f64 {
    ensemble
        .particles
        .iter()
        .zip(&ensemble.normalized_weights)
        .map(|(p, &w)| w * f(&p.seq))
        .sum()
}

/// Index of the particle with the highest weight accumulated since the last
/// resample, ties to the lowest index — the generation's output.
pub fn select_output(ensemble: &Ensemble) -> usize {
    let cums: Vec<f64> = ensemble.particles.iter().map(|p| p.cum_log_weight).collect();
    numeric::argmax(&cums).expect("ensemble is non-empty")
}

/// Runs the full resample/propagate/re-weight loop over a block plan and
/// returns the terminal ensemble (weights, `log Ẑ`, sequences) together with
/// the step-by-step trace. [`smc_generate`] and the block-wise pipeline are
/// thin wrappers over this.
pub fn run_plan(backend: &Backend, plan: &BlockPlan, cfg: &SmcConfig) -> Result<(Ensemble, GenerationTrace)> {
    cfg.validate()?;
    plan.validate()?;
    if plan.block_size * plan.num_blocks != cfg.len {
        return Err(Error::config(format!(
            "block plan covers {} positions but the config length is {}",
            plan.block_size * plan.num_blocks,
            cfg.len
        )));
    }
    if backend.vocab() != cfg.vocab {
        return Err(Error::config("backend vocabulary does not match the config"));
    }
    if backend.expected_len() != cfg.len {
        return Err(Error::config(format!(
            "backend expects length {} but the config says {}",
            backend.expected_len(),
            cfg.len
        )));
    }

    let n = cfg.particles;
    let mut ensemble = init_particles(n, cfg.len, cfg.vocab, cfg.seed)?;
    let mut resampler_rng = derive_stream(cfg.seed, ROLE_RESAMPLER, 0, 0);
    let mut records: Vec<StepRecord> = Vec::new();

    for block in 0..plan.num_blocks {
        let (lo, hi) = (block * plan.block_size, (block + 1) * plan.block_size);
        let is_last_block = block + 1 == plan.num_blocks;

        // The top-k budget rule consumes exactly `steps_per_block` steps per
        // block; the threshold policy loops until the block is clean (at
        // most `block_size` steps, since every step unmasks at least one
        // position of every unfinished particle).
        let mut local_step = 0u32;
        loop {
            local_step += 1;
            let (steps_remaining, block_done_after) = match cfg.policy {
                RemaskPolicy::TopK => {
                    if local_step > plan.steps_per_block {
                        break;
                    }
                    (plan.steps_per_block - local_step + 1, local_step == plan.steps_per_block)
                }
                RemaskPolicy::Threshold { .. } => {
                    let any_masked = ensemble
                        .particles
                        .iter()
                        .any(|p| window_mask_count(&p.seq, cfg.vocab, lo, hi) > 0);
                    if !any_masked {
                        break;
                    }
                    (1, false) // the done check re-runs after the step
                }
            };

            // Propagate: one batched prediction for all particles, then a
            // kernel step per particle on its block window.
            let seqs: Vec<Sequence> = ensemble.particles.iter().map(|p| p.seq.clone()).collect();
            let preds = backend.predict_batch(&seqs)?;
            let mut incs = Vec::with_capacity(n);
            let mut update_sizes = Vec::with_capacity(n);
            for (particle, pred) in ensemble.particles.iter_mut().zip(preds) {
                let windowed = pred.restrict(lo, hi);
                let result = kernel_step(
                    &particle.seq,
                    &windowed,
                    &cfg.policy,
                    cfg.tau,
                    steps_remaining,
                    cfg.vocab,
                    &mut particle.rng,
                )?;
                let inc = incremental_log_weight(&result);
                particle.seq = result.next;
                particle.cum_log_weight += inc;
                incs.push(inc);
                update_sizes.push(result.update_set.len());
            }

            // One Ẑ factor per re-weight event: log Σ_i w_prev_i · exp(inc_i),
            // with w_prev the normalized weights *before* this step.
            let z_terms: Vec<f64> = ensemble
                .normalized_weights
                .iter()
                .zip(&incs)
                .map(|(&w, &inc)| w.ln() + inc)
                .collect();
            ensemble.log_z_hat += crate::numeric::logsumexp(&z_terms);

            let cums: Vec<f64> = ensemble.particles.iter().map(|p| p.cum_log_weight).collect();
            ensemble.normalized_weights = normalize_log_weights(&cums)?;
            ensemble.ess = effective_sample_size(&ensemble.normalized_weights);
            ensemble.step += 1;

            let block_done = match cfg.policy {
                RemaskPolicy::TopK => block_done_after,
                RemaskPolicy::Threshold { .. } => ensemble
                    .particles
                    .iter()
                    .all(|p| window_mask_count(&p.seq, cfg.vocab, lo, hi) == 0),
            };
            let checkpoint = match plan.checkpoint {
                CheckpointRule::EveryK(k) => ensemble.step % k.max(1) == 0,
                CheckpointRule::PerBlock => block_done,
            };
            let run_done = is_last_block && block_done;
            let fire = match cfg.resample.trigger {
                ResampleTrigger::Always => true,
                ResampleTrigger::Adaptive => ensemble.ess < n as f64 / 2.0,
                ResampleTrigger::Never => false,
            };
            // Never resample after the terminal re-weight: it would erase
            // the weights the final argmax selection needs.
            let do_resample = checkpoint && fire && !run_done && n > 1;

            let mut record = StepRecord {
                step: ensemble.step - 1,
                block,
                log_weights: cums,
                ess: ensemble.ess,
                update_sizes,
                checkpoint,
                resampled: do_resample,
                ancestry: None,
            };
            if do_resample {
                record.ancestry = Some(resample(&mut ensemble, cfg.resample.scheme, &mut resampler_rng)?);
            }
            records.push(record);

            if cfg.policy == RemaskPolicy::TopK && block_done_after {
                break;
            }
        }

        // The budget rule makes schedule exhaustion inside a block impossible.
        if let Some(stuck) = ensemble
            .particles
            .iter()
            .map(|p| window_mask_count(&p.seq, cfg.vocab, lo, hi))
            .find(|&m| m > 0)
        {
            return Err(Error::ScheduleExhausted { masks_remaining: stuck });
        }
    }

    let final_selection = select_output(&ensemble);
    let trace = GenerationTrace {
        config: serde_json::json!({
            "particles": n,
            "len": cfg.len,
            "steps": cfg.steps,
            "tau": cfg.tau,
            "policy": cfg.policy,
            "resample": cfg.resample,
            "seed": cfg.seed,
            "block_size": plan.block_size,
            "num_blocks": plan.num_blocks,
        }),
        num_particles: n,
        num_blocks: plan.num_blocks,
        records,
        final_selection,
    };
    Ok((ensemble, trace))
}

fn window_mask_count(seq: &Sequence, vocab: Vocab, lo: usize, hi: usize) -> usize {
    seq.tokens()[lo..hi].iter().filter(|&&t| vocab.is_mask(t)).count()
}

/// Runs one single-block SMC generation and returns the terminal ensemble
/// plus its trace — the full-information form of [`smc_generate`], used when
/// the caller needs weights or the normalizer estimate.
pub fn smc_run(backend: &Backend, cfg: &SmcConfig) -> Result<(Ensemble, GenerationTrace)> {
    let plan = BlockPlan::single(cfg.len, cfg.steps, cfg.resample.checkpoint_every)?;
    run_plan(backend, &plan, cfg)
}

/// Runs one SMC generation end to end and returns the selected output —
/// the particle maximizing the weight accumulated since the last resample,
/// ties to the lowest index — together with the full trace.
pub fn smc_generate(backend: &Backend, cfg: &SmcConfig) -> Result<(Sequence, GenerationTrace)> {
    let (ensemble, trace) = smc_run(backend, cfg)?;
    let seq = ensemble.particles[trace.final_selection].seq.clone();
    Ok((seq, trace))
}
