//! Semi-autoregressive block-wise generation, overtake analysis, metrics,
//! and trace persistence.
//!
//! Long sequences decode left to right in fixed-size blocks: within a block
//! only that block's positions are masked, earlier blocks are frozen
//! context (the kernel's copy branch), and cumulative importance weights
//! carry across block boundaries until a resample fires. The trace records
//! every step — per-particle log weights, ESS, update-set sizes, checkpoint
//! and resample flags, ancestry — in enough detail to replay the weight
//! history offline, which is what the overtake analysis does: a block is an
//! "overtake" when the highest-weight particle at block end differs from
//! the one at block start.
//!
//! Traces persist as JSONL: a header line `{"version":1,"config":{...}}`
//! followed by one record per line. Log weights may legitimately be `-inf`
//! (a dead particle), which plain JSON cannot carry, so those entries are
//! written as the strings `"-inf"` / `"inf"` / `"nan"` and the round trip
//! is lossless field-for-field.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::core::Sequence;
use crate::error::{Error, Result};
use crate::model::{Backend, Scorer};
use crate::smc::{run_plan, SmcConfig};

/// When resample eligibility is checked during a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointRule {
    /// Every `k` kernel steps (global step count), `k >= 1`.
    EveryK(u32),
    /// At the last step of each block.
    PerBlock,
}

/// How a generation of length `L` splits into blocks and per-block step
/// budgets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPlan {
    /// Positions per block (`L'`).
    pub block_size: usize,
    /// Number of blocks; `block_size * num_blocks` must equal the total
    /// length.
    pub num_blocks: usize,
    /// Diffusion steps per block (`T'`) under the top-k policy; the
    /// threshold policy ignores it and runs until the block is clean.
    pub steps_per_block: u32,
    /// Resample checkpoint rule.
    pub checkpoint: CheckpointRule,
}

impl BlockPlan {
    /// Validates and builds a plan.
    pub fn new(
        block_size: usize,
        num_blocks: usize,
        steps_per_block: u32,
        checkpoint: CheckpointRule,
    ) -> Result<Self> {
        let plan = BlockPlan { block_size, num_blocks, steps_per_block, checkpoint };
        plan.validate()?;
        Ok(plan)
    }

    /// The degenerate one-block plan covering the whole sequence.
    pub fn single(len: usize, steps: u32, checkpoint_every: u32) -> Result<Self> {
        BlockPlan::new(len, 1, steps, CheckpointRule::EveryK(checkpoint_every))
    }

    /// Splits `len` into `len / block_size` blocks with the step budget
    /// divided evenly (ceiling division, so every block gets at least one
    /// step).
    pub fn split(len: usize, block_size: usize, steps: u32, checkpoint: CheckpointRule) -> Result<Self> {
        if block_size == 0 || len % block_size != 0 {
            return Err(Error::config(format!(
                "block size {block_size} does not divide the sequence length {len}"
            )));
        }
        let num_blocks = len / block_size;
        let steps_per_block = steps.div_ceil(num_blocks as u32).max(1);
        BlockPlan::new(block_size, num_blocks, steps_per_block, checkpoint)
    }

    /// Checks the field invariants.
    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 {
            return Err(Error::config("block size must be positive"));
        }
        if self.num_blocks == 0 {
            return Err(Error::config("block count must be positive"));
        }
        if self.steps_per_block == 0 {
            return Err(Error::config("per-block step budget must be at least 1"));
        }
        if let CheckpointRule::EveryK(0) = self.checkpoint {
            return Err(Error::config("checkpoint interval must be at least 1"));
        }
        Ok(())
    }

    /// Total sequence length the plan covers.
    pub fn total_len(&self) -> usize {
        self.block_size * self.num_blocks
    }
}

/// Everything the trace keeps about one kernel step of the ensemble.
/// `log_weights` are the cumulative (since last resample) per-particle log
/// weights after the step's re-weight and *before* any resample the same
/// step triggered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Global step ordinal, 0-based and strictly increasing.
    pub step: u32,
    /// Block the step ran in.
    pub block: usize,
    /// Per-particle cumulative log weights (may contain `-inf`).
    #[serde(with = "lossless_f64_vec")]
    pub log_weights: Vec<f64>,
    /// Effective sample size after the re-weight.
    pub ess: f64,
    /// Per-particle update-set sizes.
    pub update_sizes: Vec<usize>,
    /// Whether this step was resample-eligible.
    pub checkpoint: bool,
    /// Whether a resample fired.
    pub resampled: bool,
    /// Offspring-slot -> ancestor mapping; present iff `resampled`.
    pub ancestry: Option<Vec<usize>>,
}

/// The full step-by-step history of one generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    /// Echo of the generation parameters (shape is informational).
    pub config: serde_json::Value,
    /// Number of particles.
    pub num_particles: usize,
    /// Number of blocks in the plan.
    pub num_blocks: usize,
    /// Step records, strictly ordered by step.
    pub records: Vec<StepRecord>,
    /// Index of the particle selected as output.
    pub final_selection: usize,
}

/// Per-block dominant-particle bookkeeping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDominance {
    /// Block index.
    pub block: usize,
    /// Highest-weight particle entering the block (ties to lowest index).
    pub start_dominant: usize,
    /// Highest-weight particle at the block's last recorded step, before
    /// any boundary resample.
    pub end_dominant: usize,
    /// Whether the two differ.
    pub overtake: bool,
}

/// Summary of dominant-particle flips across a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OvertakeReport {
    /// One entry per block that has records.
    pub blocks: Vec<BlockDominance>,
    /// Number of blocks flagged.
    pub overtakes: usize,
    /// Number of blocks examined.
    pub total_blocks: usize,
    /// Exactly `overtakes / total_blocks`.
    pub percentage: f64,
}

/// Scalar quality metrics for a batch of generated sequences.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    /// Generative perplexity under the scoring model.
    pub ppl: f64,
    /// Pooled unigram Shannon entropy in nats.
    pub entropy: f64,
    /// Lowest ESS seen across the trace.
    pub ess_min: f64,
    /// Mean ESS across the trace.
    pub ess_mean: f64,
}

/// Runs one block-wise SMC generation: decodes each block left to right
/// with earlier blocks frozen, carrying weights across boundaries until a
/// resample fires. Returns the selected output and the trace.
pub fn generate_semi_ar(
    backend: &Backend,
    plan: &BlockPlan,
    cfg: &SmcConfig,
) -> Result<(Sequence, GenerationTrace)> {
    let (ensemble, trace) = run_plan(backend, plan, cfg)?;
    let seq = ensemble.particles[trace.final_selection].seq.clone();
    Ok((seq, trace))
}

/// Walks a trace block by block and flags every block whose highest-weight
/// particle at the end differs from the one at the start. "Start" weights
/// are the weights entering the block: uniform (dominant index 0) right
/// after a resample or at block 0, otherwise the previous block's final
/// recorded weights.
pub fn detect_overtakes(trace: &GenerationTrace) -> Result<OvertakeReport> {
    if trace.records.is_empty() {
        return Err(Error::invalid("cannot analyze an empty trace"));
    }
    let mut blocks = Vec::new();
    // Dominant entering the next block; uniform start → lowest index.
    let mut carried_dominant = 0usize;
    for block in 0..trace.num_blocks.max(1) {
        let records: Vec<&StepRecord> =
            trace.records.iter().filter(|r| r.block == block).collect();
        let Some(last) = records.last() else {
            // No records for this block (possible only in hand-built
            // traces); dominance carries through unchanged.
            continue;
        };
        let start_dominant = carried_dominant;
        let end_dominant = crate::numeric::argmax(&last.log_weights)
            .ok_or_else(|| Error::invalid("step record has no weights"))?;
        blocks.push(BlockDominance {
            block,
            start_dominant,
            end_dominant,
            overtake: start_dominant != end_dominant,
        });
        carried_dominant = if last.resampled { 0 } else { end_dominant };
    }
    let overtakes = blocks.iter().filter(|b| b.overtake).count();
    let total_blocks = blocks.len();
    if total_blocks == 0 {
        return Err(Error::invalid("trace has no complete block"));
    }
    Ok(OvertakeReport {
        blocks,
        overtakes,
        total_blocks,
        percentage: overtakes as f64 / total_blocks as f64,
    })
}

/// Generative perplexity: `exp` of the mean per-token negative
/// log-likelihood across all tokens of all sequences, under the scorer.
pub fn generative_perplexity(scorer: &Scorer, sequences: &[Sequence]) -> Result<f64> {
    if sequences.is_empty() {
        return Err(Error::invalid("cannot compute perplexity of an empty batch"));
    }
    let nlls = scorer.total_nll_batch(sequences)?;
    let total_tokens: usize = sequences.iter().map(Sequence::len).sum();
    let total_nll: f64 = nlls.iter().sum();
    Ok((total_nll / total_tokens as f64).exp())
}

/// Shannon entropy in nats of the pooled empirical token distribution.
/// Sequences must be fully unmasked (the caller's contract; mask tokens
/// would silently count as ordinary symbols here).
pub fn unigram_entropy(sequences: &[Sequence]) -> Result<f64> {
    let mut counts: std::collections::HashMap<u32, u64> = std::collections::HashMap::new();
    let mut total = 0u64;
    for seq in sequences {
        for &tok in seq.tokens() {
            *counts.entry(tok).or_insert(0) += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::invalid("cannot compute entropy of an empty batch"));
    }
    let total = total as f64;
    Ok(counts
        .values()
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum())
}

/// Min and mean ESS across a trace's records (`None` for an empty trace).
pub fn ess_summary(trace: &GenerationTrace) -> Option<(f64, f64)> {
    if trace.records.is_empty() {
        return None;
    }
    let min = trace.records.iter().map(|r| r.ess).fold(f64::INFINITY, f64::min);
    let mean = trace.records.iter().map(|r| r.ess).sum::<f64>() / trace.records.len() as f64;
    Some((min, mean))
}

#[derive(Serialize, Deserialize)]
struct TraceHeader {
    version: u32,
    config: serde_json::Value,
    num_particles: usize,
    num_blocks: usize,
    final_selection: usize,
}

const TRACE_VERSION: u32 = 1;

/// Writes a trace as JSONL: header line first, then one record per line.
pub fn write_trace(trace: &GenerationTrace, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let header = TraceHeader {
        version: TRACE_VERSION,
        config: trace.config.clone(),
        num_particles: trace.num_particles,
        num_blocks: trace.num_blocks,
        final_selection: trace.final_selection,
    };
    serde_json::to_writer(&mut out, &header).map_err(io_from_json)?;
    out.write_all(b"\n")?;
    for record in &trace.records {
        serde_json::to_writer(&mut out, record).map_err(io_from_json)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a JSONL trace back; the inverse of [`write_trace`] field-for-field.
/// Malformed lines and violated record invariants report the offending line
/// number.
pub fn read_trace(path: &Path) -> Result<GenerationTrace> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();
    let location = |line: usize| format!("{}:{}", path.display(), line + 1);

    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::Parse { location: location(0), message: "missing trace header".into() })?;
    let header: TraceHeader = serde_json::from_str(&first?).map_err(|e| Error::Parse {
        location: location(0),
        message: format!("bad trace header: {e}"),
    })?;
    if header.version != TRACE_VERSION {
        return Err(Error::Parse {
            location: location(0),
            message: format!("unsupported trace version {}", header.version),
        });
    }

    let mut records: Vec<StepRecord> = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: StepRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            location: location(idx),
            message: format!("bad step record: {e}"),
        })?;
        if record.resampled != record.ancestry.is_some() {
            return Err(Error::Parse {
                location: location(idx),
                message: "ancestry must be present exactly when the step resampled".into(),
            });
        }
        if let Some(prev) = records.last() {
            if record.step <= prev.step {
                return Err(Error::Parse {
                    location: location(idx),
                    message: format!(
                        "records out of order: step {} follows step {}",
                        record.step, prev.step
                    ),
                });
            }
        }
        records.push(record);
    }
    Ok(GenerationTrace {
        config: header.config,
        num_particles: header.num_particles,
        num_blocks: header.num_blocks,
        records,
        final_selection: header.final_selection,
    })
}

fn io_from_json(e: serde_json::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Serializes `Vec<f64>` losslessly through JSON: finite values as numbers,
/// non-finite ones as the strings `"-inf"`, `"inf"`, `"nan"` (plain JSON
/// would turn them into `null`).
mod lossless_f64_vec {
    use serde::de::Error as DeError;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Tag(String),
    }

    pub fn serialize<S: Serializer>(values: &[f64], ser: S) -> Result<S::Ok, S::Error> {
        let repr: Vec<Repr> = values
            .iter()
            .map(|&v| {
                if v.is_finite() {
                    Repr::Num(v)
                } else if v.is_nan() {
                    Repr::Tag("nan".into())
                } else if v > 0.0 {
                    Repr::Tag("inf".into())
                } else {
                    Repr::Tag("-inf".into())
                }
            })
            .collect();
        repr.serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Vec<f64>, D::Error> {
        let repr = Vec::<Repr>::deserialize(de)?;
        repr.into_iter()
            .map(|r| match r {
                Repr::Num(v) => Ok(v),
                Repr::Tag(tag) => match tag.as_str() {
                    "inf" => Ok(f64::INFINITY),
                    "-inf" => Ok(f64::NEG_INFINITY),
                    "nan" => Ok(f64::NAN),
                    other => Err(D::Error::custom(format!("unknown float tag {other:?}"))),
                },
            })
            .collect()
    }
}
