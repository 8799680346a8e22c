//! Run orchestration behind the subcommands: generation bundles, paired
//! sweeps, the oracle check battery, and trace pretty-printing.
//!
//! Every run writes a manifest — config echo, seed provenance, version,
//! wallclock, and the error if one occurred — so any output directory is
//! attributable even when the run failed. Generated sequences are
//! byte-identical for identical (config, seed) regardless of worker-pool
//! size: samples get deterministic per-index seeds and results are
//! collected in index order.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::{BackendKind, PolicyKind, RunConfig};
use crate::core::Sequence;
use crate::error::{Error, Result};
use crate::oracle::{
    enumerate_paths, exact_normalizer, ratio_incremental_weight, DEFAULT_PATH_CAP,
};
use crate::pipeline::{
    detect_overtakes, generate_semi_ar, generative_perplexity, unigram_entropy, write_trace,
    GenerationTrace,
};
use crate::smc::{smc_run, ResampleScheme, ResampleTrigger};

/// Version string stamped into every manifest.
pub const VERSION: &str = concat!("srsmc ", env!("CARGO_PKG_VERSION"));

/// Paths of everything a run wrote.
#[derive(Debug, Clone)]
pub struct OutputBundle {
    /// The output directory.
    pub out_dir: PathBuf,
    /// `sequences.jsonl` (generate runs).
    pub sequences_path: Option<PathBuf>,
    /// One trace file per sample (generate runs).
    pub trace_paths: Vec<PathBuf>,
    /// `metrics.csv` / `sweep.csv`.
    pub metrics_path: Option<PathBuf>,
    /// `manifest.json`; always present.
    pub manifest_path: PathBuf,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    config: &'a RunConfig,
    /// Seed as configured (defaults/file/flags), before the environment
    /// override.
    config_seed: u64,
    /// Seed the run actually used.
    effective_seed: u64,
    wallclock_ms: u64,
    error: Option<String>,
}

/// One row of `metrics.csv` / `sweep.csv`.
#[derive(Debug, Serialize)]
struct MetricsRow {
    run_id: usize,
    seed: u64,
    #[serde(rename = "N")]
    n: usize,
    tau: f64,
    policy: &'static str,
    ppl: Option<f64>,
    entropy: Option<f64>,
    overtakes: Option<usize>,
    blocks: Option<usize>,
    wallclock_ms: u64,
    error: Option<String>,
}

fn policy_label(config: &RunConfig) -> &'static str {
    match config.policy {
        PolicyKind::Topk => "topk",
        PolicyKind::Threshold => "threshold",
    }
}

fn build_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config(format!("workers: {e}")))
}

fn write_manifest(
    path: &Path,
    command: &str,
    config: &RunConfig,
    config_seed: u64,
    started: Instant,
    error: Option<&Error>,
) -> Result<()> {
    let manifest = Manifest {
        command,
        version: VERSION,
        config,
        config_seed,
        effective_seed: config.seed,
        wallclock_ms: started.elapsed().as_millis() as u64,
        error: error.map(Error::to_string),
    };
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, &manifest)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    out.write_all(b"\n")?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn out_dir_of(config: &RunConfig) -> PathBuf {
    config.out.clone().unwrap_or_else(|| PathBuf::from("srsmc-out"))
}

/// Runs `samples` generations (seeds `seed`, `seed+1`, ...), writing
/// `sequences.jsonl`, one trace per sample, `metrics.csv`, and the
/// manifest. The manifest is written even when the run fails.
pub fn cmd_generate(config: &RunConfig, config_seed: u64) -> Result<OutputBundle> {
    let started = Instant::now();
    let out_dir = out_dir_of(config);
    std::fs::create_dir_all(&out_dir)?;
    let manifest_path = out_dir.join("manifest.json");
    let result = generate_inner(config, &out_dir);
    write_manifest(&manifest_path, "generate", config, config_seed, started, result.as_ref().err())?;
    result.map(|(sequences_path, trace_paths, metrics_path)| OutputBundle {
        out_dir,
        sequences_path: Some(sequences_path),
        trace_paths,
        metrics_path: Some(metrics_path),
        manifest_path,
    })
}

fn generate_inner(
    config: &RunConfig,
    out_dir: &Path,
) -> Result<(PathBuf, Vec<PathBuf>, PathBuf)> {
    config.validate()?;
    let backend = config.build_backend()?;
    let scorer = config.build_scorer()?;
    let base = config.smc_config()?;
    let plan = config.block_plan()?;

    let pool = build_pool(config.workers)?;
    let runs: Result<Vec<(Sequence, GenerationTrace, u64)>> = pool.install(|| {
        (0..config.samples)
            .into_par_iter()
            .map(|k| {
                let mut cfg = base.clone();
                cfg.seed = base.seed.wrapping_add(k as u64);
                let t0 = Instant::now();
                let (seq, trace) = generate_semi_ar(&backend, &plan, &cfg)?;
                Ok((seq, trace, t0.elapsed().as_millis() as u64))
            })
            .collect()
    });
    let runs = runs?;

    let sequences_path = out_dir.join("sequences.jsonl");
    let mut seq_out = BufWriter::new(File::create(&sequences_path)?);
    for (seq, _, _) in &runs {
        serde_json::to_writer(&mut seq_out, seq.tokens())
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        seq_out.write_all(b"\n")?;
    }
    seq_out.flush()?;

    let mut trace_paths = Vec::with_capacity(runs.len());
    for (k, (_, trace, _)) in runs.iter().enumerate() {
        let path = out_dir.join(format!("trace_{k}.jsonl"));
        write_trace(trace, &path)?;
        trace_paths.push(path);
    }

    let metrics_path = out_dir.join("metrics.csv");
    let mut csv = csv::Writer::from_path(&metrics_path).map_err(csv_err)?;
    for (k, (seq, trace, ms)) in runs.iter().enumerate() {
        let report = detect_overtakes(trace)?;
        csv.serialize(MetricsRow {
            run_id: k,
            seed: base.seed.wrapping_add(k as u64),
            n: config.particles,
            tau: config.tau,
            policy: policy_label(config),
            ppl: Some(generative_perplexity(&scorer, std::slice::from_ref(seq))?),
            entropy: Some(unigram_entropy(std::slice::from_ref(seq))?),
            overtakes: Some(report.overtakes),
            blocks: Some(report.total_blocks),
            wallclock_ms: *ms,
            error: None,
        })
        .map_err(csv_err)?;
    }
    csv.flush()?;
    Ok((sequences_path, trace_paths, metrics_path))
}

/// Which hyperparameter a sweep varies.
#[derive(Debug, Clone, PartialEq)]
pub enum SweepAxis {
    /// Particle counts to try.
    Particles(Vec<usize>),
    /// Temperatures to try.
    Tau(Vec<f64>),
}

impl SweepAxis {
    fn len(&self) -> usize {
        match self {
            SweepAxis::Particles(v) => v.len(),
            SweepAxis::Tau(v) => v.len(),
        }
    }

    fn apply(&self, idx: usize, config: &mut RunConfig) {
        match self {
            SweepAxis::Particles(v) => config.particles = v[idx],
            SweepAxis::Tau(v) => config.tau = v[idx],
        }
    }
}

/// Runs the `axis × seeds` grid with seeds shared across cells (paired
/// comparisons), one run per (cell, seed), and writes `sweep.csv` plus the
/// manifest. A failing cell fills the row's error column; the sweep
/// continues.
pub fn cmd_sweep(
    config: &RunConfig,
    axis: &SweepAxis,
    num_seeds: usize,
    config_seed: u64,
) -> Result<OutputBundle> {
    let started = Instant::now();
    let out_dir = out_dir_of(config);
    std::fs::create_dir_all(&out_dir)?;
    let manifest_path = out_dir.join("manifest.json");
    let result = sweep_inner(config, axis, num_seeds, &out_dir);
    write_manifest(&manifest_path, "sweep", config, config_seed, started, result.as_ref().err())?;
    result.map(|metrics_path| OutputBundle {
        out_dir,
        sequences_path: None,
        trace_paths: vec![],
        metrics_path: Some(metrics_path),
        manifest_path,
    })
}

fn sweep_inner(
    config: &RunConfig,
    axis: &SweepAxis,
    num_seeds: usize,
    out_dir: &Path,
) -> Result<PathBuf> {
    config.validate()?;
    if axis.len() == 0 {
        return Err(Error::config("sweep needs at least one axis value"));
    }
    if num_seeds == 0 {
        return Err(Error::config("sweep needs at least one seed"));
    }

    let cells: Vec<(usize, usize)> = (0..axis.len())
        .flat_map(|v| (0..num_seeds).map(move |s| (v, s)))
        .collect();

    let pool = build_pool(config.workers)?;
    let rows: Vec<MetricsRow> = pool.install(|| {
        cells
            .par_iter()
            .enumerate()
            .map(|(run_id, &(value_idx, seed_idx))| {
                let mut cell = config.clone();
                axis.apply(value_idx, &mut cell);
                cell.seed = config.seed.wrapping_add(seed_idx as u64);
                cell.samples = 1;
                let t0 = Instant::now();
                let outcome = sweep_cell(&cell);
                let ms = t0.elapsed().as_millis() as u64;
                match outcome {
                    Ok((ppl, entropy, overtakes, blocks)) => MetricsRow {
                        run_id,
                        seed: cell.seed,
                        n: cell.particles,
                        tau: cell.tau,
                        policy: policy_label(&cell),
                        ppl: Some(ppl),
                        entropy: Some(entropy),
                        overtakes: Some(overtakes),
                        blocks: Some(blocks),
                        wallclock_ms: ms,
                        error: None,
                    },
                    Err(e) => MetricsRow {
                        run_id,
                        seed: cell.seed,
                        n: cell.particles,
                        tau: cell.tau,
                        policy: policy_label(&cell),
                        ppl: None,
                        entropy: None,
                        overtakes: None,
                        blocks: None,
                        wallclock_ms: ms,
                        error: Some(e.to_string()),
                    },
                }
            })
            .collect()
    });

    let metrics_path = out_dir.join("sweep.csv");
    let mut csv = csv::Writer::from_path(&metrics_path).map_err(csv_err)?;
    for row in rows {
        csv.serialize(row).map_err(csv_err)?;
    }
    csv.flush()?;
    Ok(metrics_path)
}

fn sweep_cell(cell: &RunConfig) -> Result<(f64, f64, usize, usize)> {
    cell.validate()?;
    let backend = cell.build_backend()?;
    let scorer = cell.build_scorer()?;
    let smc = cell.smc_config()?;
    let plan = cell.block_plan()?;
    let (seq, trace) = generate_semi_ar(&backend, &plan, &smc)?;
    let report = detect_overtakes(&trace)?;
    Ok((
        generative_perplexity(&scorer, std::slice::from_ref(&seq))?,
        unigram_entropy(std::slice::from_ref(&seq))?,
        report.overtakes,
        report.total_blocks,
    ))
}

/// One verdict from the oracle battery.
#[derive(Debug, Clone, Serialize)]
pub struct OracleCheck {
    /// Check name.
    pub name: &'static str,
    /// Whether it passed.
    pub passed: bool,
    /// Measured quantities, human-readable.
    pub detail: String,
}

/// Outcome of [`cmd_oracle_check`].
#[derive(Debug, Clone, Serialize)]
pub struct OracleCheckReport {
    /// The individual checks, in execution order.
    pub checks: Vec<OracleCheck>,
}

impl OracleCheckReport {
    /// True when every check passed.
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Runs the oracle battery on an enumerable configuration: proposal mass,
/// exact-target consistency, ratio-vs-product weight equivalence, `Ẑ`
/// unbiasedness (multinomial resampling at every step, `runs` runs), and
/// terminal-law total-variation convergence (`runs` runs, `Ẑ`-weighted
/// cross-run aggregation). `corrupt_weights` perturbs the engine-side
/// weights to prove the equivalence check can fail.
pub fn cmd_oracle_check(
    config: &RunConfig,
    runs: usize,
    corrupt_weights: bool,
) -> Result<OracleCheckReport> {
    config.validate()?;
    if config.backend != BackendKind::Exact {
        return Err(Error::invalid("oracle checks require the exact backend"));
    }
    if runs == 0 {
        return Err(Error::invalid("oracle checks need at least one run"));
    }
    let chain = config.resolved_chain()?;
    let policy = config.remask_policy()?;
    let table =
        enumerate_paths(&chain, config.len, config.steps, config.tau, &policy, DEFAULT_PATH_CAP)?;
    let target = exact_normalizer(&table);
    let mut checks = Vec::new();

    // 1. The proposal is a probability measure over paths.
    let q_sum: f64 = table.paths.iter().map(|p| p.log_q.exp()).sum();
    checks.push(OracleCheck {
        name: "proposal_mass",
        passed: (q_sum - 1.0).abs() <= 1e-9,
        detail: format!("|Σq − 1| = {:.3e} over {} paths", (q_sum - 1.0).abs(), table.paths.len()),
    });

    // 2. The exact target is well-formed.
    let pi_sum: f64 = target.terminal.iter().map(|(_, p)| p).sum();
    checks.push(OracleCheck {
        name: "exact_target",
        passed: target.z > 0.0 && (pi_sum - 1.0).abs() <= 1e-9,
        detail: format!("Z = {:.6e}, |Σπ − 1| = {:.3e}", target.z, (pi_sum - 1.0).abs()),
    });

    // 3. Ratio form ≡ product form on every step of every path.
    let corruption = if corrupt_weights { 1e-4 } else { 0.0 };
    let mut max_delta = 0.0f64;
    for path in &table.paths {
        for step in 0..path.steps.len() {
            let ratio = ratio_incremental_weight(path, step)?;
            let product = path.steps[step].log_g_engine + corruption;
            max_delta = max_delta.max((ratio.ln() - product).abs());
        }
    }
    checks.push(OracleCheck {
        name: "ratio_vs_product",
        passed: max_delta < 1e-10,
        detail: format!("max |log ratio − log product| = {max_delta:.3e}"),
    });

    // 4. Ẑ unbiasedness: multinomial resampling at every step makes the
    // estimator's distribution easy to reason about; the mean over `runs`
    // independent runs must straddle the exact Z within 3 standard errors.
    let backend = config.build_backend()?;
    let mut z_cfg = config.smc_config()?;
    z_cfg.resample.scheme = ResampleScheme::Multinomial;
    z_cfg.resample.trigger = ResampleTrigger::Always;
    z_cfg.resample.checkpoint_every = 1;
    let z_hats: Result<Vec<f64>> = (0..runs)
        .map(|r| {
            let mut cfg = z_cfg.clone();
            cfg.seed = z_cfg.seed.wrapping_add(r as u64);
            let (ens, _) = smc_run(&backend, &cfg)?;
            Ok(ens.log_z_hat.exp())
        })
        .collect();
    let z_hats = z_hats?;
    let mean = z_hats.iter().sum::<f64>() / runs as f64;
    let var = z_hats.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / (runs - 1).max(1) as f64;
    let se = (var / runs as f64).sqrt();
    checks.push(OracleCheck {
        name: "zhat_unbiased",
        passed: (mean - target.z).abs() <= 3.0 * se + 1e-12,
        detail: format!(
            "mean Ẑ = {mean:.6e} vs Z = {:.6e} (|Δ| = {:.3e}, 3·SE = {:.3e}, {runs} runs)",
            target.z,
            (mean - target.z).abs(),
            3.0 * se
        ),
    });

    // 5. Terminal-law convergence: aggregate the weighted empirical
    // terminal distributions across runs, each run weighted by its Ẑ
    // (the self-normalized cross-run estimator), and compare to π₀ in
    // total variation.
    let tv_cfg = config.smc_config()?;
    let per_run: Result<Vec<(f64, Vec<(Vec<crate::core::Token>, f64)>)>> = (0..runs)
        .map(|r| {
            let mut cfg = tv_cfg.clone();
            cfg.seed = tv_cfg.seed.wrapping_add(runs as u64 + r as u64);
            let (ens, _) = smc_run(&backend, &cfg)?;
            let z = ens.log_z_hat.exp();
            let outcomes = ens
                .particles
                .iter()
                .zip(&ens.normalized_weights)
                .map(|(p, &w)| (p.seq.tokens().to_vec(), w))
                .collect();
            Ok((z, outcomes))
        })
        .collect();
    let mut mass: std::collections::BTreeMap<Vec<crate::core::Token>, f64> =
        std::collections::BTreeMap::new();
    let mut z_total = 0.0f64;
    for (z, outcomes) in per_run? {
        z_total += z;
        for (tokens, w) in outcomes {
            *mass.entry(tokens).or_insert(0.0) += z * w;
        }
    }
    let mut tv = 0.0f64;
    for (seq, pi) in &target.terminal {
        let est = mass.remove(seq.tokens()).unwrap_or(0.0) / z_total;
        tv += (est - pi).abs();
    }
    for (_, leftover) in mass {
        // Outcomes the exact law says are unreachable.
        tv += leftover / z_total;
    }
    tv /= 2.0;
    checks.push(OracleCheck {
        name: "terminal_tv",
        passed: tv < 0.05,
        detail: format!("TV(π̂, π₀) = {tv:.4} over {runs} runs"),
    });

    Ok(OracleCheckReport { checks })
}

/// Renders a trace for terminal reading: header summary plus one line per
/// step.
pub fn format_trace(trace: &GenerationTrace) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "trace: {} particles, {} blocks, {} steps, final selection {}",
        trace.num_particles,
        trace.num_blocks,
        trace.records.len(),
        trace.final_selection
    );
    let _ = writeln!(out, "config: {}", trace.config);
    let _ = writeln!(out, "{:>5} {:>5} {:>8} {:>4} {:>4}  log weights", "step", "block", "ess", "chk", "rsmp");
    for rec in &trace.records {
        let weights = rec
            .log_weights
            .iter()
            .map(|w| {
                if w.is_finite() {
                    format!("{w:.3}")
                } else {
                    "-inf".to_string()
                }
            })
            .collect::<Vec<_>>()
            .join(" ");
        let _ = writeln!(
            out,
            "{:>5} {:>5} {:>8.3} {:>4} {:>4}  [{}]{}",
            rec.step,
            rec.block,
            rec.ess,
            if rec.checkpoint { "yes" } else { "-" },
            if rec.resampled { "yes" } else { "-" },
            weights,
            match &rec.ancestry {
                Some(a) => format!("  ancestry {a:?}"),
                None => String::new(),
            }
        );
    }
    out
}
