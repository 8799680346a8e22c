//! Run configuration: the single JSON document that drives every
//! subcommand, with strict parsing (unknown keys are fatal), documented
//! defaults, and environment overrides applied last.
//!
//! Precedence, lowest to highest: built-in defaults, the config file,
//! command-line flags (the caller overlays those), then the `SRSMC_SEED`
//! environment variable. The manifest records both the pre-override and
//! the effective seed so every run stays attributable.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::core::{RemaskPolicy, Vocab};
use crate::error::{Error, Result};
use crate::model::{Backend, BackendDescriptor, MarkovChainSpec, Scorer};
use crate::pipeline::{BlockPlan, CheckpointRule};
use crate::smc::{ResamplePolicy, ResampleScheme, ResampleTrigger, SmcConfig};

/// Environment variable that overrides the master seed, applied after all
/// other sources.
pub const SEED_ENV_VAR: &str = "SRSMC_SEED";

/// Which remasking policy a run uses (flat form for config files and the
/// `--policy` flag; the threshold value lives in its own field).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    /// Budgeted top-k remasking.
    Topk,
    /// Confidence-threshold remasking.
    Threshold,
}

/// Which prediction backend a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// Exact Bayes posteriors under a known Markov chain.
    Exact,
    /// A remote model server speaking the wire protocol.
    Remote,
}

/// Everything a run needs, as parsed from JSON. Unknown keys are rejected;
/// absent keys take the documented defaults (notably 4 particles and
/// temperature 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Vocabulary size including MASK. Defaults to the chain's states + 1
    /// (5 for the built-in chain); must match the chain when both are set.
    pub vocab: Option<u32>,
    /// Sequence length `L`.
    pub len: usize,
    /// Diffusion steps `T`.
    pub steps: u32,
    /// Particles `N`.
    pub particles: usize,
    /// Sampling temperature.
    pub tau: f64,
    /// Remasking policy selector.
    pub policy: PolicyKind,
    /// Confidence threshold `rho` (used when `policy = "threshold"`).
    pub threshold: f64,
    /// Resampling scheme.
    pub scheme: ResampleScheme,
    /// Resampling trigger.
    pub trigger: ResampleTrigger,
    /// Steps between resample-eligibility checks.
    pub checkpoint_every: u32,
    /// Check eligibility at block boundaries instead of every k steps.
    pub checkpoint_per_block: bool,
    /// Block size for semi-autoregressive generation; absent = one block.
    pub block_size: Option<usize>,
    /// Backend selector.
    pub backend: BackendKind,
    /// Inline ground-truth chain (exact backend).
    pub chain: Option<MarkovChainSpec>,
    /// Path to a chain JSON file; mutually exclusive with `chain`.
    pub chain_path: Option<PathBuf>,
    /// Remote backend base URL.
    pub endpoint: Option<String>,
    /// Remote request timeout in milliseconds.
    pub timeout_ms: u64,
    /// Maximum sequences per remote request.
    pub batch_limit: usize,
    /// Master seed.
    pub seed: u64,
    /// Generations per `generate` run / paired seeds per sweep cell.
    pub samples: usize,
    /// Worker-pool size for independent runs.
    pub workers: usize,
    /// Output directory.
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            vocab: None,
            len: 32,
            steps: 32,
            particles: 4,
            tau: 1.0,
            policy: PolicyKind::Topk,
            threshold: 0.9,
            scheme: ResampleScheme::Systematic,
            trigger: ResampleTrigger::Adaptive,
            checkpoint_every: 1,
            checkpoint_per_block: false,
            block_size: None,
            backend: BackendKind::Exact,
            chain: None,
            chain_path: None,
            endpoint: None,
            timeout_ms: 5000,
            batch_limit: 64,
            seed: 0,
            samples: 1,
            workers: 1,
            out: None,
        }
    }
}

impl RunConfig {
    /// Re-validates every field range, reporting the offending field by
    /// name.
    pub fn validate(&self) -> Result<()> {
        if let Some(v) = self.vocab {
            if v < 2 {
                return Err(Error::config(format!("vocab: must be at least 2, got {v}")));
            }
        }
        if self.len == 0 {
            return Err(Error::config("len: must be positive"));
        }
        if self.steps == 0 {
            return Err(Error::config("steps: must be positive"));
        }
        if self.particles == 0 {
            return Err(Error::config("particles: must be positive"));
        }
        if !(self.tau >= 0.0) {
            return Err(Error::config(format!("tau: must be non-negative, got {}", self.tau)));
        }
        if self.policy == PolicyKind::Threshold && !(self.threshold > 0.0 && self.threshold <= 1.0)
        {
            return Err(Error::config(format!(
                "threshold: must lie in (0, 1], got {}",
                self.threshold
            )));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every: must be at least 1"));
        }
        if let Some(b) = self.block_size {
            if b == 0 || self.len % b != 0 {
                return Err(Error::config(format!(
                    "block_size: {b} does not divide len {}",
                    self.len
                )));
            }
        }
        if self.chain.is_some() && self.chain_path.is_some() {
            return Err(Error::config("chain: set either chain or chain_path, not both"));
        }
        match self.backend {
            BackendKind::Exact => {
                let chain = self.resolved_chain()?;
                let states = chain.num_states() as u32;
                if let Some(v) = self.vocab {
                    if v != states + 1 {
                        return Err(Error::config(format!(
                            "vocab: {v} does not match the chain ({states} states imply vocab {})",
                            states + 1
                        )));
                    }
                }
            }
            BackendKind::Remote => {
                if self.endpoint.as_deref().map_or(true, |e| e.trim().is_empty()) {
                    return Err(Error::config("endpoint: required for the remote backend"));
                }
                if self.batch_limit == 0 {
                    return Err(Error::config("batch_limit: must be at least 1"));
                }
            }
        }
        if self.timeout_ms == 0 {
            return Err(Error::config("timeout_ms: must be positive"));
        }
        if self.samples == 0 {
            return Err(Error::config("samples: must be at least 1"));
        }
        if self.workers == 0 {
            return Err(Error::config("workers: must be at least 1"));
        }
        // Field ranges shared with the engine config.
        self.smc_config()?.validate()
    }

    /// The ground-truth chain: inline spec, file, or the built-in skewed
    /// default, in that order.
    pub fn resolved_chain(&self) -> Result<MarkovChainSpec> {
        if let Some(chain) = &self.chain {
            chain.validate()?;
            return Ok(chain.clone());
        }
        if let Some(path) = &self.chain_path {
            return MarkovChainSpec::from_json_file(path);
        }
        Ok(MarkovChainSpec::default_skewed())
    }

    /// The effective vocabulary: explicit `vocab`, else derived from the
    /// chain (exact backend) or 5 (remote backend).
    pub fn effective_vocab(&self) -> Result<Vocab> {
        if let Some(v) = self.vocab {
            return Vocab::new(v);
        }
        match self.backend {
            BackendKind::Exact => Ok(self.resolved_chain()?.vocab()),
            BackendKind::Remote => Vocab::new(5),
        }
    }

    /// The remasking policy in engine form.
    pub fn remask_policy(&self) -> Result<RemaskPolicy> {
        match self.policy {
            PolicyKind::Topk => Ok(RemaskPolicy::top_k()),
            PolicyKind::Threshold => RemaskPolicy::threshold(self.threshold),
        }
    }

    /// The resampling policy in engine form.
    pub fn resample_policy(&self) -> ResamplePolicy {
        ResamplePolicy {
            scheme: self.scheme,
            trigger: self.trigger,
            checkpoint_every: self.checkpoint_every,
        }
    }

    /// The engine configuration this run drives.
    pub fn smc_config(&self) -> Result<SmcConfig> {
        Ok(SmcConfig {
            vocab: self.effective_vocab()?,
            len: self.len,
            steps: self.steps,
            particles: self.particles,
            tau: self.tau,
            policy: self.remask_policy()?,
            resample: self.resample_policy(),
            seed: self.seed,
        })
    }

    /// The block plan: split by `block_size` when present, one block
    /// otherwise.
    pub fn block_plan(&self) -> Result<BlockPlan> {
        let checkpoint = if self.checkpoint_per_block {
            CheckpointRule::PerBlock
        } else {
            CheckpointRule::EveryK(self.checkpoint_every)
        };
        match self.block_size {
            Some(b) => BlockPlan::split(self.len, b, self.steps, checkpoint),
            None => BlockPlan::new(self.len, 1, self.steps, checkpoint),
        }
    }

    /// Builds the prediction backend.
    pub fn build_backend(&self) -> Result<Backend> {
        let vocab = self.effective_vocab()?;
        let descriptor = match self.backend {
            BackendKind::Exact => BackendDescriptor::ExactBayes { chain: self.resolved_chain()? },
            BackendKind::Remote => BackendDescriptor::Remote {
                endpoint: self.endpoint.clone().unwrap_or_default(),
                timeout: Duration::from_millis(self.timeout_ms),
                batch_limit: self.batch_limit,
            },
        };
        Backend::new(descriptor, vocab, self.len)
    }

    /// Builds the likelihood scorer matching the backend.
    pub fn build_scorer(&self) -> Result<Scorer> {
        match self.backend {
            BackendKind::Exact => Scorer::exact(self.resolved_chain()?),
            BackendKind::Remote => Scorer::remote(
                self.endpoint.clone().unwrap_or_default(),
                Duration::from_millis(self.timeout_ms),
                self.batch_limit,
                self.effective_vocab()?,
            ),
        }
    }
}

/// Loads a config file strictly: unknown keys error with their name, parse
/// errors carry line/column, an empty (or all-whitespace) file means "all
/// defaults", and `None` means no file was given.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path)?;
    if text.trim().is_empty() {
        return Ok(RunConfig::default());
    }
    let config: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
        location: format!("{}:{}:{}", path.display(), e.line(), e.column()),
        message: e.to_string(),
    })?;
    Ok(config)
}

/// Applies environment overrides (currently `SRSMC_SEED`), the last word in
/// the precedence chain. Returns the overridden seed when one applied.
pub fn apply_env_overrides(config: &mut RunConfig) -> Result<Option<u64>> {
    match std::env::var(SEED_ENV_VAR) {
        Ok(raw) => {
            let seed: u64 = raw.trim().parse().map_err(|_| {
                Error::config(format!("{SEED_ENV_VAR}: expected an unsigned integer, got {raw:?}"))
            })?;
            config.seed = seed;
            Ok(Some(seed))
        }
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(std::env::VarError::NotUnicode(_)) => {
            Err(Error::config(format!("{SEED_ENV_VAR}: not valid unicode")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_yields_documented_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.json");
        std::fs::write(&path, "  \n").unwrap();
        let cfg = load_config(Some(&path)).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.particles, 4);
        assert_eq!(cfg.tau, 1.0);
        assert_eq!(cfg.scheme, ResampleScheme::Systematic);
        assert_eq!(cfg.trigger, ResampleTrigger::Adaptive);
        // And the defaults validate as a runnable config.
        cfg.validate().unwrap();
        assert_eq!(cfg.effective_vocab().unwrap(), Vocab::new(5).unwrap());
    }

    #[test]
    fn no_file_also_yields_defaults() {
        assert_eq!(load_config(None).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_named_in_the_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, r#"{"foo": 1}"#).unwrap();
        match load_config(Some(&path)) {
            Err(Error::Parse { message, .. }) => {
                assert!(message.contains("foo"), "message should name the key: {message}")
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn parse_errors_carry_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("syntax.json");
        std::fs::write(&path, "{\n  \"particles\": oops\n}").unwrap();
        match load_config(Some(&path)) {
            Err(Error::Parse { location, .. }) => {
                assert!(location.contains("syntax.json:2"), "{location}")
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn overrides_parse_and_apply() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(
            &path,
            r#"{
                "particles": 2,
                "tau": 0.5,
                "policy": "threshold",
                "threshold": 0.8,
                "scheme": "multinomial",
                "trigger": "never",
                "len": 8,
                "steps": 4,
                "block_size": 4,
                "seed": 7,
                "chain": {"init": [0.6, 0.4], "trans": [[0.7, 0.3], [0.2, 0.8]]}
            }"#,
        )
        .unwrap();
        let cfg = load_config(Some(&path)).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.particles, 2);
        assert_eq!(cfg.policy, PolicyKind::Threshold);
        assert!(matches!(cfg.remask_policy().unwrap(), RemaskPolicy::Threshold { rho } if rho == 0.8));
        assert_eq!(cfg.effective_vocab().unwrap(), Vocab::new(3).unwrap());
        let plan = cfg.block_plan().unwrap();
        assert_eq!(plan.num_blocks, 2);
        assert_eq!(plan.steps_per_block, 2);
        let smc = cfg.smc_config().unwrap();
        assert_eq!(smc.particles, 2);
        assert_eq!(smc.seed, 7);
    }

    #[test]
    fn field_errors_name_the_field() {
        let mut cfg = RunConfig { particles: 0, ..RunConfig::default() };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("particles"), "{err}");

        cfg = RunConfig { vocab: Some(3), ..RunConfig::default() };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("vocab"), "{err}");

        cfg = RunConfig { block_size: Some(5), ..RunConfig::default() };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("block_size"), "{err}");

        cfg = RunConfig { backend: BackendKind::Remote, ..RunConfig::default() };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("endpoint"), "{err}");

        cfg = RunConfig {
            chain: Some(MarkovChainSpec::uniform(2)),
            chain_path: Some(PathBuf::from("x.json")),
            ..RunConfig::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("chain"), "{err}");
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = RunConfig {
            chain: Some(MarkovChainSpec::uniform(3)),
            block_size: Some(16),
            out: Some(PathBuf::from("/tmp/x")),
            ..RunConfig::default()
        };
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn chain_path_loads_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let chain_file = dir.path().join("chain.json");
        std::fs::write(&chain_file, r#"{"init": [1.0], "trans": [[1.0]]}"#).unwrap();
        let cfg = RunConfig {
            chain_path: Some(chain_file),
            len: 4,
            steps: 4,
            ..RunConfig::default()
        };
        cfg.validate().unwrap();
        assert_eq!(cfg.resolved_chain().unwrap().num_states(), 1);
        assert_eq!(cfg.effective_vocab().unwrap(), Vocab::new(2).unwrap());
    }
}
