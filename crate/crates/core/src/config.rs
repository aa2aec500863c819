//! Experiment configuration as a sectioned `key = value` text file.
//!
//! ```text
//! [diffusion]
//! lr = 0.0005
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. Keys left out keep
//! their defaults; unknown sections or keys are errors.

use std::fmt::{self, Display, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent::{AgentConfig, OnlineConfig, StoredVideo};
use crate::critic::{CriticConfig, CriticMode, HeuristicCritic};
use crate::diffusion::{FeedbackMode, ScAnchor, TrainConfig};
use crate::gridworld::TASKS;
use crate::sampler::SamplerConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which critic judges plans.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CriticKind {
    #[default]
    Oracle,
    Heuristic,
    Remote,
    AlwaysAccept,
    AlwaysReject,
}

impl Display for CriticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CriticKind::Oracle => "oracle",
            CriticKind::Heuristic => "heuristic",
            CriticKind::Remote => "remote",
            CriticKind::AlwaysAccept => "accept",
            CriticKind::AlwaysReject => "reject",
        })
    }
}

impl FromStr for CriticKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "oracle" => Ok(CriticKind::Oracle),
            "heuristic" => Ok(CriticKind::Heuristic),
            "remote" => Ok(CriticKind::Remote),
            "accept" => Ok(CriticKind::AlwaysAccept),
            "reject" => Ok(CriticKind::AlwaysReject),
            other => Err(format!(
                "unknown critic {other:?}, expected oracle, heuristic, remote, accept or reject"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CriticSettings {
    pub kind: CriticKind,
    pub endpoint: String,
    pub timeout_secs: f64,
    pub remote: CriticConfig,
    pub heuristic: HeuristicCritic,
}

impl Default for CriticSettings {
    fn default() -> Self {
        Self {
            kind: CriticKind::Oracle,
            endpoint: "http://127.0.0.1:8765".into(),
            timeout_secs: 30.0,
            remote: CriticConfig::default(),
            heuristic: HeuristicCritic::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSettings {
    pub demos_per_task: usize,
    pub seed_offset: u64,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self {
            demos_per_task: 32,
            seed_offset: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub tasks: Vec<usize>,
    pub seeds: usize,
    pub seed_offset: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            tasks: (0..TASKS.len()).collect(),
            seeds: 25,
            seed_offset: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSettings,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub critic: CriticSettings,
    pub agent_feedback: FeedbackMode,
    pub max_replans: usize,
    pub online: OnlineConfig,
    pub eval: EvalSettings,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSettings::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            critic: CriticSettings::default(),
            agent_feedback: FeedbackMode::None,
            max_replans: 2,
            online: OnlineConfig::default(),
            eval: EvalSettings::default(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

fn parse<T: FromStr>(value: &str) -> Result<T, String>
where
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| e.to_string())
}

fn parse_tasks(value: &str) -> Result<Vec<usize>, String> {
    if value == "all" {
        return Ok((0..TASKS.len()).collect());
    }
    value
        .split(',')
        .map(|t| {
            let id: usize = parse(t.trim())?;
            if id >= TASKS.len() {
                return Err(format!("task id {id} out of range 0..{}", TASKS.len()));
            }
            Ok(id)
        })
        .collect()
}

fn format_tasks(tasks: &[usize]) -> String {
    tasks.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn agent(&self) -> AgentConfig {
        AgentConfig {
            sampler: self.sampler,
            feedback_mode: self.agent_feedback,
            max_replans: self.max_replans,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.train;
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if t.timesteps < 2 {
            return bad(format!("diffusion.timesteps must be at least 2, got {}", t.timesteps));
        }
        if t.frames < 2 {
            return bad(format!("diffusion.frames must be at least 2, got {}", t.frames));
        }
        if t.lambda < 0.0 || t.mu < 0.0 {
            return bad("diffusion.lambda and diffusion.mu must be non-negative".into());
        }
        if t.batch == 0 || t.hidden == 0 {
            return bad("diffusion.batch and diffusion.hidden must be positive".into());
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return bad(format!("diffusion.lr must be positive, got {}", t.lr));
        }
        self.sampler.validate(t.timesteps).map_err(ConfigError::Invalid)?;
        if self.max_replans == 0 {
            return bad("agent.max_replans must be at least 1".into());
        }
        if self.online.collect.cap == 0 {
            return bad("online.cap must be at least 1".into());
        }
        if self.eval.seeds == 0 || self.eval.tasks.is_empty() {
            return bad("eval needs at least one task and one seed".into());
        }
        Ok(())
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<(), String> {
        match (section, key) {
            ("data", "demos_per_task") => self.data.demos_per_task = parse(value)?,
            ("data", "seed_offset") => self.data.seed_offset = parse(value)?,

            ("diffusion", "timesteps") => self.train.timesteps = parse(value)?,
            ("diffusion", "frames") => self.train.frames = parse(value)?,
            ("diffusion", "hidden") => self.train.hidden = parse(value)?,
            ("diffusion", "lambda") => self.train.lambda = parse(value)?,
            ("diffusion", "mu") => self.train.mu = parse(value)?,
            ("diffusion", "lr") => self.train.lr = parse(value)?,
            ("diffusion", "momentum") => self.train.momentum = parse(value)?,
            ("diffusion", "clip_norm") => self.train.clip_norm = parse(value)?,
            ("diffusion", "ema_decay") => self.train.ema_decay = parse(value)?,
            ("diffusion", "batch") => self.train.batch = parse(value)?,
            ("diffusion", "iters") => self.train.iters = parse(value)?,
            ("diffusion", "seed") => self.train.seed = parse(value)?,
            ("diffusion", "feedback_mode") => self.train.feedback_mode = parse(value)?,
            ("diffusion", "replay_every") => self.train.replay_every = parse(value)?,
            ("diffusion", "replay_size") => self.train.replay_size = parse(value)?,
            ("diffusion", "replay_steps") => self.train.replay_steps = parse(value)?,
            ("diffusion", "sc_anchor") => self.train.sc_anchor = parse::<ScAnchor>(value)?,

            ("sampler", "steps") => self.sampler.steps = parse(value)?,
            ("sampler", "sigma_scale") => self.sampler.sigma_scale = parse(value)?,
            ("sampler", "refine_noise_level") => self.sampler.refine_noise_level = parse(value)?,
            ("sampler", "max_refine_iterations") => self.sampler.max_refine_iterations = parse(value)?,
            ("sampler", "clip_x0") => self.sampler.clip_x0 = parse(value)?,

            ("critic", "kind") => self.critic.kind = parse(value)?,
            ("critic", "endpoint") => self.critic.endpoint = value.to_string(),
            ("critic", "timeout_secs") => self.critic.timeout_secs = parse(value)?,
            ("critic", "mode") => self.critic.remote.mode = parse::<CriticMode>(value)?,
            ("critic", "weighted") => self.critic.remote.weighted = parse(value)?,
            ("critic", "include_examples") => self.critic.remote.include_examples = parse(value)?,
            ("critic", "tau_smooth") => self.critic.heuristic.tau_smooth = parse(value)?,
            ("critic", "tau_mass") => self.critic.heuristic.tau_mass = parse(value)?,

            ("agent", "feedback_mode") => self.agent_feedback = parse(value)?,
            ("agent", "max_replans") => self.max_replans = parse(value)?,

            ("online", "iters") => self.online.iters = parse(value)?,
            ("online", "finetune_iters") => self.online.finetune_iters = parse(value)?,
            ("online", "cap") => self.online.collect.cap = parse(value)?,
            ("online", "budget_factor") => self.online.collect.budget_factor = parse(value)?,
            ("online", "seed_offset") => self.online.collect.seed_offset = parse(value)?,
            ("online", "store") => self.online.collect.store = parse::<StoredVideo>(value)?,

            ("eval", "tasks") => self.eval.tasks = parse_tasks(value)?,
            ("eval", "seeds") => self.eval.seeds = parse(value)?,
            ("eval", "seed_offset") => self.eval.seed_offset = parse(value)?,

            ("output", "dir") => self.output_dir = PathBuf::from(value),
            _ => return Err(format!("unknown key {key:?} in section [{section}]")),
        }
        Ok(())
    }

    /// Parses a config, starting from defaults. Does not validate.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let err = |message: String| ConfigError::Parse { line: i + 1, message };
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| err("section header is missing ']'".into()))?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            if section.is_empty() {
                return Err(err("key outside any section".into()));
            }
            cfg.set(&section, key.trim(), value.trim()).map_err(err)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let cfg = Self::parse(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every field, one per line, grouped by section.
    pub fn serialize(&self) -> String {
        let t = &self.train;
        let s = &self.sampler;
        let c = &self.critic;
        let o = &self.online;
        let sections: Vec<(&str, Vec<(&str, String)>)> = vec![
            (
                "data",
                vec![
                    ("demos_per_task", self.data.demos_per_task.to_string()),
                    ("seed_offset", self.data.seed_offset.to_string()),
                ],
            ),
            (
                "diffusion",
                vec![
                    ("timesteps", t.timesteps.to_string()),
                    ("frames", t.frames.to_string()),
                    ("hidden", t.hidden.to_string()),
                    ("lambda", t.lambda.to_string()),
                    ("mu", t.mu.to_string()),
                    ("lr", t.lr.to_string()),
                    ("momentum", t.momentum.to_string()),
                    ("clip_norm", t.clip_norm.to_string()),
                    ("ema_decay", t.ema_decay.to_string()),
                    ("batch", t.batch.to_string()),
                    ("iters", t.iters.to_string()),
                    ("seed", t.seed.to_string()),
                    ("feedback_mode", t.feedback_mode.to_string()),
                    ("replay_every", t.replay_every.to_string()),
                    ("replay_size", t.replay_size.to_string()),
                    ("replay_steps", t.replay_steps.to_string()),
                    ("sc_anchor", t.sc_anchor.to_string()),
                ],
            ),
            (
                "sampler",
                vec![
                    ("steps", s.steps.to_string()),
                    ("sigma_scale", s.sigma_scale.to_string()),
                    ("refine_noise_level", s.refine_noise_level.to_string()),
                    ("max_refine_iterations", s.max_refine_iterations.to_string()),
                    ("clip_x0", s.clip_x0.to_string()),
                ],
            ),
            (
                "critic",
                vec![
                    ("kind", c.kind.to_string()),
                    ("endpoint", c.endpoint.clone()),
                    ("timeout_secs", c.timeout_secs.to_string()),
                    ("mode", c.remote.mode.to_string()),
                    ("weighted", c.remote.weighted.to_string()),
                    ("include_examples", c.remote.include_examples.to_string()),
                    ("tau_smooth", c.heuristic.tau_smooth.to_string()),
                    ("tau_mass", c.heuristic.tau_mass.to_string()),
                ],
            ),
            (
                "agent",
                vec![
                    ("feedback_mode", self.agent_feedback.to_string()),
                    ("max_replans", self.max_replans.to_string()),
                ],
            ),
            (
                "online",
                vec![
                    ("iters", o.iters.to_string()),
                    ("finetune_iters", o.finetune_iters.to_string()),
                    ("cap", o.collect.cap.to_string()),
                    ("budget_factor", o.collect.budget_factor.to_string()),
                    ("seed_offset", o.collect.seed_offset.to_string()),
                    ("store", o.collect.store.to_string()),
                ],
            ),
            (
                "eval",
                vec![
                    ("tasks", format_tasks(&self.eval.tasks)),
                    ("seeds", self.eval.seeds.to_string()),
                    ("seed_offset", self.eval.seed_offset.to_string()),
                ],
            ),
            ("output", vec![("dir", self.output_dir.display().to_string())]),
        ];
        let mut out = String::new();
        for (k, (name, entries)) in sections.iter().enumerate() {
            if k > 0 {
                out.push('\n');
            }
            let _ = writeln!(out, "[{name}]");
            for (key, value) in entries {
                let _ = writeln!(out, "{key} = {value}");
            }
        }
        out
    }

    /// First 16 hex digits of the SHA-256 of [`serialize`](Self::serialize).
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.serialize().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
