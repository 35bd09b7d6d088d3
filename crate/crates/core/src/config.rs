use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::Pooling;

/// Which scorer sits on top of the prototypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    /// Retrieval + cross-attention fusion.
    #[default]
    Fusion,
    /// Negative squared Euclidean distance to the prototypes.
    Protonet,
}

impl std::str::FromStr for ScorerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fusion" => Ok(ScorerKind::Fusion),
            "protonet" => Ok(ScorerKind::Protonet),
            other => Err(Error::Config(format!("unknown scorer `{other}`"))),
        }
    }
}

impl std::fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScorerKind::Fusion => "fusion",
            ScorerKind::Protonet => "protonet",
        })
    }
}

/// How retrieved passages are presented to the fusion network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewMode {
    /// One input per passage, scored independently and pooled.
    #[default]
    Parallel,
    /// All passages concatenated behind the query into a single input.
    Concat,
}

impl std::fmt::Display for ViewMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ViewMode::Parallel => "parallel",
            ViewMode::Concat => "concat",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Classes per episode.
    pub c: usize,
    /// Support examples per class.
    pub n: usize,
    /// Queries per episode.
    pub q: usize,
    /// Retrieved passages per query.
    pub m: usize,
    /// Encoder width.
    pub d: usize,
    /// Retrieval width.
    pub d_r: usize,
    /// Attention heads.
    pub h: usize,
    /// Half-width of the uniform embedding init; `None` means 0.5/d.
    pub embed_init: Option<f64>,
    pub strategy: Pooling,
    pub scorer: ScorerKind,
    pub view_mode: ViewMode,
    /// Token budget of one fusion input.
    pub max_len: usize,
    pub max_lr: f64,
    pub warmup_steps: usize,
    pub decay_steps: usize,
    /// Total optimizer steps; 0 means `warmup_steps + decay_steps`.
    pub steps: usize,
    /// Episodes averaged into one optimizer step.
    pub batch_episodes: usize,
    pub episodes_per_epoch: usize,
    /// Validation episodes run at the end of each epoch (0 disables).
    pub val_episodes: usize,
    /// Epochs without validation improvement before stopping (0 disables).
    pub patience: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Cache retrieval results by query text.
    pub cache_retrieval: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            c: 5,
            n: 1,
            q: 5,
            m: 5,
            d: 64,
            d_r: 32,
            h: 4,
            embed_init: None,
            strategy: Pooling::Mean,
            scorer: ScorerKind::Fusion,
            view_mode: ViewMode::Parallel,
            max_len: 64,
            max_lr: 2e-5,
            warmup_steps: 1000,
            decay_steps: 9000,
            steps: 0,
            batch_episodes: 1,
            episodes_per_epoch: 100,
            val_episodes: 50,
            patience: 5,
            seed: 0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            cache_retrieval: false,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> usize {
        if self.steps == 0 {
            self.warmup_steps + self.decay_steps
        } else {
            self.steps
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.c < 2 {
            return fail("c must be at least 2");
        }
        if self.n < 1 {
            return fail("n must be at least 1");
        }
        if self.q < 1 {
            return fail("q must be at least 1");
        }
        if self.d == 0 || self.h == 0 || !self.d.is_multiple_of(self.h) {
            return fail("h must divide d");
        }
        if self.embed_init.is_some_and(|a| !(a > 0.0 && a.is_finite())) {
            return fail("embed_init must be positive");
        }
        if self.d_r == 0 {
            return fail("d_r must be positive");
        }
        if self.warmup_steps < 1 {
            return fail("warmup_steps must be at least 1");
        }
        if self.batch_episodes < 1 || self.episodes_per_epoch < 1 {
            return fail("batch_episodes and episodes_per_epoch must be positive");
        }
        if !(self.max_lr >= 0.0 && self.weight_decay >= 0.0) {
            return fail("max_lr and weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0
        {
            return fail("optimizer betas must lie in [0, 1) and eps must be positive");
        }
        if self.max_len < 3 {
            return fail("max_len must admit at least one query token");
        }
        Ok(())
    }
}
