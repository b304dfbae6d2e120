//! Experiment configuration: a TOML file with CLI overrides. Unknown keys are errors.

use std::path::{Path, PathBuf};

use hyperagent_core::agents::{ensemble_plus_config, AgentConfig};
use hyperagent_core::DistributionKind;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RunnerError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    pub agents: Vec<AgentSpec>,
    pub horizon: usize,
    pub n_seeds: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default = "default_true")]
    pub plot: bool,
}

fn default_out() -> PathBuf {
    PathBuf::from("results")
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvSpec {
    FiniteLinear {
        d: usize,
        n_actions: usize,
        #[serde(default)]
        noise_std: Option<f64>,
    },
    SphereLinear {
        d: usize,
        #[serde(default)]
        noise_std: Option<f64>,
    },
    Neural {
        #[serde(default = "default_nonlinear_d")]
        d: usize,
        #[serde(default = "default_nonlinear_actions")]
        n_actions: usize,
        #[serde(default)]
        noise_std: Option<f64>,
    },
    Quadratic {
        #[serde(default = "default_nonlinear_d")]
        d: usize,
        #[serde(default = "default_nonlinear_actions")]
        n_actions: usize,
        #[serde(default)]
        noise_std: Option<f64>,
    },
    Moderation {
        /// HBE1 embedding file. Relative paths resolve against the config file.
        #[serde(default)]
        embeddings: Option<PathBuf>,
        /// Generated linearly separable posts, used when no file is given.
        #[serde(default)]
        synthetic: Option<SyntheticPosts>,
        #[serde(default)]
        shuffle: bool,
        #[serde(default)]
        reveal: bool,
    },
}

fn default_nonlinear_d() -> usize {
    100
}

fn default_nonlinear_actions() -> usize {
    1000
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticPosts {
    pub n_posts: usize,
    pub dim: usize,
    #[serde(default = "default_hate_fraction")]
    pub hate_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_hate_fraction() -> f64 {
    0.3
}

impl EnvSpec {
    pub fn name(&self) -> &'static str {
        match self {
            EnvSpec::FiniteLinear { .. } => "finite_linear",
            EnvSpec::SphereLinear { .. } => "sphere_linear",
            EnvSpec::Neural { .. } => "neural",
            EnvSpec::Quadratic { .. } => "quadratic",
            EnvSpec::Moderation { .. } => "moderation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AgentSpec {
    /// Linear HyperAgent with the closed-form update.
    Hyperagent(AgentConfig),
    /// HyperAgent trained by gradient steps.
    Sgd(AgentConfig),
    #[serde(rename = "ensemble+")]
    EnsemblePlus(EnsembleSpec),
    Ts(BaselineSpec),
    Greedy(BaselineSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    #[serde(rename = "M")]
    pub index_dim: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_coord")]
    pub perturbation_kind: DistributionKind,
}

fn default_coord() -> DistributionKind {
    DistributionKind::Coord
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSpec {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Posterior variance multiplier for Thompson sampling.
    #[serde(default = "default_one")]
    pub variance_scale: f64,
}

impl Default for BaselineSpec {
    fn default() -> Self {
        Self { lambda: 1.0, variance_scale: 1.0 }
    }
}

fn default_lambda() -> f64 {
    1.0
}

fn default_one() -> f64 {
    1.0
}

impl AgentSpec {
    /// The hypermodel configuration this spec stands for, if any.
    pub fn agent_config(&self) -> Option<AgentConfig> {
        match self {
            AgentSpec::Hyperagent(c) | AgentSpec::Sgd(c) => Some(c.clone()),
            AgentSpec::EnsemblePlus(e) => Some(AgentConfig {
                lambda: e.lambda,
                perturbation_kind: e.perturbation_kind,
                ..ensemble_plus_config(e.index_dim)
            }),
            _ => None,
        }
    }

    pub fn label(&self) -> String {
        match self {
            AgentSpec::Sgd(c) => format!("sgd-{}", c.label()),
            AgentSpec::Ts(_) => "ts".into(),
            AgentSpec::Greedy(_) => "greedy".into(),
            other => other.agent_config().expect("hypermodel spec").label(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check_lambda = |l: f64| {
            if l > 0.0 && l.is_finite() {
                Ok(())
            } else {
                Err(RunnerError::Config(format!("lambda must be positive, got {l}")))
            }
        };
        match self {
            AgentSpec::Ts(b) | AgentSpec::Greedy(b) => {
                check_lambda(b.lambda)?;
                if !(b.variance_scale >= 0.0) || !b.variance_scale.is_finite() {
                    return Err(RunnerError::Config("variance_scale must be finite and ≥ 0".into()));
                }
                Ok(())
            }
            other => other
                .agent_config()
                .expect("hypermodel spec")
                .validate()
                .map_err(|e| RunnerError::Config(format!("agent {}: {e}", other.label()))),
        }
    }
}

/// Command-line values that replace file values.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub master_seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub horizon: Option<usize>,
    pub n_seeds: Option<usize>,
    pub plot: Option<bool>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| RunnerError::Config(e.to_string()))
    }

    /// Reads a config file; a relative embeddings path is resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RunnerError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let EnvSpec::Moderation { embeddings: Some(p), .. } = &mut cfg.env {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.master_seed {
            self.master_seed = s;
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
        if let Some(h) = o.horizon {
            self.horizon = h;
        }
        if let Some(n) = o.n_seeds {
            self.n_seeds = n;
        }
        if let Some(p) = o.plot {
            self.plot = p;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(RunnerError::Config("horizon must be at least 1".into()));
        }
        if self.n_seeds == 0 {
            return Err(RunnerError::Config("n_seeds must be at least 1".into()));
        }
        if self.agents.is_empty() {
            return Err(RunnerError::Config("at least one agent is required".into()));
        }
        for a in &self.agents {
            a.validate()?;
        }
        let mut labels: Vec<String> = self.agents.iter().map(AgentSpec::label).collect();
        labels.sort();
        if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
            return Err(RunnerError::Config(format!("duplicate agent label {}", w[0])));
        }
        if let EnvSpec::Moderation { embeddings, synthetic, .. } = &self.env {
            if embeddings.is_some() == synthetic.is_some() {
                return Err(RunnerError::Config(
                    "moderation env needs exactly one of `embeddings` or `synthetic`".into(),
                ));
            }
        }
        if let EnvSpec::SphereLinear { .. } = self.env {
            if self.agents.iter().any(|a| matches!(a, AgentSpec::Sgd(_))) {
                return Err(RunnerError::Config("the SGD agent needs a finite action set".into()));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
