//! One (agent, seed) simulation: act, score regret against the truth, feed back.

use std::sync::Arc;

use hyperagent_core::agents::{Agent, GreedyAgent, InputMode, LinearHyperAgent, RegretTrace, SgdHyperAgent, ThompsonAgent};
use hyperagent_core::envs::{
    regret_step, BanditEnv, Choice, FiniteLinearEnv, ModerationEnv, ModerationTally, NeuralEnv, QuadraticEnv,
    SphereLinearEnv, BLOCK, PUBLISH,
};
use hyperagent_core::hbe::{self, Label, Post};

use crate::config::{AgentSpec, EnvSpec, ExperimentConfig};
use crate::error::{Result, RunnerError};
use crate::fixtures::synthetic_posts;
use crate::seeds;

/// Builds environment instances; moderation posts are loaded once and shared.
#[derive(Debug, Clone)]
pub struct EnvFactory {
    spec: EnvSpec,
    posts: Option<Arc<(usize, Vec<Post>)>>,
}

impl EnvFactory {
    pub fn new(spec: &EnvSpec) -> Result<Self> {
        let posts = match spec {
            EnvSpec::Moderation { embeddings: Some(path), .. } => {
                let file = hbe::read_path(path).map_err(|e| match e {
                    hyperagent_core::Error::Io(source) => RunnerError::Io { path: path.clone(), source },
                    other => other.into(),
                })?;
                Some(Arc::new((file.dim, file.posts)))
            }
            EnvSpec::Moderation { synthetic: Some(s), .. } => Some(Arc::new((s.dim, synthetic_posts(s)))),
            EnvSpec::Moderation { .. } => {
                return Err(RunnerError::Config("moderation env needs `embeddings` or `synthetic`".into()))
            }
            _ => None,
        };
        Ok(Self { spec: spec.clone(), posts })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    /// The environment instance for a run seed, plus post labels in serving order for moderation.
    pub fn build(&self, run_seed: u64) -> Result<(Box<dyn BanditEnv>, Option<Vec<Label>>)> {
        let mut rng = seeds::env_rng(run_seed);
        Ok(match &self.spec {
            EnvSpec::FiniteLinear { d, n_actions, noise_std } => {
                let env = FiniteLinearEnv::new(*d, *n_actions, &mut rng)?;
                let env = match noise_std {
                    Some(s) => env.with_noise_std(*s),
                    None => env,
                };
                (Box::new(env), None)
            }
            EnvSpec::SphereLinear { d, noise_std } => {
                let env = SphereLinearEnv::new(*d, &mut rng)?;
                let env = match noise_std {
                    Some(s) => env.with_noise_std(*s),
                    None => env,
                };
                (Box::new(env), None)
            }
            EnvSpec::Neural { d, n_actions, noise_std } => {
                let env = NeuralEnv::new(*d, *n_actions, &mut rng)?;
                let env = match noise_std {
                    Some(s) => NeuralEnv::with_network(env.network().clone(), env.actions().to_vec(), *s)?,
                    None => env,
                };
                (Box::new(env), None)
            }
            EnvSpec::Quadratic { d, n_actions, noise_std } => {
                let env = QuadraticEnv::new(*d, *n_actions, &mut rng)?;
                let env = match noise_std {
                    Some(s) => QuadraticEnv::with_matrix(env.matrix().clone(), env.actions().to_vec(), *s)?,
                    None => env,
                };
                (Box::new(env), None)
            }
            EnvSpec::Moderation { shuffle, reveal, .. } => {
                let (dim, posts) = &**self.posts.as_ref().expect("posts loaded");
                let mut env = ModerationEnv::from_posts(*dim, posts)?.with_reveal(*reveal);
                if *shuffle {
                    env = env.shuffled(&mut rng);
                }
                let labels = (0..env.n_posts()).map(|t| env.label(t)).collect::<hyperagent_core::Result<_>>()?;
                (Box::new(env), Some(labels))
            }
        })
    }
}

pub fn build_agent<R: rand::Rng + ?Sized>(
    spec: &AgentSpec,
    env_spec: &EnvSpec,
    env: &dyn BanditEnv,
    rng: &mut R,
) -> Result<Box<dyn Agent>> {
    let d = env.dim();
    let bound = env.feature_bound();
    Ok(match spec {
        AgentSpec::Ts(b) => Box::new(ThompsonAgent::new(d, b.lambda, b.variance_scale, bound)?),
        AgentSpec::Greedy(b) => Box::new(GreedyAgent::new(d, b.lambda, bound)?),
        AgentSpec::Sgd(cfg) => match env_spec {
            EnvSpec::Moderation { .. } => {
                let ctx_dim = (d / 2).saturating_sub(1);
                Box::new(SgdHyperAgent::new(cfg.clone(), ctx_dim, InputMode::ContextHeads, 2, rng)?)
            }
            _ => Box::new(SgdHyperAgent::new(cfg.clone(), d, InputMode::PerAction, 1, rng)?),
        },
        other => {
            let cfg = other.agent_config().expect("hypermodel spec");
            Box::new(LinearHyperAgent::new(cfg, d, bound, rng)?)
        }
    })
}

/// Decisions of a moderation run, in serving order.
#[derive(Debug, Clone, PartialEq)]
pub struct Decisions(pub Vec<(Label, usize)>);

impl Decisions {
    /// Outcome counts over the last `window` decisions.
    pub fn tally_last(&self, window: usize) -> ModerationTally {
        let start = self.0.len().saturating_sub(window);
        self.tally_range(start, self.0.len())
    }

    pub fn tally_range(&self, start: usize, end: usize) -> ModerationTally {
        let mut tally = ModerationTally::default();
        for &(label, action) in &self.0[start..end] {
            tally.record(label, action);
        }
        tally
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub trace: RegretTrace,
    pub decisions: Option<Decisions>,
}

/// Runs one agent for `horizon` steps at the given seed index.
pub fn run_one(
    factory: &EnvFactory,
    spec: &AgentSpec,
    master_seed: u64,
    seed_index: u64,
    horizon: usize,
) -> Result<RunOutcome> {
    let seed = seeds::run_seed(master_seed, seed_index);
    let (mut env, labels) = factory.build(seed)?;
    if let Some(limit) = env.horizon_limit() {
        if horizon > limit {
            return Err(RunnerError::Config(format!(
                "horizon {horizon} exceeds the {limit} steps the {} environment provides",
                env.name()
            )));
        }
    }
    let label = spec.label();
    let mut agent_rng = seeds::agent_rng(seed, &label);
    let mut noise_rng = seeds::noise_rng(seed);
    let mut agent = build_agent(spec, factory.spec(), env.as_ref(), &mut agent_rng)?;
    let mut regret = Vec::with_capacity(horizon);
    let mut decisions = labels.as_ref().map(|_| Vec::with_capacity(horizon));
    for t in 0..horizon {
        let actions = env.action_set(t)?;
        let choice = agent.act(&actions, &mut agent_rng)?;
        regret.push(regret_step(env.as_ref(), t, &choice)?);
        let fb = env.feedback(t, &choice, &mut noise_rng)?;
        agent.observe(&actions, &choice, fb.reward, &mut agent_rng)?;
        for (a, y) in fb.revealed {
            agent.observe(&actions, &Choice::Index(a), y, &mut agent_rng)?;
        }
        if let (Some(d), Some(labels), Choice::Index(a)) = (decisions.as_mut(), labels.as_ref(), &choice) {
            debug_assert!(*a == PUBLISH || *a == BLOCK);
            d.push((labels[t], *a));
        }
    }
    Ok(RunOutcome { trace: RegretTrace::new(label, seed_index, regret), decisions: decisions.map(Decisions) })
}

/// Every (agent index, seed index) pair of an experiment, agent-major.
pub fn run_keys(cfg: &ExperimentConfig) -> Vec<(usize, u64)> {
    (0..cfg.agents.len())
        .flat_map(|a| (0..cfg.n_seeds as u64).map(move |s| (a, s)))
        .collect()
}
