//! Decision policies sharing one act/observe interface: linear HyperAgent
//! (closed-form update), SGD-trained HyperAgent, exact Thompson sampling and greedy.

use nalgebra::DVector;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::distributions::{sample_perturbation, sample_reference, DistributionKind};
use crate::envs::{sphere_argmax, ActionSet, Choice};
use crate::error::{input, param, Error, Result};
use crate::hypermodel::{sgd_step, Hypermodel, Mlp, OptimizerKind, ReplayBuffer, Trainer, Transition};
use crate::linear::PosteriorState;
use crate::scalar::Scalar;

/// How the inflation coefficient `β` is chosen at decision time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BetaMode {
    Fixed(f64),
    /// `β_t` from the confidence-ellipsoid formula at level `delta`.
    Theoretical { delta: f64 },
}

impl Default for BetaMode {
    fn default() -> Self {
        BetaMode::Fixed(1.0)
    }
}

impl BetaMode {
    pub fn value<T: Scalar>(&self, state: &PosteriorState<T>) -> Result<T> {
        match *self {
            BetaMode::Fixed(b) => Ok(T::of(b)),
            BetaMode::Theoretical { delta } => state.beta(delta),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub reference_kind: DistributionKind,
    pub update_kind: DistributionKind,
    pub perturbation_kind: DistributionKind,
    #[serde(rename = "M")]
    pub index_dim: usize,
    pub sigma: f64,
    pub lambda: f64,
    /// Gradient steps per period (SGD path).
    #[serde(rename = "B")]
    pub update_steps: usize,
    pub buffer_capacity: usize,
    pub xi_batch: usize,
    pub beta_mode: BetaMode,
    /// Use the exact expectation over `ξ` when the update law has an enumerable support.
    pub exact_expectation: bool,
    pub batch_size: usize,
    pub step_size: f64,
    pub optimizer: OptimizerKind,
    pub prior_scale: f64,
    /// Hidden widths of the SGD feature extractor; empty means identity.
    pub hidden: Vec<usize>,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            reference_kind: DistributionKind::Gaussian,
            update_kind: DistributionKind::Gaussian,
            perturbation_kind: DistributionKind::Sphere,
            index_dim: 8,
            sigma: 1.0,
            lambda: 1.0,
            update_steps: 1,
            buffer_capacity: 10_000,
            xi_batch: 20,
            beta_mode: BetaMode::default(),
            exact_expectation: true,
            batch_size: 64,
            step_size: 1e-3,
            optimizer: OptimizerKind::Sgd,
            prior_scale: 1.0,
            hidden: vec![50, 50, 50],
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let m = self.index_dim;
        if m == 0 {
            return Err(param("index dimension M must be at least 1"));
        }
        for kind in [self.reference_kind, self.update_kind, self.perturbation_kind] {
            kind.validate(m)?;
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(param(format!("sigma must be finite and ≥ 0, got {}", self.sigma)));
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(param(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.buffer_capacity == 0 || self.xi_batch == 0 || self.batch_size == 0 {
            return Err(param("buffer_capacity, xi_batch and batch_size must be at least 1"));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(param(format!("step_size must be positive, got {}", self.step_size)));
        }
        if !(self.prior_scale >= 0.0) || !self.prior_scale.is_finite() {
            return Err(param(format!("prior_scale must be finite and ≥ 0, got {}", self.prior_scale)));
        }
        if self.hidden.contains(&0) {
            return Err(param("hidden layer widths must be positive"));
        }
        match self.beta_mode {
            BetaMode::Fixed(b) if !(b >= 0.0) || !b.is_finite() => {
                Err(param(format!("fixed beta must be finite and ≥ 0, got {b}")))
            }
            BetaMode::Theoretical { delta } if !(delta > 0.0 && delta < 1.0) => {
                Err(param(format!("beta delta must lie in (0, 1), got {delta}")))
            }
            _ => Ok(()),
        }
    }

    pub fn is_ensemble_plus(&self) -> bool {
        self.reference_kind == DistributionKind::Coord && self.update_kind == DistributionKind::Coord
    }

    pub fn label(&self) -> String {
        if self.is_ensemble_plus() {
            format!("ensemble+:M={}", self.index_dim)
        } else {
            format!(
                "hyperagent:{}-{}-{}:M={}",
                self.reference_kind, self.update_kind, self.perturbation_kind, self.index_dim
            )
        }
    }
}

/// The ensemble special case: coordinate reference and update laws.
pub fn ensemble_plus_config(m: usize) -> AgentConfig {
    AgentConfig {
        reference_kind: DistributionKind::Coord,
        update_kind: DistributionKind::Coord,
        perturbation_kind: DistributionKind::Coord,
        index_dim: m,
        ..AgentConfig::default()
    }
}

/// Index of the largest value; ties go to the lowest index. NaN never wins.
pub fn argmax_lowest(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if !(v > b) => {}
            _ if v.is_nan() => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

fn argmax_linear(features: &[DVector<f64>], theta: &DVector<f64>) -> Result<usize> {
    if features.is_empty() {
        return Err(input("action set is empty"));
    }
    if features.iter().any(|f| f.len() != theta.len()) {
        return Err(input("action feature dimension mismatch"));
    }
    let scores: Vec<f64> = features.iter().map(|f| f.dot(theta)).collect();
    argmax_lowest(&scores).ok_or_else(|| Error::Numerical("all action scores are NaN".into()))
}

/// Samples one index `ζ` and returns the action maximizing its index value.
pub fn hyperagent_act<R: Rng + ?Sized>(
    state: &PosteriorState<f64>,
    features: &[DVector<f64>],
    cfg: &AgentConfig,
    rng: &mut R,
) -> Result<usize> {
    if features.is_empty() {
        return Err(input("action set is empty"));
    }
    let theta = hyperagent_parameter(state, cfg, rng)?;
    argmax_linear(features, &theta)
}

/// `β A ζ + μ` for a fresh reference draw `ζ`.
pub fn hyperagent_parameter<R: Rng + ?Sized>(
    state: &PosteriorState<f64>,
    cfg: &AgentConfig,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let zeta = sample_reference::<f64, R>(cfg.reference_kind, state.index_dim(), rng)?;
    let beta = cfg.beta_mode.value(state)?;
    state.sampled_parameter(&zeta, beta)
}

/// Draws the datum's perturbation and applies the closed-form update.
pub fn hyperagent_observe<R: Rng + ?Sized>(
    state: &mut PosteriorState<f64>,
    phi: &DVector<f64>,
    y: f64,
    cfg: &AgentConfig,
    rng: &mut R,
) -> Result<()> {
    let z = sample_perturbation::<f64, R>(cfg.perturbation_kind, state.index_dim(), rng)?.index;
    state.update(phi, y, &z)
}

/// Samples `θ̃ ~ N(μ, v² Σ)` and acts greedily on it.
pub fn exact_ts_parameter<R: Rng + ?Sized>(
    state: &PosteriorState<f64>,
    variance_scale: f64,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let chol = state
        .covariance()
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("posterior covariance is not positive definite".into()))?;
    let g = DVector::<f64>::from_fn(state.dim(), |_, _| StandardNormal.sample(rng));
    Ok(state.mean() + chol.l() * g * variance_scale)
}

pub fn exact_ts_act<R: Rng + ?Sized>(
    state: &PosteriorState<f64>,
    features: &[DVector<f64>],
    variance_scale: f64,
    rng: &mut R,
) -> Result<usize> {
    if features.is_empty() {
        return Err(input("action set is empty"));
    }
    let theta = exact_ts_parameter(state, variance_scale, rng)?;
    argmax_linear(features, &theta)
}

pub fn greedy_act(state: &PosteriorState<f64>, features: &[DVector<f64>]) -> Result<usize> {
    argmax_linear(features, state.mean())
}

/// Per-step and cumulative regret of one (agent, environment, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretTrace {
    pub agent_label: String,
    pub seed: u64,
    pub per_step_regret: Vec<f64>,
    pub cumulative: Vec<f64>,
}

impl RegretTrace {
    pub fn new(agent_label: String, seed: u64, per_step_regret: Vec<f64>) -> Self {
        let cumulative = per_step_regret
            .iter()
            .scan(0.0, |acc, r| {
                *acc += r;
                Some(*acc)
            })
            .collect();
        Self { agent_label, seed, per_step_regret, cumulative }
    }

    pub fn horizon(&self) -> usize {
        self.per_step_regret.len()
    }

    pub fn final_regret(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }
}

pub trait Agent: Send {
    fn label(&self) -> String;

    fn act(&mut self, actions: &ActionSet, rng: &mut dyn RngCore) -> Result<Choice>;

    /// Incorporates the reward of `choice`, drawn from `actions`.
    fn observe(&mut self, actions: &ActionSet, choice: &Choice, reward: f64, rng: &mut dyn RngCore) -> Result<()>;
}

fn choose_linear(actions: &ActionSet, theta: &DVector<f64>) -> Result<Choice> {
    match actions {
        ActionSet::Finite { features, .. } => Ok(Choice::Index(argmax_linear(features, theta)?)),
        ActionSet::Sphere { dim } => {
            if *dim != theta.len() {
                return Err(input("sphere dimension does not match the agent"));
            }
            Ok(Choice::Point(sphere_argmax(theta).0))
        }
    }
}

fn linear_state<R: Rng + ?Sized>(
    d: usize,
    m: usize,
    lambda: f64,
    perturbation: DistributionKind,
    feature_bound: f64,
    rng: &mut R,
) -> Result<PosteriorState<f64>> {
    Ok(PosteriorState::init(d, m, lambda, perturbation, rng)?.with_feature_bound(feature_bound.max(1.0)))
}

/// HyperAgent with the closed-form linear update.
#[derive(Debug, Clone)]
pub struct LinearHyperAgent {
    cfg: AgentConfig,
    state: PosteriorState<f64>,
}

impl LinearHyperAgent {
    /// `feature_bound` is the largest feature norm the environment can emit;
    /// values below 1 keep the unit-ball contract.
    pub fn new<R: Rng + ?Sized>(cfg: AgentConfig, d: usize, feature_bound: f64, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let state = linear_state(d, cfg.index_dim, cfg.lambda, cfg.perturbation_kind, feature_bound, rng)?;
        Ok(Self { cfg, state })
    }

    pub fn state(&self) -> &PosteriorState<f64> {
        &self.state
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }
}

impl Agent for LinearHyperAgent {
    fn label(&self) -> String {
        self.cfg.label()
    }

    fn act(&mut self, actions: &ActionSet, rng: &mut dyn RngCore) -> Result<Choice> {
        if actions.is_empty() {
            return Err(input("action set is empty"));
        }
        let theta = hyperagent_parameter(&self.state, &self.cfg, rng)?;
        choose_linear(actions, &theta)
    }

    fn observe(&mut self, actions: &ActionSet, choice: &Choice, reward: f64, rng: &mut dyn RngCore) -> Result<()> {
        let phi = actions.feature(choice)?;
        hyperagent_observe(&mut self.state, &phi, reward, &self.cfg, rng)
    }
}

/// Thompson sampling from the exact Gaussian posterior over the same statistics.
#[derive(Debug, Clone)]
pub struct ThompsonAgent {
    state: PosteriorState<f64>,
    variance_scale: f64,
}

impl ThompsonAgent {
    pub fn new(d: usize, lambda: f64, variance_scale: f64, feature_bound: f64) -> Result<Self> {
        if !(variance_scale >= 0.0) || !variance_scale.is_finite() {
            return Err(param(format!("variance scale must be finite and ≥ 0, got {variance_scale}")));
        }
        let state = PosteriorState::from_prior(lambda, nalgebra::DMatrix::zeros(d, 1))?
            .with_feature_bound(feature_bound.max(1.0));
        Ok(Self { state, variance_scale })
    }

    pub fn state(&self) -> &PosteriorState<f64> {
        &self.state
    }
}

fn observe_statistics(state: &mut PosteriorState<f64>, actions: &ActionSet, choice: &Choice, reward: f64) -> Result<()> {
    let phi = actions.feature(choice)?;
    state.update(&phi, reward, &crate::distributions::IndexVector::zeros(1))
}

impl Agent for ThompsonAgent {
    fn label(&self) -> String {
        "ts".into()
    }

    fn act(&mut self, actions: &ActionSet, rng: &mut dyn RngCore) -> Result<Choice> {
        if actions.is_empty() {
            return Err(input("action set is empty"));
        }
        let theta = exact_ts_parameter(&self.state, self.variance_scale, rng)?;
        choose_linear(actions, &theta)
    }

    fn observe(&mut self, actions: &ActionSet, choice: &Choice, reward: f64, _rng: &mut dyn RngCore) -> Result<()> {
        observe_statistics(&mut self.state, actions, choice, reward)
    }
}

/// Acts on the ridge mean.
#[derive(Debug, Clone)]
pub struct GreedyAgent {
    state: PosteriorState<f64>,
}

impl GreedyAgent {
    pub fn new(d: usize, lambda: f64, feature_bound: f64) -> Result<Self> {
        let state = PosteriorState::from_prior(lambda, nalgebra::DMatrix::zeros(d, 1))?
            .with_feature_bound(feature_bound.max(1.0));
        Ok(Self { state })
    }

    pub fn state(&self) -> &PosteriorState<f64> {
        &self.state
    }
}

impl Agent for GreedyAgent {
    fn label(&self) -> String {
        "greedy".into()
    }

    fn act(&mut self, actions: &ActionSet, _rng: &mut dyn RngCore) -> Result<Choice> {
        if actions.is_empty() {
            return Err(input("action set is empty"));
        }
        choose_linear(actions, self.state.mean())
    }

    fn observe(&mut self, actions: &ActionSet, choice: &Choice, reward: f64, _rng: &mut dyn RngCore) -> Result<()> {
        observe_statistics(&mut self.state, actions, choice, reward)
    }
}

/// How the SGD agent feeds an action set to its hypermodel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputMode {
    /// Each action's feature vector is an input to a single head.
    PerAction,
    /// The step context is the input; action `a` is head `a`.
    ContextHeads,
}

/// HyperAgent trained by mini-batch gradient descent.
#[derive(Debug, Clone)]
pub struct SgdHyperAgent {
    cfg: AgentConfig,
    mode: InputMode,
    model: Hypermodel<f64>,
    buffer: ReplayBuffer<f64>,
    trainer: Trainer<f64>,
}

impl SgdHyperAgent {
    pub fn new<R: Rng + ?Sized>(
        cfg: AgentConfig,
        input_dim: usize,
        mode: InputMode,
        n_heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let n_heads = match mode {
            InputMode::PerAction => 1,
            InputMode::ContextHeads => n_heads,
        };
        if n_heads == 0 || input_dim == 0 {
            return Err(param("SGD agent needs a positive input dimension and at least one head"));
        }
        let extractor = if cfg.hidden.is_empty() {
            Mlp::identity(input_dim)
        } else {
            let mut sizes = vec![input_dim];
            sizes.extend_from_slice(&cfg.hidden);
            Mlp::random(&sizes, true, rng)?
        };
        let model = Hypermodel::new(
            extractor,
            n_heads,
            cfg.index_dim,
            cfg.perturbation_kind,
            cfg.lambda,
            cfg.prior_scale,
            rng,
        )?;
        let buffer = ReplayBuffer::new(cfg.buffer_capacity)?;
        let trainer = Trainer::new(&cfg)?;
        Ok(Self { cfg, mode, model, buffer, trainer })
    }

    pub fn model(&self) -> &Hypermodel<f64> {
        &self.model
    }

    pub fn buffer(&self) -> &ReplayBuffer<f64> {
        &self.buffer
    }

    fn input_for(&self, actions: &ActionSet, choice: &Choice) -> Result<(DVector<f64>, usize)> {
        let (features, context) = match actions {
            ActionSet::Finite { features, context } => (features, context),
            ActionSet::Sphere { .. } => return Err(Error::Unsupported("SGD agent needs a finite action set".into())),
        };
        let Choice::Index(a) = *choice else {
            return Err(input("SGD agent expects an action index"));
        };
        match self.mode {
            InputMode::PerAction => Ok((actions.feature(choice)?, 0)),
            InputMode::ContextHeads => {
                let ctx = context.as_ref().ok_or_else(|| input("action set carries no context"))?;
                if a >= features.len() || a >= self.model.n_heads() {
                    return Err(input(format!("action {a} out of range")));
                }
                Ok((ctx.clone(), a))
            }
        }
    }
}

impl Agent for SgdHyperAgent {
    fn label(&self) -> String {
        format!("sgd-{}", self.cfg.label())
    }

    fn act(&mut self, actions: &ActionSet, rng: &mut dyn RngCore) -> Result<Choice> {
        let ActionSet::Finite { features, context } = actions else {
            return Err(Error::Unsupported("SGD agent needs a finite action set".into()));
        };
        if features.is_empty() {
            return Err(input("action set is empty"));
        }
        let zeta = sample_reference::<f64, _>(self.cfg.reference_kind, self.cfg.index_dim, rng)?;
        let values = match self.mode {
            InputMode::PerAction => features
                .iter()
                .map(|f| self.model.value(f, 0, &zeta))
                .collect::<Result<Vec<_>>>()?,
            InputMode::ContextHeads => {
                let ctx = context.as_ref().ok_or_else(|| input("action set carries no context"))?;
                let mut v = self.model.forward(ctx, &zeta)?;
                v.truncate(features.len());
                v
            }
        };
        argmax_lowest(&values)
            .map(Choice::Index)
            .ok_or_else(|| Error::Numerical("all hypermodel values are NaN".into()))
    }

    fn observe(&mut self, actions: &ActionSet, choice: &Choice, reward: f64, rng: &mut dyn RngCore) -> Result<()> {
        let (input, head) = self.input_for(actions, choice)?;
        let z = sample_perturbation::<f64, _>(self.cfg.perturbation_kind, self.cfg.index_dim, rng)?.index;
        self.buffer.push(Transition { input, head, reward, z });
        sgd_step(&mut self.model, &self.buffer, &self.cfg, &mut self.trainer, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_vec(x.to_vec())
    }

    #[test]
    fn trace_prefix_sums() {
        let t = RegretTrace::new("ts".into(), 3, vec![1.0, 0.0, 0.5]);
        assert_eq!(t.cumulative, vec![1.0, 1.0, 1.5]);
        assert_eq!(t.final_regret(), 1.5);
        assert_eq!(t.horizon(), 3);
    }

    #[test]
    fn labels() {
        let cfg = AgentConfig { index_dim: 8, ..AgentConfig::default() };
        assert_eq!(cfg.label(), "hyperagent:gaussian-gaussian-sphere:M=8");
        assert_eq!(ensemble_plus_config(4).label(), "ensemble+:M=4");
        assert!(ensemble_plus_config(8).validate().is_ok());
    }

    #[test]
    fn config_validation() {
        let bad = [
            AgentConfig { index_dim: 0, ..AgentConfig::default() },
            AgentConfig { lambda: 0.0, ..AgentConfig::default() },
            AgentConfig { sigma: -1.0, ..AgentConfig::default() },
            AgentConfig { beta_mode: BetaMode::Theoretical { delta: 1.0 }, ..AgentConfig::default() },
            AgentConfig { update_kind: DistributionKind::Sparse(9), ..AgentConfig::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn argmax_ties_and_nan() {
        assert_eq!(argmax_lowest(&[1.0, 1.0]), Some(0));
        assert_eq!(argmax_lowest(&[f64::NAN, 0.5, 2.0, 2.0]), Some(2));
        assert_eq!(argmax_lowest(&[]), None);
    }

    #[test]
    fn zero_factor_is_greedy() {
        let mut state = PosteriorState::from_prior(1.0, DMatrix::zeros(2, 3)).unwrap();
        state.update(&v(&[0.6, 0.0]), 1.0, &crate::IndexVector::zeros(3)).unwrap();
        let feats = vec![v(&[0.0, 1.0]), v(&[1.0, 0.0]), v(&[-1.0, 0.0])];
        let cfg = AgentConfig { index_dim: 3, ..AgentConfig::default() };
        let mut r = rng(0);
        for _ in 0..50 {
            assert_eq!(hyperagent_act(&state, &feats, &cfg, &mut r).unwrap(), 1);
        }
        assert_eq!(greedy_act(&state, &feats).unwrap(), 1);
        assert_eq!(hyperagent_act(&state, &[v(&[1.0, 0.0]), v(&[1.0, 0.0])], &cfg, &mut r).unwrap(), 0);
        assert!(hyperagent_act(&state, &[], &cfg, &mut r).is_err());
        assert!(greedy_act(&state, &[]).is_err());
    }

    #[test]
    fn greedy_defaults() {
        let state = PosteriorState::from_prior(1.0, DMatrix::zeros(2, 1)).unwrap();
        assert_eq!(greedy_act(&state, &[v(&[1.0, 0.0]), v(&[0.0, 1.0])]).unwrap(), 0);
    }

    #[test]
    fn symmetric_index_splits_evenly() {
        let state = PosteriorState::from_prior(1.0, DMatrix::from_element(1, 1, 1.0)).unwrap();
        let feats = vec![v(&[1.0]), v(&[-1.0])];
        let cfg = AgentConfig { index_dim: 1, perturbation_kind: DistributionKind::Cube, ..AgentConfig::default() };
        let mut r = rng(1);
        let n = 100_000;
        let first = (0..n)
            .filter(|_| hyperagent_act(&state, &feats, &cfg, &mut r).unwrap() == 0)
            .count();
        assert!((first as f64 / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn thompson_cases() {
        let mut r = rng(2);
        let state = PosteriorState::from_prior(1.0, DMatrix::zeros(2, 1)).unwrap();
        let feats = vec![v(&[1.0, 0.0]), v(&[0.0, 1.0])];
        let n = 100_000;
        let first = (0..n)
            .filter(|_| exact_ts_act(&state, &feats, 1.0, &mut r).unwrap() == 0)
            .count();
        assert!((first as f64 / n as f64 - 0.5).abs() < 0.01);
        assert_eq!(exact_ts_act(&state, &feats, 0.0, &mut r).unwrap(), 0);

        // Covariance about 1e-6 I with mean close to e₁.
        let mut tight = PosteriorState::from_prior(1e6, DMatrix::zeros(2, 1)).unwrap();
        let z = crate::IndexVector::zeros(1);
        for _ in 0..1_000_000 / 1000 {
            tight.update(&v(&[1.0, 0.0]), 1000.0 * 1.000_001, &z).unwrap();
        }
        let hits = (0..10_000)
            .filter(|_| exact_ts_act(&tight, &feats, 1.0, &mut r).unwrap() == 0)
            .count();
        assert!(hits as f64 / 10_000.0 >= 0.999);
    }

    #[test]
    fn seeded_agents_agree() {
        let run = || {
            let mut r = rng(9);
            let cfg = AgentConfig { index_dim: 4, ..AgentConfig::default() };
            let mut agent = LinearHyperAgent::new(cfg, 3, 1.0, &mut r).unwrap();
            let set = ActionSet::finite(vec![v(&[0.5, 0.0, 0.1]), v(&[0.0, 0.4, -0.3])]);
            for _ in 0..30 {
                let c = agent.act(&set, &mut r).unwrap();
                agent.observe(&set, &c, 0.3, &mut r).unwrap();
            }
            agent.state().to_snapshot_bytes()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn sgd_agent_runs_on_contexts() {
        let mut r = rng(3);
        let cfg = AgentConfig { index_dim: 4, hidden: vec![], update_steps: 2, ..AgentConfig::default() };
        let mut agent = SgdHyperAgent::new(cfg, 3, InputMode::ContextHeads, 2, &mut r).unwrap();
        let prior_before = agent.model().prior().to_vec();
        let set = ActionSet::Finite {
            features: vec![v(&[1.0, 0.0]), v(&[0.0, 1.0])],
            context: Some(v(&[0.2, -0.1, 0.7])),
        };
        for _ in 0..20 {
            let c = agent.act(&set, &mut r).unwrap();
            agent.observe(&set, &c, 1.0, &mut r).unwrap();
        }
        assert_eq!(agent.model().prior(), &prior_before[..]);
        assert_eq!(agent.buffer().len(), 20);
        assert!(agent.act(&ActionSet::Sphere { dim: 2 }, &mut r).is_err());
    }
}
