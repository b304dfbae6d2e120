//! Bandit environments with noiseless ground truth for regret accounting.
//!
//! Step indices are zero-based. Every environment answers `mean_reward` and
//! `optimal_value` from its true reward function, so regret never depends on the
//! realized noise.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};

use crate::error::{input, param, Result};
use crate::hbe::{self, Label, Post};
use crate::hypermodel::Mlp;

/// Actions offered at one step.
#[derive(Debug, Clone, PartialEq)]
pub enum ActionSet {
    /// Explicit feature vectors. `context` carries the raw per-step input for
    /// agents that learn their own features (one head per action).
    Finite {
        features: Vec<DVector<f64>>,
        context: Option<DVector<f64>>,
    },
    /// The unit sphere in `dim` dimensions.
    Sphere { dim: usize },
}

impl ActionSet {
    pub fn finite(features: Vec<DVector<f64>>) -> Self {
        ActionSet::Finite { features, context: None }
    }

    pub fn len(&self) -> Option<usize> {
        match self {
            ActionSet::Finite { features, .. } => Some(features.len()),
            ActionSet::Sphere { .. } => None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == Some(0)
    }

    /// Feature vector of a choice made from this set.
    pub fn feature(&self, choice: &Choice) -> Result<DVector<f64>> {
        match (self, choice) {
            (ActionSet::Finite { features, .. }, Choice::Index(i)) => features
                .get(*i)
                .cloned()
                .ok_or_else(|| input(format!("action {i} out of range ({} actions)", features.len()))),
            (ActionSet::Sphere { dim }, Choice::Point(x)) => {
                check_unit_point(x, *dim)?;
                Ok(x.clone())
            }
            _ => Err(input("choice does not match the action set kind")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Choice {
    Index(usize),
    Point(DVector<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Feedback {
    pub reward: f64,
    /// Extra (action, reward) pairs revealed alongside the chosen one.
    pub revealed: Vec<(usize, f64)>,
}

pub trait BanditEnv: Send {
    fn name(&self) -> &str;

    /// Dimension of the action feature vectors.
    fn dim(&self) -> usize;

    /// Upper bound on the Euclidean norm of any action feature.
    fn feature_bound(&self) -> f64;

    /// Number of steps the environment can serve, if bounded.
    fn horizon_limit(&self) -> Option<usize> {
        None
    }

    fn action_set(&mut self, t: usize) -> Result<ActionSet>;

    /// Noiseless reward `f*` of a choice from the step-`t` set.
    fn mean_reward(&self, t: usize, choice: &Choice) -> Result<f64>;

    /// `max_a f*(a)` over the step-`t` set.
    fn optimal_value(&self, t: usize) -> Result<f64>;

    /// Noisy reward for the choice, plus any counterfactual information.
    fn feedback(&mut self, t: usize, choice: &Choice, rng: &mut dyn RngCore) -> Result<Feedback>;

    /// Whether `f*` may be queried by diagnostics.
    fn exposes_truth(&self) -> bool {
        true
    }
}

/// Instantaneous regret `optimal_value(t) − f*(choice)`.
pub fn regret_step(env: &dyn BanditEnv, t: usize, choice: &Choice) -> Result<f64> {
    Ok(env.optimal_value(t)? - env.mean_reward(t, choice)?)
}

fn check_unit_point(x: &DVector<f64>, dim: usize) -> Result<()> {
    if x.len() != dim {
        return Err(input(format!("point has dimension {}, expected {dim}", x.len())));
    }
    if (x.norm() - 1.0).abs() > 1e-9 {
        return Err(input(format!("point has norm {}, expected 1", x.norm())));
    }
    Ok(())
}

fn index_of(choice: &Choice, n: usize) -> Result<usize> {
    match choice {
        Choice::Index(i) if *i < n => Ok(*i),
        Choice::Index(i) => Err(input(format!("action {i} out of range ({n} actions)"))),
        Choice::Point(_) => Err(input("finite environment expects an action index")),
    }
}

fn gaussian_noise(std: f64, rng: &mut dyn RngCore) -> f64 {
    if std == 0.0 {
        return 0.0;
    }
    let g: f64 = StandardNormal.sample(rng);
    std * g
}

/// Draws `n` points uniformly on the unit sphere in `d` dimensions.
pub fn sphere_points<R: Rng + ?Sized>(d: usize, n: usize, rng: &mut R) -> Vec<DVector<f64>> {
    (0..n)
        .map(|_| loop {
            let g = DVector::<f64>::from_fn(d, |_, _| StandardNormal.sample(rng));
            let norm = g.norm();
            if norm > 0.0 {
                break g / norm;
            }
        })
        .collect()
}

fn brute_force_max(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Fixed action set with linear rewards `⟨φ, θ*⟩ + noise`.
#[derive(Debug, Clone)]
pub struct FiniteLinearEnv {
    actions: Vec<DVector<f64>>,
    theta: DVector<f64>,
    noise_std: f64,
    means: Vec<f64>,
    best: f64,
    bound: f64,
}

impl FiniteLinearEnv {
    /// Features uniform in `[−1/√5, 1/√5]^d`, `θ* ~ N(0, 10 I)`, unit-variance noise.
    pub fn new<R: Rng + ?Sized>(d: usize, n_actions: usize, rng: &mut R) -> Result<Self> {
        if d == 0 || n_actions == 0 {
            return Err(param("finite linear env needs d ≥ 1 and at least one action"));
        }
        let half = 1.0 / 5f64.sqrt();
        let unif = Uniform::new_inclusive(-half, half).map_err(|e| param(e.to_string()))?;
        let actions: Vec<DVector<f64>> = (0..n_actions)
            .map(|_| DVector::from_fn(d, |_, _| unif.sample(rng)))
            .collect();
        let prior = Normal::new(0.0, 10f64.sqrt()).unwrap();
        let theta = DVector::from_fn(d, |_, _| prior.sample(rng));
        let mut env = Self::from_parts(actions, theta, 1.0)?;
        env.bound = (d as f64 / 5.0).sqrt();
        Ok(env)
    }

    pub fn from_parts(actions: Vec<DVector<f64>>, theta: DVector<f64>, noise_std: f64) -> Result<Self> {
        if actions.is_empty() {
            return Err(param("action set must be non-empty"));
        }
        if actions.iter().any(|a| a.len() != theta.len()) {
            return Err(input("action and parameter dimensions differ"));
        }
        if !(noise_std >= 0.0) || !noise_std.is_finite() {
            return Err(param(format!("noise std must be finite and ≥ 0, got {noise_std}")));
        }
        let means: Vec<f64> = actions.iter().map(|a| a.dot(&theta)).collect();
        let best = brute_force_max(&means);
        let bound = actions.iter().map(|a| a.norm()).fold(0.0, f64::max);
        Ok(Self { actions, theta, noise_std, means, best, bound })
    }

    pub fn with_noise_std(mut self, std: f64) -> Self {
        self.noise_std = std;
        self
    }

    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn actions(&self) -> &[DVector<f64>] {
        &self.actions
    }
}

impl BanditEnv for FiniteLinearEnv {
    fn name(&self) -> &str {
        "finite_linear"
    }

    fn dim(&self) -> usize {
        self.theta.len()
    }

    fn feature_bound(&self) -> f64 {
        self.bound
    }

    fn action_set(&mut self, _t: usize) -> Result<ActionSet> {
        Ok(ActionSet::finite(self.actions.clone()))
    }

    fn mean_reward(&self, _t: usize, choice: &Choice) -> Result<f64> {
        Ok(self.means[index_of(choice, self.actions.len())?])
    }

    fn optimal_value(&self, _t: usize) -> Result<f64> {
        Ok(self.best)
    }

    fn feedback(&mut self, t: usize, choice: &Choice, rng: &mut dyn RngCore) -> Result<Feedback> {
        let mean = self.mean_reward(t, choice)?;
        Ok(Feedback { reward: mean + gaussian_noise(self.noise_std, rng), revealed: Vec::new() })
    }
}

/// Maximizer of `⟨x, v⟩` over the unit sphere. Returns `e₁` and `true` when `v = 0`.
pub fn sphere_argmax(v: &DVector<f64>) -> (DVector<f64>, bool) {
    let norm = v.norm();
    if norm > 0.0 && norm.is_finite() {
        (v / norm, false)
    } else {
        let mut e = DVector::zeros(v.len());
        if !v.is_empty() {
            e[0] = 1.0;
        }
        (e, true)
    }
}

/// Linear rewards over the whole unit sphere.
#[derive(Debug, Clone)]
pub struct SphereLinearEnv {
    theta: DVector<f64>,
    noise_std: f64,
}

impl SphereLinearEnv {
    /// `θ* ~ N(0, 10 I)`, unit-variance noise.
    pub fn new<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<Self> {
        let prior = Normal::new(0.0, 10f64.sqrt()).unwrap();
        Self::with_theta(DVector::from_fn(d, |_, _| prior.sample(rng)), 1.0)
    }

    pub fn with_theta(theta: DVector<f64>, noise_std: f64) -> Result<Self> {
        if theta.len() < 2 {
            return Err(param("sphere env needs d ≥ 2"));
        }
        Ok(Self { theta, noise_std })
    }

    pub fn with_noise_std(mut self, std: f64) -> Self {
        self.noise_std = std;
        self
    }

    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn optimal_feature(&self) -> DVector<f64> {
        sphere_argmax(&self.theta).0
    }
}

impl BanditEnv for SphereLinearEnv {
    fn name(&self) -> &str {
        "sphere_linear"
    }

    fn dim(&self) -> usize {
        self.theta.len()
    }

    fn feature_bound(&self) -> f64 {
        1.0
    }

    fn action_set(&mut self, _t: usize) -> Result<ActionSet> {
        Ok(ActionSet::Sphere { dim: self.theta.len() })
    }

    fn mean_reward(&self, _t: usize, choice: &Choice) -> Result<f64> {
        match choice {
            Choice::Point(x) => {
                check_unit_point(x, self.theta.len())?;
                Ok(x.dot(&self.theta))
            }
            Choice::Index(_) => Err(input("sphere env expects a point on the sphere")),
        }
    }

    fn optimal_value(&self, _t: usize) -> Result<f64> {
        Ok(self.theta.norm())
    }

    fn feedback(&mut self, t: usize, choice: &Choice, rng: &mut dyn RngCore) -> Result<Feedback> {
        let mean = self.mean_reward(t, choice)?;
        Ok(Feedback { reward: mean + gaussian_noise(self.noise_std, rng), revealed: Vec::new() })
    }
}

/// Default noise level for the nonlinear benchmarks.
pub const NONLINEAR_NOISE_STD: f64 = 0.1;

/// Fixed finite action set with an arbitrary reward table.
#[derive(Debug, Clone)]
struct TabularEnv {
    actions: Vec<DVector<f64>>,
    means: Vec<f64>,
    best: f64,
    noise_std: f64,
}

impl TabularEnv {
    fn new(actions: Vec<DVector<f64>>, f: impl Fn(&DVector<f64>) -> f64, noise_std: f64) -> Self {
        let means: Vec<f64> = actions.iter().map(&f).collect();
        let best = brute_force_max(&means);
        Self { actions, means, best, noise_std }
    }

    fn feedback(&self, choice: &Choice, rng: &mut dyn RngCore) -> Result<Feedback> {
        let mean = self.means[index_of(choice, self.actions.len())?];
        Ok(Feedback { reward: mean + gaussian_noise(self.noise_std, rng), revealed: Vec::new() })
    }
}

/// Rewards from a fixed random ReLU network; actions uniform on the unit sphere.
#[derive(Debug, Clone)]
pub struct NeuralEnv {
    net: Mlp<f64>,
    table: TabularEnv,
}

/// Hidden widths of the reward network.
pub const NEURAL_ENV_HIDDEN: [usize; 3] = [50, 50, 50];

impl NeuralEnv {
    pub fn new<R: Rng + ?Sized>(d: usize, n_actions: usize, rng: &mut R) -> Result<Self> {
        if d == 0 || n_actions == 0 {
            return Err(param("neural env needs d ≥ 1 and at least one action"));
        }
        let mut sizes = vec![d];
        sizes.extend_from_slice(&NEURAL_ENV_HIDDEN);
        sizes.push(1);
        let net = Mlp::random(&sizes, false, rng)?;
        let actions = sphere_points(d, n_actions, rng);
        Self::with_network(net, actions, NONLINEAR_NOISE_STD)
    }

    pub fn with_network(net: Mlp<f64>, actions: Vec<DVector<f64>>, noise_std: f64) -> Result<Self> {
        if net.output_dim() != 1 {
            return Err(param("reward network must have a scalar output"));
        }
        if actions.is_empty() || actions.iter().any(|a| a.len() != net.input_dim()) {
            return Err(input("actions must be non-empty and match the network input"));
        }
        let table = TabularEnv::new(actions, |a| net.forward(a)[0], noise_std);
        Ok(Self { net, table })
    }

    pub fn network(&self) -> &Mlp<f64> {
        &self.net
    }

    pub fn actions(&self) -> &[DVector<f64>] {
        &self.table.actions
    }
}

impl BanditEnv for NeuralEnv {
    fn name(&self) -> &str {
        "neural"
    }

    fn dim(&self) -> usize {
        self.net.input_dim()
    }

    fn feature_bound(&self) -> f64 {
        1.0
    }

    fn action_set(&mut self, _t: usize) -> Result<ActionSet> {
        Ok(ActionSet::finite(self.table.actions.clone()))
    }

    fn mean_reward(&self, _t: usize, choice: &Choice) -> Result<f64> {
        Ok(self.table.means[index_of(choice, self.table.actions.len())?])
    }

    fn optimal_value(&self, _t: usize) -> Result<f64> {
        Ok(self.table.best)
    }

    fn feedback(&mut self, _t: usize, choice: &Choice, rng: &mut dyn RngCore) -> Result<Feedback> {
        self.table.feedback(choice, rng)
    }
}

/// Rewards `f(a) = 0.01 · ‖Θᵀa‖²` with standard normal `Θ`; actions on the unit sphere.
#[derive(Debug, Clone)]
pub struct QuadraticEnv {
    theta: DMatrix<f64>,
    table: TabularEnv,
}

pub fn quadratic_reward(theta: &DMatrix<f64>, a: &DVector<f64>) -> f64 {
    0.01 * theta.tr_mul(a).norm_squared()
}

impl QuadraticEnv {
    pub fn new<R: Rng + ?Sized>(d: usize, n_actions: usize, rng: &mut R) -> Result<Self> {
        if d == 0 || n_actions == 0 {
            return Err(param("quadratic env needs d ≥ 1 and at least one action"));
        }
        let theta = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(rng));
        let actions = sphere_points(d, n_actions, rng);
        Self::with_matrix(theta, actions, NONLINEAR_NOISE_STD)
    }

    pub fn with_matrix(theta: DMatrix<f64>, actions: Vec<DVector<f64>>, noise_std: f64) -> Result<Self> {
        if actions.is_empty() || actions.iter().any(|a| a.len() != theta.nrows()) {
            return Err(input("actions must be non-empty and match Θ"));
        }
        let table = TabularEnv::new(actions, |a| quadratic_reward(&theta, a), noise_std);
        Ok(Self { theta, table })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.theta
    }

    pub fn actions(&self) -> &[DVector<f64>] {
        &self.table.actions
    }
}

impl BanditEnv for QuadraticEnv {
    fn name(&self) -> &str {
        "quadratic"
    }

    fn dim(&self) -> usize {
        self.theta.nrows()
    }

    fn feature_bound(&self) -> f64 {
        1.0
    }

    fn action_set(&mut self, _t: usize) -> Result<ActionSet> {
        Ok(ActionSet::finite(self.table.actions.clone()))
    }

    fn mean_reward(&self, _t: usize, choice: &Choice) -> Result<f64> {
        Ok(self.table.means[index_of(choice, self.table.actions.len())?])
    }

    fn optimal_value(&self, _t: usize) -> Result<f64> {
        Ok(self.table.best)
    }

    fn feedback(&mut self, _t: usize, choice: &Choice, rng: &mut dyn RngCore) -> Result<Feedback> {
        self.table.feedback(choice, rng)
    }
}

pub const PUBLISH: usize = 0;
pub const BLOCK: usize = 1;

pub const BLOCK_REWARD: f64 = 0.5;
pub const PUBLISH_FREE_REWARD: f64 = 1.0;
pub const PUBLISH_HATE_REWARD: f64 = -0.5;

pub fn moderation_reward(label: Label, action: usize) -> f64 {
    match (action, label) {
        (BLOCK, _) => BLOCK_REWARD,
        (_, Label::Free) => PUBLISH_FREE_REWARD,
        (_, Label::Hate) => PUBLISH_HATE_REWARD,
    }
}

/// Features for one post: `u = (x/‖x‖, 1)/√2` placed in the block of the action,
/// so a linear model over them learns one head per action.
pub fn moderation_features(embedding: &DVector<f64>) -> Vec<DVector<f64>> {
    let k = embedding.len() + 1;
    let norm = embedding.norm();
    let mut u = DVector::zeros(k);
    if norm > 0.0 {
        u.rows_mut(0, k - 1).copy_from(&(embedding / norm));
    }
    u[k - 1] = 1.0;
    u /= 2f64.sqrt();
    (0..2)
        .map(|a| {
            let mut phi = DVector::zeros(2 * k);
            phi.rows_mut(a * k, k).copy_from(&u);
            phi
        })
        .collect()
}

/// Publish/block decisions over a stream of labelled post embeddings.
#[derive(Debug, Clone)]
pub struct ModerationEnv {
    dim: usize,
    posts: Vec<(DVector<f64>, Label)>,
    reveal_on_block: bool,
}

impl ModerationEnv {
    pub fn from_posts(dim: usize, posts: &[Post]) -> Result<Self> {
        let posts = posts
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if p.embedding.len() != dim {
                    return Err(input(format!("post {i} has dimension {}, expected {dim}", p.embedding.len())));
                }
                Ok((DVector::from_iterator(dim, p.embedding.iter().map(|&x| x as f64)), p.label))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dim, posts, reveal_on_block: false })
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let file = hbe::read_path(path)?;
        Self::from_posts(file.dim, &file.posts)
    }

    /// Reveals the label (the publish reward) even when the agent blocks.
    pub fn with_reveal(mut self, reveal: bool) -> Self {
        self.reveal_on_block = reveal;
        self
    }

    /// Reorders posts with a seeded Fisher–Yates shuffle.
    pub fn shuffled<R: Rng + ?Sized>(mut self, rng: &mut R) -> Self {
        use rand::seq::SliceRandom;
        self.posts.shuffle(rng);
        self
    }

    pub fn embedding_dim(&self) -> usize {
        self.dim
    }

    pub fn n_posts(&self) -> usize {
        self.posts.len()
    }

    pub fn label(&self, t: usize) -> Result<Label> {
        self.post(t).map(|p| p.1)
    }

    fn post(&self, t: usize) -> Result<&(DVector<f64>, Label)> {
        self.posts
            .get(t)
            .ok_or_else(|| input(format!("step {t} beyond the {} available posts", self.posts.len())))
    }
}

impl BanditEnv for ModerationEnv {
    fn name(&self) -> &str {
        "moderation"
    }

    fn dim(&self) -> usize {
        2 * (self.dim + 1)
    }

    fn feature_bound(&self) -> f64 {
        1.0
    }

    fn horizon_limit(&self) -> Option<usize> {
        Some(self.posts.len())
    }

    fn action_set(&mut self, t: usize) -> Result<ActionSet> {
        let (x, _) = self.post(t)?;
        Ok(ActionSet::Finite { features: moderation_features(x), context: Some(x.clone()) })
    }

    fn mean_reward(&self, t: usize, choice: &Choice) -> Result<f64> {
        let a = index_of(choice, 2)?;
        Ok(moderation_reward(self.post(t)?.1, a))
    }

    fn optimal_value(&self, t: usize) -> Result<f64> {
        Ok(match self.post(t)?.1 {
            Label::Free => PUBLISH_FREE_REWARD,
            Label::Hate => BLOCK_REWARD,
        })
    }

    fn feedback(&mut self, t: usize, choice: &Choice, _rng: &mut dyn RngCore) -> Result<Feedback> {
        let a = index_of(choice, 2)?;
        let label = self.post(t)?.1;
        let revealed = if a == BLOCK && self.reveal_on_block {
            vec![(PUBLISH, moderation_reward(label, PUBLISH))]
        } else {
            Vec::new()
        };
        Ok(Feedback { reward: moderation_reward(label, a), revealed })
    }
}

/// Per-run moderation outcome counts.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ModerationTally {
    pub hate: usize,
    pub hate_blocked: usize,
    pub free: usize,
    pub free_published: usize,
}

impl ModerationTally {
    pub fn record(&mut self, label: Label, action: usize) {
        match label {
            Label::Hate => {
                self.hate += 1;
                self.hate_blocked += (action == BLOCK) as usize;
            }
            Label::Free => {
                self.free += 1;
                self.free_published += (action == PUBLISH) as usize;
            }
        }
    }

    pub fn total(&self) -> usize {
        self.hate + self.free
    }

    /// Fraction of hate posts blocked.
    pub fn hate_block_rate(&self) -> f64 {
        ratio(self.hate_blocked, self.hate)
    }

    /// Fraction of posts published, i.e. routed to human review.
    pub fn publish_fraction(&self) -> f64 {
        ratio(self.free_published + (self.hate - self.hate_blocked), self.total())
    }

    /// Fraction of posts that received the label-appropriate action.
    pub fn decision_accuracy(&self) -> f64 {
        ratio(self.hate_blocked + self.free_published, self.total())
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}
