//! Nonlinear hypermodel: a trainable MLP feature map with a linear index head
//! per action, frozen prior heads, a replay buffer that stores each datum's
//! perturbation, and mini-batch gradient training on the perturbed loss.

use std::collections::VecDeque;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::agents::AgentConfig;
use crate::distributions::{finite_support, sample_perturbation, sample_reference, DistributionKind, IndexVector};
use crate::error::{input, param, Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T: Scalar> {
    /// `out × in`.
    pub weight: DMatrix<T>,
    pub bias: DVector<T>,
}

/// Fully connected ReLU network. With `relu_output` false the last layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T: Scalar> {
    input_dim: usize,
    layers: Vec<Dense<T>>,
    relu_output: bool,
}

impl<T: Scalar> Mlp<T> {
    /// He-initialized weights `N(0, 2/fan_in)`, zero biases. `sizes` lists the
    /// input width followed by every layer width.
    pub fn random<R: Rng + ?Sized>(sizes: &[usize], relu_output: bool, rng: &mut R) -> Result<Self> {
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(param(format!("layer sizes must be non-empty and positive, got {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .map(|w| {
                let normal = Normal::new(0.0, (2.0 / w[0] as f64).sqrt()).unwrap();
                Dense {
                    weight: DMatrix::from_fn(w[1], w[0], |_, _| T::of(normal.sample(rng))),
                    bias: DVector::zeros(w[1]),
                }
            })
            .collect();
        Ok(Self { input_dim: sizes[0], layers, relu_output })
    }

    /// The identity map on `dim` inputs (no layers).
    pub fn identity(dim: usize) -> Self {
        Self { input_dim: dim, layers: Vec::new(), relu_output: false }
    }

    pub fn from_layers(input_dim: usize, layers: Vec<Dense<T>>, relu_output: bool) -> Result<Self> {
        let mut width = input_dim;
        for (i, l) in layers.iter().enumerate() {
            if l.weight.ncols() != width || l.bias.len() != l.weight.nrows() {
                return Err(input(format!("layer {i} shape does not chain")));
            }
            width = l.weight.nrows();
        }
        Ok(Self { input_dim, layers, relu_output })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, |l| l.weight.nrows())
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn relu_output(&self) -> bool {
        self.relu_output
    }

    fn is_relu(&self, i: usize) -> bool {
        i + 1 < self.layers.len() || self.relu_output
    }

    pub fn forward(&self, x: &DVector<T>) -> DVector<T> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let mut next = &l.bias + &l.weight * &h;
            if self.is_relu(i) {
                next.apply(|v| *v = v.max(T::zero()));
            }
            h = next;
        }
        h
    }

    /// Activations of every layer, input first.
    fn forward_cached(&self, x: &DVector<T>) -> Vec<DVector<T>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for (i, l) in self.layers.iter().enumerate() {
            let mut next = &l.bias + &l.weight * acts.last().unwrap();
            if self.is_relu(i) {
                next.apply(|v| *v = v.max(T::zero()));
            }
            acts.push(next);
        }
        acts
    }

    /// Accumulates parameter gradients for one input given `∂L/∂output`.
    fn backward(&self, acts: &[DVector<T>], grad_out: DVector<T>, grads: &mut [(DMatrix<T>, DVector<T>)]) {
        let mut delta = grad_out;
        for i in (0..self.layers.len()).rev() {
            if self.is_relu(i) {
                delta.zip_apply(&acts[i + 1], |d, a| {
                    if a <= T::zero() {
                        *d = T::zero();
                    }
                });
            }
            grads[i].0.ger(T::one(), &delta, &acts[i], T::one());
            grads[i].1 += &delta;
            if i > 0 {
                delta = self.layers[i].weight.tr_mul(&delta);
            }
        }
    }
}

/// Linear index head `(A, b)` with `A` of shape `d_feat × M`.
#[derive(Debug, Clone, PartialEq)]
pub struct Head<T: Scalar> {
    pub a: DMatrix<T>,
    pub b: DVector<T>,
}

impl<T: Scalar> Head<T> {
    pub fn zeros(d_feat: usize, m: usize) -> Self {
        Self { a: DMatrix::zeros(d_feat, m), b: DVector::zeros(d_feat) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypermodel<T: Scalar> {
    extractor: Mlp<T>,
    heads: Vec<Head<T>>,
    prior: Vec<Head<T>>,
    prior_scale: T,
    m: usize,
}

impl<T: Scalar> Hypermodel<T> {
    /// Learnable heads start at zero; prior head rows are perturbation draws
    /// scaled by `1/√λ`, prior offsets are zero.
    pub fn new<R: Rng + ?Sized>(
        extractor: Mlp<T>,
        n_heads: usize,
        m: usize,
        prior_kind: DistributionKind,
        lambda: f64,
        prior_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(param(format!("lambda must be positive, got {lambda}")));
        }
        prior_kind.validate(m)?;
        let d_feat = extractor.output_dim();
        let scale = T::of(1.0 / lambda.sqrt());
        let mut prior = Vec::with_capacity(n_heads);
        for _ in 0..n_heads {
            let mut head = Head::zeros(d_feat, m);
            for i in 0..d_feat {
                let z = sample_perturbation::<T, R>(prior_kind, m, rng)?.index;
                head.a.row_mut(i).copy_from(&(z.as_vector() * scale).transpose());
            }
            prior.push(head);
        }
        let heads = (0..n_heads).map(|_| Head::zeros(d_feat, m)).collect();
        Self::from_parts(extractor, heads, prior, T::of(prior_scale))
    }

    pub fn from_parts(extractor: Mlp<T>, heads: Vec<Head<T>>, prior: Vec<Head<T>>, prior_scale: T) -> Result<Self> {
        if heads.is_empty() || heads.len() != prior.len() {
            return Err(input("need at least one head and a prior for each"));
        }
        let d_feat = extractor.output_dim();
        let m = heads[0].a.ncols();
        if m == 0 {
            return Err(param("index dimension must be at least 1"));
        }
        for h in heads.iter().chain(&prior) {
            if h.a.shape() != (d_feat, m) || h.b.len() != d_feat {
                return Err(input("head shapes do not match the extractor output"));
            }
        }
        Ok(Self { extractor, heads, prior, prior_scale, m })
    }

    pub fn index_dim(&self) -> usize {
        self.m
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn input_dim(&self) -> usize {
        self.extractor.input_dim()
    }

    pub fn extractor(&self) -> &Mlp<T> {
        &self.extractor
    }

    pub fn heads(&self) -> &[Head<T>] {
        &self.heads
    }

    pub fn heads_mut(&mut self) -> &mut [Head<T>] {
        &mut self.heads
    }

    pub fn prior(&self) -> &[Head<T>] {
        &self.prior
    }

    pub fn prior_scale(&self) -> T {
        self.prior_scale
    }

    fn effective(&self, a: usize) -> (DMatrix<T>, DVector<T>) {
        let s = self.prior_scale;
        (&self.heads[a].a + &self.prior[a].a * s, &self.heads[a].b + &self.prior[a].b * s)
    }

    fn check_input(&self, x: &DVector<T>, zeta: &IndexVector<T>) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(input(format!("input has dimension {}, expected {}", x.len(), self.input_dim())));
        }
        if zeta.dim() != self.m {
            return Err(input(format!("index has dimension {}, expected {}", zeta.dim(), self.m)));
        }
        Ok(())
    }

    /// Value of every head at input `x` under index `ζ`.
    pub fn forward(&self, x: &DVector<T>, zeta: &IndexVector<T>) -> Result<Vec<T>> {
        self.check_input(x, zeta)?;
        let h = self.extractor.forward(x);
        Ok((0..self.heads.len()).map(|a| self.head_value(&h, a, zeta)).collect())
    }

    /// Value of a single head.
    pub fn value(&self, x: &DVector<T>, head: usize, zeta: &IndexVector<T>) -> Result<T> {
        self.check_input(x, zeta)?;
        if head >= self.heads.len() {
            return Err(input(format!("head {head} out of range")));
        }
        Ok(self.head_value(&self.extractor.forward(x), head, zeta))
    }

    fn head_value(&self, h: &DVector<T>, a: usize, zeta: &IndexVector<T>) -> T {
        let s = self.prior_scale;
        let z = zeta.as_vector();
        let learn = self.heads[a].a.tr_mul(h).dot(z) + h.dot(&self.heads[a].b);
        let prior = self.prior[a].a.tr_mul(h).dot(z) + h.dot(&self.prior[a].b);
        learn + prior * s
    }

    /// Squared norm of the learnable heads.
    pub fn head_norm_sq(&self) -> T {
        self.heads
            .iter()
            .fold(T::zero(), |acc, h| acc + h.a.norm_squared() + h.b.norm_squared())
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for l in &mut self.extractor.layers {
            out.push(l.weight.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        for h in &mut self.heads {
            out.push(h.a.as_mut_slice());
            out.push(h.b.as_mut_slice());
        }
        out
    }

    /// Learnable parameters flattened in a fixed order.
    pub fn flat_params(&self) -> Vec<T> {
        let mut out = Vec::new();
        for l in &self.extractor.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(l.bias.as_slice());
        }
        for h in &self.heads {
            out.extend_from_slice(h.a.as_slice());
            out.extend_from_slice(h.b.as_slice());
        }
        out
    }

    pub fn set_flat_params(&mut self, values: &[T]) -> Result<()> {
        let mut slices = self.param_slices_mut();
        let total: usize = slices.iter().map(|s| s.len()).sum();
        if total != values.len() {
            return Err(input(format!("expected {total} parameters, got {}", values.len())));
        }
        let mut at = 0;
        for s in slices.iter_mut() {
            let n = s.len();
            s.copy_from_slice(&values[at..at + n]);
            at += n;
        }
        Ok(())
    }
}

/// One observation: model input, head (action) id, reward and its stored perturbation.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition<T: Scalar> {
    pub input: DVector<T>,
    pub head: usize,
    pub reward: T,
    pub z: IndexVector<T>,
}

/// FIFO buffer of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T: Scalar> {
    capacity: usize,
    entries: VecDeque<Transition<T>>,
}

impl<T: Scalar> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(param("buffer capacity must be at least 1"));
        }
        Ok(Self { capacity, entries: VecDeque::with_capacity(capacity.min(1 << 16)) })
    }

    pub fn push(&mut self, t: Transition<T>) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition<T>> {
        self.entries.iter()
    }

    pub fn get(&self, i: usize) -> Option<&Transition<T>> {
        self.entries.get(i)
    }

    /// A mini-batch of distinct entries; the whole buffer when `size ≥ len`.
    pub fn sample_batch<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Vec<&Transition<T>> {
        if size >= self.entries.len() {
            return self.entries.iter().collect();
        }
        rand::seq::index::sample(rng, self.entries.len(), size)
            .into_iter()
            .map(|i| &self.entries[i])
            .collect()
    }
}

/// Weighted set of update indices `ξ`.
#[derive(Debug, Clone)]
pub struct IndexSet<T: Scalar> {
    points: Vec<IndexVector<T>>,
    weights: Vec<T>,
}

impl<T: Scalar> IndexSet<T> {
    /// Equal weights `1/n`.
    pub fn sampled(points: Vec<IndexVector<T>>) -> Result<Self> {
        if points.is_empty() {
            return Err(input("at least one update index is required"));
        }
        let w = T::one() / T::of(points.len() as f64);
        let weights = vec![w; points.len()];
        Ok(Self { points, weights })
    }

    /// The exact support of a discrete update law.
    pub fn exact(kind: DistributionKind, m: usize) -> Result<Self> {
        let atoms = finite_support::<T>(kind, m)
            .ok_or_else(|| Error::Unsupported(format!("{kind} with M={m} has no enumerable support")))?;
        let (points, weights) = atoms.into_iter().map(|(v, p)| (v, T::of(p))).unzip();
        Ok(Self { points, weights })
    }

    pub fn draw<R: Rng + ?Sized>(kind: DistributionKind, m: usize, n: usize, rng: &mut R) -> Result<Self> {
        let points = (0..n)
            .map(|_| sample_reference::<T, R>(kind, m, rng))
            .collect::<Result<Vec<_>>>()?;
        Self::sampled(points)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Gradients with the same layout as the learnable parameters.
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar> {
    pub extractor: Vec<(DMatrix<T>, DVector<T>)>,
    pub heads: Vec<(DMatrix<T>, DVector<T>)>,
}

impl<T: Scalar> Gradients<T> {
    fn zeros_like(model: &Hypermodel<T>) -> Self {
        Self {
            extractor: model
                .extractor
                .layers
                .iter()
                .map(|l| (DMatrix::zeros(l.weight.nrows(), l.weight.ncols()), DVector::zeros(l.bias.len())))
                .collect(),
            heads: model
                .heads
                .iter()
                .map(|h| (DMatrix::zeros(h.a.nrows(), h.a.ncols()), DVector::zeros(h.b.len())))
                .collect(),
        }
    }

    fn slices(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for (w, b) in self.extractor.iter().chain(&self.heads) {
            out.push(w.as_slice());
            out.push(b.as_slice());
        }
        out
    }

    pub fn flat(&self) -> Vec<T> {
        self.slices().concat()
    }
}

struct LossSpec<'a, T: Scalar> {
    batch: &'a [&'a Transition<T>],
    xis: &'a IndexSet<T>,
    sigma: T,
    lambda: T,
    total: usize,
}

fn check_batch<T: Scalar>(model: &Hypermodel<T>, spec: &LossSpec<'_, T>) -> Result<()> {
    if spec.batch.is_empty() {
        return Err(input("loss needs a non-empty batch"));
    }
    if spec.xis.is_empty() {
        return Err(input("loss needs at least one update index"));
    }
    if spec.total == 0 {
        return Err(input("total buffer size must be positive"));
    }
    for t in spec.batch {
        model.check_input(&t.input, &t.z)?;
        if t.head >= model.n_heads() {
            return Err(input(format!("transition head {} out of range", t.head)));
        }
    }
    if spec.xis.points.iter().any(|x| x.dim() != model.m) {
        return Err(input("update index dimension mismatch"));
    }
    Ok(())
}

/// Loss value and, optionally, its gradient with respect to the learnable parameters.
fn evaluate<T: Scalar>(
    model: &Hypermodel<T>,
    spec: &LossSpec<'_, T>,
    want_grad: bool,
) -> Result<(T, Option<Gradients<T>>)> {
    check_batch(model, spec)?;
    let n_batch = T::of(spec.batch.len() as f64);
    let two = T::of(2.0);
    let mut grads = want_grad.then(|| Gradients::zeros_like(model));
    let mut data_loss = T::zero();
    for tr in spec.batch {
        let acts = model.extractor.forward_cached(&tr.input);
        let h = acts.last().unwrap();
        let (a_eff, b_eff) = model.effective(tr.head);
        // Residual under ξ is gᵀξ + e.
        let g = a_eff.tr_mul(h) - tr.z.as_vector() * spec.sigma;
        let e = h.dot(&b_eff) - tr.reward;
        let mut u = DVector::<T>::zeros(model.m);
        let mut c = T::zero();
        for (xi, &w) in spec.xis.points.iter().zip(&spec.xis.weights) {
            let r = g.dot(xi.as_vector()) + e;
            data_loss += w * r * r;
            if want_grad {
                let k = two * w * r / n_batch;
                u.axpy(k, xi.as_vector(), T::one());
                c += k;
            }
        }
        if let Some(gr) = grads.as_mut() {
            let head = &mut gr.heads[tr.head];
            head.0.ger(T::one(), h, &u, T::one());
            head.1.axpy(c, h, T::one());
            if !model.extractor.layers.is_empty() {
                let grad_h = &a_eff * &u + &b_eff * c;
                model.extractor.backward(&acts, grad_h, &mut gr.extractor);
            }
        }
    }
    let ridge = spec.lambda / T::of(spec.total as f64);
    let loss = data_loss / n_batch + ridge * model.head_norm_sq();
    if let Some(gr) = grads.as_mut() {
        for (g, h) in gr.heads.iter_mut().zip(&model.heads) {
            g.0 += &h.a * (two * ridge);
            g.1.axpy(two * ridge, &h.b, T::one());
        }
    }
    Ok((loss, grads))
}

/// Perturbed loss over a batch with Monte-Carlo update indices.
pub fn sampled_loss<T: Scalar>(
    model: &Hypermodel<T>,
    batch: &[&Transition<T>],
    xi_samples: &[IndexVector<T>],
    sigma: T,
    lambda: T,
    total_buffer_size: usize,
) -> Result<T> {
    let xis = IndexSet::sampled(xi_samples.to_vec())?;
    let spec = LossSpec { batch, xis: &xis, sigma, lambda, total: total_buffer_size };
    Ok(evaluate(model, &spec, false)?.0)
}

/// Perturbed loss with the expectation over `ξ` taken exactly on its support.
pub fn exact_loss<T: Scalar>(
    model: &Hypermodel<T>,
    batch: &[&Transition<T>],
    update_kind: DistributionKind,
    sigma: T,
    lambda: T,
    total_buffer_size: usize,
) -> Result<T> {
    let xis = IndexSet::exact(update_kind, model.m)?;
    let spec = LossSpec { batch, xis: &xis, sigma, lambda, total: total_buffer_size };
    Ok(evaluate(model, &spec, false)?.0)
}

/// Loss and analytic gradient for an explicit weighted index set.
pub fn loss_and_gradient<T: Scalar>(
    model: &Hypermodel<T>,
    batch: &[&Transition<T>],
    xis: &IndexSet<T>,
    sigma: T,
    lambda: T,
    total_buffer_size: usize,
) -> Result<(T, Gradients<T>)> {
    let spec = LossSpec { batch, xis, sigma, lambda, total: total_buffer_size };
    let (loss, grads) = evaluate(model, &spec, true)?;
    Ok((loss, grads.expect("gradient requested")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

/// Plain SGD or Adam (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
#[derive(Debug, Clone)]
pub struct Optimizer<T: Scalar> {
    kind: OptimizerKind,
    lr: T,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    steps: i32,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(param(format!("step size must be positive, got {lr}")));
        }
        Ok(Self { kind, lr: T::of(lr), first: Vec::new(), second: Vec::new(), steps: 0 })
    }

    pub fn apply(&mut self, model: &mut Hypermodel<T>, grads: &Gradients<T>) {
        let gs = grads.slices();
        let mut ps = model.param_slices_mut();
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in ps.iter_mut().zip(&gs) {
                    p.iter_mut().zip(g.iter()).for_each(|(p, &g)| *p -= self.lr * g);
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (T::of(0.9), T::of(0.999), T::of(1e-8));
                if self.first.is_empty() {
                    self.first = gs.iter().map(|g| vec![T::zero(); g.len()]).collect();
                    self.second = self.first.clone();
                }
                self.steps += 1;
                let c1 = T::one() - b1.powi(self.steps);
                let c2 = T::one() - b2.powi(self.steps);
                for (k, (p, g)) in ps.iter_mut().zip(&gs).enumerate() {
                    for i in 0..p.len() {
                        let m = &mut self.first[k][i];
                        let v = &mut self.second[k][i];
                        *m = b1 * *m + (T::one() - b1) * g[i];
                        *v = b2 * *v + (T::one() - b2) * g[i] * g[i];
                        p[i] -= self.lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Optimizer state plus the cached exact support of the update law.
#[derive(Debug, Clone)]
pub struct Trainer<T: Scalar> {
    pub optimizer: Optimizer<T>,
    exact: Option<IndexSet<T>>,
    steps: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: &AgentConfig) -> Result<Self> {
        let exact = if cfg.exact_expectation {
            IndexSet::exact(cfg.update_kind, cfg.index_dim).ok()
        } else {
            None
        };
        Ok(Self { optimizer: Optimizer::new(cfg.optimizer, cfg.step_size)?, exact, steps: 0 })
    }

    /// Whether losses use the exact expectation over `ξ`.
    pub fn is_exact(&self) -> bool {
        self.exact.is_some()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
}

/// Runs `cfg.update_steps` mini-batch gradient steps.
pub fn sgd_step<T: Scalar, R: Rng + ?Sized>(
    model: &mut Hypermodel<T>,
    buffer: &ReplayBuffer<T>,
    cfg: &AgentConfig,
    trainer: &mut Trainer<T>,
    rng: &mut R,
) -> Result<()> {
    if buffer.is_empty() {
        return Err(input("cannot train on an empty buffer"));
    }
    let sigma = T::of(cfg.sigma);
    let lambda = T::of(cfg.lambda);
    for _ in 0..cfg.update_steps {
        let batch = buffer.sample_batch(cfg.batch_size, rng);
        let drawn;
        let xis = match &trainer.exact {
            Some(set) => set,
            None => {
                drawn = IndexSet::draw(cfg.update_kind, cfg.index_dim, cfg.xi_batch, rng)?;
                &drawn
            }
        };
        let (loss, grads) = loss_and_gradient(model, &batch, xis, sigma, lambda, buffer.len())?;
        let grad_finite = grads.slices().iter().all(|s| s.iter().all(|g| g.is_finite_value()));
        if !loss.is_finite_value() || !grad_finite {
            return Err(Error::Training {
                step: trainer.steps,
                loss: loss.as_f64(),
                detail: format!(
                    "batch of {} from buffer of {}, {} update indices, gradient finite: {grad_finite}",
                    batch.len(),
                    buffer.len(),
                    xis.len()
                ),
            });
        }
        trainer.optimizer.apply(model, &grads);
        trainer.steps += 1;
    }
    Ok(())
}

/// Checkpoint magic and version.
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializes a model as named little-endian `f32` tensors.
///
/// ```text
/// "HMCK" | u32 version | u32 tensor count
/// per tensor: u32 name length | name (UTF-8) | u32 rank | rank × u64 dims | f32 data, row-major
/// ```
///
/// Tensors: `meta.index_dim`, `meta.prior_scale`, `meta.relu_output`,
/// `extractor.input_dim` (rank 0), then `extractor.<i>.weight` `[out, in]`,
/// `extractor.<i>.bias` `[out]`, `head.<a>.A` `[d_feat, M]`, `head.<a>.b`,
/// `prior.<a>.A`, `prior.<a>.b`.
pub fn write_checkpoint<T: Scalar, W: Write>(model: &Hypermodel<T>, mut out: W) -> Result<()> {
    let mut tensors: Vec<(String, Vec<u64>, Vec<f32>)> = vec![
        ("meta.index_dim".into(), vec![], vec![model.m as f32]),
        ("meta.prior_scale".into(), vec![], vec![model.prior_scale.as_f64() as f32]),
        ("meta.relu_output".into(), vec![], vec![model.extractor.relu_output as u8 as f32]),
        ("extractor.input_dim".into(), vec![], vec![model.extractor.input_dim as f32]),
    ];
    let mat = |m: &DMatrix<T>| -> (Vec<u64>, Vec<f32>) {
        let data = (0..m.nrows())
            .flat_map(|i| (0..m.ncols()).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)].as_f64() as f32)
            .collect();
        (vec![m.nrows() as u64, m.ncols() as u64], data)
    };
    let vec_t = |v: &DVector<T>| -> (Vec<u64>, Vec<f32>) {
        (vec![v.len() as u64], v.iter().map(|x| x.as_f64() as f32).collect())
    };
    for (i, l) in model.extractor.layers.iter().enumerate() {
        let (d, w) = mat(&l.weight);
        tensors.push((format!("extractor.{i}.weight"), d, w));
        let (d, b) = vec_t(&l.bias);
        tensors.push((format!("extractor.{i}.bias"), d, b));
    }
    for (group, heads) in [("head", &model.heads), ("prior", &model.prior)] {
        for (a, h) in heads.iter().enumerate() {
            let (d, w) = mat(&h.a);
            tensors.push((format!("{group}.{a}.A"), d, w));
            let (d, b) = vec_t(&h.b);
            tensors.push((format!("{group}.{a}.b"), d, b));
        }
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, dims, data) in &tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for x in data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::Format {
                offset: self.at as u64,
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut src: R) -> Result<Hypermodel<T>> {
    let mut bytes = Vec::new();
    src.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, at: 0 };
    if cur.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format { offset: 0, message: "missing HMCK magic".into() });
    }
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format { offset: 4, message: format!("unsupported version {version}") });
    }
    let count = cur.u32("tensor count")?;
    let mut tensors = std::collections::BTreeMap::new();
    for _ in 0..count {
        let len = cur.u32("name length")? as usize;
        let start = cur.at;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|_| Error::Format { offset: start as u64, message: "name is not UTF-8".into() })?
            .to_string();
        let rank = cur.u32("rank")? as usize;
        let dims = (0..rank).map(|_| cur.u64("dims")).collect::<Result<Vec<_>>>()?;
        let n: u64 = dims.iter().product();
        let data: Vec<f32> = cur
            .take(n as usize * 4, &name)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(name, (dims, data));
    }
    if cur.at != bytes.len() {
        return Err(Error::Format { offset: cur.at as u64, message: "trailing bytes".into() });
    }
    let missing = |name: &str| Error::Data(format!("checkpoint lacks tensor {name}"));
    let scalar = |name: &str| -> Result<f32> {
        let (_, d) = tensors.get(name).ok_or_else(|| missing(name))?;
        d.first().copied().ok_or_else(|| missing(name))
    };
    let matrix = |name: &str| -> Result<DMatrix<T>> {
        let (dims, d) = tensors.get(name).ok_or_else(|| missing(name))?;
        if dims.len() != 2 {
            return Err(Error::Data(format!("{name} must have rank 2")));
        }
        let (r, c) = (dims[0] as usize, dims[1] as usize);
        Ok(DMatrix::from_row_iterator(r, c, d.iter().map(|&x| T::of(x as f64))))
    };
    let vector = |name: &str| -> Result<DVector<T>> {
        let (dims, d) = tensors.get(name).ok_or_else(|| missing(name))?;
        if dims.len() != 1 {
            return Err(Error::Data(format!("{name} must have rank 1")));
        }
        Ok(DVector::from_iterator(d.len(), d.iter().map(|&x| T::of(x as f64))))
    };
    let input_dim = scalar("extractor.input_dim")? as usize;
    let relu_output = scalar("meta.relu_output")? != 0.0;
    let prior_scale = T::of(scalar("meta.prior_scale")? as f64);
    let mut layers = Vec::new();
    while tensors.contains_key(&format!("extractor.{}.weight", layers.len())) {
        let i = layers.len();
        layers.push(Dense {
            weight: matrix(&format!("extractor.{i}.weight"))?,
            bias: vector(&format!("extractor.{i}.bias"))?,
        });
    }
    let mut heads = Vec::new();
    let mut prior = Vec::new();
    while tensors.contains_key(&format!("head.{}.A", heads.len())) {
        let a = heads.len();
        heads.push(Head { a: matrix(&format!("head.{a}.A"))?, b: vector(&format!("head.{a}.b"))? });
        prior.push(Head { a: matrix(&format!("prior.{a}.A"))?, b: vector(&format!("prior.{a}.b"))? });
    }
    let extractor = Mlp::from_layers(input_dim, layers, relu_output).map_err(|e| Error::Data(e.to_string()))?;
    let model = Hypermodel::from_parts(extractor, heads, prior, prior_scale).map_err(|e| Error::Data(e.to_string()))?;
    if model.m != scalar("meta.index_dim")? as usize {
        return Err(Error::Data("index dimension disagrees with head shapes".into()));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear::PosteriorState;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn randn(n: usize, r: &mut ChaCha8Rng) -> DVector<f64> {
        DVector::from_fn(n, |_, _| r.sample(StandardNormal))
    }

    fn random_model(r: &mut ChaCha8Rng, input: usize, hidden: &[usize], heads: usize, m: usize) -> Hypermodel<f64> {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        let ext = if hidden.is_empty() { Mlp::identity(input) } else { Mlp::random(&sizes, true, r).unwrap() };
        let mut model = Hypermodel::new(ext, heads, m, DistributionKind::Sphere, 1.0, 0.7, r).unwrap();
        let n = model.flat_params().len();
        let p: Vec<f64> = (0..n).map(|_| 0.5 * r.sample::<f64, _>(StandardNormal)).collect();
        model.set_flat_params(&p).unwrap();
        model
    }

    fn random_batch(r: &mut ChaCha8Rng, input: usize, heads: usize, m: usize, n: usize) -> Vec<Transition<f64>> {
        (0..n)
            .map(|i| Transition {
                input: randn(input, r),
                head: i % heads,
                reward: r.sample(StandardNormal),
                z: sample_perturbation::<f64, _>(DistributionKind::Sphere, m, r).unwrap().index,
            })
            .collect()
    }

    #[test]
    fn zero_index_and_zero_heads_give_prior_mean() {
        let mut r = rng(1);
        let ext = Mlp::<f64>::random(&[3, 4], true, &mut r).unwrap();
        let mut prior = vec![Head::zeros(4, 2)];
        prior[0].b = DVector::from_vec(vec![1.0, -1.0, 0.5, 2.0]);
        let model = Hypermodel::from_parts(ext.clone(), vec![Head::zeros(4, 2)], prior.clone(), 3.0).unwrap();
        let x = randn(3, &mut r);
        let h = ext.forward(&x);
        let got = model.forward(&x, &IndexVector::zeros(2)).unwrap()[0];
        assert!((got - 3.0 * h.dot(&prior[0].b)).abs() < 1e-12);

        let silent = Hypermodel::from_parts(ext, vec![Head::zeros(4, 2)], prior, 0.0).unwrap();
        let zeta = IndexVector::from_f64(&[0.3, -1.2]);
        assert_eq!(silent.forward(&x, &zeta).unwrap(), vec![0.0]);
    }

    #[test]
    fn identity_extractor_matches_linear_index_value() {
        let mut r = rng(2);
        let mut state = PosteriorState::<f64>::init(4, 3, 1.0, DistributionKind::Sphere, &mut r).unwrap();
        for _ in 0..10 {
            let phi = randn(4, &mut r).normalize() * 0.9;
            let z = sample_perturbation::<f64, _>(DistributionKind::Sphere, 3, &mut r).unwrap().index;
            state.update(&phi, r.sample(StandardNormal), &z).unwrap();
        }
        let head = Head { a: state.factor().clone(), b: state.mean().clone() };
        let model = Hypermodel::from_parts(Mlp::identity(4), vec![head], vec![Head::zeros(4, 3)], 1.0).unwrap();
        for _ in 0..20 {
            let phi = randn(4, &mut r);
            let zeta = sample_reference::<f64, _>(DistributionKind::Gaussian, 3, &mut r).unwrap();
            let a = model.forward(&phi, &zeta).unwrap()[0];
            let b = state.index_value(&phi, &zeta, 1.0).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_collapses_for_single_datum() {
        let mut r = rng(3);
        let model = random_model(&mut r, 3, &[], 1, 2);
        let tr = random_batch(&mut r, 3, 1, 2, 1);
        let xi = IndexVector::from_f64(&[0.4, -0.9]);
        let f = model.value(&tr[0].input, 0, &xi).unwrap();
        let got = sampled_loss(&model, &[&tr[0]], &[xi], 0.0, 2.0, 5).unwrap();
        let want = (f - tr[0].reward).powi(2) + 2.0 / 5.0 * model.head_norm_sq();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn perfect_fit_has_zero_loss() {
        let model = Hypermodel::from_parts(
            Mlp::identity(2),
            vec![Head { a: DMatrix::zeros(2, 2), b: DVector::from_vec(vec![1.0, 2.0]) }],
            vec![Head::zeros(2, 2)],
            1.0,
        )
        .unwrap();
        let x = DVector::from_vec(vec![0.5, -0.25]);
        let tr = Transition { input: x.clone(), head: 0, reward: 0.0, z: IndexVector::zeros(2) };
        let xis = vec![IndexVector::from_f64(&[1.0, 0.0]), IndexVector::from_f64(&[0.0, -1.0])];
        assert_eq!(sampled_loss(&model, &[&tr], &xis, 0.0, 0.0, 1).unwrap(), 0.0);
        assert!(sampled_loss(&model, &[], &xis, 0.0, 0.0, 1).is_err());
        assert!(sampled_loss(&model, &[&tr], &[], 0.0, 0.0, 1).is_err());
    }

    #[test]
    fn exact_loss_averages_atoms() {
        let mut r = rng(4);
        let model = random_model(&mut r, 2, &[3], 1, 2);
        let batch = random_batch(&mut r, 2, 1, 2, 3);
        let refs: Vec<&Transition<f64>> = batch.iter().collect();
        let exact = exact_loss(&model, &refs, DistributionKind::Coord, 0.5, 0.1, 10).unwrap();
        let atoms: Vec<IndexVector<f64>> = finite_support(DistributionKind::Coord, 2)
            .unwrap()
            .into_iter()
            .map(|(v, _)| v)
            .collect();
        assert_eq!(atoms.len(), 4);
        let avg = sampled_loss(&model, &refs, &atoms, 0.5, 0.1, 10).unwrap();
        assert!((exact - avg).abs() < 1e-12);
        assert!(matches!(
            exact_loss(&model, &refs, DistributionKind::Gaussian, 0.5, 0.1, 10),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn sigma_term_is_unit_for_unit_z() {
        let model = Hypermodel::<f64>::from_parts(Mlp::identity(3), vec![Head::zeros(3, 4)], vec![Head::zeros(3, 4)], 0.0).unwrap();
        let z = IndexVector::from_f64(&[0.5, 0.5, -0.5, 0.5]);
        let tr = Transition { input: DVector::from_vec(vec![1.0, 0.0, 0.0]), head: 0, reward: 0.0, z };
        for kind in [DistributionKind::Coord, DistributionKind::Cube, DistributionKind::Sparse(2)] {
            let loss = exact_loss(&model, &[&tr], kind, 3.0, 0.0, 1).unwrap();
            assert!((loss - 9.0).abs() < 1e-12, "{kind}: {loss}");
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut r = rng(5);
        for case in 0..10 {
            let model = random_model(&mut r, 3, &[4, 3], 2, 3);
            let batch = random_batch(&mut r, 3, 2, 3, 4);
            let refs: Vec<&Transition<f64>> = batch.iter().collect();
            let xis = IndexSet::draw(DistributionKind::Gaussian, 3, 5, &mut r).unwrap();
            let (_, grads) = loss_and_gradient(&model, &refs, &xis, 0.8, 0.3, 7).unwrap();
            let analytic = grads.flat();
            let p0 = model.flat_params();
            let h = 1e-5;
            let mut probe = model.clone();
            let mut numeric = vec![0.0; p0.len()];
            for i in 0..p0.len() {
                let mut p = p0.clone();
                p[i] += h;
                probe.set_flat_params(&p).unwrap();
                let up = loss_and_gradient(&probe, &refs, &xis, 0.8, 0.3, 7).unwrap().0;
                p[i] -= 2.0 * h;
                probe.set_flat_params(&p).unwrap();
                let down = loss_and_gradient(&probe, &refs, &xis, 0.8, 0.3, 7).unwrap().0;
                numeric[i] = (up - down) / (2.0 * h);
            }
            let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
            assert!(diff <= 1e-4 * scale, "case {case}: {diff} vs {scale}");
        }
    }

    #[test]
    fn buffer_is_fifo() {
        let mut buf = ReplayBuffer::<f64>::new(2).unwrap();
        for i in 0..3 {
            buf.push(Transition { input: DVector::zeros(1), head: i, reward: 0.0, z: IndexVector::zeros(1) });
        }
        assert_eq!(buf.len(), 2);
        assert_eq!(buf.get(0).unwrap().head, 1);
        assert_eq!(buf.sample_batch(10, &mut rng(0)).len(), 2);
        assert_eq!(buf.sample_batch(1, &mut rng(0)).len(), 1);
        assert!(ReplayBuffer::<f64>::new(0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut r = rng(6);
        let model = random_model(&mut r, 3, &[4], 2, 3);
        let mut bytes = Vec::new();
        write_checkpoint(&model, &mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"HMCK");
        let back: Hypermodel<f64> = read_checkpoint(&bytes[..]).unwrap();
        let narrowed: Vec<f64> = model.flat_params().iter().map(|&x| x as f32 as f64).collect();
        assert_eq!(back.flat_params(), narrowed);
        assert_eq!(back.n_heads(), 2);
        assert_eq!(back.index_dim(), 3);
        assert!(matches!(read_checkpoint::<f64, _>(&bytes[..bytes.len() - 3]), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint::<f64, _>(&bad[..]), Err(Error::Format { offset: 0, .. })));
    }
}
