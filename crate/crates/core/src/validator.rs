//! Monte-Carlo certification: good-event tracking for the linear factor,
//! isotropy and anti-concentration of the index laws, and the optimism and
//! reasonableness frequencies of linear runs.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::Serialize;
use statrs::distribution::{Beta as BetaLaw, ContinuousCDF};

use crate::agents::{argmax_lowest, AgentConfig, BetaMode, LinearHyperAgent, Agent};
use crate::distributions::{finite_support, rho_coefficient, sample_reference, ActionSetSize, DistributionKind};
use crate::envs::{ActionSet, BanditEnv, Choice, FiniteLinearEnv};
use crate::error::{input, param, Error, Result};
use crate::linear::PosteriorState;

/// Default half-width of the spectral band.
pub const DEFAULT_EPSILON: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GoodEventCheck {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub pass: bool,
}

/// Extreme eigenvalues of `Σ^{-1/2} A Aᵀ Σ^{-1/2}` and whether both lie in `[1−ε, 1+ε]`.
pub fn good_event_check(state: &PosteriorState<f64>, epsilon: f64) -> Result<GoodEventCheck> {
    let eig = state.covariance().clone().symmetric_eigen();
    let floor = 1e-12 * eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    if eig.eigenvalues.iter().any(|&l| !(l > floor)) {
        return Err(Error::Numerical("covariance is not positive definite".into()));
    }
    let inv_sqrt = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|l| 1.0 / l.sqrt()));
    let root = &eig.eigenvectors * DMatrix::from_diagonal(&inv_sqrt) * eig.eigenvectors.transpose();
    let k = &root * state.factor();
    let sandwich = &k * k.transpose();
    let sym = (&sandwich + sandwich.transpose()) * 0.5;
    let vals = sym.symmetric_eigenvalues();
    let lambda_min = vals.min();
    let lambda_max = vals.max();
    let pass = lambda_min >= 1.0 - epsilon && lambda_max <= 1.0 + epsilon;
    Ok(GoodEventCheck { lambda_min, lambda_max, pass })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoodEventReport {
    pub per_step_lambda_min: Vec<f64>,
    pub per_step_lambda_max: Vec<f64>,
    pub violation_steps: Vec<usize>,
    pub epsilon: f64,
}

impl GoodEventReport {
    pub fn new(epsilon: f64) -> Self {
        Self {
            per_step_lambda_min: Vec::new(),
            per_step_lambda_max: Vec::new(),
            violation_steps: Vec::new(),
            epsilon,
        }
    }

    pub fn record(&mut self, state: &PosteriorState<f64>) -> Result<GoodEventCheck> {
        let c = good_event_check(state, self.epsilon)?;
        let t = self.per_step_lambda_min.len();
        self.per_step_lambda_min.push(c.lambda_min);
        self.per_step_lambda_max.push(c.lambda_max);
        if !c.pass {
            self.violation_steps.push(t);
        }
        Ok(c)
    }

    /// True when the sandwich held at every recorded step.
    pub fn held_throughout(&self) -> bool {
        self.violation_steps.is_empty()
    }
}

/// Setup for a good-event tracking run on a finite linear bandit.
#[derive(Debug, Clone)]
pub struct GoodEventRun {
    pub d: usize,
    pub n_actions: usize,
    pub horizon: usize,
    pub agent: AgentConfig,
    pub epsilon: f64,
}

/// Runs a linear HyperAgent and checks the sandwich at `t = 0` and after every update.
pub fn track_good_event(run: &GoodEventRun, seed: u64) -> Result<GoodEventReport> {
    let mut env_rng = ChaCha8Rng::seed_from_u64(seed);
    env_rng.set_stream(1);
    let mut agent_rng = ChaCha8Rng::seed_from_u64(seed);
    agent_rng.set_stream(2);
    let mut env = FiniteLinearEnv::new(run.d, run.n_actions, &mut env_rng)?;
    let mut agent = LinearHyperAgent::new(run.agent.clone(), run.d, env.feature_bound(), &mut agent_rng)?;
    let mut report = GoodEventReport::new(run.epsilon);
    report.record(agent.state())?;
    for t in 0..run.horizon {
        let set = env.action_set(t)?;
        let choice = agent.act(&set, &mut agent_rng)?;
        let fb = env.feedback(t, &choice, &mut env_rng)?;
        agent.observe(&set, &choice, fb.reward, &mut agent_rng)?;
        report.record(agent.state())?;
    }
    Ok(report)
}

fn check_unit(v: &DVector<f64>) -> Result<()> {
    if (v.norm() - 1.0).abs() > 1e-9 {
        return Err(input(format!("v must be a unit vector, norm is {}", v.norm())));
    }
    Ok(())
}

/// Frequency of `⟨ζ, v⟩ ≥ 1` over `n` reference draws.
pub fn anti_concentration_test<R: Rng + ?Sized>(
    kind: DistributionKind,
    m: usize,
    v: &DVector<f64>,
    n: usize,
    rng: &mut R,
) -> Result<f64> {
    if v.len() != m {
        return Err(input(format!("v has dimension {}, expected {m}", v.len())));
    }
    check_unit(v)?;
    if n == 0 {
        return Err(param("n must be at least 1"));
    }
    let mut hits = 0usize;
    for _ in 0..n {
        let z = sample_reference::<f64, R>(kind, m, rng)?;
        hits += (z.as_vector().dot(v) >= 1.0) as usize;
    }
    Ok(hits as f64 / n as f64)
}

/// Exact `P(⟨ζ, v⟩ ≥ 1)` when the law has an enumerable support.
pub fn anti_concentration_exact(kind: DistributionKind, m: usize, v: &DVector<f64>) -> Result<Option<f64>> {
    check_unit(v)?;
    Ok(finite_support::<f64>(kind, m).map(|atoms| {
        atoms
            .iter()
            .filter(|(z, _)| z.as_vector().dot(v) >= 1.0 - 1e-12)
            .map(|(_, p)| p)
            .sum()
    }))
}

/// Frequency of `X > ½ + 1/(2√d)` for `X ~ Beta((d−1)/2, (d−1)/2)`.
pub fn beta_tail_check<R: Rng + ?Sized>(d: usize, n: usize, rng: &mut R) -> Result<f64> {
    if d < 2 {
        return Err(param("beta tail check needs d ≥ 2"));
    }
    if n == 0 {
        return Err(param("n must be at least 1"));
    }
    let a = (d as f64 - 1.0) / 2.0;
    let law = rand_distr::Beta::new(a, a).map_err(|e| param(e.to_string()))?;
    let threshold = beta_tail_threshold(d);
    let hits = (0..n).filter(|_| law.sample(rng) > threshold).count();
    Ok(hits as f64 / n as f64)
}

pub fn beta_tail_threshold(d: usize) -> f64 {
    0.5 + 1.0 / (2.0 * (d as f64).sqrt())
}

/// `P(X > ½ + 1/(2√d))` from the Beta CDF.
pub fn beta_tail_exact(d: usize) -> Result<f64> {
    if d < 2 {
        return Err(param("beta tail needs d ≥ 2"));
    }
    let a = (d as f64 - 1.0) / 2.0;
    let law = BetaLaw::new(a, a).map_err(|e| param(e.to_string()))?;
    Ok(law.sf(beta_tail_threshold(d)))
}

/// Entrywise deviation of sample moments from `(0, I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IsotropyReport {
    pub n: usize,
    /// `max |Ĉ_ij − δ_ij|`.
    pub max_cov_dev: f64,
    /// Largest covariance deviation in units of its standard error.
    pub max_cov_z: f64,
    pub max_mean_dev: f64,
    pub max_mean_z: f64,
    /// Passes when every entry is within `band` standard errors.
    pub band: f64,
}

impl IsotropyReport {
    pub fn pass(&self) -> bool {
        self.max_cov_z <= self.band && self.max_mean_z <= self.band
    }
}

/// Sample second moments of `n` reference draws, with per-entry standard errors.
pub fn isotropy_check<R: Rng + ?Sized>(
    kind: DistributionKind,
    m: usize,
    n: usize,
    band: f64,
    rng: &mut R,
) -> Result<IsotropyReport> {
    if n < 2 {
        return Err(param("isotropy check needs n ≥ 2"));
    }
    const CHUNK: usize = 4096;
    let mut sum = DVector::<f64>::zeros(m);
    let mut sum_sq = DVector::<f64>::zeros(m);
    let mut cross = DMatrix::<f64>::zeros(m, m);
    let mut cross_sq = DMatrix::<f64>::zeros(m, m);
    let mut done = 0;
    while done < n {
        let rows = CHUNK.min(n - done);
        let mut x = DMatrix::<f64>::zeros(rows, m);
        for r in 0..rows {
            let z = sample_reference::<f64, R>(kind, m, rng)?;
            x.row_mut(r).copy_from(&z.as_vector().transpose());
        }
        let x2 = x.component_mul(&x);
        sum += x.row_sum().transpose();
        sum_sq += x2.row_sum().transpose();
        cross.gemm_tr(1.0, &x, &x, 1.0);
        cross_sq.gemm_tr(1.0, &x2, &x2, 1.0);
        done += rows;
    }
    let nf = n as f64;
    let se = |mean: f64, mean_sq: f64| ((mean_sq - mean * mean).max(0.0) / nf).sqrt();
    let z_of = |dev: f64, se: f64| {
        if se > 0.0 {
            dev / se
        } else if dev > 1e-12 {
            f64::INFINITY
        } else {
            0.0
        }
    };
    let mut report = IsotropyReport { n, max_cov_dev: 0.0, max_cov_z: 0.0, max_mean_dev: 0.0, max_mean_z: 0.0, band };
    for i in 0..m {
        let mean = sum[i] / nf;
        let dev = mean.abs();
        report.max_mean_dev = report.max_mean_dev.max(dev);
        report.max_mean_z = report.max_mean_z.max(z_of(dev, se(mean, sum_sq[i] / nf)));
        for j in 0..m {
            let c = cross[(i, j)] / nf;
            let target = if i == j { 1.0 } else { 0.0 };
            let dev = (c - target).abs();
            report.max_cov_dev = report.max_cov_dev.max(dev);
            report.max_cov_z = report.max_cov_z.max(z_of(dev, se(c, cross_sq[(i, j)] / nf)));
        }
    }
    Ok(report)
}

/// Exact first and second moments of an enumerable law, as `(max |mean|, max |C − I|)`.
pub fn exact_moments(kind: DistributionKind, m: usize) -> Option<(f64, f64)> {
    let atoms = finite_support::<f64>(kind, m)?;
    let mut mean = DVector::<f64>::zeros(m);
    let mut cov = DMatrix::<f64>::zeros(m, m);
    for (z, p) in &atoms {
        mean.axpy(*p, z.as_vector(), 1.0);
        cov.ger(*p, z.as_vector(), z.as_vector(), 1.0);
    }
    Some((mean.amax(), (cov - DMatrix::identity(m, m)).amax()))
}

/// Kolmogorov distance between `(⟨ζ, e₁⟩/√M + 1)/2` for Sphere draws and
/// `Beta((M−1)/2, (M−1)/2)`, evaluated at the deciles.
pub fn sphere_projection_ks<R: Rng + ?Sized>(m: usize, n: usize, rng: &mut R) -> Result<f64> {
    if m < 2 || n == 0 {
        return Err(param("sphere projection check needs M ≥ 2 and n ≥ 1"));
    }
    let a = (m as f64 - 1.0) / 2.0;
    let law = BetaLaw::new(a, a).map_err(|e| param(e.to_string()))?;
    let quantiles: Vec<f64> = (1..=10).map(|k| law.inverse_cdf(k as f64 / 11.0)).collect();
    let mut below = vec![0usize; quantiles.len()];
    let root = (m as f64).sqrt();
    for _ in 0..n {
        let z = sample_reference::<f64, R>(DistributionKind::Sphere, m, rng)?;
        let u = (z.as_vector()[0] / root + 1.0) / 2.0;
        for (c, q) in below.iter_mut().zip(&quantiles) {
            *c += (u <= *q) as usize;
        }
    }
    Ok(below
        .iter()
        .zip(&quantiles)
        .map(|(&c, &q)| (c as f64 / n as f64 - law.cdf(q)).abs())
        .fold(0.0, f64::max))
}

/// Per-step outcomes of a theory-mode linear run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DiagnosticsLog {
    /// Chosen action's index value inside the clipped `[L_t, U_t]`.
    pub reasonable_clipped: Vec<bool>,
    /// Same, against the unclipped interval.
    pub reasonable_raw: Vec<bool>,
    /// `max_a f̃_t(a) ≥ max_a f*(a)` with the inflation doubled.
    pub optimistic: Vec<bool>,
}

pub fn frequency(events: &[bool]) -> f64 {
    if events.is_empty() {
        0.0
    } else {
        events.iter().filter(|&&e| e).count() as f64 / events.len() as f64
    }
}

/// Whether `max_a ⟨φ_a, βAζ + μ⟩ ≥ optimum`. Ties count as successes.
pub fn optimism_event(
    state: &PosteriorState<f64>,
    features: &[DVector<f64>],
    zeta: &crate::IndexVector<f64>,
    beta: f64,
    optimum: f64,
) -> Result<bool> {
    let theta = state.sampled_parameter(zeta, beta)?;
    let best = features.iter().map(|f| f.dot(&theta)).fold(f64::NEG_INFINITY, f64::max);
    Ok(best >= optimum - 1e-12 * optimum.abs().max(1.0))
}

/// Runs a linear HyperAgent with `β_t` at level `delta` and records, per step,
/// the reasonableness of the chosen index value and the optimism event under `2β_t`.
pub fn linear_diagnostics(
    env: &mut dyn BanditEnv,
    cfg: &AgentConfig,
    horizon: usize,
    delta: f64,
    env_rng: &mut dyn RngCore,
    agent_rng: &mut dyn RngCore,
) -> Result<DiagnosticsLog> {
    if !env.exposes_truth() {
        return Err(Error::Unsupported("environment does not expose its reward function".into()));
    }
    let mut cfg = cfg.clone();
    cfg.beta_mode = BetaMode::Theoretical { delta };
    cfg.validate()?;
    let mut state = PosteriorState::init(env.dim(), cfg.index_dim, cfg.lambda, cfg.perturbation_kind, agent_rng)?
        .with_feature_bound(env.feature_bound().max(1.0));
    let mut log = DiagnosticsLog::default();
    for t in 0..horizon {
        let set = env.action_set(t)?;
        let ActionSet::Finite { features, .. } = &set else {
            return Err(Error::Unsupported("diagnostics need a finite action set".into()));
        };
        let rho = rho_coefficient(cfg.reference_kind, cfg.index_dim, delta, ActionSetSize::Finite(features.len()))?;
        let zeta = sample_reference::<f64, _>(cfg.reference_kind, cfg.index_dim, agent_rng)?;
        let beta = state.beta(delta)?;
        let theta = state.sampled_parameter(&zeta, beta)?;
        let scores: Vec<f64> = features.iter().map(|f| f.dot(&theta)).collect();
        let a = argmax_lowest(&scores).ok_or_else(|| Error::Numerical("NaN index values".into()))?;
        let value = scores[a];
        let clipped = state.confidence_bounds(&features[a], beta, rho)?;
        let (lo, hi) = state.raw_bounds(&features[a], beta, rho)?;
        log.reasonable_clipped.push(value >= clipped.lower && value <= clipped.upper);
        log.reasonable_raw.push(value >= lo && value <= hi);
        let optimum = env.optimal_value(t)?;
        log.optimistic.push(optimism_event(&state, features, &zeta, 2.0 * beta, optimum)?);

        let choice = Choice::Index(a);
        let fb = env.feedback(t, &choice, env_rng)?;
        crate::agents::hyperagent_observe(&mut state, &features[a], fb.reward, &cfg, agent_rng)?;
    }
    Ok(log)
}

/// One line of a certification report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertRow {
    pub check_name: String,
    pub params: String,
    pub n: u64,
    pub empirical: f64,
    pub bound: f64,
    pub sigma_band: f64,
    pub pass: bool,
}

impl CertRow {
    /// Lower-bound check: passes when `empirical ≥ bound − band·√(p(1−p)/n)`.
    pub fn at_least(name: &str, params: String, n: u64, empirical: f64, bound: f64, band: f64) -> Self {
        let sigma = (bound * (1.0 - bound) / n as f64).max(0.0).sqrt();
        Self {
            check_name: name.to_string(),
            params,
            n,
            empirical,
            bound,
            sigma_band: band * sigma,
            pass: empirical >= bound - band * sigma,
        }
    }

    /// Upper-bound check with an explicit tolerance: passes when `empirical ≤ bound`.
    pub fn at_most(name: &str, params: String, n: u64, empirical: f64, bound: f64, band: f64) -> Self {
        Self {
            check_name: name.to_string(),
            params,
            n,
            empirical,
            bound,
            sigma_band: band,
            pass: empirical <= bound,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::IndexVector;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn square_root_factor_passes_exactly() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let root = cov.clone().cholesky().unwrap().l();
        let prec = cov.clone().try_inverse().unwrap();
        // Build a state whose Σ is `cov` by starting from λ = 1 and a single update.
        let mut state = PosteriorState::from_prior(1.0, DMatrix::zeros(2, 2)).unwrap();
        let _ = prec;
        state.update(&DVector::from_vec(vec![0.6, 0.0]), 0.0, &IndexVector::zeros(2)).unwrap();
        let l = state.covariance().clone().cholesky().unwrap().l();
        state.set_factor(l).unwrap();
        let c = good_event_check(&state, 0.5).unwrap();
        assert!((c.lambda_min - 1.0).abs() < 1e-12 && (c.lambda_max - 1.0).abs() < 1e-12);
        assert!(c.pass);
        let _ = root;

        state.set_factor(DMatrix::zeros(2, 2)).unwrap();
        let c = good_event_check(&state, 0.5).unwrap();
        assert_eq!((c.lambda_min, c.lambda_max, c.pass), (0.0, 0.0, false));
    }

    #[test]
    fn report_records_violations() {
        let mut state = PosteriorState::from_prior(1.0, DMatrix::identity(2, 2)).unwrap();
        let mut rep = GoodEventReport::new(0.5);
        assert!(rep.record(&state).unwrap().pass);
        state.set_factor(DMatrix::zeros(2, 2)).unwrap();
        assert!(!rep.record(&state).unwrap().pass);
        assert_eq!(rep.violation_steps, vec![1]);
        assert!(!rep.held_throughout());
    }

    #[test]
    fn coord_anti_concentration_is_exact() {
        let e1 = DVector::from_fn(4, |i, _| if i == 0 { 1.0 } else { 0.0 });
        assert_eq!(anti_concentration_exact(DistributionKind::Coord, 4, &e1).unwrap(), Some(0.125));
        let n = 100_000;
        let p = anti_concentration_test(DistributionKind::Coord, 4, &e1, n, &mut rng(1)).unwrap();
        assert!((p - 0.125).abs() <= 3.0 * (0.125 * 0.875 / n as f64).sqrt());
        assert!(anti_concentration_test(DistributionKind::Coord, 4, &(e1 * 2.0), 10, &mut rng(1)).is_err());
    }

    #[test]
    fn arcsine_tail() {
        // Beta(½, ½) has CDF (2/π) asin(√x).
        let thr = beta_tail_threshold(2);
        let exact = 1.0 - 2.0 / std::f64::consts::PI * thr.sqrt().asin();
        assert!((beta_tail_exact(2).unwrap() - exact).abs() < 1e-10);
        let n = 200_000;
        let p = beta_tail_check(2, n, &mut rng(2)).unwrap();
        assert!((p - exact).abs() <= 3.0 * (exact * (1.0 - exact) / n as f64).sqrt());
        assert!(p > 0.0664 && p < 0.5);
    }

    #[test]
    fn exact_moments_are_identity() {
        for kind in [DistributionKind::Coord, DistributionKind::Cube, DistributionKind::Sparse(2)] {
            let (mean, cov) = exact_moments(kind, 6).unwrap();
            assert!(mean < 1e-15 && cov < 1e-14, "{kind}");
        }
        assert!(exact_moments(DistributionKind::Gaussian, 6).is_none());
    }

    #[test]
    fn degenerate_optimism_counts_ties() {
        let mut state = PosteriorState::from_prior(1.0, DMatrix::zeros(2, 2)).unwrap();
        state.update(&DVector::from_vec(vec![1.0, 0.0]), 1.0, &IndexVector::zeros(2)).unwrap();
        let feats = vec![DVector::from_vec(vec![1.0, 0.0]), DVector::from_vec(vec![0.0, 1.0])];
        let optimum = state.mean()[0];
        let zeta = IndexVector::from_f64(&[3.0, -1.0]);
        assert!(optimism_event(&state, &feats, &zeta, 2.0, optimum).unwrap());
    }
}
