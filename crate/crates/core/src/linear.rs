//! Closed-form incremental posterior approximation for linear rewards.
//!
//! The state carries the ridge precision `Σ_t⁻¹ = λI + Σ φφᵀ`, its inverse
//! `Σ_t` (maintained by Sherman–Morrison), the posterior mean `μ_t` and the
//! `d × M` factor `A_t` whose outer product tracks `Σ_t`. One observation
//! `(φ, y, z)` updates everything in `O(d² + dM)`:
//!
//! ```text
//! Σ_t   = Σ_{t-1} − Σ_{t-1}φφᵀΣ_{t-1} / (1 + φᵀΣ_{t-1}φ)
//! μ_t   = Σ_t (Σ_{t-1}⁻¹ μ_{t-1} + φ y)
//! A_t   = Σ_t (Σ_{t-1}⁻¹ A_{t-1} + φ zᵀ)
//! ```

use std::io::{Read, Write};

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;

use crate::distributions::{sample_perturbation, DistributionKind, IndexVector};
use crate::error::{input, param, Error, Result};
use crate::scalar::Scalar;

/// Default number of updates between dense refreshes of `Σ_t`.
pub const REFACTOR_INTERVAL: u64 = 1000;

const FEATURE_NORM_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorState<T: Scalar> {
    d: usize,
    m: usize,
    prec: DMatrix<T>,
    cov: DMatrix<T>,
    factor: DMatrix<T>,
    mean: DVector<T>,
    t: u64,
    lambda: T,
    feature_bound: T,
    refactor_every: u64,
}

/// Clipped confidence interval `[L_t, U_t] ⊆ [-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceBound<T> {
    pub lower: T,
    pub upper: T,
}

impl<T: Scalar> PosteriorState<T> {
    /// Prior state: `Σ₀ = I/λ`, `μ₀ = 0`, `A₀ = Z₀/√λ` with the rows of `Z₀`
    /// drawn from the perturbation law.
    pub fn init<R: Rng + ?Sized>(
        d: usize,
        m: usize,
        lambda: T,
        perturbation: DistributionKind,
        rng: &mut R,
    ) -> Result<Self> {
        if d == 0 {
            return Err(param("feature dimension d must be at least 1"));
        }
        perturbation.validate(m)?;
        let mut z0 = DMatrix::<T>::zeros(d, m);
        for i in 0..d {
            let row = sample_perturbation::<T, R>(perturbation, m, rng)?.index;
            z0.row_mut(i).copy_from(&row.as_vector().transpose());
        }
        Self::from_prior(lambda, z0)
    }

    /// Prior state built from an explicit `d × M` matrix `Z₀`.
    pub fn from_prior(lambda: T, z0: DMatrix<T>) -> Result<Self> {
        if !(lambda > T::zero()) || !lambda.is_finite_value() {
            return Err(param(format!("lambda must be positive, got {lambda}")));
        }
        let (d, m) = z0.shape();
        if d == 0 {
            return Err(param("feature dimension d must be at least 1"));
        }
        let factor = z0 / lambda.sqrt();
        Ok(Self {
            d,
            m,
            prec: DMatrix::identity(d, d) * lambda,
            cov: DMatrix::identity(d, d) / lambda,
            factor,
            mean: DVector::zeros(d),
            t: 0,
            lambda,
            feature_bound: T::one(),
            refactor_every: REFACTOR_INTERVAL,
        })
    }

    /// Raises (or lowers) the admissible feature norm; the default is the unit ball.
    pub fn with_feature_bound(mut self, bound: T) -> Self {
        self.feature_bound = bound;
        self
    }

    /// Sets the dense-refresh interval; `0` disables refreshes.
    pub fn with_refactor_interval(mut self, every: u64) -> Self {
        self.refactor_every = every;
        self
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn index_dim(&self) -> usize {
        self.m
    }

    pub fn step(&self) -> u64 {
        self.t
    }

    pub fn lambda(&self) -> T {
        self.lambda
    }

    pub fn feature_bound(&self) -> T {
        self.feature_bound
    }

    /// `Σ_t⁻¹`.
    pub fn precision(&self) -> &DMatrix<T> {
        &self.prec
    }

    /// `Σ_t`.
    pub fn covariance(&self) -> &DMatrix<T> {
        &self.cov
    }

    /// `A_t`.
    pub fn factor(&self) -> &DMatrix<T> {
        &self.factor
    }

    /// `μ_t`.
    pub fn mean(&self) -> &DVector<T> {
        &self.mean
    }

    pub fn set_factor(&mut self, factor: DMatrix<T>) -> Result<()> {
        if factor.shape() != (self.d, self.m) {
            return Err(input(format!(
                "factor must be {}x{}, got {:?}",
                self.d,
                self.m,
                factor.shape()
            )));
        }
        self.factor = factor;
        Ok(())
    }

    fn check_feature(&self, phi: &DVector<T>) -> Result<()> {
        if phi.len() != self.d {
            return Err(input(format!("feature has length {}, expected {}", phi.len(), self.d)));
        }
        if phi.iter().any(|x| !x.is_finite_value()) {
            return Err(input("feature contains non-finite entries"));
        }
        Ok(())
    }

    /// Absorbs one observation `(φ, y, z)`.
    pub fn update(&mut self, phi: &DVector<T>, y: T, z: &IndexVector<T>) -> Result<()> {
        self.check_feature(phi)?;
        let norm = phi.norm();
        if norm.as_f64() > self.feature_bound.as_f64() + FEATURE_NORM_SLACK {
            return Err(Error::Contract(format!(
                "feature norm {norm} exceeds bound {}",
                self.feature_bound
            )));
        }
        if !y.is_finite_value() {
            return Err(input(format!("reward must be finite, got {y}")));
        }
        if z.dim() != self.m {
            return Err(input(format!("perturbation has length {}, expected {}", z.dim(), self.m)));
        }

        let cov_phi = &self.cov * phi;
        let denom = T::one() + phi.dot(&cov_phi);
        // Σ_t φ = Σ_{t-1} φ / (1 + φᵀ Σ_{t-1} φ)
        let gain = &cov_phi / denom;
        self.cov.ger(-T::one(), &gain, &cov_phi, T::one());

        // Σ_t Σ_{t-1}⁻¹ = I − Σ_t φ φᵀ, so both recursions reduce to rank-one corrections.
        let innovation = y - phi.dot(&self.mean);
        self.mean.axpy(innovation, &gain, T::one());

        let residual = z.as_vector() - self.factor.tr_mul(phi);
        self.factor.ger(T::one(), &gain, &residual, T::one());

        self.prec.ger(T::one(), phi, phi, T::one());
        self.t += 1;
        if self.refactor_every > 0 && self.t % self.refactor_every == 0 {
            self.refactor()?;
        }
        Ok(())
    }

    /// Recomputes `Σ_t` densely from `Σ_t⁻¹` and re-symmetrizes both.
    pub fn refactor(&mut self) -> Result<()> {
        symmetrize(&mut self.prec);
        let chol = Cholesky::new(self.prec.clone())
            .ok_or_else(|| Error::Numerical("precision lost positive definiteness".into()))?;
        self.cov = chol.inverse();
        symmetrize(&mut self.cov);
        Ok(())
    }

    /// `β_t = √λ + √(2 log(1/δ) + log det(Σ_t⁻¹) − d log λ)`.
    pub fn beta(&self, delta: f64) -> Result<T> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(param(format!("delta must lie in (0, 1), got {delta}")));
        }
        let chol = Cholesky::new(self.prec.clone())
            .ok_or_else(|| Error::Numerical("precision is not positive definite".into()))?;
        let l = chol.l_dirty();
        let log_det: f64 = (0..self.d).map(|i| 2.0 * l[(i, i)].as_f64().ln()).sum();
        let inner = 2.0 * (1.0 / delta).ln() + log_det - self.d as f64 * self.lambda.as_f64().ln();
        Ok(T::of(self.lambda.as_f64().sqrt() + inner.max(0.0).sqrt()))
    }

    /// The sampled parameter `β A ζ + μ`; its inner product with `φ` is the index value.
    pub fn sampled_parameter(&self, zeta: &IndexVector<T>, beta: T) -> Result<DVector<T>> {
        if zeta.dim() != self.m {
            return Err(input(format!("index has length {}, expected {}", zeta.dim(), self.m)));
        }
        let mut theta = self.mean.clone();
        theta.gemv(beta, &self.factor, zeta.as_vector(), T::one());
        Ok(theta)
    }

    /// `⟨φ, β A ζ + μ⟩`.
    pub fn index_value(&self, phi: &DVector<T>, zeta: &IndexVector<T>, beta: T) -> Result<T> {
        if phi.len() != self.d {
            return Err(input(format!("feature has length {}, expected {}", phi.len(), self.d)));
        }
        Ok(phi.dot(&self.sampled_parameter(zeta, beta)?))
    }

    /// `‖φ‖_Σ = √(φᵀ Σ_t φ)`.
    pub fn feature_std(&self, phi: &DVector<T>) -> Result<T> {
        if phi.len() != self.d {
            return Err(input(format!("feature has length {}, expected {}", phi.len(), self.d)));
        }
        Ok(phi.dot(&(&self.cov * phi)).max(T::zero()).sqrt())
    }

    /// Unclipped interval `⟨μ, φ⟩ ± β ρ ‖φ‖_Σ`.
    pub fn raw_bounds(&self, phi: &DVector<T>, beta: T, rho: T) -> Result<(T, T)> {
        if rho < T::zero() {
            return Err(param("rho must be non-negative"));
        }
        let center = phi.dot(&self.mean);
        let width = beta * rho * self.feature_std(phi)?;
        Ok((center - width, center + width))
    }

    /// Clipped confidence bounds `L_t = (c − w) ∨ −1`, `U_t = (c + w) ∧ 1`.
    pub fn confidence_bounds(&self, phi: &DVector<T>, beta: T, rho: T) -> Result<ConfidenceBound<T>> {
        let (lo, hi) = self.raw_bounds(phi, beta, rho)?;
        Ok(ConfidenceBound {
            lower: lo.max(-T::one()),
            upper: hi.min(T::one()),
        })
    }

    /// Writes the little-endian snapshot record:
    /// `d: u32, M: u32, t: u64, λ: f64`, then row-major `f64` arrays
    /// `Σ⁻¹ (d×d)`, `Σ (d×d)`, `A (d×M)`, `μ (d)`.
    pub fn write_snapshot<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(&(self.d as u32).to_le_bytes())?;
        out.write_all(&(self.m as u32).to_le_bytes())?;
        out.write_all(&self.t.to_le_bytes())?;
        out.write_all(&self.lambda.as_f64().to_le_bytes())?;
        for mat in [&self.prec, &self.cov, &self.factor] {
            for i in 0..mat.nrows() {
                for j in 0..mat.ncols() {
                    out.write_all(&mat[(i, j)].as_f64().to_le_bytes())?;
                }
            }
        }
        for x in self.mean.iter() {
            out.write_all(&x.as_f64().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_snapshot_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_snapshot(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Restores a state written by [`PosteriorState::write_snapshot`].
    /// The feature bound resets to the unit ball.
    pub fn read_snapshot<R: Read>(mut src: R) -> Result<Self> {
        let mut offset = 0u64;
        let mut take = |n: usize, what: &str| -> Result<Vec<u8>> {
            let mut buf = vec![0u8; n];
            src.read_exact(&mut buf).map_err(|_| Error::Format {
                offset,
                message: format!("truncated snapshot while reading {what}"),
            })?;
            offset += n as u64;
            Ok(buf)
        };
        let d = u32::from_le_bytes(take(4, "d")?.try_into().unwrap()) as usize;
        let m = u32::from_le_bytes(take(4, "M")?.try_into().unwrap()) as usize;
        let t = u64::from_le_bytes(take(8, "t")?.try_into().unwrap());
        let lambda = f64::from_le_bytes(take(8, "lambda")?.try_into().unwrap());
        if d == 0 || !(lambda > 0.0) {
            return Err(Error::Data(format!("invalid snapshot header d={d} lambda={lambda}")));
        }
        let mut read_mat = |rows: usize, cols: usize, what: &str| -> Result<DMatrix<T>> {
            let bytes = take(rows * cols * 8, what)?;
            let vals: Vec<T> = bytes
                .chunks_exact(8)
                .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())))
                .collect();
            Ok(DMatrix::from_row_slice(rows, cols, &vals))
        };
        let prec = read_mat(d, d, "precision")?;
        let cov = read_mat(d, d, "covariance")?;
        let factor = read_mat(d, m, "factor")?;
        let mean = read_mat(d, 1, "mean")?.column(0).into_owned();
        Ok(Self {
            d,
            m,
            prec,
            cov,
            factor,
            mean,
            t,
            lambda: T::of(lambda),
            feature_bound: T::one(),
            refactor_every: REFACTOR_INTERVAL,
        })
    }
}

fn symmetrize<T: Scalar>(mat: &mut DMatrix<T>) {
    let half = T::of(0.5);
    let sym = (&*mat + mat.transpose()) * half;
    *mat = sym;
}

/// Batch ridge solution used to cross-check the recursion.
///
/// Solves the stationary equations directly with an LU factorization:
/// `Σ_T = (λI + Σ φφᵀ)⁻¹`, `μ_T = Σ_T Σ φ y`, `A_T = Σ_T (√λ Z₀ + Σ φ zᵀ)`.
pub fn ridge_oracle<T: Scalar>(
    observations: &[(DVector<T>, T, IndexVector<T>)],
    z0: &DMatrix<T>,
    lambda: T,
) -> Result<(DVector<T>, DMatrix<T>, DMatrix<T>)> {
    let (d, m) = z0.shape();
    let mut gram = DMatrix::<T>::identity(d, d) * lambda;
    let mut xy = DVector::<T>::zeros(d);
    let mut xz = z0 * lambda.sqrt();
    for (phi, y, z) in observations {
        if phi.len() != d || z.dim() != m {
            return Err(input("observation dimensions do not match Z0"));
        }
        gram += phi * phi.transpose();
        xy += phi * *y;
        xz += phi * z.as_vector().transpose();
    }
    let cov = gram
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("ridge system is singular".into()))?;
    let mean = &cov * xy;
    let factor = &cov * xz;
    Ok((mean, cov, factor))
}

/// Smallest `M` satisfying the index-dimension condition of the good-event lemma:
/// `M ≥ 320 (d log((1 + (48/s_min)√(s_max² + T))/δ) + log(1 + T/s_min²))`.
///
/// `δ = 1` is admitted so the formula can be evaluated at its boundary.
pub fn min_index_dim(d: usize, horizon: u64, s_min_sq: f64, s_max_sq: f64, delta: f64) -> Result<u64> {
    if d == 0 {
        return Err(param("d must be at least 1"));
    }
    if horizon == 0 {
        return Err(param("horizon T must be at least 1"));
    }
    if !(s_min_sq > 0.0) || !(s_max_sq > 0.0) || !s_min_sq.is_finite() || !s_max_sq.is_finite() {
        return Err(param("s_min^2 and s_max^2 must be positive and finite"));
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(param(format!("delta must lie in (0, 1], got {delta}")));
    }
    let t = horizon as f64;
    let s_min = s_min_sq.sqrt();
    let inner = (1.0 + (48.0 / s_min) * (s_max_sq + t).sqrt()) / delta;
    let rhs = 320.0 * (d as f64 * inner.ln() + (1.0 + t / s_min_sq).ln());
    let ceil = rhs.ceil();
    if !ceil.is_finite() || ceil >= u64::MAX as f64 {
        return Err(param("index-dimension bound overflows u64"));
    }
    Ok(ceil.max(1.0) as u64)
}
