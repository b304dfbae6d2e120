//! Isotropic index distributions used as reference, update and perturbation laws.
//!
//! Every family here is zero-mean with `E[X Xᵀ] = I` at reference scale:
//!
//! | kind       | reference draw                                  | norm        |
//! |------------|--------------------------------------------------|-------------|
//! | `gaussian` | `N(0, I_M)`                                      | random      |
//! | `sphere`   | uniform on the sphere of radius `√M`             | `√M`        |
//! | `cube`     | i.i.d. signs `±1`                                | `√M`        |
//! | `coord`    | `√M · (±e_i)`, uniform over the `2M` atoms       | `√M`        |
//! | `sparse:s` | `√(M/s) · (s-hot mask ⊙ signs)`                  | `√M`        |
//!
//! Perturbation draws are reference draws scaled by `1/√M`, which makes the
//! sphere and cube families unit-norm and `1/√M`-sub-Gaussian.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::scalar::Scalar;

/// Largest number of atoms [`finite_support`] will enumerate.
pub const MAX_SUPPORT_ATOMS: u64 = 1 << 20;

/// Largest index dimension for which the cube law is enumerated.
pub const MAX_CUBE_DIM: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DistributionKind {
    Gaussian,
    Sphere,
    Cube,
    Coord,
    /// `s`-hot signed vectors.
    Sparse(usize),
}

impl DistributionKind {
    pub const ALL_BASIC: [DistributionKind; 4] = [
        DistributionKind::Gaussian,
        DistributionKind::Sphere,
        DistributionKind::Cube,
        DistributionKind::Coord,
    ];

    /// Checks that a draw of dimension `m` is well defined for this kind.
    pub fn validate(self, m: usize) -> Result<()> {
        if m == 0 {
            return Err(param("index dimension M must be at least 1"));
        }
        if let DistributionKind::Sparse(s) = self {
            if s == 0 || s > m {
                return Err(param(format!("sparse:{s} requires 1 <= s <= M = {m}")));
            }
        }
        Ok(())
    }

    /// Whether this kind, used as a perturbation law, is unit-norm and
    /// `1/√M`-sub-Gaussian as required by the good-event analysis.
    pub fn is_perturbation_compliant(self) -> bool {
        matches!(self, DistributionKind::Sphere | DistributionKind::Cube)
    }
}

impl fmt::Display for DistributionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DistributionKind::Gaussian => f.write_str("gaussian"),
            DistributionKind::Sphere => f.write_str("sphere"),
            DistributionKind::Cube => f.write_str("cube"),
            DistributionKind::Coord => f.write_str("coord"),
            DistributionKind::Sparse(s) => write!(f, "sparse:{s}"),
        }
    }
}

impl FromStr for DistributionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(DistributionKind::Gaussian),
            "sphere" => Ok(DistributionKind::Sphere),
            "cube" => Ok(DistributionKind::Cube),
            "coord" => Ok(DistributionKind::Coord),
            other => {
                let s = other
                    .strip_prefix("sparse:")
                    .ok_or_else(|| param(format!("unknown distribution kind `{other}`")))?;
                let s: usize = s
                    .parse()
                    .map_err(|_| param(format!("bad sparsity in `{other}`")))?;
                if s == 0 {
                    return Err(param("sparsity must be positive"));
                }
                Ok(DistributionKind::Sparse(s))
            }
        }
    }
}

impl TryFrom<String> for DistributionKind {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        value.parse()
    }
}

impl From<DistributionKind> for String {
    fn from(kind: DistributionKind) -> Self {
        kind.to_string()
    }
}

/// An `M`-dimensional random index (a draw of ζ, ξ or z).
#[derive(Debug, Clone, PartialEq)]
pub struct IndexVector<T: Scalar>(DVector<T>);

impl<T: Scalar> IndexVector<T> {
    pub fn new(entries: DVector<T>) -> Self {
        Self(entries)
    }

    pub fn zeros(m: usize) -> Self {
        Self(DVector::zeros(m))
    }

    pub fn from_f64(entries: &[f64]) -> Self {
        Self(DVector::from_iterator(entries.len(), entries.iter().map(|&x| T::of(x))))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_vector(&self) -> &DVector<T> {
        &self.0
    }

    pub fn into_inner(self) -> DVector<T> {
        self.0
    }

    pub fn norm(&self) -> T {
        self.0.norm()
    }

    pub fn scaled(&self, factor: T) -> Self {
        Self(&self.0 * factor)
    }
}

/// A perturbation draw together with its compliance flag.
#[derive(Debug, Clone)]
pub struct PerturbationSample<T: Scalar> {
    pub index: IndexVector<T>,
    /// False when the kind is not almost-surely unit-norm.
    pub compliant: bool,
}

fn draw_f64<R: Rng + ?Sized>(kind: DistributionKind, m: usize, rng: &mut R) -> Vec<f64> {
    let mf = m as f64;
    match kind {
        DistributionKind::Gaussian => (0..m).map(|_| StandardNormal.sample(rng)).collect(),
        DistributionKind::Sphere => {
            let mut g: Vec<f64> = (0..m).map(|_| StandardNormal.sample(rng)).collect();
            let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            // A zero Gaussian vector has probability zero; redraw would change the stream.
            let scale = if norm > 0.0 { mf.sqrt() / norm } else { 0.0 };
            g.iter_mut().for_each(|x| *x *= scale);
            if norm == 0.0 {
                g[0] = mf.sqrt();
            }
            g
        }
        DistributionKind::Cube => (0..m)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect(),
        DistributionKind::Coord => {
            let mut v = vec![0.0; m];
            let atom = rng.random_range(0..2 * m);
            v[atom / 2] = if atom % 2 == 0 { mf.sqrt() } else { -mf.sqrt() };
            v
        }
        DistributionKind::Sparse(s) => {
            let mut v = vec![0.0; m];
            let scale = (mf / s as f64).sqrt();
            let mut picked = rand::seq::index::sample(rng, m, s).into_vec();
            picked.sort_unstable();
            for i in picked {
                v[i] = if rng.random::<bool>() { scale } else { -scale };
            }
            v
        }
    }
}

/// One draw at reference scaling.
pub fn sample_reference<T: Scalar, R: Rng + ?Sized>(
    kind: DistributionKind,
    m: usize,
    rng: &mut R,
) -> Result<IndexVector<T>> {
    kind.validate(m)?;
    Ok(IndexVector::from_f64(&draw_f64(kind, m, rng)))
}

/// One draw at perturbation scaling (reference draw times `1/√M`).
pub fn sample_perturbation<T: Scalar, R: Rng + ?Sized>(
    kind: DistributionKind,
    m: usize,
    rng: &mut R,
) -> Result<PerturbationSample<T>> {
    kind.validate(m)?;
    let scale = 1.0 / (m as f64).sqrt();
    let raw: Vec<f64> = draw_f64(kind, m, rng).into_iter().map(|x| x * scale).collect();
    Ok(PerturbationSample {
        index: IndexVector::from_f64(&raw),
        compliant: kind.is_perturbation_compliant(),
    })
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Number of atoms of the discrete support, if the law is discrete and valid.
pub fn support_size(kind: DistributionKind, m: usize) -> Option<u128> {
    kind.validate(m).ok()?;
    match kind {
        DistributionKind::Gaussian | DistributionKind::Sphere => None,
        DistributionKind::Coord => Some(2 * m as u128),
        DistributionKind::Cube => (m < 127).then(|| 1u128 << m),
        DistributionKind::Sparse(s) => Some(binomial(m, s) << s),
    }
}

/// Exact enumeration of a discrete law at reference scale, with atom probabilities.
///
/// Present for `coord`, for `cube` when `M <= 20`, and for `sparse:s` when
/// `C(M, s) · 2^s <= 2^20`. Continuous kinds return `None`.
pub fn finite_support<T: Scalar>(
    kind: DistributionKind,
    m: usize,
) -> Option<Vec<(IndexVector<T>, f64)>> {
    let count = support_size(kind, m)?;
    let mf = m as f64;
    match kind {
        DistributionKind::Coord => {
            let p = 1.0 / (2.0 * mf);
            let mut atoms = Vec::with_capacity(2 * m);
            for i in 0..m {
                for sign in [1.0, -1.0] {
                    let mut v = vec![0.0; m];
                    v[i] = sign * mf.sqrt();
                    atoms.push((IndexVector::from_f64(&v), p));
                }
            }
            Some(atoms)
        }
        DistributionKind::Cube => {
            if m > MAX_CUBE_DIM {
                return None;
            }
            let p = 1.0 / count as f64;
            Some(
                (0..count as u64)
                    .map(|bits| {
                        let v: Vec<f64> = (0..m)
                            .map(|i| if bits >> i & 1 == 0 { 1.0 } else { -1.0 })
                            .collect();
                        (IndexVector::from_f64(&v), p)
                    })
                    .collect(),
            )
        }
        DistributionKind::Sparse(s) => {
            if count > MAX_SUPPORT_ATOMS as u128 {
                return None;
            }
            let p = 1.0 / count as f64;
            let scale = (mf / s as f64).sqrt();
            let mut atoms = Vec::with_capacity(count as usize);
            let mut combo: Vec<usize> = (0..s).collect();
            loop {
                for signs in 0..(1u64 << s) {
                    let mut v = vec![0.0; m];
                    for (j, &i) in combo.iter().enumerate() {
                        v[i] = if signs >> j & 1 == 0 { scale } else { -scale };
                    }
                    atoms.push((IndexVector::from_f64(&v), p));
                }
                // Advance to the next s-combination in lexicographic order.
                let mut j = s;
                while j > 0 && combo[j - 1] == m - s + j - 1 {
                    j -= 1;
                }
                if j == 0 {
                    break;
                }
                combo[j - 1] += 1;
                for k in j..s {
                    combo[k] = combo[k - 1] + 1;
                }
            }
            Some(atoms)
        }
        DistributionKind::Gaussian | DistributionKind::Sphere => None,
    }
}

/// Lower bound on `P(⟨ζ, v⟩ ≥ 1)` over unit vectors `v` for the reference law.
///
/// `None` for `sparse` (no known bound) and for `sphere` below dimension 2.
pub fn optimism_floor(kind: DistributionKind, m: usize) -> Option<f64> {
    use std::f64::consts::{E, PI};
    match kind {
        DistributionKind::Gaussian => Some(1.0 / (4.0 * (E * PI).sqrt())),
        DistributionKind::Sphere if m >= 2 => Some(0.5 - (1.0f64 / 12.0).exp() / (2.0 * PI).sqrt()),
        DistributionKind::Sphere => None,
        DistributionKind::Cube => Some(7.0 / 32.0),
        DistributionKind::Coord if m >= 1 => Some(1.0 / (2.0 * m as f64)),
        DistributionKind::Coord => None,
        DistributionKind::Sparse(_) => None,
    }
}

/// Size of the decision set entering the per-action concentration bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionSetSize {
    Finite(usize),
    Infinite,
}

/// `ρ(P_ζ)` with the explicit tail constants:
/// `ρ₁ = √(2M log(2M/δ))`, `ρ₂ = √M`, `ρ₃ = √(log(2|A|/δ))`.
pub fn rho_coefficient(
    kind: DistributionKind,
    m: usize,
    delta: f64,
    actions: ActionSetSize,
) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(param(format!("delta must lie in (0, 1), got {delta}")));
    }
    if m == 0 {
        return Err(param("index dimension M must be at least 1"));
    }
    let mf = m as f64;
    let rho1 = (2.0 * mf * (2.0 * mf / delta).ln()).sqrt();
    let rho2 = mf.sqrt();
    let rho3 = match actions {
        ActionSetSize::Finite(0) => return Err(param("action set must be non-empty")),
        ActionSetSize::Finite(n) => Some((2.0 * n as f64 / delta).ln().sqrt()),
        ActionSetSize::Infinite => None,
    };
    let with_rho3 = |r: f64| rho3.map_or(r, |r3| r.min(r3));
    Ok(match kind {
        DistributionKind::Gaussian => with_rho3(rho1),
        DistributionKind::Sphere | DistributionKind::Cube => with_rho3(rho2),
        DistributionKind::Coord | DistributionKind::Sparse(_) => rho2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn kind_names_round_trip() {
        for s in ["gaussian", "sphere", "cube", "coord", "sparse:3"] {
            let k: DistributionKind = s.parse().unwrap();
            assert_eq!(k.to_string(), s);
        }
        assert!("sparse:0".parse::<DistributionKind>().is_err());
        assert!("Gaussian".parse::<DistributionKind>().is_err());
        assert!("sparse:x".parse::<DistributionKind>().is_err());
    }

    #[test]
    fn cube_draw_is_signs() {
        let v: IndexVector<f64> = sample_reference(DistributionKind::Cube, 3, &mut rng(1)).unwrap();
        assert!(v.as_vector().iter().all(|x| x.abs() == 1.0));
        assert!((v.norm() - 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn coord_draw_is_scaled_axis() {
        let mut r = rng(2);
        for _ in 0..100 {
            let v: IndexVector<f64> = sample_reference(DistributionKind::Coord, 4, &mut r).unwrap();
            let nz: Vec<f64> = v.as_vector().iter().copied().filter(|x| *x != 0.0).collect();
            assert_eq!(nz.len(), 1);
            assert_eq!(nz[0].abs(), 2.0);
        }
    }

    #[test]
    fn reference_norms_are_sqrt_m() {
        let mut r = rng(3);
        for kind in [
            DistributionKind::Sphere,
            DistributionKind::Cube,
            DistributionKind::Coord,
            DistributionKind::Sparse(3),
        ] {
            for m in [3usize, 7, 64] {
                for _ in 0..50 {
                    let v: IndexVector<f64> = sample_reference(kind, m, &mut r).unwrap();
                    let target = (m as f64).sqrt();
                    let ulp = f64::EPSILON * target;
                    assert!((v.norm() - target).abs() <= 8.0 * ulp, "{kind} m={m}");
                }
            }
        }
    }

    #[test]
    fn perturbation_scaling() {
        let mut r = rng(4);
        let p: PerturbationSample<f64> = sample_perturbation(DistributionKind::Cube, 4, &mut r).unwrap();
        assert!(p.compliant);
        assert!(p.index.as_vector().iter().all(|x| x.abs() == 0.5));
        assert!((p.index.norm() - 1.0).abs() < 1e-15);

        let p: PerturbationSample<f64> = sample_perturbation(DistributionKind::Sphere, 16, &mut r).unwrap();
        assert!(p.compliant);
        assert!((p.index.norm() - 1.0).abs() < 1e-14);

        let p: PerturbationSample<f64> = sample_perturbation(DistributionKind::Gaussian, 8, &mut r).unwrap();
        assert!(!p.compliant);
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let mut r = rng(5);
        assert!(sample_reference::<f64, _>(DistributionKind::Gaussian, 0, &mut r).is_err());
        assert!(sample_reference::<f64, _>(DistributionKind::Sparse(5), 4, &mut r).is_err());
        assert!(sample_perturbation::<f64, _>(DistributionKind::Sparse(0), 4, &mut r).is_err());
    }

    #[test]
    fn equal_seeds_give_identical_streams() {
        for kind in [
            DistributionKind::Gaussian,
            DistributionKind::Sphere,
            DistributionKind::Cube,
            DistributionKind::Coord,
            DistributionKind::Sparse(2),
        ] {
            let (mut a, mut b) = (rng(9), rng(9));
            for _ in 0..20 {
                let x: IndexVector<f64> = sample_reference(kind, 6, &mut a).unwrap();
                let y: IndexVector<f64> = sample_reference(kind, 6, &mut b).unwrap();
                assert_eq!(x, y);
            }
        }
    }

    #[test]
    fn f32_and_f64_draws_agree() {
        let x: IndexVector<f64> = sample_reference(DistributionKind::Sphere, 5, &mut rng(11)).unwrap();
        let y: IndexVector<f32> = sample_reference(DistributionKind::Sphere, 5, &mut rng(11)).unwrap();
        for (a, b) in x.as_vector().iter().zip(y.as_vector().iter()) {
            assert_eq!(*a as f32, *b);
        }
    }

    #[test]
    fn finite_support_small_cases() {
        let coord = finite_support::<f64>(DistributionKind::Coord, 2).unwrap();
        assert_eq!(coord.len(), 4);
        let r2 = 2f64.sqrt();
        let expected = [[r2, 0.0], [-r2, 0.0], [0.0, r2], [0.0, -r2]];
        for ((atom, p), e) in coord.iter().zip(expected.iter()) {
            assert_eq!(*p, 0.25);
            assert_eq!(atom.as_vector().as_slice(), e);
        }

        let cube = finite_support::<f64>(DistributionKind::Cube, 2).unwrap();
        assert_eq!(cube.len(), 4);
        assert!(cube.iter().all(|(_, p)| *p == 0.25));
        let mut seen: Vec<Vec<f64>> = cube.iter().map(|(a, _)| a.as_vector().as_slice().to_vec()).collect();
        seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
        seen.dedup();
        assert_eq!(seen.len(), 4);

        assert!(finite_support::<f64>(DistributionKind::Gaussian, 2).is_none());
        assert!(finite_support::<f64>(DistributionKind::Sphere, 2).is_none());
        assert!(finite_support::<f64>(DistributionKind::Cube, 21).is_none());
        assert!(finite_support::<f64>(DistributionKind::Cube, 20).is_some());
    }

    #[test]
    fn sparse_support_enumeration() {
        let atoms = finite_support::<f64>(DistributionKind::Sparse(2), 5).unwrap();
        assert_eq!(atoms.len(), 10 * 4);
        let total: f64 = atoms.iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-12);
        for (a, _) in &atoms {
            assert_eq!(a.as_vector().iter().filter(|x| **x != 0.0).count(), 2);
        }
        // C(40, 10) * 2^10 is far above the cutoff.
        assert!(finite_support::<f64>(DistributionKind::Sparse(10), 40).is_none());
        assert!(finite_support::<f64>(DistributionKind::Sparse(3), 2).is_none());
    }

    #[test]
    fn exact_moments_of_discrete_laws() {
        for (kind, m) in [
            (DistributionKind::Coord, 5),
            (DistributionKind::Cube, 6),
            (DistributionKind::Sparse(2), 6),
            (DistributionKind::Sparse(1), 3),
        ] {
            let atoms = finite_support::<f64>(kind, m).unwrap();
            let mut mean = DVector::<f64>::zeros(m);
            let mut cov = nalgebra::DMatrix::<f64>::zeros(m, m);
            for (a, p) in &atoms {
                mean += a.as_vector() * *p;
                cov += a.as_vector() * a.as_vector().transpose() * *p;
            }
            assert!(mean.amax() < 1e-15, "{kind}");
            let dev = (cov - nalgebra::DMatrix::identity(m, m)).amax();
            assert!(dev < 1e-13, "{kind}: {dev}");
        }
    }

    #[test]
    fn optimism_floor_values() {
        let g = optimism_floor(DistributionKind::Gaussian, 4).unwrap();
        assert!((g - 0.085_549_570_078).abs() < 1e-11);
        assert_eq!(optimism_floor(DistributionKind::Cube, 9), Some(0.21875));
        assert_eq!(optimism_floor(DistributionKind::Coord, 10), Some(0.05));
        let s = optimism_floor(DistributionKind::Sphere, 8).unwrap();
        assert!((s - 0.066388).abs() < 1e-6);
        assert!(optimism_floor(DistributionKind::Sphere, 1).is_none());
        assert!(optimism_floor(DistributionKind::Sparse(2), 8).is_none());
    }

    #[test]
    fn rho_values() {
        let r = rho_coefficient(DistributionKind::Coord, 16, 0.3, ActionSetSize::Finite(7)).unwrap();
        assert_eq!(r, 4.0);
        let r = rho_coefficient(DistributionKind::Sphere, 4, 0.5, ActionSetSize::Infinite).unwrap();
        assert_eq!(r, 2.0);
        // Independently evaluated: min(sqrt(128 ln 2560), sqrt(ln 4000)).
        let r = rho_coefficient(DistributionKind::Gaussian, 64, 0.05, ActionSetSize::Finite(100)).unwrap();
        assert!((r - 2.879_939_172_986).abs() < 1e-9, "{r}");
        assert!(rho_coefficient(DistributionKind::Gaussian, 4, 1.0, ActionSetSize::Infinite).is_err());
        assert!(rho_coefficient(DistributionKind::Gaussian, 4, 0.0, ActionSetSize::Infinite).is_err());
    }
}
