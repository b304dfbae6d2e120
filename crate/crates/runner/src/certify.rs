//! Certification suites: Monte-Carlo checks of the index laws and of the good event,
//! reported as `CertRow`s.

use std::path::Path;
use std::str::FromStr;

use hyperagent_core::agents::AgentConfig;
use hyperagent_core::distributions::{optimism_floor, DistributionKind};
use hyperagent_core::linear::PosteriorState;
use hyperagent_core::validator::{
    anti_concentration_test, beta_tail_check, exact_moments, good_event_check, isotropy_check, sphere_projection_ks,
    track_good_event, CertRow, GoodEventRun, DEFAULT_EPSILON,
};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Result, RunnerError};
use crate::output::write_csv;

pub const CERT_FILE: &str = "certification.csv";

/// Draws per Monte-Carlo frequency.
pub const N_DRAWS: usize = 1_000_000;

/// Standard errors allowed below a floor.
pub const FLOOR_BAND: f64 = 5.0;

/// Per-entry standard errors allowed in the isotropy test; covers the ~50 entries tested at M = 8.
pub const ISOTROPY_BAND: f64 = 5.0;

pub const GOOD_EVENT_GRID: [usize; 4] = [32, 64, 128, 256];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Distributions,
    GoodEvent,
    AntiConcentration,
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "distributions" => Ok(Suite::Distributions),
            "goodevent" => Ok(Suite::GoodEvent),
            "anticoncentration" => Ok(Suite::AntiConcentration),
            other => Err(format!("unknown suite {other:?}; expected distributions, goodevent or anticoncentration")),
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniformly random unit vector.
pub fn random_unit<R: Rng + ?Sized>(m: usize, rng: &mut R) -> DVector<f64> {
    loop {
        let g = DVector::<f64>::from_fn(m, |_, _| rng.sample(StandardNormal));
        let n = g.norm();
        if n > 1e-12 {
            return g / n;
        }
    }
}

pub const ISOTROPY_KINDS: [DistributionKind; 5] = [
    DistributionKind::Gaussian,
    DistributionKind::Sphere,
    DistributionKind::Cube,
    DistributionKind::Coord,
    DistributionKind::Sparse(2),
];

pub fn distributions_suite(seed: u64) -> Result<Vec<CertRow>> {
    const M: usize = 8;
    let rows: Vec<Result<Vec<CertRow>>> = ISOTROPY_KINDS
        .par_iter()
        .enumerate()
        .map(|(i, &kind)| {
            let rep = isotropy_check(kind, M, N_DRAWS, ISOTROPY_BAND, &mut rng(seed + i as u64))?;
            let mut rows = vec![CertRow::at_most(
                "isotropy_max_z",
                format!("kind={kind},M={M}"),
                N_DRAWS as u64,
                rep.max_cov_z.max(rep.max_mean_z),
                ISOTROPY_BAND,
                ISOTROPY_BAND,
            )];
            if let Some((mean_dev, cov_dev)) = exact_moments(kind, M) {
                rows.push(CertRow::at_most(
                    "isotropy_exact",
                    format!("kind={kind},M={M}"),
                    0,
                    mean_dev.max(cov_dev),
                    1e-12,
                    0.0,
                ));
            }
            Ok(rows)
        })
        .collect();
    let mut out = Vec::new();
    for r in rows {
        out.extend(r?);
    }
    let ks = sphere_projection_ks(M, N_DRAWS, &mut rng(seed + 100))?;
    out.push(CertRow::at_most("sphere_projection_ks", format!("M={M}"), N_DRAWS as u64, ks, 0.005, 0.005));
    let floor = optimism_floor(DistributionKind::Sphere, 2).expect("sphere floor");
    for (j, d) in [2usize, 10, 100].into_iter().enumerate() {
        let p = beta_tail_check(d, N_DRAWS, &mut rng(seed + 200 + j as u64))?;
        out.push(CertRow::at_least("beta_tail", format!("d={d}"), N_DRAWS as u64, p, floor, FLOOR_BAND));
    }
    Ok(out)
}

/// `(kind, M, v)` cases of the anti-concentration suite: a seeded random direction for the
/// continuous laws and the cube, `e₁` for coord.
pub fn anti_concentration_cases(seed: u64) -> Vec<(DistributionKind, usize, DVector<f64>, &'static str)> {
    let mut r = rng(seed);
    let mut cases = Vec::new();
    for kind in [DistributionKind::Gaussian, DistributionKind::Sphere, DistributionKind::Cube] {
        cases.push((kind, 16, random_unit(16, &mut r), "random"));
    }
    for m in [2usize, 8, 32] {
        let mut e1 = DVector::zeros(m);
        e1[0] = 1.0;
        cases.push((DistributionKind::Coord, m, e1, "e1"));
    }
    cases
}

pub fn anti_concentration_suite(seed: u64) -> Result<Vec<CertRow>> {
    let cases = anti_concentration_cases(seed);
    cases
        .par_iter()
        .enumerate()
        .map(|(i, (kind, m, v, vname))| {
            let p = anti_concentration_test(*kind, *m, v, N_DRAWS, &mut rng(seed + 1 + i as u64))?;
            let floor = optimism_floor(*kind, *m).expect("floor exists for tested kinds");
            Ok(CertRow::at_least(
                "anti_concentration",
                format!("kind={kind},M={m},v={vname}"),
                N_DRAWS as u64,
                p,
                floor,
                FLOOR_BAND,
            ))
        })
        .collect()
}

/// Configuration used for good-event tracking: Gaussian reference, sphere perturbation.
pub fn good_event_agent(m: usize, lambda: f64) -> AgentConfig {
    AgentConfig {
        reference_kind: DistributionKind::Gaussian,
        update_kind: DistributionKind::Gaussian,
        perturbation_kind: DistributionKind::Sphere,
        index_dim: m,
        lambda,
        ..AgentConfig::default()
    }
}

/// Fraction of seeds whose sandwich held at every step, for each `M` in `grid`.
pub fn good_event_pass_rates(d: usize, horizon: usize, n_seeds: u64, grid: &[usize], seed: u64) -> Result<Vec<f64>> {
    grid.iter()
        .map(|&m| {
            let run = GoodEventRun { d, n_actions: 100, horizon, agent: good_event_agent(m, 1.0), epsilon: DEFAULT_EPSILON };
            let held: Vec<Result<bool>> = (0..n_seeds)
                .into_par_iter()
                .map(|s| Ok(track_good_event(&run, seed.wrapping_add(s))?.held_throughout()))
                .collect();
            let mut passes = 0usize;
            for h in held {
                passes += h? as usize;
            }
            Ok(passes as f64 / n_seeds as f64)
        })
        .collect()
}

/// Pass frequency of the sandwich at `t = 0` (prior factor only).
pub fn prior_good_event_rate(d: usize, m: usize, n_seeds: u64, seed: u64) -> Result<f64> {
    let mut passes = 0usize;
    for s in 0..n_seeds {
        let state = PosteriorState::<f64>::init(d, m, 1.0, DistributionKind::Sphere, &mut rng(seed.wrapping_add(s)))?;
        passes += good_event_check(&state, DEFAULT_EPSILON)?.pass as usize;
    }
    Ok(passes as f64 / n_seeds as f64)
}

pub fn good_event_suite(seed: u64) -> Result<Vec<CertRow>> {
    const D: usize = 10;
    const T: usize = 1000;
    const SEEDS: u64 = 100;
    let rates = good_event_pass_rates(D, T, SEEDS, &GOOD_EVENT_GRID, seed)?;
    let mut out = Vec::new();
    for (k, (&m, &rate)) in GOOD_EVENT_GRID.iter().zip(&rates).enumerate() {
        let params = format!("d={D},T={T},M={m}");
        if k > 0 {
            out.push(CertRow::at_least("good_event_monotone", params, SEEDS, rate, rates[k - 1], 0.0));
        } else {
            out.push(CertRow::at_least("good_event_rate", params, SEEDS, rate, 0.0, 0.0));
        }
    }
    let last = *GOOD_EVENT_GRID.last().expect("grid");
    out.push(CertRow::at_least(
        "good_event_rate",
        format!("d={D},T={T},M={last}"),
        SEEDS,
        *rates.last().expect("rates"),
        0.9,
        0.0,
    ));
    let p0 = prior_good_event_rate(D, 256, 200, seed)?;
    out.push(CertRow::at_least("good_event_prior", format!("d={D},M=256,t=0"), 200, p0, 0.95, 0.0));
    Ok(out)
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<Vec<CertRow>> {
    match suite {
        Suite::Distributions => distributions_suite(seed),
        Suite::GoodEvent => good_event_suite(seed),
        Suite::AntiConcentration => anti_concentration_suite(seed),
    }
}

/// Runs a suite and writes `certification.csv` under `out_dir`.
pub fn certify(suite: Suite, out_dir: &Path, seed: u64) -> Result<Vec<CertRow>> {
    std::fs::create_dir_all(out_dir).map_err(RunnerError::io(out_dir))?;
    let rows = run_suite(suite, seed)?;
    write_csv(&out_dir.join(CERT_FILE), &rows)?;
    Ok(rows)
}

/// Error if any row failed.
pub fn require_pass(rows: &[CertRow]) -> Result<()> {
    match rows.iter().filter(|r| !r.pass).count() {
        0 => Ok(()),
        failed => Err(RunnerError::Certification(failed)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_parse() {
        assert_eq!("goodevent".parse::<Suite>(), Ok(Suite::GoodEvent));
        assert!("good_event".parse::<Suite>().is_err());
    }

    #[test]
    fn random_unit_has_unit_norm() {
        let v = random_unit(16, &mut rng(3));
        assert!((v.norm() - 1.0).abs() < 1e-12);
    }
}
