use hyperagent_core::agents::AgentConfig;
use hyperagent_core::distributions::{finite_support, sample_perturbation, sample_reference};
use hyperagent_core::hypermodel::{
    exact_loss, loss_and_gradient, sampled_loss, sgd_step, Head, Hypermodel, IndexSet, Mlp, ReplayBuffer,
    Trainer, Transition,
};
use hyperagent_core::linear::ridge_oracle;
use hyperagent_core::{DistributionKind, IndexVector};
use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn randn(n: usize, r: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| r.sample(StandardNormal))
}

#[test]
fn zero_steps_leave_model_unchanged() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let cfg = AgentConfig { index_dim: 3, update_steps: 0, hidden: vec![4], ..AgentConfig::default() };
    let ext = Mlp::random(&[2, 4], true, &mut r).unwrap();
    let mut model = Hypermodel::new(ext, 1, 3, DistributionKind::Sphere, 1.0, 1.0, &mut r).unwrap();
    let before = model.clone();
    let mut buf = ReplayBuffer::new(10).unwrap();
    buf.push(Transition { input: randn(2, &mut r), head: 0, reward: 1.0, z: IndexVector::zeros(3) });
    let mut trainer = Trainer::new(&cfg).unwrap();
    sgd_step(&mut model, &buf, &cfg, &mut trainer, &mut r).unwrap();
    assert_eq!(model, before);
    let empty = ReplayBuffer::new(1).unwrap();
    assert!(sgd_step(&mut model, &empty, &cfg, &mut trainer, &mut r).is_err());
}

#[test]
fn single_datum_converges_to_closed_form() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let (d, m, lambda) = (2, 2, 1.0);
    let cfg = AgentConfig {
        index_dim: m,
        update_kind: DistributionKind::Coord,
        perturbation_kind: DistributionKind::Sphere,
        lambda,
        sigma: 1.0,
        update_steps: 10_000,
        step_size: 0.05,
        hidden: vec![],
        ..AgentConfig::default()
    };
    let mut model = Hypermodel::new(Mlp::identity(d), 1, m, cfg.perturbation_kind, lambda, 1.0, &mut r).unwrap();
    // The prior head is Z₀/√λ, so Z₀ = √λ · prior.
    let z0 = &model.prior()[0].a * lambda.sqrt();
    let phi = DVector::from_vec(vec![0.6, -0.3]);
    let z = sample_perturbation::<f64, _>(cfg.perturbation_kind, m, &mut r).unwrap().index;
    let y = 0.7;
    let mut buf = ReplayBuffer::new(1).unwrap();
    buf.push(Transition { input: phi.clone(), head: 0, reward: y, z: z.clone() });
    let mut trainer = Trainer::new(&cfg).unwrap();
    assert!(trainer.is_exact());
    sgd_step(&mut model, &buf, &cfg, &mut trainer, &mut r).unwrap();

    let (mean, _, factor) = ridge_oracle(&[(phi, y, z)], &z0, lambda).unwrap();
    let total_a = &model.heads()[0].a + &model.prior()[0].a;
    assert!((total_a - factor).amax() < 1e-3);
    assert!((&model.heads()[0].b - mean).amax() < 1e-3);
}

#[test]
fn sampled_loss_approaches_exact_loss() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    for kind in [DistributionKind::Coord, DistributionKind::Cube] {
        let m = 6;
        let ext = Mlp::random(&[3, 5], true, &mut r).unwrap();
        let mut model = Hypermodel::new(ext, 2, m, DistributionKind::Sphere, 1.0, 1.0, &mut r).unwrap();
        let n_params = model.flat_params().len();
        let p: Vec<f64> = (0..n_params).map(|_| 0.3 * r.sample::<f64, _>(StandardNormal)).collect();
        model.set_flat_params(&p).unwrap();
        let batch: Vec<Transition<f64>> = (0..8)
            .map(|i| Transition {
                input: randn(3, &mut r),
                head: i % 2,
                reward: r.sample(StandardNormal),
                z: sample_perturbation::<f64, _>(DistributionKind::Sphere, m, &mut r).unwrap().index,
            })
            .collect();
        let refs: Vec<&Transition<f64>> = batch.iter().collect();
        let exact = exact_loss(&model, &refs, kind, 0.5, 0.2, 20).unwrap();
        let draws: Vec<IndexVector<f64>> =
            (0..10_000).map(|_| sample_reference(kind, m, &mut r).unwrap()).collect();
        let per: Vec<f64> = draws
            .iter()
            .map(|xi| sampled_loss(&model, &refs, std::slice::from_ref(xi), 0.5, 0.2, 20).unwrap())
            .collect();
        let n = per.len() as f64;
        let mean = per.iter().sum::<f64>() / n;
        let var = per.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let pooled = sampled_loss(&model, &refs, &draws, 0.5, 0.2, 20).unwrap();
        assert!((pooled - mean).abs() < 1e-9);
        assert!((pooled - exact).abs() <= 3.0 * (var / n).sqrt(), "{kind}: {pooled} vs {exact}");
    }
}

#[test]
fn loss_splits_into_sigma_terms() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let m = 4;
    let ext = Mlp::random(&[3, 4], true, &mut r).unwrap();
    let mut model = Hypermodel::new(ext, 1, m, DistributionKind::Cube, 2.0, 1.0, &mut r).unwrap();
    let p: Vec<f64> = (0..model.flat_params().len()).map(|_| r.sample(StandardNormal)).collect();
    model.set_flat_params(&p).unwrap();
    let batch: Vec<Transition<f64>> = (0..5)
        .map(|_| Transition {
            input: randn(3, &mut r),
            head: 0,
            reward: r.sample(StandardNormal),
            z: sample_perturbation::<f64, _>(DistributionKind::Cube, m, &mut r).unwrap().index,
        })
        .collect();
    let refs: Vec<&Transition<f64>> = batch.iter().collect();
    let xis: Vec<IndexVector<f64>> = (0..7).map(|_| sample_reference(DistributionKind::Gaussian, m, &mut r).unwrap()).collect();
    let sigma = 0.8;
    // Expand (r₀ − σ zᵀξ)² term by term.
    let mut cross = 0.0;
    let mut quad = 0.0;
    for t in &batch {
        for xi in &xis {
            let r0 = model.value(&t.input, t.head, xi).unwrap() - t.reward;
            let s = t.z.as_vector().dot(xi.as_vector());
            cross += r0 * s;
            quad += s * s;
        }
    }
    let norm = (batch.len() * xis.len()) as f64;
    let base = sampled_loss(&model, &refs, &xis, 0.0, 1.5, 9).unwrap();
    let full = sampled_loss(&model, &refs, &xis, sigma, 1.5, 9).unwrap();
    let rebuilt = base - 2.0 * sigma * cross / norm + sigma * sigma * quad / norm;
    assert!((full - rebuilt).abs() < 1e-10 * full.abs().max(1.0));
}

fn relative_gradient_error(seed: u64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let input = r.random_range(1..5);
    let m = r.random_range(1..5);
    let heads = r.random_range(1..4);
    let hidden: Vec<usize> = (0..r.random_range(0..3)).map(|_| r.random_range(1..6)).collect();
    let mut sizes = vec![input];
    sizes.extend(&hidden);
    let ext = if hidden.is_empty() { Mlp::identity(input) } else { Mlp::random(&sizes, true, &mut r).unwrap() };
    let mut model = Hypermodel::new(ext, heads, m, DistributionKind::Sphere, 1.0, r.random_range(0.0..2.0), &mut r).unwrap();
    let p: Vec<f64> = (0..model.flat_params().len()).map(|_| 0.5 * r.sample::<f64, _>(StandardNormal)).collect();
    model.set_flat_params(&p).unwrap();
    let batch: Vec<Transition<f64>> = (0..r.random_range(1..6))
        .map(|_| Transition {
            input: randn(input, &mut r),
            head: r.random_range(0..heads),
            reward: r.sample(StandardNormal),
            z: sample_perturbation::<f64, _>(DistributionKind::Sphere, m, &mut r).unwrap().index,
        })
        .collect();
    let refs: Vec<&Transition<f64>> = batch.iter().collect();
    let xis = IndexSet::draw(DistributionKind::Gaussian, m, 4, &mut r).unwrap();
    let (sigma, lambda) = (r.random_range(0.0..1.5), r.random_range(0.0..1.0));
    let total = batch.len() + 3;
    let analytic = loss_and_gradient(&model, &refs, &xis, sigma, lambda, total).unwrap().1.flat();
    let h = 1e-5;
    let mut probe = model.clone();
    let mut diff = 0.0;
    let mut scale = 0.0;
    for i in 0..p.len() {
        let mut q = p.clone();
        q[i] += h;
        probe.set_flat_params(&q).unwrap();
        let up = loss_and_gradient(&probe, &refs, &xis, sigma, lambda, total).unwrap().0;
        q[i] -= 2.0 * h;
        probe.set_flat_params(&q).unwrap();
        let down = loss_and_gradient(&probe, &refs, &xis, sigma, lambda, total).unwrap().0;
        let numeric = (up - down) / (2.0 * h);
        diff += (analytic[i] - numeric).powi(2);
        scale += numeric * numeric;
    }
    if scale == 0.0 {
        diff.sqrt()
    } else {
        (diff / scale).sqrt()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn gradients_match_finite_differences(seed in any::<u64>()) {
        prop_assert!(relative_gradient_error(seed) <= 1e-4);
    }

    #[test]
    fn prior_heads_are_never_trained(seed in any::<u64>(), steps in 1usize..20) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let cfg = AgentConfig {
            index_dim: 4,
            update_steps: steps,
            hidden: vec![6],
            step_size: 0.01,
            update_kind: DistributionKind::Gaussian,
            ..AgentConfig::default()
        };
        let ext = Mlp::random(&[3, 6], true, &mut r).unwrap();
        let mut model = Hypermodel::new(ext, 2, 4, DistributionKind::Sphere, 1.0, 1.0, &mut r).unwrap();
        let prior: Vec<Head<f64>> = model.prior().to_vec();
        let mut buf = ReplayBuffer::new(8).unwrap();
        for i in 0..12 {
            buf.push(Transition {
                input: randn(3, &mut r),
                head: i % 2,
                reward: r.sample(StandardNormal),
                z: sample_perturbation::<f64, _>(DistributionKind::Sphere, 4, &mut r).unwrap().index,
            });
        }
        let mut trainer = Trainer::new(&cfg).unwrap();
        sgd_step(&mut model, &buf, &cfg, &mut trainer, &mut r).unwrap();
        prop_assert_eq!(model.prior(), &prior[..]);
    }
}

#[test]
fn exact_support_weights_sum_to_one() {
    for (kind, m) in [(DistributionKind::Coord, 5), (DistributionKind::Cube, 10), (DistributionKind::Sparse(2), 6)] {
        let atoms = finite_support::<f64>(kind, m).unwrap();
        let total: f64 = atoms.iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
