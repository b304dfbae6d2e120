//! Synthetic moderation data: linearly separable post embeddings around a hidden direction.

use hyperagent_core::hbe::{Label, Post};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::SyntheticPosts;

/// Smallest signed margin `±⟨x, w⟩` kept; closer posts are redrawn.
pub const MIN_MARGIN: f64 = 0.2;

/// Unit embeddings `x ∝ ±0.5·w + 0.25·g` with hate posts on the `+w` side.
pub fn synthetic_posts(spec: &SyntheticPosts) -> Vec<Post> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.dim;
    let w = loop {
        let g = DVector::<f64>::from_fn(d, |_, _| rng.sample(StandardNormal));
        let n = g.norm();
        if n > 0.0 {
            break g / n;
        }
    };
    let mut posts = Vec::with_capacity(spec.n_posts);
    while posts.len() < spec.n_posts {
        let hate = rng.random::<f64>() < spec.hate_fraction;
        let sign = if hate { 1.0 } else { -1.0 };
        let g = DVector::<f64>::from_fn(d, |_, _| rng.sample(StandardNormal));
        let x = &w * (0.5 * sign) + g * 0.25;
        let n = x.norm();
        if n == 0.0 {
            continue;
        }
        let x = x / n;
        if sign * x.dot(&w) < MIN_MARGIN {
            continue;
        }
        posts.push(Post {
            embedding: x.iter().map(|&v| v as f32).collect(),
            label: if hate { Label::Hate } else { Label::Free },
        });
    }
    posts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn posts_are_unit_and_seeded() {
        let spec = SyntheticPosts { n_posts: 500, dim: 8, hate_fraction: 0.3, seed: 4 };
        let posts = synthetic_posts(&spec);
        assert_eq!(posts.len(), 500);
        for p in &posts {
            let n: f32 = p.embedding.iter().map(|x| x * x).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
        let hate = posts.iter().filter(|p| p.label == Label::Hate).count() as f64 / 500.0;
        assert!((hate - 0.3).abs() < 0.07, "{hate}");
        assert_eq!(posts, synthetic_posts(&spec));
    }
}
