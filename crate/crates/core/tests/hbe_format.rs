use hyperagent_core::envs::{regret_step, BanditEnv, Choice, ModerationEnv, BLOCK, PUBLISH};
use hyperagent_core::hbe::{self, Label, Post};
use hyperagent_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Byte-level reader written against the format description only.
fn parse(bytes: &[u8]) -> Option<(u32, Vec<(Vec<f32>, u8)>)> {
    if bytes.get(..4)? != b"HBE1" {
        return None;
    }
    let d = u32::from_le_bytes(bytes.get(4..8)?.try_into().ok()?);
    let n = u64::from_le_bytes(bytes.get(8..16)?.try_into().ok()?);
    let mut pos = 16usize;
    let mut out = Vec::new();
    for _ in 0..n {
        let mut e = Vec::new();
        for _ in 0..d {
            e.push(f32::from_le_bytes(bytes.get(pos..pos + 4)?.try_into().ok()?));
            pos += 4;
        }
        out.push((e, *bytes.get(pos)?));
        pos += 1;
    }
    let trailer = bytes.get(pos..pos + 16)?;
    if pos + 16 != bytes.len() || trailer != &Sha256::digest(&bytes[..pos])[..16] {
        return None;
    }
    Some((d, out))
}

fn fixture() -> Vec<Post> {
    let labels = [Label::Free, Label::Hate, Label::Free, Label::Hate, Label::Hate, Label::Free];
    labels
        .iter()
        .enumerate()
        .map(|(i, &label)| Post {
            embedding: vec![i as f32, -0.5 * i as f32, 1.0 / (1.0 + i as f32)],
            label,
        })
        .collect()
}

#[test]
fn writer_output_satisfies_independent_parser() {
    let posts = fixture();
    let bytes = hbe::encode(3, &posts).unwrap();
    let (d, records) = parse(&bytes).expect("independent parser rejected the file");
    assert_eq!(d, 3);
    assert_eq!(records.len(), posts.len());
    for (p, (e, l)) in posts.iter().zip(&records) {
        assert_eq!(&p.embedding, e);
        assert_eq!(p.label.as_byte(), *l);
    }
}

#[test]
fn hand_built_file_is_accepted() {
    let mut bytes = b"HBE1".to_vec();
    bytes.extend_from_slice(&2u32.to_le_bytes());
    bytes.extend_from_slice(&1u64.to_le_bytes());
    bytes.extend_from_slice(&0.25f32.to_le_bytes());
    bytes.extend_from_slice(&(-4.0f32).to_le_bytes());
    bytes.push(1);
    let sum = Sha256::digest(&bytes);
    bytes.extend_from_slice(&sum[..16]);
    let file = hbe::decode(&bytes).unwrap();
    assert_eq!(file.dim, 2);
    assert_eq!(file.posts, vec![Post { embedding: vec![0.25, -4.0], label: Label::Hate }]);
}

#[test]
fn moderation_env_loads_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("posts.hbe");
    hbe::write_path(&path, 3, &fixture()).unwrap();
    let mut env = ModerationEnv::from_path(&path).unwrap();
    assert_eq!(env.n_posts(), 6);
    assert_eq!(env.embedding_dim(), 3);
    assert_eq!(env.horizon_limit(), Some(6));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    // Rows of the publish/block reward table.
    let hate_block = env.feedback(1, &Choice::Index(BLOCK), &mut rng).unwrap().reward;
    assert_eq!((hate_block, regret_step(&env, 1, &Choice::Index(BLOCK)).unwrap()), (0.5, 0.0));
    let free_block = env.feedback(0, &Choice::Index(BLOCK), &mut rng).unwrap().reward;
    assert_eq!((free_block, regret_step(&env, 0, &Choice::Index(BLOCK)).unwrap()), (0.5, 0.5));
    let hate_pub = env.feedback(3, &Choice::Index(PUBLISH), &mut rng).unwrap().reward;
    assert_eq!((hate_pub, regret_step(&env, 3, &Choice::Index(PUBLISH)).unwrap()), (-0.5, 1.0));

    std::fs::write(&path, &hbe::encode(3, &fixture()).unwrap()[..40]).unwrap();
    assert!(matches!(ModerationEnv::from_path(&path), Err(Error::Format { .. })));
    assert!(matches!(ModerationEnv::from_path(dir.path().join("missing.hbe")), Err(Error::Io(_))));
}

#[test]
fn seeded_shuffle_is_reproducible() {
    let posts: Vec<Post> = (0..50)
        .map(|i| Post { embedding: vec![i as f32], label: if i % 3 == 0 { Label::Hate } else { Label::Free } })
        .collect();
    let order = |seed| {
        let env = ModerationEnv::from_posts(1, &posts)
            .unwrap()
            .shuffled(&mut ChaCha8Rng::seed_from_u64(seed));
        (0..50).map(|t| env.label(t).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(order(4), order(4));
    let original: Vec<Label> = posts.iter().map(|p| p.label).collect();
    assert_ne!(order(4), original);
}
