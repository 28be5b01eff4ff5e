//! Property tests for the crate's stated invariants.

use causal_concepts::metrics::{kendall_tau, spearman_rho};
use causal_concepts::model::routing::{squash, squash_norm};
use causal_concepts::synthdata::{self, GeneratorConfig};
use proptest::prelude::*;

fn rank_positions(order: &[usize]) -> Vec<f64> {
    let mut r = vec![0.0; order.len()];
    for (pos, &id) in order.iter().enumerate() {
        r[id] = pos as f64;
    }
    r
}

fn tau_oracle(a: &[usize], b: &[usize]) -> f64 {
    let ra = rank_positions(a);
    let rb = rank_positions(b);
    let n = a.len();
    let mut num = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            num += ((ra[i] - ra[j]) * (rb[i] - rb[j])).signum();
        }
    }
    num / (n * (n - 1) / 2) as f64
}

fn rho_oracle(a: &[usize], b: &[usize]) -> f64 {
    let ra = rank_positions(a);
    let rb = rank_positions(b);
    let n = a.len() as f64;
    let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y) * (x - y)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

proptest! {
    #[test]
    fn squash_norm_is_bounded_and_matches_squash(v in prop::collection::vec(-50.0f64..50.0, 1..8)) {
        let norm = squash_norm(&v);
        prop_assert!((0.0..1.0).contains(&norm));
        let squashed = squash(&v);
        let direct: f64 = squashed.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((norm - direct).abs() < 1e-12);
    }

    #[test]
    fn squash_norm_is_monotone_in_length(
        v in prop::collection::vec(-1.0f64..1.0, 2..6),
        s1 in 0.01f64..10.0,
        s2 in 0.01f64..10.0,
    ) {
        let len: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assume!(len > 1e-6);
        let unit: Vec<f64> = v.iter().map(|x| x / len).collect();
        let a: Vec<f64> = unit.iter().map(|x| x * s1).collect();
        let b: Vec<f64> = unit.iter().map(|x| x * s2).collect();
        let (na, nb) = (squash_norm(&a), squash_norm(&b));
        if s1 < s2 {
            prop_assert!(na < nb);
        } else if s1 > s2 {
            prop_assert!(na > nb);
        }
    }

    #[test]
    fn correlations_match_brute_force_oracles(
        (n, keys) in (2usize..7)
            .prop_flat_map(|n| (Just(n), proptest::collection::vec(0usize..1000, n)))
    ) {
        // Sorting by random keys yields an arbitrary permutation.
        let mut perm: Vec<usize> = (0..n).collect();
        perm.sort_by_key(|&i| keys[i]);
        let identity: Vec<usize> = (0..n).collect();
        let tau = kendall_tau(&identity, &perm).unwrap();
        let rho = spearman_rho(&identity, &perm).unwrap();
        prop_assert!((tau - tau_oracle(&identity, &perm)).abs() < 1e-12);
        prop_assert!((rho - rho_oracle(&identity, &perm)).abs() < 1e-12);
    }

    #[test]
    fn dataset_round_trip_is_identity(seed in 0u64..500) {
        let cfg = GeneratorConfig {
            n_concepts: 4,
            embed_dim: 6,
            samples: 8,
            tokens_per_sample: 4,
            image_regions: 2,
            noise_sigma: 0.2,
            offensive: vec![0, 2],
            positive_rate: 0.5,
            correlated: false,
            correlation: 0.85,
            seed,
        };
        let (samples, _) = synthdata::generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        synthdata::save(&samples, &path).unwrap();
        let loaded = synthdata::load(&path, Some(6)).unwrap();
        prop_assert_eq!(samples, loaded);
    }
}
