//! Reverse-mode gradients against central finite differences on seeded
//! random graphs spanning the full op set.

use causal_concepts::testing::{gradcheck_max_rel_error, random_graph};

#[test]
fn gradients_match_finite_differences_over_random_graphs() {
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let err = gradcheck_max_rel_error(seed);
        assert!(err < 1e-4, "seed {seed}: relative error {err}");
        worst = worst.max(err);
    }
    println!("worst relative error across 100 graphs: {worst:.3e}");
}

#[test]
fn graphs_are_bit_identical_per_seed() {
    for seed in [0u64, 7, 23] {
        let a = random_graph(seed, None);
        let b = random_graph(seed, None);
        assert_eq!(
            a.graph.value(a.root).item().to_bits(),
            b.graph.value(b.root).item().to_bits()
        );
        let ga = a.graph.backward(a.root).unwrap();
        let gb = b.graph.backward(b.root).unwrap();
        for (la, lb) in a.leaves.iter().zip(b.leaves.iter()) {
            let ta = ga.get(&a.graph, *la);
            let tb = gb.get(&b.graph, *lb);
            for (x, y) in ta.data().iter().zip(tb.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
