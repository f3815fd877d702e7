use super::*;
use crate::data::synthetic::{gen_synthetic, Regime, SyntheticConfig};
use crate::graph::{NodeKind, SyntheticKind};
use ndarray::array;

fn edge(a: &str, b: &str) -> Edge {
    (a.to_string(), b.to_string())
}

/// s1 driven by x1 with a self-loop, plus a pure-noise input x2.
fn small_graph() -> MechGraph {
    use NodeKind::*;
    MechGraph::new(
        [("s1", Observable), ("x1", Input), ("x2", Input), ("x3", Input), ("x4", Input), ("noise", Input), ("l1", Latent)]
            .into_iter()
            .map(|(n, k)| (n.to_string(), k)),
        [("x1", "s1"), ("s1", "s1"), ("x2", "s1"), ("x3", "l1")].into_iter().map(|(a, b)| (a.to_string(), b.to_string())),
    )
    .unwrap()
}

fn data(seed: u64, n: usize) -> Dataset {
    gen_synthetic(&SyntheticConfig::new(seed, Regime::True, SyntheticKind::Refined, n))
}

#[test]
fn random_candidates_follow_ratio() {
    let ds = data(1, 6);
    let spec = NrSpec::new(1e-6, 1e-3, 2, 7);
    let r = reduce_random(&small_graph(), &ds.subset(&[0, 1, 2, 3]), &ds.subset(&[4, 5]), 3, &[0.5, 0.2], &spec).unwrap();
    assert_eq!(r.trace.len(), 6);
    assert!(r.trace[..3].iter().all(|t| t.edges.len() == 2));
    assert!(r.trace[3..].iter().all(|t| t.edges.len() == 4));
    let min = r.trace.iter().map(|t| t.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(r.val_loss, min);
    assert!(r.graph.edges().is_subset(small_graph().edges()));
    assert_eq!(r.graph.node_count(), small_graph().node_count());
    let again = reduce_random(&small_graph(), &ds.subset(&[0, 1, 2, 3]), &ds.subset(&[4, 5]), 3, &[0.5, 0.2], &spec).unwrap();
    assert_eq!(again.trace, r.trace);
    assert!(reduce_random(&small_graph(), &ds, &ds, 1, &[1.0], &spec).is_err());
}

#[test]
fn random_search_finds_the_true_subgraph() {
    let ds = data(3, 24);
    let spec = NrSpec::new(1e-6, 1e-2, 120, 2);
    let tr: Vec<usize> = (0..16).collect();
    let va: Vec<usize> = (16..24).collect();
    // keep 2 of the 4 edges; 12 draws cover the 6 subsets with high probability
    let r = reduce_random(&small_graph(), &ds.subset(&tr), &ds.subset(&va), 12, &[0.5], &spec).unwrap();
    let truth: BTreeSet<Edge> = [edge("x1", "s1"), edge("s1", "s1")].into();
    assert!(r.trace.iter().any(|t| t.edges.iter().cloned().collect::<BTreeSet<_>>() == truth));
    assert_eq!(r.graph.edges(), &truth);
}

#[test]
fn greedy_trace_properties() {
    let ds = data(5, 24);
    let spec = NrSpec::new(1e-6, 1e-2, 80, 3);
    let tr: Vec<usize> = (0..16).collect();
    let va: Vec<usize> = (16..24).collect();
    let g = small_graph();
    let r = reduce_greedy(&g, &ds.subset(&tr), &ds.subset(&va), &spec).unwrap();
    let min = r.trace.iter().map(|t| t.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(r.val_loss, min);
    // rounds shrink the candidate count by one, at most |E| of them
    let mut rounds = 0;
    let mut i = 0;
    let mut size = g.edges().len();
    let mut best_per_round = Vec::new();
    while i < r.trace.len() {
        best_per_round.push(r.trace[i..i + size].iter().map(|t| t.val_loss).fold(f64::INFINITY, f64::min));
        i += size;
        size -= 1;
        rounds += 1;
    }
    assert!(rounds <= g.edges().len());
    // accepted rounds strictly improve; the last one failed to
    for w in best_per_round[..best_per_round.len() - 1].windows(2) {
        assert!(w[1] < w[0]);
    }
    assert!(r.graph.has_edge("x1", "s1"));
    assert!(!r.graph.has_edge("x3", "l1"));
    let again = reduce_greedy(&g, &ds.subset(&tr), &ds.subset(&va), &spec).unwrap();
    assert_eq!(again.trace, r.trace);
}

#[test]
fn rounding_rule() {
    assert_eq!(ns_mask(&array![[0.004, 0.996]]), vec![0.0, 1.0]);
    assert_eq!(ns_mask(&array![[0.004, 0.996], [0.6, 0.4]]), vec![1.0, 1.0]);
    assert_eq!(ns_mask(&array![[0.005, 0.995]]), vec![1.0, 1.0]);
}

#[test]
fn sample_weights_match_the_literal_formula() {
    let alpha = [0.3, -1.2, 0.8, 0.05];
    let eps = array![[0.2, 0.7, 0.5, 0.9], [0.99, 0.01, 0.3, 0.6]];
    let g = eps.mapv(|e: f64| -NS_SHARPNESS * (-e.ln()).ln());
    let w = ns_weights(&alpha, &g);
    let z: f64 = alpha.iter().map(|a| a.exp()).sum();
    for k in 0..2 {
        let raw: Vec<f64> = (0..4).map(|i| (((alpha[i].exp() / z).ln() - (-eps[[k, i]].ln()).ln()) * 10.0).exp()).collect();
        let s: f64 = raw.iter().sum();
        for i in 0..4 {
            assert!((w[[k, i]] - raw[i] / s).abs() < 1e-12);
        }
    }
}

#[test]
fn gates_pass_gradient_to_logits() {
    let gates = NsGates::new(2, 4, 0);
    let tape = Tape::new();
    let a = tape.leaf(0, Array2::from_shape_vec((1, 4), gates.alpha0.clone()).unwrap());
    let mut rng = Pcg64::seed_from_u64(1);
    let g = gates.gates(&tape, &a, &mut rng).unwrap();
    assert!(g.value().iter().all(|&v| (v - v.round()).abs() < 1e-12));
    let w = tape.constant(array![[1.0, 2.0, 3.0, 4.0]]);
    let loss = tape.sum(&tape.mul(&g, &w));
    let grad = tape.backward(&loss, 4);
    assert!(grad.iter().any(|v| v.abs() > 0.0));
}

#[test]
fn neuralsparse_selects_a_subgraph() {
    let ds = data(8, 12);
    let spec = NrSpec::new(1e-3, 1e-2, 20, 4);
    let g = small_graph();
    let tr: Vec<usize> = (0..8).collect();
    let va: Vec<usize> = (8..12).collect();
    let r = reduce_neuralsparse(&g, &ds.subset(&tr), &ds.subset(&va), 2, &spec).unwrap();
    assert!(!r.graph.edges().is_empty() && r.graph.edges().len() <= 2);
    assert!(r.graph.edges().is_subset(g.edges()));
    assert_eq!(r.val_loss, r.trace[0].val_loss);
    let full = reduce_neuralsparse(&g, &ds.subset(&tr), &ds.subset(&va), 4, &spec).unwrap();
    assert!(full.graph.edges().len() <= 4);
    assert!(reduce_neuralsparse(&g, &ds, &ds, 5, &spec).is_err());
}
