use super::*;
use crate::data::synthetic::{gen_synthetic, Regime, SyntheticConfig};
use crate::graph::{augment, build_synthetic_graph, condense, MechGraph, SyntheticKind};
use crate::nn::{finite_diff_check, init_rng};
use ndarray::array;

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn sg(nodes: &[(&str, NodeKind)], edges: &[(&str, &str)]) -> SuperGraph {
    SuperGraph::lift(&MechGraph::new(nodes.iter().map(|(a, k)| (a.to_string(), *k)), edges.iter().map(|(a, b)| (a.to_string(), b.to_string()))).unwrap())
}

fn cycle_graph() -> SuperGraph {
    use NodeKind::*;
    sg(&[("s1", Observable), ("l1", Latent), ("x1", Input)], &[("x1", "s1"), ("s1", "s1"), ("l1", "s1"), ("s1", "l1"), ("x1", "l1")])
}

fn zero_params(m: &mut MnodeModel) {
    let w = m.weight_range();
    for (i, v) in m.params.values.iter_mut().enumerate() {
        if w.as_ref().is_none_or(|r| !r.contains(&i)) {
            *v = 0.0;
        }
    }
}

#[test]
fn zero_encoder_keeps_observed_value() {
    let mut m = MnodeModel::new(cycle_graph(), &names(&["s1"]), &names(&["x1"]), 3, MnodeConfig::default(), 1).unwrap();
    zero_params(&mut m);
    let past = array![[1.0], [2.0], [3.0], [5.0]];
    let init = m.initial_condition(&past, &Array2::ones((3, 1))).unwrap();
    // slots are ordered by id: l1, s1
    assert_eq!(m.state_ids(), vec!["l1", "s1"]);
    assert_eq!(init, vec![0.0, 5.0]);
    let same = m.rollout(&init, &Array2::zeros((0, 1))).unwrap();
    assert_eq!(same.nrows(), 0);
    assert!(m.initial_condition(&past, &Array2::ones((2, 1))).is_err());
}

#[test]
fn empty_history_bypasses_encoder() {
    let m = MnodeModel::new(cycle_graph(), &names(&["s1"]), &names(&["x1"]), 0, MnodeConfig::default(), 1).unwrap();
    assert!(m.encoder_ranges().is_empty());
    let init = m.initial_condition(&array![[0.7]], &Array2::zeros((0, 1))).unwrap();
    assert_eq!(init, vec![0.0, 0.7]);
}

#[test]
fn zero_mlps_hold_state() {
    let mut m = MnodeModel::new(cycle_graph(), &names(&["s1"]), &names(&["x1"]), 0, MnodeConfig::default(), 2).unwrap();
    zero_params(&mut m);
    let y = m.rollout(&[0.3, 0.9], &array![[1.0], [2.0], [3.0]]).unwrap();
    assert_eq!(y, array![[0.9], [0.9], [0.9]]);
}

/// NN(s, x) = -0.5 (s - 1) + 4 x, written with ReLU pairs so it is exact.
fn hand_wired(m: &mut MnodeModel) {
    let c = nn_component("s1");
    // parents of s1 sorted: s1, x1
    m.params.set(&c, "W0", &array![[1.0, -1.0, 0.0, 0.0], [0.0, 0.0, 1.0, -1.0]]).unwrap();
    m.params.set(&c, "b0", &Array2::zeros((1, 4))).unwrap();
    m.params.set(&c, "W1", &Array2::eye(4)).unwrap();
    m.params.set(&c, "b1", &Array2::zeros((1, 4))).unwrap();
    m.params.set(&c, "W2", &array![[-0.5], [0.5], [4.0], [-4.0]]).unwrap();
    m.params.set(&c, "b2", &array![[0.5]]).unwrap();
}

fn linear_model() -> MnodeModel {
    use NodeKind::*;
    let g = sg(&[("s1", Observable), ("x1", Input), ("x2", Input)], &[("x1", "s1"), ("s1", "s1")]);
    let cfg = MnodeConfig { delta_t: 0.05, hidden_units: 4, ..MnodeConfig::default() };
    let mut m = MnodeModel::new(g, &names(&["s1"]), &names(&["x1", "x2"]), 0, cfg, 3).unwrap();
    hand_wired(&mut m);
    m
}

#[test]
fn hand_wired_rollout_matches_generator() {
    let m = linear_model();
    let raw = &crate::data::synthetic::gen_synthetic_raw(&SyntheticConfig::new(9, Regime::True, SyntheticKind::Refined, 1))[0];
    // feed x_1..x_59 so the model reproduces v_1..v_59 from v_0
    let inputs = raw.slice(s![1.., 1..3]).to_owned();
    let y = m.rollout(&[raw[[0, 0]]], &inputs).unwrap();
    for h in 0..59 {
        assert!((y[[h, 0]] - raw[[h + 1, 0]]).abs() < 1e-12, "step {h}: {} vs {}", y[[h, 0]], raw[[h + 1, 0]]);
    }
}

#[test]
fn zero_edge_weight_gates_input() {
    let mut m = linear_model();
    m.set_edge_weight(&("x1".into(), "s1".into()), 0.0).unwrap();
    let a = m.rollout(&[0.2], &array![[1.0, 0.0], [2.0, 0.0], [-3.0, 0.0]]).unwrap();
    let b = m.rollout(&[0.2], &array![[-7.0, 0.0], [0.5, 0.0], [9.0, 0.0]]).unwrap();
    assert_eq!(a, b);
    m.set_edge_weight(&("x1".into(), "s1".into()), 1.0).unwrap();
    assert_ne!(m.rollout(&[0.2], &array![[-7.0, 0.0], [0.5, 0.0], [9.0, 0.0]]).unwrap(), a);
}

#[test]
fn weight_sharing_rules() {
    use NodeKind::*;
    let chain = sg(&[("u", Observable), ("v", Latent), ("w", Observable)], &[("u", "v"), ("v", "w")]);
    let map = apply_weight_sharing(&chain);
    assert_eq!(map[&("v".into(), "w".into())], ("u".to_string(), "v".to_string()));
    assert_eq!(map[&("u".into(), "v".into())], ("u".to_string(), "v".to_string()));

    let looped = sg(&[("u", Observable), ("v", Latent), ("w", Observable)], &[("u", "v"), ("v", "w"), ("v", "v")]);
    assert!(apply_weight_sharing(&looped).iter().all(|(e, c)| e == c));

    let observable = sg(&[("u", Observable), ("v", Observable), ("w", Observable)], &[("u", "v"), ("v", "w")]);
    assert!(apply_weight_sharing(&observable).iter().all(|(e, c)| e == c));

    let long = sg(
        &[("x", Input), ("a", Latent), ("b", Latent), ("s", Observable)],
        &[("x", "a"), ("a", "b"), ("b", "s"), ("s", "s")],
    );
    let map = apply_weight_sharing(&long);
    assert_eq!(map[&("b".into(), "s".into())], ("x".to_string(), "a".to_string()));
    let m = MnodeModel::new(long, &names(&["s"]), &names(&["x"]), 0, MnodeConfig::default(), 0).unwrap();
    assert_eq!(m.weight_edges().len(), 2);
    let mut m2 = m.clone();
    m2.set_edge_weight(&("a".into(), "b".into()), 0.25).unwrap();
    assert_eq!(m2.edge_weight(&("x".into(), "a".into())), Some(0.25));
    assert_eq!(m2.edge_weight(&("b".into(), "s".into())), Some(0.25));
}

#[test]
fn binding_errors() {
    assert!(MnodeModel::new(cycle_graph(), &names(&["l1"]), &names(&["x1"]), 0, MnodeConfig::default(), 0).is_err());
    assert!(MnodeModel::new(cycle_graph(), &names(&["s1"]), &names(&["x2"]), 0, MnodeConfig::default(), 0).is_err());
    assert!(MnodeModel::new(cycle_graph(), &names(&[]), &names(&["x1"]), 0, MnodeConfig::default(), 0).is_err());
}

#[test]
fn merged_observable_supernode_binds_its_member() {
    let g = augment(&condense(&build_synthetic_graph(SyntheticKind::Refined))).unwrap();
    let ds = gen_synthetic(&SyntheticConfig::new(1, Regime::True, SyntheticKind::Refined, 3));
    let m = MnodeModel::for_dataset(g, &ds, MnodeConfig::default(), 5).unwrap();
    assert_eq!(m.state_ids(), vec!["sc_l1"]);
    let preds = m.predict(&ds).unwrap();
    assert_eq!(preds.len(), 3);
    assert_eq!(preds[0].dim(), (59, 1));
    // the noise channel is not in the graph and must not matter
    let mut ds2 = ds.clone();
    for ins in &mut ds2.instances {
        ins.future_inputs.column_mut(4).fill(123.0);
    }
    assert_eq!(m.predict(&ds2).unwrap(), preds);
}

#[test]
fn batched_prediction_matches_single_rollout() {
    let ds = gen_synthetic(&SyntheticConfig::new(2, Regime::Quasi, SyntheticKind::Refined, 4));
    let m = MnodeModel::for_dataset(SuperGraph::lift(&build_synthetic_graph(SyntheticKind::Refined)), &ds, MnodeConfig::default(), 8).unwrap();
    let preds = m.predict(&ds).unwrap();
    for (ins, y) in ds.instances.iter().zip(&preds) {
        let init = m.initial_condition(&ins.past_obs, &ins.past_inputs).unwrap();
        assert_eq!(&m.rollout(&init, &ins.future_inputs).unwrap(), y);
    }
}

#[test]
fn relabeling_nodes_preserves_predictions() {
    use NodeKind::*;
    let a = sg(&[("s1", Observable), ("l1", Latent), ("x1", Input)], &[("x1", "l1"), ("l1", "s1"), ("s1", "s1"), ("l1", "l1")]);
    let b = sg(&[("s1", Observable), ("zz", Latent), ("x1", Input)], &[("x1", "zz"), ("zz", "s1"), ("s1", "s1"), ("zz", "zz")]);
    let ma = MnodeModel::new(a, &names(&["s1"]), &names(&["x1"]), 2, MnodeConfig::default(), 4).unwrap();
    let mut mb = MnodeModel::new(b, &names(&["s1"]), &names(&["x1"]), 2, MnodeConfig::default(), 99).unwrap();
    let ta = ma.params.unflatten();
    let rename = |c: &str| if c == "nn/l1" { "nn/zz".to_string() } else { c.to_string() };
    let mut tb = BTreeMap::new();
    for ((c, n), v) in ta {
        tb.insert((rename(&c), n), v);
    }
    // encoder output blocks follow slot order, which flips with the rename
    let swap = |m: &Array2<f64>, rows: bool| {
        let mut out = m.clone();
        if rows {
            out.row_mut(0).assign(&m.row(1));
            out.row_mut(1).assign(&m.row(0));
        }
        out
    };
    let mut tb2 = BTreeMap::new();
    for ((c, n), v) in tb {
        let v = if c == ENCODER {
            // permute hidden units 0 <-> 1 in every gate block
            let h = 2;
            let mut w = v.clone();
            for g in 0..4 {
                w.column_mut(g * h).assign(&v.column(g * h + 1));
                w.column_mut(g * h + 1).assign(&v.column(g * h));
            }
            swap(&w, n.starts_with("W_hh") || n == "W_ih1")
        } else if c == EDGES {
            // edge order a: (l1,l1),(l1,s1),(s1,s1),(x1,l1); b: (s1,s1),(x1,zz),(zz,s1),(zz,zz)
            array![[v[[0, 2]], v[[0, 3]], v[[0, 1]], v[[0, 0]]]]
        } else if n == "W0" {
            // parent order flips for both MLPs: (l1, s1) vs (s1, zz), (l1, x1) vs (x1, zz)
            swap(&v, true)
        } else {
            v
        };
        tb2.insert((c, n), v);
    }
    mb.params = mb.params.flatten(&tb2).unwrap();
    let past = array![[0.1], [0.4], [0.2]];
    let pin = array![[1.0], [0.5]];
    let fut = array![[0.3], [-0.2], [0.9], [0.0]];
    let ya = ma.rollout(&ma.initial_condition(&past, &pin).unwrap(), &fut).unwrap();
    let yb = mb.rollout(&mb.initial_condition(&past, &pin).unwrap(), &fut).unwrap();
    for (p, q) in ya.iter().zip(yb.iter()) {
        assert!((p - q).abs() < 1e-14);
    }
}

#[test]
fn checkpoint_round_trip() {
    let m = MnodeModel::new(cycle_graph(), &names(&["s1"]), &names(&["x1"]), 2, MnodeConfig::default(), 6).unwrap();
    let text = m.to_checkpoint();
    let back = MnodeModel::from_checkpoint(&text).unwrap();
    assert_eq!(back.params, m.params);
    assert_eq!(back.to_checkpoint(), text);
}

#[test]
fn blow_up_is_reported() {
    let mut m = linear_model();
    let c = nn_component("s1");
    m.params.set(&c, "W2", &array![[1e6], [-1e6], [0.0], [0.0]]).unwrap();
    match m.rollout(&[1.0], &Array2::zeros((60, 2))) {
        Err(MnodeError::NonFinite { step, .. }) => assert!(step <= 60),
        other => panic!("expected NonFinite, got {other:?}"),
    }
}

#[test]
fn rollout_gradient_matches_finite_differences() {
    let g = cycle_graph();
    let series: Vec<Array2<f64>> = (0..3)
        .map(|k| Array2::from_shape_fn((7, 2), |(t, c)| ((t * 3 + c * 5 + k) as f64 * 0.37).sin()))
        .collect();
    let instances = series.iter().map(|s| crate::data::window(s, 1, 2)).collect();
    let ds = Dataset::new(names(&["s1"]), names(&["x1"]), instances).unwrap();
    let cfg = MnodeConfig { hidden_units: 5, ..MnodeConfig::default() };
    let m = MnodeModel::for_dataset(g, &ds, cfg, 12).unwrap();
    let batch = ds.batch();
    let loss = |tape: &Tape, bound: &Bound| -> crate::nn::Result<Var> {
        let outs = m.forward(tape, bound, &batch, None).map_err(|e| NnError::Shape(e.to_string()))?;
        let mut total = tape.scalar(0.0);
        for (y, t) in outs.iter().zip(&batch.future_obs) {
            total = tape.add(&total, &tape.sum_sq(&tape.sub(y, &tape.constant(t.clone()))));
        }
        Ok(total)
    };
    let err = finite_diff_check(&m.params, loss, 60, 1e-5, 1e-6, &mut init_rng(0)).unwrap();
    assert!(err <= 1e-6, "max relative error {err}");
}
