use std::str::FromStr;

use super::{MechGraph, NodeKind};

/// Exogenous vitals channels of the hybrid glycemic model.
pub const HEART_RATE: &str = "heart_rate";
pub const STEPS: &str = "steps";

#[derive(Debug, Clone, Copy, Default)]
pub struct UvaOptions {
    /// Wire heart-rate and step-count inputs into every state node.
    pub vitals: bool,
}

const UVA_STATES: [&str; 20] = [
    "Gp", "Gt", "Ip", "Il", "Qsto1", "Qsto2", "Qgut", "XL", "Ir", "XH", "X", "E", "Isc1", "Isc2",
    "Gs", "H", "SRsH", "SRdH", "Hsc1", "Hsc2",
];

// Right-hand-side dependencies with the algebraic intermediates inlined:
// EGP(Gp, XL, XH), Ra(Qgut), Uid(X, Gt, risk(Gp)), Rai(Isc1, Isc2),
// kempt(Qsto1 + Qsto2), G = Gp/VG, I = Ip/VI, SRH = SRsH + SRdH, RaH(Hsc2).
// dSRdH/dt reads dG/dt, so it inherits the parents of Gp.
const UVA_PARENTS: [(&str, &[&str]); 20] = [
    ("Gp", &["Gp", "XL", "XH", "Qgut", "E", "Gt"]),
    ("Gt", &["Gt", "X", "Gp"]),
    ("Ip", &["Ip", "Il", "Isc1", "Isc2"]),
    ("Il", &["Il", "Ip"]),
    ("Qsto1", &["Qsto1", "delta"]),
    ("Qsto2", &["Qsto2", "Qsto1"]),
    ("Qgut", &["Qgut", "Qsto1", "Qsto2"]),
    ("XL", &["XL", "Ir"]),
    ("Ir", &["Ir", "Ip"]),
    ("XH", &["XH", "H"]),
    ("X", &["X", "Ip"]),
    ("E", &["Gp"]),
    ("Isc1", &["Isc1", "IIR"]),
    ("Isc2", &["Isc1", "Isc2"]),
    ("Gs", &["Gs", "Gp"]),
    ("H", &["H", "SRsH", "SRdH", "Hsc2"]),
    ("SRsH", &["SRsH", "Gp", "Ip"]),
    ("SRdH", &["Gp", "Gt", "XL", "XH", "Qgut", "E"]),
    ("Hsc1", &["Hsc1", "Hinf"]),
    ("Hsc2", &["Hsc1", "Hsc2"]),
];

/// Dependency graph of the UVA-Padova S2013 glucose-insulin-glucagon model.
/// `Gs` (subcutaneous glucose, what a CGM reads) is the only observable.
pub fn build_uva_graph(opts: UvaOptions) -> MechGraph {
    let mut nodes: Vec<(&str, NodeKind)> = UVA_STATES
        .iter()
        .map(|&s| (s, if s == "Gs" { NodeKind::Observable } else { NodeKind::Latent }))
        .collect();
    nodes.extend([("delta", NodeKind::Input), ("IIR", NodeKind::Input), ("Hinf", NodeKind::Input)]);
    let mut edges: Vec<(&str, &str)> = UVA_PARENTS
        .iter()
        .flat_map(|(dst, parents)| parents.iter().map(move |p| (*p, *dst)))
        .collect();
    if opts.vitals {
        for v in [HEART_RATE, STEPS] {
            nodes.push((v, NodeKind::Input));
            edges.extend(UVA_STATES.iter().map(|&s| (v, s)));
        }
    }
    MechGraph::new(nodes, edges).expect("built-in UVA graph is well formed")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    Refined,
    Comprehensive,
}

impl SyntheticKind {
    /// Number of generated input channels, excluding the appended noise column.
    pub fn input_count(self) -> usize {
        match self {
            SyntheticKind::Refined => 4,
            SyntheticKind::Comprehensive => 7,
        }
    }
}

impl FromStr for SyntheticKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "refined" => Ok(SyntheticKind::Refined),
            "comprehensive" => Ok(SyntheticKind::Comprehensive),
            other => Err(format!("unknown graph kind `{other}` (expected refined|comprehensive)")),
        }
    }
}

/// Starting graph for the synthetic experiments. The true system is
/// `x1 -> s1` plus the self-loop on `s1`; everything else is redundant.
pub fn build_synthetic_graph(kind: SyntheticKind) -> MechGraph {
    use NodeKind::*;
    let mut nodes = vec![("s1", Observable), ("l1", Latent)];
    let mut edges = vec![
        ("x1", "s1"),
        ("s1", "s1"),
        ("x2", "s1"),
        ("x3", "l1"),
        ("x4", "l1"),
        ("l1", "s1"),
        ("s1", "l1"),
    ];
    if kind == SyntheticKind::Comprehensive {
        nodes.extend([("l2", Latent), ("l3", Latent)]);
        edges.extend([
            ("l1", "l2"),
            ("l2", "l1"),
            ("l2", "l3"),
            ("l3", "l2"),
            ("x5", "l2"),
            ("x6", "l3"),
            ("x7", "l3"),
        ]);
    }
    let inputs: Vec<String> = (1..=kind.input_count()).map(|i| format!("x{i}")).collect();
    let nodes = nodes
        .into_iter()
        .map(|(id, k)| (id.to_string(), k))
        .chain(inputs.into_iter().map(|id| (id, Input)));
    MechGraph::new(nodes, edges.into_iter().map(|(a, b)| (a.to_string(), b.to_string())))
        .expect("built-in synthetic graph is well formed")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{augment, condense, is_rdag, mscc_partition, SuperGraph};
    use std::collections::BTreeSet;

    #[test]
    fn uva_edges_read_off_equations() {
        let g = build_uva_graph(UvaOptions::default());
        assert_eq!(g.node_count(), 23);
        assert!(g.has_edge("Gp", "Gt") && g.has_edge("Gt", "Gp"));
        assert!(g.has_edge("Isc1", "Isc2") && !g.has_edge("Isc2", "Isc1"));
        assert!(g.has_edge("XH", "Gp"));
        assert_eq!(g.ids_of_kind(NodeKind::Observable), vec!["Gs"]);
    }

    #[test]
    fn uva_components() {
        let g = build_uva_graph(UvaOptions::default());
        let big: Vec<BTreeSet<String>> =
            mscc_partition(&g).into_iter().filter(|c| c.len() > 1).collect();
        let expect = |ids: &[&str]| ids.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
        assert_eq!(
            big,
            vec![expect(&["E", "Gp", "Gt", "H", "SRdH", "SRsH", "XH"]), expect(&["Il", "Ip"])]
        );
        let sg = condense(&g);
        assert!(is_rdag(&sg));
        let glucose = sg.owner_of("Gp").unwrap();
        assert!(glucose.members.contains("Gt"));
        assert!(is_rdag(&augment(&sg).unwrap()));
    }

    #[test]
    fn uva_vitals_feed_every_state() {
        let g = build_uva_graph(UvaOptions { vitals: true });
        for s in UVA_STATES {
            assert!(g.has_edge(HEART_RATE, s) && g.has_edge(STEPS, s));
        }
    }

    #[test]
    fn synthetic_counts() {
        let refined = build_synthetic_graph(SyntheticKind::Refined);
        assert_eq!(refined.ids_of_kind(NodeKind::Input).len(), 4);
        assert!(mscc_partition(&refined).iter().any(|c| c.len() >= 2));
        let comp = build_synthetic_graph(SyntheticKind::Comprehensive);
        assert_eq!(comp.ids_of_kind(NodeKind::Input).len(), 7);
        assert_eq!(comp.ids_of_kind(NodeKind::Latent).len(), 3);
        for g in [&refined, &comp] {
            assert!(g.has_edge("x1", "s1") && g.has_edge("s1", "s1"));
        }
    }

    #[test]
    fn synthetic_condensed_shape() {
        let sg = augment(&condense(&build_synthetic_graph(SyntheticKind::Refined))).unwrap();
        assert_eq!(sg.ids_of_kind(NodeKind::Observable), vec!["sc_l1"]);
        assert_eq!(sg.edges().len(), 5);
        assert!(SuperGraph::lift(&build_synthetic_graph(SyntheticKind::Refined)) != sg);
    }
}
