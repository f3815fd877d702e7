//! Mechanistic dependency graphs and the two structural steps of hybrid
//! graph sparsification: collapsing maximal strongly connected components
//! into super-nodes, and augmenting input→observable pathways with
//! reachability-preserving shortcuts.
//!
//! Reachability throughout this module is defined over paths of length at
//! least one, so `reachable(g, u, u)` holds only when `u` sits on a directed
//! cycle (a self-loop included).

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

mod builtin;

pub use builtin::{HEART_RATE, STEPS, build_synthetic_graph, build_uva_graph, SyntheticKind, UvaOptions};

pub type Edge = (String, String);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Observable,
    Latent,
    Input,
}

impl NodeKind {
    pub fn is_state(self) -> bool {
        !matches!(self, NodeKind::Input)
    }
}

/// Where an edge of a [`SuperGraph`] came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Original,
    CollapsedCycle,
    Shortcut,
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("duplicate node id `{0}`")]
    DuplicateNode(String),
    #[error("duplicate edge {0}->{1}")]
    DuplicateEdge(String, String),
    #[error("edge {0}->{1} references undeclared node")]
    UnknownEndpoint(String, String),
    #[error("input node `{dst}` has an incoming edge from `{src}`")]
    InputHasParent { src: String, dst: String },
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("`{0}` is not an input supernode")]
    NotInput(String),
    #[error("`{0}` is not an observable supernode")]
    NotObservable(String),
    #[error("supernode member `{0}` appears in more than one supernode")]
    OverlappingMembers(String),
    #[error("supernode `{0}` has dimension 0")]
    ZeroDim(String),
    #[error("kept components leave directed cycles through {0:?}; use force to accept a non-RDAG graph")]
    CycleRemains(Vec<String>),
    #[error("graph is not an RDAG: cycle through {0:?}")]
    NotRdag(Vec<String>),
    #[error("malformed graph file: {0}")]
    Format(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// Directed dependency graph of a mechanistic ODE system.
///
/// Nodes and edges are kept in sorted containers, so two graphs built from
/// the same node and edge sets compare equal regardless of insertion order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MechGraph {
    nodes: BTreeMap<String, NodeKind>,
    edges: BTreeSet<Edge>,
}

impl MechGraph {
    pub fn new<N, E, S>(nodes: N, edges: E) -> Result<Self>
    where
        N: IntoIterator<Item = (S, NodeKind)>,
        E: IntoIterator<Item = (S, S)>,
        S: Into<String>,
    {
        let mut node_map = BTreeMap::new();
        for (id, kind) in nodes {
            let id = id.into();
            if node_map.insert(id.clone(), kind).is_some() {
                return Err(GraphError::DuplicateNode(id));
            }
        }
        let mut edge_set = BTreeSet::new();
        for (src, dst) in edges {
            let (src, dst) = (src.into(), dst.into());
            let (Some(_), Some(&dk)) = (node_map.get(&src), node_map.get(&dst)) else {
                return Err(GraphError::UnknownEndpoint(src, dst));
            };
            if dk == NodeKind::Input {
                return Err(GraphError::InputHasParent { src, dst });
            }
            if !edge_set.insert((src.clone(), dst.clone())) {
                return Err(GraphError::DuplicateEdge(src, dst));
            }
        }
        Ok(Self { nodes: node_map, edges: edge_set })
    }

    pub fn nodes(&self) -> impl Iterator<Item = (&str, NodeKind)> {
        self.nodes.iter().map(|(id, k)| (id.as_str(), *k))
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn kind(&self, id: &str) -> Option<NodeKind> {
        self.nodes.get(id).copied()
    }

    pub fn edges(&self) -> &BTreeSet<Edge> {
        &self.edges
    }

    pub fn has_edge(&self, src: &str, dst: &str) -> bool {
        self.edges.contains(&(src.to_string(), dst.to_string()))
    }

    pub fn ids_of_kind(&self, kind: NodeKind) -> Vec<&str> {
        self.nodes().filter(|(_, k)| *k == kind).map(|(id, _)| id).collect()
    }

    /// Same node set, different edge set. Used by the reduction baselines.
    pub fn with_edges<'a, I>(&self, edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Edge>,
    {
        MechGraph::new(
            self.nodes.iter().map(|(id, k)| (id.clone(), *k)),
            edges.into_iter().cloned(),
        )
    }

    fn adjacency(&self) -> Adjacency {
        Adjacency::build(self.nodes.keys().cloned(), self.edges.iter())
    }

    pub fn to_json_string(&self) -> String {
        SuperGraph::lift(self).to_json_string()
    }

    /// Parses the graph JSON format. Files carrying multi-member supernodes
    /// are rejected; load them with [`SuperGraph::from_json_str`] instead.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let raw: GraphJson = serde_json::from_str(text)?;
        for n in &raw.nodes {
            if let Some(m) = &n.members {
                if m.len() != 1 || m[0] != n.id {
                    return Err(GraphError::Format(format!(
                        "node `{}` is a collapsed supernode, not a mechanistic node",
                        n.id
                    )));
                }
            }
        }
        MechGraph::new(
            raw.nodes.into_iter().map(|n| (n.id, n.kind)),
            raw.edges.into_iter().map(|[a, b]| (a, b)),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperNode {
    pub id: String,
    pub kind: NodeKind,
    pub members: BTreeSet<String>,
    pub dim: usize,
}

/// Graph over super-nodes, each owning a set of mechanistic node ids.
///
/// A `SuperGraph` produced by [`condense`] or [`augment`] is an RDAG; one
/// produced by [`SuperGraph::lift`] mirrors its mechanistic graph and may
/// contain cycles. Use [`is_rdag`] to check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperGraph {
    nodes: BTreeMap<String, SuperNode>,
    edges: BTreeSet<Edge>,
    provenance: BTreeMap<Edge, Provenance>,
}

impl SuperGraph {
    pub fn new(
        nodes: Vec<SuperNode>,
        edges: BTreeMap<Edge, Provenance>,
    ) -> Result<Self> {
        let mut node_map = BTreeMap::new();
        let mut seen_members = BTreeSet::new();
        for n in nodes {
            if n.dim == 0 {
                return Err(GraphError::ZeroDim(n.id));
            }
            for m in &n.members {
                if !seen_members.insert(m.clone()) {
                    return Err(GraphError::OverlappingMembers(m.clone()));
                }
            }
            let id = n.id.clone();
            if node_map.insert(id.clone(), n).is_some() {
                return Err(GraphError::DuplicateNode(id));
            }
        }
        for (src, dst) in edges.keys() {
            let (Some(_), Some(d)) = (node_map.get(src), node_map.get(dst)) else {
                return Err(GraphError::UnknownEndpoint(src.clone(), dst.clone()));
            };
            if d.kind == NodeKind::Input {
                return Err(GraphError::InputHasParent { src: src.clone(), dst: dst.clone() });
            }
        }
        Ok(Self {
            nodes: node_map,
            edges: edges.keys().cloned().collect(),
            provenance: edges,
        })
    }

    /// One singleton supernode per mechanistic node, all edges original.
    pub fn lift(g: &MechGraph) -> Self {
        let nodes = g
            .nodes()
            .map(|(id, kind)| {
                (
                    id.to_string(),
                    SuperNode {
                        id: id.to_string(),
                        kind,
                        members: BTreeSet::from([id.to_string()]),
                        dim: 1,
                    },
                )
            })
            .collect();
        let provenance = g.edges.iter().map(|e| (e.clone(), Provenance::Original)).collect();
        Self { nodes, edges: g.edges.clone(), provenance }
    }

    pub fn nodes(&self) -> impl Iterator<Item = &SuperNode> {
        self.nodes.values()
    }

    pub fn node(&self, id: &str) -> Option<&SuperNode> {
        self.nodes.get(id)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edges(&self) -> &BTreeSet<Edge> {
        &self.edges
    }

    pub fn has_edge(&self, src: &str, dst: &str) -> bool {
        self.edges.contains(&(src.to_string(), dst.to_string()))
    }

    pub fn provenance(&self, src: &str, dst: &str) -> Option<Provenance> {
        self.provenance.get(&(src.to_string(), dst.to_string())).copied()
    }

    pub fn ids_of_kind(&self, kind: NodeKind) -> Vec<&str> {
        self.nodes.values().filter(|n| n.kind == kind).map(|n| n.id.as_str()).collect()
    }

    /// Sorted parent ids of `id` (a self-loop lists the node itself).
    pub fn parents(&self, id: &str) -> Vec<&str> {
        self.edges
            .iter()
            .filter(|(_, d)| d == id)
            .map(|(s, _)| s.as_str())
            .collect()
    }

    /// Supernode containing mechanistic node `member`.
    pub fn owner_of(&self, member: &str) -> Option<&SuperNode> {
        self.nodes.values().find(|n| n.members.contains(member))
    }

    fn adjacency(&self) -> Adjacency {
        Adjacency::build(self.nodes.keys().cloned(), self.edges.iter())
    }

    fn require(&self, id: &str) -> Result<&SuperNode> {
        self.nodes.get(id).ok_or_else(|| GraphError::UnknownNode(id.to_string()))
    }

    pub fn to_json_string(&self) -> String {
        let nodes = self
            .nodes
            .values()
            .map(|n| {
                let singleton = n.members.len() == 1 && n.members.contains(&n.id);
                NodeJson {
                    id: n.id.clone(),
                    kind: n.kind,
                    dim: n.dim,
                    members: (!singleton).then(|| n.members.iter().cloned().collect()),
                }
            })
            .collect();
        let edges = self.edges.iter().map(|(a, b)| [a.clone(), b.clone()]).collect();
        let provenance = self
            .provenance
            .iter()
            .map(|((a, b), p)| (format!("{a}->{b}"), *p))
            .collect();
        let mut text = serde_json::to_string_pretty(&GraphJson { nodes, edges, provenance })
            .expect("graph json is always serializable");
        text.push('\n');
        text
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let raw: GraphJson = serde_json::from_str(text)?;
        let nodes = raw
            .nodes
            .into_iter()
            .map(|n| SuperNode {
                members: n
                    .members
                    .map(|m| m.into_iter().collect())
                    .unwrap_or_else(|| BTreeSet::from([n.id.clone()])),
                id: n.id,
                kind: n.kind,
                dim: n.dim,
            })
            .collect();
        let mut edges = BTreeMap::new();
        for [a, b] in raw.edges {
            let p = raw
                .provenance
                .get(&format!("{a}->{b}"))
                .copied()
                .unwrap_or(Provenance::Original);
            if edges.insert((a.clone(), b.clone()), p).is_some() {
                return Err(GraphError::DuplicateEdge(a, b));
            }
        }
        SuperGraph::new(nodes, edges)
    }
}

#[derive(Serialize, Deserialize)]
struct GraphJson {
    nodes: Vec<NodeJson>,
    edges: Vec<[String; 2]>,
    #[serde(default)]
    provenance: BTreeMap<String, Provenance>,
}

#[derive(Serialize, Deserialize)]
struct NodeJson {
    id: String,
    kind: NodeKind,
    #[serde(default = "one")]
    dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    members: Option<Vec<String>>,
}

fn one() -> usize {
    1
}

/// Index-based adjacency used by the graph algorithms.
struct Adjacency {
    ids: Vec<String>,
    index: BTreeMap<String, usize>,
    succ: Vec<Vec<usize>>,
    pred: Vec<Vec<usize>>,
}

impl Adjacency {
    fn build<'a>(ids: impl Iterator<Item = String>, edges: impl Iterator<Item = &'a Edge>) -> Self {
        let ids: Vec<String> = ids.collect();
        let index: BTreeMap<String, usize> =
            ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        let mut succ = vec![Vec::new(); ids.len()];
        let mut pred = vec![Vec::new(); ids.len()];
        for (a, b) in edges {
            let (ia, ib) = (index[a], index[b]);
            succ[ia].push(ib);
            pred[ib].push(ia);
        }
        Self { ids, index, succ, pred }
    }

    /// Nodes reachable from `start` by a path of length >= 1, optionally
    /// avoiding one node entirely.
    fn reach_from(&self, start: usize, removed: Option<usize>) -> Vec<bool> {
        let mut seen = vec![false; self.ids.len()];
        let mut queue: VecDeque<usize> = VecDeque::new();
        for &w in &self.succ[start] {
            if Some(w) != removed && !seen[w] {
                seen[w] = true;
                queue.push_back(w);
            }
        }
        while let Some(v) = queue.pop_front() {
            for &w in &self.succ[v] {
                if Some(w) != removed && !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
        }
        seen
    }

    /// Tarjan's algorithm; components are returned in reverse topological order.
    fn strongly_connected(&self) -> Vec<Vec<usize>> {
        struct State {
            counter: usize,
            index: Vec<Option<usize>>,
            low: Vec<usize>,
            stack: Vec<usize>,
            on_stack: Vec<bool>,
            comps: Vec<Vec<usize>>,
        }

        fn visit(v: usize, adj: &Adjacency, st: &mut State) {
            st.index[v] = Some(st.counter);
            st.low[v] = st.counter;
            st.counter += 1;
            st.stack.push(v);
            st.on_stack[v] = true;
            for &w in &adj.succ[v] {
                match st.index[w] {
                    None => {
                        visit(w, adj, st);
                        st.low[v] = st.low[v].min(st.low[w]);
                    }
                    Some(iw) if st.on_stack[w] => st.low[v] = st.low[v].min(iw),
                    Some(_) => {}
                }
            }
            if Some(st.low[v]) == st.index[v] {
                let mut comp = Vec::new();
                loop {
                    let w = st.stack.pop().expect("tarjan stack underflow");
                    st.on_stack[w] = false;
                    comp.push(w);
                    if w == v {
                        break;
                    }
                }
                st.comps.push(comp);
            }
        }

        let n = self.ids.len();
        let mut st = State {
            counter: 0,
            index: vec![None; n],
            low: vec![0; n],
            stack: Vec::new(),
            on_stack: vec![false; n],
            comps: Vec::new(),
        };
        for v in 0..n {
            if st.index[v].is_none() {
                visit(v, self, &mut st);
            }
        }
        st.comps
    }

    /// Immediate dominators of every node reachable from `root`
    /// (Cooper, Harvey and Kennedy's iterative scheme). Unreachable nodes
    /// map to `None`; the root maps to itself.
    fn dominators(&self, root: usize) -> Vec<Option<usize>> {
        let n = self.ids.len();
        let mut postorder = Vec::with_capacity(n);
        let mut visited = vec![false; n];
        let mut stack = vec![(root, 0usize)];
        visited[root] = true;
        while let Some((v, next)) = stack.pop() {
            if next < self.succ[v].len() {
                stack.push((v, next + 1));
                let w = self.succ[v][next];
                if !visited[w] {
                    visited[w] = true;
                    stack.push((w, 0));
                }
            } else {
                postorder.push(v);
            }
        }
        let mut po_num = vec![usize::MAX; n];
        for (i, &v) in postorder.iter().enumerate() {
            po_num[v] = i;
        }
        let mut idom: Vec<Option<usize>> = vec![None; n];
        idom[root] = Some(root);
        let intersect = |idom: &[Option<usize>], mut a: usize, mut b: usize| -> usize {
            while a != b {
                while po_num[a] < po_num[b] {
                    a = idom[a].expect("processed node has an idom");
                }
                while po_num[b] < po_num[a] {
                    b = idom[b].expect("processed node has an idom");
                }
            }
            a
        };
        let mut changed = true;
        while changed {
            changed = false;
            for &b in postorder.iter().rev() {
                if b == root {
                    continue;
                }
                let mut new_idom: Option<usize> = None;
                for &p in &self.pred[b] {
                    if p == b || !visited[p] || idom[p].is_none() {
                        continue;
                    }
                    new_idom = Some(match new_idom {
                        None => p,
                        Some(cur) => intersect(&idom, p, cur),
                    });
                }
                if new_idom.is_some() && idom[b] != new_idom {
                    idom[b] = new_idom;
                    changed = true;
                }
            }
        }
        idom
    }
}

fn sorted_components(adj: &Adjacency) -> Vec<BTreeSet<String>> {
    let mut comps: Vec<BTreeSet<String>> = adj
        .strongly_connected()
        .into_iter()
        .map(|c| c.into_iter().map(|i| adj.ids[i].clone()).collect())
        .collect();
    comps.sort();
    comps
}

/// Partition of the node set into maximal strongly connected components,
/// sorted by smallest member.
pub fn mscc_partition(g: &MechGraph) -> Vec<BTreeSet<String>> {
    sorted_components(&g.adjacency())
}

/// Options for [`condense_with`].
#[derive(Debug, Clone, Default)]
pub struct CondenseOptions {
    /// Node ids whose components stay uncollapsed.
    pub keep: Vec<String>,
    /// Accept a non-RDAG result when kept components contain cycles.
    pub force: bool,
}

#[derive(Debug, Clone)]
pub struct Condensed {
    pub graph: SuperGraph,
    pub warnings: Vec<String>,
}

/// Collapses every maximal strongly connected component of `g` into one
/// supernode. The result is always an RDAG.
pub fn condense(g: &MechGraph) -> SuperGraph {
    condense_super(&SuperGraph::lift(g), &CondenseOptions::default())
        .expect("condensing without kept components cannot leave cycles")
        .graph
}

pub fn condense_with(g: &MechGraph, opts: &CondenseOptions) -> Result<Condensed> {
    condense_super(&SuperGraph::lift(g), opts)
}

/// Condensation over an existing supergraph. Multi-member components are
/// named `sc_<smallest mechanistic member>`; singleton components keep their
/// id, so condensing an RDAG returns it unchanged.
pub fn condense_super(sg: &SuperGraph, opts: &CondenseOptions) -> Result<Condensed> {
    let adj = sg.adjacency();
    let comps = adj.strongly_connected();
    let mut comp_of = vec![0usize; adj.ids.len()];
    let mut new_nodes: Vec<SuperNode> = Vec::new();
    let mut merged: Vec<bool> = Vec::new();
    let mut warnings = Vec::new();
    let mut remaining_cycles = Vec::new();

    for comp in &comps {
        let members: Vec<&SuperNode> = comp.iter().map(|&i| &sg.nodes[&adj.ids[i]]).collect();
        let kept = members
            .iter()
            .any(|n| opts.keep.iter().any(|k| *k == n.id || n.members.contains(k)));
        if comp.len() == 1 || kept {
            if comp.len() > 1 {
                let mut ids: Vec<String> = members.iter().map(|n| n.id.clone()).collect();
                ids.sort();
                remaining_cycles.push(ids);
            }
            for (&i, n) in comp.iter().zip(&members) {
                comp_of[i] = new_nodes.len();
                new_nodes.push((*n).clone());
                merged.push(false);
            }
            continue;
        }
        let all_members: BTreeSet<String> =
            members.iter().flat_map(|n| n.members.iter().cloned()).collect();
        let observable_dim: usize = members
            .iter()
            .filter(|n| n.kind == NodeKind::Observable)
            .map(|n| n.dim)
            .sum();
        let kind = if observable_dim > 0 { NodeKind::Observable } else { NodeKind::Latent };
        let id = format!("sc_{}", all_members.iter().next().expect("nonempty component"));
        for &i in comp {
            comp_of[i] = new_nodes.len();
        }
        new_nodes.push(SuperNode {
            id,
            kind,
            members: all_members,
            dim: if kind == NodeKind::Observable { observable_dim } else { 1 },
        });
        merged.push(true);
    }

    if !remaining_cycles.is_empty() {
        let flat: Vec<String> = remaining_cycles.concat();
        if !opts.force {
            return Err(GraphError::CycleRemains(flat));
        }
        warnings.push(format!(
            "kept components {remaining_cycles:?} leave directed cycles; result is not an RDAG"
        ));
    }

    let mut edges: BTreeMap<Edge, Provenance> = BTreeMap::new();
    for (src, dst) in &sg.edges {
        let (cs, cd) = (comp_of[adj.index[src]], comp_of[adj.index[dst]]);
        let p = if cs == cd && merged[cs] {
            Provenance::CollapsedCycle
        } else {
            sg.provenance[&(src.clone(), dst.clone())]
        };
        let key = (new_nodes[cs].id.clone(), new_nodes[cd].id.clone());
        edges
            .entry(key)
            .and_modify(|old| *old = (*old).min(p))
            .or_insert(p);
    }
    // a merged self-loop is always a collapsed cycle, even if a member had its own
    for (i, n) in new_nodes.iter().enumerate() {
        if merged[i] {
            if let Some(p) = edges.get_mut(&(n.id.clone(), n.id.clone())) {
                *p = Provenance::CollapsedCycle;
            }
        }
    }
    Ok(Condensed { graph: SuperGraph::new(new_nodes, edges)?, warnings })
}

/// Directed reachability via a path of length >= 1.
pub fn reachable(sg: &SuperGraph, u: &str, v: &str) -> Result<bool> {
    sg.require(u)?;
    sg.require(v)?;
    let adj = sg.adjacency();
    Ok(adj.reach_from(adj.index[u], None)[adj.index[v]])
}

/// True when the only directed cycles are self-loops.
pub fn is_rdag(sg: &SuperGraph) -> bool {
    first_cycle(&sg.adjacency()).is_none()
}

fn first_cycle(adj: &Adjacency) -> Option<Vec<String>> {
    adj.strongly_connected().into_iter().find(|c| c.len() > 1).map(|c| {
        let mut ids: Vec<String> = c.into_iter().map(|i| adj.ids[i].clone()).collect();
        ids.sort();
        ids
    })
}

fn check_pathway_pair(sg: &SuperGraph, x: &str, s: &str) -> Result<()> {
    if sg.require(x)?.kind != NodeKind::Input {
        return Err(GraphError::NotInput(x.to_string()));
    }
    if sg.require(s)?.kind != NodeKind::Observable {
        return Err(GraphError::NotObservable(s.to_string()));
    }
    Ok(())
}

/// Nodes other than `x` and `s` lying on every path from `x` to `s`, i.e.
/// the strict dominators of `s` in the flow graph rooted at `x`. Empty when
/// `s` is unreachable from `x`.
pub fn disconnecting_set(sg: &SuperGraph, x: &str, s: &str) -> Result<BTreeSet<String>> {
    check_pathway_pair(sg, x, s)?;
    let adj = sg.adjacency();
    Ok(disconnecting_indices(&adj, adj.index[x], adj.index[s])
        .into_iter()
        .map(|i| adj.ids[i].clone())
        .collect())
}

fn disconnecting_indices(adj: &Adjacency, x: usize, s: usize) -> Vec<usize> {
    let idom = adj.dominators(x);
    let mut out = Vec::new();
    let Some(mut cur) = idom[s] else {
        return out;
    };
    while cur != x {
        out.push(cur);
        cur = idom[cur].expect("dominator chain reaches the root");
    }
    out
}

/// Edges of the partial transitive closure of the `x`→`s` pathway subgraph.
///
/// The pathway node set is `{x, s}` plus the disconnecting set; a pair
/// `(u, v)` of pathway nodes is included when `v` is reachable from `u` in
/// the full graph. `(x, x)` is never included and `(x, s)` only when it is
/// already an edge.
pub fn pathway_closure_edges(sg: &SuperGraph, x: &str, s: &str) -> Result<BTreeSet<Edge>> {
    check_pathway_pair(sg, x, s)?;
    let adj = sg.adjacency();
    let (ix, is) = (adj.index[x], adj.index[s]);
    let mut pathway = disconnecting_indices(&adj, ix, is);
    pathway.push(ix);
    pathway.push(is);
    let direct = sg.has_edge(x, s);
    let mut out = BTreeSet::new();
    for &u in &pathway {
        let reach = adj.reach_from(u, None);
        for &v in &pathway {
            if !reach[v] || (u == ix && v == ix) || (u == ix && v == is && !direct) {
                continue;
            }
            out.insert((adj.ids[u].clone(), adj.ids[v].clone()));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct AugmentOptions {
    /// `(input, observable)` pairs whose shortcuts are omitted.
    pub skip: BTreeSet<(String, String)>,
}

/// Adds partial-transitive-closure shortcuts for every (input, observable)
/// supernode pair.
pub fn augment(sg: &SuperGraph) -> Result<SuperGraph> {
    augment_with(sg, &AugmentOptions::default())
}

pub fn augment_with(sg: &SuperGraph, opts: &AugmentOptions) -> Result<SuperGraph> {
    if let Some(cycle) = first_cycle(&sg.adjacency()) {
        return Err(GraphError::NotRdag(cycle));
    }
    let mut edges = sg.provenance.clone();
    for x in sg.ids_of_kind(NodeKind::Input) {
        for s in sg.ids_of_kind(NodeKind::Observable) {
            if opts.skip.contains(&(x.to_string(), s.to_string())) {
                continue;
            }
            for e in pathway_closure_edges(sg, x, s)? {
                edges.entry(e).or_insert(Provenance::Shortcut);
            }
        }
    }
    let out = SuperGraph::new(sg.nodes.values().cloned().collect(), edges)?;
    if let Some(cycle) = first_cycle(&out.adjacency()) {
        return Err(GraphError::NotRdag(cycle));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mech(nodes: &[(&str, NodeKind)], edges: &[(&str, &str)]) -> MechGraph {
        MechGraph::new(nodes.iter().copied(), edges.iter().copied()).unwrap()
    }

    use NodeKind::{Input as I, Latent as L, Observable as O};

    fn set(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    fn edge_set(es: &[(&str, &str)]) -> BTreeSet<Edge> {
        es.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn rejects_invalid_graphs() {
        assert!(matches!(
            MechGraph::new([("a", L), ("a", O)], Vec::<(&str, &str)>::new()),
            Err(GraphError::DuplicateNode(_))
        ));
        assert!(matches!(
            MechGraph::new([("a", L)], [("a", "b")]),
            Err(GraphError::UnknownEndpoint(..))
        ));
        assert!(matches!(
            MechGraph::new([("a", L), ("x", I)], [("a", "x")]),
            Err(GraphError::InputHasParent { .. })
        ));
        assert!(matches!(
            MechGraph::new([("a", L), ("b", L)], [("a", "b"), ("a", "b")]),
            Err(GraphError::DuplicateEdge(..))
        ));
    }

    #[test]
    fn mscc_examples() {
        let g = mech(&[("a", L), ("b", L), ("c", O)], &[("a", "b"), ("b", "a"), ("b", "c")]);
        assert_eq!(mscc_partition(&g), vec![set(&["a", "b"]), set(&["c"])]);
        let chain = mech(&[("a", L), ("b", L), ("c", O)], &[("a", "b"), ("b", "c")]);
        assert_eq!(mscc_partition(&chain), vec![set(&["a"]), set(&["b"]), set(&["c"])]);
        let looped = mech(&[("a", O)], &[("a", "a")]);
        assert_eq!(mscc_partition(&looped), vec![set(&["a"])]);
    }

    #[test]
    fn condense_two_cycle() {
        let g = mech(&[("a", L), ("b", L)], &[("a", "b"), ("b", "a")]);
        let sg = condense(&g);
        assert_eq!(sg.node_count(), 1);
        let n = sg.node("sc_a").unwrap();
        assert_eq!(n.members, set(&["a", "b"]));
        assert_eq!(n.kind, L);
        assert_eq!(n.dim, 1);
        assert_eq!(sg.edges(), &edge_set(&[("sc_a", "sc_a")]));
        assert_eq!(sg.provenance("sc_a", "sc_a"), Some(Provenance::CollapsedCycle));
        assert!(is_rdag(&sg));
        assert!(!is_rdag(&SuperGraph::lift(&g)));
    }

    #[test]
    fn condense_rdag_is_identity() {
        let g = mech(&[("x", I), ("a", L), ("s", O)], &[("x", "a"), ("a", "s"), ("s", "s")]);
        assert_eq!(condense(&g), SuperGraph::lift(&g));
    }

    #[test]
    fn condense_observable_dim_counts_observable_members() {
        let g = mech(
            &[("a", O), ("b", O), ("c", L)],
            &[("a", "b"), ("b", "c"), ("c", "a")],
        );
        let sg = condense(&g);
        let n = sg.node("sc_a").unwrap();
        assert_eq!((n.kind, n.dim), (O, 2));
    }

    #[test]
    fn condense_keep_requires_force() {
        let g = mech(&[("a", L), ("b", O)], &[("a", "b"), ("b", "a")]);
        let opts = CondenseOptions { keep: vec!["a".into()], force: false };
        assert!(matches!(condense_with(&g, &opts), Err(GraphError::CycleRemains(_))));
        let forced = condense_with(&g, &CondenseOptions { force: true, ..opts }).unwrap();
        assert_eq!(forced.warnings.len(), 1);
        assert_eq!(forced.graph.node_count(), 2);
        assert!(!is_rdag(&forced.graph));
    }

    fn lifted(nodes: &[(&str, NodeKind)], edges: &[(&str, &str)]) -> SuperGraph {
        SuperGraph::lift(&mech(nodes, edges))
    }

    #[test]
    fn disconnecting_set_examples() {
        let path = lifted(&[("x", I), ("v", L), ("s", O)], &[("x", "v"), ("v", "s")]);
        assert_eq!(disconnecting_set(&path, "x", "s").unwrap(), set(&["v"]));

        let parallel = lifted(
            &[("x", I), ("v1", L), ("v2", L), ("s", O)],
            &[("x", "v1"), ("v1", "s"), ("x", "v2"), ("v2", "s")],
        );
        assert!(disconnecting_set(&parallel, "x", "s").unwrap().is_empty());

        let bypass = lifted(
            &[("x", I), ("v1", L), ("v2", L), ("s", O)],
            &[("x", "v1"), ("v1", "v2"), ("v2", "s"), ("x", "v2")],
        );
        assert_eq!(disconnecting_set(&bypass, "x", "s").unwrap(), set(&["v2"]));

        let unreachable = lifted(&[("x", I), ("v", L), ("s", O)], &[("x", "v")]);
        assert!(disconnecting_set(&unreachable, "x", "s").unwrap().is_empty());

        assert!(matches!(disconnecting_set(&path, "v", "s"), Err(GraphError::NotInput(_))));
        assert!(matches!(disconnecting_set(&path, "x", "v"), Err(GraphError::NotObservable(_))));
        assert!(matches!(disconnecting_set(&path, "q", "s"), Err(GraphError::UnknownNode(_))));
    }

    #[test]
    fn closure_on_chain() {
        let chain = lifted(
            &[("x", I), ("a", L), ("b", L), ("s", O)],
            &[("x", "a"), ("a", "b"), ("b", "s")],
        );
        let closure = pathway_closure_edges(&chain, "x", "s").unwrap();
        assert_eq!(
            closure,
            edge_set(&[("x", "a"), ("x", "b"), ("a", "b"), ("a", "s"), ("b", "s")])
        );
        let augmented = augment(&chain).unwrap();
        let added: BTreeSet<Edge> = augmented.edges().difference(chain.edges()).cloned().collect();
        assert_eq!(added, edge_set(&[("x", "b"), ("a", "s")]));
        assert_eq!(augmented.provenance("x", "b"), Some(Provenance::Shortcut));
        assert_eq!(augmented.provenance("x", "a"), Some(Provenance::Original));
    }

    #[test]
    fn closure_keeps_existing_direct_edge() {
        let g = lifted(
            &[("x", I), ("v", L), ("w", L), ("s", O)],
            &[("x", "s"), ("x", "v"), ("v", "w"), ("w", "s"), ("v", "s")],
        );
        // every x->s path except the direct one passes v; direct edge keeps D empty
        assert!(disconnecting_set(&g, "x", "s").unwrap().is_empty());
        let closure = pathway_closure_edges(&g, "x", "s").unwrap();
        assert_eq!(closure, edge_set(&[("x", "s")]));

        let g2 = lifted(
            &[("x", I), ("v", L), ("s", O), ("y", I)],
            &[("y", "s"), ("x", "v"), ("v", "s"), ("y", "v")],
        );
        let closure = pathway_closure_edges(&g2, "y", "s").unwrap();
        assert!(closure.contains(&("y".to_string(), "s".to_string())));
    }

    #[test]
    fn closure_direct_only_adds_nothing() {
        let g = lifted(&[("x", I), ("s", O)], &[("x", "s"), ("s", "s")]);
        assert_eq!(augment(&g).unwrap(), g);
    }

    #[test]
    fn augment_rejects_cycles() {
        let g = lifted(&[("a", L), ("b", O)], &[("a", "b"), ("b", "a")]);
        assert!(matches!(augment(&g), Err(GraphError::NotRdag(_))));
    }

    #[test]
    fn augment_respects_skip() {
        let chain = lifted(
            &[("x", I), ("a", L), ("b", L), ("s", O)],
            &[("x", "a"), ("a", "b"), ("b", "s")],
        );
        let opts = AugmentOptions { skip: BTreeSet::from([("x".to_string(), "s".to_string())]) };
        assert_eq!(augment_with(&chain, &opts).unwrap(), chain);
    }

    #[test]
    fn reachability_convention() {
        let g = lifted(&[("a", L), ("b", L), ("c", O)], &[("a", "b"), ("b", "c"), ("c", "c")]);
        assert!(reachable(&g, "a", "c").unwrap());
        assert!(!reachable(&g, "c", "a").unwrap());
        assert!(!reachable(&g, "a", "a").unwrap());
        assert!(reachable(&g, "c", "c").unwrap());
        assert!(reachable(&g, "a", "zz").is_err());
    }

    #[test]
    fn json_round_trip_and_canonical_order() {
        let g1 = mech(&[("b", L), ("a", O), ("x", I)], &[("x", "a"), ("b", "a"), ("a", "b")]);
        let g2 = mech(&[("x", I), ("a", O), ("b", L)], &[("a", "b"), ("b", "a"), ("x", "a")]);
        assert_eq!(g1.to_json_string(), g2.to_json_string());
        assert_eq!(MechGraph::from_json_str(&g1.to_json_string()).unwrap(), g1);

        let sg = augment(&condense(&g1)).unwrap();
        let text = sg.to_json_string();
        assert_eq!(SuperGraph::from_json_str(&text).unwrap(), sg);
        assert!(text.contains("\"members\""));
        assert!(MechGraph::from_json_str(&text).is_err());
    }
}
