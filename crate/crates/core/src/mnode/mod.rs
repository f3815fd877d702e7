//! Mechanistic neural ODE: one MLP per state supernode wired by the graph,
//! optional per-edge gating weights, an LSTM encoder for the latent initial
//! condition, and a forward-Euler decoder.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Batch, Dataset};
use crate::graph::{Edge, GraphError, NodeKind, SuperGraph};
use crate::nn::{init_rng, Bound, EncoderSpec, MlpSpec, NnError, ParamVector, Tape, Var};

#[derive(Debug, Error)]
pub enum MnodeError {
    #[error("state left the representable range at step {step}: {msg}")]
    NonFinite { step: usize, msg: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("cannot bind graph to dataset channels: {0}")]
    Binding(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MnodeError>;

pub const ENCODER: &str = "encoder";
pub const EDGES: &str = "edges";
pub const EDGE_TENSOR: &str = "w";

pub fn nn_component(node: &str) -> String {
    format!("nn/{node}")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MnodeConfig {
    pub delta_t: f64,
    pub time_input: bool,
    /// Learnable per-edge gating weights.
    pub weighted: bool,
    pub share_weights: bool,
    pub hidden_layers: usize,
    pub hidden_units: usize,
    /// Rollout aborts once any state exceeds this magnitude.
    pub state_bound: f64,
}

impl Default for MnodeConfig {
    fn default() -> Self {
        Self {
            delta_t: 1.0,
            time_input: false,
            weighted: true,
            share_weights: true,
            hidden_layers: 2,
            hidden_units: 16,
            state_bound: 1e12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Source {
    State(usize),
    Input(usize),
}

#[derive(Debug, Clone)]
struct ParentRef {
    src: String,
    source: Source,
    width: usize,
    /// Index into the canonical edge list.
    edge: usize,
    row_offset: usize,
}

#[derive(Debug, Clone)]
struct Slot {
    id: String,
    dim: usize,
    offset: usize,
    observable: bool,
    spec: MlpSpec,
    parents: Vec<ParentRef>,
}

/// For each latent supernode with exactly one incoming and one outgoing
/// edge (a self-loop counts as both), the outgoing edge shares the weight
/// of the incoming one. Chains resolve to their first edge.
pub fn apply_weight_sharing(graph: &SuperGraph) -> BTreeMap<Edge, Edge> {
    let mut direct: BTreeMap<Edge, Edge> = BTreeMap::new();
    for n in graph.nodes().filter(|n| n.kind == NodeKind::Latent) {
        let incoming: Vec<&Edge> = graph.edges().iter().filter(|e| e.1 == n.id).collect();
        let outgoing: Vec<&Edge> = graph.edges().iter().filter(|e| e.0 == n.id).collect();
        if incoming.len() == 1 && outgoing.len() == 1 && incoming[0] != outgoing[0] {
            direct.insert(outgoing[0].clone(), incoming[0].clone());
        }
    }
    graph
        .edges()
        .iter()
        .map(|e| {
            let mut c = e.clone();
            let mut hops = 0;
            while let Some(next) = direct.get(&c) {
                c = next.clone();
                hops += 1;
                if hops > direct.len() {
                    break;
                }
            }
            (e.clone(), c)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct MnodeModel {
    graph: SuperGraph,
    config: MnodeConfig,
    obs_names: Vec<String>,
    input_names: Vec<String>,
    /// Dataset input columns feeding the graph, ascending.
    used_inputs: Vec<usize>,
    /// (slot, feature) of each dataset observable.
    obs_map: Vec<(usize, usize)>,
    slots: Vec<Slot>,
    share_map: BTreeMap<Edge, Edge>,
    weight_edges: Vec<Edge>,
    encoder: Option<EncoderSpec>,
    p: usize,
    pub params: ParamVector,
}

impl MnodeModel {
    /// Builds and initializes a model for datasets with the given channels
    /// and history length.
    pub fn new(
        graph: SuperGraph,
        obs_names: &[String],
        input_names: &[String],
        p: usize,
        config: MnodeConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut model = Self::skeleton(graph, obs_names, input_names, p, config)?;
        let mut rng = init_rng(seed);
        let mut pv = ParamVector::new();
        for slot in &model.slots {
            slot.spec.init_into(&mut pv, &nn_component(&slot.id), &mut rng);
        }
        if config.weighted {
            pv.push(EDGES, EDGE_TENSOR, &Array2::ones((1, model.weight_edges.len())));
        }
        if let Some(enc) = &model.encoder {
            enc.init_into(&mut pv, ENCODER, &mut rng);
        }
        model.params = pv;
        Ok(model)
    }

    pub fn for_dataset(graph: SuperGraph, ds: &Dataset, config: MnodeConfig, seed: u64) -> Result<Self> {
        Self::new(graph, &ds.obs_names, &ds.input_names, ds.p(), config, seed)
    }

    fn skeleton(graph: SuperGraph, obs_names: &[String], input_names: &[String], p: usize, config: MnodeConfig) -> Result<Self> {
        let states: Vec<(String, usize, bool)> = graph
            .nodes()
            .filter(|n| n.kind.is_state())
            .map(|n| (n.id.clone(), n.dim, n.kind == NodeKind::Observable))
            .collect();
        let slot_of: BTreeMap<&str, usize> = states.iter().enumerate().map(|(i, s)| (s.0.as_str(), i)).collect();

        let mut obs_map = Vec::with_capacity(obs_names.len());
        let mut taken: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
        for name in obs_names {
            let owner = graph
                .owner_of(name)
                .ok_or_else(|| MnodeError::Binding(format!("observable channel `{name}` is not a graph node")))?;
            if owner.kind != NodeKind::Observable {
                return Err(MnodeError::Binding(format!("`{name}` belongs to non-observable node `{}`", owner.id)));
            }
            taken.entry(slot_of[owner.id.as_str()]).or_default().push(name);
        }
        for name in obs_names {
            let slot = slot_of[graph.owner_of(name).expect("checked").id.as_str()];
            let mut members = taken[&slot].clone();
            members.sort();
            obs_map.push((slot, members.iter().position(|m| m == name).expect("present")));
        }
        for (i, s) in states.iter().enumerate() {
            if s.2 && taken.get(&i).map_or(0, Vec::len) != s.1 {
                return Err(MnodeError::Binding(format!(
                    "observable node `{}` has dimension {} but {} matching channels",
                    s.0,
                    s.1,
                    taken.get(&i).map_or(0, Vec::len)
                )));
            }
        }

        let mut used_inputs = BTreeSet::new();
        for id in graph.ids_of_kind(NodeKind::Input) {
            let col = input_names
                .iter()
                .position(|n| n == id)
                .ok_or_else(|| MnodeError::Binding(format!("graph input `{id}` has no dataset channel")))?;
            used_inputs.insert(col);
        }

        let share_map: BTreeMap<Edge, Edge> = if config.share_weights {
            apply_weight_sharing(&graph)
        } else {
            graph.edges().iter().map(|e| (e.clone(), e.clone())).collect()
        };
        let weight_edges: Vec<Edge> = share_map.iter().filter(|(e, c)| e == c).map(|(e, _)| e.clone()).collect();
        let edge_index: BTreeMap<&Edge, usize> = weight_edges.iter().enumerate().map(|(i, e)| (e, i)).collect();

        let mut slots = Vec::with_capacity(states.len());
        let mut offset = 0;
        for (id, dim, observable) in &states {
            let mut parents = Vec::new();
            let mut row = 0;
            for src in graph.parents(id) {
                let edge = (src.to_string(), id.clone());
                let canonical = &share_map[&edge];
                let (source, width) = match slot_of.get(src) {
                    Some(&j) => (Source::State(j), states[j].1),
                    None => (
                        Source::Input(input_names.iter().position(|n| n == src).expect("bound above")),
                        1,
                    ),
                };
                parents.push(ParentRef { src: src.to_string(), source, width, edge: edge_index[canonical], row_offset: row });
                row += width;
            }
            let in_dim = row + usize::from(config.time_input);
            let spec = MlpSpec { in_dim, hidden_layers: config.hidden_layers, hidden_units: config.hidden_units, out_dim: *dim, dropout: 0.0 };
            slots.push(Slot { id: id.clone(), dim: *dim, offset, observable: *observable, spec, parents });
            offset += dim;
        }
        let encoder = (p > 0).then(|| EncoderSpec::new(obs_names.len() + used_inputs.len(), offset));
        Ok(Self {
            graph,
            config,
            obs_names: obs_names.to_vec(),
            input_names: input_names.to_vec(),
            used_inputs: used_inputs.into_iter().collect(),
            obs_map,
            slots,
            share_map,
            weight_edges,
            encoder,
            p,
            params: ParamVector::new(),
        })
    }

    pub fn graph(&self) -> &SuperGraph {
        &self.graph
    }

    pub fn config(&self) -> &MnodeConfig {
        &self.config
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn obs_names(&self) -> &[String] {
        &self.obs_names
    }

    pub fn input_names(&self) -> &[String] {
        &self.input_names
    }

    pub fn share_map(&self) -> &BTreeMap<Edge, Edge> {
        &self.share_map
    }

    /// Edges that own a weight entry, in parameter order.
    pub fn weight_edges(&self) -> &[Edge] {
        &self.weight_edges
    }

    pub fn state_dim(&self) -> usize {
        self.slots.iter().map(|s| s.dim).sum()
    }

    pub fn state_ids(&self) -> Vec<&str> {
        self.slots.iter().map(|s| s.id.as_str()).collect()
    }

    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        if ds.obs_names != self.obs_names || ds.input_names != self.input_names {
            return Err(MnodeError::Shape(format!(
                "dataset channels {:?}/{:?} differ from model channels {:?}/{:?}",
                ds.obs_names, ds.input_names, self.obs_names, self.input_names
            )));
        }
        if !ds.is_empty() && ds.p() != self.p {
            return Err(MnodeError::Shape(format!("dataset history p={} but model expects p={}", ds.p(), self.p)));
        }
        Ok(())
    }

    /// Index range of the edge-weight tensor, when the model is weighted.
    pub fn weight_range(&self) -> Option<Range<usize>> {
        self.params.entry(EDGES, EDGE_TENSOR).map(|e| e.range())
    }

    /// Index ranges of the decoder MLP parameters.
    pub fn decoder_ranges(&self) -> Vec<Range<usize>> {
        self.params.ranges_where(|e| e.component.starts_with("nn/"))
    }

    pub fn encoder_ranges(&self) -> Vec<Range<usize>> {
        self.params.ranges_where(|e| e.component == ENCODER)
    }

    /// Weight of `edge`, read through the sharing map; 1 for unweighted models.
    pub fn edge_weight(&self, edge: &Edge) -> Option<f64> {
        let canonical = self.share_map.get(edge)?;
        let k = self.weight_edges.iter().position(|e| e == canonical)?;
        Some(self.weight_range().map_or(1.0, |r| self.params.values[r.start + k]))
    }

    pub fn edge_weights(&self) -> BTreeMap<Edge, f64> {
        self.share_map.keys().map(|e| (e.clone(), self.edge_weight(e).expect("mapped"))).collect()
    }

    pub fn set_edge_weight(&mut self, edge: &Edge, w: f64) -> Result<()> {
        let canonical = self.share_map.get(edge).ok_or_else(|| MnodeError::Shape(format!("no edge {edge:?}")))?;
        let k = self.weight_edges.iter().position(|e| e == canonical).expect("canonical");
        let r = self.weight_range().ok_or_else(|| MnodeError::Shape("model has no edge weights".into()))?;
        self.params.values[r.start + k] = w;
        Ok(())
    }

    /// First-layer weight rows of the destination MLP that read `edge`'s
    /// source block: (component, flat index range).
    pub fn first_layer_block(&self, edge: &Edge) -> Option<(String, Range<usize>)> {
        let slot = self.slots.iter().find(|s| s.id == edge.1)?;
        let parent = slot.parents.iter().find(|p| p.src == edge.0)?;
        let component = nn_component(&slot.id);
        let entry = self.params.entry(&component, "W0")?;
        let start = entry.offset + parent.row_offset * entry.cols;
        Some((component, start..start + parent.width * entry.cols))
    }

    fn input_const(&self, tape: &Tape, inputs: &Array2<f64>, col: usize) -> Var {
        tape.constant(inputs.slice(s![.., col..col + 1]).to_owned())
    }

    /// Initial state blocks (one B × dim matrix per state supernode).
    fn initial_vars(&self, tape: &Tape, bound: &Bound, batch: &Batch) -> Result<Vec<Var>> {
        let b = batch.size;
        let t0 = batch.past_obs.last().ok_or_else(|| MnodeError::Shape("empty history".into()))?;
        let encoded = match (&self.encoder, self.p) {
            (Some(enc), p) if p > 0 => {
                let mut seq = Vec::with_capacity(p + 1);
                for t in 0..=p {
                    let mut row = Array2::zeros((b, enc.input_dim));
                    row.slice_mut(s![.., ..self.obs_names.len()]).assign(&batch.past_obs[t]);
                    if t < p {
                        for (k, &c) in self.used_inputs.iter().enumerate() {
                            row.column_mut(self.obs_names.len() + k).assign(&batch.past_inputs[t].column(c));
                        }
                    }
                    seq.push(tape.constant(row));
                }
                Some(enc.encode(tape, bound, ENCODER, &seq))
            }
            _ => None,
        };
        let mut out = Vec::with_capacity(self.slots.len());
        for (i, slot) in self.slots.iter().enumerate() {
            if slot.observable {
                let mut block = Array2::zeros((b, slot.dim));
                for (j, &(si, f)) in self.obs_map.iter().enumerate() {
                    if si == i {
                        block.column_mut(f).assign(&t0.column(j));
                    }
                }
                out.push(tape.constant(block));
            } else {
                out.push(match &encoded {
                    Some(h) => tape.slice_cols(h, slot.offset, slot.dim),
                    None => tape.constant(Array2::zeros((b, slot.dim))),
                });
            }
        }
        Ok(out)
    }

    fn observe(&self, tape: &Tape, states: &[Var]) -> Var {
        let parts: Vec<Var> = self
            .obs_map
            .iter()
            .map(|&(slot, f)| {
                if self.slots[slot].dim == 1 {
                    states[slot].clone()
                } else {
                    tape.slice_cols(&states[slot], f, 1)
                }
            })
            .collect();
        if parts.len() == 1 {
            parts.into_iter().next().expect("one part")
        } else {
            tape.concat_cols(&parts)
        }
    }

    fn edge_vars(&self, tape: &Tape, bound: &Bound, gates: Option<&Var>) -> Option<Vec<Var>> {
        let w = match (self.config.weighted, gates) {
            (true, Some(g)) => Some(tape.mul(bound.get(EDGES, EDGE_TENSOR), g)),
            (true, None) => Some(bound.get(EDGES, EDGE_TENSOR).clone()),
            (false, Some(g)) => Some(g.clone()),
            (false, None) => None,
        }?;
        Some((0..self.weight_edges.len()).map(|k| tape.slice_cols(&w, k, 1)).collect())
    }

    /// Euler rollout from `init`; returns the B × |obs| prediction at t_1..t_q.
    fn rollout_vars(
        &self,
        tape: &Tape,
        bound: &Bound,
        mut states: Vec<Var>,
        future_inputs: &[Array2<f64>],
        gates: Option<&Var>,
    ) -> Result<Vec<Var>> {
        let q = future_inputs.len();
        let b = states.first().map_or(0, |v| v.shape().0);
        let weights = self.edge_vars(tape, bound, gates);
        let mut out = Vec::with_capacity(q);
        for (h, inputs) in future_inputs.iter().enumerate() {
            let mut next = Vec::with_capacity(states.len());
            for (i, slot) in self.slots.iter().enumerate() {
                let mut parts: Vec<Var> = Vec::with_capacity(slot.parents.len() + 1);
                for p in &slot.parents {
                    let block = match p.source {
                        Source::State(j) => states[j].clone(),
                        Source::Input(c) => self.input_const(tape, inputs, c),
                    };
                    parts.push(match &weights {
                        Some(w) => tape.scale_by(&block, &w[p.edge]),
                        None => block,
                    });
                }
                if self.config.time_input {
                    let t = h as f64 / (q.max(2) - 1) as f64;
                    parts.push(tape.constant(Array2::from_elem((b, 1), t)));
                }
                let x = match parts.len() {
                    0 => tape.constant(Array2::zeros((b, 0))),
                    1 => parts.pop().expect("one part"),
                    _ => tape.concat_cols(&parts),
                };
                let d = slot.spec.forward(tape, bound, &nn_component(&slot.id), &x, None);
                next.push(tape.add(&states[i], &tape.scale(&d, self.config.delta_t)));
            }
            for (slot, v) in self.slots.iter().zip(&next) {
                if let Some(bad) = v.value().iter().find(|x| !x.is_finite() || x.abs() > self.config.state_bound) {
                    return Err(MnodeError::NonFinite { step: h + 1, msg: format!("node `{}` reached {bad}", slot.id) });
                }
            }
            states = next;
            out.push(self.observe(tape, &states));
        }
        Ok(out)
    }

    /// Predicted observables at t_1..t_q for a batch, as tape variables.
    pub fn forward(&self, tape: &Tape, bound: &Bound, batch: &Batch, gates: Option<&Var>) -> Result<Vec<Var>> {
        let init = self.initial_vars(tape, bound, batch)?;
        self.rollout_vars(tape, bound, init, &batch.future_inputs, gates)
    }

    /// Concatenated supernode state at t0 for one instance.
    pub fn initial_condition(&self, past_obs: &Array2<f64>, past_inputs: &Array2<f64>) -> Result<Vec<f64>> {
        if past_obs.dim() != (self.p + 1, self.obs_names.len()) || past_inputs.dim() != (self.p, self.input_names.len()) {
            return Err(MnodeError::Shape(format!(
                "history shapes {:?}/{:?} do not match p={} with {} observables and {} inputs",
                past_obs.dim(),
                past_inputs.dim(),
                self.p,
                self.obs_names.len(),
                self.input_names.len()
            )));
        }
        let batch = single_batch(past_obs, past_inputs, &Array2::zeros((0, self.input_names.len())));
        let tape = Tape::eager();
        let bound = self.params.bind(&tape);
        let vars = self.initial_vars(&tape, &bound, &batch)?;
        Ok(vars.iter().flat_map(|v| v.value().iter().copied().collect::<Vec<_>>()).collect())
    }

    /// Rolls the concatenated state `init` forward over `future_inputs`
    /// (q × m); returns q × |obs|.
    pub fn rollout(&self, init: &[f64], future_inputs: &Array2<f64>) -> Result<Array2<f64>> {
        if init.len() != self.state_dim() || future_inputs.ncols() != self.input_names.len() {
            return Err(MnodeError::Shape(format!(
                "state of length {} and {} input columns; expected {} and {}",
                init.len(),
                future_inputs.ncols(),
                self.state_dim(),
                self.input_names.len()
            )));
        }
        let tape = Tape::eager();
        let bound = self.params.bind(&tape);
        let states = self
            .slots
            .iter()
            .map(|s| tape.constant(Array2::from_shape_vec((1, s.dim), init[s.offset..s.offset + s.dim].to_vec()).expect("block")))
            .collect();
        let steps: Vec<Array2<f64>> = future_inputs.rows().into_iter().map(|r| r.to_owned().insert_axis(ndarray::Axis(0))).collect();
        let outs = self.rollout_vars(&tape, &bound, states, &steps, None)?;
        let mut y = Array2::zeros((outs.len(), self.obs_names.len()));
        for (h, v) in outs.iter().enumerate() {
            y.row_mut(h).assign(&v.value().row(0));
        }
        Ok(y)
    }

    /// Predictions for every instance, each q × |obs|.
    pub fn predict(&self, ds: &Dataset) -> Result<Vec<Array2<f64>>> {
        self.predict_gated(ds, None)
    }

    /// Predictions with fixed multiplicative edge gates over `weight_edges`.
    pub fn predict_gated(&self, ds: &Dataset, gates: Option<&[f64]>) -> Result<Vec<Array2<f64>>> {
        self.check_dataset(ds)?;
        let mut preds = Vec::with_capacity(ds.len());
        for chunk in ds.chunks(2048) {
            let batch = chunk.batch();
            let tape = Tape::eager();
            let bound = self.params.bind(&tape);
            let g = gates.map(|g| tape.constant(Array2::from_shape_vec((1, g.len()), g.to_vec()).expect("row")));
            let outs = self.forward(&tape, &bound, &batch, g.as_ref())?;
            for b in 0..batch.size {
                let mut y = Array2::zeros((outs.len(), self.obs_names.len()));
                for (h, v) in outs.iter().enumerate() {
                    y.row_mut(h).assign(&v.value().row(b));
                }
                preds.push(y);
            }
        }
        Ok(preds)
    }

    pub fn to_checkpoint(&self) -> String {
        let ck = ModelCheckpoint {
            version: MODEL_VERSION,
            config: self.config,
            graph: serde_json::from_str(&self.graph.to_json_string()).expect("graph json"),
            obs_names: self.obs_names.clone(),
            input_names: self.input_names.clone(),
            p: self.p,
            share_map: self.share_map.iter().filter(|(e, c)| e != c).map(|(e, c)| (e.clone(), c.clone())).collect(),
            params: serde_json::from_str(&self.params.to_checkpoint()).expect("params json"),
        };
        let mut text = serde_json::to_string_pretty(&ck).expect("model is serializable");
        text.push('\n');
        text
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let ck: ModelCheckpoint = serde_json::from_str(text)?;
        if ck.version != MODEL_VERSION {
            return Err(MnodeError::Nn(NnError::Version(ck.version)));
        }
        let graph = SuperGraph::from_json_str(&ck.graph.to_string())?;
        let mut model = Self::skeleton(graph, &ck.obs_names, &ck.input_names, ck.p, ck.config)?;
        let stored: Vec<(Edge, Edge)> =
            model.share_map.iter().filter(|(e, c)| e != c).map(|(e, c)| (e.clone(), c.clone())).collect();
        if stored != ck.share_map {
            return Err(MnodeError::Binding("stored weight-sharing map disagrees with the graph".into()));
        }
        let params = ParamVector::from_checkpoint(&ck.params.to_string())?;
        let mut fresh = Self::new(model.graph.clone(), &ck.obs_names, &ck.input_names, ck.p, ck.config, 0)?.params;
        if fresh.layout() != params.layout() {
            return Err(MnodeError::Binding("parameter layout does not match the graph".into()));
        }
        fresh.values = params.values;
        model.params = fresh;
        Ok(model)
    }
}

const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelCheckpoint {
    version: u32,
    config: MnodeConfig,
    graph: serde_json::Value,
    obs_names: Vec<String>,
    input_names: Vec<String>,
    p: usize,
    share_map: Vec<(Edge, Edge)>,
    params: serde_json::Value,
}

fn single_batch(past_obs: &Array2<f64>, past_inputs: &Array2<f64>, future_inputs: &Array2<f64>) -> Batch {
    let row = |a: &Array2<f64>, t: usize| a.slice(s![t..t + 1, ..]).to_owned();
    Batch {
        size: 1,
        past_obs: (0..past_obs.nrows()).map(|t| row(past_obs, t)).collect(),
        past_inputs: (0..past_inputs.nrows()).map(|t| row(past_inputs, t)).collect(),
        future_inputs: (0..future_inputs.nrows()).map(|t| row(future_inputs, t)).collect(),
        future_obs: Vec::new(),
    }
}

#[cfg(test)]
mod tests;
