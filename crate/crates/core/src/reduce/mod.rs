//! Edge-subset search baselines on the unaugmented graph: random subgraphs,
//! backward greedy deletion, and learned subgraph sampling. Each candidate
//! is scored by training an unweighted MNODE with decoder L2 only.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::graph::{Edge, GraphError, MechGraph, SuperGraph};
use crate::mnode::{MnodeConfig, MnodeModel};
use crate::nn::{Tape, Var};
use crate::train::{parallel_map, train, train_gated, Gates, LossConfig, TrainConfig, TrainError, TrainOutcome};

#[derive(Debug, Error)]
pub enum ReduceError {
    #[error("invalid reduction request: {0}")]
    Invalid(String),
    #[error("every candidate diverged")]
    AllDiverged,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T> = std::result::Result<T, ReduceError>;

/// Settings shared by every candidate fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NrSpec {
    pub mnode: MnodeConfig,
    pub lambda2: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub threads: usize,
}

impl NrSpec {
    pub fn new(lambda2: f64, learning_rate: f64, epochs: usize, seed: u64) -> Self {
        let mnode = MnodeConfig { weighted: false, share_weights: false, ..MnodeConfig::default() };
        Self { mnode, lambda2, epochs, learning_rate, seed, threads: 1 }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig::new(self.epochs, self.learning_rate, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub edges: Vec<Edge>,
    /// Best validation MSE; infinite when training diverged.
    pub val_loss: f64,
    pub label: String,
}

#[derive(Debug, Clone)]
pub struct ReductionResult {
    pub graph: MechGraph,
    pub val_loss: f64,
    pub trace: Vec<TraceEntry>,
    pub outcome: TrainOutcome,
}

/// Trains the unweighted model on `graph`. Divergence scores infinity.
pub fn fit_nr(graph: &MechGraph, train_set: &Dataset, val_set: &Dataset, spec: &NrSpec) -> Result<Option<TrainOutcome>> {
    let model = MnodeModel::for_dataset(SuperGraph::lift(graph), train_set, spec.mnode, spec.seed).map_err(TrainError::from)?;
    match train(model, train_set, val_set, &spec.train_config(), &LossConfig::l2_only(spec.lambda2)) {
        Ok(o) => Ok(Some(o)),
        Err(TrainError::NonFinite { .. }) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn score(o: &Option<TrainOutcome>) -> f64 {
    o.as_ref().map_or(f64::INFINITY, |o| o.best_val_mse)
}

fn argmin(losses: &[f64]) -> Option<usize> {
    (0..losses.len()).filter(|&i| losses[i].is_finite()).min_by(|&a, &b| losses[a].total_cmp(&losses[b]))
}

fn fit_all(
    graph: &MechGraph,
    subsets: Vec<BTreeSet<Edge>>,
    train_set: &Dataset,
    val_set: &Dataset,
    spec: &NrSpec,
) -> Result<Vec<(MechGraph, Option<TrainOutcome>)>> {
    let fits = parallel_map(subsets, spec.threads, |edges| -> Result<(MechGraph, Option<TrainOutcome>)> {
        let g = graph.with_edges(&edges)?;
        let o = fit_nr(&g, train_set, val_set, spec)?;
        Ok((g, o))
    });
    fits.into_iter().collect()
}

/// Uniformly sampled subgraphs keeping ceil((1-p)|E|) edges, R per ratio.
pub fn reduce_random(graph: &MechGraph, train_set: &Dataset, val_set: &Dataset, r: usize, ratios: &[f64], spec: &NrSpec) -> Result<ReductionResult> {
    if r == 0 || ratios.is_empty() {
        return Err(ReduceError::Invalid("need R >= 1 and at least one ratio".into()));
    }
    if let Some(p) = ratios.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(ReduceError::Invalid(format!("ratio {p} outside (0, 1)")));
    }
    let edges: Vec<Edge> = graph.edges().iter().cloned().collect();
    if edges.is_empty() {
        return Err(ReduceError::Invalid("graph has no edges".into()));
    }
    let mut rng = Pcg64::seed_from_u64(spec.seed);
    let mut subsets = Vec::new();
    let mut labels = Vec::new();
    for &p in ratios {
        let keep = ((1.0 - p) * edges.len() as f64).ceil() as usize;
        for k in 0..r {
            let mut idx = sample(&mut rng, edges.len(), keep).into_vec();
            idx.sort_unstable();
            subsets.push(idx.into_iter().map(|i| edges[i].clone()).collect::<BTreeSet<_>>());
            labels.push(format!("p={p} r={}", k + 1));
        }
    }
    let fits = fit_all(graph, subsets, train_set, val_set, spec)?;
    let trace: Vec<TraceEntry> = fits
        .iter()
        .zip(labels)
        .map(|((g, o), label)| TraceEntry { edges: g.edges().iter().cloned().collect(), val_loss: score(o), label })
        .collect();
    let losses: Vec<f64> = trace.iter().map(|t| t.val_loss).collect();
    let best = argmin(&losses).ok_or(ReduceError::AllDiverged)?;
    let (g, o) = fits.into_iter().nth(best).expect("index in range");
    Ok(ReductionResult { graph: g, val_loss: losses[best], trace, outcome: o.expect("finite score") })
}

/// Initial loss bound; the first round's best finite candidate is accepted.
pub const GREEDY_MIN_LOSS: f64 = 1e7;

/// Backward stepwise deletion: each round retrains with every single edge
/// removed and accepts the best strictly improving removal.
pub fn reduce_greedy(graph: &MechGraph, train_set: &Dataset, val_set: &Dataset, spec: &NrSpec) -> Result<ReductionResult> {
    if graph.edges().is_empty() {
        return Err(ReduceError::Invalid("graph has no edges".into()));
    }
    let mut current: Vec<Edge> = graph.edges().iter().cloned().collect();
    let mut min_loss = GREEDY_MIN_LOSS;
    let mut trace = Vec::new();
    let mut accepted: Option<(MechGraph, TrainOutcome)> = None;
    let mut round = 0;
    while !current.is_empty() {
        round += 1;
        let subsets: Vec<BTreeSet<Edge>> = (0..current.len())
            .map(|i| current.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, e)| e.clone()).collect())
            .collect();
        let fits = fit_all(graph, subsets, train_set, val_set, spec)?;
        let losses: Vec<f64> = fits.iter().map(|(_, o)| score(o)).collect();
        for (i, (g, _)) in fits.iter().enumerate() {
            trace.push(TraceEntry {
                edges: g.edges().iter().cloned().collect(),
                val_loss: losses[i],
                label: format!("round {round} without {}->{}", current[i].0, current[i].1),
            });
        }
        match argmin(&losses) {
            Some(best) if losses[best] < min_loss => {
                min_loss = losses[best];
                current.remove(best);
                let (g, o) = fits.into_iter().nth(best).expect("index in range");
                accepted = Some((g, o.expect("finite score")));
            }
            _ => break,
        }
    }
    let (g, outcome) = match accepted {
        Some(a) => a,
        None => {
            let o = fit_nr(graph, train_set, val_set, spec)?.ok_or(ReduceError::AllDiverged)?;
            (graph.clone(), o)
        }
    };
    let val_loss = outcome.best_val_mse;
    Ok(ReductionResult { graph: g, val_loss, trace, outcome })
}

/// Inverse temperature applied to the perturbed log-probabilities.
pub const NS_SHARPNESS: f64 = 10.0;
pub const NS_MAX_RETRIES: usize = 10;

/// Rounds to two decimals and marks edges with a positive entry in any row.
pub fn ns_mask(w: &Array2<f64>) -> Vec<f64> {
    (0..w.ncols())
        .map(|e| f64::from(w.column(e).iter().any(|&v| (v * 100.0).round() / 100.0 > 0.0)))
        .collect()
}

/// Perturbation -10 log(-log eps) for eps ~ U(0, 1).
fn gumbel(rng: &mut Pcg64, k: usize, n: usize) -> Array2<f64> {
    Array2::from_shape_fn((k, n), |_| {
        let eps: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        -NS_SHARPNESS * (-eps.ln()).ln()
    })
}

/// Row-normalized sample weights. With pi = softmax(alpha) the row
/// normalization cancels the softmax denominator, so each row is
/// softmax(10 alpha + g).
pub fn ns_weights(alpha: &[f64], g: &Array2<f64>) -> Array2<f64> {
    let tape = Tape::eager();
    let a = tape.constant(Array2::from_shape_vec((1, alpha.len()), alpha.to_vec()).expect("row"));
    ns_weights_var(&tape, &a, g).value().clone()
}

fn ns_weights_var(tape: &Tape, alpha: &Var, g: &Array2<f64>) -> Var {
    tape.softmax_rows(&tape.add_row(&tape.constant(g.clone()), &tape.scale(alpha, NS_SHARPNESS)))
}

/// Learned edge-sampling gates: K perturbed samples per pass; an edge is on
/// when its rounded weight is positive in some sample. Gradients reach the
/// logits through the summed soft weights.
#[derive(Debug, Clone)]
pub struct NsGates {
    pub k: usize,
    pub n_edges: usize,
    pub alpha0: Vec<f64>,
    /// Perturbation drawn once at initialization, used for evaluation.
    pub frozen_noise: Array2<f64>,
}

impl NsGates {
    pub fn new(k: usize, n_edges: usize, seed: u64) -> Self {
        let mut rng = Pcg64::seed_from_u64(seed ^ 0x4e53);
        let alpha0 = (0..n_edges).map(|_| rng.sample(StandardNormal)).collect();
        let frozen_noise = gumbel(&mut rng, k, n_edges);
        Self { k, n_edges, alpha0, frozen_noise }
    }
}

impl Gates for NsGates {
    fn extra_params(&self) -> Vec<f64> {
        self.alpha0.clone()
    }

    fn gates(&self, tape: &Tape, extra: &Var, rng: &mut Pcg64) -> std::result::Result<Var, String> {
        for _ in 0..=NS_MAX_RETRIES {
            let w = ns_weights_var(tape, extra, &gumbel(rng, self.k, self.n_edges));
            let mask = ns_mask(w.value());
            if mask.iter().all(|&m| m == 0.0) {
                continue;
            }
            let soft = tape.sum_rows(&w);
            let hard = Array2::from_shape_vec((1, mask.len()), mask).expect("row") - soft.value();
            return Ok(tape.add(&soft, &tape.constant(hard)));
        }
        Err(format!("edge sampling rounded to an empty subgraph {} times", NS_MAX_RETRIES + 1))
    }

    fn frozen(&self, extra: &[f64]) -> std::result::Result<Vec<f64>, String> {
        let mask = ns_mask(&ns_weights(extra, &self.frozen_noise));
        if mask.iter().all(|&m| m == 0.0) {
            return Err("frozen edge sample is empty".into());
        }
        Ok(mask)
    }
}

/// Learns edge logits jointly with a gated unweighted model, takes the
/// subgraph selected under the frozen perturbation, and retrains on it.
pub fn reduce_neuralsparse(graph: &MechGraph, train_set: &Dataset, val_set: &Dataset, k: usize, spec: &NrSpec) -> Result<ReductionResult> {
    let edges: Vec<Edge> = graph.edges().iter().cloned().collect();
    if k == 0 || k > edges.len() {
        return Err(ReduceError::Invalid(format!("K = {k} outside 1..={}", edges.len())));
    }
    let model = MnodeModel::for_dataset(SuperGraph::lift(graph), train_set, spec.mnode, spec.seed).map_err(TrainError::from)?;
    debug_assert_eq!(model.weight_edges(), &edges[..]);
    let gates = NsGates::new(k, edges.len(), spec.seed);
    let sampled = match train_gated(model, train_set, val_set, &spec.train_config(), &LossConfig::l2_only(spec.lambda2), Some(&gates)) {
        Ok(o) => o,
        Err(TrainError::NonFinite { .. }) => return Err(ReduceError::AllDiverged),
        Err(e) => return Err(e.into()),
    };
    let mask = gates.frozen(&sampled.extra).map_err(ReduceError::Invalid)?;
    let kept: BTreeSet<Edge> = edges.iter().zip(&mask).filter(|(_, &m)| m > 0.0).map(|(e, _)| e.clone()).collect();
    let g = graph.with_edges(&kept)?;
    let outcome = fit_nr(&g, train_set, val_set, spec)?.ok_or(ReduceError::AllDiverged)?;
    let trace = vec![TraceEntry {
        edges: kept.into_iter().collect(),
        val_loss: outcome.best_val_mse,
        label: format!("K={k}, gated validation MSE {}", sampled.best_val_mse),
    }];
    Ok(ReductionResult { graph: g, val_loss: outcome.best_val_mse, trace, outcome })
}

#[cfg(test)]
mod tests;
