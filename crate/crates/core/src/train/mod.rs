//! Loss assembly, Adam, best-validation training, K-fold grid search, ENP,
//! and the group-LASSO reparameterization of the edge-weight penalty.

use std::collections::BTreeSet;
use std::sync::Mutex;

use ndarray::Array2;
use rand::SeedableRng;
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Batch, Dataset};
use crate::graph::Edge;
use crate::mnode::{MnodeError, MnodeModel, EDGES, EDGE_TENSOR};
use crate::nn::{value_and_grad, Bound, NnError, Tape, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}: {msg} (loss trace tail {trace:?})")]
    NonFinite { epoch: usize, msg: String, trace: Vec<f64> },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] MnodeError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regularizer {
    /// L1 on edge weights plus L2 on decoder parameters.
    HgsL1l2,
    /// Exclusive group LASSO over each node's incoming edge weights.
    Egl,
    ElasticNet,
    /// Decoder L2 only.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub regularizer: Regularizer,
    /// Edge L1 for HGS, the group weight for EGL.
    pub lambda1: f64,
    /// L2 on decoder MLP parameters.
    pub lambda2: f64,
    pub en_lambda1: f64,
    pub en_lambda2: f64,
    /// Edges left out of the edge penalty.
    pub exempt_edges: BTreeSet<Edge>,
    /// Extend the L2 term to the encoder.
    pub encoder_l2: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            regularizer: Regularizer::None,
            lambda1: 0.0,
            lambda2: 0.0,
            en_lambda1: 0.0,
            en_lambda2: 0.0,
            exempt_edges: BTreeSet::new(),
            encoder_l2: false,
        }
    }
}

impl LossConfig {
    pub fn hgs(lambda1: f64, lambda2: f64) -> Self {
        Self { regularizer: Regularizer::HgsL1l2, lambda1, lambda2, ..Self::default() }
    }

    pub fn l2_only(lambda2: f64) -> Self {
        Self { lambda2, ..Self::default() }
    }

    pub fn egl(lambda: f64, lambda2: f64) -> Self {
        Self { regularizer: Regularizer::Egl, lambda1: lambda, lambda2, ..Self::default() }
    }

    pub fn elastic_net(en_lambda1: f64, en_lambda2: f64, lambda2: f64) -> Self {
        Self { regularizer: Regularizer::ElasticNet, en_lambda1, en_lambda2, lambda2, ..Self::default() }
    }
}

fn row(v: Vec<f64>) -> Array2<f64> {
    let n = v.len();
    Array2::from_shape_vec((1, n), v).expect("row vector")
}

/// Sum of squared errors of the batch predictions.
pub fn sse_var(model: &MnodeModel, tape: &Tape, bound: &Bound, batch: &Batch, gates: Option<&Var>) -> std::result::Result<Var, MnodeError> {
    let preds = model.forward(tape, bound, batch, gates)?;
    let mut total = tape.scalar(0.0);
    for (y, t) in preds.iter().zip(&batch.future_obs) {
        total = tape.add(&total, &tape.sum_sq(&tape.sub(y, &tape.constant(t.clone()))));
    }
    Ok(total)
}

/// The active regularizer as a tape scalar. Shared weights are read once
/// through their canonical entry.
pub fn penalty_var(model: &MnodeModel, tape: &Tape, bound: &Bound, cfg: &LossConfig) -> Var {
    let mut total = tape.scalar(0.0);
    if cfg.lambda2 != 0.0 {
        let mut l2 = tape.scalar(0.0);
        for e in model.params.layout() {
            if e.component.starts_with("nn/") || (cfg.encoder_l2 && e.component == crate::mnode::ENCODER) {
                l2 = tape.add(&l2, &tape.sum_sq(bound.get(&e.component, &e.name)));
            }
        }
        total = tape.add(&total, &tape.scale(&l2, cfg.lambda2));
    }
    let Some(w) = bound.try_get(EDGES, EDGE_TENSOR) else {
        return total;
    };
    let edges = model.weight_edges();
    let mask = row(edges.iter().map(|e| f64::from(!cfg.exempt_edges.contains(e))).collect());
    let masked = tape.mul(w, &tape.constant(mask));
    match cfg.regularizer {
        Regularizer::None => {}
        Regularizer::HgsL1l2 => {
            total = tape.add(&total, &tape.scale(&tape.abs_sum(&masked), cfg.lambda1));
        }
        Regularizer::ElasticNet => {
            let l1 = tape.scale(&tape.abs_sum(&masked), cfg.en_lambda1);
            let l2 = tape.scale(&tape.sum_sq(&masked), cfg.en_lambda2);
            total = tape.add(&total, &tape.add(&l1, &l2));
        }
        Regularizer::Egl => {
            let abs = tape.abs(&masked);
            let share = model.share_map();
            let targets: BTreeSet<&str> = share.keys().map(|e| e.1.as_str()).collect();
            for v in targets {
                let counts = row(
                    edges
                        .iter()
                        .map(|c| share.iter().filter(|(e, cc)| e.1 == v && *cc == c && !cfg.exempt_edges.contains(*e)).count() as f64)
                        .collect(),
                );
                let group = tape.sum(&tape.mul(&abs, &tape.constant(counts)));
                total = tape.add(&total, &tape.scale(&tape.square(&group), cfg.lambda1));
            }
        }
    }
    total
}

pub fn loss_var(model: &MnodeModel, tape: &Tape, bound: &Bound, batch: &Batch, cfg: &LossConfig, gates: Option<&Var>) -> std::result::Result<Var, MnodeError> {
    let sse = sse_var(model, tape, bound, batch, gates)?;
    Ok(tape.add(&sse, &penalty_var(model, tape, bound, cfg)))
}

/// Penalized training objective evaluated without gradients.
pub fn loss(model: &MnodeModel, ds: &Dataset, cfg: &LossConfig) -> Result<f64> {
    model.check_dataset(ds)?;
    let tape = Tape::eager();
    let bound = model.params.bind(&tape);
    let batch = ds.batch();
    Ok(loss_var(model, &tape, &bound, &batch, cfg, None)?.scalar())
}

pub fn penalty(model: &MnodeModel, cfg: &LossConfig) -> f64 {
    let tape = Tape::eager();
    let bound = model.params.bind(&tape);
    penalty_var(model, &tape, &bound, cfg).scalar()
}

/// Sum of squared prediction errors over all instances and steps.
pub fn sse(model: &MnodeModel, ds: &Dataset) -> Result<f64> {
    sse_gated(model, ds, None)
}

pub fn sse_gated(model: &MnodeModel, ds: &Dataset, gates: Option<&[f64]>) -> Result<f64> {
    let preds = model.predict_gated(ds, gates)?;
    Ok(preds
        .iter()
        .zip(&ds.instances)
        .map(|(p, i)| (p - &i.future_obs).mapv(|e| e * e).sum())
        .sum())
}

pub fn mse(model: &MnodeModel, ds: &Dataset) -> Result<f64> {
    mse_gated(model, ds, None)
}

pub fn mse_gated(model: &MnodeModel, ds: &Dataset, gates: Option<&[f64]>) -> Result<f64> {
    let points = (ds.len() * ds.q() * ds.obs_names.len()).max(1);
    Ok(sse_gated(model, ds, gates)? / points as f64)
}

/// Closed-form minimizer over w > 0 of lambda1 w + lambda2 |G|^2 / w^2.
pub fn optimal_edge_weight(gamma_norm: f64, lambda1: f64, lambda2: f64) -> Result<f64> {
    if lambda1 <= 0.0 {
        return Err(TrainError::Config("lambda1 must be positive".into()));
    }
    Ok((2.0 * lambda2 * gamma_norm * gamma_norm / lambda1).cbrt())
}

/// Group penalty weight equivalent to the (lambda1, lambda2) edge penalty.
pub fn lambda3(lambda1: f64, lambda2: f64) -> f64 {
    3.0 * 2f64.powf(-2.0 / 3.0) * lambda1.powf(2.0 / 3.0) * lambda2.cbrt()
}

/// Folds every edge weight into the first-layer rows it scales, leaving
/// unit weights. Predictions are unchanged.
pub fn reparameterize(model: &MnodeModel) -> MnodeModel {
    let mut out = model.clone();
    let Some(wr) = model.weight_range() else {
        return out;
    };
    for e in model.share_map().keys() {
        let w = model.edge_weight(e).expect("mapped edge");
        let (_, range) = model.first_layer_block(e).expect("edge into a state node");
        for i in range {
            out.params.values[i] = w * model.params.values[i];
        }
    }
    for i in wr {
        out.params.values[i] = 1.0;
    }
    out
}

fn first_layer_norms(model: &MnodeModel) -> (Vec<f64>, f64) {
    let mut in_blocks = vec![false; model.params.len()];
    let mut norms = Vec::new();
    for e in model.share_map().keys() {
        let (_, range) = model.first_layer_block(e).expect("edge into a state node");
        norms.push(range.clone().map(|i| model.params.values[i].powi(2)).sum::<f64>().sqrt());
        for i in range {
            in_blocks[i] = true;
        }
    }
    let rest: f64 = model
        .decoder_ranges()
        .into_iter()
        .flatten()
        .filter(|&i| !in_blocks[i])
        .map(|i| model.params.values[i].powi(2))
        .sum();
    (norms, rest)
}

/// lambda2 |Theta~|^2 + lambda3 sum |Gamma_e|^(2/3), with Theta~ every decoder
/// parameter outside the edge blocks of the first layer.
pub fn group_lasso_penalty(reparam: &MnodeModel, lambda2: f64, lambda3: f64) -> f64 {
    let (norms, rest) = first_layer_norms(reparam);
    lambda2 * rest + lambda3 * norms.iter().map(|n| n.powf(2.0 / 3.0)).sum::<f64>()
}

pub fn group_lasso_loss(reparam: &MnodeModel, ds: &Dataset, lambda2: f64, lambda3: f64) -> Result<f64> {
    Ok(sse(reparam, ds)? + group_lasso_penalty(reparam, lambda2, lambda3))
}

/// The HGS penalty with each edge weight set to its optimum given the
/// reparameterized blocks Gamma (the first-layer rows of `reparam`). Needs an
/// unshared, unexempted model.
pub fn minimized_edge_penalty(reparam: &MnodeModel, lambda1: f64, lambda2: f64) -> Result<(MnodeModel, f64)> {
    let mut m = reparam.clone();
    for e in reparam.share_map().keys() {
        let (_, range) = reparam.first_layer_block(e).expect("edge block");
        let norm = range.clone().map(|i| reparam.params.values[i].powi(2)).sum::<f64>().sqrt();
        let w = optimal_edge_weight(norm, lambda1, lambda2)?;
        for i in range {
            m.params.values[i] = if w > 0.0 { reparam.params.values[i] / w } else { 0.0 };
        }
        m.set_edge_weight(e, w)?;
    }
    let p = penalty(&m, &LossConfig::hgs(lambda1, lambda2));
    Ok((m, p))
}

/// Number of parameters with magnitude above `threshold`.
pub fn enp(values: &[f64], threshold: f64) -> usize {
    values.iter().filter(|v| v.abs() > threshold).count()
}

pub const ENP_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Seeds stochastic parts of the objective (edge sampling).
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(epochs: usize, learning_rate: f64, seed: u64) -> Self {
        Self { epochs, learning_rate, seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Penalized objective before the step.
    pub train_loss: f64,
    /// Validation MSE after the step; infinite if the rollout blew up.
    pub val_mse: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MnodeModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    /// Extra parameters owned by the objective (edge logits), at the best epoch.
    pub extra: Vec<f64>,
}

/// Stochastic multiplicative edge gates computed from objective-owned
/// parameters, redrawn on every training pass.
pub trait Gates: Sync {
    fn extra_params(&self) -> Vec<f64>;
    fn gates(&self, tape: &Tape, extra: &Var, rng: &mut Pcg64) -> std::result::Result<Var, String>;
    /// Deterministic gates used for validation and prediction.
    fn frozen(&self, extra: &[f64]) -> std::result::Result<Vec<f64>, String>;
}

fn nonfinite(epoch: usize, msg: String, history: &[EpochRecord]) -> TrainError {
    let trace = history.iter().rev().take(5).rev().map(|r| r.train_loss).collect();
    TrainError::NonFinite { epoch, msg, trace }
}

/// Full-batch Adam for `epochs` steps, returning the parameters of the epoch
/// with lowest validation MSE.
pub fn train(model: MnodeModel, train_set: &Dataset, val_set: &Dataset, tc: &TrainConfig, lc: &LossConfig) -> Result<TrainOutcome> {
    train_gated(model, train_set, val_set, tc, lc, None)
}

pub fn train_gated(
    mut model: MnodeModel,
    train_set: &Dataset,
    val_set: &Dataset,
    tc: &TrainConfig,
    lc: &LossConfig,
    gates: Option<&dyn Gates>,
) -> Result<TrainOutcome> {
    if tc.epochs == 0 {
        return Err(TrainError::Config("epochs must be at least 1".into()));
    }
    if train_set.is_empty() {
        return Err(TrainError::Config("empty training set".into()));
    }
    model.check_dataset(train_set)?;
    model.check_dataset(val_set)?;
    let batch = train_set.batch();
    let n_model = model.params.len();
    let mut extra = gates.map(|g| g.extra_params()).unwrap_or_default();
    let mut adam = Adam::new(n_model + extra.len());
    let mut rng = Pcg64::seed_from_u64(tc.seed);
    let mut history = Vec::with_capacity(tc.epochs);
    let mut best: Option<(usize, f64, crate::nn::ParamVector, Vec<f64>)> = None;

    for epoch in 1..=tc.epochs {
        let mut pv = model.params.clone();
        if !extra.is_empty() {
            pv.push("objective", "extra", &row(extra.clone()));
        }
        let result = value_and_grad(&pv, |tape, bound| {
            let g = match gates {
                Some(gt) => Some(gt.gates(tape, bound.get("objective", "extra"), &mut rng).map_err(NnError::Shape)?),
                None => None,
            };
            loss_var(&model, tape, bound, &batch, lc, g.as_ref()).map_err(|e| match e {
                MnodeError::NonFinite { .. } => NnError::NonFinite(e.to_string()),
                other => NnError::Shape(other.to_string()),
            })
        });
        let (value, grads) = match result {
            Ok(v) => v,
            Err(NnError::NonFinite(msg)) => return Err(nonfinite(epoch, msg, &history)),
            Err(e) => return Err(TrainError::Config(e.to_string())),
        };
        let mut flat = model.params.values.clone();
        flat.extend_from_slice(&extra);
        adam.step(&mut flat, &grads, tc.learning_rate);
        extra = flat.split_off(n_model);
        model.params.values = flat;

        let frozen = match gates {
            Some(g) => Some(g.frozen(&extra).map_err(TrainError::Config)?),
            None => None,
        };
        let val_mse = if val_set.is_empty() {
            value / (batch.size * train_set.q() * train_set.obs_names.len()).max(1) as f64
        } else {
            match mse_gated(&model, val_set, frozen.as_deref()) {
                Ok(v) if v.is_finite() => v,
                Ok(_) | Err(TrainError::Model(MnodeError::NonFinite { .. })) => f64::INFINITY,
                Err(e) => return Err(e),
            }
        };
        history.push(EpochRecord { epoch, train_loss: value, val_mse });
        if best.as_ref().is_none_or(|b| val_mse < b.1) {
            best = Some((epoch, val_mse, model.params.clone(), extra.clone()));
        }
    }
    let (best_epoch, best_val_mse, params, extra) = best.expect("at least one epoch");
    model.params = params;
    Ok(TrainOutcome { model, history, best_epoch, best_val_mse, extra })
}

/// Index-based K-fold split: contiguous folds, the first `n % k` one longer.
pub fn kfold_indices(n: usize, k: usize) -> Vec<Vec<usize>> {
    let base = n / k;
    let extra = n % k;
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        out.push((start..start + len).collect());
        start += len;
    }
    out
}

/// (train, validation) indices for fold `f`, after applying `perm`.
pub fn fold_split(n: usize, k: usize, f: usize, perm: Option<&[usize]>) -> (Vec<usize>, Vec<usize>) {
    let map = |i: usize| perm.map_or(i, |p| p[i]);
    let folds = kfold_indices(n, k);
    let val = folds[f].iter().map(|&i| map(i)).collect();
    let train = folds.iter().enumerate().filter(|(g, _)| *g != f).flat_map(|(_, v)| v.iter().map(|&i| map(i))).collect();
    (train, val)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub loss: LossConfig,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointResult {
    pub point: GridPoint,
    pub fold_val_mse: Vec<f64>,
    pub mean_val_mse: f64,
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub points: Vec<PointResult>,
    pub best: usize,
    /// Best configuration retrained on split 1.
    pub final_outcome: TrainOutcome,
}

#[derive(Debug, Clone)]
pub struct CvConfig {
    pub k: usize,
    pub epochs: usize,
    pub seed: u64,
    pub permutation: Option<Vec<usize>>,
    pub threads: usize,
}

/// Worker count from `HGS_THREADS`, defaulting to the available cores.
pub fn thread_budget() -> usize {
    std::env::var("HGS_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Order-preserving map over a bounded pool of scoped threads.
pub fn parallel_map<T, R, F>(items: Vec<T>, threads: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    let n = items.len();
    if threads <= 1 || n <= 1 {
        return items.into_iter().map(f).collect();
    }
    let queue = Mutex::new(items.into_iter().enumerate());
    let results: Mutex<Vec<Option<R>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.min(n) {
            s.spawn(|| loop {
                let next = queue.lock().expect("queue lock").next();
                let Some((i, item)) = next else { break };
                let r = f(item);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    results.into_inner().expect("results lock").into_iter().map(|r| r.expect("every job ran")).collect()
}

/// Grid search with K-fold cross-validation. Every fit starts from
/// `factory(seed)`; a diverging fit scores infinity. The final model is the
/// best point's fit on split 1 (folds 2..K train, fold 1 validates).
pub fn grid_search_cv<F>(factory: F, ds: &Dataset, grid: &[GridPoint], cv: &CvConfig) -> Result<CvOutcome>
where
    F: Fn(u64) -> std::result::Result<MnodeModel, MnodeError> + Sync,
{
    if grid.is_empty() {
        return Err(TrainError::Config("empty hyper-parameter grid".into()));
    }
    if cv.k < 2 || ds.len() < cv.k {
        return Err(TrainError::Config(format!("need K >= 2 and at least K instances (K={}, n={})", cv.k, ds.len())));
    }
    let jobs: Vec<(usize, usize)> = (0..grid.len()).flat_map(|g| (0..cv.k).map(move |f| (g, f))).collect();
    let outcomes = parallel_map(jobs.clone(), cv.threads, |(g, f)| -> Result<Option<TrainOutcome>> {
        let (tr, va) = fold_split(ds.len(), cv.k, f, cv.permutation.as_deref());
        let model = factory(cv.seed)?;
        let tc = TrainConfig::new(cv.epochs, grid[g].learning_rate, cv.seed);
        match train(model, &ds.subset(&tr), &ds.subset(&va), &tc, &grid[g].loss) {
            Ok(o) => Ok(Some(o)),
            Err(TrainError::NonFinite { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    });
    let mut points: Vec<PointResult> =
        grid.iter().map(|p| PointResult { point: p.clone(), fold_val_mse: vec![0.0; cv.k], mean_val_mse: 0.0 }).collect();
    let mut first_split: Vec<Option<TrainOutcome>> = vec![None; grid.len()];
    for ((g, f), o) in jobs.into_iter().zip(outcomes) {
        let o = o?;
        points[g].fold_val_mse[f] = o.as_ref().map_or(f64::INFINITY, |o| o.best_val_mse);
        if f == 0 {
            first_split[g] = o;
        }
    }
    for p in &mut points {
        p.mean_val_mse = p.fold_val_mse.iter().sum::<f64>() / cv.k as f64;
    }
    let best = (0..points.len())
        .min_by(|&a, &b| points[a].mean_val_mse.total_cmp(&points[b].mean_val_mse))
        .expect("nonempty grid");
    let final_outcome = first_split[best]
        .take()
        .ok_or_else(|| TrainError::Config("every grid point diverged".into()))?;
    Ok(CvOutcome { points, best, final_outcome })
}
