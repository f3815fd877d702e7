//! Method dispatch: graph preparation, hyper-parameter grids and fitting for
//! every model-reduction method.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use hgs::data::Dataset;
use hgs::graph::{augment, build_synthetic_graph, build_uva_graph, condense, Edge, MechGraph, SuperGraph, SyntheticKind, UvaOptions};
use hgs::mnode::{MnodeConfig, MnodeModel};
use hgs::reduce::{reduce_greedy, reduce_neuralsparse, reduce_random, NrSpec, ReductionResult};
use hgs::train::{fold_split, grid_search_cv, parallel_map, CvConfig, GridPoint, LossConfig, PointResult, Regularizer, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Hgs,
    Nr,
    Egl,
    En,
    Ns,
    Gd,
    Rd,
}

impl Method {
    pub const ALL: [Method; 7] = [Method::Hgs, Method::Nr, Method::Egl, Method::En, Method::Ns, Method::Gd, Method::Rd];

    pub fn name(self) -> &'static str {
        match self {
            Method::Hgs => "hgs",
            Method::Nr => "nr",
            Method::Egl => "egl",
            Method::En => "en",
            Method::Ns => "ns",
            Method::Gd => "gd",
            Method::Rd => "rd",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown method `{s}` (valid: hgs, nr, egl, en, ns, gd, rd)"))
    }
}

/// Where the starting mechanistic graph comes from: `builtin:uva`,
/// `builtin:uva-vitals`, `builtin:refined`, `builtin:comprehensive`, or a
/// path to a graph JSON file.
pub fn load_graph(source: &str) -> Result<MechGraph> {
    Ok(match source {
        "builtin:uva" => build_uva_graph(UvaOptions::default()),
        "builtin:uva-vitals" => build_uva_graph(UvaOptions { vitals: true }),
        "builtin:refined" => build_synthetic_graph(SyntheticKind::Refined),
        "builtin:comprehensive" => build_synthetic_graph(SyntheticKind::Comprehensive),
        path => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading graph {path}"))?;
            MechGraph::from_json_str(&text).with_context(|| format!("parsing graph {path}"))?
        }
    })
}

/// Per-method settings. Grid lists are crossed; fixed-setting methods (GD,
/// RD) take the first entry of each list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodConfig {
    pub method: Method,
    pub epochs: usize,
    pub folds: usize,
    /// Shuffle instances before the index split.
    pub permute: bool,
    pub mnode: MnodeConfig,
    /// Edge L1 (HGS), group weight (EGL) or elastic-net L1 (EN).
    pub lambda1: Vec<f64>,
    /// Decoder L2 for HGS/NR/NS/GD/RD, elastic-net L2 for EN.
    pub lambda2: Vec<f64>,
    pub learning_rate: Vec<f64>,
    /// Decoder L2 for EGL and EN.
    pub theta_lambda2: f64,
    /// Subgraph sizes for NS; values above the edge count are skipped.
    pub k: Vec<usize>,
    pub rd_repeats: usize,
    pub rd_ratios: Vec<f64>,
    pub exempt_edges: Vec<Edge>,
    pub encoder_l2: bool,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            method: Method::Hgs,
            epochs: 600,
            folds: 4,
            permute: false,
            mnode: MnodeConfig::default(),
            lambda1: vec![1e-6, 1e-7],
            lambda2: vec![1e-6, 1e-7, 1e-8],
            learning_rate: vec![1e-2, 1e-3],
            theta_lambda2: 1e-6,
            k: vec![2, 4, 6, 8, 10],
            rd_repeats: 5,
            rd_ratios: vec![0.1, 0.2, 0.4],
            exempt_edges: Vec::new(),
            encoder_l2: false,
        }
    }
}

impl MethodConfig {
    pub fn new(method: Method) -> Self {
        Self { method, ..Self::default() }
    }

    /// Model options implied by the method.
    pub fn mnode_config(&self) -> MnodeConfig {
        let weighted = matches!(self.method, Method::Hgs | Method::Egl | Method::En);
        MnodeConfig { weighted, share_weights: weighted && self.mnode.share_weights, ..self.mnode }
    }

    /// HGS condenses and augments; every other method keeps the graph.
    pub fn prepare_graph(&self, g: &MechGraph) -> Result<SuperGraph> {
        Ok(match self.method {
            Method::Hgs => augment(&condense(g))?,
            _ => SuperGraph::lift(g),
        })
    }

    fn loss(&self, regularizer: Regularizer, l1: f64, l2: f64) -> LossConfig {
        let mut loss = match regularizer {
            Regularizer::HgsL1l2 => LossConfig::hgs(l1, l2),
            Regularizer::Egl => LossConfig::egl(l1, self.theta_lambda2),
            Regularizer::ElasticNet => LossConfig::elastic_net(l1, l2, self.theta_lambda2),
            Regularizer::None => LossConfig::l2_only(l2),
        };
        loss.exempt_edges = self.exempt_edges.iter().cloned().collect::<BTreeSet<_>>();
        loss.encoder_l2 = self.encoder_l2;
        loss
    }

    /// The grid for the penalized-training methods.
    pub fn grid(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        let push = |out: &mut Vec<GridPoint>, loss: LossConfig| {
            for &lr in &self.learning_rate {
                out.push(GridPoint { loss: loss.clone(), learning_rate: lr });
            }
        };
        match self.method {
            Method::Hgs | Method::En => {
                let reg = if self.method == Method::Hgs { Regularizer::HgsL1l2 } else { Regularizer::ElasticNet };
                for &l1 in &self.lambda1 {
                    for &l2 in &self.lambda2 {
                        push(&mut out, self.loss(reg, l1, l2));
                    }
                }
            }
            Method::Egl => {
                for &l in &self.lambda1 {
                    push(&mut out, self.loss(Regularizer::Egl, l, 0.0));
                }
            }
            _ => {
                for &l2 in &self.lambda2 {
                    push(&mut out, self.loss(Regularizer::None, 0.0, l2));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.folds < 2 {
            bail!("epochs must be positive and folds at least 2");
        }
        if self.learning_rate.is_empty() || self.lambda2.is_empty() {
            bail!("learning_rate and lambda2 grids must be nonempty");
        }
        if matches!(self.method, Method::Hgs | Method::Egl | Method::En) && self.lambda1.is_empty() {
            bail!("method {} needs a nonempty lambda1 grid", self.method);
        }
        Ok(())
    }
}

/// What a fit reports besides the model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitSummary {
    pub method: Method,
    pub selected: serde_json::Value,
    pub val_mse: f64,
    pub cv: Vec<PointResult>,
    pub kept_edges: Option<Vec<Edge>>,
    pub history_len: usize,
    pub best_epoch: usize,
}

pub struct Fit {
    pub model: MnodeModel,
    pub summary: FitSummary,
    pub outcome: TrainOutcome,
}

fn permutation(n: usize, permute: bool, seed: u64) -> Option<Vec<usize>> {
    permute.then(|| {
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(&mut Pcg64::seed_from_u64(seed));
        p
    })
}

/// Fits `cfg.method` on `ds`. Grid methods use K-fold CV and keep the best
/// point's fit on split 1; GD and RD search on split 1 at fixed settings.
pub fn fit(cfg: &MethodConfig, graph: &MechGraph, ds: &Dataset, seed: u64, threads: usize) -> Result<Fit> {
    cfg.validate()?;
    let perm = permutation(ds.len(), cfg.permute, seed);
    match cfg.method {
        Method::Hgs | Method::Nr | Method::Egl | Method::En => {
            let sg = cfg.prepare_graph(graph)?;
            let mc = cfg.mnode_config();
            let factory = |s: u64| MnodeModel::for_dataset(sg.clone(), ds, mc, s);
            let grid = cfg.grid();
            let cv = CvConfig { k: cfg.folds, epochs: cfg.epochs, seed, permutation: perm, threads };
            let out = grid_search_cv(factory, ds, &grid, &cv)?;
            let best = &out.points[out.best];
            let summary = FitSummary {
                method: cfg.method,
                selected: serde_json::to_value(&best.point)?,
                val_mse: out.final_outcome.best_val_mse,
                cv: out.points.clone(),
                kept_edges: None,
                history_len: out.final_outcome.history.len(),
                best_epoch: out.final_outcome.best_epoch,
            };
            Ok(Fit { model: out.final_outcome.model.clone(), summary, outcome: out.final_outcome })
        }
        Method::Ns => fit_ns(cfg, graph, ds, seed, threads, perm.as_deref()),
        Method::Gd | Method::Rd => {
            let (tr, va) = fold_split(ds.len(), cfg.folds, 0, perm.as_deref());
            let mut spec = NrSpec::new(cfg.lambda2[0], cfg.learning_rate[0], cfg.epochs, seed);
            spec.mnode = cfg.mnode_config();
            spec.threads = threads;
            let (train_set, val_set) = (ds.subset(&tr), ds.subset(&va));
            let r = if cfg.method == Method::Gd {
                reduce_greedy(graph, &train_set, &val_set, &spec)?
            } else {
                reduce_random(graph, &train_set, &val_set, cfg.rd_repeats, &cfg.rd_ratios, &spec)?
            };
            let selected = serde_json::json!({ "lambda2": spec.lambda2, "learning_rate": spec.learning_rate });
            Ok(reduction_fit(cfg.method, r, selected, Vec::new()))
        }
    }
}

fn reduction_fit(method: Method, r: ReductionResult, selected: serde_json::Value, cv: Vec<PointResult>) -> Fit {
    let summary = FitSummary {
        method,
        selected,
        val_mse: r.val_loss,
        cv,
        kept_edges: Some(r.graph.edges().iter().cloned().collect()),
        history_len: r.outcome.history.len(),
        best_epoch: r.outcome.best_epoch,
    };
    Fit { model: r.outcome.model.clone(), summary, outcome: r.outcome }
}

fn fit_ns(cfg: &MethodConfig, graph: &MechGraph, ds: &Dataset, seed: u64, threads: usize, perm: Option<&[usize]>) -> Result<Fit> {
    let n_edges = graph.edges().len();
    let ks: Vec<usize> = cfg.k.iter().copied().filter(|&k| k >= 1 && k <= n_edges).collect();
    if ks.is_empty() {
        bail!("no K in {:?} fits a graph with {n_edges} edges", cfg.k);
    }
    let mut points = Vec::new();
    for &l2 in &cfg.lambda2 {
        for &lr in &cfg.learning_rate {
            for &k in &ks {
                points.push((l2, lr, k));
            }
        }
    }
    let spec_for = |l2: f64, lr: f64| {
        let mut s = NrSpec::new(l2, lr, cfg.epochs, seed);
        s.mnode = cfg.mnode_config();
        s
    };
    let jobs: Vec<(usize, usize)> = (0..points.len()).flat_map(|p| (0..cfg.folds).map(move |f| (p, f))).collect();
    let results = parallel_map(jobs.clone(), threads, |(p, f)| {
        let (l2, lr, k) = points[p];
        let (tr, va) = fold_split(ds.len(), cfg.folds, f, perm);
        match reduce_neuralsparse(graph, &ds.subset(&tr), &ds.subset(&va), k, &spec_for(l2, lr)) {
            Ok(r) => Ok(Some(r)),
            Err(hgs::reduce::ReduceError::AllDiverged) => Ok(None),
            Err(e) => Err(e),
        }
    });
    let mut cv: Vec<PointResult> = points
        .iter()
        .map(|&(l2, lr, _)| PointResult {
            point: GridPoint { loss: LossConfig::l2_only(l2), learning_rate: lr },
            fold_val_mse: vec![0.0; cfg.folds],
            mean_val_mse: 0.0,
        })
        .collect();
    let mut first: Vec<Option<ReductionResult>> = (0..points.len()).map(|_| None).collect();
    for ((p, f), r) in jobs.into_iter().zip(results) {
        let r = r?;
        cv[p].fold_val_mse[f] = r.as_ref().map_or(f64::INFINITY, |r| r.val_loss);
        if f == 0 {
            first[p] = r;
        }
    }
    for c in &mut cv {
        c.mean_val_mse = c.fold_val_mse.iter().sum::<f64>() / cfg.folds as f64;
    }
    let best = (0..cv.len()).min_by(|&a, &b| cv[a].mean_val_mse.total_cmp(&cv[b].mean_val_mse)).expect("nonempty grid");
    let r = first[best].take().context("every NS grid point diverged")?;
    let (l2, lr, k) = points[best];
    let selected = serde_json::json!({ "lambda2": l2, "learning_rate": lr, "k": k });
    Ok(reduction_fit(Method::Ns, r, selected, cv))
}
