//! Argument parsing and command implementations.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use hgs::data::synthetic::{gen_synthetic, Regime, SyntheticConfig};
use hgs::data::uva::{gen_uva_cohort, CohortConfig};
use hgs::data::Dataset;
use hgs::eval::{metrics, stability_analyze, PointMetrics};
use hgs::graph::{
    augment_with, build_synthetic_graph, build_uva_graph, condense_super, is_rdag, AugmentOptions, CondenseOptions, SuperGraph, SyntheticKind,
    UvaOptions,
};
use hgs::mnode::MnodeModel;
use hgs::train::{enp, thread_budget, ENP_THRESHOLD};

use crate::method::{fit, load_graph, MethodConfig};
use crate::reproduce::{run_preset, Preset};

#[derive(Debug, Parser)]
#[command(name = "hgs", version, about = "Hybrid graph sparsification for mechanistic neural ODE forecasters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset (JSON lines).
    GenData(GenDataArgs),
    /// Build or transform a graph (JSON).
    Graph {
        #[command(subcommand)]
        op: GraphOp,
    },
    /// Fit one method from a JSON config.
    Train(TrainArgs),
    /// Score a saved model on a dataset.
    Evaluate(EvaluateArgs),
    /// Run a repeated synthetic experiment.
    Reproduce(ReproduceArgs),
    /// Eigenvalues, Euler growth and stiffness of a 2-state linear system.
    Stability(StabilityArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Source {
    Synthetic,
    Uva,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Refined,
    Comprehensive,
}

impl From<KindArg> for SyntheticKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Refined => SyntheticKind::Refined,
            KindArg::Comprehensive => SyntheticKind::Comprehensive,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RegimeArg {
    True,
    Quasi,
}

impl From<RegimeArg> for Regime {
    fn from(r: RegimeArg) -> Self {
        match r {
            RegimeArg::True => Regime::True,
            RegimeArg::Quasi => Regime::Quasi,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, value_enum, default_value = "synthetic")]
    pub source: Source,
    #[arg(long, value_enum, default_value = "true")]
    pub regime: RegimeArg,
    #[arg(long, value_enum, default_value = "refined")]
    pub graph: KindArg,
    #[arg(long)]
    pub size: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum GraphOp {
    /// The UVA-Padova dependency graph.
    Uva {
        #[arg(long)]
        vitals: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// A synthetic starting graph.
    Synthetic {
        #[arg(long, value_enum, default_value = "refined")]
        kind: KindArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Collapse strongly connected components (reads stdin without --in).
    Condense {
        #[arg(long = "in", alias = "input")]
        input: Option<PathBuf>,
        /// Node ids whose components stay uncollapsed.
        #[arg(long = "keep-mscc", alias = "keep", num_args = 1..)]
        keep: Vec<String>,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Add input-to-observable shortcut edges (reads stdin without --in).
    Augment {
        #[arg(long = "in", alias = "input")]
        input: Option<PathBuf>,
        /// `input:observable` pairs that get no shortcuts.
        #[arg(long = "skip-shortcut", num_args = 1.., value_parser = parse_pair)]
        skip: Vec<(String, String)>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Multiplier applied to predictions and targets before scoring.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    #[arg(long, default_value_t = hgs::eval::HYPO)]
    pub hypo: f64,
    #[arg(long, default_value_t = hgs::eval::HYPER)]
    pub hyper: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReproduceArgs {
    /// Built-in preset name.
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    pub preset: Option<String>,
    /// A preset JSON file (the `preset` field of a previous manifest also works).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StabilityArgs {
    #[arg(long, allow_hyphen_values = true)]
    pub a: f64,
    #[arg(long, allow_hyphen_values = true)]
    pub b: f64,
    #[arg(long, allow_hyphen_values = true)]
    pub c: f64,
    #[arg(long, allow_hyphen_values = true)]
    pub d: f64,
    #[arg(long, default_value_t = 1.0)]
    pub h: f64,
}

/// A `train` config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    /// `builtin:<name>` or a graph JSON path.
    pub graph: String,
    /// Dataset JSON-lines path.
    pub data: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub method: MethodConfig,
}

fn default_seed() -> u64 {
    2024
}

fn parse_pair(s: &str) -> std::result::Result<(String, String), String> {
    match s.split_once(':') {
        Some((x, o)) if !x.is_empty() && !o.is_empty() => Ok((x.to_string(), o.to_string())),
        _ => Err(format!("expected input:observable, got `{s}`")),
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut so = io::stdout().lock();
            so.write_all(text.as_bytes())?;
            so.write_all(b"\n")?;
            Ok(())
        }
    }
}

fn read_input(path: Option<&Path>) -> Result<String> {
    match path {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display())),
        None => {
            let mut s = String::new();
            io::stdin().read_to_string(&mut s)?;
            Ok(s)
        }
    }
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Dataset::read_jsonl(io::BufReader::new(f)).with_context(|| format!("parsing {}", path.display()))
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    if a.size == 0 {
        bail!("--size must be positive");
    }
    let ds = match a.source {
        Source::Synthetic => gen_synthetic(&SyntheticConfig::new(a.seed, a.regime.into(), a.graph.into(), a.size)),
        Source::Uva => gen_uva_cohort(&CohortConfig::new(a.seed, a.size))?,
    };
    fs::write(&a.out, ds.to_jsonl_string()).with_context(|| format!("writing {}", a.out.display()))
}

pub fn graph(op: &GraphOp) -> Result<()> {
    match op {
        GraphOp::Uva { vitals, out } => emit(&build_uva_graph(UvaOptions { vitals: *vitals }).to_json_string(), out.as_deref()),
        GraphOp::Synthetic { kind, out } => emit(&build_synthetic_graph((*kind).into()).to_json_string(), out.as_deref()),
        GraphOp::Condense { input, keep, force, out } => {
            let g = SuperGraph::from_json_str(&read_input(input.as_deref())?)?;
            let c = condense_super(&g, &CondenseOptions { keep: keep.clone(), force: *force })?;
            for w in &c.warnings {
                eprintln!("warning: {w}");
            }
            emit(&c.graph.to_json_string(), out.as_deref())
        }
        GraphOp::Augment { input, skip, out } => {
            let g = SuperGraph::from_json_str(&read_input(input.as_deref())?)?;
            let a = augment_with(&g, &AugmentOptions { skip: skip.iter().cloned().collect() })?;
            if !is_rdag(&a) {
                eprintln!("warning: augmented graph is not an RDAG");
            }
            emit(&a.to_json_string(), out.as_deref())
        }
    }
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let text = fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let cfg: TrainFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", a.config.display()))?;
    let graph = load_graph(&cfg.graph)?;
    let ds = read_dataset(Path::new(&cfg.data))?;
    let fitted = fit(&cfg.method, &graph, &ds, cfg.seed, thread_budget())?;
    fs::create_dir_all(&a.out_dir)?;
    fs::write(a.out_dir.join("model.json"), fitted.model.to_checkpoint())?;
    fs::write(a.out_dir.join("fit.json"), serde_json::to_string_pretty(&fitted.summary)?)?;
    let history = serde_json::to_string_pretty(&fitted.outcome.history)?;
    fs::write(a.out_dir.join("history.json"), history)?;
    eprintln!("{}: validation MSE {} at epoch {}", cfg.method.method, fitted.summary.val_mse, fitted.summary.best_epoch);
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub instances: usize,
    pub metrics: PointMetrics,
    pub enp: usize,
    pub parameters: usize,
}

pub fn evaluate_report(a: &EvaluateArgs) -> Result<EvalReport> {
    let text = fs::read_to_string(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let model = MnodeModel::from_checkpoint(&text)?;
    let ds = read_dataset(&a.data)?;
    let preds: Vec<_> = model.predict(&ds)?.into_iter().map(|p| p * a.scale).collect();
    let targets: Vec<_> = ds.instances.iter().map(|i| &i.future_obs * a.scale).collect();
    Ok(EvalReport {
        instances: ds.len(),
        metrics: metrics(&preds, &targets, (a.hypo, a.hyper))?,
        enp: enp(&model.params.values, ENP_THRESHOLD),
        parameters: model.params.len(),
    })
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let report = evaluate_report(a)?;
    emit(&serde_json::to_string_pretty(&report)?, a.out.as_deref())
}

pub fn load_preset(a: &ReproduceArgs) -> Result<Preset> {
    match (&a.preset, &a.manifest) {
        (Some(name), _) => Preset::builtin(name),
        (None, Some(path)) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let value: serde_json::Value = serde_json::from_str(&text)?;
            let preset = value.get("preset").cloned().unwrap_or(value);
            Ok(serde_json::from_value(preset).with_context(|| format!("parsing preset in {}", path.display()))?)
        }
        (None, None) => bail!("one of --preset or --manifest is required"),
    }
}

pub fn reproduce(a: &ReproduceArgs) -> Result<()> {
    let preset = load_preset(a)?;
    let report = run_preset(&preset, &a.out, thread_budget(), |line| eprintln!("{line}"))?;
    emit(&serde_json::to_string_pretty(&report.summary)?, None)
}

pub fn stability(a: &StabilityArgs) -> Result<()> {
    let r = stability_analyze(a.a, a.b, a.c, a.d, a.h);
    let mut v = serde_json::to_value(r)?;
    // JSON has no infinity
    if r.kappa.is_infinite() {
        v["kappa"] = serde_json::Value::String("inf".into());
    }
    emit(&serde_json::to_string_pretty(&v)?, None)
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Graph { op } => graph(op),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Reproduce(a) => reproduce(a),
        Command::Stability(a) => stability(a),
    }
}
