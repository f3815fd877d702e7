//! Repeated synthetic experiments: presets, per-repetition fits, metric
//! tables and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use hgs::data::synthetic::{gen_synthetic, Regime, SyntheticConfig, DT};
use hgs::eval::{mean_se, metrics, HYPER, HYPO};
use hgs::graph::{build_synthetic_graph, SyntheticKind};
use hgs::mnode::MnodeConfig;
use hgs::train::{enp, ENP_THRESHOLD};

use crate::method::{fit, Method, MethodConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Setting {
    pub regime: Regime,
    pub graph: SyntheticKind,
    pub train_size: usize,
}

impl Setting {
    pub fn label(&self) -> String {
        let regime = match self.regime {
            Regime::True => "true",
            Regime::Quasi => "quasi",
        };
        let graph = match self.graph {
            SyntheticKind::Refined => "refined",
            SyntheticKind::Comprehensive => "comprehensive",
        };
        format!("{regime}-{graph}-n{}", self.train_size)
    }
}

/// Everything that determines a reproduction run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preset {
    pub name: String,
    pub settings: Vec<Setting>,
    pub reps: usize,
    pub test_size: usize,
    /// Repetition r uses seed `seed_base + r` for its training set and model.
    pub seed_base: u64,
    pub test_seed: u64,
    pub methods: Vec<MethodConfig>,
}

// the model integrates on the generator's time grid
fn method(m: Method, lambda1: &[f64], lambda2: &[f64], lr: &[f64]) -> MethodConfig {
    MethodConfig {
        lambda1: lambda1.to_vec(),
        lambda2: lambda2.to_vec(),
        learning_rate: lr.to_vec(),
        mnode: MnodeConfig { delta_t: DT, ..MnodeConfig::default() },
        ..MethodConfig::new(m)
    }
}

const LR: [f64; 2] = [1e-2, 1e-3];
const WIDE: [f64; 6] = [1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8];

impl Preset {
    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "synthetic-small" => Ok(Preset {
                name: name.into(),
                settings: vec![Setting { regime: Regime::True, graph: SyntheticKind::Refined, train_size: 100 }],
                reps: 5,
                test_size: 10_000,
                seed_base: 2024,
                test_seed: 1,
                methods: vec![method(Method::Hgs, &[1e-6, 1e-7], &[1e-6], &LR), method(Method::Nr, &[], &[1e-6], &LR)],
            }),
            "synthetic-paper" => {
                let mut settings = Vec::new();
                for regime in [Regime::True, Regime::Quasi] {
                    for graph in [SyntheticKind::Refined, SyntheticKind::Comprehensive] {
                        for train_size in [100, 1000] {
                            settings.push(Setting { regime, graph, train_size });
                        }
                    }
                }
                let hgs_l2 = [1e-6, 1e-7, 1e-8];
                let ns = MethodConfig { k: vec![2, 4, 6, 8, 10], ..method(Method::Ns, &[], &[1e-3], &LR) };
                Ok(Preset {
                    name: name.into(),
                    settings,
                    reps: 40,
                    test_size: 10_000,
                    seed_base: 2024,
                    test_seed: 1,
                    methods: vec![
                        method(Method::Hgs, &[1e-6, 1e-7], &hgs_l2, &LR),
                        method(Method::Nr, &[], &WIDE, &LR),
                        method(Method::Egl, &WIDE, &[1e-6], &LR),
                        method(Method::En, &[1e-6, 1e-7], &hgs_l2, &LR),
                        ns,
                        method(Method::Gd, &[], &[1e-6], &[1e-3]),
                        MethodConfig { rd_repeats: 5, rd_ratios: vec![0.1, 0.2, 0.4], ..method(Method::Rd, &[], &[1e-6], &[1e-3]) },
                    ],
                })
            }
            other => bail!("unknown preset `{other}` (valid: synthetic-small, synthetic-paper)"),
        }
    }

    pub fn content_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("preset serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub setting: String,
    pub method: Method,
    pub rep: usize,
    pub seed: u64,
    pub rmse: f64,
    pub peak_rmse: f64,
    pub mape: f64,
    pub peak_mape: f64,
    pub corr: f64,
    pub enp: usize,
    pub val_mse: f64,
    pub selected: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodSummary {
    pub setting: String,
    pub method: Method,
    pub reps: usize,
    pub rmse: f64,
    pub rmse_se: Option<f64>,
    pub peak_rmse: f64,
    pub mape: f64,
    pub mape_se: Option<f64>,
    pub corr: f64,
    pub corr_se: Option<f64>,
    pub enp: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub preset: Preset,
    pub input_hash: String,
    pub seeds: Vec<u64>,
    pub artifacts: Vec<String>,
    pub timings_seconds: BTreeMap<String, f64>,
}

pub struct Report {
    pub rows: Vec<Row>,
    pub summary: Vec<MethodSummary>,
    pub manifest: Manifest,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn with_se(v: &[f64]) -> (f64, Option<f64>) {
    match mean_se(v) {
        Ok((m, se)) => (m, Some(se)),
        Err(_) => (mean(v), None),
    }
}

pub fn summarize(rows: &[Row]) -> Vec<MethodSummary> {
    let mut groups: BTreeMap<(String, Method), Vec<&Row>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.setting.clone(), r.method)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((setting, method), rs)| {
            let col = |f: fn(&Row) -> f64| rs.iter().map(|r| f(r)).collect::<Vec<f64>>();
            let (rmse, rmse_se) = with_se(&col(|r| r.rmse));
            let (mape, mape_se) = with_se(&col(|r| r.mape));
            let (corr, corr_se) = with_se(&col(|r| r.corr));
            MethodSummary {
                setting,
                method,
                reps: rs.len(),
                rmse,
                rmse_se,
                peak_rmse: mean(&col(|r| r.peak_rmse)),
                mape,
                mape_se,
                corr,
                corr_se,
                enp: mean(&col(|r| r.enp as f64)),
            }
        })
        .collect()
}

/// Runs every (setting, repetition, method) fit, evaluates on the shared
/// test set, and writes `metrics.csv`, `summary.json`, `manifest.json` and
/// one checkpoint per fit under `out_dir`.
pub fn run_preset(preset: &Preset, out_dir: &Path, threads: usize, mut log: impl FnMut(&str)) -> Result<Report> {
    if preset.reps == 0 || preset.methods.is_empty() {
        bail!("preset needs at least one repetition and one method");
    }
    let models_dir = out_dir.join("models");
    fs::create_dir_all(&models_dir).with_context(|| format!("creating {}", models_dir.display()))?;
    let mut rows = Vec::new();
    let mut artifacts = Vec::new();
    let mut timings = BTreeMap::new();
    for setting in &preset.settings {
        let label = setting.label();
        let test = gen_synthetic(&SyntheticConfig::new(preset.test_seed, setting.regime, setting.graph, preset.test_size));
        let targets: Vec<_> = test.instances.iter().map(|i| i.future_obs.clone()).collect();
        let graph = build_synthetic_graph(setting.graph);
        for rep in 0..preset.reps {
            let seed = preset.seed_base + rep as u64;
            let train = gen_synthetic(&SyntheticConfig::new(seed, setting.regime, setting.graph, setting.train_size));
            for cfg in &preset.methods {
                let started = Instant::now();
                let fitted = fit(cfg, &graph, &train, seed, threads).with_context(|| format!("{label} {} rep {rep}", cfg.method))?;
                let preds = fitted.model.predict(&test)?;
                let m = metrics(&preds, &targets, (HYPO, HYPER))?;
                let name = format!("{label}_{}_rep{rep}.json", cfg.method);
                fs::write(models_dir.join(&name), fitted.model.to_checkpoint())?;
                artifacts.push(PathBuf::from("models").join(&name).display().to_string());
                let secs = started.elapsed().as_secs_f64();
                timings.insert(format!("{label}/{}/{rep}", cfg.method), secs);
                log(&format!("{label} {} rep {rep}: rmse {:.4} enp {} ({secs:.1}s)", cfg.method, m.rmse, enp(&fitted.model.params.values, ENP_THRESHOLD)));
                rows.push(Row {
                    setting: label.clone(),
                    method: cfg.method,
                    rep,
                    seed,
                    rmse: m.rmse,
                    peak_rmse: m.peak_rmse,
                    mape: m.mape,
                    peak_mape: m.peak_mape,
                    corr: m.pearson_corr,
                    enp: enp(&fitted.model.params.values, ENP_THRESHOLD),
                    val_mse: fitted.summary.val_mse,
                    selected: serde_json::to_string(&fitted.summary.selected)?,
                });
            }
        }
    }
    let summary = summarize(&rows);
    let mut csv = csv::Writer::from_path(out_dir.join("metrics.csv"))?;
    for r in &rows {
        csv.serialize(r)?;
    }
    csv.flush()?;
    fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    artifacts.extend(["metrics.csv".to_string(), "summary.json".to_string()]);
    let manifest = Manifest {
        preset: preset.clone(),
        input_hash: preset.content_hash(),
        seeds: (0..preset.reps as u64).map(|r| preset.seed_base + r).collect(),
        artifacts,
        timings_seconds: timings,
    };
    fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(Report { rows, summary, manifest })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_and_hash() {
        let small = Preset::builtin("synthetic-small").unwrap();
        assert_eq!((small.reps, small.test_size, small.settings.len()), (5, 10_000, 1));
        assert_eq!(small.content_hash(), Preset::builtin("synthetic-small").unwrap().content_hash());
        let paper = Preset::builtin("synthetic-paper").unwrap();
        assert_eq!((paper.reps, paper.settings.len(), paper.methods.len()), (40, 8, 7));
        assert_ne!(small.content_hash(), paper.content_hash());
        assert!(Preset::builtin("x").is_err());
        let back: Preset = serde_json::from_str(&serde_json::to_string(&paper).unwrap()).unwrap();
        assert_eq!(back, paper);
    }

    fn row(method: Method, rep: usize, rmse: f64) -> Row {
        Row {
            setting: "s".into(),
            method,
            rep,
            seed: rep as u64,
            rmse,
            peak_rmse: 0.0,
            mape: 1.0,
            peak_mape: 0.0,
            corr: 0.5,
            enp: 10 * rep,
            val_mse: 0.0,
            selected: String::new(),
        }
    }

    #[test]
    fn summary_groups_by_method() {
        let rows = vec![row(Method::Hgs, 0, 1.0), row(Method::Hgs, 1, 3.0), row(Method::Nr, 0, 2.0)];
        let s = summarize(&rows);
        assert_eq!(s.len(), 2);
        let h = s.iter().find(|m| m.method == Method::Hgs).unwrap();
        assert_eq!((h.reps, h.rmse, h.enp), (2, 2.0, 5.0));
        assert!((h.rmse_se.unwrap() - 1.0).abs() < 1e-12);
        assert!(s.iter().find(|m| m.method == Method::Nr).unwrap().rmse_se.is_none());
    }
}
