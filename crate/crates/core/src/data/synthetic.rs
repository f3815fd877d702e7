//! Port of the synthetic data generator for the sparsity experiments.

use std::str::FromStr;

use ndarray::Array2;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use super::{window, Dataset};
use crate::graph::SyntheticKind;

pub const STEPS: usize = 60;
pub const DT: f64 = 5e-2;
pub const NOISE_CHANNEL: &str = "noise";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    True,
    Quasi,
}

impl FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "true" | "true-sparsity" => Ok(Regime::True),
            "quasi" | "quasi-sparsity" => Ok(Regime::Quasi),
            other => Err(format!("unknown regime `{other}` (expected true|quasi)")),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub regime: Regime,
    pub kind: SyntheticKind,
    pub size: usize,
    /// Standard deviation of the input noise; 0.5 in the reference script.
    pub noise_scale: f64,
}

impl SyntheticConfig {
    pub fn new(seed: u64, regime: Regime, kind: SyntheticKind, size: usize) -> Self {
        Self { seed, regime, kind, size, noise_scale: 0.5 }
    }
}

/// Effect sizes of x2.. on ds1/dt in the quasi-sparsity regime.
pub fn quasi_coefficients(kind: SyntheticKind) -> &'static [f64] {
    match kind {
        SyntheticKind::Refined => &[-0.4, 0.04, -0.004],
        SyntheticKind::Comprehensive => &[-4e-1, 4e-2, -4e-3, 4e-4, -4e-5],
    }
}

/// One step of the generating recurrence.
pub fn step(v: f64, x: &[f64], regime: Regime, kind: SyntheticKind) -> f64 {
    let mut drive = 4.0 * x[0];
    if regime == Regime::Quasi {
        drive += quasi_coefficients(kind).iter().zip(&x[1..]).map(|(c, xi)| c * xi).sum::<f64>();
    }
    v + DT * (drive - 0.5 * (v - 1.0))
}

/// Raw samples, each 60 × (1 + inputs + 1): column 0 holds v_1..v_60, then
/// x1.., then an independent standard-normal column.
///
/// Draw order follows the reference script: for each sample the signal
/// noise, then each redundant input; after all samples, one standard-normal
/// block of the full sample shape of which only the first column is kept.
pub fn gen_synthetic_raw(cfg: &SyntheticConfig) -> Vec<Array2<f64>> {
    let mut rng = Pcg64::seed_from_u64(cfg.seed);
    let k = cfg.kind.input_count();
    let cols = 1 + k;
    let noise = Normal::new(0.0, cfg.noise_scale).expect("finite noise scale");
    let mut samples = Vec::with_capacity(cfg.size);
    for _ in 0..cfg.size {
        let mut x = Array2::<f64>::zeros((STEPS, k));
        for t in 0..STEPS {
            let time = (t + 1) as f64;
            x[[t, 0]] = (1.0 - time / STEPS as f64 / 10.0).exp() / 100.0 + noise.sample(&mut rng);
        }
        for j in 1..k {
            for t in 0..STEPS {
                x[[t, j]] = noise.sample(&mut rng);
            }
        }
        let mut sample = Array2::zeros((STEPS, cols + 1));
        let mut v = 0.0;
        for t in 0..STEPS {
            let row: Vec<f64> = x.row(t).to_vec();
            v = step(v, &row, cfg.regime, cfg.kind);
            sample[[t, 0]] = v;
            for j in 0..k {
                sample[[t, 1 + j]] = row[j];
            }
        }
        samples.push(sample);
    }
    for sample in &mut samples {
        for t in 0..STEPS {
            for c in 0..cols {
                let z: f64 = StandardNormal.sample(&mut rng);
                if c == 0 {
                    sample[[t, cols]] = z;
                }
            }
        }
    }
    samples
}

pub fn input_names(kind: SyntheticKind) -> Vec<String> {
    (1..=kind.input_count())
        .map(|i| format!("x{i}"))
        .chain(std::iter::once(NOISE_CHANNEL.to_string()))
        .collect()
}

/// Windowed synthetic dataset. The first generated row is t0 with no
/// history (p = 0); the remaining 59 rows form the prediction window, with
/// the input recorded one step ahead of the output it precedes.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Dataset {
    let instances = gen_synthetic_raw(cfg).iter().map(|s| window(s, 1, 0)).collect();
    Dataset::new(vec!["s1".into()], input_names(cfg.kind), instances).expect("generator output is consistent")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_determinism() {
        let cfg = SyntheticConfig::new(7, Regime::True, SyntheticKind::Refined, 3);
        let a = gen_synthetic_raw(&cfg);
        assert_eq!(a.len(), 3);
        assert_eq!(a[0].dim(), (60, 1 + 4 + 1));
        assert_eq!(a, gen_synthetic_raw(&cfg));
        let c = gen_synthetic_raw(&SyntheticConfig::new(7, Regime::Quasi, SyntheticKind::Comprehensive, 2));
        assert_eq!(c[0].dim(), (60, 1 + 7 + 1));
        assert_ne!(gen_synthetic_raw(&SyntheticConfig { seed: 8, ..cfg }), a);
    }

    #[test]
    fn zero_noise_follows_recurrence() {
        let cfg = SyntheticConfig { noise_scale: 0.0, ..SyntheticConfig::new(1, Regime::True, SyntheticKind::Refined, 1) };
        let s = &gen_synthetic_raw(&cfg)[0];
        let mut v = 0.0;
        for t in 0..STEPS {
            let x1 = (1.0 - (t + 1) as f64 / 600.0).exp() / 100.0;
            v += 0.05 * (4.0 * x1 - 0.5 * (v - 1.0));
            assert_eq!(s[[t, 0]], v);
            assert_eq!(s[[t, 2]], 0.0);
        }
    }

    #[test]
    fn state_column_solves_recurrence_on_noisy_inputs() {
        for regime in [Regime::True, Regime::Quasi] {
            for kind in [SyntheticKind::Refined, SyntheticKind::Comprehensive] {
                let s = &gen_synthetic_raw(&SyntheticConfig::new(3, regime, kind, 1))[0];
                let mut v = 0.0;
                for t in 0..STEPS {
                    let x: Vec<f64> = (1..=kind.input_count()).map(|j| s[[t, j]]).collect();
                    let mut d = 4.0 * x[0] - 0.5 * (v - 1.0);
                    if regime == Regime::Quasi {
                        for (j, c) in quasi_coefficients(kind).iter().enumerate() {
                            d += c * x[j + 1];
                        }
                    }
                    v += 0.05 * d;
                    assert!((s[[t, 0]] - v).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn quasi_magnitudes_decay_by_ten() {
        for kind in [SyntheticKind::Refined, SyntheticKind::Comprehensive] {
            for (j, c) in quasi_coefficients(kind).iter().enumerate() {
                assert!((c.abs() - 4.0 / 10f64.powi(j as i32 + 1)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn windowed_dataset() {
        let ds = gen_synthetic(&SyntheticConfig::new(5, Regime::True, SyntheticKind::Comprehensive, 4));
        assert_eq!((ds.p(), ds.q()), (0, 59));
        assert_eq!(ds.input_names.len(), 8);
        assert_eq!(ds.input_names.last().unwrap(), NOISE_CHANNEL);
        let raw = gen_synthetic_raw(&SyntheticConfig::new(5, Regime::True, SyntheticKind::Comprehensive, 4));
        let i = &ds.instances[1];
        assert_eq!(i.past_obs[[0, 0]], raw[1][[0, 0]]);
        assert_eq!(i.future_obs[[0, 0]], raw[1][[1, 0]]);
        assert_eq!(i.future_inputs[[0, 0]], raw[1][[0, 1]]);
    }
}
