//! A UVA-Padova S2013 simulator for generating glycemic cohorts, and the
//! channel mapping from discretized event streams to the UVA graph inputs.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_pcg::Pcg64;

use super::events::{discretize, CarbRate, Discretized, EventStreams, InsulinRate, GRID_LEN, GRID_STEP, HISTORY_STAMPS};
use super::{Dataset, Result};
use crate::graph::{HEART_RATE, STEPS};

/// Glucose channel scale, mg/dL per model unit.
pub const GLUCOSE_SCALE: f64 = 100.0;
/// Carbohydrate channel scale, mg/min per model unit.
pub const CARB_SCALE: f64 = 45000.0;
pub const HR_SCALE: f64 = 100.0;
pub const STEPS_SCALE: f64 = 100.0;

/// Fixed parameter set of an average adult subject. Units follow the
/// original model (mg/kg, pmol/kg, minutes).
#[derive(Debug, Clone)]
pub struct UvaParams {
    pub bw: f64,
    pub vg: f64,
    pub vi: f64,
    pub k1: f64,
    pub k2: f64,
    pub kp1: f64,
    pub kp2: f64,
    pub kp3: f64,
    pub ki: f64,
    pub xi: f64,
    pub kh: f64,
    pub fcns: f64,
    pub vm0: f64,
    pub vmx: f64,
    pub km0: f64,
    pub p2u: f64,
    pub r1: f64,
    pub r2: f64,
    pub gb: f64,
    pub gth: f64,
    pub ib: f64,
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    pub m4: f64,
    pub kmax: f64,
    pub kmin: f64,
    pub kabs: f64,
    pub b: f64,
    pub c: f64,
    pub f: f64,
    pub ke1: f64,
    pub ke2: f64,
    /// Relaxation rate of the excretion state toward its instantaneous value.
    pub ke_lag: f64,
    pub kd: f64,
    pub ka1: f64,
    pub ka2: f64,
    pub ts: f64,
    pub n: f64,
    pub hb: f64,
    pub rho: f64,
    pub sigma: f64,
    pub sigma2: f64,
    pub eta: f64,
    /// Relaxation rate of the dynamic glucagon secretion state.
    pub srd_lag: f64,
    pub kh1: f64,
    pub kh2: f64,
    pub kh3: f64,
    /// Basal subcutaneous insulin infusion, pmol/kg/min.
    pub u_basal: f64,
}

impl Default for UvaParams {
    fn default() -> Self {
        Self {
            bw: 102.32,
            vg: 1.9152,
            vi: 0.054906,
            k1: 0.058138,
            k2: 0.087114,
            kp1: 4.7314,
            kp2: 0.00469,
            kp3: 0.01208,
            ki: 0.0046374,
            xi: 0.0097,
            kh: 0.16,
            fcns: 1.0,
            vm0: 3.2667,
            vmx: 0.031319,
            km0: 253.52,
            p2u: 0.027802,
            r1: 1.44,
            r2: 0.81,
            gb: 138.56,
            gth: 60.0,
            ib: 100.25,
            m1: 0.15446,
            m2: 0.225027,
            m3: 0.23169,
            m4: 0.090011,
            kmax: 0.046122,
            kmin: 0.0037927,
            kabs: 0.08906,
            b: 0.70391,
            c: 0.21057,
            f: 0.9,
            ke1: 0.0005,
            ke2: 339.0,
            ke_lag: 0.1,
            kd: 0.0152,
            ka1: 0.0019,
            ka2: 0.0078,
            ts: 0.1,
            n: 0.22,
            hb: 50.0,
            rho: 0.57,
            sigma: 0.41,
            sigma2: 0.0,
            eta: 0.2,
            srd_lag: 0.5,
            kh1: 0.0164,
            kh2: 0.0018,
            kh3: 0.0182,
            u_basal: 1.2386,
        }
    }
}

// State indices, in the order of the graph's state list.
const GP: usize = 0;
const GT: usize = 1;
const IP: usize = 2;
const IL: usize = 3;
const QSTO1: usize = 4;
const QSTO2: usize = 5;
const QGUT: usize = 6;
const XL: usize = 7;
const IR: usize = 8;
const XH: usize = 9;
const X: usize = 10;
const E: usize = 11;
const ISC1: usize = 12;
const ISC2: usize = 13;
const GS: usize = 14;
const H: usize = 15;
const SRSH: usize = 16;
const SRDH: usize = 17;
const HSC1: usize = 18;
const HSC2: usize = 19;

pub type State = [f64; 20];

/// Exogenous drive at one instant.
#[derive(Debug, Clone, Copy, Default)]
pub struct Drive {
    /// Subcutaneous insulin infusion, pmol/kg/min.
    pub iir: f64,
    /// Carbohydrate ingestion, mg/min.
    pub delta: f64,
    /// Size of the current meal, mg; 0 when no meal has been eaten.
    pub meal: f64,
    /// Subcutaneous glucagon infusion.
    pub hinf: f64,
}

impl UvaParams {
    pub fn ipb(&self) -> f64 {
        self.ib * self.vi
    }

    pub fn basal_state(&self) -> State {
        let mut s = [0.0; 20];
        let ipb = self.ipb();
        s[IP] = ipb;
        s[IL] = self.m2 * ipb / (self.m1 + self.m3);
        s[ISC1] = self.u_basal / (self.kd + self.ka1);
        s[ISC2] = self.kd * s[ISC1] / self.ka2;
        s[XL] = self.ib;
        s[IR] = self.ib;
        s[GP] = self.gb * self.vg;
        let egp = self.kp1 - self.kp2 * s[GP] - self.kp3 * self.ib;
        // Gt balancing the plasma equation at basal
        s[GT] = (self.fcns + self.k1 * s[GP] - egp) / self.k2;
        s[GS] = self.gb;
        s[H] = self.hb;
        s[SRSH] = self.n * self.hb;
        s
    }

    fn kempt(&self, qsto: f64, d: f64) -> f64 {
        if d <= 0.0 {
            return self.kmax;
        }
        let alpha = 5.0 / (2.0 * d * (1.0 - self.b));
        let beta = 5.0 / (2.0 * d * self.c);
        self.kmin
            + (self.kmax - self.kmin) / 2.0
                * ((alpha * (qsto - self.b * d)).tanh() - (beta * (qsto - self.c * d)).tanh() + 2.0)
    }

    fn risk(&self, g: f64) -> f64 {
        let exp = 2.0 * self.r2;
        if g >= self.gb {
            0.0
        } else if g >= self.gth {
            10.0 * (g.ln() - self.gb.ln()).abs().powf(exp)
        } else {
            10.0 * (self.gth.ln() - self.gb.ln()).abs().powf(exp)
        }
    }

    /// Right-hand side of the model.
    pub fn derivatives(&self, s: &State, u: Drive) -> State {
        let mut d = [0.0; 20];
        let g = s[GP] / self.vg;
        let i = s[IP] / self.vi;
        let qsto = s[QSTO1] + s[QSTO2];
        let kempt = self.kempt(qsto, u.meal);
        let ra = self.f * self.kabs * s[QGUT] / self.bw;
        let egp = (self.kp1 - self.kp2 * s[GP] - self.kp3 * s[XL] + self.xi * s[XH]).max(0.0);
        let uii = self.fcns;
        let vm = self.vm0 + self.vmx * s[X] * (1.0 + self.r1 * self.risk(g));
        let uid = vm.max(0.0) * s[GT] / (self.km0 + s[GT]);
        let rai = self.ka1 * s[ISC1] + self.ka2 * s[ISC2];

        d[GP] = egp + ra - uii - s[E] - self.k1 * s[GP] + self.k2 * s[GT];
        d[GT] = -uid + self.k1 * s[GP] - self.k2 * s[GT];
        d[IP] = -(self.m2 + self.m4) * s[IP] + self.m1 * s[IL] + rai;
        d[IL] = -(self.m1 + self.m3) * s[IL] + self.m2 * s[IP];
        d[QSTO1] = -self.kmax * s[QSTO1] + u.delta;
        d[QSTO2] = -kempt * s[QSTO2] + self.kmax * s[QSTO1];
        d[QGUT] = -self.kabs * s[QGUT] + kempt * s[QSTO2];
        d[XL] = -self.ki * (s[XL] - s[IR]);
        d[IR] = -self.ki * (s[IR] - i);
        d[XH] = -self.kh * s[XH] + self.kh * (s[H] - self.hb).max(0.0);
        d[X] = -self.p2u * s[X] + self.p2u * (i - self.ib);
        d[E] = self.ke_lag * (self.ke1 * (s[GP] - self.ke2).max(0.0) - s[E]);
        d[ISC1] = -(self.kd + self.ka1) * s[ISC1] + u.iir;
        d[ISC2] = self.kd * s[ISC1] - self.ka2 * s[ISC2];
        d[GS] = -self.ts * s[GS] + self.ts * g;
        let srb = self.n * self.hb;
        let target = if g >= self.gb {
            (self.sigma2 * (self.gth - g) + srb).max(0.0)
        } else {
            (self.sigma * (self.gth - g) / (i + 1.0) + srb).max(0.0)
        };
        d[SRSH] = -self.rho * (s[SRSH] - target);
        let g_dot = d[GP] / self.vg;
        d[SRDH] = self.srd_lag * (self.eta * (-g_dot).max(0.0) - s[SRDH]);
        let ra_h = self.kh3 * s[HSC2];
        d[H] = -self.n * s[H] + s[SRSH] + s[SRDH] + ra_h;
        d[HSC1] = -(self.kh1 + self.kh2) * s[HSC1] + u.hinf;
        d[HSC2] = self.kh1 * s[HSC1] - self.kh3 * s[HSC2];
        d
    }

    /// Basal pump rate in U/hour that holds the basal state.
    pub fn basal_rate_u_per_hour(&self) -> f64 {
        self.u_basal * self.bw / 6000.0 * 60.0
    }

    fn pmol_per_kg(&self, units_per_min: f64) -> f64 {
        units_per_min * 6000.0 / self.bw
    }
}

/// Forward-Euler integration step, with states clamped at zero.
pub fn euler_step(p: &UvaParams, s: &mut State, u: Drive, dt: f64) {
    let d = p.derivatives(s, u);
    for (x, dx) in s.iter_mut().zip(d) {
        *x = (*x + dt * dx).max(0.0);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CohortConfig {
    pub seed: u64,
    pub size: usize,
    /// CGM noise standard deviation, mg/dL.
    pub cgm_noise: f64,
    /// Integration step, minutes.
    pub dt: f64,
}

impl CohortConfig {
    pub fn new(seed: u64, size: usize) -> Self {
        Self { seed, size, cgm_noise: 2.0, dt: 0.5 }
    }
}

const WARMUP: f64 = 60.0;

fn first_stamp() -> f64 {
    -(HISTORY_STAMPS as f64 - 1.0) * GRID_STEP
}

/// Random meal, bolus and basal schedule for one instance.
fn random_schedule(p: &UvaParams, rng: &mut Pcg64) -> EventStreams {
    let start = first_stamp();
    let end = start + (GRID_LEN - 1) as f64 * GRID_STEP;
    let basal = p.basal_rate_u_per_hour();
    let mut s = EventStreams { basal: vec![(start - 600.0, basal * rng.random_range(0.8..1.2))], ..Default::default() };
    if rng.random_bool(0.5) {
        s.basal.push((rng.random_range(start..end), basal * rng.random_range(0.5..1.5)));
    }
    if rng.random_bool(0.8) {
        let t = rng.random_range(start + 5.0..30.0);
        let grams = rng.random_range(20.0..80.0);
        s.carbs.push((t, grams));
        if rng.random_bool(0.9) {
            s.bolus.push((t, grams / 10.0 * rng.random_range(0.7..1.3)));
        }
    }
    if rng.random_bool(0.3) {
        s.bolus.push((rng.random_range(start..end), rng.random_range(0.5..2.0)));
    }
    s.normalize();
    s
}

/// Integrates the model under the schedule and writes CGM readings on the
/// 5-minute grid into `streams.cgm`. Returns the final state.
pub fn simulate(p: &UvaParams, streams: &mut EventStreams, init: State, cfg: &CohortConfig, rng: &mut Pcg64) -> Result<State> {
    let insulin = InsulinRate::new(&streams.basal, &super::events::merge_bolus(&streams.bolus)?);
    let carbs = CarbRate::new(&streams.carbs)?;
    let noise = Normal::new(0.0, cfg.cgm_noise).map_err(|e| super::DataError::Invalid(e.to_string()))?;
    let per_stamp = (GRID_STEP / cfg.dt).round() as usize;
    let warm = (WARMUP / cfg.dt).round() as usize;
    let total = warm + (GRID_LEN - 1) * per_stamp;
    let t_begin = first_stamp() - WARMUP;
    let mut state = init;
    streams.cgm.clear();
    for k in 0..=total {
        let t = t_begin + k as f64 * cfg.dt;
        if k >= warm && (k - warm) % per_stamp == 0 {
            streams.cgm.push((t, state[GS] + noise.sample(rng)));
        }
        if k == total {
            break;
        }
        let meal = streams.carbs.iter().rev().find(|m| m.0 <= t).map_or(0.0, |m| m.1 * 1000.0);
        let u = Drive { iir: p.pmol_per_kg(insulin.rate(t)), delta: carbs.rate(t), meal, hinf: 0.0 };
        euler_step(p, &mut state, u, cfg.dt);
    }
    Ok(state)
}

/// Scaled series with columns Gs, delta, IIR, Hinf (then heart_rate and
/// steps when `vitals`).
pub fn uva_series(d: &Discretized, vitals: bool) -> Array2<f64> {
    let cols = if vitals { 6 } else { 4 };
    let mut out = Array2::zeros((d.series.nrows(), cols));
    for i in 0..d.series.nrows() {
        out[[i, 0]] = d.series[[i, 0]] / GLUCOSE_SCALE;
        out[[i, 1]] = d.series[[i, 2]] / CARB_SCALE;
        out[[i, 2]] = d.series[[i, 1]];
        if vitals {
            out[[i, 4]] = d.series[[i, 3]] / HR_SCALE;
            out[[i, 5]] = d.series[[i, 4]] / STEPS_SCALE;
        }
    }
    out
}

pub fn uva_input_names(vitals: bool) -> Vec<String> {
    let mut names: Vec<String> = ["delta", "IIR", "Hinf"].iter().map(|s| s.to_string()).collect();
    if vitals {
        names.extend([HEART_RATE.to_string(), STEPS.to_string()]);
    }
    names
}

/// Dataset over the UVA graph channels from discretized records.
pub fn uva_dataset(records: &[Discretized], vitals: bool) -> Result<Dataset> {
    let instances = records.iter().map(|d| super::window(&uva_series(d, vitals), 1, HISTORY_STAMPS - 1)).collect();
    Dataset::new(vec!["Gs".into()], uva_input_names(vitals), instances)
}

/// Simulated cohort: each instance starts from a perturbed basal state and
/// follows a random meal/bolus/basal schedule.
pub fn gen_uva_cohort(cfg: &CohortConfig) -> Result<Dataset> {
    let p = UvaParams::default();
    let mut rng = Pcg64::seed_from_u64(cfg.seed);
    let mut records = Vec::with_capacity(cfg.size);
    for _ in 0..cfg.size {
        let mut streams = random_schedule(&p, &mut rng);
        let mut init = p.basal_state();
        let scale = rng.random_range(0.8..1.6);
        init[GP] *= scale;
        init[GT] *= scale;
        init[GS] *= scale;
        simulate(&p, &mut streams, init, cfg, &mut rng)?;
        records.push(discretize(&streams)?);
    }
    uva_dataset(&records, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(p: &UvaParams, streams: &mut EventStreams) -> State {
        let cfg = CohortConfig { cgm_noise: 0.0, ..CohortConfig::new(0, 1) };
        simulate(p, streams, p.basal_state(), &cfg, &mut Pcg64::seed_from_u64(0)).unwrap()
    }

    fn basal_only(p: &UvaParams) -> EventStreams {
        EventStreams { basal: vec![(-1000.0, p.basal_rate_u_per_hour())], ..Default::default() }
    }

    #[test]
    fn basal_state_is_near_equilibrium() {
        let p = UvaParams::default();
        let mut s = basal_only(&p);
        run(&p, &mut s);
        for &(_, g) in &s.cgm {
            assert!((g - p.gb).abs() / p.gb < 0.02, "glucose drifted to {g}");
        }
        assert_eq!(s.cgm.len(), GRID_LEN);
    }

    #[test]
    fn meal_raises_and_insulin_lowers_glucose() {
        let p = UvaParams::default();
        let mut base = basal_only(&p);
        run(&p, &mut base);
        let mut meal = basal_only(&p);
        meal.carbs.push((-180.0, 60.0));
        run(&p, &mut meal);
        let mut bolus = basal_only(&p);
        bolus.bolus.push((-180.0, 4.0));
        run(&p, &mut bolus);
        let last = GRID_LEN - 1;
        assert!(meal.cgm[last - 20].1 > base.cgm[last - 20].1 + 10.0);
        assert!(bolus.cgm[last].1 < base.cgm[last].1 - 10.0);
    }

    #[test]
    fn cohort_shape_and_determinism() {
        let cfg = CohortConfig::new(11, 6);
        let a = gen_uva_cohort(&cfg).unwrap();
        assert_eq!(a.len(), 6);
        assert_eq!((a.p(), a.q()), (41, 12));
        assert_eq!(a.input_names, vec!["delta", "IIR", "Hinf"]);
        assert_eq!(a, gen_uva_cohort(&cfg).unwrap());
        for ins in &a.instances {
            assert!(ins.past_obs.iter().chain(ins.future_obs.iter()).all(|g| g.is_finite() && *g > 0.2 && *g < 6.0));
        }
    }
}
