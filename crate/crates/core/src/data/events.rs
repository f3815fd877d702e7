//! Event-stream ingestion: insulin, carbohydrate and vitals interpolation on
//! a 5-minute grid anchored to CGM time stamps.

use std::io::Read;

use chrono::{DateTime, NaiveDateTime};
use ndarray::Array2;

use super::{window, DataError, Instance, Result};

/// Bolus delivery rate, U/min.
pub const BOLUS_RATE: f64 = 1.5;
/// Carbohydrate consumption rate, mg/min (45 g/min).
pub const CARB_RATE_MG: f64 = 45000.0;
pub const GRID_STEP: f64 = 5.0;
pub const GRID_LEN: usize = 54;
pub const HISTORY_STAMPS: usize = 42;
pub const FEATURES: [&str; 5] = ["G", "IIR", "M", "H", "V"];

/// A timed value; times are minutes relative to exercise onset.
pub type Sample = (f64, f64);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventStreams {
    /// Basal rate changes, U/hour.
    pub basal: Vec<Sample>,
    /// Bolus doses, U.
    pub bolus: Vec<Sample>,
    /// Meals, grams of carbohydrate.
    pub carbs: Vec<Sample>,
    pub heart_rate: Vec<Sample>,
    pub steps: Vec<Sample>,
    /// CGM readings, mg/dL.
    pub cgm: Vec<Sample>,
}

fn sort(v: &mut [Sample]) {
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
}

fn parse_time(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    DateTime::parse_from_rfc3339(s)
        .map(|d| d.naive_utc())
        .ok()
        .or_else(|| NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S%.f").ok())
        .or_else(|| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S%.f").ok())
}

impl EventStreams {
    /// Reads `stream,time,value` records. Times are ISO-8601. A row with
    /// stream `onset` sets the time origin; without one the first CGM
    /// stamp plus 210 minutes is used.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut raw: Vec<(String, NaiveDateTime, f64)> = Vec::new();
        let mut onset = None;
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let bad = |msg: String| DataError::Event { line, msg };
            if rec.len() != 3 {
                return Err(bad(format!("expected 3 fields, found {}", rec.len())));
            }
            let time = parse_time(&rec[1]).ok_or_else(|| bad(format!("bad time `{}`", &rec[1])))?;
            let stream = rec[0].to_ascii_lowercase();
            if stream == "onset" {
                onset = Some(time);
                continue;
            }
            let value: f64 = rec[2].parse().map_err(|_| bad(format!("bad value `{}`", &rec[2])))?;
            raw.push((stream, time, value));
        }
        let origin = match onset {
            Some(t) => t,
            None => {
                let first_cgm = raw
                    .iter()
                    .filter(|(s, _, _)| s == "cgm")
                    .map(|(_, t, _)| *t)
                    .min()
                    .ok_or_else(|| DataError::Invalid("no onset row and no CGM readings".into()))?;
                first_cgm + chrono::Duration::minutes(((HISTORY_STAMPS - 1) as i64 + 1) * 5)
            }
        };
        let mut out = EventStreams::default();
        for (line, (stream, time, value)) in raw.into_iter().enumerate() {
            let t = (time - origin).num_milliseconds() as f64 / 60000.0;
            let target = match stream.as_str() {
                "basal" => &mut out.basal,
                "bolus" => &mut out.bolus,
                "carbs" | "carb" => &mut out.carbs,
                "heart_rate" | "hr" => &mut out.heart_rate,
                "steps" | "step_count" => &mut out.steps,
                "cgm" => &mut out.cgm,
                other => {
                    return Err(DataError::Event { line: line + 2, msg: format!("unknown stream `{other}`") })
                }
            };
            target.push((t, value));
        }
        out.normalize();
        Ok(out)
    }

    pub fn normalize(&mut self) {
        for v in [&mut self.basal, &mut self.bolus, &mut self.carbs, &mut self.heart_rate, &mut self.steps, &mut self.cgm] {
            sort(v);
        }
    }
}

/// Folds every dose whose start falls inside the running delivery window of
/// the dose before it into that dose.
pub fn merge_bolus(doses: &[Sample]) -> Result<Vec<Sample>> {
    if let Some(d) = doses.iter().find(|d| d.1 < 0.0) {
        return Err(DataError::Invalid(format!("negative bolus dose {} at t={}", d.1, d.0)));
    }
    let mut out: Vec<Sample> = Vec::with_capacity(doses.len());
    for &(t, b) in doses {
        match out.last_mut() {
            Some(last) if t < last.0 + last.1 / BOLUS_RATE => last.1 += b,
            _ => out.push((t, b)),
        }
    }
    Ok(out)
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Basal step function plus bolus delivery windows, in U/min.
#[derive(Debug, Clone)]
pub struct InsulinRate {
    basal: Vec<Sample>,
    bolus: Vec<Sample>,
}

impl InsulinRate {
    /// `bolus` must already be merged.
    pub fn new(basal: &[Sample], bolus: &[Sample]) -> Self {
        let mut basal = basal.to_vec();
        sort(&mut basal);
        Self { basal, bolus: bolus.to_vec() }
    }

    pub fn basal_rate(&self, t: f64) -> f64 {
        self.basal.iter().rev().find(|(ti, _)| *ti <= t).map_or(0.0, |(_, a)| a / 60.0)
    }

    pub fn bolus_rate(&self, t: f64) -> f64 {
        if self.bolus.iter().any(|&(ti, b)| ti <= t && t < ti + b / BOLUS_RATE) {
            BOLUS_RATE
        } else {
            0.0
        }
    }

    pub fn rate(&self, t: f64) -> f64 {
        self.basal_rate(t) + self.bolus_rate(t)
    }

    /// Exact integral over [lo, hi].
    pub fn integral(&self, lo: f64, hi: f64) -> f64 {
        let mut total = 0.0;
        for (i, &(ti, a)) in self.basal.iter().enumerate() {
            let end = self.basal.get(i + 1).map_or(f64::INFINITY, |n| n.0);
            total += a / 60.0 * overlap(lo, hi, ti, end);
        }
        for &(ti, b) in &self.bolus {
            total += BOLUS_RATE * overlap(lo, hi, ti, ti + b / BOLUS_RATE);
        }
        total
    }
}

/// Meal consumption at a constant 45 g/min, in mg/min.
#[derive(Debug, Clone)]
pub struct CarbRate {
    meals: Vec<Sample>,
}

impl CarbRate {
    pub fn new(meals: &[Sample]) -> Result<Self> {
        if let Some(m) = meals.iter().find(|m| m.1 <= 0.0) {
            return Err(DataError::Invalid(format!("nonpositive meal {} g at t={}", m.1, m.0)));
        }
        let mut meals = meals.to_vec();
        sort(&mut meals);
        Ok(Self { meals })
    }

    fn active_until(m: &Sample) -> f64 {
        m.0 + m.1 / 45.0
    }

    pub fn rate(&self, t: f64) -> f64 {
        let active = self.meals.iter().filter(|m| m.0 <= t && t <= Self::active_until(m)).count();
        CARB_RATE_MG * active as f64
    }

    pub fn integral(&self, lo: f64, hi: f64) -> f64 {
        self.meals.iter().map(|m| CARB_RATE_MG * overlap(lo, hi, m.0, Self::active_until(m))).sum()
    }
}

/// Forward-looking window mean over [t, t+5] (both ends inclusive). An
/// empty window falls back to the nearest sample and reports `true`; with
/// no samples at all the value is 0.
pub fn window_mean(samples: &[Sample], t: f64) -> (f64, bool) {
    let inside: Vec<f64> = samples.iter().filter(|s| t <= s.0 && s.0 <= t + GRID_STEP).map(|s| s.1).collect();
    if !inside.is_empty() {
        return (inside.iter().sum::<f64>() / inside.len() as f64, false);
    }
    let nearest = samples.iter().min_by(|a, b| (a.0 - t).abs().total_cmp(&(b.0 - t).abs()));
    (nearest.map_or(0.0, |s| s.1), true)
}

#[derive(Debug, Clone)]
pub struct Discretized {
    pub times: Vec<f64>,
    /// 54 × 5 columns (G, IIR, M, H, V).
    pub series: Array2<f64>,
    /// Grid points whose heart-rate or step window was empty.
    pub flagged: Vec<usize>,
}

impl Discretized {
    /// Windows the series into 41 history steps, t0, and 12 future steps.
    pub fn to_instance(&self) -> Instance {
        window(&self.series, 1, HISTORY_STAMPS - 1)
    }
}

/// Discretizes the streams on the CGM grid. Requires exactly 54 CGM
/// readings at 5-minute spacing; any gap rejects the instance.
pub fn discretize(streams: &EventStreams) -> Result<Discretized> {
    let mut cgm = streams.cgm.clone();
    sort(&mut cgm);
    if cgm.len() != GRID_LEN {
        return Err(DataError::Invalid(format!("expected {GRID_LEN} CGM readings, found {}", cgm.len())));
    }
    for w in cgm.windows(2) {
        if ((w[1].0 - w[0].0) - GRID_STEP).abs() > 1e-6 {
            return Err(DataError::Invalid(format!("CGM gap between t={} and t={}", w[0].0, w[1].0)));
        }
    }
    let insulin = InsulinRate::new(&streams.basal, &merge_bolus(&streams.bolus)?);
    let carbs = CarbRate::new(&streams.carbs)?;
    let mut series = Array2::zeros((GRID_LEN, FEATURES.len()));
    let mut flagged = Vec::new();
    for (i, &(t, g)) in cgm.iter().enumerate() {
        let (h, fh) = window_mean(&streams.heart_rate, t);
        let (v, fv) = window_mean(&streams.steps, t);
        if fh || fv {
            flagged.push(i);
        }
        series[[i, 0]] = g;
        series[[i, 1]] = insulin.integral(t, t + GRID_STEP) / GRID_STEP;
        series[[i, 2]] = carbs.integral(t, t + GRID_STEP) / GRID_STEP;
        series[[i, 3]] = h;
        series[[i, 4]] = v;
    }
    Ok(Discretized { times: cgm.iter().map(|c| c.0).collect(), series, flagged })
}
