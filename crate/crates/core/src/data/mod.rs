//! Forecasting instances, the synthetic generator, and event-stream ingestion.

pub mod events;
pub mod synthetic;
pub mod uva;

use std::io::{BufRead, Write};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("instance {index}: {msg}")]
    Shape { index: usize, msg: String },
    #[error("dataset file: {0}")]
    Format(String),
    #[error("event record line {line}: {msg}")]
    Event { line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One forecasting window. Rows are time steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    /// (p+1) × |obs|, last row is t0.
    pub past_obs: Array2<f64>,
    /// p × m.
    pub past_inputs: Array2<f64>,
    /// q × m; row h drives the step from t_h to t_{h+1}.
    pub future_inputs: Array2<f64>,
    /// q × |obs|, rows t_1..t_q.
    pub future_obs: Array2<f64>,
}

impl Instance {
    pub fn p(&self) -> usize {
        self.past_inputs.nrows()
    }

    pub fn q(&self) -> usize {
        self.future_obs.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub obs_names: Vec<String>,
    pub input_names: Vec<String>,
    pub instances: Vec<Instance>,
}

/// Instances stacked along the batch axis, one matrix per time step.
#[derive(Debug, Clone)]
pub struct Batch {
    pub size: usize,
    pub past_obs: Vec<Array2<f64>>,
    pub past_inputs: Vec<Array2<f64>>,
    pub future_inputs: Vec<Array2<f64>>,
    pub future_obs: Vec<Array2<f64>>,
}

fn stack_rows(mats: &[&Array2<f64>], t: usize) -> Array2<f64> {
    let cols = mats[0].ncols();
    let mut out = Array2::zeros((mats.len(), cols));
    for (b, m) in mats.iter().enumerate() {
        out.row_mut(b).assign(&m.row(t));
    }
    out
}

impl Dataset {
    pub fn new(obs_names: Vec<String>, input_names: Vec<String>, instances: Vec<Instance>) -> Result<Self> {
        let ds = Self { obs_names, input_names, instances };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn p(&self) -> usize {
        self.instances.first().map_or(0, Instance::p)
    }

    pub fn q(&self) -> usize {
        self.instances.first().map_or(0, Instance::q)
    }

    pub fn validate(&self) -> Result<()> {
        let (n_obs, m) = (self.obs_names.len(), self.input_names.len());
        let (p, q) = (self.p(), self.q());
        for (index, ins) in self.instances.iter().enumerate() {
            let bad = |msg: String| Err(DataError::Shape { index, msg });
            if ins.past_obs.dim() != (p + 1, n_obs) {
                return bad(format!("past_obs is {:?}, expected {:?}", ins.past_obs.dim(), (p + 1, n_obs)));
            }
            if ins.past_inputs.dim() != (p, m) {
                return bad(format!("past_inputs is {:?}, expected {:?}", ins.past_inputs.dim(), (p, m)));
            }
            if ins.future_inputs.dim() != (q, m) {
                return bad(format!("future_inputs is {:?}, expected {:?}", ins.future_inputs.dim(), (q, m)));
            }
            if ins.future_obs.dim() != (q, n_obs) {
                return bad(format!("future_obs is {:?}, expected {:?}", ins.future_obs.dim(), (q, n_obs)));
            }
            if q == 0 {
                return bad("empty prediction window".into());
            }
        }
        Ok(())
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            obs_names: self.obs_names.clone(),
            input_names: self.input_names.clone(),
            instances: idx.iter().map(|&i| self.instances[i].clone()).collect(),
        }
    }

    pub fn batch(&self) -> Batch {
        let all: Vec<&Instance> = self.instances.iter().collect();
        let per = |f: fn(&Instance) -> &Array2<f64>, steps: usize| -> Vec<Array2<f64>> {
            let mats: Vec<&Array2<f64>> = all.iter().map(|i| f(i)).collect();
            (0..steps).map(|t| stack_rows(&mats, t)).collect()
        };
        let (p, q) = (self.p(), self.q());
        Batch {
            size: all.len(),
            past_obs: per(|i| &i.past_obs, if all.is_empty() { 0 } else { p + 1 }),
            past_inputs: per(|i| &i.past_inputs, p),
            future_inputs: per(|i| &i.future_inputs, q),
            future_obs: per(|i| &i.future_obs, q),
        }
    }

    /// Consecutive chunks of at most `size` instances.
    pub fn chunks(&self, size: usize) -> Vec<Dataset> {
        (0..self.len())
            .collect::<Vec<_>>()
            .chunks(size.max(1))
            .map(|c| self.subset(c))
            .collect()
    }

    /// JSON-lines: a header line with channel names, then one instance per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header { obs_names: self.obs_names.clone(), input_names: self.input_names.clone(), p: self.p(), q: self.q() };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for ins in &self.instances {
            serde_json::to_writer(&mut w, &InstanceJson::from(ins))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header: Header = match lines.next() {
            Some(line) => serde_json::from_str(&line?)?,
            None => return Err(DataError::Format("empty dataset file".into())),
        };
        let mut instances = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let raw: InstanceJson = serde_json::from_str(&line)?;
            instances.push(raw.into_instance(header.obs_names.len(), header.input_names.len())?);
        }
        let ds = Dataset::new(header.obs_names, header.input_names, instances)?;
        if !ds.is_empty() && (ds.p() != header.p || ds.q() != header.q) {
            return Err(DataError::Format(format!(
                "header declares p={}, q={} but instances have p={}, q={}",
                header.p,
                header.q,
                ds.p(),
                ds.q()
            )));
        }
        Ok(ds)
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    obs_names: Vec<String>,
    input_names: Vec<String>,
    p: usize,
    q: usize,
}

#[derive(Serialize, Deserialize)]
struct InstanceJson {
    past_obs: Vec<Vec<f64>>,
    past_inputs: Vec<Vec<f64>>,
    future_inputs: Vec<Vec<f64>>,
    future_obs: Vec<Vec<f64>>,
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.axis_iter(Axis(0)).map(|r| r.to_vec()).collect()
}

fn from_rows(rows: Vec<Vec<f64>>, cols: usize, what: &str) -> Result<Array2<f64>> {
    let n = rows.len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((n, cols), flat)
        .map_err(|_| DataError::Format(format!("{what}: rows must have {cols} values")))
}

impl From<&Instance> for InstanceJson {
    fn from(i: &Instance) -> Self {
        Self {
            past_obs: rows(&i.past_obs),
            past_inputs: rows(&i.past_inputs),
            future_inputs: rows(&i.future_inputs),
            future_obs: rows(&i.future_obs),
        }
    }
}

impl InstanceJson {
    fn into_instance(self, n_obs: usize, m: usize) -> Result<Instance> {
        Ok(Instance {
            past_obs: from_rows(self.past_obs, n_obs, "past_obs")?,
            past_inputs: from_rows(self.past_inputs, m, "past_inputs")?,
            future_inputs: from_rows(self.future_inputs, m, "future_inputs")?,
            future_obs: from_rows(self.future_obs, n_obs, "future_obs")?,
        })
    }
}

/// Splits a (p+1+q) × (|obs|+m) series into an instance: the first
/// `n_obs` columns are observables, the rest inputs. Row p is t0.
pub fn window(series: &Array2<f64>, n_obs: usize, p: usize) -> Instance {
    use ndarray::s;
    let total = series.nrows();
    assert!(total > p + 1, "series too short for p={p}");
    Instance {
        past_obs: series.slice(s![..=p, ..n_obs]).to_owned(),
        past_inputs: series.slice(s![..p, n_obs..]).to_owned(),
        future_inputs: series.slice(s![p..total - 1, n_obs..]).to_owned(),
        future_obs: series.slice(s![p + 1.., ..n_obs]).to_owned(),
    }
}
