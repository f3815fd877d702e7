//! Small deterministic neural-network kernel: MLPs, a stacked LSTM encoder,
//! a flat parameter vector with a named layout, and gradient utilities.

mod tape;

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use tape::{Tape, Var};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("parameter layout: {0}")]
    Layout(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// One named tensor inside a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub component: String,
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat parameter storage. Entries are laid out contiguously in insertion
/// order and stored row-major.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    layout: Vec<ParamEntry>,
}

impl ParamVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layout(&self) -> &[ParamEntry] {
        &self.layout
    }

    /// Appends a tensor and returns its entry index.
    pub fn push(&mut self, component: &str, name: &str, value: &Array2<f64>) -> usize {
        let (rows, cols) = value.dim();
        self.layout.push(ParamEntry {
            component: component.to_string(),
            name: name.to_string(),
            offset: self.values.len(),
            rows,
            cols,
        });
        self.values.extend(value.iter().copied());
        self.layout.len() - 1
    }

    pub fn index_of(&self, component: &str, name: &str) -> Option<usize> {
        self.layout.iter().position(|e| e.component == component && e.name == name)
    }

    pub fn entry(&self, component: &str, name: &str) -> Option<&ParamEntry> {
        self.index_of(component, name).map(|i| &self.layout[i])
    }

    pub fn tensor(&self, index: usize) -> Array2<f64> {
        let e = &self.layout[index];
        Array2::from_shape_vec((e.rows, e.cols), self.values[e.range()].to_vec())
            .expect("layout entry matches its range")
    }

    pub fn get(&self, component: &str, name: &str) -> Option<Array2<f64>> {
        self.index_of(component, name).map(|i| self.tensor(i))
    }

    pub fn set(&mut self, component: &str, name: &str, value: &Array2<f64>) -> Result<()> {
        let e = self
            .entry(component, name)
            .ok_or_else(|| NnError::Layout(format!("no tensor {component}/{name}")))?
            .clone();
        if value.dim() != (e.rows, e.cols) {
            return Err(NnError::Shape(format!(
                "{component}/{name} is {}x{}, got {:?}",
                e.rows,
                e.cols,
                value.dim()
            )));
        }
        self.values[e.range()].iter_mut().zip(value.iter()).for_each(|(d, s)| *d = *s);
        Ok(())
    }

    /// Named tensors, keyed by (component, name).
    pub fn unflatten(&self) -> BTreeMap<(String, String), Array2<f64>> {
        (0..self.layout.len())
            .map(|i| {
                let e = &self.layout[i];
                ((e.component.clone(), e.name.clone()), self.tensor(i))
            })
            .collect()
    }

    /// Rebuilds values from named tensors using this vector's layout.
    pub fn flatten(&self, tensors: &BTreeMap<(String, String), Array2<f64>>) -> Result<Self> {
        let mut out = self.clone();
        for e in &self.layout {
            let t = tensors
                .get(&(e.component.clone(), e.name.clone()))
                .ok_or_else(|| NnError::Layout(format!("missing {}/{}", e.component, e.name)))?;
            out.set(&e.component, &e.name, t)?;
        }
        Ok(out)
    }

    /// Indices of the entries belonging to components that satisfy `pred`.
    pub fn ranges_where<F: Fn(&ParamEntry) -> bool>(&self, pred: F) -> Vec<std::ops::Range<usize>> {
        self.layout.iter().filter(|e| pred(e)).map(ParamEntry::range).collect()
    }

    /// One leaf per tensor on `tape`.
    pub fn bind(&self, tape: &Tape) -> Bound {
        Bound {
            vars: (0..self.layout.len())
                .map(|i| tape.leaf(self.layout[i].offset, self.tensor(i)))
                .collect(),
            index: self
                .layout
                .iter()
                .enumerate()
                .map(|(i, e)| ((e.component.clone(), e.name.clone()), i))
                .collect(),
        }
    }

    pub fn to_checkpoint(&self) -> String {
        let ck = Checkpoint { version: CHECKPOINT_VERSION, layout: self.layout.clone(), values: self.values.clone() };
        serde_json::to_string(&ck).expect("checkpoint is serializable")
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(NnError::Version(ck.version));
        }
        let mut at = 0;
        for e in &ck.layout {
            if e.offset != at {
                return Err(NnError::Layout(format!("{}/{} not contiguous", e.component, e.name)));
            }
            at += e.len();
        }
        if at != ck.values.len() {
            return Err(NnError::Layout(format!("layout covers {at} values, found {}", ck.values.len())));
        }
        Ok(Self { values: ck.values, layout: ck.layout })
    }
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    layout: Vec<ParamEntry>,
    values: Vec<f64>,
}

/// Parameter leaves of one forward pass.
pub struct Bound {
    vars: Vec<Var>,
    index: BTreeMap<(String, String), usize>,
}

impl Bound {
    pub fn get(&self, component: &str, name: &str) -> &Var {
        let i = self
            .index
            .get(&(component.to_string(), name.to_string()))
            .unwrap_or_else(|| panic!("no bound tensor {component}/{name}"));
        &self.vars[*i]
    }

    pub fn try_get(&self, component: &str, name: &str) -> Option<&Var> {
        self.index.get(&(component.to_string(), name.to_string())).map(|&i| &self.vars[i])
    }
}

fn uniform(rng: &mut Pcg64, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        if bound == 0.0 {
            0.0
        } else {
            rng.random_range(-bound..bound)
        }
    })
}

pub fn init_rng(seed: u64) -> Pcg64 {
    Pcg64::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub in_dim: usize,
    pub hidden_layers: usize,
    pub hidden_units: usize,
    pub out_dim: usize,
    pub dropout: f64,
}

impl MlpSpec {
    /// Two hidden layers of 16 ReLU units, no dropout.
    pub fn standard(in_dim: usize, out_dim: usize) -> Self {
        Self { in_dim, hidden_layers: 2, hidden_units: 16, out_dim, dropout: 0.0 }
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.in_dim];
        w.extend(std::iter::repeat_n(self.hidden_units, self.hidden_layers));
        w.push(self.out_dim);
        w
    }

    pub fn param_count(&self) -> usize {
        self.widths().windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }

    /// Appends `W{l}` (fan_in × fan_out) and `b{l}` (1 × fan_out) tensors for
    /// every layer, drawn from U(±1/√fan_in).
    pub fn init_into(&self, pv: &mut ParamVector, component: &str, rng: &mut Pcg64) {
        for (l, pair) in self.widths().windows(2).enumerate() {
            let bound = 1.0 / (pair[0].max(1) as f64).sqrt();
            pv.push(component, &format!("W{l}"), &uniform(rng, pair[0], pair[1], bound));
            pv.push(component, &format!("b{l}"), &uniform(rng, 1, pair[1], bound));
        }
    }

    /// Affine-ReLU stack with an affine output layer. `x` is batch × in_dim.
    /// Dropout applies to hidden activations only when `rng` is given.
    pub fn forward(
        &self,
        tape: &Tape,
        params: &Bound,
        component: &str,
        x: &Var,
        mut rng: Option<&mut Pcg64>,
    ) -> Var {
        assert_eq!(x.shape().1, self.in_dim, "mlp input width for {component}");
        let layers = self.hidden_layers + 1;
        let mut h = x.clone();
        for l in 0..layers {
            let w = params.get(component, &format!("W{l}"));
            let b = params.get(component, &format!("b{l}"));
            h = tape.add_row(&tape.matmul(&h, w), b);
            if l + 1 < layers {
                h = tape.relu(&h);
                if let (Some(r), true) = (rng.as_deref_mut(), self.dropout > 0.0) {
                    h = dropout(tape, &h, self.dropout, r);
                }
            }
        }
        h
    }
}

/// Inverted dropout with an explicit generator.
pub fn dropout(tape: &Tape, x: &Var, rate: f64, rng: &mut Pcg64) -> Var {
    let keep = 1.0 - rate;
    let (r, c) = x.shape();
    let mask = Array2::from_shape_simple_fn((r, c), || {
        if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    tape.mul(x, &tape.constant(mask))
}

/// Single-instance convenience wrapper around [`MlpSpec::forward`].
pub fn mlp_forward(spec: &MlpSpec, params: &ParamVector, component: &str, input: &[f64]) -> Result<Vec<f64>> {
    if input.len() != spec.in_dim {
        return Err(NnError::Shape(format!("expected {} inputs, got {}", spec.in_dim, input.len())));
    }
    let tape = Tape::eager();
    let bound = params.bind(&tape);
    let x = tape.constant(Array2::from_shape_vec((1, input.len()), input.to_vec()).expect("row"));
    Ok(spec.forward(&tape, &bound, component, &x, None).value().iter().copied().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub layers: usize,
    pub hidden_dim: usize,
    pub input_dim: usize,
}

impl EncoderSpec {
    pub fn new(input_dim: usize, hidden_dim: usize) -> Self {
        Self { layers: 2, hidden_dim, input_dim }
    }

    pub fn param_count(&self) -> usize {
        let h = self.hidden_dim;
        (0..self.layers)
            .map(|l| {
                let i = if l == 0 { self.input_dim } else { h };
                i * 4 * h + h * 4 * h + 4 * h
            })
            .sum()
    }

    /// Per layer: `W_ih{l}` (in × 4H), `W_hh{l}` (H × 4H) from U(±1/√H), and
    /// a zero bias `b{l}` (1 × 4H). Gate column order is i, f, g, o.
    pub fn init_into(&self, pv: &mut ParamVector, component: &str, rng: &mut Pcg64) {
        let h = self.hidden_dim;
        let bound = 1.0 / (h.max(1) as f64).sqrt();
        for l in 0..self.layers {
            let i = if l == 0 { self.input_dim } else { h };
            pv.push(component, &format!("W_ih{l}"), &uniform(rng, i, 4 * h, bound));
            pv.push(component, &format!("W_hh{l}"), &uniform(rng, h, 4 * h, bound));
            pv.push(component, &format!("b{l}"), &Array2::zeros((1, 4 * h)));
        }
    }

    /// Runs the stacked LSTM over `seq` (each step batch × input_dim) and
    /// returns the final top-layer hidden state (batch × hidden_dim).
    pub fn encode(&self, tape: &Tape, params: &Bound, component: &str, seq: &[Var]) -> Var {
        assert!(!seq.is_empty(), "encoder needs at least one step");
        let h = self.hidden_dim;
        let batch = seq[0].shape().0;
        let mut inputs: Vec<Var> = seq.to_vec();
        for l in 0..self.layers {
            let w_ih = params.get(component, &format!("W_ih{l}"));
            let w_hh = params.get(component, &format!("W_hh{l}"));
            let b = params.get(component, &format!("b{l}"));
            let mut hidden = tape.constant(Array2::zeros((batch, h)));
            let mut cell = tape.constant(Array2::zeros((batch, h)));
            let mut outputs = Vec::with_capacity(inputs.len());
            for x in &inputs {
                assert_eq!(x.shape().1, w_ih.shape().0, "encoder input width");
                let z = tape.add_row(&tape.add(&tape.matmul(x, w_ih), &tape.matmul(&hidden, w_hh)), b);
                let i = tape.sigmoid(&tape.slice_cols(&z, 0, h));
                let f = tape.sigmoid(&tape.slice_cols(&z, h, h));
                let g = tape.tanh(&tape.slice_cols(&z, 2 * h, h));
                let o = tape.sigmoid(&tape.slice_cols(&z, 3 * h, h));
                cell = tape.add(&tape.mul(&f, &cell), &tape.mul(&i, &g));
                hidden = tape.mul(&o, &tape.tanh(&cell));
                outputs.push(hidden.clone());
            }
            inputs = outputs;
        }
        inputs.pop().expect("nonempty sequence")
    }
}

/// Single-sequence convenience wrapper around [`EncoderSpec::encode`];
/// `sequence` is T rows of `input_dim` values.
pub fn encode(spec: &EncoderSpec, params: &ParamVector, component: &str, sequence: &[Vec<f64>]) -> Result<Vec<f64>> {
    if sequence.is_empty() {
        return Err(NnError::Shape("empty sequence".into()));
    }
    let tape = Tape::eager();
    let bound = params.bind(&tape);
    let mut seq = Vec::with_capacity(sequence.len());
    for row in sequence {
        if row.len() != spec.input_dim {
            return Err(NnError::Shape(format!("expected {} features, got {}", spec.input_dim, row.len())));
        }
        seq.push(tape.constant(Array2::from_shape_vec((1, row.len()), row.clone()).expect("row")));
    }
    Ok(spec.encode(&tape, &bound, component, &seq).value().iter().copied().collect())
}

/// Loss value and exact gradient of `f` at `params`.
pub fn value_and_grad<F>(params: &ParamVector, f: F) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&Tape, &Bound) -> Result<Var>,
{
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let loss = f(&tape, &bound)?;
    let value = loss.scalar();
    if !value.is_finite() {
        return Err(NnError::NonFinite(format!("loss evaluated to {value}")));
    }
    let g = tape.backward(&loss, params.len());
    if let Some(i) = g.iter().position(|v| !v.is_finite()) {
        return Err(NnError::NonFinite(format!("gradient coordinate {i} is {}", g[i])));
    }
    Ok((value, g))
}

/// Gradient of `f` packaged with the parameter layout.
pub fn grad<F>(params: &ParamVector, f: F) -> Result<ParamVector>
where
    F: FnOnce(&Tape, &Bound) -> Result<Var>,
{
    let (_, g) = value_and_grad(params, f)?;
    Ok(ParamVector { values: g, layout: params.layout.clone() })
}

/// Loss value of `f` without recording.
pub fn value<F>(params: &ParamVector, f: F) -> Result<f64>
where
    F: FnOnce(&Tape, &Bound) -> Result<Var>,
{
    let tape = Tape::eager();
    let bound = params.bind(&tape);
    Ok(f(&tape, &bound)?.scalar())
}

/// Compares the reverse-mode gradient against central differences on
/// `n_coords` sampled coordinates and returns the largest
/// `|fd - g| / max(|g|, 1e-4·max(1, |L|))`. The floor keeps coordinates
/// whose true gradient sits below the differencing roundoff (about
/// `eps·|L|/h`) from reporting noise as error. A coordinate failing `tol`
/// at step `h` is re-measured at `h/10`, which separates kink crossings from
/// real errors.
pub fn finite_diff_check<F>(
    params: &ParamVector,
    f: F,
    n_coords: usize,
    h: f64,
    tol: f64,
    rng: &mut Pcg64,
) -> Result<f64>
where
    F: Fn(&Tape, &Bound) -> Result<Var>,
{
    let (loss, g) = value_and_grad(params, &f)?;
    let floor = 1e-4 * loss.abs().max(1.0);
    let n = params.len();
    let coords: Vec<usize> = if n_coords >= n {
        (0..n).collect()
    } else {
        rand::seq::index::sample(rng, n, n_coords).into_vec()
    };
    let central = |i: usize, step: f64| -> Result<f64> {
        let mut p = params.clone();
        p.values[i] += step;
        let plus = value(&p, &f)?;
        p.values[i] = params.values[i] - step;
        let minus = value(&p, &f)?;
        Ok((plus - minus) / (2.0 * step))
    };
    let mut worst = 0.0f64;
    for i in coords {
        let rel = |fd: f64| (fd - g[i]).abs() / g[i].abs().max(floor);
        let mut err = rel(central(i, h)?);
        if err > tol {
            err = err.min(rel(central(i, h / 10.0)?));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_mlp_outputs_zero() {
        let spec = MlpSpec::standard(3, 2);
        let mut pv = ParamVector::new();
        spec.init_into(&mut pv, "m", &mut init_rng(1));
        pv.values.iter_mut().for_each(|v| *v = 0.0);
        assert_eq!(mlp_forward(&spec, &pv, "m", &[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn single_affine_layer() {
        let spec = MlpSpec { in_dim: 1, hidden_layers: 0, hidden_units: 16, out_dim: 1, dropout: 0.0 };
        let mut pv = ParamVector::new();
        pv.push("m", "W0", &array![[2.0]]);
        pv.push("m", "b0", &array![[1.0]]);
        assert_eq!(mlp_forward(&spec, &pv, "m", &[3.0]).unwrap(), vec![7.0]);
        assert!(mlp_forward(&spec, &pv, "m", &[3.0, 1.0]).is_err());
    }

    #[test]
    fn mlp_matches_plain_loops() {
        let spec = MlpSpec { in_dim: 4, hidden_layers: 2, hidden_units: 5, out_dim: 3, dropout: 0.0 };
        let mut pv = ParamVector::new();
        spec.init_into(&mut pv, "m", &mut init_rng(7));
        assert_eq!(pv.len(), spec.param_count());
        let x = [0.3, -0.8, 1.1, 0.05];
        let got = mlp_forward(&spec, &pv, "m", &x).unwrap();

        let mut h: Vec<f64> = x.to_vec();
        for l in 0..3 {
            let w = pv.get("m", &format!("W{l}")).unwrap();
            let b = pv.get("m", &format!("b{l}")).unwrap();
            let mut next = vec![0.0; w.ncols()];
            for (j, out) in next.iter_mut().enumerate() {
                let mut acc = b[[0, j]];
                for (i, hi) in h.iter().enumerate() {
                    acc += hi * w[[i, j]];
                }
                *out = if l < 2 { acc.max(0.0) } else { acc };
            }
            h = next;
        }
        for (a, b) in got.iter().zip(&h) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_input_width_mlp_is_bias_driven() {
        let spec = MlpSpec::standard(0, 1);
        let mut pv = ParamVector::new();
        spec.init_into(&mut pv, "m", &mut init_rng(3));
        let out = mlp_forward(&spec, &pv, "m", &[]).unwrap();
        assert!(out[0].is_finite());
    }

    #[test]
    fn zero_lstm_outputs_zero() {
        let spec = EncoderSpec::new(2, 3);
        let mut pv = ParamVector::new();
        spec.init_into(&mut pv, "enc", &mut init_rng(5));
        assert_eq!(pv.len(), spec.param_count());
        pv.values.iter_mut().for_each(|v| *v = 0.0);
        let out = encode(&spec, &pv, "enc", &[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        assert_eq!(out, vec![0.0; 3]);
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn lstm_single_cell_closed_form() {
        let spec = EncoderSpec { layers: 1, hidden_dim: 1, input_dim: 1 };
        let mut pv = ParamVector::new();
        pv.push("enc", "W_ih0", &array![[0.5, -0.3, 0.8, 0.2]]);
        pv.push("enc", "W_hh0", &array![[0.1, 0.4, -0.6, 0.7]]);
        pv.push("enc", "b0", &array![[0.05, 0.1, -0.2, 0.3]]);
        let x = 1.3;
        let (i, f, g, o) = (
            sigmoid(0.5 * x + 0.05),
            sigmoid(-0.3 * x + 0.1),
            (0.8 * x - 0.2f64).tanh(),
            sigmoid(0.2 * x + 0.3),
        );
        let c = f * 0.0 + i * g;
        let h = o * c.tanh();
        let one = encode(&spec, &pv, "enc", &[vec![x]]).unwrap();
        assert!((one[0] - h).abs() < 1e-15);
        let two = encode(&spec, &pv, "enc", &[vec![x], vec![x]]).unwrap();
        assert!((two[0] - one[0]).abs() > 1e-6);
    }

    #[test]
    fn flatten_round_trip_and_checkpoint() {
        let mut pv = ParamVector::new();
        MlpSpec::standard(3, 2).init_into(&mut pv, "mlp:a", &mut init_rng(1));
        EncoderSpec::new(2, 4).init_into(&mut pv, "encoder", &mut init_rng(2));
        let back = pv.flatten(&pv.unflatten()).unwrap();
        assert_eq!(back, pv);
        let text = pv.to_checkpoint();
        assert_eq!(ParamVector::from_checkpoint(&text).unwrap(), pv);
        let bad = text.replacen("\"version\":1", "\"version\":9", 1);
        assert!(matches!(ParamVector::from_checkpoint(&bad), Err(NnError::Version(9))));
        let covered: usize = pv.layout().iter().map(ParamEntry::len).sum();
        assert_eq!(covered, pv.len());
    }

    #[test]
    fn init_is_seeded() {
        let make = |seed| {
            let mut pv = ParamVector::new();
            MlpSpec::standard(3, 1).init_into(&mut pv, "m", &mut init_rng(seed));
            pv
        };
        assert_eq!(make(2024), make(2024));
        assert_ne!(make(2024), make(2025));
        assert!(make(2024).get("m", "W0").unwrap().iter().all(|w| w.abs() <= 1.0 / 3f64.sqrt()));
    }

    #[test]
    fn half_norm_grad_and_linear_fd() {
        let mut pv = ParamVector::new();
        pv.push("p", "v", &array![[0.5, -2.0, 3.0]]);
        let g = grad(&pv, |t, b| Ok(t.scale(&t.sum_sq(b.get("p", "v")), 0.5))).unwrap();
        assert_eq!(g.values, pv.values);
        let err = finite_diff_check(
            &pv,
            |t, b| Ok(t.sum(&t.scale(b.get("p", "v"), 3.0))),
            3,
            1e-5,
            1e-6,
            &mut init_rng(0),
        )
        .unwrap();
        assert!(err < 1e-10);
    }

    #[test]
    fn mlp_lstm_gradients_match_finite_differences() {
        let mlp = MlpSpec::standard(3, 2);
        let enc = EncoderSpec::new(3, 3);
        let mut pv = ParamVector::new();
        let mut rng = init_rng(11);
        mlp.init_into(&mut pv, "m", &mut rng);
        enc.init_into(&mut pv, "e", &mut rng);
        for v in pv.values.iter_mut().filter(|v| **v == 0.0) {
            *v = 0.01;
        }
        let seq: Vec<Array2<f64>> = (0..4)
            .map(|k| Array2::from_shape_fn((5, 3), |(i, j)| ((i * 3 + j + k) as f64 * 0.37).sin()))
            .collect();
        let f = |t: &Tape, b: &Bound| {
            let s: Vec<Var> = seq.iter().map(|a| t.constant(a.clone())).collect();
            let h = enc.encode(t, b, "e", &s);
            let y = mlp.forward(t, b, "m", &h, None);
            Ok(t.sum_sq(&t.tanh(&y)))
        };
        let err = finite_diff_check(&pv, f, 100, 1e-5, 1e-6, &mut init_rng(3)).unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let mut pv = ParamVector::new();
        pv.push("p", "v", &array![[0.0]]);
        let r = value_and_grad(&pv, |t, b| Ok(t.sum(&t.powf(b.get("p", "v"), -1.0))));
        assert!(matches!(r, Err(NnError::NonFinite(_))));
    }
}
