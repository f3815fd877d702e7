//! Reverse-mode differentiation over dense row-major matrices.
//!
//! A [`Tape`] either records operations (so [`Tape::backward`] can run) or
//! evaluates eagerly, in which case nothing is retained beyond the live
//! [`Var`]s. Model code is written once against `&Tape` and serves both.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

/// A value on a tape. `id` is `None` for constants and for every value
/// produced by an eager tape.
#[derive(Clone, Debug)]
pub struct Var {
    id: Option<usize>,
    val: Rc<Array2<f64>>,
}

impl Var {
    pub fn value(&self) -> &Array2<f64> {
        &self.val
    }

    pub fn shape(&self) -> (usize, usize) {
        self.val.dim()
    }

    /// Value of a 1×1 variable.
    pub fn scalar(&self) -> f64 {
        debug_assert_eq!(self.val.dim(), (1, 1));
        self.val[[0, 0]]
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }
}

#[derive(Debug)]
enum Op {
    Leaf { offset: usize },
    MatMul,
    AddRow,
    Add,
    Sub,
    Mul,
    Relu,
    Sigmoid,
    Tanh,
    ScaleBy,
    ScaleConst(f64),
    Concat,
    Slice { start: usize },
    SumSq,
    Sum,
    Abs,
    Square,
    Powf(f64),
    SoftmaxRows,
    SumRows,
}

struct Node {
    op: Op,
    inputs: Vec<Var>,
    out: Rc<Array2<f64>>,
}

pub struct Tape {
    recording: bool,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A recording tape.
    pub fn new() -> Self {
        Self { recording: true, nodes: RefCell::new(Vec::new()) }
    }

    /// A forward-only tape; every result is a constant.
    pub fn eager() -> Self {
        Self { recording: false, nodes: RefCell::new(Vec::new()) }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn constant(&self, value: Array2<f64>) -> Var {
        Var { id: None, val: Rc::new(value) }
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// Trainable leaf whose gradient lands at `offset..offset+len` of the
    /// flat gradient returned by [`Tape::backward`].
    pub fn leaf(&self, offset: usize, value: Array2<f64>) -> Var {
        if !self.recording {
            return self.constant(value);
        }
        let val = Rc::new(value);
        Var { id: Some(self.push(Op::Leaf { offset }, Vec::new(), val.clone())), val }
    }

    fn push(&self, op: Op, inputs: Vec<Var>, out: Rc<Array2<f64>>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, inputs, out });
        nodes.len() - 1
    }

    fn record(&self, op: Op, inputs: &[&Var], out: Array2<f64>) -> Var {
        let val = Rc::new(out);
        if !self.recording || inputs.iter().all(|v| v.id.is_none()) {
            return Var { id: None, val };
        }
        let id = self.push(op, inputs.iter().map(|v| (*v).clone()).collect(), val.clone());
        Var { id: Some(id), val }
    }

    pub fn matmul(&self, a: &Var, b: &Var) -> Var {
        assert_eq!(a.val.ncols(), b.val.nrows(), "matmul shape mismatch");
        self.record(Op::MatMul, &[a, b], a.val.dot(&*b.val))
    }

    /// `a + 1·bias` with `bias` a single row.
    pub fn add_row(&self, a: &Var, bias: &Var) -> Var {
        assert_eq!(bias.val.nrows(), 1);
        assert_eq!(a.val.ncols(), bias.val.ncols(), "bias width mismatch");
        self.record(Op::AddRow, &[a, bias], &*a.val + &*bias.val)
    }

    pub fn add(&self, a: &Var, b: &Var) -> Var {
        assert_eq!(a.shape(), b.shape(), "add shape mismatch");
        self.record(Op::Add, &[a, b], &*a.val + &*b.val)
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Var {
        assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
        self.record(Op::Sub, &[a, b], &*a.val - &*b.val)
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Var {
        assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
        self.record(Op::Mul, &[a, b], &*a.val * &*b.val)
    }

    pub fn relu(&self, a: &Var) -> Var {
        self.record(Op::Relu, &[a], a.val.mapv(|x| x.max(0.0)))
    }

    pub fn sigmoid(&self, a: &Var) -> Var {
        self.record(Op::Sigmoid, &[a], a.val.mapv(|x| 1.0 / (1.0 + (-x).exp())))
    }

    pub fn tanh(&self, a: &Var) -> Var {
        self.record(Op::Tanh, &[a], a.val.mapv(f64::tanh))
    }

    /// `s · a` with `s` a 1×1 variable.
    pub fn scale_by(&self, a: &Var, s: &Var) -> Var {
        assert_eq!(s.shape(), (1, 1), "scale_by needs a 1x1 factor");
        let k = s.val[[0, 0]];
        self.record(Op::ScaleBy, &[a, s], a.val.mapv(|x| k * x))
    }

    pub fn scale(&self, a: &Var, c: f64) -> Var {
        self.record(Op::ScaleConst(c), &[a], a.val.mapv(|x| c * x))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        if parts.len() == 1 {
            return parts[0].clone();
        }
        let rows = parts[0].val.nrows();
        let cols: usize = parts.iter().map(|p| p.val.ncols()).sum();
        let mut out = Array2::zeros((rows, cols));
        let mut at = 0;
        for p in parts {
            assert_eq!(p.val.nrows(), rows, "concat row mismatch");
            let w = p.val.ncols();
            out.slice_mut(s![.., at..at + w]).assign(&*p.val);
            at += w;
        }
        let refs: Vec<&Var> = parts.iter().collect();
        self.record(Op::Concat, &refs, out)
    }

    pub fn slice_cols(&self, a: &Var, start: usize, width: usize) -> Var {
        let out = a.val.slice(s![.., start..start + width]).to_owned();
        self.record(Op::Slice { start }, &[a], out)
    }

    pub fn sum_sq(&self, a: &Var) -> Var {
        let v = a.val.iter().map(|x| x * x).sum();
        self.record(Op::SumSq, &[a], Array2::from_elem((1, 1), v))
    }

    pub fn sum(&self, a: &Var) -> Var {
        self.record(Op::Sum, &[a], Array2::from_elem((1, 1), a.val.sum()))
    }

    /// Elementwise |a|; the derivative at 0 is taken as 0.
    pub fn abs(&self, a: &Var) -> Var {
        self.record(Op::Abs, &[a], a.val.mapv(f64::abs))
    }

    pub fn abs_sum(&self, a: &Var) -> Var {
        let abs = self.abs(a);
        self.sum(&abs)
    }

    pub fn square(&self, a: &Var) -> Var {
        self.record(Op::Square, &[a], a.val.mapv(|x| x * x))
    }

    pub fn powf(&self, a: &Var, p: f64) -> Var {
        self.record(Op::Powf(p), &[a], a.val.mapv(|x| x.powf(p)))
    }

    pub fn softmax_rows(&self, a: &Var) -> Var {
        let mut out = (*a.val).clone();
        for mut row in out.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let z = row.sum();
            row.mapv_inplace(|x| x / z);
        }
        self.record(Op::SoftmaxRows, &[a], out)
    }

    /// Column sums as a single row.
    pub fn sum_rows(&self, a: &Var) -> Var {
        let out = a.val.sum_axis(Axis(0)).insert_axis(Axis(0));
        self.record(Op::SumRows, &[a], out)
    }

    /// Gradient of the 1×1 `loss` with respect to every leaf, scattered into
    /// a flat vector of length `n_params`.
    pub fn backward(&self, loss: &Var, n_params: usize) -> Vec<f64> {
        assert_eq!(loss.shape(), (1, 1), "backward needs a scalar loss");
        let mut flat = vec![0.0; n_params];
        let Some(root) = loss.id else {
            return flat;
        };
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Array2<f64>>> = Vec::with_capacity(root + 1);
        grads.resize_with(root + 1, || None);
        grads[root] = Some(Array2::ones((1, 1)));

        fn acc(grads: &mut [Option<Array2<f64>>], v: &Var, g: Array2<f64>) {
            if let Some(id) = v.id {
                match &mut grads[id] {
                    Some(existing) => *existing += &g,
                    slot => *slot = Some(g),
                }
            }
        }

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &nodes[i];
            let x = &node.inputs;
            match node.op {
                Op::Leaf { offset } => {
                    for (dst, v) in flat[offset..offset + g.len()].iter_mut().zip(g.iter()) {
                        *dst += v;
                    }
                }
                Op::MatMul => {
                    if x[0].id.is_some() {
                        acc(&mut grads, &x[0], g.dot(&x[1].val.t()));
                    }
                    if x[1].id.is_some() {
                        acc(&mut grads, &x[1], x[0].val.t().dot(&g));
                    }
                }
                Op::AddRow => {
                    if x[1].id.is_some() {
                        acc(&mut grads, &x[1], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    acc(&mut grads, &x[0], g);
                }
                Op::Add => {
                    if x[1].id.is_some() {
                        acc(&mut grads, &x[1], g.clone());
                    }
                    acc(&mut grads, &x[0], g);
                }
                Op::Sub => {
                    if x[1].id.is_some() {
                        acc(&mut grads, &x[1], -&g);
                    }
                    acc(&mut grads, &x[0], g);
                }
                Op::Mul => {
                    if x[1].id.is_some() {
                        acc(&mut grads, &x[1], &g * &*x[0].val);
                    }
                    if x[0].id.is_some() {
                        acc(&mut grads, &x[0], &g * &*x[1].val);
                    }
                }
                Op::Relu => {
                    let mut d = g;
                    Zip::from(&mut d).and(&*x[0].val).for_each(|d, &a| {
                        if a <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    acc(&mut grads, &x[0], d);
                }
                Op::Sigmoid => {
                    let mut d = g;
                    Zip::from(&mut d).and(&*node.out).for_each(|d, &y| *d *= y * (1.0 - y));
                    acc(&mut grads, &x[0], d);
                }
                Op::Tanh => {
                    let mut d = g;
                    Zip::from(&mut d).and(&*node.out).for_each(|d, &y| *d *= 1.0 - y * y);
                    acc(&mut grads, &x[0], d);
                }
                Op::ScaleBy => {
                    let k = x[1].val[[0, 0]];
                    if x[1].id.is_some() {
                        let ds = (&g * &*x[0].val).sum();
                        acc(&mut grads, &x[1], Array2::from_elem((1, 1), ds));
                    }
                    if x[0].id.is_some() {
                        acc(&mut grads, &x[0], g.mapv(|v| k * v));
                    }
                }
                Op::ScaleConst(c) => acc(&mut grads, &x[0], g.mapv(|v| c * v)),
                Op::Concat => {
                    let mut at = 0;
                    for p in x {
                        let w = p.val.ncols();
                        if p.id.is_some() {
                            acc(&mut grads, p, g.slice(s![.., at..at + w]).to_owned());
                        }
                        at += w;
                    }
                }
                Op::Slice { start } => {
                    let mut d = Array2::zeros(x[0].val.dim());
                    d.slice_mut(s![.., start..start + g.ncols()]).assign(&g);
                    acc(&mut grads, &x[0], d);
                }
                Op::SumSq => {
                    let k = 2.0 * g[[0, 0]];
                    acc(&mut grads, &x[0], x[0].val.mapv(|a| k * a));
                }
                Op::Sum => {
                    acc(&mut grads, &x[0], Array2::from_elem(x[0].val.dim(), g[[0, 0]]));
                }
                Op::Abs => {
                    let mut d = g;
                    Zip::from(&mut d).and(&*x[0].val).for_each(|d, &a| {
                        *d *= if a > 0.0 {
                            1.0
                        } else if a < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    acc(&mut grads, &x[0], d);
                }
                Op::Square => {
                    let mut d = g;
                    Zip::from(&mut d).and(&*x[0].val).for_each(|d, &a| *d *= 2.0 * a);
                    acc(&mut grads, &x[0], d);
                }
                Op::Powf(p) => {
                    let mut d = g;
                    Zip::from(&mut d).and(&*x[0].val).for_each(|d, &a| *d *= p * a.powf(p - 1.0));
                    acc(&mut grads, &x[0], d);
                }
                Op::SoftmaxRows => {
                    let y = &*node.out;
                    let mut d = &g * y;
                    for (mut row, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        Zip::from(&mut row).and(&yrow).for_each(|r, &yv| *r -= yv * dot);
                    }
                    acc(&mut grads, &x[0], d);
                }
                Op::SumRows => {
                    let rows = x[0].val.nrows();
                    let d = g.broadcast((rows, g.ncols())).expect("row broadcast").to_owned();
                    acc(&mut grads, &x[0], d);
                }
            }
        }
        flat
    }
}
