//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! All learned computation in this crate runs through [`Tape`]: forward ops
//! append nodes, [`Tape::backward`] walks the tape once in reverse and
//! accumulates gradients in a fixed order, so repeated runs on identical
//! inputs are bit-identical. Values are f64 throughout.
//!
//! Tensors are dense row-major. Tape ops require 2-D operands (scalars are
//! `[1, 1]`); `reshape` is the only way to change rank. Index lists carried
//! by gather/scatter-style ops are part of the recorded op and are not
//! differentiated.

use std::rc::Rc;

use crate::error::{Error, Result};

/// Dense row-major f64 tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(
                "Tensor::new",
                format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1, 1], data: vec![v] }
    }

    /// 2-D tensor from a flat row-major buffer.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Single-row matrix `1 × data.len()`.
    pub fn row(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor { shape: vec![1, n], data }
    }

    /// Single-column matrix `data.len() × 1`.
    pub fn column(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor { shape: vec![n, 1], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row count; errors are programming bugs, so this asserts 2-D.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "expected 2-D tensor, got {:?}", self.shape);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "expected 2-D tensor, got {:?}", self.shape);
        self.shape[1]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    AddScalar(Var, f64),
    MulScalar(Var, f64),
    PowScalar(Var, f64),
    Clamp(Var, f64, f64),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Softplus(Var),
    MatMul(Var, Var),
    Softmax(Var),
    Sum(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    Reshape(Var),
    RepeatColsGrouped(Var, usize),
    TileCols(Var, usize),
    SumColsGrouped(Var, usize),
    GatherRows(Var, Rc<Vec<usize>>),
    GatherRowsOpt(Var, Rc<Vec<Option<usize>>>),
    CosineSimRows(Var, Var),
    Conv1dDepthwise(Var, Var),
    NeighborConv(Var, Var, Rc<Vec<Vec<Option<usize>>>>),
    SsmScan(Var, Var),
    HuberRows(Var, Var, f64),
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Wengert tape: ordered record of primitive ops, inputs before outputs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn stable_softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, grad: None, op });
        Var(self.nodes.len() - 1)
    }

    /// Record an input (leaf) tensor.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.leaf(Tensor::zeros(vec![rows, cols]))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch { op, lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.val(a).shape().to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.val(a).shape().to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.val(a).shape().to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Mul(a, b)))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let data = self.val(a).data().iter().map(|x| -x).collect();
        let shape = self.val(a).shape().to_vec();
        self.push(Tensor { shape, data }, Op::Neg(a))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let data = self.val(a).data().iter().map(|x| x + c).collect();
        let shape = self.val(a).shape().to_vec();
        self.push(Tensor { shape, data }, Op::AddScalar(a, c))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let data = self.val(a).data().iter().map(|x| x * c).collect();
        let shape = self.val(a).shape().to_vec();
        self.push(Tensor { shape, data }, Op::MulScalar(a, c))
    }

    /// Elementwise power with constant exponent; domain `a > 0` unless the
    /// exponent is a non-negative integer.
    pub fn pow_scalar(&mut self, a: Var, p: f64) -> Var {
        let data = self.val(a).data().iter().map(|x| x.powf(p)).collect();
        let shape = self.val(a).shape().to_vec();
        self.push(Tensor { shape, data }, Op::PowScalar(a, p))
    }

    /// Elementwise clamp; gradient is passed only where the input is strictly
    /// inside `(lo, hi)`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let data = self.val(a).data().iter().map(|x| x.clamp(lo, hi)).collect();
        let shape = self.val(a).shape().to_vec();
        self.push(Tensor { shape, data }, Op::Clamp(a, lo, hi))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data = self.val(a).data().iter().map(|x| x.exp()).collect();
        let shape = self.val(a).shape().to_vec();
        self.push(Tensor { shape, data }, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let data = self.val(a).data().iter().map(|x| x.ln()).collect();
        let shape = self.val(a).shape().to_vec();
        self.push(Tensor { shape, data }, Op::Log(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self.val(a).data().iter().map(|x| sigmoid(*x)).collect();
        let shape = self.val(a).shape().to_vec();
        self.push(Tensor { shape, data }, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let data = self.val(a).data().iter().map(|x| stable_softplus(*x)).collect();
        let shape = self.val(a).shape().to_vec();
        self.push(Tensor { shape, data }, Op::Softplus(a))
    }

    /// `a (N×K) @ b (K×M) -> N×M`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = (self.val(a).rows(), self.val(a).cols());
        let (br, bc) = (self.val(b).rows(), self.val(b).cols());
        if ac != br {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: vec![ar, ac],
                rhs: vec![br, bc],
            });
        }
        let mut out = vec![0.0; ar * bc];
        {
            let da = self.val(a).data();
            let db = self.val(b).data();
            for i in 0..ar {
                for k in 0..ac {
                    let aik = da[i * ac + k];
                    if aik == 0.0 {
                        continue;
                    }
                    let brow = &db[k * bc..(k + 1) * bc];
                    let orow = &mut out[i * bc..(i + 1) * bc];
                    for (o, b) in orow.iter_mut().zip(brow) {
                        *o += aik * b;
                    }
                }
            }
        }
        Ok(self.push(Tensor { shape: vec![ar, bc], data: out }, Op::MatMul(a, b)))
    }

    /// Row-wise softmax over the last dimension of a 2-D tensor.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (r, c) = (self.val(a).rows(), self.val(a).cols());
        let mut out = vec![0.0; r * c];
        {
            let d = self.val(a).data();
            for i in 0..r {
                let row = &d[i * c..(i + 1) * c];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (j, x) in row.iter().enumerate() {
                    let e = (x - mx).exp();
                    out[i * c + j] = e;
                    z += e;
                }
                for j in 0..c {
                    out[i * c + j] /= z;
                }
            }
        }
        self.push(Tensor { shape: vec![r, c], data: out }, Op::Softmax(a))
    }

    /// Sum of all elements, producing a `[1, 1]` scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.val(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Mean of all elements (sum composed with a scalar scale).
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.val(a).numel().max(1);
        let s = self.sum(a);
        self.mul_scalar(s, 1.0 / n as f64)
    }

    /// Vertical concatenation of 2-D tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows", "empty part list"));
        }
        let cols = self.val(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            if self.val(p).cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.val(parts[0]).shape().to_vec(),
                    rhs: self.val(p).shape().to_vec(),
                });
            }
            rows += self.val(p).rows();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.val(p).data());
        }
        Ok(self.push(Tensor { shape: vec![rows, cols], data }, Op::ConcatRows(parts.to_vec())))
    }

    /// Rows `[r0, r1)` of a 2-D tensor.
    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Result<Var> {
        let (r, c) = (self.val(a).rows(), self.val(a).cols());
        if r0 > r1 || r1 > r {
            return Err(Error::contract(
                "slice_rows",
                format!("range {}..{} out of bounds for {} rows", r0, r1, r),
            ));
        }
        let data = self.val(a).data()[r0 * c..r1 * c].to_vec();
        Ok(self.push(Tensor { shape: vec![r1 - r0, c], data }, Op::SliceRows(a, r0, r1)))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.val(a).numel() {
            return Err(Error::contract(
                "reshape",
                format!("cannot reshape {:?} into {:?}", self.val(a).shape(), shape),
            ));
        }
        let data = self.val(a).data().to_vec();
        Ok(self.push(Tensor { shape, data }, Op::Reshape(a)))
    }

    /// `N×D -> N×(D·s)`: each column expands into `s` adjacent copies.
    pub fn repeat_cols_grouped(&mut self, a: Var, s: usize) -> Var {
        let (r, c) = (self.val(a).rows(), self.val(a).cols());
        let mut data = vec![0.0; r * c * s];
        {
            let d = self.val(a).data();
            for i in 0..r {
                for j in 0..c {
                    let v = d[i * c + j];
                    let base = i * c * s + j * s;
                    for k in 0..s {
                        data[base + k] = v;
                    }
                }
            }
        }
        self.push(Tensor { shape: vec![r, c * s], data }, Op::RepeatColsGrouped(a, s))
    }

    /// `N×S -> N×(times·S)`: each row repeats as a whole block `times` times.
    pub fn tile_cols(&mut self, a: Var, times: usize) -> Var {
        let (r, c) = (self.val(a).rows(), self.val(a).cols());
        let mut data = vec![0.0; r * c * times];
        {
            let d = self.val(a).data();
            for i in 0..r {
                let row = &d[i * c..(i + 1) * c];
                for t in 0..times {
                    data[i * c * times + t * c..i * c * times + (t + 1) * c].copy_from_slice(row);
                }
            }
        }
        self.push(Tensor { shape: vec![r, c * times], data }, Op::TileCols(a, times))
    }

    /// `N×(D·s) -> N×D`: sums each adjacent group of `s` columns.
    pub fn sum_cols_grouped(&mut self, a: Var, s: usize) -> Result<Var> {
        let (r, c) = (self.val(a).rows(), self.val(a).cols());
        if s == 0 || c % s != 0 {
            return Err(Error::contract(
                "sum_cols_grouped",
                format!("group size {} does not divide {} columns", s, c),
            ));
        }
        let d_out = c / s;
        let mut data = vec![0.0; r * d_out];
        {
            let d = self.val(a).data();
            for i in 0..r {
                for j in 0..d_out {
                    let mut acc = 0.0;
                    for k in 0..s {
                        acc += d[i * c + j * s + k];
                    }
                    data[i * d_out + j] = acc;
                }
            }
        }
        Ok(self.push(Tensor { shape: vec![r, d_out], data }, Op::SumColsGrouped(a, s)))
    }

    /// Reorder/duplicate rows by an index list; indices are not differentiated.
    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let (r, c) = (self.val(a).rows(), self.val(a).cols());
        for &i in idx.iter() {
            if i >= r {
                return Err(Error::contract(
                    "gather_rows",
                    format!("index {} out of bounds for {} rows", i, r),
                ));
            }
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        {
            let d = self.val(a).data();
            for &i in idx.iter() {
                data.extend_from_slice(&d[i * c..(i + 1) * c]);
            }
        }
        let n = idx.len();
        Ok(self.push(Tensor { shape: vec![n, c], data }, Op::GatherRows(a, idx)))
    }

    /// Like [`Tape::gather_rows`] but `None` produces a zero row.
    pub fn gather_rows_opt(&mut self, a: Var, idx: Rc<Vec<Option<usize>>>) -> Result<Var> {
        let (r, c) = (self.val(a).rows(), self.val(a).cols());
        for &i in idx.iter().flatten() {
            if i >= r {
                return Err(Error::contract(
                    "gather_rows_opt",
                    format!("index {} out of bounds for {} rows", i, r),
                ));
            }
        }
        let mut data = vec![0.0; idx.len() * c];
        {
            let d = self.val(a).data();
            for (o, &i) in idx.iter().enumerate() {
                if let Some(i) = i {
                    data[o * c..(o + 1) * c].copy_from_slice(&d[i * c..(i + 1) * c]);
                }
            }
        }
        let n = idx.len();
        Ok(self.push(Tensor { shape: vec![n, c], data }, Op::GatherRowsOpt(a, idx)))
    }

    /// Row-wise cosine similarity of two `N×D` tensors, producing `N×1`.
    /// Defined as 0 whenever either row has zero norm.
    pub fn cosine_sim_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("cosine_sim_rows", a, b)?;
        let (r, c) = (self.val(a).rows(), self.val(a).cols());
        let mut data = vec![0.0; r];
        {
            let da = self.val(a).data();
            let db = self.val(b).data();
            for i in 0..r {
                let u = &da[i * c..(i + 1) * c];
                let v = &db[i * c..(i + 1) * c];
                let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if nu == 0.0 || nv == 0.0 {
                    continue;
                }
                let dot: f64 = u.iter().zip(v).map(|(x, y)| x * y).sum();
                data[i] = dot / (nu * nv);
            }
        }
        Ok(self.push(Tensor { shape: vec![r, 1], data }, Op::CosineSimRows(a, b)))
    }

    /// Depthwise "same" 1-D convolution along rows: `x: N×C`, `w: T×C` with
    /// odd `T`; zero padding outside the sequence.
    pub fn conv1d_depthwise(&mut self, x: Var, w: Var) -> Result<Var> {
        let (n, c) = (self.val(x).rows(), self.val(x).cols());
        let (t, wc) = (self.val(w).rows(), self.val(w).cols());
        if wc != c || t % 2 == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv1d_depthwise",
                lhs: vec![n, c],
                rhs: vec![t, wc],
            });
        }
        let half = (t / 2) as isize;
        let mut data = vec![0.0; n * c];
        {
            let dx = self.val(x).data();
            let dw = self.val(w).data();
            for i in 0..n as isize {
                for k in 0..t as isize {
                    let j = i + k - half;
                    if j < 0 || j >= n as isize {
                        continue;
                    }
                    let xrow = &dx[j as usize * c..(j as usize + 1) * c];
                    let wrow = &dw[k as usize * c..(k as usize + 1) * c];
                    let orow = &mut data[i as usize * c..(i as usize + 1) * c];
                    for ((o, xx), ww) in orow.iter_mut().zip(xrow).zip(wrow) {
                        *o += xx * ww;
                    }
                }
            }
        }
        Ok(self.push(Tensor { shape: vec![n, c], data }, Op::Conv1dDepthwise(x, w)))
    }

    /// Depthwise convolution over arbitrary neighbor index lists:
    /// `y[i,c] = Σ_t w[t,c] · x[idx[t][i], c]`, missing neighbors contribute 0.
    pub fn neighbor_conv(
        &mut self,
        x: Var,
        w: Var,
        idx: Rc<Vec<Vec<Option<usize>>>>,
    ) -> Result<Var> {
        let (r, c) = (self.val(x).rows(), self.val(x).cols());
        let (t, wc) = (self.val(w).rows(), self.val(w).cols());
        if wc != c || t != idx.len() {
            return Err(Error::ShapeMismatch {
                op: "neighbor_conv",
                lhs: vec![r, c],
                rhs: vec![t, wc],
            });
        }
        let n = idx.first().map_or(0, |v| v.len());
        for tap in idx.iter() {
            if tap.len() != n {
                return Err(Error::contract("neighbor_conv", "ragged index lists"));
            }
            for &i in tap.iter().flatten() {
                if i >= r {
                    return Err(Error::contract(
                        "neighbor_conv",
                        format!("index {} out of bounds for {} rows", i, r),
                    ));
                }
            }
        }
        let mut data = vec![0.0; n * c];
        {
            let dx = self.val(x).data();
            let dw = self.val(w).data();
            for (k, tap) in idx.iter().enumerate() {
                let wrow = &dw[k * c..(k + 1) * c];
                for (i, &j) in tap.iter().enumerate() {
                    let Some(j) = j else { continue };
                    let xrow = &dx[j * c..(j + 1) * c];
                    let orow = &mut data[i * c..(i + 1) * c];
                    for ((o, xx), ww) in orow.iter_mut().zip(xrow).zip(wrow) {
                        *o += xx * ww;
                    }
                }
            }
        }
        Ok(self.push(Tensor { shape: vec![n, c], data }, Op::NeighborConv(x, w, idx)))
    }

    /// Linear recurrence `h_i = a_i ∘ h_{i-1} + b_i` with `h_0 = 0` (the index
    /// convention is `h_{-1} = 0`; row 0 of the output is `b_0`).
    pub fn ssm_scan(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("ssm_scan", a, b)?;
        let (n, c) = (self.val(a).rows(), self.val(a).cols());
        if n == 0 {
            return Err(Error::contract("ssm_scan", "empty sequence"));
        }
        let mut data = vec![0.0; n * c];
        {
            let da = self.val(a).data();
            let db = self.val(b).data();
            data[..c].copy_from_slice(&db[..c]);
            for i in 1..n {
                for j in 0..c {
                    data[i * c + j] = da[i * c + j] * data[(i - 1) * c + j] + db[i * c + j];
                }
            }
        }
        Ok(self.push(Tensor { shape: vec![n, c], data }, Op::SsmScan(a, b)))
    }

    /// Elementwise Huber (smooth-L1) of `pred - target` with threshold `delta`.
    pub fn huber_rows(&mut self, pred: Var, target: Var, delta: f64) -> Result<Var> {
        self.check_same_shape("huber_rows", pred, target)?;
        let shape = self.val(pred).shape().to_vec();
        let data = self
            .val(pred)
            .data()
            .iter()
            .zip(self.val(target).data())
            .map(|(p, t)| {
                let r = p - t;
                if r.abs() <= delta {
                    0.5 * r * r
                } else {
                    delta * (r.abs() - 0.5 * delta)
                }
            })
            .collect();
        Ok(self.push(Tensor { shape, data }, Op::HuberRows(pred, target, delta)))
    }

    /// Affine map `x @ w + bias` with the bias row broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        let n = self.val(y).rows();
        if self.val(bias).rows() != 1 || self.val(bias).cols() != self.val(y).cols() {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: self.val(y).shape().to_vec(),
                rhs: self.val(bias).shape().to_vec(),
            });
        }
        let b = self.gather_rows(bias, Rc::new(vec![0; n]))?;
        self.add(y, b)
    }

    /// Broadcast a `1×C` row to `N×C`.
    pub fn broadcast_row(&mut self, row: Var, n: usize) -> Result<Var> {
        if self.val(row).rows() != 1 {
            return Err(Error::contract("broadcast_row", "expected a single-row tensor"));
        }
        self.gather_rows(row, Rc::new(vec![0; n]))
    }

    /// Reverse-mode sweep from a scalar root. Every node reachable from the
    /// root receives `∂root/∂node` in its grad slot; unreachable nodes get
    /// zeros. Accumulation follows fixed reverse tape order.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.val(root).numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!("root must be scalar, got shape {:?}", self.val(root).shape()),
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|nd| vec![0.0; nd.value.numel()])
            .collect();
        grads[root.0][0] = 1.0;

        for i in (0..=root.0).rev() {
            // Split off current grad to appease the borrow checker.
            let g = std::mem::take(&mut grads[i]);
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    for (ga, gi) in grads[a.0].iter_mut().zip(&g) {
                        *ga += gi;
                    }
                    for (gb, gi) in grads[b.0].iter_mut().zip(&g) {
                        *gb += gi;
                    }
                }
                Op::Sub(a, b) => {
                    for (ga, gi) in grads[a.0].iter_mut().zip(&g) {
                        *ga += gi;
                    }
                    for (gb, gi) in grads[b.0].iter_mut().zip(&g) {
                        *gb -= gi;
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    for j in 0..g.len() {
                        grads[a.0][j] += g[j] * self.nodes[b.0].value.data()[j];
                    }
                    for j in 0..g.len() {
                        grads[b.0][j] += g[j] * self.nodes[a.0].value.data()[j];
                    }
                }
                Op::Neg(a) => {
                    for (ga, gi) in grads[a.0].iter_mut().zip(&g) {
                        *ga -= gi;
                    }
                }
                Op::AddScalar(a, _) => {
                    for (ga, gi) in grads[a.0].iter_mut().zip(&g) {
                        *ga += gi;
                    }
                }
                Op::MulScalar(a, c) => {
                    let c = *c;
                    for (ga, gi) in grads[a.0].iter_mut().zip(&g) {
                        *ga += gi * c;
                    }
                }
                Op::PowScalar(a, p) => {
                    let (a, p) = (*a, *p);
                    for j in 0..g.len() {
                        let x = self.nodes[a.0].value.data()[j];
                        if p != 0.0 {
                            grads[a.0][j] += g[j] * p * x.powf(p - 1.0);
                        }
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    let (a, lo, hi) = (*a, *lo, *hi);
                    for j in 0..g.len() {
                        let x = self.nodes[a.0].value.data()[j];
                        if x > lo && x < hi {
                            grads[a.0][j] += g[j];
                        }
                    }
                }
                Op::Exp(a) => {
                    let a = *a;
                    for j in 0..g.len() {
                        grads[a.0][j] += g[j] * self.nodes[i].value.data()[j];
                    }
                }
                Op::Log(a) => {
                    let a = *a;
                    for j in 0..g.len() {
                        grads[a.0][j] += g[j] / self.nodes[a.0].value.data()[j];
                    }
                }
                Op::Sigmoid(a) => {
                    let a = *a;
                    for j in 0..g.len() {
                        let y = self.nodes[i].value.data()[j];
                        grads[a.0][j] += g[j] * y * (1.0 - y);
                    }
                }
                Op::Softplus(a) => {
                    let a = *a;
                    for j in 0..g.len() {
                        let x = self.nodes[a.0].value.data()[j];
                        grads[a.0][j] += g[j] * sigmoid(x);
                    }
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (ar, ac) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                    let bc = self.nodes[b.0].value.cols();
                    // dA = G @ B^T
                    for i2 in 0..ar {
                        for k in 0..ac {
                            let mut acc = 0.0;
                            for j in 0..bc {
                                acc += g[i2 * bc + j] * self.nodes[b.0].value.data()[k * bc + j];
                            }
                            grads[a.0][i2 * ac + k] += acc;
                        }
                    }
                    // dB = A^T @ G
                    for k in 0..ac {
                        for j in 0..bc {
                            let mut acc = 0.0;
                            for i2 in 0..ar {
                                acc += self.nodes[a.0].value.data()[i2 * ac + k] * g[i2 * bc + j];
                            }
                            grads[b.0][k * bc + j] += acc;
                        }
                    }
                }
                Op::Softmax(a) => {
                    let a = *a;
                    let (r, c) = (self.nodes[i].value.rows(), self.nodes[i].value.cols());
                    for row in 0..r {
                        let y = &self.nodes[i].value.data()[row * c..(row + 1) * c];
                        let gr = &g[row * c..(row + 1) * c];
                        let dot: f64 = y.iter().zip(gr).map(|(yy, gg)| yy * gg).sum();
                        for j in 0..c {
                            grads[a.0][row * c + j] += y[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::Sum(a) => {
                    let a = *a;
                    for ga in grads[a.0].iter_mut() {
                        *ga += g[0];
                    }
                }
                Op::ConcatRows(parts) => {
                    let parts = parts.clone();
                    let mut off = 0;
                    for p in parts {
                        let len = self.nodes[p.0].value.numel();
                        for (gp, gi) in grads[p.0].iter_mut().zip(&g[off..off + len]) {
                            *gp += gi;
                        }
                        off += len;
                    }
                }
                Op::SliceRows(a, r0, _) => {
                    let (a, r0) = (*a, *r0);
                    let c = self.nodes[a.0].value.cols();
                    for (j, gi) in g.iter().enumerate() {
                        grads[a.0][r0 * c + j] += gi;
                    }
                }
                Op::Reshape(a) => {
                    for (ga, gi) in grads[a.0].iter_mut().zip(&g) {
                        *ga += gi;
                    }
                }
                Op::RepeatColsGrouped(a, s) => {
                    let (a, s) = (*a, *s);
                    let (r, c) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                    for i2 in 0..r {
                        for j in 0..c {
                            let mut acc = 0.0;
                            for k in 0..s {
                                acc += g[i2 * c * s + j * s + k];
                            }
                            grads[a.0][i2 * c + j] += acc;
                        }
                    }
                }
                Op::TileCols(a, times) => {
                    let (a, times) = (*a, *times);
                    let (r, c) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                    for i2 in 0..r {
                        for j in 0..c {
                            let mut acc = 0.0;
                            for t in 0..times {
                                acc += g[i2 * c * times + t * c + j];
                            }
                            grads[a.0][i2 * c + j] += acc;
                        }
                    }
                }
                Op::SumColsGrouped(a, s) => {
                    let (a, s) = (*a, *s);
                    let c = self.nodes[a.0].value.cols();
                    let d_out = c / s;
                    let r = self.nodes[a.0].value.rows();
                    for i2 in 0..r {
                        for j in 0..d_out {
                            let gi = g[i2 * d_out + j];
                            for k in 0..s {
                                grads[a.0][i2 * c + j * s + k] += gi;
                            }
                        }
                    }
                }
                Op::GatherRows(a, idx) => {
                    let a = *a;
                    let idx = idx.clone();
                    let c = self.nodes[a.0].value.cols();
                    for (o, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            grads[a.0][src * c + j] += g[o * c + j];
                        }
                    }
                }
                Op::GatherRowsOpt(a, idx) => {
                    let a = *a;
                    let idx = idx.clone();
                    let c = self.nodes[a.0].value.cols();
                    for (o, &src) in idx.iter().enumerate() {
                        if let Some(src) = src {
                            for j in 0..c {
                                grads[a.0][src * c + j] += g[o * c + j];
                            }
                        }
                    }
                }
                Op::CosineSimRows(a, b) => {
                    let (a, b) = (*a, *b);
                    let (r, c) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                    for i2 in 0..r {
                        let u = &self.nodes[a.0].value.data()[i2 * c..(i2 + 1) * c];
                        let v = &self.nodes[b.0].value.data()[i2 * c..(i2 + 1) * c];
                        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                        if nu == 0.0 || nv == 0.0 {
                            continue;
                        }
                        let y = self.nodes[i].value.data()[i2];
                        let gi = g[i2];
                        for j in 0..c {
                            grads[a.0][i2 * c + j] += gi * (v[j] / (nu * nv) - y * u[j] / (nu * nu));
                            grads[b.0][i2 * c + j] += gi * (u[j] / (nu * nv) - y * v[j] / (nv * nv));
                        }
                    }
                }
                Op::Conv1dDepthwise(x, w) => {
                    let (x, w) = (*x, *w);
                    let (n2, c) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                    let t = self.nodes[w.0].value.rows();
                    let half = (t / 2) as isize;
                    for i2 in 0..n2 as isize {
                        for k in 0..t as isize {
                            let j = i2 + k - half;
                            if j < 0 || j >= n2 as isize {
                                continue;
                            }
                            let (iu, ju, ku) = (i2 as usize, j as usize, k as usize);
                            for cc in 0..c {
                                let gi = g[iu * c + cc];
                                grads[x.0][ju * c + cc] +=
                                    gi * self.nodes[w.0].value.data()[ku * c + cc];
                                grads[w.0][ku * c + cc] +=
                                    gi * self.nodes[x.0].value.data()[ju * c + cc];
                            }
                        }
                    }
                }
                Op::NeighborConv(x, w, idx) => {
                    let (x, w) = (*x, *w);
                    let idx = idx.clone();
                    let c = self.nodes[x.0].value.cols();
                    for (k, tap) in idx.iter().enumerate() {
                        for (i2, &j) in tap.iter().enumerate() {
                            let Some(j) = j else { continue };
                            for cc in 0..c {
                                let gi = g[i2 * c + cc];
                                grads[x.0][j * c + cc] +=
                                    gi * self.nodes[w.0].value.data()[k * c + cc];
                                grads[w.0][k * c + cc] +=
                                    gi * self.nodes[x.0].value.data()[j * c + cc];
                            }
                        }
                    }
                }
                Op::SsmScan(a, b) => {
                    let (a, b) = (*a, *b);
                    let (n2, c) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                    // Reverse recurrence: ḡ_i = g_i + a_{i+1} ∘ ḡ_{i+1};
                    // then d b_i = ḡ_i and d a_i = ḡ_i ∘ h_{i-1}.
                    let mut gbar = vec![0.0; c];
                    for i2 in (0..n2).rev() {
                        for j in 0..c {
                            let mut gb = g[i2 * c + j];
                            if i2 + 1 < n2 {
                                gb += self.nodes[a.0].value.data()[(i2 + 1) * c + j] * gbar[j];
                            }
                            gbar[j] = gb;
                            grads[b.0][i2 * c + j] += gb;
                            if i2 > 0 {
                                grads[a.0][i2 * c + j] +=
                                    gb * self.nodes[i].value.data()[(i2 - 1) * c + j];
                            }
                        }
                    }
                }
                Op::HuberRows(p, t, delta) => {
                    let (p, t, delta) = (*p, *t, *delta);
                    for j in 0..g.len() {
                        let r = self.nodes[p.0].value.data()[j] - self.nodes[t.0].value.data()[j];
                        let d = r.clamp(-delta, delta);
                        grads[p.0][j] += g[j] * d;
                        grads[t.0][j] -= g[j] * d;
                    }
                }
            }
            grads[i] = g;
        }

        for (node, grad) in self.nodes.iter_mut().zip(grads) {
            node.grad = Some(grad);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn elementwise_add() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(1, 2, vec![1.0, 2.0]));
        let b = tape.leaf(t(1, 2, vec![3.0, 4.0]));
        let y = tape.add(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 6.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = tape.leaf(t(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let v = tape.leaf(t(3, 1, vec![2.5, -1.0, 7.0]));
        let y = tape.matmul(eye, v).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5, -1.0, 7.0]);
    }

    #[test]
    fn softmax_symmetry() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(1, 2, vec![0.0, 0.0]));
        let y = tape.softmax(a);
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(1, 2, vec![1.0, 2.0]));
        let b = tape.leaf(t(2, 1, vec![3.0, 4.0]));
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2]") && msg.contains("[2, 1]"), "{msg}");
    }

    #[test]
    fn backward_square_sum() {
        // root = sum(x∘x), x=[1,2] → grad(x)=[2,4]
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 2, vec![1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let root = tape.sum(sq);
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_constant_root_zero_grads() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 3, vec![1.0, 2.0, 3.0]));
        let root = tape.scalar(5.0);
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 2, vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn scan_hand_recursion() {
        // Ā≡0.5, B̄x≡[1,1,1] → h=[1,1.5,1.75]
        let mut tape = Tape::new();
        let a = tape.leaf(t(3, 1, vec![0.5, 0.5, 0.5]));
        let b = tape.leaf(t(3, 1, vec![1.0, 1.0, 1.0]));
        let h = tape.ssm_scan(a, b).unwrap();
        assert_eq!(tape.value(h).data(), &[1.0, 1.5, 1.75]);
    }

    #[test]
    fn gather_rows_roundtrip() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let perm = Rc::new(vec![2usize, 0, 1]);
        let y = tape.gather_rows(x, perm).unwrap();
        let inv = Rc::new(vec![1usize, 2, 0]);
        let z = tape.gather_rows(y, inv).unwrap();
        assert_eq!(tape.value(z).data(), tape.value(x).data());
    }

    #[test]
    fn cosine_zero_vector_convention() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(2, 2, vec![0.0, 0.0, 1.0, 0.0]));
        let b = tape.leaf(t(2, 2, vec![1.0, 1.0, 2.0, 0.0]));
        let y = tape.cosine_sim_rows(a, b).unwrap();
        assert_eq!(tape.value(y).data()[0], 0.0);
        assert!((tape.value(y).data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn conv1d_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(4, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        // 3-tap kernel with only the center set → identity.
        let w = tape.leaf(t(3, 2, vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]));
        let y = tape.conv1d_depthwise(x, w).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn determinism_forward_backward() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(t(2, 3, vec![0.3, -1.2, 2.2, 0.7, 0.1, -0.5]));
            let w = tape.leaf(t(3, 2, vec![0.11, -0.7, 0.23, 0.9, -1.4, 0.05]));
            let h = tape.matmul(x, w).unwrap();
            let s = tape.sigmoid(h);
            let sm = tape.softmax(s);
            let root = tape.sum(sm);
            tape.backward(root).unwrap();
            (
                tape.value(sm).data().to_vec(),
                tape.grad(x).unwrap().to_vec(),
                tape.grad(w).unwrap().to_vec(),
            )
        };
        let (v1, gx1, gw1) = run();
        let (v2, gx2, gw2) = run();
        // Bit-identical, not approximately equal.
        assert_eq!(v1, v2);
        assert_eq!(gx1, gx2);
        assert_eq!(gw1, gw2);
    }
}
