//! Reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every operation in execution order. Values are
//! computed eagerly; [`Tape::backward`] walks the recorded nodes in exact
//! reverse order and accumulates gradients, so a node consumed by several
//! downstream operations receives the sum of their contributions.
//!
//! Shapes are explicit: scalars are `[1]`, vectors `[n]`, matrices
//! `[rows, cols]`. The only broadcast is adding a `[cols]` vector to every
//! row of a `[rows, cols]` matrix.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: unsupported shape {shape:?}")]
    UnsupportedShape { op: &'static str, shape: Vec<usize> },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("{0}")]
    InvalidArgument(String),
}

pub type NResult<T> = std::result::Result<T, NumericsError>;

/// Dense row-major array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> NResult<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(NumericsError::InvalidTensor(format!(
                "shape {shape:?} must be non-empty with positive extents"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NumericsError::InvalidTensor(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::InvalidTensor("non-finite value".into()));
        }
        Ok(Tensor { shape, data })
    }

    /// Panics on an empty vector.
    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector");
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> NResult<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a `[1]` tensor (first value otherwise).
    pub fn item(&self) -> f64 {
        self.data[0]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, Var),
    Concat(Vec<Var>),
    StackRows(Vec<Var>),
    Slice(Var, usize),
    Dot(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Cos(Var),
    Sin(Var),
    Softmax(Var, usize),
    Sum(Var),
    Scale(Var, f64),
    WeightedBce {
        prob: Var,
        target: f64,
        weight_pos: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Probability clamp applied inside the weighted cross-entropy op.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn emit(
        &mut self,
        op_name: &'static str,
        value: Tensor,
        op: Op,
        inputs: &[Var],
    ) -> NResult<Var> {
        if value.data.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { op: op_name });
        }
        let rg = self.grad_of(inputs);
        Ok(self.push(value, op, rg))
    }

    /// Matrix product. Supports `[r,k]x[k,c]`, `[r,k]x[k]` and `[k]x[k,c]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> NResult<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || NumericsError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let av = &self.nodes[a.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let out = match (sa.as_slice(), sb.as_slice()) {
            (&[r, k], &[k2, c]) if k == k2 => {
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    let row = &mut out[i * c..(i + 1) * c];
                    for p in 0..k {
                        let aip = av[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for (o, &bv) in row.iter_mut().zip(&bv[p * c..(p + 1) * c]) {
                            *o += aip * bv;
                        }
                    }
                }
                Tensor {
                    shape: vec![r, c],
                    data: out,
                }
            }
            (&[r, k], &[k2]) if k == k2 => {
                let out = (0..r).map(|i| dot(&av[i * k..(i + 1) * k], bv)).collect();
                Tensor {
                    shape: vec![r],
                    data: out,
                }
            }
            (&[k], &[k2, c]) if k == k2 => {
                let mut out = vec![0.0; c];
                for p in 0..k {
                    let ap = av[p];
                    for (o, &bv) in out.iter_mut().zip(&bv[p * c..(p + 1) * c]) {
                        *o += ap * bv;
                    }
                }
                Tensor {
                    shape: vec![c],
                    data: out,
                }
            }
            _ => return Err(mismatch()),
        };
        self.emit("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// Elementwise sum; `b` may also be a row vector broadcast over a matrix `a`.
    pub fn add(&mut self, a: Var, b: Var) -> NResult<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let av = &self.nodes[a.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let data: Vec<f64> = if sa == sb {
            av.iter().zip(bv).map(|(x, y)| x + y).collect()
        } else if sa.len() == 2 && sb.len() == 1 && sa[1] == sb[0] {
            av.iter()
                .enumerate()
                .map(|(i, x)| x + bv[i % sb[0]])
                .collect()
        } else {
            return Err(NumericsError::ShapeMismatch {
                op: "add",
                lhs: sa,
                rhs: sb,
            });
        };
        self.emit("add", Tensor { shape: sa, data }, Op::Add(a, b), &[a, b])
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> NResult<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(NumericsError::ShapeMismatch {
                op: "mul",
                lhs: sa,
                rhs: sb,
            });
        }
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x * y)
            .collect();
        self.emit("mul", Tensor { shape: sa, data }, Op::Mul(a, b), &[a, b])
    }

    /// Multiplies every element of `a` by the single value of `s` (`[1]`).
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> NResult<Var> {
        if self.shape(s) != [1] {
            return Err(NumericsError::UnsupportedShape {
                op: "mul_scalar",
                shape: self.shape(s).to_vec(),
            });
        }
        let k = self.nodes[s.0].value.data[0];
        let value = Tensor {
            shape: self.shape(a).to_vec(),
            data: self.nodes[a.0].value.data.iter().map(|x| x * k).collect(),
        };
        self.emit("mul_scalar", value, Op::MulScalar(a, s), &[a, s])
    }

    /// Concatenation along the last axis. All parts must be vectors, or
    /// matrices with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> NResult<Var> {
        if parts.is_empty() {
            return Err(NumericsError::InvalidArgument("concat of nothing".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        let value = match first.len() {
            1 => {
                let mut data = Vec::new();
                for &p in parts {
                    let s = self.shape(p);
                    if s.len() != 1 {
                        return Err(NumericsError::ShapeMismatch {
                            op: "concat",
                            lhs: first,
                            rhs: s.to_vec(),
                        });
                    }
                    data.extend_from_slice(&self.nodes[p.0].value.data);
                }
                Tensor {
                    shape: vec![data.len()],
                    data,
                }
            }
            2 => {
                let rows = first[0];
                let mut cols = Vec::with_capacity(parts.len());
                for &p in parts {
                    let s = self.shape(p);
                    if s.len() != 2 || s[0] != rows {
                        return Err(NumericsError::ShapeMismatch {
                            op: "concat",
                            lhs: first,
                            rhs: s.to_vec(),
                        });
                    }
                    cols.push(s[1]);
                }
                let total: usize = cols.iter().sum();
                let mut data = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for (&p, &c) in parts.iter().zip(&cols) {
                        data.extend_from_slice(&self.nodes[p.0].value.data[r * c..(r + 1) * c]);
                    }
                }
                Tensor {
                    shape: vec![rows, total],
                    data,
                }
            }
            _ => {
                return Err(NumericsError::UnsupportedShape {
                    op: "concat",
                    shape: first,
                })
            }
        };
        self.emit("concat", value, Op::Concat(parts.to_vec()), parts)
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> NResult<Var> {
        if rows.is_empty() {
            return Err(NumericsError::InvalidArgument("stack of nothing".into()));
        }
        let first = self.shape(rows[0]).to_vec();
        if first.len() != 1 {
            return Err(NumericsError::UnsupportedShape {
                op: "stack_rows",
                shape: first,
            });
        }
        let mut data = Vec::with_capacity(rows.len() * first[0]);
        for &r in rows {
            if self.shape(r) != first.as_slice() {
                return Err(NumericsError::ShapeMismatch {
                    op: "stack_rows",
                    lhs: first,
                    rhs: self.shape(r).to_vec(),
                });
            }
            data.extend_from_slice(&self.nodes[r.0].value.data);
        }
        let value = Tensor {
            shape: vec![rows.len(), first[0]],
            data,
        };
        self.emit("stack_rows", value, Op::StackRows(rows.to_vec()), rows)
    }

    /// `a[start..start + len]` of a vector.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> NResult<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 1 || len == 0 || start + len > s[0] {
            return Err(NumericsError::InvalidArgument(format!(
                "slice {start}..{} of shape {s:?}",
                start + len
            )));
        }
        let value = Tensor::vector(self.nodes[a.0].value.data[start..start + len].to_vec());
        self.emit("slice", value, Op::Slice(a, start), &[a])
    }

    /// Inner product of two equal-length vectors, as a `[1]` tensor.
    pub fn dot(&mut self, a: Var, b: Var) -> NResult<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 1 || sa != sb {
            return Err(NumericsError::ShapeMismatch {
                op: "dot",
                lhs: sa,
                rhs: sb,
            });
        }
        let v = dot(&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
        self.emit("dot", Tensor::scalar(v), Op::Dot(a, b), &[a, b])
    }

    fn unary(
        &mut self,
        name: &'static str,
        a: Var,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> NResult<Var> {
        let value = Tensor {
            shape: self.shape(a).to_vec(),
            data: self.nodes[a.0].value.data.iter().map(|&x| f(x)).collect(),
        };
        self.emit(name, value, op, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> NResult<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> NResult<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn cos(&mut self, a: Var) -> NResult<Var> {
        self.unary("cos", a, f64::cos, Op::Cos(a))
    }

    pub fn sin(&mut self, a: Var) -> NResult<Var> {
        self.unary("sin", a, f64::sin, Op::Sin(a))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> NResult<Var> {
        self.unary("scale", a, |x| k * x, Op::Scale(a, k))
    }

    /// Softmax along `axis` (0 for vectors; 0 or 1 for matrices), with
    /// max-subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> NResult<Var> {
        let shape = self.shape(a).to_vec();
        check_axis(&shape, axis, "softmax")?;
        let src = &self.nodes[a.0].value.data;
        let mut data = vec![0.0; src.len()];
        for lane in lanes(&shape, axis) {
            let m = lane
                .iter()
                .map(|&i| src[i])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for &i in &lane {
                let e = (src[i] - m).exp();
                data[i] = e;
                z += e;
            }
            for &i in &lane {
                data[i] /= z;
            }
        }
        self.emit(
            "softmax",
            Tensor { shape, data },
            Op::Softmax(a, axis),
            &[a],
        )
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> NResult<Var> {
        let v = self.nodes[a.0].value.data.iter().sum();
        self.emit("sum", Tensor::scalar(v), Op::Sum(a), &[a])
    }

    /// Weighted binary cross-entropy of a `[1]` probability:
    /// `-(w*y*ln p + (1-y)*ln(1-p))`, with `p` clamped to
    /// `[PROB_CLAMP, 1 - PROB_CLAMP]`.
    pub fn weighted_bce(&mut self, prob: Var, target: f64, weight_pos: f64) -> NResult<Var> {
        if self.shape(prob) != [1] {
            return Err(NumericsError::UnsupportedShape {
                op: "weighted_bce",
                shape: self.shape(prob).to_vec(),
            });
        }
        let p = self.nodes[prob.0].value.data[0];
        let v = weighted_bce(p, target, weight_pos);
        self.emit(
            "weighted_bce",
            Tensor::scalar(v),
            Op::WeightedBce {
                prob,
                target,
                weight_pos,
            },
            &[prob],
        )
    }

    /// Gradients of the single-element `output` with respect to every node
    /// that requires one.
    pub fn backward(&self, output: Var) -> NResult<Gradients> {
        if self.nodes[output.0].value.len() != 1 {
            return Err(NumericsError::UnsupportedShape {
                op: "backward",
                shape: self.shape(output).to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value.data;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let av = &self.value(*a).data;
                let bv = &self.value(*b).data;
                match (sa, sb) {
                    (&[r, k], &[_, c]) => {
                        if let Some(ga) = self.slot(*a, grads) {
                            for i in 0..r {
                                let gi = &g[i * c..(i + 1) * c];
                                for p in 0..k {
                                    ga[i * k + p] += dot(gi, &bv[p * c..(p + 1) * c]);
                                }
                            }
                        }
                        if let Some(gb) = self.slot(*b, grads) {
                            for i in 0..r {
                                let gi = &g[i * c..(i + 1) * c];
                                for p in 0..k {
                                    let aip = av[i * k + p];
                                    for (d, &gv) in gb[p * c..(p + 1) * c].iter_mut().zip(gi) {
                                        *d += aip * gv;
                                    }
                                }
                            }
                        }
                    }
                    (&[r, k], &[_]) => {
                        if let Some(ga) = self.slot(*a, grads) {
                            for i in 0..r {
                                let gi = g[i];
                                for (d, &x) in ga[i * k..(i + 1) * k].iter_mut().zip(bv) {
                                    *d += gi * x;
                                }
                            }
                        }
                        if let Some(gb) = self.slot(*b, grads) {
                            for i in 0..r {
                                let gi = g[i];
                                for (d, &w) in gb.iter_mut().zip(&av[i * k..(i + 1) * k]) {
                                    *d += gi * w;
                                }
                            }
                        }
                    }
                    (&[k], &[_, c]) => {
                        if let Some(ga) = self.slot(*a, grads) {
                            for p in 0..k {
                                ga[p] += dot(g, &bv[p * c..(p + 1) * c]);
                            }
                        }
                        if let Some(gb) = self.slot(*b, grads) {
                            for p in 0..k {
                                let ap = av[p];
                                for (d, &gv) in gb[p * c..(p + 1) * c].iter_mut().zip(g) {
                                    *d += ap * gv;
                                }
                            }
                        }
                    }
                    _ => unreachable!("matmul shapes validated on forward"),
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(*a, grads) {
                    axpy(ga, g, 1.0);
                }
                let nb = self.value(*b).len();
                if let Some(gb) = self.slot(*b, grads) {
                    if nb == g.len() {
                        axpy(gb, g, 1.0);
                    } else {
                        for (i, &gv) in g.iter().enumerate() {
                            gb[i % nb] += gv;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = &self.value(*a).data;
                let bv = &self.value(*b).data;
                if let Some(ga) = self.slot(*a, grads) {
                    for ((d, &gv), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *d += gv * y;
                    }
                }
                if let Some(gb) = self.slot(*b, grads) {
                    for ((d, &gv), &x) in gb.iter_mut().zip(g).zip(av) {
                        *d += gv * x;
                    }
                }
            }
            Op::MulScalar(a, s) => {
                let k = self.value(*s).data[0];
                let av = &self.value(*a).data;
                if let Some(ga) = self.slot(*a, grads) {
                    axpy(ga, g, k);
                }
                if let Some(gs) = self.slot(*s, grads) {
                    gs[0] += dot(g, av);
                }
            }
            Op::Concat(parts) => {
                let shape = &node.value.shape;
                if shape.len() == 1 {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        if let Some(gp) = self.slot(p, grads) {
                            axpy(gp, &g[off..off + n], 1.0);
                        }
                        off += n;
                    }
                } else {
                    let (rows, total) = (shape[0], shape[1]);
                    let mut col_off = 0;
                    for &p in parts {
                        let c = self.shape(p)[1];
                        if let Some(gp) = self.slot(p, grads) {
                            for r in 0..rows {
                                let src = &g[r * total + col_off..r * total + col_off + c];
                                axpy(&mut gp[r * c..(r + 1) * c], src, 1.0);
                            }
                        }
                        col_off += c;
                    }
                }
            }
            Op::StackRows(rows) => {
                let c = node.value.shape[1];
                for (i, &r) in rows.iter().enumerate() {
                    if let Some(gr) = self.slot(r, grads) {
                        axpy(gr, &g[i * c..(i + 1) * c], 1.0);
                    }
                }
            }
            Op::Slice(a, start) => {
                if let Some(ga) = self.slot(*a, grads) {
                    axpy(&mut ga[*start..*start + g.len()], g, 1.0);
                }
            }
            Op::Dot(a, b) => {
                let av = &self.value(*a).data;
                let bv = &self.value(*b).data;
                if let Some(ga) = self.slot(*a, grads) {
                    axpy(ga, bv, g[0]);
                }
                if let Some(gb) = self.slot(*b, grads) {
                    axpy(gb, av, g[0]);
                }
            }
            Op::Tanh(a) => self.elementwise(*a, g, grads, |i| 1.0 - out[i] * out[i]),
            Op::Sigmoid(a) => self.elementwise(*a, g, grads, |i| out[i] * (1.0 - out[i])),
            Op::Cos(a) => {
                let x = &self.value(*a).data;
                self.elementwise(*a, g, grads, |i| -x[i].sin())
            }
            Op::Sin(a) => {
                let x = &self.value(*a).data;
                self.elementwise(*a, g, grads, |i| x[i].cos())
            }
            Op::Scale(a, k) => {
                if let Some(ga) = self.slot(*a, grads) {
                    axpy(ga, g, *k);
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(*a, grads) {
                    for d in ga.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Softmax(a, axis) => {
                let shape = &node.value.shape;
                let mut local = vec![0.0; out.len()];
                for lane in lanes(shape, *axis) {
                    let s: f64 = lane.iter().map(|&i| g[i] * out[i]).sum();
                    for &i in &lane {
                        local[i] = out[i] * (g[i] - s);
                    }
                }
                if let Some(ga) = self.slot(*a, grads) {
                    axpy(ga, &local, 1.0);
                }
            }
            Op::WeightedBce {
                prob,
                target,
                weight_pos,
            } => {
                let p = self.value(*prob).data[0].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                let d = -weight_pos * target / p + (1.0 - target) / (1.0 - p);
                if let Some(gp) = self.slot(*prob, grads) {
                    gp[0] += g[0] * d;
                }
            }
        }
    }

    fn elementwise(
        &self,
        a: Var,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        deriv: impl Fn(usize) -> f64,
    ) {
        if let Some(ga) = self.slot(a, grads) {
            for (i, (d, &gv)) in ga.iter_mut().zip(g).enumerate() {
                *d += gv * deriv(i);
            }
        }
    }

    fn slot<'g>(&self, v: Var, grads: &'g mut [Option<Vec<f64>>]) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }
}

/// Accumulated gradients from one [`Tape::backward`] call.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when `v` does not influence the output or never required a gradient.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zero-filled when `v` did not receive one.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; len])
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(dst: &mut [f64], src: &[f64], k: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

pub fn weighted_bce(p: f64, target: f64, weight_pos: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(weight_pos * target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

fn check_axis(shape: &[usize], axis: usize, op: &'static str) -> NResult<()> {
    match (shape.len(), axis) {
        (1, 0) | (2, 0) | (2, 1) => Ok(()),
        _ => Err(NumericsError::UnsupportedShape {
            op,
            shape: shape.to_vec(),
        }),
    }
}

/// Flat index groups reduced together by an axis-wise op.
fn lanes(shape: &[usize], axis: usize) -> Vec<Vec<usize>> {
    match (shape.len(), axis) {
        (1, _) => vec![(0..shape[0]).collect()],
        (_, 1) => (0..shape[0])
            .map(|r| (r * shape[1]..(r + 1) * shape[1]).collect())
            .collect(),
        _ => (0..shape[1])
            .map(|c| (0..shape[0]).map(|r| r * shape[1] + c).collect())
            .collect(),
    }
}

/// Tape gradients next to their central-difference estimates, one vector
/// per input tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradComparison {
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

impl GradComparison {
    fn pairs(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.analytic
            .iter()
            .flatten()
            .copied()
            .zip(self.numeric.iter().flatten().copied())
    }

    /// Maximum of `|analytic - fd| / max(|analytic|, |fd|, 1e-8)`.
    pub fn max_rel_error(&self) -> f64 {
        self.pairs()
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    /// Every component satisfies `|analytic - fd| ≤ abs + rel · max(|analytic|, |fd|)`.
    /// The absolute term absorbs the round-off floor of the difference
    /// quotient, roughly `|f| · 1e-16 / eps`.
    pub fn within(&self, rel: f64, abs: f64) -> bool {
        self.pairs()
            .all(|(a, n)| (a - n).abs() <= abs + rel * a.abs().max(n.abs()))
    }
}

/// Evaluates `f` and its tape gradient, then perturbs every input component
/// by `±eps`. `f` builds a scalar on a fresh tape from leaves holding the
/// supplied tensors.
pub fn grad_compare<F>(mut f: F, inputs: &[Tensor], eps: f64) -> NResult<GradComparison>
where
    F: FnMut(&mut Tape, &[Var]) -> NResult<Var>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(NumericsError::InvalidArgument(
            "epsilon must be positive".into(),
        ));
    }
    let mut eval = |tensors: &[Tensor], with_grad: bool| -> NResult<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).item();
        if !v.is_finite() {
            return Err(NumericsError::NonFinite { op: "grad_check" });
        }
        if !with_grad {
            return Ok((v, Vec::new()));
        }
        let g = tape.backward(out)?;
        let grads = vars
            .iter()
            .zip(tensors)
            .map(|(&var, t)| g.get_or_zeros(var, t.len()))
            .collect();
        Ok((v, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut fd = Vec::with_capacity(inputs[t].len());
        for k in 0..inputs[t].len() {
            let orig = work[t].data[k];
            work[t].data[k] = orig + eps;
            let (plus, _) = eval(&work, false)?;
            work[t].data[k] = orig - eps;
            let (minus, _) = eval(&work, false)?;
            work[t].data[k] = orig;
            fd.push((plus - minus) / (2.0 * eps));
        }
        numeric.push(fd);
    }
    Ok(GradComparison { analytic, numeric })
}

/// Central-difference gradient check over several input tensors: the
/// maximum over every component of `|analytic - fd| / max(|analytic|, |fd|, 1e-8)`.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> NResult<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> NResult<Var>,
{
    Ok(grad_compare(f, inputs, eps)?.max_rel_error())
}

/// Single-tensor form of [`grad_check_many`].
pub fn grad_check<F>(mut f: F, theta: &Tensor, eps: f64) -> NResult<f64>
where
    F: FnMut(&mut Tape, Var) -> NResult<Var>,
{
    grad_check_many(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(theta),
        eps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let s = tape.softmax(a, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

        let b = tape.constant(Tensor::vector(vec![0.0, 2f64.ln()]));
        let s = tape.softmax(b, 0).unwrap();
        let v = tape.value(s).data();
        assert!((v[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((v[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn tanh_derivative_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = tape.tanh(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0]);
    }

    #[test]
    fn grad_check_square() {
        let err = grad_check(|t, x| t.mul(x, x), &Tensor::scalar(3.0), 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn grad_check_sigmoid_matvec() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = random(&mut rng, &[4, 4]);
        let x = random(&mut rng, &[4]);
        let err = grad_check_many(
            |t, v| {
                let z = t.matmul(v[0], v[1])?;
                let s = t.sigmoid(z)?;
                t.sum(s)
            },
            &[w, x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn shared_input_accumulates_two_paths() {
        // f(x) = x*x + 3x  =>  f'(x) = 2x + 3
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.5));
        let sq = tape.mul(x, x).unwrap();
        let lin = tape.scale(x, 3.0).unwrap();
        let f = tape.add(sq, lin).unwrap();
        let g = tape.backward(f).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0 * 1.5 + 3.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let x = tape.leaf(Tensor::vector(vec![0.5, -0.5]));
        let d = tape.dot(c, x).unwrap();
        let g = tape.backward(d).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(matches!(
            tape.add(a, b),
            Err(NumericsError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            tape.mul(a, b),
            Err(NumericsError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            tape.dot(a, b),
            Err(NumericsError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            tape.matmul(a, b),
            Err(NumericsError::ShapeMismatch { .. })
        ));
        assert!(tape.slice(a, 1, 2).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(1e308));
        assert!(matches!(
            tape.scale(a, 10.0),
            Err(NumericsError::NonFinite { op: "scale" })
        ));
    }

    #[test]
    fn matrix_softmax_both_axes() {
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 4.0]).unwrap());
        for axis in 0..2 {
            let s = tape.softmax(m, axis).unwrap();
            let v = tape.value(s).data().to_vec();
            for lane in lanes(&[2, 3], axis) {
                let total: f64 = lane.iter().map(|&i| v[i]).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    type Builder = fn(&mut Tape, &[Var]) -> NResult<Var>;

    /// Every differentiable op, each reduced to a scalar through a fixed
    /// random projection so that gradients are not trivially uniform.
    fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Builder)> {
        vec![
            (
                "matmul_mm",
                vec![vec![3, 4], vec![4, 2], vec![3, 2]],
                |t, v| {
                    let m = t.matmul(v[0], v[1])?;
                    let p = t.mul(m, v[2])?;
                    t.sum(p)
                },
            ),
            ("matmul_mv", vec![vec![3, 4], vec![4], vec![3]], |t, v| {
                let m = t.matmul(v[0], v[1])?;
                t.dot(m, v[2])
            }),
            ("matmul_vm", vec![vec![3], vec![3, 5], vec![5]], |t, v| {
                let m = t.matmul(v[0], v[1])?;
                t.dot(m, v[2])
            }),
            (
                "add_broadcast",
                vec![vec![2, 3], vec![3], vec![2, 3]],
                |t, v| {
                    let s = t.add(v[0], v[1])?;
                    let p = t.mul(s, v[2])?;
                    t.sum(p)
                },
            ),
            ("mul_scalar", vec![vec![4], vec![1], vec![4]], |t, v| {
                let s = t.mul_scalar(v[0], v[1])?;
                t.dot(s, v[2])
            }),
            ("concat_vec", vec![vec![2], vec![3], vec![5]], |t, v| {
                let c = t.concat(&[v[0], v[1]])?;
                t.dot(c, v[2])
            }),
            (
                "concat_mat",
                vec![vec![2, 2], vec![2, 1], vec![2, 3]],
                |t, v| {
                    let c = t.concat(&[v[0], v[1]])?;
                    let p = t.mul(c, v[2])?;
                    t.sum(p)
                },
            ),
            ("stack_slice", vec![vec![3], vec![3], vec![4]], |t, v| {
                let s = t.stack_rows(&[v[0], v[1]])?;
                let f = t.matmul(s, v[0])?;
                let c = t.concat(&[f, v[1]])?;
                let sl = t.slice(c, 1, 4)?;
                t.dot(sl, v[2])
            }),
            ("tanh_sigmoid", vec![vec![5], vec![5]], |t, v| {
                let a = t.tanh(v[0])?;
                let b = t.sigmoid(v[0])?;
                let p = t.mul(a, b)?;
                t.dot(p, v[1])
            }),
            ("cos_sin_scale", vec![vec![4], vec![4]], |t, v| {
                let a = t.cos(v[0])?;
                let b = t.sin(v[0])?;
                let c = t.scale(b, -0.7)?;
                let s = t.add(a, c)?;
                t.dot(s, v[1])
            }),
            ("softmax_vec", vec![vec![5], vec![5]], |t, v| {
                let s = t.softmax(v[0], 0)?;
                t.dot(s, v[1])
            }),
            ("softmax_rows", vec![vec![3, 4], vec![3, 4]], |t, v| {
                let s = t.softmax(v[0], 1)?;
                let p = t.mul(s, v[1])?;
                t.sum(p)
            }),
            ("softmax_cols", vec![vec![3, 4], vec![3, 4]], |t, v| {
                let s = t.softmax(v[0], 0)?;
                let p = t.mul(s, v[1])?;
                t.sum(p)
            }),
            ("weighted_bce", vec![vec![3], vec![3]], |t, v| {
                let z = t.dot(v[0], v[1])?;
                let p = t.sigmoid(z)?;
                let l1 = t.weighted_bce(p, 1.0, 2.5)?;
                let l0 = t.weighted_bce(p, 0.0, 2.5)?;
                t.add(l1, l0)
            }),
        ]
    }

    #[test]
    fn every_op_passes_grad_check_over_100_seeds() {
        for (name, shapes, build) in op_cases() {
            for seed in 0..100u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let inputs: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s)).collect();
                let err = grad_check_many(build, &inputs, 1e-5).unwrap();
                assert!(err < 1e-6, "{name} seed {seed}: {err}");
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn softmax_is_a_distribution(xs in proptest::collection::vec(-50.0f64..50.0, 1..20)) {
            let mut tape = Tape::new();
            let a = tape.constant(Tensor::vector(xs));
            let s = tape.softmax(a, 0).unwrap();
            let v = tape.value(s).data();
            proptest::prop_assert!(v.iter().all(|&p| p > 0.0));
            proptest::prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
