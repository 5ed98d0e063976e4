//! Dense `f64` tensors and a define-by-run reverse-mode autodiff graph.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in order.
//! [`Graph::backward`] walks that record once in reverse, so the recording
//! order doubles as the topological order. Leaves created with
//! [`Graph::param`] accumulate gradients across repeated backward calls;
//! leaves created with [`Graph::constant`] never receive one.
//!
//! Layout is row-major throughout. A sequence of `n` token vectors of width
//! `d` is a `[n, d]` tensor (one row per position).
//!
//! ```
//! use attnlink::tensor::{Graph, Tensor};
//!
//! let g = Graph::new();
//! let x = g.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
//! let loss = x.mul(x).unwrap().sum();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};

/// Epsilon added to the variance inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid(format!("zero-length axis in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&s| s > 0), "zero-length axis in {shape:?}");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a 2-D tensor from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::invalid("ragged rows"));
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    /// Uniform samples in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.random_range(-bound..=bound))
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of range for axis {i} of {:?}", self.shape);
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    /// Rows of a 2-D tensor (or the trailing two axes flattened).
    pub fn row(&self, r: usize) -> &[f64] {
        let c = *self.shape.last().unwrap();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn transpose(&self) -> Result<Self> {
        let [r, c] = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(vec![c, r], out)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn dims2(&self, op: &'static str) -> Result<[usize; 2]> {
        match self.shape[..] {
            [r, c] => Ok([r, c]),
            _ => Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            }),
        }
    }
}

/// `c (+)= op(a) * op(b)` where `a` is `m×k` (stored `k×m` when `ta`) and
/// `b` is `k×n` (stored `n×k` when `tb`).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover exactly the strided extents computed above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    AddScaled(usize, usize, f64),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Reshape(usize),
    SwapAxes12 {
        a: usize,
        dims: [usize; 4],
    },
    Relu(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    Sum(usize),
    Xent {
        logits: usize,
        probs: Vec<f64>,
        targets: Vec<usize>,
        pad_id: usize,
        smoothing: f64,
        count: usize,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// A recorded computation. Not `Sync`: a graph lives on one thread.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            grad: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Accumulated gradient of a parameter leaf, if backward has reached it.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        self.nodes.borrow()[v.id].grad.clone()
    }

    pub fn zero_grads(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Propagates `d loss / d node` to every reachable parameter leaf,
    /// adding into whatever those leaves already hold.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id].value;
        if root.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        let mut leaf_grads: Vec<(usize, Vec<f64>)> = Vec::new();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            backprop_node(&nodes, id, &node.op, g, &mut grads, &mut leaf_grads);
        }
        drop(nodes);

        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in leaf_grads {
            let node = &mut nodes[id];
            match &mut node.grad {
                Some(acc) => {
                    for (a, b) in acc.data.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                None => {
                    node.grad = Some(Tensor {
                        shape: node.value.shape.clone(),
                        data: g,
                    })
                }
            }
        }
        Ok(())
    }
}

fn accumulate<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: usize,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn backprop_node(
    nodes: &[Node],
    id: usize,
    op: &Op,
    g: Vec<f64>,
    grads: &mut [Option<Vec<f64>>],
    leaf_grads: &mut Vec<(usize, Vec<f64>)>,
) {
    let out = &nodes[id].value;
    match *op {
        Op::Leaf => leaf_grads.push((id, g)),
        Op::Add(a, b) => {
            for p in [a, b] {
                if let Some(acc) = accumulate(grads, nodes, p) {
                    acc.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::AddScaled(a, b, lambda) => {
            if let Some(acc) = accumulate(grads, nodes, a) {
                acc.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
            }
            if let Some(acc) = accumulate(grads, nodes, b) {
                acc.iter_mut().zip(&g).for_each(|(x, y)| *x += lambda * y);
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (Rc::clone(&nodes[a].value), Rc::clone(&nodes[b].value));
            if let Some(acc) = accumulate(grads, nodes, a) {
                for ((x, y), w) in acc.iter_mut().zip(&g).zip(&vb.data) {
                    *x += y * w;
                }
            }
            if let Some(acc) = accumulate(grads, nodes, b) {
                for ((x, y), w) in acc.iter_mut().zip(&g).zip(&va.data) {
                    *x += y * w;
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(acc) = accumulate(grads, nodes, a) {
                acc.iter_mut().zip(&g).for_each(|(x, y)| *x += c * y);
            }
        }
        Op::AddRow(a, bias) => {
            if let Some(acc) = accumulate(grads, nodes, a) {
                acc.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
            }
            if let Some(acc) = accumulate(grads, nodes, bias) {
                let n = acc.len();
                for row in g.chunks(n) {
                    acc.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::MatMul {
            a,
            b,
            ta,
            tb,
            batch,
            m,
            k,
            n,
        } => {
            let (va, vb) = (Rc::clone(&nodes[a].value), Rc::clone(&nodes[b].value));
            if let Some(acc) = accumulate(grads, nodes, a) {
                for bi in 0..batch {
                    let dc = &g[bi * m * n..(bi + 1) * m * n];
                    let bb = &vb.data[bi * k * n..(bi + 1) * k * n];
                    let da = &mut acc[bi * m * k..(bi + 1) * m * k];
                    if ta {
                        gemm(k, n, m, bb, tb, dc, true, da, 1.0);
                    } else {
                        gemm(m, n, k, dc, false, bb, !tb, da, 1.0);
                    }
                }
            }
            if let Some(acc) = accumulate(grads, nodes, b) {
                for bi in 0..batch {
                    let dc = &g[bi * m * n..(bi + 1) * m * n];
                    let aa = &va.data[bi * m * k..(bi + 1) * m * k];
                    let db = &mut acc[bi * k * n..(bi + 1) * k * n];
                    if tb {
                        gemm(n, m, k, dc, true, aa, ta, db, 1.0);
                    } else {
                        gemm(k, m, n, aa, !ta, dc, false, db, 1.0);
                    }
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(acc) = accumulate(grads, nodes, a) {
                acc.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
            }
        }
        Op::SwapAxes12 { a, dims } => {
            if let Some(acc) = accumulate(grads, nodes, a) {
                // g has the swapped layout [d0, d2, d1, d3]
                let [d0, d1, d2, d3] = dims;
                for i0 in 0..d0 {
                    for i1 in 0..d1 {
                        for i2 in 0..d2 {
                            let src = ((i0 * d2 + i2) * d1 + i1) * d3;
                            let dst = ((i0 * d1 + i1) * d2 + i2) * d3;
                            for i3 in 0..d3 {
                                acc[dst + i3] += g[src + i3];
                            }
                        }
                    }
                }
            }
        }
        Op::Relu(a) => {
            if let Some(acc) = accumulate(grads, nodes, a) {
                for ((x, y), o) in acc.iter_mut().zip(&g).zip(&out.data) {
                    if *o > 0.0 {
                        *x += y;
                    }
                }
            }
        }
        Op::Softmax(a) => {
            if let Some(acc) = accumulate(grads, nodes, a) {
                let c = *out.shape.last().unwrap();
                for ((dx, dy), y) in acc.chunks_mut(c).zip(g.chunks(c)).zip(out.data.chunks(c)) {
                    let dot: f64 = dy.iter().zip(y).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        dx[j] += y[j] * (dy[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            ref xhat,
            ref inv_std,
        } => {
            let vg = Rc::clone(&nodes[gain].value);
            let d = vg.len();
            if let Some(acc) = accumulate(grads, nodes, gain) {
                for (dy, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        acc[j] += dy[j] * xh[j];
                    }
                }
            }
            if let Some(acc) = accumulate(grads, nodes, bias) {
                for dy in g.chunks(d) {
                    acc.iter_mut().zip(dy).for_each(|(a, b)| *a += b);
                }
            }
            if let Some(acc) = accumulate(grads, nodes, x) {
                let inv_d = 1.0 / d as f64;
                for (r, ((dx, dy), xh)) in acc
                    .chunks_mut(d)
                    .zip(g.chunks(d))
                    .zip(xhat.chunks(d))
                    .enumerate()
                {
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..d {
                        let dxh = dy[j] * vg.data[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[j];
                    }
                    mean_dxh *= inv_d;
                    mean_dxh_xh *= inv_d;
                    for j in 0..d {
                        let dxh = dy[j] * vg.data[j];
                        dx[j] += inv_std[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
            }
        }
        Op::Gather { table, ref ids } => {
            if let Some(acc) = accumulate(grads, nodes, table) {
                let d = *nodes[table].value.shape.last().unwrap();
                for (row, &i) in g.chunks(d).zip(ids) {
                    acc[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::Sum(a) => {
            if let Some(acc) = accumulate(grads, nodes, a) {
                acc.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        Op::Xent {
            logits,
            ref probs,
            ref targets,
            pad_id,
            smoothing,
            count,
        } => {
            if let Some(acc) = accumulate(grads, nodes, logits) {
                let v = *nodes[logits].value.shape.last().unwrap();
                let off = smoothing / (v - 1) as f64;
                let scale = g[0] / count as f64;
                for (r, &t) in targets.iter().enumerate() {
                    if t == pad_id {
                        continue;
                    }
                    let row = &mut acc[r * v..(r + 1) * v];
                    let p = &probs[r * v..(r + 1) * v];
                    for j in 0..v {
                        let q = if j == t { 1.0 - smoothing } else { off };
                        row[j] += scale * (p[j] - q);
                    }
                }
            }
        }
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape.clone()
    }

    fn same_graph(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "vars from different graphs"
        );
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'g> {
        let rg = self.graph.requires(self.id);
        self.graph.push(value, op, rg)
    }

    fn binary(&self, other: &Var<'g>, value: Tensor, op: Op) -> Var<'g> {
        self.same_graph(other);
        let rg = self.graph.requires(self.id) || self.graph.requires(other.id);
        self.graph.push(value, op, rg)
    }

    fn check_same_shape(&self, other: &Var<'g>, op: &'static str) -> Result<(Rc<Tensor>, Rc<Tensor>)> {
        let (a, b) = (self.value(), other.value());
        if a.shape != b.shape {
            return Err(Error::Shape {
                op,
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        Ok((a, b))
    }

    pub fn add(&self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = self.check_same_shape(&other, "add")?;
        let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
        let value = Tensor {
            shape: a.shape.clone(),
            data,
        };
        Ok(self.binary(&other, value, Op::Add(self.id, other.id)))
    }

    /// `self + lambda * other`.
    pub fn add_scaled(&self, other: Var<'g>, lambda: f64) -> Result<Var<'g>> {
        let (a, b) = self.check_same_shape(&other, "add_scaled")?;
        let data = a.data.iter().zip(&b.data).map(|(x, y)| x + lambda * y).collect();
        let value = Tensor {
            shape: a.shape.clone(),
            data,
        };
        Ok(self.binary(&other, value, Op::AddScaled(self.id, other.id, lambda)))
    }

    /// Elementwise product.
    pub fn mul(&self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = self.check_same_shape(&other, "mul")?;
        let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
        let value = Tensor {
            shape: a.shape.clone(),
            data,
        };
        Ok(self.binary(&other, value, Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, c: f64) -> Var<'g> {
        let a = self.value();
        let value = Tensor {
            shape: a.shape.clone(),
            data: a.data.iter().map(|x| c * x).collect(),
        };
        self.unary(value, Op::Scale(self.id, c))
    }

    /// Adds a length-`n` vector to every row of a `[.., n]` tensor.
    pub fn add_row(&self, bias: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), bias.value());
        let n = *a.shape.last().unwrap();
        if b.shape != [n] {
            return Err(Error::Shape {
                op: "add_row",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let mut data = a.data.clone();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
        }
        let value = Tensor {
            shape: a.shape.clone(),
            data,
        };
        Ok(self.binary(&bias, value, Op::AddRow(self.id, bias.id)))
    }

    /// Matrix product `self · other` over the trailing two axes.
    pub fn matmul(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.matmul_ex(other, false, false)
    }

    /// `self · otherᵀ` over the trailing two axes.
    pub fn matmul_t(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.matmul_ex(other, false, true)
    }

    /// Matrix product with optional transposition of either operand's
    /// trailing two axes. Leading (batch) axes must agree exactly.
    pub fn matmul_ex(&self, other: Var<'g>, ta: bool, tb: bool) -> Result<Var<'g>> {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        let mismatch = || Error::Shape {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        };
        let (ra, rb) = (a.shape.len(), b.shape.len());
        if ra < 2 || ra != rb || a.shape[..ra - 2] != b.shape[..rb - 2] {
            return Err(mismatch());
        }
        let (a0, a1) = (a.shape[ra - 2], a.shape[ra - 1]);
        let (b0, b1) = (b.shape[rb - 2], b.shape[rb - 1]);
        let (m, k) = if ta { (a1, a0) } else { (a0, a1) };
        let (k2, n) = if tb { (b1, b0) } else { (b0, b1) };
        if k != k2 {
            return Err(mismatch());
        }
        let batch: usize = a.shape[..ra - 2].iter().product();
        let mut data = vec![0.0; batch * m * n];
        for bi in 0..batch {
            gemm(
                m,
                k,
                n,
                &a.data[bi * m * k..(bi + 1) * m * k],
                ta,
                &b.data[bi * k * n..(bi + 1) * k * n],
                tb,
                &mut data[bi * m * n..(bi + 1) * m * n],
                0.0,
            );
        }
        let mut shape = a.shape[..ra - 2].to_vec();
        shape.extend([m, n]);
        let value = Tensor { shape, data };
        Ok(self.binary(
            &other,
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
                ta,
                tb,
                batch,
                m,
                k,
                n,
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        let value = Tensor::new(shape.to_vec(), a.data.clone()).map_err(|_| Error::Shape {
            op: "reshape",
            lhs: a.shape.clone(),
            rhs: shape.to_vec(),
        })?;
        Ok(self.unary(value, Op::Reshape(self.id)))
    }

    /// `[d0, d1, d2, d3] -> [d0, d2, d1, d3]`.
    pub fn swap_axes12(&self) -> Result<Var<'g>> {
        let a = self.value();
        let dims: [usize; 4] = a.shape[..].try_into().map_err(|_| Error::Shape {
            op: "swap_axes12",
            lhs: a.shape.clone(),
            rhs: vec![],
        })?;
        let [d0, d1, d2, d3] = dims;
        let mut data = vec![0.0; a.len()];
        for i0 in 0..d0 {
            for i1 in 0..d1 {
                for i2 in 0..d2 {
                    let src = ((i0 * d1 + i1) * d2 + i2) * d3;
                    let dst = ((i0 * d2 + i2) * d1 + i1) * d3;
                    data[dst..dst + d3].copy_from_slice(&a.data[src..src + d3]);
                }
            }
        }
        let value = Tensor {
            shape: vec![d0, d2, d1, d3],
            data,
        };
        Ok(self.unary(value, Op::SwapAxes12 { a: self.id, dims }))
    }

    pub fn relu(&self) -> Var<'g> {
        let a = self.value();
        let value = Tensor {
            shape: a.shape.clone(),
            data: a.data.iter().map(|&x| x.max(0.0)).collect(),
        };
        self.unary(value, Op::Relu(self.id))
    }

    /// Softmax over the last axis. `allowed`, when given, has one flag per
    /// element; disallowed logits are treated as `-inf` and come out as
    /// exactly `0`. A row with nothing allowed is an error.
    pub fn softmax_rows(&self, allowed: Option<&[bool]>) -> Result<Var<'g>> {
        let a = self.value();
        if let Some(mask) = allowed {
            if mask.len() != a.len() {
                return Err(Error::Shape {
                    op: "softmax_rows mask",
                    lhs: a.shape.clone(),
                    rhs: vec![mask.len()],
                });
            }
        }
        let c = *a.shape.last().unwrap();
        let mut data = vec![0.0; a.len()];
        let mut scratch = vec![0.0; c];
        for (r, (x, y)) in a.data.chunks(c).zip(data.chunks_mut(c)).enumerate() {
            let row_mask = allowed.map(|m| &m[r * c..(r + 1) * c]);
            for j in 0..c {
                scratch[j] = match row_mask {
                    Some(m) if !m[j] => f64::NEG_INFINITY,
                    _ => x[j],
                };
            }
            if row_mask.is_some_and(|m| !m.contains(&true)) {
                return Err(Error::invalid(format!("softmax row {r} is fully masked")));
            }
            // non-finite logits give NaN here and surface as a non-finite loss
            let max = scratch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (scratch[j] - max).exp();
                y[j] = e;
                sum += e;
            }
            y.iter_mut().for_each(|v| *v /= sum);
        }
        let value = Tensor {
            shape: a.shape.clone(),
            data,
        };
        Ok(self.unary(value, Op::Softmax(self.id)))
    }

    /// Normalizes each last-axis vector to zero mean and unit variance
    /// (population variance, [`LAYER_NORM_EPS`] inside the square root),
    /// then applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: Var<'g>, bias: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&gain);
        self.same_graph(&bias);
        let (x, vg, vb) = (self.value(), gain.value(), bias.value());
        let d = *x.shape.last().unwrap();
        if d < 2 || vg.shape != [d] || vb.shape != [d] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: x.shape.clone(),
                rhs: vg.shape.clone(),
            });
        }
        let rows = x.len() / d;
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut data = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x.data[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                data[r * d + j] = h * vg.data[j] + vb.data[j];
            }
        }
        let value = Tensor {
            shape: x.shape.clone(),
            data,
        };
        let rg = [self.id, gain.id, bias.id]
            .iter()
            .any(|&i| self.graph.requires(i));
        Ok(self.graph.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Row lookup into a `[rows, d]` table; result is `[ids.len(), d]`.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Var<'g>> {
        let t = self.value();
        let [rows, d] = t.dims2("gather_rows")?;
        if ids.is_empty() {
            return Err(Error::invalid("gather_rows with no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!("id {bad} out of range for {rows} rows")));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&t.data[i * d..(i + 1) * d]);
        }
        let value = Tensor {
            shape: vec![ids.len(), d],
            data,
        };
        Ok(self.unary(
            value,
            Op::Gather {
                table: self.id,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn sum(&self) -> Var<'g> {
        let a = self.value();
        let value = Tensor::scalar(a.data.iter().sum());
        self.unary(value, Op::Sum(self.id))
    }

    /// Mean label-smoothed cross-entropy of `[n, V]` logits against `n`
    /// targets, skipping positions whose target is `pad_id`. The smoothed
    /// target puts `1 - smoothing` on the gold id and `smoothing / (V - 1)`
    /// on every other id.
    pub fn label_smoothed_xent(
        &self,
        targets: &[usize],
        pad_id: usize,
        smoothing: f64,
    ) -> Result<Var<'g>> {
        let a = self.value();
        let [n, v] = a.dims2("label_smoothed_xent")?;
        if targets.len() != n {
            return Err(Error::Shape {
                op: "label_smoothed_xent",
                lhs: a.shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        if v < 2 {
            return Err(Error::invalid("label smoothing needs at least 2 classes"));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::invalid(format!("smoothing {smoothing} not in [0, 1)")));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::invalid(format!("target {bad} out of range for {v} classes")));
        }
        let count = targets.iter().filter(|&&t| t != pad_id).count();
        if count == 0 {
            return Err(Error::invalid("every target position is padding"));
        }
        let off = smoothing / (v - 1) as f64;
        let mut probs = vec![0.0; n * v];
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t == pad_id {
                continue;
            }
            let x = &a.data[r * v..(r + 1) * v];
            let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + x.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            let p = &mut probs[r * v..(r + 1) * v];
            for j in 0..v {
                let logp = x[j] - lse;
                p[j] = logp.exp();
                let q = if j == t { 1.0 - smoothing } else { off };
                if q > 0.0 {
                    total -= q * logp;
                }
            }
        }
        let value = Tensor::scalar(total / count as f64);
        Ok(self.unary(
            value,
            Op::Xent {
                logits: self.id,
                probs,
                targets: targets.to_vec(),
                pad_id,
                smoothing,
                count,
            },
        ))
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// scales survivors by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&self, rate: f64, rng: &mut R) -> Result<Var<'g>> {
        if rate == 0.0 {
            return Ok(*self);
        }
        let shape = self.shape();
        let keep = 1.0 / (1.0 - rate);
        let mask = Tensor::from_fn(&shape, |_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        });
        self.mul(self.graph.constant(mask))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn tensor_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn identity_matmul() {
        let g = Graph::new();
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(i.matmul(m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn row_times_column() {
        let g = Graph::new();
        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
        assert_eq!(a.matmul(b).unwrap().value().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn transposed_variants_agree() {
        let g = Graph::new();
        let a = t(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 1.5, -1.0]);
        let b = t(&[3, 2], &[2.0, 1.0, 0.0, -1.0, 4.0, 0.25]);
        let plain = g.constant(a.clone()).matmul(g.constant(b.clone())).unwrap().value();
        let via_t = g
            .constant(a.transpose().unwrap())
            .matmul_ex(g.constant(b.transpose().unwrap()), true, true)
            .unwrap()
            .value();
        assert_eq!(plain.data(), via_t.data());
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let g = Graph::new();
        let s = g.constant(t(&[1, 3], &[0.0, 0.0, 0.0])).softmax_rows(None).unwrap();
        for v in s.value().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = g.constant(t(&[1, 2], &[1000.0, 0.0])).softmax_rows(None).unwrap();
        assert_eq!(s.value().data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_closed_form() {
        let g = Graph::new();
        let s = g.constant(t(&[1, 3], &[1.0, 2.0, 3.0])).softmax_rows(None).unwrap();
        let z: f64 = (-2.0f64).exp() + (-1.0f64).exp() + 1.0;
        let expected = [(-2.0f64).exp() / z, (-1.0f64).exp() / z, 1.0 / z];
        for (a, b) in s.value().data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((s.value().data()[0] - 0.09003057).abs() < 1e-8);
        assert!((s.value().data()[2] - 0.66524096).abs() < 1e-8);
    }

    #[test]
    fn masked_entries_are_zero_and_full_mask_rejected() {
        let g = Graph::new();
        let x = g.constant(t(&[2, 3], &[5.0, 1.0, 2.0, 0.0, 0.0, 0.0]));
        let mask = [false, true, true, true, true, false];
        let s = x.softmax_rows(Some(&mask)).unwrap().value();
        assert_eq!(s.data()[0], 0.0);
        assert_eq!(s.data()[5], 0.0);
        assert!((s.data()[3] + s.data()[4] - 1.0).abs() < 1e-12);
        let none = [false, false, false, true, true, true];
        assert!(x.softmax_rows(Some(&none)).is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let g = Graph::new();
        let gain = g.constant(Tensor::full(&[4], 1.0));
        let bias = g.constant(Tensor::zeros(&[4]));
        let y = g.constant(Tensor::full(&[1, 4], 5.0)).layer_norm(gain, bias).unwrap();
        assert_eq!(y.value().data(), &[0.0; 4]);

        let gain = g.constant(Tensor::full(&[2], 1.0));
        let bias = g.constant(Tensor::zeros(&[2]));
        let y = g.constant(t(&[1, 2], &[1.0, 3.0])).layer_norm(gain, bias).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.value().data()[0] + expect).abs() < 1e-12);
        assert!((y.value().data()[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn backward_sum_and_square() {
        let g = Graph::new();
        let x = g.param(Tensor::full(&[2, 3], 0.7));
        g.backward(x.sum()).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);

        let g = Graph::new();
        let x = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let loss = x.mul(x).unwrap().sum();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
        // second call accumulates
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0, 8.0, 12.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(g.backward(x.scale(2.0)).is_err());
    }

    #[test]
    fn constants_get_no_grad() {
        let g = Graph::new();
        let c = g.constant(Tensor::full(&[2], 3.0));
        let x = g.param(Tensor::full(&[2], 1.0));
        g.backward(x.mul(c).unwrap().sum()).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn swap_axes_roundtrip() {
        let g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 4, 5], |i| i as f64));
        let y = x.swap_axes12().unwrap();
        assert_eq!(y.shape(), vec![2, 4, 3, 5]);
        assert_eq!(y.value().at(&[1, 2, 0, 3]), x.value().at(&[1, 0, 2, 3]));
        let z = y.swap_axes12().unwrap();
        assert_eq!(z.value().data(), x.value().data());
    }

    #[test]
    fn xent_uniform_is_log_v() {
        let g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[3, 4]));
        for s in [0.0, 0.1, 0.5] {
            let loss = logits.label_smoothed_xent(&[1, 2, 3], 0, s).unwrap();
            assert!((loss.value().item() - 4.0f64.ln()).abs() < 1e-12);
        }
        assert!(logits.label_smoothed_xent(&[0, 0, 0], 0, 0.1).is_err());
    }
}
