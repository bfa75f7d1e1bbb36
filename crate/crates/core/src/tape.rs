//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A `Tape` records a Wengert list of operations during the forward pass.
//! Each node stores its value, its parent node ids, and a backward rule
//! that maps the output gradient to parent gradients. `backward` walks the
//! list in reverse insertion order (which is a reverse topological order by
//! construction) and visits each node exactly once.
//!
//! Gradient accumulation at fan-out nodes is summation, per the chain rule:
//! a node used by several consumers receives the sum of their contributions.
//!
//! Values are f64 throughout; tight finite-difference verification needs
//! the headroom.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::tensor::{Result, Tensor, TensorError};

/// Context handed to a backward rule: parent values and the node's own value.
pub struct BackCtx<'a> {
    pub parents: Vec<&'a Tensor>,
    pub out: &'a Tensor,
}

type BackFn = Box<dyn Fn(&Tensor, &BackCtx) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackFn>,
}

/// Records the compute graph for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a tape. Cheap to copy.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

/// Gradients produced by `backward`, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of a node, or zeros when the node is unreachable from the root.
    pub fn get_or_zero(&self, v: Var<'_>) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&v.shape()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, parents: Vec<usize>, backward: Option<BackFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            backward,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf with no gradient of interest (weights fixed for this pass, data).
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, vec![], None)
    }

    /// Leaf holding a learnable parameter. Identical to `constant` mechanically;
    /// callers keep the returned handle to look its gradient up after `backward`.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, vec![], None)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Install a node with a caller-supplied backward rule. The rule maps
    /// the output gradient to one gradient per parent (same order).
    pub fn custom_op(
        &self,
        value: Tensor,
        parents: &[Var<'_>],
        backward: impl Fn(&Tensor, &BackCtx) -> Vec<Tensor> + 'static,
    ) -> Var<'_> {
        let ids = parents.iter().map(|p| p.id).collect();
        self.push(value, ids, Some(Box::new(backward)))
    }

    /// Reverse pass from a scalar-valued root.
    ///
    /// Returns the gradient of `root` with respect to every reachable node.
    /// Unreachable parameters simply have no entry (`get_or_zero` reports
    /// zeros for them).
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.numel() != 1 {
            return Err(TensorError::BadShape {
                op: "backward",
                expected: "scalar root".into(),
                got: root_node.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[root.id] = Some(Tensor::filled(root_node.value.shape(), 1.0));

        for id in (0..=root.id).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[id];
            if let Some(back) = &node.backward {
                let ctx = BackCtx {
                    parents: node.parents.iter().map(|&p| &nodes[p].value).collect(),
                    out: &node.value,
                };
                let parent_grads = back(&g, &ctx);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(parent_grads) {
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg)?,
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape_ref(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    fn unary(
        self,
        value: Tensor,
        back: impl Fn(&Tensor, &BackCtx) -> Vec<Tensor> + 'static,
    ) -> Var<'t> {
        self.tape.push(value, vec![self.id], Some(Box::new(back)))
    }

    fn binary(
        self,
        rhs: Var<'t>,
        value: Tensor,
        back: impl Fn(&Tensor, &BackCtx) -> Vec<Tensor> + 'static,
    ) -> Var<'t> {
        debug_assert!(std::ptr::eq(self.tape, rhs.tape), "vars from different tapes");
        self.tape
            .push(value, vec![self.id, rhs.id], Some(Box::new(back)))
    }

    // ── elementwise binary ──────────────────────────────────────────────

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        if a.shape() != b.shape() {
            return Err(shape_err("add", &a, &b));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(a.shape(), data)?;
        drop((a, b));
        Ok(self.binary(rhs, value, |g, _| vec![g.clone(), g.clone()]))
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        if a.shape() != b.shape() {
            return Err(shape_err("sub", &a, &b));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(a.shape(), data)?;
        drop((a, b));
        Ok(self.binary(rhs, value, |g, _| vec![g.clone(), g.map(|v| -v)]))
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        if a.shape() != b.shape() {
            return Err(shape_err("mul", &a, &b));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(a.shape(), data)?;
        drop((a, b));
        Ok(self.binary(rhs, value, |g, ctx| {
            let (a, b) = (ctx.parents[0], ctx.parents[1]);
            let ga = g
                .data()
                .iter()
                .zip(b.data())
                .map(|(g, y)| g * y)
                .collect::<Vec<_>>();
            let gb = g
                .data()
                .iter()
                .zip(a.data())
                .map(|(g, x)| g * x)
                .collect::<Vec<_>>();
            vec![
                Tensor::new(a.shape(), ga).unwrap(),
                Tensor::new(b.shape(), gb).unwrap(),
            ]
        }))
    }

    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        if a.shape() != b.shape() {
            return Err(shape_err("div", &a, &b));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x / y).collect();
        let value = Tensor::new(a.shape(), data)?;
        drop((a, b));
        Ok(self.binary(rhs, value, |g, ctx| {
            let (a, b) = (ctx.parents[0], ctx.parents[1]);
            let mut ga = Vec::with_capacity(g.numel());
            let mut gb = Vec::with_capacity(g.numel());
            for i in 0..g.numel() {
                let (gi, x, y) = (g.data()[i], a.data()[i], b.data()[i]);
                ga.push(gi / y);
                gb.push(-gi * x / (y * y));
            }
            vec![
                Tensor::new(a.shape(), ga).unwrap(),
                Tensor::new(b.shape(), gb).unwrap(),
            ]
        }))
    }

    // ── matrix ops ──────────────────────────────────────────────────────

    /// `[m,k] @ [k,n] -> [m,n]`.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        let (m, k) = a.expect_matrix("matmul")?;
        let (k2, n) = b.expect_matrix("matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", &a, &b));
        }
        let value = crate::linalg::matmul(&a, &b, m, k, n);
        drop((a, b));
        Ok(self.binary(rhs, value, |g, ctx| {
            let (a, b) = (ctx.parents[0], ctx.parents[1]);
            let (m, k) = (a.rows(), a.cols());
            let n = b.cols();
            // dA = g @ B^T, dB = A^T @ g
            let bt = crate::linalg::transpose(b);
            let at = crate::linalg::transpose(a);
            vec![
                crate::linalg::matmul(g, &bt, m, n, k),
                crate::linalg::matmul(&at, g, k, m, n),
            ]
        }))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let a = self.value();
        a.expect_matrix("transpose")?;
        let value = crate::linalg::transpose(&a);
        drop(a);
        Ok(self.unary(value, |g, _| vec![crate::linalg::transpose(g)]))
    }

    /// Reinterpret the data with a new shape (no data movement).
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.to_tensor().reshaped(shape)?;
        let old_shape = self.shape();
        Ok(self.unary(value, move |g, _| {
            vec![g.clone().reshaped(&old_shape).unwrap()]
        }))
    }

    // ── broadcast binary ────────────────────────────────────────────────

    /// `[m,n] + [1,n]` row-broadcast (bias add).
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), bias.value());
        let (m, n) = a.expect_matrix("add_row")?;
        if b.shape() != [1, n] {
            return Err(shape_err("add_row", &a, &b));
        }
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for c in 0..n {
                data.push(a.data()[r * n + c] + b.data()[c]);
            }
        }
        let value = Tensor::new(&[m, n], data)?;
        drop((a, b));
        Ok(self.binary(bias, value, move |g, _| {
            let mut gb = vec![0.0; n];
            for r in 0..m {
                for c in 0..n {
                    gb[c] += g.data()[r * n + c];
                }
            }
            vec![g.clone(), Tensor::new(&[1, n], gb).unwrap()]
        }))
    }

    /// `[m,n] * [m,1]` column-broadcast (per-row scaling).
    pub fn mul_col(self, w: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), w.value());
        let (m, n) = a.expect_matrix("mul_col")?;
        if b.shape() != [m, 1] {
            return Err(shape_err("mul_col", &a, &b));
        }
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            let s = b.data()[r];
            for c in 0..n {
                data.push(a.data()[r * n + c] * s);
            }
        }
        let value = Tensor::new(&[m, n], data)?;
        drop((a, b));
        Ok(self.binary(w, value, move |g, ctx| {
            let (a, b) = (ctx.parents[0], ctx.parents[1]);
            let mut ga = Vec::with_capacity(m * n);
            let mut gb = vec![0.0; m];
            for r in 0..m {
                let s = b.data()[r];
                for c in 0..n {
                    let gi = g.data()[r * n + c];
                    ga.push(gi * s);
                    gb[r] += gi * a.data()[r * n + c];
                }
            }
            vec![
                Tensor::new(&[m, n], ga).unwrap(),
                Tensor::new(&[m, 1], gb).unwrap(),
            ]
        }))
    }

    /// `[m,n] / [1,n]` row-broadcast division (e.g. coordinates over scales).
    pub fn div_row(self, w: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), w.value());
        let (m, n) = a.expect_matrix("div_row")?;
        if b.shape() != [1, n] {
            return Err(shape_err("div_row", &a, &b));
        }
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for c in 0..n {
                data.push(a.data()[r * n + c] / b.data()[c]);
            }
        }
        let value = Tensor::new(&[m, n], data)?;
        drop((a, b));
        Ok(self.binary(w, value, move |g, ctx| {
            let (a, b) = (ctx.parents[0], ctx.parents[1]);
            let mut ga = Vec::with_capacity(m * n);
            let mut gb = vec![0.0; n];
            for r in 0..m {
                for c in 0..n {
                    let gi = g.data()[r * n + c];
                    let y = b.data()[c];
                    ga.push(gi / y);
                    gb[c] -= gi * a.data()[r * n + c] / (y * y);
                }
            }
            vec![
                Tensor::new(&[m, n], ga).unwrap(),
                Tensor::new(&[1, n], gb).unwrap(),
            ]
        }))
    }

    /// Multiply every element by a one-element tensor.
    pub fn mul_scalar(self, s: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), s.value());
        if b.numel() != 1 {
            return Err(shape_err("mul_scalar", &a, &b));
        }
        let sv = b.data()[0];
        let value = a.map(|v| v * sv);
        drop((a, b));
        Ok(self.binary(s, value, |g, ctx| {
            let (a, b) = (ctx.parents[0], ctx.parents[1]);
            let sv = b.data()[0];
            let gs: f64 = g.data().iter().zip(a.data()).map(|(g, x)| g * x).sum();
            vec![
                g.map(|v| v * sv),
                Tensor::new(b.shape(), vec![gs]).unwrap(),
            ]
        }))
    }

    /// Divide every element by a one-element tensor.
    pub fn div_scalar(self, s: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), s.value());
        if b.numel() != 1 {
            return Err(shape_err("div_scalar", &a, &b));
        }
        let sv = b.data()[0];
        let value = a.map(|v| v / sv);
        drop((a, b));
        Ok(self.binary(s, value, |g, ctx| {
            let (a, b) = (ctx.parents[0], ctx.parents[1]);
            let sv = b.data()[0];
            let gs: f64 = g
                .data()
                .iter()
                .zip(a.data())
                .map(|(g, x)| -g * x / (sv * sv))
                .sum();
            vec![
                g.map(|v| v / sv),
                Tensor::new(b.shape(), vec![gs]).unwrap(),
            ]
        }))
    }

    /// Cross product of two 3-vectors (`[3,1]`).
    pub fn cross3(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        if a.shape() != [3, 1] || b.shape() != [3, 1] {
            return Err(shape_err("cross3", &a, &b));
        }
        let value = Tensor::col(&cross(a.data(), b.data()));
        drop((a, b));
        Ok(self.binary(rhs, value, |g, ctx| {
            let (a, b) = (ctx.parents[0], ctx.parents[1]);
            // c = a×b: dL/da = b×g, dL/db = g×a
            vec![
                Tensor::col(&cross(b.data(), g.data())),
                Tensor::col(&cross(g.data(), a.data())),
            ]
        }))
    }

    // ── elementwise unary ───────────────────────────────────────────────

    pub fn scale(self, c: f64) -> Var<'t> {
        let value = self.value().map(|v| v * c);
        self.unary(value, move |g, _| vec![g.map(|v| v * c)])
    }

    pub fn add_const(self, c: f64) -> Var<'t> {
        let value = self.value().map(|v| v + c);
        self.unary(value, |g, _| vec![g.clone()])
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn exp(self) -> Var<'t> {
        let value = self.value().map(f64::exp);
        self.unary(value, |g, ctx| {
            vec![Tensor::new(
                g.shape(),
                g.data()
                    .iter()
                    .zip(ctx.out.data())
                    .map(|(g, y)| g * y)
                    .collect(),
            )
            .unwrap()]
        })
    }

    pub fn ln(self) -> Var<'t> {
        let value = self.value().map(f64::ln);
        self.unary(value, |g, ctx| {
            vec![Tensor::new(
                g.shape(),
                g.data()
                    .iter()
                    .zip(ctx.parents[0].data())
                    .map(|(g, x)| g / x)
                    .collect(),
            )
            .unwrap()]
        })
    }

    pub fn sqrt(self) -> Var<'t> {
        let value = self.value().map(f64::sqrt);
        self.unary(value, |g, ctx| {
            vec![Tensor::new(
                g.shape(),
                g.data()
                    .iter()
                    .zip(ctx.out.data())
                    .map(|(g, y)| g * 0.5 / y)
                    .collect(),
            )
            .unwrap()]
        })
    }

    pub fn sigmoid(self) -> Var<'t> {
        let value = self.value().map(sigmoid_f);
        self.unary(value, |g, ctx| {
            vec![Tensor::new(
                g.shape(),
                g.data()
                    .iter()
                    .zip(ctx.out.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect(),
            )
            .unwrap()]
        })
    }

    /// `ln(1+e^x)`, the non-negative density activation.
    pub fn softplus(self) -> Var<'t> {
        let value = self.value().map(softplus_f);
        self.unary(value, |g, ctx| {
            vec![Tensor::new(
                g.shape(),
                g.data()
                    .iter()
                    .zip(ctx.parents[0].data())
                    .map(|(g, x)| g * sigmoid_f(*x))
                    .collect(),
            )
            .unwrap()]
        })
    }

    pub fn abs(self) -> Var<'t> {
        let value = self.value().map(f64::abs);
        self.unary(value, |g, ctx| {
            vec![Tensor::new(
                g.shape(),
                g.data()
                    .iter()
                    .zip(ctx.parents[0].data())
                    .map(|(g, x)| g * x.signum() * if *x == 0.0 { 0.0 } else { 1.0 })
                    .collect(),
            )
            .unwrap()]
        })
    }

    /// Integer power, `x^n` with n >= 1.
    pub fn powi(self, n: i32) -> Var<'t> {
        assert!(n >= 1, "powi exponent must be >= 1");
        let value = self.value().map(|v| v.powi(n));
        self.unary(value, move |g, ctx| {
            vec![Tensor::new(
                g.shape(),
                g.data()
                    .iter()
                    .zip(ctx.parents[0].data())
                    .map(|(g, x)| g * n as f64 * x.powi(n - 1))
                    .collect(),
            )
            .unwrap()]
        })
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        let value = self.value().map(|v| if v >= 0.0 { v } else { v * slope });
        self.unary(value, move |g, ctx| {
            vec![Tensor::new(
                g.shape(),
                g.data()
                    .iter()
                    .zip(ctx.parents[0].data())
                    .map(|(g, x)| g * if *x >= 0.0 { 1.0 } else { slope })
                    .collect(),
            )
            .unwrap()]
        })
    }

    pub fn relu(self) -> Var<'t> {
        self.leaky_relu(0.0)
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum_all(self) -> Var<'t> {
        let a = self.value();
        let shape = a.shape().to_vec();
        let value = Tensor::scalar(a.data().iter().sum());
        drop(a);
        self.unary(value, move |g, _| {
            vec![Tensor::filled(&shape, g.data()[0])]
        })
    }

    pub fn mean_all(self) -> Var<'t> {
        let n = self.value().numel();
        self.sum_all().scale(1.0 / n as f64)
    }

    /// Per-row sum over columns: `[m,n] -> [m,1]`.
    pub fn sum_axis1(self) -> Result<Var<'t>> {
        let a = self.value();
        let (m, n) = a.expect_matrix("sum_axis1")?;
        let mut data = Vec::with_capacity(m);
        for r in 0..m {
            data.push(a.data()[r * n..(r + 1) * n].iter().sum());
        }
        let value = Tensor::new(&[m, 1], data)?;
        drop(a);
        Ok(self.unary(value, move |g, _| {
            let mut ga = Vec::with_capacity(m * n);
            for r in 0..m {
                ga.extend(std::iter::repeat(g.data()[r]).take(n));
            }
            vec![Tensor::new(&[m, n], ga).unwrap()]
        }))
    }

    /// Row-wise softmax: `[m,n] -> [m,n]`, each row sums to 1.
    pub fn softmax_rows(self) -> Result<Var<'t>> {
        let a = self.value();
        let (m, n) = a.expect_matrix("softmax_rows")?;
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = &a.data()[r * n..(r + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
            let s: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| e / s));
        }
        let value = Tensor::new(&[m, n], data)?;
        drop(a);
        Ok(self.unary(value, move |g, ctx| {
            let y = ctx.out;
            let mut ga = Vec::with_capacity(m * n);
            for r in 0..m {
                let yr = &y.data()[r * n..(r + 1) * n];
                let gr = &g.data()[r * n..(r + 1) * n];
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                ga.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
            }
            vec![Tensor::new(&[m, n], ga).unwrap()]
        }))
    }

    // ── structural ops ──────────────────────────────────────────────────

    /// Copy of rows `[r0, r1)`.
    pub fn slice_rows(self, r0: usize, r1: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (m, n) = a.expect_matrix("slice_rows")?;
        if r0 > r1 || r1 > m {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: r1,
                len: m,
            });
        }
        let value = Tensor::new(&[r1 - r0, n], a.data()[r0 * n..r1 * n].to_vec())?;
        drop(a);
        Ok(self.unary(value, move |g, _| {
            let mut ga = Tensor::zeros(&[m, n]);
            ga.data_mut()[r0 * n..r1 * n].copy_from_slice(g.data());
            vec![ga]
        }))
    }

    /// Copy of columns `[c0, c1)`.
    pub fn slice_cols(self, c0: usize, c1: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (m, n) = a.expect_matrix("slice_cols")?;
        if c0 > c1 || c1 > n {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: c1,
                len: n,
            });
        }
        let w = c1 - c0;
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&a.data()[r * n + c0..r * n + c1]);
        }
        let value = Tensor::new(&[m, w], data)?;
        drop(a);
        Ok(self.unary(value, move |g, _| {
            let mut ga = Tensor::zeros(&[m, n]);
            for r in 0..m {
                ga.data_mut()[r * n + c0..r * n + c1].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
            }
            vec![ga]
        }))
    }

    /// Gather rows by index: `out[k,:] = self[idx[k],:]`.
    pub fn gather_rows(self, idx: Rc<Vec<usize>>) -> Result<Var<'t>> {
        let a = self.value();
        let (m, n) = a.expect_matrix("gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                len: m,
            });
        }
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx.iter() {
            data.extend_from_slice(&a.data()[i * n..(i + 1) * n]);
        }
        let value = Tensor::new(&[idx.len(), n], data)?;
        drop(a);
        Ok(self.unary(value, move |g, _| {
            let mut ga = Tensor::zeros(&[m, n]);
            for (k, &i) in idx.iter().enumerate() {
                for c in 0..n {
                    ga.data_mut()[i * n + c] += g.data()[k * n + c];
                }
            }
            vec![ga]
        }))
    }

    /// Scatter-add rows into a fresh `[n_out, n]` tensor: `out[idx[k],:] += self[k,:]`.
    ///
    /// Accumulation runs in input order, single-threaded, so results are
    /// independent of scheduling.
    pub fn scatter_add_rows(self, idx: Rc<Vec<usize>>, n_out: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (k, n) = a.expect_matrix("scatter_add_rows")?;
        if idx.len() != k {
            return Err(TensorError::Invalid {
                op: "scatter_add_rows",
                detail: format!("{} indices for {} rows", idx.len(), k),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n_out) {
            return Err(TensorError::IndexOutOfRange {
                op: "scatter_add_rows",
                index: bad,
                len: n_out,
            });
        }
        let mut out = Tensor::zeros(&[n_out, n]);
        for (r, &i) in idx.iter().enumerate() {
            for c in 0..n {
                out.data_mut()[i * n + c] += a.data()[r * n + c];
            }
        }
        drop(a);
        Ok(self.unary(out, move |g, _| {
            let mut ga = Vec::with_capacity(idx.len() * n);
            for &i in idx.iter() {
                ga.extend_from_slice(&g.data()[i * n..(i + 1) * n]);
            }
            vec![Tensor::new(&[idx.len(), n], ga).unwrap()]
        }))
    }

    /// Sparse weighted row combination: `out[o,:] += w * self[i,:]` for each
    /// `(o, i, w)` entry. Used for graph message passing over variable
    /// per-point bone sets.
    pub fn indexed_weighted_sum(
        self,
        entries: Rc<Vec<(usize, usize, f64)>>,
        n_out: usize,
    ) -> Result<Var<'t>> {
        let a = self.value();
        let (k, n) = a.expect_matrix("indexed_weighted_sum")?;
        for &(o, i, _) in entries.iter() {
            if o >= n_out || i >= k {
                return Err(TensorError::IndexOutOfRange {
                    op: "indexed_weighted_sum",
                    index: o.max(i),
                    len: n_out.max(k),
                });
            }
        }
        let mut out = Tensor::zeros(&[n_out, n]);
        for &(o, i, w) in entries.iter() {
            for c in 0..n {
                out.data_mut()[o * n + c] += w * a.data()[i * n + c];
            }
        }
        drop(a);
        Ok(self.unary(out, move |g, _| {
            let mut ga = Tensor::zeros(&[k, n]);
            for &(o, i, w) in entries.iter() {
                for c in 0..n {
                    ga.data_mut()[i * n + c] += w * g.data()[o * n + c];
                }
            }
            vec![ga]
        }))
    }

    /// Exclusive prefix sum within consecutive segments of `seg` rows.
    /// `[m,1] -> [m,1]` with `m % seg == 0`; used for accumulated
    /// transmittance along rays.
    pub fn segment_cumsum_exclusive(self, seg: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (m, n) = a.expect_matrix("segment_cumsum_exclusive")?;
        if n != 1 || seg == 0 || m % seg != 0 {
            return Err(TensorError::Invalid {
                op: "segment_cumsum_exclusive",
                detail: format!("shape {:?} with segment {}", a.shape(), seg),
            });
        }
        let mut data = Vec::with_capacity(m);
        for s in 0..m / seg {
            let mut acc = 0.0;
            for q in 0..seg {
                data.push(acc);
                acc += a.data()[s * seg + q];
            }
        }
        let value = Tensor::new(&[m, 1], data)?;
        drop(a);
        Ok(self.unary(value, move |g, _| {
            // out_i = sum_{j<i} a_j  =>  d a_j = sum_{i>j} g_i (within segment)
            let mut ga = vec![0.0; m];
            for s in 0..m / seg {
                let mut acc = 0.0;
                for q in (0..seg).rev() {
                    ga[s * seg + q] = acc;
                    acc += g.data()[s * seg + q];
                }
            }
            vec![Tensor::new(&[m, 1], ga).unwrap()]
        }))
    }

    /// Sum consecutive segments of `seg` rows: `[m,n] -> [m/seg, n]`.
    pub fn segment_sum(self, seg: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (m, n) = a.expect_matrix("segment_sum")?;
        if seg == 0 || m % seg != 0 {
            return Err(TensorError::Invalid {
                op: "segment_sum",
                detail: format!("shape {:?} with segment {}", a.shape(), seg),
            });
        }
        let rows = m / seg;
        let mut out = Tensor::zeros(&[rows, n]);
        for r in 0..m {
            let o = r / seg;
            for c in 0..n {
                out.data_mut()[o * n + c] += a.data()[r * n + c];
            }
        }
        drop(a);
        Ok(self.unary(out, move |g, _| {
            let mut ga = Vec::with_capacity(m * n);
            for r in 0..m {
                let o = r / seg;
                ga.extend_from_slice(&g.data()[o * n..(o + 1) * n]);
            }
            vec![Tensor::new(&[m, n], ga).unwrap()]
        }))
    }

    /// Linear interpolation into per-channel 1-D feature arrays.
    ///
    /// `features` is `[h, m]`: h channels sampled at m uniform positions
    /// spanning [-1, 1] inclusive. `self` is a `[k,1]` column of query
    /// coordinates. Rows with |coord| > 1 produce the zero vector and
    /// receive no gradient (neither into the features nor the coordinate).
    pub fn interp1d_from(features: Var<'t>, coords: Var<'t>) -> Result<Var<'t>> {
        let (f, c) = (features.value(), coords.value());
        let (h, m) = f.expect_matrix("interp1d")?;
        let (k, one) = c.expect_matrix("interp1d")?;
        if one != 1 || m < 2 {
            return Err(shape_err("interp1d", &f, &c));
        }
        let half = (m - 1) as f64 / 2.0;
        let mut data = vec![0.0; k * h];
        for r in 0..k {
            let x = c.data()[r];
            if !(-1.0..=1.0).contains(&x) {
                continue;
            }
            let u = (x + 1.0) * half;
            let mut j = u.floor() as usize;
            if j >= m - 1 {
                j = m - 2;
            }
            let frac = u - j as f64;
            for ch in 0..h {
                let f0 = f.data()[ch * m + j];
                let f1 = f.data()[ch * m + j + 1];
                data[r * h + ch] = f0 + frac * (f1 - f0);
            }
        }
        let value = Tensor::new(&[k, h], data)?;
        drop((f, c));
        Ok(features
            .tape
            .push(value, vec![features.id, coords.id], Some(Box::new(
                move |g, ctx| {
                    let (f, c) = (ctx.parents[0], ctx.parents[1]);
                    let mut gf = Tensor::zeros(&[h, m]);
                    let mut gc = vec![0.0; k];
                    for r in 0..k {
                        let x = c.data()[r];
                        if !(-1.0..=1.0).contains(&x) {
                            continue;
                        }
                        let u = (x + 1.0) * half;
                        let mut j = u.floor() as usize;
                        if j >= m - 1 {
                            j = m - 2;
                        }
                        let frac = u - j as f64;
                        for ch in 0..h {
                            let gi = g.data()[r * h + ch];
                            gf.data_mut()[ch * m + j] += gi * (1.0 - frac);
                            gf.data_mut()[ch * m + j + 1] += gi * frac;
                            let df = f.data()[ch * m + j + 1] - f.data()[ch * m + j];
                            gc[r] += gi * df * half;
                        }
                    }
                    vec![gf, Tensor::new(&[k, 1], gc).unwrap()]
                },
            ))))
    }

    /// Trilinear interpolation into a dense per-channel 3-D grid.
    ///
    /// `grid` is `[h, m^3]` with index `(x*m + y)*m + z`; each axis spans
    /// [-1,1] over m uniform samples. `self` is `[k,3]` query coordinates.
    /// Out-of-cube rows produce zeros with no gradient.
    pub fn interp3d_from(grid: Var<'t>, coords: Var<'t>, m: usize) -> Result<Var<'t>> {
        let (gr, c) = (grid.value(), coords.value());
        let (h, m3) = gr.expect_matrix("interp3d")?;
        let (k, three) = c.expect_matrix("interp3d")?;
        if three != 3 || m < 2 || m3 != m * m * m {
            return Err(shape_err("interp3d", &gr, &c));
        }
        let half = (m - 1) as f64 / 2.0;
        let locate = move |x: f64| -> (usize, f64) {
            let u = (x + 1.0) * half;
            let mut j = u.floor() as usize;
            if j >= m - 1 {
                j = m - 2;
            }
            (j, u - j as f64)
        };
        let corner_weights = |f: [f64; 3]| -> [f64; 8] {
            let mut w = [0.0; 8];
            for (i, wi) in w.iter_mut().enumerate() {
                let wx = if i & 4 != 0 { f[0] } else { 1.0 - f[0] };
                let wy = if i & 2 != 0 { f[1] } else { 1.0 - f[1] };
                let wz = if i & 1 != 0 { f[2] } else { 1.0 - f[2] };
                *wi = wx * wy * wz;
            }
            w
        };
        let mut data = vec![0.0; k * h];
        for r in 0..k {
            let p = [c.data()[r * 3], c.data()[r * 3 + 1], c.data()[r * 3 + 2]];
            if p.iter().any(|v| !(-1.0..=1.0).contains(v)) {
                continue;
            }
            let (jx, fx) = locate(p[0]);
            let (jy, fy) = locate(p[1]);
            let (jz, fz) = locate(p[2]);
            let w = corner_weights([fx, fy, fz]);
            for ch in 0..h {
                let base = ch * m3;
                let mut acc = 0.0;
                for (i, wi) in w.iter().enumerate() {
                    let x = jx + ((i >> 2) & 1);
                    let y = jy + ((i >> 1) & 1);
                    let z = jz + (i & 1);
                    acc += wi * gr.data()[base + (x * m + y) * m + z];
                }
                data[r * h + ch] = acc;
            }
        }
        let value = Tensor::new(&[k, h], data)?;
        drop((gr, c));
        Ok(grid.tape.push(
            value,
            vec![grid.id, coords.id],
            Some(Box::new(move |g, ctx| {
                let (gr, c) = (ctx.parents[0], ctx.parents[1]);
                let mut gg = Tensor::zeros(&[h, m3]);
                let mut gc = vec![0.0; k * 3];
                for r in 0..k {
                    let p = [c.data()[r * 3], c.data()[r * 3 + 1], c.data()[r * 3 + 2]];
                    if p.iter().any(|v| !(-1.0..=1.0).contains(v)) {
                        continue;
                    }
                    let (jx, fx) = locate(p[0]);
                    let (jy, fy) = locate(p[1]);
                    let (jz, fz) = locate(p[2]);
                    let w = corner_weights([fx, fy, fz]);
                    for ch in 0..h {
                        let base = ch * m3;
                        let gi = g.data()[r * h + ch];
                        if gi == 0.0 {
                            continue;
                        }
                        for (i, wi) in w.iter().enumerate() {
                            let x = jx + ((i >> 2) & 1);
                            let y = jy + ((i >> 1) & 1);
                            let z = jz + (i & 1);
                            let v = gr.data()[base + (x * m + y) * m + z];
                            gg.data_mut()[base + (x * m + y) * m + z] += gi * wi;
                            // d weight / d fractional coordinate, one axis at a time
                            let sx = if i & 4 != 0 { 1.0 } else { -1.0 };
                            let sy = if i & 2 != 0 { 1.0 } else { -1.0 };
                            let sz = if i & 1 != 0 { 1.0 } else { -1.0 };
                            let wy = if i & 2 != 0 { fy } else { 1.0 - fy };
                            let wz = if i & 1 != 0 { fz } else { 1.0 - fz };
                            let wx = if i & 4 != 0 { fx } else { 1.0 - fx };
                            gc[r * 3] += gi * v * sx * wy * wz * half;
                            gc[r * 3 + 1] += gi * v * sy * wx * wz * half;
                            gc[r * 3 + 2] += gi * v * sz * wx * wy * half;
                        }
                    }
                }
                vec![gg, Tensor::new(&[k, 3], gc).unwrap()]
            })),
        ))
    }
}

/// Concatenate along rows (stack): all inputs share the column count.
pub fn concat_rows<'t>(tape: &'t Tape, parts: &[Var<'t>]) -> Result<Var<'t>> {
    assert!(!parts.is_empty());
    let n = parts[0].value().cols();
    let mut sizes = Vec::with_capacity(parts.len());
    let mut data = Vec::new();
    for p in parts {
        let v = p.value();
        let (m, nc) = v.expect_matrix("concat_rows")?;
        if nc != n {
            return Err(TensorError::ShapeMismatch {
                op: "concat_rows",
                lhs: vec![m, nc],
                rhs: vec![0, n],
            });
        }
        sizes.push(m);
        data.extend_from_slice(v.data());
    }
    let total: usize = sizes.iter().sum();
    let value = Tensor::new(&[total, n], data)?;
    let ids = parts.iter().map(|p| p.id).collect();
    Ok(tape.push(
        value,
        ids,
        Some(Box::new(move |g, _| {
            let mut out = Vec::with_capacity(sizes.len());
            let mut r = 0;
            for &m in &sizes {
                out.push(Tensor::new(&[m, n], g.data()[r * n..(r + m) * n].to_vec()).unwrap());
                r += m;
            }
            out
        })),
    ))
}

/// Concatenate along columns: all inputs share the row count.
pub fn concat_cols<'t>(tape: &'t Tape, parts: &[Var<'t>]) -> Result<Var<'t>> {
    assert!(!parts.is_empty());
    let m = parts[0].value().rows();
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let v = p.value();
        let (mr, n) = v.expect_matrix("concat_cols")?;
        if mr != m {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                lhs: vec![mr, n],
                rhs: vec![m, 0],
            });
        }
        widths.push(n);
    }
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(m * total);
    for r in 0..m {
        for p in parts {
            let v = p.value();
            let n = v.cols();
            data.extend_from_slice(&v.data()[r * n..(r + 1) * n]);
        }
    }
    let value = Tensor::new(&[m, total], data)?;
    let ids = parts.iter().map(|p| p.id).collect();
    Ok(tape.push(
        value,
        ids,
        Some(Box::new(move |g, _| {
            let mut out: Vec<Tensor> = widths.iter().map(|&n| Tensor::zeros(&[m, n])).collect();
            for r in 0..m {
                let mut c0 = 0;
                for (part, &n) in out.iter_mut().zip(&widths) {
                    part.data_mut()[r * n..(r + 1) * n]
                        .copy_from_slice(&g.data()[r * total + c0..r * total + c0 + n]);
                    c0 += n;
                }
            }
            out
        })),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = x.mul(x).unwrap().sum_all();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::col(&[1.0, 2.0]));
        let b = tape.constant(Tensor::col(&[3.0, 4.0]));
        assert_eq!(a.add(b).unwrap().to_tensor().data(), &[4.0, 6.0]);
        assert_eq!(tape.scalar(0.0).sigmoid().item().unwrap(), 0.5);
        let s = tape
            .constant(Tensor::row(&[0.0, 0.0, 0.0]))
            .softmax_rows()
            .unwrap();
        for v in s.to_tensor().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_requires_scalar_root() {
        let tape = Tape::new();
        let x = tape.param(Tensor::col(&[1.0, 2.0]));
        let y = x.scale(2.0);
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 3]));
        let err = a.add(b).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
        assert!(err.contains("[2, 3]") && err.contains("[3, 3]"), "{err}");

        let err = a.matmul(a).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
    }

    #[test]
    fn accumulation_is_linear_over_independent_subgraphs() {
        // disjoint parameters: backward(f(x) + g(y)) reproduces the
        // individual backwards bit-for-bit
        let x0 = Tensor::col(&[0.7, -1.3, 2.1]);
        let y0 = Tensor::col(&[0.2, 1.9, -0.8]);
        let run = |mode: u8| -> (Vec<f64>, Vec<f64>) {
            let tape = Tape::new();
            let x = tape.param(x0.clone());
            let y = tape.param(y0.clone());
            let f = x.mul(x).unwrap().sum_all();
            let g = y.exp().sum_all();
            let root = match mode {
                0 => f.add(g).unwrap(),
                1 => f,
                _ => g,
            };
            let grads = tape.backward(root).unwrap();
            (
                grads.get_or_zero(x).data().to_vec(),
                grads.get_or_zero(y).data().to_vec(),
            )
        };
        let (cx, cy) = run(0);
        let (fx, _) = run(1);
        let (_, gy) = run(2);
        assert_eq!(cx, fx);
        assert_eq!(cy, gy);

        // shared parameter: linearity holds up to floating-point
        // reassociation of the accumulation order
        let shared = |mode: u8| -> Vec<f64> {
            let tape = Tape::new();
            let x = tape.param(x0.clone());
            let f = x.mul(x).unwrap().sum_all();
            let g = x.exp().sum_all();
            let root = match mode {
                0 => f.add(g).unwrap(),
                1 => f,
                _ => g,
            };
            tape.backward(root).unwrap().get(x).unwrap().data().to_vec()
        };
        let combined = shared(0);
        let f_only = shared(1);
        let g_only = shared(2);
        for i in 0..3 {
            let sum = f_only[i] + g_only[i];
            assert!((combined[i] - sum).abs() <= 1e-12 * sum.abs().max(1.0));
        }
    }

    #[test]
    fn repeated_backward_is_bit_identical() {
        let build = || -> Vec<f64> {
            let tape = Tape::new();
            let x = tape.param(Tensor::col(&[0.3, 0.9, -0.4, 1.7]));
            let w = tape.constant(Tensor::new(&[4, 4], (0..16).map(|i| (i as f64) * 0.13 - 1.0).collect()).unwrap());
            let y = w.matmul(x).unwrap().sigmoid().sum_all();
            let g = tape.backward(y).unwrap();
            g.get(x).unwrap().data().to_vec()
        };
        let a = build();
        let b = build();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn unreachable_parameter_gets_zero_gradient() {
        let tape = Tape::new();
        let used = tape.param(Tensor::scalar(2.0));
        let unused = tape.param(Tensor::col(&[1.0, 1.0]));
        let y = used.mul(used).unwrap().sum_all();
        let g = tape.backward(y).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.get_or_zero(unused).data(), &[0.0, 0.0]);
    }
}

pub(crate) fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_f(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn cross(a: &[f64], b: &[f64]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}
