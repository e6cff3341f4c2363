//! Reverse-mode differentiation tape.
//!
//! The tape records each primitive with its output value. A backward pass
//! (`grad_vars`) walks the recording in reverse and emits the gradient of
//! every node *as new primitives on the same tape*, so gradients are
//! themselves differentiable: unrolled inner-loop updates can be
//! differentiated exactly by running a second backward pass over the first.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{GradMap, ParamGroup, Tensor};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static TAPE_IDS: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
    tape: u64,
}

#[derive(Clone)]
enum Op<E> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    ScaleConst(usize, E),
    Matmul(usize, usize),
    Transpose(usize),
    /// x[n,m] + row-vector b[m]
    AddBias(usize, usize),
    /// [n,m] -> [m]
    SumRows(usize),
    /// v[m] -> [n,m]
    BroadcastRows(usize),
    /// [n,m] -> [n]
    SumCols(usize),
    /// v[n] -> [n,m]
    BroadcastCols(usize),
    /// any shape -> [1]
    SumAll(usize),
    /// [1] -> shape
    BroadcastScalar(usize),
    Relu(usize),
    Exp(usize),
    Ln(usize),
    /// Same data, new extents.
    Reshape(usize),
    /// x[n,C] plus a detached per-row constant (used for the log-softmax
    /// max-shift, which cancels analytically and so carries no gradient).
    RowOffset(usize),
    /// x[n,C] -> [n], picking x[i, idx[i]]
    GatherCols(usize, Rc<Vec<usize>>),
    /// v[n] -> [n,C], placing v[i] at (i, idx[i])
    ScatterCols(usize, Rc<Vec<usize>>),
    Conv2d {
        x: usize,
        k: usize,
        stride: usize,
    },
    /// Adjoint of Conv2d in the input slot.
    ConvXGrad {
        dy: usize,
        k: usize,
        stride: usize,
    },
    /// Adjoint of Conv2d in the kernel slot.
    ConvKGrad {
        x: usize,
        dy: usize,
        stride: usize,
    },
}

struct Node<E> {
    op: Op<E>,
    value: Tensor<E>,
}

/// Parameter group registered on a tape: names paired with leaf handles.
#[derive(Debug, Clone)]
pub struct TapedParams {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl TapedParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Re-bind the same names to new handles (after an in-tape update).
    pub fn rebound(&self, vars: Vec<Var>) -> TapedParams {
        assert_eq!(vars.len(), self.vars.len());
        TapedParams {
            names: self.names.clone(),
            vars,
        }
    }
}

pub struct Tape<E> {
    id: u64,
    nodes: Vec<Node<E>>,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims4(t: &Tensor<impl Scalar>) -> Result<(usize, usize, usize, usize)> {
    match t.dims() {
        &[a, b, c, d] => Ok((a, b, c, d)),
        other => Err(Error::Shape(format!(
            "expected a rank-4 tensor, got {other:?}"
        ))),
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::Tape(
                "handle belongs to a different tape".to_string(),
            ));
        }
        Ok(v.id)
    }

    fn push(&mut self, op: Op<E>, value: Tensor<E>) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { op, value });
        Var { id, tape: self.id }
    }

    /// Value produced at `v`. Panics if the handle is foreign; use the op
    /// constructors for fallible paths.
    pub fn value(&self, v: Var) -> &Tensor<E> {
        assert_eq!(v.tape, self.id, "foreign tape handle");
        &self.nodes[v.id].value
    }

    pub fn leaf(&mut self, t: Tensor<E>) -> Var {
        self.push(Op::Leaf, t)
    }

    /// Register every tensor of a parameter group as a leaf.
    pub fn param_group(&mut self, group: &ParamGroup<E>) -> TapedParams {
        let mut names = Vec::with_capacity(group.len());
        let mut vars = Vec::with_capacity(group.len());
        for (name, t) in group.iter() {
            names.push(name.to_string());
            vars.push(self.leaf(t.clone()));
        }
        TapedParams { names, vars }
    }

    /// Read current values of taped params back into a group shaped like `like`.
    pub fn read_params(&self, taped: &TapedParams, like: &ParamGroup<E>) -> Result<ParamGroup<E>> {
        let tensors = taped
            .vars
            .iter()
            .map(|&v| self.value(v).clone())
            .collect();
        like.with_tensors(tensors)
    }

    // ── elementwise and structural primitives ───────────────────────────

    fn binary_same_shape(&mut self, a: Var, b: Var, f: impl Fn(E, E) -> E, op: fn(usize, usize) -> Op<E>) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if ta.dims() != tb.dims() {
            return Err(Error::Shape(format!(
                "elementwise op on shapes {:?} and {:?}",
                ta.dims(),
                tb.dims()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_vec(ta.dims(), data)?;
        Ok(self.push(op(ai, bi), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, |x, y| x / y, Op::Div)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let value = self.nodes[ai].value.map(|x| -x);
        Ok(self.push(Op::Neg(ai), value))
    }

    pub fn scale_const(&mut self, a: Var, c: E) -> Result<Var> {
        let ai = self.check(a)?;
        let value = self.nodes[ai].value.map(|x| x * c);
        Ok(self.push(Op::ScaleConst(ai, c), value))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let value = self.nodes[ai].value.map(|x| if x > E::ZERO { x } else { E::ZERO });
        Ok(self.push(Op::Relu(ai), value))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let value = self.nodes[ai].value.map(E::exp);
        Ok(self.push(Op::Exp(ai), value))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let value = self.nodes[ai].value.map(E::ln);
        Ok(self.push(Op::Ln(ai), value))
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let ai = self.check(a)?;
        let value = self.nodes[ai].value.reshaped(dims)?;
        Ok(self.push(Op::Reshape(ai), value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (n, p) = self.nodes[ai].value.as_matrix_dims()?;
        let (p2, m) = self.nodes[bi].value.as_matrix_dims()?;
        if p != p2 {
            return Err(Error::Shape(format!(
                "matmul inner dims disagree: {n}x{p} times {p2}x{m}"
            )));
        }
        let lhs = self.nodes[ai].value.data();
        let rhs = self.nodes[bi].value.data();
        let mut out = vec![E::ZERO; n * m];
        for i in 0..n {
            for kk in 0..p {
                let x = lhs[i * p + kk];
                let rrow = &rhs[kk * m..(kk + 1) * m];
                let orow = &mut out[i * m..(i + 1) * m];
                for (o, &r) in orow.iter_mut().zip(rrow) {
                    *o += x * r;
                }
            }
        }
        let value = Tensor::from_vec(&[n, m], out)?;
        Ok(self.push(Op::Matmul(ai, bi), value))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let (n, m) = self.nodes[ai].value.as_matrix_dims()?;
        let src = self.nodes[ai].value.data();
        let mut out = vec![E::ZERO; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = src[i * m + j];
            }
        }
        let value = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push(Op::Transpose(ai), value))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xi, bi) = (self.check(x)?, self.check(b)?);
        let (n, m) = self.nodes[xi].value.as_matrix_dims()?;
        let bdims = self.nodes[bi].value.dims();
        if bdims != [m] {
            return Err(Error::Shape(format!(
                "bias shape {bdims:?} does not match matrix width {m}"
            )));
        }
        let xs = self.nodes[xi].value.data();
        let bs = self.nodes[bi].value.data();
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                out.push(xs[i * m + j] + bs[j]);
            }
        }
        let value = Tensor::from_vec(&[n, m], out)?;
        Ok(self.push(Op::AddBias(xi, bi), value))
    }

    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let (n, m) = self.nodes[xi].value.as_matrix_dims()?;
        let xs = self.nodes[xi].value.data();
        let mut out = vec![E::ZERO; m];
        for i in 0..n {
            for j in 0..m {
                out[j] += xs[i * m + j];
            }
        }
        let value = Tensor::from_vec(&[m], out)?;
        Ok(self.push(Op::SumRows(xi), value))
    }

    pub fn broadcast_rows(&mut self, v: Var, n: usize) -> Result<Var> {
        let vi = self.check(v)?;
        let dims = self.nodes[vi].value.dims().to_vec();
        let m = match dims.as_slice() {
            &[m] => m,
            other => return Err(Error::Shape(format!("expected a vector, got {other:?}"))),
        };
        let vs = self.nodes[vi].value.data();
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(vs);
        }
        let value = Tensor::from_vec(&[n, m], out)?;
        Ok(self.push(Op::BroadcastRows(vi), value))
    }

    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let (n, m) = self.nodes[xi].value.as_matrix_dims()?;
        let xs = self.nodes[xi].value.data();
        let mut out = vec![E::ZERO; n];
        for i in 0..n {
            for j in 0..m {
                out[i] += xs[i * m + j];
            }
        }
        let value = Tensor::from_vec(&[n], out)?;
        Ok(self.push(Op::SumCols(xi), value))
    }

    pub fn broadcast_cols(&mut self, v: Var, m: usize) -> Result<Var> {
        let vi = self.check(v)?;
        let n = match self.nodes[vi].value.dims() {
            &[n] => n,
            other => return Err(Error::Shape(format!("expected a vector, got {other:?}"))),
        };
        let vs = self.nodes[vi].value.data();
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            for _ in 0..m {
                out.push(vs[i]);
            }
        }
        let value = Tensor::from_vec(&[n, m], out)?;
        Ok(self.push(Op::BroadcastCols(vi), value))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let s = self.nodes[xi].value.data().iter().copied().sum();
        Ok(self.push(Op::SumAll(xi), Tensor::scalar(s)))
    }

    pub fn broadcast_scalar(&mut self, s: Var, dims: &[usize]) -> Result<Var> {
        let si = self.check(s)?;
        let v = self.nodes[si].value.item()?;
        let value = Tensor::new(dims, v)?;
        Ok(self.push(Op::BroadcastScalar(si), value))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum_all(x)?;
        self.scale_const(s, E::from_f64(1.0 / n as f64))
    }

    fn row_offset(&mut self, x: Var, offsets: Rc<Vec<E>>) -> Result<Var> {
        let xi = self.check(x)?;
        let (n, m) = self.nodes[xi].value.as_matrix_dims()?;
        if offsets.len() != n {
            return Err(Error::Shape("row offset length mismatch".into()));
        }
        let xs = self.nodes[xi].value.data();
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                out.push(xs[i * m + j] + offsets[i]);
            }
        }
        let value = Tensor::from_vec(&[n, m], out)?;
        Ok(self.push(Op::RowOffset(xi), value))
    }

    fn gather_cols(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let xi = self.check(x)?;
        let (n, m) = self.nodes[xi].value.as_matrix_dims()?;
        if idx.len() != n {
            return Err(Error::Shape("gather index length mismatch".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= m) {
            return Err(Error::Index(format!("column index {bad} out of range 0..{m}")));
        }
        let xs = self.nodes[xi].value.data();
        let out: Vec<E> = idx.iter().enumerate().map(|(i, &j)| xs[i * m + j]).collect();
        let value = Tensor::from_vec(&[n], out)?;
        Ok(self.push(Op::GatherCols(xi, idx), value))
    }

    fn scatter_cols(&mut self, v: Var, idx: Rc<Vec<usize>>, m: usize) -> Result<Var> {
        let vi = self.check(v)?;
        let n = match self.nodes[vi].value.dims() {
            &[n] => n,
            other => return Err(Error::Shape(format!("expected a vector, got {other:?}"))),
        };
        let vs = self.nodes[vi].value.data();
        let mut out = vec![E::ZERO; n * m];
        for (i, &j) in idx.iter().enumerate() {
            out[i * m + j] = vs[i];
        }
        let value = Tensor::from_vec(&[n, m], out)?;
        Ok(self.push(Op::ScatterCols(vi, idx), value))
    }

    // ── network-level ops ────────────────────────────────────────────────

    /// y = xW + b.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    /// Valid cross-correlation, square kernels, no padding.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::Argument("stride must be positive".into()));
        }
        let (xi, ki) = (self.check(x)?, self.check(k)?);
        let value = conv2d_forward(&self.nodes[xi].value, &self.nodes[ki].value, stride)?;
        Ok(self.push(Op::Conv2d { x: xi, k: ki, stride }, value))
    }

    /// Mean over rows of −log softmax(logits)[target], max-shifted.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let li = self.check(logits)?;
        let (n, c) = self.nodes[li].value.as_matrix_dims()?;
        if targets.len() != n {
            return Err(Error::Shape(format!(
                "{} targets for {} logit rows",
                targets.len(),
                n
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index(format!("target {bad} out of range 0..{c}")));
        }
        // Detached per-row max: subtracting a constant from a row leaves the
        // cross-entropy (and all its derivatives) unchanged.
        let vals = self.nodes[li].value.data();
        let shifts: Vec<E> = (0..n)
            .map(|i| {
                let row = &vals[i * c..(i + 1) * c];
                -row.iter().fold(row[0], |a, &b| a.max(b))
            })
            .collect();
        let idx = Rc::new(targets.to_vec());
        let z = self.row_offset(logits, Rc::new(shifts))?;
        let e = self.exp(z)?;
        let rowsum = self.sum_cols(e)?;
        let lse = self.ln(rowsum)?;
        let picked = self.gather_cols(z, idx)?;
        let per_row = self.sub(lse, picked)?;
        self.mean_all(per_row)
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Gradient of a scalar `loss` with respect to each var in `wrt`,
    /// emitted as differentiable tape nodes. Vars unreachable from the loss
    /// get zero-leaf gradients.
    pub fn grad_vars(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let loss_id = self.check(loss)?;
        for v in wrt {
            self.check(*v)?;
        }
        if !self.nodes[loss_id].value.is_scalar() {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss_id].value.dims()
            )));
        }
        let mut adj: Vec<Option<Var>> = vec![None; loss_id + 1];
        adj[loss_id] = Some(self.leaf(Tensor::scalar(E::ONE)));

        for id in (0..=loss_id).rev() {
            let Some(g) = adj[id] else { continue };
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accum(&mut adj, a, g)?;
                    self.accum(&mut adj, b, g)?;
                }
                Op::Sub(a, b) => {
                    self.accum(&mut adj, a, g)?;
                    let ng = self.neg(g)?;
                    self.accum(&mut adj, b, ng)?;
                }
                Op::Mul(a, b) => {
                    let bv = self.var_of(b);
                    let av = self.var_of(a);
                    let da = self.mul(g, bv)?;
                    self.accum(&mut adj, a, da)?;
                    let db = self.mul(g, av)?;
                    self.accum(&mut adj, b, db)?;
                }
                Op::Div(a, b) => {
                    let av = self.var_of(a);
                    let bv = self.var_of(b);
                    let da = self.div(g, bv)?;
                    self.accum(&mut adj, a, da)?;
                    // db = −g·a / b²
                    let ga = self.mul(g, av)?;
                    let bb = self.mul(bv, bv)?;
                    let q = self.div(ga, bb)?;
                    let db = self.neg(q)?;
                    self.accum(&mut adj, b, db)?;
                }
                Op::Neg(a) => {
                    let ng = self.neg(g)?;
                    self.accum(&mut adj, a, ng)?;
                }
                Op::ScaleConst(a, c) => {
                    let da = self.scale_const(g, c)?;
                    self.accum(&mut adj, a, da)?;
                }
                Op::Matmul(a, b) => {
                    let bv = self.var_of(b);
                    let av = self.var_of(a);
                    let bt = self.transpose(bv)?;
                    let da = self.matmul(g, bt)?;
                    self.accum(&mut adj, a, da)?;
                    let at = self.transpose(av)?;
                    let db = self.matmul(at, g)?;
                    self.accum(&mut adj, b, db)?;
                }
                Op::Transpose(a) => {
                    let da = self.transpose(g)?;
                    self.accum(&mut adj, a, da)?;
                }
                Op::AddBias(x, b) => {
                    self.accum(&mut adj, x, g)?;
                    let db = self.sum_rows(g)?;
                    self.accum(&mut adj, b, db)?;
                }
                Op::SumRows(x) => {
                    let n = self.nodes[x].value.as_matrix_dims()?.0;
                    let dx = self.broadcast_rows(g, n)?;
                    self.accum(&mut adj, x, dx)?;
                }
                Op::BroadcastRows(v) => {
                    let dv = self.sum_rows(g)?;
                    self.accum(&mut adj, v, dv)?;
                }
                Op::SumCols(x) => {
                    let m = self.nodes[x].value.as_matrix_dims()?.1;
                    let dx = self.broadcast_cols(g, m)?;
                    self.accum(&mut adj, x, dx)?;
                }
                Op::BroadcastCols(v) => {
                    let dv = self.sum_cols(g)?;
                    self.accum(&mut adj, v, dv)?;
                }
                Op::SumAll(x) => {
                    let dims = self.nodes[x].value.dims().to_vec();
                    let dx = self.broadcast_scalar(g, &dims)?;
                    self.accum(&mut adj, x, dx)?;
                }
                Op::BroadcastScalar(s) => {
                    let ds = self.sum_all(g)?;
                    self.accum(&mut adj, s, ds)?;
                }
                Op::Relu(x) => {
                    // Mask is piecewise constant; treating it as a detached
                    // leaf is exact (subgradient 0 at the kink).
                    let mask = self.nodes[x]
                        .value
                        .map(|v| if v > E::ZERO { E::ONE } else { E::ZERO });
                    let mv = self.leaf(mask);
                    let dx = self.mul(g, mv)?;
                    self.accum(&mut adj, x, dx)?;
                }
                Op::Exp(x) => {
                    let out = self.var_of_current(id);
                    let dx = self.mul(g, out)?;
                    self.accum(&mut adj, x, dx)?;
                }
                Op::Ln(x) => {
                    let xv = self.var_of(x);
                    let dx = self.div(g, xv)?;
                    self.accum(&mut adj, x, dx)?;
                }
                Op::RowOffset(x) => {
                    self.accum(&mut adj, x, g)?;
                }
                Op::Reshape(x) => {
                    let dims = self.nodes[x].value.dims().to_vec();
                    let dx = self.reshape(g, &dims)?;
                    self.accum(&mut adj, x, dx)?;
                }
                Op::GatherCols(x, idx) => {
                    let m = self.nodes[x].value.as_matrix_dims()?.1;
                    let dx = self.scatter_cols(g, idx, m)?;
                    self.accum(&mut adj, x, dx)?;
                }
                Op::ScatterCols(v, idx) => {
                    let dv = self.gather_cols(g, idx)?;
                    self.accum(&mut adj, v, dv)?;
                }
                Op::Conv2d { x, k, stride } => {
                    let (_, _, h, w) = dims4(&self.nodes[x].value)?;
                    let kv = self.var_of(k);
                    let xv = self.var_of(x);
                    let dx = self.conv_x_grad(g, kv, stride, (h, w))?;
                    self.accum(&mut adj, x, dx)?;
                    let ksize = self.nodes[k].value.dims()[2];
                    let dk = self.conv_k_grad(xv, g, stride, ksize)?;
                    self.accum(&mut adj, k, dk)?;
                }
                Op::ConvXGrad { dy, k, stride } => {
                    // node value is x-shaped; upstream u is x-shaped.
                    let kv = self.var_of(k);
                    let dyv = self.var_of(dy);
                    let d_dy = self.conv2d(g, kv, stride)?;
                    self.accum(&mut adj, dy, d_dy)?;
                    let ksize = self.nodes[k].value.dims()[2];
                    let d_k = self.conv_k_grad(g, dyv, stride, ksize)?;
                    self.accum(&mut adj, k, d_k)?;
                }
                Op::ConvKGrad { x, dy, stride } => {
                    // node value is kernel-shaped; upstream v is kernel-shaped.
                    let (_, _, h, w) = dims4(&self.nodes[x].value)?;
                    let dyv = self.var_of(dy);
                    let xv = self.var_of(x);
                    let d_x = self.conv_x_grad(dyv, g, stride, (h, w))?;
                    self.accum(&mut adj, x, d_x)?;
                    let d_dy = self.conv2d(xv, g, stride)?;
                    self.accum(&mut adj, dy, d_dy)?;
                }
            }
        }

        let mut out = Vec::with_capacity(wrt.len());
        for v in wrt {
            match adj.get(v.id).copied().flatten() {
                Some(g) => out.push(g),
                None => {
                    let dims = self.nodes[v.id].value.dims().to_vec();
                    out.push(self.leaf(Tensor::zeros(&dims)?));
                }
            }
        }
        Ok(out)
    }

    /// Plain gradients: `grad_vars` with the values extracted.
    pub fn grad(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor<E>>> {
        let gs = self.grad_vars(loss, wrt)?;
        Ok(gs.into_iter().map(|g| self.value(g).clone()).collect())
    }

    /// Gradients for whole parameter groups, keyed by parameter name.
    pub fn grad_map(&mut self, loss: Var, groups: &[&TapedParams]) -> Result<GradMap<E>> {
        let wrt: Vec<Var> = groups.iter().flat_map(|g| g.vars.iter().copied()).collect();
        let grads = self.grad(loss, &wrt)?;
        let names = groups.iter().flat_map(|g| g.names.iter().cloned());
        Ok(GradMap::from_entries(names.zip(grads).collect()))
    }

    fn var_of(&self, id: usize) -> Var {
        Var { id, tape: self.id }
    }

    fn var_of_current(&self, id: usize) -> Var {
        self.var_of(id)
    }

    fn accum(&mut self, adj: &mut [Option<Var>], target: usize, g: Var) -> Result<()> {
        adj[target] = Some(match adj[target] {
            None => g,
            Some(prev) => self.add(prev, g)?,
        });
        Ok(())
    }

    fn conv_x_grad(&mut self, dy: Var, k: Var, stride: usize, in_hw: (usize, usize)) -> Result<Var> {
        let (dyi, ki) = (self.check(dy)?, self.check(k)?);
        let value = conv_x_grad_forward(&self.nodes[dyi].value, &self.nodes[ki].value, stride, in_hw)?;
        Ok(self.push(
            Op::ConvXGrad {
                dy: dyi,
                k: ki,
                stride,
            },
            value,
        ))
    }

    fn conv_k_grad(&mut self, x: Var, dy: Var, stride: usize, ksize: usize) -> Result<Var> {
        let (xi, dyi) = (self.check(x)?, self.check(dy)?);
        let value = conv_k_grad_forward(&self.nodes[xi].value, &self.nodes[dyi].value, stride, ksize)?;
        Ok(self.push(
            Op::ConvKGrad {
                x: xi,
                dy: dyi,
                stride,
            },
            value,
        ))
    }
}

fn conv_out_extent(input: usize, ksize: usize, stride: usize) -> usize {
    (input - ksize) / stride + 1
}

fn conv2d_forward<E: Scalar>(x: &Tensor<E>, k: &Tensor<E>, stride: usize) -> Result<Tensor<E>> {
    let (n, c, h, w) = dims4(x)?;
    let (f, kc, kh, kw) = dims4(k)?;
    if kc != c {
        return Err(Error::Shape(format!(
            "kernel expects {kc} channels, input has {c}"
        )));
    }
    if kh != kw {
        return Err(Error::Shape(format!("kernels must be square, got {kh}x{kw}")));
    }
    if kh > h || kw > w {
        return Err(Error::Shape(format!(
            "kernel {kh}x{kw} larger than input {h}x{w}"
        )));
    }
    let oh = conv_out_extent(h, kh, stride);
    let ow = conv_out_extent(w, kw, stride);
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![E::ZERO; n * f * oh * ow];
    for b in 0..n {
        for fo in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = E::ZERO;
                    for ci in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let xv = xd[((b * c + ci) * h + oy * stride + i) * w
                                    + ox * stride
                                    + j];
                                let kv = kd[((fo * c + ci) * kh + i) * kw + j];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((b * f + fo) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[n, f, oh, ow], out)
}

fn conv_x_grad_forward<E: Scalar>(
    dy: &Tensor<E>,
    k: &Tensor<E>,
    stride: usize,
    in_hw: (usize, usize),
) -> Result<Tensor<E>> {
    let (n, f, oh, ow) = dims4(dy)?;
    let (kf, c, kh, kw) = dims4(k)?;
    if kf != f {
        return Err(Error::Shape("filter counts disagree".into()));
    }
    let (h, w) = in_hw;
    let dyd = dy.data();
    let kd = k.data();
    let mut out = vec![E::ZERO; n * c * h * w];
    for b in 0..n {
        for fo in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = dyd[((b * f + fo) * oh + oy) * ow + ox];
                    for ci in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                out[((b * c + ci) * h + oy * stride + i) * w + ox * stride + j] +=
                                    gv * kd[((fo * c + ci) * kh + i) * kw + j];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, c, h, w], out)
}

fn conv_k_grad_forward<E: Scalar>(
    x: &Tensor<E>,
    dy: &Tensor<E>,
    stride: usize,
    ksize: usize,
) -> Result<Tensor<E>> {
    let (n, c, h, w) = dims4(x)?;
    let (n2, f, oh, ow) = dims4(dy)?;
    if n != n2 {
        return Err(Error::Shape("batch sizes disagree".into()));
    }
    let _ = (h, w);
    let xd = x.data();
    let dyd = dy.data();
    let mut out = vec![E::ZERO; f * c * ksize * ksize];
    for b in 0..n {
        for fo in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = dyd[((b * f + fo) * oh + oy) * ow + ox];
                    for ci in 0..c {
                        for i in 0..ksize {
                            for j in 0..ksize {
                                out[((fo * c + ci) * ksize + i) * ksize + j] += gv
                                    * xd[((b * c + ci) * h + oy * stride + i) * w
                                        + ox * stride
                                        + j];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[f, c, ksize, ksize], out)
}
