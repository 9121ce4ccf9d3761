//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Tensors are immutable values; operations on tensors that participate in
//! gradient tracking record their parents and local gradient rule, forming an
//! implicit DAG. [`Tensor::backward`] walks that DAG in reverse topological
//! order from a scalar root and accumulates gradients into every reachable
//! parameter leaf.
//!
//! Conventions:
//!
//! * All data is 64-bit, row-major. Rank 0 (`shape == []`) is a scalar,
//!   rank 1 a vector, rank 2 a matrix. No broadcasting: elementwise ops
//!   require identical shapes; `matmul` accepts `[m,k]x[k,n]` and `[m,k]x[k]`.
//! * Gradients accumulate: calling `backward` again without
//!   [`Tensor::zero_grad`] sums into the existing buffers. Callers own the
//!   zeroing policy.
//! * `-inf` is representable only to express masked affinity scores (see
//!   `moe::topk_mask`); `softmax` maps it to an exact 0. Constructors reject
//!   non-finite input, and in debug builds every op validates its operands.
//! * Graph recording is thread-confined (`Rc` internally). Parallel workloads
//!   build independent tensors per worker.

use std::cell::{Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// A dense f64 tensor, cheaply cloneable (shared storage).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    op: Option<Op>,
}

/// Recorded operation: parent references plus everything the local gradient
/// rule needs. The output tensor itself is available during backward, so ops
/// whose derivative is cheapest in terms of the output (exp, sqrt, softmax)
/// reuse it.
enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Scale(Tensor, f64),
    AddScalar(Tensor),
    /// scalar-tensor * tensor, gradient flows to both.
    ScaleBy { scalar: Tensor, value: Tensor },
    Matmul(Tensor, Tensor),
    Relu(Tensor),
    Softmax(Tensor),
    /// Keep listed indices, fill the rest with -inf. Gradient passes through
    /// kept positions only.
    MaskKeep { input: Tensor, kept: Vec<usize> },
    Ln(Tensor),
    Exp(Tensor),
    Sqrt(Tensor),
    Square(Tensor),
    Sigmoid(Tensor),
    Softplus(Tensor),
    /// (exp(x) - 1) / x, evaluated stably near 0.
    ExpM1Over(Tensor),
    Sum(Tensor),
    Mean(Tensor),
    Norm(Tensor),
    Index(Tensor, usize),
    Row(Tensor, usize),
}

impl Op {
    fn parents(&self) -> Vec<&Tensor> {
        use Op::*;
        match self {
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Matmul(a, b) => vec![a, b],
            ScaleBy { scalar, value } => vec![scalar, value],
            Scale(a, _) | AddScalar(a) | Relu(a) | Softmax(a) | Ln(a) | Exp(a) | Sqrt(a)
            | Square(a) | Sigmoid(a) | Softplus(a) | ExpM1Over(a) | Sum(a) | Mean(a) | Norm(a)
            | Index(a, _) | Row(a, _) => vec![a],
            MaskKeep { input, .. } => vec![input],
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("data", &self.inner.data.borrow())
            .finish()
    }
}

fn count(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Option<Op>) -> Tensor {
        debug_assert_eq!(data.len(), count(&shape));
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                op,
            }),
        }
    }

    fn result(data: Vec<f64>, shape: Vec<usize>, op: Op) -> Tensor {
        let tracked = op.parents().iter().any(|p| p.requires_grad());
        // Constant subgraphs are not recorded; the result is a plain value.
        Tensor::build(data, shape, tracked, if tracked { Some(op) } else { None })
    }

    /// Constant tensor. Rejects non-finite entries.
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Result<Tensor> {
        if data.len() != count(&shape) {
            return Err(Error::contract(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor constructor (value {v})")));
        }
        Ok(Tensor::build(data, shape, false, None))
    }

    /// Trainable leaf: participates in gradient tracking and owns a gradient
    /// accumulator populated by `backward`.
    pub fn param(data: Vec<f64>, shape: Vec<usize>) -> Result<Tensor> {
        let t = Tensor::new(data, shape)?;
        Ok(Tensor::build(
            t.to_vec(),
            t.shape().to_vec(),
            true,
            None,
        ))
    }

    pub fn vector(data: Vec<f64>) -> Result<Tensor> {
        let n = data.len();
        Tensor::new(data, vec![n])
    }

    pub fn scalar(v: f64) -> Result<Tensor> {
        Tensor::new(vec![v], vec![])
    }

    pub fn scalar_param(v: f64) -> Result<Tensor> {
        Tensor::param(vec![v], vec![])
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = count(&shape);
        Tensor::build(vec![0.0; n], shape, false, None)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        count(&self.inner.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// True for tensors with no recorded parents (constants and parameters).
    pub fn is_leaf(&self) -> bool {
        self.inner.op.is_none()
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Scalar value. Panics if the tensor is not a scalar (programming error).
    pub fn value(&self) -> f64 {
        assert_eq!(self.len(), 1, "value() on non-scalar tensor");
        self.inner.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Overwrite the stored values in place. Intended for optimizers updating
    /// parameter leaves; graph-internal tensors are treated as immutable.
    pub fn set_data(&self, new: &[f64]) -> Result<()> {
        if new.len() != self.len() {
            return Err(Error::contract(format!(
                "set_data length {} vs tensor length {}",
                new.len(),
                self.len()
            )));
        }
        self.inner.data.borrow_mut().copy_from_slice(new);
        Ok(())
    }

    /// Constant copy sharing no graph history (cuts the gradient path).
    pub fn detach(&self) -> Tensor {
        Tensor::build(self.to_vec(), self.shape().to_vec(), false, None)
    }

    fn same_shape(&self, rhs: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Debug builds reject non-finite operands op-by-op; release builds rely
    /// on the finite checks at layer boundaries and in the trainer.
    fn ensure_finite(&self, op: &'static str) -> Result<()> {
        #[cfg(debug_assertions)]
        {
            if self.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(op.into()));
            }
        }
        let _ = op;
        Ok(())
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.same_shape(rhs, "add")?;
        self.ensure_finite("add")?;
        rhs.ensure_finite("add")?;
        let data = zip_map(&self.data(), &rhs.data(), |a, b| a + b);
        Ok(Tensor::result(
            data,
            self.shape().to_vec(),
            Op::Add(self.clone(), rhs.clone()),
        ))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.same_shape(rhs, "sub")?;
        self.ensure_finite("sub")?;
        rhs.ensure_finite("sub")?;
        let data = zip_map(&self.data(), &rhs.data(), |a, b| a - b);
        Ok(Tensor::result(
            data,
            self.shape().to_vec(),
            Op::Sub(self.clone(), rhs.clone()),
        ))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.same_shape(rhs, "mul")?;
        self.ensure_finite("mul")?;
        rhs.ensure_finite("mul")?;
        let data = zip_map(&self.data(), &rhs.data(), |a, b| a * b);
        Ok(Tensor::result(
            data,
            self.shape().to_vec(),
            Op::Mul(self.clone(), rhs.clone()),
        ))
    }

    /// Elementwise division.
    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        self.same_shape(rhs, "div")?;
        self.ensure_finite("div")?;
        rhs.ensure_finite("div")?;
        let data = zip_map(&self.data(), &rhs.data(), |a, b| a / b);
        Ok(Tensor::result(
            data,
            self.shape().to_vec(),
            Op::Div(self.clone(), rhs.clone()),
        ))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&self, c: f64) -> Result<Tensor> {
        self.ensure_finite("scale")?;
        let data: Vec<f64> = self.data().iter().map(|v| v * c).collect();
        Ok(Tensor::result(
            data,
            self.shape().to_vec(),
            Op::Scale(self.clone(), c),
        ))
    }

    /// Add a constant to every element.
    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        self.ensure_finite("add_scalar")?;
        let data: Vec<f64> = self.data().iter().map(|v| v + c).collect();
        Ok(Tensor::result(
            data,
            self.shape().to_vec(),
            Op::AddScalar(self.clone()),
        ))
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }

    /// Multiply by a scalar *tensor* (gradient flows into both factors).
    /// Used by learnable momentum/step-size coefficients.
    pub fn scale_by(&self, scalar: &Tensor) -> Result<Tensor> {
        if scalar.len() != 1 {
            return Err(Error::contract(format!(
                "scale_by expects a scalar tensor, got shape {:?}",
                scalar.shape()
            )));
        }
        self.ensure_finite("scale_by")?;
        scalar.ensure_finite("scale_by")?;
        let s = scalar.data()[0];
        let data: Vec<f64> = self.data().iter().map(|v| v * s).collect();
        Ok(Tensor::result(
            data,
            self.shape().to_vec(),
            Op::ScaleBy {
                scalar: scalar.clone(),
                value: self.clone(),
            },
        ))
    }

    // ---- linear algebra --------------------------------------------------

    /// Matrix product. `[m,k] x [k,n] -> [m,n]`, or `[m,k] x [k] -> [m]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.ensure_finite("matmul")?;
        rhs.ensure_finite("matmul")?;
        let (ls, rs) = (self.shape(), rhs.shape());
        match (ls.len(), rs.len()) {
            (2, 2) => {
                let (m, k) = (ls[0], ls[1]);
                let (k2, n) = (rs[0], rs[1]);
                if k != k2 {
                    return Err(Error::ShapeMismatch {
                        op: "matmul",
                        lhs: ls.to_vec(),
                        rhs: rs.to_vec(),
                    });
                }
                let data = mat_mat(&self.data(), &rhs.data(), m, k, n);
                Ok(Tensor::result(
                    data,
                    vec![m, n],
                    Op::Matmul(self.clone(), rhs.clone()),
                ))
            }
            (2, 1) => {
                let (m, k) = (ls[0], ls[1]);
                if k != rs[0] {
                    return Err(Error::ShapeMismatch {
                        op: "matmul",
                        lhs: ls.to_vec(),
                        rhs: rs.to_vec(),
                    });
                }
                let data = mat_vec(&self.data(), &rhs.data(), m, k);
                Ok(Tensor::result(
                    data,
                    vec![m],
                    Op::Matmul(self.clone(), rhs.clone()),
                ))
            }
            _ => Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ls.to_vec(),
                rhs: rs.to_vec(),
            }),
        }
    }

    // ---- nonlinearities --------------------------------------------------

    pub fn relu(&self) -> Result<Tensor> {
        self.ensure_finite("relu")?;
        let data: Vec<f64> = self.data().iter().map(|v| v.max(0.0)).collect();
        Ok(Tensor::result(
            data,
            self.shape().to_vec(),
            Op::Relu(self.clone()),
        ))
    }

    /// Numerically stable softmax over a rank-1 tensor. `-inf` entries map to
    /// an exact 0; at least one entry must be finite. NaN or `+inf` entries
    /// are rejected.
    pub fn softmax(&self) -> Result<Tensor> {
        if self.shape().len() != 1 {
            return Err(Error::contract(format!(
                "softmax expects a rank-1 tensor, got shape {:?}",
                self.shape()
            )));
        }
        let data = self.data();
        let mut max = f64::NEG_INFINITY;
        for &v in data.iter() {
            if v.is_nan() || v == f64::INFINITY {
                return Err(Error::NonFinite("softmax input".into()));
            }
            if v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateInput("softmax over all -inf".into()));
        }
        let exps: Vec<f64> = data.iter().map(|&v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let out: Vec<f64> = exps.iter().map(|e| e / total).collect();
        drop(data);
        Ok(Tensor::result(
            out,
            self.shape().to_vec(),
            Op::Softmax(self.clone()),
        ))
    }

    /// Keep the listed indices, set every other entry to `-inf`. The gradient
    /// passes through kept positions and is zero elsewhere (the index set is
    /// treated as a fixed, non-differentiable selection).
    pub fn mask_keep(&self, kept: &[usize]) -> Result<Tensor> {
        if self.shape().len() != 1 {
            return Err(Error::contract(format!(
                "mask_keep expects a rank-1 tensor, got shape {:?}",
                self.shape()
            )));
        }
        let n = self.len();
        if let Some(&bad) = kept.iter().find(|&&i| i >= n) {
            return Err(Error::contract(format!(
                "mask_keep index {bad} out of range for length {n}"
            )));
        }
        let data = self.data();
        let mut out = vec![f64::NEG_INFINITY; n];
        for &i in kept {
            out[i] = data[i];
        }
        drop(data);
        Ok(Tensor::result(
            out,
            self.shape().to_vec(),
            Op::MaskKeep {
                input: self.clone(),
                kept: kept.to_vec(),
            },
        ))
    }

    pub fn ln(&self) -> Result<Tensor> {
        self.ensure_finite("ln")?;
        let data: Vec<f64> = self.data().iter().map(|v| v.ln()).collect();
        Ok(Tensor::result(
            data,
            self.shape().to_vec(),
            Op::Ln(self.clone()),
        ))
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.ensure_finite("exp")?;
        let data: Vec<f64> = self.data().iter().map(|v| v.exp()).collect();
        Ok(Tensor::result(
            data,
            self.shape().to_vec(),
            Op::Exp(self.clone()),
        ))
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        self.ensure_finite("sqrt")?;
        let data: Vec<f64> = self.data().iter().map(|v| v.sqrt()).collect();
        Ok(Tensor::result(
            data,
            self.shape().to_vec(),
            Op::Sqrt(self.clone()),
        ))
    }

    pub fn square(&self) -> Result<Tensor> {
        self.ensure_finite("square")?;
        let data: Vec<f64> = self.data().iter().map(|v| v * v).collect();
        Ok(Tensor::result(
            data,
            self.shape().to_vec(),
            Op::Square(self.clone()),
        ))
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.ensure_finite("sigmoid")?;
        let data: Vec<f64> = self.data().iter().map(|&v| sigmoid(v)).collect();
        Ok(Tensor::result(
            data,
            self.shape().to_vec(),
            Op::Sigmoid(self.clone()),
        ))
    }

    pub fn softplus(&self) -> Result<Tensor> {
        self.ensure_finite("softplus")?;
        let data: Vec<f64> = self.data().iter().map(|&v| softplus(v)).collect();
        Ok(Tensor::result(
            data,
            self.shape().to_vec(),
            Op::Softplus(self.clone()),
        ))
    }

    /// `(exp(x) - 1) / x` elementwise, with the removable singularity at 0
    /// evaluated by series. Backs the zero-order-hold discretization.
    pub fn expm1_over(&self) -> Result<Tensor> {
        self.ensure_finite("expm1_over")?;
        let data: Vec<f64> = self.data().iter().map(|&v| expm1_over(v)).collect();
        Ok(Tensor::result(
            data,
            self.shape().to_vec(),
            Op::ExpM1Over(self.clone()),
        ))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&self) -> Result<Tensor> {
        self.ensure_finite("sum")?;
        let s: f64 = self.data().iter().sum();
        Ok(Tensor::result(vec![s], vec![], Op::Sum(self.clone())))
    }

    pub fn mean(&self) -> Result<Tensor> {
        if self.is_empty() {
            return Err(Error::DegenerateInput("mean over empty tensor".into()));
        }
        self.ensure_finite("mean")?;
        let s: f64 = self.data().iter().sum();
        let m = s / self.len() as f64;
        Ok(Tensor::result(vec![m], vec![], Op::Mean(self.clone())))
    }

    /// Euclidean norm over all elements.
    pub fn norm(&self) -> Result<Tensor> {
        self.ensure_finite("norm")?;
        let s: f64 = self.data().iter().map(|v| v * v).sum();
        Ok(Tensor::result(
            vec![s.sqrt()],
            vec![],
            Op::Norm(self.clone()),
        ))
    }

    // ---- indexing ----------------------------------------------------------

    /// Select element `i` of a rank-1 tensor as a scalar.
    pub fn index(&self, i: usize) -> Result<Tensor> {
        if self.shape().len() != 1 {
            return Err(Error::contract(format!(
                "index expects a rank-1 tensor, got shape {:?}",
                self.shape()
            )));
        }
        if i >= self.len() {
            return Err(Error::contract(format!(
                "index {i} out of range for length {}",
                self.len()
            )));
        }
        let v = self.data()[i];
        Ok(Tensor::result(vec![v], vec![], Op::Index(self.clone(), i)))
    }

    /// Select row `i` of a rank-2 tensor as a rank-1 tensor.
    pub fn row(&self, i: usize) -> Result<Tensor> {
        if self.shape().len() != 2 {
            return Err(Error::contract(format!(
                "row expects a rank-2 tensor, got shape {:?}",
                self.shape()
            )));
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        if i >= r {
            return Err(Error::contract(format!(
                "row {i} out of range for {r} rows"
            )));
        }
        let data = self.data()[i * c..(i + 1) * c].to_vec();
        Ok(Tensor::result(data, vec![c], Op::Row(self.clone(), i)))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse-mode sweep from a scalar root. Populates/accumulates `grad` on
    /// every parameter leaf reachable through recorded operations.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::contract(
                "backward root does not depend on any tracked parameter",
            ));
        }
        let order = topo_order(self);
        let mut flowing: std::collections::HashMap<u64, Vec<f64>> =
            std::collections::HashMap::new();
        flowing.insert(self.id(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = flowing.remove(&node.id()) else {
                continue;
            };
            match &node.inner.op {
                None => {
                    // Parameter leaf: accumulate.
                    let mut slot = node.inner.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(buf) => {
                            for (b, gi) in buf.iter_mut().zip(g.iter()) {
                                *b += gi;
                            }
                        }
                        None => *slot = Some(g),
                    }
                }
                Some(op) => propagate(op, node, &g, &mut flowing),
            }
        }
        Ok(())
    }
}

/// Reverse topological order of the tracked subgraph rooted at `root`:
/// every node appears after all of its parents.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !seen.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(op) = &t.inner.op {
            for p in op.parents() {
                if p.requires_grad() && !seen.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order
}

#[cfg(test)]
pub(crate) fn topo_order_ids(root: &Tensor) -> Vec<(u64, Vec<u64>)> {
    topo_order(root)
        .iter()
        .map(|t| {
            let parents = t
                .inner
                .op
                .as_ref()
                .map(|op| op.parents().iter().map(|p| p.id()).collect())
                .unwrap_or_default();
            (t.id(), parents)
        })
        .collect()
}

struct Sink<'a> {
    flowing: &'a mut std::collections::HashMap<u64, Vec<f64>>,
}

impl Sink<'_> {
    /// Accumulate a gradient contribution for `target`, computing it lazily
    /// only when the target is on the tracked path.
    fn add<F: FnOnce() -> Vec<f64>>(&mut self, target: &Tensor, contribution: F) {
        if !target.requires_grad() {
            return;
        }
        let entry = self
            .flowing
            .entry(target.id())
            .or_insert_with(|| vec![0.0; target.len()]);
        let c = contribution();
        debug_assert_eq!(c.len(), entry.len());
        for (e, v) in entry.iter_mut().zip(c.iter()) {
            *e += v;
        }
    }
}

fn propagate(
    op: &Op,
    out: &Tensor,
    g: &[f64],
    flowing: &mut std::collections::HashMap<u64, Vec<f64>>,
) {
    let mut sink = Sink { flowing };
    use Op::*;
    match op {
        Add(a, b) => {
            sink.add(a, || g.to_vec());
            sink.add(b, || g.to_vec());
        }
        Sub(a, b) => {
            sink.add(a, || g.to_vec());
            sink.add(b, || g.iter().map(|v| -v).collect());
        }
        Mul(a, b) => {
            sink.add(a, || zip_map(g, &b.data(), |gi, bi| gi * bi));
            sink.add(b, || zip_map(g, &a.data(), |gi, ai| gi * ai));
        }
        Div(a, b) => {
            sink.add(a, || zip_map(g, &b.data(), |gi, bi| gi / bi));
            sink.add(b, || {
                let ad = a.data();
                let bd = b.data();
                g.iter()
                    .zip(ad.iter().zip(bd.iter()))
                    .map(|(gi, (ai, bi))| -gi * ai / (bi * bi))
                    .collect()
            });
        }
        Scale(a, c) => {
            let c = *c;
            sink.add(a, || g.iter().map(|v| v * c).collect());
        }
        AddScalar(a) => {
            sink.add(a, || g.to_vec());
        }
        ScaleBy { scalar, value } => {
            sink.add(scalar, || {
                let vd = value.data();
                vec![g.iter().zip(vd.iter()).map(|(gi, vi)| gi * vi).sum()]
            });
            let s = scalar.data()[0];
            sink.add(value, || g.iter().map(|v| v * s).collect());
        }
        Matmul(a, b) => {
            let (ls, rs) = (a.shape(), b.shape());
            if rs.len() == 2 {
                let (m, k, n) = (ls[0], ls[1], rs[1]);
                sink.add(a, || grad_matmul_lhs(g, &b.data(), m, k, n));
                sink.add(b, || grad_matmul_rhs(&a.data(), g, m, k, n));
            } else {
                let (m, k) = (ls[0], ls[1]);
                sink.add(a, || {
                    let x = b.data();
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let gi = g[i];
                        let row = &mut da[i * k..(i + 1) * k];
                        for (r, xv) in row.iter_mut().zip(x.iter()) {
                            *r = gi * xv;
                        }
                    }
                    da
                });
                sink.add(b, || {
                    let ad = a.data();
                    let mut dx = vec![0.0; k];
                    for i in 0..m {
                        let gi = g[i];
                        let row = &ad[i * k..(i + 1) * k];
                        for (d, av) in dx.iter_mut().zip(row.iter()) {
                            *d += gi * av;
                        }
                    }
                    dx
                });
            }
        }
        Relu(a) => {
            sink.add(a, || {
                zip_map(g, &a.data(), |gi, ai| if ai > 0.0 { gi } else { 0.0 })
            });
        }
        Softmax(a) => {
            sink.add(a, || {
                let y = out.data();
                let dot: f64 = g.iter().zip(y.iter()).map(|(gi, yi)| gi * yi).sum();
                y.iter().zip(g.iter()).map(|(yi, gi)| yi * (gi - dot)).collect()
            });
        }
        MaskKeep { input, kept } => {
            sink.add(input, || {
                let mut d = vec![0.0; input.len()];
                for &i in kept {
                    d[i] = g[i];
                }
                d
            });
        }
        Ln(a) => {
            sink.add(a, || zip_map(g, &a.data(), |gi, ai| gi / ai));
        }
        Exp(a) => {
            sink.add(a, || zip_map(g, &out.data(), |gi, yi| gi * yi));
        }
        Sqrt(a) => {
            sink.add(a, || zip_map(g, &out.data(), |gi, yi| gi / (2.0 * yi)));
        }
        Square(a) => {
            sink.add(a, || zip_map(g, &a.data(), |gi, ai| 2.0 * ai * gi));
        }
        Sigmoid(a) => {
            sink.add(a, || zip_map(g, &out.data(), |gi, yi| gi * yi * (1.0 - yi)));
        }
        Softplus(a) => {
            sink.add(a, || zip_map(g, &a.data(), |gi, ai| gi * sigmoid(ai)));
        }
        ExpM1Over(a) => {
            sink.add(a, || zip_map(g, &a.data(), |gi, ai| gi * expm1_over_deriv(ai)));
        }
        Sum(a) => {
            let g0 = g[0];
            sink.add(a, || vec![g0; a.len()]);
        }
        Mean(a) => {
            let g0 = g[0] / a.len() as f64;
            sink.add(a, || vec![g0; a.len()]);
        }
        Norm(a) => {
            let y = out.data()[0];
            let g0 = g[0];
            sink.add(a, || {
                if y == 0.0 {
                    vec![0.0; a.len()]
                } else {
                    a.data().iter().map(|ai| g0 * ai / y).collect()
                }
            });
        }
        Index(a, i) => {
            let (i, g0) = (*i, g[0]);
            sink.add(a, || {
                let mut d = vec![0.0; a.len()];
                d[i] = g0;
                d
            });
        }
        Row(a, i) => {
            let i = *i;
            sink.add(a, || {
                let c = a.shape()[1];
                let mut d = vec![0.0; a.len()];
                d[i * c..(i + 1) * c].copy_from_slice(g);
                d
            });
        }
    }
}

// ---- numeric kernels --------------------------------------------------------

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
}

fn mat_mat(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            let ail = a[i * k + l];
            let brow = &b[l * n..(l + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += ail * bv;
            }
        }
    }
    c
}

fn mat_vec(a: &[f64], x: &[f64], m: usize, k: usize) -> Vec<f64> {
    let mut y = vec![0.0; m];
    for i in 0..m {
        let row = &a[i * k..(i + 1) * k];
        y[i] = row.iter().zip(x.iter()).map(|(av, xv)| av * xv).sum();
    }
    y
}

/// dA = dC * B^T for C = A*B.
fn grad_matmul_lhs(dc: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut da = vec![0.0; m * k];
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        let darow = &mut da[i * k..(i + 1) * k];
        for l in 0..k {
            let brow = &b[l * n..(l + 1) * n];
            darow[l] = dcrow.iter().zip(brow.iter()).map(|(d, bv)| d * bv).sum();
        }
    }
    da
}

/// dB = A^T * dC for C = A*B.
fn grad_matmul_rhs(a: &[f64], dc: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut db = vec![0.0; k * n];
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        for l in 0..k {
            let ail = a[i * k + l];
            let dbrow = &mut db[l * n..(l + 1) * n];
            for (dbv, dcv) in dbrow.iter_mut().zip(dcrow.iter()) {
                *dbv += ail * dcv;
            }
        }
    }
    db
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    // max(x, 0) + ln(1 + exp(-|x|)) avoids overflow on either side.
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// (e^x - 1) / x with a series fallback near the removable singularity.
pub(crate) fn expm1_over(x: f64) -> f64 {
    if x.abs() < 1e-5 {
        1.0 + x / 2.0 + x * x / 6.0
    } else {
        x.exp_m1() / x
    }
}

/// d/dx [(e^x - 1)/x] = (e^x (x - 1) + 1) / x^2.
fn expm1_over_deriv(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        0.5 + x / 3.0 + x * x / 8.0
    } else {
        (x.exp() * (x - 1.0) + 1.0) / (x * x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= tol, "{x} vs {y} (tol {tol})");
        }
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).unwrap();
        let id = Tensor::new(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]).unwrap();
        let c = a.matmul(&id).unwrap();
        assert_close(&c.to_vec(), &[1.0, 2.0, 3.0, 4.0], 0.0);
    }

    #[test]
    fn matmul_dot_product() {
        let a = Tensor::new(vec![1.0, 2.0], vec![1, 2]).unwrap();
        let b = Tensor::new(vec![3.0, 4.0], vec![2, 1]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.to_vec(), vec![11.0]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::new(vec![1.0, 2.0], vec![1, 2]).unwrap();
        let b = Tensor::new(vec![3.0, 4.0], vec![1, 2]).unwrap();
        assert!(matches!(
            a.matmul(&b),
            Err(Error::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn matmul_grad_of_sum() {
        // d sum(A*B) / dA with B all-ones is [[2,2],[2,2]].
        let a = Tensor::param(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).unwrap();
        let b = Tensor::new(vec![1.0; 4], vec![2, 2]).unwrap();
        let s = a.matmul(&b).unwrap().sum().unwrap();
        s.backward().unwrap();
        assert_close(&a.grad().unwrap(), &[2.0, 2.0, 2.0, 2.0], 1e-12);
    }

    #[test]
    fn softmax_symmetry_and_masking() {
        let v = Tensor::vector(vec![0.0, 0.0]).unwrap();
        assert_close(&v.softmax().unwrap().to_vec(), &[0.5, 0.5], 1e-15);

        // [3, -inf, 2] -> [e/(e+1), 0, 1/(e+1)]
        let m = Tensor::vector(vec![3.0, 1.0, 2.0])
            .unwrap()
            .mask_keep(&[0, 2])
            .unwrap();
        let y = m.softmax().unwrap().to_vec();
        assert!((y[0] - 0.7310585786300049).abs() < 1e-12);
        assert_eq!(y[1], 0.0);
        assert!((y[2] - 0.2689414213699951).abs() < 1e-12);
    }

    #[test]
    fn softmax_large_inputs_no_overflow() {
        let v = Tensor::build(vec![1000.0, 1000.0], vec![2], false, None);
        let y = v.softmax().unwrap().to_vec();
        assert_close(&y, &[0.5, 0.5], 1e-15);
    }

    #[test]
    fn softmax_all_masked_is_degenerate() {
        let v = Tensor::build(vec![f64::NEG_INFINITY; 3], vec![3], false, None);
        assert!(matches!(v.softmax(), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn backward_square() {
        let x = Tensor::scalar_param(3.0).unwrap();
        let y = x.square().unwrap();
        y.backward().unwrap();
        assert_close(&x.grad().unwrap(), &[6.0], 1e-12);
    }

    #[test]
    fn backward_sum_of_softmax_is_zero() {
        let v = Tensor::param(vec![0.3, -1.2, 2.0], vec![3]).unwrap();
        let s = v.softmax().unwrap().sum().unwrap();
        s.backward().unwrap();
        for g in v.grad().unwrap() {
            assert!(g.abs() < 1e-12, "grad {g} should vanish");
        }
    }

    #[test]
    fn backward_requires_scalar_root() {
        let v = Tensor::param(vec![1.0, 2.0], vec![2]).unwrap();
        let y = v.scale(2.0).unwrap();
        assert!(matches!(y.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let x = Tensor::scalar_param(2.0).unwrap();
        let y = x.square().unwrap();
        y.backward().unwrap();
        y.backward().unwrap();
        assert_close(&x.grad().unwrap(), &[8.0], 1e-12);
        x.zero_grad();
        y.backward().unwrap();
        assert_close(&x.grad().unwrap(), &[4.0], 1e-12);
    }

    #[test]
    fn shared_subexpression_sums_along_paths() {
        // y = x*x + x  =>  dy/dx = 2x + 1
        let x = Tensor::scalar_param(1.5).unwrap();
        let y = x.mul(&x).unwrap().add(&x).unwrap();
        y.backward().unwrap();
        assert_close(&x.grad().unwrap(), &[4.0], 1e-12);
    }

    #[test]
    fn topo_order_places_parents_first() {
        let x = Tensor::scalar_param(1.5).unwrap();
        let y = x.square().unwrap().add(&x).unwrap().sum().unwrap();
        let order = topo_order_ids(&y);
        let pos: std::collections::HashMap<u64, usize> = order
            .iter()
            .enumerate()
            .map(|(i, (id, _))| (*id, i))
            .collect();
        for (id, parents) in &order {
            for p in parents {
                assert!(pos[p] < pos[id], "parent must precede child");
            }
        }
    }

    #[test]
    fn constructors_reject_non_finite() {
        assert!(Tensor::new(vec![f64::NAN], vec![1]).is_err());
        assert!(Tensor::new(vec![f64::NEG_INFINITY], vec![1]).is_err());
    }

    #[test]
    fn constant_graphs_are_not_recorded() {
        let a = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let b = a.scale(3.0).unwrap();
        assert!(b.is_leaf());
        assert!(!b.requires_grad());
    }

    #[test]
    fn detach_cuts_gradient_flow() {
        let x = Tensor::scalar_param(2.0).unwrap();
        let d = x.square().unwrap().detach();
        assert!(!d.requires_grad());
        assert_eq!(d.value(), 4.0);
    }

    #[test]
    fn expm1_over_series_matches_direct() {
        for &z in &[1e-6, 1e-5, 2e-5, 0.5, 2.0_f64.ln()] {
            let direct = (z.exp() - 1.0) / z;
            assert!((expm1_over(z) - direct).abs() < 1e-10);
        }
        assert!((expm1_over(0.0) - 1.0).abs() < 1e-15);
    }
}
