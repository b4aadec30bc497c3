//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every op of one forward pass; [`Tape::backward`]
//! replays the tape in reverse and accumulates exact gradients into the
//! tape. Parameters live outside the tape as plain tensors and are bound
//! as leaves at the start of each step, so the swap-based training step
//! (two encodes, three decodes) needs no static graph.
//!
//! Binary ops demand equal shapes; there is no implicit broadcasting.

use std::cell::RefCell;

use crate::error::{FinoError, Result};
use crate::tensor::Tensor;

/// Divisors with magnitude below this are treated as a non-invertible scale.
pub const DIV_EPS: f64 = 1e-12;

pub struct BackArgs<'a> {
    pub parents: &'a [&'a Tensor],
    pub out: &'a Tensor,
    pub grad: &'a Tensor,
}

type BackClosure = Box<dyn Fn(&BackArgs) -> Vec<Tensor>>;

struct BackOp {
    parents: Vec<usize>,
    f: BackClosure,
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    back: Option<BackOp>,
}

/// Records a computation graph dynamically, one node per op output.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
}

/// Handle to a tensor on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
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
        self.len() == 0
    }

    /// A trainable leaf: gradients will be accumulated for it.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.insert(value, true, None)
    }

    /// A non-trainable input; no gradient is tracked through it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.insert(value, false, None)
    }

    fn insert(&self, value: Tensor, requires_grad: bool, back: Option<BackOp>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            requires_grad,
            back,
        });
        self.grads.borrow_mut().push(None);
        Var { tape: self, id }
    }

    /// Push an op result. The backward closure is kept only when some
    /// parent needs gradients.
    pub(crate) fn push_op(
        &self,
        op: &'static str,
        value: Tensor,
        parents: Vec<usize>,
        f: BackClosure,
    ) -> Result<Var<'_>> {
        if !value.all_finite() {
            return Err(FinoError::NonFinite(op.to_string()));
        }
        let needs = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        let back = needs.then_some(BackOp { parents, f });
        Ok(self.insert(value, needs, back))
    }

    /// Reverse pass from a scalar loss. Gradients accumulate across calls
    /// until [`Tape::zero_grads`].
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(FinoError::Invalid("backward: var from another tape".into()));
        }
        let nodes = self.nodes.borrow();
        if !nodes[loss.id].value.is_scalar() {
            return Err(FinoError::shape(
                "backward",
                format!("loss must be scalar, got {:?}", nodes[loss.id].value.shape()),
            ));
        }
        let mut work: Vec<Option<Tensor>> = vec![None; nodes.len()];
        work[loss.id] = Some(Tensor::scalar(1.0));
        let mut stored = self.grads.borrow_mut();
        for id in (0..=loss.id).rev() {
            let Some(g) = work[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &mut stored[id] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g.clone()),
            }
            if let Some(back) = &node.back {
                let parent_vals: Vec<&Tensor> =
                    back.parents.iter().map(|&p| &nodes[p].value).collect();
                let args = BackArgs {
                    parents: &parent_vals,
                    out: &node.value,
                    grad: &g,
                };
                let parent_grads = (back.f)(&args);
                debug_assert_eq!(parent_grads.len(), back.parents.len());
                for (&pid, pg) in back.parents.iter().zip(parent_grads) {
                    if !nodes[pid].requires_grad {
                        continue;
                    }
                    debug_assert_eq!(pg.shape(), nodes[pid].value.shape());
                    match &mut work[pid] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
        }
        Ok(())
    }

    pub fn zero_grads(&self) {
        for g in self.grads.borrow_mut().iter_mut() {
            *g = None;
        }
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|v| v.shape().to_vec())
    }

    /// Accumulated gradient, if `backward` reached this var.
    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grads.borrow()[self.id].clone()
    }

    fn unary(
        &self,
        op: &'static str,
        fwd: impl Fn(f64) -> f64,
        // (input element, output element, incoming grad) -> input grad
        bwd: impl Fn(f64, f64, f64) -> f64 + 'static,
    ) -> Result<Var<'t>> {
        let value = self.with_value(|v| v.map(fwd));
        self.tape.push_op(
            op,
            value,
            vec![self.id],
            Box::new(move |args| {
                let x = args.parents[0].data();
                let y = args.out.data();
                let g = args.grad.data();
                let data = (0..x.len()).map(|i| bwd(x[i], y[i], g[i])).collect();
                vec![Tensor::new(args.parents[0].shape().to_vec(), data).unwrap()]
            }),
        )
    }

    fn binary(
        &self,
        other: Var<'t>,
        op: &'static str,
        fwd: impl Fn(f64, f64) -> f64,
        // (a, b, grad) -> (grad_a, grad_b)
        bwd: impl Fn(f64, f64, f64) -> (f64, f64) + 'static,
    ) -> Result<Var<'t>> {
        let value = self.with_value(|a| other.with_value(|b| a.zip(b, op, &fwd)))?;
        self.tape.push_op(
            op,
            value,
            vec![self.id, other.id],
            Box::new(move |args| {
                let a = args.parents[0].data();
                let b = args.parents[1].data();
                let g = args.grad.data();
                let mut ga = Vec::with_capacity(a.len());
                let mut gb = Vec::with_capacity(a.len());
                for i in 0..a.len() {
                    let (da, db) = bwd(a[i], b[i], g[i]);
                    ga.push(da);
                    gb.push(db);
                }
                let shape = args.parents[0].shape().to_vec();
                vec![
                    Tensor::new(shape.clone(), ga).unwrap(),
                    Tensor::new(shape, gb).unwrap(),
                ]
            }),
        )
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, |_, _, g| (g, g))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, |_, _, g| (g, -g))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, |a, b, g| (g * b, g * a))
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        let bad = other.with_value(|b| b.data().iter().any(|x| x.abs() < DIV_EPS));
        if bad {
            return Err(FinoError::NonFinite(format!(
                "div: divisor magnitude below {DIV_EPS} (non-invertible scale)"
            )));
        }
        self.binary(
            other,
            "div",
            |a, b| a / b,
            |a, b, g| (g / b, -g * a / (b * b)),
        )
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.unary(
            "relu",
            |x| x.max(0.0),
            |x, _, g| if x > 0.0 { g } else { 0.0 },
        )
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary("exp", f64::exp, |_, y, g| g * y)
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        self.unary("tanh", f64::tanh, |_, y, g| g * (1.0 - y * y))
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.unary("neg", |x| -x, |_, _, g| -g)
    }

    pub fn abs(&self) -> Result<Var<'t>> {
        // subgradient 0 at the kink
        self.unary("abs", f64::abs, |x, _, g| g * sign(x))
    }

    /// Elementwise `k * x + b` with scalar constants.
    pub fn affine(&self, k: f64, b: f64) -> Result<Var<'t>> {
        self.unary("affine", move |x| k * x + b, move |_, _, g| k * g)
    }

    fn reduce(
        &self,
        op: &'static str,
        fwd: impl Fn(&[f64]) -> f64,
        // (input, incoming scalar grad) -> input grad element at i
        bwd: impl Fn(&[f64], usize, f64) -> f64 + 'static,
    ) -> Result<Var<'t>> {
        if self.with_value(|v| v.is_empty()) {
            return Err(FinoError::Invalid(format!("{op}: empty input")));
        }
        let value = Tensor::scalar(self.with_value(|v| fwd(v.data())));
        self.tape.push_op(
            op,
            value,
            vec![self.id],
            Box::new(move |args| {
                let x = args.parents[0].data();
                let g = args.grad.item();
                let data = (0..x.len()).map(|i| bwd(x, i, g)).collect();
                vec![Tensor::new(args.parents[0].shape().to_vec(), data).unwrap()]
            }),
        )
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        self.reduce("sum", |x| x.iter().sum(), |_, _, g| g)
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        self.reduce(
            "mean",
            |x| x.iter().sum::<f64>() / x.len() as f64,
            |x, _, g| g / x.len() as f64,
        )
    }

    /// Mean of absolute values; the crate-wide ‖·‖₁ convention.
    pub fn l1_mean(&self) -> Result<Var<'t>> {
        self.reduce(
            "l1_mean",
            |x| x.iter().map(|v| v.abs()).sum::<f64>() / x.len() as f64,
            |x, i, g| g * sign(x[i]) / x.len() as f64,
        )
    }

    /// Sum of squares (squared Frobenius norm).
    pub fn frobenius_sq(&self) -> Result<Var<'t>> {
        self.reduce(
            "frobenius_sq",
            |x| x.iter().map(|v| v * v).sum(),
            |x, i, g| 2.0 * g * x[i],
        )
    }

    /// Split an N×C×H×W tensor at channel `c_head` into head and tail.
    pub fn channel_split(&self, c_head: usize) -> Result<(Var<'t>, Var<'t>)> {
        let (n, c, h, w) = self.with_value(|v| v.dims4())?;
        if c_head == 0 || c_head >= c {
            return Err(FinoError::Invalid(format!(
                "channel_split: c_head {c_head} out of range (0, {c})"
            )));
        }
        let head_val = self.with_value(|v| slice_channels(v, 0, c_head));
        let tail_val = self.with_value(|v| slice_channels(v, c_head, c));
        let make_back = |lo: usize, hi: usize| -> BackClosure {
            Box::new(move |args: &BackArgs| {
                let mut full = Tensor::zeros(args.parents[0].shape());
                scatter_channels(&mut full, args.grad, lo, hi);
                vec![full]
            })
        };
        let _ = (n, h, w);
        let head = self
            .tape
            .push_op("channel_split", head_val, vec![self.id], make_back(0, c_head))?;
        let tail = self.tape.push_op(
            "channel_split",
            tail_val,
            vec![self.id],
            make_back(c_head, c),
        )?;
        Ok((head, tail))
    }

    /// Concatenate two N×·×H×W tensors along channels; inverse of split.
    pub fn channel_concat(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (n1, c1, h1, w1) = self.with_value(|v| v.dims4())?;
        let (n2, c2, h2, w2) = other.with_value(|v| v.dims4())?;
        if (n1, h1, w1) != (n2, h2, w2) {
            return Err(FinoError::shape(
                "channel_concat",
                format!(
                    "non-channel dims differ: {:?} vs {:?}",
                    (n1, h1, w1),
                    (n2, h2, w2)
                ),
            ));
        }
        let mut out = Tensor::zeros(&[n1, c1 + c2, h1, w1]);
        self.with_value(|a| scatter_channels(&mut out, a, 0, c1));
        other.with_value(|b| scatter_channels(&mut out, b, c1, c1 + c2));
        self.tape.push_op(
            "channel_concat",
            out,
            vec![self.id, other.id],
            Box::new(move |args| {
                vec![
                    slice_channels(args.grad, 0, c1),
                    slice_channels(args.grad, c1, c1 + c2),
                ]
            }),
        )
    }

    /// Single-sample view of a batch: returns item `i` as 1×C×H×W.
    pub fn batch_item(&self, i: usize) -> Result<Var<'t>> {
        let (n, c, h, w) = self.with_value(|v| v.dims4())?;
        if i >= n {
            return Err(FinoError::Invalid(format!(
                "batch_item: index {i} out of range for batch {n}"
            )));
        }
        let stride = c * h * w;
        let value = self.with_value(|v| {
            Tensor::new(
                vec![1, c, h, w],
                v.data()[i * stride..(i + 1) * stride].to_vec(),
            )
            .unwrap()
        });
        self.tape.push_op(
            "batch_item",
            value,
            vec![self.id],
            Box::new(move |args| {
                let mut full = Tensor::zeros(args.parents[0].shape());
                full.data_mut()[i * stride..(i + 1) * stride].copy_from_slice(args.grad.data());
                vec![full]
            }),
        )
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Copy channels [lo, hi) of an N×C×H×W tensor into a new tensor.
fn slice_channels(v: &Tensor, lo: usize, hi: usize) -> Tensor {
    let (n, c, h, w) = v.dims4().expect("rank-4");
    let hw = h * w;
    let mut out = Tensor::zeros(&[n, hi - lo, h, w]);
    for ni in 0..n {
        let src = &v.data()[(ni * c + lo) * hw..(ni * c + hi) * hw];
        let dst = &mut out.data_mut()[ni * (hi - lo) * hw..(ni + 1) * (hi - lo) * hw];
        dst.copy_from_slice(src);
    }
    out
}

/// Write `part` (N×(hi−lo)×H×W) into channels [lo, hi) of `full`.
fn scatter_channels(full: &mut Tensor, part: &Tensor, lo: usize, hi: usize) {
    let (n, c, h, w) = full.dims4().expect("rank-4");
    let hw = h * w;
    let pc = hi - lo;
    for ni in 0..n {
        let src = &part.data()[ni * pc * hw..(ni + 1) * pc * hw];
        let dst = &mut full.data_mut()[(ni * c + lo) * hw..(ni * c + hi) * hw];
        dst.copy_from_slice(src);
    }
}
