//! Reverse-mode automatic differentiation on an eager tape.
//!
//! Every operation is recorded as a node holding its already-computed value.
//! `grad` walks the tape backwards and emits the adjoint computation as *new
//! tape nodes*, so gradients are themselves differentiable and second-order
//! quantities (gradients through gradients) come out of the same machinery.
//!
//! The op set is the minimum needed for small convolutional classifiers:
//! broadcasted arithmetic, a few pointwise nonlinearities, reductions,
//! stride-1 convolution with its two adjoints, 2x2 max pooling, bilinear
//! resizing and zero padding. Locally constant factors in adjoints (sign
//! masks, pool indices, clip masks) are recorded as constants, which is the
//! almost-everywhere-correct subgradient convention.

use std::cell::{Ref, RefCell};
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};

pub mod kernels;
use kernels as k;

#[derive(Clone)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Abs,
    Sign,
    Arctan,
    Sin,
    Cos,
    Exp,
    Ln,
    MaxScalar(f64),
    Clip(f64, f64),
    BroadcastTo(Vec<usize>),
    ReduceSumTo(Vec<usize>),
    Reshape,
    Conv2d { pad: usize },
    ConvT2d { pad: usize, out_hw: (usize, usize) },
    ConvWGrad { pad: usize, kshape: [usize; 4] },
    MaxPool2 { idx: Arc<Vec<u32>> },
    MaxUnpool2 { idx: Arc<Vec<u32>> },
    PoolGather { idx: Arc<Vec<u32>> },
    Resize { hw: (usize, usize) },
    ResizeT { hw: (usize, usize) },
    PadZero { top: usize, left: usize },
    CropWin { top: usize, left: usize },
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: ArrayD<f64>,
}

/// Recording tape. Not thread-safe by design: build one tape per logical
/// computation; independent tapes may live on different threads.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Cheap copyable handle to a tape node.
#[derive(Clone, Copy)]
pub struct Tx<'a> {
    tape: &'a Tape,
    pub id: usize,
}

impl std::fmt::Debug for Tx<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tx#{}", self.id)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, inputs: Vec<usize>, value: ArrayD<f64>) -> Tx<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, inputs, value });
        Tx { tape: self, id: nodes.len() - 1 }
    }

    /// Record an input tensor (variable or constant; the distinction is made
    /// by which ids are passed to `grad`).
    pub fn leaf(&self, value: ArrayD<f64>) -> Tx<'_> {
        self.push(Op::Leaf, vec![], value)
    }

    pub fn scalar(&self, v: f64) -> Tx<'_> {
        self.leaf(ArrayD::from_elem(IxDyn(&[1]), v))
    }
}

impl<'a> Tx<'a> {
    pub fn value(&self) -> Ref<'a, ArrayD<f64>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_array(&self) -> ArrayD<f64> {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Tx<'a> {
        let v = self.value().mapv(&f);
        self.tape.push(op, vec![self.id], v)
    }

    fn binary(self, other: Tx<'a>, op: Op, f: impl Fn(f64, f64) -> f64) -> Tx<'a> {
        let v = k::bmap(&self.value(), &other.value(), f);
        self.tape.push(op, vec![self.id, other.id], v)
    }

    pub fn abs(self) -> Tx<'a> {
        self.unary(Op::Abs, f64::abs)
    }

    pub fn sign(self) -> Tx<'a> {
        self.unary(Op::Sign, |x| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn atan(self) -> Tx<'a> {
        self.unary(Op::Arctan, f64::atan)
    }

    pub fn sin(self) -> Tx<'a> {
        self.unary(Op::Sin, f64::sin)
    }

    pub fn cos(self) -> Tx<'a> {
        self.unary(Op::Cos, f64::cos)
    }

    pub fn exp(self) -> Tx<'a> {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn ln(self) -> Tx<'a> {
        self.unary(Op::Ln, f64::ln)
    }

    pub fn max_scalar(self, s: f64) -> Tx<'a> {
        self.unary(Op::MaxScalar(s), |x| x.max(s))
    }

    pub fn clip(self, lo: f64, hi: f64) -> Tx<'a> {
        self.unary(Op::Clip(lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Tx<'a> {
        let v = k::broadcast_to(&self.value(), shape);
        self.tape.push(Op::BroadcastTo(shape.to_vec()), vec![self.id], v)
    }

    pub fn sum_to(self, shape: &[usize]) -> Tx<'a> {
        let v = k::reduce_sum_to(&self.value(), shape);
        self.tape.push(Op::ReduceSumTo(shape.to_vec()), vec![self.id], v)
    }

    pub fn sum_all(self) -> Tx<'a> {
        self.sum_to(&[1])
    }

    /// Multiply by a constant scalar.
    pub fn scale(self, c: f64) -> Tx<'a> {
        self * self.tape.scalar(c)
    }

    pub fn mean_all(self) -> Tx<'a> {
        let n = self.value().len() as f64;
        self.sum_all() * self.tape.scalar(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Tx<'a> {
        let v = self
            .value()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.tape.push(Op::Reshape, vec![self.id], v)
    }

    pub fn conv2d(self, w: Tx<'a>, pad: usize) -> Tx<'a> {
        let v = k::conv2d(&self.value(), &w.value(), pad);
        self.tape.push(Op::Conv2d { pad }, vec![self.id, w.id], v)
    }

    pub fn conv2d_transpose(self, w: Tx<'a>, pad: usize, out_hw: (usize, usize)) -> Tx<'a> {
        let v = k::conv2d_transpose(&self.value(), &w.value(), pad, out_hw);
        self.tape
            .push(Op::ConvT2d { pad, out_hw }, vec![self.id, w.id], v)
    }

    pub fn conv2d_wgrad(self, gy: Tx<'a>, pad: usize, kshape: [usize; 4]) -> Tx<'a> {
        let v = k::conv2d_wgrad(&self.value(), &gy.value(), pad, kshape);
        self.tape
            .push(Op::ConvWGrad { pad, kshape }, vec![self.id, gy.id], v)
    }

    pub fn maxpool2(self) -> Tx<'a> {
        let (v, idx) = k::maxpool2(&self.value());
        self.tape
            .push(Op::MaxPool2 { idx: Arc::new(idx) }, vec![self.id], v)
    }

    fn max_unpool2(self, idx: Arc<Vec<u32>>, in_hw: (usize, usize)) -> Tx<'a> {
        let v = k::max_unpool2(&self.value(), &idx, in_hw);
        self.tape.push(Op::MaxUnpool2 { idx }, vec![self.id], v)
    }

    fn pool_gather(self, idx: Arc<Vec<u32>>, out_hw: (usize, usize)) -> Tx<'a> {
        let v = k::pool_gather(&self.value(), &idx, out_hw);
        self.tape.push(Op::PoolGather { idx }, vec![self.id], v)
    }

    /// Global average pooling (N,C,H,W) -> (N,C,1,1), built from reductions.
    pub fn global_avg_pool(self) -> Tx<'a> {
        let sh = self.shape();
        assert_eq!(sh.len(), 4, "global_avg_pool expects NCHW");
        let inv = 1.0 / ((sh[2] * sh[3]) as f64);
        self.sum_to(&[sh[0], sh[1], 1, 1]) * self.tape.scalar(inv)
    }

    pub fn resize(self, hw: (usize, usize)) -> Tx<'a> {
        let v = k::resize_bilinear(&self.value(), hw);
        self.tape.push(Op::Resize { hw }, vec![self.id], v)
    }

    fn resize_adjoint(self, hw: (usize, usize)) -> Tx<'a> {
        let v = k::resize_bilinear_adjoint(&self.value(), hw);
        self.tape.push(Op::ResizeT { hw }, vec![self.id], v)
    }

    pub fn pad_zero(self, top: usize, left: usize, out_hw: (usize, usize)) -> Tx<'a> {
        let v = k::pad_zero(&self.value(), top, left, out_hw);
        self.tape.push(Op::PadZero { top, left }, vec![self.id], v)
    }

    pub fn crop_win(self, top: usize, left: usize, hw: (usize, usize)) -> Tx<'a> {
        let v = k::crop_win(&self.value(), top, left, hw);
        self.tape.push(Op::CropWin { top, left }, vec![self.id], v)
    }

    /// Numerically stable row softmax for (N,K). The per-row max is treated
    /// as a constant shift, which leaves both the value and the gradient of
    /// softmax unchanged.
    pub fn softmax_rows(self) -> Tx<'a> {
        let sh = self.shape();
        assert_eq!(sh.len(), 2, "softmax_rows expects (N,K)");
        let maxes = {
            let v = self.value();
            let mut m = ArrayD::<f64>::zeros(IxDyn(&[sh[0], 1]));
            for i in 0..sh[0] {
                let mut best = f64::NEG_INFINITY;
                for j in 0..sh[1] {
                    best = best.max(v[[i, j]]);
                }
                m[[i, 0]] = best;
            }
            m
        };
        let shift = self - self.tape.leaf(maxes);
        let e = shift.exp();
        let z = e.sum_to(&[sh[0], 1]);
        e / z
    }
}

macro_rules! impl_bin {
    ($trait:ident, $fn:ident, $op:expr, $f:expr) => {
        impl<'a> std::ops::$trait for Tx<'a> {
            type Output = Tx<'a>;
            fn $fn(self, rhs: Tx<'a>) -> Tx<'a> {
                self.binary(rhs, $op, $f)
            }
        }
    };
}

impl_bin!(Add, add, Op::Add, |a, b| a + b);
impl_bin!(Sub, sub, Op::Sub, |a, b| a - b);
impl_bin!(Mul, mul, Op::Mul, |a, b| a * b);
impl_bin!(Div, div, Op::Div, |a, b| a / b);

impl<'a> std::ops::Neg for Tx<'a> {
    type Output = Tx<'a>;
    fn neg(self) -> Tx<'a> {
        self.unary(Op::Neg, |x| -x)
    }
}

fn mask_of(x: &ArrayD<f64>, f: impl Fn(f64) -> bool) -> ArrayD<f64> {
    x.mapv(|v| if f(v) { 1.0 } else { 0.0 })
}

/// Adjoints of node `nid` with respect to its inputs, given output cotangent `g`.
fn backward<'a>(tape: &'a Tape, nid: usize, g: Tx<'a>) -> Vec<Option<Tx<'a>>> {
    let (op, inputs) = {
        let nodes = tape.nodes.borrow();
        (nodes[nid].op.clone(), nodes[nid].inputs.clone())
    };
    let tx = |id: usize| Tx { tape, id };
    let out = tx(nid);
    match op {
        Op::Leaf => vec![],
        Op::Add => {
            let (a, b) = (tx(inputs[0]), tx(inputs[1]));
            vec![Some(g.sum_to(&a.shape())), Some(g.sum_to(&b.shape()))]
        }
        Op::Sub => {
            let (a, b) = (tx(inputs[0]), tx(inputs[1]));
            vec![Some(g.sum_to(&a.shape())), Some((-g).sum_to(&b.shape()))]
        }
        Op::Mul => {
            let (a, b) = (tx(inputs[0]), tx(inputs[1]));
            vec![Some((g * b).sum_to(&a.shape())), Some((g * a).sum_to(&b.shape()))]
        }
        Op::Div => {
            let (a, b) = (tx(inputs[0]), tx(inputs[1]));
            vec![
                Some((g / b).sum_to(&a.shape())),
                Some((-(g * out) / b).sum_to(&b.shape())),
            ]
        }
        Op::Neg => vec![Some(-g)],
        Op::Abs => {
            let a = tx(inputs[0]);
            let mv = a.value().mapv(|v| {
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            });
            let m = tape.leaf(mv);
            vec![Some(g * m)]
        }
        Op::Sign => vec![None],
        Op::Arctan => {
            let a = tx(inputs[0]);
            let one = tape.scalar(1.0);
            vec![Some(g / (one + a * a))]
        }
        Op::Sin => vec![Some(g * tx(inputs[0]).cos())],
        Op::Cos => vec![Some(-(g * tx(inputs[0]).sin()))],
        Op::Exp => vec![Some(g * out)],
        Op::Ln => vec![Some(g / tx(inputs[0]))],
        Op::MaxScalar(s) => {
            let mv = mask_of(&tx(inputs[0]).value(), |v| v > s);
            let m = tape.leaf(mv);
            vec![Some(g * m)]
        }
        Op::Clip(lo, hi) => {
            let mv = mask_of(&tx(inputs[0]).value(), |v| v >= lo && v <= hi);
            let m = tape.leaf(mv);
            vec![Some(g * m)]
        }
        Op::BroadcastTo(_) => vec![Some(g.sum_to(&tx(inputs[0]).shape()))],
        Op::ReduceSumTo(_) => vec![Some(g.broadcast_to(&tx(inputs[0]).shape()))],
        Op::Reshape => vec![Some(g.reshape(&tx(inputs[0]).shape()))],
        Op::Conv2d { pad } => {
            let (x, w) = (tx(inputs[0]), tx(inputs[1]));
            let xs = x.shape();
            let ws = w.shape();
            vec![
                Some(g.conv2d_transpose(w, pad, (xs[2], xs[3]))),
                Some(x.conv2d_wgrad(g, pad, [ws[0], ws[1], ws[2], ws[3]])),
            ]
        }
        Op::ConvT2d { pad, .. } => {
            let (a, w) = (tx(inputs[0]), tx(inputs[1]));
            let ws = w.shape();
            vec![
                Some(g.conv2d(w, pad)),
                Some(g.conv2d_wgrad(a, pad, [ws[0], ws[1], ws[2], ws[3]])),
            ]
        }
        Op::ConvWGrad { pad, .. } => {
            let (x, gy) = (tx(inputs[0]), tx(inputs[1]));
            let xs = x.shape();
            vec![
                Some(gy.conv2d_transpose(g, pad, (xs[2], xs[3]))),
                Some(x.conv2d(g, pad)),
            ]
        }
        Op::MaxPool2 { idx } => {
            let xs = tx(inputs[0]).shape();
            vec![Some(g.max_unpool2(idx, (xs[2], xs[3])))]
        }
        Op::MaxUnpool2 { idx } => {
            let ps = tx(inputs[0]).shape();
            vec![Some(g.pool_gather(idx, (ps[2], ps[3])))]
        }
        Op::PoolGather { idx } => {
            let xs = tx(inputs[0]).shape();
            vec![Some(g.max_unpool2(idx, (xs[2], xs[3])))]
        }
        Op::Resize { .. } => {
            let xs = tx(inputs[0]).shape();
            vec![Some(g.resize_adjoint((xs[2], xs[3])))]
        }
        Op::ResizeT { .. } => {
            let xs = tx(inputs[0]).shape();
            vec![Some(g.resize((xs[2], xs[3])))]
        }
        Op::PadZero { top, left } => {
            let xs = tx(inputs[0]).shape();
            vec![Some(g.crop_win(top, left, (xs[2], xs[3])))]
        }
        Op::CropWin { top, left } => {
            let xs = tx(inputs[0]).shape();
            let (h, w) = (xs[2], xs[3]);
            vec![Some(g.pad_zero(top, left, (h, w)))]
        }
    }
}

/// Reverse-mode gradients of `y` (summed over its elements if non-scalar)
/// with respect to each of `xs`. The adjoint computation is recorded on the
/// same tape, so the returned handles can be differentiated again.
pub fn grad<'a>(y: Tx<'a>, xs: &[Tx<'a>]) -> Vec<Option<Tx<'a>>> {
    let tape = y.tape;
    let n = tape.len();
    let mut adj: Vec<Option<usize>> = vec![None; n];
    let seed = tape.leaf(ArrayD::from_elem(IxDyn(&y.shape()), 1.0));
    adj[y.id] = Some(seed.id);
    for i in (0..n).rev() {
        let Some(gid) = adj[i] else { continue };
        let has_inputs = !tape.nodes.borrow()[i].inputs.is_empty();
        if !has_inputs {
            continue;
        }
        let g = Tx { tape, id: gid };
        let contribs = backward(tape, i, g);
        let inputs = tape.nodes.borrow()[i].inputs.clone();
        for (inp, c) in inputs.iter().zip(contribs) {
            if let Some(c) = c {
                adj[*inp] = Some(match adj[*inp] {
                    None => c.id,
                    Some(e) => (Tx { tape, id: e } + c).id,
                });
            }
        }
    }
    xs.iter()
        .map(|x| adj[x.id].map(|id| Tx { tape, id }))
        .collect()
}
