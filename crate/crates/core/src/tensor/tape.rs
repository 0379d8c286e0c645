//! Dynamic tape for reverse-mode differentiation over tensor ops.
//!
//! A tape is built per forward pass and dropped after `backward`. Ops are
//! methods on [`Tape`]; each validates shapes, runs the numeric kernel,
//! and (when recording is enabled and an input participates in gradients)
//! pushes a node. The node count doubles as the backprop-memory proxy
//! reported by generation runs.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::Tensor;
use crate::error::{Error, Result};

static TAPE_UID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddConst(usize),
    Matmul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Softmax(usize, usize),
    Sum(usize),
    Mean(usize),
    RowDot(usize, usize),
    MulColBcast(usize, usize),
    AddRowBcast(usize, usize),
    SubBcastScalar(usize, usize),
    DivBcastScalar(usize, usize),
    Sigmoid(usize),
    Tanh(usize),
    Sqrt(usize),
    ClampMin(usize, f64),
    RmsNorm(usize, usize, f64),
    SelectChannel(usize, usize),
    Concat0(Vec<usize>),
    AvgPool2(usize, usize),
    Upsample2(usize),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
}

pub struct Tape {
    uid: u64,
    nodes: RefCell<Vec<Node>>,
    enabled: bool,
    allocs: Cell<usize>,
}

impl Tape {
    /// A recording tape.
    pub fn new() -> Self {
        Tape {
            uid: TAPE_UID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            enabled: true,
            allocs: Cell::new(0),
        }
    }

    /// A tape that never records; every op runs as plain arithmetic and
    /// the allocation counter stays at zero.
    pub fn disabled() -> Self {
        Tape {
            uid: TAPE_UID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            enabled: false,
            allocs: Cell::new(0),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.enabled
    }

    /// Total nodes allocated over this tape's lifetime.
    pub fn alloc_count(&self) -> usize {
        self.allocs.get()
    }

    /// Registers a differentiable leaf (an optimization variable or a
    /// trainable parameter). On a disabled tape this is a no-op clone.
    pub fn leaf(&self, t: &Tensor) -> Tensor {
        if !self.enabled {
            return t.detached();
        }
        let id = self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), true);
        Tensor {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
            tape_ref: Some((self.uid, id)),
            requires_grad: true,
        }
    }

    fn push(&self, op: Op, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
        });
        self.allocs.set(self.allocs.get() + 1);
        nodes.len() - 1
    }

    /// Node id of `t` on this tape, registering a constant leaf if the
    /// value has no recorded history here.
    fn ensure_node(&self, t: &Tensor) -> usize {
        if let Some((uid, id)) = t.tape_ref {
            if uid == self.uid {
                return id;
            }
        }
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), false)
    }

    /// Builds the output tensor for an op, recording it when needed.
    fn output(&self, op_of: impl FnOnce(&dyn Fn(&Tensor) -> usize) -> Op, inputs: &[&Tensor], shape: Vec<usize>, value: Vec<f64>) -> Result<Tensor> {
        if let Some(bad) = value.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("operation produced {bad}")));
        }
        let participates = inputs.iter().any(|t| t.requires_grad);
        if !self.enabled || !participates {
            return Ok(Tensor {
                shape,
                data: value,
                tape_ref: None,
                requires_grad: false,
            });
        }
        let ensure = |t: &Tensor| self.ensure_node(t);
        let op = op_of(&ensure);
        let id = self.push(op, shape.clone(), value.clone(), true);
        Ok(Tensor {
            shape,
            data: value,
            tape_ref: Some((self.uid, id)),
            requires_grad: true,
        })
    }

    // ── elementwise ────────────────────────────────────────────────────

    fn zip(&self, a: &Tensor, b: &Tensor, name: &str, f: impl Fn(f64, f64) -> f64, op: impl Fn(usize, usize) -> Op) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::shape(format!(
                "{name}: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let value: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        self.output(|e| op(e(a), e(b)), &[a, b], a.shape().to_vec(), value)
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip(a, b, "div", |x, y| x / y, Op::Div)
    }

    fn map(&self, a: &Tensor, f: impl Fn(f64) -> f64, op: impl Fn(usize) -> Op) -> Result<Tensor> {
        let value: Vec<f64> = a.data().iter().map(|x| f(*x)).collect();
        self.output(|e| op(e(a)), &[a], a.shape().to_vec(), value)
    }

    pub fn neg(&self, a: &Tensor) -> Result<Tensor> {
        self.map(a, |x| -x, Op::Neg)
    }

    pub fn scale(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        self.map(a, |x| c * x, |i| Op::Scale(i, c))
    }

    pub fn add_const(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        self.map(a, |x| x + c, Op::AddConst)
    }

    pub fn sigmoid(&self, a: &Tensor) -> Result<Tensor> {
        self.map(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid)
    }

    pub fn tanh(&self, a: &Tensor) -> Result<Tensor> {
        self.map(a, f64::tanh, Op::Tanh)
    }

    pub fn sqrt(&self, a: &Tensor) -> Result<Tensor> {
        self.map(a, f64::sqrt, Op::Sqrt)
    }

    pub fn clamp_min(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        self.map(a, |x| x.max(c), |i| Op::ClampMin(i, c))
    }

    // ── linear algebra ─────────────────────────────────────────────────

    /// Standard 2-D matrix product.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.rank() != 2 || b.rank() != 2 {
            return Err(Error::shape(format!(
                "matmul expects rank-2 inputs, got {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let (k2, n) = (b.shape()[0], b.shape()[1]);
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dims: {:?} x {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let value = matmul_raw(a.data(), b.data(), m, k, n);
        self.output(|e| Op::Matmul(e(a), e(b)), &[a, b], vec![m, n], value)
    }

    pub fn transpose(&self, a: &Tensor) -> Result<Tensor> {
        if a.rank() != 2 {
            return Err(Error::shape(format!(
                "transpose expects rank-2, got {:?}",
                a.shape()
            )));
        }
        let (m, n) = (a.shape()[0], a.shape()[1]);
        let value = transpose_raw(a.data(), m, n);
        self.output(|e| Op::Transpose(e(a)), &[a], vec![n, m], value)
    }

    pub fn reshape(&self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != a.numel() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {shape:?}",
                a.shape()
            )));
        }
        self.output(|e| Op::Reshape(e(a)), &[a], shape.to_vec(), a.data().to_vec())
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&self, a: &Tensor, axis: usize) -> Result<Tensor> {
        if axis >= a.rank() {
            return Err(Error::shape(format!(
                "softmax axis {axis} out of range for {:?}",
                a.shape()
            )));
        }
        let value = lane_map(a.data(), a.shape(), axis, |lane, out| {
            let mx = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, v) in out.iter_mut().zip(lane) {
                *o = (v - mx).exp();
                z += *o;
            }
            for o in out.iter_mut() {
                *o /= z;
            }
        });
        self.output(|e| Op::Softmax(e(a), axis), &[a], a.shape().to_vec(), value)
    }

    pub fn sum(&self, a: &Tensor) -> Result<Tensor> {
        let value = vec![a.data().iter().sum()];
        self.output(|e| Op::Sum(e(a)), &[a], vec![], value)
    }

    pub fn mean(&self, a: &Tensor) -> Result<Tensor> {
        let value = vec![a.data().iter().sum::<f64>() / a.numel() as f64];
        self.output(|e| Op::Mean(e(a)), &[a], vec![], value)
    }

    /// Per-row dot product of two [n, d] tensors, yielding [n].
    pub fn row_dot(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.rank() != 2 || a.shape() != b.shape() {
            return Err(Error::shape(format!(
                "row_dot: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let (n, d) = (a.shape()[0], a.shape()[1]);
        let value: Vec<f64> = (0..n)
            .map(|i| {
                a.data()[i * d..(i + 1) * d]
                    .iter()
                    .zip(&b.data()[i * d..(i + 1) * d])
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        self.output(|e| Op::RowDot(e(a), e(b)), &[a, b], vec![n], value)
    }

    /// Scales row i of an [n, d] tensor by v[i].
    pub fn mul_col_bcast(&self, a: &Tensor, v: &Tensor) -> Result<Tensor> {
        if a.rank() != 2 || v.rank() != 1 || v.shape()[0] != a.shape()[0] {
            return Err(Error::shape(format!(
                "mul_col_bcast: {:?} with {:?}",
                a.shape(),
                v.shape()
            )));
        }
        let (n, d) = (a.shape()[0], a.shape()[1]);
        let mut value = a.data().to_vec();
        for i in 0..n {
            let s = v.data()[i];
            for x in &mut value[i * d..(i + 1) * d] {
                *x *= s;
            }
        }
        self.output(|e| Op::MulColBcast(e(a), e(v)), &[a, v], a.shape().to_vec(), value)
    }

    /// Adds a [d] row vector to every row of an [n, d] tensor.
    pub fn add_row_bcast(&self, a: &Tensor, v: &Tensor) -> Result<Tensor> {
        if a.rank() != 2 || v.rank() != 1 || v.shape()[0] != a.shape()[1] {
            return Err(Error::shape(format!(
                "add_row_bcast: {:?} with {:?}",
                a.shape(),
                v.shape()
            )));
        }
        let (n, d) = (a.shape()[0], a.shape()[1]);
        let mut value = a.data().to_vec();
        for i in 0..n {
            for j in 0..d {
                value[i * d + j] += v.data()[j];
            }
        }
        self.output(|e| Op::AddRowBcast(e(a), e(v)), &[a, v], a.shape().to_vec(), value)
    }

    /// x - s for a scalar tensor s.
    pub fn sub_bcast_scalar(&self, a: &Tensor, s: &Tensor) -> Result<Tensor> {
        if s.numel() != 1 {
            return Err(Error::shape("sub_bcast_scalar: scalar operand required"));
        }
        let sv = s.data()[0];
        let value: Vec<f64> = a.data().iter().map(|x| x - sv).collect();
        self.output(|e| Op::SubBcastScalar(e(a), e(s)), &[a, s], a.shape().to_vec(), value)
    }

    /// x / s for a scalar tensor s.
    pub fn div_bcast_scalar(&self, a: &Tensor, s: &Tensor) -> Result<Tensor> {
        if s.numel() != 1 {
            return Err(Error::shape("div_bcast_scalar: scalar operand required"));
        }
        let sv = s.data()[0];
        let value: Vec<f64> = a.data().iter().map(|x| x / sv).collect();
        self.output(|e| Op::DivBcastScalar(e(a), e(s)), &[a, s], a.shape().to_vec(), value)
    }

    /// Per-row RMS normalization of [n, d] with a [d] gain.
    pub fn rms_norm(&self, a: &Tensor, gain: &Tensor, eps: f64) -> Result<Tensor> {
        if a.rank() != 2 || gain.rank() != 1 || gain.shape()[0] != a.shape()[1] {
            return Err(Error::shape(format!(
                "rms_norm: {:?} with gain {:?}",
                a.shape(),
                gain.shape()
            )));
        }
        let (n, d) = (a.shape()[0], a.shape()[1]);
        let mut value = vec![0.0; n * d];
        for i in 0..n {
            let row = &a.data()[i * d..(i + 1) * d];
            let ms = row.iter().map(|x| x * x).sum::<f64>() / d as f64;
            let r = (ms + eps).sqrt();
            for j in 0..d {
                value[i * d + j] = gain.data()[j] * row[j] / r;
            }
        }
        self.output(
            |e| Op::RmsNorm(e(a), e(gain), eps),
            &[a, gain],
            a.shape().to_vec(),
            value,
        )
    }

    /// Extracts channel `c` of a [C, H, W] tensor as [H, W].
    pub fn select_channel(&self, a: &Tensor, c: usize) -> Result<Tensor> {
        if a.rank() != 3 || c >= a.shape()[0] {
            return Err(Error::shape(format!(
                "select_channel {c} of {:?}",
                a.shape()
            )));
        }
        let (h, w) = (a.shape()[1], a.shape()[2]);
        let value = a.data()[c * h * w..(c + 1) * h * w].to_vec();
        self.output(|e| Op::SelectChannel(e(a), c), &[a], vec![h, w], value)
    }

    /// Concatenates equal-shaped tensors along a new-or-leading axis:
    /// scalars become [k]; rank-r inputs of shape S become [k*S0, S1..].
    pub fn concat0(&self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::contract("concat0 of zero tensors"));
        }
        let s0 = parts[0].shape().to_vec();
        if parts.iter().any(|p| p.shape() != s0.as_slice()) {
            return Err(Error::shape("concat0 requires equal shapes"));
        }
        let mut value = Vec::with_capacity(parts[0].numel() * parts.len());
        for p in parts {
            value.extend_from_slice(p.data());
        }
        let shape = if s0.is_empty() {
            vec![parts.len()]
        } else {
            let mut s = s0.clone();
            s[0] *= parts.len();
            s
        };
        self.output(
            |e| Op::Concat0(parts.iter().map(|p| e(p)).collect()),
            parts,
            shape,
            value,
        )
    }

    /// Non-overlapping p×p average pooling of an [H, W] tensor.
    pub fn avg_pool2(&self, a: &Tensor, p: usize) -> Result<Tensor> {
        if a.rank() != 2 {
            return Err(Error::shape(format!("avg_pool2 expects rank-2, got {:?}", a.shape())));
        }
        let (h, w) = (a.shape()[0], a.shape()[1]);
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::contract(format!(
                "avg_pool2: dims {h}x{w} not divisible by patch {p}"
            )));
        }
        let (oh, ow) = (h / p, w / p);
        let mut value = vec![0.0; oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let mut s = 0.0;
                for di in 0..p {
                    for dj in 0..p {
                        s += a.data()[(i * p + di) * w + j * p + dj];
                    }
                }
                value[i * ow + j] = s / (p * p) as f64;
            }
        }
        self.output(|e| Op::AvgPool2(e(a), p), &[a], vec![oh, ow], value)
    }

    /// 2x nearest-neighbor upsampling of a [C, H, W] tensor.
    pub fn upsample2(&self, a: &Tensor) -> Result<Tensor> {
        if a.rank() != 3 {
            return Err(Error::shape(format!("upsample2 expects rank-3, got {:?}", a.shape())));
        }
        let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let mut value = vec![0.0; c * 4 * h * w];
        let (oh, ow) = (2 * h, 2 * w);
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    value[ch * oh * ow + i * ow + j] = a.data()[ch * h * w + (i / 2) * w + j / 2];
                }
            }
        }
        self.output(|e| Op::Upsample2(e(a)), &[a], vec![c, oh, ow], value)
    }

    // ── composites ─────────────────────────────────────────────────────

    /// Sum of squared differences, differentiable in both inputs.
    pub fn sq_l2_distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let d = self.sub(a, b)?;
        let sq = self.mul(&d, &d)?;
        self.sum(&sq)
    }

    /// Mean squared error.
    pub fn mse(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let d = self.sub(a, b)?;
        let sq = self.mul(&d, &d)?;
        self.mean(&sq)
    }

    /// x / ||x||, with a tiny additive floor under the square root so the
    /// zero vector does not produce NaN.
    pub fn l2_normalize(&self, a: &Tensor) -> Result<Tensor> {
        let sq = self.mul(a, a)?;
        let s = self.sum(&sq)?;
        let s = self.add_const(&s, 1e-24)?;
        let norm = self.sqrt(&s)?;
        self.div_bcast_scalar(a, &norm)
    }

    /// matmul plus a broadcast bias row.
    pub fn linear(&self, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let y = self.matmul(x, w)?;
        self.add_row_bcast(&y, b)
    }

    // ── reverse pass ───────────────────────────────────────────────────

    /// Reverse-mode gradients of a scalar loss for every differentiable
    /// leaf. A loss with no recorded history yields an empty map flagged
    /// as detached.
    pub fn backward(&self, loss: &Tensor) -> Result<GradientMap> {
        if loss.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let root = match loss.tape_ref {
            Some((uid, id)) if uid == self.uid => id,
            _ => {
                return Ok(GradientMap {
                    tape_uid: self.uid,
                    grads: HashMap::new(),
                    detached: true,
                })
            }
        };

        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root] = Some(vec![1.0]);

        for id in (0..=root).rev() {
            let go = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(go);
                    continue;
                }
                Op::Add(a, b) => {
                    accum(&mut grads, &nodes, *a, &go, |g| g.to_vec());
                    accum(&mut grads, &nodes, *b, &go, |g| g.to_vec());
                }
                Op::Sub(a, b) => {
                    accum(&mut grads, &nodes, *a, &go, |g| g.to_vec());
                    accum(&mut grads, &nodes, *b, &go, |g| g.iter().map(|x| -x).collect());
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    accum(&mut grads, &nodes, *a, &go, |g| {
                        g.iter().zip(bv).map(|(x, y)| x * y).collect()
                    });
                    accum(&mut grads, &nodes, *b, &go, |g| {
                        g.iter().zip(av).map(|(x, y)| x * y).collect()
                    });
                }
                Op::Div(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    accum(&mut grads, &nodes, *a, &go, |g| {
                        g.iter().zip(bv).map(|(x, y)| x / y).collect()
                    });
                    accum(&mut grads, &nodes, *b, &go, |g| {
                        g.iter()
                            .zip(av.iter().zip(bv))
                            .map(|(x, (a, b))| -x * a / (b * b))
                            .collect()
                    });
                }
                Op::Neg(a) => {
                    accum(&mut grads, &nodes, *a, &go, |g| g.iter().map(|x| -x).collect());
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accum(&mut grads, &nodes, *a, &go, |g| {
                        g.iter().map(|x| c * x).collect()
                    });
                }
                Op::AddConst(a) => {
                    accum(&mut grads, &nodes, *a, &go, |g| g.to_vec());
                }
                Op::Matmul(a, b) => {
                    let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                    let n = nodes[*b].shape[1];
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    accum(&mut grads, &nodes, *a, &go, |g| {
                        matmul_nt_raw(g, bv, m, n, k)
                    });
                    accum(&mut grads, &nodes, *b, &go, |g| {
                        matmul_tn_raw(av, g, m, k, n)
                    });
                }
                Op::Transpose(a) => {
                    let (m, n) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                    accum(&mut grads, &nodes, *a, &go, |g| transpose_raw(g, n, m));
                }
                Op::Reshape(a) => {
                    accum(&mut grads, &nodes, *a, &go, |g| g.to_vec());
                }
                Op::Softmax(a, axis) => {
                    let y = &node.value;
                    let shape = &node.shape;
                    let axis = *axis;
                    accum(&mut grads, &nodes, *a, &go, |g| {
                        softmax_vjp(y, g, shape, axis)
                    });
                }
                Op::Sum(a) => {
                    let n = nodes[*a].value.len();
                    accum(&mut grads, &nodes, *a, &go, |g| vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = nodes[*a].value.len();
                    accum(&mut grads, &nodes, *a, &go, |g| {
                        vec![g[0] / n as f64; n]
                    });
                }
                Op::RowDot(a, b) => {
                    let (n, d) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    accum(&mut grads, &nodes, *a, &go, |g| {
                        row_scale(bv, g, n, d)
                    });
                    accum(&mut grads, &nodes, *b, &go, |g| {
                        row_scale(av, g, n, d)
                    });
                }
                Op::MulColBcast(a, v) => {
                    let (n, d) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                    let (av, vv) = (&nodes[*a].value, &nodes[*v].value);
                    accum(&mut grads, &nodes, *a, &go, |g| row_scale(g, vv, n, d));
                    accum(&mut grads, &nodes, *v, &go, |g| {
                        (0..n)
                            .map(|i| {
                                g[i * d..(i + 1) * d]
                                    .iter()
                                    .zip(&av[i * d..(i + 1) * d])
                                    .map(|(x, y)| x * y)
                                    .sum()
                            })
                            .collect()
                    });
                }
                Op::AddRowBcast(a, v) => {
                    let (n, d) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                    accum(&mut grads, &nodes, *a, &go, |g| g.to_vec());
                    accum(&mut grads, &nodes, *v, &go, |g| {
                        (0..d).map(|j| (0..n).map(|i| g[i * d + j]).sum()).collect()
                    });
                }
                Op::SubBcastScalar(a, s) => {
                    accum(&mut grads, &nodes, *a, &go, |g| g.to_vec());
                    accum(&mut grads, &nodes, *s, &go, |g| {
                        vec![-g.iter().sum::<f64>()]
                    });
                }
                Op::DivBcastScalar(a, s) => {
                    let sv = nodes[*s].value[0];
                    let av = &nodes[*a].value;
                    accum(&mut grads, &nodes, *a, &go, |g| {
                        g.iter().map(|x| x / sv).collect()
                    });
                    accum(&mut grads, &nodes, *s, &go, |g| {
                        vec![-g.iter().zip(av).map(|(x, a)| x * a).sum::<f64>() / (sv * sv)]
                    });
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    accum(&mut grads, &nodes, *a, &go, |g| {
                        g.iter().zip(y).map(|(x, y)| x * y * (1.0 - y)).collect()
                    });
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    accum(&mut grads, &nodes, *a, &go, |g| {
                        g.iter().zip(y).map(|(x, y)| x * (1.0 - y * y)).collect()
                    });
                }
                Op::Sqrt(a) => {
                    let y = &node.value;
                    accum(&mut grads, &nodes, *a, &go, |g| {
                        g.iter().zip(y).map(|(x, y)| x / (2.0 * y)).collect()
                    });
                }
                Op::ClampMin(a, c) => {
                    let av = &nodes[*a].value;
                    let c = *c;
                    accum(&mut grads, &nodes, *a, &go, |g| {
                        g.iter()
                            .zip(av)
                            .map(|(x, a)| if *a > c { *x } else { 0.0 })
                            .collect()
                    });
                }
                Op::RmsNorm(a, gain, eps) => {
                    let (n, d) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                    let (av, gv) = (&nodes[*a].value, &nodes[*gain].value);
                    let eps = *eps;
                    accum(&mut grads, &nodes, *a, &go, |g| {
                        rms_norm_vjp_x(av, gv, g, n, d, eps)
                    });
                    accum(&mut grads, &nodes, *gain, &go, |g| {
                        rms_norm_vjp_gain(av, g, n, d, eps)
                    });
                }
                Op::SelectChannel(a, c) => {
                    let (h, w) = (node.shape[0], node.shape[1]);
                    let total = nodes[*a].value.len();
                    let c = *c;
                    accum(&mut grads, &nodes, *a, &go, |g| {
                        let mut out = vec![0.0; total];
                        out[c * h * w..(c + 1) * h * w].copy_from_slice(g);
                        out
                    });
                }
                Op::Concat0(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = nodes[*p].value.len();
                        let slice = go[offset..offset + len].to_vec();
                        accum(&mut grads, &nodes, *p, &slice, |g| g.to_vec());
                        offset += len;
                    }
                }
                Op::AvgPool2(a, p) => {
                    let (h, w) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                    let p = *p;
                    accum(&mut grads, &nodes, *a, &go, |g| {
                        let ow = w / p;
                        let inv = 1.0 / (p * p) as f64;
                        let mut out = vec![0.0; h * w];
                        for (idx, o) in out.iter_mut().enumerate() {
                            let (i, j) = (idx / w, idx % w);
                            *o = g[(i / p) * ow + j / p] * inv;
                        }
                        out
                    });
                }
                Op::Upsample2(a) => {
                    let (c, h, w) = (
                        nodes[*a].shape[0],
                        nodes[*a].shape[1],
                        nodes[*a].shape[2],
                    );
                    accum(&mut grads, &nodes, *a, &go, |g| {
                        let (oh, ow) = (2 * h, 2 * w);
                        let mut out = vec![0.0; c * h * w];
                        for ch in 0..c {
                            for i in 0..oh {
                                for j in 0..ow {
                                    out[ch * h * w + (i / 2) * w + j / 2] +=
                                        g[ch * oh * ow + i * ow + j];
                                }
                            }
                        }
                        out
                    });
                }
            }
        }

        // Leaves keep their slot; everything else is transient.
        let mut map = HashMap::new();
        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = grads[id]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                map.insert(
                    id,
                    Tensor {
                        shape: node.shape.clone(),
                        data: g,
                        tape_ref: None,
                        requires_grad: false,
                    },
                );
            }
        }
        Ok(GradientMap {
            tape_uid: self.uid,
            grads: map,
            detached: false,
        })
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Gradients keyed by tape node, produced by [`Tape::backward`].
pub struct GradientMap {
    tape_uid: u64,
    grads: HashMap<usize, Tensor>,
    detached: bool,
}

impl GradientMap {
    /// Gradient for a leaf tensor registered on the originating tape.
    pub fn get(&self, leaf: &Tensor) -> Option<&Tensor> {
        match leaf.tape_ref {
            Some((uid, id)) if uid == self.tape_uid => self.grads.get(&id),
            _ => None,
        }
    }

    /// True when the loss had no recorded history (constant loss).
    pub fn is_detached(&self) -> bool {
        self.detached
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn accum(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    target: usize,
    go: &[f64],
    vjp: impl FnOnce(&[f64]) -> Vec<f64>,
) {
    if !nodes[target].requires_grad {
        return;
    }
    let contribution = vjp(go);
    match &mut grads[target] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(&contribution) {
                *e += c;
            }
        }
        slot => *slot = Some(contribution),
    }
}

fn row_scale(m: &[f64], v: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            out[i * d + j] = m[i * d + j] * v[i];
        }
    }
    out
}

fn softmax_vjp(y: &[f64], go: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let mut out = vec![0.0; y.len()];
    for_each_lane(shape, axis, |base, stride, len| {
        let mut s = 0.0;
        for k in 0..len {
            let idx = base + k * stride;
            s += go[idx] * y[idx];
        }
        for k in 0..len {
            let idx = base + k * stride;
            out[idx] = y[idx] * (go[idx] - s);
        }
    });
    out
}

fn rms_norm_vjp_x(x: &[f64], g: &[f64], go: &[f64], n: usize, d: usize, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = (ms + eps).sqrt();
        let r3 = r * r * r;
        let dot: f64 = (0..d).map(|j| go[i * d + j] * g[j] * row[j]).sum();
        for j in 0..d {
            out[i * d + j] = go[i * d + j] * g[j] / r - row[j] * dot / (d as f64 * r3);
        }
    }
    out
}

fn rms_norm_vjp_gain(x: &[f64], go: &[f64], n: usize, d: usize, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = (ms + eps).sqrt();
        for j in 0..d {
            out[j] += go[i * d + j] * row[j] / r;
        }
    }
    out
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aik = a[i * k + p];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += aik * brow[j];
            }
        }
    }
    c
}

/// grad_a = go [m,n] * b^T, with b stored as [k,n].
fn matmul_nt_raw(go: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        for j in 0..n {
            let g = go[i * n + j];
            if g == 0.0 {
                continue;
            }
            let orow = &mut out[i * k..(i + 1) * k];
            for p in 0..k {
                orow[p] += g * b[p * n + j];
            }
        }
    }
    out
}

/// grad_b = a^T [k,m] * go [m,n].
fn matmul_tn_raw(a: &[f64], go: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let grow = &go[i * n..(i + 1) * n];
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * grow[j];
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Applies `f` to every 1-D lane along `axis`, writing into an output
/// buffer of the same shape.
fn lane_map(data: &[f64], shape: &[usize], axis: usize, f: impl Fn(&[f64], &mut [f64])) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for_each_lane(shape, axis, |base, stride, len| {
        let lane: Vec<f64> = (0..len).map(|k| data[base + k * stride]).collect();
        let mut buf = vec![0.0; len];
        f(&lane, &mut buf);
        for k in 0..len {
            out[base + k * stride] = buf[k];
        }
    });
    out
}

fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let len = shape[axis];
    let stride: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let inner = stride;
    let block = len * stride;
    for o in 0..outer.max(1) {
        for i in 0..inner.max(1) {
            f(o * block + i, stride.max(1), len);
        }
    }
}
