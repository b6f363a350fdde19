//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation whose inputs depend on a registered
//! leaf. Operations between plain values are evaluated eagerly and not
//! recorded, so constants (ground truths, masks, sampling grids) cost
//! nothing at backward time. [`Tape::backward`] consumes the tape and walks
//! the recorded nodes once, in reverse topological order.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims};
use crate::tensor::{NodeRef, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// A saved operand: data plus, when the operand was itself on the tape, the
/// node that produced it.
struct Input {
    node: Option<usize>,
    data: Arc<Vec<f64>>,
}

enum Op {
    Leaf,
    Add { a: Input, b: Input },
    Sub { a: Input, b: Input },
    Mul { a: Input, b: Input },
    Maximum { a: Input, b: Input },
    AddScalar { a: Input },
    MulScalar { a: Input, factor: f64 },
    Relu { a: Input },
    Abs { a: Input },
    Sum { a: Input },
    Mean { a: Input },
    Reshape { a: Input },
    ConcatChannels { parts: Vec<Input> },
    MaxPool2 { a: Input, argmax: Vec<u32> },
    Conv2d { input: Input, kernel: Input, bias: Input, dims: ConvDims },
    GridSample { input: Input, grid: Arc<Vec<f64>>, c: usize, in_h: usize, in_w: usize },
}

struct Node {
    op: Op,
}

/// Recording tape. Single-threaded by design; create one per training step.
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a differentiable leaf holding a copy-on-write view of
    /// `value`'s data. Gradients for the returned tensor are available from
    /// [`Gradients::get`] after backward.
    pub fn leaf(&self, value: &Tensor) -> Tensor {
        let index = self.push(Op::Leaf);
        Tensor::from_parts(
            value.shape().to_vec(),
            value.data_arc(),
            Some(NodeRef { tape: self.id, index }),
            true,
        )
    }

    fn push(&self, op: Op) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op });
        nodes.len() - 1
    }

    fn operand(&self, t: &Tensor, op: &'static str) -> Result<Input> {
        match t.node {
            Some(nr) if nr.tape != self.id => Err(Error::shape(op, "tensor was recorded on a different tape")),
            node => Ok(Input {
                node: node.map(|n| n.index),
                data: t.data_arc(),
            }),
        }
    }

    /// Wraps freshly computed data, recording `op` only when the value
    /// depends on the tape.
    fn emit(&self, shape: Vec<usize>, data: Vec<f64>, tracked: bool, op: Op) -> Tensor {
        if tracked {
            let index = self.push(op);
            Tensor::from_parts(shape, Arc::new(data), Some(NodeRef { tape: self.id, index }), true)
        } else {
            Tensor::from_parts(shape, Arc::new(data), None, false)
        }
    }

    fn check_same_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        Ok(())
    }

    fn binary(
        &self,
        a: &Tensor,
        b: &Tensor,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(Input, Input) -> Op,
    ) -> Result<Tensor> {
        Self::check_same_shape(a, b, op_name)?;
        let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let tracked = a.is_on_tape() || b.is_on_tape();
        let (ia, ib) = (self.operand(a, op_name)?, self.operand(b, op_name)?);
        Ok(self.emit(a.shape().to_vec(), data, tracked, make(ia, ib)))
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, "sub", |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    /// Elementwise maximum; ties route the gradient to the first argument.
    pub fn maximum(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, "maximum", f64::max, |a, b| Op::Maximum { a, b })
    }

    fn unary(
        &self,
        a: &Tensor,
        op_name: &'static str,
        f: impl Fn(f64) -> f64,
        make: impl FnOnce(Input) -> Op,
    ) -> Result<Tensor> {
        let data: Vec<f64> = a.data().iter().map(|&x| f(x)).collect();
        let tracked = a.is_on_tape();
        let ia = self.operand(a, op_name)?;
        Ok(self.emit(a.shape().to_vec(), data, tracked, make(ia)))
    }

    pub fn add_scalar(&self, a: &Tensor, s: f64) -> Result<Tensor> {
        self.unary(a, "add_scalar", |x| x + s, |a| Op::AddScalar { a })
    }

    pub fn mul_scalar(&self, a: &Tensor, s: f64) -> Result<Tensor> {
        self.unary(a, "mul_scalar", |x| x * s, |a| Op::MulScalar { a, factor: s })
    }

    pub fn relu(&self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, "relu", |x| x.max(0.0), |a| Op::Relu { a })
    }

    /// d|x|/dx is taken as 0 at x == 0.
    pub fn abs(&self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, "abs", f64::abs, |a| Op::Abs { a })
    }

    pub fn sum(&self, a: &Tensor) -> Result<Tensor> {
        let total: f64 = a.data().iter().sum();
        let tracked = a.is_on_tape();
        let ia = self.operand(a, "sum")?;
        Ok(self.emit(vec![1], vec![total], tracked, Op::Sum { a: ia }))
    }

    pub fn mean(&self, a: &Tensor) -> Result<Tensor> {
        if a.numel() == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let total: f64 = a.data().iter().sum();
        let value = total / a.numel() as f64;
        let tracked = a.is_on_tape();
        let ia = self.operand(a, "mean")?;
        Ok(self.emit(vec![1], vec![value], tracked, Op::Mean { a: ia }))
    }

    pub fn reshape(&self, a: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != a.numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", a.shape(), shape),
            ));
        }
        let tracked = a.is_on_tape();
        let ia = self.operand(a, "reshape")?;
        Ok(self.emit(shape, a.data().to_vec(), tracked, Op::Reshape { a: ia }))
    }

    /// Concatenates `[C_i, H, W]` tensors along the channel axis.
    pub fn concat_channels(&self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::shape("concat_channels", "no inputs"));
        }
        let first = parts[0].shape();
        if first.len() != 3 {
            return Err(Error::shape("concat_channels", format!("want rank 3, got {:?}", first)));
        }
        let (h, w) = (first[1], first[2]);
        let mut channels = 0;
        for p in parts {
            let s = p.shape();
            if s.len() != 3 || s[1] != h || s[2] != w {
                return Err(Error::shape(
                    "concat_channels",
                    format!("incompatible part shape {:?}, want [_, {}, {}]", s, h, w),
                ));
            }
            channels += s[0];
        }
        let mut data = Vec::with_capacity(channels * h * w);
        for p in parts {
            data.extend_from_slice(p.data());
        }
        let tracked = parts.iter().any(|p| p.is_on_tape());
        let inputs = parts
            .iter()
            .map(|p| self.operand(p, "concat_channels"))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.emit(vec![channels, h, w], data, tracked, Op::ConcatChannels { parts: inputs }))
    }

    /// 2x2 max pooling with stride 2 over `[C, H, W]`; H and W must be even.
    pub fn max_pool2(&self, a: &Tensor) -> Result<Tensor> {
        let s = a.shape();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::shape(
                "max_pool2",
                format!("want [C, even H, even W], got {:?}", s),
            ));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (data, argmax) = kernels::maxpool2_forward(a.data(), c, h, w);
        let tracked = a.is_on_tape();
        let ia = self.operand(a, "max_pool2")?;
        Ok(self.emit(vec![c, h / 2, w / 2], data, tracked, Op::MaxPool2 { a: ia, argmax }))
    }

    /// Stride-1 zero-padded "same" convolution: input `[C_in, H, W]`, kernel
    /// `[C_out, C_in, kh, kw]` with odd kh/kw, bias `[C_out]`.
    pub fn conv2d(&self, input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let is = input.shape();
        let ks = kernel.shape();
        if is.len() != 3 || ks.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("want input rank 3 and kernel rank 4, got {:?} and {:?}", is, ks),
            ));
        }
        if ks[1] != is[0] {
            return Err(Error::shape(
                "conv2d",
                format!("kernel expects {} input channels, input has {}", ks[1], is[0]),
            ));
        }
        if ks[2] % 2 == 0 || ks[3] % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel size must be odd, got {}x{}", ks[2], ks[3])));
        }
        if bias.shape() != [ks[0]] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?} does not match {} output channels", bias.shape(), ks[0]),
            ));
        }
        let dims = ConvDims { c_in: is[0], c_out: ks[0], h: is[1], w: is[2], kh: ks[2], kw: ks[3] };
        let data = kernels::conv2d_forward(input.data(), kernel.data(), bias.data(), dims);
        let tracked = input.is_on_tape() || kernel.is_on_tape() || bias.is_on_tape();
        let (ii, ik, ib) = (
            self.operand(input, "conv2d")?,
            self.operand(kernel, "conv2d")?,
            self.operand(bias, "conv2d")?,
        );
        Ok(self.emit(
            vec![dims.c_out, dims.h, dims.w],
            data,
            tracked,
            Op::Conv2d { input: ii, kernel: ik, bias: ib, dims },
        ))
    }

    /// Bilinear sampling of `[C, H, W]` at `grid` `[Hg, Wg, 2]` (row, col)
    /// pixel coordinates, zero outside the source. The grid is treated as a
    /// non-differentiable constant; gradients flow to the input only.
    pub fn grid_sample(&self, input: &Tensor, grid: &Tensor) -> Result<Tensor> {
        let is = input.shape();
        let gs = grid.shape();
        if is.len() != 3 || gs.len() != 3 || gs[2] != 2 {
            return Err(Error::shape(
                "grid_sample",
                format!("want input [C,H,W] and grid [Hg,Wg,2], got {:?} and {:?}", is, gs),
            ));
        }
        let (c, h, w) = (is[0], is[1], is[2]);
        let (oh, ow) = (gs[0], gs[1]);
        let data = kernels::grid_sample_forward(input.data(), c, h, w, grid.data(), oh, ow);
        let tracked = input.is_on_tape();
        let ii = self.operand(input, "grid_sample")?;
        Ok(self.emit(
            vec![c, oh, ow],
            data,
            tracked,
            Op::GridSample { input: ii, grid: grid.data_arc(), c, in_h: h, in_w: w },
        ))
    }

    /// Propagates gradients from the scalar `root` back to every leaf,
    /// consuming the tape.
    pub fn backward(self, root: &Tensor) -> Result<Gradients> {
        let root_index = match root.node {
            Some(nr) if nr.tape == self.id => nr.index,
            Some(_) => return Err(Error::shape("backward", "root was recorded on a different tape")),
            None => return Err(Error::shape("backward", "root is not on the tape")),
        };
        if root.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be a scalar, got shape {:?}", root.shape()),
            ));
        }
        let nodes = self.nodes.into_inner();
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root_index] = Some(vec![1.0]);

        for index in (0..nodes.len()).rev() {
            if grads[index].is_none() {
                continue;
            }
            // Inputs always precede their consumers, so the split is safe.
            let (upstream, rest) = grads.split_at_mut(index);
            let g = rest[0].as_ref().expect("grad present");
            match &nodes[index].op {
                Op::Leaf => {}
                Op::Add { a, b } => {
                    accumulate(upstream, a, g.len(), |acc| add_assign(acc, g));
                    accumulate(upstream, b, g.len(), |acc| add_assign(acc, g));
                }
                Op::Sub { a, b } => {
                    accumulate(upstream, a, g.len(), |acc| add_assign(acc, g));
                    accumulate(upstream, b, g.len(), |acc| {
                        for (x, &gv) in acc.iter_mut().zip(g) {
                            *x -= gv;
                        }
                    });
                }
                Op::Mul { a, b } => {
                    let (da, db) = (a.data.clone(), b.data.clone());
                    accumulate(upstream, a, g.len(), |acc| {
                        for ((x, &gv), &bv) in acc.iter_mut().zip(g).zip(db.iter()) {
                            *x += gv * bv;
                        }
                    });
                    accumulate(upstream, b, g.len(), |acc| {
                        for ((x, &gv), &av) in acc.iter_mut().zip(g).zip(da.iter()) {
                            *x += gv * av;
                        }
                    });
                }
                Op::Maximum { a, b } => {
                    let (da, db) = (a.data.clone(), b.data.clone());
                    accumulate(upstream, a, g.len(), |acc| {
                        for i in 0..acc.len() {
                            if da[i] >= db[i] {
                                acc[i] += g[i];
                            }
                        }
                    });
                    accumulate(upstream, b, g.len(), |acc| {
                        for i in 0..acc.len() {
                            if da[i] < db[i] {
                                acc[i] += g[i];
                            }
                        }
                    });
                }
                Op::AddScalar { a } | Op::Reshape { a } => {
                    accumulate(upstream, a, g.len(), |acc| add_assign(acc, g));
                }
                Op::MulScalar { a, factor } => {
                    accumulate(upstream, a, g.len(), |acc| {
                        for (x, &gv) in acc.iter_mut().zip(g) {
                            *x += factor * gv;
                        }
                    });
                }
                Op::Relu { a } => {
                    let da = a.data.clone();
                    accumulate(upstream, a, g.len(), |acc| {
                        for i in 0..acc.len() {
                            if da[i] > 0.0 {
                                acc[i] += g[i];
                            }
                        }
                    });
                }
                Op::Abs { a } => {
                    let da = a.data.clone();
                    accumulate(upstream, a, g.len(), |acc| {
                        for i in 0..acc.len() {
                            acc[i] += g[i] * da[i].signum() * (da[i] != 0.0) as u8 as f64;
                        }
                    });
                }
                Op::Sum { a } => {
                    let gv = g[0];
                    accumulate(upstream, a, a.data.len(), |acc| {
                        for x in acc.iter_mut() {
                            *x += gv;
                        }
                    });
                }
                Op::Mean { a } => {
                    let gv = g[0] / a.data.len() as f64;
                    accumulate(upstream, a, a.data.len(), |acc| {
                        for x in acc.iter_mut() {
                            *x += gv;
                        }
                    });
                }
                Op::ConcatChannels { parts } => {
                    let mut offset = 0;
                    for p in parts {
                        let len = p.data.len();
                        let slice = &g[offset..offset + len];
                        accumulate(upstream, p, len, |acc| add_assign(acc, slice));
                        offset += len;
                    }
                }
                Op::MaxPool2 { a, argmax } => {
                    let gin = kernels::maxpool2_backward(g, argmax, a.data.len());
                    accumulate(upstream, a, gin.len(), |acc| add_assign(acc, &gin));
                }
                Op::Conv2d { input, kernel, bias, dims } => {
                    if input.node.is_some() {
                        let gin = kernels::conv2d_backward_input(g, &kernel.data, *dims);
                        accumulate(upstream, input, gin.len(), |acc| add_assign(acc, &gin));
                    }
                    if kernel.node.is_some() || bias.node.is_some() {
                        let (gk, gb) = kernels::conv2d_backward_kernel(g, &input.data, *dims);
                        accumulate(upstream, kernel, gk.len(), |acc| add_assign(acc, &gk));
                        accumulate(upstream, bias, gb.len(), |acc| add_assign(acc, &gb));
                    }
                }
                Op::GridSample { input, grid, c, in_h, in_w } => {
                    let out_plane = g.len() / c;
                    debug_assert_eq!(out_plane * 2, grid.len());
                    let (oh, ow) = (out_plane, 1); // grid cells iterate flat; shape split is irrelevant
                    let gin =
                        kernels::grid_sample_backward_input(g, *c, *in_h, *in_w, grid, oh, ow);
                    accumulate(upstream, input, gin.len(), |acc| add_assign(acc, &gin));
                }
            }
        }

        Ok(Gradients { tape: self.id, grads })
    }
}

fn add_assign(acc: &mut [f64], src: &[f64]) {
    for (x, &s) in acc.iter_mut().zip(src) {
        *x += s;
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], input: &Input, len: usize, write: impl FnOnce(&mut [f64])) {
    let Some(node) = input.node else { return };
    let slot = grads[node].get_or_insert_with(|| vec![0.0; len]);
    write(slot);
}

/// Gradients for the leaves of a consumed tape.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the backward root w.r.t. `t`, or `None` if `t` does not
    /// influence the root (mathematically a zero gradient).
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        let nr = t.node?;
        if nr.tape != self.tape {
            return None;
        }
        self.grads[nr.index].as_deref()
    }

    /// Gradient as a tensor of the same shape, zeros when unreached.
    pub fn grad_of(&self, t: &Tensor) -> Tensor {
        match self.get(t) {
            Some(g) => Tensor::new(t.shape().to_vec(), g.to_vec()).expect("shape matches"),
            None => Tensor::zeros(t.shape().to_vec()),
        }
    }
}
