//! Reverse-mode automatic differentiation over a flat tape.
//!
//! The tape records exactly the primitives the mini U-Net needs. Nodes are
//! appended in topological order (inputs always precede their consumers), so
//! forward replay is a single in-order pass and backward a single reverse
//! pass. All kernels use fixed loop order so results are bit-reproducible
//! across runs.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Elementwise / structural primitives exposed through `apply_primitive`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrimitiveKind {
    Relu,
    Add,
    ConcatChannels,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv3d {
        pad: [[usize; 2]; 3],
        stride: [usize; 3],
    },
    BiasAdd,
    Relu,
    Add,
    Mul,
    ConcatChannels,
    MaxPool2d {
        // flat input index feeding each output element, refreshed on replay
        argmax: Vec<usize>,
    },
    Upsample2dNearest,
    SoftmaxChannels,
    ClampMin {
        floor: f64,
    },
    Ln,
    Sum,
    Scale {
        factor: f64,
    },
    MeanZ,
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// Per-parameter gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient w.r.t. a node, if the node received one. Every parameter of
    /// the graph is populated (zeros when disconnected from the loss).
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

/// Tape of operations with stored forward values.
///
/// Single-writer: one thread builds and differentiates a graph. Tensors taken
/// out of it are plain values and may be shared freely.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Number of nodes currently on the tape.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf node ids marked trainable.
    pub fn parameters(&self) -> &[NodeId] {
        &self.params
    }

    /// Inserts a constant leaf (inputs, label weights, ...).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], value)
    }

    /// Inserts a trainable leaf.
    pub fn parameter(&mut self, value: Tensor) -> NodeId {
        let id = self.push(Op::Leaf, vec![], value);
        self.params.push(id);
        id
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Replaces the value of a leaf, keeping its shape. Downstream values are
    /// stale until [`Graph::recompute`] runs.
    pub fn set_leaf(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::Contract("set_leaf target is not a leaf".into()));
        }
        if node.value.shape() != value.shape() {
            return Err(Error::dimension(
                "shape",
                format!(
                    "leaf shape {:?} cannot change to {:?}",
                    node.value.shape(),
                    value.shape()
                ),
            ));
        }
        node.value = value;
        Ok(())
    }

    /// Re-evaluates every non-leaf node in insertion order.
    pub fn recompute(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let inputs: Vec<Tensor> = self.nodes[i]
                .inputs
                .iter()
                .map(|id| self.nodes[id.0].value.clone())
                .collect();
            let refs: Vec<&Tensor> = inputs.iter().collect();
            let value = eval(&mut self.nodes[i].op, &refs)?;
            self.nodes[i].value = value;
        }
        Ok(())
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        debug_assert!(value.all_finite(), "non-finite forward value");
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, inputs, value });
        id
    }

    fn apply(&mut self, mut op: Op, inputs: Vec<NodeId>) -> Result<NodeId> {
        for id in &inputs {
            if id.0 >= self.nodes.len() {
                return Err(Error::Contract(format!("node id {} out of range", id.0)));
            }
        }
        let tensors: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let value = eval(&mut op, &tensors)?;
        Ok(self.push(op, inputs, value))
    }

    /// 3D convolution over (Z,H,W,Cin) with kernel (kz,ky,kx,Cin,Cout),
    /// zero padding given per spatial axis as (low, high) pairs.
    pub fn conv3d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        pad: [[usize; 2]; 3],
        stride: [usize; 3],
    ) -> Result<NodeId> {
        self.apply(Op::Conv3d { pad, stride }, vec![input, kernel])
    }

    /// Adds a per-channel bias vector (C,) over the last axis.
    pub fn bias_add(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        self.apply(Op::BiasAdd, vec![input, bias])
    }

    /// Dispatches the named elementwise/structural primitive.
    pub fn apply_primitive(&mut self, kind: PrimitiveKind, inputs: &[NodeId]) -> Result<NodeId> {
        match kind {
            PrimitiveKind::Relu => {
                if inputs.len() != 1 {
                    return Err(Error::Contract("relu takes one input".into()));
                }
                self.relu(inputs[0])
            }
            PrimitiveKind::Add => {
                if inputs.len() != 2 {
                    return Err(Error::Contract("add takes two inputs".into()));
                }
                self.add(inputs[0], inputs[1])
            }
            PrimitiveKind::ConcatChannels => {
                if inputs.len() != 2 {
                    return Err(Error::Contract("concat_channels takes two inputs".into()));
                }
                self.concat_channels(inputs[0], inputs[1])
            }
        }
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu, vec![input])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, vec![a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul, vec![a, b])
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::ConcatChannels, vec![a, b])
    }

    /// 2x2 max pooling with stride 2 over the (H, W) axes of a
    /// (..., H, W, C) tensor. Ties route the gradient to the lowest flat
    /// input index.
    pub fn maxpool2d(&mut self, input: NodeId) -> Result<NodeId> {
        self.apply(Op::MaxPool2d { argmax: Vec::new() }, vec![input])
    }

    /// Nearest-neighbour upsampling replicating each pixel into a 2x2 block.
    pub fn upsample2d_nearest(&mut self, input: NodeId) -> Result<NodeId> {
        self.apply(Op::Upsample2dNearest, vec![input])
    }

    /// Stable softmax over the channel (last) axis.
    pub fn softmax_channels(&mut self, input: NodeId) -> Result<NodeId> {
        self.apply(Op::SoftmaxChannels, vec![input])
    }

    /// Elementwise `max(x, floor)`.
    pub fn clamp_min(&mut self, input: NodeId, floor: f64) -> Result<NodeId> {
        self.apply(Op::ClampMin { floor }, vec![input])
    }

    /// Elementwise natural logarithm.
    pub fn ln(&mut self, input: NodeId) -> Result<NodeId> {
        self.apply(Op::Ln, vec![input])
    }

    /// Sum of all elements; yields a scalar node.
    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        self.apply(Op::Sum, vec![input])
    }

    /// Multiplication by a compile-time constant.
    pub fn scale(&mut self, input: NodeId, factor: f64) -> Result<NodeId> {
        self.apply(Op::Scale { factor }, vec![input])
    }

    /// Mean over the leading (z) axis; (Z, ...) -> (1, ...).
    pub fn mean_z(&mut self, input: NodeId) -> Result<NodeId> {
        self.apply(Op::MeanZ, vec![input])
    }

    /// Exact reverse-mode gradients of a scalar loss node.
    ///
    /// Every parameter receives a gradient tensor; parameters with no path to
    /// the loss get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("loss node id out of range".into()));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "loss node must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(self.nodes[loss.0].value.shape(), 1.0));

        for i in (0..self.nodes.len()).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !matches!(node.op, Op::Leaf) {
                let input_values: Vec<&Tensor> =
                    node.inputs.iter().map(|id| &self.nodes[id.0].value).collect();
                let input_grads = backward_op(&node.op, &input_values, &node.value, &gout);
                for (slot, grad) in node.inputs.iter().zip(input_grads) {
                    match &mut grads[slot.0] {
                        Some(existing) => {
                            let dst = existing.data_mut();
                            for (d, s) in dst.iter_mut().zip(grad.data()) {
                                *d += s;
                            }
                        }
                        empty => *empty = Some(grad),
                    }
                }
            }
            grads[i] = Some(gout);
        }

        for &p in &self.params {
            if grads[p.0].is_none() {
                grads[p.0] = Some(Tensor::zeros(self.nodes[p.0].value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    /// Compares analytic gradients of `loss` w.r.t. `parameter` against
    /// central finite differences and returns the max relative error
    /// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
    pub fn gradient_check(&mut self, parameter: NodeId, loss: NodeId, eps: f64) -> Result<f64> {
        if !(eps > 0.0) {
            return Err(Error::Contract(format!("eps must be positive, got {eps}")));
        }
        if !self.params.contains(&parameter) {
            return Err(Error::Contract("gradient_check target is not a parameter".into()));
        }
        let analytic = {
            let grads = self.backward(loss)?;
            grads.wrt(parameter).expect("parameter gradient").clone()
        };
        let original = self.value(parameter).clone();
        let mut max_rel = 0.0f64;
        for i in 0..original.numel() {
            let mut plus = original.clone();
            plus.data_mut()[i] += eps;
            self.set_leaf(parameter, plus)?;
            self.recompute()?;
            let lp = self.value(loss).item()?;

            let mut minus = original.clone();
            minus.data_mut()[i] -= eps;
            self.set_leaf(parameter, minus)?;
            self.recompute()?;
            let lm = self.value(loss).item()?;

            let numeric = (lp - lm) / (2.0 * eps);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            max_rel = max_rel.max(rel);
        }
        self.set_leaf(parameter, original)?;
        self.recompute()?;
        Ok(max_rel)
    }
}

fn eval(op: &mut Op, inputs: &[&Tensor]) -> Result<Tensor> {
    let out = match op {
        Op::Leaf => return Err(Error::Contract("cannot evaluate a leaf".into())),
        Op::Conv3d { pad, stride } => conv3d_forward(inputs[0], inputs[1], *pad, *stride)?,
        Op::BiasAdd => bias_add_forward(inputs[0], inputs[1])?,
        Op::Relu => {
            let mut t = inputs[0].clone();
            for v in t.data_mut() {
                *v = v.max(0.0);
            }
            t
        }
        Op::Add => {
            require_same_shape(inputs[0], inputs[1], "add")?;
            let mut t = inputs[0].clone();
            for (d, s) in t.data_mut().iter_mut().zip(inputs[1].data()) {
                *d += s;
            }
            t
        }
        Op::Mul => {
            require_same_shape(inputs[0], inputs[1], "mul")?;
            let mut t = inputs[0].clone();
            for (d, s) in t.data_mut().iter_mut().zip(inputs[1].data()) {
                *d *= s;
            }
            t
        }
        Op::ConcatChannels => concat_forward(inputs[0], inputs[1])?,
        Op::MaxPool2d { argmax } => {
            let (out, idx) = maxpool_forward(inputs[0])?;
            *argmax = idx;
            out
        }
        Op::Upsample2dNearest => upsample_forward(inputs[0])?,
        Op::SoftmaxChannels => softmax_forward(inputs[0])?,
        Op::ClampMin { floor } => {
            let mut t = inputs[0].clone();
            let lo = *floor;
            for v in t.data_mut() {
                *v = v.max(lo);
            }
            t
        }
        Op::Ln => {
            let mut t = inputs[0].clone();
            for v in t.data_mut() {
                *v = v.ln();
            }
            t
        }
        Op::Sum => Tensor::scalar(inputs[0].data().iter().sum()),
        Op::Scale { factor } => {
            let mut t = inputs[0].clone();
            for v in t.data_mut() {
                *v *= *factor;
            }
            t
        }
        Op::MeanZ => mean_z_forward(inputs[0])?,
    };
    debug_assert!(out.all_finite(), "non-finite value out of {op:?}");
    Ok(out)
}

fn backward_op(op: &Op, inputs: &[&Tensor], output: &Tensor, gout: &Tensor) -> Vec<Tensor> {
    match op {
        Op::Leaf => vec![],
        Op::Conv3d { pad, stride } => conv3d_backward(inputs[0], inputs[1], *pad, *stride, gout),
        Op::BiasAdd => {
            let dx = gout.clone();
            let c = *inputs[1].shape().last().unwrap();
            let mut db = Tensor::zeros(inputs[1].shape());
            for (i, g) in gout.data().iter().enumerate() {
                db.data_mut()[i % c] += g;
            }
            vec![dx, db]
        }
        Op::Relu => {
            let mut dx = gout.clone();
            for (d, x) in dx.data_mut().iter_mut().zip(inputs[0].data()) {
                if *x <= 0.0 {
                    *d = 0.0;
                }
            }
            vec![dx]
        }
        Op::Add => vec![gout.clone(), gout.clone()],
        Op::Mul => {
            let mut da = gout.clone();
            for (d, b) in da.data_mut().iter_mut().zip(inputs[1].data()) {
                *d *= b;
            }
            let mut db = gout.clone();
            for (d, a) in db.data_mut().iter_mut().zip(inputs[0].data()) {
                *d *= a;
            }
            vec![da, db]
        }
        Op::ConcatChannels => concat_backward(inputs[0], inputs[1], gout),
        Op::MaxPool2d { argmax } => {
            let mut dx = Tensor::zeros(inputs[0].shape());
            for (out_i, &in_i) in argmax.iter().enumerate() {
                dx.data_mut()[in_i] += gout.data()[out_i];
            }
            vec![dx]
        }
        Op::Upsample2dNearest => vec![upsample_backward(inputs[0], gout)],
        Op::SoftmaxChannels => vec![softmax_backward(output, gout)],
        Op::ClampMin { floor } => {
            let mut dx = gout.clone();
            for (d, x) in dx.data_mut().iter_mut().zip(inputs[0].data()) {
                if *x <= *floor {
                    *d = 0.0;
                }
            }
            vec![dx]
        }
        Op::Ln => {
            let mut dx = gout.clone();
            for (d, x) in dx.data_mut().iter_mut().zip(inputs[0].data()) {
                *d /= x;
            }
            vec![dx]
        }
        Op::Sum => vec![Tensor::filled(inputs[0].shape(), gout.data()[0])],
        Op::Scale { factor } => {
            let mut dx = gout.clone();
            for d in dx.data_mut() {
                *d *= *factor;
            }
            vec![dx]
        }
        Op::MeanZ => {
            let z = inputs[0].shape()[0] as f64;
            let inner = gout.numel();
            let mut dx = Tensor::zeros(inputs[0].shape());
            for (i, d) in dx.data_mut().iter_mut().enumerate() {
                *d = gout.data()[i % inner] / z;
            }
            vec![dx]
        }
    }
}

fn require_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dimension(
            "shape",
            format!("{what} requires equal shapes, got {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn conv3d_forward(
    input: &Tensor,
    kernel: &Tensor,
    pad: [[usize; 2]; 3],
    stride: [usize; 3],
) -> Result<Tensor> {
    let (dims, kd) = conv_check(input, kernel, pad, stride)?;
    let [z, h, w, ci] = dims;
    let [kz, ky, kx, _, co] = kd;
    let oz = (z + pad[0][0] + pad[0][1] - kz) / stride[0] + 1;
    let oy = (h + pad[1][0] + pad[1][1] - ky) / stride[1] + 1;
    let ox = (w + pad[2][0] + pad[2][1] - kx) / stride[2] + 1;

    let xv = input.data();
    let kv = kernel.data();
    let mut out = vec![0.0f64; oz * oy * ox * co];
    let mut acc = vec![0.0f64; co];
    for zo in 0..oz {
        for yo in 0..oy {
            for xo in 0..ox {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for dz in 0..kz {
                    let zi = (zo * stride[0] + dz) as isize - pad[0][0] as isize;
                    if zi < 0 || zi >= z as isize {
                        continue;
                    }
                    for dy in 0..ky {
                        let yi = (yo * stride[1] + dy) as isize - pad[1][0] as isize;
                        if yi < 0 || yi >= h as isize {
                            continue;
                        }
                        for dx in 0..kx {
                            let xi = (xo * stride[2] + dx) as isize - pad[2][0] as isize;
                            if xi < 0 || xi >= w as isize {
                                continue;
                            }
                            let in_base =
                                (((zi as usize * h + yi as usize) * w + xi as usize)) * ci;
                            let k_base = ((dz * ky + dy) * kx + dx) * ci * co;
                            for c_in in 0..ci {
                                let a = xv[in_base + c_in];
                                let krow = &kv[k_base + c_in * co..k_base + (c_in + 1) * co];
                                for (ac, k) in acc.iter_mut().zip(krow) {
                                    *ac += a * k;
                                }
                            }
                        }
                    }
                }
                let o_base = ((zo * oy + yo) * ox + xo) * co;
                out[o_base..o_base + co].copy_from_slice(&acc);
            }
        }
    }
    Tensor::new(vec![oz, oy, ox, co], out)
}

fn conv3d_backward(
    input: &Tensor,
    kernel: &Tensor,
    pad: [[usize; 2]; 3],
    stride: [usize; 3],
    gout: &Tensor,
) -> Vec<Tensor> {
    let [z, h, w, ci] = [
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    ];
    let ks = kernel.shape();
    let [kz, ky, kx, co] = [ks[0], ks[1], ks[2], ks[4]];
    let os = gout.shape();
    let [oz, oy, ox] = [os[0], os[1], os[2]];

    let xv = input.data();
    let kv = kernel.data();
    let gv = gout.data();
    let mut dx = Tensor::zeros(input.shape());
    let mut dk = Tensor::zeros(kernel.shape());
    let dxv = dx.data_mut();
    let dkv = dk.data_mut();

    for zo in 0..oz {
        for yo in 0..oy {
            for xo in 0..ox {
                let g_base = ((zo * oy + yo) * ox + xo) * co;
                let g = &gv[g_base..g_base + co];
                for dz in 0..kz {
                    let zi = (zo * stride[0] + dz) as isize - pad[0][0] as isize;
                    if zi < 0 || zi >= z as isize {
                        continue;
                    }
                    for dy in 0..ky {
                        let yi = (yo * stride[1] + dy) as isize - pad[1][0] as isize;
                        if yi < 0 || yi >= h as isize {
                            continue;
                        }
                        for dx_k in 0..kx {
                            let xi = (xo * stride[2] + dx_k) as isize - pad[2][0] as isize;
                            if xi < 0 || xi >= w as isize {
                                continue;
                            }
                            let in_base =
                                (((zi as usize * h + yi as usize) * w + xi as usize)) * ci;
                            let k_base = ((dz * ky + dy) * kx + dx_k) * ci * co;
                            for c_in in 0..ci {
                                let a = xv[in_base + c_in];
                                let kk = k_base + c_in * co;
                                let mut s = 0.0;
                                for (c_out, gvv) in g.iter().enumerate() {
                                    s += kv[kk + c_out] * gvv;
                                    dkv[kk + c_out] += a * gvv;
                                }
                                dxv[in_base + c_in] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    vec![dx, dk]
}

fn conv_check(
    input: &Tensor,
    kernel: &Tensor,
    pad: [[usize; 2]; 3],
    stride: [usize; 3],
) -> Result<([usize; 4], [usize; 5])> {
    if input.shape().len() != 4 {
        return Err(Error::dimension(
            "input",
            format!("conv3d input must be (Z,H,W,Cin), got {:?}", input.shape()),
        ));
    }
    if kernel.shape().len() != 5 {
        return Err(Error::dimension(
            "kernel",
            format!("conv3d kernel must be (kz,ky,kx,Cin,Cout), got {:?}", kernel.shape()),
        ));
    }
    let dims = [
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    ];
    let kd = [
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
        kernel.shape()[4],
    ];
    if kd[3] != dims[3] {
        return Err(Error::dimension(
            "channel",
            format!("kernel expects {} input channels, input has {}", kd[3], dims[3]),
        ));
    }
    for (axis, name) in ["z", "y", "x"].iter().enumerate() {
        if stride[axis] == 0 {
            return Err(Error::dimension(*name, "stride must be positive"));
        }
        let padded = dims[axis] + pad[axis][0] + pad[axis][1];
        if kd[axis] > padded {
            return Err(Error::dimension(
                *name,
                format!(
                    "kernel extent {} exceeds padded input extent {}",
                    kd[axis], padded
                ),
            ));
        }
    }
    Ok((dims, kd))
}

fn bias_add_forward(input: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = *input.shape().last().unwrap();
    if bias.shape() != [c] {
        return Err(Error::dimension(
            "channel",
            format!("bias shape {:?} does not match {} channels", bias.shape(), c),
        ));
    }
    let mut out = input.clone();
    let bv = bias.data();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v += bv[i % c];
    }
    Ok(out)
}

fn concat_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
        return Err(Error::dimension(
            "shape",
            format!("concat_channels requires equal spatial shapes, got {sa:?} and {sb:?}"),
        ));
    }
    let ca = sa[sa.len() - 1];
    let cb = sb[sb.len() - 1];
    let pixels = a.numel() / ca;
    let mut shape = sa.to_vec();
    *shape.last_mut().unwrap() = ca + cb;
    let mut out = vec![0.0; pixels * (ca + cb)];
    for p in 0..pixels {
        out[p * (ca + cb)..p * (ca + cb) + ca].copy_from_slice(&a.data()[p * ca..(p + 1) * ca]);
        out[p * (ca + cb) + ca..(p + 1) * (ca + cb)]
            .copy_from_slice(&b.data()[p * cb..(p + 1) * cb]);
    }
    Tensor::new(shape, out)
}

fn concat_backward(a: &Tensor, b: &Tensor, gout: &Tensor) -> Vec<Tensor> {
    let ca = *a.shape().last().unwrap();
    let cb = *b.shape().last().unwrap();
    let pixels = a.numel() / ca;
    let mut da = Tensor::zeros(a.shape());
    let mut db = Tensor::zeros(b.shape());
    for p in 0..pixels {
        da.data_mut()[p * ca..(p + 1) * ca]
            .copy_from_slice(&gout.data()[p * (ca + cb)..p * (ca + cb) + ca]);
        db.data_mut()[p * cb..(p + 1) * cb]
            .copy_from_slice(&gout.data()[p * (ca + cb) + ca..(p + 1) * (ca + cb)]);
    }
    vec![da, db]
}

fn pool_dims(input: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let s = input.shape();
    if s.len() < 3 {
        return Err(Error::dimension(
            "shape",
            format!("pooling needs (..., H, W, C), got {s:?}"),
        ));
    }
    let c = s[s.len() - 1];
    let w = s[s.len() - 2];
    let h = s[s.len() - 3];
    let lead: usize = s[..s.len() - 3].iter().product();
    Ok((lead, h, w, c))
}

fn maxpool_forward(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (lead, h, w, c) = pool_dims(input)?;
    if h % 2 != 0 {
        return Err(Error::dimension("y", format!("height {h} is odd")));
    }
    if w % 2 != 0 {
        return Err(Error::dimension("x", format!("width {w} is odd")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut shape = input.shape().to_vec();
    let n = shape.len();
    shape[n - 3] = oh;
    shape[n - 2] = ow;
    let xv = input.data();
    let mut out = vec![0.0; lead * oh * ow * c];
    let mut argmax = vec![0usize; out.len()];
    for l in 0..lead {
        for yo in 0..oh {
            for xo in 0..ow {
                for ch in 0..c {
                    let mut best_i = ((l * h + 2 * yo) * w + 2 * xo) * c + ch;
                    let mut best = xv[best_i];
                    for iy in 0..2 {
                        for ix in 0..2 {
                            let i = ((l * h + 2 * yo + iy) * w + 2 * xo + ix) * c + ch;
                            if xv[i] > best {
                                best = xv[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = ((l * oh + yo) * ow + xo) * c + ch;
                    out[o] = best;
                    argmax[o] = best_i;
                }
            }
        }
    }
    Ok((Tensor::new(shape, out)?, argmax))
}

fn upsample_forward(input: &Tensor) -> Result<Tensor> {
    let (lead, h, w, c) = pool_dims(input)?;
    let mut shape = input.shape().to_vec();
    let n = shape.len();
    shape[n - 3] = h * 2;
    shape[n - 2] = w * 2;
    let xv = input.data();
    let mut out = vec![0.0; lead * h * 2 * w * 2 * c];
    for l in 0..lead {
        for y in 0..h {
            for x in 0..w {
                let src = ((l * h + y) * w + x) * c;
                for iy in 0..2 {
                    for ix in 0..2 {
                        let dst = ((l * 2 * h + 2 * y + iy) * 2 * w + 2 * x + ix) * c;
                        out[dst..dst + c].copy_from_slice(&xv[src..src + c]);
                    }
                }
            }
        }
    }
    Tensor::new(shape, out)
}

fn upsample_backward(input: &Tensor, gout: &Tensor) -> Tensor {
    let (lead, h, w, c) = pool_dims(input).expect("validated at forward");
    let mut dx = Tensor::zeros(input.shape());
    let g = gout.data();
    for l in 0..lead {
        for y in 0..h {
            for x in 0..w {
                let src = ((l * h + y) * w + x) * c;
                for iy in 0..2 {
                    for ix in 0..2 {
                        let dst = ((l * 2 * h + 2 * y + iy) * 2 * w + 2 * x + ix) * c;
                        for ch in 0..c {
                            dx.data_mut()[src + ch] += g[dst + ch];
                        }
                    }
                }
            }
        }
    }
    dx
}

fn softmax_forward(input: &Tensor) -> Result<Tensor> {
    let c = *input.shape().last().unwrap();
    if c < 2 {
        return Err(Error::dimension(
            "channel",
            format!("softmax needs at least 2 channels, got {c}"),
        ));
    }
    let mut out = input.clone();
    let data = out.data_mut();
    for px in data.chunks_exact_mut(c) {
        let m = px.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in px.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in px.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

fn softmax_backward(output: &Tensor, gout: &Tensor) -> Tensor {
    let c = *output.shape().last().unwrap();
    let mut dx = Tensor::zeros(output.shape());
    let s = output.data();
    let g = gout.data();
    for p in 0..output.numel() / c {
        let base = p * c;
        let mut dot = 0.0;
        for i in 0..c {
            dot += g[base + i] * s[base + i];
        }
        for i in 0..c {
            dx.data_mut()[base + i] = s[base + i] * (g[base + i] - dot);
        }
    }
    dx
}

fn mean_z_forward(input: &Tensor) -> Result<Tensor> {
    let s = input.shape();
    if s.is_empty() {
        return Err(Error::dimension("z", "mean_z needs a leading axis"));
    }
    let z = s[0];
    let inner: usize = s[1..].iter().product();
    let mut shape = s.to_vec();
    shape[0] = 1;
    let mut out = vec![0.0; inner];
    for zi in 0..z {
        for i in 0..inner {
            out[i] += input.data()[zi * inner + i];
        }
    }
    for v in &mut out {
        *v /= z as f64;
    }
    Tensor::new(shape, out)
}
