use super::ops::{
    conv2d_backward, conv2d_forward, pool2d_backward, pool2d_forward, ConvGeom, PoolGeom, PoolKind,
};
use super::{ParamId, ParamStore, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        input: NodeId,
        weight: ParamId,
        bias: Option<ParamId>,
        geom: ConvGeom,
    },
    Pool {
        input: NodeId,
        kind: PoolKind,
        geom: PoolGeom,
        argmax: Vec<u32>,
    },
    Dense {
        input: NodeId,
        weight: ParamId,
        bias: Option<ParamId>,
    },
    Concat {
        inputs: Vec<NodeId>,
    },
    Add {
        inputs: Vec<NodeId>,
    },
    Crop {
        input: NodeId,
        top: usize,
        left: usize,
    },
    Reshape {
        input: NodeId,
    },
    ScaledTanh {
        input: NodeId,
        /// `(hi - lo) / 2 * (1 - tanh^2)` per element.
        slope: Vec<f64>,
    },
    Dot {
        input: NodeId,
        coeffs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records one forward pass so it can be differentiated once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of the loss with respect to every node that required one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, node: NodeId) -> Option<&[f64]> {
        self.grads[node.0].as_deref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Constant input; no gradient is tracked for it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient is reported by [`Tape::backward`].
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn conv2d(
        &mut self,
        store: &ParamStore,
        input: NodeId,
        weight: ParamId,
        bias: Option<ParamId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (out, geom) = conv2d_forward(
            self.value(input),
            store.value(weight),
            bias.map(|b| store.value(b)),
            stride,
            pad,
        )?;
        Ok(self.push(
            out,
            Op::Conv {
                input,
                weight,
                bias,
                geom,
            },
            true,
        ))
    }

    pub fn pool2d(
        &mut self,
        input: NodeId,
        kind: PoolKind,
        window: usize,
        stride: usize,
    ) -> Result<NodeId> {
        let x = self.value(input);
        let geom = PoolGeom::new(x.shape(), window, stride)?;
        let (data, argmax) = pool2d_forward(x, kind, &geom);
        let shape = vec![x.shape()[0], x.shape()[1], geom.ho, geom.wo];
        let rg = self.needs(input);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Pool {
                input,
                kind,
                geom,
                argmax,
            },
            rg,
        ))
    }

    /// `x W + b` with `x: [N, F]`, `W: [F, D]`, `b: [D]`.
    pub fn dense(
        &mut self,
        store: &ParamStore,
        input: NodeId,
        weight: ParamId,
        bias: Option<ParamId>,
    ) -> Result<NodeId> {
        let x = self.value(input);
        let w = store.value(weight);
        if x.shape().len() != 2 || w.shape().len() != 2 || x.shape()[1] != w.shape()[0] {
            return Err(TensorError::shape(
                "dense",
                format!("input {:?} against weights {:?}", x.shape(), w.shape()),
            ));
        }
        let (n, f, d) = (x.shape()[0], x.shape()[1], w.shape()[1]);
        let mut out = vec![0.0; n * d];
        let beta = match bias {
            Some(b) => {
                let b = store.value(b);
                if b.shape() != [d] {
                    return Err(TensorError::shape(
                        "dense",
                        format!("bias {:?} against output width {}", b.shape(), d),
                    ));
                }
                for row in out.chunks_mut(d) {
                    row.copy_from_slice(b.data());
                }
                1.0
            }
            None => 0.0,
        };
        super::gemm::gemm(
            super::gemm::Mat::new(x.data(), n, f),
            super::gemm::Mat::new(w.data(), f, d),
            beta,
            &mut out,
        );
        Ok(self.push(
            Tensor::new(vec![n, d], out)?,
            Op::Dense {
                input,
                weight,
                bias,
            },
            true,
        ))
    }

    /// Concatenates NCHW tensors along the channel axis, in argument order.
    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let first = self
            .nodes
            .get(inputs.first().ok_or(TensorError::shape("concat", "no inputs"))?.0)
            .map(|n| n.value.shape().to_vec())
            .unwrap_or_default();
        if first.len() != 4 {
            return Err(TensorError::shape("concat", format!("expected 4-D, got {:?}", first)));
        }
        let (n, h, w) = (first[0], first[2], first[3]);
        let mut channels = 0;
        for &id in inputs {
            let s = self.value(id).shape();
            if s.len() != 4 || s[0] != n || s[2] != h || s[3] != w {
                return Err(TensorError::shape(
                    "concat",
                    format!("{:?} does not match {:?} outside the channel axis", s, first),
                ));
            }
            channels += s[1];
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * channels * plane);
        for i in 0..n {
            for &id in inputs {
                let t = self.value(id);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[i * c * plane..(i + 1) * c * plane]);
            }
        }
        let rg = inputs.iter().any(|&id| self.needs(id));
        Ok(self.push(
            Tensor::new(vec![n, channels, h, w], out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn add(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let first = *inputs.first().ok_or(TensorError::shape("add", "no inputs"))?;
        let shape = self.value(first).shape().to_vec();
        let mut out = self.value(first).data().to_vec();
        for &id in &inputs[1..] {
            let t = self.value(id);
            if t.shape() != shape.as_slice() {
                return Err(TensorError::shape(
                    "add",
                    format!("{:?} does not match {:?}", t.shape(), shape),
                ));
            }
            out.iter_mut().zip(t.data()).for_each(|(o, v)| *o += v);
        }
        let rg = inputs.iter().any(|&id| self.needs(id));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Add {
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    /// Center crop of the spatial axes to `h x w`.
    pub fn center_crop(&mut self, input: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let x = self.value(input);
        let s = x.shape();
        if s.len() != 4 || s[2] < h || s[3] < w {
            return Err(TensorError::shape(
                "center_crop",
                format!("cannot crop {:?} to {}x{}", s, h, w),
            ));
        }
        let (planes, ih, iw) = (s[0] * s[1], s[2], s[3]);
        let top = (ih - h) / 2;
        let left = (iw - w) / 2;
        let mut out = Vec::with_capacity(planes * h * w);
        for p in 0..planes {
            for r in 0..h {
                let start = p * ih * iw + (top + r) * iw + left;
                out.extend_from_slice(&x.data()[start..start + w]);
            }
        }
        let shape = vec![s[0], s[1], h, w];
        let rg = self.needs(input);
        Ok(self.push(Tensor::new(shape, out)?, Op::Crop { input, top, left }, rg))
    }

    /// Flattens everything after the batch axis.
    pub fn flatten(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let n = x.shape().first().copied().unwrap_or(1);
        let f = if n == 0 { 0 } else { x.len() / n };
        let out = x.clone().reshape(vec![n, f]).expect("flatten keeps element count");
        let rg = self.needs(input);
        self.push(out, Op::Reshape { input }, rg)
    }

    /// `lo + (hi - lo) * (tanh(z) + 1) / 2` along the last axis of `[N, D]`.
    pub fn scaled_tanh(&mut self, input: NodeId, lo: &[f64], hi: &[f64]) -> Result<NodeId> {
        let x = self.value(input);
        let s = x.shape();
        if s.len() != 2 || s[1] != lo.len() || lo.len() != hi.len() {
            return Err(TensorError::shape(
                "scaled_tanh",
                format!("input {:?} against {} / {} bounds", s, lo.len(), hi.len()),
            ));
        }
        let d = s[1];
        let mut out = Vec::with_capacity(x.len());
        let mut slope = Vec::with_capacity(x.len());
        for (i, &z) in x.data().iter().enumerate() {
            let j = i % d;
            let t = z.tanh();
            let half = 0.5 * (hi[j] - lo[j]);
            out.push(lo[j] + half * (t + 1.0));
            slope.push(half * (1.0 - t * t));
        }
        let shape = s.to_vec();
        let rg = self.needs(input);
        Ok(self.push(Tensor::new(shape, out)?, Op::ScaledTanh { input, slope }, rg))
    }

    /// Scalar `sum_i coeffs_i * x_i`.
    pub fn dot_const(&mut self, input: NodeId, coeffs: Vec<f64>) -> Result<NodeId> {
        let x = self.value(input);
        if x.len() != coeffs.len() {
            return Err(TensorError::shape(
                "dot",
                format!("{} coefficients against {:?}", coeffs.len(), x.shape()),
            ));
        }
        let v: f64 = x.data().iter().zip(&coeffs).map(|(a, b)| a * b).sum();
        let rg = self.needs(input);
        Ok(self.push(Tensor::scalar(v), Op::Dot { input, coeffs }, rg))
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let n = self.value(input).len();
        self.dot_const(input, vec![1.0; n]).expect("coefficient count matches")
    }

    /// Reverse pass from a scalar node. Parameter gradients are accumulated
    /// into `store`; gradients of variable leaves are returned.
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::State("backward already ran on this tape"));
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Op::Leaf = node.op {
                grads[idx] = Some(dy);
                continue;
            }
            self.propagate(node, &dy, &mut grads, store);
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        node: &Node,
        dy: &[f64],
        grads: &mut [Option<Vec<f64>>],
        store: &mut ParamStore,
    ) {
        let nodes = &self.nodes;

        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                input,
                weight,
                bias,
                geom,
            } => {
                let x = self.value(*input).data();
                let mut db = bias.map(|b| vec![0.0; store.value(b).len()]);
                {
                    let (w, dw) = store.value_and_grad_mut(*weight);
                    conv2d_backward(
                        geom,
                        x,
                        w.data(),
                        dy,
                        grad_slot(nodes, grads, *input).map(|v| v.as_mut_slice()),
                        dw,
                        db.as_deref_mut(),
                    );
                }
                if let (Some(b), Some(db)) = (bias, db) {
                    store
                        .grad_mut(*b)
                        .iter_mut()
                        .zip(db)
                        .for_each(|(g, d)| *g += d);
                }
            }
            Op::Pool {
                input,
                kind,
                geom,
                argmax,
            } => {
                if let Some(dx) = grad_slot(nodes, grads, *input) {
                    pool2d_backward(*kind, geom, argmax, dy, dx);
                }
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                use super::gemm::{gemm, Mat};
                let x = self.value(*input);
                let (n, f) = (x.shape()[0], x.shape()[1]);
                let d = dy.len() / n.max(1);
                gemm(
                    Mat::new(x.data(), n, f).t(),
                    Mat::new(dy, n, d),
                    1.0,
                    store.grad_mut(*weight),
                );
                if let Some(b) = bias {
                    let db = store.grad_mut(*b);
                    for row in dy.chunks(d) {
                        db.iter_mut().zip(row).for_each(|(g, v)| *g += v);
                    }
                }
                if let Some(dx) = grad_slot(nodes, grads, *input) {
                    let w = store.value(*weight).data();
                    gemm(Mat::new(dy, n, d), Mat::new(w, f, d).t(), 1.0, dx);
                }
            }
            Op::Concat { inputs } => {
                let s = node.value.shape();
                let (n, plane) = (s[0], s[2] * s[3]);
                let total = s[1];
                let mut offset = 0;
                for &id in inputs {
                    let c = self.value(id).shape()[1];
                    if let Some(dx) = grad_slot(nodes, grads, id) {
                        for i in 0..n {
                            let src = &dy[(i * total + offset) * plane..(i * total + offset + c) * plane];
                            dx[i * c * plane..(i + 1) * c * plane]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(g, v)| *g += v);
                        }
                    }
                    offset += c;
                }
            }
            Op::Add { inputs } => {
                for &id in inputs {
                    if let Some(dx) = grad_slot(nodes, grads, id) {
                        dx.iter_mut().zip(dy).for_each(|(g, v)| *g += v);
                    }
                }
            }
            Op::Crop { input, top, left } => {
                let s = node.value.shape();
                let (h, w) = (s[2], s[3]);
                let is = self.value(*input).shape();
                let (ih, iw) = (is[2], is[3]);
                if let Some(dx) = grad_slot(nodes, grads, *input) {
                    for p in 0..s[0] * s[1] {
                        for r in 0..h {
                            let dst = p * ih * iw + (top + r) * iw + left;
                            let src = (p * h + r) * w;
                            dx[dst..dst + w]
                                .iter_mut()
                                .zip(&dy[src..src + w])
                                .for_each(|(g, v)| *g += v);
                        }
                    }
                }
            }
            Op::Reshape { input } => {
                if let Some(dx) = grad_slot(nodes, grads, *input) {
                    dx.iter_mut().zip(dy).for_each(|(g, v)| *g += v);
                }
            }
            Op::ScaledTanh { input, slope } => {
                if let Some(dx) = grad_slot(nodes, grads, *input) {
                    for ((g, d), s) in dx.iter_mut().zip(dy).zip(slope) {
                        *g += d * s;
                    }
                }
            }
            Op::Dot { input, coeffs } => {
                let d = dy[0];
                if let Some(dx) = grad_slot(nodes, grads, *input) {
                    dx.iter_mut().zip(coeffs).for_each(|(g, c)| *g += d * c);
                }
            }
        }
    }
}

fn grad_slot<'g>(
    nodes: &[Node],
    grads: &'g mut [Option<Vec<f64>>],
    id: NodeId,
) -> Option<&'g mut Vec<f64>> {
    if !nodes[id.0].requires_grad {
        return None;
    }
    let len = nodes[id.0].value.len();
    Some(grads[id.0].get_or_insert_with(|| vec![0.0; len]))
}
