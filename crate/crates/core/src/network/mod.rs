//! Genotype to network compilation: `m` stacked cells of width `C`, spatial
//! repair by strided 1x1 projections plus center crop, and a
//! flatten -> dense -> scaled-tanh head emitting candidate solutions.

mod checkpoint;

pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_SCHEMA};

use crate::space::{CellOp, Genotype, PenaltyConfig, ValidityReport, NUM_NODES};
use crate::tensor::{conv_output_size, NodeId, ParamId, ParamStore, PoolKind, Tape, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const INPUT: usize = 0;
const OUTPUT: usize = NUM_NODES - 1;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("invalid genotype (penalty {})", .0.penalty)]
    Invalid(ValidityReport),
    #[error("cell depth exceeds input size: {0}")]
    Collapse(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("bad build configuration: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, NetworkError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildConfig {
    /// Stacked cells `m`.
    pub cells: usize,
    /// Channel width `C` inside cells.
    pub channels: usize,
    /// Solution dimension `D`.
    pub dim: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Fixed inputs per epoch (`NumSol`).
    pub num_sol: usize,
    /// Input side length `n`.
    pub input_size: usize,
}

impl BuildConfig {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        BuildConfig {
            cells: 3,
            channels: 8,
            dim: lower.len(),
            lower,
            upper,
            num_sol: 500,
            input_size: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NetworkError::Config(m.to_string()));
        if self.cells == 0 {
            return bad("cells must be >= 1");
        }
        if self.channels == 0 {
            return bad("channels must be >= 1");
        }
        if self.dim == 0 || self.lower.len() != self.dim || self.upper.len() != self.dim {
            return bad("bounds must have one entry per dimension (D >= 1)");
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| !(l < u)) {
            return bad("every lower bound must be below its upper bound");
        }
        if self.num_sol == 0 || self.input_size == 0 {
            return bad("num_sol and input_size must be >= 1");
        }
        Ok(())
    }
}

/// Problem-independent part of a [`BuildConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetShape {
    pub cells: usize,
    pub channels: usize,
    pub num_sol: usize,
    pub input_size: usize,
}

impl Default for NetShape {
    fn default() -> Self {
        NetShape {
            cells: 3,
            channels: 8,
            num_sol: 500,
            input_size: 32,
        }
    }
}

impl NetShape {
    pub fn config(&self, lower: Vec<f64>, upper: Vec<f64>) -> BuildConfig {
        BuildConfig {
            cells: self.cells,
            channels: self.channels,
            num_sol: self.num_sol,
            input_size: self.input_size,
            ..BuildConfig::new(lower, upper)
        }
    }
}

/// Fixed inputs of shape `[NumSol, C, n, n]`; generated ones have `C = 1`
/// and are uniform in `[0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputBatch {
    seed: u64,
    data: Tensor,
}

impl InputBatch {
    pub fn generate(num_sol: usize, n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..num_sol * n * n).map(|_| rng.random::<f64>()).collect();
        InputBatch {
            seed,
            data: Tensor::new(vec![num_sol, 1, n, n], values).expect("consistent shape"),
        }
    }

    /// Wraps precomputed inputs; `seed` is kept for provenance only.
    pub fn from_tensor(data: Tensor, seed: u64) -> Result<Self> {
        let shape = data.shape();
        if shape.len() != 4 || shape[2] != shape[3] {
            return Err(NetworkError::Config(format!("inputs must be [n, c, s, s], got {shape:?}")));
        }
        Ok(InputBatch { seed, data })
    }

    pub fn for_config(cfg: &BuildConfig, seed: u64) -> Self {
        Self::generate(cfg.num_sol, cfg.input_size, seed)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn side(&self) -> usize {
        self.data.shape()[2]
    }

    /// Samples `start .. start + len` (clamped to the end of the set).
    pub fn slice(&self, start: usize, len: usize) -> Tensor {
        let [_, c, h, w] = self.data.shape().try_into().expect("four-dimensional inputs");
        let end = (start + len).min(self.len());
        let per = c * h * w;
        Tensor::new(
            vec![end - start, c, h, w],
            self.data.data()[start * per..end * per].to_vec(),
        )
        .expect("consistent shape")
    }

    pub fn all(&self) -> &Tensor {
        &self.data
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        weight: ParamId,
        bias: ParamId,
        stride: usize,
        pad: usize,
    },
    Pool {
        kind: PoolKind,
        window: usize,
        stride: usize,
    },
    Add,
    Concat,
    Crop {
        size: usize,
    },
    Flatten,
    Dense {
        weight: ParamId,
        bias: ParamId,
    },
    ScaledTanh,
}

/// One program step; it reads earlier slots and writes the next slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub kind: LayerKind,
    pub inputs: Vec<usize>,
}

/// Layer list for hand-built plain stacks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SeqLayer {
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Pool {
        kind: PoolKind,
        window: usize,
        stride: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub weight: ParamId,
    pub bias: ParamId,
    pub features: usize,
    /// Slot holding the dense output, before the scaled tanh.
    pub pre_activation: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    config: BuildConfig,
    genotype: Option<Genotype>,
    batch_size: usize,
    program: Vec<Layer>,
    /// `[C, H, W]` of every slot; slot 0 is the input.
    shapes: Vec<[usize; 3]>,
    store: ParamStore,
    head: Head,
}

struct Builder {
    program: Vec<Layer>,
    shapes: Vec<[usize; 3]>,
    store: ParamStore,
}

impl Builder {
    fn new(input: [usize; 3]) -> Self {
        Builder {
            program: Vec::new(),
            shapes: vec![input],
            store: ParamStore::new(),
        }
    }

    fn push(&mut self, kind: LayerKind, inputs: Vec<usize>, shape: [usize; 3]) -> usize {
        self.program.push(Layer { kind, inputs });
        self.shapes.push(shape);
        self.shapes.len() - 1
    }

    fn size(&self, slot: usize) -> usize {
        self.shapes[slot][1]
    }

    fn conv(
        &mut self,
        name: &str,
        input: usize,
        filters: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<usize> {
        let [c, h, w] = self.shapes[input];
        let collapse = || {
            NetworkError::Collapse(format!(
                "{name}: {kernel}x{kernel} window (stride {stride}, pad {pad}) on {h}x{w}"
            ))
        };
        let ho = conv_output_size(h, kernel, stride, pad).ok_or_else(collapse)?;
        let wo = conv_output_size(w, kernel, stride, pad).ok_or_else(collapse)?;
        let weight = self
            .store
            .add(format!("{name}.weight"), Tensor::zeros(vec![filters, c, kernel, kernel]));
        let bias = self.store.add(format!("{name}.bias"), Tensor::zeros(vec![filters]));
        Ok(self.push(
            LayerKind::Conv {
                weight,
                bias,
                stride,
                pad,
            },
            vec![input],
            [filters, ho, wo],
        ))
    }

    fn pool(&mut self, name: &str, input: usize, kind: PoolKind, window: usize, stride: usize) -> Result<usize> {
        let [c, h, w] = self.shapes[input];
        let collapse = || NetworkError::Collapse(format!("{name}: {window}x{window} pool on {h}x{w}"));
        let ho = conv_output_size(h, window, stride, 0).ok_or_else(collapse)?;
        let wo = conv_output_size(w, window, stride, 0).ok_or_else(collapse)?;
        Ok(self.push(LayerKind::Pool { kind, window, stride }, vec![input], [c, ho, wo]))
    }

    /// Brings `slot` down to `target` by a strided 1x1 projection (stride
    /// `floor(size / target)`) followed by a center crop.
    fn repair(&mut self, name: &str, slot: usize, target: usize) -> Result<usize> {
        let [c, h, _] = self.shapes[slot];
        if h == target {
            return Ok(slot);
        }
        let stride = h / target;
        let proj = self.conv(name, slot, c, 1, stride, 0)?;
        let size = self.size(proj);
        if size == target {
            return Ok(proj);
        }
        Ok(self.push(LayerKind::Crop { size: target }, vec![proj], [c, target, target]))
    }

    /// Repairs every slot to the smallest spatial size among them.
    fn align(&mut self, prefix: &str, slots: &[(usize, usize)]) -> Result<Vec<usize>> {
        let target = slots.iter().map(|&(_, s)| self.size(s)).min().expect("nonempty");
        slots
            .iter()
            .map(|&(tag, s)| self.repair(&format!("{prefix}.from{tag}.repair"), s, target))
            .collect()
    }

    fn head(&mut self, input: usize, dim: usize) -> Head {
        let [c, h, w] = self.shapes[input];
        let features = c * h * w;
        let flat = self.push(LayerKind::Flatten, vec![input], [features, 1, 1]);
        let weight = self.store.add("head.dense.weight", Tensor::zeros(vec![features, dim]));
        let bias = self.store.add("head.dense.bias", Tensor::zeros(vec![dim]));
        let pre = self.push(LayerKind::Dense { weight, bias }, vec![flat], [dim, 1, 1]);
        self.push(LayerKind::ScaledTanh, vec![pre], [dim, 1, 1]);
        Head {
            weight,
            bias,
            features,
            pre_activation: pre,
        }
    }
}

impl Network {
    /// Compiles a valid genotype. Weights start at zero; call
    /// [`Network::init_weights`] before training.
    pub fn build(genotype: &Genotype, cfg: &BuildConfig) -> Result<Network> {
        cfg.validate()?;
        let graph = genotype.decode();
        let report = graph.validate(&PenaltyConfig::default());
        if !report.is_valid() {
            return Err(NetworkError::Invalid(report));
        }
        let c = cfg.channels;
        let mut b = Builder::new([1, cfg.input_size, cfg.input_size]);
        let mut current = INPUT;
        for cell in 0..cfg.cells {
            let p = format!("cell{cell}");
            let mut x = current;
            if b.shapes[x][0] != c {
                x = b.conv(&format!("{p}.in_proj"), x, c, 1, 1, 0)?;
            }
            let mut out = [None; NUM_NODES];
            out[INPUT] = Some(x);
            for v in 1..OUTPUT {
                if !graph.is_on_path(v) {
                    continue;
                }
                let preds: Vec<(usize, usize)> = graph
                    .predecessors(v)
                    .map(|u| (u, out[u].expect("predecessor on path")))
                    .collect();
                let aligned = b.align(&format!("{p}.n{v}"), &preds)?;
                let summed = if aligned.len() == 1 {
                    aligned[0]
                } else {
                    let shape = b.shapes[aligned[0]];
                    b.push(LayerKind::Add, aligned, shape)
                };
                let name = format!("{p}.n{v}.{}", op_name(graph.op(v)));
                out[v] = Some(match graph.op(v) {
                    CellOp::Conv3x3 => b.conv(&name, summed, c, 3, 1, 0)?,
                    CellOp::MaxPool3x3 => b.pool(&name, summed, PoolKind::Max, 3, 1)?,
                    CellOp::AvgPool3x3 => b.pool(&name, summed, PoolKind::Avg, 3, 1)?,
                });
            }
            let members: Vec<(usize, usize)> = graph
                .predecessors(OUTPUT)
                .map(|u| (u, out[u].expect("predecessor on path")))
                .collect();
            let aligned = b.align(&format!("{p}.out"), &members)?;
            let [_, h, w] = b.shapes[aligned[0]];
            let cat = b.push(LayerKind::Concat, aligned.clone(), [c * aligned.len(), h, w]);
            current = b.conv(&format!("{p}.out.proj"), cat, c, 1, 1, 0)?;
        }
        let head = b.head(current, cfg.dim);
        Ok(Network {
            config: cfg.clone(),
            genotype: Some(*genotype),
            batch_size: genotype.batch().size(),
            program: b.program,
            shapes: b.shapes,
            store: b.store,
            head,
        })
    }

    /// Plain stack of layers on a `[channels, n, n]` input, then the head.
    pub fn sequential(cfg: &BuildConfig, in_channels: usize, layers: &[SeqLayer]) -> Result<Network> {
        cfg.validate()?;
        let mut b = Builder::new([in_channels, cfg.input_size, cfg.input_size]);
        let mut x = INPUT;
        for (k, layer) in layers.iter().enumerate() {
            x = match *layer {
                SeqLayer::Conv {
                    filters,
                    kernel,
                    stride,
                    pad,
                } => b.conv(&format!("layer{k}.conv"), x, filters, kernel, stride, pad)?,
                SeqLayer::Pool { kind, window, stride } => {
                    b.pool(&format!("layer{k}.pool"), x, kind, window, stride)?
                }
            };
        }
        let head = b.head(x, cfg.dim);
        Ok(Network {
            config: cfg.clone(),
            genotype: None,
            batch_size: 1,
            program: b.program,
            shapes: b.shapes,
            store: b.store,
            head,
        })
    }

    /// Glorot-uniform weights, zero biases; resets the optimizer state.
    pub fn init_weights(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<ParamId> = self.store.ids().collect();
        for id in ids {
            let value = glorot(self.store.value(id).shape(), &mut rng);
            self.store.replace(id, value);
        }
        self.store.reset_optimizer();
    }

    pub fn config(&self) -> &BuildConfig {
        &self.config
    }

    pub fn genotype(&self) -> Option<&Genotype> {
        self.genotype.as_ref()
    }

    /// Samples per forward pass (from the genotype's batch gene).
    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn set_batch_size(&mut self, b: usize) {
        assert!(b >= 1);
        self.batch_size = b;
    }

    pub fn program(&self) -> &[Layer] {
        &self.program
    }

    /// Inferred `[C, H, W]` per slot.
    pub fn shapes(&self) -> &[[usize; 3]] {
        &self.shapes
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    fn is_head(&self, id: ParamId) -> bool {
        id == self.head.weight || id == self.head.bias
    }

    /// Freezes every parameter outside the head.
    pub fn freeze_body(&mut self) {
        let ids: Vec<ParamId> = self.store.ids().collect();
        for id in ids {
            let body = !self.is_head(id);
            self.store.set_frozen(id, body);
        }
    }

    /// Swaps in a freshly initialized dense layer for a new dimension and
    /// bounds. Body parameters are untouched.
    pub fn replace_head(&mut self, lower: Vec<f64>, upper: Vec<f64>, seed: u64) -> Result<()> {
        let mut cfg = self.config.clone();
        cfg.dim = lower.len();
        cfg.lower = lower;
        cfg.upper = upper;
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = self.head.features;
        self.store
            .replace(self.head.weight, glorot(&[f, cfg.dim], &mut rng));
        self.store.replace(self.head.bias, Tensor::zeros(vec![cfg.dim]));
        let pre = self.head.pre_activation;
        self.shapes[pre] = [cfg.dim, 1, 1];
        self.shapes[pre + 1] = [cfg.dim, 1, 1];
        self.config = cfg;
        Ok(())
    }

    /// Records the whole program on `tape`; returns the node of every slot.
    pub fn forward_trace(&self, tape: &mut Tape, input: Tensor) -> Result<Vec<NodeId>> {
        let [c, h, w] = self.shapes[INPUT];
        let shape = input.shape();
        if shape.len() != 4 || shape[0] == 0 || shape[1..] != [c, h, w] {
            return Err(TensorError::Shape {
                op: "network input",
                detail: format!("expected [b, {c}, {h}, {w}], got {shape:?}"),
            }
            .into());
        }
        let mut nodes = Vec::with_capacity(self.shapes.len());
        nodes.push(tape.constant(input));
        for layer in &self.program {
            let x = |k: usize| nodes[layer.inputs[k]];
            let node = match &layer.kind {
                LayerKind::Conv {
                    weight,
                    bias,
                    stride,
                    pad,
                } => tape.conv2d(&self.store, x(0), *weight, Some(*bias), *stride, *pad)?,
                LayerKind::Pool { kind, window, stride } => tape.pool2d(x(0), *kind, *window, *stride)?,
                LayerKind::Add => {
                    let ins: Vec<NodeId> = layer.inputs.iter().map(|&s| nodes[s]).collect();
                    tape.add(&ins)?
                }
                LayerKind::Concat => {
                    let ins: Vec<NodeId> = layer.inputs.iter().map(|&s| nodes[s]).collect();
                    tape.concat_channels(&ins)?
                }
                LayerKind::Crop { size } => tape.center_crop(x(0), *size, *size)?,
                LayerKind::Flatten => tape.flatten(x(0)),
                LayerKind::Dense { weight, bias } => tape.dense(&self.store, x(0), *weight, Some(*bias))?,
                LayerKind::ScaledTanh => tape.scaled_tanh(x(0), &self.config.lower, &self.config.upper)?,
            };
            nodes.push(node);
        }
        Ok(nodes)
    }

    /// Solutions node `[b, D]` recorded on `tape`.
    pub fn forward(&self, tape: &mut Tape, input: Tensor) -> Result<NodeId> {
        Ok(*self.forward_trace(tape, input)?.last().expect("program is nonempty"))
    }

    /// Pre-activation and solution nodes.
    pub fn forward_with_logits(&self, tape: &mut Tape, input: Tensor) -> Result<(NodeId, NodeId)> {
        let nodes = self.forward_trace(tape, input)?;
        Ok((nodes[self.head.pre_activation], *nodes.last().expect("nonempty")))
    }

    /// Solutions for `input` without keeping a tape.
    pub fn solutions(&self, input: Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, input)?;
        Ok(tape.value(out).clone())
    }

    pub fn to_checkpoint(&self, meta: CheckpointMeta) -> Checkpoint {
        Checkpoint::new(self.clone(), meta)
    }

    pub(crate) fn restore_buffers(&mut self) {
        self.store.ensure_grad_buffers();
    }
}

fn op_name(op: CellOp) -> &'static str {
    match op {
        CellOp::Conv3x3 => "conv",
        CellOp::MaxPool3x3 => "maxpool",
        CellOp::AvgPool3x3 => "avgpool",
    }
}

/// Uniform in `(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`; 1-D tensors
/// (biases) are zero.
fn glorot<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let (fan_in, fan_out) = match shape {
        [o, i, kh, kw] => (i * kh * kw, o * kh * kw),
        [f, d] => (*f, *d),
        _ => return Tensor::zeros(shape.to_vec()),
    };
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..n).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::BatchSize;

    fn linear_cell() -> Genotype {
        Genotype::from_edges(&[(1, 2), (2, 7)], [CellOp::Conv3x3; 5], BatchSize::One)
    }

    fn cfg(dim: usize, n: usize) -> BuildConfig {
        let mut c = BuildConfig::new(vec![-100.0; dim], vec![100.0; dim]);
        c.input_size = n;
        c.num_sol = 4;
        c
    }

    #[test]
    fn linear_cell_shrinks_by_two_per_cell() {
        let mut c = cfg(10, 32);
        c.cells = 1;
        let net = Network::build(&linear_cell(), &c).unwrap();
        assert!(net.shapes().iter().any(|s| *s == [8, 30, 30]));
        assert_eq!(net.head().features, 8 * 30 * 30);
    }

    #[test]
    fn invalid_genotype_is_rejected_with_penalty() {
        let g = Genotype::from_edges(&[(1, 2)], [CellOp::Conv3x3; 5], BatchSize::One);
        match Network::build(&g, &cfg(3, 16)) {
            Err(NetworkError::Invalid(r)) => assert!(r.penalty > 0.0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn deep_cells_collapse_small_inputs() {
        let mut c = cfg(3, 6);
        c.cells = 3;
        let err = Network::build(&linear_cell(), &c).unwrap_err();
        assert!(err.to_string().contains("cell depth exceeds input size"));
    }

    #[test]
    fn init_is_reproducible_and_biases_are_zero() {
        let mut a = Network::build(&linear_cell(), &cfg(5, 12)).unwrap();
        let mut b = a.clone();
        a.init_weights(3);
        b.init_weights(3);
        assert_eq!(a.store(), b.store());
        for (_, p) in a.store().iter() {
            if p.value.shape().len() == 1 {
                assert!(p.value.data().iter().all(|&v| v == 0.0));
            }
        }
        b.init_weights(4);
        assert_ne!(a.store(), b.store());
    }

    #[test]
    fn input_batch_is_seeded_and_in_unit_interval() {
        let a = InputBatch::generate(5, 4, 9);
        assert_eq!(a, InputBatch::generate(5, 4, 9));
        assert!(a.all().data().iter().all(|v| (0.0..1.0).contains(v)));
        assert_eq!(a.slice(3, 32).shape(), &[2, 1, 4, 4]);
    }

    #[test]
    fn wrong_input_shape_is_a_shape_error() {
        let net = Network::build(&linear_cell(), &cfg(2, 10)).unwrap();
        let mut tape = Tape::new();
        let err = net.forward(&mut tape, Tensor::zeros(vec![1, 1, 9, 10])).unwrap_err();
        assert!(matches!(err, NetworkError::Tensor(TensorError::Shape { .. })));
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut c = cfg(2, 10);
        c.cells = 0;
        assert!(c.validate().is_err());
        let mut c = cfg(2, 10);
        c.upper[1] = -200.0;
        assert!(c.validate().is_err());
    }
}
