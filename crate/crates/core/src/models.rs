//! Scoring functions `f: ℝ^d → ℝ^K` expressed as differentiation graphs.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

/// Side length of every convolution filter.
pub const CONV_KERNEL: usize = 3;

const MAGIC: &[u8; 4] = b"HNET";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        units: usize,
    },
    /// 3×3 filters; stride 1 keeps the spatial size ("same" padding of 1),
    /// stride 2 uses no padding, giving `(n − 3) / 2 + 1`.
    Conv2d {
        out_channels: usize,
        stride: usize,
    },
    Swish,
    Flatten,
}

impl LayerSpec {
    fn code(&self) -> (u8, u32, u32) {
        match *self {
            LayerSpec::Dense { units } => (0, units as u32, 0),
            LayerSpec::Conv2d { out_channels, stride } => (1, out_channels as u32, stride as u32),
            LayerSpec::Swish => (2, 0, 0),
            LayerSpec::Flatten => (3, 0, 0),
        }
    }

    fn from_code(kind: u8, a: u32, b: u32) -> Option<Self> {
        Some(match kind {
            0 => LayerSpec::Dense { units: a as usize },
            1 => LayerSpec::Conv2d {
                out_channels: a as usize,
                stride: b as usize,
            },
            2 => LayerSpec::Swish,
            3 => LayerSpec::Flatten,
            _ => return None,
        })
    }

    pub fn is_weighted(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }
}

pub(crate) fn conv_padding(stride: usize) -> usize {
    if stride == 1 {
        1
    } else {
        0
    }
}

/// Location of one parameter tensor inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamBlock {
    pub layer: usize,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Anything that can emit its logits into a [`Graph`].
///
/// Implementations must treat rows of the batch independently: row `i` of
/// the logits may only depend on row `i` of the input. Per-sample gradients
/// and Hessian-vector products are read off batched graphs relying on this.
pub trait Scorer: Send + Sync {
    /// Per-sample input shape (`[d]` or `[channels, height, width]`).
    fn input_shape(&self) -> &[usize];
    fn num_classes(&self) -> usize;
    fn param_shapes(&self) -> Vec<Vec<usize>>;
    fn param_values(&self) -> Vec<Tensor>;
    /// Appends the logits `[batch, K]` for input node `x` (`[batch, ..input_shape]`).
    fn build_logits(&self, g: &mut Graph, x: NodeId, params: &[NodeId]) -> Result<NodeId>;
    /// True when the input Hessian of every logit is independent of `x`.
    fn constant_hessian(&self) -> bool {
        false
    }
    /// True when every logit is affine in `x`, so gradients are constant.
    fn affine(&self) -> bool {
        false
    }

    fn input_dim(&self) -> usize {
        self.input_shape().iter().product()
    }
}

/// Feed-forward network of dense, convolutional, SWISH and flatten layers.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoringModel {
    layers: Vec<LayerSpec>,
    input_shape: Vec<usize>,
    num_classes: usize,
    theta: Tensor,
    manifest: Vec<ParamBlock>,
}

impl ScoringModel {
    /// Builds the model with He-scaled Gaussian weights and zero biases.
    pub fn new(input_shape: &[usize], layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(input_shape, layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = model.theta.data_mut();
        for block in &model.manifest {
            // weights are the 2-D / 4-D blocks, biases are 1-D
            if block.shape.len() < 2 {
                continue;
            }
            let fan_in = if block.shape.len() == 2 {
                block.shape[0]
            } else {
                block.shape[1..].iter().product()
            };
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            for w in &mut theta[block.offset..block.offset + block.len()] {
                *w = normal.sample(&mut rng);
            }
        }
        Ok(model)
    }

    /// Builds the model with every parameter set to zero.
    pub fn zeros(input_shape: &[usize], layers: Vec<LayerSpec>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Model(format!("invalid input shape {input_shape:?}")));
        }
        let mut shape = input_shape.to_vec();
        let mut manifest = Vec::new();
        let mut offset = 0;
        let mut push = |layer: usize, s: Vec<usize>, manifest: &mut Vec<ParamBlock>| {
            let n: usize = s.iter().product();
            manifest.push(ParamBlock {
                layer,
                shape: s,
                offset,
            });
            offset += n;
        };
        for (i, layer) in layers.iter().enumerate() {
            shape = match *layer {
                LayerSpec::Dense { units } => {
                    if units == 0 {
                        return Err(Error::Model(format!("layer {i}: dense units must be > 0")));
                    }
                    if shape.len() != 1 {
                        return Err(Error::Model(format!(
                            "layer {i}: dense layer needs a flat input, got {shape:?}"
                        )));
                    }
                    push(i, vec![shape[0], units], &mut manifest);
                    push(i, vec![units], &mut manifest);
                    vec![units]
                }
                LayerSpec::Conv2d { out_channels, stride } => {
                    if stride != 1 && stride != 2 {
                        return Err(Error::Model(format!("layer {i}: stride must be 1 or 2")));
                    }
                    if out_channels == 0 {
                        return Err(Error::Model(format!("layer {i}: conv needs output channels")));
                    }
                    if shape.len() != 3 {
                        return Err(Error::Model(format!(
                            "layer {i}: conv needs [channels, height, width], got {shape:?}"
                        )));
                    }
                    let pad = conv_padding(stride);
                    let h = kernels::conv_out_dim(shape[1], CONV_KERNEL, stride, pad);
                    let w = kernels::conv_out_dim(shape[2], CONV_KERNEL, stride, pad);
                    let (Some(h), Some(w)) = (h, w) else {
                        return Err(Error::Model(format!(
                            "layer {i}: input {shape:?} too small for a stride-{stride} 3×3 convolution"
                        )));
                    };
                    push(i, vec![out_channels, shape[0], CONV_KERNEL, CONV_KERNEL], &mut manifest);
                    push(i, vec![out_channels], &mut manifest);
                    vec![out_channels, h, w]
                }
                LayerSpec::Swish => shape,
                LayerSpec::Flatten => vec![shape.iter().product()],
            };
        }
        if shape.len() != 1 || shape[0] < 2 {
            return Err(Error::Model(format!(
                "network output must be a logit vector with at least 2 classes, got {shape:?}"
            )));
        }
        let num_classes = shape[0];
        Ok(ScoringModel {
            layers,
            input_shape: input_shape.to_vec(),
            num_classes,
            theta: Tensor::zeros(&[offset]),
            manifest,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn manifest(&self) -> &[ParamBlock] {
        &self.manifest
    }

    /// Flat parameter vector θ.
    pub fn theta(&self) -> &Tensor {
        &self.theta
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    pub fn set_theta(&mut self, theta: Tensor) -> Result<()> {
        if theta.shape() != self.theta.shape() {
            return Err(Error::Model(format!(
                "parameter vector has {} entries, model needs {}",
                theta.len(),
                self.theta.len()
            )));
        }
        self.theta = theta;
        Ok(())
    }

    /// Parameter tensor `index` of the manifest, copied out of θ.
    pub fn block(&self, index: usize) -> Tensor {
        let b = &self.manifest[index];
        Tensor::new(
            b.shape.clone(),
            self.theta.data()[b.offset..b.offset + b.len()].to_vec(),
        )
        .expect("manifest matches theta")
    }

    pub fn set_block(&mut self, index: usize, value: &Tensor) -> Result<()> {
        let b = self.manifest[index].clone();
        if value.shape() != b.shape.as_slice() {
            return Err(Error::Model(format!(
                "block {index} expects shape {:?}, got {:?}",
                b.shape,
                value.shape()
            )));
        }
        self.theta.data_mut()[b.offset..b.offset + b.len()].copy_from_slice(value.data());
        Ok(())
    }

    /// Concatenates per-block tensors (manifest order) into one flat vector.
    pub fn flatten_blocks(&self, blocks: &[Tensor]) -> Tensor {
        let mut out = Vec::with_capacity(self.theta.len());
        for t in blocks {
            out.extend_from_slice(t.data());
        }
        Tensor::vector(out)
    }

    pub fn weighted_layers(&self) -> usize {
        self.layers.iter().filter(|l| l.is_weighted()).count()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(64 + 8 * self.theta.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        buf.extend_from_slice(&(self.input_shape.len() as u32).to_le_bytes());
        for &d in &self.input_shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for layer in &self.layers {
            let (kind, a, b) = layer.code();
            buf.push(kind);
            buf.extend_from_slice(&a.to_le_bytes());
            buf.extend_from_slice(&b.to_le_bytes());
        }
        buf.extend_from_slice(&(self.theta.len() as u64).to_le_bytes());
        for x in self.theta.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut cur = ByteCursor {
            bytes: &bytes,
            pos: 0,
            path,
        };
        if cur.take(4)? != MAGIC {
            return Err(Error::format(path, "missing HNET magic"));
        }
        let version = cur.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let num_classes = cur.u32()? as usize;
        let ndim = cur.u32()? as usize;
        let input_shape = (0..ndim)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n_layers = cur.u32()? as usize;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let kind = cur.take(1)?[0];
            let (a, b) = (cur.u32()?, cur.u32()?);
            layers.push(
                LayerSpec::from_code(kind, a, b)
                    .ok_or_else(|| Error::format(path, format!("unknown layer kind {kind}")))?,
            );
        }
        let n_params = cur.u64()? as usize;
        let mut model = Self::zeros(&input_shape, layers)?;
        if model.num_classes != num_classes || model.theta.len() != n_params {
            return Err(Error::format(path, "header disagrees with the layer manifest"));
        }
        let raw = cur.take(8 * n_params)?;
        let theta = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if cur.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after parameter block"));
        }
        model.theta = Tensor::vector(theta);
        Ok(model)
    }
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Scorer for ScoringModel {
    fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.manifest.iter().map(|b| b.shape.clone()).collect()
    }

    fn param_values(&self) -> Vec<Tensor> {
        (0..self.manifest.len()).map(|i| self.block(i)).collect()
    }

    fn build_logits(&self, g: &mut Graph, x: NodeId, params: &[NodeId]) -> Result<NodeId> {
        let batch = g.shape(x)[0];
        let mut h = x;
        let mut next_param = 0;
        for layer in &self.layers {
            h = match *layer {
                LayerSpec::Dense { .. } => {
                    let (w, b) = (params[next_param], params[next_param + 1]);
                    next_param += 2;
                    let z = g.matmul(h, w)?;
                    g.bias_add(z, b)?
                }
                LayerSpec::Conv2d { stride, .. } => {
                    let (w, b) = (params[next_param], params[next_param + 1]);
                    next_param += 2;
                    let z = g.conv2d(h, w, stride, conv_padding(stride))?;
                    g.bias_add(z, b)?
                }
                LayerSpec::Swish => g.swish(h)?,
                LayerSpec::Flatten => {
                    let n = g.numel(h) / batch;
                    g.reshape(h, &[batch, n])?
                }
            };
        }
        Ok(h)
    }

    fn constant_hessian(&self) -> bool {
        !self.layers.contains(&LayerSpec::Swish)
    }

    fn affine(&self) -> bool {
        self.constant_hessian()
    }
}

/// Binary scorer with logits `(c + bᵀx + ½ xᵀAx, 0)`: its margin has constant Hessian `A`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticScorer {
    hessian: Tensor,
    linear: Tensor,
    offset: f64,
    input_shape: Vec<usize>,
}

impl QuadraticScorer {
    pub fn new(hessian: Tensor, linear: Tensor, offset: f64) -> Result<Self> {
        let d = linear.len();
        if hessian.shape() != [d, d] || linear.ndim() != 1 {
            return Err(Error::Model(format!(
                "quadratic needs A [{d},{d}] and b [{d}], got {:?} and {:?}",
                hessian.shape(),
                linear.shape()
            )));
        }
        let asym = hessian.zip_map(&transpose(&hessian), |a, b| (a - b).abs())?;
        if asym.max_abs() > 1e-12 {
            return Err(Error::Model("quadratic Hessian must be symmetric".into()));
        }
        Ok(QuadraticScorer {
            hessian,
            linear,
            offset,
            input_shape: vec![d],
        })
    }

    /// Linear binary scorer with margin `wᵀx + b`.
    pub fn linear(w: Vec<f64>, b: f64) -> Self {
        let d = w.len();
        Self::new(Tensor::zeros(&[d, d]), Tensor::vector(w), b).expect("consistent shapes")
    }

    pub fn hessian(&self) -> &Tensor {
        &self.hessian
    }

    pub fn linear_term(&self) -> &Tensor {
        &self.linear
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }
}

fn transpose(m: &Tensor) -> Tensor {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = m.data()[i * c + j];
        }
    }
    Tensor::from_parts(vec![c, r], out)
}

impl Scorer for QuadraticScorer {
    fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    fn num_classes(&self) -> usize {
        2
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        Vec::new()
    }

    fn param_values(&self) -> Vec<Tensor> {
        Vec::new()
    }

    fn build_logits(&self, g: &mut Graph, x: NodeId, _params: &[NodeId]) -> Result<NodeId> {
        let batch = g.shape(x)[0];
        let d = self.linear.len();
        let a = g.constant(self.hessian.clone());
        let b = g.constant(self.linear.clone().reshape(&[d, 1])?);
        let xa = g.matmul(x, a)?;
        let xax = g.mul(xa, x)?;
        let quad = g.sum_last(xax)?;
        let quad = g.affine(quad, 0.5, self.offset)?;
        let lin = g.matmul(x, b)?;
        let lin = g.reshape(lin, &[batch])?;
        let f = g.add(quad, lin)?;
        let f = g.reshape(f, &[batch, 1])?;
        g.pad_last(f, 0, 2)
    }

    fn constant_hessian(&self) -> bool {
        true
    }

    fn affine(&self) -> bool {
        self.hessian.max_abs() == 0.0
    }
}

/// A scorer instantiated in a graph for a fixed batch size.
#[derive(Clone, Debug)]
pub struct ModelGraph {
    pub graph: Graph,
    /// Input leaf `[batch, ..input_shape]`, initially unbound.
    pub x: NodeId,
    /// Parameter leaves in manifest order, bound to the scorer's values.
    pub params: Vec<NodeId>,
    pub logits: NodeId,
    pub batch: usize,
}

impl ModelGraph {
    pub fn build(scorer: &dyn Scorer, batch: usize) -> Result<Self> {
        let mut graph = Graph::new();
        let mut shape = vec![batch];
        shape.extend_from_slice(scorer.input_shape());
        let x = graph.leaf("x", &shape);
        let params: Vec<NodeId> = scorer
            .param_values()
            .into_iter()
            .enumerate()
            .map(|(i, t)| graph.input(&format!("theta[{i}]"), t))
            .collect();
        let logits = scorer.build_logits(&mut graph, x, &params)?;
        let want = [batch, scorer.num_classes()];
        if graph.shape(logits) != want {
            return Err(Error::Model(format!(
                "scorer produced logits {:?}, expected {want:?}",
                graph.shape(logits)
            )));
        }
        Ok(ModelGraph {
            graph,
            x,
            params,
            logits,
            batch,
        })
    }

    pub fn set_params(&mut self, values: Vec<Tensor>) -> Result<()> {
        for (leaf, v) in self.params.clone().into_iter().zip(values) {
            self.graph.bind(leaf, v)?;
        }
        Ok(())
    }

    pub fn logits_for(&mut self, xs: &Tensor) -> Result<Tensor> {
        self.graph.bind(self.x, xs.clone())?;
        Ok(self.graph.value(self.logits)?.clone())
    }
}

fn check_sample(scorer: &dyn Scorer, x: &Tensor) -> Result<()> {
    if x.shape() != scorer.input_shape() {
        return Err(Error::shape(
            "score input",
            format!("sample shape {:?}, model expects {:?}", x.shape(), scorer.input_shape()),
        ));
    }
    Ok(())
}

/// Logits for one sample.
pub fn score(scorer: &dyn Scorer, x: &Tensor) -> Result<Tensor> {
    check_sample(scorer, x)?;
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let logits = score_batch(scorer, &x.clone().reshape(&shape)?)?;
    logits.reshape(&[scorer.num_classes()])
}

/// Logits `[B, K]` for a batch `[B, ..input_shape]`.
pub fn score_batch(scorer: &dyn Scorer, xs: &Tensor) -> Result<Tensor> {
    if xs.ndim() == 0 || &xs.shape()[1..] != scorer.input_shape() {
        return Err(Error::shape(
            "score input",
            format!(
                "batch shape {:?}, model expects [B, {:?}]",
                xs.shape(),
                scorer.input_shape()
            ),
        ));
    }
    let mut mg = ModelGraph::build(scorer, xs.shape()[0])?;
    mg.logits_for(xs)
}

pub fn classify(scorer: &dyn Scorer, x: &Tensor) -> Result<usize> {
    Ok(score(scorer, x)?.argmax())
}

/// Scalar graph `Σ_i f_{t_i}(x_i) − f_{j_i}(x_i)` over a batch of inputs.
///
/// Row `i` carries its own class pair `(t_i, j_i)`. With one row this is the
/// margin `f^(j)` of a single sample; with several rows, row-separability
/// makes the input gradient and HVPs row-wise.
#[derive(Clone, Debug)]
pub struct MarginGraph {
    pub graph: Graph,
    pub x: NodeId,
    pub params: Vec<NodeId>,
    pub logits: NodeId,
    /// Per-row margins `[batch]`.
    pub margins: NodeId,
    pub output: NodeId,
    pub pairs: Vec<(usize, usize)>,
    pub batch: usize,
}

impl MarginGraph {
    pub fn bind_inputs(&mut self, xs: &Tensor) -> Result<()> {
        self.graph.bind(self.x, xs.clone())
    }

    pub fn value(&mut self) -> Result<f64> {
        Ok(self.graph.value(self.output)?.item())
    }

    pub fn row_margins(&mut self) -> Result<Tensor> {
        Ok(self.graph.value(self.margins)?.clone())
    }

    pub fn sample_shape(&self) -> Vec<usize> {
        self.graph.shape(self.x)[1..].to_vec()
    }

    pub fn sample_dim(&self) -> usize {
        self.graph.numel(self.x) / self.batch
    }
}

/// Margin graph `f_t − f_j` for a single sample `x` (shape = input shape).
pub fn margin_graph(scorer: &dyn Scorer, x: &Tensor, target: usize, other: usize) -> Result<MarginGraph> {
    check_sample(scorer, x)?;
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    margin_graph_pairs(scorer, &x.clone().reshape(&shape)?, &[(target, other)])
}

/// Margin graph with the same class pair on every row.
pub fn margin_graph_batch(scorer: &dyn Scorer, xs: &Tensor, target: usize, other: usize) -> Result<MarginGraph> {
    let pairs = vec![(target, other); xs.shape().first().copied().unwrap_or(0)];
    margin_graph_pairs(scorer, xs, &pairs)
}

/// Margin graph with class pair `pairs[i]` on row `i` of `xs`.
pub fn margin_graph_pairs(scorer: &dyn Scorer, xs: &Tensor, pairs: &[(usize, usize)]) -> Result<MarginGraph> {
    let k = scorer.num_classes();
    if xs.ndim() == 0 || &xs.shape()[1..] != scorer.input_shape() || xs.shape()[0] != pairs.len() {
        return Err(Error::shape(
            "margin input",
            format!(
                "batch {:?} with {} class pairs, model expects [B, {:?}]",
                xs.shape(),
                pairs.len(),
                scorer.input_shape()
            ),
        ));
    }
    let batch = pairs.len();
    let mut select = vec![0.0; batch * k];
    for (i, &(t, j)) in pairs.iter().enumerate() {
        if t == j {
            return Err(Error::config("margin", "target and competing class must differ"));
        }
        if t >= k || j >= k {
            return Err(Error::Label {
                label: t.max(j),
                classes: k,
            });
        }
        select[i * k + t] = 1.0;
        select[i * k + j] = -1.0;
    }
    let ModelGraph {
        mut graph,
        x,
        params,
        logits,
        ..
    } = ModelGraph::build(scorer, batch)?;
    graph.bind(x, xs.clone())?;
    let select = graph.constant(Tensor::from_parts(vec![batch, k], select));
    let picked = graph.mul(logits, select)?;
    let margins = graph.sum_last(picked)?;
    let output = graph.sum(margins)?;
    Ok(MarginGraph {
        graph,
        x,
        params,
        logits,
        margins,
        output,
        pairs: pairs.to_vec(),
        batch,
    })
}

/// Elementwise `x·σ(x)`.
pub fn swish(x: &Tensor) -> Tensor {
    x.map(kernels::swish)
}

/// Convolutional network with 3×3 filter maps (32, 32, 64, 64), strided
/// convolutions in place of pooling, two dense layers of 200 and a logit
/// layer; SWISH after every layer but the last.
pub fn build_paper_cnn(input_shape: &[usize], num_classes: usize, seed: u64) -> Result<ScoringModel> {
    if input_shape.len() != 3 || input_shape[0] == 0 {
        return Err(Error::Model(format!(
            "expected [channels, height, width] with at least one channel, got {input_shape:?}"
        )));
    }
    let after_first = |n: usize| kernels::conv_out_dim(n, CONV_KERNEL, 2, 0);
    let ok = |n: usize| after_first(n).is_some_and(|m| kernels::conv_out_dim(m, CONV_KERNEL, 2, 0).is_some());
    if !ok(input_shape[1]) || !ok(input_shape[2]) {
        return Err(Error::Model(format!(
            "input {input_shape:?} too small for two stride-2 reductions"
        )));
    }
    let conv = |out_channels, stride| LayerSpec::Conv2d { out_channels, stride };
    let layers = vec![
        conv(32, 1),
        LayerSpec::Swish,
        conv(32, 2),
        LayerSpec::Swish,
        conv(64, 1),
        LayerSpec::Swish,
        conv(64, 2),
        LayerSpec::Swish,
        LayerSpec::Flatten,
        LayerSpec::Dense { units: 200 },
        LayerSpec::Swish,
        LayerSpec::Dense { units: 200 },
        LayerSpec::Swish,
        LayerSpec::Dense { units: num_classes },
    ];
    ScoringModel::new(input_shape, layers, seed)
}

/// Desk-scale SWISH multilayer perceptron (`hidden` widths, then `K` logits).
pub fn build_mlp(input_shape: &[usize], hidden: &[usize], num_classes: usize, seed: u64) -> Result<ScoringModel> {
    let mut layers = Vec::new();
    if input_shape.len() > 1 {
        layers.push(LayerSpec::Flatten);
    }
    for &units in hidden {
        layers.push(LayerSpec::Dense { units });
        layers.push(LayerSpec::Swish);
    }
    layers.push(LayerSpec::Dense { units: num_classes });
    ScoringModel::new(input_shape, layers, seed)
}
