//! Static differentiation graphs.
//!
//! A [`Graph`] is an append-only list of nodes in topological order. Leaves
//! carry bound tensors; every other node caches its forward value lazily.
//! [`Graph::grad`] differentiates symbolically: the reverse sweep appends new
//! nodes to the same graph instead of producing numbers, so a gradient is
//! itself a differentiable expression. Hessian-vector products are built as
//! the gradient of `⟨∇f, v⟩` (reverse-over-reverse), and can be differentiated
//! again with respect to `v` or any parameter leaf.

mod ops;

#[cfg(test)]
mod tests;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) use ops::Op;

/// Largest input dimension [`Graph::explicit_hessian`] accepts by default.
pub const DEFAULT_ORACLE_LIMIT: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Option<Tensor>,
    name: Option<String>,
}

/// Node ids of a Hessian-vector product subgraph for one `(output, wrt)` pair.
#[derive(Clone, Copy, Debug)]
pub struct HvpNodes {
    /// Direction leaf, same shape as `wrt`.
    pub v: NodeId,
    /// `∇f` with respect to `wrt`.
    pub grad: NodeId,
    /// `H·v`.
    pub hv: NodeId,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    hvp_cache: HashMap<(NodeId, NodeId), HvpNodes>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn numel(&self, id: NodeId) -> usize {
        self.nodes[id.0].shape.iter().product()
    }

    pub(crate) fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    /// Human-readable label used in error messages.
    pub fn describe(&self, id: NodeId) -> String {
        let node = &self.nodes[id.0];
        match &node.name {
            Some(name) => format!("{name} (node #{})", id.0),
            None => format!("{} (node #{})", node.op.kind(), id.0),
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node {
            op,
            shape,
            value: None,
            name: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Unbound leaf; must be bound before anything depending on it is evaluated.
    pub fn leaf(&mut self, name: &str, shape: &[usize]) -> NodeId {
        let id = self.push(Op::Leaf, shape.to_vec());
        self.nodes[id.0].name = Some(name.to_string());
        id
    }

    /// Leaf bound to `value` at creation.
    pub fn input(&mut self, name: &str, value: Tensor) -> NodeId {
        let id = self.leaf(name, value.shape());
        self.nodes[id.0].value = Some(value);
        id
    }

    /// Fixed tensor that can never be rebound.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let id = self.push(Op::Constant, value.shape().to_vec());
        self.nodes[id.0].value = Some(value);
        id
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf)
    }

    /// Rebinds a leaf and invalidates every cached value downstream of it.
    pub fn bind(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        if !self.is_leaf(id) {
            return Err(Error::NotLeaf(self.describe(id)));
        }
        if value.shape() != self.nodes[id.0].shape.as_slice() {
            return Err(Error::shape(
                self.describe(id),
                format!(
                    "bound tensor has shape {:?}, leaf expects {:?}",
                    value.shape(),
                    self.nodes[id.0].shape
                ),
            ));
        }
        self.nodes[id.0].value = Some(value);
        let mut stale = vec![false; self.nodes.len()];
        stale[id.0] = true;
        for k in id.0 + 1..self.nodes.len() {
            if self.nodes[k].op.inputs().any(|i| stale[i.0]) {
                stale[k] = true;
                self.nodes[k].value = None;
            }
        }
        Ok(())
    }

    /// Evaluates `id` (and whatever it needs) and returns the cached value.
    pub fn value(&mut self, id: NodeId) -> Result<&Tensor> {
        self.ensure(id)?;
        Ok(self.nodes[id.0].value.as_ref().expect("ensured"))
    }

    /// Binds `bindings`, then evaluates `output`.
    pub fn forward(&mut self, bindings: &[(NodeId, Tensor)], output: NodeId) -> Result<Tensor> {
        for (leaf, t) in bindings {
            self.bind(*leaf, t.clone())?;
        }
        Ok(self.value(output)?.clone())
    }

    fn ensure(&mut self, id: NodeId) -> Result<()> {
        if self.nodes[id.0].value.is_some() {
            return Ok(());
        }
        let mut needed = vec![false; id.0 + 1];
        needed[id.0] = true;
        for k in (0..=id.0).rev() {
            if !needed[k] {
                continue;
            }
            if matches!(self.nodes[k].op, Op::Leaf) {
                return Err(Error::Unbound(self.describe(NodeId(k))));
            }
            for inp in self.nodes[k].op.inputs() {
                if self.nodes[inp.0].value.is_none() {
                    needed[inp.0] = true;
                }
            }
        }
        for k in 0..=id.0 {
            if needed[k] {
                let v = self.compute(NodeId(k));
                self.nodes[k].value = Some(v);
            }
        }
        Ok(())
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0].value.as_ref().expect("input evaluated first")
    }

    /// Symbolic reverse-mode gradient of a scalar `output` with respect to `wrt`.
    ///
    /// Returns one node per entry of `wrt`, each shaped like its leaf. The
    /// returned nodes are ordinary graph nodes and can be differentiated again.
    pub fn grad(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        if !self.nodes[output.0].shape.is_empty() {
            return Err(Error::NotScalar(
                self.describe(output),
                self.nodes[output.0].shape.clone(),
            ));
        }
        let n = output.0 + 1;
        let mut depends = vec![false; n];
        for w in wrt {
            if w.0 < n {
                depends[w.0] = true;
            }
        }
        for k in 0..n {
            if !depends[k] && self.nodes[k].op.inputs().any(|i| depends[i.0]) {
                depends[k] = true;
            }
        }
        let mut reach = vec![false; n];
        reach[output.0] = true;
        for k in (0..n).rev() {
            if reach[k] {
                for i in self.nodes[k].op.inputs() {
                    reach[i.0] = true;
                }
            }
        }
        let active: Vec<bool> = depends.iter().zip(&reach).map(|(a, b)| *a && *b).collect();

        let mut cot: Vec<Option<NodeId>> = vec![None; n];
        if active[output.0] {
            cot[output.0] = Some(self.constant(Tensor::scalar(1.0)));
        }
        for k in (0..n).rev() {
            let Some(g) = cot[k] else { continue };
            if !active[k] {
                continue;
            }
            let ins: Vec<NodeId> = self.nodes[k].op.inputs().collect();
            if ins.is_empty() {
                continue;
            }
            let need: Vec<bool> = ins.iter().map(|i| active[i.0]).collect();
            let contribs = self.vjp(NodeId(k), g, &need)?;
            for (inp, c) in ins.into_iter().zip(contribs) {
                let Some(c) = c else { continue };
                cot[inp.0] = Some(match cot[inp.0] {
                    None => c,
                    Some(prev) => self.add(prev, c)?,
                });
            }
        }
        wrt.iter()
            .map(|w| match cot.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let shape = self.nodes[w.0].shape.clone();
                    Ok(self.constant(Tensor::zeros(&shape)))
                }
            })
            .collect()
    }

    /// Builds (once) the Hessian-vector product subgraph for `(output, wrt)`.
    pub fn hvp_nodes(&mut self, output: NodeId, wrt: NodeId) -> Result<HvpNodes> {
        if let Some(nodes) = self.hvp_cache.get(&(output, wrt)) {
            return Ok(*nodes);
        }
        let shape = self.nodes[wrt.0].shape.clone();
        let grad = self.grad(output, &[wrt])?[0];
        let v = self.leaf("hvp_direction", &shape);
        let prod = self.mul(grad, v)?;
        let dot = self.sum(prod)?;
        let hv = self.grad(dot, &[wrt])?[0];
        let nodes = HvpNodes { v, grad, hv };
        self.hvp_cache.insert((output, wrt), nodes);
        Ok(nodes)
    }

    /// Evaluates `H·v` where `H` is the Hessian of scalar `output` w.r.t. leaf `wrt`.
    pub fn hvp(&mut self, output: NodeId, wrt: NodeId, v: &Tensor) -> Result<Tensor> {
        let nodes = self.hvp_nodes(output, wrt)?;
        self.bind(nodes.v, v.clone())?;
        Ok(self.value(nodes.hv)?.clone())
    }

    /// Evaluated gradients of scalar `output` with respect to each of `wrt`.
    pub fn gradient(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor>> {
        let nodes = self.grad(output, wrt)?;
        nodes.into_iter().map(|id| Ok(self.value(id)?.clone())).collect()
    }

    /// Dense `d×d` Hessian assembled column by column from `d` HVPs.
    ///
    /// Meant as a test oracle: refuses inputs larger than `limit`.
    pub fn explicit_hessian(&mut self, output: NodeId, wrt: NodeId, limit: usize) -> Result<Tensor> {
        let shape = self.nodes[wrt.0].shape.clone();
        let d: usize = shape.iter().product();
        if d > limit {
            return Err(Error::OracleLimit { dim: d, limit });
        }
        let mut h = vec![0.0; d * d];
        for col in 0..d {
            let mut e = Tensor::zeros(&shape);
            e.data_mut()[col] = 1.0;
            let hv = self.hvp(output, wrt, &e)?;
            for (row, x) in hv.data().iter().enumerate() {
                h[row * d + col] = *x;
            }
        }
        Tensor::matrix(d, d, h)
    }
}

/// A scalar function of one input leaf, bundled with its graph.
#[derive(Clone, Debug)]
pub struct ScalarGraph {
    pub graph: Graph,
    pub input: NodeId,
    pub output: NodeId,
}

impl ScalarGraph {
    pub fn value_at(&mut self, x: &Tensor) -> Result<f64> {
        self.graph.bind(self.input, x.clone())?;
        Ok(self.graph.value(self.output)?.item())
    }

    pub fn gradient_at(&mut self, x: &Tensor) -> Result<Tensor> {
        self.graph.bind(self.input, x.clone())?;
        Ok(self.graph.gradient(self.output, &[self.input])?.remove(0))
    }

    pub fn hvp_at(&mut self, x: &Tensor, v: &Tensor) -> Result<Tensor> {
        self.graph.bind(self.input, x.clone())?;
        self.graph.hvp(self.output, self.input, v)
    }

    pub fn hessian_at(&mut self, x: &Tensor) -> Result<Tensor> {
        self.graph.bind(self.input, x.clone())?;
        self.graph
            .explicit_hessian(self.output, self.input, DEFAULT_ORACLE_LIMIT)
    }
}
