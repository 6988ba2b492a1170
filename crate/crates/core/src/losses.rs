//! Cross-entropy, the Cross-Lipschitz gradient penalty and the Cross-Hölder
//! objective that adds Hessian operator-norm penalties along fixed directions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::models::{margin_graph_pairs, ModelGraph, Scorer};
use crate::opnorm::{CurvatureNodes, OpNormProbe};
use crate::rng;
use crate::tensor::{Lp, Tensor};

const UNIT_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the gradient-norm terms.
    pub lambda1: f64,
    /// Extra weight of the Hessian terms, which enter as `λ1·λ2`.
    pub lambda2: f64,
    /// Output norm; training supports only `q = 2`.
    pub q: Lp,
    pub probe: OpNormProbe,
    /// Penalize only the `m` competing classes with the smallest margins.
    pub top_m: Option<usize>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            q: Lp::L2,
            probe: OpNormProbe::default(),
            top_m: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be a finite number ≥ 0"));
            }
        }
        if self.q != Lp::L2 && self.lambda1 > 0.0 {
            return Err(Error::UnsupportedNorm("regularized training supports q = 2 only"));
        }
        if self.top_m == Some(0) {
            return Err(Error::config("top_m", "must be at least 1"));
        }
        if self.uses_hessian() {
            self.probe.validate()?;
        }
        Ok(())
    }

    pub fn uses_gradient(&self) -> bool {
        self.lambda1 > 0.0
    }

    pub fn uses_hessian(&self) -> bool {
        self.lambda1 > 0.0 && self.lambda2 > 0.0
    }
}

/// `−log softmax(logits)[y]` via a stable log-sum-exp.
pub fn cross_entropy(logits: &Tensor, y: usize) -> Result<f64> {
    let k = logits.len();
    if y >= k {
        return Err(Error::Label { label: y, classes: k });
    }
    let m = logits.data().iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + logits.data().iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    Ok(lse - logits.data()[y])
}

fn check_label(scorer: &dyn Scorer, y: usize) -> Result<()> {
    if y >= scorer.num_classes() {
        return Err(Error::Label {
            label: y,
            classes: scorer.num_classes(),
        });
    }
    Ok(())
}

/// `Σ_{j≠y} ‖∇_x f^(j)(x)‖_q` at one sample (value only).
pub fn cross_lipschitz_term(scorer: &dyn Scorer, x: &Tensor, y: usize, q: Lp) -> Result<f64> {
    check_label(scorer, y)?;
    let k = scorer.num_classes();
    let pairs: Vec<(usize, usize)> = (0..k).filter(|&j| j != y).map(|j| (y, j)).collect();
    let xs = Tensor::stack(&vec![x.clone(); pairs.len()])?;
    let mut mg = margin_graph_pairs(scorer, &xs, &pairs)?;
    let g = mg.graph.gradient(mg.output, &[mg.x])?.remove(0);
    let d = mg.sample_dim();
    Ok((0..pairs.len()).map(|r| q.norm(&g.data()[r * d..(r + 1) * d])).sum())
}

/// Loss components summed over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub cross_entropy: f64,
    /// `Σ_i Σ_j ‖∇f^(j)(x_i)‖_q`.
    pub gradient_term: f64,
    /// `Σ_i Σ_j ‖H_{f^(j)}(x_i) v_ij‖_q`.
    pub hessian_term: f64,
    /// `cross_entropy + λ1·gradient_term + λ1·λ2·hessian_term`.
    pub total: f64,
}

/// Fixed directions `v_ij`: one `[B, ..input_shape]` tensor per class `j`.
/// Rows with `j == y_i` (or masked out by top-m) are ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct Directions {
    pub per_class: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug)]
struct ClassNodes {
    mask: NodeId,
    grad_norms: NodeId,
    curvature: Option<CurvatureNodes>,
}

/// Batched training objective for a fixed batch size.
///
/// Margins are `f_{y_i} − f_c` masked to the active `(i, c)` pairs, one
/// scalar per class `c`, so every input gradient and Hessian-vector product
/// stays row-wise. The direction leaves `v_c` are plain leaves: the
/// θ-gradient treats them as constants.
#[derive(Clone, Debug)]
pub struct LossGraph {
    pub graph: Graph,
    pub x: NodeId,
    pub params: Vec<NodeId>,
    pub logits: NodeId,
    onehot: NodeId,
    classes: Vec<ClassNodes>,
    ce: NodeId,
    gradient_term: Option<NodeId>,
    hessian_term: Option<NodeId>,
    /// Batch mean of the weighted objective; the SGD target.
    pub objective: NodeId,
    param_grads: Vec<NodeId>,
    cfg: LossConfig,
    batch: usize,
    num_classes: usize,
    sample_shape: Vec<usize>,
    labels: Vec<usize>,
}

impl LossGraph {
    pub fn build(scorer: &dyn Scorer, batch: usize, cfg: &LossConfig) -> Result<Self> {
        cfg.validate()?;
        let ModelGraph {
            mut graph,
            x,
            params,
            logits,
            ..
        } = ModelGraph::build(scorer, batch)?;
        let k = scorer.num_classes();
        let d = scorer.input_dim();
        let onehot = graph.leaf("labels", &[batch, k]);

        let picked = graph.mul(logits, onehot)?;
        let f_y = graph.sum_last(picked)?;
        let lse = graph.logsumexp_last(logits)?;
        let ce_rows = graph.sub(lse, f_y)?;
        let ce = graph.sum(ce_rows)?;

        let mut classes = Vec::new();
        let mut grad_sum: Option<NodeId> = None;
        let mut hess_sum: Option<NodeId> = None;
        if cfg.uses_gradient() {
            for c in 0..k {
                let mask = graph.leaf(&format!("mask[{c}]"), &[batch]);
                let f_c = graph.slice_last(logits, c, c + 1)?;
                let f_c = graph.reshape(f_c, &[batch])?;
                let diff = graph.sub(f_y, f_c)?;
                let masked = graph.mul(diff, mask)?;
                let margin = graph.sum(masked)?;
                let (grad, curvature) = if cfg.uses_hessian() {
                    let nodes = CurvatureNodes::build(&mut graph, margin, x)?;
                    (nodes.grad, Some(nodes))
                } else {
                    (graph.grad(margin, &[x])?[0], None)
                };
                let flat = graph.reshape(grad, &[batch, d])?;
                let grad_norms = graph.norm_last(flat)?;
                let g = graph.sum(grad_norms)?;
                grad_sum = Some(match grad_sum {
                    None => g,
                    Some(acc) => graph.add(acc, g)?,
                });
                if let Some(nodes) = curvature {
                    let h = graph.sum(nodes.norms)?;
                    hess_sum = Some(match hess_sum {
                        None => h,
                        Some(acc) => graph.add(acc, h)?,
                    });
                }
                classes.push(ClassNodes {
                    mask,
                    grad_norms,
                    curvature,
                });
            }
        }

        let mut total = ce;
        if let Some(g) = grad_sum {
            let weighted = graph.scale(g, cfg.lambda1)?;
            total = graph.add(total, weighted)?;
        }
        if let Some(h) = hess_sum {
            let weighted = graph.scale(h, cfg.lambda1 * cfg.lambda2)?;
            total = graph.add(total, weighted)?;
        }
        let objective = graph.scale(total, 1.0 / batch as f64)?;
        let param_grads = graph.grad(objective, &params)?;
        Ok(LossGraph {
            graph,
            x,
            params,
            logits,
            onehot,
            classes,
            ce,
            gradient_term: grad_sum,
            hessian_term: hess_sum,
            objective,
            param_grads,
            cfg: *cfg,
            batch,
            num_classes: k,
            sample_shape: scorer.input_shape().to_vec(),
            labels: Vec::new(),
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn config(&self) -> &LossConfig {
        &self.cfg
    }

    pub fn set_params(&mut self, values: &[Tensor]) -> Result<()> {
        for (leaf, v) in self.params.clone().into_iter().zip(values) {
            self.graph.bind(leaf, v.clone())?;
        }
        Ok(())
    }

    /// Binds inputs and labels and recomputes the active `(i, c)` masks.
    pub fn bind_batch(&mut self, xs: &Tensor, labels: &[usize]) -> Result<()> {
        let (b, k) = (self.batch, self.num_classes);
        if labels.len() != b {
            return Err(Error::shape("labels", format!("{} labels for batch {b}", labels.len())));
        }
        let mut onehot = vec![0.0; b * k];
        for (i, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(Error::Label { label: y, classes: k });
            }
            onehot[i * k + y] = 1.0;
        }
        self.graph.bind(self.x, xs.clone())?;
        self.graph.bind(self.onehot, Tensor::from_parts(vec![b, k], onehot))?;
        self.labels = labels.to_vec();
        if self.classes.is_empty() {
            return Ok(());
        }
        let active = self.active_pairs()?;
        for (c, nodes) in self.classes.clone().iter().enumerate() {
            let mask = (0..b).map(|i| if active[i][c] { 1.0 } else { 0.0 }).collect();
            self.graph.bind(nodes.mask, Tensor::vector(mask))?;
        }
        Ok(())
    }

    /// `active[i][c]`: whether class `c` is penalized for sample `i`.
    pub fn active_pairs(&mut self) -> Result<Vec<Vec<bool>>> {
        let (b, k) = (self.batch, self.num_classes);
        let m = self.cfg.top_m.unwrap_or(k).min(k - 1);
        let logits = if m < k - 1 {
            Some(self.graph.value(self.logits)?.clone())
        } else {
            None
        };
        Ok((0..b)
            .map(|i| {
                let y = self.labels[i];
                let mut others: Vec<usize> = (0..k).filter(|&c| c != y).collect();
                if let Some(l) = &logits {
                    let row = l.row_slice(i);
                    // smallest margin f_y − f_c first; ties by class index
                    others.sort_by(|&a, &c| row[c].total_cmp(&row[a]).then(a.cmp(&c)));
                    others.truncate(m);
                }
                let mut active = vec![false; k];
                for c in others {
                    active[c] = true;
                }
                active
            })
            .collect())
    }

    pub fn bind_directions(&mut self, dirs: &Directions) -> Result<()> {
        let nodes: Vec<CurvatureNodes> = self.classes.iter().filter_map(|c| c.curvature).collect();
        if nodes.is_empty() {
            return Ok(());
        }
        if dirs.per_class.len() != nodes.len() {
            return Err(Error::shape(
                "directions",
                format!("{} direction tensors for {} classes", dirs.per_class.len(), nodes.len()),
            ));
        }
        let active = self.active_pairs()?;
        let d = self.sample_shape.iter().product::<usize>();
        for (c, (n, v)) in nodes.iter().zip(&dirs.per_class).enumerate() {
            for (i, row_active) in active.iter().enumerate() {
                if row_active[c] {
                    let norm = self.cfg.q.dual().norm(&v.data()[i * d..(i + 1) * d]);
                    if (norm - 1.0).abs() > UNIT_TOLERANCE {
                        return Err(Error::config(
                            "v_star",
                            format!("direction for sample {i}, class {c} has norm {norm}"),
                        ));
                    }
                }
            }
            self.graph.bind(n.v, v.clone())?;
        }
        Ok(())
    }

    /// Runs the inner ascent from fresh normal directions and binds the result.
    ///
    /// `row_keys[i]` seeds sample `i`; the stream for `(i, c)` is
    /// `(seed, row_keys[i], c)`.
    pub fn find_directions(&mut self, seed: u64, row_keys: &[u64]) -> Result<DirectionSearch> {
        let nodes: Vec<CurvatureNodes> = self.classes.iter().filter_map(|c| c.curvature).collect();
        let mut search = DirectionSearch {
            initial: Directions { per_class: Vec::new() },
            found: Directions { per_class: Vec::new() },
            updates: Vec::new(),
        };
        if nodes.is_empty() {
            return Ok(search);
        }
        if row_keys.len() != self.batch {
            return Err(Error::shape(
                "row keys",
                format!("{} keys for batch {}", row_keys.len(), self.batch),
            ));
        }
        let mut shape = vec![self.batch];
        shape.extend_from_slice(&self.sample_shape);
        let d: usize = self.sample_shape.iter().product();
        let probe = self.cfg.probe;
        for (c, n) in nodes.iter().enumerate() {
            let rows: Vec<Tensor> = row_keys
                .iter()
                .map(|&key| {
                    let mut r = rng::stream(seed, &[key, c as u64]);
                    rng::unit_direction(&mut r, &[d], Lp::L2)
                })
                .collect();
            let v0 = Tensor::stack(&rows)?.reshape(&shape)?;
            let run = n.ascend(&mut self.graph, v0.clone(), probe.steps, probe.step_size)?;
            self.graph.bind(n.v, run.v_best.clone())?;
            search.initial.per_class.push(v0);
            search.found.per_class.push(run.v_best);
            search.updates.push(run.updates);
        }
        Ok(search)
    }

    pub fn value(&mut self) -> Result<LossValue> {
        let cross_entropy = self.graph.value(self.ce)?.item();
        let gradient_term = match self.gradient_term {
            Some(n) => self.graph.value(n)?.item(),
            None => 0.0,
        };
        let hessian_term = match self.hessian_term {
            Some(n) => self.graph.value(n)?.item(),
            None => 0.0,
        };
        let total = self.graph.value(self.objective)?.item() * self.batch as f64;
        Ok(LossValue {
            cross_entropy,
            gradient_term,
            hessian_term,
            total,
        })
    }

    /// θ-gradient of the batch-mean objective, one tensor per parameter block.
    pub fn param_gradients(&mut self) -> Result<Vec<Tensor>> {
        self.param_grads
            .clone()
            .into_iter()
            .map(|id| Ok(self.graph.value(id)?.clone()))
            .collect()
    }

    pub fn logits(&mut self) -> Result<Tensor> {
        Ok(self.graph.value(self.logits)?.clone())
    }

    /// Per-row `Σ_c ‖∇f^(c)(x_i)‖₂` over active classes.
    pub fn gradient_norms(&mut self) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.batch];
        for c in self.classes.clone() {
            for (o, v) in out.iter_mut().zip(self.graph.value(c.grad_norms)?.data()) {
                *o += v;
            }
        }
        Ok(out)
    }
}

/// Cross-Hölder objective summed over a batch, with `v_star[(i, j)]` fixed.
///
/// Every active pair `j ≠ y_i` needs an entry when `λ1·λ2 > 0`.
pub fn cross_holder_loss(
    scorer: &dyn Scorer,
    xs: &Tensor,
    labels: &[usize],
    cfg: &LossConfig,
    v_star: &BTreeMap<(usize, usize), Tensor>,
) -> Result<LossValue> {
    let batch = labels.len();
    let mut lg = LossGraph::build(scorer, batch, cfg)?;
    lg.bind_batch(xs, labels)?;
    if cfg.uses_hessian() {
        let dirs = directions_from_map(&mut lg, v_star)?;
        lg.bind_directions(&dirs)?;
    }
    lg.value()
}

/// Outcome of [`LossGraph::find_directions`], kept for instrumentation.
#[derive(Clone, Debug)]
pub struct DirectionSearch {
    /// Normalized Gaussian starting points, one tensor per class.
    pub initial: Directions,
    /// Best iterates, now bound to the graph.
    pub found: Directions,
    /// Ascent updates applied per class.
    pub updates: Vec<usize>,
}

/// Packs per-pair directions into per-class tensors; inactive rows get a unit basis vector.
pub fn directions_from_map(lg: &mut LossGraph, v_star: &BTreeMap<(usize, usize), Tensor>) -> Result<Directions> {
    let active = lg.active_pairs()?;
    let d: usize = lg.sample_shape.iter().product();
    let mut shape = vec![lg.batch];
    shape.extend_from_slice(&lg.sample_shape);
    let mut per_class = Vec::with_capacity(lg.num_classes);
    for c in 0..lg.num_classes {
        let mut t = Tensor::zeros(&shape);
        for (i, row_active) in active.iter().enumerate() {
            let row = &mut t.data_mut()[i * d..(i + 1) * d];
            if row_active[c] {
                let v = v_star
                    .get(&(i, c))
                    .ok_or(Error::MissingDirection { sample: i, class: c })?;
                if v.len() != d {
                    return Err(Error::shape(
                        "v_star",
                        format!("direction ({i}, {c}) has {} entries, expected {d}", v.len()),
                    ));
                }
                row.copy_from_slice(v.data());
            } else {
                row[0] = 1.0;
            }
        }
        per_class.push(t);
    }
    Ok(Directions { per_class })
}
