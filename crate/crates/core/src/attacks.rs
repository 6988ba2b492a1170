//! Projected gradient attacks with random restarts and adversarial-accuracy curves.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{ModelGraph, Scorer};
use crate::rng;
use crate::tensor::{argmax, Lp, Tensor};

/// Samples per worker task; fixed so results never depend on the thread count.
pub const ATTACK_CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Cross-entropy of the true label.
    Ce,
    /// `max_{j≠y} f_j − f_y`.
    Cw,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Ce => "ce",
            Objective::Cw => "cw",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub epsilon: f64,
    pub norm: Lp,
    pub iterations: usize,
    pub restarts: usize,
    /// Defaults to `2.5·ε / iterations`.
    pub step_size: Option<f64>,
    pub objective: Objective,
    /// Feature range that `x + δ` must stay in.
    pub clamp: Option<(f64, f64)>,
    pub seed: u64,
}

impl AttackSpec {
    pub fn new(epsilon: f64, norm: Lp, objective: Objective) -> Self {
        AttackSpec {
            epsilon,
            norm,
            iterations: 50,
            restarts: 10,
            step_size: None,
            objective,
            clamp: None,
            seed: 0,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.step_size.unwrap_or(2.5 * self.epsilon / self.iterations as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("epsilon", "must be a positive finite radius"));
        }
        if self.norm == Lp::L1 {
            return Err(Error::UnsupportedNorm("attacks support the ℓ2 and ℓ∞ balls"));
        }
        if self.iterations == 0 {
            return Err(Error::config("iterations", "must be at least 1"));
        }
        if self.restarts == 0 {
            return Err(Error::config("restarts", "must be at least 1"));
        }
        if !(self.alpha() > 0.0 && self.alpha().is_finite()) {
            return Err(Error::config("step_size", "must be positive"));
        }
        if let Some((lo, hi)) = self.clamp {
            if !(lo < hi) {
                return Err(Error::config("clamp", "need lo < hi"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    /// `x + δ` is not classified as the true label.
    pub success: bool,
    pub delta: Tensor,
    /// Objective at the returned `δ`.
    pub objective: f64,
    pub restart: usize,
    pub predicted: usize,
}

/// Batched attack objectives; rows are independent samples.
struct AttackGraph {
    graph: Graph,
    x: NodeId,
    logits: NodeId,
    onehot: NodeId,
    cw_mask: NodeId,
    rows: [NodeId; 2],
    grads: [NodeId; 2],
}

impl AttackGraph {
    fn build(scorer: &dyn Scorer, batch: usize) -> Result<Self> {
        let ModelGraph {
            mut graph, x, logits, ..
        } = ModelGraph::build(scorer, batch)?;
        let k = scorer.num_classes();
        let onehot = graph.leaf("labels", &[batch, k]);
        let cw_mask = graph.leaf("runner_up", &[batch, k]);
        let picked = graph.mul(logits, onehot)?;
        let f_y = graph.sum_last(picked)?;
        let lse = graph.logsumexp_last(logits)?;
        let ce_rows = graph.sub(lse, f_y)?;
        let other = graph.mul(logits, cw_mask)?;
        let f_j = graph.sum_last(other)?;
        let cw_rows = graph.sub(f_j, f_y)?;
        let ce = graph.sum(ce_rows)?;
        let cw = graph.sum(cw_rows)?;
        let ce_grad = graph.grad(ce, &[x])?[0];
        let cw_grad = graph.grad(cw, &[x])?[0];
        Ok(AttackGraph {
            graph,
            x,
            logits,
            onehot,
            cw_mask,
            rows: [ce_rows, cw_rows],
            grads: [ce_grad, cw_grad],
        })
    }

    fn slot(objective: Objective) -> usize {
        match objective {
            Objective::Ce => 0,
            Objective::Cw => 1,
        }
    }
}

fn runner_up(logits: &[f64], y: usize) -> usize {
    let mut best = usize::MAX;
    for (j, &v) in logits.iter().enumerate() {
        if j != y && (best == usize::MAX || v > logits[best]) {
            best = j;
        }
    }
    best
}

fn project(delta: &mut [f64], x: &[f64], spec: &AttackSpec) {
    match spec.norm {
        Lp::LInf => delta.iter_mut().for_each(|d| *d = d.clamp(-spec.epsilon, spec.epsilon)),
        _ => {
            let n = Lp::L2.norm(delta);
            if n > spec.epsilon {
                let s = spec.epsilon / n;
                delta.iter_mut().for_each(|d| *d *= s);
            }
        }
    }
    if let Some((lo, hi)) = spec.clamp {
        for (d, &xi) in delta.iter_mut().zip(x) {
            *d = (xi + *d).clamp(lo, hi) - xi;
        }
    }
}

fn random_start(spec: &AttackSpec, d: usize, key: u64, restart: usize) -> Vec<f64> {
    let mut r = rng::stream(spec.seed, &[key, restart as u64]);
    match spec.norm {
        Lp::LInf => (0..d).map(|_| r.random_range(-spec.epsilon..=spec.epsilon)).collect(),
        _ => {
            let dir = rng::unit_direction(&mut r, &[d], Lp::L2);
            let u: f64 = r.random();
            let radius = spec.epsilon * u.powf(1.0 / d as f64);
            dir.data().iter().map(|v| v * radius).collect()
        }
    }
}

#[derive(Clone)]
struct RowState {
    success: bool,
    delta: Vec<f64>,
    objective: f64,
    predicted: usize,
}

/// Runs one restart on a batch of rows, returning per-row results.
fn run_restart(
    ag: &mut AttackGraph,
    xs: &[f64],
    labels: &[usize],
    keys: &[u64],
    spec: &AttackSpec,
    restart: usize,
    d: usize,
    k: usize,
    sample_shape: &[usize],
) -> Result<Vec<RowState>> {
    let b = labels.len();
    let mut onehot = vec![0.0; b * k];
    for (i, &y) in labels.iter().enumerate() {
        onehot[i * k + y] = 1.0;
    }
    let mut shape = vec![b];
    shape.extend_from_slice(sample_shape);
    ag.graph.bind(ag.onehot, Tensor::new(vec![b, k], onehot)?)?;

    let mut delta: Vec<f64> = Vec::with_capacity(b * d);
    for (i, &key) in keys.iter().enumerate() {
        let mut d0 = random_start(spec, d, key, restart);
        project(&mut d0, &xs[i * d..(i + 1) * d], spec);
        delta.extend(d0);
    }
    let slot = AttackGraph::slot(spec.objective);
    let alpha = spec.alpha();
    let mut first_hit: Vec<Option<RowState>> = vec![None; b];
    let mut best_fail: Vec<Option<RowState>> = vec![None; b];
    let mut final_states = Vec::with_capacity(b);
    for t in 0..=spec.iterations {
        let adv: Vec<f64> = xs.iter().zip(&delta).map(|(x, d)| x + d).collect();
        ag.graph.bind(ag.x, Tensor::new(shape.clone(), adv)?)?;
        let logits = ag.graph.value(ag.logits)?.clone();
        if !logits.all_finite() {
            return Err(Error::Divergence("non-finite logits during attack".into()));
        }
        let mut mask = vec![0.0; b * k];
        for i in 0..b {
            mask[i * k + runner_up(logits.row_slice(i), labels[i])] = 1.0;
        }
        ag.graph.bind(ag.cw_mask, Tensor::new(vec![b, k], mask)?)?;
        let obj = ag.graph.value(ag.rows[slot])?.data().to_vec();
        for i in 0..b {
            let predicted = argmax(logits.row_slice(i));
            let state = RowState {
                success: predicted != labels[i],
                delta: delta[i * d..(i + 1) * d].to_vec(),
                objective: obj[i],
                predicted,
            };
            if state.success {
                if first_hit[i].is_none() {
                    first_hit[i] = Some(state.clone());
                }
            } else if best_fail[i].as_ref().is_none_or(|s| state.objective > s.objective) {
                best_fail[i] = Some(state.clone());
            }
            if t == spec.iterations {
                final_states.push(state);
            }
        }
        if t == spec.iterations {
            break;
        }
        let grad = ag.graph.value(ag.grads[slot])?.clone();
        for i in 0..b {
            let g = &grad.data()[i * d..(i + 1) * d];
            let row = &mut delta[i * d..(i + 1) * d];
            match spec.norm {
                Lp::LInf => {
                    for (r, gi) in row.iter_mut().zip(g) {
                        *r += alpha
                            * if *gi > 0.0 {
                                1.0
                            } else if *gi < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                    }
                }
                _ => {
                    let n = Lp::L2.norm(g);
                    if n > 0.0 {
                        for (r, gi) in row.iter_mut().zip(g) {
                            *r += alpha * gi / n;
                        }
                    }
                }
            }
            project(row, &xs[i * d..(i + 1) * d], spec);
        }
    }
    // a successful final iterate wins, then the first success, then the best failure
    Ok(final_states
        .into_iter()
        .zip(first_hit.into_iter().zip(best_fail))
        .map(|(fin, (hit, fail))| {
            if fin.success {
                fin
            } else {
                hit.or(fail).expect("every row is evaluated")
            }
        })
        .collect())
}

fn attack_chunk(
    scorer: &dyn Scorer,
    xs: &[f64],
    labels: &[usize],
    keys: &[u64],
    spec: &AttackSpec,
    graphs: &mut HashMap<usize, AttackGraph>,
) -> Result<Vec<AttackOutcome>> {
    let d = scorer.input_dim();
    let k = scorer.num_classes();
    let sample_shape = scorer.input_shape().to_vec();
    let n = labels.len();
    let mut done: Vec<Option<AttackOutcome>> = vec![None; n];
    let mut best_fail: Vec<Option<AttackOutcome>> = vec![None; n];
    for restart in 0..spec.restarts {
        let active: Vec<usize> = (0..n).filter(|&i| done[i].is_none()).collect();
        if active.is_empty() {
            break;
        }
        let mut sub_x = Vec::with_capacity(active.len() * d);
        for &i in &active {
            sub_x.extend_from_slice(&xs[i * d..(i + 1) * d]);
        }
        let sub_y: Vec<usize> = active.iter().map(|&i| labels[i]).collect();
        let sub_k: Vec<u64> = active.iter().map(|&i| keys[i]).collect();
        let ag = match graphs.entry(active.len()) {
            std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::hash_map::Entry::Vacant(e) => e.insert(AttackGraph::build(scorer, active.len())?),
        };
        let states = run_restart(ag, &sub_x, &sub_y, &sub_k, spec, restart, d, k, &sample_shape)?;
        for (&i, s) in active.iter().zip(states) {
            let outcome = AttackOutcome {
                success: s.success,
                delta: Tensor::new(sample_shape.clone(), s.delta)?,
                objective: s.objective,
                restart,
                predicted: s.predicted,
            };
            if outcome.success {
                done[i] = Some(outcome);
            } else if best_fail[i].as_ref().is_none_or(|b| outcome.objective > b.objective) {
                best_fail[i] = Some(outcome);
            }
        }
    }
    Ok(done
        .into_iter()
        .zip(best_fail)
        .map(|(d, f)| d.or(f).expect("at least one restart ran"))
        .collect())
}

/// PGD on every row of `xs`, parallel over fixed-size chunks.
///
/// `keys[i]` seeds sample `i`; restart `r` of that sample draws from the
/// stream `(spec.seed, keys[i], r)` regardless of batching or scheduling.
pub fn pgd_batch(
    scorer: &dyn Scorer,
    xs: &Tensor,
    labels: &[usize],
    keys: &[u64],
    spec: &AttackSpec,
) -> Result<Vec<AttackOutcome>> {
    spec.validate()?;
    let d = scorer.input_dim();
    if xs.len() != labels.len() * d || keys.len() != labels.len() {
        return Err(Error::shape(
            "attack input",
            format!("{:?} with {} labels and {} keys", xs.shape(), labels.len(), keys.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= scorer.num_classes()) {
        return Err(Error::Label {
            label: bad,
            classes: scorer.num_classes(),
        });
    }
    let chunks: Vec<Vec<AttackOutcome>> = labels
        .par_chunks(ATTACK_CHUNK)
        .zip(keys.par_chunks(ATTACK_CHUNK))
        .zip(xs.data().par_chunks(ATTACK_CHUNK * d.max(1)))
        .map(|((y, k), x)| attack_chunk(scorer, x, y, k, spec, &mut HashMap::new()))
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

pub fn pgd_attack(scorer: &dyn Scorer, x: &Tensor, y: usize, spec: &AttackSpec) -> Result<AttackOutcome> {
    let mut shape = vec![1];
    shape.extend_from_slice(scorer.input_shape());
    if x.shape() != scorer.input_shape() {
        return Err(Error::shape(
            "attack input",
            format!("{:?}, model expects {:?}", x.shape(), scorer.input_shape()),
        ));
    }
    Ok(pgd_batch(scorer, &x.clone().reshape(&shape)?, &[y], &[0], spec)?.remove(0))
}

/// Smallest ε (to relative tolerance `rel_tol`) at which PGD succeeds, found by bisection on `[0, hi]`.
/// Returns `None` when the attack fails even at `hi`.
pub fn min_successful_epsilon(
    scorer: &dyn Scorer,
    x: &Tensor,
    y: usize,
    base: &AttackSpec,
    hi: f64,
    rel_tol: f64,
) -> Result<Option<f64>> {
    let succeeds = |eps: f64| -> Result<bool> {
        let spec = AttackSpec { epsilon: eps, ..*base };
        Ok(pgd_attack(scorer, x, y, &spec)?.success)
    };
    if !succeeds(hi)? {
        return Ok(None);
    }
    let (mut lo, mut hi) = (0.0, hi);
    while hi - lo > rel_tol * hi {
        let mid = 0.5 * (lo + hi);
        if succeeds(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Some(hi))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub epsilon: f64,
    pub attack: String,
    pub accuracy: f64,
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub clean_accuracy: f64,
    pub rows: Vec<AccuracyRow>,
}

impl AccuracyTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epsilon,attack,accuracy,n_samples\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{}", r.epsilon, r.attack, r.accuracy, r.n_samples).unwrap();
        }
        out
    }

    pub fn curve(&self, attack: &str) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.attack == attack)
            .map(|r| (r.epsilon, r.accuracy))
            .collect()
    }
}

/// Accuracy under PGD-CE, PGD-CW and their combinations over an ε grid.
///
/// Success is accumulated along the sorted grid: a perturbation found at a
/// smaller radius also lies in every larger ball, so curves never increase.
/// Misclassified clean samples count as non-robust at every ε.
pub fn adversarial_accuracy(
    scorer: &dyn Scorer,
    data: &Dataset,
    eps_grid: &[f64],
    base: &AttackSpec,
) -> Result<AccuracyTable> {
    if eps_grid.is_empty() {
        return Err(Error::config("eps_grid", "need at least one radius"));
    }
    if data.is_empty() {
        return Err(Error::Dataset("evaluation set is empty".into()));
    }
    let mut grid = eps_grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let n = data.len();
    let keys: Vec<u64> = (0..n as u64).collect();
    let idx: Vec<usize> = (0..n).collect();
    let (xs, ys) = data.batch(&idx);
    let logits = crate::models::score_batch(scorer, &xs)?;
    let clean: Vec<bool> = (0..n).map(|i| argmax(logits.row_slice(i)) == ys[i]).collect();
    let n_clean = clean.iter().filter(|&&c| c).count();

    let mut broken = [
        clean.iter().map(|c| !c).collect::<Vec<_>>(),
        clean.iter().map(|c| !c).collect(),
    ];
    let mut rows = Vec::new();
    for &eps in &grid {
        for (slot, objective) in [Objective::Ce, Objective::Cw].into_iter().enumerate() {
            let attack_idx: Vec<usize> = (0..n).filter(|&i| !broken[slot][i]).collect();
            if attack_idx.is_empty() {
                continue;
            }
            let (ax, ay) = data.batch(&attack_idx);
            let ak: Vec<u64> = attack_idx.iter().map(|&i| keys[i]).collect();
            let spec = AttackSpec {
                epsilon: eps,
                objective,
                ..*base
            };
            for (&i, o) in attack_idx.iter().zip(pgd_batch(scorer, &ax, &ay, &ak, &spec)?) {
                broken[slot][i] |= o.success;
            }
        }
        let acc = |robust: usize| robust as f64 / n as f64;
        let ce = broken[0].iter().filter(|&&b| !b).count();
        let cw = broken[1].iter().filter(|&&b| !b).count();
        let both = (0..n).filter(|&i| !broken[0][i] && !broken[1][i]).count();
        for (name, value) in [
            ("ce", acc(ce)),
            ("cw", acc(cw)),
            ("paper_worst", acc(ce.min(cw))),
            ("strict_worst", acc(both)),
        ] {
            rows.push(AccuracyRow {
                epsilon: eps,
                attack: name.to_string(),
                accuracy: value,
                n_samples: n,
            });
        }
    }
    Ok(AccuracyTable {
        clean_accuracy: n_clean as f64 / n as f64,
        rows,
    })
}
