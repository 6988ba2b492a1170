//! Mini-batch SGD for plain, Cross-Lipschitz, Cross-Hölder and PGD
//! adversarial training.
//!
//! Every random draw is keyed by `(seed, epoch, batch, position)` and each
//! batch is split into fixed-size chunks that are reduced in order, so a run
//! is bit-reproducible regardless of the worker count.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd_batch, AttackSpec, Objective};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{DirectionSearch, LossConfig, LossGraph, LossValue};
use crate::models::{Scorer, ScoringModel};
use crate::opnorm::OpNormProbe;
use crate::rng;
use crate::tensor::{Lp, Tensor};

/// Rows per loss graph; fixed so the reduction order never depends on threads.
pub const TRAIN_CHUNK: usize = 16;

const SHUFFLE_KEY: u64 = 0x5348_5546;
const DIRECTION_KEY: u64 = 0x4449_5245;
const ATTACK_KEY: u64 = 0x4154_544b;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum TrainMode {
    Plain,
    CrossLipschitz {
        lambda1: f64,
    },
    CrossHolder {
        lambda1: f64,
        lambda2: f64,
    },
    Adversarial {
        epsilon: f64,
        norm: Lp,
        iterations: usize,
        restarts: usize,
        objective: Objective,
    },
}

impl TrainMode {
    pub fn name(&self) -> &'static str {
        match self {
            TrainMode::Plain => "plain",
            TrainMode::CrossLipschitz { .. } => "cross-lipschitz",
            TrainMode::CrossHolder { .. } => "cross-holder",
            TrainMode::Adversarial { .. } => "adversarial",
        }
    }

    /// Inner attack defaults: 10 iterations, one restart, CE objective.
    pub fn adversarial(epsilon: f64, norm: Lp) -> Self {
        TrainMode::Adversarial {
            epsilon,
            norm,
            iterations: 10,
            restarts: 1,
            objective: Objective::Ce,
        }
    }

    fn weights(&self) -> (f64, f64) {
        match *self {
            TrainMode::CrossLipschitz { lambda1 } => (lambda1, 0.0),
            TrainMode::CrossHolder { lambda1, lambda2 } => (lambda1, lambda2),
            _ => (0.0, 0.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub mode: TrainMode,
    /// Inner ascent `T` and step `o`; used by Cross-Hölder only.
    pub probe: OpNormProbe,
    pub top_m: Option<usize>,
    /// Save a checkpoint every this many epochs into `checkpoint_dir`.
    pub checkpoint_every: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            learning_rate: 0.01,
            seed: 0,
            mode: TrainMode::Plain,
            probe: OpNormProbe::default(),
            top_m: None,
            checkpoint_every: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be a finite number > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::config("checkpoint_every", "must be at least 1"));
        }
        if self.checkpoint_every.is_some() && self.checkpoint_dir.is_none() {
            return Err(Error::config("checkpoint_dir", "required when checkpoint_every is set"));
        }
        if let TrainMode::Adversarial {
            epsilon,
            norm,
            iterations,
            restarts,
            objective,
        } = self.mode
        {
            if !(epsilon >= 0.0 && epsilon.is_finite()) {
                return Err(Error::config("epsilon", "must be a finite number ≥ 0"));
            }
            if epsilon > 0.0 {
                let mut spec = AttackSpec::new(epsilon, norm, objective);
                spec.iterations = iterations;
                spec.restarts = restarts;
                spec.validate()?;
            }
        }
        self.loss_config().validate()
    }

    pub fn loss_config(&self) -> LossConfig {
        let (lambda1, lambda2) = self.mode.weights();
        LossConfig {
            lambda1,
            lambda2,
            q: Lp::L2,
            probe: self.probe,
            top_m: self.top_m,
        }
    }

    /// Settings that must match for a checkpoint to be resumed.
    fn trajectory_key(&self) -> TrainConfig {
        TrainConfig {
            epochs: 0,
            checkpoint_every: None,
            checkpoint_dir: None,
            ..self.clone()
        }
    }
}

/// One line of the metrics log. Penalty means are per sample and absent
/// when the mode does not compute them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    /// Accuracy of the pre-update predictions seen during the epoch.
    pub clean_acc: f64,
    pub grad_term: Option<f64>,
    pub hess_term: Option<f64>,
}

/// Hooks for inspecting the inner loop; every method defaults to a no-op.
pub trait TrainObserver {
    /// Called once per chunk after the direction search, before the θ-step.
    fn on_directions(&mut self, _epoch: usize, _batch: usize, _rows: &[usize], _search: &DirectionSearch) {}
    /// Called with the parameters before the update and the batch-mean gradient.
    fn on_step(&mut self, _epoch: usize, _batch: usize, _rows: &[usize], _theta: &Tensor, _grad: &Tensor) {}
}

pub struct NoObserver;

impl TrainObserver for NoObserver {}

#[derive(Serialize, Deserialize)]
struct CheckpointState {
    epochs_done: usize,
    config: TrainConfig,
    metrics: Vec<EpochMetrics>,
}

const CHECKPOINT_MODEL: &str = "checkpoint.hnet";
const CHECKPOINT_STATE: &str = "checkpoint.json";

struct ChunkOut {
    grads: Vec<Tensor>,
    value: LossValue,
    correct: usize,
    search: Option<DirectionSearch>,
}

pub struct Trainer {
    model: ScoringModel,
    cfg: TrainConfig,
    epochs_done: usize,
    metrics: Vec<EpochMetrics>,
    /// Loss graphs keyed by `(chunk position, rows)`.
    graphs: BTreeMap<(usize, usize), LossGraph>,
    /// Wall-clock seconds per epoch; kept out of the metrics for reproducible logs.
    pub epoch_seconds: Vec<f64>,
}

impl Trainer {
    pub fn new(model: ScoringModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            model,
            cfg,
            epochs_done: 0,
            metrics: Vec::new(),
            graphs: BTreeMap::new(),
            epoch_seconds: Vec::new(),
        })
    }

    /// Continues from the checkpoint in `dir`; `cfg` may only change the epoch count and checkpointing.
    pub fn resume(dir: &Path, cfg: TrainConfig) -> Result<Self> {
        let state_path = dir.join(CHECKPOINT_STATE);
        let text = std::fs::read_to_string(&state_path).map_err(|e| Error::io(&state_path, e))?;
        let state: CheckpointState =
            serde_json::from_str(&text).map_err(|e| Error::format(&state_path, e.to_string()))?;
        if state.config.trajectory_key() != cfg.trajectory_key() {
            return Err(Error::config(
                "resume",
                "checkpoint was written with a different training configuration",
            ));
        }
        let model = ScoringModel::load(&dir.join(CHECKPOINT_MODEL))?;
        let mut t = Trainer::new(model, cfg)?;
        t.epochs_done = state.epochs_done;
        t.metrics = state.metrics;
        Ok(t)
    }

    pub fn model(&self) -> &ScoringModel {
        &self.model
    }

    pub fn into_model(self) -> ScoringModel {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn metrics(&self) -> &[EpochMetrics] {
        &self.metrics
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    /// Runs the remaining epochs up to `cfg.epochs`.
    pub fn train(&mut self, data: &Dataset, observer: &mut dyn TrainObserver) -> Result<&[EpochMetrics]> {
        self.check_data(data)?;
        while self.epochs_done < self.cfg.epochs {
            let start = Instant::now();
            let m = self.run_epoch(data, self.epochs_done, observer)?;
            self.epoch_seconds.push(start.elapsed().as_secs_f64());
            self.metrics.push(m);
            self.epochs_done += 1;
            if let (Some(every), Some(dir)) = (self.cfg.checkpoint_every, &self.cfg.checkpoint_dir) {
                if self.epochs_done.is_multiple_of(every) || self.epochs_done == self.cfg.epochs {
                    self.save_checkpoint(&dir.clone())?;
                }
            }
        }
        Ok(&self.metrics)
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.model.save(&dir.join(CHECKPOINT_MODEL))?;
        let state = CheckpointState {
            epochs_done: self.epochs_done,
            config: self.cfg.clone(),
            metrics: self.metrics.clone(),
        };
        let path = dir.join(CHECKPOINT_STATE);
        let text = serde_json::to_string_pretty(&state).expect("checkpoint state serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        if data.sample_shape() != self.model.input_shape() {
            return Err(Error::Dataset(format!(
                "samples have shape {:?}, model expects {:?}",
                data.sample_shape(),
                self.model.input_shape()
            )));
        }
        if data.num_classes() > self.model.num_classes() {
            return Err(Error::Dataset(format!(
                "{} classes in data, model has {}",
                data.num_classes(),
                self.model.num_classes()
            )));
        }
        Ok(())
    }

    /// Seeded Fisher–Yates order of the training indices for `epoch`.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(self.cfg.seed, &[SHUFFLE_KEY, epoch as u64]));
        order
    }

    fn run_epoch(&mut self, data: &Dataset, epoch: usize, observer: &mut dyn TrainObserver) -> Result<EpochMetrics> {
        let order = self.epoch_order(data.len(), epoch);
        let loss_cfg = self.cfg.loss_config();
        let (mut total, mut grad_term, mut hess_term, mut correct) = (0.0, 0.0, 0.0, 0usize);
        for (b, rows) in order.chunks(self.cfg.batch_size).enumerate() {
            let (value, hits) = self.batch_step(data, rows, epoch, b, observer)?;
            total += value.total;
            grad_term += value.gradient_term;
            hess_term += value.hessian_term;
            correct += hits;
        }
        let n = data.len() as f64;
        Ok(EpochMetrics {
            epoch,
            loss: total / n,
            clean_acc: correct as f64 / n,
            grad_term: loss_cfg.uses_gradient().then_some(grad_term / n),
            hess_term: loss_cfg.uses_hessian().then_some(hess_term / n),
        })
    }

    fn batch_inputs(&self, data: &Dataset, rows: &[usize], epoch: usize, b: usize) -> Result<(Tensor, Vec<usize>)> {
        let (xs, labels) = data.batch(rows);
        match self.cfg.mode {
            TrainMode::Adversarial {
                epsilon,
                norm,
                iterations,
                restarts,
                objective,
            } if epsilon > 0.0 => {
                let mut spec = AttackSpec::new(epsilon, norm, objective);
                spec.iterations = iterations;
                spec.restarts = restarts;
                spec.clamp = data.clamp();
                spec.seed = rng::stream(self.cfg.seed, &[ATTACK_KEY, epoch as u64, b as u64]).next_u64();
                let keys: Vec<u64> = (0..rows.len() as u64).collect();
                let outcomes = pgd_batch(&self.model, &xs, &labels, &keys, &spec)?;
                let d = data.sample_dim();
                let mut adv = xs;
                for (i, o) in outcomes.iter().enumerate() {
                    for (a, v) in adv.data_mut()[i * d..(i + 1) * d].iter_mut().zip(o.delta.data()) {
                        *a += v;
                    }
                }
                Ok((adv, labels))
            }
            _ => Ok((xs, labels)),
        }
    }

    fn batch_step(
        &mut self,
        data: &Dataset,
        rows: &[usize],
        epoch: usize,
        b: usize,
        observer: &mut dyn TrainObserver,
    ) -> Result<(LossValue, usize)> {
        let (xs, labels) = self.batch_inputs(data, rows, epoch, b)?;
        let loss_cfg = self.cfg.loss_config();
        let d = data.sample_dim();
        let n = rows.len();
        let direction_seed = rng::stream(self.cfg.seed, &[DIRECTION_KEY, epoch as u64, b as u64]).next_u64();

        let spans: Vec<(usize, usize)> = (0..n)
            .step_by(TRAIN_CHUNK)
            .map(|s| (s, (s + TRAIN_CHUNK).min(n)))
            .collect();
        let mut graphs = Vec::with_capacity(spans.len());
        for (pos, &(s, e)) in spans.iter().enumerate() {
            let g = match self.graphs.remove(&(pos, e - s)) {
                Some(g) => g,
                None => LossGraph::build(&self.model, e - s, &loss_cfg)?,
            };
            graphs.push(g);
        }
        let params = self.model.param_values();
        let sample_shape = data.sample_shape().to_vec();
        let outs: Vec<Result<ChunkOut>> = graphs
            .par_iter_mut()
            .zip(spans.par_iter())
            .map(|(lg, &(s, e))| {
                lg.set_params(&params)?;
                let mut shape = vec![e - s];
                shape.extend_from_slice(&sample_shape);
                let chunk = Tensor::new(shape, xs.data()[s * d..e * d].to_vec())?;
                lg.bind_batch(&chunk, &labels[s..e])?;
                let search = if loss_cfg.uses_hessian() {
                    let keys: Vec<u64> = (s as u64..e as u64).collect();
                    Some(lg.find_directions(direction_seed, &keys)?)
                } else {
                    None
                };
                let value = lg.value()?;
                let logits = lg.logits()?;
                let correct = (0..e - s)
                    .filter(|&i| argmax(logits.row_slice(i)) == labels[s + i])
                    .count();
                let grads = lg.param_gradients()?;
                Ok(ChunkOut {
                    grads,
                    value,
                    correct,
                    search,
                })
            })
            .collect();
        for (pos, (g, &(s, e))) in graphs.into_iter().zip(&spans).enumerate() {
            self.graphs.insert((pos, e - s), g);
        }

        let mut value = LossValue {
            cross_entropy: 0.0,
            gradient_term: 0.0,
            hessian_term: 0.0,
            total: 0.0,
        };
        let mut correct = 0;
        let mut grad: Option<Vec<Tensor>> = None;
        for (out, &(s, e)) in outs.into_iter().zip(&spans) {
            let out = out?;
            if let Some(search) = &out.search {
                observer.on_directions(epoch, b, &rows[s..e], search);
            }
            let w = (e - s) as f64 / n as f64;
            match &mut grad {
                None => grad = Some(out.grads.iter().map(|t| t.scale(w)).collect()),
                Some(acc) => {
                    for (a, t) in acc.iter_mut().zip(&out.grads) {
                        a.axpy(w, t)?;
                    }
                }
            }
            value.cross_entropy += out.value.cross_entropy;
            value.gradient_term += out.value.gradient_term;
            value.hessian_term += out.value.hessian_term;
            value.total += out.value.total;
            correct += out.correct;
        }
        if !value.total.is_finite() {
            return Err(Error::Divergence(format!(
                "training loss is {} at epoch {epoch}, batch {b}",
                value.total
            )));
        }
        let grad = self.model.flatten_blocks(&grad.unwrap_or_default());
        if !grad.all_finite() {
            return Err(Error::Divergence(format!(
                "non-finite parameter gradient at epoch {epoch}, batch {b}"
            )));
        }
        observer.on_step(epoch, b, rows, self.model.theta(), &grad);
        let mut theta = self.model.theta().clone();
        theta.axpy(-self.cfg.learning_rate, &grad)?;
        self.model.set_theta(theta)?;
        Ok((value, correct))
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Trains `model` from scratch and returns it with the per-epoch metrics.
pub fn train(
    model: ScoringModel,
    data: &Dataset,
    cfg: TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(ScoringModel, Vec<EpochMetrics>)> {
    let mut t = Trainer::new(model, cfg)?;
    t.train(data, observer)?;
    let metrics = t.metrics.clone();
    Ok((t.into_model(), metrics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_blobs;
    use crate::models::{build_mlp, margin_graph_pairs};
    use crate::opnorm::estimate_opnorm_rows;

    fn blobs() -> Dataset {
        make_blobs(96, 2, 2, 3.0, 7).unwrap()
    }

    fn mlp(seed: u64) -> ScoringModel {
        build_mlp(&[2], &[8], 2, seed).unwrap()
    }

    fn run(mode: TrainMode, epochs: usize) -> (ScoringModel, Vec<EpochMetrics>) {
        let cfg = TrainConfig {
            epochs,
            batch_size: 32,
            learning_rate: 0.05,
            seed: 3,
            mode,
            ..Default::default()
        };
        train(mlp(1), &blobs(), cfg, &mut NoObserver).unwrap()
    }

    #[test]
    fn zero_weights_match_plain_bit_for_bit() {
        let (plain, pm) = run(TrainMode::Plain, 3);
        for mode in [
            TrainMode::CrossLipschitz { lambda1: 0.0 },
            TrainMode::CrossHolder {
                lambda1: 0.0,
                lambda2: 0.0,
            },
            TrainMode::adversarial(0.0, Lp::L2),
        ] {
            let (m, metrics) = run(mode, 3);
            assert_eq!(m.theta(), plain.theta(), "{}", mode.name());
            assert_eq!(
                metrics.iter().map(|e| e.loss).collect::<Vec<_>>(),
                pm.iter().map(|e| e.loss).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn repeat_runs_and_thread_counts_agree() {
        let mode = TrainMode::CrossHolder {
            lambda1: 0.05,
            lambda2: 0.5,
        };
        let (a, _) = run(mode, 2);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let (b, _) = pool.install(|| run(mode, 2));
        assert_eq!(a.theta(), b.theta());
    }

    #[derive(Default)]
    struct Record {
        updates: Vec<usize>,
        initial: Vec<Tensor>,
        found: Vec<Tensor>,
        steps: usize,
    }

    impl TrainObserver for Record {
        fn on_directions(&mut self, _e: usize, _b: usize, _rows: &[usize], s: &DirectionSearch) {
            self.updates.extend(&s.updates);
            self.initial.extend(s.initial.per_class.iter().cloned());
            self.found.extend(s.found.per_class.iter().cloned());
        }
        fn on_step(&mut self, _e: usize, _b: usize, _rows: &[usize], _t: &Tensor, _g: &Tensor) {
            self.steps += 1;
        }
    }

    #[test]
    fn one_batch_gets_exactly_t_updates_per_pair() {
        let data = blobs().subset(&(0..16).collect::<Vec<_>>());
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 16,
            mode: TrainMode::CrossHolder {
                lambda1: 0.02,
                lambda2: 0.5,
            },
            probe: OpNormProbe {
                steps: 7,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut rec = Record::default();
        train(mlp(0), &data, cfg, &mut rec).unwrap();
        assert_eq!(rec.steps, 1);
        assert_eq!(rec.updates, vec![7, 7]);
        for v in &rec.initial {
            for r in 0..16 {
                assert!((Lp::L2.norm(v.row_slice(r)) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn directions_are_fresh_every_batch() {
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            mode: TrainMode::CrossHolder {
                lambda1: 0.02,
                lambda2: 0.5,
            },
            ..Default::default()
        };
        let data = blobs().subset(&(0..32).collect::<Vec<_>>());
        let mut rec = Record::default();
        train(mlp(0), &data, cfg, &mut rec).unwrap();
        // 2 epochs × 2 batches × 2 classes
        assert_eq!(rec.initial.len(), 8);
        for i in 0..rec.initial.len() {
            for j in 0..i {
                assert_ne!(rec.initial[i], rec.initial[j]);
            }
        }
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted() {
        let dir = tempfile::tempdir().unwrap();
        let base = TrainConfig {
            epochs: 3,
            batch_size: 32,
            seed: 11,
            mode: TrainMode::CrossHolder {
                lambda1: 0.02,
                lambda2: 0.5,
            },
            ..Default::default()
        };
        let (full, full_metrics) = train(mlp(2), &blobs(), base.clone(), &mut NoObserver).unwrap();
        let first = TrainConfig {
            epochs: 1,
            checkpoint_every: Some(1),
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..base.clone()
        };
        train(mlp(2), &blobs(), first, &mut NoObserver).unwrap();
        let mut resumed = Trainer::resume(dir.path(), base.clone()).unwrap();
        assert_eq!(resumed.epochs_done(), 1);
        resumed.train(&blobs(), &mut NoObserver).unwrap();
        assert_eq!(resumed.model().theta(), full.theta());
        assert_eq!(resumed.metrics(), &full_metrics[..]);

        let other = TrainConfig {
            learning_rate: 0.02,
            ..base
        };
        assert!(matches!(Trainer::resume(dir.path(), other), Err(Error::Config { .. })));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            TrainConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
            TrainConfig {
                mode: TrainMode::CrossLipschitz { lambda1: -1.0 },
                ..Default::default()
            },
            TrainConfig {
                checkpoint_every: Some(2),
                ..Default::default()
            },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config { .. })), "{cfg:?}");
        }
    }

    #[test]
    fn divergence_aborts() {
        let cfg = TrainConfig {
            epochs: 5,
            learning_rate: 1e200,
            ..Default::default()
        };
        let err = train(mlp(0), &blobs(), cfg, &mut NoObserver).unwrap_err();
        assert!(matches!(err, Error::Divergence(_)), "{err}");
    }

    #[test]
    fn cross_lipschitz_shrinks_gradient_term() {
        let (_, metrics) = run(TrainMode::CrossLipschitz { lambda1: 0.5 }, 8);
        let g: Vec<f64> = metrics.iter().map(|m| m.grad_term.unwrap()).collect();
        assert!(g.last().unwrap() < g.first().unwrap(), "{g:?}");
        assert!(metrics.last().unwrap().clean_acc > 0.95);
    }

    fn mean_opnorm(model: &ScoringModel, data: &Dataset) -> f64 {
        let rows: Vec<usize> = (0..data.len()).collect();
        let (xs, labels) = data.batch(&rows);
        let pairs: Vec<(usize, usize)> = labels.iter().map(|&y| (y, 1 - y)).collect();
        let mut mg = margin_graph_pairs(model, &xs, &pairs).unwrap();
        let keys: Vec<u64> = (0..rows.len() as u64).collect();
        let est = estimate_opnorm_rows(&mut mg, &OpNormProbe::evaluation(50, 0), &keys).unwrap();
        est.iter().map(|e| e.value).sum::<f64>() / est.len() as f64
    }

    #[test]
    fn cross_holder_lowers_curvature_on_blobs() {
        let epochs = 15;
        let (plain, _) = run(TrainMode::Plain, epochs);
        let (reg, _) = run(
            TrainMode::CrossHolder {
                lambda1: 0.02,
                lambda2: 0.5,
            },
            epochs,
        );
        let eval = make_blobs(40, 2, 2, 3.0, 99).unwrap();
        let (p, r) = (mean_opnorm(&plain, &eval), mean_opnorm(&reg, &eval));
        assert!(r < p, "regularized {r} vs plain {p}");
    }
}
