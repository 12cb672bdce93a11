//! The training loop.
//!
//! Each step draws a strong and a weak view of every batch row, embeds the
//! weak view with the teacher, queries the support set, mixes, weights and
//! evaluates the loss against the student prediction of the strong view, and
//! (when symmetric) repeats with the views swapped. Gradients are averaged
//! over rows, the student takes an SGD step, the teacher an EMA step, and the
//! weak-view teacher embeddings are enqueued.

use std::time::Instant;

use rand::seq::SliceRandom;

use crate::diagnostics::DiagnosticsAccumulator;
use crate::error::{Error, Result};
use crate::evaluation::{knn_accuracy, linear_probe, FeatureBank};
use crate::exec::Execution;
use crate::harness::config::{EvalConfig, RunConfig, Selection};
use crate::harness::dataset::{generate_dataset, raw_input_knn, Dataset};
use crate::harness::manifest::{
    BuildStamp, Checkpoint, EpochMetrics, EvalReport, RunManifest, CHECKPOINT_VERSION, MANIFEST_VERSION,
};
use crate::model::{augment, EncoderPair, LrSchedule, SgdConfig, Student, StudentGrads, StudentOptimizer};
use crate::objective::{row_objective, weights_cas, MixPolicy, WeightScheme};
use crate::rng::{derive_seed, rng_for, stream};
use crate::support_set::{NeighborSet, SupportSet};
use crate::vecmath::{normalized, EmbeddingBatch};

/// Which view the student sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Student on the strong view `x¹`, teacher on the weak view `x²`.
    Forward,
    /// Views swapped.
    Mirrored,
}

impl Direction {
    fn tag(self) -> u64 {
        match self {
            Direction::Forward => 0,
            Direction::Mirrored => 1,
        }
    }
}

/// The augmented views of one batch.
#[derive(Clone, Debug)]
pub struct StepBatch {
    pub step: usize,
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub x1: Vec<Vec<f64>>,
    pub x2: Vec<Vec<f64>>,
}

/// Per-step settings shared by every row.
#[derive(Clone, Debug)]
pub struct StepPlan {
    pub scheme: WeightScheme,
    pub selection: Selection,
    /// Neighbors per anchor for this step (capped by the support size).
    pub k: usize,
    pub mix: MixPolicy,
    pub batch_lambda: Option<f64>,
    pub seed: u64,
}

/// Per-anchor diagnostic input: neighbors, CAS weights, anchor label.
pub type DiagRecord = (NeighborSet, Vec<f64>, usize);

/// Sums over the rows of one direction.
pub struct DirectionResult {
    pub loss_sum: f64,
    pub grads: StudentGrads,
    /// Normalized teacher embeddings, one per row.
    pub teacher: Vec<Vec<f64>>,
    pub records: Vec<DiagRecord>,
}

fn select(
    support: &SupportSet,
    z: &[f64],
    label: usize,
    plan: &StepPlan,
    seed: u64,
) -> Result<NeighborSet> {
    match plan.selection {
        Selection::Cosine => support.topk_neighbors(z, plan.k),
        Selection::Random => support.random_neighbors(z, plan.k, seed),
        Selection::Oracle => support.oracle_neighbors(z, label, plan.k, seed),
    }
}

/// Loss and parameter gradients of one view direction, summed over rows.
/// With `collect` set, the per-anchor diagnostic records are returned too.
///
/// The student and teacher see the whole batch at once, so batch-norm layers
/// use the statistics of that direction's views.
pub fn direction_pass(
    pair: &EncoderPair,
    support: &SupportSet,
    batch: &StepBatch,
    plan: &StepPlan,
    dir: Direction,
    collect: bool,
    exec: Execution,
) -> Result<DirectionResult> {
    let (xs, xt) = match dir {
        Direction::Forward => (&batch.x1, &batch.x2),
        Direction::Mirrored => (&batch.x2, &batch.x1),
    };
    let teacher = pair
        .teacher
        .embed_batch(xt, exec)?
        .iter()
        .map(|z| normalized(z))
        .collect::<Result<Vec<_>>>()?;
    let pass = pair.student.forward_batch(xs, exec)?;
    let rows = exec.try_map(batch.indices.len(), |r| -> Result<(f64, Vec<f64>, Option<DiagRecord>)> {
        let path = [batch.step as u64, r as u64, dir.tag()];
        let label = batch.labels[r];
        let zt = &teacher[r];
        let neighbors = select(support, zt, label, plan, derive_seed(plan.seed, &[stream::SELECT, path[0], path[1], path[2]]))?;
        let q1 = normalized(&pass.projections[r])?;
        let lambda = if plan.mix.is_off() {
            None
        } else {
            let mut rng = rng_for(plan.seed, &[stream::LAMBDA, path[0], path[1], path[2]]);
            plan.mix.lambda_for_row(neighbors.k(), plan.batch_lambda, &mut rng)
        };
        let obj = row_objective(&pass.predictions[r], zt, &neighbors, &plan.scheme, lambda, Some(&q1))?;
        let record = if collect && neighbors.k() > 0 {
            let cas = weights_cas(&neighbors, &q1, &vec![1.0; neighbors.k()])?;
            Some((neighbors, cas, label))
        } else {
            None
        };
        Ok((obj.breakdown.total, obj.grad_p1, record))
    })?;
    let mut loss_sum = 0.0;
    let mut grad_p = Vec::with_capacity(rows.len());
    let mut records = Vec::new();
    for (loss, g, rec) in rows {
        loss_sum += loss;
        grad_p.push(g);
        records.extend(rec);
    }
    let mut grads = StudentGrads::zeros_like(&pair.student);
    pair.student.backward_batch(&pass, &grad_p, &mut grads, exec)?;
    Ok(DirectionResult {
        loss_sum,
        grads,
        teacher,
        records,
    })
}

/// Result of one optimization step, before the update is applied.
pub struct StepObjective {
    /// Mean loss over rows (and over directions when symmetric).
    pub loss: f64,
    /// Gradient of `loss` with respect to the student parameters.
    pub grads: StudentGrads,
    /// Weak-view teacher embeddings to enqueue.
    pub enqueue: Vec<Vec<f64>>,
    pub records: Vec<DiagRecord>,
}

/// Live state of one run.
pub struct Trainer {
    pub config: RunConfig,
    pub data: Dataset,
    pub pair: EncoderPair,
    pub optimizer: StudentOptimizer,
    pub support: SupportSet,
    pub schedule: LrSchedule,
    pub global_step: usize,
    pub step_losses: Vec<f64>,
    pub step_lrs: Vec<f64>,
    pub epochs: Vec<EpochMetrics>,
}

impl Trainer {
    pub fn new(config: RunConfig, data: Dataset) -> Result<Self> {
        config.validate()?;
        if data.spec != config.dataset {
            return Err(crate::error::invalid("dataset does not match the configured dataset parameters"));
        }
        let mut rng = rng_for(config.seed, &[stream::INIT]);
        let pair = EncoderPair::init(&config.architecture, config.momentum, &mut rng)?;
        let optimizer = StudentOptimizer::new(
            &pair.student,
            SgdConfig {
                momentum: config.sgd_momentum,
                weight_decay: config.weight_decay,
            },
        );
        let support = SupportSet::new(config.support_capacity, config.architecture.embed_dim)?;
        let schedule = LrSchedule::new(config.base_lr, config.warmup_epochs, config.epochs, config.steps_per_epoch())?;
        Ok(Self {
            config,
            data,
            pair,
            optimizer,
            support,
            schedule,
            global_step: 0,
            step_losses: Vec::new(),
            step_lrs: Vec::new(),
            epochs: Vec::new(),
        })
    }

    fn exec(&self) -> Execution {
        self.config.execution
    }

    /// Training-set order for `epoch`.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        order.shuffle(&mut rng_for(self.config.seed, &[stream::SHUFFLE, epoch as u64]));
        order
    }

    /// Augmented views for the rows `indices` at global step `step`.
    pub fn make_batch(&self, step: usize, indices: &[usize]) -> StepBatch {
        let d = self.data.dim();
        let aug = self.config.augment;
        let seed = self.config.seed;
        let views = self.exec().map(indices.len(), |r| {
            let x = self.data.train.row(d, indices[r]);
            let s = |view: u64| derive_seed(seed, &[stream::AUGMENT, step as u64, indices[r] as u64, view]);
            (augment(x, &aug.student, s(0)), augment(x, &aug.teacher, s(1)))
        });
        let (x1, x2) = views.into_iter().unzip();
        StepBatch {
            step,
            indices: indices.to_vec(),
            labels: indices.iter().map(|&i| self.data.train.labels[i]).collect(),
            x1,
            x2,
        }
    }

    /// Settings for `step` given the current support set.
    pub fn plan(&self, step: usize) -> StepPlan {
        let spec = self.config.method.spec();
        let mix = self.config.effective_mix();
        let batch_lambda = mix.draw_batch(&mut rng_for(self.config.seed, &[stream::LAMBDA, step as u64]));
        StepPlan {
            scheme: spec.scheme,
            selection: spec.selection,
            k: self.config.effective_k().min(self.support.len()),
            mix,
            batch_lambda,
            seed: self.config.seed,
        }
    }

    /// Loss and averaged gradients for one batch, without updating anything.
    pub fn objective(&self, batch: &StepBatch, plan: &StepPlan, collect: bool) -> Result<StepObjective> {
        let n = batch.indices.len() as f64;
        let fwd = direction_pass(&self.pair, &self.support, batch, plan, Direction::Forward, collect, self.exec())?;
        let (loss, mut grads, scale) = if self.config.symmetric_loss {
            let mir = direction_pass(&self.pair, &self.support, batch, plan, Direction::Mirrored, false, self.exec())?;
            let mut g = fwd.grads;
            g.add_assign(&mir.grads);
            (0.5 * (fwd.loss_sum / n + mir.loss_sum / n), g, 0.5 / n)
        } else {
            (fwd.loss_sum / n, fwd.grads, 1.0 / n)
        };
        grads.scale(scale);
        Ok(StepObjective {
            loss,
            grads,
            enqueue: fwd.teacher,
            records: fwd.records,
        })
    }

    /// Runs one optimization step on `indices`.
    pub fn step(&mut self, indices: &[usize], diag: Option<&mut DiagnosticsAccumulator>) -> Result<f64> {
        let step = self.global_step;
        let batch = self.make_batch(step, indices);
        let plan = self.plan(step);
        let full_k = plan.k == self.config.effective_k() && plan.k > 0;
        let obj = self.objective(&batch, &plan, diag.is_some() && full_k)?;
        if !obj.loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, value: obj.loss });
        }
        let lr = self.schedule.lr_at(step)?;
        self.optimizer.step(&mut self.pair.student, &obj.grads, lr);
        self.pair.ema_update();
        let rows = EmbeddingBatch::from_rows(self.config.architecture.embed_dim, &obj.enqueue)?;
        self.support.refresh(&rows, Some(&batch.labels))?;
        if let Some(acc) = diag {
            for (neighbors, cas, label) in obj.records {
                acc.push(neighbors, &cas, label)?;
            }
        }
        self.step_losses.push(obj.loss);
        self.step_lrs.push(lr);
        self.global_step += 1;
        Ok(obj.loss)
    }

    pub fn run_epoch(&mut self, epoch: usize) -> Result<EpochMetrics> {
        let order = self.epoch_order(epoch);
        let b = self.config.batch_size;
        let mut acc = DiagnosticsAccumulator::new();
        let mut losses = Vec::new();
        let mut lr = 0.0;
        for chunk in order.chunks_exact(b) {
            losses.push(self.step(chunk, Some(&mut acc))?);
            lr = *self.step_lrs.last().expect("a step was recorded");
        }
        let summary = match acc.finish(self.global_step) {
            Ok(s) => Some(s),
            Err(Error::InvalidArgument(_)) => None,
            Err(e) => return Err(e),
        };
        let m = EpochMetrics {
            epoch,
            loss_mean: losses.iter().sum::<f64>() / losses.len() as f64,
            lr,
            purity: summary.as_ref().map(|s| s.purity),
            entropy_mean: summary.as_ref().map(|s| s.entropy_mean),
            inconsistency_mean: summary.as_ref().map(|s| s.inconsistency_mean),
            per_position: summary.as_ref().map(|s| s.per_position.clone()).unwrap_or_default(),
            per_position_cas: summary.as_ref().map(|s| s.per_position_cas.clone()).unwrap_or_default(),
            oracle_shortfalls: summary.as_ref().map_or(0, |s| s.shortfalls),
        };
        self.epochs.push(m.clone());
        Ok(m)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            epochs_done: self.epochs.len(),
            global_step: self.global_step,
            pair: self.pair.clone(),
            optimizer: self.optimizer.clone(),
            support: self.support.snapshot(),
        }
    }
}

/// Frozen-backbone evaluation of `student` on `data`.
pub fn evaluate_student(student: &Student, data: &Dataset, eval: &EvalConfig, exec: Execution) -> Result<EvalReport> {
    let d = data.dim();
    let bank = |split: &crate::harness::dataset::Split| -> Result<FeatureBank> {
        let feats = exec.try_map(split.len(), |i| student.features(split.row(d, i)))?;
        let dim = feats.first().map_or(0, Vec::len);
        FeatureBank::new(dim, &feats.concat(), split.labels.clone())
    };
    let train = bank(&data.train)?;
    let test = bank(&data.test)?;
    let knn_acc = knn_accuracy(&train, &test, eval.k_eval, exec)?;
    let probe = if eval.skip_probe {
        None
    } else {
        Some(linear_probe(&train, &test, &eval.probe, exec)?)
    };
    Ok(EvalReport {
        knn_acc,
        probe_acc: probe.as_ref().map(|p| p.test_accuracy),
        probe_train_acc: probe.as_ref().map(|p| p.train_accuracy),
        probe_final_loss: probe.as_ref().map(|p| p.final_loss),
    })
}

/// Everything a finished run leaves behind.
pub struct TrainOutcome {
    pub manifest: RunManifest,
    pub trainer: Trainer,
}

/// Calls `on_epoch` after every epoch.
pub fn train_with<F>(config: &RunConfig, data: Dataset, mut on_epoch: F) -> Result<TrainOutcome>
where
    F: FnMut(&EpochMetrics),
{
    let start = Instant::now();
    let mut trainer = Trainer::new(config.clone(), data)?;
    let exec = trainer.exec();
    let raw = raw_input_knn(&trainer.data, config.eval.k_eval, exec)?;
    let baseline = evaluate_student(&trainer.pair.student, &trainer.data, &config.eval, exec)?;
    for epoch in 0..config.epochs {
        let m = trainer.run_epoch(epoch)?;
        on_epoch(&m);
    }
    let final_eval = evaluate_student(&trainer.pair.student, &trainer.data, &config.eval, exec)?;
    let manifest = RunManifest {
        version: MANIFEST_VERSION,
        run_id: config.run_id(),
        config: config.clone(),
        epochs: trainer.epochs.clone(),
        step_losses: trainer.step_losses.clone(),
        step_lrs: trainer.step_lrs.clone(),
        raw_input_knn: raw,
        baseline,
        final_eval,
        evaluations: Vec::new(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
        build: BuildStamp::current(),
    };
    Ok(TrainOutcome { manifest, trainer })
}

/// Generates the configured dataset and trains on it.
pub fn train(config: &RunConfig) -> Result<TrainOutcome> {
    let data = generate_dataset(&config.dataset)?;
    train_with(config, data, |_| {})
}

/// Re-evaluates the student stored in a checkpoint.
pub fn evaluate_checkpoint(ckpt: &Checkpoint) -> Result<EvalReport> {
    let data = generate_dataset(&ckpt.config.dataset)?;
    evaluate_student(&ckpt.pair.student, &data, &ckpt.config.eval, ckpt.config.execution)
}
