//! The sequential training loop shared by every method, and the pooled
//! multi-task baseline.

use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::agem::{agem_project_f32, EpisodicMemory, REFERENCE_BATCH};
use super::config::{Method, MethodConfig};
use super::ewc::{ewc_consolidate, ewc_penalty_grad, EwcState};
use super::ogd::{ogd_extend_basis, OgdBasis};
use crate::data::{TaskStream, NUM_CLASSES};
use crate::metrics::{evaluate, AccuracyMatrix};
use crate::nn::{sgd_momentum_step, DenseNet, Gradients, Mode, OptimizerState};
use crate::{seeded_rng, Error, Result, Rng as RunRng, RNG_NAME};

/// Mixed into the run seed to derive the generator used for memory, Fisher
/// and reference-batch draws, so these never perturb the main trajectory.
const AUX_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Accuracy of one seen task at one epoch boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Epochs completed since the start of the run (1-based).
    pub step: usize,
    pub trained_task: usize,
    /// Epoch within `trained_task` (1-based).
    pub epoch: usize,
    pub eval_task: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub config: MethodConfig,
    pub seed: u64,
    pub rng: &'static str,
    pub accuracy: AccuracyMatrix,
    pub curves: Vec<CurvePoint>,
    pub net: DenseNet<f32>,
    pub elapsed_secs: f64,
}

impl RunResult {
    /// Columns `step,trained_task,epoch,eval_task,accuracy`; task ids 0-based.
    pub fn curves_csv(&self) -> String {
        curves_to_csv(&self.curves)
    }
}

pub fn curves_to_csv(curves: &[CurvePoint]) -> String {
    let mut out = String::from("step,trained_task,epoch,eval_task,accuracy\n");
    for c in curves {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            c.step, c.trained_task, c.epoch, c.eval_task, c.accuracy
        ));
    }
    out
}

pub fn curves_from_csv(text: &str) -> Result<Vec<CurvePoint>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Validation(format!("curves CSV line {}: `{line}`", n + 1));
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != 5 {
            return Err(bad());
        }
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad());
        out.push(CurvePoint {
            step: int(cells[0])?,
            trained_task: int(cells[1])?,
            epoch: int(cells[2])?,
            eval_task: int(cells[3])?,
            accuracy: cells[4].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

/// Auxiliary per-method state carried across tasks.
enum MethodState {
    Plain,
    Ewc(EwcState<f32>),
    Agem(EpisodicMemory),
    Ogd(OgdBasis),
}

impl MethodState {
    fn new(config: &MethodConfig, net: &DenseNet<f32>) -> Self {
        match config.method {
            Method::Ewc => MethodState::Ewc(EwcState::new()),
            Method::Agem => MethodState::Agem(EpisodicMemory::new(config.memory_per_task)),
            Method::Ogd => MethodState::Ogd(OgdBasis::new(net.num_params())),
            _ => MethodState::Plain,
        }
    }

    /// Turn the raw loss gradient into the step direction.
    fn adjust(
        &self,
        net: &DenseNet<f32>,
        grads: Gradients<f32>,
        config: &MethodConfig,
        aux: &mut RunRng,
    ) -> Result<Gradients<f32>> {
        match self {
            MethodState::Ewc(state) if !state.is_empty() => {
                let mut g = grads;
                g.add_scaled(&ewc_penalty_grad(net, state, config.ewc_lambda)?, 1.0)?;
                Ok(g)
            }
            MethodState::Agem(memory) if !memory.is_empty() => {
                let (x, y) = memory.sample(REFERENCE_BATCH, aux);
                let trace = net.forward(x.view(), Mode::Train, aux)?;
                let (_, reference) = net.loss_and_backward(&trace, &y)?;
                let mut flat = grads.flatten();
                if agem_project_f32(&mut flat, &reference.flatten())? {
                    Gradients::from_flat(net, &flat)
                } else {
                    Ok(grads)
                }
            }
            MethodState::Ogd(basis) if !basis.is_empty() => {
                let mut flat = grads.flatten();
                basis.project_f32(&mut flat)?;
                Gradients::from_flat(net, &flat)
            }
            _ => Ok(grads),
        }
    }

    fn after_task(
        &mut self,
        net: &DenseNet<f32>,
        task: &crate::data::Task,
        config: &MethodConfig,
        aux: &mut RunRng,
    ) -> Result<()> {
        match self {
            MethodState::Plain => Ok(()),
            MethodState::Ewc(state) => ewc_consolidate(net, task, config.ewc_fisher_samples, state, aux),
            MethodState::Agem(memory) => memory.store(task, aux),
            MethodState::Ogd(basis) => {
                let added = ogd_extend_basis(net, task, config.memory_per_task, basis, aux)?;
                log::debug!("task {}: {added} new directions, basis size {}", task.id, basis.len());
                Ok(())
            }
        }
    }
}

fn shuffled<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

#[allow(clippy::too_many_arguments)]
fn sgd_step(
    net: &mut DenseNet<f32>,
    opt: &mut OptimizerState<f32>,
    x: ArrayView2<f32>,
    y: &[usize],
    state: &MethodState,
    config: &MethodConfig,
    rng: &mut RunRng,
    aux: &mut RunRng,
) -> Result<f32> {
    let trace = net.forward(x, Mode::Train, rng)?;
    let (loss, grads) = net.loss_and_backward(&trace, y)?;
    if !loss.is_finite() {
        return Err(Error::Runtime(format!("loss became {loss}")));
    }
    let grads = state.adjust(net, grads, config, aux)?;
    sgd_momentum_step(net, &grads, opt)?;
    Ok(loss)
}

fn evaluate_seen(net: &DenseNet<f32>, stream: &TaskStream, upto: usize) -> Result<Vec<f64>> {
    stream.tasks[..upto].iter().map(|t| evaluate(net, t.validation())).collect()
}

fn check_inputs(config: &MethodConfig, stream: &TaskStream) -> Result<()> {
    config.validate()?;
    if stream.is_empty() {
        return Err(Error::Validation("task stream is empty".into()));
    }
    Ok(())
}

/// Train on the stream's tasks in order. See [`train_continual_with`].
pub fn train_continual(config: &MethodConfig, stream: &TaskStream, seed: u64) -> Result<RunResult> {
    train_continual_with(config, stream, seed, |_, _| Ok(()))
}

/// Train on the stream's tasks in order, recording `a_{t,i}` for every seen
/// task after each task and the per-epoch curves. `on_task_end(t, net)` runs
/// after task `t` is finished and its method state updated (the last task
/// skips the update: nothing would use it).
///
/// The optimizer velocity starts from zero at every task. The learning rate
/// is multiplied by `lr_decay` after every task. `mtl` dispatches to
/// [`mtl_train_with`] over the whole stream.
pub fn train_continual_with<C>(
    config: &MethodConfig,
    stream: &TaskStream,
    seed: u64,
    mut on_task_end: C,
) -> Result<RunResult>
where
    C: FnMut(usize, &DenseNet<f32>) -> Result<()>,
{
    if config.method == Method::Mtl {
        return mtl_train_with(config, stream, stream.len(), seed, on_task_end);
    }
    check_inputs(config, stream)?;
    let started = Instant::now();
    let mut rng = seeded_rng(seed);
    let mut aux = seeded_rng(seed ^ AUX_SALT);
    let widths = config.widths(stream.input_width(), NUM_CLASSES);
    let mut net = DenseNet::new(&widths, config.keep_prob, &mut rng)?;
    let mut state = MethodState::new(config, &net);
    let mut matrix = AccuracyMatrix::new(stream.len());
    let mut curves = Vec::new();
    let mut lr = config.lr;
    let mut step = 0;

    for (t, task) in stream.tasks.iter().enumerate() {
        let mut opt = OptimizerState::new(&net, lr, config.momentum)?;
        let split = task.train();
        for epoch in 1..=config.epochs_per_task {
            for (b, idx) in shuffled(split.len(), &mut rng).chunks(config.batch_size).enumerate() {
                let x = split.batch(idx);
                let y = split.batch_labels(idx);
                sgd_step(&mut net, &mut opt, x.view(), &y, &state, config, &mut rng, &mut aux)
                    .map_err(|e| annotate(e, t, epoch, b))?;
            }
            step += 1;
            let last = epoch == config.epochs_per_task;
            if config.eval_every_epoch || last {
                let accs = evaluate_seen(&net, stream, t + 1)?;
                record_curve(&mut curves, step, t, epoch, &accs);
                if last {
                    log::info!("{} seed {seed}: task {} done, accuracies {:?}", config.name, t + 1, accs);
                    matrix.push_row(accs)?;
                }
            }
        }
        lr *= config.lr_decay;
        // Nothing trains after the last task, so its memory/basis is never used.
        if t + 1 < stream.len() {
            state.after_task(&net, task, config, &mut aux)?;
        }
        on_task_end(t, &net)?;
    }

    Ok(RunResult {
        config: config.clone(),
        seed,
        rng: RNG_NAME,
        accuracy: matrix,
        curves,
        net,
        elapsed_secs: started.elapsed().as_secs_f64(),
    })
}

fn annotate(e: Error, task: usize, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Runtime(msg) => Error::Runtime(format!("task {}, epoch {epoch}, batch {batch}: {msg}", task + 1)),
        other => other,
    }
}

fn record_curve(curves: &mut Vec<CurvePoint>, step: usize, trained_task: usize, epoch: usize, accs: &[f64]) {
    curves.extend(accs.iter().enumerate().map(|(i, &a)| CurvePoint {
        step,
        trained_task,
        epoch,
        eval_task: i,
        accuracy: a,
    }));
}

/// Uniform sampling over the union of several tasks' training sets. Global
/// index `g` maps to the task whose cumulative range contains it.
#[derive(Debug, Clone)]
pub struct PooledSampler {
    offsets: Vec<usize>,
}

impl PooledSampler {
    pub fn new(sizes: &[usize]) -> Self {
        let mut offsets = vec![0];
        for s in sizes {
            offsets.push(offsets.last().unwrap() + s);
        }
        PooledSampler { offsets }
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// `(task, index within task)` of a global index.
    pub fn locate(&self, global: usize) -> (usize, usize) {
        let t = self.offsets.partition_point(|&o| o <= global) - 1;
        (t, global - self.offsets[t])
    }

    /// One epoch: every pooled example once, in uniformly random order.
    pub fn epoch_order<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        shuffled(self.total(), rng)
    }
}

/// Pooled (multi-task) training up to `upto` tasks, without callbacks.
pub fn mtl_train(config: &MethodConfig, stream: &TaskStream, upto: usize, seed: u64) -> Result<RunResult> {
    mtl_train_with(config, stream, upto, seed, |_, _| Ok(()))
}

/// For each `s` in `1..=upto`, train a fresh network on the pooled data of
/// tasks `0..s` and record its accuracy on those tasks as row `s` of the
/// matrix, so the result has the same shape as a sequential run. Every stage
/// starts from the same seed; with one task the protocol is exactly plain
/// SGD's. The learning rate is never decayed.
pub fn mtl_train_with<C>(
    config: &MethodConfig,
    stream: &TaskStream,
    upto: usize,
    seed: u64,
    mut on_stage_end: C,
) -> Result<RunResult>
where
    C: FnMut(usize, &DenseNet<f32>) -> Result<()>,
{
    check_inputs(config, stream)?;
    if upto == 0 || upto > stream.len() {
        return Err(Error::Validation(format!(
            "upto must lie in 1..={}, got {upto}",
            stream.len()
        )));
    }
    let started = Instant::now();
    let widths = config.widths(stream.input_width(), NUM_CLASSES);
    let plain = MethodState::Plain;
    let mut matrix = AccuracyMatrix::new(upto);
    let mut curves = Vec::new();
    let mut step = 0;
    let mut net = None;

    for s in 1..=upto {
        let mut rng = seeded_rng(seed);
        let mut aux = seeded_rng(seed ^ AUX_SALT);
        let mut stage_net = DenseNet::new(&widths, config.keep_prob, &mut rng)?;
        let mut opt = OptimizerState::new(&stage_net, config.lr, config.momentum)?;
        let splits: Vec<_> = stream.tasks[..s].iter().map(|t| t.train()).collect();
        let sampler = PooledSampler::new(&splits.iter().map(|sp| sp.len()).collect::<Vec<_>>());
        let width = stream.input_width();
        for epoch in 1..=config.epochs_per_task {
            for (b, chunk) in sampler.epoch_order(&mut rng).chunks(config.batch_size).enumerate() {
                let mut x = Array2::zeros((chunk.len(), width));
                let mut y = Vec::with_capacity(chunk.len());
                for (row, &g) in x.rows_mut().into_iter().zip(chunk) {
                    let (t, i) = sampler.locate(g);
                    splits[t].write_example(i, row);
                    y.push(splits[t].label(i));
                }
                sgd_step(&mut stage_net, &mut opt, x.view(), &y, &plain, config, &mut rng, &mut aux)
                    .map_err(|e| annotate(e, s - 1, epoch, b))?;
            }
            step += 1;
            let last = epoch == config.epochs_per_task;
            if config.eval_every_epoch || last {
                let accs = evaluate_seen(&stage_net, stream, s)?;
                record_curve(&mut curves, step, s - 1, epoch, &accs);
                if last {
                    log::info!("{} seed {seed}: pooled stage {s} done, accuracies {accs:?}", config.name);
                    matrix.push_row(accs)?;
                }
            }
        }
        on_stage_end(s - 1, &stage_net)?;
        net = Some(stage_net);
    }

    Ok(RunResult {
        config: config.clone(),
        seed,
        rng: RNG_NAME,
        accuracy: matrix,
        curves,
        net: net.expect("upto >= 1"),
        elapsed_secs: started.elapsed().as_secs_f64(),
    })
}
