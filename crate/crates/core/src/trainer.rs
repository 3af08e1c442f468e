//! Semi-supervised alternating optimisation.
//!
//! Even iterations are coarse steps (uniform mask), odd iterations are fine steps that replay
//! the preceding coarse batch with the residual masks it produced. The active dataset flips
//! between paired and unpaired every `dataset_block` iterations; single-task networks only
//! ever see paired data. Unpaired steps run and update the encoder and ASL decoder only.
//!
//! A fine step that opens a dataset block has no coarse predecessor on its pool. It draws a
//! fresh batch and derives its masks from a gradient-free uniform-mask probe pass.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{Batch, BatchPlan, BatchStream, DatasetError, DatasetHandle, Pairing, StreamOptions};
use crate::losses::{self, LossError, SsimParams};
use crate::model::{load_checkpoint, save_checkpoint, Branches, ModelConfig, ModelError, Network, ParamGroup};
use crate::nn::{Adam, Mode, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("schedule violation at iteration {iteration}: {reason}")]
    ScheduleViolation { iteration: u64, reason: String },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Coarse,
    Fine,
}

impl Phase {
    pub fn of(iteration: u64) -> Phase {
        if iteration % 2 == 0 {
            Phase::Coarse
        } else {
            Phase::Fine
        }
    }
}

/// Dataset drawn at `iteration`: paired for the first block, then alternating.
pub fn dataset_for(iteration: u64, dataset_block: u64, multitask: bool) -> Pairing {
    if !multitask || (iteration / dataset_block) % 2 == 0 {
        Pairing::Paired
    } else {
        Pairing::Unpaired
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub total_iterations: u64,
    pub dataset_block: u64,
    pub batch_size: usize,
    pub optimizer: Adam,
    /// Checkpoint period in iterations (even); 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub seed: u64,
    /// Producer threads per batch queue.
    pub workers: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            total_iterations: 2000,
            dataset_block: 5,
            batch_size: 4,
            optimizer: Adam::default(),
            checkpoint_every: 0,
            seed: 0,
            workers: 1,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidSchedule(m));
        if self.total_iterations % 2 != 0 {
            return bad(format!("total_iterations must be even, got {}", self.total_iterations));
        }
        if self.dataset_block == 0 {
            return bad("dataset_block must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.checkpoint_every % 2 != 0 {
            return bad(format!("checkpoint_every must be even, got {}", self.checkpoint_every));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return bad(format!("invalid Adam settings {o:?}"));
        }
        Ok(())
    }

    fn stream_seed(&self, pairing: Pairing) -> u64 {
        match pairing {
            Pairing::Paired => self.seed.wrapping_mul(2).wrapping_add(1),
            Pairing::Unpaired => self.seed.wrapping_mul(2).wrapping_add(2),
        }
    }
}

/// Batch replayed by a fine step, with the masks of its coarse step (+RA only).
#[derive(Clone, Debug)]
pub struct CachedBatch {
    pub batch: Batch,
    pub masks: Option<Tensor<f32>>,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub iteration: u64,
    pub dataset_block: u64,
    pub multitask: bool,
    pub cached: Option<CachedBatch>,
    /// Batches consumed so far from each pool; the queues resume from these indices.
    pub paired_drawn: u64,
    pub unpaired_drawn: u64,
}

impl TrainState {
    pub fn new(dataset_block: u64, multitask: bool) -> Self {
        Self {
            iteration: 0,
            dataset_block,
            multitask,
            cached: None,
            paired_drawn: 0,
            unpaired_drawn: 0,
        }
    }

    pub fn phase(&self) -> Phase {
        Phase::of(self.iteration)
    }

    pub fn active_dataset(&self) -> Pairing {
        dataset_for(self.iteration, self.dataset_block, self.multitask)
    }

    /// The cached batch when the current step may replay it.
    pub fn replay(&self) -> Option<&CachedBatch> {
        self.cached
            .as_ref()
            .filter(|c| self.phase() == Phase::Fine && c.batch.pairing() == self.active_dataset())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: u64,
    pub phase: Phase,
    pub dataset: Pairing,
    pub loss: f64,
    /// Seconds since the start of the (possibly resumed) run.
    pub wall_time: f64,
}

fn ones_like(t: &Tensor<f32>) -> Tensor<f32> {
    Tensor::filled(t.shape(), 1.0)
}

/// One optimisation step on `batch`, advancing `state`.
///
/// For a fine step the batch must be the cached coarse batch, unless no coarse step on the
/// active pool precedes it, in which case masks come from a probe pass.
pub fn step(
    net: &mut Network<f32>,
    state: &mut TrainState,
    batch: &Batch,
    optimizer: &Adam,
    ssim: &SsimParams,
) -> Result<LossRecord, TrainError> {
    let iteration = state.iteration;
    let phase = state.phase();
    let dataset = state.active_dataset();
    let violation = |reason: String| TrainError::ScheduleViolation { iteration, reason };
    if batch.pairing() != dataset {
        return Err(violation(format!("{} batch during a {dataset} block", batch.pairing())));
    }
    let config = net.config().clone();
    if config.use_t1 != batch.t1.is_some() {
        return Err(violation("T1 presence does not match the configuration".into()));
    }
    let t1 = batch.t1.as_ref();
    let masks: Option<Tensor<f32>> = match phase {
        Phase::Coarse => None,
        Phase::Fine => match state.replay() {
            Some(c) if c.batch.subject_ids == batch.subject_ids => c.masks.clone(),
            Some(c) => {
                return Err(violation(format!(
                    "fine step must replay subjects {:?}, got {:?}",
                    c.batch.subject_ids, batch.subject_ids
                )))
            }
            None if config.use_residual_attention => {
                let input = net.assemble_input(&batch.asl, t1, None)?;
                let (_, recon) = net.forward_input(&input, Mode::Probe, Branches::ASL)?;
                Some(net.residual_mask(&batch.asl, &recon.expect("ASL branch"))?)
            }
            None => None,
        },
    };
    if config.use_residual_attention && phase == Phase::Fine && masks.is_none() {
        return Err(violation("fine step without residual masks".into()));
    }

    let input = net.assemble_input(&batch.asl, t1, masks.as_ref())?;
    let branches = match (batch.paired, config.multitask) {
        (true, true) => Branches::BOTH,
        (true, false) => Branches::PET,
        (false, _) => Branches::ASL,
    };
    net.zero_grad();
    let (pet_pred, asl_recon) = net.forward_input(&input, Mode::Train, branches)?;
    let terms = match (&pet_pred, &asl_recon, &batch.pet) {
        (Some(p), Some(a), Some(gt)) => losses::paired_loss(p, gt, a, &batch.asl, ssim)?,
        (Some(p), None, Some(gt)) => losses::pet_only_loss(p, gt, ssim)?,
        (None, Some(a), None) => losses::unpaired_loss(a, &batch.asl, ssim)?,
        _ => unreachable!("branch selection follows batch pairing"),
    };
    net.backward(terms.grad_pet.as_ref(), terms.grad_asl.as_ref(), false);
    for (_, p) in net.named_params_mut() {
        optimizer.update(p);
    }

    state.cached = match phase {
        Phase::Coarse => {
            let masks = match (&asl_recon, config.use_residual_attention) {
                (Some(recon), true) => Some(net.residual_mask(&batch.asl, recon)?),
                _ => None,
            };
            Some(CachedBatch {
                batch: batch.clone(),
                masks,
            })
        }
        Phase::Fine => None,
    };
    state.iteration += 1;
    Ok(LossRecord {
        iteration,
        phase,
        dataset,
        loss: terms.value,
        wall_time: 0.0,
    })
}

/// Uniform all-ones mask for a batch; the coarse-step mask.
pub fn uniform_mask(batch: &Batch) -> Tensor<f32> {
    ones_like(&batch.asl)
}

/// Trainable parameter count of a group (`None` for all groups).
pub fn count_parameters(net: &Network<f32>, group: Option<ParamGroup>) -> usize {
    net.count_parameters(group)
}

/// Counters stored with every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainCounters {
    pub iteration: u64,
    pub paired_drawn: u64,
    pub unpaired_drawn: u64,
    pub schedule: TrainSchedule,
}

/// Where a run writes its artefacts.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    /// Directory for `checkpoint-<iteration>.ckpt` files and `final.ckpt`.
    pub checkpoint_dir: Option<PathBuf>,
    /// History as JSON lines; appended to when resuming.
    pub history: Option<PathBuf>,
}

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("checkpoint-{iteration:08}.ckpt"))
}

/// A training run in progress.
pub struct Trainer {
    net: Network<f32>,
    state: TrainState,
    schedule: TrainSchedule,
    ssim: SsimParams,
    paired: BatchStream,
    unpaired: Option<BatchStream>,
    history: Vec<LossRecord>,
    started: Instant,
}

impl Trainer {
    pub fn new(
        config: &ModelConfig,
        schedule: &TrainSchedule,
        paired: &DatasetHandle,
        unpaired: Option<&DatasetHandle>,
    ) -> Result<Self, TrainError> {
        let net = Network::build(config, schedule.seed)?;
        Self::assemble(net, TrainState::new(schedule.dataset_block, config.multitask), schedule, paired, unpaired)
    }

    /// Continue from a checkpoint written by [`Trainer::run`]. `schedule` must match the stored one.
    pub fn resume(
        checkpoint: &Path,
        schedule: &TrainSchedule,
        paired: &DatasetHandle,
        unpaired: Option<&DatasetHandle>,
    ) -> Result<Self, TrainError> {
        let (net, ckpt) = load_checkpoint::<f32>(checkpoint, None)?;
        let counters: TrainCounters = serde_json::from_value(ckpt.counters).map_err(|e| {
            ModelError::Checkpoint {
                path: checkpoint.display().to_string(),
                reason: format!("bad training counters: {e}"),
            }
        })?;
        if counters.schedule != *schedule {
            return Err(TrainError::InvalidSchedule(
                "schedule differs from the one stored in the checkpoint".into(),
            ));
        }
        let mut state = TrainState::new(schedule.dataset_block, ckpt.config.multitask);
        state.iteration = counters.iteration;
        state.paired_drawn = counters.paired_drawn;
        state.unpaired_drawn = counters.unpaired_drawn;
        Self::assemble(net, state, schedule, paired, unpaired)
    }

    fn assemble(
        net: Network<f32>,
        state: TrainState,
        schedule: &TrainSchedule,
        paired: &DatasetHandle,
        unpaired: Option<&DatasetHandle>,
    ) -> Result<Self, TrainError> {
        schedule.validate()?;
        let config = net.config().clone();
        let options = |start_index| StreamOptions {
            workers: schedule.workers,
            start_index,
            include_t1: config.use_t1,
            ..StreamOptions::default()
        };
        let plan = BatchPlan::new(paired, schedule.batch_size, Pairing::Paired, schedule.stream_seed(Pairing::Paired))?;
        let paired_stream = BatchStream::new(plan, options(state.paired_drawn));
        let unpaired_stream = if config.multitask {
            let handle = unpaired.ok_or(DatasetError::EmptyPool(Pairing::Unpaired))?;
            let plan = BatchPlan::new(
                handle,
                schedule.batch_size,
                Pairing::Unpaired,
                schedule.stream_seed(Pairing::Unpaired),
            )?;
            Some(BatchStream::new(plan, options(state.unpaired_drawn)))
        } else {
            if unpaired.is_some_and(|u| u.counts().1 > 0) {
                log::warn!("single-task configuration: unpaired data is ignored");
            }
            None
        };
        Ok(Self {
            net,
            state,
            schedule: schedule.clone(),
            ssim: SsimParams::default(),
            paired: paired_stream,
            unpaired: unpaired_stream,
            history: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn network(&self) -> &Network<f32> {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network<f32> {
        &mut self.net
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn history(&self) -> &[LossRecord] {
        &self.history
    }

    pub fn counters(&self) -> TrainCounters {
        TrainCounters {
            iteration: self.state.iteration,
            paired_drawn: self.state.paired_drawn,
            unpaired_drawn: self.state.unpaired_drawn,
            schedule: self.schedule.clone(),
        }
    }

    fn draw(&mut self, pairing: Pairing) -> Batch {
        let (stream, counter) = match pairing {
            Pairing::Paired => (&mut self.paired, &mut self.state.paired_drawn),
            Pairing::Unpaired => (
                self.unpaired.as_mut().expect("unpaired stream exists in multitask runs"),
                &mut self.state.unpaired_drawn,
            ),
        };
        *counter += 1;
        stream.next().expect("batch producers outlive the trainer")
    }

    /// Run one iteration, drawing or replaying its batch.
    pub fn step(&mut self) -> Result<LossRecord, TrainError> {
        let batch = match self.state.replay() {
            Some(c) => c.batch.clone(),
            None => self.draw(self.state.active_dataset()),
        };
        let mut record = step(&mut self.net, &mut self.state, &batch, &self.schedule.optimizer, &self.ssim)?;
        record.wall_time = self.started.elapsed().as_secs_f64();
        self.history.push(record.clone());
        Ok(record)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        if self.state.iteration % 2 != 0 {
            return Err(TrainError::ScheduleViolation {
                iteration: self.state.iteration,
                reason: "checkpoints are only taken before a coarse step".into(),
            });
        }
        let counters = serde_json::to_value(self.counters()).expect("counters serialize");
        Ok(save_checkpoint(path, &self.net, &counters)?)
    }

    /// Run up to `total_iterations`, writing history lines and checkpoints as configured.
    pub fn run(&mut self, outputs: &TrainOutputs) -> Result<(), TrainError> {
        let mut history = match &outputs.history {
            Some(p) => {
                let f = fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .map_err(|e| io_err(p, e))?;
                Some((p.clone(), std::io::BufWriter::new(f)))
            }
            None => None,
        };
        if let Some(dir) = &outputs.checkpoint_dir {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        while self.state.iteration < self.schedule.total_iterations {
            let record = self.step()?;
            if let Some((p, w)) = history.as_mut() {
                let line = serde_json::to_string(&record).expect("record serializes");
                writeln!(w, "{line}").map_err(|e| io_err(p, e))?;
            }
            let done = self.state.iteration;
            if record.iteration % 100 == 0 {
                log::debug!("iteration {} {:?} {} loss {:.5}", record.iteration, record.phase, record.dataset, record.loss);
            }
            if let (Some(dir), true) = (&outputs.checkpoint_dir, self.schedule.checkpoint_every > 0) {
                if done % self.schedule.checkpoint_every == 0 && done < self.schedule.total_iterations {
                    self.save(&checkpoint_path(dir, done))?;
                }
            }
        }
        if let Some((p, mut w)) = history {
            w.flush().map_err(|e| io_err(&p, e))?;
        }
        if let Some(dir) = &outputs.checkpoint_dir {
            self.save(&dir.join("final.ckpt"))?;
        }
        Ok(())
    }

    pub fn finish(self) -> (Network<f32>, Vec<LossRecord>) {
        (self.net, self.history)
    }
}

/// Train a fresh network over the whole schedule.
pub fn train(
    config: &ModelConfig,
    schedule: &TrainSchedule,
    paired: &DatasetHandle,
    unpaired: Option<&DatasetHandle>,
    outputs: &TrainOutputs,
) -> Result<(Network<f32>, Vec<LossRecord>), TrainError> {
    let mut trainer = Trainer::new(config, schedule, paired, unpaired)?;
    trainer.run(outputs)?;
    Ok(trainer.finish())
}
