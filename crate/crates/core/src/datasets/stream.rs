//! Endless shuffled batch stream backed by producer threads and a bounded queue.
//!
//! The batch sequence is fixed up front by [`BatchPlan`]: epoch `e` is a permutation of the
//! pool drawn from a ChaCha8 generator seeded with `seed` on stream `e`. Producer `w` of `n`
//! materialises batches `w, w + n, ...` into its own bounded channel and the consumer reads
//! the channels round-robin, so the order never depends on the worker count.

use std::sync::mpsc::{sync_channel, Receiver};
use std::thread::JoinHandle;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Batch, DatasetError, DatasetHandle, Pairing, Subject};

pub const DEFAULT_QUEUE_DEPTH: usize = 32;

/// Deterministic assignment of subjects to batch indices.
#[derive(Clone, Debug)]
pub struct BatchPlan {
    pool: Vec<Subject>,
    batch_size: usize,
    seed: u64,
    pairing: Pairing,
}

impl BatchPlan {
    pub fn new(handle: &DatasetHandle, batch_size: usize, pairing: Pairing, seed: u64) -> Result<Self, DatasetError> {
        let pool: Vec<Subject> = handle.pool(pairing).into_iter().cloned().collect();
        if pool.is_empty() {
            return Err(DatasetError::EmptyPool(pairing));
        }
        if batch_size == 0 || pool.len() < batch_size {
            return Err(DatasetError::PoolSmallerThanBatch {
                pairing,
                pool: pool.len(),
                batch: batch_size,
            });
        }
        Ok(Self {
            pool,
            batch_size,
            seed,
            pairing,
        })
    }

    /// Full batches per epoch; the remainder of each permutation is dropped.
    pub fn batches_per_epoch(&self) -> usize {
        self.pool.len() / self.batch_size
    }

    pub fn pairing(&self) -> Pairing {
        self.pairing
    }

    pub fn epoch_permutation(&self, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..self.pool.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Pool indices of batch `index`.
    pub fn members(&self, index: u64) -> Vec<usize> {
        let per_epoch = self.batches_per_epoch() as u64;
        let perm = self.epoch_permutation(index / per_epoch);
        let j = (index % per_epoch) as usize;
        perm[j * self.batch_size..(j + 1) * self.batch_size].to_vec()
    }

    pub fn subject_ids(&self, index: u64) -> Vec<u64> {
        self.members(index).into_iter().map(|i| self.pool[i].id).collect()
    }

    pub fn batch(&self, index: u64, include_t1: bool) -> Batch {
        let members: Vec<&Subject> = self.members(index).into_iter().map(|i| &self.pool[i]).collect();
        Batch::from_subjects(&members, include_t1)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StreamOptions {
    pub workers: usize,
    pub depth: usize,
    /// Index of the first batch to yield (used when resuming).
    pub start_index: u64,
    pub include_t1: bool,
}

impl Default for StreamOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            depth: DEFAULT_QUEUE_DEPTH,
            start_index: 0,
            include_t1: true,
        }
    }
}

pub struct BatchStream {
    receivers: Vec<Receiver<Batch>>,
    workers: Vec<JoinHandle<()>>,
    next: u64,
    start: u64,
}

impl BatchStream {
    pub fn new(plan: BatchPlan, options: StreamOptions) -> Self {
        let n = options.workers.max(1);
        let per_worker = options.depth.max(1).div_ceil(n);
        let plan = std::sync::Arc::new(plan);
        let mut receivers = Vec::with_capacity(n);
        let mut workers = Vec::with_capacity(n);
        for w in 0..n {
            let (tx, rx) = sync_channel(per_worker);
            let plan = plan.clone();
            let start = options.start_index + w as u64;
            let include_t1 = options.include_t1;
            workers.push(std::thread::spawn(move || {
                let mut i = start;
                // ends once the consumer hangs up
                while tx.send(plan.batch(i, include_t1)).is_ok() {
                    i += n as u64;
                }
            }));
            receivers.push(rx);
        }
        Self {
            receivers,
            workers,
            next: options.start_index,
            start: options.start_index,
        }
    }

    /// Index of the batch the next call to `next` yields.
    pub fn position(&self) -> u64 {
        self.next
    }
}

impl Iterator for BatchStream {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let slot = ((self.next - self.start) % self.receivers.len() as u64) as usize;
        let batch = self.receivers[slot].recv().ok()?;
        self.next += 1;
        Some(batch)
    }
}

impl Drop for BatchStream {
    fn drop(&mut self) {
        self.receivers.clear();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

/// Endless stream with default options (one producer, queue depth 32, T1 included).
pub fn batch_stream(
    handle: &DatasetHandle,
    batch_size: usize,
    pairing: Pairing,
    seed: u64,
) -> Result<BatchStream, DatasetError> {
    Ok(BatchStream::new(
        BatchPlan::new(handle, batch_size, pairing, seed)?,
        StreamOptions::default(),
    ))
}
