//! Fixed-capacity episodic memory.
//!
//! Two fill policies share the same storage:
//!
//! - **vanilla**: classic reservoir sampling over the whole stream, one item at
//!   a time.
//! - **uncertainty**: at each task end the task's samples, ranked by mutual
//!   information, are offered one candidate per iteration. A candidate enters
//!   with probability `|M| / (N_c + sum_i s_i w_i)` where `s_i` are the sizes of
//!   the completed tasks, `w = softmax(-s)` and `N_c` counts iterations of the
//!   current phase. When full, the entry to drop is chosen uniformly.

use std::collections::HashSet;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stream::{Sample, TaskDataset};
use crate::uncertainty::ScoredSample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BufferPolicy {
    /// No replay memory.
    None,
    /// Classic reservoir sampling.
    Vanilla,
    /// Uncertainty-ranked candidates with the task-size sample-in rule.
    Uncertainty,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BufferEntry {
    pub x: Vec<f64>,
    pub y: usize,
    pub task_id: usize,
    /// Mutual information when inserted (vanilla inserts carry none).
    pub mi_at_insert: Option<f64>,
    pub unique_id: u64,
}

/// One iteration of an uncertainty-guided update.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditRecord {
    pub task_id: usize,
    pub iter: usize,
    pub candidate_id: u64,
    pub probability: f64,
    pub accepted: bool,
    pub evicted_id: Option<u64>,
    pub evicted_slot: Option<usize>,
}

impl AuditRecord {
    /// `task_id,iter,candidate_id,P,accepted,evicted_id`
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{:.6},{},{}",
            self.task_id,
            self.iter,
            self.candidate_id,
            self.probability,
            self.accepted,
            self.evicted_id.map(|v| v.to_string()).unwrap_or_default()
        )
    }
}

pub const AUDIT_HEADER: &str = "task_id,iter,candidate_id,P,accepted,evicted_id";

#[derive(Clone, Debug, PartialEq)]
pub struct BufferState {
    capacity: usize,
    entries: Vec<BufferEntry>,
    ids: HashSet<u64>,
    /// Iterations performed in the current uncertainty-guided phase.
    iteration: usize,
    prev_task_sizes: Vec<usize>,
    /// Items offered so far under the vanilla policy.
    stream_seen: u64,
    policy: BufferPolicy,
}

impl BufferState {
    pub fn new(capacity: usize, policy: BufferPolicy) -> Self {
        let capacity = if policy == BufferPolicy::None {
            0
        } else {
            capacity
        };
        Self {
            capacity,
            entries: Vec::with_capacity(capacity),
            ids: HashSet::new(),
            iteration: 0,
            prev_task_sizes: Vec::new(),
            stream_seen: 0,
            policy,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    pub fn policy(&self) -> BufferPolicy {
        self.policy
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn prev_task_sizes(&self) -> &[usize] {
        &self.prev_task_sizes
    }

    pub fn contains(&self, id: u64) -> bool {
        self.ids.contains(&id)
    }

    /// Test and simulation hook: set the phase counter and completed sizes.
    pub fn with_history(mut self, iteration: usize, prev_task_sizes: Vec<usize>) -> Self {
        self.iteration = iteration;
        self.prev_task_sizes = prev_task_sizes;
        self
    }

    /// `|M| / (N_c + sum_i s_i w_i)`, `w = softmax(-s)`, clamped to `[0, 1]`.
    pub fn sample_in_probability(&self) -> f64 {
        let sizes = &self.prev_task_sizes;
        let weighted = if sizes.is_empty() {
            0.0
        } else {
            // softmax(-s) with max-subtraction: the largest exponent is -min(s).
            let min = *sizes.iter().min().expect("non-empty") as f64;
            let exps: Vec<f64> = sizes.iter().map(|&s| (min - s as f64).exp()).collect();
            let z: f64 = exps.iter().sum();
            sizes
                .iter()
                .zip(&exps)
                .map(|(&s, e)| s as f64 * e / z)
                .sum()
        };
        let denom = self.iteration as f64 + weighted;
        if denom <= 0.0 {
            return 1.0;
        }
        (self.capacity as f64 / denom).clamp(0.0, 1.0)
    }

    fn insert(&mut self, entry: BufferEntry, rng: &mut impl Rng) -> (Option<u64>, Option<usize>) {
        debug_assert!(!self.ids.contains(&entry.unique_id));
        if self.capacity == 0 {
            return (None, None);
        }
        self.ids.insert(entry.unique_id);
        if self.entries.len() < self.capacity {
            self.entries.push(entry);
            return (None, None);
        }
        let slot = rng.random_range(0..self.entries.len());
        let old = std::mem::replace(&mut self.entries[slot], entry);
        self.ids.remove(&old.unique_id);
        (Some(old.unique_id), Some(slot))
    }

    /// Classic reservoir step for the `stream_index`-th item (1-based): keep
    /// while not full, then replace a uniform slot with probability
    /// `capacity / stream_index`.
    pub fn vanilla_reservoir_insert(
        &mut self,
        sample: &Sample,
        task_id: usize,
        stream_index: u64,
        rng: &mut impl Rng,
    ) -> Result<Option<u64>> {
        if stream_index == 0 {
            return Err(Error::param("stream_index is 1-based"));
        }
        if self.capacity == 0 || self.ids.contains(&sample.id) {
            return Ok(None);
        }
        let entry = BufferEntry {
            x: sample.x.clone(),
            y: sample.y,
            task_id,
            mi_at_insert: None,
            unique_id: sample.id,
        };
        if self.entries.len() < self.capacity {
            self.ids.insert(entry.unique_id);
            self.entries.push(entry);
            return Ok(None);
        }
        let j = rng.random_range(0..stream_index);
        if (j as usize) < self.capacity {
            let slot = j as usize;
            let old = std::mem::replace(&mut self.entries[slot], entry);
            self.ids.remove(&old.unique_id);
            self.ids.insert(sample.id);
            return Ok(Some(old.unique_id));
        }
        Ok(None)
    }

    /// Streams a whole task through [`Self::vanilla_reservoir_insert`].
    pub fn vanilla_task_update(&mut self, task: &TaskDataset, rng: &mut impl Rng) -> Result<()> {
        for s in &task.samples {
            self.stream_seen += 1;
            self.vanilla_reservoir_insert(s, task.task_id, self.stream_seen, rng)?;
        }
        self.prev_task_sizes.push(task.size());
        Ok(())
    }

    /// Uncertainty-guided task-end update: `|task|` iterations of candidate,
    /// sample-in and sample-out. Returns one audit record per iteration.
    pub fn task_end_update(
        &mut self,
        task: &TaskDataset,
        sorted: &[ScoredSample],
        rng: &mut impl Rng,
    ) -> Result<Vec<AuditRecord>> {
        if sorted.len() != task.size() {
            return Err(Error::shape("sorted scores", task.size(), sorted.len()));
        }
        if self.iteration != 0 {
            return Err(Error::Contract("phase counter must start at zero".into()));
        }
        let mut audit = Vec::with_capacity(task.size());
        if self.capacity > 0 {
            let mut candidates = Candidates::new(sorted);
            for iter in 0..task.size() {
                let Some(cand) = candidates.next_candidate(self) else {
                    break;
                };
                let sample = task.samples.get(cand.index).ok_or_else(|| {
                    Error::Contract(format!("scored index {} outside the task", cand.index))
                })?;
                let p = self.sample_in_probability();
                let accepted = p >= 1.0 || rng.random::<f64>() < p;
                let (evicted_id, evicted_slot) = if accepted {
                    self.insert(
                        BufferEntry {
                            x: sample.x.clone(),
                            y: sample.y,
                            task_id: task.task_id,
                            mi_at_insert: Some(cand.score.mutual_information),
                            unique_id: sample.id,
                        },
                        rng,
                    )
                } else {
                    (None, None)
                };
                self.iteration += 1;
                audit.push(AuditRecord {
                    task_id: task.task_id,
                    iter,
                    candidate_id: sample.id,
                    probability: p,
                    accepted,
                    evicted_id,
                    evicted_slot,
                });
            }
        }
        self.prev_task_sizes.push(task.size());
        self.iteration = 0;
        Ok(audit)
    }

    /// Uniform draw without replacement of up to `batch_size` entries.
    pub fn sample_batch(&self, batch_size: usize, rng: &mut impl Rng) -> Vec<&BufferEntry> {
        let n = batch_size.min(self.entries.len());
        if n == 0 {
            return Vec::new();
        }
        index::sample(rng, self.entries.len(), n)
            .into_iter()
            .map(|i| &self.entries[i])
            .collect()
    }
}

/// Walks an MI-sorted list, skipping samples already buffered; each returned
/// candidate is consumed.
pub struct Candidates<'a> {
    sorted: &'a [ScoredSample],
    next: usize,
}

impl<'a> Candidates<'a> {
    pub fn new(sorted: &'a [ScoredSample]) -> Self {
        Self { sorted, next: 0 }
    }

    pub fn next_candidate(&mut self, state: &BufferState) -> Option<&'a ScoredSample> {
        while let Some(c) = self.sorted.get(self.next) {
            self.next += 1;
            if !state.contains(c.sample_id) {
                return Some(c);
            }
        }
        None
    }
}
