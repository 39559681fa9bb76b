//! Long-tailed task streams.
//!
//! Task `t` of an `n`-task stream holds `max(1, floor(C * alpha^t))` training
//! samples. Per-class quotas are laid out along class-label order (the ordered
//! stream); the shuffled stream keeps every class's quota and draws but assigns
//! classes to tasks through a seeded permutation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::normalize;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ordering {
    Ordered,
    Shuffled,
}

/// The decay of task sizes: either the per-task factor directly or the ratio
/// of the last task size to the first.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeDecay {
    Alpha(f64),
    ImbalanceRatio(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub n_tasks: usize,
    pub classes_per_task: usize,
    pub base_count: usize,
    pub decay: SizeDecay,
    pub ordering: Ordering,
    pub seed: u64,
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tasks == 0 {
            return Err(Error::param("n_tasks must be at least 1"));
        }
        if self.classes_per_task == 0 {
            return Err(Error::param("classes_per_task must be at least 1"));
        }
        if self.base_count < self.n_tasks {
            return Err(Error::param(format!(
                "base_count ({}) must be at least n_tasks ({})",
                self.base_count, self.n_tasks
            )));
        }
        let v = match self.decay {
            SizeDecay::Alpha(a) => a,
            SizeDecay::ImbalanceRatio(r) => r,
        };
        if !(v > 0.0 && v <= 1.0) {
            return Err(Error::param(format!(
                "size decay must lie in (0, 1], got {v}"
            )));
        }
        Ok(())
    }

    /// The per-task decay factor.
    pub fn alpha(&self) -> Result<f64> {
        match self.decay {
            SizeDecay::Alpha(a) => Ok(a),
            SizeDecay::ImbalanceRatio(_) if self.n_tasks == 1 => {
                Err(Error::param("imbalance ratio needs at least two tasks"))
            }
            SizeDecay::ImbalanceRatio(r) => Ok(r.powf(1.0 / (self.n_tasks - 1) as f64)),
        }
    }
}

/// Training-set size of every task.
pub fn longtail_sizes(config: &StreamConfig) -> Result<Vec<usize>> {
    config.validate()?;
    let alpha = config.alpha()?;
    Ok((0..config.n_tasks)
        .map(|t| {
            let s = (config.base_count as f64 * alpha.powi(t as i32)).floor();
            (s as usize).max(1)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Unique within a pool: `(label << 32) | index_in_class`.
    pub id: u64,
    pub x: Vec<f64>,
    pub y: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub task_id: usize,
    pub classes: Vec<usize>,
    pub samples: Vec<Sample>,
}

impl TaskDataset {
    pub fn size(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Labeled feature vectors grouped by class label.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePool {
    dim: usize,
    classes: BTreeMap<usize, Vec<Vec<f64>>>,
}

impl SamplePool {
    pub fn new(dim: usize, classes: BTreeMap<usize, Vec<Vec<f64>>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::param("feature dimension must be at least 1"));
        }
        for (label, rows) in &classes {
            if rows.is_empty() {
                return Err(Error::param(format!("class {label} has no samples")));
            }
            if let Some(r) = rows.iter().find(|r| r.len() != dim) {
                return Err(Error::shape("pool sample", dim, r.len()));
            }
        }
        Ok(Self { dim, classes })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.classes.keys().copied().collect()
    }

    pub fn class(&self, label: usize) -> Option<&[Vec<f64>]> {
        self.classes.get(&label).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Moves `per_class` seeded draws from every class into a second pool.
    /// Returns `(remaining, held_out)`.
    pub fn split_holdout(&self, per_class: usize, seed: u64) -> Result<(SamplePool, SamplePool)> {
        let mut train = BTreeMap::new();
        let mut test = BTreeMap::new();
        for (&label, rows) in &self.classes {
            if rows.len() <= per_class {
                return Err(Error::Capacity {
                    class: label,
                    needed: per_class + 1,
                    available: rows.len(),
                });
            }
            let mut idx: Vec<usize> = (0..rows.len()).collect();
            idx.shuffle(&mut seed::rng(&[seed, seed::TAG_HOLDOUT, label as u64]));
            let (held, rest) = idx.split_at(per_class);
            let mut rest = rest.to_vec();
            rest.sort_unstable();
            if per_class > 0 {
                test.insert(label, held.iter().map(|&i| rows[i].clone()).collect());
            }
            train.insert(label, rest.iter().map(|&i| rows[i].clone()).collect());
        }
        Ok((
            SamplePool {
                dim: self.dim,
                classes: train,
            },
            SamplePool {
                dim: self.dim,
                classes: test,
            },
        ))
    }

    /// Writes the pool in the `label,f0,...` text format.
    pub fn write(&self, mut out: impl Write) -> Result<()> {
        let mut line = String::from("label");
        for d in 0..self.dim {
            write!(line, ",f{d}").unwrap();
        }
        writeln!(out, "{line}")?;
        for (label, rows) in &self.classes {
            for r in rows {
                line.clear();
                write!(line, "{label}").unwrap();
                for v in r {
                    // `{}` on f64 prints the shortest exactly round-tripping form.
                    write!(line, ",{v}").unwrap();
                }
                writeln!(out, "{line}")?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

/// Isotropic unit-variance Gaussian clusters, one per class, centred on seeded
/// random directions at distance `separation` from the origin.
pub fn synth_gaussians(
    n_classes: usize,
    dim: usize,
    separation: f64,
    pool_per_class: usize,
    seed: u64,
) -> Result<SamplePool> {
    if dim < 1 {
        return Err(Error::param("dim must be at least 1"));
    }
    if n_classes < 2 {
        return Err(Error::param("need at least two classes"));
    }
    if pool_per_class < 1 {
        return Err(Error::param("pool_per_class must be at least 1"));
    }
    if !(separation >= 0.0) || !separation.is_finite() {
        return Err(Error::param("separation must be finite and non-negative"));
    }
    let mut classes = BTreeMap::new();
    for c in 0..n_classes {
        let mut rng = seed::rng(&[seed, seed::TAG_POOL, c as u64]);
        let center = loop {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            if let Ok(u) = normalize(&v) {
                break u;
            }
        };
        let rows = (0..pool_per_class)
            .map(|_| {
                center
                    .iter()
                    .map(|m| {
                        let noise: f64 = StandardNormal.sample(&mut rng);
                        separation * m + noise
                    })
                    .collect()
            })
            .collect();
        classes.insert(c, rows);
    }
    SamplePool::new(dim, classes)
}

/// Parses the `label,f0,...,f{d-1}` text format.
pub fn read_pool(input: impl Read) -> Result<SamplePool> {
    let reader = BufReader::new(input);
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(l) => l?,
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "empty file".into(),
            })
        }
    };
    let cols: Vec<&str> = header
        .trim_end_matches('\r')
        .split(',')
        .map(str::trim)
        .collect();
    let bad_header = |message: String| Error::Parse { line: 1, message };
    if cols.first() != Some(&"label") {
        return Err(bad_header(format!(
            "unknown header, expected `label,...`: {header}"
        )));
    }
    for (d, c) in cols[1..].iter().enumerate() {
        if *c != format!("f{d}") {
            return Err(bad_header(format!(
                "unknown header column `{c}`, expected `f{d}`"
            )));
        }
    }
    let dim = cols.len() - 1;
    if dim == 0 {
        return Err(bad_header("header has no feature columns".into()));
    }

    let mut classes: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != dim + 1 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {} fields, found {}", dim + 1, fields.len()),
            });
        }
        let label: usize = fields[0].parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("label `{}` is not a non-negative integer", fields[0]),
        })?;
        let mut row = Vec::with_capacity(dim);
        for f in &fields[1..] {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("feature `{f}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("feature `{f}` is not finite"),
                });
            }
            row.push(v);
        }
        classes.entry(label).or_default().push(row);
    }
    if classes.is_empty() {
        return Err(Error::Parse {
            line: 2,
            message: "no samples".into(),
        });
    }
    SamplePool::new(dim, classes)
}

pub fn load_pool(path: impl AsRef<Path>) -> Result<SamplePool> {
    read_pool(std::fs::File::open(path)?)
}

/// Splits `total` over `k` classes, remainder going to the first classes.
fn split_evenly(total: usize, k: usize) -> Vec<usize> {
    (0..k)
        .map(|i| total / k + usize::from(i < total % k))
        .collect()
}

/// Builds the training stream. The first `n_tasks * classes_per_task` labels
/// of the pool take part.
pub fn build_stream(pool: &SamplePool, config: &StreamConfig) -> Result<Vec<TaskDataset>> {
    let sizes = longtail_sizes(config)?;
    let k = config.classes_per_task;
    let needed = config.n_tasks * k;
    let labels = pool.labels();
    if labels.len() < needed {
        return Err(Error::param(format!(
            "stream needs {needed} classes but the pool has {}",
            labels.len()
        )));
    }
    let labels = &labels[..needed];

    // Quota per class follows label order in both orderings.
    let mut quota = BTreeMap::new();
    for (t, &s) in sizes.iter().enumerate() {
        for (&label, q) in labels[t * k..(t + 1) * k].iter().zip(split_evenly(s, k)) {
            quota.insert(label, q);
        }
    }

    let mut assignment = labels.to_vec();
    if config.ordering == Ordering::Shuffled {
        assignment.shuffle(&mut seed::rng(&[config.seed, seed::TAG_STREAM]));
    }

    let mut tasks = Vec::with_capacity(config.n_tasks);
    for t in 0..config.n_tasks {
        let mut classes = assignment[t * k..(t + 1) * k].to_vec();
        classes.sort_unstable();
        let mut samples = Vec::new();
        for &label in &classes {
            let rows = pool.class(label).expect("label taken from pool");
            let q = quota[&label];
            if rows.len() < q {
                return Err(Error::Capacity {
                    class: label,
                    needed: q,
                    available: rows.len(),
                });
            }
            let mut idx: Vec<usize> = (0..rows.len()).collect();
            let mut rng = seed::rng(&[config.seed, seed::TAG_STREAM, label as u64]);
            let (chosen, _) = idx.partial_shuffle(&mut rng, q);
            samples.extend(chosen.iter().map(|&i| Sample {
                id: ((label as u64) << 32) | i as u64,
                x: rows[i].clone(),
                y: label,
            }));
        }
        tasks.push(TaskDataset {
            task_id: t,
            classes,
            samples,
        });
    }
    Ok(tasks)
}

/// Held-out evaluation sets matching the class partition of `train`: every
/// pool sample of a task's classes.
pub fn build_test_tasks(test_pool: &SamplePool, train: &[TaskDataset]) -> Result<Vec<TaskDataset>> {
    train
        .iter()
        .map(|task| {
            let mut samples = Vec::new();
            for &label in &task.classes {
                let rows = test_pool.class(label).ok_or(Error::Capacity {
                    class: label,
                    needed: 1,
                    available: 0,
                })?;
                samples.extend(rows.iter().enumerate().map(|(i, x)| Sample {
                    id: ((label as u64) << 32) | i as u64,
                    x: x.clone(),
                    y: label,
                }));
            }
            Ok(TaskDataset {
                task_id: task.task_id,
                classes: task.classes.clone(),
                samples,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(decay: SizeDecay, n: usize, ordering: Ordering) -> StreamConfig {
        StreamConfig {
            n_tasks: n,
            classes_per_task: 2,
            base_count: 500,
            decay,
            ordering,
            seed: 7,
        }
    }

    #[test]
    fn size_examples() {
        let s = longtail_sizes(&cfg(SizeDecay::Alpha(0.5), 5, Ordering::Ordered)).unwrap();
        assert_eq!(s, vec![500, 250, 125, 62, 31]);

        // 0.01^(1/4) = 0.316227766...; 500 * alpha^t = 500, 158.11, 50, 15.81, 5
        let c = cfg(SizeDecay::ImbalanceRatio(0.01), 5, Ordering::Ordered);
        assert!((c.alpha().unwrap() - 0.316_228).abs() < 1e-6);
        assert_eq!(longtail_sizes(&c).unwrap(), vec![500, 158, 50, 15, 5]);

        let flat = longtail_sizes(&cfg(SizeDecay::Alpha(1.0), 4, Ordering::Ordered)).unwrap();
        assert_eq!(flat, vec![500; 4]);
    }

    #[test]
    fn size_errors() {
        assert!(
            longtail_sizes(&cfg(SizeDecay::ImbalanceRatio(0.1), 1, Ordering::Ordered)).is_err()
        );
        assert!(longtail_sizes(&cfg(SizeDecay::Alpha(1.5), 3, Ordering::Ordered)).is_err());
        let mut c = cfg(SizeDecay::Alpha(0.5), 3, Ordering::Ordered);
        c.base_count = 2;
        assert!(longtail_sizes(&c).is_err());
    }

    #[test]
    fn tiny_sizes_are_at_least_one() {
        let mut c = cfg(SizeDecay::Alpha(0.01), 5, Ordering::Ordered);
        c.base_count = 10;
        assert_eq!(longtail_sizes(&c).unwrap(), vec![10, 1, 1, 1, 1]);
    }

    #[test]
    fn gaussian_pool() {
        let p = synth_gaussians(10, 2, 3.0, 1000, 1).unwrap();
        assert_eq!(p.num_classes(), 10);
        assert!(p
            .labels()
            .iter()
            .all(|&l| p.class(l).unwrap().len() == 1000));
        assert_eq!(p, synth_gaussians(10, 2, 3.0, 1000, 1).unwrap());
        assert_ne!(p, synth_gaussians(10, 2, 3.0, 1000, 2).unwrap());
        assert!(synth_gaussians(10, 0, 3.0, 10, 1).is_err());
        assert!(synth_gaussians(1, 2, 3.0, 10, 1).is_err());
    }

    #[test]
    fn zero_separation_pool_has_a_common_mean() {
        let p = synth_gaussians(3, 2, 0.0, 4000, 5).unwrap();
        for l in p.labels() {
            let rows = p.class(l).unwrap();
            for d in 0..2 {
                let mean: f64 = rows.iter().map(|r| r[d]).sum::<f64>() / rows.len() as f64;
                assert!(mean.abs() < 0.1, "class {l} mean {mean}");
            }
        }
    }

    #[test]
    fn ordered_stream_layout() {
        let pool = synth_gaussians(10, 3, 4.0, 300, 3).unwrap();
        let c = cfg(SizeDecay::ImbalanceRatio(0.01), 5, Ordering::Ordered);
        let tasks = build_stream(&pool, &c).unwrap();
        let sizes: Vec<usize> = tasks.iter().map(TaskDataset::size).collect();
        assert_eq!(sizes, vec![500, 158, 50, 15, 5]);
        assert_eq!(tasks[0].classes, vec![0, 1]);
        assert_eq!(tasks[4].classes, vec![8, 9]);
        // 15 split over classes 6 and 7: remainder goes to the lower label.
        let n6 = tasks[3].samples.iter().filter(|s| s.y == 6).count();
        assert_eq!(n6, 8);
        assert_eq!(tasks, build_stream(&pool, &c).unwrap());
    }

    #[test]
    fn shuffled_stream_partitions_classes() {
        let pool = synth_gaussians(10, 3, 4.0, 300, 3).unwrap();
        let c = cfg(SizeDecay::ImbalanceRatio(0.01), 5, Ordering::Shuffled);
        let tasks = build_stream(&pool, &c).unwrap();
        let mut seen: Vec<usize> = tasks.iter().flat_map(|t| t.classes.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        for t in &tasks {
            assert!(t.samples.iter().all(|s| t.classes.contains(&s.y)));
        }
    }

    #[test]
    fn ordered_and_shuffled_hold_the_same_samples() {
        let pool = synth_gaussians(10, 3, 4.0, 300, 3).unwrap();
        let mut c = cfg(SizeDecay::ImbalanceRatio(0.01), 5, Ordering::Ordered);
        let ordered = build_stream(&pool, &c).unwrap();
        c.ordering = Ordering::Shuffled;
        let shuffled = build_stream(&pool, &c).unwrap();
        let key = |tasks: &[TaskDataset]| {
            let mut ids: Vec<u64> = tasks
                .iter()
                .flat_map(|t| t.samples.iter().map(|s| s.id))
                .collect();
            ids.sort_unstable();
            ids
        };
        assert_eq!(key(&ordered), key(&shuffled));
    }

    #[test]
    fn insufficient_pool_names_the_class() {
        let pool = synth_gaussians(10, 3, 4.0, 100, 3).unwrap();
        let c = cfg(SizeDecay::ImbalanceRatio(0.01), 5, Ordering::Ordered);
        match build_stream(&pool, &c) {
            Err(Error::Capacity { class, needed, .. }) => {
                assert_eq!(class, 0);
                assert_eq!(needed, 250);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn holdout_split_is_disjoint() {
        let pool = synth_gaussians(4, 2, 4.0, 50, 3).unwrap();
        let (train, test) = pool.split_holdout(10, 1).unwrap();
        for l in pool.labels() {
            assert_eq!(test.class(l).unwrap().len(), 10);
            assert_eq!(train.class(l).unwrap().len(), 40);
            for r in test.class(l).unwrap() {
                assert!(!train.class(l).unwrap().contains(r));
            }
        }
    }

    #[test]
    fn parse_small_file() {
        let text = "label,f0,f1\n0,1.5,2\n1,-3,4e-2\n0,0,0\n";
        let p = read_pool(text.as_bytes()).unwrap();
        assert_eq!(p.num_classes(), 2);
        assert_eq!(p.dim(), 2);
        assert_eq!(p.class(0).unwrap().len(), 2);
        assert_eq!(p.class(1).unwrap()[0], vec![-3.0, 0.04]);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = |t: &str| match read_pool(t.as_bytes()) {
            Err(Error::Parse { line, .. }) => line,
            other => panic!("expected parse error, got {other:?}"),
        };
        assert_eq!(err(""), 1);
        assert_eq!(err("id,f0\n0,1\n"), 1);
        assert_eq!(err("label,f0,f2\n"), 1);
        assert_eq!(err("label,f0,f1\n0,1,2\n0,1\n"), 3);
        assert_eq!(err("label,f0\n0,abc\n"), 2);
        assert_eq!(err("label,f0\n-1,0.5\n"), 2);
        assert_eq!(err("label,f0\n"), 2);
    }

    proptest! {
        #[test]
        fn sizes_monotone_and_positive(n in 1usize..12, alpha in 0.01f64..1.0, extra in 0usize..1000) {
            let c = StreamConfig {
                n_tasks: n,
                classes_per_task: 1,
                base_count: n + extra,
                decay: SizeDecay::Alpha(alpha),
                ordering: Ordering::Ordered,
                seed: 0,
            };
            let s = longtail_sizes(&c).unwrap();
            prop_assert!(s.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(s.iter().all(|&v| v >= 1));
        }

        #[test]
        fn pool_round_trips_exactly(seed in 0u64..1000, dim in 1usize..5) {
            let pool = synth_gaussians(3, dim, 2.5, 7, seed).unwrap();
            let mut buf = Vec::new();
            pool.write(&mut buf).unwrap();
            prop_assert_eq!(read_pool(buf.as_slice()).unwrap(), pool);
        }

        #[test]
        fn streams_never_reuse_samples(seed in 0u64..200, shuffled in any::<bool>()) {
            let pool = synth_gaussians(6, 2, 3.0, 120, seed).unwrap();
            let c = StreamConfig {
                n_tasks: 3,
                classes_per_task: 2,
                base_count: 200,
                decay: SizeDecay::ImbalanceRatio(0.1),
                ordering: if shuffled { Ordering::Shuffled } else { Ordering::Ordered },
                seed,
            };
            let tasks = build_stream(&pool, &c).unwrap();
            let mut ids: Vec<u64> = tasks.iter().flat_map(|t| t.samples.iter().map(|s| s.id)).collect();
            let total = ids.len();
            ids.sort_unstable();
            ids.dedup();
            prop_assert_eq!(ids.len(), total);
            prop_assert!(total <= pool.len());
        }
    }
}
