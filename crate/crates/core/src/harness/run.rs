//! Training loop, task-end buffer update, evaluation and artifacts.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use super::config::{DataSource, EvalMode, ExperimentConfig};
use crate::buffer::{AuditRecord, BufferPolicy, BufferState, AUDIT_HEADER};
use crate::error::{Error, Result};
use crate::metrics::{acc_bwt, forgetting, AccuracyMatrix};
use crate::net::{argmax, sgd_step, DropoutMask, ModelState, NetSpec, TeacherSnapshot, WeightNorm};
use crate::objectives::{
    backward, prediction_temperature, BatchItem, ClassScope, LossBreakdown, LossWeights,
};
use crate::report::{pct2, sig9};
use crate::seed;
use crate::stream::{
    build_stream, build_test_tasks, load_pool, synth_gaussians, SamplePool, TaskDataset,
};
use crate::uncertainty::{score_and_sort_ordered, score_dump, MCConfig};

/// Loss values of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossLog {
    pub task_id: usize,
    pub epoch: usize,
    pub step: usize,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModeResult {
    pub mode: EvalMode,
    pub matrix: AccuracyMatrix,
    pub acc: f64,
    pub bwt: f64,
    pub forgetting: Vec<f64>,
}

/// Buffer composition after a task: stored samples per source task.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BufferSnapshot {
    pub after_task: usize,
    pub per_task: Vec<usize>,
}

/// Everything that goes into `summary.json`. Wall-clock time is kept out so
/// that identical seeds give identical files.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRecord {
    pub config: ExperimentConfig,
    pub task_sizes: Vec<usize>,
    pub task_classes: Vec<Vec<usize>>,
    pub results: Vec<ModeResult>,
    pub buffer: Vec<BufferSnapshot>,
    pub final_fingerprint: String,
}

impl RunRecord {
    pub fn mode(&self, mode: EvalMode) -> Option<&ModeResult> {
        self.results.iter().find(|r| r.mode == mode)
    }
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub record: RunRecord,
    pub losses: Vec<LossLog>,
    pub audit: Vec<AuditRecord>,
    pub weight_norms: Vec<(usize, WeightNorm)>,
    /// `task_id,sample_index,H,expected_H,MI` lines, when requested.
    pub scores: Option<String>,
    pub model: ModelState,
    pub wall_clock_secs: f64,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Score every task at its end (also under non-uncertainty policies) and
    /// keep the dump.
    pub dump_scores: bool,
}

/// Training and held-out data for a configuration.
pub struct Data {
    pub train: Vec<TaskDataset>,
    pub test: Vec<TaskDataset>,
    pub dim: usize,
    pub num_classes: usize,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<Data> {
    let n_classes = cfg.stream.n_tasks * cfg.stream.classes_per_task;
    let pool: SamplePool = match &cfg.data {
        DataSource::Gaussian {
            dim,
            separation,
            pool_per_class,
        } => synth_gaussians(
            n_classes,
            *dim,
            *separation,
            pool_per_class + cfg.test_per_class,
            cfg.seed,
        )?,
        DataSource::File(path) => load_pool(path)?,
    };
    let (train_pool, test_pool) = pool.split_holdout(cfg.test_per_class, cfg.seed)?;
    let train = build_stream(&train_pool, &cfg.stream)?;
    let test = build_test_tasks(&test_pool, &train)?;
    let num_classes = train
        .iter()
        .flat_map(|t| t.classes.iter().copied())
        .max()
        .map_or(0, |m| m + 1);
    Ok(Data {
        train,
        test,
        dim: pool.dim(),
        num_classes,
    })
}

fn scope_for(train: &[TaskDataset], task: usize) -> ClassScope {
    let seen = train[..=task]
        .iter()
        .flat_map(|t| t.classes.iter().copied())
        .collect();
    let old = train[..task]
        .iter()
        .flat_map(|t| t.classes.iter().copied())
        .collect();
    ClassScope::new(seen, old)
}

/// Trains on one task: `epochs` passes of `ceil(|task| / batch_size)` steps,
/// each step pairing an incoming mini-batch with an equally sized buffer batch.
pub fn train_task(
    model: &mut ModelState,
    teacher: Option<&TeacherSnapshot>,
    buffer: &BufferState,
    task: &TaskDataset,
    scope: &ClassScope,
    cfg: &ExperimentConfig,
) -> Result<Vec<LossLog>> {
    let weights = LossWeights::from_config(&cfg.loss);
    let mut logs = Vec::new();
    let mut order: Vec<usize> = (0..task.size()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = seed::rng(&[cfg.seed, seed::TAG_TRAIN, task.task_id as u64, epoch as u64]);
        order.shuffle(&mut rng);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let incoming: Vec<BatchItem<'_>> = chunk
                .iter()
                .map(|&i| {
                    let s = &task.samples[i];
                    BatchItem {
                        x: &s.x,
                        y: s.y,
                        mask: Some(DropoutMask::sample(model, &mut rng)),
                    }
                })
                .collect();
            let replay: Vec<BatchItem<'_>> = buffer
                .sample_batch(cfg.batch_size, &mut rng)
                .into_iter()
                .map(|e| BatchItem {
                    x: &e.x,
                    y: e.y,
                    mask: Some(DropoutMask::sample(model, &mut rng)),
                })
                .collect();
            let (loss, grads) = backward(
                model, teacher, &incoming, &replay, scope, &cfg.loss, weights,
            )
            .map_err(|e| e.at_stage(format!("task {} epoch {epoch} step {step}", task.task_id)))?;
            if !loss.total.is_finite() {
                return Err(Error::NumericOverflow {
                    layer: 0,
                    stage: "loss",
                });
            }
            sgd_step(model, &grads, cfg.lr)?;
            logs.push(LossLog {
                task_id: task.task_id,
                epoch,
                step,
                loss,
            });
        }
    }
    Ok(logs)
}

/// Accuracy (percent) on each of `tests`, without dropout. Class-IL predicts
/// over `scope.seen`; Task-IL over each task's own classes.
pub fn evaluate(
    model: &ModelState,
    tests: &[TaskDataset],
    seen: &[usize],
    mode: EvalMode,
) -> Result<Vec<f64>> {
    tests
        .iter()
        .map(|task| {
            let classes: &[usize] = match mode {
                EvalMode::ClassIl => seen,
                EvalMode::TaskIl => &task.classes,
            };
            if let Some(s) = task.samples.iter().find(|s| !classes.contains(&s.y)) {
                return Err(Error::param(format!(
                    "test label {} is not among the evaluated classes",
                    s.y
                )));
            }
            if task.samples.is_empty() {
                return Err(Error::param(format!(
                    "test set of task {} is empty",
                    task.task_id
                )));
            }
            let correct = task
                .samples
                .par_iter()
                .map(|s| {
                    let logits = model.forward(&s.x, None)?.logits;
                    let picked: Vec<f64> = classes.iter().map(|&c| logits[c]).collect();
                    Ok(usize::from(classes[argmax(&picked)] == s.y))
                })
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .sum::<usize>();
            Ok(100.0 * correct as f64 / task.size() as f64)
        })
        .collect()
}

/// Runs the whole stream on a dedicated thread pool of `cfg.threads` workers.
pub fn run_experiment(cfg: &ExperimentConfig, opts: RunOptions) -> Result<RunArtifacts> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::param(format!("thread pool: {e}")))?;
    pool.install(|| run_inner(cfg, opts))
}

fn run_inner(cfg: &ExperimentConfig, opts: RunOptions) -> Result<RunArtifacts> {
    let started = Instant::now();
    let data = prepare_data(cfg).map_err(|e| e.at_stage("data"))?;
    let spec = NetSpec {
        input_dim: data.dim,
        hidden: cfg.hidden.clone(),
        num_classes: data.num_classes,
        dropout_rate: cfg.dropout_rate,
        head: cfg.head,
        scale: cfg.loss.scale,
    };
    let mut model = ModelState::init(&spec, &mut seed::rng(&[cfg.seed, seed::TAG_INIT]))?;
    let mut buffer = BufferState::new(cfg.buffer_capacity, cfg.buffer_policy);
    let mut teacher: Option<TeacherSnapshot> = None;
    let mut matrices: Vec<(EvalMode, AccuracyMatrix)> = cfg
        .eval_modes
        .iter()
        .map(|&m| (m, AccuracyMatrix::default()))
        .collect();
    let mut losses = Vec::new();
    let mut audit = Vec::new();
    let mut weight_norms = Vec::new();
    let mut snapshots = Vec::new();
    let mut scores = opts.dump_scores.then(String::new);
    let mc = MCConfig {
        passes: cfg.mc_passes,
        tau1: prediction_temperature(&model, cfg.loss.tau1),
        seed: cfg.seed,
    };

    for (t, task) in data.train.iter().enumerate() {
        let scope = scope_for(&data.train, t);
        losses.extend(train_task(
            &mut model,
            teacher.as_ref(),
            &buffer,
            task,
            &scope,
            cfg,
        )?);

        // Task end: score, update the buffer, freeze the teacher.
        let needs_scores = cfg.buffer_policy == BufferPolicy::Uncertainty || opts.dump_scores;
        let sorted = if needs_scores {
            Some(
                score_and_sort_ordered(&model, task, &scope.seen, &mc, cfg.candidate_order)
                    .map_err(|e| e.at_stage(format!("scoring task {t}")))?,
            )
        } else {
            None
        };
        if let (Some(out), Some(sorted)) = (scores.as_mut(), sorted.as_ref()) {
            out.push_str(&score_dump(t, sorted));
        }
        let mut rng = seed::rng(&[cfg.seed, seed::TAG_BUFFER, t as u64]);
        match cfg.buffer_policy {
            BufferPolicy::None => {}
            BufferPolicy::Vanilla => buffer.vanilla_task_update(task, &mut rng)?,
            BufferPolicy::Uncertainty => {
                let sorted = sorted.as_deref().expect("scored above");
                audit.extend(buffer.task_end_update(task, sorted, &mut rng)?);
            }
        }
        teacher = Some(TeacherSnapshot::freeze(&model, t));

        let mut per_task = vec![0; data.train.len()];
        for e in buffer.entries() {
            per_task[e.task_id] += 1;
        }
        snapshots.push(BufferSnapshot {
            after_task: t,
            per_task,
        });
        weight_norms.extend(model.weight_magnitude_report().into_iter().map(|w| (t, w)));
        for (mode, matrix) in &mut matrices {
            let row = evaluate(&model, &data.test[..=t], &scope.seen, *mode)?;
            matrix.push_row(row)?;
        }
    }

    let results = matrices
        .into_iter()
        .map(|(mode, matrix)| {
            let (acc, bwt) = acc_bwt(&matrix)?;
            Ok(ModeResult {
                mode,
                forgetting: forgetting(&matrix)?,
                acc,
                bwt,
                matrix,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let record = RunRecord {
        config: cfg.clone(),
        task_sizes: data.train.iter().map(TaskDataset::size).collect(),
        task_classes: data.train.iter().map(|t| t.classes.clone()).collect(),
        results,
        buffer: snapshots,
        final_fingerprint: format!("{:016x}", model.fingerprint()),
    };
    Ok(RunArtifacts {
        record,
        losses,
        audit,
        weight_norms,
        scores,
        model,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

pub fn metrics_csv(record: &RunRecord) -> String {
    let mut out = String::from("after_task,eval_task,mode,accuracy\n");
    for r in &record.results {
        for (j, row) in r.matrix.rows.iter().enumerate() {
            for (i, v) in row.iter().enumerate() {
                let _ = writeln!(out, "{j},{i},{},{}", r.mode.as_str(), pct2(*v));
            }
        }
    }
    out
}

pub fn losses_csv(logs: &[LossLog]) -> String {
    let mut out = String::from("task_id,epoch,step,mce,kd,proto,total\n");
    for l in logs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            l.task_id,
            l.epoch,
            l.step,
            sig9(l.loss.mce),
            sig9(l.loss.kd),
            sig9(l.loss.proto),
            sig9(l.loss.total)
        );
    }
    out
}

pub fn audit_csv(audit: &[AuditRecord]) -> String {
    let mut out = format!("{AUDIT_HEADER}\n");
    for a in audit {
        out.push_str(&a.csv_line());
        out.push('\n');
    }
    out
}

pub fn weight_norms_csv(rows: &[(usize, WeightNorm)]) -> String {
    let mut out = String::from("after_task,class,norm,bias\n");
    for (t, w) in rows {
        let bias = w.bias.map(sig9).unwrap_or_default();
        let _ = writeln!(out, "{t},{},{},{bias}", w.class, sig9(w.norm));
    }
    out
}

pub fn summary_json(record: &RunRecord) -> Result<String> {
    Ok(serde_json::to_string_pretty(record)? + "\n")
}

/// Writes `summary.json`, `metrics.csv`, `losses.csv`, `buffer_audit.csv`,
/// `weight_norms.csv`, `config.txt` and, when present, `scores.csv` into `dir`.
pub fn write_artifacts(dir: &Path, a: &RunArtifacts) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("summary.json"), summary_json(&a.record)?)?;
    std::fs::write(dir.join("metrics.csv"), metrics_csv(&a.record))?;
    std::fs::write(dir.join("losses.csv"), losses_csv(&a.losses))?;
    std::fs::write(dir.join("buffer_audit.csv"), audit_csv(&a.audit))?;
    std::fs::write(
        dir.join("weight_norms.csv"),
        weight_norms_csv(&a.weight_norms),
    )?;
    std::fs::write(dir.join("config.txt"), a.record.config.to_kv_text())?;
    if let Some(scores) = &a.scores {
        std::fs::write(
            dir.join("scores.csv"),
            format!("task_id,sample_index,H,expected_H,MI\n{scores}"),
        )?;
    }
    Ok(())
}
