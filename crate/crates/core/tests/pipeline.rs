//! End-to-end behaviour of the training harness.

use std::collections::BTreeMap;

use ltcl_core::buffer::{BufferPolicy, BufferState};
use ltcl_core::harness::{
    evaluate, expand_grid, parse_grid, prepare_data, run_experiment, train_task, write_artifacts,
    DataSource, EvalMode, ExperimentConfig, RunOptions,
};
use ltcl_core::metrics::{acc_bwt, AccuracyMatrix};
use ltcl_core::net::{HeadKind, ModelState, NetSpec};
use ltcl_core::objectives::ClassScope;
use ltcl_core::seed;
use ltcl_core::stream::{Sample, SizeDecay, TaskDataset};

fn small() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.stream.n_tasks = 3;
    c.stream.base_count = 80;
    c.stream.decay = SizeDecay::ImbalanceRatio(0.1);
    c.data = DataSource::Gaussian {
        dim: 6,
        separation: 3.0,
        pool_per_class: 80,
    };
    c.test_per_class = 30;
    c.hidden = vec![32];
    c.buffer_capacity = 20;
    c.epochs = 3;
    c.batch_size = 16;
    c.mc_passes = 4;
    c
}

fn with(mut c: ExperimentConfig, pairs: &[(&str, &str)]) -> ExperimentConfig {
    let map: BTreeMap<String, String> = pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    c.apply(&map).unwrap();
    c
}

fn model_for(c: &ExperimentConfig, dim: usize, classes: usize) -> ModelState {
    let spec = NetSpec {
        input_dim: dim,
        hidden: c.hidden.clone(),
        num_classes: classes,
        dropout_rate: c.dropout_rate,
        head: c.head,
        scale: c.loss.scale,
    };
    ModelState::init(&spec, &mut seed::rng(&[c.seed, 99])).unwrap()
}

#[test]
fn one_epoch_of_one_batch_is_one_step() {
    let c = with(small(), &[("epochs", "1"), ("batch_size", "32")]);
    let task = TaskDataset {
        task_id: 0,
        classes: vec![0, 1],
        samples: (0..32)
            .map(|i| Sample {
                id: i,
                x: vec![i as f64 / 32.0; 6],
                y: (i % 2) as usize,
            })
            .collect(),
    };
    let mut m = model_for(&c, 6, 2);
    let buffer = BufferState::new(10, BufferPolicy::Uncertainty);
    let logs = train_task(
        &mut m,
        None,
        &buffer,
        &task,
        &ClassScope::new(vec![0, 1], vec![]),
        &c,
    )
    .unwrap();
    assert_eq!(logs.len(), 1);
    assert_eq!(logs[0].loss.kd, 0.0);
    assert_eq!(logs[0].loss.proto, 0.0);
}

#[test]
fn first_task_has_no_distillation_terms() {
    let a = run_experiment(&small(), RunOptions::default()).unwrap();
    assert!(a
        .losses
        .iter()
        .filter(|l| l.task_id == 0)
        .all(|l| l.loss.kd == 0.0 && l.loss.proto == 0.0));
    assert!(a.losses.iter().any(|l| l.task_id > 0 && l.loss.kd > 0.0));
}

#[test]
fn same_seed_same_parameters() {
    let a = run_experiment(&small(), RunOptions::default()).unwrap();
    let b = run_experiment(&small(), RunOptions::default()).unwrap();
    assert_eq!(a.model, b.model);
    let other = run_experiment(&with(small(), &[("seed", "1")]), RunOptions::default()).unwrap();
    assert_ne!(a.model, other.model);
}

#[test]
fn buffer_after_first_task_holds_min_of_capacity_and_task_size() {
    for cap in ["20", "500"] {
        let c = with(small(), &[("buffer_capacity", cap)]);
        let a = run_experiment(&c, RunOptions::default()).unwrap();
        let first: usize = a.record.buffer[0].per_task.iter().sum();
        assert_eq!(first, c.buffer_capacity.min(a.record.task_sizes[0]));
    }
}

#[test]
fn vanilla_policy_ignores_scores() {
    let base = with(small(), &[("buffer_policy", "vanilla")]);
    let a = run_experiment(&base, RunOptions::default()).unwrap();
    let b = run_experiment(
        &with(
            base.clone(),
            &[("mc_passes", "9"), ("candidate_order", "min_mi")],
        ),
        RunOptions::default(),
    )
    .unwrap();
    let c = run_experiment(&base, RunOptions { dump_scores: true }).unwrap();
    assert_eq!(a.record.buffer, b.record.buffer);
    assert_eq!(a.model, b.model);
    assert_eq!(a.model, c.model);
}

#[test]
fn task_il_dominates_class_il() {
    let a = run_experiment(&small(), RunOptions::default()).unwrap();
    let class = &a.record.mode(EvalMode::ClassIl).unwrap().matrix;
    let task = &a.record.mode(EvalMode::TaskIl).unwrap().matrix;
    for (rc, rt) in class.rows.iter().zip(&task.rows) {
        for (c, t) in rc.iter().zip(rt) {
            assert!(t >= c, "task-il {t} < class-il {c}");
        }
    }
}

#[test]
fn single_class_tasks_are_perfect_under_task_il() {
    let c = with(small(), &[("classes_per_task", "1")]);
    let a = run_experiment(&c, RunOptions::default()).unwrap();
    let task = &a.record.mode(EvalMode::TaskIl).unwrap().matrix;
    assert!(task.rows.iter().flatten().all(|&v| v == 100.0));
}

#[test]
fn untrained_model_is_near_chance() {
    // Zero separation: every class has the same distribution.
    let c = with(
        small(),
        &[
            ("separation", "0"),
            ("test_per_class", "400"),
            ("pool_per_class", "100"),
        ],
    );
    let data = prepare_data(&c).unwrap();
    let seen: Vec<usize> = (0..data.num_classes).collect();
    let mut total = 0.0;
    let trials = 20;
    for k in 0..trials {
        let m = model_for(
            &with(c.clone(), &[("seed", &k.to_string())]),
            data.dim,
            data.num_classes,
        );
        let row = evaluate(&m, &data.test, &seen, EvalMode::ClassIl).unwrap();
        total += row.iter().sum::<f64>() / row.len() as f64;
    }
    let mean = total / trials as f64;
    let chance = 100.0 / data.num_classes as f64;
    assert!(
        (mean - chance).abs() < 5.0,
        "mean accuracy {mean} vs chance {chance}"
    );
}

#[test]
fn evaluation_does_not_mutate_the_model() {
    let c = small();
    let data = prepare_data(&c).unwrap();
    let m = model_for(&c, data.dim, data.num_classes);
    let before = m.fingerprint();
    let seen: Vec<usize> = (0..data.num_classes).collect();
    evaluate(&m, &data.test, &seen, EvalMode::ClassIl).unwrap();
    evaluate(&m, &data.test, &seen, EvalMode::TaskIl).unwrap();
    assert_eq!(before, m.fingerprint());
}

#[test]
fn single_task_run() {
    let c = with(small(), &[("n_tasks", "1"), ("alpha_stream", "0.5")]);
    let a = run_experiment(&c, RunOptions::default()).unwrap();
    for r in &a.record.results {
        assert_eq!(r.bwt, 0.0);
        assert_eq!(r.acc, r.matrix.rows[0][0]);
    }
}

#[test]
fn persisted_matrix_reproduces_the_scalars() {
    let a = run_experiment(&small(), RunOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_artifacts(dir.path(), &a).unwrap();
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap())
            .unwrap();
    for r in json["results"].as_array().unwrap() {
        let rows: Vec<Vec<f64>> = serde_json::from_value(r["matrix"]["rows"].clone()).unwrap();
        let (acc, bwt) = acc_bwt(&AccuracyMatrix::new(rows).unwrap()).unwrap();
        assert_eq!(acc, r["acc"].as_f64().unwrap());
        assert_eq!(bwt, r["bwt"].as_f64().unwrap());
    }
    for (file, header) in [
        ("metrics.csv", "after_task,eval_task,mode,accuracy"),
        ("losses.csv", "task_id,epoch,step,mce,kd,proto,total"),
        (
            "buffer_audit.csv",
            "task_id,iter,candidate_id,P,accepted,evicted_id",
        ),
        ("weight_norms.csv", "after_task,class,norm,bias"),
    ] {
        let text = std::fs::read_to_string(dir.path().join(file)).unwrap();
        assert_eq!(text.lines().next().unwrap(), header, "{file}");
    }
    // Lower triangle: after task j there are j + 1 rows per mode.
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 2 * (1 + 2 + 3));
}

#[test]
fn weight_report_covers_every_class_after_every_task() {
    let c = with(small(), &[("head", "linear")]);
    let a = run_experiment(&c, RunOptions::default()).unwrap();
    assert_eq!(a.weight_norms.len(), 3 * 6);
    assert!(a
        .weight_norms
        .iter()
        .all(|(_, w)| w.bias.is_some() && w.norm > 0.0));
}

#[test]
fn ablation_grid_runs_all_six_cells() {
    let grid = parse_grid("head = linear | cosine\nbuffer_policy = none | random | uncertainty\n")
        .unwrap();
    let combos = expand_grid(&grid);
    assert_eq!(combos.len(), 6);
    let mut heads = Vec::new();
    for over in combos {
        let mut c = small();
        c.epochs = 1;
        c.apply(&over).unwrap();
        let a = run_experiment(&c, RunOptions::default()).unwrap();
        assert_eq!(a.record.results.len(), 2);
        heads.push((c.head, c.buffer_policy));
    }
    assert!(heads.contains(&(HeadKind::Linear, BufferPolicy::None)));
    assert!(heads.contains(&(HeadKind::Cosine, BufferPolicy::Uncertainty)));
}

#[test]
fn file_backed_pool() {
    let c = small();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pool.csv");
    let pool = ltcl_core::stream::synth_gaussians(6, 3, 2.0, 120, 5).unwrap();
    pool.save(&path).unwrap();
    let c = with(
        c,
        &[
            ("data_path", path.to_str().unwrap()),
            ("test_per_class", "20"),
        ],
    );
    let a = run_experiment(&c, RunOptions::default()).unwrap();
    assert_eq!(a.record.task_sizes, vec![80, 25, 8]);
}

#[test]
fn unseen_class_fails_with_stage_name() {
    let c = with(small(), &[("base_count", "500")]);
    let err = run_experiment(&c, RunOptions::default()).unwrap_err();
    assert!(err.to_string().contains("data"), "{err}");
}
