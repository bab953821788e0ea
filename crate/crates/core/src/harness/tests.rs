use super::*;
use crate::nn::Arch;

fn tiny_arch() -> Arch {
    Arch {
        width: 8,
        blocks: 2,
        fw_layers: 2,
        ..Arch::default()
    }
}

fn shrink(mut m: Method) -> Method {
    m.train.arch = tiny_arch();
    m.train.batch_size = 16;
    m.adapt.adaptive_locations = vec![1, 2];
    m.adapt.adapter_layers = 2;
    m.adapt.batch_size = 16;
    m
}

fn tiny_plan(dir: &Path, names: &[&str], trials: usize) -> ExperimentPlan {
    let specs = default_domain_specs()
        .into_iter()
        .take(3)
        .map(|mut s| {
            s.n_samples = 40;
            s
        })
        .collect();
    ExperimentPlan {
        suite: SuiteSource::Generate {
            class_count: 4,
            specs,
            seed: 5,
        },
        methods: names
            .iter()
            .map(|n| MethodEntry::Custom(shrink(builtin_method(n).unwrap())))
            .collect(),
        trials,
        output: dir.to_path_buf(),
        steps: Some(6),
        eval_every: Some(3),
        ..ExperimentPlan::default()
    }
}

#[test]
fn builtin_matrix_is_complete_and_named_uniquely() {
    let methods = builtin_methods();
    assert_eq!(methods.len(), 8);
    let names: BTreeSet<&str> = methods.iter().map(|m| m.name.as_str()).collect();
    assert_eq!(names.len(), 8);
    for n in BUILTIN_NAMES {
        assert!(names.contains(n));
    }

    let ours = builtin_method("ours").unwrap();
    assert_eq!(ours.train.alpha, 1.0);
    assert_eq!(ours.train.aux_task, AuxTask::Consistency);
    assert!(ours.train.learn_w);
    assert_eq!(ours.adapt.strategy, Strategy::Ada);
    assert_eq!(ours.adapt.ttt_steps, 1);
    assert_eq!(ours.adapt.mode, crate::adapt::AdaptMode::Online);
    assert_eq!(ours.adapt.objective, AdaptObjective::Wcont);

    assert_eq!(builtin_method("ours_no_ttt").unwrap().adapt.ttt_steps, 0);
    let no_fw = builtin_method("ours_no_fw").unwrap();
    assert!(!no_fw.train.learn_w);
    assert_eq!(no_fw.adapt, ours.adapt);
    let erm = builtin_method("erm").unwrap();
    assert_eq!(erm.train.alpha, 0.0);
    assert_eq!(erm.adapt.strategy, Strategy::None);
    for (n, s) in [("ours_all", Strategy::All), ("ours_bn", Strategy::Bn)] {
        let m = builtin_method(n).unwrap();
        assert_eq!(m.adapt.strategy, s);
        assert_eq!(m.train, ours.train);
    }
    assert!(matches!(
        builtin_method("tent"),
        Err(Error::UnknownMethod(_))
    ));
}

#[test]
fn plans_parse_with_defaults_and_reject_bad_matrices() {
    let plan = ExperimentPlan::from_json("{}").unwrap();
    assert_eq!(plan.trials, 5);
    assert_eq!(plan.protocol, Protocol::LeaveOneOut);
    assert_eq!(plan.resolved_methods().unwrap().len(), 8);
    plan.validate().unwrap();

    let plan = ExperimentPlan::from_json(
        r#"{"methods": ["erm", {"name": "mine", "train": {"alpha": 0.5}}], "protocol": "single_source",
            "suite": {"generate": {"seed": 3}}, "trials": 2}"#,
    )
    .unwrap();
    let m = plan.resolved_methods().unwrap();
    assert_eq!(m[1].train.alpha, 0.5);
    assert_eq!(m[1].train.lr_model, TrainConfig::default().lr_model);
    assert_eq!(plan.protocol, Protocol::SingleSource);

    let bad = ExperimentPlan {
        trials: 0,
        ..ExperimentPlan::default()
    };
    assert!(bad.validate().is_err());
    let dup = ExperimentPlan::from_json(r#"{"methods": ["ours", "ours"]}"#).unwrap();
    assert!(dup.validate().is_err());
    let unknown = ExperimentPlan::from_json(r#"{"methods": ["nope"]}"#).unwrap();
    assert!(matches!(unknown.validate(), Err(Error::UnknownMethod(_))));
}

#[test]
fn trial_draws_stay_within_half_a_decade_and_are_shared() {
    for trial in 0..50 {
        let d = trial_draw(9, trial, true);
        for f in [d.lr_model_factor, d.lr_adapt_factor] {
            assert!((10f64.powf(-0.5)..=10f64.powf(0.5)).contains(&f), "{f}");
        }
        assert_eq!(d, trial_draw(9, trial, true));
        let fixed = trial_draw(9, trial, false);
        assert_eq!(
            (fixed.seed, fixed.lr_model_factor, fixed.lr_adapt_factor),
            (d.seed, 1.0, 1.0)
        );
    }
    assert_ne!(trial_draw(9, 0, true), trial_draw(9, 1, true));

    let plan = ExperimentPlan::default();
    let ours = builtin_method("ours").unwrap();
    let no_ttt = builtin_method("ours_no_ttt").unwrap();
    let (a, _) = plan.cell_configs(&ours, 3);
    let (b, _) = plan.cell_configs(&no_ttt, 3);
    assert_eq!(a, b);
    assert_eq!(
        train_key(plan.protocol, "d0", &a),
        train_key(plan.protocol, "d0", &b)
    );
    assert_ne!(
        train_key(plan.protocol, "d0", &a),
        train_key(plan.protocol, "d1", &a)
    );
}

#[test]
fn smallest_plan_has_one_cell_per_domain_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let plan = tiny_plan(dir.path(), &["erm"], 1);
    let first = run_plan(&plan).unwrap();
    assert_eq!(first.computed_cells, 3);
    assert_eq!(first.table.rows.len(), 1);
    assert_eq!(first.table.rows[0].cells.len(), 3);
    assert!(first.table.all_valid());

    let again = run_plan(&plan).unwrap();
    assert_eq!(again.computed_cells, 0);
    assert_eq!(again.skipped_cells, 3);
    assert_eq!(again.table.render(), first.table.render());

    let fresh = tempfile::tempdir().unwrap();
    let other = run_plan(&ExperimentPlan {
        output: fresh.path().to_path_buf(),
        ..plan.clone()
    })
    .unwrap();
    assert_eq!(other.table.to_json(), first.table.to_json());
    assert_eq!(
        fs::read(fresh.path().join(TABLE_FILE)).unwrap(),
        fs::read(dir.path().join(TABLE_FILE)).unwrap()
    );
}

#[test]
fn resuming_recomputes_only_missing_cells() {
    let dir = tempfile::tempdir().unwrap();
    let plan = tiny_plan(dir.path(), &["ours", "ours_no_ttt"], 2);
    let full = run_plan(&plan).unwrap();
    assert_eq!(full.computed_cells, 12);
    // ours and ours_no_ttt share one checkpoint per (domain, trial)
    assert_eq!(full.trained, 6);

    let log = log_file(&plan);
    let text = fs::read_to_string(&log).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let kept: String = lines[..lines.len() / 2]
        .iter()
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(&log, kept).unwrap();

    let resumed = run_plan(&plan).unwrap();
    assert_eq!(resumed.computed_cells, 6);
    assert_eq!(resumed.skipped_cells, 6);
    assert_eq!(resumed.trained, 0);
    assert!(resumed.reused_checkpoints > 0);
    assert_eq!(resumed.table.render(), full.table.render());
    assert_eq!(resumed.table, full.table);
}

fn log_file(plan: &ExperimentPlan) -> PathBuf {
    plan.output.join(LOG_FILE)
}

#[test]
fn shared_training_is_visible_in_checkpoint_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let plan = tiny_plan(dir.path(), &["ours", "ours_no_ttt", "ours_no_fw"], 1);
    run_plan(&plan).unwrap();
    let records = read_log(log_file(&plan)).unwrap();
    let find = |m: &str, d: &str| {
        records
            .iter()
            .find(|r| r.method == m && r.domain == d)
            .unwrap()
    };
    for d in ["d0", "d1", "d2"] {
        let (a, b, c) = (
            find("ours", d),
            find("ours_no_ttt", d),
            find("ours_no_fw", d),
        );
        assert_eq!(a.train_key, b.train_key);
        assert_eq!(a.checkpoint_hash, b.checkpoint_hash);
        assert!(a.checkpoint_hash.is_some());
        assert_ne!(a.train_key, c.train_key);
        assert_ne!(a.checkpoint_hash, c.checkpoint_hash);
    }
}

#[test]
fn std_matches_the_raw_log() {
    let dir = tempfile::tempdir().unwrap();
    let plan = tiny_plan(dir.path(), &["erm"], 5);
    let out = run_plan(&plan).unwrap();
    let records = read_log(log_file(&plan)).unwrap();
    for (ci, col) in out.table.columns.iter().enumerate() {
        let mut accs: Vec<(usize, f64)> = records
            .iter()
            .filter(|r| &r.domain == col)
            .map(|r| (r.trial, r.accuracy.unwrap()))
            .collect();
        accs.sort_by_key(|a| a.0);
        let xs: Vec<f64> = accs.iter().map(|a| a.1).collect();
        assert_eq!(xs.len(), 5);
        let m = xs.iter().sum::<f64>() / 5.0;
        let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 5.0).sqrt();
        let cell = &out.table.rows[0].cells[ci];
        assert!((cell.std.unwrap() - sd).abs() < 1e-15);
        assert!((cell.mean.unwrap() - m).abs() < 1e-15);
    }
    let from_log = report_from_log(log_file(&plan), plan.protocol).unwrap();
    assert_eq!(from_log.render(), out.table.render());
    assert_eq!(report(&plan).unwrap(), out.table);
}

#[test]
fn worker_count_does_not_change_results() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let plan = tiny_plan(a.path(), &["erm", "ours_bn"], 1);
    let one = run_plan(&plan).unwrap();
    let three = run_plan(&ExperimentPlan {
        output: b.path().to_path_buf(),
        workers: 3,
        ..plan
    })
    .unwrap();
    assert_eq!(one.table.render(), three.table.render());
}

#[test]
fn failing_cells_are_marked_invalid() {
    let dir = tempfile::tempdir().unwrap();
    let mut plan = tiny_plan(dir.path(), &["erm"], 1);
    let mut broken = shrink(builtin_method("ours").unwrap());
    broken.name = "broken".into();
    broken.train.arch.classes = 3;
    plan.methods.push(MethodEntry::Custom(broken));
    let out = run_plan(&plan).unwrap();
    assert!(!out.table.all_valid());
    assert!(out.table.row("erm").unwrap().macro_avg.is_valid());
    let row = out.table.row("broken").unwrap();
    assert!(row.cells.iter().all(|c| !c.is_valid() && c.invalid == 1));
    assert!(out.table.render().contains("invalid"));
    let records = read_log(log_file(&plan)).unwrap();
    let bad = records.iter().find(|r| r.method == "broken").unwrap();
    assert_eq!(bad.status, CellStatus::Invalid);
    assert!(bad.error.as_deref().unwrap().contains("training failed"));
}

#[test]
fn interrupted_log_line_is_discarded() {
    let dir = tempfile::tempdir().unwrap();
    let plan = tiny_plan(dir.path(), &["erm"], 1);
    let full = run_plan(&plan).unwrap();
    let log = log_file(&plan);
    let mut text = fs::read_to_string(&log).unwrap();
    let cut = text.trim_end().rfind('\n').unwrap() + 1;
    text.truncate(cut + 20);
    fs::write(&log, &text).unwrap();
    assert_eq!(read_log(&log).unwrap().len(), 2);
    let resumed = run_plan(&plan).unwrap();
    assert_eq!(resumed.computed_cells, 1);
    assert_eq!(resumed.table, full.table);
}

#[test]
fn single_source_columns_average_over_the_other_domains() {
    let dir = tempfile::tempdir().unwrap();
    let plan = ExperimentPlan {
        protocol: Protocol::SingleSource,
        domains: Some(vec!["d1".into()]),
        ..tiny_plan(dir.path(), &["erm"], 1)
    };
    let out = run_plan(&plan).unwrap();
    assert_eq!(out.table.columns, vec!["d1".to_string()]);
    let rec = &read_log(log_file(&plan)).unwrap()[0];
    let targets: Vec<&str> = rec.per_target.iter().map(|(d, _)| d.as_str()).collect();
    assert_eq!(targets, ["d0", "d2"]);
    let avg = rec.per_target.iter().map(|p| p.1).sum::<f64>() / 2.0;
    assert_eq!(rec.accuracy, Some(avg));
}

#[test]
fn population_std_examples() {
    assert_eq!(population_std(&[]), 0.0);
    assert_eq!(population_std(&[3.0]), 0.0);
    assert_eq!(population_std(&[1.0, 3.0]), 1.0);
    assert!((population_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]) - 2.0).abs() < 1e-15);
}
