//! Two-phase training, checkpoints and evaluation on a small cohort.

use gmenet::checkpoint::Checkpoint;
use gmenet::data::{
    generate_cohort, read_dataset, split_cohort, write_dataset, CohortConfig, DatasetHeader, Mode, SampleRecord,
    SplitConfig, SplitPlan, SCHEMA_VERSION,
};
use gmenet::loss::{ClassCounts, LogCounts};
use gmenet::model::{ModelConfig, Variant};
use gmenet::nn::{grad_check, GradCheckOptions};
use gmenet::pipeline::{
    ablate, build_model, cross_validate, evaluate, index_records, load_model, lookup, pretrain_cggm, train,
    write_ablation_csv, RunConfig,
};
use gmenet::Error;

fn small_run() -> RunConfig {
    RunConfig {
        model: ModelConfig {
            raw_dim: 8,
            dim: 16,
            tokens: 4,
            heads: 2,
            expert_dim: 8,
            fused_dim: 16,
            ln_eps: 1e-5,
        },
        pretrain_steps: 40,
        train_steps: 40,
        batch_size: 16,
        ..RunConfig::default()
    }
}

fn small_cohort() -> (Vec<SampleRecord>, SplitPlan) {
    let cfg = CohortConfig {
        raw_dim: 8,
        ..CohortConfig::default()
    };
    let records = generate_cohort(&cfg).unwrap();
    let plan = split_cohort(&records, &SplitConfig::default()).unwrap();
    (records, plan)
}

fn pretrained(cfg: &RunConfig, records: &[SampleRecord], plan: &SplitPlan) -> Checkpoint {
    let index = index_records(records);
    pretrain_cggm(cfg, &lookup(&index, &plan.pool()).unwrap())
        .unwrap()
        .checkpoint
}

#[test]
fn dataset_file_round_trip() {
    let (records, _) = small_cohort();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.jsonl");
    let header = DatasetHeader {
        raw_dim: 8,
        schema_version: SCHEMA_VERSION,
        seed: 0,
    };
    write_dataset(&path, header, &records).unwrap();
    let (h, back) = read_dataset(&path).unwrap();
    assert_eq!(h.raw_dim, 8);
    assert_eq!(back, records);
}

#[test]
fn frozen_generator_survives_fine_tuning_and_control_moves() {
    let (records, plan) = small_cohort();
    let cfg = RunConfig {
        train_steps: 100,
        ..small_run()
    };
    let ck = pretrained(&cfg, &records, &plan);
    let index = index_records(&records);
    let train_set = lookup(&index, &plan.train_ids(None, Mode::Ms)).unwrap();
    let outcome = train(&cfg, &train_set, Some(&plan), Some(&ck)).unwrap();
    for b in ck.blocks.iter().filter(|b| b.group.starts_with("cggm")) {
        let id = outcome.model.params.find(&b.name).unwrap();
        assert_eq!(outcome.model.params.value(id), &b.value, "{} moved", b.name);
    }

    // Same run with the generator left trainable.
    let mut model = build_model(&cfg, Some(&ck)).unwrap();
    for g in ["cggm.fl_to_t1c", "cggm.t1c_to_fl"] {
        assert!(model.params.is_group_frozen(g));
        model.params.unfreeze_group(g);
    }
    let counts = ClassCounts::from_labels(train_set.iter().map(|r| &r.labels));
    let log_n = LogCounts::new(&counts, false).unwrap();
    let mut opt = gmenet::optim::AdamW::new(cfg.optimizer, &model.params);
    let batch: Vec<&SampleRecord> = train_set.iter().copied().filter(|r| !r.is_complete()).take(16).collect();
    model.params.zero_grad();
    model.loss_and_backward(&batch, &log_n).unwrap();
    opt.step(&mut model.params);
    let moved = ck.blocks.iter().filter(|b| b.group.starts_with("cggm")).any(|b| {
        let id = model.params.find(&b.name).unwrap();
        model.params.value(id) != &b.value
    });
    assert!(moved);
}

#[test]
fn gradient_reaches_stems_through_the_frozen_generator() {
    let (records, plan) = small_cohort();
    let cfg = RunConfig {
        model: ModelConfig {
            raw_dim: 8,
            dim: 8,
            tokens: 2,
            heads: 2,
            expert_dim: 4,
            fused_dim: 6,
            ln_eps: 1e-5,
        },
        pretrain_steps: 5,
        ..small_run()
    };
    let ck = pretrained(&cfg, &records, &plan);
    let mut model = build_model(&cfg, Some(&ck)).unwrap();
    // Only one sequence is present, so the other stem is reached solely via
    // imputation and the FL stem's gradient includes the generator path.
    let batch: Vec<&SampleRecord> = records.iter().filter(|r| r.t1c.is_none()).take(4).collect();
    assert_eq!(batch.len(), 4);
    let counts = ClassCounts {
        idh: [4, 6],
        codel: [7, 3],
        pathology: [3, 3, 4],
    };
    let log_n = LogCounts::new(&counts, false).unwrap();
    let mut params = std::mem::take(&mut model.params);
    let report = grad_check(&mut params, GradCheckOptions::default(), |ps| {
        std::mem::swap(&mut model.params, ps);
        let out = model.loss_and_backward(&batch, &log_n);
        std::mem::swap(&mut model.params, ps);
        out
    })
    .unwrap();
    assert!(report.frozen.iter().all(|n| n.starts_with("cggm")));
    assert!(!report.frozen.is_empty());
    assert!(report.passes(1e-4), "{report:?}");
    model.params = params;
    model.params.zero_grad();
    model.loss_and_backward(&batch, &log_n).unwrap();
    let stem = model.params.find("stem_fl.fc1.weight").unwrap();
    assert!(model.params.grad(stem).data().iter().any(|&g| g != 0.0));
}

#[test]
fn model_checkpoint_restores_predictions() {
    let (records, plan) = small_cohort();
    let cfg = small_run();
    let ck = pretrained(&cfg, &records, &plan);
    let index = index_records(&records);
    let train_set = lookup(&index, &plan.train_ids(None, Mode::Ms)).unwrap();
    let outcome = train(&cfg, &train_set, Some(&plan), Some(&ck)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    outcome.checkpoint().save(&path).unwrap();
    let restored = load_model(&Checkpoint::load(&path).unwrap()).unwrap();
    let test = lookup(&index, &plan.internal_test).unwrap();
    let a = evaluate(&outcome.model, &test).unwrap();
    let b = evaluate(&restored, &test).unwrap();
    assert_eq!(a.report, b.report);
    for (x, y) in a.scores.iter().zip(&b.scores) {
        assert_eq!(x.probs, y.probs);
    }
    assert_eq!(restored.variant, Variant::Full);
    assert!(restored.params.is_group_frozen("cggm.fl_to_t1c"));
    assert!(load_model(&ck).is_err());
}

#[test]
fn protocol_violations_are_rejected() {
    let (records, plan) = small_cohort();
    let cfg = small_run();
    let ck = pretrained(&cfg, &records, &plan);
    let index = index_records(&records);

    let ms = lookup(&index, &plan.train_ids(None, Mode::Ms)).unwrap();
    let fs_cfg = RunConfig { mode: Mode::Fs, ..cfg };
    assert!(matches!(train(&fs_cfg, &ms, Some(&plan), Some(&ck)), Err(Error::Protocol(_))));

    let mut leaky = lookup(&index, &plan.train_ids(None, Mode::Fs)).unwrap();
    leaky.push(index[plan.independent_test[0].as_str()]);
    assert!(matches!(train(&cfg, &leaky, Some(&plan), Some(&ck)), Err(Error::Protocol(_))));

    let no_cggm = RunConfig {
        variant: Variant::NoCggm,
        ..cfg
    };
    assert!(train(&no_cggm, &ms, Some(&plan), Some(&ck)).is_err());
    assert!(train(&cfg, &ms, Some(&plan), None).is_err());

    let model = build_model(&no_cggm, None).unwrap();
    let incomplete: Vec<&SampleRecord> = records.iter().filter(|r| !r.is_complete()).take(2).collect();
    assert!(matches!(evaluate(&model, &incomplete), Err(Error::Protocol(_))));
}

#[test]
fn cross_validation_and_ablation_tables() {
    let (records, plan) = small_cohort();
    let cfg = RunConfig {
        train_steps: 10,
        pretrain_steps: 10,
        ..small_run()
    };
    let ck = pretrained(&cfg, &records, &plan);
    let cv = cross_validate(&cfg, &records, &plan, Some(&ck)).unwrap();
    assert_eq!(cv.folds.len(), 5);
    let mut out = Vec::new();
    cv.write_csv(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    // Header, then 3 tasks x 2 splits for each of 5 folds and the mean.
    assert_eq!(text.lines().count(), 1 + 6 * 6);
    assert!(text.contains("mean/independent,pathology,"));

    let rows = ablate(&cfg, &records, &plan, &[0, 1]).unwrap();
    assert_eq!(rows.len(), 6);
    let mut out = Vec::new();
    write_ablation_csv(&mut out, &rows).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert!(text.starts_with("variant,seed,split,task,acc,auc,spe,sen,n\n"));
    assert_eq!(text.lines().count(), 1 + 6 * 6);
    assert!(text.contains("\nno_dwefm,1,independent,idh,"));
}
