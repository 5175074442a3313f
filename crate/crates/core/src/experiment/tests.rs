use super::*;
use crate::config::apply;

fn tiny() -> ExperimentConfig {
    ExperimentConfig {
        synthetic: SyntheticFamilySpec {
            n_sources: 2,
            n_targets: 1,
            latent_vocab: 20,
            vocab_size: 20,
            source_sentences: 40,
            target_sentences: 60,
            dev_sentences: 4,
            test_sentences: 5,
            embedding_dim: 8,
            seed: 2,
            ..Default::default()
        },
        model: ModelConfig {
            d_model: 8,
            n_layer: 1,
            n_head: 2,
            d_ff: 8,
            max_len: 16,
            dropout: 0.0,
        },
        ulr: UlrConfig {
            slots: 8,
            ..Default::default()
        },
        meta: MetaConfig {
            total_updates: 2,
            d_size: 16,
            dprime_size: 16,
            eval_every: 1,
            validation_budget: 60,
            validation_learn: LearnConfig {
                max_steps: 2,
                ..Default::default()
            },
            ..Default::default()
        },
        learn: LearnConfig {
            max_steps: 3,
            eval_every: 1,
            batch_tokens: 64,
            ..Default::default()
        },
        budgets: vec![80],
        seeds: vec![1],
        ..Default::default()
    }
}

#[test]
fn init_kind_names_round_trip() {
    for k in InitKind::ALL {
        assert_eq!(k.as_str().parse::<InitKind>().unwrap(), k);
    }
    assert!("maml".parse::<InitKind>().is_err());
}

#[test]
fn single_cell_grid() {
    let lab = Lab::open(ExperimentConfig {
        inits: vec![InitKind::Random],
        zero_shot: false,
        ..tiny()
    })
    .unwrap();
    let mut log = MetricsLog::in_memory();
    let report = run_grid(&lab, &mut log, None).unwrap();
    assert_eq!(report.results.len(), 1);
    assert_eq!(report.summary.len(), 1);
    assert_eq!(report.summary[0].n, 1);
    assert_eq!(report.summary[0].std, 0.0);
    let table = summary_table(&report.summary);
    assert_eq!(table.lines().count(), 2);
    assert!(table.starts_with("init"));
}

#[test]
fn grid_is_reproducible_and_counts_records() {
    let cfg = ExperimentConfig {
        seeds: vec![1, 2],
        inits: vec![InitKind::Random, InitKind::Meta],
        ..tiny()
    };
    let lab = Lab::open(cfg.clone()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut log = MetricsLog::in_memory();
    let first = run_grid(&lab, &mut log, Some(dir.path())).unwrap();
    // 2 seeds × 2 inits × (zero-shot + one budget)
    assert_eq!(first.results.len(), 8);
    let fine_tune_records: Vec<_> = log
        .records()
        .iter()
        .filter(|r| r.strategy.as_deref() == Some("all"))
        .collect();
    // per run: dev at steps 0..=3, then one test record
    assert_eq!(fine_tune_records.len(), 4 * 5);
    assert!(first.summary.iter().all(|r| r.n == 2));
    assert_eq!(first.curves.len(), 2);

    let again = run_grid(&lab, &mut MetricsLog::in_memory(), None).unwrap();
    assert_eq!(first.results, again.results);

    let from_disk = Lab::open(ExperimentConfig {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..cfg
    })
    .unwrap();
    let loaded = run_grid(&from_disk, &mut MetricsLog::in_memory(), None).unwrap();
    assert_eq!(first.results, loaded.results);

    let csv = dir.path().join("summary.csv");
    write_summary_csv(&first.summary, &csv).unwrap();
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("init,target,budget,strategy,n,mean,std"));
    assert_eq!(text.lines().count(), 1 + first.summary.len());
}

#[test]
fn missing_checkpoint_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let lab = Lab::open(ExperimentConfig {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        inits: vec![InitKind::Multilingual],
        ..tiny()
    })
    .unwrap();
    let err = run_grid(&lab, &mut MetricsLog::in_memory(), None).unwrap_err();
    assert!(err.to_string().contains("multilingual"), "{err}");
}

#[test]
fn transfer_records_chosen_source() {
    let lab = Lab::open(tiny()).unwrap();
    let ck = lab.pretrain(InitKind::Transfer, 3, &mut MetricsLog::in_memory()).unwrap();
    assert!(ck.source.as_deref().is_some_and(|s| s.starts_with("src")));
    let fixed = Lab::open(ExperimentConfig {
        transfer_source: Some("src1".into()),
        ..tiny()
    })
    .unwrap();
    let ck = fixed.pretrain(InitKind::Transfer, 3, &mut MetricsLog::in_memory()).unwrap();
    assert_eq!(ck.source.as_deref(), Some("src1"));
}

#[test]
fn mean_std_matches_hand_values() {
    let (m, s) = mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
    assert_eq!(m, 5.0);
    assert!((s - (32.0f64 / 7.0).sqrt()).abs() < 1e-12);
    assert!(mean_std(&[]).0.is_nan());
}

#[test]
fn config_file_overrides() {
    let kv = crate::config::parse_assignments(
        "inits = random, meta\nstrategies = emb+enc, emb\nmeta.validation_task = tgt0\nbudgets = 4000,16000\nulr.sign = literal\n",
        Path::new("grid.cfg"),
    )
    .unwrap();
    let cfg = apply(&ExperimentConfig::default(), &kv).unwrap();
    assert_eq!(cfg.inits, vec![InitKind::Random, InitKind::Meta]);
    assert_eq!(cfg.strategies, vec![FineTuneStrategy::EmbEnc, FineTuneStrategy::Emb]);
    assert_eq!(cfg.meta.validation_task.as_deref(), Some("tgt0"));
    assert_eq!(cfg.budgets, vec![4000, 16000]);
    assert_eq!(cfg.ulr.sign, SimilaritySign::Literal);
}

#[test]
fn validation_source_overlap_rejected() {
    let mut cfg = tiny();
    cfg.meta.validation_task = Some("src0".into());
    let lab = Lab::open(cfg).unwrap();
    assert!(lab.pretrain(InitKind::Meta, 1, &mut MetricsLog::in_memory()).is_err());
}

#[test]
fn random_models_pass_gradcheck() {
    let checks = random_model_gradcheck(3, 2000, 7, 1e-5, 1e-4).unwrap();
    assert_eq!(checks.len(), 3);
    for c in &checks {
        assert!(c.params <= 2000);
        assert!(c.passed, "{c:?}");
    }
}
