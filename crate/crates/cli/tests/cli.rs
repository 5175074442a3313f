use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
synthetic.n_sources = 2
synthetic.n_targets = 1
synthetic.latent_vocab = 20
synthetic.vocab_size = 20
synthetic.source_sentences = 40
synthetic.target_sentences = 60
synthetic.dev_sentences = 4
synthetic.test_sentences = 5
synthetic.embedding_dim = 8
model.d_model = 8
model.n_layer = 1
model.n_head = 2
model.d_ff = 8
model.max_len = 16
model.dropout = 0
ulr.slots = 8
meta.total_updates = 2
meta.eval_every = 1
meta.d_size = 16
meta.dprime_size = 16
meta.validation_budget = 60
meta.validation_learn.max_steps = 2
learn.max_steps = 3
learn.batch_tokens = 64
budgets = 80
seeds = 1
";

fn metatrans(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metatrans"))
        .args(args)
        .env("METATRANS_OUT", dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn setup() -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let cfg = cfg.to_string_lossy().into_owned();
    (dir, cfg)
}

#[test]
fn usage_errors_exit_one() {
    let (dir, cfg) = setup();
    assert_eq!(metatrans(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(metatrans(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(metatrans(dir.path(), &["grid", "--set", "no.such.key=1"]).status.code(), Some(1));
    let o = metatrans(dir.path(), &["finetune", "--config", &cfg, "--checkpoint", "missing.json", "--task", "tgt0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.json"));
}

#[test]
fn pipeline_from_generate_to_evaluate() {
    let (dir, cfg) = setup();
    let root = dir.path();
    let o = metatrans(root, &["generate", "--config", &cfg]);
    assert!(o.status.success(), "{o:?}");
    let manifest = root.join("generate/manifest.json");
    assert!(manifest.exists());
    let fam = manifest.to_string_lossy().into_owned();

    let o = metatrans(root, &["metatrain", "--config", &cfg, "--family", &fam, "--seed", "2"]);
    assert!(o.status.success(), "{o:?}");
    let ck = root.join("metatrain/checkpoints/meta-seed2.json");
    assert!(ck.exists());
    assert!(root.join("metatrain/config.json").exists());
    let metrics = std::fs::read_to_string(root.join("metatrain/metrics.jsonl")).unwrap();
    assert!(metrics.lines().count() >= 3);
    let ck = ck.to_string_lossy().into_owned();

    let o = metatrans(root, &["finetune", "--config", &cfg, "--family", &fam, "--checkpoint", &ck, "--task", "tgt0", "--budget", "80", "--strategy", "emb+enc"]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("test BLEU"));

    let o = metatrans(root, &["evaluate", "--config", &cfg, "--family", &fam, "--checkpoint", &ck, "--task", "tgt0", "--zero-shot"]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).starts_with("test BLEU"));

    let o = metatrans(root, &["evaluate", "--config", &cfg, "--family", &fam, "--checkpoint", &ck, "--task", "tgt0", "--split", "train"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn grid_writes_summary_and_metrics() {
    let (dir, cfg) = setup();
    let out = dir.path().join("g");
    let o = metatrans(dir.path(), &["grid", "--config", &cfg, "--set", "inits=random,multilingual", "--out", &out.to_string_lossy()]);
    assert!(o.status.success(), "{o:?}");
    let csv = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(csv.starts_with("init,target,budget,strategy,n,mean,std"));
    assert_eq!(csv.lines().count(), 5);
    assert!(out.join("metrics.jsonl").exists());
    assert!(out.join("checkpoints/multilingual-seed1.json").exists());
    assert!(stdout(&o).lines().next().unwrap().starts_with("init"));
}

#[test]
fn gradcheck_exit_codes() {
    let (dir, _) = setup();
    let o = metatrans(dir.path(), &["gradcheck", "--models", "2"]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("all 2 models"));
    let o = metatrans(dir.path(), &["gradcheck", "--models", "1", "--tolerance", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_exits_two() {
    let (dir, cfg) = setup();
    let o = metatrans(dir.path(), &["metatrain", "--config", &cfg, "--set", "meta.divergence_loss=0"]);
    assert_eq!(o.status.code(), Some(2), "{o:?}");
}
