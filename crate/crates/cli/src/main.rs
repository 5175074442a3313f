use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use metatrans::checkpoint::Checkpoint;
use metatrans::config::{apply, parse_assignment, read_assignments};
use metatrans::eval::{score, MetricsLog};
use metatrans::experiment::{
    checkpoint_path, random_model_gradcheck, run_grid, summary_table, write_summary_csv, ExperimentConfig, InitKind,
    Lab,
};
use metatrans::model::{FineTuneStrategy, Translator};
use metatrans::tasks::generate_family;
use metatrans::{Error, Result};

/// Output root used when `--out` is not given.
const OUT_ENV: &str = "METATRANS_OUT";
const DEFAULT_OUT: &str = "runs";

#[derive(Parser, Debug)]
#[command(name = "metatrans", version, about = "Meta-learning for low-resource translation on synthetic task families")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// `key = value` configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable), e.g. `--set meta.inner_lr=0.05`
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Family manifest to load instead of generating one
    #[arg(long, global = true)]
    family: Option<PathBuf>,
    /// Output directory (default: $METATRANS_OUT/<command>)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// More log output (-v debug, -vv trace)
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic task family to disk
    Generate,
    /// Meta-learn an initialization over the source tasks
    Metatrain(Pretrain),
    /// Train a multilingual initialization over the source tasks
    Multitrain(Pretrain),
    /// Pretrain on a single source task
    Transfer {
        #[command(flatten)]
        run: Pretrain,
        /// Source task (default: the best by validation score)
        #[arg(long)]
        source: Option<String>,
    },
    /// Fine-tune a checkpoint on one task and report test BLEU
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: String,
        /// Target-token budget of the training subsample
        #[arg(long, default_value_t = 16_000)]
        budget: usize,
        #[arg(long, default_value = "all")]
        strategy: FineTuneStrategy,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Score a checkpoint on one task without training
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: String,
        /// `test` or `dev`
        #[arg(long, default_value = "test")]
        split: String,
        /// Reset the task's delta table to zero first
        #[arg(long)]
        zero_shot: bool,
    },
    /// Run the init × budget × strategy × seed comparison
    Grid,
    /// Check analytic gradients of random small models against finite differences
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        models: usize,
        #[arg(long, default_value_t = 2000)]
        max_params: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

#[derive(Args, Debug)]
struct Pretrain {
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

enum Failure {
    Usage(String),
    Numerical(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn resolve_config(c: &Common) -> Result<ExperimentConfig> {
    let mut kv = match &c.config {
        Some(p) => read_assignments(p)?,
        None => Vec::new(),
    };
    for s in &c.overrides {
        kv.push(parse_assignment(s)?);
    }
    let mut cfg = apply(&ExperimentConfig::default(), &kv)?;
    if let Some(f) = &c.family {
        cfg.family = Some(f.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(c: &Common, command: &str) -> PathBuf {
    c.out.clone().unwrap_or_else(|| {
        std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
            .join(command)
    })
}

fn prepare(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("config.json");
    let text = serde_json::to_string_pretty(cfg)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Generate => "generate",
        Command::Metatrain(_) => "metatrain",
        Command::Multitrain(_) => "multitrain",
        Command::Transfer { .. } => "transfer",
        Command::Finetune { .. } => "finetune",
        Command::Evaluate { .. } => "evaluate",
        Command::Grid => "grid",
        Command::Gradcheck { .. } => "gradcheck",
    }
}

fn pretrain(lab: &Lab, dir: &Path, init: InitKind, seed: u64) -> Result<()> {
    let mut log = MetricsLog::append_to(&dir.join("metrics.jsonl"))?;
    let ck = lab.pretrain(init, seed, &mut log)?;
    let path = checkpoint_path(&dir.join("checkpoints"), init, seed);
    ck.save(&path)?;
    if let Some(src) = &ck.source {
        println!("source\t{src}");
    }
    if let Some(best) = ck.curve.iter().max_by(|a, b| a.bleu.total_cmp(&b.bleu)) {
        println!("best validation BLEU\t{:.2}\t(step {})", best.bleu, best.step);
    }
    println!("checkpoint\t{}", path.display());
    Ok(())
}

fn load_checkpoint(lab: &Lab, path: &Path) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    lab.check_compatible(&ck, path)?;
    Ok(ck)
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    let name = command_name(&cli.command);
    let mut cfg = resolve_config(&cli.common)?;
    let dir = out_dir(&cli.common, name);
    if let Command::Transfer { source: Some(s), .. } = &cli.command {
        cfg.transfer_source = Some(s.clone());
    }
    match cli.command {
        Command::Generate => {
            prepare(&dir, &cfg)?;
            let family = generate_family(&cfg.synthetic)?;
            let manifest = family.write(&dir)?;
            println!(
                "wrote {} source and {} target languages to {}",
                manifest.sources.len(),
                manifest.targets.len(),
                dir.display()
            );
        }
        Command::Metatrain(p) => {
            prepare(&dir, &cfg)?;
            pretrain(&Lab::open(cfg)?, &dir, InitKind::Meta, p.seed)?;
        }
        Command::Multitrain(p) => {
            prepare(&dir, &cfg)?;
            pretrain(&Lab::open(cfg)?, &dir, InitKind::Multilingual, p.seed)?;
        }
        Command::Transfer { run, .. } => {
            prepare(&dir, &cfg)?;
            pretrain(&Lab::open(cfg)?, &dir, InitKind::Transfer, run.seed)?;
        }
        Command::Finetune {
            checkpoint,
            task,
            budget,
            strategy,
            seed,
        } => {
            if budget == 0 {
                return Err(Failure::Usage("--budget must be at least 1".into()));
            }
            prepare(&dir, &cfg)?;
            let lab = Lab::open(cfg)?;
            let ck = load_checkpoint(&lab, &checkpoint)?;
            let t = lab.family.task(&task)?;
            let mut log = MetricsLog::append_to(&dir.join("metrics.jsonl"))?;
            let run = format!("{}-{task}-{budget}-{strategy}-seed{seed}", ck.init);
            let tuned = lab.fine_tune(&ck, t, budget, strategy, seed, &mut log, &run)?;
            let path = dir.join(format!("{run}.json"));
            Checkpoint {
                params: tuned.params,
                curve: Vec::new(),
                ..ck
            }
            .save(&path)?;
            println!("test BLEU\t{:.2}", tuned.test_bleu);
            println!("checkpoint\t{}", path.display());
        }
        Command::Evaluate {
            checkpoint,
            task,
            split,
            zero_shot,
        } => {
            let lab = Lab::open(cfg)?;
            let ck = load_checkpoint(&lab, &checkpoint)?;
            let t = lab.family.task(&task)?;
            let pairs = match split.as_str() {
                "test" => &t.test,
                "dev" => &t.dev,
                other => return Err(Failure::Usage(format!("unknown split `{other}` (expected test or dev)"))),
            };
            let mut params = ck.params.clone();
            if zero_shot {
                if let Ok(d) = params.get_mut(&metatrans::ulr::delta_name(&task)) {
                    d.data_mut().iter_mut().for_each(|v| *v = 0.0);
                }
            }
            let model = Translator::new(&ck.model, &ck.ulr);
            let bleu = score(&model, &params, &t.lexicon, pairs, lab.config.bleu)?;
            println!("{split} BLEU\t{bleu:.2}");
        }
        Command::Grid => {
            prepare(&dir, &cfg)?;
            let lab = Lab::open(cfg)?;
            let mut log = MetricsLog::append_to(&dir.join("metrics.jsonl"))?;
            let report = run_grid(&lab, &mut log, Some(&dir.join("checkpoints")))?;
            write_summary_csv(&report.summary, &dir.join("summary.csv"))?;
            let curves = dir.join("curves.json");
            let text = serde_json::to_string_pretty(&report.curves).map_err(Error::from)?;
            std::fs::write(&curves, text + "\n")
                .map_err(|e| Error::io(&curves, e))?;
            print!("{}", summary_table(&report.summary));
        }
        Command::Gradcheck {
            models,
            max_params,
            seed,
            step,
            tolerance,
        } => {
            let checks = random_model_gradcheck(models, max_params, seed, step, tolerance)?;
            let mut failed = 0;
            for c in &checks {
                println!(
                    "model {:>3}  params {:>5}  worst {:.3e} ({})  {}",
                    c.index,
                    c.params,
                    c.worst_error,
                    c.worst_param,
                    if c.passed { "ok" } else { "FAIL" }
                );
                failed += usize::from(!c.passed);
            }
            if failed > 0 {
                return Err(Failure::Numerical(format!(
                    "gradient check: {failed} of {} models above tolerance {tolerance:e}",
                    checks.len()
                )));
            }
            println!("all {} models within {tolerance:e}", checks.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.common.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp_secs()
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
