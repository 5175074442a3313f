use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{InitKind, Lab};
use crate::error::{Error, Result};
use crate::eval::MetricsLog;
use crate::metalearn::CurvePoint;

/// Strategy label of zero-shot cells, whose budget is 0.
pub const ZERO_SHOT: &str = "zero-shot";

pub fn checkpoint_path(dir: &Path, init: InitKind, seed: u64) -> PathBuf {
    dir.join(format!("{init}-seed{seed}.json"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub init: InitKind,
    pub target: String,
    pub budget: usize,
    pub strategy: String,
    pub seed: u64,
    pub bleu: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub init: InitKind,
    pub target: String,
    pub budget: usize,
    pub strategy: String,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

/// Validation curve of one pretraining run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub init: InitKind,
    pub seed: u64,
    pub source: Option<String>,
    pub points: Vec<CurvePoint>,
}

#[derive(Clone, Debug, Default)]
pub struct GridReport {
    pub results: Vec<CellResult>,
    pub summary: Vec<SummaryRow>,
    pub curves: Vec<CurveRecord>,
}

impl GridReport {
    /// BLEU per seed of one cell, averaged over targets when `target` is `None`.
    pub fn per_seed(&self, init: InitKind, target: Option<&str>, budget: usize, strategy: &str) -> BTreeMap<u64, f64> {
        let mut acc: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
        for r in &self.results {
            if r.init == init
                && r.budget == budget
                && r.strategy == strategy
                && target.is_none_or(|t| t == r.target)
            {
                let e = acc.entry(r.seed).or_default();
                e.0 += r.bleu;
                e.1 += 1;
            }
        }
        acc.into_iter().map(|(s, (t, n))| (s, t / n as f64)).collect()
    }

    pub fn mean(&self, init: InitKind, target: Option<&str>, budget: usize, strategy: &str) -> Option<f64> {
        let v: Vec<f64> = self.per_seed(init, target, budget, strategy).into_values().collect();
        (!v.is_empty()).then(|| mean_std(&v).0)
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean and deviation over seeds for every (init, target, budget, strategy).
pub fn summarize(results: &[CellResult]) -> Vec<SummaryRow> {
    let mut cells: BTreeMap<(InitKind, String, usize, String), Vec<f64>> = BTreeMap::new();
    for r in results {
        cells
            .entry((r.init, r.target.clone(), r.budget, r.strategy.clone()))
            .or_default()
            .push(r.bleu);
    }
    cells
        .into_iter()
        .map(|((init, target, budget, strategy), v)| {
            let (mean, std) = mean_std(&v);
            SummaryRow {
                init,
                target,
                budget,
                strategy,
                n: v.len(),
                mean,
                std,
            }
        })
        .collect()
}

pub fn write_summary_csv(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Human-readable, column-aligned form of the summary.
pub fn summary_table(rows: &[SummaryRow]) -> String {
    let header = ["init", "target", "budget", "strategy", "n", "bleu"];
    let body: Vec<[String; 6]> = rows
        .iter()
        .map(|r| {
            [
                r.init.to_string(),
                r.target.clone(),
                r.budget.to_string(),
                r.strategy.clone(),
                r.n.to_string(),
                format!("{:.2} ± {:.2}", r.mean, r.std),
            ]
        })
        .collect();
    let mut width = header.map(|h| h.chars().count());
    for row in &body {
        for (w, c) in width.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&width)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = vec![line(header.to_vec())];
    out.extend(body.iter().map(|r| line(r.iter().map(String::as_str).collect())));
    out.join("\n") + "\n"
}

/// Fine-tunes every configured initialization on every target under every
/// budget, strategy and seed, and scores the test splits. Pretrained
/// initializations are saved to `save_dir` when given.
pub fn run_grid(lab: &Lab, log: &mut MetricsLog, save_dir: Option<&Path>) -> Result<GridReport> {
    let cfg = &lab.config;
    let targets = lab.targets()?;
    if targets.is_empty() {
        return Err(Error::InvalidArgument("the grid needs at least one target task".into()));
    }
    let mut report = GridReport::default();
    for &seed in &cfg.seeds {
        for &init in &cfg.inits {
            let ck = lab.initialization(init, seed, log)?;
            if let Some(dir) = save_dir {
                ck.save(&checkpoint_path(dir, init, seed))?;
            }
            if !ck.curve.is_empty() {
                report.curves.push(CurveRecord {
                    init,
                    seed,
                    source: ck.source.clone(),
                    points: ck.curve.clone(),
                });
            }
            for task in &targets {
                let mut push = |budget, strategy: &str, bleu| {
                    log::info!("{init} seed {seed} {} budget {budget} {strategy}: BLEU {bleu:.2}", task.name);
                    report.results.push(CellResult {
                        init,
                        target: task.name.clone(),
                        budget,
                        strategy: strategy.to_string(),
                        seed,
                        bleu,
                    });
                };
                if cfg.zero_shot {
                    let run = format!("{init}-zero-{}-seed{seed}", task.name);
                    push(0, ZERO_SHOT, lab.zero_shot(&ck, task, log, &run)?);
                }
                for &budget in &cfg.budgets {
                    for &strategy in &cfg.strategies {
                        let run = format!("{init}-{}-{budget}-{strategy}-seed{seed}", task.name);
                        let tuned = lab.fine_tune(&ck, task, budget, strategy, seed, log, &run)?;
                        push(budget, strategy.as_str(), tuned.test_bleu);
                    }
                }
            }
        }
    }
    report.summary = summarize(&report.results);
    Ok(report)
}
