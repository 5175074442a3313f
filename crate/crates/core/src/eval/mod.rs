//! BLEU, translation of whole splits, and the metrics log.

mod bleu;

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{greedy_decode, SentencePair, Translator};
use crate::params::ParamSet;
use crate::tasks::Task;
use crate::ulr::LanguageLexicon;

pub use bleu::{bleu, BleuConfig};

/// Sentences decoded together.
pub const DECODE_BATCH: usize = 64;

/// Greedy translations of the sources of `pairs`.
pub fn translate(
    model: &Translator<'_>,
    params: &ParamSet,
    lexicon: &LanguageLexicon,
    pairs: &[SentencePair],
) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(DECODE_BATCH) {
        let sources: Vec<&[usize]> = chunk.iter().map(|p| p.source.as_slice()).collect();
        out.extend(greedy_decode(model, params, lexicon, &sources, model.config.max_len)?);
    }
    Ok(out)
}

/// BLEU of greedy translations of `pairs` against their targets.
pub fn score(
    model: &Translator<'_>,
    params: &ParamSet,
    lexicon: &LanguageLexicon,
    pairs: &[SentencePair],
    cfg: BleuConfig,
) -> Result<f64> {
    let hyps = translate(model, params, lexicon, pairs)?;
    let refs: Vec<Vec<usize>> = pairs.iter().map(|p| p.target.clone()).collect();
    bleu(&hyps, &refs, cfg)
}

/// Test BLEU of `theta0` on `task` with no adaptation: the task's delta is
/// zero (or absent) and nothing is updated.
pub fn zero_shot_eval(model: &Translator<'_>, theta0: &ParamSet, task: &Task, cfg: BleuConfig) -> Result<f64> {
    if task.lexicon.query_dim() != model.ulr.query_dim() {
        return Err(Error::shape(
            "zero-shot lexicon",
            task.lexicon.query.shape(),
            model.ulr.key.shape(),
        ));
    }
    let mut params = theta0.clone();
    let delta = crate::ulr::delta_name(&task.name);
    if let Ok(d) = params.get_mut(&delta) {
        d.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    score(model, &params, &task.lexicon, &task.test, cfg)
}

/// One evaluation event.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run: String,
    pub seed: u64,
    pub step: usize,
    pub task: String,
    pub split: String,
    pub loss: Option<f64>,
    pub bleu: Option<f64>,
    pub budget: Option<usize>,
    /// Seconds since the run started.
    pub wall_clock: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
}

/// Append-only list of records, mirrored to a JSON-lines file when opened
/// with a path.
#[derive(Default)]
pub struct MetricsLog {
    records: Vec<MetricsRecord>,
    sink: Option<(PathBuf, BufWriter<File>)>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn append_to(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(MetricsLog {
            records: Vec::new(),
            sink: Some((path.to_path_buf(), BufWriter::new(f))),
        })
    }

    pub fn push(&mut self, rec: MetricsRecord) -> Result<()> {
        if let Some((path, w)) = self.sink.as_mut() {
            let line = serde_json::to_string(&rec)?;
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(path.as_path(), e))?;
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<MetricsRecord> {
        self.records
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}
