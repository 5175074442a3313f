use super::transformer::Translator;
use super::vocab::{BOS, EOS};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::params::{ParamSet, TrainableSet};
use crate::ulr::LanguageLexicon;

/// Greedy decoding of a batch of source sentences. Each output stops before
/// `<eos>` or after `max_steps` tokens; ties go to the lowest token id.
pub fn greedy_decode(
    model: &Translator<'_>,
    params: &ParamSet,
    lexicon: &LanguageLexicon,
    sources: &[&[usize]],
    max_steps: usize,
) -> Result<Vec<Vec<usize>>> {
    if max_steps > model.config.max_len {
        return Err(Error::InvalidArgument(format!(
            "max_steps {max_steps} exceeds max_len {}",
            model.config.max_len
        )));
    }
    if sources.is_empty() || max_steps == 0 {
        return Ok(vec![Vec::new(); sources.len()]);
    }
    let mut g = Graph::new();
    let vars = params.register(&mut g, &TrainableSet::new());
    let enc = model.encode(&mut g, &vars, lexicon, sources, None)?;
    let batch = sources.len();
    let mut prefixes = vec![vec![BOS]; batch];
    let mut done = vec![false; batch];
    let mut out = vec![Vec::new(); batch];
    for step in 0..max_steps {
        let logits = model.decoder_logits(&mut g, &vars, &enc, &prefixes, None)?;
        let len = step + 1;
        let value = g.value(logits);
        for b in 0..batch {
            let row = value.row(b * len + step);
            let best = argmax(row);
            if !done[b] {
                if best == EOS {
                    done[b] = true;
                } else {
                    out[b].push(best);
                }
            }
            prefixes[b].push(best);
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    Ok(out)
}

/// Index of the largest entry; the first one wins ties.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
