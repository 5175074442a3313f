use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Word vectors as read from a `count dim` text file.
#[derive(Clone, Debug, PartialEq)]
pub struct WordVectors {
    pub words: Vec<String>,
    /// `words.len() × dim`
    pub vectors: Tensor,
}

impl WordVectors {
    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn position(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }
}

pub fn read_embeddings(path: &Path) -> Result<WordVectors> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| err(1, "empty embedding file".into()))?;
    let head: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| err(1, format!("bad header `{header}`")))?;
    let [count, dim] = head[..] else {
        return Err(err(1, format!("header must be `count dim`, got `{header}`")));
    };
    let mut words = Vec::with_capacity(count);
    let mut data = Vec::with_capacity(count * dim);
    for (n, line) in lines {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(' ').filter(|s| !s.is_empty());
        let word = parts.next().unwrap().to_string();
        let before = data.len();
        for p in parts {
            let v: f64 = p
                .parse()
                .map_err(|_| err(n + 1, format!("bad number `{p}`")))?;
            if !v.is_finite() {
                return Err(err(n + 1, format!("non-finite value `{p}`")));
            }
            data.push(v);
        }
        if data.len() - before != dim {
            return Err(err(n + 1, format!("expected {dim} values, got {}", data.len() - before)));
        }
        words.push(word);
    }
    if words.len() != count {
        return Err(err(1, format!("header says {count} words, found {}", words.len())));
    }
    Ok(WordVectors {
        vectors: Tensor::new(vec![count, dim], data)?,
        words,
    })
}

pub fn write_embeddings(path: &Path, vectors: &WordVectors) -> Result<()> {
    let mut out = format!("{} {}\n", vectors.words.len(), vectors.dim());
    for (i, w) in vectors.words.iter().enumerate() {
        out.push_str(w);
        for v in vectors.vectors.row(i) {
            write!(out, " {v}").unwrap();
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
